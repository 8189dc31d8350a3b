//! Model bundles: one `<f4` NPY file per parameter tensor in a directory.

use std::path::Path;

use super::model::ToyModel;
use super::tape::Matrix;
use crate::error::{Error, Result};
use crate::tensor_io::{load_f32_array, save_f32_array};

const NAMES: [&str; 6] = [
    "layer1_weight",
    "layer1_bias",
    "layer2_weight",
    "layer2_bias",
    "layer3_weight",
    "layer3_bias",
];

pub fn save_model(model: &ToyModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, m) in NAMES.iter().zip(model.tensor_list()) {
        let data: Vec<f32> = m.data().iter().map(|&v| v as f32).collect();
        save_f32_array(
            &[m.rows(), m.cols()],
            &data,
            dir.join(format!("{name}.npy")),
        )?;
    }
    Ok(())
}

/// Loads a bundle; the class count is read from the last layer.
pub fn load_model(dir: impl AsRef<Path>) -> Result<ToyModel> {
    let dir = dir.as_ref();
    let mut tensors = Vec::with_capacity(NAMES.len());
    for name in NAMES {
        let (shape, data) = load_f32_array(dir.join(format!("{name}.npy")))?;
        let [rows, cols] = shape[..] else {
            return Err(Error::Shape(format!("{name} must be 2D, got {shape:?}")));
        };
        tensors.push(Matrix::new(
            rows,
            cols,
            data.into_iter().map(f64::from).collect(),
        ));
    }
    let num_classes = tensors[5].cols();
    if num_classes < 2 {
        return Err(Error::Shape(format!(
            "bundle has {num_classes} output classes"
        )));
    }
    ToyModel::from_tensors(num_classes, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let model = ToyModel::new(3, 4);
        save_model(&model, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back.num_classes(), 3);
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(*a as f32, b as f32);
        }
    }

    #[test]
    fn missing_bundle_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Io { .. })));
    }
}
