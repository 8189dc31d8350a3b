//! The per-voxel evidence network standing in for the segmentation backbone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Features per voxel: intensity, its 6 face neighbours, 3 coordinates.
pub const FEATURES: usize = 10;
pub const HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    weight: Matrix,
    bias: Matrix,
}

impl Dense {
    fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Matrix::new(inputs, outputs, data),
            bias: Matrix::zeros(1, outputs),
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        let cols = y.cols();
        for chunk in y.data_mut().chunks_mut(cols) {
            for (d, b) in chunk.iter_mut().zip(self.bias.data()) {
                *d += b;
            }
        }
        y
    }
}

/// `F -> 16 (tanh) -> 16 (tanh) -> N` evidence logits, applied to each voxel
/// independently.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    num_classes: usize,
    layers: [Dense; 3],
}

/// Parameter leaves of a model bound to one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    vars: [Var; 6],
}

impl ToyModel {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            num_classes,
            layers: [
                Dense::init(FEATURES, HIDDEN, &mut rng),
                Dense::init(HIDDEN, HIDDEN, &mut rng),
                Dense::init(HIDDEN, num_classes, &mut rng),
            ],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Shapes of the six parameter tensors in [`params`](Self::params) order.
    pub fn param_shapes(&self) -> [(usize, usize); 6] {
        let n = self.num_classes;
        [
            (FEATURES, HIDDEN),
            (1, HIDDEN),
            (HIDDEN, HIDDEN),
            (1, HIDDEN),
            (HIDDEN, n),
            (1, n),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }

    fn tensors(&self) -> [&Matrix; 6] {
        let [a, b, c] = &self.layers;
        [&a.weight, &a.bias, &b.weight, &b.bias, &c.weight, &c.bias]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        let [a, b, c] = &mut self.layers;
        [
            &mut a.weight,
            &mut a.bias,
            &mut b.weight,
            &mut b.bias,
            &mut c.weight,
            &mut c.bias,
        ]
    }

    /// Flat parameter vector.
    pub fn params(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect()
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite parameter".into()));
        }
        let mut offset = 0;
        for m in self.tensors_mut() {
            let len = m.data().len();
            m.data_mut().copy_from_slice(&theta[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn with_params(&self, theta: &[f64]) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(theta)?;
        Ok(m)
    }

    /// Rebuilds a model from its six parameter tensors.
    pub fn from_tensors(num_classes: usize, tensors: Vec<Matrix>) -> Result<Self> {
        let mut model = Self::new(num_classes, 0);
        let shapes = model.param_shapes();
        if tensors.len() != 6
            || tensors
                .iter()
                .zip(shapes)
                .any(|(t, (r, c))| t.rows() != r || t.cols() != c)
        {
            return Err(Error::Shape(format!(
                "model tensors must have shapes {shapes:?}"
            )));
        }
        let theta: Vec<f64> = tensors
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect();
        model.set_params(&theta)?;
        Ok(model)
    }

    pub fn tensor_list(&self) -> Vec<Matrix> {
        self.tensors().into_iter().cloned().collect()
    }

    /// Evidence logits (Z x N) without recording a graph.
    pub fn logits(&self, features: &Matrix) -> Matrix {
        let [l1, l2, l3] = &self.layers;
        let h1 = l1.apply(features);
        let h1 = Matrix::new(
            h1.rows(),
            h1.cols(),
            h1.data().iter().map(|v| v.tanh()).collect(),
        );
        let h2 = l2.apply(&h1);
        let h2 = Matrix::new(
            h2.rows(),
            h2.cols(),
            h2.data().iter().map(|v| v.tanh()).collect(),
        );
        l3.apply(&h2)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let t = self.tensors();
        BoundModel {
            vars: [
                tape.leaf(t[0].clone()),
                tape.leaf(t[1].clone()),
                tape.leaf(t[2].clone()),
                tape.leaf(t[3].clone()),
                tape.leaf(t[4].clone()),
                tape.leaf(t[5].clone()),
            ],
        }
    }
}

impl BoundModel {
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Var {
        let [w1, b1, w2, b2, w3, b3] = self.vars;
        let z1 = tape.matmul(features, w1);
        let z1 = tape.add_row(z1, b1);
        let h1 = tape.tanh(z1);
        let z2 = tape.matmul(h1, w2);
        let z2 = tape.add_row(z2, b2);
        let h2 = tape.tanh(z2);
        let z3 = tape.matmul(h2, w3);
        tape.add_row(z3, b3)
    }

    /// Flat gradient in the same order as [`ToyModel::params`].
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        self.vars
            .iter()
            .flat_map(|&v| grads.get(v).data().to_vec())
            .collect()
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &[f64], student: &[f64], alpha: f64) -> Vec<f64> {
    teacher
        .iter()
        .zip(student)
        .map(|(&t, &s)| alpha * t + (1.0 - alpha) * s)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip_and_count() {
        let m = ToyModel::new(2, 3);
        assert_eq!(m.param_count(), 10 * 16 + 16 + 16 * 16 + 16 + 16 * 2 + 2);
        let theta = m.params();
        let back = ToyModel::new(2, 99).with_params(&theta).unwrap();
        assert_eq!(back, m);
        assert!(m.clone().set_params(&theta[1..]).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let m = ToyModel::new(3, 1);
        let x = Matrix::new(
            2,
            FEATURES,
            (0..2 * FEATURES).map(|v| v as f64 * 0.05 - 0.4).collect(),
        );
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let out = bound.forward(&mut tape, xv);
        let plain = m.logits(&x);
        for (a, b) in tape.value(out).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_edge_cases() {
        let t = [0.0, 1.0];
        let s = [1.0, 0.0];
        assert_eq!(ema_update(&t, &s, 0.0), s.to_vec());
        assert_eq!(ema_update(&t, &s, 1.0), t.to_vec());
        assert_eq!(ema_update(&t, &s, 0.5), vec![0.5, 0.5]);
    }
}
