//! A small CNN written from scratch: two 3×3 same-padded convolutions with
//! 32 channels, each followed by ReLU and 2×2 max pooling, dropout before a
//! 128-unit ReLU dense layer, and a 2-unit sigmoid head trained with mean
//! binary cross-entropy.

mod adam;
mod backward;
mod checkpoint;
mod forward;
mod gradcheck;
mod real;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use backward::{backward, loss_and_gradients};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub(crate) use forward::fingerprint;
pub use forward::{forward, forward_batch, forward_inputs, ForwardCache, Mode};
pub use gradcheck::{gradcheck_params, gradient_check, relative_error, GradCheckReport, TensorCheck, REL_ERR_FLOOR};
pub use real::{gemm, MatRef, Real};

pub const CHANNELS: usize = 32;
pub const HIDDEN: usize = 128;
pub const OUTPUTS: usize = 2;
pub const KERNEL: usize = 9;
/// Probability clamp applied before the logarithm in the loss.
pub const LOSS_CLAMP: f64 = 1e-7;

/// Dense tensor with a row-major shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Flattened feature count after two 2×2 poolings: `32 · (D/4)²`.
pub fn flat_features(dim: usize) -> usize {
    CHANNELS * (dim / 4) * (dim / 4)
}

pub const PARAM_NAMES: [&str; 8] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b", "out_w", "out_b",
];

/// Every weight and bias of the network for input size `dim × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub dim: usize,
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn shapes(dim: usize) -> [Vec<usize>; 8] {
        let f = flat_features(dim);
        [
            vec![CHANNELS, 1, 3, 3],
            vec![CHANNELS],
            vec![CHANNELS, CHANNELS, 3, 3],
            vec![CHANNELS],
            vec![HIDDEN, f],
            vec![HIDDEN],
            vec![OUTPUTS, HIDDEN],
            vec![OUTPUTS],
        ]
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        let [s0, s1, s2, s3, s4, s5, s6, s7] = Self::shapes(dim);
        Ok(ModelParams {
            dim,
            conv1_w: Tensor::zeros(&s0),
            conv1_b: Tensor::zeros(&s1),
            conv2_w: Tensor::zeros(&s2),
            conv2_b: Tensor::zeros(&s3),
            fc_w: Tensor::zeros(&s4),
            fc_b: Tensor::zeros(&s5),
            out_w: Tensor::zeros(&s6),
            out_b: Tensor::zeros(&s7),
        })
    }

    /// Tensors in checkpoint order.
    pub fn tensors(&self) -> [&Tensor<T>; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc_w,
            &self.fc_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            dim: self.dim,
            conv1_w: self.conv1_w.cast(),
            conv1_b: self.conv1_b.cast(),
            conv2_w: self.conv2_w.cast(),
            conv2_b: self.conv2_b.cast(),
            fc_w: self.fc_w.cast(),
            fc_b: self.fc_b.cast(),
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
        }
    }

    /// Checks that every tensor has the shape required by `dim`.
    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim)?;
        let shapes = Self::shapes(self.dim);
        for ((t, s), name) in self.tensors().iter().zip(shapes.iter()).zip(PARAM_NAMES) {
            if &t.shape != s || t.data.len() != s.iter().product::<usize>() {
                return Err(Error::ShapeMismatch(format!(
                    "{name} has shape {:?}, expected {s:?}",
                    t.shape
                )));
            }
        }
        Ok(())
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim < 4 || dim % 4 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "input dimension {dim} must be a positive multiple of 4"
        )));
    }
    Ok(())
}

/// Glorot-uniform weights (`±sqrt(6 / (fan_in + fan_out))`) drawn from a
/// ChaCha8 stream seeded with `seed`; biases start at zero.
pub fn init_params(dim: usize, seed: u64) -> Result<ModelParams<f32>> {
    let mut p = ModelParams::<f32>::zeros(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = flat_features(dim);
    let fill = |t: &mut Tensor<f32>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut t.data {
            *v = rng.gen_range(-bound..bound) as f32;
        }
    };
    fill(&mut p.conv1_w, KERNEL, CHANNELS * KERNEL, &mut rng);
    fill(&mut p.conv2_w, CHANNELS * KERNEL, CHANNELS * KERNEL, &mut rng);
    fill(&mut p.fc_w, f, HIDDEN, &mut rng);
    fill(&mut p.out_w, HIDDEN, OUTPUTS, &mut rng);
    Ok(p)
}

/// Mean over the two output units of the clamped binary cross-entropy.
pub fn bce_loss<T: Real>(probs: [T; 2], target: [T; 2]) -> T {
    let eps = T::from_f64(LOSS_CLAMP);
    let one = T::one();
    let mut total = T::zero();
    for (p, t) in probs.into_iter().zip(target) {
        let p = p.max(eps).min(one - eps);
        total += -(t * p.ln() + (one - t) * (one - p).ln());
    }
    total / T::from_f64(2.0)
}

/// One-hot target for a class label.
pub fn one_hot<T: Real>(label: u8) -> [T; 2] {
    if label == 0 {
        [T::one(), T::zero()]
    } else {
        [T::zero(), T::one()]
    }
}

/// Index of the larger probability; an exact tie goes to class 0.
pub fn predict_class<T: Real>(probs: [T; 2]) -> u8 {
    u8::from(probs[1] > probs[0])
}

#[inline]
pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_determinism() {
        let a = init_params(16, 7).unwrap();
        let b = init_params(16, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(flat_features(16), 512);
        assert_eq!(a.fc_w.shape, vec![128, 512]);
        assert!(a.conv1_b.data.iter().all(|&v| v == 0.0));
        assert!(a.fc_b.data.iter().all(|&v| v == 0.0));
        assert!(a.out_b.data.iter().all(|&v| v == 0.0));
        let c = init_params(16, 8).unwrap();
        assert_ne!(a.conv2_w, c.conv2_w);
        let bound = (6.0f64 / (288.0 + 288.0)).sqrt() as f32;
        assert!(a.conv2_w.data.iter().all(|v| v.abs() <= bound));
        assert!(init_params(18, 1).is_err());
    }

    #[test]
    fn loss_values() {
        let l: f64 = bce_loss([0.5, 0.5], [1.0, 0.0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l: f64 = bce_loss([1.0, 0.0], [1.0, 0.0]);
        assert!(l <= 1.2e-7);
        let l: f64 = bce_loss([0.9, 0.1], [1.0, 0.0]);
        assert!((l - (-(0.9f64).ln())).abs() < 1e-12);
        assert!((l - 0.105361).abs() < 1e-6);
    }

    #[test]
    fn class_prediction() {
        assert_eq!(predict_class([0.9f32, 0.2]), 0);
        assert_eq!(predict_class([0.3f32, 0.7]), 1);
        assert_eq!(predict_class([0.5f32, 0.5]), 0);
    }
}
