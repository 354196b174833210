//! Central finite-difference verification of the analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, bce_loss, forward_batch, init_params, one_hot, Mode, ModelParams, PARAM_NAMES};
use crate::bits::BitGrid;
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, serde::Serialize)]
pub struct TensorCheck {
    pub name: &'static str,
    pub sampled: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinates checked with a reduced step because `±step` crossed a
    /// ReLU or max-pool switch.
    pub reduced_step: usize,
    /// Coordinates replaced because no step kept both sides on one
    /// piece, e.g. an exact max-pool tie.
    pub replaced: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Step reductions tried when `±step` straddles a kink.
const STEP_REDUCTIONS: [f64; 3] = [1.0, 0.1, 0.01];

/// Loss plus the piecewise-linear pattern it was computed on: every ReLU
/// sign and every max-pool winner. Equal patterns on both sides of a
/// central difference mean the loss is smooth in between.
fn batch_loss(
    params: &ModelParams<f64>,
    images: &[&BitGrid],
    labels: &[u8],
    dropout_p: f64,
    dropout_seed: u64,
) -> Result<(f64, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let cache = forward_batch(params, images, Mode::Train, dropout_p, Some(&mut rng))?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(b, &l)| bce_loss(cache.probs_of(b), one_hot(l)))
        .sum();
    let positive = |v: &Vec<f64>| v.iter().map(|&x| u8::from(x > 0.0)).collect::<Vec<u8>>();
    let mut pattern = positive(&cache.z1);
    pattern.extend_from_slice(&cache.p1_arg);
    pattern.extend(positive(&cache.z2));
    pattern.extend_from_slice(&cache.p2_arg);
    pattern.extend(positive(&cache.h_pre));
    Ok((total / labels.len() as f64, pattern))
}

/// Compares analytic gradients with `(L(θ+h) - L(θ-h)) / 2h` on up to
/// `samples_per_tensor` coordinates of every tensor. The dropout mask is
/// held fixed by reseeding the same stream for every evaluation.
///
/// Binary inputs make many pre-activations exactly equal, so a whole
/// block of units can sit within `h` of a ReLU or pooling switch. The
/// central difference is only a valid oracle when both sides lie on the
/// same linear piece; otherwise `h` is cut by 10 (twice), and a
/// coordinate still straddling a switch is replaced by a fresh one.
pub fn gradient_check(
    params: &ModelParams<f64>,
    images: &[&BitGrid],
    labels: &[u8],
    dropout_p: f64,
    dropout_seed: u64,
    samples_per_tensor: usize,
    step: f64,
    sample_seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let cache = forward_batch(params, images, Mode::Train, dropout_p, Some(&mut rng))?;
    let grads = backward(params, &cache, labels)?;

    let mut pick = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut probe = params.clone();
    let mut tensors = Vec::new();
    for (ti, name) in PARAM_NAMES.iter().enumerate() {
        let len = params.tensors()[ti].len();
        let want = samples_per_tensor.min(len);
        let order = sample(&mut pick, len, len.min(want.saturating_mul(2).max(want + 16))).into_vec();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let (mut sampled, mut reduced_step, mut replaced) = (0, 0, 0);
        for &i in &order {
            if sampled == want {
                break;
            }
            let orig = params.tensors()[ti].data[i];
            let mut numeric = None;
            for (k, scale) in STEP_REDUCTIONS.iter().enumerate() {
                let h = step * scale;
                probe.tensors_mut()[ti].data[i] = orig + h;
                let (up, up_pattern) = batch_loss(&probe, images, labels, dropout_p, dropout_seed)?;
                probe.tensors_mut()[ti].data[i] = orig - h;
                let (down, down_pattern) = batch_loss(&probe, images, labels, dropout_p, dropout_seed)?;
                probe.tensors_mut()[ti].data[i] = orig;
                if up_pattern == down_pattern {
                    numeric = Some((up - down) / (2.0 * h));
                    reduced_step += usize::from(k > 0);
                    break;
                }
            }
            let Some(numeric) = numeric else {
                replaced += 1;
                continue;
            };
            let analytic = grads.tensors()[ti].data[i];
            max_rel = max_rel.max(relative_error(analytic, numeric));
            max_abs = max_abs.max((analytic - numeric).abs());
            sampled += 1;
        }
        tensors.push(TensorCheck {
            name,
            sampled,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            reduced_step,
            replaced,
        });
    }
    Ok(GradCheckReport { step, tensors })
}
/// Glorot-initialized parameters with biases drawn from `±0.1`, so that no
/// pre-activation sits exactly on a ReLU kink (a zero bias over an empty
/// input region would).
pub fn gradcheck_params(dim: usize, seed: u64) -> Result<ModelParams<f64>> {
    let mut p = init_params(dim, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for t in [&mut p.conv1_b, &mut p.conv2_b, &mut p.fc_b, &mut p.out_b] {
        for v in &mut t.data {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    Ok(p.cast())
}

