use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{flat_features, gemm, sigmoid, MatRef, ModelParams, Real, CHANNELS, HIDDEN, KERNEL, OUTPUTS};
use crate::bits::BitGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active with inverted scaling.
    Train,
    /// Deterministic inference, dropout disabled.
    Eval,
}

/// Activations kept from a forward pass. Convolution planes are laid out
/// channel-major across the batch: `[channel][sample][row][col]`.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub dim: usize,
    pub batch: usize,
    pub mode: Mode,
    pub params_fingerprint: u64,
    /// `[sample][D*D]`
    pub input: Vec<T>,
    /// conv1 pre-activation, `[C][B][D*D]`
    pub z1: Vec<T>,
    /// pooled ReLU(conv1), `[C][B][(D/2)²]`
    pub p1: Vec<T>,
    /// row-major index (0..4) of the max inside each 2×2 window
    pub p1_arg: Vec<u8>,
    /// im2col of `p1`, `[C*9][B*(D/2)²]`
    pub cols2: Vec<T>,
    /// conv2 pre-activation, `[C][B][(D/2)²]`
    pub z2: Vec<T>,
    /// pooled ReLU(conv2) flattened per sample, `[B][F]`
    pub flat: Vec<T>,
    /// window index for every flat entry, `[B][F]`
    pub p2_arg: Vec<u8>,
    /// dropout multipliers (0 or 1/(1-p)), train mode only
    pub mask: Option<Vec<T>>,
    /// dense layer input after dropout, `[B][F]`
    pub fc_in: Vec<T>,
    /// `[B][128]`
    pub h_pre: Vec<T>,
    /// `[B][2]`
    pub logits: Vec<T>,
    /// `[B][2]`
    pub probs: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn probs_of(&self, sample: usize) -> [T; 2] {
        [self.probs[2 * sample], self.probs[2 * sample + 1]]
    }
}

/// Order-sensitive hash of every parameter bit pattern.
pub(crate) fn fingerprint<T: Real>(params: &ModelParams<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in params.tensors() {
        for v in &t.data {
            h ^= v.as_f64().to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5);
        }
    }
    h ^ params.dim as u64
}

/// Single-image forward pass. `dropout_seed` only matters in train mode.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    image: &BitGrid,
    mode: Mode,
    dropout_p: f64,
    dropout_seed: u64,
) -> Result<([T; 2], ForwardCache<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let cache = forward_batch(params, &[image], mode, dropout_p, Some(&mut rng))?;
    Ok((cache.probs_of(0), cache))
}

/// Batched forward pass over binary images.
pub fn forward_batch<T: Real>(
    params: &ModelParams<T>,
    images: &[&BitGrid],
    mode: Mode,
    dropout_p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardCache<T>> {
    let d = params.dim;
    let dd = d * d;
    let mut input = vec![T::zero(); images.len() * dd];
    for (img, chunk) in images.iter().zip(input.chunks_mut(dd.max(1))) {
        if img.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "image is {}x{}, model expects {d}x{d}",
                img.dim(),
                img.dim()
            )));
        }
        img.fill_real(chunk);
    }
    forward_inputs(params, input, images.len(), mode, dropout_p, rng)
}

/// Forward pass over raw inputs laid out `[sample][D*D]`.
pub fn forward_inputs<T: Real>(
    params: &ModelParams<T>,
    input: Vec<T>,
    batch: usize,
    mode: Mode,
    dropout_p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardCache<T>> {
    params.validate()?;
    let d = params.dim;
    let dd = d * d;
    if input.len() != batch * dd {
        return Err(Error::ShapeMismatch(format!(
            "input holds {} values, expected {batch} x {dd}",
            input.len()
        )));
    }
    if mode == Mode::Train && !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::InvalidConfig(format!("dropout {dropout_p} outside [0, 1)")));
    }
    let h1 = d / 2;
    let p1n = h1 * h1;
    let h2 = d / 4;
    let p2n = h2 * h2;
    let f = flat_features(d);

    // conv1 as a scatter of the (sparse) nonzero inputs
    let mut z1 = vec![T::zero(); CHANNELS * batch * dd];
    for b in 0..batch {
        let nz = nonzeros(&input[b * dd..(b + 1) * dd], d);
        for c in 0..CHANNELS {
            let w = &params.conv1_w.data[c * KERNEL..(c + 1) * KERNEL];
            let out = &mut z1[(c * batch + b) * dd..(c * batch + b + 1) * dd];
            out.fill(params.conv1_b.data[c]);
            conv3x3_scatter(&nz, w, d, out);
        }
    }

    let mut p1 = vec![T::zero(); CHANNELS * batch * p1n];
    let mut p1_arg = vec![0u8; CHANNELS * batch * p1n];
    for plane in 0..CHANNELS * batch {
        pool_relu(
            &z1[plane * dd..(plane + 1) * dd],
            d,
            &mut p1[plane * p1n..(plane + 1) * p1n],
            &mut p1_arg[plane * p1n..(plane + 1) * p1n],
        );
    }

    let cols2 = im2col(&p1, CHANNELS, batch, h1);
    let n2 = batch * p1n;
    let mut z2 = vec![T::zero(); CHANNELS * n2];
    for c in 0..CHANNELS {
        z2[c * n2..(c + 1) * n2].fill(params.conv2_b.data[c]);
    }
    gemm(
        MatRef::rm(&params.conv2_w.data, CHANNELS, CHANNELS * KERNEL),
        MatRef::rm(&cols2, CHANNELS * KERNEL, n2),
        T::one(),
        &mut z2,
    );

    let mut flat = vec![T::zero(); batch * f];
    let mut p2_arg = vec![0u8; batch * f];
    for c in 0..CHANNELS {
        for b in 0..batch {
            let src = &z2[(c * batch + b) * p1n..(c * batch + b + 1) * p1n];
            let off = b * f + c * p2n;
            pool_relu(src, h1, &mut flat[off..off + p2n], &mut p2_arg[off..off + p2n]);
        }
    }

    let (mask, fc_in) = match (mode, rng) {
        (Mode::Train, Some(rng)) => {
            let scale = T::from_f64(1.0 / (1.0 - dropout_p));
            let mask: Vec<T> = (0..batch * f)
                .map(|_| if rng.gen::<f64>() < dropout_p { T::zero() } else { scale })
                .collect();
            let fc_in = flat.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            (Some(mask), fc_in)
        }
        (Mode::Train, None) => return Err(Error::InvalidConfig("train mode needs a dropout rng".into())),
        (Mode::Eval, _) => (None, flat.clone()),
    };

    let mut h_pre = vec![T::zero(); batch * HIDDEN];
    for row in h_pre.chunks_mut(HIDDEN) {
        row.copy_from_slice(&params.fc_b.data);
    }
    gemm(
        MatRef::rm(&fc_in, batch, f),
        MatRef::rm_t(&params.fc_w.data, f, HIDDEN),
        T::one(),
        &mut h_pre,
    );
    if !h_pre.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("dense layer"));
    }
    let h: Vec<T> = h_pre.iter().map(|&v| v.max(T::zero())).collect();

    let mut logits = vec![T::zero(); batch * OUTPUTS];
    for row in logits.chunks_mut(OUTPUTS) {
        row.copy_from_slice(&params.out_b.data);
    }
    gemm(
        MatRef::rm(&h, batch, HIDDEN),
        MatRef::rm_t(&params.out_w.data, HIDDEN, OUTPUTS),
        T::one(),
        &mut logits,
    );
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("output layer"));
    }
    let probs = logits.iter().map(|&z| sigmoid(z)).collect();

    Ok(ForwardCache {
        dim: d,
        batch,
        mode,
        params_fingerprint: fingerprint(params),
        input,
        z1,
        p1,
        p1_arg,
        cols2,
        z2,
        flat,
        p2_arg,
        mask,
        fc_in,
        h_pre,
        logits,
        probs,
    })
}

/// Nonzero pixels of a `d × d` plane as `(row, col, value)`.
pub(crate) fn nonzeros<T: Real>(plane: &[T], d: usize) -> Vec<(usize, usize, T)> {
    plane
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != T::zero())
        .map(|(i, &v)| (i / d, i % d, v))
        .collect()
}

/// `out += conv3x3(src, w)` with zero padding, where `nz` lists the nonzero
/// pixels of `src`. Input `(r, c)` reaches output `(r + 1 - ky, c + 1 - kx)`.
pub(crate) fn conv3x3_scatter<T: Real>(nz: &[(usize, usize, T)], w: &[T], d: usize, out: &mut [T]) {
    for &(r, c, v) in nz {
        for ky in 0..3 {
            let Some(y) = (r + 1).checked_sub(ky).filter(|&y| y < d) else {
                continue;
            };
            for kx in 0..3 {
                let Some(x) = (c + 1).checked_sub(kx).filter(|&x| x < d) else {
                    continue;
                };
                out[y * d + x] += w[ky * 3 + kx] * v;
            }
        }
    }
}

/// 2×2 stride-2 max pooling of ReLU(src) for one `h × h` plane; the first
/// row-major maximum wins ties.
pub(crate) fn pool_relu<T: Real>(src: &[T], h: usize, dst: &mut [T], arg: &mut [u8]) {
    let ho = h / 2;
    for py in 0..ho {
        let r0 = &src[2 * py * h..(2 * py + 1) * h];
        let r1 = &src[(2 * py + 1) * h..(2 * py + 2) * h];
        for px in 0..ho {
            let cands = [r0[2 * px], r0[2 * px + 1], r1[2 * px], r1[2 * px + 1]];
            let mut best = 0;
            for k in 1..4 {
                if cands[k] > cands[best] {
                    best = k;
                }
            }
            dst[py * ho + px] = cands[best].max(T::zero());
            arg[py * ho + px] = best as u8;
        }
    }
}

/// im2col for a 3×3 same-padded convolution over `[C][B][h*h]` planes,
/// giving `[C*9][B*h*h]`.
pub(crate) fn im2col<T: Real>(src: &[T], channels: usize, batch: usize, h: usize) -> Vec<T> {
    let pn = h * h;
    let n = batch * pn;
    let mut cols = vec![T::zero(); channels * KERNEL * n];
    for c in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * KERNEL + ky * 3 + kx) * n;
                let x0 = usize::from(kx == 0);
                let x1 = if kx == 2 { h - 1 } else { h };
                for b in 0..batch {
                    let plane = &src[(c * batch + b) * pn..(c * batch + b + 1) * pn];
                    let dst = &mut cols[row + b * pn..row + (b + 1) * pn];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let srow = &plane[(sy - 1) * h..sy * h];
                        dst[y * h + x0..y * h + x1].copy_from_slice(&srow[x0 + kx - 1..x1 + kx - 1]);
                    }
                }
            }
        }
    }
    cols
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::init_params;
    use crate::linegen::{rasterize_line, ManifoldPoint};

    #[test]
    fn zero_params_give_half() {
        let p = ModelParams::<f32>::zeros(16).unwrap();
        let img = rasterize_line(ManifoldPoint::from_mdeg(13, 30_000), 16).unwrap();
        let (probs, _) = forward(&p, &img, Mode::Eval, 0.25, 0).unwrap();
        assert_eq!(probs, [0.5, 0.5]);
    }

    #[test]
    fn eval_is_repeatable() {
        let p = init_params(16, 3).unwrap();
        let img = rasterize_line(ManifoldPoint::from_mdeg(14, 42_000), 16).unwrap();
        let (a, _) = forward(&p, &img, Mode::Eval, 0.25, 1).unwrap();
        let (b, _) = forward(&p, &img, Mode::Eval, 0.25, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn dimension_mismatch() {
        let p = init_params(16, 3).unwrap();
        let img = rasterize_line(ManifoldPoint::from_mdeg(14, 0), 32).unwrap();
        assert!(matches!(
            forward(&p, &img, Mode::Eval, 0.25, 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn pooling_tie_takes_first() {
        let src = [1.0f32, 1.0, 1.0, 1.0];
        let mut dst = [0.0];
        let mut arg = [9];
        pool_relu(&src, 2, &mut dst, &mut arg);
        assert_eq!((dst[0], arg[0]), (1.0, 0));
        let src = [-1.0f32, -3.0, 2.0, 2.0];
        pool_relu(&src, 2, &mut dst, &mut arg);
        assert_eq!((dst[0], arg[0]), (2.0, 2));
    }
}
