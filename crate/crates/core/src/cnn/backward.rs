use rand_chacha::ChaCha8Rng;

use super::forward::{fingerprint, forward_batch, nonzeros};
use super::{bce_loss, flat_features, gemm, one_hot, ForwardCache, MatRef, Mode, ModelParams, Real};
use super::{CHANNELS, HIDDEN, KERNEL, LOSS_CLAMP, OUTPUTS};
use crate::bits::BitGrid;
use crate::error::{Error, Result};

/// Gradients of the batch-mean loss with respect to every parameter, from a
/// train-mode cache produced with the same `params`.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    labels: &[u8],
) -> Result<ModelParams<T>> {
    if cache.mode != Mode::Train {
        return Err(Error::MissingCache("backward needs train-mode activations"));
    }
    if cache.dim != params.dim || cache.params_fingerprint != fingerprint(params) {
        return Err(Error::MissingCache("cache was produced by different parameters"));
    }
    if labels.len() != cache.batch {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {}",
            labels.len(),
            cache.batch
        )));
    }
    let batch = cache.batch;
    let d = params.dim;
    let dd = d * d;
    let h1 = d / 2;
    let p1n = h1 * h1;
    let h2 = d / 4;
    let p2n = h2 * h2;
    let f = flat_features(d);
    let n2 = batch * p1n;
    let mut g = ModelParams::<T>::zeros(d)?;

    // sigmoid + clamped BCE, averaged over 2 units and the batch
    let eps = T::from_f64(LOSS_CLAMP);
    let one = T::one();
    let scale = T::from_f64(1.0 / (2.0 * batch as f64));
    let mut dlogit = vec![T::zero(); batch * OUTPUTS];
    for (b, &label) in labels.iter().enumerate() {
        let t = one_hot::<T>(label);
        for u in 0..OUTPUTS {
            let p = cache.probs[b * OUTPUTS + u];
            if p >= eps && p <= one - eps {
                dlogit[b * OUTPUTS + u] = (p - t[u]) * scale;
            }
        }
    }

    let h: Vec<T> = cache.h_pre.iter().map(|&v| v.max(T::zero())).collect();
    gemm(
        MatRef::rm_t(&dlogit, OUTPUTS, batch),
        MatRef::rm(&h, batch, HIDDEN),
        T::zero(),
        &mut g.out_w.data,
    );
    column_sums(&dlogit, OUTPUTS, &mut g.out_b.data);

    let mut dh = vec![T::zero(); batch * HIDDEN];
    gemm(
        MatRef::rm(&dlogit, batch, OUTPUTS),
        MatRef::rm(&params.out_w.data, OUTPUTS, HIDDEN),
        T::zero(),
        &mut dh,
    );
    for (g, &z) in dh.iter_mut().zip(&cache.h_pre) {
        if z <= T::zero() {
            *g = T::zero();
        }
    }

    gemm(
        MatRef::rm_t(&dh, HIDDEN, batch),
        MatRef::rm(&cache.fc_in, batch, f),
        T::zero(),
        &mut g.fc_w.data,
    );
    column_sums(&dh, HIDDEN, &mut g.fc_b.data);

    let mut dflat = vec![T::zero(); batch * f];
    gemm(
        MatRef::rm(&dh, batch, HIDDEN),
        MatRef::rm(&params.fc_w.data, HIDDEN, f),
        T::zero(),
        &mut dflat,
    );
    if let Some(mask) = &cache.mask {
        for (g, &m) in dflat.iter_mut().zip(mask) {
            *g *= m;
        }
    }

    // pool2 + ReLU2
    let mut dz2 = vec![T::zero(); CHANNELS * n2];
    for b in 0..batch {
        for c in 0..CHANNELS {
            let plane = (c * batch + b) * p1n;
            for p in 0..p2n {
                let fi = b * f + c * p2n + p;
                let grad = dflat[fi];
                if grad == T::zero() {
                    continue;
                }
                let pos = plane + window_position(p, h2, h1, cache.p2_arg[fi]);
                if cache.z2[pos] > T::zero() {
                    dz2[pos] += grad;
                }
            }
        }
    }

    gemm(
        MatRef::rm(&dz2, CHANNELS, n2),
        MatRef::rm_t(&cache.cols2, n2, CHANNELS * KERNEL),
        T::zero(),
        &mut g.conv2_w.data,
    );
    row_sums(&dz2, n2, &mut g.conv2_b.data);

    let mut dcols = vec![T::zero(); CHANNELS * KERNEL * n2];
    gemm(
        MatRef::rm_t(&params.conv2_w.data, CHANNELS * KERNEL, CHANNELS),
        MatRef::rm(&dz2, CHANNELS, n2),
        T::zero(),
        &mut dcols,
    );
    let dp1 = col2im(&dcols, CHANNELS, batch, h1);

    // pool1 + ReLU1
    let mut dz1 = vec![T::zero(); CHANNELS * batch * dd];
    for plane in 0..CHANNELS * batch {
        for p in 0..p1n {
            let grad = dp1[plane * p1n + p];
            if grad == T::zero() {
                continue;
            }
            let pos = plane * dd + window_position(p, h1, d, cache.p1_arg[plane * p1n + p]);
            if cache.z1[pos] > T::zero() {
                dz1[pos] += grad;
            }
        }
    }

    // conv1 weights: gather dz1 around each nonzero input pixel
    let nz: Vec<_> = (0..batch).map(|b| nonzeros(&cache.input[b * dd..(b + 1) * dd], d)).collect();
    for c in 0..CHANNELS {
        let mut acc = [T::zero(); KERNEL];
        let mut bias = T::zero();
        for (b, nz) in nz.iter().enumerate() {
            let dz = &dz1[(c * batch + b) * dd..(c * batch + b + 1) * dd];
            bias += dz.iter().copied().sum::<T>();
            for &(r, col, v) in nz {
                for ky in 0..3 {
                    let Some(y) = (r + 1).checked_sub(ky).filter(|&y| y < d) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(x) = (col + 1).checked_sub(kx).filter(|&x| x < d) else {
                            continue;
                        };
                        acc[ky * 3 + kx] += dz[y * d + x] * v;
                    }
                }
            }
        }
        g.conv1_w.data[c * KERNEL..(c + 1) * KERNEL].copy_from_slice(&acc);
        g.conv1_b.data[c] = bias;
    }

    Ok(g)
}

/// Runs a train-mode forward pass and returns `(batch-mean loss, gradients)`.
pub fn loss_and_gradients<T: Real>(
    params: &ModelParams<T>,
    images: &[&BitGrid],
    labels: &[u8],
    dropout_p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(T, ModelParams<T>)> {
    let cache = forward_batch(params, images, Mode::Train, dropout_p, Some(rng))?;
    let grads = backward(params, &cache, labels)?;
    let mut loss = T::zero();
    for (b, &label) in labels.iter().enumerate() {
        loss += bce_loss(cache.probs_of(b), one_hot(label));
    }
    Ok((loss / T::from_f64(labels.len() as f64), grads))
}

/// Offset inside an `h_in × h_in` plane of the pooled cell `p` of an
/// `h_out × h_out` grid, given the window index `arg`.
#[inline]
pub(crate) fn window_position(p: usize, h_out: usize, h_in: usize, arg: u8) -> usize {
    let (py, px) = (p / h_out, p % h_out);
    let a = arg as usize;
    (2 * py + a / 2) * h_in + 2 * px + a % 2
}

fn column_sums<T: Real>(m: &[T], cols: usize, out: &mut [T]) {
    out.fill(T::zero());
    for row in m.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn row_sums<T: Real>(m: &[T], cols: usize, out: &mut [T]) {
    for (o, row) in out.iter_mut().zip(m.chunks(cols)) {
        *o = row.iter().copied().sum();
    }
}

fn col2im<T: Real>(cols: &[T], channels: usize, batch: usize, h: usize) -> Vec<T> {
    let pn = h * h;
    let n = batch * pn;
    let mut out = vec![T::zero(); channels * batch * pn];
    for c in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * KERNEL + ky * 3 + kx) * n;
                let x0 = usize::from(kx == 0);
                let x1 = if kx == 2 { h - 1 } else { h };
                for b in 0..batch {
                    let src = &cols[row + b * pn..row + (b + 1) * pn];
                    let plane = &mut out[(c * batch + b) * pn..(c * batch + b + 1) * pn];
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let drow = &mut plane[(sy - 1) * h..sy * h];
                        for (o, &v) in drow[x0 + kx - 1..x1 + kx - 1]
                            .iter_mut()
                            .zip(&src[y * h + x0..y * h + x1])
                        {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}
