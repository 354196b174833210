//! Receptive-field-local re-evaluation of a single pixel flip.
//!
//! A flip at `(r, c)` changes at most a 3×3 patch of conv1 outputs, hence at
//! most 2×2 pooled cells, a 4×4 patch of conv2 outputs and 3×3 cells after
//! the second pooling. Only those activations are recomputed; the dense
//! layer is updated with the sparse change of its input.

use crate::bits::BitGrid;
use crate::cnn::{flat_features, forward_batch, Mode, ModelParams, CHANNELS, HIDDEN, KERNEL, OUTPUTS};
use crate::error::{Error, Result};

/// Eval-mode activations of an unmodified source image, stored channel
/// last (`[position][C]`) so a flip reads contiguous memory.
#[derive(Debug, Clone)]
pub struct SourceActivations {
    fingerprint: u64,
    pub image: BitGrid,
    /// conv1 pre-activations, `[D*D][C]`
    pub z1: Vec<f32>,
    /// first pooling output, `[(D/2)²][C]`
    pub p1: Vec<f32>,
    /// conv2 pre-activations, `[(D/2)²][C]`
    pub z2: Vec<f32>,
    /// second pooling output, `[(D/4)²][C]`
    pub p2: Vec<f32>,
    /// `[128]`
    pub h_pre: Vec<f32>,
    pub probs: [f32; 2],
}

/// How much work one flip needed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlipStats {
    pub conv1_outputs: usize,
    pub pool1_cells: usize,
    pub conv2_outputs: usize,
    pub pool2_cells: usize,
    pub changed_features: usize,
}

/// Parameters rearranged for the sparse update.
pub struct IncrementalNet<'a> {
    params: &'a ModelParams<f32>,
    fingerprint: u64,
    /// conv1 weights as `[k][co]`
    w1t: Vec<f32>,
    /// conv2 weights as `[k][ci][co]`
    w2t: Vec<f32>,
    /// dense weights as `[cell][co][128]`
    fc_wt: Vec<f32>,
    avx2: bool,
}

const C: usize = CHANNELS;
const REGION: usize = 4;

fn channel_last(src: &[f32], planes: usize) -> Vec<f32> {
    let n = src.len() / planes;
    let mut out = vec![0.0; src.len()];
    for c in 0..planes {
        for (i, &v) in src[c * n..(c + 1) * n].iter().enumerate() {
            out[i * planes + c] = v;
        }
    }
    out
}

impl<'a> IncrementalNet<'a> {
    pub fn new(params: &'a ModelParams<f32>) -> Result<Self> {
        params.validate()?;
        let p2n = (params.dim / 4) * (params.dim / 4);
        let f = flat_features(params.dim);
        let mut w1t = vec![0.0; KERNEL * C];
        for co in 0..C {
            for k in 0..KERNEL {
                w1t[k * C + co] = params.conv1_w.data[co * KERNEL + k];
            }
        }
        let mut w2t = vec![0.0; KERNEL * C * C];
        for co in 0..C {
            for ci in 0..C {
                for k in 0..KERNEL {
                    w2t[(k * C + ci) * C + co] = params.conv2_w.data[(co * C + ci) * KERNEL + k];
                }
            }
        }
        let mut fc_wt = vec![0.0; f * HIDDEN];
        for i in 0..HIDDEN {
            for co in 0..C {
                for cell in 0..p2n {
                    fc_wt[(cell * C + co) * HIDDEN + i] = params.fc_w.data[i * f + co * p2n + cell];
                }
            }
        }
        Ok(IncrementalNet {
            params,
            fingerprint: crate::cnn::fingerprint(params),
            w1t,
            w2t,
            fc_wt,
            avx2: has_avx2(),
        })
    }

    pub fn params(&self) -> &ModelParams<f32> {
        self.params
    }

    /// Runs the full eval forward pass of `image` and keeps what flips need.
    pub fn source(&self, image: &BitGrid) -> Result<SourceActivations> {
        Ok(self.sources(&[image])?.pop().expect("one source"))
    }

    /// [`Self::source`] for several images through one batched pass.
    pub fn sources(&self, images: &[&BitGrid]) -> Result<Vec<SourceActivations>> {
        let d = self.params.dim;
        let cache = forward_batch(self.params, images, Mode::Eval, 0.0, None)?;
        let b = images.len();
        let (dd, p1n) = (d * d, (d / 2) * (d / 2));
        let f = flat_features(d);
        let plane = |v: &[f32], n: usize, k: usize| -> Vec<f32> {
            let mut out = Vec::with_capacity(C * n);
            for c in 0..C {
                out.extend_from_slice(&v[(c * b + k) * n..(c * b + k + 1) * n]);
            }
            channel_last(&out, C)
        };
        Ok(images
            .iter()
            .enumerate()
            .map(|(k, img)| SourceActivations {
                fingerprint: self.fingerprint,
                image: (*img).clone(),
                z1: plane(&cache.z1, dd, k),
                p1: plane(&cache.p1, p1n, k),
                z2: plane(&cache.z2, p1n, k),
                p2: channel_last(&cache.flat[k * f..(k + 1) * f], C),
                h_pre: cache.h_pre[k * HIDDEN..(k + 1) * HIDDEN].to_vec(),
                probs: cache.probs_of(k),
            })
            .collect())
    }
    /// Probabilities for the source image with the pixels in `flips`
    /// inverted. A pixel listed twice cancels out; an empty net change
    /// returns the cached output exactly.
    pub fn incremental_forward(&self, src: &SourceActivations, flips: &[(usize, usize)]) -> Result<[f32; 2]> {
        let mut net: Vec<(usize, usize)> = Vec::new();
        for &p in flips {
            match net.iter().position(|&q| q == p) {
                Some(i) => {
                    net.swap_remove(i);
                }
                None => net.push(p),
            }
        }
        match net.as_slice() {
            [] => {
                self.check(src)?;
                Ok(src.probs)
            }
            [(r, c)] => self.flip_probs(src, *r, *c),
            _ => {
                // several pixels: their receptive fields may overlap
                self.check(src)?;
                let mut img = src.image.clone();
                for &(r, c) in &net {
                    img.flip(r, c);
                }
                let cache = forward_batch(self.params, &[&img], Mode::Eval, 0.0, None)?;
                Ok(cache.probs_of(0))
            }
        }
    }

    pub fn flip_probs(&self, src: &SourceActivations, row: usize, col: usize) -> Result<[f32; 2]> {
        self.flip_with_stats(src, row, col).map(|(p, _)| p)
    }

    fn check(&self, src: &SourceActivations) -> Result<()> {
        if src.fingerprint != self.fingerprint || src.image.dim() != self.params.dim {
            return Err(Error::MissingCache("source activations belong to a different model"));
        }
        Ok(())
    }

    pub fn flip_with_stats(&self, src: &SourceActivations, row: usize, col: usize) -> Result<([f32; 2], FlipStats)> {
        self.check(src)?;
        let d = self.params.dim;
        if row >= d || col >= d {
            return Err(Error::ShapeMismatch(format!("pixel ({row}, {col}) outside {d}x{d}")));
        }
        #[cfg(target_arch = "x86_64")]
        if self.avx2 {
            // SAFETY: the CPU supports AVX2, checked in `new`
            return Ok(unsafe { self.flip_avx2(src, row, col) });
        }
        Ok(self.flip_inner(src, row, col))
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn flip_avx2(&self, src: &SourceActivations, row: usize, col: usize) -> ([f32; 2], FlipStats) {
        self.flip_inner(src, row, col)
    }

    /// Same arithmetic on every instruction set: no fused multiply-adds,
    /// only wider registers, so results do not depend on the dispatch.
    #[inline(always)]
    fn flip_inner(&self, src: &SourceActivations, row: usize, col: usize) -> ([f32; 2], FlipStats) {
        let d = self.params.dim;
        let h1 = d / 2;
        let h2 = d / 4;
        let mut stats = FlipStats::default();
        let delta = if src.image.get(row, col) { -1.0f32 } else { 1.0 };

        // conv1 outputs touched by the flipped input pixel
        let (r0, r1) = (row.saturating_sub(1), (row + 1).min(d - 1));
        let (c0, c1) = (col.saturating_sub(1), (col + 1).min(d - 1));
        stats.conv1_outputs = (r1 - r0 + 1) * (c1 - c0 + 1) * C;
        let (qy0, qy1, qx0, qx1) = (r0 / 2, r1 / 2, c0 / 2, c1 / 2);
        stats.pool1_cells = (qy1 - qy0 + 1) * (qx1 - qx0 + 1);

        // conv2 outputs fed by those pooled cells, held as [local pos][co]
        let ya = qy0.saturating_sub(1);
        let yb = (qy1 + 1).min(h1 - 1);
        let xa = qx0.saturating_sub(1);
        let xb = (qx1 + 1).min(h1 - 1);
        let mut dz2 = [0.0f32; REGION * REGION * C];
        let mut any_p1 = false;
        for qy in qy0..=qy1 {
            for qx in qx0..=qx1 {
                let mut m = [f32::NEG_INFINITY; C];
                for a in 0..4 {
                    let (y, x) = (2 * qy + a / 2, 2 * qx + a % 2);
                    let z = &src.z1[(y * d + x) * C..(y * d + x + 1) * C];
                    if (r0..=r1).contains(&y) && (c0..=c1).contains(&x) {
                        let k = (row + 1 - y) * 3 + (col + 1 - x);
                        let w = &self.w1t[k * C..(k + 1) * C];
                        for ci in 0..C {
                            let v = z[ci] + delta * w[ci];
                            if v > m[ci] {
                                m[ci] = v;
                            }
                        }
                    } else {
                        for ci in 0..C {
                            if z[ci] > m[ci] {
                                m[ci] = z[ci];
                            }
                        }
                    }
                }
                let old = &src.p1[(qy * h1 + qx) * C..(qy * h1 + qx + 1) * C];
                let mut diff = [0.0f32; C];
                let mut changed = false;
                for ci in 0..C {
                    let new = m[ci].max(0.0);
                    if new != old[ci] {
                        diff[ci] = new - old[ci];
                        changed = true;
                    }
                }
                if !changed {
                    continue;
                }
                any_p1 = true;
                for y in qy.saturating_sub(1)..=(qy + 1).min(h1 - 1) {
                    for x in qx.saturating_sub(1)..=(qx + 1).min(h1 - 1) {
                        let k = (qy + 1 - y) * 3 + (qx + 1 - x);
                        let off = ((y - ya) * REGION + (x - xa)) * C;
                        let acc: &mut [f32; C] = (&mut dz2[off..off + C]).try_into().expect("C lanes");
                        let wk = &self.w2t[k * C * C..(k + 1) * C * C];
                        for (ci, &dv) in diff.iter().enumerate() {
                            if dv != 0.0 {
                                axpy(acc, dv, wk[ci * C..(ci + 1) * C].try_into().expect("C lanes"));
                            }
                        }
                    }
                }
            }
        }
        if !any_p1 {
            return (src.probs, stats);
        }
        stats.conv2_outputs = (yb - ya + 1) * (xb - xa + 1) * C;

        let (cy0, cy1, cx0, cx1) = (ya / 2, yb / 2, xa / 2, xb / 2);
        stats.pool2_cells = (cy1 - cy0 + 1) * (cx1 - cx0 + 1);
        let mut h = [0.0f32; HIDDEN];
        h.copy_from_slice(&src.h_pre);
        let mut n_flat = 0;
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                let mut m = [f32::NEG_INFINITY; C];
                for a in 0..4 {
                    let (y, x) = (2 * cy + a / 2, 2 * cx + a % 2);
                    let z = &src.z2[(y * h1 + x) * C..(y * h1 + x + 1) * C];
                    if (ya..=yb).contains(&y) && (xa..=xb).contains(&x) {
                        let off = ((y - ya) * REGION + (x - xa)) * C;
                        let dz = &dz2[off..off + C];
                        for co in 0..C {
                            let v = z[co] + dz[co];
                            if v > m[co] {
                                m[co] = v;
                            }
                        }
                    } else {
                        for co in 0..C {
                            if z[co] > m[co] {
                                m[co] = z[co];
                            }
                        }
                    }
                }
                let cell = cy * h2 + cx;
                let old = &src.p2[cell * C..(cell + 1) * C];
                for co in 0..C {
                    let new = m[co].max(0.0);
                    if new == old[co] {
                        continue;
                    }
                    n_flat += 1;
                    let diff = new - old[co];
                    let w = &self.fc_wt[(cell * C + co) * HIDDEN..(cell * C + co + 1) * HIDDEN];
                    axpy(&mut h, diff, w.try_into().expect("HIDDEN lanes"));
                }
            }
        }
        stats.changed_features = n_flat;
        if n_flat == 0 {
            return (src.probs, stats);
        }

        let mut probs = [0.0f32; OUTPUTS];
        for (u, p) in probs.iter_mut().enumerate() {
            let w = &self.params.out_w.data[u * HIDDEN..(u + 1) * HIDDEN];
            let z: f32 = self.params.out_b.data[u] + w.iter().zip(&h).map(|(&wv, &hv)| wv * hv.max(0.0)).sum::<f32>();
            *p = 1.0 / (1.0 + (-z).exp());
        }
        (probs, stats)
    }
}

#[inline(always)]
fn axpy<const N: usize>(acc: &mut [f32; N], a: f32, x: &[f32; N]) {
    for i in 0..N {
        acc[i] += a * x[i];
    }
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}
