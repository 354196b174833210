//! Straightforward loop-based forward pass used as an oracle. It shares no
//! code with the library's batched implementation.

use lpx_core::cnn::ModelParams;
use lpx_core::BitGrid;

fn conv_same(input: &[Vec<Vec<f64>>], w: &[f32], b: &[f32], out_ch: usize) -> Vec<Vec<Vec<f64>>> {
    let in_ch = input.len();
    let h = input[0].len();
    let mut out = vec![vec![vec![0.0; h]; h]; out_ch];
    for (co, plane) in out.iter_mut().enumerate() {
        for y in 0..h {
            for x in 0..h {
                let mut s = f64::from(b[co]);
                for (ci, src) in input.iter().enumerate() {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as i64 + ky as i64 - 1;
                            let sx = x as i64 + kx as i64 - 1;
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= h as i64 {
                                continue;
                            }
                            let wi = ((co * in_ch + ci) * 3 + ky) * 3 + kx;
                            s += f64::from(w[wi]) * src[sy as usize][sx as usize];
                        }
                    }
                }
                plane[y][x] = s;
            }
        }
    }
    out
}

fn relu_pool(input: Vec<Vec<Vec<f64>>>) -> Vec<Vec<Vec<f64>>> {
    input
        .into_iter()
        .map(|plane| {
            let h = plane.len() / 2;
            (0..h)
                .map(|y| {
                    (0..h)
                        .map(|x| {
                            let m = plane[2 * y][2 * x]
                                .max(plane[2 * y][2 * x + 1])
                                .max(plane[2 * y + 1][2 * x])
                                .max(plane[2 * y + 1][2 * x + 1]);
                            m.max(0.0)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Eval-mode probabilities for one image.
pub fn reference_forward(p: &ModelParams<f32>, image: &BitGrid) -> [f64; 2] {
    let d = p.dim;
    let input = vec![(0..d)
        .map(|r| (0..d).map(|c| if image.get(r, c) { 1.0 } else { 0.0 }).collect())
        .collect::<Vec<Vec<f64>>>()];
    let a1 = relu_pool(conv_same(&input, &p.conv1_w.data, &p.conv1_b.data, 32));
    let a2 = relu_pool(conv_same(&a1, &p.conv2_w.data, &p.conv2_b.data, 32));
    let flat: Vec<f64> = a2.iter().flat_map(|pl| pl.iter().flatten().copied()).collect();
    let f = flat.len();
    let hidden: Vec<f64> = (0..128)
        .map(|j| {
            let s: f64 = f64::from(p.fc_b.data[j])
                + (0..f).map(|i| f64::from(p.fc_w.data[j * f + i]) * flat[i]).sum::<f64>();
            s.max(0.0)
        })
        .collect();
    let mut out = [0.0; 2];
    for (u, o) in out.iter_mut().enumerate() {
        let z = f64::from(p.out_b.data[u])
            + (0..128).map(|j| f64::from(p.out_w.data[u * 128 + j]) * hidden[j]).sum::<f64>();
        *o = 1.0 / (1.0 + (-z).exp());
    }
    out
}
