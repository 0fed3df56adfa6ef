//! Independent loop-based reference implementations used as test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use glyphmoe::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `m[i][j]` of a row-major `rows × cols` slice.
fn at(m: &[f64], cols: usize, i: usize, j: usize) -> f64 {
    m[i * cols + j]
}

fn softmax_rows(logits: &mut [Vec<f64>]) {
    for row in logits.iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
}

/// `w · x` for `w: [h×h]`, `x: [h×n]`, written as explicit sums.
fn project(w: &[f64], x: &[f64], h: usize, n: usize) -> Vec<Vec<f64>> {
    (0..h).map(|i| (0..n).map(|t| (0..h).map(|j| at(w, h, i, j) * at(x, n, j, t)).sum()).collect()).collect()
}

/// Channel tokens: returns (output `[h × n]` flattened, attention `[h × h]` flattened).
pub fn channel_attention(
    z: &[f64],
    h: usize,
    n: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    o: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (qx, kx, vx) = (project(q, z, h, n), project(k, z, h, n), project(v, z, h, n));
    let mut a: Vec<Vec<f64>> = (0..h)
        .map(|i| (0..h).map(|j| (0..n).map(|t| qx[i][t] * kx[j][t]).sum::<f64>() / (n as f64).sqrt()).collect())
        .collect();
    softmax_rows(&mut a);
    let mixed: Vec<Vec<f64>> =
        (0..h).map(|i| (0..n).map(|t| (0..h).map(|j| a[i][j] * vx[j][t]).sum()).collect()).collect();
    let out = (0..h)
        .flat_map(|i| {
            let mixed = &mixed;
            (0..n).map(move |t| (0..h).map(|j| at(o, h, i, j) * mixed[j][t]).sum())
        })
        .collect();
    (out, a.concat())
}

/// Position tokens attending to `s×s` mean-pooled keys/values.
/// Returns (output `[h × H·W]` flattened, attention `[H·W × H·W/s²]` flattened).
#[allow(clippy::too_many_arguments)]
pub fn spatial_attention(
    z: &[f64],
    h: usize,
    hh: usize,
    ww: usize,
    s: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    o: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = hh * ww;
    let (ph, pw) = (hh / s, ww / s);
    let m = ph * pw;
    let mut pooled = vec![0.0; h * m];
    for c in 0..h {
        for py in 0..ph {
            for px in 0..pw {
                let mut acc = 0.0;
                for dy in 0..s {
                    for dx in 0..s {
                        acc += z[c * n + (py * s + dy) * ww + px * s + dx];
                    }
                }
                pooled[c * m + py * pw + px] = acc / (s * s) as f64;
            }
        }
    }
    let qx = project(q, z, h, n);
    let (kx, vx) = (project(k, &pooled, h, m), project(v, &pooled, h, m));
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|t| (0..m).map(|u| (0..h).map(|c| qx[c][t] * kx[c][u]).sum::<f64>() / (h as f64).sqrt()).collect())
        .collect();
    softmax_rows(&mut a);
    let mixed: Vec<Vec<f64>> =
        (0..h).map(|c| (0..n).map(|t| (0..m).map(|u| a[t][u] * vx[c][u]).sum()).collect()).collect();
    let mut out = vec![0.0; h * n];
    for i in 0..h {
        for t in 0..n {
            out[i * n + t] = (0..h).map(|j| at(o, h, i, j) * mixed[j][t]).sum();
        }
    }
    (out, a.concat())
}

/// Mean SSIM over every 8×8 window of a single-channel image, recomputing
/// each window's moments from scratch.
pub fn ssim_brute(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    const WIN: usize = 8;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y in 0..=h - WIN {
        for x in 0..=w - WIN {
            let pix = |img: &[f64]| -> Vec<f64> {
                (0..WIN)
                    .flat_map(|dy| (0..WIN).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| img[(y + dy) * w + x + dx])
                    .collect()
            };
            let (pa, pb) = (pix(a), pix(b));
            let nn = pa.len() as f64;
            let ma = pa.iter().sum::<f64>() / nn;
            let mb = pb.iter().sum::<f64>() / nn;
            let va = pa.iter().map(|p| (p - ma).powi(2)).sum::<f64>() / nn;
            let vb = pb.iter().map(|p| (p - mb).powi(2)).sum::<f64>() / nn;
            let cov = pa.iter().zip(&pb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / nn;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// All permutations of `0..k` (Heap's algorithm).
pub fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn heap(n: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n <= 1 {
            out.push(p.clone());
            return;
        }
        for i in 0..n - 1 {
            heap(n - 1, p, out);
            if n.is_multiple_of(2) {
                p.swap(i, n - 1);
            } else {
                p.swap(0, n - 1);
            }
        }
        heap(n - 1, p, out);
    }
    let mut out = Vec::new();
    heap(k, &mut (0..k).collect(), &mut out);
    out
}

/// Minimum of `Σ cost[i][perm[i]]` over every permutation.
pub fn brute_min_cost(cost: &[Vec<f64>]) -> f64 {
    permutations(cost.len())
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Cosine similarity by the textbook formula.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
