//! Independent oracles shared by the integration and acceptance tests.
//!
//! Nothing here calls into the code under test for the quantity being checked:
//! the siamese forward pass, the eigensolver and the fixtures are re-derived
//! with plain loops.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simsam::feature_io::{LabelMask, PatchGrid, TokenFeatureMap};
use simsam::siamese::{SiameseParams, ViewPair};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    let a = uniform_matrix(rng, n, n, 1.0);
    (&a + &a.t()) * 0.5
}

/// Identity heads plus a uniform perturbation of size `spread`.
pub fn random_params(rng: &mut ChaCha8Rng, d: usize, spread: f64) -> SiameseParams {
    let mut p = SiameseParams::identity(d);
    p.proj_weight += &uniform_matrix(rng, d, d, spread);
    p.pred_weight += &uniform_matrix(rng, d, d, spread);
    p.proj_bias.mapv_inplace(|_| rng.random_range(-spread..spread));
    p.pred_bias.mapv_inplace(|_| rng.random_range(-spread..spread));
    p
}

pub fn random_views(rng: &mut ChaCha8Rng, n: usize, d: usize) -> ViewPair {
    ViewPair { alpha: uniform_matrix(rng, n, d, 1.0), beta: uniform_matrix(rng, n, d, 1.0) }
}

// ---- scalar-loop siamese forward pass ----

fn elu(t: f64) -> f64 {
    if t > 0.0 {
        t
    } else {
        t.exp() - 1.0
    }
}

fn affine_row(w: &Array2<f64>, b: &ndarray::Array1<f64>, x: &[f64]) -> Vec<f64> {
    (0..w.nrows()).map(|r| b[r] + (0..x.len()).map(|c| w[[r, c]] * x[c]).sum::<f64>()).collect()
}

/// `(projection, prediction)` for every token.
pub fn forward(p: &SiameseParams, x: &Array2<f64>) -> Vec<(Vec<f64>, Vec<f64>)> {
    x.rows()
        .into_iter()
        .map(|row| {
            let row: Vec<f64> = row.to_vec();
            let delta: Vec<f64> = affine_row(&p.proj_weight, &p.proj_bias, &row).into_iter().map(elu).collect();
            let f = affine_row(&p.pred_weight, &p.pred_bias, &delta);
            (delta, f)
        })
        .collect()
}

pub fn neg_cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    -dot / (nu * nv)
}

/// Projection targets `(delta^a, delta^b)` at fixed parameters.
pub fn targets(p: &SiameseParams, views: &ViewPair) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let a = forward(p, &views.alpha).into_iter().map(|(d, _)| d).collect();
    let b = forward(p, &views.beta).into_iter().map(|(d, _)| d).collect();
    (a, b)
}

/// The symmetric loss with the stop-gradient arguments replaced by constants.
pub fn frozen_target_loss(p: &SiameseParams, views: &ViewPair, frozen: &(Vec<Vec<f64>>, Vec<Vec<f64>>)) -> f64 {
    let a = forward(p, &views.alpha);
    let b = forward(p, &views.beta);
    let n = a.len();
    (0..n).map(|i| 0.5 * (neg_cos(&a[i].1, &frozen.1[i]) + neg_cos(&frozen.0[i], &b[i].1))).sum::<f64>() / n as f64
}

/// The same loss with every argument depending on `p`.
pub fn attached_loss(p: &SiameseParams, views: &ViewPair) -> f64 {
    frozen_target_loss(p, views, &targets(p, views))
}

/// Central differences over the flattened parameter vector.
pub fn finite_difference(p: &SiameseParams, step: f64, loss: impl Fn(&SiameseParams) -> f64) -> Vec<f64> {
    let d = p.dim();
    let base = p.to_vec();
    (0..base.len())
        .map(|k| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[k] += step;
            minus[k] -= step;
            (loss(&SiameseParams::from_slice(d, &plus)) - loss(&SiameseParams::from_slice(d, &minus))) / (2.0 * step)
        })
        .collect()
}

/// Gradients smaller than this are compared absolutely; a locally constant
/// loss (e.g. `d = 1`, where cosine is always +-1) has only rounding noise.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// `|a - b|_2 / max(|a|_2, |b|_2, GRADIENT_FLOOR)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(GRADIENT_FLOOR)
}

// ---- cyclic Jacobi eigensolver ----

/// Ascending eigenvalues and column eigenvectors by cyclic Jacobi rotations.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let total: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| m[[i, j]].powi(2)).sum::<f64>().sqrt();
        if off <= 1e-15 * total {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].total_cmp(&m[[j, j]]));
    let values = order.iter().map(|&i| m[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (values, vectors)
}

// ---- fixtures ----

/// Two orthonormal prototypes: `e_1` inside `rect = (r0, c0, r1, c1)` (exclusive ends), `e_0` outside.
pub fn rectangle_fixture(rows: usize, cols: usize, dim: usize, rect: (usize, usize, usize, usize)) -> (TokenFeatureMap, LabelMask) {
    let grid = PatchGrid::from_patches(rows, cols, 16).unwrap();
    let (r0, c0, r1, c1) = rect;
    let labels: Vec<u32> =
        (0..rows * cols).map(|i| u32::from((r0..r1).contains(&(i / cols)) && (c0..c1).contains(&(i % cols)))).collect();
    let mut tokens = Array2::<f32>::zeros((rows * cols, dim));
    for (i, &l) in labels.iter().enumerate() {
        tokens[[i, l as usize]] = 1.0;
    }
    (TokenFeatureMap::new(grid, tokens).unwrap(), LabelMask::new(grid, labels).unwrap())
}

/// Every axis-aligned rectangle with both sides >= 2 that is not the whole grid.
pub fn all_rectangles(rows: usize, cols: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for r0 in 0..rows {
        for r1 in r0 + 2..=rows {
            for c0 in 0..cols {
                for c1 in c0 + 2..=cols {
                    if (r1 - r0) * (c1 - c0) < rows * cols {
                        out.push((r0, c0, r1, c1));
                    }
                }
            }
        }
    }
    out
}

/// Connected components of the graph with edges where `w > 0`.
pub fn is_connected_positive(w: &Array2<f64>) -> bool {
    let n = w.nrows();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && w[[i, j]] > 0.0 {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.iter().all(|&s| s)
}

pub fn vanilla_oracle(f: &TokenFeatureMap, normalize: bool) -> Array2<f64> {
    let x = f.to_f64();
    let n = x.nrows();
    let mut w = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..x.ncols() {
                s += x[[i, k]] * x[[j, k]];
            }
            w[[i, j]] = s;
        }
    }
    if normalize {
        let mut total = 0.0;
        for v in w.iter() {
            total += v;
        }
        let mean = total / (n * n) as f64;
        w.mapv_inplace(|v| v - mean);
    }
    w
}
