//! Spatial random-affine views of a token grid.

use ndarray::Array2;
use rand::Rng;

use crate::feature_io::TokenFeatureMap;

/// A concrete similarity transform of the patch grid about its centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    /// Translation as a fraction of the grid extent, `(x, y)`.
    pub translate_frac: (f64, f64),
    pub scale: f64,
}

impl AffineParams {
    pub const IDENTITY: Self = Self { rotation_deg: 0.0, translate_frac: (0.0, 0.0), scale: 1.0 };
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Sampling ranges for random affine draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineRanges {
    pub max_rotation_deg: f64,
    pub max_translate_frac: f64,
    pub scale: (f64, f64),
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self { max_rotation_deg: 10.0, max_translate_frac: 0.1, scale: (0.9, 1.1) }
    }
}

impl AffineRanges {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let uniform = |rng: &mut R, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let r = self.max_rotation_deg;
        let t = self.max_translate_frac;
        AffineParams {
            rotation_deg: uniform(rng, -r, r),
            translate_frac: (uniform(rng, -t, t), uniform(rng, -t, t)),
            scale: uniform(rng, self.scale.0, self.scale.1),
        }
    }
}

/// Two augmented token sets drawn from the same image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
}

impl ViewPair {
    pub fn swapped(&self) -> Self {
        Self { alpha: self.beta.clone(), beta: self.alpha.clone() }
    }
}

/// Applies `p` to every channel of the `rows x cols` token field `tokens`.
///
/// Each output patch is inverse-mapped into the source grid and sampled
/// bilinearly, clamping coordinates to the grid edge.
pub fn warp_tokens(tokens: &Array2<f64>, rows: usize, cols: usize, p: &AffineParams) -> Array2<f64> {
    assert_eq!(tokens.nrows(), rows * cols, "token count does not match grid");
    let dim = tokens.ncols();
    let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
    let theta = p.rotation_deg.to_radians();
    let (sin, cos) = if p.rotation_deg == 0.0 { (0.0, 1.0) } else { theta.sin_cos() };
    let (tx, ty) = (p.translate_frac.0 * cols as f64, p.translate_frac.1 * rows as f64);
    let inv_scale = 1.0 / p.scale;
    let mut out = Array2::<f64>::zeros(tokens.raw_dim());
    for r in 0..rows {
        for c in 0..cols {
            // inverse of: dst = scale * R(theta) * (src - centre) + centre + t
            let dx = c as f64 - cx - tx;
            let dy = r as f64 - cy - ty;
            let sx = (cos * dx + sin * dy) * inv_scale + cx;
            let sy = (-sin * dx + cos * dy) * inv_scale + cy;
            let sx = sx.clamp(0.0, cols as f64 - 1.0);
            let sy = sy.clamp(0.0, rows as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(cols - 1), (y0 + 1).min(rows - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let weights = [
                ((1.0 - fy) * (1.0 - fx), y0 * cols + x0),
                ((1.0 - fy) * fx, y0 * cols + x1),
                (fy * (1.0 - fx), y1 * cols + x0),
                (fy * fx, y1 * cols + x1),
            ];
            let dst = r * cols + c;
            for k in 0..dim {
                let mut acc = 0.0;
                for &(w, src) in &weights {
                    if w != 0.0 {
                        acc += w * tokens[[src, k]];
                    }
                }
                out[[dst, k]] = acc;
            }
        }
    }
    out
}

/// Produces the two views `alpha = RA_1(f)` and `beta = RA_2(f)`.
pub fn random_affine_views(f: &TokenFeatureMap, first: &AffineParams, second: &AffineParams) -> ViewPair {
    let grid = f.grid();
    let tokens = f.to_f64();
    ViewPair {
        alpha: warp_tokens(&tokens, grid.rows(), grid.cols(), first),
        beta: warp_tokens(&tokens, grid.rows(), grid.cols(), second),
    }
}
