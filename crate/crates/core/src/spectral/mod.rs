//! Normalized-Laplacian spectral segmentation.
//!
//! Negative affinities are clamped to zero before the Laplacian is formed.
//! The trivial eigenvector `D^{1/2} 1` is projected out explicitly (by
//! shifting it to the top of the spectrum) so that `y_1` is well defined even
//! when the clamped graph falls apart into several components.

pub mod eigen;
pub mod kmeans;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::affinity::AffinityMatrix;
use crate::feature_io::{LabelMask, PatchGrid, TokenFeatureMap};
pub use eigen::{eigendecompose, EigenBasis};
pub use kmeans::{kmeans_fit, ClusterModel, KMeansFit};

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("affinity has no positive entries after clamping negatives to zero")]
    AllZeroAffinity,
    #[error("matrix not symmetric: |a[{row}][{col}] - a[{col}][{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },
    #[error("eigensolver did not converge for eigenvalue {index} within {sweeps} sweeps")]
    NoConvergence { index: usize, sweeps: usize },
    #[error("{points} points cannot form {k} clusters")]
    TooFewPoints { points: usize, k: usize },
    #[error("segment {label} has no patches")]
    EmptySegment { label: u32 },
    #[error("segment {label} has a zero mean feature")]
    ZeroSegmentFeature { label: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, SpectralError>;

/// Shift applied to the trivial direction; above the Laplacian's spectral bound of 2.
const TRIVIAL_SHIFT: f64 = 4.0;

/// Gap between `lambda_1` and `lambda_2` below which the Fiedler direction is ambiguous.
pub const FIEDLER_DEGENERACY_TOL: f64 = 1e-9;

/// `D^{-1/2} (D - W) D^{-1/2}` of the nonnegative part of `w`.
///
/// Rows with zero degree get a zero `D^{-1/2}` entry.
pub fn normalized_laplacian(w: &AffinityMatrix) -> Result<Array2<f64>> {
    Ok(laplacian_parts(w)?.0)
}

fn laplacian_parts(w: &AffinityMatrix) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = w.n();
    let scale = w.values().iter().fold(1.0f64, |s, v| s.max(v.abs()));
    let gap = w.asymmetry();
    if gap > eigen::SYMMETRY_TOL * scale {
        return Err(SpectralError::NotSymmetric { row: 0, col: 0, gap });
    }
    if w.values().iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::InvalidArgument("affinity has non-finite entries".into()));
    }
    let clamped = w.values().mapv(|v| v.max(0.0));
    let degree = clamped.sum_axis(ndarray::Axis(1));
    if degree.iter().all(|&d| d == 0.0) {
        return Err(SpectralError::AllZeroAffinity);
    }
    let inv_sqrt = degree.mapv(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 });
    let mut lap = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let diag = if i == j { degree[i] } else { 0.0 };
            lap[[i, j]] = inv_sqrt[i] * (diag - clamped[[i, j]]) * inv_sqrt[j];
        }
    }
    // exact symmetry
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (lap[[i, j]] + lap[[j, i]]);
            lap[[i, j]] = avg;
            lap[[j, i]] = avg;
        }
    }
    Ok((lap, degree))
}

/// Laplacian of `w` together with its `m` smallest eigenpairs.
///
/// Column 0 is the trivial vector `D^{1/2} 1 / |D^{1/2} 1|` with eigenvalue 0;
/// the remaining columns are the smallest eigenpairs orthogonal to it.
pub fn laplacian_eigenbasis(w: &AffinityMatrix, m: usize) -> Result<(Array2<f64>, EigenBasis)> {
    let n = w.n();
    if m == 0 || m > n {
        return Err(SpectralError::InvalidArgument(format!("requested {m} eigenvectors for {n} patches")));
    }
    let (lap, degree) = laplacian_parts(w)?;
    let mut trivial = degree.mapv(f64::sqrt);
    let norm = trivial.dot(&trivial).sqrt();
    trivial /= norm;

    let mut basis = EigenBasis { eigenvalues: Array1::zeros(m), eigenvectors: Array2::zeros((n, m)) };
    basis.eigenvectors.column_mut(0).assign(&trivial);
    if m > 1 {
        let mut shifted = lap.clone();
        for i in 0..n {
            for j in 0..n {
                shifted[[i, j]] += TRIVIAL_SHIFT * trivial[i] * trivial[j];
            }
        }
        let rest = eigendecompose(&shifted, m - 1)?;
        for j in 0..m - 1 {
            // the Laplacian is positive semidefinite; drop rounding below zero
            basis.eigenvalues[j + 1] = rest.eigenvalues[j].max(0.0);
            basis.eigenvectors.column_mut(j + 1).assign(&rest.eigenvectors.column(j));
        }
    }
    Ok((lap, basis))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiedlerOptions {
    /// Patches with Fiedler component above this value form one side of the cut.
    pub threshold: f64,
}

impl Default for FiedlerOptions {
    fn default() -> Self {
        Self { threshold: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSegmentation {
    /// Foreground 1, background 0.
    pub mask: LabelMask,
    pub fiedler_vector: Array1<f64>,
    pub fiedler_value: f64,
    /// `lambda_1` is not separated from `lambda_2`, so `y_1` has no preferred
    /// direction; the mask is then all background.
    pub degenerate: bool,
}

/// Foreground/background split from the sign pattern of the Fiedler vector.
///
/// The side with fewer patches is foreground. Equal sides fall back to the
/// side touching the grid border less, then to the side without patch 0.
pub fn fiedler_object_mask(w: &AffinityMatrix, grid: PatchGrid, opts: FiedlerOptions) -> Result<ObjectSegmentation> {
    let n = w.n();
    if n != grid.len() {
        return Err(SpectralError::ShapeMismatch(format!("{n}x{n} affinity for {} patches", grid.len())));
    }
    if n < 2 {
        return Err(SpectralError::InvalidArgument("object segmentation needs at least 2 patches".into()));
    }
    let (_, basis) = laplacian_eigenbasis(w, n.min(3))?;
    let fiedler = basis.eigenvectors.column(1).to_owned();
    let fiedler_value = basis.eigenvalues[1];
    let degenerate = n >= 3 && (basis.eigenvalues[2] - basis.eigenvalues[1]) < FIEDLER_DEGENERACY_TOL;
    let mut labels = vec![0u32; n];
    if !degenerate {
        let side: Vec<bool> = fiedler.iter().map(|&y| y > opts.threshold).collect();
        let positive = side.iter().filter(|&&s| s).count();
        let negative = n - positive;
        let foreground = if positive != negative {
            positive < negative
        } else {
            let border = |want: bool| (0..n).filter(|&i| side[i] == want && grid.is_border(i)).count();
            let (bp, bn) = (border(true), border(false));
            if bp != bn {
                bp < bn
            } else {
                !side[0]
            }
        };
        for (label, &s) in labels.iter_mut().zip(&side) {
            *label = u32::from(s == foreground);
        }
    }
    let mask = LabelMask::new(grid, labels).map_err(|e| SpectralError::ShapeMismatch(e.to_string()))?;
    Ok(ObjectSegmentation { mask, fiedler_vector: fiedler, fiedler_value, degenerate })
}

/// Per-patch segment labels on a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabeling {
    pub grid: PatchGrid,
    pub labels: Vec<u32>,
    pub background_label: Option<u32>,
}

impl SegmentLabeling {
    /// Builds a labeling, renumbering labels `0..k` in order of first appearance.
    pub fn from_raw(grid: PatchGrid, raw: &[usize]) -> Result<Self> {
        if raw.len() != grid.len() {
            return Err(SpectralError::ShapeMismatch(format!("{} labels for {} patches", raw.len(), grid.len())));
        }
        let mut remap = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|&l| {
                let next = remap.len() as u32;
                *remap.entry(l).or_insert(next)
            })
            .collect();
        Ok(Self { grid, labels, background_label: None })
    }

    pub fn segment_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.segment_count()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Mask with labels as-is.
    pub fn to_mask(&self) -> LabelMask {
        LabelMask::new(self.grid, self.labels.clone()).expect("labels match grid")
    }

    /// Mask with the background segment swapped to label 0.
    pub fn to_mask_background_zero(&self) -> LabelMask {
        let bg = self.background_label.unwrap_or(0);
        let labels = self
            .labels
            .iter()
            .map(|&l| match l {
                l if l == bg => 0,
                0 => bg,
                l => l,
            })
            .collect();
        LabelMask::new(self.grid, labels).expect("labels match grid")
    }
}

/// Spectral embedding (rows of `y_1 .. y_{num_ev-1}`) clustered into `num_segments`.
pub fn discrete_segments(
    w: &AffinityMatrix,
    grid: PatchGrid,
    num_ev: usize,
    num_segments: usize,
    seed: u64,
) -> Result<SegmentLabeling> {
    let n = w.n();
    if n != grid.len() {
        return Err(SpectralError::ShapeMismatch(format!("{n}x{n} affinity for {} patches", grid.len())));
    }
    if num_ev < 2 || num_ev > n {
        return Err(SpectralError::InvalidArgument(format!("need 2 <= eigenvectors <= {n}, got {num_ev}")));
    }
    if num_segments == 0 || num_segments > n {
        return Err(SpectralError::InvalidArgument(format!("need 1 <= segments <= {n}, got {num_segments}")));
    }
    let (_, basis) = laplacian_eigenbasis(w, num_ev)?;
    let embedding = basis.eigenvectors.slice(ndarray::s![.., 1..]).to_owned();
    let fit = kmeans_fit(&embedding, num_segments, seed)?;
    SegmentLabeling::from_raw(grid, &fit.labels)
}

/// Marks the most populous segment as background; ties go to the smaller label.
pub fn identify_background(s: &SegmentLabeling) -> SegmentLabeling {
    let counts = s.counts();
    let background = counts
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, usize)>, (label, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((label, c)),
        })
        .map(|(label, _)| label as u32);
    SegmentLabeling { background_label: background, ..s.clone() }
}

/// L2-normalized mean token of every non-background segment, by ascending label.
pub fn segment_features(f: &TokenFeatureMap, s: &SegmentLabeling) -> Result<Vec<(u32, Array1<f64>)>> {
    if f.len() != s.labels.len() {
        return Err(SpectralError::ShapeMismatch(format!("{} tokens for {} labels", f.len(), s.labels.len())));
    }
    let tokens = f.to_f64();
    let mut out = Vec::new();
    for label in 0..s.segment_count() as u32 {
        if Some(label) == s.background_label {
            continue;
        }
        let mut sum = Array1::<f64>::zeros(f.dim());
        let mut count = 0usize;
        for (i, &l) in s.labels.iter().enumerate() {
            if l == label {
                sum += &tokens.row(i);
                count += 1;
            }
        }
        if count == 0 {
            return Err(SpectralError::EmptySegment { label });
        }
        let mean = sum / count as f64;
        let norm = mean.dot(&mean).sqrt();
        if norm == 0.0 {
            return Err(SpectralError::ZeroSegmentFeature { label });
        }
        out.push((label, mean / norm));
    }
    Ok(out)
}

/// Dataset-wide semantic labels: background 0, otherwise `1 + cluster`.
pub fn semantic_masks(images: &[(TokenFeatureMap, SegmentLabeling)], k: usize, seed: u64) -> Result<(KMeansFit, Vec<LabelMask>)> {
    let mut rows = Vec::new();
    let mut owners = Vec::new();
    for (image, (f, s)) in images.iter().enumerate() {
        for (label, feature) in segment_features(f, s)? {
            rows.push(feature);
            owners.push((image, label));
        }
    }
    let dim = images.first().map_or(0, |(f, _)| f.dim());
    if rows.iter().any(|r| r.len() != dim) {
        return Err(SpectralError::ShapeMismatch("images have different token dimensions".into()));
    }
    let mut points = Array2::<f64>::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        points.row_mut(i).assign(r);
    }
    let fit = kmeans_fit(&points, k, seed)?;
    let mut masks: Vec<Vec<u32>> = images.iter().map(|(_, s)| vec![0u32; s.labels.len()]).collect();
    for (&(image, label), &cluster) in owners.iter().zip(&fit.labels) {
        let s = &images[image].1;
        for (i, &l) in s.labels.iter().enumerate() {
            if l == label {
                masks[image][i] = cluster as u32 + 1;
            }
        }
    }
    let masks = masks
        .into_iter()
        .zip(images)
        .map(|(labels, (_, s))| LabelMask::new(s.grid, labels).expect("labels match grid"))
        .collect();
    Ok((fit, masks))
}
