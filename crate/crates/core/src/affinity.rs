//! Patch affinity matrices: vanilla, semantic, combined and mask-induced.

use std::fmt;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::feature_io::{self, FeatureIoError, LabelMask, PatchGrid, TokenFeatureMap};
use crate::siamese::{predict, project, SiameseParams};

#[derive(Debug, Error)]
pub enum AffinityError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected {expected} affinity, got {found}")]
    KindMismatch { expected: &'static str, found: AffinityKind },
    #[error("invalid kappa {0}: must be finite and >= 0")]
    InvalidKappa(f64),
    #[error(transparent)]
    Io(#[from] FeatureIoError),
}

type Result<T> = std::result::Result<T, AffinityError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AffinityKind {
    /// Gram matrix with its global mean subtracted.
    Vanilla,
    /// Raw Gram matrix.
    VanillaUnnormalized,
    Semantic,
    Combined,
    MaskInduced,
}

impl fmt::Display for AffinityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            AffinityKind::Vanilla => "vanilla",
            AffinityKind::VanillaUnnormalized => "vanilla_unnormalized",
            AffinityKind::Semantic => "semantic",
            AffinityKind::Combined => "combined",
            AffinityKind::MaskInduced => "mask_induced",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    values: Array2<f64>,
    kind: AffinityKind,
}

impl AffinityMatrix {
    /// Wraps a square matrix; used for hand-built graphs and tests.
    pub fn from_values(values: Array2<f64>, kind: AffinityKind) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(AffinityError::ShapeMismatch(format!("affinity must be square, got {:?}", values.dim())));
        }
        Ok(Self { values, kind })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn kind(&self) -> AffinityKind {
        self.kind
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Same matrix multiplied by `factor`, keeping the kind.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { values: &self.values * factor, kind: self.kind }
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.n();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.values[[i, j]] - self.values[[j, i]]).abs());
            }
        }
        worst
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }

    /// Exports in the feature container with `Hp = Wp = n`, `d = 1`.
    pub fn save_ssam(&self, path: impl AsRef<Path>) -> Result<()> {
        let n = self.n();
        let grid = PatchGrid::from_patches(n, n, 1)?;
        let values = self.values.iter().map(|&v| v as f32).collect::<Vec<_>>();
        let tokens = Array2::from_shape_vec((n * n, 1), values).expect("n*n values");
        let map = TokenFeatureMap::new(grid, tokens)?;
        feature_io::save_features(&map, path)?;
        Ok(())
    }

    /// Min-max scaled grayscale heatmap, `n x n` pixels.
    pub fn heatmap_pgm(&self) -> Vec<u8> {
        let n = self.n();
        feature_io::encode_pgm(n, n, &feature_io::heatmap_bytes(self.values.iter().copied()))
    }

    pub fn save_heatmap(&self, path: impl AsRef<Path>) -> Result<()> {
        feature_io::write_atomic(path.as_ref(), &self.heatmap_pgm())?;
        Ok(())
    }
}

/// Combination weight for the semantic term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kappa(f64);

impl Kappa {
    pub const DEFAULT: Kappa = Kappa(0.1);

    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value >= 0.0 {
            Ok(Self(value))
        } else {
            Err(AffinityError::InvalidKappa(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Kappa {
    fn default() -> Self {
        Self::DEFAULT
    }
}

fn gram(x: &Array2<f64>) -> Array2<f64> {
    let mut g = x.dot(&x.t());
    // exact symmetry regardless of summation order
    let n = g.nrows();
    for i in 0..n {
        for j in i + 1..n {
            g[[j, i]] = g[[i, j]];
        }
    }
    g
}

/// `F F^T`, optionally minus the scalar mean of all its entries.
pub fn vanilla_affinity(f: &TokenFeatureMap, normalize: bool) -> AffinityMatrix {
    let mut g = gram(&f.to_f64());
    if normalize {
        let mean = g.mean().unwrap_or(0.0);
        g.mapv_inplace(|v| v - mean);
        AffinityMatrix { values: g, kind: AffinityKind::Vanilla }
    } else {
        AffinityMatrix { values: g, kind: AffinityKind::VanillaUnnormalized }
    }
}

/// Semantic embeddings `pi(psi(f_i))` on the untransformed tokens.
pub fn semantic_embeddings(params: &SiameseParams, f: &TokenFeatureMap) -> Result<Array2<f64>> {
    if params.dim() != f.dim() {
        return Err(AffinityError::ShapeMismatch(format!(
            "parameters of dimension {} for {}-dim tokens",
            params.dim(),
            f.dim()
        )));
    }
    Ok(predict(params, &project(params, &f.to_f64())))
}

/// `Z Z^T` for the semantic embeddings `Z`.
pub fn semantic_affinity(params: &SiameseParams, f: &TokenFeatureMap) -> Result<AffinityMatrix> {
    let z = semantic_embeddings(params, f)?;
    Ok(AffinityMatrix { values: gram(&z), kind: AffinityKind::Semantic })
}

/// `W_A + kappa * W_SA`.
pub fn combine(vanilla: &AffinityMatrix, semantic: &AffinityMatrix, kappa: Kappa) -> Result<AffinityMatrix> {
    if !matches!(vanilla.kind, AffinityKind::Vanilla | AffinityKind::VanillaUnnormalized) {
        return Err(AffinityError::KindMismatch { expected: "vanilla", found: vanilla.kind });
    }
    if semantic.kind != AffinityKind::Semantic {
        return Err(AffinityError::KindMismatch { expected: "semantic", found: semantic.kind });
    }
    if vanilla.n() != semantic.n() {
        return Err(AffinityError::ShapeMismatch(format!("{} vs {} patches", vanilla.n(), semantic.n())));
    }
    let mut values = vanilla.values.clone();
    values.scaled_add(kappa.value(), &semantic.values);
    Ok(AffinityMatrix { values, kind: AffinityKind::Combined })
}

/// Same-label indicator matrix of a mask.
pub fn mask_affinity(m: &LabelMask) -> AffinityMatrix {
    let labels = m.labels();
    let n = labels.len();
    let values = Array2::from_shape_fn((n, n), |(i, j)| if labels[i] == labels[j] { 1.0 } else { 0.0 });
    AffinityMatrix { values, kind: AffinityKind::MaskInduced }
}
