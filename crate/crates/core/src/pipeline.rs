//! End-to-end per-image pipeline: train, build affinities, segment.

use crate::affinity::{self, AffinityMatrix, Kappa};
use crate::feature_io::{LabelMask, TokenFeatureMap};
use crate::seed;
use crate::siamese::{self, AffineRanges, TrainConfig, TrainOutcome};
use crate::spectral::{self, FiedlerOptions, ObjectSegmentation, SegmentLabeling};
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kappa: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub num_eigenvectors: usize,
    pub num_segments: usize,
    pub kmeans_k: usize,
    pub seed: u64,
    pub normalize_vanilla: bool,
    pub fiedler_threshold: f64,
    pub affine: AffineRanges,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            kappa: 0.1,
            iterations: 10,
            batch_size: 2,
            learning_rate: 1e-2,
            num_eigenvectors: 15,
            num_segments: 15,
            kmeans_k: 20,
            seed: 0,
            normalize_vanilla: true,
            fiedler_threshold: 0.0,
            affine: AffineRanges::default(),
        }
    }
}

impl RunConfig {
    /// Training config for the image identified by `item`.
    pub fn train_config(&self, item: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            affine: self.affine,
            seed: seed::derive(self.seed, "train", item),
            ..TrainConfig::default()
        }
    }

    pub fn segment_seed(&self, item: u64) -> u64 {
        seed::derive(self.seed, "segments", item)
    }

    pub fn cluster_seed(&self) -> u64 {
        seed::derive(self.seed, "kmeans", 0)
    }
}

/// Stable per-image identifier derived from its name.
pub fn item_id(name: &str) -> u64 {
    seed::fnv1a64(name.as_bytes())
}

/// Everything computed for one image before segmentation.
#[derive(Debug, Clone)]
pub struct ImageAnalysis {
    pub training: TrainOutcome,
    pub vanilla: AffinityMatrix,
    pub semantic: AffinityMatrix,
    pub combined: AffinityMatrix,
}

/// Trains the heads on `f` and builds `W_feat = W_A + kappa * W_SA`.
pub fn analyze(f: &TokenFeatureMap, cfg: &RunConfig, item: u64) -> Result<ImageAnalysis, Error> {
    let training = siamese::train(f, &cfg.train_config(item))?;
    let vanilla = affinity::vanilla_affinity(f, cfg.normalize_vanilla);
    let semantic = affinity::semantic_affinity(&training.params, f)?;
    let combined = affinity::combine(&vanilla, &semantic, Kappa::new(cfg.kappa)?)?;
    Ok(ImageAnalysis { training, vanilla, semantic, combined })
}

pub fn object_mask(f: &TokenFeatureMap, w: &AffinityMatrix, cfg: &RunConfig) -> Result<ObjectSegmentation, Error> {
    let opts = FiedlerOptions { threshold: cfg.fiedler_threshold };
    Ok(spectral::fiedler_object_mask(w, f.grid(), opts)?)
}

/// Discrete segments with the background segment identified.
pub fn segments(f: &TokenFeatureMap, w: &AffinityMatrix, cfg: &RunConfig, item: u64) -> Result<SegmentLabeling, Error> {
    let s = spectral::discrete_segments(w, f.grid(), cfg.num_eigenvectors, cfg.num_segments, cfg.segment_seed(item))?;
    Ok(spectral::identify_background(&s))
}

/// Clusters the non-background segments of every image into `kmeans_k` classes.
pub fn semantic_masks(images: &[(TokenFeatureMap, SegmentLabeling)], cfg: &RunConfig) -> Result<Vec<LabelMask>, Error> {
    Ok(spectral::semantic_masks(images, cfg.kmeans_k, cfg.cluster_seed())?.1)
}
