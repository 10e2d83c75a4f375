//! Semantic affinity learning and spectral segmentation over pre-extracted
//! vision-transformer patch tokens.
//!
//! The pipeline for one image:
//!
//! 1. load tokens ([`feature_io`]),
//! 2. train a projector/predictor pair on random spatial views with a
//!    stop-gradient negative-cosine loss ([`siamese`]),
//! 3. build `W_feat = W_A + kappa * W_SA` ([`affinity`]),
//! 4. segment with the normalized Laplacian ([`spectral`]),
//! 5. score against ground truth ([`metrics`]).

pub mod affinity;
pub mod cli;
pub mod feature_io;
pub mod metrics;
pub mod pipeline;
pub mod seed;
pub mod siamese;
pub mod spectral;

use thiserror::Error;

pub use affinity::{AffinityKind, AffinityMatrix, Kappa};
pub use feature_io::{FixtureSpec, LabelMask, PatchGrid, TokenFeatureMap};
pub use pipeline::RunConfig;
pub use siamese::{SiameseParams, TrainConfig};
pub use spectral::{EigenBasis, SegmentLabeling};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    FeatureIo(#[from] feature_io::FeatureIoError),
    #[error(transparent)]
    Siamese(#[from] siamese::SiameseError),
    #[error(transparent)]
    Affinity(#[from] affinity::AffinityError),
    #[error(transparent)]
    Spectral(#[from] spectral::SpectralError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{0}")]
    Internal(String),
}

impl Error {
    /// Numerical failures: degenerate graphs, zero vectors, divergence.
    pub fn is_degenerate(&self) -> bool {
        use siamese::SiameseError as S;
        use spectral::SpectralError as Sp;
        matches!(
            self,
            Error::Spectral(Sp::AllZeroAffinity | Sp::NoConvergence { .. } | Sp::ZeroSegmentFeature { .. })
                | Error::Siamese(S::DivergedLoss { .. } | S::ZeroVector { .. })
        )
    }
}
