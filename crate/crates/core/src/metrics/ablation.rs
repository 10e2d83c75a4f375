//! Kappa / normalization sweeps over a corpus of feature maps with ground truth.

use rayon::prelude::*;

use super::{evaluate, EvalReport};
use crate::affinity::{self, Kappa};
use crate::feature_io::{LabelMask, TokenFeatureMap};
use crate::pipeline::{self, RunConfig};
use crate::siamese;
use crate::Error;

pub const CSV_HEADER: &str = "config,kappa,normalize,frobenius,accuracy,miou";

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub name: String,
    pub features: TokenFeatureMap,
    pub truth: LabelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub kappas: Vec<f64>,
    pub normalize: Vec<bool>,
    pub run: RunConfig,
    pub jobs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { kappas: vec![0.1, 0.3, 0.5, 0.7, 0.9], normalize: vec![true], run: RunConfig::default(), jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config: String,
    pub kappa: f64,
    pub normalize: bool,
    /// Corpus averages.
    pub report: EvalReport,
}

fn config_name(kappa: f64, normalize: bool) -> String {
    let vanilla = if normalize { "W_A" } else { "W_A'" };
    format!("{vanilla}+{kappa}*W_SA")
}

/// Per-image reports for every `(normalize, kappa)` pair, in sweep order.
fn sweep_image(item: &CorpusItem, cfg: &AblationConfig) -> Result<Vec<EvalReport>, Error> {
    let f = &item.features;
    let id = pipeline::item_id(&item.name);
    // heads are trained once per image and shared by every configuration
    let training = siamese::train(f, &cfg.run.train_config(id))?;
    let semantic = affinity::semantic_affinity(&training.params, f)?;
    let mut reports = Vec::with_capacity(cfg.normalize.len() * cfg.kappas.len());
    for &normalize in &cfg.normalize {
        let vanilla = affinity::vanilla_affinity(f, normalize);
        for &kappa in &cfg.kappas {
            let combined = affinity::combine(&vanilla, &semantic, Kappa::new(kappa)?)?;
            let run = RunConfig { kappa, normalize_vanilla: normalize, ..cfg.run.clone() };
            // a degenerate Fiedler split scores as an all-background prediction
            let seg = pipeline::object_mask(f, &combined, &run)?;
            reports.push(evaluate(&seg.mask, &item.truth)?);
        }
    }
    Ok(reports)
}

/// Runs the object-segmentation pipeline for every configuration and averages
/// matched mIoU, accuracy and mask-affinity Frobenius gap over the corpus.
pub fn ablation_sweep(corpus: &[CorpusItem], cfg: &AblationConfig) -> Result<Vec<AblationRow>, Error> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for &k in &cfg.kappas {
        Kappa::new(k)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let per_image: Vec<Vec<EvalReport>> =
        pool.install(|| corpus.par_iter().map(|item| sweep_image(item, cfg)).collect::<Result<_, _>>())?;

    let count = corpus.len() as f64;
    let mut rows = Vec::new();
    let mut column = 0;
    for &normalize in &cfg.normalize {
        for &kappa in &cfg.kappas {
            let (mut miou, mut accuracy, mut frobenius) = (0.0, 0.0, 0.0);
            for reports in &per_image {
                let r = &reports[column];
                miou += r.miou;
                accuracy += r.accuracy;
                frobenius += r.frobenius.unwrap_or(0.0);
            }
            rows.push(AblationRow {
                config: config_name(kappa, normalize),
                kappa,
                normalize,
                report: EvalReport { miou: miou / count, accuracy: accuracy / count, frobenius: Some(frobenius / count) },
            });
            column += 1;
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.config,
            r.kappa,
            r.normalize,
            r.report.frobenius.unwrap_or(f64::NAN),
            r.report.accuracy,
            r.report.miou
        ));
    }
    out
}
