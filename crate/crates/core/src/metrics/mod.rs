//! Segmentation quality and affinity-gap metrics, computed at patch resolution.

pub mod ablation;
pub mod assignment;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::affinity::AffinityMatrix;
use crate::feature_io::LabelMask;
pub use ablation::{ablation_sweep, rows_to_csv, AblationConfig, AblationRow, CorpusItem, CSV_HEADER};
pub use assignment::max_weight_matching;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub accuracy: f64,
    pub frobenius: Option<f64>,
}

fn check_same_grid(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    let (p, g) = (pred.grid(), gt.grid());
    if (p.rows(), p.cols()) != (g.rows(), g.cols()) {
        return Err(MetricsError::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            p.rows(),
            p.cols(),
            g.rows(),
            g.cols()
        )));
    }
    Ok(())
}

/// Distinct labels of `pred` and `gt` and their pairwise intersection counts.
struct Confusion {
    pred_labels: Vec<u32>,
    gt_labels: Vec<u32>,
    /// `counts[p][g]`
    counts: Vec<Vec<usize>>,
}

impl Confusion {
    fn new(pred: &LabelMask, gt: &LabelMask) -> Self {
        let index = |labels: &[u32]| labels.iter().copied().collect::<BTreeSet<u32>>().into_iter().collect::<Vec<_>>();
        let pred_labels = index(pred.labels());
        let gt_labels = index(gt.labels());
        let mut counts = vec![vec![0usize; gt_labels.len()]; pred_labels.len()];
        for (p, g) in pred.labels().iter().zip(gt.labels()) {
            let pi = pred_labels.binary_search(p).expect("indexed");
            let gi = gt_labels.binary_search(g).expect("indexed");
            counts[pi][gi] += 1;
        }
        Self { pred_labels, gt_labels, counts }
    }

    fn pred_total(&self, p: usize) -> usize {
        self.counts[p].iter().sum()
    }

    fn gt_total(&self, g: usize) -> usize {
        self.counts.iter().map(|row| row[g]).sum()
    }

    fn iou(&self, p: usize, g: usize) -> f64 {
        let inter = self.counts[p][g];
        let union = self.pred_total(p) + self.gt_total(g) - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

fn is_binary(m: &LabelMask) -> bool {
    m.labels().iter().all(|&l| l <= 1)
}

/// Mean IoU of the foreground (1) and background (0) classes, labels taken as-is.
///
/// Classes absent from both masks are skipped.
pub fn binary_miou(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_same_grid(pred, gt)?;
    let mut ious = Vec::with_capacity(2);
    for class in [0u32, 1] {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            let (a, b) = (p == class, g == class);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    Ok(if ious.is_empty() { 1.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 })
}

/// Mean IoU over ground-truth classes after Hungarian matching of predicted
/// labels to classes on the IoU matrix. Unmatched classes score 0.
pub fn matched_miou(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_same_grid(pred, gt)?;
    let c = Confusion::new(pred, gt);
    let weights: Vec<Vec<f64>> =
        (0..c.pred_labels.len()).map(|p| (0..c.gt_labels.len()).map(|g| c.iou(p, g)).collect()).collect();
    let matching = max_weight_matching(&weights);
    let total: f64 = matching.iter().enumerate().filter_map(|(p, g)| g.map(|g| weights[p][g])).sum();
    Ok(total / c.gt_labels.len() as f64)
}

/// mIoU: direct foreground/background IoU when both masks are binary,
/// Hungarian-matched mean IoU otherwise.
pub fn miou(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    if is_binary(pred) && is_binary(gt) {
        binary_miou(pred, gt)
    } else {
        matched_miou(pred, gt)
    }
}

/// Fraction of patches whose label agrees after the count-maximising label matching.
pub fn pixel_accuracy(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_same_grid(pred, gt)?;
    let c = Confusion::new(pred, gt);
    let weights: Vec<Vec<f64>> = c.counts.iter().map(|row| row.iter().map(|&v| v as f64).collect()).collect();
    let matching = max_weight_matching(&weights);
    let agree: f64 = matching.iter().enumerate().filter_map(|(p, g)| g.map(|g| weights[p][g])).sum();
    Ok(agree / pred.len() as f64)
}

/// `|A - B|_F`.
pub fn frobenius_gap(a: &AffinityMatrix, b: &AffinityMatrix) -> Result<f64> {
    if a.n() != b.n() {
        return Err(MetricsError::ShapeMismatch(format!("{} vs {} patches", a.n(), b.n())));
    }
    Ok(a.values().iter().zip(b.values().iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Matched mIoU and accuracy plus the mask-affinity Frobenius gap.
pub fn evaluate(pred: &LabelMask, gt: &LabelMask) -> Result<EvalReport> {
    use crate::affinity::mask_affinity;
    Ok(EvalReport {
        miou: matched_miou(pred, gt)?,
        accuracy: pixel_accuracy(pred, gt)?,
        frobenius: Some(frobenius_gap(&mask_affinity(pred), &mask_affinity(gt))?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{AffinityKind, AffinityMatrix};
    use crate::feature_io::PatchGrid;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn mask(rows: usize, cols: usize, labels: &[u32]) -> LabelMask {
        LabelMask::new(PatchGrid::from_patches(rows, cols, 1).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_and_disjoint() {
        let a = mask(4, 2, &[1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(miou(&a, &a).unwrap(), 1.0);
        assert_eq!(pixel_accuracy(&a, &a).unwrap(), 1.0);
        let b = mask(4, 2, &[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(miou(&a, &b).unwrap(), 0.0);
        assert_eq!(pixel_accuracy(&a, &b).unwrap(), 1.0);
        assert_eq!(matched_miou(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn hand_counted_third() {
        // fg: pred {0,1,2,3}, gt {2,3,4,5} -> overlap 2, union 6; bg: overlap {6,7}, union 6
        let pred = mask(4, 2, &[1, 1, 1, 1, 0, 0, 0, 0]);
        let gt = mask(4, 2, &[0, 0, 1, 1, 1, 1, 0, 0]);
        assert!((miou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(pixel_accuracy(&pred, &gt).unwrap(), 0.5);
    }

    #[test]
    fn six_of_eight_agree() {
        let pred = mask(4, 2, &[1, 1, 1, 0, 0, 0, 0, 1]);
        let gt = mask(4, 2, &[1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(pixel_accuracy(&pred, &gt).unwrap(), 0.75);
        // swapped prediction labels give the same matched accuracy
        let swapped = mask(4, 2, &[0, 0, 0, 1, 1, 1, 1, 0]);
        assert_eq!(pixel_accuracy(&swapped, &gt).unwrap(), 0.75);
    }

    #[test]
    fn multiclass_uses_matching() {
        let gt = mask(2, 3, &[0, 0, 1, 1, 2, 2]);
        let pred = mask(2, 3, &[7, 7, 3, 3, 5, 5]);
        assert_eq!(miou(&pred, &gt).unwrap(), 1.0);
        let coarse = mask(2, 3, &[4, 4, 4, 4, 9, 9]);
        // best matching: 9->class 2 (IoU 1), 4->class 0 or 1 (IoU 1/2); third class unmatched
        assert!((miou(&coarse, &gt).unwrap() - 0.5).abs() < 1e-15);
        assert!((pixel_accuracy(&coarse, &gt).unwrap() - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let a = mask(2, 2, &[0; 4]);
        let b = mask(1, 4, &[0; 4]);
        assert!(miou(&a, &b).is_err());
        assert!(pixel_accuracy(&a, &b).is_err());
        let za = AffinityMatrix::from_values(Array2::zeros((2, 2)), AffinityKind::Combined).unwrap();
        let zb = AffinityMatrix::from_values(Array2::zeros((3, 3)), AffinityKind::Combined).unwrap();
        assert!(frobenius_gap(&za, &zb).is_err());
    }

    #[test]
    fn frobenius_closed_form() {
        for n in 1..6 {
            let zero = AffinityMatrix::from_values(Array2::zeros((n, n)), AffinityKind::Combined).unwrap();
            let eye = AffinityMatrix::from_values(Array2::eye(n), AffinityKind::Combined).unwrap();
            assert!((frobenius_gap(&zero, &eye).unwrap() - (n as f64).sqrt()).abs() < 1e-15);
            assert_eq!(frobenius_gap(&eye, &eye).unwrap(), 0.0);
        }
    }

    proptest! {
        #[test]
        fn matched_metrics_ignore_pred_relabeling(
            pred in proptest::collection::vec(0u32..4, 12),
            gt in proptest::collection::vec(0u32..4, 12),
            offset in 2u32..40,
        ) {
            let a = mask(3, 4, &pred);
            let g = mask(3, 4, &gt);
            let relabeled: Vec<u32> = pred.iter().map(|&l| 3 - l + offset).collect();
            let b = mask(3, 4, &relabeled);
            prop_assert!((matched_miou(&a, &g).unwrap() - matched_miou(&b, &g).unwrap()).abs() < 1e-12);
            prop_assert!((pixel_accuracy(&a, &g).unwrap() - pixel_accuracy(&b, &g).unwrap()).abs() < 1e-12);
            let m = matched_miou(&a, &g).unwrap();
            let acc = pixel_accuracy(&a, &g).unwrap();
            prop_assert!((0.0..=1.0).contains(&m) && (0.0..=1.0).contains(&acc));
            prop_assert_eq!(m == 1.0, acc == 1.0);
        }

        #[test]
        fn frobenius_is_a_metric(seed in any::<u64>(), n in 1usize..7) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut m = || AffinityMatrix::from_values(
                Array2::from_shape_fn((n, n), |_| rng.random_range(-2.0..2.0)),
                AffinityKind::Combined,
            ).unwrap();
            let (a, b, c) = (m(), m(), m());
            let ab = frobenius_gap(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(frobenius_gap(&a, &a).unwrap(), 0.0);
            prop_assert!(ab > 0.0);
            prop_assert_eq!(ab, frobenius_gap(&b, &a).unwrap());
            prop_assert!(frobenius_gap(&a, &c).unwrap() <= ab + frobenius_gap(&b, &c).unwrap() + 1e-12);
        }
    }
}
