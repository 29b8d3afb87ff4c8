//! Pixel-confusion metrics and their distribution over frame sequences.

use std::fs;
use std::path::Path;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::{AggregateStats, BinaryMask, Error, MetricsReport, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl From<&MetricsReport> for Confusion {
    fn from(r: &MetricsReport) -> Self {
        Confusion {
            tp: r.tp,
            fp: r.fp,
            fn_: r.fn_,
            tn: r.tn,
        }
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<Confusion> {
    if pred.dims() != gt.dims() {
        return Err(Error::invalid(format!(
            "prediction is {:?} but ground truth is {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut c = Confusion::default();
    Zip::from(pred.labels())
        .and(gt.labels())
        .for_each(|&p, &g| match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        });
    Ok(c)
}

/// Derives the seven scores from confusion counts.
///
/// A ratio with a zero denominator is 1 when the prediction and ground truth
/// are both empty (`tp + fp + fn == 0`) and 0 otherwise; specificity with no
/// ground-truth negatives is 1.
pub fn compute_metrics(counts: Confusion) -> Result<MetricsReport> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::invalid("no pixels to evaluate"));
    }
    let Confusion { tp, fp, fn_, tn } = counts;
    let vacuous = tp + fp + fn_ == 0;
    let ratio = |num: u64, den: u64| -> f64 {
        if den == 0 {
            if vacuous {
                1.0
            } else {
                0.0
            }
        } else {
            num as f64 / den as f64
        }
    };
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    Ok(MetricsReport {
        tp,
        fp,
        fn_,
        tn,
        iou: ratio(tp, tp + fp + fn_),
        f1,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        accuracy: (tp + tn) as f64 / total as f64,
        specificity: if tn + fp == 0 {
            1.0
        } else {
            tn as f64 / (tn + fp) as f64
        },
        dice: f1,
    })
}

pub fn evaluate_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricsReport> {
    compute_metrics(confusion(pred, gt)?)
}

/// Mean, extrema and population standard deviation of one score.
pub fn aggregate(reports: &[MetricsReport], metric_name: &str) -> Result<AggregateStats> {
    if reports.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty report list"));
    }
    let values: Vec<f64> = reports
        .iter()
        .map(|r| r.score(metric_name))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::argument(format!("unknown metric `{metric_name}`")))?;
    Ok(summarize(metric_name, &values))
}

/// Summary statistics of a nonempty sample.
pub(crate) fn summarize(metric: &str, values: &[f64]) -> AggregateStats {
    let n = values.len();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // shifted by the minimum so identical samples give exactly min and zero spread
    let mean = (min + values.iter().map(|v| v - min).sum::<f64>() / n as f64).clamp(min, max);
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    AggregateStats {
        metric: metric.to_string(),
        mean,
        min,
        max,
        std: var.sqrt(),
        n,
    }
}

/// Aggregates every score name.
pub fn aggregate_all(reports: &[MetricsReport]) -> Result<Vec<AggregateStats>> {
    MetricsReport::SCORE_NAMES
        .iter()
        .map(|name| aggregate(reports, name))
        .collect()
}

/// Metrics over the summed confusion counts of all frames.
pub fn pooled(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let counts = reports
        .iter()
        .map(Confusion::from)
        .fold(Confusion::default(), |a, b| a + b);
    compute_metrics(counts)
}

/// One row of a per-frame metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetricsRow {
    pub frame_index: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub specificity: f64,
}

impl FrameMetricsRow {
    pub fn new(frame_index: usize, r: &MetricsReport) -> Self {
        Self {
            frame_index,
            tp: r.tp,
            fp: r.fp,
            fn_: r.fn_,
            tn: r.tn,
            iou: r.iou,
            f1: r.f1,
            precision: r.precision,
            recall: r.recall,
            accuracy: r.accuracy,
            specificity: r.specificity,
        }
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            tn: self.tn,
            iou: self.iou,
            f1: self.f1,
            precision: self.precision,
            recall: self.recall,
            accuracy: self.accuracy,
            specificity: self.specificity,
            dice: self.f1,
        }
    }
}

fn create_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes `frame_index, tp, fp, fn, tn, iou, f1, precision, recall, accuracy, specificity`.
pub fn write_frame_csv(path: impl AsRef<Path>, rows: &[(usize, MetricsReport)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_writer(path)?;
    if rows.is_empty() {
        w.write_record([
            "frame_index",
            "tp",
            "fp",
            "fn",
            "tn",
            "iou",
            "f1",
            "precision",
            "recall",
            "accuracy",
            "specificity",
        ])?;
    }
    for (index, report) in rows {
        w.serialize(FrameMetricsRow::new(*index, report))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_frame_csv(path: impl AsRef<Path>) -> Result<Vec<FrameMetricsRow>> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingInput {
            name: "per-frame metrics CSV".into(),
            path: path.to_path_buf(),
        });
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Writes `metric, mean, min, max, std, n`.
pub fn write_aggregate_csv(path: impl AsRef<Path>, stats: &[AggregateStats]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create_writer(path)?;
    for s in stats {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_aggregate_csv(path: impl AsRef<Path>) -> Result<Vec<AggregateStats>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn mask_from(n: usize, fg: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(n, n, |r, c| fg.contains(&(r, c)))
    }

    #[test]
    fn confusion_examples() {
        let gt = BinaryMask::from_fn(5, 5, |r, c| (r + c) % 3 == 0);
        let k = gt.count_foreground() as u64;
        assert_eq!(
            confusion(&gt, &gt).unwrap(),
            Confusion {
                tp: k,
                fp: 0,
                fn_: 0,
                tn: 25 - k
            }
        );
        let inv = BinaryMask::from_fn(5, 5, |r, c| (r + c) % 3 != 0);
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));

        let pred = mask_from(4, &[(0, 0), (0, 1), (1, 0)]);
        let gt = mask_from(4, &[(0, 0), (0, 1), (2, 2)]);
        assert_eq!(
            confusion(&pred, &gt).unwrap(),
            Confusion {
                tp: 2,
                fp: 1,
                fn_: 1,
                tn: 12
            }
        );
        assert!(confusion(&pred, &BinaryMask::zeros(3, 4)).is_err());
    }

    #[test]
    fn metrics_on_derived_example() {
        let r = compute_metrics(Confusion {
            tp: 2,
            fp: 1,
            fn_: 1,
            tn: 12,
        })
        .unwrap();
        assert_eq!(r.iou, 0.5);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.accuracy, 0.875);
        assert!((r.specificity - 12.0 / 13.0).abs() < 1e-12);
        assert!((r.specificity - 0.9231).abs() < 1e-4);
        assert_eq!(r.dice, r.f1);
    }

    #[test]
    fn perfect_and_vacuous_cases() {
        let m = BinaryMask::from_fn(6, 6, |r, _| r < 2);
        let r = evaluate_masks(&m, &m).unwrap();
        for name in MetricsReport::SCORE_NAMES {
            assert_eq!(r.score(name), Some(1.0), "{name}");
        }
        let e = BinaryMask::zeros(6, 6);
        let r = evaluate_masks(&e, &e).unwrap();
        for name in MetricsReport::SCORE_NAMES {
            assert_eq!(r.score(name), Some(1.0), "{name}");
        }
        let r = evaluate_masks(&e, &m).unwrap();
        assert_eq!(
            (r.iou, r.precision, r.recall, r.specificity),
            (0.0, 0.0, 0.0, 1.0)
        );
        assert!(compute_metrics(Confusion::default()).is_err());
    }

    fn with_iou(iou: f64) -> MetricsReport {
        MetricsReport {
            iou,
            ..compute_metrics(Confusion {
                tp: 1,
                fp: 0,
                fn_: 0,
                tn: 0,
            })
            .unwrap()
        }
    }

    #[test]
    fn aggregate_examples() {
        let s = aggregate(&[with_iou(0.5)], "iou").unwrap();
        assert_eq!((s.mean, s.min, s.max, s.std, s.n), (0.5, 0.5, 0.5, 0.0, 1));

        let s = aggregate(&[with_iou(0.2), with_iou(0.4), with_iou(0.6)], "iou").unwrap();
        // oracle: population variance by hand, ((0.2)^2 + 0 + (0.2)^2) / 3
        let std = (0.08f64 / 3.0).sqrt();
        assert!((s.mean - 0.4).abs() < 1e-12);
        assert_eq!((s.min, s.max), (0.2, 0.6));
        assert!((s.std - std).abs() < 1e-12);
        assert!((s.std - 0.1633).abs() < 1e-4);

        let same = vec![with_iou(0.3); 10];
        let s = aggregate(&same, "iou").unwrap();
        assert_eq!((s.mean, s.std), (0.3, 0.0));

        assert!(matches!(aggregate(&[], "iou"), Err(Error::InvalidInput(_))));
        assert!(matches!(
            aggregate(&same, "hausdorff"),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = compute_metrics(Confusion {
            tp: 2,
            fp: 1,
            fn_: 1,
            tn: 12,
        })
        .unwrap();
        let p = dir.path().join("frames.csv");
        write_frame_csv(&p, &[(3, r)]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text
            .starts_with("frame_index,tp,fp,fn,tn,iou,f1,precision,recall,accuracy,specificity\n"));
        let rows = read_frame_csv(&p).unwrap();
        assert_eq!(rows[0].report(), r);

        let agg = aggregate_all(&[r]).unwrap();
        let p = dir.path().join("agg.csv");
        write_aggregate_csv(&p, &agg).unwrap();
        assert!(fs::read_to_string(&p)
            .unwrap()
            .starts_with("metric,mean,min,max,std,n\n"));
        assert_eq!(read_aggregate_csv(&p).unwrap(), agg);
    }

    fn arb_counts() -> impl Strategy<Value = Confusion> {
        (0u64..50, 0u64..50, 0u64..50, 0u64..50)
            .prop_filter("nonempty", |(a, b, c, d)| a + b + c + d > 0)
            .prop_map(|(tp, fp, fn_, tn)| Confusion { tp, fp, fn_, tn })
    }

    proptest! {
        #[test]
        fn report_counts_sum_to_total(c in arb_counts()) {
            let r = compute_metrics(c).unwrap();
            prop_assert_eq!(r.total(), c.total());
            for name in MetricsReport::SCORE_NAMES {
                let v = r.score(name).unwrap();
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn iou_never_exceeds_f1(c in arb_counts()) {
            let r = compute_metrics(c).unwrap();
            prop_assert!(r.iou <= r.f1);
            if c.tp + c.fp + c.fn_ > 0 {
                prop_assert!((r.f1 - 2.0 * r.iou / (1.0 + r.iou)).abs() < 1e-12);
            }
        }

        #[test]
        fn aggregate_is_ordered(values in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let reports: Vec<_> = values.iter().map(|&v| with_iou(v)).collect();
            let s = aggregate(&reports, "iou").unwrap();
            prop_assert!(s.min <= s.mean && s.mean <= s.max);
            prop_assert!(s.std >= 0.0);
        }

        #[test]
        fn pooled_counts_are_sums(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut reports = Vec::new();
            for _ in 0..3 {
                let a = BinaryMask::new(Array2::from_shape_fn((4, 4), |_| rng.random_range(0..2u8))).unwrap();
                let b = BinaryMask::new(Array2::from_shape_fn((4, 4), |_| rng.random_range(0..2u8))).unwrap();
                reports.push(evaluate_masks(&a, &b).unwrap());
            }
            prop_assert_eq!(pooled(&reports).unwrap().total(), 48);
        }
    }
}
