//! Ranking metrics for extreme class imbalance.
//!
//! Controls are downsampled upstream, so raw precision would overstate the
//! model: every false-positive count is multiplied by the downsampling
//! factor `k = N_full / N_sampled` before precision is computed, and the
//! per-point confidence interval uses the same rescaled counts
//! (`Beta(tp+1, k*fp+1)` with a uniform prior) so the point estimate always
//! lies inside its interval. Tied scores are processed as blocks to avoid
//! intra-tie ordering optimism, and the area under the precision-recall
//! curve is a right-continuous step integral over recall.

use serde::{Deserialize, Serialize};

use crate::claims::Population;
use crate::cohort::CodeSet;
use crate::error::{Error, Result};
use crate::features::RowKey;
use crate::rcs::CrossSection;

/// Numerics for the beta distribution: log-gamma, the regularized incomplete
/// beta function, and quantiles by bisection.
pub mod beta {
    /// Lanczos approximation of ln Gamma(x) for x > 0.
    pub fn ln_gamma(x: f64) -> f64 {
        const COEF: [f64; 6] = [
            76.180_091_729_471_46,
            -86.505_320_329_416_77,
            24.014_098_240_830_91,
            -1.231_739_572_450_155,
            0.120_865_097_386_617_9e-2,
            -0.539_523_938_495_3e-5,
        ];
        let mut y = x;
        let tmp = x + 5.5;
        let tmp = tmp - (x + 0.5) * tmp.ln();
        let mut ser = 1.000_000_000_190_015;
        for c in COEF {
            y += 1.0;
            ser += c / y;
        }
        -tmp + (2.506_628_274_631_000_5 * ser / x).ln()
    }

    /// Continued fraction for the incomplete beta (Lentz's algorithm).
    fn betacf(a: f64, b: f64, x: f64) -> f64 {
        const MAX_ITER: usize = 300;
        const EPS: f64 = 1e-15;
        const TINY: f64 = 1e-30;

        let qab = a + b;
        let qap = a + 1.0;
        let qam = a - 1.0;
        let mut c = 1.0;
        let mut d = 1.0 - qab * x / qap;
        if d.abs() < TINY {
            d = TINY;
        }
        d = 1.0 / d;
        let mut h = d;
        for m in 1..=MAX_ITER {
            let m = m as f64;
            let m2 = 2.0 * m;
            let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
            d = 1.0 + aa * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + aa / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
            let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
            d = 1.0 + aa * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + aa / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        h
    }

    /// Regularized incomplete beta function I_x(a, b).
    pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
        assert!(a > 0.0 && b > 0.0, "beta parameters must be positive");
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let bt = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
            + a * x.ln()
            + b * (1.0 - x).ln())
        .exp();
        if x < (a + 1.0) / (a + b + 2.0) {
            bt * betacf(a, b, x) / a
        } else {
            1.0 - bt * betacf(b, a, 1.0 - x) / b
        }
    }

    /// Quantile of Beta(a, b) at probability `p`, by bisection on the
    /// regularized incomplete beta to an interval width of 1e-10.
    pub fn quantile(p: f64, a: f64, b: f64) -> f64 {
        assert!((0.0..=1.0).contains(&p));
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        while hi - lo > 1e-10 {
            let mid = 0.5 * (lo + hi);
            if regularized_incomplete_beta(a, b, mid) >= p {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Scored rows plus the downsampling bookkeeping from cohort construction.
#[derive(Debug, Clone)]
pub struct RankedPredictions {
    pub scores: Vec<f64>,
    /// true = positive observed label
    pub labels: Vec<bool>,
    pub n_full_controls: u64,
    pub n_sampled_controls: u64,
}

impl RankedPredictions {
    pub fn new(
        scores: Vec<f64>,
        labels: Vec<bool>,
        n_full_controls: u64,
        n_sampled_controls: u64,
    ) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Eval("scores and labels differ in length".into()));
        }
        let negatives = labels.iter().filter(|l| !**l).count() as u64;
        if n_full_controls < n_sampled_controls || n_sampled_controls < negatives {
            return Err(Error::Eval(format!(
                "control counts must satisfy full ({n_full_controls}) >= sampled \
                 ({n_sampled_controls}) >= negatives present ({negatives})"
            )));
        }
        Ok(RankedPredictions {
            scores,
            labels,
            n_full_controls,
            n_sampled_controls,
        })
    }

    /// Predictions over an undownsampled set (k = 1).
    pub fn unsampled(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        let negatives = labels.iter().filter(|l| !**l).count() as u64;
        Self::new(scores, labels, negatives, negatives)
    }

    /// Downsampling factor k = N_full / N_sampled.
    pub fn k(&self) -> f64 {
        if self.n_sampled_controls == 0 {
            1.0
        } else {
            self.n_full_controls as f64 / self.n_sampled_controls as f64
        }
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn n_negative(&self) -> usize {
        self.labels.len() - self.n_positive()
    }

    fn check_both_classes(&self) -> Result<()> {
        let p = self.n_positive();
        if p == 0 || p == self.labels.len() {
            return Err(Error::Eval(
                "metrics undefined without both classes present".into(),
            ));
        }
        Ok(())
    }
}

/// Downsampling-corrected precision: tp / (tp + k * fp).
pub fn rescale_precision(tp: u64, fp: u64, k: f64) -> f64 {
    debug_assert!(tp + fp > 0, "undefined point");
    tp as f64 / (tp as f64 + k * fp as f64)
}

/// Rescaled precision divided by disease incidence.
pub fn fold_improvement(precision_rescaled: f64, incidence: f64) -> f64 {
    debug_assert!(incidence > 0.0);
    precision_rescaled / incidence
}

/// 95% (by default) interval on rescaled precision: central quantiles of
/// Beta(tp + 1, k * fp + 1). The uniform prior keeps tp = fp = 0 defined.
pub fn precision_ci(tp: u64, fp: u64, k: f64, level: f64) -> (f64, f64) {
    let a = tp as f64 + 1.0;
    let b = k * fp as f64 + 1.0;
    let tail = (1.0 - level) / 2.0;
    (beta::quantile(tail, a, b), beta::quantile(1.0 - tail, a, b))
}

/// One point on the precision-recall sweep (one block of tied scores).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
    pub recall: f64,
    pub precision_raw: f64,
    pub precision_rescaled: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Descending-score sweep with tied scores entering as one block.
pub fn pr_curve(preds: &RankedPredictions) -> Result<Vec<PRPoint>> {
    preds.check_both_classes()?;
    let k = preds.k();
    let p_total = preds.n_positive() as u64;

    let mut order: Vec<usize> = (0..preds.scores.len()).collect();
    order.sort_by(|&a, &b| {
        preds.scores[b]
            .partial_cmp(&preds.scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut points = Vec::new();
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0usize;
    while i < order.len() {
        let score = preds.scores[order[i]];
        let mut j = i;
        while j < order.len() && preds.scores[order[j]] == score {
            if preds.labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let (ci_low, ci_high) = precision_ci(tp, fp, k, 0.95);
        points.push(PRPoint {
            threshold: score,
            tp,
            fp,
            fn_count: p_total - tp,
            recall: tp as f64 / p_total as f64,
            precision_raw: tp as f64 / (tp + fp) as f64,
            precision_rescaled: rescale_precision(tp, fp, k),
            ci_low,
            ci_high,
        });
        i = j;
    }
    Ok(points)
}

/// Right-continuous step integral of rescaled precision over recall.
pub fn auprc(curve: &[PRPoint]) -> f64 {
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for point in curve {
        area += (point.recall - prev_recall) * point.precision_rescaled;
        prev_recall = point.recall;
    }
    area
}

/// Step integral of the precision confidence band over recall.
pub fn auprc_ci(curve: &[PRPoint]) -> (f64, f64) {
    let mut lo = 0.0;
    let mut hi = 0.0;
    let mut prev_recall = 0.0;
    for point in curve {
        lo += (point.recall - prev_recall) * point.ci_low;
        hi += (point.recall - prev_recall) * point.ci_high;
        prev_recall = point.recall;
    }
    (lo, hi)
}

/// First sweep point reaching at least `target` recall (the operating point
/// with the fewest flagged rows achieving it).
pub fn precision_at_recall(curve: &[PRPoint], target: f64) -> Option<&PRPoint> {
    curve.iter().find(|p| p.recall + 1e-12 >= target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC sweep with tie blocks; starts at (0, 0) and ends at (1, 1).
pub fn roc_curve(preds: &RankedPredictions) -> Result<Vec<RocPoint>> {
    preds.check_both_classes()?;
    let p_total = preds.n_positive() as f64;
    let n_total = preds.n_negative() as f64;

    let mut order: Vec<usize> = (0..preds.scores.len()).collect();
    order.sort_by(|&a, &b| {
        preds.scores[b]
            .partial_cmp(&preds.scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0usize;
    while i < order.len() {
        let score = preds.scores[order[i]];
        let mut j = i;
        while j < order.len() && preds.scores[order[j]] == score {
            if preds.labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_total,
            tpr: tp as f64 / p_total,
        });
        i = j;
    }
    Ok(points)
}

/// Tie-corrected rank statistic: the probability that a random positive
/// outranks a random negative, ties counting one half. Equals the
/// trapezoidal area under the ROC curve.
pub fn auroc(preds: &RankedPredictions) -> Result<f64> {
    preds.check_both_classes()?;
    let n = preds.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        preds.scores[a]
            .partial_cmp(&preds.scores[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    // average ranks over tie blocks (1-based)
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < n {
        let score = preds.scores[order[i]];
        let mut j = i;
        let mut pos_in_block = 0u64;
        while j < n && preds.scores[order[j]] == score {
            if preds.labels[order[j]] {
                pos_in_block += 1;
            }
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        rank_sum_pos += avg_rank * pos_in_block as f64;
        i = j;
    }
    let p = preds.n_positive() as f64;
    let neg = preds.n_negative() as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * neg))
}

/// Convenience AUPRC at k = 1 (used as the early-stopping metric).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let preds = RankedPredictions::unsampled(scores.to_vec(), labels.to_vec())?;
    Ok(auprc(&pr_curve(&preds)?))
}

/// Per-recall-decile summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileRow {
    pub target_recall: f64,
    pub threshold: f64,
    pub recall: f64,
    pub precision_raw: f64,
    pub precision_rescaled: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub fold_improvement: f64,
}

/// Decile table: for each recall target, the operating point with the fewest
/// flagged rows reaching it.
pub fn decile_table(curve: &[PRPoint], incidence: f64) -> Vec<DecileRow> {
    (1..=10)
        .filter_map(|i| {
            let target = i as f64 / 10.0;
            precision_at_recall(curve, target).map(|p| DecileRow {
                target_recall: target,
                threshold: p.threshold,
                recall: p.recall,
                precision_raw: p.precision_raw,
                precision_rescaled: p.precision_rescaled,
                ci_low: p.ci_low,
                ci_high: p.ci_high,
                fold_improvement: fold_improvement(p.precision_rescaled, incidence),
            })
        })
        .collect()
}

/// One benchmark screen row, optionally paired with the model's precision at
/// the same recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub rule: String,
    pub flagged: usize,
    pub tp: u64,
    pub fp: u64,
    pub recall: f64,
    pub precision_raw: f64,
    pub precision_rescaled: f64,
    pub fold_improvement: f64,
    pub model_precision_rescaled: Option<f64>,
    pub model_fold_improvement: Option<f64>,
}

/// Rule-based screen: flag a row when any rule code occurs within
/// `window_months` before its index date, then score the flags like a
/// (degenerate) classifier under the same rescaling.
pub fn benchmark_rule(
    population: &Population,
    rows: &[RowKey],
    cross_sections: &[CrossSection],
    rule_name: &str,
    rule_set: &CodeSet,
    window_months: u32,
    k: f64,
    incidence: f64,
) -> Result<BenchmarkRow> {
    use crate::calendar::add_months;
    if rule_set.is_empty() {
        return Err(Error::Config(format!(
            "benchmark rule set `{rule_name}` is empty"
        )));
    }
    let cs_by_id: std::collections::BTreeMap<u32, &CrossSection> =
        cross_sections.iter().map(|cs| (cs.id, cs)).collect();

    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut positives = 0u64;
    for row in rows {
        let positive = row.label.is_positive();
        if positive {
            positives += 1;
        }
        let patient = population.get(&row.patient_id).ok_or_else(|| {
            Error::Eval(format!("row references unknown patient `{}`", row.patient_id))
        })?;
        let cs = cs_by_id.get(&row.cs_id).ok_or_else(|| {
            Error::Eval(format!("row references unknown cross-section {}", row.cs_id))
        })?;
        let window_start = add_months(cs.index_date, -(window_months as i32));
        let flagged = patient.events().iter().any(|e| {
            e.date >= window_start
                && e.date <= cs.index_date
                && rule_set
                    .iter()
                    .any(|(kind, code)| *kind == e.kind && code == &e.code)
        });
        if flagged {
            if positive {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }

    let flagged = (tp + fp) as usize;
    let recall = if positives == 0 {
        0.0
    } else {
        tp as f64 / positives as f64
    };
    let (precision_raw, precision_rescaled) = if flagged == 0 {
        (0.0, 0.0)
    } else {
        (
            tp as f64 / flagged as f64,
            rescale_precision(tp, fp, k),
        )
    };
    Ok(BenchmarkRow {
        rule: rule_name.to_string(),
        flagged,
        tp,
        fp,
        recall,
        precision_raw,
        precision_rescaled,
        fold_improvement: if incidence > 0.0 {
            fold_improvement(precision_rescaled, incidence)
        } else {
            0.0
        },
        model_precision_rescaled: None,
        model_fold_improvement: None,
    })
}

/// Attach the model's operating point at the rule's recall.
pub fn pair_with_model(row: &mut BenchmarkRow, curve: &[PRPoint], incidence: f64) {
    if row.recall <= 0.0 {
        return;
    }
    if let Some(point) = precision_at_recall(curve, row.recall) {
        row.model_precision_rescaled = Some(point.precision_rescaled);
        row.model_fold_improvement = Some(fold_improvement(point.precision_rescaled, incidence));
    }
}

/// Scalar summary plus tables; the full curves are emitted as CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_rows: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub downsampling_factor: f64,
    pub incidence: f64,
    pub auprc: f64,
    pub auprc_ci_low: f64,
    pub auprc_ci_high: f64,
    pub auroc: f64,
    pub deciles: Vec<DecileRow>,
    pub benchmarks: Vec<BenchmarkRow>,
}

/// Full evaluation product: report plus plot-data curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: EvalReport,
    pub pr_curve: Vec<PRPoint>,
    pub roc_curve: Vec<RocPoint>,
}

/// Evaluate scored predictions against the stated incidence.
pub fn evaluate_predictions(preds: &RankedPredictions, incidence: f64) -> Result<Evaluation> {
    if incidence <= 0.0 {
        return Err(Error::Eval("incidence must be positive".into()));
    }
    let curve = pr_curve(preds)?;
    let roc = roc_curve(preds)?;
    let area = auprc(&curve);
    let (ci_low, ci_high) = auprc_ci(&curve);
    let report = EvalReport {
        n_rows: preds.scores.len(),
        n_positive: preds.n_positive(),
        n_negative: preds.n_negative(),
        downsampling_factor: preds.k(),
        incidence,
        auprc: area,
        auprc_ci_low: ci_low,
        auprc_ci_high: ci_high,
        auroc: auroc(preds)?,
        deciles: decile_table(&curve, incidence),
        benchmarks: Vec::new(),
    };
    Ok(Evaluation {
        report,
        pr_curve: curve,
        roc_curve: roc,
    })
}

pub fn write_pr_curve_csv<W: std::io::Write>(curve: &[PRPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "recall,precision_raw,precision_rescaled,ci_low,ci_high")?;
    for p in curve {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.recall, p.precision_raw, p.precision_rescaled, p.ci_low, p.ci_high
        )?;
    }
    Ok(())
}

pub fn write_roc_curve_csv<W: std::io::Write>(curve: &[RocPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "fpr,tpr")?;
    for p in curve {
        writeln!(w, "{},{}", p.fpr, p.tpr)?;
    }
    Ok(())
}
