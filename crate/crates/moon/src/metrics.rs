//! Evaluation metrics: threshold accuracy/AUC, multi-class accuracy,
//! Kendall's tau-b, per-class precision/recall/F1, confusion matrices,
//! Dice, and percentile bootstrap confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::tensor::{Result, TensorError};

/// K×K confusion matrix; rows are true grades, columns predicted.
pub fn confusion_matrix(labels: &[usize], preds: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if labels.len() != preds.len() {
        return Err(TensorError::ShapeMismatch {
            op: "confusion_matrix",
            lhs: vec![labels.len()],
            rhs: vec![preds.len()],
        });
    }
    let mut m = vec![vec![0usize; k]; k];
    for (&y, &p) in labels.iter().zip(preds) {
        if y >= k || p >= k {
            return Err(TensorError::Invalid {
                op: "confusion_matrix",
                msg: format!("grade out of range for k={k}: y={y} p={p}"),
            });
        }
        m[y][p] += 1;
    }
    Ok(m)
}

pub fn multiclass_accuracy(confusion: &[Vec<usize>]) -> f64 {
    let n: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    if n == 0 {
        return 0.0;
    }
    let correct: usize = confusion.iter().enumerate().map(|(i, r)| r[i]).sum();
    correct as f64 / n as f64
}

/// AUC as the Mann–Whitney statistic, counting score ties as 1/2.
/// `None` when either class is absent.
pub fn auc(binary_labels: &[bool], scores: &[f64]) -> Option<f64> {
    let mut pairs = 0.0f64;
    let mut wins = 0.0f64;
    for (i, &yi) in binary_labels.iter().enumerate() {
        if !yi {
            continue;
        }
        for (j, &yj) in binary_labels.iter().enumerate() {
            if yj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        None
    } else {
        Some(wins / pairs)
    }
}

/// Accuracy and AUC for the binary task grade ≥ tau. Accuracy is computed
/// from the decoded grades, AUC from continuous scores (expected grade).
pub fn threshold_binary(
    labels: &[usize],
    pred_grades: &[usize],
    scores: &[f64],
    tau: usize,
) -> Result<(f64, Option<f64>)> {
    if !(1..=3).contains(&tau) {
        return Err(TensorError::Invalid {
            op: "threshold_binary",
            msg: format!("tau must be 1..=3, got {tau}"),
        });
    }
    if labels.len() != pred_grades.len() || labels.len() != scores.len() || labels.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "threshold_binary",
            lhs: vec![labels.len()],
            rhs: vec![pred_grades.len(), scores.len()],
        });
    }
    let bin: Vec<bool> = labels.iter().map(|&y| y >= tau).collect();
    let correct = bin
        .iter()
        .zip(pred_grades)
        .filter(|(&b, &p)| (p >= tau) == b)
        .count();
    Ok((correct as f64 / labels.len() as f64, auc(&bin, scores)))
}

/// Kendall's tau-b with tie corrections. `None` when either vector is
/// fully tied.
pub fn kendall_tau_b(labels: &[usize], pred_grades: &[usize]) -> Result<Option<f64>> {
    let n = labels.len();
    if n != pred_grades.len() || n < 2 {
        return Err(TensorError::Invalid {
            op: "kendall_tau_b",
            msg: format!("needs two equal-length vectors with n >= 2, got {n}"),
        });
    }
    let (mut concordant, mut discordant) = (0i64, 0i64);
    let (mut ties_x, mut ties_y) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = labels[i] as i64 - labels[j] as i64;
            let dy = pred_grades[i] as i64 - pred_grades[j] as i64;
            match (dx == 0, dy == 0) {
                (true, true) => {
                    ties_x += 1;
                    ties_y += 1;
                }
                (true, false) => ties_x += 1,
                (false, true) => ties_y += 1,
                (false, false) => {
                    if dx.signum() == dy.signum() {
                        concordant += 1;
                    } else {
                        discordant += 1;
                    }
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    if ties_x == n0 || ties_y == n0 {
        return Ok(None);
    }
    let denom = (((n0 - ties_x) as f64) * ((n0 - ties_y) as f64)).sqrt();
    Ok(Some((concordant - discordant) as f64 / denom))
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Standard per-class precision/recall/F1 from a confusion matrix.
/// Degenerate denominators yield 0 by convention.
pub fn per_class_prf(confusion: &[Vec<usize>]) -> Vec<ClassPrf> {
    let k = confusion.len();
    (0..k)
        .map(|c| {
            let tp = confusion[c][c];
            let pred_c: usize = (0..k).map(|r| confusion[r][c]).sum();
            let support: usize = confusion[c].iter().sum();
            let precision = if pred_c == 0 { 0.0 } else { tp as f64 / pred_c as f64 };
            let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassPrf {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

/// Dice coefficient 2|A∩B|/(|A|+|B|); 1.0 when both masks are empty.
pub fn dice(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "dice",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let inter = a.iter().zip(b).filter(|(&x, &y)| x == 1 && y == 1).count();
    let total = a.iter().filter(|&&x| x == 1).count() + b.iter().filter(|&&y| y == 1).count();
    if total == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / total as f64)
    }
}

/// Percentile bootstrap 95% CI over `replicates` resamples with
/// replacement. The metric may return `None` (undefined on a replicate);
/// such replicates are skipped, and more than 10% skipped is an error.
pub fn bootstrap_ci<F>(
    metric: F,
    n: usize,
    replicates: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if n < 2 {
        return Err(TensorError::Invalid {
            op: "bootstrap_ci",
            msg: format!("needs n >= 2 samples, got {n}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(replicates);
    let mut idx = vec![0usize; n];
    for _ in 0..replicates {
        for slot in idx.iter_mut() {
            *slot = rng.gen_range(0..n);
        }
        if let Some(v) = metric(&idx) {
            values.push(v);
        }
    }
    if values.len() * 10 < replicates * 9 {
        return Err(TensorError::Invalid {
            op: "bootstrap_ci",
            msg: format!(
                "metric undefined on {} of {replicates} replicates",
                replicates - values.len()
            ),
        });
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((percentile(&values, 0.025), percentile(&values, 0.975)))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdMetrics {
    pub tau: usize,
    pub accuracy: f64,
    pub accuracy_ci: (f64, f64),
    pub auc: Option<f64>,
    pub auc_ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub confusion: Vec<Vec<usize>>,
    pub multiclass_accuracy: f64,
    pub multiclass_accuracy_ci: (f64, f64),
    pub kendall_tau_b: Option<f64>,
    pub thresholds: Vec<ThresholdMetrics>,
    pub per_class: Vec<ClassPrf>,
}

/// Full report from labels, decoded grades, and continuous scores.
pub fn eval_report(
    labels: &[usize],
    pred_grades: &[usize],
    scores: &[f64],
    k: usize,
    bootstrap_replicates: usize,
    seed: u64,
) -> Result<EvalReport> {
    let n = labels.len();
    let confusion = confusion_matrix(labels, pred_grades, k)?;
    let acc = multiclass_accuracy(&confusion);
    let acc_ci = bootstrap_ci(
        |idx| {
            let hit = idx.iter().filter(|&&i| labels[i] == pred_grades[i]).count();
            Some(hit as f64 / idx.len() as f64)
        },
        n,
        bootstrap_replicates,
        crate::seed::derive_seed(seed, "bootstrap-acc", 0),
    )?;
    let tau_b = kendall_tau_b(labels, pred_grades)?;

    let mut thresholds = Vec::new();
    for tau in 1..=3usize {
        let (accuracy, area) = threshold_binary(labels, pred_grades, scores, tau)?;
        let accuracy_ci = bootstrap_ci(
            |idx| {
                let hit = idx
                    .iter()
                    .filter(|&&i| (pred_grades[i] >= tau) == (labels[i] >= tau))
                    .count();
                Some(hit as f64 / idx.len() as f64)
            },
            n,
            bootstrap_replicates,
            crate::seed::derive_seed(seed, "bootstrap-thr-acc", tau as u64),
        )?;
        // AUC can be undefined on too many replicates of a small or
        // imbalanced split; report the point estimate without a CI then.
        let auc_ci = match area {
            Some(_) => bootstrap_ci(
                |idx| {
                    let bin: Vec<bool> = idx.iter().map(|&i| labels[i] >= tau).collect();
                    let sc: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
                    auc(&bin, &sc)
                },
                n,
                bootstrap_replicates,
                crate::seed::derive_seed(seed, "bootstrap-thr-auc", tau as u64),
            )
            .ok(),
            None => None,
        };
        thresholds.push(ThresholdMetrics {
            tau,
            accuracy,
            accuracy_ci,
            auc: area,
            auc_ci,
        });
    }

    let per_class = per_class_prf(&confusion);
    Ok(EvalReport {
        n,
        confusion,
        multiclass_accuracy: acc,
        multiclass_accuracy_ci: acc_ci,
        kendall_tau_b: tau_b,
        thresholds,
        per_class,
    })
}

impl EvalReport {
    /// One metric per row: name, value, ci_lo, ci_hi (empty when absent).
    pub fn csv_rows(&self) -> Vec<[String; 4]> {
        let fmt = |v: f64| format!("{v:.6}");
        let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
        let mut rows = vec![
            [
                "multiclass_accuracy".into(),
                fmt(self.multiclass_accuracy),
                fmt(self.multiclass_accuracy_ci.0),
                fmt(self.multiclass_accuracy_ci.1),
            ],
            [
                "kendall_tau_b".into(),
                opt(self.kendall_tau_b),
                String::new(),
                String::new(),
            ],
        ];
        for t in &self.thresholds {
            rows.push([
                format!("acc_ge_g{}", t.tau),
                fmt(t.accuracy),
                fmt(t.accuracy_ci.0),
                fmt(t.accuracy_ci.1),
            ]);
            rows.push([
                format!("auc_ge_g{}", t.tau),
                opt(t.auc),
                opt(t.auc_ci.map(|c| c.0)),
                opt(t.auc_ci.map(|c| c.1)),
            ]);
        }
        for (c, p) in self.per_class.iter().enumerate() {
            rows.push([format!("precision_g{c}"), fmt(p.precision), String::new(), String::new()]);
            rows.push([format!("recall_g{c}"), fmt(p.recall), String::new(), String::new()]);
            rows.push([format!("f1_g{c}"), fmt(p.f1), String::new(), String::new()]);
            rows.push([format!("support_g{c}"), p.support.to_string(), String::new(), String::new()]);
        }
        rows
    }
}

/// ROC points (fpr, tpr, threshold) for the binary task grade ≥ tau,
/// sweeping every distinct score.
pub fn roc_points(labels: &[usize], scores: &[f64], tau: usize) -> Vec<(f64, f64, f64)> {
    let bin: Vec<bool> = labels.iter().map(|&y| y >= tau).collect();
    let pos = bin.iter().filter(|&&b| b).count() as f64;
    let neg = bin.len() as f64 - pos;
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();
    let mut points = vec![(1.0, 1.0, f64::NEG_INFINITY)];
    for &c in &cuts {
        let tp = bin
            .iter()
            .zip(scores)
            .filter(|(&b, &s)| b && s > c)
            .count() as f64;
        let fp = bin
            .iter()
            .zip(scores)
            .filter(|(&b, &s)| !b && s > c)
            .count() as f64;
        points.push((
            if neg > 0.0 { fp / neg } else { 0.0 },
            if pos > 0.0 { tp / pos } else { 0.0 },
            c,
        ));
    }
    points
}
