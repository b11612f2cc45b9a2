//! Scoring and evaluation: head-based and factor-norm entity scores,
//! ranking and classification metrics, and run-dispersion summaries.

use serde::Serialize;

use crate::augment::{linearize_head, sigmoid};
use crate::error::{Error, Result};
use crate::model::ModelState;

/// Supervised score `σ(ψ)` for every entity of the mode, in entity-index
/// order.
pub fn score_entities(state: &ModelState, mode: usize, task: usize) -> Result<Vec<f64>> {
    let heads = state
        .heads
        .get(&mode)
        .ok_or_else(|| Error::NoHead { mode: mode.to_string(), task: task.to_string() })?;
    if task >= heads.len() {
        return Err(Error::NoHead { mode: mode.to_string(), task: task.to_string() });
    }
    let n = state.factors[mode].nrows();
    Ok((0..n).map(|e| sigmoid(linearize_head(state, mode, task, e).psi)).collect())
}

/// Unsupervised anomaly score `sqrt(Σ_r λ_r² u_{n,r}²)`: the weighted
/// factor norm, large for entities loaded on strong components.
pub fn unsupervised_scores(state: &ModelState, mode: usize) -> Vec<f64> {
    let n = state.factors[mode].nrows();
    (0..n)
        .map(|e| {
            let mut s = 0.0;
            for r in 0..state.rank() {
                let v = state.lambda[r] * state.factors[mode][(e, r)];
                s += v * v;
            }
            s.sqrt()
        })
        .collect()
}

/// Area under the ROC curve via the rank-sum formulation, with average
/// ranks for tied scores.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), truth.len());
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateTruth);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied entries share the average rank
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if truth[idx] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Confusion-matrix metrics at a fixed threshold (score at or above the
/// threshold is predicted positive).
#[derive(Debug, Clone, Serialize)]
pub struct Classification {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// True when no entity was predicted positive, making precision a
    /// 0/0 convention (reported as 0).
    pub no_positive_predictions: bool,
}

pub fn classification_metrics(scores: &[f64], truth: &[bool], threshold: f64) -> Result<Classification> {
    assert_eq!(scores.len(), truth.len());
    if truth.iter().all(|&t| t) || truth.iter().all(|&t| !t) {
        return Err(Error::DegenerateTruth);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &t) in scores.iter().zip(truth) {
        match (s >= threshold, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let predicted = tp + fp;
    let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
    let recall = tp as f64 / (tp + fn_) as f64;
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let accuracy = (tp + tn) as f64 / scores.len() as f64;
    Ok(Classification {
        threshold,
        tp,
        fp,
        tn,
        fn_,
        precision,
        recall,
        f1,
        accuracy,
        no_positive_predictions: predicted == 0,
    })
}

/// Linear-interpolation quantile (the common statistical convention also
/// used by spreadsheet percentile functions) of pre-sorted values.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&p));
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Five-number summary of a metric across repeated runs.
#[derive(Debug, Clone, Serialize)]
pub struct Dispersion {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn dispersion_report(values: &[f64]) -> Result<Dispersion> {
    if values.is_empty() {
        return Err(Error::Config("dispersion needs at least one value".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Ok(Dispersion {
        count: sorted.len(),
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: *sorted.last().unwrap(),
    })
}

/// Write `mode,entity,task,score` rows, highest score first.
pub fn write_scores<W: std::io::Write>(
    mut w: W,
    mode_name: &str,
    task_name: &str,
    raw_ids: &[String],
    scores: &[f64],
) -> Result<()> {
    assert_eq!(raw_ids.len(), scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    writeln!(w, "mode,entity,task,score")?;
    for i in order {
        writeln!(w, "{mode_name},{},{task_name},{}", raw_ids[i], scores[i])?;
    }
    Ok(())
}

/// One parsed row of a score file.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub mode: String,
    pub entity: String,
    pub task: String,
    pub score: f64,
}

/// Read a `mode,entity,task,score` file.
pub fn read_scores<R: std::io::Read>(source: R) -> Result<Vec<ScoreRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record?;
        if r.len() < 4 {
            return Err(Error::Ingest("score file needs mode,entity,task,score columns".into()));
        }
        let score: f64 = r
            .get(3)
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| Error::Ingest(format!("bad score `{}`", r.get(3).unwrap())))?;
        rows.push(ScoreRow {
            mode: r.get(0).unwrap().trim().to_string(),
            entity: r.get(1).unwrap().trim().to_string(),
            task: r.get(2).unwrap().trim().to_string(),
            score,
        });
    }
    Ok(rows)
}
