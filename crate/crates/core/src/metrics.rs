//! NDCG@m with gain `2^y - 1` and discount `log2(max(2, i))`, mean NDCG over
//! all cut positions, top-k positive counts, and a Monte Carlo baseline for
//! uniformly random rankings.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Outfits of one user ordered by descending score, ties broken by ascending
/// outfit id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub ids: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl RankedList {
    /// Rank `(id, score, relevance)` entries.
    pub fn rank(entries: &[(usize, f64, u8)]) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| !e.1.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("score of outfit {}", e.0),
            });
        }
        let mut order: Vec<&(usize, f64, u8)> = entries.iter().collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(RankedList {
            ids: order.iter().map(|e| e.0).collect(),
            scores: order.iter().map(|e| e.1).collect(),
            labels: order.iter().map(|e| e.2).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y > 0).count()
    }
}

fn gain(y: u8) -> f64 {
    (2f64).powi(y as i32) - 1.0
}

fn discount(i: usize) -> f64 {
    (i.max(2) as f64).log2()
}

/// Cumulative DCG at every cut `1..=len`.
fn dcg_prefix(labels: &[u8]) -> Vec<f64> {
    let mut acc = 0.0;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            acc += gain(y) / discount(i + 1);
            acc
        })
        .collect()
}

fn ideal(labels: &[u8]) -> Vec<u8> {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted
}

/// NDCG at every cut `m = 1..=len`. Lists without positives score 0.
pub fn ndcg_curve(labels: &[u8]) -> Vec<f64> {
    let dcg = dcg_prefix(labels);
    let best = dcg_prefix(&ideal(labels));
    dcg.iter()
        .zip(&best)
        .map(|(d, b)| if *b > 0.0 { d / b } else { 0.0 })
        .collect()
}

/// NDCG at cut `m` (1-based) of labels in ranked order.
pub fn ndcg_at_m(labels: &[u8], m: usize) -> Result<f64> {
    if m == 0 || m > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "cut position {m} outside 1..={}",
            labels.len()
        )));
    }
    Ok(ndcg_curve(labels)[m - 1])
}

/// Mean of NDCG@m over `m = 1..=len`.
pub fn mean_ndcg(labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("mean NDCG of an empty list".into()));
    }
    Ok(ndcg_curve(labels).iter().sum::<f64>() / labels.len() as f64)
}

/// Number of positives among the first `k` entries.
pub fn topk_positive_count(labels: &[u8], k: usize) -> Result<usize> {
    if k > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "top-{k} of a list of {}",
            labels.len()
        )));
    }
    Ok(labels[..k].iter().filter(|&&y| y > 0).count())
}

/// Per-user (or averaged) ranking quality.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// NDCG@m at index `m - 1`.
    pub ndcg_at: Vec<f64>,
    pub mean_ndcg: f64,
    /// Positives in the top `k` at index `k - 1` (fractional after averaging).
    pub topk_positive: Vec<f64>,
}

impl Metrics {
    pub fn of(list: &RankedList) -> Result<Metrics> {
        if list.is_empty() {
            return Err(Error::InvalidArgument("empty test set".into()));
        }
        let ndcg_at = ndcg_curve(&list.labels);
        let mut hits = 0.0;
        let topk_positive = list
            .labels
            .iter()
            .map(|&y| {
                hits += f64::from(u8::from(y > 0));
                hits
            })
            .collect();
        Ok(Metrics {
            mean_ndcg: ndcg_at.iter().sum::<f64>() / ndcg_at.len() as f64,
            ndcg_at,
            topk_positive,
        })
    }

    pub fn topk(&self, k: usize) -> f64 {
        self.topk_positive[k.min(self.topk_positive.len()) - 1]
    }
}

/// Unweighted mean over users. Curves are truncated to the shortest list.
pub fn aggregate(per_user: &[Metrics]) -> Result<Metrics> {
    if per_user.is_empty() {
        return Err(Error::InvalidArgument("no per-user metrics to aggregate".into()));
    }
    let n = per_user.len() as f64;
    let len = per_user.iter().map(|m| m.ndcg_at.len()).min().unwrap_or(0);
    let mean_at = |f: &dyn Fn(&Metrics) -> &Vec<f64>, i: usize| per_user.iter().map(|m| f(m)[i]).sum::<f64>() / n;
    Ok(Metrics {
        ndcg_at: (0..len).map(|i| mean_at(&|m| &m.ndcg_at, i)).collect(),
        mean_ndcg: per_user.iter().map(|m| m.mean_ndcg).sum::<f64>() / n,
        topk_positive: (0..len).map(|i| mean_at(&|m| &m.topk_positive, i)).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Baseline {
    pub mean_ndcg: f64,
    pub stderr: f64,
    /// Mean positives in the top 10 (or the whole list when shorter).
    pub top10: f64,
}

/// Monte Carlo mean NDCG of uniformly random rankings of `n_pos` positives
/// among `n_total` outfits.
pub fn random_baseline(n_pos: usize, n_total: usize, trials: usize, seed: u64) -> Result<Baseline> {
    if n_pos > n_total || n_total == 0 {
        return Err(Error::InvalidArgument(format!(
            "{n_pos} positives among {n_total} outfits"
        )));
    }
    if trials < 1000 {
        return Err(Error::InvalidArgument(format!("{trials} trials (need at least 1000)")));
    }
    let mut labels: Vec<u8> = (0..n_total).map(|i| u8::from(i < n_pos)).collect();
    let mut r = rng::stream(seed, "random-baseline", 0);
    let k = n_total.min(10);
    let (mut sum, mut sum_sq, mut hits) = (0.0, 0.0, 0.0);
    for _ in 0..trials {
        labels.shuffle(&mut r);
        let v = mean_ndcg(&labels)?;
        sum += v;
        sum_sq += v * v;
        hits += topk_positive_count(&labels, k)? as f64;
    }
    let t = trials as f64;
    let mean = sum / t;
    let var = ((sum_sq - t * mean * mean) / (t - 1.0)).max(0.0);
    Ok(Baseline {
        mean_ndcg: mean,
        stderr: (var / t).sqrt(),
        top10: hits / t,
    })
}

/// One file per (architecture, stage): a row per user plus an aggregate row.
pub fn write_metrics_csv(path: &Path, per_user: &[(usize, Metrics)], total: &Metrics) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["user", "mean_ndcg", "top10_positive", "outfits"])?;
    for (user, m) in per_user {
        w.write_record([
            user.to_string(),
            format!("{:.6}", m.mean_ndcg),
            format!("{:.6}", m.topk(10)),
            m.ndcg_at.len().to_string(),
        ])?;
    }
    w.write_record([
        "all".to_string(),
        format!("{:.6}", total.mean_ndcg),
        format!("{:.6}", total.topk(10)),
        total.ndcg_at.len().to_string(),
    ])?;
    write_csv(path, w)
}

/// `(position, value)` rows, positions starting at 1.
pub fn write_curve_csv(path: &Path, column: &str, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([column, "value"])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{v:.6}")])?;
    }
    write_csv(path, w)
}

pub(crate) fn write_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
