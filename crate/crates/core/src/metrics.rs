//! Evaluation statistics: Pearson correlation, top-k peak attainment and
//! population aggregation.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

#[cfg(not(feature = "std"))]
use num_traits::Float;

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(invalid(alloc::format!(
            "response series differ in length: {} vs {}",
            y.len(),
            yhat.len()
        )));
    }
    if y.iter().chain(yhat).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("response series".into()));
    }
    Ok(())
}

/// Pearson correlation. A constant series has no correlation and yields
/// [`Error::ConstantSeries`].
pub fn pearson(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    if y.len() < 2 {
        return Err(invalid("pearson needs at least two points"));
    }
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let mp = yhat.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in y.iter().zip(yhat) {
        let (da, db) = (a - my, b - mp);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantSeries);
    }
    // One square root keeps r = 1 exact when yhat == y.
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Indices sorted by descending value; ties keep their original order.
fn order_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, n });
    }
    Ok(())
}

/// Fraction of the predictions paired with the k largest real responses
/// that reach the k-th largest real response.
pub fn lambda_jro(y: &[f64], yhat: &[f64], k: usize) -> Result<f64> {
    check_pair(y, yhat)?;
    check_k(y.len(), k)?;
    let ord = order_desc(y);
    let t = y[ord[k - 1]];
    let hits = ord[..k].iter().filter(|&&i| yhat[i] >= t).count();
    Ok(hits as f64 / k as f64)
}

/// Fraction of the k largest predictions that reach the k-th largest real
/// response.
pub fn lambda_sro(y: &[f64], yhat: &[f64], k: usize) -> Result<f64> {
    check_pair(y, yhat)?;
    check_k(y.len(), k)?;
    let t = y[order_desc(y)[k - 1]];
    let hits = order_desc(yhat)[..k].iter().filter(|&&i| yhat[i] >= t).count();
    Ok(hits as f64 / k as f64)
}

/// Top 1 % of `n` responses, at least one.
pub fn peak_k(n: usize) -> usize {
    ((n as f64 / 100.0).round() as usize).max(1)
}

/// (PT_J, PT_S) in percent at `k` (default [`peak_k`]).
pub fn peak_tuning(y: &[f64], yhat: &[f64], k: Option<usize>) -> Result<(f64, f64)> {
    let k = k.unwrap_or_else(|| peak_k(y.len()));
    Ok((100.0 * lambda_jro(y, yhat, k)?, 100.0 * lambda_sro(y, yhat, k)?))
}

/// Mean and standard error (sample std with n−1 over √n).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sem: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.len() < 2 {
        return Err(invalid("aggregation needs at least two values"));
    }
    let n = values.len() as f64;
    // Sorting makes the float sums independent of neuron order.
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok(Summary {
        mean,
        sem: var.sqrt() / n.sqrt(),
        n: values.len(),
    })
}

/// Per-neuron scores. `corr` is `None` when either series is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronMetrics {
    pub neuron: usize,
    pub corr: Option<f64>,
    pub pt_j: f64,
    pub pt_s: f64,
    pub lambda_jro: f64,
    pub lambda_sro: f64,
}

impl NeuronMetrics {
    pub fn compute(neuron: usize, y: &[f64], yhat: &[f64], k: Option<usize>) -> Result<Self> {
        let k = k.unwrap_or_else(|| peak_k(y.len()));
        let corr = match pearson(y, yhat) {
            Ok(r) => Some(r),
            Err(Error::ConstantSeries) => None,
            Err(e) => return Err(e),
        };
        let (lj, ls) = (lambda_jro(y, yhat, k)?, lambda_sro(y, yhat, k)?);
        Ok(Self {
            neuron,
            corr,
            pt_j: 100.0 * lj,
            pt_s: 100.0 * ls,
            lambda_jro: lj,
            lambda_sro: ls,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: alloc::string::String,
    pub n_images: usize,
    pub k: usize,
    pub neurons: Vec<NeuronMetrics>,
    /// Over neurons with a defined correlation.
    pub corr: Option<Summary>,
    pub pt_j: Option<Summary>,
    pub pt_s: Option<Summary>,
}

impl MetricsReport {
    /// `pairs[i]` = (real, predicted) validation responses of neuron
    /// `neurons[i]`.
    pub fn new(model: &str, neurons: &[usize], pairs: &[(Vec<f64>, Vec<f64>)], k: Option<usize>) -> Result<Self> {
        if pairs.is_empty() || neurons.len() != pairs.len() {
            return Err(invalid("need one (real, predicted) pair per neuron"));
        }
        let n_images = pairs[0].0.len();
        let k = k.unwrap_or_else(|| peak_k(n_images));
        let rows = neurons
            .iter()
            .zip(pairs)
            .map(|(&i, (y, p))| NeuronMetrics::compute(i, y, p, Some(k)))
            .collect::<Result<Vec<_>>>()?;
        let corrs: Vec<f64> = rows.iter().filter_map(|r| r.corr).collect();
        let pj: Vec<f64> = rows.iter().map(|r| r.pt_j).collect();
        let ps: Vec<f64> = rows.iter().map(|r| r.pt_s).collect();
        Ok(Self {
            model: model.into(),
            n_images,
            k,
            neurons: rows,
            corr: summarize(&corrs).ok(),
            pt_j: summarize(&pj).ok(),
            pt_s: summarize(&ps).ok(),
        })
    }
}

/// Tuning curves of one neuron, each sorted descending: the real
/// responses, the predictions in the order of the real responses, and the
/// predictions sorted on their own.
#[derive(Debug, Clone, PartialEq)]
pub struct RankCurves {
    pub real: Vec<f64>,
    pub joint: Vec<f64>,
    pub separate: Vec<f64>,
}

pub fn rank_order_curves(y: &[f64], yhat: &[f64]) -> Result<RankCurves> {
    check_pair(y, yhat)?;
    let ord = order_desc(y);
    let mut separate = yhat.to_vec();
    separate.sort_by(|a, b| b.total_cmp(a));
    Ok(RankCurves {
        real: ord.iter().map(|&i| y[i]).collect(),
        joint: ord.iter().map(|&i| yhat[i]).collect(),
        separate,
    })
}

/// Rank-wise mean of already ranked curves of equal length (rank first,
/// then average).
pub fn average_curves(curves: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = curves.first() else {
        return Err(invalid("no curves to average"));
    };
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(invalid("curves differ in length"));
    }
    let mut out = vec![0.0; first.len()];
    for c in curves {
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    let n = curves.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Population tuning curves: every neuron ranked on its own, then averaged
/// rank by rank.
pub fn population_rank_curves(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<RankCurves> {
    let per = pairs
        .iter()
        .map(|(y, p)| rank_order_curves(y, p))
        .collect::<Result<Vec<_>>>()?;
    let take = |f: fn(&RankCurves) -> &Vec<f64>| -> Result<Vec<f64>> {
        average_curves(&per.iter().map(|c| f(c).clone()).collect::<Vec<_>>())
    };
    Ok(RankCurves {
        real: take(|c| &c.real)?,
        joint: take(|c| &c.joint)?,
        separate: take(|c| &c.separate)?,
    })
}
