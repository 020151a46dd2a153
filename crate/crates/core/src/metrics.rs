//! SNR training objective, SI-SDR evaluation metric and utterance-level
//! permutation-invariant selection.
//!
//! Both metrics carry an `ε = 1e-8` floor inside the log so that perfect
//! (and, for SI-SDR, orthogonal) estimates land on ±80 dB instead of ±∞.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const METRIC_EPS: f64 = 1e-8;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_lengths(est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::shape("metric", &[est.len()], &[reference.len()]));
    }
    Ok(())
}

/// `10·log10(‖r‖² / (‖r−e‖² + ε‖r‖²))`.
pub fn snr_db(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(est, reference)?;
    let power = dot(reference, reference);
    if power == 0.0 {
        return Err(Error::Contract("SNR against an all-zero reference".into()));
    }
    let err: f64 = est.iter().zip(reference).map(|(e, r)| (r - e) * (r - e)).sum();
    Ok(10.0 * (power / (err + METRIC_EPS * power)).log10())
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let mu = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mu).collect()
}

/// Scale-invariant SDR on mean-removed signals.
pub fn si_sdr_db(est: &[f64], reference: &[f64]) -> Result<f64> {
    check_lengths(est, reference)?;
    let (e, r) = (zero_mean(est), zero_mean(reference));
    let (rr, ee) = (dot(&r, &r), dot(&e, &e));
    if rr == 0.0 || ee == 0.0 {
        return Err(Error::Contract("SI-SDR with a zero (or constant) signal".into()));
    }
    let alpha = dot(&e, &r) / rr;
    let target = alpha * alpha * rr;
    let residual: f64 = e.iter().zip(&r).map(|(ev, rv)| (ev - alpha * rv).powi(2)).sum();
    let floor = METRIC_EPS * ee;
    Ok(10.0 * ((target + floor) / (residual + floor)).log10())
}

/// Equal-count, equal-length estimate/reference sets.
#[derive(Debug, Clone)]
pub struct SourcePair {
    pub estimates: Vec<Vec<f64>>,
    pub references: Vec<Vec<f64>>,
}

impl SourcePair {
    pub fn new(estimates: Vec<Vec<f64>>, references: Vec<Vec<f64>>) -> Result<Self> {
        if estimates.len() != references.len() || estimates.is_empty() {
            return Err(Error::shape("source pair", &[estimates.len()], &[references.len()]));
        }
        let len = references[0].len();
        for s in estimates.iter().chain(&references) {
            if s.len() != len {
                return Err(Error::shape("source pair", &[s.len()], &[len]));
            }
        }
        if references.iter().all(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::Contract("all references are zero".into()));
        }
        Ok(SourcePair { estimates, references })
    }

    pub fn sources(&self) -> usize {
        self.references.len()
    }
}

/// All permutations of `0..n`, identity first, in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        out.push(p.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("pivot has a successor");
        p.swap(i - 1, j);
        p[i..].reverse();
    }
}

/// Best assignment `estimate perm[s] ↔ reference s` under `metric`, by mean
/// score. Ties keep the earliest permutation (identity first).
#[derive(Debug, Clone, PartialEq)]
pub struct PitScore {
    pub permutation: Vec<usize>,
    pub per_source: Vec<f64>,
    pub mean: f64,
}

pub fn pit_score(pair: &SourcePair, metric: fn(&[f64], &[f64]) -> Result<f64>) -> Result<PitScore> {
    let n = pair.sources();
    let mut table = vec![vec![0.0; n]; n];
    for (e, row) in table.iter_mut().enumerate() {
        for (r, cell) in row.iter_mut().enumerate() {
            *cell = metric(&pair.estimates[e], &pair.references[r])?;
        }
    }
    let mut best: Option<PitScore> = None;
    for perm in permutations(n) {
        let per_source: Vec<f64> = (0..n).map(|r| table[perm[r]][r]).collect();
        let mean = per_source.iter().sum::<f64>() / n as f64;
        if best.as_ref().is_none_or(|b| mean > b.mean) {
            best = Some(PitScore {
                permutation: perm,
                per_source,
                mean,
            });
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Differentiable `−SNR(est, reference)` in dB, `est: [L]`.
pub fn neg_snr_loss(est: &Tensor, reference: &[f64]) -> Result<Tensor> {
    if est.numel() != reference.len() {
        return Err(Error::shape("snr loss", est.shape(), &[reference.len()]));
    }
    let power = dot(reference, reference);
    if power == 0.0 {
        return Err(Error::Contract("SNR against an all-zero reference".into()));
    }
    let r = Tensor::new(reference.to_vec(), est.shape())?;
    let diff = r.sub(est)?;
    let err = diff.mul(&diff)?.sum_all();
    err.add(&Tensor::scalar(METRIC_EPS * power))?
        .log10()
        .scale(10.0)
        .add(&Tensor::scalar(-10.0 * power.log10()))
}

/// Permutation-invariant SNR loss.
#[derive(Debug)]
pub struct PitLoss {
    /// `−mean SNR` under the chosen permutation; scalar.
    pub loss: Tensor,
    pub permutation: Vec<usize>,
}

/// `estimates: [n × L]` tracked tensor, `references`: `n` signals of length `L`.
pub fn pit_loss(estimates: &Tensor, references: &[Vec<f64>]) -> Result<PitLoss> {
    let n = references.len();
    if estimates.rank() != 2 || estimates.shape()[0] != n {
        return Err(Error::shape("pit_loss", estimates.shape(), &[n]));
    }
    let len = estimates.shape()[1];
    let rows: Vec<Vec<f64>> = estimates.data().chunks(len).map(<[f64]>::to_vec).collect();
    let pair = SourcePair::new(rows, references.to_vec())?;
    let best = pit_score(&pair, snr_db)?;
    let mut terms = Vec::with_capacity(n);
    for (r, &e) in best.permutation.iter().enumerate() {
        let row = estimates.slice(0, e, 1)?.reshape(&[len])?;
        terms.push(neg_snr_loss(&row, &references[r])?.reshape(&[1])?);
    }
    Ok(PitLoss {
        loss: Tensor::concat(&terms, 0)?.mean_all(),
        permutation: best.permutation,
    })
}
