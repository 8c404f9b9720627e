//! Connectionist Temporal Classification: path collapsing, the
//! forward–backward loss with its gradient, greedy and prefix-beam decoding,
//! and an exhaustive path-enumeration oracle for small instances.
//!
//! The blank class always sits at the last index, so a distribution over
//! `|charset| + 1` classes has blank at `|charset|`. Losses are negative log
//! probabilities in nats; all recursions run in log space.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{softmax, Tensor};

/// Maximum number of enumerated paths / live beam prefixes.
const ENUMERATION_GUARD: usize = 1_000_000;

/// A label: charset indices with no blanks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    /// Validates every index against the charset size (blank excluded).
    pub fn new(indices: Vec<usize>, charset_size: usize) -> Result<LabelSeq> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= charset_size) {
            return Err(Error::Usage(format!(
                "label index {bad} out of range for charset of {charset_size}"
            )));
        }
        Ok(LabelSeq(indices))
    }

    pub fn empty() -> LabelSeq {
        LabelSeq(Vec::new())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Count of adjacent equal pairs; a label needs `len + repeats` frames.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Collapse a path over the blank-augmented alphabet: merge adjacent
/// duplicates first, then drop blanks.
pub fn collapse(path: &[usize], classes_with_blank: usize) -> Result<LabelSeq> {
    let blank = classes_with_blank - 1;
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if p >= classes_with_blank {
            return Err(Error::Usage(format!(
                "path entry {p} out of range for alphabet of {classes_with_blank}"
            )));
        }
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    Ok(LabelSeq(out))
}

/// Row-stochastic `T × |A'|` class distribution (blank last).
#[derive(Debug, Clone, PartialEq)]
pub struct CtcDistribution {
    probs: Tensor,
}

impl CtcDistribution {
    pub fn new(probs: Tensor) -> Result<CtcDistribution> {
        if probs.rank() != 2 {
            return Err(Error::dim("ctc distribution", probs.shape(), "rank 2"));
        }
        for t in 0..probs.rows() {
            let row = probs.row(t);
            if row.iter().any(|&p| p < 0.0) {
                return Err(Error::Usage(format!("negative probability in row {t}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Usage(format!(
                    "distribution row {t} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(CtcDistribution { probs })
    }

    /// Row-wise softmax of a `T × |A'|` logits matrix.
    pub fn from_logits(logits: &Tensor) -> Result<CtcDistribution> {
        if logits.rank() != 2 {
            return Err(Error::dim("ctc softmax", logits.shape(), "rank 2"));
        }
        let k = logits.cols();
        let mut data = Vec::with_capacity(logits.len());
        for t in 0..logits.rows() {
            data.extend(softmax(logits.row(t)));
        }
        Ok(CtcDistribution {
            probs: Tensor::from_parts(&[logits.rows(), k], data),
        })
    }

    pub fn time_steps(&self) -> usize {
        self.probs.rows()
    }

    /// Class count including the blank.
    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    pub fn blank(&self) -> usize {
        self.classes() - 1
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.probs.row(t)
    }
}

/// Loss and gradient of the CTC objective for one sample.
#[derive(Debug, Clone)]
pub struct CtcLossResult {
    /// Negative log label probability, nats.
    pub loss: f64,
    /// Gradient with respect to the pre-softmax logits, `T × |A'|`.
    pub grad_logits: Tensor,
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

fn check_feasible(time_steps: usize, label: &LabelSeq) -> Result<()> {
    let needed = label.len() + label.adjacent_repeats();
    if time_steps < needed {
        return Err(Error::InfeasibleLabel {
            label_len: label.len(),
            repeats: label.adjacent_repeats(),
            needed,
            time_steps,
        });
    }
    Ok(())
}

/// Blank-augmented label l' = [b, l1, b, l2, ..., lL, b].
fn augment(label: &LabelSeq, blank: usize) -> Vec<usize> {
    let mut lp = Vec::with_capacity(2 * label.len() + 1);
    lp.push(blank);
    for &c in label.indices() {
        lp.push(c);
        lp.push(blank);
    }
    lp
}

/// Forward recursion over log probabilities; returns the full alpha lattice
/// (`T × S`, log domain) for reuse by the gradient path.
fn alpha_lattice(log_probs: &[Vec<f64>], lp: &[usize]) -> Vec<Vec<f64>> {
    let t_len = log_probs.len();
    let s_len = lp.len();
    let blank = *lp.first().unwrap();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = log_probs[0][lp[0]];
    if s_len > 1 {
        alpha[0][1] = log_probs[0][lp[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = alpha[t - 1][s];
            let step = if s >= 1 { alpha[t - 1][s - 1] } else { f64::NEG_INFINITY };
            let skip = if s >= 2 && lp[s] != blank && lp[s] != lp[s - 2] {
                alpha[t - 1][s - 2]
            } else {
                f64::NEG_INFINITY
            };
            alpha[t][s] = lse3(stay, step, skip) + log_probs[t][lp[s]];
        }
    }
    alpha
}

/// Beta recursion, exclusive of the emission at time t, so that
/// `sum_s exp(alpha[t][s] + beta[t][s])` equals the label probability at
/// every t.
fn beta_lattice(log_probs: &[Vec<f64>], lp: &[usize]) -> Vec<Vec<f64>> {
    let t_len = log_probs.len();
    let s_len = lp.len();
    let blank = *lp.first().unwrap();
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let stay = beta[t + 1][s] + log_probs[t + 1][lp[s]];
            let step = if s + 1 < s_len {
                beta[t + 1][s + 1] + log_probs[t + 1][lp[s + 1]]
            } else {
                f64::NEG_INFINITY
            };
            let skip = if s + 2 < s_len && lp[s + 2] != blank && lp[s + 2] != lp[s] {
                beta[t + 1][s + 2] + log_probs[t + 1][lp[s + 2]]
            } else {
                f64::NEG_INFINITY
            };
            beta[t][s] = lse3(stay, step, skip);
        }
    }
    beta
}

fn log_rows_from_dist(dist: &CtcDistribution) -> Vec<Vec<f64>> {
    (0..dist.time_steps())
        .map(|t| dist.row(t).iter().map(|&p| p.ln()).collect())
        .collect()
}

/// Negative log label probability from an explicit distribution
/// (forward-only; used by oracles and decoding diagnostics).
pub fn ctc_loss_from_dist(dist: &CtcDistribution, label: &LabelSeq) -> Result<f64> {
    check_feasible(dist.time_steps(), label)?;
    check_label_fits(dist, label)?;
    let lp = augment(label, dist.blank());
    let log_probs = log_rows_from_dist(dist);
    let alpha = alpha_lattice(&log_probs, &lp);
    let last = &alpha[dist.time_steps() - 1];
    let mut log_p = last[lp.len() - 1];
    if lp.len() > 1 {
        log_p = lse2(log_p, last[lp.len() - 2]);
    }
    if log_p.is_nan() {
        return Err(Error::NonFinite("ctc forward recursion".into()));
    }
    Ok(-log_p)
}

fn check_label_fits(dist: &CtcDistribution, label: &LabelSeq) -> Result<()> {
    if let Some(&bad) = label.indices().iter().find(|&&c| c >= dist.blank()) {
        return Err(Error::Usage(format!(
            "label index {bad} out of range for {} non-blank classes",
            dist.blank()
        )));
    }
    Ok(())
}

/// CTC loss and its gradient with respect to the logits.
///
/// The distribution is the softmax of `logits`; the gradient is
/// `y - occupancy posterior`, so every gradient row sums to zero.
pub fn ctc_loss(logits: &Tensor, label: &LabelSeq) -> Result<CtcLossResult> {
    let dist = CtcDistribution::from_logits(logits)?;
    check_feasible(dist.time_steps(), label)?;
    check_label_fits(&dist, label)?;
    let t_len = dist.time_steps();
    let k = dist.classes();
    let lp = augment(label, dist.blank());
    let log_probs = log_rows_from_dist(&dist);
    let alpha = alpha_lattice(&log_probs, &lp);
    let beta = beta_lattice(&log_probs, &lp);

    let last = &alpha[t_len - 1];
    let mut log_p = last[lp.len() - 1];
    if lp.len() > 1 {
        log_p = lse2(log_p, last[lp.len() - 2]);
    }
    if log_p.is_nan() || log_p == f64::NEG_INFINITY {
        return Err(Error::NonFinite("ctc loss (label probability is zero)".into()));
    }

    let mut grad = Tensor::zeros(&[t_len, k]);
    for t in 0..t_len {
        // log occupancy per augmented state, reduced onto classes
        let mut class_occ = vec![f64::NEG_INFINITY; k];
        for (s, &cls) in lp.iter().enumerate() {
            class_occ[cls] = lse2(class_occ[cls], alpha[t][s] + beta[t][s]);
        }
        let y = dist.row(t);
        for c in 0..k {
            let gamma = (class_occ[c] - log_p).exp();
            grad.set2(t, c, y[c] - gamma);
        }
    }
    Ok(CtcLossResult {
        loss: -log_p,
        grad_logits: grad,
    })
}

/// Literal path enumeration: sum of path products whose collapse equals the
/// label. Guarded to `|A'|^T <= 10^6`.
pub fn ctc_bruteforce(dist: &CtcDistribution, label: &LabelSeq) -> Result<f64> {
    let table = bruteforce_label_probs(dist)?;
    Ok(table.get(label).copied().unwrap_or(0.0))
}

/// Enumerate every path and accumulate probability per collapsed label.
pub fn bruteforce_label_probs(dist: &CtcDistribution) -> Result<HashMap<LabelSeq, f64>> {
    let t_len = dist.time_steps();
    let k = dist.classes();
    let mut total: usize = 1;
    for _ in 0..t_len {
        total = total
            .checked_mul(k)
            .filter(|&n| n <= ENUMERATION_GUARD)
            .ok_or_else(|| {
                Error::TooLarge(format!("{k}^{t_len} paths exceeds {ENUMERATION_GUARD}"))
            })?;
    }
    let mut table: HashMap<LabelSeq, f64> = HashMap::new();
    let mut path = vec![0usize; t_len];
    for mut idx in 0..total {
        for slot in path.iter_mut().rev() {
            *slot = idx % k;
            idx /= k;
        }
        let p: f64 = path.iter().enumerate().map(|(t, &c)| dist.row(t)[c]).product();
        let lab = collapse(&path, k)?;
        *table.entry(lab).or_insert(0.0) += p;
    }
    Ok(table)
}

/// Best-path decoding: per-row argmax (ties to the lowest class index),
/// then collapse.
pub fn decode_greedy(dist: &CtcDistribution) -> LabelSeq {
    let path: Vec<usize> = (0..dist.time_steps())
        .map(|t| {
            let row = dist.row(t);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    collapse(&path, dist.classes()).expect("argmax indices are in range")
}

#[derive(Clone)]
struct Beam {
    prefix: Vec<usize>,
    /// log probability of this prefix via paths ending in blank
    log_p_blank: f64,
    /// ... and via paths ending in the prefix's last symbol
    log_p_label: f64,
}

impl Beam {
    fn total(&self) -> f64 {
        lse2(self.log_p_blank, self.log_p_label)
    }
}

/// CTC prefix beam search with separate blank/non-blank accumulators.
/// An unbounded width (capped by the enumeration guard) is exact: it returns
/// the maximum-probability label.
pub fn decode_beam(dist: &CtcDistribution, beam_width: usize) -> Result<LabelSeq> {
    if beam_width < 1 {
        return Err(Error::Usage("beam width must be at least 1".into()));
    }
    let width = beam_width.min(ENUMERATION_GUARD);
    let blank = dist.blank();

    let mut beams = vec![Beam {
        prefix: Vec::new(),
        log_p_blank: 0.0,
        log_p_label: f64::NEG_INFINITY,
    }];

    for t in 0..dist.time_steps() {
        let log_row: Vec<f64> = dist.row(t).iter().map(|&p| p.ln()).collect();
        let mut next: Vec<Beam> = Vec::with_capacity(beams.len() * (blank + 1));
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut slot = |prefix: &Vec<usize>, next: &mut Vec<Beam>| -> usize {
            if let Some(&i) = index.get(prefix) {
                return i;
            }
            next.push(Beam {
                prefix: prefix.clone(),
                log_p_blank: f64::NEG_INFINITY,
                log_p_label: f64::NEG_INFINITY,
            });
            index.insert(prefix.clone(), next.len() - 1);
            next.len() - 1
        };

        for beam in &beams {
            let total = beam.total();
            // stay on this prefix through a blank
            let i = slot(&beam.prefix, &mut next);
            next[i].log_p_blank = lse2(next[i].log_p_blank, total + log_row[blank]);

            for c in 0..blank {
                if Some(&c) == beam.prefix.last() {
                    // same symbol again without a separating blank: the
                    // repeat merges into the existing final symbol
                    let i = slot(&beam.prefix, &mut next);
                    next[i].log_p_label =
                        lse2(next[i].log_p_label, beam.log_p_label + log_row[c]);
                    // a new occurrence is only reachable from blank-ended paths
                    let mut ext = beam.prefix.clone();
                    ext.push(c);
                    let i = slot(&ext, &mut next);
                    next[i].log_p_label =
                        lse2(next[i].log_p_label, beam.log_p_blank + log_row[c]);
                } else {
                    let mut ext = beam.prefix.clone();
                    ext.push(c);
                    let i = slot(&ext, &mut next);
                    next[i].log_p_label = lse2(next[i].log_p_label, total + log_row[c]);
                }
            }
        }

        next.sort_by(|a, b| {
            b.total()
                .partial_cmp(&a.total())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.prefix.cmp(&b.prefix))
        });
        next.truncate(width);
        beams = next;
    }

    beams.sort_by(|a, b| {
        b.total()
            .partial_cmp(&a.total())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.prefix.cmp(&b.prefix))
    });
    Ok(LabelSeq(beams.remove(0).prefix))
}
