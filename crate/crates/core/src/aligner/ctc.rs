//! Minimal CTC topology.
//!
//! States for labels `w_1..w_M` are `[blank_0, w_1, blank_1, ..., w_M, blank_M]`.
//! Blanks self-loop; labels do not. Allowed moves are `blank_{i-1} -> w_i`,
//! `w_i -> blank_i` and `w_i -> w_{i+1}`. Paths start in `blank_0` or `w_1`
//! and end in `w_M` or `blank_M`, so every label occupies exactly one frame.
//! Class 0 is blank; phoneme id `k` is class `k + 1`.

use ndarray::Array2;

use super::Alignment;
use crate::error::{Error, Result};

const NEG_INF: f64 = f64::NEG_INFINITY;

fn lse2(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct Topology {
    classes: Vec<usize>,
}

impl Topology {
    fn new(log_probs: &Array2<f64>, labels: &[usize]) -> Result<Self> {
        let (n, c) = log_probs.dim();
        let m = labels.len();
        if m == 0 {
            return Err(Error::Shape("empty label sequence".into()));
        }
        if n < m {
            return Err(Error::SequenceTooLong { labels: m, frames: n });
        }
        if let Some(bad) = labels.iter().find(|l| **l + 1 >= c) {
            return Err(Error::Shape(format!(
                "label {bad} needs class {} but log_probs has {c} classes",
                bad + 1
            )));
        }
        let classes = (0..2 * m + 1)
            .map(|s| if s % 2 == 0 { 0 } else { labels[s / 2] + 1 })
            .collect();
        Ok(Self { classes })
    }

    fn states(&self) -> usize {
        self.classes.len()
    }

    fn is_blank(s: usize) -> bool {
        s % 2 == 0
    }

    fn alpha(&self, lp: &Array2<f64>) -> Array2<f64> {
        let (n, _) = lp.dim();
        let s_count = self.states();
        let mut alpha = Array2::from_elem((n, s_count), NEG_INF);
        alpha[[0, 0]] = lp[[0, 0]];
        alpha[[0, 1]] = lp[[0, self.classes[1]]];
        for t in 1..n {
            for s in 0..s_count {
                let prev = if Self::is_blank(s) {
                    let stay = alpha[[t - 1, s]];
                    if s >= 1 { lse2(stay, alpha[[t - 1, s - 1]]) } else { stay }
                } else {
                    let from_blank = alpha[[t - 1, s - 1]];
                    if s >= 3 { lse2(from_blank, alpha[[t - 1, s - 2]]) } else { from_blank }
                };
                if prev != NEG_INF {
                    alpha[[t, s]] = prev + lp[[t, self.classes[s]]];
                }
            }
        }
        alpha
    }

    fn beta(&self, lp: &Array2<f64>) -> Array2<f64> {
        let (n, _) = lp.dim();
        let s_count = self.states();
        let mut beta = Array2::from_elem((n, s_count), NEG_INF);
        beta[[n - 1, s_count - 1]] = 0.0;
        beta[[n - 1, s_count - 2]] = 0.0;
        for t in (0..n - 1).rev() {
            for s in 0..s_count {
                // successors: blank -> {self, next label}; label -> {next blank, next label}
                let succ: [Option<usize>; 2] = if Self::is_blank(s) {
                    [Some(s), (s + 1 < s_count).then_some(s + 1)]
                } else {
                    [Some(s + 1), (s + 2 < s_count).then_some(s + 2)]
                };
                let mut acc = NEG_INF;
                for s2 in succ.into_iter().flatten() {
                    let b = beta[[t + 1, s2]];
                    if b != NEG_INF {
                        acc = lse2(acc, b + lp[[t + 1, self.classes[s2]]]);
                    }
                }
                beta[[t, s]] = acc;
            }
        }
        beta
    }
}

/// `-log sum_paths prod_t p(path_t)` over all minimal-CTC paths.
pub fn minimal_ctc_loss(log_probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let topo = Topology::new(log_probs, labels)?;
    let alpha = topo.alpha(log_probs);
    let n = log_probs.nrows();
    let s = topo.states();
    Ok(-lse2(alpha[[n - 1, s - 1]], alpha[[n - 1, s - 2]]))
}

/// Loss and its gradient with respect to every entry of `log_probs`
/// (treated as free inputs): `-posterior occupancy` of each class per frame.
pub fn minimal_ctc_forward_backward(
    log_probs: &Array2<f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let topo = Topology::new(log_probs, labels)?;
    let alpha = topo.alpha(log_probs);
    let beta = topo.beta(log_probs);
    let (n, c) = log_probs.dim();
    let s_count = topo.states();
    let log_z = lse2(alpha[[n - 1, s_count - 1]], alpha[[n - 1, s_count - 2]]);
    if !log_z.is_finite() {
        return Err(Error::Numerical(format!("minimal CTC log-likelihood is {log_z}")));
    }
    let mut grad = Array2::zeros((n, c));
    for t in 0..n {
        for s in 0..s_count {
            let a = alpha[[t, s]];
            let b = beta[[t, s]];
            if a != NEG_INF && b != NEG_INF {
                grad[[t, topo.classes[s]]] -= (a + b - log_z).exp();
            }
        }
    }
    Ok((-log_z, grad))
}

/// Viterbi best path; spikes are the (1-based) frames where labels are
/// emitted. Ties prefer the path that emits labels earlier.
pub fn forced_align(log_probs: &Array2<f64>, labels: &[usize]) -> Result<Alignment> {
    let topo = Topology::new(log_probs, labels)?;
    let (n, _) = log_probs.dim();
    let s_count = topo.states();
    let mut delta = Array2::from_elem((n, s_count), NEG_INF);
    let mut back = Array2::<usize>::zeros((n, s_count));
    delta[[0, 0]] = log_probs[[0, 0]];
    delta[[0, 1]] = log_probs[[0, topo.classes[1]]];
    for t in 1..n {
        for s in 0..s_count {
            // First candidate wins ties: the blank / self-loop predecessor,
            // whose path emitted its last label earlier.
            let cands: [Option<usize>; 2] = if Topology::is_blank(s) {
                [Some(s), s.checked_sub(1)]
            } else {
                [Some(s - 1), s.checked_sub(2).filter(|_| s >= 3)]
            };
            let mut best = NEG_INF;
            let mut arg = usize::MAX;
            for p in cands.into_iter().flatten() {
                let v = delta[[t - 1, p]];
                if v > best {
                    best = v;
                    arg = p;
                }
            }
            if best != NEG_INF {
                delta[[t, s]] = best + log_probs[[t, topo.classes[s]]];
                back[[t, s]] = arg;
            }
        }
    }
    let (last_blank, last_label) = (delta[[n - 1, s_count - 1]], delta[[n - 1, s_count - 2]]);
    if last_blank == NEG_INF && last_label == NEG_INF {
        return Err(Error::Numerical("no path with finite score".into()));
    }
    let mut s = if last_label > last_blank { s_count - 2 } else { s_count - 1 };
    let mut spikes = Vec::with_capacity(labels.len());
    for t in (0..n).rev() {
        if !Topology::is_blank(s) {
            spikes.push(t + 1);
        }
        if t > 0 {
            s = back[[t, s]];
        }
    }
    spikes.reverse();
    Alignment::from_spikes(&spikes)
}
