//! Reference implementations used as oracles by the integration tests.
//! They follow the textbook formulas literally: explicit exponentials,
//! explicit sums and a plain log of the final ratio.

#![allow(dead_code)]

use std::f64::consts::{LN_2, LOG2_E};

/// Positive real `m * 2^e` with `m` in `[1, 2)`; wide enough that `exp(x)`
/// never overflows for the logits used in tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ext {
    m: f64,
    e: i64,
}

impl Ext {
    pub fn exp(x: f64) -> Self {
        let y = x * LOG2_E;
        let k = y.floor();
        Ext {
            m: (y - k).exp2(),
            e: k as i64,
        }
        .normalized()
    }

    fn normalized(mut self) -> Self {
        while self.m >= 2.0 {
            self.m /= 2.0;
            self.e += 1;
        }
        while self.m < 1.0 && self.m > 0.0 {
            self.m *= 2.0;
            self.e -= 1;
        }
        self
    }

    pub fn add(self, other: Self) -> Self {
        let (big, small) = if self.e >= other.e {
            (self, other)
        } else {
            (other, self)
        };
        let shift = (big.e - small.e).min(2000) as i32;
        Ext {
            m: big.m + small.m * 2f64.powi(-shift),
            e: big.e,
        }
        .normalized()
    }

    pub fn div(self, other: Self) -> Self {
        Ext {
            m: self.m / other.m,
            e: self.e - other.e,
        }
        .normalized()
    }

    pub fn ln(self) -> f64 {
        self.m.ln() + self.e as f64 * LN_2
    }

    pub fn to_f64(self) -> f64 {
        self.m * 2f64.powi(self.e.clamp(-1074, 1023) as i32)
    }
}

pub fn sum_exp<I: IntoIterator<Item = f64>>(xs: I) -> Ext {
    xs.into_iter()
        .map(Ext::exp)
        .reduce(Ext::add)
        .expect("nonempty sum")
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn first_max(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |b, i| if xs[i] > xs[b] { i } else { b })
}

fn first_min(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |b, i| if xs[i] < xs[b] { i } else { b })
}

/// Softmax probabilities over `sims / tau`.
pub fn zero_shot_probs(sims: &[f64], tau: f64) -> Vec<f64> {
    let denom = sum_exp(sims.iter().map(|s| s / tau));
    sims.iter()
        .map(|s| Ext::exp(s / tau).div(denom).to_f64())
        .collect()
}

/// `-log p(t)` with one similarity per class.
pub fn clip_ce(sims: &[f64], t: usize, tau: f64) -> f64 {
    let denom = sum_exp(sims.iter().map(|s| s / tau));
    -Ext::exp(sims[t] / tau).div(denom).ln()
}

/// Modulating factor from already-updated counts.
pub fn alpha(counts: &[u64], closest: usize) -> f64 {
    let n_plus = counts[closest] as f64;
    let norm: f64 = counts
        .iter()
        .filter(|&&n| n != 0)
        .map(|&n| (1.0 / n as f64).exp())
        .sum();
    let total: f64 = counts.iter().map(|&n| n as f64).sum();
    (1.0 / n_plus).exp() / norm * total / n_plus
}

#[derive(Debug, Clone, Copy)]
pub struct RefLosses {
    pub fg: f64,
    pub margin: f64,
    pub total: f64,
    pub alpha: f64,
}

/// All losses of one sample; `grid[i][k]` is the similarity to class `i`,
/// subclass `k`; `prior` is the target row before counting this sample.
pub fn losses(grid: &[Vec<f64>], t: usize, prior: &[u64], tau: f64) -> RefLosses {
    let closest = first_max(&grid[t]);
    let farthest = first_min(&grid[t]);
    let mut counts = prior.to_vec();
    counts[closest] += 1;
    let a = alpha(&counts, closest);

    let s_plus = grid[t][closest] / tau;
    let others: Vec<f64> = (0..grid.len())
        .filter(|&i| i != t)
        .flat_map(|i| grid[i].iter().map(move |s| s / tau))
        .collect();
    let fg_num = Ext::exp(s_plus);
    let fg_den = fg_num.add(sum_exp(others));
    let fg = -a * fg_num.div(fg_den).ln();

    let s_minus = grid[t][farthest] / tau;
    let rivals: Vec<f64> = (0..grid.len())
        .filter(|&i| i != t)
        .map(|i| grid[i][first_max(&grid[i])] / tau)
        .collect();
    let m_num = Ext::exp(s_minus);
    let m_den = m_num.add(sum_exp(rivals));
    let margin = -m_num.div(m_den).ln();
    RefLosses {
        fg,
        margin,
        total: fg + margin,
        alpha: a,
    }
}

/// Unweighted and weighted recall from label lists.
pub fn war_uar(n: usize, truth: &[usize], pred: &[usize]) -> (f64, f64) {
    let correct = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    let mut recalls = Vec::new();
    for c in 0..n {
        let members: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
        if !members.is_empty() {
            let hit = members.iter().filter(|&&i| pred[i] == c).count();
            recalls.push(hit as f64 / members.len() as f64);
        }
    }
    (
        correct as f64 / truth.len() as f64,
        recalls.iter().sum::<f64>() / recalls.len() as f64,
    )
}

pub fn manifest_path(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}
