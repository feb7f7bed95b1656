//! Loss-weighting strategies for the multi-term objective.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::aux_ensemble::{LossWeights, Term};
use crate::error::{Error, Result};

/// Floor used wherever a mean or prior loss divides.
pub const EPS: f64 = 1e-12;
pub const DWA_TEMPERATURE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Constant weights.
    Fixed { weights: LossWeights },
    /// Every term `1/7`.
    Equal,
    /// Learned log-variances: `sum exp(-s_i) L_i + s_i`.
    Uncertainty,
    /// Coefficient-of-variation weights summing to one.
    Cov,
    /// Per-epoch softmax over loss descent ratios, scaled to sum to the term count.
    Dwa { temperature: f64 },
    /// Base weights, with auxiliary gradients kept only when aligned with the main one.
    GradCosine { weights: LossWeights, main: Term },
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::Fixed {
            weights: LossWeights::hand_tuned(),
        }
    }
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Fixed { .. } => "fixed",
            Strategy::Equal => "equal",
            Strategy::Uncertainty => "uncertainty",
            Strategy::Cov => "cov",
            Strategy::Dwa { .. } => "dwa",
            Strategy::GradCosine { .. } => "gradcosine",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Strategy::Fixed { weights } | Strategy::GradCosine { weights, .. } => {
                weights.validate()
            }
            Strategy::Dwa { temperature } if !(*temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::Config(format!(
                    "DWA temperature must be positive, got {temperature}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Returns `w` unchanged; exists so every strategy has a weighting function.
pub fn fixed_weights(w: &LossWeights) -> LossWeights {
    *w
}

pub fn equal_weights() -> LossWeights {
    LossWeights::equal()
}

/// `sum_i exp(-s_i) L_i + s_i` on the tape.
pub fn uncertainty_total(tape: &mut Tape, losses: &[Var], log_vars: &[Var]) -> Result<Var> {
    if losses.len() != log_vars.len() || losses.is_empty() {
        return Err(Error::Contract(format!(
            "{} losses but {} log-variance parameters",
            losses.len(),
            log_vars.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&l, &s) in losses.iter().zip(log_vars) {
        let neg = tape.scale(s, -1.0);
        let w = tape.exp(neg);
        let wl = tape.mul(w, l)?;
        let term = tape.add(wl, s)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }
}

/// Streaming state of coefficient-of-variation weighting.
///
/// Each step the loss ratio `l_i = L_i / mean(L_i over previous steps)` (1 on
/// the first step) is tracked; weights are `c_i = std(l_i) / mean(l_i)`
/// normalized to sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovState {
    pub loss: Vec<Welford>,
    pub ratio: Vec<Welford>,
}

impl CovState {
    pub fn new(terms: usize) -> Self {
        Self {
            loss: vec![Welford::default(); terms],
            ratio: vec![Welford::default(); terms],
        }
    }

    pub fn steps(&self) -> u64 {
        self.loss.first().map_or(0, |w| w.count)
    }

    /// Folds in one step's losses and returns weights for that step.
    pub fn update(&mut self, losses: &[f64]) -> Result<Vec<f64>> {
        let k = self.loss.len();
        if losses.len() != k {
            return Err(Error::Contract(format!(
                "{} losses for {k} tracked terms",
                losses.len()
            )));
        }
        for (i, &l) in losses.iter().enumerate() {
            let r = if self.loss[i].count == 0 {
                1.0
            } else {
                l / self.loss[i].mean.max(EPS)
            };
            self.ratio[i].push(r);
            self.loss[i].push(l);
        }
        Ok(self.weights())
    }

    pub fn weights(&self) -> Vec<f64> {
        let k = self.loss.len();
        if self.steps() < 2 {
            return vec![1.0 / k as f64; k];
        }
        let c: Vec<f64> = self
            .ratio
            .iter()
            .map(|w| w.std() / w.mean.max(EPS))
            .collect();
        let sum: f64 = c.iter().sum();
        if sum <= EPS {
            return vec![1.0 / k as f64; k];
        }
        c.iter().map(|v| v / sum).collect()
    }
}

/// `K * softmax(r / T)` for descent ratios `r_i = prev_i / prev2_i`.
pub fn dwa_from_history(prev: &[f64], prev2: &[f64], temperature: f64) -> Vec<f64> {
    let k = prev.len();
    let r: Vec<f64> = prev
        .iter()
        .zip(prev2)
        .map(|(a, b)| a / b.max(EPS))
        .collect();
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| k as f64 * v / s).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DwaState {
    pub temperature: f64,
    /// Most recent epoch means last; at most two entries.
    pub history: VecDeque<Vec<f64>>,
}

impl DwaState {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "DWA temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            temperature,
            history: VecDeque::with_capacity(2),
        })
    }

    pub fn observe_epoch(&mut self, epoch_means: &[f64]) {
        if self.history.len() == 2 {
            self.history.pop_front();
        }
        self.history.push_back(epoch_means.to_vec());
    }

    /// Weights for the next epoch given `k` terms; all ones until two epochs are seen.
    pub fn weights(&self, k: usize) -> Vec<f64> {
        if self.history.len() < 2 {
            return vec![1.0; k];
        }
        dwa_from_history(&self.history[1], &self.history[0], self.temperature)
    }
}

/// Observes one epoch's means and returns the next epoch's weights.
pub fn dwa_weights(state: &mut DwaState, epoch_mean_losses: &[f64]) -> Vec<f64> {
    state.observe_epoch(epoch_mean_losses);
    state.weights(epoch_mean_losses.len())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Filtered {
    pub combined: Vec<f64>,
    pub accepted: Vec<bool>,
}

/// `main + sum of aux gradients whose cosine with main is positive`.
pub fn gradcosine_filter(main: &[f64], aux: &[Vec<f64>]) -> Result<Filtered> {
    if let Some(a) = aux.iter().find(|a| a.len() != main.len()) {
        return Err(Error::dim("gradcosine_filter", &[main.len()], &[a.len()]));
    }
    let mut combined = main.to_vec();
    let main_norm = dot(main, main).sqrt();
    if main_norm == 0.0 {
        log::warn!("main-loss gradient has zero norm; applying it alone");
        return Ok(Filtered {
            combined,
            accepted: vec![false; aux.len()],
        });
    }
    let mut accepted = Vec::with_capacity(aux.len());
    for a in aux {
        let n = dot(a, a).sqrt();
        let cos = if n == 0.0 {
            0.0
        } else {
            dot(a, main) / (n * main_norm)
        };
        let ok = cos > 0.0;
        if ok {
            combined.iter_mut().zip(a).for_each(|(c, v)| *c += v);
        }
        accepted.push(ok);
    }
    Ok(Filtered { combined, accepted })
}
