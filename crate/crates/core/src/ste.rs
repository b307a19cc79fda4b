//! Straight-through-estimator refinement of one rank-1 component at a time.
//!
//! For a component `b·aᵀ` the optimizer searches `(b*, a*)` minimizing
//! `‖b·aᵀ − D(Q(b*))·D(Q(a*))ᵀ‖_F`. Gradients treat `D∘Q` as the identity
//! and group parameters as constants within a step; the squared norm is
//! descended and the unsquared norm is reported.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot_f64, Matrix};
use crate::quantizers::Quantizer;
use crate::svd_split::SubLoraSplit;

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub quantizer: Quantizer,
    pub group_size: usize,
}

impl OptConfig {
    pub fn new(steps: usize, learning_rate: f64, quantizer: Quantizer, group_size: usize) -> Result<Self> {
        let cfg = Self {
            steps,
            learning_rate,
            quantizer,
            group_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.group_size == 0 {
            return Err(Error::InvalidConfig("group size must be at least 1".into()));
        }
        Ok(())
    }
}

fn norm2(x: &[f32]) -> f64 {
    dot_f64(x, x)
}

/// Squared loss from the factored identity
/// `‖baᵀ − b̂âᵀ‖² = ‖b‖²‖a‖² − 2(bᵀb̂)(aᵀâ) + ‖b̂‖²‖â‖²`.
fn squared_loss(b: &[f32], a: &[f32], b_hat: &[f32], a_hat: &[f32]) -> f64 {
    let v = norm2(b) * norm2(a) - 2.0 * dot_f64(b, b_hat) * dot_f64(a, a_hat) + norm2(b_hat) * norm2(a_hat);
    v.max(0.0)
}

/// `‖b·aᵀ − D(Q(b*))·D(Q(a*))ᵀ‖_F` under the configured quantizer.
pub fn reconstruction_loss(b: &[f32], a: &[f32], b_star: &[f32], a_star: &[f32], cfg: &OptConfig) -> Result<f64> {
    if b.len() != b_star.len() || a.len() != a_star.len() {
        return Err(Error::ShapeMismatch(format!(
            "target ({}, {}) vs iterate ({}, {})",
            b.len(),
            a.len(),
            b_star.len(),
            a_star.len()
        )));
    }
    let b_hat = cfg.quantizer.fake_quantize(b_star, cfg.group_size)?;
    let a_hat = cfg.quantizer.fake_quantize(a_star, cfg.group_size)?;
    Ok(squared_loss(b, a, &b_hat, &a_hat).sqrt())
}

/// Straight-through gradients of the squared loss at fixed reconstructions:
/// `∇_b = 2(b̂‖â‖² − b(aᵀâ))`, `∇_a = 2(â‖b̂‖² − a(bᵀb̂))`.
pub fn ste_gradient(b: &[f32], a: &[f32], b_hat: &[f32], a_hat: &[f32]) -> (Vec<f64>, Vec<f64>) {
    let a_hat2 = norm2(a_hat);
    let b_hat2 = norm2(b_hat);
    let a_dot = dot_f64(a, a_hat);
    let b_dot = dot_f64(b, b_hat);
    let gb = b
        .iter()
        .zip(b_hat)
        .map(|(&t, &h)| 2.0 * (h as f64 * a_hat2 - t as f64 * a_dot))
        .collect();
    let ga = a
        .iter()
        .zip(a_hat)
        .map(|(&t, &h)| 2.0 * (h as f64 * b_hat2 - t as f64 * b_dot))
        .collect();
    (gb, ga)
}

/// Result of refining one component.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub b: Vec<f32>,
    pub a: Vec<f32>,
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Step index (0 = initialization) of the returned iterate.
    pub best_step: usize,
}

/// Plain gradient descent for `cfg.steps` steps from `(b, a)`, returning the
/// lowest-loss iterate seen (step 0 included).
pub fn optimize_rank_one_pair_detailed(b: &[f32], a: &[f32], cfg: &OptConfig) -> Result<PairOutcome> {
    cfg.validate()?;
    let mut b_cur = b.to_vec();
    let mut a_cur = a.to_vec();
    let mut best = (b_cur.clone(), a_cur.clone());
    let mut best_loss = f64::INFINITY;
    let mut best_step = 0;
    let mut initial_loss = f64::NAN;

    for step in 0..=cfg.steps {
        let b_hat = cfg.quantizer.fake_quantize(&b_cur, cfg.group_size);
        let a_hat = cfg.quantizer.fake_quantize(&a_cur, cfg.group_size);
        let (b_hat, a_hat) = match (b_hat, a_hat) {
            (Ok(x), Ok(y)) => (x, y),
            // Scales leaving the binary16 range end the search.
            _ if step > 0 => break,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let loss2 = squared_loss(b, a, &b_hat, &a_hat);
        if !loss2.is_finite() {
            break;
        }
        let loss = loss2.sqrt();
        if step == 0 {
            initial_loss = loss;
        }
        if loss < best_loss {
            best_loss = loss;
            best_step = step;
            best = (b_cur.clone(), a_cur.clone());
        }
        if step == cfg.steps || loss2 == 0.0 {
            break;
        }
        let (gb, ga) = ste_gradient(b, a, &b_hat, &a_hat);
        let next_b: Vec<f32> = b_cur
            .iter()
            .zip(&gb)
            .map(|(&x, g)| (x as f64 - cfg.learning_rate * g) as f32)
            .collect();
        let next_a: Vec<f32> = a_cur
            .iter()
            .zip(&ga)
            .map(|(&x, g)| (x as f64 - cfg.learning_rate * g) as f32)
            .collect();
        if next_b.iter().chain(&next_a).any(|v| !v.is_finite()) {
            break;
        }
        b_cur = next_b;
        a_cur = next_a;
    }
    Ok(PairOutcome {
        b: best.0,
        a: best.1,
        initial_loss,
        best_loss,
        best_step,
    })
}

pub fn optimize_rank_one_pair(b: &[f32], a: &[f32], cfg: &OptConfig) -> Result<(Vec<f32>, Vec<f32>)> {
    let out = optimize_rank_one_pair_detailed(b, a, cfg)?;
    Ok((out.b, out.a))
}

/// Refines every column of `b` with the matching row of `a`, independently.
pub fn optimize_factors(b: &Matrix, a: &Matrix, cfg: &OptConfig) -> Result<(Matrix, Matrix)> {
    let mut b_out = b.clone();
    let mut a_out = a.clone();
    if cfg.steps == 0 {
        return Ok((b_out, a_out));
    }
    for i in 0..b.cols() {
        let (bi, ai) = optimize_rank_one_pair(&b.column(i), a.row(i), cfg)?;
        b_out.set_column(i, &bi);
        a_out.set_row(i, &ai);
    }
    Ok((b_out, a_out))
}

/// High pairs under `cfg_high`, low pairs under `cfg_low`.
pub fn optimize_split(split: &SubLoraSplit, cfg_high: &OptConfig, cfg_low: &OptConfig) -> Result<SubLoraSplit> {
    let (b_high, a_high) = optimize_factors(&split.b_high, &split.a_high, cfg_high)?;
    let (b_low, a_low) = optimize_factors(&split.b_low, &split.a_low, cfg_low)?;
    Ok(SubLoraSplit {
        b_high,
        a_high,
        b_low,
        a_low,
        h: split.h,
        singular_values: split.singular_values.clone(),
    })
}
