//! Linear-beta noise schedule and the forward (noising) process.
//!
//! Timesteps are 0-based: `t` ranges over `0..num_steps`, and the cumulative
//! signal fraction `alpha_bar(t)` already includes step `t` itself. The
//! forward marginal is the usual
//! `z_t = sqrt(alpha_bar_t) * z_0 + sqrt(1 - alpha_bar_t) * eps`.

use crate::error::{invalid, Error, Result};
use crate::grid::LatentGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule with betas spaced linearly from `beta_start` to
    /// `beta_end` over `num_steps` steps.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(invalid("noise schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(invalid(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {} and {}",
                beta_start, beta_end
            )));
        }
        let betas: Vec<f64> = (0..num_steps)
            .map(|t| {
                if num_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Rebuilds a schedule from explicit betas (checkpoint restore path).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("noise schedule needs at least one step"));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(invalid("every beta must lie strictly inside (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for beta in &betas {
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        // Strict monotonicity can only fail if a beta rounds 1 - beta to 1.0;
        // such a schedule would silently freeze the process, so reject it.
        if alpha_bar.len() > 1 && alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Numeric(
                "alpha_bar is not strictly decreasing; betas are too small to resolve".into(),
            ));
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    /// Desk-scale default: 64 steps. The wider beta range drives
    /// `alpha_bar` at the last step to ~0.006 so that generation can start
    /// from (almost) pure noise despite the short chain.
    pub fn toy_default() -> Self {
        Self::linear(64, 1e-4, 0.15).expect("toy default schedule is valid")
    }

    /// Full-scale default: 1000 steps, betas linear in [1e-4, 0.02].
    pub fn full_scale_default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("full-scale default schedule is valid")
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// Cumulative product of `(1 - beta)` through step `t` inclusive.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(invalid(format!(
                "timestep {} out of range for a {}-step schedule",
                t,
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// Samples the forward marginal at step `t` with the given noise grid.
    pub fn forward_diffuse(&self, z0: &LatentGrid, t: usize, eps: &LatentGrid) -> Result<LatentGrid> {
        self.check_step(t)?;
        if !z0.same_shape(eps) {
            return Err(invalid(format!(
                "noise shape {}x{}x{} does not match signal shape {}x{}x{}",
                eps.channels(),
                eps.height(),
                eps.width(),
                z0.channels(),
                z0.height(),
                z0.width()
            )));
        }
        let ab = self.alpha_bar(t);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = z0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&s, &e)| sa * s + sn * e)
            .collect();
        LatentGrid::new(z0.channels(), z0.height(), z0.width(), data)
    }
}
