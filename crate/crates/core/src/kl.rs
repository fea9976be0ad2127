//! Adaptive KL coefficient.
//!
//! Proportional controller: the relative error of the observed KL against
//! the target is clipped to `±clip_band` and β is scaled by
//! `1 + gain * error`, never dropping below `beta_floor`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Monte-Carlo KL estimate of one sampled sequence: the sum over generated
/// tokens of `log π(token) − log π_ref(token)`. A single sample may be
/// negative.
pub fn sequence_kl(policy_logprobs: &[f64], reference_logprobs: &[f64]) -> Result<f64> {
    if policy_logprobs.len() != reference_logprobs.len() {
        return Err(Error::Input(format!(
            "logprob length mismatch: policy {} vs reference {}",
            policy_logprobs.len(),
            reference_logprobs.len()
        )));
    }
    if policy_logprobs.is_empty() {
        return Err(Error::Input("sequence_kl needs at least one token".into()));
    }
    Ok(policy_logprobs
        .iter()
        .zip(reference_logprobs)
        .map(|(p, r)| p - r)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KlConfig {
    pub initial_beta: f64,
    pub target_kl: f64,
    pub gain: f64,
    pub clip_band: f64,
    pub beta_floor: f64,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            initial_beta: 0.2,
            target_kl: 10.0,
            gain: 0.1,
            clip_band: 0.2,
            beta_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlRecord {
    pub step: u64,
    pub observed_kl: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlController {
    beta: f64,
    config: KlConfig,
    history: Vec<KlRecord>,
}

impl KlController {
    pub fn new(config: KlConfig) -> Result<Self> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("initial_beta", config.initial_beta)?;
        positive("target_kl", config.target_kl)?;
        positive("gain", config.gain)?;
        positive("clip_band", config.clip_band)?;
        positive("beta_floor", config.beta_floor)?;
        if config.gain * config.clip_band >= 1.0 {
            return Err(Error::Config("gain * clip_band must stay below 1".into()));
        }
        Ok(Self {
            beta: config.initial_beta.max(config.beta_floor),
            config,
            history: Vec::new(),
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn config(&self) -> &KlConfig {
        &self.config
    }

    pub fn history(&self) -> &[KlRecord] {
        &self.history
    }

    /// Folds one batch-mean KL observation into β. Non-finite observations
    /// leave the controller untouched.
    pub fn update(&mut self, observed_kl: f64) -> Result<f64> {
        if !observed_kl.is_finite() {
            return Err(Error::Controller(format!("observed KL {observed_kl} is not finite")));
        }
        let c = &self.config;
        let error = ((observed_kl - c.target_kl) / c.target_kl).clamp(-c.clip_band, c.clip_band);
        self.beta = (self.beta * (1.0 + c.gain * error)).max(c.beta_floor);
        self.history.push(KlRecord {
            step: self.history.len() as u64,
            observed_kl,
            beta: self.beta,
        });
        Ok(self.beta)
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "observed_kl", "beta"])?;
        for r in &self.history {
            w.write_record([r.step.to_string(), r.observed_kl.to_string(), r.beta.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn trace_csv_string(&self) -> String {
        let mut out = Vec::new();
        writeln!(out, "step,observed_kl,beta").expect("vec write");
        for r in &self.history {
            writeln!(out, "{},{},{}", r.step, r.observed_kl, r.beta).expect("vec write");
        }
        String::from_utf8(out).expect("ascii")
    }
}
