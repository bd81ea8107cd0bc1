//! Experiment configuration: a single flat JSON document with documented
//! defaults, strict unknown-key rejection, and invariant validation.

use serde::{Deserialize, Serialize};

use crate::losses::Hyper;
use crate::nn::ModelDims;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    FedAid,
    FedAvg,
    Centralized,
    Decentralized,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fedaid" => Ok(Strategy::FedAid),
            "fedavg" => Ok(Strategy::FedAvg),
            "centralized" => Ok(Strategy::Centralized),
            "decentralized" => Ok(Strategy::Decentralized),
            other => Err(Error::config(
                "strategy",
                format!("unknown strategy `{other}` (fedaid|fedavg|centralized|decentralized)"),
            )),
        }
    }
}

/// How the robust weights act on training: scaling each client's local
/// update step, or weighting the server-side aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DroMode {
    StepScale,
    LossWeight,
}

impl std::str::FromStr for DroMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "step_scale" => Ok(DroMode::StepScale),
            "loss_weight" => Ok(DroMode::LossWeight),
            other => Err(Error::config(
                "dro_mode",
                format!("unknown mode `{other}` (step_scale|loss_weight)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub n_clients: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
    pub dro_mode: DroMode,
    pub dirichlet_concentration: f64,
    pub k_classes: usize,
    pub x_dim: usize,
    pub y_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub aligner_layers: usize,
    pub samples_per_class: usize,
    pub test_fraction: f64,
    pub sigma: f64,
    pub eval_pool_size: usize,
    pub eval_k_list: Vec<usize>,
    pub loss_eval_batches: usize,
    pub seed: u64,
    pub threads: usize,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: Strategy::FedAid,
            n_clients: 5,
            rounds: 25,
            local_steps: 50,
            batch_size: 32,
            lr: 0.05,
            tau: 0.1,
            alpha: 1.0,
            beta: 2.0,
            gamma: 0.5,
            rho: 1.0,
            dro_mode: DroMode::StepScale,
            dirichlet_concentration: 1.0,
            k_classes: 16,
            x_dim: 32,
            y_dim: 32,
            hidden_dim: 64,
            embed_dim: 32,
            encoder_layers: 2,
            aligner_layers: 2,
            samples_per_class: 125,
            test_fraction: 0.25,
            sigma: 0.5,
            eval_pool_size: 25,
            eval_k_list: vec![1, 5],
            loss_eval_batches: 4,
            seed: 0,
            threads: 1,
            out_dir: "runs/default".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(s)
            .map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config("tau", format!("must be > 0, got {}", self.tau)));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("rho", self.rho),
            ("sigma", self.sigma),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(name, format!("must be >= 0, got {v}")));
            }
        }
        if !(self.dirichlet_concentration > 0.0) {
            return Err(Error::config(
                "dirichlet_concentration",
                format!("must be > 0, got {}", self.dirichlet_concentration),
            ));
        }
        if self.n_clients == 0 {
            return Err(Error::config("n_clients", "must be >= 1"));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("k_classes", self.k_classes),
            ("x_dim", self.x_dim),
            ("y_dim", self.y_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("encoder_layers", self.encoder_layers),
            ("aligner_layers", self.aligner_layers),
            ("samples_per_class", self.samples_per_class),
            ("eval_pool_size", self.eval_pool_size),
            ("loss_eval_batches", self.loss_eval_batches),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config(
                "test_fraction",
                format!("must be in [0, 1), got {}", self.test_fraction),
            ));
        }
        if self.eval_k_list.is_empty() || self.eval_k_list.iter().any(|&k| k == 0) {
            return Err(Error::config("eval_k_list", "must be nonempty, all k >= 1"));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            x_dim: self.x_dim,
            y_dim: self.y_dim,
            hidden_dim: self.hidden_dim,
            embed_dim: self.embed_dim,
            encoder_layers: self.encoder_layers,
            aligner_layers: self.aligner_layers,
        }
    }

    pub fn hyper(&self) -> Hyper {
        Hyper {
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}
