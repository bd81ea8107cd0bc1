//! The federated training protocol and baselines.
//!
//! One round of the robust two-stage strategy:
//!   stage 1 — every client trains a teacher aligner (plus a throwaway
//!   encoder copy) under the robust loss; the server averages aligners.
//!   stage 2 — every client trains the full model under guidance toward
//!   the frozen aggregate; the server averages encoders.
//! Afterwards the server evaluates each client's task loss under the new
//! global model and takes a mirror-ascent step on the client weights,
//! projected back onto the chi-square ball.
//!
//! Baselines: single-stage averaging (`FedAvg`), pooled-data training
//! (`Centralized`), and isolated per-client training (`Decentralized`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DroMode, ExperimentConfig, Strategy};
use crate::data::{
    batch_matrices, build_client_datasets, dirichlet_partition, heterogeneity, make_generator,
    ClientDataset, Sample,
};
use crate::dro::DroState;
use crate::evaluation::{pair_similarity, per_client_report};
use crate::losses;
use crate::nn::{
    self, flatten, load, ParamFilter, ParamVector, SegmentGroup, TowerOverrides, TwoTowerModel,
};
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Which parameter segments an aggregation step replaces; the rest stay at
/// the server's current values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegFilter {
    All,
    Aligners,
    Encoders,
}

impl SegFilter {
    fn selects(self, group: SegmentGroup) -> bool {
        match self {
            SegFilter::All => true,
            SegFilter::Aligners => group == SegmentGroup::Aligner,
            SegFilter::Encoders => group == SegmentGroup::Encoder,
        }
    }
}

/// Weighted average of client parameter vectors over the selected segments;
/// unselected segments are copied from `current`.
pub fn aggregate_weighted(
    params: &[ParamVector],
    weights: &[f64],
    current: &ParamVector,
    filter: SegFilter,
) -> Result<ParamVector> {
    if params.is_empty() {
        return Err(Error::invalid("aggregate: no client parameters"));
    }
    if params.len() != weights.len() {
        return Err(Error::invalid("aggregate: weights length mismatch"));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-6 || weights.iter().any(|&w| w < 0.0) {
        return Err(Error::invalid(format!(
            "aggregate: weights must be a probability vector (sum {wsum})"
        )));
    }
    for p in params {
        if !p.same_layout(current) {
            return Err(Error::LayoutMismatch(
                "aggregate: client vector layout differs from server".into(),
            ));
        }
    }
    let mut out = current.clone();
    for seg in &current.layout {
        if !filter.selects(seg.group) {
            continue;
        }
        let range = seg.offset..seg.offset + seg.len;
        for k in range {
            let mut acc = 0.0;
            for (p, &w) in params.iter().zip(weights.iter()) {
                acc += w * p.values[k];
            }
            out.values[k] = acc;
        }
    }
    Ok(out)
}

/// Unweighted mean over the selected segments.
pub fn aggregate_mean(
    params: &[ParamVector],
    current: &ParamVector,
    filter: SegFilter,
) -> Result<ParamVector> {
    let w = vec![1.0 / params.len().max(1) as f64; params.len()];
    aggregate_weighted(params, &w, current, filter)
}

fn sample_batch<'a>(
    train: &'a [Sample],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a Sample> {
    (0..batch_size)
        .map(|_| &train[rng.gen_range(0..train.len())])
        .collect()
}

/// Stage 1: train the client's teacher aligner together with an encoder
/// copy under the robust loss, anchored to the frozen server model.
/// Returns the aligner-trained parameters and the final batch loss.
pub fn local_train_stage1(
    global: &TwoTowerModel,
    dataset: &ClientDataset,
    cfg: &ExperimentConfig,
    round: usize,
    step_weight: f64,
) -> Result<(ParamVector, f64)> {
    let hyper = cfg.hyper();
    let anchor = global;
    let mut aligner_model = global.clone();
    let mut encoder_copy = global.clone();
    let mut rng = rng::stream_rng(cfg.seed, &[tag::BATCH, round as u64, 1]);
    let mut last = 0.0;
    for _ in 0..cfg.local_steps {
        let batch = sample_batch(&dataset.train, cfg.batch_size, &mut rng);
        let (x, y) = batch_matrices(&batch);
        // Three routings of the same batch:
        //   clean — frozen encoders through the teacher aligner,
        //   copy  — trainable encoder copy through the teacher aligner,
        //   local — trainable encoder copy through the frozen local aligner.
        let clean = nn::forward(
            anchor,
            &x,
            &y,
            Some(TowerOverrides {
                encoder_from: Some(anchor),
                aligner_from: Some(&aligner_model),
            }),
        )?;
        let copy = nn::forward(
            &encoder_copy,
            &x,
            &y,
            Some(TowerOverrides {
                encoder_from: Some(&encoder_copy),
                aligner_from: Some(&aligner_model),
            }),
        )?;
        let local = nn::forward(
            &encoder_copy,
            &x,
            &y,
            Some(TowerOverrides {
                encoder_from: Some(&encoder_copy),
                aligner_from: Some(anchor),
            }),
        )?;
        let out = losses::dro_loss(
            &clean.image.z,
            &clean.text.z,
            &copy.image.z,
            &copy.text.z,
            &local.image.z,
            &local.text.z,
            &hyper,
        )?;
        let g_clean = nn::backward_mixed(
            &clean,
            anchor,
            &aligner_model,
            &out.grad_clean_image,
            &out.grad_clean_text,
        )?;
        let g_copy = nn::backward_mixed(
            &copy,
            &encoder_copy,
            &aligner_model,
            &out.grad_copy_image,
            &out.grad_copy_text,
        )?;
        let g_local = nn::backward_mixed(
            &local,
            &encoder_copy,
            anchor,
            &out.grad_local_image,
            &out.grad_local_text,
        )?;
        let mut g_align = g_clean;
        g_align.add(&g_copy);
        let mut g_enc = g_copy;
        g_enc.add(&g_local);
        nn::apply_sgd(
            &mut aligner_model,
            &g_align,
            cfg.lr,
            step_weight,
            ParamFilter::AlignersOnly,
        );
        nn::apply_sgd(
            &mut encoder_copy,
            &g_enc,
            cfg.lr,
            step_weight,
            ParamFilter::EncodersOnly,
        );
        last = out.value;
    }
    Ok((flatten(&aligner_model), last))
}

/// Stage 2: train the full model on the task loss plus guidance toward the
/// frozen server model (which carries the freshly aggregated aligner).
pub fn local_train_stage2(
    global: &TwoTowerModel,
    dataset: &ClientDataset,
    cfg: &ExperimentConfig,
    round: usize,
    step_weight: f64,
) -> Result<(ParamVector, f64)> {
    let hyper = cfg.hyper();
    let anchor = global;
    let mut model = global.clone();
    let mut rng = rng::stream_rng(cfg.seed, &[tag::BATCH, round as u64, 2]);
    let mut last = 0.0;
    for _ in 0..cfg.local_steps {
        let batch = sample_batch(&dataset.train, cfg.batch_size, &mut rng);
        let (x, y) = batch_matrices(&batch);
        let cache_anchor = nn::forward(anchor, &x, &y, None)?;
        let cache_local = nn::forward(&model, &x, &y, None)?;
        let out = losses::local_loss(&cache_local, &cache_anchor, &hyper)?;
        let grads = nn::backward(&cache_local, &model, &out.grad_z_image, &out.grad_z_text)?;
        nn::apply_sgd(&mut model, &grads, cfg.lr, step_weight, ParamFilter::All);
        last = out.value;
    }
    Ok((flatten(&model), last))
}

/// Plain task-loss SGD used by the baselines. Mutates `model` in place and
/// returns the final batch loss.
fn task_train(
    model: &mut TwoTowerModel,
    train: &[Sample],
    cfg: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut last = 0.0;
    for _ in 0..cfg.local_steps {
        let batch = sample_batch(train, cfg.batch_size, rng);
        let (x, y) = batch_matrices(&batch);
        let cache = nn::forward(model, &x, &y, None)?;
        let out = losses::info_nce(&cache.image.z, &cache.text.z, cfg.tau)?;
        let grads = nn::backward(&cache, model, &out.grad_z_image, &out.grad_z_text)?;
        nn::apply_sgd(model, &grads, cfg.lr, 1.0, ParamFilter::All);
        last = out.value;
    }
    Ok(last)
}

/// Mean task loss of `model` on a client's training data over a few
/// deterministic batches — the signal driving the weight update.
pub fn client_loss(
    model: &TwoTowerModel,
    dataset: &ClientDataset,
    cfg: &ExperimentConfig,
    round: usize,
) -> Result<f64> {
    let mut rng = rng::stream_rng(cfg.seed, &[tag::CLIENT_LOSS, round as u64]);
    let mut sum = 0.0;
    for _ in 0..cfg.loss_eval_batches {
        let batch = sample_batch(&dataset.train, cfg.batch_size, &mut rng);
        let (x, y) = batch_matrices(&batch);
        let cache = nn::forward(model, &x, &y, None)?;
        sum += losses::info_nce(&cache.image.z, &cache.text.z, cfg.tau)?.value;
    }
    Ok(sum / cfg.loss_eval_batches as f64)
}

/// Per-round log record, one JSON line in the metrics file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    #[serde(rename = "v")]
    pub client_losses: Vec<f64>,
    #[serde(rename = "w")]
    pub weights: Vec<f64>,
    #[serde(rename = "loss_stage1")]
    pub stage1_loss_mean: f64,
    #[serde(rename = "loss_stage2")]
    pub stage2_loss_mean: f64,
    #[serde(rename = "recall1")]
    pub recall_at_1: Vec<f64>,
    #[serde(rename = "recall5")]
    pub recall_at_5: Vec<f64>,
    #[serde(rename = "mean1")]
    pub mean_recall_at_1: f64,
    #[serde(rename = "worst1")]
    pub worst_recall_at_1: f64,
    #[serde(rename = "mean5")]
    pub mean_recall_at_5: f64,
    #[serde(rename = "worst5")]
    pub worst_recall_at_5: f64,
    #[serde(rename = "pair_sim")]
    pub pair_similarity: Vec<f64>,
}

/// Mutable training state for one run: the server model, the robust
/// weights, and (for the isolated baseline) one persistent model per client.
pub struct Federation {
    pub cfg: ExperimentConfig,
    pub global: TwoTowerModel,
    pub dro: DroState,
    pub clients: Vec<ClientDataset>,
    pub local_models: Vec<TwoTowerModel>,
    pub round: usize,
}

impl Federation {
    /// Build from an already-partitioned dataset. `cfg.n_clients` must
    /// match `clients.len()` and every client needs training data.
    pub fn new(cfg: ExperimentConfig, clients: Vec<ClientDataset>) -> Result<Self> {
        cfg.validate()?;
        if clients.len() != cfg.n_clients {
            return Err(Error::config(
                "n_clients",
                format!("config says {}, got {} datasets", cfg.n_clients, clients.len()),
            ));
        }
        for c in &clients {
            if c.train.is_empty() {
                return Err(Error::DegeneratePartition(c.client_id));
            }
        }
        let global = nn::init_model(cfg.dims(), cfg.seed)?;
        let dro = DroState::uniform(clients.len(), cfg.rho, cfg.gamma)?;
        let local_models = if cfg.strategy == Strategy::Decentralized {
            vec![global.clone(); clients.len()]
        } else {
            Vec::new()
        };
        Ok(Federation {
            cfg,
            global,
            dro,
            clients,
            local_models,
            round: 0,
        })
    }

    fn map_clients<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, &ClientDataset) -> Result<T> + Sync,
    {
        if self.cfg.threads > 1 {
            self.clients
                .par_iter()
                .enumerate()
                .map(|(i, c)| f(i, c))
                .collect()
        } else {
            self.clients
                .iter()
                .enumerate()
                .map(|(i, c)| f(i, c))
                .collect()
        }
    }

    fn metrics_for(
        &self,
        model_per_client: Option<&[TwoTowerModel]>,
        client_losses: Vec<f64>,
        stage1_loss_mean: f64,
        stage2_loss_mean: f64,
    ) -> Result<RoundMetrics> {
        let eval_seed = rng::stream_key(self.cfg.seed, &[tag::EVAL, self.round as u64]);
        let (recall_at_1, recall_at_5, pair_sim) = match model_per_client {
            None => {
                let rep = per_client_report(
                    &self.global,
                    &self.clients,
                    self.cfg.eval_pool_size,
                    eval_seed,
                )?;
                let sims = self
                    .clients
                    .iter()
                    .map(|c| pair_similarity(&self.global, &c.test, 0))
                    .collect::<Result<Vec<_>>>()?;
                (
                    rep.per_client.iter().map(|p| p.0).collect::<Vec<_>>(),
                    rep.per_client.iter().map(|p| p.1).collect::<Vec<_>>(),
                    sims,
                )
            }
            Some(models) => {
                let mut r1 = Vec::new();
                let mut r5 = Vec::new();
                let mut sims = Vec::new();
                for (m, c) in models.iter().zip(self.clients.iter()) {
                    let pool = self.cfg.eval_pool_size;
                    let s = eval_seed ^ c.client_id as u64;
                    r1.push(crate::evaluation::recall_at_k(m, &c.test, 1, pool, s)?);
                    r5.push(crate::evaluation::recall_at_k(
                        m,
                        &c.test,
                        5.min(pool),
                        pool,
                        s,
                    )?);
                    sims.push(pair_similarity(m, &c.test, 0)?);
                }
                (r1, r5, sims)
            }
        };
        let n = recall_at_1.len() as f64;
        Ok(RoundMetrics {
            round: self.round,
            client_losses,
            weights: self.dro.w.clone(),
            stage1_loss_mean,
            stage2_loss_mean,
            recall_at_1: recall_at_1.clone(),
            recall_at_5: recall_at_5.clone(),
            mean_recall_at_1: recall_at_1.iter().sum::<f64>() / n,
            worst_recall_at_1: recall_at_1.iter().cloned().fold(f64::INFINITY, f64::min),
            mean_recall_at_5: recall_at_5.iter().sum::<f64>() / n,
            worst_recall_at_5: recall_at_5.iter().cloned().fold(f64::INFINITY, f64::min),
            pair_similarity: pair_sim,
        })
    }

    /// Execute one communication round under the configured strategy.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let metrics = match self.cfg.strategy {
            Strategy::FedAid => self.round_fedaid()?,
            Strategy::FedAvg => self.round_fedavg()?,
            Strategy::Centralized => self.round_centralized()?,
            Strategy::Decentralized => self.round_decentralized()?,
        };
        self.round += 1;
        Ok(metrics)
    }

    pub fn run(&mut self) -> Result<Vec<RoundMetrics>> {
        let mut out = Vec::with_capacity(self.cfg.rounds);
        for _ in 0..self.cfg.rounds {
            out.push(self.run_round()?);
        }
        Ok(out)
    }

    fn round_fedaid(&mut self) -> Result<RoundMetrics> {
        let n = self.clients.len();
        let w = self.dro.w.clone();
        // With uniform weights N·w_i = 1, so step scaling reduces exactly to
        // plain SGD; aggregation weights stay uniform in that mode.
        let (step_weights, agg_weights) = match self.cfg.dro_mode {
            DroMode::StepScale => (
                w.iter().map(|&wi| wi * n as f64).collect::<Vec<_>>(),
                vec![1.0 / n as f64; n],
            ),
            DroMode::LossWeight => (vec![1.0; n], w.clone()),
        };
        let round = self.round;
        let cfg = &self.cfg;
        let global = &self.global;

        let stage1: Vec<(ParamVector, f64)> = self.map_clients(|i, c| {
            local_train_stage1(global, c, cfg, round, step_weights[i])
        })?;
        let stage1_loss_mean =
            stage1.iter().map(|r| r.1).sum::<f64>() / n as f64;
        let params1: Vec<ParamVector> = stage1.into_iter().map(|r| r.0).collect();
        let current = flatten(&self.global);
        let new_aligners =
            aggregate_weighted(&params1, &agg_weights, &current, SegFilter::Aligners)?;
        load(&mut self.global, &new_aligners)?;

        let global = &self.global;
        let cfg = &self.cfg;
        let stage2: Vec<(ParamVector, f64)> = self.map_clients(|i, c| {
            local_train_stage2(global, c, cfg, round, step_weights[i])
        })?;
        let stage2_loss_mean =
            stage2.iter().map(|r| r.1).sum::<f64>() / n as f64;
        let params2: Vec<ParamVector> = stage2.into_iter().map(|r| r.0).collect();
        let current = flatten(&self.global);
        let new_encoders =
            aggregate_weighted(&params2, &agg_weights, &current, SegFilter::Encoders)?;
        load(&mut self.global, &new_encoders)?;

        let global = &self.global;
        let cfg = &self.cfg;
        let losses: Vec<f64> =
            self.map_clients(|_, c| client_loss(global, c, cfg, round))?;
        self.dro.update(&losses)?;
        self.metrics_for(None, losses, stage1_loss_mean, stage2_loss_mean)
    }

    fn round_fedavg(&mut self) -> Result<RoundMetrics> {
        let round = self.round;
        let cfg = &self.cfg;
        let global = &self.global;
        // The batch stream is shared across clients (they differ only by
        // their datasets), so N identical clients reproduce one client.
        let results: Vec<(ParamVector, f64)> = self.map_clients(|_, c| {
            let mut model = global.clone();
            let mut rng = rng::stream_rng(cfg.seed, &[tag::BATCH, round as u64, 0]);
            let loss = task_train(&mut model, &c.train, cfg, &mut rng)?;
            Ok((flatten(&model), loss))
        })?;
        let loss_mean = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
        let params: Vec<ParamVector> = results.into_iter().map(|r| r.0).collect();
        let current = flatten(&self.global);
        let new = aggregate_mean(&params, &current, SegFilter::All)?;
        load(&mut self.global, &new)?;
        let global = &self.global;
        let cfg = &self.cfg;
        let losses: Vec<f64> =
            self.map_clients(|_, c| client_loss(global, c, cfg, round))?;
        self.metrics_for(None, losses, 0.0, loss_mean)
    }

    fn round_centralized(&mut self) -> Result<RoundMetrics> {
        let pooled: Vec<Sample> = self
            .clients
            .iter()
            .flat_map(|c| c.train.iter().cloned())
            .collect();
        let mut rng = rng::stream_rng(
            self.cfg.seed,
            &[tag::BATCH, self.round as u64, 0, u64::MAX],
        );
        let loss = task_train(&mut self.global, &pooled, &self.cfg, &mut rng)?;
        let round = self.round;
        let global = &self.global;
        let cfg = &self.cfg;
        let losses: Vec<f64> =
            self.map_clients(|_, c| client_loss(global, c, cfg, round))?;
        self.metrics_for(None, losses, 0.0, loss)
    }

    fn round_decentralized(&mut self) -> Result<RoundMetrics> {
        let round = self.round;
        let cfg = self.cfg.clone();
        let clients = &self.clients;
        let run_one = |(i, model): (usize, &mut TwoTowerModel)| -> Result<f64> {
            let mut rng =
                rng::stream_rng(cfg.seed, &[tag::BATCH, round as u64, 0, i as u64]);
            task_train(model, &clients[i].train, &cfg, &mut rng)
        };
        let losses_train: Vec<f64> = if cfg.threads > 1 {
            self.local_models
                .par_iter_mut()
                .enumerate()
                .map(run_one)
                .collect::<Result<_>>()?
        } else {
            self.local_models
                .iter_mut()
                .enumerate()
                .map(run_one)
                .collect::<Result<_>>()?
        };
        let loss_mean = losses_train.iter().sum::<f64>() / losses_train.len() as f64;
        let models = &self.local_models;
        let cfg = &self.cfg;
        let losses: Vec<f64> =
            self.map_clients(|i, c| client_loss(&models[i], c, cfg, round))?;
        let models = self.local_models.clone();
        self.metrics_for(Some(&models), losses, 0.0, loss_mean)
    }
}

/// Everything a finished run produces.
pub struct ExperimentResult {
    pub metrics: Vec<RoundMetrics>,
    pub model: TwoTowerModel,
    pub local_models: Vec<TwoTowerModel>,
    pub clients: Vec<ClientDataset>,
    pub heterogeneity: f64,
}

/// Generate data per the config and return the partitioned clients.
pub fn build_clients(cfg: &ExperimentConfig) -> Result<Vec<ClientDataset>> {
    let gen = make_generator(cfg.seed, cfg.k_classes, cfg.x_dim, cfg.y_dim, cfg.sigma)?;
    let class_counts = vec![cfg.samples_per_class; cfg.k_classes];
    let plan = dirichlet_partition(
        &class_counts,
        cfg.n_clients,
        cfg.dirichlet_concentration,
        cfg.seed,
    )?;
    build_client_datasets(&gen, &plan, cfg.test_fraction, cfg.seed)
}

/// Full pipeline: generate data, train for `rounds`, return metrics and
/// final models. Deterministic in the config (including `threads`).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let clients = build_clients(cfg)?;
    let het = heterogeneity(&clients);
    let mut fed = Federation::new(cfg.clone(), clients)?;
    let run_all = |fed: &mut Federation| fed.run();
    let metrics = if cfg.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| run_all(&mut fed))?
    } else {
        run_all(&mut fed)?
    };
    Ok(ExperimentResult {
        metrics,
        model: fed.global,
        local_models: fed.local_models,
        clients: fed.clients,
        heterogeneity: het,
    })
}
