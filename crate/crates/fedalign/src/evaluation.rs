//! Retrieval evaluation (recall@k per client, mean, worst), pair-similarity
//! diagnostics, and the local-retraining distortion probe.

use serde::{Deserialize, Serialize};

use crate::data::{batch_matrices, ClientDataset, Sample};
use crate::losses;
use crate::matrix::Matrix;
use crate::nn::{self, TwoTowerModel};
use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// (recall@1, recall@5) per client, in client order.
    pub per_client: Vec<(f64, f64)>,
    pub mean_at_1: f64,
    pub mean_at_5: f64,
    pub worst_at_1: f64,
    pub worst_at_5: f64,
    pub pool_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrievalDirection {
    TextToImage,
    ImageToText,
}

fn embed_samples(model: &TwoTowerModel, samples: &[&Sample]) -> Result<(Matrix, Matrix)> {
    let (x, y) = batch_matrices(samples);
    model.embed(&x, &y)
}

/// Fraction of queries whose paired candidate ranks in the top k by cosine
/// similarity within shuffled pools of `pool_size`. Ties break toward the
/// lower candidate index. Text→image by default.
pub fn recall_at_k(
    model: &TwoTowerModel,
    test_samples: &[Sample],
    k: usize,
    pool_size: usize,
    seed: u64,
) -> Result<f64> {
    recall_at_k_directed(
        model,
        test_samples,
        k,
        pool_size,
        seed,
        RetrievalDirection::TextToImage,
    )
}

pub fn recall_at_k_directed(
    model: &TwoTowerModel,
    test_samples: &[Sample],
    k: usize,
    pool_size: usize,
    seed: u64,
    direction: RetrievalDirection,
) -> Result<f64> {
    if k == 0 || pool_size < k {
        return Err(Error::invalid("need pool_size >= k >= 1"));
    }
    if test_samples.len() < pool_size {
        return Err(Error::EmptyDataset(format!(
            "test set ({}) smaller than pool_size ({pool_size})",
            test_samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..test_samples.len()).collect();
    let mut rng = rng::stream_rng(seed, &[tag::EVAL]);
    for i in (1..order.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let n_pools = order.len() / pool_size;
    let mut hits = 0usize;
    let mut total = 0usize;
    for pool_idx in 0..n_pools {
        let pool: Vec<&Sample> = order[pool_idx * pool_size..(pool_idx + 1) * pool_size]
            .iter()
            .map(|&i| &test_samples[i])
            .collect();
        let (z_img, z_txt) = embed_samples(model, &pool)?;
        let (queries, candidates) = match direction {
            RetrievalDirection::TextToImage => (&z_txt, &z_img),
            RetrievalDirection::ImageToText => (&z_img, &z_txt),
        };
        for q in 0..pool_size {
            let qrow = queries.row(q);
            let mut sims: Vec<(f64, usize)> = (0..pool_size)
                .map(|c| {
                    let s: f64 = qrow
                        .iter()
                        .zip(candidates.row(c).iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    (s, c)
                })
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            if sims.iter().take(k).any(|&(_, c)| c == q) {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// recall@1/@5 per client; mean is the unweighted average, worst the min.
pub fn per_client_report(
    model: &TwoTowerModel,
    clients: &[ClientDataset],
    pool_size: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let mut per_client = Vec::with_capacity(clients.len());
    for c in clients {
        let r1 = recall_at_k(model, &c.test, 1, pool_size, seed ^ c.client_id as u64)?;
        let r5 = recall_at_k(
            model,
            &c.test,
            5.min(pool_size),
            pool_size,
            seed ^ c.client_id as u64,
        )?;
        per_client.push((r1, r5));
    }
    let n = per_client.len() as f64;
    let mean_at_1 = per_client.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_at_5 = per_client.iter().map(|p| p.1).sum::<f64>() / n;
    let worst_at_1 = per_client.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let worst_at_5 = per_client.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    Ok(RetrievalReport {
        per_client,
        mean_at_1,
        mean_at_5,
        worst_at_1,
        worst_at_5,
        pool_size,
    })
}

/// Mean z_I·z_T over the given pairs (all of them when `max_pairs` is 0).
pub fn pair_similarity(
    model: &TwoTowerModel,
    samples: &[Sample],
    max_pairs: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("pair_similarity".into()));
    }
    let take = if max_pairs == 0 {
        samples.len()
    } else {
        max_pairs.min(samples.len())
    };
    let refs: Vec<&Sample> = samples.iter().take(take).collect();
    let (z_img, z_txt) = embed_samples(model, &refs)?;
    let mut sum = 0.0;
    for i in 0..z_img.rows() {
        sum += z_img
            .row(i)
            .iter()
            .zip(z_txt.row(i).iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
    Ok(sum / z_img.rows() as f64)
}

/// Similarity drops after retraining the aggregated model on each client
/// with the plain task loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistortionTable {
    /// drops[retrain_client][eval_client] = sim_before − sim_after.
    pub drops: Vec<Vec<f64>>,
    /// Per-eval-client average over retrain clients.
    pub avg_per_eval_client: Vec<f64>,
    /// Grand mean of all drops.
    pub mean_drop: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn distortion_probe(
    global_model: &TwoTowerModel,
    clients: &[ClientDataset],
    retrain_steps: usize,
    lr: f64,
    tau: f64,
    batch_size: usize,
    seed: u64,
) -> Result<DistortionTable> {
    let before: Vec<f64> = clients
        .iter()
        .map(|c| pair_similarity(global_model, &c.test, 0))
        .collect::<Result<_>>()?;
    let mut drops = Vec::with_capacity(clients.len());
    for c in clients {
        if c.train.is_empty() {
            return Err(Error::EmptyDataset(format!("client {}", c.client_id)));
        }
        let mut model = global_model.clone();
        let mut rng = rng::stream_rng(seed, &[tag::PROBE, c.client_id as u64]);
        for _ in 0..retrain_steps {
            let batch: Vec<&Sample> = (0..batch_size.min(c.train.len()))
                .map(|_| &c.train[rand::Rng::gen_range(&mut rng, 0..c.train.len())])
                .collect();
            let (x, y) = batch_matrices(&batch);
            let cache = nn::forward(&model, &x, &y, None)?;
            let loss = losses::info_nce(&cache.image.z, &cache.text.z, tau)?;
            let grads = nn::backward(&cache, &model, &loss.grad_z_image, &loss.grad_z_text)?;
            nn::apply_sgd(&mut model, &grads, lr, 1.0, nn::ParamFilter::All);
        }
        let row: Vec<f64> = clients
            .iter()
            .zip(before.iter())
            .map(|(eval, &b)| Ok(b - pair_similarity(&model, &eval.test, 0)?))
            .collect::<Result<_>>()?;
        drops.push(row);
    }
    let n = clients.len() as f64;
    let avg_per_eval_client: Vec<f64> = (0..clients.len())
        .map(|e| drops.iter().map(|row| row[e]).sum::<f64>() / n)
        .collect();
    let mean_drop = avg_per_eval_client.iter().sum::<f64>() / n;
    Ok(DistortionTable {
        drops,
        avg_per_eval_client,
        mean_drop,
    })
}
