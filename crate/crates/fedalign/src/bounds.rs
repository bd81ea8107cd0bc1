//! Numerical verifiers for the inequalities underpinning the training
//! objective.
//!
//! Three families of checks, each with a single-instance form and a random
//! sweep:
//!  * contrastive-loss ceiling — InfoNCE over unit embeddings is at most
//!    log(bz) plus the mean squared pair distance over 2τ (asserted), with
//!    a looser client-constant form reported alongside;
//!  * five-term decomposition — the squared cross-modal gap of the
//!    aggregated model decomposes along a chain of intermediate models,
//!    with (Σa)² ≤ 5·Σa² checked per sample;
//!  * guidance surrogate — the task loss at the anchor embeddings is at
//!    most the local task loss plus a certified Lipschitz constant times
//!    the embedding drift, which justifies the L2 guidance term.

use rand::Rng;
use serde::Serialize;

use crate::losses::info_nce;
use crate::matrix::Matrix;
use crate::nn::{init_model, ModelDims, TwoTowerModel};
use crate::rng::stream_rng;
use crate::{Error, Result};

const TOL: f64 = 1e-9;

fn require_unit_rows(z: &Matrix, context: &'static str) -> Result<()> {
    for i in 0..z.rows() {
        let n: f64 = z.row(i).iter().map(|v| v * v).sum();
        if (n - 1.0).abs() > 1e-8 {
            return Err(Error::invalid(format!(
                "{context}: row {i} has squared norm {n}, need unit rows"
            )));
        }
    }
    Ok(())
}

fn row_distance(a: &Matrix, b: &Matrix, i: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(i).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn frobenius_distance(a: &Matrix, b: &Matrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Contrastive-loss ceiling for one batch of paired unit embeddings.
#[derive(Debug, Clone, Serialize)]
pub struct ContrastiveCeilingReport {
    pub batch_size: usize,
    pub loss: f64,
    /// log(bz) + mean(dᵢ²)/(2τ) — provable, asserted.
    pub bound: f64,
    pub slack: f64,
    /// log(bz) + α·D̄² with α = L²(1−l²)/(2τ), L = D_max/D̄,
    /// l² = min dᵢ²/D_max² — client-constant form, reported only.
    pub constant_form_bound: f64,
    pub constant_form_holds: bool,
    pub d_mean_sq: f64,
    pub d_max: f64,
}

/// Verify `info_nce(z_a, z_b, tau) ≤ log(bz) + mean(dᵢ²)/(2τ)` where
/// dᵢ = ‖z_{a,i} − z_{b,i}‖. Rows must be unit-normalized. The asserted
/// bound follows from sim(i,j) ≤ 1 and sim(i,i) = 1 − dᵢ²/2; the reported
/// constant form substitutes batch-level constants for the distances.
pub fn contrastive_ceiling_check(
    z_a: &Matrix,
    z_b: &Matrix,
    tau: f64,
) -> Result<ContrastiveCeilingReport> {
    require_unit_rows(z_a, "contrastive ceiling z_a")?;
    require_unit_rows(z_b, "contrastive ceiling z_b")?;
    let bz = z_a.rows();
    let loss = info_nce(z_a, z_b, tau)?.value;
    let d_sq: Vec<f64> = (0..bz).map(|i| row_distance(z_a, z_b, i).powi(2)).collect();
    let d_mean_sq = d_sq.iter().sum::<f64>() / bz as f64;
    let d_max_sq = d_sq.iter().cloned().fold(0.0f64, f64::max);
    let bound = (bz as f64).ln() + d_mean_sq / (2.0 * tau);
    let slack = bound - loss;
    if slack < -TOL {
        return Err(Error::invalid(format!(
            "contrastive ceiling violated: loss {loss} > bound {bound}"
        )));
    }
    let (constant_form_bound, constant_form_holds) = if d_max_sq > 0.0 && d_mean_sq > 0.0 {
        let l_sq = d_sq.iter().cloned().fold(f64::INFINITY, f64::min) / d_max_sq;
        let big_l_sq = (d_max_sq / d_mean_sq).max(1.0);
        let alpha = big_l_sq * (1.0 - l_sq) / (2.0 * tau);
        let b = (bz as f64).ln() + alpha * d_mean_sq;
        (b, loss <= b + TOL)
    } else {
        // identical pairs: the loss is exactly the degenerate log(bz) case
        ((bz as f64).ln(), loss <= (bz as f64).ln() + TOL)
    };
    Ok(ContrastiveCeilingReport {
        batch_size: bz,
        loss,
        bound,
        slack,
        constant_form_bound,
        constant_form_holds,
        d_mean_sq,
        d_max: d_max_sq.sqrt(),
    })
}

/// Five-term decomposition of the aggregated model's cross-modal gap.
#[derive(Debug, Clone, Serialize)]
pub struct DecompositionReport {
    pub n_samples: usize,
    /// max over samples of total − Σ terms (triangle chain; ≤ 0 up to tol).
    pub max_chain_excess: f64,
    /// max over samples of total² − 5·Σ terms² (≤ 0 up to tol).
    pub max_square_excess: f64,
    pub loss: f64,
    /// log(bz) + (5/2τ)·mean Σ terms² — asserted.
    pub bound: f64,
    pub slack: f64,
}

/// Per-sample check that the aggregated model's image/text embedding gap
/// chains through the locally trained and domain-optimal models:
///   ‖ẑ_ψ(x) − ẑ_φ(y)‖ ≤ a₁ + a₂ + a₃ + a₄ + a₅,  (Σa)² ≤ 5Σa²,
/// with a₁ = ‖ẑ_ψ(x) − ẑ_{ψi}(x)‖, a₂ = ‖ẑ_{ψi}(x) − z_{ψi}(x)‖,
/// a₃ = ‖z_{ψi}(x) − z_{φi}(y)‖, a₄ = ‖z_{φi}(y) − ẑ_{φi}(y)‖,
/// a₅ = ‖ẑ_{φi}(y) − ẑ_φ(y)‖ (hat = aggregated, hat-i = local, plain-i =
/// optimal). Combined with the contrastive ceiling this asserts
/// loss ≤ log(bz) + (5/2τ)·mean Σa².
pub fn decomposition_check(
    aggregated: &TwoTowerModel,
    local: &TwoTowerModel,
    optimal: &TwoTowerModel,
    x: &Matrix,
    y: &Matrix,
    tau: f64,
) -> Result<DecompositionReport> {
    let (zg_i, zg_t) = aggregated.embed(x, y)?;
    let (zl_i, zl_t) = local.embed(x, y)?;
    let (zo_i, zo_t) = optimal.embed(x, y)?;
    require_unit_rows(&zg_i, "decomposition image")?;
    require_unit_rows(&zg_t, "decomposition text")?;
    let n = x.rows();
    let mut max_chain_excess = f64::NEG_INFINITY;
    let mut max_square_excess = f64::NEG_INFINITY;
    let mut mean_sum_sq = 0.0;
    for i in 0..n {
        let a = [
            row_distance(&zg_i, &zl_i, i),
            row_distance(&zl_i, &zo_i, i),
            row_distance(&zo_i, &zo_t, i),
            row_distance(&zo_t, &zl_t, i),
            row_distance(&zl_t, &zg_t, i),
        ];
        let total = row_distance(&zg_i, &zg_t, i);
        let sum: f64 = a.iter().sum();
        let sum_sq: f64 = a.iter().map(|v| v * v).sum();
        let chain_excess = total - sum;
        let square_excess = total * total - 5.0 * sum_sq;
        if chain_excess > TOL || square_excess > TOL {
            return Err(Error::invalid(format!(
                "decomposition violated at sample {i}: chain excess {chain_excess}, square excess {square_excess}"
            )));
        }
        max_chain_excess = max_chain_excess.max(chain_excess);
        max_square_excess = max_square_excess.max(square_excess);
        mean_sum_sq += sum_sq / n as f64;
    }
    let loss = info_nce(&zg_i, &zg_t, tau)?.value;
    let bound = (n as f64).ln() + 5.0 * mean_sum_sq / (2.0 * tau);
    let slack = bound - loss;
    if slack < -TOL {
        return Err(Error::invalid(format!(
            "decomposition loss bound violated: loss {loss} > bound {bound}"
        )));
    }
    Ok(DecompositionReport {
        n_samples: n,
        max_chain_excess,
        max_square_excess,
        loss,
        bound,
        slack,
    })
}

/// Certified Lipschitz constant of symmetric InfoNCE in Frobenius norm,
/// valid whenever all embedding rows have norm at most one: every softmax
/// row of the score gradient has 1-norm at most (bz+3)/(2·bz·τ).
pub fn info_nce_lipschitz(batch_size: usize, tau: f64) -> f64 {
    let n = batch_size as f64;
    (n + 3.0) / (2.0 * n.sqrt() * tau)
}

/// Guidance-surrogate check for one local/anchor embedding pair.
#[derive(Debug, Clone, Serialize)]
pub struct GuidanceSurrogateReport {
    pub task_anchor: f64,
    pub task_local: f64,
    pub lipschitz: f64,
    pub drift: f64,
    /// task_local + L·drift — asserted ≥ task_anchor.
    pub bound: f64,
    pub slack: f64,
}

/// Verify the surrogate chain
///   L_task(z*_I, z*_T) ≤ L_task(z_I, z_T) + L·(‖z_I − z*_I‖ + ‖z_T − z*_T‖)
/// with the certified Lipschitz constant, along with the two-sided
/// Lipschitz property itself. This licenses replacing the anchor objective
/// by the local task loss plus an embedding-distance penalty.
pub fn guidance_surrogate_check(
    z_local_i: &Matrix,
    z_local_t: &Matrix,
    z_anchor_i: &Matrix,
    z_anchor_t: &Matrix,
    tau: f64,
) -> Result<GuidanceSurrogateReport> {
    require_unit_rows(z_local_i, "surrogate local image")?;
    require_unit_rows(z_local_t, "surrogate local text")?;
    require_unit_rows(z_anchor_i, "surrogate anchor image")?;
    require_unit_rows(z_anchor_t, "surrogate anchor text")?;
    let task_anchor = info_nce(z_anchor_i, z_anchor_t, tau)?.value;
    let task_local = info_nce(z_local_i, z_local_t, tau)?.value;
    let lipschitz = info_nce_lipschitz(z_local_i.rows(), tau);
    let drift = frobenius_distance(z_local_i, z_anchor_i)
        + frobenius_distance(z_local_t, z_anchor_t);
    if (task_anchor - task_local).abs() > lipschitz * drift + TOL {
        return Err(Error::invalid(format!(
            "Lipschitz property violated: |Δloss| {} > L·drift {}",
            (task_anchor - task_local).abs(),
            lipschitz * drift
        )));
    }
    let bound = task_local + lipschitz * drift;
    let slack = bound - task_anchor;
    Ok(GuidanceSurrogateReport {
        task_anchor,
        task_local,
        lipschitz,
        drift,
        bound,
        slack,
    })
}

/// Aggregate outcome of a random sweep over one check family.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub instances: usize,
    /// Instances where an asserted inequality failed (target: 0).
    pub violations: usize,
    /// Minimum slack of the asserted bound across instances.
    pub min_slack: f64,
    /// Instances where the reported (non-asserted) form also held.
    pub reported_form_held: usize,
}

fn random_unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        loop {
            let row = m.row_mut(i);
            let mut norm = 0.0;
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0f64..1.0);
                norm += *v * *v;
            }
            if norm > 1e-6 {
                let norm = norm.sqrt();
                row.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    m
}

/// Random batches of paired unit embeddings, including near-duplicate and
/// antipodal extremes, through [`contrastive_ceiling_check`].
pub fn contrastive_ceiling_sweep(instances: usize, seed: u64, tau: f64) -> Result<SweepSummary> {
    let mut rng = stream_rng(seed, &[201]);
    let mut violations = 0usize;
    let mut reported = 0usize;
    let mut min_slack = f64::INFINITY;
    for k in 0..instances {
        let bz = rng.gen_range(2..=16);
        let dim = rng.gen_range(2..=8);
        let z_a = random_unit_rows(bz, dim, &mut rng);
        let z_b = match k % 4 {
            // nearby pairs, independent pairs, identical, antipodal
            0 => {
                let mut b = z_a.clone();
                for i in 0..bz {
                    let noise = random_unit_rows(1, dim, &mut rng);
                    let row = b.row_mut(i);
                    let mut norm = 0.0;
                    for (v, e) in row.iter_mut().zip(noise.row(0).iter()) {
                        *v += 0.1 * e;
                        norm += *v * *v;
                    }
                    let norm = norm.sqrt();
                    row.iter_mut().for_each(|v| *v /= norm);
                }
                b
            }
            1 => random_unit_rows(bz, dim, &mut rng),
            2 => z_a.clone(),
            _ => {
                let mut b = z_a.clone();
                b.data_mut().iter_mut().for_each(|v| *v = -*v);
                b
            }
        };
        match contrastive_ceiling_check(&z_a, &z_b, tau) {
            Ok(rep) => {
                min_slack = min_slack.min(rep.slack);
                if rep.constant_form_holds {
                    reported += 1;
                }
            }
            Err(_) => violations += 1,
        }
    }
    Ok(SweepSummary {
        instances,
        violations,
        min_slack,
        reported_form_held: reported,
    })
}

/// Random model triples and batches through [`decomposition_check`].
pub fn decomposition_sweep(instances: usize, seed: u64, tau: f64) -> Result<SweepSummary> {
    let mut rng = stream_rng(seed, &[202]);
    let mut violations = 0usize;
    let mut min_slack = f64::INFINITY;
    for _ in 0..instances {
        let dims = ModelDims {
            x_dim: rng.gen_range(2..=5),
            y_dim: rng.gen_range(2..=5),
            hidden_dim: rng.gen_range(3..=6),
            embed_dim: rng.gen_range(2..=4),
            encoder_layers: rng.gen_range(1..=2),
            aligner_layers: rng.gen_range(1..=2),
        };
        let aggregated = init_model(dims, rng.gen())?;
        let local = init_model(dims, rng.gen())?;
        let optimal = init_model(dims, rng.gen())?;
        let bz = rng.gen_range(2..=8);
        let mut x = Matrix::zeros(bz, dims.x_dim);
        let mut y = Matrix::zeros(bz, dims.y_dim);
        for v in x.data_mut() {
            *v = rng.gen_range(-2.0f64..2.0);
        }
        for v in y.data_mut() {
            *v = rng.gen_range(-2.0f64..2.0);
        }
        match decomposition_check(&aggregated, &local, &optimal, &x, &y, tau) {
            Ok(rep) => min_slack = min_slack.min(rep.slack),
            Err(_) => violations += 1,
        }
    }
    Ok(SweepSummary {
        instances,
        violations,
        min_slack,
        reported_form_held: instances - violations,
    })
}

/// Random local/anchor embedding pairs through
/// [`guidance_surrogate_check`].
pub fn guidance_surrogate_sweep(instances: usize, seed: u64, tau: f64) -> Result<SweepSummary> {
    let mut rng = stream_rng(seed, &[203]);
    let mut violations = 0usize;
    let mut min_slack = f64::INFINITY;
    for k in 0..instances {
        let bz = rng.gen_range(2..=16);
        let dim = rng.gen_range(2..=8);
        let zl_i = random_unit_rows(bz, dim, &mut rng);
        let zl_t = random_unit_rows(bz, dim, &mut rng);
        let (za_i, za_t) = if k % 3 == 0 {
            (zl_i.clone(), zl_t.clone())
        } else {
            (
                random_unit_rows(bz, dim, &mut rng),
                random_unit_rows(bz, dim, &mut rng),
            )
        };
        match guidance_surrogate_check(&zl_i, &zl_t, &za_i, &za_t, tau) {
            Ok(rep) => min_slack = min_slack.min(rep.slack),
            Err(_) => violations += 1,
        }
    }
    Ok(SweepSummary {
        instances,
        violations,
        min_slack,
        reported_form_held: instances - violations,
    })
}

/// All three sweeps bundled for reporting.
#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub contrastive_ceiling: SweepSummary,
    pub decomposition: SweepSummary,
    pub guidance_surrogate: SweepSummary,
}

pub fn run_all_sweeps(instances: usize, seed: u64, tau: f64) -> Result<BoundsReport> {
    Ok(BoundsReport {
        contrastive_ceiling: contrastive_ceiling_sweep(instances, seed, tau)?,
        decomposition: decomposition_sweep(instances, seed.wrapping_add(1), tau)?,
        guidance_surrogate: guidance_surrogate_sweep(instances, seed.wrapping_add(2), tau)?,
    })
}
