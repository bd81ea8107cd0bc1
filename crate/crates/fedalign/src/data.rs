//! Synthetic latent-class multimodal pairs and Dirichlet client partitions.
//!
//! Each sample is generated from a latent class u: x = proto_x[u] + σ·ε,
//! y = proto_y[u] + σ·ε′ with independent standard-normal noise. Classes
//! are spread across clients by Dirichlet-drawn proportions with
//! largest-remainder rounding, so lower concentration means more
//! heterogeneous client class mixes.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::matrix::Matrix;
use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    pub k: usize,
    pub proto_x: Matrix,
    pub proto_y: Matrix,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub u: usize,
}

#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub class_histogram: Vec<usize>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-class, per-client sample counts.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    /// counts[class][client]
    pub counts: Vec<Vec<usize>>,
}

/// Prototypes drawn i.i.d. standard normal, row-normalized to ‖p‖ = √dim.
pub fn make_generator(
    seed: u64,
    k: usize,
    x_dim: usize,
    y_dim: usize,
    sigma: f64,
) -> Result<GeneratorSpec> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if x_dim == 0 || y_dim == 0 {
        return Err(Error::invalid("dims must be >= 1"));
    }
    if sigma < 0.0 {
        return Err(Error::invalid("sigma must be >= 0"));
    }
    let mut rng = rng::stream_rng(seed, &[tag::PROTOTYPES]);
    let mut draw = |rows: usize, dim: usize| -> Matrix {
        let mut m = Matrix::zeros(rows, dim);
        for i in 0..rows {
            let row = m.row_mut(i);
            let mut norm = 0.0;
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
                norm += *v * *v;
            }
            let scale = (dim as f64).sqrt() / norm.sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v *= scale);
        }
        m
    };
    let proto_x = draw(k, x_dim);
    let proto_y = draw(k, y_dim);
    Ok(GeneratorSpec {
        k,
        proto_x,
        proto_y,
        sigma,
        seed,
    })
}

/// One pair from latent class `u`.
pub fn emit_pair(gen: &GeneratorSpec, u: usize, rng: &mut impl Rng) -> Result<Sample> {
    if u >= gen.k {
        return Err(Error::invalid(format!("class {u} out of range (k={})", gen.k)));
    }
    let mut x = gen.proto_x.row(u).to_vec();
    let mut y = gen.proto_y.row(u).to_vec();
    for v in &mut x {
        let e: f64 = StandardNormal.sample(rng);
        *v += gen.sigma * e;
    }
    for v in &mut y {
        let e: f64 = StandardNormal.sample(rng);
        *v += gen.sigma * e;
    }
    Ok(Sample { x, y, u })
}

fn sample_dirichlet(n: usize, concentration: f64, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("valid gamma shape");
    loop {
        let raw: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = raw.iter().sum();
        // At tiny concentrations all gammas can underflow to 0; redraw.
        if sum > 0.0 && sum.is_finite() {
            return raw.into_iter().map(|v| v / sum).collect();
        }
    }
}

/// Largest-remainder rounding of `total·p` with deterministic tie-break by
/// client index.
fn largest_remainder(total: usize, p: &[f64]) -> Vec<usize> {
    let ideal: Vec<f64> = p.iter().map(|&pi| pi * total as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|&v| v.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Dirichlet allocation of each class's samples across clients.
pub fn dirichlet_partition(
    class_counts: &[usize],
    n_clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if n_clients == 0 {
        return Err(Error::invalid("n_clients must be >= 1"));
    }
    if !(concentration > 0.0) {
        return Err(Error::invalid("concentration must be > 0"));
    }
    let mut rng = rng::stream_rng(seed, &[tag::PARTITION]);
    let mut counts = Vec::with_capacity(class_counts.len());
    for &total in class_counts {
        let p = if n_clients == 1 {
            vec![1.0]
        } else {
            sample_dirichlet(n_clients, concentration, &mut rng)
        };
        counts.push(largest_remainder(total, &p));
    }
    Ok(PartitionPlan { counts })
}

/// Materialize samples per the plan and split each client's pool into
/// train/test uniformly at random. Deterministic in `seed`.
pub fn build_client_datasets(
    gen: &GeneratorSpec,
    plan: &PartitionPlan,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid("test_fraction must be in [0, 1)"));
    }
    if plan.counts.len() != gen.k {
        return Err(Error::invalid("plan classes do not match generator"));
    }
    let n_clients = plan
        .counts
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("empty partition plan"))?;
    let mut pools: Vec<Vec<Sample>> = vec![Vec::new(); n_clients];
    for (class, per_client) in plan.counts.iter().enumerate() {
        if per_client.len() != n_clients {
            return Err(Error::invalid("ragged partition plan"));
        }
        let mut emit_rng = rng::stream_rng(seed, &[tag::EMIT, class as u64]);
        for (client, &count) in per_client.iter().enumerate() {
            for _ in 0..count {
                pools[client].push(emit_pair(gen, class, &mut emit_rng)?);
            }
        }
    }
    let mut out = Vec::with_capacity(n_clients);
    for (client_id, mut pool) in pools.into_iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::DegeneratePartition(client_id));
        }
        let mut split_rng = rng::stream_rng(seed, &[tag::SPLIT, client_id as u64]);
        // Fisher-Yates shuffle.
        for i in (1..pool.len()).rev() {
            let j = split_rng.gen_range(0..=i);
            pool.swap(i, j);
        }
        let n_test = (pool.len() as f64 * test_fraction).floor() as usize;
        let test = pool.split_off(pool.len() - n_test);
        let mut class_histogram = vec![0usize; gen.k];
        for s in pool.iter().chain(test.iter()) {
            class_histogram[s.u] += 1;
        }
        out.push(ClientDataset {
            client_id,
            train: pool,
            test,
            class_histogram,
        });
    }
    Ok(out)
}

/// Mean pairwise total-variation distance between client class histograms.
pub fn heterogeneity(clients: &[ClientDataset]) -> f64 {
    let mut dists = Vec::new();
    for i in 0..clients.len() {
        for j in (i + 1)..clients.len() {
            let a = &clients[i].class_histogram;
            let b = &clients[j].class_histogram;
            let na: f64 = a.iter().sum::<usize>() as f64;
            let nb: f64 = b.iter().sum::<usize>() as f64;
            let tv: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| (x as f64 / na - y as f64 / nb).abs())
                .sum::<f64>()
                / 2.0;
            dists.push(tv);
        }
    }
    if dists.is_empty() {
        0.0
    } else {
        dists.iter().sum::<f64>() / dists.len() as f64
    }
}

/// CSV export: `split,u,x_0..x_{dx−1},y_0..y_{dy−1}` per row.
pub fn write_client_csv(dataset: &ClientDataset, writer: &mut impl std::io::Write) -> Result<()> {
    let dx = dataset
        .train
        .first()
        .or(dataset.test.first())
        .map(|s| s.x.len())
        .unwrap_or(0);
    let dy = dataset
        .train
        .first()
        .or(dataset.test.first())
        .map(|s| s.y.len())
        .unwrap_or(0);
    let mut header = String::from("split,u");
    for i in 0..dx {
        header.push_str(&format!(",x_{i}"));
    }
    for i in 0..dy {
        header.push_str(&format!(",y_{i}"));
    }
    writeln!(writer, "{header}")?;
    for (split, samples) in [("train", &dataset.train), ("test", &dataset.test)] {
        for s in samples {
            let xs: Vec<String> = s.x.iter().map(|v| format!("{v}")).collect();
            let ys: Vec<String> = s.y.iter().map(|v| format!("{v}")).collect();
            writeln!(writer, "{split},{},{},{}", s.u, xs.join(","), ys.join(","))?;
        }
    }
    Ok(())
}

/// Assemble (x, y) batch matrices from samples.
pub fn batch_matrices(samples: &[&Sample]) -> (Matrix, Matrix) {
    let dx = samples[0].x.len();
    let dy = samples[0].y.len();
    let mut x = Matrix::zeros(samples.len(), dx);
    let mut y = Matrix::zeros(samples.len(), dy);
    for (i, s) in samples.iter().enumerate() {
        x.row_mut(i).copy_from_slice(&s.x);
        y.row_mut(i).copy_from_slice(&s.y);
    }
    (x, y)
}
