//! Dense two-tower networks with explicit forward/backward passes.
//!
//! Each tower is an encoder (shallow feature layers) followed by an aligner
//! (deep alignment layers projecting into the shared embedding space).
//! Embeddings are row-wise L2 normalized; rows with raw norm below
//! [`DEGENERATE_NORM_EPS`] map to the zero vector and carry zero gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::rng::{self, tag};
use crate::{Error, Result};

/// Raw rows with L2 norm below this normalize to the zero vector.
pub const DEGENERATE_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// out_dim × in_dim.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Returns (pre-activation, post-activation), both bz × out_dim.
    fn forward(&self, input: &Matrix) -> (Matrix, Matrix) {
        let mut pre = input.matmul_transpose(&self.weight);
        for i in 0..pre.rows() {
            let row = pre.row_mut(i);
            for (v, b) in row.iter_mut().zip(self.bias.iter()) {
                *v += b;
            }
        }
        let mut post = pre.clone();
        for v in post.data_mut() {
            *v = self.activation.apply(*v);
        }
        (pre, post)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub x_dim: usize,
    pub y_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub aligner_layers: usize,
}

impl ModelDims {
    fn validate(&self) -> Result<()> {
        let fields = [
            ("x_dim", self.x_dim),
            ("y_dim", self.y_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("encoder_layers", self.encoder_layers),
            ("aligner_layers", self.aligner_layers),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Two modality towers, each split into encoder (f) and aligner (g) layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoTowerModel {
    pub image_encoder: Vec<DenseLayer>,
    pub image_aligner: Vec<DenseLayer>,
    pub text_encoder: Vec<DenseLayer>,
    pub text_aligner: Vec<DenseLayer>,
    pub dims: ModelDims,
}

fn init_tower(
    rng: &mut impl Rng,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    n_layers: usize,
    last_activation: Activation,
) -> Vec<DenseLayer> {
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let fan_in = if l == 0 { in_dim } else { hidden };
        let fan_out = if l + 1 == n_layers { out_dim } else { hidden };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut w = Matrix::zeros(fan_out, fan_in);
        for v in w.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        let activation = if l + 1 == n_layers {
            last_activation
        } else {
            Activation::Tanh
        };
        layers.push(DenseLayer {
            weight: w,
            bias: vec![0.0; fan_out],
            activation,
        });
    }
    layers
}

/// Xavier-uniform initialized model, deterministic in `seed`.
///
/// Encoder layers use Tanh throughout; aligners use Tanh with an Identity
/// output layer feeding the normalization.
pub fn init_model(dims: ModelDims, seed: u64) -> Result<TwoTowerModel> {
    dims.validate()?;
    let mut rng = rng::stream_rng(seed, &[tag::INIT_MODEL]);
    let image_encoder = init_tower(
        &mut rng,
        dims.x_dim,
        dims.hidden_dim,
        dims.hidden_dim,
        dims.encoder_layers,
        Activation::Tanh,
    );
    let image_aligner = init_tower(
        &mut rng,
        dims.hidden_dim,
        dims.hidden_dim,
        dims.embed_dim,
        dims.aligner_layers,
        Activation::Identity,
    );
    let text_encoder = init_tower(
        &mut rng,
        dims.y_dim,
        dims.hidden_dim,
        dims.hidden_dim,
        dims.encoder_layers,
        Activation::Tanh,
    );
    let text_aligner = init_tower(
        &mut rng,
        dims.hidden_dim,
        dims.hidden_dim,
        dims.embed_dim,
        dims.aligner_layers,
        Activation::Identity,
    );
    Ok(TwoTowerModel {
        image_encoder,
        image_aligner,
        text_encoder,
        text_aligner,
        dims,
    })
}

/// Per-tower intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TowerTrace {
    /// acts[0] = input; acts[l+1] = post-activation of layer l (encoder
    /// layers first, then aligner layers).
    pub acts: Vec<Matrix>,
    pub pres: Vec<Matrix>,
    pub n_encoder_layers: usize,
    /// Encoder output (feature vectors I or T).
    pub features: Matrix,
    /// Aligner output before row normalization.
    pub raw: Matrix,
    /// Row-normalized embeddings.
    pub z: Matrix,
    pub norms: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub image: TowerTrace,
    pub text: TowerTrace,
}

/// Mix encoders and aligners from different models in one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct TowerOverrides<'a> {
    pub encoder_from: Option<&'a TwoTowerModel>,
    pub aligner_from: Option<&'a TwoTowerModel>,
}

fn run_tower(encoder: &[DenseLayer], aligner: &[DenseLayer], input: &Matrix) -> TowerTrace {
    let n_layers = encoder.len() + aligner.len();
    let mut acts = Vec::with_capacity(n_layers + 1);
    let mut pres = Vec::with_capacity(n_layers);
    acts.push(input.clone());
    for layer in encoder.iter().chain(aligner.iter()) {
        let (pre, post) = layer.forward(acts.last().unwrap());
        pres.push(pre);
        acts.push(post);
    }
    let features = acts[encoder.len()].clone();
    let raw = acts.last().unwrap().clone();
    let mut z = raw.clone();
    let mut norms = Vec::with_capacity(raw.rows());
    for i in 0..raw.rows() {
        let row = z.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM_EPS {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
        norms.push(norm);
    }
    TowerTrace {
        acts,
        pres,
        n_encoder_layers: encoder.len(),
        features,
        raw,
        z,
        norms,
    }
}

/// Forward both towers over a batch of paired inputs.
pub fn forward(
    model: &TwoTowerModel,
    x_batch: &Matrix,
    y_batch: &Matrix,
    overrides: Option<TowerOverrides<'_>>,
) -> Result<ForwardCache> {
    let ov = overrides.unwrap_or_default();
    let enc_model = ov.encoder_from.unwrap_or(model);
    let alg_model = ov.aligner_from.unwrap_or(model);
    if x_batch.cols() != model.dims.x_dim {
        return Err(Error::ShapeMismatch {
            context: "forward x_batch",
            expected: format!("{} cols", model.dims.x_dim),
            got: format!("{}", x_batch.cols()),
        });
    }
    if y_batch.cols() != model.dims.y_dim {
        return Err(Error::ShapeMismatch {
            context: "forward y_batch",
            expected: format!("{} cols", model.dims.y_dim),
            got: format!("{}", y_batch.cols()),
        });
    }
    if x_batch.rows() != y_batch.rows() {
        return Err(Error::ShapeMismatch {
            context: "forward batch rows",
            expected: format!("{}", x_batch.rows()),
            got: format!("{}", y_batch.rows()),
        });
    }
    Ok(ForwardCache {
        image: run_tower(&enc_model.image_encoder, &alg_model.image_aligner, x_batch),
        text: run_tower(&enc_model.text_encoder, &alg_model.text_aligner, y_batch),
    })
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Per-parameter gradients, grouped like the model.
#[derive(Debug, Clone)]
pub struct GradSet {
    pub image_encoder: Vec<LayerGrad>,
    pub image_aligner: Vec<LayerGrad>,
    pub text_encoder: Vec<LayerGrad>,
    pub text_aligner: Vec<LayerGrad>,
}

impl GradSet {
    pub fn add(&mut self, other: &GradSet) {
        let pairs = [
            (&mut self.image_encoder, &other.image_encoder),
            (&mut self.image_aligner, &other.image_aligner),
            (&mut self.text_encoder, &other.text_encoder),
            (&mut self.text_aligner, &other.text_aligner),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                d.weight.add_scaled(&s.weight, 1.0);
                for (b, sb) in d.bias.iter_mut().zip(s.bias.iter()) {
                    *b += sb;
                }
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        let groups = [
            &self.image_encoder,
            &self.image_aligner,
            &self.text_encoder,
            &self.text_aligner,
        ];
        let mut m: f64 = 0.0;
        for g in groups {
            for lg in g {
                for v in lg.weight.data() {
                    m = m.max(v.abs());
                }
                for v in &lg.bias {
                    m = m.max(v.abs());
                }
            }
        }
        m
    }
}

/// Propagate a gradient through the normalization: z = v/||v||.
/// J = (I − z zᵀ)/||v||; zero in the degenerate branch.
fn grad_through_normalization(trace: &TowerTrace, grad_z: &Matrix) -> Matrix {
    let mut out = grad_z.clone();
    for i in 0..out.rows() {
        let norm = trace.norms[i];
        let zrow = trace.z.row(i);
        let row = out.row_mut(i);
        if norm < DEGENERATE_NORM_EPS {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            let dot: f64 = row.iter().zip(zrow.iter()).map(|(g, z)| g * z).sum();
            for (g, z) in row.iter_mut().zip(zrow.iter()) {
                *g = (*g - dot * z) / norm;
            }
        }
    }
    out
}

fn backward_tower(
    trace: &TowerTrace,
    encoder: &[DenseLayer],
    aligner: &[DenseLayer],
    grad_z: &Matrix,
) -> Result<(Vec<LayerGrad>, Vec<LayerGrad>)> {
    if grad_z.rows() != trace.z.rows() || grad_z.cols() != trace.z.cols() {
        return Err(Error::ShapeMismatch {
            context: "backward grad_z",
            expected: format!("{}x{}", trace.z.rows(), trace.z.cols()),
            got: format!("{}x{}", grad_z.rows(), grad_z.cols()),
        });
    }
    let layers: Vec<&DenseLayer> = encoder.iter().chain(aligner.iter()).collect();
    let mut grads: Vec<Option<LayerGrad>> = (0..layers.len()).map(|_| None).collect();
    let mut g_post = grad_through_normalization(trace, grad_z);
    for l in (0..layers.len()).rev() {
        let layer = layers[l];
        let post = &trace.acts[l + 1];
        let mut g_pre = g_post;
        for (g, o) in g_pre.data_mut().iter_mut().zip(post.data().iter()) {
            *g *= layer.activation.derivative_from_output(*o);
        }
        let g_weight = g_pre.transpose_matmul(&trace.acts[l]);
        let mut g_bias = vec![0.0; layer.out_dim()];
        for i in 0..g_pre.rows() {
            for (b, v) in g_bias.iter_mut().zip(g_pre.row(i).iter()) {
                *b += v;
            }
        }
        grads[l] = Some(LayerGrad {
            weight: g_weight,
            bias: g_bias,
        });
        g_post = g_pre.matmul(&layer.weight);
    }
    let mut all: Vec<LayerGrad> = grads.into_iter().map(Option::unwrap).collect();
    let aligner_grads = all.split_off(encoder.len());
    Ok((all, aligner_grads))
}

/// Exact reverse-mode gradients for a cache produced by [`forward`].
pub fn backward(
    cache: &ForwardCache,
    model: &TwoTowerModel,
    grad_z_image: &Matrix,
    grad_z_text: &Matrix,
) -> Result<GradSet> {
    backward_mixed(cache, model, model, grad_z_image, grad_z_text)
}

/// Backward pass when the forward mixed towers from different models.
/// `encoder_model`/`aligner_model` must match the forward's sources.
pub fn backward_mixed(
    cache: &ForwardCache,
    encoder_model: &TwoTowerModel,
    aligner_model: &TwoTowerModel,
    grad_z_image: &Matrix,
    grad_z_text: &Matrix,
) -> Result<GradSet> {
    let (image_encoder, image_aligner) = backward_tower(
        &cache.image,
        &encoder_model.image_encoder,
        &aligner_model.image_aligner,
        grad_z_image,
    )?;
    let (text_encoder, text_aligner) = backward_tower(
        &cache.text,
        &encoder_model.text_encoder,
        &aligner_model.text_aligner,
        grad_z_text,
    )?;
    Ok(GradSet {
        image_encoder,
        image_aligner,
        text_encoder,
        text_aligner,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamFilter {
    All,
    AlignersOnly,
    EncodersOnly,
}

fn sgd_group(layers: &mut [DenseLayer], grads: &[LayerGrad], step: f64) {
    for (layer, grad) in layers.iter_mut().zip(grads.iter()) {
        layer.weight.add_scaled(&grad.weight, -step);
        for (b, g) in layer.bias.iter_mut().zip(grad.bias.iter()) {
            *b -= step * g;
        }
    }
}

/// p ← p − step_weight·lr·g on the selected parameter groups.
pub fn apply_sgd(
    model: &mut TwoTowerModel,
    grads: &GradSet,
    lr: f64,
    step_weight: f64,
    which: ParamFilter,
) {
    let step = lr * step_weight;
    if step == 0.0 {
        return;
    }
    if which != ParamFilter::AlignersOnly {
        sgd_group(&mut model.image_encoder, &grads.image_encoder, step);
        sgd_group(&mut model.text_encoder, &grads.text_encoder, step);
    }
    if which != ParamFilter::EncodersOnly {
        sgd_group(&mut model.image_aligner, &grads.image_aligner, step);
        sgd_group(&mut model.text_aligner, &grads.text_aligner, step);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentGroup {
    Encoder,
    Aligner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub group: SegmentGroup,
}

/// Flat parameter vector with a named, gap-free layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<Segment>,
}

impl ParamVector {
    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout && self.values.len() == other.values.len()
    }
}

fn tower_groups(model: &TwoTowerModel) -> [(&'static str, &Vec<DenseLayer>, SegmentGroup); 4] {
    [
        ("image_encoder", &model.image_encoder, SegmentGroup::Encoder),
        ("image_aligner", &model.image_aligner, SegmentGroup::Aligner),
        ("text_encoder", &model.text_encoder, SegmentGroup::Encoder),
        ("text_aligner", &model.text_aligner, SegmentGroup::Aligner),
    ]
}

pub fn flatten(model: &TwoTowerModel) -> ParamVector {
    let mut values = Vec::new();
    let mut layout = Vec::new();
    for (prefix, layers, group) in tower_groups(model) {
        for (i, layer) in layers.iter().enumerate() {
            let w_off = values.len();
            values.extend_from_slice(layer.weight.data());
            layout.push(Segment {
                name: format!("{prefix}.{i}.weight"),
                offset: w_off,
                len: layer.weight.data().len(),
                group,
            });
            let b_off = values.len();
            values.extend_from_slice(&layer.bias);
            layout.push(Segment {
                name: format!("{prefix}.{i}.bias"),
                offset: b_off,
                len: layer.bias.len(),
                group,
            });
        }
    }
    ParamVector { values, layout }
}

pub fn load(model: &mut TwoTowerModel, params: &ParamVector) -> Result<()> {
    let expected = flatten(model);
    if expected.layout != params.layout || expected.values.len() != params.values.len() {
        return Err(Error::LayoutMismatch(format!(
            "model has {} params in {} segments, vector has {} params in {} segments",
            expected.values.len(),
            expected.layout.len(),
            params.values.len(),
            params.layout.len()
        )));
    }
    let mut idx = 0usize;
    let groups: [&mut Vec<DenseLayer>; 4] = [
        &mut model.image_encoder,
        &mut model.image_aligner,
        &mut model.text_encoder,
        &mut model.text_aligner,
    ];
    for layers in groups {
        for layer in layers.iter_mut() {
            let n = layer.weight.data().len();
            layer
                .weight
                .data_mut()
                .copy_from_slice(&params.values[idx..idx + n]);
            idx += n;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&params.values[idx..idx + nb]);
            idx += nb;
        }
    }
    Ok(())
}

impl TwoTowerModel {
    /// Normalized embeddings (z_I, z_T) for a batch, discarding the cache.
    pub fn embed(&self, x: &Matrix, y: &Matrix) -> Result<(Matrix, Matrix)> {
        let cache = forward(self, x, y, None)?;
        Ok((cache.image.z, cache.text.z))
    }

    pub fn param_count(&self) -> usize {
        flatten(self).values.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> ModelDims {
        ModelDims {
            x_dim: 5,
            y_dim: 4,
            hidden_dim: 6,
            embed_dim: 3,
            encoder_layers: 2,
            aligner_layers: 2,
        }
    }

    fn identity_layer(dim: usize) -> DenseLayer {
        let mut w = Matrix::zeros(dim, dim);
        for i in 0..dim {
            w.set(i, i, 1.0);
        }
        DenseLayer {
            weight: w,
            bias: vec![0.0; dim],
            activation: Activation::Identity,
        }
    }

    fn identity_model(dim: usize) -> TwoTowerModel {
        TwoTowerModel {
            image_encoder: vec![identity_layer(dim)],
            image_aligner: vec![identity_layer(dim)],
            text_encoder: vec![identity_layer(dim)],
            text_aligner: vec![identity_layer(dim)],
            dims: ModelDims {
                x_dim: dim,
                y_dim: dim,
                hidden_dim: dim,
                embed_dim: dim,
                encoder_layers: 1,
                aligner_layers: 1,
            },
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(small_dims(), 42).unwrap();
        let b = init_model(small_dims(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_seeds_differ() {
        let a = init_model(small_dims(), 1).unwrap();
        let b = init_model(small_dims(), 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn init_rejects_zero_dims() {
        let mut d = small_dims();
        d.hidden_dim = 0;
        assert!(init_model(d, 0).is_err());
    }

    #[test]
    fn identity_forward_normalizes() {
        let m = identity_model(2);
        let x = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let cache = forward(&m, &x, &y, None).unwrap();
        assert_eq!(cache.image.features.row(0), &[3.0, 4.0]);
        let z = cache.image.z.row(0);
        assert!((z[0] - 0.6).abs() < 1e-12);
        assert!((z[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_input_degenerate_embedding() {
        let m = identity_model(2);
        let x = Matrix::zeros(1, 2);
        let y = Matrix::zeros(1, 2);
        let cache = forward(&m, &x, &y, None).unwrap();
        assert_eq!(cache.image.z.row(0), &[0.0, 0.0]);
        assert_eq!(cache.text.z.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        // Independent re-derivation of the 2-layer tanh tower as explicit
        // scalar arithmetic.
        let dims = ModelDims {
            x_dim: 3,
            y_dim: 3,
            hidden_dim: 4,
            embed_dim: 2,
            encoder_layers: 1,
            aligner_layers: 1,
        };
        let m = init_model(dims, 9).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.0, 0.1, -0.4]]).unwrap();
        let cache = forward(&m, &x, &x.clone(), None).unwrap();
        for r in 0..2 {
            // encoder: tanh(Wx + b)
            let mut h = vec![0.0; 4];
            for o in 0..4 {
                let mut s = m.image_encoder[0].bias[o];
                for i in 0..3 {
                    s += m.image_encoder[0].weight.get(o, i) * x.get(r, i);
                }
                h[o] = s.tanh();
            }
            // aligner: Wh + b, then normalize
            let mut v = vec![0.0; 2];
            for o in 0..2 {
                let mut s = m.image_aligner[0].bias[o];
                for i in 0..4 {
                    s += m.image_aligner[0].weight.get(o, i) * h[i];
                }
                v[o] = s;
            }
            let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
            for (j, &vj) in v.iter().enumerate() {
                assert!((cache.image.z.get(r, j) - vj / norm).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_zero_grad_is_zero() {
        let m = init_model(small_dims(), 3).unwrap();
        let x = Matrix::from_rows(&[vec![0.1; 5], vec![0.2; 5]]).unwrap();
        let y = Matrix::from_rows(&[vec![0.3; 4], vec![-0.1; 4]]).unwrap();
        let cache = forward(&m, &x, &y, None).unwrap();
        let gz = Matrix::zeros(2, 3);
        let grads = backward(&cache, &m, &gz, &gz.clone()).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn single_identity_layer_symbolic_gradient() {
        // loss = ½‖z−t‖² with ‖v‖=1 ⇒ dW_aligner = ((I − z zᵀ)(z−t)) xᵀ.
        let m = identity_model(2);
        let x = Matrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let cache = forward(&m, &x, &x.clone(), None).unwrap();
        let z = [cache.image.z.get(0, 0), cache.image.z.get(0, 1)];
        assert!((cache.image.norms[0] - 1.0).abs() < 1e-12);
        let t = [1.0, 0.0];
        let gz = Matrix::from_rows(&[vec![z[0] - t[0], z[1] - t[1]]]).unwrap();
        let grads = backward(&cache, &m, &gz, &Matrix::zeros(1, 2)).unwrap();
        // expected: (I − z zᵀ)(z−t) outer x
        let d = [z[0] - t[0], z[1] - t[1]];
        let dot = z[0] * d[0] + z[1] * d[1];
        let gr = [d[0] - dot * z[0], d[1] - dot * z[1]];
        for i in 0..2 {
            for j in 0..2 {
                let expect = gr[i] * x.get(0, j);
                assert!(
                    (grads.image_aligner[0].weight.get(i, j) - expect).abs() < 1e-12,
                    "dW[{i}][{j}]"
                );
            }
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut m = identity_model(2);
        let mut gw = Matrix::zeros(2, 2);
        gw.set(0, 0, 2.0);
        let grads = GradSet {
            image_encoder: vec![LayerGrad {
                weight: gw,
                bias: vec![0.0; 2],
            }],
            image_aligner: vec![LayerGrad {
                weight: Matrix::zeros(2, 2),
                bias: vec![0.0; 2],
            }],
            text_encoder: vec![LayerGrad {
                weight: Matrix::zeros(2, 2),
                bias: vec![0.0; 2],
            }],
            text_aligner: vec![LayerGrad {
                weight: Matrix::zeros(2, 2),
                bias: vec![0.0; 2],
            }],
        };
        let before = m.clone();
        apply_sgd(&mut m, &grads, 0.1, 0.0, ParamFilter::All);
        assert_eq!(m, before);
        apply_sgd(&mut m, &grads, 0.0, 1.0, ParamFilter::All);
        assert_eq!(m, before);
        apply_sgd(&mut m, &grads, 0.1, 1.0, ParamFilter::All);
        assert!((m.image_encoder[0].weight.get(0, 0) - 0.8).abs() < 1e-15);
        // aligner untouched under EncodersOnly
        let mut m2 = before.clone();
        apply_sgd(&mut m2, &grads, 0.1, 1.0, ParamFilter::AlignersOnly);
        assert_eq!(m2, before);
    }

    #[test]
    fn flatten_load_roundtrip() {
        let m = init_model(small_dims(), 11).unwrap();
        let pv = flatten(&m);
        // vector length = Σ(out×in + out)
        let mut expect = 0usize;
        for (_, layers, _) in tower_groups(&m) {
            for l in layers {
                expect += l.weight.data().len() + l.bias.len();
            }
        }
        assert_eq!(pv.values.len(), expect);
        // layout partitions with no gaps or overlaps
        let mut cursor = 0usize;
        for seg in &pv.layout {
            assert_eq!(seg.offset, cursor);
            cursor += seg.len;
        }
        assert_eq!(cursor, pv.values.len());
        let mut m2 = init_model(small_dims(), 99).unwrap();
        load(&mut m2, &pv).unwrap();
        assert_eq!(m, m2);
        assert_eq!(flatten(&m2), pv);
    }

    #[test]
    fn perturbed_param_changes_output() {
        let m = init_model(small_dims(), 5).unwrap();
        let mut pv = flatten(&m);
        pv.values[7] += 0.25;
        let mut m2 = m.clone();
        load(&mut m2, &pv).unwrap();
        let x = Matrix::from_rows(&[vec![0.4, -0.2, 0.9, 0.0, 0.3]]).unwrap();
        let y = Matrix::from_rows(&[vec![0.1, 0.5, -0.3, 0.2]]).unwrap();
        let (z1, _) = m.embed(&x, &y).unwrap();
        let (z2, _) = m2.embed(&x, &y).unwrap();
        assert!(z1.max_abs_diff(&z2) > 0.0);
    }

    #[test]
    fn normalization_jacobian_orthogonal_to_z() {
        // Jᵀz = 0: pushing any grad through normalization yields a vector
        // orthogonal to z.
        let m = init_model(small_dims(), 21).unwrap();
        let x = Matrix::from_rows(&[vec![0.9, -0.5, 0.2, 0.8, -0.1]]).unwrap();
        let y = Matrix::from_rows(&[vec![0.3, 0.3, -0.9, 0.4]]).unwrap();
        let cache = forward(&m, &x, &y, None).unwrap();
        let g = Matrix::from_rows(&[vec![0.7, -1.3, 0.4]]).unwrap();
        let through = super::grad_through_normalization(&cache.image, &g);
        let dot: f64 = through
            .row(0)
            .iter()
            .zip(cache.image.z.row(0).iter())
            .map(|(a, b)| a * b)
            .sum();
        assert!(dot.abs() < 1e-9);
    }
}
