//! Training objectives: symmetric InfoNCE, guidance L2, the combined local
//! loss, and the teacher-aligner robust loss. Each returns the scalar value
//! together with gradients in embedding space; callers route those through
//! [`crate::nn::backward`].

use crate::matrix::Matrix;
use crate::nn::ForwardCache;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_z_image: Matrix,
    pub grad_z_text: Matrix,
}

/// Hyperparameters shared by the loss family.
#[derive(Debug, Clone, Copy)]
pub struct Hyper {
    /// InfoNCE temperature, > 0.
    pub tau: f64,
    /// Task-loss weight in the local loss.
    pub alpha: f64,
    /// Anchor-discrepancy weight in the robust loss.
    pub beta: f64,
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::invalid("alpha and beta must be >= 0"));
        }
        Ok(())
    }
}

fn check_same_shape(a: &Matrix, b: &Matrix, context: &'static str) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            context,
            expected: format!("{}x{}", a.rows(), a.cols()),
            got: format!("{}x{}", b.rows(), b.cols()),
        });
    }
    Ok(())
}

/// Symmetric InfoNCE over row embeddings.
///
/// s_ij = Zx_i · Zy_j; loss = ½·mean_i[−log softmax_j(s_ij/τ)]_{j=i}
/// plus the same with rows and columns swapped. Stabilized by max
/// subtraction before exponentiation.
pub fn info_nce(zx: &Matrix, zy: &Matrix, tau: f64) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tau must be > 0, got {tau}")));
    }
    check_same_shape(zx, zy, "info_nce")?;
    let bz = zx.rows();
    if bz == 0 {
        return Err(Error::invalid("info_nce: empty batch"));
    }
    let sim = zx.matmul_transpose(zy); // bz × bz
    let n = bz as f64;

    // Row direction: softmax over j of s_ij/τ.
    let mut loss = 0.0;
    let mut grad_s = Matrix::zeros(bz, bz);
    for i in 0..bz {
        let row = sim.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / tau));
        let mut denom = 0.0;
        for &v in row {
            denom += (v / tau - m).exp();
        }
        let lse = m + denom.ln();
        loss += 0.5 * (lse - row[i] / tau) / n;
        for j in 0..bz {
            let p = (row[j] / tau - m).exp() / denom;
            let delta = if i == j { 1.0 } else { 0.0 };
            *grad_s.row_mut(i).get_mut(j).unwrap() += 0.5 * (p - delta) / (n * tau);
        }
    }
    // Column direction: softmax over i of s_ij/τ.
    for j in 0..bz {
        let col: Vec<f64> = (0..bz).map(|i| sim.get(i, j)).collect();
        let m = col.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / tau));
        let mut denom = 0.0;
        for &v in &col {
            denom += (v / tau - m).exp();
        }
        let lse = m + denom.ln();
        loss += 0.5 * (lse - col[j] / tau) / n;
        for i in 0..bz {
            let p = (col[i] / tau - m).exp() / denom;
            let delta = if i == j { 1.0 } else { 0.0 };
            *grad_s.row_mut(i).get_mut(j).unwrap() += 0.5 * (p - delta) / (n * tau);
        }
    }
    let grad_zx = grad_s.matmul(zy);
    let grad_zy = grad_s.transpose_matmul(zx);
    Ok(LossOutput {
        value: loss,
        grad_z_image: grad_zx,
        grad_z_text: grad_zy,
    })
}

/// Σ over batch and coordinates of (Z − Z_anchor)²; gradient flows only
/// into Z (anchors come from frozen models).
pub fn guidance_l2(z: &Matrix, z_anchor: &Matrix) -> Result<LossOutput> {
    check_same_shape(z, z_anchor, "guidance_l2")?;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(z.rows(), z.cols());
    for (k, (a, b)) in z.data().iter().zip(z_anchor.data().iter()).enumerate() {
        let d = a - b;
        value += d * d;
        grad.data_mut()[k] = 2.0 * d;
    }
    Ok(LossOutput {
        value,
        grad_z_image: grad,
        grad_z_text: Matrix::zeros(z.rows(), z.cols()),
    })
}

/// Combined local loss: L_guide (both modalities, against frozen anchors)
/// + α·L_task (InfoNCE on the local embeddings). Gradients are with respect
/// to the local embeddings only.
pub fn local_loss(
    cache_local: &ForwardCache,
    cache_anchor: &ForwardCache,
    hyper: &Hyper,
) -> Result<LossOutput> {
    hyper.validate()?;
    let guide_i = guidance_l2(&cache_local.image.z, &cache_anchor.image.z)?;
    let guide_t = guidance_l2(&cache_local.text.z, &cache_anchor.text.z)?;
    let task = info_nce(&cache_local.image.z, &cache_local.text.z, hyper.tau)?;
    let mut grad_i = guide_i.grad_z_image;
    grad_i.add_scaled(&task.grad_z_image, hyper.alpha);
    let mut grad_t = guide_t.grad_z_image;
    grad_t.add_scaled(&task.grad_z_text, hyper.alpha);
    Ok(LossOutput {
        value: guide_i.value + guide_t.value + hyper.alpha * task.value,
        grad_z_image: grad_i,
        grad_z_text: grad_t,
    })
}

/// Embedding-space gradients of the robust teacher-aligner loss, one slot
/// per input matrix.
#[derive(Debug, Clone)]
pub struct DroLossOutput {
    pub value: f64,
    pub grad_clean_image: Matrix,
    pub grad_clean_text: Matrix,
    pub grad_copy_image: Matrix,
    pub grad_copy_text: Matrix,
    pub grad_local_image: Matrix,
    pub grad_local_text: Matrix,
}

/// Robust teacher-aligner loss:
/// β·(‖z_clean − z_copy‖² over both modalities)
/// + InfoNCE(z_clean_I, z_clean_T) + InfoNCE(z_local_I, z_local_T).
///
/// Wiring: z_clean = teacher aligner over frozen aggregated-encoder
/// features; z_copy = teacher aligner over the learnable encoder copy;
/// z_local = frozen local aligner over the learnable copy. The caller
/// routes the returned gradients accordingly.
#[allow(clippy::too_many_arguments)]
pub fn dro_loss(
    z_clean_image: &Matrix,
    z_clean_text: &Matrix,
    z_copy_image: &Matrix,
    z_copy_text: &Matrix,
    z_local_image: &Matrix,
    z_local_text: &Matrix,
    hyper: &Hyper,
) -> Result<DroLossOutput> {
    hyper.validate()?;
    check_same_shape(z_clean_image, z_copy_image, "dro_loss image")?;
    check_same_shape(z_clean_text, z_copy_text, "dro_loss text")?;
    check_same_shape(z_clean_image, z_local_image, "dro_loss local image")?;
    check_same_shape(z_clean_text, z_local_text, "dro_loss local text")?;

    let disc_i = guidance_l2(z_clean_image, z_copy_image)?;
    let disc_t = guidance_l2(z_clean_text, z_copy_text)?;
    let nce_clean = info_nce(z_clean_image, z_clean_text, hyper.tau)?;
    let nce_local = info_nce(z_local_image, z_local_text, hyper.tau)?;

    let value =
        hyper.beta * (disc_i.value + disc_t.value) + nce_clean.value + nce_local.value;

    // d/dz_clean of β‖clean − copy‖² is +2β(clean − copy); d/dz_copy is the
    // negation.
    let mut grad_clean_image = nce_clean.grad_z_image;
    grad_clean_image.add_scaled(&disc_i.grad_z_image, hyper.beta);
    let mut grad_clean_text = nce_clean.grad_z_text;
    grad_clean_text.add_scaled(&disc_t.grad_z_image, hyper.beta);

    let mut grad_copy_image = Matrix::zeros(z_copy_image.rows(), z_copy_image.cols());
    grad_copy_image.add_scaled(&disc_i.grad_z_image, -hyper.beta);
    let mut grad_copy_text = Matrix::zeros(z_copy_text.rows(), z_copy_text.cols());
    grad_copy_text.add_scaled(&disc_t.grad_z_image, -hyper.beta);

    Ok(DroLossOutput {
        value,
        grad_clean_image,
        grad_clean_text,
        grad_copy_image,
        grad_copy_text,
        grad_local_image: nce_local.grad_z_image,
        grad_local_text: nce_local.grad_z_text,
    })
}
