//! Training objectives: contrastive matching with learnable
//! temperature, prompt diversity and KL regularizers, the stage-1
//! composite, and the stage-2 distillation pair.

use crate::error::{Error, Result};
use crate::mgpm::GaussianPromptParams;
use crate::numerics::array::DenseArray;
use crate::numerics::param::{ParamSet, Parameter, Session};
use crate::numerics::tape::Tensor;

/// Index-aligned unit-norm embedding pairs: row i of `text` matches row
/// i of `image`.
#[derive(Clone, Debug)]
pub struct EmbeddingPairBatch {
    pub text: Tensor,
    pub image: Tensor,
}

impl EmbeddingPairBatch {
    pub fn new(text: Tensor, image: Tensor) -> Result<Self> {
        if text.rows() != image.rows() || text.cols() != image.cols() {
            return Err(Error::Dimension(format!(
                "pair batch [{}x{}] vs [{}x{}]",
                text.rows(),
                text.cols(),
                image.rows(),
                image.cols()
            )));
        }
        for (name, t) in [("text", &text), ("image", &image)] {
            let v = t.value();
            for i in 0..t.rows() {
                let norm: f64 = v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-10 {
                    return Err(Error::Normalization(format!(
                        "{name} row {i} has norm {norm}"
                    )));
                }
            }
        }
        Ok(EmbeddingPairBatch { text, image })
    }

    pub fn len(&self) -> usize {
        self.text.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learnable contrastive temperature, stored as `log(1/tau)`.
#[derive(Clone, Debug)]
pub struct Temperature {
    pub param: String,
}

impl Temperature {
    pub const PARAM_NAME: &'static str = "objective/log_inv_tau";

    /// Registers the parameter initialized at `log(1 / tau_init)`.
    pub fn init(params: &mut ParamSet, tau_init: f64) -> Result<Self> {
        if !(tau_init > 0.0) {
            return Err(Error::Value(format!("tau must be > 0, got {tau_init}")));
        }
        params.insert(Parameter::new(
            Self::PARAM_NAME,
            DenseArray::scalar((1.0 / tau_init).ln()),
        ))?;
        Ok(Temperature {
            param: Self::PARAM_NAME.to_string(),
        })
    }

    /// Current tau = exp(-log(1/tau)); always positive.
    pub fn tau(&self, params: &ParamSet) -> Result<f64> {
        Ok((-params.get(&self.param)?.value.scalar_value()?).exp())
    }
}

/// Softmax cross-entropy over cosine similarities: text anchors against
/// all image candidates in the batch. Returns the mean loss and the
/// per-pair terms `[N x 1]`.
pub fn contrastive_loss(
    sess: &mut Session,
    params: &ParamSet,
    batch: &EmbeddingPairBatch,
    temp: &Temperature,
) -> Result<(Tensor, Tensor)> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::BatchSize(format!(
            "contrastive loss needs N >= 2, got {n} (no negatives)"
        )));
    }
    let text = batch.text.l2_normalize_rows(1e-12)?;
    let image = batch.image.l2_normalize_rows(1e-12)?;
    let sim = text.matmul_nt(&image)?;
    let inv_tau = sess.lease(params, &temp.param)?.exp();
    let logits = sim.mul_scalar(&inv_tau)?;
    let per_pair = logits.log_sum_exp_rows().sub(&logits.diag_part()?)?;
    let loss = per_pair.mean_all();
    Ok((loss, per_pair))
}

/// Mean squared Frobenius gap between each prompt Gram matrix and the
/// identity: zero exactly when every row set is orthonormal.
pub fn diversity_loss(sess: &mut Session, prompt_rows: &[Tensor]) -> Result<Tensor> {
    if prompt_rows.is_empty() {
        return Err(Error::EmptyInput("diversity loss over zero RoIs".into()));
    }
    let mut terms = Vec::with_capacity(prompt_rows.len());
    for rows in prompt_rows {
        let v = rows.value();
        for i in 0..rows.rows() {
            let norm: f64 = v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-10 {
                return Err(Error::Normalization(format!(
                    "prompt row {i} has norm {norm}, expected 1"
                )));
            }
        }
        let gram = rows.matmul_nt(rows)?;
        let mut ident = DenseArray::zeros(vec![rows.rows(), rows.rows()]);
        for i in 0..rows.rows() {
            ident.set2(i, i, 1.0);
        }
        let delta = gram.sub(&sess.constant(ident))?;
        terms.push(delta.mul(&delta)?.sum_all());
    }
    crate::numerics::tape::mean_scalars(&terms)
}

/// Closed-form KL(N(mu, diag sigma^2) || N(0, I)):
/// `0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma)`.
pub fn kl_to_standard_normal(gaussian: &GaussianPromptParams) -> Result<Tensor> {
    let s = gaussian.sigma.value();
    if s.as_slice().iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain("KL needs sigma > 0".into()));
    }
    let mu2 = gaussian.mu.mul(&gaussian.mu)?;
    let s2 = gaussian.sigma.mul(&gaussian.sigma)?;
    let log_s = gaussian.sigma.ln()?;
    let inner = mu2.add(&s2)?.add_const(-1.0).sub(&log_s.scale(2.0))?;
    Ok(inner.sum_all().scale(0.5))
}

/// `L_prompt = L_div + kl_mean`, `L_stage1 = L_contrast + alpha * L_prompt`.
pub fn stage1_loss(
    l_contrast: &Tensor,
    l_div: &Tensor,
    kl_mean: &Tensor,
    alpha: f64,
) -> Result<(Tensor, Tensor)> {
    if !(alpha >= 0.0) {
        return Err(Error::Value(format!("alpha must be >= 0, got {alpha}")));
    }
    let l_prompt = l_div.add(kl_mean)?;
    let l_stage1 = l_contrast.add(&l_prompt.scale(alpha))?;
    Ok((l_stage1, l_prompt))
}

/// Mean squared difference against a frozen teacher.
pub fn distill_mse(sess: &mut Session, student: &Tensor, teacher: &DenseArray) -> Result<Tensor> {
    let (tr, tc) = teacher.dims2()?;
    if student.rows() != tr || student.cols() != tc {
        return Err(Error::Dimension(format!(
            "distillation [{}x{}] vs teacher [{tr}x{tc}]",
            student.rows(),
            student.cols()
        )));
    }
    let t = sess.constant(teacher.clone());
    let diff = student.sub(&t)?;
    Ok(diff.mul(&diff)?.mean_all())
}

/// `L_stage2 = L_mse + lambda * L_3D`.
pub fn stage2_loss(l_mse: &Tensor, l_3d: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::Value(format!("lambda must be >= 0, got {lambda}")));
    }
    l_mse.add(&l_3d.scale(lambda))
}

/// Every named scalar of one optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub step: u64,
    pub epoch: u64,
    pub l_contrast: f64,
    pub l_div: f64,
    pub kl_mean: f64,
    pub l_prompt: f64,
    pub l_stage1: f64,
    pub alpha: f64,
    pub l_mse: f64,
    pub l_3d: f64,
    pub lambda: f64,
    pub l_stage2: f64,
    pub tau: f64,
}

impl LossBreakdown {
    /// Checks the composition identities against recomputation.
    pub fn verify(&self) -> Result<()> {
        let checks = [
            ("l_prompt", self.l_prompt, self.l_div + self.kl_mean),
            (
                "l_stage1",
                self.l_stage1,
                self.l_contrast + self.alpha * self.l_prompt,
            ),
            (
                "l_stage2",
                self.l_stage2,
                self.l_mse + self.lambda * self.l_3d,
            ),
        ];
        for (name, stored, recomputed) in checks {
            if (stored - recomputed).abs() > 1e-12 {
                return Err(Error::Value(format!(
                    "loss identity violated for {name}: {stored} vs {recomputed}"
                )));
            }
        }
        Ok(())
    }
}
