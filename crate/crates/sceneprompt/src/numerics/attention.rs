//! Single-head scaled dot-product attention with learned projections.
//!
//! Both decoders route through this primitive: the mean decoder as
//! self-attention over a prompt set, the variance decoder as
//! cross-attention to visual tokens.

use crate::error::{Error, Result};
use crate::numerics::param::{ParamSet, Parameter, Session};
use crate::numerics::rng::{normal_array, Prng};
use crate::numerics::tape::Tensor;

/// Names of the four projection parameters, each `[D x D]`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: String,
    pub wk: String,
    pub wv: String,
    pub wo: String,
}

impl AttentionWeights {
    /// Registers four seeded `[d x d]` projections under `prefix`.
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        scale: f64,
        rng: &mut Prng,
    ) -> Result<Self> {
        let names = AttentionWeights {
            wq: format!("{prefix}/wq"),
            wk: format!("{prefix}/wk"),
            wv: format!("{prefix}/wv"),
            wo: format!("{prefix}/wo"),
        };
        for name in [&names.wq, &names.wk, &names.wv, &names.wo] {
            params.insert(Parameter::new(
                name.clone(),
                normal_array(vec![d, d], scale, rng),
            ))?;
        }
        Ok(names)
    }
}

/// Scaled dot-product attention.
///
/// `queries` is `[m x D]`, `keys` and `values` are `[n x D]`; the output
/// is `[m x D]`. Every output row is a convex combination of projected
/// value rows, passed through the output projection.
pub fn attention(
    sess: &mut Session,
    params: &ParamSet,
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    weights: &AttentionWeights,
) -> Result<Tensor> {
    if keys.rows() == 0 || values.rows() == 0 {
        return Err(Error::EmptyContext("attention over zero keys".into()));
    }
    if queries.rows() == 0 {
        return Err(Error::EmptyContext("attention with zero queries".into()));
    }
    let d = queries.cols();
    if keys.cols() != d || values.cols() != d {
        return Err(Error::Dimension(format!(
            "attention dims: q {}x{}, k {}x{}, v {}x{}",
            queries.rows(),
            queries.cols(),
            keys.rows(),
            keys.cols(),
            values.rows(),
            values.cols()
        )));
    }
    if keys.rows() != values.rows() {
        return Err(Error::Dimension(format!(
            "attention: {} keys vs {} values",
            keys.rows(),
            values.rows()
        )));
    }
    let wq = sess.lease(params, &weights.wq)?;
    let wk = sess.lease(params, &weights.wk)?;
    let wv = sess.lease(params, &weights.wv)?;
    let wo = sess.lease(params, &weights.wo)?;
    if wq.cols() != d {
        return Err(Error::Dimension(format!(
            "attention projection [{}x{}] incompatible with D = {d}",
            wq.rows(),
            wq.cols()
        )));
    }

    let q = queries.matmul_nt(&wq)?;
    let k = keys.matmul_nt(&wk)?;
    let v = values.matmul_nt(&wv)?;
    let scores = q.matmul_nt(&k)?.scale(1.0 / (d as f64).sqrt());
    let attn = scores.softmax_rows();
    let ctx = attn.matmul(&v)?;
    ctx.matmul_nt(&wo)
}
