//! Small neural building blocks: linear maps and one-hidden-layer MLPs.

use crate::error::Result;
use crate::numerics::param::{ParamSet, Parameter, Session};
use crate::numerics::rng::{normal_array, Prng};
use crate::numerics::tape::Tensor;

/// A bias-free linear map `y = x Wᵀ` with `W` stored as `[out x in]`.
#[derive(Clone, Debug)]
pub struct LinearWeights {
    pub w: String,
}

impl LinearWeights {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        out_dim: usize,
        in_dim: usize,
        scale: f64,
        rng: &mut Prng,
    ) -> Result<Self> {
        params.insert(Parameter::new(
            name.to_string(),
            normal_array(vec![out_dim, in_dim], scale, rng),
        ))?;
        Ok(LinearWeights {
            w: name.to_string(),
        })
    }

    pub fn forward(&self, sess: &mut Session, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let w = sess.lease(params, &self.w)?;
        x.matmul_nt(&w)
    }
}

/// `y = W2 tanh(W1 x + b1) + b2`, applied row-wise.
#[derive(Clone, Debug)]
pub struct MlpWeights {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

impl MlpWeights {
    /// Hidden width equals the output width; biases start at zero so an
    /// all-zero weight init maps everything to zero.
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        out_dim: usize,
        in_dim: usize,
        scale: f64,
        rng: &mut Prng,
    ) -> Result<Self> {
        let hidden = out_dim;
        let names = MlpWeights {
            w1: format!("{prefix}/w1"),
            b1: format!("{prefix}/b1"),
            w2: format!("{prefix}/w2"),
            b2: format!("{prefix}/b2"),
        };
        params.insert(Parameter::new(
            names.w1.clone(),
            normal_array(vec![hidden, in_dim], scale, rng),
        ))?;
        params.insert(Parameter::new(
            names.b1.clone(),
            crate::numerics::array::DenseArray::zeros(vec![1, hidden]),
        ))?;
        params.insert(Parameter::new(
            names.w2.clone(),
            normal_array(vec![out_dim, hidden], scale, rng),
        ))?;
        params.insert(Parameter::new(
            names.b2.clone(),
            crate::numerics::array::DenseArray::zeros(vec![1, out_dim]),
        ))?;
        Ok(names)
    }

    pub fn forward(&self, sess: &mut Session, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let w1 = sess.lease(params, &self.w1)?;
        let b1 = sess.lease(params, &self.b1)?;
        let w2 = sess.lease(params, &self.w2)?;
        let b2 = sess.lease(params, &self.b2)?;
        let h = x.matmul_nt(&w1)?.add_row(&b1)?.tanh();
        h.matmul_nt(&w2)?.add_row(&b2)
    }
}
