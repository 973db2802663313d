//! Adaptive prompt bank: learnable scenario descriptors composed with
//! an instance-conditioned object token.
//!
//! Each category owns `N_p` templates of `L` descriptors. The object
//! token — a learned projection of the RoI visual feature — is inserted
//! at a per-template position drawn once at construction and frozen, so
//! template layouts are stable across training while varying across the
//! bank.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{toy_encode_tokens, EmbeddingFile, PromptQuery, TokenInput, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::array::DenseArray;
use crate::numerics::nn::LinearWeights;
use crate::numerics::param::{ParamSet, Parameter, Session};
use crate::numerics::rng::{normal_array, Prng};
use crate::numerics::tape::{vstack, Tensor};
use rand::seq::index::sample as index_sample;
use rand::Rng;

/// Per-category slice of the bank: one descriptor matrix plus frozen
/// object-token positions.
#[derive(Clone, Debug)]
pub struct CategoryBank {
    pub category: String,
    /// Parameter name of the `[N_p * L x D]` descriptor matrix; row
    /// `t * L + l` is descriptor `a_l` of template `t`.
    pub descriptors: String,
    /// Insertion slot of the object token per template, in `0..=L`.
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PromptBank {
    pub categories: Vec<CategoryBank>,
    pub n_templates: usize,
    pub template_len: usize,
    pub dim: usize,
}

impl PromptBank {
    pub fn category(&self, name: &str) -> Result<&CategoryBank> {
        self.categories
            .iter()
            .find(|c| c.category == name)
            .ok_or_else(|| Error::Category(name.to_string()))
    }
}

/// Builds a bank with seeded zero-mean Gaussian descriptors scaled by
/// `init_scale` and uniformly drawn, frozen token positions.
pub fn build_bank(
    params: &mut ParamSet,
    categories: &[String],
    n_templates: usize,
    template_len: usize,
    dim: usize,
    init_scale: f64,
    rng: &mut Prng,
) -> Result<PromptBank> {
    if n_templates < 1 || template_len < 1 || dim < 1 {
        return Err(Error::Construction(format!(
            "bank needs n_templates, template_len, dim >= 1, got {n_templates}, {template_len}, {dim}"
        )));
    }
    if !(init_scale >= 0.0) {
        return Err(Error::Construction(format!(
            "init_scale must be >= 0, got {init_scale}"
        )));
    }
    let mut banks = Vec::with_capacity(categories.len());
    for cat in categories {
        if banks.iter().any(|b: &CategoryBank| &b.category == cat) {
            return Err(Error::Construction(format!("duplicate category '{cat}'")));
        }
        let name = format!("apb/{cat}/descriptors");
        let value = normal_array(vec![n_templates * template_len, dim], init_scale, rng);
        params.insert(Parameter::new(name.clone(), value))?;
        let positions: Vec<usize> = (0..n_templates)
            .map(|_| rng.random_range(0..=template_len))
            .collect();
        banks.push(CategoryBank {
            category: cat.clone(),
            descriptors: name,
            positions,
        });
    }
    Ok(PromptBank {
        categories: banks,
        n_templates,
        template_len,
        dim,
    })
}

/// All prompt templates of one RoI, encoded.
#[derive(Clone, Debug)]
pub struct InstancePromptSet {
    pub roi_id: u64,
    pub category: String,
    /// `[1 x D]` object token.
    pub object_token: Tensor,
    /// Encoded queries `q_t`, one per template.
    pub queries: Vec<PromptQuery>,
    /// `[N_p x D]` stack of all queries (the self-attention context).
    pub query_matrix: Tensor,
    /// Object-token slot per template (copied from the bank).
    pub positions: Vec<usize>,
}

/// Composes the templates of `roi`'s category with its object token and
/// encodes each one. The object token is a learned projection of the
/// RoI visual feature, inserted at the template's frozen position.
pub fn instantiate_prompts(
    sess: &mut Session,
    params: &ParamSet,
    bank: &PromptBank,
    roi_id: u64,
    category: &str,
    roi_feature: &DenseArray,
    o_projection: &LinearWeights,
    vocab: &Vocabulary,
) -> Result<InstancePromptSet> {
    let cat = bank.category(category)?;
    let feat = sess.constant(roi_feature.clone());
    let object_token = o_projection.forward(sess, params, &feat)?;
    let descriptors = sess.lease(params, &cat.descriptors)?;

    let mut queries = Vec::with_capacity(bank.n_templates);
    for t in 0..bank.n_templates {
        let pos = cat.positions[t];
        let mut tokens: Vec<TokenInput> = Vec::with_capacity(bank.template_len + 1);
        for l in 0..bank.template_len {
            if l == pos {
                tokens.push(TokenInput::Continuous(object_token.clone()));
            }
            tokens.push(TokenInput::Continuous(
                descriptors.row(t * bank.template_len + l)?,
            ));
        }
        if pos == bank.template_len {
            tokens.push(TokenInput::Continuous(object_token.clone()));
        }
        debug_assert_eq!(tokens.len(), bank.template_len + 1);
        queries.push(toy_encode_tokens(
            sess,
            &tokens,
            vocab,
            (roi_id as usize, t),
        )?);
    }
    let query_matrix = vstack(&queries.iter().map(|q| q.q.clone()).collect::<Vec<_>>())?;
    Ok(InstancePromptSet {
        roi_id,
        category: category.to_string(),
        object_token,
        queries,
        query_matrix,
        positions: cat.positions.clone(),
    })
}

/// Uniformly samples `k` distinct template indices.
pub fn sample_prompt_subset(
    set: &InstancePromptSet,
    k: usize,
    rng: &mut Prng,
) -> Result<Vec<usize>> {
    let n = set.queries.len();
    if k > n {
        return Err(Error::Size(format!("subset of {k} from {n} templates")));
    }
    Ok(index_sample(rng, n, k).iter().collect())
}

/// Bank checkpoint keys: `cat/<name>/t<idx>/a<l>`.
pub fn bank_to_embedding_file(bank: &PromptBank, params: &ParamSet) -> Result<EmbeddingFile> {
    let mut file = EmbeddingFile::new(bank.dim);
    for cat in &bank.categories {
        let desc = &params.get(&cat.descriptors)?.value;
        for t in 0..bank.n_templates {
            for l in 0..bank.template_len {
                file.push(
                    format!("cat/{}/t{}/a{}", cat.category, t, l),
                    desc.row(t * bank.template_len + l).to_vec(),
                )?;
            }
        }
    }
    Ok(file)
}

/// Positions sidecar for the bank checkpoint.
#[derive(Serialize, Deserialize)]
pub struct BankSidecar {
    pub n_templates: usize,
    pub template_len: usize,
    pub dim: usize,
    pub positions: Vec<(String, Vec<usize>)>,
}

pub fn save_bank(
    bank: &PromptBank,
    params: &ParamSet,
    emb_path: &Path,
    sidecar_path: &Path,
) -> Result<()> {
    let file = bank_to_embedding_file(bank, params)?;
    crate::encoders::save_embedding_file(emb_path, &file)?;
    let sidecar = BankSidecar {
        n_templates: bank.n_templates,
        template_len: bank.template_len,
        dim: bank.dim,
        positions: bank
            .categories
            .iter()
            .map(|c| (c.category.clone(), c.positions.clone()))
            .collect(),
    };
    std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Restores a bank checkpoint into a fresh parameter set.
pub fn load_bank(
    params: &mut ParamSet,
    emb_path: &Path,
    sidecar_path: &Path,
) -> Result<PromptBank> {
    let file = crate::encoders::load_embedding_file(emb_path)?;
    let sidecar: BankSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
    let mut categories = Vec::new();
    for (cat, positions) in &sidecar.positions {
        if positions.len() != sidecar.n_templates {
            return Err(Error::Parse(format!(
                "sidecar for '{cat}' has {} positions, expected {}",
                positions.len(),
                sidecar.n_templates
            )));
        }
        let mut rows = Vec::with_capacity(sidecar.n_templates * sidecar.template_len);
        for t in 0..sidecar.n_templates {
            for l in 0..sidecar.template_len {
                let key = format!("cat/{cat}/t{t}/a{l}");
                let row = file
                    .get(&key)
                    .ok_or_else(|| Error::Parse(format!("bank checkpoint misses key '{key}'")))?;
                rows.push(row.to_vec());
            }
        }
        let name = format!("apb/{cat}/descriptors");
        params.insert(Parameter::new(name.clone(), DenseArray::from_rows(&rows)?))?;
        categories.push(CategoryBank {
            category: cat.clone(),
            descriptors: name,
            positions: positions.clone(),
        });
    }
    Ok(PromptBank {
        categories,
        n_templates: sidecar.n_templates,
        template_len: sidecar.template_len,
        dim: sidecar.dim,
    })
}
