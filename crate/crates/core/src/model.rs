//! The full pretraining model: both encoders plus every objective head,
//! sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{sample_bag, Dataset};
use crate::encoders::{EncoderConfig, Encoders};
use crate::error::{Error, Result};
use crate::objectives::Heads;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub retention_depth: usize,
    pub d_z: usize,
    pub clusters: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), retention_depth: 2, d_z: 32, clusters: 8 }
    }
}

impl ModelConfig {
    /// Encoder input sizes taken from a dataset, everything else default.
    pub fn for_dataset(ds: &Dataset) -> Self {
        let mut cfg = Self::default();
        cfg.encoder.d_p = ds.d_p;
        cfg.encoder.k_genes = ds.k_genes;
        cfg.encoder.gene_groups = cfg.encoder.gene_groups.min(ds.k_genes);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.retention_depth == 0 || self.d_z == 0 || self.clusters < 2 {
            return Err(Error::Config("retention_depth and d_z must be positive and clusters at least 2".into()));
        }
        if self.encoder.n_fixed < 2 || self.encoder.gene_groups < 2 {
            return Err(Error::Config("masked modeling needs n_fixed and gene_groups of at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Mirror {
    pub cfg: ModelConfig,
    pub encoders: Encoders,
    pub heads: Heads,
}

impl Mirror {
    /// Builds the model and a freshly initialized parameter store.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let encoders = Encoders::new(&cfg.encoder, &mut store, &mut init)?;
        let e = &cfg.encoder;
        let heads = Heads::new(
            &mut store,
            &mut init,
            e.d,
            e.d_t,
            e.gene_groups,
            e.heads,
            cfg.retention_depth,
            cfg.d_z,
            cfg.clusters,
        );
        Ok((Self { cfg: cfg.clone(), encoders, heads }, store))
    }

    /// Unit-norm aligned embeddings of class tokens and transcriptomics vectors.
    pub fn align_vars(&self, g: &mut Graph<'_>, s_cls: Var, t_vec: Var) -> (Var, Var) {
        let s = self.heads.align.slide.forward(g, s_cls);
        let s = g.l2_normalize_rows(s);
        let t = self.heads.align.rna.forward(g, t_vec);
        let t = g.l2_normalize_rows(t);
        (s, t)
    }

    pub fn align_embeddings(&self, store: &ParamStore, s_cls: &Tensor, t_vec: &Tensor) -> (Tensor, Tensor) {
        let mut g = Graph::new(store);
        let s = g.constant(s_cls.clone());
        let t = g.constant(t_vec.clone());
        let (sa, ta) = self.align_vars(&mut g, s, t);
        (g.value(sa).clone(), g.value(ta).clone())
    }

    /// Encoder outputs of a batch without building gradients beyond the tape.
    pub fn encode(&self, store: &ParamStore, batch: &Batch) -> EncodedBatch {
        let mut g = Graph::new(store);
        let out = self.encoders.forward(&mut g, &batch.bags, &batch.segments, &batch.expr);
        EncodedBatch {
            s_tokens: g.value(out.s_tokens).clone(),
            s_cls: g.value(out.s_cls).clone(),
            t_vec: g.value(out.t_vec).clone(),
            t_tokens: g.value(out.t_tokens).clone(),
        }
    }
}

/// Encoder outputs of a batch as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub s_tokens: Tensor,
    pub s_cls: Tensor,
    pub t_vec: Tensor,
    pub t_tokens: Tensor,
}

/// Stacked model inputs of several samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[Σn × D_p]`
    pub bags: Tensor,
    pub segments: Vec<usize>,
    /// `[B × K]`
    pub expr: Tensor,
    /// Patch coordinates of every sampled row, per sample.
    pub coords: Vec<Vec<(i32, i32)>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Samples `n_fixed` patches per listed sample. Sample `i` of the dataset
/// uses bag seed `bag_seed(i)`.
pub fn make_batch(ds: &Dataset, indices: &[usize], n_fixed: usize, bag_seed: impl Fn(usize) -> u64) -> Result<Batch> {
    let mut parts = Vec::with_capacity(indices.len());
    let mut coords = Vec::with_capacity(indices.len());
    let mut expr = Tensor::zeros(indices.len(), ds.k_genes);
    for (row, &i) in indices.iter().enumerate() {
        let sample = &ds.samples[i];
        let sampled = sample_bag(&sample.bag, n_fixed, bag_seed(i))?;
        parts.push(sampled.features);
        coords.push(sampled.coords);
        for (o, &v) in expr.row_mut(row).iter_mut().zip(&sample.rna.values) {
            *o = f64::from(v);
        }
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Batch { bags: Tensor::vcat(&refs), segments: vec![n_fixed; indices.len()], expr, coords })
}

/// Base of the bag seeds used whenever evaluation needs a fixed patch subset.
pub const EVAL_BAG_SEED: u64 = 0x5EED_0E7A;

/// Evaluation bag seed of a sample, keyed by its id (FNV-1a) so the patch
/// subset does not depend on where the sample sits in a dataset.
pub fn eval_bag_seed(sample_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sample_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ EVAL_BAG_SEED
}

/// Batch of the listed samples with their evaluation bag seeds.
pub fn eval_batch(ds: &Dataset, indices: &[usize], n_fixed: usize) -> Result<Batch> {
    make_batch(ds, indices, n_fixed, |i| eval_bag_seed(ds.samples[i].id()))
}
