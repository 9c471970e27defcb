//! Parameterized layers built on the autodiff tape.

use crate::autodiff::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.fan_in_uniform(d_in, d_out, d_in));
        let bias = store.add(format!("{name}.bias"), init.fan_in_uniform(1, d_out, d_in));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        let b = g.param(self.bias);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(1, d, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, d));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub(crate) fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), d_in, hidden),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block: attention then MLP, each with a residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

pub const MLP_RATIO: usize = 2;

impl Block {
    pub(crate) fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, d: usize, heads: usize) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            qkv: Linear::new(store, init, &format!("{name}.qkv"), d, 3 * d),
            proj: Linear::new(store, init, &format!("{name}.proj"), d, d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), d, MLP_RATIO * d, d),
            heads,
        }
    }

    /// Returns the block output and the attention node (for probability export).
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, segments: &[usize]) -> (Var, Var) {
        let h = self.ln1.forward(g, x);
        let qkv = self.qkv.forward(g, h);
        let attn = g.attention(qkv, segments, self.heads);
        let o = self.proj.forward(g, attn);
        let x = g.add(x, o);
        let h = self.ln2.forward(g, x);
        let h = self.mlp.forward(g, h);
        (g.add(x, h), attn)
    }
}

/// Blocks applied in sequence, followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Stack {
    pub(crate) fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, d: usize, heads: usize, depth: usize) -> Self {
        let blocks = (1..=depth).map(|i| Block::new(store, init, &format!("{name}.block{i}"), d, heads)).collect();
        Self { blocks, norm: LayerNorm::new(store, &format!("{name}.norm"), d) }
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var, segments: &[usize]) -> Var {
        for b in &self.blocks {
            x = b.forward(g, x, segments).0;
        }
        self.norm.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_manual_product() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, &mut Init { rng: &mut rng }, "l", 3, 2);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, xv);
        let w = store.get(lin.weight);
        let b = store.get(lin.bias);
        for c in 0..2 {
            let expect = (0..3).map(|i| x.get(0, i) * w.get(i, c)).sum::<f64>() + b.get(0, c);
            assert!((g.value(y).get(0, c) - expect).abs() < 1e-12);
        }
        assert!(w.data().iter().all(|v| v.abs() <= 1.0 / 3f64.sqrt()));
    }

    #[test]
    fn block_keeps_segments_independent() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = Block::new(&mut store, &mut Init { rng: &mut rng }, "b", 8, 2);
        let a = Tensor::from_vec(3, 8, (0..24).map(|i| (i as f64 * 0.37).sin()).collect());
        let b = Tensor::from_vec(2, 8, (0..16).map(|i| (i as f64 * 0.11).cos()).collect());
        let run = |x: &Tensor, seg: &[usize]| {
            let mut g = Graph::new(&store);
            let xv = g.constant(x.clone());
            let (y, _) = block.forward(&mut g, xv, seg);
            g.value(y).clone()
        };
        let joint = run(&Tensor::vcat(&[&a, &b]), &[3, 2]);
        let alone = run(&a, &[3]);
        for r in 0..3 {
            for c in 0..8 {
                assert!((joint.get(r, c) - alone.get(r, c)).abs() < 1e-12);
            }
        }
    }
}
