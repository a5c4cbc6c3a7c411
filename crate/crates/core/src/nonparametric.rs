//! Cross-attention operator network: the desk-scale experimental model.
//!
//! Source and target prompt samples are embedded into h channels by separate
//! pointwise MLPs, a self-attention layer mixes the 2s prompt tokens into a
//! context, and each query token reads from that context through multi-head
//! cross-attention (queries attend to the prompt only, never to each other).
//! A pointwise output MLP maps back to d dimensions.
//!
//! Architecture choices the reference description leaves open, fixed here:
//! scaled dot-product with divisor √(h/heads), a residual connection around
//! each attention block, and no layer normalization.
//!
//! The whole forward pass is built on the autodiff [`Tape`], so the training
//! loss — mean squared displacement plus λ·MMD²_u against the task's target
//! samples — is differentiable end to end, including the adaptive kernel
//! bandwidth inside the MMD term.

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::mat::Mat;
use crate::mmd::KernelSpec;
use crate::rng::StreamRng;
use crate::tasks::Prompt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NonparametricError {
    #[error("hidden width {0} is not divisible by {1} heads")]
    BadHeadSplit(usize, usize),
    #[error("train sets must have equal sizes: {0} vs {1}")]
    UnequalTrainSets(usize, usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CrossAttnConfig {
    pub dim: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Default prompt length s (the forward pass accepts any s ≥ 1).
    pub prompt_len: usize,
}

impl CrossAttnConfig {
    /// Desk-scale defaults: h=128, 4 heads, s=64, d=2.
    pub fn desk_scale() -> Self {
        CrossAttnConfig { dim: 2, hidden: 128, heads: 4, prompt_len: 64 }
    }

    pub fn validate(&self) -> Result<(), NonparametricError> {
        if self.hidden % self.heads != 0 {
            return Err(NonparametricError::BadHeadSplit(self.hidden, self.heads));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Two-layer pointwise MLP acting on token columns: w2·relu(w1·x + b1) + b2.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// One attention block: stacked per-head query/key/value projections plus
/// the output projection, all h×h.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttnBlock {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonparametricWeights {
    pub config: CrossAttnConfig,
    pub source_embed: Mlp,
    pub target_embed: Mlp,
    pub self_attn: AttnBlock,
    pub cross_attn: AttnBlock,
    pub output: Mlp,
}

fn mlp_random(inp: usize, hidden: usize, out: usize, rng: &mut StreamRng) -> Mlp {
    let mut mat = |r: usize, c: usize, fan_in: usize| {
        let s = (2.0 / fan_in as f64).sqrt();
        let mut m = Mat::zeros(r, c);
        for v in m.data_mut() {
            *v = s * rng.normal();
        }
        m
    };
    Mlp {
        w1: mat(hidden, inp, inp),
        b1: Mat::zeros(hidden, 1),
        w2: mat(out, hidden, hidden),
        b2: Mat::zeros(out, 1),
    }
}

impl NonparametricWeights {
    /// He-style random init; attention output projections start at zero so
    /// both attention blocks begin as the identity (pure residual).
    pub fn init(config: CrossAttnConfig, rng: &mut StreamRng) -> Result<Self, NonparametricError> {
        config.validate()?;
        let (d, h) = (config.dim, config.hidden);
        let attn = |rng: &mut StreamRng| {
            let mut proj = |scale: f64| {
                let mut m = Mat::zeros(h, h);
                for v in m.data_mut() {
                    *v = scale * rng.normal();
                }
                m
            };
            let s = (1.0 / h as f64).sqrt();
            AttnBlock { wq: proj(s), wk: proj(s), wv: proj(s), wo: Mat::zeros(h, h) }
        };
        Ok(NonparametricWeights {
            config,
            source_embed: mlp_random(d, h, h, rng),
            target_embed: mlp_random(d, h, h, rng),
            self_attn: attn(rng),
            cross_attn: attn(rng),
            output: mlp_random(h, h, d, rng),
        })
    }

    fn mats(&self) -> Vec<&Mat> {
        let mlp = |m: &'_ Mlp| [&m.w1, &m.b1, &m.w2, &m.b2].map(|x| x as *const Mat);
        let attn = |a: &'_ AttnBlock| [&a.wq, &a.wk, &a.wv, &a.wo].map(|x| x as *const Mat);
        let ptrs: Vec<*const Mat> = mlp(&self.source_embed)
            .into_iter()
            .chain(mlp(&self.target_embed))
            .chain(attn(&self.self_attn))
            .chain(attn(&self.cross_attn))
            .chain(mlp(&self.output))
            .collect();
        // Safety: the pointers all borrow from self and live as long as the return value
        ptrs.into_iter().map(|p| unsafe { &*p }).collect()
    }

    fn mats_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<*mut Mat> = Vec::with_capacity(20);
        for m in [&mut self.source_embed, &mut self.target_embed] {
            out.extend([&mut m.w1 as *mut Mat, &mut m.b1, &mut m.w2, &mut m.b2]);
        }
        for a in [&mut self.self_attn, &mut self.cross_attn] {
            out.extend([&mut a.wq as *mut Mat, &mut a.wk, &mut a.wv, &mut a.wo]);
        }
        let m = &mut self.output;
        out.extend([&mut m.w1 as *mut Mat, &mut m.b1, &mut m.w2, &mut m.b2]);
        // Safety: the pointers address disjoint fields of self
        out.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    pub fn num_params(&self) -> usize {
        self.mats().iter().map(|m| m.data().len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for m in self.mats() {
            v.extend_from_slice(m.data());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for m in self.mats_mut() {
            let len = m.data().len();
            m.data_mut().copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }
}

/// Node ids of every weight leaf, in the same order as the flat layout.
struct WeightNodes {
    ids: Vec<NodeId>,
}

impl WeightNodes {
    fn make(t: &mut Tape, w: &NonparametricWeights) -> Self {
        let ids = w.mats().into_iter().map(|m| t.leaf(m.clone())).collect();
        WeightNodes { ids }
    }
    // flat layout: 0..4 source mlp, 4..8 target mlp, 8..12 self attn, 12..16 cross attn, 16..20 output mlp
    fn mlp(&self, base: usize) -> (NodeId, NodeId, NodeId, NodeId) {
        (self.ids[base], self.ids[base + 1], self.ids[base + 2], self.ids[base + 3])
    }
}

fn tape_mlp(
    t: &mut Tape,
    (w1, b1, w2, b2): (NodeId, NodeId, NodeId, NodeId),
    x: NodeId,
) -> Result<NodeId, AutodiffError> {
    let a = t.matmul(w1, x)?;
    let a = t.add_bias(a, b1)?;
    let a = t.relu(a);
    let a = t.matmul(w2, a)?;
    t.add_bias(a, b2)
}

/// Multi-head scaled-dot-product attention with residual connection.
/// `queries_in` (h×m) attends to `context` (h×T); heads are contiguous row
/// blocks selected by constant block matrices so that concatenation stays
/// inside the tape's op set.
fn tape_attention(
    t: &mut Tape,
    cfg: &CrossAttnConfig,
    block: (NodeId, NodeId, NodeId, NodeId),
    queries_in: NodeId,
    context: NodeId,
) -> Result<NodeId, AutodiffError> {
    let (wq, wk, wv, wo) = block;
    let h = cfg.hidden;
    let hd = cfg.head_dim();
    let q_all = t.matmul(wq, queries_in)?;
    let k_all = t.matmul(wk, context)?;
    let v_all = t.matmul(wv, context)?;

    let mut concat: Option<NodeId> = None;
    for head in 0..cfg.heads {
        // selector picking this head's row block, and its transpose to
        // scatter the head output back into h rows
        let mut sel = Mat::zeros(hd, h);
        for r in 0..hd {
            sel.set(r, head * hd + r, 1.0);
        }
        let scatter = t.constant(sel.transpose());
        let sel = t.constant(sel);

        let qh = t.matmul(sel, q_all)?;
        let kh = t.matmul(sel, k_all)?;
        let vh = t.matmul(sel, v_all)?;
        let kt = t.transpose(kh);
        let scores = t.matmul(kt, qh)?; // T×m
        let scores = t.scale(scores, 1.0 / (hd as f64).sqrt());
        let attn = t.softmax_columns(scores);
        let out = t.matmul(vh, attn)?; // hd×m
        let placed = t.matmul(scatter, out)?; // h×m
        concat = Some(match concat {
            None => placed,
            Some(acc) => t.add(acc, placed)?,
        });
    }
    let mixed = t.matmul(wo, concat.expect("at least one head"))?;
    t.add(queries_in, mixed) // residual
}

/// Full forward graph: returns the prediction node (d×m, tokens as columns).
fn build_forward(
    t: &mut Tape,
    w: &NonparametricWeights,
    nodes: &WeightNodes,
    prompt: &Prompt,
    queries: &Mat,
) -> Result<NodeId, AutodiffError> {
    let cfg = &w.config;
    let s = prompt.source_samples.rows();
    let src = t.constant(prompt.source_samples.transpose()); // d×s
    let tgt = t.constant(prompt.target_samples.transpose());
    let qin = t.constant(queries.transpose()); // d×m

    let es = tape_mlp(t, nodes.mlp(0), src)?; // h×s
    let et = tape_mlp(t, nodes.mlp(4), tgt)?; // h×s

    // column-concatenate [Es | Et] via constant placement matrices
    let mut left = Mat::zeros(s, 2 * s);
    let mut right = Mat::zeros(s, 2 * s);
    for i in 0..s {
        left.set(i, i, 1.0);
        right.set(i, s + i, 1.0);
    }
    let left = t.constant(left);
    let right = t.constant(right);
    let es_w = t.matmul(es, left)?;
    let et_w = t.matmul(et, right)?;
    let c0 = t.add(es_w, et_w)?; // h×2s

    let ctx = tape_attention(t, cfg, (nodes.ids[8], nodes.ids[9], nodes.ids[10], nodes.ids[11]), c0, c0)?;
    let eq = tape_mlp(t, nodes.mlp(0), qin)?; // queries use the source embedding
    let hq = tape_attention(
        t,
        cfg,
        (nodes.ids[12], nodes.ids[13], nodes.ids[14], nodes.ids[15]),
        eq,
        ctx,
    )?;
    tape_mlp(t, nodes.mlp(16), hq) // d×m
}

/// Map query points through the operator conditioned on the prompt.
pub fn np_forward(
    w: &NonparametricWeights,
    prompt: &Prompt,
    queries: &Mat,
) -> Result<Mat, NonparametricError> {
    w.config.validate()?;
    let mut t = Tape::new();
    let nodes = WeightNodes::make(&mut t, w);
    let pred = build_forward(&mut t, w, &nodes, prompt, queries)?;
    Ok(t.value(pred).transpose())
}

/// Per-task empirical risk: (1/n)Σ‖ŷⱼ − xⱼ‖² + λ·MMD²_u(ŷ, train_targets).
pub fn np_loss(
    w: &NonparametricWeights,
    prompt: &Prompt,
    train_sources: &Mat,
    train_targets: &Mat,
    lambda: f64,
    kernel: &KernelSpec,
) -> Result<f64, NonparametricError> {
    let (v, _, _) = np_loss_terms(w, prompt, train_sources, train_targets, lambda, kernel, false)?;
    Ok(v)
}

/// Loss plus flat gradient, for the training loop.
pub fn np_loss_grad(
    w: &NonparametricWeights,
    prompt: &Prompt,
    train_sources: &Mat,
    train_targets: &Mat,
    lambda: f64,
    kernel: &KernelSpec,
) -> Result<(f64, Vec<f64>), NonparametricError> {
    let (v, g, _) = np_loss_terms(w, prompt, train_sources, train_targets, lambda, kernel, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// Loss with its two terms reported separately: (total, transport, mmd).
pub fn np_loss_split(
    w: &NonparametricWeights,
    prompt: &Prompt,
    train_sources: &Mat,
    train_targets: &Mat,
    lambda: f64,
    kernel: &KernelSpec,
) -> Result<(f64, f64, f64), NonparametricError> {
    let (v, _, (tr, mmd)) =
        np_loss_terms(w, prompt, train_sources, train_targets, lambda, kernel, false)?;
    Ok((v, tr, mmd))
}

#[allow(clippy::type_complexity)]
fn np_loss_terms(
    w: &NonparametricWeights,
    prompt: &Prompt,
    train_sources: &Mat,
    train_targets: &Mat,
    lambda: f64,
    kernel: &KernelSpec,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>, (f64, f64)), NonparametricError> {
    let n = train_sources.rows();
    if n != train_targets.rows() {
        return Err(NonparametricError::UnequalTrainSets(n, train_targets.rows()));
    }
    w.config.validate()?;
    let mut t = Tape::new();
    let nodes = WeightNodes::make(&mut t, w);
    let pred_cols = build_forward(&mut t, w, &nodes, prompt, train_sources)?; // d×n
    let pred_rows = t.transpose(pred_cols); // n×d

    // transport cost (1/n)Σ‖ŷⱼ − xⱼ‖²
    let x = t.constant(train_sources.clone());
    let disp = t.sub(pred_rows, x)?;
    let sq = t.frob_sq(disp);
    let transport = t.scale(sq, 1.0 / n as f64);

    let mmd = t.mmd2_u_loss(pred_rows, train_targets, kernel)?;
    let penalty = t.scale(mmd, lambda);
    let total = t.add(transport, penalty)?;

    let grad = if want_grad {
        t.backward(total)?;
        let mut g = Vec::with_capacity(w.num_params());
        for &id in &nodes.ids {
            g.extend_from_slice(t.grad(id).data());
        }
        Some(g)
    } else {
        None
    };
    Ok((
        t.value(total).get(0, 0),
        grad,
        (t.value(transport).get(0, 0), t.value(mmd).get(0, 0)),
    ))
}
