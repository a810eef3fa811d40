//! Pre-norm decoder-only transformer with learned positional embeddings.
//!
//! Parameters live in one flat `Vec<f64>`; [`ParamLayout`] names the ranges.
//! The layout order is also the checkpoint blob order:
//!
//! ```text
//! tok_emb   [vocab, d]
//! pos_emb   [ctx, d]
//! per layer l:
//!   ln1.g [d]  ln1.b [d]
//!   attn.w_qkv [d, 3d]  attn.b_qkv [3d]
//!   attn.w_o [d, d]     attn.b_o [d]
//!   ln2.g [d]  ln2.b [d]
//!   mlp.w_fc [d, ff]    mlp.b_fc [ff]
//!   mlp.w_proj [ff, d]  mlp.b_proj [d]
//! ln_f.g [d]  ln_f.b [d]
//! head      [d, vocab]
//! ```
//!
//! All weight matrices are row-major with the input dimension first, so a
//! projection is `x · W`.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, Mat};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
}

impl LmConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_context: 160,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Argument(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Argument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

/// Named ranges into the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) head: usize,
    tensors: Vec<(String, Range<usize>, Vec<usize>)>,
    total: usize,
}

impl ParamLayout {
    pub fn new(c: &LmConfig) -> Self {
        let (v, d, ff, ctx) = (c.vocab_size, c.d_model, c.d_ff, c.max_context);
        let mut tensors = Vec::new();
        let mut next = 0usize;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            let start = next;
            next += len;
            tensors.push((name, start..next, shape));
            start
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![ctx, d]);
        let mut layers = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.g"), vec![d]),
                ln1_b: push(p("ln1.b"), vec![d]),
                w_qkv: push(p("attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: push(p("attn.b_qkv"), vec![3 * d]),
                w_o: push(p("attn.w_o"), vec![d, d]),
                b_o: push(p("attn.b_o"), vec![d]),
                ln2_g: push(p("ln2.g"), vec![d]),
                ln2_b: push(p("ln2.b"), vec![d]),
                w_fc: push(p("mlp.w_fc"), vec![d, ff]),
                b_fc: push(p("mlp.b_fc"), vec![ff]),
                w_proj: push(p("mlp.w_proj"), vec![ff, d]),
                b_proj: push(p("mlp.b_proj"), vec![d]),
            });
        }
        let lnf_g = push("ln_f.g".into(), vec![d]);
        let lnf_b = push("ln_f.b".into(), vec![d]);
        let head = push("head".into(), vec![d, v]);
        ParamLayout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            head,
            tensors,
            total: next,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// `(name, range, shape)` for every tensor, in blob order.
    pub fn tensors(&self) -> &[(String, Range<usize>, Vec<usize>)] {
        &self.tensors
    }
}

#[derive(Debug, Clone)]
pub struct LmModel {
    config: LmConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

/// Which residual-stream state to read hidden vectors from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSel {
    /// Output of block `i - 1`; `Index(0)` is the embedding sum.
    Index(usize),
    /// Output of the final block.
    Last,
}

impl std::str::FromStr for LayerSel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "last" {
            return Ok(LayerSel::Last);
        }
        s.parse::<usize>()
            .map(LayerSel::Index)
            .map_err(|_| Error::Argument(format!("layer must be an index or \"last\", got {s:?}")))
    }
}

struct LayerCache {
    x_in: Vec<f64>,
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    h2: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
}

/// Activations of one forward pass, kept for backprop and hidden-state reads.
pub struct ForwardPass {
    len: usize,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    hf: Vec<f64>,
    logits: Vec<f64>,
}

impl ForwardPass {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Row-major `len × vocab` logits.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn into_logits(self) -> Vec<f64> {
        self.logits
    }

    /// Row-major `len × d_model` residual stream at the selected depth.
    pub fn hidden(&self, sel: LayerSel) -> Result<&[f64]> {
        let n = self.layers.len();
        match sel {
            LayerSel::Last => Ok(&self.x_final),
            LayerSel::Index(i) if i < n => Ok(&self.layers[i].x_in),
            LayerSel::Index(i) if i == n => Ok(&self.x_final),
            LayerSel::Index(i) => Err(Error::Layer {
                layer: i,
                n_layers: n,
            }),
        }
    }
}

impl LmModel {
    /// All parameters zero, layer-norm gains one. Every position then yields
    /// uniform next-token probabilities.
    pub fn zeros(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.total()];
        let d = config.d_model;
        for l in &layout.layers {
            params[l.ln1_g..l.ln1_g + d].fill(1.0);
            params[l.ln2_g..l.ln2_g + d].fill(1.0);
        }
        params[layout.lnf_g..layout.lnf_g + d].fill(1.0);
        Ok(LmModel {
            config,
            layout,
            params,
        })
    }

    /// GPT-2 style init: N(0, 0.02) weights, residual projections scaled by
    /// `1/sqrt(2·n_layers)`, zero biases, unit layer-norm gains.
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = seeding::rng(seed, "lm-init", 0);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let resid = Normal::new(0.0, resid_std).expect("valid std");
        let (v, d, ff, ctx) = (config.vocab_size, config.d_model, config.d_ff, config.max_context);
        let layout = model.layout.clone();
        let mut fill = |start: usize, len: usize, dist: &Normal<f64>, rng: &mut _| {
            for p in &mut model.params[start..start + len] {
                *p = dist.sample(rng);
            }
        };
        fill(layout.tok_emb, v * d, &normal, &mut rng);
        fill(layout.pos_emb, ctx * d, &normal, &mut rng);
        for l in &layout.layers {
            fill(l.w_qkv, d * 3 * d, &normal, &mut rng);
            fill(l.w_o, d * d, &resid, &mut rng);
            fill(l.w_fc, d * ff, &normal, &mut rng);
            fill(l.w_proj, ff * d, &resid, &mut rng);
        }
        fill(layout.head, d * v, &normal, &mut rng);
        Ok(model)
    }

    pub fn from_params(config: LmConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::Argument(format!(
                "expected {} parameters, got {}",
                layout.total(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Argument("non-finite parameter".into()));
        }
        Ok(LmModel {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    /// Randomize every parameter, including biases and norms. Test helper for
    /// exercising all gradient paths.
    pub fn randomize_all(&mut self, rng: &mut impl Rng, scale: f64) {
        for p in &mut self.params {
            *p = rng.random_range(-scale..scale);
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.max_context {
            return Err(Error::Context {
                len: ids.len(),
                max: self.config.max_context,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Argument(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits for every position of `ids`, shape `len × vocab`.
    pub fn forward(&self, ids: &[u32]) -> Result<Vec<f64>> {
        Ok(self.forward_pass(ids)?.into_logits())
    }

    pub fn forward_pass(&self, ids: &[u32]) -> Result<ForwardPass> {
        self.check_ids(ids)?;
        let c = &self.config;
        let (t_len, d, ff, v, nh) = (ids.len(), c.d_model, c.d_ff, c.vocab_size, c.n_heads);
        let hd = c.head_dim();
        let p = &self.params;
        let lay = &self.layout;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x = vec![0.0; t_len * d];
        for (t, &id) in ids.iter().enumerate() {
            let te = &p[lay.tok_emb + id as usize * d..][..d];
            let pe = &p[lay.pos_emb + t * d..][..d];
            for j in 0..d {
                x[t * d + j] = te[j] + pe[j];
            }
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for lo in &lay.layers {
            let x_in = x;
            let mut ln1_xhat = vec![0.0; t_len * d];
            let mut ln1_rstd = vec![0.0; t_len];
            let mut h1 = vec![0.0; t_len * d];
            ops::layer_norm(
                &x_in,
                d,
                &p[lo.ln1_g..][..d],
                &p[lo.ln1_b..][..d],
                &mut ln1_xhat,
                &mut ln1_rstd,
                &mut h1,
            );

            let mut qkv = vec![0.0; t_len * 3 * d];
            ops::gemm(t_len, d, 3 * d, 1.0, &h1, Mat::rows(d), p, Mat::at(lo.w_qkv, 3 * d), 0.0, &mut qkv, Mat::rows(3 * d));
            ops::add_bias(&mut qkv, &p[lo.b_qkv..][..3 * d]);

            let mut probs = vec![0.0; nh * t_len * t_len];
            let mut att = vec![0.0; t_len * d];
            for h in 0..nh {
                let s = &mut probs[h * t_len * t_len..][..t_len * t_len];
                ops::gemm(
                    t_len, hd, t_len, scale,
                    &qkv, Mat::at(h * hd, 3 * d),
                    &qkv, Mat::t(d + h * hd, 3 * d),
                    0.0, s, Mat::rows(t_len),
                );
                for i in 0..t_len {
                    let row = &mut s[i * t_len..(i + 1) * t_len];
                    let max = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for r in &mut row[..=i] {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    for r in &mut row[..=i] {
                        *r /= sum;
                    }
                    row[i + 1..].fill(0.0);
                }
                ops::gemm(
                    t_len, t_len, hd, 1.0,
                    s, Mat::rows(t_len),
                    &qkv, Mat::at(2 * d + h * hd, 3 * d),
                    0.0, &mut att, Mat::at(h * hd, d),
                );
            }

            let mut x_mid = x_in.clone();
            ops::gemm(t_len, d, d, 1.0, &att, Mat::rows(d), p, Mat::at(lo.w_o, d), 1.0, &mut x_mid, Mat::rows(d));
            ops::add_bias(&mut x_mid, &p[lo.b_o..][..d]);

            let mut ln2_xhat = vec![0.0; t_len * d];
            let mut ln2_rstd = vec![0.0; t_len];
            let mut h2 = vec![0.0; t_len * d];
            ops::layer_norm(
                &x_mid,
                d,
                &p[lo.ln2_g..][..d],
                &p[lo.ln2_b..][..d],
                &mut ln2_xhat,
                &mut ln2_rstd,
                &mut h2,
            );
            let mut pre_act = vec![0.0; t_len * ff];
            ops::gemm(t_len, d, ff, 1.0, &h2, Mat::rows(d), p, Mat::at(lo.w_fc, ff), 0.0, &mut pre_act, Mat::rows(ff));
            ops::add_bias(&mut pre_act, &p[lo.b_fc..][..ff]);
            let act: Vec<f64> = pre_act.iter().map(|&z| ops::gelu(z)).collect();

            let mut x_out = x_mid.clone();
            ops::gemm(t_len, ff, d, 1.0, &act, Mat::rows(ff), p, Mat::at(lo.w_proj, d), 1.0, &mut x_out, Mat::rows(d));
            ops::add_bias(&mut x_out, &p[lo.b_proj..][..d]);

            layers.push(LayerCache {
                x_in,
                ln1_xhat,
                ln1_rstd,
                h1,
                qkv,
                probs,
                att,
                ln2_xhat,
                ln2_rstd,
                h2,
                pre_act,
                act,
            });
            x = x_out;
        }

        let x_final = x;
        let mut lnf_xhat = vec![0.0; t_len * d];
        let mut lnf_rstd = vec![0.0; t_len];
        let mut hf = vec![0.0; t_len * d];
        ops::layer_norm(
            &x_final,
            d,
            &p[lay.lnf_g..][..d],
            &p[lay.lnf_b..][..d],
            &mut lnf_xhat,
            &mut lnf_rstd,
            &mut hf,
        );
        let mut logits = vec![0.0; t_len * v];
        ops::gemm(t_len, d, v, 1.0, &hf, Mat::rows(d), p, Mat::at(lay.head, v), 0.0, &mut logits, Mat::rows(v));

        Ok(ForwardPass {
            len: t_len,
            layers,
            x_final,
            lnf_xhat,
            lnf_rstd,
            hf,
            logits,
        })
    }

    /// Backpropagates `dlogits` (`len × vocab`) through a cached pass and
    /// accumulates parameter gradients into `grad`.
    pub fn backward(&self, ids: &[u32], pass: &ForwardPass, dlogits: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let (t_len, d, ff, v, nh) = (pass.len, c.d_model, c.d_ff, c.vocab_size, c.n_heads);
        let hd = c.head_dim();
        let p = &self.params;
        let lay = &self.layout;
        let scale = 1.0 / (hd as f64).sqrt();
        assert_eq!(grad.len(), p.len());
        assert_eq!(dlogits.len(), t_len * v);

        // head: logits = hf · W_head
        ops::gemm(d, t_len, v, 1.0, &pass.hf, Mat::t(0, d), dlogits, Mat::rows(v), 1.0, grad, Mat::at(lay.head, v));
        let mut dhf = vec![0.0; t_len * d];
        ops::gemm(t_len, v, d, 1.0, dlogits, Mat::rows(v), p, Mat::t(lay.head, v), 0.0, &mut dhf, Mat::rows(d));

        let mut dx = vec![0.0; t_len * d];
        {
            let (g_head, g_tail) = grad.split_at_mut(lay.lnf_b);
            ops::layer_norm_backward(
                &dhf,
                d,
                &p[lay.lnf_g..][..d],
                &pass.lnf_xhat,
                &pass.lnf_rstd,
                &mut g_head[lay.lnf_g..][..d],
                &mut g_tail[..d],
                &mut dx,
            );
        }

        for (lo, cache) in lay.layers.iter().zip(&pass.layers).rev() {
            // MLP branch: x_out = x_mid + gelu(h2 W_fc + b_fc) W_proj + b_proj
            ops::gemm(ff, t_len, d, 1.0, &cache.act, Mat::t(0, ff), &dx, Mat::rows(d), 1.0, grad, Mat::at(lo.w_proj, d));
            ops::add_col_sums(&mut grad[lo.b_proj..][..d], &dx);
            let mut dpre = vec![0.0; t_len * ff];
            ops::gemm(t_len, d, ff, 1.0, &dx, Mat::rows(d), p, Mat::t(lo.w_proj, d), 0.0, &mut dpre, Mat::rows(ff));
            for (g, &z) in dpre.iter_mut().zip(&cache.pre_act) {
                *g *= ops::gelu_grad(z);
            }
            ops::gemm(d, t_len, ff, 1.0, &cache.h2, Mat::t(0, d), &dpre, Mat::rows(ff), 1.0, grad, Mat::at(lo.w_fc, ff));
            ops::add_col_sums(&mut grad[lo.b_fc..][..ff], &dpre);
            let mut dh2 = vec![0.0; t_len * d];
            ops::gemm(t_len, ff, d, 1.0, &dpre, Mat::rows(ff), p, Mat::t(lo.w_fc, ff), 0.0, &mut dh2, Mat::rows(d));
            {
                let (g_head, g_tail) = grad.split_at_mut(lo.ln2_b);
                ops::layer_norm_backward(
                    &dh2,
                    d,
                    &p[lo.ln2_g..][..d],
                    &cache.ln2_xhat,
                    &cache.ln2_rstd,
                    &mut g_head[lo.ln2_g..][..d],
                    &mut g_tail[..d],
                    &mut dx,
                );
            }

            // attention branch: x_mid = x_in + att W_o + b_o
            ops::gemm(d, t_len, d, 1.0, &cache.att, Mat::t(0, d), &dx, Mat::rows(d), 1.0, grad, Mat::at(lo.w_o, d));
            ops::add_col_sums(&mut grad[lo.b_o..][..d], &dx);
            let mut datt = vec![0.0; t_len * d];
            ops::gemm(t_len, d, d, 1.0, &dx, Mat::rows(d), p, Mat::t(lo.w_o, d), 0.0, &mut datt, Mat::rows(d));

            let mut dqkv = vec![0.0; t_len * 3 * d];
            let mut dp = vec![0.0; t_len * t_len];
            for h in 0..nh {
                let probs = &cache.probs[h * t_len * t_len..][..t_len * t_len];
                // dP = dO · V^T
                ops::gemm(
                    t_len, hd, t_len, 1.0,
                    &datt, Mat::at(h * hd, d),
                    &cache.qkv, Mat::t(2 * d + h * hd, 3 * d),
                    0.0, &mut dp, Mat::rows(t_len),
                );
                // dV = P^T · dO
                ops::gemm(
                    t_len, t_len, hd, 1.0,
                    probs, Mat::t(0, t_len),
                    &datt, Mat::at(h * hd, d),
                    0.0, &mut dqkv, Mat::at(2 * d + h * hd, 3 * d),
                );
                // softmax backward, in place on dp
                for i in 0..t_len {
                    let pr = &probs[i * t_len..(i + 1) * t_len];
                    let dr = &mut dp[i * t_len..(i + 1) * t_len];
                    let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                    dr[i + 1..].fill(0.0);
                }
                // dQ = dS · K · scale, dK = dS^T · Q · scale
                ops::gemm(
                    t_len, t_len, hd, scale,
                    &dp, Mat::rows(t_len),
                    &cache.qkv, Mat::at(d + h * hd, 3 * d),
                    0.0, &mut dqkv, Mat::at(h * hd, 3 * d),
                );
                ops::gemm(
                    t_len, t_len, hd, scale,
                    &dp, Mat::t(0, t_len),
                    &cache.qkv, Mat::at(h * hd, 3 * d),
                    0.0, &mut dqkv, Mat::at(d + h * hd, 3 * d),
                );
            }
            ops::gemm(d, t_len, 3 * d, 1.0, &cache.h1, Mat::t(0, d), &dqkv, Mat::rows(3 * d), 1.0, grad, Mat::at(lo.w_qkv, 3 * d));
            ops::add_col_sums(&mut grad[lo.b_qkv..][..3 * d], &dqkv);
            let mut dh1 = vec![0.0; t_len * d];
            ops::gemm(t_len, 3 * d, d, 1.0, &dqkv, Mat::rows(3 * d), p, Mat::t(lo.w_qkv, 3 * d), 0.0, &mut dh1, Mat::rows(d));
            {
                let (g_head, g_tail) = grad.split_at_mut(lo.ln1_b);
                ops::layer_norm_backward(
                    &dh1,
                    d,
                    &p[lo.ln1_g..][..d],
                    &cache.ln1_xhat,
                    &cache.ln1_rstd,
                    &mut g_head[lo.ln1_g..][..d],
                    &mut g_tail[..d],
                    &mut dx,
                );
            }
        }

        for (t, &id) in ids.iter().enumerate().take(t_len) {
            let row = &dx[t * d..(t + 1) * d];
            for (g, r) in grad[lay.tok_emb + id as usize * d..][..d].iter_mut().zip(row) {
                *g += r;
            }
            for (g, r) in grad[lay.pos_emb + t * d..][..d].iter_mut().zip(row) {
                *g += r;
            }
        }
    }

    /// Mean next-token cross-entropy of one encoded document (`ids[0]` is the
    /// context start, targets are `ids[1..]`).
    pub fn sequence_loss(&self, ids: &[u32]) -> Result<f64> {
        let (n, lp) = self.sequence_logprob(ids)?;
        Ok(-lp / n as f64)
    }

    /// `(scored tokens, Σ log p(ids[t] | ids[..t]))` over `t ≥ 1`.
    pub fn sequence_logprob(&self, ids: &[u32]) -> Result<(usize, f64)> {
        if ids.len() < 2 {
            return Err(Error::Argument("need at least two tokens to score".into()));
        }
        let input = &ids[..ids.len() - 1];
        let pass = self.forward_pass(input)?;
        let v = self.config.vocab_size;
        let mut total = 0.0;
        for (t, &target) in ids[1..].iter().enumerate() {
            let row = &pass.logits[t * v..(t + 1) * v];
            total += row[target as usize] - ops::log_sum_exp(row);
        }
        Ok((input.len(), total))
    }

    /// Adds `weight · ∇(mean token cross-entropy)` into `grad` and returns the
    /// unweighted loss.
    pub fn accumulate_loss_grad(&self, ids: &[u32], weight: f64, grad: &mut [f64]) -> Result<f64> {
        if ids.len() < 2 {
            return Err(Error::Argument("need at least two tokens to train on".into()));
        }
        let input = &ids[..ids.len() - 1];
        let pass = self.forward_pass(input)?;
        let v = self.config.vocab_size;
        let n = input.len() as f64;
        let mut dlogits = vec![0.0; input.len() * v];
        let mut loss = 0.0;
        for (t, &target) in ids[1..].iter().enumerate() {
            let row = &pass.logits[t * v..(t + 1) * v];
            let lse = ops::log_sum_exp(row);
            loss -= row[target as usize] - lse;
            let drow = &mut dlogits[t * v..(t + 1) * v];
            for (g, &z) in drow.iter_mut().zip(row) {
                *g = (z - lse).exp() * weight / n;
            }
            drow[target as usize] -= weight / n;
        }
        self.backward(input, &pass, &dlogits, grad);
        Ok(loss / n)
    }
}
