//! A small pre-LayerNorm decoder-only transformer with tied input/output
//! embeddings and hand-written backpropagation.
//!
//! Everything is `f64`. A forward pass can continue from a [`KvPrefix`]
//! (cached keys/values of earlier positions); gradients never flow into a
//! cached prefix, which is exact whenever the prefix does not depend on the
//! trainable parameters.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, LnCache};
use super::tokenizer::{TokenId, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub ctx_len: usize,
    /// Upper bound on latent prompt length.
    pub max_latent: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            ctx_len: 128,
            max_latent: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.ctx_len < 2 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainableMask {
    All,
    /// Only these rows of the token embedding (the latent prompt).
    EmbeddingRows(Range<usize>),
}

#[derive(Debug, Clone)]
pub(crate) struct LayerSlots {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of every named parameter array inside the flat parameter vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub total: usize,
    pub specs: Vec<ParamSpec>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig, vocab: usize) -> Self {
        let d = cfg.d_model;
        let mut specs = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let spec = ParamSpec { name, shape, offset };
            offset += spec.len();
            let r = spec.range();
            specs.push(spec);
            r
        };
        let tok_emb = add("tok_emb".into(), vec![vocab, d]);
        let pos_emb = add("pos_emb".into(), vec![cfg.ctx_len, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("h{l}.{s}");
            layers.push(LayerSlots {
                ln1_g: add(p("ln1.g"), vec![d]),
                ln1_b: add(p("ln1.b"), vec![d]),
                w_qkv: add(p("attn.w_qkv"), vec![d, 3 * d]),
                b_qkv: add(p("attn.b_qkv"), vec![3 * d]),
                w_o: add(p("attn.w_o"), vec![d, d]),
                b_o: add(p("attn.b_o"), vec![d]),
                ln2_g: add(p("ln2.g"), vec![d]),
                ln2_b: add(p("ln2.b"), vec![d]),
                w_fc: add(p("mlp.w_fc"), vec![d, cfg.d_ff]),
                b_fc: add(p("mlp.b_fc"), vec![cfg.d_ff]),
                w_proj: add(p("mlp.w_proj"), vec![cfg.d_ff, d]),
                b_proj: add(p("mlp.b_proj"), vec![d]),
            });
        }
        let lnf_g = add("ln_f.g".into(), vec![d]);
        let lnf_b = add("ln_f.b".into(), vec![d]);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            total: offset,
            specs,
        }
    }
}

/// Parameters, vocabulary and architecture of the scorer.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub(crate) params: Vec<f64>,
    pub(crate) layout: Layout,
    pub trainable: TrainableMask,
    /// Token ids of the installed latent prompt, in order.
    pub latent_tokens: Vec<TokenId>,
    pub seed: u64,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.vocab == other.vocab
            && self.trainable == other.trainable
            && self.latent_tokens == other.latent_tokens
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Cached keys and values of a token prefix, one buffer per layer.
#[derive(Debug, Clone)]
pub struct KvPrefix {
    pub(crate) len: usize,
    pub(crate) k: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl KvPrefix {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends the keys/values computed in `trace`.
    pub(crate) fn extend(&mut self, trace: &Trace) {
        for (l, lt) in trace.layers.iter().enumerate() {
            let d = lt.k_all.len() / (self.len + trace.n);
            self.k[l].extend_from_slice(&lt.k_all[self.len * d..]);
            self.v[l].extend_from_slice(&lt.v_all[self.len * d..]);
        }
        self.len += trace.n;
    }
}

pub(crate) struct LayerTrace {
    ln1_out: Vec<f64>,
    ln1: LnCache,
    q: Vec<f64>,
    k_all: Vec<f64>,
    v_all: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2_out: Vec<f64>,
    ln2: LnCache,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
}

/// Activations of one forward pass, kept for the backward pass.
pub(crate) struct Trace {
    tokens: Vec<TokenId>,
    pos0: usize,
    n: usize,
    layers: Vec<LayerTrace>,
    lnf: LnCache,
    /// Final normalized hidden states, `n × d_model`.
    pub hidden: Vec<f64>,
}

/// Gradient buffer aligned with the parameter vector.
#[derive(Debug, Clone)]
pub struct Grads {
    pub(crate) data: Vec<f64>,
    pub(crate) mask: TrainableMask,
}

impl Grads {
    pub fn zeros(model: &ModelState) -> Self {
        Grads {
            data: vec![0.0; model.params.len()],
            mask: model.trainable.clone(),
        }
    }

    fn full(&self) -> bool {
        matches!(self.mask, TrainableMask::All)
    }

    fn wants_row(&self, row: usize) -> bool {
        match &self.mask {
            TrainableMask::All => true,
            TrainableMask::EmbeddingRows(r) => r.contains(&row),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    fn pair(&mut self, a: &Range<usize>, b: &Range<usize>) -> Option<(&mut [f64], &mut [f64])> {
        if !self.full() {
            return None;
        }
        debug_assert!(a.end <= b.start);
        let (lo, hi) = self.data.split_at_mut(b.start);
        Some((&mut lo[a.clone()], &mut hi[..b.len()]))
    }
}

impl ModelState {
    /// Fresh randomly initialized model.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let proj = Normal::new(0.0, proj_std).unwrap();
        let mut fill = |r: &Range<usize>, dist: &Normal<f64>, rng: &mut ChaCha8Rng| {
            for p in &mut params[r.clone()] {
                *p = dist.sample(rng);
            }
        };
        fill(&layout.tok_emb, &normal, &mut rng);
        fill(&layout.pos_emb, &normal, &mut rng);
        for ls in &layout.layers {
            fill(&ls.w_qkv, &normal, &mut rng);
            fill(&ls.w_o, &proj, &mut rng);
            fill(&ls.w_fc, &normal, &mut rng);
            fill(&ls.w_proj, &proj, &mut rng);
        }
        for ls in &layout.layers {
            params[ls.ln1_g.clone()].fill(1.0);
            params[ls.ln2_g.clone()].fill(1.0);
        }
        params[layout.lnf_g.clone()].fill(1.0);
        Ok(ModelState {
            config,
            vocab,
            params,
            layout,
            trainable: TrainableMask::All,
            latent_tokens: Vec::new(),
            seed,
        })
    }

    /// Rebuilds a model from stored parts; used by checkpoint loading.
    pub(crate) fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        params: Vec<f64>,
        trainable: TrainableMask,
        latent_tokens: Vec<TokenId>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config, vocab.len());
        if params.len() != layout.total {
            return Err(Error::Config(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                layout.total
            )));
        }
        Ok(ModelState {
            config,
            vocab,
            params,
            layout,
            trainable,
            latent_tokens,
            seed,
        })
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.params[s.range()])
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Range of the flat parameter vector that receives updates.
    pub fn trainable_range(&self) -> Range<usize> {
        match &self.trainable {
            TrainableMask::All => 0..self.params.len(),
            TrainableMask::EmbeddingRows(rows) => {
                let d = self.config.d_model;
                self.layout.tok_emb.start + rows.start * d..self.layout.tok_emb.start + rows.end * d
            }
        }
    }

    /// Token embedding row of `token`.
    pub fn embedding_row(&self, token: TokenId) -> &[f64] {
        let d = self.config.d_model;
        let start = self.layout.tok_emb.start + token * d;
        &self.params[start..start + d]
    }

    #[cfg(test)]
    pub(crate) fn embedding_row_mut(&mut self, token: TokenId) -> &mut [f64] {
        let d = self.config.d_model;
        let start = self.layout.tok_emb.start + token * d;
        &mut self.params[start..start + d]
    }

    /// Copy with the latent prompt removed: its tokens leave the vocabulary and
    /// its rows leave the embedding, and every parameter becomes trainable.
    pub fn without_latent(&self) -> ModelState {
        let mut m = self.clone();
        let Some(&first) = m.latent_tokens.iter().min() else {
            return m;
        };
        let d = m.config.d_model;
        let cut = m.layout.tok_emb.start + first * d..m.layout.tok_emb.end;
        m.params.drain(cut);
        m.vocab.truncate(first);
        m.latent_tokens.clear();
        m.trainable = TrainableMask::All;
        m.layout = Layout::new(&m.config, m.vocab.len());
        debug_assert_eq!(m.layout.total, m.params.len());
        m
    }

    /// Adds `extra` new rows at the end of the token embedding. Other arrays are untouched.
    pub(crate) fn grow_vocab(&mut self, rows: &[Vec<f64>]) {
        let d = self.config.d_model;
        let old = &self.layout;
        let mut params = Vec::with_capacity(self.params.len() + rows.len() * d);
        params.extend_from_slice(&self.params[..old.tok_emb.end]);
        for r in rows {
            debug_assert_eq!(r.len(), d);
            params.extend_from_slice(r);
        }
        params.extend_from_slice(&self.params[old.tok_emb.end..]);
        self.params = params;
        self.layout = Layout::new(&self.config, self.vocab.len());
        debug_assert_eq!(self.layout.total, self.params.len());
    }

    fn check_window(&self, positions: usize) -> Result<()> {
        if positions > self.config.ctx_len {
            return Err(Error::Window {
                context: positions,
                target: 0,
                limit: self.config.ctx_len,
            });
        }
        Ok(())
    }

    /// Runs the transformer over `tokens`, continuing after `prefix` when given.
    pub(crate) fn forward(&self, tokens: &[TokenId], prefix: Option<&KvPrefix>) -> Result<Trace> {
        let cfg = &self.config;
        let (d, ff, nh, hd) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let p0 = prefix.map_or(0, |p| p.len);
        let n = tokens.len();
        let total = p0 + n;
        self.check_window(total)?;
        let vocab = self.vocab.len();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::Config(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let p = &self.params;
        let lay = &self.layout;

        let mut x = vec![0.0; n * d];
        for (i, &t) in tokens.iter().enumerate() {
            let e = &p[lay.tok_emb.start + t * d..lay.tok_emb.start + (t + 1) * d];
            let pe = &p[lay.pos_emb.start + (p0 + i) * d..lay.pos_emb.start + (p0 + i + 1) * d];
            for j in 0..d {
                x[i * d + j] = e[j] + pe[j];
            }
        }

        let scale = 1.0 / (hd as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (l, ls) in lay.layers.iter().enumerate() {
            let (ln1_out, ln1) = layer_norm(&x, &p[ls.ln1_g.clone()], &p[ls.ln1_b.clone()], d);
            let qkv = linear(&ln1_out, &p[ls.w_qkv.clone()], &p[ls.b_qkv.clone()], n, d, 3 * d);
            let mut q = vec![0.0; n * d];
            let mut k_all = Vec::with_capacity(total * d);
            let mut v_all = Vec::with_capacity(total * d);
            if let Some(pre) = prefix {
                k_all.extend_from_slice(&pre.k[l]);
                v_all.extend_from_slice(&pre.v[l]);
            }
            for i in 0..n {
                let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
                q[i * d..(i + 1) * d].copy_from_slice(&row[..d]);
                k_all.extend_from_slice(&row[d..2 * d]);
                v_all.extend_from_slice(&row[2 * d..]);
            }

            let mut probs = vec![0.0; nh * n * total];
            let mut attn = vec![0.0; n * d];
            for h in 0..nh {
                let off = h * hd;
                for i in 0..n {
                    let a = p0 + i;
                    let qi = &q[i * d + off..i * d + off + hd];
                    let row = &mut probs[(h * n + i) * total..(h * n + i) * total + a + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &k_all[j * d + off..j * d + off + hd];
                        *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    ops::softmax_in_place(row);
                    let out = &mut attn[i * d + off..i * d + off + hd];
                    for (j, &pj) in row.iter().enumerate() {
                        let vj = &v_all[j * d + off..j * d + off + hd];
                        for (o, v) in out.iter_mut().zip(vj) {
                            *o += pj * v;
                        }
                    }
                }
            }

            let proj = linear(&attn, &p[ls.w_o.clone()], &p[ls.b_o.clone()], n, d, d);
            let x_mid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
            let (ln2_out, ln2) = layer_norm(&x_mid, &p[ls.ln2_g.clone()], &p[ls.ln2_b.clone()], d);
            let fc_pre = linear(&ln2_out, &p[ls.w_fc.clone()], &p[ls.b_fc.clone()], n, d, ff);
            let fc_act: Vec<f64> = fc_pre.iter().map(|&v| gelu(v)).collect();
            let mlp = linear(&fc_act, &p[ls.w_proj.clone()], &p[ls.b_proj.clone()], n, ff, d);
            x = x_mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();

            layers.push(LayerTrace {
                ln1_out,
                ln1,
                q,
                k_all,
                v_all,
                probs,
                attn,
                ln2_out,
                ln2,
                fc_pre,
                fc_act,
            });
        }
        let (hidden, lnf) = layer_norm(&x, &p[lay.lnf_g.clone()], &p[lay.lnf_b.clone()], d);
        Ok(Trace {
            tokens: tokens.to_vec(),
            pos0: p0,
            n,
            layers,
            lnf,
            hidden,
        })
    }

    /// Keys and values of `tokens` for later continuation.
    pub fn build_prefix(&self, tokens: &[TokenId]) -> Result<KvPrefix> {
        let mut prefix = KvPrefix {
            len: 0,
            k: vec![Vec::new(); self.config.n_layers],
            v: vec![Vec::new(); self.config.n_layers],
        };
        if !tokens.is_empty() {
            let trace = self.forward(tokens, None)?;
            prefix.extend(&trace);
        }
        Ok(prefix)
    }

    /// Backpropagates `dhidden` (gradient w.r.t. the final hidden states).
    pub(crate) fn backward(&self, trace: &Trace, dhidden: &[f64], grads: &mut Grads) {
        let cfg = &self.config;
        let (d, ff, nh, hd) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let (n, p0) = (trace.n, trace.pos0);
        let total = p0 + n;
        let p = &self.params;
        let lay = &self.layout;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut dx = layer_norm_backward(
            dhidden,
            &trace.lnf,
            &p[lay.lnf_g.clone()],
            d,
            grads.pair(&lay.lnf_g, &lay.lnf_b),
        );

        for (ls, lt) in lay.layers.iter().zip(&trace.layers).rev() {
            let d_fc_act = linear_backward(
                &lt.fc_act,
                &p[ls.w_proj.clone()],
                &dx,
                n,
                ff,
                d,
                grads.pair(&ls.w_proj, &ls.b_proj),
            );
            let d_fc_pre: Vec<f64> = d_fc_act
                .iter()
                .zip(&lt.fc_pre)
                .map(|(g, &v)| g * gelu_grad(v))
                .collect();
            let d_ln2_out = linear_backward(
                &lt.ln2_out,
                &p[ls.w_fc.clone()],
                &d_fc_pre,
                n,
                d,
                ff,
                grads.pair(&ls.w_fc, &ls.b_fc),
            );
            let d_ln2_in = layer_norm_backward(
                &d_ln2_out,
                &lt.ln2,
                &p[ls.ln2_g.clone()],
                d,
                grads.pair(&ls.ln2_g, &ls.ln2_b),
            );
            let d_xmid: Vec<f64> = dx.iter().zip(&d_ln2_in).map(|(a, b)| a + b).collect();
            let d_attn = linear_backward(&lt.attn, &p[ls.w_o.clone()], &d_xmid, n, d, d, grads.pair(&ls.w_o, &ls.b_o));

            let mut dq = vec![0.0; n * d];
            let mut dk_all = vec![0.0; total * d];
            let mut dv_all = vec![0.0; total * d];
            let mut dp = vec![0.0; total];
            for h in 0..nh {
                let off = h * hd;
                for i in 0..n {
                    let a = p0 + i;
                    let probs = &lt.probs[(h * n + i) * total..(h * n + i) * total + a + 1];
                    let d_out = &d_attn[i * d + off..i * d + off + hd];
                    let mut s = 0.0;
                    for j in 0..=a {
                        let vj = &lt.v_all[j * d + off..j * d + off + hd];
                        dp[j] = d_out.iter().zip(vj).map(|(x, y)| x * y).sum();
                        s += probs[j] * dp[j];
                        let dvj = &mut dv_all[j * d + off..j * d + off + hd];
                        for (g, o) in dvj.iter_mut().zip(d_out) {
                            *g += probs[j] * o;
                        }
                    }
                    let qi = &lt.q[i * d + off..i * d + off + hd];
                    for j in 0..=a {
                        let ds = probs[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &lt.k_all[j * d + off..j * d + off + hd];
                        let dqi = &mut dq[i * d + off..i * d + off + hd];
                        for (g, k) in dqi.iter_mut().zip(kj) {
                            *g += ds * k;
                        }
                        let dkj = &mut dk_all[j * d + off..j * d + off + hd];
                        for (g, q) in dkj.iter_mut().zip(qi) {
                            *g += ds * q;
                        }
                    }
                }
            }
            let mut dqkv = vec![0.0; n * 3 * d];
            for i in 0..n {
                let row = &mut dqkv[i * 3 * d..(i + 1) * 3 * d];
                row[..d].copy_from_slice(&dq[i * d..(i + 1) * d]);
                row[d..2 * d].copy_from_slice(&dk_all[(p0 + i) * d..(p0 + i + 1) * d]);
                row[2 * d..].copy_from_slice(&dv_all[(p0 + i) * d..(p0 + i + 1) * d]);
            }
            let d_ln1_out = linear_backward(
                &lt.ln1_out,
                &p[ls.w_qkv.clone()],
                &dqkv,
                n,
                d,
                3 * d,
                grads.pair(&ls.w_qkv, &ls.b_qkv),
            );
            let d_ln1_in = layer_norm_backward(
                &d_ln1_out,
                &lt.ln1,
                &p[ls.ln1_g.clone()],
                d,
                grads.pair(&ls.ln1_g, &ls.ln1_b),
            );
            dx = d_xmid.iter().zip(&d_ln1_in).map(|(a, b)| a + b).collect();
        }

        let full = grads.full();
        for (i, &t) in trace.tokens.iter().enumerate() {
            if grads.wants_row(t) {
                let start = lay.tok_emb.start + t * d;
                for (g, v) in grads.data[start..start + d].iter_mut().zip(&dx[i * d..(i + 1) * d]) {
                    *g += v;
                }
            }
            if full {
                let start = lay.pos_emb.start + (p0 + i) * d;
                for (g, v) in grads.data[start..start + d].iter_mut().zip(&dx[i * d..(i + 1) * d]) {
                    *g += v;
                }
            }
        }
    }

    /// Next-token distributions (softmax over the full vocabulary) for the given hidden rows.
    pub(crate) fn next_token_probs(&self, hidden: &[f64], rows: &[usize]) -> Vec<Vec<f64>> {
        let d = self.config.d_model;
        let v = self.vocab.len();
        let emb = &self.params[self.layout.tok_emb.clone()];
        let mut h = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            h.extend_from_slice(&hidden[r * d..(r + 1) * d]);
        }
        let mut logits = vec![0.0; rows.len() * v];
        ops::gemm(rows.len(), d, v, &h, false, emb, true, &mut logits, 0.0);
        logits
            .chunks_mut(v)
            .map(|row| {
                ops::softmax_in_place(row);
                row.to_vec()
            })
            .collect()
    }

    /// Teacher-forced per-token log-probabilities of `seq[context_len..]`.
    ///
    /// When `grad` is given, `coef * Σ log p` is backpropagated into it.
    /// `prefix`, when given, must hold the first `prefix.len()` tokens of
    /// `seq`, with `prefix.len() < context_len`.
    pub fn logprob_pass(
        &self,
        seq: &[TokenId],
        context_len: usize,
        prefix: Option<&KvPrefix>,
        grad: Option<(f64, &mut Grads)>,
    ) -> Result<Vec<f64>> {
        let t = seq.len().saturating_sub(context_len);
        if t == 0 {
            return Ok(Vec::new());
        }
        if seq.len() > self.config.ctx_len {
            return Err(Error::Window {
                context: context_len,
                target: t,
                limit: self.config.ctx_len,
            });
        }
        if context_len == 0 {
            return Err(Error::Scoring("a non-empty target needs at least one context token".into()));
        }
        let p0 = prefix.map_or(0, |p| p.len);
        assert!(p0 < context_len, "prefix must end before the last context token");
        let inputs = &seq[p0..seq.len() - 1];
        let trace = self.forward(inputs, prefix)?;
        let rows: Vec<usize> = (0..t).map(|k| context_len - 1 + k - p0).collect();
        let probs = self.next_token_probs(&trace.hidden, &rows);
        let logps: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, pr)| pr[seq[context_len + k]].ln())
            .collect();

        if let Some((coef, grads)) = grad {
            let d = self.config.d_model;
            let emb_start = self.layout.tok_emb.start;
            let vocab = self.vocab.len();
            let mut dhidden = vec![0.0; trace.n * d];
            for (k, pr) in probs.iter().enumerate() {
                let target = seq[context_len + k];
                let row = rows[k];
                let h = &trace.hidden[row * d..(row + 1) * d];
                // d(coef * log p_target)/d logits = coef * (onehot - p)
                let dlogits: Vec<f64> = (0..vocab)
                    .map(|v| coef * (f64::from(u8::from(v == target)) - pr[v]))
                    .collect();
                let dh = &mut dhidden[row * d..(row + 1) * d];
                for (v, &g) in dlogits.iter().enumerate() {
                    let e = &self.params[emb_start + v * d..emb_start + (v + 1) * d];
                    for (o, x) in dh.iter_mut().zip(e) {
                        *o += g * x;
                    }
                    if grads.wants_row(v) {
                        let ge = &mut grads.data[emb_start + v * d..emb_start + (v + 1) * d];
                        for (o, x) in ge.iter_mut().zip(h) {
                            *o += g * x;
                        }
                    }
                }
            }
            self.backward(&trace, &dhidden, grads);
        }
        Ok(logps)
    }

    /// Final hidden states for `tokens`, `len × d_model`.
    pub fn hidden_states(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self.forward(tokens, None)?.hidden)
    }
}
