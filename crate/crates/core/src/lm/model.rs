//! Pre-LayerNorm transformer with learned absolute positions and a
//! hand-written backward pass.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::batch::Example;
use super::config::{Mode, ModelConfig};
use super::params::{BlockSlots, Float, Layout, Slot};
use super::LmError;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct LanguageModel<T: Float = f32> {
    config: ModelConfig,
    layout: Layout,
    params: Vec<T>,
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `(len, vocab_size)` unnormalized scores.
    pub logits: Array2<T>,
    /// `(len, d_model)` final-layer hidden states (after the last LayerNorm).
    pub hidden: Array2<T>,
}

struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    a: Array2<T>,
    qkv: Array2<T>,
    probs: Vec<Array2<T>>,
    attn: Array2<T>,
    ln2: LnCache<T>,
    m: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
}

/// Per-layer key/value cache for incremental causal decoding.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    keys: Vec<Array2<T>>,
    values: Vec<Array2<T>>,
}

impl<T> KvCache<T> {
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn layer_norm<T: Float>(x: ArrayView2<T>, g: ArrayView1<T>, b: ArrayView1<T>) -> (Array2<T>, LnCache<T>) {
    let (n, d) = x.dim();
    let mut xhat = Array2::<T>::zeros((n, d));
    let mut inv_std = Array1::<T>::zeros(n);
    let dn = T::c(d as f64);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).fold(T::zero(), |a, b| a + b) / dn;
        let inv = T::one() / (var + T::c(LN_EPS)).sqrt();
        inv_std[i] = inv;
        xhat.row_mut(i).zip_mut_with(&row, |o, &v| *o = (v - mean) * inv);
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dg`, `db`.
fn layer_norm_backward<T: Float>(
    dy: ArrayView2<T>,
    cache: &LnCache<T>,
    g: ArrayView1<T>,
    grad: &mut [T],
    g_slot: Slot,
    b_slot: Slot,
) -> Array2<T> {
    let (n, d) = dy.dim();
    let dn = T::c(d as f64);
    g_slot.vec_mut(grad).scaled_add(T::one(), &(&dy * &cache.xhat).sum_axis(Axis(0)));
    b_slot.vec_mut(grad).scaled_add(T::one(), &dy.sum_axis(Axis(0)));
    let dxhat = &dy * &g;
    let mut dx = Array2::<T>::zeros((n, d));
    for i in 0..n {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let m1 = dh.sum() / dn;
        let m2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).fold(T::zero(), |a, b| a + b) / dn;
        let inv = cache.inv_std[i];
        for j in 0..d {
            dx[[i, j]] = inv * (dh[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

fn gelu<T: Float>(u: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (u + T::c(0.044715) * u * u * u);
    T::c(0.5) * u * (T::one() + inner.tanh())
}

fn gelu_grad<T: Float>(u: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (u + T::c(0.044715) * u * u * u);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::c(3.0 * 0.044715) * u * u);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * u * (T::one() - t * t) * dinner
}

fn add_bias<T: Float>(mut m: Array2<T>, b: ArrayView1<T>) -> Array2<T> {
    m += &b;
    m
}

/// Row-wise softmax in place, restricted to columns `0..=i` when causal.
fn softmax_rows<T: Float>(scores: &mut Array2<T>, causal: bool) {
    for (i, mut row) in scores.outer_iter_mut().enumerate() {
        let limit = if causal { i + 1 } else { row.len() };
        let max = row.iter().take(limit).fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            if j < limit {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// `log(sum(exp(row)))` and the softmax of the row.
fn log_softmax_parts<T: Float>(row: ArrayView1<T>) -> (T, Array1<T>) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps = row.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    (max + sum.ln(), exps / sum)
}

impl<T: Float> LanguageModel<T> {
    /// Randomly initialized model (weights ~ N(0, 0.02), residual output
    /// projections scaled by `1/sqrt(2 * n_layers)`).
    pub fn new(config: ModelConfig) -> Result<Self, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut fill = |slot: Slot, dist: &Normal<f64>, params: &mut [T]| {
            for p in &mut params[slot.range()] {
                *p = T::c(dist.sample(&mut rng));
            }
        };
        fill(layout.tok_emb, &normal, &mut params);
        fill(layout.pos_emb, &normal, &mut params);
        for b in &layout.blocks {
            fill(b.w_qkv, &normal, &mut params);
            fill(b.w_o, &resid, &mut params);
            fill(b.w_in, &normal, &mut params);
            fill(b.w_out, &resid, &mut params);
            params[b.ln1_g.range()].fill(T::one());
            params[b.ln2_g.range()].fill(T::one());
        }
        params[layout.lnf_g.range()].fill(T::one());
        fill(layout.head_w, &normal, &mut params);
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(LmError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Same model converted to another float type.
    pub fn cast<U: Float>(&self) -> LanguageModel<U> {
        LanguageModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| U::c(p.f())).collect(),
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), LmError> {
        if ids.is_empty() {
            return Err(LmError::EmptyInput);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(LmError::Overlength { len: ids.len(), max: self.config.max_seq_len });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(LmError::TokenOutOfRange(bad));
        }
        Ok(())
    }

    fn embed_tokens(&self, ids: &[u32]) -> Array2<T> {
        let p = &self.params;
        let tok = self.layout.tok_emb.mat(p);
        let pos = self.layout.pos_emb.mat(p);
        let mut x = Array2::<T>::zeros((ids.len(), self.config.d_model));
        for (t, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(t);
            row.assign(&tok.row(id as usize));
            row += &pos.row(t);
        }
        x
    }

    fn block_forward(&self, b: &BlockSlots, x: Array2<T>, keep: bool) -> (Array2<T>, Option<BlockCache<T>>) {
        let p = &self.params;
        let cfg = &self.config;
        let (n, d) = x.dim();
        let dh = cfg.head_dim();
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let causal = cfg.mode == Mode::Causal;

        let (a, ln1) = layer_norm(x.view(), b.ln1_g.vec(p), b.ln1_b.vec(p));
        let qkv = add_bias(a.dot(&b.w_qkv.mat(p)), b.b_qkv.vec(p));
        let mut attn = Array2::<T>::zeros((n, d));
        let mut probs = Vec::with_capacity(if keep { cfg.n_heads } else { 0 });
        for h in 0..cfg.n_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t()) * scale;
            softmax_rows(&mut scores, causal);
            attn.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&scores.dot(&v));
            if keep {
                probs.push(scores);
            }
        }
        let x_mid = x + &add_bias(attn.dot(&b.w_o.mat(p)), b.b_o.vec(p));
        let (m, ln2) = layer_norm(x_mid.view(), b.ln2_g.vec(p), b.ln2_b.vec(p));
        let u = add_bias(m.dot(&b.w_in.mat(p)), b.b_in.vec(p));
        let g = u.mapv(gelu);
        let x_out = &x_mid + &add_bias(g.dot(&b.w_out.mat(p)), b.b_out.vec(p));
        let cache = keep.then(|| BlockCache { ln1, a, qkv, probs, attn, ln2, m, u, g });
        (x_out, cache)
    }

    fn trunk(&self, ids: &[u32], keep: bool) -> (Array2<T>, Vec<BlockCache<T>>, Option<LnCache<T>>) {
        let mut x = self.embed_tokens(ids);
        let mut caches = Vec::new();
        for b in &self.layout.blocks {
            let (next, cache) = self.block_forward(b, x, keep);
            x = next;
            caches.extend(cache);
        }
        let p = &self.params;
        let (hidden, lnf) = layer_norm(x.view(), self.layout.lnf_g.vec(p), self.layout.lnf_b.vec(p));
        (hidden, caches, keep.then_some(lnf))
    }

    fn head(&self, hidden: ArrayView2<T>) -> Array2<T> {
        let p = &self.params;
        add_bias(hidden.dot(&self.layout.head_w.mat(p)), self.layout.head_b.vec(p))
    }

    /// Logits and final hidden states for every position. Causal models
    /// attend only leftwards; masked models attend in both directions.
    pub fn forward(&self, ids: &[u32]) -> Result<ForwardOutput<T>, LmError> {
        self.check_ids(ids)?;
        let (hidden, _, _) = self.trunk(ids, false);
        let logits = self.head(hidden.view());
        Ok(ForwardOutput { logits, hidden })
    }

    /// Final hidden states only.
    pub fn hidden_states(&self, ids: &[u32]) -> Result<Array2<T>, LmError> {
        self.check_ids(ids)?;
        Ok(self.trunk(ids, false).0)
    }

    fn check_example(&self, ex: &Example) -> Result<Vec<(usize, u32)>, LmError> {
        self.check_ids(&ex.inputs)?;
        if ex.labels.len() != ex.inputs.len() {
            return Err(LmError::InvalidConfig("labels and inputs differ in length".into()));
        }
        let targets: Vec<(usize, u32)> =
            ex.labels.iter().enumerate().filter_map(|(i, l)| l.map(|l| (i, l))).collect();
        if let Some(&(_, bad)) = targets.iter().find(|(_, l)| *l as usize >= self.config.vocab_size) {
            return Err(LmError::TokenOutOfRange(bad));
        }
        Ok(targets)
    }

    /// Summed cross-entropy over labelled positions and the label count.
    pub fn loss(&self, ex: &Example) -> Result<(f64, usize), LmError> {
        let targets = self.check_example(ex)?;
        if targets.is_empty() {
            return Ok((0.0, 0));
        }
        let (hidden, _, _) = self.trunk(&ex.inputs, false);
        let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let logits = self.head(hidden.select(Axis(0), &rows).view());
        let mut total = 0.0;
        for (r, &(_, label)) in targets.iter().enumerate() {
            let (lse, _) = log_softmax_parts(logits.row(r));
            total += (lse - logits[[r, label as usize]]).f();
        }
        Ok((total, targets.len()))
    }

    /// Summed cross-entropy over labelled positions; adds its gradient into `grad`.
    pub fn loss_and_grad(&self, ex: &Example, grad: &mut [T]) -> Result<(f64, usize), LmError> {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        let targets = self.check_example(ex)?;
        if targets.is_empty() {
            return Ok((0.0, 0));
        }
        let p = &self.params;
        let lay = &self.layout;
        let cfg = &self.config;
        let (n, d) = (ex.inputs.len(), cfg.d_model);
        let (hidden, caches, lnf) = self.trunk(&ex.inputs, true);
        let lnf = lnf.expect("cache kept");

        let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let h_sel = hidden.select(Axis(0), &rows);
        let logits = self.head(h_sel.view());
        let mut dlogits = Array2::<T>::zeros(logits.dim());
        let mut total = 0.0;
        for (r, &(_, label)) in targets.iter().enumerate() {
            let (lse, probs) = log_softmax_parts(logits.row(r));
            total += (lse - logits[[r, label as usize]]).f();
            let mut drow = dlogits.row_mut(r);
            drow.assign(&probs);
            drow[label as usize] -= T::one();
        }
        lay.head_w.mat_mut(grad).scaled_add(T::one(), &h_sel.t().dot(&dlogits));
        lay.head_b.vec_mut(grad).scaled_add(T::one(), &dlogits.sum_axis(Axis(0)));
        let dh_sel = dlogits.dot(&lay.head_w.mat(p).t());
        let mut dhidden = Array2::<T>::zeros((n, d));
        for (r, &row) in rows.iter().enumerate() {
            dhidden.row_mut(row).assign(&dh_sel.row(r));
        }
        let mut dx = layer_norm_backward(dhidden.view(), &lnf, lay.lnf_g.vec(p), grad, lay.lnf_g, lay.lnf_b);

        for (b, cache) in lay.blocks.iter().zip(caches.iter()).rev() {
            dx = self.block_backward(b, cache, dx, grad);
        }

        let mut dtok = lay.tok_emb.mat_mut(grad);
        for (t, &id) in ex.inputs.iter().enumerate() {
            dtok.row_mut(id as usize).scaled_add(T::one(), &dx.row(t));
        }
        lay.pos_emb.mat_mut(grad).slice_mut(s![..n, ..]).scaled_add(T::one(), &dx);
        Ok((total, targets.len()))
    }

    fn block_backward(&self, b: &BlockSlots, c: &BlockCache<T>, dx_out: Array2<T>, grad: &mut [T]) -> Array2<T> {
        let p = &self.params;
        let cfg = &self.config;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = T::c(1.0 / (dh as f64).sqrt());

        // MLP
        b.w_out.mat_mut(grad).scaled_add(T::one(), &c.g.t().dot(&dx_out));
        b.b_out.vec_mut(grad).scaled_add(T::one(), &dx_out.sum_axis(Axis(0)));
        let mut du = dx_out.dot(&b.w_out.mat(p).t());
        du.zip_mut_with(&c.u, |g, &u| *g = *g * gelu_grad(u));
        b.w_in.mat_mut(grad).scaled_add(T::one(), &c.m.t().dot(&du));
        b.b_in.vec_mut(grad).scaled_add(T::one(), &du.sum_axis(Axis(0)));
        let dm = du.dot(&b.w_in.mat(p).t());
        let dx_mid = dx_out + layer_norm_backward(dm.view(), &c.ln2, b.ln2_g.vec(p), grad, b.ln2_g, b.ln2_b);

        // attention
        b.w_o.mat_mut(grad).scaled_add(T::one(), &c.attn.t().dot(&dx_mid));
        b.b_o.vec_mut(grad).scaled_add(T::one(), &dx_mid.sum_axis(Axis(0)));
        let dattn = dx_mid.dot(&b.w_o.mat(p).t());
        let mut dqkv = Array2::<T>::zeros(c.qkv.dim());
        for h in 0..cfg.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let q = c.qkv.slice(s![.., cols.clone()]);
            let k = c.qkv.slice(s![.., d + cols.start..d + cols.end]);
            let v = c.qkv.slice(s![.., 2 * d + cols.start..2 * d + cols.end]);
            let probs = &c.probs[h];
            let dout = dattn.slice(s![.., cols.clone()]);
            let dprobs = dout.dot(&v.t());
            let dv = probs.t().dot(&dout);
            let mut dscores = Array2::<T>::zeros(probs.dim());
            for i in 0..probs.nrows() {
                let pr = probs.row(i);
                let dp = dprobs.row(i);
                let dot = pr.iter().zip(dp.iter()).map(|(&a, &b)| a * b).fold(T::zero(), |a, b| a + b);
                for j in 0..probs.ncols() {
                    dscores[[i, j]] = pr[j] * (dp[j] - dot) * scale;
                }
            }
            dqkv.slice_mut(s![.., cols.clone()]).assign(&dscores.dot(&k));
            dqkv.slice_mut(s![.., d + cols.start..d + cols.end]).assign(&dscores.t().dot(&q));
            dqkv.slice_mut(s![.., 2 * d + cols.start..2 * d + cols.end]).assign(&dv);
        }
        b.w_qkv.mat_mut(grad).scaled_add(T::one(), &c.a.t().dot(&dqkv));
        b.b_qkv.vec_mut(grad).scaled_add(T::one(), &dqkv.sum_axis(Axis(0)));
        let da = dqkv.dot(&b.w_qkv.mat(p).t());
        dx_mid + layer_norm_backward(da.view(), &c.ln1, b.ln1_g.vec(p), grad, b.ln1_g, b.ln1_b)
    }

    pub fn new_cache(&self) -> KvCache<T> {
        let d = self.config.d_model;
        KvCache {
            keys: vec![Array2::zeros((0, d)); self.config.n_layers],
            values: vec![Array2::zeros((0, d)); self.config.n_layers],
        }
    }

    /// Append one token to a causal decoding state and return the logits
    /// for the next position. Matches `forward` on the full prefix.
    pub fn step(&self, cache: &mut KvCache<T>, token: u32) -> Result<Array1<T>, LmError> {
        if self.config.mode != Mode::Causal {
            return Err(LmError::WrongMode { expected: Mode::Causal });
        }
        let t = cache.len();
        if t >= self.config.max_seq_len {
            return Err(LmError::Overlength { len: t + 1, max: self.config.max_seq_len });
        }
        if token as usize >= self.config.vocab_size {
            return Err(LmError::TokenOutOfRange(token));
        }
        let p = &self.params;
        let cfg = &self.config;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut x = self.embed_tokens_at(token, t);
        for (li, b) in self.layout.blocks.iter().enumerate() {
            let (a, _) = layer_norm(x.view(), b.ln1_g.vec(p), b.ln1_b.vec(p));
            let qkv = add_bias(a.dot(&b.w_qkv.mat(p)), b.b_qkv.vec(p));
            cache.keys[li].push_row(qkv.slice(s![0, d..2 * d])).expect("row width");
            cache.values[li].push_row(qkv.slice(s![0, 2 * d..])).expect("row width");
            let keys = &cache.keys[li];
            let values = &cache.values[li];
            let mut attn = Array2::<T>::zeros((1, d));
            for h in 0..cfg.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let q = qkv.slice(s![.., cols.clone()]);
                let k = keys.slice(s![.., cols.clone()]);
                let v = values.slice(s![.., cols.clone()]);
                let mut scores = q.dot(&k.t()) * scale;
                softmax_rows(&mut scores, false);
                attn.slice_mut(s![.., cols]).assign(&scores.dot(&v));
            }
            x = x + add_bias(attn.dot(&b.w_o.mat(p)), b.b_o.vec(p));
            let (m, _) = layer_norm(x.view(), b.ln2_g.vec(p), b.ln2_b.vec(p));
            let g = add_bias(m.dot(&b.w_in.mat(p)), b.b_in.vec(p)).mapv(gelu);
            x = &x + &add_bias(g.dot(&b.w_out.mat(p)), b.b_out.vec(p));
        }
        let (hidden, _) = layer_norm(x.view(), self.layout.lnf_g.vec(p), self.layout.lnf_b.vec(p));
        Ok(self.head(hidden.view()).row(0).to_owned())
    }

    fn embed_tokens_at(&self, token: u32, position: usize) -> Array2<T> {
        let p = &self.params;
        let mut x = Array2::<T>::zeros((1, self.config.d_model));
        x.row_mut(0).assign(&self.layout.tok_emb.mat(p).row(token as usize));
        x.row_mut(0).scaled_add(T::one(), &self.layout.pos_emb.mat(p).row(position));
        x
    }
}

/// Softmax of a logit vector in f64.
pub fn softmax<T: Float>(logits: ArrayView1<T>) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.f()));
    let exps: Vec<f64> = logits.iter().map(|&v| (v.f() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
