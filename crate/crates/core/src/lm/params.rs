use std::fmt;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, LinalgScalar, ScalarOperand};

use super::config::ModelConfig;

/// Numeric type the model computes in: `f32` for training and serving,
/// `f64` for gradient checking.
pub trait Float:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + Default
    + fmt::Debug
    + fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn c(x: f64) -> Self;
    fn f(self) -> f64;
}

impl Float for f32 {
    fn c(x: f64) -> Self {
        x as f32
    }
    fn f(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    fn c(x: f64) -> Self {
        x
    }
    fn f(self) -> f64 {
        self
    }
}

/// A named region of the flat parameter vector (row-major).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a, T>(&self, data: &'a [T]) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.range()]).expect("slot shape")
    }

    pub fn mat_mut<'a, T>(&self, data: &'a mut [T]) -> ArrayViewMut2<'a, T> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut data[self.range()]).expect("slot shape")
    }

    pub fn vec<'a, T>(&self, data: &'a [T]) -> ArrayView1<'a, T> {
        ArrayView1::from(&data[self.range()])
    }

    pub fn vec_mut<'a, T>(&self, data: &'a mut [T]) -> ArrayViewMut1<'a, T> {
        ArrayViewMut1::from(&mut data[self.range()])
    }
}

#[derive(Debug, Clone)]
pub struct BlockSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub w_qkv: Slot,
    pub b_qkv: Slot,
    pub w_o: Slot,
    pub b_o: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w_in: Slot,
    pub b_in: Slot,
    pub w_out: Slot,
    pub b_out: Slot,
}

/// Parameter table: every tensor's name, shape and offset follow from the config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub blocks: Vec<BlockSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub head_w: Slot,
    pub head_b: Slot,
    pub named: Vec<(String, Slot)>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut named = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, rows: usize, cols: usize| {
            let slot = Slot { offset, rows, cols };
            offset += rows * cols;
            named.push((name, slot));
            slot
        };
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let tok_emb = add("tok_emb".into(), v, d);
        let pos_emb = add("pos_emb".into(), cfg.max_seq_len, d);
        let blocks = (0..cfg.n_layers)
            .map(|i| BlockSlots {
                ln1_g: add(format!("h{i}.ln1.g"), 1, d),
                ln1_b: add(format!("h{i}.ln1.b"), 1, d),
                w_qkv: add(format!("h{i}.attn.w_qkv"), d, 3 * d),
                b_qkv: add(format!("h{i}.attn.b_qkv"), 1, 3 * d),
                w_o: add(format!("h{i}.attn.w_o"), d, d),
                b_o: add(format!("h{i}.attn.b_o"), 1, d),
                ln2_g: add(format!("h{i}.ln2.g"), 1, d),
                ln2_b: add(format!("h{i}.ln2.b"), 1, d),
                w_in: add(format!("h{i}.mlp.w_in"), d, f),
                b_in: add(format!("h{i}.mlp.b_in"), 1, f),
                w_out: add(format!("h{i}.mlp.w_out"), f, d),
                b_out: add(format!("h{i}.mlp.b_out"), 1, d),
            })
            .collect();
        let lnf_g = add("ln_f.g".into(), 1, d);
        let lnf_b = add("ln_f.b".into(), 1, d);
        let head_w = add("lm_head.w".into(), d, v);
        let head_b = add("lm_head.b".into(), 1, v);
        Self { tok_emb, pos_emb, blocks, lnf_g, lnf_b, head_w, head_b, named, total: offset }
    }
}
