//! Differentiable building blocks. Each layer is a thin descriptor (parameter
//! path prefix plus dimensions); values live in a [`ParameterSet`].

use std::sync::Arc;

use rand::Rng;

use super::{Graph, NnError, ParameterSet, Tensor, Var};

/// Large negative additive mask value; finite so every activation stays finite.
pub const MASK_NEG: f64 = -1e9;

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub prefix: String,
    pub input: usize,
    pub output: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            output,
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) -> Result<(), NnError> {
        let bound = 1.0 / (self.input as f64).sqrt();
        params.insert(format!("{}.w", self.prefix), uniform(rng, &[self.input, self.output], bound))?;
        if self.bias {
            params.insert(format!("{}.b", self.prefix), Tensor::zeros(&[self.output]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let w = g.param(&format!("{}.w", self.prefix))?;
        let y = g.matmul(x, w)?;
        if self.bias {
            let b = g.param(&format!("{}.b", self.prefix))?;
            g.add_row(y, b)
        } else {
            Ok(y)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            dim,
        }
    }

    pub fn init(&self, params: &mut ParameterSet) -> Result<(), NnError> {
        params.insert(format!("{}.gamma", self.prefix), Tensor::filled(&[self.dim], 1.0))?;
        params.insert(format!("{}.beta", self.prefix), Tensor::zeros(&[self.dim]))?;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let gamma = g.param(&format!("{}.gamma", self.prefix))?;
        let beta = g.param(&format!("{}.beta", self.prefix))?;
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(name: impl Into<String>, vocab: usize, dim: usize) -> Self {
        Self {
            name: name.into(),
            vocab,
            dim,
        }
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) -> Result<(), NnError> {
        params.insert(self.name.clone(), uniform(rng, &[self.vocab, self.dim], 1.0))
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, NnError> {
        let table = g.param(&self.name)?;
        g.gather_rows(table, ids)
    }
}

/// Which key positions a query may attend to.
pub enum AttnMask<'a> {
    Full,
    Causal,
    Custom(&'a dyn Fn(i64, i64) -> bool),
}

impl AttnMask<'_> {
    fn allows(&self, q: i64, k: i64) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal => k <= q,
            AttnMask::Custom(f) => f(q, k),
        }
    }
}

/// Multi-head attention with an optional learned relative-position bias
/// (one scalar per head and clipped query-minus-key distance).
#[derive(Debug, Clone)]
pub struct Attention {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub rel_max: Option<usize>,
}

impl Attention {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, rel_max: Option<usize>) -> Result<Self, NnError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            prefix: prefix.into(),
            dim,
            heads,
            rel_max,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn proj(&self, name: &str) -> Linear {
        Linear::new(format!("{}.{}", self.prefix, name), self.dim, self.dim)
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) -> Result<(), NnError> {
        for n in ["q", "k", "v", "o"] {
            self.proj(n).init(params, rng)?;
        }
        if let Some(r) = self.rel_max {
            params.insert(format!("{}.rel_bias", self.prefix), Tensor::zeros(&[self.heads, 2 * r + 1]))?;
        }
        Ok(())
    }

    /// `q_in: Tq x dim`, `kv_in: Tk x dim`; positions are absolute indices used
    /// for the relative bias and the mask.
    pub fn forward(
        &self,
        g: &mut Graph,
        q_in: Var,
        kv_in: Var,
        q_pos: &[i64],
        k_pos: &[i64],
        mask: &AttnMask,
    ) -> Result<Var, NnError> {
        let q = self.proj("q").forward(g, q_in)?;
        let (k, v) = self.project_kv(g, kv_in)?;
        self.attend(g, q, k, v, q_pos, k_pos, mask)
    }

    pub fn project_q(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        self.proj("q").forward(g, x)
    }

    pub fn project_kv(&self, g: &mut Graph, x: Var) -> Result<(Var, Var), NnError> {
        Ok((self.proj("k").forward(g, x)?, self.proj("v").forward(g, x)?))
    }

    /// Attention over already projected queries, keys and values, followed by
    /// the output projection.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &self,
        g: &mut Graph,
        q: Var,
        k: Var,
        v: Var,
        q_pos: &[i64],
        k_pos: &[i64],
        mask: &AttnMask,
    ) -> Result<Var, NnError> {
        let tq = g.rows(q);
        let tk = g.rows(k);
        if q_pos.len() != tq || k_pos.len() != tk || g.rows(v) != tk {
            return Err(NnError::Shape("attention positions".into()));
        }

        let mut mask_vals = vec![0.0; tq * tk];
        let mut any_masked = false;
        for (i, &qp) in q_pos.iter().enumerate() {
            for (j, &kp) in k_pos.iter().enumerate() {
                if !mask.allows(qp, kp) {
                    mask_vals[i * tk + j] = MASK_NEG;
                    any_masked = true;
                }
            }
        }
        let mask_var = if any_masked {
            Some(g.constant(Tensor::matrix(tq, tk, mask_vals)))
        } else {
            None
        };
        let rel = match self.rel_max {
            Some(r) => {
                let table = g.param(&format!("{}.rel_bias", self.prefix))?;
                let width = 2 * r + 1;
                let mut base = Vec::with_capacity(tq * tk);
                for &qp in q_pos {
                    for &kp in k_pos {
                        let d = (qp - kp).clamp(-(r as i64), r as i64);
                        base.push((d + r as i64) as usize);
                    }
                }
                Some((table, width, base))
            }
            None => None,
        };

        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let mut s = g.scale(s, scale);
            if let Some((table, width, base)) = &rel {
                let idx: Vec<usize> = base.iter().map(|b| h * width + b).collect();
                let bias = g.gather(*table, Arc::new(idx), &[tq, tk])?;
                s = g.add(s, bias)?;
            }
            if let Some(m) = mask_var {
                s = g.add(s, m)?;
            }
            let p = g.softmax(s)?;
            heads.push(g.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        self.proj("o").forward(g, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub prefix: String,
    pub dim: usize,
    pub hidden: usize,
}

impl FeedForward {
    pub fn new(prefix: impl Into<String>, dim: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            dim,
            hidden,
        }
    }

    fn up(&self) -> Linear {
        Linear::new(format!("{}.up", self.prefix), self.dim, self.hidden)
    }

    fn down(&self) -> Linear {
        Linear::new(format!("{}.down", self.prefix), self.hidden, self.dim)
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) -> Result<(), NnError> {
        self.up().init(params, rng)?;
        self.down().init(params, rng)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        let h = self.up().forward(g, x)?;
        let h = g.silu(h);
        self.down().forward(g, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize, ffn_hidden: usize, rel_max: Option<usize>) -> Result<Self, NnError> {
        Ok(Self {
            ln_attn: LayerNorm::new(format!("{prefix}.ln_attn"), dim),
            attn: Attention::new(format!("{prefix}.attn"), dim, heads, rel_max)?,
            ln_ffn: LayerNorm::new(format!("{prefix}.ln_ffn"), dim),
            ffn: FeedForward::new(format!("{prefix}.ffn"), dim, ffn_hidden),
        })
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) -> Result<(), NnError> {
        self.ln_attn.init(params)?;
        self.attn.init(params, rng)?;
        self.ln_ffn.init(params)?;
        self.ffn.init(params, rng)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, pos: &[i64], mask: &AttnMask) -> Result<Var, NnError> {
        let h = self.ln_attn.forward(g, x)?;
        let a = self.attn.forward(g, h, h, pos, pos, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

/// A stack of [`TransformerBlock`]s sharing one mask and position vector.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerStack {
    pub fn new(
        prefix: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rel_max: Option<usize>,
    ) -> Result<Self, NnError> {
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(&format!("{prefix}.{i}"), dim, heads, ffn_hidden, rel_max))
            .collect::<Result<_, _>>()?;
        Ok(Self { blocks })
    }

    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) -> Result<(), NnError> {
        self.blocks.iter().try_for_each(|b| b.init(params, rng))
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, pos: &[i64], mask: &AttnMask) -> Result<Var, NnError> {
        for b in &self.blocks {
            x = b.forward(g, x, pos, mask)?;
        }
        Ok(x)
    }
}
