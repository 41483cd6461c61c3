//! Parameterized building blocks shared by the encoder and decoder stacks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{xavier, AttentionMask, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// One forward pass: the tape, parameters bound to it, and the dropout
/// stream (`None` in evaluation mode).
pub struct Ctx<'a> {
    pub tape: Tape,
    pub params: Bound<'a>,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params: Bound::new(store),
            rng: None,
        }
    }

    pub fn train(store: &'a ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            params: Bound::new(store),
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.params.var(&mut self.tape, id)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.tape.dropout(x, rate, self.rng.as_mut())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }
}

/// Registers parameters under a dotted prefix.
pub struct Builder<'s, R: Rng> {
    pub store: &'s mut ParamStore,
    pub rng: &'s mut R,
}

impl<R: Rng> Builder<'_, R> {
    pub fn add(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        self.store.insert(name, t)
    }

    pub fn matrix(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let t = xavier(self.rng, fan_in, fan_out);
        self.store.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.store.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.store.insert(name, Tensor::ones(shape))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.matrix(&format!("{name}.weight"), fan_in, fan_out)?,
            bias: b.zeros(&format!("{name}.bias"), vec![fan_out])?,
        })
    }

    /// Zero-initialized map; starts as the constant zero function.
    pub fn zeroed<R: Rng>(b: &mut Builder<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: b.zeros(&format!("{name}.weight"), vec![fan_in, fan_out])?,
            bias: b.zeros(&format!("{name}.bias"), vec![fan_out])?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        ctx.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.ones(&format!("{name}.gamma"), vec![dim])?,
            beta: b.zeros(&format!("{name}.beta"), vec![dim])?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.tape.layer_norm(x, g, b)
    }
}

/// Multi-head self-attention with input and output projections.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::new(b, &format!("{name}.query"), dim, dim)?,
            key: Linear::new(b, &format!("{name}.key"), dim, dim)?,
            value: Linear::new(b, &format!("{name}.value"), dim, dim)?,
            output: Linear::new(b, &format!("{name}.output"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let q = self.query.forward(ctx, x)?;
        let k = self.key.forward(ctx, x)?;
        let v = self.value.forward(ctx, x)?;
        let a = ctx.tape.attention(q, k, v, self.heads, mask)?;
        self.output.forward(ctx, a)
    }
}

/// Post-norm transformer layer: attention then feed-forward, each wrapped
/// in dropout, residual, and layer norm.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: SelfAttention,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
    pub dropout: f64,
}

impl TransformerLayer {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            attention: SelfAttention::new(b, &format!("{name}.attn"), dim, heads)?,
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), dim)?,
            ff_in: Linear::new(b, &format!("{name}.ff_in"), dim, ff_dim)?,
            ff_out: Linear::new(b, &format!("{name}.ff_out"), ff_dim, dim)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), dim)?,
            dropout,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let a = self.attention.forward(ctx, x, mask)?;
        let a = ctx.dropout(a, self.dropout)?;
        let h = ctx.tape.add(x, a)?;
        let h = self.norm1.forward(ctx, h)?;
        let f = self.ff_in.forward(ctx, h)?;
        let f = ctx.tape.relu(f);
        let f = self.ff_out.forward(ctx, f)?;
        let f = ctx.dropout(f, self.dropout)?;
        let y = ctx.tape.add(h, f)?;
        self.norm2.forward(ctx, y)
    }
}
