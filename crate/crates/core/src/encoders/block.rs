//! Pre-norm residual attention block and its attention-free variant.

use clim_tensor::{lit, Real, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.randn(format!("{name}.w"), [fan_in, fan_out], std, rng);
        let b = bias.then(|| store.full(format!("{name}.b"), [fan_out], 0.0));
        Self { w, b }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(p[self.w])?;
        Ok(match self.b {
            Some(b) => y.add_row(p[b])?,
            None => y,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gain: store.full(format!("{name}.gain"), [width], 1.0),
            bias: store.full(format!("{name}.bias"), [width], 0.0),
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(x.layer_norm(p[self.gain], p[self.bias], lit(LN_EPS))?)
    }
}

/// `x + Proj(SoftMax(q kᵀ / c) v)` followed by `y + FFN(y)`, with `q, k, v`
/// taken from one fused projection of `LayerNorm(x)`.
#[derive(Debug, Clone)]
pub struct ResAttnBlock {
    pub width: usize,
    pub heads: usize,
    pub ln_1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln_2: LayerNorm,
    pub fc_1: Linear,
    pub fc_2: Linear,
}

impl ResAttnBlock {
    /// `depth` is the number of blocks in the stack; residual output layers are
    /// scaled down by `1/sqrt(2·depth)`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = width * mlp_ratio;
        let std_in = (width as f64).powf(-0.5);
        let residual = (2.0 * depth.max(1) as f64).powf(-0.5);
        Self {
            width,
            heads,
            ln_1: LayerNorm::new(store, &format!("{name}.ln_1"), width),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), width, 3 * width, std_in, true, rng),
            proj: Linear::new(
                store,
                &format!("{name}.attn.proj"),
                width,
                width,
                std_in * residual,
                true,
                rng,
            ),
            ln_2: LayerNorm::new(store, &format!("{name}.ln_2"), width),
            fc_1: Linear::new(store, &format!("{name}.mlp.fc_1"), width, hidden, std_in, true, rng),
            fc_2: Linear::new(
                store,
                &format!("{name}.mlp.fc_2"),
                hidden,
                width,
                (hidden as f64).powf(-0.5) * residual,
                true,
                rng,
            ),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn ffn<'t, T: Real>(&self, p: &Bound<'t, T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.ln_2.forward(p, y)?;
        let h = self.fc_1.forward(p, h)?.gelu();
        let h = self.fc_2.forward(p, h)?;
        Ok(y.add(h)?)
    }

    /// Multi-head attention mixing of `qkv` rows, sequence by sequence.
    fn attend<'t, T: Real>(
        &self,
        qkv: Var<'t, T>,
        seqs: usize,
        len: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        let (d, dh) = (self.width, self.head_dim());
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let mut outs = Vec::with_capacity(seqs);
        for s in 0..seqs {
            let rows = if seqs == 1 { qkv } else { qkv.slice(0, s * len, len)? };
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = rows.slice(1, h * dh, dh)?;
                let k = rows.slice(1, d + h * dh, dh)?;
                let v = rows.slice(1, 2 * d + h * dh, dh)?;
                let mut logits = q.matmul_t(k)?.scale(scale);
                if let Some(m) = mask {
                    logits = logits.add_const(m)?;
                }
                heads.push(logits.softmax(1)?.matmul(v)?);
            }
            outs.push(Var::concat(&heads, 1)?);
        }
        Ok(if seqs == 1 { outs[0] } else { Var::concat(&outs, 0)? })
    }

    /// Standard block over `seqs` stacked sequences of `len` tokens each
    /// (`x` is `[seqs·len, width]`). `mask` is added to every `len × len`
    /// attention logit matrix.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        seqs: usize,
        len: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        let qkv = self.qkv.forward(p, self.ln_1.forward(p, x)?)?;
        let mixed = self.attend(qkv, seqs, len, mask)?;
        let y = x.add(self.proj.forward(p, mixed)?)?;
        self.ffn(p, y)
    }

    /// Attention-free variant: `y' = x + Proj(v)`, `z' = y' + FFN(y')`.
    /// Every output row depends on its own input row only.
    pub fn forward_modified<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.ln_1.forward(p, x)?;
        let w_v = p[self.qkv.w].slice(1, 2 * self.width, self.width)?;
        let mut v = h.matmul(w_v)?;
        if let Some(b) = self.qkv.b {
            v = v.add_row(p[b].slice(0, 2 * self.width, self.width)?)?;
        }
        let y = x.add(self.proj.forward(p, v)?)?;
        self.ffn(p, y)
    }

    /// Both variants from one input, sharing the layer norm and the fused
    /// `q, k, v` projection.
    pub fn forward_both<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        seqs: usize,
        len: usize,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let qkv = self.qkv.forward(p, self.ln_1.forward(p, x)?)?;
        let mixed = self.attend(qkv, seqs, len, None)?;
        let y = x.add(self.proj.forward(p, mixed)?)?;
        let v = qkv.slice(1, 2 * self.width, self.width)?;
        let y_mod = x.add(self.proj.forward(p, v)?)?;
        Ok((self.ffn(p, y)?, self.ffn(p, y_mod)?))
    }
}
