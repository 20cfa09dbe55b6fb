//! Building blocks shared by the encoder and the decoder heads.

use super::params::{Bound, Builder, Init, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        b.scoped(name, |b| Self {
            weight: b.add("weight", &[fan_in, fan_out], Init::TruncNormal(INIT_STD)),
            bias: b.add("bias", &[fan_out], Init::Zeros),
            fan_in,
            fan_out,
        })
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(p.var(self.weight), Some(p.var(self.bias)))
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn new(b: &mut Builder, name: &str, channels: usize, eps: f64) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.add("weight", &[channels], Init::Ones),
            beta: b.add("bias", &[channels], Init::Zeros),
            eps,
        })
    }

    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), T::lit(self.eps))
    }
}

/// Non-overlapping `k×k` patch projection, stored conv-style as `[E, C, k, k]`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub weight: ParamId,
    pub bias: ParamId,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new(b: &mut Builder, name: &str, in_ch: usize, out_ch: usize, patch: usize) -> Self {
        b.scoped(name, |b| Self {
            weight: b.add("weight", &[out_ch, in_ch, patch, patch], Init::TruncNormal(INIT_STD)),
            bias: b.add("bias", &[out_ch], Init::Zeros),
            patch,
        })
    }

    /// `[B,C,H,W] -> [B, (H/p)·(W/p), E]`.
    pub fn tokens<'t, T: Element>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.patch_tokens(p.var(self.weight), p.var(self.bias), self.patch, self.patch)
    }
}

/// How keys and values are spatially reduced before attention.
#[derive(Debug, Clone)]
pub enum Reduction {
    None,
    /// Strided `r×r` patch projection followed by layer norm.
    Projection { embed: PatchEmbed, norm: Norm, ratio: usize },
    /// Parameter-free `r×r` average pooling followed by layer norm.
    Pool { norm: Norm, ratio: usize },
}

impl Reduction {
    pub fn ratio(&self) -> usize {
        match self {
            Reduction::None => 1,
            Reduction::Projection { ratio, .. } | Reduction::Pool { ratio, .. } => *ratio,
        }
    }
}

/// Multi-head attention whose keys/values come from a spatially reduced grid.
#[derive(Debug, Clone)]
pub struct SpatialReductionAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub reduction: Reduction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReductionKind {
    Projection,
    Pool,
}

impl SpatialReductionAttention {
    pub fn new(
        b: &mut Builder,
        channels: usize,
        heads: usize,
        ratio: usize,
        kind: ReductionKind,
        eps: f64,
    ) -> Self {
        b.scoped("attn", |b| {
            let q = Linear::new(b, "q", channels, channels);
            let k = Linear::new(b, "k", channels, channels);
            let v = Linear::new(b, "v", channels, channels);
            let proj = Linear::new(b, "proj", channels, channels);
            let reduction = match (ratio, kind) {
                (1, _) => Reduction::None,
                (_, ReductionKind::Projection) => Reduction::Projection {
                    embed: PatchEmbed::new(b, "sr", channels, channels, ratio),
                    norm: Norm::new(b, "sr_norm", channels, eps),
                    ratio,
                },
                (_, ReductionKind::Pool) => Reduction::Pool {
                    norm: Norm::new(b, "sr_norm", channels, eps),
                    ratio,
                },
            };
            Self {
                q,
                k,
                v,
                proj,
                heads,
                reduction,
            }
        })
    }

    /// Key/value source tokens after spatial reduction.
    fn reduce<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        x: &Var<'t, T>,
        grid: (usize, usize),
    ) -> Result<Var<'t, T>> {
        match &self.reduction {
            Reduction::None => Ok(x.clone()),
            Reduction::Projection { embed, norm, .. } => {
                let (b, _, c) = dims3(x)?;
                let spatial = x.permute(&[0, 2, 1])?.reshape(&[b, c, grid.0, grid.1])?;
                norm.forward(p, &embed.tokens(p, &spatial)?)
            }
            Reduction::Pool { norm, ratio } => norm.forward(p, &x.avg_pool_tokens(grid, *ratio)?),
        }
    }

    /// Attention over tokens `[B, N, C]` laid out on `grid` (`N = h·w`).
    pub fn forward<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        x: &Var<'t, T>,
        grid: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let (b, n, c) = dims3(x)?;
        if n != grid.0 * grid.1 {
            return Err(Error::invalid(
                "sra_attention",
                format!("{n} tokens do not fill a {}x{} grid", grid.0, grid.1),
            ));
        }
        if c % self.heads != 0 {
            return Err(Error::invalid("sra_attention", format!("{c} channels, {} heads", self.heads)));
        }
        let d = c / self.heads;
        let h = self.heads;
        let kv = self.reduce(p, x, grid)?;
        let nk = kv.shape()[1];
        // Scaling q is cheaper than scaling the N×N_kv score matrix.
        let scale = T::one() / T::lit(d as f64).sqrt();
        let q = self.q.forward(p, x)?.scale(scale).reshape(&[b, n, h, d])?.permute(&[0, 2, 1, 3])?;
        let kt = self.k.forward(p, &kv)?.reshape(&[b, nk, h, d])?.permute(&[0, 2, 3, 1])?;
        let v = self.v.forward(p, &kv)?.reshape(&[b, nk, h, d])?.permute(&[0, 2, 1, 3])?;
        let weights = q.matmul(&kt)?.softmax(3)?;
        let out = weights.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, c])?;
        self.proj.forward(p, &out)
    }

    /// Attention weights `[B, heads, N, N_kv]`; used by tests and diagnostics.
    pub fn attention_weights<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        x: &Var<'t, T>,
        grid: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let (b, n, c) = dims3(x)?;
        let (h, d) = (self.heads, c / self.heads);
        let kv = self.reduce(p, x, grid)?;
        let nk = kv.shape()[1];
        let scale = T::one() / T::lit(d as f64).sqrt();
        let q = self.q.forward(p, x)?.scale(scale).reshape(&[b, n, h, d])?.permute(&[0, 2, 1, 3])?;
        let kt = self.k.forward(p, &kv)?.reshape(&[b, nk, h, d])?.permute(&[0, 2, 3, 1])?;
        q.matmul(&kt)?.softmax(3)
    }
}

/// Pre-norm transformer block: `x + attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: Norm,
    pub attn: SpatialReductionAttention,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        channels: usize,
        heads: usize,
        sr_ratio: usize,
        mlp_ratio: usize,
        kind: ReductionKind,
        eps: f64,
    ) -> Self {
        b.scoped(name, |b| Self {
            norm1: Norm::new(b, "norm1", channels, eps),
            attn: SpatialReductionAttention::new(b, channels, heads, sr_ratio, kind, eps),
            norm2: Norm::new(b, "norm2", channels, eps),
            fc1: Linear::new(b, "fc1", channels, channels * mlp_ratio),
            fc2: Linear::new(b, "fc2", channels * mlp_ratio, channels),
        })
    }

    pub fn forward<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        x: &Var<'t, T>,
        grid: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let x = x.add(&self.attn.forward(p, &self.norm1.forward(p, x)?, grid)?)?;
        let hidden = self.fc1.forward(p, &self.norm2.forward(p, &x)?)?.gelu();
        x.add(&self.fc2.forward(p, &hidden)?)
    }
}

pub(crate) fn dims3<T: Element>(x: &Var<'_, T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, n, c] => Ok((b, n, c)),
        ref s => Err(Error::invalid("tokens", format!("expected [B,N,C], got {s:?}"))),
    }
}

/// `[B, h·w, C] -> [B, C, h, w]`.
pub fn tokens_to_map<'t, T: Element>(x: &Var<'t, T>, grid: (usize, usize)) -> Result<Var<'t, T>> {
    let (b, _, c) = dims3(x)?;
    x.reshape(&[b, grid.0, grid.1, c])?.permute(&[0, 3, 1, 2])
}

/// `[B, C, h, w] -> [B, h·w, C]`.
pub fn map_to_tokens<'t, T: Element>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    match *x.shape() {
        [b, c, h, w] => x.permute(&[0, 2, 3, 1])?.reshape(&[b, h * w, c]),
        ref s => Err(Error::invalid("feature map", format!("expected [B,C,H,W], got {s:?}"))),
    }
}
