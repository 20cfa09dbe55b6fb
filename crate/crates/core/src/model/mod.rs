//! Pyramid transformer encoder with one or two transformer-parsing decoders.

pub mod checkpoint;
mod config;
pub mod gradcheck;
pub mod layers;
mod params;

pub use config::{HeadLayout, ModelConfig, Variant, GENERAL_CLASSES, TPM_CHANNEL_CHOICES, TRANSPARENCY_CLASSES};
pub use layers::{
    map_to_tokens, tokens_to_map, Linear, Norm, PatchEmbed, Reduction, ReductionKind, SpatialReductionAttention,
    TransformerBlock,
};
pub use params::{Bound, Builder, Init, ParamId, ParamSet, ParamSpec};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// One encoder stage: patch embedding, position embedding, blocks.
#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub patch: PatchEmbed,
    pub patch_norm: Norm,
    pub pos_embed: ParamId,
    /// Token grid the stored position embedding was laid out on.
    pub pos_grid: (usize, usize),
    pub blocks: Vec<TransformerBlock>,
    /// Only the last stage carries a closing norm.
    pub out_norm: Option<Norm>,
    pub channels: usize,
}

impl EncoderStage {
    /// `[B,C_in,H,W] -> ([B,N,C], grid)`.
    pub fn forward<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        x: &Var<'t, T>,
    ) -> Result<(Var<'t, T>, (usize, usize))> {
        let s = x.shape();
        let (b, h, w) = (s[0], s[2], s[3]);
        let grid = (h / self.patch.patch, w / self.patch.patch);
        let tokens = self.patch_norm.forward(p, &self.patch.tokens(p, x)?)?;
        let pos = self.position_embedding(p, grid)?;
        let mut t = tokens.add(&pos.broadcast_to(&[b, grid.0 * grid.1, self.channels])?)?;
        for block in &self.blocks {
            t = block.forward(p, &t, grid)?;
        }
        if let Some(norm) = &self.out_norm {
            t = norm.forward(p, &t)?;
        }
        Ok((t, grid))
    }

    /// Stored embedding `[1,N,C]`, bilinearly resized when `grid` differs.
    pub fn position_embedding<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        grid: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let stored = p.var(self.pos_embed);
        if grid == self.pos_grid {
            return Ok(stored.clone());
        }
        let map = tokens_to_map(stored, self.pos_grid)?;
        map_to_tokens(&map.bilinear_resize(grid.0, grid.1)?)
    }
}

/// Transformer parsing module: project, one block at native grid, resize.
#[derive(Debug, Clone)]
pub struct Tpm {
    pub proj: Linear,
    pub block: TransformerBlock,
}

impl Tpm {
    /// `[B,C_i,h,w] -> [B,D,out.0,out.1]`.
    pub fn forward<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        feature: &Var<'t, T>,
        out: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let s = feature.shape();
        if s.len() != 4 || s[1] != self.proj.fan_in {
            return Err(Error::invalid(
                "tpm_forward",
                format!("feature {s:?} does not match a {}-channel stage", self.proj.fan_in),
            ));
        }
        let grid = (s[2], s[3]);
        let tokens = self.proj.forward(p, &map_to_tokens(feature)?)?;
        let map = tokens_to_map(&self.block.forward(p, &tokens, grid)?, grid)?;
        if grid == out {
            Ok(map)
        } else {
            map.bilinear_resize(out.0, out.1)
        }
    }
}

/// Four TPMs fused top-down plus a per-pixel classifier.
#[derive(Debug, Clone)]
pub struct DecodeHead {
    pub name: &'static str,
    pub classes: usize,
    pub tpms: Vec<Tpm>,
    pub classifier: Linear,
}

impl DecodeHead {
    /// Fused stride-4 features `[B,D,H/4,W/4]`.
    pub fn fuse<'t, T: Element>(&self, p: &Bound<'t, T>, pyr: &PyramidFeatures<'t, T>) -> Result<Var<'t, T>> {
        let s = pyr.levels[0].shape();
        let out = (s[2], s[3]);
        let mut fused: Option<Var<'t, T>> = None;
        for (tpm, level) in self.tpms.iter().zip(&pyr.levels).rev() {
            let d = tpm.forward(p, level, out)?;
            fused = Some(match fused {
                Some(acc) => d.add(&acc)?,
                None => d,
            });
        }
        Ok(fused.expect("four stages"))
    }

    /// Logits `[B,K,H,W]` at the input resolution.
    pub fn forward<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        pyr: &PyramidFeatures<'t, T>,
        input: (usize, usize),
    ) -> Result<Var<'t, T>> {
        let fused = self.fuse(p, pyr)?;
        let s = fused.shape();
        let grid = (s[2], s[3]);
        let logits = tokens_to_map(&self.classifier.forward(p, &map_to_tokens(&fused)?)?, grid)?;
        logits.bilinear_resize(input.0, input.1)
    }
}

/// Encoder outputs at strides 4, 8, 16 and 32, each `[B,C_i,h_i,w_i]`.
#[derive(Clone)]
pub struct PyramidFeatures<'t, T: Element> {
    pub levels: [Var<'t, T>; 4],
}

impl<T: Element> PyramidFeatures<'_, T> {
    pub fn shapes(&self) -> [Vec<usize>; 4] {
        std::array::from_fn(|i| self.levels[i].shape().to_vec())
    }
}

pub struct DualHeadOutput<'t, T: Element> {
    /// `[B,13,H,W]`.
    pub general_logits: Var<'t, T>,
    /// `[B,12,H,W]`, background first.
    pub trans_logits: Var<'t, T>,
}

/// Architecture description: parameter layout and forward wiring, no values.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub stages: Vec<EncoderStage>,
    pub heads: Vec<DecodeHead>,
    specs: Vec<ParamSpec>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::default();
        let eps = config.layer_norm_eps;
        let strides = config.stage_strides();
        let stages = b.scoped("encoder", |b| {
            let mut in_ch = 3;
            (0..4)
                .map(|i| {
                    let c = config.stage_channels[i];
                    let pos_grid = (config.pos_embed_size.0 / strides[i], config.pos_embed_size.1 / strides[i]);
                    let stage = b.scoped(format!("stage{}", i + 1), |b| EncoderStage {
                        patch: PatchEmbed::new(b, "patch_embed", in_ch, c, config.patch_sizes[i]),
                        patch_norm: Norm::new(b, "patch_norm", c, eps),
                        pos_embed: b.add(
                            "pos_embed",
                            &[1, pos_grid.0 * pos_grid.1, c],
                            Init::TruncNormal(layers::INIT_STD),
                        ),
                        pos_grid,
                        blocks: (0..config.stage_depths[i])
                            .map(|j| {
                                TransformerBlock::new(
                                    b,
                                    &format!("block{j}"),
                                    c,
                                    config.stage_heads[i],
                                    config.sr_ratios[i],
                                    config.mlp_ratios[i],
                                    ReductionKind::Projection,
                                    eps,
                                )
                            })
                            .collect(),
                        out_norm: (i == 3).then(|| Norm::new(b, "norm", c, eps)),
                        channels: c,
                    });
                    in_ch = c;
                    stage
                })
                .collect()
        });
        let d = config.tpm_channels;
        let heads = b.scoped("decoder", |b| {
            config
                .heads
                .heads()
                .into_iter()
                .map(|(name, classes)| {
                    b.scoped(name, |b| DecodeHead {
                        name,
                        classes,
                        tpms: (0..4)
                            .map(|i| {
                                b.scoped(format!("tpm{}", i + 1), |b| Tpm {
                                    proj: Linear::new(b, "proj", config.stage_channels[i], d),
                                    block: TransformerBlock::new(
                                        b,
                                        "block",
                                        d,
                                        config.tpm_heads(i),
                                        config.sr_ratios[i],
                                        config.tpm_mlp_ratio,
                                        ReductionKind::Pool,
                                        eps,
                                    ),
                                })
                            })
                            .collect(),
                        classifier: Linear::new(b, "classifier", d, classes),
                    })
                })
                .collect()
        });
        Ok(Self {
            config,
            stages,
            heads,
            specs: b.finish(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    pub fn init_params<T: Element>(&self, seed: u64) -> ParamSet<T> {
        ParamSet::init(&self.specs, seed)
    }

    /// Checks that `params` was laid out for this architecture.
    pub fn check_params<T: Element>(&self, params: &ParamSet<T>) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::Validation(format!(
                "{} parameters supplied, model has {}",
                params.len(),
                self.specs.len()
            )));
        }
        for ((spec, name), t) in self.specs.iter().zip(params.names()).zip(params.tensors()) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::Validation(format!(
                    "parameter {name} {:?} does not match {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn head(&self, name: &str) -> Option<&DecodeHead> {
        self.heads.iter().find(|h| h.name == name)
    }

    fn check_image<T: Element>(&self, image: &Var<'_, T>) -> Result<(usize, usize)> {
        match *image.shape() {
            [_, 3, h, w] => {
                self.config.check_input((h, w))?;
                Ok((h, w))
            }
            ref s => Err(Error::Validation(format!("image must be [B,3,H,W], got {s:?}"))),
        }
    }

    pub fn encode_pyramid<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        image: &Var<'t, T>,
    ) -> Result<PyramidFeatures<'t, T>> {
        self.check_image(image)?;
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            let (tokens, grid) = stage.forward(p, &x)?;
            x = tokens_to_map(&tokens, grid)?;
            levels.push(x.clone());
        }
        Ok(PyramidFeatures {
            levels: levels.try_into().map_err(|_| Error::Tape("encoder stage count".into()))?,
        })
    }

    /// Logits of every head, in [`HeadLayout::heads`] order.
    pub fn forward<'t, T: Element>(&self, p: &Bound<'t, T>, image: &Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let input = self.check_image(image)?;
        let pyr = self.encode_pyramid(p, image)?;
        self.heads.iter().map(|h| h.forward(p, &pyr, input)).collect()
    }

    pub fn forward_dual<'t, T: Element>(
        &self,
        p: &Bound<'t, T>,
        image: &Var<'t, T>,
    ) -> Result<DualHeadOutput<'t, T>> {
        if !self.config.heads.is_dual() {
            return Err(Error::Config("forward_dual needs a dual-head configuration".into()));
        }
        let mut out = self.forward(p, image)?.into_iter();
        Ok(DualHeadOutput {
            general_logits: out.next().expect("general head"),
            trans_logits: out.next().expect("transparency head"),
        })
    }

    /// Inference without gradient bookkeeping: logits of every head.
    pub fn predict<T: Element>(&self, params: &ParamSet<T>, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_params(params)?;
        let tape = Tape::inference();
        let p = params.bind(&tape, false);
        let x = tape.constant(image.clone());
        Ok(self.forward(&p, &x)?.into_iter().map(Var::into_value).collect())
    }
}

/// Per-pixel argmax over the class axis of `[B,K,H,W]` logits; ties take
/// the lower class id. Returns `B` masks of `H·W` ids.
pub fn argmax_masks<T: Element>(logits: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
    let &[b, k, h, w] = logits.shape() else {
        return Err(Error::invalid("argmax", format!("expected [B,K,H,W], got {:?}", logits.shape())));
    };
    if k == 0 || k > 256 {
        return Err(Error::invalid("argmax", format!("{k} classes")));
    }
    let plane = h * w;
    let data = logits.data();
    Ok((0..b)
        .map(|n| {
            let base = n * k * plane;
            (0..plane)
                .map(|i| {
                    let mut best = 0;
                    let mut best_v = data[base + i];
                    for c in 1..k {
                        let v = data[base + c * plane + i];
                        if v > best_v {
                            best = c;
                            best_v = v;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}
