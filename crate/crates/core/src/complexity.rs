//! Analytic parameter and FLOP accounting.
//!
//! Counts come from layer shapes alone; no weights are built. Matrix
//! products are tallied as multiply-accumulates and reported with the
//! MAC=2 convention (`flops = 2·macs + elementwise`). The MAC=1 figure
//! (`macs + elementwise`) is exposed too, because published tables for this
//! family of models are usually MAC counts labelled as FLOPs.
//!
//! Elementwise costs per element: layer norm 7, gelu 8, softmax 5, residual
//! or bias add 1, average pooling 1 per input, bilinear resize 7 per output.

use serde::Serialize;

use crate::error::Result;
use crate::model::{ModelConfig, ReductionKind};

pub const NORM_FLOPS: u64 = 7;
pub const GELU_FLOPS: u64 = 8;
pub const SOFTMAX_FLOPS: u64 = 5;
pub const RESIZE_FLOPS: u64 = 7;

/// One layer (or parameter-free operation) of the forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    /// Non-multiply-accumulate work: norms, activations, adds, resizes.
    pub elementwise: u64,
}

impl LayerCost {
    /// FLOPs under MAC=2.
    pub fn flops(&self) -> u64 {
        2 * self.macs + self.elementwise
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub variant: String,
    pub dual_head: bool,
    pub tpm_channels: usize,
    pub input_size: (usize, usize),
    pub rows: Vec<LayerCost>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub mparams: f64,
    /// MAC=2 convention.
    pub gflops: f64,
    /// MAC=1 convention.
    pub gflops_mac1: f64,
}

impl ComplexityReport {
    pub fn totals(&self) -> Totals {
        let params: u64 = self.rows.iter().map(|r| r.params).sum();
        let macs: u64 = self.rows.iter().map(|r| r.macs).sum();
        let elementwise: u64 = self.rows.iter().map(|r| r.elementwise).sum();
        let flops = 2 * macs + elementwise;
        Totals {
            params,
            macs,
            flops,
            mparams: params as f64 / 1e6,
            gflops: flops as f64 / 1e9,
            gflops_mac1: (macs + elementwise) as f64 / 1e9,
        }
    }

    /// Rows merged by their first `depth` dotted name components, in order
    /// of first appearance.
    pub fn grouped(&self, depth: usize) -> Vec<LayerCost> {
        let mut out: Vec<LayerCost> = Vec::new();
        for r in &self.rows {
            let key = r.name.split('.').take(depth.max(1)).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|g| g.name == key) {
                Some(g) => {
                    g.params += r.params;
                    g.macs += r.macs;
                    g.elementwise += r.elementwise;
                }
                None => out.push(LayerCost {
                    name: key,
                    ..r.clone()
                }),
            }
        }
        out
    }

    /// Aligned table of `rows` followed by the totals.
    pub fn to_text(&self, rows: &[LayerCost]) -> String {
        let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
        let mut s = format!(
            "{} {}-head, tpm {} @ {}x{}\n{:<width$}  {:>12}  {:>16}\n",
            self.variant,
            if self.dual_head { "dual" } else { "single" },
            self.tpm_channels,
            self.input_size.0,
            self.input_size.1,
            "layer",
            "params",
            "flops"
        );
        for r in rows {
            s += &format!("{:<width$}  {:>12}  {:>16}\n", r.name, r.params, r.flops());
        }
        let t = self.totals();
        s += &format!(
            "{:<width$}  {:>12}  {:>16}\n{:.3} MParams, {:.3} GFLOPs (MAC=2), {:.3} GFLOPs (MAC=1)\n",
            "total", t.params, t.flops, t.mparams, t.gflops, t.gflops_mac1
        );
        s
    }

    /// One JSON object per row, then one `{"total": ...}` object.
    pub fn to_json_lines(&self, rows: &[LayerCost]) -> Result<String> {
        let mut s = String::new();
        for r in rows {
            let mut v = serde_json::to_value(r)?;
            v["flops"] = r.flops().into();
            s += &v.to_string();
            s.push('\n');
        }
        let total = serde_json::json!({
            "total": self.totals(),
            "variant": self.variant,
            "dual_head": self.dual_head,
            "tpm_channels": self.tpm_channels,
            "input_size": [self.input_size.0, self.input_size.1],
        });
        s += &total.to_string();
        s.push('\n');
        Ok(s)
    }
}

/// Parameter count at the config's own input size. Parameter totals do not
/// depend on the resolution.
pub fn count_params(config: &ModelConfig) -> Result<ComplexityReport> {
    count_flops(config, config.input_size)
}

/// Full per-layer accounting for one forward pass at `input_size`, batch 1.
pub fn count_flops(config: &ModelConfig, input_size: (usize, usize)) -> Result<ComplexityReport> {
    config.validate()?;
    config.check_input(input_size)?;
    let mut m = Meter::default();
    let (h_in, w_in) = (input_size.0 as u64, input_size.1 as u64);
    let strides = config.stage_strides();
    let mut in_ch = 3u64;
    let mut grids = [(0u64, 0u64); 4];
    for i in 0..4 {
        let c = config.stage_channels[i] as u64;
        let p = config.patch_sizes[i] as u64;
        let s = strides[i] as u64;
        let grid = (h_in / s, w_in / s);
        grids[i] = grid;
        let n = grid.0 * grid.1;
        let pre = format!("encoder.stage{}", i + 1);
        m.linear(&format!("{pre}.patch_embed"), n, in_ch * p * p, c);
        m.norm(&format!("{pre}.patch_norm"), n, c);
        let pos = (
            (config.pos_embed_size.0 / strides[i]) as u64,
            (config.pos_embed_size.1 / strides[i]) as u64,
        );
        let resize = if pos == grid { 0 } else { RESIZE_FLOPS * n * c };
        m.push(&format!("{pre}.pos_embed"), pos.0 * pos.1 * c, 0, resize + n * c);
        for j in 0..config.stage_depths[i] {
            m.block(
                &format!("{pre}.block{j}"),
                grid,
                c,
                config.stage_heads[i] as u64,
                config.sr_ratios[i] as u64,
                config.mlp_ratios[i] as u64,
                ReductionKind::Projection,
            );
        }
        if i == 3 {
            m.norm(&format!("{pre}.norm"), n, c);
        }
        in_ch = c;
    }
    let d = config.tpm_channels as u64;
    let out = grids[0];
    let n_out = out.0 * out.1;
    for (name, classes) in config.heads.heads() {
        let pre = format!("decoder.{name}");
        for i in (0..4).rev() {
            let t = format!("{pre}.tpm{}", i + 1);
            let grid = grids[i];
            let n = grid.0 * grid.1;
            m.linear(&format!("{t}.proj"), n, config.stage_channels[i] as u64, d);
            m.block(
                &format!("{t}.block"),
                grid,
                d,
                config.tpm_heads(i) as u64,
                config.sr_ratios[i] as u64,
                config.tpm_mlp_ratio as u64,
                ReductionKind::Pool,
            );
            if grid != out {
                m.push(&format!("{t}.resize"), 0, 0, RESIZE_FLOPS * n_out * d);
            }
            if i < 3 {
                m.push(&format!("{t}.fuse"), 0, 0, n_out * d);
            }
        }
        let k = classes as u64;
        m.linear(&format!("{pre}.classifier"), n_out, d, k);
        m.push(&format!("{pre}.upsample"), 0, 0, RESIZE_FLOPS * h_in * w_in * k);
    }
    Ok(ComplexityReport {
        variant: config.variant.name().to_string(),
        dual_head: config.heads.is_dual(),
        tpm_channels: config.tpm_channels,
        input_size,
        rows: m.rows,
    })
}

/// `tokens` rows through an affine map `fan_in -> fan_out` with bias.
pub fn linear_cost(name: &str, tokens: u64, fan_in: u64, fan_out: u64) -> LayerCost {
    LayerCost {
        name: name.to_string(),
        params: fan_in * fan_out + fan_out,
        macs: tokens * fan_in * fan_out,
        elementwise: tokens * fan_out,
    }
}

#[derive(Default)]
struct Meter {
    rows: Vec<LayerCost>,
}

impl Meter {
    fn push(&mut self, name: &str, params: u64, macs: u64, elementwise: u64) {
        self.rows.push(LayerCost {
            name: name.to_string(),
            params,
            macs,
            elementwise,
        });
    }

    fn linear(&mut self, name: &str, n: u64, fan_in: u64, fan_out: u64) {
        self.rows.push(linear_cost(name, n, fan_in, fan_out));
    }

    fn norm(&mut self, name: &str, n: u64, c: u64) {
        self.push(name, 2 * c, 0, NORM_FLOPS * n * c);
    }

    #[allow(clippy::too_many_arguments)]
    fn block(&mut self, pre: &str, grid: (u64, u64), c: u64, heads: u64, r: u64, mlp: u64, kind: ReductionKind) {
        let n = grid.0 * grid.1;
        let nk = if r > 1 { (grid.0 / r) * (grid.1 / r) } else { n };
        self.norm(&format!("{pre}.norm1"), n, c);
        let a = format!("{pre}.attn");
        self.linear(&format!("{a}.q"), n, c, c);
        self.push(&format!("{a}.q_scale"), 0, 0, n * c);
        if r > 1 {
            match kind {
                ReductionKind::Projection => self.linear(&format!("{a}.sr"), nk, c * r * r, c),
                ReductionKind::Pool => self.push(&format!("{a}.pool"), 0, 0, n * c),
            }
            self.norm(&format!("{a}.sr_norm"), nk, c);
        }
        self.linear(&format!("{a}.k"), nk, c, c);
        self.linear(&format!("{a}.v"), nk, c, c);
        // Summed over heads: h·N·N_k·(C/h).
        self.push(&format!("{a}.scores"), 0, n * nk * c, 0);
        self.push(&format!("{a}.softmax"), 0, 0, SOFTMAX_FLOPS * heads * n * nk);
        self.push(&format!("{a}.context"), 0, n * nk * c, 0);
        self.linear(&format!("{a}.proj"), n, c, c);
        self.push(&format!("{pre}.residual1"), 0, 0, n * c);
        self.norm(&format!("{pre}.norm2"), n, c);
        self.linear(&format!("{pre}.fc1"), n, c, c * mlp);
        self.push(&format!("{pre}.gelu"), 0, 0, GELU_FLOPS * n * c * mlp);
        self.linear(&format!("{pre}.fc2"), n, c * mlp, c);
        self.push(&format!("{pre}.residual2"), 0, 0, n * c);
    }
}
