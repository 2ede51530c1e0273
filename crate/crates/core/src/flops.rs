//! Analytical multiply-accumulate counts. One MAC counts as one FLOP.

use std::fmt;

use serde::Serialize;

use crate::config::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FlopsBreakdown {
    pub patch_embed: u64,
    pub encoder_coarse: u64,
    pub encoder_fine: u64,
    pub merge_mlp: u64,
    pub decoder: u64,
    pub quality_mlp: u64,
    pub total: u64,
}

impl FlopsBreakdown {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }

    fn parts(&self) -> [(&'static str, u64); 6] {
        [
            ("patch_embed", self.patch_embed),
            ("encoder_coarse", self.encoder_coarse),
            ("encoder_fine", self.encoder_fine),
            ("merge_mlp", self.merge_mlp),
            ("decoder", self.decoder),
            ("quality_mlp", self.quality_mlp),
        ]
    }
}

impl fmt::Display for FlopsBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>16} {:>10}", "component", "MACs", "GFLOPs")?;
        for (name, v) in self.parts() {
            writeln!(f, "{name:<16} {v:>16} {:>10.3}", v as f64 / 1e9)?;
        }
        write!(
            f,
            "{:<16} {:>16} {:>10.3}",
            "total",
            self.total,
            self.gflops()
        )
    }
}

/// One pre-norm block on `n` tokens: QKV and output projections (4nD²), the
/// 4× MLP (8nD²), and the two attention products (2n²D).
pub fn encoder_layer_macs(n: usize, dim: usize) -> u64 {
    let (n, d) = (n as u64, dim as u64);
    12 * n * d * d + 2 * n * n * d
}

/// MACs for one sample. With `refined == false` only the coarse stage is counted.
pub fn flops_estimate(cfg: &ModelConfig, refined: bool) -> FlopsBreakdown {
    let d = cfg.dim as u64;
    let m = cfg.keypoints as u64;
    let depth = cfg.depth as u64;
    let hm = cfg.heatmap_len() as u64;
    let pd = cfg.patch_dim() as u64;

    let mut b = FlopsBreakdown {
        patch_embed: cfg.n_coarse() as u64 * pd * d,
        encoder_coarse: depth * encoder_layer_macs(cfg.coarse_tokens(), cfg.dim),
        decoder: m * d * hm,
        quality_mlp: d * (d / 2) + d / 2,
        ..Default::default()
    };
    if refined {
        b.patch_embed += cfg.n_fine() as u64 * pd * d;
        b.encoder_fine = depth * encoder_layer_macs(cfg.fine_stage_tokens(), cfg.dim);
        b.merge_mlp = 2 * d * d * cfg.n_high() as u64;
        b.decoder += m * d * hm;
    }
    b.total = b.parts().iter().map(|(_, v)| v).sum();
    b
}
