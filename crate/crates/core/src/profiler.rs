//! Analytical parameter and MAC counts.
//!
//! Parameter counts mirror exactly what [`SeparatorModel::new`] registers.
//! MACs follow the conventions of the common PyTorch op counter so that the
//! numbers are comparable with published tables:
//!
//! | layer | MACs per application |
//! |---|---|
//! | LSTM step, one direction | `4·H_o·(H_i+H_o) + 16·H_o` |
//! | Linear | `in · out` per row |
//! | LayerNorm | `4 · numel` |
//! | Conv1d | `out_numel · C_in · W` |
//! | ConvTranspose1d | `out_numel · C_in · W` (per speaker) |
//!
//! Recurrent passes run over every position of the segmented tensor
//! (`2T·S`, padding included).
//!
//! [`SeparatorModel::new`]: crate::separator::SeparatorModel::new

use std::fmt::Write as _;

use crate::dprnn::block_count;
use crate::error::Result;
use crate::layers::{Linear, ResidualRnn};
use crate::separator::ModelConfig;

/// Per-submodule contribution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BreakdownEntry {
    pub name: &'static str,
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub config: ModelConfig,
    pub seconds: f64,
    pub total_params: usize,
    pub total_macs: u64,
    pub breakdown: Vec<BreakdownEntry>,
}

fn lstm_step_macs(input: usize, hidden: usize) -> u64 {
    (4 * hidden * (input + hidden) + 16 * hidden) as u64
}

/// MACs of one residual branch application at one position.
fn branch_macs(d: usize, hidden: usize, bidirectional: bool) -> u64 {
    let dirs = if bidirectional { 2 } else { 1 };
    dirs * lstm_step_macs(d, hidden) + (dirs as usize * hidden * d) as u64 + 4 * d as u64
}

/// Builds the full report for `seconds` of input at the config's sample rate.
pub fn profile(cfg: &ModelConfig, seconds: f64) -> Result<ComplexityReport> {
    cfg.validate()?;
    let samples = (seconds * f64::from(cfg.sample_rate)).round() as usize;
    let frames = cfg.frames_for(samples)? as u64;
    let hop = cfg.hop_for(frames as usize);
    let positions = (2 * hop * block_count(frames as usize, hop)) as u64;

    let (n, w, spk) = (cfg.filters, cfg.window, cfg.speakers);
    let d = cfg.feature_dim();
    let ho = cfg.hidden_out;
    let depth = cfg.depth as u64;
    let conv_params = n * w;
    let decoded = (frames as usize - 1) * cfg.stride + w;

    let mut out = vec![BreakdownEntry {
        name: "encoder",
        params: conv_params,
        macs: (n * w) as u64 * frames,
    }];
    if cfg.is_baseline() {
        out.push(BreakdownEntry {
            name: "bottleneck",
            params: Linear::param_count(n, cfg.hidden_in),
            macs: (n * cfg.hidden_in) as u64 * frames,
        });
    }
    // every position of every group goes through each branch once per block
    let groups = cfg.groups as u64;
    if !cfg.is_baseline() {
        out.push(BreakdownEntry {
            name: "group_comm",
            params: cfg.depth * ResidualRnn::param_count(d, ho, true),
            macs: depth * positions * groups * branch_macs(d, ho, true),
        });
    }
    out.push(BreakdownEntry {
        name: "intra",
        params: cfg.depth * ResidualRnn::param_count(d, ho, true),
        macs: depth * positions * groups * branch_macs(d, ho, true),
    });
    out.push(BreakdownEntry {
        name: "inter",
        params: cfg.depth * ResidualRnn::param_count(d, ho, cfg.inter_bidirectional),
        macs: depth * positions * groups * branch_macs(d, ho, cfg.inter_bidirectional),
    });
    let (mask_in, mask_out, rows) = if cfg.is_baseline() {
        (cfg.hidden_in, spk * n, frames)
    } else {
        (d, spk * d, frames * groups)
    };
    out.push(BreakdownEntry {
        name: "mask",
        params: Linear::param_count(mask_in, mask_out),
        macs: (mask_in * mask_out) as u64 * rows,
    });
    out.push(BreakdownEntry {
        name: "decoder",
        params: conv_params,
        macs: (decoded * n * w * spk) as u64,
    });

    Ok(ComplexityReport {
        config: cfg.clone(),
        seconds,
        total_params: out.iter().map(|e| e.params).sum(),
        total_macs: out.iter().map(|e| e.macs).sum(),
        breakdown: out,
    })
}

pub fn count_model_params(cfg: &ModelConfig) -> Result<usize> {
    profile(cfg, 1.0).map(|r| r.total_params)
}

pub fn count_model_macs(cfg: &ModelConfig, seconds: f64) -> Result<u64> {
    profile(cfg, seconds).map(|r| r.total_macs)
}

/// One sweep row; ratios are `first row / this row` (so the baseline is 1.0×
/// and smaller models are above 1).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub report: ComplexityReport,
    pub params_ratio: f64,
    pub macs_ratio: f64,
}

pub fn sweep(configs: &[ModelConfig], seconds: f64) -> Result<Vec<SweepRow>> {
    let reports = configs
        .iter()
        .map(|c| profile(c, seconds))
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = reports.first() else {
        return Ok(Vec::new());
    };
    let (p0, m0) = (first.total_params as f64, first.total_macs as f64);
    Ok(reports
        .into_iter()
        .map(|r| SweepRow {
            params_ratio: p0 / r.total_params as f64,
            macs_ratio: m0 / r.total_macs as f64,
            report: r,
        })
        .collect())
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "K",
    "M",
    "N",
    "H_in",
    "H_out",
    "depth",
    "params",
    "params_ratio",
    "macs",
    "macs_ratio",
];

fn fields(row: &SweepRow) -> [String; 10] {
    let c = &row.report.config;
    [
        c.groups.to_string(),
        c.group_size.to_string(),
        c.filters.to_string(),
        c.hidden_in.to_string(),
        c.hidden_out.to_string(),
        c.depth.to_string(),
        row.report.total_params.to_string(),
        format!("{:.2}", row.params_ratio),
        row.report.total_macs.to_string(),
        format!("{:.2}", row.macs_ratio),
    ]
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = SWEEP_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&fields(r).join(","));
        out.push('\n');
    }
    out
}

/// `2615872` → `2.6M`, `73280` → `73.3K`, `22_100_000_000` → `22.1G`.
pub fn human(value: f64) -> String {
    let (scaled, unit) = if value >= 1e9 {
        (value / 1e9, "G")
    } else if value >= 1e6 {
        (value / 1e6, "M")
    } else if value >= 1e3 {
        (value / 1e3, "K")
    } else {
        (value, "")
    };
    format!("{scaled:.1}{unit}")
}

/// Right-aligned text table with human-readable sizes next to the ratios.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let header = [
        "K", "M", "N", "H_in", "H_out", "depth", "size", "size×", "MACs", "MACs×",
    ];
    let body: Vec<[String; 10]> = rows
        .iter()
        .map(|r| {
            let f = fields(r);
            [
                f[0].clone(),
                f[1].clone(),
                f[2].clone(),
                f[3].clone(),
                f[4].clone(),
                f[5].clone(),
                human(r.report.total_params as f64),
                format!("{:.1}×", r.params_ratio),
                human(r.report.total_macs as f64),
                format!("{:.1}×", r.macs_ratio),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            body.iter()
                .map(|b| b[i].chars().count())
                .chain([header[i].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{}{c}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  "));
    };
    line(&mut out, &header);
    for b in &body {
        let cells: Vec<&str> = b.iter().map(String::as_str).collect();
        line(&mut out, &cells);
    }
    out
}
