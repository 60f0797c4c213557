//! Convolution-only FLOPs and parameter accounting, and a wall-clock
//! comparison of a regular 3×3×3 module against its axial+slice factorization.

mod bench;

pub use bench::{bench_csv, bench_modules, module_flops, BenchConfig, BenchRow, BENCH_CSV_HEADER};

use std::fmt::Write as _;

use crate::error::Result;
use crate::kv::format_extents;
use crate::model::{ActShape, Layer, ModelKind, NetworkGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsRow {
    pub layer: usize,
    pub kind: &'static str,
    pub input: ActShape,
    pub output: ActShape,
    pub flops: u64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsReport {
    pub model: ModelKind,
    pub base_features: usize,
    pub num_down: usize,
    pub extents: [usize; 3],
    pub rows: Vec<FlopsRow>,
    pub total_flops: u64,
    pub total_params: usize,
}

impl FlopsReport {
    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,input,output,flops,cumulative_flops,params\n");
        let mut cum = 0u64;
        for r in &self.rows {
            cum += r.flops;
            writeln!(s, "{},{},{},{},{},{cum},{}", r.layer, r.kind, r.input, r.output, r.flops, r.params).unwrap();
        }
        s
    }

    /// Aligned table of the layers that carry FLOPs or parameters, with totals.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "model {} base {} down {} input {}\n",
            self.model,
            self.base_features,
            self.num_down,
            format_extents(self.extents)
        );
        writeln!(
            s,
            "{:>5}  {:<18} {:<18} {:<18} {:>16} {:>12} {:>10}",
            "layer", "kind", "input", "output", "flops", "cum GFLOPs", "params"
        )
        .unwrap();
        let mut cum = 0u64;
        for r in &self.rows {
            cum += r.flops;
            if r.flops == 0 && r.params == 0 {
                continue;
            }
            writeln!(
                s,
                "{:>5}  {:<18} {:<18} {:<18} {:>16} {:>12.3} {:>10}",
                r.layer,
                r.kind,
                r.input.to_string(),
                r.output.to_string(),
                r.flops,
                cum as f64 / 1e9,
                r.params
            )
            .unwrap();
        }
        writeln!(s, "total {:.2} GFLOPs, {:.2} M params", self.gflops(), self.mparams()).unwrap();
        s
    }
}

fn layer_params(layer: &Layer) -> usize {
    match layer {
        Layer::Conv { spec, .. } => spec.param_count(),
        Layer::InstanceNorm { channels, .. } => 2 * channels,
        _ => 0,
    }
}

/// Per-layer FLOPs for a 1-channel input of `extents`. Only convolutions
/// cost anything; biases are not counted.
pub fn count_flops(net: &NetworkGraph, extents: [usize; 3]) -> Result<FlopsReport> {
    let shapes = net.trace_shapes(extents)?;
    let rows: Vec<FlopsRow> = net
        .layers
        .iter()
        .zip(shapes)
        .enumerate()
        .map(|(i, (layer, (input, output)))| FlopsRow {
            layer: i,
            kind: layer.kind_name(),
            input,
            output,
            flops: match layer {
                Layer::Conv { spec, .. } => spec.flops(input.extents),
                _ => 0,
            },
            params: layer_params(layer),
        })
        .collect();
    Ok(FlopsReport {
        model: net.kind,
        base_features: net.base_features,
        num_down: net.num_down,
        extents,
        total_flops: rows.iter().map(|r| r.flops).sum(),
        total_params: rows.iter().map(|r| r.params).sum(),
        rows,
    })
}

/// Weights, biases and norm scales/shifts.
pub fn count_params(net: &NetworkGraph) -> usize {
    net.layers.iter().map(layer_params).sum()
}
