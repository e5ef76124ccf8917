//! Static FLOPs and parameter accounting.
//!
//! Conventions: one multiply-accumulate counts as one FLOP; biases, batch
//! norm, activations, reshapes, residual additions and group sums add no
//! FLOPs. Parameters are all learnable scalars (weights, dense biases, batch
//! norm scale/shift, activation slopes). Storage is reported in bits; a
//! binarized weight takes one bit and the "parameter unit" of a layer is its
//! bit count divided by 32.

use std::fmt;

use crate::model::{AcrNet, ConvUnit, Eta, ModelConfig, ModelError};
use crate::nn::DenseLayer;

pub const CONVENTIONS: &str = "1 MAC = 1 FLOP; bias/BN/activation/reshape/residual/group-sum excluded from FLOPs; \
params = weights + dense biases + BN affine + activation slopes; binarized weights = 1 bit; units = bits/32";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub side: Side,
    pub flops: u64,
    /// Learnable scalars.
    pub params: u64,
    /// Weight scalars among `params`.
    pub weights: u64,
    pub param_bits: u64,
}

impl LayerCost {
    /// 32-bit-equivalent parameter units.
    pub fn param_units(&self) -> f64 {
        self.param_bits as f64 / 32.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub label: String,
    pub layers: Vec<LayerCost>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideTotals {
    pub flops: u64,
    pub params: u64,
    pub param_bits: u64,
}

impl SideTotals {
    pub fn param_units(&self) -> f64 {
        self.param_bits as f64 / 32.0
    }
}

impl ComplexityReport {
    fn totals_where(&self, keep: impl Fn(&LayerCost) -> bool) -> SideTotals {
        self.layers.iter().filter(|l| keep(l)).fold(
            SideTotals {
                flops: 0,
                params: 0,
                param_bits: 0,
            },
            |acc, l| SideTotals {
                flops: acc.flops + l.flops,
                params: acc.params + l.params,
                param_bits: acc.param_bits + l.param_bits,
            },
        )
    }

    pub fn side(&self, side: Side) -> SideTotals {
        self.totals_where(|l| l.side == side)
    }

    pub fn encoder(&self) -> SideTotals {
        self.side(Side::Encoder)
    }

    pub fn decoder(&self) -> SideTotals {
        self.side(Side::Decoder)
    }

    pub fn total(&self) -> SideTotals {
        self.totals_where(|_| true)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// The same report with the FC layer of `side` stored as 1-bit weights.
    pub fn with_binarized_fc(&self, side: Side) -> Self {
        let mut out = self.clone();
        let name = format!("{side}.fc");
        if let Some(l) = out.layers.iter_mut().find(|l| l.name == name) {
            l.param_bits = l.weights + 32 * (l.params - l.weights);
        }
        out
    }

    /// Machine-readable `key=value` lines.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("label", self.label.clone());
        for (name, t) in [
            ("encoder", self.encoder()),
            ("decoder", self.decoder()),
            ("total", self.total()),
        ] {
            kv(&format!("{name}.flops"), t.flops.to_string());
            kv(&format!("{name}.params"), t.params.to_string());
            kv(&format!("{name}.param_bits"), t.param_bits.to_string());
            kv(
                &format!("{name}.param_units"),
                format!("{:.3}", t.param_units()),
            );
        }
        for l in &self.layers {
            kv(&format!("layer.{}.flops", l.name), l.flops.to_string());
            kv(&format!("layer.{}.params", l.name), l.params.to_string());
            kv(
                &format!("layer.{}.param_bits", l.name),
                l.param_bits.to_string(),
            );
        }
        kv("conventions", CONVENTIONS.to_string());
        out
    }
}

/// Millions with two decimals, e.g. `4.64M`.
pub fn fmt_mega(v: u64) -> String {
    format!("{:.2}M", v as f64 / 1e6)
}

/// Rounded thousands, e.g. `2102K`.
pub fn fmt_kilo(v: f64) -> String {
    format!("{:.0}K", v / 1e3)
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.label)?;
        writeln!(
            f,
            "{:<26} {:>12} {:>10} {:>12}",
            "layer", "FLOPs", "params", "units"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<26} {:>12} {:>10} {:>12.1}",
                l.name,
                l.flops,
                l.params,
                l.param_units()
            )?;
        }
        for (name, t) in [
            ("encoder (UE)", self.encoder()),
            ("decoder (BS)", self.decoder()),
            ("total", self.total()),
        ] {
            writeln!(
                f,
                "{:<26} {:>12} {:>10} {:>12}",
                name,
                fmt_mega(t.flops),
                t.params,
                fmt_kilo(t.param_units())
            )?;
        }
        write!(f, "conventions: {CONVENTIONS}")
    }
}

fn unit_cost(name: &str, side: Side, unit: &ConvUnit, h: usize, w: usize) -> LayerCost {
    let mut params = 0u64;
    unit.visit_params(&mut |p| params += p.len() as u64);
    LayerCost {
        name: name.to_string(),
        side,
        flops: unit.conv.flops(h, w),
        params,
        weights: unit.conv.weight.len() as u64,
        param_bits: 32 * params,
    }
}

fn dense_cost(name: &str, side: Side, fc: &DenseLayer) -> LayerCost {
    LayerCost {
        name: name.to_string(),
        side,
        flops: fc.flops(),
        params: (fc.in_dim * fc.out_dim + fc.out_dim) as u64,
        weights: (fc.in_dim * fc.out_dim) as u64,
        param_bits: fc.param_bits(),
    }
}

pub fn count(model: &AcrNet) -> ComplexityReport {
    let (h, w) = (model.config().na, model.config().nt);
    let mut layers = Vec::new();
    let enc = &model.encoder;
    layers.push(unit_cost("encoder.head", Side::Encoder, &enc.head, h, w));
    for (i, b) in enc.blocks.iter().enumerate() {
        for (part, u) in ["row", "col"].iter().zip(b.units()) {
            layers.push(unit_cost(
                &format!("encoder.block{i}.{part}"),
                Side::Encoder,
                u,
                h,
                w,
            ));
        }
    }
    layers.push(dense_cost("encoder.fc", Side::Encoder, &enc.fc));
    let dec = &model.decoder;
    layers.push(dense_cost("decoder.fc", Side::Decoder, &dec.fc));
    layers.push(unit_cost("decoder.head", Side::Decoder, &dec.head, h, w));
    for (i, b) in dec.blocks.iter().enumerate() {
        for (part, u) in ["wide", "row", "col"].iter().zip(b.units()) {
            layers.push(unit_cost(
                &format!("decoder.block{i}.{part}"),
                Side::Decoder,
                u,
                h,
                w,
            ));
        }
    }
    ComplexityReport {
        label: model.config().label(),
        layers,
    }
}

/// Report for a configuration without allocating random weights.
pub fn count_config(config: &ModelConfig) -> Result<ComplexityReport, ModelError> {
    Ok(count(&AcrNet::structural(config)?))
}

/// Share of encoder FLOPs and parameters held by the encoder FC layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderShare {
    pub flops: f64,
    pub params: f64,
}

pub fn encoder_share(report: &ComplexityReport) -> EncoderShare {
    let enc = report.encoder();
    let fc = report
        .layer("encoder.fc")
        .expect("report has an encoder FC");
    EncoderShare {
        flops: fc.flops as f64 / enc.flops as f64,
        params: fc.params as f64 / enc.params as f64,
    }
}

/// Cost added by one unit of expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Increment {
    pub flops: u64,
    pub params: u64,
}

pub fn expansion_increment(eta: Eta) -> Result<Increment, ModelError> {
    increment_at(eta, 1)
}

/// `count(k + 1) - count(k)` at compression `eta`.
pub fn increment_at(eta: Eta, k: usize) -> Result<Increment, ModelError> {
    let a = count_config(&ModelConfig::new(k, eta))?.total();
    let b = count_config(&ModelConfig::new(k + 1, eta))?.total();
    Ok(Increment {
        flops: b.flops - a.flops,
        params: b.params - a.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Closed-form totals for a full-precision model on 32×32 maps.
    fn symbolic(k: u64, fd: u64) -> (u64, u64) {
        let plane = 1024;
        let enc_conv_flops = (2 * 25 * 2 + 2 * (2 * 9 * 2 + 2 * 9 * 2)) * plane;
        let group_flops = (2 * 49 * 2 + 2 * 9 * 2 + 2 * 9 * 2) * plane;
        let flops = enc_conv_flops + 2 * 2048 * fd + 2 * 25 * 2 * plane + 2 * 4 * k * group_flops;
        // conv weights + BN (4) + slopes (2) per 2-channel unit
        let enc_conv_params = (100 + 6) + 2 * (36 + 6 + 36 + 6);
        let group_params = 196 + 36 + 36 + 3 * 6;
        let params = enc_conv_params
            + (2048 * fd + fd)
            + (fd * 2048 + 2048)
            + (100 + 6)
            + 2 * 4 * k * group_params;
        (flops, params)
    }

    #[test]
    fn matches_closed_form() {
        for (k, den) in [(1, 4), (4, 8), (10, 16), (20, 64)] {
            let eta = Eta::reciprocal(den).unwrap();
            let r = count_config(&ModelConfig::new(k, eta)).unwrap();
            let fd = 2048 / den as u64;
            assert_eq!((r.total().flops, r.total().params), symbolic(k as u64, fd));
        }
    }

    #[test]
    fn pinned_totals() {
        let r = count_config(&ModelConfig::default()).unwrap();
        assert_eq!(r.total().flops, 4_644_864);
        assert_eq!(r.total().params, 2_102_380);
        assert_eq!(r.total().param_bits, 32 * 2_102_380);
    }

    #[test]
    fn totals_are_sum_of_layers() {
        let r = count_config(&ModelConfig::new(3, Eta::reciprocal(8).unwrap())).unwrap();
        let f: u64 = r.layers.iter().map(|l| l.flops).sum();
        assert_eq!(r.encoder().flops + r.decoder().flops, f);
        assert_eq!(r.total().flops, f);
    }

    #[test]
    fn increment_is_affine() {
        let eta = Eta::reciprocal(32).unwrap();
        assert_eq!(increment_at(eta, 5).unwrap(), increment_at(eta, 1).unwrap());
        assert_eq!(
            expansion_increment(eta).unwrap(),
            expansion_increment(Eta::QUARTER).unwrap()
        );
        let inc = expansion_increment(Eta::QUARTER).unwrap();
        assert_eq!(inc.flops, 2_195_456);
        assert_eq!(inc.params, 2_288);
    }

    #[test]
    fn binarizing_divides_fc_units_by_32() {
        let cfg = ModelConfig::default();
        let full = count_config(&cfg).unwrap();
        let bin = count_config(&ModelConfig {
            binarize_encoder_fc: true,
            ..cfg
        })
        .unwrap();
        let f = full.layer("encoder.fc").unwrap();
        let b = bin.layer("encoder.fc").unwrap();
        assert_eq!(f.flops, b.flops);
        let weights = 2048 * 512;
        assert_eq!(f.param_bits - b.param_bits, 31 * weights);
        assert_eq!(b.param_bits - 32 * 512, weights);
    }

    #[test]
    fn derived_binarization_matches_rebuilt_model() {
        let cfg = ModelConfig::new(10, Eta::QUARTER);
        let derived = count_config(&cfg)
            .unwrap()
            .with_binarized_fc(Side::Encoder)
            .with_binarized_fc(Side::Decoder);
        let rebuilt = count_config(&ModelConfig {
            binarize_encoder_fc: true,
            binarize_decoder_fc: true,
            ..cfg
        })
        .unwrap();
        assert_eq!(derived.layers, rebuilt.layers);
    }

    #[test]
    fn fc_share_shrinks_with_eta() {
        let at = |den| {
            encoder_share(
                &count_config(&ModelConfig::new(1, Eta::reciprocal(den).unwrap())).unwrap(),
            )
        };
        assert!(at(64).flops < at(4).flops);
        assert!(at(4).params > 0.999);
    }

    #[test]
    fn key_values_and_display() {
        let r = count_config(&ModelConfig::default()).unwrap();
        let kv = r.key_values();
        assert!(kv.contains("total.flops=4644864\n"));
        assert!(kv.contains("total.params=2102380\n"));
        let shown = r.to_string();
        assert!(shown.contains("4.64M"));
        assert!(shown.contains("2102K"));
    }
}
