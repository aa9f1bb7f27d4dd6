//! Distribution statistics that drive bit allocation: per-layer sigma,
//! histogram KL divergence between float and quantized weights, and the
//! normalized sensitivity score.

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::plan::BitPlan;
use crate::quant::{population_sigma, quantize_dequantize, weight_qparams, QuantMode};

/// Default bin count for weight histograms.
pub const HISTOGRAM_BINS: usize = 256;
/// Mass added to every bin before normalization so KL never sees a zero.
pub const SMOOTHING_EPS: f64 = 1e-12;
/// Normalized-KL denominators at or below this are treated as zero.
pub const DEGENERATE_KL: f64 = 1e-12;

/// Normalized histogram over `bins` equal-width bins spanning `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    lo: f64,
    hi: f64,
    mass: Vec<f64>,
}

impl Histogram {
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Builds a histogram directly from bin masses (they are smoothed and
    /// normalized like counts).
    pub fn from_mass(lo: f64, hi: f64, raw: &[f64]) -> Result<Histogram> {
        if raw.is_empty() {
            return Err(Error::InvalidArg("histogram needs at least one bin".into()));
        }
        if !(hi > lo) {
            return Err(Error::InvalidArg(format!("histogram range [{lo}, {hi}] is empty")));
        }
        if raw.iter().any(|&m| !m.is_finite() || m < 0.0) {
            return Err(Error::InvalidArg("histogram masses must be finite and non-negative".into()));
        }
        let total: f64 = raw.iter().map(|&m| m + SMOOTHING_EPS).sum();
        let mass = raw.iter().map(|&m| (m + SMOOTHING_EPS) / total).collect();
        Ok(Histogram { lo, hi, mass })
    }
}

/// Counts `values` into `bins` bins over `[lo, hi]`; out-of-range values
/// land in the nearest edge bin, and a value exactly at `hi` counts in the
/// last bin. Bins are smoothed by [`SMOOTHING_EPS`] and normalized to sum 1.
pub fn build_histogram(values: &[f32], bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::InvalidArg("histogram needs at least one bin".into()));
    }
    if !(hi > lo) {
        return Err(Error::InvalidArg(format!("histogram range [{lo}, {hi}] is empty")));
    }
    let mut counts = vec![0.0f64; bins];
    let width = hi - lo;
    for &v in values {
        let t = (f64::from(v) - lo) / width;
        let idx = ((t * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[idx] += 1.0;
    }
    Histogram::from_mass(lo, hi, &counts)
}

/// `sum p * ln(p/q)` in nats. Both histograms must share the same binning.
pub fn kl_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.bins() != q.bins() || p.lo != q.lo || p.hi != q.hi {
        return Err(Error::InvalidArg(format!(
            "histogram binning mismatch: {} bins over [{}, {}] vs {} bins over [{}, {}]",
            p.bins(),
            p.lo,
            p.hi,
            q.bins(),
            q.lo,
            q.hi
        )));
    }
    let mut sum = 0.0;
    for (&pi, &qi) in p.mass.iter().zip(&q.mass) {
        if pi > 0.0 {
            sum += pi * (pi / qi).ln();
        }
    }
    Ok(sum)
}

/// Population standard deviation of a weight slice.
pub fn layer_sigma(weights: &[f32]) -> f64 {
    population_sigma(weights)
}

fn value_range(values: &[f32]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(f64::from(v));
        hi = hi.max(f64::from(v));
    }
    if !(hi > lo) {
        // Constant tensor: widen symmetrically so binning stays defined;
        // float and quantized copies land in the same bin either way.
        let pad = lo.abs().max(1.0) * 1e-6;
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

/// KL divergence between a layer's float weights and their `bits`-wide
/// quantized copy, over a shared 256-bin histogram spanning the float range.
pub fn layer_kl_at_bits(weights: &[f32], bits: u8, mode: QuantMode) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::InvalidArg("cannot histogram an empty layer".into()));
    }
    let qp = weight_qparams(weights, bits, mode)?;
    let quantized = quantize_dequantize(weights, &qp);
    let (lo, hi) = value_range(weights);
    let p = build_histogram(weights, HISTOGRAM_BINS, lo, hi)?;
    let q = build_histogram(&quantized, HISTOGRAM_BINS, lo, hi)?;
    kl_divergence(&p, &q)
}

/// KL at `bits` divided by KL at 2 bits, clamped into `[0, 1]`.
///
/// The 2-bit divergence is the worst distortion the bit set allows, so the
/// ratio reads as "fraction of worst-case damage". A denominator at or below
/// [`DEGENERATE_KL`] (already-discrete weights) maps to 0.
pub fn normalized_kl(weights: &[f32], bits: u8, mode: QuantMode) -> Result<f64> {
    let denom = layer_kl_at_bits(weights, 2, mode)?;
    if denom <= DEGENERATE_KL {
        return Ok(0.0);
    }
    let kl = layer_kl_at_bits(weights, bits, mode)?;
    Ok((kl / denom).clamp(0.0, 1.0))
}

/// One quantizable layer's sensitivity under a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRecord {
    pub layer: String,
    pub sigma: f64,
    pub bits_w: u8,
    /// Normalized KL at the layer's planned weight bits.
    pub score: f64,
}

/// Scores every quantizable layer at its currently planned weight bits,
/// in graph order.
pub fn sensitivity_scores(model: &ModelGraph, plan: &BitPlan) -> Result<Vec<SensitivityRecord>> {
    let mut out = Vec::with_capacity(plan.layers.len());
    for lp in &plan.layers {
        let idx = model
            .layer_index(&lp.layer)
            .ok_or_else(|| Error::InvalidArg(format!("plan names unknown layer {}", lp.layer)))?;
        let weights = model.layers[idx]
            .weights
            .as_ref()
            .ok_or_else(|| Error::InvalidArg(format!("layer {} has no weights", lp.layer)))?;
        out.push(SensitivityRecord {
            layer: lp.layer.clone(),
            sigma: layer_sigma(weights.data()),
            bits_w: lp.bits_w,
            score: normalized_kl(weights.data(), lp.bits_w, QuantMode::Max)?,
        });
    }
    Ok(out)
}
