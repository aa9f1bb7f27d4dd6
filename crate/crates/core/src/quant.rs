//! Uniform quantization primitives.
//!
//! Weights use symmetric grids: `w_hat = clip(round(w / scale), -Q, Q) * scale`
//! with `Q = 2^(bits-1) - 1` and round-half-away-from-zero. The scale comes
//! either from the absolute maximum (`Max`) or from a `k * sigma` clip range
//! (`Statistical`). Activations use an asymmetric grid spanning observed
//! percentile bounds with `2^bits` levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bitwidths the allocator works with.
pub const BIT_CHOICES: [u8; 4] = [2, 4, 6, 8];

pub fn check_bits(bits: u8) -> Result<()> {
    if BIT_CHOICES.contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidArg(format!("bits must be one of {BIT_CHOICES:?}, got {bits}")))
    }
}

/// Largest positive code of a symmetric `bits`-wide grid.
pub fn symmetric_qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// How the clip range of a weight grid is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum QuantMode {
    /// Clip at the tensor's absolute maximum.
    Max,
    /// Clip at `k` standard deviations; values beyond saturate.
    Statistical { k: f64 },
}

/// Frozen parameters of one symmetric weight grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub scale: f32,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
    /// True when the source range collapsed (all-zero or constant-zero
    /// spread); `scale` then holds the smallest positive normal `f32` so
    /// downstream division stays finite.
    pub degenerate: bool,
}

/// Population standard deviation in double precision.
pub fn population_sigma(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = values.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}

/// Derives a symmetric grid for `values` at `bits` under `mode`.
pub fn weight_qparams(values: &[f32], bits: u8, mode: QuantMode) -> Result<QuantParams> {
    check_bits(bits)?;
    let qmax = symmetric_qmax(bits);
    let range = match mode {
        QuantMode::Max => f64::from(values.iter().fold(0.0f32, |m, &v| m.max(v.abs()))),
        QuantMode::Statistical { k } => {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::InvalidArg(format!("sigma multiplier must be positive, got {k}")));
            }
            k * population_sigma(values)
        }
    };
    let degenerate = !(range > 0.0);
    let scale = if degenerate { f32::MIN_POSITIVE } else { (range / f64::from(qmax)) as f32 };
    Ok(QuantParams { bits, scale, zero_point: 0, qmin: -qmax, qmax, degenerate })
}

fn round_half_away(x: f32) -> f32 {
    // f32::round rounds half away from zero.
    x.round()
}

/// Integer code of `v` on the grid.
pub fn quantize_code(v: f32, qp: &QuantParams) -> i32 {
    let q = round_half_away(v / qp.scale);
    (q as i32).clamp(qp.qmin, qp.qmax)
}

/// True when `v` lies inside the representable range (the straight-through
/// gradient passes exactly there).
pub fn in_clip_range(v: f32, qp: &QuantParams) -> bool {
    (v / qp.scale).abs() <= qp.qmax as f32
}

/// Quantizes then dequantizes each value onto the grid.
pub fn quantize_dequantize(values: &[f32], qp: &QuantParams) -> Vec<f32> {
    values.iter().map(|&v| quantize_code(v, qp) as f32 * qp.scale).collect()
}

/// Per-output-channel symmetric grids with one shared bitwidth.
///
/// Channel `c` is the `c`-th slice along dimension 0 of the weight tensor,
/// which is the output dimension for both dense (`[out, in]`) and conv
/// (`[out_c, in_c, kh, kw]`) layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelQuantParams {
    pub bits: u8,
    pub channels: Vec<QuantParams>,
}

impl ChannelQuantParams {
    pub fn channel_len(tensor: &Tensor) -> usize {
        let c = *tensor.dims().first().unwrap_or(&1);
        tensor.len().checked_div(c).unwrap_or(0)
    }
}

/// Min-max symmetric grids, one per output channel, all at `bits`.
pub fn per_channel_qparams(weights: &Tensor, bits: u8) -> Result<ChannelQuantParams> {
    check_bits(bits)?;
    let c = *weights
        .dims()
        .first()
        .ok_or_else(|| Error::InvalidArg("weight tensor has no dims".into()))?;
    if c == 0 || !weights.len().is_multiple_of(c) {
        return Err(Error::InvalidArg("weight tensor dim 0 does not chunk the data".into()));
    }
    let stride = weights.len() / c;
    let channels = weights
        .data()
        .chunks_exact(stride)
        .map(|chunk| weight_qparams(chunk, bits, QuantMode::Max))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelQuantParams { bits, channels })
}

/// Fake-quantizes a weight tensor channel by channel.
pub fn fake_quant_weights(weights: &Tensor, cq: &ChannelQuantParams) -> Result<Tensor> {
    let c = cq.channels.len();
    if c == 0 || !weights.len().is_multiple_of(c) {
        return Err(Error::InvalidArg(format!(
            "{c} channel grids do not divide {} weights",
            weights.len()
        )));
    }
    let stride = weights.len() / c;
    let mut out = Vec::with_capacity(weights.len());
    for (chunk, qp) in weights.data().chunks_exact(stride).zip(&cq.channels) {
        out.extend(quantize_dequantize(chunk, qp));
    }
    Tensor::new(weights.dims().to_vec(), out)
}

// ── activation observers ────────────────────────────────────────────────

/// Collects activation values and exposes percentile clip bounds.
///
/// Keeps every observed value so the nearest-rank percentile is exact and
/// duplicate batches cannot shift it; calibration sets are desk-scale.
#[derive(Debug, Clone)]
pub struct ActObserver {
    values: Vec<f32>,
    percentile: f64,
}

impl Default for ActObserver {
    fn default() -> Self {
        ActObserver::new(0.999)
    }
}

impl ActObserver {
    pub fn new(percentile: f64) -> Self {
        assert!(percentile > 0.5 && percentile <= 1.0, "percentile must be in (0.5, 1]");
        ActObserver { values: Vec::new(), percentile }
    }

    pub fn update(&mut self, batch: &[f32]) {
        self.values.extend_from_slice(batch);
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    /// `(lo, hi)` clip bounds: `hi` is the nearest-rank percentile (the
    /// value at 1-indexed rank `ceil(p * n)`) and `lo` is its mirror from
    /// the bottom, so both tails clip symmetrically and share one rank
    /// computation.
    pub fn bounds(&self) -> Result<(f32, f32)> {
        if self.values.is_empty() {
            return Err(Error::InvalidArg("observer has seen no values".into()));
        }
        let mut sorted = self.values.clone();
        sorted.sort_by(f32::total_cmp);
        let n = sorted.len();
        let rank = ((self.percentile * n as f64).ceil() as usize).clamp(1, n);
        Ok((sorted[n - rank], sorted[rank - 1]))
    }
}

/// Frozen activation grid: `2^bits` levels spread over `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuantParams {
    pub bits: u8,
    pub lo: f32,
    pub hi: f32,
}

impl ActQuantParams {
    pub fn from_observer(obs: &ActObserver, bits: u8) -> Result<Self> {
        check_bits(bits)?;
        let (lo, hi) = obs.bounds()?;
        Ok(ActQuantParams { bits, lo, hi })
    }

    /// Collapsed range: every input maps to `lo`.
    pub fn degenerate(&self) -> bool {
        !(f64::from(self.hi) > f64::from(self.lo))
    }

    pub fn levels(&self) -> u32 {
        1u32 << self.bits
    }

    /// Level index of `x` (clipped into range).
    pub fn code(&self, x: f32) -> u32 {
        if self.degenerate() {
            return 0;
        }
        let steps = f64::from(self.levels() - 1);
        let t = (f64::from(x) - f64::from(self.lo)) / (f64::from(self.hi) - f64::from(self.lo));
        let q = (t * steps).round();
        q.clamp(0.0, steps) as u32
    }

    /// Fake-quantizes one value. Evaluated in double precision with the
    /// interpolation form `lo + q/(L-1) * (hi - lo)` so both endpoints are
    /// reproduced exactly.
    pub fn apply(&self, x: f32) -> f32 {
        if self.degenerate() {
            return self.lo;
        }
        let steps = f64::from(self.levels() - 1);
        let q = f64::from(self.code(x));
        (f64::from(self.lo) + (q / steps) * (f64::from(self.hi) - f64::from(self.lo))) as f32
    }

    /// True when the straight-through gradient passes at `x`.
    pub fn in_range(&self, x: f32) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// Fake-quantizes a batch of activations.
pub fn fake_quant_acts(values: &[f32], aq: &ActQuantParams) -> Vec<f32> {
    values.iter().map(|&v| aq.apply(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn max_mode_scale_is_range_over_qmax() {
        let w = [0.3f32, -1.27, 0.9];
        let qp = weight_qparams(&w, 8, QuantMode::Max).unwrap();
        assert_eq!(qp.scale, 1.27f32 / 127.0);
        assert_eq!((qp.qmin, qp.qmax, qp.zero_point), (-127, 127, 0));
        assert!(!qp.degenerate);
    }

    #[test]
    fn statistical_mode_scale_is_k_sigma_over_qmax() {
        // Population sigma of {-0.1, 0.1} is exactly 0.1.
        let w = [-0.1f32, 0.1];
        let qp = weight_qparams(&w, 4, QuantMode::Statistical { k: 3.0 }).unwrap();
        let expected = (3.0 * population_sigma(&w) / 7.0) as f32;
        assert_eq!(qp.scale, expected);
        assert!((f64::from(qp.scale) - 0.3 / 7.0).abs() < 1e-8);
        assert_eq!((qp.qmin, qp.qmax), (-7, 7));
    }

    #[test]
    fn all_zero_tensor_is_degenerate_with_sentinel_scale() {
        let qp = weight_qparams(&[0.0f32; 5], 8, QuantMode::Max).unwrap();
        assert!(qp.degenerate);
        assert_eq!(qp.scale, f32::MIN_POSITIVE);
        assert_eq!(quantize_dequantize(&[0.0; 5], &qp), vec![0.0; 5]);
    }

    #[test]
    fn two_bit_grid_has_three_levels() {
        let w = [0.9f32, -1.0, 0.2, -0.4, 1.0];
        let qp = weight_qparams(&w, 2, QuantMode::Max).unwrap();
        assert_eq!((qp.qmin, qp.qmax), (-1, 1));
        let dq = quantize_dequantize(&w, &qp);
        for v in &dq {
            assert!([-1.0f32, 0.0, 1.0].contains(v), "off-grid value {v}");
        }
    }

    #[test]
    fn statistical_mode_saturates_tail_values() {
        // One large outlier among small values: the 3-sigma range clips it.
        let mut w = vec![0.01f32; 99];
        w.push(10.0);
        let qp = weight_qparams(&w, 8, QuantMode::Statistical { k: 3.0 }).unwrap();
        let dq = quantize_dequantize(&w, &qp);
        let clip = qp.scale * qp.qmax as f32;
        assert!(dq[99] <= clip + 1e-6);
        assert!(clip < 10.0);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        let qp = QuantParams {
            bits: 8,
            scale: 1.0,
            zero_point: 0,
            qmin: -127,
            qmax: 127,
            degenerate: false,
        };
        assert_eq!(quantize_code(0.5, &qp), 1);
        assert_eq!(quantize_code(-0.5, &qp), -1);
        assert_eq!(quantize_code(1.5, &qp), 2);
        assert_eq!(quantize_code(-2.5, &qp), -3);
    }

    #[test]
    fn per_channel_grids_are_independent() {
        let w = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.05, 4.0, -1.0, 2.0]).unwrap();
        let cq = per_channel_qparams(&w, 8).unwrap();
        assert_eq!(cq.channels.len(), 2);
        assert_eq!(cq.channels[0].scale, 0.2f32 / 127.0);
        assert_eq!(cq.channels[1].scale, 4.0f32 / 127.0);

        let mut w2 = w.clone();
        w2.data_mut()[3] = 8.0;
        let cq2 = per_channel_qparams(&w2, 8).unwrap();
        assert_eq!(cq2.channels[0].scale, cq.channels[0].scale);
        assert_ne!(cq2.channels[1].scale, cq.channels[1].scale);
    }

    #[test]
    fn observer_percentile_is_nearest_rank() {
        let mut obs = ActObserver::default();
        obs.update(&(0..1000).map(|i| i as f32).collect::<Vec<_>>());
        let (lo, hi) = obs.bounds().unwrap();
        // Rank ceil(0.999 * 1000) = 999 from the top, mirrored from the
        // bottom for the low bound: both tails clip one extreme value.
        assert_eq!(lo, 1.0);
        assert_eq!(hi, 998.0);
    }

    #[test]
    fn duplicate_batches_do_not_shift_bounds() {
        let batch: Vec<f32> = (0..1000).map(|i| i as f32).collect();
        let mut once = ActObserver::default();
        once.update(&batch);
        let mut twice = ActObserver::default();
        twice.update(&batch);
        twice.update(&batch);
        assert_eq!(once.bounds().unwrap(), twice.bounds().unwrap());
    }

    #[test]
    fn activation_grid_endpoints_and_interior() {
        let aq = ActQuantParams { bits: 2, lo: 0.0, hi: 1.0 };
        assert_eq!(aq.apply(0.4), 1.0 / 3.0);
        assert_eq!(aq.apply(1.0), 1.0);
        assert_eq!(aq.apply(0.0), 0.0);
        // Outside the range clips to the endpoints.
        assert_eq!(aq.apply(1.7), 1.0);
        assert_eq!(aq.apply(-0.3), 0.0);
    }

    #[test]
    fn degenerate_activation_range_maps_everything_to_lo() {
        let aq = ActQuantParams { bits: 8, lo: 2.5, hi: 2.5 };
        assert!(aq.degenerate());
        assert_eq!(aq.apply(7.0), 2.5);
        assert_eq!(aq.apply(-7.0), 2.5);
    }

    proptest! {
        #[test]
        fn quantize_dequantize_is_idempotent(
            values in proptest::collection::vec(-10.0f32..10.0, 1..64),
            bits in prop_oneof![Just(2u8), Just(4u8), Just(6u8), Just(8u8)],
        ) {
            let qp = weight_qparams(&values, bits, QuantMode::Max).unwrap();
            let once = quantize_dequantize(&values, &qp);
            let twice = quantize_dequantize(&once, &qp);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn max_mode_error_is_bounded_by_half_step(
            values in proptest::collection::vec(-5.0f32..5.0, 1..64),
            bits in prop_oneof![Just(2u8), Just(4u8), Just(6u8), Just(8u8)],
        ) {
            let qp = weight_qparams(&values, bits, QuantMode::Max).unwrap();
            let dq = quantize_dequantize(&values, &qp);
            for (v, q) in values.iter().zip(&dq) {
                // Max mode never clips, so error stays within half a step
                // (plus float slack).
                prop_assert!((v - q).abs() <= qp.scale * 0.5 + 1e-6);
            }
        }

        #[test]
        fn codes_stay_in_symmetric_range(
            values in proptest::collection::vec(-100.0f32..100.0, 1..64),
            bits in prop_oneof![Just(2u8), Just(4u8), Just(6u8), Just(8u8)],
        ) {
            let qp = weight_qparams(&values, bits, QuantMode::Statistical { k: 3.0 }).unwrap();
            for &v in &values {
                let c = quantize_code(v, &qp);
                prop_assert!(c >= qp.qmin && c <= qp.qmax);
            }
        }
    }
}
