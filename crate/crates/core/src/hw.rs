//! Hardware cost model: a bit-accurate shift-add multiplier simulation and
//! per-plan accounting for model size, bit-operations, cycle counts, and
//! energy, against a configurable per-unit cost table.
//!
//! The multiplier consumes a Q1.7 activation operand and a low-bitwidth
//! signed weight code. It adds one shifted copy of the operand per set bit
//! in the code's two's-complement pattern, so the cycle count of a multiply
//! is the pattern's popcount (with a one-cycle floor for the zero code).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerOp, ModelGraph};
use crate::plan::BitPlan;
use crate::quant::{check_bits, per_channel_qparams, quantize_code, symmetric_qmax, ChannelQuantParams, BIT_CHOICES};

pub const HW_REPORT_SCHEMA_VERSION: u32 = 1;

// ── Q1.7 shift-add multiplier ───────────────────────────────────────────

/// Fixed-point Q1.7 value: `raw / 128`, with raw in `[-128, 127]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Q17 {
    raw: i32,
}

impl Q17 {
    pub fn from_raw(raw: i32) -> Result<Self> {
        if !(-128..=127).contains(&raw) {
            return Err(Error::InvalidArg(format!("Q1.7 raw value {raw} out of [-128, 127]")));
        }
        Ok(Q17 { raw })
    }

    pub fn raw(self) -> i32 {
        self.raw
    }

    pub fn value(self) -> f64 {
        f64::from(self.raw) / 128.0
    }
}

/// The `bits`-wide two's-complement pattern of `m`.
pub fn twos_complement_pattern(m: i64, bits: u8) -> Result<u64> {
    check_bits(bits)?;
    let half = 1i64 << (bits - 1);
    if !(-half..half).contains(&m) {
        return Err(Error::InvalidArg(format!("{m} does not fit in {bits} signed bits")));
    }
    Ok(m.rem_euclid(1 << bits) as u64)
}

/// Cycles a shift-add multiply by code `m` takes: one per set pattern bit,
/// with a floor of one cycle (the zero code still occupies the unit).
pub fn multiplier_cycles(m: i64, bits: u8) -> Result<u32> {
    Ok(twos_complement_pattern(m, bits)?.count_ones().max(1))
}

/// One multiply of a Q1.7 operand by a `bits`-wide symmetric weight code.
/// The raw product is `(a.raw * m) >> (bits - 1)` (arithmetic shift, i.e.
/// floor), clamped to the Q1.7 range; the clamp cannot bind for valid
/// inputs because `|a.raw| <= 128` and `|m| < 2^(bits-1)`. Returns the
/// product and the cycles spent.
pub fn shift_add_mac(a: Q17, m: i32, bits: u8) -> Result<(Q17, u32)> {
    check_bits(bits)?;
    let qmax = symmetric_qmax(bits);
    if m.abs() > qmax {
        return Err(Error::InvalidArg(format!(
            "weight code {m} outside the symmetric {bits}-bit range [-{qmax}, {qmax}]"
        )));
    }
    let cycles = multiplier_cycles(i64::from(m), bits)?;
    let raw = (a.raw * m) >> (bits - 1);
    let raw = raw.clamp(-128, 127);
    Ok((Q17 { raw }, cycles))
}

// ── per-layer counts ────────────────────────────────────────────────────

/// Multiply-accumulate count of one layer given its input shape (without
/// the batch dimension). Weightless layers cost zero MACs.
pub fn macs_of(op: &LayerOp, input_dims: &[usize]) -> u64 {
    match *op {
        LayerOp::Dense { in_features, out_features } => (in_features * out_features) as u64,
        LayerOp::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let (h, w) = (input_dims[1], input_dims[2]);
            let oh = (h + 2 * padding - kernel) / stride + 1;
            let ow = (w + 2 * padding - kernel) / stride + 1;
            (oh * ow * out_channels * in_channels * kernel * kernel) as u64
        }
        _ => 0,
    }
}

/// MACs per layer, index-aligned with `model.layers`.
pub fn layer_macs(model: &ModelGraph) -> Result<Vec<u64>> {
    let ins = model.input_shapes()?;
    Ok(model.layers.iter().zip(&ins).map(|(l, s)| macs_of(&l.op, s)).collect())
}

/// How many times each weight is reused per forward pass (spatial positions
/// for conv, once for dense), so that `reuse * weight_count == macs`.
fn weight_reuse(op: &LayerOp, input_dims: &[usize]) -> u64 {
    match *op {
        LayerOp::Conv2d { kernel, stride, padding, .. } => {
            let (h, w) = (input_dims[1], input_dims[2]);
            let oh = (h + 2 * padding - kernel) / stride + 1;
            let ow = (w + 2 * padding - kernel) / stride + 1;
            (oh * ow) as u64
        }
        _ => 1,
    }
}

fn plan_layer_index(model: &ModelGraph, layer: &str) -> Result<usize> {
    model
        .layer_index(layer)
        .ok_or_else(|| Error::InvalidArg(format!("plan names unknown layer {layer}")))
}

/// Frozen weight grid if the plan has one, else the grid derived from the
/// current weights (identical, since weight grids are data-independent).
fn resolved_weight_grid(
    model: &ModelGraph,
    layer: &str,
    bits_w: u8,
    frozen: Option<&ChannelQuantParams>,
) -> Result<ChannelQuantParams> {
    if let Some(cq) = frozen {
        return Ok(cq.clone());
    }
    let idx = plan_layer_index(model, layer)?;
    let weights = model.layers[idx]
        .weights
        .as_ref()
        .ok_or_else(|| Error::InvalidArg(format!("layer {layer} has no weights")))?;
    per_channel_qparams(weights, bits_w)
}

/// Stored weight bytes under the plan: each layer packs its weight count at
/// `bits_w` bits, rounded up to whole bytes per layer. Biases stay float and
/// are not counted.
pub fn model_size_bytes(model: &ModelGraph, plan: &BitPlan) -> Result<u64> {
    let mut total = 0u64;
    for lp in &plan.layers {
        let idx = plan_layer_index(model, &lp.layer)?;
        let n = model.layers[idx].weight_count() as u64;
        total += (n * u64::from(lp.bits_w)).div_ceil(8);
    }
    Ok(total)
}

/// Uniform 8-bit reference size: one byte per weight.
pub fn int8_size_bytes(model: &ModelGraph) -> u64 {
    model.layers.iter().map(|l| l.weight_count() as u64).sum()
}

/// Bit-operations: `bits_w * bits_a * MACs` summed over planned layers.
pub fn bops(model: &ModelGraph, plan: &BitPlan) -> Result<u64> {
    let macs = layer_macs(model)?;
    let mut total = 0u64;
    for lp in &plan.layers {
        let idx = plan_layer_index(model, &lp.layer)?;
        total += u64::from(lp.bits_w) * u64::from(lp.bits_a) * macs[idx];
    }
    Ok(total)
}

/// Shift-add cycles for one full forward pass: every weight's code costs its
/// pattern popcount (floored at one) per reuse.
pub fn layer_shift_add_cycles(model: &ModelGraph, plan: &BitPlan) -> Result<Vec<(String, u64)>> {
    let ins = model.input_shapes()?;
    let mut out = Vec::with_capacity(plan.layers.len());
    for lp in &plan.layers {
        let idx = plan_layer_index(model, &lp.layer)?;
        let layer = &model.layers[idx];
        let weights = layer
            .weights
            .as_ref()
            .ok_or_else(|| Error::InvalidArg(format!("layer {} has no weights", lp.layer)))?;
        let cq = resolved_weight_grid(model, &lp.layer, lp.bits_w, lp.weight_q.as_ref())?;
        let stride = weights.len() / cq.channels.len();
        let mut per_pass = 0u64;
        for (c, qp) in cq.channels.iter().enumerate() {
            for &w in &weights.data()[c * stride..(c + 1) * stride] {
                let code = quantize_code(w, qp);
                per_pass += u64::from(multiplier_cycles(i64::from(code), lp.bits_w)?);
            }
        }
        let reuse = weight_reuse(&layer.op, &ins[idx]);
        out.push((lp.layer.clone(), per_pass * reuse));
    }
    Ok(out)
}

// ── cost table and energy ───────────────────────────────────────────────

/// Synthesis cost of one MAC unit. Energy figures are in arbitrary units;
/// the defaults are placeholders scaled from area, not measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnitCost {
    /// Synthesized cell area in square micrometers.
    pub area_um2: f64,
    /// Energy of one full multiply.
    pub energy_mul: f64,
    /// Energy of one accumulate.
    pub energy_acc: f64,
    /// Energy of one shift-add cycle (serial units only).
    pub energy_cycle: f64,
}

impl Default for UnitCost {
    fn default() -> Self {
        UnitCost { area_um2: 0.0, energy_mul: 0.0, energy_acc: 0.0, energy_cycle: 0.0 }
    }
}

fn placeholder_unit(area_um2: f64) -> UnitCost {
    UnitCost {
        area_um2,
        energy_mul: area_um2 / 1000.0,
        energy_acc: area_um2 / 4000.0,
        energy_cycle: area_um2 / 4000.0,
    }
}

/// Per-unit synthesis costs. Areas default to published 45 nm figures for
/// the five MAC flavors; the energy columns are placeholders proportional
/// to area and are flagged as such in `note`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HwCostTable {
    pub fp32: UnitCost,
    pub fp16: UnitCost,
    pub bf16: UnitCost,
    pub int8: UnitCost,
    pub shift_add: UnitCost,
    pub note: String,
}

impl Default for HwCostTable {
    fn default() -> Self {
        HwCostTable {
            fp32: placeholder_unit(3218.3),
            fp16: placeholder_unit(3837.9),
            bf16: placeholder_unit(3501.9),
            int8: placeholder_unit(2103.4),
            shift_add: placeholder_unit(1635.4),
            note: "energy values are placeholders proportional to area, not measurements"
                .to_string(),
        }
    }
}

/// Energy of `macs` multiply-accumulates on a parallel-multiplier unit.
pub fn multiply_unit_energy(macs: u64, unit: &UnitCost) -> f64 {
    macs as f64 * (unit.energy_mul + unit.energy_acc)
}

/// Energy of a serial shift-add unit: one cycle cost per cycle spent plus
/// one accumulate per MAC.
pub fn shift_add_energy(cycles: u64, macs: u64, unit: &UnitCost) -> f64 {
    cycles as f64 * unit.energy_cycle + macs as f64 * unit.energy_acc
}

// ── report ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHwRow {
    pub layer: String,
    pub bits_w: u8,
    pub bits_a: u8,
    pub weights: u64,
    pub macs: u64,
    pub cycles: u64,
    pub size_bytes: u64,
    pub bops: u64,
    pub energy_shift_add: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformRow {
    pub label: String,
    pub bits_w: u8,
    pub bits_a: u8,
    pub size_bytes: u64,
    pub bops: u64,
    pub cycles: u64,
    pub energy_shift_add: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HwSummary {
    pub macs: u64,
    pub cycles: u64,
    pub size_bytes: u64,
    pub bops: u64,
    pub energy_shift_add: f64,
    pub int8_size_bytes: u64,
    pub int8_cycles: u64,
    pub int8_bops: u64,
    pub int8_energy: f64,
    pub fp32_energy: f64,
    pub size_ratio_vs_int8: f64,
    pub cycles_per_mac: f64,
    pub energy_ratio_vs_int8: f64,
    pub area_ratio_shift_add_vs_int8: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HwReport {
    pub schema_version: u32,
    pub model: String,
    pub note: String,
    pub rows: Vec<LayerHwRow>,
    pub uniform: Vec<UniformRow>,
    pub summary: HwSummary,
}

/// Full cost report for a plan: per-layer rows, uniform-bitwidth reference
/// rows (weights at each supported width, activations at 8), and totals
/// compared against a uniform 8-bit parallel-multiplier baseline.
pub fn hw_report(model: &ModelGraph, plan: &BitPlan, table: &HwCostTable) -> Result<HwReport> {
    let macs = layer_macs(model)?;
    let cycles = layer_shift_add_cycles(model, plan)?;
    let mut rows = Vec::with_capacity(plan.layers.len());
    let mut total_macs = 0u64;
    let mut total_cycles = 0u64;
    let mut total_size = 0u64;
    let mut total_bops = 0u64;
    for (lp, (cycle_layer, layer_cycles)) in plan.layers.iter().zip(&cycles) {
        debug_assert_eq!(&lp.layer, cycle_layer);
        let idx = plan_layer_index(model, &lp.layer)?;
        let weights = model.layers[idx].weight_count() as u64;
        let layer_macs = macs[idx];
        let size = (weights * u64::from(lp.bits_w)).div_ceil(8);
        let layer_bops = u64::from(lp.bits_w) * u64::from(lp.bits_a) * layer_macs;
        let energy = shift_add_energy(*layer_cycles, layer_macs, &table.shift_add);
        total_macs += layer_macs;
        total_cycles += layer_cycles;
        total_size += size;
        total_bops += layer_bops;
        rows.push(LayerHwRow {
            layer: lp.layer.clone(),
            bits_w: lp.bits_w,
            bits_a: lp.bits_a,
            weights,
            macs: layer_macs,
            cycles: *layer_cycles,
            size_bytes: size,
            bops: layer_bops,
            energy_shift_add: energy,
        });
    }

    let mut uniform = Vec::new();
    for b in BIT_CHOICES {
        let uplan = BitPlan::uniform(model, b, 8)?;
        let ucycles: u64 = layer_shift_add_cycles(model, &uplan)?.iter().map(|(_, c)| c).sum();
        uniform.push(UniformRow {
            label: format!("A8W{b}"),
            bits_w: b,
            bits_a: 8,
            size_bytes: model_size_bytes(model, &uplan)?,
            bops: bops(model, &uplan)?,
            cycles: ucycles,
            energy_shift_add: shift_add_energy(ucycles, total_macs, &table.shift_add),
        });
    }

    let int8_size = int8_size_bytes(model);
    let int8_energy = multiply_unit_energy(total_macs, &table.int8);
    let energy_shift_add = shift_add_energy(total_cycles, total_macs, &table.shift_add);
    let summary = HwSummary {
        macs: total_macs,
        cycles: total_cycles,
        size_bytes: total_size,
        bops: total_bops,
        energy_shift_add,
        int8_size_bytes: int8_size,
        int8_cycles: total_macs,
        int8_bops: 64 * total_macs,
        int8_energy,
        fp32_energy: multiply_unit_energy(total_macs, &table.fp32),
        size_ratio_vs_int8: total_size as f64 / int8_size as f64,
        cycles_per_mac: total_cycles as f64 / total_macs as f64,
        energy_ratio_vs_int8: energy_shift_add / int8_energy,
        area_ratio_shift_add_vs_int8: table.shift_add.area_um2 / table.int8.area_um2,
    };
    Ok(HwReport {
        schema_version: HW_REPORT_SCHEMA_VERSION,
        model: model.name.clone(),
        note: table.note.clone(),
        rows,
        uniform,
        summary,
    })
}
