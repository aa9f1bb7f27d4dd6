//! Bitwidth plans, target bookkeeping, and the planning trace.
//!
//! A [`BitPlan`] assigns each weight-bearing layer a weight bitwidth, an
//! activation bitwidth, and (once calibrated) frozen quantizer parameters.
//! [`classify_zone`] maps a measured (accuracy, budget-metric) pair to one of
//! six disjoint zones that drive the two-phase search, and [`PlanTrace`]
//! records every round in a replayable CSV form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::quant::{
    check_bits, symmetric_qmax, ActQuantParams, ChannelQuantParams, QuantParams,
};

pub const PLAN_SCHEMA_VERSION: u32 = 1;
pub const TRACE_SCHEMA_VERSION: u32 = 1;

// ── the plan itself ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub layer: String,
    pub bits_w: u8,
    pub bits_a: u8,
    /// Frozen per-channel weight grids; `None` until calibrated.
    pub weight_q: Option<ChannelQuantParams>,
    /// Frozen activation grid for this layer's input; `None` keeps the
    /// activations in float.
    pub act_q: Option<ActQuantParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BitPlan {
    /// Weight-bearing layers in graph order.
    pub layers: Vec<LayerPlan>,
}

/// Layer names appear in the trace format, where these bytes are structural.
fn check_layer_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains([',', ';', '=', '/', '+', '\n', '\r']) {
        return Err(Error::InvalidArg(format!(
            "layer name {name:?} is empty or contains one of , ; = / + or a newline"
        )));
    }
    Ok(())
}

impl BitPlan {
    /// A uniform plan over the model's weight-bearing layers.
    pub fn uniform(model: &ModelGraph, bits_w: u8, bits_a: u8) -> Result<Self> {
        check_bits(bits_w)?;
        check_bits(bits_a)?;
        let idx = model.quantizable_indices();
        if idx.is_empty() {
            return Err(Error::InvalidArg(format!(
                "model {} has no weight-bearing layers to plan",
                model.name
            )));
        }
        let mut layers = Vec::with_capacity(idx.len());
        for i in idx {
            let name = &model.layers[i].name;
            check_layer_name(name)?;
            layers.push(LayerPlan {
                layer: name.clone(),
                bits_w,
                bits_a,
                weight_q: None,
                act_q: None,
            });
        }
        Ok(BitPlan { layers })
    }

    pub fn layer(&self, name: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.layer == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerPlan> {
        self.layers.iter_mut().find(|l| l.layer == name)
    }

    /// `(layer, bits_w, bits_a)` per layer, in graph order.
    pub fn bits_snapshot(&self) -> Vec<(String, u8, u8)> {
        self.layers.iter().map(|l| (l.layer.clone(), l.bits_w, l.bits_a)).collect()
    }
}

// ── targets and zones ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMetric {
    Size,
    Bops,
}

impl std::fmt::Display for TargetMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetMetric::Size => "size",
            TargetMetric::Bops => "bops",
        })
    }
}

/// Search targets: an accuracy floor and a budget on one hardware metric,
/// each with a buffer that marks the "close enough to keep iterating" band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub metric: TargetMetric,
    /// Accuracy floor in percentage points.
    pub accuracy_pct: f64,
    /// Budget on the chosen metric: bytes for size, bit-ops for bops.
    pub metric_budget: u64,
    /// Accuracy buffer in percentage points.
    pub delta_a: f64,
    /// Metric buffer in the metric's own unit.
    pub delta_m: u64,
    /// Cap on coarse-phase rounds; `None` uses the budget's default.
    pub i_max: Option<usize>,
}

impl Targets {
    /// Buffers default to 1 accuracy point and 5 % of the metric budget.
    pub fn new(metric: TargetMetric, accuracy_pct: f64, metric_budget: u64) -> Self {
        Targets {
            metric,
            accuracy_pct,
            metric_budget,
            delta_a: 1.0,
            delta_m: (metric_budget / 20).max(1),
            i_max: None,
        }
    }

    pub fn accuracy_met(&self, a: f64) -> bool {
        a >= self.accuracy_pct
    }

    pub fn metric_met(&self, m: u64) -> bool {
        m <= self.metric_budget
    }

    /// Accuracy inside its buffer: within `delta_a` of the floor or above it.
    pub fn accuracy_buffered(&self, a: f64) -> bool {
        a >= self.accuracy_pct - self.delta_a
    }

    /// Metric inside its buffer: within `delta_m` of the budget or below it.
    pub fn metric_buffered(&self, m: u64) -> bool {
        m <= self.metric_budget + self.delta_m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Zone {
    /// Both targets met.
    Target,
    /// Accuracy clearly short while the metric has clear headroom.
    BitIncrease,
    /// Accuracy clearly above the floor while the metric is clearly over.
    BitDecrease,
    /// At least one side is inside its buffer: keep refining.
    Iteration,
    /// Both sides violated but within twice their buffers.
    Transition,
    /// At least one side is beyond twice its buffer.
    Abandon,
}

impl std::fmt::Display for Zone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Zone::Target => "Target",
            Zone::BitIncrease => "BitIncrease",
            Zone::BitDecrease => "BitDecrease",
            Zone::Iteration => "Iteration",
            Zone::Transition => "Transition",
            Zone::Abandon => "Abandon",
        })
    }
}

impl std::str::FromStr for Zone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "Target" => Zone::Target,
            "BitIncrease" => Zone::BitIncrease,
            "BitDecrease" => Zone::BitDecrease,
            "Iteration" => Zone::Iteration,
            "Transition" => Zone::Transition,
            "Abandon" => Zone::Abandon,
            other => return Err(Error::Config(format!("unknown zone {other:?}"))),
        })
    }
}

/// Total classification of a measured state. The arms are checked in
/// precedence order, so every `(accuracy, metric)` pair lands in exactly
/// one zone:
///
/// 1. `Target` — both targets met outright.
/// 2. `BitIncrease` — accuracy below its buffer, metric under budget by
///    more than its buffer: spend bits.
/// 3. `BitDecrease` — accuracy above the floor by more than its buffer,
///    metric over budget by more than its buffer: reclaim bits.
/// 4. `Iteration` — at least one side inside its buffer.
/// 5. `Transition` — both sides violated, both within twice their buffers.
/// 6. `Abandon` — anything further out.
pub fn classify_zone(accuracy_pct: f64, metric: u64, t: &Targets) -> Zone {
    let acc_met = t.accuracy_met(accuracy_pct);
    let met_met = t.metric_met(metric);
    if acc_met && met_met {
        return Zone::Target;
    }
    let acc_low = accuracy_pct < t.accuracy_pct - t.delta_a;
    let met_head = metric <= t.metric_budget.saturating_sub(t.delta_m);
    if acc_low && met_head {
        return Zone::BitIncrease;
    }
    let acc_high = accuracy_pct >= t.accuracy_pct + t.delta_a;
    let met_over = metric > t.metric_budget + t.delta_m;
    if acc_high && met_over {
        return Zone::BitDecrease;
    }
    if t.accuracy_buffered(accuracy_pct) || t.metric_buffered(metric) {
        return Zone::Iteration;
    }
    if accuracy_pct >= t.accuracy_pct - 2.0 * t.delta_a
        && metric <= t.metric_budget + 2 * t.delta_m
    {
        return Zone::Transition;
    }
    Zone::Abandon
}

/// Coarse-phase guard: keep clustering while both sides are violated beyond
/// their buffers and rounds remain.
pub fn phase1_continue(accuracy_pct: f64, metric: u64, t: &Targets, round: usize, cap: usize) -> bool {
    !t.accuracy_buffered(accuracy_pct) && !t.metric_buffered(metric) && round < cap
}

/// Refinement stops as soon as both targets are met outright.
pub fn phase2_done(accuracy_pct: f64, metric: u64, t: &Targets) -> bool {
    t.accuracy_met(accuracy_pct) && t.metric_met(metric)
}

// ── search budget ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchBudget {
    /// Coarse clustering rounds (each retrains for `phase1_epochs`).
    pub phase1_rounds: usize,
    pub phase1_epochs: usize,
    /// Refinement rounds (each retrains for `phase2_epochs`).
    pub phase2_rounds: usize,
    pub phase2_epochs: usize,
    /// Layers adjusted per refinement round.
    pub layers_per_round: usize,
    /// Refinement rounds without improvement before reverting to the best.
    pub patience: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            phase1_rounds: 3,
            phase1_epochs: 4,
            phase2_rounds: 40,
            phase2_epochs: 4,
            layers_per_round: 2,
            patience: 3,
        }
    }
}

/// Wall-clock estimate of a full search given one epoch's training time.
pub fn estimate_search_cost(budget: &SearchBudget, epoch_secs: f64) -> f64 {
    (budget.phase1_rounds * budget.phase1_epochs + budget.phase2_rounds * budget.phase2_epochs)
        as f64
        * epoch_secs
}

// ── outcome status ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    /// Both targets met; the returned plan satisfies them.
    TargetMet,
    /// The coarse phase could not pull either metric inside its buffer.
    Infeasible,
    /// Refinement stalled or ran out of rounds; best visited plan returned.
    Reverted,
}

impl PlanStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            PlanStatus::TargetMet => 0,
            PlanStatus::Infeasible => 2,
            PlanStatus::Reverted => 3,
        }
    }
}

impl std::fmt::Display for PlanStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlanStatus::TargetMet => "target_met",
            PlanStatus::Infeasible => "infeasible",
            PlanStatus::Reverted => "reverted",
        })
    }
}

impl std::str::FromStr for PlanStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "target_met" => PlanStatus::TargetMet,
            "infeasible" => PlanStatus::Infeasible,
            "reverted" => PlanStatus::Reverted,
            other => return Err(Error::Config(format!("unknown status {other:?}"))),
        })
    }
}

// ── trace ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    One,
    Two,
}

/// What a round did. Knob strings name the layer, with `/a` appended when
/// the activation bitwidth moved instead of the weight bitwidth.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Baseline measurement before any search step.
    Init,
    /// A coarse clustering round reassigned weight bitwidths.
    Cluster,
    Increase(Vec<String>),
    Decrease(Vec<String>),
    /// Returned to an earlier recorded plan.
    Revert,
    /// Terminal record.
    Stop(PlanStatus),
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Action::Init => f.write_str("init"),
            Action::Cluster => f.write_str("cluster"),
            Action::Increase(ls) => write!(f, "increase:{}", ls.join("+")),
            Action::Decrease(ls) => write!(f, "decrease:{}", ls.join("+")),
            Action::Revert => f.write_str("revert"),
            Action::Stop(s) => write!(f, "stop:{s}"),
        }
    }
}

impl std::str::FromStr for Action {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "init" {
            return Ok(Action::Init);
        }
        if s == "cluster" {
            return Ok(Action::Cluster);
        }
        if s == "revert" {
            return Ok(Action::Revert);
        }
        if let Some(rest) = s.strip_prefix("increase:") {
            return Ok(Action::Increase(rest.split('+').map(str::to_string).collect()));
        }
        if let Some(rest) = s.strip_prefix("decrease:") {
            return Ok(Action::Decrease(rest.split('+').map(str::to_string).collect()));
        }
        if let Some(rest) = s.strip_prefix("stop:") {
            return Ok(Action::Stop(rest.parse()?));
        }
        Err(Error::Config(format!("unknown action {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub round: usize,
    pub phase: Phase,
    /// Cluster-size penalty weight; present only on coarse-phase rounds.
    pub lambda: Option<f64>,
    pub accuracy_pct: f64,
    pub size_bytes: u64,
    pub bops: u64,
    pub zone: Zone,
    pub action: Action,
    /// Plan snapshot after the action: `(layer, bits_w, bits_a)`.
    pub bits: Vec<(String, u8, u8)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlanTrace {
    pub records: Vec<TraceRecord>,
}

impl PlanTrace {
    /// Terminal status, if the trace ends with a stop record.
    pub fn status(&self) -> Option<PlanStatus> {
        match self.records.last() {
            Some(TraceRecord { action: Action::Stop(s), .. }) => Some(*s),
            _ => None,
        }
    }
}

pub const TRACE_HEADER: &str = "round,phase,lambda,accuracy_pct,size_bytes,bops,zone,action,bits";

fn render_bits(bits: &[(String, u8, u8)]) -> String {
    bits.iter()
        .map(|(l, w, a)| format!("{l}={w}/{a}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_bits(s: &str) -> Result<Vec<(String, u8, u8)>> {
    let mut out = Vec::new();
    if s.is_empty() {
        return Err(Error::Config("empty bits snapshot".into()));
    }
    for part in s.split(';') {
        let (name, rest) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad bits entry {part:?}")))?;
        let (w, a) = rest
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("bad bits entry {part:?}")))?;
        let w: u8 = w.parse().map_err(|_| Error::Config(format!("bad bits entry {part:?}")))?;
        let a: u8 = a.parse().map_err(|_| Error::Config(format!("bad bits entry {part:?}")))?;
        out.push((name.to_string(), w, a));
    }
    Ok(out)
}

/// Renders a trace as CSV, one row per round, preceded by a schema comment.
/// Floats use Rust's shortest round-trip formatting, so parsing the text
/// back recovers the exact values.
pub fn render_trace_csv(trace: &PlanTrace) -> String {
    let mut out = format!("# schema_version: {TRACE_SCHEMA_VERSION}\n{TRACE_HEADER}\n");
    for r in &trace.records {
        let phase = match r.phase {
            Phase::One => "1",
            Phase::Two => "2",
        };
        let lambda = r.lambda.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.round,
            phase,
            lambda,
            r.accuracy_pct,
            r.size_bytes,
            r.bops,
            r.zone,
            r.action,
            render_bits(&r.bits)
        ));
    }
    out
}

pub fn parse_trace_csv(text: &str) -> Result<PlanTrace> {
    let mut records = Vec::new();
    let mut saw_header = false;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != TRACE_HEADER {
                return Err(Error::Config(format!("line {}: unexpected header {line:?}", ln + 1)));
            }
            saw_header = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(Error::Config(format!(
                "line {}: expected 9 columns, found {}",
                ln + 1,
                cols.len()
            )));
        }
        let bad = |what: &str| Error::Config(format!("line {}: bad {what}", ln + 1));
        records.push(TraceRecord {
            round: cols[0].parse().map_err(|_| bad("round"))?,
            phase: match cols[1] {
                "1" => Phase::One,
                "2" => Phase::Two,
                _ => return Err(bad("phase")),
            },
            lambda: if cols[2].is_empty() {
                None
            } else {
                Some(cols[2].parse().map_err(|_| bad("lambda"))?)
            },
            accuracy_pct: cols[3].parse().map_err(|_| bad("accuracy_pct"))?,
            size_bytes: cols[4].parse().map_err(|_| bad("size_bytes"))?,
            bops: cols[5].parse().map_err(|_| bad("bops"))?,
            zone: cols[6].parse()?,
            action: cols[7].parse()?,
            bits: parse_bits(cols[8])?,
        });
    }
    if !saw_header {
        return Err(Error::Config("trace has no header row".into()));
    }
    Ok(PlanTrace { records })
}

// ── serialized plan file ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFileLayer {
    pub layer: String,
    pub bits_w: u8,
    pub bits_a: u8,
    /// Always zero: weight grids are symmetric.
    pub zero_point: i32,
    /// Per-output-channel weight scales.
    pub weight_scales: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub act_lo: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub act_hi: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub status: PlanStatus,
    pub metric: TargetMetric,
    pub accuracy_target_pct: f64,
    pub metric_budget: u64,
    pub delta_a: f64,
    pub delta_m: u64,
    pub layers: Vec<PlanFileLayer>,
}

impl PlanFile {
    pub fn from_plan(plan: &BitPlan, targets: &Targets, status: PlanStatus) -> Result<Self> {
        let mut layers = Vec::with_capacity(plan.layers.len());
        for lp in &plan.layers {
            let cq = lp.weight_q.as_ref().ok_or_else(|| {
                Error::InvalidArg(format!("layer {} has no frozen weight grid", lp.layer))
            })?;
            layers.push(PlanFileLayer {
                layer: lp.layer.clone(),
                bits_w: lp.bits_w,
                bits_a: lp.bits_a,
                zero_point: 0,
                weight_scales: cq.channels.iter().map(|c| c.scale).collect(),
                act_lo: lp.act_q.map(|a| a.lo),
                act_hi: lp.act_q.map(|a| a.hi),
            });
        }
        Ok(PlanFile {
            schema_version: PLAN_SCHEMA_VERSION,
            status,
            metric: targets.metric,
            accuracy_target_pct: targets.accuracy_pct,
            metric_budget: targets.metric_budget,
            delta_a: targets.delta_a,
            delta_m: targets.delta_m,
            layers,
        })
    }

    /// Rebuilds the in-memory plan. A scale equal to `f32::MIN_POSITIVE` is
    /// the degenerate-channel sentinel and round-trips as such.
    pub fn to_bit_plan(&self) -> Result<BitPlan> {
        if self.schema_version != PLAN_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "plan schema {} unsupported (expected {PLAN_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for fl in &self.layers {
            check_bits(fl.bits_w)?;
            check_bits(fl.bits_a)?;
            if fl.weight_scales.is_empty() {
                return Err(Error::Config(format!("layer {} has no weight scales", fl.layer)));
            }
            let qmax = symmetric_qmax(fl.bits_w);
            let channels = fl
                .weight_scales
                .iter()
                .map(|&scale| QuantParams {
                    bits: fl.bits_w,
                    scale,
                    zero_point: 0,
                    qmin: -qmax,
                    qmax,
                    degenerate: scale == f32::MIN_POSITIVE,
                })
                .collect();
            let act_q = match (fl.act_lo, fl.act_hi) {
                (Some(lo), Some(hi)) => Some(ActQuantParams { bits: fl.bits_a, lo, hi }),
                (None, None) => None,
                _ => {
                    return Err(Error::Config(format!(
                        "layer {} has only one activation bound",
                        fl.layer
                    )))
                }
            };
            layers.push(LayerPlan {
                layer: fl.layer.clone(),
                bits_w: fl.bits_w,
                bits_a: fl.bits_a,
                weight_q: Some(ChannelQuantParams { bits: fl.bits_w, channels }),
                act_q,
            });
        }
        Ok(BitPlan { layers })
    }
}
