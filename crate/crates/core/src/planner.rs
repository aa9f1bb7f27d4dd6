//! Two-phase bitwidth search.
//!
//! Phase 1 clusters layers by their weight sigma with a size-penalized
//! objective and maps clusters to bitwidths, retraining briefly after each
//! reassignment; the penalty weight grows each round until one target enters
//! its buffer or the round cap runs out. Phase 2 refines single layers,
//! spending bits on the most quantization-sensitive layers while accuracy
//! lags and reclaiming bits from the least sensitive ones while the budget
//! metric overshoots, with snapshot/revert bookkeeping around regressions.
//!
//! Every round is recorded in a [`PlanTrace`]; [`verify_trace`] replays a
//! rendered trace against the model and final plan and reports every
//! inconsistency it finds.

use crate::dataset::Dataset;
use crate::engine::{calibrate, evaluate_accuracy, qat_epochs, TrainConfig};
use crate::error::{Error, Result};
use crate::hw::{bops, layer_macs, model_size_bytes};
use crate::model::ModelGraph;
use crate::plan::{
    classify_zone, phase1_continue, phase2_done, Action, BitPlan, Phase, PlanFile, PlanStatus,
    PlanTrace, SearchBudget, TargetMetric, Targets, TraceRecord,
};
use crate::quant::BIT_CHOICES;
use crate::stats::{layer_sigma, sensitivity_scores};

/// Training, evaluation, and calibration splits for a search.
#[derive(Debug, Clone)]
pub struct PlanDatasets<'a> {
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
    pub calib: &'a Dataset,
}

/// Result of a search: the plan, its trace, the terminal status, and the
/// fine-tuned model the plan was measured with.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub plan: BitPlan,
    pub trace: PlanTrace,
    pub status: PlanStatus,
    pub model: ModelGraph,
    pub accuracy_pct: f64,
    pub size_bytes: u64,
    pub bops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Measured {
    accuracy_pct: f64,
    size_bytes: u64,
    bops: u64,
}

fn metric_of(m: &Measured, t: &Targets) -> u64 {
    match t.metric {
        TargetMetric::Size => m.size_bytes,
        TargetMetric::Bops => m.bops,
    }
}

fn measure(model: &ModelGraph, eval: &Dataset, plan: &BitPlan) -> Result<Measured> {
    Ok(Measured {
        accuracy_pct: evaluate_accuracy(model, eval, Some(plan))?.accuracy_pct,
        size_bytes: model_size_bytes(model, plan)?,
        bops: bops(model, plan)?,
    })
}

/// Lexicographic plan quality: targets met outright first, then the summed
/// relative violation (negated so larger is better).
fn score(m: &Measured, t: &Targets) -> (u8, f64) {
    let metric = metric_of(m, t);
    let sat = u8::from(t.accuracy_met(m.accuracy_pct)) + u8::from(t.metric_met(metric));
    let va = (t.accuracy_pct - m.accuracy_pct).max(0.0) / t.accuracy_pct.max(1e-9);
    let vm = metric.saturating_sub(t.metric_budget) as f64 / t.metric_budget.max(1) as f64;
    (sat, -(va + vm))
}

fn better(a: (u8, f64), b: (u8, f64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
}

#[derive(Clone)]
struct Snapshot {
    work: ModelGraph,
    plan: BitPlan,
    meas: Measured,
    score: (u8, f64),
}

/// One refinement adjustment: a layer's weight or activation bitwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Knob {
    Weight(usize),
    Act(usize),
}

fn knob_label(plan: &BitPlan, k: Knob) -> String {
    match k {
        Knob::Weight(i) => plan.layers[i].layer.clone(),
        Knob::Act(i) => format!("{}/a", plan.layers[i].layer),
    }
}

/// Highest-sensitivity layers that can still grow, `m` of them.
fn pick_increase(plan: &BitPlan, scores: &[f64], m: usize) -> Vec<Knob> {
    let mut cand: Vec<usize> =
        (0..plan.layers.len()).filter(|&i| plan.layers[i].bits_w < 8).collect();
    cand.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    cand.into_iter().take(m).map(Knob::Weight).collect()
}

/// Lowest-sensitivity layers that can still shrink, `m` of them.
fn pick_decrease_size(plan: &BitPlan, scores: &[f64], m: usize) -> Vec<Knob> {
    let mut cand: Vec<usize> =
        (0..plan.layers.len()).filter(|&i| plan.layers[i].bits_w > 2).collect();
    cand.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    cand.into_iter().take(m).map(Knob::Weight).collect()
}

/// Under a bit-operations budget both bitwidths are in play: rank knobs by
/// saved bit-ops per unit of sensitivity and take the `m` best.
fn pick_decrease_bops(plan: &BitPlan, scores: &[f64], macs: &[u64], m: usize) -> Vec<Knob> {
    let mut cand: Vec<(Knob, f64)> = Vec::new();
    for (i, lp) in plan.layers.iter().enumerate() {
        if lp.bits_w > 2 {
            let saved = 2 * u64::from(lp.bits_a) * macs[i];
            cand.push((Knob::Weight(i), saved as f64 / (scores[i] + 1e-9)));
        }
        if lp.bits_a > 2 {
            let saved = 2 * u64::from(lp.bits_w) * macs[i];
            cand.push((Knob::Act(i), saved as f64 / (scores[i] + 1e-9)));
        }
    }
    let key = |k: Knob| match k {
        Knob::Weight(i) => (i, 0u8),
        Knob::Act(i) => (i, 1u8),
    };
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(key(a.0).cmp(&key(b.0))));
    cand.into_iter().take(m).map(|(k, _)| k).collect()
}

fn apply_knobs(plan: &mut BitPlan, knobs: &[Knob], up: bool) {
    for &k in knobs {
        match k {
            Knob::Weight(i) => {
                let b = &mut plan.layers[i].bits_w;
                *b = if up { (*b + 2).min(8) } else { (*b - 2).max(2) };
            }
            Knob::Act(i) => {
                let b = &mut plan.layers[i].bits_a;
                *b = if up { (*b + 2).min(8) } else { (*b - 2).max(2) };
            }
        }
    }
}

/// Runs the full two-phase search. The returned model carries the
/// fine-tuned float weights matching the returned plan, so re-evaluating
/// `(model, plan)` reproduces the reported accuracy. `train.epochs` is
/// ignored; the per-phase epoch counts come from `budget`.
pub fn run_sigmaquant(
    model: &ModelGraph,
    data: &PlanDatasets,
    targets: &Targets,
    budget: &SearchBudget,
    train: &TrainConfig,
) -> Result<PlanOutcome> {
    model.validate()?;
    if targets.metric_budget == 0 {
        return Err(Error::InvalidArg("metric budget must be positive".into()));
    }
    let macs_all = layer_macs(model)?;
    let mut work = model.clone();
    let mut plan = BitPlan::uniform(&work, 8, 8)?;
    calibrate(&work, data.calib, &mut plan)?;
    let mut meas = measure(&work, data.eval, &plan)?;
    // MACs indexed by plan position.
    let plan_macs: Vec<u64> = work
        .quantizable_indices()
        .iter()
        .map(|&i| macs_all[i])
        .collect();

    let mut trace = PlanTrace::default();
    let mut round = 0usize;
    let push = |trace: &mut PlanTrace,
                    round: &mut usize,
                    phase: Phase,
                    lambda: Option<f64>,
                    meas: &Measured,
                    action: Action,
                    plan: &BitPlan| {
        trace.records.push(TraceRecord {
            round: *round,
            phase,
            lambda,
            accuracy_pct: meas.accuracy_pct,
            size_bytes: meas.size_bytes,
            bops: meas.bops,
            zone: classify_zone(meas.accuracy_pct, metric_of(meas, targets), targets),
            action,
            bits: plan.bits_snapshot(),
        });
        *round += 1;
    };
    push(&mut trace, &mut round, Phase::One, None, &meas, Action::Init, &plan);

    let phase_cfg = |epochs: usize| TrainConfig { epochs, ..train.clone() };

    // Phase 1: sigma clustering under a growing size penalty.
    let cap = targets.i_max.unwrap_or(budget.phase1_rounds);
    let mut p1 = 0usize;
    while phase1_continue(meas.accuracy_pct, metric_of(&meas, targets), targets, p1, cap) {
        p1 += 1;
        let lambda = p1 as f64 / 10.0;
        let sigmas: Vec<f64> = plan
            .layers
            .iter()
            .map(|lp| {
                let idx = work.layer_index(&lp.layer).expect("plan layer exists");
                layer_sigma(work.layers[idx].weights.as_ref().expect("has weights").data())
            })
            .collect();
        let k = BIT_CHOICES.len().min(sigmas.len());
        let bitset = BIT_CHOICES[BIT_CHOICES.len() - k..].to_vec();
        let clusters = crate::cluster::adaptive_kmeans(&sigmas, k, lambda)?;
        let cluster_bits = crate::cluster::assign_bitwidths(&clusters, &bitset)?;
        for (i, lp) in plan.layers.iter_mut().enumerate() {
            lp.bits_w = cluster_bits[clusters.assignment[i]];
        }
        calibrate(&work, data.calib, &mut plan)?;
        match qat_epochs(&work, &plan, data.train, &phase_cfg(budget.phase1_epochs)) {
            Ok(tuned) => work = tuned,
            // A diverged round keeps the previous weights; the new plan is
            // still measured and the penalty keeps growing.
            Err(Error::Diverged { .. }) => {}
            Err(e) => return Err(e),
        }
        meas = measure(&work, data.eval, &plan)?;
        push(&mut trace, &mut round, Phase::One, Some(lambda), &meas, Action::Cluster, &plan);
    }

    if !targets.accuracy_buffered(meas.accuracy_pct)
        && !targets.metric_buffered(metric_of(&meas, targets))
    {
        push(
            &mut trace,
            &mut round,
            Phase::One,
            None,
            &meas,
            Action::Stop(PlanStatus::Infeasible),
            &plan,
        );
        return Ok(PlanOutcome {
            plan,
            trace,
            status: PlanStatus::Infeasible,
            model: work,
            accuracy_pct: meas.accuracy_pct,
            size_bytes: meas.size_bytes,
            bops: meas.bops,
        });
    }

    // Phase 2: per-layer refinement with snapshot/revert bookkeeping.
    let snap = |work: &ModelGraph, plan: &BitPlan, meas: &Measured| Snapshot {
        work: work.clone(),
        plan: plan.clone(),
        meas: *meas,
        score: score(meas, targets),
    };
    let mut best = snap(&work, &plan, &meas);
    let mut last_ok = best.clone();
    let mut stall = 0usize;
    let mut status: Option<PlanStatus> = None;

    for _ in 0..budget.phase2_rounds {
        if phase2_done(meas.accuracy_pct, metric_of(&meas, targets), targets) {
            status = Some(PlanStatus::TargetMet);
            break;
        }
        let scores: Vec<f64> =
            sensitivity_scores(&work, &plan)?.into_iter().map(|r| r.score).collect();
        let m = budget.layers_per_round.max(1);
        let (knobs, up) = if !targets.accuracy_met(meas.accuracy_pct) {
            (pick_increase(&plan, &scores, m), true)
        } else {
            let knobs = match targets.metric {
                TargetMetric::Size => pick_decrease_size(&plan, &scores, m),
                TargetMetric::Bops => pick_decrease_bops(&plan, &scores, &plan_macs, m),
            };
            (knobs, false)
        };
        if knobs.is_empty() {
            // No bitwidth can move in the needed direction: restore the best
            // visited plan and stop.
            work = best.work.clone();
            plan = best.plan.clone();
            meas = best.meas;
            push(&mut trace, &mut round, Phase::Two, None, &meas, Action::Revert, &plan);
            status = Some(PlanStatus::Reverted);
            break;
        }
        let labels: Vec<String> = knobs.iter().map(|&k| knob_label(&plan, k)).collect();
        let action =
            if up { Action::Increase(labels) } else { Action::Decrease(labels) };
        apply_knobs(&mut plan, &knobs, up);
        calibrate(&work, data.calib, &mut plan)?;
        match qat_epochs(&work, &plan, data.train, &phase_cfg(budget.phase2_epochs)) {
            Ok(tuned) => {
                work = tuned;
                meas = measure(&work, data.eval, &plan)?;
                push(&mut trace, &mut round, Phase::Two, None, &meas, action, &plan);
            }
            Err(Error::Diverged { .. }) => {
                // Fine-tuning blew up: drop the adjustment entirely.
                work = last_ok.work.clone();
                plan = last_ok.plan.clone();
                meas = last_ok.meas;
                push(&mut trace, &mut round, Phase::Two, None, &meas, Action::Revert, &plan);
                stall += 1;
                if stall >= budget.patience {
                    status = Some(PlanStatus::Reverted);
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        }

        if !targets.accuracy_buffered(meas.accuracy_pct)
            && !targets.metric_buffered(metric_of(&meas, targets))
        {
            // The step left both targets violated beyond their buffers:
            // return to the last state where at least one side held.
            work = last_ok.work.clone();
            plan = last_ok.plan.clone();
            meas = last_ok.meas;
            push(&mut trace, &mut round, Phase::Two, None, &meas, Action::Revert, &plan);
            stall += 1;
        } else {
            last_ok = snap(&work, &plan, &meas);
            if better(last_ok.score, best.score) {
                best = last_ok.clone();
                stall = 0;
            } else {
                stall += 1;
            }
        }
        if stall >= budget.patience {
            status = Some(PlanStatus::Reverted);
            break;
        }
    }

    let status = status.unwrap_or_else(|| {
        if phase2_done(meas.accuracy_pct, metric_of(&meas, targets), targets) {
            PlanStatus::TargetMet
        } else {
            PlanStatus::Reverted
        }
    });
    if status == PlanStatus::Reverted {
        // Hand back the best plan seen, not wherever the search stopped.
        if plan != best.plan || meas != best.meas {
            work = best.work.clone();
            plan = best.plan.clone();
            meas = best.meas;
            push(&mut trace, &mut round, Phase::Two, None, &meas, Action::Revert, &plan);
        }
    }
    push(&mut trace, &mut round, Phase::Two, None, &meas, Action::Stop(status), &plan);
    Ok(PlanOutcome {
        plan,
        trace,
        status,
        model: work,
        accuracy_pct: meas.accuracy_pct,
        size_bytes: meas.size_bytes,
        bops: meas.bops,
    })
}

// ── trace verification ──────────────────────────────────────────────────

fn snapshot_plan(bits: &[(String, u8, u8)]) -> BitPlan {
    BitPlan {
        layers: bits
            .iter()
            .map(|(l, w, a)| crate::plan::LayerPlan {
                layer: l.clone(),
                bits_w: *w,
                bits_a: *a,
                weight_q: None,
                act_q: None,
            })
            .collect(),
    }
}

/// Replays a trace against the model and the final plan file. Every round's
/// zone, size, and bit-operation columns are recomputed from its bitwidth
/// snapshot; action labels are checked against the snapshot deltas; the
/// final snapshot must equal the plan file. Returns the list of
/// inconsistencies (empty means the trace verifies).
pub fn verify_trace(model: &ModelGraph, file: &PlanFile, trace: &PlanTrace) -> Result<Vec<String>> {
    let mut problems = Vec::new();
    let mut say = |round: usize, msg: String| problems.push(format!("round {round}: {msg}"));
    if trace.records.is_empty() {
        return Ok(vec!["trace has no records".into()]);
    }
    let targets = Targets {
        metric: file.metric,
        accuracy_pct: file.accuracy_target_pct,
        metric_budget: file.metric_budget,
        delta_a: file.delta_a,
        delta_m: file.delta_m,
        i_max: None,
    };
    let expected_layers: Vec<&str> = file.layers.iter().map(|l| l.layer.as_str()).collect();

    let mut cluster_rounds = 0usize;
    for (i, r) in trace.records.iter().enumerate() {
        if r.round != i {
            say(r.round, format!("expected round {i}"));
        }
        let names: Vec<&str> = r.bits.iter().map(|(l, _, _)| l.as_str()).collect();
        if names != expected_layers {
            say(r.round, format!("snapshot layers {names:?} != plan layers {expected_layers:?}"));
            continue;
        }
        for (l, w, a) in &r.bits {
            if crate::quant::check_bits(*w).is_err() || crate::quant::check_bits(*a).is_err() {
                say(r.round, format!("layer {l} has invalid bits {w}/{a}"));
            }
        }

        // Recompute the derived columns from the snapshot.
        let splan = snapshot_plan(&r.bits);
        let size = model_size_bytes(model, &splan)?;
        let bops_now = bops(model, &splan)?;
        if size != r.size_bytes {
            say(r.round, format!("size_bytes {} but snapshot implies {size}", r.size_bytes));
        }
        if bops_now != r.bops {
            say(r.round, format!("bops {} but snapshot implies {bops_now}", r.bops));
        }
        let metric = match targets.metric {
            TargetMetric::Size => size,
            TargetMetric::Bops => bops_now,
        };
        let zone = classify_zone(r.accuracy_pct, metric, &targets);
        if zone != r.zone {
            say(r.round, format!("zone {} but state implies {zone}", r.zone));
        }

        // Lambda bookkeeping.
        match (&r.phase, &r.action) {
            (Phase::One, Action::Cluster) => {
                cluster_rounds += 1;
                let expect = cluster_rounds as f64 / 10.0;
                if r.lambda != Some(expect) {
                    say(r.round, format!("lambda {:?}, expected {expect}", r.lambda));
                }
            }
            _ => {
                if r.lambda.is_some() {
                    say(r.round, "lambda set outside a clustering round".into());
                }
            }
        }

        // Action vs snapshot delta.
        let prev = if i > 0 { Some(&trace.records[i - 1]) } else { None };
        match &r.action {
            Action::Init => {
                if i != 0 {
                    say(r.round, "init action after round 0".into());
                }
            }
            Action::Cluster => {
                if r.phase != Phase::One {
                    say(r.round, "cluster action outside phase 1".into());
                }
                if let Some(p) = prev {
                    for ((l, _, a), (_, _, pa)) in r.bits.iter().zip(&p.bits) {
                        if a != pa {
                            say(r.round, format!("cluster changed activation bits of {l}"));
                        }
                    }
                }
            }
            Action::Increase(knobs) | Action::Decrease(knobs) => {
                let Some(p) = prev else {
                    say(r.round, "adjustment with no previous round".into());
                    continue;
                };
                let up = matches!(r.action, Action::Increase(_));
                let mut expect = p.bits.clone();
                for knob in knobs {
                    let (name, act) = match knob.strip_suffix("/a") {
                        Some(n) => (n, true),
                        None => (knob.as_str(), false),
                    };
                    match expect.iter_mut().find(|(l, _, _)| l == name) {
                        None => say(r.round, format!("action names unknown layer {name}")),
                        Some(slot) => {
                            let b = if act { &mut slot.2 } else { &mut slot.1 };
                            let next = if up { *b + 2 } else { *b - 2 };
                            if !(2..=8).contains(&next) {
                                say(r.round, format!("knob {knob} pushes bits out of range"));
                            } else {
                                *b = next;
                            }
                        }
                    }
                }
                if expect != r.bits {
                    say(r.round, format!("snapshot does not match action {}", r.action));
                }
            }
            Action::Revert => {
                let matches_earlier = trace.records[..i].iter().any(|e| e.bits == r.bits);
                if !matches_earlier {
                    say(r.round, "revert snapshot matches no earlier round".into());
                }
            }
            Action::Stop(s) => {
                if i + 1 != trace.records.len() {
                    say(r.round, "stop record is not last".into());
                }
                if let Some(p) = prev {
                    if p.bits != r.bits {
                        say(r.round, "stop record changed the plan".into());
                    }
                }
                if *s != file.status {
                    say(r.round, format!("stop status {s} but plan file says {}", file.status));
                }
            }
        }
    }

    // Structural checks across the whole trace.
    match &trace.records[0].action {
        Action::Init => {}
        _ => say(0, "first record is not init".into()),
    }
    if let Some(two) = trace.records.iter().position(|r| r.phase == Phase::Two) {
        if trace.records[two..].iter().any(|r| r.phase == Phase::One) {
            problems.push("phase 1 record appears after phase 2 began".into());
        }
    }
    match trace.records.last() {
        Some(TraceRecord { action: Action::Stop(_), .. }) => {}
        _ => problems.push("trace does not end with a stop record".into()),
    }
    let last = trace.records.last().expect("nonempty");
    let final_bits: Vec<(String, u8, u8)> =
        file.layers.iter().map(|l| (l.layer.clone(), l.bits_w, l.bits_a)).collect();
    if last.bits != final_bits {
        problems.push("final snapshot does not match the plan file".into());
    }
    Ok(problems)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gen_synthetic;
    use crate::engine::init_mlp;
    use crate::plan::{parse_trace_csv, render_trace_csv, Zone};

    fn small_setup(sep: f64) -> (ModelGraph, Dataset, Dataset, Dataset) {
        let model = init_mlp("tiny", &[8, 10, 6, 3], 7).unwrap();
        let train = gen_synthetic(11, 480, 8, 3, sep).unwrap();
        let eval = gen_synthetic(12, 240, 8, 3, sep).unwrap();
        let calib = gen_synthetic(13, 96, 8, 3, sep).unwrap();
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
        let trained = crate::engine::train_float(&model, &train, &cfg).unwrap();
        (trained, train, eval, calib)
    }

    #[test]
    fn already_met_targets_stop_immediately() {
        let (model, train, eval, calib) = small_setup(8.0);
        let data = PlanDatasets { train: &train, eval: &eval, calib: &calib };
        // Uniform 8/8 already satisfies a generous budget and a low floor.
        let targets = Targets::new(TargetMetric::Size, 20.0, 10_000);
        let out =
            run_sigmaquant(&model, &data, &targets, &SearchBudget::default(), &TrainConfig::default())
                .unwrap();
        assert_eq!(out.status, PlanStatus::TargetMet);
        assert_eq!(out.trace.records.len(), 2);
        assert_eq!(out.trace.records[0].action, Action::Init);
        assert_eq!(out.trace.records[1].action, Action::Stop(PlanStatus::TargetMet));
        assert_eq!(out.trace.records[1].zone, Zone::Target);
        assert!(out.plan.layers.iter().all(|l| l.bits_w == 8 && l.bits_a == 8));
    }

    #[test]
    fn impossible_targets_are_infeasible_after_capped_rounds() {
        // Heavily overlapping classes keep accuracy far from the perfect
        // floor, so both targets stay violated through every round.
        let (model, train, eval, calib) = small_setup(1.5);
        let data = PlanDatasets { train: &train, eval: &eval, calib: &calib };
        // One-byte size budget with a perfect-accuracy floor: hopeless on
        // both axes, and the buffers are too tight to enter.
        let targets = Targets {
            metric: TargetMetric::Size,
            accuracy_pct: 100.0,
            metric_budget: 1,
            delta_a: 0.01,
            delta_m: 1,
            i_max: None,
        };
        let budget = SearchBudget { phase1_epochs: 1, ..SearchBudget::default() };
        let out = run_sigmaquant(&model, &data, &targets, &budget, &TrainConfig::default()).unwrap();
        assert_eq!(out.status, PlanStatus::Infeasible);
        let clusters = out
            .trace
            .records
            .iter()
            .filter(|r| r.action == Action::Cluster)
            .count();
        assert_eq!(clusters, budget.phase1_rounds);
        let lambdas: Vec<f64> = out
            .trace
            .records
            .iter()
            .filter_map(|r| r.lambda)
            .collect();
        assert_eq!(lambdas, vec![0.1, 0.2, 0.3]);
        assert_eq!(
            out.trace.records.last().unwrap().action,
            Action::Stop(PlanStatus::Infeasible)
        );
    }

    #[test]
    fn search_reaches_a_reduced_size_target() {
        let (model, train, eval, calib) = small_setup(8.0);
        let data = PlanDatasets { train: &train, eval: &eval, calib: &calib };
        let float_acc = evaluate_accuracy(&model, &eval, None).unwrap().accuracy_pct;
        let int8 = crate::hw::int8_size_bytes(&model);
        let targets = Targets::new(TargetMetric::Size, float_acc - 2.0, int8 * 7 / 10);
        let budget = SearchBudget {
            phase1_epochs: 2,
            phase2_epochs: 2,
            phase2_rounds: 12,
            ..SearchBudget::default()
        };
        let out = run_sigmaquant(&model, &data, &targets, &budget, &TrainConfig::default()).unwrap();
        assert_eq!(out.status, PlanStatus::TargetMet, "trace:\n{}", render_trace_csv(&out.trace));
        assert!(out.size_bytes <= targets.metric_budget);
        assert!(out.accuracy_pct >= targets.accuracy_pct);

        // The returned model and plan reproduce the reported numbers.
        let re = measure(&out.model, &eval, &out.plan).unwrap();
        assert_eq!(re.accuracy_pct, out.accuracy_pct);
        assert_eq!(re.size_bytes, out.size_bytes);

        // And the trace verifies against the final plan.
        let file = PlanFile::from_plan(&out.plan, &targets, out.status).unwrap();
        let problems = verify_trace(&out.model, &file, &out.trace).unwrap();
        assert!(problems.is_empty(), "verify found: {problems:?}");

        // CSV round-trip preserves the trace exactly.
        let csv = render_trace_csv(&out.trace);
        assert_eq!(parse_trace_csv(&csv).unwrap(), out.trace);
    }

    #[test]
    fn search_is_deterministic() {
        let (model, train, eval, calib) = small_setup(6.0);
        let data = PlanDatasets { train: &train, eval: &eval, calib: &calib };
        let targets = Targets::new(TargetMetric::Size, 80.0, 150);
        let budget = SearchBudget {
            phase1_epochs: 1,
            phase2_epochs: 1,
            phase2_rounds: 6,
            ..SearchBudget::default()
        };
        let a = run_sigmaquant(&model, &data, &targets, &budget, &TrainConfig::default()).unwrap();
        let b = run_sigmaquant(&model, &data, &targets, &budget, &TrainConfig::default()).unwrap();
        assert_eq!(a.status, b.status);
        assert_eq!(a.plan, b.plan);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn bops_target_can_lower_activation_bits() {
        let (model, train, eval, calib) = small_setup(8.0);
        let data = PlanDatasets { train: &train, eval: &eval, calib: &calib };
        let float_acc = evaluate_accuracy(&model, &eval, None).unwrap().accuracy_pct;
        let plan8 = BitPlan::uniform(&model, 8, 8).unwrap();
        let full = crate::hw::bops(&model, &plan8).unwrap();
        let targets = Targets::new(TargetMetric::Bops, float_acc - 8.0, full / 3);
        let budget = SearchBudget {
            phase1_epochs: 2,
            phase2_epochs: 2,
            phase2_rounds: 16,
            ..SearchBudget::default()
        };
        let out = run_sigmaquant(&model, &data, &targets, &budget, &TrainConfig::default()).unwrap();
        assert_eq!(out.status, PlanStatus::TargetMet, "trace:\n{}", render_trace_csv(&out.trace));
        assert!(out.bops <= targets.metric_budget);
        // A quarter budget cannot be met on weight bits alone from the
        // clustering floor, so some activation bits must have moved.
        let act_lowered = out.plan.layers.iter().any(|l| l.bits_a < 8);
        let weights_floor = out.plan.layers.iter().all(|l| l.bits_w == 2);
        assert!(act_lowered || weights_floor);
    }

    #[test]
    fn verify_catches_tampering() {
        let (model, train, eval, calib) = small_setup(8.0);
        let data = PlanDatasets { train: &train, eval: &eval, calib: &calib };
        let targets = Targets::new(TargetMetric::Size, 50.0, 10_000);
        let out =
            run_sigmaquant(&model, &data, &targets, &SearchBudget::default(), &TrainConfig::default())
                .unwrap();
        let file = PlanFile::from_plan(&out.plan, &targets, out.status).unwrap();
        assert!(verify_trace(&model, &file, &out.trace).unwrap().is_empty());

        // Forged accuracy flips the zone.
        let mut forged = out.trace.clone();
        forged.records[0].accuracy_pct = 0.0;
        assert!(!verify_trace(&model, &file, &forged).unwrap().is_empty());

        // Forged size disagrees with the snapshot.
        let mut forged = out.trace.clone();
        forged.records[0].size_bytes += 1;
        assert!(!verify_trace(&model, &file, &forged).unwrap().is_empty());

        // Forged final bits disagree with the plan file.
        let mut forged = out.trace.clone();
        let n = forged.records.len();
        for r in forged.records[n - 2..].iter_mut() {
            for b in r.bits.iter_mut() {
                b.1 = 2;
            }
            r.size_bytes = model_size_bytes(&model, &snapshot_plan(&r.bits)).unwrap();
            r.bops = crate::hw::bops(&model, &snapshot_plan(&r.bits)).unwrap();
        }
        assert!(!verify_trace(&model, &file, &forged).unwrap().is_empty());
    }
}
