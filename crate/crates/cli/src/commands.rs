//! The eight subcommands. Each returns the process exit code: 0 for
//! success, the plan-status codes for `plan`, and 1 for verification
//! failures; operational errors propagate as `Err` and exit 1.

use std::fs;
use std::path::{Path, PathBuf};

use sigmaquant_core::cluster::{adaptive_kmeans, assign_bitwidths};
use sigmaquant_core::engine::{evaluate_accuracy, train_float};
use sigmaquant_core::hw::{bops, hw_report, int8_size_bytes, model_size_bytes, HwCostTable, HwReport};
use sigmaquant_core::io::{load_idx_dataset, load_model, save_model, write_atomic};
use sigmaquant_core::plan::{render_trace_csv, BitPlan, PlanFile, TargetMetric, Targets};
use sigmaquant_core::planner::{run_sigmaquant, verify_trace, PlanDatasets};
use sigmaquant_core::quant::{fake_quant_weights, QuantMode, BIT_CHOICES};
use sigmaquant_core::stats::{layer_kl_at_bits, sensitivity_scores};
use sigmaquant_core::{
    gen_synthetic, init_mlp, parse_trace_csv, Dataset, Error, ModelGraph, Result,
};

use crate::config::RunConfig;

// ── shared plumbing ──────────────────────────────────────────────────────

struct Splits {
    train: Dataset,
    eval: Dataset,
    calib: Dataset,
}

/// Loads the train/eval/calibration splits named by the config. The
/// synthetic generator derives one seed per split from the run seed so the
/// splits are disjoint draws; IDX calibration reuses the head of the
/// training split.
fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let ds = &cfg.dataset;
    if let Some(syn) = &ds.synthetic {
        let train = gen_synthetic(cfg.seed, syn.train, syn.features, syn.classes, syn.separation)?;
        let eval = gen_synthetic(
            cfg.seed.wrapping_add(1),
            syn.eval,
            syn.features,
            syn.classes,
            syn.separation,
        )?;
        let calib = gen_synthetic(
            cfg.seed.wrapping_add(2),
            ds.calib_samples,
            syn.features,
            syn.classes,
            syn.separation,
        )?;
        return Ok(Splits { train, eval, calib });
    }
    let need = |p: &Option<PathBuf>, field: &str| {
        p.clone().ok_or_else(|| Error::Config(format!("missing dataset field: {field}")))
    };
    let train = load_idx_dataset(
        need(&ds.train_images, "dataset.train_images")?,
        need(&ds.train_labels, "dataset.train_labels")?,
    )?;
    let eval = load_idx_dataset(
        need(&ds.eval_images, "dataset.eval_images")?,
        need(&ds.eval_labels, "dataset.eval_labels")?,
    )?;
    let calib = train.take(ds.calib_samples.min(train.len()));
    Ok(Splits { train, eval, calib })
}

/// Checks that a model and a dataset fit each other, with errors that name
/// the mismatching quantities.
fn check_model_data(model: &ModelGraph, data: &Dataset) -> Result<()> {
    let model_in: usize = model.input_shape.iter().product();
    if model_in != data.sample_width() {
        return Err(Error::Config(format!(
            "model input width {model_in} does not match dataset sample width {}",
            data.sample_width()
        )));
    }
    if let Some(classes) = model.output_classes() {
        if classes < data.num_classes {
            return Err(Error::Config(format!(
                "model emits {classes} classes but the dataset labels {} classes",
                data.num_classes
            )));
        }
    }
    Ok(())
}

/// The untrained model the config describes: a manifest from disk, or a
/// fresh seeded multilayer perceptron.
fn base_model(cfg: &RunConfig) -> Result<ModelGraph> {
    if let Some(path) = &cfg.model.manifest {
        return load_model(path);
    }
    let dims = cfg
        .model
        .mlp_dims
        .as_ref()
        .ok_or_else(|| Error::Config("set either model.manifest or model.mlp_dims".into()))?;
    init_mlp("mlp", dims, cfg.seed)
}

/// The trained float model every downstream command works from. Loads the
/// `train` artifact when present; otherwise trains the base model now and
/// saves the artifact, so each command is self-sufficient.
fn trained_model(cfg: &RunConfig, splits: &Splits) -> Result<ModelGraph> {
    let path = cfg.model_path();
    if path.exists() {
        return load_model(&path);
    }
    let base = base_model(cfg)?;
    check_model_data(&base, &splits.train)?;
    println!("no trained model at {}; training the float baseline now", path.display());
    let trained = train_float(&base, &splits.train, &cfg.train)?;
    save_model(&trained, &path)?;
    Ok(trained)
}

/// Prefers the fine-tuned model written by `plan`, falling back to the
/// float-trained artifact.
fn tuned_or_trained(cfg: &RunConfig, splits: &Splits) -> Result<ModelGraph> {
    let tuned = cfg.tuned_model_path();
    if tuned.exists() {
        return load_model(&tuned);
    }
    trained_model(cfg, splits)
}

fn read_plan_file(path: &Path) -> Result<PlanFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Json { path: path.display().to_string(), source: e })
}

fn load_cost_table(cfg: &RunConfig) -> Result<HwCostTable> {
    match &cfg.hw_cost_table {
        None => Ok(HwCostTable::default()),
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::Json { path: path.display().to_string(), source: e })
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    write_atomic(path, text.as_bytes())
}

fn write_json_pretty<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArg(format!("serialization failed: {e}")))?;
    text.push('\n');
    write_text(path, &text)
}

/// Resolves the configured targets section into concrete planner targets,
/// deriving the accuracy floor from the float baseline and ratio budgets
/// from the 8-bit reference when absolute values are not given.
fn resolve_targets(cfg: &RunConfig, model: &ModelGraph, baseline_acc: f64) -> Result<Targets> {
    let spec = &cfg.targets;
    let accuracy = spec.accuracy_pct.unwrap_or(baseline_acc - spec.accuracy_drop_pct);
    let scale = |base: u64, ratio: f64| -> u64 { ((base as f64) * ratio).floor().max(1.0) as u64 };
    let budget = match spec.metric {
        TargetMetric::Size => match spec.size_budget_bytes {
            Some(b) => b,
            None => scale(int8_size_bytes(model), spec.size_ratio_of_int8.unwrap_or(0.75)),
        },
        TargetMetric::Bops => match spec.bops_budget {
            Some(b) => b,
            None => {
                let reference = bops(model, &BitPlan::uniform(model, 8, 8)?)?;
                scale(reference, spec.bops_ratio_of_int8.unwrap_or(0.75))
            }
        },
    };
    let mut targets = Targets::new(spec.metric, accuracy, budget);
    if let Some(da) = spec.delta_a {
        targets.delta_a = da;
    }
    if let Some(dm) = spec.delta_m {
        targets.delta_m = dm;
    }
    targets.i_max = spec.i_max;
    Ok(targets)
}

// ── commands ─────────────────────────────────────────────────────────────

/// Trains the float baseline from scratch and writes the model artifact.
pub fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    let splits = load_splits(cfg)?;
    let base = base_model(cfg)?;
    check_model_data(&base, &splits.train)?;
    let trained = train_float(&base, &splits.train, &cfg.train)?;
    let path = cfg.model_path();
    save_model(&trained, &path)?;
    let report = evaluate_accuracy(&trained, &splits.eval, None)?;
    println!(
        "trained {} for {} epochs on {} samples",
        trained.name,
        cfg.train.epochs,
        splits.train.len()
    );
    println!(
        "eval accuracy: {:.2}% ({} of {}), mean loss {:.4}",
        report.accuracy_pct, report.correct, report.total, report.mean_loss
    );
    println!("wrote {}", path.display());
    Ok(0)
}

/// Emits the per-layer distribution statistics table (sigma and the
/// quantization KL at every supported width).
pub fn cmd_stats(cfg: &RunConfig) -> Result<i32> {
    let splits = load_splits(cfg)?;
    let model = trained_model(cfg, &splits)?;
    let plan = BitPlan::uniform(&model, 8, 8)?;
    let records = sensitivity_scores(&model, &plan)?;

    let mut csv = String::from("# schema_version: 1\n");
    csv.push_str("layer,sigma,kl@2,kl@4,kl@6,kl@8,normalized_kl\n");
    for rec in &records {
        let idx = model
            .layer_index(&rec.layer)
            .ok_or_else(|| Error::InvalidArg(format!("unknown layer {}", rec.layer)))?;
        let weights = model.layers[idx]
            .weights
            .as_ref()
            .ok_or_else(|| Error::InvalidArg(format!("layer {} has no weights", rec.layer)))?;
        let mut kls = Vec::with_capacity(BIT_CHOICES.len());
        for bits in BIT_CHOICES {
            kls.push(layer_kl_at_bits(weights.data(), bits, QuantMode::Max)?);
        }
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            rec.layer, rec.sigma, kls[0], kls[1], kls[2], kls[3], rec.score
        ));
    }
    let path = cfg.stats_path();
    write_text(&path, &csv)?;
    print!("{csv}");
    println!("wrote {}", path.display());
    Ok(0)
}

/// Groups the layers by weight sigma under the size-penalized clustering
/// objective and shows the bitwidths each cluster would receive.
pub fn cmd_cluster(cfg: &RunConfig, lambda: f64) -> Result<i32> {
    let splits = load_splits(cfg)?;
    let model = trained_model(cfg, &splits)?;
    let plan = BitPlan::uniform(&model, 8, 8)?;
    let records = sensitivity_scores(&model, &plan)?;
    let sigmas: Vec<f64> = records.iter().map(|r| r.sigma).collect();
    let k = sigmas.len().min(BIT_CHOICES.len());
    let clusters = adaptive_kmeans(&sigmas, k, lambda)?;
    let bitset = &BIT_CHOICES[BIT_CHOICES.len() - k..];
    let bits = assign_bitwidths(&clusters, bitset)?;

    let mut csv = String::from("# schema_version: 1\n");
    csv.push_str("layer,sigma,cluster,bits_w\n");
    for (rec, &cluster) in records.iter().zip(&clusters.assignment) {
        csv.push_str(&format!("{},{},{},{}\n", rec.layer, rec.sigma, cluster, bits[cluster]));
    }
    let path = cfg.cluster_path();
    write_text(&path, &csv)?;
    print!("{csv}");
    println!(
        "lambda {}, {} clusters over {} layers, objective {:.6e}",
        lambda,
        k,
        sigmas.len(),
        clusters.objective
    );
    println!("wrote {}", path.display());
    Ok(0)
}

/// Runs the two-phase bitwidth search and writes the plan, its trace, and
/// the fine-tuned model. The exit code reports the terminal status.
pub fn cmd_plan(cfg: &RunConfig) -> Result<i32> {
    let splits = load_splits(cfg)?;
    let model = trained_model(cfg, &splits)?;
    let baseline = evaluate_accuracy(&model, &splits.eval, None)?;
    let targets = resolve_targets(cfg, &model, baseline.accuracy_pct)?;
    println!(
        "baseline accuracy {:.2}%; targets: accuracy >= {:.2}%, {} <= {}",
        baseline.accuracy_pct, targets.accuracy_pct, targets.metric, targets.metric_budget
    );

    let data = PlanDatasets { train: &splits.train, eval: &splits.eval, calib: &splits.calib };
    let outcome = run_sigmaquant(&model, &data, &targets, &cfg.budget, &cfg.train)?;

    let file = PlanFile::from_plan(&outcome.plan, &targets, outcome.status)?;
    write_json_pretty(&cfg.plan_path(), &file)?;
    write_text(&cfg.trace_path(), &render_trace_csv(&outcome.trace))?;
    let mut tuned = outcome.model.clone();
    tuned.name = format!("{}_tuned", tuned.name);
    save_model(&tuned, cfg.tuned_model_path())?;

    println!("status: {}", outcome.status);
    println!("accuracy: {:.2}% (target {:.2}%)", outcome.accuracy_pct, targets.accuracy_pct);
    println!(
        "size: {} bytes, bops: {} ({} budget: {})",
        outcome.size_bytes, outcome.bops, targets.metric, targets.metric_budget
    );
    for lp in &outcome.plan.layers {
        println!("  {}: w{} a{}", lp.layer, lp.bits_w, lp.bits_a);
    }
    println!(
        "wrote {}, {}, {}",
        cfg.plan_path().display(),
        cfg.trace_path().display(),
        cfg.tuned_model_path().display()
    );
    Ok(outcome.status.exit_code())
}

/// Applies a plan's weight grids to the fine-tuned model and writes the
/// quantized-weight artifact.
pub fn cmd_quantize(cfg: &RunConfig) -> Result<i32> {
    let tuned_path = cfg.tuned_model_path();
    if !tuned_path.exists() {
        return Err(Error::Config(format!(
            "no fine-tuned model at {}; run `sigmaquant plan` first",
            tuned_path.display()
        )));
    }
    let tuned = load_model(&tuned_path)?;
    let file = read_plan_file(&cfg.plan_path())?;
    let plan = file.to_bit_plan()?;

    let mut quantized = tuned.clone();
    quantized.name = format!("{}_quantized", tuned.name.trim_end_matches("_tuned"));
    for lp in &plan.layers {
        let idx = quantized
            .layer_index(&lp.layer)
            .ok_or_else(|| Error::InvalidArg(format!("plan names unknown layer {}", lp.layer)))?;
        let weights = quantized.layers[idx]
            .weights
            .as_ref()
            .ok_or_else(|| Error::InvalidArg(format!("layer {} has no weights", lp.layer)))?;
        let grid = lp
            .weight_q
            .as_ref()
            .ok_or_else(|| Error::InvalidArg(format!("plan has no weight grid for {}", lp.layer)))?;
        quantized.layers[idx].weights = Some(fake_quant_weights(weights, grid)?);
    }
    let out = cfg.quantized_model_path();
    save_model(&quantized, &out)?;
    println!(
        "quantized {} layers; packed weight size {} bytes",
        plan.layers.len(),
        model_size_bytes(&tuned, &plan)?
    );
    println!("wrote {}", out.display());
    Ok(0)
}

/// Evaluates a model on the eval split, optionally under a plan's
/// fake-quantized forward pass.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    model_path: Option<&Path>,
    plan_path: Option<&Path>,
) -> Result<i32> {
    let splits = load_splits(cfg)?;
    let model = match model_path {
        Some(p) => load_model(p)?,
        None => tuned_or_trained(cfg, &splits)?,
    };
    check_model_data(&model, &splits.eval)?;
    let plan = match plan_path {
        Some(p) => Some(read_plan_file(p)?.to_bit_plan()?),
        None => None,
    };
    let report = evaluate_accuracy(&model, &splits.eval, plan.as_ref())?;
    println!(
        "{} accuracy: {:.2}% ({} of {}), mean loss {:.4}",
        if plan.is_some() { "quantized" } else { "float" },
        report.accuracy_pct,
        report.correct,
        report.total,
        report.mean_loss
    );
    Ok(0)
}

fn hw_report_csv(report: &HwReport) -> String {
    let mut csv = String::from("# schema_version: 1\n");
    csv.push_str("row,label,bits_w,bits_a,macs,size_bytes,bops,cycles,energy_shift_add\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "layer,{},{},{},{},{},{},{},{}\n",
            r.layer, r.bits_w, r.bits_a, r.macs, r.size_bytes, r.bops, r.cycles, r.energy_shift_add
        ));
    }
    for u in &report.uniform {
        csv.push_str(&format!(
            "uniform,{},{},{},{},{},{},{},{}\n",
            u.label,
            u.bits_w,
            u.bits_a,
            report.summary.macs,
            u.size_bytes,
            u.bops,
            u.cycles,
            u.energy_shift_add
        ));
    }
    let s = &report.summary;
    csv.push_str(&format!(
        "baseline,int8,8,8,{},{},{},{},{}\n",
        s.macs, s.int8_size_bytes, s.int8_bops, s.int8_cycles, s.int8_energy
    ));
    csv.push_str(&format!(
        "plan,total,,,{},{},{},{},{}\n",
        s.macs, s.size_bytes, s.bops, s.cycles, s.energy_shift_add
    ));
    csv
}

/// Prices the plan on the shift-add cost model and writes the JSON and CSV
/// reports, including the uniform-bitwidth reference rows.
pub fn cmd_hw_report(cfg: &RunConfig, plan_path: Option<&Path>) -> Result<i32> {
    let splits = load_splits(cfg)?;
    let model = tuned_or_trained(cfg, &splits)?;
    let default_plan_path = cfg.plan_path();
    let plan_path = plan_path.unwrap_or(&default_plan_path);
    let file = read_plan_file(plan_path)?;
    let plan = file.to_bit_plan()?;
    let table = load_cost_table(cfg)?;
    let report = hw_report(&model, &plan, &table)?;

    write_json_pretty(&cfg.hw_report_json_path(), &report)?;
    write_text(&cfg.hw_report_csv_path(), &hw_report_csv(&report))?;

    let s = &report.summary;
    println!("{}", report.note);
    println!("plan size: {} bytes ({:.3}x of the 8-bit packing)", s.size_bytes, s.size_ratio_vs_int8);
    println!("plan cycles/mac: {:.3}", s.cycles_per_mac);
    println!("plan energy vs int8 multiplier: {:.3}x", s.energy_ratio_vs_int8);
    println!("shift-add vs int8 area: {:.6}", s.area_ratio_shift_add_vs_int8);
    println!(
        "wrote {} and {}",
        cfg.hw_report_json_path().display(),
        cfg.hw_report_csv_path().display()
    );
    Ok(0)
}

/// Replays a trace against the plan file and the model, printing every
/// inconsistency. Exit 0 means the trace verifies.
pub fn cmd_verify_trace(cfg: &RunConfig) -> Result<i32> {
    let tuned_path = cfg.tuned_model_path();
    if !tuned_path.exists() {
        return Err(Error::Config(format!(
            "no fine-tuned model at {}; run `sigmaquant plan` first",
            tuned_path.display()
        )));
    }
    let model = load_model(&tuned_path)?;
    let file = read_plan_file(&cfg.plan_path())?;
    let trace_path = cfg.trace_path();
    let text = fs::read_to_string(&trace_path)
        .map_err(|e| Error::io(trace_path.display().to_string(), e))?;
    let trace = parse_trace_csv(&text)?;
    let problems = verify_trace(&model, &file, &trace)?;
    if problems.is_empty() {
        println!(
            "trace verified: {} records replay to the plan (status {})",
            trace.records.len(),
            file.status
        );
        Ok(0)
    } else {
        for p in &problems {
            eprintln!("problem: {p}");
        }
        eprintln!("{} problems found", problems.len());
        Ok(1)
    }
}
