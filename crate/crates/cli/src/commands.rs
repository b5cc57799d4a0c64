use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use freqcal_core::adapter::param_count;
use freqcal_core::diagnostics::{per_step_mse, write_svg_plot};
use freqcal_core::protocol::{audit_update_schedule, matured_schedule, test_batches};
use freqcal_core::{
    audit_streaming_leakage, correction_spectrum, early_vs_late_curves, evaluate, fit_dlinear, fit_ols,
    run_protocol, AdapterKind, AdapterState, EvalReport, ForecasterKind, ForecasterModel, Region, RunTrace,
    TimeSeriesDataset,
};
use serde_json::json;

use crate::config::{load_config, ConfigArgs, ExperimentConfig};
use crate::UsageError;

fn load_dataset(cfg: &ExperimentConfig) -> Result<TimeSeriesDataset> {
    let path = cfg.data_path()?;
    let ds = TimeSeriesDataset::load_csv(path, &cfg.timestamp_column)
        .with_context(|| format!("loading {}", path.display()))?;
    log::info!("{}: {} rows x {} channels", ds.name, ds.len(), ds.channels());
    Ok(ds)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn fit_forecaster(cfg: &ExperimentConfig, ds: &TimeSeriesDataset) -> Result<ForecasterModel> {
    let model = match cfg.forecaster {
        ForecasterKind::Ols => fit_ols(ds, cfg.lookback, cfg.horizon, cfg.ridge)?,
        ForecasterKind::Dlinear => fit_dlinear(ds, cfg.lookback, cfg.horizon, &cfg.dlinear)?,
        ForecasterKind::Naive => ForecasterModel::naive(cfg.lookback, cfg.horizon, ds.channels()),
    };
    Ok(model)
}

fn source_forecaster(cfg: &ExperimentConfig, ds: &TimeSeriesDataset) -> Result<ForecasterModel> {
    let Some(path) = &cfg.model else {
        return fit_forecaster(cfg, ds);
    };
    if !path.is_file() {
        return Err(UsageError(format!("model {} does not exist", path.display())).into());
    }
    let model = ForecasterModel::load_json(path).with_context(|| format!("loading {}", path.display()))?;
    if (model.lookback, model.horizon, model.channels) != (cfg.lookback, cfg.horizon, ds.channels()) {
        return Err(UsageError(format!(
            "model {} is L={} H={} C={}, the run needs L={} H={} C={}",
            path.display(),
            model.lookback,
            model.horizon,
            model.channels,
            cfg.lookback,
            cfg.horizon,
            ds.channels()
        ))
        .into());
    }
    Ok(model)
}

pub fn train(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let ds = load_dataset(&cfg)?;
    let hash = cfg.hash();
    let start = Instant::now();
    let model = fit_forecaster(&cfg, &ds)?;
    let fit_secs = start.elapsed().as_secs_f64();
    let train_mse = model.mse_on(&ds, Region::Train)?;
    let val_mse = model.mse_on(&ds, Region::Val)?;
    prepare_out(&cfg.out)?;
    model.save_json_tagged(cfg.out.join("model.json"), Some(&hash))?;
    write_json(
        &cfg.out.join("train_report.json"),
        &json!({
            "config_hash": hash,
            "dataset": ds.name,
            "forecaster": cfg.forecaster.to_string(),
            "train_mse": train_mse,
            "val_mse": val_mse,
            "train_loss": model.train_loss,
            "config": cfg.to_json(),
            "timing": { "fit_s": fit_secs },
        }),
    )?;
    println!("forecaster  {} (L={}, H={})", cfg.forecaster, cfg.lookback, cfg.horizon);
    println!("train MSE   {train_mse:.6}");
    println!("val MSE     {val_mse:.6}");
    println!("saved       {}", cfg.out.join("model.json").display());
    println!("config_hash {hash}");
    Ok(())
}

pub fn run(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let ds = load_dataset(&cfg)?;
    let hash = cfg.hash();
    let model = source_forecaster(&cfg, &ds)?;
    let mut state = AdapterState::new(cfg.adapter_config(), ds.channels(), cfg.lookback, cfg.horizon);
    let trace = run_protocol(&ds, &model, &mut state, &cfg.protocol(), cfg.lookback, cfg.horizon)?;
    for w in &trace.warnings {
        log::warn!("{w}");
    }
    let adapter_label = if cfg.use_input_calibration {
        cfg.adapter.to_string()
    } else {
        format!("{}_output_only", cfg.adapter)
    };
    let report = evaluate(&trace, &ds).with_run_info(
        model.kind().to_string(),
        adapter_label,
        state.param_count(),
        cfg.to_json(),
    );

    prepare_out(&cfg.out)?;
    write_report(&cfg.out, &report, &hash)?;
    trace.write_summary_json(cfg.out.join("trace.json"), &hash)?;
    trace.write_batch_csv(cfg.out.join("batches.csv"), &hash)?;
    trace.write_window_csv(cfg.out.join("windows.csv"), &hash)?;
    trace.write_binary(cfg.out.join("trace.bin"), &hash)?;
    state.save_json_tagged(cfg.out.join("adapter.json"), Some(&hash))?;

    println!(
        "{} / {} / {} on {} (L={}, H={})",
        report.forecaster, report.adapter, report.mode, report.dataset, report.lookback, report.horizon
    );
    println!("frozen MSE  {:.6}  MAE {:.6}", report.frozen_mse, report.frozen_mae);
    println!("final MSE   {:.6}  MAE {:.6}", report.mse, report.mae);
    println!(
        "{} windows, {} batches{}, {} updates, {} parameters",
        report.windows,
        report.batches,
        report.period.map(|p| format!(" (period {p})")).unwrap_or_default(),
        report.updates,
        report.param_count
    );
    println!("outputs     {}", cfg.out.display());
    println!("config_hash {hash}");
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport, hash: &str) -> Result<()> {
    let mut value = json!({ "config_hash": hash });
    if let (Some(obj), serde_json::Value::Object(fields)) = (value.as_object_mut(), serde_json::to_value(report)?) {
        obj.extend(fields);
    }
    write_json(&dir.join("report.json"), &value)?;
    let csv = format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row(hash));
    fs::write(dir.join("report.csv"), csv)?;
    Ok(())
}

pub fn audit(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let ds = load_dataset(&cfg)?;
    ds.check_windows(cfg.lookback, cfg.horizon)?;
    let hash = cfg.hash();
    let (batches, period) = test_batches(&ds, cfg.lookback, cfg.horizon, cfg.batch_rule)?;
    let plan: Vec<(usize, usize)> = batches.iter().map(|b| (b.anchor, b.size())).collect();
    let streaming = audit_streaming_leakage(&plan, cfg.horizon)?;
    let matured = audit_update_schedule(&plan, cfg.horizon, &matured_schedule(&plan, cfg.horizon)?)?;

    prepare_out(&cfg.out)?;
    write_json(
        &cfg.out.join("audit.json"),
        &json!({
            "config_hash": hash,
            "dataset": ds.name,
            "horizon": cfg.horizon,
            "batch_rule": cfg.batch_rule.to_string(),
            "period": period,
            "plan": plan,
            "streaming": streaming,
            "matured_only": matured,
            "config": cfg.to_json(),
        }),
    )?;
    let pairs = plan.len().saturating_sub(1);
    println!(
        "{} test batches, H={}{}",
        plan.len(),
        cfg.horizon,
        period.map(|p| format!(", period {p}")).unwrap_or_default()
    );
    println!(
        "streaming updates:    {} overlapping samples over {} update/batch pairs; H >= B_k + B_k+1 for {}/{pairs} consecutive pairs",
        streaming.violations,
        streaming.overlaps.len(),
        streaming.sufficient_condition_count()
    );
    println!(
        "matured-only updates: {} overlapping samples over {} updates",
        matured.violations, matured.updates
    );
    println!("report      {}", cfg.out.join("audit.json").display());
    println!("config_hash {hash}");
    Ok(())
}

pub fn params(kind: AdapterKind, channels: usize, lookback: usize, horizon: usize, use_input: bool) -> Result<()> {
    if channels == 0 || lookback == 0 || horizon == 0 {
        return Err(UsageError("channels, lookback and horizon must be at least 1".into()).into());
    }
    println!("{}", param_count(kind, channels, lookback, horizon, use_input));
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "trace".into(), |s| s.to_string_lossy().into_owned())
}

pub fn diagnose(traces: &[PathBuf], out: &Path, batch_size: Option<usize>) -> Result<()> {
    for path in traces {
        if !path.is_file() {
            return Err(UsageError(format!("trace {} does not exist", path.display())).into());
        }
    }
    prepare_out(out)?;
    let mut spectra = Vec::new();
    let mut hashes = Vec::new();
    for path in traces {
        let (trace, hash) = RunTrace::read_binary(path).with_context(|| format!("reading {}", path.display()))?;
        // Traces named alike (e.g. several `trace.bin`) are told apart by their parent directory.
        let name = match path.parent().and_then(|p| p.file_name()) {
            Some(dir) if traces.len() > 1 => format!("{}_{}", dir.to_string_lossy(), stem(path)),
            _ => stem(path),
        };
        let spectrum = correction_spectrum(&trace.pre.view(), &trace.post.view())?.with_provenance(
            format!("{} {}", trace.mode, name),
            trace.dataset.clone(),
            trace.forecaster.clone(),
        );
        spectrum.write_csv(out.join(format!("{name}_spectrum.csv")), &hash)?;
        write_svg_plot(
            out.join(format!("{name}_spectrum.svg")),
            &format!("Correction spectrum: {name}"),
            &[(&spectrum.label, &spectrum.magnitudes)],
            true,
            &hash,
        )?;
        let step_series = [
            ("frozen", per_step_mse(&trace.frozen.view(), &trace.targets.view())),
            ("final", per_step_mse(&trace.final_predictions.view(), &trace.targets.view())),
        ];
        let refs: Vec<(&str, &[f64])> = step_series.iter().map(|(l, v)| (*l, v.as_slice())).collect();
        write_svg_plot(out.join(format!("{name}_horizon_mse.svg")), "MSE by horizon step", &refs, false, &hash)?;

        let b = batch_size.or_else(|| trace.batches.first().map(|b| b.size));
        match b.map(|b| early_vs_late_curves(&trace, b)) {
            Some(Ok(curves)) => {
                curves.write_csv(out.join(format!("{name}_early_late.csv")), &hash)?;
                write_svg_plot(
                    out.join(format!("{name}_early_late.svg")),
                    &format!("Overlapping-region MSE by sample position, B={}", curves.batch_size),
                    &[("direct", &curves.direct), ("adjusted", &curves.adjusted)],
                    false,
                    &hash,
                )?;
            }
            Some(Err(e)) => log::warn!("{name}: no early-vs-late curves: {e}"),
            None => log::warn!("{name}: trace has no batches"),
        }
        println!(
            "{name}: {} windows, H={}, strongest correction at bin {}",
            trace.windows(),
            trace.horizon,
            spectrum
                .magnitudes
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map_or(0, |(i, _)| i + 1)
        );
        spectra.push(spectrum);
        hashes.push(hash);
    }
    if spectra.len() > 1 {
        let series: Vec<(&str, &[f64])> = spectra.iter().map(|s| (s.label.as_str(), s.magnitudes.as_slice())).collect();
        write_svg_plot(out.join("spectra.svg"), "Correction spectra", &series, true, &hashes.join(","))?;
    }
    println!("outputs in {}", out.display());
    Ok(())
}

pub fn sweep(configs: &[PathBuf], jobs: usize, out: &Path) -> Result<()> {
    if jobs == 0 {
        return Err(UsageError("--jobs must be at least 1".into()).into());
    }
    // Validate every config up front so a typo fails before any run starts.
    for path in configs {
        load_config(path)?.validate()?;
    }
    prepare_out(out)?;
    let exe = std::env::current_exe().context("locating the freqcal executable")?;
    let mut queue: VecDeque<(usize, &PathBuf)> = configs.iter().enumerate().collect();
    let mut running: Vec<(usize, PathBuf, Child)> = Vec::new();
    let mut failures = Vec::new();
    let run_dirs: Vec<PathBuf> = configs
        .iter()
        .enumerate()
        .map(|(i, p)| out.join(format!("{i:03}_{}", stem(p))))
        .collect();
    while !queue.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some((i, path)) = queue.pop_front() else { break };
            let child = Command::new(&exe)
                .arg("run")
                .arg("--config")
                .arg(path)
                .arg("--out")
                .arg(&run_dirs[i])
                .stdout(fs::File::create(out.join(format!("{i:03}.log")))?)
                .spawn()
                .with_context(|| format!("starting run for {}", path.display()))?;
            running.push((i, path.clone(), child));
        }
        let mut finished = None;
        for (slot, (_, _, child)) in running.iter_mut().enumerate() {
            if let Some(status) = child.try_wait()? {
                finished = Some((slot, status));
                break;
            }
        }
        match finished {
            Some((slot, status)) => {
                let (i, path, _) = running.swap_remove(slot);
                if status.success() {
                    println!("done   {}", path.display());
                } else {
                    println!("failed {} ({status})", path.display());
                    failures.push(i);
                }
            }
            None => std::thread::sleep(std::time::Duration::from_millis(20)),
        }
    }

    let mut table = EvalReport::csv_header();
    table.push('\n');
    for (i, dir) in run_dirs.iter().enumerate() {
        if failures.contains(&i) {
            continue;
        }
        let text = fs::read_to_string(dir.join("report.csv")).with_context(|| format!("reading {}", dir.display()))?;
        if let Some(row) = text.lines().nth(1) {
            table.push_str(row);
            table.push('\n');
        }
    }
    fs::write(out.join("sweep.csv"), table)?;
    println!("summary in {}", out.join("sweep.csv").display());
    if !failures.is_empty() {
        bail!("{} of {} runs failed", failures.len(), configs.len());
    }
    Ok(())
}
