use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use battsynth_core::checkpoint::Artifact;
use battsynth_core::data::{load_csv, make_windows, read_csv, split_indices, Column, SeriesTable};
use battsynth_core::eval::{compare_models, evaluate, horizon_sweep, run_experiment, HorizonSweepReport, SweepPlan};
use battsynth_core::synth::{
    fidelity_report_on, generate_synthetic_dataset, generated_rows, persistence_table, residual_pool, FidelityReport,
    SynthOptions,
};
use battsynth_core::{Forecaster, ModelKind};

use crate::config::Config;
use crate::error::CliError;

/// The sine/capacity-fade fixture used when `data.path` is unset.
pub const BUNDLED_FIXTURE: &str = include_str!("../fixtures/sine_fade.csv");

const RESIDUAL_LIMIT: usize = 10_000;

/// Like `println!` but a closed stdout (e.g. `| head`) is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(&format!("cannot create {}", path.display()), e))
}

fn emit<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&format!("cannot write {}", path.display()), e))
}

pub fn load_table(cfg: &Config) -> Result<SeriesTable, CliError> {
    let opts = cfg.data.csv_options()?;
    match &cfg.data.path {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Config(format!("data.path {} does not exist", p.display())));
            }
            Ok(load_csv(p, &opts)?)
        }
        None => Ok(read_csv(BUNDLED_FIXTURE.as_bytes(), &opts, "bundled:sine_fade")?),
    }
}

fn load_artifact(cfg: &Config) -> Result<Artifact, CliError> {
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return Err(CliError::MissingArtifact(format!(
            "checkpoint {} not found; run `battsynth train` first",
            path.display()
        )));
    }
    Ok(Artifact::load(&path)?)
}

fn out(cfg: &Config, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

pub fn ingest(cfg: &Config) -> Result<(), CliError> {
    let table = load_table(cfg)?;
    let cycles = table.segments().len();
    emit(&out(cfg, "ingest_summary.csv"), |w| {
        writeln!(w, "column,rows,min,max,mean")?;
        for (c, v) in table.columns() {
            let min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            writeln!(w, "{},{},{min},{max},{mean}", c.name(), v.len())?;
        }
        Ok(())
    })?;
    let names: Vec<&str> = table.columns().map(|(c, _)| c.name()).collect();
    say!(
        "{}: {} rows, {} cycle(s), columns {}",
        table.source,
        table.len(),
        cycles,
        names.join(",")
    );
    Ok(())
}

pub fn train(cfg: &Config) -> Result<(), CliError> {
    let spec = cfg.model.clone().ok_or_else(|| {
        CliError::Config("missing field `model.kind` (add a [model] section with kind = deepar | nbeats | deeptcn)".into())
    })?;
    let table = load_table(cfg)?;
    let target = cfg.data.target;
    let exp = run_experiment(&table, target, &spec, &cfg.run_config())?;
    let residuals = if exp.model.kind() == ModelKind::NBeats {
        residual_pool(&exp.model, &exp.data.train, RESIDUAL_LIMIT)?
    } else {
        Vec::new()
    };
    let artifact = Artifact {
        model: exp.model,
        target,
        norm: exp.data.norm,
        prep: cfg.windows.clone(),
        cov_names: exp.data.cov_names,
        residuals,
    };
    let ckpt = cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(&format!("cannot create {}", dir.display()), e))?;
    }
    artifact.save(&ckpt)?;
    emit(&out(cfg, "train_report.csv"), |w| exp.train.write_csv(w))?;
    emit(&out(cfg, "eval_report.csv"), |w| exp.eval.write_csv(w))?;
    say!(
        "{} on {target}: {} epochs (best {:?}), test MAE {} vs persistence {}",
        spec.kind(),
        exp.train.epochs.len(),
        exp.train.best_epoch,
        exp.eval.mae,
        exp.eval.persistence_mae
    );
    say!("checkpoint: {}", ckpt.display());
    Ok(())
}

pub fn evaluate_cmd(cfg: &Config) -> Result<(), CliError> {
    let artifact = load_artifact(cfg)?;
    let table = load_table(cfg)?;
    let normalized = artifact.norm.normalize_table(&table)?;
    let windows = make_windows(&normalized, artifact.target, artifact.prep.window_spec())?;
    let idx = split_indices(&windows, artifact.prep.train_frac)?;
    let test: Vec<_> = idx.test.iter().map(|&i| windows[i].clone()).collect();
    let norm = artifact.norm.get(artifact.target.column())?;
    let report = evaluate(&artifact.model, &test, artifact.target, norm, &cfg.forecast_options())?;
    emit(&out(cfg, "eval_report.csv"), |w| report.write_csv(w))?;
    say!(
        "{} on {}: test MAE {} vs persistence {} over {} windows",
        report.model, report.variable, report.mae, report.persistence_mae, report.windows
    );
    Ok(())
}

pub fn compare(cfg: &Config) -> Result<(), CliError> {
    let c = &cfg.compare;
    if c.models.len() < 2 {
        return Err(CliError::Config(format!(
            "compare.models: need >= 2 models, got {}",
            c.models.len()
        )));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = c.models.iter().map(|m| m.kind()).find(|k| !seen.insert(*k)) {
        return Err(CliError::Config(format!("compare.models lists {dup} more than once")));
    }
    let table = load_table(cfg)?;
    let plan = SweepPlan {
        models: &c.models,
        variables: &c.variables,
        horizons: &c.horizons,
        run: cfg.run_config(),
        parallel: c.parallel,
    };
    let sweep = horizon_sweep(&table, &plan)?;
    emit(&out(cfg, "sweep.csv"), |w| sweep.write_csv(w))?;
    emit(&out(cfg, "skipped.csv"), |w| sweep.write_skipped_csv(w))?;
    let per_model: Vec<HorizonSweepReport> = c
        .models
        .iter()
        .map(|m| HorizonSweepReport {
            rows: sweep.rows.iter().filter(|r| r.model == m.kind().name()).cloned().collect(),
            skipped: Vec::new(),
        })
        .collect();
    if per_model.iter().any(|r| r.rows.is_empty()) {
        return Err(CliError::Config("every cell was skipped for at least one model; see skipped.csv".into()));
    }
    let ranking = compare_models(&per_model)?;
    emit(&out(cfg, "ranking.csv"), |w| ranking.write_csv(w))?;
    emit(&out(cfg, "ranking_cells.csv"), |w| ranking.write_cells_csv(w))?;
    say!(
        "{} cells, {} skipped; leader {} (mean rank {})",
        sweep.rows.len(),
        sweep.skipped.len(),
        ranking.leader().model,
        ranking.leader().mean_rank
    );
    if let Some(r) = ranking.rank_of(ModelKind::DeepTcn.name()) {
        say!("deeptcn mean rank {r} (best possible 1)");
    }
    Ok(())
}

pub fn synthesize(cfg: &Config) -> Result<(), CliError> {
    let artifact = load_artifact(cfg)?;
    let table = load_table(cfg)?;
    let opts = SynthOptions {
        n_variants: cfg.synthesize.n_variants,
        noise_seed: cfg.seed,
        noise_scale: cfg.synthesize.noise_scale,
        prefix: cfg.synthesize.prefix,
    };
    let variants = generate_synthetic_dataset(&artifact, &table, &opts)?;
    let prefix = opts.prefix.unwrap_or(artifact.prep.conditioning);
    let rows = generated_rows(&table, prefix);
    if rows.is_empty() {
        return Err(CliError::Config(format!(
            "no cycle is longer than the synthesis prefix {prefix}, nothing to generate"
        )));
    }
    let target: Column = artifact.target.column();
    let mut report = FidelityReport::default();
    for (v, t) in variants.iter().enumerate() {
        let name = format!("synthetic_{v:03}");
        t.save_csv(&out(cfg, &format!("{name}.csv")))?;
        report.extend(fidelity_report_on(&name, t, &table, &rows, Some(target))?);
    }
    let naive = persistence_table(&table, target, prefix)?;
    report.extend(fidelity_report_on("persistence", &naive, &table, &rows, Some(target))?);
    emit(&out(cfg, "fidelity.csv"), |w| report.write_csv(w))?;
    let baseline = report.get("persistence", target.name()).map(|r| r.mae).unwrap_or(f64::NAN);
    for (v, _) in variants.iter().enumerate() {
        if let Some(r) = report.get(&format!("synthetic_{v:03}"), target.name()) {
            say!("synthetic_{v:03}: {} MAE {} (persistence {baseline})", target.name(), r.mae);
        }
    }
    Ok(())
}
