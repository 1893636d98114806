//! Error metrics, baselines, horizon sweeps and cross-model ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{prepare, ColumnNorm, PrepConfig, PreparedData, SeriesTable, Target, WindowSample};
use crate::error::{DataError, ModelError, NumError, Result};
use crate::models::{AnyModel, DataDims, ForecastOptions, Forecaster, ModelSpec};
use crate::train::{fit, OptimizerConfig, TrainReport};

/// Mean absolute error `(1/n) Σ |y - ŷ|`.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64, NumError> {
    if y.len() != y_hat.len() {
        return Err(NumError::Shape {
            op: "mae",
            lhs: vec![y.len()],
            rhs: vec![y_hat.len()],
        });
    }
    if y.is_empty() {
        return Err(NumError::Usage("mae of empty vectors".into()));
    }
    let s: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / y.len() as f64)
}

/// Repeats the last conditioning value over the horizon.
pub fn baseline_persistence(sample: &WindowSample) -> Vec<f64> {
    let last = *sample.z_conditioning.last().expect("conditioning range is non-empty");
    vec![last; sample.horizon()]
}

/// Test-split accuracy of one model, in physical and normalized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub variable: Target,
    pub horizon: usize,
    pub windows: usize,
    pub mae: f64,
    pub mae_normalized: f64,
    pub persistence_mae: f64,
    pub persistence_mae_normalized: f64,
}

impl EvalReport {
    pub fn beats_persistence(&self) -> bool {
        self.mae < self.persistence_mae
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "model,variable,horizon,windows,mae,mae_normalized,persistence_mae,persistence_mae_normalized"
        )?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            self.model,
            self.variable,
            self.horizon,
            self.windows,
            self.mae,
            self.mae_normalized,
            self.persistence_mae,
            self.persistence_mae_normalized
        )
    }
}

/// Point forecasts for every window, in normalized units.
pub fn point_forecasts<M: Forecaster + ?Sized>(
    model: &M,
    windows: &[WindowSample],
    opts: &ForecastOptions,
) -> Result<Vec<Vec<f64>>> {
    windows.iter().map(|w| Ok(model.forecast(w, opts)?.point)).collect()
}

/// MAE of the model and of persistence over `test`, with physical values
/// recovered through `norm`.
pub fn evaluate<M: Forecaster + ?Sized>(
    model: &M,
    test: &[WindowSample],
    target: Target,
    norm: &ColumnNorm,
    opts: &ForecastOptions,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(ModelError::Config("no test windows to evaluate".into()));
    }
    let preds = point_forecasts(model, test, opts)?;
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let mut naive = Vec::new();
    for (w, p) in test.iter().zip(&preds) {
        truth.extend_from_slice(&w.z_prediction);
        pred.extend_from_slice(p);
        naive.extend(baseline_persistence(w));
    }
    let phys = |v: &[f64]| v.iter().map(|x| norm.invert(*x)).collect::<Vec<_>>();
    let (truth_p, pred_p, naive_p) = (phys(&truth), phys(&pred), phys(&naive));
    Ok(EvalReport {
        model: model.kind().to_string(),
        variable: target,
        horizon: test[0].horizon(),
        windows: test.len(),
        mae: mae(&truth_p, &pred_p)?,
        mae_normalized: mae(&truth, &pred)?,
        persistence_mae: mae(&truth_p, &naive_p)?,
        persistence_mae_normalized: mae(&truth, &naive)?,
    })
}

/// A trained model together with its data and reports.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub model: AnyModel,
    pub data: PreparedData,
    pub train: TrainReport,
    pub eval: EvalReport,
}

/// Everything one training run needs besides the table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub prep: PrepConfig,
    pub optimizer: OptimizerConfig,
    pub forecast: ForecastOptions,
    /// Seeds parameter initialization.
    pub seed: u64,
}

/// Prepares `table`, trains a fresh model and evaluates it on the test split.
pub fn run_experiment(table: &SeriesTable, target: Target, spec: &ModelSpec, cfg: &RunConfig) -> Result<Experiment> {
    let data = prepare(table, target, &cfg.prep)?;
    let dims = DataDims {
        cov_dim: data.cov_dim,
        conditioning: cfg.prep.conditioning,
        horizon: cfg.prep.horizon,
    };
    let mut model = spec.build(dims, cfg.seed)?;
    let train = fit(&mut model, &data.train, &data.val, &cfg.optimizer)?;
    let eval = evaluate(&model, &data.test, target, data.norm.get(target.column())?, &cfg.forecast)?;
    Ok(Experiment {
        model,
        data,
        train,
        eval,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub variable: String,
    pub horizon: usize,
    pub mae: f64,
    /// Wall-clock seconds for training and evaluation of the cell.
    pub runtime_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub model: String,
    pub variable: String,
    pub horizon: usize,
    pub reason: String,
}

/// One row per (model, variable, horizon), sorted by that triple.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HorizonSweepReport {
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<SkippedCell>,
}

pub const SWEEP_HEADER: &str = "model,variable,horizon,mae,runtime_s";

/// Horizons swept by default, ending at 30.
pub const DEFAULT_HORIZONS: [usize; 7] = [1, 5, 10, 15, 20, 25, 30];

impl HorizonSweepReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{SWEEP_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{:.3}", r.model, r.variable, r.horizon, r.mae, r.runtime_s)?;
        }
        Ok(())
    }

    pub fn write_skipped_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "model,variable,horizon,reason")?;
        for s in &self.skipped {
            writeln!(w, "{},{},{},\"{}\"", s.model, s.variable, s.horizon, s.reason.replace('"', "'"))?;
        }
        Ok(())
    }

    fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| (&a.model, &a.variable, a.horizon).cmp(&(&b.model, &b.variable, b.horizon)));
        self.skipped
            .sort_by(|a, b| (&a.model, &a.variable, a.horizon).cmp(&(&b.model, &b.variable, b.horizon)));
    }
}

/// Grid of a horizon sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan<'a> {
    pub models: &'a [ModelSpec],
    pub variables: &'a [Target],
    pub horizons: &'a [usize],
    /// Horizon is overridden per cell.
    pub run: RunConfig,
    pub parallel: bool,
}

/// Trains a fresh model for every (model, variable, horizon) cell and records
/// its test MAE in physical units. Cells whose horizon does not leave enough
/// windows are reported as skipped.
pub fn horizon_sweep(table: &SeriesTable, plan: &SweepPlan) -> Result<HorizonSweepReport> {
    if plan.models.is_empty() || plan.variables.is_empty() || plan.horizons.is_empty() {
        return Err(ModelError::Config("sweep needs at least one model, variable and horizon".into()));
    }
    if plan.horizons.windows(2).any(|w| w[0] >= w[1]) || plan.horizons[0] == 0 {
        return Err(ModelError::Config(format!(
            "horizons must be positive and strictly ascending, got {:?}",
            plan.horizons
        )));
    }
    let mut cells = Vec::new();
    for spec in plan.models {
        for &v in plan.variables {
            for &h in plan.horizons {
                cells.push((spec, v, h));
            }
        }
    }
    let run_cell = |&(spec, v, h): &(&ModelSpec, Target, usize)| -> Result<std::result::Result<SweepRow, SkippedCell>> {
        let mut cfg = plan.run.clone();
        cfg.prep.horizon = h;
        let started = Instant::now();
        match run_experiment(table, v, spec, &cfg) {
            Ok(exp) => Ok(Ok(SweepRow {
                model: spec.kind().to_string(),
                variable: v.to_string(),
                horizon: h,
                mae: exp.eval.mae,
                runtime_s: started.elapsed().as_secs_f64(),
            })),
            Err(ModelError::Data(e @ (DataError::TooFewWindows(_) | DataError::Invalid(_)))) => Ok(Err(SkippedCell {
                model: spec.kind().to_string(),
                variable: v.to_string(),
                horizon: h,
                reason: e.to_string(),
            })),
            Err(e) => Err(e),
        }
    };
    let results: Vec<_> = if plan.parallel {
        cells.par_iter().map(run_cell).collect()
    } else {
        cells.iter().map(run_cell).collect()
    };
    let mut report = HorizonSweepReport::default();
    for r in results {
        match r? {
            Ok(row) => report.rows.push(row),
            Err(skip) => report.skipped.push(skip),
        }
    }
    report.sort();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRanking {
    pub variable: String,
    pub horizon: usize,
    /// `(model, mae)` from best to worst; equal MAEs ordered by name.
    pub order: Vec<(String, f64)>,
    /// The two best MAEs are equal.
    pub tie: bool,
}

impl CellRanking {
    pub fn winner(&self) -> &str {
        &self.order[0].0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRank {
    pub model: String,
    pub mean_rank: f64,
    pub wins: usize,
}

/// Per-cell winners and mean rank per model (best first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub cells: Vec<CellRanking>,
    pub models: Vec<ModelRank>,
}

impl RankingTable {
    pub fn leader(&self) -> &ModelRank {
        &self.models[0]
    }

    pub fn rank_of(&self, model: &str) -> Option<f64> {
        self.models.iter().find(|m| m.model == model).map(|m| m.mean_rank)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "model,mean_rank,wins,cells")?;
        for m in &self.models {
            writeln!(w, "{},{},{},{}", m.model, m.mean_rank, m.wins, self.cells.len())?;
        }
        Ok(())
    }

    pub fn write_cells_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "variable,horizon,winner,mae,tie")?;
        for c in &self.cells {
            writeln!(w, "{},{},{},{},{}", c.variable, c.horizon, c.winner(), c.order[0].1, c.tie)?;
        }
        Ok(())
    }
}

/// Ranks models cell by cell. Every model must cover the same
/// (variable, horizon) grid.
pub fn compare_models(reports: &[HorizonSweepReport]) -> Result<RankingTable> {
    let mut grid: BTreeMap<String, BTreeMap<(String, usize), f64>> = BTreeMap::new();
    for r in reports.iter().flat_map(|r| &r.rows) {
        let cells = grid.entry(r.model.clone()).or_default();
        if cells.insert((r.variable.clone(), r.horizon), r.mae).is_some() {
            return Err(ModelError::GridMismatch(format!(
                "duplicate cell {} {} h={}",
                r.model, r.variable, r.horizon
            )));
        }
    }
    let Some(reference) = grid.values().next() else {
        return Err(ModelError::GridMismatch("no rows to compare".into()));
    };
    let keys: BTreeSet<(String, usize)> = reference.keys().cloned().collect();
    for (model, cells) in &grid {
        let k: BTreeSet<_> = cells.keys().cloned().collect();
        if k != keys {
            let missing: Vec<_> = keys.symmetric_difference(&k).collect();
            return Err(ModelError::GridMismatch(format!("model {model} differs on cells {missing:?}")));
        }
    }
    let mut rank_sum: BTreeMap<&str, f64> = BTreeMap::new();
    let mut wins: BTreeMap<&str, usize> = BTreeMap::new();
    let mut cells = Vec::with_capacity(keys.len());
    for key in &keys {
        let mut order: Vec<(String, f64)> = grid.iter().map(|(m, c)| (m.clone(), c[key])).collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        for (i, (m, _)) in order.iter().enumerate() {
            let name = grid.get_key_value(m).expect("model present").0.as_str();
            *rank_sum.entry(name).or_default() += (i + 1) as f64;
        }
        let winner = grid.get_key_value(&order[0].0).expect("model present").0.as_str();
        *wins.entry(winner).or_default() += 1;
        let tie = order.len() > 1 && order[0].1 == order[1].1;
        cells.push(CellRanking {
            variable: key.0.clone(),
            horizon: key.1,
            order,
            tie,
        });
    }
    let n = keys.len() as f64;
    let mut models: Vec<ModelRank> = grid
        .keys()
        .map(|m| ModelRank {
            model: m.clone(),
            mean_rank: rank_sum.get(m.as_str()).copied().unwrap_or(0.0) / n,
            wins: wins.get(m.as_str()).copied().unwrap_or(0),
        })
        .collect();
    models.sort_by(|a, b| a.mean_rank.total_cmp(&b.mean_rank).then_with(|| a.model.cmp(&b.model)));
    Ok(RankingTable { cells, models })
}
