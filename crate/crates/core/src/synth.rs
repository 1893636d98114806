//! Synthetic table generation and fidelity reporting.
//!
//! Each cycle of a seed table keeps its first `prefix` rows verbatim. The
//! target over the rest of the cycle is rolled forward one horizon block at a
//! time, every block conditioned on the values generated so far. All other
//! columns are copied from the seed table, since they act as known inputs.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Artifact;
use crate::data::{time_covariates, Column, Provenance, SeriesTable, WindowSample};
use crate::error::{ModelError, Result};
use crate::eval::{mae, point_forecasts};
use crate::models::{ForecastOptions, Forecaster, ModelKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub n_variants: usize,
    pub noise_seed: u64,
    /// Scales sampling noise (and bootstrap residuals); 0 gives the mean path.
    pub noise_scale: f64,
    /// Rows kept verbatim at the start of each cycle; defaults to the
    /// conditioning length.
    pub prefix: Option<usize>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            n_variants: 3,
            noise_seed: 0,
            noise_scale: 1.0,
            prefix: None,
        }
    }
}

/// Residuals `z - ŷ` of the point forecasts over `windows`, capped at `limit` values.
pub fn residual_pool<M: Forecaster + ?Sized>(model: &M, windows: &[WindowSample], limit: usize) -> Result<Vec<f64>> {
    let preds = point_forecasts(model, windows, &ForecastOptions::default())?;
    Ok(windows
        .iter()
        .zip(&preds)
        .flat_map(|(w, p)| w.z_prediction.iter().zip(p).map(|(z, f)| z - f))
        .take(limit)
        .collect())
}

/// Checks the seed table provides what the artifact was trained on.
fn check_schema(artifact: &Artifact, table: &SeriesTable) -> Result<()> {
    let target = artifact.target.column();
    if !table.has(target) {
        return Err(ModelError::Schema(format!("seed table has no {} column", target.name())));
    }
    for c in artifact.norm.columns.keys() {
        if !table.has(*c) {
            return Err(ModelError::Schema(format!(
                "model was trained with column {} which the seed table lacks",
                c.name()
            )));
        }
    }
    let names = time_covariates(table).names;
    if names != artifact.cov_names {
        return Err(ModelError::Schema(format!(
            "covariates {names:?} differ from training covariates {:?}",
            artifact.cov_names
        )));
    }
    Ok(())
}

/// Generates `n_variants` synthetic tables from `seed_table`. Variant `v` is
/// driven by its own random stream, so variants are independent of each
/// other and of the order they are produced in.
pub fn generate_synthetic_dataset(artifact: &Artifact, seed_table: &SeriesTable, opts: &SynthOptions) -> Result<Vec<SeriesTable>> {
    if opts.n_variants == 0 {
        return Err(ModelError::Config("synthesize.n_variants must be >= 1".into()));
    }
    check_schema(artifact, seed_table)?;
    let cond = artifact.prep.conditioning;
    let prefix = opts.prefix.unwrap_or(cond);
    if prefix < cond {
        return Err(ModelError::Config(format!(
            "synthesis prefix {prefix} is shorter than the conditioning length {cond}"
        )));
    }
    let normalized = artifact.norm.normalize_table(seed_table)?;
    (0..opts.n_variants)
        .into_par_iter()
        .map(|v| generate_variant(artifact, seed_table, &normalized, prefix, v as u64, opts))
        .collect()
}

fn generate_variant(
    artifact: &Artifact,
    seed_table: &SeriesTable,
    normalized: &SeriesTable,
    prefix: usize,
    variant: u64,
    opts: &SynthOptions,
) -> Result<SeriesTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
    rng.set_stream(variant);
    let target = artifact.target.column();
    let cond = artifact.prep.conditioning;
    let horizon = artifact.model.dims().horizon;
    let cov = time_covariates(normalized);
    let z_norm = normalized.require(target)?;
    let norm = artifact.norm.get(target)?;
    let mut out_values = seed_table.require(target)?.to_vec();
    for seg in seed_table.segments() {
        if seg.len() <= prefix {
            continue;
        }
        let mut z: Vec<f64> = z_norm[seg.start..seg.start + prefix].to_vec();
        let mut pos = seg.start + prefix;
        while pos < seg.end {
            let start = pos - cond;
            let covs: Vec<f64> = (start..pos + horizon)
                .flat_map(|t| cov.row(t.min(seg.end - 1)).iter().copied())
                .collect();
            let sample = WindowSample {
                series_index: 0,
                start,
                z_conditioning: z[z.len() - cond..].to_vec(),
                z_prediction: vec![0.0; horizon],
                x_covariates: covs,
                cov_dim: cov.dim,
            };
            let block_seed: u64 = rng.gen();
            let mut block = artifact.model.sample_path(&sample, block_seed, opts.noise_scale)?;
            if artifact.model.kind() == ModelKind::NBeats && !artifact.residuals.is_empty() && opts.noise_scale != 0.0 {
                for b in &mut block {
                    *b += opts.noise_scale * artifact.residuals[rng.gen_range(0..artifact.residuals.len())];
                }
            }
            let take = horizon.min(seg.end - pos);
            for (i, b) in block.iter().take(take).enumerate() {
                if !b.is_finite() {
                    return Err(ModelError::Diverged {
                        epoch: 0,
                        detail: format!("synthetic value at row {} is not finite", pos + i),
                    });
                }
                out_values[pos + i] = norm.invert(*b);
            }
            z.extend_from_slice(&block[..take]);
            pos += take;
        }
    }
    let mut out = seed_table.clone();
    out.set_column(target, out_values)?;
    out.provenance = Some(Provenance {
        generator: artifact.model.kind().to_string(),
        seed: opts.noise_seed.wrapping_add(variant),
    });
    Ok(out)
}

/// Rows each cycle rolls forward after its verbatim prefix.
pub fn generated_rows(table: &SeriesTable, prefix: usize) -> Vec<usize> {
    table
        .segments()
        .into_iter()
        .filter(|s| s.len() > prefix)
        .flat_map(|s| s.start + prefix..s.end)
        .collect()
}

/// Persistence rollout: every generated row repeats its cycle's last prefix value.
pub fn persistence_table(seed_table: &SeriesTable, target: Column, prefix: usize) -> Result<SeriesTable> {
    let mut v = seed_table.require(target)?.to_vec();
    for seg in seed_table.segments() {
        if seg.len() <= prefix {
            continue;
        }
        let last = v[seg.start + prefix - 1];
        v[seg.start + prefix..seg.end].iter_mut().for_each(|x| *x = last);
    }
    let mut out = seed_table.clone();
    out.set_column(target, v)?;
    out.provenance = Some(Provenance {
        generator: "persistence".into(),
        seed: 0,
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub variant: String,
    pub variable: String,
    pub mae: f64,
    /// Synthetic statistic minus holdout statistic.
    pub mean_delta: f64,
    pub std_delta: f64,
    pub min_delta: f64,
    pub max_delta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub rows: Vec<FidelityRow>,
}

impl FidelityReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "variant,variable,mae,mean_delta,std_delta,min_delta,max_delta")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.variant, r.variable, r.mae, r.mean_delta, r.std_delta, r.min_delta, r.max_delta
            )?;
        }
        Ok(())
    }

    pub fn get(&self, variant: &str, variable: &str) -> Option<&FidelityRow> {
        self.rows.iter().find(|r| r.variant == variant && r.variable == variable)
    }

    pub fn extend(&mut self, other: FidelityReport) {
        self.rows.extend(other.rows);
    }
}

fn moments(v: &[f64]) -> (f64, f64, f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, std, min, max)
}

/// Compares every shared non-time column of `synthetic` and `holdout`.
pub fn fidelity_report(variant: &str, synthetic: &SeriesTable, holdout: &SeriesTable) -> Result<FidelityReport> {
    let rows: Vec<usize> = (0..holdout.len()).collect();
    fidelity_report_on(variant, synthetic, holdout, &rows, None)
}

/// Like [`fidelity_report`] but restricted to `rows` and, optionally, to one column.
pub fn fidelity_report_on(
    variant: &str,
    synthetic: &SeriesTable,
    holdout: &SeriesTable,
    rows: &[usize],
    only: Option<Column>,
) -> Result<FidelityReport> {
    if synthetic.len() != holdout.len() {
        return Err(ModelError::Schema(format!(
            "synthetic table has {} rows, holdout has {}",
            synthetic.len(),
            holdout.len()
        )));
    }
    if rows.is_empty() || rows.iter().any(|&r| r >= holdout.len()) {
        return Err(ModelError::Schema("comparison span is empty or out of range".into()));
    }
    let mut report = FidelityReport::default();
    for c in Column::ALL {
        if c == Column::Time || only.is_some_and(|o| o != c) {
            continue;
        }
        let (Some(s), Some(h)) = (synthetic.column(c), holdout.column(c)) else {
            if only.is_some() {
                return Err(ModelError::Schema(format!("column {} missing from a compared table", c.name())));
            }
            continue;
        };
        let s: Vec<f64> = rows.iter().map(|&r| s[r]).collect();
        let h: Vec<f64> = rows.iter().map(|&r| h[r]).collect();
        let (sm, ss, smin, smax) = moments(&s);
        let (hm, hs, hmin, hmax) = moments(&h);
        report.rows.push(FidelityRow {
            variant: variant.to_string(),
            variable: c.name().to_string(),
            mae: mae(&h, &s)?,
            mean_delta: sm - hm,
            std_delta: ss - hs,
            min_delta: smin - hmin,
            max_delta: smax - hmax,
        });
    }
    Ok(report)
}
