//! Plain-text checkpoints.
//!
//! ```text
//! battsynth-checkpoint 1
//! meta {"spec":...,"dims":...}
//! tensor deepar.embed.weight 1 2 3 8
//! 0.1 -0.25 ...
//! ```
//!
//! Values are written in shortest round-trip form, so saving the same model
//! twice gives identical bytes and loading restores every bit.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{NormalizationSpec, PrepConfig, Target};
use crate::error::{ModelError, Result};
use crate::models::{AnyModel, DataDims, Forecaster, ModelSpec};
use crate::numcore::Tensor;

const MAGIC: &str = "battsynth-checkpoint 1";

/// A trained model plus everything needed to forecast from raw tables.
#[derive(Clone, Debug)]
pub struct Artifact {
    pub model: AnyModel,
    pub target: Target,
    pub norm: NormalizationSpec,
    pub prep: PrepConfig,
    pub cov_names: Vec<String>,
    /// Normalized training residuals, used to perturb deterministic forecasts.
    pub residuals: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    spec: ModelSpec,
    dims: DataDims,
    target: Target,
    norm: NormalizationSpec,
    prep: PrepConfig,
    cov_names: Vec<String>,
    residuals: Vec<f64>,
}

impl Artifact {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let meta = Meta {
            spec: self.model.spec(),
            dims: self.model.dims(),
            target: self.target,
            norm: self.norm.clone(),
            prep: self.prep.clone(),
            cov_names: self.cov_names.clone(),
            residuals: self.residuals.clone(),
        };
        let json = serde_json::to_string(&meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "meta {json}")?;
        let mut line = String::new();
        for (_, p) in self.model.store().iter() {
            let shape = p.value.shape();
            line.clear();
            write!(line, "tensor {} {} {}", p.name, u8::from(p.trainable), shape.len()).expect("string write");
            for d in shape {
                write!(line, " {d}").expect("string write");
            }
            writeln!(w, "{line}")?;
            line.clear();
            for (i, v) in p.value.data().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v}").expect("string write");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let bad = |msg: String| ModelError::Checkpoint(msg);
        let lines = BufReader::new(r).lines().collect::<std::io::Result<Vec<String>>>()?;
        let mut it = lines.iter().filter(|l| !l.is_empty());
        let mut next = |what: &str| {
            it.next()
                .ok_or_else(|| bad(format!("unexpected end of file, expected {what}")))
        };
        let magic = next("header")?;
        if magic != MAGIC {
            return Err(bad(format!("unrecognized header {magic:?}")));
        }
        let json = next("meta line")?
            .strip_prefix("meta ")
            .ok_or_else(|| bad("second line must start with \"meta \"".into()))?;
        let meta: Meta = serde_json::from_str(json).map_err(|e| bad(format!("meta: {e}")))?;
        let mut model = meta.spec.build(meta.dims, 0)?;
        let expected = model.store().len();
        let mut seen = 0;
        while let Ok(header) = next("tensor header") {
            let parts: Vec<&str> = header.split(' ').collect();
            if parts.len() < 4 || parts[0] != "tensor" {
                return Err(bad(format!("malformed tensor header {header:?}")));
            }
            let name = parts[1];
            let ndim: usize = parts[3].parse().map_err(|_| bad(format!("bad rank in {header:?}")))?;
            if parts.len() != 4 + ndim {
                return Err(bad(format!("tensor {name}: rank {ndim} but {} dims", parts.len() - 4)));
            }
            let shape = parts[4..]
                .iter()
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dim in {header:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let data = next("tensor values")?
                .split(' ')
                .map(|v| v.parse::<f64>().map_err(|_| bad(format!("tensor {name}: bad value {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(shape, data).map_err(|e| bad(format!("tensor {name}: {e}")))?;
            let id = model
                .store()
                .find(name)
                .ok_or_else(|| bad(format!("unknown tensor {name} for {}", meta.spec.kind())))?;
            if model.store().value(id).shape() != tensor.shape() {
                return Err(bad(format!(
                    "tensor {name}: shape {:?}, model expects {:?}",
                    tensor.shape(),
                    model.store().value(id).shape()
                )));
            }
            *model.store_mut().value_mut(id) = tensor;
            seen += 1;
        }
        if seen != expected {
            return Err(bad(format!("found {seen} tensors, model has {expected}")));
        }
        Ok(Self {
            model,
            target: meta.target,
            norm: meta.norm,
            prep: meta.prep,
            cov_names: meta.cov_names,
            residuals: meta.residuals,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read(f)
    }
}
