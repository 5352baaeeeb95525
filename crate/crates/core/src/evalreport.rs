//! Accuracy under perturbation conditions and condition x model reports.

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::Predictor;
use crate::perturb::{perturb_uniform, PerturbationSpec};
use crate::pointcloud::PointCloud;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCondition {
    pub name: String,
    pub spec: PerturbationSpec,
    pub seed: u64,
}

impl EvalCondition {
    pub fn new(name: &str, spec: PerturbationSpec, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            spec,
            seed,
        }
    }

    /// Clean, Gaussian sigma = 0.1 and 50% drop, with seeds derived from
    /// `seed` in an evaluation-only domain.
    pub fn defaults(seed: u64) -> Vec<Self> {
        [
            ("clean", PerturbationSpec::clean()),
            ("noise_0.1", PerturbationSpec::noise(0.1)),
            ("drop_0.5", PerturbationSpec::drop(0.5)),
        ]
        .into_iter()
        .map(|(name, spec)| Self::new(name, spec, condition_seed(seed, name)))
        .collect()
    }
}

/// Seed of the evaluation condition `name` under top-level `seed`.
pub fn condition_seed(seed: u64, name: &str) -> u64 {
    let tag = u64::from_le_bytes(rng::sha256_hex(name.as_bytes()).as_bytes()[..8].try_into().unwrap());
    rng::derive_seed(seed, "eval-condition", &[tag])
}

/// Accuracy in percent over trials.
#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub mean: f64,
    pub stderr: f64,
    pub trials: Vec<f64>,
}

impl Accuracy {
    fn from_trials(trials: Vec<f64>) -> Self {
        let n = trials.len() as f64;
        let mean = trials.iter().sum::<f64>() / n;
        let stderr = if trials.len() > 1 {
            let var = trials.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, trials }
    }
}

/// Top-1 accuracy of `model` on `clouds` under `condition`, one freshly
/// seeded perturbation per trial and cloud.
pub fn evaluate<P: Predictor + ?Sized>(
    model: &P,
    clouds: &[&PointCloud],
    condition: &EvalCondition,
    trials: usize,
) -> Result<Accuracy> {
    if clouds.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    if trials == 0 {
        return Err(Error::Config("evaluation needs at least one trial".into()));
    }
    condition.spec.validate()?;
    let mut accs = Vec::with_capacity(trials);
    for t in 0..trials {
        let hits = clouds
            .par_iter()
            .map(|c| {
                let mut r = rng::stream(condition.seed, "eval", &[t as u64, c.id]);
                let input = perturb_uniform(c, &condition.spec, &mut r)?;
                Ok((model.predict(&input)? == c.label) as usize)
            })
            .collect::<Result<Vec<_>>>()?;
        accs.push(100.0 * hits.iter().sum::<usize>() as f64 / clouds.len() as f64);
    }
    Ok(Accuracy::from_trials(accs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub conditions: Vec<String>,
    pub models: Vec<String>,
    /// `cells[condition][model]`.
    pub cells: Vec<Vec<Accuracy>>,
    pub config_hash: String,
    pub seed: u64,
}

fn check_unique<'a>(what: &str, names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(Error::Config(format!("duplicate {what} name '{n}'")));
        }
    }
    Ok(())
}

/// Evaluate every model under every condition.
pub fn robustness_report(
    models: &[(&str, &dyn Predictor)],
    conditions: &[EvalCondition],
    clouds: &[&PointCloud],
    trials: usize,
    config_hash: &str,
    seed: u64,
) -> Result<ReportTable> {
    if models.is_empty() || conditions.is_empty() {
        return Err(Error::Config("report needs at least one model and one condition".into()));
    }
    check_unique("model", models.iter().map(|m| m.0))?;
    check_unique("condition", conditions.iter().map(|c| c.name.as_str()))?;
    let cells = conditions
        .iter()
        .map(|c| models.iter().map(|(_, m)| evaluate(*m, clouds, c, trials)).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    Ok(ReportTable {
        conditions: conditions.iter().map(|c| c.name.clone()).collect(),
        models: models.iter().map(|m| m.0.to_string()).collect(),
        cells,
        config_hash: config_hash.to_string(),
        seed,
    })
}

impl ReportTable {
    pub fn cell(&self, condition: &str, model: &str) -> Option<&Accuracy> {
        let r = self.conditions.iter().position(|c| c == condition)?;
        let m = self.models.iter().position(|x| x == model)?;
        Some(&self.cells[r][m])
    }

    /// `model,condition,trial,accuracy`
    pub fn trials_csv(&self) -> String {
        let mut s = String::from("model,condition,trial,accuracy\n");
        for (m, model) in self.models.iter().enumerate() {
            for (r, cond) in self.conditions.iter().enumerate() {
                for (t, a) in self.cells[r][m].trials.iter().enumerate() {
                    writeln!(s, "{model},{cond},{t},{a:.4}").unwrap();
                }
            }
        }
        s
    }

    /// `model,condition,mean,stderr`
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("model,condition,mean,stderr\n");
        for (m, model) in self.models.iter().enumerate() {
            for (r, cond) in self.conditions.iter().enumerate() {
                let a = &self.cells[r][m];
                writeln!(s, "{model},{cond},{:.4},{:.4}", a.mean, a.stderr).unwrap();
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let render = |a: &Accuracy| format!("{:.2} ± {:.2}", a.mean, a.stderr);
        let first = self.conditions.iter().map(|c| c.chars().count()).max().unwrap_or(0).max(9);
        let widths: Vec<usize> = self
            .models
            .iter()
            .enumerate()
            .map(|(m, name)| {
                self.cells
                    .iter()
                    .map(|row| render(&row[m]).chars().count())
                    .chain([name.chars().count()])
                    .max()
                    .unwrap()
            })
            .collect();
        let mut s = format!("# config_hash {} seed {}\n", self.config_hash, self.seed);
        write!(s, "{:<first$}", "condition").unwrap();
        for (name, w) in self.models.iter().zip(&widths) {
            write!(s, "  {name:>w$}").unwrap();
        }
        s.push('\n');
        for (r, cond) in self.conditions.iter().enumerate() {
            write!(s, "{cond:<first$}").unwrap();
            for (m, w) in widths.iter().enumerate() {
                write!(s, "  {:>w$}", render(&self.cells[r][m])).unwrap();
            }
            s.push('\n');
        }
        s
    }
}
