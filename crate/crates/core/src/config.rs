//! Experiment configuration: TOML file, `key=value` overrides, load-time
//! validation and a content hash.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::actstudent::{LossWeights, StudentConfig};
use crate::error::{Error, Result};
use crate::evalreport::{condition_seed, EvalCondition};
use crate::metateacher::{TaskPool, TeacherConfig};
use crate::perturb::{PerturbationSpec, DEFAULT_LAMBDA_BIAS};
use crate::pointcloud::{DatasetConfig, ShapeKind};
use crate::rng;

/// Environment variable that may override `paths.out`.
pub const OUT_DIR_ENV: &str = "INTACT_OUT";

/// The configuration shipped with the crate.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionConfig {
    pub name: String,
    #[serde(default)]
    pub drop: f64,
    #[serde(default)]
    pub sigma: f64,
}

impl ConditionConfig {
    pub fn spec(&self) -> PerturbationSpec {
        PerturbationSpec {
            drop_fraction: self.drop,
            sigma: self.sigma,
            ..PerturbationSpec::clean()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub classes: Vec<String>,
    pub per_class: usize,
    pub n_points: usize,
    /// Overrides the top-level seed for data generation.
    pub seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            classes: d.classes.iter().map(|c| c.name().to_string()).collect(),
            per_class: d.per_class,
            n_points: d.n_points,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub meta_iterations: usize,
    pub tasks_per_batch: usize,
    pub k_inner: usize,
    pub lr_inner: f64,
    pub lr_outer: f64,
    pub anneal_outer: bool,
    pub subset_size: usize,
    pub k_support: usize,
    pub k_query: usize,
    pub conditions: Vec<ConditionConfig>,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let t = TeacherConfig::default();
        Self {
            meta_iterations: t.meta_iterations,
            tasks_per_batch: t.tasks_per_batch,
            k_inner: t.k_inner,
            lr_inner: t.lr_inner,
            lr_outer: t.lr_outer,
            anneal_outer: t.anneal_outer,
            subset_size: t.pool.subset_size,
            k_support: t.pool.k_support,
            k_query: t.pool.k_query,
            conditions: t
                .pool
                .conditions
                .iter()
                .map(|c| ConditionConfig {
                    name: if c.drop_fraction > 0.0 {
                        format!("drop_{}", c.drop_fraction)
                    } else if c.sigma > 0.0 {
                        format!("noise_{}", c.sigma)
                    } else {
                        "clean".into()
                    },
                    drop: c.drop_fraction,
                    sigma: c.sigma,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentSection {
    pub stages: usize,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Curriculum-term weights; default to `beta` and `gamma`.
    pub beta_curr: Option<f64>,
    pub gamma_curr: Option<f64>,
    pub lambda_bias: f64,
    pub drop_share: f64,
    pub sigma0: f64,
    pub delta_sigma: f64,
    pub frac_start: f64,
    pub frac_end: f64,
    pub disc_lr: f64,
    pub warm_start: bool,
    pub probe_sigma: f64,
}

impl Default for StudentSection {
    fn default() -> Self {
        let s = StudentConfig::default();
        Self {
            stages: s.stages,
            epochs_per_stage: s.epochs_per_stage,
            batch_size: s.batch_size,
            lr: s.lr,
            beta: s.weights.beta,
            gamma: s.weights.gamma,
            beta_curr: None,
            gamma_curr: None,
            lambda_bias: DEFAULT_LAMBDA_BIAS,
            drop_share: s.drop_share,
            sigma0: s.sigma0,
            delta_sigma: s.delta_sigma,
            frac_start: s.frac_start,
            frac_end: s.frac_end,
            disc_lr: s.disc_lr,
            warm_start: s.warm_start,
            probe_sigma: s.probe_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub trials: usize,
    pub conditions: Vec<ConditionConfig>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            trials: 5,
            conditions: vec![
                ConditionConfig {
                    name: "clean".into(),
                    drop: 0.0,
                    sigma: 0.0,
                },
                ConditionConfig {
                    name: "noise_0.1".into(),
                    drop: 0.0,
                    sigma: 0.1,
                },
                ConditionConfig {
                    name: "drop_0.5".into(),
                    drop: 0.5,
                    sigma: 0.0,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out: PathBuf,
    /// Checkpoint directory; relative paths resolve against `out`.
    pub checkpoints: PathBuf,
    /// Use this teacher checkpoint instead of `<checkpoints>/teacher.ckpt`.
    pub teacher: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            checkpoints: PathBuf::from("checkpoints"),
            teacher: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub teacher: TeacherSection,
    pub student: StudentSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSection::default(),
            teacher: TeacherSection::default(),
            student: StudentSection::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::Table::from_str(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set a dotted `key` in `table`, creating intermediate tables.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::parse("override", format!("empty key in '{key}'")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::parse("override", format!("'{p}' in '{key}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parse TOML text and apply `key=value` overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::from_str(text).map_err(|e| Error::parse("config", e.to_string()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::parse("override", format!("'{o}' is not key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::parse("config", e.to_string()))?;
        Ok(cfg)
    }

    /// Read, override and validate. The shipped default is used when
    /// `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingArtifact(p.to_path_buf()));
                }
                std::fs::read_to_string(p)?
            }
            None => DEFAULT_CONFIG.to_string(),
        };
        let cfg = Self::from_toml(&text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over every section except `paths`, so relocating a run does
    /// not change it.
    pub fn hash(&self) -> String {
        let hashed = Self {
            paths: PathsSection::default(),
            ..self.clone()
        };
        rng::sha256_hex(hashed.to_toml().as_bytes())
    }

    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        let classes = self
            .dataset
            .classes
            .iter()
            .map(|c| ShapeKind::from_str(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetConfig {
            classes,
            per_class: self.dataset.per_class,
            n_points: self.dataset.n_points,
            seed: self.dataset.seed.unwrap_or(self.seed),
        })
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        let t = &self.teacher;
        TeacherConfig {
            meta_iterations: t.meta_iterations,
            tasks_per_batch: t.tasks_per_batch,
            k_inner: t.k_inner,
            lr_inner: t.lr_inner,
            lr_outer: t.lr_outer,
            anneal_outer: t.anneal_outer,
            pool: TaskPool {
                subset_size: t.subset_size,
                k_support: t.k_support,
                k_query: t.k_query,
                conditions: t.conditions.iter().map(ConditionConfig::spec).collect(),
            },
        }
    }

    pub fn student_config(&self) -> StudentConfig {
        let s = &self.student;
        StudentConfig {
            stages: s.stages,
            epochs_per_stage: s.epochs_per_stage,
            batch_size: s.batch_size,
            lr: s.lr,
            weights: LossWeights {
                beta: s.beta,
                gamma: s.gamma,
                beta_curr: s.beta_curr.unwrap_or(s.beta),
                gamma_curr: s.gamma_curr.unwrap_or(s.gamma),
            },
            lambda_bias: s.lambda_bias,
            drop_share: s.drop_share,
            sigma0: s.sigma0,
            delta_sigma: s.delta_sigma,
            frac_start: s.frac_start,
            frac_end: s.frac_end,
            disc_lr: s.disc_lr,
            warm_start: s.warm_start,
            probe_sigma: s.probe_sigma,
        }
    }

    pub fn eval_conditions(&self) -> Vec<EvalCondition> {
        self.eval
            .conditions
            .iter()
            .map(|c| EvalCondition::new(&c.name, c.spec(), condition_seed(self.seed, &c.name)))
            .collect()
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths.out.join(&self.paths.checkpoints)
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.paths
            .teacher
            .clone()
            .unwrap_or_else(|| self.checkpoint_dir().join("teacher.ckpt"))
    }

    /// Check every bound the pipeline will rely on and report all
    /// violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        fn check(problems: &mut Vec<String>, what: &str, r: Result<()>) {
            if let Err(e) = r {
                problems.push(format!("{what}: {e}"));
            }
        }
        let dataset = self.dataset_config();
        match &dataset {
            Ok(d) => check(&mut problems, "dataset", d.validate()),
            Err(e) => problems.push(format!("dataset: {e}")),
        }
        let classes = dataset.as_ref().map(|d| d.classes.len()).unwrap_or(0);
        if let Ok(d) = &dataset {
            let train = d.train_per_class();
            let need = self.teacher.k_support + self.teacher.k_query;
            if train < need {
                problems.push(format!(
                    "teacher: k_support + k_query = {need} exceeds the {train} training clouds per class"
                ));
            }
        }
        check(&mut problems, "teacher", self.teacher_config().validate(classes.max(2)));
        let student = self.student_config();
        check(&mut problems, "student", student.validate());
        if student.stages > 0 {
            if let Ok(sched) = student.schedule() {
                let n = self.dataset.n_points as f64;
                let worst = (0..sched.stages)
                    .filter_map(|t| sched.at(t).ok())
                    .map(|b| (student.drop_share * b.fraction * n).round() as usize)
                    .max()
                    .unwrap_or(0);
                if self.dataset.n_points.saturating_sub(worst) < crate::pointcloud::MIN_POINTS {
                    problems.push(format!(
                        "student: curriculum drops {worst} of {} points, leaving fewer than {}",
                        self.dataset.n_points,
                        crate::pointcloud::MIN_POINTS
                    ));
                }
            }
        }
        if self.eval.trials == 0 {
            problems.push("eval: trials must be at least 1".into());
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.eval.conditions {
            if !names.insert(c.name.as_str()) {
                problems.push(format!("eval: duplicate condition name '{}'", c.name));
            }
            if let Err(e) = c.spec().validate() {
                problems.push(format!("eval condition '{}': {e}", c.name));
            } else if self.dataset.n_points < crate::pointcloud::MIN_POINTS + (c.drop * self.dataset.n_points as f64).round() as usize {
                problems.push(format!("eval condition '{}': drop leaves too few points", c.name));
            }
        }
        if self.eval.conditions.is_empty() {
            problems.push("eval: no conditions".into());
        }
        if let Some(t) = &self.paths.teacher {
            if !t.exists() {
                problems.push(format!("paths: teacher checkpoint {} does not exist", t.display()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
