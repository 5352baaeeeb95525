//! First-order meta-training of the teacher over noisy class-subset tasks.

use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{batch_ce, batch_ce_grad, add_into, Architecture, Checkpoint, Classifier, Network};
use crate::perturb::{perturb_uniform, PerturbationSpec};
use crate::pointcloud::PointCloud;
use crate::rng::{self, Rng};
use crate::tensorgraph::{Graph, NodeId};

/// Distribution over tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPool {
    pub subset_size: usize,
    pub k_support: usize,
    pub k_query: usize,
    pub conditions: Vec<PerturbationSpec>,
}

impl Default for TaskPool {
    fn default() -> Self {
        Self {
            subset_size: 3,
            k_support: 10,
            k_query: 10,
            conditions: vec![
                PerturbationSpec::clean(),
                PerturbationSpec::drop(0.25),
                PerturbationSpec::drop(0.5),
                PerturbationSpec::noise(0.05),
                PerturbationSpec::noise(0.1),
            ],
        }
    }
}

impl TaskPool {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config(format!("task pool needs at least 2 classes, got {num_classes}")));
        }
        if self.subset_size < 2 || self.subset_size > num_classes {
            return Err(Error::Config(format!(
                "task subset size {} must be in 2..={num_classes}",
                self.subset_size
            )));
        }
        if self.conditions.is_empty() {
            return Err(Error::Config("task pool has no noise conditions".into()));
        }
        if self.k_support == 0 || self.k_query == 0 {
            return Err(Error::Config("k_support and k_query must be positive".into()));
        }
        for c in &self.conditions {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    /// Ascending class indices.
    pub class_subset: Vec<usize>,
    pub noise_condition: PerturbationSpec,
    pub support: Vec<PointCloud>,
    pub query: Vec<PointCloud>,
}

/// Draw a class subset, a noise condition, and disjoint support and query
/// clouds for every class in the subset. Labels keep their global indices.
pub fn sample_task(pool: &TaskPool, clouds: &[&PointCloud], num_classes: usize, rng: &mut Rng) -> Result<Task> {
    pool.validate(num_classes)?;
    let mut by_class: Vec<Vec<&PointCloud>> = vec![Vec::new(); num_classes];
    for c in clouds {
        if c.label >= num_classes {
            return Err(Error::Index {
                what: "cloud label",
                index: c.label,
                len: num_classes,
            });
        }
        by_class[c.label].push(c);
    }
    let mut class_subset = index::sample(rng, num_classes, pool.subset_size).into_vec();
    class_subset.sort_unstable();
    let condition = pool.conditions[index::sample(rng, pool.conditions.len(), 1).index(0)].clone();
    let need = pool.k_support + pool.k_query;
    let mut support = Vec::new();
    let mut query = Vec::new();
    for &c in &class_subset {
        let members = &by_class[c];
        if members.len() < need {
            return Err(Error::Config(format!(
                "class {c} has {} clouds, task needs {need}",
                members.len()
            )));
        }
        let picks = index::sample(rng, members.len(), need).into_vec();
        for (j, &i) in picks.iter().enumerate() {
            let noisy = perturb_uniform(members[i], &condition, rng)?;
            if j < pool.k_support {
                support.push(noisy);
            } else {
                query.push(noisy);
            }
        }
    }
    Ok(Task {
        class_subset,
        noise_condition: condition,
        support,
        query,
    })
}

/// `k_inner` plain gradient steps on the support cross-entropy, applied to
/// a copy of `teacher`.
pub fn inner_adapt(teacher: &Network, task: &Task, k_inner: usize, lr_inner: f64) -> Result<Network> {
    let mut adapted = teacher.clone();
    let support: Vec<&PointCloud> = task.support.iter().collect();
    for _ in 0..k_inner {
        let (_, grads) = batch_ce_grad(&adapted, &support)?;
        adapted.add_scaled(&grads, -lr_inner)?;
    }
    Ok(adapted)
}

/// Reptile update: `theta + lr_outer * mean(theta_adapted - theta)`.
pub fn meta_update(teacher: &Network, tasks: &[Task], k_inner: usize, lr_inner: f64, lr_outer: f64) -> Result<Network> {
    Ok(meta_step(teacher, tasks, k_inner, lr_inner, lr_outer)?.0)
}

/// Meta update plus the adapted models' mean query loss.
fn meta_step(
    teacher: &Network,
    tasks: &[Task],
    k_inner: usize,
    lr_inner: f64,
    lr_outer: f64,
) -> Result<(Network, f64)> {
    if tasks.is_empty() {
        return Err(Error::EmptyInput("meta_update tasks"));
    }
    let adapted = tasks
        .par_iter()
        .map(|task| {
            let a = inner_adapt(teacher, task, k_inner, lr_inner)?;
            let query: Vec<&PointCloud> = task.query.iter().collect();
            let q = batch_ce(&a, &query)?;
            Ok((teacher.displacement_to(&a), q))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / tasks.len() as f64;
    let mut mean = teacher.zero_grads();
    let mut query_loss = 0.0;
    for (d, q) in &adapted {
        add_into(&mut mean, d, scale);
        query_loss += q * scale;
    }
    let mut next = teacher.clone();
    next.add_scaled(&mean, lr_outer)?;
    Ok((next, query_loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub meta_iterations: usize,
    pub tasks_per_batch: usize,
    pub k_inner: usize,
    pub lr_inner: f64,
    pub lr_outer: f64,
    /// Decay the outer step linearly to zero over the run.
    pub anneal_outer: bool,
    pub pool: TaskPool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            meta_iterations: 160,
            tasks_per_batch: 4,
            k_inner: 5,
            lr_inner: 0.1,
            lr_outer: 1.0,
            anneal_outer: true,
            pool: TaskPool::default(),
        }
    }
}

impl TeacherConfig {
    /// Outer step size used at meta iteration `it`.
    pub fn outer_step(&self, it: usize) -> f64 {
        if self.anneal_outer {
            self.lr_outer * (1.0 - it as f64 / self.meta_iterations as f64)
        } else {
            self.lr_outer
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.pool.validate(num_classes)?;
        if self.tasks_per_batch == 0 {
            return Err(Error::Config("tasks_per_batch must be positive".into()));
        }
        for (name, v) in [("lr_inner", self.lr_inner), ("lr_outer", self.lr_outer)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Trained teacher network and the manifest it was produced under.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    pub network: Network,
    pub seed: u64,
    pub config_hash: String,
}

impl TeacherModel {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.network.clone(),
            config_hash: self.config_hash.clone(),
            seed: self.seed,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            network: ckpt.network,
            seed: ckpt.seed,
            config_hash: ckpt.config_hash,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_checkpoint(Checkpoint::load(path)?))
    }

    pub fn hash(&self) -> String {
        self.checkpoint().hash()
    }
}

impl Classifier for TeacherModel {
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.network.logits(g, x)
    }

    fn num_classes(&self) -> usize {
        self.network.num_classes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaLogEntry {
    pub iteration: usize,
    pub query_loss: f64,
}

/// Meta-train a teacher for `num_classes` classes on `train` clouds.
pub fn train_teacher(
    cfg: &TeacherConfig,
    train: &[&PointCloud],
    num_classes: usize,
    seed: u64,
    config_hash: &str,
) -> Result<(TeacherModel, Vec<MetaLogEntry>)> {
    train_teacher_logged(cfg, train, num_classes, seed, config_hash, &mut std::io::sink())
}

/// [`train_teacher`] that also appends `iteration query_loss` lines to
/// `log` as training proceeds.
pub fn train_teacher_logged(
    cfg: &TeacherConfig,
    train: &[&PointCloud],
    num_classes: usize,
    seed: u64,
    config_hash: &str,
    log_out: &mut dyn std::io::Write,
) -> Result<(TeacherModel, Vec<MetaLogEntry>)> {
    cfg.validate(num_classes)?;
    let mut net = Network::init(Architecture::classifier(num_classes), rng::derive_seed(seed, "teacher-init", &[]));
    let mut log = Vec::with_capacity(cfg.meta_iterations);
    for it in 0..cfg.meta_iterations {
        let tasks = (0..cfg.tasks_per_batch)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng::stream(seed, "teacher-task", &[it as u64, k as u64]);
                sample_task(&cfg.pool, train, num_classes, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let (next, query_loss) = meta_step(&net, &tasks, cfg.k_inner, cfg.lr_inner, cfg.outer_step(it))
            .map_err(|e| Error::NonFinite(format!("meta iteration {it}: {e}")))?;
        if !query_loss.is_finite() || next.flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "meta iteration {it}: query loss {query_loss}, last finite loss {:?}",
                log.last().map(|e: &MetaLogEntry| e.query_loss)
            )));
        }
        net = next;
        writeln!(log_out, "{it} {query_loss}")?;
        log.push(MetaLogEntry {
            iteration: it,
            query_loss,
        });
    }
    Ok((
        TeacherModel {
            network: net,
            seed,
            config_hash: config_hash.to_string(),
        },
        log,
    ))
}
