//! Adversarial curriculum training of the student against a perturbation
//! discriminator, with input-gradient alignment to a frozen teacher.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metateacher::TeacherModel;
use crate::nn::{add_into, argmax, Adam, Architecture, Checkpoint, Classifier, Network, ParamGrads, Predictor};
use crate::perturb::{
    add_noise_at, apply_stage, perturb_uniform, CurriculumSchedule, PerturbationSpec, StageBudget, DEFAULT_LAMBDA_BIAS,
};
use crate::pointcloud::{Dataset, PointCloud, Split, MIN_POINTS};
use crate::rng::{self, Rng};
use crate::saliency::{class_saliency, fraction_count, input_gradient, rank_descending, top_fraction, SaliencyMap};
use crate::tensorgraph::{Graph, NodeId, Tensor};

/// Trained student weights with their config hash and seed.
pub type StudentModel = Checkpoint;

/// Per-point perturbation network: `(x, y, z, saliency)` in, one drop
/// logit and a 3D noise direction out.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub network: Network,
}

impl Discriminator {
    pub fn init(seed: u64) -> Self {
        Self {
            network: Network::init(Architecture::discriminator(), seed),
        }
    }

    pub fn zeros() -> Self {
        Self {
            network: Network::zeros(Architecture::discriminator()),
        }
    }

    fn input(cloud: &PointCloud, map: &SaliencyMap) -> Result<Tensor> {
        if map.len() != cloud.len() {
            return Err(Error::Shape {
                op: "discriminator input",
                left: vec![cloud.len()],
                right: vec![map.len()],
            });
        }
        let scores = map.effective_scores();
        let top = scores.iter().cloned().fold(0.0, f64::max);
        let mut data = Vec::with_capacity(cloud.len() * 4);
        for (p, s) in cloud.points.iter().zip(&scores) {
            data.extend_from_slice(p);
            data.push(if top > 0.0 { s / top } else { 0.0 });
        }
        Tensor::new(vec![cloud.len(), 4], data)
    }
}

/// Severity handed to the discriminator: drop `round(alpha * N)` points
/// and noise at `sigma`, both restricted to the top `fraction` by saliency.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvBudget {
    pub alpha: f64,
    pub sigma: f64,
    pub fraction: f64,
}

impl AdvBudget {
    pub fn from_stage(stage: StageBudget, drop_share: f64) -> Self {
        Self {
            alpha: drop_share * stage.fraction,
            sigma: stage.sigma,
            fraction: stage.fraction,
        }
    }

    pub fn stage(&self) -> StageBudget {
        StageBudget {
            fraction: self.fraction,
            sigma: self.sigma,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdvPerturbation {
    pub spec: PerturbationSpec,
    pub cloud: PointCloud,
    /// Surviving original indices, ascending.
    pub kept: Vec<usize>,
    /// Rows of `cloud` that received noise.
    pub noised: Vec<usize>,
}

struct AdvPlan {
    disc: crate::nn::Forward,
    dirs: NodeId,
    pert: AdvPerturbation,
}

fn plan_adv(
    g: &mut Graph,
    disc: &Discriminator,
    cloud: &PointCloud,
    map: &SaliencyMap,
    budget: AdvBudget,
    lambda_bias: f64,
    trainable: bool,
    rng: &mut Rng,
) -> Result<AdvPlan> {
    let n = cloud.len();
    let input = g.constant(Discriminator::input(cloud, map)?);
    let fwd = disc.network.forward(g, input, trainable)?;
    let raw = g.slice_cols(fwd.output, 1, 3)?;
    let dirs = g.row_normalize(raw)?;

    let eligible = top_fraction(map, budget.fraction);
    let remove = (budget.alpha * n as f64).round() as usize;
    if remove > eligible.len() {
        return Err(Error::Config(format!(
            "drop of {remove} points exceeds the {} eligible points",
            eligible.len()
        )));
    }
    if n - remove < MIN_POINTS {
        return Err(Error::Severity {
            remaining: n - remove,
            minimum: MIN_POINTS,
        });
    }
    let out = g.value(fwd.output).data();
    let logits: Vec<f64> = eligible.iter().map(|&i| out[4 * i]).collect();
    let mut dropped = vec![false; n];
    for j in rank_descending(&logits).into_iter().take(remove) {
        dropped[eligible[j]] = true;
    }
    let mut is_eligible = vec![false; n];
    for &i in &eligible {
        is_eligible[i] = true;
    }
    let kept: Vec<usize> = (0..n).filter(|&i| !dropped[i]).collect();
    let noised: Vec<usize> = kept
        .iter()
        .enumerate()
        .filter(|(_, &i)| is_eligible[i])
        .map(|(r, _)| r)
        .collect();

    let dir_values = g.value(dirs).data();
    let bias: Vec<[f64; 3]> = kept
        .iter()
        .map(|&i| [dir_values[3 * i], dir_values[3 * i + 1], dir_values[3 * i + 2]])
        .collect();
    let any_bias = bias.iter().any(|b| b.iter().any(|v| *v != 0.0));
    let spec = PerturbationSpec {
        drop_fraction: budget.alpha,
        sigma: budget.sigma,
        targeted: false,
        bias: any_bias.then_some(bias),
        lambda_bias,
    };
    let survivors = cloud.select(&kept);
    let perturbed = add_noise_at(&survivors, &spec, &noised, rng)?;
    Ok(AdvPlan {
        disc: fwd,
        dirs,
        pert: AdvPerturbation {
            spec,
            cloud: perturbed,
            kept,
            noised,
        },
    })
}

/// Perturb `cloud` with the discriminator's choice of dropped points and
/// noise directions.
pub fn discriminator_perturb(
    disc: &Discriminator,
    cloud: &PointCloud,
    map: &SaliencyMap,
    budget: AdvBudget,
    lambda_bias: f64,
    rng: &mut Rng,
) -> Result<AdvPerturbation> {
    let mut g = Graph::new();
    Ok(plan_adv(&mut g, disc, cloud, map, budget, lambda_bias, false, rng)?.pert)
}

/// Record the perturbed cloud as a graph expression in the discriminator's
/// directions, so gradients reach the discriminator through the bias term.
fn adv_input(g: &mut Graph, plan: &AdvPlan) -> Result<NodeId> {
    let pert = &plan.pert;
    let m = pert.kept.len();
    let weight = if pert.spec.bias.is_some() && pert.spec.sigma > 0.0 {
        pert.spec.sigma * pert.spec.lambda_bias
    } else {
        0.0
    };
    let bias = pert.spec.bias.as_deref();
    let mut coef = vec![0.0; m * 3];
    let mut base: Vec<f64> = pert.cloud.points.iter().flatten().copied().collect();
    if weight > 0.0 {
        for &r in &pert.noised {
            let b = bias.unwrap()[r];
            for k in 0..3 {
                coef[3 * r + k] = weight;
                base[3 * r + k] -= weight * b[k];
            }
        }
    }
    let rows = g.gather_rows(plan.dirs, &pert.kept)?;
    let coef = g.constant(Tensor::new(vec![m, 3], coef)?);
    let base = g.constant(Tensor::new(vec![m, 3], base)?);
    let shift = g.mul(rows, coef)?;
    g.add(base, shift)
}

/// Squared Frobenius norm of the difference between the two models' input
/// gradients for logit `target`.
pub fn gradient_alignment_loss<S, T>(student: &S, teacher: &T, cloud: &PointCloud, target: usize) -> Result<f64>
where
    S: Classifier + ?Sized,
    T: Classifier + ?Sized,
{
    let a = input_gradient(student, cloud, target)?;
    let b = input_gradient(teacher, cloud, target)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub beta_curr: f64,
    pub gamma_curr: f64,
}

impl LossWeights {
    pub fn shared(beta: f64, gamma: f64) -> Self {
        Self {
            beta,
            gamma,
            beta_curr: beta,
            gamma_curr: gamma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_robust: f64,
    pub l_diff: f64,
    pub l_curr_robust: f64,
    pub l_curr_diff: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn new(l_ce: f64, l_robust: f64, l_diff: f64, l_curr_robust: f64, l_curr_diff: f64, weights: LossWeights) -> Self {
        let mut b = Self {
            l_ce,
            l_robust,
            l_diff,
            l_curr_robust,
            l_curr_diff,
            total: 0.0,
            weights,
        };
        b.total = b.reconstruct();
        b
    }

    pub fn reconstruct(&self) -> f64 {
        let w = &self.weights;
        self.l_ce + w.beta * self.l_robust + w.gamma * self.l_diff + w.beta_curr * self.l_curr_robust
            + w.gamma_curr * self.l_curr_diff
    }
}

fn mean_ce(model: &Network, clouds: &[&PointCloud]) -> Result<f64> {
    crate::nn::batch_ce(model, clouds)
}

fn mean_alignment<T: Classifier + ?Sized>(student: &Network, teacher: &T, clouds: &[&PointCloud]) -> Result<f64> {
    let parts = clouds
        .par_iter()
        .map(|c| gradient_alignment_loss(student, teacher, c, c.label))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.iter().sum::<f64>() / clouds.len() as f64)
}

/// Evaluate every term of the student objective on already-perturbed
/// batches.
pub fn student_loss<T: Classifier + ?Sized>(
    student: &Network,
    teacher: &T,
    clean: &[&PointCloud],
    adv: &[&PointCloud],
    curr: &[&PointCloud],
    weights: LossWeights,
) -> Result<LossBreakdown> {
    if clean.is_empty() || adv.is_empty() || curr.is_empty() {
        return Err(Error::EmptyInput("student_loss batch"));
    }
    for batch in [adv, curr] {
        if batch.len() != clean.len() || batch.iter().zip(clean).any(|(a, c)| a.label != c.label) {
            return Err(Error::Data("student_loss batches are not label-aligned".into()));
        }
    }
    Ok(LossBreakdown::new(
        mean_ce(student, clean)?,
        mean_ce(student, adv)?,
        mean_alignment(student, teacher, clean)?,
        mean_ce(student, curr)?,
        mean_alignment(student, teacher, curr)?,
        weights,
    ))
}

/// Cross-entropy on the discriminator-perturbed batch, averaged. Each
/// cloud's noise stream is `rng::stream(seed, "disc-step", [id])`.
pub fn robust_loss(
    disc: &Discriminator,
    student: &Network,
    batch: &[(&PointCloud, &SaliencyMap)],
    budget: AdvBudget,
    lambda_bias: f64,
    seed: u64,
) -> Result<f64> {
    Ok(robust_loss_grad(disc, student, batch, budget, lambda_bias, seed, false)?.0)
}

fn robust_loss_grad(
    disc: &Discriminator,
    student: &Network,
    batch: &[(&PointCloud, &SaliencyMap)],
    budget: AdvBudget,
    lambda_bias: f64,
    seed: u64,
    with_grad: bool,
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("discriminator batch"));
    }
    let parts = batch
        .par_iter()
        .map(|(cloud, map)| {
            let mut rng = rng::stream(seed, "disc-step", &[cloud.id]);
            let mut g = Graph::new();
            let plan = plan_adv(&mut g, disc, cloud, map, budget, lambda_bias, with_grad, &mut rng)?;
            let x = adv_input(&mut g, &plan)?;
            let z = student.logits(&mut g, x)?;
            let loss = g.softmax_cross_entropy(z, &[cloud.label])?;
            let value = g.value(loss).item()?;
            if !with_grad {
                return Ok((value, Vec::new()));
            }
            g.backward(loss)?;
            Ok((value, disc.network.collect_grads(&g, &plan.disc)))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = disc.network.zero_grads();
    let mut total = 0.0;
    for (v, g) in parts {
        total += v * scale;
        if with_grad {
            add_into(&mut grads, &g, scale);
        }
    }
    Ok((total, grads))
}

/// One gradient-ascent step on the robust loss with the student frozen.
pub fn discriminator_step(
    disc: &Discriminator,
    student: &Network,
    batch: &[(&PointCloud, &SaliencyMap)],
    budget: AdvBudget,
    lambda_bias: f64,
    lr: f64,
    seed: u64,
) -> Result<Discriminator> {
    let (_, grads) = robust_loss_grad(disc, student, batch, budget, lambda_bias, seed, true)?;
    ascend(disc, &grads, lr)
}

fn ascend(disc: &Discriminator, grads: &ParamGrads, lr: f64) -> Result<Discriminator> {
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discriminator gradient".into()));
    }
    let mut next = disc.clone();
    next.network.add_scaled(grads, lr)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Clean cross-entropy only.
    Baseline,
    /// Adversarial training at a fixed severity, no teacher.
    Act,
    /// Teacher-guided closed-loop curriculum.
    Intact,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Act, Variant::Intact];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Act => "act",
            Variant::Intact => "intact",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "variant",
                value: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentConfig {
    pub stages: usize,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub lambda_bias: f64,
    pub drop_share: f64,
    pub sigma0: f64,
    pub delta_sigma: f64,
    pub frac_start: f64,
    pub frac_end: f64,
    pub disc_lr: f64,
    pub warm_start: bool,
    /// Probe noise level for per-stage validation accuracy.
    pub probe_sigma: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            stages: 5,
            epochs_per_stage: 4,
            batch_size: 16,
            lr: 2e-3,
            weights: LossWeights::shared(0.25, 0.01),
            lambda_bias: DEFAULT_LAMBDA_BIAS,
            drop_share: 0.2,
            sigma0: 0.05,
            delta_sigma: 0.015,
            frac_start: 0.9,
            frac_end: 0.5,
            disc_lr: 0.01,
            warm_start: false,
            probe_sigma: 0.1,
        }
    }
}

impl StudentConfig {
    pub fn schedule(&self) -> Result<CurriculumSchedule> {
        CurriculumSchedule::new(self.stages, self.sigma0, self.delta_sigma, self.frac_start, self.frac_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let w = &self.weights;
        for (name, v) in [
            ("lr", self.lr),
            ("disc_lr", self.disc_lr),
            ("beta", w.beta),
            ("gamma", w.gamma),
            ("beta_curr", w.beta_curr),
            ("gamma_curr", w.gamma_curr),
            ("probe_sigma", self.probe_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_bias) {
            return Err(Error::Config(format!("lambda_bias {} must be in [0, 1]", self.lambda_bias)));
        }
        if !(0.0..1.0).contains(&self.drop_share) {
            return Err(Error::Config(format!("drop_share {} must be in [0, 1)", self.drop_share)));
        }
        Ok(())
    }
}

/// Validation accuracy at the end of a stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub clean: f64,
    pub noisy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub stage: usize,
    pub iter: usize,
    pub loss: LossBreakdown,
    pub probe: Option<Probe>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub variant: Variant,
    /// Budget delivered to the discriminator in each stage.
    pub budgets: Vec<AdvBudget>,
    pub records: Vec<IterRecord>,
}

impl TrainReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("# variant {}\n", self.variant.name());
        for (t, b) in self.budgets.iter().enumerate() {
            writeln!(s, "# stage {t} fraction {} sigma {} alpha {}", b.fraction, b.sigma, b.alpha).unwrap();
        }
        s.push_str("stage iter l_ce l_robust l_diff l_curr_robust l_curr_diff total probe_clean probe_noisy\n");
        for r in &self.records {
            writeln!(s, "{}", record_line(r)).unwrap();
        }
        s
    }
}

fn record_line(r: &IterRecord) -> String {
    let l = &r.loss;
    let (pc, pn) = match r.probe {
        Some(p) => (p.clean.to_string(), p.noisy.to_string()),
        None => ("-".into(), "-".into()),
    };
    format!(
        "{} {} {} {} {} {} {} {} {pc} {pn}",
        r.stage, r.iter, l.l_ce, l.l_robust, l.l_diff, l.l_curr_robust, l.l_curr_diff, l.total
    )
}

/// Everything one curriculum stage trains on. Clouds are the clean
/// training clouds; `curr` holds their stage-perturbed counterparts.
pub struct StageData<'a> {
    pub stage: usize,
    pub budget: AdvBudget,
    pub clean: Vec<&'a PointCloud>,
    pub maps: Vec<SaliencyMap>,
    pub curr: Vec<PointCloud>,
    /// Teacher input gradients for `clean` and `curr`, when guided.
    pub clean_targets: Option<Vec<Tensor>>,
    pub curr_targets: Option<Vec<Tensor>>,
}

fn teacher_targets(teacher: &TeacherModel, clouds: &[&PointCloud]) -> Result<Vec<Tensor>> {
    clouds
        .par_iter()
        .map(|c| input_gradient(teacher, c, c.label))
        .collect()
}

impl<'a> StageData<'a> {
    /// Saliency maps, curriculum clouds and alignment targets for stage
    /// `stage` of `variant`. Unguided variants use all-zero maps.
    pub fn build(
        dataset: &'a Dataset,
        teacher: Option<&TeacherModel>,
        cfg: &StudentConfig,
        sched: &CurriculumSchedule,
        stage: usize,
        seed: u64,
    ) -> Result<Self> {
        let maps_all: Vec<SaliencyMap> = match teacher {
            Some(t) => dataset
                .clouds
                .par_iter()
                .zip(&dataset.splits)
                .map(|(c, s)| {
                    if *s == Split::Train {
                        class_saliency(t, c)
                    } else {
                        Ok(SaliencyMap::uniform(c.len()))
                    }
                })
                .collect::<Result<_>>()?,
            None => dataset.clouds.iter().map(|c| SaliencyMap::uniform(c.len())).collect(),
        };
        let staged = apply_stage(dataset, &maps_all, sched, stage, cfg.drop_share, seed).map_err(severity_to_config)?;
        let idx = dataset.indices(Split::Train);
        let clean: Vec<&PointCloud> = idx.iter().map(|&i| &dataset.clouds[i]).collect();
        let curr: Vec<PointCloud> = idx.iter().map(|&i| staged.clouds[i].clone()).collect();
        let maps: Vec<SaliencyMap> = idx.iter().map(|&i| maps_all[i].clone()).collect();
        let (clean_targets, curr_targets) = match teacher {
            Some(t) => {
                let curr_refs: Vec<&PointCloud> = curr.iter().collect();
                (Some(teacher_targets(t, &clean)?), Some(teacher_targets(t, &curr_refs)?))
            }
            None => (None, None),
        };
        Ok(Self {
            stage,
            budget: AdvBudget::from_stage(sched.at(stage)?, cfg.drop_share),
            clean,
            maps,
            curr,
            clean_targets,
            curr_targets,
        })
    }
}

fn severity_to_config(e: Error) -> Error {
    match e {
        Error::Severity { remaining, minimum } => Error::Config(format!(
            "perturbation budget leaves {remaining} points, minimum is {minimum}"
        )),
        other => other,
    }
}

/// Weighted CE plus optional alignment against `target`, on one cloud.
fn ce_align(
    student: &Network,
    cloud: &PointCloud,
    target: Option<&Tensor>,
    w_ce: f64,
    w_diff: f64,
    with_grad: bool,
) -> Result<(f64, f64, ParamGrads)> {
    let mut g = Graph::new();
    let x = g.constant(cloud.to_tensor()?);
    let fwd = student.forward(&mut g, x, with_grad)?;
    let ce = g.softmax_cross_entropy(fwd.output, &[cloud.label])?;
    let mut loss = g.scale(ce, w_ce)?;
    let mut diff_value = 0.0;
    if let Some(t) = target {
        let s = student.input_gradient_expr(&mut g, &fwd, cloud.label)?;
        let t = g.constant(t.clone());
        let d = g.sub(s, t)?;
        let sq = g.mul(d, d)?;
        let diff = g.sum(sq)?;
        diff_value = g.value(diff).item()?;
        let weighted = g.scale(diff, w_diff)?;
        loss = g.add(loss, weighted)?;
    }
    let ce_value = g.value(ce).item()?;
    if !with_grad {
        return Ok((ce_value, diff_value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((ce_value, diff_value, student.collect_grads(&g, &fwd)))
}

/// Robust CE on one cloud, with gradients for both players.
fn adv_terms(
    student: &Network,
    disc: &Discriminator,
    cloud: &PointCloud,
    map: &SaliencyMap,
    budget: AdvBudget,
    lambda_bias: f64,
    with_grad: bool,
    rng: &mut Rng,
) -> Result<(f64, ParamGrads, ParamGrads)> {
    let mut g = Graph::new();
    let plan = plan_adv(&mut g, disc, cloud, map, budget, lambda_bias, with_grad, rng)?;
    let x = adv_input(&mut g, &plan)?;
    let fwd = student.forward(&mut g, x, with_grad)?;
    let ce = g.softmax_cross_entropy(fwd.output, &[cloud.label])?;
    let value = g.value(ce).item()?;
    if !with_grad {
        return Ok((value, Vec::new(), Vec::new()));
    }
    g.backward(ce)?;
    Ok((
        value,
        student.collect_grads(&g, &fwd),
        disc.network.collect_grads(&g, &plan.disc),
    ))
}

struct BatchResult {
    loss: LossBreakdown,
    student: ParamGrads,
    disc: ParamGrads,
}

fn guided(targets: &Option<Vec<Tensor>>, p: usize, w: f64) -> Option<&Tensor> {
    targets.as_ref().map(|t| &t[p]).filter(|_| w > 0.0)
}

/// Objective and gradients over the training clouds at `positions`.
fn batch_objective(
    student: &Network,
    disc: &Discriminator,
    data: &StageData,
    positions: &[usize],
    weights: LossWeights,
    lambda_bias: f64,
    with_grad: bool,
    stream: &(dyn Fn(usize) -> Rng + Sync),
) -> Result<BatchResult> {
    let with_curr = weights.beta_curr > 0.0 || weights.gamma_curr > 0.0;
    let parts = positions
        .par_iter()
        .map(|&p| {
            let clean = data.clean[p];
            let target = guided(&data.clean_targets, p, weights.gamma);
            let (ce, diff, mut sg) = ce_align(student, clean, target, 1.0, weights.gamma, with_grad)?;
            let mut dg = Vec::new();
            let (mut rob, mut cce, mut cdiff) = (0.0, 0.0, 0.0);
            if weights.beta > 0.0 {
                let mut rng = stream(p);
                let (r, g_s, g_d) =
                    adv_terms(student, disc, clean, &data.maps[p], data.budget, lambda_bias, with_grad, &mut rng)?;
                rob = r;
                if with_grad {
                    add_into(&mut sg, &g_s, weights.beta);
                    dg = g_d;
                }
            }
            if with_curr {
                let target = guided(&data.curr_targets, p, weights.gamma_curr);
                let (c, d, g_c) =
                    ce_align(student, &data.curr[p], target, weights.beta_curr, weights.gamma_curr, with_grad)?;
                cce = c;
                cdiff = d;
                if with_grad {
                    add_into(&mut sg, &g_c, 1.0);
                }
            }
            Ok((ce, rob, diff, cce, cdiff, sg, dg))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / positions.len() as f64;
    let mut sums = [0.0; 5];
    let mut sgrad = student.zero_grads();
    let mut dgrad = disc.network.zero_grads();
    for (ce, rob, diff, cce, cdiff, sg, dg) in parts {
        for (s, v) in sums.iter_mut().zip([ce, rob, diff, cce, cdiff]) {
            *s += v * scale;
        }
        if with_grad {
            add_into(&mut sgrad, &sg, scale);
            if !dg.is_empty() {
                add_into(&mut dgrad, &dg, scale);
            }
        }
    }
    Ok(BatchResult {
        loss: LossBreakdown::new(sums[0], sums[1], sums[2], sums[3], sums[4], weights),
        student: sgrad,
        disc: dgrad,
    })
}

/// Full student objective over every training cloud of the stage, with
/// fixed perturbation streams so repeated calls are comparable.
pub fn stage_objective(
    student: &Network,
    disc: &Discriminator,
    data: &StageData,
    cfg: &StudentConfig,
    seed: u64,
) -> Result<LossBreakdown> {
    let all: Vec<usize> = (0..data.clean.len()).collect();
    let stream = |p: usize| rng::stream(seed, "stage-objective", &[data.stage as u64, data.clean[p].id]);
    Ok(batch_objective(student, disc, data, &all, cfg.weights, cfg.lambda_bias, false, &stream)?.loss)
}

/// One pass over the stage's training clouds in shuffled mini-batches:
/// an Adam step for the student and, when `disc_lr > 0`, a simultaneous
/// ascent step for the discriminator on the same batch.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    student: &mut Network,
    adam: &mut Adam,
    disc: &mut Discriminator,
    data: &StageData,
    cfg: &StudentConfig,
    epoch: usize,
    seed: u64,
    records: &mut Vec<IterRecord>,
) -> Result<()> {
    if data.clean.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let mut order: Vec<usize> = (0..data.clean.len()).collect();
    order.shuffle(&mut rng::stream(seed, "student-batches", &[data.stage as u64, epoch as u64]));
    for batch in order.chunks(cfg.batch_size) {
        let iter = records.iter().filter(|r| r.stage == data.stage).count();
        let stream = |p: usize| rng::stream(seed, "adv-batch", &[data.stage as u64, epoch as u64, data.clean[p].id]);
        let res = batch_objective(student, disc, data, batch, cfg.weights, cfg.lambda_bias, true, &stream)
            .map_err(|e| context(e, data.stage, iter))?;
        if !res.loss.total.is_finite() {
            return Err(Error::NonFinite(format!("stage {} iteration {iter}: total loss", data.stage)));
        }
        adam.step(student, &res.student).map_err(|e| context(e, data.stage, iter))?;
        if cfg.disc_lr > 0.0 && cfg.weights.beta > 0.0 {
            *disc = ascend(disc, &res.disc, cfg.disc_lr).map_err(|e| context(e, data.stage, iter))?;
        }
        records.push(IterRecord {
            stage: data.stage,
            iter,
            loss: res.loss,
            probe: None,
        });
    }
    Ok(())
}

fn context(e: Error, stage: usize, iter: usize) -> Error {
    match severity_to_config(e) {
        Error::NonFinite(m) => Error::NonFinite(format!("stage {stage} iteration {iter}: {m}")),
        other => other,
    }
}

/// Accuracy of `model` on `clouds`, optionally under isotropic noise drawn
/// from `rng::stream(seed, domain, [id])`.
fn accuracy<P: Predictor + ?Sized>(model: &P, clouds: &[&PointCloud], sigma: f64, seed: u64) -> Result<f64> {
    let hits = clouds
        .par_iter()
        .map(|c| {
            let input = if sigma > 0.0 {
                perturb_uniform(c, &PerturbationSpec::noise(sigma), &mut rng::stream(seed, "probe", &[c.id]))?
            } else {
                (*c).clone()
            };
            Ok((model.predict(&input)? == c.label) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / clouds.len().max(1) as f64)
}

fn probe(student: &Network, dataset: &Dataset, sigma: f64, seed: u64) -> Result<Option<Probe>> {
    let val = dataset.split(Split::Val);
    if val.is_empty() {
        return Ok(None);
    }
    Ok(Some(Probe {
        clean: accuracy(student, &val, 0.0, seed)?,
        noisy: accuracy(student, &val, sigma, seed)?,
    }))
}

/// Train one student variant on the training split of `dataset`.
///
/// `Intact` runs the full curriculum with teacher saliency and alignment.
/// `Act` flattens the curriculum to one stage at `(frac_start, sigma0)`
/// without a teacher. `Baseline` trains on clean clouds only. All three
/// run `stages * epochs_per_stage` epochs.
pub fn closed_loop_train(
    cfg: &StudentConfig,
    variant: Variant,
    teacher: Option<&TeacherModel>,
    dataset: &Dataset,
    seed: u64,
    config_hash: &str,
) -> Result<(StudentModel, TrainReport)> {
    closed_loop_train_logged(cfg, variant, teacher, dataset, seed, config_hash, &mut std::io::sink())
}

/// [`closed_loop_train`] that also streams each record to `log` as it is
/// produced, so an aborted run keeps its history.
pub fn closed_loop_train_logged(
    cfg: &StudentConfig,
    variant: Variant,
    teacher: Option<&TeacherModel>,
    dataset: &Dataset,
    seed: u64,
    config_hash: &str,
    log: &mut dyn std::io::Write,
) -> Result<(StudentModel, TrainReport)> {
    cfg.validate()?;
    let classes = dataset.num_classes();
    let student_seed = rng::derive_seed(seed, "student-init", &[]);
    let mut student = match (cfg.warm_start, teacher) {
        (true, Some(t)) => t.network.clone(),
        (true, None) => return Err(Error::Config("warm_start needs a teacher".into())),
        _ => Network::init(Architecture::classifier(classes), student_seed),
    };
    if student.num_classes() != classes {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {classes}",
            student.num_classes()
        )));
    }
    let mut report = TrainReport {
        variant,
        budgets: Vec::new(),
        records: Vec::new(),
    };
    let finish = |student: Network, report: TrainReport| {
        Ok((
            Checkpoint {
                network: student,
                config_hash: config_hash.to_string(),
                seed,
            },
            report,
        ))
    };
    if cfg.stages == 0 || cfg.epochs_per_stage == 0 {
        return finish(student, report);
    }

    let total_epochs = cfg.stages * cfg.epochs_per_stage;
    let (run_cfg, guide, stages, epochs) = match variant {
        Variant::Intact => {
            let t = teacher.ok_or_else(|| Error::Config("the intact variant needs a teacher".into()))?;
            (cfg.clone(), Some(t), cfg.stages, cfg.epochs_per_stage)
        }
        Variant::Act => {
            let flat = StudentConfig {
                stages: 1,
                weights: LossWeights {
                    gamma: 0.0,
                    gamma_curr: 0.0,
                    ..cfg.weights
                },
                ..cfg.clone()
            };
            (flat, None, 1, total_epochs)
        }
        Variant::Baseline => {
            let clean = StudentConfig {
                stages: 1,
                weights: LossWeights::shared(0.0, 0.0),
                ..cfg.clone()
            };
            (clean, None, 1, total_epochs)
        }
    };
    let sched = run_cfg.schedule()?;
    let mut disc = Discriminator::init(rng::derive_seed(seed, "disc-init", &[]));
    let mut adam = Adam::new(&student, cfg.lr);
    for t in 0..stages {
        let data = StageData::build(dataset, guide, &run_cfg, &sched, t, rng::derive_seed(seed, "curriculum", &[]))?;
        if variant != Variant::Baseline {
            report.budgets.push(data.budget);
            let b = data.budget;
            writeln!(log, "# stage {t} fraction {} sigma {} alpha {}", b.fraction, b.sigma, b.alpha)?;
        }
        for e in 0..epochs {
            let start = report.records.len();
            let res = train_epoch(&mut student, &mut adam, &mut disc, &data, &run_cfg, e, seed, &mut report.records);
            for r in &report.records[start..] {
                writeln!(log, "{}", record_line(r))?;
            }
            res?;
        }
        let p = probe(&student, dataset, cfg.probe_sigma, rng::derive_seed(seed, "probe", &[t as u64]))?;
        if let Some(p) = p {
            writeln!(log, "# probe stage {t} clean {} noisy {}", p.clean, p.noisy)?;
        }
        if let Some(last) = report.records.last_mut() {
            last.probe = p;
        }
    }
    finish(student, report)
}

/// Predicted class of each cloud.
pub fn predict_all(model: &Network, clouds: &[&PointCloud]) -> Result<Vec<usize>> {
    clouds
        .par_iter()
        .map(|c| {
            let mut g = Graph::new();
            let x = g.constant(c.to_tensor()?);
            let z = model.logits(&mut g, x)?;
            Ok(argmax(g.value(z).data()))
        })
        .collect()
}

#[doc(hidden)]
pub fn budget_eligible_count(budget: AdvBudget, n: usize) -> usize {
    fraction_count(budget.fraction, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{generate_shape, make_dataset, DatasetConfig, ShapeKind};
    use crate::tensorgraph::{finite_difference_gradient, relative_error};

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut c = generate_shape(ShapeKind::Cone, n, seed).unwrap();
        c.label = 1;
        c
    }

    fn random_map(n: usize, seed: u64) -> SaliencyMap {
        use rand::Rng as _;
        let mut r = rng::stream(seed, "map", &[]);
        SaliencyMap::from_scores((0..n).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn small_dataset() -> Dataset {
        make_dataset(&DatasetConfig {
            classes: vec![ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Plane],
            per_class: 8,
            n_points: 48,
            seed: 2,
        })
        .unwrap()
    }

    #[test]
    fn zero_budget_is_identity() {
        let c = cloud(64, 1);
        let budget = AdvBudget {
            alpha: 0.0,
            sigma: 0.0,
            fraction: 0.9,
        };
        let p = discriminator_perturb(&Discriminator::init(3), &c, &random_map(64, 1), budget, 0.5, &mut rng::stream(0, "x", &[]))
            .unwrap();
        assert_eq!(p.cloud.points, c.points);
    }

    #[test]
    fn zero_discriminator_falls_back_to_isotropic() {
        let c = cloud(64, 2);
        let budget = AdvBudget {
            alpha: 0.1,
            sigma: 0.05,
            fraction: 0.9,
        };
        let p = discriminator_perturb(&Discriminator::zeros(), &c, &random_map(64, 2), budget, 0.5, &mut rng::stream(0, "x", &[]))
            .unwrap();
        assert!(p.spec.bias.is_none());
        assert_eq!(p.noised.len(), fraction_count(0.9, 64) - 6);
    }

    #[test]
    fn drop_mask_size_is_round_alpha_n() {
        for seed in 0..20u64 {
            let n = 40 + 7 * seed as usize;
            let alpha = 0.05 * (seed % 8) as f64;
            let c = cloud(n, seed);
            let budget = AdvBudget {
                alpha,
                sigma: 0.02,
                fraction: 0.9,
            };
            let p = discriminator_perturb(
                &Discriminator::init(seed),
                &c,
                &random_map(n, seed),
                budget,
                0.5,
                &mut rng::stream(seed, "x", &[]),
            )
            .unwrap();
            assert_eq!(n - p.kept.len(), (alpha * n as f64).round() as usize);
            assert_eq!(p.cloud.len(), p.kept.len());
        }
        let budget = AdvBudget {
            alpha: 0.9,
            sigma: 0.0,
            fraction: 0.95,
        };
        let err = discriminator_perturb(&Discriminator::init(0), &cloud(40, 0), &random_map(40, 0), budget, 0.5, &mut rng::stream(0, "x", &[]));
        assert!(matches!(err, Err(Error::Severity { .. })));
    }

    /// logit_c = w_c . mean(points)
    struct MeanLinear(Vec<[f64; 3]>);

    impl Classifier for MeanLinear {
        fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
            let n = g.value(x).shape()[0];
            let avg = g.constant(Tensor::filled(&[1, n], 1.0 / n as f64)?);
            let m = g.matmul(avg, x)?;
            let rows: Vec<Vec<f64>> = (0..3).map(|k| self.0.iter().map(|w| w[k]).collect()).collect();
            let w = g.constant(Tensor::from_rows(&rows)?);
            g.matmul(m, w)
        }

        fn num_classes(&self) -> usize {
            self.0.len()
        }
    }

    #[test]
    fn alignment_loss_oracles() {
        let c = cloud(50, 4);
        let s = MeanLinear(vec![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]]);
        let t = MeanLinear(vec![[0.0, 2.5, 1.0], [0.5, 0.0, 3.0]]);
        let dw2: f64 = 1.0 + 0.25 + 4.0;
        let n = 50.0;
        let l = gradient_alignment_loss(&s, &t, &c, 0).unwrap();
        assert!((l - n * dw2 / (n * n)).abs() < 1e-15);
        assert_eq!(gradient_alignment_loss(&s, &t, &c, 1).unwrap(), 0.0);

        let net = Network::init(Architecture::classifier(3), 8);
        let copy = TeacherModel {
            network: net.clone(),
            seed: 0,
            config_hash: String::new(),
        };
        assert!(gradient_alignment_loss(&net, &copy, &c, 1).unwrap() <= 1e-18);
        let other = Network::init(Architecture::classifier(3), 9);
        assert!(gradient_alignment_loss(&net, &other, &c, 1).unwrap() > 0.0);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let arch = Architecture {
            input_dim: 3,
            point_dims: vec![6, 5],
            head_dims: vec![4, 3],
            pooled: true,
        };
        let c = cloud(12, 5);
        let student = Network::init(arch.clone(), 1);
        let teacher = Network::init(arch, 2);
        let target = input_gradient(&teacher, &c, c.label).unwrap();
        let w = 0.7;
        let (_, _, grads) = ce_align(&student, &c, Some(&target), 1.0, w, true).unwrap();
        for (pi, p) in student.params().iter().enumerate() {
            let f = |v: &Tensor| -> Result<f64> {
                let mut params = student.params().to_vec();
                params[pi] = v.clone();
                let s = Network::from_params(student.arch().clone(), params)?;
                let ce = crate::nn::batch_ce(&s, &[&c])?;
                Ok(ce + w * gradient_alignment_loss(&s, &teacher, &c, c.label)?)
            };
            let fd = finite_difference_gradient(f, p, 1e-6).unwrap();
            let err = relative_error(fd.data(), &grads[pi]);
            assert!(err < 1e-5, "param {pi}: {err}");
        }
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let c = cloud(24, 6);
        let map = random_map(24, 6);
        let student = Network::init(Architecture::classifier(3), 4);
        let disc = Discriminator::init(5);
        let budget = AdvBudget {
            alpha: 0.0,
            sigma: 0.3,
            fraction: 0.75,
        };
        let batch = [(&c, &map)];
        let (_, grads) = robust_loss_grad(&disc, &student, &batch, budget, 0.5, 1, true).unwrap();
        assert!(grads.iter().flatten().any(|v| *v != 0.0));
        for (pi, p) in disc.network.params().iter().enumerate() {
            let f = |v: &Tensor| -> Result<f64> {
                let mut params = disc.network.params().to_vec();
                params[pi] = v.clone();
                let d = Discriminator {
                    network: Network::from_params(Architecture::discriminator(), params)?,
                };
                robust_loss(&d, &student, &batch, budget, 0.5, 1)
            };
            let fd = finite_difference_gradient(f, p, 1e-6).unwrap();
            let err = relative_error(fd.data(), &grads[pi]);
            assert!(err < 1e-5, "param {pi}: {err}");
        }
    }

    #[test]
    fn student_loss_identities() {
        let ds = small_dataset();
        let train = ds.split(Split::Train);
        let clean = &train[..4];
        let student = Network::init(Architecture::classifier(3), 1);
        let teacher = Network::init(Architecture::classifier(3), 2);
        let noisy: Vec<PointCloud> = clean
            .iter()
            .map(|c| perturb_uniform(c, &PerturbationSpec::noise(0.05), &mut rng::stream(0, "n", &[c.id])).unwrap())
            .collect();
        let noisy: Vec<&PointCloud> = noisy.iter().collect();

        let zero = student_loss(&student, &teacher, clean, &noisy, &noisy, LossWeights::shared(0.0, 0.0)).unwrap();
        assert_eq!(zero.total, zero.l_ce);

        let same = student_loss(&student, &teacher, clean, clean, &noisy, LossWeights::shared(1.0, 0.1)).unwrap();
        assert_eq!(same.l_robust, same.l_ce);
        assert!(same.l_diff >= 0.0 && same.l_curr_diff >= 0.0);
        let oracle = same.l_ce + 1.0 * same.l_robust + 0.1 * same.l_diff + 1.0 * same.l_curr_robust + 0.1 * same.l_curr_diff;
        assert!((same.total - oracle).abs() <= 1e-12);

        assert!(student_loss(&student, &teacher, clean, &noisy[..2], &noisy, LossWeights::shared(1.0, 0.1)).is_err());
    }

    #[test]
    fn discriminator_step_lr_zero_and_determinism() {
        let c = cloud(32, 7);
        let map = random_map(32, 7);
        let student = Network::init(Architecture::classifier(3), 4);
        let disc = Discriminator::init(5);
        let budget = AdvBudget {
            alpha: 0.1,
            sigma: 0.1,
            fraction: 0.8,
        };
        let batch = [(&c, &map)];
        assert_eq!(discriminator_step(&disc, &student, &batch, budget, 0.5, 0.0, 3).unwrap(), disc);
        let a = discriminator_step(&disc, &student, &batch, budget, 0.5, 0.05, 3).unwrap();
        let b = discriminator_step(&disc, &student, &batch, budget, 0.5, 0.05, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, disc);
    }

    fn tiny_cfg() -> StudentConfig {
        StudentConfig {
            stages: 3,
            epochs_per_stage: 1,
            batch_size: 6,
            ..StudentConfig::default()
        }
    }

    fn teacher() -> TeacherModel {
        TeacherModel {
            network: Network::init(Architecture::classifier(3), 77),
            seed: 0,
            config_hash: "t".into(),
        }
    }

    #[test]
    fn zero_stages_returns_initial_student() {
        let ds = small_dataset();
        let cfg = StudentConfig {
            stages: 0,
            ..tiny_cfg()
        };
        let (m, r) = closed_loop_train(&cfg, Variant::Intact, Some(&teacher()), &ds, 5, "h").unwrap();
        assert!(r.records.is_empty() && r.budgets.is_empty());
        assert_eq!(
            m.network,
            Network::init(Architecture::classifier(3), rng::derive_seed(5, "student-init", &[]))
        );
    }

    #[test]
    fn training_contracts() {
        let ds = small_dataset();
        let cfg = tiny_cfg();
        let t = teacher();
        let before = t.hash();
        let (a, ra) = closed_loop_train(&cfg, Variant::Intact, Some(&t), &ds, 5, "h").unwrap();
        assert_eq!(t.hash(), before);
        let (b, rb) = closed_loop_train(&cfg, Variant::Intact, Some(&t), &ds, 5, "h").unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.to_text(), rb.to_text());

        let sched = cfg.schedule().unwrap();
        assert_eq!(ra.budgets.len(), cfg.stages);
        for (i, b) in ra.budgets.iter().enumerate() {
            assert_eq!(b.stage(), crate::perturb::schedule_at(&sched, i).unwrap());
        }
        for r in &ra.records {
            assert!((r.loss.total - r.loss.reconstruct()).abs() <= 1e-12);
            assert!(r.loss.l_diff >= 0.0 && r.loss.l_curr_diff >= 0.0);
        }
        assert!(ra.records.iter().filter(|r| r.probe.is_some()).count() == cfg.stages);

        let (_, act) = closed_loop_train(&cfg, Variant::Act, None, &ds, 5, "h").unwrap();
        assert_eq!(act.budgets.len(), 1);
        assert_eq!(act.budgets[0].stage(), crate::perturb::schedule_at(&sched, 0).unwrap());
        assert_eq!(act.records.len(), ra.records.len());
        assert!(act.records.iter().all(|r| r.loss.l_diff == 0.0));
        let (_, base) = closed_loop_train(&cfg, Variant::Baseline, None, &ds, 5, "h").unwrap();
        assert!(base.records.iter().all(|r| r.loss.total == r.loss.l_ce));
        assert!(closed_loop_train(&cfg, Variant::Intact, None, &ds, 5, "h").is_err());
    }
}
