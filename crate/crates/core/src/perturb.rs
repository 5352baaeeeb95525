//! Point dropping, biased Gaussian noise, and the noise curriculum.

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::{Dataset, Point, PointCloud, Split, MIN_POINTS};
use crate::rng::{self, Rng};
use crate::saliency::{top_fraction, SaliencyMap};

/// Added to every score when sampling targeted drops.
pub const SCORE_FLOOR: f64 = 1e-8;

/// Mixing weight of the bias direction when a bias field is present.
pub const DEFAULT_LAMBDA_BIAS: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    /// Fraction α of points removed, in `[0, 1)`.
    pub drop_fraction: f64,
    /// Gaussian standard deviation σ.
    pub sigma: f64,
    /// Sample drops in proportion to saliency instead of uniformly.
    pub targeted: bool,
    /// Optional per-point unit direction that the noise leans toward.
    pub bias: Option<Vec<Point>>,
    pub lambda_bias: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self::clean()
    }
}

impl PerturbationSpec {
    pub fn clean() -> Self {
        Self {
            drop_fraction: 0.0,
            sigma: 0.0,
            targeted: false,
            bias: None,
            lambda_bias: DEFAULT_LAMBDA_BIAS,
        }
    }

    pub fn drop(alpha: f64) -> Self {
        Self {
            drop_fraction: alpha,
            ..Self::clean()
        }
    }

    pub fn noise(sigma: f64) -> Self {
        Self {
            sigma,
            ..Self::clean()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::Config(format!("drop fraction {} must be in [0, 1)", self.drop_fraction)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma {} must be finite and nonnegative", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.lambda_bias) {
            return Err(Error::Config(format!("lambda_bias {} must be in [0, 1]", self.lambda_bias)));
        }
        if let Some(bias) = &self.bias {
            for (i, b) in bias.iter().enumerate() {
                let n = crate::pointcloud::norm(b);
                if n != 0.0 && (n - 1.0).abs() > 1e-9 {
                    return Err(Error::Data(format!("bias row {i} has norm {n}, expected 1 or 0")));
                }
            }
        }
        Ok(())
    }
}

/// Indices kept after removing `round(alpha * N)` points, ascending.
///
/// Targeted removal samples without replacement with probability
/// proportional to `effective score + SCORE_FLOOR`; otherwise uniformly.
pub fn drop_indices(n: usize, spec: &PerturbationSpec, map: Option<&SaliencyMap>, rng: &mut Rng) -> Result<Vec<usize>> {
    spec.validate()?;
    let remove = (spec.drop_fraction * n as f64).round() as usize;
    if remove == 0 {
        return Ok((0..n).collect());
    }
    let remaining = n - remove.min(n);
    if remaining < MIN_POINTS {
        return Err(Error::Severity {
            remaining,
            minimum: MIN_POINTS,
        });
    }
    let removed = if spec.targeted {
        let map = map.ok_or_else(|| Error::Config("targeted drop requires a saliency map".into()))?;
        if map.len() != n {
            return Err(Error::Shape {
                op: "drop_points",
                left: vec![n],
                right: vec![map.len()],
            });
        }
        index::sample_weighted(rng, n, |i| map.effective(i) + SCORE_FLOOR, remove)
            .map_err(|e| Error::Data(format!("weighted sampling failed: {e}")))?
            .into_vec()
    } else {
        index::sample(rng, n, remove).into_vec()
    };
    let mut dropped = vec![false; n];
    for i in removed {
        dropped[i] = true;
    }
    Ok((0..n).filter(|&i| !dropped[i]).collect())
}

/// Remove `round(alpha * N)` points; survivors keep their order and values.
pub fn drop_points(
    cloud: &PointCloud,
    spec: &PerturbationSpec,
    map: Option<&SaliencyMap>,
    rng: &mut Rng,
) -> Result<PointCloud> {
    let keep = drop_indices(cloud.len(), spec, map, rng)?;
    Ok(cloud.select(&keep))
}

fn gaussian3(rng: &mut Rng) -> Point {
    [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ]
}

/// Displace the points at `indices` by
/// `sigma * (sqrt(1 - l^2) g + l b)`, with `g` standard normal, `b` the
/// bias row and `l = lambda_bias` when a bias is present, else zero.
pub fn add_noise_at(cloud: &PointCloud, spec: &PerturbationSpec, indices: &[usize], rng: &mut Rng) -> Result<PointCloud> {
    spec.validate()?;
    if let Some(bias) = &spec.bias {
        if bias.len() != cloud.len() {
            return Err(Error::Shape {
                op: "add_noise bias",
                left: vec![cloud.len(), 3],
                right: vec![bias.len(), 3],
            });
        }
    }
    let mut out = cloud.clone();
    if spec.sigma == 0.0 {
        return Ok(out);
    }
    let lambda = if spec.bias.is_some() { spec.lambda_bias } else { 0.0 };
    let iso = (1.0 - lambda * lambda).sqrt();
    for &i in indices {
        let g = gaussian3(rng);
        let b = spec.bias.as_ref().map(|b| b[i]).unwrap_or([0.0; 3]);
        for k in 0..3 {
            out.points[i][k] += spec.sigma * (iso * g[k] + lambda * b[k]);
        }
    }
    Ok(out)
}

/// Noise on every point.
pub fn add_noise(cloud: &PointCloud, spec: &PerturbationSpec, rng: &mut Rng) -> Result<PointCloud> {
    let all: Vec<usize> = (0..cloud.len()).collect();
    add_noise_at(cloud, spec, &all, rng)
}

/// Uniform drop followed by isotropic noise on all survivors.
pub fn perturb_uniform(cloud: &PointCloud, spec: &PerturbationSpec, rng: &mut Rng) -> Result<PointCloud> {
    let dropped = drop_points(cloud, &PerturbationSpec { targeted: false, ..spec.clone() }, None, rng)?;
    add_noise(&dropped, &PerturbationSpec { bias: None, ..spec.clone() }, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSchedule {
    pub stages: usize,
    pub sigma0: f64,
    pub delta_sigma: f64,
    pub frac_start: f64,
    pub frac_end: f64,
}

/// Severity of one curriculum stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageBudget {
    pub fraction: f64,
    pub sigma: f64,
}

impl CurriculumSchedule {
    pub fn new(stages: usize, sigma0: f64, delta_sigma: f64, frac_start: f64, frac_end: f64) -> Result<Self> {
        let s = Self {
            stages,
            sigma0,
            delta_sigma,
            frac_start,
            frac_end,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_sigma > 0.0) {
            return Err(Error::Config(format!("delta_sigma {} must be positive", self.delta_sigma)));
        }
        if !(self.sigma0 >= 0.0) {
            return Err(Error::Config(format!("sigma0 {} must be nonnegative", self.sigma0)));
        }
        if !(0.0 <= self.frac_end && self.frac_end <= self.frac_start && self.frac_start <= 1.0) {
            return Err(Error::Config(format!(
                "fractions must satisfy 0 <= frac_end ({}) <= frac_start ({}) <= 1",
                self.frac_end, self.frac_start
            )));
        }
        Ok(())
    }

    /// `sigma_t = sigma0 + t * delta_sigma`; the fraction decays linearly
    /// from `frac_start` at `t = 0` to `frac_end` at `t = T - 1`.
    pub fn at(&self, t: usize) -> Result<StageBudget> {
        if t >= self.stages {
            return Err(Error::Index {
                what: "curriculum stage",
                index: t,
                len: self.stages,
            });
        }
        let fraction = if self.stages == 1 {
            self.frac_start
        } else {
            self.frac_start - (self.frac_start - self.frac_end) * t as f64 / (self.stages - 1) as f64
        };
        Ok(StageBudget {
            fraction,
            sigma: self.sigma0 + t as f64 * self.delta_sigma,
        })
    }
}

pub fn schedule_at(sched: &CurriculumSchedule, t: usize) -> Result<StageBudget> {
    sched.at(t)
}

/// Outcome of perturbing one cloud for a curriculum stage.
#[derive(Debug, Clone)]
pub struct StagePerturbation {
    pub cloud: PointCloud,
    /// Surviving original indices, ascending.
    pub kept: Vec<usize>,
    /// Rows of `cloud` that received noise.
    pub noised: Vec<usize>,
}

/// Drop `round(drop_share * fraction * N)` points by saliency, then add
/// isotropic noise at the stage sigma to the top `fraction` of survivors
/// by saliency.
pub fn perturb_for_stage(
    cloud: &PointCloud,
    map: &SaliencyMap,
    budget: StageBudget,
    drop_share: f64,
    rng: &mut Rng,
) -> Result<StagePerturbation> {
    let drop_spec = PerturbationSpec {
        drop_fraction: drop_share * budget.fraction,
        targeted: true,
        ..PerturbationSpec::clean()
    };
    let kept = drop_indices(cloud.len(), &drop_spec, Some(map), rng)?;
    let survivors = cloud.select(&kept);
    let sub_map = map.restrict(&kept);
    let noised = top_fraction(&sub_map, budget.fraction);
    let cloud = add_noise_at(&survivors, &PerturbationSpec::noise(budget.sigma), &noised, rng)?;
    Ok(StagePerturbation { cloud, kept, noised })
}

/// Curriculum dataset for stage `t`: every training cloud is perturbed
/// with [`perturb_for_stage`]; validation and test clouds are untouched.
/// `maps` is aligned with `dataset.clouds`.
pub fn apply_stage(
    dataset: &Dataset,
    maps: &[SaliencyMap],
    sched: &CurriculumSchedule,
    t: usize,
    drop_share: f64,
    seed: u64,
) -> Result<Dataset> {
    if maps.len() != dataset.clouds.len() {
        return Err(Error::Shape {
            op: "apply_stage",
            left: vec![dataset.clouds.len()],
            right: vec![maps.len()],
        });
    }
    let budget = sched.at(t)?;
    let clouds = dataset
        .clouds
        .par_iter()
        .zip(maps)
        .zip(&dataset.splits)
        .map(|((cloud, map), split)| {
            if *split != Split::Train {
                return Ok(cloud.clone());
            }
            let mut rng = rng::stream(seed, "curriculum-stage", &[t as u64, cloud.id]);
            Ok(perturb_for_stage(cloud, map, budget, drop_share, &mut rng)?.cloud)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        clouds,
        class_names: dataset.class_names.clone(),
        splits: dataset.splits.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{generate_shape, make_dataset, DatasetConfig, ShapeKind};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn cloud(n: usize) -> PointCloud {
        generate_shape(ShapeKind::Sphere, n, 1).unwrap()
    }

    #[test]
    fn drop_counts_and_identity() {
        let c = cloud(256);
        let mut rng = rng::stream(0, "t", &[]);
        let half = drop_points(&c, &PerturbationSpec::drop(0.5), None, &mut rng).unwrap();
        assert_eq!(half.len(), 128);
        let same = drop_points(&c, &PerturbationSpec::drop(0.0), None, &mut rng).unwrap();
        assert_eq!(same, c);
    }

    #[test]
    fn drop_severity_and_missing_map() {
        let c = cloud(16);
        let mut rng = rng::stream(0, "t", &[]);
        assert!(matches!(
            drop_points(&c, &PerturbationSpec::drop(0.6), None, &mut rng),
            Err(Error::Severity { remaining: 6, .. })
        ));
        let spec = PerturbationSpec {
            targeted: true,
            ..PerturbationSpec::drop(0.25)
        };
        assert!(drop_points(&c, &spec, None, &mut rng).is_err());
        assert!(drop_points(&c, &PerturbationSpec::drop(1.0), None, &mut rng).is_err());
    }

    #[test]
    fn targeted_drop_hits_one_hot_point() {
        // Monte-Carlo oracle: with one-hot scores the salient point carries
        // weight 1 + 1e-8 against 255e-8 for the rest.
        let n = 256;
        let c = cloud(n);
        let mut hits = 0;
        for trial in 0..1000 {
            let j = trial % n;
            let mut scores = vec![0.0; n];
            scores[j] = 1.0;
            let map = SaliencyMap::from_scores(scores).unwrap();
            let spec = PerturbationSpec {
                targeted: true,
                ..PerturbationSpec::drop(1.0 / n as f64)
            };
            let mut rng = rng::stream(trial as u64, "t", &[]);
            let keep = drop_indices(c.len(), &spec, Some(&map), &mut rng).unwrap();
            assert_eq!(keep.len(), n - 1);
            if !keep.contains(&j) {
                hits += 1;
            }
        }
        assert!(hits as f64 / 1000.0 >= 0.999, "{hits}");
    }

    #[test]
    fn noise_sigma_zero_is_identity() {
        let c = cloud(64);
        let mut rng = rng::stream(0, "t", &[]);
        assert_eq!(add_noise(&c, &PerturbationSpec::noise(0.0), &mut rng).unwrap(), c);
    }

    #[test]
    fn isotropic_noise_has_requested_std() {
        let n = 100_000;
        let c = PointCloud::new(vec![[0.0; 3]; n], 0, 0);
        let mut rng = rng::stream(3, "t", &[]);
        let out = add_noise(&c, &PerturbationSpec::noise(0.1), &mut rng).unwrap();
        for k in 0..3 {
            let mean = out.points.iter().map(|p| p[k]).sum::<f64>() / n as f64;
            let var = out.points.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var.sqrt() - 0.1).abs() < 0.002, "axis {k}: {}", var.sqrt());
        }
    }

    #[test]
    fn biased_noise_shifts_mean() {
        let n = 100_000;
        let c = PointCloud::new(vec![[0.0; 3]; n], 0, 0);
        let spec = PerturbationSpec {
            bias: Some(vec![[1.0, 0.0, 0.0]; n]),
            ..PerturbationSpec::noise(0.1)
        };
        let mut rng = rng::stream(4, "t", &[]);
        let out = add_noise(&c, &spec, &mut rng).unwrap();
        // per-axis isotropic std is 0.1 * sqrt(0.75)
        let se = 0.1 * 0.75f64.sqrt() / (n as f64).sqrt();
        let mean = |k: usize| out.points.iter().map(|p| p[k]).sum::<f64>() / n as f64;
        assert!((mean(0) - 0.05).abs() < 3.0 * se);
        assert!(mean(1).abs() < 3.0 * se);
        assert!(mean(2).abs() < 3.0 * se);
        // E[d^2] per axis: 0.75 sigma^2 isotropic plus the bias term on x
        let ey2 = out.points.iter().map(|p| p[1] * p[1]).sum::<f64>() / n as f64;
        assert!((ey2 - 0.0075).abs() < 2e-4);
    }

    #[test]
    fn bias_rows_must_be_unit_or_zero() {
        let spec = PerturbationSpec {
            bias: Some(vec![[0.5, 0.0, 0.0]]),
            ..PerturbationSpec::noise(0.1)
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = CurriculumSchedule::new(8, 0.02, 0.02, 0.9, 0.5).unwrap();
        assert!((s.at(4).unwrap().sigma - 0.10).abs() < 1e-15);
        assert_eq!(s.at(0).unwrap().fraction, 0.9);
        assert!((s.at(7).unwrap().fraction - 0.5).abs() < 1e-15);
        assert!((s.at(4).unwrap().fraction - (0.9 - 0.4 * 4.0 / 7.0)).abs() < 1e-15);
        assert!((s.at(4).unwrap().fraction - 0.6714).abs() < 1e-4);
        assert!(matches!(s.at(8), Err(Error::Index { .. })));
        let single = CurriculumSchedule::new(1, 0.05, 0.01, 0.9, 0.5).unwrap();
        assert_eq!(single.at(0).unwrap().fraction, 0.9);
        assert!(CurriculumSchedule::new(4, 0.0, 0.0, 0.9, 0.5).is_err());
        assert!(CurriculumSchedule::new(4, 0.0, 0.1, 0.4, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_monotone(
            stages in 1usize..40,
            sigma0 in 0.0f64..0.5,
            delta in 1e-4f64..0.2,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let (frac_end, frac_start) = if a <= b { (a, b) } else { (b, a) };
            let s = CurriculumSchedule::new(stages, sigma0, delta, frac_start, frac_end).unwrap();
            let budgets: Vec<StageBudget> = (0..stages).map(|t| s.at(t).unwrap()).collect();
            prop_assert_eq!(budgets[0].fraction, frac_start);
            if stages > 1 {
                prop_assert!((budgets[stages - 1].fraction - frac_end).abs() < 1e-12);
            }
            for w in budgets.windows(2) {
                prop_assert!(w[1].sigma > w[0].sigma);
                prop_assert!(w[1].fraction <= w[0].fraction);
            }
            for b in &budgets {
                prop_assert!(b.fraction >= frac_end - 1e-12 && b.fraction <= frac_start);
            }
        }

        #[test]
        fn noise_keeps_count_and_drop_keeps_coordinates(
            seed in any::<u64>(),
            alpha in 0.0f64..0.8,
            sigma in 0.001f64..0.5,
        ) {
            let c = generate_shape(ShapeKind::Torus, 64, seed).unwrap();
            let mut rng = rng::stream(seed, "p", &[]);
            let noisy = add_noise(&c, &PerturbationSpec::noise(sigma), &mut rng).unwrap();
            prop_assert_eq!(noisy.len(), c.len());
            let keep = drop_indices(c.len(), &PerturbationSpec::drop(alpha), None, &mut rng).unwrap();
            let dropped = c.select(&keep);
            for (row, &i) in keep.iter().enumerate() {
                prop_assert_eq!(dropped.points[row], c.points[i]);
            }
            prop_assert!(keep.windows(2).all(|w| w[0] < w[1]));
        }
    }

    fn small_dataset() -> Dataset {
        make_dataset(&DatasetConfig {
            classes: vec![ShapeKind::Cube, ShapeKind::Cone, ShapeKind::Plane],
            per_class: 6,
            n_points: 64,
            seed: 2,
        })
        .unwrap()
    }

    fn random_maps(ds: &Dataset, seed: u64) -> Vec<SaliencyMap> {
        let mut rng = rng::stream(seed, "maps", &[]);
        ds.clouds
            .iter()
            .map(|c| SaliencyMap::from_scores((0..c.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn stage_with_zero_fraction_is_identity() {
        let ds = small_dataset();
        let maps = random_maps(&ds, 0);
        let s = CurriculumSchedule::new(3, 0.05, 0.05, 0.0, 0.0).unwrap();
        assert_eq!(apply_stage(&ds, &maps, &s, 1, 0.2, 9).unwrap(), ds);
    }

    #[test]
    fn stage_is_deterministic_and_leaves_holdout_alone() {
        let ds = small_dataset();
        let maps = random_maps(&ds, 1);
        let s = CurriculumSchedule::new(4, 0.02, 0.02, 0.9, 0.5).unwrap();
        let a = apply_stage(&ds, &maps, &s, 2, 0.2, 5).unwrap();
        let b = apply_stage(&ds, &maps, &s, 2, 0.2, 5).unwrap();
        assert_eq!(a, b);
        for i in 0..ds.clouds.len() {
            if ds.splits[i] != Split::Train {
                assert_eq!(a.clouds[i], ds.clouds[i]);
            } else {
                assert_ne!(a.clouds[i], ds.clouds[i]);
            }
        }
    }

    #[test]
    fn stage_noises_ceil_fraction_of_each_cloud() {
        // counting oracle: rows that moved are exactly the noised rows, and
        // there are ceil(fraction * survivors) of them
        let ds = small_dataset();
        let maps = random_maps(&ds, 2);
        let s = CurriculumSchedule::new(5, 0.05, 0.02, 0.9, 0.5).unwrap();
        for t in 0..5 {
            let budget = s.at(t).unwrap();
            for drop_share in [0.0, 0.2] {
                for (cloud, map) in ds.clouds.iter().zip(&maps) {
                    let mut rng = rng::stream(7, "count", &[t as u64, cloud.id]);
                    let out = perturb_for_stage(cloud, map, budget, drop_share, &mut rng).unwrap();
                    let n = out.cloud.len();
                    let expect_drop = (drop_share * budget.fraction * cloud.len() as f64).round() as usize;
                    assert_eq!(n, cloud.len() - expect_drop);
                    let moved = (0..n)
                        .filter(|&r| out.cloud.points[r] != cloud.points[out.kept[r]])
                        .count();
                    let expected = (budget.fraction * n as f64 - 1e-9).ceil() as usize;
                    assert_eq!(moved, expected);
                    assert_eq!(out.noised.len(), expected);
                }
            }
        }
    }
}
