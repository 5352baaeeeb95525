//! Shared-MLP point-set networks built on [`crate::tensorgraph`].
//!
//! A network is a stack of per-point linear layers, an optional max pool
//! over points, and a stack of head layers. Every layer except the last is
//! followed by a ReLU.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::rng;
use crate::tensorgraph::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub point_dims: Vec<usize>,
    pub head_dims: Vec<usize>,
    pub pooled: bool,
}

impl Architecture {
    /// Per-point 3→64→128, max pool, head 128→64→C.
    pub fn classifier(num_classes: usize) -> Self {
        Self {
            input_dim: 3,
            point_dims: vec![64, 128],
            head_dims: vec![64, num_classes],
            pooled: true,
        }
    }

    /// Per-point (xyz + saliency)→32→32→(drop logit, 3-d direction).
    pub fn discriminator() -> Self {
        Self {
            input_dim: 4,
            point_dims: vec![32, 32, 4],
            head_dims: vec![],
            pooled: false,
        }
    }

    pub fn output_dim(&self) -> usize {
        *self
            .head_dims
            .last()
            .or(self.point_dims.last())
            .unwrap_or(&self.input_dim)
    }

    /// `(fan_in, fan_out)` for every layer in order.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut d = self.input_dim;
        for &h in self.point_dims.iter().chain(&self.head_dims) {
            out.push((d, h));
            d = h;
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.point_dims.len() {
            names.push(format!("point.{i}.weight"));
            names.push(format!("point.{i}.bias"));
        }
        for i in 0..self.head_dims.len() {
            names.push(format!("head.{i}.weight"));
            names.push(format!("head.{i}.bias"));
        }
        names
    }

    pub fn descriptor(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "in={} point={} pool={} head={}",
            self.input_dim,
            join(&self.point_dims),
            if self.pooled { "max" } else { "none" },
            join(&self.head_dims)
        )
    }

    pub fn parse_descriptor(s: &str) -> Result<Self> {
        let bad = || Error::parse("architecture", s.to_string());
        let dims = |v: &str| -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',').map(|d| d.parse().map_err(|_| bad())).collect()
        };
        let mut arch = Architecture {
            input_dim: 0,
            point_dims: vec![],
            head_dims: vec![],
            pooled: false,
        };
        for field in s.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(bad)?;
            match k {
                "in" => arch.input_dim = v.parse().map_err(|_| bad())?,
                "point" => arch.point_dims = dims(v)?,
                "head" => arch.head_dims = dims(v)?,
                "pool" => arch.pooled = v == "max",
                _ => return Err(bad()),
            }
        }
        if arch.input_dim == 0 || (arch.point_dims.is_empty() && arch.head_dims.is_empty()) {
            return Err(bad());
        }
        Ok(arch)
    }
}

/// Parameter gradients aligned with [`Network::params`].
pub type ParamGrads = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<Tensor>,
}

/// Node ids produced by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: NodeId,
    pub params: Vec<NodeId>,
    /// Pre-activation of every ReLU, indexed by layer.
    pre_relu: Vec<Option<NodeId>>,
    pool: Option<NodeId>,
    rows: usize,
}

impl Forward {
    /// ReLU on/off bits followed by the pooling argmax. The network is
    /// linear in a neighbourhood where this pattern stays fixed.
    pub fn pattern(&self, g: &Graph) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .pre_relu
            .iter()
            .flatten()
            .flat_map(|&id| g.value(id).data().iter().map(|&v| usize::from(v > 0.0)))
            .collect();
        if let Some(argmax) = self.pool.and_then(|p| g.pool_argmax(p)) {
            out.extend_from_slice(argmax);
        }
        out
    }
}

impl Network {
    /// Seeded uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for
    /// weights and biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "init", &[]);
        let mut params = Vec::new();
        for (fan_in, fan_out) in arch.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
            params.push(Tensor::from_parts_unchecked(vec![fan_in, fan_out], draw(fan_in * fan_out)));
            params.push(Tensor::from_parts_unchecked(vec![fan_out], draw(fan_out)));
        }
        Self { arch, params }
    }

    pub fn zeros(arch: Architecture) -> Self {
        let params = arch
            .layers()
            .into_iter()
            .flat_map(|(i, o)| [Tensor::zeros(&[i, o]), Tensor::zeros(&[o])])
            .collect();
        Self { arch, params }
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor>) -> Result<Self> {
        let expected: Vec<Vec<usize>> = arch
            .layers()
            .into_iter()
            .flat_map(|(i, o)| [vec![i, o], vec![o]])
            .collect();
        if expected.len() != params.len() {
            return Err(Error::Data(format!(
                "architecture expects {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.iter().zip(&params) {
            if e.as_slice() != p.shape() {
                return Err(Error::Shape {
                    op: "from_params",
                    left: e.clone(),
                    right: p.shape().to_vec(),
                });
            }
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        self.arch.output_dim()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// All parameter values concatenated in declaration order.
    pub fn flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    /// `self + scale * delta`, elementwise over every parameter.
    pub fn add_scaled(&mut self, delta: &[Vec<f64>], scale: f64) -> Result<()> {
        for (p, d) in self.params.iter_mut().zip(delta) {
            let v: Vec<f64> = p.data().iter().zip(d).map(|(a, b)| a + scale * b).collect();
            p.set_data(v)?;
        }
        Ok(())
    }

    /// `other - self` per parameter.
    pub fn displacement_to(&self, other: &Network) -> ParamGrads {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| b.data().iter().zip(a.data()).map(|(x, y)| x - y).collect())
            .collect()
    }

    pub fn zero_grads(&self) -> ParamGrads {
        self.params.iter().map(|p| vec![0.0; p.numel()]).collect()
    }

    /// Record the forward pass of `x` (`[N, input_dim]`). Parameters become
    /// differentiable leaves when `trainable`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, trainable: bool) -> Result<Forward> {
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.clone().with_grad())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect();
        let rows = g.value(x).shape().first().copied().unwrap_or(0);
        let n_layers = params.len() / 2;
        let n_point = self.arch.point_dims.len();
        let mut pre_relu = vec![None; n_layers];
        let mut pool = None;
        let mut h = x;
        for layer in 0..n_layers {
            if layer == n_point && self.arch.pooled {
                let p = g.max_pool_points(h)?;
                pool = Some(p);
                let f = g.value(p).numel();
                h = g.reshape(p, &[1, f])?;
            }
            h = g.linear(h, params[2 * layer], params[2 * layer + 1])?;
            if layer + 1 < n_layers {
                pre_relu[layer] = Some(h);
                h = g.relu(h)?;
            }
        }
        if self.arch.pooled && n_layers == n_point {
            let p = g.max_pool_points(h)?;
            pool = Some(p);
            let f = g.value(p).numel();
            h = g.reshape(p, &[1, f])?;
        }
        Ok(Forward {
            output: h,
            params,
            pre_relu,
            pool,
            rows,
        })
    }

    /// Read accumulated parameter gradients after `backward`.
    pub fn collect_grads(&self, g: &Graph, fwd: &Forward) -> ParamGrads {
        fwd.params
            .iter()
            .zip(&self.params)
            .map(|(&id, p)| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect()
    }

    /// Record the input gradient of logit `target` as an explicit
    /// expression in the parameters, holding the ReLU masks and pooling
    /// argmax of `fwd` fixed.
    ///
    /// Its value equals the true input gradient at the recorded point. Its
    /// parameter derivative is the derivative of the input gradient
    /// wherever the masks are locally constant, which is almost everywhere
    /// for a piecewise-linear network.
    pub fn input_gradient_expr(&self, g: &mut Graph, fwd: &Forward, target: usize) -> Result<NodeId> {
        if !self.arch.pooled || self.arch.head_dims.is_empty() {
            return Err(Error::Config("input_gradient_expr needs a pooled classifier".into()));
        }
        let classes = self.num_classes();
        if target >= classes {
            return Err(Error::Index {
                what: "input_gradient_expr target",
                index: target,
                len: classes,
            });
        }
        let n_point = self.arch.point_dims.len();
        let n_layers = fwd.params.len() / 2;
        let mut onehot = vec![0.0; classes];
        onehot[target] = 1.0;
        // upstream row vector, starting at d logit / d logits
        let mut v = g.constant(Tensor::new(vec![1, classes], onehot)?);
        for layer in (n_point..n_layers).rev() {
            if let Some(pre) = fwd.pre_relu[layer] {
                let mask = relu_mask(g, pre)?;
                v = g.mul(v, mask)?;
            }
            let wt = g.transpose(fwd.params[2 * layer])?;
            v = g.matmul(v, wt)?;
        }
        let pool = fwd.pool.expect("pooled network records its pool node");
        let argmax = g.pool_argmax(pool).unwrap().to_vec();
        let feats = argmax.len();
        let rows = fwd.rows;
        let mut route = vec![0.0; rows * feats];
        for (j, &r) in argmax.iter().enumerate() {
            route[r * feats + j] = 1.0;
        }
        let ones = g.constant(Tensor::filled(&[rows, 1], 1.0)?);
        let spread = g.matmul(ones, v)?;
        let route = g.constant(Tensor::new(vec![rows, feats], route)?);
        let mut m = g.mul(spread, route)?;
        for layer in (0..n_point).rev() {
            if let Some(pre) = fwd.pre_relu[layer] {
                let mask = relu_mask(g, pre)?;
                m = g.mul(m, mask)?;
            }
            let wt = g.transpose(fwd.params[2 * layer])?;
            m = g.matmul(m, wt)?;
        }
        Ok(m)
    }
}

fn relu_mask(g: &mut Graph, pre: NodeId) -> Result<NodeId> {
    let t = g.value(pre);
    let shape = t.shape().to_vec();
    let data = t.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    Ok(g.constant(Tensor::new(shape, data)?))
}

/// Anything that maps a cloud to a class decision.
pub trait Predictor: Sync {
    fn predict(&self, cloud: &PointCloud) -> Result<usize>;
}

/// A differentiable classifier: records logits `[1, C]` for an `[N, 3]`
/// input node, with its own parameters held constant.
pub trait Classifier: Sync {
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId>;
    fn num_classes(&self) -> usize;
}

impl Classifier for Network {
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        Ok(self.forward(g, x, false)?.output)
    }

    fn num_classes(&self) -> usize {
        Network::num_classes(self)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl<C: Classifier> Predictor for C {
    fn predict(&self, cloud: &PointCloud) -> Result<usize> {
        let mut g = Graph::new();
        let x = g.constant(cloud.to_tensor()?);
        let z = self.logits(&mut g, x)?;
        Ok(argmax(g.value(z).data()))
    }
}

/// Mean cross-entropy over `clouds` and its parameter gradient.
///
/// Each cloud gets its own graph; per-cloud gradients are summed in input
/// order so the result does not depend on thread scheduling.
pub fn batch_ce_grad(net: &Network, clouds: &[&PointCloud]) -> Result<(f64, ParamGrads)> {
    use rayon::prelude::*;
    if clouds.is_empty() {
        return Err(Error::EmptyInput("batch_ce_grad"));
    }
    let parts = clouds
        .par_iter()
        .map(|cloud| {
            let mut g = Graph::new();
            let x = g.constant(cloud.to_tensor()?);
            let fwd = net.forward(&mut g, x, true)?;
            let loss = g.softmax_cross_entropy(fwd.output, &[cloud.label])?;
            g.backward(loss)?;
            Ok((g.value(loss).item()?, net.collect_grads(&g, &fwd)))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / clouds.len() as f64;
    let mut total = 0.0;
    let mut grads = net.zero_grads();
    for (loss, g) in parts {
        total += loss;
        add_into(&mut grads, &g, scale);
    }
    Ok((total * scale, grads))
}

/// Mean cross-entropy without gradients.
pub fn batch_ce(net: &Network, clouds: &[&PointCloud]) -> Result<f64> {
    use rayon::prelude::*;
    if clouds.is_empty() {
        return Err(Error::EmptyInput("batch_ce"));
    }
    let losses = clouds
        .par_iter()
        .map(|cloud| {
            let mut g = Graph::new();
            let x = g.constant(cloud.to_tensor()?);
            let z = net.logits(&mut g, x)?;
            let l = g.softmax_cross_entropy(z, &[cloud.label])?;
            g.value(l).item()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / clouds.len() as f64)
}

pub(crate) fn add_into(acc: &mut [Vec<f64>], g: &[Vec<f64>], scale: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += scale * y;
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamGrads,
    v: ParamGrads,
    t: i32,
}

impl Adam {
    pub fn new(net: &Network, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: net.zero_grads(),
            v: net.zero_grads(),
            t: 0,
        }
    }

    /// Descend along `grads`.
    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut delta = Vec::with_capacity(grads.len());
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grads) {
            let mut d = vec![0.0; g.len()];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                d[i] = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            delta.push(d);
        }
        net.add_scaled(&delta, -self.lr)
    }
}

/// Versioned text checkpoint: architecture descriptor, config hash, and
/// every parameter tensor with its shape and row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub config_hash: String,
    pub seed: u64,
}

const CKPT_HEADER: &str = "INTACT-CKPT v1";

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let arch = self.network.arch();
        let mut s = String::new();
        writeln!(s, "{CKPT_HEADER}").unwrap();
        writeln!(s, "arch {}", arch.descriptor()).unwrap();
        writeln!(s, "config_hash {}", self.config_hash).unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        for (name, p) in arch.param_names().iter().zip(self.network.params()) {
            let shape = p.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            writeln!(s, "param {name} {shape}").unwrap();
            let values: Vec<String> = p.data().iter().map(|v| format!("{v:e}")).collect();
            writeln!(s, "{}", values.join(" ")).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ctx = "checkpoint";
        let mut lines = text.lines();
        if lines.next() != Some(CKPT_HEADER) {
            return Err(Error::parse(ctx, "bad header"));
        }
        fn field<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<String> {
            let ctx = "checkpoint";
            let line = lines.next().ok_or_else(|| Error::parse(ctx, format!("missing {key}")))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| Error::parse(ctx, format!("expected {key}, found '{line}'")))
        }
        let arch = Architecture::parse_descriptor(&field(&mut lines, "arch")?)?;
        let config_hash = field(&mut lines, "config_hash")?;
        let seed = field(&mut lines, "seed")?
            .parse()
            .map_err(|_| Error::parse(ctx, "bad seed"))?;
        let mut params = Vec::new();
        for name in arch.param_names() {
            let head = field(&mut lines, "param")?;
            let (pname, shape) = head
                .split_once(' ')
                .ok_or_else(|| Error::parse(ctx, format!("bad param line '{head}'")))?;
            if pname != name {
                return Err(Error::parse(ctx, format!("expected {name}, found {pname}")));
            }
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::parse(ctx, "bad shape")))
                .collect::<Result<_>>()?;
            let values = lines
                .next()
                .ok_or_else(|| Error::parse(ctx, format!("missing values for {name}")))?;
            let data: Vec<f64> = values
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::parse(ctx, format!("bad value '{v}'"))))
                .collect::<Result<_>>()?;
            params.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            network: Network::from_params(arch, params)?,
            config_hash,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        rng::sha256_hex(self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{generate_shape, ShapeKind};
    use crate::tensorgraph::relative_error;

    fn small_arch() -> Architecture {
        Architecture {
            input_dim: 3,
            point_dims: vec![6, 8],
            head_dims: vec![5, 3],
            pooled: true,
        }
    }

    #[test]
    fn descriptor_roundtrip() {
        for arch in [Architecture::classifier(6), Architecture::discriminator(), small_arch()] {
            assert_eq!(Architecture::parse_descriptor(&arch.descriptor()).unwrap(), arch);
        }
    }

    #[test]
    fn init_respects_fan_in_bound_and_seed() {
        let a = Network::init(Architecture::classifier(6), 1);
        let b = Network::init(Architecture::classifier(6), 1);
        assert_eq!(a, b);
        for (p, (fan_in, _)) in a.params().chunks(2).zip(a.arch().layers()) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            assert!(p.iter().flat_map(|t| t.data()).all(|v| v.abs() <= bound));
        }
        assert_ne!(a, Network::init(Architecture::classifier(6), 2));
    }

    #[test]
    fn classifier_output_shape() {
        let net = Network::init(Architecture::classifier(6), 0);
        let cloud = generate_shape(ShapeKind::Cone, 32, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(cloud.to_tensor().unwrap());
        let fwd = net.forward(&mut g, x, false).unwrap();
        assert_eq!(g.value(fwd.output).shape(), &[1, 6]);
    }

    #[test]
    fn input_gradient_expr_matches_backward() {
        let net = Network::init(small_arch(), 4);
        let cloud = generate_shape(ShapeKind::Torus, 20, 2).unwrap();
        for target in 0..3 {
            let mut g = Graph::new();
            let x = g.leaf(cloud.to_tensor().unwrap().with_grad());
            let fwd = net.forward(&mut g, x, false).unwrap();
            let expr = net.input_gradient_expr(&mut g, &fwd, target).unwrap();
            let logit = g.pick(fwd.output, target).unwrap();
            g.backward(logit).unwrap();
            let err = relative_error(g.value(expr).data(), g.grad(x).unwrap());
            assert!(err < 1e-12, "target {target}: {err}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let ck = Checkpoint {
            network: Network::init(Architecture::classifier(4), 77),
            config_hash: "abc123".into(),
            seed: 5,
        };
        let back = Checkpoint::from_text(&ck.to_text()).unwrap();
        assert_eq!(back, ck);
        let a: Vec<u64> = ck.network.flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.network.flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.hash(), ck.hash());
    }

    #[test]
    fn from_params_checks_shapes() {
        let arch = small_arch();
        let mut params = Network::zeros(arch.clone()).params().to_vec();
        params[0] = Tensor::zeros(&[2, 6]);
        assert!(Network::from_params(arch, params).is_err());
    }

    #[test]
    fn adam_descends_quadratic_direction() {
        let mut net = Network::zeros(small_arch());
        let grads: ParamGrads = net.params().iter().map(|p| vec![1.0; p.numel()]).collect();
        let mut opt = Adam::new(&net, 0.01);
        opt.step(&mut net, &grads).unwrap();
        assert!(net.flat().iter().all(|v| (*v + 0.01).abs() < 1e-6));
    }
}
