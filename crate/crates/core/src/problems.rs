//! Finite-sum test objectives `F_S(w) = (1/N)·Σ f(w; ξ_i)` with hand-written
//! per-sample gradients, deterministic synthetic datasets, and a central
//! finite-difference oracle for checking the gradients.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, mix64, stream_key, CounterRng, Stream};
use crate::vecmath::{norm, NormKind};
use crate::ParamVector;

/// Hidden width of the two-layer perceptron.
pub const MLP_HIDDEN: usize = 16;

/// Class-mean separation of the two-cluster generator (distance of each
/// mean from the origin).
const CLUSTER_SEPARATION: f64 = 1.0;

/// Curvature weight of the Rosenbrock coupling term.
const ROSENBROCK_B: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// `½‖w − x‖²`
    Quadratic,
    /// `log(1 + exp(−y⟨w, x⟩))`, `y ∈ {−1, +1}`
    Logistic,
    /// input → 16 tanh → classes, softmax cross-entropy
    Mlp2,
    /// Shifted Rosenbrock chain with minimum at `w = x`.
    RosenbrockSum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Standard normal targets.
    QuadraticGauss,
    /// Two Gaussian clusters at `±(1/√d)·1`, unit covariance; label `i mod 2`.
    TwoCluster,
    /// Standard normal targets except coordinate 0, which is
    /// `(−1)^i·(1 + 0.1·z)`: the contributions nearly cancel in the mean so
    /// that coordinate of the gradient hovers around zero.
    NearCancel,
    /// Every sample is the zero vector (noise-free objective).
    Rosenbrock,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::QuadraticGauss => "quadratic-gauss",
            Generator::TwoCluster => "two-cluster",
            Generator::NearCancel => "near-cancel",
            Generator::Rosenbrock => "rosenbrock",
        }
    }

    fn parse(name: &str) -> Option<Self> {
        [Generator::QuadraticGauss, Generator::TwoCluster, Generator::NearCancel, Generator::Rosenbrock]
            .into_iter()
            .find(|g| g.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    /// Class index for classification generators, unused (0) otherwise.
    pub y: f64,
    pub id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    generator: Generator,
    seed: u64,
    dim: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn generator(&self) -> Generator {
        self.generator
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> Result<&Sample> {
        self.samples.get(i).ok_or(Error::IndexOutOfRange { index: i, len: self.samples.len() })
    }

    /// Writes one sample per row, label in the last column. A leading comment
    /// row records the generator and seed so the file can be read back with
    /// [`Dataset::read_csv`]. Floats use the shortest representation that
    /// parses back to the same value.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# generator={} seed={}", self.generator.name(), self.seed)?;
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
            row.push(s.y.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut input = BufReader::new(input);
        let mut first = String::new();
        input.read_line(&mut first)?;
        let bad = |msg: &str| Error::config(format!("dataset csv: {msg}"));
        let meta = first.trim().strip_prefix("# ").ok_or_else(|| bad("missing metadata row"))?;
        let (mut generator, mut seed) = (None, None);
        for field in meta.split_whitespace() {
            match field.split_once('=') {
                Some(("generator", g)) => generator = Generator::parse(g),
                Some(("seed", s)) => seed = s.parse::<u64>().ok(),
                _ => return Err(bad("unrecognized metadata field")),
            }
        }
        let generator = generator.ok_or_else(|| bad("unknown generator"))?;
        let seed = seed.ok_or_else(|| bad("bad seed"))?;

        let mut reader = csv::Reader::from_reader(input);
        let dim =
            reader.headers()?.len().checked_sub(1).filter(|&d| d >= 1).ok_or_else(|| bad("no feature columns"))?;
        let mut samples = Vec::new();
        for (id, record) in reader.records().enumerate() {
            let record = record?;
            let values: Vec<f64> = record
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad("unparseable number")))
                .collect::<Result<_>>()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite value"));
            }
            let (y, x) = values.split_last().expect("header guarantees two columns");
            samples.push(Sample { x: x.to_vec(), y: *y, id });
        }
        if samples.is_empty() {
            return Err(bad("no samples"));
        }
        Ok(Self { generator, seed, dim, samples })
    }
}

/// Draws sample `i` of the dataset identified by `(generator, seed)`.
pub fn draw_sample(generator: Generator, seed: u64, i: usize, dim: usize) -> Sample {
    let mut rng = CounterRng::new(derive_seed(seed, i as u64), Stream::Dataset);
    let alt = if i.is_multiple_of(2) { 1.0 } else { -1.0 };
    let (x, y) = match generator {
        Generator::QuadraticGauss => ((0..dim).map(|_| rng.gaussian()).collect(), 0.0),
        Generator::TwoCluster => {
            let class = (i % 2) as f64;
            let shift = (2.0 * class - 1.0) * CLUSTER_SEPARATION / (dim as f64).sqrt();
            ((0..dim).map(|_| shift + rng.gaussian()).collect(), class)
        }
        Generator::NearCancel => {
            let x =
                (0..dim).map(|j| if j == 0 { alt * (1.0 + 0.1 * rng.gaussian()) } else { rng.gaussian() }).collect();
            (x, 0.0)
        }
        Generator::Rosenbrock => (vec![0.0; dim], 0.0),
    };
    Sample { x, y, id: i }
}

pub fn make_dataset(generator: Generator, seed: u64, n: usize, dim: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("dataset size n must be at least 1"));
    }
    if dim == 0 {
        return Err(Error::config("feature dim must be at least 1"));
    }
    let samples = (0..n).map(|i| draw_sample(generator, seed, i, dim)).collect();
    Ok(Dataset { generator, seed, dim, samples })
}

/// Seed of the held-out set paired with a training set seed.
pub fn test_seed(train_seed: u64) -> u64 {
    mix64(stream_key(train_seed, Stream::TestSet))
}

/// Held-out set of `n` samples from the same generator with a disjoint seed.
pub fn make_test_set(train: &Dataset, n: usize) -> Result<Dataset> {
    make_dataset(train.generator, test_seed(train.seed), n, train.dim)
}

/// `S^(i)`: `ds` with position `i` redrawn from the generator under
/// `fresh_seed`. Passing the dataset's own seed reproduces it unchanged.
pub fn replace_sample(ds: &Dataset, i: usize, fresh_seed: u64) -> Result<Dataset> {
    if i >= ds.len() {
        return Err(Error::IndexOutOfRange { index: i, len: ds.len() });
    }
    let mut out = ds.clone();
    out.samples[i] = draw_sample(ds.generator, fresh_seed, i, ds.dim);
    Ok(out)
}

/// Serializable problem selection; the input dimension comes from the data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_classes() -> usize {
    2
}

/// Serializable dataset selection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub generator: Generator,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    /// Held-out set size as a multiple of `n`.
    #[serde(default = "default_test_multiplier")]
    pub test_multiplier: usize,
}

fn default_test_multiplier() -> usize {
    10
}

impl DataConfig {
    pub fn build(&self) -> Result<Dataset> {
        make_dataset(self.generator, self.seed, self.n, self.dim)
    }

    pub fn build_test(&self, train: &Dataset) -> Result<Dataset> {
        if self.test_multiplier == 0 {
            return Err(Error::config("test_multiplier must be at least 1"));
        }
        make_test_set(train, self.test_multiplier * self.n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub kind: ProblemKind,
    pub input_dim: usize,
    pub classes: usize,
}

impl Problem {
    pub fn new(kind: ProblemKind, input_dim: usize, classes: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::config("input dim must be at least 1"));
        }
        if kind == ProblemKind::RosenbrockSum && input_dim < 2 {
            return Err(Error::config("rosenbrock_sum needs dim >= 2"));
        }
        if kind == ProblemKind::Mlp2 && classes < 2 {
            return Err(Error::config("classes must be at least 2"));
        }
        Ok(Self { kind, input_dim, classes })
    }

    pub fn from_config(cfg: &ProblemConfig, data: &DataConfig) -> Result<Self> {
        Self::new(cfg.kind, data.dim, cfg.classes)
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        match self.kind {
            ProblemKind::Mlp2 => MLP_HIDDEN * self.input_dim + MLP_HIDDEN + self.classes * MLP_HIDDEN + self.classes,
            _ => self.input_dim,
        }
    }

    /// Declared bound `G` on per-sample gradient norms, where one is known.
    /// For the logistic loss `‖∇f(w; ξ)‖ ≤ ‖x‖` for every `w`.
    pub fn lipschitz_g(&self, ds: &Dataset) -> Option<f64> {
        match self.kind {
            ProblemKind::Logistic => Some(max_feature_norm(ds)),
            _ => None,
        }
    }

    /// Declared smoothness constant `L` of the per-sample losses.
    pub fn smooth_l(&self, ds: &Dataset) -> Option<f64> {
        match self.kind {
            ProblemKind::Quadratic => Some(1.0),
            ProblemKind::Logistic => Some(max_feature_norm(ds).powi(2) / 4.0),
            _ => None,
        }
    }

    fn check(&self, w: &ParamVector, s: &Sample) -> Result<()> {
        if w.dim() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), found: w.dim() });
        }
        if s.x.len() != self.input_dim {
            return Err(Error::DimensionMismatch { expected: self.input_dim, found: s.x.len() });
        }
        Ok(())
    }

    pub fn loss(&self, w: &ParamVector, s: &Sample) -> Result<f64> {
        self.check(w, s)?;
        let w = w.as_slice();
        let value = match self.kind {
            ProblemKind::Quadratic => 0.5 * w.iter().zip(&s.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
            ProblemKind::Logistic => softplus(-label_sign(s.y) * dot(w, &s.x)),
            ProblemKind::Mlp2 => {
                let label = self.class_of(s)?;
                let fwd = Mlp::new(self, w).forward(&s.x);
                log_sum_exp(&fwd.logits) - fwd.logits[label]
            }
            ProblemKind::RosenbrockSum => {
                let u: Vec<f64> = w.iter().zip(&s.x).map(|(a, b)| a + 1.0 - b).collect();
                u.windows(2).map(|p| (1.0 - p[0]).powi(2) + ROSENBROCK_B * (p[1] - p[0] * p[0]).powi(2)).sum()
            }
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { index: s.id });
        }
        Ok(value.max(0.0))
    }

    pub fn grad(&self, w: &ParamVector, s: &Sample) -> Result<ParamVector> {
        self.check(w, s)?;
        let wv = w.as_slice();
        let g = match self.kind {
            ProblemKind::Quadratic => wv.iter().zip(&s.x).map(|(a, b)| a - b).collect(),
            ProblemKind::Logistic => {
                let y = label_sign(s.y);
                let coeff = -y * sigmoid(-y * dot(wv, &s.x));
                s.x.iter().map(|x| coeff * x).collect()
            }
            ProblemKind::Mlp2 => {
                let label = self.class_of(s)?;
                Mlp::new(self, wv).backward(&s.x, label)
            }
            ProblemKind::RosenbrockSum => {
                let u: Vec<f64> = wv.iter().zip(&s.x).map(|(a, b)| a + 1.0 - b).collect();
                let mut g = vec![0.0; u.len()];
                for j in 0..u.len() - 1 {
                    let r = u[j + 1] - u[j] * u[j];
                    g[j] += -2.0 * (1.0 - u[j]) - 4.0 * ROSENBROCK_B * r * u[j];
                    g[j + 1] += 2.0 * ROSENBROCK_B * r;
                }
                g
            }
        };
        ParamVector::new(g)
    }

    fn class_of(&self, s: &Sample) -> Result<usize> {
        let c = s.y;
        if c < 0.0 || c.fract() != 0.0 || c as usize >= self.classes {
            return Err(Error::config(format!("label {c} is not a class index below {}", self.classes)));
        }
        Ok(c as usize)
    }
}

/// Logistic labels: positive class values map to +1, everything else to −1.
fn label_sign(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn max_feature_norm(ds: &Dataset) -> f64 {
    ds.samples.iter().map(|s| dot(&s.x, &s.x).sqrt()).fold(0.0, f64::max)
}

/// Views a flat parameter vector as `[W1 (H×D), b1 (H), W2 (C×H), b2 (C)]`.
struct Mlp<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
    inputs: usize,
    classes: usize,
}

struct Forward {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl<'a> Mlp<'a> {
    fn new(p: &Problem, w: &'a [f64]) -> Self {
        let (d, h, c) = (p.input_dim, MLP_HIDDEN, p.classes);
        let (w1, rest) = w.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        Self { w1, b1, w2, b2, inputs: d, classes: c }
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let hidden: Vec<f64> = (0..MLP_HIDDEN)
            .map(|k| (dot(&self.w1[k * self.inputs..(k + 1) * self.inputs], x) + self.b1[k]).tanh())
            .collect();
        let logits = (0..self.classes)
            .map(|c| dot(&self.w2[c * MLP_HIDDEN..(c + 1) * MLP_HIDDEN], &hidden) + self.b2[c])
            .collect();
        Forward { hidden, logits }
    }

    fn backward(&self, x: &[f64], label: usize) -> Vec<f64> {
        let Forward { hidden, logits } = self.forward(x);
        let lse = log_sum_exp(&logits);
        let dz: Vec<f64> =
            logits.iter().enumerate().map(|(c, z)| (z - lse).exp() - if c == label { 1.0 } else { 0.0 }).collect();

        let (d, h) = (self.inputs, MLP_HIDDEN);
        let mut g = vec![0.0; h * d + h + self.classes * h + self.classes];
        let (gw1, rest) = g.split_at_mut(h * d);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(self.classes * h);

        for c in 0..self.classes {
            gb2[c] = dz[c];
            for k in 0..h {
                gw2[c * h + k] = dz[c] * hidden[k];
            }
        }
        for k in 0..h {
            let dh: f64 = (0..self.classes).map(|c| self.w2[c * h + k] * dz[c]).sum();
            let da = dh * (1.0 - hidden[k] * hidden[k]);
            gb1[k] = da;
            for j in 0..d {
                gw1[k * d + j] = da * x[j];
            }
        }
        g
    }
}

/// Mean loss over the dataset.
pub fn empirical_risk(p: &Problem, w: &ParamVector, ds: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for s in &ds.samples {
        total += p.loss(w, s)?;
    }
    Ok(total / ds.len() as f64)
}

/// Per-sample losses in dataset order.
pub fn losses(p: &Problem, w: &ParamVector, ds: &Dataset) -> Result<Vec<f64>> {
    ds.samples.iter().map(|s| p.loss(w, s)).collect()
}

/// `∇F_S(w)`: mean of per-sample gradients, summed in index order.
pub fn full_grad(p: &Problem, w: &ParamVector, ds: &Dataset) -> Result<ParamVector> {
    let mut acc = vec![0.0; p.dim()];
    for s in &ds.samples {
        let g = p.grad(w, s)?;
        for (a, gj) in acc.iter_mut().zip(g.iter()) {
            *a += gj;
        }
    }
    let n = ds.len() as f64;
    ParamVector::new(acc.into_iter().map(|a| a / n).collect())
}

/// Mean of the gradients at the given sample indices (a mini-batch).
pub fn batch_grad(p: &Problem, w: &ParamVector, ds: &Dataset, indices: &[usize]) -> Result<ParamVector> {
    if let [i] = indices {
        return p.grad(w, ds.get(*i)?);
    }
    let mut acc = vec![0.0; p.dim()];
    for &i in indices {
        let g = p.grad(w, ds.get(i)?)?;
        for (a, gj) in acc.iter_mut().zip(g.iter()) {
            *a += gj;
        }
    }
    let n = indices.len() as f64;
    ParamVector::new(acc.into_iter().map(|a| a / n).collect())
}

/// Empirical gradient-noise variance `σ² = (1/N)·Σ ‖∇f(w; ξ_i) − ∇F_S(w)‖²`.
pub fn gradient_variance(p: &Problem, w: &ParamVector, ds: &Dataset) -> Result<f64> {
    let mean = full_grad(p, w, ds)?;
    let mut total = 0.0;
    for s in &ds.samples {
        let g = p.grad(w, s)?;
        total += g.iter().zip(mean.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / ds.len() as f64)
}

/// Largest per-sample gradient norm over the dataset at `w`.
pub fn max_grad_norm(p: &Problem, w: &ParamVector, ds: &Dataset) -> Result<f64> {
    let mut best = 0.0f64;
    for s in &ds.samples {
        best = best.max(norm(&p.grad(w, s)?, NormKind::L2));
    }
    Ok(best)
}

/// Central finite differences of the loss with step `1e−6·(1 + |w_j|)`.
/// Uses only [`Problem::loss`].
pub fn fd_grad(p: &Problem, w: &ParamVector, s: &Sample) -> Result<Vec<f64>> {
    let base = w.as_slice().to_vec();
    let mut out = Vec::with_capacity(base.len());
    for j in 0..base.len() {
        let h = 1e-6 * (1.0 + base[j].abs());
        let mut plus = base.clone();
        plus[j] += h;
        let mut minus = base.clone();
        minus[j] -= h;
        let fp = p.loss(&ParamVector::new(plus)?, s)?;
        let fm = p.loss(&ParamVector::new(minus)?, s)?;
        out.push((fp - fm) / ((base[j] + h) - (base[j] - h)));
    }
    Ok(out)
}

/// `‖analytic − fd‖∞ / (1 + ‖analytic‖∞)`.
pub fn fd_relative_error(p: &Problem, w: &ParamVector, s: &Sample) -> Result<f64> {
    let g = p.grad(w, s)?;
    let fd = fd_grad(p, w, s)?;
    let err = g.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(err / (1.0 + norm(&g, NormKind::Linf)))
}
