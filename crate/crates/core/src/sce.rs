//! Sample reweighting that removes dependence between learned feature
//! columns.
//!
//! Dependence between two columns is measured with random Fourier features
//! of each column and the squared Frobenius norm of their weighted
//! cross-covariance. Sample weights are fitted by projected gradient descent
//! on the sum of that statistic over column pairs, against a running memory
//! of earlier batches.

use std::f64::consts::{PI, SQRT_2};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Lower bound applied to every sample weight.
pub const MIN_WEIGHT: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct RffBank {
    pub w: Vec<f64>,
    pub phi: Vec<f64>,
}

impl RffBank {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    fn draw(n: usize, rng: &mut ChaCha8Rng) -> RffBank {
        let mut w = Vec::with_capacity(n);
        let mut phi = Vec::with_capacity(n);
        for _ in 0..n {
            w.push(StandardNormal.sample(rng));
            phi.push(rng.random_range(0.0..2.0 * PI));
        }
        RffBank { w, phi }
    }
}

/// `n` pairs `w ~ N(0,1)`, `phi ~ U[0, 2pi)`.
pub fn sample_rff_bank(n: usize, seed: u64) -> Result<RffBank> {
    if n == 0 {
        return Err(Error::Config("random feature count must be at least 1".into()));
    }
    Ok(RffBank::draw(n, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// `[len, n]` matrix with entries `sqrt(2) cos(w_i x_k + phi_i)`.
pub fn rff_map(values: &[f64], bank: &RffBank) -> Array {
    let n = bank.len();
    let mut out = Vec::with_capacity(values.len() * n);
    for &x in values {
        for i in 0..n {
            out.push(SQRT_2 * (bank.w[i] * x + bank.phi[i]).cos());
        }
    }
    Array::new(vec![values.len(), n], out).expect("sized above")
}

/// `(1/n) sum w u v - [(1/n) sum w u][(1/n) sum w v]`.
pub fn weighted_cov(u: &[f64], v: &[f64], w: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.len() != w.len() {
        return Err(Error::Shape(format!("lengths {}, {}, {}", u.len(), v.len(), w.len())));
    }
    if u.is_empty() {
        return Err(Error::Shape("covariance of empty columns".into()));
    }
    let n = u.len() as f64;
    let (mut uv, mut su, mut sv) = (0.0, 0.0, 0.0);
    for k in 0..u.len() {
        uv += w[k] * u[k] * v[k];
        su += w[k] * u[k];
        sv += w[k] * v[k];
    }
    Ok(uv / n - (su / n) * (sv / n))
}

/// Weighted cross-covariance between the feature columns of `pa: [R, p]`
/// and `pb: [R, q]`, plus the weighted means it subtracts.
fn cross_cov(pa: &Array, pb: &Array, w: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (r, p, q) = (pa.shape()[0], pa.shape()[1], pb.shape()[1]);
    let (a, b) = (pa.data(), pb.data());
    let mut c = vec![0.0; p * q];
    let mut ma = vec![0.0; p];
    let mut mb = vec![0.0; q];
    for k in 0..r {
        let ak = &a[k * p..(k + 1) * p];
        let bk = &b[k * q..(k + 1) * q];
        for i in 0..p {
            let wa = w[k] * ak[i];
            ma[i] += wa;
            for j in 0..q {
                c[i * q + j] += wa * bk[j];
            }
        }
        for j in 0..q {
            mb[j] += w[k] * bk[j];
        }
    }
    let rn = r as f64;
    ma.iter_mut().for_each(|x| *x /= rn);
    mb.iter_mut().for_each(|x| *x /= rn);
    for i in 0..p {
        for j in 0..q {
            c[i * q + j] = c[i * q + j] / rn - ma[i] * mb[j];
        }
    }
    (c, ma, mb)
}

/// Sum of squared weighted covariances between every random feature of
/// `xa` (bank `bx`) and every random feature of `xb` (bank `by`).
pub fn sce_statistic(xa: &[f64], xb: &[f64], w: &[f64], bx: &RffBank, by: &RffBank) -> Result<f64> {
    if xa.len() != xb.len() || xa.len() != w.len() {
        return Err(Error::Shape(format!("lengths {}, {}, {}", xa.len(), xb.len(), w.len())));
    }
    if xa.is_empty() {
        return Err(Error::Shape("statistic of empty columns".into()));
    }
    let (c, _, _) = cross_cov(&rff_map(xa, bx), &rff_map(xb, by), w);
    Ok(c.iter().map(|x| x * x).sum())
}

/// Frobenius norm of the difference of the two Laplacian kernel matrices
/// `exp(-gamma |z_a - z_b|)`.
pub fn exact_sce(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("lengths {} and {}", x.len(), y.len())));
    }
    let mut s = 0.0;
    for a in 0..x.len() {
        for b in 0..x.len() {
            let d = (-gamma * (x[a] - x[b]).abs()).exp() - (-gamma * (y[a] - y[b]).abs()).exp();
            s += d * d;
        }
    }
    Ok(s.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceConfig {
    /// Balancing iterations; iteration `b` (counting down) uses `b` random
    /// features per column.
    pub balancing_epochs: usize,
    pub steps: usize,
    pub lr: f64,
    pub max_pairs: usize,
    /// Bandwidth of the exact kernel statistic (diagnostics only).
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SceConfig {
    fn default() -> Self {
        SceConfig {
            balancing_epochs: 5,
            steps: 20,
            lr: 0.01,
            max_pairs: 2048,
            gamma: 1.0,
            seed: 0,
        }
    }
}

impl SceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.balancing_epochs == 0 || self.steps == 0 || self.max_pairs == 0 {
            return Err(Error::Config("balancing epochs, steps and max pairs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("weight learning rate and gamma must be positive".into()));
        }
        Ok(())
    }
}

/// Running averages of earlier batches' features and weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlobalMemory {
    features: Option<Array>,
    weights: Vec<f64>,
    iteration: u64,
}

/// Maps `n` rows onto `target` rows: evenly spaced picks when shrinking,
/// cycling when growing.
fn resample_rows(n: usize, target: usize) -> Vec<usize> {
    if n >= target {
        (0..target).map(|i| i * n / target).collect()
    } else {
        (0..target).map(|i| i % n).collect()
    }
}

impl GlobalMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn features(&self) -> Option<&Array> {
        self.features.as_ref()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// First call stores half of the batch; later calls average with it.
    pub fn update(&mut self, fm: &Array, w: &[f64]) -> Result<()> {
        if fm.ndim() != 2 || fm.shape()[0] != w.len() || w.is_empty() {
            return Err(Error::Shape(format!("features {:?} with {} weights", fm.shape(), w.len())));
        }
        let (n, m) = (fm.shape()[0], fm.shape()[1]);
        match &mut self.features {
            None => {
                self.features = Some(fm.map(|x| 0.5 * x));
                self.weights = w.iter().map(|x| 0.5 * x).collect();
            }
            Some(mem) => {
                if mem.shape()[1] != m {
                    return Err(Error::Shape(format!("memory width {} but batch width {}", mem.shape()[1], m)));
                }
                let rows = resample_rows(n, mem.shape()[0]);
                let fd = fm.data();
                for (t, &r) in rows.iter().enumerate() {
                    let dst = &mut mem.data_mut()[t * m..(t + 1) * m];
                    for (x, &y) in dst.iter_mut().zip(&fd[r * m..(r + 1) * m]) {
                        *x = 0.5 * (*x + y);
                    }
                    self.weights[t] = 0.5 * (self.weights[t] + w[r]);
                }
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

/// Clamps to [`MIN_WEIGHT`] and rescales to mean one, repeating until both
/// hold.
pub fn project_weights(w: &mut [f64]) {
    for _ in 0..100 {
        w.iter_mut().for_each(|x| *x = x.max(MIN_WEIGHT));
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        w.iter_mut().for_each(|x| *x /= mean);
        if w.iter().all(|&x| x >= MIN_WEIGHT) {
            return;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reweighting {
    pub weights: Vec<f64>,
    /// Objective before each gradient step, over all balancing iterations.
    pub objective: Vec<f64>,
}

fn decode_pair(t: usize, m: usize) -> (usize, usize) {
    // row a holds pairs (a, a+1..m); offset(a) = a m - a (a + 1) / 2
    let offset = |a: usize| a * m - a * (a + 1) / 2;
    let (mut lo, mut hi) = (0, m - 1);
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if offset(mid) <= t {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, lo + 1 + t - offset(lo))
}

fn column_pairs(m: usize, max_pairs: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let total = m * (m - 1) / 2;
    if total <= max_pairs {
        (0..total).map(|t| decode_pair(t, m)).collect()
    } else {
        let mut ts = sample(rng, total, max_pairs).into_vec();
        ts.sort_unstable();
        ts.into_iter().map(|t| decode_pair(t, m)).collect()
    }
}

/// Stacks memory rows over batch rows and standardizes every column.
fn standardized_columns(fm: &Array, memory: &GlobalMemory) -> Vec<Vec<f64>> {
    let m = fm.shape()[1];
    let mut cols = vec![Vec::new(); m];
    for src in memory.features().into_iter().chain(std::iter::once(fm)) {
        for row in src.data().chunks(m) {
            for (j, &x) in row.iter().enumerate() {
                cols[j].push(x);
            }
        }
    }
    for c in cols.iter_mut() {
        let n = c.len() as f64;
        let mean = c.iter().sum::<f64>() / n;
        let sd = (c.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let inv = if sd > 1e-12 { 1.0 / sd } else { 0.0 };
        c.iter_mut().for_each(|x| *x = (*x - mean) * inv);
    }
    cols
}

/// Objective over `pairs` and its gradient with respect to the trailing
/// `n_batch` weights.
fn objective_and_grad(
    fa: &[Option<Array>],
    fb: &[Option<Array>],
    pairs: &[(usize, usize)],
    w: &[f64],
    n_batch: usize,
) -> (f64, Vec<f64>) {
    let r = w.len();
    let first = r - n_batch;
    let mut total = 0.0;
    let mut grad = vec![0.0; n_batch];
    for &(a, b) in pairs {
        let (pa, pb) = (fa[a].as_ref().unwrap(), fb[b].as_ref().unwrap());
        let (p, q) = (pa.shape()[1], pb.shape()[1]);
        let (c, ma, mb) = cross_cov(pa, pb, w);
        total += c.iter().map(|x| x * x).sum::<f64>();
        // C mu_b and mu_a^T C are shared by every row
        let cmb: Vec<f64> = (0..p).map(|i| (0..q).map(|j| c[i * q + j] * mb[j]).sum()).collect();
        let mac: Vec<f64> = (0..q).map(|j| (0..p).map(|i| ma[i] * c[i * q + j]).sum()).collect();
        let (ad, bd) = (pa.data(), pb.data());
        for k in 0..n_batch {
            let row = first + k;
            let uk = &ad[row * p..(row + 1) * p];
            let vk = &bd[row * q..(row + 1) * q];
            let mut s = 0.0;
            for i in 0..p {
                let cv: f64 = (0..q).map(|j| c[i * q + j] * vk[j]).sum();
                s += uk[i] * (cv - cmb[i]);
            }
            s -= (0..q).map(|j| mac[j] * vk[j]).sum::<f64>();
            grad[k] += 2.0 / r as f64 * s;
        }
    }
    (total, grad)
}

/// Fits weights for the batch rows of `fm: [n, m]` so its feature columns
/// become pairwise independent, with memory rows stacked on top under their
/// frozen weights.
pub fn optimize_weights(fm: &Array, memory: &GlobalMemory, cfg: &SceConfig) -> Result<Reweighting> {
    cfg.validate()?;
    if fm.ndim() != 2 || fm.shape()[0] == 0 {
        return Err(Error::Shape(format!("feature matrix must be [n, m], got {:?}", fm.shape())));
    }
    let (n, m) = (fm.shape()[0], fm.shape()[1]);
    if m == 0 {
        return Err(Error::Config("feature matrix has no columns".into()));
    }
    if !fm.all_finite() {
        return Err(Error::NonFinite("sce features"));
    }
    if let Some(mem) = memory.features() {
        if mem.shape()[1] != m {
            return Err(Error::Shape(format!("memory width {} but batch width {}", mem.shape()[1], m)));
        }
    }
    let mut full: Vec<f64> = memory.weights().to_vec();
    let first = full.len();
    full.resize(first + n, 1.0);
    let mut trace = Vec::new();
    if m < 2 {
        return Ok(Reweighting {
            weights: full[first..].to_vec(),
            objective: trace,
        });
    }
    let cols = standardized_columns(fm, memory);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ memory.iteration().wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for balancing in (1..=cfg.balancing_epochs).rev() {
        let bx = RffBank::draw(balancing, &mut rng);
        let by = RffBank::draw(balancing, &mut rng);
        let pairs = column_pairs(m, cfg.max_pairs, &mut rng);
        let mut fa: Vec<Option<Array>> = vec![None; m];
        let mut fb: Vec<Option<Array>> = vec![None; m];
        for &(a, b) in &pairs {
            if fa[a].is_none() {
                fa[a] = Some(rff_map(&cols[a], &bx));
            }
            if fb[b].is_none() {
                fb[b] = Some(rff_map(&cols[b], &by));
            }
        }
        for _ in 0..cfg.steps {
            let (obj, grad) = objective_and_grad(&fa, &fb, &pairs, &full, n);
            trace.push(obj);
            let batch = &mut full[first..];
            for (x, gk) in batch.iter_mut().zip(&grad) {
                *x -= cfg.lr * gk;
            }
            project_weights(batch);
        }
    }
    let weights = full[first..].to_vec();
    if weights.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sample weights"));
    }
    Ok(Reweighting { weights, objective: trace })
}
