//! Variable impedance from demonstrations.
//!
//! Demonstrations are time-aligned with dynamic time warping, pooled as
//! `(t, x)` samples, fitted with a full-covariance Gaussian mixture by EM,
//! and queried with Gaussian mixture regression on time. The retrieved
//! variance sets the stiffness: consistent demonstrations give stiff gains,
//! dispersed ones give compliant gains.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

pub use crate::so3::{exp as exp_so3, log as log_so3};

/// Smallest eigenvalue allowed in a mixture covariance.
pub const COVARIANCE_FLOOR: f64 = 1e-8;
/// Components lighter than this are considered collapsed.
pub const MIN_WEIGHT: f64 = 1e-6;

/// One demonstration: `times` (s) and one row of `values` per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Demo {
    pub times: DVector<f64>,
    pub values: DMatrix<f64>,
}

impl Demo {
    pub fn new(times: DVector<f64>, values: DMatrix<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Validation("demonstration has no samples".into()));
        }
        crate::error::check_len("demonstration samples", times.len(), values.nrows())?;
        if times.as_slice().windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Validation("demonstration timestamps must increase strictly".into()));
        }
        if !values.iter().chain(times.iter()).all(|v| v.is_finite()) {
            return Err(Error::Validation("demonstration contains non-finite values".into()));
        }
        Ok(Self { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// `n` samples uniformly spaced over the same time span, by linear
    /// interpolation of every channel.
    pub fn resample(&self, n: usize) -> Demo {
        let len = self.len();
        if n == len {
            return self.clone();
        }
        let t0 = self.times[0];
        let t1 = self.times[len - 1];
        let times = DVector::from_fn(n, |i, _| {
            if n == 1 {
                t0
            } else {
                t0 + (t1 - t0) * i as f64 / (n - 1) as f64
            }
        });
        let mut values = DMatrix::zeros(n, self.dim());
        for (i, &t) in times.iter().enumerate() {
            let k = self.times.as_slice().partition_point(|&s| s <= t).clamp(1, len.max(2) - 1);
            if len == 1 {
                values.row_mut(i).copy_from(&self.values.row(0));
                continue;
            }
            let (ta, tb) = (self.times[k - 1], self.times[k]);
            let w = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
            let row = self.values.row(k - 1) * (1.0 - w) + self.values.row(k) * w;
            values.row_mut(i).copy_from(&row);
        }
        Demo { times, values }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoSet {
    pub demos: Vec<Demo>,
    pub sample_period: f64,
}

impl DemoSet {
    pub fn new(demos: Vec<Demo>, sample_period: f64) -> Result<Self> {
        let Some(first) = demos.first() else {
            return Err(Error::Validation("demonstration set is empty".into()));
        };
        let d = first.dim();
        if demos.iter().any(|x| x.dim() != d) {
            return Err(Error::Validation("demonstrations differ in dimension".into()));
        }
        if !(sample_period > 0.0) {
            return Err(Error::Validation("sample period must be positive".into()));
        }
        Ok(Self { demos, sample_period })
    }

    pub fn dim(&self) -> usize {
        self.demos[0].dim()
    }

    /// All samples as rows `(t, x)`.
    pub fn pooled(&self) -> DMatrix<f64> {
        let total: usize = self.demos.iter().map(Demo::len).sum();
        let d = self.dim();
        let mut data = DMatrix::zeros(total, d + 1);
        let mut r = 0;
        for demo in &self.demos {
            for i in 0..demo.len() {
                data[(r, 0)] = demo.times[i];
                data.view_mut((r, 1), (1, d)).copy_from(&demo.values.row(i));
                r += 1;
            }
        }
        data
    }
}

/// Warping path (index pairs) and accumulated Euclidean cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Warping {
    pub cost: f64,
    pub path: Vec<(usize, usize)>,
}

/// Classic dynamic-programming DTW between the rows of `a` and `b`.
pub fn dtw(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Warping> {
    let (n, m) = (a.nrows(), b.nrows());
    if n == 0 || m == 0 {
        return Err(Error::Validation("cannot warp an empty sequence".into()));
    }
    crate::error::check_len("sequence dimension", a.ncols(), b.ncols())?;
    let dist = |i: usize, j: usize| (a.row(i) - b.row(j)).norm();
    let mut acc = DMatrix::from_element(n, m, f64::INFINITY);
    for i in 0..n {
        for j in 0..m {
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => acc[(0, j - 1)],
                (_, 0) => acc[(i - 1, 0)],
                _ => acc[(i - 1, j - 1)].min(acc[(i - 1, j)]).min(acc[(i, j - 1)]),
            };
            acc[(i, j)] = best + dist(i, j);
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            // prefer the diagonal on ties
            let diag = acc[(i - 1, j - 1)];
            let up = acc[(i - 1, j)];
            let left = acc[(i, j - 1)];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(Warping {
        cost: acc[(n - 1, m - 1)],
        path,
    })
}

/// Aligns every demonstration to the first one and resamples to its length.
///
/// For each reference index the matched sample closest to the reference
/// sample is kept, and the aligned demo takes the reference timestamps.
pub fn dtw_align(set: &DemoSet) -> Result<DemoSet> {
    if set.demos.len() < 2 {
        return Err(Error::Validation(format!(
            "alignment needs at least 2 demonstrations, got {}",
            set.demos.len()
        )));
    }
    let reference = &set.demos[0];
    let n = reference.len();
    let mut out = vec![reference.clone()];
    for demo in &set.demos[1..] {
        if demo.is_empty() {
            return Err(Error::Validation("empty demonstration".into()));
        }
        let w = dtw(&reference.values, &demo.values)?;
        let mut best: Vec<Option<(f64, usize)>> = vec![None; n];
        for &(i, j) in &w.path {
            let d = (reference.values.row(i) - demo.values.row(j)).norm();
            if best[i].is_none_or(|(bd, _)| d < bd) {
                best[i] = Some((d, j));
            }
        }
        let mut values = DMatrix::zeros(n, demo.dim());
        for (i, b) in best.iter().enumerate() {
            let (_, j) = b.expect("every reference index lies on the warping path");
            values.row_mut(i).copy_from(&demo.values.row(j));
        }
        out.push(Demo {
            times: reference.times.clone(),
            values,
        });
    }
    DemoSet::new(out, set.sample_period)
}

/// Gaussian mixture over `(t, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Range of the input (first) coordinate seen in the data.
    pub input_range: (f64, f64),
}

impl GmmModel {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::Validation("mixture component lists disagree".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("mixture weights sum to {sum}")));
        }
        for s in &self.covariances {
            if (s - s.transpose()).amax() > 1e-12 {
                return Err(Error::Validation("covariance is not symmetric".into()));
            }
            let min = s.clone().symmetric_eigenvalues().min();
            if min < COVARIANCE_FLOOR * (1.0 - 1e-6) {
                return Err(Error::Validation(format!("covariance eigenvalue {min:e} below floor")));
            }
        }
        Ok(())
    }

    /// Average log-likelihood of the rows of `data`.
    pub fn average_log_likelihood(&self, data: &DMatrix<f64>) -> f64 {
        let comps = self.components().expect("validated covariances factor");
        let mut total = 0.0;
        let mut logp = vec![0.0; self.k()];
        for r in 0..data.nrows() {
            let x = data.row(r).transpose();
            for (k, c) in comps.iter().enumerate() {
                logp[k] = self.weights[k].ln() + c.log_density(&x);
            }
            total += log_sum_exp(&logp);
        }
        total / data.nrows() as f64
    }

    fn components(&self) -> Result<Vec<GaussianEval>> {
        self.means
            .iter()
            .zip(&self.covariances)
            .map(|(m, s)| GaussianEval::new(m.clone(), s))
            .collect()
    }
}

struct GaussianEval {
    mean: DVector<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianEval {
    fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let ch = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Fit("covariance is not positive definite".into()))?;
        let l = ch.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = mean.len() as f64;
        Ok(Self {
            mean,
            chol_l: l,
            log_norm: -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det),
        })
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let z = self
            .chol_l
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a nonzero diagonal");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Raises eigenvalues of a symmetric matrix to at least `floor`.
fn floor_covariance(s: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= floor {
        return sym;
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmOptions {
    /// Stop when the average log-likelihood improves by less than this.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 500,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmFit {
    pub model: GmmModel,
    /// Average log-likelihood of the data before each M-step, then after the last one.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
fn kmeans_pp(data: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let n = data.nrows();
    let mut centres = vec![data.row(rng.random_range(0..n)).transpose()];
    let mut d2 = vec![f64::INFINITY; n];
    while centres.len() < k {
        let last = centres.last().expect("at least one centre");
        for (r, d) in d2.iter_mut().enumerate() {
            *d = d.min((data.row(r).transpose() - last).norm_squared());
        }
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut pick = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (r, d) in d2.iter().enumerate() {
                if pick < *d {
                    chosen = r;
                    break;
                }
                pick -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centres.push(data.row(idx).transpose());
    }
    centres
}

fn weighted_moments(data: &DMatrix<f64>, resp: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = data.ncols();
    let nk: f64 = resp.iter().sum();
    let mut mean = DVector::zeros(d);
    for (r, w) in resp.iter().enumerate() {
        mean += data.row(r).transpose() * *w;
    }
    mean /= nk;
    let mut cov = DMatrix::zeros(d, d);
    for (r, w) in resp.iter().enumerate() {
        let diff = data.row(r).transpose() - &mean;
        cov.ger(*w, &diff, &diff, 1.0);
    }
    cov /= nk;
    (nk, mean, cov)
}

/// Fits a `k`-component full-covariance mixture to the rows of `data`.
pub fn em_fit(data: &DMatrix<f64>, k: usize, opts: &EmOptions) -> Result<EmFit> {
    let (n, d) = data.shape();
    if k == 0 {
        return Err(Error::Fit("component count must be at least 1".into()));
    }
    if n < k * (d + 2) {
        return Err(Error::Fit(format!(
            "{n} samples are too few for {k} components in {d} dimensions (need {})",
            k * (d + 2)
        )));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Fit("data contains non-finite values".into()));
    }
    let col0 = data.column(0);
    let input_range = (col0.min(), col0.max());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // initial parameters from a hard assignment to k-means++ centres
    let centres = kmeans_pp(data, k, &mut rng);
    let (_, global_mean, global_cov) = weighted_moments(data, &vec![1.0; n]);
    let global_cov = floor_covariance(&global_cov, COVARIANCE_FLOOR);
    let mut assign = vec![vec![0.0; n]; k];
    for r in 0..n {
        let x = data.row(r).transpose();
        let best = (0..k)
            .min_by(|&a, &b| {
                (&x - &centres[a])
                    .norm_squared()
                    .total_cmp(&(&x - &centres[b]).norm_squared())
            })
            .expect("k >= 1");
        assign[best][r] = 1.0;
    }
    let mut model = GmmModel {
        weights: vec![0.0; k],
        means: vec![global_mean.clone(); k],
        covariances: vec![global_cov.clone(); k],
        input_range,
    };
    for j in 0..k {
        let count: f64 = assign[j].iter().sum();
        if count >= 2.0 {
            let (nk, mean, cov) = weighted_moments(data, &assign[j]);
            model.weights[j] = nk / n as f64;
            model.means[j] = mean;
            model.covariances[j] = floor_covariance(&cov, COVARIANCE_FLOOR);
        } else {
            model.weights[j] = count.max(1.0) / n as f64;
            model.means[j] = centres[j].clone();
        }
    }
    let total: f64 = model.weights.iter().sum();
    model.weights.iter_mut().for_each(|w| *w /= total);

    let mut history = Vec::new();
    let mut resp = vec![vec![0.0; n]; k];
    let mut logp = vec![0.0; k];
    let mut reinitialized = vec![false; k];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iter {
        iterations += 1;
        // E-step
        let comps = model.components()?;
        let mut ll = 0.0;
        for r in 0..n {
            let x = data.row(r).transpose();
            for j in 0..k {
                logp[j] = model.weights[j].ln() + comps[j].log_density(&x);
            }
            let lse = log_sum_exp(&logp);
            ll += lse;
            for j in 0..k {
                resp[j][r] = (logp[j] - lse).exp();
            }
        }
        let ll = ll / n as f64;
        if let Some(&prev) = history.last() {
            if ll - prev < opts.tol {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);

        // M-step
        for j in 0..k {
            let (nk, mean, cov) = weighted_moments(data, &resp[j]);
            let weight = nk / n as f64;
            if !(weight >= MIN_WEIGHT) {
                if reinitialized[j] {
                    return Err(Error::Fit(format!(
                        "component {j} collapsed twice (weight {weight:e}) after {iterations} iterations"
                    )));
                }
                log::warn!("re-initializing collapsed mixture component {j}");
                reinitialized[j] = true;
                let r = rng.random_range(0..n);
                model.means[j] = data.row(r).transpose();
                model.covariances[j] = global_cov.clone();
                model.weights[j] = 1.0 / k as f64;
                continue;
            }
            model.weights[j] = weight;
            model.means[j] = mean;
            model.covariances[j] = floor_covariance(&cov, COVARIANCE_FLOOR);
        }
        let total: f64 = model.weights.iter().sum();
        model.weights.iter_mut().for_each(|w| *w /= total);
    }
    if !converged {
        history.push(model.average_log_likelihood(data));
    }
    Ok(EmFit {
        model,
        log_likelihood: history,
        iterations,
        converged,
    })
}

/// Conditional mean and covariance of `x` given the first coordinate `t`.
///
/// `t` is clamped to the data range. The covariance combines the
/// within-component spread and the spread of the component means.
pub fn gmr(model: &GmmModel, t: f64) -> (DVector<f64>, DMatrix<f64>) {
    let t = t.clamp(model.input_range.0, model.input_range.1);
    let d = model.dim() - 1;
    let k = model.k();
    let mut logh = vec![0.0; k];
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        let mu = &model.means[j];
        let s = &model.covariances[j];
        let stt = s[(0, 0)];
        let sxt = s.view((1, 0), (d, 1)).into_owned();
        let dt = t - mu[0];
        logh[j] = model.weights[j].ln() - 0.5 * ((2.0 * std::f64::consts::PI * stt).ln() + dt * dt / stt);
        means.push(mu.rows(1, d).into_owned() + &sxt * (dt / stt));
        covs.push(s.view((1, 1), (d, d)).into_owned() - &sxt * sxt.transpose() / stt);
    }
    let lse = log_sum_exp(&logh);
    let h: Vec<f64> = logh.iter().map(|l| (l - lse).exp()).collect();
    let mut mean = DVector::zeros(d);
    for j in 0..k {
        mean += &means[j] * h[j];
    }
    let mut cov = DMatrix::zeros(d, d);
    for j in 0..k {
        let dm = &means[j] - &mean;
        cov += (&covs[j] + &dm * dm.transpose()) * h[j];
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    (mean, cov)
}

/// Diagonal stiffness `clamp(scale / (sigma_ii + 1e-8), k_min, k_max)`.
pub fn stiffness_from_covariance(sigma: &DMatrix<f64>, k_min: f64, k_max: f64, scale: f64) -> DVector<f64> {
    DVector::from_fn(sigma.nrows(), |i, _| (scale / (sigma[(i, i)] + 1e-8)).clamp(k_min, k_max))
}

/// Time-indexed stiffness and critically damped damping gains.
#[derive(Clone, Debug, PartialEq)]
pub struct StiffnessSchedule {
    pub times: Vec<f64>,
    pub kp: Vec<DVector<f64>>,
    pub kd: Vec<DVector<f64>>,
    pub k_min: f64,
    pub k_max: f64,
}

impl StiffnessSchedule {
    pub fn new(times: Vec<f64>, kp: Vec<DVector<f64>>, k_min: f64, k_max: f64) -> Result<Self> {
        if times.is_empty() || times.len() != kp.len() {
            return Err(Error::Validation("stiffness schedule needs one gain vector per time".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Validation("stiffness schedule times must increase".into()));
        }
        if !(k_min >= 0.0 && k_min < k_max) {
            return Err(Error::Validation(format!("invalid stiffness bounds [{k_min}, {k_max}]")));
        }
        for k in &kp {
            if k.iter().any(|v| !(*v >= k_min && *v <= k_max)) {
                return Err(Error::Validation("stiffness outside its bounds".into()));
            }
        }
        let kd = kp.iter().map(|k| k.map(|v| 2.0 * v.sqrt())).collect();
        Ok(Self {
            times,
            kp,
            kd,
            k_min,
            k_max,
        })
    }

    pub fn dim(&self) -> usize {
        self.kp[0].len()
    }

    /// Gains at `t`, interpolating stiffness linearly and recomputing damping.
    pub fn at(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let n = self.times.len();
        let kp = if t <= self.times[0] {
            self.kp[0].clone()
        } else if t >= self.times[n - 1] {
            self.kp[n - 1].clone()
        } else {
            let i = self.times.partition_point(|&s| s <= t);
            let w = (t - self.times[i - 1]) / (self.times[i] - self.times[i - 1]);
            (&self.kp[i - 1] * (1.0 - w) + &self.kp[i] * w).map(|v| v.clamp(self.k_min, self.k_max))
        };
        let kd = kp.map(|v| 2.0 * v.sqrt());
        (kp, kd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearnOptions {
    pub components: usize,
    pub em: EmOptions,
    pub k_min: f64,
    pub k_max: f64,
    /// Stiffness assigned to the median retrieved variance of each channel group.
    pub target_gain: f64,
    /// Number of schedule samples.
    pub samples: usize,
}

impl Default for LearnOptions {
    fn default() -> Self {
        Self {
            components: 4,
            em: EmOptions::default(),
            k_min: 50.0,
            k_max: 800.0,
            target_gain: 200.0,
            samples: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LearnReport {
    pub fit: EmFit,
    pub schedule: StiffnessSchedule,
    /// Scales used for the position and orientation channel groups.
    pub scales: (f64, f64),
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aligns, fits and converts to a stiffness schedule.
///
/// Channels are split into a position group (first three) and the rest;
/// each group gets its own scale so its median variance maps to `target_gain`.
pub fn learn(set: &DemoSet, opts: &LearnOptions) -> Result<LearnReport> {
    let aligned = dtw_align(set)?;
    let data = aligned.pooled();
    let fit = em_fit(&data, opts.components, &opts.em)?;
    let (t0, t1) = fit.model.input_range;
    let n = opts.samples.max(2);
    let times: Vec<f64> = (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect();
    let sigmas: Vec<DMatrix<f64>> = times.iter().map(|&t| gmr(&fit.model, t).1).collect();
    let d = set.dim();
    let split = d.min(3);
    let group_scale = |range: std::ops::Range<usize>| -> f64 {
        if range.is_empty() {
            return 1.0;
        }
        let vars: Vec<f64> = sigmas
            .iter()
            .flat_map(|s| range.clone().map(move |i| s[(i, i)]))
            .collect();
        opts.target_gain * (median(vars) + 1e-8)
    };
    let pos_scale = group_scale(0..split);
    let rot_scale = group_scale(split..d);
    let kp = sigmas
        .iter()
        .map(|s| {
            let a = stiffness_from_covariance(s, opts.k_min, opts.k_max, pos_scale);
            let b = stiffness_from_covariance(s, opts.k_min, opts.k_max, rot_scale);
            DVector::from_fn(d, |i, _| if i < split { a[i] } else { b[i] })
        })
        .collect();
    let schedule = StiffnessSchedule::new(times, kp, opts.k_min, opts.k_max)?;
    Ok(LearnReport {
        fit,
        schedule,
        scales: (pos_scale, rot_scale),
    })
}

/// Synthetic probe-sweep demonstrations: `m` runs of `n` samples at `period`,
/// each `(position, orientation as exponential coordinates)`. Runs differ by
/// a smooth time warp and by Gaussian jitter whose spread grows in the middle
/// of the sweep.
pub fn synthetic_demos(m: usize, n: usize, period: f64, seed: u64) -> Result<DemoSet> {
    if m == 0 || n < 2 {
        return Err(Error::Validation("need at least one demo of two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let base = crate::simulator::board_rotation();
    let mut demos = Vec::with_capacity(m);
    for _ in 0..m {
        let warp = 0.06 * (rng.random::<f64>() - 0.5);
        let mut values = DMatrix::zeros(n, 6);
        let times = DVector::from_fn(n, |i, _| i as f64 * period);
        for i in 0..n {
            let s = i as f64 / (n - 1) as f64;
            // monotone warp of the phase, fixed end points
            let phase = s + warp * (std::f64::consts::PI * s).sin();
            let spread = 0.3 + 0.7 * (std::f64::consts::PI * s).sin().powi(2);
            let pos = Vector3::new(
                0.6 + 0.002 * spread * unit.sample(&mut rng),
                0.01 * (2.0 * std::f64::consts::PI * phase).sin() + 0.002 * spread * unit.sample(&mut rng),
                0.6 + 0.3 * phase + 0.002 * spread * unit.sample(&mut rng),
            );
            let tilt = Vector3::new(
                0.05 * (std::f64::consts::PI * phase).sin() + 0.01 * spread * unit.sample(&mut rng),
                0.01 * spread * unit.sample(&mut rng),
                0.01 * spread * unit.sample(&mut rng),
            );
            let rot = crate::so3::exp(&tilt) * base;
            let w = log_so3(&rot);
            for c in 0..3 {
                values[(i, c)] = pos[c];
                values[(i, 3 + c)] = w[c];
            }
        }
        demos.push(Demo::new(times, values)?);
    }
    DemoSet::new(demos, period)
}

/// Reads a demonstration CSV with header `t,x1,..,xD`.
pub fn read_demo_csv(path: &Path) -> Result<Demo> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut times = Vec::new();
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| Error::Config(format!("{} row {}: {e}", path.display(), line + 2)))?;
        if vals.len() < 2 {
            return Err(Error::Config(format!("{} row {}: need t and at least one value", path.display(), line + 2)));
        }
        times.push(vals[0]);
        rows.push(vals[1..].to_vec());
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{}: no samples", path.display())));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Config(format!("{}: rows differ in length", path.display())));
    }
    let values = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    Demo::new(DVector::from_vec(times), values)
}

pub fn write_demo_csv(path: &Path, demo: &Demo) -> Result<()> {
    let err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=demo.dim()).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(err)?;
    for i in 0..demo.len() {
        let mut row = vec![format!("{}", demo.times[i])];
        row.extend(demo.values.row(i).iter().map(|v| format!("{v}")));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
