use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ActionBounds, OfflineDataset, Transition};
use crate::error::{DacError, Result};

/// Single-step environment with Gaussian behavior `N(mu_beta, sigma_beta)` and
/// reward `-0.5 a^T M a + c^T a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqSpec {
    pub n: usize,
    pub mu_beta: Vec<f64>,
    /// Row-major covariance.
    pub sigma_beta: Vec<Vec<f64>>,
    /// Row-major reward curvature.
    pub m: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    /// Half-width of the action box.
    pub bound: f64,
    pub seed: u64,
}

impl Default for LqSpec {
    fn default() -> Self {
        LqSpec {
            n: 10_000,
            mu_beta: vec![0.0, 0.0],
            sigma_beta: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            m: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            c: vec![1.0, 0.0],
            bound: 5.0,
            seed: 0,
        }
    }
}

fn to_matrix(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(DacError::Shape(format!("{what} must be {dim}x{dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-12 * scale
}

/// Multivariate Gaussian with cached precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_det: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(cov.clone()).ok_or_else(|| DacError::Domain("covariance is not positive-definite".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(Gaussian { mean, cov, precision, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// `grad_x log N(x; mean, cov) = -cov^{-1} (x - mean)`
    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let d = DVector::from_column_slice(x) - &self.mean;
        (-(&self.precision * d)).iter().copied().collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = DVector::from_column_slice(x) - &self.mean;
        let quad = d.dot(&(&self.precision * &d));
        -0.5 * (quad + self.log_det + self.dim() as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Law of `sqrt(abar) x + sqrt(1 - abar) eps` for `x` drawn from `self`.
    pub fn noised(&self, alpha_bar: f64) -> Result<Gaussian> {
        let n = self.dim();
        Gaussian::new(
            &self.mean * alpha_bar.sqrt(),
            &self.cov * alpha_bar + DMatrix::identity(n, n) * (1.0 - alpha_bar),
        )
    }
}

/// Closed-form quantities of the linear-quadratic environment.
#[derive(Debug, Clone, PartialEq)]
pub struct LqOracle {
    spec: LqSpec,
    behavior: Gaussian,
    m: DMatrix<f64>,
    c: DVector<f64>,
}

impl LqOracle {
    pub fn new(spec: LqSpec) -> Result<Self> {
        let dim = spec.mu_beta.len();
        if dim == 0 || spec.c.len() != dim {
            return Err(DacError::Shape("LQ mean and linear term must share a non-zero dimension".into()));
        }
        if !(spec.bound > 0.0) {
            return Err(DacError::Range("action bound must be positive".into()));
        }
        let sigma = to_matrix(&spec.sigma_beta, dim, "behavior covariance")?;
        let m = to_matrix(&spec.m, dim, "reward curvature")?;
        if !is_symmetric(&sigma) || !is_symmetric(&m) {
            return Err(DacError::Domain("covariance and curvature must be symmetric".into()));
        }
        let min_eig = SymmetricEigen::new(m.clone()).eigenvalues.min();
        if min_eig < -1e-12 {
            return Err(DacError::Domain(format!("reward curvature has negative eigenvalue {min_eig}")));
        }
        let behavior = Gaussian::new(DVector::from_vec(spec.mu_beta.clone()), sigma)?;
        let c = DVector::from_vec(spec.c.clone());
        Ok(LqOracle { spec, behavior, m, c })
    }

    pub fn spec(&self) -> &LqSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.behavior.dim()
    }

    pub fn bounds(&self) -> ActionBounds {
        ActionBounds::symmetric(self.dim(), self.spec.bound)
    }

    pub fn behavior(&self) -> &Gaussian {
        &self.behavior
    }

    pub fn q(&self, a: &[f64]) -> f64 {
        let a = DVector::from_column_slice(a);
        -0.5 * a.dot(&(&self.m * &a)) + self.c.dot(&a)
    }

    pub fn q_grad(&self, a: &[f64]) -> Vec<f64> {
        let a = DVector::from_column_slice(a);
        (&self.c - &self.m * a).iter().copied().collect()
    }

    /// Maximizer of `E[Q] - eta KL(pi || pi_beta)`: Gaussian with precision
    /// `Sigma_beta^{-1} + M / eta` and mean solving
    /// `(Sigma_beta^{-1} + M / eta) mu = Sigma_beta^{-1} mu_beta + c / eta`.
    pub fn optimum(&self, eta: f64) -> Result<Gaussian> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(DacError::Range(format!("eta must be positive and finite, got {eta}")));
        }
        let p = self.behavior.precision() + &self.m / eta;
        let rhs = self.behavior.precision() * &self.behavior.mean + &self.c / eta;
        let chol = Cholesky::new(p).ok_or_else(|| DacError::Domain("optimal precision is not positive-definite".into()))?;
        let mean = chol.solve(&rhs);
        let mut cov = chol.inverse();
        cov = (&cov + cov.transpose()) * 0.5;
        Gaussian::new(mean, cov)
    }

    /// Noise that an ideal predictor for the optimal policy outputs at `x_t`:
    /// `-sqrt(1 - abar) * score of the noised optimum`.
    pub fn target_noise(&self, x_t: &[f64], alpha_bar: f64, eta: f64) -> Result<Vec<f64>> {
        let s = self.optimum(eta)?.noised(alpha_bar)?.score(x_t);
        Ok(s.into_iter().map(|v| -(1.0 - alpha_bar).sqrt() * v).collect())
    }

    /// Gradient of the smooth extension of Q to noisy actions, defined by
    /// `eta * (score of noised optimum - score of noised behavior)`; it
    /// coincides with `q_grad` at `alpha_bar = 1`.
    pub fn extended_q_grad(&self, x_t: &[f64], alpha_bar: f64, eta: f64) -> Result<Vec<f64>> {
        let opt = self.optimum(eta)?.noised(alpha_bar)?.score(x_t);
        let beh = self.behavior.noised(alpha_bar)?.score(x_t);
        Ok(opt.iter().zip(&beh).map(|(o, b)| eta * (o - b)).collect())
    }

    /// Row-wise [`LqOracle::target_noise`] with one `alpha_bar` per row.
    pub fn target_noise_batch(&self, x_t: ArrayView2<f64>, alpha_bars: &[f64], eta: f64) -> Result<Array2<f64>> {
        self.rowwise(x_t, alpha_bars, |x, ab| self.target_noise(x, ab, eta))
    }

    /// Row-wise [`LqOracle::extended_q_grad`] with one `alpha_bar` per row.
    pub fn extended_q_grad_batch(&self, x_t: ArrayView2<f64>, alpha_bars: &[f64], eta: f64) -> Result<Array2<f64>> {
        self.rowwise(x_t, alpha_bars, |x, ab| self.extended_q_grad(x, ab, eta))
    }

    fn rowwise<F>(&self, x_t: ArrayView2<f64>, alpha_bars: &[f64], f: F) -> Result<Array2<f64>>
    where
        F: Fn(&[f64], f64) -> Result<Vec<f64>>,
    {
        if x_t.ncols() != self.dim() || x_t.nrows() != alpha_bars.len() {
            return Err(DacError::Shape("rows and noise levels must match the oracle dimension".into()));
        }
        let mut out = Array2::zeros(x_t.raw_dim());
        for (i, row) in x_t.rows().into_iter().enumerate() {
            let v = f(&row.to_vec(), alpha_bars[i])?;
            for (j, x) in v.into_iter().enumerate() {
                out[[i, j]] = x;
            }
        }
        Ok(out)
    }
}

/// Single-step dataset from the behavior Gaussian (conditioned on a constant
/// zero scalar state) together with its oracle. Draws falling outside the
/// action box are redrawn.
pub fn generate_lq_dataset(spec: &LqSpec) -> Result<(OfflineDataset, LqOracle)> {
    if spec.n == 0 {
        return Err(DacError::Range("LQ sample count must be at least 1".into()));
    }
    let oracle = LqOracle::new(spec.clone())?;
    let bounds = oracle.bounds();
    let l = Cholesky::new(oracle.behavior.cov.clone()).expect("validated covariance").l();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = oracle.dim();
    let mut transitions = Vec::with_capacity(spec.n);
    while transitions.len() < spec.n {
        let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        let a: Vec<f64> = (&oracle.behavior.mean + &l * z).iter().copied().collect();
        if !bounds.contains(&a) {
            continue;
        }
        let r = oracle.q(&a);
        transitions.push(Transition { state: vec![0.0], action: a, reward: r, next_state: vec![0.0], terminal: true });
    }
    let ds = OfflineDataset::from_transitions(&transitions, (0..spec.n).collect(), 1, bounds)?;
    Ok((ds, oracle))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_with(m: Vec<Vec<f64>>, c: Vec<f64>) -> LqSpec {
        LqSpec { m, c, ..LqSpec::default() }
    }

    #[test]
    fn hand_solved_optimum() {
        let o = LqOracle::new(LqSpec::default()).unwrap();
        let g = o.optimum(1.0).unwrap();
        assert!((g.mean[0] - 0.5).abs() < 1e-12 && g.mean[1].abs() < 1e-12);
        assert!((g.cov[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_q_gives_behavior() {
        let o = LqOracle::new(spec_with(vec![vec![0.0, 0.0], vec![0.0, 0.0]], vec![0.0, 0.0])).unwrap();
        let g = o.optimum(1.0).unwrap();
        assert!((&g.mean - &o.behavior().mean).amax() < 1e-15);
        assert!((&g.cov - &o.behavior().cov).amax() < 1e-15);
    }

    #[test]
    fn large_eta_gives_behavior_mean() {
        let o = LqOracle::new(LqSpec { mu_beta: vec![0.3, -0.2], ..LqSpec::default() }).unwrap();
        let g = o.optimum(1e9).unwrap();
        assert!((&g.mean - &o.behavior().mean).amax() < 1e-6);
    }

    #[test]
    fn indefinite_curvature_is_a_domain_error() {
        let r = LqOracle::new(spec_with(vec![vec![1.0, 0.0], vec![0.0, -1.0]], vec![0.0, 0.0]));
        assert!(matches!(r, Err(DacError::Domain(_))));
    }

    #[test]
    fn grid_search_agrees_with_closed_form_mode() {
        let spec = LqSpec {
            mu_beta: vec![0.2, -0.1],
            sigma_beta: vec![vec![1.0, 0.3], vec![0.3, 0.5]],
            m: vec![vec![2.0, 0.5], vec![0.5, 1.0]],
            c: vec![1.0, -0.5],
            ..LqSpec::default()
        };
        let o = LqOracle::new(spec).unwrap();
        let eta = 0.7;
        let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
        for i in 0..=600 {
            for j in 0..=600 {
                let a = [-3.0 + 0.01 * i as f64, -3.0 + 0.01 * j as f64];
                let v = o.behavior().log_density(&a) + o.q(&a) / eta;
                if v > best.0 {
                    best = (v, a);
                }
            }
        }
        let mu = o.optimum(eta).unwrap().mean;
        assert!((best.1[0] - mu[0]).abs() <= 0.01 && (best.1[1] - mu[1]).abs() <= 0.01, "{best:?} vs {mu}");
    }

    #[test]
    fn extension_matches_q_gradient_at_clean_actions() {
        let o = LqOracle::new(LqSpec::default()).unwrap();
        let a = [0.3, -0.7];
        let e = o.extended_q_grad(&a, 1.0, 2.0).unwrap();
        let g = o.q_grad(&a);
        assert!((e[0] - g[0]).abs() < 1e-12 && (e[1] - g[1]).abs() < 1e-12);
    }

    #[test]
    fn dataset_matches_behavior_moments() {
        let (ds, o) = generate_lq_dataset(&LqSpec { n: 20_000, ..LqSpec::default() }).unwrap();
        let mean = ds.actions().mean_axis(ndarray::Axis(0)).unwrap();
        assert!(mean[0].abs() < 0.03 && mean[1].abs() < 0.03);
        for i in 0..10 {
            assert_eq!(ds.rewards()[i], o.q(ds.actions().row(i).as_slice().unwrap()));
        }
    }

    #[test]
    fn noised_score_matches_finite_difference_of_log_density() {
        let o = LqOracle::new(LqSpec::default()).unwrap();
        let g = o.optimum(1.0).unwrap().noised(0.4).unwrap();
        let x = [0.2, 0.9];
        let s = g.score(&x);
        let h = 1e-6;
        for k in 0..2 {
            let mut p = x;
            let mut m = x;
            p[k] += h;
            m[k] -= h;
            let fd = (g.log_density(&p) - g.log_density(&m)) / (2.0 * h);
            assert!((fd - s[k]).abs() < 1e-7);
        }
    }
}
