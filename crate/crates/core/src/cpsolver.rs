//! Reference Chambolle-Pock solver for
//!
//! ```text
//! min_x  1/2 |A x - z|^2 + h(L x)
//! ```
//!
//! with a circulant `A`, so the primal step is an exact FFT resolvent.
//! One iteration is
//!
//! ```text
//! y+    = prox_{sigma h*}(y + sigma L xbar)
//! x+    = (tau A*A + I)^-1 (tau A* z + x - tau L* y+)
//! xbar+ = x+ + theta (x+ - x)
//! ```

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::linops::{CirculantOp, Resolvent};
use crate::prox::ProxFamily;

/// Power iteration on `L^T L`; returns an estimate of the spectral norm `|L|`.
pub fn spectral_norm(l: &Array2<f64>, max_iter: usize, tol: f64) -> f64 {
    if l.nrows() == 0 {
        return 0.0;
    }
    power_iteration(l.ncols(), max_iter, tol, |v| l.t().dot(&l.dot(v)))
}

/// `sqrt` of the top eigenvalue of the PSD map `normal`, from a fixed start.
fn power_iteration(n: usize, max_iter: usize, tol: f64, normal: impl Fn(&Array1<f64>) -> Array1<f64>) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = Array1::from_iter((0..n).map(|_| rng.random_range(-1.0f64..1.0)));
    let nv = v.dot(&v).sqrt();
    v /= nv;
    let mut estimate = 0.0;
    for _ in 0..max_iter.max(1) {
        let w = normal(&v);
        let nw = w.dot(&w).sqrt();
        if nw == 0.0 {
            return 0.0;
        }
        let next = nw.sqrt();
        v = w / nw;
        let done = (next - estimate).abs() <= tol * next;
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}

/// Default power-iteration budget for step-size checks.
pub fn default_spectral_norm(l: &Array2<f64>) -> f64 {
    spectral_norm(l, 50, 1e-6)
}

/// Compressed rows of `L`. Analysis operators such as finite differences
/// have a handful of nonzeros per row, and the solver only needs products.
#[derive(Debug, Clone)]
struct SparseRows {
    cols: usize,
    starts: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    fn from_dense(m: &Array2<f64>) -> Self {
        let mut starts = Vec::with_capacity(m.nrows() + 1);
        let (mut indices, mut values) = (Vec::new(), Vec::new());
        starts.push(0);
        for row in m.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            starts.push(indices.len());
        }
        Self {
            cols: m.ncols(),
            starts,
            indices,
            values,
        }
    }

    fn rows(&self) -> usize {
        self.starts.len() - 1
    }

    fn dot(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        Array1::from_iter(
            self.starts
                .windows(2)
                .map(|r| (r[0]..r[1]).map(|k| self.values[k] * x[self.indices[k]]).sum::<f64>()),
        )
    }

    fn t_dot(&self, y: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.cols);
        for (i, r) in self.starts.windows(2).enumerate() {
            for k in r[0]..r[1] {
                out[self.indices[k]] += self.values[k] * y[i];
            }
        }
        out
    }
}

/// `1/2 |A x - z|^2 + h(L x)`.
#[derive(Debug, Clone)]
pub struct CpProblem {
    pub op: CirculantOp,
    pub z: Array1<f64>,
    pub prox: ProxFamily,
    l: Array2<f64>,
    sparse: SparseRows,
    norm: f64,
}

impl CpProblem {
    pub fn new(op: CirculantOp, z: Array1<f64>, l: Array2<f64>) -> Result<Self> {
        check_len("observation z", op.len(), z.len())?;
        check_len("analysis operator columns", op.len(), l.ncols())?;
        let sparse = SparseRows::from_dense(&l);
        let norm = if sparse.rows() == 0 {
            0.0
        } else {
            power_iteration(l.ncols(), 50, 1e-6, |v| sparse.t_dot(sparse.dot(v.view()).view()))
        };
        Ok(Self {
            op,
            z,
            prox: ProxFamily::L1,
            l,
            sparse,
            norm,
        })
    }

    pub fn l(&self) -> &Array2<f64> {
        &self.l
    }

    /// Power-iteration estimate of `|L|`, computed once at construction.
    pub fn l_norm(&self) -> f64 {
        self.norm
    }

    pub fn objective(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        objective(self, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpSettings {
    pub tau: f64,
    pub sigma: f64,
    pub theta: f64,
    pub max_iter: usize,
    /// Stop when `|x+ - x| / max(|x|, 1) < tol`.
    pub tol: f64,
}

impl CpSettings {
    /// Validated settings: `tau, sigma > 0`, `theta` in `[0, 1]` and
    /// `tau sigma |L|^2 < 1`.
    pub fn new(tau: f64, sigma: f64, theta: f64, l: &Array2<f64>) -> Result<Self> {
        let settings = Self::unchecked(tau, sigma, theta);
        settings.validate(l)?;
        Ok(settings)
    }

    /// `theta = 1`, `tau = sigma = 0.99 / |L|`.
    pub fn default_for(l: &Array2<f64>) -> Self {
        let norm = default_spectral_norm(l);
        let step = if norm > 0.0 { 0.99 / norm } else { 1.0 };
        Self::unchecked(step, step, 1.0)
    }

    /// Settings without the step-size check, for replaying learned layers.
    pub fn unchecked(tau: f64, sigma: f64, theta: f64) -> Self {
        Self {
            tau,
            sigma,
            theta,
            max_iter: 20_000,
            tol: 1e-8,
        }
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn validate(&self, l: &Array2<f64>) -> Result<()> {
        self.validate_with_norm(default_spectral_norm(l))
    }

    /// As [`CpSettings::validate`], with `|L|` already known.
    pub fn validate_with_norm(&self, norm: f64) -> Result<()> {
        crate::error::check_positive("tau", self.tau)?;
        crate::error::check_positive("sigma", self.sigma)?;
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::param("theta", format!("must lie in [0, 1], got {}", self.theta)));
        }
        let product = self.tau * self.sigma * norm * norm;
        if product >= 1.0 {
            return Err(Error::StepSizeConstraint {
                tau: self.tau,
                sigma: self.sigma,
                norm,
                product,
            });
        }
        Ok(())
    }
}

/// Primal, dual and extrapolated primal iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct CpState {
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    pub x_bar: Array1<f64>,
}

impl CpState {
    /// `x = xbar = x0`, `y = 0`.
    pub fn start(problem: &CpProblem, x0: Array1<f64>) -> Self {
        Self {
            x_bar: x0.clone(),
            x: x0,
            y: Array1::zeros(problem.sparse.rows()),
        }
    }
}

pub fn objective(problem: &CpProblem, x: ArrayView1<'_, f64>) -> Result<f64> {
    check_len("objective x", problem.op.len(), x.len())?;
    let residual = problem.op.apply(x)? - &problem.z;
    let lx = problem.sparse.dot(x);
    Ok(0.5 * residual.dot(&residual) + problem.prox.value(lx.view()))
}

/// One Chambolle-Pock iteration.
pub fn cp_iterate(problem: &CpProblem, settings: &CpSettings, state: &CpState) -> Result<CpState> {
    let res = Resolvent::new(&problem.op, settings.tau)?;
    let atz = problem.op.apply_adjoint(problem.z.view())?;
    step(problem, settings, &res, &atz, state)
}

fn step(
    problem: &CpProblem,
    settings: &CpSettings,
    res: &Resolvent<'_>,
    atz: &Array1<f64>,
    state: &CpState,
) -> Result<CpState> {
    let (n, p) = (problem.op.len(), problem.sparse.rows());
    check_len("cp state x", n, state.x.len())?;
    check_len("cp state xbar", n, state.x_bar.len())?;
    check_len("cp state y", p, state.y.len())?;
    let CpSettings { tau, sigma, theta, .. } = *settings;

    let dual_arg = &state.y + &(problem.sparse.dot(state.x_bar.view()) * sigma);
    let y = problem.prox.prox_conjugate(dual_arg.view(), sigma)?;
    let primal_arg = atz * tau + &state.x - &(problem.sparse.t_dot(y.view()) * tau);
    let x = res.apply(primal_arg.view())?;
    let x_bar = &x + &((&x - &state.x) * theta);
    Ok(CpState { x, y, x_bar })
}

#[derive(Debug, Clone)]
pub struct CpSolution {
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    /// Objective after each iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates from `(x0, 0, x0)` until the relative primal change drops below
/// `settings.tol` or `settings.max_iter` is reached.
pub fn cp_solve(problem: &CpProblem, settings: &CpSettings, x0: Array1<f64>) -> Result<CpSolution> {
    check_len("cp x0", problem.op.len(), x0.len())?;
    settings.validate_with_norm(problem.norm)?;
    let res = Resolvent::new(&problem.op, settings.tau)?;
    let atz = problem.op.apply_adjoint(problem.z.view())?;

    let mut state = CpState::start(problem, x0);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < settings.max_iter {
        let next = step(problem, settings, &res, &atz, &state)?;
        iterations += 1;
        let change = (&next.x - &state.x).mapv(|d| d * d).sum().sqrt();
        let scale = state.x.dot(&state.x).sqrt().max(1.0);
        state = next;
        trace.push(objective(problem, state.x.view())?);
        if change / scale < settings.tol {
            converged = true;
            break;
        }
    }
    Ok(CpSolution {
        x: state.x,
        y: state.y,
        trace,
        iterations,
        converged,
    })
}
