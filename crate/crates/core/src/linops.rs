//! Circulant convolution operators diagonalised by the 2D DFT.
//!
//! A [`CirculantOp`] is periodic convolution with a small kernel on a fixed
//! `rows x cols` grid. Signals are flattened row-major. Because the operator
//! is diagonal in the Fourier basis (`A = F^-1 diag(spectrum) F`), products
//! with `A`, `A*` and the data-term resolvent `(tau A*A + I)^-1` all cost two
//! FFTs.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{check_positive, Error, Result};

/// Planned forward/inverse transforms for one grid shape.
#[derive(Clone)]
struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    /// Unnormalised inverse; callers divide by `rows * cols`.
    fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.row_inv, &self.col_inv);
    }

    fn run(&self, buf: &mut [Complex64], row: &Arc<dyn Fft<f64>>, col: &Arc<dyn Fft<f64>>) {
        let (rows, cols) = (self.rows, self.cols);
        let scratch_len = row.get_inplace_scratch_len().max(col.get_inplace_scratch_len());
        let mut scratch = vec![Complex64::default(); scratch_len];
        if cols > 1 {
            for r in buf.chunks_exact_mut(cols) {
                row.process_with_scratch(r, &mut scratch);
            }
        }
        if rows > 1 {
            let mut column = vec![Complex64::default(); rows];
            for c in 0..cols {
                for r in 0..rows {
                    column[r] = buf[r * cols + c];
                }
                col.process_with_scratch(&mut column, &mut scratch);
                for r in 0..rows {
                    buf[r * cols + c] = column[r];
                }
            }
        }
    }
}

/// Periodic convolution operator `A` with its cached DFT spectrum.
///
/// Immutable after construction and `Send + Sync`; FFT scratch space is
/// allocated per call.
#[derive(Clone)]
pub struct CirculantOp {
    kernel: Array2<f64>,
    shape: (usize, usize),
    spectrum: Vec<Complex64>,
    /// `|spectrum|^2`, the eigenvalues of `A*A`.
    power: Vec<f64>,
    fft: Fft2,
}

impl fmt::Debug for CirculantOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CirculantOp")
            .field("kernel", &self.kernel.dim())
            .field("shape", &self.shape)
            .finish()
    }
}

impl CirculantOp {
    /// Builds the operator for `kernel` acting on a `shape` grid.
    ///
    /// The kernel is anchored at tap `((kh - 1) / 2, (kw - 1) / 2)`, so odd
    /// kernels are centred and even kernels anchor at the lower middle tap.
    pub fn new(kernel: Array2<f64>, shape: (usize, usize)) -> Result<Self> {
        let (rows, cols) = shape;
        let (kh, kw) = kernel.dim();
        if rows == 0 || cols == 0 {
            return Err(Error::dim("circulant grid", "nonempty grid", format!("{rows}x{cols}")));
        }
        if kh == 0 || kw == 0 || kh > rows || kw > cols {
            return Err(Error::dim(
                "circulant kernel",
                format!("nonempty kernel within {rows}x{cols}"),
                format!("{kh}x{kw}"),
            ));
        }
        if kernel.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("kernel", "entries must be finite"));
        }

        let (ca, cb) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut spectrum = vec![Complex64::default(); rows * cols];
        for ((a, b), &tap) in kernel.indexed_iter() {
            let r = (a + rows - ca) % rows;
            let c = (b + cols - cb) % cols;
            spectrum[r * cols + c].re += tap;
        }
        let fft = Fft2::new(rows, cols);
        fft.forward(&mut spectrum);
        let power = spectrum.iter().map(|l| l.norm_sqr()).collect();

        Ok(Self {
            kernel,
            shape,
            spectrum,
            power,
            fft,
        })
    }

    /// `p x p` box blur with taps `1 / p^2`.
    pub fn uniform(p: usize, shape: (usize, usize)) -> Result<Self> {
        if p == 0 {
            return Err(Error::param("blur size", "must be >= 1"));
        }
        let tap = 1.0 / (p * p) as f64;
        Self::new(Array2::from_elem((p, p), tap), shape)
    }

    pub fn identity(shape: (usize, usize)) -> Result<Self> {
        Self::new(Array2::ones((1, 1)), shape)
    }

    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Number of pixels on the grid.
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// DFT eigenvalues, row-major on the grid.
    pub fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    /// Eigenvalues `|spectrum|^2` of `A*A`.
    pub fn power_spectrum(&self) -> &[f64] {
        &self.power
    }

    /// `A x`.
    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check(x.len())?;
        Ok(self.filter(x, |k, c| c * self.spectrum[k]))
    }

    /// `A* y`, using the conjugate spectrum.
    pub fn apply_adjoint(&self, y: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check(y.len())?;
        Ok(self.filter(y, |k, c| c * self.spectrum[k].conj()))
    }

    /// `A*A x`.
    pub fn apply_normal(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check(x.len())?;
        Ok(self.filter(x, |k, c| c * self.power[k]))
    }

    /// Multiplies `x` by the real Fourier multiplier `diag`.
    ///
    /// `diag` must be symmetric under `k -> -k` for the result to be real,
    /// which holds for any function of [`Self::power_spectrum`].
    pub fn apply_fourier_multiplier(&self, x: ArrayView1<'_, f64>, diag: &[f64]) -> Result<Array1<f64>> {
        self.check(x.len())?;
        if diag.len() != self.len() {
            return Err(Error::dim("fourier multiplier", self.len(), diag.len()));
        }
        Ok(self.filter(x, |k, c| c * diag[k]))
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(Error::dim(
                "circulant operand",
                format!("{} ({}x{})", self.len(), self.shape.0, self.shape.1),
                len,
            ));
        }
        Ok(())
    }

    fn filter(&self, x: ArrayView1<'_, f64>, mul: impl Fn(usize, Complex64) -> Complex64) -> Array1<f64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.forward(&mut buf);
        for (k, c) in buf.iter_mut().enumerate() {
            *c = mul(k, *c);
        }
        self.fft.inverse(&mut buf);
        let scale = 1.0 / self.len() as f64;
        debug_assert!({
            let peak = buf.iter().fold(1.0f64, |m, c| m.max(c.re.abs()));
            // Non-finite input propagates; callers report it.
            buf.iter().any(|c| !c.re.is_finite()) || buf.iter().all(|c| c.im.abs() <= 1e-9 * peak)
        });
        buf.iter().map(|c| c.re * scale).collect()
    }
}

/// The data-term resolvent `(tau A*A + I)^-1` of a circulant operator.
#[derive(Debug, Clone)]
pub struct Resolvent<'a> {
    tau: f64,
    op: &'a CirculantOp,
    /// `1 / (tau |Λ|^2 + 1)`, each in `(0, 1]`.
    inv_spectrum: Vec<f64>,
}

impl<'a> Resolvent<'a> {
    /// `tau = 0` is accepted and gives the identity.
    pub fn new(op: &'a CirculantOp, tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(Error::param("tau", format!("must be finite and >= 0, got {tau}")));
        }
        let inv_spectrum = op.power.iter().map(|&p| 1.0 / (tau * p + 1.0)).collect();
        Ok(Self { tau, op, inv_spectrum })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn op(&self) -> &CirculantOp {
        self.op
    }

    pub fn inv_spectrum(&self) -> &[f64] {
        &self.inv_spectrum
    }

    /// Solves `(tau A*A + I) u = x`.
    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.op.apply_fourier_multiplier(x, &self.inv_spectrum)
    }

    /// `d/dtau (tau A*A + I)^-1`, Fourier multiplier `-|Λ|^2 / (tau |Λ|^2 + 1)^2`.
    pub fn apply_tau_derivative(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let diag: Vec<f64> = self
            .op
            .power
            .iter()
            .zip(&self.inv_spectrum)
            .map(|(&p, &inv)| -p * inv * inv)
            .collect();
        self.op.apply_fourier_multiplier(x, &diag)
    }

    /// `d/dtau [tau (tau A*A + I)^-1]`, Fourier multiplier `1 / (tau |Λ|^2 + 1)^2`.
    pub fn apply_scaled_tau_derivative(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let diag: Vec<f64> = self.inv_spectrum.iter().map(|&inv| inv * inv).collect();
        self.op.apply_fourier_multiplier(x, &diag)
    }
}

/// Checks `tau > 0` before building a resolvent for a network layer.
pub(crate) fn layer_resolvent(op: &CirculantOp, tau: f64) -> Result<Resolvent<'_>> {
    check_positive("tau", tau)?;
    Resolvent::new(op, tau)
}
