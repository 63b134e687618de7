//! The unrolled primal-dual network.
//!
//! Layer `k` is one Chambolle-Pock iteration with `theta = 0` and its own
//! parameters `(tau, sigma, L)`:
//!
//! ```text
//! v1 = x - tau sigma L*L x - tau L* y + tau A* z      w1 = v1
//! v2 = L x + y / sigma                                w2 = prox_{h/sigma}(v2)
//! v3 = sigma L x + y                                  w3 = prox_{sigma h*}(v3)
//! x+ = (tau A*A + I)^-1 (w1 + sigma tau L* w2)        y+ = w3
//! ```
//!
//! The network input is `x = A* z`, `y = 0`; the last layer emits only `x`.

mod features;

pub use features::{build_feature_operator, FeatureBlock, FeatureDesign};

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{check_len, Error, Result};
use crate::linops::{layer_resolvent, CirculantOp};
use crate::prox::{prox_l1, prox_l1_conjugate};

/// Smallest `sigma` for which `1/sigma` is formed.
pub const SIGMA_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub tau: f64,
    pub sigma: f64,
    /// Analysis operator, `P x N`.
    pub l: Array2<f64>,
    /// Support of `L`; entries outside it are held at zero.
    pub mask: Option<Array2<bool>>,
}

impl LayerParams {
    pub fn new(tau: f64, sigma: f64, l: Array2<f64>) -> Self {
        Self {
            tau,
            sigma,
            l,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Array2<bool>) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn rows(&self) -> usize {
        self.l.nrows()
    }

    pub fn cols(&self) -> usize {
        self.l.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::param("tau", format!("must be finite and > 0, got {}", self.tau)));
        }
        if !(self.sigma.is_finite() && self.sigma >= SIGMA_GUARD) {
            return Err(Error::param(
                "sigma",
                format!("must be finite and >= {SIGMA_GUARD}, got {}", self.sigma),
            ));
        }
        if let Some(mask) = &self.mask {
            if mask.dim() != self.l.dim() {
                return Err(Error::dim(
                    "layer mask",
                    format!("{:?}", self.l.dim()),
                    format!("{:?}", mask.dim()),
                ));
            }
        }
        Ok(())
    }

    /// Zeroes `L` outside the mask.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            ndarray::Zip::from(&mut self.l).and(mask).for_each(|v, &m| {
                if !m {
                    *v = 0.0;
                }
            });
        }
    }

    /// `tau sigma |L|^2` with `|L|` from power iteration.
    pub fn step_product(&self) -> f64 {
        let norm = crate::cpsolver::default_spectral_norm(&self.l);
        self.tau * self.sigma * norm * norm
    }
}

/// Where a layer sits in the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    First,
    Middle,
    Last,
    /// A single-layer network: first and last at once.
    Only,
}

impl Position {
    pub fn of(index: usize, layers: usize) -> Self {
        match (index == 0, index + 1 == layers) {
            (true, true) => Position::Only,
            (true, false) => Position::First,
            (false, true) => Position::Last,
            (false, false) => Position::Middle,
        }
    }

    /// The incoming dual variable is fixed at zero.
    pub fn is_first(self) -> bool {
        matches!(self, Position::First | Position::Only)
    }

    /// Only the primal variable is emitted.
    pub fn is_last(self) -> bool {
        matches!(self, Position::Last | Position::Only)
    }
}

/// Intermediates of one layer kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    pub position: Position,
    pub x_in: Array1<f64>,
    pub y_in: Array1<f64>,
    /// `L x_in`.
    pub lx: Array1<f64>,
    pub v1: Array1<f64>,
    pub v2: Array1<f64>,
    pub v3: Array1<f64>,
    pub w2: Array1<f64>,
    /// Absent on the last layer.
    pub w3: Option<Array1<f64>>,
    /// `L* w2`.
    pub lt_w2: Array1<f64>,
    pub x_out: Array1<f64>,
}

impl LayerCache {
    /// The identity branch: `w1 = v1`.
    pub fn w1(&self) -> &Array1<f64> {
        &self.v1
    }

    pub fn y_out(&self) -> Option<&Array1<f64>> {
        self.w3.as_ref()
    }
}

/// Runs one layer from `(x, y)`. For a first layer `y` is ignored. Returns
/// `(x_out, y_out, cache)`, with `y_out = None` for a last layer.
pub fn layer_forward(
    params: &LayerParams,
    op: &CirculantOp,
    z: ArrayView1<'_, f64>,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
    position: Position,
) -> Result<(Array1<f64>, Option<Array1<f64>>, LayerCache)> {
    let atz = op.apply_adjoint(z)?;
    let cache = forward_with_data(params, op, &atz, x, y, position)?;
    Ok((cache.x_out.clone(), cache.w3.clone(), cache))
}

pub(crate) fn forward_with_data(
    params: &LayerParams,
    op: &CirculantOp,
    atz: &Array1<f64>,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
    position: Position,
) -> Result<LayerCache> {
    params.validate()?;
    let (p, n) = params.l.dim();
    check_len("layer operator columns", op.len(), n)?;
    check_len("layer data", n, atz.len())?;
    check_len("layer primal input", n, x.len())?;
    let y_in = if position.is_first() {
        Array1::zeros(p)
    } else {
        check_len("layer dual input", p, y.len())?;
        y.to_owned()
    };
    let (tau, sigma) = (params.tau, params.sigma);
    let l = &params.l;

    let lx = l.dot(&x);
    // v3 = sigma L x + y, and v2 = v3 / sigma.
    let v3 = &lx * sigma + &y_in;
    let v2 = &lx + &(&y_in / sigma);
    // v1 = x - tau L* (sigma L x + y) + tau A* z
    let v1 = &x - &(l.t().dot(&v3) * tau) + &(atz * tau);

    let w2 = prox_l1(v2.view(), 1.0 / sigma)?;
    let w3 = if position.is_last() {
        None
    } else {
        Some(prox_l1_conjugate(v3.view(), sigma)?)
    };
    let lt_w2 = l.t().dot(&w2);

    let res = layer_resolvent(op, tau)?;
    let x_out = res.apply((&v1 + &(&lt_w2 * (sigma * tau))).view())?;

    Ok(LayerCache {
        position,
        x_in: x.to_owned(),
        y_in,
        lx,
        v1,
        v2,
        v3,
        w2,
        w3,
        lt_w2,
        x_out,
    })
}

/// All learnable layers plus the shared degradation operator.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    /// Degradation operator on the patch grid.
    pub op: CirculantOp,
    pub design: FeatureDesign,
}

impl NetworkParams {
    pub fn new(layers: Vec<LayerParams>, op: CirculantOp, design: FeatureDesign) -> Result<Self> {
        let net = Self { layers, op, design };
        net.validate()?;
        Ok(net)
    }

    /// Copies `layer` into `k` tied layers.
    pub fn tied(layer: LayerParams, k: usize, op: CirculantOp, design: FeatureDesign) -> Result<Self> {
        Self::new(vec![layer; k], op, design)
    }

    /// Number of layers `K`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn patch_side(&self) -> usize {
        self.design.patch_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::param("layers", "network needs at least one layer"));
        }
        self.design.validate()?;
        let n = self.op.len();
        let side = self.design.patch_side;
        if self.op.shape() != (side, side) {
            return Err(Error::dim(
                "network operator grid",
                format!("{side}x{side}"),
                format!("{}x{}", self.op.shape().0, self.op.shape().1),
            ));
        }
        let p = self.layers[0].rows();
        for layer in &self.layers {
            layer.validate()?;
            if layer.l.dim() != (p, n) {
                return Err(Error::dim(
                    "layer operator",
                    format!("{p}x{n}"),
                    format!("{:?}", layer.l.dim()),
                ));
            }
        }
        Ok(())
    }

    /// Whether every layer carries a support mask.
    pub fn masked(&self) -> bool {
        self.layers.iter().all(|l| l.mask.is_some())
    }
}

/// Full forward pass from `x = A* z`, `y = 0`. Returns the primal output and
/// one cache per layer.
pub fn network_forward(net: &NetworkParams, z: ArrayView1<'_, f64>) -> Result<(Array1<f64>, Vec<LayerCache>)> {
    check_len("network input", net.op.len(), z.len())?;
    let atz = net.op.apply_adjoint(z)?;
    let k = net.depth();
    let mut caches: Vec<LayerCache> = Vec::with_capacity(k);
    let mut x = atz.clone();
    let mut y = Array1::zeros(0);
    for (i, layer) in net.layers.iter().enumerate() {
        let cache = forward_with_data(layer, &net.op, &atz, x.view(), y.view(), Position::of(i, k))?;
        x = cache.x_out.clone();
        if let Some(w3) = &cache.w3 {
            y = w3.clone();
        }
        caches.push(cache);
    }
    Ok((x, caches))
}

/// Forward pass without keeping caches.
pub fn predict(net: &NetworkParams, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    network_forward(net, z).map(|(x, _)| x)
}
