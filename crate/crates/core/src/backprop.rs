//! Analytic gradients of the squared-error loss through the unrolled network.
//!
//! Every product with a layer Jacobian is a vector-Jacobian product; no
//! `(N + 2P)`-square matrix is ever formed. Per layer the backward pass uses
//! two products with `L` and two with `L*`, one resolvent and the two
//! `tau`-derivative multipliers `B` and `C` in the Fourier domain:
//!
//! ```text
//! B_ii = -|Λ_ii|^2 / (tau |Λ_ii|^2 + 1)^2      (d/dtau of the resolvent)
//! C_ii =  1 / (tau |Λ_ii|^2 + 1)^2             (d/dtau of tau * resolvent)
//! ```

use ndarray::{Array1, Array2, ArrayView1, Zip};

use crate::error::{check_len, Error, Result};
use crate::linops::{layer_resolvent, CirculantOp};
use crate::pdnet::{LayerCache, LayerParams, NetworkParams};
use crate::prox::{dprox_dsigma, subgrad_r};

/// Gradient of the loss with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub d_tau: f64,
    pub d_sigma: f64,
    pub d_l: Array2<f64>,
}

impl LayerGrads {
    pub fn zeros(p: usize, n: usize) -> Self {
        Self {
            d_tau: 0.0,
            d_sigma: 0.0,
            d_l: Array2::zeros((p, n)),
        }
    }

    fn add_assign(&mut self, other: &LayerGrads) {
        self.d_tau += other.d_tau;
        self.d_sigma += other.d_sigma;
        self.d_l += &other.d_l;
    }
}

/// Gradients for the whole network, indexed like `NetworkParams::layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(net: &NetworkParams) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads::zeros(l.rows(), l.cols()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    /// First non-finite entry as `(layer, parameter)`.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.layers.iter().enumerate().find_map(|(k, g)| {
            if !g.d_tau.is_finite() {
                Some((k, "tau"))
            } else if !g.d_sigma.is_finite() {
                Some((k, "sigma"))
            } else if g.d_l.iter().any(|v| !v.is_finite()) {
                Some((k, "L"))
            } else {
                None
            }
        })
    }
}

/// Running adjoint: gradient of the loss with respect to a layer's output
/// `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjoint {
    pub t_x: Array1<f64>,
    pub t_y: Array1<f64>,
}

/// `(|x_hat - x_true|^2 / I, 2/I (x_hat - x_true))`.
pub fn loss_and_grad(
    x_hat: ArrayView1<'_, f64>,
    x_true: ArrayView1<'_, f64>,
    batch_count: usize,
) -> Result<(f64, Array1<f64>)> {
    check_len("loss operands", x_true.len(), x_hat.len())?;
    if batch_count == 0 {
        return Err(Error::param("batch_count", "must be >= 1"));
    }
    let inv = 1.0 / batch_count as f64;
    let diff = &x_hat - &x_true;
    let loss = diff.dot(&diff) * inv;
    Ok((loss, diff * (2.0 * inv)))
}

/// Backward pass through one layer. `z` is the observed patch of the sample
/// that produced `cache`.
pub fn layer_backward(
    params: &LayerParams,
    op: &CirculantOp,
    z: ArrayView1<'_, f64>,
    cache: &LayerCache,
    adj_out: &Adjoint,
) -> Result<(Adjoint, LayerGrads)> {
    let atz = op.apply_adjoint(z)?;
    backward_with_data(params, op, &atz, cache, adj_out)
}

pub(crate) fn backward_with_data(
    params: &LayerParams,
    op: &CirculantOp,
    atz: &Array1<f64>,
    cache: &LayerCache,
    adj_out: &Adjoint,
) -> Result<(Adjoint, LayerGrads)> {
    let (p, n) = params.l.dim();
    check_len("cache primal", n, cache.x_in.len())?;
    check_len("cache dual", p, cache.v2.len())?;
    check_len("adjoint primal", n, adj_out.t_x.len())?;
    let last = cache.position.is_last();
    if !last {
        check_len("adjoint dual", p, adj_out.t_y.len())?;
    }
    let (tau, sigma) = (params.tau, params.sigma);
    let l = &params.l;
    let res = layer_resolvent(op, tau)?;

    // x_out = R s, s = w1 + sigma tau L* w2. R is symmetric.
    let g_s = res.apply(adj_out.t_x.view())?;
    // w1 = v1 (r1 = 1), so the v1-adjoint equals g_s.
    let l_gs = l.dot(&g_s);
    let g_w2 = &l_gs * (sigma * tau);
    let (r2, r3) = subgrad_r(cache.v2.view(), cache.v3.view(), sigma)?;
    let g_v2 = &g_w2 * &r2;
    let g_v3 = if last { Array1::zeros(p) } else { &adj_out.t_y * &r3 };

    // Input adjoint: transpose of the G rows
    //   v1 = (I - tau sigma L*L) x - tau L* y,  v2 = L x + y / sigma,  v3 = sigma L x + y.
    let dual_mix = &g_v2 + &(&g_v3 * sigma) - &(&l_gs * (tau * sigma));
    let t_x = &g_s + &l.t().dot(&dual_mix);
    let t_y = if cache.position.is_first() {
        Array1::zeros(p)
    } else {
        &g_v2 / sigma + &g_v3 - &(&l_gs * tau)
    };

    // dtau. G block (-sigma L*L, -L*) and db/dtau = A* z:
    //   <g_s, -L* v3 + A* z>.
    // H block (F^-1 B F, F^-1 C F sigma L*) acting on (w1, w2).
    let b_gx = res.apply_tau_derivative(adj_out.t_x.view())?;
    let c_gx = res.apply_scaled_tau_derivative(adj_out.t_x.view())?;
    let d_tau = -l_gs.dot(&cache.v3) + g_s.dot(atz) + b_gx.dot(cache.w1()) + sigma * c_gx.dot(&cache.lt_w2);

    // dsigma. G blocks (-tau L*L, -sigma^-2 on y, L), the threshold
    // dependence of prox_{h/sigma}, and the H block tau R L*.
    let dprox = dprox_dsigma(cache.v2.view(), sigma)?;
    let d_sigma = -tau * l_gs.dot(&cache.lx) - g_v2.dot(&cache.y_in) / (sigma * sigma)
        + g_v3.dot(&cache.lx)
        + g_w2.dot(&dprox)
        + tau * l_gs.dot(&cache.w2);

    // dL as two rank-one terms. Occurrences of L:
    //   -tau sigma L*L x  ->  -tau sigma [(L g_s) x^T + (L x) g_s^T]
    //   -tau L* y         ->  -tau y g_s^T
    //   L x, sigma L x    ->  (g_v2 + sigma g_v3) x^T
    //   sigma tau L* w2   ->  sigma tau w2 g_s^T
    // and -tau sigma L x - tau y = -tau v3.
    let row_x = &dual_mix;
    let row_gs = &cache.w2 * (sigma * tau) - &(&cache.v3 * tau);
    let mut d_l = Array2::zeros((p, n));
    Zip::from(d_l.rows_mut())
        .and(row_x)
        .and(&row_gs)
        .for_each(|mut row, &a, &b| {
            Zip::from(&mut row)
                .and(&cache.x_in)
                .and(&g_s)
                .for_each(|d, &x, &g| *d = a * x + b * g);
        });
    if let Some(mask) = &params.mask {
        Zip::from(&mut d_l).and(mask).for_each(|d, &m| {
            if !m {
                *d = 0.0;
            }
        });
    }

    Ok((Adjoint { t_x, t_y }, LayerGrads { d_tau, d_sigma, d_l }))
}

/// Loss of one sample and its gradient with respect to every parameter.
///
/// `batch_count` is the `I` of the averaged loss; summing the returned
/// gradients over a batch gives the batch gradient.
pub fn network_backward(
    net: &NetworkParams,
    caches: &[LayerCache],
    z: ArrayView1<'_, f64>,
    x_true: ArrayView1<'_, f64>,
    batch_count: usize,
) -> Result<(f64, ParamGrads)> {
    if caches.len() != net.depth() {
        return Err(Error::dim("layer caches", net.depth(), caches.len()));
    }
    let atz = net.op.apply_adjoint(z)?;
    let x_hat = &caches[caches.len() - 1].x_out;
    let (loss, grad) = loss_and_grad(x_hat.view(), x_true, batch_count)?;

    let mut adj = Adjoint {
        t_x: grad,
        t_y: Array1::zeros(0),
    };
    let mut layers = Vec::with_capacity(net.depth());
    for (params, cache) in net.layers.iter().zip(caches).rev() {
        let (next, g) = backward_with_data(params, &net.op, &atz, cache, &adj)?;
        layers.push(g);
        adj = next;
    }
    layers.reverse();
    Ok((loss, ParamGrads { layers }))
}

/// Forward and backward for one sample.
pub fn sample_gradient(
    net: &NetworkParams,
    z: ArrayView1<'_, f64>,
    x_true: ArrayView1<'_, f64>,
    batch_count: usize,
) -> Result<(f64, ParamGrads)> {
    let (_, caches) = crate::pdnet::network_forward(net, z)?;
    network_backward(net, &caches, z, x_true, batch_count)
}
