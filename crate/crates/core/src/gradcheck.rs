//! Central finite-difference verification of the analytic gradients.
//!
//! A case is a random network, observation and target. It is rejected when
//! a perturbed evaluation changes any activation pattern (`r2`, `r3`): there
//! the loss has a kink and finite differences do not estimate the derivative.
//!
//! With the patterns fixed, `x(theta + h) - x(theta - h)` is carried through
//! the layers as a difference of each intermediate, so the central quotient
//! is not swamped by cancellation for entries with small derivatives.
//! [`naive_output_difference`] subtracts two forward passes instead and is
//! kept as a cross-check.

use ndarray::{Array1, ArrayView1};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backprop::{sample_gradient, ParamGrads};
use crate::cpsolver::spectral_norm;
use crate::error::{Error, Result};
use crate::imaging::Blur;
use crate::linops::Resolvent;
use crate::pdnet::{build_feature_operator, network_forward, FeatureDesign, LayerParams, NetworkParams};
use crate::prox::subgrad_r;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Tau,
    Sigma,
    L,
}

impl ParamKind {
    pub const ALL: [ParamKind; 3] = [ParamKind::Tau, ParamKind::Sigma, ParamKind::L];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Tau => "tau",
            ParamKind::Sigma => "sigma",
            ParamKind::L => "L",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSettings {
    /// Central difference step.
    pub step: f64,
    pub rel_tol: f64,
    /// Entries where both derivatives are below this are counted as exact.
    pub abs_floor: f64,
    /// In-support entries of `L` sampled per layer.
    pub l_samples: usize,
    /// Scales analytic derivatives of one group, for negative controls.
    pub corrupt: Option<(ParamKind, f64)>,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-6,
            rel_tol: 1e-5,
            abs_floor: 1e-10,
            l_samples: 16,
            corrupt: None,
        }
    }
}

/// How random cases are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseConfig {
    pub layers: usize,
    pub design: FeatureDesign,
    pub blur: Blur,
    pub l_std: f64,
    /// Multiplies `1/|L|` for the initial `tau` and `sigma`, before jitter.
    pub step_factor: f64,
    /// Noise added to the blurred target to form `z`.
    pub noise: f64,
    /// Random draws before giving up on finding a kink-free case.
    pub max_attempts: usize,
}

impl CaseConfig {
    /// 10 x 10 patches, 3 x 3 uniform blur.
    pub fn standard(layers: usize) -> Self {
        Self {
            layers,
            design: FeatureDesign::parse("f3s2n2+f5s5n2+f10s10n2", 10).expect("valid design"),
            blur: Blur::Uniform(3),
            l_std: 0.3,
            step_factor: 0.9,
            noise: 0.05,
            max_attempts: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub net: NetworkParams,
    pub z: Array1<f64>,
    pub x_true: Array1<f64>,
}

/// Network output and the `(r2, r3)` patterns of every layer.
type Patterns = (Array1<f64>, Vec<(Array1<f64>, Array1<f64>)>);

fn patterns(net: &NetworkParams, z: ArrayView1<'_, f64>) -> Result<Patterns> {
    let (x, caches) = network_forward(net, z)?;
    let mut out = Vec::with_capacity(caches.len());
    for (layer, cache) in net.layers.iter().zip(&caches) {
        let (r2, mut r3) = subgrad_r(cache.v2.view(), cache.v3.view(), layer.sigma)?;
        if cache.position.is_last() {
            r3.fill(0.0);
        }
        out.push((r2, r3));
    }
    Ok((x, out))
}

/// Smallest distance of any `v2` to `+-1/sigma` or non-final `v3` to `+-1`.
pub fn kink_distance(net: &NetworkParams, z: ArrayView1<'_, f64>) -> Result<f64> {
    let (_, caches) = network_forward(net, z)?;
    let mut dist = f64::INFINITY;
    for (layer, cache) in net.layers.iter().zip(&caches) {
        let t = 1.0 / layer.sigma;
        for v in &cache.v2 {
            dist = dist.min((v.abs() - t).abs());
        }
        if !cache.position.is_last() {
            for v in &cache.v3 {
                dist = dist.min((v.abs() - 1.0).abs());
            }
        }
    }
    Ok(dist)
}

/// Draws one case. Step sizes are jittered per layer so the layers are not
/// tied.
pub fn draw_case(config: &CaseConfig, seed: u64) -> Result<GradCheckCase> {
    let side = config.design.patch_side;
    let n = side * side;
    let op = config.blur.operator((side, side))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(config.layers);
    for k in 0..config.layers {
        let (l, mask) = build_feature_operator(
            &config.design,
            seed.wrapping_mul(31).wrapping_add(k as u64),
            config.l_std,
        )?;
        let norm = spectral_norm(&l, 200, 1e-10);
        let tau = config.step_factor / norm * rng.random_range(0.6..1.4);
        let sigma = config.step_factor / norm * rng.random_range(0.6..1.4);
        layers.push(LayerParams::new(tau, sigma, l).with_mask(mask));
    }
    let net = NetworkParams::new(layers, op.clone(), config.design.clone())?;
    let x_true = Array1::from_iter((0..n).map(|_| rng.random_range(0.0..1.0)));
    let z = op.apply(x_true.view())? + Array1::from_iter((0..n).map(|_| rng.random_range(-1.0..1.0) * config.noise));
    Ok(GradCheckCase { net, z, x_true })
}

/// `x(plus) - x(minus)` by subtracting two forward passes.
pub fn naive_output_difference(
    plus: &NetworkParams,
    minus: &NetworkParams,
    z: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    let (a, _) = network_forward(plus, z)?;
    let (b, _) = network_forward(minus, z)?;
    Ok(a - b)
}

/// `(x(minus), x(plus) - x(minus))` for two networks that share every
/// activation pattern, propagating the difference of each intermediate.
pub fn output_difference(
    plus: &NetworkParams,
    minus: &NetworkParams,
    z: ArrayView1<'_, f64>,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (x_minus, caches) = network_forward(minus, z)?;
    let atz = minus.op.apply_adjoint(z)?;
    let power = minus.op.power_spectrum();
    let n = atz.len();
    let mut dx = Array1::<f64>::zeros(n);
    let mut dy = Array1::<f64>::zeros(0);
    for ((lp, lm), cache) in plus.layers.iter().zip(&minus.layers).zip(&caches) {
        let p = lm.rows();
        if dy.is_empty() {
            dy = Array1::zeros(p);
        }
        let (tp, tm, sp, sm) = (lp.tau, lm.tau, lp.sigma, lm.sigma);
        let (d_tau, d_sigma) = (tp - tm, sp - sm);
        let d_l = &lp.l - &lm.l;

        let d_lx = lp.l.dot(&dx) + d_l.dot(&cache.x_in);
        let d_v3 = &d_lx * sp + &(&cache.lx * d_sigma) + &dy;
        let d_v2 = &d_lx + &(&dy / sp) - &(&cache.y_in * (d_sigma / (sp * sm)));
        let d_v1 =
            &dx - &(lp.l.t().dot(&d_v3) * tp) - &(d_l.t().dot(&cache.v3) * tp) - &(lm.l.t().dot(&cache.v3) * d_tau)
                + &(&atz * d_tau);

        let (r2, r3) = subgrad_r(cache.v2.view(), cache.v3.view(), sm)?;
        let shift = d_sigma / (sp * sm);
        let d_w2 = Array1::from_iter(
            d_v2.iter()
                .zip(&cache.v2)
                .zip(&r2)
                .map(|((&dv, &v), &r)| r * (dv + v.signum() * shift)),
        );
        let d_lt = lp.l.t().dot(&d_w2) + d_l.t().dot(&cache.w2);
        let d_prod = sp * d_tau + d_sigma * tm;
        let d_s = &d_v1 + &(&d_lt * (sp * tp)) + &(&cache.lt_w2 * d_prod);

        let s_minus = &cache.v1 + &(&cache.lt_w2 * (sm * tm));
        let res = Resolvent::new(&plus.op, tp)?;
        let d_res: Vec<f64> = power
            .iter()
            .map(|&q| -d_tau * q / ((tp * q + 1.0) * (tm * q + 1.0)))
            .collect();
        dx = res.apply(d_s.view())? + minus.op.apply_fourier_multiplier(s_minus.view(), &d_res)?;
        dy = &d_v3 * &r3;
    }
    Ok((x_minus, dx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub layer: usize,
    pub kind: ParamKind,
    /// Row and column for `L` entries.
    pub index: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self, kind: Option<ParamKind>) -> f64 {
        self.entries
            .iter()
            .filter(|e| kind.is_none_or(|k| e.kind == k))
            .map(|e| e.rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.rel_err <= tol)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < floor {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn analytic_value(grads: &ParamGrads, layer: usize, kind: ParamKind, index: Option<(usize, usize)>) -> f64 {
    let g = &grads.layers[layer];
    match kind {
        ParamKind::Tau => g.d_tau,
        ParamKind::Sigma => g.d_sigma,
        ParamKind::L => g.d_l[index.expect("L entries carry an index")],
    }
}

fn param_value(net: &NetworkParams, layer: usize, kind: ParamKind, index: Option<(usize, usize)>) -> f64 {
    let p = &net.layers[layer];
    match kind {
        ParamKind::Tau => p.tau,
        ParamKind::Sigma => p.sigma,
        ParamKind::L => p.l[index.expect("L entries carry an index")],
    }
}

fn perturbed(
    net: &NetworkParams,
    layer: usize,
    kind: ParamKind,
    index: Option<(usize, usize)>,
    delta: f64,
) -> NetworkParams {
    let mut out = net.clone();
    let p = &mut out.layers[layer];
    match kind {
        ParamKind::Tau => p.tau += delta,
        ParamKind::Sigma => p.sigma += delta,
        ParamKind::L => p.l[index.expect("L entries carry an index")] += delta,
    }
    out
}

/// Checks one case. Returns `None` when a perturbation crosses a kink.
pub fn check_case(case: &GradCheckCase, settings: &GradCheckSettings, seed: u64) -> Result<Option<GradCheckReport>> {
    let net = &case.net;
    let (_, grads) = sample_gradient(net, case.z.view(), case.x_true.view(), 1)?;
    let (_, base_patterns) = patterns(net, case.z.view())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut targets = Vec::new();
    for (k, layer) in net.layers.iter().enumerate() {
        targets.push((k, ParamKind::Tau, None));
        targets.push((k, ParamKind::Sigma, None));
        let support: Vec<(usize, usize)> = match &layer.mask {
            Some(mask) => mask.indexed_iter().filter(|(_, &m)| m).map(|(ix, _)| ix).collect(),
            None => layer.l.indexed_iter().map(|(ix, _)| ix).collect(),
        };
        let take = settings.l_samples.min(support.len());
        for i in sample(&mut rng, support.len(), take) {
            targets.push((k, ParamKind::L, Some(support[i])));
        }
    }

    let h = settings.step;
    let mut report = GradCheckReport::default();
    for (layer, kind, index) in targets {
        let net_plus = perturbed(net, layer, kind, index, h);
        let net_minus = perturbed(net, layer, kind, index, -h);
        let (_, pat_plus) = patterns(&net_plus, case.z.view())?;
        let (_, pat_minus) = patterns(&net_minus, case.z.view())?;
        if pat_plus != base_patterns || pat_minus != base_patterns {
            return Ok(None);
        }
        let (minus, diff) = output_difference(&net_plus, &net_minus, case.z.view())?;
        // |a - x|^2 - |b - x|^2 = <a - b, a + b - 2x>, formed without
        // subtracting two nearly equal losses. The step is the one actually
        // represented in floating point.
        let sum = &diff + &(&minus * 2.0) - &(&case.x_true * 2.0);
        let step = param_value(&net_plus, layer, kind, index) - param_value(&net_minus, layer, kind, index);
        let numeric = diff.dot(&sum) / step;
        let mut analytic = analytic_value(&grads, layer, kind, index);
        if let Some((k, factor)) = settings.corrupt {
            if k == kind {
                analytic *= factor;
            }
        }
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(Error::NonFiniteGradient {
                layer,
                param: kind.name(),
            });
        }
        report.entries.push(GradCheckEntry {
            layer,
            kind,
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric, settings.abs_floor),
        });
    }
    Ok(Some(report))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialsSummary {
    pub trials: usize,
    /// Draws discarded because a perturbation crossed a kink.
    pub rejected: usize,
    pub report: GradCheckReport,
}

impl TrialsSummary {
    pub fn passed(&self, tol: f64) -> bool {
        self.report.passed(tol)
    }
}

/// Runs `trials` kink-free cases; trial `i` draws from seeds derived from
/// `(seed, i)` until one is accepted. `layers_for(i)` sets the depth.
pub fn run_trials(
    trials: usize,
    seed: u64,
    settings: &GradCheckSettings,
    config_for: impl Fn(usize) -> CaseConfig,
) -> Result<TrialsSummary> {
    let mut summary = TrialsSummary {
        trials,
        rejected: 0,
        report: GradCheckReport::default(),
    };
    for trial in 0..trials {
        let config = config_for(trial);
        let mut accepted = false;
        for attempt in 0..config.max_attempts {
            let case_seed = seed
                .wrapping_mul(0x100_0000_01B3)
                .wrapping_add((trial as u64) << 20)
                .wrapping_add(attempt as u64);
            let case = draw_case(&config, case_seed)?;
            if let Some(report) = check_case(&case, settings, case_seed)? {
                summary.report.merge(report);
                accepted = true;
                break;
            }
            summary.rejected += 1;
        }
        if !accepted {
            return Err(Error::param(
                "gradcheck",
                format!("trial {trial}: no kink-free case in {} draws", config.max_attempts),
            ));
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 1e-12, 1e-10), 0.0);
        assert_eq!(relative_error(1.0, 0.5, 1e-10), 0.5);
    }

    #[test]
    fn single_trial_passes_and_corruption_fails() {
        let settings = GradCheckSettings::default();
        let ok = run_trials(1, 4, &settings, |_| CaseConfig::standard(2)).unwrap();
        assert!(ok.passed(1e-5), "max {}", ok.report.max_rel_err(None));

        let bad = GradCheckSettings {
            corrupt: Some((ParamKind::Sigma, 1.01)),
            ..settings
        };
        let fail = run_trials(1, 4, &bad, |_| CaseConfig::standard(2)).unwrap();
        assert!(!fail.passed(1e-5));
        assert!(fail.report.max_rel_err(Some(ParamKind::Tau)) <= 1e-5);
    }

    #[test]
    fn difference_pass_matches_subtraction() {
        let case = draw_case(&CaseConfig::standard(3), 9).unwrap();
        for (layer, kind, index) in [
            (0, ParamKind::Tau, None),
            (1, ParamKind::Sigma, None),
            (2, ParamKind::L, Some((0, 0))),
        ] {
            let plus = perturbed(&case.net, layer, kind, index, 1e-3);
            let minus = perturbed(&case.net, layer, kind, index, -1e-3);
            let (_, stable) = output_difference(&plus, &minus, case.z.view()).unwrap();
            let naive = naive_output_difference(&plus, &minus, case.z.view()).unwrap();
            let scale = naive.iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(scale > 1e-8);
            for (a, b) in stable.iter().zip(&naive) {
                assert!((a - b).abs() <= 1e-9 * scale.max(1.0), "{kind:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_trials_are_vacuous() {
        let s = run_trials(0, 0, &GradCheckSettings::default(), |_| CaseConfig::standard(1)).unwrap();
        assert!(s.report.entries.is_empty());
        assert!(s.passed(1e-5));
    }
}
