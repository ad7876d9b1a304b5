//! Token routers: linear top-K and the MC-dropout uncertainty-aware router.
//!
//! All routers work on a token matrix `x: [N, D]` and router weights
//! `W_r: [E, D]`. Top-K selection is a constant 0/1 mask, so gradients pass
//! unchanged through kept entries and are zero through dropped ones.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{dropout, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

/// Calibrated rows whose deviation norm is below this use the raw router output.
pub const FALLBACK_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterMode {
    Linear,
    #[serde(alias = "uar")]
    UarCalibrated,
    #[serde(alias = "uar-mixture")]
    UarUniformMixture,
}

impl RouterMode {
    pub fn is_uar(self) -> bool {
        !matches!(self, RouterMode::Linear)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RouterMode::Linear => "linear",
            RouterMode::UarCalibrated => "uar",
            RouterMode::UarUniformMixture => "uar-mixture",
        }
    }
}

impl fmt::Display for RouterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RouterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(RouterMode::Linear),
            "uar" | "uar-calibrated" => Ok(RouterMode::UarCalibrated),
            "uar-mixture" | "uar-uniform-mixture" => Ok(RouterMode::UarUniformMixture),
            _ => Err(Error::config(format!(
                "unknown router mode {s:?} (expected linear, uar, uar-mixture)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub mode: RouterMode,
    pub mc_passes: usize,
    pub dropout_rate: f64,
    pub variance_floor: f64,
    /// Evaluate UaR layers with the plain single-pass router.
    pub inference_deterministic: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_k: 2,
            mode: RouterMode::Linear,
            mc_passes: 4,
            dropout_rate: 0.1,
            variance_floor: 1e-6,
            inference_deterministic: false,
        }
    }
}

impl RouterConfig {
    pub fn linear(num_experts: usize, top_k: usize) -> Self {
        Self {
            num_experts,
            top_k,
            ..Self::default()
        }
    }

    pub fn uar(num_experts: usize, top_k: usize) -> Self {
        Self {
            mode: RouterMode::UarCalibrated,
            ..Self::linear(num_experts, top_k)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::config("router.num_experts must be positive"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::config(format!(
                "router.top_k must be in 1..={} (num_experts), got {}",
                self.num_experts, self.top_k
            )));
        }
        if self.mode.is_uar() && self.mc_passes < 2 {
            return Err(Error::config(format!(
                "router.mc_passes must be at least 2 for UaR, got {}",
                self.mc_passes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "router.dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::config("router.variance_floor must be positive"));
        }
        Ok(())
    }
}

/// Sparse per-token expert weights `[N, E]` and the matching 0/1 selection mask.
#[derive(Clone, Debug)]
pub struct RouterDecision<'t, T: Scalar = f64> {
    pub weights: Var<'t, T>,
    pub mask: Tensor<T>,
    /// Selected experts per token, ascending expert index.
    pub selected: Vec<Vec<usize>>,
    /// Smallest gap between the K-th and (K+1)-th probability over all tokens.
    /// Infinite when every expert is kept or the decision came from raw weights.
    pub margin: f64,
}

impl<'t, T: Scalar> RouterDecision<'t, T> {
    /// Uses `weights` as given; every nonzero entry counts as selected.
    pub fn from_weights(weights: Var<'t, T>) -> Result<Self> {
        let w = weights.value();
        if w.ndim() != 2 {
            return Err(Error::dim("RouterDecision", format!("weights must be [N, E], got {:?}", w.shape())));
        }
        let e = w.shape()[1];
        let mask = w.map(|v| if v != T::zero() { T::one() } else { T::zero() });
        let selected = (0..w.shape()[0])
            .map(|n| (0..e).filter(|&i| w.row(n)[i] != T::zero()).collect())
            .collect();
        Ok(Self { weights, mask, selected, margin: f64::INFINITY })
    }

    pub fn num_tokens(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn num_experts(&self) -> usize {
        self.mask.shape()[1]
    }

    /// Token indices assigned to each expert, ascending.
    pub fn tokens_per_expert(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_experts()];
        for (n, sel) in self.selected.iter().enumerate() {
            for &i in sel {
                out[i].push(n);
            }
        }
        out
    }
}

/// Per-token mean and population variance of an ensemble of router outputs, both `[N, E]`.
#[derive(Clone, Debug)]
pub struct UncertaintyStats<'t, T: Scalar = f64> {
    pub mean: Var<'t, T>,
    pub diag_cov: Var<'t, T>,
}

/// Indices of the `k` largest entries of each row, ties to the lowest index,
/// keeping only strictly positive entries. Returned sorted ascending.
pub fn top_k_indices<T: Scalar>(probs: &Tensor<T>, k: usize) -> Vec<Vec<usize>> {
    let e = probs.shape()[1];
    (0..probs.shape()[0])
        .map(|n| {
            let row = probs.row(n);
            let mut order: Vec<usize> = (0..e).collect();
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
            let mut kept: Vec<usize> = order.into_iter().take(k).filter(|&i| row[i] > T::zero()).collect();
            kept.sort_unstable();
            kept
        })
        .collect()
}

/// Minimum over rows of `p_(k) - p_(k+1)` in descending order; infinite if `k >= E`.
pub fn top_k_margin<T: Scalar>(probs: &Tensor<T>, k: usize) -> f64 {
    let e = probs.shape()[1];
    if k >= e {
        return f64::INFINITY;
    }
    let mut margin = f64::INFINITY;
    for n in 0..probs.shape()[0] {
        let mut row: Vec<f64> = probs.row(n).iter().map(|v| v.as_f64()).collect();
        row.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        margin = margin.min(row[k - 1] - row[k]);
    }
    margin
}

/// Zeroes all but the top-`k` entries of each row of `probs` (no renormalization).
pub fn apply_top_k<'t, T: Scalar>(probs: Var<'t, T>, k: usize) -> Result<RouterDecision<'t, T>> {
    let p = probs.value();
    if p.ndim() != 2 {
        return Err(Error::dim("top_k", format!("expected [N, E], got {:?}", p.shape())));
    }
    let e = p.shape()[1];
    if k == 0 || k > e {
        return Err(Error::config(format!("top_k {k} must be in 1..={e}")));
    }
    let selected = top_k_indices(&p, k);
    let mut mask = Tensor::zeros(p.shape().to_vec());
    for (n, sel) in selected.iter().enumerate() {
        for &i in sel {
            mask.data_mut()[n * e + i] = T::one();
        }
    }
    let margin = top_k_margin(&p, k);
    let weights = probs.mul(probs.tape().constant(mask.clone()))?;
    Ok(RouterDecision { weights, mask, selected, margin })
}

fn check_router_shapes<T: Scalar>(x: &Var<'_, T>, w_r: &Var<'_, T>, cfg: &RouterConfig) -> Result<()> {
    let (xs, ws) = (x.shape(), w_r.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::shape("router", &xs, &ws));
    }
    if ws[0] != cfg.num_experts {
        return Err(Error::dim(
            "router",
            format!("router weight has {} rows for {} experts", ws[0], cfg.num_experts),
        ));
    }
    Ok(())
}

/// `softmax(x · W_rᵀ)` per token.
pub fn router_probs<'t, T: Scalar>(x: Var<'t, T>, w_r: Var<'t, T>) -> Result<Var<'t, T>> {
    x.matmul_t(w_r)?.softmax(1)
}

/// `TopK(softmax(x · W_rᵀ))`.
pub fn linear_route<'t, T: Scalar>(x: Var<'t, T>, w_r: Var<'t, T>, cfg: &RouterConfig) -> Result<RouterDecision<'t, T>> {
    if cfg.top_k == 0 || cfg.top_k > cfg.num_experts {
        return Err(Error::config(format!(
            "top_k {} must be in 1..={}",
            cfg.top_k, cfg.num_experts
        )));
    }
    check_router_shapes(&x, &w_r, cfg)?;
    apply_top_k(router_probs(x, w_r)?, cfg.top_k)
}

/// Elementwise mean and population variance (divide by M) of `members`.
pub fn ensemble_stats<'t, T: Scalar>(members: &[Var<'t, T>]) -> Result<UncertaintyStats<'t, T>> {
    let first = *members
        .first()
        .ok_or_else(|| Error::Empty("router ensemble".into()))?;
    let inv_m = 1.0 / members.len() as f64;
    let mut sum = first;
    for &m in &members[1..] {
        sum = sum.add(m)?;
    }
    let mean = sum.scale(inv_m);
    let mut sq = first.sub(mean)?.square();
    for &m in &members[1..] {
        sq = sq.add(m.sub(mean)?.square())?;
    }
    Ok(UncertaintyStats {
        mean,
        diag_cov: sq.scale(inv_m),
    })
}

/// Runs the router `M` times with a fresh dropout mask on its inputs each pass.
pub fn mc_ensemble<'t, T: Scalar>(
    x: Var<'t, T>,
    w_r: Var<'t, T>,
    cfg: &RouterConfig,
    rng: &mut RngStream,
) -> Result<(Vec<Var<'t, T>>, UncertaintyStats<'t, T>)> {
    if cfg.mc_passes < 2 {
        return Err(Error::config(format!("mc_passes must be at least 2, got {}", cfg.mc_passes)));
    }
    check_router_shapes(&x, &w_r, cfg)?;
    let members = (0..cfg.mc_passes)
        .map(|_| router_probs(dropout(x, cfg.dropout_rate, rng, true)?, w_r))
        .collect::<Result<Vec<_>>>()?;
    let stats = ensemble_stats(&members)?;
    Ok((members, stats))
}

#[derive(Clone, Debug)]
pub struct Calibrated<'t, T: Scalar = f64> {
    /// `Σ⁻¹(r − μ) / ‖Σ⁻¹(r − μ)‖` per token; unit rows except at fallbacks.
    pub scores: Var<'t, T>,
    /// Softmax of the scores, or the raw `r` on fallback rows.
    pub probs: Var<'t, T>,
    pub fallback: Vec<bool>,
}

/// Calibrates a fresh router output `r` against ensemble statistics.
///
/// The diagonal inverse covariance uses `1/max(Σ_i, ε)`.
pub fn uar_calibrate<'t, T: Scalar>(
    r: Var<'t, T>,
    stats: &UncertaintyStats<'t, T>,
    cfg: &RouterConfig,
) -> Result<Calibrated<'t, T>> {
    let tape = r.tape();
    let dev = r.sub(stats.mean)?.div(stats.diag_cov.clamp_min(cfg.variance_floor))?;
    let norm = dev.l2_norm();
    let nv = norm.value();
    let fallback: Vec<bool> = nv.data().iter().map(|&v| !(v.as_f64() >= FALLBACK_NORM)).collect();
    let n_fallback = fallback.iter().filter(|&&f| f).count();
    if n_fallback == 0 {
        let scores = dev.div(norm)?;
        let probs = scores.softmax(1)?;
        return Ok(Calibrated { scores, probs, fallback });
    }
    log::debug!("uar calibration fell back to the raw router for {n_fallback} token(s)");
    let flag = Tensor::new(
        nv.shape().to_vec(),
        fallback.iter().map(|&f| if f { T::one() } else { T::zero() }).collect(),
    )?;
    let keep = flag.map(|f| T::one() - f);
    let flag = tape.constant(flag);
    let scores = dev.div(norm.add(flag)?)?;
    let probs = scores
        .softmax(1)?
        .mul(tape.constant(keep))?
        .add(r.mul(flag)?)?;
    Ok(Calibrated { scores, probs, fallback })
}

/// `M⁻¹ Σ_m r⁽ᵐ⁾`.
pub fn uar_uniform_mixture<'t, T: Scalar>(ensemble: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    Ok(ensemble_stats(ensemble)?.mean)
}

#[derive(Clone, Debug)]
pub struct RouteOutcome<'t, T: Scalar = f64> {
    pub decision: RouterDecision<'t, T>,
    pub stats: Option<UncertaintyStats<'t, T>>,
    pub fallback_tokens: usize,
}

/// Routes per `cfg.mode`. UaR modes always draw MC-dropout passes from
/// `rng`, except at evaluation with `inference_deterministic` set.
pub fn route<'t, T: Scalar>(
    x: Var<'t, T>,
    w_r: Var<'t, T>,
    cfg: &RouterConfig,
    rng: &mut RngStream,
    training: bool,
) -> Result<RouteOutcome<'t, T>> {
    cfg.validate()?;
    if cfg.mode == RouterMode::Linear || (!training && cfg.inference_deterministic) {
        return Ok(RouteOutcome {
            decision: linear_route(x, w_r, cfg)?,
            stats: None,
            fallback_tokens: 0,
        });
    }
    let (members, stats) = mc_ensemble(x, w_r, cfg, rng)?;
    let (probs, fallback_tokens) = match cfg.mode {
        RouterMode::UarCalibrated => {
            let cal = uar_calibrate(router_probs(x, w_r)?, &stats, cfg)?;
            let n = cal.fallback.iter().filter(|&&f| f).count();
            (cal.probs, n)
        }
        _ => (uar_uniform_mixture(&members)?, 0),
    };
    Ok(RouteOutcome {
        decision: apply_top_k(probs, cfg.top_k)?,
        stats: Some(stats),
        fallback_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::streams;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(RouterConfig::linear(4, 2).validate().is_ok());
        assert_eq!(RouterConfig::linear(4, 5).validate().unwrap_err().kind(), "config");
        let mut c = RouterConfig::uar(4, 2);
        c.mc_passes = 1;
        assert!(c.validate().is_err());
        c.mc_passes = 2;
        c.variance_floor = 0.0;
        assert!(c.validate().is_err());
        assert_eq!("uar-mixture".parse::<RouterMode>().unwrap(), RouterMode::UarUniformMixture);
        assert!("nope".parse::<RouterMode>().is_err());
    }

    #[test]
    fn k_equals_e_keeps_everything() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let w = tape.constant(Tensor::zeros([4, 2]));
        let d = linear_route(x, w, &RouterConfig::linear(4, 4)).unwrap();
        assert_eq!(d.weights.value().data(), &[0.25; 4]);
        assert_eq!(d.mask.data(), &[1.0; 4]);
    }

    #[test]
    fn top_two_of_known_softmax() {
        let tape = Tape::<f64>::inference();
        let p = tape.constant(t(&[1, 4], &[0.1, 0.4, 0.3, 0.2]));
        let d = apply_top_k(p, 2).unwrap();
        assert_eq!(d.weights.value().data(), &[0.0, 0.4, 0.3, 0.0]);
        assert_eq!(d.mask.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(d.selected, vec![vec![1, 2]]);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let p = t(&[1, 4], &[0.2, 0.3, 0.2, 0.3]);
        assert_eq!(top_k_indices(&p, 1), vec![vec![1]]);
        assert_eq!(top_k_indices(&p, 3), vec![vec![0, 1, 3]]);
    }

    #[test]
    fn k_too_large_is_config_error() {
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::zeros([1, 2]));
        let w = tape.constant(Tensor::zeros([4, 2]));
        let mut cfg = RouterConfig::linear(4, 2);
        cfg.top_k = 5;
        assert_eq!(linear_route(x, w, &cfg).unwrap_err().kind(), "config");
    }

    #[test]
    fn two_point_variance() {
        let tape = Tape::<f64>::inference();
        let a = tape.constant(t(&[1, 2], &[0.2, 0.8]));
        let b = tape.constant(t(&[1, 2], &[0.4, 0.6]));
        let s = ensemble_stats(&[a, b]).unwrap();
        let (m, v) = (s.mean.value(), s.diag_cov.value());
        assert!((m.data()[0] - 0.3).abs() < 1e-15 && (m.data()[1] - 0.7).abs() < 1e-15);
        assert!((v.data()[0] - 0.01).abs() < 1e-15 && (v.data()[1] - 0.01).abs() < 1e-15);
        let mix = uar_uniform_mixture(&[a, b]).unwrap().value();
        assert!((mix.data()[0] - 0.3).abs() < 1e-15 && (mix.data()[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_dropout_gives_zero_variance() {
        let mut rng = RngStream::new(1, streams::INIT);
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_fn([5, 3], |_| rng.normal()));
        let w = tape.constant(Tensor::from_fn([4, 3], |_| rng.normal()));
        let mut cfg = RouterConfig::uar(4, 2);
        cfg.dropout_rate = 0.0;
        let (members, stats) = mc_ensemble(x, w, &cfg, &mut rng).unwrap();
        assert_eq!(members.len(), 4);
        assert!(stats.diag_cov.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mc_ensemble_needs_two_passes() {
        let mut rng = RngStream::new(1, streams::DROPOUT);
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::zeros([1, 2]));
        let w = tape.constant(Tensor::zeros([2, 2]));
        let mut cfg = RouterConfig::uar(2, 1);
        cfg.mc_passes = 1;
        assert_eq!(mc_ensemble(x, w, &cfg, &mut rng).unwrap_err().kind(), "config");
    }

    #[test]
    fn three_four_five_calibration() {
        let tape = Tape::<f64>::inference();
        let r = tape.constant(t(&[1, 2], &[3.5, 4.5]));
        let stats = UncertaintyStats {
            mean: tape.constant(t(&[1, 2], &[0.5, 0.5])),
            diag_cov: tape.constant(t(&[1, 2], &[1.0, 1.0])),
        };
        let c = uar_calibrate(r, &stats, &RouterConfig::uar(2, 1)).unwrap();
        let s = c.scores.value();
        assert!((s.data()[0] - 0.6).abs() < 1e-15 && (s.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(c.fallback, vec![false]);
    }

    #[test]
    fn degenerate_deviation_falls_back() {
        let tape = Tape::<f64>::inference();
        let r = tape.constant(t(&[2, 2], &[0.3, 0.7, 0.9, 0.1]));
        let stats = UncertaintyStats {
            mean: tape.constant(t(&[2, 2], &[0.3, 0.7, 0.5, 0.5])),
            diag_cov: tape.constant(t(&[2, 2], &[0.01, 0.01, 0.01, 0.01])),
        };
        let c = uar_calibrate(r, &stats, &RouterConfig::uar(2, 1)).unwrap();
        assert_eq!(c.fallback, vec![true, false]);
        let p = c.probs.value();
        assert_eq!(&p.data()[..2], &[0.3, 0.7]);
        assert!(p.data().iter().all(|v| v.is_finite()));
        let s = c.scores.value();
        assert!((s.row(1).iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn route_dispatches_on_mode() {
        let mut rng = RngStream::new(4, streams::INIT);
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_fn([6, 3], |_| rng.normal()));
        let w = tape.constant(Tensor::from_fn([4, 3], |_| rng.normal()));
        let mut cfg = RouterConfig::uar(4, 2);
        let mut drng = RngStream::new(4, streams::DROPOUT);
        let out = route(x, w, &cfg, &mut drng, true).unwrap();
        assert!(out.stats.is_some());
        cfg.inference_deterministic = true;
        let eval = route(x, w, &cfg, &mut drng, false).unwrap();
        assert!(eval.stats.is_none());
        let lin = linear_route(x, w, &cfg).unwrap();
        assert_eq!(eval.decision.weights.value().data(), lin.weights.value().data());
        cfg.mode = RouterMode::UarUniformMixture;
        let mix = route(x, w, &cfg, &mut drng, true).unwrap();
        assert!(mix.decision.selected.iter().all(|s| s.len() == 2));
    }
}
