//! FFN experts, feature-modulation generators and the routed expert layers.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::routing::{self, RouteOutcome, RouterConfig, RouterDecision, UncertaintyStats};
use crate::tensor::Scalar;

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Fan-in uniform weights, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), &[in_dim, out_dim], bound, rng)?;
        let b = if bias {
            Some(store.add_const(format!("{name}.b"), &[out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(bx.var(self.w))?;
        match self.b {
            Some(b) => y.add(bx.var(b)),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.b.is_some() { self.out_dim } else { 0 }
    }
}

/// `GELU(x·W1 + b1)·W2 + b2` with hidden width `s·D`.
#[derive(Clone, Debug)]
pub struct FfnExpert {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FfnExpert {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut RngStream, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_dim
    }

    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(bx, x)?.gelu();
        self.fc2.forward(bx, h)
    }

    /// `D·H + H + H·D + D`.
    pub fn param_count(&self) -> usize {
        ffn_params(self.dim(), self.hidden())
    }

    pub fn macs_per_token(&self) -> usize {
        2 * self.dim() * self.hidden()
    }
}

pub fn ffn_params(dim: usize, hidden: usize) -> usize {
    dim * hidden + hidden + hidden * dim + dim
}

pub fn fm_params(dim: usize) -> usize {
    2 * (dim * dim + dim)
}

/// Input-conditioned modulation `γ∘x + β` with `γ = x·Wγ + bγ`, `β = x·Wβ + bβ`.
#[derive(Clone, Debug)]
pub struct FmGenerator {
    pub gamma: Linear,
    pub beta: Linear,
}

impl FmGenerator {
    /// Starts as the identity modulation: `Wγ = 0, bγ = 1, Wβ = 0, bβ = 0`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let mut lin = |suffix: &str, bias: f64| -> Result<Linear> {
            Ok(Linear {
                w: store.add_const(format!("{name}.{suffix}.w"), &[dim, dim], 0.0)?,
                b: Some(store.add_const(format!("{name}.{suffix}.b"), &[dim], bias)?),
                in_dim: dim,
                out_dim: dim,
            })
        };
        Ok(Self {
            gamma: lin("gamma", 1.0)?,
            beta: lin("beta", 0.0)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.in_dim
    }

    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let g = self.gamma.forward(bx, x)?;
        let b = self.beta.forward(bx, x)?;
        g.mul(x)?.add(b)
    }

    pub fn param_count(&self) -> usize {
        fm_params(self.dim())
    }

    pub fn macs_per_token(&self) -> usize {
        2 * self.dim() * self.dim()
    }
}

/// Router weights `W_r: [E, D]` plus their routing configuration.
#[derive(Clone, Debug)]
pub struct Router {
    pub w: ParamId,
    pub cfg: RouterConfig,
    pub dim: usize,
}

impl Router {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut RngStream, name: &str, dim: usize, cfg: RouterConfig) -> Result<Self> {
        cfg.validate()?;
        let bound = 1.0 / (dim as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), &[cfg.num_experts, dim], bound, rng)?;
        Ok(Self { w, cfg, dim })
    }

    pub fn route<'t, T: Scalar>(
        &self,
        bx: &Binder<'t, '_, T>,
        x: Var<'t, T>,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<RouteOutcome<'t, T>> {
        routing::route(x, bx.var(self.w), &self.cfg, rng, training)
    }

    pub fn param_count(&self) -> usize {
        self.cfg.num_experts * self.dim
    }

    /// Router logit passes per forward: one, or `M + 1` with uncertainty-aware routing.
    pub fn passes(&self) -> usize {
        if self.cfg.mode.is_uar() {
            self.cfg.mc_passes + 1
        } else {
            1
        }
    }
}

/// Classic sparse MoE: `Σ_i r_i(x) e_i(x)` over the selected experts.
#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub router: Router,
    pub experts: Vec<FfnExpert>,
}

/// Feature-modulated experts feeding one shared FFN: `FFN(Σ_i r_i(x) FM_i(x))`.
#[derive(Clone, Debug)]
pub struct FmeLayer {
    pub router: Router,
    pub modulators: Vec<FmGenerator>,
    pub shared: FfnExpert,
}

/// Routing data a layer exposes to the losses and diagnostics.
#[derive(Clone, Debug)]
pub struct LayerAux<'t, T: Scalar = f64> {
    pub decision: RouterDecision<'t, T>,
    pub stats: Option<UncertaintyStats<'t, T>>,
    /// Expert (MoE) or modulator (FME) evaluations, summed over tokens.
    pub evaluations: usize,
    pub fallback_tokens: usize,
}

/// Row-gathered routing weight column for `expert`, shaped `[tokens, 1]`.
fn expert_weights<'t, T: Scalar>(decision: &RouterDecision<'t, T>, expert: usize, tokens: &[usize]) -> Result<Var<'t, T>> {
    let e = decision.num_experts();
    let flat: Vec<usize> = tokens.iter().map(|&n| n * e + expert).collect();
    decision.weights.gather(&flat)?.reshape(&[tokens.len(), 1])
}

/// Evaluates `f(i, x_tokens)` for each expert on its assigned tokens and
/// scatters the weighted results back into `[N, D]`.
fn dispatch<'t, T: Scalar>(
    x: Var<'t, T>,
    decision: &RouterDecision<'t, T>,
    mut f: impl FnMut(usize, Var<'t, T>) -> Result<Var<'t, T>>,
) -> Result<(Var<'t, T>, usize)> {
    let n = x.shape()[0];
    if decision.num_tokens() != n {
        return Err(Error::dim(
            "expert dispatch",
            format!("{} routed tokens for {n} inputs", decision.num_tokens()),
        ));
    }
    let mut parts = Vec::new();
    let mut evaluations = 0;
    for (i, tokens) in decision.tokens_per_expert().into_iter().enumerate() {
        if tokens.is_empty() {
            continue;
        }
        evaluations += tokens.len();
        let y = f(i, x.gather_rows(&tokens)?)?;
        parts.push((y.mul(expert_weights(decision, i, &tokens)?)?, tokens));
    }
    if parts.is_empty() {
        let d = x.shape()[1];
        return Ok((x.tape().constant(crate::Tensor::zeros([n, d])), 0));
    }
    Ok((x.tape().scatter_rows(&parts, n)?, evaluations))
}

pub fn moe_forward<'t, T: Scalar>(
    bx: &Binder<'t, '_, T>,
    layer: &MoeLayer,
    x: Var<'t, T>,
    decision: &RouterDecision<'t, T>,
) -> Result<(Var<'t, T>, usize)> {
    dispatch(x, decision, |i, xs| layer.experts[i].forward(bx, xs))
}

/// `Σ_i r_i(x)·FM_i(x)`, the input of the shared FFN.
pub fn fme_mixture<'t, T: Scalar>(
    bx: &Binder<'t, '_, T>,
    layer: &FmeLayer,
    x: Var<'t, T>,
    decision: &RouterDecision<'t, T>,
) -> Result<(Var<'t, T>, usize)> {
    dispatch(x, decision, |i, xs| layer.modulators[i].forward(bx, xs))
}

pub fn fme_forward<'t, T: Scalar>(
    bx: &Binder<'t, '_, T>,
    layer: &FmeLayer,
    x: Var<'t, T>,
    decision: &RouterDecision<'t, T>,
) -> Result<(Var<'t, T>, usize)> {
    let (mix, evals) = fme_mixture(bx, layer, x, decision)?;
    Ok((layer.shared.forward(bx, mix)?, evals))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertMode {
    Dense,
    Moe,
    Fme,
}

impl ExpertMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpertMode::Dense => "dense",
            ExpertMode::Moe => "moe",
            ExpertMode::Fme => "fme",
        }
    }
}

impl std::fmt::Display for ExpertMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ExpertMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ExpertMode::Dense),
            "moe" => Ok(ExpertMode::Moe),
            "fme" => Ok(ExpertMode::Fme),
            _ => Err(Error::config(format!("unknown expert mode {s:?} (expected dense, moe, fme)"))),
        }
    }
}

/// The FFN slot of an encoder block.
#[derive(Clone, Debug)]
pub enum ExpertLayer {
    Dense(FfnExpert),
    Moe(MoeLayer),
    Fme(FmeLayer),
}

impl ExpertLayer {
    /// Parameter names: `{name}.ffn.*` for the dense FFN and the FME shared
    /// FFN, `{name}.experts.{i}.*`, `{name}.fm.{i}.*` and `{name}.router.w`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RngStream,
        name: &str,
        mode: ExpertMode,
        dim: usize,
        hidden: usize,
        router: &RouterConfig,
    ) -> Result<Self> {
        Ok(match mode {
            ExpertMode::Dense => ExpertLayer::Dense(FfnExpert::new(store, rng, &format!("{name}.ffn"), dim, hidden)?),
            ExpertMode::Moe => {
                let r = Router::new(store, rng, &format!("{name}.router"), dim, router.clone())?;
                let experts = (0..router.num_experts)
                    .map(|i| FfnExpert::new(store, rng, &format!("{name}.experts.{i}"), dim, hidden))
                    .collect::<Result<_>>()?;
                ExpertLayer::Moe(MoeLayer { router: r, experts })
            }
            ExpertMode::Fme => {
                let r = Router::new(store, rng, &format!("{name}.router"), dim, router.clone())?;
                let modulators = (0..router.num_experts)
                    .map(|i| FmGenerator::new(store, &format!("{name}.fm.{i}"), dim))
                    .collect::<Result<_>>()?;
                let shared = FfnExpert::new(store, rng, &format!("{name}.ffn"), dim, hidden)?;
                ExpertLayer::Fme(FmeLayer { router: r, modulators, shared })
            }
        })
    }

    pub fn mode(&self) -> ExpertMode {
        match self {
            ExpertLayer::Dense(_) => ExpertMode::Dense,
            ExpertLayer::Moe(_) => ExpertMode::Moe,
            ExpertLayer::Fme(_) => ExpertMode::Fme,
        }
    }

    pub fn router(&self) -> Option<&Router> {
        match self {
            ExpertLayer::Dense(_) => None,
            ExpertLayer::Moe(l) => Some(&l.router),
            ExpertLayer::Fme(l) => Some(&l.router),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        bx: &Binder<'t, '_, T>,
        x: Var<'t, T>,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<(Var<'t, T>, Option<LayerAux<'t, T>>)> {
        let (router, apply): (&Router, &dyn Fn(&RouterDecision<'t, T>) -> Result<(Var<'t, T>, usize)>) = match self {
            ExpertLayer::Dense(ffn) => return Ok((ffn.forward(bx, x)?, None)),
            ExpertLayer::Moe(l) => (&l.router, &|d| moe_forward(bx, l, x, d)),
            ExpertLayer::Fme(l) => (&l.router, &|d| fme_forward(bx, l, x, d)),
        };
        let outcome = router.route(bx, x, rng, training)?;
        let (y, evaluations) = apply(&outcome.decision)?;
        Ok((
            y,
            Some(LayerAux {
                decision: outcome.decision,
                stats: outcome.stats,
                evaluations,
                fallback_tokens: outcome.fallback_tokens,
            }),
        ))
    }

    /// Parameters in the FFN slot excluding the router:
    /// `|FFN|` (dense), `E·|FFN|` (MoE) or `E·|FM| + |FFN|` (FME).
    pub fn expert_params(&self) -> usize {
        match self {
            ExpertLayer::Dense(f) => f.param_count(),
            ExpertLayer::Moe(l) => l.experts.iter().map(FfnExpert::param_count).sum(),
            ExpertLayer::Fme(l) => l.modulators.iter().map(FmGenerator::param_count).sum::<usize>() + l.shared.param_count(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.expert_params() + self.router().map_or(0, Router::param_count)
    }

    /// Per-token MACs: K experts (MoE), K modulators plus the shared FFN (FME),
    /// plus `E·D` per router pass.
    pub fn macs_per_token(&self) -> usize {
        match self {
            ExpertLayer::Dense(f) => f.macs_per_token(),
            ExpertLayer::Moe(l) => {
                l.router.cfg.top_k * l.experts[0].macs_per_token() + l.router.passes() * l.router.param_count()
            }
            ExpertLayer::Fme(l) => {
                l.router.cfg.top_k * l.modulators[0].macs_per_token()
                    + l.shared.macs_per_token()
                    + l.router.passes() * l.router.param_count()
            }
        }
    }
}
