//! Task, load-balance and uncertainty losses and their weighted combinations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::experts::LayerAux;
use crate::routing::{RouterDecision, UncertaintyStats};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_lb: f64,
    pub lambda_uc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_lb: 1e-2,
            lambda_uc: 5e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_lb >= 0.0 && self.lambda_uc >= 0.0) {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// `Moe`: task + λ1·lb. `Mofme`: task + λ1·lb + λ2·uc.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Moe,
    Mofme,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Moe => "moe",
            Objective::Mofme => "mofme",
        }
    }

    fn uc_coefficient(self, w: &LossWeights) -> f64 {
        match self {
            Objective::Moe => 0.0,
            Objective::Mofme => w.lambda_uc,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moe" => Ok(Objective::Moe),
            "mofme" => Ok(Objective::Mofme),
            _ => Err(Error::config(format!("unknown objective {s:?} (expected moe, mofme)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task_loss: f64,
    pub lb_loss: f64,
    pub uc_loss: f64,
    pub total: f64,
    pub lb_per_layer: Vec<f64>,
    pub uc_per_layer: Vec<f64>,
}

/// `(E/N)·Σ_n Σ_i v_i(x_n)·r_i(x_n)` for one layer.
pub fn layer_load_balance<'t, T: Scalar>(d: &RouterDecision<'t, T>) -> Result<Var<'t, T>> {
    let (n, e) = (d.num_tokens(), d.num_experts());
    if n == 0 {
        return Err(Error::Empty("load-balance loss over zero tokens".into()));
    }
    let v = d.weights.tape().constant(d.mask.clone());
    Ok(d.weights.mul(v)?.sum().scale(e as f64 / n as f64))
}

/// `(E/N)·Σ_n Σ_i Σ̌_i(x_n)·v_i(x_n)` for one layer.
pub fn layer_uncertainty<'t, T: Scalar>(stats: &UncertaintyStats<'t, T>, mask: &Tensor<T>) -> Result<Var<'t, T>> {
    let shape = mask.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::Empty("uncertainty loss over zero tokens".into()));
    }
    let (n, e) = (shape[0], shape[1]);
    let v = stats.diag_cov.tape().constant(mask.clone());
    Ok(stats.diag_cov.mul(v)?.sum().scale(e as f64 / n as f64))
}

fn mean_of<'t, T: Scalar>(terms: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = *terms.first().ok_or_else(|| Error::Empty("no routed layers".into()))?;
    let mut acc = first;
    for &t in &terms[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / terms.len() as f64))
}

/// Load-balance loss averaged over layers.
pub fn load_balance_loss<'t, T: Scalar>(decisions: &[&RouterDecision<'t, T>]) -> Result<Var<'t, T>> {
    let per = decisions
        .iter()
        .map(|d| layer_load_balance(d))
        .collect::<Result<Vec<_>>>()?;
    mean_of(&per)
}

/// Uncertainty loss averaged over layers.
pub fn uncertainty_loss<'t, T: Scalar>(stats: &[(&UncertaintyStats<'t, T>, &Tensor<T>)]) -> Result<Var<'t, T>> {
    let per = stats
        .iter()
        .map(|(s, m)| layer_uncertainty(s, m))
        .collect::<Result<Vec<_>>>()?;
    mean_of(&per)
}

pub fn mse<'t, T: Scalar>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse", &pred.shape(), &target.shape()));
    }
    Ok(pred.sub(target)?.square().mean())
}

/// Scalar combination; `Moe` ignores `uc`.
pub fn combine(task: f64, lb: f64, uc: f64, w: &LossWeights, objective: Objective) -> LossReport {
    LossReport {
        task_loss: task,
        lb_loss: lb,
        uc_loss: uc,
        total: task + w.lambda_lb * lb + objective.uc_coefficient(w) * uc,
        lb_per_layer: Vec::new(),
        uc_per_layer: Vec::new(),
    }
}

/// The differentiable training objective over a forward pass's routing data.
///
/// Layers without routing contribute nothing; with no routed layers at
/// all, or no uncertainty statistics, the corresponding term is zero.
pub fn objective<'t, T: Scalar>(
    task: Var<'t, T>,
    aux: &[LayerAux<'t, T>],
    w: &LossWeights,
    objective: Objective,
) -> Result<(Var<'t, T>, LossReport)> {
    let lb_terms = aux
        .iter()
        .map(|a| layer_load_balance(&a.decision))
        .collect::<Result<Vec<_>>>()?;
    let uc_terms = aux
        .iter()
        .filter_map(|a| a.stats.as_ref().map(|s| layer_uncertainty(s, &a.decision.mask)))
        .collect::<Result<Vec<_>>>()?;
    let item = |v: &Var<'t, T>| v.value().item().as_f64();
    let mut total = task;
    let mut lb = 0.0;
    if !lb_terms.is_empty() {
        let l = mean_of(&lb_terms)?;
        lb = item(&l);
        if w.lambda_lb != 0.0 {
            total = total.add(l.scale(w.lambda_lb))?;
        }
    }
    let mut uc = 0.0;
    if !uc_terms.is_empty() {
        let u = mean_of(&uc_terms)?;
        uc = item(&u);
        let c = objective.uc_coefficient(w);
        if c != 0.0 {
            total = total.add(u.scale(c))?;
        }
    }
    let mut report = combine(item(&task), lb, uc, w, objective);
    report.lb_per_layer = lb_terms.iter().map(item).collect();
    report.uc_per_layer = uc_terms.iter().map(item).collect();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::{streams, RngStream};

    fn decision<'t>(tape: &'t Tape, rows: usize, e: usize, w: &[f64]) -> RouterDecision<'t> {
        RouterDecision::from_weights(tape.constant(Tensor::from_f64([rows, e], w).unwrap())).unwrap()
    }

    #[test]
    fn collapsed_routing_gives_e() {
        let tape = Tape::inference();
        let d = decision(&tape, 2, 4, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(load_balance_loss(&[&d]).unwrap().value().item(), 4.0);
    }

    #[test]
    fn uniform_top2_gives_k() {
        let tape = Tape::inference();
        let d = decision(&tape, 2, 4, &[0.25, 0.25, 0.0, 0.0, 0.25, 0.25, 0.0, 0.0]);
        assert_eq!(load_balance_loss(&[&d]).unwrap().value().item(), 2.0);
    }

    #[test]
    fn single_token_single_expert() {
        let tape = Tape::inference();
        let d = decision(&tape, 1, 1, &[1.0]);
        assert_eq!(load_balance_loss(&[&d]).unwrap().value().item(), 1.0);
    }

    #[test]
    fn layers_are_averaged() {
        let tape = Tape::inference();
        let a = decision(&tape, 2, 4, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let b = decision(&tape, 2, 4, &[0.25, 0.25, 0.0, 0.0, 0.25, 0.25, 0.0, 0.0]);
        assert_eq!(load_balance_loss(&[&a, &b]).unwrap().value().item(), 3.0);
        assert_eq!(load_balance_loss::<f64>(&[]).unwrap_err().kind(), "empty");
    }

    #[test]
    fn uncertainty_closed_forms() {
        let tape = Tape::inference();
        let stats = UncertaintyStats {
            mean: tape.constant(Tensor::from_f64([1, 2], &[0.5, 0.5]).unwrap()),
            diag_cov: tape.constant(Tensor::from_f64([1, 2], &[0.01, 0.04]).unwrap()),
        };
        let mask = Tensor::from_f64([1, 2], &[1.0, 0.0]).unwrap();
        let l: f64 = uncertainty_loss(&[(&stats, &mask)]).unwrap().value().item();
        assert!((l - 0.02).abs() < 1e-15);
        let doubled = UncertaintyStats {
            mean: stats.mean,
            diag_cov: stats.diag_cov.scale(2.0),
        };
        let l2 = uncertainty_loss(&[(&doubled, &mask)]).unwrap().value().item();
        assert!((l2 - 2.0 * l).abs() < 1e-15);
        let zero = UncertaintyStats {
            mean: stats.mean,
            diag_cov: tape.constant(Tensor::zeros([1, 2])),
        };
        assert_eq!(uncertainty_loss(&[(&zero, &mask)]).unwrap().value().item(), 0.0);
    }

    #[test]
    fn mse_examples() {
        let mut rng = RngStream::new(1, streams::INIT);
        let tape = Tape::inference();
        let a = Tensor::from_fn([2, 3, 4], |_| rng.uniform());
        let b = Tensor::from_fn([2, 3, 4], |_| rng.uniform());
        let av = tape.constant(a.clone());
        assert_eq!(mse(av, av).unwrap().value().item(), 0.0);
        let shifted = tape.constant(a.map(|v| v + 0.1));
        assert!((mse(shifted, av).unwrap().value().item() - 0.01).abs() < 1e-12);
        let mut oracle = 0.0;
        for i in 0..a.numel() {
            oracle += (a.data()[i] - b.data()[i]).powi(2);
        }
        oracle /= a.numel() as f64;
        let got = mse(av, tape.constant(b)).unwrap().value().item();
        assert!((got - oracle).abs() < 1e-12);
        assert_eq!(
            mse(av, tape.constant(Tensor::zeros([4]))).unwrap_err().kind(),
            "shape"
        );
    }

    #[test]
    fn combine_examples() {
        let w = LossWeights::default();
        let r = combine(1.0, 2.0, 3.0, &w, Objective::Mofme);
        assert!((r.total - 1.035).abs() < 1e-12);
        let r = combine(1.0, 2.0, 3.0, &w, Objective::Moe);
        assert!((r.total - 1.02).abs() < 1e-12);
        let zero = LossWeights {
            lambda_lb: 0.0,
            lambda_uc: 0.0,
        };
        assert_eq!(combine(1.0, 2.0, 3.0, &zero, Objective::Mofme).total, 1.0);
        assert!(LossWeights { lambda_lb: -1.0, lambda_uc: 0.0 }.validate().is_err());
    }
}
