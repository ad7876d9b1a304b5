//! Parameter counts, analytic MACs and wall-clock latency across expert counts.
//!
//! MACs count matmuls, convolutions, attention score and value products and
//! every router pass; biases, elementwise ops and softmax are excluded.
//! Sparse layers count `K` expert evaluations per token.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::experts::{ffn_params, fm_params, ExpertMode};
use crate::model::{ModelConfig, RestorationModel};
use crate::params::{Binder, ParamStore};
use crate::rng::{streams, RngStream};
use crate::routing::RouterMode;
use crate::tensor::{Scalar, Tensor};

pub const MIN_TRIALS: usize = 20;
pub const MIN_WARMUP: usize = 5;

/// `tokens · in · out` for a dense map.
pub fn linear_macs(tokens: u64, in_dim: u64, out_dim: u64) -> u64 {
    tokens * in_dim * out_dim
}

/// Per-image multiply-accumulates of one forward pass.
pub fn analytic_macs(cfg: &ModelConfig) -> u64 {
    let px = (cfg.height * cfg.width) as u64;
    let conv = |cin: usize, cout: usize| px * 9 * (cin * cout) as u64;
    let (c, d, n) = (cfg.head_channels, cfg.dim as u64, cfg.num_tokens() as u64);
    let head = conv(cfg.in_channels, c) + 4 * conv(c, c);
    let tail = 2 * conv(c, c) + conv(c, c / 2) + 2 * conv(c / 2, c / 2) + conv(c / 2, cfg.in_channels);
    let patch = cfg.patch_len() as u64;
    let tokens = linear_macs(n, patch, d) + linear_macs(n, d, patch);
    let attention = 4 * linear_macs(n, d, d) + 2 * n * n * d;
    let h = cfg.hidden() as u64;
    let ffn = 2 * d * h;
    let (e, k) = (cfg.router.num_experts as u64, cfg.router.top_k as u64);
    let passes = if cfg.router.mode == RouterMode::Linear {
        1
    } else {
        cfg.router.mc_passes as u64 + 1
    };
    let slot = match cfg.expert_mode {
        ExpertMode::Dense => ffn,
        ExpertMode::Moe => k * ffn + passes * e * d,
        ExpertMode::Fme => k * 2 * d * d + ffn + passes * e * d,
    };
    head + tail + tokens + cfg.depth as u64 * (attention + n * slot)
}

/// `1 − (E·|FM| + |FFN|) / (E·|FFN|)`, as a fraction.
pub fn closed_form_saving(dim: usize, hidden: usize, experts: usize) -> f64 {
    let ffn = ffn_params(dim, hidden) as f64;
    let fm = fm_params(dim) as f64;
    let e = experts as f64;
    1.0 - (fm * e + ffn) / (ffn * e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub trials: usize,
    pub warmup: usize,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64], warmup: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("latency samples".into()));
        }
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self {
            median_ms: quantile(&s, 0.5),
            iqr_ms: quantile(&s, 0.75) - quantile(&s, 0.25),
            trials: s.len(),
            warmup,
        })
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// A model and its parameters ready for timed inference.
pub struct BenchModel<T: Scalar> {
    pub model: RestorationModel,
    pub store: ParamStore<T>,
}

impl<T: Scalar> BenchModel<T> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store64 = ParamStore::<f64>::new();
        let mut rng = RngStream::new(seed, streams::INIT);
        let model = RestorationModel::build(cfg, &mut store64, &mut rng)?;
        Ok(Self {
            model,
            store: store64.cast(),
        })
    }

    /// One untaped forward pass; returns a checksum so it cannot be elided.
    pub fn run(&self, input: &Tensor<T>, rng: &mut RngStream) -> Result<f64> {
        let tape = Tape::inference();
        let bx = Binder::frozen(&tape, &self.store);
        let out = self.model.forward(&bx, tape.constant(input.clone()), rng, false)?;
        Ok(out.restored.value().data()[0].as_f64())
    }
}

pub fn bench_input<T: Scalar>(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<T> {
    let mut rng = RngStream::new(seed, streams::BENCH);
    Tensor::from_fn([batch, cfg.in_channels, cfg.height, cfg.width], |_| T::of(rng.uniform()))
}

fn check_trials(trials: usize, warmup: usize) -> Result<()> {
    if trials < MIN_TRIALS {
        return Err(Error::config(format!("latency needs at least {MIN_TRIALS} trials, got {trials}")));
    }
    if warmup < MIN_WARMUP {
        return Err(Error::config(format!("latency needs at least {MIN_WARMUP} warmups, got {warmup}")));
    }
    Ok(())
}

/// Times several models round-robin, so slow drifts of the machine hit all of them alike.
pub fn latency_interleaved<T: Scalar>(
    models: &[&BenchModel<T>],
    batch: usize,
    trials: usize,
    warmup: usize,
    seed: u64,
) -> Result<Vec<LatencyStats>> {
    check_trials(trials, warmup)?;
    let inputs: Vec<Tensor<T>> = models.iter().map(|m| bench_input(&m.model.cfg, batch, seed)).collect();
    let mut sink = 0.0;
    let mut samples = vec![Vec::with_capacity(trials); models.len()];
    for round in 0..warmup + trials {
        for (i, m) in models.iter().enumerate() {
            let mut rng = RngStream::new(seed, streams::INFERENCE);
            let start = Instant::now();
            sink += m.run(&inputs[i], &mut rng)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if round >= warmup {
                samples[i].push(ms);
            }
        }
    }
    std::hint::black_box(sink);
    samples.iter().map(|s| LatencyStats::from_samples(s, warmup)).collect()
}

pub fn latency_bench<T: Scalar>(model: &BenchModel<T>, batch: usize, trials: usize, warmup: usize, seed: u64) -> Result<LatencyStats> {
    Ok(latency_interleaved(&[model], batch, trials, warmup, seed)?.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub mode: ExpertMode,
    pub num_experts: usize,
    pub top_k: usize,
    pub dim: usize,
    pub params_total: usize,
    pub params_experts: usize,
    pub macs: u64,
    pub latency_ms_median: f64,
    pub latency_ms_iqr: f64,
    /// FME rows: expert-subsystem saving against the MoE row with the same E.
    pub saving_pct_vs_moe: Option<f64>,
    pub trials: usize,
    pub warmup: usize,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: ModelConfig,
    pub expert_counts: Vec<usize>,
    pub modes: Vec<ExpertMode>,
    pub batch: usize,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Skip timing (counts only).
    pub measure_latency: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let mut base = ModelConfig::default();
        base.router.top_k = 2;
        Self {
            base,
            expert_counts: vec![8, 16, 64, 128],
            modes: vec![ExpertMode::Moe, ExpertMode::Fme],
            batch: 16,
            trials: 20,
            warmup: 5,
            seed: 0,
            measure_latency: true,
        }
    }
}

/// Parameter counts, MACs and (optionally) latency for each `(mode, E)`.
///
/// `digest` maps a model config to the digest stored in each row.
pub fn scaling_sweep(sweep: &SweepConfig, digest: impl Fn(&ModelConfig) -> String) -> Result<Vec<EfficiencyReport>> {
    if sweep.measure_latency {
        check_trials(sweep.trials, sweep.warmup)?;
    }
    let mut rows = Vec::new();
    let dense_done = std::cell::Cell::new(false);
    for &e in &sweep.expert_counts {
        let mut group: Vec<(ModelConfig, BenchModel<f32>)> = Vec::new();
        for &mode in &sweep.modes {
            if mode == ExpertMode::Dense && dense_done.replace(true) {
                continue;
            }
            let mut cfg = sweep.base.clone();
            cfg.expert_mode = mode;
            cfg.router.num_experts = e;
            cfg.validate()?;
            let bm = BenchModel::<f32>::build(&cfg, sweep.seed)?;
            group.push((cfg, bm));
        }
        let lat = if sweep.measure_latency {
            let refs: Vec<&BenchModel<f32>> = group.iter().map(|(_, m)| m).collect();
            latency_interleaved(&refs, sweep.batch, sweep.trials, sweep.warmup, sweep.seed)?
                .into_iter()
                .map(Some)
                .collect()
        } else {
            vec![None; group.len()]
        };
        let moe_experts = group
            .iter()
            .find(|(c, _)| c.expert_mode == ExpertMode::Moe)
            .map(|(_, m)| m.model.expert_param_count());
        for ((cfg, bm), lat) in group.iter().zip(lat) {
            let params_experts = bm.model.expert_param_count();
            let saving = match (cfg.expert_mode, moe_experts) {
                (ExpertMode::Fme, Some(moe)) => Some(100.0 * (1.0 - params_experts as f64 / moe as f64)),
                _ => None,
            };
            let lat: Option<LatencyStats> = lat;
            rows.push(EfficiencyReport {
                mode: cfg.expert_mode,
                num_experts: if cfg.expert_mode == ExpertMode::Dense { 0 } else { e },
                top_k: cfg.router.top_k,
                dim: cfg.dim,
                params_total: bm.store.numel(),
                params_experts,
                macs: analytic_macs(cfg),
                latency_ms_median: lat.as_ref().map_or(f64::NAN, |l| l.median_ms),
                latency_ms_iqr: lat.as_ref().map_or(f64::NAN, |l| l.iqr_ms),
                saving_pct_vs_moe: saving,
                trials: lat.as_ref().map_or(0, |l| l.trials),
                warmup: lat.as_ref().map_or(0, |l| l.warmup),
                config_digest: digest(cfg),
            });
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: [&str; 13] = [
    "mode",
    "E",
    "K",
    "D",
    "params_total",
    "params_experts",
    "macs",
    "latency_ms_median",
    "latency_ms_iqr",
    "saving_pct_vs_moe",
    "trials",
    "warmup",
    "config_digest",
];

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn write_csv<W: Write>(rows: &[EfficiencyReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in rows {
        out.write_record([
            r.mode.as_str().to_string(),
            r.num_experts.to_string(),
            r.top_k.to_string(),
            r.dim.to_string(),
            r.params_total.to_string(),
            r.params_experts.to_string(),
            r.macs.to_string(),
            fmt_f64(r.latency_ms_median),
            fmt_f64(r.latency_ms_iqr),
            r.saving_pct_vs_moe.map(fmt_f64).unwrap_or_default(),
            r.trials.to_string(),
            r.warmup.to_string(),
            r.config_digest.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<EfficiencyReport>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Format(format!("unexpected bench CSV header {header:?}")));
    }
    let bad = |f: &str, v: &str| Error::Format(format!("bad {f} value {v:?}"));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let int = |i: usize| -> Result<u64> { rec[i].parse().map_err(|_| bad(CSV_HEADER[i], &rec[i])) };
        let float = |i: usize| -> Result<f64> {
            if rec[i].is_empty() {
                Ok(f64::NAN)
            } else {
                rec[i].parse().map_err(|_| bad(CSV_HEADER[i], &rec[i]))
            }
        };
        let saving = float(9)?;
        rows.push(EfficiencyReport {
            mode: rec[0].parse()?,
            num_experts: int(1)? as usize,
            top_k: int(2)? as usize,
            dim: int(3)? as usize,
            params_total: int(4)? as usize,
            params_experts: int(5)? as usize,
            macs: int(6)?,
            latency_ms_median: float(7)?,
            latency_ms_iqr: float(8)?,
            saving_pct_vs_moe: if saving.is_nan() { None } else { Some(saving) },
            trials: int(10)? as usize,
            warmup: int(11)? as usize,
            config_digest: rec[12].to_string(),
        });
    }
    Ok(rows)
}

/// Human-readable table plus MoE-vs-FME savings per expert count.
pub fn summary(rows: &[EfficiencyReport]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<6} {:>5} {:>12} {:>14} {:>12} {:>12} {:>10}\n",
        "mode", "E", "params", "expert params", "MACs", "median ms", "IQR ms"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<6} {:>5} {:>12} {:>14} {:>12} {:>12.3} {:>10.3}\n",
            r.mode.as_str(),
            r.num_experts,
            r.params_total,
            r.params_experts,
            r.macs,
            r.latency_ms_median,
            r.latency_ms_iqr
        ));
    }
    for fme in rows.iter().filter(|r| r.mode == ExpertMode::Fme) {
        let Some(moe) = rows
            .iter()
            .find(|r| r.mode == ExpertMode::Moe && r.num_experts == fme.num_experts)
        else {
            continue;
        };
        let lat = 100.0 * (1.0 - fme.latency_ms_median / moe.latency_ms_median);
        let macs = 100.0 * (1.0 - fme.macs as f64 / moe.macs as f64);
        s.push_str(&format!(
            "E={:<4} FME vs MoE: expert params -{:.2}%, total params -{:.2}%, MACs -{:.2}%, latency -{}\n",
            fme.num_experts,
            fme.saving_pct_vs_moe.unwrap_or(f64::NAN),
            100.0 * (1.0 - fme.params_total as f64 / moe.params_total as f64),
            macs,
            if lat.is_nan() {
                "n/a".to_string()
            } else {
                format!("{lat:.1}% (over {} trials, {} warmup)", fme.trials, fme.warmup)
            }
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::RouterConfig;

    #[test]
    fn one_linear_layer_macs() {
        assert_eq!(linear_macs(16, 64, 64), 16 * 64 * 64);
    }

    #[test]
    fn depth_adds_one_block_of_macs() {
        let a = ModelConfig::default();
        let b = ModelConfig { depth: 3, ..a.clone() };
        let (n, d) = (a.num_tokens() as u64, a.dim as u64);
        let (e, k, h) = (a.router.num_experts as u64, a.router.top_k as u64, a.hidden() as u64);
        let block = 4 * n * d * d + 2 * n * n * d + n * (k * 2 * d * d + 2 * d * h + e * d);
        assert_eq!(analytic_macs(&b) - analytic_macs(&a), block);
    }

    #[test]
    fn macs_independent_of_expert_count() {
        for mode in [ExpertMode::Moe, ExpertMode::Fme] {
            let mk = |e| ModelConfig {
                expert_mode: mode,
                router: RouterConfig::linear(e, 2),
                ..ModelConfig::default()
            };
            // only the router term E·D moves with E
            let per_expert = (mk(8).depth * mk(8).num_tokens() * mk(8).dim) as u64;
            assert_eq!(analytic_macs(&mk(64)) - analytic_macs(&mk(8)), 56 * per_expert);
        }
    }

    #[test]
    fn fme_cheaper_than_moe_at_equal_k() {
        let mk = |mode| ModelConfig {
            expert_mode: mode,
            router: RouterConfig::linear(64, 2),
            ..ModelConfig::default()
        };
        assert!(analytic_macs(&mk(ExpertMode::Fme)) < analytic_macs(&mk(ExpertMode::Moe)));
    }

    #[test]
    fn closed_form_limit() {
        let limit = 1.0 - fm_params(64) as f64 / ffn_params(64, 256) as f64;
        assert!((limit - 0.7485).abs() < 1e-3);
        assert!(closed_form_saving(64, 256, 64) > 0.70);
        assert!(closed_form_saving(64, 256, 128) > 0.72);
        assert!(closed_form_saving(64, 256, 100_000) < limit);
    }

    #[test]
    fn quantiles_and_trial_checks() {
        let s = LatencyStats::from_samples(&[4.0, 1.0, 3.0, 2.0, 5.0], 5).unwrap();
        assert_eq!(s.median_ms, 3.0);
        assert_eq!(s.iqr_ms, 2.0);
        assert!(check_trials(19, 5).is_err());
        assert!(check_trials(20, 4).is_err());
        assert!(check_trials(20, 5).is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let sweep = SweepConfig {
            expert_counts: vec![4, 8],
            modes: vec![ExpertMode::Dense, ExpertMode::Moe, ExpertMode::Fme],
            measure_latency: false,
            ..SweepConfig::default()
        };
        let rows = scaling_sweep(&sweep, |_| "abc".into()).unwrap();
        assert_eq!(rows.len(), 5);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.mode, b.mode);
            assert_eq!(a.params_total, b.params_total);
            assert_eq!(a.saving_pct_vs_moe, b.saving_pct_vs_moe);
            assert!(b.latency_ms_median.is_nan());
        }
        assert!(summary(&rows).contains("FME vs MoE"));
    }
}
