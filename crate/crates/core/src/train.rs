//! Adam training with warmup + cosine decay, per-kind evaluation and
//! routing statistics.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data::{Dataset, PerKind, Split, WeatherKind};
use crate::error::{Error, Result};
use crate::experts::ExpertMode;
use crate::losses::{self, LossReport};
use crate::metrics;
use crate::model::{ModelConfig, RestorationModel};
use crate::params::{Binder, ParamId, ParamStore};
use crate::rng::{streams, RngStream};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "best.mofm";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const TIMING_CSV: &str = "timing.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) decay.
    pub weight_decay: f64,
    pub warmup_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_epochs: 3,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::config("optim.lr must be positive and at least optim.lr_min"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("optim betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("optim.eps must be positive and optim.weight_decay nonnegative"));
        }
        Ok(())
    }

    /// Linear warmup over `warmup_epochs`, then cosine decay to `lr_min` at the last step.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize, total_steps: usize) -> f64 {
        let warm = (self.warmup_epochs * steps_per_epoch).min(total_steps);
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = total_steps.saturating_sub(warm + 1);
        if span == 0 {
            return self.lr;
        }
        let p = (step - warm) as f64 / span as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * p.min(1.0)).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Random horizontal flips of training batches.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("train.epochs and train.batch_size must be positive"));
        }
        Ok(())
    }
}

pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Option<Tensor<f64>>>,
    v: Vec<Option<Tensor<f64>>>,
    steps: Vec<u32>,
}

impl Adam {
    pub fn new(cfg: OptimConfig, params: usize) -> Self {
        Self {
            cfg,
            m: vec![None; params],
            v: vec![None; params],
            steps: vec![0; params],
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<f64>, grads: &[(ParamId, Tensor<f64>)], lr: f64) -> Result<()> {
        let c = &self.cfg;
        for (id, g) in grads {
            let i = id.0;
            if store.get(*id).shape() != g.shape() {
                return Err(Error::shape("adam", store.get(*id).shape(), g.shape()));
            }
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
            let p = store.value_mut(*id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_kind: PerKind<Quality>,
    pub counts: PerKind<usize>,
    /// Mean over every test image.
    pub average: Quality,
}

fn summarize(values: &[(WeatherKind, Quality)]) -> Result<EvalReport> {
    if values.is_empty() {
        return Err(Error::Empty("evaluation over zero samples".into()));
    }
    let mut sums = [Quality::default(); 3];
    let mut counts = [0usize; 3];
    let mut all = Quality::default();
    for (k, q) in values {
        sums[k.index()].psnr += q.psnr;
        sums[k.index()].ssim += q.ssim;
        counts[k.index()] += 1;
        all.psnr += q.psnr;
        all.ssim += q.ssim;
    }
    let mean = |q: Quality, n: usize| {
        if n == 0 {
            Quality {
                psnr: f64::NAN,
                ssim: f64::NAN,
            }
        } else {
            Quality {
                psnr: q.psnr / n as f64,
                ssim: q.ssim / n as f64,
            }
        }
    };
    Ok(EvalReport {
        per_kind: PerKind::from_array([0, 1, 2].map(|k| mean(sums[k], counts[k]))),
        counts: PerKind::from_array(counts),
        average: mean(all, values.len()),
    })
}

fn quality(pred: &Tensor<f64>, target: &Tensor<f64>) -> Result<Quality> {
    Ok(Quality {
        psnr: metrics::psnr(pred, target, 1.0)?,
        ssim: metrics::ssim(pred, target, 1.0)?,
    })
}

/// Metrics of the corrupted inputs themselves.
pub fn corrupted_baseline(split: &Split) -> Result<EvalReport> {
    let v = split
        .samples
        .iter()
        .map(|s| Ok((s.kind, quality(&s.corrupted, &s.clean)?)))
        .collect::<Result<Vec<_>>>()?;
    summarize(&v)
}

/// Per-image metrics of the model output, clamped to `[0, 1]`, on `split`.
pub fn evaluate(model: &RestorationModel, store: &ParamStore<f64>, split: &Split, batch: usize, seed: u64) -> Result<EvalReport> {
    let mut rng = RngStream::new(seed, streams::INFERENCE);
    let mut values = Vec::with_capacity(split.len());
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = split.batch(chunk, &[]);
        let tape = Tape::inference();
        let bx = Binder::frozen(&tape, store);
        let out = model.forward(&bx, tape.constant(x), &mut rng, false)?;
        let restored = out.restored.value().map(|v| v.clamp(0.0, 1.0));
        let per = restored.numel() / chunk.len();
        let shape = y.shape()[1..].to_vec();
        for (b, &i) in chunk.iter().enumerate() {
            let p = Tensor::new(shape.clone(), restored.data()[b * per..(b + 1) * per].to_vec())?;
            let t = Tensor::new(shape.clone(), y.data()[b * per..(b + 1) * per].to_vec())?;
            values.push((split.samples[i].kind, quality(&p, &t)?));
        }
    }
    summarize(&values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub lb_loss: f64,
    pub uc_loss: f64,
    pub total: f64,
    pub eval: EvalReport,
}

pub const METRICS_HEADER: [&str; 14] = [
    "epoch",
    "lr",
    "task_loss",
    "lb_loss",
    "uc_loss",
    "total",
    "psnr_rain",
    "ssim_rain",
    "psnr_haze",
    "ssim_haze",
    "psnr_snow",
    "ssim_snow",
    "psnr_avg",
    "ssim_avg",
];

fn f(v: f64) -> String {
    // Shortest round-trip formatting keeps CSV and JSON values identical.
    format!("{v:?}")
}

impl EpochRow {
    pub fn csv_fields(&self) -> Vec<String> {
        let q = &self.eval.per_kind;
        vec![
            self.epoch.to_string(),
            f(self.lr),
            f(self.task_loss),
            f(self.lb_loss),
            f(self.uc_loss),
            f(self.total),
            f(q.rain.psnr),
            f(q.rain.ssim),
            f(q.haze.psnr),
            f(q.haze.ssim),
            f(q.snow.psnr),
            f(q.snow.ssim),
            f(self.eval.average.psnr),
            f(self.eval.average.ssim),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub config_digest: String,
    pub model_digest: String,
    pub param_count: usize,
    pub baseline: EvalReport,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRow>,
}

impl MetricsLog {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(METRICS_HEADER)?;
        for row in &self.epochs {
            out.write_record(row.csv_fields())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn best(&self) -> Option<&EpochRow> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }

    /// Per-epoch training totals.
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.total).collect()
    }
}

/// Trailing moving average over `window` values (shorter at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Dense config whose total parameter count is as close as possible to `target`'s.
pub fn equal_param_dense(target: &ModelConfig) -> Result<ModelConfig> {
    target.validate()?;
    let goal = target.param_count() as i64;
    let mut dense = ModelConfig {
        expert_mode: ExpertMode::Dense,
        ..target.clone()
    };
    let count = |h: usize, c: &mut ModelConfig| {
        c.ffn_hidden = h;
        c.param_count() as i64
    };
    let (c0, c1) = (count(1, &mut dense), count(2, &mut dense));
    let slope = c1 - c0;
    let h = ((goal - c0) as f64 / slope as f64).round() as i64 + 1;
    let best = (h - 1..=h + 1)
        .filter(|&h| h >= 1)
        .min_by_key(|&h| (count(h as usize, &mut dense) - goal).abs())
        .expect("nonempty range") as usize;
    dense.ffn_hidden = best;
    dense.validate()?;
    Ok(dense)
}

fn max_abs(store: &ParamStore<f64>) -> f64 {
    store
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .fold(0.0f64, |a, v| a.max(v.abs()))
}

pub struct TrainOutcome {
    pub log: MetricsLog,
    pub model: RestorationModel,
    pub best_store: ParamStore<f64>,
    pub final_store: ParamStore<f64>,
    /// Seconds per epoch; kept apart from the metrics so they stay reproducible.
    pub epoch_seconds: Vec<f64>,
}

/// Trains `run` on `data`; nothing touches the filesystem.
pub fn train(run: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    run.validate()?;
    let cfg = &run.model;
    if data.train.height != cfg.height || data.train.width != cfg.width {
        return Err(Error::config(format!(
            "dataset images are {}x{} but the model expects {}x{}",
            data.train.height, data.train.width, cfg.height, cfg.width
        )));
    }
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Empty("training needs nonempty train and test splits".into()));
    }
    let seed = run.seed;
    let mut store = ParamStore::<f64>::new();
    let model = RestorationModel::build(cfg, &mut store, &mut RngStream::new(seed, streams::INIT))?;
    let mut adam = Adam::new(run.optim.clone(), store.len());
    let mut shuffle = RngStream::new(seed, streams::SHUFFLE);
    let mut augment = RngStream::new(seed, streams::AUGMENT);
    let mut dropout = RngStream::new(seed, streams::DROPOUT);
    let weights = run.loss.weights();
    let bs = run.train.batch_size;
    let steps_per_epoch = data.train.len().div_ceil(bs);
    let total_steps = steps_per_epoch * run.train.epochs;
    let mut step = 0;
    let mut rows = Vec::with_capacity(run.train.epochs);
    let mut seconds = Vec::with_capacity(run.train.epochs);
    let mut best: Option<(f64, usize, ParamStore<f64>)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=run.train.epochs {
        let start = Instant::now();
        shuffle.shuffle(&mut order);
        let mut acc = LossReport::default();
        let mut lr = 0.0;
        for chunk in order.chunks(bs) {
            let flip: Vec<bool> = chunk
                .iter()
                .map(|_| run.train.flip && augment.bernoulli(0.5))
                .collect();
            let (x, y) = data.train.batch(chunk, &flip);
            lr = run.optim.lr_at(step, steps_per_epoch, total_steps);
            let tape = Tape::new();
            let bx = Binder::new(&tape, &store);
            let out = model.forward(&bx, tape.constant(x), &mut dropout, true)?;
            let task = losses::mse(out.restored, tape.constant(y))?;
            let (total, report) = losses::objective(task, &out.aux, &weights, run.loss.objective)?;
            if !report.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch} step {step}: task {} lb {} uc {} total {} lr {lr:e} batch {} max|param| {}",
                    report.task_loss,
                    report.lb_loss,
                    report.uc_loss,
                    report.total,
                    chunk.len(),
                    max_abs(&store)
                )));
            }
            let g = tape.backward(total)?;
            let grads = bx.grads(&g);
            drop(bx);
            if let Some((id, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at epoch {epoch} step {step} (loss {})",
                    store.name(*id),
                    report.total
                )));
            }
            adam.step(&mut store, &grads, lr)?;
            let n = chunk.len() as f64;
            acc.task_loss += report.task_loss * n;
            acc.lb_loss += report.lb_loss * n;
            acc.uc_loss += report.uc_loss * n;
            acc.total += report.total * n;
            step += 1;
        }
        let n = data.train.len() as f64;
        let eval = evaluate(&model, &store, &data.test, bs, seed)?;
        let score = eval.average.psnr;
        if best.as_ref().map_or(true, |(b, _, _)| score > *b) {
            best = Some((score, epoch, store.clone()));
        }
        log::info!(
            "epoch {epoch}: loss {:.6} test psnr {:.3} dB ssim {:.4}",
            acc.total / n,
            score,
            eval.average.ssim
        );
        rows.push(EpochRow {
            epoch,
            lr,
            task_loss: acc.task_loss / n,
            lb_loss: acc.lb_loss / n,
            uc_loss: acc.uc_loss / n,
            total: acc.total / n,
            eval,
        });
        seconds.push(start.elapsed().as_secs_f64());
    }
    let (_, best_epoch, best_store) = best.expect("at least one epoch");
    let log = MetricsLog {
        config_digest: run.digest_hex(),
        model_digest: run.model_digest_hex(),
        param_count: store.numel(),
        baseline: corrupted_baseline(&data.test)?,
        best_epoch,
        epochs: rows,
    };
    Ok(TrainOutcome {
        log,
        model,
        best_store,
        final_store: store,
        epoch_seconds: seconds,
    })
}

impl TrainOutcome {
    /// Writes the checkpoint, config, metrics CSV/JSON and timing file into `dir`.
    pub fn save(&self, run: &RunConfig, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.best_store.save(dir.join(CHECKPOINT_FILE), &run.model_digest())?;
        fs::write(dir.join(CONFIG_FILE), run.to_toml_string())?;
        let mut csv_buf = Vec::new();
        self.log.write_csv(&mut csv_buf)?;
        fs::write(dir.join(METRICS_CSV), csv_buf)?;
        let mut json = serde_json::to_string_pretty(&self.log)?;
        json.push('\n');
        fs::write(dir.join(METRICS_JSON), json)?;
        let mut timing = String::from("epoch,seconds\n");
        for (i, s) in self.epoch_seconds.iter().enumerate() {
            timing.push_str(&format!("{},{s:.3}\n", i + 1));
        }
        fs::write(dir.join(TIMING_CSV), timing)?;
        Ok(())
    }
}

/// Loads a checkpoint for `cfg`, refusing one written for a different model config.
pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<(RestorationModel, ParamStore<f64>)> {
    let (digest, loaded) = ParamStore::<f64>::load(path)?;
    let expected = crate::config::model_digest(cfg)?;
    if digest != expected {
        return Err(Error::DigestMismatch {
            found: crate::config::digest_hex(&digest),
            expected: crate::config::digest_hex(&expected),
        });
    }
    let mut store = ParamStore::new();
    let model = RestorationModel::build(cfg, &mut store, &mut RngStream::new(0, streams::INIT))?;
    if store.copy_matching_from(&loaded) != store.len() || loaded.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint parameters do not match the model ({} stored, {} expected)",
            loaded.len(),
            store.len()
        )));
    }
    Ok((model, store))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerUsage {
    pub layer: usize,
    pub num_experts: usize,
    /// Selections per expert, per weather kind.
    pub counts: PerKind<Vec<usize>>,
    pub entropy_bits: PerKind<f64>,
    pub entropy_bits_all: f64,
    /// Mean ensemble variance over all tokens and experts; zero without UaR.
    pub mean_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterReport {
    pub layers: Vec<LayerUsage>,
}

impl RouterReport {
    /// Usage entropy averaged over layers.
    pub fn mean_entropy_bits(&self) -> f64 {
        self.layers.iter().map(|l| l.entropy_bits_all).sum::<f64>() / self.layers.len() as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "kind", "expert", "count", "share", "entropy_bits", "mean_variance"])?;
        for l in &self.layers {
            for kind in ["rain", "haze", "snow", "all"] {
                let (counts, entropy) = match kind.parse::<WeatherKind>() {
                    Ok(k) => (l.counts.get_ref(k).clone(), l.entropy_bits.get(k)),
                    Err(_) => (l.total_counts(), l.entropy_bits_all),
                };
                let total: usize = counts.iter().sum();
                for (e, &c) in counts.iter().enumerate() {
                    let share = if total == 0 { 0.0 } else { c as f64 / total as f64 };
                    out.write_record([
                        l.layer.to_string(),
                        kind.to_string(),
                        e.to_string(),
                        c.to_string(),
                        f(share),
                        f(entropy),
                        f(l.mean_variance),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

impl LayerUsage {
    pub fn total_counts(&self) -> Vec<usize> {
        (0..self.num_experts)
            .map(|e| WeatherKind::ALL.iter().map(|&k| self.counts.get_ref(k)[e]).sum())
            .collect()
    }
}

/// Shannon entropy in bits of a count histogram; zero for an empty one.
pub fn entropy_bits(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum()
}

/// Routing histograms over `split` in evaluation mode.
pub fn inspect_router(model: &RestorationModel, store: &ParamStore<f64>, split: &Split, batch: usize, seed: u64) -> Result<RouterReport> {
    let routed: Vec<(usize, usize)> = model
        .blocks
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.ffn.router().map(|r| (i, r.cfg.num_experts)))
        .collect();
    if routed.is_empty() {
        return Err(Error::config("no routed layers: the model is dense"));
    }
    let mut layers: Vec<LayerUsage> = routed
        .iter()
        .map(|&(layer, e)| LayerUsage {
            layer,
            num_experts: e,
            counts: PerKind {
                rain: vec![0; e],
                haze: vec![0; e],
                snow: vec![0; e],
            },
            entropy_bits: PerKind::from_array([0.0; 3]),
            entropy_bits_all: 0.0,
            mean_variance: 0.0,
        })
        .collect();
    let mut var_sum = vec![0.0; layers.len()];
    let mut var_n = vec![0usize; layers.len()];
    let mut rng = RngStream::new(seed, streams::INFERENCE);
    let n_tok = model.cfg.num_tokens();
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = split.batch(chunk, &[]);
        let tape = Tape::inference();
        let bx = Binder::frozen(&tape, store);
        let out = model.forward(&bx, tape.constant(x), &mut rng, false)?;
        for (l, a) in out.aux.iter().enumerate() {
            for (row, sel) in a.decision.selected.iter().enumerate() {
                let kind = split.samples[chunk[row / n_tok]].kind;
                let counts = layers[l].counts.get_mut(kind);
                for &e in sel {
                    counts[e] += 1;
                }
            }
            if let Some(s) = &a.stats {
                let v = s.diag_cov.value();
                var_sum[l] += v.data().iter().sum::<f64>();
                var_n[l] += v.numel();
            }
        }
    }
    for (l, u) in layers.iter_mut().enumerate() {
        u.entropy_bits = PerKind::from_array(WeatherKind::ALL.map(|k| entropy_bits(u.counts.get_ref(k))));
        u.entropy_bits_all = entropy_bits(&u.total_counts());
        u.mean_variance = if var_n[l] == 0 { 0.0 } else { var_sum[l] / var_n[l] as f64 };
    }
    Ok(RouterReport { layers })
}
