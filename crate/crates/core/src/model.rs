//! The restoration transformer: conv head, patch tokens with position
//! embedding, encoder blocks whose FFN slot holds a dense, MoE or FME layer,
//! an inverted bottleneck back to pixels and a conv tail.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::experts::{ExpertLayer, ExpertMode, LayerAux, Linear};
use crate::params::{Binder, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::routing::RouterConfig;
use crate::tensor::Scalar;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub head_channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub expert_mode: ExpertMode,
    pub router: RouterConfig,
    pub ffn_scale: usize,
    /// Overrides `ffn_scale · dim` when nonzero.
    pub ffn_hidden: usize,
    /// Adds the input image to the tail output.
    pub global_residual: bool,
    /// Starts the last tail conv at zero, so with `global_residual` the
    /// untrained model is the identity.
    pub tail_zero_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            in_channels: 3,
            head_channels: 8,
            patch: 8,
            dim: 64,
            depth: 2,
            heads: 4,
            expert_mode: ExpertMode::Fme,
            router: RouterConfig::default(),
            ffn_scale: 4,
            ffn_hidden: 0,
            global_residual: true,
            tail_zero_init: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("in_channels", self.in_channels),
            ("head_channels", self.head_channels),
            ("patch", self.patch),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("ffn_scale", self.ffn_scale),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{k} must be positive")));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(format!(
                "image {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model.dim {} is not divisible by model.heads {}",
                self.dim, self.heads
            )));
        }
        if self.head_channels < 2 || self.head_channels % 2 != 0 {
            return Err(Error::config("model.head_channels must be even and at least 2"));
        }
        if self.expert_mode != ExpertMode::Dense {
            self.router.validate()?;
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn hidden(&self) -> usize {
        if self.ffn_hidden > 0 {
            self.ffn_hidden
        } else {
            self.ffn_scale * self.dim
        }
    }

    pub fn patch_len(&self) -> usize {
        self.head_channels * self.patch * self.patch
    }

    /// Closed-form parameter count of the whole model.
    pub fn param_count(&self) -> usize {
        let (c, d, n, e) = (self.head_channels, self.dim, self.num_tokens(), self.router.num_experts);
        let conv = |cin: usize, cout: usize| 9 * cin * cout + cout;
        let res = |ch: usize| 2 * conv(ch, ch);
        let ffn = crate::experts::ffn_params(d, self.hidden());
        let slot = match self.expert_mode {
            ExpertMode::Dense => ffn,
            ExpertMode::Moe => e * ffn + e * d,
            ExpertMode::Fme => e * crate::experts::fm_params(d) + ffn + e * d,
        };
        let block = 4 * d + 4 * (d * d + d) + slot;
        let head = conv(self.in_channels, c) + 2 * res(c);
        let tokens = (self.patch_len() * d + d) + n * d + (d * self.patch_len() + self.patch_len());
        let tail = res(c) + conv(c, c / 2) + res(c / 2) + conv(c / 2, self.in_channels);
        head + tokens + self.depth * block + tail
    }

    /// Closed-form parameter count of the FFN slots (routers excluded).
    pub fn expert_param_count(&self) -> usize {
        let (d, e) = (self.dim, self.router.num_experts);
        let ffn = crate::experts::ffn_params(d, self.hidden());
        self.depth
            * match self.expert_mode {
                ExpertMode::Dense => ffn,
                ExpertMode::Moe => e * ffn,
                ExpertMode::Fme => e * crate::experts::fm_params(d) + ffn,
            }
    }
}

/// 3×3 (or any odd) same-padded convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut RngStream, name: &str, cin: usize, cout: usize, zero: bool) -> Result<Self> {
        let shape = [cout, cin, 3, 3];
        let w = if zero {
            store.add_const(format!("{name}.w"), &shape, 0.0)?
        } else {
            store.add_uniform(format!("{name}.w"), &shape, 1.0 / ((cin * 9) as f64).sqrt(), rng)?
        };
        let b = store.add_const(format!("{name}.b"), &[cout], 0.0)?;
        Ok(Self { w, b })
    }

    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(bx.var(self.w), bx.var(self.b))
    }
}

/// `x + conv(GELU(conv(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
}

impl ResBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut RngStream, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            c1: Conv::new(store, rng, &format!("{name}.c1"), ch, ch, false)?,
            c2: Conv::new(store, rng, &format!("{name}.c2"), ch, ch, false)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.c1.forward(bx, x)?.gelu();
        x.add(self.c2.forward(bx, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_const(format!("{name}.g"), &[dim], 1.0)?,
            bias: store.add_const(format!("{name}.b"), &[dim], 0.0)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(LN_EPS).mul(bx.var(self.gain))?.add(bx.var(self.bias))
    }
}

/// Multi-head scaled dot-product self-attention over each image's tokens.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut RngStream, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        let mut lin = |s: &str| Linear::new(store, rng, &format!("{name}.{s}"), dim, dim, true);
        Ok(Self {
            wq: lin("wq")?,
            wk: lin("wk")?,
            wv: lin("wv")?,
            wo: lin("wo")?,
            heads,
        })
    }

    /// `x: [B·N, D]` holding `batch` sequences of `N` tokens.
    pub fn forward<'t, T: Scalar>(&self, bx: &Binder<'t, '_, T>, x: Var<'t, T>, batch: usize) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (rows, d) = (s[0], s[1]);
        if rows % batch != 0 {
            return Err(Error::dim("attention", format!("{rows} tokens for batch {batch}")));
        }
        let (n, h) = (rows / batch, self.heads);
        let dh = d / h;
        let split = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            v.reshape(&[batch, n, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[batch * h, n, dh])
        };
        let q = split(self.wq.forward(bx, x)?)?;
        let k = split(self.wk.forward(bx, x)?)?;
        let v = split(self.wv.forward(bx, x)?)?;
        let attn = q.matmul_t(k)?.scale(1.0 / (dh as f64).sqrt()).softmax(2)?;
        let ctx = attn
            .matmul(v)?
            .reshape(&[batch, h, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[rows, d])?;
        self.wo.forward(bx, ctx)
    }

    pub fn macs(&self, tokens: usize) -> usize {
        let d = self.wq.in_dim;
        4 * tokens * d * d + 2 * tokens * tokens * d
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: ExpertLayer,
}

#[derive(Clone, Debug)]
pub struct RestorationModel {
    pub cfg: ModelConfig,
    pub head: Conv,
    pub head_res: [ResBlock; 2],
    pub embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub unembed: Linear,
    pub tail_res1: ResBlock,
    pub tail_conv1: Conv,
    pub tail_res2: ResBlock,
    pub tail_conv2: Conv,
}

#[derive(Clone, Debug)]
pub struct ModelOutput<'t, T: Scalar = f64> {
    pub restored: Var<'t, T>,
    /// One entry per routed encoder block.
    pub aux: Vec<LayerAux<'t, T>>,
}

impl RestorationModel {
    /// Creates the parameters in `store`, drawn from `rng` in a fixed order.
    pub fn build<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.head_channels;
        let head = Conv::new(store, rng, "head.conv", cfg.in_channels, c, false)?;
        let head_res = [
            ResBlock::new(store, rng, "head.res0", c)?,
            ResBlock::new(store, rng, "head.res1", c)?,
        ];
        let embed = Linear::new(store, rng, "embed", cfg.patch_len(), cfg.dim, true)?;
        let pos = store.add_uniform("pos", &[cfg.num_tokens(), cfg.dim], 0.02, rng)?;
        let blocks = (0..cfg.depth)
            .map(|l| {
                let name = format!("blocks.{l}");
                Ok(EncoderBlock {
                    ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.dim)?,
                    attn: Attention::new(store, rng, &format!("{name}.attn"), cfg.dim, cfg.heads)?,
                    ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.dim)?,
                    ffn: ExpertLayer::new(store, rng, &name, cfg.expert_mode, cfg.dim, cfg.hidden(), &cfg.router)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let unembed = Linear::new(store, rng, "unembed", cfg.dim, cfg.patch_len(), true)?;
        let tail_res1 = ResBlock::new(store, rng, "tail.res0", c)?;
        let tail_conv1 = Conv::new(store, rng, "tail.conv0", c, c / 2, false)?;
        let tail_res2 = ResBlock::new(store, rng, "tail.res1", c / 2)?;
        let tail_conv2 = Conv::new(store, rng, "tail.conv1", c / 2, cfg.in_channels, cfg.tail_zero_init)?;
        Ok(Self {
            cfg: cfg.clone(),
            head,
            head_res,
            embed,
            pos,
            blocks,
            unembed,
            tail_res1,
            tail_conv1,
            tail_res2,
            tail_conv2,
        })
    }

    /// Restores `[B, C, H, W]` (or a single `[C, H, W]`) images.
    ///
    /// `rng` feeds the router's MC-dropout passes.
    pub fn forward<'t, T: Scalar>(
        &self,
        bx: &Binder<'t, '_, T>,
        image: Var<'t, T>,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<ModelOutput<'t, T>> {
        let cfg = &self.cfg;
        let shape = image.shape();
        let single = shape.len() == 3;
        let x = if single {
            let mut s = vec![1];
            s.extend(&shape);
            image.reshape(&s)?
        } else {
            image
        };
        let s = x.shape();
        if s.len() != 4 || s[1..] != [cfg.in_channels, cfg.height, cfg.width] {
            return Err(Error::shape(
                "model input",
                &shape,
                &[cfg.in_channels, cfg.height, cfg.width],
            ));
        }
        let b = s[0];
        let (c, p, d, n) = (cfg.head_channels, cfg.patch, cfg.dim, cfg.num_tokens());
        let (gh, gw) = (cfg.height / p, cfg.width / p);

        let mut f = self.head.forward(bx, x)?;
        for r in &self.head_res {
            f = r.forward(bx, f)?;
        }

        let patches = f
            .reshape(&[b, c, gh, p, gw, p])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[b * n, c * p * p])?;
        let mut t = self
            .embed
            .forward(bx, patches)?
            .reshape(&[b, n, d])?
            .add(bx.var(self.pos))?
            .reshape(&[b * n, d])?;

        let mut aux = Vec::new();
        for blk in &self.blocks {
            let y = blk.attn.forward(bx, blk.ln1.forward(bx, t)?, b)?;
            t = t.add(y)?;
            let (z, a) = blk.ffn.forward(bx, blk.ln2.forward(bx, t)?, rng, training)?;
            t = t.add(z)?;
            aux.extend(a);
        }

        let g = self
            .unembed
            .forward(bx, t)?
            .reshape(&[b, gh, gw, c, p, p])?
            .permute(&[0, 3, 1, 4, 2, 5])?
            .reshape(&[b, c, cfg.height, cfg.width])?;
        let mut out = self.tail_res1.forward(bx, g)?;
        out = self.tail_conv1.forward(bx, out)?;
        out = self.tail_res2.forward(bx, out)?;
        out = self.tail_conv2.forward(bx, out)?;
        if cfg.global_residual {
            out = out.add(x)?;
        }
        if single {
            out = out.reshape(&shape)?;
        }
        Ok(ModelOutput { restored: out, aux })
    }

    pub fn routed_layers(&self) -> usize {
        self.blocks.iter().filter(|b| b.ffn.router().is_some()).count()
    }

    /// Parameter count by walking the built layers.
    pub fn expert_param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.ffn.expert_params()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::check_param_gradients;
    use crate::rng::streams;
    use crate::Tensor;

    fn tiny(mode: ExpertMode) -> ModelConfig {
        ModelConfig {
            height: 8,
            width: 8,
            head_channels: 2,
            patch: 4,
            dim: 8,
            depth: 1,
            heads: 2,
            expert_mode: mode,
            router: RouterConfig::linear(3, 2),
            ffn_scale: 2,
            global_residual: false,
            tail_zero_init: false,
            ..ModelConfig::default()
        }
    }

    fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore, RestorationModel) {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed, streams::INIT);
        let model = RestorationModel::build(cfg, &mut store, &mut rng).unwrap();
        (store, model)
    }

    fn image(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, streams::DATA_CLEAN);
        Tensor::from_fn([b, cfg.in_channels, cfg.height, cfg.width], |_| rng.uniform())
    }

    fn run(store: &ParamStore, model: &RestorationModel, x: &Tensor) -> Tensor {
        let tape = Tape::inference();
        let bx = Binder::new(&tape, store);
        let mut rng = RngStream::new(0, streams::INFERENCE);
        let out = model.forward(&bx, tape.constant(x.clone()), &mut rng, false).unwrap();
        out.restored.value().as_ref().clone()
    }

    #[test]
    fn default_token_count() {
        assert_eq!(ModelConfig::default().num_tokens(), 16);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut c = ModelConfig::default();
        c.patch = 5;
        assert_eq!(c.validate().unwrap_err().kind(), "config");
        let mut c = ModelConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shape_preserved_for_all_modes() {
        for mode in [ExpertMode::Dense, ExpertMode::Moe, ExpertMode::Fme] {
            let cfg = tiny(mode);
            let (store, model) = build(&cfg, 1);
            let x = image(&cfg, 2, 1);
            assert_eq!(run(&store, &model, &x).shape(), x.shape());
        }
    }

    #[test]
    fn single_image_input() {
        let cfg = tiny(ExpertMode::Fme);
        let (store, model) = build(&cfg, 1);
        let x = Tensor::<f64>::full([3, 8, 8], 0.5);
        assert_eq!(run(&store, &model, &x).shape(), &[3, 8, 8]);
        let wrong = Tensor::<f64>::zeros([3, 8, 4]);
        let tape = Tape::inference();
        let bx = Binder::new(&tape, &store);
        let mut rng = RngStream::new(0, streams::INFERENCE);
        assert!(model.forward(&bx, tape.constant(wrong), &mut rng, false).is_err());
    }

    #[test]
    fn zero_tail_gives_constant_bias_image() {
        let cfg = tiny(ExpertMode::Moe);
        let (mut store, model) = build(&cfg, 2);
        store.set(model.tail_conv2.w, Tensor::zeros([3, 1, 3, 3])).unwrap();
        store.set(model.tail_conv2.b, Tensor::from_f64([3], &[0.1, 0.2, 0.3]).unwrap()).unwrap();
        let y = run(&store, &model, &image(&cfg, 1, 2));
        for c in 0..3 {
            assert!((0..64).all(|i| y.data()[c * 64 + i] == [0.1, 0.2, 0.3][c]));
        }
    }

    #[test]
    fn zero_init_tail_with_residual_is_identity() {
        let mut cfg = tiny(ExpertMode::Fme);
        cfg.global_residual = true;
        cfg.tail_zero_init = true;
        let (store, model) = build(&cfg, 3);
        let x = image(&cfg, 2, 3);
        assert_eq!(run(&store, &model, &x), x);
    }

    #[test]
    fn single_identity_fme_equals_dense_bitwise() {
        let mut dense_cfg = tiny(ExpertMode::Dense);
        dense_cfg.router = RouterConfig::linear(1, 1);
        let fme_cfg = ModelConfig {
            expert_mode: ExpertMode::Fme,
            ..dense_cfg.clone()
        };
        let (dense_store, dense) = build(&dense_cfg, 4);
        let (mut fme_store, fme) = build(&fme_cfg, 5);
        let copied = fme_store.copy_matching_from(&dense_store);
        assert_eq!(copied, dense_store.len());
        let x = image(&dense_cfg, 2, 4);
        let a = run(&dense_store, &dense, &x);
        let b = run(&fme_store, &fme, &x);
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn closed_form_counts_match_live_models() {
        for mode in [ExpertMode::Dense, ExpertMode::Moe, ExpertMode::Fme] {
            for cfg in [tiny(mode), ModelConfig { expert_mode: mode, ..ModelConfig::default() }] {
                let (store, model) = build(&cfg, 0);
                assert_eq!(store.numel(), cfg.param_count(), "{mode}");
                assert_eq!(model.expert_param_count(), cfg.expert_param_count());
            }
        }
    }

    #[test]
    fn each_moe_expert_adds_one_ffn_per_layer() {
        let mut cfg = ModelConfig {
            expert_mode: ExpertMode::Moe,
            ..ModelConfig::default()
        };
        cfg.router = RouterConfig::linear(8, 2);
        let (sa, ma) = build(&cfg, 0);
        cfg.router = RouterConfig::linear(7, 2);
        let (sb, mb) = build(&cfg, 0);
        assert_eq!(ma.expert_param_count() - mb.expert_param_count(), cfg.depth * 33088);
        // the router also grows by one row per layer
        assert_eq!(sa.numel() - sb.numel(), cfg.depth * (33088 + cfg.dim));
    }

    #[test]
    fn position_embedding_breaks_patch_symmetry() {
        let cfg = tiny(ExpertMode::Dense);
        let (store, model) = build(&cfg, 6);
        let x = image(&cfg, 1, 6);
        // swap the top-left and bottom-right 4x4 patches
        let mut y = x.clone();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let a = c * 64 + i * 8 + j;
                    let b = c * 64 + (i + 4) * 8 + j + 4;
                    y.data_mut().swap(a, b);
                }
            }
        }
        let (ox, oy) = (run(&store, &model, &x), run(&store, &model, &y));
        let mut oy_back = oy.clone();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    oy_back.data_mut().swap(c * 64 + i * 8 + j, c * 64 + (i + 4) * 8 + j + 4);
                }
            }
        }
        assert!(ox.max_abs_diff(&oy_back) > 1e-9);
    }

    fn attention_oracle(store: &ParamStore, name: &str, x: &Tensor, heads: usize) -> Tensor {
        let p = |s: &str| store.by_name(&format!("{name}.{s}")).unwrap().clone();
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let proj = |w: &str| {
            let (wt, bt) = (p(&format!("{w}.w")), p(&format!("{w}.b")));
            Tensor::from_fn([n, d], |i| {
                let (r, c) = (i / d, i % d);
                bt.data()[c] + (0..d).map(|k| x.at(&[r, k]) * wt.at(&[k, c])).sum::<f64>()
            })
        };
        let (q, k, v) = (proj("wq"), proj("wk"), proj("wv"));
        let dh = d / heads;
        let mut ctx = Tensor::<f64>::zeros([n, d]);
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|c| q.at(&[i, h * dh + c]) * k.at(&[j, h * dh + c])).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..n {
                    let a = (scores[j] - m).exp() / z;
                    for c in 0..dh {
                        ctx.data_mut()[i * d + h * dh + c] += a * v.at(&[j, h * dh + c]);
                    }
                }
            }
        }
        let (wo, bo) = (p("wo.w"), p("wo.b"));
        Tensor::from_fn([n, d], |i| {
            let (r, c) = (i / d, i % d);
            bo.data()[c] + (0..d).map(|k| ctx.at(&[r, k]) * wo.at(&[k, c])).sum::<f64>()
        })
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngStream::new(7, streams::INIT);
        let attn = Attention::new(&mut store, &mut rng, "a", 8, 2).unwrap();
        let x = Tensor::from_fn([10, 8], |_| rng.normal());
        let tape = Tape::inference();
        let bx = Binder::new(&tape, &store);
        // two sequences of five tokens each
        let y = attn.forward(&bx, tape.constant(x.clone()), 2).unwrap().value();
        for s in 0..2 {
            let xs = Tensor::new([5, 8], x.data()[s * 40..(s + 1) * 40].to_vec()).unwrap();
            let o = attention_oracle(&store, "a", &xs, 2);
            let got = Tensor::new([5, 8], y.data()[s * 40..(s + 1) * 40].to_vec()).unwrap();
            assert!(got.max_abs_diff(&o) < 1e-12);
        }
        assert!(Attention::new(&mut store, &mut rng, "b", 8, 3).is_err());
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngStream::new(8, streams::INIT);
        let attn = Attention::new(&mut store, &mut rng, "a", 4, 2).unwrap();
        let x = Tensor::from_fn([1, 4], |_| rng.normal());
        let tape = Tape::inference();
        let bx = Binder::new(&tape, &store);
        let xv = tape.constant(x);
        let y = attn.forward(&bx, xv, 1).unwrap().value();
        let v = attn.wo.forward(&bx, attn.wv.forward(&bx, xv).unwrap()).unwrap().value();
        assert!(y.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = RngStream::new(9, streams::INIT);
        let attn = Attention::new(&mut store, &mut rng, "a", 4, 2).unwrap();
        let row: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let x = Tensor::from_fn([6, 4], |i| row[i % 4]);
        let tape = Tape::inference();
        let bx = Binder::new(&tape, &store);
        let xv = tape.constant(x);
        let q = attn.wq.forward(&bx, xv).unwrap().reshape(&[1, 6, 4]).unwrap();
        let k = attn.wk.forward(&bx, xv).unwrap().reshape(&[1, 6, 4]).unwrap();
        let a = q.matmul_t(k).unwrap().scale(0.5).softmax(2).unwrap().value();
        assert!(a.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn full_model_fd_gradient() {
        let cfg = tiny(ExpertMode::Fme);
        let (mut store, model) = build(&cfg, 11);
        // move modulators away from the identity so they carry gradient signal
        let mut rng = RngStream::new(12, streams::INIT);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).contains(".fm.") {
                let shape = store.get(id).shape().to_vec();
                let base = store.get(id).as_ref().clone();
                let noisy = Tensor::from_fn(shape, |i| base.data()[i] + rng.uniform_in(-0.3, 0.3));
                store.set(id, noisy).unwrap();
            }
        }
        let x = image(&cfg, 1, 11);
        let target = image(&cfg, 1, 12);
        let report = check_param_gradients(&store, &[x], 1e-5, 1, |bx, v| {
            let mut rng = RngStream::new(0, streams::DROPOUT);
            let out = model.forward(bx, v[0], &mut rng, true)?;
            crate::losses::mse(out.restored, bx.tape().constant(target.clone()))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
