//! Parameterized building blocks: linear maps, normalization, multi-head
//! self-attention, the conformer block and the conditioned DiT block.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore, Stage};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Which parameters receive gradients during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Stage(Stage),
    Everything,
}

impl Trainable {
    fn includes(self, stage: Stage) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Stage(s) => s == stage,
            Trainable::Everything => true,
        }
    }
}

/// A graph under construction together with the parameters it reads.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    trainable: Trainable,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, trainable: Trainable) -> Self {
        Self {
            g: Graph::new(),
            store,
            trainable,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        let train = self.trainable.includes(self.store.stage(id));
        self.g.param(self.store, id, train)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }
}

pub(crate) fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        stage: Stage,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.insert(format!("{name}.weight"), xavier(rng, in_dim, out_dim), stage);
        let b = store.insert(format!("{name}.bias"), Tensor::zeros(1, out_dim), stage);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, stage: Stage) -> Self {
        let w = store.insert(format!("{name}.weight"), Tensor::zeros(in_dim, out_dim), stage);
        let b = store.insert(format!("{name}.bias"), Tensor::zeros(1, out_dim), stage);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.p(self.w);
        let b = cx.p(self.b);
        let y = cx.g.matmul(x, w);
        cx.g.add_row(y, b)
    }
}

/// `Linear → SiLU → Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        stage: Stage,
        zero_out: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), dims.0, dims.1, stage, rng);
        let fc2 = if zero_out {
            Linear::zeroed(store, &format!("{name}.fc2"), dims.1, dims.2, stage)
        } else {
            Linear::new(store, &format!("{name}.fc2"), dims.1, dims.2, stage, rng)
        };
        Self { fc1, fc2 }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let h = self.fc1.forward(cx, x);
        let h = cx.g.silu(h);
        self.fc2.forward(cx, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, stage: Stage) -> Self {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::filled(1, width, 1.0), stage);
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(1, width), stage);
        Self { gamma, beta }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let n = cx.g.layer_norm(x);
        let gamma = cx.p(self.gamma);
        let beta = cx.p(self.beta);
        let y = cx.g.mul_row(n, gamma);
        cx.g.add_row(y, beta)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        stage: Stage,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, stage, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, stage, rng),
            heads,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        self.forward_with_weights(cx, x).0
    }

    /// Also returns the per-head attention matrices.
    pub fn forward_with_weights(&self, cx: &mut Ctx, x: Var) -> (Var, Vec<Var>) {
        let width = self.out.in_dim;
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(cx, x);
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = cx.g.slice_cols(qkv, h * dh, dh);
            let k = cx.g.slice_cols(qkv, width + h * dh, dh);
            let v = cx.g.slice_cols(qkv, 2 * width + h * dh, dh);
            let s = cx.g.matmul_nt(q, k);
            let s = cx.g.scale(s, scale);
            let p = cx.g.softmax_rows(s);
            weights.push(p);
            outs.push(cx.g.matmul(p, v));
        }
        let o = if outs.len() == 1 {
            outs[0]
        } else {
            cx.g.concat_cols(&outs)
        };
        (self.out.forward(cx, o), weights)
    }
}

/// Pre-norm feed-forward module of the conformer.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, width: usize, mult: usize, stage: Stage, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width, stage),
            mlp: Mlp::new(store, name, (width, mult * width, width), stage, false, rng),
        }
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let h = self.norm.forward(cx, x);
        self.mlp.forward(cx, h)
    }
}

/// Conformer convolution module. Batch norm is replaced by layer norm so a
/// single sequence is normalized on its own, independent of batch makeup.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pointwise_in: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub mid_norm: LayerNorm,
    pub pointwise_out: Linear,
}

impl ConvModule {
    fn new(store: &mut ParamStore, name: &str, width: usize, kernel: usize, stage: Stage, rng: &mut impl Rng) -> Self {
        let norm = LayerNorm::new(store, &format!("{name}.norm"), width, stage);
        let pointwise_in = Linear::new(store, &format!("{name}.pw_in"), width, 2 * width, stage, rng);
        let depthwise = store.insert(
            format!("{name}.dw.weight"),
            xavier(rng, kernel, width),
            stage,
        );
        let depthwise_bias = store.insert(format!("{name}.dw.bias"), Tensor::zeros(1, width), stage);
        let mid_norm = LayerNorm::new(store, &format!("{name}.mid_norm"), width, stage);
        let pointwise_out = Linear::new(store, &format!("{name}.pw_out"), width, width, stage, rng);
        Self {
            norm,
            pointwise_in,
            depthwise,
            depthwise_bias,
            mid_norm,
            pointwise_out,
        }
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let h = self.norm.forward(cx, x);
        let h = self.pointwise_in.forward(cx, h);
        let h = cx.g.glu(h);
        let w = cx.p(self.depthwise);
        let h = cx.g.depthwise_conv(h, w);
        let b = cx.p(self.depthwise_bias);
        let h = cx.g.add_row(h, b);
        let h = self.mid_norm.forward(cx, h);
        let h = cx.g.silu(h);
        self.pointwise_out.forward(cx, h)
    }
}

/// Macaron conformer block: half FFN, self-attention, convolution, half FFN,
/// final layer norm.
#[derive(Clone, Debug)]
pub struct ConformerBlock {
    pub ff1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: SelfAttention,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub final_norm: LayerNorm,
    pub width: usize,
}

impl ConformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        kernel: usize,
        ffn_mult: usize,
        stage: Stage,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ff1: FeedForward::new(store, &format!("{name}.ff1"), width, ffn_mult, stage, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), width, stage),
            attn: SelfAttention::new(store, &format!("{name}.attn"), width, heads, stage, rng),
            conv: ConvModule::new(store, &format!("{name}.conv"), width, kernel, stage, rng),
            ff2: FeedForward::new(store, &format!("{name}.ff2"), width, ffn_mult, stage, rng),
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), width, stage),
            width,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let f = self.ff1.forward(cx, x);
        let f = cx.g.scale(f, 0.5);
        let x = cx.g.add(x, f);
        let h = self.attn_norm.forward(cx, x);
        let a = self.attn.forward(cx, h);
        let x = cx.g.add(x, a);
        let c = self.conv.forward(cx, x);
        let x = cx.g.add(x, c);
        let f = self.ff2.forward(cx, x);
        let f = cx.g.scale(f, 0.5);
        let x = cx.g.add(x, f);
        self.final_norm.forward(cx, x)
    }

    /// Shape-checked inference entry point for a `[T × width]` sequence.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.width || x.rows() == 0 {
            return Err(Error::Dimension(format!(
                "conformer block expects [T>=1 x {}], got {:?}",
                self.width,
                x.shape()
            )));
        }
        let mut cx = Ctx::new(store, Trainable::Nothing);
        let xv = cx.g.constant(x.clone());
        let y = self.forward(&mut cx, xv);
        Ok(cx.g.value(y).clone())
    }
}

/// Transformer block whose normalization shift/scale and residual gates are
/// regressed from a conditioning vector. The modulation layer starts at zero,
/// so a fresh block is an exact identity.
#[derive(Clone, Debug)]
pub struct DitBlock {
    pub modulation: Linear,
    pub attn: SelfAttention,
    pub mlp: Mlp,
    pub width: usize,
}

impl DitBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_mult: usize,
        stage: Stage,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            modulation: Linear::zeroed(store, &format!("{name}.modulation"), width, 6 * width, stage),
            attn: SelfAttention::new(store, &format!("{name}.attn"), width, heads, stage, rng),
            mlp: Mlp::new(store, &format!("{name}.mlp"), (width, mlp_mult * width, width), stage, false, rng),
            width,
        }
    }

    /// `x` is `[T × width]`, `cond` is `[1 × width]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var, cond: Var) -> Var {
        let c = self.width;
        let act = cx.g.silu(cond);
        let m = self.modulation.forward(cx, act);
        let shift1 = cx.g.slice_cols(m, 0, c);
        let scale1 = cx.g.slice_cols(m, c, c);
        let gate1 = cx.g.slice_cols(m, 2 * c, c);
        let shift2 = cx.g.slice_cols(m, 3 * c, c);
        let scale2 = cx.g.slice_cols(m, 4 * c, c);
        let gate2 = cx.g.slice_cols(m, 5 * c, c);

        let h = modulate(&mut cx.g, x, shift1, scale1);
        let a = self.attn.forward(cx, h);
        let a = cx.g.mul_row(a, gate1);
        let x = cx.g.add(x, a);

        let h = modulate(&mut cx.g, x, shift2, scale2);
        let f = self.mlp.forward(cx, h);
        let f = cx.g.mul_row(f, gate2);
        cx.g.add(x, f)
    }

    /// Shape-checked inference entry point.
    pub fn apply(&self, store: &ParamStore, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        if x.cols() != self.width || x.rows() == 0 {
            return Err(Error::Dimension(format!(
                "DiT block expects [T>=1 x {}], got {:?}",
                self.width,
                x.shape()
            )));
        }
        if cond.shape() != (1, self.width) {
            return Err(Error::Dimension(format!(
                "DiT condition must be [1 x {}], got {:?}",
                self.width,
                cond.shape()
            )));
        }
        let mut cx = Ctx::new(store, Trainable::Nothing);
        let xv = cx.g.constant(x.clone());
        let cv = cx.g.constant(cond.clone());
        let y = self.forward(&mut cx, xv, cv);
        Ok(cx.g.value(y).clone())
    }
}

/// `LN(x) · (1 + scale) + shift`
fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Var {
    let n = g.layer_norm(x);
    let s = g.add_const(scale, 1.0);
    let y = g.mul_row(n, s);
    g.add_row(y, shift)
}
