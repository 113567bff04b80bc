//! The noise-prediction network.
//!
//! Pose and expression use separate paths. The conformer trunk sees only the
//! pose channels of the noisy window, the audio, identity, timestep and the
//! previous window's pose; the pose head reads it directly. The expression
//! head reads the trunk output plus a projection of the noisy expression
//! channels, optionally rewritten by the emotion branch. Because nothing on
//! the pose path reads expression or emotion, pose predictions are unaffected
//! by the emotion condition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{ConformerBlock, Ctx, Linear, Mlp, Trainable};
use super::params::{hex, ParamStore, Stage};
use super::tensor::Tensor;
use super::graph::Var;
use crate::emotion::{wire_stage2, EmotionBranch, ExpressionRoute};
use crate::error::{Error, Result};
use crate::features::EmotionLabel;
use crate::motion_space::POSE_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub keypoints: usize,
    pub audio_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ffn_mult: usize,
    /// Frames generated per window.
    pub window: usize,
    /// Frames of previous motion fed back as conditioning.
    pub prev_frames: usize,
    pub dit_blocks: usize,
    pub dit_mlp_mult: usize,
    /// Number of diffusion steps the timestep input ranges over.
    pub diffusion_steps: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            keypoints: 21,
            audio_dim: 64,
            width: 128,
            blocks: 4,
            heads: 4,
            conv_kernel: 7,
            ffn_mult: 4,
            window: 50,
            prev_frames: 10,
            dit_blocks: 2,
            dit_mlp_mult: 4,
            diffusion_steps: 1000,
        }
    }
}

impl ArchConfig {
    pub fn expression_dim(&self) -> usize {
        3 * self.keypoints
    }

    pub fn motion_dim(&self) -> usize {
        3 * self.keypoints + POSE_DIM
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("keypoints", self.keypoints),
            ("audio_dim", self.audio_dim),
            ("width", self.width),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("conv_kernel", self.conv_kernel),
            ("ffn_mult", self.ffn_mult),
            ("window", self.window),
            ("prev_frames", self.prev_frames),
            ("dit_mlp_mult", self.dit_mlp_mult),
            ("diffusion_steps", self.diffusion_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width % 2 != 0 {
            return Err(Error::Config("width must be even".into()));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.prev_frames > self.window {
            return Err(Error::Config("prev_frames cannot exceed window".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("arch config serializes");
        hex(&Sha256::digest(&json))
    }
}

/// Conditioning for one window. `None` selects the learned null embedding
/// (audio, identity), the start tokens (previous motion) or bypasses the
/// emotion branch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConditionBundle {
    /// `[W × D_a]`, aligned with the window.
    pub audio: Option<Tensor>,
    /// `[1 × 3K]`
    pub identity: Option<Tensor>,
    pub emotion: Option<EmotionLabel>,
    /// `[P × D_m]`, normalized motion of the preceding frames.
    pub prev_motion: Option<Tensor>,
}

/// `[rows × width]` sinusoidal table for positions `start..start + rows`.
pub fn sinusoidal(start: usize, rows: usize, width: usize) -> Tensor {
    let half = width / 2;
    let mut out = Tensor::zeros(rows, width);
    for r in 0..rows {
        let pos = (start + r) as f64;
        let row = out.row_mut(r);
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            row[2 * i] = (pos * freq).sin();
            row[2 * i + 1] = (pos * freq).cos();
        }
    }
    out
}

/// Linear layers with SiLU between them.
#[derive(Clone, Debug)]
struct Head {
    layers: Vec<Linear>,
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.fc{}", i + 1);
                if i + 1 == n {
                    Linear::zeroed(store, &lname, dims[i], dims[i + 1], Stage::One)
                } else {
                    Linear::new(store, &lname, dims[i], dims[i + 1], Stage::One, rng)
                }
            })
            .collect();
        Self { layers }
    }

    fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = cx.g.silu(h);
            }
            h = l.forward(cx, h);
        }
        h
    }
}

#[derive(Clone, Debug)]
struct Network {
    pose_in: Linear,
    expr_in: Linear,
    audio_proj: Mlp,
    null_audio: super::ParamId,
    id_proj: Mlp,
    null_identity: super::ParamId,
    time_proj: Mlp,
    prev_proj: Mlp,
    start_tokens: super::ParamId,
    trunk: Vec<ConformerBlock>,
    pose_head: Head,
    exp_head: Head,
    emotion: EmotionBranch,
}

/// Parameters plus the layer layout that reads them.
#[derive(Clone, Debug)]
pub struct Denoiser {
    arch: ArchConfig,
    pub params: ParamStore,
    net: Network,
}

impl Denoiser {
    /// Deterministic initialization. Output heads and DiT modulation start at
    /// zero, so a fresh model predicts zero noise.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (c, k3, p) = (arch.width, arch.expression_dim(), arch.prev_frames);
        let one = Stage::One;
        let r = &mut rng;
        let pose_in = Linear::new(&mut s, "pose_in", POSE_DIM, c, one, r);
        let expr_in = Linear::new(&mut s, "expr_in", k3, c, one, r);
        let audio_proj = Mlp::new(&mut s, "proj.audio", (arch.audio_dim, c, c), one, false, r);
        let null_audio = s.insert("null.audio", small(r, 1, c), one);
        let id_proj = Mlp::new(&mut s, "proj.identity", (k3, c, c), one, false, r);
        let null_identity = s.insert("null.identity", small(r, 1, c), one);
        let time_proj = Mlp::new(&mut s, "proj.time", (c, c, c), one, false, r);
        let prev_proj = Mlp::new(&mut s, "proj.prev", (POSE_DIM, c, c), one, false, r);
        let start_tokens = s.insert("start_tokens", small(r, p, c), one);
        let trunk = (0..arch.blocks)
            .map(|i| {
                ConformerBlock::new(
                    &mut s,
                    &format!("trunk.{i}"),
                    c,
                    arch.heads,
                    arch.conv_kernel,
                    arch.ffn_mult,
                    one,
                    r,
                )
            })
            .collect();
        let pose_head = Head::new(&mut s, "pose_head", &[c, c, POSE_DIM], r);
        let exp_head = Head::new(&mut s, "exp_head", &[c, 2 * c, 2 * c, k3], r);
        let emotion = EmotionBranch::new(&mut s, c, arch.heads, arch.dit_blocks, arch.dit_mlp_mult, r);
        Ok(Self {
            arch,
            params: s,
            net: Network {
                pose_in,
                expr_in,
                audio_proj,
                null_audio,
                id_proj,
                null_identity,
                time_proj,
                prev_proj,
                start_tokens,
                trunk,
                pose_head,
                exp_head,
                emotion,
            },
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn emotion_branch(&self) -> &EmotionBranch {
        &self.net.emotion
    }

    /// Checks shapes and the timestep before a forward pass.
    pub fn check_inputs(&self, m_t: &Tensor, bundle: &ConditionBundle, t: usize) -> Result<()> {
        let a = &self.arch;
        let w = m_t.rows();
        if w == 0 || w > a.window || m_t.cols() != a.motion_dim() {
            return Err(Error::Dimension(format!(
                "noisy window must be [1..={} x {}], got {:?}",
                a.window,
                a.motion_dim(),
                m_t.shape()
            )));
        }
        if t == 0 || t > a.diffusion_steps {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                a.diffusion_steps
            )));
        }
        if let Some(audio) = &bundle.audio {
            if audio.shape() != (w, a.audio_dim) {
                return Err(Error::Dimension(format!(
                    "audio must be [{w} x {}], got {:?}",
                    a.audio_dim,
                    audio.shape()
                )));
            }
        }
        if let Some(id) = &bundle.identity {
            if id.shape() != (1, a.expression_dim()) {
                return Err(Error::Dimension(format!(
                    "identity must be [1 x {}], got {:?}",
                    a.expression_dim(),
                    id.shape()
                )));
            }
        }
        if let Some(prev) = &bundle.prev_motion {
            if prev.shape() != (a.prev_frames, a.motion_dim()) {
                return Err(Error::Dimension(format!(
                    "previous motion must be [{} x {}], got {:?}",
                    a.prev_frames,
                    a.motion_dim(),
                    prev.shape()
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `cx` and returns the `[W × D_m]`
    /// prediction, expression channels first.
    pub fn forward(&self, cx: &mut Ctx, m_t: &Tensor, bundle: &ConditionBundle, t: usize) -> Result<Var> {
        self.check_inputs(m_t, bundle, t)?;
        let n = &self.net;
        let (c, k3, p, w) = (self.arch.width, self.arch.expression_dim(), self.arch.prev_frames, m_t.rows());

        let temb = cx.g.constant(sinusoidal(t, 1, c));
        let temb = n.time_proj.forward(cx, temb);
        let id = match &bundle.identity {
            Some(f) => {
                let f = cx.g.constant(f.clone());
                n.id_proj.forward(cx, f)
            }
            None => cx.p(n.null_identity),
        };
        let global = cx.g.add(id, temb);

        let pose_t = cx.g.constant(m_t.slice_cols(k3, POSE_DIM));
        let cur = n.pose_in.forward(cx, pose_t);
        let audio = match &bundle.audio {
            Some(a) => {
                let a = cx.g.constant(a.clone());
                n.audio_proj.forward(cx, a)
            }
            None => {
                let null = cx.p(n.null_audio);
                cx.g.broadcast_rows(null, w)
            }
        };
        let cur = cx.g.add(cur, audio);
        let cur = cx.g.add_row(cur, global);
        let pos = cx.g.constant(sinusoidal(p, w, c));
        let cur = cx.g.add(cur, pos);

        let prev = match &bundle.prev_motion {
            Some(m) => {
                let pose = cx.g.constant(m.slice_cols(k3, POSE_DIM));
                n.prev_proj.forward(cx, pose)
            }
            None => cx.p(n.start_tokens),
        };
        let prev = cx.g.add_row(prev, global);
        let pos = cx.g.constant(sinusoidal(0, p, c));
        let prev = cx.g.add(prev, pos);

        let mut h = cx.g.concat_rows(&[prev, cur]);
        for block in &n.trunk {
            h = block.forward(cx, h);
        }
        let h_cur = cx.g.slice_rows(h, p, w);
        let pose_eps = n.pose_head.forward(cx, h_cur);

        let expr_t = cx.g.constant(m_t.slice_cols(0, k3));
        let e = n.expr_in.forward(cx, expr_t);
        let e = cx.g.add(h_cur, e);
        let e = cx.g.add_row(e, temb);
        let e = match wire_stage2(bundle.emotion) {
            ExpressionRoute::Trunk => e,
            ExpressionRoute::Emotion(label) => {
                let emb = n.emotion.embed_var(cx, label);
                let cond = cx.g.add(emb, temb);
                n.emotion.forward(cx, e, cond)
            }
        };
        let expr_eps = n.exp_head.forward(cx, e);
        Ok(cx.g.concat_cols(&[expr_eps, pose_eps]))
    }

    /// Inference-only prediction.
    pub fn predict(&self, m_t: &Tensor, bundle: &ConditionBundle, t: usize) -> Result<Tensor> {
        let mut cx = Ctx::new(&self.params, Trainable::Nothing);
        let out = self.forward(&mut cx, m_t, bundle, t)?;
        Ok(cx.g.value(out).clone())
    }

    /// Hash of the stage-1 partition, used to pin a frozen backbone.
    pub fn backbone_hash(&self) -> String {
        self.params.partition_hash(Stage::One)
    }
}

fn small(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-0.1..0.1)).collect();
    Tensor::from_vec(rows, cols, data)
}
