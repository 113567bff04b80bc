//! Emotion control branch: a learned label embedding and a stack of
//! conditioned DiT blocks that rewrite the expression head's input.
//!
//! All parameters here belong to the stage-2 partition. The blocks start as
//! exact identities, so attaching an untrained branch changes nothing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::EmotionLabel;
use crate::nn::{Ctx, DitBlock, ParamId, ParamStore, Stage, Tensor, Trainable, Var};

/// An emotion label with its embedding row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionFeature {
    pub label: EmotionLabel,
    /// `[1 × C]`
    pub embedding: Tensor,
}

/// Where the expression head reads its input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpressionRoute {
    /// Straight from the shared trunk, as in stage 1.
    Trunk,
    /// Through the emotion branch, conditioned on a label.
    Emotion(EmotionLabel),
}

/// Routing used for a given (possibly dropped) emotion condition. The pose
/// head always reads the trunk regardless.
pub fn wire_stage2(emotion: Option<EmotionLabel>) -> ExpressionRoute {
    match emotion {
        Some(label) => ExpressionRoute::Emotion(label),
        None => ExpressionRoute::Trunk,
    }
}

#[derive(Clone, Debug)]
pub struct EmotionBranch {
    pub table: ParamId,
    pub blocks: Vec<DitBlock>,
    pub width: usize,
}

impl EmotionBranch {
    pub fn new(
        store: &mut ParamStore,
        width: usize,
        heads: usize,
        num_blocks: usize,
        mlp_mult: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let data = (0..EmotionLabel::COUNT * width)
            .map(|_| rng.random_range(-1.0..1.0) / (width as f64).sqrt())
            .collect();
        let table = store.insert(
            "emotion.table",
            Tensor::from_vec(EmotionLabel::COUNT, width, data),
            Stage::Two,
        );
        let blocks = (0..num_blocks)
            .map(|i| DitBlock::new(store, &format!("emotion.dit{i}"), width, heads, mlp_mult, Stage::Two, rng))
            .collect();
        Self { table, blocks, width }
    }

    pub fn embed(&self, store: &ParamStore, label: EmotionLabel) -> EmotionFeature {
        let table = store.get(self.table);
        EmotionFeature {
            label,
            embedding: table.slice_rows(label.index(), 1),
        }
    }

    /// Embedding row as a graph node, so the table receives gradients.
    pub fn embed_var(&self, cx: &mut Ctx, label: EmotionLabel) -> Var {
        let table = cx.p(self.table);
        cx.g.slice_rows(table, label.index(), 1)
    }

    /// Runs every block in sequence, each conditioned on `cond` (`[1 × C]`).
    pub fn forward(&self, cx: &mut Ctx, x: Var, cond: Var) -> Var {
        self.blocks.iter().fold(x, |h, block| block.forward(cx, h, cond))
    }

    /// Branch output for a `[T × C]` input conditioned on the raw label
    /// embedding.
    pub fn apply(&self, store: &ParamStore, input: &Tensor, label: EmotionLabel) -> Result<Tensor> {
        if input.cols() != self.width || input.rows() == 0 {
            return Err(Error::Dimension(format!(
                "emotion branch expects [T>=1 x {}], got {:?}",
                self.width,
                input.shape()
            )));
        }
        let mut cx = Ctx::new(store, Trainable::Nothing);
        let x = cx.g.constant(input.clone());
        let cond = self.embed_var(&mut cx, label);
        let y = self.forward(&mut cx, x, cond);
        Ok(cx.g.value(y).clone())
    }
}
