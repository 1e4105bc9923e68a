//! Transfer-learning initialization: pretrain a small dense network on a
//! public shard, keep everything below its output layer as a frozen feature
//! extractor, and graft a freshly seeded classification head on top.

use std::path::Path;

use ndarray::ArrayView2;

use crate::dataio::DatasetShard;
use crate::error::{Error, Result};
use crate::nnkernel::{
    decode_with_depth, encode_with_depth, train_local, train_observed, HyperParams, Mlp,
};

/// Hidden widths of the network pretrained on the public shard. The last
/// one becomes the feature width seen by the head.
pub const DEFAULT_BACKBONE_HIDDEN: [usize; 2] = [64, 32];
pub const DEFAULT_HEAD_HIDDEN: [usize; 1] = [100];

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedWeights {
    backbone: Mlp,
}

impl PretrainedWeights {
    pub fn backbone(&self) -> &Mlp {
        &self.backbone
    }

    pub fn backbone_out_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    pub fn depth(&self) -> usize {
        self.backbone.num_layers()
    }

    /// Backbone features (ReLU after every layer).
    pub fn embed(&self, batch: ArrayView2<'_, f64>) -> Result<ndarray::Array2<f64>> {
        self.backbone.embed(batch)
    }

    /// CL3W version 2 with the frozen depth covering every layer.
    pub fn to_cl3w(&self) -> Vec<u8> {
        encode_with_depth(&self.backbone, self.depth() as u8)
    }

    pub fn from_cl3w(bytes: &[u8]) -> Result<Self> {
        let (backbone, depth) = decode_with_depth(bytes)?;
        if depth != backbone.num_layers() {
            return Err(Error::WeightFormat(format!(
                "backbone file freezes {depth} of {} layers",
                backbone.num_layers()
            )));
        }
        Ok(PretrainedWeights { backbone })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_cl3w()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_cl3w(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub model: Mlp,
    pub round: u32,
    pub increment: u32,
}

impl GlobalModel {
    pub fn backbone_depth(&self) -> usize {
        self.model.frozen_prefix()
    }

    /// The trainable head as a standalone network.
    pub fn head(&self) -> Mlp {
        match self.model.frozen_prefix() {
            0 => self.model.clone(),
            k => self.model.split_at(k).expect("prefix inside network").1,
        }
    }
}

/// Trains `[feature_dim, hidden..., 2]` on the public shard and strips the
/// output layer.
pub fn pretrain_backbone(
    public: &DatasetShard,
    hidden: &[usize],
    hyper: &HyperParams,
) -> Result<PretrainedWeights> {
    if public.is_empty() {
        return Err(Error::Empty("public shard"));
    }
    if hidden.is_empty() {
        return Err(Error::dims("backbone needs at least one hidden layer"));
    }
    let (x, y) = public.to_matrix();
    let mut dims = vec![x.ncols()];
    dims.extend_from_slice(hidden);
    dims.push(2);
    let init = Mlp::init(&dims, hyper.seed)?;
    let trained = train_local(&init, x.view(), &y, hyper)?;
    let (backbone, _) = trained.split_at(trained.num_layers() - 1)?;
    let mut backbone = backbone;
    backbone.set_frozen_prefix(0)?;
    Ok(PretrainedWeights { backbone })
}

/// Seeds a head `head_dims` and stacks it on the frozen backbone.
pub fn build_head_and_init_global(
    pretrained: &PretrainedWeights,
    head_dims: &[usize],
    seed: u64,
) -> Result<GlobalModel> {
    if head_dims.first() != Some(&pretrained.backbone_out_dim()) {
        return Err(Error::dims(format!(
            "head must start at backbone width {}, got {head_dims:?}",
            pretrained.backbone_out_dim()
        )));
    }
    if head_dims.last() != Some(&2) {
        return Err(Error::dims(format!(
            "head must end in 2 classes, got {head_dims:?}"
        )));
    }
    let head = Mlp::init(head_dims, seed)?;
    Ok(GlobalModel {
        model: Mlp::compose(&pretrained.backbone, &head)?,
        round: 0,
        increment: 0,
    })
}

pub fn accuracy_on(model: &Mlp, shard: &DatasetShard) -> Result<f64> {
    if shard.is_empty() {
        return Err(Error::Empty("evaluation shard"));
    }
    let (x, y) = shard.to_matrix();
    let preds = model.predict(x.view())?;
    Ok(preds.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64)
}

/// Epochs of training (fractional, checked after every optimizer step and
/// once before training) until hold-out accuracy reaches `target`, or
/// `None` if it never does within `hyper.epochs`.
pub fn epochs_to_reach(
    initial: &Mlp,
    train: &DatasetShard,
    holdout: &DatasetShard,
    hyper: &HyperParams,
    target: f64,
) -> Result<Option<f64>> {
    if accuracy_on(initial, holdout)? >= target {
        return Ok(Some(0.0));
    }
    let (hx, hy) = holdout.to_matrix();
    let (x, y) = train.to_matrix();
    let mut reached = None;
    train_observed(initial, x.view(), &y, hyper, |model, progress| {
        let preds = model.predict(hx.view()).expect("holdout dims checked");
        let acc = preds.iter().zip(&hy).filter(|(p, t)| p == t).count() as f64 / hy.len() as f64;
        if acc >= target {
            reached = Some(progress);
            false
        } else {
            true
        }
    })?;
    Ok(reached)
}
