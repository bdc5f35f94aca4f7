//! Two-stage training: an auxiliary attribute-regression warm-up for the
//! backbone, stage one on pairs mixed across users, and per-user stage-two
//! fine-tuning (whole, partial or direct).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::{
    sgd_step, Graph, OptimizerState, ParamGroup, ParamId, ParamStore, Tensor,
};
use crate::catalog::{Dataset, Label, Split};
use crate::error::{Error, Result};
use crate::layers::{Init, LayerKind, LayerSpec, Sequential};
use crate::metrics::{Metrics, RankedList};
use crate::models::{compact_rows, Network, Trainable, Variant};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FineTuneMode {
    /// Update every parameter of the stage-one network.
    Whole,
    /// Freeze the feature network and update only the matching networks.
    Partial,
    /// Fine-tune the initial (pre-stage-one) network.
    Direct,
}

impl FineTuneMode {
    pub const ALL: [FineTuneMode; 3] = [FineTuneMode::Whole, FineTuneMode::Partial, FineTuneMode::Direct];
}

impl fmt::Display for FineTuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FineTuneMode::Whole => "whole",
            FineTuneMode::Partial => "partial",
            FineTuneMode::Direct => "direct",
        })
    }
}

impl FromStr for FineTuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole" => Ok(FineTuneMode::Whole),
            "partial" => Ok(FineTuneMode::Partial),
            "direct" => Ok(FineTuneMode::Direct),
            other => Err(Error::Config(format!(
                "unknown fine-tune mode `{other}` (expected whole, partial or direct)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate of pretrained (backbone) tensors in stage one.
    pub base_lr: f64,
    /// Stage-one learning-rate multiplier for randomly initialized tensors.
    pub fresh_multiplier: f64,
    /// Every learning rate is divided by this during stage two.
    pub finetune_divisor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Neutral outfits paired with each positive per epoch.
    pub neutrals_per_positive: usize,
    pub aux_epochs: usize,
    pub aux_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 30,
            epochs: 18,
            base_lr: 0.002,
            fresh_multiplier: 10.0,
            finetune_divisor: 1.0,
            momentum: 0.9,
            weight_decay: 0.005,
            neutrals_per_positive: 6,
            aux_epochs: 10,
            aux_lr: 0.003,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.neutrals_per_positive == 0 {
            return Err(Error::Config("neutrals per positive must be at least 1".into()));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("fresh_multiplier", self.fresh_multiplier),
            ("aux_lr", self.aux_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !(self.finetune_divisor.is_finite() && self.finetune_divisor > 0.0) {
            return Err(Error::Config("finetune_divisor must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        Ok(())
    }

    /// Stage-one learning rate of a tensor.
    pub fn stage_one_lr(&self, fresh: bool) -> f64 {
        if fresh {
            self.base_lr * self.fresh_multiplier
        } else {
            self.base_lr
        }
    }
}

/// One sample of the rank loss: a positive outfit and a neutral one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub preferred: usize,
    pub other: usize,
}

/// Every positive paired with `k` neutrals for one epoch. Neutrals are dealt
/// from a fresh shuffle of `neutrals` (cycling when more are needed), and the
/// resulting pairs are shuffled. Deterministic in `(seed, epoch)`.
pub fn sample_pairs(
    positives: &[usize],
    neutrals: &[usize],
    k: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<TrainingPair>> {
    if positives.is_empty() || neutrals.is_empty() {
        return Err(Error::InvalidArgument(
            "pair sampling needs positive and neutral outfits".into(),
        ));
    }
    let mut r = rng::stream(seed, "pairs", epoch as u64);
    let mut deck = neutrals.to_vec();
    deck.shuffle(&mut r);
    let mut next = 0;
    let mut pairs = Vec::with_capacity(positives.len() * k);
    for &p in positives {
        for _ in 0..k {
            if next == deck.len() {
                deck.shuffle(&mut r);
                next = 0;
            }
            pairs.push(TrainingPair {
                preferred: p,
                other: deck[next],
            });
            next += 1;
        }
    }
    pairs.shuffle(&mut r);
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

/// Loss-curve CSV: `epoch,mean_loss,wall_seconds`.
pub fn write_loss_curve(path: &std::path::Path, curve: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "mean_loss", "wall_seconds"])?;
    for e in curve {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.6}", e.mean_loss),
            format!("{:.3}", e.seconds),
        ])?;
    }
    crate::metrics::write_csv(path, w)
}

/// What the rank-loss trainer feeds to the network.
enum Input<'a> {
    /// Preprocessed item images `[items, 3, S, S]`.
    Images(&'a Tensor<f32>),
    /// Frozen per-item features `[items, D]`.
    Features(&'a Tensor<f32>),
}

fn flat_items(ds: &Dataset, ids: impl Iterator<Item = usize>) -> Vec<usize> {
    ids.flat_map(|id| ds.outfit(id).items.iter().copied()).collect()
}

/// Mean rank loss over `pairs` without updating anything.
pub fn mean_pair_loss(
    net: &Network<f32>,
    ds: &Dataset,
    images: &Tensor<f32>,
    pairs: &[TrainingPair],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let pref = flat_items(ds, chunk.iter().map(|p| p.preferred));
        let other = flat_items(ds, chunk.iter().map(|p| p.other));
        let joined: Vec<usize> = pref.iter().chain(&other).copied().collect();
        let (sub, local) = compact_rows(images, &joined);
        let (lp, lo) = local.split_at(pref.len());
        let mut g = Graph::new();
        let x = g.input(sub);
        let nodes = net.pair_loss_graph(&mut g, x, lp, lo, Trainable::NONE)?;
        g.check_finite(nodes.loss)?;
        total += g.value(nodes.loss).item() as f64 * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

#[allow(clippy::too_many_arguments)]
fn train_rank_loss(
    net: &mut Network<f32>,
    opt: &mut OptimizerState<f32>,
    ds: &Dataset,
    input: Input<'_>,
    positives: &[usize],
    neutrals: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    let trainable = trainable_groups(net.params(), opt);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let snapshot = net.params().clone();
        let velocity = opt.clone();
        let pairs = sample_pairs(positives, neutrals, cfg.neutrals_per_positive, seed, epoch)?;
        let mut total = 0.0;
        let step = (|| -> Result<()> {
            for chunk in pairs.chunks(cfg.batch_size) {
                let pref = flat_items(ds, chunk.iter().map(|p| p.preferred));
                let other = flat_items(ds, chunk.iter().map(|p| p.other));
                let joined: Vec<usize> = pref.iter().chain(&other).copied().collect();
                let mut g = Graph::new();
                let nodes = match input {
                    Input::Images(images) => {
                        let (sub, local) = compact_rows(images, &joined);
                        let (lp, lo) = local.split_at(pref.len());
                        let x = g.input(sub);
                        net.pair_loss_graph(&mut g, x, lp, lo, trainable)?
                    }
                    Input::Features(feats) => {
                        let (sub, local) = compact_rows(feats, &joined);
                        let (lp, lo) = local.split_at(pref.len());
                        let x = g.input(sub);
                        net.pair_loss_from_features(&mut g, x, lp, lo, trainable.matching)?
                    }
                };
                let grads = g.backward(nodes.loss)?;
                total += g.value(nodes.loss).item() as f64 * chunk.len() as f64;
                sgd_step(net.params_mut(), &grads, opt)?;
            }
            Ok(())
        })();
        match step {
            Ok(()) => {}
            Err(Error::NonFinite { what }) => {
                *net.params_mut() = snapshot;
                *opt = velocity;
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("non-finite {what}; parameters restored to the last good epoch"),
                });
            }
            Err(e) => return Err(e),
        }
        curve.push(EpochStats {
            epoch: epoch + 1,
            mean_loss: total / pairs.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(curve)
}

/// Groups that receive gradients: those with any nonzero learning rate.
fn trainable_groups(params: &ParamStore<f32>, opt: &OptimizerState<f32>) -> Trainable {
    let live = |group: ParamGroup| params.ids().any(|id| params.info(id).group == group && opt.lr(id) > 0.0);
    Trainable {
        feature: live(ParamGroup::Feature),
        matching: live(ParamGroup::Matching),
    }
}

/// Pretrain the backbone by regressing hidden item attributes from images
/// (items of the training split only). Variant A regresses the concatenated
/// attributes of random training-item triples from the stacked image. The
/// backbone tensors are marked as pretrained afterwards.
pub fn pretrain_backbone(
    net: &mut Network<f32>,
    ds: &Dataset,
    images: &Tensor<f32>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let n = ds.config.categories;
    let k = ds.config.attr_dim;
    let train_items = ds.train_items();
    let by_category: Vec<Vec<usize>> = (0..n)
        .map(|c| train_items.iter().copied().filter(|&i| ds.items[i].category == c).collect())
        .collect();
    if by_category.iter().any(|v| v.is_empty()) {
        return Err(Error::InvalidArgument("a category has no training items".into()));
    }
    let stacked = net.variant() == Variant::A;
    let targets = if stacked { n * k } else { k };

    let mut store = net.params().clone();
    let backbone_ids: Vec<ParamId> = net.backbone().param_ids().collect();
    let head = Sequential::build(
        "aux",
        &[net.architecture().backbone.feature_dim],
        vec![LayerSpec {
            kind: LayerKind::Fc { out: targets },
            group: ParamGroup::Feature,
        }],
        Init::Gaussian(0.01),
        &mut store,
        &mut rng::stream(seed, "aux.init", 0),
    )?;
    let head_ids: Vec<ParamId> = head.param_ids().collect();
    let live: Vec<ParamId> = backbone_ids.iter().chain(&head_ids).copied().collect();
    let mut opt = OptimizerState::new(&store, cfg.momentum, |id| {
        if live.contains(&id) {
            cfg.aux_lr
        } else {
            0.0
        }
    })?;

    let samples = train_items.len();
    let mut curve = Vec::with_capacity(cfg.aux_epochs);
    for epoch in 0..cfg.aux_epochs {
        let start = Instant::now();
        let mut r = rng::stream(seed, "aux.epoch", epoch as u64);
        // each sample is a list of item ids (one, or one per category)
        let order: Vec<Vec<usize>> = if stacked {
            (0..samples)
                .map(|_| by_category.iter().map(|v| v[r.gen_range(0..v.len())]).collect())
                .collect()
        } else {
            let mut ids = train_items.clone();
            ids.shuffle(&mut r);
            ids.into_iter().map(|i| vec![i]).collect()
        };
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let flat: Vec<usize> = chunk.iter().flatten().copied().collect();
            let (sub, local) = compact_rows(images, &flat);
            let mut target = Vec::with_capacity(chunk.len() * targets);
            for s in chunk {
                for &i in s {
                    target.extend(ds.items[i].attrs.iter().map(|&a| a as f32));
                }
            }
            let mut g = Graph::new();
            let x = g.input(sub);
            let batch = if stacked {
                let slots: Vec<_> = (0..n)
                    .map(|c| {
                        let rows: Vec<usize> = local.chunks(n).map(|s| s[c]).collect();
                        g.gather_rows(x, &rows)
                    })
                    .collect::<Result<_>>()?;
                crate::layers::concat_channels(&mut g, &slots)?
            } else {
                g.gather_rows(x, &local)?
            };
            let feat = net.backbone().forward(&mut g, &store, batch, true)?;
            let pred = head.forward(&mut g, &store, feat, true)?;
            let t = g.input(Tensor::new(vec![chunk.len(), targets], target)?);
            let diff = g.sub(pred, t)?;
            let sq = g.mul(diff, diff)?;
            // squared error summed over attributes, averaged over the batch
            let mean = g.mean(sq)?;
            let loss = g.scale(mean, targets as f64)?;
            let grads = g.backward(loss).map_err(|e| match e {
                Error::NonFinite { what } => Error::Diverged {
                    epoch,
                    detail: format!("auxiliary pretraining produced non-finite {what}"),
                },
                other => other,
            })?;
            total += g.value(loss).item() as f64 * chunk.len() as f64;
            sgd_step(&mut store, &grads, &mut opt)?;
        }
        curve.push(EpochStats {
            epoch: epoch + 1,
            mean_loss: total / samples as f64,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    for id in backbone_ids {
        *net.params_mut().get_mut(id) = store.get(id).clone();
        net.params_mut().info_mut(id).fresh = false;
    }
    Ok(curve)
}

/// Stage one: rank-loss training on positives and neutrals of every user
/// mixed together. Returns the per-epoch mean training loss and the final
/// optimizer state.
pub fn train_stage_one(
    net: &mut Network<f32>,
    ds: &Dataset,
    images: &Tensor<f32>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<EpochStats>, OptimizerState<f32>)> {
    cfg.validate()?;
    let positives: Vec<usize> = ds.records_in(Split::Train, Label::Positive).map(|r| r.id).collect();
    let neutrals: Vec<usize> = ds.records_in(Split::Train, Label::Neutral).map(|r| r.id).collect();
    let infos = net.params().infos().to_vec();
    let mut opt = OptimizerState::new(net.params(), cfg.momentum, |id| cfg.stage_one_lr(infos[id.0].fresh))?
        .with_weight_decay(cfg.weight_decay)?;
    let curve = train_rank_loss(
        net,
        &mut opt,
        ds,
        Input::Images(images),
        &positives,
        &neutrals,
        cfg,
        rng::derive(seed, "stage-one", 0),
    )?;
    Ok((curve, opt))
}

/// Stage two for one user. `start` is the stage-one network for `Whole` and
/// `Partial`, and the initial network for `Direct`. `frozen_features` may
/// carry precomputed item features of `start` for partial mode.
/// Partial fine-tuning needs a separate matching network.
pub fn check_mode(variant: Variant, mode: FineTuneMode) -> Result<()> {
    if mode == FineTuneMode::Partial && !variant.has_separate_matching() {
        return Err(Error::Config(
            "partial fine-tuning needs a separate matching network (variants b and c)".into(),
        ));
    }
    Ok(())
}

pub fn fine_tune(
    start: &Network<f32>,
    ds: &Dataset,
    images: &Tensor<f32>,
    user: usize,
    mode: FineTuneMode,
    cfg: &TrainConfig,
    seed: u64,
    frozen_features: Option<&Tensor<f32>>,
) -> Result<(Network<f32>, Vec<EpochStats>)> {
    cfg.validate()?;
    check_mode(start.variant(), mode)?;
    if user >= ds.users.len() {
        return Err(Error::InvalidArgument(format!("no user {user}")));
    }
    let mut net = start.clone();
    let positives = ds.ids(user, Split::Train, Label::Positive);
    let neutrals = ds.ids(user, Split::Train, Label::Neutral);
    let infos = net.params().infos().to_vec();
    let mut opt = OptimizerState::new(net.params(), cfg.momentum, |id| {
        let info = &infos[id.0];
        if mode == FineTuneMode::Partial && info.group == ParamGroup::Feature {
            0.0
        } else {
            cfg.stage_one_lr(info.fresh) / cfg.finetune_divisor
        }
    })?
    .with_weight_decay(cfg.weight_decay)?;
    let seed = rng::derive(seed, "fine-tune", user as u64);
    let curve = if mode == FineTuneMode::Partial {
        let owned;
        let feats = match frozen_features {
            Some(f) => f,
            None => {
                owned = net.item_features(images)?;
                &owned
            }
        };
        train_rank_loss(&mut net, &mut opt, ds, Input::Features(feats), &positives, &neutrals, cfg, seed)?
    } else {
        train_rank_loss(&mut net, &mut opt, ds, Input::Images(images), &positives, &neutrals, cfg, seed)?
    };
    Ok((net, curve))
}

/// Scores of the given outfits.
pub fn score_outfits(net: &Network<f32>, ds: &Dataset, images: &Tensor<f32>, ids: &[usize]) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let flat = flat_items(ds, ids.iter().copied());
    let (sub, local) = compact_rows(images, &flat);
    Ok(net.score_batch(&sub, &local)?.into_iter().map(|s| s.s).collect())
}

/// Ranking metrics of one user's outfits in `split`.
pub fn evaluate_user(
    net: &Network<f32>,
    ds: &Dataset,
    images: &Tensor<f32>,
    user: usize,
    split: Split,
) -> Result<Metrics> {
    let records: Vec<_> = ds.records(user, split).collect();
    if records.is_empty() {
        return Err(Error::InvalidArgument(format!("user {user} has no {split} outfits")));
    }
    let ids: Vec<usize> = records.iter().map(|r| r.id).collect();
    let scores = score_outfits(net, ds, images, &ids)?;
    let entries: Vec<(usize, f64, u8)> = records
        .iter()
        .zip(scores)
        .map(|(r, s)| (r.id, s, r.label.relevance()))
        .collect();
    Metrics::of(&RankedList::rank(&entries)?)
}
