//! The three set-compatibility architectures and the two-tower rank loss.
//!
//! * A: the category images are stacked into one `3N`-channel image and fed
//!   through a single backbone and one fc + softmax layer.
//! * B: one shared backbone embeds every item; the `N` features are
//!   concatenated and scored by a three-layer matching network.
//! * C: the shared backbone feeds one matching network per unordered category
//!   pair; the pairs' "liked" probabilities are summed.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::autodiff::{Graph, NodeId, ParamGroup, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::layers::{concat_channels, concat_features, matching_specs, BackboneConfig, Init, Sequential};
use crate::rng;

pub const CATEGORY_NAMES: [&str; 3] = ["top", "bottom", "shoes"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    A,
    B,
    C,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::A, Variant::B, Variant::C];

    /// Whether representation and matching are separate parameter groups
    /// (and partial fine-tuning is possible).
    pub fn has_separate_matching(self) -> bool {
        self != Variant::A
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Variant::A),
            "b" => Ok(Variant::B),
            "c" => Ok(Variant::C),
            other => Err(Error::Config(format!("unknown architecture `{other}` (expected a, b or c)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchingConfig {
    /// Hidden fc widths before the final two-way layer (He-initialized).
    pub hidden: Vec<usize>,
    /// Gaussian std of the final two-way layer.
    pub init_std: f64,
}

impl MatchingConfig {
    /// Widths scaled with the feature width: `[4D, 4D]` for B, `[2D, 2D]` per
    /// pair for C, and a single fc layer for A.
    pub fn for_variant(variant: Variant, feature_dim: usize) -> Self {
        let hidden = match variant {
            Variant::A => vec![],
            Variant::B => vec![4 * feature_dim; 2],
            Variant::C => vec![2 * feature_dim; 2],
        };
        MatchingConfig {
            hidden,
            init_std: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub variant: Variant,
    pub categories: usize,
    /// Per-item backbone (3 input channels). Variant A widens the input to
    /// `3 * categories` channels.
    pub backbone: BackboneConfig,
    pub matching: MatchingConfig,
}

impl Architecture {
    pub fn new(variant: Variant, backbone: BackboneConfig) -> Self {
        let matching = MatchingConfig::for_variant(variant, backbone.feature_dim);
        Architecture {
            variant,
            categories: 3,
            backbone,
            matching,
        }
    }

    /// Unordered category pairs in fixed order: (0,1), (0,2), (1,2), ...
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.categories;
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect()
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        let mut cfg = self.backbone.clone();
        if self.variant == Variant::A {
            cfg.in_channels *= self.categories;
        }
        cfg
    }

    /// Input width of each matching network.
    pub fn matching_input(&self) -> usize {
        let d = self.backbone.feature_dim;
        match self.variant {
            Variant::A => d,
            Variant::B => self.categories * d,
            Variant::C => 2 * d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::Config("at least two categories are required".into()));
        }
        if self.matching.hidden.contains(&0) {
            return Err(Error::Config("zero matching width".into()));
        }
        if !(self.matching.init_std > 0.0) {
            return Err(Error::Config("matching init std must be positive".into()));
        }
        self.backbone_config().validate()
    }
}

/// Which parameter groups receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub feature: bool,
    pub matching: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        feature: false,
        matching: false,
    };
    pub const ALL: Trainable = Trainable {
        feature: true,
        matching: true,
    };
    pub const MATCHING: Trainable = Trainable {
        feature: false,
        matching: true,
    };
}

/// Score of one outfit.
#[derive(Clone, Debug, PartialEq)]
pub struct OutfitScore {
    pub s: f64,
    /// `[liked, disliked]` softmax outputs: one entry for A and B, one per
    /// category pair for C.
    pub probs: Vec<[f64; 2]>,
}

impl OutfitScore {
    /// Per-pair "liked" probabilities (variant C only).
    pub fn pair_probs(&self) -> Option<Vec<f64>> {
        (self.probs.len() > 1).then(|| self.probs.iter().map(|p| p[0]).collect())
    }
}

/// Graph nodes of a batched score computation.
pub struct ScoreNodes {
    /// `[N]` scores.
    pub score: NodeId,
    /// `[N, 2]` softmax outputs per matching network.
    pub probs: Vec<NodeId>,
}

/// Graph nodes of a batched two-tower loss.
pub struct PairNodes {
    pub loss: NodeId,
    pub s_plus: NodeId,
    pub s_minus: NodeId,
}

/// `log(1 + exp(-(s_plus - s_minus)))`.
pub fn rank_loss(s_plus: f64, s_minus: f64) -> f64 {
    crate::autodiff::softplus(-(s_plus - s_minus))
}

const SCORE_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    seed: u64,
    params: ParamStore<T>,
    backbone: Sequential,
    heads: Vec<Sequential>,
}

impl<T: Scalar> Network<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let backbone =
            arch.backbone_config()
                .build("backbone", &mut params, &mut rng::stream(seed, "init.backbone", 0))?;
        let head_count = match arch.variant {
            Variant::A | Variant::B => 1,
            Variant::C => arch.pairs().len(),
        };
        let mut heads = Vec::with_capacity(head_count);
        for h in 0..head_count {
            let name = match arch.variant {
                Variant::C => {
                    let (i, j) = arch.pairs()[h];
                    format!("match.{}_{}", category_name(i), category_name(j))
                }
                _ => "match".to_string(),
            };
            let head = Sequential::build(
                &name,
                &[arch.matching_input()],
                matching_specs(&arch.matching.hidden),
                Init::He,
                &mut params,
                &mut rng::stream(seed, "init.matching", h as u64),
            )?;
            // small output layer: a fresh network scores every outfit alike
            let ids: Vec<_> = head.param_ids().collect();
            let out = ids[ids.len() - 2];
            let shape = params.get(out).shape().to_vec();
            *params.get_mut(out) = Tensor::randn(
                shape,
                arch.matching.init_std,
                &mut rng::stream(seed, "init.matching.out", h as u64),
            );
            heads.push(head);
        }
        if arch.variant == Variant::A {
            // representation and matching are one fused group
            for id in params.ids().collect::<Vec<_>>() {
                params.info_mut(id).group = ParamGroup::Feature;
            }
        }
        Ok(Network {
            arch,
            seed,
            params,
            backbone,
            heads,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn backbone(&self) -> &Sequential {
        &self.backbone
    }

    pub fn heads(&self) -> &[Sequential] {
        &self.heads
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            seed: self.seed,
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
        }
    }

    /// Copy backbone tensors from `other` (same backbone layout).
    pub fn load_backbone_from(&mut self, other: &Network<T>) -> Result<()> {
        if self.arch.backbone_config() != other.arch.backbone_config() {
            return Err(Error::Incompatible("backbone configurations differ".into()));
        }
        for (dst, src) in self.backbone.param_ids().zip(other.backbone.param_ids()) {
            *self.params.get_mut(dst) = other.params.get(src).clone();
            self.params.info_mut(dst).fresh = other.params.info(src).fresh;
        }
        Ok(())
    }

    fn image_shape(&self) -> [usize; 3] {
        let s = self.arch.backbone.image_side;
        [self.arch.backbone.in_channels, s, s]
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let want = self.image_shape();
        if images.rank() != 4 || images.shape()[1..] != want {
            let mut expected = vec![images.shape().first().copied().unwrap_or(1)];
            expected.extend_from_slice(&want);
            return Err(Error::ShapeMismatch {
                op: "outfit images",
                left: expected,
                right: images.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_outfits(&self, outfits: &[usize], rows: usize) -> Result<usize> {
        let n = self.arch.categories;
        if outfits.is_empty() || outfits.len() % n != 0 {
            return Err(Error::InvalidArgument(format!(
                "outfit index list of length {} is not a positive multiple of {n}",
                outfits.len()
            )));
        }
        if let Some(bad) = outfits.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "item row {bad} out of range for {rows} images"
            )));
        }
        Ok(outfits.len() / n)
    }

    /// Per-item backbone features `[U, D]` for item images `[U, 3, S, S]`.
    /// Variants B and C only.
    pub fn features_graph(&self, g: &mut Graph<T>, images: NodeId, trainable: bool) -> Result<NodeId> {
        if self.arch.variant == Variant::A {
            return Err(Error::InvalidArgument(
                "variant A has no per-item feature network".into(),
            ));
        }
        self.backbone.forward(g, &self.params, images, trainable)
    }

    /// Scores for outfits given item images `[U, 3, S, S]` and a flat list of
    /// item rows (`categories` entries per outfit, in category order).
    pub fn score_graph(
        &self,
        g: &mut Graph<T>,
        images: NodeId,
        outfits: &[usize],
        trainable: Trainable,
    ) -> Result<ScoreNodes> {
        let rows = g.shape(images)[0];
        self.check_outfits(outfits, rows)?;
        match self.arch.variant {
            Variant::A => {
                let slots: Vec<NodeId> = (0..self.arch.categories)
                    .map(|c| g.gather_rows(images, &column_of(outfits, self.arch.categories, c)))
                    .collect::<Result<_>>()?;
                let stacked = concat_channels(g, &slots)?;
                let feat = self.backbone.forward(g, &self.params, stacked, trainable.feature)?;
                // the head is part of the fused group
                let probs = self.heads[0].forward(g, &self.params, feat, trainable.feature)?;
                let score = g.column(probs, 0)?;
                Ok(ScoreNodes {
                    score,
                    probs: vec![probs],
                })
            }
            Variant::B | Variant::C => {
                let feats = self.features_graph(g, images, trainable.feature)?;
                self.score_from_features(g, feats, outfits, trainable.matching)
            }
        }
    }

    /// Matching-network scores from per-item features `[U, D]` (B and C).
    pub fn score_from_features(
        &self,
        g: &mut Graph<T>,
        feats: NodeId,
        outfits: &[usize],
        train_matching: bool,
    ) -> Result<ScoreNodes> {
        let n = self.arch.categories;
        let rows = g.shape(feats)[0];
        self.check_outfits(outfits, rows)?;
        let slots: Vec<NodeId> = (0..n)
            .map(|c| g.gather_rows(feats, &column_of(outfits, n, c)))
            .collect::<Result<_>>()?;
        match self.arch.variant {
            Variant::A => Err(Error::InvalidArgument(
                "variant A cannot score from item features".into(),
            )),
            Variant::B => {
                let joint = concat_features(g, &slots)?;
                let probs = self.heads[0].forward(g, &self.params, joint, train_matching)?;
                let score = g.column(probs, 0)?;
                Ok(ScoreNodes {
                    score,
                    probs: vec![probs],
                })
            }
            Variant::C => {
                let mut probs = Vec::new();
                let mut score: Option<NodeId> = None;
                for (head, (i, j)) in self.heads.iter().zip(self.arch.pairs()) {
                    let joint = concat_features(g, &[slots[i], slots[j]])?;
                    let p = head.forward(g, &self.params, joint, train_matching)?;
                    let liked = g.column(p, 0)?;
                    score = Some(match score {
                        None => liked,
                        Some(acc) => g.add(acc, liked)?,
                    });
                    probs.push(p);
                }
                Ok(ScoreNodes {
                    score: score.expect("at least one pair"),
                    probs,
                })
            }
        }
    }

    /// Two-tower loss: mean over pairs of `softplus(-(s+ - s-))`. Both towers
    /// are evaluated in one batch against a single binding of the parameters,
    /// so their gradients accumulate into the same tensors.
    pub fn pair_loss_graph(
        &self,
        g: &mut Graph<T>,
        images: NodeId,
        preferred: &[usize],
        other: &[usize],
        trainable: Trainable,
    ) -> Result<PairNodes> {
        let joined = self.join_towers(preferred, other)?;
        let scores = self.score_graph(g, images, &joined, trainable)?;
        self.tower_loss(g, scores.score, preferred.len() / self.arch.categories)
    }

    /// [`pair_loss_graph`](Self::pair_loss_graph) on precomputed item features.
    pub fn pair_loss_from_features(
        &self,
        g: &mut Graph<T>,
        feats: NodeId,
        preferred: &[usize],
        other: &[usize],
        train_matching: bool,
    ) -> Result<PairNodes> {
        let joined = self.join_towers(preferred, other)?;
        let scores = self.score_from_features(g, feats, &joined, train_matching)?;
        self.tower_loss(g, scores.score, preferred.len() / self.arch.categories)
    }

    fn join_towers(&self, preferred: &[usize], other: &[usize]) -> Result<Vec<usize>> {
        if preferred.len() != other.len() {
            return Err(Error::InvalidArgument(format!(
                "tower sizes differ: {} vs {} item rows",
                preferred.len(),
                other.len()
            )));
        }
        Ok(preferred.iter().chain(other).copied().collect())
    }

    fn tower_loss(&self, g: &mut Graph<T>, score: NodeId, m: usize) -> Result<PairNodes> {
        let plus: Vec<usize> = (0..m).collect();
        let minus: Vec<usize> = (m..2 * m).collect();
        let s_plus = g.gather_rows(score, &plus)?;
        let s_minus = g.gather_rows(score, &minus)?;
        let gap = g.sub(s_plus, s_minus)?;
        let neg = g.scale(gap, -1.0)?;
        let sp = g.softplus(neg)?;
        let loss = g.mean(sp)?;
        Ok(PairNodes {
            loss,
            s_plus,
            s_minus,
        })
    }

    /// Score a batch of outfits without recording gradients.
    pub fn score_batch(&self, images: &Tensor<T>, outfits: &[usize]) -> Result<Vec<OutfitScore>> {
        self.check_images(images)?;
        let n = self.arch.categories;
        self.check_outfits(outfits, images.shape()[0])?;
        match self.arch.variant {
            Variant::A => {
                let mut out = Vec::with_capacity(outfits.len() / n);
                for chunk in outfits.chunks(SCORE_CHUNK * n) {
                    // gather only the rows this chunk needs
                    let (sub, local) = compact_rows(images, chunk);
                    let mut g = Graph::new();
                    let x = g.input(sub);
                    let nodes = self.score_graph(&mut g, x, &local, Trainable::NONE)?;
                    out.extend(read_scores(&g, &nodes)?);
                }
                Ok(out)
            }
            Variant::B | Variant::C => {
                let feats = self.item_features(images)?;
                self.scores_from_features(&feats, outfits)
            }
        }
    }

    /// Backbone features `[U, D]` for item images `[U, 3, S, S]` (B and C).
    pub fn item_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        let rows = images.shape()[0];
        let d = self.arch.backbone.feature_dim;
        let mut data = Vec::with_capacity(rows * d);
        let mut start = 0;
        while start < rows {
            let end = (start + SCORE_CHUNK).min(rows);
            let mut g = Graph::new();
            let x = g.input(images.slice_rows(start, end));
            let f = self.features_graph(&mut g, x, false)?;
            g.check_finite(f)?;
            data.extend_from_slice(g.value(f).data());
            start = end;
        }
        Tensor::new(vec![rows, d], data)
    }

    /// Scores from precomputed item features (B and C).
    pub fn scores_from_features(&self, feats: &Tensor<T>, outfits: &[usize]) -> Result<Vec<OutfitScore>> {
        let mut g = Graph::new();
        let f = g.input(feats.clone());
        let nodes = self.score_from_features(&mut g, f, outfits, false)?;
        read_scores(&g, &nodes)
    }

    /// Score one outfit given one preprocessed `[3, S, S]` image per category.
    pub fn score(&self, images: &[&Tensor<T>]) -> Result<OutfitScore> {
        if images.len() != self.arch.categories {
            return Err(Error::InvalidArgument(format!(
                "expected {} images, got {}",
                self.arch.categories,
                images.len()
            )));
        }
        for img in images {
            if img.shape() != self.image_shape() {
                return Err(Error::ShapeMismatch {
                    op: "score",
                    left: self.image_shape().to_vec(),
                    right: img.shape().to_vec(),
                });
            }
        }
        let stacked = Tensor::stack(images)?;
        let rows: Vec<usize> = (0..images.len()).collect();
        Ok(self.score_batch(&stacked, &rows)?.remove(0))
    }

    /// `(s+, s-, loss)` for one preferred and one other outfit.
    pub fn pair_forward(&self, preferred: &[&Tensor<T>], other: &[&Tensor<T>]) -> Result<(f64, f64, f64)> {
        let plus = self.score(preferred)?.s;
        let minus = self.score(other)?.s;
        Ok((plus, minus, rank_loss(plus, minus)))
    }
}

fn category_name(i: usize) -> String {
    CATEGORY_NAMES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("cat{i}"))
}

/// Item rows of category `c` across a flat outfit list.
fn column_of(outfits: &[usize], n: usize, c: usize) -> Vec<usize> {
    outfits.chunks_exact(n).map(|o| o[c]).collect()
}

/// Copy the distinct rows referenced by `outfits` into a compact tensor and
/// remap the outfit list onto it.
pub(crate) fn compact_rows<T: Scalar>(images: &Tensor<T>, outfits: &[usize]) -> (Tensor<T>, Vec<usize>) {
    let mut order: Vec<usize> = outfits.to_vec();
    order.sort_unstable();
    order.dedup();
    let lookup = |r: usize| order.binary_search(&r).expect("present");
    let local = outfits.iter().map(|&r| lookup(r)).collect();
    let row: usize = images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(order.len() * row);
    for &r in &order {
        data.extend_from_slice(&images.data()[r * row..(r + 1) * row]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = order.len();
    (Tensor::new(shape, data).expect("row copy"), local)
}

fn read_scores<T: Scalar>(g: &Graph<T>, nodes: &ScoreNodes) -> Result<Vec<OutfitScore>> {
    g.check_finite(nodes.score)?;
    let s = g.value(nodes.score).data();
    let probs: Vec<&[T]> = nodes.probs.iter().map(|&p| g.value(p).data()).collect();
    Ok((0..s.len())
        .map(|i| OutfitScore {
            s: s[i].as_f64(),
            probs: probs
                .iter()
                .map(|p| [p[2 * i].as_f64(), p[2 * i + 1].as_f64()])
                .collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, GradCheck};
    use rand::SeedableRng;

    fn small_backbone() -> BackboneConfig {
        BackboneConfig {
            image_side: 8,
            feature_dim: 6,
            stage_widths: vec![4, 4],
            ..BackboneConfig::default()
        }
    }

    fn images(n: usize, side: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(vec![n, 3, side, side], 1.0, &mut rng::Rng::seed_from_u64(seed))
    }

    #[test]
    fn matching_widths_follow_layer_table() {
        let b = Architecture::new(Variant::B, BackboneConfig::default());
        assert_eq!(b.matching_input(), 192);
        let c = Architecture::new(Variant::C, BackboneConfig::default());
        assert_eq!(c.matching_input(), 128);
        let net = Network::<f32>::build(c, 1).unwrap();
        assert_eq!(net.heads().len(), 3);
        for h in net.heads() {
            assert_eq!(h.input_shape(), &[128]);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let arch = Architecture::new(Variant::C, small_backbone());
        let a = Network::<f32>::build(arch.clone(), 9).unwrap();
        let b = Network::<f32>::build(arch.clone(), 9).unwrap();
        let c = Network::<f32>::build(arch, 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert!(a.parameter_count() > 0);
    }

    #[test]
    fn invalid_widths_rejected() {
        let mut arch = Architecture::new(Variant::B, small_backbone());
        arch.matching.hidden = vec![0, 4];
        assert!(Network::<f32>::build(arch, 0).is_err());
        let arch = Architecture::new(
            Variant::B,
            BackboneConfig {
                feature_dim: 0,
                ..small_backbone()
            },
        );
        assert!(Network::<f32>::build(arch, 0).is_err());
    }

    #[test]
    fn group_partition() {
        for v in Variant::ALL {
            let net = Network::<f32>::build(Architecture::new(v, small_backbone()), 0).unwrap();
            let p = net.params();
            let matching = p.count_in(ParamGroup::Matching);
            assert_eq!(p.count_in(ParamGroup::Feature) + matching, p.count());
            match v {
                Variant::A => assert_eq!(matching, 0),
                _ => assert!(matching > 0),
            }
        }
    }

    #[test]
    fn variant_c_sums_pair_probabilities() {
        let net = Network::<f64>::build(Architecture::new(Variant::C, small_backbone()), 3).unwrap();
        let imgs = images(3, 8, 1);
        let parts: Vec<Tensor<f64>> = (0..3).map(|i| imgs.slice_rows(i, i + 1).reshape(vec![3, 8, 8]).unwrap()).collect();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let s = net.score(&refs).unwrap();
        let pairs = s.pair_probs().unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!((s.s - pairs.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn variant_a_liked_plus_disliked_is_one() {
        let net = Network::<f32>::build(Architecture::new(Variant::A, small_backbone()), 3).unwrap();
        let imgs = images(6, 8, 2).cast::<f32>();
        let scores = net.score_batch(&imgs, &[0, 1, 2, 3, 4, 5]).unwrap();
        for s in scores {
            assert!((s.s + s.probs[0][1] - 1.0).abs() < 1e-6);
            assert!(s.pair_probs().is_none());
        }
    }

    #[test]
    fn swapping_top_and_bottom_changes_score() {
        for v in Variant::ALL {
            let mut arch = Architecture::new(v, small_backbone());
            arch.matching.init_std = 0.5;
            let net = Network::<f64>::build(arch, 4).unwrap();
            let imgs = images(3, 8, 3);
            let s = net.score_batch(&imgs, &[0, 1, 2, 1, 0, 2]).unwrap();
            assert_ne!(s[0].s, s[1].s, "variant {v}");
        }
    }

    #[test]
    fn wrong_image_dims_rejected() {
        let net = Network::<f32>::build(Architecture::new(Variant::B, small_backbone()), 0).unwrap();
        let bad = Tensor::<f32>::zeros(vec![3, 3, 9, 9]);
        assert!(net.score_batch(&bad, &[0, 1, 2]).is_err());
        let one = Tensor::<f32>::zeros(vec![3, 8, 8]);
        assert!(net.score(&[&one, &one]).is_err());
    }

    #[test]
    fn rank_loss_values() {
        assert!((rank_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((rank_loss(2.0, 0.0) - 0.126_928_011_042_972_6).abs() < 1e-12);
        let far = rank_loss(-1000.0, 0.0);
        assert!((far - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn same_outfit_in_both_towers_gives_ln2() {
        for v in Variant::ALL {
            let net = Network::<f64>::build(Architecture::new(v, small_backbone()), 5).unwrap();
            let mut g = Graph::new();
            let x = g.input(images(3, 8, 4));
            let nodes = net
                .pair_loss_graph(&mut g, x, &[0, 1, 2], &[0, 1, 2], Trainable::ALL)
                .unwrap();
            assert_eq!(g.value(nodes.loss).item(), std::f64::consts::LN_2);
        }
    }

    #[test]
    fn weight_sharing_across_slots() {
        let net = Network::<f64>::build(Architecture::new(Variant::B, small_backbone()), 6).unwrap();
        let img = images(1, 8, 5);
        let stacked = Tensor::stack(&[&img.slice_rows(0, 1).reshape(vec![3, 8, 8]).unwrap(); 3]).unwrap();
        let feats = net.item_features(&stacked).unwrap();
        let d = 6;
        let f = feats.data();
        assert_eq!(&f[0..d], &f[d..2 * d]);
        assert_eq!(&f[0..d], &f[2 * d..3 * d]);
    }

    #[test]
    fn swapped_towers_satisfy_softplus_identity() {
        // softplus(-x) + softplus(x) >= 2 ln 2, equality iff x = 0
        let net = Network::<f64>::build(Architecture::new(Variant::C, small_backbone()), 7).unwrap();
        let imgs = images(6, 8, 6);
        let a = [0, 1, 2];
        let b = [3, 4, 5];
        let s = net.score_batch(&imgs, &[0, 1, 2, 3, 4, 5]).unwrap();
        let total = rank_loss(s[0].s, s[1].s) + rank_loss(s[1].s, s[0].s);
        assert!(total >= 2.0 * std::f64::consts::LN_2);
        let mut g = Graph::new();
        let x = g.input(imgs);
        let ab = net.pair_loss_graph(&mut g, x, &a, &b, Trainable::NONE).unwrap();
        let ba = net.pair_loss_graph(&mut g, x, &b, &a, Trainable::NONE).unwrap();
        let sum = g.value(ab.loss).item() + g.value(ba.loss).item();
        assert!((sum - total).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_is_mean_over_pairs() {
        let mut arch = Architecture::new(Variant::B, small_backbone());
        arch.matching.init_std = 0.3;
        let net = Network::<f64>::build(arch, 8).unwrap();
        let imgs = images(9, 8, 7);
        let pref = [0, 1, 2, 3, 4, 5];
        let other = [6, 7, 8, 2, 1, 0];
        let mut g = Graph::new();
        let x = g.input(imgs.clone());
        let nodes = net.pair_loss_graph(&mut g, x, &pref, &other, Trainable::NONE).unwrap();
        let s = net.score_batch(&imgs, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 2, 1, 0]).unwrap();
        let expect = (rank_loss(s[0].s, s[2].s) + rank_loss(s[1].s, s[3].s)) / 2.0;
        assert!((g.value(nodes.loss).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn pair_loss_gradients_match_finite_differences() {
        for (trial, v) in Variant::ALL.into_iter().enumerate() {
            let mut arch = Architecture::new(v, small_backbone());
            arch.matching.hidden = arch.matching.hidden.iter().map(|_| 5).collect();
            arch.matching.init_std = 0.4;
            arch.backbone.lrn.alpha = 0.2;
            let net = Network::<f64>::build(arch, trial as u64).unwrap();
            let imgs = images(6, 8, 10 + trial as u64);
            let mut params = net.params().clone();
            let err = gradient_check(
                &mut params,
                |g, p| {
                    let mut local = net.clone();
                    *local.params_mut() = p.clone();
                    let x = g.input(imgs.clone());
                    Ok(local
                        .pair_loss_graph(g, x, &[0, 1, 2, 3, 4, 5], &[3, 1, 5, 0, 4, 2], Trainable::ALL)?
                        .loss)
                },
                GradCheck {
                    samples_per_tensor: 6,
                    ..GradCheck::default()
                },
            )
            .unwrap();
            assert!(err < 1e-4, "variant {v}: {err}");
        }
    }

    #[test]
    fn ranking_by_liked_equals_ranking_by_margin() {
        let mut arch = Architecture::new(Variant::B, small_backbone());
        arch.matching.init_std = 0.5;
        let net = Network::<f64>::build(arch, 11).unwrap();
        let imgs = images(12, 8, 12);
        let outfits: Vec<usize> = (0..12).collect();
        let scores = net.score_batch(&imgs, &outfits).unwrap();
        let mut by_liked: Vec<usize> = (0..4).collect();
        by_liked.sort_by(|&a, &b| scores[b].s.total_cmp(&scores[a].s));
        let mut by_margin: Vec<usize> = (0..4).collect();
        let margin = |i: usize| scores[i].probs[0][0] - scores[i].probs[0][1];
        by_margin.sort_by(|&a, &b| margin(b).total_cmp(&margin(a)));
        assert_eq!(by_liked, by_margin);
    }
}
