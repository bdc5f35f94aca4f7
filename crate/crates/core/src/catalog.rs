//! Synthetic stand-in for a user-curated outfit corpus.
//!
//! Items carry hidden attribute vectors that are rendered into images. Each
//! user has one preference matrix per category pair, and the ground-truth
//! compatibility of an outfit is the sum of the bilinear pair terms plus a
//! small fixed per-(user, outfit) noise. Positive outfits are the best-scoring
//! members of a random candidate pool; neutral outfits are uniform mixes.

mod render;
mod store;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub use render::render;
pub use store::{load_dataset, save_dataset, DATASET_VERSION};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Neutral,
}

impl Label {
    pub fn relevance(self) -> u8 {
        match self {
            Label::Positive => 1,
            Label::Neutral => 0,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Positive => "positive",
            Label::Neutral => "neutral",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Label::Positive),
            "neutral" => Ok(Label::Neutral),
            other => Err(Error::Config(format!("unknown label `{other}`"))),
        }
    }
}

/// Positive outfits per user in each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn scaled(&self, factor: usize) -> SplitCounts {
        SplitCounts {
            train: self.train * factor,
            val: self.val * factor,
            test: self.test * factor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatalogConfig {
    pub categories: usize,
    pub items_per_category: usize,
    /// Attribute dimension `k`.
    pub attr_dim: usize,
    pub image_side: usize,
    pub users: usize,
    pub positives: SplitCounts,
    /// Neutral outfits per positive outfit, in every split.
    pub neutral_ratio: usize,
    /// Candidate pool size per positive when selecting a user's positives.
    pub candidate_factor: usize,
    /// Weight of the preference component shared by all users, in `[0, 1]`.
    pub shared_weight: f64,
    /// Rank of each personal preference component; 0 means full rank.
    pub personal_rank: usize,
    /// Frobenius norm of every preference matrix (bounds its spectral norm).
    pub pref_norm: f64,
    /// Oracle noise as a fraction of the noise-free score's standard deviation.
    pub noise: f64,
    /// Standard deviation of the fixed per-category image texture.
    pub texture: f64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        CatalogConfig {
            categories: 3,
            items_per_category: 300,
            attr_dim: 8,
            image_side: 32,
            users: 8,
            positives: SplitCounts {
                train: 40,
                val: 10,
                test: 14,
            },
            neutral_ratio: 6,
            candidate_factor: 100,
            shared_weight: 0.4,
            personal_rank: 1,
            pref_norm: 3.0,
            noise: 0.1,
            texture: 0.02,
        }
    }
}

impl CatalogConfig {
    /// Per-user counts of the original corpus: 202/46/62 positives.
    pub fn paper_scale() -> Self {
        CatalogConfig {
            positives: SplitCounts {
                train: 202,
                val: 46,
                test: 62,
            },
            ..Self::default()
        }
    }

    pub fn neutrals(&self) -> SplitCounts {
        self.positives.scaled(self.neutral_ratio)
    }

    pub fn pair_count(&self) -> usize {
        self.categories * (self.categories - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.categories < 2 {
            return fail("at least two categories are required".into());
        }
        if self.attr_dim < 2 {
            return fail(format!("attribute dimension {} < 2", self.attr_dim));
        }
        if self.image_side < 16 {
            return fail(format!("image side {} < 16", self.image_side));
        }
        if self.items_per_category == 0 || self.users == 0 {
            return fail("empty catalog or user set".into());
        }
        if self.positives.total() == 0 || self.positives.test == 0 {
            return fail("every user needs test positives".into());
        }
        if self.neutral_ratio == 0 {
            return fail("neutral ratio must be positive".into());
        }
        if self.candidate_factor == 0 {
            return fail("candidate factor must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.shared_weight) {
            return fail(format!("shared weight {} not in [0, 1]", self.shared_weight));
        }
        if !(self.pref_norm > 0.0) || !(self.noise >= 0.0) || !(self.texture >= 0.0) {
            return fail("preference norm must be positive and noise levels non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: usize,
    pub category: usize,
    /// Hidden attributes in `[-1, 1]`.
    pub attrs: Vec<f64>,
    /// Raw rendering `[3, S, S]` (before mean subtraction).
    pub image: Tensor<f32>,
}

/// A user's ground-truth taste: one `k x k` matrix per category pair.
#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub id: usize,
    /// Row-major matrices in pair order (0,1), (0,2), (1,2), ...
    pub prefs: Vec<Vec<f64>>,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutfitRecord {
    pub id: usize,
    pub user: usize,
    pub split: Split,
    pub label: Label,
    /// One item id per category, in category order.
    pub items: Vec<usize>,
    pub oracle: f64,
}

/// Unordered category pairs in fixed order.
pub fn category_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Items of every category; item ids are `category * per_category + j`.
pub fn generate_catalog(cfg: &CatalogConfig, seed: u64) -> Result<Vec<Item>> {
    cfg.validate()?;
    let render_seed = rng::derive(seed, "render", 0);
    let mut items = Vec::with_capacity(cfg.categories * cfg.items_per_category);
    for c in 0..cfg.categories {
        let mut r = rng::stream(seed, "items", c as u64);
        for j in 0..cfg.items_per_category {
            let attrs: Vec<f64> = (0..cfg.attr_dim).map(|_| r.gen_range(-1.0..=1.0)).collect();
            let image = render(c, &attrs, cfg.image_side, render_seed, cfg.texture);
            items.push(Item {
                id: c * cfg.items_per_category + j,
                category: c,
                attrs,
                image,
            });
        }
    }
    Ok(items)
}

fn gaussian_matrix(k: usize, r: &mut rng::Rng) -> Vec<f64> {
    (0..k * k).map(|_| StandardNormal.sample(r)).collect()
}

fn low_rank_matrix(k: usize, rank: usize, r: &mut rng::Rng) -> Vec<f64> {
    if rank == 0 || rank >= k {
        return gaussian_matrix(k, r);
    }
    let mut m = vec![0.0; k * k];
    for _ in 0..rank {
        let u: Vec<f64> = (0..k).map(|_| StandardNormal.sample(r)).collect();
        let v: Vec<f64> = (0..k).map(|_| StandardNormal.sample(r)).collect();
        for i in 0..k {
            for j in 0..k {
                m[i * k + j] += u[i] * v[j];
            }
        }
    }
    m
}

fn with_frobenius(mut m: Vec<f64>, norm: f64) -> Vec<f64> {
    let f = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if f > 0.0 {
        for v in &mut m {
            *v *= norm / f;
        }
    }
    m
}

/// User preference matrices: a mix of components shared by all users and
/// personal ones, each pair matrix rescaled to `pref_norm`.
pub fn generate_users(cfg: &CatalogConfig, seed: u64) -> Result<Vec<UserProfile>> {
    cfg.validate()?;
    let k = cfg.attr_dim;
    let pairs = cfg.pair_count();
    let mut shared_rng = rng::stream(seed, "users.shared", 0);
    let shared: Vec<Vec<f64>> = (0..pairs)
        .map(|_| with_frobenius(gaussian_matrix(k, &mut shared_rng), 1.0))
        .collect();
    // noise-free score variance is sum_p ||W_p||_F^2 / 9 for uniform attributes
    let sigma = cfg.noise * cfg.pref_norm * (pairs as f64).sqrt() / 3.0;
    Ok((0..cfg.users)
        .map(|u| {
            let mut r = rng::stream(seed, "users.personal", u as u64);
            let prefs = shared
                .iter()
                .map(|s| {
                    let p = with_frobenius(low_rank_matrix(k, cfg.personal_rank, &mut r), 1.0);
                    let mixed = s
                        .iter()
                        .zip(&p)
                        .map(|(a, b)| cfg.shared_weight * a + (1.0 - cfg.shared_weight) * b)
                        .collect();
                    with_frobenius(mixed, cfg.pref_norm)
                })
                .collect();
            UserProfile { id: u, prefs, sigma }
        })
        .collect())
}

/// Spectral norm of a row-major `k x k` matrix by power iteration on `M'M`.
pub fn spectral_norm(m: &[f64], k: usize) -> f64 {
    let mut v = vec![1.0 / (k as f64).sqrt(); k];
    let mut est = 0.0;
    for _ in 0..200 {
        let mv: Vec<f64> = (0..k).map(|i| (0..k).map(|j| m[i * k + j] * v[j]).sum()).collect();
        let mtmv: Vec<f64> = (0..k).map(|j| (0..k).map(|i| m[i * k + j] * mv[i]).sum()).collect();
        let n = mtmv.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        est = n.sqrt();
        v = mtmv.iter().map(|x| x / n).collect();
    }
    est
}

fn bilinear(a: &[f64], m: &[f64], b: &[f64]) -> f64 {
    let k = a.len();
    let mut total = 0.0;
    for i in 0..k {
        let row = &m[i * k..(i + 1) * k];
        total += a[i] * row.iter().zip(b).map(|(w, x)| w * x).sum::<f64>();
    }
    total
}

/// Noise-free compatibility: the sum of pair terms `a_i' W_ij a_j`.
pub fn oracle_clean(user: &UserProfile, attrs: &[&[f64]]) -> f64 {
    category_pairs(attrs.len())
        .iter()
        .zip(&user.prefs)
        .map(|(&(i, j), w)| bilinear(attrs[i], w, attrs[j]))
        .sum()
}

/// Fixed noise for one (user, outfit) pair: a Gaussian with the user's
/// sigma, seeded from the dataset seed, the user and the item ids.
pub fn oracle_noise(seed: u64, user: &UserProfile, items: &[usize]) -> f64 {
    if user.sigma == 0.0 {
        return 0.0;
    }
    let mut key = rng::derive(seed, "oracle.noise", user.id as u64);
    for &i in items {
        key = rng::derive(key, "item", i as u64);
    }
    let z: f64 = StandardNormal.sample(&mut <rng::Rng as rand::SeedableRng>::seed_from_u64(key));
    user.sigma * z
}

/// Ground-truth score of an outfit for a user.
pub fn oracle_score(items: &[Item], outfit: &[usize], user: &UserProfile, seed: u64) -> f64 {
    let attrs: Vec<&[f64]> = outfit.iter().map(|&i| items[i].attrs.as_slice()).collect();
    oracle_clean(user, &attrs) + oracle_noise(seed, user, outfit)
}

fn random_outfit(cfg: &CatalogConfig, r: &mut rng::Rng) -> Vec<usize> {
    (0..cfg.categories)
        .map(|c| c * cfg.items_per_category + r.gen_range(0..cfg.items_per_category))
        .collect()
}

/// The `n_pos` highest-scoring outfits (by the user's oracle) out of a pool
/// of `candidate_factor * n_pos` uniform random outfits. Returned best first,
/// with ids, splits and owners left for [`split_dataset`] to fill in.
pub fn generate_user_outfits(
    cfg: &CatalogConfig,
    items: &[Item],
    user: &UserProfile,
    n_pos: usize,
    seed: u64,
) -> Result<Vec<OutfitRecord>> {
    if n_pos == 0 {
        return Ok(Vec::new());
    }
    let pool = n_pos * cfg.candidate_factor;
    let distinct = (cfg.items_per_category as f64).powi(cfg.categories as i32);
    if (pool as f64) > distinct || items.len() < cfg.categories * cfg.items_per_category {
        return Err(Error::InvalidArgument(format!(
            "catalog too small for a pool of {pool} candidate outfits"
        )));
    }
    let mut r = rng::stream(seed, "positives", user.id as u64);
    let mut scored: Vec<(f64, Vec<usize>)> = (0..pool)
        .map(|_| {
            let o = random_outfit(cfg, &mut r);
            (oracle_score(items, &o, user, seed), o)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    Ok(scored
        .into_iter()
        .take(n_pos)
        .map(|(oracle, items)| OutfitRecord {
            id: 0,
            user: user.id,
            split: Split::Train,
            label: Label::Positive,
            items,
            oracle,
        })
        .collect())
}

/// `n` uniform mixes of one item per category. Oracle scores are left at 0
/// for the caller to fill in for the owning user.
pub fn generate_neutral_outfits(cfg: &CatalogConfig, n: usize, seed: u64) -> Vec<OutfitRecord> {
    let mut r = rng::stream(seed, "neutrals", 0);
    (0..n)
        .map(|_| OutfitRecord {
            id: 0,
            user: 0,
            split: Split::Train,
            label: Label::Neutral,
            items: random_outfit(cfg, &mut r),
            oracle: 0.0,
        })
        .collect()
}

/// Assign consecutive blocks of `records` to train/val/test according to
/// `counts`.
pub fn split_dataset(mut records: Vec<OutfitRecord>, counts: SplitCounts) -> Result<Vec<OutfitRecord>> {
    if counts.total() != records.len() {
        return Err(Error::Config(format!(
            "split counts {}/{}/{} do not cover {} records",
            counts.train,
            counts.val,
            counts.test,
            records.len()
        )));
    }
    for (i, rec) in records.iter_mut().enumerate() {
        rec.split = if i < counts.train {
            Split::Train
        } else if i < counts.train + counts.val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(records)
}

/// Error when an outfit id appears in more than one split.
pub fn check_disjoint(records: &[OutfitRecord]) -> Result<()> {
    let mut seen = std::collections::HashMap::new();
    for r in records {
        if let Some(prev) = seen.insert(r.id, r.split) {
            if prev != r.split {
                return Err(Error::InvalidArgument(format!(
                    "outfit {} appears in both {prev} and {} splits",
                    r.id, r.split
                )));
            }
            return Err(Error::InvalidArgument(format!("duplicate outfit id {}", r.id)));
        }
    }
    Ok(())
}

/// A generated corpus: items, users, outfit records, and the training-split
/// mean image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: CatalogConfig,
    pub seed: u64,
    pub items: Vec<Item>,
    pub users: Vec<UserProfile>,
    pub outfits: Vec<OutfitRecord>,
    pub mean_image: Tensor<f32>,
}

impl Dataset {
    pub fn generate(cfg: &CatalogConfig, seed: u64) -> Result<Dataset> {
        cfg.validate()?;
        let items = generate_catalog(cfg, seed)?;
        let users = generate_users(cfg, seed)?;
        let neutral_counts = cfg.neutrals();
        let per_user = cfg.positives.total() + neutral_counts.total();
        let mut outfits = Vec::with_capacity(per_user * users.len());
        for user in &users {
            let mut positives = generate_user_outfits(cfg, &items, user, cfg.positives.total(), seed)?;
            positives.shuffle(&mut rng::stream(seed, "positives.order", user.id as u64));
            let positives = split_dataset(positives, cfg.positives)?;
            let neutrals = generate_neutral_outfits(
                cfg,
                neutral_counts.total(),
                rng::derive(seed, "neutrals.user", user.id as u64),
            );
            let mut neutrals = split_dataset(neutrals, neutral_counts)?;
            for n in &mut neutrals {
                n.user = user.id;
                n.oracle = oracle_score(&items, &n.items, user, seed);
            }
            // ids are shuffled within the user so ties never favour a label
            let mut ids: Vec<usize> = (user.id * per_user..(user.id + 1) * per_user).collect();
            ids.shuffle(&mut rng::stream(seed, "outfit.ids", user.id as u64));
            let mut block: Vec<OutfitRecord> = positives.into_iter().chain(neutrals).collect();
            for (rec, id) in block.iter_mut().zip(ids) {
                rec.id = id;
            }
            block.sort_by_key(|r| r.id);
            outfits.extend(block);
        }
        check_disjoint(&outfits)?;
        let mean_image = mean_image(&items, &outfits, cfg)?;
        Ok(Dataset {
            config: cfg.clone(),
            seed,
            items,
            users,
            outfits,
            mean_image,
        })
    }

    /// Record with outfit id `id` (ids are dense and sorted).
    pub fn outfit(&self, id: usize) -> &OutfitRecord {
        let r = &self.outfits[id];
        debug_assert_eq!(r.id, id);
        r
    }

    /// Outfit ids of one user, split and label.
    pub fn ids(&self, user: usize, split: Split, label: Label) -> Vec<usize> {
        self.records(user, split)
            .filter(|r| r.label == label)
            .map(|r| r.id)
            .collect()
    }

    pub fn records(&self, user: usize, split: Split) -> impl Iterator<Item = &OutfitRecord> {
        self.outfits
            .iter()
            .filter(move |r| r.user == user && r.split == split)
    }

    pub fn records_in(&self, split: Split, label: Label) -> impl Iterator<Item = &OutfitRecord> {
        self.outfits
            .iter()
            .filter(move |r| r.split == split && r.label == label)
    }

    /// Items referenced by any training outfit, ascending.
    pub fn train_items(&self) -> Vec<usize> {
        train_items(&self.outfits)
    }

    /// Root-mean-square pixel deviation of training items from the mean image.
    pub fn pixel_scale(&self) -> f64 {
        let mean = self.mean_image.data();
        let ids = self.train_items();
        let mut sum = 0.0;
        for &i in &ids {
            for (x, m) in self.items[i].image.data().iter().zip(mean) {
                sum += ((x - m) as f64).powi(2);
            }
        }
        (sum / (ids.len() * mean.len()) as f64).sqrt()
    }

    /// All item images with the mean image subtracted and divided by
    /// [`Dataset::pixel_scale`], `[items, 3, S, S]`.
    pub fn preprocessed_images(&self) -> Tensor<f32> {
        let mean = self.mean_image.data();
        let inv = 1.0 / self.pixel_scale().max(1e-12) as f32;
        let mut data = Vec::with_capacity(self.items.len() * mean.len());
        for item in &self.items {
            data.extend(item.image.data().iter().zip(mean).map(|(x, m)| (x - m) * inv));
        }
        let s = self.config.image_side;
        Tensor::new(vec![self.items.len(), 3, s, s], data).expect("item images")
    }

    pub fn oracle_score(&self, user: usize, outfit: &[usize]) -> f64 {
        oracle_score(&self.items, outfit, &self.users[user], self.seed)
    }
}

fn train_items(outfits: &[OutfitRecord]) -> Vec<usize> {
    let mut ids: Vec<usize> = outfits
        .iter()
        .filter(|r| r.split == Split::Train)
        .flat_map(|r| r.items.iter().copied())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Per-pixel mean over the items used by training outfits.
fn mean_image(items: &[Item], outfits: &[OutfitRecord], cfg: &CatalogConfig) -> Result<Tensor<f32>> {
    let ids = train_items(outfits);
    if ids.is_empty() {
        return Err(Error::Config("no training items".into()));
    }
    let s = cfg.image_side;
    let mut acc = vec![0f64; 3 * s * s];
    for &i in &ids {
        for (a, &v) in acc.iter_mut().zip(items[i].image.data()) {
            *a += v as f64;
        }
    }
    let n = ids.len() as f64;
    Tensor::new(vec![3, s, s], acc.iter().map(|a| (a / n) as f32).collect())
}
