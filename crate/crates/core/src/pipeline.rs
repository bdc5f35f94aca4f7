//! Experiment orchestration: per-component seeds, the staged protocol
//! (initial, stage one, stage two) for each architecture, evaluation and the
//! report tables.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::{ParamGroup, Tensor};
use crate::catalog::{Dataset, Split};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{aggregate, write_csv, write_curve_csv, write_metrics_csv, Metrics};
use crate::models::{Architecture, Network, Variant};
use crate::rng;
use crate::training::{
    check_mode, evaluate_user, fine_tune, pretrain_backbone, train_stage_one, EpochStats, FineTuneMode,
};

/// Seeds of the independent random components, split from one root seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub pairing: u64,
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        Seeds {
            data: rng::derive(root, "data", 0),
            init: rng::derive(root, "init", 0),
            pairing: rng::derive(root, "pairing", 0),
        }
    }
}

/// Training strategies in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Initial,
    StageOne,
    Direct,
    Partial,
    Whole,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Initial, Stage::StageOne, Stage::Direct, Stage::Partial, Stage::Whole];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Initial => "Initial",
            Stage::StageOne => "Stage one",
            Stage::Direct => "Stage two (direct)",
            Stage::Partial => "Stage two (partial)",
            Stage::Whole => "Stage two (whole)",
        }
    }

    pub fn mode(self) -> Option<FineTuneMode> {
        match self {
            Stage::Direct => Some(FineTuneMode::Direct),
            Stage::Partial => Some(FineTuneMode::Partial),
            Stage::Whole => Some(FineTuneMode::Whole),
            Stage::Initial | Stage::StageOne => None,
        }
    }

    pub fn of_mode(mode: FineTuneMode) -> Stage {
        match mode {
            FineTuneMode::Direct => Stage::Direct,
            FineTuneMode::Partial => Stage::Partial,
            FineTuneMode::Whole => Stage::Whole,
        }
    }

    /// The strategies reported for an architecture: partial for B and C,
    /// direct for A.
    pub fn for_variant(variant: Variant) -> Vec<Stage> {
        let second = if variant.has_separate_matching() {
            Stage::Partial
        } else {
            Stage::Direct
        };
        vec![Stage::Initial, Stage::StageOne, second, Stage::Whole]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Initial => "initial",
            Stage::StageOne => "stage-one",
            Stage::Direct => "direct",
            Stage::Partial => "partial",
            Stage::Whole => "whole",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|stage| stage.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

pub fn architecture(cfg: &RunConfig, variant: Variant) -> Architecture {
    let mut arch = Architecture::new(variant, cfg.backbone());
    arch.categories = cfg.data.categories;
    arch.matching.init_std = cfg.model.matching_init_std;
    arch
}

/// Per-user metrics of one network per user, or of one network shared by all
/// users when `nets` has a single entry.
pub fn evaluate(nets: &[&Network<f32>], ds: &Dataset, images: &Tensor<f32>, split: Split) -> Result<Vec<Metrics>> {
    if nets.len() != 1 && nets.len() != ds.users.len() {
        return Err(Error::InvalidArgument(format!(
            "{} networks for {} users",
            nets.len(),
            ds.users.len()
        )));
    }
    (0..ds.users.len())
        .map(|u| evaluate_user(nets[u.min(nets.len() - 1)], ds, images, u, split))
        .collect()
}

/// Fine-tune one network per user with up to `jobs` worker threads.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune_all(
    start: &Network<f32>,
    ds: &Dataset,
    images: &Tensor<f32>,
    mode: FineTuneMode,
    cfg: &RunConfig,
    seed: u64,
    jobs: usize,
) -> Result<Vec<(Network<f32>, Vec<EpochStats>)>> {
    check_mode(start.variant(), mode)?;
    let feats = if mode == FineTuneMode::Partial {
        Some(start.item_features(images)?)
    } else {
        None
    };
    let users: Vec<usize> = (0..ds.users.len()).collect();
    let jobs = jobs.clamp(1, users.len().max(1));
    let run = |u: usize| fine_tune(start, ds, images, u, mode, &cfg.train, seed, feats.as_ref());
    if jobs == 1 {
        return users.into_iter().map(run).collect();
    }
    let chunks: Vec<Vec<usize>> = (0..jobs).map(|j| users.iter().copied().skip(j).step_by(jobs).collect()).collect();
    let mut slots: Vec<Option<Result<(Network<f32>, Vec<EpochStats>)>>> = (0..users.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| scope.spawn(|| chunk.iter().map(|&u| (u, run(u))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (u, r) in h.join().expect("fine-tuning worker panicked") {
                slots[u] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every user ran")).collect()
}

/// Results of every stage of one architecture.
#[derive(Clone, Debug)]
pub struct VariantRun {
    pub variant: Variant,
    pub aux_curve: Vec<EpochStats>,
    pub stage_one_curve: Vec<EpochStats>,
    pub initial: Network<f32>,
    pub stage_one: Network<f32>,
    /// One network per user for each second-stage strategy that was run.
    pub fine_tuned: BTreeMap<Stage, Vec<Network<f32>>>,
    pub val: BTreeMap<Stage, Vec<Metrics>>,
    pub test: BTreeMap<Stage, Vec<Metrics>>,
}

impl VariantRun {
    pub fn test_mean(&self, stage: Stage) -> Option<f64> {
        self.test.get(&stage).map(|m| aggregate(m).map(|a| a.mean_ndcg).unwrap_or(f64::NAN))
    }

    pub fn val_mean(&self, stage: Stage) -> Option<f64> {
        self.val.get(&stage).map(|m| aggregate(m).map(|a| a.mean_ndcg).unwrap_or(f64::NAN))
    }

    /// Feature-network hash of the stage-one network and of every partial
    /// fine-tuned network.
    pub fn feature_hashes(&self) -> (String, Vec<String>) {
        let hash = |n: &Network<f32>| n.params().group_hash(ParamGroup::Feature);
        let partial = self
            .fine_tuned
            .get(&Stage::Partial)
            .map(|nets| nets.iter().map(hash).collect())
            .unwrap_or_default();
        (hash(&self.stage_one), partial)
    }
}

/// A configured experiment over one generated dataset.
pub struct Experiment {
    pub config: RunConfig,
    pub seeds: Seeds,
    pub dataset: Dataset,
    pub images: Tensor<f32>,
    /// Auxiliary-pretrained per-item network, shared by B and C.
    pretrained: Option<(Network<f32>, Vec<EpochStats>)>,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let seeds = Seeds::from_root(config.seed);
        let dataset = Dataset::generate(&config.data, seeds.data)?;
        Ok(Self::with_dataset(config, dataset))
    }

    pub fn with_dataset(config: RunConfig, dataset: Dataset) -> Self {
        let images = dataset.preprocessed_images();
        Experiment {
            seeds: Seeds::from_root(config.seed),
            config,
            dataset,
            images,
            pretrained: None,
        }
    }

    /// Fresh network with randomly initialized tensors.
    pub fn untrained(&self, variant: Variant) -> Result<Network<f32>> {
        Network::build(architecture(&self.config, variant), self.seeds.init)
    }

    /// The "Initial" network: auxiliary-pretrained backbone and random
    /// matching networks. B and C reuse one pretrained backbone.
    pub fn initial(&mut self, variant: Variant) -> Result<(Network<f32>, Vec<EpochStats>)> {
        let mut net = self.untrained(variant)?;
        if variant == Variant::A {
            let curve = pretrain_backbone(&mut net, &self.dataset, &self.images, &self.config.train, self.seeds.init)?;
            return Ok((net, curve));
        }
        if self.pretrained.is_none() {
            let mut base = self.untrained(Variant::B)?;
            let curve = pretrain_backbone(&mut base, &self.dataset, &self.images, &self.config.train, self.seeds.init)?;
            self.pretrained = Some((base, curve));
        }
        let (base, curve) = self.pretrained.as_ref().expect("pretrained above");
        net.load_backbone_from(base)?;
        Ok((net, curve.clone()))
    }

    pub fn stage_one(&self, initial: &Network<f32>) -> Result<(Network<f32>, Vec<EpochStats>)> {
        let mut net = initial.clone();
        let (curve, _) = train_stage_one(&mut net, &self.dataset, &self.images, &self.config.train, self.seeds.pairing)?;
        Ok((net, curve))
    }

    pub fn fine_tune_all(&self, start: &Network<f32>, mode: FineTuneMode, jobs: usize) -> Result<Vec<Network<f32>>> {
        Ok(fine_tune_all(start, &self.dataset, &self.images, mode, &self.config, self.seeds.pairing, jobs)?
            .into_iter()
            .map(|(n, _)| n)
            .collect())
    }

    pub fn evaluate(&self, nets: &[&Network<f32>], split: Split) -> Result<Vec<Metrics>> {
        evaluate(nets, &self.dataset, &self.images, split)
    }

    /// Run and evaluate every stage in `stages` for one architecture.
    pub fn run_variant(&mut self, variant: Variant, stages: &[Stage], jobs: usize) -> Result<VariantRun> {
        let (initial, aux_curve) = self.initial(variant)?;
        let (stage_one, stage_one_curve) = self.stage_one(&initial)?;
        let mut run = VariantRun {
            variant,
            aux_curve,
            stage_one_curve,
            initial,
            stage_one,
            fine_tuned: BTreeMap::new(),
            val: BTreeMap::new(),
            test: BTreeMap::new(),
        };
        for &stage in stages {
            let nets: Vec<&Network<f32>> = match stage.mode() {
                None => vec![if stage == Stage::Initial { &run.initial } else { &run.stage_one }],
                Some(mode) => {
                    let start = if mode == FineTuneMode::Direct { &run.initial } else { &run.stage_one };
                    let tuned = self.fine_tune_all(start, mode, jobs)?;
                    run.fine_tuned.insert(stage, tuned);
                    run.fine_tuned[&stage].iter().collect()
                }
            };
            let val = self.evaluate(&nets, Split::Val)?;
            let test = self.evaluate(&nets, Split::Test)?;
            run.val.insert(stage, val);
            run.test.insert(stage, test);
        }
        Ok(run)
    }
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: Variant,
    pub stage: Stage,
    pub mean_ndcg: f64,
    pub top10_positive: f64,
}

/// Rows sorted by architecture, then strategy order.
pub fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by_key(|r| (r.variant, r.stage));
}

/// `architecture,strategy,mean_ndcg,top10_positive`.
pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["architecture", "strategy", "mean_ndcg", "top10_positive"])?;
    for r in &rows {
        w.write_record([
            r.variant.to_string(),
            r.stage.label().to_string(),
            format!("{:.6}", r.mean_ndcg),
            format!("{:.6}", r.top10_positive),
        ])?;
    }
    write_csv(path, w)
}

/// Metric files of one (architecture, strategy): per-user table, NDCG@m
/// curve and top-k positives curve.
pub fn write_stage_metrics(dir: &Path, variant: Variant, stage: Stage, per_user: &[Metrics]) -> Result<ReportRow> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let total = aggregate(per_user)?;
    let rows: Vec<(usize, Metrics)> = per_user.iter().cloned().enumerate().collect();
    let stem = format!("{variant}-{stage}");
    write_metrics_csv(&dir.join(format!("metrics-{stem}.csv")), &rows, &total)?;
    write_curve_csv(&dir.join(format!("ndcg-at-{stem}.csv")), "m", &total.ndcg_at)?;
    write_curve_csv(&dir.join(format!("topk-{stem}.csv")), "k", &total.topk_positive)?;
    Ok(ReportRow {
        variant,
        stage,
        mean_ndcg: total.mean_ndcg,
        top10_positive: total.topk(10),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_order_and_names() {
        let mut shuffled = vec![Stage::Whole, Stage::Initial, Stage::Partial, Stage::StageOne, Stage::Direct];
        shuffled.sort();
        assert_eq!(shuffled, Stage::ALL);
        for s in Stage::ALL {
            assert_eq!(s.to_string().parse::<Stage>().unwrap(), s);
        }
        assert!("stage-two".parse::<Stage>().is_err());
        assert_eq!(Stage::for_variant(Variant::A)[2], Stage::Direct);
        assert_eq!(Stage::for_variant(Variant::C)[2], Stage::Partial);
    }

    #[test]
    fn seeds_differ_per_component() {
        let s = Seeds::from_root(7);
        assert_ne!(s.data, s.init);
        assert_ne!(s.init, s.pairing);
        assert_eq!(s, Seeds::from_root(7));
        assert_ne!(s, Seeds::from_root(8));
    }

    #[test]
    fn report_rows_follow_table_order() {
        let row = |variant, stage| ReportRow {
            variant,
            stage,
            mean_ndcg: 0.5,
            top10_positive: 1.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        write_report(
            &path,
            &[row(Variant::C, Stage::Whole), row(Variant::A, Stage::StageOne), row(Variant::C, Stage::Initial)],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let strategies: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(strategies, ["Stage one", "Initial", "Stage two (whole)"]);
    }

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.users = 2;
        cfg.data.items_per_category = 20;
        cfg.data.image_side = 16;
        cfg.data.positives.train = 4;
        cfg.data.positives.val = 2;
        cfg.data.positives.test = 2;
        cfg.data.candidate_factor = 10;
        cfg.model.feature_dim = 8;
        cfg.model.stage_widths = vec![4, 4];
        cfg.train.epochs = 2;
        cfg.train.aux_epochs = 1;
        cfg
    }

    #[test]
    fn partial_keeps_shared_features_and_jobs_do_not_change_results() {
        let mut exp = Experiment::new(tiny()).unwrap();
        let run = exp.run_variant(Variant::C, &[Stage::Partial], 1).unwrap();
        let (stage_one, partial) = run.feature_hashes();
        assert_eq!(partial.len(), 2);
        assert!(partial.iter().all(|h| *h == stage_one));
        let threaded = exp.fine_tune_all(&run.stage_one, FineTuneMode::Whole, 2).unwrap();
        let serial = exp.fine_tune_all(&run.stage_one, FineTuneMode::Whole, 1).unwrap();
        for (a, b) in threaded.iter().zip(&serial) {
            assert_eq!(a.params(), b.params());
        }
    }

    #[test]
    fn b_and_c_share_the_pretrained_backbone() {
        let mut exp = Experiment::new(tiny()).unwrap();
        let (b, _) = exp.initial(Variant::B).unwrap();
        let (c, _) = exp.initial(Variant::C).unwrap();
        assert_eq!(
            b.params().group_hash(ParamGroup::Feature),
            c.params().group_hash(ParamGroup::Feature)
        );
    }
}
