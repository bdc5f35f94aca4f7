use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use outfitrank::catalog::{load_dataset, save_dataset, Dataset, Label, Split};
use outfitrank::config::RunConfig;
use outfitrank::kv::KeyValues;
use outfitrank::metrics::write_curve_csv;
use outfitrank::models::{save_checkpoint, Checkpoint, Network, Variant};
use outfitrank::pipeline::{
    evaluate, fine_tune_all, write_report, write_stage_metrics, Experiment, ReportRow, Seeds, Stage,
};
use outfitrank::training::{check_mode, fine_tune, score_outfits, train_stage_one, write_loss_curve, FineTuneMode};
use outfitrank::{Error, Result};

const RUN_DIR_ENV: &str = "OUTFITRANK_RUN_DIR";

#[derive(Parser)]
#[command(name = "outfitrank", version, about = "Personalized outfit compatibility ranking")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration file (`key = value` lines, optional `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the full-size split counts (202/46/62 positives per user).
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for per-user fine-tuning.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic catalog, users and outfits.
    GenerateData,
    /// Pretrain the backbone and run stage-one training.
    Train {
        #[arg(long)]
        arch: Variant,
    },
    /// Fine-tune per user (stage two).
    Finetune {
        #[arg(long)]
        arch: Variant,
        #[arg(long)]
        mode: FineTuneMode,
        #[arg(long, conflicts_with = "all_users", required_unless_present = "all_users")]
        user: Option<usize>,
        #[arg(long)]
        all_users: bool,
    },
    /// Write metric CSVs for every trained stage of an architecture.
    Evaluate {
        #[arg(long)]
        arch: Variant,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Evaluate only this stage (initial, stage-one, direct, partial, whole).
        #[arg(long)]
        stage: Option<Stage>,
    },
    /// List a user's top-k test outfits.
    Recommend {
        #[arg(long)]
        arch: Variant,
        #[arg(long, default_value = "stage-one")]
        stage: Stage,
        #[arg(long)]
        user: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Combine evaluated runs into a comparison table and curve files.
    Report {
        /// Run directories to combine (default: the current run directory).
        runs: Vec<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Missing(_) => 4,
        Error::Incompatible(_) | Error::Version { .. } => 5,
        Error::Corrupt { .. } => 6,
        Error::TargetExists(_) => 7,
        Error::Diverged { .. } => 8,
        Error::InvalidArgument(_) => 9,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Missing(_) => "missing",
        Error::Incompatible(_) | Error::Version { .. } => "incompatible",
        Error::Corrupt { .. } => "corrupt",
        Error::TargetExists(_) => "exists",
        Error::Diverged { .. } => "diverged",
        Error::InvalidArgument(_) => "invalid-argument",
        _ => "internal",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", kind(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Stored run configuration (if any), then `--paper-scale`, the config file
/// and `--seed`. The environment variable overrides the output root.
fn resolve_config(g: &Global) -> Result<RunConfig> {
    let overrides = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            KeyValues::parse(&text).map_err(|m| Error::Config(format!("{}: {m}", path.display())))?
        }
        None => KeyValues::new(),
    };
    let run_dir = match (std::env::var_os(RUN_DIR_ENV), overrides.get("run_dir")) {
        (Some(root), _) => PathBuf::from(root),
        (None, Some(root)) => PathBuf::from(root),
        (None, None) => RunConfig::default().run_dir,
    };
    let stored = run_dir.join("config.txt");
    let mut cfg = if stored.exists() {
        RunConfig::read(&stored)?
    } else {
        RunConfig::default()
    };
    if g.paper_scale {
        cfg.data = RunConfig::paper_scale().data;
    }
    cfg.apply(&overrides)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    cfg.run_dir = run_dir;
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    }
    outfitrank::kv::write_atomic(path, text.as_bytes())
}

fn ensure_fresh(dir: &Path, force: bool) -> Result<()> {
    let occupied = dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(Error::TargetExists(dir.to_path_buf()));
    }
    if occupied {
        std::fs::remove_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

/// The run's dataset, checked against the resolved configuration.
fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = load_dataset(&cfg.run_dir.join("data"))?;
    if ds.config != cfg.data || ds.seed != Seeds::from_root(cfg.seed).data {
        return Err(Error::Incompatible(format!(
            "dataset in {} was generated with a different data configuration or seed",
            cfg.run_dir.display()
        )));
    }
    Ok(ds)
}

fn arch_dir(cfg: &RunConfig, arch: Variant) -> PathBuf {
    cfg.run_dir.join(arch.to_string())
}

fn stage_dir(cfg: &RunConfig, arch: Variant, stage: Stage) -> PathBuf {
    arch_dir(cfg, arch).join(stage.to_string())
}

fn user_dir(cfg: &RunConfig, arch: Variant, stage: Stage, user: usize) -> PathBuf {
    stage_dir(cfg, arch, stage).join(format!("user-{user}"))
}

fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = resolve_config(g)?;
    match cli.command {
        Command::GenerateData => generate_data(&cfg, g.force),
        Command::Train { arch } => train(&cfg, arch, g.force),
        Command::Finetune {
            arch,
            mode,
            user,
            all_users,
        } => finetune(&cfg, arch, mode, if all_users { None } else { user }, g),
        Command::Evaluate { arch, split, stage } => evaluate_cmd(&cfg, arch, split, stage),
        Command::Recommend { arch, stage, user, k } => recommend(&cfg, arch, stage, user, k),
        Command::Report { runs } => report(&cfg, &runs),
    }
}

fn generate_data(cfg: &RunConfig, force: bool) -> Result<()> {
    let seeds = Seeds::from_root(cfg.seed);
    let ds = Dataset::generate(&cfg.data, seeds.data)?;
    save_dataset(&cfg.run_dir.join("data"), &ds, force)?;
    write_text(&cfg.run_dir.join("config.txt"), &cfg.render())?;
    let neutrals = cfg.data.neutrals();
    println!(
        "{} users, {} items; per user positives {}/{}/{} and neutrals {}/{}/{} (train/val/test)",
        ds.users.len(),
        ds.items.len(),
        cfg.data.positives.train,
        cfg.data.positives.val,
        cfg.data.positives.test,
        neutrals.train,
        neutrals.val,
        neutrals.test
    );
    Ok(())
}

fn train(cfg: &RunConfig, arch: Variant, force: bool) -> Result<()> {
    let ds = open_dataset(cfg)?;
    let dir = arch_dir(cfg, arch);
    ensure_fresh(&dir, force)?;
    let mut exp = Experiment::with_dataset(cfg.clone(), ds);
    let (initial, aux) = exp.initial(arch)?;
    save_checkpoint(&stage_dir(cfg, arch, Stage::Initial), &initial, None, &meta(&[("stage", "initial".into())]))?;
    write_loss_curve(&dir.join("aux-loss.csv"), &aux)?;
    let mut net = initial.clone();
    match train_stage_one(&mut net, &exp.dataset, &exp.images, &cfg.train, exp.seeds.pairing) {
        Ok((curve, opt)) => {
            save_checkpoint(&stage_dir(cfg, arch, Stage::StageOne), &net, Some(&opt), &meta(&[("stage", "stage-one".into())]))?;
            write_loss_curve(&dir.join("stage-one-loss.csv"), &curve)?;
            let last = curve.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
            println!("variant {arch}: stage one finished, final training loss {last:.4}");
            write_text(&dir.join("config.txt"), &cfg.render())
        }
        Err(e @ Error::Diverged { .. }) => {
            save_checkpoint(&dir.join("last-good"), &net, None, &meta(&[("stage", "stage-one-last-good".into())]))?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn start_network(cfg: &RunConfig, arch: Variant, mode: FineTuneMode) -> Result<Network<f32>> {
    let from = if mode == FineTuneMode::Direct { Stage::Initial } else { Stage::StageOne };
    Ok(Checkpoint::<f32>::load_expecting(&stage_dir(cfg, arch, from), arch)?.network)
}

fn finetune(cfg: &RunConfig, arch: Variant, mode: FineTuneMode, user: Option<usize>, g: &Global) -> Result<()> {
    check_mode(arch, mode)?;
    let ds = open_dataset(cfg)?;
    let stage = Stage::of_mode(mode);
    let start = start_network(cfg, arch, mode)?;
    let seeds = Seeds::from_root(cfg.seed);
    let images = ds.preprocessed_images();
    let users: Vec<usize> = match user {
        Some(u) if u >= ds.users.len() => {
            return Err(Error::InvalidArgument(format!("no user {u} (dataset has {})", ds.users.len())))
        }
        Some(u) => vec![u],
        None => (0..ds.users.len()).collect(),
    };
    for &u in &users {
        ensure_fresh(&user_dir(cfg, arch, stage, u), g.force)?;
    }
    let results = match user {
        Some(u) => {
            let feats = if mode == FineTuneMode::Partial { Some(start.item_features(&images)?) } else { None };
            vec![fine_tune(&start, &ds, &images, u, mode, &cfg.train, seeds.pairing, feats.as_ref())?]
        }
        None => fine_tune_all(&start, &ds, &images, mode, cfg, seeds.pairing, g.jobs)?,
    };
    for (&u, (net, curve)) in users.iter().zip(&results) {
        let dir = user_dir(cfg, arch, stage, u);
        save_checkpoint(&dir, net, None, &meta(&[("stage", stage.to_string()), ("user", u.to_string())]))?;
        write_loss_curve(&dir.join("loss.csv"), curve)?;
    }
    write_text(&stage_dir(cfg, arch, stage).join("config.txt"), &cfg.render())?;
    println!("variant {arch}: {mode} fine-tuning finished for {} user(s)", users.len());
    Ok(())
}

/// Networks of one stage: one shared network, or one per user.
fn stage_networks(cfg: &RunConfig, arch: Variant, stage: Stage, users: usize) -> Result<Vec<Network<f32>>> {
    let load = |dir: PathBuf| Checkpoint::<f32>::load_expecting(&dir, arch).map(|c| c.network);
    match stage.mode() {
        None => Ok(vec![load(stage_dir(cfg, arch, stage))?]),
        Some(_) => (0..users).map(|u| load(user_dir(cfg, arch, stage, u))).collect(),
    }
}

fn evaluate_cmd(cfg: &RunConfig, arch: Variant, split: Split, only: Option<Stage>) -> Result<()> {
    let ds = open_dataset(cfg)?;
    let images = ds.preprocessed_images();
    let stages: Vec<Stage> = match only {
        Some(s) => vec![s],
        None => Stage::ALL
            .into_iter()
            .filter(|&s| stage_dir(cfg, arch, s).exists())
            .collect(),
    };
    if stages.is_empty() {
        return Err(Error::Missing(stage_dir(cfg, arch, Stage::Initial)));
    }
    let out = arch_dir(cfg, arch).join(format!("eval-{split}"));
    for stage in stages {
        let nets = stage_networks(cfg, arch, stage, ds.users.len())?;
        let refs: Vec<&Network<f32>> = nets.iter().collect();
        let per_user = evaluate(&refs, &ds, &images, split)?;
        let row = write_stage_metrics(&out, arch, stage, &per_user)?;
        println!(
            "{arch},{},{:.6},{:.6}",
            stage.label(),
            row.mean_ndcg,
            row.top10_positive
        );
    }
    Ok(())
}

fn recommend(cfg: &RunConfig, arch: Variant, stage: Stage, user: usize, k: usize) -> Result<()> {
    let ds = open_dataset(cfg)?;
    if user >= ds.users.len() {
        return Err(Error::InvalidArgument(format!("no user {user} (dataset has {})", ds.users.len())));
    }
    let records: Vec<_> = ds.records(user, Split::Test).collect();
    if k == 0 || k > records.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} but user {user} has {} test outfits",
            records.len()
        )));
    }
    let dir = match stage.mode() {
        None => stage_dir(cfg, arch, stage),
        Some(_) => user_dir(cfg, arch, stage, user),
    };
    let net = Checkpoint::<f32>::load_expecting(&dir, arch)?.network;
    let images = ds.preprocessed_images();
    let ids: Vec<usize> = records.iter().map(|r| r.id).collect();
    let scores = score_outfits(&net, &ds, &images, &ids)?;
    let mut ranked: Vec<(usize, f64)> = ids.into_iter().zip(scores).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    println!("rank,outfit,items,score,label");
    for (rank, (id, score)) in ranked.into_iter().take(k).enumerate() {
        let r = ds.outfit(id);
        let items: Vec<String> = r.items.iter().map(|i| i.to_string()).collect();
        let label = if r.label == Label::Positive { "positive" } else { "neutral" };
        println!("{},{id},{},{score:.6},{label}", rank + 1, items.join(" "));
    }
    Ok(())
}

/// Aggregate rows and curves of every evaluated (architecture, strategy) in
/// the given runs, averaged over runs.
fn report(cfg: &RunConfig, runs: &[PathBuf]) -> Result<()> {
    let runs = if runs.is_empty() { vec![cfg.run_dir.clone()] } else { runs.to_vec() };
    let mut found: BTreeMap<(Variant, Stage), Vec<(f64, f64, Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for run in &runs {
        if !run.is_dir() {
            return Err(Error::Missing(run.clone()));
        }
        for arch in Variant::ALL {
            let dir = run.join(arch.to_string()).join("eval-test");
            for stage in Stage::ALL {
                let stem = format!("{arch}-{stage}");
                let path = dir.join(format!("metrics-{stem}.csv"));
                if !path.exists() {
                    continue;
                }
                let (mean, top10) = read_aggregate_row(&path)?;
                let ndcg = read_curve(&dir.join(format!("ndcg-at-{stem}.csv")))?;
                let topk = read_curve(&dir.join(format!("topk-{stem}.csv")))?;
                found.entry((arch, stage)).or_default().push((mean, top10, ndcg, topk));
            }
        }
    }
    if found.is_empty() {
        return Err(Error::Missing(runs[0].join("<arch>/eval-test")));
    }
    let out = cfg.run_dir.join("report");
    std::fs::create_dir_all(&out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
    let mut rows = Vec::new();
    for ((variant, stage), entries) in &found {
        let n = entries.len() as f64;
        let mean_curve = |pick: &dyn Fn(&(f64, f64, Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
            let len = entries.iter().map(|e| pick(e).len()).min().unwrap_or(0);
            (0..len).map(|i| entries.iter().map(|e| pick(e)[i]).sum::<f64>() / n).collect()
        };
        let stem = format!("{variant}-{stage}");
        write_curve_csv(&out.join(format!("ndcg-at-{stem}.csv")), "m", &mean_curve(&|e| &e.2))?;
        write_curve_csv(&out.join(format!("topk-{stem}.csv")), "k", &mean_curve(&|e| &e.3))?;
        rows.push(ReportRow {
            variant: *variant,
            stage: *stage,
            mean_ndcg: entries.iter().map(|e| e.0).sum::<f64>() / n,
            top10_positive: entries.iter().map(|e| e.1).sum::<f64>() / n,
        });
    }
    let table = out.join("table.csv");
    write_report(&table, &rows)?;
    print!("{}", std::fs::read_to_string(&table).map_err(|e| Error::Config(e.to_string()))?);
    Ok(())
}

fn csv_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let bytes = std::fs::read(path).map_err(|_| Error::Missing(path.to_path_buf()))?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    reader
        .records()
        .collect::<std::result::Result<_, _>>()
        .map_err(Error::from)
}

fn parse_field(path: &Path, row: &csv::StringRecord, i: usize) -> Result<f64> {
    row.get(i)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            detail: format!("bad field {i} in row {row:?}"),
        })
}

fn read_aggregate_row(path: &Path) -> Result<(f64, f64)> {
    let rows = csv_rows(path)?;
    let row = rows
        .iter()
        .find(|r| r.get(0) == Some("all"))
        .ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            detail: "no aggregate row".into(),
        })?;
    Ok((parse_field(path, row, 1)?, parse_field(path, row, 2)?))
}

fn read_curve(path: &Path) -> Result<Vec<f64>> {
    csv_rows(path)?.iter().map(|r| parse_field(path, r, 1)).collect()
}
