//! On-disk network snapshots: a `manifest.txt` describing the architecture,
//! parameter layout and optimizer settings, and a `tensors.bin` blob holding
//! the parameter tensors followed by the optimizer velocities.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Architecture, MatchingConfig, Network, Variant};
use crate::autodiff::{LrnParams, OptimizerState, ParamGroup, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::kv::{join_list, read_bytes, sha256_hex, write_atomic, KeyValues};
use crate::layers::{BackboneConfig, Init};

const FORMAT: &str = "outfitrank-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";
const BLOB: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub optimizer: Option<OptimizerState<T>>,
    /// Free-form labels such as the training stage or user id.
    pub meta: BTreeMap<String, String>,
}

/// Write `network` (and optionally its optimizer state) into `dir`, creating
/// it if needed. Existing checkpoint files are replaced.
pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    network: &Network<T>,
    optimizer: Option<&OptimizerState<T>>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = network.params();
    let mut blob = Vec::new();
    for t in params.tensors() {
        t.write_bytes(&mut blob);
    }
    if let Some(opt) = optimizer {
        if opt.velocity().len() != params.len() {
            return Err(Error::InvalidArgument(
                "optimizer state does not match the network".into(),
            ));
        }
        for v in opt.velocity() {
            v.write_bytes(&mut blob);
        }
    }

    let arch = network.architecture();
    let mut m = KeyValues::new();
    m.push("format", FORMAT);
    m.push("version", CHECKPOINT_VERSION);
    m.push("precision", T::NAME);
    m.push("variant", arch.variant);
    m.push("seed", network.seed());
    m.push("categories", arch.categories);
    m.push("backbone.image_side", arch.backbone.image_side);
    m.push("backbone.in_channels", arch.backbone.in_channels);
    m.push("backbone.feature_dim", arch.backbone.feature_dim);
    m.push("backbone.stage_widths", join_list(&arch.backbone.stage_widths));
    let lrn = arch.backbone.lrn;
    m.push(
        "backbone.lrn",
        format!("{},{:?},{:?},{:?}", lrn.size, lrn.alpha, lrn.beta, lrn.k),
    );
    m.push("backbone.init", init_to_string(arch.backbone.init));
    m.push("matching.hidden", join_list(&arch.matching.hidden));
    m.push("matching.init_std", format!("{:?}", arch.matching.init_std));
    m.push("params.count", params.len());
    for (i, info) in params.infos().iter().enumerate() {
        let shape = join_list(params.tensors()[i].shape());
        m.push(
            format!("param.{i}"),
            format!("{} {} {} {}", info.name, info.group, u8::from(info.fresh), shape),
        );
    }
    match optimizer {
        None => m.push("optimizer", "none"),
        Some(opt) => {
            m.push("optimizer", "sgd-momentum");
            m.push("optimizer.momentum", format!("{:?}", opt.momentum));
            m.push("optimizer.weight_decay", format!("{:?}", opt.weight_decay));
            let lrs: Vec<String> = opt.lrs().iter().map(|lr| format!("{lr:?}")).collect();
            m.push("optimizer.lrs", lrs.join(","));
        }
    }
    for (k, v) in meta {
        m.push(format!("meta.{k}"), v);
    }
    m.push("blob.sha256", sha256_hex(&blob));

    write_atomic(&dir.join(BLOB), &blob)?;
    write_atomic(&dir.join(MANIFEST), m.render().as_bytes())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest_path = dir.join(MANIFEST);
    let m = KeyValues::read(&manifest_path)?;
    let bad = |d: String| Error::corrupt(&manifest_path, d);

    if m.get("format") != Some(FORMAT) {
        return Err(bad("not a checkpoint manifest".into()));
    }
    let version = m.require("version").map_err(bad)?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::Version {
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let precision = m.require("precision").map_err(bad)?;
    if precision != T::NAME {
        return Err(Error::Incompatible(format!(
            "checkpoint stores {precision} values, expected {}",
            T::NAME
        )));
    }

    let arch = read_architecture(&m).map_err(bad)?;
    let seed: u64 = m.parse_value("seed").map_err(bad)?;
    let mut network = Network::<T>::build(arch, seed)?;

    let blob_path = dir.join(BLOB);
    let blob = read_bytes(&blob_path)?;
    if m.get("blob.sha256") != Some(sha256_hex(&blob).as_str()) {
        return Err(Error::corrupt(&blob_path, "checksum mismatch"));
    }

    let count: usize = m.parse_value("params.count").map_err(bad)?;
    if count != network.params().len() {
        return Err(bad(format!(
            "{count} parameter tensors listed, architecture has {}",
            network.params().len()
        )));
    }
    let mut pos = 0;
    let mut next_tensor = |what: &str| -> Result<Tensor<T>> {
        let (t, used) = Tensor::<T>::read_bytes(&blob[pos..])
            .map_err(|d| Error::corrupt(&blob_path, format!("{what}: {d}")))?;
        pos += used;
        Ok(t)
    };
    let ids: Vec<_> = network.params().ids().collect();
    for id in &ids {
        let i = id.0;
        let line = m.require(&format!("param.{i}")).map_err(bad)?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, group, fresh, _shape] = fields[..] else {
            return Err(bad(format!("malformed param.{i}")));
        };
        let t = next_tensor(name)?;
        let params = network.params_mut();
        if params.info(*id).name != name || params.get(*id).shape() != t.shape() {
            return Err(bad(format!(
                "parameter {i} is `{name}` {:?}, architecture expects `{}` {:?}",
                t.shape(),
                params.info(*id).name,
                params.get(*id).shape()
            )));
        }
        *params.get_mut(*id) = t;
        let info = params.info_mut(*id);
        info.group = group.parse::<ParamGroup>()?;
        info.fresh = fresh == "1";
    }

    let optimizer = match m.require("optimizer").map_err(bad)? {
        "none" => None,
        "sgd-momentum" => {
            let momentum: f64 = m.parse_value("optimizer.momentum").map_err(bad)?;
            let weight_decay: f64 = m.parse_value("optimizer.weight_decay").map_err(bad)?;
            let lrs: Vec<f64> = m.parse_list("optimizer.lrs").map_err(bad)?;
            if lrs.len() != count {
                return Err(bad("optimizer learning-rate count mismatch".into()));
            }
            let mut velocity = Vec::with_capacity(count);
            for id in &ids {
                let v = next_tensor("velocity")?;
                if v.shape() != network.params().get(*id).shape() {
                    return Err(Error::corrupt(&blob_path, "velocity shape mismatch"));
                }
                velocity.push(v);
            }
            Some(OptimizerState::from_parts(momentum, weight_decay, lrs, velocity))
        }
        other => return Err(bad(format!("unknown optimizer `{other}`"))),
    };
    if pos != blob.len() {
        return Err(Error::corrupt(&blob_path, "trailing bytes"));
    }

    let meta = m
        .entries()
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(Checkpoint {
        network,
        optimizer,
        meta,
    })
}

impl<T: Scalar> Checkpoint<T> {
    /// Load and require a specific architecture variant.
    pub fn load_expecting(dir: &Path, variant: Variant) -> Result<Self> {
        let ck = load_checkpoint::<T>(dir)?;
        if ck.network.variant() != variant {
            return Err(Error::Incompatible(format!(
                "checkpoint holds variant {}, run uses variant {variant}",
                ck.network.variant()
            )));
        }
        Ok(ck)
    }
}

fn read_architecture(m: &KeyValues) -> std::result::Result<Architecture, String> {
    let lrn: Vec<f64> = m.parse_list("backbone.lrn")?;
    let [size, alpha, beta, k] = lrn[..] else {
        return Err("backbone.lrn needs four values".into());
    };
    let backbone = BackboneConfig {
        image_side: m.parse_value("backbone.image_side")?,
        in_channels: m.parse_value("backbone.in_channels")?,
        feature_dim: m.parse_value("backbone.feature_dim")?,
        stage_widths: m.parse_list("backbone.stage_widths")?,
        lrn: LrnParams {
            size: size as usize,
            alpha,
            beta,
            k,
        },
        init: init_from_str(m.require("backbone.init")?)?,
    };
    let variant: Variant = m
        .require("variant")?
        .parse()
        .map_err(|e: Error| e.to_string())?;
    Ok(Architecture {
        variant,
        categories: m.parse_value("categories")?,
        backbone,
        matching: MatchingConfig {
            hidden: m.parse_list("matching.hidden")?,
            init_std: m.parse_value("matching.init_std")?,
        },
    })
}

pub(crate) fn init_to_string(init: Init) -> String {
    match init {
        Init::He => "he".into(),
        Init::Gaussian(s) => format!("gaussian:{s:?}"),
    }
}

pub(crate) fn init_from_str(s: &str) -> std::result::Result<Init, String> {
    if s == "he" {
        return Ok(Init::He);
    }
    s.strip_prefix("gaussian:")
        .and_then(|v| v.parse().ok())
        .map(Init::Gaussian)
        .ok_or_else(|| format!("unknown init `{s}`"))
}
