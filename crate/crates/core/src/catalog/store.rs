//! Dataset directory layout.
//!
//! * `manifest.txt`: `key = value` lines with the generation config, the root
//!   seed, the per-split counts and SHA-256 digests of the binary files.
//! * `items.csv`: `id,category,a0..a{k-1}`.
//! * `images.bin`: every item image as a serialized tensor, in id order.
//! * `users.csv`: `user,sigma,pair,w0..w{k*k-1}`, one row per (user, pair).
//! * `outfits.csv`: `id,user,split,label,<one column per category>,oracle`.
//! * `mean_image.bin`: the training-split mean image as a serialized tensor.

use std::fs;
use std::path::Path;

use super::{CatalogConfig, Dataset, Item, OutfitRecord, SplitCounts, UserProfile};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::kv::{read_bytes, sha256_hex, write_atomic, KeyValues};
use crate::models::CATEGORY_NAMES;

const FORMAT: &str = "outfitrank-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Write `ds` into `dir`. An existing non-empty directory is an error unless
/// `force` is set, in which case it is replaced.
pub fn save_dataset(dir: &Path, ds: &Dataset, force: bool) -> Result<()> {
    prepare_dir(dir, force)?;
    let cfg = &ds.config;

    let mut items = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "category".to_string()];
    header.extend((0..cfg.attr_dim).map(|i| format!("a{i}")));
    items.write_record(&header)?;
    let mut images = Vec::new();
    for item in &ds.items {
        let mut row = vec![item.id.to_string(), item.category.to_string()];
        row.extend(item.attrs.iter().map(|a| format!("{a:?}")));
        items.write_record(&row)?;
        item.image.write_bytes(&mut images);
    }

    let mut users = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["user".to_string(), "sigma".to_string(), "pair".to_string()];
    header.extend((0..cfg.attr_dim * cfg.attr_dim).map(|i| format!("w{i}")));
    users.write_record(&header)?;
    for u in &ds.users {
        for (p, w) in u.prefs.iter().enumerate() {
            let mut row = vec![u.id.to_string(), format!("{:?}", u.sigma), p.to_string()];
            row.extend(w.iter().map(|v| format!("{v:?}")));
            users.write_record(&row)?;
        }
    }

    let mut outfits = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["id", "user", "split", "label"].map(String::from).to_vec();
    header.extend((0..cfg.categories).map(category_column));
    header.push("oracle".into());
    outfits.write_record(&header)?;
    for r in &ds.outfits {
        let mut row = vec![r.id.to_string(), r.user.to_string(), r.split.to_string(), r.label.to_string()];
        row.extend(r.items.iter().map(|i| i.to_string()));
        row.push(format!("{:?}", r.oracle));
        outfits.write_record(&row)?;
    }

    let mean = ds.mean_image.to_bytes();
    let finish = |w: csv::Writer<Vec<u8>>| w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()));
    let files = [
        ("items.csv", finish(items)?),
        ("images.bin", images),
        ("users.csv", finish(users)?),
        ("outfits.csv", finish(outfits)?),
        ("mean_image.bin", mean),
    ];

    let mut m = KeyValues::new();
    m.push("format", FORMAT);
    m.push("version", DATASET_VERSION);
    m.push("seed", ds.seed);
    write_config(&mut m, cfg);
    let neutrals = cfg.neutrals();
    m.push("neutrals.train", neutrals.train);
    m.push("neutrals.val", neutrals.val);
    m.push("neutrals.test", neutrals.test);
    m.push("items.count", ds.items.len());
    m.push("outfits.count", ds.outfits.len());
    for (name, bytes) in &files {
        m.push(format!("sha256.{name}"), sha256_hex(bytes));
    }
    for (name, bytes) in &files {
        write_atomic(&dir.join(name), bytes)?;
    }
    write_atomic(&dir.join("manifest.txt"), m.render().as_bytes())
}

fn category_column(c: usize) -> String {
    CATEGORY_NAMES
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("cat{c}"))
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                return Err(Error::TargetExists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_config(m: &mut KeyValues, cfg: &CatalogConfig) {
    m.push("categories", cfg.categories);
    m.push("items_per_category", cfg.items_per_category);
    m.push("attr_dim", cfg.attr_dim);
    m.push("image_side", cfg.image_side);
    m.push("users", cfg.users);
    m.push("positives.train", cfg.positives.train);
    m.push("positives.val", cfg.positives.val);
    m.push("positives.test", cfg.positives.test);
    m.push("neutral_ratio", cfg.neutral_ratio);
    m.push("candidate_factor", cfg.candidate_factor);
    m.push("shared_weight", format!("{:?}", cfg.shared_weight));
    m.push("personal_rank", cfg.personal_rank.to_string());
    m.push("pref_norm", format!("{:?}", cfg.pref_norm));
    m.push("noise", format!("{:?}", cfg.noise));
    m.push("texture", format!("{:?}", cfg.texture));
}

pub(crate) fn read_config(m: &KeyValues) -> std::result::Result<CatalogConfig, String> {
    Ok(CatalogConfig {
        categories: m.parse_value("categories")?,
        items_per_category: m.parse_value("items_per_category")?,
        attr_dim: m.parse_value("attr_dim")?,
        image_side: m.parse_value("image_side")?,
        users: m.parse_value("users")?,
        positives: SplitCounts {
            train: m.parse_value("positives.train")?,
            val: m.parse_value("positives.val")?,
            test: m.parse_value("positives.test")?,
        },
        neutral_ratio: m.parse_value("neutral_ratio")?,
        candidate_factor: m.parse_value("candidate_factor")?,
        shared_weight: m.parse_value("shared_weight")?,
        personal_rank: m.parse_value("personal_rank")?,
        pref_norm: m.parse_value("pref_norm")?,
        noise: m.parse_value("noise")?,
        texture: m.parse_value("texture")?,
    })
}

/// Read a dataset directory written by [`save_dataset`], verifying digests.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.txt");
    let m = KeyValues::read(&manifest_path)?;
    let bad = |d: String| Error::corrupt(&manifest_path, d);
    if m.get("format") != Some(FORMAT) {
        return Err(bad("not a dataset manifest".into()));
    }
    let version = m.require("version").map_err(bad)?;
    if version != DATASET_VERSION.to_string() {
        return Err(Error::Version {
            found: version.into(),
            expected: DATASET_VERSION.to_string(),
        });
    }
    let config = read_config(&m).map_err(bad)?;
    config.validate()?;
    let seed: u64 = m.parse_value("seed").map_err(bad)?;

    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        let bytes = read_bytes(&path)?;
        let want = m.require(&format!("sha256.{name}")).map_err(bad)?;
        if sha256_hex(&bytes) != want {
            return Err(Error::corrupt(&path, "checksum mismatch"));
        }
        Ok(bytes)
    };

    let k = config.attr_dim;
    let images = read("images.bin")?;
    let images_path = dir.join("images.bin");
    let mut pos = 0;
    let mut items = Vec::new();
    let items_bytes = read("items.csv")?;
    let mut rdr = csv::Reader::from_reader(items_bytes.as_slice());
    for row in rdr.records() {
        let row = row?;
        let nums = parse_row(&row, 2 + k, &dir.join("items.csv"))?;
        let (image, used) = Tensor::<f32>::read_bytes(&images[pos..])
            .map_err(|d| Error::corrupt(&images_path, d))?;
        pos += used;
        items.push(Item {
            id: nums[0] as usize,
            category: nums[1] as usize,
            attrs: nums[2..].to_vec(),
            image,
        });
    }
    if pos != images.len() || items.len() != config.categories * config.items_per_category {
        return Err(Error::corrupt(&images_path, "item count mismatch"));
    }

    let mut users: Vec<UserProfile> = Vec::new();
    let users_bytes = read("users.csv")?;
    let mut rdr = csv::Reader::from_reader(users_bytes.as_slice());
    for row in rdr.records() {
        let nums = parse_row(&row?, 3 + k * k, &dir.join("users.csv"))?;
        let id = nums[0] as usize;
        if users.last().map(|u| u.id) != Some(id) {
            users.push(UserProfile {
                id,
                prefs: Vec::new(),
                sigma: nums[1],
            });
        }
        users.last_mut().expect("pushed").prefs.push(nums[3..].to_vec());
    }

    let outfits_path = dir.join("outfits.csv");
    let mut outfits = Vec::new();
    let outfits_bytes = read("outfits.csv")?;
    let mut rdr = csv::Reader::from_reader(outfits_bytes.as_slice());
    for row in rdr.records() {
        let row = row?;
        let n = config.categories;
        if row.len() != 5 + n {
            return Err(Error::corrupt(&outfits_path, "wrong column count"));
        }
        let num = |i: usize| -> Result<usize> {
            row[i]
                .parse()
                .map_err(|_| Error::corrupt(&outfits_path, format!("bad integer `{}`", &row[i])))
        };
        outfits.push(OutfitRecord {
            id: num(0)?,
            user: num(1)?,
            split: row[2].parse()?,
            label: row[3].parse()?,
            items: (4..4 + n).map(num).collect::<Result<_>>()?,
            oracle: row[4 + n]
                .parse()
                .map_err(|_| Error::corrupt(&outfits_path, "bad oracle score"))?,
        });
    }

    if outfits.iter().enumerate().any(|(i, r)| r.id != i) {
        return Err(Error::corrupt(&outfits_path, "outfit ids are not dense and sorted"));
    }

    let mean_path = dir.join("mean_image.bin");
    let (mean_image, _) = Tensor::<f32>::read_bytes(&read("mean_image.bin")?)
        .map_err(|d| Error::corrupt(&mean_path, d))?;

    Ok(Dataset {
        config,
        seed,
        items,
        users,
        outfits,
        mean_image,
    })
}

fn parse_row(row: &csv::StringRecord, width: usize, path: &Path) -> Result<Vec<f64>> {
    if row.len() != width {
        return Err(Error::corrupt(path, format!("expected {width} columns, found {}", row.len())));
    }
    row.iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| Error::corrupt(path, format!("bad number `{f}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CatalogConfig {
        CatalogConfig {
            items_per_category: 20,
            users: 2,
            image_side: 16,
            positives: SplitCounts {
                train: 4,
                val: 1,
                test: 2,
            },
            ..CatalogConfig::default()
        }
    }

    #[test]
    fn round_trip_and_byte_identical_regeneration() {
        let ds = Dataset::generate(&tiny(), 3).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_dataset(a.path(), &ds, false).unwrap();
        save_dataset(b.path(), &Dataset::generate(&tiny(), 3).unwrap(), false).unwrap();
        for f in ["manifest.txt", "items.csv", "images.bin", "users.csv", "outfits.csv", "mean_image.bin"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        assert_eq!(load_dataset(a.path()).unwrap(), ds);
    }

    #[test]
    fn existing_target_needs_force() {
        let ds = Dataset::generate(&tiny(), 3).unwrap();
        let a = tempfile::tempdir().unwrap();
        save_dataset(a.path(), &ds, false).unwrap();
        assert!(matches!(save_dataset(a.path(), &ds, false), Err(Error::TargetExists(_))));
        save_dataset(a.path(), &ds, true).unwrap();
    }

    #[test]
    fn tampering_is_detected() {
        let ds = Dataset::generate(&tiny(), 3).unwrap();
        let a = tempfile::tempdir().unwrap();
        save_dataset(a.path(), &ds, false).unwrap();
        let p = a.path().join("outfits.csv");
        let text = fs::read_to_string(&p).unwrap().replacen("positive", "neutral", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(load_dataset(a.path()), Err(Error::Corrupt { .. })));
    }
}
