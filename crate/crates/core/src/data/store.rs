//! Dataset directory layout:
//!
//! ```text
//! <root>/manifest.txt        header line, spec summary, one row per scene
//! <root>/splits.txt          "<split>\t<scene_id>" rows
//! <root>/spec.toml           generator recipe
//! <root>/scenes/<id>/{x0,y,z,opacity}.bin   flat little-endian f32
//! <root>/scenes/<id>/meta.txt               shapes, dtype, ranges, seed
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::{DatasetSpec, ImageTriplet, Split, SplitTriplets};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rawio::{self, format_shape, kv_get, parse_kv, parse_num, parse_shape};

/// First line of every manifest.
pub const MANIFEST_HEADER: &str = "cloudbridge-dataset v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub split: Split,
    pub cloud_fraction: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// SHA-256 of the manifest file contents.
    pub hash: String,
}

/// A dataset loaded from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub splits: SplitTriplets,
}

fn manifest_text(splits: &SplitTriplets, spec: &DatasetSpec) -> String {
    let mut s = format!("{MANIFEST_HEADER}\n");
    s.push_str(&format!(
        "# count={} seed={} size={}x{} opt_channels={} sar_channels=2\n",
        spec.count, spec.seed, spec.height, spec.width, spec.opt_channels
    ));
    s.push_str("scene_id\tsplit\tcloud_fraction\n");
    for split in [Split::Train, Split::Val, Split::Test] {
        for t in splits.get(split) {
            s.push_str(&format!("{}\t{}\t{}\n", t.scene_id, split.name(), t.cloud_fraction));
        }
    }
    s
}

/// Writes every scene plus manifest, split list and spec; returns the manifest.
pub fn write_dataset(root: &Path, splits: &SplitTriplets, spec: &DatasetSpec) -> Result<DatasetManifest> {
    let scenes = root.join("scenes");
    rawio::create_dir(&scenes)?;
    let mut split_rows = String::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for t in splits.get(split) {
            write_scene(&scenes.join(&t.scene_id), t)?;
            split_rows.push_str(&format!("{}\t{}\n", split.name(), t.scene_id));
        }
    }
    let text = manifest_text(splits, spec);
    rawio::write_text(&root.join("manifest.txt"), &text)?;
    rawio::write_text(&root.join("splits.txt"), &split_rows)?;
    let spec_toml = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    rawio::write_text(&root.join("spec.toml"), &spec_toml)?;
    parse_manifest(&root.join("manifest.txt"), &text)
}

fn write_scene(dir: &Path, t: &ImageTriplet) -> Result<()> {
    rawio::create_dir(dir)?;
    rawio::write_f32(&dir.join("x0.bin"), t.x0.data())?;
    rawio::write_f32(&dir.join("y.bin"), t.y.data())?;
    rawio::write_f32(&dir.join("z.bin"), t.z.data())?;
    if let Some(op) = &t.opacity {
        rawio::write_f32(&dir.join("opacity.bin"), op.data())?;
    }
    let range = |img: &Image| {
        let (lo, hi) = img.min_max();
        format!("{lo},{hi}")
    };
    let meta = format!(
        "scene_id={}\ndtype=f32le\nshape_opt={}\nshape_sar={}\nrange_x0={}\nrange_y={}\nrange_z={}\ncloud_fraction={}\nhas_opacity={}\n",
        t.scene_id,
        format_shape(&[t.x0.channels(), t.x0.height(), t.x0.width()]),
        format_shape(&[t.z.channels(), t.z.height(), t.z.width()]),
        range(&t.x0),
        range(&t.y),
        range(&t.z),
        t.cloud_fraction,
        t.opacity.is_some()
    );
    rawio::write_text(&dir.join("meta.txt"), &meta)
}

/// Loads one `scenes/<id>` directory.
pub fn load_scene(dir: &Path) -> Result<ImageTriplet> {
    let meta_path = dir.join("meta.txt");
    let kv = parse_kv(&meta_path, &rawio::read_text(&meta_path)?)?;
    let dims3 = |key: &str| -> Result<(usize, usize, usize)> {
        let s = parse_shape(&meta_path, kv_get(&meta_path, &kv, key)?)?;
        match s.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(Error::format(&meta_path, format!("`{key}` must have 3 dims"))),
        }
    };
    let (c, h, w) = dims3("shape_opt")?;
    let (cs, hs, ws) = dims3("shape_sar")?;
    let load = |name: &str, c: usize, h: usize, w: usize| -> Result<Image> {
        Image::new(c, h, w, rawio::read_f32(&dir.join(name), c * h * w)?)
    };
    let has_opacity: bool = parse_num(&meta_path, "has_opacity", kv_get(&meta_path, &kv, "has_opacity")?)?;
    let t = ImageTriplet {
        x0: load("x0.bin", c, h, w)?,
        y: load("y.bin", c, h, w)?,
        z: load("z.bin", cs, hs, ws)?,
        scene_id: kv_get(&meta_path, &kv, "scene_id")?.to_string(),
        cloud_fraction: parse_num(&meta_path, "cloud_fraction", kv_get(&meta_path, &kv, "cloud_fraction")?)?,
        opacity: if has_opacity {
            Some(load("opacity.bin", 1, h, w)?)
        } else {
            None
        },
    };
    t.validate()?;
    Ok(t)
}

fn parse_manifest(path: &Path, text: &str) -> Result<DatasetManifest> {
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::format(path, format!("missing `{MANIFEST_HEADER}` header")));
    }
    let mut entries = Vec::new();
    for line in lines {
        if line.starts_with('#') || line.starts_with("scene_id\t") || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format(path, format!("bad manifest row `{line}`")));
        }
        entries.push(ManifestEntry {
            scene_id: cols[0].to_string(),
            split: Split::parse(cols[1]).map_err(|e| Error::format(path, e.to_string()))?,
            cloud_fraction: parse_num(path, "cloud_fraction", cols[2])?,
        });
    }
    Ok(DatasetManifest {
        entries,
        hash: rawio::sha256_hex(text.as_bytes()),
    })
}

/// Loads the manifest and every scene it lists.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join("manifest.txt");
    let manifest = parse_manifest(&path, &rawio::read_text(&path)?)?;
    let mut by_split: HashMap<Split, Vec<ImageTriplet>> = HashMap::new();
    for e in &manifest.entries {
        let t = load_scene(&root.join("scenes").join(&e.scene_id))?;
        by_split.entry(e.split).or_default().push(t);
    }
    let mut take = |s: Split| by_split.remove(&s).unwrap_or_default();
    let splits = SplitTriplets {
        train: take(Split::Train),
        val: take(Split::Val),
        test: take(Split::Test),
    };
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            count: 6,
            seed,
            height: 16,
            width: 16,
            opt_channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(3);
        let splits = spec.generate().unwrap();
        let m = write_dataset(dir.path(), &splits, &spec).unwrap();
        assert_eq!(m.entries.len(), 6);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.splits.train, splits.train);
        assert_eq!(ds.splits.test, splits.test);
    }

    #[test]
    fn manifest_hash_reproducible() {
        let spec = small_spec(9);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ha = write_dataset(a.path(), &spec.generate().unwrap(), &spec).unwrap().hash;
        let hb = write_dataset(b.path(), &spec.generate().unwrap(), &spec).unwrap().hash;
        assert_eq!(ha, hb);
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }
}
