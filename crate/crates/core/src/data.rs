//! Dataset manifests, deterministic splits, and source/enhanced pairing.
//!
//! Manifests store native resolution and paths resolved against the
//! manifest's own directory. Resizing is a training concern and lives in
//! the trainer configuration.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RegenError, Result};
use crate::fsio::{read_json, write_json};
use crate::imageio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(tag: &str) -> Option<Split> {
        match tag {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    SourceGame,
    TargetReal,
    Enhanced,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
    pub width: usize,
    pub height: usize,
    pub aux_channels: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub domain_tag: DomainTag,
    pub records: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub id: String,
    pub source: PathBuf,
    pub enhanced: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairManifest {
    /// `(width, height)` shared by every pair.
    pub resolution: (usize, usize),
    pub pairs: Vec<Pair>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Decode every image and check its dimensions against the record.
    pub strict: bool,
}

#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    name: String,
    domain_tag: DomainTag,
    records: Vec<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct RecordDoc {
    id: String,
    path: String,
    split: String,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aux_channels: Option<BTreeMap<String, String>>,
}

#[derive(Serialize, Deserialize)]
struct PairDoc {
    id: String,
    source: String,
    enhanced: String,
}

#[derive(Serialize, Deserialize)]
struct PairManifestDoc {
    resolution: [usize; 2],
    pairs: Vec<PairDoc>,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Inverse of [`resolve`]: `path` expressed relative to `base`, with `..`
/// steps where needed, so the manifest stays valid wherever the tree moves.
fn relativize(base: &Path, path: &Path) -> String {
    let absolute = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let path = absolute(path);
    pathdiff::diff_paths(&path, absolute(base))
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

pub fn load_manifest(path: &Path, opts: LoadOptions) -> Result<DatasetManifest> {
    let doc: ManifestDoc = serde_json::from_value(read_json::<serde_json::Value>(path)?)
        .map_err(|e| RegenError::Schema(format!("{}: {e}", path.display())))?;
    if doc.records.is_empty() {
        return Err(RegenError::Schema(format!(
            "{}: manifest has no records",
            path.display()
        )));
    }
    let base = base_dir(path);
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(doc.records.len());
    for (index, raw) in doc.records.into_iter().enumerate() {
        let r: RecordDoc = serde_json::from_value(raw).map_err(|e| RegenError::Record {
            index,
            message: e.to_string(),
        })?;
        let split = Split::parse(&r.split).ok_or_else(|| RegenError::UnknownSplit {
            index,
            tag: r.split.clone(),
        })?;
        if !seen.insert(r.id.clone()) {
            return Err(RegenError::DuplicateId { id: r.id, index });
        }
        if r.width == 0 || r.height == 0 {
            return Err(RegenError::Record {
                index,
                message: "width and height must be positive".into(),
            });
        }
        let image_path = resolve(&base, &r.path);
        if !image_path.is_file() {
            return Err(RegenError::MissingFile {
                index,
                path: image_path,
            });
        }
        if opts.strict {
            let dims = imageio::image_dims(&image_path).and_then(|_| {
                let img: crate::tensor::Tensor<f32> = imageio::read_image(&image_path)?;
                Ok((img.shape().w, img.shape().h))
            })?;
            if dims != (r.width, r.height) {
                return Err(RegenError::Record {
                    index,
                    message: format!(
                        "declared {}x{} but image is {}x{}",
                        r.width, r.height, dims.0, dims.1
                    ),
                });
            }
        }
        let aux_channels = r
            .aux_channels
            .unwrap_or_default()
            .into_iter()
            .map(|(k, v)| (k, resolve(&base, &v)))
            .collect();
        records.push(ImageRecord {
            id: r.id,
            path: image_path,
            split,
            width: r.width,
            height: r.height,
            aux_channels,
        });
    }
    Ok(DatasetManifest {
        name: doc.name,
        domain_tag: doc.domain_tag,
        records,
    })
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = base_dir(path);
    let records = manifest
        .records
        .iter()
        .map(|r| {
            let aux = (!r.aux_channels.is_empty()).then(|| {
                r.aux_channels
                    .iter()
                    .map(|(k, v)| (k.clone(), relativize(&base, v)))
                    .collect()
            });
            serde_json::to_value(RecordDoc {
                id: r.id.clone(),
                path: relativize(&base, &r.path),
                split: r.split.as_str().to_string(),
                width: r.width,
                height: r.height,
                aux_channels: aux,
            })
            .expect("record serializes")
        })
        .collect();
    write_json(
        path,
        &ManifestDoc {
            name: manifest.name.clone(),
            domain_tag: manifest.domain_tag,
            records,
        },
    )
}

/// Build a manifest from every image file in `dir`, ids taken from file stems.
pub fn scan_directory(dir: &Path, name: &str, domain_tag: DomainTag) -> Result<DatasetManifest> {
    let entries = std::fs::read_dir(dir).map_err(|e| RegenError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                    Some("png" | "jpg" | "jpeg")
                )
        })
        .collect();
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    let mut seen = HashSet::new();
    for (index, path) in paths.into_iter().enumerate() {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !seen.insert(id.clone()) {
            return Err(RegenError::DuplicateId { id, index });
        }
        let (width, height) = imageio::image_dims(&path)?;
        records.push(ImageRecord {
            id,
            path,
            split: Split::Train,
            width,
            height,
            aux_channels: BTreeMap::new(),
        });
    }
    if records.is_empty() {
        return Err(RegenError::Schema(format!(
            "{}: no images found",
            dir.display()
        )));
    }
    Ok(DatasetManifest {
        name: name.to_string(),
        domain_tag,
        records,
    })
}

/// Pair records by id. Output is sorted by id, so it does not depend on input order.
///
/// With `resize` set, every pair is brought to that resolution by the
/// trainer; otherwise all pairs must already share one native resolution.
pub fn make_pairs(
    source: &DatasetManifest,
    enhanced: &DatasetManifest,
    resize: Option<(usize, usize)>,
) -> Result<PairManifest> {
    let by_id: HashMap<&str, &ImageRecord> =
        enhanced.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut matched: Vec<(&ImageRecord, &ImageRecord)> = source
        .records
        .iter()
        .filter_map(|s| by_id.get(s.id.as_str()).map(|e| (s, *e)))
        .collect();
    if matched.is_empty() {
        return Err(RegenError::EmptyIntersection);
    }
    matched.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    matched.dedup_by(|a, b| a.0.id == b.0.id);

    for (s, e) in &matched {
        if (s.width, s.height) != (e.width, e.height) {
            return Err(RegenError::DimensionMismatch {
                id: s.id.clone(),
                left: (s.width, s.height),
                right: (e.width, e.height),
            });
        }
    }
    let resolution = match resize {
        Some(r) => r,
        None => {
            let first = (matched[0].0.width, matched[0].0.height);
            if let Some((s, _)) = matched.iter().find(|(s, _)| (s.width, s.height) != first) {
                return Err(RegenError::DimensionMismatch {
                    id: s.id.clone(),
                    left: first,
                    right: (s.width, s.height),
                });
            }
            first
        }
    };
    Ok(PairManifest {
        resolution,
        pairs: matched
            .into_iter()
            .map(|(s, e)| Pair {
                id: s.id.clone(),
                source: s.path.clone(),
                enhanced: e.path.clone(),
            })
            .collect(),
    })
}

pub fn load_pairs(path: &Path) -> Result<PairManifest> {
    let doc: PairManifestDoc = serde_json::from_value(read_json::<serde_json::Value>(path)?)
        .map_err(|e| RegenError::Schema(format!("{}: {e}", path.display())))?;
    if doc.pairs.is_empty() {
        return Err(RegenError::Schema(format!(
            "{}: pair manifest has no pairs",
            path.display()
        )));
    }
    let base = base_dir(path);
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(doc.pairs.len());
    for (index, p) in doc.pairs.into_iter().enumerate() {
        if !seen.insert(p.id.clone()) {
            return Err(RegenError::DuplicateId { id: p.id, index });
        }
        pairs.push(Pair {
            id: p.id,
            source: resolve(&base, &p.source),
            enhanced: resolve(&base, &p.enhanced),
        });
    }
    Ok(PairManifest {
        resolution: (doc.resolution[0], doc.resolution[1]),
        pairs,
    })
}

pub fn save_pairs(pairs: &PairManifest, path: &Path) -> Result<()> {
    let base = base_dir(path);
    write_json(
        path,
        &PairManifestDoc {
            resolution: [pairs.resolution.0, pairs.resolution.1],
            pairs: pairs
                .pairs
                .iter()
                .map(|p| PairDoc {
                    id: p.id.clone(),
                    source: relativize(&base, &p.source),
                    enhanced: relativize(&base, &p.enhanced),
                })
                .collect(),
        },
    )
}

/// Split sizes by largest remainder: each within 1 of `ratio * n`, summing to `n`.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(RegenError::invalid(format!(
            "split ratios must be non-negative, got {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(RegenError::invalid(format!(
            "split ratios must sum to 1, got {total}"
        )));
    }
    let nonzero = ratios.iter().filter(|r| **r > 0.0).count();
    if n < nonzero {
        return Err(RegenError::invalid(format!(
            "{n} records cannot fill {nonzero} non-empty splits"
        )));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        // guard against 900.0000000001-style representation error
        *s = (e + 1e-9).floor() as usize;
    }
    let mut remaining = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).filter(|&i| ratios[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - sizes[a] as f64;
        let fb = exact[b] - sizes[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        sizes[i] += 1;
        remaining -= 1;
    }
    Ok(sizes)
}

/// Deterministically reassign splits: shuffle with `seed`, then cut by [`split_sizes`].
pub fn split_manifest(
    manifest: &DatasetManifest,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetManifest> {
    let n = manifest.records.len();
    let sizes = split_sizes(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assigned = vec![Split::Train; n];
    let mut cursor = 0;
    for (split, size) in Split::ALL.into_iter().zip(sizes) {
        for &i in &order[cursor..cursor + size] {
            assigned[i] = split;
        }
        cursor += size;
    }
    let mut out = manifest.clone();
    for (r, s) in out.records.iter_mut().zip(assigned) {
        r.split = s;
    }
    Ok(out)
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.split as usize] += 1;
        }
        c
    }
}

impl PairManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Keep only the pairs whose id is in `ids`.
    pub fn restrict<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> PairManifest {
        let keep: HashSet<&str> = ids.into_iter().collect();
        PairManifest {
            resolution: self.resolution,
            pairs: self
                .pairs
                .iter()
                .filter(|p| keep.contains(p.id.as_str()))
                .cloned()
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn record(id: &str, dir: &Path, w: usize, h: usize) -> ImageRecord {
        ImageRecord {
            id: id.to_string(),
            path: dir.join(format!("{id}.png")),
            split: Split::Train,
            width: w,
            height: h,
            aux_channels: BTreeMap::new(),
        }
    }

    fn manifest(ids: &[&str], tag: DomainTag) -> DatasetManifest {
        DatasetManifest {
            name: "m".into(),
            domain_tag: tag,
            records: ids.iter().map(|id| record(id, Path::new("/data"), 8, 8)).collect(),
        }
    }

    fn write_images(dir: &Path, ids: &[&str]) {
        for id in ids {
            let t = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 6));
            imageio::write_png(&dir.join(format!("{id}.png")), &t).unwrap();
        }
    }

    #[test]
    fn load_three_records() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a", "b", "c"]);
        let json = r#"{"name":"game","domain_tag":"source_game","records":[
            {"id":"a","path":"a.png","split":"train","width":6,"height":4},
            {"id":"b","path":"b.png","split":"val","width":6,"height":4,"aux_channels":{"label":"a.png"}},
            {"id":"c","path":"c.png","split":"test","width":6,"height":4}]}"#;
        let path = dir.path().join("m.json");
        std::fs::write(&path, json).unwrap();
        let m = load_manifest(&path, LoadOptions { strict: true }).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.split_counts(), [1, 1, 1]);
        assert_eq!(m.records[1].aux_channels["label"], dir.path().join("a.png"));
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["f001"]);
        let json = r#"{"name":"x","domain_tag":"source_game","records":[
            {"id":"f001","path":"f001.png","split":"train","width":6,"height":4},
            {"id":"f001","path":"f001.png","split":"train","width":6,"height":4}]}"#;
        let path = dir.path().join("m.json");
        std::fs::write(&path, json).unwrap();
        let err = load_manifest(&path, LoadOptions::default()).unwrap_err();
        assert!(matches!(&err, RegenError::DuplicateId { id, index: 1 } if id == "f001"), "{err}");
        assert!(err.to_string().contains("f001"));
    }

    #[test]
    fn load_errors_carry_record_index() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a"]);
        let cases = [
            (r#"{"id":"a","path":"a.png","split":"holdout","width":6,"height":4}"#, "unknown split"),
            (r#"{"id":"a","path":"zz.png","split":"train","width":6,"height":4}"#, "does not exist"),
            (r#"{"id":"a","path":"a.png","split":"train"}"#, "record 1"),
        ];
        for (rec, needle) in cases {
            let json = format!(
                r#"{{"name":"x","domain_tag":"enhanced","records":[
                {{"id":"z","path":"a.png","split":"train","width":6,"height":4}},{rec}]}}"#
            );
            let path = dir.path().join("m.json");
            std::fs::write(&path, json).unwrap();
            let err = load_manifest(&path, LoadOptions::default()).unwrap_err().to_string();
            assert!(err.contains(needle), "{err}");
            assert!(err.contains("record 1"), "{err}");
        }
    }

    #[test]
    fn strict_load_checks_declared_dims() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a"]);
        let json = r#"{"name":"x","domain_tag":"enhanced","records":[
            {"id":"a","path":"a.png","split":"train","width":5,"height":4}]}"#;
        let path = dir.path().join("m.json");
        std::fs::write(&path, json).unwrap();
        assert!(load_manifest(&path, LoadOptions::default()).is_ok());
        assert!(load_manifest(&path, LoadOptions { strict: true }).is_err());
    }

    #[test]
    fn pairs_are_the_sorted_intersection() {
        let src = manifest(&["c", "a", "b"], DomainTag::SourceGame);
        let enh = manifest(&["d", "c", "b"], DomainTag::Enhanced);
        let p = make_pairs(&src, &enh, None).unwrap();
        let ids: Vec<&str> = p.pairs.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["b", "c"]);
        assert_eq!(p.resolution, (8, 8));
    }

    #[test]
    fn identical_manifests_pair_with_themselves() {
        let src = manifest(&["x", "y", "z"], DomainTag::SourceGame);
        let p = make_pairs(&src, &src, None).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.pairs.iter().all(|p| p.source == p.enhanced));
    }

    #[test]
    fn pairing_errors() {
        let src = manifest(&["a"], DomainTag::SourceGame);
        let other = manifest(&["b"], DomainTag::Enhanced);
        assert!(matches!(make_pairs(&src, &other, None), Err(RegenError::EmptyIntersection)));
        let mut enh = src.clone();
        enh.records[0].width = 9;
        assert!(matches!(
            make_pairs(&src, &enh, Some((8, 8))),
            Err(RegenError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn split_examples() {
        let ten = manifest(&["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"], DomainTag::SourceGame);
        let a = split_manifest(&ten, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(a.split_counts(), [8, 1, 1]);
        assert_eq!(a, split_manifest(&ten, [0.8, 0.1, 0.1], 7).unwrap());
        assert_eq!(split_manifest(&ten, [1.0, 0.0, 0.0], 3).unwrap().split_counts(), [10, 0, 0]);
        assert_eq!(split_sizes(1000, [0.9, 0.05, 0.05]).unwrap(), [900, 50, 50]);
    }

    #[test]
    fn split_errors() {
        assert!(split_sizes(10, [1.2, -0.1, -0.1]).is_err());
        assert!(split_sizes(10, [0.5, 0.2, 0.2]).is_err());
        assert!(split_sizes(2, [0.4, 0.3, 0.3]).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_images(dir.path(), &["a", "b"]);
        let mut m = DatasetManifest {
            name: "rt".into(),
            domain_tag: DomainTag::TargetReal,
            records: vec![record("a", dir.path(), 6, 4), record("b", dir.path(), 6, 4)],
        };
        m.records[1].split = Split::Test;
        m.records[1]
            .aux_channels
            .insert("depth".into(), dir.path().join("a.png"));
        let path = dir.path().join("out.json");
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path, LoadOptions::default()).unwrap(), m);
    }

    #[test]
    fn pair_paths_outside_the_manifest_directory_survive_a_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (src, out) = (dir.path().join("src"), dir.path().join("pairs"));
        std::fs::create_dir_all(&src).unwrap();
        write_images(&src, &["a"]);
        let pairs = PairManifest {
            resolution: (6, 4),
            pairs: vec![Pair {
                id: "a".into(),
                source: src.join("a.png"),
                enhanced: out.join("enhanced/a.png"),
            }],
        };
        save_pairs(&pairs, &out.join("pairs.json")).unwrap();
        let text = std::fs::read_to_string(out.join("pairs.json")).unwrap();
        assert!(text.contains("../src/a.png") && text.contains("\"enhanced/a.png\""));
        let back = load_pairs(&out.join("pairs.json")).unwrap();
        assert_eq!(std::fs::canonicalize(&back.pairs[0].source).unwrap(), std::fs::canonicalize(src.join("a.png")).unwrap());
    }
}
