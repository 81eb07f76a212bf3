//! Crop sampling and deep-feature similarity search between two image domains.

use std::cmp::Ordering;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{RegenError, Result};
use crate::features::FeatureExtractor;
use crate::fsio::{read_json, write_json};
use crate::imageio::read_image;
use crate::scalar::Scalar;
use crate::teacher::frame_seed;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_PATCH_SIZE: usize = 196;
pub const DEFAULT_K: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A square crop of a manifest image and its unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PatchRecord<T> {
    pub parent_id: String,
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub feature: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub target: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub source: usize,
    pub neighbors: Vec<Neighbor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTable {
    pub k: usize,
    pub threshold: f64,
    pub entries: Vec<MatchEntry>,
}

impl MatchTable {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn save_patches<T: Scalar>(patches: &[PatchRecord<T>], path: &Path) -> Result<()> {
    write_json(path, &patches)
}

pub fn load_patches<T: Scalar>(path: &Path) -> Result<Vec<PatchRecord<T>>> {
    read_json(path)
}

/// Copy out the `size x size` window at `(top, left)` of a single image.
pub fn crop<T: Scalar>(image: &Tensor<T>, top: usize, left: usize, size: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.n != 1 || top + size > s.h || left + size > s.w {
        return Err(RegenError::Shape(format!(
            "crop {size}x{size} at ({top}, {left}) outside image {s}"
        )));
    }
    let mut out = Tensor::zeros(Shape::new(1, s.c, size, size));
    for c in 0..s.c {
        for y in 0..size {
            for x in 0..size {
                *out.at_mut(0, c, y, x) = image.at(0, c, top + y, left + x);
            }
        }
    }
    Ok(out)
}

fn l2_normalize<T: Scalar>(v: &mut [T]) -> Result<()> {
    let norm = v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(RegenError::invalid("patch feature has zero or non-finite norm"));
    }
    let inv = T::from_f64_lossy(1.0 / norm);
    v.iter_mut().for_each(|x| *x *= inv);
    Ok(())
}

/// Sample `per_image` square crops from every image large enough to hold
/// one. Crop positions depend only on `seed` and the record id. Images that
/// are too small are skipped with a warning, or rejected when `strict`.
pub fn sample_patches<T: Scalar>(
    manifest: &DatasetManifest,
    patch_size: usize,
    per_image: usize,
    seed: u64,
    extractor: &dyn FeatureExtractor<T>,
    strict: bool,
) -> Result<Vec<PatchRecord<T>>> {
    if patch_size == 0 {
        return Err(RegenError::invalid("patch size must be positive"));
    }
    let mut out = Vec::new();
    if per_image == 0 {
        return Ok(out);
    }
    for (index, rec) in manifest.records.iter().enumerate() {
        if patch_size > rec.width.min(rec.height) {
            let msg = format!(
                "image {} is {}x{}, smaller than patch size {patch_size}",
                rec.id, rec.width, rec.height
            );
            if strict {
                return Err(RegenError::Record { index, message: msg });
            }
            log::warn!("skipping: {msg}");
            continue;
        }
        let image = read_image::<T>(&rec.path)?;
        let s = image.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(seed, &rec.id));
        let mut crops = Vec::with_capacity(per_image);
        let mut offsets = Vec::with_capacity(per_image);
        for _ in 0..per_image {
            let top = rng.gen_range(0..=s.h - patch_size);
            let left = rng.gen_range(0..=s.w - patch_size);
            crops.push(crop(&image, top, left, patch_size)?);
            offsets.push((top, left));
        }
        let feats = extractor.embed(&Tensor::stack(&crops)?)?;
        for ((top, left), feature) in offsets.into_iter().zip(feats.chunks(extractor.dim())) {
            let mut feature = feature.to_vec();
            l2_normalize(&mut feature)?;
            out.push(PatchRecord {
                parent_id: rec.id.clone(),
                top,
                left,
                size: patch_size,
                feature,
            });
        }
    }
    Ok(out)
}

/// Dot product of unit vectors accumulated in f64, in index order.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.to_f64_lossy() * y.to_f64_lossy())
        .sum()
}

/// Search strategy for [`match_patches`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SearchBackend {
    /// Exhaustive scan over every target.
    #[default]
    Exact,
    /// Inverted-file index: k-means cells over the targets, scanning only the
    /// `probes` cells whose centroids are most similar to the query.
    Ivf { lists: usize, probes: usize, seed: u64 },
}

impl SearchBackend {
    /// IVF sized for `n` targets: about `sqrt(n)` cells, every cell allowed.
    /// The bound-based early exit alone decides how much is scanned, so the
    /// result matches the exhaustive scan; lower `probes` to trade recall for
    /// speed.
    pub fn ivf_for(n: usize, seed: u64) -> Self {
        let lists = ((n as f64).sqrt().ceil() as usize).max(1);
        SearchBackend::Ivf {
            lists,
            probes: lists,
            seed,
        }
    }
}

fn check_dims<T>(source: &[PatchRecord<T>], target: &[PatchRecord<T>]) -> Result<usize> {
    if source.is_empty() || target.is_empty() {
        return Err(RegenError::invalid("patch matching needs non-empty source and target sets"));
    }
    let d = source[0].feature.len();
    for p in source.iter().chain(target) {
        if p.feature.len() != d {
            return Err(RegenError::Shape(format!(
                "patch feature dimension {} vs {d}",
                p.feature.len()
            )));
        }
    }
    Ok(d)
}

fn flatten<T: Scalar>(patches: &[PatchRecord<T>]) -> Vec<f64> {
    patches
        .iter()
        .flat_map(|p| p.feature.iter().map(|v| v.to_f64_lossy()))
        .collect()
}

/// `a (n x d)` times `b (m x d)` transposed.
fn similarities(a: &[f64], n: usize, b: &[f64], m: usize, d: usize) -> Vec<f64> {
    let mut s = vec![0.0; n * m];
    f64::gemm(n, d, m, 1.0, a, d as isize, 1, b, 1, d as isize, 0.0, &mut s, m as isize, 1);
    s
}

fn by_similarity(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then(a.target.cmp(&b.target))
}

fn top_k(candidates: impl Iterator<Item = Neighbor>, k: usize, threshold: f64) -> Vec<Neighbor> {
    let mut v: Vec<Neighbor> = candidates.filter(|n| n.similarity >= threshold).collect();
    v.sort_by(by_similarity);
    v.truncate(k);
    v
}

/// For every source patch, the `k` most cosine-similar target patches with
/// similarity at least `threshold`, best first (ties by lower index).
pub fn match_patches<T: Scalar>(
    source: &[PatchRecord<T>],
    target: &[PatchRecord<T>],
    k: usize,
    threshold: f64,
    backend: SearchBackend,
) -> Result<MatchTable> {
    if k < 1 {
        return Err(RegenError::invalid("k must be at least 1"));
    }
    let d = check_dims(source, target)?;
    let (n, m) = (source.len(), target.len());
    let (sf, tf) = (flatten(source), flatten(target));
    let entries = match backend {
        SearchBackend::Exact => {
            let sims = similarities(&sf, n, &tf, m, d);
            sims.chunks(m)
                .enumerate()
                .map(|(source, row)| MatchEntry {
                    source,
                    neighbors: top_k(
                        row.iter().enumerate().map(|(target, &similarity)| Neighbor { target, similarity }),
                        k,
                        threshold,
                    ),
                })
                .collect()
        }
        SearchBackend::Ivf { lists, probes, seed } => {
            let index = IvfIndex::build(&tf, m, d, lists, seed)?;
            (0..n)
                .map(|i| MatchEntry {
                    source: i,
                    neighbors: index.search(&sf[i * d..(i + 1) * d], &tf, k, threshold, probes),
                })
                .collect()
        }
    };
    Ok(MatchTable { k, threshold, entries })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spherical k-means cells over unit vectors. Each cell keeps its angular
/// radius, which bounds the similarity any member can have to a query; cells
/// are visited best-bound first and the scan stops once no unvisited cell
/// can beat the current k-th neighbor.
struct IvfIndex {
    d: usize,
    centroids: Vec<f64>,
    radii: Vec<f64>,
    members: Vec<Vec<usize>>,
}

impl IvfIndex {
    const ITERATIONS: usize = 10;

    fn build(data: &[f64], m: usize, d: usize, lists: usize, seed: u64) -> Result<Self> {
        if lists == 0 {
            return Err(RegenError::invalid("an IVF index needs at least one list"));
        }
        let lists = lists.min(m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = rand::seq::index::sample(&mut rng, m, lists);
        let mut centroids: Vec<f64> = init.iter().flat_map(|i| data[i * d..(i + 1) * d].to_vec()).collect();
        let mut assign = vec![0usize; m];
        let mut best = vec![0.0f64; m];
        for iteration in 0..=Self::ITERATIONS {
            let sims = similarities(data, m, &centroids, lists, d);
            for (i, row) in sims.chunks(lists).enumerate() {
                assign[i] = argmax(row);
                best[i] = row[assign[i]];
            }
            if iteration == Self::ITERATIONS {
                break;
            }
            let mut sums = vec![0.0; lists * d];
            for (i, &c) in assign.iter().enumerate() {
                for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(&data[i * d..(i + 1) * d]) {
                    *s += v;
                }
            }
            for c in 0..lists {
                let cell = &mut sums[c * d..(c + 1) * d];
                let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    cell.iter_mut().for_each(|v| *v /= norm);
                    centroids[c * d..(c + 1) * d].copy_from_slice(cell);
                }
            }
        }
        let mut members = vec![Vec::new(); lists];
        let mut radii = vec![0.0f64; lists];
        for (i, &c) in assign.iter().enumerate() {
            members[c].push(i);
            radii[c] = radii[c].max(angle(best[i]));
        }
        Ok(IvfIndex {
            d,
            centroids,
            radii,
            members,
        })
    }

    fn search(&self, q: &[f64], data: &[f64], k: usize, threshold: f64, probes: usize) -> Vec<Neighbor> {
        let mut order: Vec<(usize, f64)> = self
            .centroids
            .chunks(self.d)
            .enumerate()
            .map(|(c, centroid)| {
                let gap = (angle(dot(q, centroid)) - self.radii[c]).max(0.0);
                (c, gap.cos())
            })
            .collect();
        order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        let mut found: Vec<Neighbor> = Vec::new();
        for &(c, bound) in order.iter().take(probes.max(1)) {
            // small slack so rounding in the bound never prunes a true neighbor
            let kth = if found.len() >= k { found[k - 1].similarity } else { threshold };
            if bound + 1e-9 < kth {
                break;
            }
            found.extend(self.members[c].iter().map(|&t| Neighbor {
                target: t,
                similarity: dot(q, &data[t * self.d..(t + 1) * self.d]),
            }));
            found = top_k(found.into_iter(), k, threshold);
        }
        found
    }
}

fn angle(cos: f64) -> f64 {
    cos.clamp(-1.0, 1.0).acos()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn random_patches(n: usize, d: usize, seed: u64) -> Vec<PatchRecord<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut feature: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                l2_normalize(&mut feature).unwrap();
                PatchRecord {
                    parent_id: format!("p{i}"),
                    top: 0,
                    left: 0,
                    size: 1,
                    feature,
                }
            })
            .collect()
    }

    #[test]
    fn self_match_has_similarity_one() {
        let p = random_patches(20, 16, 1);
        let t = match_patches(&p, &p, 1, 0.9, SearchBackend::Exact).unwrap();
        for e in &t.entries {
            assert_eq!(e.neighbors.len(), 1);
            assert_eq!(e.neighbors[0].target, e.source);
            assert!((e.neighbors[0].similarity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_sets_have_no_matches() {
        let unit = |i: usize| PatchRecord {
            parent_id: i.to_string(),
            top: 0,
            left: 0,
            size: 1,
            feature: (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>(),
        };
        let t = match_patches(&[unit(0), unit(1)], &[unit(2), unit(3)], 3, 0.5, SearchBackend::Exact).unwrap();
        assert!(t.entries.iter().all(|e| e.neighbors.is_empty()));
    }

    #[test]
    fn invalid_inputs() {
        let p = random_patches(3, 4, 1);
        let q = random_patches(3, 5, 2);
        assert!(match_patches(&p, &p, 0, 0.0, SearchBackend::Exact).is_err());
        assert!(match_patches(&p, &q, 1, 0.0, SearchBackend::Exact).is_err());
        assert!(match_patches(&p, &[], 1, 0.0, SearchBackend::Exact).is_err());
    }

    #[test]
    fn crop_bounds() {
        let t = Tensor::<f64>::zeros(Shape::new(1, 3, 10, 12));
        assert_eq!(crop(&t, 2, 4, 8).unwrap().shape(), Shape::new(1, 3, 8, 8));
        assert!(crop(&t, 3, 0, 8).is_err());
    }

    #[test]
    fn ivf_agrees_with_exact_on_top1() {
        let s = random_patches(200, 32, 3);
        let t = random_patches(300, 32, 4);
        let exact = match_patches(&s, &t, 1, -1.0, SearchBackend::Exact).unwrap();
        let approx = match_patches(&s, &t, 1, -1.0, SearchBackend::ivf_for(300, 0)).unwrap();
        let agree = exact
            .entries
            .iter()
            .zip(&approx.entries)
            .filter(|(a, b)| a.neighbors[0].target == b.neighbors[0].target)
            .count();
        assert!(agree >= 198, "{agree}/200");
    }

    #[test]
    fn ivf_prunes_clustered_data_without_losing_neighbors() {
        // tight clusters around a few random directions
        let centers = random_patches(8, 32, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let jitter = |c: &PatchRecord<f64>, rng: &mut ChaCha8Rng| {
            let mut f: Vec<f64> = c
                .feature
                .iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v + 0.05 * z
                })
                .collect::<Vec<f64>>();
            l2_normalize(&mut f).unwrap();
            PatchRecord { feature: f, ..c.clone() }
        };
        let t: Vec<_> = (0..400).map(|i| jitter(&centers[i % 8], &mut rng)).collect();
        let s: Vec<_> = (0..50).map(|i| jitter(&centers[i % 8], &mut rng)).collect();
        let exact = match_patches(&s, &t, 3, 0.0, SearchBackend::Exact).unwrap();
        let approx = match_patches(&s, &t, 3, 0.0, SearchBackend::ivf_for(400, 1)).unwrap();
        for (a, b) in exact.entries.iter().zip(&approx.entries) {
            let ids = |e: &MatchEntry| e.neighbors.iter().map(|n| n.target).collect::<Vec<_>>();
            assert_eq!(ids(a), ids(b));
        }
    }
}
