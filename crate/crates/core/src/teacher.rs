//! Teacher contract, enhanced-set ingestion, and the synthetic oracle teacher.
//!
//! The oracle stands in for a slow, semantics-preserving enhancer. It
//! composes, in order:
//!
//! 1. a 3x3 color mix plus bias,
//! 2. unsharp-mask local contrast with the 5x5 binomial kernel
//!    `[1 4 6 4 1]^T [1 4 6 4 1] / 256` and reflected borders,
//! 3. a radial quadratic vignette `1 - s * r^2`, with `r = 1` at the corners,
//! 4. additive Gaussian grain seeded per frame,
//! 5. a clamp to `[-1, 1]`.
//!
//! It runs per pixel in `f64` with no batching.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetManifest, DomainTag, PairManifest};
use crate::error::{RegenError, Result};
use crate::imageio;
use crate::nn::reflect;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Any enhancer whose output keeps the input's dimensions.
pub trait Teacher<T: Scalar>: Send + Sync {
    /// Enhance one `1 x 3 x h x w` frame. `frame_id` lets stochastic
    /// teachers derive per-frame randomness independent of call order.
    fn enhance(&self, image: &Tensor<T>, frame_id: &str) -> Result<Tensor<T>>;

    fn descriptor(&self) -> String;

    fn deterministic(&self) -> bool;
}

/// Missing fields in a config file take their [`OracleParams::photoreal_grade`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleParams {
    pub color_matrix: [[f64; 3]; 3],
    pub color_bias: [f64; 3],
    pub local_contrast_strength: f64,
    pub vignette_strength: f64,
    pub grain_sigma: f64,
    pub seed: u64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams::photoreal_grade()
    }
}

impl OracleParams {
    pub fn identity() -> Self {
        OracleParams {
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            color_bias: [0.0; 3],
            local_contrast_strength: 0.0,
            vignette_strength: 0.0,
            grain_sigma: 0.0,
            seed: 0,
        }
    }

    /// A warm, contrasty grade with a visible vignette and light grain.
    pub fn photoreal_grade() -> Self {
        OracleParams {
            color_matrix: [[1.10, 0.12, -0.04], [0.02, 0.95, 0.02], [-0.06, 0.04, 0.78]],
            color_bias: [0.10, 0.02, -0.12],
            local_contrast_strength: 0.8,
            vignette_strength: 0.3,
            grain_sigma: 0.01,
            seed: 7,
        }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.color_matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.color_matrix.iter().flatten().all(|v| v.is_finite())
            && self.color_bias.iter().all(|v| v.is_finite());
        if !finite {
            return Err(RegenError::config("teacher.color_matrix", "entries must be finite"));
        }
        if self.determinant().abs() < 1e-9 {
            return Err(RegenError::config(
                "teacher.color_matrix",
                "matrix is not invertible",
            ));
        }
        if self.local_contrast_strength.is_nan() || self.local_contrast_strength < 0.0 {
            return Err(RegenError::config(
                "teacher.local_contrast_strength",
                "must be >= 0",
            ));
        }
        if !(0.0..=1.0).contains(&self.vignette_strength) {
            return Err(RegenError::config(
                "teacher.vignette_strength",
                "must lie in [0, 1]",
            ));
        }
        if self.grain_sigma.is_nan() || self.grain_sigma < 0.0 {
            return Err(RegenError::config("teacher.grain_sigma", "must be >= 0"));
        }
        Ok(())
    }

    /// Inverse of the color stage.
    pub fn inverse_color(&self) -> [[f64; 3]; 3] {
        let m = &self.color_matrix;
        let det = self.determinant();
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        [
            [cof(1, 2, 1, 2) / det, -cof(0, 2, 1, 2) / det, cof(0, 1, 1, 2) / det],
            [-cof(1, 2, 0, 2) / det, cof(0, 2, 0, 2) / det, -cof(0, 1, 0, 2) / det],
            [cof(1, 2, 0, 1) / det, -cof(0, 2, 0, 1) / det, cof(0, 1, 0, 1) / det],
        ]
    }
}

const BINOMIAL5: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

/// Stable 64-bit mix of a seed and a frame id.
pub fn frame_seed(seed: u64, frame_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(frame_id.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finalizer
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Apply the oracle grade to one frame. Grain is drawn from `params.seed`.
pub fn oracle_teacher<T: Scalar>(image: &Tensor<T>, params: &OracleParams) -> Result<Tensor<T>> {
    params.validate()?;
    let s = image.shape();
    if s.c != 3 {
        return Err(RegenError::Shape(format!("oracle teacher needs 3 channels, got {s}")));
    }
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let src = image.sample(n);
        // 1. color transform
        let mut buf = vec![0.0f64; 3 * plane];
        for p in 0..plane {
            let px = [
                src[p].to_f64_lossy(),
                src[plane + p].to_f64_lossy(),
                src[2 * plane + p].to_f64_lossy(),
            ];
            for c in 0..3 {
                let m = &params.color_matrix[c];
                buf[c * plane + p] = m[0] * px[0] + m[1] * px[1] + m[2] * px[2] + params.color_bias[c];
            }
        }
        // 2. local contrast: y + s * (y - blur(y))
        if params.local_contrast_strength > 0.0 {
            let k = params.local_contrast_strength;
            let mut sharp = vec![0.0f64; 3 * plane];
            for c in 0..3 {
                let ch = &buf[c * plane..(c + 1) * plane];
                for y in 0..h {
                    for x in 0..w {
                        let mut blur = 0.0;
                        for (dy, wy) in BINOMIAL5.iter().enumerate() {
                            let iy = reflect(y as isize + dy as isize - 2, h);
                            for (dx, wx) in BINOMIAL5.iter().enumerate() {
                                let ix = reflect(x as isize + dx as isize - 2, w);
                                blur += wy * wx / 256.0 * ch[iy * w + ix];
                            }
                        }
                        let v = ch[y * w + x];
                        sharp[c * plane + y * w + x] = v + k * (v - blur);
                    }
                }
            }
            buf = sharp;
        }
        // 3. vignette
        if params.vignette_strength > 0.0 {
            let cx = (w as f64 - 1.0) / 2.0;
            let cy = (h as f64 - 1.0) / 2.0;
            for y in 0..h {
                for x in 0..w {
                    let dx = if cx > 0.0 { (x as f64 - cx) / cx } else { 0.0 };
                    let dy = if cy > 0.0 { (y as f64 - cy) / cy } else { 0.0 };
                    let factor = 1.0 - params.vignette_strength * (dx * dx + dy * dy) / 2.0;
                    for c in 0..3 {
                        buf[c * plane + y * w + x] *= factor;
                    }
                }
            }
        }
        // 4. grain
        if params.grain_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(n as u64));
            for v in buf.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += params.grain_sigma * z;
            }
        }
        // 5. clamp
        let dst = out.sample_mut(n);
        for (d, v) in dst.iter_mut().zip(buf) {
            *d = T::from_f64_lossy(v.clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct OracleTeacher {
    params: OracleParams,
}

impl OracleTeacher {
    pub fn new(params: OracleParams) -> Result<Self> {
        params.validate()?;
        Ok(OracleTeacher { params })
    }

    pub fn params(&self) -> &OracleParams {
        &self.params
    }
}

impl<T: Scalar> Teacher<T> for OracleTeacher {
    fn enhance(&self, image: &Tensor<T>, frame_id: &str) -> Result<Tensor<T>> {
        let params = OracleParams {
            seed: frame_seed(self.params.seed, frame_id),
            ..self.params.clone()
        };
        oracle_teacher(image, &params)
    }

    fn descriptor(&self) -> String {
        format!("oracle{:?}", self.params)
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// Enhance every source frame, write `<id>.png` into `out_dir`, and pair the results.
pub fn generate_pairs<T: Scalar>(
    teacher: &dyn Teacher<T>,
    manifest: &DatasetManifest,
    out_dir: &Path,
    resize: Option<(usize, usize)>,
) -> Result<PairManifest> {
    if manifest.domain_tag != DomainTag::SourceGame {
        return Err(RegenError::invalid(format!(
            "generate_pairs needs a source_game manifest, got {:?}",
            manifest.domain_tag
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| RegenError::io(out_dir, e))?;
    let mut enhanced = DatasetManifest {
        name: format!("{}-enhanced", manifest.name),
        domain_tag: DomainTag::Enhanced,
        records: Vec::with_capacity(manifest.records.len()),
    };
    for rec in &manifest.records {
        let img: Tensor<T> = imageio::read_image(&rec.path)?;
        let out = teacher.enhance(&img, &rec.id)?;
        let (si, so) = (img.shape(), out.shape());
        if (si.h, si.w) != (so.h, so.w) || so.c != 3 {
            return Err(RegenError::DimensionMismatch {
                id: rec.id.clone(),
                left: (si.w, si.h),
                right: (so.w, so.h),
            });
        }
        let path = out_dir.join(format!("{}.png", rec.id));
        imageio::write_png(&path, &out)?;
        let mut r = rec.clone();
        r.path = path;
        r.aux_channels.clear();
        enhanced.records.push(r);
    }
    data::make_pairs(manifest, &enhanced, resize)
}

/// Pair source frames with externally enhanced files named by source id.
pub fn ingest_enhanced(
    source: &DatasetManifest,
    enhanced_dir: &Path,
    resize: Option<(usize, usize)>,
) -> Result<PairManifest> {
    let enhanced = data::scan_directory(enhanced_dir, "enhanced", DomainTag::Enhanced)?;
    data::make_pairs(source, &enhanced, resize)
}

/// Run a teacher over a batch of frames, e.g. for building evaluation references.
pub fn enhance_all<T: Scalar>(
    teacher: &dyn Teacher<T>,
    frames: &[(String, Tensor<T>)],
) -> Result<Vec<Tensor<T>>> {
    frames
        .iter()
        .map(|(id, img)| teacher.enhance(img, id))
        .collect()
}

/// Invert the deterministic stages (vignette, local contrast, color) of the oracle.
///
/// Grain and clamping are not invertible and are ignored. The contrast stage
/// `(1 + s) y - s * blur(y)` is undone by fixed-point iteration, which
/// contracts at rate `s / (1 + s)` because the blur is an averaging operator.
pub fn invert_oracle<T: Scalar>(image: &Tensor<T>, params: &OracleParams) -> Result<Tensor<T>> {
    params.validate()?;
    if params.vignette_strength >= 1.0 {
        return Err(RegenError::invalid("vignette strength 1 zeroes the corners"));
    }
    let s = image.shape();
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    let inv = params.inverse_color();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let mut buf: Vec<f64> = image.sample(n).iter().map(|v| v.to_f64_lossy()).collect();
        if params.vignette_strength > 0.0 {
            let cx = (w as f64 - 1.0) / 2.0;
            let cy = (h as f64 - 1.0) / 2.0;
            for y in 0..h {
                for x in 0..w {
                    let dx = if cx > 0.0 { (x as f64 - cx) / cx } else { 0.0 };
                    let dy = if cy > 0.0 { (y as f64 - cy) / cy } else { 0.0 };
                    let factor = 1.0 - params.vignette_strength * (dx * dx + dy * dy) / 2.0;
                    for c in 0..3 {
                        buf[c * plane + y * w + x] /= factor;
                    }
                }
            }
        }
        if params.local_contrast_strength > 0.0 {
            let k = params.local_contrast_strength;
            let target = buf.clone();
            for _ in 0..200 {
                let mut next = vec![0.0f64; 3 * plane];
                let mut delta: f64 = 0.0;
                for c in 0..3 {
                    let ch = &buf[c * plane..(c + 1) * plane];
                    for y in 0..h {
                        for x in 0..w {
                            let mut blur = 0.0;
                            for (dy, wy) in BINOMIAL5.iter().enumerate() {
                                let iy = reflect(y as isize + dy as isize - 2, h);
                                for (dx, wx) in BINOMIAL5.iter().enumerate() {
                                    let ix = reflect(x as isize + dx as isize - 2, w);
                                    blur += wy * wx / 256.0 * ch[iy * w + ix];
                                }
                            }
                            let i = c * plane + y * w + x;
                            next[i] = (target[i] + k * blur) / (1.0 + k);
                            delta = delta.max((next[i] - buf[i]).abs());
                        }
                    }
                }
                buf = next;
                if delta < 1e-13 {
                    break;
                }
            }
        }
        let dst = out.sample_mut(n);
        for p in 0..plane {
            let y = [
                buf[p] - params.color_bias[0],
                buf[plane + p] - params.color_bias[1],
                buf[2 * plane + p] - params.color_bias[2],
            ];
            for c in 0..3 {
                dst[c * plane + p] =
                    T::from_f64_lossy(inv[c][0] * y[0] + inv[c][1] * y[1] + inv[c][2] * y[2]);
            }
        }
    }
    Ok(out)
}

pub fn frame_shape(width: usize, height: usize) -> Shape {
    Shape::new(1, 3, height, width)
}
