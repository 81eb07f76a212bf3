//! Portable graph export of the student generator, the `{model}.spec.json`
//! sidecar that describes it, and numerical parity against the
//! in-framework model.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{RegenError, Result};
use crate::fsio::{read_json, write_atomic, write_json};
use crate::onnx::{self, Dim, GraphBuilder, Precision, OPSET_VERSION};
use crate::runtime::OnnxSession;
use crate::scalar::Scalar;
use crate::student::{ArchConfig, StudentModel};
use crate::tensor::{Shape, Tensor};

pub const INPUT_NAME: &str = "frame";
pub const OUTPUT_NAME: &str = "enhanced";

/// One graph input or output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub layout: String,
    /// `[n, c, h, w]`; `None` marks a dimension chosen at load time.
    pub shape: [Option<usize>; 4],
    pub value_range: [f64; 2],
    pub element_type: String,
}

impl TensorSpec {
    fn frame(name: &str, resolution: Option<(usize, usize)>, precision: Precision) -> Self {
        let (w, h) = resolution.map_or((None, None), |(w, h)| (Some(w), Some(h)));
        TensorSpec {
            name: name.to_string(),
            layout: "NCHW".into(),
            shape: [Some(1), Some(3), h, w],
            value_range: [-1.0, 1.0],
            element_type: match precision {
                Precision::Fp32 => "float32".into(),
                Precision::Fp16 => "float16".into(),
            },
        }
    }
}

/// Contents of the `{model}.spec.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSpec {
    pub format: String,
    pub opset: i64,
    pub precision: Precision,
    pub input: TensorSpec,
    pub output: TensorSpec,
    /// Both spatial sides must be multiples of this.
    pub downsampling_factor: usize,
    pub arch: ArchConfig,
}

impl ExportSpec {
    /// Fixed `(width, height)`, if the graph was exported with static dims.
    pub fn resolution(&self) -> Option<(usize, usize)> {
        match self.input.shape {
            [_, _, Some(h), Some(w)] => Some((w, h)),
            _ => None,
        }
    }

    /// Check that a frame of `(width, height)` is accepted by the graph.
    pub fn accepts(&self, (w, h): (usize, usize)) -> Result<()> {
        if let Some(fixed) = self.resolution() {
            if fixed != (w, h) {
                return Err(RegenError::Shape(format!(
                    "graph was exported for {}x{}, got {w}x{h}",
                    fixed.0, fixed.1
                )));
            }
        }
        let f = self.downsampling_factor;
        if w == 0 || h == 0 || w % f != 0 || h % f != 0 {
            return Err(RegenError::Shape(format!(
                "{w}x{h} is not a multiple of the downsampling factor {f}"
            )));
        }
        Ok(())
    }
}

/// An exported graph on disk together with its sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedModel {
    pub path: PathBuf,
    pub spec: ExportSpec,
}

/// `model.onnx` -> `model.spec.json`.
pub fn spec_path(model: &Path) -> PathBuf {
    let stem = model.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    model.with_file_name(format!("{stem}.spec.json"))
}

impl ExportedModel {
    /// Open an exported graph through its sidecar.
    pub fn open(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(RegenError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "model file not found"),
            ));
        }
        let spec: ExportSpec = read_json(&spec_path(path))?;
        Ok(ExportedModel {
            path: path.to_path_buf(),
            spec,
        })
    }

    /// Load into the runtime for frames of `(width, height)`.
    pub fn session(&self, resolution: (usize, usize)) -> Result<OnnxSession> {
        self.spec.accepts(resolution)?;
        let (w, h) = resolution;
        OnnxSession::load(&self.path, Shape::new(1, 3, h, w), self.spec.precision)
    }
}

/// Write the generator as an ONNX graph plus the sidecar. With `resolution`
/// set the spatial dims are fixed; otherwise they are symbolic.
pub fn export_model<T: Scalar>(
    model: &StudentModel<T>,
    path: &Path,
    precision: Precision,
    resolution: Option<(usize, usize)>,
) -> Result<ExportedModel> {
    let spec = ExportSpec {
        format: "onnx".into(),
        opset: OPSET_VERSION,
        precision,
        input: TensorSpec::frame(INPUT_NAME, resolution, precision),
        output: TensorSpec::frame(OUTPUT_NAME, resolution, precision),
        downsampling_factor: model.config.arch.downsampling_factor(),
        arch: model.config.arch.clone(),
    };
    if let Some(r) = resolution {
        spec.accepts(r)?;
    }
    let mut g = GraphBuilder::new(precision);
    let last = model.generator.export(&mut g, INPUT_NAME);
    let dims: Vec<Dim> = spec
        .input
        .shape
        .iter()
        .zip(["batch", "channels", "height", "width"])
        .map(|(d, n)| d.map_or_else(|| Dim::Symbolic(n.into()), Dim::Fixed))
        .collect();
    let proto = g.finish("regen_student", INPUT_NAME, &dims, &last, OUTPUT_NAME, &dims);
    write_atomic(path, &onnx::encode(&proto))?;
    write_json(&spec_path(path), &spec)?;
    Ok(ExportedModel {
        path: path.to_path_buf(),
        spec,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub precision: Precision,
    pub tolerance: f64,
    /// Max absolute difference in `[-1, 1]` space, one per probe.
    pub max_abs_diff: Vec<f64>,
    pub passed: bool,
}

impl ParityReport {
    pub fn worst(&self) -> f64 {
        self.max_abs_diff.iter().copied().fold(0.0, f64::max)
    }
}

pub const MIN_PROBES: usize = 3;

/// Compare the exported graph against the in-framework generator on probes
/// of identical size.
pub fn parity_check<T: Scalar>(
    model: &StudentModel<T>,
    exported: &ExportedModel,
    probes: &[Tensor<T>],
    tolerance: f64,
) -> Result<ParityReport> {
    if probes.len() < MIN_PROBES {
        return Err(RegenError::invalid(format!(
            "parity needs at least {MIN_PROBES} probe frames, got {}",
            probes.len()
        )));
    }
    let s = probes[0].shape();
    let session = exported.session((s.w, s.h))?;
    let mut diffs = Vec::with_capacity(probes.len());
    for p in probes {
        if p.shape() != s {
            return Err(RegenError::Shape(format!(
                "probe frames must share one shape: {} vs {s}",
                p.shape()
            )));
        }
        let reference = model.generator.infer(p)?;
        let exported_out = session.run(&p.cast::<f32>())?;
        if exported_out.shape() != reference.shape() {
            return Err(RegenError::Shape(format!(
                "runtime output {} vs framework output {}",
                exported_out.shape(),
                reference.shape()
            )));
        }
        let diff = reference.cast::<f64>().max_abs_diff(&exported_out.cast::<f64>())?;
        diffs.push(diff);
    }
    let passed = diffs.iter().all(|&d| d <= tolerance);
    Ok(ParityReport {
        precision: exported.spec.precision,
        tolerance,
        max_abs_diff: diffs,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::TrainConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> StudentModel<f32> {
        let c = TrainConfig {
            resolution: (32, 32),
            arch: ArchConfig {
                ngf: 4,
                n_blocks: 1,
                ndf: 4,
                ..ArchConfig::tiny()
            },
            ..TrainConfig::tiny()
        };
        StudentModel::build(&c).unwrap()
    }

    fn probes(n: usize, w: usize, h: usize) -> Vec<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|_| Tensor::uniform(Shape::new(1, 3, h, w), -1.0, 1.0, &mut rng))
            .collect()
    }

    #[test]
    fn sidecar_sits_next_to_model() {
        assert_eq!(spec_path(Path::new("out/m.onnx")), Path::new("out/m.spec.json"));
    }

    #[test]
    fn fp32_export_round_trips_and_matches() {
        let dir = tempfile::tempdir().unwrap();
        let m = small();
        let path = dir.path().join("m.onnx");
        let ex = export_model(&m, &path, Precision::Fp32, Some((32, 32))).unwrap();
        let reopened = ExportedModel::open(&path).unwrap();
        assert_eq!(reopened, ex);
        assert_eq!(ex.spec.input.name, "frame");
        let r = parity_check(&m, &ex, &probes(3, 32, 32), 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn dynamic_export_accepts_other_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let m = small();
        let ex = export_model(&m, &dir.path().join("d.onnx"), Precision::Fp32, None).unwrap();
        assert_eq!(ex.spec.resolution(), None);
        let r = parity_check(&m, &ex, &probes(3, 48, 16), 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(ex.spec.accepts((30, 16)).is_err());
    }

    #[test]
    fn fp16_is_smaller_and_close() {
        let dir = tempfile::tempdir().unwrap();
        let m = small();
        let a = export_model(&m, &dir.path().join("a.onnx"), Precision::Fp32, Some((32, 32))).unwrap();
        let b = export_model(&m, &dir.path().join("b.onnx"), Precision::Fp16, Some((32, 32))).unwrap();
        let size = |p: &Path| std::fs::metadata(p).unwrap().len();
        assert!(size(&b.path) < size(&a.path));
        let r = parity_check(&m, &b, &probes(3, 32, 32), 2e-2).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn too_few_probes_or_wrong_size_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = small();
        let ex = export_model(&m, &dir.path().join("m.onnx"), Precision::Fp32, Some((32, 32))).unwrap();
        assert!(parity_check(&m, &ex, &probes(2, 32, 32), 1e-4).is_err());
        assert!(matches!(
            parity_check(&m, &ex, &probes(3, 16, 16), 1e-4),
            Err(RegenError::Shape(_))
        ));
    }
}
