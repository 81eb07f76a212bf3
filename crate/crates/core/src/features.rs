//! Fixed image embeddings: hermetic random-feature networks and ONNX-backed
//! pretrained networks, behind one registry keyed by extractor id.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{RegenError, Result};
use crate::imageio::{read_image, resize_bilinear};
use crate::metrics::FeatureMatrix;
use crate::nn::{Conv2d, Layer, Sequential};
use crate::onnx::Precision;
use crate::runtime::OnnxSession;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const TOY_FIXED: &str = "toy-fixed";
pub const INCEPTION_POOL3: &str = "inception-v3-pool3";
pub const TOY_PATCH: &str = "toy-patch";
pub const VGG16: &str = "vgg16";

pub const INCEPTION_ENV: &str = "REGEN_INCEPTION_ONNX";
pub const VGG16_ENV: &str = "REGEN_VGG16_ONNX";

const TOY_FIXED_SEED: u64 = 0x5eed_f1d0;
const TOY_PATCH_SEED: u64 = 0x9a7c_4e11;
const TOY_INPUT: usize = 64;
const BATCH: usize = 16;

/// An image embedding with a fixed native input resolution.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Native `(width, height)`; inputs are bilinearly resized to it.
    fn input_size(&self) -> (usize, usize);
    /// Embed a batch at native resolution into a row-major `n x dim` buffer.
    fn embed_native(&self, batch: &Tensor<T>) -> Result<Vec<T>>;

    /// Embed a batch of `[-1, 1]` images of any size.
    fn embed(&self, batch: &Tensor<T>) -> Result<Vec<T>> {
        let (w, h) = self.input_size();
        self.embed_native(&resize_bilinear(batch, w, h))
    }
}

/// Untrained convolutional stack with fixed seeded weights: stride-2 3x3
/// convolutions with ReLU. Each stage's output is available for multi-layer
/// losses; the pooled last stage is the embedding.
#[derive(Debug, Clone)]
pub struct RandomFeatureNet<T: Scalar> {
    stages: Vec<Sequential<T>>,
}

impl<T: Scalar> RandomFeatureNet<T> {
    pub fn new(widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let stages = widths
            .iter()
            .map(|&cout| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let conv = Conv2d::new(cin, cout, 3, 2, 1, std, &mut rng);
                cin = cout;
                Sequential::new(vec![Layer::Conv(conv), Layer::relu()])
            })
            .collect();
        RandomFeatureNet { stages }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn out_channels(&self) -> usize {
        self.stages.iter().fold(3, |c, s| s.out_channels(c))
    }

    /// Activations after every stage, without caching.
    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for s in &self.stages {
            h = s.infer(&h)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Like [`features`](Self::features) but caches for [`backward`](Self::backward).
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for s in &mut self.stages {
            h = s.forward(&h)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Input gradient given a gradient for each stage's output. The weights
    /// are frozen and never receive gradients.
    pub fn backward(&mut self, stage_grads: &[Tensor<T>]) -> Result<Tensor<T>> {
        if stage_grads.len() != self.stages.len() {
            return Err(RegenError::Shape(format!(
                "{} stage gradients for {} stages",
                stage_grads.len(),
                self.stages.len()
            )));
        }
        let mut g = stage_grads[stage_grads.len() - 1].clone();
        for i in (0..self.stages.len()).rev() {
            g = self.stages[i].backward(&g, false)?;
            if i > 0 {
                g.add_assign(&stage_grads[i - 1]);
            }
        }
        Ok(g)
    }

    pub fn clear_cache(&mut self) {
        self.stages.iter_mut().for_each(Sequential::clear_cache);
    }
}

fn global_average_pool<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let s = t.shape();
    let inv = T::from_usize_lossy(s.plane()).recip();
    t.data()
        .chunks(s.plane())
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect()
}

/// Pooled random-feature embedding at a fixed square input size.
#[derive(Debug, Clone)]
pub struct RandomProjection<T: Scalar> {
    id: String,
    net: RandomFeatureNet<T>,
    input: usize,
}

impl<T: Scalar> RandomProjection<T> {
    pub fn new(id: impl Into<String>, seed: u64, input: usize) -> Self {
        RandomProjection {
            id: id.into(),
            net: RandomFeatureNet::new(&[16, 32, 64], seed),
            input,
        }
    }

    pub fn toy_fixed() -> Self {
        Self::new(TOY_FIXED, TOY_FIXED_SEED, TOY_INPUT)
    }

    pub fn toy_patch() -> Self {
        Self::new(TOY_PATCH, TOY_PATCH_SEED, TOY_INPUT)
    }
}

impl<T: Scalar> FeatureExtractor<T> for RandomProjection<T> {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.net.out_channels()
    }

    fn input_size(&self) -> (usize, usize) {
        (self.input, self.input)
    }

    fn embed_native(&self, batch: &Tensor<T>) -> Result<Vec<T>> {
        let feats = self.net.features(batch)?;
        Ok(global_average_pool(feats.last().expect("at least one stage")))
    }
}

/// How an ONNX classifier expects its `[-1, 1]` input to be mapped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputNorm {
    /// Pass `[-1, 1]` through unchanged.
    Symmetric,
    /// `[0, 1]` then per-channel ImageNet mean/std.
    ImageNet,
}

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Pooled activations of a pretrained network loaded from an ONNX file.
#[derive(Debug)]
pub struct OnnxExtractor {
    id: String,
    session: OnnxSession,
    norm: InputNorm,
    dim: usize,
}

impl OnnxExtractor {
    /// Loads the graph for batch size 1 and probes its output width. When
    /// `expect_dim` is given, any other width is an error.
    pub fn load(
        id: impl Into<String>,
        path: &Path,
        input: usize,
        norm: InputNorm,
        expect_dim: Option<usize>,
    ) -> Result<Self> {
        let id = id.into();
        let session = OnnxSession::load(path, Shape::new(1, 3, input, input), Precision::Fp32)?;
        let probe = session.run(&Tensor::zeros(session.input_shape()))?;
        let dim = probe.len();
        if let Some(want) = expect_dim {
            if dim != want {
                return Err(RegenError::Shape(format!(
                    "extractor {id} from {} yields {dim}-D features, expected {want}",
                    path.display()
                )));
            }
        }
        Ok(OnnxExtractor {
            id,
            session,
            norm,
            dim,
        })
    }

    fn prepare(&self, image: &[f32]) -> Vec<f32> {
        match self.norm {
            InputNorm::Symmetric => image.to_vec(),
            InputNorm::ImageNet => {
                let plane = image.len() / 3;
                image
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let c = i / plane;
                        ((v + 1.0) * 0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]
                    })
                    .collect()
            }
        }
    }
}

impl<T: Scalar> FeatureExtractor<T> for OnnxExtractor {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn input_size(&self) -> (usize, usize) {
        let s = self.session.input_shape();
        (s.w, s.h)
    }

    fn embed_native(&self, batch: &Tensor<T>) -> Result<Vec<T>> {
        let single = self.session.input_shape();
        let batch: Tensor<f32> = batch.cast();
        let mut out = Vec::with_capacity(batch.shape().n * self.dim);
        for i in 0..batch.shape().n {
            let x = Tensor::from_vec(single, self.prepare(batch.sample(i)))?;
            let y = self.session.run(&x)?;
            out.extend(y.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Ok(out)
    }
}

/// Locations of pretrained ONNX networks; unset entries fall back to the
/// corresponding environment variable.
#[derive(Debug, Clone, Default)]
pub struct ExtractorPaths {
    pub inception: Option<PathBuf>,
    pub vgg16: Option<PathBuf>,
}

impl ExtractorPaths {
    fn resolve(explicit: &Option<PathBuf>, env: &str, id: &str) -> Result<PathBuf> {
        explicit
            .clone()
            .or_else(|| std::env::var_os(env).map(PathBuf::from))
            .ok_or_else(|| {
                RegenError::invalid(format!(
                    "extractor {id} needs an ONNX file; pass its path or set {env}"
                ))
            })
    }
}

pub const REGISTERED: [&str; 4] = [INCEPTION_POOL3, TOY_FIXED, TOY_PATCH, VGG16];

/// Look up an extractor by id.
pub fn extractor<T: Scalar>(id: &str, paths: &ExtractorPaths) -> Result<Box<dyn FeatureExtractor<T>>> {
    Ok(match id {
        TOY_FIXED => Box::new(RandomProjection::<T>::toy_fixed()),
        TOY_PATCH => Box::new(RandomProjection::<T>::toy_patch()),
        INCEPTION_POOL3 => {
            let path = ExtractorPaths::resolve(&paths.inception, INCEPTION_ENV, id)?;
            Box::new(OnnxExtractor::load(id, &path, 299, InputNorm::Symmetric, Some(2048))?)
        }
        VGG16 => {
            let path = ExtractorPaths::resolve(&paths.vgg16, VGG16_ENV, id)?;
            Box::new(OnnxExtractor::load(id, &path, 224, InputNorm::ImageNet, None)?)
        }
        other => return Err(RegenError::UnknownExtractor(other.to_string())),
    })
}

/// Embed in-memory images (each `1 x 3 x h x w`), one row per image in order.
pub fn extract_tensors<T: Scalar>(
    images: &[Tensor<T>],
    extractor: &dyn FeatureExtractor<T>,
) -> Result<FeatureMatrix<T>> {
    if images.is_empty() {
        return Err(RegenError::invalid("cannot extract features from an empty image set"));
    }
    let (w, h) = extractor.input_size();
    let mut data = Vec::with_capacity(images.len() * extractor.dim());
    for chunk in images.chunks(BATCH) {
        let resized: Vec<Tensor<T>> = chunk.iter().map(|t| resize_bilinear(t, w, h)).collect();
        data.extend(extractor.embed_native(&Tensor::stack(&resized)?)?);
    }
    FeatureMatrix::new(images.len(), extractor.dim(), data, extractor.id())
}

/// Decode and embed image files, one row per path in order.
pub fn extract_features<T: Scalar>(
    paths: &[PathBuf],
    extractor: &dyn FeatureExtractor<T>,
) -> Result<FeatureMatrix<T>> {
    if paths.is_empty() {
        return Err(RegenError::invalid("cannot extract features from an empty image set"));
    }
    let (w, h) = extractor.input_size();
    let mut data = Vec::with_capacity(paths.len() * extractor.dim());
    for chunk in paths.chunks(BATCH) {
        let resized = chunk
            .iter()
            .map(|p| Ok(resize_bilinear(&read_image::<T>(p)?, w, h)))
            .collect::<Result<Vec<_>>>()?;
        data.extend(extractor.embed_native(&Tensor::stack(&resized)?)?);
    }
    FeatureMatrix::new(paths.len(), extractor.dim(), data, extractor.id())
}

/// Image files (png/jpg/jpeg) directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| RegenError::io(dir, e))? {
        let path = entry.map_err(|e| RegenError::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
