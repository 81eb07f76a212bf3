//! Coarse-to-fine generator and multi-scale PatchGAN discriminators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RegenError, Result};
use crate::nn::{AvgPoolDown, Conv2d, ConvTranspose2d, Layer, Param, Sequential};
use crate::onnx::GraphBuilder;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Width and depth hyperparameters of the student networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Width of the finest generator stage.
    pub ngf: usize,
    /// Stride-2 stages in the global generator.
    pub n_downsample: usize,
    /// Residual blocks at the global bottleneck.
    pub n_blocks: usize,
    /// Add a full-resolution local enhancer around a half-resolution global generator.
    pub local_enhancer: bool,
    pub n_local_blocks: usize,
    pub ndf: usize,
    /// Stride-2 layers per discriminator.
    pub n_layers_d: usize,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            ngf: 64,
            n_downsample: 4,
            n_blocks: 9,
            local_enhancer: false,
            n_local_blocks: 3,
            ndf: 64,
            n_layers_d: 3,
            init_std: 0.02,
        }
    }
}

impl ArchConfig {
    /// Small networks for desk-scale experiments.
    pub fn tiny() -> Self {
        ArchConfig {
            ngf: 16,
            n_downsample: 2,
            n_blocks: 3,
            local_enhancer: false,
            n_local_blocks: 2,
            ndf: 16,
            n_layers_d: 3,
            init_std: 0.02,
        }
    }

    /// Total spatial reduction of the generator; frame sides must be multiples of it.
    pub fn downsampling_factor(&self) -> usize {
        (1usize << self.n_downsample) * if self.local_enhancer { 2 } else { 1 }
    }

    /// Smallest frame side the generator accepts: the bottleneck must stay at
    /// least 2 pixels for its 3x3 reflection pads, and every 7x7 stem (full
    /// resolution, plus half resolution with the local enhancer) needs 4.
    pub fn min_frame_side(&self) -> usize {
        let stem = if self.local_enhancer { 8 } else { 4 };
        (2 * self.downsampling_factor()).max(stem)
    }

    fn global_width(&self) -> usize {
        if self.local_enhancer {
            self.ngf * 2
        } else {
            self.ngf
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ngf == 0 || self.ndf == 0 {
            return Err(RegenError::config("arch", "network widths must be positive"));
        }
        if self.n_layers_d == 0 {
            return Err(RegenError::config("arch.n_layers_d", "must be at least 1"));
        }
        if self.n_downsample > 8 {
            return Err(RegenError::config("arch.n_downsample", "at most 8 stride-2 stages"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(RegenError::config("arch.init_std", "must be positive"));
        }
        Ok(())
    }
}

/// Architecture description, used both to instantiate layers and to
/// reason about shapes and sizes without allocating weights.
#[derive(Debug, Clone, Copy)]
enum Block {
    Pad(usize),
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// 3x3 stride-2 transposed convolution that exactly doubles the size.
    Up { cin: usize, cout: usize },
    Norm,
    Relu,
    Leaky,
    Tanh,
    Pool,
    Res(usize),
}

impl Block {
    fn build<T: Scalar>(self, std: f64, rng: &mut ChaCha8Rng) -> Layer<T> {
        match self {
            Block::Pad(p) => Layer::reflection_pad(p),
            Block::Conv {
                cin,
                cout,
                k,
                stride,
                pad,
            } => Layer::Conv(Conv2d::new(cin, cout, k, stride, pad, std, rng)),
            Block::Up { cin, cout } => Layer::ConvTranspose(ConvTranspose2d::new(cin, cout, 3, 2, 1, 1, std, rng)),
            Block::Norm => Layer::instance_norm(),
            Block::Relu => Layer::relu(),
            Block::Leaky => Layer::leaky_relu(0.2),
            Block::Tanh => Layer::tanh(),
            Block::Pool => Layer::AvgPool(AvgPoolDown::new()),
            Block::Res(c) => Layer::Residual(Box::new(build(&res_body(c), std, rng))),
        }
    }

    fn output_shape(self, s: Shape) -> Result<Shape> {
        let conv = |s: Shape, cin: usize, cout: usize, k: usize, stride: usize, pad: usize| {
            if s.c != cin {
                return Err(RegenError::Shape(format!("expected {cin} channels, got {s}")));
            }
            let (h, w) = (s.h + 2 * pad, s.w + 2 * pad);
            if h < k || w < k {
                return Err(RegenError::Shape(format!("{s} too small for a {k}x{k} kernel")));
            }
            Ok(Shape::new(s.n, cout, (h - k) / stride + 1, (w - k) / stride + 1))
        };
        match self {
            Block::Pad(p) => {
                if s.h <= p || s.w <= p {
                    return Err(RegenError::Shape(format!("{s} too small to reflect-pad by {p}")));
                }
                Ok(Shape::new(s.n, s.c, s.h + 2 * p, s.w + 2 * p))
            }
            Block::Conv {
                cin,
                cout,
                k,
                stride,
                pad,
            } => conv(s, cin, cout, k, stride, pad),
            Block::Up { cin, cout } => {
                if s.c != cin {
                    return Err(RegenError::Shape(format!("expected {cin} channels, got {s}")));
                }
                Ok(Shape::new(s.n, cout, s.h * 2, s.w * 2))
            }
            Block::Pool => Ok(Shape::new(s.n, s.c, s.h.div_ceil(2), s.w.div_ceil(2))),
            Block::Res(c) => {
                let out = shape(&res_body(c), s)?;
                if out != s {
                    return Err(RegenError::Shape(format!("residual body maps {s} to {out}")));
                }
                Ok(s)
            }
            Block::Norm | Block::Relu | Block::Leaky | Block::Tanh => Ok(s),
        }
    }

    fn param_count(self) -> usize {
        match self {
            Block::Conv { cin, cout, k, .. } => cout * cin * k * k + cout,
            Block::Up { cin, cout } => cin * cout * 9 + cout,
            Block::Res(c) => res_body(c).iter().map(|b| b.param_count()).sum(),
            _ => 0,
        }
    }
}

fn res_body(c: usize) -> Vec<Block> {
    let conv = Block::Conv {
        cin: c,
        cout: c,
        k: 3,
        stride: 1,
        pad: 0,
    };
    vec![Block::Pad(1), conv, Block::Norm, Block::Relu, Block::Pad(1), conv, Block::Norm]
}

fn build<T: Scalar>(blocks: &[Block], std: f64, rng: &mut ChaCha8Rng) -> Sequential<T> {
    Sequential::new(blocks.iter().map(|b| b.build(std, rng)).collect())
}

fn shape(blocks: &[Block], mut s: Shape) -> Result<Shape> {
    for b in blocks {
        s = b.output_shape(s)?;
    }
    Ok(s)
}

/// Largest number of scalars alive at once while running `blocks` on `s`
/// (one layer's input and output, plus the skip input inside residuals).
fn peak(blocks: &[Block], mut s: Shape) -> Result<(Shape, usize)> {
    let mut best = 0;
    for b in blocks {
        let out = b.output_shape(s)?;
        let here = match b {
            Block::Res(c) => s.numel() + peak(&res_body(*c), s)?.1,
            _ => s.numel() + out.numel(),
        };
        best = best.max(here);
        s = out;
    }
    Ok((s, best))
}

fn count(blocks: &[Block]) -> usize {
    blocks.iter().map(|b| b.param_count()).sum()
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Block {
    Block::Conv {
        cin,
        cout,
        k,
        stride,
        pad,
    }
}

/// Stem, stride-2 stages, residual bottleneck and mirrored upsampling; the
/// optional head maps back to RGB through tanh.
fn global_blocks(ngf: usize, n_down: usize, n_blocks: usize, head: bool) -> Vec<Block> {
    let mut b = vec![Block::Pad(3), conv(3, ngf, 7, 1, 0), Block::Norm, Block::Relu];
    for i in 0..n_down {
        let c = ngf << i;
        b.extend([conv(c, c * 2, 3, 2, 1), Block::Norm, Block::Relu]);
    }
    b.extend(std::iter::repeat_n(Block::Res(ngf << n_down), n_blocks));
    for i in (1..=n_down).rev() {
        let c = ngf << i;
        b.extend([Block::Up { cin: c, cout: c / 2 }, Block::Norm, Block::Relu]);
    }
    if head {
        b.extend(rgb_head(ngf));
    }
    b
}

fn rgb_head(c: usize) -> [Block; 3] {
    [Block::Pad(3), conv(c, 3, 7, 1, 0), Block::Tanh]
}

fn local_down_blocks(ngf: usize) -> Vec<Block> {
    vec![
        Block::Pad(3),
        conv(3, ngf, 7, 1, 0),
        Block::Norm,
        Block::Relu,
        conv(ngf, ngf * 2, 3, 2, 1),
        Block::Norm,
        Block::Relu,
    ]
}

fn local_up_blocks(ngf: usize, n_blocks: usize) -> Vec<Block> {
    let mut b: Vec<Block> = std::iter::repeat_n(Block::Res(ngf * 2), n_blocks).collect();
    b.extend([Block::Up { cin: ngf * 2, cout: ngf }, Block::Norm, Block::Relu]);
    b.extend(rgb_head(ngf));
    b
}

/// PatchGAN classifier as a list of stages whose outputs feed feature matching;
/// the last stage emits the score map.
fn discriminator_stages(input_nc: usize, ndf: usize, n_layers: usize) -> Vec<Vec<Block>> {
    let mut stages = vec![vec![conv(input_nc, ndf, 4, 2, 2), Block::Leaky]];
    let mut nf = ndf;
    for _ in 1..n_layers {
        let prev = nf;
        nf = (nf * 2).min(512);
        stages.push(vec![conv(prev, nf, 4, 2, 2), Block::Norm, Block::Leaky]);
    }
    let prev = nf;
    nf = (nf * 2).min(512);
    stages.push(vec![conv(prev, nf, 4, 1, 2), Block::Norm, Block::Leaky]);
    stages.push(vec![conv(nf, 1, 4, 1, 2)]);
    stages
}

fn named<'a, T: Scalar>(prefix: &str, params: Vec<&'a Param<T>>) -> Vec<(String, &'a Param<T>)> {
    params
        .into_iter()
        .enumerate()
        .map(|(i, p)| (format!("{prefix}.{i}.{}", p.name), p))
        .collect()
}

fn named_mut<'a, T: Scalar>(prefix: &str, params: Vec<&'a mut Param<T>>) -> Vec<(String, &'a mut Param<T>)> {
    params
        .into_iter()
        .enumerate()
        .map(|(i, p)| (format!("{prefix}.{i}.{}", p.name), p))
        .collect()
}

#[derive(Debug, Clone)]
struct LocalEnhancer<T: Scalar> {
    pool: Sequential<T>,
    down: Sequential<T>,
    up: Sequential<T>,
}

/// Image-to-image generator with a final tanh, so outputs lie in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Generator<T: Scalar> {
    arch: ArchConfig,
    global: Sequential<T>,
    local: Option<LocalEnhancer<T>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let std = arch.init_std;
        let global = build(
            &global_blocks(arch.global_width(), arch.n_downsample, arch.n_blocks, !arch.local_enhancer),
            std,
            rng,
        );
        let local = arch.local_enhancer.then(|| LocalEnhancer {
            pool: build(&[Block::Pool], std, rng),
            down: build(&local_down_blocks(arch.ngf), std, rng),
            up: build(&local_up_blocks(arch.ngf, arch.n_local_blocks), std, rng),
        });
        Ok(Generator {
            arch: arch.clone(),
            global,
            local,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Output shape for `input`, computed without running the network.
    pub fn output_shape(arch: &ArchConfig, input: Shape) -> Result<Shape> {
        arch.validate()?;
        let f = arch.downsampling_factor();
        if input.c != 3 || !input.h.is_multiple_of(f) || !input.w.is_multiple_of(f) {
            return Err(RegenError::Shape(format!(
                "generator input must be 3-channel with sides divisible by {f}, got {input}"
            )));
        }
        let g = global_blocks(arch.global_width(), arch.n_downsample, arch.n_blocks, !arch.local_enhancer);
        if !arch.local_enhancer {
            return shape(&g, input);
        }
        let coarse = shape(&g, Block::Pool.output_shape(input)?)?;
        let fine = shape(&local_down_blocks(arch.ngf), input)?;
        if coarse != fine {
            return Err(RegenError::Shape(format!("global {coarse} vs local {fine}")));
        }
        shape(&local_up_blocks(arch.ngf, arch.n_local_blocks), fine)
    }

    /// Upper bound on the activation scalars alive at once during `infer`.
    pub fn peak_activation_len(arch: &ArchConfig, input: Shape) -> Result<usize> {
        Self::output_shape(arch, input)?;
        let g = global_blocks(arch.global_width(), arch.n_downsample, arch.n_blocks, !arch.local_enhancer);
        if !arch.local_enhancer {
            return Ok(peak(&g, input)?.1);
        }
        let pooled = Block::Pool.output_shape(input)?;
        let (coarse, pg) = peak(&g, pooled)?;
        let (fine, pd) = peak(&local_down_blocks(arch.ngf), input)?;
        let (_, pu) = peak(&local_up_blocks(arch.ngf, arch.n_local_blocks), fine)?;
        Ok((input.numel() + pooled.numel() + pg).max(coarse.numel() + pd).max(pu))
    }

    pub fn param_count(arch: &ArchConfig) -> usize {
        let g = count(&global_blocks(
            arch.global_width(),
            arch.n_downsample,
            arch.n_blocks,
            !arch.local_enhancer,
        ));
        if arch.local_enhancer {
            g + count(&local_down_blocks(arch.ngf)) + count(&local_up_blocks(arch.ngf, arch.n_local_blocks))
        } else {
            g
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        Self::output_shape(&self.arch, x.shape()).map(|_| ())
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        match &self.local {
            None => self.global.infer(x),
            Some(l) => {
                let mut h = self.global.infer(&l.pool.infer(x)?)?;
                h.add_assign(&l.down.infer(x)?);
                l.up.infer(&h)
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        match &mut self.local {
            None => self.global.forward(x),
            Some(l) => {
                let mut h = self.global.forward(&l.pool.forward(x)?)?;
                h.add_assign(&l.down.forward(x)?);
                l.up.forward(&h)
            }
        }
    }

    /// Accumulate parameter gradients for `grad` on the last forward output.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<()> {
        match &mut self.local {
            None => {
                self.global.backward(grad, true)?;
            }
            Some(l) => {
                let g = l.up.backward(grad, true)?;
                l.down.backward(&g, true)?;
                self.global.backward(&g, true)?;
            }
        }
        Ok(())
    }

    pub fn export(&self, g: &mut GraphBuilder, input: &str) -> String {
        match &self.local {
            None => self.global.export(g, input, 3),
            Some(l) => {
                let pooled = l.pool.export(g, input, 3);
                let coarse = self.global.export(g, &pooled, 3);
                let fine = l.down.export(g, input, 3);
                let sum = g.node("Add", &[&coarse, &fine], vec![]);
                l.up.export(g, &sum, self.arch.ngf * 2)
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = named("generator.global", self.global.params());
        if let Some(l) = &self.local {
            out.extend(named("generator.local_down", l.down.params()));
            out.extend(named("generator.local_up", l.up.params()));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = named_mut("generator.global", self.global.params_mut());
        if let Some(l) = &mut self.local {
            out.extend(named_mut("generator.local_down", l.down.params_mut()));
            out.extend(named_mut("generator.local_up", l.up.params_mut()));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn clear_cache(&mut self) {
        self.global.clear_cache();
        if let Some(l) = &mut self.local {
            l.pool.clear_cache();
            l.down.clear_cache();
            l.up.clear_cache();
        }
    }
}

/// One PatchGAN classifier over a concatenated (source, candidate) pair.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar> {
    stages: Vec<Sequential<T>>,
}

impl<T: Scalar> Discriminator<T> {
    fn new(ndf: usize, n_layers: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Discriminator {
            stages: discriminator_stages(6, ndf, n_layers)
                .iter()
                .map(|s| build(s, std, rng))
                .collect(),
        }
    }

    /// Every stage's output; the last is the score map.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let y = s.infer(out.last().unwrap_or(x))?;
            out.push(y);
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(self.stages.len());
        for s in &mut self.stages {
            let y = s.forward(out.last().unwrap_or(x))?;
            out.push(y);
        }
        Ok(out)
    }

    /// Input gradient from per-stage output gradients (`None` = zero).
    pub fn backward(&mut self, grads: &[Option<Tensor<T>>], accumulate: bool) -> Result<Tensor<T>> {
        let mut g: Option<Tensor<T>> = None;
        for (i, stage) in self.stages.iter_mut().enumerate().rev() {
            let mut total = g.take();
            if let Some(extra) = &grads[i] {
                match &mut total {
                    Some(t) => t.add_assign(extra),
                    None => total = Some(extra.clone()),
                }
            }
            let total = total.ok_or_else(|| RegenError::Shape("discriminator backward with no gradient".into()))?;
            g = Some(stage.backward(&total, accumulate)?);
        }
        g.ok_or_else(|| RegenError::Shape("empty discriminator".into()))
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.stages.iter_mut().flat_map(|s| s.params_mut()).collect()
    }

    fn clear_cache(&mut self) {
        self.stages.iter_mut().for_each(Sequential::clear_cache);
    }
}

/// `N` discriminators; scale `k` sees the pair average-pooled `k` times.
#[derive(Debug, Clone)]
pub struct MultiscaleDiscriminator<T: Scalar> {
    scales: Vec<Discriminator<T>>,
    pools: Vec<AvgPoolDown>,
}

/// Per-scale, per-stage activations.
pub type ScaleFeatures<T> = Vec<Vec<Tensor<T>>>;

impl<T: Scalar> MultiscaleDiscriminator<T> {
    pub fn new(arch: &ArchConfig, num_scales: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        if num_scales == 0 {
            return Err(RegenError::config("num_discriminator_scales", "must be at least 1"));
        }
        Ok(MultiscaleDiscriminator {
            scales: (0..num_scales)
                .map(|_| Discriminator::new(arch.ndf, arch.n_layers_d, arch.init_std, rng))
                .collect(),
            pools: (1..num_scales).map(|_| AvgPoolDown::new()).collect(),
        })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    /// Input shape seen by each scale for a pair of shape `pair`.
    pub fn input_shapes(num_scales: usize, pair: Shape) -> Vec<Shape> {
        let pool = AvgPoolDown::new();
        let mut shapes = vec![pair];
        for _ in 1..num_scales {
            let last = *shapes.last().expect("non-empty");
            shapes.push(pool.output_shape(last));
        }
        shapes
    }

    /// Check every scale can process a pair of shape `pair`.
    pub fn check_input(arch: &ArchConfig, num_scales: usize, pair: Shape) -> Result<()> {
        for s in Self::input_shapes(num_scales, pair) {
            let mut cur = s;
            for stage in discriminator_stages(6, arch.ndf, arch.n_layers_d) {
                cur = shape(&stage, cur)?;
            }
        }
        Ok(())
    }

    pub fn param_count(arch: &ArchConfig, num_scales: usize) -> usize {
        num_scales
            * discriminator_stages(6, arch.ndf, arch.n_layers_d)
                .iter()
                .map(|s| count(s))
                .sum::<usize>()
    }

    pub fn infer(&self, pair: &Tensor<T>) -> Result<ScaleFeatures<T>> {
        let mut x = pair.clone();
        let mut out = Vec::with_capacity(self.scales.len());
        for (k, d) in self.scales.iter().enumerate() {
            if k > 0 {
                x = self.pools[k - 1].infer(&x);
            }
            out.push(d.infer(&x)?);
        }
        Ok(out)
    }

    pub fn forward(&mut self, pair: &Tensor<T>) -> Result<ScaleFeatures<T>> {
        let mut x = pair.clone();
        let mut out = Vec::with_capacity(self.scales.len());
        for k in 0..self.scales.len() {
            if k > 0 {
                x = self.pools[k - 1].forward(&x);
            }
            out.push(self.scales[k].forward(&x)?);
        }
        Ok(out)
    }

    /// Gradient with respect to the pair, given gradients for any subset of
    /// the per-scale per-stage outputs of the last forward.
    pub fn backward(&mut self, grads: &[Vec<Option<Tensor<T>>>], accumulate: bool) -> Result<Tensor<T>> {
        if grads.len() != self.scales.len() {
            return Err(RegenError::Shape(format!(
                "{} gradient scales for {} discriminators",
                grads.len(),
                self.scales.len()
            )));
        }
        let mut g: Option<Tensor<T>> = None;
        for k in (0..self.scales.len()).rev() {
            let mut dx = self.scales[k].backward(&grads[k], accumulate)?;
            if let Some(from_coarser) = g.take() {
                dx.add_assign(&from_coarser);
            }
            g = Some(if k > 0 { self.pools[k - 1].backward(&dx)? } else { dx });
        }
        Ok(g.expect("at least one scale"))
    }

    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        self.scales
            .iter()
            .enumerate()
            .flat_map(|(k, d)| named(&format!("discriminator.{k}"), d.params()))
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.scales
            .iter_mut()
            .enumerate()
            .flat_map(|(k, d)| named_mut(&format!("discriminator.{k}"), d.params_mut()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn clear_cache(&mut self) {
        self.scales.iter_mut().for_each(Discriminator::clear_cache);
    }
}

/// Fresh generator and discriminators, deterministic in `seed`.
pub fn init_networks<T: Scalar>(
    arch: &ArchConfig,
    num_scales: usize,
    seed: u64,
) -> Result<(Generator<T>, MultiscaleDiscriminator<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Generator::new(arch, &mut rng)?;
    let d = MultiscaleDiscriminator::new(arch, num_scales, &mut rng)?;
    Ok((g, d))
}
