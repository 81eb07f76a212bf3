use crate::error::{RegenError, Result};
use crate::onnx::{Attr, GraphBuilder, Precision};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn missing(layer: &str) -> RegenError {
    RegenError::Shape(format!("{layer} backward before forward"))
}

/// Reflect index `i` (possibly negative) into `0..n`, mirroring without repeating the edge.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

#[derive(Debug, Clone)]
pub struct ReflectionPad2d {
    pub pad: usize,
    input: Option<Shape>,
}

impl ReflectionPad2d {
    pub fn new(pad: usize) -> Self {
        ReflectionPad2d { pad, input: None }
    }

    pub fn output_shape(&self, s: Shape) -> Result<Shape> {
        if self.pad >= s.h || self.pad >= s.w {
            return Err(RegenError::Shape(format!(
                "reflection pad {} needs spatial dims larger than {s}",
                self.pad
            )));
        }
        Ok(Shape::new(s.n, s.c, s.h + 2 * self.pad, s.w + 2 * self.pad))
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let o = self.output_shape(s)?;
        let p = self.pad as isize;
        let mut out = Tensor::zeros(o);
        let xmap: Vec<usize> = (0..o.w).map(|ox| reflect(ox as isize - p, s.w)).collect();
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..o.h {
                    let iy = reflect(oy as isize - p, s.h);
                    for (ox, &ix) in xmap.iter().enumerate() {
                        *out.at_mut(n, c, oy, ox) = x.at(n, c, iy, ix);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input = Some(x.shape());
        self.infer(x)
    }

    pub fn backward<T: Scalar>(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.input.ok_or_else(|| missing("reflection pad"))?;
        let o = self.output_shape(s)?;
        grad.expect_shape(o)?;
        let p = self.pad as isize;
        let mut dx = Tensor::zeros(s);
        let xmap: Vec<usize> = (0..o.w).map(|ox| reflect(ox as isize - p, s.w)).collect();
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..o.h {
                    let iy = reflect(oy as isize - p, s.h);
                    for (ox, &ix) in xmap.iter().enumerate() {
                        *dx.at_mut(n, c, iy, ix) += grad.at(n, c, oy, ox);
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn export(&self, g: &mut GraphBuilder, input: &str) -> String {
        let p = self.pad as i64;
        let pads = g.int64s("pads", &[0, 0, p, p, 0, 0, p, p]);
        g.node("Pad", &[input, &pads], vec![("mode", Attr::Str("reflect"))])
    }
}

/// Per-sample, per-channel normalization without affine parameters.
#[derive(Debug, Clone)]
pub struct InstanceNorm2d<T: Scalar> {
    pub eps: f64,
    // normalized output and 1/sigma per (n, c)
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> InstanceNorm2d<T> {
    pub fn new() -> Self {
        InstanceNorm2d {
            eps: 1e-5,
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        let s = x.shape();
        let plane = s.plane();
        let mut y = x.clone();
        let mut inv = Vec::with_capacity(s.n * s.c);
        let eps = T::from_f64_lossy(self.eps);
        let count = T::from_usize_lossy(plane);
        for chunk in y.data_mut().chunks_mut(plane) {
            let mean = chunk.iter().copied().sum::<T>() / count;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let r = T::one() / (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv.push(r);
        }
        (y, inv)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.normalize(x).0)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, inv) = self.normalize(x);
        self.cache = Some((y.clone(), inv));
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, inv) = self.cache.as_ref().ok_or_else(|| missing("instance norm"))?;
        grad.expect_shape(y.shape())?;
        let plane = y.shape().plane();
        let count = T::from_usize_lossy(plane);
        let mut dx = grad.clone();
        for ((dchunk, ychunk), &r) in dx
            .data_mut()
            .chunks_mut(plane)
            .zip(y.data().chunks(plane))
            .zip(inv.iter())
        {
            let mean_g = dchunk.iter().copied().sum::<T>() / count;
            let mean_gy = dchunk
                .iter()
                .zip(ychunk)
                .map(|(&g, &yv)| g * yv)
                .sum::<T>()
                / count;
            for (d, &yv) in dchunk.iter_mut().zip(ychunk) {
                *d = r * (*d - mean_g - yv * mean_gy);
            }
        }
        Ok(dx)
    }

    /// Half-precision graphs compute the statistics in single precision:
    /// variance over a whole plane loses too much in fp16.
    pub fn export(&self, g: &mut GraphBuilder, input: &str, channels: usize) -> String {
        let ones = vec![T::one(); channels];
        let zeros = vec![T::zero(); channels];
        let half = g.precision() == Precision::Fp16;
        let x = if half {
            g.node("Cast", &[input], vec![("to", Attr::Int(Precision::Fp32.onnx_type() as i64))])
        } else {
            input.to_string()
        };
        let scale = g.weight_as(Precision::Fp32, "in_scale", &[channels], &ones);
        let bias = g.weight_as(Precision::Fp32, "in_bias", &[channels], &zeros);
        let y = g.node(
            "InstanceNormalization",
            &[&x, &scale, &bias],
            vec![("epsilon", Attr::Float(self.eps as f32))],
        );
        if half {
            g.node("Cast", &[&y], vec![("to", Attr::Int(Precision::Fp16.onnx_type() as i64))])
        } else {
            y
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Default for InstanceNorm2d<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
}

#[derive(Debug, Clone)]
pub struct Act<T: Scalar> {
    pub kind: Activation,
    // input for (leaky) relu, output for tanh
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Act<T> {
    pub fn new(kind: Activation) -> Self {
        Act { kind, cache: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        match self.kind {
            Activation::Relu => x.map(|v| v.max(T::zero())),
            Activation::LeakyRelu(a) => {
                let a = T::from_f64_lossy(a);
                x.map(|v| if v > T::zero() { v } else { v * a })
            }
            Activation::Tanh => x.map(|v| v.tanh()),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(match self.kind {
            Activation::Tanh => y.clone(),
            _ => x.clone(),
        });
        y
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.cache.as_ref().ok_or_else(|| missing("activation"))?;
        match self.kind {
            Activation::Relu => grad.zip_map(c, |g, x| if x > T::zero() { g } else { T::zero() }),
            Activation::LeakyRelu(a) => {
                let a = T::from_f64_lossy(a);
                grad.zip_map(c, |g, x| if x > T::zero() { g } else { g * a })
            }
            Activation::Tanh => grad.zip_map(c, |g, y| g * (T::one() - y * y)),
        }
    }

    pub fn export(&self, g: &mut GraphBuilder, input: &str) -> String {
        match self.kind {
            Activation::Relu => g.node("Relu", &[input], vec![]),
            Activation::LeakyRelu(a) => {
                g.node("LeakyRelu", &[input], vec![("alpha", Attr::Float(a as f32))])
            }
            Activation::Tanh => g.node("Tanh", &[input], vec![]),
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// 3x3 average pool, stride 2, padding 1, padded cells excluded from the mean.
#[derive(Debug, Clone, Default)]
pub struct AvgPoolDown {
    input: Option<Shape>,
}

impl AvgPoolDown {
    pub fn new() -> Self {
        AvgPoolDown { input: None }
    }

    pub fn output_shape(&self, s: Shape) -> Shape {
        Shape::new(s.n, s.c, (s.h - 1) / 2 + 1, (s.w - 1) / 2 + 1)
    }

    fn taps(o: usize, n: usize) -> std::ops::Range<usize> {
        let lo = (2 * o).saturating_sub(1);
        let hi = (2 * o + 2).min(n);
        lo..hi
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        let o = self.output_shape(s);
        let mut out = Tensor::zeros(o);
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..o.h {
                    let ys = Self::taps(oy, s.h);
                    for ox in 0..o.w {
                        let xs = Self::taps(ox, s.w);
                        let mut acc = T::zero();
                        for iy in ys.clone() {
                            for ix in xs.clone() {
                                acc += x.at(n, c, iy, ix);
                            }
                        }
                        let count = T::from_usize_lossy(ys.len() * xs.len());
                        *out.at_mut(n, c, oy, ox) = acc / count;
                    }
                }
            }
        }
        out
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input = Some(x.shape());
        self.infer(x)
    }

    pub fn backward<T: Scalar>(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.input.ok_or_else(|| missing("average pool"))?;
        let o = self.output_shape(s);
        grad.expect_shape(o)?;
        let mut dx = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..o.h {
                    let ys = Self::taps(oy, s.h);
                    for ox in 0..o.w {
                        let xs = Self::taps(ox, s.w);
                        let share =
                            grad.at(n, c, oy, ox) / T::from_usize_lossy(ys.len() * xs.len());
                        for iy in ys.clone() {
                            for ix in xs.clone() {
                                *dx.at_mut(n, c, iy, ix) += share;
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }

    pub fn export(&self, g: &mut GraphBuilder, input: &str) -> String {
        g.node(
            "AveragePool",
            &[input],
            vec![
                ("kernel_shape", Attr::Ints(vec![3, 3])),
                ("strides", Attr::Ints(vec![2, 2])),
                ("pads", Attr::Ints(vec![1, 1, 1, 1])),
                ("count_include_pad", Attr::Int(0)),
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 2, 2, 2), vec![1., 2., 3., 4., 10., 10., 10., 14.])
            .unwrap();
        let y = InstanceNorm2d::new().infer(&x).unwrap();
        for chunk in y.data().chunks(4) {
            let mean: f64 = chunk.iter().sum::<f64>() / 4.0;
            let var: f64 = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn avg_pool_excludes_padding() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1., 2., 3., 4.]).unwrap();
        let y = AvgPoolDown::new().infer(&x);
        // single output cell covers rows/cols {0,1}; padding not counted
        assert_eq!(y.data(), &[2.5]);
    }
}
