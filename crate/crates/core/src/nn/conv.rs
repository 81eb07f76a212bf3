use rand::Rng;

use crate::error::{RegenError, Result};
use crate::onnx::{Attr, GraphBuilder};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

use super::Param;

/// Geometry of a 2-D sliding window over a `c x h x w` image producing `oh x ow` positions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold `img` (`c x h x w`) into `col` (`c*k*k x oh*ow`).
pub(crate) fn im2col<T: Scalar>(img: &[T], win: &Window, col: &mut [T]) {
    let Window {
        c,
        h,
        w,
        k,
        stride,
        pad,
        oh,
        ow,
    } = *win;
    let cols = oh * ow;
    debug_assert_eq!(col.len(), c * k * k * cols);
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate `col` back into `img`.
pub(crate) fn col2im<T: Scalar>(col: &[T], win: &Window, img: &mut [T]) {
    let Window {
        c,
        h,
        w,
        k,
        stride,
        pad,
        oh,
        ow,
    } = *win;
    let cols = oh * ow;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            line[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn init_normal<T: Scalar, R: Rng>(shape: Shape, std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, std, rng)
}

/// Zero-padded square convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let wshape = Shape::new(cout, cin, kernel, kernel);
        Conv2d {
            weight: Param::new("weight", init_normal(wshape, init_std, rng)),
            bias: Param::new("bias", Tensor::zeros(Shape::new(1, cout, 1, 1))),
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape().n
    }

    fn window(&self, input: Shape) -> Result<Window> {
        if input.c != self.in_channels() {
            return Err(RegenError::Shape(format!(
                "conv expects {} input channels, got {input}",
                self.in_channels()
            )));
        }
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        if input.h + 2 * p < k || input.w + 2 * p < k {
            return Err(RegenError::Shape(format!(
                "input {input} smaller than {k}x{k} kernel"
            )));
        }
        Ok(Window {
            c: input.c,
            h: input.h,
            w: input.w,
            k,
            stride: s,
            pad: p,
            oh: (input.h + 2 * p - k) / s + 1,
            ow: (input.w + 2 * p - k) / s + 1,
        })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let win = self.window(input)?;
        Ok(Shape::new(input.n, self.out_channels(), win.oh, win.ow))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let win = self.window(s)?;
        let cout = self.out_channels();
        let (rows, cols) = (win.rows(), win.cols());
        let mut out = Tensor::zeros(Shape::new(s.n, cout, win.oh, win.ow));
        let direct = self.kernel == 1 && self.stride == 1 && self.pad == 0;
        let mut col = if direct { Vec::new() } else { vec![T::zero(); rows * cols] };
        let bias = self.bias.value.data();
        for n in 0..s.n {
            let dst = out.sample_mut(n);
            for (oc, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(bias[oc]);
            }
            let b: &[T] = if direct {
                x.sample(n)
            } else {
                im2col(x.sample(n), &win, &mut col);
                &col
            };
            T::gemm(
                cout,
                rows,
                cols,
                T::one(),
                self.weight.value.data(),
                rows as isize,
                1,
                b,
                cols as isize,
                1,
                T::one(),
                dst,
                cols as isize,
                1,
            );
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>, accumulate: bool) -> Result<Tensor<T>> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| RegenError::Shape("conv backward before forward".into()))?;
        let s = x.shape();
        let win = self.window(s)?;
        let cout = self.out_channels();
        grad.expect_shape(Shape::new(s.n, cout, win.oh, win.ow))?;
        let (rows, cols) = (win.rows(), win.cols());
        let mut col = vec![T::zero(); rows * cols];
        let mut dcol = vec![T::zero(); rows * cols];
        let mut dx = Tensor::zeros(s);
        for n in 0..s.n {
            let g = grad.sample(n);
            if accumulate {
                im2col(x.sample(n), &win, &mut col);
                // dW += dY * col^T
                T::gemm(
                    cout,
                    cols,
                    rows,
                    T::one(),
                    g,
                    cols as isize,
                    1,
                    &col,
                    1,
                    cols as isize,
                    T::one(),
                    self.weight.grad.data_mut(),
                    rows as isize,
                    1,
                );
                let db = self.bias.grad.data_mut();
                for (oc, chunk) in g.chunks(cols).enumerate() {
                    db[oc] += chunk.iter().copied().sum::<T>();
                }
            }
            // dcol = W^T * dY
            T::gemm(
                rows,
                cout,
                cols,
                T::one(),
                self.weight.value.data(),
                1,
                rows as isize,
                g,
                cols as isize,
                1,
                T::zero(),
                &mut dcol,
                cols as isize,
                1,
            );
            col2im(&dcol, &win, dx.sample_mut(n));
        }
        Ok(dx)
    }

    pub fn export(&self, g: &mut GraphBuilder, input: &str) -> String {
        let w = g.tensor_weight("conv_w", &self.weight.value);
        let b = g.weight("conv_b", &[self.out_channels()], self.bias.value.data());
        let (k, s, p) = (self.kernel as i64, self.stride as i64, self.pad as i64);
        g.node(
            "Conv",
            &[input, &w, &b],
            vec![
                ("kernel_shape", Attr::Ints(vec![k, k])),
                ("strides", Attr::Ints(vec![s, s])),
                ("pads", Attr::Ints(vec![p, p, p, p])),
            ],
        )
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Transposed convolution (fractionally strided), weight layout `cin x cout x k x k`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_padding: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        output_padding: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let wshape = Shape::new(cin, cout, kernel, kernel);
        ConvTranspose2d {
            weight: Param::new("weight", init_normal(wshape, init_std, rng)),
            bias: Param::new("bias", Tensor::zeros(Shape::new(1, cout, 1, 1))),
            kernel,
            stride,
            pad,
            output_padding,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape().n
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape().c
    }

    /// The adjoint convolution window: output image as the "image", input as positions.
    fn window(&self, input: Shape) -> Result<Window> {
        if input.c != self.in_channels() {
            return Err(RegenError::Shape(format!(
                "transposed conv expects {} input channels, got {input}",
                self.in_channels()
            )));
        }
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let oh = ((input.h - 1) * s + k + self.output_padding)
            .checked_sub(2 * p)
            .ok_or_else(|| RegenError::Shape("transposed conv padding too large".into()))?;
        let ow = ((input.w - 1) * s + k + self.output_padding)
            .checked_sub(2 * p)
            .ok_or_else(|| RegenError::Shape("transposed conv padding too large".into()))?;
        Ok(Window {
            c: self.out_channels(),
            h: oh,
            w: ow,
            k,
            stride: s,
            pad: p,
            oh: input.h,
            ow: input.w,
        })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let win = self.window(input)?;
        Ok(Shape::new(input.n, self.out_channels(), win.h, win.w))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let win = self.window(s)?;
        let (cin, cout) = (self.in_channels(), self.out_channels());
        let (rows, cols) = (win.rows(), win.cols());
        let mut out = Tensor::zeros(Shape::new(s.n, cout, win.h, win.w));
        let mut col = vec![T::zero(); rows * cols];
        let bias = self.bias.value.data();
        let plane = win.h * win.w;
        for n in 0..s.n {
            // col = W^T * x, W viewed as cin x (cout*k*k)
            T::gemm(
                rows,
                cin,
                cols,
                T::one(),
                self.weight.value.data(),
                1,
                rows as isize,
                x.sample(n),
                cols as isize,
                1,
                T::zero(),
                &mut col,
                cols as isize,
                1,
            );
            let dst = out.sample_mut(n);
            for (oc, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(bias[oc]);
            }
            col2im(&col, &win, dst);
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>, accumulate: bool) -> Result<Tensor<T>> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| RegenError::Shape("transposed conv backward before forward".into()))?;
        let s = x.shape();
        let win = self.window(s)?;
        let (cin, cout) = (self.in_channels(), self.out_channels());
        grad.expect_shape(Shape::new(s.n, cout, win.h, win.w))?;
        let (rows, cols) = (win.rows(), win.cols());
        let mut dcol = vec![T::zero(); rows * cols];
        let mut dx = Tensor::zeros(s);
        let plane = win.h * win.w;
        for n in 0..s.n {
            let g = grad.sample(n);
            im2col(g, &win, &mut dcol);
            // dx = W * dcol
            T::gemm(
                cin,
                rows,
                cols,
                T::one(),
                self.weight.value.data(),
                rows as isize,
                1,
                &dcol,
                cols as isize,
                1,
                T::zero(),
                dx.sample_mut(n),
                cols as isize,
                1,
            );
            if accumulate {
                // dW += x * dcol^T
                T::gemm(
                    cin,
                    cols,
                    rows,
                    T::one(),
                    x.sample(n),
                    cols as isize,
                    1,
                    &dcol,
                    1,
                    cols as isize,
                    T::one(),
                    self.weight.grad.data_mut(),
                    rows as isize,
                    1,
                );
                let db = self.bias.grad.data_mut();
                for (oc, chunk) in g.chunks(plane).enumerate() {
                    db[oc] += chunk.iter().copied().sum::<T>();
                }
            }
        }
        Ok(dx)
    }

    pub fn export(&self, g: &mut GraphBuilder, input: &str) -> String {
        let w = g.tensor_weight("convt_w", &self.weight.value);
        let b = g.weight("convt_b", &[self.out_channels()], self.bias.value.data());
        let (k, s, p, op) = (
            self.kernel as i64,
            self.stride as i64,
            self.pad as i64,
            self.output_padding as i64,
        );
        g.node(
            "ConvTranspose",
            &[input, &w, &b],
            vec![
                ("kernel_shape", Attr::Ints(vec![k, k])),
                ("strides", Attr::Ints(vec![s, s])),
                ("pads", Attr::Ints(vec![p, p, p, p])),
                ("output_padding", Attr::Ints(vec![op, op])),
            ],
        )
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
