//! Small convolutional network toolkit with explicit backward passes.
//!
//! Layers cache what they need during [`Layer::forward`]; [`Layer::infer`]
//! is the pure, cache-free path used at inference time. `backward` takes an
//! `accumulate` flag so a frozen network (perceptual extractor, or the
//! discriminator while the generator is being updated) can propagate input
//! gradients without touching its parameter gradients.

mod conv;
mod layers;
mod optim;

pub use conv::{Conv2d, ConvTranspose2d};
pub use layers::{Act, Activation, AvgPoolDown, InstanceNorm2d, ReflectionPad2d};
pub use optim::{Adam, AdamConfig};

pub(crate) use layers::reflect;

use crate::error::Result;
use crate::onnx::GraphBuilder;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: &'static str,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: &'static str, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { name, value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T: Scalar> {
    Conv(Conv2d<T>),
    ConvTranspose(ConvTranspose2d<T>),
    ReflectionPad(ReflectionPad2d),
    InstanceNorm(InstanceNorm2d<T>),
    Act(Act<T>),
    AvgPool(AvgPoolDown),
    Residual(Box<Sequential<T>>),
}

impl<T: Scalar> Layer<T> {
    pub fn relu() -> Self {
        Layer::Act(Act::new(Activation::Relu))
    }

    pub fn leaky_relu(slope: f64) -> Self {
        Layer::Act(Act::new(Activation::LeakyRelu(slope)))
    }

    pub fn tanh() -> Self {
        Layer::Act(Act::new(Activation::Tanh))
    }

    pub fn instance_norm() -> Self {
        Layer::InstanceNorm(InstanceNorm2d::new())
    }

    pub fn reflection_pad(pad: usize) -> Self {
        Layer::ReflectionPad(ReflectionPad2d::new(pad))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::ConvTranspose(l) => l.forward(x),
            Layer::ReflectionPad(l) => l.forward(x),
            Layer::InstanceNorm(l) => l.forward(x),
            Layer::Act(l) => Ok(l.forward(x)),
            Layer::AvgPool(l) => Ok(l.forward(x)),
            Layer::Residual(body) => {
                let mut y = body.forward(x)?;
                y.add_assign(x);
                Ok(y)
            }
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.infer(x),
            Layer::ConvTranspose(l) => l.infer(x),
            Layer::ReflectionPad(l) => l.infer(x),
            Layer::InstanceNorm(l) => l.infer(x),
            Layer::Act(l) => Ok(l.infer(x)),
            Layer::AvgPool(l) => Ok(l.infer(x)),
            Layer::Residual(body) => {
                let mut y = body.infer(x)?;
                y.add_assign(x);
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor<T>, accumulate: bool) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(grad, accumulate),
            Layer::ConvTranspose(l) => l.backward(grad, accumulate),
            Layer::ReflectionPad(l) => l.backward(grad),
            Layer::InstanceNorm(l) => l.backward(grad),
            Layer::Act(l) => l.backward(grad),
            Layer::AvgPool(l) => l.backward(grad),
            Layer::Residual(body) => {
                let mut dx = body.backward(grad, accumulate)?;
                dx.add_assign(grad);
                Ok(dx)
            }
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(l) => l.output_shape(input),
            Layer::ConvTranspose(l) => l.output_shape(input),
            Layer::ReflectionPad(l) => l.output_shape(input),
            Layer::InstanceNorm(_) | Layer::Act(_) => Ok(input),
            Layer::AvgPool(l) => Ok(l.output_shape(input)),
            Layer::Residual(body) => {
                let out = body.output_shape(input)?;
                if out != input {
                    return Err(crate::error::RegenError::Shape(format!(
                        "residual body maps {input} to {out}"
                    )));
                }
                Ok(out)
            }
        }
    }

    /// Emit ONNX nodes; `channels` is the channel count of `input`.
    pub fn export(&self, g: &mut GraphBuilder, input: &str, channels: usize) -> String {
        match self {
            Layer::Conv(l) => l.export(g, input),
            Layer::ConvTranspose(l) => l.export(g, input),
            Layer::ReflectionPad(l) => l.export(g, input),
            Layer::InstanceNorm(l) => l.export(g, input, channels),
            Layer::Act(l) => l.export(g, input),
            Layer::AvgPool(l) => l.export(g, input),
            Layer::Residual(body) => {
                let y = body.export(g, input, channels);
                g.node("Add", &[input, &y], vec![])
            }
        }
    }

    /// Channel count after this layer given `channels` in.
    pub fn out_channels(&self, channels: usize) -> usize {
        match self {
            Layer::Conv(l) => l.out_channels(),
            Layer::ConvTranspose(l) => l.out_channels(),
            Layer::Residual(body) => body.out_channels(channels),
            _ => channels,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(l) => l.params(),
            Layer::ConvTranspose(l) => l.params(),
            Layer::Residual(body) => body.params(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(l) => l.params_mut(),
            Layer::ConvTranspose(l) => l.params_mut(),
            Layer::Residual(body) => body.params_mut(),
            _ => Vec::new(),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.clear_cache(),
            Layer::ConvTranspose(l) => l.clear_cache(),
            Layer::Act(l) => l.clear_cache(),
            Layer::InstanceNorm(l) => l.clear_cache(),
            Layer::Residual(body) => body.clear_cache(),
            Layer::ReflectionPad(_) | Layer::AvgPool(_) => {}
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sequential<T: Scalar> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential { layers }
    }

    pub fn push(&mut self, layer: Layer<T>) {
        self.layers.push(layer);
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor<T>, accumulate: bool) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g, accumulate)?;
        }
        Ok(g)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.layers
            .iter()
            .try_fold(input, |s, l| l.output_shape(s))
    }

    pub fn out_channels(&self, channels: usize) -> usize {
        self.layers.iter().fold(channels, |c, l| l.out_channels(c))
    }

    pub fn export(&self, g: &mut GraphBuilder, input: &str, channels: usize) -> String {
        let mut name = input.to_string();
        let mut c = channels;
        for l in &self.layers {
            name = l.export(g, &name, c);
            c = l.out_channels(c);
        }
        name
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn clear_cache(&mut self) {
        for l in &mut self.layers {
            l.clear_cache();
        }
    }
}

pub fn param_count<'a, T: Scalar>(params: impl IntoIterator<Item = &'a Param<T>>) -> usize {
    params.into_iter().map(|p| p.value.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    /// Central finite differences on input and every parameter of a small stack.
    #[test]
    fn stack_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let body = Sequential::new(vec![
            Layer::reflection_pad(1),
            Layer::Conv(Conv2d::new(2, 2, 3, 1, 0, 0.4, &mut rng)),
            Layer::instance_norm(),
            Layer::relu(),
        ]);
        let mut net = Sequential::new(vec![
            Layer::reflection_pad(2),
            Layer::Conv(Conv2d::new(2, 2, 5, 1, 0, 0.3, &mut rng)),
            Layer::instance_norm(),
            Layer::leaky_relu(0.2),
            Layer::Residual(Box::new(body)),
            Layer::Conv(Conv2d::new(2, 3, 3, 2, 1, 0.3, &mut rng)),
            Layer::AvgPool(AvgPoolDown::new()),
            Layer::ConvTranspose(ConvTranspose2d::new(3, 2, 3, 2, 1, 1, 0.3, &mut rng)),
            Layer::tanh(),
        ]);
        let x = Tensor::uniform(Shape::new(1, 2, 8, 8), -1.0, 1.0, &mut rng);
        let y = net.forward(&x).unwrap();
        let w = Tensor::uniform(y.shape(), -1.0, 1.0, &mut rng);
        net.zero_grad();
        let dx = net.backward(&w, true).unwrap();

        let h = 1e-6;
        for i in [0, 17, 40, 63, 100, 127] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&net.infer(&xp).unwrap(), &w) - loss(&net.infer(&xm).unwrap(), &w)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "input {i}: {fd} vs {}", dx.data()[i]);
        }

        let grads: Vec<Tensor<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
        for (pi, g) in grads.iter().enumerate() {
            for j in [0, g.len() / 2, g.len() - 1] {
                let orig = net.params()[pi].value.data()[j];
                net.params_mut()[pi].value.data_mut()[j] = orig + h;
                let lp = loss(&net.infer(&x).unwrap(), &w);
                net.params_mut()[pi].value.data_mut()[j] = orig - h;
                let lm = loss(&net.infer(&x).unwrap(), &w);
                net.params_mut()[pi].value.data_mut()[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - g.data()[j]).abs() < 1e-6 * (1.0 + fd.abs()),
                    "param {pi}[{j}]: {fd} vs {}",
                    g.data()[j]
                );
            }
        }
    }

    #[test]
    fn frozen_backward_leaves_param_grads_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Sequential::<f32>::new(vec![Layer::Conv(Conv2d::new(1, 1, 3, 1, 1, 0.5, &mut rng))]);
        let x = Tensor::uniform(Shape::new(1, 1, 4, 4), -1.0, 1.0, &mut rng);
        let y = net.forward(&x).unwrap();
        net.zero_grad();
        let dx = net.backward(&Tensor::full(y.shape(), 1.0), false).unwrap();
        assert!(dx.max_abs() > 0.0);
        assert!(net.params().iter().all(|p| p.grad.max_abs() == 0.0));
    }
}
