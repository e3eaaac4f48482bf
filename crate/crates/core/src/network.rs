//! Plain feed-forward conv stacks used as encoder and decoder, with a
//! hand-written reverse pass.

use crate::error::{Error, Result};
use crate::tensor::{
    apply_activation, conv2d_backward, conv2d_forward, upsample_nearest, upsample_nearest_backward,
    Activation, ConvLayer, Kernel4, Shape3, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Act(Activation),
    /// Nearest-neighbour upsampling by an integer factor.
    Upsample(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Encoder,
    Decoder,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::Decoder => "decoder",
        }
    }
}

/// An ordered stack of layers, with the shape it accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub role: Role,
    pub input_shape: Shape3,
    pub layers: Vec<Layer>,
}

/// Intermediate inputs recorded by [`NetworkSpec::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
}

impl NetworkSpec {
    pub fn new(role: Role, input_shape: Shape3, layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            role,
            input_shape,
            layers,
        };
        net.output_shape()?;
        Ok(net)
    }

    /// Walks the shape chain; errors name the first layer that does not fit.
    pub fn shape_chain(&self) -> Result<Vec<Shape3>> {
        let mut shapes = vec![self.input_shape];
        let mut s = self.input_shape;
        for layer in &self.layers {
            s = match layer {
                Layer::Conv(c) => c.output_shape(s)?,
                Layer::Act(_) => s,
                Layer::Upsample(f) => {
                    if *f == 0 {
                        return Err(Error::invalid("upsample factor must be >= 1"));
                    }
                    Shape3::new(s.c, s.h * f, s.w * f)
                }
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Shape3> {
        Ok(*self.shape_chain()?.last().expect("chain has the input"))
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn conv_layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.conv_layers().map(|c| c.kernel.data().len()).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape {
            return Err(Error::shape("network input", self.input_shape, x.shape()));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = apply_layer(layer, &h)?;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        if x.shape() != self.input_shape {
            return Err(Error::shape("network input", self.input_shape, x.shape()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let next = apply_layer(layer, &h)?;
            inputs.push(h);
            h = next;
        }
        Ok((h, ForwardCache { inputs }))
    }

    /// Back-propagates `grad_out`; returns the input gradient and one kernel
    /// gradient per conv layer, in layer order.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Kernel4>)> {
        let mut g = grad_out.clone();
        let mut kernel_grads = Vec::new();
        for (layer, input) in self.layers.iter().zip(&cache.inputs).rev() {
            g = match layer {
                Layer::Conv(c) => {
                    let (gx, gk) = conv2d_backward(input, c, &g)?;
                    kernel_grads.push(gk);
                    gx
                }
                Layer::Act(a) => {
                    let data = input
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &gy)| gy * a.derivative(x))
                        .collect();
                    Tensor::new(input.shape(), data)?
                }
                Layer::Upsample(f) => upsample_nearest_backward(&g, *f),
            };
        }
        kernel_grads.reverse();
        Ok((g, kernel_grads))
    }

    /// All kernel weights, concatenated in layer order.
    pub fn params(&self) -> Vec<f64> {
        self.conv_layers().flat_map(|c| c.kernel.data().iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape("network parameters", self.param_count(), params.len()));
        }
        let mut off = 0;
        for c in self.conv_layers_mut() {
            let d = c.kernel.data_mut();
            d.copy_from_slice(&params[off..off + d.len()]);
            off += d.len();
        }
        Ok(())
    }

    /// Total spatial downsampling of the stack (input height / output height).
    pub fn downsample_factor(&self) -> Result<usize> {
        let out = self.output_shape()?;
        if !self.input_shape.h.is_multiple_of(out.h) || !self.input_shape.w.is_multiple_of(out.w) {
            return Err(Error::invalid("network does not downsample by an integer factor"));
        }
        let fh = self.input_shape.h / out.h;
        let fw = self.input_shape.w / out.w;
        if fh != fw {
            return Err(Error::invalid("unequal downsampling on height and width"));
        }
        Ok(fh)
    }
}

fn apply_layer(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Conv(c) => conv2d_forward(x, c),
        Layer::Act(a) => {
            let y = apply_activation(x, *a);
            Tensor::new(y.shape(), y.into_data())
        }
        Layer::Upsample(f) => Ok(upsample_nearest(x, *f)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        let k1 = Kernel4::new(2, 1, 2, 2, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.6, -0.1]).unwrap();
        let k2 = Kernel4::new(1, 2, 1, 1, vec![0.7, -1.1]).unwrap();
        NetworkSpec::new(
            Role::Encoder,
            Shape3::new(1, 4, 4),
            vec![
                Layer::Conv(ConvLayer::new(k1, (2, 2), (0, 0)).unwrap()),
                Layer::Act(Activation::Swish),
                Layer::Upsample(2),
                Layer::Conv(ConvLayer::new(k2, (1, 1), (0, 0)).unwrap()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn shape_chain_and_params() {
        let net = tiny();
        assert_eq!(net.output_shape().unwrap(), Shape3::new(1, 4, 4));
        assert_eq!(net.param_count(), 10);
        let mut n2 = net.clone();
        let p: Vec<f64> = (0..10).map(|i| i as f64).collect();
        n2.set_params(&p).unwrap();
        assert_eq!(n2.params(), p);
    }

    #[test]
    fn broken_chain_is_rejected() {
        let k = Kernel4::zeros(1, 1, 3, 3);
        let r = NetworkSpec::new(
            Role::Encoder,
            Shape3::new(1, 4, 4),
            vec![Layer::Conv(ConvLayer::new(k, (2, 2), (0, 0)).unwrap())],
        );
        assert!(matches!(r, Err(Error::Divisibility { .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = tiny();
        let x = Tensor::from_fn(Shape3::new(1, 4, 4), |_, i, j| ((i * 4 + j) as f64 * 0.37).sin());
        let w = Tensor::from_fn(Shape3::new(1, 4, 4), |_, i, j| ((i + 2 * j) as f64 * 0.21).cos());
        let obj = |n: &NetworkSpec, x: &Tensor| -> f64 {
            n.forward(x).unwrap().data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.forward_cached(&x).unwrap();
        let (gx, gk) = net.backward(&cache, &w).unwrap();
        let h = 1e-6;
        for idx in 0..16 {
            let mut d = x.data().to_vec();
            d[idx] += h;
            let xp = Tensor::new(x.shape(), d.clone()).unwrap();
            d[idx] -= 2.0 * h;
            let xm = Tensor::new(x.shape(), d).unwrap();
            let fd = (obj(&net, &xp) - obj(&net, &xm)) / (2.0 * h);
            assert!((fd - gx.data()[idx]).abs() < 1e-7, "input {idx}");
        }
        let flat: Vec<f64> = gk.iter().flat_map(|k| k.data().iter().copied()).collect();
        let p0 = net.params();
        for idx in 0..p0.len() {
            let mut np = net.clone();
            let mut p = p0.clone();
            p[idx] += h;
            np.set_params(&p).unwrap();
            let fp = obj(&np, &x);
            p[idx] -= 2.0 * h;
            np.set_params(&p).unwrap();
            let fm = obj(&np, &x);
            assert!(((fp - fm) / (2.0 * h) - flat[idx]).abs() < 1e-7, "param {idx}");
        }
    }
}
