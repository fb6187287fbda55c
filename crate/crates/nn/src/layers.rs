//! Parameter storage and the convolutional building blocks used by the
//! encoders, decoders and discriminators.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Graph, NnError, Real, Result, Tensor, Var};

/// Epsilon added to the variance in instance and adaptive instance norm.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered collection of named learnable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps handles created elsewhere; `vars[i]` stands for the i-th parameter.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(NnError::DuplicateParam(name));
        }
        self.params.push(Param { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Kaiming-style normal init with standard deviation `sqrt(2 / fan_in)`.
    pub fn add_kaiming<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on `g`; those accepted by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(&p.name) {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Binding { vars }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast() })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply<T: Real>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, T::from_f64_lossy(s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    None,
    Instance,
    /// Instance norm whose affine comes from an external style vector.
    Adaptive,
    /// Layer norm with a learned per-channel affine.
    Layer { scale: ParamId, bias: ParamId },
}

impl Norm {
    /// Layer norm with its affine initialized to the identity.
    pub fn layer<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let scale = store.add(format!("{name}.ln.scale"), Tensor::full(&[channels], T::one()))?;
        let bias = store.add_zeros(format!("{name}.ln.bias"), &[channels])?;
        Ok(Norm::Layer { scale, bias })
    }
}

/// Per-channel standardization over spatial dims followed by `scale * x + bias`.
pub fn adaptive_instance_norm<T: Real>(g: &mut Graph<T>, x: Var, scale: Var, bias: Var) -> Result<Var> {
    let n = g.instance_norm(x, T::from_f64_lossy(NORM_EPS))?;
    g.channel_affine(n, scale, bias)
}

/// Reflection-padded square convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_kaiming(format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], fan_in, rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), &[out_channels])?;
        Ok(Self { weight, bias, in_channels, out_channels, kernel, stride, pad })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), p.var(self.bias), self.stride, self.pad)
    }

    /// Output spatial extent for an input extent `n`.
    pub fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_kaiming(format!("{name}.weight"), &[out_features, in_features], in_features, rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), &[out_features])?;
        Ok(Self { weight, bias, in_features, out_features })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Affine parameters handed to an adaptive norm layer.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveAffine {
    pub scale: Var,
    pub bias: Var,
}

/// Convolution, optional normalization and activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Norm,
    pub activation: Activation,
}

impl ConvBlock {
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        x: Var,
        affine: Option<AdaptiveAffine>,
    ) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = match self.norm {
            Norm::None => y,
            Norm::Instance => g.instance_norm(y, T::from_f64_lossy(NORM_EPS))?,
            Norm::Adaptive => {
                let a = affine.ok_or_else(|| NnError::Shape("adaptive norm needs style affine parameters".into()))?;
                adaptive_instance_norm(g, y, a.scale, a.bias)?
            }
            Norm::Layer { scale, bias } => {
                let n = g.layer_norm(y, T::from_f64_lossy(NORM_EPS))?;
                g.channel_affine(n, p.var(scale), p.var(bias))?
            }
        };
        Ok(self.activation.apply(g, y))
    }
}

/// `x + norm(conv(relu(norm(conv(x)))))` with 3x3 convolutions.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub first: ConvBlock,
    pub second: ConvBlock,
}

impl ResBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        norm: Norm,
        rng: &mut R,
    ) -> Result<Self> {
        let first = ConvBlock {
            conv: Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, 1, rng)?,
            norm,
            activation: Activation::Relu,
        };
        let second = ConvBlock {
            conv: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, 1, rng)?,
            norm,
            activation: Activation::None,
        };
        Ok(Self { first, second })
    }

    pub fn channels(&self) -> usize {
        self.first.conv.out_channels
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Binding,
        x: Var,
        affine: Option<[AdaptiveAffine; 2]>,
    ) -> Result<Var> {
        let h = self.first.forward(g, p, x, affine.map(|a| a[0]))?;
        let h = self.second.forward(g, p, h, affine.map(|a| a[1]))?;
        g.add(x, h)
    }
}

/// Fully connected layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.fc{i}"), d[0], d[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add_zeros("a", &[1]).unwrap();
        assert!(matches!(store.add_zeros("a", &[2]), Err(NnError::DuplicateParam(_))));
    }

    #[test]
    fn kaiming_init_has_fan_in_variance() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let id = store.add_kaiming("w", &[200, 50], 50, &mut rng).unwrap();
        let w = store.get(id);
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "{var}");
    }

    #[test]
    fn pointwise_identity_convolution() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 1, 1, 1, 1, 0, &mut rng).unwrap();
        store.get_mut(conv.weight).data_mut()[0] = 1.0;
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| true);
        let input = Tensor::from_fn(&[1, 3, 4], |i| i as f64 - 5.0);
        let x = g.constant(input.clone());
        let y = conv.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn zero_input_gives_bias_broadcast() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1, &mut rng).unwrap();
        store.get_mut(conv.bias).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| true);
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let y = conv.forward(&mut g, &p, x).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[3, 4, 4]);
        for c in 0..3 {
            assert!(v.channel(c).unwrap().iter().all(|&e| e == [0.5, -1.0, 2.0][c]));
        }
    }

    #[test]
    fn conv_output_extent_formula() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 1, 1, 4, 2, 1, &mut rng).unwrap();
        assert_eq!(conv.out_extent(256), 128);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let x = g.constant(Tensor::zeros(&[1, 9, 8]));
        let y = conv.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[1, conv.out_extent(9), conv.out_extent(8)]);
    }
}
