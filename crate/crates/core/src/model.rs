//! Encoders, decoders and discriminators for both domains.

use rand::Rng;
use timbre_nn::{
    Activation, AdaptiveAffine, Binding, Conv2d, ConvBlock, Graph, Linear, Mlp, Norm, ParamStore, Real, ResBlock,
    Tensor, Var,
};

use crate::{Result, TimbreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::X, Domain::Y];

    pub fn index(self) -> usize {
        match self {
            Domain::X => 0,
            Domain::Y => 1,
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Domain::X => "x",
            Domain::Y => "y",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = TimbreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Domain::X),
            "y" | "Y" => Ok(Domain::Y),
            _ => Err(TimbreError::Config(format!("unknown domain {s:?}, expected x or y"))),
        }
    }
}

/// Layer widths and counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_down: usize,
    pub n_res: usize,
    pub style_dim: usize,
    pub style_down: usize,
    pub mlp_hidden: usize,
    pub disc_layers: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_channels: 16,
            n_down: 2,
            n_res: 3,
            style_dim: 8,
            style_down: 4,
            mlp_hidden: 64,
            disc_layers: 4,
        }
    }
}

impl ArchConfig {
    pub fn content_channels(&self) -> usize {
        self.base_channels << self.n_down
    }

    /// Content code shape for an `[in_channels, h, w]` input.
    pub fn content_shape(&self, h: usize, w: usize) -> [usize; 3] {
        [self.content_channels(), h >> self.n_down, w >> self.n_down]
    }

    /// Smallest spatial extent every stride-2 stage can still reflect-pad.
    pub fn min_extent(&self) -> usize {
        let deepest = self.n_down.max(self.style_down).max(self.disc_layers);
        1usize << deepest
    }

    fn adain_len(&self) -> usize {
        self.n_res * 2 * 2 * self.content_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.style_dim == 0 || self.disc_layers == 0 {
            return Err(TimbreError::Config("architecture widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ContentEncoder {
    stem: ConvBlock,
    down: Vec<ConvBlock>,
    res: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
struct StyleEncoder {
    stem: ConvBlock,
    down: Vec<ConvBlock>,
    head: Linear,
}

#[derive(Debug, Clone)]
struct Decoder {
    mlp: Mlp,
    res: Vec<ResBlock>,
    up: Vec<ConvBlock>,
    out: ConvBlock,
}

#[derive(Debug, Clone)]
struct Discriminator {
    body: Vec<ConvBlock>,
    head: Conv2d,
}

#[derive(Debug, Clone)]
struct DomainNets {
    content: ContentEncoder,
    style: StyleEncoder,
    decoder: Decoder,
    disc: Discriminator,
}

fn block<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    norm: Norm,
    activation: Activation,
    rng: &mut R,
) -> Result<ConvBlock> {
    Ok(ConvBlock { conv: Conv2d::new(store, name, cin, cout, k, stride, k / 2, rng)?, norm, activation })
}

fn down_block<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    norm: Norm,
    activation: Activation,
    rng: &mut R,
) -> Result<ConvBlock> {
    Ok(ConvBlock { conv: Conv2d::new(store, name, cin, cout, 4, 2, 1, rng)?, norm, activation })
}

impl DomainNets {
    fn new<T: Real, R: Rng + ?Sized>(
        arch: &ArchConfig,
        d: Domain,
        gen: &mut ParamStore<T>,
        dis: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let p = d.tag();
        let (cin, base) = (arch.in_channels, arch.base_channels);
        let relu = Activation::Relu;

        let stem = block(gen, &format!("{p}.content.stem"), cin, base, 7, 1, Norm::Instance, relu, rng)?;
        let mut ch = base;
        let mut down = Vec::new();
        for i in 0..arch.n_down {
            down.push(down_block(gen, &format!("{p}.content.down{i}"), ch, ch * 2, Norm::Instance, relu, rng)?);
            ch *= 2;
        }
        let res = (0..arch.n_res)
            .map(|i| ResBlock::new(gen, &format!("{p}.content.res{i}"), ch, Norm::Instance, rng))
            .collect::<timbre_nn::Result<_>>()?;
        let content = ContentEncoder { stem, down, res };

        let s_stem = block(gen, &format!("{p}.style.stem"), cin, base, 7, 1, Norm::None, relu, rng)?;
        let mut sch = base;
        let mut s_down = Vec::new();
        for i in 0..arch.style_down {
            let next = (sch * 2).min(arch.content_channels());
            s_down.push(down_block(gen, &format!("{p}.style.down{i}"), sch, next, Norm::None, relu, rng)?);
            sch = next;
        }
        let head = Linear::new(gen, &format!("{p}.style.fc"), sch, arch.style_dim, rng)?;
        let style = StyleEncoder { stem: s_stem, down: s_down, head };

        let mlp = Mlp::new(
            gen,
            &format!("{p}.decoder.mlp"),
            &[arch.style_dim, arch.mlp_hidden, arch.mlp_hidden, arch.adain_len()],
            rng,
        )?;
        let d_res = (0..arch.n_res)
            .map(|i| ResBlock::new(gen, &format!("{p}.decoder.res{i}"), ch, Norm::Adaptive, rng))
            .collect::<timbre_nn::Result<_>>()?;
        let mut up = Vec::new();
        let mut uch = ch;
        for i in 0..arch.n_down {
            let name = format!("{p}.decoder.up{i}");
            let norm = Norm::layer(gen, &name, uch / 2)?;
            up.push(block(gen, &name, uch, uch / 2, 5, 1, norm, relu, rng)?);
            uch /= 2;
        }
        let out = block(gen, &format!("{p}.decoder.out"), uch, cin, 7, 1, Norm::None, Activation::None, rng)?;
        let decoder = Decoder { mlp, res: d_res, up, out };

        let mut body = Vec::new();
        let mut dch = cin;
        for i in 0..arch.disc_layers {
            let next = base << i;
            body.push(down_block(dis, &format!("{p}.disc.conv{i}"), dch, next, Norm::None, Activation::LeakyRelu(0.2), rng)?);
            dch = next;
        }
        let head_conv = Conv2d::new(dis, &format!("{p}.disc.score"), dch, 1, 1, 1, 0, rng)?;
        let disc = Discriminator { body, head: head_conv };

        Ok(Self { content, style, decoder, disc })
    }
}

/// Content code and style vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodes<T> {
    pub content: Tensor<T>,
    pub style: Tensor<T>,
}

/// Both domains' encoders, decoders (in `gen`) and discriminators (in `disc`).
#[derive(Debug, Clone)]
pub struct Translator<T> {
    pub arch: ArchConfig,
    pub gen: ParamStore<T>,
    pub disc: ParamStore<T>,
    nets: [DomainNets; 2],
}

impl<T: Real> Translator<T> {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut gen = ParamStore::new();
        let mut disc = ParamStore::new();
        let x = DomainNets::new(&arch, Domain::X, &mut gen, &mut disc, rng)?;
        let y = DomainNets::new(&arch, Domain::Y, &mut gen, &mut disc, rng)?;
        Ok(Self { arch, gen, disc, nets: [x, y] })
    }

    pub fn cast<U: Real>(&self) -> Translator<U> {
        Translator { arch: self.arch, gen: self.gen.cast(), disc: self.disc.cast(), nets: self.nets.clone() }
    }

    /// Checks an `[in_channels, h, w]` input against the architecture.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = match *shape {
            [c, h, w] => {
                let m = self.arch.min_extent();
                c == self.arch.in_channels && h >= m && w >= m && h % m == 0 && w % m == 0
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(TimbreError::Shape(format!(
                "input {shape:?} must be [{}, h, w] with h and w multiples of {}",
                self.arch.in_channels,
                self.arch.min_extent()
            )))
        }
    }

    pub fn bind_all(&self, g: &mut Graph<T>, train_gen: bool, train_disc: bool) -> (Binding, Binding) {
        (self.gen.bind(g, |_| train_gen), self.disc.bind(g, |_| train_disc))
    }

    pub fn content_code(&self, g: &mut Graph<T>, p: &Binding, d: Domain, x: Var) -> Result<Var> {
        let net = &self.nets[d.index()].content;
        let mut h = net.stem.forward(g, p, x, None)?;
        for b in &net.down {
            h = b.forward(g, p, h, None)?;
        }
        for r in &net.res {
            h = r.forward(g, p, h, None)?;
        }
        Ok(h)
    }

    pub fn style_code(&self, g: &mut Graph<T>, p: &Binding, d: Domain, x: Var) -> Result<Var> {
        let net = &self.nets[d.index()].style;
        let mut h = net.stem.forward(g, p, x, None)?;
        for b in &net.down {
            h = b.forward(g, p, h, None)?;
        }
        let pooled = g.global_avg_pool(h)?;
        Ok(net.head.forward(g, p, pooled)?)
    }

    pub fn decode_vars(&self, g: &mut Graph<T>, p: &Binding, d: Domain, content: Var, style: Var) -> Result<Var> {
        let net = &self.nets[d.index()].decoder;
        if g.shape(style) != [self.arch.style_dim] {
            return Err(TimbreError::Shape(format!(
                "style code has shape {:?}, expected [{}]",
                g.shape(style),
                self.arch.style_dim
            )));
        }
        let params = net.mlp.forward(g, p, style)?;
        let ch = self.arch.content_channels();
        let affine = |g: &mut Graph<T>, k: usize| -> Result<AdaptiveAffine> {
            Ok(AdaptiveAffine { scale: g.slice(params, 2 * k * ch, ch)?, bias: g.slice(params, (2 * k + 1) * ch, ch)? })
        };
        let mut h = content;
        for (i, r) in net.res.iter().enumerate() {
            let a = [affine(g, 2 * i)?, affine(g, 2 * i + 1)?];
            h = r.forward(g, p, h, Some(a))?;
        }
        for b in &net.up {
            h = g.upsample2x(h)?;
            h = b.forward(g, p, h, None)?;
        }
        Ok(net.out.forward(g, p, h, None)?)
    }

    /// Patch score map `Q`.
    pub fn score(&self, g: &mut Graph<T>, p: &Binding, d: Domain, x: Var) -> Result<Var> {
        let net = &self.nets[d.index()].disc;
        let mut h = x;
        for b in &net.body {
            h = b.forward(g, p, h, None)?;
        }
        Ok(net.head.forward(g, p, h)?)
    }

    pub fn encode(&self, x: &Tensor<T>, d: Domain) -> Result<LatentCodes<T>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let (p, _) = self.bind_all(&mut g, false, false);
        let xv = g.constant(x.clone());
        let c = self.content_code(&mut g, &p, d, xv)?;
        let s = self.style_code(&mut g, &p, d, xv)?;
        Ok(LatentCodes { content: g.value(c).clone(), style: g.value(s).clone() })
    }

    pub fn decode(&self, codes: &LatentCodes<T>, d: Domain) -> Result<Tensor<T>> {
        let expect = self.arch.content_channels();
        match codes.content.shape() {
            [c, h, w] if *c == expect && *h > 0 && *w > 0 => {}
            s => return Err(TimbreError::Shape(format!("content code {s:?} must have {expect} channels"))),
        }
        let mut g = Graph::new();
        let (p, _) = self.bind_all(&mut g, false, false);
        let c = g.constant(codes.content.clone());
        let s = g.constant(codes.style.clone());
        let out = self.decode_vars(&mut g, &p, d, c, s)?;
        Ok(g.value(out).clone())
    }

    /// Content from `source`, decoded in the other domain with style `z`.
    pub fn translate(&self, x: &Tensor<T>, source: Domain, z: &[T]) -> Result<Tensor<T>> {
        self.check_style(z)?;
        let codes = self.encode(x, source)?;
        self.decode(&LatentCodes { content: codes.content, style: Tensor::new(&[z.len()], z.to_vec())? }, source.other())
    }

    /// One translation per value, with `z[dim]` replaced by that value.
    pub fn interpolate_style(
        &self,
        x: &Tensor<T>,
        source: Domain,
        z: &[T],
        dim: usize,
        values: &[T],
    ) -> Result<Vec<Tensor<T>>> {
        self.check_style(z)?;
        if dim >= self.arch.style_dim {
            return Err(TimbreError::Domain(format!("style dimension {dim} outside 0..{}", self.arch.style_dim)));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TimbreError::NonFinite("interpolation values".into()));
        }
        let content = self.encode(x, source)?.content;
        values
            .iter()
            .map(|&v| {
                let mut zz = z.to_vec();
                zz[dim] = v;
                let codes = LatentCodes { content: content.clone(), style: Tensor::new(&[zz.len()], zz)? };
                self.decode(&codes, source.other())
            })
            .collect()
    }

    fn check_style(&self, z: &[T]) -> Result<()> {
        if z.len() != self.arch.style_dim {
            return Err(TimbreError::Shape(format!("style vector has {} entries, expected {}", z.len(), self.arch.style_dim)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(TimbreError::NonFinite("style vector".into()));
        }
        Ok(())
    }
}
