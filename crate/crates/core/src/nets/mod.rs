//! The eight maps of the two translation cycles: domain-invariant encoders,
//! domain-specific (Gaussian) encoders, generators and patch discriminators,
//! one set per domain.
//!
//! Parameters live in a single [`ParamStore`]. Each training step binds the
//! store onto a fresh [`Graph`]; a parameter used by both cycles is bound once
//! and therefore shared by identity.

mod arch;
pub mod checkpoint;
mod params;

pub use arch::{ArchConfig, ArchError};
pub use params::{Binding, InitScheme, ParamStore};

use crate::stats::GaussianVars;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

const NORM_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    X,
    Y,
}

impl Domain {
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

/// Domain-invariant code `c` (`[C, h, w]`) and domain-specific code `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodes {
    pub c: Tensor,
    pub v: Vec<f64>,
}

/// Both codes produced by one pass through a domain's encoders.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub c: Var,
    pub v: GaussianVars,
}

/// Architecture plus parameters for all eight networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Networks {
    pub arch: ArchConfig,
    pub params: ParamStore,
}

impl Networks {
    pub fn new(arch: ArchConfig, seed: u64) -> std::result::Result<Self, ArchError> {
        Self::with_init(arch, seed, InitScheme::Normal { std: 0.02 })
    }

    pub fn with_init(arch: ArchConfig, seed: u64, init: InitScheme) -> std::result::Result<Self, ArchError> {
        arch.validate()?;
        let params = params::init_params(&arch, seed, init);
        Ok(Self { arch, params })
    }

    /// Binds every parameter onto `g`; parameters for which `trainable`
    /// returns false are bound as constants.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Binding {
        self.params.bind(g, trainable)
    }

    /// Binds every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Binding {
        self.params.bind(g, |_| false)
    }

    fn p(&self, b: &Binding, name: &str) -> Var {
        b.var(&self.params, name)
    }

    fn check_image(&self, g: &Graph, domain: Domain, image: Var, op: &'static str) -> Result<usize> {
        let s = self.arch.image_size;
        let ch = self.arch.channels(domain);
        match *g.shape(image) {
            [n, c, h, w] if c == ch && h == s && w == s => Ok(n),
            _ => Err(TensorError::ShapeMismatch {
                op,
                shapes: vec![g.shape(image).to_vec(), vec![0, ch, s, s]],
            }),
        }
    }

    fn res_block(&self, g: &mut Graph, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
        let w1 = self.p(b, &format!("{prefix}.conv1.w"));
        let w2 = self.p(b, &format!("{prefix}.conv2.w"));
        let h = g.conv2d(x, w1, None, 1, 1)?;
        let h = g.instance_norm(h, NORM_EPS)?;
        let h = g.relu(h);
        let h = g.conv2d(h, w2, None, 1, 1)?;
        let h = g.instance_norm(h, NORM_EPS)?;
        g.add(x, h)
    }

    /// Shared first two stride-2 convolutions; returns the pre-activation of
    /// the second one.
    fn stem(&self, g: &mut Graph, b: &Binding, domain: Domain, image: Var) -> Result<Var> {
        let e = format!("enc_{}", domain.tag());
        let h = g.conv2d(image, self.p(b, &format!("{e}.stem1.w")), Some(self.p(b, &format!("{e}.stem1.b"))), 2, 1)?;
        let h = g.relu(h);
        g.conv2d(h, self.p(b, &format!("{e}.stem2.w")), Some(self.p(b, &format!("{e}.stem2.b"))), 2, 1)
    }

    fn invariant_head(&self, g: &mut Graph, b: &Binding, domain: Domain, stem: Var) -> Result<Var> {
        let e = format!("enc_{}", domain.tag());
        let h = g.instance_norm(stem, NORM_EPS)?;
        let mut h = g.relu(h);
        for i in 0..self.arch.encoder_res_blocks {
            h = self.res_block(g, b, &format!("{e}.res{i}"), h)?;
        }
        Ok(h)
    }

    fn specific_head(&self, g: &mut Graph, b: &Binding, domain: Domain, stem: Var) -> Result<GaussianVars> {
        let e = format!("enc_{}", domain.tag());
        let mut h = g.leaky_relu(stem, LEAK);
        for i in 0..self.arch.specific_downsamples {
            h = g.conv2d(h, self.p(b, &format!("{e}.spec{i}.w")), Some(self.p(b, &format!("{e}.spec{i}.b"))), 2, 1)?;
            h = g.leaky_relu(h, LEAK);
        }
        let pooled = g.spatial_mean(h)?;
        let mu = g.linear(pooled, self.p(b, &format!("{e}.mu.w")), self.p(b, &format!("{e}.mu.b")))?;
        let log_var = g.linear(pooled, self.p(b, &format!("{e}.logvar.w")), self.p(b, &format!("{e}.logvar.b")))?;
        Ok(GaussianVars { mu, log_var })
    }

    /// `E_c`: image `[N, C, H, W]` -> domain-invariant code `[N, C_code, h, w]`.
    pub fn encode_invariant(&self, g: &mut Graph, b: &Binding, domain: Domain, image: Var) -> Result<Var> {
        self.check_image(g, domain, image, "encode_invariant")?;
        let stem = self.stem(g, b, domain, image)?;
        self.invariant_head(g, b, domain, stem)
    }

    /// `E_d`: image -> `q(v | image)` with `mu`, `log_var` of shape `[N, dim]`.
    pub fn encode_specific(&self, g: &mut Graph, b: &Binding, domain: Domain, image: Var) -> Result<GaussianVars> {
        self.check_image(g, domain, image, "encode_specific")?;
        let stem = self.stem(g, b, domain, image)?;
        self.specific_head(g, b, domain, stem)
    }

    /// Both encoders, evaluating the shared stem once.
    pub fn encode(&self, g: &mut Graph, b: &Binding, domain: Domain, image: Var) -> Result<Encoded> {
        self.check_image(g, domain, image, "encode")?;
        let stem = self.stem(g, b, domain, image)?;
        let c = self.invariant_head(g, b, domain, stem)?;
        let v = self.specific_head(g, b, domain, stem)?;
        Ok(Encoded { c, v })
    }

    /// `G`: code `c` plus domain-specific vector `v: [N, dim]` -> image in
    /// `(-1, 1)`. `v` is tiled over the code plane and concatenated to `c`.
    pub fn generate(&self, g: &mut Graph, b: &Binding, domain: Domain, c: Var, v: Var) -> Result<Var> {
        let a = &self.arch;
        let cs = a.code_size();
        let (n, cc) = match *g.shape(c) {
            [n, cc, h, w] if cc == a.code_channels && h == cs && w == cs => (n, cc),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "generate",
                    shapes: vec![g.shape(c).to_vec(), vec![0, a.code_channels, cs, cs]],
                })
            }
        };
        if g.shape(v) != [n, a.code_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "generate",
                shapes: vec![g.shape(v).to_vec(), vec![n, a.code_dim]],
            });
        }
        let p = format!("gen_{}", domain.tag());
        let tiled = g.tile_spatial(v, cs, cs)?;
        let z = g.concat_channels(&[c, tiled])?;
        debug_assert_eq!(g.shape(z)[1], cc + a.code_dim);
        let h = g.conv2d(z, self.p(b, &format!("{p}.in.w")), Some(self.p(b, &format!("{p}.in.b"))), 1, 1)?;
        let mut h = g.relu(h);
        for i in 0..a.generator_res_blocks {
            h = self.res_block(g, b, &format!("{p}.res{i}"), h)?;
        }
        let h = g.conv_transpose2d(h, self.p(b, &format!("{p}.up1.w")), Some(self.p(b, &format!("{p}.up1.b"))), 2, 1)?;
        let h = g.relu(h);
        let h = g.conv_transpose2d(h, self.p(b, &format!("{p}.up2.w")), Some(self.p(b, &format!("{p}.up2.b"))), 2, 1)?;
        Ok(g.tanh(h))
    }

    /// `D`: image -> patch logits `[N, 1, h, w]`.
    pub fn discriminate(&self, g: &mut Graph, b: &Binding, domain: Domain, image: Var) -> Result<Var> {
        self.check_image(g, domain, image, "discriminate")?;
        let p = format!("dis_{}", domain.tag());
        let mut h = image;
        for i in 0..self.arch.disc_downsamples {
            let bias = (i == 0).then(|| self.p(b, &format!("{p}.c{i}.b")));
            h = g.conv2d(h, self.p(b, &format!("{p}.c{i}.w")), bias, 2, 1)?;
            if i > 0 {
                h = g.instance_norm(h, NORM_EPS)?;
            }
            h = g.leaky_relu(h, LEAK);
        }
        g.conv2d(h, self.p(b, &format!("{p}.out.w")), Some(self.p(b, &format!("{p}.out.b"))), 1, 1)
    }

    /// Parameter names belonging to the discriminators.
    pub fn is_discriminator_param(name: &str) -> bool {
        name.starts_with("dis_")
    }

    /// Runs `f` on a scratch graph with frozen parameters and returns the
    /// value of the produced node.
    pub fn infer<F>(&self, f: F) -> Result<Tensor>
    where
        F: FnOnce(&Self, &mut Graph, &Binding) -> Result<Var>,
    {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let out = f(self, &mut g, &b)?;
        Ok(g.value(out).clone())
    }

    /// Translates a batch of images into the other domain with the given
    /// domain-specific codes `v: [N, dim]`.
    pub fn translate(&self, from: Domain, images: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.infer(|nets, g, b| {
            let x = g.constant(images.clone());
            let c = nets.encode_invariant(g, b, from, x)?;
            let v = g.constant(v.clone());
            nets.generate(g, b, from.other(), c, v)
        })
    }

    /// Codes of a single image `[C, H, W]`, with `v` taken as the posterior mean.
    pub fn latent_codes(&self, domain: Domain, image: &Tensor) -> Result<LatentCodes> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let x = g.constant(image.clone().reshaped(&shape)?);
        let enc = self.encode(&mut g, &b, domain, x)?;
        let c = g.value(enc.c).clone();
        let c_shape = c.shape()[1..].to_vec();
        Ok(LatentCodes {
            c: c.reshaped(&c_shape)?,
            v: g.value(enc.v.mu).data().to_vec(),
        })
    }
}
