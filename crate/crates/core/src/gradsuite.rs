//! Finite-difference checks over every primitive op, the divergences, each
//! network and each loss term, on small seeded inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::nets::{ArchConfig, Binding, Domain, Networks};
use crate::objective::{self, CycleOutputs, CycleTerms, TrainConfig};
use crate::stats::{self, GaussianVars, StatsError};
use crate::tensor::gradcheck::{grad_check, GradCheckOptions};
use crate::tensor::{Graph, Tensor, Var};
use crate::trainer::{forward_cycle, CycleNoise};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub group: &'static str,
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Name of a check whose analytic gradient is deliberately corrupted.
    pub corrupt: Option<String>,
}

type Loss = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, StatsError>>;

struct Check {
    group: &'static str,
    name: &'static str,
    inputs: Vec<Tensor>,
    f: Loss,
    max_coords: Option<usize>,
}

struct Inputs {
    rng: ChaCha8Rng,
}

impl Inputs {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = StandardNormal.sample(&mut self.rng);
        }
        t
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor {
        let mut t = self.normal(shape);
        t.data_mut().iter_mut().for_each(|v| *v = (0.5 * *v).exp());
        t
    }

    fn image(&mut self, arch: &ArchConfig, domain: Domain, n: usize) -> Tensor {
        let mut t = self.normal(&[n, arch.channels(domain), arch.image_size, arch.image_size]);
        t.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        t
    }
}

/// Reduces a node to a scalar through a fixed random weighting so that
/// every element contributes a distinct gradient.
fn weigh(g: &mut Graph, x: Var) -> Result<Var, StatsError> {
    let n = g.value(x).len();
    let w = Tensor::new(
        g.shape(x).to_vec(),
        (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662).fract() - 0.5).collect(),
    )?;
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn unary(name: &'static str, op: fn(&mut Graph, Var) -> Var, input: Tensor) -> Check {
    Check {
        group: "primitive",
        name,
        inputs: vec![input],
        f: Box::new(move |g, v| {
            let y = op(g, v[0]);
            weigh(g, y)
        }),
        max_coords: None,
    }
}

/// Scaled copies of the parameters of one network, used as check inputs.
/// Larger weights keep activations away from the near-linear regime of the
/// 0.02 initialization.
fn network_params(nets: &Networks, prefix: &str) -> (Vec<usize>, Vec<Tensor>) {
    let mut idx = Vec::new();
    let mut ts = Vec::new();
    for (i, (name, t)) in nets.params.iter().enumerate() {
        if name.starts_with(prefix) {
            idx.push(i);
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
            ts.push(t);
        }
    }
    (idx, ts)
}

fn bind_vars(nets: &Networks, idx: &[usize], vars: &[Var]) -> Binding {
    let mut b = Binding::empty(&nets.params);
    for (&i, &v) in idx.iter().zip(vars) {
        b.set(i, v);
    }
    b
}

fn checks(seed: u64) -> Vec<Check> {
    let mut r = Inputs {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut out: Vec<Check> = Vec::new();

    out.push(Check {
        group: "primitive",
        name: "matmul",
        inputs: vec![r.normal(&[3, 4]), r.normal(&[4, 2])],
        f: Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weigh(g, y)
        }),
        max_coords: None,
    });
    for (name, stride) in [("conv2d_stride1", 1), ("conv2d_stride2", 2)] {
        out.push(Check {
            group: "primitive",
            name,
            inputs: vec![r.normal(&[2, 2, 5, 5]), r.normal(&[3, 2, 3, 3]), r.normal(&[3])],
            f: Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, 1)?;
                weigh(g, y)
            }),
            max_coords: None,
        });
    }
    out.push(Check {
        group: "primitive",
        name: "conv_transpose2d",
        inputs: vec![r.normal(&[2, 2, 3, 3]), r.normal(&[2, 3, 4, 4]), r.normal(&[3])],
        f: Box::new(|g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)?;
            weigh(g, y)
        }),
        max_coords: None,
    });
    type Binary = fn(&mut Graph, Var, Var) -> Result<Var, crate::tensor::TensorError>;
    let binaries: [(&'static str, Binary); 5] = [
        ("add", Graph::add),
        ("sub", Graph::sub),
        ("mul", Graph::mul),
        ("mse", Graph::mse),
        ("mean_abs_diff", Graph::mean_abs_diff),
    ];
    for (name, op) in binaries {
        out.push(Check {
            group: "primitive",
            name,
            inputs: vec![r.normal(&[2, 3]), r.normal(&[2, 3])],
            f: Box::new(move |g, v| {
                let y = op(g, v[0], v[1])?;
                weigh(g, y)
            }),
            max_coords: None,
        });
    }
    out.push(unary("scale", |g, x| g.scale(x, -1.7), r.normal(&[5])));
    out.push(unary("add_scalar", |g, x| g.add_scalar(x, 0.4), r.normal(&[5])));
    out.push(unary("neg", Graph::neg, r.normal(&[5])));
    out.push(unary("exp", Graph::exp, r.normal(&[5])));
    out.push(unary("log", |g, x| g.log(x).expect("positive input"), r.positive(&[5])));
    out.push(unary("square", Graph::square, r.normal(&[5])));
    out.push(unary("sqrt", |g, x| g.sqrt(x).expect("positive input"), r.positive(&[5])));
    out.push(unary("abs", Graph::abs, r.normal(&[6])));
    out.push(unary("relu", Graph::relu, r.normal(&[6])));
    out.push(unary("leaky_relu", |g, x| g.leaky_relu(x, 0.2), r.normal(&[6])));
    out.push(unary("tanh", Graph::tanh, r.normal(&[5])));
    out.push(unary("sigmoid", Graph::sigmoid, r.normal(&[5])));
    out.push(unary("softplus", Graph::softplus, r.normal(&[5])));
    out.push(unary("clamp", |g, x| g.clamp(x, -0.5, 0.5), r.normal(&[8])));
    out.push(unary("sum", Graph::sum, r.normal(&[4])));
    out.push(unary("mean", Graph::mean, r.normal(&[4])));
    out.push(unary("instance_norm", |g, x| g.instance_norm(x, 1e-5).expect("rank 4"), r.normal(&[2, 2, 3, 3])));
    out.push(unary("reshape", |g, x| g.reshape(x, &[3, 2]).expect("same size"), r.normal(&[2, 3])));
    out.push(unary("spatial_mean", |g, x| g.spatial_mean(x).expect("rank 4"), r.normal(&[2, 3, 2, 2])));
    out.push(unary("tile_spatial", |g, x| g.tile_spatial(x, 2, 3).expect("rank 2"), r.normal(&[2, 3])));
    out.push(Check {
        group: "primitive",
        name: "concat_channels",
        inputs: vec![r.normal(&[2, 1, 2, 2]), r.normal(&[2, 3, 2, 2])],
        f: Box::new(|g, v| {
            let y = g.concat_channels(&[v[0], v[1]])?;
            weigh(g, y)
        }),
        max_coords: None,
    });
    out.push(Check {
        group: "primitive",
        name: "add_bias",
        inputs: vec![r.normal(&[3, 2]), r.normal(&[2])],
        f: Box::new(|g, v| {
            let y = g.add_bias(v[0], v[1])?;
            weigh(g, y)
        }),
        max_coords: None,
    });
    out.push(Check {
        group: "primitive",
        name: "linear",
        inputs: vec![r.normal(&[3, 4]), r.normal(&[4, 2]), r.normal(&[2])],
        f: Box::new(|g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            weigh(g, y)
        }),
        max_coords: None,
    });

    out.push(Check {
        group: "divergence",
        name: "kl_to_standard_normal",
        inputs: vec![r.normal(&[3, 4]), r.normal(&[3, 4])],
        f: Box::new(|g, v| stats::kl_to_standard_normal_var(g, GaussianVars { mu: v[0], log_var: v[1] })),
        max_coords: None,
    });
    out.push(Check {
        group: "divergence",
        name: "mmd",
        inputs: vec![r.normal(&[5, 3]), r.normal(&[4, 3])],
        f: Box::new(|g, v| stats::mmd_var(g, v[0], v[1], 1.2)),
        max_coords: None,
    });
    out.push(Check {
        group: "divergence",
        name: "reparam_sample",
        inputs: vec![r.normal(&[3, 2]), r.normal(&[3, 2]), r.normal(&[3, 2])],
        f: Box::new(|g, v| {
            let s = stats::reparam_sample_var(g, GaussianVars { mu: v[0], log_var: v[1] }, v[2])?;
            weigh(g, s)
        }),
        max_coords: None,
    });

    let arch = ArchConfig::tiny();
    let nets = Networks::new(arch.clone(), seed ^ 0x5eed).expect("tiny arch is valid");
    let cs = arch.code_size();
    let networks: [(&'static str, &'static str, Domain); 4] = [
        ("encode_invariant", "enc_x.", Domain::X),
        ("encode_specific", "enc_y.", Domain::Y),
        ("generate", "gen_y.", Domain::Y),
        ("discriminate", "dis_x.", Domain::X),
    ];
    for (name, prefix, domain) in networks {
        let (idx, params) = network_params(&nets, prefix);
        let first = match name {
            "generate" => r.normal(&[2, arch.code_channels, cs, cs]),
            _ => r.image(&arch, domain, 2),
        };
        let v_in = r.normal(&[2, arch.code_dim]);
        let mut inputs = vec![first];
        inputs.extend(params);
        let nets = nets.clone();
        out.push(Check {
            group: "network",
            name,
            inputs,
            f: Box::new(move |g, vars| {
                let b = bind_vars(&nets, &idx, &vars[1..]);
                let y = match name {
                    "encode_invariant" => nets.encode_invariant(g, &b, domain, vars[0])?,
                    "encode_specific" => {
                        let q = nets.encode_specific(g, &b, domain, vars[0])?;
                        let m = weigh(g, q.mu)?;
                        let l = weigh(g, q.log_var)?;
                        return Ok(g.add(m, l)?);
                    }
                    "generate" => {
                        let v = g.constant(v_in.clone());
                        nets.generate(g, &b, domain, vars[0], v)?
                    }
                    _ => nets.discriminate(g, &b, domain, vars[0])?,
                };
                weigh(g, y)
            }),
            max_coords: Some(12),
        });
    }

    let cfg = TrainConfig {
        arch: arch.clone(),
        ..Default::default()
    };
    out.push(Check {
        group: "objective",
        name: "gan_loss_discriminator",
        inputs: vec![r.normal(&[2, 1, 2, 2]), r.normal(&[2, 1, 2, 2])],
        f: Box::new(|g, v| objective::gan_loss_discriminator(g, v[0], v[1])),
        max_coords: None,
    });
    out.push(Check {
        group: "objective",
        name: "gan_loss_generator",
        inputs: vec![r.normal(&[2, 1, 2, 2])],
        f: Box::new(|g, v| Ok(objective::gan_loss_generator(g, v[0]))),
        max_coords: None,
    });
    {
        let cfg = cfg.clone();
        out.push(Check {
            group: "objective",
            name: "cycle_reconstruction_loss",
            inputs: vec![
                r.normal(&[2, 1, 3, 3]),
                r.normal(&[2, 1, 3, 3]),
                r.normal(&[2, 2]),
                r.normal(&[2, 2]),
                r.normal(&[2, 2, 2, 2]),
                r.normal(&[2, 2, 2, 2]),
            ],
            f: Box::new(move |g, v| {
                let out = CycleOutputs {
                    input: v[0],
                    recon: v[1],
                    v_prior: v[2],
                    posterior_hat: GaussianVars { mu: v[3], log_var: v[3] },
                    code: v[4],
                    code_hat: v[5],
                    posterior: GaussianVars { mu: v[2], log_var: v[2] },
                    translated: v[0],
                    v_sample: v[2],
                };
                objective::cycle_reconstruction_loss(g, &out, &cfg)
            }),
            max_coords: None,
        });
    }
    out.push(Check {
        group: "objective",
        name: "vae_loss",
        inputs: vec![r.normal(&[4, 2]), r.normal(&[4, 2]), r.normal(&[2, 3]), r.normal(&[2, 3])],
        f: Box::new(|g, v| objective::vae_loss(g, v[0], v[1], v[2], v[3], 1.0)),
        max_coords: None,
    });
    out.push(Check {
        group: "objective",
        name: "info_bound_loss",
        inputs: vec![r.normal(&[3, 2]), r.normal(&[3, 2])],
        f: Box::new(|g, v| objective::info_bound_loss(g, GaussianVars { mu: v[0], log_var: v[1] })),
        max_coords: None,
    });

    // Full objectives through both cycles, with every parameter as an input.
    let x = r.image(&arch, Domain::X, 2);
    let y = r.image(&arch, Domain::Y, 2);
    let noise = [
        CycleNoise {
            v_prior: r.normal(&[2, arch.code_dim]),
            eps: r.normal(&[2, arch.code_dim]),
        },
        CycleNoise {
            v_prior: r.normal(&[2, arch.code_dim]),
            eps: r.normal(&[2, arch.code_dim]),
        },
    ];
    let priors = [r.normal(&[2, arch.code_dim]), r.normal(&[2, arch.code_dim])];
    let (idx, params) = network_params(&nets, "");
    for name in ["generator_objective", "discriminator_objective"] {
        let (nets, idx, x, y, noise, priors, cfg) =
            (nets.clone(), idx.clone(), x.clone(), y.clone(), noise.clone(), priors.clone(), cfg.clone());
        out.push(Check {
            group: "objective",
            name,
            inputs: params.clone(),
            f: Box::new(move |g, vars| {
                let b = bind_vars(&nets, &idx, vars);
                let xv = g.constant(x.clone());
                let yv = g.constant(y.clone());
                let c1 = forward_cycle(&nets, g, &b, Domain::X, xv, &noise[0])?;
                let c2 = forward_cycle(&nets, g, &b, Domain::Y, yv, &noise[1])?;
                let fy = nets.discriminate(g, &b, Domain::Y, c1.translated)?;
                let fx = nets.discriminate(g, &b, Domain::X, c2.translated)?;
                if name == "discriminator_objective" {
                    let ry = nets.discriminate(g, &b, Domain::Y, yv)?;
                    let rx = nets.discriminate(g, &b, Domain::X, xv)?;
                    let d1 = objective::gan_loss_discriminator(g, ry, fy)?;
                    let d2 = objective::gan_loss_discriminator(g, rx, fx)?;
                    return objective::discriminator_objective(g, [d1, d2]);
                }
                let p1 = g.constant(priors[0].clone());
                let p2 = g.constant(priors[1].clone());
                let t = [
                    CycleTerms::compute(g, &c1, fy, p1, &cfg)?,
                    CycleTerms::compute(g, &c2, fx, p2, &cfg)?,
                ];
                objective::generator_objective(g, &t, &cfg)
            }),
            max_coords: Some(3),
        });
    }
    out
}

/// Names of every check in suite order.
pub fn check_names() -> Vec<&'static str> {
    checks(0).iter().map(|c| c.name).collect()
}

/// Runs every check. A check passes when at least one coordinate was
/// compared and the worst relative error is below [`TOLERANCE`].
pub fn run_suite(opts: &SuiteOptions) -> Vec<CheckResult> {
    checks(opts.seed)
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let corrupt = opts.corrupt.as_deref() == Some(c.name);
            let report = grad_check(
                &c.f,
                &c.inputs,
                &GradCheckOptions {
                    max_coords_per_input: c.max_coords,
                    seed: opts.seed.wrapping_add(i as u64),
                    corrupt_analytic: if corrupt { 0.5 } else { 0.0 },
                    ..Default::default()
                },
            );
            match report {
                Ok(r) => CheckResult {
                    group: c.group,
                    name: c.name,
                    max_rel_error: r.max_rel_error,
                    checked: r.checked,
                    skipped: r.skipped,
                    passed: r.passes(TOLERANCE),
                },
                Err(_) => CheckResult {
                    group: c.group,
                    name: c.name,
                    max_rel_error: f64::INFINITY,
                    checked: 0,
                    skipped: 0,
                    passed: false,
                },
            }
        })
        .collect()
}
