//! Alternating discriminator and generator/encoder updates over both
//! translation cycles, with checkpointing and per-step metrics.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;
use thiserror::Error;

use crate::data::{self, DataError, Dataset};
use crate::nets::checkpoint::{Checkpoint, CheckpointError};
use crate::nets::{Binding, Domain, Networks, ParamStore};
use crate::objective::{self, ConfigError, CycleOutputs, CycleTerms, TrainConfig};
use crate::stats::{self, StatsError};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const METRICS_HEADER: &str = "step,loss_d,loss_g,recon1,recon2,cycle_mse1,cycle_mse2,vae1,vae2,bound1,bound2,seconds";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Numeric(#[from] StatsError),
    #[error("non-finite {term} = {value} at step {step}")]
    NonFinite { step: u64, term: String, value: f64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Numeric(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Bias-corrected Adam over a subset of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    indices: Vec<usize>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, select: impl Fn(&str) -> bool, cfg: &TrainConfig) -> Self {
        let indices: Vec<usize> = store
            .names()
            .enumerate()
            .filter(|(_, n)| select(n))
            .map(|(i, _)| i)
            .collect();
        let zeros: Vec<Tensor> = indices.iter().map(|&i| Tensor::zeros(store.tensor_at(i).shape())).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            indices,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Store positions of the optimized parameters.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Applies one update; `grads` is aligned with [`Adam::indices`].
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> std::result::Result<(), TensorError> {
        if grads.len() != self.indices.len() {
            return Err(TensorError::InvalidAttr {
                op: "adam_update",
                detail: format!("{} gradients for {} parameters", grads.len(), self.indices.len()),
            });
        }
        for (k, g) in grads.iter().enumerate() {
            let p = store.tensor_at(self.indices[k]);
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_update",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec()],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, g) in grads.iter().enumerate() {
            let p = store.tensor_at_mut(self.indices[k]).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    fn state_tensors(&self, tag: &str, store: &ParamStore) -> Vec<(String, Tensor)> {
        let names: Vec<&str> = store.names().collect();
        let mut out = Vec::with_capacity(2 * self.indices.len());
        for (k, &i) in self.indices.iter().enumerate() {
            out.push((format!("{tag}.m.{}", names[i]), self.m[k].clone()));
            out.push((format!("{tag}.v.{}", names[i]), self.v[k].clone()));
        }
        out
    }

    fn restore(&mut self, tag: &str, store: &ParamStore, ck: &Checkpoint, step: u64) -> Result<()> {
        let names: Vec<&str> = store.names().collect();
        for (k, &i) in self.indices.iter().enumerate() {
            for (which, slot) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let key = format!("{tag}.{which}.{}", names[i]);
                let t = ck
                    .tensor(&key)
                    .ok_or_else(|| CheckpointError::Format(format!("missing optimizer tensor {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(CheckpointError::Format(format!("optimizer tensor {key} has the wrong shape")).into());
                }
                *slot = t.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}

const STREAM_INIT: u64 = 1;
const STREAM_DATA_X: u64 = 2;
const STREAM_DATA_Y: u64 = 3;
const STREAM_V: u64 = 4;
const STREAM_EPS: u64 = 5;
const STREAM_PRIOR: u64 = 6;
const STREAM_SAMPLES: u64 = 7;

/// Independent generator `id` derived from the master seed.
pub fn named_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Seed used to initialize the networks for a master seed.
pub fn init_seed(seed: u64) -> u64 {
    named_stream(seed, STREAM_INIT).next_u64()
}

/// The named random streams consumed during training.
#[derive(Debug, Clone, PartialEq)]
struct Streams {
    data_x: ChaCha8Rng,
    data_y: ChaCha8Rng,
    v: ChaCha8Rng,
    eps: ChaCha8Rng,
    prior: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            data_x: named_stream(seed, STREAM_DATA_X),
            data_y: named_stream(seed, STREAM_DATA_Y),
            v: named_stream(seed, STREAM_V),
            eps: named_stream(seed, STREAM_EPS),
            prior: named_stream(seed, STREAM_PRIOR),
        }
    }

    fn all_mut(&mut self) -> [(&'static str, &mut ChaCha8Rng); 5] {
        [
            ("data_x", &mut self.data_x),
            ("data_y", &mut self.data_y),
            ("v", &mut self.v),
            ("eps", &mut self.eps),
            ("prior", &mut self.prior),
        ]
    }

    fn positions(&mut self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .all_mut()
            .into_iter()
            .map(|(n, r)| (n.to_string(), json!(r.get_word_pos().to_string())))
            .collect();
        serde_json::Value::Object(map)
    }

    fn restore(seed: u64, pos: &serde_json::Value) -> Result<Self> {
        let mut s = Self::new(seed);
        for (name, rng) in s.all_mut() {
            let p: u128 = pos
                .get(name)
                .and_then(|v| v.as_str())
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CheckpointError::Format(format!("missing stream position {name}")))?;
            rng.set_word_pos(p);
        }
        Ok(s)
    }
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    t
}

/// Stacks `n` images drawn uniformly with replacement.
pub fn sample_batch(images: &[Tensor], n: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if images.is_empty() {
        return Err(TrainError::InsufficientData("no training images".into()));
    }
    let picks: Vec<&Tensor> = (0..n).map(|_| &images[rng.random_range(0..images.len())]).collect();
    Ok(Tensor::stack(&picks)?)
}

/// Random inputs of one cycle: the prior code fed to the output generator
/// and the reparametrization noise, both `[N, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleNoise {
    pub v_prior: Tensor,
    pub eps: Tensor,
}

impl CycleNoise {
    pub fn draw(n: usize, dim: usize, v_rng: &mut impl Rng, eps_rng: &mut impl Rng) -> Self {
        Self {
            v_prior: standard_normal(&[n, dim], v_rng),
            eps: standard_normal(&[n, dim], eps_rng),
        }
    }
}

/// Runs one translation cycle starting in `from`: encode, translate with a
/// prior code, re-encode, and reconstruct with the reparametrized code.
pub fn forward_cycle(
    nets: &Networks,
    g: &mut Graph,
    b: &Binding,
    from: Domain,
    input: Var,
    noise: &CycleNoise,
) -> std::result::Result<CycleOutputs, StatsError> {
    let to = from.other();
    let enc = nets.encode(g, b, from, input)?;
    let v_prior = g.constant(noise.v_prior.clone());
    let translated = nets.generate(g, b, to, enc.c, v_prior)?;
    let enc_hat = nets.encode(g, b, to, translated)?;
    let eps = g.constant(noise.eps.clone());
    let v_sample = stats::reparam_sample_var(g, enc.v, eps)?;
    let recon = nets.generate(g, b, from, enc_hat.c, v_sample)?;
    Ok(CycleOutputs {
        input,
        code: enc.c,
        posterior: enc.v,
        v_prior,
        translated,
        code_hat: enc_hat.c,
        posterior_hat: enc_hat.v,
        v_sample,
        recon,
    })
}

/// X -> Y -> X cycle; draws `v_y1` and then the reparametrization noise from `rng`.
pub fn forward_cycle_x(
    nets: &Networks,
    g: &mut Graph,
    b: &Binding,
    x: Var,
    rng: &mut impl Rng,
) -> std::result::Result<CycleOutputs, StatsError> {
    let n = g.shape(x)[0];
    let dim = nets.arch.code_dim;
    let v = standard_normal(&[n, dim], rng);
    let eps = standard_normal(&[n, dim], rng);
    forward_cycle(nets, g, b, Domain::X, x, &CycleNoise { v_prior: v, eps })
}

/// Y -> X -> Y cycle, the mirror of [`forward_cycle_x`].
pub fn forward_cycle_y(
    nets: &Networks,
    g: &mut Graph,
    b: &Binding,
    y: Var,
    rng: &mut impl Rng,
) -> std::result::Result<CycleOutputs, StatsError> {
    let n = g.shape(y)[0];
    let dim = nets.arch.code_dim;
    let v = standard_normal(&[n, dim], rng);
    let eps = standard_normal(&[n, dim], rng);
    forward_cycle(nets, g, b, Domain::Y, y, &CycleNoise { v_prior: v, eps })
}

/// Loss values recorded for one step. Arrays are indexed by cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub gan_d: [f64; 2],
    pub gan_g: [f64; 2],
    pub recon: [f64; 2],
    /// Unweighted image reconstruction MSE of each cycle.
    pub cycle_mse: [f64; 2],
    pub vae: [f64; 2],
    pub bound: [f64; 2],
    pub seconds: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_d,
            self.loss_g,
            self.recon[0],
            self.recon[1],
            self.cycle_mse[0],
            self.cycle_mse[1],
            self.vae[0],
            self.vae[1],
            self.bound[0],
            self.bound[1],
            self.seconds
        )
    }

    /// Per-cycle `[bound, recon, gan, vae]` in the layout of [`objective::combine_terms`].
    pub fn terms(&self) -> [[f64; 4]; 2] {
        [0, 1].map(|i| [self.bound[i], self.recon[i], self.gan_g[i], self.vae[i]])
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let sum: f64 = a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum();
    sum / a.len() as f64
}

fn finite(step: u64, term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TrainError::NonFinite {
            step,
            term: term.to_string(),
            value,
        })
    }
}

fn collect_grads(g: &Graph, b: &Binding, opt: &Adam, store: &ParamStore, root: Var) -> Result<Vec<Tensor>> {
    let grads = g.backward(root)?;
    Ok(opt
        .indices()
        .iter()
        .map(|&i| {
            let var = b.get(i).expect("optimized parameter is bound");
            grads.get_or_zeros(var, store.tensor_at(i).shape())
        })
        .collect())
}

/// Networks, optimizers and random streams of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub nets: Networks,
    /// Encoders and generators.
    pub opt_ge: Adam,
    /// Discriminators.
    pub opt_d: Adam,
    /// Completed steps.
    pub step: u64,
    streams: Streams,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let nets = Networks::new(cfg.arch.clone(), init_seed(cfg.seed)).map_err(ConfigError::from)?;
        let opt_ge = Adam::new(&nets.params, |n| !Networks::is_discriminator_param(n), &cfg);
        let opt_d = Adam::new(&nets.params, Networks::is_discriminator_param, &cfg);
        let streams = Streams::new(cfg.seed);
        Ok(Self {
            cfg,
            nets,
            opt_ge,
            opt_d,
            step: 0,
            streams,
        })
    }

    /// One discriminator update followed by one encoder/generator update.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        let step = self.step + 1;
        let n = self.cfg.batch_size;
        let dim = self.cfg.arch.code_dim;
        let s = &mut self.streams;
        let xb = sample_batch(&data.x, n, &mut s.data_x)?;
        let yb = sample_batch(&data.y, n, &mut s.data_y)?;
        let noise = [
            CycleNoise::draw(n, dim, &mut s.v, &mut s.eps),
            CycleNoise::draw(n, dim, &mut s.v, &mut s.eps),
        ];
        let priors = [
            standard_normal(&[n, dim], &mut s.prior),
            standard_normal(&[n, dim], &mut s.prior),
        ];

        let mut g = Graph::new();
        let mut b = Binding::empty(&self.nets.params);
        self.nets
            .params
            .bind_into(&mut g, &mut b, |p| !Networks::is_discriminator_param(p), true);
        let xv = g.constant(xb.clone());
        let yv = g.constant(yb.clone());
        let cycles = [
            forward_cycle(&self.nets, &mut g, &b, Domain::X, xv, &noise[0])?,
            forward_cycle(&self.nets, &mut g, &b, Domain::Y, yv, &noise[1])?,
        ];

        // Discriminator phase on detached translations.
        let (loss_d, gan_d) = {
            let mut gd = Graph::new();
            let mut bd = Binding::empty(&self.nets.params);
            self.nets
                .params
                .bind_into(&mut gd, &mut bd, Networks::is_discriminator_param, true);
            let mut terms = [None, None];
            for (i, (real, target)) in [(&yb, Domain::Y), (&xb, Domain::X)].into_iter().enumerate() {
                let real = gd.constant(real.clone());
                let fake = gd.constant(g.value(cycles[i].translated).clone());
                let lr = self.nets.discriminate(&mut gd, &bd, target, real)?;
                let lf = self.nets.discriminate(&mut gd, &bd, target, fake)?;
                terms[i] = Some(objective::gan_loss_discriminator(&mut gd, lr, lf)?);
            }
            let terms = terms.map(|t| t.expect("both cycles"));
            let total = objective::discriminator_objective(&mut gd, terms)?;
            let loss_d = finite(step, "loss_d", gd.value(total).item())?;
            let grads = collect_grads(&gd, &bd, &self.opt_d, &self.nets.params, total)?;
            self.opt_d.update(&mut self.nets.params, &grads)?;
            (loss_d, terms.map(|t| gd.value(t).item()))
        };

        // Encoder/generator phase against the updated discriminators.
        self.nets
            .params
            .bind_into(&mut g, &mut b, Networks::is_discriminator_param, false);
        let mut terms = Vec::with_capacity(2);
        for (i, target) in [Domain::Y, Domain::X].into_iter().enumerate() {
            let logits = self.nets.discriminate(&mut g, &b, target, cycles[i].translated)?;
            let prior = g.constant(priors[i].clone());
            terms.push(CycleTerms::compute(&mut g, &cycles[i], logits, prior, &self.cfg)?);
        }
        let terms = [terms[0], terms[1]];
        let total = objective::generator_objective(&mut g, &terms, &self.cfg)?;
        let v = |var: Var| g.value(var).item();
        let mut m = StepMetrics {
            step,
            loss_d,
            loss_g: v(total),
            gan_d,
            gan_g: [v(terms[0].gan), v(terms[1].gan)],
            recon: [v(terms[0].recon), v(terms[1].recon)],
            cycle_mse: [0, 1].map(|i| mse(g.value(cycles[i].recon), g.value(cycles[i].input))),
            vae: [v(terms[0].vae), v(terms[1].vae)],
            bound: [v(terms[0].bound), v(terms[1].bound)],
            seconds: 0.0,
        };
        for i in 0..2 {
            let c = i + 1;
            finite(step, &format!("recon{c}"), m.recon[i])?;
            finite(step, &format!("vae{c}"), m.vae[i])?;
            finite(step, &format!("bound{c}"), m.bound[i])?;
            finite(step, &format!("gan_g{c}"), m.gan_g[i])?;
        }
        m.loss_g = finite(step, "loss_g", m.loss_g)?;
        let grads = collect_grads(&g, &b, &self.opt_ge, &self.nets.params, total)?;
        self.opt_ge.update(&mut self.nets.params, &grads)?;
        self.step = step;
        Ok(m)
    }

    /// Parameters, optimizer moments, stream positions and config.
    pub fn checkpoint(&mut self) -> Checkpoint {
        let mut ck = Checkpoint::from_networks(&self.nets, self.step, self.cfg.seed);
        ck.tensors.extend(self.opt_ge.state_tensors("opt_ge", &self.nets.params));
        ck.tensors.extend(self.opt_d.state_tensors("opt_d", &self.nets.params));
        ck.extra = json!({
            "config": self.cfg,
            "opt_ge_step": self.opt_ge.step,
            "opt_d_step": self.opt_d.step,
            "streams": self.streams.positions(),
        });
        ck
    }

    /// Restores a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn from_checkpoint(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        if ck.seed != t.cfg.seed {
            return Err(ConfigError::Invalid(format!(
                "checkpoint was trained with seed {}, config has seed {}",
                ck.seed, t.cfg.seed
            ))
            .into());
        }
        t.nets = ck.networks(&t.cfg.arch)?;
        let field = |k: &str| {
            ck.extra
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| CheckpointError::Format(format!("missing trainer field {k}")))
        };
        let (sge, sd) = (field("opt_ge_step")?, field("opt_d_step")?);
        t.opt_ge.restore("opt_ge", &t.nets.params, ck, sge)?;
        t.opt_d.restore("opt_d", &t.nets.params, ck, sd)?;
        let pos = ck
            .extra
            .get("streams")
            .ok_or_else(|| CheckpointError::Format("missing stream positions".into()))?;
        t.streams = Streams::restore(t.cfg.seed, pos)?;
        t.step = ck.step;
        Ok(t)
    }
}

/// Translations of the first few X images under fixed prior codes, one row per input.
pub fn sample_grid(nets: &Networks, data: &Dataset, seed: u64, inputs: usize, samples: usize) -> Result<Tensor> {
    let inputs = inputs.min(data.x.len());
    if inputs == 0 {
        return Err(TrainError::InsufficientData("no X images for the sample grid".into()));
    }
    let mut rng = named_stream(seed, STREAM_SAMPLES);
    let v = standard_normal(&[samples, nets.arch.code_dim], &mut rng);
    let mut rows = Vec::with_capacity(inputs);
    for x in &data.x[..inputs] {
        let batch = Tensor::stack(&vec![x; samples])?;
        let out = nets.translate(Domain::X, &batch, &v)?;
        let mut row = vec![x.clone()];
        row.extend(out.unstack());
        rows.push(row);
    }
    data::contact_sheet(&rows).map_err(|detail| {
        DataError::Image {
            path: PathBuf::from("sample grid"),
            detail,
        }
        .into()
    })
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step}.bin"))
}

/// Rewrites `metrics.csv` keeping only rows up to `step`, or starts a new
/// file with the header when there is nothing to keep.
fn prepare_metrics(path: &Path, step: u64) -> Result<fs::File> {
    let mut kept = String::from(METRICS_HEADER);
    kept.push('\n');
    if step > 0 && path.exists() {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        for line in text.lines().skip(1) {
            let s: u64 = line
                .split(',')
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| TrainError::InsufficientData(format!("unreadable metrics row '{line}'")))?;
            if s <= step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
    }
    fs::write(path, kept).map_err(io_err(path))?;
    fs::OpenOptions::new().append(true).open(path).map_err(io_err(path))
}

/// Runs training until `cfg.steps`, writing `metrics.csv`, `ckpt_<step>.bin`
/// and `samples_<step>.ppm` into `out_dir`. With `resume`, training continues
/// from that checkpoint and the metrics file is cut back to its step.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(&StepMetrics),
) -> Result<Trainer> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(cfg.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = prepare_metrics(&metrics_path, trainer.step)?;
    let start = Instant::now();
    while trainer.step < cfg.steps {
        let mut m = trainer.train_step(data)?;
        if cfg.log_wall_time {
            m.seconds = (start.elapsed().as_secs_f64() * 1e3).round() / 1e3;
        }
        writeln!(metrics, "{}", m.csv_row()).map_err(io_err(&metrics_path))?;
        metrics.flush().map_err(io_err(&metrics_path))?;
        let last = m.step == cfg.steps;
        if m.step % cfg.checkpoint_every == 0 || last {
            trainer.checkpoint().save(&checkpoint_path(out_dir, m.step))?;
        }
        if m.step % cfg.sample_every == 0 || last {
            let grid = sample_grid(&trainer.nets, data, cfg.seed, 4, 6)?;
            data::write_image(&out_dir.join(format!("samples_{}.ppm", m.step)), &grid)?;
        }
        progress(&m);
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ArchConfig;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            arch: ArchConfig {
                image_size: 32,
                code_channels: 4,
                code_dim: 2,
                base_filters: 2,
                encoder_res_blocks: 1,
                generator_res_blocks: 1,
                specific_downsamples: 1,
                disc_base_filters: 2,
                disc_downsamples: 2,
                ..ArchConfig::default()
            },
            batch_size: 2,
            steps: 3,
            ..Default::default()
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::default();
        store.insert("w", Tensor::from_vec(vec![0.5, -1.0]));
        let mut opt = Adam::new(&store, |_| true, &cfg);
        opt.update(&mut store, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[0.5, -1.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::default();
        store.insert("w", Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let mut opt = Adam::new(&store, |_| true, &cfg);
        opt.update(&mut store, &[Tensor::from_vec(vec![3.0, -0.01, 1e-3])]).unwrap();
        for (&p, g) in store.get("w").unwrap().data().iter().zip([3.0f64, -0.01, 1e-3]) {
            // m_hat = g and v_hat = g^2, so the step is lr * |g| / (|g| + eps).
            let want = -cfg.learning_rate * g / (g.abs() + cfg.adam_eps);
            assert!((p - want).abs() < 1e-15, "{p} {want}");
            assert!(p.abs() <= cfg.learning_rate);
        }
    }

    #[test]
    fn adam_constant_gradient_decreases_monotonically() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::default();
        store.insert("w", Tensor::from_vec(vec![1.0]));
        let mut opt = Adam::new(&store, |_| true, &cfg);
        let mut prev = 1.0;
        for _ in 0..200 {
            opt.update(&mut store, &[Tensor::from_vec(vec![0.7])]).unwrap();
            let now = store.get("w").unwrap().data()[0];
            assert!(now < prev);
            prev = now;
        }
        assert!(opt.update(&mut store, &[Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn streams_are_independent() {
        let mut a = named_stream(9, STREAM_V);
        let mut b = named_stream(9, STREAM_EPS);
        let first_b = b.next_u64();
        let _ = a.next_u64();
        let mut b2 = named_stream(9, STREAM_EPS);
        assert_eq!(b2.next_u64(), first_b);
        assert_ne!(named_stream(9, STREAM_V).next_u64(), first_b);
    }

    #[test]
    fn cycle_shapes() {
        let nets = Networks::new(ArchConfig::default(), 1).unwrap();
        let data = Dataset::in_memory(2, 1).unwrap();
        let mut g = Graph::new();
        let b = nets.bind_frozen(&mut g);
        let x = g.constant(Tensor::stack(&[&data.x[0], &data.x[1]]).unwrap());
        let mut rng = named_stream(1, STREAM_V);
        let c = forward_cycle_x(&nets, &mut g, &b, x, &mut rng).unwrap();
        assert_eq!(g.shape(c.code), &[2, 64, 8, 8]);
        assert_eq!(g.shape(c.posterior.mu), &[2, 8]);
        assert_eq!(g.shape(c.v_prior), &[2, 8]);
        assert_eq!(g.shape(c.translated), &[2, 3, 32, 32]);
        assert_eq!(g.shape(c.code_hat), &[2, 64, 8, 8]);
        assert_eq!(g.shape(c.posterior_hat.log_var), &[2, 8]);
        assert_eq!(g.shape(c.v_sample), &[2, 8]);
        assert_eq!(g.shape(c.recon), &[2, 1, 32, 32]);
        let y = g.constant(Tensor::stack(&[&data.y[0], &data.y[1]]).unwrap());
        let c2 = forward_cycle_y(&nets, &mut g, &b, y, &mut rng).unwrap();
        assert_eq!(g.shape(c2.translated), &[2, 1, 32, 32]);
        assert_eq!(g.shape(c2.recon), &[2, 3, 32, 32]);
    }

    #[test]
    fn phases_touch_only_their_parameters() {
        let data = Dataset::in_memory(4, 2).unwrap();
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let before = t.nets.params.clone();
        let m = t.train_step(&data).unwrap();
        let bookkeeping = objective::combine_terms(&m.terms(), &t.cfg);
        assert!((bookkeeping - m.loss_g).abs() < 1e-9);
        assert!((m.gan_d[0] + m.gan_d[1] - m.loss_d).abs() < 1e-12);
        for (name, t_after) in t.nets.params.iter() {
            let changed = t_after != before.get(name).unwrap();
            let is_bias_free_zero = t_after.data().iter().all(|v| *v == 0.0);
            if !is_bias_free_zero {
                assert!(changed, "{name} did not move");
            }
        }
        assert_eq!(t.opt_d.step, 1);
        assert_eq!(t.opt_ge.step, 1);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let data = Dataset::in_memory(6, 3).unwrap();
        let mut full = Trainer::new(tiny_cfg()).unwrap();
        let rows: Vec<String> = (0..4).map(|_| full.train_step(&data).unwrap().csv_row()).collect();

        let mut first = Trainer::new(tiny_cfg()).unwrap();
        for _ in 0..2 {
            first.train_step(&data).unwrap();
        }
        let bytes = first.checkpoint().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        let mut second = Trainer::from_checkpoint(tiny_cfg(), &ck).unwrap();
        let tail: Vec<String> = (0..2).map(|_| second.train_step(&data).unwrap().csv_row()).collect();
        assert_eq!(&rows[2..], &tail[..]);
        assert!(second.nets.params.bit_identical(&full.nets.params));
        assert_eq!(second.checkpoint().to_bytes(), full.checkpoint().to_bytes());
    }

    #[test]
    fn wrong_seed_on_resume_is_rejected() {
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let ck = t.checkpoint();
        let cfg = TrainConfig { seed: 5, ..tiny_cfg() };
        assert!(matches!(Trainer::from_checkpoint(cfg, &ck), Err(TrainError::Config(_))));
    }
}
