//! Pretrained-free evaluation: diversity and Fréchet scores in a fixed random
//! feature space, reference-guided translation, and disentanglement probes on
//! the synthetic shapes.
//!
//! Scores are computed in a random projection, not in a pretrained feature
//! space, so only relative comparisons between runs are meaningful.

use std::collections::VecDeque;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, Dataset, SynthSpec};
use crate::nets::{Domain, Networks};
use crate::stats::{self, StatsError};
use crate::tensor::{Tensor, TensorError};

pub const FEATURE_DIM: usize = 64;
pub const HUE_SWEEP: [f64; 9] = [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];

pub const FEATURE_NOTE: &str = "Diversity and FID-lite use a seeded random projection to 64 features, \
not a pretrained network; absolute values are not comparable to published LPIPS or FID numbers.";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Numeric(#[from] StatsError),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        EvalError::Numeric(e.into())
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Frozen random linear map from flattened images to 64 features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProjector {
    input_dim: usize,
    /// `[FEATURE_DIM, input_dim]`, rows of unit norm.
    matrix: Vec<f64>,
}

impl FeatureProjector {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut matrix = Vec::with_capacity(FEATURE_DIM * input_dim);
        for _ in 0..FEATURE_DIM {
            let row: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            matrix.extend(row.iter().map(|v| v / norm));
        }
        Self { input_dim, matrix }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.input_dim..][..self.input_dim]
    }

    pub fn project_one(&self, image: &Tensor) -> Result<Vec<f64>> {
        if image.len() != self.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "project",
                shapes: vec![image.shape().to_vec(), vec![self.input_dim]],
            }
            .into());
        }
        Ok(self
            .matrix
            .chunks(self.input_dim)
            .map(|r| r.iter().zip(image.data()).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// Features of every image as `[n, 64]`.
    pub fn project(&self, images: &[Tensor]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * FEATURE_DIM);
        for img in images {
            data.extend(self.project_one(img)?);
        }
        Ok(Tensor::new(vec![images.len(), FEATURE_DIM], data)?)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// How the domain-specific codes of the `K` samples per input are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeSampling {
    /// Independent `v ~ N(0, I)` for every sample.
    Resampled,
    /// One `v` per input, shared by all of its samples.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiversitySettings {
    pub samples_per_input: usize,
    /// Total number of random sample pairs averaged.
    pub pairs: usize,
    pub seed: u64,
}

impl Default for DiversitySettings {
    fn default() -> Self {
        Self {
            samples_per_input: 20,
            pairs: 2000,
            seed: 0,
        }
    }
}

/// Canonical input order so scores do not depend on how inputs are listed.
fn canonical_order(inputs: &[Tensor]) -> Vec<&Tensor> {
    let mut v: Vec<&Tensor> = inputs.iter().collect();
    v.sort_by(|a, b| {
        a.shape().cmp(b.shape()).then_with(|| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    v
}

/// Translates each X input `K` times and averages feature distances over
/// random pairs of samples that share an input.
pub fn diversity_score(
    nets: &Networks,
    inputs: &[Tensor],
    projector: &FeatureProjector,
    settings: &DiversitySettings,
    sampling: CodeSampling,
) -> Result<f64> {
    let k = settings.samples_per_input;
    if k < 2 {
        return Err(EvalError::InsufficientData(format!("diversity needs K >= 2 samples, got {k}")));
    }
    if inputs.is_empty() || settings.pairs == 0 {
        return Err(EvalError::InsufficientData("diversity needs inputs and pairs".into()));
    }
    let dim = nets.arch.code_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut features = Vec::with_capacity(inputs.len());
    for x in canonical_order(inputs) {
        let v = match sampling {
            CodeSampling::Resampled => normal(&[k, dim], &mut rng),
            CodeSampling::Fixed => {
                let one = normal(&[1, dim], &mut rng);
                Tensor::stack(&vec![&one.unstack()[0]; k])?
            }
        };
        let batch = Tensor::stack(&vec![x; k])?;
        let out = nets.translate(Domain::X, &batch, &v)?;
        features.push(projector.project(&out.unstack())?);
    }
    let mut total = 0.0;
    for _ in 0..settings.pairs {
        let f = &features[rng.random_range(0..features.len())];
        let a = rng.random_range(0..k);
        let mut b = rng.random_range(0..k - 1);
        if b >= a {
            b += 1;
        }
        total += distance(&f.data()[a * FEATURE_DIM..][..FEATURE_DIM], &f.data()[b * FEATURE_DIM..][..FEATURE_DIM]);
    }
    Ok(total / settings.pairs as f64)
}

fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    t
}

/// Fréchet distance between Gaussian fits of projected generated and real images.
pub fn fid_lite(generated: &[Tensor], real: &[Tensor], projector: &FeatureProjector) -> Result<f64> {
    let need = FEATURE_DIM + 1;
    for (what, set) in [("generated", generated), ("real", real)] {
        if set.len() < need {
            return Err(EvalError::InsufficientData(format!(
                "fid_lite needs at least {need} {what} images, got {}",
                set.len()
            )));
        }
    }
    let a = stats::fit_gaussian_stats(&projector.project(generated)?)?;
    let b = stats::fit_gaussian_stats(&projector.project(real)?)?;
    Ok(stats::frechet_distance(&a, &b)?)
}

/// `G_y(E_c(x), mean of E_d(reference))` for one X image and one Y reference.
pub fn style_transfer(nets: &Networks, x: &Tensor, reference: &Tensor) -> Result<Tensor> {
    let v = nets.latent_codes(Domain::Y, reference)?.v;
    let dim = v.len();
    let batch = Tensor::stack(&[x])?;
    let out = nets.translate(Domain::X, &batch, &Tensor::new(vec![1, dim], v)?)?;
    let shape = out.shape()[1..].to_vec();
    Ok(out.reshaped(&shape)?)
}

/// Ranks with ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Filled region of a `[1, H, W]` outline: every pixel not reachable from the
/// border through unlit pixels.
pub fn filled_outline(image: &Tensor) -> Vec<bool> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let lit: Vec<bool> = image.data().iter().map(|&v| v > 0.0).collect();
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for i in 0..h {
        for j in 0..w {
            if (i == 0 || j == 0 || i + 1 == h || j + 1 == w) && !lit[i * w + j] {
                outside[i * w + j] = true;
                queue.push_back((i, j));
            }
        }
    }
    while let Some((i, j)) = queue.pop_front() {
        let mut visit = |a: usize, b: usize| {
            let k = a * w + b;
            if !lit[k] && !outside[k] {
                outside[k] = true;
                queue.push_back((a, b));
            }
        };
        if i > 0 {
            visit(i - 1, j);
        }
        if i + 1 < h {
            visit(i + 1, j);
        }
        if j > 0 {
            visit(i, j - 1);
        }
        if j + 1 < w {
            visit(i, j + 1);
        }
    }
    outside.iter().map(|o| !o).collect()
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Signed hue difference `a - b` on the unit circle, in `(-0.5, 0.5]`.
fn hue_offset(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    if d > 0.5 {
        d - 1.0
    } else {
        d
    }
}

/// Hue along a sweep as a continuous angle (in turns) relative to the middle
/// entry, unwrapping each consecutive step to the shorter way round.
fn unwrap_hues(hues: &[f64]) -> Vec<f64> {
    let mid = hues.len() / 2;
    let mut out = vec![0.0; hues.len()];
    for k in mid + 1..hues.len() {
        out[k] = out[k - 1] + hue_offset(hues[k], hues[k - 1]);
    }
    for k in (0..mid).rev() {
        out[k] = out[k + 1] + hue_offset(hues[k], hues[k + 1]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Mean Spearman correlation between each code coordinate and output hue.
    pub hue_rho_per_coord: Vec<f64>,
    /// `max |rho|` over coordinates.
    pub hue_rho_max: f64,
    /// Specs whose sweep produced a defined hue everywhere.
    pub hue_specs_used: usize,
    /// Median IoU between the filled input outline and the generated shape mask.
    pub iou_median: f64,
    pub iou_specs_used: usize,
}

/// Hue control and shape preservation on X specs. For hue control each code
/// coordinate is swept over [`HUE_SWEEP`] with the others at zero; for shape
/// preservation one prior code per spec is drawn from `seed`.
pub fn disentanglement_probe(nets: &Networks, specs: &[SynthSpec], seed: u64) -> Result<ProbeReport> {
    let dim = nets.arch.code_dim;
    let size = nets.arch.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rho_sum = vec![0.0; dim];
    let mut used = 0;
    let mut ious = Vec::with_capacity(specs.len());
    let s = HUE_SWEEP.len();
    for spec in specs {
        let x = data::render_x(spec, size).map_err(|e| EvalError::InsufficientData(e.to_string()))?;
        let mut v = Tensor::zeros(&[dim * s, dim]);
        for c in 0..dim {
            for (k, &val) in HUE_SWEEP.iter().enumerate() {
                v.data_mut()[(c * s + k) * dim + c] = val;
            }
        }
        let batch = Tensor::stack(&vec![&x; dim * s])?;
        let outs = nets.translate(Domain::X, &batch, &v)?.unstack();
        let hues: Option<Vec<f64>> = outs
            .iter()
            .map(|o| data::mean_hue(o, &data::foreground_mask(o)))
            .collect();
        if let Some(h) = hues {
            for c in 0..dim {
                let sweep = &h[c * s..][..s];
                rho_sum[c] += spearman(&HUE_SWEEP, &unwrap_hues(sweep));
            }
            used += 1;
        }

        let v = normal(&[1, dim], &mut rng);
        let out = nets.translate(Domain::X, &Tensor::stack(&[&x])?, &v)?.unstack().remove(0);
        ious.push(iou(&filled_outline(&x), &data::foreground_mask(&out)));
    }
    let per: Vec<f64> = rho_sum
        .iter()
        .map(|r| if used > 0 { r / used as f64 } else { 0.0 })
        .collect();
    let rho_max = per.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(ProbeReport {
        hue_rho_per_coord: per,
        hue_rho_max: rho_max,
        hue_specs_used: used,
        iou_median: median(ious.clone()).unwrap_or(0.0),
        iou_specs_used: ious.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub diversity_inputs: usize,
    pub diversity: DiversitySettings,
    pub fid_samples: usize,
    pub probe_specs: usize,
    pub projector_seed: u64,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            diversity_inputs: 100,
            diversity: DiversitySettings::default(),
            fid_samples: 2000,
            probe_specs: 100,
            projector_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub note: String,
    pub diversity: f64,
    pub diversity_fixed_v: f64,
    pub fid_lite: f64,
    /// Fréchet score between two disjoint halves of the real Y images, when
    /// there are enough of them.
    pub fid_real_vs_real: Option<f64>,
    pub probe: ProbeReport,
    pub diversity_inputs: usize,
    pub diversity_samples_per_input: usize,
    pub diversity_pairs: usize,
    pub fid_generated: usize,
    pub fid_real: usize,
    pub settings: EvalSettings,
}

/// Translates `count` X images (cycling through the dataset) with fresh prior codes.
pub fn generate_translations(nets: &Networks, xs: &[Tensor], count: usize, seed: u64) -> Result<Vec<Tensor>> {
    if xs.is_empty() {
        return Err(EvalError::InsufficientData("no X images to translate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let chunk = 50;
    let mut i = 0;
    while i < count {
        let n = chunk.min(count - i);
        let batch: Vec<&Tensor> = (i..i + n).map(|j| &xs[j % xs.len()]).collect();
        let v = normal(&[n, nets.arch.code_dim], &mut rng);
        out.extend(nets.translate(Domain::X, &Tensor::stack(&batch)?, &v)?.unstack());
        i += n;
    }
    Ok(out)
}

/// Every metric of the report on one network snapshot.
pub fn evaluate(nets: &Networks, data: &Dataset, settings: &EvalSettings) -> Result<EvalReport> {
    let size = nets.arch.image_size;
    let projector = FeatureProjector::new(nets.arch.y_channels * size * size, settings.projector_seed);
    let inputs = &data.x[..settings.diversity_inputs.min(data.x.len())];
    let diversity = diversity_score(nets, inputs, &projector, &settings.diversity, CodeSampling::Resampled)?;
    let diversity_fixed_v = diversity_score(nets, inputs, &projector, &settings.diversity, CodeSampling::Fixed)?;

    let real = &data.y[..settings.fid_samples.min(data.y.len())];
    let generated = generate_translations(nets, &data.x, settings.fid_samples, settings.seed)?;
    let fid = fid_lite(&generated, real, &projector)?;
    let half = data.y.len() / 2;
    let fid_real_vs_real = if half > FEATURE_DIM {
        Some(fid_lite(&data.y[..half], &data.y[half..2 * half], &projector)?)
    } else {
        None
    };

    let specs: Vec<SynthSpec> = data
        .index
        .x
        .records
        .iter()
        .take(settings.probe_specs)
        .map(|r| r.spec.clone())
        .collect();
    let probe = disentanglement_probe(nets, &specs, settings.seed)?;
    Ok(EvalReport {
        note: FEATURE_NOTE.to_string(),
        diversity,
        diversity_fixed_v,
        fid_lite: fid,
        fid_real_vs_real,
        probe,
        diversity_inputs: inputs.len(),
        diversity_samples_per_input: settings.diversity.samples_per_input,
        diversity_pairs: settings.diversity.pairs,
        fid_generated: generated.len(),
        fid_real: real.len(),
        settings: settings.clone(),
    })
}

/// Rows of input followed by `samples` translations, for a visual check.
pub fn contact_sheet(nets: &Networks, xs: &[Tensor], samples: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(xs.len());
    for x in xs {
        let v = normal(&[samples, nets.arch.code_dim], &mut rng);
        let out = nets.translate(Domain::X, &Tensor::stack(&vec![x; samples])?, &v)?;
        let mut row = vec![x.clone()];
        row.extend(out.unstack());
        rows.push(row);
    }
    data::contact_sheet(&rows).map_err(EvalError::InsufficientData)
}

/// Hue sweep of the first code coordinate for each input: rows are inputs,
/// columns follow [`HUE_SWEEP`].
pub fn sweep_sheet(nets: &Networks, xs: &[Tensor], coord: usize) -> Result<Tensor> {
    let dim = nets.arch.code_dim;
    let mut rows = Vec::with_capacity(xs.len());
    for x in xs {
        let mut v = Tensor::zeros(&[HUE_SWEEP.len(), dim]);
        for (k, &val) in HUE_SWEEP.iter().enumerate() {
            v.data_mut()[k * dim + coord.min(dim - 1)] = val;
        }
        let out = nets.translate(Domain::X, &Tensor::stack(&vec![x; HUE_SWEEP.len()])?, &v)?;
        let mut row = vec![x.clone()];
        row.extend(out.unstack());
        rows.push(row);
    }
    data::contact_sheet(&rows).map_err(EvalError::InsufficientData)
}

/// Picks `n` distinct dataset indices with a seeded shuffle.
pub fn pick_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..len).collect();
    all.choose_multiple(&mut rng, n.min(len)).copied().collect()
}
