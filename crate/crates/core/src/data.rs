//! Procedural two-domain shape dataset.
//!
//! Domain X holds grayscale outlines whose stroke width varies; domain Y holds
//! filled shapes whose hue varies. Shape class, position and size are drawn
//! from the same distribution in both domains, but the two sides are sampled
//! independently so there is no pairing.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::Domain;
use crate::tensor::Tensor;

pub const CANVAS: usize = 32;
pub const MIN_RADIUS: usize = 4;
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle];

    /// Whether the pixel at offset `(dr, dc)` from the center lies inside a
    /// shape of radius `r`.
    fn contains(self, dr: i64, dc: i64, r: i64) -> bool {
        match self {
            ShapeClass::Circle => dr * dr + dc * dc <= r * r,
            ShapeClass::Square => dr.abs() <= r && dc.abs() <= r,
            // Apex at the top, base along the bottom row.
            ShapeClass::Triangle => dr.abs() <= r && 2 * dc.abs() <= dr + r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub shape: ShapeClass,
    /// `(row, col)` in pixels.
    pub center: (usize, usize),
    pub radius: usize,
    /// Domain Y only, in `[0, 1)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hue: Option<f64>,
    /// Domain X only, one of 1, 2, 3.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stroke: Option<usize>,
    /// Seed of the generator that drew this spec.
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self, canvas: usize) -> Result<()> {
        let (r, c) = self.center;
        if self.radius < MIN_RADIUS {
            return Err(DataError::InvalidSpec(format!(
                "radius {} below minimum {MIN_RADIUS}",
                self.radius
            )));
        }
        if r < self.radius || c < self.radius || r + self.radius >= canvas || c + self.radius >= canvas {
            return Err(DataError::InvalidSpec(format!(
                "shape at {:?} with radius {} leaves the {canvas}x{canvas} canvas",
                self.center, self.radius
            )));
        }
        if let Some(h) = self.hue {
            if !(0.0..1.0).contains(&h) {
                return Err(DataError::InvalidSpec(format!("hue {h} outside [0, 1)")));
            }
        }
        if let Some(s) = self.stroke {
            if !(1..=3).contains(&s) {
                return Err(DataError::InvalidSpec(format!("stroke {s} not in 1..=3")));
            }
        }
        Ok(())
    }

    /// Boolean mask of the filled shape, row-major `canvas x canvas`.
    pub fn fill_mask(&self, canvas: usize) -> Vec<bool> {
        let (cr, cc) = (self.center.0 as i64, self.center.1 as i64);
        let r = self.radius as i64;
        let mut m = vec![false; canvas * canvas];
        for i in 0..canvas {
            for j in 0..canvas {
                m[i * canvas + j] = self.shape.contains(i as i64 - cr, j as i64 - cc, r);
            }
        }
        m
    }
}

/// Largest radius drawn on a canvas of the given size.
pub fn max_radius(canvas: usize) -> usize {
    (canvas / 2).saturating_sub(4).max(MIN_RADIUS)
}

/// Draws a spec for `domain`: uniform class, radius, and center subject to
/// containment, plus stroke (X) or hue (Y).
pub fn sample_spec<R: Rng>(domain: Domain, rng: &mut R, canvas: usize, seed: u64) -> SynthSpec {
    let shape = ShapeClass::ALL[rng.random_range(0..3)];
    let radius = rng.random_range(MIN_RADIUS..=max_radius(canvas));
    let row = rng.random_range(radius..canvas - radius);
    let col = rng.random_range(radius..canvas - radius);
    let (hue, stroke) = match domain {
        Domain::X => (None, Some(rng.random_range(1..=3))),
        Domain::Y => (Some(rng.random::<f64>()), None),
    };
    SynthSpec {
        shape,
        center: (row, col),
        radius,
        hue,
        stroke,
        seed,
    }
}

/// Pixels of `mask` within `stroke` 4-neighbour steps of the outside.
pub fn outline(mask: &[bool], canvas: usize, stroke: usize) -> Vec<bool> {
    let mut interior = mask.to_vec();
    for _ in 0..stroke {
        let prev = interior.clone();
        for i in 0..canvas {
            for j in 0..canvas {
                let k = i * canvas + j;
                if !prev[k] {
                    continue;
                }
                let edge = i == 0
                    || j == 0
                    || i + 1 == canvas
                    || j + 1 == canvas
                    || !prev[k - 1]
                    || !prev[k + 1]
                    || !prev[k - canvas]
                    || !prev[k + canvas];
                if edge {
                    interior[k] = false;
                }
            }
        }
    }
    mask.iter().zip(&interior).map(|(&m, &i)| m && !i).collect()
}

/// Outline image `[1, canvas, canvas]`: background -1, stroke +1.
pub fn render_x(spec: &SynthSpec, canvas: usize) -> Result<Tensor> {
    spec.validate(canvas)?;
    let stroke = spec
        .stroke
        .ok_or_else(|| DataError::InvalidSpec("domain X spec without stroke".into()))?;
    let lit = outline(&spec.fill_mask(canvas), canvas, stroke);
    let data = lit.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
    Ok(Tensor::new(vec![1, canvas, canvas], data).expect("sized"))
}

/// Fully saturated, full-value RGB of a hue in `[0, 1)`, channels in `[0, 1]`.
pub fn hue_to_rgb(hue: f64) -> [f64; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let sector = h.floor() as usize % 6;
    let f = h - h.floor();
    let (rise, fall) = (f, 1.0 - f);
    match sector {
        0 => [1.0, rise, 0.0],
        1 => [fall, 1.0, 0.0],
        2 => [0.0, 1.0, rise],
        3 => [0.0, fall, 1.0],
        4 => [rise, 0.0, 1.0],
        _ => [1.0, 0.0, fall],
    }
}

/// Hue in `[0, 1)` of an RGB triple in `[0, 1]`; `None` for greys.
pub fn rgb_to_hue(rgb: [f64; 3]) -> Option<f64> {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 1e-12 {
        return None;
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    Some((h / 6.0).rem_euclid(1.0))
}

/// Filled shape image `[3, canvas, canvas]` in the spec's hue on a -1 background.
pub fn render_y(spec: &SynthSpec, canvas: usize) -> Result<Tensor> {
    spec.validate(canvas)?;
    let hue = spec
        .hue
        .ok_or_else(|| DataError::InvalidSpec("domain Y spec without hue".into()))?;
    let rgb = hue_to_rgb(hue);
    let mask = spec.fill_mask(canvas);
    let plane = canvas * canvas;
    let mut data = vec![-1.0; 3 * plane];
    for (k, &m) in mask.iter().enumerate() {
        if m {
            for ch in 0..3 {
                data[ch * plane + k] = 2.0 * rgb[ch] - 1.0;
            }
        }
    }
    Ok(Tensor::new(vec![3, canvas, canvas], data).expect("sized"))
}

pub fn render(domain: Domain, spec: &SynthSpec, canvas: usize) -> Result<Tensor> {
    match domain {
        Domain::X => render_x(spec, canvas),
        Domain::Y => render_y(spec, canvas),
    }
}

/// Pixels of a `[3, H, W]` image that exceed the -1 background by more than
/// 0.5 in any channel.
pub fn foreground_mask(image: &Tensor) -> Vec<bool> {
    let plane = image.shape()[1] * image.shape()[2];
    let d = image.data();
    (0..plane)
        .map(|k| (0..image.shape()[0]).any(|ch| d[ch * plane + k] > -0.5))
        .collect()
}

/// Circular mean hue of a `[3, H, W]` image over `mask`; `None` when the
/// masked pixels carry no hue.
pub fn mean_hue(image: &Tensor, mask: &[bool]) -> Option<f64> {
    let plane = image.shape()[1] * image.shape()[2];
    let d = image.data();
    let (mut s, mut c) = (0.0, 0.0);
    for k in (0..plane).filter(|&k| mask[k]) {
        let px = [0, 1, 2].map(|ch| ((d[ch * plane + k] + 1.0) / 2.0).clamp(0.0, 1.0));
        if let Some(h) = rgb_to_hue(px) {
            let a = std::f64::consts::TAU * h;
            s += a.sin();
            c += a.cos();
        }
    }
    if s.hypot(c) < 1e-12 {
        return None;
    }
    Some((s.atan2(c) / std::f64::consts::TAU).rem_euclid(1.0))
}

/// Maps `[-1, 1]` to a byte.
pub fn quantize(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Encodes a `[1|3, H, W]` image as binary PGM or PPM.
pub fn encode_image(image: &Tensor) -> std::result::Result<Vec<u8>, String> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        ref s => return Err(format!("cannot encode image of shape {s:?}")),
    };
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    for k in 0..plane {
        for ch in 0..c {
            out.push(quantize(d[ch * plane + k]));
        }
    }
    Ok(out)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_image(image).map_err(|detail| DataError::Image {
        path: path.to_path_buf(),
        detail,
    })?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

fn header_token<R: BufRead>(r: &mut R) -> io::Result<Option<String>> {
    let mut tok = String::new();
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            return Ok((!tok.is_empty()).then_some(tok));
        }
        let ch = byte[0] as char;
        if ch == '#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
        } else if ch.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(Some(tok));
            }
        } else {
            tok.push(ch);
        }
    }
}

/// Decodes binary PGM (P5) or PPM (P6) with maxval 255 into `[1|3, H, W]`.
pub fn decode_image(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut r = BufReader::new(bytes);
    let mut next = |what: &str| -> std::result::Result<String, String> {
        header_token(&mut r)
            .map_err(|e| e.to_string())?
            .ok_or_else(|| format!("missing {what}"))
    };
    let channels = match next("magic")?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format!("unsupported magic {m}")),
    };
    let parse = |s: String, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} '{s}'"));
    let w = parse(next("width")?, "width")?;
    let h = parse(next("height")?, "height")?;
    let maxval = parse(next("maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported"));
    }
    let mut raster = Vec::new();
    r.read_to_end(&mut raster).map_err(|e| e.to_string())?;
    let plane = w * h;
    if raster.len() != channels * plane {
        return Err(format!("expected {} raster bytes, found {}", channels * plane, raster.len()));
    }
    let mut data = vec![0.0; channels * plane];
    for k in 0..plane {
        for ch in 0..channels {
            data[ch * plane + k] = dequantize(raster[k * channels + ch]);
        }
    }
    Ok(Tensor::new(vec![channels, h, w], data).expect("sized"))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_image(&bytes).map_err(|detail| DataError::Image {
        path: path.to_path_buf(),
        detail,
    })
}

/// Tiles `[1|3, H, W]` images into one `[3, rows*H + gaps, cols*W + gaps]`
/// image with one-pixel mid-grey separators. Grayscale tiles are replicated
/// over the colour channels; short rows are padded with background.
pub fn contact_sheet(rows: &[Vec<Tensor>]) -> std::result::Result<Tensor, String> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or("contact sheet needs at least one image")?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let sheet_h = rows.len() * (h + 1) - 1;
    let sheet_w = cols * (w + 1) - 1;
    let plane = sheet_h * sheet_w;
    let mut data = vec![0.0; 3 * plane];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let c = img.shape()[0];
            if img.shape()[1..] != [h, w] || !(c == 1 || c == 3) {
                return Err(format!("tile of shape {:?} does not fit {h}x{w}", img.shape()));
            }
            for ch in 0..3 {
                let src = if c == 1 { 0 } else { ch };
                for i in 0..h {
                    for j in 0..w {
                        let k = (ri * (h + 1) + i) * sheet_w + ci * (w + 1) + j;
                        data[ch * plane + k] = img.data()[(src * h + i) * w + j];
                    }
                }
            }
        }
        for ci in row.len()..cols {
            for ch in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        data[ch * plane + (ri * (h + 1) + i) * sheet_w + ci * (w + 1) + j] = -1.0;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![3, sheet_h, sheet_w], data).expect("sized"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub file: String,
    pub spec: SynthSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub domain: Domain,
    pub count: usize,
    pub canvas: usize,
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

/// Contents of `manifest.json`: one manifest per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub version: u32,
    pub x: DatasetManifest,
    pub y: DatasetManifest,
}

/// Seed of spec `index` in `domain`; independent of generation order.
pub fn spec_seed(seed: u64, domain: Domain, index: usize) -> u64 {
    // SplitMix64 finalizer over the combined key.
    let tag = match domain {
        Domain::X => 0x5851_f42d_4c95_7f2d,
        Domain::Y => 0x1405_7b7e_f767_814f,
    };
    let mut z = seed ^ tag ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn manifest_for(domain: Domain, count: usize, seed: u64, canvas: usize) -> DatasetManifest {
    let ext = match domain {
        Domain::X => "pgm",
        Domain::Y => "ppm",
    };
    let records = (0..count)
        .map(|i| {
            let s = spec_seed(seed, domain, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            ManifestRecord {
                file: format!("{}/{i:05}.{ext}", domain.tag()),
                spec: sample_spec(domain, &mut rng, canvas, s),
            }
        })
        .collect();
    DatasetManifest {
        domain,
        count,
        canvas,
        seed,
        records,
    }
}

/// Writes `<root>/x/NNNNN.pgm`, `<root>/y/NNNNN.ppm` and `<root>/manifest.json`.
pub fn generate_dataset(root: &Path, count: usize, seed: u64) -> Result<DatasetIndex> {
    let index = DatasetIndex {
        version: MANIFEST_VERSION,
        x: manifest_for(Domain::X, count, seed, CANVAS),
        y: manifest_for(Domain::Y, count, seed, CANVAS),
    };
    for m in [&index.x, &index.y] {
        let dir = root.join(m.domain.tag());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for rec in &m.records {
            let img = render(m.domain, &rec.spec, m.canvas)?;
            write_image(&root.join(&rec.file), &img)?;
        }
    }
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&index).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    Ok(index)
}

/// Images of both domains held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub index: DatasetIndex,
    /// Each `[1, H, W]`.
    pub x: Vec<Tensor>,
    /// Each `[3, H, W]`.
    pub y: Vec<Tensor>,
}

impl Dataset {
    pub fn images(&self, domain: Domain) -> &[Tensor] {
        match domain {
            Domain::X => &self.x,
            Domain::Y => &self.y,
        }
    }

    pub fn manifest(&self, domain: Domain) -> &DatasetManifest {
        match domain {
            Domain::X => &self.index.x,
            Domain::Y => &self.index.y,
        }
    }

    /// Renders a dataset directly from specs without touching the disk.
    pub fn in_memory(count: usize, seed: u64) -> Result<Self> {
        let index = DatasetIndex {
            version: MANIFEST_VERSION,
            x: manifest_for(Domain::X, count, seed, CANVAS),
            y: manifest_for(Domain::Y, count, seed, CANVAS),
        };
        let x = index.x.records.iter().map(|r| render_x(&r.spec, CANVAS)).collect::<Result<_>>()?;
        let y = index.y.records.iter().map(|r| render_y(&r.spec, CANVAS)).collect::<Result<_>>()?;
        Ok(Self { index, x, y })
    }
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    let load = |m: &DatasetManifest, channels: usize| -> Result<Vec<Tensor>> {
        if m.records.len() != m.count {
            return Err(DataError::Manifest(format!(
                "{} domain lists {} records but count {}",
                m.domain.tag(),
                m.records.len(),
                m.count
            )));
        }
        m.records
            .iter()
            .map(|r| {
                let p = root.join(&r.file);
                let img = read_image(&p)?;
                if img.shape() != [channels, m.canvas, m.canvas] {
                    return Err(DataError::Image {
                        path: p,
                        detail: format!("shape {:?} does not match the manifest", img.shape()),
                    });
                }
                Ok(img)
            })
            .collect()
    };
    let x = load(&index.x, 1)?;
    let y = load(&index.y, 3)?;
    Ok(Dataset { index, x, y })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: ShapeClass, center: (usize, usize), radius: usize) -> SynthSpec {
        SynthSpec {
            shape,
            center,
            radius,
            hue: Some(0.0),
            stroke: Some(1),
            seed: 0,
        }
    }

    #[test]
    fn square_outline_is_its_perimeter() {
        let img = render_x(&spec(ShapeClass::Square, (16, 16), 8), CANVAS).unwrap();
        for i in 0..CANVAS {
            for j in 0..CANVAS {
                let on_rows = (i == 8 || i == 24) && (8..=24).contains(&j);
                let on_cols = (j == 8 || j == 24) && (8..=24).contains(&i);
                let want = if on_rows || on_cols { 1.0 } else { -1.0 };
                assert_eq!(img.data()[i * CANVAS + j], want, "({i},{j})");
            }
        }
    }

    #[test]
    fn small_circle_lights_enough_pixels() {
        let img = render_x(&spec(ShapeClass::Circle, (10, 10), MIN_RADIUS), CANVAS).unwrap();
        let lit = img.data().iter().filter(|&&v| v > 0.0).count();
        assert!(lit >= 8, "{lit}");
        let zero = SynthSpec { radius: 0, ..spec(ShapeClass::Circle, (10, 10), 0) };
        assert!(render_x(&zero, CANVAS).is_err());
    }

    #[test]
    fn hue_zero_is_red() {
        let img = render_y(&spec(ShapeClass::Square, (16, 16), 5), CANVAS).unwrap();
        let k = 16 * CANVAS + 16;
        let plane = CANVAS * CANVAS;
        assert_eq!(img.data()[k], 1.0);
        assert_eq!(img.data()[plane + k], -1.0);
        assert_eq!(img.data()[2 * plane + k], -1.0);
    }

    #[test]
    fn hue_round_trips() {
        for i in 0..50 {
            let h = i as f64 / 50.0;
            let back = rgb_to_hue(hue_to_rgb(h)).unwrap();
            let d = (back - h).abs();
            assert!(d.min(1.0 - d) < 1e-12, "{h} {back}");
        }
    }

    #[test]
    fn circle_area() {
        let m = spec(ShapeClass::Circle, (16, 16), 8).fill_mask(CANVAS);
        let area = m.iter().filter(|&&b| b).count() as f64;
        let exact = std::f64::consts::PI * 64.0;
        // The boundary ring holds about 2 pi r pixels.
        assert!((area - exact).abs() < 2.0 * std::f64::consts::PI * 8.0, "{area}");
    }

    #[test]
    fn spec_validation() {
        assert!(spec(ShapeClass::Square, (3, 16), 4).validate(CANVAS).is_err());
        assert!(spec(ShapeClass::Square, (16, 28), 4).validate(CANVAS).is_err());
        let bad_hue = SynthSpec { hue: Some(1.0), ..spec(ShapeClass::Circle, (16, 16), 5) };
        assert!(bad_hue.validate(CANVAS).is_err());
        let bad_stroke = SynthSpec { stroke: Some(4), ..spec(ShapeClass::Circle, (16, 16), 5) };
        assert!(bad_stroke.validate(CANVAS).is_err());
    }

    #[test]
    fn pnm_header_and_size() {
        let img = render_y(&spec(ShapeClass::Circle, (16, 16), 6), CANVAS).unwrap();
        let bytes = encode_image(&img).unwrap();
        let header = b"P6\n32 32\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 3072);
        assert_eq!(decode_image(&bytes).unwrap(), img);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(1.0), 255);
    }

    #[test]
    fn contact_sheet_layout() {
        let a = Tensor::full(&[1, 2, 2], 1.0);
        let b = Tensor::full(&[3, 2, 2], -0.5);
        let sheet = contact_sheet(&[vec![a.clone(), b], vec![a]]).unwrap();
        assert_eq!(sheet.shape(), &[3, 5, 5]);
        let px = |ch: usize, i: usize, j: usize| sheet.data()[ch * 25 + i * 5 + j];
        assert_eq!(px(2, 0, 0), 1.0);
        assert_eq!(px(0, 0, 2), 0.0);
        assert_eq!(px(1, 1, 4), -0.5);
        assert_eq!(px(0, 4, 4), -1.0);
        assert!(contact_sheet(&[]).is_err());
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(decode_image(b"P3\n1 1\n255\n").is_err());
        assert!(decode_image(b"P5\n2 2\n255\nab").is_err());
        assert!(decode_image(b"P5\n1 1\n65535\n\0\0").is_err());
        let with_comment = b"P5\n# note\n1 1\n255\n\xff";
        assert_eq!(decode_image(with_comment).unwrap().data(), &[1.0]);
    }
}
