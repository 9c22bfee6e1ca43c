//! Synthetic multi-attribute images, an on-disk loader, splits and
//! attribute grouping schemes.
//!
//! Global attributes change whole-image statistics (brightness, gradients,
//! colour casts, periodic textures). Local attributes add a coloured patch
//! at a fixed region. Designated global/local pairs are drawn with a
//! chosen Pearson correlation so the two task groups share structure.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::par::{self, Execution};
use crate::pnm::Image;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_HEIGHT: usize = 64;
pub const DEFAULT_WIDTH: usize = 32;
pub const BACKGROUND: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Global,
    Local,
}

/// Rectangle in fractions of image height/width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub row: f64,
    pub col: f64,
    pub height: f64,
    pub width: f64,
}

impl Region {
    pub fn area(&self) -> f64 {
        self.height * self.width
    }

    pub fn center_row(&self) -> f64 {
        self.row + self.height / 2.0
    }

    fn within_bounds(&self) -> bool {
        self.row >= 0.0
            && self.col >= 0.0
            && self.height > 0.0
            && self.width > 0.0
            && self.row + self.height <= 1.0 + 1e-12
            && self.col + self.width <= 1.0 + 1e-12
    }

    pub fn overlap(&self, other: &Region) -> f64 {
        let h = (self.row + self.height).min(other.row + other.height) - self.row.max(other.row);
        let w = (self.col + self.width).min(other.col + other.width) - self.col.max(other.col);
        h.max(0.0) * w.max(0.0)
    }

    /// Pixel bounds `(y0, y1, x0, x1)` on an `h x w` image.
    fn pixels(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let y0 = (self.row * h as f64).round() as usize;
        let y1 = (((self.row + self.height) * h as f64).round() as usize).clamp(y0 + 1, h);
        let x0 = (self.col * w as f64).round() as usize;
        let x1 = (((self.col + self.width) * w as f64).round() as usize).clamp(x0 + 1, w);
        (y0.min(h - 1), y1, x0.min(w - 1), x1)
    }
}

/// How an attribute shows up in the pixels when it is on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    /// Adds `delta` to every pixel and channel.
    Brightness { delta: f64 },
    /// Adds `amount * (y / (H - 1) - 0.5)`.
    VerticalGradient { amount: f64 },
    /// Adds `amount * (x / (W - 1) - 0.5)`.
    HorizontalGradient { amount: f64 },
    /// Adds `delta` to one channel.
    Tint { channel: usize, delta: f64 },
    /// Square wave of `amplitude` along rows (`horizontal`) or columns.
    Stripes { horizontal: bool, period: usize, amplitude: f64 },
    /// Checkerboard of `amplitude` with cells of `period / 2` pixels.
    Checker { period: usize, amplitude: f64 },
    /// Adds `color` inside the attribute's region.
    Patch { color: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub kind: AttributeKind,
    #[serde(default)]
    pub region: Option<Region>,
    pub base_rate: f64,
    pub effect: Effect,
}

impl AttributeSpec {
    pub fn global(name: &str, base_rate: f64, effect: Effect) -> Self {
        AttributeSpec {
            name: name.into(),
            kind: AttributeKind::Global,
            region: None,
            base_rate,
            effect,
        }
    }

    pub fn local(name: &str, base_rate: f64, region: Region, color: [f64; 3]) -> Self {
        AttributeSpec {
            name: name.into(),
            kind: AttributeKind::Local,
            region: Some(region),
            base_rate,
            effect: Effect::Patch { color },
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.base_rate > 0.05 && self.base_rate < 0.95) {
            return Err(Error::Config(format!(
                "attribute {}: base rate {} outside (0.05, 0.95)",
                self.name, self.base_rate
            )));
        }
        match (self.kind, &self.region, &self.effect) {
            (AttributeKind::Local, Some(r), Effect::Patch { .. }) if r.within_bounds() => Ok(()),
            (AttributeKind::Local, _, _) => Err(Error::Config(format!(
                "local attribute {} needs an in-bounds region and a patch effect",
                self.name
            ))),
            (AttributeKind::Global, _, Effect::Patch { .. }) => Err(Error::Config(format!(
                "global attribute {} cannot use a patch effect",
                self.name
            ))),
            (AttributeKind::Global, _, _) => Ok(()),
        }
    }
}

/// Everything needed to generate a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub attributes: Vec<AttributeSpec>,
    /// Attribute index pairs drawn with Pearson correlation `correlation`.
    pub pairs: Vec<(usize, usize)>,
    pub correlation: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for SyntheticSpec {
    /// 13 global and 13 local attributes on 64x32 images, global `i`
    /// paired with local `i`, correlation 0.4, noise 0.05.
    fn default() -> Self {
        let attributes = default_attributes();
        let pairs = (0..13).map(|i| (i, 13 + i)).collect();
        SyntheticSpec {
            attributes,
            pairs,
            correlation: 0.4,
            noise: 0.05,
            height: DEFAULT_HEIGHT,
            width: DEFAULT_WIDTH,
        }
    }
}

/// The default 26-attribute set: 13 global then 13 local.
pub fn default_attributes() -> Vec<AttributeSpec> {
    let rates = [0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.18, 0.22, 0.28, 0.33, 0.42];
    let globals = [
        ("bright", Effect::Brightness { delta: 0.075 }),
        ("top_lit", Effect::VerticalGradient { amount: -0.1 }),
        ("side_lit", Effect::HorizontalGradient { amount: 0.1 }),
        ("reddish", Effect::Tint { channel: 0, delta: 0.06 }),
        ("greenish", Effect::Tint { channel: 1, delta: 0.06 }),
        ("bluish", Effect::Tint { channel: 2, delta: 0.06 }),
        ("fine_rows", Effect::Stripes { horizontal: true, period: 2, amplitude: 0.04 }),
        ("fine_cols", Effect::Stripes { horizontal: false, period: 2, amplitude: 0.04 }),
        ("coarse_rows", Effect::Stripes { horizontal: true, period: 8, amplitude: 0.04 }),
        ("coarse_cols", Effect::Stripes { horizontal: false, period: 8, amplitude: 0.04 }),
        ("checker", Effect::Checker { period: 4, amplitude: 0.04 }),
        ("mid_rows", Effect::Stripes { horizontal: true, period: 4, amplitude: 0.04 }),
        ("checker_coarse", Effect::Checker { period: 8, amplitude: 0.04 }),
    ];
    let r = |row, col, height, width| Region { row, col, height, width };
    let locals = [
        ("head", r(0.02, 0.3, 0.14, 0.4), [0.175, 0.05, 0.05]),
        ("upper_left", r(0.18, 0.05, 0.18, 0.4), [0.05, 0.175, 0.05]),
        ("upper_right", r(0.18, 0.55, 0.18, 0.4), [0.05, 0.05, 0.175]),
        ("torso", r(0.38, 0.25, 0.15, 0.5), [0.175, 0.175, 0.05]),
        ("mid_left", r(0.55, 0.05, 0.15, 0.4), [0.175, 0.05, 0.175]),
        ("mid_right", r(0.55, 0.55, 0.15, 0.4), [0.05, 0.175, 0.175]),
        ("lower_left", r(0.72, 0.05, 0.12, 0.4), [0.15, 0.15, 0.15]),
        ("lower_right", r(0.72, 0.55, 0.12, 0.4), [0.175, 0.1, 0.0]),
        ("feet", r(0.87, 0.2, 0.11, 0.6), [0.0, 0.1, 0.175]),
        ("left_edge", r(0.2, 0.0, 0.6, 0.06), [0.175, 0.175, 0.175]),
        ("right_edge", r(0.2, 0.94, 0.6, 0.06), [0.1, 0.175, 0.0]),
        ("corner_left", r(0.0, 0.0, 0.1, 0.25), [0.0, 0.175, 0.1]),
        ("corner_right", r(0.0, 0.75, 0.1, 0.25), [0.175, 0.0, 0.1]),
    ];
    let mut out: Vec<_> = globals
        .iter()
        .zip(rates)
        .map(|((name, e), p)| AttributeSpec::global(name, p, *e))
        .collect();
    out.extend(
        locals
            .iter()
            .zip(rates)
            .map(|((name, region, color), p)| AttributeSpec::local(name, p, *region, *color)),
    );
    out
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let count = |k| self.attributes.iter().filter(|a| a.kind == k).count();
        if count(AttributeKind::Global) < 2 || count(AttributeKind::Local) < 2 {
            return Err(Error::Config("need at least 2 global and 2 local attributes".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::Config(format!("correlation {} outside [0, 1]", self.correlation)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise {} must be a finite non-negative value", self.noise)));
        }
        for a in &self.attributes {
            a.validate()?;
        }
        let locals: Vec<_> = self.attributes.iter().filter_map(|a| a.region.map(|r| (a, r))).collect();
        for (i, (a, ra)) in locals.iter().enumerate() {
            for (b, rb) in &locals[i + 1..] {
                let frac = ra.overlap(rb) / ra.area().min(rb.area());
                if frac > 0.5 {
                    return Err(Error::Config(format!(
                        "regions of {} and {} overlap by {:.0}% of the smaller one",
                        a.name,
                        b.name,
                        frac * 100.0
                    )));
                }
            }
        }
        let mut used = vec![false; self.attributes.len()];
        for &(i, j) in &self.pairs {
            if i >= used.len() || j >= used.len() || i == j || used[i] || used[j] {
                return Err(Error::Config(format!("bad correlated pair ({i}, {j})")));
            }
            used[i] = true;
            used[j] = true;
            let (p, q) = (self.attributes[i].base_rate, self.attributes[j].base_rate);
            let joint = p * q + self.correlation * (p * (1.0 - p) * q * (1.0 - q)).sqrt();
            if joint > p.min(q) + 1e-12 || joint < (p + q - 1.0).max(0.0) - 1e-12 {
                return Err(Error::Config(format!(
                    "correlation {} infeasible for base rates {p} and {q}",
                    self.correlation
                )));
            }
        }
        Ok(())
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }

    /// Draws one label vector.
    pub fn sample_labels(&self, rng: &mut impl Rng) -> Vec<u8> {
        let mut labels = vec![0u8; self.attributes.len()];
        let mut done = vec![false; self.attributes.len()];
        for &(i, j) in &self.pairs {
            let (p, q) = (self.attributes[i].base_rate, self.attributes[j].base_rate);
            let joint = p * q + self.correlation * (p * (1.0 - p) * q * (1.0 - q)).sqrt();
            let xi = rng.gen::<f64>() < p;
            let pj = if xi { joint / p } else { (q - joint) / (1.0 - p) };
            labels[i] = xi as u8;
            labels[j] = (rng.gen::<f64>() < pj) as u8;
            done[i] = true;
            done[j] = true;
        }
        for (k, a) in self.attributes.iter().enumerate() {
            if !done[k] {
                labels[k] = (rng.gen::<f64>() < a.base_rate) as u8;
            }
        }
        labels
    }

    /// Noise-free image for a label vector, clamped to `[0, 1]`.
    pub fn render(&self, labels: &[u8]) -> Tensor {
        let (h, w) = (self.height, self.width);
        let mut img = vec![BACKGROUND; h * w * 3];
        for (a, &on) in self.attributes.iter().zip(labels) {
            if on == 1 {
                apply_effect(&mut img, h, w, a);
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Tensor::from_vec(Shape::new(1, h, w, 3), img).expect("sized to shape")
    }
}

fn square_wave(coord: usize, period: usize) -> f64 {
    let half = (period / 2).max(1);
    if (coord / half) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn apply_effect(img: &mut [f64], h: usize, w: usize, a: &AttributeSpec) {
    let mut add = |f: &dyn Fn(usize, usize, usize) -> f64| {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    img[(y * w + x) * 3 + c] += f(y, x, c);
                }
            }
        }
    };
    let frac = |v: usize, n: usize| if n > 1 { v as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
    match a.effect {
        Effect::Brightness { delta } => add(&|_, _, _| delta),
        Effect::VerticalGradient { amount } => add(&|y, _, _| amount * frac(y, h)),
        Effect::HorizontalGradient { amount } => add(&|_, x, _| amount * frac(x, w)),
        Effect::Tint { channel, delta } => add(&|_, _, c| if c == channel { delta } else { 0.0 }),
        Effect::Stripes { horizontal, period, amplitude } => add(&|y, x, _| {
            amplitude * square_wave(if horizontal { y } else { x }, period)
        }),
        Effect::Checker { period, amplitude } => {
            add(&|y, x, _| amplitude * square_wave(y, period) * square_wave(x, period))
        }
        Effect::Patch { color } => {
            let Some(region) = a.region else { return };
            let (y0, y1, x0, x1) = region.pixels(h, w);
            for y in y0..y1 {
                for x in x0..x1 {
                    for c in 0..3 {
                        img[(y * w + x) * 3 + c] += color[c];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<u8>,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub attribute_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_attributes(&self) -> usize {
        self.attribute_names.len()
    }

    /// Stacked images plus targets for the two attribute groups.
    pub fn batch(&self, indices: &[usize], grouping: &GroupingScheme) -> Result<Batch> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let images = Tensor::stack(&images)?;
        let targets = |group: &[usize]| {
            let data = indices
                .iter()
                .flat_map(|&i| group.iter().map(move |&a| self.samples[i].labels[a] as f64))
                .collect();
            Tensor::from_vec(Shape::new(indices.len(), 1, 1, group.len()), data)
        };
        Ok(Batch {
            images,
            targets_a: targets(&grouping.group_a)?,
            targets_b: targets(&grouping.group_b)?,
        })
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            attribute_names: self.attribute_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub targets_a: Tensor,
    pub targets_b: Tensor,
}

/// Generates `n` samples. Sample `i` depends only on `(spec, seed, i)`, so
/// the result is identical under either execution mode.
pub fn generate_synthetic(n: usize, spec: &SyntheticSpec, seed: u64, exec: Execution) -> Result<Dataset> {
    spec.validate()?;
    let noise = if spec.noise > 0.0 {
        Some(Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let samples = par::map_range(exec, n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let labels = spec.sample_labels(&mut rng);
        let mut image = spec.render(&labels);
        if let Some(noise) = &noise {
            for v in image.data_mut() {
                *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        Sample {
            image,
            labels,
            id: format!("{i:06}"),
        }
    });
    Ok(Dataset {
        attribute_names: spec.attribute_names(),
        samples,
    })
}

/// Name of the labels table written by [`save_dataset`].
pub const LABELS_FILE: &str = "labels.csv";
/// Attribute descriptions stored next to a generated dataset.
pub const ATTRIBUTES_FILE: &str = "attributes.json";

pub fn save_attributes(path: &Path, attributes: &[AttributeSpec]) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(attributes)?).map_err(io_err(path))
}

pub fn load_attributes(path: &Path) -> Result<Vec<AttributeSpec>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let attributes: Vec<AttributeSpec> = serde_json::from_slice(&bytes)?;
    for a in &attributes {
        a.validate()?;
    }
    Ok(attributes)
}

/// Subdirectory holding images written by [`save_dataset`].
pub const IMAGES_DIR: &str = "images";

/// Writes `dir/images/<id>.ppm` and `dir/labels.csv`.
///
/// The labels table is comma-separated with `\n` line endings. The header
/// is `filename,<attribute 1>,...,<attribute L>`; each following row is an
/// image filename relative to the image directory and then `L` values,
/// each `0` or `1`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let img_dir = dir.join(IMAGES_DIR);
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let labels_path = dir.join(LABELS_FILE);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&labels_path)
        .map_err(|e| csv_err(&labels_path, 0, e))?;
    let mut header = vec!["filename".to_string()];
    header.extend(ds.attribute_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(&labels_path, 1, e))?;
    for (row, s) in ds.samples.iter().enumerate() {
        let file = format!("{}.ppm", s.id);
        let path = img_dir.join(&file);
        fs::write(&path, tensor_to_image(&s.image)?.encode()).map_err(io_err(&path))?;
        let mut rec = vec![file];
        rec.extend(s.labels.iter().map(|l| l.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(&labels_path, row + 2, e))?;
    }
    w.flush().map_err(io_err(&labels_path))?;
    Ok(())
}

fn csv_err(path: &Path, line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Quantises a `[1, H, W, 3]` tensor in `[0, 1]` to an 8-bit RGB image.
pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let s = t.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(Error::InvalidShape(format!("expected [1,H,W,3] image, got {s:?}")));
    }
    let data = t.data().iter().map(|v| quantize(*v)).collect();
    Image::rgb(s.w(), s.h(), data)
}

/// `[0, 1] -> 0..=255`, rounding half to even.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Decoded image as a `[1, height, width, 3]` tensor in `[0, 1]`, resized
/// by nearest neighbour. Grey images are replicated over three channels.
pub fn image_to_tensor(img: &Image, height: usize, width: usize) -> Tensor {
    let scale = img.maxval as f64;
    Tensor::from_fn(Shape::new(1, height, width, 3), |[_, y, x, c]| {
        let sy = y * img.height / height;
        let sx = x * img.width / width;
        let ch = if img.channels == 3 { c } else { 0 };
        img.data[(sy * img.width + sx) * img.channels + ch] as f64 / scale
    })
}

/// Reads a labels table (format as in [`save_dataset`]) and the images it
/// names from `image_dir`.
pub fn load_dataset(image_dir: &Path, labels_file: &Path, height: usize, width: usize) -> Result<Dataset> {
    if height == 0 || width == 0 {
        return Err(Error::Config("target image size must be positive".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(labels_file)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io {
                path: labels_file.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            },
            _ => csv_err(labels_file, 1, e),
        })?;
    let header = rdr.headers().map_err(|e| csv_err(labels_file, 1, e))?.clone();
    if header.len() < 2 || &header[0] != "filename" {
        return Err(csv_err(labels_file, 1, "header must start with `filename` followed by attribute names"));
    }
    let attribute_names: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut samples = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(labels_file, line, e))?;
        if rec.len() != header.len() {
            return Err(csv_err(
                labels_file,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let labels = rec
            .iter()
            .skip(1)
            .map(|v| match v.trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(csv_err(labels_file, line, format!("label {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let file = &rec[0];
        let path: PathBuf = image_dir.join(file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let img = Image::decode(&bytes).map_err(|e| csv_err(labels_file, line, format!("{file}: {e}")))?;
        let id = Path::new(file)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| file.to_string());
        samples.push(Sample {
            image: image_to_tensor(&img, height, width),
            labels,
            id,
        });
    }
    Ok(Dataset {
        attribute_names,
        samples,
    })
}

/// Deterministic shuffled partition into train/validation/test. Sizes are
/// `round(n * train)`, `round(n * val)` and the remainder.
pub fn split(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (tr, va, te) = ratios;
    if tr <= 0.0 || va <= 0.0 || te <= 0.0 || ((tr + va + te) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let n = ds.len();
    let n_train = (n as f64 * tr).round() as usize;
    let n_val = (n as f64 * va).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!("split of {n} samples by {ratios:?} leaves a partition empty")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        ds.subset(&idx[..n_train]),
        ds.subset(&idx[n_train..n_train + n_val]),
        ds.subset(&idx[n_train + n_val..]),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingKind {
    #[default]
    GlobalLocal,
    RareFrequent,
    TopDown,
    Random,
}

impl GroupingKind {
    pub const ALL: [GroupingKind; 4] = [
        GroupingKind::GlobalLocal,
        GroupingKind::RareFrequent,
        GroupingKind::TopDown,
        GroupingKind::Random,
    ];

    pub fn label(self) -> &'static str {
        match self {
            GroupingKind::GlobalLocal => "global_local",
            GroupingKind::RareFrequent => "rare_frequent",
            GroupingKind::TopDown => "top_down",
            GroupingKind::Random => "random",
        }
    }
}

/// Partition of attribute indices into the Task-A and Task-B groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingScheme {
    pub kind: GroupingKind,
    pub group_a: Vec<usize>,
    pub group_b: Vec<usize>,
}

impl GroupingScheme {
    /// Group A indices followed by group B indices.
    pub fn order(&self) -> Vec<usize> {
        self.group_a.iter().chain(&self.group_b).copied().collect()
    }
}

/// Seeded permutation of `0..l` cut in half; needs only the attribute count.
pub fn random_grouping(l: usize, seed: u64) -> Result<GroupingScheme> {
    if l < 2 {
        return Err(Error::Config("grouping needs at least 2 attributes".into()));
    }
    let mut idx: Vec<usize> = (0..l).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (lo, hi) = idx.split_at(l / 2);
    let (mut lo, mut hi) = (lo.to_vec(), hi.to_vec());
    lo.sort_unstable();
    hi.sort_unstable();
    Ok(GroupingScheme {
        kind: GroupingKind::Random,
        group_a: lo,
        group_b: hi,
    })
}

/// Splits attributes into the Task-A and Task-B groups.
///
/// * `GlobalLocal`: global attributes form group A.
/// * `RareFrequent`: the half with the lowest base rates forms group A.
/// * `TopDown`: local attributes whose region centre lies in the upper half
///   join group A; global attributes alternate, starting with A.
/// * `Random`: see [`random_grouping`].
pub fn group_attributes(spec: &[AttributeSpec], kind: GroupingKind, seed: u64) -> Result<GroupingScheme> {
    let l = spec.len();
    if l < 2 {
        return Err(Error::Config("grouping needs at least 2 attributes".into()));
    }
    let (a, b): (Vec<usize>, Vec<usize>) = match kind {
        GroupingKind::GlobalLocal => (0..l).partition(|&i| spec[i].kind == AttributeKind::Global),
        GroupingKind::RareFrequent => {
            let mut idx: Vec<usize> = (0..l).collect();
            idx.sort_by(|&i, &j| spec[i].base_rate.total_cmp(&spec[j].base_rate).then(i.cmp(&j)));
            let (lo, hi) = idx.split_at(l / 2);
            let (mut lo, mut hi) = (lo.to_vec(), hi.to_vec());
            lo.sort_unstable();
            hi.sort_unstable();
            (lo, hi)
        }
        GroupingKind::TopDown => {
            let mut global_rank = 0;
            (0..l).partition(|&i| match spec[i].region {
                Some(r) => r.center_row() < 0.5,
                None => {
                    global_rank += 1;
                    global_rank % 2 == 1
                }
            })
        }
        GroupingKind::Random => return random_grouping(l, seed),
    };
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config(format!("{} grouping leaves a group empty", kind.label())));
    }
    Ok(GroupingScheme {
        kind,
        group_a: a,
        group_b: b,
    })
}
