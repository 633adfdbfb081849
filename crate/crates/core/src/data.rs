//! Synthetic attribute-editing data: one coloured shape per image on a
//! dark background, labelled by its (colour, shape) class. Also PPM I/O.
//!
//! Pixel values live in `[-1, 1]`; the byte value `u` maps to
//! `u / 127.5 - 1`, so rendered noiseless images survive a PPM round trip
//! exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gan::sample_mismatch;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r,
            // apex up; the base spans the full width at dy = r
            Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeWorldSpec {
    pub image_size: usize,
    pub palette: Vec<[u8; 3]>,
    pub background: [u8; 3],
    pub shapes: Vec<Shape>,
    pub samples_per_class: usize,
    pub noise_std: f64,
}

impl Default for ShapeWorldSpec {
    /// 16×16 images, four colours × two shapes.
    fn default() -> Self {
        Self {
            image_size: 16,
            palette: vec![[230, 40, 40], [40, 210, 60], [50, 90, 240], [235, 215, 40]],
            background: [20, 20, 20],
            shapes: vec![Shape::Square, Shape::Circle],
            samples_per_class: 16,
            noise_std: 0.05,
        }
    }
}

impl ShapeWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.palette.len() < 2 {
            return Err(Error::Config(format!(
                "palette needs at least 2 colours, got {}",
                self.palette.len()
            )));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("no shapes".into()));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image size must be a multiple of 4 and at least 8, got {}",
                self.image_size
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise std {} is negative", self.noise_std)));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len() * self.shapes.len()
    }

    pub fn class_of(&self, color: usize, shape: usize) -> usize {
        color * self.shapes.len() + shape
    }

    pub fn color_of(&self, class: usize) -> usize {
        class / self.shapes.len()
    }

    pub fn shape_of(&self, class: usize) -> usize {
        class % self.shapes.len()
    }

    /// Draws an editing target: same shape, different colour.
    pub fn edit_target(&self, class: usize, rng: &mut Rng) -> usize {
        let colors = self.palette.len();
        let cur = self.color_of(class);
        let mut other = rng.below(colors - 1);
        if other >= cur {
            other += 1;
        }
        self.class_of(other, self.shape_of(class))
    }

    /// Renders one image of `class` with random placement and size jitter.
    pub fn render(&self, class: usize, rng: &mut Rng) -> Tensor {
        let n = self.image_size;
        let color = to_unit(self.palette[self.color_of(class)]);
        let bg = to_unit(self.background);
        let shape = self.shapes[self.shape_of(class)];
        let jitter = (n / 8) as isize;
        let span = (2 * jitter + 1) as usize;
        let cx = n as f64 / 2.0 + (rng.below(span) as isize - jitter) as f64;
        let cy = n as f64 / 2.0 + (rng.below(span) as isize - jitter) as f64;
        let r = n as f64 * 0.25 + rng.below(3) as f64 - 1.0;
        let mut data = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let px = if shape.contains(dx, dy, r) { color } else { bg };
                for v in px {
                    let noisy = if self.noise_std > 0.0 {
                        (v + self.noise_std * rng.normal()).clamp(-1.0, 1.0)
                    } else {
                        v
                    };
                    data.push(noisy);
                }
            }
        }
        Tensor::new(&[n, n, 3], data).expect("image shape")
    }
}

fn to_unit(rgb: [u8; 3]) -> [f64; 3] {
    rgb.map(|u| u as f64 / 127.5 - 1.0)
}

/// An image with its matching, editing and mismatching attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub image: Tensor,
    /// Class of `image`.
    pub matching: usize,
    /// Same shape, different colour.
    pub editing: usize,
    /// Any class other than `matching`.
    pub mismatching: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: ShapeWorldSpec,
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    /// Stacks the images at `indices` into `[B, H, W, 3]`.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        stack_images(indices.iter().map(|&i| &self.samples[i].image))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.matching).collect()
    }

    /// First sample of each class, in class order.
    pub fn one_per_class(&self) -> Vec<usize> {
        (0..self.num_classes())
            .filter_map(|c| self.samples.iter().position(|s| s.matching == c))
            .collect()
    }
}

pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Tensor {
    let mut data = Vec::new();
    let mut shape = None;
    let mut n = 0;
    for img in images {
        shape.get_or_insert_with(|| img.shape().to_vec());
        data.extend_from_slice(img.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.expect("at least one image"));
    Tensor::new(&full, data).expect("consistent image shapes")
}

/// Splits `[B, H, W, C]` into `B` tensors of shape `[H, W, C]`.
pub fn unstack_images(batch: &Tensor) -> Vec<Tensor> {
    let s = batch.shape();
    let per = batch.len() / s[0];
    batch
        .data()
        .chunks_exact(per)
        .map(|c| Tensor::new(&s[1..], c.to_vec()).expect("image"))
        .collect()
}

/// `samples_per_class` images per class, class-major order.
pub fn generate_dataset(spec: &ShapeWorldSpec, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    let classes = spec.num_classes();
    let mut samples = Vec::with_capacity(classes * spec.samples_per_class);
    for class in 0..classes {
        for _ in 0..spec.samples_per_class {
            let image = spec.render(class, rng);
            let editing = spec.edit_target(class, rng);
            let mismatching = sample_mismatch(classes, class, rng)?;
            samples.push(SamplePair {
                image,
                matching: class,
                editing,
                mismatching,
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// Binary PPM (P6) bytes of an `[H, W, 3]` image in `[-1, 1]`.
pub fn encode_ppm(x: &Tensor) -> Result<Vec<u8>> {
    let s = x.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Parameter(format!("expected [H, W, 3], got {s:?}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    for &v in x.data() {
        if !(-1.0..=1.0).contains(&v) {
            return Err(Error::Range(format!("pixel value {v} outside [-1, 1]")));
        }
        out.push(((v + 1.0) * 127.5).round() as u8);
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Format(format!("unsupported PPM header {fields:?}")));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM size {s:?}")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| Error::Format("truncated PPM body".into()))?;
    Tensor::new(&[h, w, 3], body.iter().map(|&u| u as f64 / 127.5 - 1.0).collect())
}

pub fn write_image_ppm(x: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ppm(x)?)?;
    Ok(())
}

pub fn read_image_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

/// Lays `images` out row-major in a grid with `cols` columns and a
/// one-pixel black gutter.
pub fn image_grid(images: &[Tensor], cols: usize) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Parameter("empty grid".into()))?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    let rows = images.len().div_ceil(cols);
    let gh = rows * (h + 1) - 1;
    let gw = cols * (w + 1) - 1;
    let mut grid = Tensor::full(&[gh, gw, 3], -1.0);
    for (k, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            return Err(crate::error::dim_err("image_grid", img.shape(), first.shape()));
        }
        let (oy, ox) = ((k / cols) * (h + 1), (k % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    grid.set(&[oy + y, ox + x, c], img.at(&[y, x, c]));
                }
            }
        }
    }
    Ok(grid)
}
