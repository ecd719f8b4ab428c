//! Datasets of attribute-labelled RGB images.
//!
//! Two sources feed the same [`Dataset`] type: an image folder described by a CelebA-style
//! attribute table (`list_attr_celeba.txt`), and a procedural generator of coloured shapes
//! whose five attributes can be read back from the pixels by [`classify_synthetic`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribute names of the synthetic shapes dataset, in column order.
pub const SYNTHETIC_ATTRS: [&str; 5] = ["is_circle", "is_large", "is_red", "is_top_half", "has_border"];

const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Folder,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentations {
    pub hflip: bool,
    /// Maximum absolute rotation in degrees; angles are drawn from `U(-r, r)`.
    pub rotate_deg: f64,
}

impl Default for Augmentations {
    fn default() -> Self {
        Self {
            hflip: true,
            rotate_deg: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub height: usize,
    pub width: usize,
    pub attr_names: Vec<String>,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub augment: Augmentations,
}

impl DatasetSpec {
    pub fn synthetic(height: usize, width: usize) -> Self {
        Self {
            source: DataSource::Synthetic,
            height,
            width,
            attr_names: SYNTHETIC_ATTRS.iter().map(|s| s.to_string()).collect(),
            train_fraction: 0.8,
            split_seed: 0,
            augment: Augmentations::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.augment.rotate_deg.is_nan() || self.augment.rotate_deg < 0.0 {
            return Err(Error::Config("rotate_deg must be non-negative".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }
}

/// In-memory images `[N, 3, H, W]` in `[0, 1]` with `{0, 1}` attributes `[N, A]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    height: usize,
    width: usize,
    attr_names: Vec<String>,
    names: Vec<String>,
    images: Vec<f32>,
    attrs: Vec<f32>,
}

/// A host-side minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub attr_dim: usize,
    pub images: Vec<f32>,
    pub attrs: Vec<f32>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.attrs.len() / self.attr_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.image_len();
        &self.images[i * p..(i + 1) * p]
    }

    /// `(images [N, C, H, W], attrs [N, A])` in the requested dtype.
    pub fn to_tensors(&self, dtype: DType) -> Result<(Tensor, Tensor)> {
        let n = self.len();
        let dev = Device::Cpu;
        let x = Tensor::from_slice(&self.images, (n, self.channels, self.height, self.width), &dev)?
            .to_dtype(dtype)?;
        let y = Tensor::from_slice(&self.attrs, (n, self.attr_dim), &dev)?.to_dtype(dtype)?;
        Ok((x, y))
    }
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        attr_names: Vec<String>,
        names: Vec<String>,
        images: Vec<f32>,
        attrs: Vec<f32>,
    ) -> Result<Self> {
        let n = names.len();
        let a = attr_names.len();
        if images.len() != n * IMAGE_CHANNELS * height * width || attrs.len() != n * a {
            return Err(Error::Shape {
                op: "Dataset::new",
                msg: format!(
                    "{n} items: {} pixel values, {} attribute values",
                    images.len(),
                    attrs.len()
                ),
            });
        }
        Ok(Self {
            height,
            width,
            attr_names,
            names,
            images,
            attrs,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn channels(&self) -> usize {
        IMAGE_CHANNELS
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn image_len(&self) -> usize {
        IMAGE_CHANNELS * self.height * self.width
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_names.len()
    }

    pub fn attr_names(&self) -> &[String] {
        &self.attr_names
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.image_len();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn attrs(&self, i: usize) -> &[f32] {
        let a = self.attr_dim();
        &self.attrs[i * a..(i + 1) * a]
    }

    pub fn all_attrs(&self) -> &[f32] {
        &self.attrs
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut attrs = Vec::with_capacity(indices.len() * self.attr_dim());
        let mut names = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            attrs.extend_from_slice(self.attrs(i));
            names.push(self.names[i].clone());
        }
        Dataset {
            height: self.height,
            width: self.width,
            attr_names: self.attr_names.clone(),
            names,
            images,
            attrs,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut attrs = Vec::with_capacity(indices.len() * self.attr_dim());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            attrs.extend_from_slice(self.attrs(i));
        }
        LabeledBatch {
            channels: IMAGE_CHANNELS,
            height: self.height,
            width: self.width,
            attr_dim: self.attr_dim(),
            images,
            attrs,
        }
    }

    /// Index chunks covering the dataset once; shuffled when `rng` is given.
    pub fn batch_indices(&self, batch_size: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = rng {
            order.shuffle(rng);
        }
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Writes the dataset as PNG files plus a CelebA-style `list_attr.txt`.
    pub fn write_folder(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let table_path = dir.join("list_attr.txt");
        let mut table = format!("{}\n{}\n", self.len(), self.attr_names.join(" "));
        for i in 0..self.len() {
            let name = &self.names[i];
            write_png(
                &dir.join(name),
                self.image(i),
                IMAGE_CHANNELS,
                self.height,
                self.width,
            )?;
            table.push_str(name);
            for v in self.attrs(i) {
                table.push_str(if *v > 0.5 { "  1" } else { " -1" });
            }
            table.push('\n');
        }
        let mut f = fs::File::create(&table_path).map_err(|e| Error::io(&table_path, e))?;
        f.write_all(table.as_bytes())
            .map_err(|e| Error::io(&table_path, e))?;
        Ok(table_path)
    }
}

/// Encodes a `[C, H, W]` image in `[0, 1]` as PNG (grayscale for one channel, RGB for three).
pub fn write_png(path: &Path, chw: &[f32], channels: usize, height: usize, width: usize) -> Result<()> {
    let plane = height * width;
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match channels {
        1 => {
            let buf: Vec<u8> = chw.iter().map(|v| to_u8(*v)).collect();
            image::GrayImage::from_raw(width as u32, height as u32, buf)
                .expect("buffer sized from dimensions")
                .save(path)?;
        }
        3 => {
            let mut buf = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for c in 0..3 {
                    buf.push(to_u8(chw[c * plane + p]));
                }
            }
            image::RgbImage::from_raw(width as u32, height as u32, buf)
                .expect("buffer sized from dimensions")
                .save(path)?;
        }
        c => {
            return Err(Error::Config(format!("cannot write a {c}-channel PNG")));
        }
    }
    Ok(())
}

struct AttrTable {
    names: Vec<String>,
    rows: Vec<(String, Vec<f32>)>,
}

fn parse_attr_table(path: &Path) -> Result<AttrTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::AttrTable {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, count_line) = lines.next().ok_or_else(|| err(1, "missing count line".into()))?;
    let count: usize = count_line
        .trim()
        .parse()
        .map_err(|_| err(1, format!("bad image count {count_line:?}")))?;
    let (_, names_line) = lines
        .next()
        .ok_or_else(|| err(2, "missing attribute names".into()))?;
    let names: Vec<String> = names_line.split_whitespace().map(str::to_string).collect();
    if names.is_empty() {
        return Err(err(2, "no attribute names".into()));
    }
    let mut rows = Vec::with_capacity(count);
    for (idx, line) in lines {
        let mut fields = line.split_whitespace();
        let file = fields.next().expect("non-empty line").to_string();
        let values: Vec<&str> = fields.collect();
        if values.len() != names.len() {
            return Err(err(
                idx + 1,
                format!("expected {} values, found {}", names.len(), values.len()),
            ));
        }
        let parsed = values
            .iter()
            .map(|v| match *v {
                "1" | "+1" => Ok(1.0),
                "-1" => Ok(0.0),
                other => Err(err(idx + 1, format!("attribute value {other:?} is not +1/-1"))),
            })
            .collect::<Result<Vec<f32>>>()?;
        rows.push((file, parsed));
    }
    if rows.len() != count {
        return Err(err(
            1,
            format!("header declares {count} rows, found {}", rows.len()),
        ));
    }
    Ok(AttrTable { names, rows })
}

fn load_image(path: &Path, height: usize, width: usize) -> Result<Vec<f32>> {
    if !path.is_file() {
        return Err(Error::MissingImage(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    let img = if img.width() as usize != width || img.height() as usize != height {
        image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
    } else {
        img
    };
    let plane = height * width;
    let mut out = vec![0.0f32; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + p] = px.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Loads every image listed in a CelebA-style attribute table, resized to the size in `spec`.
///
/// Attribute values `-1/+1` become `0/1`. Rows are ordered by filename.
pub fn load_folder(root: &Path, attr_table: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let mut table = parse_attr_table(attr_table)?;
    if !spec.attr_names.is_empty() && spec.attr_names != table.names {
        return Err(Error::Config(format!(
            "attribute names in {attr_table:?} do not match the configured names"
        )));
    }
    table.rows.sort_by(|a, b| a.0.cmp(&b.0));
    let mut images = Vec::with_capacity(table.rows.len() * 3 * spec.height * spec.width);
    let mut attrs = Vec::with_capacity(table.rows.len() * table.names.len());
    let mut names = Vec::with_capacity(table.rows.len());
    for (file, values) in table.rows {
        images.extend(load_image(&root.join(&file), spec.height, spec.width)?);
        attrs.extend(values);
        names.push(file);
    }
    Dataset::new(spec.height, spec.width, table.names, names, images, attrs)
}

#[derive(Debug, Clone, Copy)]
struct ShapeLayout {
    border: usize,
}

impl ShapeLayout {
    fn new(height: usize, width: usize) -> Self {
        let border = ((height.min(width) as f64 / 16.0).round() as usize).max(1);
        Self { border }
    }

    /// Pixel used as the background reference by the classifier.
    fn reference(height: usize, width: usize) -> (usize, usize) {
        (
            height / 2,
            ((0.9 * width as f64) as usize).min(width.saturating_sub(2)),
        )
    }
}

/// Renders one synthetic image (`[3, H, W]`) for the given attributes.
fn render_shape(attrs: [bool; 5], height: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let [is_circle, is_large, is_red, is_top, has_border] = attrs;
    let layout = ShapeLayout::new(height, width);
    let (h, w) = (height as f64, width as f64);
    let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.25));
    let fg: [f32; 3] = if is_red {
        [
            rng.gen_range(0.8..1.0),
            rng.gen_range(0.0..0.2),
            rng.gen_range(0.0..0.2),
        ]
    } else if rng.gen_bool(0.5) {
        [
            rng.gen_range(0.0..0.15),
            rng.gen_range(0.7..1.0),
            rng.gen_range(0.1..0.4),
        ]
    } else {
        [
            rng.gen_range(0.0..0.15),
            rng.gen_range(0.2..0.5),
            rng.gen_range(0.75..1.0),
        ]
    };
    let edge = rng.gen_range(0.85f32..0.95);
    let radius = if is_large { 0.2 } else { 0.1 } * h.min(w);
    let cx = 0.5 * w + rng.gen_range(-0.06..0.06) * w;
    let cy = if is_top { 0.3 } else { 0.7 } * h + rng.gen_range(-0.03..0.03) * h;

    let plane = height * width;
    let mut out = vec![0.0f32; 3 * plane];
    for i in 0..height {
        for j in 0..width {
            let (x, y) = (j as f64 + 0.5 - cx, i as f64 + 0.5 - cy);
            let inside = if is_circle {
                x * x + y * y <= radius * radius
            } else {
                x.abs() <= radius && y.abs() <= radius
            };
            let on_border = has_border
                && (i < layout.border
                    || j < layout.border
                    || i >= height - layout.border
                    || j >= width - layout.border);
            let color = if on_border {
                [edge; 3]
            } else if inside {
                fg
            } else {
                bg
            };
            for c in 0..3 {
                out[c * plane + i * width + j] = color[c];
            }
        }
    }
    out
}

/// Generates `n` shape images. Item `i` depends only on `(seed, i)`.
pub fn make_synthetic(n: usize, spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    let mut images = Vec::with_capacity(n * 3 * spec.height * spec.width);
    let mut attrs = Vec::with_capacity(n * SYNTHETIC_ATTRS.len());
    let mut names = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let a: [bool; 5] = std::array::from_fn(|_| rng.gen_bool(0.5));
        images.extend(render_shape(a, spec.height, spec.width, &mut rng));
        attrs.extend(a.iter().map(|&b| if b { 1.0f32 } else { 0.0 }));
        names.push(format!("{:06}.png", i + 1));
    }
    Dataset::new(
        spec.height,
        spec.width,
        SYNTHETIC_ATTRS.iter().map(|s| s.to_string()).collect(),
        names,
        images,
        attrs,
    )
}

fn channel_diff(img: &[f32], plane: usize, a: usize, b: usize) -> f32 {
    (0..3)
        .map(|c| (img[c * plane + a] - img[c * plane + b]).abs())
        .fold(0.0, f32::max)
}

/// Pixels of a `[3, H, W]` image that differ from the background reference by more than 0.1,
/// restricted to the interior away from the optional border.
pub fn foreground_mask(img: &[f32], height: usize, width: usize) -> Vec<bool> {
    let plane = height * width;
    let layout = ShapeLayout::new(height, width);
    let (ri, rj) = ShapeLayout::reference(height, width);
    let reference = ri * width + rj;
    let mut mask = vec![false; plane];
    for i in layout.border..height.saturating_sub(layout.border) {
        for j in layout.border..width.saturating_sub(layout.border) {
            let p = i * width + j;
            mask[p] = channel_diff(img, plane, p, reference) > 0.1;
        }
    }
    mask
}

/// Reads the five synthetic attributes back from a clean `[3, H, W]` image.
pub fn classify_synthetic(img: &[f32], height: usize, width: usize) -> [bool; 5] {
    let plane = height * width;
    let (ri, rj) = ShapeLayout::reference(height, width);
    let has_border = channel_diff(img, plane, 0, ri * width + rj) > 0.1;
    let mask = foreground_mask(img, height, width);

    let (mut area, mut row_sum) = (0usize, 0usize);
    let (mut top, mut bottom, mut left, mut right) = (usize::MAX, 0, usize::MAX, 0);
    let mut sums = [0.0f64; 3];
    for i in 0..height {
        for j in 0..width {
            let p = i * width + j;
            if !mask[p] {
                continue;
            }
            area += 1;
            row_sum += i;
            top = top.min(i);
            bottom = bottom.max(i);
            left = left.min(j);
            right = right.max(j);
            for (c, s) in sums.iter_mut().enumerate() {
                *s += img[c * plane + p] as f64;
            }
        }
    }
    if area == 0 {
        return [false, false, false, false, has_border];
    }
    let corners = [(top, left), (top, right), (bottom, left), (bottom, right)];
    let is_circle = !corners.iter().all(|&(i, j)| mask[i * width + j]);
    let is_large = area as f64 > 0.08 * plane as f64;
    let is_red = sums[0] > sums[1].max(sums[2]);
    let is_top = (row_sum as f64 / area as f64 + 0.5) < height as f64 / 2.0;
    [is_circle, is_large, is_red, is_top, has_border]
}

fn reflect(x: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = x.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

/// Flips (optionally) then rotates one `[C, H, W]` image about its centre, bilinear with
/// reflection padding.
pub fn transform_image(
    img: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    flip: bool,
    angle_deg: f64,
) -> Vec<f32> {
    let plane = height * width;
    let mut src: Vec<f32> = img.to_vec();
    if flip {
        for c in 0..channels {
            for i in 0..height {
                let row = &mut src[c * plane + i * width..c * plane + (i + 1) * width];
                row.reverse();
            }
        }
    }
    if angle_deg == 0.0 {
        return src;
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let mut out = vec![0.0f32; src.len()];
    for i in 0..height {
        for j in 0..width {
            let (dy, dx) = (i as f64 - cy, j as f64 - cx);
            // inverse rotation gives the source location
            let sx = reflect(cos * dx + sin * dy + cx, width);
            let sy = reflect(-sin * dx + cos * dy + cy, height);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..channels {
                let at = |y: usize, x: usize| src[c * plane + y * width + x];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[c * plane + i * width + j] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Independently flips each image with probability 1/2 and rotates it by `U(-r, r)` degrees.
pub fn augment(batch: &LabeledBatch, aug: &Augmentations, rng: &mut ChaCha8Rng) -> LabeledBatch {
    if !aug.hflip && aug.rotate_deg == 0.0 {
        return batch.clone();
    }
    let mut images = Vec::with_capacity(batch.images.len());
    for i in 0..batch.len() {
        let flip = aug.hflip && rng.gen_bool(0.5);
        let angle = if aug.rotate_deg > 0.0 {
            rng.gen_range(-aug.rotate_deg..=aug.rotate_deg)
        } else {
            0.0
        };
        images.extend(transform_image(
            batch.image(i),
            batch.channels,
            batch.height,
            batch.width,
            flip,
            angle,
        ));
    }
    LabeledBatch {
        images,
        ..batch.clone()
    }
}

/// Deterministic disjoint split into `round(n * train_fraction)` train and the rest test.
/// Both index lists are returned sorted.
pub fn split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).min(n);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Splits a dataset into `(train, test)` using the fraction and seed in `spec`.
pub fn split_dataset(dataset: &Dataset, spec: &DatasetSpec) -> (Dataset, Dataset) {
    let (train, test) = split(dataset.len(), spec.train_fraction, spec.split_seed);
    (dataset.subset(&train), dataset.subset(&test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn spec32() -> DatasetSpec {
        DatasetSpec::synthetic(32, 32)
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(16, &spec32(), 4).unwrap();
        let b = make_synthetic(16, &spec32(), 4).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic(16, &spec32(), 5).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn red_attribute_is_visible() {
        let ds = make_synthetic(200, &spec32(), 1).unwrap();
        let plane = 32 * 32;
        for i in 0..ds.len() {
            let img = ds.image(i);
            let mask = foreground_mask(img, 32, 32);
            let count = mask.iter().filter(|m| **m).count() as f64;
            let mean = |c: usize| {
                mask.iter()
                    .enumerate()
                    .filter(|(_, m)| **m)
                    .map(|(p, _)| img[c * plane + p] as f64)
                    .sum::<f64>()
                    / count
            };
            let red_wins = mean(0) > mean(1).max(mean(2));
            assert_eq!(red_wins, ds.attrs(i)[2] == 1.0, "item {i}");
        }
    }

    #[test]
    fn attribute_marginals_are_balanced() {
        let ds = make_synthetic(10_000, &DatasetSpec::synthetic(8, 8), 9).unwrap();
        for a in 0..5 {
            let freq = (0..ds.len()).map(|i| ds.attrs(i)[a] as f64).sum::<f64>() / ds.len() as f64;
            assert!((freq - 0.5).abs() < 0.05, "attr {a}: {freq}");
        }
    }

    #[test]
    fn classifier_recovers_every_attribute() {
        for (side, n) in [(32, 2000), (64, 300), (86, 200)] {
            let ds = make_synthetic(n, &DatasetSpec::synthetic(side, side), side as u64).unwrap();
            for i in 0..ds.len() {
                let got = classify_synthetic(ds.image(i), side, side);
                let want: Vec<bool> = ds.attrs(i).iter().map(|v| *v == 1.0).collect();
                assert_eq!(got.to_vec(), want, "side {side}, item {i}");
            }
        }
    }

    #[test]
    fn augment_identity_and_involution() {
        let ds = make_synthetic(4, &spec32(), 2).unwrap();
        let batch = ds.batch(&[0, 1, 2, 3]);
        let none = Augmentations {
            hflip: false,
            rotate_deg: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&batch, &none, &mut rng), batch);

        let img = ds.image(0);
        let once = transform_image(img, 3, 32, 32, true, 0.0);
        assert_ne!(once, img);
        assert_eq!(transform_image(&once, 3, 32, 32, true, 0.0), img);
    }

    #[test]
    fn augment_keeps_range_and_attrs() {
        let ds = make_synthetic(32, &spec32(), 3).unwrap();
        let aug = Augmentations::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let idx: Vec<usize> = (0..8).map(|_| rng.gen_range(0..32)).collect();
            let batch = ds.batch(&idx);
            let out = augment(&batch, &aug, &mut rng);
            assert_eq!(out.attrs, batch.attrs);
            assert!(out.images.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn small_rotation_moves_pixels() {
        let ds = make_synthetic(1, &spec32(), 7).unwrap();
        let rotated = transform_image(ds.image(0), 3, 32, 32, false, 10.0);
        assert_ne!(rotated, ds.image(0));
        assert_eq!(reflect(-1.0, 5), 1.0);
        assert_eq!(reflect(5.0, 5), 3.0);
    }

    #[test]
    fn split_examples() {
        let (train, test) = split(10, 0.8, 3);
        assert_eq!((train.len(), test.len()), (8, 2));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split(10, 0.8, 3), (train, test));
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_exhaustive(n in 1usize..300, f in 0.05f64..0.95, seed in 0u64..50) {
            let (train, test) = split(n, f, seed);
            prop_assert_eq!(train.len() + test.len(), n);
            prop_assert!(train.iter().all(|i| test.binary_search(i).is_err()));
            prop_assert_eq!(split(n, f, seed), (train, test));
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = spec32();
        spec.train_fraction = 1.0;
        assert!(spec.validate().is_err());
        spec.train_fraction = 0.5;
        spec.augment.rotate_deg = -1.0;
        assert!(spec.validate().is_err());
    }
}
