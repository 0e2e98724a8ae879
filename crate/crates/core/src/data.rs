//! Image datasets: directories of PNG/JPEG files and synthetic part sprites.
//!
//! Images are `[H, W, C]` tensors with values in `[-1, 1]`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{shuffle_rng, stream_rng, Stream};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    /// Source directory or generator description.
    pub source: String,
    pub extents: (usize, usize, usize),
    /// Files that could not be decoded.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    /// `[N, H, W, C]`
    pub images: Tensor<f32>,
    pub meta: DatasetMeta,
    pub labels: Option<Vec<SpriteLabel>>,
}

impl Dataset {
    pub fn new(ids: Vec<String>, images: Vec<Tensor<f32>>, source: impl Into<String>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if ids.len() != images.len() {
            return Err(Error::contract("one id per image required"));
        }
        let first = images[0].shape().to_vec();
        if first.len() != 3 {
            return Err(Error::dim("image", format!("expected [H, W, C], got {first:?}")));
        }
        if let Some((i, img)) = images.iter().enumerate().find(|(_, t)| t.shape() != first.as_slice()) {
            return Err(Error::Dataset(format!(
                "image `{}` has extents {:?}, expected {first:?}",
                ids[i],
                img.shape()
            )));
        }
        if images.iter().any(|t| t.data().iter().any(|v| !(-1.0..=1.0).contains(v))) {
            return Err(Error::Dataset("pixel values must lie in [-1, 1]".into()));
        }
        Ok(Dataset {
            ids,
            images: Tensor::stack(&images)?,
            meta: DatasetMeta {
                source: source.into(),
                extents: (first[0], first[1], first[2]),
                skipped: 0,
            },
            labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.images.batch_item(i)
    }

    /// Stacks the images at `idx` into `[B, H, W, C]`.
    pub fn gather<T: Real>(&self, idx: &[usize]) -> Tensor<T> {
        let (h, w, c) = self.meta.extents;
        let per = h * w * c;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend(self.images.data()[i * per..(i + 1) * per].iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new(vec![idx.len(), h, w, c], data).expect("sizes agree")
    }

    /// The first `n` examples (or all, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Dataset {
            ids: self.ids[..n].to_vec(),
            images: self.gather(&idx),
            meta: self.meta.clone(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    /// Writes `<id>.png` for every image, plus `labels.txt` for sprites.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, id) in self.ids.iter().enumerate() {
            save_png(&self.image(i), &dir.join(format!("{id}.png")))?;
        }
        if let Some(labels) = &self.labels {
            let path = dir.join("labels.txt");
            fs::write(&path, format_labels(labels)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Minibatches of example indices for one epoch, shuffled by `(seed, epoch)`.
/// The final batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("train.batch", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut shuffle_rng(seed, epoch));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

fn to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("rgb buffer")
}

fn to_bytes<T: Real>(img: &Tensor<T>) -> Result<(u32, u32, Vec<u8>)> {
    let (n, h, w, c) = img.nhwc("image")?;
    if n != 1 || !(c == 1 || c == 3) {
        return Err(Error::dim("image", format!("expected one [H, W, 1|3] image, got {:?}", img.shape())));
    }
    let mut out = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for ch in 0..3 {
            let v = img.data()[p * c + if c == 1 { 0 } else { ch }].as_f64();
            out.push(((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8);
        }
    }
    Ok((w as u32, h as u32, out))
}

/// Saves one `[H, W, C]` image in `[-1, 1]` as an 8-bit RGB PNG.
pub fn save_png<T: Real>(img: &Tensor<T>, path: &Path) -> Result<()> {
    let (w, h, bytes) = to_bytes(img)?;
    let buf = RgbImage::from_raw(w, h, bytes).expect("buffer size");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Tiles images row-major into one PNG, separated by 1-pixel black lines.
pub fn save_grid<T: Real>(images: &[Tensor<T>], cols: usize, path: &Path) -> Result<()> {
    let (h, w) = match images.first() {
        Some(t) => {
            let (_, h, w, _) = t.nhwc("image")?;
            (h, w)
        }
        None => (1, 1),
    };
    let cols = cols.max(1).min(images.len().max(1));
    let rows = images.len().div_ceil(cols).max(1);
    let gw = cols * (w + 1) + 1;
    let gh = rows * (h + 1) + 1;
    let mut grid = RgbImage::new(gw as u32, gh as u32);
    for (i, img) in images.iter().enumerate() {
        let (iw, ih, bytes) = to_bytes(img)?;
        if (ih as usize, iw as usize) != (h, w) {
            return Err(Error::dim("grid image", "all images in a grid must share extents"));
        }
        let (oy, ox) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                let p = (y * w + x) * 3;
                grid.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb([bytes[p], bytes[p + 1], bytes[p + 2]]));
            }
        }
    }
    grid.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn decode(path: &Path) -> std::result::Result<DynamicImage, String> {
    image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())
}

/// Loads a single file with the same crop/resize policy as [`load_image_dir`].
pub fn load_image(path: &Path, extent: usize) -> Result<Tensor<f32>> {
    let img = decode(path).map_err(|detail| Error::Image {
        path: path.to_path_buf(),
        detail,
    })?;
    Ok(prepare(img, extent))
}

fn prepare(img: DynamicImage, extent: usize) -> Tensor<f32> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let side = w.min(h);
    let cropped = if w == h {
        rgb
    } else {
        image::imageops::crop_imm(&rgb, (w - side) / 2, (h - side) / 2, side, side).to_image()
    };
    let e = extent as u32;
    let sized = if side == e {
        cropped
    } else {
        image::imageops::resize(&cropped, e, e, FilterType::Triangle)
    };
    to_tensor(&sized)
}

/// Every decodable PNG/JPEG in `dir`, center-cropped and resized to
/// `extent x extent`, in lexicographic file-name order.
pub fn load_image_dir(dir: &Path, extent: usize) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut skipped = 0;
    for f in &files {
        match decode(f) {
            Ok(img) => {
                ids.push(f.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string());
                images.push(prepare(img, extent));
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", f.display());
                skipped += 1;
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!(
            "no decodable images in {} ({skipped} skipped)",
            dir.display()
        )));
    }
    let mut ds = Dataset::new(ids, images, dir.display().to_string())?;
    ds.meta.skipped = skipped;
    Ok(ds)
}

/// Synthetic images built from one part variant per grid slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SpriteSpec {
    pub extent: usize,
    /// Slot grid, rows x columns.
    pub slots: (usize, usize),
    /// Variants per slot: bars, disc, corner, ring, then horizontal bars, cross,
    /// opposite corner and diamond (at most 8).
    pub variants: usize,
    /// Side of the square part template.
    pub template: usize,
    /// Maximum shift in pixels along each axis.
    pub jitter: usize,
    /// One RGB colour in `[0, 1]` per slot, cycled.
    pub palette: Vec<[f32; 3]>,
    pub count: usize,
    pub seed: u64,
}

impl Default for SpriteSpec {
    fn default() -> Self {
        SpriteSpec {
            extent: 32,
            slots: (2, 2),
            variants: 4,
            template: 12,
            jitter: 1,
            palette: vec![[1.0, 0.3, 0.2], [0.3, 0.9, 0.3], [0.3, 0.5, 1.0], [1.0, 0.9, 0.2]],
            count: 2000,
            seed: 0,
        }
    }
}

/// Ground truth for one sprite: per slot `(variant, dx, dy)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpriteLabel {
    pub id: String,
    pub parts: Vec<(usize, i32, i32)>,
}

pub const MAX_VARIANTS: usize = 8;

impl SpriteSpec {
    pub fn validate(&self) -> Result<()> {
        let (sr, sc) = self.slots;
        if self.extent == 0 || sr == 0 || sc == 0 || self.count == 0 || self.template == 0 {
            return Err(Error::config("sprites", "extent, slots, template and count must be positive"));
        }
        if self.variants == 0 || self.variants > MAX_VARIANTS {
            return Err(Error::config("sprites", format!("variants must be in 1..={MAX_VARIANTS}")));
        }
        if self.palette.is_empty() {
            return Err(Error::config("sprites", "palette is empty"));
        }
        let slot = (self.extent / sr).min(self.extent / sc);
        if self.template + 2 * self.jitter > slot {
            return Err(Error::config(
                "sprites",
                format!(
                    "template {} with jitter {} does not fit a {slot}-pixel slot",
                    self.template, self.jitter
                ),
            ));
        }
        Ok(())
    }

    /// Template mask for `variant`, values in `[0, 1]`, row-major `template x template`.
    pub fn glyph(&self, variant: usize) -> Vec<f32> {
        let s = self.template;
        let c = (s as f32 - 1.0) / 2.0;
        let r_out = s as f32 / 2.0;
        let t = (s / 4).max(1);
        let mut g = vec![0.0; s * s];
        for y in 0..s {
            for x in 0..s {
                let d = ((y as f32 - c).powi(2) + (x as f32 - c).powi(2)).sqrt();
                let on = match variant {
                    0 => x < t || (x >= s / 2 && x < s / 2 + t),
                    1 => d <= r_out * 0.6,
                    2 => y < t || x < t,
                    3 => d <= r_out - 0.5 && d >= r_out - 0.5 - t as f32,
                    4 => y < t || (y >= s / 2 && y < s / 2 + t),
                    5 => (y as f32 - c).abs() < t as f32 / 2.0 + 0.5 || (x as f32 - c).abs() < t as f32 / 2.0 + 0.5,
                    6 => y >= s - t || x >= s - t,
                    _ => ((y as f32 - c).abs() + (x as f32 - c).abs() - c).abs() < t as f32 / 2.0 + 0.25,
                };
                g[y * s + x] = if on { 1.0 } else { 0.0 };
            }
        }
        g
    }

    /// Renders the sprite described by `label`.
    pub fn render(&self, label: &SpriteLabel) -> Result<Tensor<f32>> {
        let (sr, sc) = self.slots;
        if label.parts.len() != sr * sc {
            return Err(Error::contract("label has the wrong number of slots"));
        }
        let e = self.extent;
        let mut img = Tensor::full(&[e, e, 3], -1.0f32);
        let (slot_h, slot_w) = (e / sr, e / sc);
        let s = self.template;
        for (slot, &(variant, dx, dy)) in label.parts.iter().enumerate() {
            if variant >= self.variants || dx.unsigned_abs() as usize > self.jitter || dy.unsigned_abs() as usize > self.jitter {
                return Err(Error::contract(format!("label part {slot} is outside the spec")));
            }
            let glyph = self.glyph(variant);
            let color = self.palette[slot % self.palette.len()];
            let oy = (slot / sc) * slot_h + (slot_h - s) / 2;
            let ox = (slot % sc) * slot_w + (slot_w - s) / 2;
            for y in 0..s {
                for x in 0..s {
                    let m = glyph[y * s + x];
                    if m == 0.0 {
                        continue;
                    }
                    let py = (oy as i32 + y as i32 + dy) as usize;
                    let px = (ox as i32 + x as i32 + dx) as usize;
                    for (ch, &col) in color.iter().enumerate() {
                        // on the 8-bit grid so PNG export is lossless
                        let byte = (col * m * 255.0).round();
                        img.data_mut()[(py * e + px) * 3 + ch] = byte / 127.5 - 1.0;
                    }
                }
            }
        }
        Ok(img)
    }
}

/// Draws `spec.count` sprites; labels are attached to the dataset.
pub fn make_sprites(spec: &SpriteSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Sprites);
    let j = spec.jitter as i32;
    let slots = spec.slots.0 * spec.slots.1;
    let mut labels = Vec::with_capacity(spec.count);
    let mut images = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let parts = (0..slots)
            .map(|_| {
                let v = rng.random_range(0..spec.variants);
                let dx = rng.random_range(-j..=j);
                let dy = rng.random_range(-j..=j);
                (v, dx, dy)
            })
            .collect();
        let label = SpriteLabel {
            id: format!("sprite{i:05}"),
            parts,
        };
        images.push(spec.render(&label)?);
        labels.push(label);
    }
    let ids = labels.iter().map(|l| l.id.clone()).collect();
    let mut ds = Dataset::new(
        ids,
        images,
        format!(
            "sprites extent={} slots={}x{} variants={} jitter={} seed={}",
            spec.extent, spec.slots.0, spec.slots.1, spec.variants, spec.jitter, spec.seed
        ),
    )?;
    ds.labels = Some(labels);
    Ok(ds)
}

/// One line per image: `id v,dx,dy v,dx,dy ...` in slot order.
pub fn format_labels(labels: &[SpriteLabel]) -> String {
    let mut s = String::new();
    for l in labels {
        s.push_str(&l.id);
        for (v, dx, dy) in &l.parts {
            let _ = write!(s, " {v},{dx},{dy}");
        }
        s.push('\n');
    }
    s
}

pub fn parse_labels(text: &str) -> Result<Vec<SpriteLabel>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut it = line.split_whitespace();
            let id = it.next().unwrap_or_default().to_string();
            let parts = it
                .map(|p| {
                    let f: Vec<&str> = p.split(',').collect();
                    match f.as_slice() {
                        [v, dx, dy] => Ok((
                            v.parse().map_err(|_| Error::Format(format!("bad label `{p}`")))?,
                            dx.parse().map_err(|_| Error::Format(format!("bad label `{p}`")))?,
                            dy.parse().map_err(|_| Error::Format(format!("bad label `{p}`")))?,
                        )),
                        _ => Err(Error::Format(format!("bad label `{p}`"))),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SpriteLabel { id, parts })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(count: usize) -> SpriteSpec {
        SpriteSpec {
            count,
            ..SpriteSpec::default()
        }
    }

    #[test]
    fn sprites_are_reproducible_and_in_range() {
        let a = make_sprites(&small(20)).unwrap();
        let b = make_sprites(&small(20)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.meta.extents, (32, 32, 3));
        assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn degenerate_spec_gives_identical_images() {
        let spec = SpriteSpec {
            variants: 1,
            jitter: 0,
            ..small(5)
        };
        let d = make_sprites(&spec).unwrap();
        for i in 1..5 {
            assert_eq!(d.image(i), d.image(0));
        }
    }

    #[test]
    fn labels_rerender_exactly() {
        let d = make_sprites(&small(30)).unwrap();
        let labels = parse_labels(&format_labels(d.labels.as_ref().unwrap())).unwrap();
        let spec = small(30);
        for (i, l) in labels.iter().enumerate() {
            assert_eq!(spec.render(l).unwrap(), d.image(i));
        }
    }

    #[test]
    fn variants_are_distinct_glyphs() {
        let spec = SpriteSpec::default();
        let glyphs: HashSet<Vec<u32>> = (0..MAX_VARIANTS)
            .map(|v| spec.glyph(v).iter().map(|x| x.to_bits()).collect())
            .collect();
        assert_eq!(glyphs.len(), MAX_VARIANTS);
        // 2x2 slots with 4 variants each
        assert_eq!(spec.variants.pow((spec.slots.0 * spec.slots.1) as u32), 256);
    }

    #[test]
    fn oversized_template_is_rejected() {
        let spec = SpriteSpec {
            template: 15,
            ..SpriteSpec::default()
        };
        assert!(make_sprites(&spec).is_err());
    }

    #[test]
    fn batches_partition_the_set() {
        let b = batches(10, 4, 3, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batches(10, 4, 3, 0).unwrap());
        assert_ne!(b, batches(10, 4, 3, 1).unwrap());
        assert_eq!(batches(5, 9, 0, 0).unwrap().len(), 1);
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_sprites(&small(3)).unwrap();
        d.save_dir(dir.path()).unwrap();
        let loaded = load_image_dir(dir.path(), 32).unwrap();
        assert_eq!(loaded.ids, d.ids);
        assert_eq!(loaded.images, d.images);
        let again = dir.path().join("again");
        loaded.save_dir(&again).unwrap();
        assert_eq!(load_image_dir(&again, 32).unwrap().images, loaded.images);
    }

    #[test]
    fn undecodable_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        make_sprites(&small(2)).unwrap().save_dir(dir.path()).unwrap();
        fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let d = load_image_dir(dir.path(), 32).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.meta.skipped, 1);
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_image_dir(empty.path(), 32), Err(Error::Dataset(_))));
    }

    #[test]
    fn non_square_sources_are_center_cropped() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(6, 4);
        for (x, _, p) in img.enumerate_pixels_mut() {
            *p = image::Rgb([if (1..5).contains(&x) { 255 } else { 0 }; 3]);
        }
        img.save(dir.path().join("a.png")).unwrap();
        let t = load_image(&dir.path().join("a.png"), 4).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.0));
    }
}
