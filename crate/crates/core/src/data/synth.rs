//! Deterministic synthetic shape scenes with pixel-exact ground truth.
//!
//! Each image shows up to a handful of solid shapes, one per distinct class,
//! on a noisy background. Colors are drawn independently of class so that
//! only geometry identifies a class. Later shapes occlude earlier ones and
//! the mask records whichever class is visible.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::manifest::{format_manifest_line, MANIFEST_FILE};
use crate::data::pnm::{encode_pgm, encode_ppm};
use crate::error::{Error, Result};
use crate::mil::{LabelBag, SegmentationMask};
use crate::tensor::Tensor;

/// Shape drawn for each foreground class, in class-index order starting at 1.
pub const SHAPE_NAMES: [&str; 4] = ["disk", "square", "triangle", "cross"];

/// Image sides must be multiples of this so the default network accepts them.
pub const SIZE_MULTIPLE: usize = 4;

/// Smallest shape diameter, in pixels, the generator will rasterize.
pub const MIN_SHAPE_PIXELS: f64 = 4.0;

/// Name of the spec copy written at the dataset root.
pub const SPEC_FILE: &str = "dataset.spec";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub num_train: usize,
    pub num_val: usize,
    pub height: usize,
    pub width: usize,
    pub num_fg_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape diameter as a fraction of the shorter image side.
    pub min_scale: f64,
    pub max_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_train: 500,
            num_val: 100,
            height: 64,
            width: 64,
            num_fg_classes: 4,
            min_shapes: 1,
            max_shapes: 3,
            min_scale: 0.25,
            max_scale: 0.45,
            noise: 0.1,
            seed: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub mask: SegmentationMask,
    pub bag: LabelBag,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1..=SHAPE_NAMES.len()).contains(&self.num_fg_classes) {
            return bad(format!(
                "num_fg_classes must be in 1..={}, got {}",
                SHAPE_NAMES.len(),
                self.num_fg_classes
            ));
        }
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if self.height % SIZE_MULTIPLE != 0 || self.width % SIZE_MULTIPLE != 0 {
            return bad(format!(
                "image size {}x{} must be a multiple of {}",
                self.height, self.width, SIZE_MULTIPLE
            ));
        }
        if self.min_shapes > self.max_shapes || self.max_shapes > self.num_fg_classes {
            return bad(format!(
                "shape count range [{}, {}] must be ordered and at most num_fg_classes ({})",
                self.min_shapes, self.max_shapes, self.num_fg_classes
            ));
        }
        let scales_ok = self.min_scale > 0.0
            && self.min_scale <= self.max_scale
            && self.max_scale <= 1.0;
        if !scales_ok {
            return bad(format!(
                "scale range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.min_scale, self.max_scale
            ));
        }
        let side = self.height.min(self.width) as f64;
        if self.max_shapes > 0 && self.min_scale * side < MIN_SHAPE_PIXELS {
            return bad(format!(
                "image {}x{} is too small for min_scale {}: shapes would be under {} pixels",
                self.height, self.width, self.min_scale, MIN_SHAPE_PIXELS
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise must be in [0, 1], got {}", self.noise));
        }
        Ok(())
    }

    /// Parses flat `key=value` lines; blank lines and `#` comments are
    /// skipped, unspecified keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = DatasetSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Config(format!("spec line {}: {}", i + 1, msg));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let int = || {
                value
                    .parse::<usize>()
                    .map_err(|e| err(format!("{key}: {e}")))
            };
            let float = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "num_train" => spec.num_train = int()?,
                "num_val" => spec.num_val = int()?,
                "height" => spec.height = int()?,
                "width" => spec.width = int()?,
                "num_fg_classes" => spec.num_fg_classes = int()?,
                "min_shapes" => spec.min_shapes = int()?,
                "max_shapes" => spec.max_shapes = int()?,
                "min_scale" => spec.min_scale = float()?,
                "max_scale" => spec.max_scale = float()?,
                "noise" => spec.noise = float()?,
                "seed" => {
                    spec.seed = value
                        .parse::<u64>()
                        .map_err(|e| err(format!("seed: {e}")))?
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "num_train={}", self.num_train);
        let _ = writeln!(s, "num_val={}", self.num_val);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "num_fg_classes={}", self.num_fg_classes);
        let _ = writeln!(s, "min_shapes={}", self.min_shapes);
        let _ = writeln!(s, "max_shapes={}", self.max_shapes);
        let _ = writeln!(s, "min_scale={}", self.min_scale);
        let _ = writeln!(s, "max_scale={}", self.max_scale);
        let _ = writeln!(s, "noise={}", self.noise);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.num_train,
            Split::Val => self.num_val,
        }
    }
}

/// Inside-test for class `class` centred at `(cx, cy)` with radius `r`,
/// evaluated at pixel centre `(px, py)`.
fn covers(class: usize, px: f64, py: f64, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match class {
        1 => dx * dx + dy * dy <= r * r,
        2 => dx.abs() <= r && dy.abs() <= r,
        // Apex up, base along the bottom edge.
        3 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        4 => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        _ => unreachable!("class {class} has no shape"),
    }
}

fn random_color(rng: &mut ChaCha8Rng, avoid: &[f64; 3]) -> [f64; 3] {
    loop {
        let c = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let diff: f64 = c.iter().zip(avoid).map(|(a, b)| (a - b).abs()).sum::<f64>() / 3.0;
        if diff >= 0.25 {
            return c;
        }
    }
}

/// Generates sample `index` of `split`; a pure function of its arguments.
pub fn generate_sample(spec: &DatasetSpec, split: Split, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream() + index as u64);

    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let background: [f64; 3] = [
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
        rng.gen_range(0.15..0.85),
    ];
    let mut image = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let jitter = if spec.noise > 0.0 {
                rng.gen_range(-0.5..0.5) * spec.noise
            } else {
                0.0
            };
            image[c * plane + p] = (background[c] + jitter).clamp(0.0, 1.0);
        }
    }
    let mut labels = vec![0u8; plane];

    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut classes: Vec<usize> = (1..=spec.num_fg_classes).collect();
    classes.shuffle(&mut rng);
    classes.truncate(count);

    let side = h.min(w) as f64;
    for &class in &classes {
        let scale = if spec.max_scale > spec.min_scale {
            rng.gen_range(spec.min_scale..=spec.max_scale)
        } else {
            spec.min_scale
        };
        let r = scale * side / 2.0;
        let cx = rng.gen_range(r..=(w as f64 - r).max(r));
        let cy = rng.gen_range(r..=(h as f64 - r).max(r));
        let color = random_color(&mut rng, &background);

        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                if covers(class, x as f64 + 0.5, y as f64 + 0.5, cx, cy, r) {
                    let p = y * w + x;
                    labels[p] = class as u8;
                    for c in 0..3 {
                        image[c * plane + p] = color[c];
                    }
                }
            }
        }
    }

    let mask = SegmentationMask::new(h, w, labels)?;
    let bag = LabelBag::new(mask.present(), spec.num_fg_classes)?;
    Ok(Sample {
        image: Tensor::new(&[3, h, w], image)?,
        mask,
        bag,
    })
}

pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    (0..spec.count(split))
        .map(|i| generate_sample(spec, split, i))
        .collect()
}

pub fn image_rel_path(index: usize) -> String {
    format!("img/{index:04}.ppm")
}

pub fn mask_rel_path(index: usize) -> String {
    format!("mask/{index:04}.pgm")
}

/// Writes one split directory: `img/NNNN.ppm`, `mask/NNNN.pgm`, `manifest.tsv`.
pub fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    for sub in ["img", "mask"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let (img, mask) = (image_rel_path(i), mask_rel_path(i));
        write_file(&dir.join(&img), &encode_ppm(&s.image)?)?;
        write_file(&dir.join(&mask), &encode_pgm(&s.mask))?;
        manifest.push_str(&format_manifest_line(&img, &mask, &s.bag));
    }
    write_file(&dir.join(MANIFEST_FILE), manifest.as_bytes())
}

/// Generates both splits under `root/train` and `root/val` and records the
/// spec at `root/dataset.spec`.
pub fn generate_dataset(spec: &DatasetSpec, root: &Path) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
    for split in [Split::Train, Split::Val] {
        let samples = generate_split(spec, split)?;
        write_split(&root.join(split.dir_name()), &samples)?;
    }
    write_file(&root.join(SPEC_FILE), spec.to_text().as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> DatasetSpec {
        DatasetSpec {
            num_train: 6,
            num_val: 3,
            height: 32,
            width: 48,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn empty_scenes_are_all_background() {
        let spec = DatasetSpec {
            min_shapes: 0,
            max_shapes: 0,
            ..small(3)
        };
        for s in generate_split(&spec, Split::Train).unwrap() {
            assert!(s.mask.labels().iter().all(|&l| l == 0));
            assert_eq!(s.bag.labels().collect::<Vec<_>>(), vec![0]);
        }
    }

    #[test]
    fn disk_area_matches_circle() {
        let spec = DatasetSpec {
            num_fg_classes: 1,
            min_shapes: 1,
            max_shapes: 1,
            min_scale: 0.4,
            max_scale: 0.4,
            height: 64,
            width: 64,
            num_train: 20,
            ..Default::default()
        };
        let expect = std::f64::consts::PI * (0.2f64 * 64.0).powi(2);
        for s in generate_split(&spec, Split::Train).unwrap() {
            let n = s.mask.labels().iter().filter(|&&l| l == 1).count() as f64;
            assert!((n - expect).abs() <= 0.15 * expect, "{n} vs {expect}");
        }
    }

    #[test]
    fn bag_matches_mask_and_classes_are_distinct() {
        let spec = small(9);
        for split in [Split::Train, Split::Val] {
            for s in generate_split(&spec, split).unwrap() {
                let from_mask: Vec<_> = s.mask.present().into_iter().collect();
                assert_eq!(s.bag.labels().collect::<Vec<_>>(), from_mask);
                assert!(s.bag.len() <= 1 + spec.max_shapes);
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn splits_differ_and_samples_are_reproducible() {
        let spec = small(4);
        let a = generate_sample(&spec, Split::Train, 2).unwrap();
        let b = generate_sample(&spec, Split::Train, 2).unwrap();
        let v = generate_sample(&spec, Split::Val, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.image, v.image);
    }

    #[test]
    fn spec_text_roundtrip_and_errors() {
        let spec = DatasetSpec {
            noise: 0.25,
            seed: 77,
            ..small(0)
        };
        assert_eq!(DatasetSpec::parse(&spec.to_text()).unwrap(), spec);
        assert!(DatasetSpec::parse("bogus=1").is_err());
        assert!(DatasetSpec::parse("height=abc").is_err());
        assert!(DatasetSpec::parse("height=62").is_err());
        assert!(DatasetSpec::parse("height=8\nwidth=8").is_err());
        assert!(DatasetSpec::parse("max_shapes=5").is_err());
        let parsed = DatasetSpec::parse("# comment\n\nseed = 5\n").unwrap();
        assert_eq!(parsed.seed, 5);
        assert_eq!(parsed.num_train, 500);
    }

    #[test]
    fn every_shape_rasterizes_inside_its_box() {
        for class in 1..=4 {
            let mut n = 0;
            for y in 0..20 {
                for x in 0..20 {
                    if covers(class, x as f64 + 0.5, y as f64 + 0.5, 10.0, 10.0, 8.0) {
                        n += 1;
                        assert!((2..18).contains(&x) && (2..18).contains(&y));
                    }
                }
            }
            assert!(n > 50, "class {class} covers only {n} pixels");
        }
    }
}
