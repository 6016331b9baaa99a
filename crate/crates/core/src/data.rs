//! Synthetic segmentation data, binary PNM images and the dataset layout.
//!
//! A dataset root holds `dataset.txt` plus `{split}/images/NNNN.ppm` and
//! `{split}/labels/NNNN.pgm` (or `NNNN.sttn` when there are more than 256
//! classes).

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::eval::Sample;
use crate::parallel::parallel_map;
use crate::tensor::{read_sttn, write_sttn, SttnPayload, Tensor};

pub const DATASET_FILE: &str = "dataset.txt";

// ------------------------------------------------------------------ PNM

/// Reads a header token, skipping whitespace and `#` comments.
fn token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Corrupt("truncated PNM header".into()));
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut line = Vec::new();
                r.read_until(b'\n', &mut line)?;
            }
            b if b.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return String::from_utf8(tok).map_err(|_| Error::Corrupt("bad PNM header".into()));
                }
            }
            b => tok.push(b),
        }
    }
}

fn header_num<R: BufRead>(r: &mut R) -> Result<usize> {
    let t = token(r)?;
    t.parse().map_err(|_| Error::Corrupt(format!("bad PNM header field '{t}'")))
}

/// Decodes a binary PNM with 8-bit samples; returns `(width, height, data)`.
fn read_pnm<R: Read>(r: R, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(r);
    let m = token(&mut r)?;
    if m != magic {
        return Err(Error::Corrupt(format!("expected a {magic} image, found '{m}'")));
    }
    let w = header_num(&mut r)?;
    let h = header_num(&mut r)?;
    let maxval = header_num(&mut r)?;
    if w == 0 || h == 0 || maxval != 255 {
        return Err(Error::Corrupt(format!("unsupported PNM geometry {w}x{h} max {maxval}")));
    }
    let mut data = vec![0u8; w * h * channels];
    r.read_exact(&mut data).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corrupt("truncated PNM pixel data".into()),
        _ => Error::Io(e),
    })?;
    Ok((w, h, data))
}

fn write_pnm<W: Write>(mut out: W, magic: &str, w: usize, h: usize, data: &[u8]) -> Result<()> {
    write!(out, "{magic}\n{w} {h}\n255\n")?;
    out.write_all(data)?;
    Ok(())
}

/// Writes binary RGB (P6).
pub fn write_ppm<W: Write>(out: W, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::Shape { op: "write_ppm", lhs: vec![h, w, 3], rhs: vec![rgb.len()] });
    }
    write_pnm(out, "P6", w, h, rgb)
}

pub fn read_ppm<R: Read>(r: R) -> Result<(usize, usize, Vec<u8>)> {
    read_pnm(r, "P6", 3)
}

/// Writes binary grayscale (P5).
pub fn write_pgm<W: Write>(out: W, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::Shape { op: "write_pgm", lhs: vec![h, w], rhs: vec![gray.len()] });
    }
    write_pnm(out, "P5", w, h, gray)
}

pub fn read_pgm<R: Read>(r: R) -> Result<(usize, usize, Vec<u8>)> {
    read_pnm(r, "P5", 1)
}

// ----------------------------------------------------------- synthetic

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Inclusive range of foreground shapes per image.
    pub shapes: (usize, usize),
    /// Amplitude of uniform per-pixel noise, in 8-bit levels.
    pub noise: f32,
    pub seed: u64,
    pub train: usize,
    pub val: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { height: 64, width: 64, classes: 4, shapes: (1, 4), noise: 12.0, seed: 0, train: 16, val: 4 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return Err(invalid(format!(
                "image size {}x{} must be a positive multiple of 16",
                self.height, self.width
            )));
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(invalid(format!("class count {} outside 2..=65535", self.classes)));
        }
        if self.shapes.0 > self.shapes.1 {
            return Err(invalid("shape range is empty"));
        }
        if !(self.noise >= 0.0) {
            return Err(invalid("noise amplitude must be nonnegative"));
        }
        Ok(())
    }
}

/// Decoded image and labels before normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPair {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB.
    pub rgb: Vec<u8>,
    pub labels: Vec<u16>,
}

impl RawPair {
    /// Normalizes with per-channel `(v − mean) / std`.
    pub fn to_sample(&self, mean: [f32; 3], std: [f32; 3]) -> Result<Sample> {
        let data = self.rgb.iter().enumerate().map(|(i, &v)| (v as f32 - mean[i % 3]) / std[i % 3]).collect();
        Ok(Sample { image: Tensor::new(&[self.height, self.width, 3], data)?, labels: self.labels.clone() })
    }
}

/// Base colour of a class: evenly spaced hues, background a dull grey.
fn class_color(k: usize, classes: usize) -> [f32; 3] {
    if k == 0 {
        return [110.0, 110.0, 110.0];
    }
    let hue = (k - 1) as f32 / (classes - 1) as f32 * 6.0;
    let sector = hue.floor() as usize % 6;
    let f = hue - hue.floor();
    let (hi, lo) = (210.0, 40.0);
    let mid_up = lo + f * (hi - lo);
    let mid_down = hi - f * (hi - lo);
    match sector {
        0 => [hi, mid_up, lo],
        1 => [mid_down, hi, lo],
        2 => [lo, hi, mid_up],
        3 => [lo, mid_down, hi],
        4 => [mid_up, lo, hi],
        _ => [hi, lo, mid_down],
    }
}

/// Class-specific texture: a checker or stripe pattern with its own period.
fn texture(k: usize, x: usize, y: usize) -> f32 {
    let period = 2 + k % 4;
    let on = match k % 3 {
        0 => (x / period + y / period).is_multiple_of(2),
        1 => (x / period).is_multiple_of(2),
        _ => ((x + y) / period).is_multiple_of(2),
    };
    if on {
        18.0
    } else {
        -18.0
    }
}

enum Shape {
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
    Stripe { vertical: bool, start: usize, end: usize },
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, h: usize, w: usize) -> Self {
        match rng.random_range(0..3) {
            0 => {
                let (hh, ww) = (rng.random_range(h / 6..=h / 2), rng.random_range(w / 6..=w / 2));
                let (y0, x0) = (rng.random_range(0..=h - hh), rng.random_range(0..=w - ww));
                Shape::Rect { y0, x0, y1: y0 + hh, x1: x0 + ww }
            }
            1 => Shape::Ellipse {
                cy: rng.random_range(0.0..h as f32),
                cx: rng.random_range(0.0..w as f32),
                ry: rng.random_range(h as f32 / 8.0..h as f32 / 3.0),
                rx: rng.random_range(w as f32 / 8.0..w as f32 / 3.0),
            },
            _ => {
                let vertical = rng.random_bool(0.5);
                let len = if vertical { w } else { h };
                let thick = rng.random_range(len / 10..=len / 4).max(1);
                let start = rng.random_range(0..=len - thick);
                Shape::Stripe { vertical, start, end: start + thick }
            }
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y as f32 + 0.5 - cy) / ry;
                let dx = (x as f32 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            Shape::Stripe { vertical, start, end } => (start..end).contains(if vertical { &x } else { &y }),
        }
    }
}

fn split_stream(split: &str) -> u64 {
    match split {
        "train" => 0,
        "val" => 1,
        _ => 2,
    }
}

/// Generates image `index` of `split`; a pure function of the spec seed,
/// split and index.
pub fn synth_pair(spec: &SynthSpec, split: &str, index: usize) -> RawPair {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((split_stream(split) << 32) | index as u64);
    let (h, w, k) = (spec.height, spec.width, spec.classes);
    let mut labels = vec![0u16; h * w];
    let n = rng.random_range(spec.shapes.0..=spec.shapes.1);
    for _ in 0..n {
        let class = rng.random_range(1..k) as u16;
        let shape = Shape::random(&mut rng, h, w);
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y, x) {
                    labels[y * w + x] = class;
                }
            }
        }
    }
    let mut rgb = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let c = labels[y * w + x] as usize;
            let base = class_color(c, k);
            let t = texture(c, x, y);
            for v in base {
                let noise = if spec.noise > 0.0 { rng.random_range(-spec.noise..=spec.noise) } else { 0.0 };
                rgb.push((v + t + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RawPair { height: h, width: w, rgb, labels }
}

// ------------------------------------------------------------- dataset

/// Paired image and label files of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: String,
    pub classes: usize,
    pub images: Vec<PathBuf>,
    pub labels: Vec<PathBuf>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Indexes `root/{split}`, pairing files by stem.
    pub fn open(root: &Path, split: &str) -> Result<Self> {
        let meta = fs::read_to_string(root.join(DATASET_FILE))?;
        let classes = meta
            .lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == "classes")
            .and_then(|(_, v)| v.trim().parse().ok())
            .ok_or_else(|| Error::Corrupt(format!("{} lacks a class count", root.join(DATASET_FILE).display())))?;
        let dir = root.join(split);
        let mut images: Vec<PathBuf> =
            fs::read_dir(dir.join("images"))?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        images.retain(|p| p.extension().is_some_and(|e| e == "ppm"));
        images.sort();
        let mut labels = Vec::with_capacity(images.len());
        for img in &images {
            let stem = img.file_stem().unwrap();
            let candidates = ["pgm", "sttn"].map(|ext| dir.join("labels").join(stem).with_extension(ext));
            let found = candidates
                .into_iter()
                .find(|p| p.exists())
                .ok_or_else(|| invalid(format!("no label file for {}", img.display())))?;
            labels.push(found);
        }
        Ok(Self { root: root.to_path_buf(), split: split.to_string(), classes, images, labels })
    }

    pub fn load_raw(&self, i: usize) -> Result<RawPair> {
        let (img, lab) = match (self.images.get(i), self.labels.get(i)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(invalid(format!("index {i} outside dataset of {}", self.len()))),
        };
        let (w, h, rgb) = read_ppm(fs::File::open(img)?)?;
        let (lshape, labels) = read_labels(lab)?;
        if lshape != (h, w) {
            return Err(Error::Shape { op: "load_pair", lhs: vec![h, w], rhs: vec![lshape.0, lshape.1] });
        }
        Ok(RawPair { height: h, width: w, rgb, labels })
    }

    /// Image `i` normalized with `(mean, std)` together with its labels.
    pub fn load_pair(&self, i: usize, mean: [f32; 3], std: [f32; 3]) -> Result<Sample> {
        self.load_raw(i)?.to_sample(mean, std)
    }

    pub fn load_all_raw(&self) -> Result<Vec<RawPair>> {
        (0..self.len()).map(|i| self.load_raw(i)).collect()
    }
}

/// Reads a P5 or STTN uint16 label map; returns `((h, w), labels)`.
pub fn read_labels(path: &Path) -> Result<((usize, usize), Vec<u16>)> {
    let file = fs::File::open(path)?;
    if path.extension().is_some_and(|e| e == "sttn") {
        let (shape, data) = read_sttn(&mut BufReader::new(file))?.into_u16()?;
        match shape[..] {
            [h, w] => Ok(((h, w), data)),
            _ => Err(Error::Corrupt(format!("label map {} is not 2-D", path.display()))),
        }
    } else {
        let (w, h, gray) = read_pgm(file)?;
        Ok(((h, w), gray.into_iter().map(u16::from).collect()))
    }
}

/// Writes labels as P5 when every value fits a byte and `classes ≤ 256`,
/// otherwise as STTN uint16. Returns the path written.
pub fn write_labels(stem: &Path, h: usize, w: usize, labels: &[u16], classes: usize) -> Result<PathBuf> {
    if classes <= 256 {
        let path = stem.with_extension("pgm");
        let gray: Vec<u8> = labels
            .iter()
            .map(|&l| u8::try_from(l).map_err(|_| Error::LabelRange { label: l as usize, classes }))
            .collect::<Result<_>>()?;
        write_pgm(fs::File::create(&path)?, w, h, &gray)?;
        Ok(path)
    } else {
        let path = stem.with_extension("sttn");
        let mut f = fs::File::create(&path)?;
        write_sttn(&mut f, &SttnPayload::U16 { shape: vec![h, w], data: labels.to_vec() })?;
        Ok(path)
    }
}

/// Writes the synthetic dataset under `root` and returns the training index.
pub fn generate_synth(spec: &SynthSpec, root: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    fs::create_dir_all(root)?;
    let meta = format!(
        "classes = {}\nheight = {}\nwidth = {}\nseed = {}\ntrain = {}\nval = {}\n",
        spec.classes, spec.height, spec.width, spec.seed, spec.train, spec.val
    );
    fs::write(root.join(DATASET_FILE), meta)?;
    for (split, count) in [("train", spec.train), ("val", spec.val)] {
        let dir = root.join(split);
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("labels"))?;
        let ids: Vec<usize> = (0..count).collect();
        let pairs = parallel_map(&ids, |&i| synth_pair(spec, split, i));
        for (i, p) in pairs.iter().enumerate() {
            let name = format!("{i:04}");
            let mut f =
                std::io::BufWriter::new(fs::File::create(dir.join("images").join(&name).with_extension("ppm"))?);
            write_ppm(&mut f, p.width, p.height, &p.rgb)?;
            f.flush()?;
            write_labels(&dir.join("labels").join(&name), p.height, p.width, &p.labels, spec.classes)?;
        }
    }
    DatasetIndex::open(root, "train")
}
