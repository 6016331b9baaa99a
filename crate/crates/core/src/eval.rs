//! Sliding-window and multi-scale inference, the confusion matrix, and mIoU.

use crate::error::{invalid, Error, Result};
use crate::model::Setr;
use crate::parallel::parallel_map;
use crate::tensor::{bilinear_forward, Tensor};

/// Scale factors of the multi-scale test.
pub const DEFAULT_SCALES: [f32; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75];
/// Spatial sizes fed to the model are multiples of this.
pub const SIZE_MULTIPLE: usize = 16;

/// Anything that maps a normalized `[H, W, 3]` image to `[H, W, K]` logits.
pub trait Segmenter: Sync {
    fn classes(&self) -> usize;
    fn logits(&self, image: &Tensor) -> Result<Tensor>;
}

impl Segmenter for Setr {
    fn classes(&self) -> usize {
        Setr::classes(self)
    }

    fn logits(&self, image: &Tensor) -> Result<Tensor> {
        self.predict_logits(image)
    }
}

fn hwc(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(invalid(format!("expected an H×W×C tensor, got {:?}", t.shape()))),
    }
}

/// Align-corners bilinear resize of an `[H, W, C]` tensor. Equal sizes are
/// returned unchanged.
pub fn resize(t: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (h, w, c) = hwc(t)?;
    if (h, w) == (oh, ow) {
        return Ok(t.clone());
    }
    Tensor::new(&[oh, ow, c], bilinear_forward(t.data(), 1, h, w, c, oh, ow))
}

/// Mirrors an `[H, W, C]` tensor left to right.
pub fn flip_horizontal(t: &Tensor) -> Result<Tensor> {
    let (h, w, c) = hwc(t)?;
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let p = (y * w + x) * c;
            out.extend_from_slice(&src[p..p + c]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Nearest positive multiple of 16.
pub fn snap_size(x: f64) -> usize {
    ((x / SIZE_MULTIPLE as f64).round() as usize).max(1) * SIZE_MULTIPLE
}

/// Window origins along one axis: every `stride`, with the last window
/// moved back to abut the far edge.
pub fn window_starts(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let last = len - window;
    let mut starts: Vec<usize> = (0..last).step_by(stride).collect();
    starts.push(last);
    starts
}

fn crop(t: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let (_, w, c) = hwc(t)?;
    let mut out = Vec::with_capacity(ch * cw * c);
    for y in top..top + ch {
        let p = (y * w + left) * c;
        out.extend_from_slice(&t.data()[p..p + cw * c]);
    }
    Tensor::new(&[ch, cw, c], out)
}

/// Sliding-window logits `[H, W, K]`.
///
/// An image that fits inside one window is evaluated whole, padded by
/// resizing up to the next multiple of 16 when needed. Otherwise an
/// image whose shorter side is below `window` is first rescaled so that side
/// equals `window`, and the averaged logits are resized back.
pub fn sliding_window_infer<S: Segmenter + ?Sized>(
    model: &S,
    image: &Tensor,
    window: usize,
    stride: usize,
) -> Result<Tensor> {
    if window == 0 || !window.is_multiple_of(SIZE_MULTIPLE) {
        return Err(invalid(format!("window {window} must be a positive multiple of {SIZE_MULTIPLE}")));
    }
    if stride == 0 || stride > window {
        return Err(invalid(format!("stride {stride} must be in 1..={window}")));
    }
    let (h, w, _) = hwc(image)?;
    if h <= window && w <= window {
        let (ph, pw) = (h.next_multiple_of(SIZE_MULTIPLE), w.next_multiple_of(SIZE_MULTIPLE));
        if (ph, pw) == (h, w) {
            return model.logits(image);
        }
        return resize(&model.logits(&resize(image, ph, pw)?)?, h, w);
    }
    let short = h.min(w);
    let (sh, sw) = if short < window {
        let f = window as f64 / short as f64;
        let scaled = |x: usize| if x == short { window } else { snap_size(x as f64 * f).max(window) };
        (scaled(h), scaled(w))
    } else {
        (h, w)
    };
    let scaled = resize(image, sh, sw)?;
    let windows: Vec<(usize, usize)> = window_starts(sh, window, stride)
        .into_iter()
        .flat_map(|y| window_starts(sw, window, stride).into_iter().map(move |x| (y, x)))
        .collect();
    let outs = parallel_map(&windows, |&(y, x)| -> Result<Tensor> {
        model.logits(&crop(&scaled, y, x, window.min(sh), window.min(sw))?)
    });
    let k = model.classes();
    let mut sum = vec![0.0f32; sh * sw * k];
    let mut count = vec![0u32; sh * sw];
    for (&(y0, x0), out) in windows.iter().zip(outs) {
        let out = out?;
        let (oh, ow, ok) = hwc(&out)?;
        if ok != k {
            return Err(Error::Shape { op: "sliding_window_infer", lhs: vec![oh, ow, ok], rhs: vec![k] });
        }
        for y in 0..oh {
            for x in 0..ow {
                let (py, px) = (y0 + y, x0 + x);
                count[py * sw + px] += 1;
                let dst = (py * sw + px) * k;
                let src = (y * ow + x) * k;
                for (d, s) in sum[dst..dst + k].iter_mut().zip(&out.data()[src..src + k]) {
                    *d += s;
                }
            }
        }
    }
    for (p, &n) in count.iter().enumerate() {
        let n = n as f32;
        sum[p * k..(p + 1) * k].iter_mut().for_each(|v| *v /= n);
    }
    resize(&Tensor::new(&[sh, sw, k], sum)?, h, w)
}

/// How per-scale maps are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Averaging {
    #[default]
    Logits,
    Probabilities,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleConfig {
    pub scales: Vec<f32>,
    pub flip: bool,
    pub window: usize,
    pub stride: usize,
    pub averaging: Averaging,
}

impl MultiScaleConfig {
    /// Default scales with flipping; stride is two thirds of the window.
    pub fn new(window: usize) -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            flip: true,
            window,
            stride: default_stride(window),
            averaging: Averaging::Logits,
        }
    }

    /// A single scale without flipping.
    pub fn single(window: usize) -> Self {
        Self { scales: vec![1.0], flip: false, ..Self::new(window) }
    }
}

pub fn default_stride(window: usize) -> usize {
    (window * 2 / 3).max(1)
}

fn softmax_pixels(t: &mut Tensor) {
    let k = *t.shape().last().unwrap();
    for px in t.data_mut().chunks_mut(k) {
        let m = px.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0f64;
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            s += *v as f64;
        }
        px.iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
    }
}

/// Averaged multi-scale (and optionally flipped) maps `[H, W, K]` before argmax.
pub fn multi_scale_logits<S: Segmenter + ?Sized>(model: &S, image: &Tensor, cfg: &MultiScaleConfig) -> Result<Tensor> {
    if cfg.scales.is_empty() {
        return Err(invalid("at least one scale is required"));
    }
    if let Some(s) = cfg.scales.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(invalid(format!("scale {s} must be positive")));
    }
    let (h, w, _) = hwc(image)?;
    let mut acc: Option<Tensor> = None;
    let mut maps = 0usize;
    for &s in &cfg.scales {
        let (sh, sw) = if s == 1.0 { (h, w) } else { (snap_size(h as f64 * s as f64), snap_size(w as f64 * s as f64)) };
        let scaled = resize(image, sh, sw)?;
        let mut passes = vec![false];
        if cfg.flip {
            passes.push(true);
        }
        for flip in passes {
            let input = if flip { flip_horizontal(&scaled)? } else { scaled.clone() };
            let mut out = sliding_window_infer(model, &input, cfg.window, cfg.stride)?;
            if flip {
                out = flip_horizontal(&out)?;
            }
            let mut out = resize(&out, h, w)?;
            if cfg.averaging == Averaging::Probabilities {
                softmax_pixels(&mut out);
            }
            match acc.as_mut() {
                None => acc = Some(out),
                Some(a) => a.data_mut().iter_mut().zip(out.data()).for_each(|(a, b)| *a += b),
            }
            maps += 1;
        }
    }
    let mut acc = acc.expect("at least one map");
    if maps > 1 {
        let n = maps as f32;
        acc.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok(acc)
}

/// Per-pixel argmax, ties to the lowest class index.
pub fn argmax_map(logits: &Tensor) -> Result<Vec<u16>> {
    let (_, _, k) = hwc(logits)?;
    Ok(logits
        .data()
        .chunks(k)
        .map(|px| {
            let mut best = 0;
            for (i, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = i;
                }
            }
            best as u16
        })
        .collect())
}

/// Multi-scale prediction: class index per pixel.
pub fn multi_scale_infer<S: Segmenter + ?Sized>(model: &S, image: &Tensor, cfg: &MultiScaleConfig) -> Result<Vec<u16>> {
    argmax_map(&multi_scale_logits(model, image, cfg)?)
}

/// `K×K` counts indexed `[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/truth pair; truth pixels equal to `ignore` are skipped.
    pub fn update(&mut self, pred: &[u16], truth: &[u16], ignore: u16) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape { op: "update_confusion", lhs: vec![pred.len()], rhs: vec![truth.len()] });
        }
        let k = self.classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore {
                continue;
            }
            for v in [t, p] {
                if v as usize >= k {
                    return Err(Error::LabelRange { label: v as usize, classes: k });
                }
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(invalid(format!("cannot merge {} and {} classes", self.classes, other.classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    /// IoU per class; `None` when the class is absent from truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub pixel_acc: f64,
    /// Set when no pixel was scored.
    pub empty: bool,
}

pub fn compute_miou(cm: &ConfusionMatrix) -> MiouReport {
    let total = cm.total();
    if total == 0 {
        return MiouReport { miou: 0.0, per_class: Vec::new(), pixel_acc: 0.0, empty: true };
    }
    let k = cm.classes;
    let mut per_class = Vec::with_capacity(k);
    let mut trace = 0u64;
    for c in 0..k {
        let tp = cm.get(c, c);
        trace += tp;
        let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let col: u64 = (0..k).map(|t| cm.get(t, c)).sum();
        let denom = row + col - tp;
        per_class.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    MiouReport {
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
        pixel_acc: trace as f64 / total as f64,
        empty: false,
    }
}

/// A normalized image with its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[H, W, 3]`.
    pub image: Tensor,
    /// Row-major `H·W` class indices.
    pub labels: Vec<u16>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }
}

/// Accumulates the confusion matrix of `model` over `samples`.
pub fn evaluate<S: Segmenter + ?Sized>(
    model: &S,
    samples: &[Sample],
    cfg: &MultiScaleConfig,
    ignore: u16,
) -> Result<ConfusionMatrix> {
    let preds = parallel_map(samples, |s| multi_scale_infer(model, &s.image, cfg));
    let mut cm = ConfusionMatrix::new(model.classes());
    for (s, pred) in samples.iter().zip(preds) {
        cm.update(&pred?, &s.labels, ignore)?;
    }
    Ok(cm)
}

/// Writes `class,iou` rows, leaving absent classes blank.
pub fn per_class_csv(report: &MiouReport) -> String {
    let mut s = String::from("class,iou\n");
    for (c, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => s.push_str(&format!("{c},{v:.6}\n")),
            None => s.push_str(&format!("{c},\n")),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns the same logit vector at every pixel.
    struct Constant(Vec<f32>);

    impl Segmenter for Constant {
        fn classes(&self) -> usize {
            self.0.len()
        }

        fn logits(&self, image: &Tensor) -> Result<Tensor> {
            let (h, w, _) = hwc(image)?;
            let k = self.0.len();
            Ok(Tensor::from_fn(&[h, w, k], |i| self.0[i % k]))
        }
    }

    #[test]
    fn window_placement_abuts_the_edge() {
        assert_eq!(window_starts(64, 64, 32), vec![0]);
        assert_eq!(window_starts(100, 64, 42), vec![0, 36]);
        assert_eq!(window_starts(128, 32, 32), vec![0, 32, 64, 96]);
    }

    #[test]
    fn sliding_window_rejects_bad_strides() {
        let m = Constant(vec![0.0, 1.0]);
        let img = Tensor::zeros(&[64, 64, 3]);
        assert!(sliding_window_infer(&m, &img, 32, 0).is_err());
        assert!(sliding_window_infer(&m, &img, 32, 33).is_err());
        assert!(sliding_window_infer(&m, &img, 30, 10).is_err());
    }

    #[test]
    fn constant_model_is_stride_invariant() {
        let m = Constant(vec![0.25, -1.0, 2.0]);
        let img = Tensor::zeros(&[80, 112, 3]);
        let a = sliding_window_infer(&m, &img, 32, 32).unwrap();
        let b = sliding_window_infer(&m, &img, 32, 11).unwrap();
        assert_eq!(a.shape(), &[80, 112, 3]);
        assert!(a.same_values(&b));
        assert!(a.data().chunks(3).all(|px| px == [0.25, -1.0, 2.0]));
    }

    #[test]
    fn short_images_are_rescaled_to_the_window() {
        let m = Constant(vec![1.0, 0.0]);
        let img = Tensor::zeros(&[32, 96, 3]);
        let out = sliding_window_infer(&m, &img, 48, 32).unwrap();
        assert_eq!(out.shape(), &[32, 96, 2]);
    }

    /// Rejects inputs whose sides are not multiples of 16.
    struct Strict(Constant);

    impl Segmenter for Strict {
        fn classes(&self) -> usize {
            self.0.classes()
        }

        fn logits(&self, image: &Tensor) -> Result<Tensor> {
            let (h, w, _) = hwc(image)?;
            if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
                return Err(invalid(format!("{h}x{w}")));
            }
            self.0.logits(image)
        }
    }

    #[test]
    fn odd_sized_whole_images_are_padded_by_resizing() {
        let m = Strict(Constant(vec![0.5, 1.5]));
        let out = sliding_window_infer(&m, &Tensor::zeros(&[30, 45, 3]), 64, 32).unwrap();
        assert_eq!(out.shape(), &[30, 45, 2]);
        assert!(out.data().chunks(2).all(|px| px == [0.5, 1.5]));
    }

    #[test]
    fn two_scales_agree_with_one_on_constant_models() {
        let m = Constant(vec![0.1, 0.7, 0.2]);
        let img = Tensor::from_fn(&[48, 64, 3], |i| (i % 7) as f32);
        let one = multi_scale_infer(&m, &img, &MultiScaleConfig::single(32)).unwrap();
        let cfg = MultiScaleConfig { scales: vec![0.75, 1.5], ..MultiScaleConfig::single(32) };
        assert_eq!(multi_scale_infer(&m, &img, &cfg).unwrap(), one);
        let probs = MultiScaleConfig { averaging: Averaging::Probabilities, flip: true, ..cfg };
        assert_eq!(multi_scale_infer(&m, &img, &probs).unwrap(), one);
    }

    #[test]
    fn argmax_ties_go_to_the_lowest_class() {
        let t = Tensor::new(&[1, 2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_map(&t).unwrap(), vec![0, 1]);
    }

    #[test]
    fn flip_is_an_involution() {
        let t = Tensor::from_fn(&[3, 5, 2], |i| i as f32);
        let f = flip_horizontal(&t).unwrap();
        assert_eq!(f.at(&[1, 0, 1]), t.at(&[1, 4, 1]));
        assert!(flip_horizontal(&f).unwrap().same_values(&t));
    }

    #[test]
    fn confusion_examples() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 2, 2], &[0, 1, 2, 2], 255).unwrap();
        assert!((0..3).all(|t| (0..3).all(|p| (t == p) || cm.get(t, p) == 0)));
        let before = cm.clone();
        cm.update(&[1, 1], &[255, 255], 255).unwrap();
        assert_eq!(cm, before);
        assert!(matches!(cm.update(&[3], &[0], 255), Err(Error::LabelRange { .. })));
        assert!(cm.update(&[0], &[0, 1], 255).is_err());
    }

    #[test]
    fn miou_examples() {
        let mut cm = ConfusionMatrix::new(2);
        // truth 0 → pred 0 twice, truth 0 → pred 1 once, truth 1 → pred 1 once.
        cm.update(&[0, 0, 1, 1], &[0, 0, 0, 1], 255).unwrap();
        let r = compute_miou(&cm);
        assert_eq!(r.per_class, vec![Some(2.0 / 3.0), Some(0.5)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(r.pixel_acc, 0.75);

        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1], &[0, 1], 255).unwrap();
        let r = compute_miou(&cm);
        assert_eq!((r.miou, r.pixel_acc, r.per_class[2]), (1.0, 1.0, None));

        let r = compute_miou(&ConfusionMatrix::new(4));
        assert!(r.empty && r.per_class.is_empty() && r.miou == 0.0);
    }

    #[test]
    fn snapping() {
        assert_eq!(snap_size(24.0), 32);
        assert_eq!(snap_size(23.9), 16);
        assert_eq!(snap_size(3.0), 16);
        assert_eq!(snap_size(112.0), 112);
    }
}
