//! Property tests over random inputs, plus the published encoder presets.

mod common;

use proptest::prelude::*;
use seq2seg::decoders::{map_to_sequence, mla_layers, sequence_to_map, DecoderKind};
use seq2seg::encoder::EncoderConfig;
use seq2seg::eval::{compute_miou, window_starts, ConfusionMatrix};
use seq2seg::model::{ForwardOptions, ModelConfig, Setr};
use seq2seg::params::{Graph, Mode};
use seq2seg::sequentializer::{sequence_len, PositionEmbedding};
use seq2seg::training::{poly_lr, total_loss};
use seq2seg::viz::{pos_similarity, rollout_stages, AttentionStack};
use seq2seg::{Tape, Tensor};

#[test]
fn encoder_presets() {
    let base = EncoderConfig::t_base();
    assert_eq!((base.depth, base.hidden, base.heads), (12, 768, 12));
    let large = EncoderConfig::t_large();
    assert_eq!((large.depth, large.hidden, large.heads), (24, 1024, 16));
    for (enc, kind) in [(base, DecoderKind::Pup), (large, DecoderKind::Mla)] {
        enc.validate().unwrap();
        assert_eq!(enc.hidden % enc.heads, 0);
        let mut cfg = ModelConfig::t_tiny(kind, 19, 768);
        cfg.aux_layers = seq2seg::model::scale_layers(kind.default_aux_layers(), enc.depth);
        cfg.encoder = enc;
        cfg.validate().unwrap();
    }
    assert_eq!(mla_layers(24, 4).unwrap(), [6, 12, 18, 24]);
}

fn tiny(kind: DecoderKind) -> Setr {
    let mut cfg = ModelConfig::t_tiny(kind, 3, 32);
    cfg.encoder = EncoderConfig::new(4, 16, 2).unwrap();
    cfg.decoder.width = 8;
    Setr::new(cfg, &mut common::rng(5)).unwrap()
}

/// Confusion matrix and mIoU by per-pixel set arithmetic.
fn miou_oracle(pred: &[u16], truth: &[u16], k: u16) -> f64 {
    let mut ious = Vec::new();
    for c in 0..k {
        let inter = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count();
        let union = pred.iter().zip(truth).filter(|&(&p, &t)| p == c || t == c).count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn logits_cover_every_input_pixel(gh in 1usize..5, gw in 1usize..5, kind in 0usize..3) {
        let kind = [DecoderKind::Naive, DecoderKind::Pup, DecoderKind::Mla][kind];
        let m = tiny(kind);
        let (h, w) = (16 * gh, 16 * gw);
        let images = common::random_tensor(&[1, h, w, 3], &mut common::rng((gh * 10 + gw) as u64));
        let mut g = Graph::new(&m.store, Mode::Train);
        let out = m.forward(&mut g, &images, ForwardOptions { aux: true, keep_attention: false }).unwrap();
        prop_assert_eq!(g.tape.shape(out.logits), &[1, h, w, 3]);
        for &(_, a) in &out.aux {
            prop_assert_eq!(g.tape.shape(a), &[1, h, w, 3]);
        }
        prop_assert_eq!(g.tape.shape(out.features.last())[1], sequence_len(h, w, 16));
    }

    #[test]
    fn sequence_map_round_trip(n in 1usize..3, gh in 1usize..6, gw in 1usize..6, c in 1usize..5, seed in any::<u64>()) {
        let z = common::random_tensor(&[n, gh * gw, c], &mut common::rng(seed));
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let map = sequence_to_map(&mut tape, v, gh, gw).unwrap();
        let back = map_to_sequence(&mut tape, map).unwrap();
        prop_assert!(tape.value(back).same_values(&z));
    }

    #[test]
    fn poly_lr_never_increases(base in 1e-4f32..1.0, total in 1usize..500, power in 0.05f32..3.0) {
        let lrs: Vec<f32> = (0..=total).map(|t| poly_lr(base, t, total, power).unwrap()).collect();
        prop_assert_eq!(lrs[0], base);
        prop_assert!(lrs.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn total_loss_is_nonnegative(k in 2usize..6, px in 1usize..20, seed in any::<u64>(), aux_weight in 0.0f32..1.0) {
        let mut rng = common::rng(seed);
        let main = common::random_tensor(&[1, 1, px, k], &mut rng);
        let aux = common::random_tensor(&[1, 1, px, k], &mut rng);
        let labels: Vec<u16> = (0..px).map(|i| if i % 7 == 6 { 255 } else { (i % k) as u16 }).collect();
        let mut tape = Tape::new();
        let (m, a) = (tape.constant(main), tape.constant(aux));
        let loss = total_loss(&mut tape, m, &[a], &labels, aux_weight, 255).unwrap();
        prop_assert!(tape.value(loss).data()[0] >= 0.0);
    }

    #[test]
    fn uniform_logits_cost_log_k(k in 2usize..40, px in 1usize..30, value in -5.0f32..5.0) {
        let labels: Vec<u16> = (0..px).map(|i| (i % k) as u16).collect();
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::full(&[1, 1, px, k], value));
        let loss = total_loss(&mut tape, m, &[], &labels, 0.4, 255).unwrap();
        prop_assert!((tape.value(loss).data()[0] as f64 - (k as f64).ln()).abs() < 1e-5);
    }

    #[test]
    fn confusion_matrix_ignores_image_order(
        maps in proptest::collection::vec(proptest::collection::vec((0u16..4, 0u16..4), 1..30), 1..6),
        rotate in 0usize..6,
    ) {
        let accumulate = |order: &[Vec<(u16, u16)>]| {
            let mut cm = ConfusionMatrix::new(4);
            for m in order {
                let (p, t): (Vec<u16>, Vec<u16>) = m.iter().copied().unzip();
                cm.update(&p, &t, 255).unwrap();
            }
            cm
        };
        let mut shuffled = maps.clone();
        shuffled.rotate_left(rotate % maps.len());
        shuffled.reverse();
        prop_assert_eq!(accumulate(&maps), accumulate(&shuffled));
    }

    #[test]
    fn miou_matches_pixel_sets(pairs in proptest::collection::vec((0u16..5, 0u16..5), 1..300)) {
        let (pred, truth): (Vec<u16>, Vec<u16>) = pairs.into_iter().unzip();
        let mut cm = ConfusionMatrix::new(5);
        cm.update(&pred, &truth, 255).unwrap();
        prop_assert_eq!(cm.total(), pred.len() as u64);
        prop_assert_eq!(compute_miou(&cm).miou, miou_oracle(&pred, &truth, 5));
    }

    #[test]
    fn windows_tile_the_axis(len in 1usize..400, window in 1usize..200, stride_frac in 0.1f64..1.0) {
        let stride = ((window as f64 * stride_frac) as usize).max(1);
        let starts = window_starts(len, window, stride);
        prop_assert_eq!(starts[0], 0);
        prop_assert!(starts.windows(2).all(|p| p[1] > p[0] && p[1] - p[0] <= stride));
        let end = starts.last().unwrap() + window;
        prop_assert!(end >= len);
        if len > window {
            prop_assert_eq!(end, len);
        }
    }

    #[test]
    fn rollout_rows_are_distributions(depth in 1usize..5, heads in 1usize..4, tokens in 1usize..10, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let layers: Vec<Tensor> = (0..depth)
            .map(|_| {
                let raw = common::random_tensor(&[heads, tokens, tokens], &mut rng);
                let mut data: Vec<f32> = raw.data().iter().map(|v| v.exp()).collect();
                for row in data.chunks_mut(tokens) {
                    let s: f32 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                Tensor::new(&[heads, tokens, tokens], data).unwrap()
            })
            .collect();
        let stages = rollout_stages(&AttentionStack::new(layers).unwrap()).unwrap();
        prop_assert_eq!(stages.len(), depth);
        for stage in &stages {
            for row in stage.data().chunks(tokens) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                prop_assert!((s - 1.0).abs() <= 1e-5, "row sums to {}", s);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn position_self_similarity_is_the_row_maximum(gh in 1usize..6, gw in 1usize..6, c in 1usize..8, seed in any::<u64>()) {
        let table = common::random_tensor(&[gh * gw, c], &mut common::rng(seed));
        let sim = pos_similarity(&PositionEmbedding::new(gh, gw, table).unwrap());
        let n = gh * gw;
        for i in 0..n {
            let row = &sim[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(row[i] >= max - 1e-12);
        }
    }
}
