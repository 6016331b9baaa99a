//! Every on-disk format read back by the artifact itself.

use proptest::prelude::*;
use seq2seg::config::RunConfig;
use seq2seg::data::{read_labels, read_pgm, read_ppm, write_labels, write_pgm, write_ppm};
use seq2seg::decoders::DecoderKind;
use seq2seg::eval::{compute_miou, per_class_csv, ConfusionMatrix};
use seq2seg::params::ParamStore;
use seq2seg::tensor::{read_sttn, write_sttn, SttnPayload};
use seq2seg::Tensor;

fn bytes(len: usize) -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(any::<u8>(), len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ppm_round_trip((w, h, rgb) in (1usize..20, 1usize..20).prop_flat_map(|(w, h)| (Just(w), Just(h), bytes(w * h * 3)))) {
        let mut buf = Vec::new();
        write_ppm(&mut buf, w, h, &rgb).unwrap();
        prop_assert_eq!(read_ppm(buf.as_slice()).unwrap(), (w, h, rgb));
    }

    #[test]
    fn pgm_round_trip((w, h, gray) in (1usize..20, 1usize..20).prop_flat_map(|(w, h)| (Just(w), Just(h), bytes(w * h)))) {
        let mut buf = Vec::new();
        write_pgm(&mut buf, w, h, &gray).unwrap();
        prop_assert_eq!(read_pgm(buf.as_slice()).unwrap(), (w, h, gray));
    }

    #[test]
    fn label_maps_round_trip(
        (h, w, classes, labels) in (1usize..12, 1usize..12, prop_oneof![2usize..256, 257usize..2000])
            .prop_flat_map(|(h, w, k)| (Just(h), Just(w), Just(k), proptest::collection::vec(0..k as u16, h * w)))
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = write_labels(&dir.path().join("l"), h, w, &labels, classes).unwrap();
        let ext = if classes <= 256 { "pgm" } else { "sttn" };
        prop_assert_eq!(path.extension().unwrap(), ext);
        prop_assert_eq!(read_labels(&path).unwrap(), ((h, w), labels));
    }

    #[test]
    fn sttn_round_trip(dims in proptest::collection::vec(1usize..6, 0..4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let t = Tensor::from_fn(&dims, |i| (i as f32 - seed as f32 * 1e-6).sin() * 1e3);
        let mut buf = Vec::new();
        write_sttn(&mut buf, &SttnPayload::F32(t.clone())).unwrap();
        prop_assert!(read_sttn(&mut buf.as_slice()).unwrap().into_f32().unwrap().same_values(&t));

        let data: Vec<u16> = (0..n).map(|i| (seed as usize).wrapping_add(i * 7919) as u16).collect();
        let payload = SttnPayload::U16 { shape: dims.clone(), data };
        let mut buf = Vec::new();
        write_sttn(&mut buf, &payload).unwrap();
        prop_assert_eq!(read_sttn(&mut buf.as_slice()).unwrap(), payload);
    }

    #[test]
    fn checkpoint_archive_round_trip(
        params in proptest::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,3}", proptest::collection::vec(-1e6f32..1e6, 1..16), 0..8),
        buffers in proptest::collection::btree_map("[a-z]{1,8}", proptest::collection::vec(-1e3f32..1e3, 1..4), 0..4),
    ) {
        let mut store = ParamStore::new();
        for (name, v) in &params {
            store.insert(name.clone(), Tensor::new(&[v.len()], v.clone()).unwrap());
        }
        for (name, v) in &buffers {
            store.insert_buffer(name.clone(), Tensor::new(&[v.len()], v.clone()).unwrap());
        }
        let mut buf = Vec::new();
        store.write_archive(&mut buf).unwrap();
        let back = ParamStore::read_archive(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), store.len());
        for (name, t) in store.iter() {
            prop_assert!(back.get(name).unwrap().same_values(t));
        }
        for (name, t) in store.buffers() {
            prop_assert!(back.buffer(name).unwrap().same_values(t));
        }
    }

    #[test]
    fn config_text_round_trip(
        lr in 1e-5f32..1.0,
        iters in 1usize..100_000,
        seed in any::<u64>(),
        augment in any::<bool>(),
        noise in 0.0f32..64.0,
        depth in 1usize..32,
        decoder in prop_oneof![Just(DecoderKind::Naive), Just(DecoderKind::Pup), Just(DecoderKind::Mla)],
        aux in proptest::collection::vec(1usize..32, 0..5),
    ) {
        let aux_text = if aux.is_empty() { "none".to_string() } else {
            aux.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
        };
        let text = format!(
            "base_lr = {lr}\ntotal_iters = {iters}  # budget\nseed = {seed}\naugment = {augment}\n\
             synth.noise = {noise}\nmodel.depth = {depth}\nmodel.decoder = {decoder}\nmodel.aux_layers = {aux_text}\n"
        );
        let cfg = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(cfg.train.base_lr, lr);
        prop_assert_eq!(cfg.train.total_iters, iters);
        prop_assert_eq!(cfg.train.seed, seed);
        prop_assert_eq!(cfg.train.augment, augment);
        prop_assert_eq!(cfg.synth.noise, noise);
        prop_assert_eq!(cfg.model.depth, depth);
        prop_assert_eq!(cfg.model.decoder, decoder);
        prop_assert_eq!(cfg.model.aux_layers, Some(aux));
    }

    #[test]
    fn per_class_csv_parses_back(pairs in proptest::collection::vec((0u16..5, 0u16..5), 1..200)) {
        let mut cm = ConfusionMatrix::new(5);
        let (pred, truth): (Vec<u16>, Vec<u16>) = pairs.into_iter().unzip();
        cm.update(&pred, &truth, 255).unwrap();
        let report = compute_miou(&cm);
        let csv = per_class_csv(&report);
        let mut lines = csv.lines();
        prop_assert_eq!(lines.next(), Some("class,iou"));
        for (c, line) in lines.enumerate() {
            let (class, iou) = line.split_once(',').unwrap();
            prop_assert_eq!(class.parse::<usize>().unwrap(), c);
            match report.per_class[c] {
                Some(v) => prop_assert!((iou.parse::<f64>().unwrap() - v).abs() <= 5e-7),
                None => prop_assert!(iou.is_empty()),
            }
        }
    }
}
