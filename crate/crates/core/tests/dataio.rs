use navseg::dataio::model_io::{decode, encode, MAGIC};
use navseg::dataio::netpbm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm};
use navseg::dataio::*;
use navseg::{build_network, Error, Tensor, Variant};
use proptest::prelude::*;

fn quantized_image(h: usize, w: usize, bytes: &[u8]) -> Tensor<f32> {
    Tensor::from_fn((1, 3, h, w), |_, c, y, x| bytes[(c * h + y) * w + x] as f32 / 255.0)
}

proptest! {
    #[test]
    fn ppm_round_trip(h in 1usize..9, w in 1usize..9, seed in prop::collection::vec(any::<u8>(), 3 * 64)) {
        let img = quantized_image(h, w, &seed);
        let bytes = encode_ppm(&img).unwrap();
        prop_assert!(bytes.starts_with(b"P6"));
        prop_assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_round_trip(h in 1usize..9, w in 1usize..9, data in prop::collection::vec(any::<u8>(), 64)) {
        let m = Mask::new(h, w, data[..h * w].to_vec()).unwrap();
        prop_assert_eq!(decode_pgm(&encode_pgm(&m)).unwrap(), m);
    }

    /// Remapping agrees with a plain membership test on every pixel.
    #[test]
    fn remap_is_membership(ids in prop::collection::vec(0u8..=MAX_LABEL_ID, 1..50), nav in prop::collection::vec(0u8..=MAX_LABEL_ID, 0..10)) {
        let m = Mask::new(1, ids.len(), ids.clone()).unwrap();
        let out = remap_labels(&m, &nav).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            prop_assert_eq!(out.data[i], u8::from(nav.contains(&id)));
        }
    }

    #[test]
    fn decoding_garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode_ppm(&bytes);
        let _ = decode_pgm(&bytes);
        let mut framed = MAGIC.to_vec();
        framed.extend_from_slice(&bytes);
        prop_assert!(decode(&framed).is_err());
    }
}

#[test]
fn remap_rejects_out_of_range_ids() {
    let m = Mask::new(1, 3, vec![1, 34, 2]).unwrap();
    let err = remap_labels(&m, &DEFAULT_NAVIGABLE_IDS).unwrap_err().to_string();
    assert!(err.contains("34"), "{err}");
}

#[test]
fn netpbm_rejects_malformed_headers() {
    for bad in [&b"P5\n2 2\n255\n\x00\x00\x00"[..], b"P6\n2 2\n65535\n", b"P6\n0 2\n255\n", b"P3\n1 1\n255\n1 2 3"] {
        let err = decode_ppm(bad).unwrap_err();
        assert!(matches!(err, Error::Image { .. }), "{err}");
    }
    assert!(decode_ppm(b"P6\n# comment\n1 1\n255\n\x01\x02\x03").is_ok());
}

#[test]
fn masks_accept_binary_and_255() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    std::fs::write(&path, encode_pgm(&Mask::new(1, 3, vec![0, 255, 1]).unwrap())).unwrap();
    assert_eq!(load_mask(&path).unwrap().data, vec![0, 1, 1]);
    std::fs::write(&path, encode_pgm(&Mask::new(1, 2, vec![0, 7]).unwrap())).unwrap();
    assert!(load_mask(&path).is_err());
}

#[test]
fn dataset_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_dataset(4, 3, 16, 24, &SynthConfig::default()).unwrap();
    save_dataset(dir.path(), &samples).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 4);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.label, b.label);
        assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-6);
    }
    std::fs::remove_file(dir.path().join("images").join("0002.ppm")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("0002"), "{err}");
}

#[test]
fn synthetic_scenes_are_plausible() {
    let cfg = SynthConfig::default();
    let s = synth_sample(1, 0, 64, 64, &cfg).unwrap();
    assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    // Ground sits below the horizon: the bottom row is mostly navigable, the top row is not.
    let row = |y: usize| (0..64).filter(|&x| s.label.get(y, x) == 1).count();
    assert!(row(63) > row(0));
    assert_eq!(synth_sample(1, 0, 64, 64, &cfg).unwrap(), s);
    assert_ne!(synth_sample(1, 1, 64, 64, &cfg).unwrap(), s);
}

#[test]
fn model_round_trip_and_diagnostics() {
    let net = build_network(Variant::Pruned, 21);
    let bytes = encode(&net);
    let back = decode(&bytes).unwrap();
    assert_eq!(encode(&back), bytes);
    assert_eq!(back.meta.seed, 21);

    let msg = |b: &[u8]| decode(b).unwrap_err().to_string();
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] ^= 0xff;
    assert!(msg(&wrong_magic).contains("magic"));
    assert!(msg(&bytes[..bytes.len() / 2]).contains("truncated"));
    let mut flipped = bytes.clone();
    let mid = bytes.len() - 100;
    flipped[mid] ^= 0x01;
    assert!(matches!(decode(&flipped), Err(Error::Checksum { .. })));
    // No prefix decodes.
    for cut in (0..bytes.len()).step_by(997) {
        assert!(decode(&bytes[..cut]).is_err(), "prefix of {cut} bytes decoded");
    }
}

#[test]
fn config_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    let mut cfg = Config::default();
    cfg.train.steps = 12;
    cfg.navigable_ids = vec![7];
    std::fs::write(&path, cfg.to_json()).unwrap();
    assert_eq!(Config::load(&path).unwrap(), cfg);
    assert!(matches!(Config::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
    assert!(Config::from_json(r#"{"navigable_ids": [40]}"#).is_err());
    assert!(Config::from_json(r#"{"train": {"batch_size": 0}}"#).is_err());
}
