mod common;

use std::collections::HashSet;

use common::*;
use proptest::prelude::*;
use thoughtroute::autodiff::{Graph, Tensor};
use thoughtroute::batch::{EOS, FIRST_SYMBOL, PAD};
use thoughtroute::dataset::{decode, encode, read_dataset, write_dataset, DatasetError, MAGIC};
use thoughtroute::metrics::purity_counts;
use thoughtroute::synth::{make_batch, Split, SynthConfig, Synthesizer};
use thoughtroute::model;

fn synth(cfg: SynthConfig) -> Synthesizer {
    Synthesizer::new(cfg).unwrap()
}

#[test]
fn noiseless_frames_repeat_the_symbol_embedding() {
    let syn = synth(SynthConfig {
        noise_sigma: 0.0,
        seed: 3,
        ..Default::default()
    });
    for i in 0..10 {
        let s = syn.sample(11, i);
        for (t, &seg) in s.frame_to_segment.iter().enumerate() {
            let want: Vec<f64> = syn.embedding(s.segment_symbols[seg]).iter().map(|&v| v as f32 as f64).collect();
            assert_eq!(s.features.row(t), &want[..]);
        }
    }
}

#[test]
fn samples_respect_their_ranges_and_alignment() {
    let cfg = SynthConfig::default();
    let syn = synth(cfg.clone());
    for i in 0..200 {
        let s = syn.sample(5, i);
        let n = s.n_segments();
        assert!((3..=10).contains(&n));
        assert_eq!(s.tokens.len(), n + 1);
        assert_eq!(*s.tokens.last().unwrap(), EOS);
        assert_eq!(s.features.shape(), &[s.len(), 32]);
        let mut seen = vec![0usize; n];
        for w in s.frame_to_segment.windows(2) {
            assert!(w[1] == w[0] || w[1] == w[0] + 1);
        }
        for &seg in &s.frame_to_segment {
            seen[seg] += 1;
        }
        assert!(seen.iter().all(|&l| (4..=12).contains(&l)));
        assert_eq!(seen.iter().sum::<usize>(), s.len());
        assert!(s.tokens[..n].iter().all(|&t| (FIRST_SYMBOL..cfg.vocab_size()).contains(&t)));
        let perfect = Tensor::from_fn([n, s.len()], |i| (s.frame_to_segment[i % s.len()] == i / s.len()) as u8 as f64);
        assert_eq!(purity_counts(&perfect, &s.frame_to_segment, n), (n, n));
    }
}

#[test]
fn generation_is_deterministic_and_order_free() {
    let a = synth(SynthConfig::default());
    let b = synth(SynthConfig::default());
    let serial = a.dataset(9, 30);
    assert_eq!(serial, b.dataset(9, 30));
    let picked: Vec<_> = (0..30u64).rev().map(|i| b.sample(9, i)).collect();
    let reversed: Vec<_> = serial.iter().rev().cloned().collect();
    assert_eq!(picked, reversed);
    let bytes = encode(32, 20, &serial).unwrap();
    assert_eq!(bytes, encode(32, 20, &b.dataset(9, 30)).unwrap());
}

#[test]
fn monotonic_targets_follow_segment_order() {
    let syn = synth(SynthConfig::default());
    for s in syn.dataset(4, 50) {
        let want: Vec<usize> = s.segment_symbols.iter().map(|v| v + FIRST_SYMBOL).collect();
        assert_eq!(&s.tokens[..s.n_segments()], &want[..]);
    }
}

#[test]
fn reordering_only_swaps_disjoint_neighbours() {
    let syn = synth(SynthConfig {
        reorder_prob: 0.5,
        ..Default::default()
    });
    let mut any = false;
    for s in syn.dataset(6, 100) {
        let mut orig: Vec<usize> = s.segment_symbols.iter().map(|v| v + FIRST_SYMBOL).collect();
        let toks = &s.tokens[..s.n_segments()];
        let mut j = 0;
        while j < orig.len() {
            if toks[j] == orig[j] {
                j += 1;
            } else {
                orig.swap(j, j + 1);
                assert_eq!(&toks[j..j + 2], &orig[j..j + 2]);
                any = true;
                j += 2;
            }
        }
    }
    assert!(any);
}

#[test]
fn splits_draw_disjoint_streams() {
    let syn = synth(SynthConfig::default());
    let base = 100;
    assert_eq!([Split::Train, Split::Dev, Split::Test].map(|s| s.seed(base)), [100, 101, 102]);
    let keys: Vec<HashSet<Vec<u32>>> = [Split::Train, Split::Dev, Split::Test]
        .iter()
        .map(|s| {
            syn.dataset(s.seed(base), 100)
                .iter()
                .map(|x| x.features.data().iter().map(|&v| (v as f32).to_bits()).collect())
                .collect()
        })
        .collect();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(keys[i].is_disjoint(&keys[j]));
        }
    }
    assert_eq!(Split::parse("dev"), Some(Split::Dev));
    assert_eq!(Split::Test.name(), "test");
    assert_eq!(Split::parse("valid"), None);
}

#[test]
fn invalid_generator_settings_are_rejected() {
    for cfg in [
        SynthConfig {
            reorder_prob: 0.6,
            ..Default::default()
        },
        SynthConfig {
            seg_len_range: (5, 4),
            ..Default::default()
        },
        SynthConfig {
            noise_sigma: -1.0,
            ..Default::default()
        },
        SynthConfig {
            lexicon_size: 1,
            ..Default::default()
        },
    ] {
        assert!(Synthesizer::new(cfg).is_err());
    }
}

#[test]
fn container_round_trip_is_exact() {
    let syn = synth(SynthConfig {
        d_x: 6,
        ..Default::default()
    });
    let samples = syn.dataset(1, 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.sgtd");
    write_dataset(&path, 6, 20, &samples).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!((back.d_x, back.lexicon_size), (6, 20));
    assert_eq!(back.samples, samples);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 12);
    let s0 = &samples[0];
    assert_eq!(u32::from_le_bytes(bytes[21..25].try_into().unwrap()) as usize, s0.len());
    let first = f32::from_le_bytes(bytes[33..37].try_into().unwrap());
    assert_eq!(first as f64, s0.features.data()[0]);
}

#[test]
fn empty_container_is_valid() {
    let bytes = encode(4, 7, &[]).unwrap();
    assert_eq!(bytes.len(), 21);
    let d = decode(&bytes).unwrap();
    assert!(d.samples.is_empty());
    assert_eq!((d.d_x, d.lexicon_size), (4, 7));
}

#[test]
fn every_truncation_is_reported() {
    let syn = synth(SynthConfig {
        d_x: 3,
        seg_len_range: (1, 2),
        segs_per_clip_range: (1, 3),
        ..Default::default()
    });
    let bytes = encode(3, 20, &syn.dataset(2, 4)).unwrap();
    for cut in 0..bytes.len() {
        match decode(&bytes[..cut]) {
            Err(DatasetError::Truncated { .. }) => {}
            other => panic!("cut at {cut}: {other:?}"),
        }
    }
    assert!(decode(&bytes).is_ok());
}

#[test]
fn header_errors_are_distinct() {
    let mut bytes = encode(3, 20, &[]).unwrap();
    bytes[0] = b'X';
    assert!(matches!(decode(&bytes), Err(DatasetError::BadMagic)));
    assert!(matches!(decode(b"PNG"), Err(DatasetError::BadMagic)));
    let mut bytes = encode(3, 20, &[]).unwrap();
    bytes[5] = 2;
    assert!(matches!(decode(&bytes), Err(DatasetError::Version(2))));
    let mut bytes = encode(3, 20, &[]).unwrap();
    bytes.push(0);
    assert!(matches!(decode(&bytes), Err(DatasetError::Malformed(_))));
    assert!(matches!(
        read_dataset(std::path::Path::new("/nonexistent/x.sgtd")),
        Err(DatasetError::Io(_))
    ));
}

#[test]
fn padding_masks_and_targets() {
    let syn = synth(SynthConfig {
        d_x: 4,
        ..Default::default()
    });
    let mut samples = syn.dataset(3, 40);
    samples.sort_by_key(|s| s.len());
    let cut = |s: &thoughtroute::synth::SyntheticSample, t: usize| {
        let mut c = s.clone();
        c.features = Tensor::new([t, 4], s.features.data()[..t * 4].to_vec()).unwrap();
        c.frame_to_segment.truncate(t);
        c
    };
    let short = cut(&samples[0], 5);
    let shorter = cut(&samples[0], 3);
    let (clip, tokens) = make_batch(&[&shorter, &short]).unwrap();
    assert_eq!(clip.mask().row(0), &[1.0, 1.0, 1.0, 0.0, 0.0]);
    assert_eq!(clip.mask().row(1), &[1.0; 5]);
    assert!(clip.features().data()[12..20].iter().all(|&v| v == 0.0));
    let (eq, _) = make_batch(&[&short, &short]).unwrap();
    assert!(eq.mask().data().iter().all(|&v| v == 1.0));
    assert_eq!(tokens.labels()[0], short.tokens);

    let (_, ragged) = make_batch(&[&samples[0], &samples[39]]).unwrap();
    let (a, b) = (&samples[0].tokens, &samples[39].tokens);
    let longest = a.len().max(b.len());
    for (row, src) in ragged.labels().iter().zip([a, b]) {
        assert_eq!(row.len(), longest);
        assert!(row[src.len()..].iter().all(|&v| v == PAD));
    }
    assert!(make_batch(&[]).is_err());
}

#[test]
fn batch_of_one_equals_each_member_of_a_batch() {
    let mut cfg = tiny_config();
    cfg.encoder.d_x = 4;
    cfg.decoder.vocab_size = 24;
    let store = params(&cfg, 1);
    let syn = synth(SynthConfig {
        d_x: 4,
        seg_len_range: (2, 4),
        segs_per_clip_range: (2, 4),
        ..Default::default()
    });
    let samples = syn.dataset(8, 3);
    let refs: Vec<_> = samples.iter().collect();
    let (clip, tokens) = make_batch(&refs).unwrap();
    let mut g = Graph::with_store(&store);
    let batched = model::forward(&mut g, &cfg, &clip, &tokens).unwrap();
    let all = g.value(batched.logits).clone();
    for (b, s) in samples.iter().enumerate() {
        let (c1, t1) = make_batch(&[s]).unwrap();
        let mut g1 = Graph::with_store(&store);
        let single = model::forward(&mut g1, &cfg, &c1, &t1).unwrap();
        let one = sample_mat(g1.value(single.logits), 0);
        let n = s.tokens.len();
        assert!(max_diff(&sample_mat(&all, b)[..n].to_vec(), &one) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn corrupted_bytes_never_panic(seed in 0u64..1000, flips in prop::collection::vec((0usize..4096, any::<u8>()), 1..8)) {
        let syn = synth(SynthConfig { d_x: 3, seg_len_range: (1, 3), segs_per_clip_range: (1, 3), ..Default::default() });
        let mut bytes = encode(3, 20, &syn.dataset(seed, 3)).unwrap();
        for (at, v) in flips {
            let n = bytes.len();
            bytes[at % n] = v;
        }
        let _ = decode(&bytes);
    }
}
