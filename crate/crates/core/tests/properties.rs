use std::path::Path;

use proptest::prelude::*;

use steervec::eval::{bleu4_smoothed, word_tokens};
use steervec::harness::data::sentences_in_range;
use steervec::harness::{make_gibberish_fold, make_shuffled_fold};
use steervec::latent::{
    apply_offset, average_ranks, compute_offset, correlations, cosine_similarity, TransferRequest,
};
use steervec::model::{make_projection, InjectionSite, InjectionSpec, Timesteps};
use steervec::rng::SeededRng;
use steervec::svec::{from_svec_bytes, to_svec_bytes, SteeringVector};
use steervec::tensor::{PlateauScheduler, Tensor};
use steervec::tokenizer::{decode, encode, BOS, EOS};

fn vector(values: Vec<f32>) -> SteeringVector {
    SteeringVector {
        spec: InjectionSpec::single(InjectionSite::AfterSelfAttn(1), Timesteps::All, values.len()),
        values,
        model_fingerprint: 3,
        seed: 0,
        target_text: None,
    }
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["the", "cat", "sat", "mat", "on", "a", ".", ",", "tea", "was"])
        .prop_map(str::to_string)
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 0..12).prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn identical_seeds_give_identical_streams(seed in any::<u64>()) {
        let mut a = SeededRng::new(seed);
        let mut b = SeededRng::new(seed);
        for _ in 0..32 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn tensor_length_must_match_shape(rows in 1usize..6, cols in 1usize..6, extra in 0usize..3) {
        let ok = Tensor::<f32>::new(vec![rows, cols], vec![0.0; rows * cols + extra]);
        prop_assert_eq!(ok.is_ok(), extra == 0);
    }

    #[test]
    fn plateau_lr_never_rises_and_holds_on_improvement(
        losses in prop::collection::vec(0.0f64..4.0, 1..60),
        patience in 1u32..4,
    ) {
        let mut s = PlateauScheduler::new(1.0, 0.9, patience);
        let mut best = f64::INFINITY;
        let mut stale = 0u32;
        let mut lr = 1.0;
        for &l in &losses {
            let next = s.observe(l);
            prop_assert!(next <= lr);
            if l < best {
                best = l;
                stale = 0;
                prop_assert_eq!(next, lr);
            } else {
                stale += 1;
                if next < lr {
                    prop_assert!(stale > patience);
                    stale = 0;
                }
            }
            lr = next;
        }
    }

    #[test]
    fn token_ids_are_framed_bytes(s in any::<String>()) {
        let ids = encode(&s).ids;
        prop_assert_eq!(ids[0], BOS);
        prop_assert_eq!(*ids.last().unwrap(), EOS);
        let interior = &ids[1..ids.len() - 1];
        prop_assert!(interior.iter().all(|&i| (2..=257).contains(&i)));
        let bytes: Vec<u8> = interior.iter().map(|&i| (i - 2) as u8).collect();
        prop_assert_eq!(&bytes[..], s.as_bytes());
        prop_assert_eq!(decode(&ids).unwrap(), s);
    }

    #[test]
    fn projections_are_semi_orthogonal(d in 2usize..40, frac in 0.05f64..1.0, seed in any::<u64>()) {
        let dp = ((d as f64 * frac) as usize).clamp(1, d);
        let p = make_projection(dp, d, seed).unwrap();
        let m = p.matrix::<f64>();
        let w = m.data();
        for i in 0..dp {
            for j in 0..dp {
                let dot: f64 = (0..d).map(|c| w[i * d + c] * w[j * d + c]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-6);
            }
        }
        let mut rng = SeededRng::new(seed);
        let z: Vec<f64> = (0..dp).map(|_| rng.normal()).collect();
        let up = p.up_project(&z).unwrap();
        let nz = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nu = up.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((nz - nu).abs() / nz < 1e-6);
    }

    #[test]
    fn bleu_is_bounded_and_perfect_only_on_identical_tokens(a in sentence(), b in sentence()) {
        let s = bleu4_smoothed(&a, &b);
        prop_assert!((0.0..=100.0).contains(&s));
        prop_assert_eq!(s == 100.0, word_tokens(&a) == word_tokens(&b));
    }

    #[test]
    fn cosine_is_scale_invariant(
        a in prop::collection::vec(-3.0f32..3.0, 8),
        b in prop::collection::vec(-3.0f32..3.0, 8),
        alpha in 0.01f32..50.0,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let scaled: Vec<f32> = a.iter().map(|x| x * alpha).collect();
        let c0 = cosine_similarity(&a, &b).unwrap();
        let c1 = cosine_similarity(&scaled, &b).unwrap();
        prop_assert!((c0 - c1).abs() < 1e-6);
    }

    #[test]
    fn spearman_survives_monotone_transforms(
        pairs in prop::collection::btree_map(-1000i32..1000, -50.0f64..50.0, 3..30),
    ) {
        let xs: Vec<f64> = pairs.keys().map(|&k| k as f64 / 10.0).collect();
        let ys: Vec<f64> = pairs.values().copied().collect();
        prop_assume!(ys.iter().any(|&y| y != ys[0]));
        let base = correlations(&xs, &ys).unwrap().spearman;
        let warped: Vec<f64> = xs.iter().map(|x| x.powi(3) + (x / 7.0).exp()).collect();
        prop_assert_eq!(average_ranks(&warped), average_ranks(&xs));
        prop_assert_eq!(correlations(&warped, &ys).unwrap().spearman, base);
    }

    #[test]
    fn offsets_are_additive_in_lambda(
        a in prop::collection::vec(-2.0f32..2.0, 6),
        b in prop::collection::vec(-2.0f32..2.0, 6),
        base in prop::collection::vec(-2.0f32..2.0, 6),
        l1 in -3.0f64..3.0,
        l2 in -3.0f64..3.0,
    ) {
        let (va, vb, vbase) = (vector(a), vector(b), vector(base));
        let off = compute_offset(&[&va], &[&vb]).unwrap();
        let back = compute_offset(&[&vb], &[&va]).unwrap();
        for (x, y) in off.values.iter().zip(&back.values) {
            prop_assert_eq!(*x, -*y);
        }
        let apply = |v: &SteeringVector, l: f64| {
            apply_offset(&TransferRequest { base: v, offset: &off, lambda_scale: l }).unwrap()
        };
        let stepwise = apply(&apply(&vbase, l1), l2);
        let direct = apply(&vbase, l1 + l2);
        for (x, y) in stepwise.values.iter().zip(&direct.values) {
            prop_assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn shuffled_folds_keep_token_multisets(
        sents in prop::collection::vec(sentence(), 1..6),
        seed in any::<u64>(),
    ) {
        let shuffled = make_shuffled_fold(&sents, seed);
        prop_assert_eq!(shuffled.len(), sents.len());
        for (s, t) in sents.iter().zip(&shuffled) {
            let mut a: Vec<&str> = s.split_whitespace().collect();
            let mut b: Vec<&str> = t.split_whitespace().collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn gibberish_folds_match_lengths(lengths in prop::collection::vec(1usize..80, 1..8), seed in any::<u64>()) {
        let g = make_gibberish_fold(&lengths, seed);
        let got: Vec<usize> = g.iter().map(|s| s.len()).collect();
        prop_assert_eq!(got, lengths);
    }

    #[test]
    fn range_filter_respects_whitespace_lengths(
        sents in prop::collection::vec(sentence(), 0..20),
        lo in 0usize..6,
        width in 1usize..6,
    ) {
        let hi = lo + width;
        for s in sentences_in_range(&sents, lo, hi) {
            prop_assert!((lo..hi).contains(&s.split_whitespace().count()));
        }
    }

    #[test]
    fn svec_round_trip_is_bit_exact(values in prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..40)) {
        let v = vector(values);
        let bytes = to_svec_bytes(&v, false).unwrap();
        let (back, payload) = from_svec_bytes(&bytes, Path::new("v.svec")).unwrap();
        prop_assert_eq!(payload, 4 * v.dim());
        prop_assert_eq!(back, v);
    }
}
