mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stgdance::attention::{diff_attention, ldt_attention, DiffAttnWeights, LdtWeights, LDT_GUARD};
use stgdance::data::{MotionFile, MotionSample, NormStats};
use stgdance::diffusion::make_schedule;
use stgdance::graph::{DistanceGraph, GraphConfig};
use stgdance::kv::KvMap;
use stgdance::metrics::tif;
use stgdance::{DenoiserConfig, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ldt_matches_windowed_oracle(l in 1usize..80, d in 1usize..6, window in 1usize..90, seed in any::<u64>()) {
        let x = randn(&[l, d], seed);
        let p = LdtWeights {
            w_q: randn(&[d, d], seed ^ 1),
            w_k: randn(&[d, d], seed ^ 2),
            w_v: randn(&[d, d], seed ^ 3),
            window,
            guard: LDT_GUARD,
        };
        let want = common::ldt_attention(&x, &p.w_q, &p.w_k, &p.w_v, window, LDT_GUARD);
        let got = ldt_attention(&x, &p).unwrap();
        // Rows whose queries miss every key have a guard-sized denominator,
        // which amplifies rounding; compare relative to the output scale.
        let scale = got.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(common::max_abs(&want, &got) <= 1e-10 * scale);
    }

    #[test]
    fn diff_attention_matches_oracle(l in 1usize..40, heads in 1usize..4, per_head in 1usize..4, seed in any::<u64>()) {
        let d = heads * per_head;
        let x = randn(&[l, d], seed);
        let lambda: Vec<f64> = randn(&[heads], seed ^ 7).data().iter().map(|v| v.abs().min(1.0)).collect();
        let p = DiffAttnWeights {
            w_q: randn(&[d, 2 * d], seed ^ 1).scale(0.5),
            w_k: randn(&[d, 2 * d], seed ^ 2).scale(0.5),
            w_v: randn(&[d, 2 * d], seed ^ 3),
            lambda: Tensor::new(&[heads], lambda.clone()).unwrap(),
            heads,
        };
        let want = common::diff_attention(&x, &p.w_q, &p.w_k, &p.w_v, &lambda);
        prop_assert!(common::max_abs(&want, &diff_attention(&x, &p).unwrap()) <= 1e-10);
    }

    #[test]
    fn normalized_graph_is_symmetric_and_contractive(
        coords in prop::collection::vec(-5.0f64..5.0, 2..40),
        top_k in 1usize..20,
        epsilon in 0.01f64..1.0,
    ) {
        let n = coords.len() / 2;
        let pos = Tensor::new(&[n, 2], coords[..2 * n].to_vec()).unwrap();
        let a = DistanceGraph::build(&pos, GraphConfig { epsilon, top_k: top_k.min(n) }).unwrap().normalized;
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a.data()[i * n + j], a.data()[j * n + i]);
            }
        }
        let radius = common::eigenvalues(&a).iter().map(|e| e.abs()).fold(0.0, f64::max);
        prop_assert!(radius <= 1.0 + 1e-9, "radius {}", radius);
    }

    #[test]
    fn schedule_cumprod_matches_direct_product(steps in 2usize..400, start in 1e-5f64..1e-2, spread in 1e-4f64..0.3) {
        let s = make_schedule(steps, start, start + spread).unwrap();
        s.check_invariants().unwrap();
        let mut prod = 1.0;
        for (b, ab) in s.betas().iter().zip(s.alpha_bars()) {
            prod *= 1.0 - b;
            prop_assert!((prod - ab).abs() <= 1e-12 * ab.max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn tif_ignores_translation_and_dancer_order(n in 2usize..5, l in 1usize..30, seed in any::<u64>(), delta in 0.05f64..1.0) {
        let m = randn(&[n, l, 3], seed).scale(0.5);
        let shifted = common::map_positions(&m, [0, 1], |x, y| (x + 0.5, y - 0.25));
        let reversed = Tensor::from_fn(&[n, l, 3], |k| m.data()[((n - 1 - k / (l * 3)) * l * 3) + k % (l * 3)]);
        let base = tif(&m, delta, [0, 1]).unwrap();
        prop_assert_eq!(base, common::tif_brute(&m, delta, [0, 1]));
        prop_assert_eq!(base, tif(&reversed, delta, [0, 1]).unwrap());
        prop_assert!((base - tif(&shifted, delta, [0, 1]).unwrap()).abs() <= 1.0 / l as f64 + 1e-12);
    }

    #[test]
    fn motion_files_round_trip(n in 1usize..4, l in 1usize..20, d in 2usize..6, seed in any::<u64>(), tempo in 0.01f64..1.0) {
        let motion = randn(&[n, l, d], seed);
        let file = MotionFile {
            stats: NormStats::from_motions(&[&motion]).unwrap(),
            sample: MotionSample {
                music: randn(&[l, 7], seed ^ 9),
                contact_mask: Tensor::zeros(&[n, l]),
                motion,
                style: None,
                seed,
                tempo,
            },
            position_channels: [0, 1],
        };
        let bytes = file.to_bytes();
        let back = MotionFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.sample.motion.data(), file.sample.motion.data());
    }

    #[test]
    fn model_config_survives_kv(d_model_heads in 1usize..4, layers in 1usize..3, window in 1usize..100, top_k in 1usize..10) {
        let cfg = DenoiserConfig {
            heads: d_model_heads,
            d_model: 4 * d_model_heads,
            decoder_layers: 2 * layers,
            window,
            top_k,
            ..DenoiserConfig::default()
        };
        let mut kv = KvMap::parse(&cfg.to_kv()).unwrap();
        let back = DenoiserConfig::take_from(&mut kv).unwrap();
        kv.finish().unwrap();
        prop_assert_eq!(back, cfg);
    }
}
