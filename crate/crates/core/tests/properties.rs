use ndarray::Array2;
use proptest::prelude::*;

use regaze_core::datapipe::{annotate_gaze, collect_episode, read_shard, write_shard};
use regaze_core::denoiser::make_schedule;
use regaze_core::evalharness::{focus_stats, patches_in_box, ChainResult, EvalResult, CHAIN_LENGTH};
use regaze_core::raster::BBox;
use regaze_core::simworld::{ContinuousAction, EnvId};
use regaze_core::tokenizers::{ActionCodec, SceneTokenizer, TextVocab, VocabLayout};

fn codec() -> ActionCodec {
    ActionCodec::new(&VocabLayout::new(&TextVocab::from_templates()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn action_roundtrip_within_half_bin(a in prop::array::uniform4(-1.0f64..=1.0)) {
        let c = codec();
        let ids = c.tokenize(&ContinuousAction::from_array(a)).unwrap();
        let back = c.detokenize(&ids).unwrap().to_array();
        for (x, y) in a.iter().zip(back) {
            prop_assert!((x - y).abs() <= 1.0 / 256.0 + 1e-12);
        }
        prop_assert_eq!(c.tokenize(&ContinuousAction::from_array(back)).unwrap(), ids);
    }

    #[test]
    fn action_bins_are_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
        let c = codec();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(c.bin(lo).unwrap() <= c.bin(hi).unwrap());
    }

    #[test]
    fn text_roundtrip(idx in prop::collection::vec(0usize..1000, 0..12)) {
        let vocab = TextVocab::from_templates();
        let words = vocab.words();
        let text: Vec<&str> = idx.iter().map(|&i| words[i % words.len()].as_str()).collect();
        let text = text.join(" ");
        let ids = vocab.tokenize(&text).unwrap();
        prop_assert_eq!(ids.len(), idx.len() + 2);
        prop_assert_eq!(vocab.detokenize(&ids), text);
    }

    #[test]
    fn schedule_is_monotone(t in 2usize..400, b0 in 1e-5f64..1e-2, span in 1e-4f64..0.5) {
        let s = make_schedule(t, b0, (b0 + span).min(0.9)).unwrap();
        prop_assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.alpha_bars.windows(2).all(|w| w[0] > w[1]));
        prop_assert!(s.alpha_bars.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn noiseless_q_sample_scales_z0(t in 1usize..=100, vals in prop::collection::vec(-3.0f64..3.0, 12)) {
        let s = make_schedule(100, 1e-4, 2e-2).unwrap();
        let z0 = Array2::from_shape_vec((3, 4), vals).unwrap();
        let zt = s.q_sample(&z0.view(), t, &Array2::zeros((3, 4)).view()).unwrap();
        let k = s.alpha_bar(t).sqrt();
        for (a, b) in zt.iter().zip(z0.iter()) {
            prop_assert!((a - k * b).abs() < 1e-12);
        }
    }

    #[test]
    fn focus_stats_are_fractions(p in prop::collection::vec(1e-6f64..1.0, 2..64), mask in prop::collection::vec(any::<bool>(), 64)) {
        let f = focus_stats(&p, &mask[..p.len()]);
        prop_assert!((0.0..=1.0).contains(&f.mass_in_gaze));
        prop_assert!((0.0..=1.0).contains(&f.entropy));
        let all = focus_stats(&p, &vec![true; p.len()]);
        prop_assert!((all.mass_in_gaze - 1.0).abs() < 1e-9);
    }

    #[test]
    fn box_cover_contains_box_pixels(x0 in 0u32..63, y0 in 0u32..63, w in 1u32..32, h in 1u32..32) {
        let b = BBox { x_min: x0, y_min: y0, x_max: (x0 + w).min(64), y_max: (y0 + h).min(64) };
        let cover = patches_in_box(&b, 64, 8);
        for y in b.y_min..b.y_max {
            for x in b.x_min..b.x_max {
                prop_assert!(cover[(y / 8 * 8 + x / 8) as usize]);
            }
        }
    }

    #[test]
    fn eval_rates_sum_to_avg_length(done in prop::collection::vec(0usize..=CHAIN_LENGTH, 1..40)) {
        let chains: Vec<ChainResult> = done
            .iter()
            .enumerate()
            .map(|(i, &c)| ChainResult {
                seed: i as u64,
                env_id: EnvId::D,
                completed: c,
                subtasks: Vec::new(),
                error: None,
                trace: None,
            })
            .collect();
        let r = EvalResult::from_chains(&chains, EnvId::D, 0);
        r.validate().unwrap();
        let sum: f64 = r.success_rates.iter().sum();
        prop_assert!((sum - r.avg_length).abs() < 1e-9);
        let mean = done.iter().sum::<usize>() as f64 / done.len() as f64;
        prop_assert!((r.avg_length - mean).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pca_components_are_orthonormal(seed in 0u64..1000, k in 1usize..24) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let patches: Vec<Vec<f64>> = (0..60).map(|_| (0..192).map(|_| rng.gen::<f64>()).collect()).collect();
        let t = SceneTokenizer::fit(&patches, 8, k).unwrap();
        let g = t.components.t().dot(&t.components);
        for ((i, j), v) in g.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            prop_assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn episode_invariants(seed in 0u64..10_000, env in 0usize..4, len in 1usize..=5) {
        let ep = collect_episode(seed, EnvId::ALL[env], len).unwrap();
        prop_assert_eq!(ep.actions.len() + 1, ep.frames.len());
        prop_assert_eq!(ep.gaze_boxes.len(), ep.frames.len());
        prop_assert!(ep.subtask_index.windows(2).all(|w| w[0] <= w[1]));
        for g in &ep.gaze_boxes {
            prop_assert!(g.base.is_valid(64, 64));
        }
        for a in &ep.actions {
            prop_assert!(a.to_array().iter().all(|v| v.abs() <= 1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn shard_roundtrip(seed in 0u64..10_000) {
        let mut ep = annotate_gaze(collect_episode(seed, EnvId::B, 2).unwrap()).unwrap();
        // actions are stored at f32 precision
        for a in &mut ep.episode.actions {
            *a = ContinuousAction::from_array(a.to_array().map(|v| v as f32 as f64));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_shard(std::slice::from_ref(&ep), &path).unwrap();
        let back = read_shard(&path).unwrap();
        prop_assert!(back == vec![ep], "shard roundtrip differs for seed {}", seed);
    }
}
