use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regaze_core::backbone::{Backbone, ModelConfig, PolicyInput};
use regaze_core::denoiser::{standard_normal, Denoiser, DenoiserConfig};
use regaze_core::nn::Module;
use regaze_core::simworld::{create_world, render, sample_task_chain, EnvId, View};
use regaze_core::tokenizers::{ActionCodec, TextVocab, VocabLayout};

fn random_input(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> PolicyInput<f32> {
    let dim = cfg.patch_size * cfg.patch_size * 3;
    let mut m = |n: usize| Array2::from_shape_simple_fn((n, dim), || rng.gen::<f32>());
    PolicyInput {
        instruction: vec![4, 5, 6, 7, 8, 9, 10],
        base: m(cfg.view_patches()),
        wrist: m(cfg.view_patches()),
        crop: None,
    }
}

fn simulator(c: &mut Criterion) {
    let world = create_world(1, EnvId::A).unwrap();
    c.bench_function("render_base_64px", |b| b.iter(|| render(black_box(&world), View::Base)));
    c.bench_function("sample_task_chain_5", |b| {
        b.iter(|| sample_task_chain(black_box(1), &world, 5).unwrap())
    });
}

fn codec(c: &mut Criterion) {
    let codec = ActionCodec::new(&VocabLayout::new(&TextVocab::from_templates()));
    let a = regaze_core::simworld::ContinuousAction::from_array([0.3, -0.7, 1.0, -1.0]);
    c.bench_function("action_roundtrip", |b| {
        b.iter(|| codec.detokenize(&codec.tokenize(black_box(&a)).unwrap()).unwrap())
    });
}

fn backbone(c: &mut Criterion) {
    let cfg = ModelConfig {
        n_layers: 2,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Backbone::<f32>::new(cfg.clone(), &mut rng).unwrap();
    let input = random_input(&cfg, &mut rng);
    let off = model.layout().action_offset;
    let seq = model.assemble_sequence(&input, &[off + 10, off + 20, off + 30]).unwrap();
    c.bench_function("backbone_forward_d128_l2", |b| b.iter(|| model.forward(black_box(&seq), false).unwrap()));
    c.bench_function("backbone_generate_4", |b| b.iter(|| model.generate(black_box(&input), 4).unwrap()));
    let (out, cache) = model.forward(&seq, false).unwrap();
    let d_logits = out.action_logits.mapv(|_| 1e-3f32);
    c.bench_function("backbone_backward_d128_l2", |b| {
        b.iter(|| {
            model.zero_grad();
            model.backward(&seq, &cache, &d_logits.view(), None)
        })
    });
}

fn denoiser(c: &mut Criterion) {
    let cfg = DenoiserConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let den = Denoiser::<f32>::new(cfg.clone(), &mut rng).unwrap();
    let h_r = standard_normal::<f32>(cfg.n_cond, cfg.d_tok, &mut rng);
    let z = standard_normal::<f32>(16, cfg.d_tok, &mut rng);
    c.bench_function("denoiser_predict_16", |b| {
        b.iter(|| den.denoise_predict(black_box(&z.view()), &h_r.view(), 50).unwrap())
    });
}

criterion_group!(benches, simulator, codec, backbone, denoiser);
criterion_main!(benches);
