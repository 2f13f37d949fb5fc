use std::time::Instant;
use eqpf_core::attention::{AttentionImpl, Dropout};
use eqpf_core::model::*;
use eqpf_core::positional::EncodingMode;
use eqpf_core::tensor::{Tape, Tensor};
use eqpf_core::rng::chacha;
use rand::Rng;

#[test]
#[ignore]
fn step_breakdown() {
    let cfg = ModelConfig {
        dim: 64, depth: 2, heads: 4, feature_count: 64,
        mode: EncodingMode::S1, clip: 6, dropout: 0.1, ffn_mult: 4,
        classes: 10, image_h: 14, image_w: 14, channels: 1, lengthscales: 4,
    };
    let store = ParamStore::<f32>::init(&cfg, 1).unwrap();
    let fms = draw_feature_maps(&cfg, 2, 0).unwrap();
    let mut rng = chacha(3);
    let b = 22;
    let img = Tensor::<f32>::new(
        vec![b, cfg.seq_len(), 1],
        (0..b * cfg.seq_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
    ).unwrap();
    let targets: Vec<usize> = (0..b).map(|i| i % 10).collect();

    for (label, with_dropout, with_backward, trainable) in [
        ("fwd only, no dropout, eval", false, false, false),
        ("fwd only, no dropout, train", false, false, true),
        ("fwd only, dropout, train", true, false, true),
        ("fwd+bwd, dropout, train", true, true, true),
    ] {
        let reps = 3;
        let t0 = Instant::now();
        for _ in 0..reps {
            let mut tape: Tape<f32> = Tape::new();
            let leaves = LeafSet::insert_all(&mut tape, &store, trainable);
            let x = tape.constant(img.clone());
            let mut d = Dropout { p: 0.1, rng: chacha(9) };
            let drop = if with_dropout { Some(&mut d) } else { None };
            let out = forward(&mut tape, &leaves, &cfg, &fms, x, AttentionImpl::Favor, drop).unwrap();
            let loss = tape.cross_entropy(out, &targets).unwrap();
            if with_backward { tape.backward(loss).unwrap(); }
            std::hint::black_box(tape.value(loss).data()[0]);
        }
        println!("{label:35}: {:.1} ms/step", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
    }
}

#[test]
#[ignore]
fn parallel_subbatch_step() {
    use rayon::prelude::*;
    let cfg = ModelConfig {
        dim: 64, depth: 2, heads: 4, feature_count: 64,
        mode: EncodingMode::S1, clip: 6, dropout: 0.1, ffn_mult: 4,
        classes: 10, image_h: 14, image_w: 14, channels: 1, lengthscales: 4,
    };
    let store = ParamStore::<f32>::init(&cfg, 1).unwrap();
    let fms = draw_feature_maps(&cfg, 2, 0).unwrap();
    let mut rng = chacha(3);
    let imgs: Vec<Tensor<f32>> = (0..2).map(|_| Tensor::<f32>::new(
        vec![11, cfg.seq_len(), 1],
        (0..11 * cfg.seq_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
    ).unwrap()).collect();
    let targets: Vec<usize> = (0..11).map(|i| i % 10).collect();
    let reps = 5;
    let t0 = Instant::now();
    for _ in 0..reps {
        let grads: Vec<Vec<Vec<f32>>> = imgs.par_iter().enumerate().map(|(si, img)| {
            let mut tape: Tape<f32> = Tape::new();
            let leaves = LeafSet::insert_all(&mut tape, &store, true);
            let x = tape.constant(img.clone());
            let mut d = Dropout { p: 0.1, rng: chacha(9 + si as u64) };
            let out = forward(&mut tape, &leaves, &cfg, &fms, x, AttentionImpl::Favor, Some(&mut d)).unwrap();
            let loss = tape.cross_entropy(out, &targets).unwrap();
            tape.backward(loss).unwrap();
            leaves.names().iter().map(|n| tape.grad(leaves.var(n)).unwrap().to_vec()).collect()
        }).collect();
        std::hint::black_box(&grads);
    }
    println!("parallel 2x11 subbatch step: {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // same but single 22-batch for comparison
    let img22 = Tensor::<f32>::new(
        vec![22, cfg.seq_len(), 1],
        (0..22 * cfg.seq_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
    ).unwrap();
    let targets22: Vec<usize> = (0..22).map(|i| i % 10).collect();
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape: Tape<f32> = Tape::new();
        let leaves = LeafSet::insert_all(&mut tape, &store, true);
        let x = tape.constant(img22.clone());
        let mut d = Dropout { p: 0.1, rng: chacha(9) };
        let out = forward(&mut tape, &leaves, &cfg, &fms, x, AttentionImpl::Favor, Some(&mut d)).unwrap();
        let loss = tape.cross_entropy(out, &targets22).unwrap();
        tape.backward(loss).unwrap();
        std::hint::black_box(tape.grad(leaves.var("embed.w")));
    }
    println!("single 22 batch step       : {:.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);

    // eval throughput
    let t0 = Instant::now();
    let chunks: Vec<Tensor<f32>> = (0..4).map(|_| img22.clone()).collect();
    let n: usize = chunks.par_iter().map(|c| {
        let mut tape: Tape<f32> = Tape::new();
        let leaves = LeafSet::insert_all(&mut tape, &store, false);
        let x = tape.constant(c.clone());
        let out = forward(&mut tape, &leaves, &cfg, &fms, x, AttentionImpl::Favor, None).unwrap();
        tape.value(out).data().len()
    }).sum();
    std::hint::black_box(n);
    println!("eval 88 images             : {:.1} ms ({:.2} ms/img)", t0.elapsed().as_secs_f64()*1e3, t0.elapsed().as_secs_f64()*1e3/88.0);
}

#[test]
#[ignore]
fn one_step_for_profiler() {
    let cfg = ModelConfig {
        dim: 64, depth: 2, heads: 4, feature_count: 64,
        mode: EncodingMode::S1, clip: 6, dropout: 0.1, ffn_mult: 4,
        classes: 10, image_h: 14, image_w: 14, channels: 1, lengthscales: 4,
    };
    let store = ParamStore::<f32>::init(&cfg, 1).unwrap();
    let fms = draw_feature_maps(&cfg, 2, 0).unwrap();
    let mut rng = chacha(3);
    let img = Tensor::<f32>::new(
        vec![11, cfg.seq_len(), 1],
        (0..11 * cfg.seq_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
    ).unwrap();
    let targets: Vec<usize> = (0..11).map(|i| i % 10).collect();
    let mut tape: Tape<f32> = Tape::new();
    let leaves = LeafSet::insert_all(&mut tape, &store, true);
    let x = tape.constant(img.clone());
    let mut d = Dropout { p: 0.1, rng: chacha(9) };
    let out = forward(&mut tape, &leaves, &cfg, &fms, x, AttentionImpl::Favor, Some(&mut d)).unwrap();
    let loss = tape.cross_entropy(out, &targets).unwrap();
    tape.backward(loss).unwrap();
    std::hint::black_box(tape.grad(leaves.var("embed.w")));
}
