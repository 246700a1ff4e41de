//! Two-stage optimization and score-averaged inference.

use lgd_core::autodiff::{softmax, Graph};
use lgd_core::classifier::{argmax, head_logits, Head};
use lgd_core::lgd::PairVars;
use lgd_core::nn::{named_grads, Ctx, Mode};
use lgd_core::synth::{generate, Dataset, InputEncoding, SyntheticSpec, Video};
use lgd_core::train::{
    batch_scores, dataset_loss, evaluate, frozen_in_stage, inference_inputs, infer_video, stage1_loss, stage2_loss, train,
    train_epoch, Scoring, Sgd, TrainConfig,
};
use lgd_core::{Error, Network, NetworkSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_data(videos: usize, seed: u64) -> Dataset {
    generate(&SyntheticSpec::new(videos, seed)).unwrap()
}

fn zero(net: &mut Network, prefix: &str) {
    let names: Vec<String> = net.params.names().filter(|n| n.starts_with(prefix)).cloned().collect();
    assert!(!names.is_empty(), "{prefix}");
    for n in names {
        net.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn random_batch(net: &Network, b: usize, seed: u64) -> Tensor {
    let [t, h, w] = net.spec.input_shape;
    Tensor::randn(&[b, 3, t, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn opt(cfg: &TrainConfig) -> Sgd {
    Sgd::new(cfg.momentum, cfg.weight_decay)
}

#[test]
fn step_decay_schedule() {
    let cfg = TrainConfig::full(1);
    assert_eq!(cfg.epochs, 50);
    for (epoch, lr) in [(0, 0.01), (19, 0.01), (20, 0.001), (39, 0.001), (40, 0.0001), (45, 0.0001)] {
        assert!((cfg.lr(epoch) - lr).abs() < 1e-15, "{epoch}");
    }
    for epoch in 0..200 {
        let closed = cfg.base_lr * 10f64.powi(-((epoch / 20) as i32));
        assert!((cfg.lr(epoch) - closed).abs() <= 1e-15 * closed);
    }
}

#[test]
fn zero_heads_give_uniform_losses() {
    let mut net = Network::build(&NetworkSpec::toy_2d(2), 1, 2).unwrap();
    zero(&mut net, "head.");
    let input = random_batch(&net, 2, 3);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &net.params, &net.buffers, Mode::Train);
    let x = ctx.graph.constant(input);
    let out = net.forward(&mut ctx, x).unwrap();
    let s1 = stage1_loss(&mut ctx, out.pair, &[0, 1], &net.sketch).unwrap();
    assert!((ctx.graph.value(s1.total).data()[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    let s2 = stage2_loss(&mut ctx, out.pair, &[1, 1], &net.sketch, false).unwrap();
    assert!((ctx.graph.value(s2.total).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    assert!(matches!(stage1_loss(&mut ctx, out.pair, &[0, 2], &net.sketch), Err(Error::LabelOutOfRange { label: 2, .. })));

    let mut net = Network::build(&NetworkSpec::toy_2d(3), 1, 2).unwrap();
    zero(&mut net, "head.combined.");
    let data = toy_data(6, 4);
    let loss = dataset_loss(&net, &data, 2, InputEncoding::Position, false, 4).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-14);
}

#[test]
fn local_head_sees_pooled_constant() {
    let net = Network::build(&NetworkSpec::toy_2d(3), 1, 2).unwrap();
    let mut params = net.params.clone();
    let c = params.get("head.local.weight").unwrap().shape()[1];
    let mut w = Tensor::zeros(&[3, c]).unwrap();
    w.set(&[1, 0], 1.0);
    params.insert("head.local.weight", w);
    params.insert("head.local.bias", Tensor::zeros(&[3]).unwrap());
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &params, &net.buffers, Mode::Eval);
    let x = ctx.graph.constant(Tensor::full(&[1, c, 3, 4, 4], 0.3).unwrap());
    let gv = ctx.graph.constant(Tensor::zeros(&[1, c]).unwrap());
    let logits = head_logits(&mut ctx, PairVars { x, g: gv }, Head::Local, &net.sketch, false).unwrap();
    assert_eq!(ctx.graph.value(logits).data(), &[0.0, 0.3, 0.0]);
}

#[test]
fn stage_two_reaches_every_trainable_parameter() {
    let net = Network::build(&NetworkSpec::toy_2d(3), 5, 6).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &net.params, &net.buffers, Mode::Train);
    let x = ctx.graph.constant(random_batch(&net, 3, 7));
    let out = net.forward(&mut ctx, x).unwrap();
    let loss = stage2_loss(&mut ctx, out.pair, &[0, 1, 2], &net.sketch, false).unwrap();
    let grads = ctx.graph.backward(loss.total).unwrap();
    let bound = ctx.bound().clone();
    let named = named_grads(&bound, &grads, &net.params).unwrap();
    for name in net.params.names().filter(|n| !frozen_in_stage(n, 2)) {
        let gt = named.get(name).unwrap_or_else(|| panic!("{name} unbound"));
        assert!(gt.data().iter().any(|&v| v != 0.0), "{name}");
    }
}

#[test]
fn frozen_parameters_stay_put() {
    let data = toy_data(8, 8);
    for stage in [1u8, 2] {
        let mut net = Network::build(&NetworkSpec::toy_2d(3), 9, 10).unwrap();
        let before = net.params.clone();
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::toy(stage) };
        train_epoch(&mut net, &mut opt(&cfg), &data, &cfg, 0, 11).unwrap();
        for (name, t) in net.params.iter() {
            let same = t.bit_eq(before.get(name).unwrap());
            assert_eq!(same, frozen_in_stage(name, stage), "stage {stage}: {name}");
        }
    }
}

#[test]
fn same_seed_gives_identical_runs() {
    let data = toy_data(12, 12);
    let test = toy_data(6, 13);
    let run = || {
        let mut net = Network::build(&NetworkSpec::toy_2d(3), 14, 15).unwrap();
        let cfg = TrainConfig { epochs: 2, eval_every: 1, ..TrainConfig::toy(1) };
        let mut sgd = opt(&cfg);
        let metrics = train(&mut net, &mut sgd, &data, Some(&test), &cfg, 0, 16, |_, _, _| Ok(())).unwrap();
        let lines: Vec<String> = metrics.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
        (lines, net, sgd)
    };
    let (a, na, oa) = run();
    let (b, nb, ob) = run();
    assert_eq!(a, b);
    assert!(na.params.bit_eq(&nb.params));
    assert!(na.buffers.bit_eq(&nb.buffers));
    assert!(oa.velocity.bit_eq(&ob.velocity));
    assert!(a.iter().all(|l| l.contains("\"test_top1\":")));
    assert!(!a[0].contains("wall_time"));
}

#[test]
fn non_finite_parameters_abort() {
    let data = toy_data(4, 17);
    let mut net = Network::build(&NetworkSpec::toy_2d(3), 18, 19).unwrap();
    net.params.get_mut("stem.conv_s.weight").unwrap().data_mut()[0] = f64::NAN;
    let cfg = TrainConfig::toy(1);
    let err = train_epoch(&mut net, &mut opt(&cfg), &data, &cfg, 0, 20).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err:?}");
}

#[test]
fn stage_one_loss_falls_over_five_epochs() {
    let data = toy_data(48, 21);
    let mut net = Network::build(&NetworkSpec::toy_2d(3), 22, 23).unwrap();
    let cfg = TrainConfig { epochs: 5, ..TrainConfig::toy(1) };
    let metrics = train(&mut net, &mut opt(&cfg), &data, None, &cfg, 0, 24, |_, _, _| Ok(())).unwrap();
    let losses: Vec<f64> = metrics.iter().map(|m| m.stage_loss()).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[4] < losses[0], "{losses:?}");
    assert!(metrics.iter().all(|m| (0.0..=1.0).contains(&m.train_top1)));
}

#[test]
fn stage_two_cuts_combined_loss_by_a_fifth() {
    let data = toy_data(64, 25);
    let mut net = Network::build(&NetworkSpec::toy_2d(3), 26, 27).unwrap();
    let cfg = TrainConfig::toy(2);
    assert_eq!(cfg.epochs, 10);
    let before = dataset_loss(&net, &data, 2, cfg.encoding, cfg.power_norm, 16).unwrap();
    train(&mut net, &mut opt(&cfg), &data, None, &cfg, 0, 28, |_, _, _| Ok(())).unwrap();
    let after = dataset_loss(&net, &data, 2, cfg.encoding, cfg.power_norm, 16).unwrap();
    assert!(after <= 0.8 * before, "{before} -> {after}");
}

#[test]
fn single_sample_inference_is_one_forward() {
    let net = Network::build(&NetworkSpec::toy_2d(3), 29, 30).unwrap();
    let video = &toy_data(1, 31).videos[0];
    let input = inference_inputs(&net, &video.frames, 1, InputEncoding::Position).unwrap().remove(0);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &net.params, &net.buffers, Mode::Eval);
    let x = ctx.graph.constant(Tensor::stack(&[input]).unwrap());
    let out = net.forward(&mut ctx, x).unwrap();
    let logits = head_logits(&mut ctx, out.pair, Head::Combined, &net.sketch, false).unwrap();
    let direct = softmax(ctx.graph.value(logits)).unwrap();
    let scores = infer_video(&net, &video.frames, 1, Scoring::Combined, InputEncoding::Position, false).unwrap();
    assert_eq!(scores, direct.data());
}

#[test]
fn static_video_average_equals_single_score() {
    for spec in [NetworkSpec::toy_2d(3), NetworkSpec::toy_3d(3)] {
        let net = Network::build(&spec, 32, 33).unwrap();
        let frame = Tensor::randn(&[1, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(34)).unwrap();
        let frames = Tensor::stack(&vec![frame.index_axis0(0).unwrap(); 20]).unwrap();
        let one = infer_video(&net, &frames, 1, Scoring::Separate, InputEncoding::Position, false).unwrap();
        let many = infer_video(&net, &frames, 7, Scoring::Separate, InputEncoding::Position, false).unwrap();
        for (a, b) in one.iter().zip(&many) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(argmax(&one), argmax(&many));
    }
}

#[test]
fn averaging_matches_explicit_loop() {
    for (spec, n) in [(NetworkSpec::toy_2d(3), 10), (NetworkSpec::toy_3d(3), 15)] {
        let net = Network::build(&spec, 35, 36).unwrap();
        let frames = Tensor::randn(&[30, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(37)).unwrap();
        let scores = infer_video(&net, &frames, n, Scoring::Combined, InputEncoding::Position, false).unwrap();
        let inputs = inference_inputs(&net, &frames, n, InputEncoding::Position).unwrap();
        let mut mean = [0.0; 3];
        for x in inputs {
            let s = batch_scores(&net, Tensor::stack(&[x]).unwrap(), Scoring::Combined, false).unwrap();
            for (m, v) in mean.iter_mut().zip(s.data()) {
                *m += v / n as f64;
            }
        }
        for (a, b) in scores.iter().zip(mean) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn short_and_empty_videos() {
    let net = Network::build(&NetworkSpec::toy_3d(3), 38, 39).unwrap();
    let short = Tensor::randn(&[3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(40)).unwrap();
    assert_eq!(infer_video(&net, &short, 2, Scoring::Separate, InputEncoding::Position, false).unwrap().len(), 3);
    // A video with no frames cannot be built, so it never reaches inference.
    assert!(matches!(Tensor::zeros(&[0, 32, 32]), Err(Error::Shape { .. })));
    assert!(matches!(
        infer_video(&net, &short, 0, Scoring::Separate, InputEncoding::Position, false),
        Err(Error::Invalid { .. })
    ));
}

#[test]
fn evaluation_matches_hand_count() {
    let net = Network::build(&NetworkSpec::toy_2d(3), 41, 42).unwrap();
    let data = toy_data(9, 43);
    let report = evaluate(&net, &data, 3, Scoring::Separate, InputEncoding::Position, false).unwrap();
    let mut correct = 0;
    for Video { frames, label, .. } in &data.videos {
        let s = infer_video(&net, frames, 3, Scoring::Separate, InputEncoding::Position, false).unwrap();
        correct += usize::from(argmax(&s) == *label);
    }
    assert_eq!(report.top1, correct as f64 / 9.0);
    assert_eq!(report.confusion.iter().flatten().sum::<usize>(), 9);
    assert_eq!(report.samples_per_video, 3);
}
