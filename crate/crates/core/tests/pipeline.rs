use acenet::config::{NetworkConfig, TrainConfig};
use acenet::data::{generate_sample, Sample, SynthConfig};
use acenet::eval::{evaluate, predict};
use acenet::inspect::{inspect_affinity, stochastic_deviation};
use acenet::network::build_network;
use acenet::nn::ParamStore;
use acenet::train::{batch_loss, train, Batch};
use acenet::{acet, Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn samples(range: std::ops::Range<u64>) -> Vec<Sample> {
    range.map(|s| generate_sample(s, &SynthConfig::default()).unwrap()).collect()
}

fn net_cfg(enable_lcm: bool, enable_gem: bool) -> NetworkConfig {
    NetworkConfig { enable_lcm, enable_gem, ..Default::default() }
}

fn short(iters: usize) -> TrainConfig {
    TrainConfig { total_iters: iters, warmup_iters: 0, batch_size: 2, ..Default::default() }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let net = build_network(&net_cfg(true, true)).unwrap();
    let init = net.init_params(5);
    let cfg = TrainConfig { base_lr: 0.0, ..short(3) };
    let out = train(&net, &cfg, &samples(0..4), init.clone(), |_| {}).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.log.len(), 3);
}

#[test]
fn one_small_step_reduces_the_batch_loss() {
    let data = samples(0..2);
    let net = build_network(&net_cfg(true, true)).unwrap();
    let init = net.init_params(2);
    let cfg = TrainConfig { base_lr: 1e-3, flip: false, ..short(1) };
    let batch = Batch::from_samples(&[&data[0], &data[1]]).unwrap();
    let loss_of = |params: &ParamStore| {
        let mut tape = Tape::<f32>::new();
        let (_, b) = batch_loss(&mut tape, &net, params, &batch, &cfg).unwrap();
        b.values(&tape).total
    };
    let before = loss_of(&init);
    let after = loss_of(&train(&net, &cfg, &data, init, |_| {}).unwrap().params);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn seeded_runs_replay_exactly() {
    let data = samples(0..16);
    let net = build_network(&net_cfg(false, false)).unwrap();
    let cfg = TrainConfig { total_iters: 50, warmup_iters: 10, batch_size: 4, seed: 3, ..Default::default() };
    let a = train(&net, &cfg, &data, net.init_params(3), |_| {}).unwrap();
    let b = train(&net, &cfg, &data, net.init_params(3), |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.params, b.params);
}

#[test]
fn non_finite_loss_aborts_with_iteration() {
    let net = build_network(&net_cfg(false, false)).unwrap();
    let mut params = net.init_params(0);
    params.get_mut("parse.cls.bias").unwrap().data_mut()[0] = f32::NAN;
    let err = train(&net, &short(5), &samples(0..2), params, |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { iter: 0 }), "{err}");
}

#[test]
fn oracle_injection_scores_perfectly() {
    let net = build_network(&net_cfg(true, true)).unwrap();
    let (m, _) = evaluate(&net, &net.init_params(0), &samples(200..210), true).unwrap();
    assert_eq!((m.miou, m.pixel_acc, m.mean_acc), (1.0, 1.0, 1.0));
}

#[test]
fn untrained_networks_score_below_half() {
    let val = samples(200..220);
    for seed in 0..3 {
        let net = build_network(&net_cfg(true, true)).unwrap();
        let (m, _) = evaluate(&net, &net.init_params(seed), &val, false).unwrap();
        assert!(m.miou < 0.5, "seed {seed}: {}", m.miou);
    }
}

#[test]
fn evaluation_matches_brute_force_counts() {
    let val = samples(200..212);
    let net = build_network(&net_cfg(false, true)).unwrap();
    let params = net.init_params(8);
    let (_, cm) = evaluate(&net, &params, &val, false).unwrap();
    let k = net.config().num_classes;
    let mut counts = vec![0u64; k * k];
    for s in &val {
        let pred = predict(&net, &params, &[s]).unwrap();
        for (&p, &g) in pred.data().iter().zip(s.labels.data()) {
            counts[g as usize * k + p as usize] += 1;
        }
    }
    for g in 0..k {
        for p in 0..k {
            assert_eq!(cm.count(g, p), counts[g * k + p]);
        }
    }
}

#[test]
fn mismatched_checkpoint_is_a_configuration_error() {
    let net = build_network(&net_cfg(true, true)).unwrap();
    let other = build_network(&net_cfg(false, true)).unwrap().init_params(0);
    let err = evaluate(&net, &other, &samples(200..201), false).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn inspect_dumps_are_stochastic_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let net = build_network(&net_cfg(true, true)).unwrap();
    let sample = generate_sample(201, &SynthConfig::default()).unwrap();
    let dump = inspect_affinity(&net, &net.init_params(6), &sample, dir.path()).unwrap();
    let a = dump.channel.as_ref().unwrap();
    let g = dump.spatial.as_ref().unwrap();
    assert_eq!(a.shape(), [8, 32]);
    assert_eq!(g.shape(), [256, 256]);
    assert!(stochastic_deviation(a, 1) <= 1e-6);
    assert!(stochastic_deviation(g, 0) <= 1e-6);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    for (file, t) in [("A.acet", a), ("G.acet", g), ("fine_pred.acet", &dump.fine_pred), ("base_pred.acet", &dump.base_pred)] {
        let back = acet::read(&dir.path().join(file)).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(bits(&back), bits(t), "{file}");
    }
}

#[test]
fn inspect_skips_disabled_modules() {
    let dir = tempfile::tempdir().unwrap();
    let net = build_network(&net_cfg(false, true)).unwrap();
    let sample = generate_sample(202, &SynthConfig::default()).unwrap();
    let dump = inspect_affinity(&net, &net.init_params(1), &sample, dir.path()).unwrap();
    assert!(dump.channel.is_none());
    assert!(!dir.path().join("A.acet").exists());
    assert!(dir.path().join("G.acet").exists());
}

#[test]
fn bias_only_network_is_constant_per_channel() {
    let net = build_network(&net_cfg(true, true)).unwrap();
    let mut params = net.init_params(0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (name, t) in params.iter_mut() {
        let weight = name.ends_with(".weight");
        t.data_mut().iter_mut().for_each(|v| *v = if weight { 0.0 } else { rng.gen_range(-1.0..1.0) });
    }
    let mut tape = Tape::<f32>::new();
    let vars = params.bind(&mut tape);
    let image = tape.constant(Tensor::from_fn(&[2, 3, 64, 64], |_| rng.gen_range(0.0..1.0)));
    let out = net.forward(&mut tape, &vars, image).unwrap();
    for v in [out.base_logits, out.fine_logits, out.heatmaps.unwrap(), out.boundary_logits.unwrap()] {
        let t = tape.value(v);
        let plane = t.shape()[2] * t.shape()[3];
        for chunk in t.data().chunks(plane) {
            assert!(chunk.iter().all(|&x| x == chunk[0]));
        }
    }
}

#[test]
fn disabling_both_modules_keeps_the_shared_head_bit_exact() {
    let full = build_network(&net_cfg(true, true)).unwrap();
    let base = build_network(&net_cfg(false, false)).unwrap();
    let full_params = full.init_params(12);
    let mut shared = base.init_params(0);
    for (name, t) in shared.iter_mut() {
        if !name.starts_with("fuse.conv1") {
            *t = full_params.get(name).unwrap().clone();
        }
    }
    let image = Tensor::from_fn(&[1, 3, 64, 64], |i| ((i * 37) % 101) as f32 / 101.0);
    let run = |net: &acenet::network::Network, params: &ParamStore| {
        let mut tape = Tape::<f32>::new();
        let vars = params.bind(&mut tape);
        let x = tape.constant(image.clone());
        let out = net.forward(&mut tape, &vars, x).unwrap();
        assert!(out.heatmaps.is_none() == (net.config() == base.config()));
        tape.value(out.base_logits).clone()
    };
    let a = run(&full, &full_params);
    let b = run(&base, &shared);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(base.param_count() < full.param_count());
}
