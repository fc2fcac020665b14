use puma_nn::gradcheck;
use puma_nn::{Checkpoint, Critic, CriticConfig, Estimator, EstimatorConfig, Graph, ParamStore, Policy, PolicyConfig, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(&mut rng, g.shape(y), 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn tiny_estimator() -> EstimatorConfig {
    EstimatorConfig {
        proprio_dim: 6,
        history: 3,
        depth_frames: 2,
        depth_height: 8,
        depth_width: 6,
        conv_channels: vec![3, 2],
        token_dim: 4,
        heads: 2,
        gru_hidden: 5,
        head_hidden: 4,
        prior_dim: 4,
        velocity_dim: 3,
        latent_dim: 3,
        grid_dim: 5,
    }
}

#[test]
fn estimator_gradients_match_finite_differences() {
    let cfg = tiny_estimator();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let est = Estimator::new(&mut store, "estimator", &cfg, false, &mut rng).unwrap();
    let proprio = random(&mut rng, &[2, cfg.history, cfg.proprio_dim], 1.0);
    let depth = random(&mut rng, &[2, cfg.depth_frames, cfg.depth_height, cfg.depth_width], 1.0);
    let report = gradcheck::check(&mut store, 1e-5, 24, |g, s| {
        let p = g.constant(proprio.clone());
        let d = g.constant(depth.clone());
        let out = est.forward(g, s, p, d)?;
        let rec = est.decode(g, s, out.latent)?;
        let parts = [
            probe(g, out.prior, 1)?,
            probe(g, out.velocity, 2)?,
            probe(g, out.latent, 3)?,
            probe(g, rec, 4)?,
        ];
        let a = g.add(parts[0], parts[1])?;
        let b = g.add(parts[2], parts[3])?;
        g.add(a, b)
    })
    .unwrap();
    for (name, rel, norm) in &report.entries {
        // Key biases shift every logit of a query equally, so softmax makes their
        // gradient vanish identically and the ratio only measures difference noise.
        if name.contains("key.bias") {
            assert!(*norm < 1e-9, "{name}: {norm:e}");
            continue;
        }
        assert!(*rel < 1e-6, "{name}: relative error {rel:e}");
    }
}

#[test]
fn policy_and_critic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pcfg = PolicyConfig {
        input_dim: 7,
        hidden: vec![6, 5],
        action_dim: 3,
        init_std: 0.7,
    };
    let mut store = ParamStore::<f64>::new();
    let policy = Policy::new(&mut store, "policy", &pcfg, &mut rng).unwrap();
    let x = random(&mut rng, &[4, 7], 1.0);
    let actions = random(&mut rng, &[4, 3], 1.0);
    let report = gradcheck::check(&mut store, 1e-5, 32, |g, s| {
        let xi = g.constant(x.clone());
        let a = g.constant(actions.clone());
        let (mean, log_std) = policy.forward(g, s, xi)?;
        let lp = policy.log_prob(g, mean, log_std, a)?;
        let lp = probe(g, lp, 5)?;
        let h = policy.entropy(g, log_std);
        g.add(lp, h)
    })
    .unwrap();
    for (name, rel, norm) in &report.entries {
        assert!(*rel < 1e-6, "{name}: relative error {rel:e}");
        assert!(*norm > 0.0, "{name}");
    }

    let ccfg = CriticConfig {
        input_dim: 7,
        hidden: vec![5, 4],
    };
    let mut store = ParamStore::<f64>::new();
    let critic = Critic::new(&mut store, "critic_task", &ccfg, &mut rng).unwrap();
    let report = gradcheck::check(&mut store, 1e-5, 32, |g, s| {
        let xi = g.constant(x.clone());
        let v = critic.forward(g, s, xi)?;
        probe(g, v, 6)
    })
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{:?}", report.entries);
}

#[test]
fn estimator_output_shapes_and_zero_heads() {
    let cfg = EstimatorConfig {
        depth_height: 24,
        depth_width: 32,
        gru_hidden: 32,
        ..EstimatorConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let est = Estimator::new(&mut store, "estimator", &cfg, true, &mut rng).unwrap();
    let mut g = Graph::new();
    let p = g.constant(Tensor::zeros(&[3, cfg.history, cfg.proprio_dim]));
    let d = g.constant(Tensor::zeros(&[3, cfg.depth_frames, cfg.depth_height, cfg.depth_width]));
    let out = est.forward(&mut g, &store, p, d).unwrap();
    assert_eq!(g.shape(out.prior), &[3, 4]);
    assert_eq!(g.shape(out.velocity), &[3, 3]);
    assert_eq!(g.shape(out.latent), &[3, 64]);
    for v in [out.prior, out.velocity, out.latent] {
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn every_head_loss_reaches_the_conv_encoder() {
    let cfg = tiny_estimator();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let est = Estimator::new(&mut store, "estimator", &cfg, false, &mut rng).unwrap();
    let proprio = random(&mut rng, &[2, cfg.history, cfg.proprio_dim], 1.0);
    let depth = random(&mut rng, &[2, cfg.depth_frames, cfg.depth_height, cfg.depth_width], 1.0);
    for head in 0..3 {
        let mut g = Graph::new();
        let p = g.constant(proprio.clone());
        let d = g.constant(depth.clone());
        let out = est.forward(&mut g, &store, p, d).unwrap();
        let y = [out.prior, out.velocity, out.latent][head];
        let sq = g.square(y);
        let loss = g.mean(sq);
        g.backward(loss).unwrap();
        store.zero_grad();
        store.accumulate(&g);
        let conv = store.id("estimator.conv0.weight").unwrap();
        let norm: f64 = store.grad(conv).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 0.0, "head {head} does not reach the conv encoder");
    }
}

#[test]
fn log_prob_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = PolicyConfig {
        input_dim: 5,
        hidden: vec![8],
        action_dim: 4,
        init_std: 0.3,
    };
    let mut store = ParamStore::<f64>::new();
    let policy = Policy::new(&mut store, "policy", &cfg, &mut rng).unwrap();
    let ls = store.id("policy.log_std").unwrap();
    for (i, v) in store.value_mut(ls).data_mut().iter_mut().enumerate() {
        *v = -1.0 + 0.4 * i as f64;
    }
    let x = random(&mut rng, &[6, 5], 1.0);
    let a = random(&mut rng, &[6, 4], 1.5);
    let mut g = Graph::new();
    let xi = g.constant(x);
    let ai = g.constant(a.clone());
    let (mean, log_std) = policy.forward(&mut g, &store, xi).unwrap();
    let lp = policy.log_prob(&mut g, mean, log_std, ai).unwrap();
    let mu = g.value(mean).clone();
    let sd: Vec<f64> = g.value(log_std).data().to_vec();
    for r in 0..6 {
        let mut expect = 0.0;
        for k in 0..4 {
            let s = sd[k].exp();
            let z = (a.data()[r * 4 + k] - mu.data()[r * 4 + k]) / s;
            expect += -0.5 * z * z - sd[k] - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        assert!((g.value(lp).data()[r] - expect).abs() < 1e-10);
    }
    // Deterministic evaluation uses the mean.
    assert_eq!(g.shape(mean), &[6, 4]);
}

#[test]
fn critics_do_not_share_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = CriticConfig {
        input_dim: 6,
        hidden: vec![8, 8],
    };
    let mut store = ParamStore::<f64>::new();
    let names = ["critic_task", "critic_foothold", "critic_style"];
    let critics: Vec<Critic> = names.iter().map(|n| Critic::new(&mut store, n, &cfg, &mut rng).unwrap()).collect();
    let x = random(&mut rng, &[3, 6], 1.0);
    let eval = |store: &ParamStore<f64>| -> Vec<Vec<f64>> {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        critics
            .iter()
            .map(|c| {
                let v = c.forward(&mut g, store, xi).unwrap();
                g.value(v).data().to_vec()
            })
            .collect()
    };
    let before = eval(&store);
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).starts_with("critic_foothold.") {
            for v in store.value_mut(id).data_mut() {
                *v += 0.25;
            }
        }
    }
    let after = eval(&store);
    assert_eq!(before[0], after[0]);
    assert_ne!(before[1], after[1]);
    assert_eq!(before[2], after[2]);
    for n in store.names() {
        assert_eq!(names.iter().filter(|p| n.starts_with(&format!("{p}."))).count(), 1, "{n}");
    }
}

#[test]
fn saved_networks_reload_to_identical_outputs() {
    let cfg = tiny_estimator();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f32>::new();
    let est = Estimator::new(&mut store, "estimator", &cfg, false, &mut rng).unwrap();
    let mut ckpt = Checkpoint::new();
    ckpt.push_params(&store);
    let mut bytes = Vec::new();
    ckpt.write_to(&mut bytes).unwrap();

    let mut other = ParamStore::<f32>::new();
    let est2 = Estimator::new(&mut other, "estimator", &cfg, false, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    Checkpoint::read_from(bytes.as_slice()).unwrap().load_params(&mut other).unwrap();

    let proprio: Tensor<f32> = random(&mut rng, &[2, cfg.history, cfg.proprio_dim], 1.0).cast();
    let depth: Tensor<f32> = random(&mut rng, &[2, 2, cfg.depth_height, cfg.depth_width], 1.0).cast();
    let run = |e: &Estimator, s: &ParamStore<f32>| {
        let mut g = Graph::new();
        let p = g.constant(proprio.clone());
        let d = g.constant(depth.clone());
        let o = e.forward(&mut g, s, p, d).unwrap();
        [o.prior, o.velocity, o.latent].map(|v| g.value(v).data().to_vec())
    };
    assert_eq!(run(&est, &store), run(&est2, &other));
}
