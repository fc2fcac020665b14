use std::fs;

use puma_core::harness::eval::{evaluate, load_policy, parse_preset, ScriptedTrot, REPORT_HEADER};
use puma_core::harness::train::{checkpoint_stem, read_metrics, train, CONFIG_FILE, METRICS_FILE};
use puma_core::harness::RunConfig;
use puma_core::rl::agent::Networks;
use puma_core::rl::{Variant, METRICS_HEADER};
use puma_core::sensors::OBS_DIM;
use puma_core::terrain::TerrainFamily;
use puma_nn::Checkpoint;

/// Tiny networks and camera so a training iteration takes milliseconds.
fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.camera.width = 16;
    cfg.camera.height = 12;
    cfg.observation.history = 3;
    cfg.nets.conv_channels = vec![4, 4];
    cfg.nets.token_dim = 16;
    cfg.nets.heads = 2;
    cfg.nets.gru_hidden = 16;
    cfg.nets.head_hidden = 16;
    cfg.nets.latent_dim = 8;
    cfg.nets.policy_hidden = vec![32, 32];
    cfg.nets.critic_hidden = vec![32];
    cfg.ppo.horizon = 8;
    cfg.train.n_envs = 4;
    cfg.train.iterations = 4;
    cfg.train.checkpoint_every = 2;
    cfg.train.deterministic = true;
    cfg.eval.trials = 4;
    cfg.eval.parallel = 4;
    cfg
}

/// Flat, unperturbed lanes so the scripted trot behaves the same in every trial.
fn calm() -> RunConfig {
    let mut cfg = tiny();
    cfg.terrain.roughness = 0.0;
    cfg.episode.init_rp_noise = 0.0;
    cfg.episode.init_yaw_noise = 0.0;
    cfg.camera.max_delay = 0;
    cfg
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = tiny();
    cfg.seed = 99;
    cfg.train.variant = Variant::SingleCritic;
    cfg.train.families = vec![TerrainFamily::SteppingStones, TerrainFamily::Flat];
    cfg.eval.presets = vec!["wall-gap-80".into(), "stepping-stones:2".into()];
    cfg.ppo.clip = 0.1;
    let text = cfg.to_toml().unwrap();
    let back = RunConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_toml().unwrap(), text);
    assert_eq!(RunConfig::from_toml(&RunConfig::default().to_toml().unwrap()).unwrap(), RunConfig::default());
}

#[test]
fn missing_keys_take_defaults() {
    let cfg = RunConfig::from_toml("seed = 7\n[ppo]\nclip = 0.3\n").unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.ppo.clip, 0.3);
    assert_eq!(cfg.ppo.gamma, RunConfig::default().ppo.gamma);
}

#[test]
fn unknown_keys_are_rejected() {
    for text in ["[ppo]\nclipp = 0.3\n", "bogus = 1\n", "[nonsense]\nx = 1\n"] {
        let err = RunConfig::from_toml(text).unwrap_err().to_string();
        assert!(err.contains("unknown"), "{text}: {err}");
    }
}

#[test]
fn inconsistent_values_are_rejected() {
    let mut cfg = tiny();
    cfg.train.n_envs = 0;
    assert!(RunConfig::from_toml(&cfg.to_toml().unwrap()).is_err());
}

#[test]
fn preset_names() {
    let p = parse_preset("stepping-stones:2", 10).unwrap();
    assert_eq!((p.family, p.level, p.inclination), (TerrainFamily::SteppingStones, 2, None));
    let p = parse_preset("wall-gap-80", 10).unwrap();
    assert_eq!((p.family, p.level, p.inclination), (TerrainFamily::WallAssistedGap, 9, Some(80.0)));
    let p = parse_preset("surmounting-60:4", 10).unwrap();
    assert_eq!((p.family, p.level, p.inclination), (TerrainFamily::Surmounting, 4, Some(60.0)));
    assert_eq!(parse_preset("flat", 10).unwrap().level, 0);
    assert!(parse_preset("lava", 10).is_err());
    assert!(parse_preset("stepping-stones:10", 10).is_err());
    assert!(parse_preset("flat-60", 10).is_err());
}

#[test]
fn scripted_trot_finishes_flat_lanes() {
    let cfg = calm();
    let mut agent = ScriptedTrot::default();
    let report = evaluate(&cfg, &mut agent, &["flat".into()], 4, 3, "scripted", None).unwrap();
    let p = &report.presets[0];
    assert_eq!(p.sr, 1.0, "{report}");
    assert_eq!(p.tr, 1.0);
    assert_eq!(p.mse_raw, 0.0);
    assert_eq!(p.mse_normalized, 0.0);
}

#[test]
fn stopping_halfway_gives_half_traverse() {
    let cfg = calm();
    let mut agent = ScriptedTrot {
        stop_fraction: 0.5,
        ..Default::default()
    };
    let report = evaluate(&cfg, &mut agent, &["flat".into()], 4, 3, "scripted", None).unwrap();
    let p = &report.presets[0];
    assert_eq!(p.sr, 0.0);
    // The base coasts a little after the feet stop stepping.
    assert!((p.tr - 0.5).abs() < 0.05, "tr {}", p.tr);
}

#[test]
fn report_is_reproducible_and_has_the_documented_columns() {
    let cfg = calm();
    let run = || {
        let mut agent = ScriptedTrot::default();
        evaluate(&cfg, &mut agent, &["flat".into(), "stepping-stones:1".into()], 2, 5, "scripted", None)
            .unwrap()
            .to_string()
    };
    let text = run();
    assert_eq!(text, run());
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(REPORT_HEADER));
    let cols = REPORT_HEADER.split(',').count();
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split(',').count() == cols));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let summary = train(&cfg, dir.path(), None, |_| {}).unwrap();
    assert_eq!(summary.rows.len(), cfg.train.iterations);
    let metrics = dir.path().join(METRICS_FILE);
    let straight = fs::read(&metrics).unwrap();
    assert!(dir.path().join(CONFIG_FILE).exists());
    assert_eq!(RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap(), cfg);

    let ckpt = checkpoint_stem(dir.path(), 2).with_extension("puma");
    train(&cfg, dir.path(), Some(&ckpt), |_| {}).unwrap();
    assert_eq!(fs::read(&metrics).unwrap(), straight);

    let rows = read_metrics(&metrics).unwrap();
    assert_eq!(rows.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
}

#[test]
fn metrics_csv_has_the_documented_schema() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.iterations = 2;
    train(&cfg, dir.path(), None, |_| {}).unwrap();
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert_eq!(header, METRICS_HEADER);
    assert_eq!(
        header.split(',').collect::<Vec<_>>(),
        [
            "iter",
            "p_t",
            "mean_reward_task",
            "mean_reward_foothold",
            "mean_reward_style",
            "loss_policy",
            "loss_critic_task",
            "loss_critic_foothold",
            "loss_critic_style",
            "loss_fhat_mse",
            "loss_vhat_mse",
            "mean_level",
            "sr_window",
            "tr_window"
        ]
    );
    for line in lines {
        assert_eq!(line.split(',').count(), 14);
    }
}

#[test]
fn resume_with_a_different_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    train(&cfg, dir.path(), None, |_| {}).unwrap();
    let mut other = cfg.clone();
    other.ppo.clip = 0.3;
    let ckpt = checkpoint_stem(dir.path(), 2).with_extension("puma");
    let err = train(&other, &dir.path().join("other"), Some(&ckpt), |_| {}).unwrap_err();
    assert!(err.to_string().contains("different configuration"), "{err}");
}

#[test]
fn no_prior_drops_four_policy_inputs() {
    let cfg = tiny();
    let full = Networks::new(&cfg.nets, &cfg.env_config(), Variant::Full, 1).unwrap();
    let mut c = cfg.clone();
    c.train.variant = Variant::NoPrior;
    let ablated = Networks::new(&c.nets, &c.env_config(), Variant::NoPrior, 1).unwrap();
    assert_eq!(full.policy_input_dim() - ablated.policy_input_dim(), 4);
    assert_eq!(full.policy_input_dim(), OBS_DIM + 4 + 3 + cfg.nets.latent_dim);
    // The estimator still regresses the full prior.
    assert_eq!(ablated.estimator.cfg.prior_dim, 4);
}

#[test]
fn single_critic_checkpoint_holds_one_value_head() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.variant = Variant::SingleCritic;
    cfg.train.iterations = 1;
    let summary = train(&cfg, dir.path(), None, |_| {}).unwrap();
    let ckpt = Checkpoint::load(&summary.final_checkpoint).unwrap();
    let heads: std::collections::BTreeSet<&str> = ckpt
        .tensors
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| n.starts_with("critic"))
        .map(|n| n.split('.').next().unwrap())
        .collect();
    assert_eq!(heads.len(), 1, "{heads:?}");
    let (nets, id) = load_policy(&cfg, &summary.final_checkpoint).unwrap();
    assert_eq!(nets.critics.len(), 1);
    assert_eq!(id.len(), 16);
}

#[test]
fn loading_under_the_wrong_variant_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.iterations = 1;
    let summary = train(&cfg, dir.path(), None, |_| {}).unwrap();
    let mut other = cfg.clone();
    other.train.variant = Variant::NoPas;
    let err = load_policy(&other, &summary.final_checkpoint).err().expect("variant mismatch must fail");
    assert!(err.to_string().contains("variant"), "{err}");
}
