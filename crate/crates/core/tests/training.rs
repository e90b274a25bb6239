use stmoe_core::mobility::{group_by_user, synthesize_city, Grid, SynthParams, UserTrajectory};
use stmoe_core::optim::{AdamW, AdamWConfig};
use stmoe_core::params::ParamStore;
use stmoe_core::train::{
    build_optimizer, forecast_train_examples, prepare_finetune, pretrain, train_forecast, train_step, Phase,
    TrainConfig, GROUP_BASE, GROUP_LOCATION,
};
use stmoe_core::{Model, ModelConfig, Tensor};

fn tiny_model() -> ModelConfig {
    let mut m = ModelConfig::desk();
    m.grid_side = 8;
    m.seq_len = 72;
    m.encoder.layers = 1;
    m.encoder.hidden = 8;
    m.encoder.heads = 2;
    m.encoder.ffn = 16;
    m.moe.experts = 2;
    m.moe.top_k = 1;
    m.moe.expert_ffn = 16;
    m
}

fn tiny_train(phase: Phase) -> TrainConfig {
    let mut c = TrainConfig::for_phase(phase);
    c.window.history_len = 24;
    c.window.mlm_stride = 24;
    c.batch_size = 8;
    c.epochs = 2;
    c.seed = 3;
    c.base_lr = 3e-3;
    c
}

fn city(users: usize, seed: u64) -> Vec<UserTrajectory> {
    let params = SynthParams {
        epsilon: 0.05,
        ..SynthParams::default()
    };
    group_by_user(synthesize_city(users, Grid::new(8).unwrap(), seed, &params).unwrap())
}

#[test]
fn adamw_matches_hand_stepped_quadratic() {
    // f(w) = w², grad 2w, lr 0.1, no weight decay.
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.5]));
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::single_group(cfg, 0.1, &store).unwrap();
    let (mut w, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
    for t in 1..=25 {
        let g = 2.0 * w;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        w -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);

        let cur = store.get(id).data()[0];
        store.get_mut(id).grad_mut().unwrap()[0] = 2.0 * cur;
        opt.update(&mut store);
        assert!((store.get(id).data()[0] - w).abs() < 1e-12, "step {t}");
    }
}

#[test]
fn weight_decay_is_decoupled_from_the_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![2.0]));
    let mut opt = AdamW::single_group(AdamWConfig::default(), 0.5, &store).unwrap();
    // Zero gradient: only the decay acts, θ ← θ (1 − lr·wd).
    opt.update(&mut store);
    assert!((store.get(id).data()[0] - 2.0 * (1.0 - 0.5 * 1e-3)).abs() < 1e-15);
}

#[test]
fn finetune_optimizer_has_two_groups_with_tenfold_ratio() {
    let model = Model::new(tiny_model(), 1).unwrap();
    let opt = build_optimizer(&model, &TrainConfig::finetune()).unwrap();
    assert_eq!(opt.groups.len(), 2);
    let loc = opt.group(GROUP_LOCATION).unwrap();
    let base = opt.group(GROUP_BASE).unwrap();
    assert_eq!(loc.params, vec![model.location_table()]);
    assert_eq!(loc.params.len() + base.params.len(), model.params.len());
    assert_eq!(loc.lr / base.lr, 10.0);
    let scratch = build_optimizer(&model, &TrainConfig::scratch()).unwrap();
    assert_eq!(scratch.groups.len(), 1);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let users = city(4, 5);
    let cfg = tiny_train(Phase::Scratch);
    let run = || {
        let mut model = Model::new(tiny_model(), cfg.seed).unwrap();
        let mut opt = build_optimizer(&model, &cfg).unwrap();
        let mut losses = Vec::new();
        train_forecast(&mut model, &mut opt, &users, &cfg, 0, |s, _, _| {
            losses.push(s.loss);
            Ok(())
        })
        .unwrap();
        (model, losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a.params, b.params);
    assert_eq!(la, lb);
    assert!(la[1] < la[0], "{la:?}");
}

#[test]
fn interrupted_training_resumes_bit_exactly() {
    let users = city(3, 6);
    let mut cfg = tiny_train(Phase::Pretrain);
    cfg.epochs = 3;
    let full = {
        let mut model = Model::new(tiny_model(), cfg.seed).unwrap();
        let mut opt = build_optimizer(&model, &cfg).unwrap();
        pretrain(&mut model, &mut opt, &users, &cfg, 0, |_, _, _| Ok(())).unwrap();
        model
    };
    let mut model = Model::new(tiny_model(), cfg.seed).unwrap();
    let mut opt = build_optimizer(&model, &cfg).unwrap();
    let mut first = cfg;
    first.epochs = 1;
    pretrain(&mut model, &mut opt, &users, &first, 0, |_, _, _| Ok(())).unwrap();
    // Continue from a copy, as if reloaded from a checkpoint.
    let mut model2 = model.clone();
    let mut opt2 = opt.clone();
    pretrain(&mut model2, &mut opt2, &users, &cfg, 1, |_, _, _| Ok(())).unwrap();
    assert_eq!(model2.params, full.params);
}

#[test]
fn finetune_with_zero_epochs_keeps_parameters() {
    let base = Model::new(tiny_model(), 9).unwrap();
    let mut model = base.clone();
    let mut cfg = tiny_train(Phase::Finetune);
    cfg.epochs = 0;
    prepare_finetune(&mut model, &tiny_model(), &cfg).unwrap();
    let mut opt = build_optimizer(&model, &cfg).unwrap();
    train_forecast(&mut model, &mut opt, &city(2, 7), &cfg, 0, |_, _, _| Ok(())).unwrap();
    assert_eq!(model.params, base.params);

    let mut other = tiny_model();
    other.encoder.hidden = 16;
    assert!(prepare_finetune(&mut model, &other, &cfg).is_err());
}

#[test]
fn pad_row_stays_zero_through_updates() {
    let users = city(2, 8);
    let cfg = tiny_train(Phase::Scratch);
    let mut model = Model::new(tiny_model(), 4).unwrap();
    let mut opt = build_optimizer(&model, &cfg).unwrap();
    let examples = forecast_train_examples(&users, model.grid, &cfg.window).unwrap();
    train_step(&mut model, &mut opt, &examples[..4], &cfg).unwrap();
    let loc = model.params.get(model.location_table());
    let pad = model.grid.pad().0 as usize;
    let w = loc.cols();
    assert!(loc.data()[pad * w..(pad + 1) * w].iter().all(|&v| v == 0.0));
}
