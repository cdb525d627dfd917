use oilad_core::mdp::{value_iteration, GridWorld};
use oilad_core::policy::{state_values, PolicyConfig, TransformerPolicy};
use oilad_core::stats::spearman_vs_time;
use oilad_core::training::{action_accuracy, TrainConfig, Trainer};
use oilad_core::traj::{gen_normal, Trajectory};

fn mean_time_spearman(model: &TransformerPolicy, trajs: &[Trajectory]) -> f64 {
    let scores: Vec<f64> = trajs
        .iter()
        .filter(|t| t.len() >= 3)
        .filter_map(|t| spearman_vs_time(&state_values(&model.q_values(&t.states()).unwrap())))
        .collect();
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[test]
fn imitation_then_monotonicity_on_small_grid() {
    let env = GridWorld::open(5, 5, vec![((4, 4), 0.0)], -1.0, 0.9).compile().unwrap();
    let tables = value_iteration(&env, 1e-12);
    let train = gen_normal(&env, &tables, 200, 50, 1).unwrap();
    let held_out = gen_normal(&env, &tables, 100, 50, 2).unwrap();

    let cfg = TrainConfig { iterations: 300, seed: 5, ..Default::default() };
    let switch = cfg.monotonicity_start();
    let model = TransformerPolicy::new(PolicyConfig::small(env.state_dim(), env.action_count()), 9).unwrap();
    let mut trainer = Trainer::new(model, &train, cfg.clone()).unwrap();
    for it in 0..switch {
        let row = trainer.step(it).unwrap();
        assert!(row.monotonicity_loss.is_none());
    }
    let after_stage_one = trainer.model.clone();
    for it in switch..cfg.iterations {
        trainer.step(it).unwrap();
    }
    let (model, history) = trainer.finish();
    assert_eq!(history.rows.len(), cfg.iterations);
    assert!(history.rows.last().unwrap().monotonicity_loss.is_some());

    let acc = action_accuracy(&model, &held_out.trajectories).unwrap();
    assert!(acc >= 0.95, "held-out action accuracy {acc}");

    let before = mean_time_spearman(&after_stage_one, &held_out.trajectories);
    let after = mean_time_spearman(&model, &held_out.trajectories);
    assert!(after > before, "value/time Spearman {before} -> {after}");
}
