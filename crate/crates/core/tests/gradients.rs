mod support;

use support::*;

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    let (train, _) = split_episodes(SCENE_SEED, 1);
    let fm = dualmap_core::sim_env::FeatureModel::new(32);
    let model = default_model(21);
    let snaps = gradient_snapshots(&train, &model, &fm, 2);
    assert_eq!(snaps.len(), 2);
    let detail = check_gradients(&model, &snaps, 20, 1e-4).unwrap();
    println!("{detail}");
}
