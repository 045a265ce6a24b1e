use std::path::PathBuf;

use rootfit_core::io::{read_json, read_scene, to_json_string};
use rootfit_core::synth::{
    derive_seed, gen_scene, geometric_refine, oracle_minimize, perturb, PerturbSpec, SceneConfig,
};
use rootfit_core::train::{evaluate, init_model, make_dataset, DataConfig, EvalMetrics, ModelDims};
use rootfit_core::{io::SceneFile, solve_ls, WeightVector};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/v1")
        .join(name)
}

#[test]
fn seed_42_scene_regenerates_byte_for_byte() {
    let scene = gen_scene(42, &SceneConfig::default()).unwrap();
    let fresh = to_json_string(&SceneFile::from(&scene)).unwrap();
    let stored = std::fs::read_to_string(fixture("scene_seed42.json")).unwrap();
    assert_eq!(fresh.trim_end(), stored.trim_end());
    assert_eq!(read_scene(&fixture("scene_seed42.json")).unwrap(), scene);
}

#[test]
fn seed_42_scene_solves_to_its_ground_truth() {
    let scene = read_scene(&fixture("scene_seed42.json")).unwrap();
    let res = solve_ls(&scene.system().unwrap()).unwrap();
    let err = (res.t - scene.t_gt.unwrap()).norm();
    assert!(err < 1e-12, "error {err:e}");
    assert!(res.residual_norm < 1e-12);
}

#[test]
fn untrained_model_metrics_are_pinned() {
    let data = make_dataset(42, 200, 100, &DataConfig::default(), true).unwrap();
    let dims = ModelDims {
        n_keypoints: 21,
        n_vertices: 64,
    };
    let model = init_model(derive_seed(42, 100), dims).unwrap();
    let got = evaluate(&model, &data.test, &data.template.jreg).unwrap();
    let want: EvalMetrics = read_json(&fixture("untrained_eval_seed42.json")).unwrap();
    assert_eq!(got, want);
}

#[test]
fn noiseless_scenes_agree_across_every_route() {
    for seed in 0..40 {
        let scene = gen_scene(seed, &SceneConfig::default()).unwrap();
        let sys = scene.system().unwrap();
        let t_gt = scene.t_gt.unwrap();
        let w = WeightVector::uniform(scene.n_keypoints());
        let ls = solve_ls(&sys).unwrap().t;
        let wls = scene.solve(&w).unwrap().t;
        let cg = oracle_minimize(&sys, &w, &Default::default(), 200, 1e-14)
            .unwrap()
            .t;
        let k3d = scene.keypoints_rel();
        let start = t_gt + rootfit_core::Translation3::new(0.01, -0.01, 0.05);
        let gn = geometric_refine(&scene.cam, &k3d, &scene.k2d_obs, &w, &start, 100).unwrap();
        for (name, t) in [("ls", ls), ("wls", wls), ("cg", cg), ("refine", gn)] {
            let err = (t - t_gt).norm();
            assert!(err < 1e-9, "seed {seed}: {name} off by {err:e}");
        }
    }
}

#[test]
fn mean_error_grows_with_pixel_noise() {
    let levels = [0.0, 1.0, 2.0, 4.0];
    let mut means = Vec::new();
    for &noise in &levels {
        let mut total = 0.0;
        for i in 0..60u64 {
            let scene = gen_scene(derive_seed(5, i), &SceneConfig::default()).unwrap();
            // same noise direction at every level, only the scale changes
            let noisy = perturb(&scene, &PerturbSpec::new(noise, 0, derive_seed(6, i))).unwrap();
            let t = solve_ls(&noisy.system().unwrap()).unwrap().t;
            total += (t - scene.t_gt.unwrap()).norm();
        }
        means.push(total / 60.0);
    }
    assert!(means[0] < 1e-10);
    for pair in means.windows(2) {
        assert!(pair[0] < pair[1], "means not increasing: {means:?}");
    }
}
