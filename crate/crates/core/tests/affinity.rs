use gmssl_core::affinity::{build_system, AffinityInputs, LocalInputs};
use gmssl_core::augment::{apply, TransformSpec};
use gmssl_core::config::TrainConfig;
use gmssl_core::encoder;
use gmssl_core::eval::random_system;
use gmssl_core::graphnet::{knn_graph, Side};
use gmssl_core::matcher::{solve_exact, solve_lap, DEFAULT_NODE_LIMIT};
use gmssl_core::rng;
use gmssl_core::synth::generate_corpus;
use gmssl_core::trainer::Model;
use ndarray::{array, Array2};

#[test]
fn identical_views_make_the_diagonal_row_maximal() {
    let cfg = TrainConfig::default();
    let model = Model::init(&cfg);
    let corpus = generate_corpus(3, 10, 0.0).unwrap();
    let spec = TransformSpec::identity(64);
    let mut ys = Vec::new();
    let mut poss = Vec::new();
    let mut z = Array2::zeros((10, cfg.embed_dim));
    for (i, img) in corpus.images.iter().enumerate() {
        let (view, pos) = apply(img, &spec);
        let tr = encoder::forward(&model.encoder, &view).unwrap();
        z.row_mut(i).assign(&tr.z);
        ys.push(tr.post.last().unwrap().clone());
        poss.push(pos.downsample(8));
    }
    let edges = knn_graph(&z, 3, Side::Source).unwrap().edges();
    let (sys, _) = build_system(&AffinityInputs {
        z_s: &z,
        z_t: &z,
        edges_s: &edges,
        edges_t: &edges,
        local: Some(LocalInputs { y_s: &ys, y_t: &ys, pos_s: &poss, pos_t: &poss }),
        alpha: cfg.alpha,
        gamma: cfg.gamma,
    })
    .unwrap();
    for i in 0..10 {
        for a in 0..10 {
            assert!(sys.c_v[[i, i]] >= sys.c_v[[i, a]], "row {i}: {} < {}", sys.c_v[[i, i]], sys.c_v[[i, a]]);
        }
        assert!((sys.c_v[[i, i]] - (cfg.alpha + 2.0 * (1.0 - cfg.alpha))).abs() < 1e-9);
    }
    assert_eq!(solve_lap(&sys.c_v).unwrap().assignment, (0..10).collect::<Vec<_>>());
}

#[test]
fn shifting_vertex_affinities_keeps_the_optimum() {
    let mut g = rng::stream(21, "shift");
    for _ in 0..50 {
        let mut sys = random_system(5, 0.5, &mut g).unwrap();
        let before = solve_exact(&sys, DEFAULT_NODE_LIMIT).unwrap();
        sys.c_v += 0.75;
        let after = solve_exact(&sys, DEFAULT_NODE_LIMIT).unwrap();
        assert_eq!(before.assignment, after.assignment);
        assert!((after.objective - (before.objective - 5.0 * 0.75)).abs() < 1e-9);
    }
}

#[test]
fn edges_break_a_vertex_tie() {
    // Rows 0 and 1 are identical, so vertex affinities alone cannot tell
    // whether 0↦0, 1↦1 or the swap; the edge to vertex 2 can.
    let c_v = array![[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let es = vec![(0, 2)];
    let et = vec![(0, 2), (1, 2)];
    let sys = gmssl_core::affinity::AffinitySystem::new(c_v.clone(), es, et, array![[0.0, 0.5]]).unwrap();
    let exact = solve_exact(&sys, DEFAULT_NODE_LIMIT).unwrap();
    assert_eq!(exact.assignment, vec![1, 0, 2]);
    let lap = solve_lap(&c_v).unwrap();
    assert!(sys.objective(&lap.assignment) - exact.objective > 0.0);
    assert_eq!(lap.objective, exact.objective + 0.5);
}
