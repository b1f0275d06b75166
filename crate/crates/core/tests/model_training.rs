use catflow::checks::{randomize_params, small_model_config};
use catflow::graphs::{gen_community_small, CommunityParams, Graph, GraphLayout};
use catflow::model::Model;
use catflow::numerics::{AdamWConfig, Tensor};
use catflow::objectives::Objective;
use catflow::paths::CategoricalSpace;
use catflow::rng::from_seed;
use catflow::state::{DataSpec, Item, StateLayout};
use catflow::train::{train_loop, TrainConfig, TrainState};

fn graph_spec() -> DataSpec {
    DataSpec::Graphs {
        node_classes: 2,
        edge_classes: 3,
    }
}

fn random_graph_model(seed: u64) -> Model {
    let mut rng = from_seed(seed);
    let mut model = Model::new(&graph_spec(), &small_model_config(), &mut rng).unwrap();
    randomize_params(&mut model, 0.5, &mut rng);
    model
}

fn labelled(n: usize, edges: &[(usize, usize, usize)], labels: Vec<usize>) -> Graph {
    let mut g = Graph::new(labels, vec![0; n * n]).unwrap();
    for &(i, j, c) in edges {
        g.set_edge(i, j, c).unwrap();
    }
    g
}

#[test]
fn edge_predictions_are_exactly_symmetric_and_normalized() {
    let model = random_graph_model(1);
    let layout = graph_spec().layout(5).unwrap();
    let StateLayout::Graph(g) = &layout else { unreachable!() };
    let x = layout.noise(&mut from_seed(2));
    let mu = model.predict_marginals(&layout, &x, 0.4).unwrap();
    for i in 0..5 {
        for j in 0..5 {
            let (a, b) = (g.edge_offset(i, j), g.edge_offset(j, i));
            assert_eq!(mu.mu()[a..a + 3], mu.mu()[b..b + 3]);
        }
    }
    for d in 0..mu.space().n_vars() {
        let s: f64 = mu.block(d).iter().sum();
        assert!((s - 1.0).abs() < 1e-9 && mu.block(d).iter().all(|p| *p >= 0.0));
    }
}

#[test]
fn interchangeable_nodes_get_identical_rows() {
    // Nodes 1 and 2 are both leaves of node 0 with the same label.
    let g = labelled(4, &[(0, 1, 1), (0, 2, 1), (0, 3, 2)], vec![0, 1, 1, 0]);
    let model = random_graph_model(3);
    let layout = GraphLayout::new(4, 2, 3).unwrap();
    let x = layout.embed(&g).unwrap();
    let mu = model.predict_marginals(&StateLayout::Graph(layout), &x, 0.7).unwrap();
    for (a, b) in mu.block(1).iter().zip(mu.block(2)) {
        assert!((a - b).abs() < 1e-12);
    }
    let (a, b) = (layout.edge_offset(1, 3), layout.edge_offset(2, 3));
    let m = mu.mu();
    for c in 0..3 {
        assert!((m[a + c] - m[b + c]).abs() < 1e-12);
    }
}

#[test]
fn untrained_model_predicts_uniform_blocks() {
    let spec = DataSpec::Table {
        classes: CategoricalSpace::new(vec![2, 5]).unwrap(),
    };
    let model = Model::new(&spec, &small_model_config(), &mut from_seed(0)).unwrap();
    let layout = spec.layout(2).unwrap();
    let mu = model
        .predict_marginals(&layout, &layout.noise(&mut from_seed(1)), 0.3)
        .unwrap();
    assert!(mu.block(0).iter().all(|p| (p - 0.5).abs() < 1e-15));
    assert!(mu.block(1).iter().all(|p| (p - 0.2).abs() < 1e-15));
}

fn nonzero_everywhere(state: &TrainState, data: &[Item]) {
    let (_, grads) = state.loss_and_grads(data, 8, state.step).unwrap();
    for (name, g) in state.model.params().names().iter().zip(&grads) {
        assert!(g.data().iter().any(|v| *v != 0.0), "no gradient reaches {name}");
    }
}

#[test]
fn every_parameter_receives_gradient_after_one_update() {
    let graphs = gen_community_small(10, &CommunityParams::default(), &mut from_seed(4)).unwrap();
    let data: Vec<Item> = graphs.into_iter().map(Item::Graph).collect();
    let spec = DataSpec::Graphs {
        node_classes: 1,
        edge_classes: 2,
    };
    let cfg = TrainConfig {
        total_steps: 10,
        batch_size: 8,
        ..TrainConfig::default()
    };
    for objective in Objective::ALL {
        let mut s = TrainState::new(
            spec.clone(),
            small_model_config(),
            objective,
            AdamWConfig::default(),
            0.999,
            5,
            &data,
        )
        .unwrap();
        s.step(&data, &cfg).unwrap();
        nonzero_everywhere(&s, &data);
    }
    // Labelled nodes switch on the node head.
    let labelled_data = vec![
        Item::Graph(labelled(3, &[(0, 1, 1), (1, 2, 2)], vec![0, 1, 1])),
        Item::Graph(labelled(4, &[(0, 3, 1)], vec![1, 0, 1, 0])),
    ];
    let mut s = TrainState::new(
        graph_spec(),
        small_model_config(),
        Objective::Catflow,
        AdamWConfig::default(),
        0.999,
        5,
        &labelled_data,
    )
    .unwrap();
    s.step(&labelled_data, &cfg).unwrap();
    nonzero_everywhere(&s, &labelled_data);
}

#[test]
fn catflow_loss_falls_on_a_toy_table() {
    let spec = DataSpec::Table {
        classes: CategoricalSpace::new(vec![2, 2, 2]).unwrap(),
    };
    let rows = [[0, 0, 0], [1, 1, 1], [1, 1, 1], [0, 1, 1]];
    let data: Vec<Item> = rows.iter().map(|r| Item::Row(r.to_vec())).collect();
    let mut s = TrainState::new(
        spec,
        small_model_config(),
        Objective::Catflow,
        AdamWConfig::default(),
        0.999,
        0,
        &data,
    )
    .unwrap();
    let cfg = TrainConfig {
        total_steps: 500,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let initial = s.loss_and_grads(&data, 256, 0).unwrap().0.loss;
    assert!((initial - 3.0 * 2f64.ln()).abs() < 1e-12);
    train_loop(&mut s, &data, &cfg, |_, _| Ok(())).unwrap();
    let after = s.loss_and_grads(&data, 256, 10_000).unwrap().0.loss;
    assert!(after < initial - 0.1, "{initial} -> {after}");
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_run() {
    let graphs = gen_community_small(6, &CommunityParams::default(), &mut from_seed(6)).unwrap();
    let data: Vec<Item> = graphs.into_iter().map(Item::Graph).collect();
    let spec = DataSpec::Graphs {
        node_classes: 1,
        edge_classes: 2,
    };
    let cfg = TrainConfig {
        total_steps: 6,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let fresh = || {
        TrainState::new(
            spec.clone(),
            small_model_config(),
            Objective::Catflow,
            AdamWConfig::default(),
            0.9,
            7,
            &data,
        )
        .unwrap()
    };
    let mut straight = fresh();
    train_loop(&mut straight, &data, &cfg, |_, _| Ok(())).unwrap();

    let mut first = fresh();
    for _ in 0..3 {
        first.step(&data, &cfg).unwrap();
    }
    let bytes = first.to_checkpoint("cfg").unwrap().to_bytes().unwrap();
    let ckpt = catflow::model::Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = TrainState::from_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.step, 3);
    train_loop(&mut resumed, &data, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(resumed, straight);
    let a: Vec<&Tensor> = resumed.model.params().values().iter().collect();
    let b: Vec<&Tensor> = straight.model.params().values().iter().collect();
    assert_eq!(a, b);
}
