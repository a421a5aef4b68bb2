use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stos_core::engine::params::{ModelParams, Weights};
use stos_core::engine::{Activation, MessagePassing, Model, ModelConfig, TemporalKind};
use stos_core::sensitivity::{
    empirical_jacobian, factorization_check, finite_difference_jacobian, mptcn_bound,
    verify_bounds, BoundConstants, ModelBound, SensitivityError,
};
use stos_core::spatial::{build_ring, message_passing_matrix, SpatialGraph};
use stos_core::temporal::build_causal;

fn ring_config(seed: u64) -> ModelConfig {
    ModelConfig {
        nodes: 6,
        window: 6,
        input_dim: 1,
        hidden_dim: 3,
        horizon: 1,
        outer_layers: 2,
        temporal_layers: 1,
        spatial_layers: 1,
        kernel_size: 2,
        temporal: TemporalKind::Standard,
        activation: Activation::Gelu,
        message_passing: MessagePassing::Diffusion { hops: 1 },
        seed,
    }
}

fn random_state(model: &Model, seed: u64) -> Array3<f64> {
    let c = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((c.window, c.nodes, c.hidden_dim), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn random_models_satisfy_bounds() {
    for (seed, variant, kind) in [
        (1, MessagePassing::Diffusion { hops: 1 }, TemporalKind::Standard),
        (2, MessagePassing::Simple, TemporalKind::Normalized),
        (3, MessagePassing::Diffusion { hops: 2 }, TemporalKind::Dilated { reset: 2 }),
    ] {
        let config = ModelConfig {
            message_passing: variant,
            temporal: kind,
            ..ring_config(seed)
        };
        let model = Model::init(config, build_ring(6).unwrap()).unwrap();
        let report = verify_bounds(&model, 3, seed, None).unwrap();
        assert!(report.worst_slack >= -1e-9);
        assert_eq!(report.entries.len(), 6 * 6 * 6 * 6);
        assert!(report.entries.iter().any(|e| e.empirical > 0.0));
        assert!(report.to_csv().starts_with("u,v,i,j,empirical,bound,slack\n"));
    }
}

#[test]
fn linear_single_layer_jacobian_and_tight_bound() {
    let config = ModelConfig {
        nodes: 1,
        window: 4,
        input_dim: 1,
        hidden_dim: 1,
        outer_layers: 1,
        temporal_layers: 1,
        spatial_layers: 0,
        kernel_size: 2,
        activation: Activation::Identity,
        ..ring_config(0)
    };
    let graph = SpatialGraph::new(1, false, vec![]).unwrap();
    let mut model = Model::init(config, graph).unwrap();
    let mut w = model.params().weights.clone();
    w.blocks[0].temporal[0].kernels = vec![Array2::from_elem((1, 1), 0.3), Array2::from_elem((1, 1), -0.8)];
    model.set_weights(w).unwrap();
    let state = random_state(&model, 1);
    let jac = empirical_jacobian(&model, state.view(), (0, 0), (0, 1)).unwrap();
    assert_eq!(jac[[0, 0]], -0.8);
    let report = verify_bounds(&model, 2, 0, None).unwrap();
    let tight = report.entries.iter().find(|e| (e.i, e.j) == (1, 0)).unwrap();
    assert_eq!(tight.slack, 0.0);
}

#[test]
fn linear_jacobian_is_transposed_kernel() {
    let config = ModelConfig {
        nodes: 1,
        window: 4,
        hidden_dim: 3,
        outer_layers: 1,
        temporal_layers: 1,
        spatial_layers: 0,
        activation: Activation::Identity,
        ..ring_config(5)
    };
    let model = Model::init(config, SpatialGraph::new(1, false, vec![]).unwrap()).unwrap();
    let state = random_state(&model, 2);
    let jac = empirical_jacobian(&model, state.view(), (0, 1), (0, 2)).unwrap();
    let w1 = &model.params().weights.blocks[0].temporal[0].kernels[1];
    assert_eq!(jac, w1.t().to_owned());
    let none = empirical_jacobian(&model, state.view(), (0, 0), (0, 2)).unwrap();
    assert!(none.iter().all(|&x| x == 0.0));
}

#[test]
fn zero_kernels_give_zero_everything() {
    let config = ModelConfig {
        spatial_layers: 0,
        ..ring_config(4)
    };
    let mut model = Model::init(config, build_ring(6).unwrap()).unwrap();
    let mut w: Weights = model.params().weights.clone();
    for block in &mut w.blocks {
        for layer in &mut block.temporal {
            for k in &mut layer.kernels {
                k.fill(0.0);
            }
        }
    }
    model.set_weights(w).unwrap();
    let report = verify_bounds(&model, 2, 0, None).unwrap();
    assert!(report.entries.iter().all(|e| e.empirical == 0.0 && e.bound == 0.0));
}

#[test]
fn jacobian_matches_finite_differences() {
    let model = Model::init(ring_config(7), build_ring(6).unwrap()).unwrap();
    let state = random_state(&model, 3);
    let mut worst: f64 = 0.0;
    for (target, source) in [((0, 0), (1, 2)), ((2, 1), (2, 1)), ((5, 0), (4, 3))] {
        let exact = empirical_jacobian(&model, state.view(), target, source).unwrap();
        let fd = finite_difference_jacobian(&model, state.view(), target, source, 1e-5).unwrap();
        for (a, b) in exact.iter().zip(fd.iter()) {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-6));
        }
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn factorization_holds_for_decoupled_models() {
    for seed in 0..3 {
        let config = ModelConfig {
            nodes: 2,
            window: 4,
            outer_layers: 1,
            temporal_layers: 2,
            spatial_layers: 2,
            ..ring_config(seed)
        };
        let graph = SpatialGraph::new(2, false, vec![(0, 1, 1.0)]).unwrap();
        let model = Model::init(config, graph).unwrap();
        let state = random_state(&model, seed);
        for (target, source) in [((0, 0), (1, 2)), ((1, 1), (1, 1)), ((0, 0), (0, 3))] {
            let dev = factorization_check(&model, state.view(), target, source).unwrap();
            assert!(dev < 1e-10, "{dev}");
        }
    }
    let model = Model::init(ring_config(0), build_ring(6).unwrap()).unwrap();
    let state = random_state(&model, 0);
    assert!(matches!(
        factorization_check(&model, state.view(), (0, 0), (0, 0)),
        Err(SensitivityError::NotDecoupled(2))
    ));
}

#[test]
fn budget_invariance_and_receptive_field() {
    let ring = build_ring(16).unwrap();
    let s = message_passing_matrix(&ring, 1.0, 0.0, 1.0).unwrap().entries;
    let r = build_causal(16, 2, None).unwrap().entries().clone();
    let c = BoundConstants {
        c_sigma: 1.1,
        w: 0.9,
        c_xi: 1.2,
        theta_m: 0.7,
        theta_u: 0.7,
        c1: 0.0,
        c2: 1.0,
    };
    let a = mptcn_bound(&s, &r, 1, 6, 6, &c, (0, 3), (5, 2)).unwrap();
    let b = mptcn_bound(&s, &r, 3, 2, 2, &c, (0, 3), (5, 2)).unwrap();
    assert_eq!(a, b);
    assert!(a > 0.0);
    assert_eq!(mptcn_bound(&s, &r, 1, 1, 7, &c, (0, 8), (0, 0)).unwrap(), 0.0);
    assert!(mptcn_bound(&s, &r, 1, 1, 1, &c, (0, 16), (0, 0)).is_err());
}

#[test]
fn model_bound_without_message_weights() {
    let model = Model::init(ring_config(3), build_ring(6).unwrap()).unwrap();
    let mut params: ModelParams = model.params().clone();
    for block in &mut params.weights.blocks {
        for layer in &mut block.spatial {
            for m in &mut layer.messages {
                m.fill(0.0);
            }
        }
    }
    let mut model = model;
    model.set_params(params).unwrap();
    let bound = ModelBound::new(&model).unwrap();
    assert_eq!(bound.constants.theta_m, 0.0);
    assert_eq!(bound.space[[0, 1]], 0.0);
    assert!(bound.space[[2, 2]] > 0.0);
    verify_bounds(&model, 2, 1, None).unwrap();
}
