use super::*;
use crate::autodiff::fdcheck::{max_rel_error, numeric_param_grad};
use crate::obsgraph::{build_state_graph, StateGraph};
use crate::roadnet::generate_grid_network;
use crate::simcore::{generate_trips, Action, SimState};

fn small_config() -> GcnConfig {
    GcnConfig {
        layers: 3,
        hidden: 6,
        quantile_embed: 8,
        m_current: 4,
        m_target: 4,
        k_eval: 8,
        ..GcnConfig::default()
    }
}

/// A graph with a single isolated TSC node carrying the given feature.
fn isolated_tsc_graph(feature: Scalar) -> StateGraph {
    StateGraph {
        step: 0,
        tsc_feats: vec![feature],
        conn_feats: vec![],
        lane_feats: vec![],
        veh_feats: vec![],
        veh_lane_node: vec![],
        edges: vec![],
        norm_adj: Arc::new(vec![(0, 0, 1.0)]),
        tsc_ids: vec![0],
        conn_ids: vec![],
        lane_ids: vec![],
        veh_ids: vec![],
        local_masks: vec![vec![0]],
    }
}

fn busy_graph(seed: u64) -> StateGraph {
    let net = generate_grid_network(2, 2, 1).unwrap();
    let schedule = generate_trips(&net, 1.0, 200, seed).unwrap();
    let mut state = SimState::new(&net, 200);
    let prolong: Vec<_> = net.signalized().iter().map(|&n| (n, Action::Prolong)).collect();
    for _ in 0..120 {
        state.step(&net, &schedule, &prolong).unwrap();
    }
    let graph = build_state_graph(&state, &net, 3);
    assert!(graph.n_veh() > 0);
    graph
}

fn sigmoid(m: &Matrix) -> Matrix {
    m.mapv(|x| 1.0 / (1.0 + (-x).exp()))
}

#[test]
fn isolated_tsc_reduces_to_dense_transforms_and_h0_is_half_on_zero_input() {
    let model = GcnModel::new(small_config()).unwrap();
    let params = model.init_params(3);
    let graph = isolated_tsc_graph(0.0);

    // Hand-evaluated reference: H0 = σ(x W + b) with x = 0 gives 0.5
    // everywhere; each propagation layer is σ(H W) because Â = [[1]].
    let mut h = Matrix::from_elem((1, model.config.hidden), 0.5);
    for layer in 0..model.config.layers {
        h = sigmoid(&h.dot(params.get(&format!("gcn.{layer}.w")).unwrap()));
    }

    let mut tape = Tape::new();
    let psi = model.embed(&mut tape, &params, &graph).unwrap();
    let got = tape.value(psi);
    assert_eq!(got.nrows(), 1);
    for (a, b) in got.iter().zip(h.iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn bias_only_head_returns_bias_for_every_tsc() {
    let model = GcnModel::new(small_config()).unwrap();
    let mut params = model.init_params(4);
    params
        .get_mut("head.w")
        .unwrap()
        .mapv_inplace(|_| 0.0);
    *params.get_mut("head.b").unwrap() = ndarray::array![[0.3, -0.2]];

    let graph = busy_graph(1);
    let q = model.q_values(&params, &graph).unwrap();
    assert_eq!(q.nrows(), graph.n_tsc());
    for row in q.rows() {
        assert_eq!(row[0], 0.3);
        assert_eq!(row[1], -0.2);
    }
}

#[test]
fn twin_intersections_share_q_rows() {
    // All four corners of an empty 2x2 grid have isomorphic receptive
    // fields with identical features, so their value rows must agree.
    let net = generate_grid_network(2, 2, 1).unwrap();
    let state = SimState::new(&net, 10);
    let graph = build_state_graph(&state, &net, 3);
    let model = GcnModel::new(small_config()).unwrap();
    let params = model.init_params(5);
    let q = model.q_values(&params, &graph).unwrap();
    for row in 1..q.nrows() {
        for col in 0..q.ncols() {
            assert!(
                (q[(row, col)] - q[(0, col)]).abs() < 1e-9,
                "row {row} differs: {} vs {}",
                q[(row, col)],
                q[(0, col)]
            );
        }
    }
}

#[test]
fn permuting_nodes_within_blocks_leaves_psi_per_tsc_id_unchanged() {
    let graph = busy_graph(2);
    let model = GcnModel::new(small_config()).unwrap();
    let params = model.init_params(6);

    // Deterministic shuffles per block.
    let perm = |n: usize, offset: usize| -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.rotate_left(offset.min(n.saturating_sub(1)));
        p.reverse();
        p
    };
    let perms = [
        perm(graph.n_tsc(), 1),
        perm(graph.n_conn(), 7),
        perm(graph.n_lane(), 3),
        perm(graph.n_veh(), 5),
    ];
    let permuted =
        graph.permute_within_blocks([&perms[0], &perms[1], &perms[2], &perms[3]]);

    let q_a = model.q_values(&params, &graph).unwrap();
    let q_b = model.q_values(&params, &permuted).unwrap();
    for (row_b, &id) in permuted.tsc_ids.iter().enumerate() {
        let row_a = graph.tsc_ids.iter().position(|&x| x == id).unwrap();
        for col in 0..q_a.ncols() {
            assert!(
                (q_a[(row_a, col)] - q_b[(row_b, col)]).abs() < 1e-9,
                "tsc {id}: {} vs {}",
                q_a[(row_a, col)],
                q_b[(row_b, col)]
            );
        }
    }
}

#[test]
fn perturbing_a_far_vehicle_leaves_psi_exactly_unchanged() {
    // The receptive field is the layer count: a vehicle more than N hops
    // from a TSC cannot influence its embedding at all.
    let graph = busy_graph(3);
    let model = GcnModel::new(small_config()).unwrap();
    let params = model.init_params(7);

    let offsets = graph.block_offsets();
    // Find a (tsc, vehicle) pair outside each other's mask.
    let mut pair = None;
    'outer: for t in 0..graph.n_tsc() {
        for v in 0..graph.n_veh() {
            let node = (offsets[3] + v) as u32;
            if !graph.local_masks[t].contains(&node) {
                pair = Some((t, v));
                break 'outer;
            }
        }
    }
    let (tsc, veh) = pair.expect("2x2 grid has vehicles beyond 3 hops of some TSC");

    let q_before = model.q_values(&params, &graph).unwrap();
    let mut perturbed = graph.clone();
    perturbed.veh_feats[veh * crate::obsgraph::VEH_FEATS] += 3.0;
    perturbed.veh_feats[veh * crate::obsgraph::VEH_FEATS + 1] += 11.0;
    let q_after = model.q_values(&params, &perturbed).unwrap();

    for col in 0..q_before.ncols() {
        assert_eq!(
            q_before[(tsc, col)],
            q_after[(tsc, col)],
            "far vehicle leaked into TSC {tsc}"
        );
    }
    // Sanity: the perturbation does move some other controller.
    let any_change = (0..graph.n_tsc()).any(|t| {
        (0..q_before.ncols()).any(|c| q_before[(t, c)] != q_after[(t, c)])
    });
    assert!(any_change, "perturbation affected nothing");
}

#[test]
fn local_extraction_matches_full_graph_embedding() {
    let graph = busy_graph(4);
    let model = GcnModel::new(small_config()).unwrap();
    let params = model.init_params(8);
    let q_full = model.q_values(&params, &graph).unwrap();
    for tsc in 0..graph.n_tsc() {
        let (local, row) = graph.extract_local(tsc);
        let q_local = model.q_values(&params, &local).unwrap();
        for col in 0..q_full.ncols() {
            assert!(
                (q_full[(tsc, col)] - q_local[(row, col)]).abs() < 1e-12,
                "tsc {tsc} col {col}: {} vs {}",
                q_full[(tsc, col)],
                q_local[(row, col)]
            );
        }
    }
}

#[test]
fn quantile_phi_at_zero_sums_weights() {
    let model = GcnModel::new(small_config()).unwrap();
    let params = model.init_params(9);
    let mut tape = Tape::new();
    let phi = model.quantile_phi(&mut tape, &params, &[0.0]).unwrap();
    let got = tape.value(phi);

    let w = params.get("quant.w").unwrap();
    let b = params.get("quant.b").unwrap();
    for j in 0..model.config.hidden {
        let expected = (w.column(j).sum() + b[(0, j)]).max(0.0);
        assert!((got[(0, j)] - expected).abs() < 1e-12);
    }
}

#[test]
fn quantile_phi_is_zero_when_relu_kills_everything() {
    let model = GcnModel::new(small_config()).unwrap();
    let mut params = model.init_params(10);
    params.get_mut("quant.w").unwrap().mapv_inplace(|_| 0.0);
    params.get_mut("quant.b").unwrap().mapv_inplace(|_| -1.0);
    let mut tape = Tape::new();
    let phi = model.quantile_phi(&mut tape, &params, &[0.3, 0.9]).unwrap();
    assert!(tape.value(phi).iter().all(|&v| v == 0.0));
}

#[test]
fn first_cosine_feature_is_tau_independent() {
    // cos(π·0·τ) = 1 for every τ, so weights on row zero shift all φ
    // equally regardless of τ.
    let model = GcnModel::new(small_config()).unwrap();
    let mut params = model.init_params(11);
    params.get_mut("quant.w").unwrap().mapv_inplace(|_| 0.0);
    for j in 0..model.config.hidden {
        params.get_mut("quant.w").unwrap()[(0, j)] = 0.4 + j as Scalar * 0.1;
    }
    params.get_mut("quant.b").unwrap().mapv_inplace(|_| 0.0);
    let mut tape = Tape::new();
    let phi = model
        .quantile_phi(&mut tape, &params, &[0.0, 0.25, 0.5, 1.0])
        .unwrap();
    let got = tape.value(phi);
    for row in 1..got.nrows() {
        for col in 0..got.ncols() {
            assert_eq!(got[(row, col)], got[(0, col)]);
        }
    }
}

#[test]
fn quantile_phi_rejects_tau_outside_unit_interval() {
    let model = GcnModel::new(small_config()).unwrap();
    let params = model.init_params(12);
    let mut tape = Tape::new();
    assert!(matches!(
        model.quantile_phi(&mut tape, &params, &[1.5]),
        Err(ModelError::TauRange(_))
    ));
    assert!(matches!(
        model.quantile_phi(&mut tape, &params, &[-0.1]),
        Err(ModelError::TauRange(_))
    ));
}

#[test]
fn all_ones_phi_collapses_distributional_head_onto_deterministic_head() {
    let model = GcnModel::new(small_config()).unwrap();
    let mut params = model.init_params(13);
    params.get_mut("quant.w").unwrap().mapv_inplace(|_| 0.0);
    params.get_mut("quant.b").unwrap().mapv_inplace(|_| 1.0);

    let graph = busy_graph(5);
    let q = model.q_values(&params, &graph).unwrap();
    let taus = [0.1, 0.5, 0.9];
    let z = model.z_matrix(&params, &graph, &taus).unwrap();
    for t in 0..graph.n_tsc() {
        for (k, _) in taus.iter().enumerate() {
            for col in 0..q.ncols() {
                assert_eq!(z[(t * taus.len() + k, col)], q[(t, col)]);
            }
        }
    }
}

#[test]
fn zero_phi_yields_bias_only_quantiles() {
    let model = GcnModel::new(small_config()).unwrap();
    let mut params = model.init_params(14);
    params.get_mut("quant.w").unwrap().mapv_inplace(|_| 0.0);
    params.get_mut("quant.b").unwrap().mapv_inplace(|_| -1.0);
    *params.get_mut("head.b").unwrap() = ndarray::array![[0.7, -0.4]];

    let graph = isolated_tsc_graph(5.0);
    let z = model.z_matrix(&params, &graph, &[0.2, 0.8]).unwrap();
    for row in z.rows() {
        // ψ ⊙ 0 = 0, so f(0) = W·0 + b = b.
        assert_eq!(row[0], 0.7);
        assert_eq!(row[1], -0.4);
    }
}

#[test]
fn q_from_quantiles_of_constant_z_is_that_constant_and_k1_is_identity() {
    let model = GcnModel::new(small_config()).unwrap();
    let mut params = model.init_params(15);
    // Constant-in-τ quantiles via zero quantile weights and unit bias.
    params.get_mut("quant.w").unwrap().mapv_inplace(|_| 0.0);
    params.get_mut("quant.b").unwrap().mapv_inplace(|_| 1.0);

    let graph = busy_graph(6);
    let q = model.q_values(&params, &graph).unwrap();
    let grid = model.q_from_quantiles(&params, &graph, &model.eval_taus()).unwrap();
    for t in 0..graph.n_tsc() {
        for col in 0..q.ncols() {
            assert!((grid[(t, col)] - q[(t, col)]).abs() < 1e-12);
        }
    }

    // K = 1 with τ = 0.5 is just Z at 0.5.
    let single = model.q_from_quantiles(&params, &graph, &[0.5]).unwrap();
    let z = model.z_matrix(&params, &graph, &[0.5]).unwrap();
    assert_eq!(single, z);
}

#[test]
fn monte_carlo_mean_of_z_matches_fixed_grid_expectation() {
    let model = GcnModel::new(small_config()).unwrap();
    let params = model.init_params(16);
    let graph = busy_graph(7);

    let mut rng = ChaCha12Rng::seed_from_u64(999);
    let mc_taus: Vec<Scalar> = (0..10_000).map(|_| rng.random::<Scalar>()).collect();
    let mc = model.q_from_quantiles(&params, &graph, &mc_taus).unwrap();

    let fine_grid: Vec<Scalar> = (0..512).map(|i| (i as Scalar + 0.5) / 512.0).collect();
    let grid = model.q_from_quantiles(&params, &graph, &fine_grid).unwrap();

    for t in 0..graph.n_tsc() {
        for col in 0..mc.ncols() {
            assert!(
                (mc[(t, col)] - grid[(t, col)]).abs() < 0.05,
                "MC {} vs grid {}",
                mc[(t, col)],
                grid[(t, col)]
            );
        }
    }
}

#[test]
fn deterministic_eval_taus_are_midpoints() {
    let model = GcnModel::new(small_config()).unwrap();
    let taus = model.eval_taus();
    assert_eq!(taus.len(), model.config.k_eval);
    assert!((taus[0] - 0.5 / 8.0).abs() < 1e-15);
    assert!((taus[7] - 7.5 / 8.0).abs() < 1e-15);
}

#[test]
fn parameter_count_is_independent_of_graph_size() {
    let model = GcnModel::new(small_config()).unwrap();
    let params = model.init_params(17);
    let expected = {
        let d = model.config.hidden;
        let n = model.config.quantile_embed;
        // Encoders (1+4+1+2 inputs, each with bias rows) + layers + head +
        // quantile embedding.
        (1 + 4 + 1 + 2) * d + 4 * d + model.config.layers * d * d + d * 2 + 2 + n * d + d
    };
    assert_eq!(params.scalar_count(), expected);

    // The same store drives graphs of any size.
    let small = isolated_tsc_graph(1.0);
    let big = busy_graph(8);
    assert_eq!(model.q_values(&params, &small).unwrap().nrows(), 1);
    assert_eq!(model.q_values(&params, &big).unwrap().nrows(), big.n_tsc());
}

#[cfg(not(feature = "f32"))]
#[test]
fn embedding_and_heads_gradcheck_against_finite_differences() {
    let model = GcnModel::new(GcnConfig {
        layers: 2,
        hidden: 4,
        quantile_embed: 5,
        ..small_config()
    })
    .unwrap();
    let params = model.init_params(18);
    let graph = busy_graph(9);

    // Composite: mean of Z over a fixed τ batch plus mean Q.
    let loss_of = |store: &ParamStore| -> Scalar {
        let mut tape = Tape::new();
        let psi = model.embed(&mut tape, store, &graph).unwrap();
        let q = model.q_head(&mut tape, store, psi).unwrap();
        let z = model.z_values(&mut tape, store, psi, &[0.2, 0.7]).unwrap();
        let mq = tape.mean_all(q);
        let mz = tape.mean_all(z);
        let sum = tape.add(mq, mz).unwrap();
        tape.value(sum)[(0, 0)]
    };

    let mut tape = Tape::new();
    let psi = model.embed(&mut tape, &params, &graph).unwrap();
    let q = model.q_head(&mut tape, &params, psi).unwrap();
    let z = model.z_values(&mut tape, &params, psi, &[0.2, 0.7]).unwrap();
    let mq = tape.mean_all(q);
    let mz = tape.mean_all(z);
    let sum = tape.add(mq, mz).unwrap();
    let grads = tape.backward(sum).unwrap();

    for name in ["enc.veh.w", "gcn.0.w", "gcn.1.w", "head.w", "head.b", "quant.w", "quant.b"] {
        let analytic = grads.by_name.get(name).cloned().unwrap_or_else(|| {
            Matrix::zeros(params.get(name).unwrap().raw_dim())
        });
        let numeric = numeric_param_grad(&params, name, 1e-5, loss_of);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-6, "{name}: max rel err {err}");
    }
}

#[test]
fn checkpoint_round_trip_and_hash_mismatch() {
    let model = GcnModel::new(small_config()).unwrap();
    let params = model.init_params(19);
    let ck = Checkpoint::new("igrl", &model.config, 42, &params);
    let text = ck.to_json();
    let back = Checkpoint::from_json(&text).unwrap();
    assert_eq!(back.episodes_trained, 42);
    let restored = back.restore(&model.config).unwrap();
    assert_eq!(restored.get("head.w").unwrap(), params.get("head.w").unwrap());

    let other = GcnConfig { hidden: 12, ..small_config() };
    assert!(matches!(
        back.restore(&other),
        Err(ModelError::CheckpointHash { .. })
    ));
}

#[test]
fn config_validation_rejects_bad_values() {
    assert!(GcnConfig { layers: 1, ..small_config() }.validate().is_err());
    assert!(GcnConfig { k_eval: 0, ..small_config() }.validate().is_err());
    assert!(GcnConfig { huber_lambda: 0.0, ..small_config() }.validate().is_err());
    assert!(GcnConfig { head_hidden: Some(0), ..small_config() }.validate().is_err());
    assert!(small_config().validate().is_ok());
}

#[test]
fn hidden_head_mode_changes_shapes_but_still_runs() {
    let config = GcnConfig { head_hidden: Some(5), ..small_config() };
    let model = GcnModel::new(config).unwrap();
    let params = model.init_params(20);
    assert!(params.get("head.hidden.w").is_some());
    let graph = busy_graph(10);
    let q = model.q_values(&params, &graph).unwrap();
    assert_eq!(q.dim(), (graph.n_tsc(), ACTIONS));
}
