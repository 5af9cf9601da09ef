use super::*;
use crate::metric_head::ce_loss_value;
use crate::numerics::gradcheck::{central_difference, max_relative_error, DEFAULT_STEP};
use crate::numerics::{softplus, BN_EPS};

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn randomized(kind: EstimatorKind, groups: usize, way: Option<usize>, seed: u64) -> Estimator {
    // Fresh estimators start with a zero head; perturb every trainable
    // tensor so forward checks exercise all of them.
    let mut rng = Rng::new(seed);
    let mut est = Estimator::new(kind, groups, way, &mut rng).unwrap();
    for e in est.params_mut().entries_mut() {
        if e.trainable {
            let (r, c) = e.value.shape();
            let noise = random_matrix(&mut rng, r, c, -0.8, 0.8);
            e.value = e.value.zip_map(&noise, |a, b| a + b);
        } else if e.name.ends_with("running_var") {
            e.value = random_matrix(&mut rng, 1, groups, 0.5, 2.0);
        } else {
            e.value = random_matrix(&mut rng, 1, groups, -0.5, 0.5);
        }
    }
    est
}

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    let rows: Vec<&[f64]> = perm.iter().map(|&i| m.row(i)).collect();
    Matrix::from_rows(&rows).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn relation_of_identical_vectors_is_all_ones() {
    let mut rng = Rng::new(1);
    let q = random_matrix(&mut rng, 1, 8, -2.0, 2.0);
    let other = random_matrix(&mut rng, 1, 8, -2.0, 2.0);
    let protos = Matrix::from_rows(&[other.row(0), q.row(0)]).unwrap();
    let v = relation_values(q.row(0), &protos, 4).unwrap();
    for l in 0..4 {
        assert!((v.0.get(1, l) - 1.0).abs() < 1e-15);
    }
}

#[test]
fn unit_groups_give_sign_agreement() {
    let q = [1.5, -2.0, 0.3];
    let protos = Matrix::from_rows(&[[2.0, 1.0, 0.1], [-0.5, -3.0, -4.0]]).unwrap();
    let v = relation_values(&q, &protos, 3).unwrap();
    assert_eq!(v.0.row(0), &[1.0, -1.0, 1.0]);
    assert_eq!(v.0.row(1), &[-1.0, 1.0, -1.0]);
}

#[test]
fn relation_features_match_per_group_oracle() {
    let mut rng = Rng::new(2);
    let q = random_matrix(&mut rng, 1, 8, -2.0, 2.0);
    let protos = random_matrix(&mut rng, 3, 8, -2.0, 2.0);
    let v = relation_values(q.row(0), &protos, 4).unwrap();
    for j in 0..3 {
        for l in 0..4 {
            let (a, b) = (&q.row(0)[2 * l..2 * l + 2], &protos.row(j)[2 * l..2 * l + 2]);
            let dot = a[0] * b[0] + a[1] * b[1];
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((v.0.get(j, l) - dot / (na * nb)).abs() < 1e-12);
        }
    }
}

#[test]
fn relation_errors() {
    let protos = Matrix::from_rows(&[[1.0, 1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(
        relation_values(&[1.0, 1.0, 1.0, 1.0], &protos, 2).unwrap_err(),
        NumericsError::ZeroNorm {
            row: 0,
            group: Some(1)
        }
    );
    assert!(matches!(
        relation_values(&[1.0, 1.0, 1.0, 1.0], &protos, 3),
        Err(NumericsError::Precondition(_))
    ));
}

#[test]
fn fresh_estimators_start_at_ln2() {
    let mut rng = Rng::new(3);
    let v = random_matrix(&mut rng, 5, 4, -1.0, 1.0);
    for (kind, way) in [
        (EstimatorKind::Graph, None),
        (EstimatorKind::Conv, None),
        (EstimatorKind::Fc, Some(5)),
    ] {
        let est = Estimator::new(kind, 4, way, &mut rng).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            for s in est.sigma_values(&v, mode).unwrap() {
                assert!((s - 2f64.ln()).abs() < 1e-15, "{kind} {s}");
            }
        }
    }
}

#[test]
fn graph_estimator_is_permutation_equivariant() {
    let est = randomized(EstimatorKind::Graph, 4, None, 4);
    let mut rng = Rng::new(5);
    let v = random_matrix(&mut rng, 4, 4, -1.0, 1.0);
    for mode in [Mode::Train, Mode::Eval] {
        let base = est.sigma_values(&v, mode).unwrap();
        for perm in permutations(4) {
            let got = est.sigma_values(&permute_rows(&v, &perm), mode).unwrap();
            for (k, &src) in perm.iter().enumerate() {
                assert!((got[k] - base[src]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn graph_train_mode_needs_two_nodes() {
    let est = randomized(EstimatorKind::Graph, 4, None, 6);
    let v = Matrix::filled(1, 4, 0.3);
    assert!(matches!(
        est.sigma_values(&v, Mode::Train),
        Err(NumericsError::Precondition(_))
    ));
    assert_eq!(est.sigma_values(&v, Mode::Eval).unwrap().len(), 1);
}

/// Scalar transcript of the graph estimator for N = 2, L = 2.
fn graph_oracle(v: [[f64; 2]; 2], p: &crate::numerics::ParamSet, slope: f64) -> [f64; 2] {
    let w = |name: &str, r: usize, c: usize| p.get(name).unwrap().get(r, c);
    let lin = |x: [f64; 2], name: &str| -> [f64; 2] {
        [
            x[0] * w(name, 0, 0) + x[1] * w(name, 1, 0),
            x[0] * w(name, 0, 1) + x[1] * w(name, 1, 1),
        ]
    };
    let affine = |x: [f64; 2], name: &str| -> [f64; 2] {
        let y = lin(x, &format!("{name}.weight"));
        [y[0] + w(&format!("{name}.bias"), 0, 0), y[1] + w(&format!("{name}.bias"), 0, 1)]
    };
    let leaky = |x: f64| if x >= 0.0 { x } else { slope * x };
    let bn_block = |rows: [[f64; 2]; 2], name: &str| -> [[f64; 2]; 2] {
        let a = lin(rows[0], &format!("{name}.weight"));
        let b = lin(rows[1], &format!("{name}.weight"));
        let mut out = [[0.0; 2]; 2];
        for c in 0..2 {
            let mean = (a[c] + b[c]) / 2.0;
            let var = ((a[c] - mean).powi(2) + (b[c] - mean).powi(2)) / 2.0;
            let inv = 1.0 / (var + BN_EPS).sqrt();
            let g = w(&format!("{name}.bn.gamma"), 0, c);
            let be = w(&format!("{name}.bn.beta"), 0, c);
            out[0][c] = leaky((a[c] - mean) * inv * g + be);
            out[1][c] = leaky((b[c] - mean) * inv * g + be);
        }
        out
    };
    let e1 = [affine(v[0], "phi1"), affine(v[1], "phi1")];
    let e2 = [affine(v[0], "phi2"), affine(v[1], "phi2")];
    let mut g = [[0.0; 2]; 2];
    for j in 0..2 {
        let a: Vec<f64> = (0..2)
            .map(|k| e1[j][0] * e2[k][0] + e1[j][1] * e2[k][1])
            .collect();
        let m = a[0].max(a[1]);
        let z = (a[0] - m).exp() + (a[1] - m).exp();
        g[j] = [(a[0] - m).exp() / z, (a[1] - m).exp() / z];
    }
    let gv = [
        [
            g[0][0] * v[0][0] + g[0][1] * v[1][0],
            g[0][0] * v[0][1] + g[0][1] * v[1][1],
        ],
        [
            g[1][0] * v[0][0] + g[1][1] * v[1][0],
            g[1][0] * v[0][1] + g[1][1] * v[1][1],
        ],
    ];
    let y = [lin(gv[0], "wv.weight"), lin(gv[1], "wv.weight")];
    let h = bn_block(bn_block(y, "wy1"), "wy2");
    let updated = [
        [v[0][0] + h[0][0], v[0][1] + h[0][1]],
        [v[1][0] + h[1][0], v[1][1] + h[1][1]],
    ];
    let u = bn_block(updated, "wu1");
    let head = |x: [f64; 2]| {
        softplus(x[0] * w("wu2.weight", 0, 0) + x[1] * w("wu2.weight", 1, 0) + w("wu2.bias", 0, 0))
    };
    [head(u[0]), head(u[1])]
}

#[test]
fn graph_forward_matches_scalar_transcript() {
    let mut est = Estimator::new(EstimatorKind::Graph, 2, None, &mut Rng::new(0)).unwrap();
    let hand: &[(&str, [f64; 4])] = &[
        ("phi1.weight", [0.5, -0.3, 0.8, 0.1]),
        ("phi2.weight", [-0.2, 0.7, 0.4, 0.9]),
        ("wv.weight", [1.1, -0.4, 0.2, 0.6]),
        ("wy1.weight", [0.3, 0.9, -0.7, 0.5]),
        ("wy2.weight", [-0.6, 0.2, 0.8, -0.1]),
        ("wu1.weight", [0.4, -0.8, 0.3, 1.2]),
    ];
    for (name, vals) in hand {
        *est.params_mut().get_mut(name).unwrap() = Matrix::new(2, 2, vals.to_vec()).unwrap();
    }
    *est.params_mut().get_mut("phi1.bias").unwrap() = Matrix::row_vector(&[0.1, -0.2]).unwrap();
    *est.params_mut().get_mut("phi2.bias").unwrap() = Matrix::row_vector(&[0.05, 0.3]).unwrap();
    *est.params_mut().get_mut("wy1.bn.gamma").unwrap() = Matrix::row_vector(&[1.3, 0.7]).unwrap();
    *est.params_mut().get_mut("wu1.bn.beta").unwrap() = Matrix::row_vector(&[0.2, -0.4]).unwrap();
    *est.params_mut().get_mut("wu2.weight").unwrap() = Matrix::col_vector(&[0.9, -1.4]).unwrap();
    *est.params_mut().get_mut("wu2.bias").unwrap() = Matrix::scalar(0.25);
    let v = [[0.6, -0.2], [0.1, 0.9]];
    let got = est
        .sigma_values(&Matrix::from_rows(&v).unwrap(), Mode::Train)
        .unwrap();
    let want = graph_oracle(v, est.params(), crate::numerics::DEFAULT_LEAKY_SLOPE);
    for j in 0..2 {
        assert!((got[j] - want[j]).abs() < 1e-12, "{got:?} vs {want:?}");
    }
}

#[test]
fn conv_estimator_is_row_wise() {
    let est = randomized(EstimatorKind::Conv, 4, None, 7);
    let mut rng = Rng::new(8);
    let row = random_matrix(&mut rng, 1, 4, -1.0, 1.0);
    let v = Matrix::from_rows(&[row.row(0), row.row(0), row.row(0)]).unwrap();
    let s = est.sigma_values(&v, Mode::Train).unwrap();
    assert_eq!(s[0], s[1]);
    assert_eq!(s[1], s[2]);
    let v = random_matrix(&mut rng, 4, 4, -1.0, 1.0);
    let base = est.sigma_values(&v, Mode::Train).unwrap();
    for perm in permutations(4) {
        let got = est.sigma_values(&permute_rows(&v, &perm), Mode::Train).unwrap();
        for (k, &src) in perm.iter().enumerate() {
            assert_eq!(got[k], base[src]);
        }
    }
    let single = est.sigma_values(&Matrix::from_rows(&[v.row(2)]).unwrap(), Mode::Train).unwrap();
    assert_eq!(single[0], base[2]);
}

#[test]
fn fc_estimator_small_case_and_way_binding() {
    let mut est = Estimator::new(EstimatorKind::Fc, 2, Some(2), &mut Rng::new(0)).unwrap();
    *est.params_mut().get_mut("f1.weight").unwrap() =
        Matrix::from_rows(&[[0.5, -0.1], [0.2, 0.3], [-0.4, 0.6], [0.7, 0.2]]).unwrap();
    *est.params_mut().get_mut("f1.bias").unwrap() = Matrix::row_vector(&[0.1, -0.5]).unwrap();
    *est.params_mut().get_mut("f2.weight").unwrap() =
        Matrix::from_rows(&[[1.0, -2.0], [0.5, 0.25]]).unwrap();
    *est.params_mut().get_mut("f2.bias").unwrap() = Matrix::row_vector(&[0.0, 0.3]).unwrap();
    let v = [[0.2, -0.6], [0.9, 0.4]];
    let flat = [v[0][0], v[0][1], v[1][0], v[1][1]];
    let f1 = est.params().get("f1.weight").unwrap().clone();
    let leaky = |x: f64| if x >= 0.0 { x } else { 0.01 * x };
    let h: Vec<f64> = (0..2)
        .map(|c| leaky((0..4).map(|k| flat[k] * f1.get(k, c)).sum::<f64>() + [0.1, -0.5][c]))
        .collect();
    let want = [
        softplus(h[0] * 1.0 + h[1] * 0.5),
        softplus(h[0] * -2.0 + h[1] * 0.25 + 0.3),
    ];
    let got = est.sigma_values(&Matrix::from_rows(&v).unwrap(), Mode::Train).unwrap();
    for j in 0..2 {
        assert!((got[j] - want[j]).abs() < 1e-12);
    }
    assert_eq!(got, est.sigma_values(&Matrix::from_rows(&v).unwrap(), Mode::Train).unwrap());
    assert!(matches!(
        est.sigma_values(&Matrix::zeros(3, 2), Mode::Train),
        Err(NumericsError::Shape { .. })
    ));
    assert!(Estimator::new(EstimatorKind::Fc, 2, None, &mut Rng::new(0)).is_err());
}

#[test]
fn one_graph_estimator_serves_any_way() {
    let est = randomized(EstimatorKind::Graph, 32, None, 9);
    let shapes: Vec<_> = est.params().entries().iter().map(|e| e.value.shape()).collect();
    let mut rng = Rng::new(10);
    for n in [2, 5, 20] {
        let v = random_matrix(&mut rng, n, 32, -1.0, 1.0);
        assert_eq!(est.sigma_values(&v, Mode::Train).unwrap().len(), n);
    }
    assert_eq!(est.sigma_values(&Matrix::filled(1, 32, 0.1), Mode::Eval).unwrap().len(), 1);
    let after: Vec<_> = est.params().entries().iter().map(|e| e.value.shape()).collect();
    assert_eq!(shapes, after);
}

#[test]
fn sampling_degenerate_cases() {
    let belief = SimilarityBelief {
        mu: vec![1.0, -2.0, 0.5],
        sigma: vec![0.0; 3],
    };
    let eps = draw_noise(7, 3, NoiseMode::PerPair, &mut Rng::new(1));
    let s = sample_values(&belief, &eps).unwrap();
    for t in 0..7 {
        assert_eq!(s.row(t), &belief.mu[..]);
    }
    let belief = SimilarityBelief {
        mu: vec![1.0, -2.0, 0.5],
        sigma: vec![0.5, 1.0, 2.0],
    };
    let s = sample_values(&belief, &Matrix::filled(4, 3, 1.0)).unwrap();
    for t in 0..4 {
        assert_eq!(s.row(t), &[1.5, -1.0, 2.5]);
    }
}

#[test]
fn sample_mean_converges_to_mu() {
    let belief = SimilarityBelief {
        mu: vec![0.3, -1.2, 4.0],
        sigma: vec![0.5, 2.0, 1.0],
    };
    let t = 100_000;
    let eps = draw_noise(t, 3, NoiseMode::PerPair, &mut Rng::new(2));
    let s = sample_values(&belief, &eps).unwrap();
    for j in 0..3 {
        let mean: f64 = (0..t).map(|r| s.get(r, j)).sum::<f64>() / t as f64;
        let bound = 3.0 * belief.sigma[j] / (t as f64).sqrt();
        assert!((mean - belief.mu[j]).abs() < bound, "pair {j}: {mean}");
    }
}

#[test]
fn shared_noise_is_constant_across_pairs() {
    let eps = draw_noise(5, 4, NoiseMode::Shared, &mut Rng::new(3));
    for t in 0..5 {
        assert!(eps.row(t).iter().all(|&e| e == eps.get(t, 0)));
    }
}

#[test]
fn mc_loss_single_sample_is_cross_entropy() {
    let mut rng = Rng::new(4);
    for _ in 0..20 {
        let s = random_matrix(&mut rng, 1, 5, -3.0, 3.0);
        for k in 0..5 {
            let diff = mc_loss_value(&s, k).unwrap() - ce_loss_value(s.row(0), k).unwrap();
            assert!(diff.abs() < 1e-12);
        }
    }
}

#[test]
fn mc_loss_hand_case() {
    let s = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
    let e = std::f64::consts::E;
    let oracle = -((0.5 + e / (1.0 + e) + 1.0 / (1.0 + e)) / 3.0).ln();
    assert!((mc_loss_value(&s, 0).unwrap() - oracle).abs() < 1e-15);
    assert!(mc_loss_value(&s, 2).is_err());
}

#[test]
fn zero_sigma_reduces_to_cross_entropy_for_any_t() {
    let mut rng = Rng::new(5);
    for t in [1, 10, 100] {
        let mu = random_matrix(&mut rng, 1, 5, -10.0, 10.0);
        let belief = SimilarityBelief {
            mu: mu.row(0).to_vec(),
            sigma: vec![0.0; 5],
        };
        let eps = draw_noise(t, 5, NoiseMode::PerPair, &mut rng);
        let s = sample_values(&belief, &eps).unwrap();
        for k in 0..5 {
            let diff = mc_loss_value(&s, k).unwrap() - ce_loss_value(mu.row(0), k).unwrap();
            assert!(diff.abs() < 1e-12);
        }
    }
}

#[test]
fn expected_loss_grows_with_uniform_noise() {
    let mu = [2.0, 1.0, 0.5, -0.5, 0.0];
    let levels = [0.0, 0.5, 1.0, 2.0, 4.0];
    let mut means = [0.0; 5];
    for seed in 0..1000 {
        let eps = draw_noise(DEFAULT_MC_SAMPLES, 5, NoiseMode::PerPair, &mut Rng::new(seed));
        for (i, &sigma) in levels.iter().enumerate() {
            let belief = SimilarityBelief {
                mu: mu.to_vec(),
                sigma: vec![sigma; 5],
            };
            let s = sample_values(&belief, &eps).unwrap();
            means[i] += mc_loss_value(&s, 0).unwrap() / 1000.0;
        }
    }
    for w in means.windows(2) {
        assert!(w[1] > w[0], "{means:?}");
    }
}

/// Every trainable estimator tensor, the query, the prototypes and the
/// log-temperature against central differences with frozen noise.
fn full_pipeline_gradcheck(kind: EstimatorKind, way: usize, seed: u64) {
    let groups = 4;
    let dim = 8;
    let est = randomized(kind, groups, Some(way), seed);
    let mut rng = Rng::new(seed + 100);
    let query = random_matrix(&mut rng, 1, dim, -2.0, 2.0);
    let protos = random_matrix(&mut rng, way, dim, -2.0, 2.0);
    let log_tau = Matrix::scalar(rng.uniform_range(0.0, 1.5));
    let eps = draw_noise(5, way, NoiseMode::PerPair, &mut rng);
    let label = 1;

    // inputs[0..P] are estimator tensors, then query, protos, log_tau.
    let mut inputs: Vec<Matrix> = est.params().entries().iter().map(|e| e.value.clone()).collect();
    let n_params = inputs.len();
    inputs.extend([query, protos, log_tau]);

    let build = |vals: &[Matrix], tape: &mut Tape| -> Result<(Var, Vec<Var>), NumericsError> {
        let mut e = est.clone();
        for (entry, v) in e.params_mut().entries_mut().iter_mut().zip(vals) {
            entry.value = v.clone();
        }
        let vars: Vec<Var> = e
            .params()
            .entries()
            .iter()
            .map(|entry| {
                if entry.trainable {
                    tape.leaf(entry.value.clone())
                } else {
                    tape.constant(entry.value.clone())
                }
            })
            .collect();
        let q = tape.leaf(vals[n_params].clone());
        let p = tape.leaf(vals[n_params + 1].clone());
        let rho = tape.leaf(vals[n_params + 2].clone());
        let tau = tape.exp(rho)?;
        let out = uncertain_query_loss(
            tape,
            SigmaSource::Estimator {
                estimator: &e,
                vars: &vars,
                mode: Mode::Train,
            },
            q,
            p,
            tau,
            label,
            &eps,
        )?;
        let mut all = vars;
        all.extend([q, p, rho]);
        Ok((out.loss, all))
    };

    let mut tape = Tape::new();
    let (loss, vars) = build(&inputs, &mut tape).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (i, var) in vars.iter().enumerate() {
        if i < n_params && !est.params().entries()[i].trainable {
            continue;
        }
        let numeric = central_difference(
            |probe| {
                let mut vals = inputs.clone();
                vals[i] = probe.clone();
                let mut t = Tape::new();
                let (l, _) = build(&vals, &mut t)?;
                Ok::<f64, NumericsError>(t.scalar(l))
            },
            &inputs[i],
            DEFAULT_STEP,
        )
        .unwrap();
        let err = max_relative_error(&grads.wrt(*var), &numeric);
        assert!(err < 1e-5, "{kind} input {i}: {err:e}");
    }
}

#[test]
fn graph_pipeline_gradients() {
    full_pipeline_gradcheck(EstimatorKind::Graph, 5, 11);
}

#[test]
fn conv_pipeline_gradients() {
    full_pipeline_gradcheck(EstimatorKind::Conv, 4, 12);
}

#[test]
fn fc_pipeline_gradients() {
    full_pipeline_gradcheck(EstimatorKind::Fc, 3, 13);
}

#[test]
fn checkpoint_round_trip() {
    for (kind, way) in [
        (EstimatorKind::Graph, None),
        (EstimatorKind::Conv, None),
        (EstimatorKind::Fc, Some(3)),
    ] {
        let est = randomized(kind, 4, way.or(Some(3)), 14);
        let text = est.to_checkpoint();
        let back = Estimator::from_checkpoint(&text).unwrap();
        assert_eq!(back, est);
        assert_eq!(back.to_checkpoint(), text);
    }
    let text = randomized(EstimatorKind::Conv, 4, None, 1).to_checkpoint();
    let broken = text.replace("meta groups 4", "meta groups 5");
    assert!(Estimator::from_checkpoint(&broken).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn spreads_are_non_negative(seed in any::<u64>(), n in 2usize..7) {
            let mut rng = Rng::new(seed);
            let v = random_matrix(&mut rng, n, 4, -1.0, 1.0);
            for (kind, way) in [(EstimatorKind::Graph, None), (EstimatorKind::Conv, None), (EstimatorKind::Fc, Some(n))] {
                let est = randomized(kind, 4, way, seed ^ 1);
                for s in est.sigma_values(&v, Mode::Train).unwrap() {
                    prop_assert!(s >= 0.0);
                }
            }
        }
    }
}
