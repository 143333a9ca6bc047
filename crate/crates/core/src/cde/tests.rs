use std::sync::Arc;

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::interp::interpolate_rows;
use crate::tensorops::{check_gradients, seeded_normal, Bound, ParamStore, Tape};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rows_of(a: &DenseArray) -> Vec<Vec<f64>> {
    (0..a.rows()).map(|r| a.row(r).to_vec()).collect()
}

#[test]
fn swiglu_zero_params_and_zero_input() {
    let p = VectorFieldParams {
        gate: DenseArray::zeros(3, 4),
        value: DenseArray::zeros(3, 4),
        output: DenseArray::zeros(4, 1),
    };
    assert_eq!(swiglu_field(&[0.3], Some(&[1.0]), &[2.0], &p).unwrap(), vec![0.0]);
    let eye = VectorFieldParams {
        gate: DenseArray::filled(3, 4, 1.0),
        value: DenseArray::filled(3, 4, 1.0),
        output: DenseArray::filled(4, 1, 1.0),
    };
    assert_eq!(swiglu_field(&[0.0], Some(&[0.0]), &[0.0], &eye).unwrap(), vec![0.0]);
}

#[test]
fn swiglu_hand_evaluated() {
    // u = (1, -1) split as tau = [1], state = [-1]
    let p = VectorFieldParams {
        gate: DenseArray::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap(),
        value: DenseArray::from_rows(&[vec![1.0, 3.0], vec![-2.0, 1.0]]).unwrap(),
        output: DenseArray::from_rows(&[vec![1.5], vec![-0.5]]).unwrap(),
    };
    // gate pre-activations: 0.5 - 2 = -1.5 and -1 - 0.25 = -1.25
    // value: 1 + 2 = 3 and 3 - 1 = 2
    let h0 = -1.5 * sig(-1.5) * 3.0;
    let h1 = -1.25 * sig(-1.25) * 2.0;
    let expected = 1.5 * h0 - 0.5 * h1;
    let got = swiglu_field(&[1.0], None, &[-1.0], &p).unwrap();
    assert_abs_diff_eq!(got[0], expected, epsilon = 1e-14);
}

#[test]
fn swiglu_rejects_bad_dimensions() {
    let p = VectorFieldParams {
        gate: DenseArray::zeros(3, 2),
        value: DenseArray::zeros(3, 2),
        output: DenseArray::zeros(2, 1),
    };
    assert!(matches!(
        swiglu_field(&[0.0], None, &[0.0], &p),
        Err(UfoError::InvalidArgument(_))
    ));
}

#[test]
fn integrate_constant_dynamics() {
    let tr = integrate_patch(|_, z| vec![0.0; z.len()], &[1.0, -2.0], &[0.0, 0.3, 1.1], 2).unwrap();
    assert_eq!(tr.states.len(), 3);
    for s in &tr.states {
        assert_eq!(s, &vec![1.0, -2.0]);
    }
}

#[test]
fn integrate_exponential() {
    let tr = integrate_patch(|_, z| vec![z[0]], &[1.0], &[0.0, 1.0], 64).unwrap();
    assert_abs_diff_eq!(tr.states[1][0], std::f64::consts::E, epsilon = 1e-6);
}

#[test]
fn integrate_linear_relaxation() {
    let tr = integrate_patch(|_, z| vec![-z[0] + 1.0], &[0.0], &[0.0, 1.0], 64).unwrap();
    assert_abs_diff_eq!(tr.states[1][0], 1.0 - (-1.0f64).exp(), epsilon = 1e-6);
}

#[test]
fn integrate_reports_divergence_time() {
    let err = integrate_patch(
        |t, z| if t > 0.5 { vec![f64::NAN] } else { vec![z[0]] },
        &[1.0],
        &[0.0, 1.0],
        4,
    )
    .unwrap_err();
    match err {
        UfoError::IntegrationDiverged { time } => assert_abs_diff_eq!(time, 0.75, epsilon = 1e-12),
        other => panic!("unexpected {other:?}"),
    }
    assert!(integrate_patch(|_, z| z.to_vec(), &[1.0], &[0.0, 1.0], 0).is_err());
}

#[test]
fn grid_construction() {
    assert!(matches!(LevelGrid::new(1, 0, vec![0.0]), Err(UfoError::InvalidGrid(_))));
    assert!(LevelGrid::new(1, 2, vec![0.0, 1.0, 2.0]).is_err());
    assert!(LevelGrid::new(1, 2, vec![0.0, 1.0, 1.0, 2.0]).is_err());
    let g = LevelGrid::new(1, 2, vec![0.0, 1.0, 2.5, 3.0]).unwrap();
    assert_eq!(g.coarse_times(), &[0.5, 1.5]);
    assert_eq!(g.patch_bounds(), vec![(0.0, 1.0), (2.5, 3.0)]);
    assert_eq!(g.patch(1), &[2.5, 3.0]);
    assert!(g.coarse_times().windows(2).all(|w| w[1] > w[0]));
}

struct Fixture {
    store: ParamStore,
    down: NcdeDownParams,
    up: NcdeUpParams,
    prev: LevelSequence,
    grid: LevelGrid,
}

const D: usize = 3;
const C: usize = 2;

fn fixture(seed: u64, patches: usize, w: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let down = NcdeDownParams::init(&mut store, "down", D, D, C, 4, &mut rng);
    let up = NcdeUpParams::init(&mut store, "up", D, C, 4, &mut rng);
    let mut times = Vec::new();
    let mut t = 0.0;
    for _ in 0..patches * w {
        t += rng.gen_range(0.3..1.7);
        times.push(t);
    }
    let n = times.len();
    let values = seeded_normal(n, D, "cde-fixture", seed);
    let covariates = seeded_normal(n, C, "cde-fixture-cov", seed).map(f64::tanh);
    let grid = LevelGrid::new(1, w, times.clone()).unwrap();
    Fixture {
        store,
        down,
        up,
        prev: LevelSequence::new(times, values, covariates).unwrap(),
        grid,
    }
}

#[test]
fn downsample_zero_field_keeps_initial_state() {
    let mut f = fixture(1, 3, 4);
    for id in [f.down.field.output] {
        *f.store.get_mut(id) = DenseArray::zeros(4, D);
    }
    let solver = SolverConfig::default();
    let out = ncde_downsample(&f.prev, &f.grid, &f.store, &f.down, &solver).unwrap();
    assert_eq!(out.times, f.grid.coarse_times());
    let wt = f.store.get(f.down.init_weight);
    let b = f.store.get(f.down.init_bias);
    for p in 0..3 {
        let times = f.grid.patch(p);
        let rows: Vec<Vec<f64>> = (0..4).map(|k| f.prev.values.row(p * 4 + k).to_vec()).collect();
        let x0 = &interpolate_rows(times, &rows, &[times[0]], &solver.kernel).unwrap()[0];
        for j in 0..D {
            let pre: f64 = (0..D).map(|i| x0[i] * wt.get(i, j)).sum::<f64>() + b.get(0, j);
            assert_abs_diff_eq!(out.values.get(p, j), pre * sig(pre), epsilon = 1e-12);
        }
    }
}

/// Per-patch scalar-loop oracle built from `integrate_patch` and the
/// reference smoother.
fn downsample_oracle(f: &Fixture, solver: &SolverConfig) -> Vec<Vec<f64>> {
    let field = f.down.field.values(&f.store);
    let wt = f.store.get(f.down.init_weight);
    let b = f.store.get(f.down.init_bias);
    let w = f.grid.patch_len();
    (0..f.grid.num_patches())
        .map(|p| {
            let times = f.grid.patch(p);
            let rows: Vec<Vec<f64>> = (0..w).map(|k| f.prev.values.row(p * w + k).to_vec()).collect();
            let cov: Vec<Vec<f64>> = (0..w).map(|k| f.prev.covariates.row(p * w + k).to_vec()).collect();
            let x0 = &interpolate_rows(times, &rows, &[times[0]], &solver.kernel).unwrap()[0];
            let z0: Vec<f64> = (0..D)
                .map(|j| {
                    let pre: f64 = (0..D).map(|i| x0[i] * wt.get(i, j)).sum::<f64>() + b.get(0, j);
                    pre * sig(pre)
                })
                .collect();
            let tr = integrate_patch(
                |t, z| {
                    let xh = &interpolate_rows(times, &rows, &[t], &solver.kernel).unwrap()[0];
                    let tau = &interpolate_rows(times, &cov, &[t], &solver.kernel).unwrap()[0];
                    swiglu_field(tau, Some(xh), z, &field).unwrap()
                },
                &z0,
                times,
                solver.steps_per_interval,
            )
            .unwrap();
            tr.states.last().unwrap().clone()
        })
        .collect()
}

#[test]
fn batched_downsample_matches_scalar_oracle() {
    let f = fixture(2, 4, 3);
    let solver = SolverConfig {
        steps_per_interval: 3,
        ..SolverConfig::default()
    };
    let out = ncde_downsample(&f.prev, &f.grid, &f.store, &f.down, &solver).unwrap();
    let oracle = downsample_oracle(&f, &solver);
    for (p, row) in oracle.iter().enumerate() {
        for j in 0..D {
            assert_abs_diff_eq!(out.values.get(p, j), row[j], epsilon = 1e-12);
        }
    }
}

#[test]
fn batched_downsample_matches_scalar_ode_example() {
    // dz/dt = -z + x̂ with x̂ ≡ 1 on [0, 1] is the smooth special case of the
    // batched solver reduced to its scalar loop.
    let tr = integrate_patch(|_, z| vec![-z[0] + 1.0], &[0.0], &[0.0, 0.5, 1.0], 2).unwrap();
    let batched = {
        let mut tape = Tape::new();
        let set = PatchSet::new(3, vec![0.0, 0.5, 1.0], DenseArray::zeros(3, 1)).unwrap();
        let z0 = tape.constant(DenseArray::zeros(1, 1));
        let states = rk4_patches(&mut tape, z0, &set, 2, |t, z, _| {
            let neg = t.scale(z, -1.0);
            Ok(t.add_scalar(neg, 1.0))
        })
        .unwrap();
        tape.value(*states.last().unwrap()).get(0, 0)
    };
    assert_eq!(batched, tr.states[2][0]);
    assert_abs_diff_eq!(batched, 1.0 - (-1.0f64).exp(), epsilon = 1e-4);
}

#[test]
fn shifted_identical_patches_agree() {
    let mut f = fixture(3, 2, 4);
    let first: Vec<f64> = f.grid.patch(0).to_vec();
    let shift = first[3] + 2.0 - first[0];
    let times: Vec<f64> = first.iter().copied().chain(first.iter().map(|t| t + shift)).collect();
    for k in 0..4 {
        let r = f.prev.values.row(k).to_vec();
        f.prev.values.row_mut(4 + k).copy_from_slice(&r);
        let c = f.prev.covariates.row(k).to_vec();
        f.prev.covariates.row_mut(4 + k).copy_from_slice(&c);
    }
    f.prev.times = times.clone();
    f.grid = LevelGrid::new(1, 4, times).unwrap();
    let out = ncde_downsample(&f.prev, &f.grid, &f.store, &f.down, &SolverConfig::default()).unwrap();
    for j in 0..D {
        assert_abs_diff_eq!(out.values.get(0, j), out.values.get(1, j), epsilon = 1e-12);
    }
}

#[test]
fn downsample_is_deterministic_and_patch_order_free() {
    let f = fixture(4, 5, 3);
    let solver = SolverConfig::default();
    let a = ncde_downsample(&f.prev, &f.grid, &f.store, &f.down, &solver).unwrap();
    let b = ncde_downsample(&f.prev, &f.grid, &f.store, &f.down, &solver).unwrap();
    assert_eq!(a, b);

    // Reverse the patch order by integrating the patches through a PatchSet
    // whose rows are permuted.
    let order = [4usize, 2, 0, 3, 1];
    let w = 3;
    let mut times = Vec::new();
    let mut vals = Vec::new();
    let mut covs = Vec::new();
    for &p in &order {
        for k in 0..w {
            times.push(f.prev.times[p * w + k]);
            vals.extend_from_slice(f.prev.values.row(p * w + k));
            covs.extend_from_slice(f.prev.covariates.row(p * w + k));
        }
    }
    let set = PatchSet::new(w, times, DenseArray::from_vec(15, C, covs).unwrap()).unwrap();
    let mut tape = Tape::new();
    let bound = f.store.bind_frozen(&mut tape);
    let x = tape.constant(DenseArray::from_vec(15, D, vals).unwrap());
    let out = downsample_tape(&mut tape, x, &set, &f.down, &bound, &solver).unwrap();
    let permuted = tape.value(out);
    for (i, &p) in order.iter().enumerate() {
        assert_eq!(permuted.row(i), a.values.row(p));
    }
}

#[test]
fn downsample_output_shape_contract() {
    let f = fixture(5, 6, 4);
    let out = ncde_downsample(&f.prev, &f.grid, &f.store, &f.down, &SolverConfig::default()).unwrap();
    assert_eq!(out.len() * 4, f.prev.len());
    assert_eq!(out.covariates.rows(), out.len());
    assert_eq!(out.covariates.row(0), f.prev.covariates.row(3));
    let bad = LevelSequence::new(
        f.prev.times[..20].to_vec(),
        DenseArray::zeros(20, D),
        DenseArray::zeros(20, C),
    )
    .unwrap();
    assert!(ncde_downsample(&bad, &f.grid, &f.store, &f.down, &SolverConfig::default()).is_err());
}

#[test]
fn upsample_zero_field_broadcasts() {
    let mut f = fixture(6, 3, 4);
    *f.store.get_mut(f.up.field.output) = DenseArray::zeros(4, D);
    let coarse = LevelSequence::new(
        f.grid.coarse_times().to_vec(),
        seeded_normal(3, D, "seeds", 6),
        DenseArray::zeros(3, C),
    )
    .unwrap();
    let out = ncde_upsample(&coarse, &f.grid, &f.prev.covariates, &f.store, &f.up, &SolverConfig::default())
        .unwrap();
    assert_eq!(out.len(), 12);
    assert_eq!(out.times, f.grid.fine_times());
    for p in 0..3 {
        for k in 0..4 {
            assert_eq!(out.values.row(p * 4 + k), coarse.values.row(p));
        }
    }
}

#[test]
fn upsample_unit_slope_is_linear_in_time() {
    // With λ = 0 and a constant covariate, τ̂ ≡ 1 exactly; the field then
    // reduces to the constant swish(1)·1·(1/swish(1)) = 1.
    let mut store = ParamStore::new();
    let gate = store.add("gate", DenseArray::from_rows(&[vec![1.0], vec![0.0]]).unwrap());
    let value = store.add("value", DenseArray::from_rows(&[vec![1.0], vec![0.0]]).unwrap());
    let output = store.add("output", DenseArray::scalar(1.0 / (1.0 * sig(1.0))));
    let up = NcdeUpParams {
        field: FieldIds {
            gate,
            value,
            output,
        },
    };
    let solver = SolverConfig {
        steps_per_interval: 2,
        kernel: crate::interp::KernelConfig {
            lambda: 0.0,
            kernel_scale: 1.0,
        },
    };
    let grid = LevelGrid::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
    let coarse = LevelSequence::new(vec![1.0 / 3.0], DenseArray::zeros(1, 1), DenseArray::zeros(1, 1)).unwrap();
    let out = ncde_upsample(&coarse, &grid, &DenseArray::filled(3, 1, 1.0), &store, &up, &solver).unwrap();
    for (k, want) in [0.0, 0.5, 1.0].iter().enumerate() {
        assert_abs_diff_eq!(out.values.get(k, 0), *want, epsilon = 1e-12);
    }
}

#[test]
fn upsample_length_one_patch_is_identity() {
    let f = fixture(7, 2, 1);
    let grid = LevelGrid::new(1, 1, f.prev.times.clone()).unwrap();
    let coarse = LevelSequence::new(grid.coarse_times().to_vec(), f.prev.values.clone(), f.prev.covariates.clone())
        .unwrap();
    let out = ncde_upsample(&coarse, &grid, &f.prev.covariates, &f.store, &f.up, &SolverConfig::default()).unwrap();
    assert_eq!(out.values, coarse.values);
    let short = LevelSequence::new(vec![0.0], DenseArray::zeros(1, D), DenseArray::zeros(1, C)).unwrap();
    assert!(matches!(
        ncde_upsample(&short, &grid, &f.prev.covariates, &f.store, &f.up, &SolverConfig::default()),
        Err(UfoError::InvalidArgument(_))
    ));
}

#[test]
fn upsample_matches_scalar_oracle() {
    let f = fixture(8, 3, 4);
    let solver = SolverConfig::default();
    let seeds = seeded_normal(3, D, "seeds", 8);
    let coarse = LevelSequence::new(f.grid.coarse_times().to_vec(), seeds.clone(), DenseArray::zeros(3, C)).unwrap();
    let out = ncde_upsample(&coarse, &f.grid, &f.prev.covariates, &f.store, &f.up, &solver).unwrap();
    let field = f.up.field.values(&f.store);
    for p in 0..3 {
        let times = f.grid.patch(p);
        let cov: Vec<Vec<f64>> = (0..4).map(|k| f.prev.covariates.row(p * 4 + k).to_vec()).collect();
        let tr = integrate_patch(
            |t, z| {
                let tau = &interpolate_rows(times, &cov, &[t], &solver.kernel).unwrap()[0];
                swiglu_field(tau, None, z, &field).unwrap()
            },
            seeds.row(p),
            times,
            solver.steps_per_interval,
        )
        .unwrap();
        for (k, s) in tr.states.iter().enumerate() {
            for j in 0..D {
                assert_abs_diff_eq!(out.values.get(p * 4 + k, j), s[j], epsilon = 1e-12);
            }
        }
    }
}

fn weights(n: usize, seed: u64) -> Arc<Vec<f64>> {
    Arc::new(seeded_normal(1, n, "loss-weights", seed).into_vec())
}

#[test]
fn downsample_gradients_match_finite_differences() {
    let f = fixture(9, 2, 3);
    let set = PatchSet::from_grid(&f.grid, &f.prev.covariates).unwrap();
    let solver = SolverConfig::default();
    let mut inputs = f.store.values().to_vec();
    inputs.push(f.prev.values.clone());
    let n = f.store.len();
    let lw = weights(2 * D, 9);
    let report = check_gradients(&inputs, 1e-4, |t, v| {
        let bound = Bound::from_vars(v[..n].to_vec());
        let out = downsample_tape(t, v[n], &set, &f.down, &bound, &solver)?;
        Ok(t.dot_const(out, lw.clone()))
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

#[test]
fn upsample_gradients_match_finite_differences() {
    let f = fixture(10, 2, 3);
    let set = PatchSet::from_grid(&f.grid, &f.prev.covariates).unwrap();
    let solver = SolverConfig::default();
    let mut inputs = f.store.values().to_vec();
    inputs.push(seeded_normal(2, D, "seeds", 10));
    let n = f.store.len();
    let lw = weights(6 * D, 10);
    let report = check_gradients(&inputs, 1e-4, |t, v| {
        let bound = Bound::from_vars(v[..n].to_vec());
        let out = upsample_tape(t, v[n], &set, &f.up, &bound, &solver)?;
        Ok(t.dot_const(out, lw.clone()))
    })
    .unwrap();
    assert!(report.passes(1e-3), "{report:?}");
}

fn conv_identity_pair(w: usize, d: usize) -> (ParamStore, ConvDownParams, ConvUpParams) {
    let mut store = ParamStore::new();
    let mut down_w = DenseArray::zeros(w * d, d);
    let mut up_w = DenseArray::zeros(d, w * d);
    for k in 0..w {
        for j in 0..d {
            down_w.set(k * d + j, j, 1.0 / w as f64);
            up_w.set(j, k * d + j, 1.0);
        }
    }
    let down = ConvDownParams {
        weight: store.add("down.weight", down_w),
        bias: store.add("down.bias", DenseArray::zeros(1, d)),
    };
    let up = ConvUpParams {
        weight: store.add("up.weight", up_w),
        bias: store.add("up.bias", DenseArray::zeros(1, d)),
    };
    (store, down, up)
}

#[test]
fn conv_down_averages() {
    let (store, down, _) = conv_identity_pair(2, 1);
    let grid = LevelGrid::new(1, 2, vec![0.0, 1.0]).unwrap();
    let seq = LevelSequence::new(
        vec![0.0, 1.0],
        DenseArray::from_vec(2, 1, vec![1.0, 3.0]).unwrap(),
        DenseArray::zeros(2, 1),
    )
    .unwrap();
    let out = alt_resample(
        AltKind::Conv,
        AltDirection::Down,
        &seq,
        &grid,
        &DenseArray::zeros(2, 1),
        &store,
        &AltParams::ConvDown(down),
    )
    .unwrap();
    assert_eq!(out.values.data(), &[2.0]);
    assert_eq!(out.times, vec![0.5]);
}

#[test]
fn conv_round_trip_on_constants() {
    let (store, down, up) = conv_identity_pair(4, 2);
    let times: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let grid = LevelGrid::new(1, 4, times.clone()).unwrap();
    let seq = LevelSequence::new(
        times,
        DenseArray::from_rows(&vec![vec![1.5, -0.25]; 12]).unwrap(),
        DenseArray::zeros(12, 1),
    )
    .unwrap();
    let cov = DenseArray::zeros(12, 1);
    let coarse = alt_resample(AltKind::Conv, AltDirection::Down, &seq, &grid, &cov, &store, &AltParams::ConvDown(down))
        .unwrap();
    assert_eq!(coarse.len(), 3);
    let fine = alt_resample(AltKind::Conv, AltDirection::Up, &coarse, &grid, &cov, &store, &AltParams::ConvUp(up))
        .unwrap();
    assert_eq!(fine.len(), 12);
    for row in rows_of(&fine.values) {
        assert_abs_diff_eq!(row[0], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(row[1], -0.25, epsilon = 1e-15);
    }
}

fn gru_oracle(store: &ParamStore, p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    let wi = store.get(p.input);
    let wh = store.get(p.hidden);
    let b = store.get(p.bias);
    let d = h.len();
    let pre = |j: usize, with_h: bool| -> (f64, f64) {
        let xi: f64 = x.iter().enumerate().map(|(i, xv)| xv * wi.get(i, j)).sum::<f64>() + b.get(0, j);
        let hh: f64 = if with_h {
            h.iter().enumerate().map(|(i, hv)| hv * wh.get(i, j)).sum()
        } else {
            0.0
        };
        (xi, hh)
    };
    (0..d)
        .map(|j| {
            let (xz, hz) = pre(j, true);
            let (xr, hr) = pre(d + j, true);
            let (xn, hn) = pre(2 * d + j, true);
            let z = sig(xz + hz);
            let r = sig(xr + hr);
            let n = (xn + r * hn).tanh();
            (1.0 - z) * n + z * h[j]
        })
        .collect()
}

#[test]
fn rnn_down_single_element_is_one_cell() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let gru = GruParams::init(&mut store, "gru", 2, 3, &mut rng);
    *store.get_mut(gru.bias) = seeded_normal(1, 9, "bias", 11);
    let grid = LevelGrid::new(1, 1, vec![0.0, 1.0]).unwrap();
    let vals = DenseArray::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.1]]).unwrap();
    let seq = LevelSequence::new(vec![0.0, 1.0], vals.clone(), DenseArray::zeros(2, 1)).unwrap();
    let out = alt_resample(
        AltKind::Rnn,
        AltDirection::Down,
        &seq,
        &grid,
        &DenseArray::zeros(2, 1),
        &store,
        &AltParams::Gru(gru),
    )
    .unwrap();
    for p in 0..2 {
        let want = gru_oracle(&store, &gru, vals.row(p), &[0.0; 3]);
        for j in 0..3 {
            assert_abs_diff_eq!(out.values.get(p, j), want[j], epsilon = 1e-14);
        }
    }
}

#[test]
fn rnn_up_unrolls_from_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let gru = GruParams::init(&mut store, "gru", C, D, &mut rng);
    let grid = LevelGrid::new(1, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let seeds = seeded_normal(2, D, "seeds", 12);
    let cov = seeded_normal(6, C, "cov", 12);
    let coarse = LevelSequence::new(grid.coarse_times().to_vec(), seeds.clone(), DenseArray::zeros(2, C)).unwrap();
    let out = alt_resample(AltKind::Rnn, AltDirection::Up, &coarse, &grid, &cov, &store, &AltParams::Gru(gru)).unwrap();
    assert_eq!(out.len(), 6);
    for p in 0..2 {
        let mut h = seeds.row(p).to_vec();
        for k in 0..3 {
            h = gru_oracle(&store, &gru, cov.row(p * 3 + k), &h);
            for j in 0..D {
                assert_abs_diff_eq!(out.values.get(p * 3 + k, j), h[j], epsilon = 1e-14);
            }
        }
    }
}

#[test]
fn alt_rejects_unknown_kind_and_mismatched_params() {
    assert!(matches!("wavelet".parse::<AltKind>(), Err(UfoError::InvalidArgument(_))));
    assert_eq!("rnn".parse::<AltKind>().unwrap(), AltKind::Rnn);
    let (store, down, _) = conv_identity_pair(2, 1);
    let grid = LevelGrid::new(1, 2, vec![0.0, 1.0]).unwrap();
    let seq = LevelSequence::new(vec![0.0, 1.0], DenseArray::zeros(2, 1), DenseArray::zeros(2, 1)).unwrap();
    let cov = DenseArray::zeros(2, 1);
    assert!(alt_resample(AltKind::Rnn, AltDirection::Down, &seq, &grid, &cov, &store, &AltParams::ConvDown(down)).is_err());
}

#[test]
fn alt_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let gru = GruParams::init(&mut store, "gru", D, D, &mut rng);
    let conv_d = ConvDownParams::init(&mut store, "cd", 3, D, D, &mut rng);
    let conv_u = ConvUpParams::init(&mut store, "cu", 3, D, &mut rng);
    let gru_up = GruParams::init(&mut store, "gu", C, D, &mut rng);
    let cov = seeded_normal(6, C, "cov", 13);
    let mut inputs = store.values().to_vec();
    inputs.push(seeded_normal(6, D, "x", 13));
    let n = store.len();
    let lw = weights(6 * D, 13);
    let report = check_gradients(&inputs, 1e-5, |t, v| {
        let bound = Bound::from_vars(v[..n].to_vec());
        let a = gru.down(t, &bound, v[n], 3, D)?;
        let b = conv_d.apply(t, &bound, v[n], 3)?;
        let s = t.add(a, b);
        let up1 = conv_u.apply(t, &bound, s, 3)?;
        let up2 = gru_up.up(t, s, &bound, &cov, 3)?;
        let y = t.mul(up1, up2);
        Ok(t.dot_const(y, lw.clone()))
    })
    .unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

/// Spectral norm by power iteration on `AᵀA`.
fn spectral_norm(a: &DenseArray) -> f64 {
    let at = a.transpose();
    let ata = at.matmul(a).unwrap();
    let mut v = DenseArray::filled(ata.rows(), 1, 1.0);
    let mut lambda = 0.0;
    for _ in 0..500 {
        let next = ata.matmul(&v).unwrap();
        let norm = next.frobenius_norm();
        lambda = norm;
        v = next.map(|x| x / norm);
    }
    lambda.sqrt()
}

struct LipschitzSetup {
    w1: DenseArray,
    w2: DenseArray,
    w3: DenseArray,
    amp: [f64; 2],
    freq: [f64; 2],
    phase: [f64; 2],
}

impl LipschitzSetup {
    fn new(seed: u64, target_lf: f64) -> (Self, f64, f64) {
        let w1 = seeded_normal(2, 2, "lip-w1", seed);
        let w3 = seeded_normal(2, 2, "lip-w3", seed);
        let mut w2 = seeded_normal(2, 2, "lip-w2", seed);
        let inner = spectral_norm(&w1).max(spectral_norm(&w3));
        let s = target_lf / (spectral_norm(&w2) * inner);
        w2.scale_assign(s);
        let lf = spectral_norm(&w2) * inner;
        let setup = Self {
            w1,
            w2,
            w3,
            amp: [1.0, 0.5],
            freq: [1.3, 2.1],
            phase: [0.2, -0.7],
        };
        let lx = (0..2).map(|k| (setup.amp[k] * setup.freq[k]).powi(2)).sum::<f64>().sqrt();
        (setup, lf, lx)
    }

    fn control(&self, t: f64) -> [f64; 2] {
        [0, 1].map(|k| self.amp[k] * (self.freq[k] * t + self.phase[k]).sin())
    }

    fn field(&self, x: [f64; 2], z: &[f64]) -> Vec<f64> {
        let pre: Vec<f64> = (0..2)
            .map(|i| {
                (0..2)
                    .map(|j| self.w1.get(i, j) * x[j] + self.w3.get(i, j) * z[j])
                    .sum::<f64>()
                    .tanh()
            })
            .collect();
        (0..2).map(|i| (0..2).map(|j| self.w2.get(i, j) * pre[j]).sum()).collect()
    }

    /// `Φ(t·w) = z^{(t)}(w)` from a zero initial state.
    fn phi(&self, t: f64, w: f64) -> Vec<f64> {
        let tr = integrate_patch(|tau, z| self.field(self.control(t + tau), z), &[0.0, 0.0], &[0.0, w], 200)
            .unwrap();
        tr.states[1].clone()
    }
}

fn rescaling_bound(lx: f64, lf: f64, w: f64) -> f64 {
    lx * ((lf * w).exp() - 1.0) / (lf * w)
}

#[test]
fn rescaled_trajectory_respects_lipschitz_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // The closed form holds as stated for L_f <= 1; for steeper fields the
    // Gronwall step gives L_f times it.
    for (seed, target) in [(0, 0.9), (1, 0.5), (2, 2.5)] {
        let (setup, lf, lx) = LipschitzSetup::new(seed, target);
        assert!((lf - target).abs() < 1e-9);
        let mut bounds = Vec::new();
        for w in [1.0, 0.5, 0.25, 0.125] {
            let bound = rescaling_bound(lx, lf, w) * lf.max(1.0);
            let mut worst = 0.0f64;
            for _ in 0..60 {
                let t = rng.gen_range(0.0..10.0);
                let t2 = t + rng.gen_range(0.01..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let a = setup.phi(t, w);
                let b = setup.phi(t2, w);
                let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                worst = worst.max(dist / (w * (t - t2).abs()));
            }
            assert!(worst <= bound * (1.0 + 1e-6), "w={w}: {worst} > {bound}");
            bounds.push(bound);
        }
        assert!(bounds.windows(2).all(|b| b[1] < b[0]), "{bounds:?}");
        if lf <= 1.0 {
            assert!(*bounds.last().unwrap() <= 1.1 * lx);
        }
    }
}
