use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpd::nets::{
    backward, cell_step, forward, forward_trace, ArchSpec, CellKind, CellState, Matrix, Mode, ModelParams,
    RecurrentParams, Variant,
};
use vpd::training::{loss, LossSpec};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_sequence(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..len)
        .map(|_| (0..dim).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Parameters drawn wider than the initializer, biases included, so every
/// gate sees non-trivial pre-activations.
fn perturbed(model: &ModelParams, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut m = model.clone();
    let flat: Vec<f64> = m.to_flat().iter().map(|_| rng.gen_range(-0.8..0.8)).collect();
    m.set_flat(&flat);
    m
}

fn objective(model: &ModelParams, xs: &[Vec<f64>], ys: &[bool], spec: &LossSpec, mode: Mode, seed: u64) -> f64 {
    loss(&forward(model, xs, mode, seed).unwrap(), ys, spec).unwrap()
}

/// Worst relative error between the analytic gradient and central
/// differences over every parameter.
fn worst_error(model: &ModelParams, xs: &[Vec<f64>], ys: &[bool], spec: &LossSpec, mode: Mode, seed: u64) -> f64 {
    let trace = forward_trace(model, xs, mode, seed).unwrap();
    let (value, grad) = backward(model, &trace, ys, spec).unwrap();
    assert!((value - objective(model, xs, ys, spec, mode, seed)).abs() < 1e-12);
    let analytic = grad.to_flat();
    let base = model.to_flat();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + EPS;
        let mut up = model.clone();
        up.set_flat(&p);
        p[i] = base[i] - EPS;
        let mut down = model.clone();
        down.set_flat(&p);
        let fd = (objective(&up, xs, ys, spec, mode, seed) - objective(&down, xs, ys, spec, mode, seed)) / (2.0 * EPS);
        worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
    }
    worst
}

fn check_variant(variant: Variant, draws: u64) {
    for draw in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 * variant as u64 + draw);
        let dim = rng.gen_range(1..=4);
        let arch = ArchSpec {
            hidden: if variant.cell().is_some() {
                rng.gen_range(2..=4)
            } else {
                0
            },
            ..ArchSpec::preset(variant)
        };
        let model = perturbed(&ModelParams::init(&arch, dim, draw).unwrap(), &mut rng);
        let xs = random_sequence(&mut rng, 20, dim);
        let ys: Vec<bool> = (0..20).map(|_| rng.gen_bool(0.5)).collect();
        let spec = LossSpec {
            positive_weight: rng.gen_range(0.5..3.0),
            negative_weight: rng.gen_range(0.5..3.0),
            derivative_lambda: if draw % 2 == 0 { 0.0 } else { rng.gen_range(0.0..0.5) },
        };
        let err = worst_error(&model, &xs, &ys, &spec, Mode::Eval, 0);
        assert!(err < TOL, "{variant} draw {draw}: relative error {err:e}");
    }
}

#[test]
fn logistic_regression_gradients() {
    check_variant(Variant::Lr, 20);
}

#[test]
fn mlp_gradients() {
    check_variant(Variant::Mlp, 20);
}

#[test]
fn simplernn_gradients() {
    check_variant(Variant::SimpleRnn, 20);
}

#[test]
fn lstm_gradients() {
    check_variant(Variant::Lstm, 20);
}

#[test]
fn gru_gradients() {
    check_variant(Variant::Gru, 20);
}

#[test]
fn final_model_gradients() {
    check_variant(Variant::Final, 20);
}

#[test]
fn gradients_hold_under_fixed_dropout_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let arch = ArchSpec {
        hidden: 4,
        dense: vec![5],
        dropout_p: 0.4,
        ..ArchSpec::preset(Variant::Final)
    };
    let model = perturbed(&ModelParams::init(&arch, 3, 1).unwrap(), &mut rng);
    let xs = random_sequence(&mut rng, 20, 3);
    let ys: Vec<bool> = (0..20).map(|_| rng.gen_bool(0.5)).collect();
    for seed in 0..5 {
        let err = worst_error(&model, &xs, &ys, &LossSpec::default(), Mode::Train, seed);
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn output_bias_gradient_by_hand() {
    // LR with zero parameters, one frame, target 0: y = 1/2, L = y²,
    // dL/db = 2y · y(1 − y) = 1/4.
    let model = ModelParams::init(&ArchSpec::preset(Variant::Lr), 2, 0).unwrap();
    let mut zero = model.clone();
    zero.set_flat(&vec![0.0; model.num_params()]);
    let xs = vec![vec![1.0, 0.0]];
    let trace = forward_trace(&zero, &xs, Mode::Eval, 0).unwrap();
    let (value, grad) = backward(&zero, &trace, &[false], &LossSpec::default()).unwrap();
    assert_eq!(value, 0.25);
    assert_eq!(grad.dense[0].bias[0], 0.25);
    assert_eq!(grad.dense[0].weights.data(), &[0.25, 0.0]);
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `W x + U h + b` written out for a 2-unit layer over 3 inputs.
fn affine(w: &Matrix, u: &Matrix, b: &[f64], x: &[f64; 3], h: &[f64; 2], k: usize) -> f64 {
    w.get(k, 0) * x[0] + w.get(k, 1) * x[1] + w.get(k, 2) * x[2] + u.get(k, 0) * h[0] + u.get(k, 1) * h[1] + b[k]
}

#[test]
fn cell_step_matches_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for kind in [CellKind::SimpleRnn, CellKind::Lstm, CellKind::Gru] {
        for _ in 0..20 {
            let mut params = RecurrentParams::init(kind, 3, 2, &mut rng);
            params.for_each_param_mut(&mut |_, v| v.iter_mut().for_each(|p| *p = rng.gen_range(-1.0..1.0)));
            let x = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let h = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let c = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let state = CellState {
                h: h.to_vec(),
                c: if kind == CellKind::Lstm { c.to_vec() } else { Vec::new() },
            };
            let (out, next) = cell_step(&params, &x, &state).unwrap();

            let (exp_h, exp_c): ([f64; 2], Option<[f64; 2]>) = match &params {
                RecurrentParams::SimpleRnn(p) => {
                    let h0 = affine(&p.w, &p.u, &p.b, &x, &h, 0).tanh();
                    let h1 = affine(&p.w, &p.u, &p.b, &x, &h, 1).tanh();
                    ([h0, h1], None)
                }
                RecurrentParams::Lstm(p) => {
                    let mut hn = [0.0; 2];
                    let mut cn = [0.0; 2];
                    for k in 0..2 {
                        let i = sig(affine(&p.w_i, &p.u_i, &p.b_i, &x, &h, k));
                        let f = sig(affine(&p.w_f, &p.u_f, &p.b_f, &x, &h, k));
                        let o = sig(affine(&p.w_o, &p.u_o, &p.b_o, &x, &h, k));
                        let g = affine(&p.w_c, &p.u_c, &p.b_c, &x, &h, k).tanh();
                        cn[k] = f * c[k] + i * g;
                        hn[k] = o * cn[k].tanh();
                    }
                    (hn, Some(cn))
                }
                RecurrentParams::Gru(p) => {
                    let z = [0, 1].map(|k| sig(affine(&p.w_z, &p.u_z, &p.b_z, &x, &h, k)));
                    let r = [0, 1].map(|k| sig(affine(&p.w_r, &p.u_r, &p.b_r, &x, &h, k)));
                    let rh = [r[0] * h[0], r[1] * h[1]];
                    let cand = [0, 1].map(|k| affine(&p.w_h, &p.u_h, &p.b_h, &x, &rh, k).tanh());
                    ([0, 1].map(|k| (1.0 - z[k]) * h[k] + z[k] * cand[k]), None)
                }
            };
            for k in 0..2 {
                assert!((out[k] - exp_h[k]).abs() < 1e-12, "{kind:?}");
                assert!((next.h[k] - exp_h[k]).abs() < 1e-12, "{kind:?}");
                if let Some(cn) = exp_c {
                    assert!((next.c[k] - cn[k]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn lstm_keeps_cell_state_when_forgetting_is_off() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = RecurrentParams::init(CellKind::Lstm, 3, 4, &mut rng);
    if let RecurrentParams::Lstm(p) = &mut params {
        for m in [&mut p.w_i, &mut p.w_f, &mut p.u_i, &mut p.u_f] {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p.b_f.iter_mut().for_each(|b| *b = 50.0);
        p.b_i.iter_mut().for_each(|b| *b = -50.0);
    }
    let c0 = vec![0.3, -0.7, 1.2, 0.05];
    let mut state = CellState {
        h: vec![0.0; 4],
        c: c0.clone(),
    };
    for x in random_sequence(&mut rng, 500, 3) {
        state = cell_step(&params, &x, &state).unwrap().1;
    }
    for (a, b) in state.c.iter().zip(&c0) {
        assert!((a - b).abs() < 1e-12);
    }
}
