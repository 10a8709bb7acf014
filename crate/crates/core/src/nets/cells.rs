//! SimpleRNN, LSTM and GRU cells: single steps, whole-sequence unrolling and
//! backpropagation through time.
//!
//! * SimpleRNN: `h' = tanh(W x + U h + b)`
//! * LSTM (forget gate, no peepholes):
//!   `i, f, o = σ(W_* x + U_* h + b_*)`, `g = tanh(W_c x + U_c h + b_c)`,
//!   `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`
//! * GRU: `z, r = σ(W_* x + U_* h + b_*)`,
//!   `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{add_assign, sigmoid, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimpleRnnParams {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_i: Matrix,
    pub w_f: Matrix,
    pub w_o: Matrix,
    pub w_c: Matrix,
    pub u_i: Matrix,
    pub u_f: Matrix,
    pub u_o: Matrix,
    pub u_c: Matrix,
    pub b_i: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_o: Vec<f64>,
    pub b_c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
    pub b_z: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_h: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    SimpleRnn,
    Lstm,
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cell", rename_all = "lowercase")]
pub enum RecurrentParams {
    SimpleRnn(SimpleRnnParams),
    Lstm(LstmParams),
    Gru(GruParams),
}

/// Hidden state carried between steps. `c` is empty except for LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl RecurrentParams {
    /// Uniform Glorot-range weights, zero biases, LSTM forget bias 1.
    pub fn init<R: Rng + ?Sized>(kind: CellKind, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_lim = glorot(input, hidden);
        let u_lim = glorot(hidden, hidden);
        let mut w = || Matrix::uniform(hidden, input, w_lim, rng);
        let ws: Vec<Matrix> = (0..4).map(|_| w()).collect();
        let mut u = || Matrix::uniform(hidden, hidden, u_lim, rng);
        let us: Vec<Matrix> = (0..4).map(|_| u()).collect();
        let zeros = || vec![0.0; hidden];
        let mut ws = ws.into_iter();
        let mut us = us.into_iter();
        let mut next = || (ws.next().unwrap(), us.next().unwrap());
        match kind {
            CellKind::SimpleRnn => {
                let (w, u) = next();
                RecurrentParams::SimpleRnn(SimpleRnnParams { w, u, b: zeros() })
            }
            CellKind::Lstm => {
                let (w_i, u_i) = next();
                let (w_f, u_f) = next();
                let (w_o, u_o) = next();
                let (w_c, u_c) = next();
                RecurrentParams::Lstm(LstmParams {
                    w_i,
                    w_f,
                    w_o,
                    w_c,
                    u_i,
                    u_f,
                    u_o,
                    u_c,
                    b_i: zeros(),
                    b_f: vec![1.0; hidden],
                    b_o: zeros(),
                    b_c: zeros(),
                })
            }
            CellKind::Gru => {
                let (w_z, u_z) = next();
                let (w_r, u_r) = next();
                let (w_h, u_h) = next();
                RecurrentParams::Gru(GruParams {
                    w_z,
                    w_r,
                    w_h,
                    u_z,
                    u_r,
                    u_h,
                    b_z: zeros(),
                    b_r: zeros(),
                    b_h: zeros(),
                })
            }
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            RecurrentParams::SimpleRnn(_) => CellKind::SimpleRnn,
            RecurrentParams::Lstm(_) => CellKind::Lstm,
            RecurrentParams::Gru(_) => CellKind::Gru,
        }
    }

    fn input_weights(&self) -> &Matrix {
        match self {
            RecurrentParams::SimpleRnn(p) => &p.w,
            RecurrentParams::Lstm(p) => &p.w_i,
            RecurrentParams::Gru(p) => &p.w_z,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_weights().cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.input_weights().rows()
    }

    pub fn zero_state(&self) -> CellState {
        let h = vec![0.0; self.hidden_dim()];
        let c = match self {
            RecurrentParams::Lstm(_) => h.clone(),
            _ => Vec::new(),
        };
        CellState { h, c }
    }

    /// Checks that every tensor agrees with the input and hidden sizes.
    pub fn validate(&self) -> Result<()> {
        let (n_in, n_h) = (self.input_dim(), self.hidden_dim());
        let mut bad = None;
        self.for_each_param(&mut |name, values| {
            let expected = if name.starts_with('w') {
                n_h * n_in
            } else if name.starts_with('u') {
                n_h * n_h
            } else {
                n_h
            };
            if values.len() != expected && bad.is_none() {
                bad = Some((expected, values.len()));
            }
        });
        match bad {
            Some((expected, actual)) => Err(Error::Dimension {
                context: "recurrent parameters",
                expected,
                actual,
            }),
            None => Ok(()),
        }
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&'static str, &[f64])) {
        match self {
            RecurrentParams::SimpleRnn(p) => {
                f("w", p.w.data());
                f("u", p.u.data());
                f("b", &p.b);
            }
            RecurrentParams::Lstm(p) => {
                f("w_i", p.w_i.data());
                f("w_f", p.w_f.data());
                f("w_o", p.w_o.data());
                f("w_c", p.w_c.data());
                f("u_i", p.u_i.data());
                f("u_f", p.u_f.data());
                f("u_o", p.u_o.data());
                f("u_c", p.u_c.data());
                f("b_i", &p.b_i);
                f("b_f", &p.b_f);
                f("b_o", &p.b_o);
                f("b_c", &p.b_c);
            }
            RecurrentParams::Gru(p) => {
                f("w_z", p.w_z.data());
                f("w_r", p.w_r.data());
                f("w_h", p.w_h.data());
                f("u_z", p.u_z.data());
                f("u_r", p.u_r.data());
                f("u_h", p.u_h.data());
                f("b_z", &p.b_z);
                f("b_r", &p.b_r);
                f("b_h", &p.b_h);
            }
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&'static str, &mut [f64])) {
        match self {
            RecurrentParams::SimpleRnn(p) => {
                f("w", p.w.data_mut());
                f("u", p.u.data_mut());
                f("b", &mut p.b);
            }
            RecurrentParams::Lstm(p) => {
                f("w_i", p.w_i.data_mut());
                f("w_f", p.w_f.data_mut());
                f("w_o", p.w_o.data_mut());
                f("w_c", p.w_c.data_mut());
                f("u_i", p.u_i.data_mut());
                f("u_f", p.u_f.data_mut());
                f("u_o", p.u_o.data_mut());
                f("u_c", p.u_c.data_mut());
                f("b_i", &mut p.b_i);
                f("b_f", &mut p.b_f);
                f("b_o", &mut p.b_o);
                f("b_c", &mut p.b_c);
            }
            RecurrentParams::Gru(p) => {
                f("w_z", p.w_z.data_mut());
                f("w_r", p.w_r.data_mut());
                f("w_h", p.w_h.data_mut());
                f("u_z", p.u_z.data_mut());
                f("u_r", p.u_r.data_mut());
                f("u_h", p.u_h.data_mut());
                f("b_z", &mut p.b_z);
                f("b_r", &mut p.b_r);
                f("b_h", &mut p.b_h);
            }
        }
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_param_mut(&mut |_, s| s.fill(0.0));
        z
    }

    /// One step; returns the new hidden output and full state.
    pub fn step(&self, x: &[f64], state: &CellState) -> Result<(Vec<f64>, CellState)> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                context: "cell input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        if state.h.len() != self.hidden_dim() {
            return Err(Error::Dimension {
                context: "cell state",
                expected: self.hidden_dim(),
                actual: state.h.len(),
            });
        }
        if matches!(self, RecurrentParams::Lstm(_)) && state.c.len() != self.hidden_dim() {
            return Err(Error::Dimension {
                context: "LSTM cell memory",
                expected: self.hidden_dim(),
                actual: state.c.len(),
            });
        }
        let cache = self.step_cached(x, &state.h, &state.c);
        let next = cache.state();
        Ok((next.h.clone(), next))
    }

    fn step_cached(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
        let n = self.hidden_dim();
        let affine = |w: &Matrix, u: &Matrix, b: &[f64], h: &[f64]| {
            let mut a = b.to_vec();
            w.mul_vec_add(x, &mut a);
            u.mul_vec_add(h, &mut a);
            a
        };
        match self {
            RecurrentParams::SimpleRnn(p) => {
                let h = affine(&p.w, &p.u, &p.b, h_prev).into_iter().map(f64::tanh).collect();
                StepCache::SimpleRnn { h }
            }
            RecurrentParams::Lstm(p) => {
                let i: Vec<f64> = affine(&p.w_i, &p.u_i, &p.b_i, h_prev)
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                let f: Vec<f64> = affine(&p.w_f, &p.u_f, &p.b_f, h_prev)
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                let o: Vec<f64> = affine(&p.w_o, &p.u_o, &p.b_o, h_prev)
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                let g: Vec<f64> = affine(&p.w_c, &p.u_c, &p.b_c, h_prev)
                    .into_iter()
                    .map(f64::tanh)
                    .collect();
                let c: Vec<f64> = (0..n).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
                let tc: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
                let h = (0..n).map(|k| o[k] * tc[k]).collect();
                StepCache::Lstm { i, f, o, g, c, tc, h }
            }
            RecurrentParams::Gru(p) => {
                let z: Vec<f64> = affine(&p.w_z, &p.u_z, &p.b_z, h_prev)
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                let r: Vec<f64> = affine(&p.w_r, &p.u_r, &p.b_r, h_prev)
                    .into_iter()
                    .map(sigmoid)
                    .collect();
                let rh: Vec<f64> = (0..n).map(|k| r[k] * h_prev[k]).collect();
                let hh: Vec<f64> = affine(&p.w_h, &p.u_h, &p.b_h, &rh).into_iter().map(f64::tanh).collect();
                let h = (0..n).map(|k| (1.0 - z[k]) * h_prev[k] + z[k] * hh[k]).collect();
                StepCache::Gru { z, r, rh, hh, h }
            }
        }
    }

    /// Unrolls the cell over `xs` from the zero state.
    pub(crate) fn run(&self, xs: &[Vec<f64>]) -> Vec<StepCache> {
        let mut steps: Vec<StepCache> = Vec::with_capacity(xs.len());
        let zero = self.zero_state();
        for x in xs {
            let (h_prev, c_prev) = match steps.last() {
                Some(s) => (s.h(), s.c()),
                None => (zero.h.as_slice(), zero.c.as_slice()),
            };
            let cache = self.step_cached(x, h_prev, c_prev);
            steps.push(cache);
        }
        steps
    }

    /// Backpropagation through time. `dh_out[t]` is the loss gradient
    /// flowing into `h_t` from layers above; parameter gradients are
    /// accumulated into `grad`, which must have the same shape as `self`.
    pub(crate) fn backprop(
        &self,
        xs: &[Vec<f64>],
        steps: &[StepCache],
        dh_out: &[Vec<f64>],
        grad: &mut RecurrentParams,
    ) {
        let n = self.hidden_dim();
        let zero = self.zero_state();
        let mut dh_next = vec![0.0; n];
        let mut dc_next = vec![0.0; n];
        for t in (0..steps.len()).rev() {
            let x = &xs[t];
            let (h_prev, c_prev) = if t == 0 {
                (zero.h.as_slice(), zero.c.as_slice())
            } else {
                (steps[t - 1].h(), steps[t - 1].c())
            };
            let mut dh: Vec<f64> = dh_out[t].clone();
            add_assign(&mut dh, &dh_next);
            let mut dh_prev = vec![0.0; n];

            match (self, &steps[t], &mut *grad) {
                (RecurrentParams::SimpleRnn(p), StepCache::SimpleRnn { h }, RecurrentParams::SimpleRnn(g)) => {
                    let da: Vec<f64> = (0..n).map(|k| dh[k] * (1.0 - h[k] * h[k])).collect();
                    g.w.add_outer(&da, x);
                    g.u.add_outer(&da, h_prev);
                    add_assign(&mut g.b, &da);
                    p.u.mul_t_vec_add(&da, &mut dh_prev);
                }
                (
                    RecurrentParams::Lstm(p),
                    StepCache::Lstm {
                        i, f, o, g: cand, tc, ..
                    },
                    RecurrentParams::Lstm(g),
                ) => {
                    let mut dc = dc_next.clone();
                    let mut da_i = vec![0.0; n];
                    let mut da_f = vec![0.0; n];
                    let mut da_o = vec![0.0; n];
                    let mut da_c = vec![0.0; n];
                    for k in 0..n {
                        dc[k] += dh[k] * o[k] * (1.0 - tc[k] * tc[k]);
                        da_o[k] = dh[k] * tc[k] * o[k] * (1.0 - o[k]);
                        da_i[k] = dc[k] * cand[k] * i[k] * (1.0 - i[k]);
                        da_f[k] = dc[k] * c_prev[k] * f[k] * (1.0 - f[k]);
                        da_c[k] = dc[k] * i[k] * (1.0 - cand[k] * cand[k]);
                        dc_next[k] = dc[k] * f[k];
                    }
                    for (da, u, gw, gu, gb) in [
                        (&da_i, &p.u_i, &mut g.w_i, &mut g.u_i, &mut g.b_i),
                        (&da_f, &p.u_f, &mut g.w_f, &mut g.u_f, &mut g.b_f),
                        (&da_o, &p.u_o, &mut g.w_o, &mut g.u_o, &mut g.b_o),
                        (&da_c, &p.u_c, &mut g.w_c, &mut g.u_c, &mut g.b_c),
                    ] {
                        gw.add_outer(da, x);
                        gu.add_outer(da, h_prev);
                        add_assign(gb, da);
                        u.mul_t_vec_add(da, &mut dh_prev);
                    }
                }
                (RecurrentParams::Gru(p), StepCache::Gru { z, r, rh, hh, .. }, RecurrentParams::Gru(g)) => {
                    let mut da_h = vec![0.0; n];
                    let mut da_z = vec![0.0; n];
                    for k in 0..n {
                        dh_prev[k] = dh[k] * (1.0 - z[k]);
                        da_h[k] = dh[k] * z[k] * (1.0 - hh[k] * hh[k]);
                        da_z[k] = dh[k] * (hh[k] - h_prev[k]) * z[k] * (1.0 - z[k]);
                    }
                    g.w_h.add_outer(&da_h, x);
                    g.u_h.add_outer(&da_h, rh);
                    add_assign(&mut g.b_h, &da_h);
                    let mut drh = vec![0.0; n];
                    p.u_h.mul_t_vec_add(&da_h, &mut drh);
                    let mut da_r = vec![0.0; n];
                    for k in 0..n {
                        dh_prev[k] += drh[k] * r[k];
                        da_r[k] = drh[k] * h_prev[k] * r[k] * (1.0 - r[k]);
                    }
                    g.w_z.add_outer(&da_z, x);
                    g.u_z.add_outer(&da_z, h_prev);
                    add_assign(&mut g.b_z, &da_z);
                    p.u_z.mul_t_vec_add(&da_z, &mut dh_prev);
                    g.w_r.add_outer(&da_r, x);
                    g.u_r.add_outer(&da_r, h_prev);
                    add_assign(&mut g.b_r, &da_r);
                    p.u_r.mul_t_vec_add(&da_r, &mut dh_prev);
                }
                _ => unreachable!("gradient buffer and step cache must match the cell kind"),
            }
            dh_next = dh_prev;
        }
    }
}

/// Per-step values kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum StepCache {
    SimpleRnn {
        h: Vec<f64>,
    },
    Lstm {
        i: Vec<f64>,
        f: Vec<f64>,
        o: Vec<f64>,
        g: Vec<f64>,
        c: Vec<f64>,
        tc: Vec<f64>,
        h: Vec<f64>,
    },
    Gru {
        z: Vec<f64>,
        r: Vec<f64>,
        rh: Vec<f64>,
        hh: Vec<f64>,
        h: Vec<f64>,
    },
}

impl StepCache {
    pub(crate) fn h(&self) -> &[f64] {
        match self {
            StepCache::SimpleRnn { h } | StepCache::Lstm { h, .. } | StepCache::Gru { h, .. } => h,
        }
    }

    fn c(&self) -> &[f64] {
        match self {
            StepCache::Lstm { c, .. } => c,
            _ => &[],
        }
    }

    fn state(&self) -> CellState {
        CellState {
            h: self.h().to_vec(),
            c: self.c().to_vec(),
        }
    }
}
