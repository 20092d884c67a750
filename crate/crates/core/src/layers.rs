//! Recurrent cells, bidirectional driver, affine maps and dropout context.

use rand::{Rng, RngCore};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};

fn check_dim(tape: &Tape<'_>, what: &str, v: Var, dim: usize) -> Result<()> {
    if tape.shape(v) != [dim] {
        return Err(Error::invalid(format!("{what}: got shape {:?}, expected [{dim}]", tape.shape(v))));
    }
    Ok(())
}

/// Gated recurrent unit with separate input, recurrent and bias terms per gate.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_n: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_n: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_n: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

const GRU_NAMES: [&str; 9] = ["w_z", "w_r", "w_n", "u_z", "u_r", "u_n", "b_z", "b_r", "b_n"];

impl GruParams {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        for name in GRU_NAMES {
            let shape: Vec<usize> = match &name[..1] {
                "w" => vec![hidden_dim, input_dim],
                "u" => vec![hidden_dim, hidden_dim],
                _ => vec![hidden_dim],
            };
            ps.insert_uniform(format!("{prefix}.{name}"), &shape, rng)?;
        }
        Self::lookup(ps, prefix)
    }

    pub fn lookup(ps: &ParamSet, prefix: &str) -> Result<Self> {
        let id = |n: &str| ps.id(&format!("{prefix}.{n}"));
        let w_z = id("w_z")?;
        let shape = ps.get(w_z).shape();
        let (hidden_dim, input_dim) = (shape[0], shape[1]);
        Ok(GruParams {
            w_z,
            w_r: id("w_r")?,
            w_n: id("w_n")?,
            u_z: id("u_z")?,
            u_r: id("u_r")?,
            u_n: id("u_n")?,
            b_z: id("b_z")?,
            b_r: id("b_r")?,
            b_n: id("b_n")?,
            input_dim,
            hidden_dim,
        })
    }
}

fn gate(tape: &mut Tape<'_>, w: ParamId, x: Var, u: ParamId, h: Var, b: ParamId) -> Result<Var> {
    let (w, u, b) = (tape.param(w), tape.param(u), tape.param(b));
    let wx = tape.matmul(w, x)?;
    let uh = tape.matmul(u, h)?;
    let s = tape.add(wx, uh)?;
    tape.add(s, b)
}

/// `h' = (1 - z) * h + z * n` with update gate `z`, reset gate `r` and
/// candidate `n = tanh(W_n x + U_n (r * h) + b_n)`.
pub fn gru_step(tape: &mut Tape<'_>, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    check_dim(tape, "gru input", x, p.input_dim)?;
    check_dim(tape, "gru state", h_prev, p.hidden_dim)?;
    let z = gate(tape, p.w_z, x, p.u_z, h_prev, p.b_z)?;
    let z = tape.sigmoid(z)?;
    let r = gate(tape, p.w_r, x, p.u_r, h_prev, p.b_r)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h_prev)?;
    let n = gate(tape, p.w_n, x, p.u_n, rh, p.b_n)?;
    let n = tape.tanh(n)?;
    let diff = tape.sub(n, h_prev)?;
    let step = tape.mul(z, diff)?;
    tape.add(h_prev, step)
}

/// LSTM with stacked gate weights in the order input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ps.insert_uniform(format!("{prefix}.w"), &[4 * hidden_dim, input_dim], rng)?;
        ps.insert_uniform(format!("{prefix}.u"), &[4 * hidden_dim, hidden_dim], rng)?;
        ps.insert_uniform(format!("{prefix}.b"), &[4 * hidden_dim], rng)?;
        Self::lookup(ps, prefix)
    }

    pub fn lookup(ps: &ParamSet, prefix: &str) -> Result<Self> {
        let w = ps.id(&format!("{prefix}.w"))?;
        let shape = ps.get(w).shape();
        Ok(LstmParams {
            w,
            u: ps.id(&format!("{prefix}.u"))?,
            b: ps.id(&format!("{prefix}.b"))?,
            input_dim: shape[1],
            hidden_dim: shape[0] / 4,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

pub fn lstm_step(tape: &mut Tape<'_>, x: Var, state: LstmState, p: &LstmParams) -> Result<LstmState> {
    check_dim(tape, "lstm input", x, p.input_dim)?;
    check_dim(tape, "lstm state", state.h, p.hidden_dim)?;
    check_dim(tape, "lstm cell", state.c, p.hidden_dim)?;
    let h = p.hidden_dim;
    let pre = gate(tape, p.w, x, p.u, state.h, p.b)?;
    let i = tape.slice(pre, 0, h)?;
    let i = tape.sigmoid(i)?;
    let f = tape.slice(pre, h, h)?;
    let f = tape.sigmoid(f)?;
    let g = tape.slice(pre, 2 * h, h)?;
    let g = tape.tanh(g)?;
    let o = tape.slice(pre, 3 * h, h)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// A recurrent cell that can be unrolled over a sequence.
pub trait Recurrent {
    type State: Copy;

    fn hidden_dim(&self) -> usize;
    fn zero_state(&self, tape: &mut Tape<'_>) -> Self::State;
    fn step(&self, tape: &mut Tape<'_>, x: Var, state: Self::State) -> Result<Self::State>;
    fn output(state: Self::State) -> Var;
}

impl Recurrent for GruParams {
    type State = Var;

    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn zero_state(&self, tape: &mut Tape<'_>) -> Var {
        tape.zeros(self.hidden_dim)
    }

    fn step(&self, tape: &mut Tape<'_>, x: Var, state: Var) -> Result<Var> {
        gru_step(tape, x, state, self)
    }

    fn output(state: Var) -> Var {
        state
    }
}

impl Recurrent for LstmParams {
    type State = LstmState;

    fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn zero_state(&self, tape: &mut Tape<'_>) -> LstmState {
        LstmState { h: tape.zeros(self.hidden_dim), c: tape.zeros(self.hidden_dim) }
    }

    fn step(&self, tape: &mut Tape<'_>, x: Var, state: LstmState) -> Result<LstmState> {
        lstm_step(tape, x, state, self)
    }

    fn output(state: LstmState) -> Var {
        state.h
    }
}

/// Left-to-right unroll from the zero state; one output per input.
pub fn unroll<R: Recurrent>(tape: &mut Tape<'_>, seq: &[Var], cell: &R) -> Result<Vec<R::State>> {
    let mut state = cell.zero_state(tape);
    let mut out = Vec::with_capacity(seq.len());
    for &x in seq {
        state = cell.step(tape, x, state)?;
        out.push(state);
    }
    Ok(out)
}

/// Per-position forward and backward states of a bidirectional RNN.
#[derive(Clone, Debug)]
pub struct BiStates {
    pub fwd: Vec<Var>,
    pub bwd: Vec<Var>,
}

impl BiStates {
    /// `h_i = [fwd_i ; bwd_i]` for every position.
    pub fn concat(&self, tape: &mut Tape<'_>) -> Result<Vec<Var>> {
        self.fwd.iter().zip(&self.bwd).map(|(&f, &b)| tape.concat(&[f, b])).collect()
    }

    /// `[last forward ; first backward]`, i.e. both directions' final states.
    pub fn summary(&self, tape: &mut Tape<'_>) -> Result<Var> {
        let f = *self.fwd.last().expect("non-empty");
        let b = self.bwd[0];
        tape.concat(&[f, b])
    }
}

pub fn birnn<R: Recurrent>(tape: &mut Tape<'_>, seq: &[Var], fwd: &R, bwd: &R) -> Result<BiStates> {
    if seq.is_empty() {
        return Err(Error::invalid("bidirectional RNN over an empty sequence"));
    }
    let f = unroll(tape, seq, fwd)?.into_iter().map(R::output).collect();
    let rev: Vec<Var> = seq.iter().rev().copied().collect();
    let mut b: Vec<Var> = unroll(tape, &rev, bwd)?.into_iter().map(R::output).collect();
    b.reverse();
    Ok(BiStates { fwd: f, bwd: b })
}

/// `W x + b`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ps.insert_uniform(format!("{prefix}.w"), &[output_dim, input_dim], rng)?;
        ps.insert_uniform(format!("{prefix}.b"), &[output_dim], rng)?;
        Self::lookup(ps, prefix)
    }

    pub fn init_zero(ps: &mut ParamSet, prefix: &str, input_dim: usize, output_dim: usize) -> Result<Self> {
        ps.insert_zeros(format!("{prefix}.w"), &[output_dim, input_dim])?;
        ps.insert_zeros(format!("{prefix}.b"), &[output_dim])?;
        Self::lookup(ps, prefix)
    }

    pub fn lookup(ps: &ParamSet, prefix: &str) -> Result<Self> {
        Ok(Affine { w: ps.id(&format!("{prefix}.w"))?, b: ps.id(&format!("{prefix}.b"))? })
    }

    pub fn apply(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        let wx = tape.matmul(w, x)?;
        tape.add(wx, b)
    }
}

/// Dropout rates per model component.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DropoutPlan {
    pub encoder: f64,
    pub decoder: f64,
    pub doc_rnn: f64,
}

impl DropoutPlan {
    pub fn uniform(rate: f64) -> Self {
        DropoutPlan { encoder: rate, decoder: rate, doc_rnn: rate }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutSite {
    /// Source word embeddings.
    Encoder,
    /// Decoder readout.
    Decoder,
    /// Sentence representations entering the document RNN.
    DocRnn,
}

/// Source of dropout masks. In evaluation mode dropout is the identity.
pub struct DropoutCtx<'r> {
    rng: Option<&'r mut dyn RngCore>,
    plan: DropoutPlan,
}

impl<'r> DropoutCtx<'r> {
    pub fn eval() -> Self {
        DropoutCtx { rng: None, plan: DropoutPlan::default() }
    }

    pub fn train(rng: &'r mut dyn RngCore, plan: DropoutPlan) -> Self {
        DropoutCtx { rng: Some(rng), plan }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var, site: DropoutSite) -> Result<Var> {
        let rate = match site {
            DropoutSite::Encoder => self.plan.encoder,
            DropoutSite::Decoder => self.plan.decoder,
            DropoutSite::DocRnn => self.plan.doc_rnn,
        };
        match &mut self.rng {
            Some(rng) if rate > 0.0 => tape.dropout(x, rate, &mut **rng),
            _ => Ok(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use crate::gradcheck::grad_check;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn matvec(ps: &ParamSet, id: ParamId, x: &[f64]) -> Vec<f64> {
        let t = ps.get(id);
        (0..t.rows()).map(|i| t.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    fn gru_oracle(ps: &ParamSet, p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
        let pre = |w, u, hh: &[f64], b: ParamId| add(&add(&matvec(ps, w, x), &matvec(ps, u, hh)), ps.get(b).data());
        let z: Vec<f64> = pre(p.w_z, p.u_z, h, p.b_z).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = pre(p.w_r, p.u_r, h, p.b_r).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let n: Vec<f64> = pre(p.w_n, p.u_n, &rh, p.b_n).into_iter().map(f64::tanh).collect();
        (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * n[i]).collect()
    }

    #[test]
    fn gru_zero_params_halves_state() {
        let mut ps = ParamSet::new();
        let p = GruParams::init(&mut ps, "g", 3, 2, &mut rng()).unwrap();
        ps.zero_all();
        let mut tape = Tape::with_params(&ps);
        let x = tape.constant_vec(vec![0.3, -0.2, 0.9]).unwrap();
        let h = tape.constant_vec(vec![0.8, -0.4]).unwrap();
        let out = gru_step(&mut tape, x, h, &p).unwrap();
        assert_eq!(tape.value(out), &[0.4, -0.2]);
    }

    #[test]
    fn gru_saturated_update_gate_takes_candidate() {
        let mut ps = ParamSet::new();
        let p = GruParams::init(&mut ps, "g", 2, 2, &mut rng()).unwrap();
        ps.zero_all();
        ps.get_mut(p.b_z).data_mut().iter_mut().for_each(|v| *v = 60.0);
        let mut tape = Tape::with_params(&ps);
        let x = tape.zeros(2);
        let h = tape.constant_vec(vec![0.7, -0.9]).unwrap();
        let out = gru_step(&mut tape, x, h, &p).unwrap();
        assert!(tape.value(out).iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn gru_matches_formula_oracle() {
        let mut ps = ParamSet::new();
        let p = GruParams::init(&mut ps, "g", 2, 2, &mut rng()).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
        let (x, h) = ([0.5, -1.5], [0.25, 0.6]);
        let want = gru_oracle(&ps, &p, &x, &h);
        let mut tape = Tape::with_params(&ps);
        let xv = tape.constant_vec(x.to_vec()).unwrap();
        let hv = tape.constant_vec(h.to_vec()).unwrap();
        let out = gru_step(&mut tape, xv, hv, &p).unwrap();
        for (a, b) in tape.value(out).iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gru_rejects_wrong_dims() {
        let mut ps = ParamSet::new();
        let p = GruParams::init(&mut ps, "g", 3, 2, &mut rng()).unwrap();
        let mut tape = Tape::with_params(&ps);
        let x = tape.zeros(2);
        let h = tape.zeros(2);
        assert!(gru_step(&mut tape, x, h, &p).is_err());
    }

    #[test]
    fn lstm_zero_params_stays_at_zero() {
        let mut ps = ParamSet::new();
        let p = LstmParams::init(&mut ps, "l", 2, 3, &mut rng()).unwrap();
        ps.zero_all();
        let mut tape = Tape::with_params(&ps);
        let x = tape.constant_vec(vec![1.0, -2.0]).unwrap();
        let s = p.zero_state(&mut tape);
        let out = lstm_step(&mut tape, x, s, &p).unwrap();
        assert_eq!(tape.value(out.c), &[0.0; 3]);
        assert_eq!(tape.value(out.h), &[0.0; 3]);
    }

    #[test]
    fn lstm_carries_cell_when_forget_open_and_input_closed() {
        let mut ps = ParamSet::new();
        let p = LstmParams::init(&mut ps, "l", 2, 2, &mut rng()).unwrap();
        ps.zero_all();
        let b = ps.get_mut(p.b).data_mut();
        b[0..2].iter_mut().for_each(|v| *v = -800.0);
        b[2..4].iter_mut().for_each(|v| *v = 800.0);
        let mut tape = Tape::with_params(&ps);
        let x = tape.constant_vec(vec![0.1, 0.2]).unwrap();
        let h = tape.constant_vec(vec![0.3, 0.4]).unwrap();
        let c = tape.constant_vec(vec![1.5, -0.5]).unwrap();
        let out = lstm_step(&mut tape, x, LstmState { h, c }, &p).unwrap();
        assert_eq!(tape.value(out.c), &[1.5, -0.5]);
    }

    #[test]
    fn lstm_matches_formula_oracle() {
        let mut ps = ParamSet::new();
        let p = LstmParams::init(&mut ps, "l", 2, 2, &mut rng()).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
        let (x, h, c) = ([0.5, -1.5], [0.25, 0.6], [-0.3, 0.9]);
        let pre = add(&add(&matvec(&ps, p.w, &x), &matvec(&ps, p.u, &h)), ps.get(p.b).data());
        let want_c: Vec<f64> =
            (0..2).map(|k| sigmoid(pre[2 + k]) * c[k] + sigmoid(pre[k]) * pre[4 + k].tanh()).collect();
        let want_h: Vec<f64> = (0..2).map(|k| sigmoid(pre[6 + k]) * want_c[k].tanh()).collect();
        let mut tape = Tape::with_params(&ps);
        let xv = tape.constant_vec(x.to_vec()).unwrap();
        let hv = tape.constant_vec(h.to_vec()).unwrap();
        let cv = tape.constant_vec(c.to_vec()).unwrap();
        let out = lstm_step(&mut tape, xv, LstmState { h: hv, c: cv }, &p).unwrap();
        for k in 0..2 {
            assert!((tape.value(out.c)[k] - want_c[k]).abs() < 1e-14);
            assert!((tape.value(out.h)[k] - want_h[k]).abs() < 1e-14);
        }
    }

    fn two_grus(ps: &mut ParamSet) -> (GruParams, GruParams) {
        let mut r = rng();
        (GruParams::init(ps, "f", 2, 3, &mut r).unwrap(), GruParams::init(ps, "b", 2, 3, &mut r).unwrap())
    }

    #[test]
    fn birnn_single_position() {
        let mut ps = ParamSet::new();
        let (f, b) = two_grus(&mut ps);
        let mut tape = Tape::with_params(&ps);
        let x = tape.constant_vec(vec![0.4, -0.6]).unwrap();
        let states = birnn(&mut tape, &[x], &f, &b).unwrap();
        let h = states.concat(&mut tape).unwrap();
        let z = tape.zeros(3);
        let fo = gru_step(&mut tape, x, z, &f).unwrap();
        let bo = gru_step(&mut tape, x, z, &b).unwrap();
        let want: Vec<f64> = [tape.value(fo), tape.value(bo)].concat();
        assert_eq!(tape.value(h[0]), want.as_slice());
    }

    #[test]
    fn birnn_halves_are_directional_unrolls() {
        let mut ps = ParamSet::new();
        let (f, b) = two_grus(&mut ps);
        let mut tape = Tape::with_params(&ps);
        let seq: Vec<Var> =
            [[0.1, 0.2], [-0.5, 0.3], [0.9, -0.7]].iter().map(|v| tape.constant_vec(v.to_vec()).unwrap()).collect();
        let states = birnn(&mut tape, &seq, &f, &b).unwrap();
        // forward oracle: three explicit steps
        let mut h = tape.zeros(3);
        for &x in &seq {
            h = gru_step(&mut tape, x, h, &f).unwrap();
        }
        assert_eq!(tape.value(states.fwd[2]), tape.value(h));
        // reversing input and swapping params reverses output with halves swapped
        let rev: Vec<Var> = seq.iter().rev().copied().collect();
        let swapped = birnn(&mut tape, &rev, &b, &f).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(swapped.fwd[i]), tape.value(states.bwd[2 - i]));
            assert_eq!(tape.value(swapped.bwd[i]), tape.value(states.fwd[2 - i]));
        }
        assert!(birnn(&mut tape, &[], &f, &b).is_err());
    }

    #[test]
    fn cells_pass_gradient_check() {
        let mut ps = ParamSet::new();
        let mut r = rng();
        let g = GruParams::init(&mut ps, "g", 3, 4, &mut r).unwrap();
        let l = LstmParams::init(&mut ps, "l", 4, 3, &mut r).unwrap();
        let xs = ps.insert("xs", Tensor::uniform(&[3, 3], 1.0, &mut r)).unwrap();
        let report = grad_check(&mut ps, &[], 1e-5, |tape| {
            let table = tape.param(xs);
            let seq: Vec<Var> = (0..3).map(|i| tape.lookup(table, i)).collect::<Result<_>>()?;
            let hs = unroll(tape, &seq, &g)?;
            let ls = unroll(tape, &hs, &l)?;
            let last = ls.last().unwrap().h;
            let sq = tape.mul(last, last)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
