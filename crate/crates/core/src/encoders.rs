//! Gated recurrent units and the bidirectional encoder/decoder built on them.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Binding, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;

/// One GRU cell: update gate, reset gate and candidate state, each with an
/// input matrix `[hidden, input_dim]`, a recurrent matrix `[hidden, hidden]`
/// and a bias. `input_dim` may be zero for input-free unrolls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub w_update: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
    pub w_reset: ParamId,
    pub u_reset: ParamId,
    pub b_reset: ParamId,
    pub w_cand: ParamId,
    pub u_cand: ParamId,
    pub b_cand: ParamId,
}

impl GruParams {
    /// Weights uniform in `±1/√hidden`, zero biases.
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config(format!("{name}: hidden size must be positive")));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut gate = |g: &str, rng: &mut R| -> Result<(ParamId, ParamId, ParamId)> {
            Ok((
                store.uniform(format!("{name}.w_{g}"), vec![hidden, input_dim], bound, rng)?,
                store.uniform(format!("{name}.u_{g}"), vec![hidden, hidden], bound, rng)?,
                store.zeros(format!("{name}.b_{g}"), vec![hidden])?,
            ))
        };
        let (w_update, u_update, b_update) = gate("update", rng)?;
        let (w_reset, u_reset, b_reset) = gate("reset", rng)?;
        let (w_cand, u_cand, b_cand) = gate("cand", rng)?;
        Ok(Self {
            input_dim,
            hidden,
            w_update,
            u_update,
            b_update,
            w_reset,
            u_reset,
            b_reset,
            w_cand,
            u_cand,
            b_cand,
        })
    }

    pub fn num_scalars(&self) -> usize {
        3 * (self.hidden * self.input_dim + self.hidden * self.hidden + self.hidden)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiGruParams {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

impl BiGruParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fwd: GruParams::register(store, &format!("{name}.fwd"), input_dim, hidden, rng)?,
            bwd: GruParams::register(store, &format!("{name}.bwd"), input_dim, hidden, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    /// Width of each concatenated output state.
    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }
}

/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, returns `(1 - z) ⊙ h + z ⊙ h̃`.
pub fn gru_step<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &GruParams,
    x: Var,
    h_prev: Var,
) -> Result<Var> {
    let z = tape.affine2(bind[p.w_update], x, bind[p.u_update], h_prev, bind[p.b_update])?;
    let z = tape.sigmoid(z)?;
    let r = tape.affine2(bind[p.w_reset], x, bind[p.u_reset], h_prev, bind[p.b_reset])?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h_prev)?;
    let cand = tape.affine2(bind[p.w_cand], x, bind[p.u_cand], rh, bind[p.b_cand])?;
    let cand = tape.tanh(cand)?;
    tape.lerp(h_prev, cand, z)
}

fn unroll<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &GruParams,
    inputs: impl Iterator<Item = Var>,
    init: Var,
) -> Result<Vec<Var>> {
    let mut h = init;
    let mut out = Vec::new();
    for x in inputs {
        h = gru_step(tape, bind, p, x, h)?;
        out.push(h);
    }
    Ok(out)
}

fn join<T: Scalar>(tape: &mut Tape<T>, fwd: &[Var], bwd_rev: &[Var]) -> Result<Vec<Var>> {
    let n = fwd.len();
    (0..n)
        .map(|k| tape.concat(&[fwd[k], bwd_rev[n - 1 - k]]))
        .collect()
}

/// Bidirectional encoding with zero initial states: output `k` is
/// `[forward state after element k ; backward state after element k]`.
pub fn bigru_encode<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &BiGruParams,
    seq: &[Var],
) -> Result<Vec<Var>> {
    if seq.is_empty() {
        return Err(Error::Domain("bigru_encode of empty sequence".into()));
    }
    let h0 = tape.zeros(p.hidden());
    let fwd = unroll(tape, bind, &p.fwd, seq.iter().copied(), h0)?;
    let bwd = unroll(tape, bind, &p.bwd, seq.iter().rev().copied(), h0)?;
    join(tape, &fwd, &bwd)
}

/// Unrolls both directions `steps` times over zero inputs, each seeded with
/// `init`, and returns the `steps` concatenated states in forward order.
pub fn bigru_decode<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &BiGruParams,
    init: Var,
    steps: usize,
) -> Result<Vec<Var>> {
    if steps == 0 {
        return Err(Error::Domain("bigru_decode needs at least one step".into()));
    }
    if tape.value(init).len() != p.hidden() {
        return dim_err(
            "bigru_decode",
            format!("init has {} values, hidden is {}", tape.value(init).len(), p.hidden()),
        );
    }
    let x = tape.zeros(p.fwd.input_dim);
    let fwd = unroll(tape, bind, &p.fwd, std::iter::repeat_n(x, steps), init)?;
    let bwd = unroll(tape, bind, &p.bwd, std::iter::repeat_n(x, steps), init)?;
    join(tape, &fwd, &bwd)
}
