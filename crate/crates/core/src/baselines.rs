//! Flat-memory baselines: content-addressed erase/add memory (NTM style) and
//! augmented-interaction memory with a recomputed update (DMN style).
//!
//! Both store one vector per slot and consume the mean of the encoded input
//! patches as their per-step input.

use rand::Rng;

use crate::attention::{attend, AttentionParams};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Binding, Linear, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

const NORM_TOL: f64 = 1e-9;

/// `capacity` slots of width `width` plus the previous read.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatMemoryState<T> {
    width: usize,
    slots: Vec<Vec<T>>,
    valid: Vec<bool>,
    r_prev: Vec<T>,
}

impl<T: Scalar> FlatMemoryState<T> {
    /// Zero slots, none valid.
    pub fn reset(capacity: usize, width: usize) -> Result<Self> {
        if capacity == 0 || width == 0 {
            return Err(Error::Config(format!(
                "flat memory dimensions must be positive (L={capacity}, width={width})"
            )));
        }
        Ok(Self {
            width,
            slots: vec![vec![T::zero(); width]; capacity],
            valid: vec![false; capacity],
            r_prev: vec![T::zero(); width],
        })
    }

    /// All slots valid, initialised from the rows of `init` (`[L, width]`).
    pub fn from_init(init: &Tensor<T>) -> Result<Self> {
        let (capacity, width) = init.dims2();
        let mut s = Self::reset(capacity, width)?;
        for (slot, row) in s.slots.iter_mut().zip(init.data().chunks_exact(width)) {
            slot.copy_from_slice(row);
        }
        s.valid.iter_mut().for_each(|v| *v = true);
        Ok(s)
    }

    /// Builds a state from explicit slot contents, all valid.
    pub fn from_slots(slots: Vec<Vec<T>>) -> Result<Self> {
        let width = slots.first().map_or(0, Vec::len);
        let mut s = Self::reset(slots.len(), width)?;
        if slots.iter().any(|v| v.len() != width) {
            return dim_err("flat_memory", "slots differ in width");
        }
        s.slots = slots;
        s.valid.iter_mut().for_each(|v| *v = true);
        Ok(s)
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn slots(&self) -> &[Vec<T>] {
        &self.slots
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn r_prev(&self) -> &[T] {
        &self.r_prev
    }

    fn check_gamma(&self, gamma: &[T]) -> Result<()> {
        if gamma.len() != self.capacity() {
            return dim_err("flat_memory", format!("{} weights for {} slots", gamma.len(), self.capacity()));
        }
        let mut total = 0.0;
        for (&g, &ok) in gamma.iter().zip(&self.valid) {
            let g = g.to_f64_lossy();
            if g < 0.0 || (!ok && g != 0.0) {
                return Err(Error::Domain(format!("invalid slot weight {g}")));
            }
            total += g;
        }
        if (total - 1.0).abs() > NORM_TOL {
            return Err(Error::Domain(format!("slot weights sum to {total}")));
        }
        Ok(())
    }
}

/// `r = Σ_i γ_i M_i`; stores `r` as the previous read.
pub fn ntm_read<T: Scalar>(state: &mut FlatMemoryState<T>, gamma: &[T]) -> Result<Vec<T>> {
    state.check_gamma(gamma)?;
    let mut r = vec![T::zero(); state.width];
    for (&g, slot) in gamma.iter().zip(&state.slots) {
        for (o, &m) in r.iter_mut().zip(slot) {
            *o += g * m;
        }
    }
    state.r_prev = r.clone();
    Ok(r)
}

/// Erase then add: `M_i ← M_i ⊙ (1 - γ_i e) + γ_i a`.
pub fn ntm_update<T: Scalar>(
    mut state: FlatMemoryState<T>,
    gamma: &[T],
    erase: &[T],
    add: &[T],
) -> Result<FlatMemoryState<T>> {
    if gamma.len() != state.capacity() || erase.len() != state.width || add.len() != state.width {
        return dim_err("ntm_update", "weights, erase or add do not match the memory shape");
    }
    for (&g, slot) in gamma.iter().zip(state.slots.iter_mut()) {
        for ((m, &e), &a) in slot.iter_mut().zip(erase).zip(add) {
            *m = *m * (T::one() - g * e) + g * a;
        }
    }
    Ok(state)
}

/// Slot contents recorded on a tape, oldest first.
pub type TapeSlots = Vec<Var>;

/// Splits a `[L, width]` parameter leaf into per-slot nodes.
pub fn slots_from_matrix<T: Scalar>(tape: &mut Tape<T>, matrix: Var) -> Result<TapeSlots> {
    let (rows, width) = tape.value(matrix).dims2();
    (0..rows).map(|i| tape.slice(matrix, i * width, width)).collect()
}

pub fn slots_as_constants<T: Scalar>(tape: &mut Tape<T>, state: &FlatMemoryState<T>) -> Result<TapeSlots> {
    state.slots.iter().map(|s| tape.constant(s.clone())).collect()
}

pub fn slots_to_state<T: Scalar>(tape: &Tape<T>, slots: &[Var], r_prev: Option<Var>) -> Result<FlatMemoryState<T>> {
    let mut s = FlatMemoryState::from_slots(slots.iter().map(|&v| tape.data(v).to_vec()).collect())?;
    if let Some(r) = r_prev {
        s.r_prev = tape.data(r).to_vec();
    }
    Ok(s)
}

/// Tape form of [`ntm_read`].
pub fn ntm_read_tape<T: Scalar>(tape: &mut Tape<T>, slots: &[Var], gamma: Var) -> Result<Var> {
    tape.weighted_sum(gamma, slots)
}

/// Tape form of [`ntm_update`].
pub fn ntm_update_tape<T: Scalar>(
    tape: &mut Tape<T>,
    slots: &[Var],
    gamma: Var,
    erase: Var,
    add: Var,
) -> Result<TapeSlots> {
    if tape.value(gamma).len() != slots.len() {
        return dim_err("ntm_update", "one weight per slot required");
    }
    slots
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let g = tape.slice(gamma, i, 1)?;
            let ge = tape.scale_by(erase, g)?;
            let erased = tape.mul(m, ge)?;
            let kept = tape.sub(m, erased)?;
            let ga = tape.scale_by(add, g)?;
            tape.add(kept, ga)
        })
        .collect()
}

/// Content addressing, erase and add heads, and a learned initial memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NtmParams {
    pub key: Linear,
    pub strength: Linear,
    pub erase: Linear,
    pub add: Linear,
    pub init_memory: ParamId,
}

impl NtmParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        capacity: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            key: Linear::register(store, "ntm.key", width, width, true, rng)?,
            strength: Linear::register(store, "ntm.strength", width, 1, true, rng)?,
            erase: Linear::register(store, "ntm.erase", width, width, true, rng)?,
            add: Linear::register(store, "ntm.add", width, width, true, rng)?,
            init_memory: store.uniform("ntm.init_memory", vec![capacity, width], 0.1, rng)?,
        })
    }
}

pub struct FlatRead {
    pub r: Var,
    pub gamma: Var,
}

/// `γ = softmax(β · cos(k, M_i))` with key `k = tanh(W_k s + b_k)` and
/// strength `β = softplus(w_β · s + b_β)`.
pub fn ntm_address<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &NtmParams,
    slots: &[Var],
    summary: Var,
) -> Result<Var> {
    let key = p.key.apply(tape, bind, summary)?;
    let key = tape.tanh(key)?;
    let beta = p.strength.apply(tape, bind, summary)?;
    let beta = tape.softplus(beta)?;
    let sims = slots
        .iter()
        .map(|&m| tape.cosine(key, m))
        .collect::<Result<Vec<_>>>()?;
    let sims = tape.concat(&sims)?;
    let logits = tape.scale_by(sims, beta)?;
    tape.softmax(logits)
}

/// Address, read, then erase/add with the same weights.
pub fn ntm_step<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &NtmParams,
    slots: &mut TapeSlots,
    summary: Var,
) -> Result<FlatRead> {
    let gamma = ntm_address(tape, bind, p, slots, summary)?;
    let r = ntm_read_tape(tape, slots, gamma)?;
    let e = p.erase.apply(tape, bind, summary)?;
    let e = tape.sigmoid(e)?;
    let a = p.add.apply(tape, bind, summary)?;
    let a = tape.tanh(a)?;
    *slots = ntm_update_tape(tape, slots, gamma, e, a)?;
    Ok(FlatRead { r, gamma })
}

/// Attention over augmented slots, a bias-free read projection, a bias-free
/// memory recomputation and a learned initial memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DmnParams {
    pub attention: AttentionParams,
    pub project: Linear,
    pub update: Linear,
    pub init_memory: ParamId,
}

impl DmnParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        capacity: usize,
        width: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            attention: AttentionParams::register(store, "dmn.attention", 4 * width, attn_dim, rng)?,
            project: Linear::register(store, "dmn.project", 4 * width, width, false, rng)?,
            update: Linear::register(store, "dmn.update", 3 * width, width, false, rng)?,
            init_memory: store.uniform("dmn.init_memory", vec![capacity, width], 0.1, rng)?,
        })
    }
}

/// `μ_i = [f ⊙ q ; M_i ⊙ f ; |f - M_i| ; |f - q|]`, attended and projected.
pub fn dmn_read<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &DmnParams,
    slots: &[Var],
    q: Var,
    f: Var,
) -> Result<FlatRead> {
    let fq = tape.mul(f, q)?;
    let dq = tape.abs_diff(f, q)?;
    let mus = slots
        .iter()
        .map(|&m| {
            let mf = tape.mul(m, f)?;
            let dm = tape.abs_diff(f, m)?;
            tape.concat(&[fq, mf, dm, dq])
        })
        .collect::<Result<Vec<_>>>()?;
    let att = attend(tape, bind, &p.attention, &mus)?;
    let r = p.project.apply(tape, bind, att.pooled)?;
    Ok(FlatRead { r, gamma: att.weights })
}

/// `M_i ← relu(W̃ [M_i ; r ; q])` for every slot.
pub fn dmn_update<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &DmnParams,
    slots: &[Var],
    r: Var,
    q: Var,
) -> Result<TapeSlots> {
    slots
        .iter()
        .map(|&m| {
            let x = tape.concat(&[m, r, q])?;
            let y = p.update.apply(tape, bind, x)?;
            tape.relu(y)
        })
        .collect()
}

pub fn dmn_step<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &DmnParams,
    slots: &mut TapeSlots,
    q: Var,
    f: Var,
) -> Result<FlatRead> {
    let read = dmn_read(tape, bind, p, slots, q, f)?;
    *slots = dmn_update(tape, bind, p, slots, read.r, q)?;
    Ok(read)
}
