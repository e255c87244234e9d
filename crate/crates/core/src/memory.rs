//! FIFO external memory of raw patch-embedding grids and its hierarchical read.

use rand::Rng;

use crate::attention::{attend_or_mean, output_augment, patch_augment, AttentionParams, Tiers};
use crate::encoders::{bigru_encode, BiGruParams};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Binding, Linear, ParamStore, Tape, Var};
use crate::scalar::Scalar;

/// One frame's grid of `patches` embeddings of length `dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    patches: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn new(patches: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if patches * dim != data.len() {
            return dim_err(
                "feature_grid",
                format!("{patches}x{dim} grid needs {} values, got {}", patches * dim, data.len()),
            );
        }
        Ok(Self { patches, dim, data })
    }

    pub fn zeros(patches: usize, dim: usize) -> Self {
        Self {
            patches,
            dim,
            data: vec![T::zero(); patches * dim],
        }
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch(&self, k: usize) -> &[T] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Records each patch as a constant on `tape`.
    pub fn to_vars(&self, tape: &mut Tape<T>) -> Result<Vec<Var>> {
        (0..self.patches)
            .map(|k| tape.constant(self.patch(k).to_vec()))
            .collect()
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> FeatureGrid<U> {
        FeatureGrid {
            patches: self.patches,
            dim: self.dim,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// `capacity` slots of raw grids, oldest first, plus the previous read output.
///
/// Only the newest `len()` slots are valid; the rest hold zero grids.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState<T> {
    capacity: usize,
    patches: usize,
    dim: usize,
    hidden: usize,
    slots: Vec<FeatureGrid<T>>,
    count: usize,
    r_prev: Vec<T>,
}

impl<T: Scalar> MemoryState<T> {
    /// Empty memory: zero slots, none valid, zero previous read.
    pub fn reset(capacity: usize, patches: usize, dim: usize, hidden: usize) -> Result<Self> {
        if capacity == 0 || patches == 0 || dim == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "memory dimensions must be positive (L={capacity}, K={patches}, d={dim}, H={hidden})"
            )));
        }
        Ok(Self {
            capacity,
            patches,
            dim,
            hidden,
            slots: vec![FeatureGrid::zeros(patches, dim); capacity],
            count: 0,
            r_prev: vec![T::zero(); 2 * hidden],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Number of valid slots.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn slots(&self) -> &[FeatureGrid<T>] {
        &self.slots
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        (0..self.capacity).map(|i| self.is_valid(i)).collect()
    }

    pub fn is_valid(&self, slot: usize) -> bool {
        slot >= self.capacity - self.count && slot < self.capacity
    }

    /// The valid slots, oldest first.
    pub fn valid_slots(&self) -> &[FeatureGrid<T>] {
        &self.slots[self.capacity - self.count..]
    }

    pub fn r_prev(&self) -> &[T] {
        &self.r_prev
    }

    pub fn set_r_prev(&mut self, r: Vec<T>) -> Result<()> {
        if r.len() != 2 * self.hidden {
            return dim_err("set_r_prev", format!("expected {}, got {}", 2 * self.hidden, r.len()));
        }
        self.r_prev = r;
        Ok(())
    }

    /// Drops the oldest slot and appends `f` as the newest, unchanged.
    pub fn update(&mut self, f: FeatureGrid<T>) -> Result<()> {
        if f.patches() != self.patches || f.dim() != self.dim {
            return dim_err(
                "memory_update",
                format!(
                    "grid is {}x{}, memory holds {}x{}",
                    f.patches(),
                    f.dim(),
                    self.patches,
                    self.dim
                ),
            );
        }
        self.slots.rotate_left(1);
        self.slots[self.capacity - 1] = f;
        self.count = (self.count + 1).min(self.capacity);
        Ok(())
    }
}

/// Parameters of the hierarchical read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HmnMemoryParams {
    /// Encodes the patches of each stored grid (`d → 2H`).
    pub patch_encoder: BiGruParams,
    /// Patch-level attention over `[m ⊙ f ; |m - f|]` (`4H`).
    pub patch_attention: AttentionParams,
    /// Encodes the sequence of per-slot summaries (`4H → 2H`).
    pub frame_encoder: BiGruParams,
    /// Frame-level attention over `[ρ ⊙ q ; ρ ⊙ r_prev ; |ρ - q|]` (`6H`).
    pub frame_attention: AttentionParams,
    /// Projects the pooled `6H` vector to the `2H` read output.
    pub output: Linear,
}

impl HmnMemoryParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        dim: usize,
        hidden: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h2 = 2 * hidden;
        Ok(Self {
            patch_encoder: BiGruParams::register(store, "memory.patch_encoder", dim, hidden, rng)?,
            patch_attention: AttentionParams::register(store, "memory.patch_attention", 2 * h2, attn_dim, rng)?,
            frame_encoder: BiGruParams::register(store, "memory.frame_encoder", 2 * h2, hidden, rng)?,
            frame_attention: AttentionParams::register(store, "memory.frame_attention", 3 * h2, attn_dim, rng)?,
            output: Linear::register(store, "memory.output", 3 * h2, h2, true, rng)?,
        })
    }
}

/// Per-tape cache of encoded stored grids, aligned with the memory slots.
///
/// A stored grid is immutable, so its encoding is reused by every read on
/// the same tape; gradients from all reads accumulate into the shared nodes.
#[derive(Clone, Debug, Default)]
pub struct EncodedSlots {
    enc: Vec<Option<Vec<Var>>>,
}

impl EncodedSlots {
    pub fn new(capacity: usize) -> Self {
        Self {
            enc: vec![None; capacity],
        }
    }

    /// Mirrors [`MemoryState::update`].
    pub fn shift(&mut self) {
        self.enc.rotate_left(1);
        if let Some(last) = self.enc.last_mut() {
            *last = None;
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReadOutput {
    pub r: Var,
    /// Patch weights per slot; `None` for invalid slots.
    pub alpha: Vec<Option<Var>>,
    /// Frame weights over the valid slots, oldest first; `None` when empty.
    pub gamma: Option<Var>,
}

fn check_config<T: Scalar>(p: &HmnMemoryParams, state: &MemoryState<T>) -> Result<()> {
    let enc = &p.patch_encoder;
    if enc.fwd.input_dim != state.dim() || enc.hidden() != state.hidden() {
        return Err(Error::Config(format!(
            "memory holds d={} H={}, parameters expect d={} H={}",
            state.dim(),
            state.hidden(),
            enc.fwd.input_dim,
            enc.hidden()
        )));
    }
    Ok(())
}

/// Hierarchical read against an explicit previous-output node.
///
/// For every valid slot: encode its patches, augment each against the
/// encoded input patch at the same position, pool over patches (α) into
/// `ρ_i`. Encode the `ρ` sequence, augment with `q` and `r_prev`, pool over
/// slots (γ) and project to `r`. Empty memory reads as the zero vector.
#[allow(clippy::too_many_arguments)]
pub fn read_with<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &HmnMemoryParams,
    state: &MemoryState<T>,
    cache: &mut EncodedSlots,
    input_enc: &[Var],
    q: Var,
    r_prev: Var,
    tiers: Tiers,
) -> Result<ReadOutput> {
    check_config(p, state)?;
    let h2 = 2 * state.hidden();
    if input_enc.len() != state.patches() {
        return dim_err(
            "memory_read",
            format!("{} encoded patches, memory has K={}", input_enc.len(), state.patches()),
        );
    }
    if tape.value(q).len() != h2 || tape.value(r_prev).len() != h2 {
        return dim_err("memory_read", "query and previous read must have length 2H");
    }
    if cache.enc.len() != state.capacity() {
        *cache = EncodedSlots::new(state.capacity());
    }

    let mut alpha = vec![None; state.capacity()];
    if state.is_empty() {
        let r = tape.zeros(h2);
        return Ok(ReadOutput { r, alpha, gamma: None });
    }

    let first = state.capacity() - state.len();
    let mut rhos = Vec::with_capacity(state.len());
    for i in first..state.capacity() {
        let enc = match &cache.enc[i] {
            Some(e) => e.clone(),
            None => {
                let patches = state.slots()[i].to_vars(tape)?;
                let e = bigru_encode(tape, bind, &p.patch_encoder, &patches)?;
                cache.enc[i] = Some(e.clone());
                e
            }
        };
        let xs = enc
            .iter()
            .zip(input_enc)
            .map(|(&m, &f)| patch_augment(tape, m, f))
            .collect::<Result<Vec<_>>>()?;
        let a = attend_or_mean(tape, bind, &p.patch_attention, &xs, tiers.patch)?;
        alpha[i] = Some(a.weights);
        rhos.push(a.pooled);
    }

    let rho_enc = bigru_encode(tape, bind, &p.frame_encoder, &rhos)?;
    let zs = rho_enc
        .iter()
        .map(|&rho| output_augment(tape, rho, q, r_prev))
        .collect::<Result<Vec<_>>>()?;
    let g = attend_or_mean(tape, bind, &p.frame_attention, &zs, tiers.frame)?;
    let r = p.output.apply(tape, bind, g.pooled)?;
    Ok(ReadOutput {
        r,
        alpha,
        gamma: Some(g.weights),
    })
}

/// Reads with the previous output stored in `state`, then stores the new output there.
pub fn memory_read<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &HmnMemoryParams,
    state: &mut MemoryState<T>,
    input_enc: &[Var],
    q: Var,
    tiers: Tiers,
) -> Result<ReadOutput> {
    let r_prev = tape.constant(state.r_prev().to_vec())?;
    let mut cache = EncodedSlots::new(state.capacity());
    let out = read_with(tape, bind, p, state, &mut cache, input_enc, q, r_prev, tiers)?;
    state.set_r_prev(tape.data(out.r).to_vec())?;
    Ok(out)
}

/// Value-level FIFO append, see [`MemoryState::update`].
pub fn memory_update<T: Scalar>(mut state: MemoryState<T>, f: FeatureGrid<T>) -> Result<MemoryState<T>> {
    state.update(f)?;
    Ok(state)
}

pub fn memory_reset<T: Scalar>(capacity: usize, patches: usize, dim: usize, hidden: usize) -> Result<MemoryState<T>> {
    MemoryState::reset(capacity, patches, dim, hidden)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::VecDeque;

    fn grid(tag: f64, k: usize, d: usize) -> FeatureGrid<f64> {
        FeatureGrid::new(k, d, (0..k * d).map(|i| tag + 0.01 * i as f64).collect()).unwrap()
    }

    #[test]
    fn first_update_fills_newest_slot() {
        let s = memory_reset::<f64>(3, 2, 2, 2).unwrap();
        let s = memory_update(s, grid(1.0, 2, 2)).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.valid_mask(), vec![false, false, true]);
        assert_eq!(s.slots()[2], grid(1.0, 2, 2));
    }

    #[test]
    fn fifo_drops_oldest() {
        let mut s = memory_reset::<f64>(3, 2, 2, 2).unwrap();
        for g in 1..=5 {
            s.update(grid(g as f64, 2, 2)).unwrap();
        }
        assert_eq!(s.valid_slots(), &[grid(3.0, 2, 2), grid(4.0, 2, 2), grid(5.0, 2, 2)]);
    }

    #[test]
    fn reset_rejects_zero_dims_and_is_idempotent() {
        assert!(memory_reset::<f64>(0, 2, 2, 2).is_err());
        assert!(memory_reset::<f64>(2, 2, 0, 2).is_err());
        let a = memory_reset::<f64>(2, 3, 4, 5).unwrap();
        let b = memory_reset::<f64>(2, 3, 4, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.r_prev().iter().all(|&v| v == 0.0));
        assert!(a.is_empty());
    }

    #[test]
    fn update_rejects_wrong_shape() {
        let mut s = memory_reset::<f64>(2, 2, 2, 2).unwrap();
        assert!(s.update(grid(0.0, 3, 2)).is_err());
    }

    #[test]
    fn empty_memory_reads_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let p = HmnMemoryParams::register(&mut store, 2, 2, 3, &mut rng).unwrap();
        let mut s = memory_reset::<f64>(2, 2, 2, 2).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&store).unwrap();
        let enc = vec![tape.constant(vec![0.1; 4]).unwrap(); 2];
        let q = tape.constant(vec![0.2; 4]).unwrap();
        let out = memory_read(&mut tape, &b, &p, &mut s, &enc, q, Tiers::ALL).unwrap();
        assert_eq!(tape.data(out.r), &[0.0; 4]);
        assert!(out.gamma.is_none());
        assert_eq!(s.r_prev(), &[0.0; 4]);
    }

    #[test]
    fn read_leaves_slots_untouched_and_stores_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let p = HmnMemoryParams::register(&mut store, 2, 2, 3, &mut rng).unwrap();
        let mut s = memory_reset::<f64>(3, 2, 2, 2).unwrap();
        s.update(grid(0.3, 2, 2)).unwrap();
        s.update(grid(0.7, 2, 2)).unwrap();
        let before = s.slots().to_vec();
        let mut tape = Tape::new();
        let b = tape.bind(&store).unwrap();
        let enc = vec![tape.constant(vec![0.1, -0.2, 0.3, 0.4]).unwrap(); 2];
        let q = tape.constant(vec![0.2, 0.1, -0.1, 0.5]).unwrap();
        let out = memory_read(&mut tape, &b, &p, &mut s, &enc, q, Tiers::ALL).unwrap();
        assert_eq!(s.slots(), &before[..]);
        assert_eq!(s.r_prev(), tape.data(out.r));
        let g = tape.data(out.gamma.unwrap()).to_vec();
        assert_eq!(g.len(), 2);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out.alpha[0].is_none());
    }

    #[test]
    fn read_rejects_config_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let p = HmnMemoryParams::register(&mut store, 3, 2, 3, &mut rng).unwrap();
        let mut s = memory_reset::<f64>(2, 2, 2, 2).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&store).unwrap();
        let enc = vec![tape.constant(vec![0.1; 4]).unwrap(); 2];
        let q = tape.constant(vec![0.2; 4]).unwrap();
        assert!(matches!(
            memory_read(&mut tape, &b, &p, &mut s, &enc, q, Tiers::ALL),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn valid_slots_equal_last_inputs(cap in 1usize..6, n in 0usize..30) {
            let mut s = memory_reset::<f64>(cap, 2, 3, 1).unwrap();
            let mut oracle = VecDeque::new();
            for i in 0..n {
                let g = grid(i as f64 * 1.37, 2, 3);
                s.update(g.clone()).unwrap();
                oracle.push_back(g);
                if oracle.len() > cap {
                    oracle.pop_front();
                }
            }
            prop_assert_eq!(s.len(), n.min(cap));
            let expect: Vec<_> = oracle.into_iter().collect();
            prop_assert_eq!(s.valid_slots(), &expect[..]);
        }
    }
}
