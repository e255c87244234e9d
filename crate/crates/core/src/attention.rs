//! Context-vector attention and the interaction vectors it is applied to.
//!
//! One [`AttentionParams`] instance is used per tier: over the encoded input
//! patches, over the augmented patches of each stored frame, and over the
//! augmented stored frames.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{glorot, Binding, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    /// Projection `[attn_dim, input_dim]`.
    pub weight: ParamId,
    pub bias: ParamId,
    /// Trainable context vector of length `attn_dim`.
    pub context: ParamId,
    pub input_dim: usize,
    pub attn_dim: usize,
}

impl AttentionParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.uniform(
            format!("{name}.weight"),
            vec![attn_dim, input_dim],
            glorot(input_dim, attn_dim),
            rng,
        )?;
        let bias = store.zeros(format!("{name}.bias"), vec![attn_dim])?;
        let context = store.uniform(
            format!("{name}.context"),
            vec![attn_dim],
            1.0 / (attn_dim as f64).sqrt(),
            rng,
        )?;
        Ok(Self {
            weight,
            bias,
            context,
            input_dim,
            attn_dim,
        })
    }
}

/// Which attention tiers are active; an inactive tier is replaced by an
/// unweighted mean of its items.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Tiers {
    /// Over the encoded input patches (query formation).
    pub input: bool,
    /// Over the augmented patches of each stored frame.
    pub patch: bool,
    /// Over the augmented stored frames (memory output).
    pub frame: bool,
}

impl Default for Tiers {
    fn default() -> Self {
        Self::ALL
    }
}

impl Tiers {
    pub const ALL: Tiers = Tiers {
        input: true,
        patch: true,
        frame: true,
    };
}

/// Attends with `p` when `enabled`, otherwise pools uniformly.
pub fn attend_or_mean<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &AttentionParams,
    items: &[Var],
    enabled: bool,
) -> Result<Attended> {
    if enabled {
        attend(tape, bind, p, items)
    } else {
        uniform_pool(tape, items)
    }
}

/// Attention weights over a list of items and the weighted pool of the items.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub weights: Var,
    pub pooled: Var,
}

/// `s_k = tanh(W·item_k + b)ᵀ c`, `weights = softmax(s)`, `pooled = Σ_k weights_k item_k`.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    bind: &Binding,
    p: &AttentionParams,
    items: &[Var],
) -> Result<Attended> {
    if items.is_empty() {
        return Err(Error::Domain("attend over empty item list".into()));
    }
    let scores = items
        .iter()
        .map(|&it| {
            let h = tape.affine(bind[p.weight], it, Some(bind[p.bias]))?;
            let h = tape.tanh(h)?;
            tape.dot(h, bind[p.context])
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = tape.concat(&scores)?;
    let weights = tape.softmax(scores)?;
    let pooled = tape.weighted_sum(weights, items)?;
    Ok(Attended { weights, pooled })
}

/// Unweighted mean, used where an attention tier is ablated.
pub fn uniform_pool<T: Scalar>(tape: &mut Tape<T>, items: &[Var]) -> Result<Attended> {
    if items.is_empty() {
        return Err(Error::Domain("pool over empty item list".into()));
    }
    let n = items.len();
    let weights = tape.constant(vec![T::one() / T::from_usize(n).unwrap(); n])?;
    let pooled = tape.mean(items)?;
    Ok(Attended { weights, pooled })
}

/// `[m ⊙ f ; |m - f|]` for an encoded stored patch `m` and encoded input patch `f`.
pub fn patch_augment<T: Scalar>(tape: &mut Tape<T>, mem_patch: Var, in_patch: Var) -> Result<Var> {
    if tape.value(mem_patch).len() != tape.value(in_patch).len() {
        return dim_err("patch_augment", "operands differ in length");
    }
    let prod = tape.mul(mem_patch, in_patch)?;
    let diff = tape.abs_diff(mem_patch, in_patch)?;
    tape.concat(&[prod, diff])
}

/// `[ρ ⊙ q ; ρ ⊙ r_prev ; |ρ - q|]`.
pub fn output_augment<T: Scalar>(tape: &mut Tape<T>, rho: Var, q: Var, r_prev: Var) -> Result<Var> {
    let n = tape.value(rho).len();
    if tape.value(q).len() != n || tape.value(r_prev).len() != n {
        return dim_err("output_augment", "operands differ in length");
    }
    let a = tape.mul(rho, q)?;
    let b = tape.mul(rho, r_prev)?;
    let c = tape.abs_diff(rho, q)?;
    tape.concat(&[a, b, c])
}
