use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{bigru_encode, BiGruParams};
use crate::error::{dim_err, Result};
use crate::numerics::{Binding, Linear, ParamStore, Tape, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscLayout {
    /// Encodes the patches of a (real or predicted) future grid.
    pub encoder: BiGruParams,
    /// `[mean encoded patch ; r] → hidden`.
    pub fuse: Linear,
    pub out: Linear,
}

/// Scores how plausible a future grid is given the memory output it is
/// conditioned on.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub store: ParamStore<T>,
    pub layout: DiscLayout,
    pub dim: usize,
    pub cond_dim: usize,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(dim: usize, cond_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = BiGruParams::register(&mut store, "disc.encoder", dim, hidden, &mut rng)?;
        let fuse = Linear::register(&mut store, "disc.fuse", 2 * hidden + cond_dim, hidden, true, &mut rng)?;
        let out = Linear::register(&mut store, "disc.out", hidden, 1, true, &mut rng)?;
        Ok(Self {
            store,
            layout: DiscLayout { encoder, fuse, out },
            dim,
            cond_dim,
        })
    }

    /// Pre-sigmoid score of `eta` (one node per patch) conditioned on `r`.
    pub fn logit(&self, tape: &mut Tape<T>, bind: &Binding, r: Var, eta: &[Var]) -> Result<Var> {
        if tape.value(r).len() != self.cond_dim {
            return dim_err("discriminator", "condition width mismatch");
        }
        let enc = bigru_encode(tape, bind, &self.layout.encoder, eta)?;
        let summary = tape.mean(&enc)?;
        let x = tape.concat(&[summary, r])?;
        let h = self.layout.fuse.apply(tape, bind, x)?;
        let h = tape.tanh(h)?;
        self.layout.out.apply(tape, bind, h)
    }
}
