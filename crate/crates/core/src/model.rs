//! The full per-frame step: patch encoding, query formation, memory read,
//! real/fake classification, future-grid prediction and memory update.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_or_mean, AttentionParams, Tiers};
use crate::baselines::{
    dmn_step, ntm_step, slots_as_constants, slots_from_matrix, slots_to_state, DmnParams, FlatMemoryState,
    NtmParams, TapeSlots,
};
use crate::encoders::{bigru_decode, bigru_encode, BiGruParams};
use crate::error::{dim_err, Error, Result};
use crate::memory::{read_with, EncodedSlots, FeatureGrid, HmnMemoryParams, MemoryState};
use crate::numerics::{Binding, Linear, ParamStore, Tape, Var};
use crate::scalar::Scalar;

/// Index of the "fake" class in the classifier output.
pub const FAKE: usize = 1;
pub const REAL: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryKind {
    Hmn,
    Ntm,
    Dmn,
}

impl MemoryKind {
    pub fn name(self) -> &'static str {
        match self {
            MemoryKind::Hmn => "hmn",
            MemoryKind::Ntm => "ntm",
            MemoryKind::Dmn => "dmn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hmn" => Ok(MemoryKind::Hmn),
            "ntm" => Ok(MemoryKind::Ntm),
            "dmn" => Ok(MemoryKind::Dmn),
            _ => Err(Error::Config(format!("unknown memory kind {s:?} (expected hmn, ntm or dmn)"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Memory slots `L`.
    pub memory_len: usize,
    /// Patches per frame `K`.
    pub patches: usize,
    /// Feature width per patch `d`.
    pub dim: usize,
    /// GRU hidden size `H`; encoded vectors have width `2H`.
    pub hidden: usize,
    pub attn_dim: usize,
    /// Width of the noise vector fed to the decoder.
    pub noise_dim: usize,
    pub kind: MemoryKind,
    pub tiers: Tiers,
}

impl ModelConfig {
    pub fn with_dims(memory_len: usize, patches: usize, dim: usize, hidden: usize) -> Self {
        Self {
            memory_len,
            patches,
            dim,
            hidden,
            attn_dim: hidden,
            noise_dim: 16,
            kind: MemoryKind::Hmn,
            tiers: Tiers::ALL,
        }
    }

    pub fn desk() -> Self {
        Self::with_dims(16, 16, 16, 24)
    }

    pub fn full_scale() -> Self {
        Self::with_dims(200, 196, 256, 300)
    }

    pub fn tiny() -> Self {
        Self::with_dims(2, 2, 2, 2)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.memory_len, self.patches, self.dim, self.hidden, self.attn_dim];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryParams {
    Hmn(HmnMemoryParams),
    Ntm(NtmParams),
    Dmn(DmnParams),
}

/// Parameter handles into [`HmnParams::store`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub input_encoder: BiGruParams,
    /// Absent for the NTM baseline, which reads from the mean patch encoding.
    pub input_attention: Option<AttentionParams>,
    pub memory: MemoryParams,
    pub classifier: Linear,
    /// `[r ; z] → H` seed of the decoder.
    pub decoder_init: Linear,
    pub decoder: BiGruParams,
    pub regressor: Linear,
}

/// All generator-side parameters for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct HmnParams<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layout: Layout,
}

impl<T: Scalar> HmnParams<T> {
    /// Registers and initialises every parameter from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let (h, w) = (config.hidden, config.width());
        let input_encoder = BiGruParams::register(&mut store, "input_encoder", config.dim, h, rng)?;
        let input_attention = match config.kind {
            MemoryKind::Ntm => None,
            _ => Some(AttentionParams::register(&mut store, "input_attention", w, config.attn_dim, rng)?),
        };
        let memory = match config.kind {
            MemoryKind::Hmn => MemoryParams::Hmn(HmnMemoryParams::register(
                &mut store,
                config.dim,
                h,
                config.attn_dim,
                rng,
            )?),
            MemoryKind::Ntm => MemoryParams::Ntm(NtmParams::register(&mut store, config.memory_len, w, rng)?),
            MemoryKind::Dmn => MemoryParams::Dmn(DmnParams::register(
                &mut store,
                config.memory_len,
                w,
                config.attn_dim,
                rng,
            )?),
        };
        let classifier = Linear::register(&mut store, "classifier", w, 2, true, rng)?;
        let decoder_init = Linear::register(&mut store, "decoder_init", w + config.noise_dim, h, true, rng)?;
        let decoder = BiGruParams::register(&mut store, "decoder", 0, h, rng)?;
        let regressor = Linear::register(&mut store, "regressor", w, config.dim, true, rng)?;
        if config.kind == MemoryKind::Hmn {
            tie_initial(&mut store, "input_encoder.", "memory.patch_encoder.");
        }
        let params = Self {
            config,
            store,
            layout: Layout {
                input_encoder,
                input_attention,
                memory,
                classifier,
                decoder_init,
                decoder,
                regressor,
            },
        };
        log::info!(
            "{} model: {} trainable parameters in {} tensors",
            config.kind.name(),
            params.store.num_scalars(),
            params.store.len()
        );
        Ok(params)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Memory at the start of an episode.
    pub fn fresh_memory(&self) -> Result<EpisodeMemory<T>> {
        let c = &self.config;
        Ok(match c.kind {
            MemoryKind::Hmn => EpisodeMemory::Hmn(MemoryState::reset(c.memory_len, c.patches, c.dim, c.hidden)?),
            _ => EpisodeMemory::Flat(None),
        })
    }

    /// Records `mem` on `tape` so a run of steps can share one graph.
    pub fn attach(&self, tape: &mut Tape<T>, bind: &Binding, mem: EpisodeMemory<T>) -> Result<LiveMemory<T>> {
        Ok(match mem {
            EpisodeMemory::Hmn(state) => {
                let r_prev = tape.constant(state.r_prev().to_vec())?;
                LiveMemory::Hmn {
                    cache: EncodedSlots::new(state.capacity()),
                    state,
                    r_prev,
                }
            }
            EpisodeMemory::Flat(None) => {
                let init = match self.layout.memory {
                    MemoryParams::Ntm(p) => p.init_memory,
                    MemoryParams::Dmn(p) => p.init_memory,
                    MemoryParams::Hmn(_) => return Err(Error::Config("flat memory on an HMN model".into())),
                };
                LiveMemory::Flat {
                    slots: slots_from_matrix(tape, bind[init])?,
                }
            }
            EpisodeMemory::Flat(Some(state)) => LiveMemory::Flat {
                slots: slots_as_constants(tape, &state)?,
            },
        })
    }

    /// Reads the current memory values off `tape`.
    pub fn detach(&self, tape: &Tape<T>, live: LiveMemory<T>) -> Result<EpisodeMemory<T>> {
        Ok(match live {
            LiveMemory::Hmn { mut state, r_prev, .. } => {
                state.set_r_prev(tape.data(r_prev).to_vec())?;
                EpisodeMemory::Hmn(state)
            }
            LiveMemory::Flat { slots } => EpisodeMemory::Flat(Some(slots_to_state(tape, &slots, None)?)),
        })
    }

    /// `softmax(W_y r + b_y)` over (real, fake).
    pub fn classify(&self, tape: &mut Tape<T>, bind: &Binding, r: Var) -> Result<Var> {
        let logits = self.layout.classifier.apply(tape, bind, r)?;
        tape.softmax(logits)
    }

    /// Seeds the decoder with `tanh(W [r ; z] + b)`, unrolls it `K` steps and
    /// maps each state through `relu(W_η h + b_η)`.
    pub fn predict_future(&self, tape: &mut Tape<T>, bind: &Binding, r: Var, noise: &[T]) -> Result<Vec<Var>> {
        if noise.len() != self.config.noise_dim {
            return dim_err(
                "predict_future",
                format!("noise has {} values, expected {}", noise.len(), self.config.noise_dim),
            );
        }
        let z = tape.constant(noise.to_vec())?;
        let x = tape.concat(&[r, z])?;
        let init = self.layout.decoder_init.apply(tape, bind, x)?;
        let init = tape.tanh(init)?;
        let states = bigru_decode(tape, bind, &self.layout.decoder, init, self.config.patches)?;
        states
            .into_iter()
            .map(|h| {
                let y = self.layout.regressor.apply(tape, bind, h)?;
                tape.relu(y)
            })
            .collect()
    }

    /// One frame on `tape`: read the memory as it was before `f`, then append `f`.
    ///
    /// `noise` of `None` skips the future prediction.
    pub fn forward_step(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        live: &mut LiveMemory<T>,
        f: &FeatureGrid<T>,
        noise: Option<&[T]>,
    ) -> Result<StepVars> {
        let c = &self.config;
        if f.patches() != c.patches || f.dim() != c.dim {
            return Err(Error::Config(format!(
                "frame is {}x{}, model expects K={} d={}",
                f.patches(),
                f.dim(),
                c.patches,
                c.dim
            )));
        }
        let patches = f.to_vars(tape)?;
        let enc = bigru_encode(tape, bind, &self.layout.input_encoder, &patches)?;
        let query = match &self.layout.input_attention {
            Some(p) => Some(attend_or_mean(tape, bind, p, &enc, c.tiers.input)?),
            None => None,
        };

        let (r, alpha, gamma) = match (live, &self.layout.memory) {
            (LiveMemory::Hmn { state, cache, r_prev }, MemoryParams::Hmn(p)) => {
                let q = query.as_ref().expect("HMN registers input attention").pooled;
                let out = read_with(tape, bind, p, state, cache, &enc, q, *r_prev, c.tiers)?;
                *r_prev = out.r;
                state.update(f.clone())?;
                cache.shift();
                (out.r, out.alpha, out.gamma)
            }
            (LiveMemory::Flat { slots }, MemoryParams::Ntm(p)) => {
                let summary = tape.mean(&enc)?;
                let read = ntm_step(tape, bind, p, slots, summary)?;
                (read.r, Vec::new(), Some(read.gamma))
            }
            (LiveMemory::Flat { slots }, MemoryParams::Dmn(p)) => {
                let q = query.as_ref().expect("DMN registers input attention").pooled;
                let summary = tape.mean(&enc)?;
                let read = dmn_step(tape, bind, p, slots, q, summary)?;
                (read.r, Vec::new(), Some(read.gamma))
            }
            _ => return Err(Error::Config("memory state does not match the model kind".into())),
        };

        let probs = self.classify(tape, bind, r)?;
        let eta_hat = match noise {
            Some(z) => self.predict_future(tape, bind, r, z)?,
            None => Vec::new(),
        };
        Ok(StepVars {
            probs,
            r,
            eta_hat,
            beta: query.map(|q| q.weights),
            alpha,
            gamma,
        })
    }

    /// Value-level step on a fresh tape with zero noise.
    pub fn step(&self, mem: EpisodeMemory<T>, f: &FeatureGrid<T>) -> Result<(StepOutput<T>, EpisodeMemory<T>)> {
        let mut tape = Tape::new();
        let bind = tape.bind(&self.store)?;
        let mut live = self.attach(&mut tape, &bind, mem)?;
        let zeros = vec![T::zero(); self.config.noise_dim];
        let sv = self.forward_step(&mut tape, &bind, &mut live, f, Some(&zeros))?;
        let out = self.read_out(&tape, &sv)?;
        Ok((out, self.detach(&tape, live)?))
    }

    /// Runs a whole episode from fresh memory on one tape with zero noise.
    pub fn run_episode(&self, frames: &[FeatureGrid<T>]) -> Result<Vec<StepOutput<T>>> {
        let mut tape = Tape::new();
        let bind = tape.bind(&self.store)?;
        let mut live = self.attach(&mut tape, &bind, self.fresh_memory()?)?;
        let zeros = vec![T::zero(); self.config.noise_dim];
        frames
            .iter()
            .map(|f| {
                let sv = self.forward_step(&mut tape, &bind, &mut live, f, Some(&zeros))?;
                self.read_out(&tape, &sv)
            })
            .collect()
    }

    fn read_out(&self, tape: &Tape<T>, sv: &StepVars) -> Result<StepOutput<T>> {
        let c = &self.config;
        let mut eta = Vec::with_capacity(c.patches * c.dim);
        for &v in &sv.eta_hat {
            eta.extend_from_slice(tape.data(v));
        }
        let eta_hat = FeatureGrid::new(if eta.is_empty() { 0 } else { c.patches }, c.dim, eta)?;
        // Traces are laid out over all L slots; the valid ones are the newest.
        let gamma_vals = sv.gamma.map(|g| tape.data(g).to_vec()).unwrap_or_default();
        let mut gamma = vec![T::zero(); c.memory_len];
        let offset = c.memory_len - gamma_vals.len();
        gamma[offset..].copy_from_slice(&gamma_vals);
        let alpha = sv
            .alpha
            .iter()
            .map(|a| a.map(|v| tape.data(v).to_vec()).unwrap_or_else(|| vec![T::zero(); c.patches]))
            .collect();
        Ok(StepOutput {
            y_hat: tape.data(sv.probs).to_vec(),
            eta_hat,
            r: tape.data(sv.r).to_vec(),
            beta: sv.beta.map(|b| tape.data(b).to_vec()).unwrap_or_default(),
            alpha,
            gamma,
        })
    }
}

/// Starts every `to*` tensor as a copy of its `from*` twin so stored and
/// incoming patches are first encoded in the same space.
fn tie_initial<T: Scalar>(store: &mut ParamStore<T>, from: &str, to: &str) {
    let pairs: Vec<_> = store
        .iter()
        .filter_map(|(id, name, _)| {
            let twin = store.find(&format!("{to}{}", name.strip_prefix(from)?))?;
            Some((id, twin))
        })
        .collect();
    for (src, dst) in pairs {
        let t = store.get(src).clone();
        *store.get_mut(dst) = t;
    }
}

/// Value-level step of the HMN memory: `(output, memory after appending f)`.
pub fn hmn_step<T: Scalar>(
    params: &HmnParams<T>,
    state: MemoryState<T>,
    f: &FeatureGrid<T>,
) -> Result<(StepOutput<T>, MemoryState<T>)> {
    match params.step(EpisodeMemory::Hmn(state), f)? {
        (out, EpisodeMemory::Hmn(state)) => Ok((out, state)),
        _ => Err(Error::Config("hmn_step on a flat-memory model".into())),
    }
}

/// Memory carried between tapes within one episode.
#[derive(Clone, Debug, PartialEq)]
pub enum EpisodeMemory<T> {
    Hmn(MemoryState<T>),
    /// `None` until the first step, which reads the learned initial memory.
    Flat(Option<FlatMemoryState<T>>),
}

/// Memory recorded on a tape.
#[derive(Clone, Debug)]
pub enum LiveMemory<T> {
    Hmn {
        state: MemoryState<T>,
        cache: EncodedSlots,
        r_prev: Var,
    },
    Flat {
        slots: TapeSlots,
    },
}

/// Tape nodes of one frame's step.
#[derive(Clone, Debug)]
pub struct StepVars {
    /// Class probabilities (real, fake).
    pub probs: Var,
    pub r: Var,
    /// `K` predicted patches; empty when prediction was skipped.
    pub eta_hat: Vec<Var>,
    pub beta: Option<Var>,
    pub alpha: Vec<Option<Var>>,
    pub gamma: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T> {
    pub y_hat: Vec<T>,
    pub eta_hat: FeatureGrid<T>,
    pub r: Vec<T>,
    /// Input-patch weights (`K`); empty for models without input attention.
    pub beta: Vec<T>,
    /// Patch weights per slot (`L × K`, zero rows for empty slots); empty for flat memories.
    pub alpha: Vec<Vec<T>>,
    /// Slot weights (`L`), zero on empty slots.
    pub gamma: Vec<T>,
}

/// One line of the attention-trace export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: u32,
    pub frame: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
}

impl TraceRecord {
    pub fn from_output<T: Scalar>(episode: u32, frame: usize, out: &StepOutput<T>) -> Self {
        let conv = |v: &[T]| v.iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
        Self {
            episode,
            frame,
            beta: conv(&out.beta),
            alpha: out.alpha.iter().map(|a| conv(a)).collect(),
            gamma: conv(&out.gamma),
        }
    }
}

/// Writes one JSON object per line.
pub fn write_traces<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
