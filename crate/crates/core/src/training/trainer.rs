use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::memory::FeatureGrid;
use crate::model::{EpisodeMemory, HmnParams, StepVars};
use crate::numerics::{grad_check, GradCheckReport, Tape, Var};
use crate::scalar::Scalar;
use crate::training::{d_loss, g_loss, Adam, Discriminator, LossWeights};

/// Any recorded loss above this aborts training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Which generator terms are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Objective {
    /// Conditional adversarial term (requires `future`).
    pub adversarial: bool,
    /// Future-grid regression term.
    pub future: bool,
}

impl Objective {
    pub const FULL: Objective = Objective {
        adversarial: true,
        future: true,
    };
    pub const NO_GAN: Objective = Objective {
        adversarial: false,
        future: true,
    };
    pub const CLS_ONLY: Objective = Objective {
        adversarial: false,
        future: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Generator learning rate.
    pub lr: f64,
    /// Discriminator learning rate.
    pub d_lr: f64,
    /// Episodes advanced side by side, each with its own memory.
    pub batch_size: usize,
    /// Consecutive frames of each episode per generator step.
    pub window: usize,
    /// Generator steps.
    pub steps: usize,
    pub seed: u64,
    /// Weight of the generator's adversarial term.
    pub lambda_adv: f64,
    pub lambda_cls: f64,
    pub lambda_mse: f64,
    /// Discriminator updates per generator step.
    pub d_steps: usize,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            d_lr: 1e-3,
            batch_size: 4,
            window: 4,
            steps: 2000,
            seed: 42,
            lambda_adv: 1.0,
            lambda_cls: 1.0,
            lambda_mse: 1.0,
            d_steps: 1,
            objective: Objective::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_adv, self.lambda_cls, self.lambda_mse];
        if !(self.lr >= 0.0 && self.d_lr >= 0.0 && weights.iter().all(|&w| w >= 0.0)) {
            return Err(Error::Config("learning rates and loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 || self.window == 0 {
            return Err(Error::Config("batch_size and window must be positive".into()));
        }
        if self.objective.adversarial && !self.objective.future {
            return Err(Error::Config("the adversarial term needs future prediction".into()));
        }
        Ok(())
    }
}

/// Window means of the losses of one generator step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_cls: f64,
    pub g_mse: f64,
}

pub fn write_loss_csv<W: Write>(mut w: W, records: &[LossRecord]) -> Result<()> {
    writeln!(w, "step,d_loss,g_adv,g_cls,g_mse")?;
    for r in records {
        writeln!(w, "{},{},{},{},{}", r.step, r.d_loss, r.g_adv, r.g_cls, r.g_mse)?;
    }
    Ok(())
}

fn check_divergence(step: usize, values: &[f64]) -> Result<()> {
    for &v in values {
        if !v.is_finite() || v > DIVERGENCE_LIMIT {
            log::error!("step {step}: loss {v} exceeds {DIVERGENCE_LIMIT}; lower the learning rate");
            return Err(Error::Divergence { step, loss: v });
        }
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

struct Frame<'a, T> {
    vars: StepVars,
    label: usize,
    future: &'a FeatureGrid<T>,
}

/// Trains `params` (and `disc` when adversarial) for `cfg.steps` generator steps.
///
/// Episodes are drawn in a seeded order, reshuffled each pass, and fed to
/// `batch_size` streams that each start from fresh memory. A generator step
/// advances every stream by up to `window` frames on one tape: gradients flow
/// through the memory within the window but not across windows.
pub fn train<T: Scalar>(
    params: &mut HmnParams<T>,
    disc: &mut Discriminator<T>,
    episodes: &[Episode<T>],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if episodes.iter().all(|e| e.is_empty()) {
        return Err(Error::Config("training stream has no frames".into()));
    }
    let c = params.config;
    for e in episodes {
        if let Some(f) = e.frames.first() {
            if f.patches() != c.patches || f.dim() != c.dim {
                return Err(Error::Config(format!(
                    "episode {} has {}x{} grids, model expects {}x{}",
                    e.id,
                    f.patches(),
                    f.dim(),
                    c.patches,
                    c.dim
                )));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g_opt = Adam::new(cfg.lr);
    let mut d_opt = Adam::new(cfg.d_lr);
    let weights = LossWeights {
        adv: cfg.lambda_adv,
        cls: cfg.lambda_cls,
        mse: cfg.lambda_mse,
    };
    let mut queue = EpisodeQueue::new(episodes, &mut rng);
    let mut streams: Vec<Stream<T>> = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        streams.push(Stream::start(queue.next(&mut rng), params)?);
    }
    let mut trace = Vec::with_capacity(cfg.steps);
    while trace.len() < cfg.steps {
        for s in streams.iter_mut() {
            if s.pos == episodes[s.episode].len() {
                *s = Stream::start(queue.next(&mut rng), params)?;
            }
        }
        let rec = window_step(params, disc, episodes, &mut streams, cfg, weights, &mut rng, &mut g_opt, &mut d_opt, trace.len())?;
        if trace.len() % 100 == 0 {
            log::debug!(
                "step {}: d {:.4} adv {:.4} cls {:.4} mse {:.4}",
                rec.step,
                rec.d_loss,
                rec.g_adv,
                rec.g_cls,
                rec.g_mse
            );
        }
        trace.push(rec);
    }
    Ok(trace)
}

/// Seeded endless walk over the non-empty episodes.
struct EpisodeQueue {
    order: Vec<usize>,
    next: usize,
}

impl EpisodeQueue {
    fn new<T: Scalar>(episodes: &[Episode<T>], rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..episodes.len()).filter(|&i| !episodes[i].is_empty()).collect();
        order.shuffle(rng);
        Self { order, next: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.next == self.order.len() {
            self.order.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

struct Stream<T> {
    episode: usize,
    pos: usize,
    memory: Option<EpisodeMemory<T>>,
}

impl<T: Scalar> Stream<T> {
    fn start(episode: usize, params: &HmnParams<T>) -> Result<Self> {
        Ok(Self {
            episode,
            pos: 0,
            memory: Some(params.fresh_memory()?),
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn window_step<T: Scalar>(
    params: &mut HmnParams<T>,
    disc: &mut Discriminator<T>,
    episodes: &[Episode<T>],
    streams: &mut [Stream<T>],
    cfg: &TrainConfig,
    weights: LossWeights,
    rng: &mut ChaCha8Rng,
    g_opt: &mut Adam<T>,
    d_opt: &mut Adam<T>,
    step: usize,
) -> Result<LossRecord> {
    let obj = cfg.objective;
    let mut tape = Tape::new();
    let gb = tape.bind(&params.store)?;
    let mut frames = Vec::new();
    let mut lives = Vec::with_capacity(streams.len());
    for s in streams.iter_mut() {
        let ep = &episodes[s.episode];
        let mem = s.memory.take().expect("stream memory is restored after every step");
        let mut live = params.attach(&mut tape, &gb, mem)?;
        let end = (s.pos + cfg.window).min(ep.len());
        for t in s.pos..end {
            let noise: Option<Vec<T>> = obj.future.then(|| {
                (0..params.config.noise_dim)
                    .map(|_| T::lit(StandardNormal.sample(rng)))
                    .collect()
            });
            let vars = params.forward_step(&mut tape, &gb, &mut live, &ep.frames[t], noise.as_deref())?;
            frames.push(Frame {
                vars,
                label: ep.label.class(),
                future: &ep.futures[t],
            });
        }
        s.pos = end;
        lives.push(live);
    }

    let mut d_values = Vec::new();
    if obj.adversarial {
        for _ in 0..cfg.d_steps {
            let mut dt = Tape::new();
            let db = dt.bind(&disc.store)?;
            let mut losses = Vec::with_capacity(frames.len());
            for fr in &frames {
                let r = dt.constant(tape.data(fr.vars.r).to_vec())?;
                let real = fr.future.to_vars(&mut dt)?;
                let fake = fr
                    .vars
                    .eta_hat
                    .iter()
                    .map(|&v| dt.constant(tape.data(v).to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                let lr = disc.logit(&mut dt, &db, r, &real)?;
                let lf = disc.logit(&mut dt, &db, r, &fake)?;
                losses.push(d_loss(&mut dt, lr, lf)?);
            }
            let total = dt.mean(&losses)?;
            d_values.push(dt.scalar(total).to_f64_lossy());
            let grads = dt.backward(total)?;
            let grads = grads.collect(&db, &disc.store);
            d_opt.step(&mut disc.store, &grads)?;
        }
    }

    let db = if obj.adversarial {
        Some(tape.bind(&disc.store)?)
    } else {
        None
    };
    let (mut totals, mut adv, mut cls, mut mse) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for fr in &frames {
        let logit = match &db {
            Some(db) => {
                // The condition is fixed: only the predicted grid answers to the critic.
                let cond = tape.constant(tape.data(fr.vars.r).to_vec())?;
                Some(disc.logit(&mut tape, db, cond, &fr.vars.eta_hat)?)
            }
            None => None,
        };
        let truth: Vec<Var> = if obj.future {
            fr.future.to_vars(&mut tape)?
        } else {
            Vec::new()
        };
        let g = g_loss(&mut tape, logit, fr.vars.probs, fr.label, &fr.vars.eta_hat, &truth, weights)?;
        totals.push(g.total);
        cls.push(tape.scalar(g.cls).to_f64_lossy());
        if let Some(a) = g.adv {
            adv.push(tape.scalar(a).to_f64_lossy());
        }
        if let Some(m) = g.mse {
            mse.push(tape.scalar(m).to_f64_lossy());
        }
    }
    let total = tape.mean(&totals)?;
    let rec = LossRecord {
        step,
        d_loss: mean(&d_values),
        g_adv: mean(&adv),
        g_cls: mean(&cls),
        g_mse: mean(&mse),
    };
    check_divergence(step, &[tape.scalar(total).to_f64_lossy(), rec.d_loss])?;
    let grads = tape.backward(total)?;
    for (s, live) in streams.iter_mut().zip(lives) {
        s.memory = Some(params.detach(&tape, live)?);
    }
    let grads = grads.collect(&gb, &params.store);
    g_opt.step(&mut params.store, &grads)?;
    Ok(rec)
}

/// Central-difference check of the gradient of the joint objective over
/// every generator and discriminator parameter.
///
/// Runs the first `frames` frames of `episode` from fresh memory with fixed
/// noise drawn from `seed`; the objective is the mean over frames of the
/// generator loss plus the discriminator loss.
pub fn objective_grad_check<T: Scalar>(
    params: &mut HmnParams<T>,
    disc: &mut Discriminator<T>,
    episode: &Episode<T>,
    frames: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if frames == 0 || frames > episode.len() {
        return Err(Error::Config(format!(
            "cannot check {frames} frames of a {}-frame episode",
            episode.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Vec<T>> = (0..frames)
        .map(|_| {
            (0..params.config.noise_dim)
                .map(|_| T::lit(StandardNormal.sample(&mut rng)))
                .collect()
        })
        .collect();
    let model = params.clone();
    let critic = disc.clone();
    let label = episode.label.class();
    grad_check(&mut [&mut params.store, &mut disc.store], T::lit(eps), |tape, b| {
        let mut live = model.attach(tape, &b[0], model.fresh_memory()?)?;
        let mut terms = Vec::with_capacity(2 * frames);
        for (t, z) in noise.iter().enumerate() {
            let sv = model.forward_step(tape, &b[0], &mut live, &episode.frames[t], Some(z))?;
            let truth = episode.futures[t].to_vars(tape)?;
            let l_fake = critic.logit(tape, &b[1], sv.r, &sv.eta_hat)?;
            let l_real = critic.logit(tape, &b[1], sv.r, &truth)?;
            let g = g_loss(tape, Some(l_fake), sv.probs, label, &sv.eta_hat, &truth, LossWeights::default())?;
            terms.push(g.total);
            terms.push(d_loss(tape, l_real, l_fake)?);
        }
        tape.mean(&terms)
    })
}
