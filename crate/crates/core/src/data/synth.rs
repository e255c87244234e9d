use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Episode, Label};
use crate::error::{Error, Result};
use crate::memory::FeatureGrid;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TamperMode {
    /// A region of patches comes from a second identity.
    PatchSplice,
    /// The expression phases are redrawn on every frame.
    TemporalBreak,
}

impl TamperMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "patch-splice" => Ok(TamperMode::PatchSplice),
            "temporal-break" => Ok(TamperMode::TemporalBreak),
            _ => Err(Error::Config(format!(
                "unknown tamper mode {s:?} (expected patch-splice or temporal-break)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TamperMode::PatchSplice => "patch-splice",
            TamperMode::TemporalBreak => "temporal-break",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub patches: usize,
    pub dim: usize,
    /// Width of the identity latent.
    pub id_dim: usize,
    /// Sinusoids per patch.
    pub waves: usize,
    /// Standard deviation of the additive per-value noise.
    pub noise: f64,
    /// Source frames between consecutive sampled frames.
    pub stride: usize,
    /// Source frames between a frame and its future target.
    pub delta: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    /// Fraction of patches taken from the donor in a splice.
    pub splice_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            patches: 16,
            dim: 16,
            id_dim: 8,
            waves: 2,
            noise: 0.05,
            stride: 20,
            delta: 15,
            omega_min: 0.01,
            omega_max: 0.03,
            splice_fraction: 0.5,
        }
    }
}

/// Shared mixing matrices: `A_k` maps identity to patch `k`, `B_k` maps
/// that patch's sinusoids.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    pub config: SynthConfig,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl SynthWorld {
    pub fn new(config: SynthConfig, seed: u64) -> Result<Self> {
        if config.patches == 0 || config.dim == 0 || config.id_dim == 0 || config.waves == 0 {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        if !(config.noise >= 0.0 && config.omega_min > 0.0 && config.omega_max >= config.omega_min) {
            return Err(Error::Config("noise must be non-negative and 0 < omega_min <= omega_max".into()));
        }
        if !(0.0..=1.0).contains(&config.splice_fraction) {
            return Err(Error::Config("splice_fraction must lie in [0, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, d) = (config.patches, config.dim);
        let a = gaussian(&mut rng, k * d * config.id_dim, 1.0);
        let b = gaussian(&mut rng, k * d * config.waves, 1.0 / (config.waves as f64).sqrt());
        Ok(Self { config, a, b })
    }

    fn a_row(&self, k: usize, e: usize) -> &[f64] {
        let n = self.config.id_dim;
        let i = (k * self.config.dim + e) * n;
        &self.a[i..i + n]
    }

    fn b_row(&self, k: usize, e: usize) -> &[f64] {
        let n = self.config.waves;
        let i = (k * self.config.dim + e) * n;
        &self.b[i..i + n]
    }

    /// Noise-free value of patch `k`, element `e`.
    fn clean(&self, id: &[f64], k: usize, e: usize, omega: &[f64], phase: &[f64], t: f64) -> f64 {
        let base: f64 = self.a_row(k, e).iter().zip(id).map(|(a, x)| a * x).sum();
        let wave: f64 = self
            .b_row(k, e)
            .iter()
            .zip(omega.iter().zip(phase))
            .map(|(b, (w, p))| b * (w * t + p).sin())
            .sum();
        softplus(base + wave)
    }

    /// Upper bound on the per-element change between consecutive sampled
    /// frames of a noise-free real episode with frequencies `omega`.
    #[cfg(test)]
    fn step_bound(&self, k: usize, e: usize, omega: &[f64]) -> f64 {
        let s = self.config.stride as f64;
        self.b_row(k, e).iter().zip(omega).map(|(b, w)| b.abs() * w * s).sum()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit_identity(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = gaussian(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

struct Dynamics {
    /// Per patch, `waves` frequencies and phases.
    omega: Vec<Vec<f64>>,
    phase: Vec<Vec<f64>>,
}

impl Dynamics {
    fn draw(world: &SynthWorld, rng: &mut ChaCha8Rng) -> Self {
        let c = &world.config;
        let omega = (0..c.patches)
            .map(|_| (0..c.waves).map(|_| rng.random_range(c.omega_min..=c.omega_max)).collect())
            .collect();
        let phase = Self::phases(world, rng);
        Self { omega, phase }
    }

    fn phases(world: &SynthWorld, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let c = &world.config;
        (0..c.patches)
            .map(|_| (0..c.waves).map(|_| rng.random_range(0.0..TAU)).collect())
            .collect()
    }
}

fn render<T: Scalar>(
    world: &SynthWorld,
    ids: &[&[f64]],
    dynamics: &Dynamics,
    t: f64,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureGrid<T>> {
    let c = &world.config;
    let mut data = Vec::with_capacity(c.patches * c.dim);
    for k in 0..c.patches {
        for e in 0..c.dim {
            let v = world.clean(ids[k], k, e, &dynamics.omega[k], &dynamics.phase[k], t);
            let n = c.noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            // values are stored as f32 on disk, so generate them at that precision
            data.push(T::lit((v + n).max(0.0) as f32 as f64));
        }
    }
    FeatureGrid::new(c.patches, c.dim, data)
}

/// Generates one episode of `frames` sampled frames; `tamper` of `None` gives a real one.
pub fn synth_episode<T: Scalar>(
    world: &SynthWorld,
    id: u32,
    frames: usize,
    tamper: Option<TamperMode>,
    seed: u64,
) -> Result<Episode<T>> {
    let c = &world.config;
    if frames <= c.delta || c.delta == 0 {
        return Err(Error::Config(format!(
            "episode length {frames} must exceed delta {} >= 1",
            c.delta
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity = unit_identity(&mut rng, c.id_dim);
    let donor = unit_identity(&mut rng, c.id_dim);
    let mut dynamics = Dynamics::draw(world, &mut rng);
    let offset = rng.random_range(0.0..1000.0);

    let mut ids: Vec<&[f64]> = vec![&identity; c.patches];
    if tamper == Some(TamperMode::PatchSplice) {
        let n = ((c.patches as f64) * c.splice_fraction).ceil() as usize;
        let start = rng.random_range(0..=c.patches - n.min(c.patches));
        for slot in ids.iter_mut().skip(start).take(n) {
            *slot = &donor;
        }
    }

    let mut grids = Vec::with_capacity(frames);
    let mut futures = Vec::with_capacity(frames);
    for j in 0..frames {
        if tamper == Some(TamperMode::TemporalBreak) {
            dynamics.phase = Dynamics::phases(world, &mut rng);
        }
        let t = offset + (j * c.stride) as f64;
        grids.push(render(world, &ids, &dynamics, t, &mut rng)?);
        futures.push(render(world, &ids, &dynamics, t + c.delta as f64, &mut rng)?);
    }
    Ok(Episode {
        id,
        label: if tamper.is_some() { Label::Fake } else { Label::Real },
        frames: grids,
        futures,
        source: format!("synthetic:{}", tamper.map_or("real", TamperMode::name)),
    })
}

/// `n` episodes alternating real and fake, ids `0..n`; each fake uses the
/// next mode of `modes` in turn.
pub fn generate_dataset<T: Scalar>(
    world: &SynthWorld,
    n: usize,
    frames: usize,
    modes: &[TamperMode],
    seed: u64,
) -> Result<Vec<Episode<T>>> {
    generate_dataset_jobs(world, n, frames, modes, seed, 1)
}

/// [`generate_dataset`] spread over `jobs` threads; the output does not
/// depend on `jobs`.
pub fn generate_dataset_jobs<T: Scalar>(
    world: &SynthWorld,
    n: usize,
    frames: usize,
    modes: &[TamperMode],
    seed: u64,
    jobs: usize,
) -> Result<Vec<Episode<T>>> {
    if modes.is_empty() {
        return Err(Error::Config("at least one tamper mode is required".into()));
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let plan: Vec<(u32, Option<TamperMode>, u64)> = (0..n)
        .map(|i| {
            let tamper = (i % 2 == 1).then(|| modes[(i / 2) % modes.len()]);
            (i as u32, tamper, seeder.random())
        })
        .collect();
    let make = |&(id, tamper, s): &(u32, Option<TamperMode>, u64)| synth_episode(world, id, frames, tamper, s);
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return plan.iter().map(make).collect();
    }
    let chunk = n.div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = plan
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(make).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(n);
        for h in handles {
            out.extend(h.join().expect("generator thread panicked")?);
        }
        Ok(out)
    })
}
