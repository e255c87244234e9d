use serde::{Deserialize, Serialize};

use crate::attention::Tiers;
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::eval::{future_mse, MetricsReport, ScoreSet};
use crate::model::{HmnParams, MemoryKind, ModelConfig, StepOutput, FAKE};
use crate::scalar::Scalar;
use crate::training::{train, Discriminator, LossRecord, Objective, TrainConfig};

/// A model family plus the mechanisms it keeps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub kind: MemoryKind,
    pub tiers: Tiers,
    pub objective: Objective,
}

impl Variant {
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            kind: MemoryKind::Hmn,
            tiers: Tiers::ALL,
            objective: Objective::FULL,
        }
    }

    /// Parses `full`, `no-<parts>` with parts among `alpha`, `beta`, `gamma`,
    /// `gan`, `eta` (Greek letters accepted) joined by `-` or `+`, and the
    /// baselines `ntm`/`dmn` optionally followed by `+eta` or `+gan+eta`.
    pub fn parse(name: &str) -> Result<Self> {
        let unknown = || Error::Config(format!("unknown variant {name:?}"));
        let mut v = Self::full();
        v.name = name.to_string();
        if name == "full" || name == "hmn" {
            return Ok(v);
        }
        if let Some(rest) = name.strip_prefix("no-") {
            let (mut gan, mut eta) = (true, true);
            for part in rest.split(['-', '+']) {
                match part {
                    "alpha" | "α" => v.tiers.patch = false,
                    "beta" | "β" => v.tiers.input = false,
                    "gamma" | "γ" => v.tiers.frame = false,
                    "gan" => gan = false,
                    "eta" | "η" => eta = false,
                    _ => return Err(unknown()),
                }
            }
            v.objective = Objective {
                adversarial: gan && eta,
                future: eta,
            };
            return Ok(v);
        }
        let mut parts = name.split('+');
        v.kind = match parts.next() {
            Some("ntm") => MemoryKind::Ntm,
            Some("dmn") => MemoryKind::Dmn,
            _ => return Err(unknown()),
        };
        let extras: Vec<&str> = parts.collect();
        v.objective = match extras.as_slice() {
            [] => Objective::CLS_ONLY,
            ["eta"] | ["η"] => Objective::NO_GAN,
            ["gan", "eta"] | ["gan", "η"] => Objective::FULL,
            _ => return Err(unknown()),
        };
        Ok(v)
    }

    pub fn model_config(&self, base: ModelConfig) -> ModelConfig {
        ModelConfig {
            kind: self.kind,
            tiers: self.tiers,
            ..base
        }
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            objective: self.objective,
            ..base.clone()
        }
    }
}

/// Per-frame results over a set of episodes, evaluated with zero noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation<T> {
    pub scores: ScoreSet,
    pub report: MetricsReport,
    /// Memory output of every frame, in score order.
    pub r_vectors: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<StepOutput<T>>>,
}

pub fn evaluate<T: Scalar>(params: &HmnParams<T>, episodes: &[Episode<T>], threshold: f64) -> Result<Evaluation<T>> {
    let mut scores = ScoreSet::default();
    let mut r_vectors = Vec::new();
    let (mut preds, mut truths) = (Vec::new(), Vec::new());
    let mut outputs = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let outs = params.run_episode(&ep.frames)?;
        for (o, fut) in outs.iter().zip(&ep.futures) {
            let p = o.y_hat[FAKE].to_f64_lossy().clamp(0.0, 1.0);
            scores.push(p, ep.label.is_fake(), ep.id)?;
            r_vectors.push(o.r.iter().map(|x| x.to_f64_lossy()).collect());
            preds.push(o.eta_hat.clone());
            truths.push(fut.clone());
        }
        outputs.push(outs);
    }
    if scores.is_empty() {
        return Err(Error::Config("evaluation set has no frames".into()));
    }
    let mse = future_mse(&preds, &truths)?;
    let report = MetricsReport::compute(&scores, threshold, mse)?;
    Ok(Evaluation {
        scores,
        report,
        r_vectors,
        outputs,
    })
}

pub struct TrainedModel<T> {
    pub params: HmnParams<T>,
    pub disc: Discriminator<T>,
    pub trace: Vec<LossRecord>,
}

/// Seed of the discriminator derived from the training seed.
pub fn disc_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Initialises from `cfg.seed`, trains, and evaluates on `test`.
pub fn train_and_evaluate<T: Scalar>(
    model: ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Episode<T>],
    test_set: &[Episode<T>],
    threshold: f64,
) -> Result<(TrainedModel<T>, Evaluation<T>)> {
    let mut params = HmnParams::new(model, cfg.seed)?;
    let mut disc = Discriminator::new(model.dim, model.width(), model.hidden, disc_seed(cfg.seed))?;
    let trace = train(&mut params, &mut disc, train_set, cfg)?;
    let eval = evaluate(&params, test_set, threshold)?;
    Ok((TrainedModel { params, disc, trace }, eval))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricsReport,
    pub params: usize,
}

pub fn run_ablation<T: Scalar>(
    variant: &Variant,
    base: ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Episode<T>],
    test_set: &[Episode<T>],
    threshold: f64,
) -> Result<AblationRow> {
    log::info!("training variant {}", variant.name);
    let (trained, eval) = train_and_evaluate(
        variant.model_config(base),
        &variant.train_config(cfg),
        train_set,
        test_set,
        threshold,
    )?;
    Ok(AblationRow {
        variant: variant.name.clone(),
        report: eval.report,
        params: trained.params.num_params(),
    })
}
