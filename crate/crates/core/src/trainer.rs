//! The alternating optimization loop: per iteration, one RMSprop descent
//! step on the critics' objective followed by weight clipping, then one
//! descent step on the generator-side objective for the four generators
//! and classifier head(s). Also owns checkpointing and the training log.
//!
//! The optimization order follows the method's prose description: critics
//! first on the discriminator objective, then generators on the
//! parameter-side objective. (The same source's step listing swaps the
//! two parameter groups; that listing is treated as a typo.)

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batcher, FeatureRecord, ZeroShotSplit};
use crate::error::{Error, Result};
use crate::losses::{
    self, Batch, ClassifierHead, CriticPhase, GeneratorPhase, LossReport, LossWeights, Model,
};
use crate::matrix::Real;
use crate::nn::{clip_weights, Activation, Mlp, ParamSet, RmsPropState};
use crate::retrieval::{self, EvalOptions};
use crate::seeding::derive_seed;
use crate::semantics::SemanticTable;

/// Seed streams, one per randomly initialised component.
const STREAM_ENC_SKETCH: u64 = 0;
const STREAM_ENC_IMAGE: u64 = 1;
const STREAM_DEC_SKETCH: u64 = 2;
const STREAM_DEC_IMAGE: u64 = 3;
const STREAM_CRITIC_SEMANTIC: u64 = 4;
const STREAM_CRITIC_SKETCH: u64 = 5;
const STREAM_CRITIC_IMAGE: u64 = 6;
const STREAM_HEAD_SKETCH: u64 = 7;
const STREAM_HEAD_IMAGE: u64 = 8;
const STREAM_BATCHES: u64 = 100;

/// Everything one training run is parameterised by.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: Real,
    pub decay: Real,
    pub epsilon: Real,
    pub clip_c: Real,
    pub batch_size: usize,
    pub max_iterations: u64,
    /// Critic updates per iteration; each consumes its own batch and the
    /// generator step reuses the last one.
    pub n_critic: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub feature_dim: usize,
    pub code_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub leaky_slope: Real,
    pub per_branch_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            decay: 0.99,
            epsilon: 1e-8,
            clip_c: 0.01,
            batch_size: 64,
            max_iterations: 2000,
            n_critic: 1,
            seed: 0,
            weights: LossWeights::default(),
            feature_dim: 512,
            code_dim: 64,
            generator_hidden: vec![1024],
            critic_hidden: vec![512],
            leaky_slope: 0.2,
            per_branch_head: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Validation(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Validation(format!("decay must be in (0, 1), got {}", self.decay)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Validation(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.clip_c > 0.0) {
            return Err(Error::Validation(format!("clip_c must be positive, got {}", self.clip_c)));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if self.n_critic == 0 {
            return Err(Error::Validation("n_critic must be at least 1".into()));
        }
        if self.feature_dim == 0 || self.code_dim == 0 {
            return Err(Error::Validation("feature_dim and code_dim must be positive".into()));
        }
        if [
            self.weights.adversarial,
            self.weights.cycle,
            self.weights.classification,
            self.weights.identity,
        ]
        .iter()
        .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::Validation("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer state for every parameter set of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptBundle {
    pub enc_sketch: RmsPropState,
    pub enc_image: RmsPropState,
    pub dec_sketch: RmsPropState,
    pub dec_image: RmsPropState,
    pub critic_semantic: RmsPropState,
    pub critic_sketch: RmsPropState,
    pub critic_image: RmsPropState,
    pub head_sketch: RmsPropState,
    pub head_image: Option<RmsPropState>,
}

/// The seven networks, classifier head(s), and their optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub model: Model,
    pub opt: OptBundle,
}

impl ModelBundle {
    /// Deterministic initialisation: every component draws from its own
    /// seed stream so two bundles from the same config are identical.
    pub fn init(config: &TrainConfig, n_classes: usize) -> Result<Self> {
        config.validate()?;
        if n_classes == 0 {
            return Err(Error::Validation("model needs at least one seen class".into()));
        }
        let hidden = Activation::LeakyRelu(config.leaky_slope);
        let out = Activation::Identity;
        let mut rng_for = |stream: u64| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream));

        let chain = |input: usize, mids: &[usize], output: usize| -> Vec<usize> {
            let mut dims = Vec::with_capacity(mids.len() + 2);
            dims.push(input);
            dims.extend_from_slice(mids);
            dims.push(output);
            dims
        };
        let enc_dims = chain(config.feature_dim, &config.generator_hidden, config.code_dim);
        let dec_dims = chain(config.code_dim, &config.generator_hidden, config.feature_dim);
        let critic_feat_dims = chain(config.feature_dim, &config.critic_hidden, 1);
        let critic_code_dims = chain(config.code_dim, &config.critic_hidden, 1);

        let model = Model {
            enc_sketch: Mlp::glorot(&enc_dims, hidden, out, &mut rng_for(STREAM_ENC_SKETCH))?,
            enc_image: Mlp::glorot(&enc_dims, hidden, out, &mut rng_for(STREAM_ENC_IMAGE))?,
            dec_sketch: Mlp::glorot(&dec_dims, hidden, out, &mut rng_for(STREAM_DEC_SKETCH))?,
            dec_image: Mlp::glorot(&dec_dims, hidden, out, &mut rng_for(STREAM_DEC_IMAGE))?,
            critic_semantic: Mlp::glorot(&critic_code_dims, hidden, out, &mut rng_for(STREAM_CRITIC_SEMANTIC))?,
            critic_sketch: Mlp::glorot(&critic_feat_dims, hidden, out, &mut rng_for(STREAM_CRITIC_SKETCH))?,
            critic_image: Mlp::glorot(&critic_feat_dims, hidden, out, &mut rng_for(STREAM_CRITIC_IMAGE))?,
            head_sketch: ClassifierHead::glorot(n_classes, config.code_dim, &mut rng_for(STREAM_HEAD_SKETCH))?,
            head_image: if config.per_branch_head {
                Some(ClassifierHead::glorot(n_classes, config.code_dim, &mut rng_for(STREAM_HEAD_IMAGE))?)
            } else {
                None
            },
        };
        model.validate()?;

        let state = |params: &dyn erased::AnyParams| -> Result<RmsPropState> {
            params.fresh_state(config.learning_rate, config.decay, config.epsilon)
        };
        let opt = OptBundle {
            enc_sketch: state(&model.enc_sketch)?,
            enc_image: state(&model.enc_image)?,
            dec_sketch: state(&model.dec_sketch)?,
            dec_image: state(&model.dec_image)?,
            critic_semantic: state(&model.critic_semantic)?,
            critic_sketch: state(&model.critic_sketch)?,
            critic_image: state(&model.critic_image)?,
            head_sketch: state(&model.head_sketch)?,
            head_image: match &model.head_image {
                Some(head) => Some(state(head)?),
                None => None,
            },
        };
        Ok(ModelBundle { model, opt })
    }

    /// Largest |parameter| across the three critics.
    pub fn max_critic_param(&self) -> Real {
        [&self.model.critic_semantic, &self.model.critic_sketch, &self.model.critic_image]
            .iter()
            .flat_map(|net| net.params())
            .flat_map(|slice| slice.iter().copied())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Structural integrity after deserialisation.
    pub fn validate(&self) -> Result<()> {
        self.model.enc_sketch.validate()?;
        self.model.enc_image.validate()?;
        self.model.dec_sketch.validate()?;
        self.model.dec_image.validate()?;
        self.model.critic_semantic.validate()?;
        self.model.critic_sketch.validate()?;
        self.model.critic_image.validate()?;
        self.model.head_sketch.weight.validate()?;
        if let Some(head) = &self.model.head_image {
            head.weight.validate()?;
        }
        self.model.validate()?;
        self.opt.enc_sketch.validate(&self.model.enc_sketch)?;
        self.opt.enc_image.validate(&self.model.enc_image)?;
        self.opt.dec_sketch.validate(&self.model.dec_sketch)?;
        self.opt.dec_image.validate(&self.model.dec_image)?;
        self.opt.critic_semantic.validate(&self.model.critic_semantic)?;
        self.opt.critic_sketch.validate(&self.model.critic_sketch)?;
        self.opt.critic_image.validate(&self.model.critic_image)?;
        self.opt.head_sketch.validate(&self.model.head_sketch)?;
        match (&self.model.head_image, &self.opt.head_image) {
            (Some(head), Some(state)) => state.validate(head)?,
            (None, None) => {}
            _ => return Err(Error::Validation("per-branch head and its optimizer state disagree".into())),
        }
        Ok(())
    }
}

/// Object-safe bridge so `ModelBundle::init` can build optimizer states
/// for heterogeneous parameter sets with one closure.
mod erased {
    use super::*;

    pub trait AnyParams {
        fn fresh_state(&self, lr: Real, decay: Real, epsilon: Real) -> Result<RmsPropState>;
    }

    impl<T: ParamSet> AnyParams for T {
        fn fresh_state(&self, lr: Real, decay: Real, epsilon: Real) -> Result<RmsPropState> {
            RmsPropState::new(lr, decay, epsilon, self)
        }
    }
}

/// One critic update: descent on the critic objective for all three
/// critics, then weight clipping to `[-clip_c, clip_c]`.
pub fn critic_step(
    bundle: &mut ModelBundle,
    batch: &Batch,
    weights: &LossWeights,
    clip_c: Real,
) -> Result<CriticPhase> {
    let phase = losses::critic_phase(batch, &bundle.model, weights)?;
    for (name, value) in [
        ("wadv_se", phase.wadv_se),
        ("wadv_sk", phase.wadv_sk),
        ("wadv_im", phase.wadv_im),
        ("dis_total", phase.dis_total),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    bundle
        .opt
        .critic_semantic
        .step(&mut bundle.model.critic_semantic, &phase.critic_semantic.slices())?;
    bundle
        .opt
        .critic_sketch
        .step(&mut bundle.model.critic_sketch, &phase.critic_sketch.slices())?;
    bundle
        .opt
        .critic_image
        .step(&mut bundle.model.critic_image, &phase.critic_image.slices())?;
    clip_weights(&mut bundle.model.critic_semantic, clip_c)?;
    clip_weights(&mut bundle.model.critic_sketch, clip_c)?;
    clip_weights(&mut bundle.model.critic_image, clip_c)?;
    Ok(phase)
}

/// One generator update: descent on the parameter-side objective for the
/// four generators and the classifier head(s).
pub fn generator_step(bundle: &mut ModelBundle, batch: &Batch, weights: &LossWeights) -> Result<GeneratorPhase> {
    let phase = losses::generator_phase(batch, &bundle.model, weights)?;
    if let Some(term) = phase.report.non_finite_term() {
        return Err(Error::NonFinite(term.into()));
    }
    bundle
        .opt
        .enc_sketch
        .step(&mut bundle.model.enc_sketch, &phase.enc_sketch.slices())?;
    bundle
        .opt
        .enc_image
        .step(&mut bundle.model.enc_image, &phase.enc_image.slices())?;
    bundle
        .opt
        .dec_sketch
        .step(&mut bundle.model.dec_sketch, &phase.dec_sketch.slices())?;
    bundle
        .opt
        .dec_image
        .step(&mut bundle.model.dec_image, &phase.dec_image.slices())?;
    bundle
        .opt
        .head_sketch
        .step(&mut bundle.model.head_sketch, &phase.head_sketch.slices())?;
    if let (Some(head), Some(state), Some(grads)) = (
        bundle.model.head_image.as_mut(),
        bundle.opt.head_image.as_mut(),
        phase.head_image.as_ref(),
    ) {
        state.step(head, &grads.slices())?;
    }
    Ok(phase)
}

/// One iteration's logged losses plus the cross-modal code-gap diagnostic
/// (mean per-coordinate 1-D Wasserstein distance between the two
/// modalities' batch codes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub losses: LossReport,
    pub code_gap: Real,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochValidation {
    pub epoch: u64,
    pub map: Real,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<IterationRecord>,
    pub validation: Vec<EpochValidation>,
}

impl TrainLog {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Held-out queries and gallery scored for mAP after every epoch.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    pub queries: Vec<FeatureRecord>,
    pub gallery: Vec<FeatureRecord>,
    pub options: EvalOptions,
}

fn run_validation(model: &Model, validation: &ValidationSet, epoch: u64, log: &mut TrainLog) -> Result<()> {
    let report = retrieval::evaluate(
        model,
        &validation.queries,
        &validation.gallery,
        &validation.options,
        serde_json::Value::Null,
    )?;
    log.validation.push(EpochValidation {
        epoch,
        map: report.map,
    });
    Ok(())
}

pub fn train(
    split: &ZeroShotSplit,
    semantic: &SemanticTable,
    config: &TrainConfig,
    validation: Option<&ValidationSet>,
) -> Result<(ModelBundle, TrainLog)> {
    train_with_observer(split, semantic, config, validation, |_, _| {})
}

/// Like [`train`], invoking `observer` with the bundle after every full
/// iteration (critic step plus generator step).
pub fn train_with_observer(
    split: &ZeroShotSplit,
    semantic: &SemanticTable,
    config: &TrainConfig,
    validation: Option<&ValidationSet>,
    mut observer: impl FnMut(u64, &ModelBundle),
) -> Result<(ModelBundle, TrainLog)> {
    config.validate()?;
    if semantic.code_dim != config.code_dim {
        return Err(Error::shape("semantic table code dim", config.code_dim, semantic.code_dim));
    }
    if let Some(first) = split.train.first() {
        if first.feature.len() != config.feature_dim {
            return Err(Error::shape("training feature dim", config.feature_dim, first.feature.len()));
        }
    }
    let batcher = Batcher::new(split, semantic, config.batch_size, derive_seed(config.seed, STREAM_BATCHES))?;
    let mut bundle = ModelBundle::init(config, batcher.classes().len())?;
    let mut log = TrainLog::default();

    let per_epoch = batcher.batches_per_epoch();
    let mut epoch: u64 = 0;
    let mut batches = batcher.epoch(epoch);
    let mut used_in_epoch = 0usize;

    let tag = |err: Error, iteration: u64| -> Error {
        match err {
            Error::NonFinite(term) => Error::NonFinite(format!("{term} at iteration {iteration}")),
            other => other,
        }
    };

    for t in 1..=config.max_iterations {
        let mut current: Option<Batch> = None;
        for _ in 0..config.n_critic {
            if used_in_epoch == per_epoch {
                if let Some(v) = validation {
                    run_validation(&bundle.model, v, epoch, &mut log)?;
                }
                epoch += 1;
                batches = batcher.epoch(epoch);
                used_in_epoch = 0;
            }
            let batch = batches.next().expect("fresh epoch yields at least one batch");
            used_in_epoch += 1;
            critic_step(&mut bundle, &batch, &config.weights, config.clip_c).map_err(|e| tag(e, t))?;
            current = Some(batch);
        }
        let batch = current.expect("n_critic >= 1 leaves a batch");
        let phase = generator_step(&mut bundle, &batch, &config.weights).map_err(|e| tag(e, t))?;
        let code_gap = retrieval::code_gap(&phase.code_sketch, &phase.code_image)?;
        log.iterations.push(IterationRecord {
            iteration: t,
            losses: phase.report,
            code_gap,
        });
        observer(t, &bundle);
    }

    // A run ending exactly on an epoch boundary still validates that epoch.
    if used_in_epoch == per_epoch {
        if let Some(v) = validation {
            run_validation(&bundle.model, v, epoch, &mut log)?;
        }
    }

    Ok((bundle, log))
}

const CHECKPOINT_MAGIC: [u8; 8] = *b"SKRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    magic: [u8; 8],
    version: u32,
}

/// Writes the bundle as a versioned binary container; parameters round-trip
/// bit-exactly.
pub fn checkpoint_save(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC,
        version: CHECKPOINT_VERSION,
    };
    bincode::serialize_into(&mut writer, &header)
        .and_then(|()| bincode::serialize_into(&mut writer, bundle))
        .map_err(|e| Error::Validation(format!("checkpoint encode failed: {e}")))?;
    writer.flush()?;
    Ok(())
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let corrupt = |e: bincode::Error| {
        Error::Validation(format!("checkpoint {} is truncated or corrupt: {e}", path.display()))
    };
    let header: CheckpointHeader = bincode::deserialize_from(&mut reader).map_err(corrupt)?;
    if header.magic != CHECKPOINT_MAGIC {
        return Err(Error::Validation(format!("{} is not a checkpoint file", path.display())));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let bundle: ModelBundle = bincode::deserialize_from(&mut reader).map_err(corrupt)?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Validation(format!(
            "{} has trailing bytes after the checkpoint payload",
            path.display()
        )));
    }
    bundle.validate()?;
    Ok(bundle)
}
