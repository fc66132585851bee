//! Training driver: configuration file, dataset loading from a corpus
//! manifest, seeded batch selection and a resumable step loop.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captions::{omit_sentences, Caption};
use crate::corpus::{read_manifest, CorpusError};
use crate::midi::{extract_notes, parse_midi, MidiError};
use crate::model::{
    backward, mix_seed, train_step, Checkpoint, Conditioning, DecoderModel, Encoder, Example,
    ModelConfig, ModelError, PrecomputedEncoder, TextEncoder, ToyEncoder, ToyEncoderConfig,
    TrainState,
};
use crate::remi::{encode, TokenSequence, Vocabulary};

pub const PRETRAIN_LR: f64 = 1e-4;
pub const FINETUNE_LR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Midi { path: PathBuf, source: MidiError },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    /// Sentence omission on, lower default learning rate.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub context_length: usize,
    pub encoder_dim: usize,
    pub dropout: f64,
    /// Taken from the vocabulary when absent; must match it when present.
    pub vocab_size: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::toy(0);
        Self {
            layers: t.layers,
            heads: t.heads,
            model_dim: t.model_dim,
            ff_dim: t.ff_dim,
            context_length: t.context_length,
            encoder_dim: t.encoder_dim,
            dropout: t.dropout,
            vocab_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Toy,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    /// Hashed word-piece table size of the toy encoder.
    pub pieces: usize,
    /// Embedding file for the precomputed encoder.
    pub embeddings: Option<PathBuf>,
    pub train_encoder: bool,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Toy,
            pieces: ToyEncoderConfig::default().pieces,
            embeddings: None,
            train_encoder: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    /// Defaults to 1e-4 for pretraining and 1e-6 for fine-tuning.
    pub base_lr: Option<f64>,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub accumulation: usize,
    pub seed: u64,
    /// Token sequences are cut to this length; defaults to context_length + 1.
    pub max_sequence_length: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::Pretrain,
            base_lr: None,
            warmup_steps: 20_000,
            total_steps: 100_000,
            batch_size: 4,
            accumulation: 4,
            seed: 0,
            max_sequence_length: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelSection,
    pub encoder: EncoderSection,
    pub train: TrainSection,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let t = &self.train;
        if t.batch_size == 0 || t.accumulation == 0 {
            return Err(TrainError::Config(
                "batch_size and accumulation must be positive".into(),
            ));
        }
        if t.total_steps == 0 {
            return Err(TrainError::Config("total_steps must be positive".into()));
        }
        if self.base_lr() < 0.0 || !self.base_lr().is_finite() {
            return Err(TrainError::Config(
                "base_lr must be finite and non-negative".into(),
            ));
        }
        if self.encoder.kind == EncoderKind::Precomputed && self.encoder.embeddings.is_none() {
            return Err(TrainError::Config(
                "the precomputed encoder needs an embeddings file".into(),
            ));
        }
        if self.encoder.kind == EncoderKind::Toy && self.encoder.pieces == 0 {
            return Err(TrainError::Config("encoder.pieces must be positive".into()));
        }
        Ok(())
    }

    pub fn base_lr(&self) -> f64 {
        self.train.base_lr.unwrap_or(match self.train.mode {
            TrainMode::Pretrain => PRETRAIN_LR,
            TrainMode::Finetune => FINETUNE_LR,
        })
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig, TrainError> {
        let m = &self.model;
        if let Some(v) = m.vocab_size {
            if v != vocab_size {
                return Err(TrainError::Model(ModelError::ShapeMismatch(format!(
                    "config vocab_size {v} but the vocabulary has {vocab_size} tokens"
                ))));
            }
        }
        let cfg = ModelConfig {
            layers: m.layers,
            heads: m.heads,
            model_dim: m.model_dim,
            ff_dim: m.ff_dim,
            vocab_size,
            context_length: m.context_length,
            encoder_dim: m.encoder_dim,
            dropout: m.dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn max_sequence_length(&self) -> usize {
        self.train
            .max_sequence_length
            .unwrap_or(self.model.context_length + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub tokens: TokenSequence,
    pub caption: String,
}

/// Tokenize every manifest entry; paths are relative to the manifest.
pub fn load_dataset(
    manifest: &Path,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TrainingExample>, TrainError> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for entry in read_manifest(manifest)? {
        let path = base.join(&entry.midi_path);
        let midi = parse_midi(&fs::read(&path)?).map_err(|source| TrainError::Midi {
            path: path.clone(),
            source,
        })?;
        let encoded = encode(&extract_notes(&midi), &midi.meta(), vocab);
        out.push(TrainingExample {
            id: entry.id,
            tokens: encoded.tokens.truncated(max_len),
            caption: entry.caption,
        });
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tokens: usize,
    pub captions: usize,
    /// Captions that went through sentence omission this step.
    pub omitted: usize,
    pub sentences_removed: usize,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: DecoderModel,
    pub encoder: Encoder,
    pub state: TrainState,
    pub vocabulary: String,
}

fn build_encoder(config: &TrainConfig, seed: u64) -> Result<Encoder, TrainError> {
    let dim = config.model.encoder_dim;
    match config.encoder.kind {
        EncoderKind::Toy => Ok(Encoder::Toy(ToyEncoder::new(
            ToyEncoderConfig {
                pieces: config.encoder.pieces,
                dim,
            },
            seed,
        ))),
        EncoderKind::Precomputed => {
            let path = config.encoder.embeddings.as_ref().expect("validated");
            let enc = PrecomputedEncoder::read_from(fs::File::open(path)?)?;
            if enc.dim() != dim {
                return Err(ModelError::ShapeMismatch(format!(
                    "embeddings have d={} but encoder_dim={dim}",
                    enc.dim()
                ))
                .into());
            }
            Ok(Encoder::Precomputed(enc))
        }
    }
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab: &Vocabulary) -> Result<Self, TrainError> {
        config.validate()?;
        let seed = config.train.seed;
        let model = DecoderModel::new(config.model_config(vocab.len())?, mix_seed(&[seed, 1]))?;
        let encoder = build_encoder(&config, mix_seed(&[seed, 2]))?;
        let t = &config.train;
        let state = TrainState::new(
            &model,
            &encoder,
            config.base_lr(),
            t.warmup_steps,
            t.total_steps,
            seed,
            config.encoder.train_encoder,
        );
        Ok(Self {
            config,
            model,
            encoder,
            state,
            vocabulary: vocab.to_toml(),
        })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint) -> Result<Self, TrainError> {
        let text = ck
            .metadata
            .get("train_config")
            .ok_or_else(|| TrainError::Config("checkpoint has no train_config".into()))?;
        let config = TrainConfig::from_toml(text)?;
        let vocabulary = ck.metadata.get("vocabulary").cloned().unwrap_or_default();
        let state = ck
            .state
            .ok_or_else(|| TrainError::Config("checkpoint has no optimizer state".into()))?;
        let encoder = match ck.encoder {
            Some(toy) => Encoder::Toy(toy),
            None => build_encoder(&config, 0)?,
        };
        Ok(Self {
            config,
            model: ck.model,
            encoder,
            state,
            vocabulary,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut metadata = std::collections::BTreeMap::new();
        metadata.insert("train_config".to_string(), self.config.to_toml());
        metadata.insert("vocabulary".to_string(), self.vocabulary.clone());
        let encoder = match &self.encoder {
            Encoder::Toy(t) => Some(t.clone()),
            Encoder::Precomputed(_) => None,
        };
        Checkpoint {
            model: self.model.clone(),
            encoder,
            state: Some(self.state.clone()),
            metadata,
        }
    }

    /// The micro-batches for update `step` (1-based). Depends only on the
    /// seed and the step, which is what makes resuming exact.
    pub fn batches_for_step(
        &self,
        data: &[TrainingExample],
        step: u64,
    ) -> (Vec<Vec<Example>>, usize, usize) {
        let t = &self.config.train;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[t.seed, step, 0xba7c]));
        let mut omitted = 0;
        let mut removed = 0;
        let batches = (0..t.accumulation)
            .map(|j| {
                (0..t.batch_size)
                    .map(|b| {
                        let ex = &data[rng.random_range(0..data.len())];
                        let caption = match t.mode {
                            TrainMode::Pretrain => ex.caption.clone(),
                            TrainMode::Finetune => {
                                let seed = mix_seed(&[t.seed, step, j as u64, b as u64]);
                                let (c, info) =
                                    omit_sentences(&Caption::new(ex.caption.as_str()), seed);
                                omitted += usize::from(info.applied);
                                removed += info.removed;
                                c.text
                            }
                        };
                        Example {
                            tokens: ex.tokens.clone(),
                            conditioning: Conditioning::Text(caption),
                        }
                    })
                    .collect()
            })
            .collect();
        (batches, omitted, removed)
    }

    pub fn step(&mut self, data: &[TrainingExample]) -> Result<StepLog, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Config("empty training set".into()));
        }
        let (batches, omitted, sentences_removed) =
            self.batches_for_step(data, self.state.step + 1);
        let captions = batches.iter().map(Vec::len).sum();
        let r = train_step(
            &mut self.model,
            &mut self.encoder,
            &mut self.state,
            &batches,
        )?;
        Ok(StepLog {
            step: r.step,
            loss: r.loss,
            lr: r.lr,
            tokens: r.tokens,
            captions,
            omitted,
            sentences_removed,
        })
    }

    /// Train until `state.step == until`, calling `on_step` after each update.
    pub fn run(
        &mut self,
        data: &[TrainingExample],
        until: u64,
        mut on_step: impl FnMut(&Self, &StepLog) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while self.state.step < until {
            let log = self.step(data)?;
            on_step(self, &log)?;
        }
        Ok(())
    }

    /// Mean next-token loss over the whole set, without dropout.
    pub fn mean_loss(&self, data: &[TrainingExample]) -> Result<f64, TrainError> {
        let batch: Vec<Example> = data
            .iter()
            .map(|e| Example {
                tokens: e.tokens.clone(),
                conditioning: Conditioning::Text(e.caption.clone()),
            })
            .collect();
        Ok(backward(&self.model, &self.encoder, &batch)?.mean_loss())
    }

    pub fn load_dataset(
        &self,
        manifest: &Path,
        vocab: &Vocabulary,
    ) -> Result<Vec<TrainingExample>, TrainError> {
        load_dataset(manifest, vocab, self.config.max_sequence_length())
    }

    /// Check that every caption resolves with the configured encoder.
    pub fn check_captions(&self, data: &[TrainingExample]) -> Result<(), TrainError> {
        for ex in data {
            self.encoder.encode_text(&ex.caption)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{write_corpus, SyntheticCorpusSpec, MANIFEST_FILE};
    use crate::model::{read_checkpoint, write_checkpoint, ParamSet};
    use crate::remi::VocabConfig;

    fn tiny_config(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            model: ModelSection {
                layers: 1,
                model_dim: 16,
                ff_dim: 32,
                encoder_dim: 8,
                context_length: 48,
                ..Default::default()
            },
            encoder: EncoderSection {
                pieces: 64,
                ..Default::default()
            },
            train: TrainSection {
                mode,
                base_lr: Some(1e-3),
                warmup_steps: 2,
                total_steps: 6,
                batch_size: 2,
                accumulation: 2,
                seed: 5,
                max_sequence_length: None,
            },
        }
    }

    fn dataset(dir: &Path, vocab: &Vocabulary) -> Vec<TrainingExample> {
        write_corpus(
            &SyntheticCorpusSpec {
                count: 6,
                notes_per_piece: (4, 8),
                seed: 2,
                ..Default::default()
            },
            dir,
        )
        .unwrap();
        load_dataset(&dir.join(MANIFEST_FILE), vocab, 49).unwrap()
    }

    #[test]
    fn config_defaults_and_parsing() {
        let cfg = TrainConfig::from_toml("[train]\nmode = \"finetune\"\n").unwrap();
        assert_eq!(cfg.base_lr(), 1e-6);
        assert_eq!(
            (
                cfg.train.batch_size,
                cfg.train.accumulation,
                cfg.train.warmup_steps
            ),
            (4, 4, 20_000)
        );
        assert_eq!(TrainConfig::default().base_lr(), 1e-4);
        assert!(TrainConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(TrainConfig::from_toml("[encoder]\nkind = \"precomputed\"\n").is_err());
        let cfg = tiny_config(TrainMode::Pretrain);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let with_vocab = TrainConfig {
            model: ModelSection {
                vocab_size: Some(10),
                ..Default::default()
            },
            ..cfg
        };
        assert!(with_vocab.model_config(422).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::build(VocabConfig::default()).unwrap();
        let data = dataset(dir.path(), &vocab);

        let mut full = Trainer::new(tiny_config(TrainMode::Pretrain), &vocab).unwrap();
        full.run(&data, 6, |_, _| Ok(())).unwrap();

        let mut first = Trainer::new(tiny_config(TrainMode::Pretrain), &vocab).unwrap();
        first.run(&data, 3, |_, _| Ok(())).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&first.checkpoint(), &mut bytes).unwrap();
        let mut resumed = Trainer::resume(read_checkpoint(bytes.as_slice()).unwrap()).unwrap();
        resumed.run(&data, 6, |_, _| Ok(())).unwrap();

        assert_eq!(resumed.state.step, 6);
        assert_eq!(resumed.model.params, full.model.params);
        assert_eq!(resumed.state, full.state);
    }

    #[test]
    fn finetune_logs_omissions() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::build(VocabConfig::default()).unwrap();
        let data = dataset(dir.path(), &vocab);
        let mut trainer = Trainer::new(tiny_config(TrainMode::Finetune), &vocab).unwrap();
        let mut logs = Vec::new();
        trainer
            .run(&data, 3, |_, l| {
                logs.push(l.clone());
                Ok(())
            })
            .unwrap();
        assert!(logs
            .iter()
            .all(|l| l.captions == 4 && l.omitted <= 4 && l.loss.is_finite()));
        let (b1, _, _) = trainer.batches_for_step(&data, 2);
        let (b2, _, _) = trainer.batches_for_step(&data, 2);
        assert_eq!(format!("{b1:?}"), format!("{b2:?}"));
        let pre = Trainer::new(tiny_config(TrainMode::Pretrain), &vocab).unwrap();
        assert_eq!(pre.batches_for_step(&data, 1).1, 0);
    }

    #[test]
    fn frozen_toy_encoder_stays_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::build(VocabConfig::default()).unwrap();
        let data = dataset(dir.path(), &vocab);
        let mut trainer = Trainer::new(tiny_config(TrainMode::Pretrain), &vocab).unwrap();
        let before = trainer.encoder.clone();
        trainer.run(&data, 2, |_, _| Ok(())).unwrap();
        assert_eq!(trainer.encoder, before);
        assert!(trainer.state.m.all_finite());
        assert!(trainer.mean_loss(&data).unwrap() > 0.0);
    }
}
