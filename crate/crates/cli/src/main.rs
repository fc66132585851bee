//! `midiforge` command line.
//!
//! Exit codes: 0 ok, 1 other failure (I/O, bad config), 2 unparsable input
//! (MIDI, token text or command line), 3 vocabulary error, 4 missing caption
//! embeddings, 5 checkpoint error, 6 no generated/reference pairs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use log::{info, warn};

use midiforge::attributes::analyze;
use midiforge::captions::{random_pseudo_caption, render_pseudo_caption};
use midiforge::corpus::{
    read_manifest, write_corpus, write_manifest, ManifestEntry, SyntheticCorpusSpec,
};
use midiforge::eval::{
    aggregate, evaluate_pair, parse_clap_scores, EvalPair, FileReport, MetricsReport, Reference,
};
use midiforge::midi::{extract_notes, parse_midi, write_midi, MidiFile};
use midiforge::model::{
    generate, load_checkpoint, mix_seed, save_checkpoint, Encoder, ModelError, PrecomputedEncoder,
    SamplingParams, TextEncoder,
};
use midiforge::remi::{decode, encode, TokenSequence, VocabConfig, Vocabulary};
use midiforge::training::{EncoderKind, TrainConfig, TrainError, TrainMode, Trainer};

const EXIT_OTHER: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_VOCAB: u8 = 3;
const EXIT_EMBEDDINGS: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;
const EXIT_NO_PAIRS: u8 = 6;

struct Failure {
    code: u8,
    error: anyhow::Error,
}

type Result<T> = std::result::Result<T, Failure>;

trait ExitWith<T> {
    fn exit_with(self, code: u8) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for std::result::Result<T, E> {
    fn exit_with(self, code: u8) -> Result<T> {
        self.map_err(|e| Failure {
            code,
            error: e.into(),
        })
    }
}

fn fail<T>(code: u8, error: anyhow::Error) -> Result<T> {
    Err(Failure { code, error })
}

#[derive(Parser)]
#[command(
    name = "midiforge",
    version,
    about = "Text-to-MIDI toolkit: tokenize, analyze, caption, train, generate, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a vocabulary file (the default one unless --config is given).
    Vocab {
        #[arg(long)]
        out: PathBuf,
        /// TOML bin configuration.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// MIDI file to a token-per-line text file.
    Tokenize {
        midi: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Token text file back to MIDI.
    Detokenize {
        tokens: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 480)]
        ticks_per_quarter: u16,
    },
    /// Print tempo, time signature, key and instruments as JSON.
    Analyze { midi: PathBuf },
    /// Pseudo-caption every MIDI file in a directory into a manifest.
    Caption {
        dir: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Use this template for every file instead of a seeded random one.
        #[arg(long)]
        template: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic captioned corpus.
    MakeCorpus {
        #[arg(long, short)]
        out: PathBuf,
        /// TOML corpus spec; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train (or resume training) a model on a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// TOML training config.
        #[arg(long, conflicts_with = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, conflicts_with = "resume")]
        vocab: Option<PathBuf>,
        #[arg(long, value_parser = ["pretrain", "finetune"], conflicts_with = "resume")]
        mode: Option<String>,
        #[arg(long, conflicts_with = "resume")]
        seed: Option<u64>,
        /// Stop after this many completed updates (default: total_steps).
        #[arg(long)]
        steps: Option<u64>,
        /// Also write a checkpoint every N updates.
        #[arg(long, default_value_t = 0)]
        save_every: u64,
        /// JSON-lines loss log; defaults to the checkpoint path with a .loss.jsonl extension.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sample a MIDI file for a caption.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, short)]
        out: PathBuf,
        /// Embedding file for models trained on precomputed embeddings.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        max_tokens: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 40)]
        top_k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the sampled tokens as text.
        #[arg(long)]
        tokens_out: Option<PathBuf>,
    },
    /// Objective metrics for generated files paired with references by file stem.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        /// Directory of reference MIDI files.
        #[arg(long, required_unless_present = "reference_manifest")]
        reference: Option<PathBuf>,
        /// Manifest whose attributes serve as references, matched by id.
        #[arg(long, conflicts_with = "reference")]
        reference_manifest: Option<PathBuf>,
        #[arg(long)]
        clap: Option<PathBuf>,
        /// Report path; stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MIDIFORGE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Vocab { out, config } => cmd_vocab(&out, config.as_deref()),
        Command::Tokenize { midi, vocab, out } => cmd_tokenize(&midi, vocab.as_deref(), &out),
        Command::Detokenize {
            tokens,
            vocab,
            out,
            ticks_per_quarter,
        } => cmd_detokenize(&tokens, vocab.as_deref(), &out, ticks_per_quarter),
        Command::Analyze { midi } => cmd_analyze(&midi),
        Command::Caption {
            dir,
            out,
            template,
            seed,
        } => cmd_caption(&dir, &out, template, seed),
        Command::MakeCorpus {
            out,
            config,
            count,
            seed,
        } => cmd_make_corpus(&out, config.as_deref(), count, seed),
        Command::Train {
            manifest,
            config,
            resume,
            out,
            vocab,
            mode,
            seed,
            steps,
            save_every,
            log,
        } => {
            let opts = TrainOptions {
                config,
                resume,
                vocab,
                mode,
                seed,
                steps,
                save_every,
                log,
            };
            cmd_train(&manifest, &out, opts)
        }
        Command::Generate {
            checkpoint,
            caption,
            out,
            embeddings,
            max_tokens,
            temperature,
            top_k,
            seed,
            tokens_out,
        } => {
            let params = SamplingParams {
                max_tokens,
                temperature,
                top_k,
                seed,
            };
            cmd_generate(
                &checkpoint,
                &caption,
                &out,
                embeddings.as_deref(),
                &params,
                tokens_out.as_deref(),
            )
        }
        Command::Evaluate {
            generated,
            reference,
            reference_manifest,
            clap,
            out,
        } => {
            let reference = match (reference, reference_manifest) {
                (Some(dir), _) => References::Dir(dir),
                (None, Some(m)) => References::Manifest(m),
                (None, None) => unreachable!("clap requires one of them"),
            };
            cmd_evaluate(&generated, &reference, clap.as_deref(), out.as_deref())
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .exit_with(EXIT_OTHER)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .exit_with(EXIT_OTHER)
}

fn load_midi(path: &Path) -> Result<MidiFile> {
    let bytes = read(path)?;
    parse_midi(&bytes)
        .with_context(|| format!("parsing {}", path.display()))
        .exit_with(EXIT_PARSE)
}

fn load_vocab(path: Option<&Path>) -> Result<Vocabulary> {
    match path {
        None => Vocabulary::build(VocabConfig::default()).exit_with(EXIT_VOCAB),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .exit_with(EXIT_VOCAB)?;
            Vocabulary::from_toml(&text)
                .with_context(|| format!("vocabulary {}", p.display()))
                .exit_with(EXIT_VOCAB)
        }
    }
}

fn cmd_vocab(out: &Path, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        None => VocabConfig::default(),
        Some(p) => {
            let text = String::from_utf8_lossy(&read(p)?).into_owned();
            toml::from_str(&text)
                .with_context(|| format!("bin config {}", p.display()))
                .exit_with(EXIT_VOCAB)?
        }
    };
    let vocab = Vocabulary::build(cfg).exit_with(EXIT_VOCAB)?;
    write(out, vocab.to_toml().as_bytes())?;
    println!("{} tokens", vocab.len());
    Ok(())
}

fn cmd_tokenize(midi: &Path, vocab: Option<&Path>, out: &Path) -> Result<()> {
    let vocab = load_vocab(vocab)?;
    let file = load_midi(midi)?;
    let encoded = encode(&extract_notes(&file), &file.meta(), &vocab);
    write(out, encoded.tokens.to_text(&vocab).as_bytes())?;
    println!(
        "tokens {} unk {}",
        encoded.tokens.len(),
        encoded.report.unmappable
    );
    Ok(())
}

fn cmd_detokenize(tokens: &Path, vocab: Option<&Path>, out: &Path, tpq: u16) -> Result<()> {
    let vocab = load_vocab(vocab)?;
    let text = String::from_utf8_lossy(&read(tokens)?).into_owned();
    let seq = TokenSequence::from_text(&text, &vocab)
        .with_context(|| format!("parsing {}", tokens.display()))
        .exit_with(EXIT_PARSE)?;
    tokens_to_midi(&seq, &vocab, tpq, out)?;
    Ok(())
}

/// Decode, write the MIDI file and print a one-line summary.
fn tokens_to_midi(seq: &TokenSequence, vocab: &Vocabulary, tpq: u16, out: &Path) -> Result<()> {
    let decoded = decode(seq, vocab, tpq);
    let file = MidiFile::from_notes(&decoded.notes, &decoded.meta);
    write(out, &write_midi(&file).exit_with(EXIT_OTHER)?)?;
    let end = decoded
        .notes
        .notes
        .iter()
        .map(|n| n.end())
        .max()
        .unwrap_or(0);
    println!(
        "tokens {} notes {} violations {} unknown {} seconds {:.2}",
        seq.len(),
        decoded.notes.len(),
        decoded.report.violations,
        decoded.report.unknown,
        file.tick_to_seconds(end)
    );
    Ok(())
}

fn cmd_analyze(midi: &Path) -> Result<()> {
    let attrs = analyze(&load_midi(midi)?)
        .with_context(|| midi.display().to_string())
        .exit_with(EXIT_OTHER)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&attrs).expect("attributes serialize")
    );
    Ok(())
}

fn midi_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))
        .exit_with(EXIT_OTHER)?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.exit_with(EXIT_OTHER)?.path();
        let is_midi = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"));
        if let (true, Some(stem)) = (is_midi, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

fn cmd_caption(dir: &Path, out: &Path, template: Option<usize>, seed: u64) -> Result<()> {
    if let Some(t) = template {
        if t >= midiforge::captions::TEMPLATE_COUNT {
            return fail(EXIT_OTHER, anyhow!("template id {t} out of range"));
        }
    }
    let base = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, (stem, path)) in midi_files(dir)?.into_iter().enumerate() {
        let file = match load_midi(&path) {
            Ok(f) => f,
            Err(f) => {
                warn!("skipping {}: {:#}", path.display(), f.error);
                continue;
            }
        };
        let attributes = match analyze(&file) {
            Ok(a) => a,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let caption = match template {
            Some(t) => render_pseudo_caption(&attributes, t),
            None => random_pseudo_caption(&attributes, mix_seed(&[seed, i as u64])),
        };
        let midi_path = relative_to(&path, base);
        entries.push(ManifestEntry {
            id: stem,
            midi_path,
            caption: caption.text,
            attributes,
        });
    }
    write_manifest(&entries, out).exit_with(EXIT_OTHER)?;
    println!("{} captions", entries.len());
    Ok(())
}

/// `path` relative to `base` when it lies below it, else absolute.
fn relative_to(path: &Path, base: &Path) -> String {
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    p.strip_prefix(&b)
        .unwrap_or(&p)
        .to_string_lossy()
        .into_owned()
}

fn cmd_make_corpus(
    out: &Path,
    config: Option<&Path>,
    count: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut spec = match config {
        None => SyntheticCorpusSpec::default(),
        Some(p) => {
            let text = String::from_utf8_lossy(&read(p)?).into_owned();
            toml::from_str(&text)
                .with_context(|| format!("corpus spec {}", p.display()))
                .exit_with(EXIT_OTHER)?
        }
    };
    if let Some(c) = count {
        spec.count = c;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let entries = write_corpus(&spec, out).exit_with(EXIT_OTHER)?;
    println!("{} pieces in {}", entries.len(), out.display());
    Ok(())
}

struct TrainOptions {
    config: Option<PathBuf>,
    resume: Option<PathBuf>,
    vocab: Option<PathBuf>,
    mode: Option<String>,
    seed: Option<u64>,
    steps: Option<u64>,
    save_every: u64,
    log: Option<PathBuf>,
}

fn train_failure(e: TrainError) -> Failure {
    let code = match &e {
        TrainError::Model(ModelError::MissingEmbedding(_) | ModelError::EmbeddingFile(_)) => {
            EXIT_EMBEDDINGS
        }
        TrainError::Midi { .. } => EXIT_PARSE,
        _ => EXIT_OTHER,
    };
    Failure {
        code,
        error: e.into(),
    }
}

fn cmd_train(manifest: &Path, out: &Path, opts: TrainOptions) -> Result<()> {
    let (mut trainer, vocab) = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path)
                .with_context(|| path.display().to_string())
                .exit_with(EXIT_CHECKPOINT)?;
            let vocab = ck
                .metadata
                .get("vocabulary")
                .ok_or_else(|| anyhow!("checkpoint carries no vocabulary"))
                .exit_with(EXIT_CHECKPOINT)
                .and_then(|t| Vocabulary::from_toml(t).exit_with(EXIT_VOCAB))?;
            let trainer = Trainer::resume(ck).map_err(|e| Failure {
                code: EXIT_CHECKPOINT,
                error: e.into(),
            })?;
            info!("resuming at step {}", trainer.state.step);
            (trainer, vocab)
        }
        None => {
            let mut config = match &opts.config {
                Some(p) => TrainConfig::from_toml(&String::from_utf8_lossy(&read(p)?))
                    .with_context(|| p.display().to_string())
                    .exit_with(EXIT_OTHER)?,
                None => TrainConfig::default(),
            };
            match opts.mode.as_deref() {
                Some("finetune") => config.train.mode = TrainMode::Finetune,
                Some(_) => config.train.mode = TrainMode::Pretrain,
                None => {}
            }
            if let Some(s) = opts.seed {
                config.train.seed = s;
            }
            if config.encoder.kind == EncoderKind::Precomputed {
                if let Some(p) = config.encoder.embeddings.as_ref().filter(|p| !p.exists()) {
                    return fail(
                        EXIT_EMBEDDINGS,
                        anyhow!("embedding file {} not found", p.display()),
                    );
                }
            }
            let vocab = load_vocab(opts.vocab.as_deref())?;
            let trainer = Trainer::new(config, &vocab).map_err(train_failure)?;
            (trainer, vocab)
        }
    };

    let data = trainer
        .load_dataset(manifest, &vocab)
        .map_err(train_failure)?;
    if data.is_empty() {
        return fail(
            EXIT_OTHER,
            anyhow!("{} lists no pieces", manifest.display()),
        );
    }
    trainer.check_captions(&data).map_err(train_failure)?;

    let log_path = opts
        .log
        .clone()
        .unwrap_or_else(|| out.with_extension("loss.jsonl"));
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(opts.resume.is_some())
        .write(true)
        .truncate(opts.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))
        .exit_with(EXIT_OTHER)?;

    let until = opts.steps.unwrap_or(trainer.state.total_steps);
    let start_step = trainer.state.step;
    let mut first_loss = None;
    let mut last_loss = None;
    let mut io_error = None;
    trainer
        .run(&data, until, |t, step| {
            first_loss.get_or_insert(step.loss);
            last_loss = Some(step.loss);
            info!(
                "step {} loss {:.4} lr {:.3e}",
                step.step, step.loss, step.lr
            );
            let line = serde_json::to_string(step).expect("step log serializes");
            if let Err(e) = writeln!(log, "{line}") {
                io_error = Some(anyhow::Error::from(e));
            }
            if opts.save_every > 0 && step.step % opts.save_every == 0 {
                save_checkpoint(&t.checkpoint(), out)?;
            }
            Ok(())
        })
        .map_err(train_failure)?;
    if let Some(e) = io_error {
        return fail(
            EXIT_OTHER,
            e.context(format!("writing {}", log_path.display())),
        );
    }
    save_checkpoint(&trainer.checkpoint(), out)
        .with_context(|| format!("writing {}", out.display()))
        .exit_with(EXIT_OTHER)?;
    match (first_loss, last_loss) {
        (Some(a), Some(b)) => println!(
            "steps {}..{} loss {a:.4} -> {b:.4}; checkpoint {}",
            start_step + 1,
            trainer.state.step,
            out.display()
        ),
        _ => println!(
            "already at step {}; checkpoint {}",
            trainer.state.step,
            out.display()
        ),
    }
    Ok(())
}

fn cmd_generate(
    checkpoint: &Path,
    caption: &str,
    out: &Path,
    embeddings: Option<&Path>,
    params: &SamplingParams,
    tokens_out: Option<&Path>,
) -> Result<()> {
    if caption.trim().is_empty() {
        return fail(EXIT_OTHER, anyhow!("caption is empty"));
    }
    let ck = load_checkpoint(checkpoint)
        .with_context(|| checkpoint.display().to_string())
        .exit_with(EXIT_CHECKPOINT)?;
    let vocab = ck
        .metadata
        .get("vocabulary")
        .ok_or_else(|| anyhow!("checkpoint carries no vocabulary"))
        .exit_with(EXIT_CHECKPOINT)
        .and_then(|t| Vocabulary::from_toml(t).exit_with(EXIT_VOCAB))?;
    ck.expect_vocab_size(vocab.len())
        .exit_with(EXIT_CHECKPOINT)?;

    let encoder = match (ck.encoder, embeddings) {
        (Some(toy), _) => Encoder::Toy(toy),
        (None, path) => {
            let from_config = ck
                .metadata
                .get("train_config")
                .and_then(|t| TrainConfig::from_toml(t).ok())
                .and_then(|c| c.encoder.embeddings);
            let path = path
                .map(Path::to_path_buf)
                .or(from_config)
                .ok_or_else(|| anyhow!("model uses precomputed embeddings; pass --embeddings"))
                .exit_with(EXIT_EMBEDDINGS)?;
            let file = fs::File::open(&path)
                .with_context(|| path.display().to_string())
                .exit_with(EXIT_EMBEDDINGS)?;
            Encoder::Precomputed(PrecomputedEncoder::read_from(file).exit_with(EXIT_EMBEDDINGS)?)
        }
    };
    let h = encoder.encode_text(caption).map_err(|e| {
        let code = if matches!(e, ModelError::MissingEmbedding(_)) {
            EXIT_EMBEDDINGS
        } else {
            EXIT_OTHER
        };
        Failure {
            code,
            error: e.into(),
        }
    })?;
    let seq = generate(&ck.model, &h, params).map_err(|e| {
        let code = if matches!(e, ModelError::ContextOverflow { .. }) {
            EXIT_CHECKPOINT
        } else {
            EXIT_OTHER
        };
        Failure {
            code,
            error: e.into(),
        }
    })?;
    if let Some(p) = tokens_out {
        write(p, seq.to_text(&vocab).as_bytes())?;
    }
    tokens_to_midi(&seq, &vocab, 480, out)?;
    Ok(())
}

enum References {
    Dir(PathBuf),
    Manifest(PathBuf),
}

fn cmd_evaluate(
    generated: &Path,
    references: &References,
    clap: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let clap_scores = match clap {
        Some(p) => parse_clap_scores(&String::from_utf8_lossy(&read(p)?))
            .map_err(|e| anyhow!("{}: {e}", p.display()))
            .exit_with(EXIT_PARSE)?,
        None => HashMap::new(),
    };
    let generated_files = midi_files(generated)?;
    let mut lookup: BTreeMap<String, Reference> = BTreeMap::new();
    let mut reference_errors: BTreeMap<String, String> = BTreeMap::new();
    match references {
        References::Dir(dir) => {
            for (stem, path) in midi_files(dir)? {
                match load_midi(&path) {
                    Ok(f) => {
                        lookup.insert(stem, Reference::Midi(f));
                    }
                    Err(f) => {
                        reference_errors.insert(stem, format!("reference: {:#}", f.error));
                    }
                }
            }
        }
        References::Manifest(path) => {
            for e in read_manifest(path)
                .with_context(|| path.display().to_string())
                .exit_with(EXIT_PARSE)?
            {
                lookup.insert(
                    e.id,
                    Reference::Attributes {
                        bpm: e.attributes.bpm,
                        key: e.attributes.key,
                    },
                );
            }
        }
    }

    let mut files = Vec::new();
    for (stem, path) in &generated_files {
        let reference = match (lookup.remove(stem), reference_errors.remove(stem)) {
            (Some(r), _) => r,
            (None, Some(err)) => {
                files.push(FileReport {
                    file_id: stem.clone(),
                    metrics: None,
                    error: Some(err),
                });
                continue;
            }
            (None, None) => {
                warn!("no reference for {stem}; skipped");
                continue;
            }
        };
        let report = match load_midi(path) {
            Ok(generated) => {
                let pair = EvalPair {
                    id: stem.clone(),
                    generated,
                    reference,
                };
                match evaluate_pair(&pair, clap_scores.get(stem).copied()) {
                    Ok(m) => FileReport {
                        file_id: stem.clone(),
                        metrics: Some(m),
                        error: None,
                    },
                    Err(e) => FileReport {
                        file_id: stem.clone(),
                        metrics: None,
                        error: Some(e),
                    },
                }
            }
            Err(f) => FileReport {
                file_id: stem.clone(),
                metrics: None,
                error: Some(format!("{:#}", f.error)),
            },
        };
        files.push(report);
    }
    if files.is_empty() {
        return fail(
            EXIT_NO_PAIRS,
            anyhow!("no generated file has a reference with the same stem"),
        );
    }
    let report = MetricsReport {
        aggregate: aggregate(&files),
        files,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match out {
        Some(p) => {
            write(p, text.as_bytes())?;
            let a = &report.aggregate;
            println!(
                "pairs {} failed {} TB {:.3} TBT {:.3} CK {:.3} CKD {:.3}",
                a.files_evaluated, a.files_failed, a.tb, a.tbt, a.ck, a.ckd
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}
