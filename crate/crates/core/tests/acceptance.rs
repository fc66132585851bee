//! One line per acceptance criterion. Exits nonzero if any criterion fails.
//!
//! Run with `cargo test -p midiforge --test acceptance`.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use midiforge::captions::{omit_sentences, Caption};
use midiforge::corpus::{write_corpus, CaptionPolicy, SyntheticCorpusSpec, MANIFEST_FILE};
use midiforge::eval::{
    compression_ratio, cosiatec, difference_histogram, evaluate_corpus, siatec, tempo_bin,
    tempo_bin_metrics, Point, PointSet,
};
use midiforge::midi::{parse_midi, write_midi};
use midiforge::model::{
    backward, backward_scaled, cosine_lr, generate, mix_seed, Conditioning, DecoderModel, Encoder,
    Example, ModelConfig, ParamSet, SamplingParams, TextEncoder, ToyEncoder, ToyEncoderConfig,
    TrainState,
};
use midiforge::remi::{decode, encode, Token, VocabConfig, Vocabulary};
use midiforge::training::{
    load_dataset, ModelSection, TrainConfig, TrainSection, Trainer, TrainingExample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn vocab() -> Vocabulary {
    Vocabulary::build(VocabConfig::default()).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn midi_roundtrip() -> Outcome {
    let mut failures = 0;
    let mut events = 0;
    for seed in 0..1000 {
        let f = common::random_midi(&mut ChaCha8Rng::seed_from_u64(seed));
        events += f.tracks.iter().map(|t| t.events.len()).sum::<usize>();
        let ok = write_midi(&f)
            .ok()
            .and_then(|b| parse_midi(&b).ok())
            .is_some_and(|back| back == f);
        failures += usize::from(!ok);
    }
    check(
        failures == 0,
        format!("1000 files, {events} events, {failures} failures"),
    )
}

fn tokenizer_roundtrip() -> Outcome {
    let v = vocab();
    let (mut mismatches, mut violations, mut notes) = (0, 0, 0);
    for seed in 0..1000 {
        let (list, meta) = common::random_representable(&mut ChaCha8Rng::seed_from_u64(seed), &v);
        notes += list.len();
        let enc = encode(&list, &meta, &v);
        let dec = decode(&enc.tokens, &v, list.ticks_per_quarter);
        violations += dec.report.violations + dec.report.unknown + enc.report.unmappable;
        mismatches += usize::from(dec.notes != list);
    }
    check(
        mismatches == 0 && violations == 0,
        format!("1000 note lists, {notes} notes, {mismatches} mismatches, {violations} grammar violations"),
    )
}

fn siatec_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut tecs = 0;
    for seed in 0..500 {
        let set = common::random_point_set(&mut ChaCha8Rng::seed_from_u64(seed), 12);
        let fast = siatec(&set);
        tecs += fast.len();
        mismatches += usize::from(fast != common::brute_force_tecs(&set));
    }
    check(
        mismatches == 0,
        format!("500 point sets, {tecs} TECs, {mismatches} mismatches"),
    )
}

fn cover_is_exact(set: &PointSet) -> bool {
    let mut covered: Vec<Point> = cosiatec(set).iter().flat_map(|t| t.covered()).collect();
    let n = covered.len();
    covered.sort();
    covered.dedup();
    covered.len() == n && covered == set.points()
}

fn cosiatec_cover() -> Outcome {
    let mut bad_covers = 0;
    let mut free_sets = 0;
    let mut free_wrong = 0;
    for seed in 0..500 {
        let set = common::random_point_set(&mut ChaCha8Rng::seed_from_u64(seed), 12);
        bad_covers += usize::from(!cover_is_exact(&set));
        if !set.is_empty() && difference_histogram(&set).values().all(|&c| c == 1) {
            free_sets += 1;
            free_wrong += usize::from(compression_ratio(&set) != Some(1.0));
        }
    }
    let motif = [(0, 60), (1, 64), (2, 67)];
    let motif_set = PointSet::new(
        (0..4)
            .flat_map(|k| motif.iter().map(move |&(o, p)| Point::new(o + 16 * k, p)))
            .collect(),
    );
    let motif_ratio = compression_ratio(&motif_set);
    let fixed_free = PointSet::new(vec![
        Point::new(0, 60),
        Point::new(1, 62),
        Point::new(3, 61),
        Point::new(7, 65),
        Point::new(12, 60),
    ]);
    let fixed_ratio = compression_ratio(&fixed_free);
    check(
        bad_covers == 0
            && cover_is_exact(&motif_set)
            && motif_ratio == Some(2.0)
            && free_wrong == 0
            && fixed_ratio == Some(1.0),
        format!(
            "{bad_covers}/500 bad covers, motif ratio {motif_ratio:?}, \
             {free_wrong}/{} difference-free sets off 1.0",
            free_sets + 1
        ),
    )
}

/// Five-point central difference, step 1e-3.
fn derivative(f: impl Fn(f64) -> f64) -> f64 {
    let h = 1e-3;
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

fn nudge<P: ParamSet>(p: &mut P, t: usize, idx: usize, delta: f64) {
    let mut k = 0;
    p.visit_mut(&mut |_, d| {
        if k == t {
            d[idx] += delta;
        }
        k += 1;
    });
}

fn gradient_check() -> Outcome {
    let v = vocab();
    let config = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::toy(v.len())
    };
    let model = DecoderModel::new(config, 31).unwrap();
    let toy = ToyEncoder::new(ToyEncoderConfig::default(), 32);
    let caption = "A lively piece in G minor, played by flute and cello.";
    let spec = SyntheticCorpusSpec {
        count: 1,
        notes_per_piece: (6, 6),
        seed: 33,
        ..Default::default()
    };
    let piece = midiforge::corpus::generate_piece(&spec, 0);
    let tokens = encode(
        &midiforge::midi::extract_notes(&piece.midi),
        &piece.midi.meta(),
        &v,
    )
    .tokens;
    let used: Vec<usize> = tokens.ids[..tokens.len() - 1]
        .iter()
        .map(|&t| t as usize)
        .collect();
    let batch = vec![Example {
        tokens: tokens.clone(),
        conditioning: Conditioning::Text(caption.into()),
    }];
    let enc = Encoder::Toy(toy.clone());
    let grads = backward_scaled(&model, &enc, true, &batch, 1.0).unwrap();
    let pieces = toy.piece_ids(caption);

    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut tensors = 0;
    let sample = |name: &str, shape: &[usize], rows: &[usize], rng: &mut ChaCha8Rng| {
        if name == "embedding" {
            // rows of absent tokens or pieces have an exactly zero gradient
            rows[rng.random_range(0..rows.len())] * shape[1] + rng.random_range(0..shape[1])
        } else {
            rng.random_range(0..shape.iter().product::<usize>())
        }
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);

    let analytic = grads.decoder.slices();
    for (t, (name, shape)) in model.params.names_and_shapes().iter().enumerate() {
        tensors += 1;
        for _ in 0..20 {
            let idx = sample(name, shape, &used, &mut rng);
            let numeric = derivative(|d| {
                let mut m = model.clone();
                nudge(&mut m.params, t, idx, d);
                backward(&m, &enc, &batch).unwrap().mean_loss()
            });
            worst = worst.max(rel(analytic[t][idx], numeric));
            coords += 1;
        }
    }
    let encoder_grads = grads.encoder.expect("encoder gradients");
    let analytic = encoder_grads.slices();
    for (t, (name, shape)) in toy.params.names_and_shapes().iter().enumerate() {
        tensors += 1;
        for _ in 0..20 {
            let idx = sample(name, shape, &pieces, &mut rng);
            let numeric = derivative(|d| {
                let mut e = toy.clone();
                nudge(&mut e.params, t, idx, d);
                backward(&model, &Encoder::Toy(e), &batch)
                    .unwrap()
                    .mean_loss()
            });
            worst = worst.max(rel(analytic[t][idx], numeric));
            coords += 1;
        }
    }
    check(
        worst < 1e-4,
        format!("{coords} coordinates over {tensors} tensors, worst relative error {worst:.2e}"),
    )
}

fn corpus(
    dir: &std::path::Path,
    spec: &SyntheticCorpusSpec,
    v: &Vocabulary,
) -> Vec<TrainingExample> {
    write_corpus(spec, dir).unwrap();
    load_dataset(&dir.join(MANIFEST_FILE), v, 257).unwrap()
}

fn train_config(
    steps: u64,
    warmup: u64,
    lr: f64,
    batch: usize,
    accumulation: usize,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        model: ModelSection::default(),
        train: TrainSection {
            base_lr: Some(lr),
            warmup_steps: warmup,
            total_steps: steps,
            batch_size: batch,
            accumulation,
            seed,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn training_smoke() -> Outcome {
    let v = vocab();
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(
        dir.path(),
        &SyntheticCorpusSpec {
            count: 50,
            seed: 1,
            ..Default::default()
        },
        &v,
    );
    let mut trainer = Trainer::new(train_config(200, 20, 1e-3, 4, 4, 1), &v).unwrap();
    let initial = trainer.mean_loss(&data).unwrap();
    trainer.run(&data, 200, |_, _| Ok(())).unwrap();
    let last = trainer.mean_loss(&data).unwrap();
    check(
        last < 0.8 * initial,
        format!(
            "corpus loss {initial:.3} -> {last:.3} after 200 steps (ratio {:.3})",
            last / initial
        ),
    )
}

/// Vocabulary tempo values that fall inside evaluation bin `bin`.
fn tempi_in_bin(v: &Vocabulary, bin: usize) -> Vec<f64> {
    (0..v.tempo_bin_count() as u8)
        .map(|b| v.tempo_value(b))
        .filter(|&t| tempo_bin(t) == bin)
        .collect()
}

fn conditioning_fidelity() -> Outcome {
    let v = vocab();
    let bins = [2usize, 4, 6];
    let spec = SyntheticCorpusSpec {
        count: 60,
        notes_per_piece: (8, 16),
        tempo_choices: bins.iter().flat_map(|&b| tempi_in_bin(&v, b)).collect(),
        captions: CaptionPolicy::TempoBin,
        seed: 2,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), &spec, &v);
    let mut trainer = Trainer::new(train_config(2000, 100, 3e-3, 16, 1, 2), &v).unwrap();
    trainer.run(&data, 2000, |_, _| Ok(())).unwrap();

    let mut lines = Vec::new();
    let mut ok = true;
    for &bin in &bins {
        let caption = midiforge::corpus::tempo_bin_caption(tempi_in_bin(&v, bin)[0]);
        let h = trainer.encoder.encode_text(&caption).unwrap();
        let mut hits = 0;
        for seed in 0..50 {
            // the opening Bar, TimeSig, Position, Tempo fit in 12 tokens
            let params = SamplingParams {
                max_tokens: 12,
                seed,
                ..Default::default()
            };
            let out = generate(&trainer.model, &h, &params).unwrap();
            let first_tempo = out.ids.iter().find_map(|&id| match v.token(id) {
                Some(Token::Tempo(b)) => Some(v.tempo_value(b)),
                _ => None,
            });
            hits += usize::from(first_tempo.is_some_and(|t| tempo_bin(t) == bin));
        }
        ok &= hits >= 40;
        lines.push(format!("bin {bin}: {hits}/50"));
    }
    check(ok, lines.join(", "))
}

fn metric_fixtures() -> Outcome {
    let report = evaluate_corpus(&common::fixture_pairs(), &HashMap::new());
    let a = &report.aggregate;
    let got = (a.tb, a.tbt, a.ck, a.ckd);
    let boundaries = [
        (39.999, 0),
        (40.0, 1),
        (59.999, 1),
        (60.0, 2),
        (209.999, 7),
        (210.0, 8),
    ];
    let bins_ok = boundaries.iter().all(|&(bpm, bin)| tempo_bin(bpm) == bin);
    let edge = tempo_bin_metrics(40.0, 39.9);
    check(
        got == common::FIXTURE_AGGREGATES
            && a.files_failed == 0
            && bins_ok
            && !edge.hit
            && edge.tolerant_hit,
        format!(
            "TB/TBT/CK/CKD = {got:?}, expected {:?}; boundaries ok: {bins_ok}",
            common::FIXTURE_AGGREGATES
        ),
    )
}

fn schedule() -> Outcome {
    let v = vocab();
    let config = ModelConfig::toy(v.len());
    let model = DecoderModel::new(config, 0).unwrap();
    let enc = Encoder::Toy(ToyEncoder::new(ToyEncoderConfig { pieces: 8, dim: 64 }, 0));
    let state = TrainState::new(&model, &enc, 1e-4, 20_000, 100_000, 0, false);
    let points = [
        cosine_lr(&state, 0),
        cosine_lr(&state, 20_000),
        cosine_lr(&state, 60_000),
    ];
    check(
        points == [0.0, 1e-4, 1e-4 * 0.5],
        format!("lr at 0 / 20000 / 60000 = {points:?}"),
    )
}

fn sentence_omission() -> Outcome {
    let caption = Caption::new(
        (1..=10)
            .map(|i| format!("This is sentence {i}."))
            .collect::<Vec<_>>()
            .join(" "),
    );
    let calls = 100_000u64;
    let (mut applied, mut out_of_range) = (0u64, 0u64);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..calls {
        let (_, om) = omit_sentences(&caption, mix_seed(&[7, i]));
        if om.applied {
            applied += 1;
            let frac = om.removed as f64 / 10.0;
            lo = lo.min(frac);
            hi = hi.max(frac);
            out_of_range += u64::from(!(0.2..=0.5).contains(&frac));
        }
    }
    let rate = applied as f64 / calls as f64;
    check(
        (rate - 0.5).abs() <= 0.01 && out_of_range == 0,
        format!("omission rate {rate:.4}, removed fraction in [{lo}, {hi}]"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 10] = [
        ("MIDI roundtrip", midi_roundtrip, 10),
        ("tokenizer roundtrip", tokenizer_roundtrip, 30),
        ("SIATEC oracle equivalence", siatec_oracle, 60),
        ("COSIATEC cover and ratios", cosiatec_cover, 60),
        ("gradient check", gradient_check, 120),
        ("training smoke", training_smoke, 300),
        ("conditioning fidelity", conditioning_fidelity, 1200),
        ("metric fixtures", metric_fixtures, 1),
        ("schedule", schedule, 1),
        ("sentence omission", sentence_omission, 10),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, run, budget) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(budget);
        let (pass, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!(
            "{} {name}: {detail} [{:.2} s, budget {budget} s{}]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            if in_time { "" } else { ", over budget" }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
