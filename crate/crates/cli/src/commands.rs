use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use nl2code::corpus::{self, carve_dev, plan_folds, select, DatasetSplit, Example, LoadSummary, Source};
use nl2code::decode;
use nl2code::eval::{self, aggregate_folds, evaluate, EvalReport, Generator, GreedyGenerator};
use nl2code::synth;
use nl2code::tokenizer::Vocabulary;
use nl2code::training::{write_history_csv, Checkpoint, Interleave, TrainConfig, Trainer, TrainingData};
use nl2code::Transformer32;
use serde_json::json;

use crate::config::RunConfig;
use crate::{CvArgs, DataArgs, DecodeFlags, EvalArgs, GenerateArgs, SynthArgs, TokenizerArgs, TrainArgs, TrainFlags, UsageError};

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

fn resolve(data: &DataArgs, train: Option<&TrainFlags>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(data.config.as_deref())?;
    let paths = [
        (&data.gold, &mut cfg.data.gold),
        (&data.noisy, &mut cfg.data.noisy),
        (&data.nl2lf, &mut cfg.data.nl2lf),
        (&data.vocab, &mut cfg.data.vocab),
        (&data.out, &mut cfg.data.out),
    ];
    for (flag, slot) in paths {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(seed) = data.seed {
        cfg.train.seed = seed;
    }
    if let Some(t) = train {
        if let Some(lr) = t.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(b) = t.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(len) = t.max_len {
            cfg.train.max_src_len = len;
            cfg.train.max_tgt_len = len;
        }
        if let Some(e) = t.epochs {
            cfg.train.max_epochs = e;
        }
        if let Some(ratio) = &t.interleave {
            cfg.train.interleave = ratio.parse().map_err(|e| usage(format!("--interleave: {e}")))?;
        }
    }
    Ok(cfg)
}

fn apply_decode(cfg: &mut RunConfig, flags: &DecodeFlags) {
    if let Some(k) = flags.beam_size {
        cfg.decode.beam_size = k;
    }
    if let Some(a) = flags.length_alpha {
        cfg.decode.length_alpha = a;
    }
}

fn missing(path: &Path) -> anyhow::Error {
    anyhow::Error::new(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{}: no such file", path.display())))
}

/// Fail before any compute if a referenced input is absent.
fn check_inputs(cfg: &RunConfig) -> Result<()> {
    for path in [&cfg.data.gold, &cfg.data.noisy, &cfg.data.nl2lf, &cfg.data.vocab].into_iter().flatten() {
        if !path.is_file() {
            return Err(missing(path));
        }
    }
    Ok(())
}

#[derive(Default)]
struct Datasets {
    gold: Option<Vec<Example>>,
    noisy: Option<Vec<Example>>,
    nl2lf: Option<Vec<Example>>,
    summaries: Vec<LoadSummary>,
}

fn load_noisy(path: &Path, cfg: &RunConfig) -> Result<(Vec<Example>, LoadSummary)> {
    let mut stream = corpus::load_noisy(path, cfg.data.min_weight)?;
    let examples: Vec<Example> = match cfg.data.noisy_limit {
        Some(n) => stream.by_ref().take(n).collect(),
        None => stream.by_ref().collect(),
    };
    Ok((examples, stream.summary().clone()))
}

fn load_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let mut ds = Datasets::default();
    if let Some(path) = &cfg.data.gold {
        let examples = corpus::load_gold(path)?;
        ds.summaries.push(corpus::summarize(&examples, Source::Gold, path));
        ds.gold = Some(examples);
    }
    if let Some(path) = &cfg.data.noisy {
        let (examples, summary) = load_noisy(path, cfg)?;
        ds.summaries.push(summary);
        ds.noisy = Some(examples);
    }
    if let Some(path) = &cfg.data.nl2lf {
        let examples = corpus::load_nl2lf(path)?;
        ds.summaries.push(corpus::summarize(&examples, Source::Nl2lf, path));
        ds.nl2lf = Some(examples);
    }
    Ok(ds)
}

fn print_summary(s: &LoadSummary) {
    println!("{:<6} {}: {} loaded, {} skipped, {} filtered", s.source, s.path, s.loaded, s.skipped, s.filtered);
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn write_history(path: &Path, trainer: &Trainer<'_, f32>) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    write_history_csv(&trainer.history, file)?;
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    report.write_json(&dir.join("report.json"))?;
    let file = fs::File::create(dir.join("per_example.csv"))?;
    report.write_csv(file)?;
    Ok(())
}

pub fn data_validate(args: &DataArgs) -> Result<()> {
    let cfg = resolve(args, None)?;
    let files: Vec<(Source, &PathBuf)> = [
        (Source::Gold, &cfg.data.gold),
        (Source::Noisy, &cfg.data.noisy),
        (Source::Nl2lf, &cfg.data.nl2lf),
    ]
    .into_iter()
    .filter_map(|(s, p)| p.as_ref().map(|p| (s, p)))
    .collect();
    if files.is_empty() {
        return Err(usage("nothing to validate: pass --gold, --noisy and/or --nl2lf"));
    }
    let mut summaries = Vec::new();
    let mut first_error = None;
    let mut failures = 0;
    for (source, path) in files {
        let loaded = match source {
            Source::Gold => corpus::load_gold(path).map(|e| corpus::summarize(&e, source, path)).map_err(anyhow::Error::from),
            Source::Nl2lf => corpus::load_nl2lf(path).map(|e| corpus::summarize(&e, source, path)).map_err(anyhow::Error::from),
            Source::Noisy => load_noisy(path, &cfg).map(|(_, s)| s),
        };
        match loaded {
            Ok(summary) => {
                print_summary(&summary);
                summaries.push(summary);
            }
            Err(e) => {
                println!("{:<6} {}: FAILED: {e:#}", source.as_str(), path.display());
                failures += 1;
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(out) = &cfg.data.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("data_summary.json"), &summaries)?;
    }
    match first_error {
        Some(e) => Err(e.context(format!("{failures} dataset(s) failed to load"))),
        None => Ok(()),
    }
}

fn text_corpus(sets: &[&[Example]]) -> Vec<String> {
    sets.iter().flat_map(|s| s.iter()).flat_map(|e| [e.intent.clone(), e.snippet.clone()]).collect()
}

pub fn tokenizer_train(args: &TokenizerArgs) -> Result<()> {
    let mut cfg = resolve(&args.data, None)?;
    if let Some(n) = args.vocab_size {
        cfg.tokenizer.vocab_size = n;
    }
    let target = match (&args.data.vocab, &cfg.data.out) {
        (Some(v), _) => v.clone(),
        (None, Some(out)) => out.join("vocab.json"),
        (None, None) => return Err(usage("pass --vocab (output file) or --out")),
    };
    // the vocabulary path is an output here
    cfg.data.vocab = None;
    check_inputs(&cfg)?;
    let ds = load_datasets(&cfg)?;
    let sets: Vec<&[Example]> = [&ds.gold, &ds.noisy, &ds.nl2lf].into_iter().flatten().map(Vec::as_slice).collect();
    if sets.is_empty() {
        return Err(usage("no training text: pass --gold, --noisy and/or --nl2lf"));
    }
    let vocab = Vocabulary::train(&text_corpus(&sets), cfg.tokenizer.vocab_size)?;
    if let Some(dir) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    vocab.save(&target)?;
    cfg.data.vocab = Some(target.clone());
    if let Some(out) = &cfg.data.out {
        cfg.echo(out)?;
    }
    println!("vocabulary: {} pieces, sha256 {} -> {}", vocab.len(), vocab.content_hash(), target.display());
    Ok(())
}

/// Load the configured vocabulary, or train one on `sets` and store it in
/// `dir`.
fn obtain_vocab(cfg: &mut RunConfig, sets: &[&[Example]], dir: &Path, reuse: bool) -> Result<Vocabulary> {
    if let Some(path) = &cfg.data.vocab {
        return Ok(Vocabulary::load(path)?);
    }
    let path = dir.join("vocab.json");
    let vocab = if reuse && path.is_file() {
        Vocabulary::load(&path)?
    } else {
        let vocab = Vocabulary::train(&text_corpus(sets), cfg.tokenizer.vocab_size)?;
        vocab.save(&path)?;
        vocab
    };
    cfg.data.vocab = Some(path);
    Ok(vocab)
}

/// Train to completion, saving the checkpoint after every dev evaluation.
fn fit(trainer: &mut Trainer<'_, f32>, dir: &Path) -> Result<()> {
    let ckpt = dir.join("last.ckpt");
    let outcome = trainer.run(None, |t| {
        let row = t.history.last().expect("evaluated after a step");
        eprintln!(
            "step {:>6}  epoch {:>3}  loss {:.4}  dev BLEU {:.2}",
            row.step,
            row.epoch,
            row.train_loss,
            row.dev_bleu.unwrap_or(f64::NAN)
        );
        t.save_checkpoint(&ckpt)?;
        Ok(())
    });
    // keep whatever progress was made, even on a numerical fault
    trainer.save_checkpoint(&ckpt)?;
    write_history(&dir.join("history.csv"), trainer)?;
    let outcome = outcome?;
    let (gold, noisy) = trainer.history.last().map_or((0, 0), |r| (r.gold_batches, r.noisy_batches));
    write_json(
        &dir.join("metrics.json"),
        &json!({
            "stop": outcome.stop,
            "steps": outcome.steps,
            "best_dev_bleu": outcome.best_dev_bleu,
            "gold_batches": gold,
            "noisy_batches": noisy,
        }),
    )?;
    println!(
        "stopped ({:?}) after {} steps; best dev BLEU {:.2}",
        outcome.stop,
        outcome.steps,
        outcome.best_dev_bleu.unwrap_or(0.0)
    );
    Ok(())
}

/// An empty dev split selects on the training set itself.
fn dev_or_train(all: &[Example], split: &DatasetSplit, train: &[Example]) -> Result<Vec<Example>> {
    if split.dev.is_empty() {
        return Ok(train.to_vec());
    }
    Ok(select(all, &split.dev)?)
}

fn check_regime(cfg: &TrainConfig, noisy: &[Example]) -> Result<()> {
    if cfg.interleave.noisy > 0 && noisy.is_empty() {
        return Err(usage(format!("interleave ratio {} needs mined pairs: pass --noisy or use 1:0", cfg.interleave)));
    }
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(&args.data, Some(&args.train))?;
    check_inputs(&cfg)?;
    let out = cfg.out_dir()?.to_path_buf();
    let ckpt_path = out.join("last.ckpt");
    if args.resume && !ckpt_path.is_file() {
        return Err(missing(&ckpt_path));
    }
    let ds = load_datasets(&cfg)?;
    ds.summaries.iter().for_each(print_summary);
    let primary = ds.gold.or(ds.nl2lf).ok_or_else(|| usage("train needs --gold or --nl2lf"))?;
    let noisy = ds.noisy.unwrap_or_default();
    check_regime(&cfg.train, &noisy)?;
    let split = carve_dev(&primary, cfg.dev_size(primary.len()), cfg.train.seed)?;
    let train_set = select(&primary, &split.train)?;
    let dev = dev_or_train(&primary, &split, &train_set)?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let vocab = obtain_vocab(&mut cfg, &[&train_set, &noisy], &out, args.resume)?;
    cfg.echo(&out)?;
    write_json(&out.join("split.json"), &split)?;

    let data = TrainingData { gold: &train_set, noisy: &noisy, dev: &dev };
    let mut trainer = if args.resume {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let mut trainer = Trainer::resume(&ckpt, &vocab, data)?;
        // the epoch budget may be extended; everything else comes from the checkpoint
        trainer.config.max_epochs = cfg.train.max_epochs;
        if (TrainConfig { max_epochs: cfg.train.max_epochs, ..ckpt.train_config.clone() }) != cfg.train {
            eprintln!("note: resuming with the training settings stored in {}", ckpt_path.display());
        }
        trainer
    } else {
        let model = Transformer32::new(cfg.model.with_vocab(vocab.len()), cfg.train.seed)?;
        Trainer::new(model, &vocab, data, cfg.train.clone())?
    };
    println!(
        "training on {} gold / {} noisy pairs, dev {}, ratio {}, {} steps planned",
        train_set.len(),
        noisy.len(),
        dev.len(),
        trainer.config.interleave,
        trainer.total_steps()
    );
    fit(&mut trainer, &out)
}

struct BeamGenerator<'a> {
    model: &'a Transformer32,
    vocab: &'a Vocabulary,
    max_src_len: usize,
    max_len: usize,
    beam_size: usize,
    alpha: f64,
}

impl Generator for BeamGenerator<'_> {
    fn generate(&mut self, intents: &[&str]) -> eval::Result<Vec<String>> {
        intents
            .iter()
            .map(|text| {
                let source = self.vocab.encode(text, self.max_src_len, true)?.ids;
                let hyps = decode::beam(self.model, &source, self.beam_size, self.max_len, self.alpha)?;
                Ok(self.vocab.decode(hyps.first().map_or(&[][..], |h| h.content()))?)
            })
            .collect()
    }
}

fn make_generator<'a>(
    model: &'a Transformer32,
    vocab: &'a Vocabulary,
    train: &TrainConfig,
    cfg: &RunConfig,
    max_len: Option<usize>,
) -> Result<Box<dyn Generator + 'a>> {
    let max_len = max_len.or(cfg.decode.max_len).unwrap_or(train.max_tgt_len);
    Ok(match cfg.decode.beam_size {
        0 => return Err(usage("beam size must be at least 1")),
        1 => Box::new(GreedyGenerator { model, vocab, max_src_len: train.max_src_len, max_len, batch_size: train.eval_batch_size }),
        k => Box::new(BeamGenerator { model, vocab, max_src_len: train.max_src_len, max_len, beam_size: k, alpha: cfg.decode.length_alpha }),
    })
}

fn load_model(checkpoint: &Path, vocab_path: &Path) -> Result<(Checkpoint, Vocabulary, Transformer32)> {
    for path in [checkpoint, vocab_path] {
        if !path.is_file() {
            return Err(missing(path));
        }
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let vocab = Vocabulary::load(vocab_path)?;
    ckpt.check_vocabulary(&vocab)?;
    let model = ckpt.best_model()?;
    Ok((ckpt, vocab, model))
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = resolve(&args.data, None)?;
    // reported metrics use greedy decoding unless a beam is requested
    cfg.decode.beam_size = 1;
    apply_decode(&mut cfg, &args.decode);
    check_inputs(&cfg)?;
    let vocab_path = cfg.data.vocab.clone().ok_or_else(|| usage("eval needs --vocab"))?;
    let (ckpt, vocab, model) = load_model(&args.checkpoint, &vocab_path)?;
    let ds = load_datasets(&cfg)?;
    let examples = match (ds.gold, ds.nl2lf) {
        (Some(e), None) | (None, Some(e)) => e,
        _ => return Err(usage("eval needs exactly one of --gold or --nl2lf")),
    };
    let mut generator = make_generator(&model, &vocab, &ckpt.train_config, &cfg, args.max_len)?;
    let report = evaluate(generator.as_mut(), &examples)?;
    let recomputed = report.recomputed_bleu();
    if (recomputed - report.bleu).abs() > 1e-9 {
        return Err(anyhow!("report BLEU {} disagrees with its per-example statistics ({recomputed})", report.bleu));
    }
    if let Some(out) = &cfg.data.out {
        cfg.echo(out)?;
        write_report(out, &report)?;
    }
    println!("BLEU {:.2}  accuracy {:.2}%  ({} examples)", report.bleu, report.accuracy, report.n_examples);
    Ok(())
}

/// One output line per snippet: backslashes and newlines are escaped.
fn one_line(snippet: &str) -> String {
    snippet.replace('\\', "\\\\").replace('\n', "\\n")
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    apply_decode(&mut cfg, &args.decode);
    let (ckpt, vocab, model) = load_model(&args.checkpoint, &args.vocab)?;
    let intents: Vec<String> = match &args.input {
        Some(path) => {
            let file = fs::File::open(path).map_err(|_| missing(path))?;
            BufReader::new(file).lines().collect::<std::io::Result<_>>()?
        }
        None if !args.intent.is_empty() => args.intent.clone(),
        None => return Err(usage("pass --intent TEXT or --input FILE")),
    };
    let refs: Vec<&str> = intents.iter().map(String::as_str).collect();
    let mut generator = make_generator(&model, &vocab, &ckpt.train_config, &cfg, args.max_len)?;
    let snippets = generator.generate(&refs)?;
    let mut sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(fs::File::create(path).with_context(|| format!("cannot write {}", path.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    for s in &snippets {
        writeln!(sink, "{}", one_line(s))?;
    }
    sink.flush()?;
    Ok(())
}

pub fn cv(args: &CvArgs) -> Result<()> {
    let mut cfg = resolve(&args.data, Some(&args.train))?;
    if let Some(k) = args.folds {
        cfg.cv.folds = k;
    }
    if let Some(f) = args.train_fraction {
        cfg.cv.train_fraction = f;
    }
    check_inputs(&cfg)?;
    let out = cfg.out_dir()?.to_path_buf();
    let ds = load_datasets(&cfg)?;
    ds.summaries.iter().for_each(print_summary);
    // folds are drawn from the labeling-function pairs when given; any other
    // dataset becomes the auxiliary stream
    let (primary, auxiliary): (Vec<Example>, Vec<Example>) = match ds.nl2lf {
        Some(lf) => (lf, ds.gold.into_iter().chain(ds.noisy).flatten().collect()),
        None => (ds.gold.ok_or_else(|| usage("cv needs --nl2lf or --gold"))?, ds.noisy.unwrap_or_default()),
    };
    if auxiliary.is_empty() && cfg.train.interleave.noisy > 0 {
        cfg.train.interleave = Interleave::GOLD_ONLY;
    }
    let plan = plan_folds(&primary, cfg.cv.folds, cfg.cv.train_fraction, cfg.train.seed)?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    cfg.echo(&out)?;
    write_json(&out.join("folds.json"), &plan)?;

    let mut reports = Vec::with_capacity(plan.folds.len());
    for (i, fold) in plan.folds.iter().enumerate() {
        let dir = out.join(format!("fold_{i}"));
        fs::create_dir_all(&dir)?;
        let train_all = select(&primary, &fold.train)?;
        let test = select(&primary, &fold.test)?;
        let split = carve_dev(&train_all, cfg.dev_size(train_all.len()), cfg.train.seed.wrapping_add(i as u64))?;
        let train_set = select(&train_all, &split.train)?;
        let dev = dev_or_train(&train_all, &split, &train_set)?;
        let mut fold_cfg = cfg.clone();
        let vocab = obtain_vocab(&mut fold_cfg, &[&train_set, &auxiliary], &dir, false)?;
        let model = Transformer32::new(cfg.model.with_vocab(vocab.len()), cfg.train.seed)?;
        let data = TrainingData { gold: &train_set, noisy: &auxiliary, dev: &dev };
        let mut trainer = Trainer::new(model, &vocab, data, cfg.train.clone())?;
        println!("fold {i}: {} train / {} dev / {} test", train_set.len(), dev.len(), test.len());
        fit(&mut trainer, &dir)?;
        let best = trainer.best_model();
        let mut generator = GreedyGenerator {
            model: &best,
            vocab: &vocab,
            max_src_len: cfg.train.max_src_len,
            max_len: cfg.decode.max_len.unwrap_or(cfg.train.max_tgt_len),
            batch_size: cfg.train.eval_batch_size,
        };
        let mut report = evaluate(&mut generator, &test)?;
        report.fold_id = Some(i);
        write_report(&dir, &report)?;
        println!("fold {i}: BLEU {:.2}  accuracy {:.2}%", report.bleu, report.accuracy);
        reports.push(report);
    }
    let summary = aggregate_folds(&reports)?;
    write_json(&out.join("aggregate.json"), &summary)?;
    let mut table = csv::Writer::from_path(out.join("folds.csv"))?;
    table.write_record(["fold", "bleu", "accuracy", "n_examples"])?;
    for f in &summary.folds {
        table.write_record([f.fold.to_string(), f.bleu.to_string(), f.accuracy.to_string(), f.n_examples.to_string()])?;
    }
    table.flush()?;
    println!("mean over {} folds: BLEU {:.2}  accuracy {:.2}%", summary.folds.len(), summary.mean_bleu, summary.mean_accuracy);
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    let files = [
        ("gold.json", synth::conala_gold(args.gold_size, args.seed), Source::Gold),
        ("gold_test.json", synth::conala_gold(args.gold_size / 5, args.seed.wrapping_add(1)), Source::Gold),
        ("noisy.jsonl", synth::conala_noisy(args.noisy_size, args.seed), Source::Noisy),
        ("nl2lf.jsonl", synth::nl2lf(synth::NL2LF_SIZE, args.seed), Source::Nl2lf),
    ];
    for (name, examples, source) in files {
        let path = args.out.join(name);
        corpus::write_examples(&path, &examples, source).with_context(|| format!("cannot write {}", path.display()))?;
        println!("{}: {} pairs", path.display(), examples.len());
    }
    Ok(())
}
