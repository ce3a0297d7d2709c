//! Subcommand implementations. Each returns its results so that tests can
//! inspect them; on-disk artifacts go to the configured output directory.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dream_core::checkpoint::{Checkpoint, CheckpointMeta};
use dream_core::data::dataset::{base_dir, write_pgm};
use dream_core::data::vocab::{tokenize, MAX_VOCAB};
use dream_core::data::{
    build_vocab, drop_keywords, keyword_ids, read_records, synth, synth_generate, write_records, Record, Sample, Vocab,
};
use dream_core::decoder::DecodeMode;
use dream_core::metrics::{self, ScoreReport};
use dream_core::train::{EpochReport, LossReport, Trainer};
use dream_core::{Components, Dream, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RunConfig, Split};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";

/// Records plus the directory their image references resolve against.
pub struct Dataset {
    pub records: Vec<Record>,
    pub base: PathBuf,
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let (file, n, seed) = match split {
        Split::Train => (&cfg.data.train, cfg.data.train_samples, cfg.data.train_seed),
        Split::Eval => (&cfg.data.eval, cfg.data.eval_samples, cfg.data.eval_seed),
    };
    match file {
        Some(path) => Ok(Dataset {
            records: read_records(path)?,
            base: base_dir(path),
        }),
        None => Ok(Dataset {
            records: synth_generate(n, seed, &cfg.synth).iter().map(Record::from_synth).collect(),
            base: PathBuf::new(),
        }),
    }
}

pub fn to_samples(ds: &Dataset, cfg: &RunConfig, vocab: &Vocab) -> Result<Vec<Sample>> {
    ds.records
        .iter()
        .enumerate()
        .map(|(i, r)| Sample::from_record(r, &ds.base, &cfg.synth, vocab).with_context(|| format!("record {}", i + 1)))
        .collect()
}

/// Dotted path of the first field where two serialisable values differ.
pub fn first_difference<T: Serialize>(a: &T, b: &T) -> Option<(String, String, String)> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, path: String) -> Option<(String, String, String)> {
        use serde_json::Value::Object;
        match (a, b) {
            (Object(x), Object(y)) => {
                for (k, va) in x {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match y.get(k) {
                        Some(vb) => {
                            if let Some(d) = walk(va, vb, p) {
                                return Some(d);
                            }
                        }
                        None => return Some((p, va.to_string(), "missing".into())),
                    }
                }
                y.keys()
                    .find(|k| !x.contains_key(*k))
                    .map(|k| (format!("{path}.{k}"), "missing".into(), y[k].to_string()))
            }
            _ if a != b => Some((path, a.to_string(), b.to_string())),
            _ => None,
        }
    }
    let a = serde_json::to_value(a).ok()?;
    let b = serde_json::to_value(b).ok()?;
    walk(&a, &b, String::new())
}

/// Fails unless the model and image settings of `cfg` describe the
/// checkpoint. A zero vocabulary size in the config matches any.
pub fn check_compatible(cfg: &RunConfig, meta: &CheckpointMeta) -> Result<()> {
    let mut model = cfg.model.clone();
    if model.vocab_size == 0 {
        model.vocab_size = meta.model.vocab_size;
    }
    if let Some((field, ours, theirs)) = first_difference(&model, &meta.model) {
        bail!("checkpoint is incompatible with the config: model.{field} is {ours} in the config but {theirs} in the checkpoint");
    }
    if let Some((field, ours, theirs)) = first_difference(&cfg.synth, &meta.synth) {
        bail!("checkpoint is incompatible with the config: synth.{field} is {ours} in the config but {theirs} in the checkpoint");
    }
    Ok(())
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.paths.out).with_context(|| format!("creating {}", cfg.paths.out.display()))?;
    fs::write(cfg.paths.out.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

fn jsonl_writer(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Optional controls for a training invocation.
#[derive(Clone, Debug, Default)]
pub struct TrainControl {
    /// Continue from this checkpoint instead of a fresh initialisation.
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in this invocation, leaving the schedule
    /// untouched, so a later `resume` continues the same run.
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome {
    pub epochs: Vec<EpochReport>,
    pub steps: Vec<LossReport>,
    pub checkpoint: PathBuf,
    pub trainer: Trainer,
    pub vocab: Vocab,
    /// The effective configuration written next to the checkpoint.
    pub config: RunConfig,
}

pub fn cmd_train(cfg: &RunConfig, ctl: &TrainControl, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = load_split(cfg, Split::Train)?;
    if ds.records.is_empty() {
        bail!("training set is empty");
    }
    let mut effective = cfg.clone();
    let (mut trainer, vocab) = match &ctl.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            check_compatible(cfg, &ck.meta)?;
            if let Some((field, ours, theirs)) = first_difference(&cfg.train, &ck.meta.train) {
                bail!("cannot resume: train.{field} is {ours} in the config but {theirs} in the checkpoint");
            }
            effective.model.vocab_size = ck.meta.model.vocab_size;
            let vocab = ck.meta.vocab.clone();
            (ck.into_trainer()?, vocab)
        }
        None => {
            let vocab = build_vocab(&ds.records, MAX_VOCAB)?;
            if effective.model.vocab_size == 0 {
                effective.model.vocab_size = vocab.len();
            } else if effective.model.vocab_size != vocab.len() {
                bail!(
                    "[model] vocab_size = {} but the training data yields {} tokens; set it to 0 to derive it",
                    effective.model.vocab_size,
                    vocab.len()
                );
            }
            let model = Dream::new(effective.model.clone())?;
            (Trainer::new(model, effective.train.clone())?, vocab)
        }
    };
    let data = to_samples(&ds, &effective, &vocab)?;
    write_config(&effective)?;
    let append = ctl.resume.is_some();
    let mut metrics = jsonl_writer(&effective.paths.out.join(METRICS_FILE), append)?;
    let mut steps_log = jsonl_writer(&effective.paths.out.join(STEPS_FILE), append)?;

    let total_steps = trainer.total_steps(data.len());
    let per_epoch = trainer.batches_per_epoch(data.len());
    let total_epochs = total_steps.div_ceil(per_epoch);
    let every = total_epochs.div_ceil(20).max(1);
    writeln!(
        log,
        "training {} parameters on {} samples: {} steps, {} per epoch",
        trainer.model.param_count(),
        data.len(),
        total_steps,
        per_epoch
    )?;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut pending: Vec<LossReport> = Vec::new();
    let mut flush = |pending: &mut Vec<LossReport>, epochs: &mut Vec<EpochReport>, log: &mut dyn Write| -> Result<()> {
        if let Some(first) = pending.first() {
            let e = EpochReport::from_steps(first.epoch, pending);
            serde_json::to_writer(&mut metrics, &e)?;
            metrics.write_all(b"\n")?;
            if e.epoch.is_multiple_of(every) || e.epoch + 1 == total_epochs {
                writeln!(
                    log,
                    "epoch {:>4}  ce/token {:.4}  align {:.4}  total {:.4}",
                    e.epoch, e.ce_per_token, e.align, e.total
                )?;
            }
            epochs.push(e);
            pending.clear();
        }
        Ok(())
    };
    let mut ran = 0;
    while !trainer.done(data.len()) && ctl.stop_after.is_none_or(|s| ran < s) {
        let r = trainer.step_next(&data)?;
        ran += 1;
        serde_json::to_writer(&mut steps_log, &r)?;
        steps_log.write_all(b"\n")?;
        if pending.first().is_some_and(|p| p.epoch != r.epoch) {
            flush(&mut pending, &mut epochs, log)?;
        }
        pending.push(r.clone());
        steps.push(r);
    }
    flush(&mut pending, &mut epochs, log)?;
    metrics.flush()?;
    steps_log.flush()?;

    let checkpoint = effective.checkpoint_path();
    Checkpoint::from_trainer(&trainer, &vocab, &effective.synth).save(&checkpoint)?;
    writeln!(log, "wrote {}", checkpoint.display())?;
    Ok(TrainOutcome {
        epochs,
        steps,
        checkpoint,
        trainer,
        vocab,
        config: effective,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutcome {
    pub split: Split,
    pub keyword_dropout: f64,
    pub report: ScoreReport,
    pub hypotheses: Vec<String>,
    pub references: Vec<String>,
}

/// Greedy-decodes every sample of `ds` and scores it.
pub fn evaluate(model: &Dream, vocab: &Vocab, ds: &Dataset, cfg: &RunConfig) -> Result<(ScoreReport, Vec<String>, Vec<String>)> {
    if ds.records.is_empty() {
        bail!("evaluation set is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.dropout_seed);
    let mut hyps = Vec::with_capacity(ds.records.len());
    let mut refs = Vec::with_capacity(ds.records.len());
    for (i, r) in ds.records.iter().enumerate() {
        let image = r.image(&ds.base, &cfg.synth).with_context(|| format!("record {}", i + 1))?;
        let kw = drop_keywords(&r.keywords, cfg.eval.keyword_dropout, &mut rng);
        let (ids, _) = keyword_ids(vocab, &kw);
        let out = model.generate(&image, &ids, cfg.eval.max_len, DecodeMode::Greedy)?;
        hyps.push(vocab.content_tokens(&out));
        refs.push(tokenize(&r.report));
    }
    let report = metrics::score(&hyps, &refs)?;
    Ok((report, hyps.iter().map(|h| h.join(" ")).collect(), refs.iter().map(|r| r.join(" ")).collect()))
}

pub fn cmd_eval(cfg: &RunConfig, log: &mut dyn Write) -> Result<EvalOutcome> {
    cfg.validate()?;
    let path = cfg.checkpoint_path();
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    check_compatible(cfg, &ck.meta)?;
    let ds = load_split(cfg, cfg.eval.split)?;
    if ds.records.is_empty() {
        bail!("evaluation set is empty");
    }
    let vocab = ck.meta.vocab.clone();
    let trainer = ck.into_trainer()?;
    let (report, hypotheses, references) = evaluate(&trainer.model, &vocab, &ds, cfg)?;
    let split = match cfg.eval.split {
        Split::Train => "train",
        Split::Eval => "eval",
    };
    fs::create_dir_all(&cfg.paths.out)?;
    let outcome = EvalOutcome {
        split: cfg.eval.split,
        keyword_dropout: cfg.eval.keyword_dropout,
        report,
        hypotheses,
        references,
    };
    fs::write(
        cfg.paths.out.join(format!("scores_{split}.json")),
        serde_json::to_string_pretty(&serde_json::json!({
            "split": split,
            "keyword_dropout": outcome.keyword_dropout,
            "scores": outcome.report,
        }))?,
    )?;
    let mut text = String::new();
    for (h, r) in outcome.hypotheses.iter().zip(&outcome.references) {
        text.push_str(&format!("{h}\t{r}\n"));
    }
    fs::write(cfg.paths.out.join(format!("hypotheses_{split}.tsv")), text)?;
    writeln!(log, "{split} split, {} samples", outcome.hypotheses.len())?;
    writeln!(log, "{}", outcome.report)?;
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageInput {
    /// Render the synthetic image with this sample seed.
    Seed(u64),
    /// Read a greymap file.
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub text: String,
    pub tokens: Vec<usize>,
    pub warnings: Vec<String>,
}

pub fn load_image(input: &ImageInput, cfg: &RunConfig) -> Result<Tensor> {
    match input {
        ImageInput::Seed(s) => Ok(synth::render(*s, &cfg.synth).image),
        ImageInput::File(path) => {
            let rec = Record {
                seed: None,
                image_ref: Some(path.to_string_lossy().into_owned()),
                keywords: String::new(),
                report: String::new(),
            };
            Ok(rec.image(Path::new(""), &cfg.synth)?)
        }
    }
}

pub fn cmd_generate(cfg: &RunConfig, image: &ImageInput, keywords: &str) -> Result<Generated> {
    cfg.validate()?;
    let path = cfg.checkpoint_path();
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    check_compatible(cfg, &ck.meta)?;
    let vocab = ck.meta.vocab.clone();
    let model = ck.into_trainer()?.model;
    let image = load_image(image, cfg)?;
    let mut warnings = Vec::new();
    if keywords.split_whitespace().all(|w| w == "[SEP]") {
        warnings.push("no keywords given; decoding with a lone [SEP] keyword sequence".to_string());
    }
    let (ids, unknown) = keyword_ids(&vocab, keywords);
    for w in unknown {
        warnings.push(format!("unknown keyword `{w}` mapped to <UNK>"));
    }
    let tokens = model.generate(&image, &ids, cfg.eval.max_len, DecodeMode::Greedy)?;
    Ok(Generated {
        text: vocab.decode(&tokens),
        tokens,
        warnings,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub components: Components,
    pub params: usize,
    pub final_ce_per_token: f64,
    pub scores: ScoreReport,
}

/// Trains and evaluates each row of the component grid. Row `i` writes to
/// `<out>/row<i>`.
pub fn cmd_ablate(cfg: &RunConfig, grid: &[Components], log: &mut dyn Write) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let eval_ds = load_split(cfg, cfg.eval.split)?;
    if eval_ds.records.is_empty() {
        bail!("evaluation set is empty");
    }
    fs::create_dir_all(&cfg.paths.out)?;
    let mut rows = Vec::new();
    let mut out = jsonl_writer(&cfg.paths.out.join("ablation.jsonl"), false)?;
    for (i, &components) in grid.iter().enumerate() {
        let mut c = cfg.clone();
        c.model.components = components;
        c.paths.out = cfg.paths.out.join(format!("row{i}"));
        c.paths.checkpoint = None;
        writeln!(log, "== {}", components.label())?;
        let t = cmd_train(&c, &TrainControl::default(), log)?;
        let (scores, _, _) = evaluate(&t.trainer.model, &t.vocab, &eval_ds, &t.config)?;
        let row = AblationRow {
            label: components.label(),
            components,
            params: t.trainer.model.param_count(),
            final_ce_per_token: t.epochs.last().map_or(f64::NAN, |e| e.ce_per_token),
            scores,
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
        rows.push(row);
    }
    out.flush()?;
    writeln!(log, "{:<22} {:>8} {:>8} {:>8} {:>8} {:>8}", "row", "params", "BLEU-1", "BLEU-4", "ROUGE-L", "CIDEr")?;
    for r in &rows {
        writeln!(
            log,
            "{:<22} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            r.label, r.params, r.scores.bleu1, r.scores.bleu4, r.scores.rouge_l, r.scores.cider
        )?;
    }
    Ok(rows)
}

pub struct SynthOutput {
    pub train: PathBuf,
    pub eval: PathBuf,
}

/// Writes synthetic train and eval splits as dataset files. With `images`,
/// each image is also written as a greymap and referenced by path.
pub fn cmd_synth(cfg: &RunConfig, images: bool) -> Result<SynthOutput> {
    cfg.validate()?;
    if cfg.synth.channels != 1 && images {
        bail!("greymap export needs [synth] channels = 1");
    }
    let out = &cfg.paths.out;
    fs::create_dir_all(out)?;
    let mut paths = Vec::new();
    for (name, n, seed) in [
        ("train", cfg.data.train_samples, cfg.data.train_seed),
        ("eval", cfg.data.eval_samples, cfg.data.eval_seed),
    ] {
        let samples = synth_generate(n, seed, &cfg.synth);
        let mut records: Vec<Record> = samples.iter().map(Record::from_synth).collect();
        if images {
            fs::create_dir_all(out.join("images"))?;
            for (i, (s, r)) in samples.iter().zip(records.iter_mut()).enumerate() {
                let rel = format!("images/{name}_{i:04}.pgm");
                write_pgm(&out.join(&rel), &s.image)?;
                r.seed = None;
                r.image_ref = Some(rel);
            }
        }
        let path = out.join(format!("{name}.jsonl"));
        write_records(&path, &records)?;
        paths.push(path);
    }
    let eval = paths.pop().expect("two splits");
    let train = paths.pop().expect("two splits");
    Ok(SynthOutput { train, eval })
}
