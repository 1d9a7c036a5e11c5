use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use protestlens_core::corpus::{self, build_corpus, read_jsonl, write_corpus, CorpusOptions, CorpusRow, SplitRatios};
use protestlens_core::parallel::Execution;
use protestlens_core::text::{TextClassifier, TextExample, TextLabel, TextModelConfig, TokenSequence, Vocabulary};
use protestlens_core::trainer::{self, evaluate, load_model, Checkpoint, Classifier, EvalReport, LoadedModel, Schedule, TrainConfig, TrainOutcome};
use protestlens_core::vision::image::{load_examples, load_for_model};
use protestlens_core::vision::{VisionClassifier, VisionModelConfig};
use protestlens_core::{Error, Result, TOOL_VERSION};
use serde::Serialize;
use serde_json::json;

use crate::args::*;

fn write_manifest(path: &Path, value: &serde_json::Value) -> Result<()> {
    trainer::write_json(path, value)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

pub fn build_corpus_cmd(a: &BuildCorpusArgs) -> Result<()> {
    let events = corpus::read_events(&a.events)?;
    let articles = corpus::read_articles(&a.articles)?;
    let archive = match &a.archive {
        Some(p) => corpus::read_articles(p)?,
        None => articles.clone(),
    };
    let options = CorpusOptions {
        fuzzy_threshold: a.fuzzy_threshold,
        negatives: a.negatives,
        seed: a.seed,
        ratios: SplitRatios { train: a.ratios[0], val: a.ratios[1], test: a.ratios[2] },
        vocab_size: a.vocab_size,
    };
    let build = build_corpus(&events, &articles, &archive, &options)?;
    write_corpus(&build, &a.out)?;
    let c = &build.manifest.counts;
    log::info!("{} matches ({} exact, {} fuzzy), {} dropped", c.matches, c.exact_matches, c.fuzzy_matches, c.dropped);
    println!("positives {} negatives {} train {} val {} test {}", c.positives, c.negatives, c.train, c.val, c.test);
    Ok(())
}

pub fn build_vocab_cmd(a: &BuildVocabArgs) -> Result<()> {
    let rows: Vec<CorpusRow> = read_jsonl(&a.corpus)?;
    let vocab = corpus::build_vocab(&rows, a.size)?;
    vocab.save(&a.out)?;
    let manifest = json!({
        "tool_version": TOOL_VERSION,
        "command": "build-vocab",
        "args": a,
        "documents": rows.len(),
        "tokens": vocab.len(),
    });
    write_manifest(a.manifest.as_deref().unwrap_or(&sidecar(&a.out)), &manifest)?;
    println!("{} tokens", vocab.len());
    Ok(())
}

fn train_config(f: &TrainFlags) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: f.epochs.unwrap_or(d.epochs),
        batch_size: f.batch_size.unwrap_or(d.batch_size),
        lr: f.lr.unwrap_or(d.lr),
        weight_decay: f.weight_decay.unwrap_or(d.weight_decay),
        schedule: match f.schedule {
            Some(ScheduleArg::Constant) => Schedule::Constant,
            Some(ScheduleArg::WarmupLinear) => Schedule::WarmupLinear,
            None => d.schedule,
        },
        seed: f.seed,
        patience: f.patience.unwrap_or(d.patience),
        class_weights: f.class_weights.as_ref().map(|w| [w[0], w[1]]),
        eval_every: f.eval_every.unwrap_or(d.eval_every),
        threshold: f.threshold.unwrap_or(d.threshold),
        execution: if f.sequential { Execution::Sequential } else { Execution::Parallel },
    }
}

fn text_examples(rows: &[CorpusRow], vocab: &Vocabulary, config: &TextModelConfig) -> Result<Vec<TextExample>> {
    rows.iter()
        .map(|r| {
            Ok(TextExample {
                id: r.id.clone(),
                seq: TokenSequence::encode(&r.text, vocab, config),
                label: TextLabel::from_class(r.label)?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct OutcomeSummary {
    steps: usize,
    best_step: Option<usize>,
    stopped_early: bool,
    best_val_accuracy: Option<f64>,
}

impl From<&TrainOutcome> for OutcomeSummary {
    fn from(o: &TrainOutcome) -> Self {
        OutcomeSummary { steps: o.steps, best_step: o.best_step, stopped_early: o.stopped_early, best_val_accuracy: o.best_val.as_ref().map(|r| r.accuracy) }
    }
}

/// Writes checkpoint, history, report and run manifest into `out`.
fn finish_training<C: Classifier>(
    model: &C,
    mut checkpoint: Checkpoint,
    outcome: &TrainOutcome,
    report: Option<(&str, EvalReport)>,
    out: &Path,
    manifest: serde_json::Value,
) -> Result<()> {
    trainer::write_history(&out.join("history.csv"), &outcome.history)?;
    let report_json = report.as_ref().map(|(split, r)| json!({ "split": split, "report": r }));
    checkpoint.header.metrics = json!({
        "best_step": outcome.best_step,
        "best_val_accuracy": outcome.best_val.as_ref().map(|r| r.accuracy),
        "report": report_json,
    });
    checkpoint.save(&out.join("model.plck"))?;
    if let Some(r) = &report_json {
        trainer::write_json(&out.join("report.json"), r)?;
    }
    let mut manifest = manifest;
    manifest["outcome"] = serde_json::to_value(OutcomeSummary::from(outcome))?;
    manifest["parameters"] = json!(model.params().numel());
    write_manifest(&out.join("manifest.json"), &manifest)?;
    if let Some((split, r)) = report {
        println!("{split} accuracy {:.4} f1 {:.4} ({} examples)", r.accuracy, r.f1, r.n_examples);
    }
    Ok(())
}

pub fn train_text_cmd(a: &TrainTextArgs) -> Result<()> {
    let cfg = train_config(&a.train_flags);
    cfg.validate()?;
    create_dir(&a.out)?;
    let train_rows: Vec<CorpusRow> = read_jsonl(&a.train)?;
    let val_rows: Vec<CorpusRow> = a.val.as_deref().map(read_jsonl).transpose()?.unwrap_or_default();
    let test_rows: Vec<CorpusRow> = a.test.as_deref().map(read_jsonl).transpose()?.unwrap_or_default();
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => {
            let v = corpus::build_vocab(&train_rows, a.vocab_size)?;
            v.save(&a.out.join("vocab.txt"))?;
            v
        }
    };
    let mut model_config: TextModelConfig = match &a.model_config {
        Some(p) => read_json_file(p)?,
        None => TextModelConfig::default(),
    };
    if model_config.vocab_size != vocab.len() {
        log::warn!("model config vocab_size {} resolved to vocabulary length {}", model_config.vocab_size, vocab.len());
        model_config.vocab_size = vocab.len();
    }
    model_config.validate()?;
    let (train_set, val_set, test_set) = (
        text_examples(&train_rows, &vocab, &model_config)?,
        text_examples(&val_rows, &vocab, &model_config)?,
        text_examples(&test_rows, &vocab, &model_config)?,
    );
    let mut model = TextClassifier::new(model_config.clone(), cfg.seed)?;
    let outcome = trainer::train(&mut model, &train_set, &val_set, &cfg)?;
    let report = match (test_set.is_empty(), val_set.is_empty()) {
        (false, _) => Some(("test", evaluate(&model, &test_set, cfg.threshold, cfg.execution)?)),
        (true, false) => Some(("val", evaluate(&model, &val_set, cfg.threshold, cfg.execution)?)),
        _ => None,
    };
    let mut checkpoint = model.checkpoint();
    checkpoint.header.vocabulary = Some(vocab.tokens().to_vec());
    let manifest = json!({
        "tool_version": TOOL_VERSION,
        "command": "train-text",
        "args": a,
        "model_config": model_config,
        "train_config": cfg,
        "vocabulary_size": vocab.len(),
        "examples": { "train": train_set.len(), "val": val_set.len(), "test": test_set.len() },
    });
    finish_training(&model, checkpoint, &outcome, report, &a.out, manifest)
}

pub fn train_image_cmd(a: &TrainImageArgs) -> Result<()> {
    let cfg = train_config(&a.train_flags);
    cfg.validate()?;
    create_dir(&a.out)?;
    let model_config: VisionModelConfig = match &a.model_config {
        Some(p) => read_json_file(p)?,
        None => VisionModelConfig::default(),
    };
    model_config.validate()?;
    let heads = &model_config.attribute_heads;
    let load = |p: &Option<PathBuf>| -> Result<_> {
        p.as_deref().map(|p| load_examples(p, heads, model_config.image_size, cfg.execution)).transpose().map(Option::unwrap_or_default)
    };
    let train_set = load(&Some(a.train.clone()))?;
    let (val_set, test_set) = (load(&a.val)?, load(&a.test)?);
    let mut model = VisionClassifier::new(model_config.clone(), cfg.seed)?;
    let outcome = trainer::train(&mut model, &train_set, &val_set, &cfg)?;
    let report = match (test_set.is_empty(), val_set.is_empty()) {
        (false, _) => Some(("test", evaluate(&model, &test_set, cfg.threshold, cfg.execution)?)),
        (true, false) => Some(("val", evaluate(&model, &val_set, cfg.threshold, cfg.execution)?)),
        _ => None,
    };
    let manifest = json!({
        "tool_version": TOOL_VERSION,
        "command": "train-image",
        "args": a,
        "model_config": model_config,
        "train_config": cfg,
        "examples": { "train": train_set.len(), "val": val_set.len(), "test": test_set.len() },
    });
    finish_training(&model, model.checkpoint(), &outcome, report, &a.out, manifest)
}

fn resolve_vocab(embedded: Option<Vocabulary>, flag: Option<&Path>) -> Result<Vocabulary> {
    match (flag, embedded) {
        (Some(p), _) => Vocabulary::load(p),
        (None, Some(v)) => Ok(v),
        (None, None) => Err(Error::Config("checkpoint has no embedded vocabulary; pass --vocab".into())),
    }
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (model, header) = load_model(&a.checkpoint)?;
    let exec = Execution::Parallel;
    let report = match model {
        LoadedModel::Text { model, vocab } => {
            let vocab = resolve_vocab(vocab, a.vocab.as_deref())?;
            let rows: Vec<CorpusRow> = read_jsonl(&a.data)?;
            evaluate(&model, &text_examples(&rows, &vocab, model.config())?, a.threshold, exec)?
        }
        LoadedModel::Vision(model) => {
            let c = model.config();
            let examples = load_examples(&a.data, &c.attribute_heads, c.image_size, exec)?;
            evaluate(&model, &examples, a.threshold, exec)?
        }
    };
    match &a.out {
        Some(out) => {
            trainer::write_json(out, &report)?;
            let manifest = json!({ "tool_version": TOOL_VERSION, "command": "eval", "args": a, "model_kind": header.model_kind });
            write_manifest(a.manifest.as_deref().unwrap_or(&sidecar(out)), &manifest)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn read_lines(input: &Path) -> Result<Vec<String>> {
    let mut text = String::new();
    if input == Path::new("-") {
        io::stdin().read_to_string(&mut text).map_err(|e| Error::Io { path: "<stdin>".into(), source: e })?;
        Ok(text.lines().map(str::to_owned).collect())
    } else {
        let f = fs::File::open(input).map_err(|e| Error::Io { path: input.into(), source: e })?;
        BufReader::new(f).lines().collect::<io::Result<_>>().map_err(|e| Error::Io { path: input.into(), source: e })
    }
}

fn emit(a: &InferArgs, kind: &str, rows: &[serde_json::Value]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    match &a.output {
        Some(p) => fs::write(p, &buf).map_err(|e| Error::Io { path: p.clone(), source: e })?,
        None => io::stdout().write_all(&buf).map_err(|e| Error::Io { path: "<stdout>".into(), source: e })?,
    }
    let manifest_path = a.manifest.clone().or_else(|| a.output.as_deref().map(sidecar));
    if let Some(p) = manifest_path {
        let manifest = json!({ "tool_version": TOOL_VERSION, "command": kind, "args": a, "records": rows.len() });
        write_manifest(&p, &manifest)?;
    }
    Ok(())
}

pub fn infer_text_cmd(a: &InferArgs) -> Result<()> {
    let (LoadedModel::Text { model, vocab }, _) = load_model(&a.checkpoint)? else {
        return Err(Error::Incompatible(format!("{} is not a text checkpoint", a.checkpoint.display())));
    };
    let vocab = resolve_vocab(vocab, a.vocab.as_deref())?;
    let lines = read_lines(&a.input)?;
    let rows = Execution::Parallel.try_map(&lines, |i, text| {
        let p = model.classify_text_at(text, &vocab, a.threshold)?;
        Ok::<_, Error>(json!({ "id": i + 1, "label": p.label.class(), "probability": p.probability }))
    })?;
    emit(a, "infer-text", &rows)
}

pub fn infer_image_cmd(a: &InferArgs) -> Result<()> {
    let (LoadedModel::Vision(model), _) = load_model(&a.checkpoint)? else {
        return Err(Error::Incompatible(format!("{} is not a vision checkpoint", a.checkpoint.display())));
    };
    let lines: Vec<String> = read_lines(&a.input)?.into_iter().filter(|l| !l.trim().is_empty()).collect();
    let size = model.config().image_size;
    let rows = Execution::Parallel.try_map(&lines, |_, path| {
        let pixels = load_for_model(Path::new(path.trim()), size)?;
        let p = model.classify_image(&pixels)?;
        Ok::<_, Error>(json!({
            "id": path.trim(),
            "label": u8::from(p.protest >= a.threshold),
            "probability": p.protest,
            "probabilities": p.attributes,
        }))
    })?;
    emit(a, "infer-image", &rows)
}

pub fn inspect_cmd(a: &InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    print!("{}", ck.listing());
    Ok(())
}
