use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use ibg_core::attribution::{extract_opinion_words, AttributionConfig, Method, ModelScorer};
use ibg_core::data::{
    by_split, corpus_stats, encode_corpus, generate_corpus, load_jsonl, save_jsonl, EncodedExample, Example, Label,
    Split, Vocab,
};
use ibg_core::dimension_analysis::analyze;
use ibg_core::exec;
use ibg_core::faithfulness::{evaluate_faithfulness, FaithfulnessReport};
use ibg_core::model::{ModelConfig, SentimentClassifier};
use ibg_core::training::{evaluate, load_checkpoint, save_checkpoint, train_base, train_ibil, Checkpoint, EpochRecord};

use crate::config::{checkpoint_name, Phase, RunConfig, SweepAxis};
use crate::error::{Category, CliError};

type Result<T> = std::result::Result<T, CliError>;

fn read_corpus(config: &RunConfig) -> Result<Vec<Example>> {
    let path = config.corpus_path();
    if !path.exists() {
        return Err(CliError::new(
            Category::MissingFile,
            format!("corpus {} not found (run gen-data first)", path.display()),
        ));
    }
    Ok(load_jsonl(&path)?)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CliError::new(
            Category::MissingFile,
            format!("checkpoint {} not found", path.display()),
        ));
    }
    load_checkpoint(path)
        .map_err(|e| CliError::new(Category::IncompatibleCheckpoint, format!("{}: {e}", path.display())))
}

/// The run config's architecture must describe the checkpoint's.
fn check_compatible(run: &ModelConfig, ckpt: &SentimentClassifier) -> Result<()> {
    let c = &ckpt.config;
    let mut diffs = Vec::new();
    let fields = [
        ("high_dim", run.high_dim, c.high_dim),
        ("encoder_layers", run.encoder_layers, c.encoder_layers),
        ("num_classes", run.num_classes, c.num_classes),
        ("max_len", run.max_len, c.max_len),
        ("use_positions", run.use_positions as usize, c.use_positions as usize),
    ];
    for (name, a, b) in fields {
        if a != b {
            diffs.push(format!("{name} {a} vs {b}"));
        }
    }
    if ckpt.has_ibil() && run.low_dim != c.low_dim {
        diffs.push(format!("low_dim {} vs {}", run.low_dim, c.low_dim));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            Category::IncompatibleCheckpoint,
            format!("run config vs checkpoint: {}", diffs.join(", ")),
        ))
    }
}

fn load_model(config: &RunConfig, default_phase: Phase) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(&config.checkpoint_path(default_phase))?;
    check_compatible(&config.model, &ckpt.model)?;
    Ok(ckpt)
}

fn split_examples(corpus: &[Example], split: Split) -> Vec<Example> {
    by_split(corpus, split)
}

fn encode(examples: &[Example], vocab: &Vocab, model: &SentimentClassifier) -> Result<Vec<EncodedExample>> {
    Ok(encode_corpus(examples, vocab, model.config.max_len)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(e, path))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(CliError::internal)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_csv<const N: usize>(path: &Path, header: [&str; N], rows: &[[String; N]]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| CliError::new(Category::Io, format!("{}: {e}", path.display())))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn out(config: &RunConfig, name: &str) -> PathBuf {
    config.output_dir.join(name)
}

fn num(v: f64) -> String {
    v.to_string()
}

// ---------------------------------------------------------------- gen-data

pub fn gen_data(config: &RunConfig) -> Result<()> {
    let corpus = generate_corpus(&config.generator)?;
    save_jsonl(&corpus, &out(config, "corpus.jsonl"))?;
    let stats = corpus_stats(&corpus);
    #[derive(Serialize)]
    struct Summary {
        train: usize,
        dev: usize,
        test: usize,
        conflict_fraction: f64,
        #[serde(flatten)]
        stats: ibg_core::data::CorpusStats,
    }
    let summary = Summary {
        train: by_split(&corpus, Split::Train).len(),
        dev: by_split(&corpus, Split::Dev).len(),
        test: by_split(&corpus, Split::Test).len(),
        conflict_fraction: stats.conflict_fraction(),
        stats,
    };
    write_json(&out(config, "corpus-stats.json"), &summary)
}

// ------------------------------------------------------------------- train

const CURVE_HEADER: [&str; 6] = ["epoch", "ce", "kl", "total", "dev_acc", "dev_macro_f1"];

fn curve_rows(curve: &[EpochRecord]) -> Vec<[String; 6]> {
    curve
        .iter()
        .map(|r| {
            [
                r.epoch.to_string(),
                num(r.ce),
                num(r.kl),
                num(r.total),
                num(r.dev_acc),
                num(r.dev_macro_f1),
            ]
        })
        .collect()
}

#[derive(Serialize)]
struct SplitMetrics {
    split: Split,
    accuracy: f64,
    macro_f1: f64,
}

fn metrics(model: &SentimentClassifier, encoded: &[EncodedExample], split: Split) -> Result<SplitMetrics> {
    let r = evaluate(model, encoded)?;
    Ok(SplitMetrics {
        split,
        accuracy: r.accuracy,
        macro_f1: r.macro_f1,
    })
}

pub fn train(config: &RunConfig) -> Result<()> {
    let corpus = read_corpus(config)?;
    let train_ex = split_examples(&corpus, Split::Train);
    let dev_ex = split_examples(&corpus, Split::Dev);
    let test_ex = split_examples(&corpus, Split::Test);
    let (outcome, vocab) = match config.phase {
        Phase::Base => {
            let vocab = Vocab::build(&train_ex);
            let model_config = ModelConfig {
                vocab_size: vocab.len(),
                ..config.model.clone()
            };
            let model = SentimentClassifier::new(model_config)?;
            let tr = encode(&train_ex, &vocab, &model)?;
            let dv = encode(&dev_ex, &vocab, &model)?;
            (train_base(&tr, &dv, model, &config.train)?, vocab)
        }
        Phase::Ibg => {
            if config.model.low_dim >= config.model.high_dim {
                return Err(CliError::new(
                    Category::ConfigConflict,
                    format!(
                        "bottleneck width {} must be smaller than embedding width {}",
                        config.model.low_dim, config.model.high_dim
                    ),
                ));
            }
            let base = load_model(config, Phase::Base)?;
            if base.model.has_ibil() {
                return Err(CliError::new(
                    Category::IncompatibleCheckpoint,
                    "the ibg phase starts from a checkpoint without a bottleneck",
                ));
            }
            let tr = encode(&train_ex, &base.vocab, &base.model)?;
            let dv = encode(&dev_ex, &base.vocab, &base.model)?;
            let outcome = train_ibil(
                &tr,
                &dv,
                &base.model,
                &config.train,
                config.model.beta,
                config.model.low_dim,
            )?;
            (outcome, base.vocab)
        }
    };
    let phase = match config.phase {
        Phase::Base => "base",
        Phase::Ibg => "ibg",
    };
    save_checkpoint(&outcome.model, &vocab, &out(config, checkpoint_name(config.phase)))?;
    write_csv(
        &out(config, &format!("curves-{phase}.csv")),
        CURVE_HEADER,
        &curve_rows(&outcome.curve),
    )?;
    let mut summary = Vec::new();
    for (split, ex) in [(Split::Dev, &dev_ex), (Split::Test, &test_ex)] {
        summary.push(metrics(&outcome.model, &encode(ex, &vocab, &outcome.model)?, split)?);
    }
    write_json(&out(config, &format!("metrics-{phase}.json")), &summary)
}

// ----------------------------------------------------------------- explain

#[derive(Serialize)]
struct Explanation<'a> {
    example_id: &'a str,
    tokens: &'a [String],
    aspect_span: [usize; 2],
    method: Method,
    alpha: Option<f64>,
    scores: Vec<f64>,
    gamma: Vec<f64>,
    gamma_hat: Option<Vec<f64>>,
    top_k: Vec<usize>,
    predicted: Label,
    gold: Label,
}

fn label(i: usize) -> Result<Label> {
    Label::from_index(i).ok_or_else(|| CliError::internal(format!("class index {i}")))
}

pub fn explain(config: &RunConfig) -> Result<()> {
    let ckpt = load_model(config, Phase::Ibg)?;
    let examples = split_examples(&read_corpus(config)?, config.split);
    let encoded = encode(&examples, &ckpt.vocab, &ckpt.model)?;
    let pairs: Vec<(&Example, &EncodedExample)> = examples.iter().zip(&encoded).collect();
    let lines = exec::try_collect(exec::map(&pairs, |(ex, enc)| {
        let s = ibg_core::attribution::explain(&ckpt.model, enc, config.method, &config.attribution)?;
        let top = extract_opinion_words(&s, config.top_k)?;
        let predicted = ckpt.model.predict(enc)?;
        Ok::<_, CliError>(Explanation {
            example_id: &ex.id,
            tokens: &ex.tokens,
            aspect_span: ex.aspect,
            method: s.method,
            alpha: s.alpha,
            scores: s.fscore,
            gamma: s.gamma,
            gamma_hat: s.gamma_hat,
            top_k: top.indices,
            predicted: label(predicted)?,
            gold: ex.label,
        })
    }))?;
    let path = out(
        config,
        &format!("explain-{}-{}.jsonl", config.method, config.split.name()),
    );
    let mut w = create(&path)?;
    for line in &lines {
        serde_json::to_writer(&mut w, line).map_err(CliError::internal)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ------------------------------------------------------- eval-faithfulness

fn faithfulness(
    model: &SentimentClassifier,
    encoded: &[EncodedExample],
    method: Method,
    attribution: &AttributionConfig,
    config: &RunConfig,
) -> Result<FaithfulnessReport> {
    let scorer = ModelScorer {
        model,
        method,
        config: attribution.clone(),
    };
    let alpha = (method == Method::Ibg).then_some(attribution.alpha);
    Ok(evaluate_faithfulness(
        model,
        encoded,
        &scorer,
        method.name(),
        alpha,
        &config.faithfulness,
    )?)
}

pub fn eval_faithfulness(config: &RunConfig) -> Result<()> {
    let ckpt = load_model(config, Phase::Ibg)?;
    let examples = split_examples(&read_corpus(config)?, config.split);
    let encoded = encode(&examples, &ckpt.vocab, &ckpt.model)?;
    let report = faithfulness(&ckpt.model, &encoded, config.method, &config.attribution, config)?;
    let stem = format!("faithfulness-{}-{}", config.method, config.split.name());
    write_csv(
        &out(config, &format!("{stem}.csv")),
        FaithfulnessReport::CSV_HEADER,
        &report.csv_records(),
    )?;
    write_json(&out(config, &format!("{stem}.json")), &report)
}

// ------------------------------------------------------------ analyze-dims

pub fn analyze_dims(config: &RunConfig) -> Result<()> {
    let ckpt = load_model(config, Phase::Ibg)?;
    let examples = split_examples(&read_corpus(config)?, config.split);
    let encoded = encode(&examples, &ckpt.vocab, &ckpt.model)?;
    let report = analyze(&ckpt.model, &encoded, &config.dims)?;
    let split = config.split.name();
    let dims: Vec<[String; 3]> = (0..report.mean_importance.len())
        .map(|j| [j.to_string(), num(report.mean_importance[j]), num(report.frequency[j])])
        .collect();
    write_csv(
        &out(config, &format!("dims-{split}.csv")),
        ["dim_index", "mean_importance", "frequency"],
        &dims,
    )?;
    let masking: Vec<[String; 2]> = report
        .masking
        .iter()
        .map(|p| [p.k.to_string(), num(p.masked_accuracy)])
        .collect();
    write_csv(
        &out(config, &format!("masking-{split}.csv")),
        ["k", "masked_accuracy"],
        &masking,
    )?;
    write_json(&out(config, &format!("dims-{split}.json")), &report)
}

// ------------------------------------------------------------------- sweep

const SWEEP_HEADER: [&str; 9] = [
    "axis",
    "value",
    "accuracy",
    "macro_f1",
    "aopc",
    "ph_acc",
    "precision_at_1",
    "hit_at_1",
    "kl",
];

pub fn sweep(config: &RunConfig) -> Result<()> {
    let axis = config.sweep.axis;
    if config.sweep.values.is_empty() {
        return Err(CliError::new(
            Category::ConfigConflict,
            "sweep needs at least one value",
        ));
    }
    let examples = split_examples(&read_corpus(config)?, config.split);
    let mut rows = Vec::new();
    let mut push = |value: f64,
                    model: &SentimentClassifier,
                    encoded: &[EncodedExample],
                    attribution: &AttributionConfig,
                    kl: Option<f64>|
     -> Result<()> {
        let eval = evaluate(model, encoded)?;
        let f = faithfulness(model, encoded, Method::Ibg, attribution, config)?;
        rows.push([
            axis.name().to_string(),
            num(value),
            num(eval.accuracy),
            num(eval.macro_f1),
            num(f.curve.aopc),
            num(f.ph_acc),
            num(f.rows[0].precision_at_k),
            num(f.hit_at_1),
            kl.map(num).unwrap_or_default(),
        ]);
        Ok(())
    };
    match axis {
        SweepAxis::Alpha => {
            let ckpt = load_model(config, Phase::Ibg)?;
            let encoded = encode(&examples, &ckpt.vocab, &ckpt.model)?;
            for &alpha in &config.sweep.values {
                let attribution = AttributionConfig {
                    alpha,
                    ..config.attribution.clone()
                };
                attribution.validate()?;
                push(alpha, &ckpt.model, &encoded, &attribution, None)?;
            }
        }
        SweepAxis::Beta | SweepAxis::LowDim => {
            let base = load_model(config, Phase::Base)?;
            if base.model.has_ibil() {
                return Err(CliError::new(
                    Category::IncompatibleCheckpoint,
                    "beta/low_dim sweeps start from a checkpoint without a bottleneck",
                ));
            }
            let corpus = read_corpus(config)?;
            let tr = encode(&split_examples(&corpus, Split::Train), &base.vocab, &base.model)?;
            let dv = encode(&split_examples(&corpus, Split::Dev), &base.vocab, &base.model)?;
            let encoded = encode(&examples, &base.vocab, &base.model)?;
            for &value in &config.sweep.values {
                let (beta, low_dim) = match axis {
                    SweepAxis::Beta => (value, config.model.low_dim),
                    _ => {
                        if value.fract() != 0.0 || value < 1.0 {
                            return Err(CliError::new(
                                Category::ConfigConflict,
                                format!("low_dim sweep value {value} is not a positive integer"),
                            ));
                        }
                        (config.model.beta, value as usize)
                    }
                };
                let outcome = train_ibil(&tr, &dv, &base.model, &config.train, beta, low_dim)?;
                let kl = outcome.curve.last().map(|r| r.kl);
                push(value, &outcome.model, &encoded, &config.attribution, kl)?;
            }
        }
    }
    write_csv(&out(config, &format!("sweep-{}.csv", axis.name())), SWEEP_HEADER, &rows)
}

// ------------------------------------------------------------------ report

pub fn report(config: &RunConfig) -> Result<()> {
    crate::report::render_all(&config.output_dir).map(|_| ())
}
