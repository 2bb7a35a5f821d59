//! Subcommand implementations. Every command writes its outputs under the
//! run's output directory together with a `manifest.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{self, RunConfig, ENV_PREFIX};
use super::{Cli, Command, EvaluateArgs, FixtureArgs, IngestArgs, SplitArg, TrainArgs, ValidateArgs, VisualizeArgs};
use crate::annotation::{confidence_scores, flag_challenging, ConfidenceReport};
use crate::data::{
    gen_fixtures, load_dataset, load_image, scan_dataset, split_dataset, write_dataset, AnnotationSet,
    DatasetRecord, LoadOptions,
};
use crate::error::{Error, Result};
use crate::metrics::{summarize_seeds, MetricReport};
use crate::model::eval::evaluate;
use crate::model::train::{predict, prepare_samples, split_hash, train, RunManifest, Sample, SplitHashes};
use crate::model::{checkpoint, FusionModel, ModelConfig, PredictionBundle};
use crate::text::{resolve_model_dir, TextBackend};
use crate::viz::render_stage_heatmaps;

/// Boxes kept when decoding predictions for scoring; low so that AP sees
/// the whole ranking.
const EVAL_BOX_CONF: f64 = 0.01;

/// State shared by one command invocation.
struct Run {
    cfg: RunConfig,
    config_dir: PathBuf,
    outputs: Vec<PathBuf>,
    runs: Vec<Value>,
}

impl Run {
    fn out(&self) -> &Path {
        &self.cfg.paths.out
    }

    fn dataset(&self) -> Result<&Path> {
        self.cfg
            .paths
            .dataset
            .as_deref()
            .ok_or_else(|| Error::invalid("no dataset given (use --data/--input or paths.dataset)"))
    }

    fn image_root(&self) -> Result<PathBuf> {
        match &self.cfg.paths.images {
            Some(p) => Ok(p.clone()),
            None => Ok(self.dataset()?.parent().map(Path::to_path_buf).unwrap_or_default()),
        }
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.out().join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn write_jsonl<T: Serialize>(&mut self, name: &str, items: &[T]) -> Result<PathBuf> {
        let path = self.out().join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        for item in items {
            writeln!(w, "{}", serde_json::to_string(item)?)?;
        }
        w.flush()?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn text_backend(&self, model: &ModelConfig, device: &Device) -> Result<Box<dyn TextBackend>> {
        resolve_model_dir(&model.text_backend, &self.config_dir).build(model.dtype(), device)
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = config::load(cli.config.as_deref(), ENV_PREFIX, &cli.overrides())?;
    fs::create_dir_all(&cfg.paths.out)?;
    let config_dir = cli
        .config
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let mut run = Run {
        cfg,
        config_dir,
        outputs: Vec::new(),
        runs: Vec::new(),
    };
    let name = match &cli.command {
        Command::Ingest(a) => {
            ingest(&mut run, a)?;
            "ingest"
        }
        Command::ValidateAnnotations(a) => {
            validate_annotations(&mut run, a)?;
            "validate-annotations"
        }
        Command::Train(a) => {
            train_cmd(&mut run, a)?;
            "train"
        }
        Command::Evaluate(a) => {
            evaluate_cmd(&mut run, cli.config.is_some(), a)?;
            "evaluate"
        }
        Command::VisualizeAttention(a) => {
            visualize(&mut run, a)?;
            "visualize-attention"
        }
        Command::GenFixtures(a) => {
            fixtures(&mut run, a)?;
            "gen-fixtures"
        }
    };
    let out = run.out().to_path_buf();
    let outputs: Vec<String> = run
        .outputs
        .iter()
        .map(|p| p.strip_prefix(&out).unwrap_or(p).to_string_lossy().into_owned())
        .collect();
    let manifest = json!({
        "command": name,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": run.cfg.seed,
        "config": run.cfg,
        "outputs": outputs,
        "runs": run.runs,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Prints every error and returns the first, so that its kind sets the
/// exit code.
fn report_errors(errors: Vec<Error>) -> Result<()> {
    for e in &errors {
        eprintln!("{e}");
    }
    match errors.into_iter().next() {
        Some(first) => {
            log::error!("validation failed");
            Err(first)
        }
        None => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct LengthStats {
    min: usize,
    max: usize,
    mean: f64,
    median: f64,
    /// Counts per bucket of 10 tokens, keyed by the bucket's lower bound.
    histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Serialize)]
struct DatasetStats {
    records: usize,
    sarcastic: usize,
    sarcastic_ratio: f64,
    topics: BTreeMap<String, usize>,
    token_lengths: LengthStats,
    truncated: usize,
    max_tokens: usize,
}

fn dataset_stats(records: &[DatasetRecord], max_tokens: usize) -> DatasetStats {
    let mut lengths: Vec<usize> = records.iter().map(DatasetRecord::token_count).collect();
    lengths.sort_unstable();
    let n = lengths.len();
    let median = if n % 2 == 1 {
        lengths[n / 2] as f64
    } else {
        (lengths[n / 2 - 1] + lengths[n / 2]) as f64 / 2.0
    };
    let mut histogram = BTreeMap::new();
    for &l in &lengths {
        *histogram.entry(l / 10 * 10).or_insert(0) += 1;
    }
    let mut topics = BTreeMap::new();
    for r in records {
        *topics.entry(r.topic.clone()).or_insert(0) += 1;
    }
    let sarcastic = records.iter().filter(|r| r.sarcastic).count();
    DatasetStats {
        records: n,
        sarcastic,
        sarcastic_ratio: sarcastic as f64 / n as f64,
        topics,
        token_lengths: LengthStats {
            min: lengths[0],
            max: lengths[n - 1],
            mean: lengths.iter().sum::<usize>() as f64 / n as f64,
            median,
            histogram,
        },
        truncated: lengths.iter().filter(|&&l| l > max_tokens).count(),
        max_tokens,
    }
}

fn ingest(run: &mut Run, _args: &IngestArgs) -> Result<()> {
    let opts = LoadOptions {
        image_root: Some(run.image_root()?),
        strict_images: run.cfg.strict_images,
        max_tokens: None,
    };
    let (mut records, errors) = scan_dataset(run.dataset()?, &opts)?;
    report_errors(errors)?;
    if records.is_empty() {
        return Err(Error::invalid("dataset has no records"));
    }
    let max_tokens = run.cfg.model.max_tokens();
    let stats = dataset_stats(&records, max_tokens);
    for r in &mut records {
        let n = r.token_count();
        if r.truncate_tokens(max_tokens) {
            log::debug!("record {}: truncated {n} tokens to {max_tokens}", r.id);
        }
    }
    if stats.truncated > 0 {
        log::warn!("{} documents truncated to {max_tokens} tokens", stats.truncated);
    }
    let path = run.out().join("dataset.jsonl");
    write_dataset(&path, &records)?;
    run.outputs.push(path);
    run.write_json("stats.json", &stats)?;
    println!(
        "{} records, {:.1}% sarcastic, {} truncated",
        stats.records,
        100.0 * stats.sarcastic_ratio,
        stats.truncated
    );
    Ok(())
}

/// One line of the annotation QA input.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Triple {
    id: String,
    annotations: Vec<AnnotationSet>,
}

fn validate_annotations(run: &mut Run, args: &ValidateArgs) -> Result<()> {
    if !args.input.exists() {
        return Err(Error::MissingArtifact(format!("annotations {}", args.input.display())));
    }
    let mut reports = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in BufReader::new(File::open(&args.input)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let triple: Triple = match serde_json::from_str(&line) {
            Ok(t) => t,
            Err(e) => {
                errors.push(Error::Malformed {
                    path: args.input.clone(),
                    line: idx + 1,
                    message: e.to_string(),
                });
                continue;
            }
        };
        match confidence_scores(&triple.annotations) {
            Ok(mut r) => {
                r.id = triple.id;
                reports.push(r);
            }
            Err(e) => errors.push(Error::validation(triple.id, e.to_string())),
        }
    }
    report_errors(errors)?;
    if reports.is_empty() {
        return Err(Error::invalid("no annotation triples"));
    }
    flag_challenging(&mut reports, args.fraction)?;
    run.write_jsonl::<ConfidenceReport>("confidence.jsonl", &reports)?;
    let flagged = reports.iter().filter(|r| r.challenging).count();
    println!("{} samples scored, {flagged} flagged challenging", reports.len());
    Ok(())
}

fn load_for_model(run: &Run, model: &ModelConfig) -> Result<Vec<DatasetRecord>> {
    let opts = LoadOptions {
        image_root: Some(run.image_root()?),
        strict_images: true,
        max_tokens: Some(model.max_tokens()),
    };
    load_dataset(run.dataset()?, &opts)
}

fn train_cmd(run: &mut Run, args: &TrainArgs) -> Result<()> {
    let k = args.seeds.unwrap_or(1);
    if k == 0 {
        return Err(Error::invalid("--seeds must be positive"));
    }
    let device = Device::Cpu;
    let base_model = run.cfg.model_config();
    let records = load_for_model(run, &base_model)?;
    let split = split_dataset(&records, &run.cfg.split)?;
    let hashes = SplitHashes {
        train: split_hash(&split.train),
        val: split_hash(&split.val),
        test: split_hash(&split.test),
    };
    let backend = run.text_backend(&base_model, &device)?;
    let root = run.image_root()?;
    let prep = |recs: &[DatasetRecord]| prepare_samples(recs, &root, backend.as_ref(), &base_model, &device);
    let (train_set, val_set, test_set) = (prep(&split.train)?, prep(&split.val)?, prep(&split.test)?);

    let seeds: Vec<u64> = (0..k as u64).map(|i| run.cfg.seed + i).collect();
    let mut reports = Vec::with_capacity(k);
    for &seed in &seeds {
        let dir = if k == 1 { String::new() } else { format!("seed-{seed}/") };
        let model_cfg = ModelConfig {
            seed,
            ..base_model.clone()
        };
        let train_cfg = crate::model::train::TrainConfig {
            seed,
            ..run.cfg.train.clone()
        };
        let model = FusionModel::new(&model_cfg, backend.width(), &device)?;
        let history = train(&model, &train_set, Some(&val_set), &train_cfg)?;
        let ck = run.out().join(format!("{dir}checkpoint.safetensors"));
        fs::create_dir_all(ck.parent().expect("joined path"))?;
        checkpoint::save(&model, &ck)?;
        run.outputs.push(ck);
        run.write_json(&format!("{dir}history.json"), &history)?;
        let manifest = RunManifest::new(&model_cfg, &train_cfg, &history, hashes.clone());
        run.write_json(&format!("{dir}run_manifest.json"), &manifest)?;
        run.runs.push(serde_json::to_value(&manifest)?);

        let batch = train_cfg.batch_size;
        let val = score(&model, &val_set, &split.val, batch, run)?;
        run.write_json(&format!("{dir}val_metrics.json"), &val)?;
        let test = score(&model, &test_set, &split.test, batch, run)?;
        run.write_json(&format!("{dir}test_metrics.json"), &test)?;
        println!(
            "seed {seed}: {} steps, final loss {:.5}, test acc {:.4}",
            history.steps.len(),
            history.final_loss().unwrap_or(f64::NAN),
            test.acc.unwrap_or(f64::NAN)
        );
        reports.push(test);
    }
    if k > 1 {
        let summary = summarize_seeds(seeds, reports);
        run.write_json("seeds_summary.json", &summary)?;
    }
    Ok(())
}

fn score(
    model: &FusionModel,
    samples: &[Sample],
    gold: &[DatasetRecord],
    batch: usize,
    run: &Run,
) -> Result<MetricReport> {
    let preds = predict(model, samples, batch, EVAL_BOX_CONF)?;
    evaluate(&preds, gold, &run.cfg.metrics)
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionBundle>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("predictions {}", path.display())));
    }
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn evaluate_cmd(run: &mut Run, explicit_config: bool, args: &EvaluateArgs) -> Result<()> {
    if let Some(pred_path) = &args.predictions {
        let gold_path = args.gold.as_deref().ok_or_else(|| Error::invalid("--predictions needs --gold"))?;
        let preds = read_predictions(pred_path)?;
        let gold = load_dataset(gold_path, &LoadOptions::default())?;
        let report = evaluate(&preds, &gold, &run.cfg.metrics)?;
        run.write_json("metrics.json", &report)?;
        println!("{}", serde_json::to_string(&report)?);
        return Ok(());
    }

    let ck = args
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::invalid("evaluate needs --checkpoint or --predictions"))?;
    let device = Device::Cpu;
    let model = if explicit_config {
        checkpoint::load_matching(ck, &run.cfg.model_config(), &device)?
    } else {
        checkpoint::load(ck, &device)?
    };
    let model_cfg = model.config().clone();
    let records = load_for_model(run, &model_cfg)?;
    let gold = match args.split {
        SplitArg::All => records,
        s => {
            let split = split_dataset(&records, &run.cfg.split)?;
            match s {
                SplitArg::Train => split.train,
                SplitArg::Val => split.val,
                _ => split.test,
            }
        }
    };
    let backend = run.text_backend(&model_cfg, &device)?;
    let samples = prepare_samples(&gold, &run.image_root()?, backend.as_ref(), &model_cfg, &device)?;
    let preds = predict(&model, &samples, run.cfg.train.batch_size, EVAL_BOX_CONF)?;
    run.write_jsonl("predictions.jsonl", &preds)?;
    let report = evaluate(&preds, &gold, &run.cfg.metrics)?;
    run.write_json("metrics.json", &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn visualize(run: &mut Run, args: &VisualizeArgs) -> Result<()> {
    let device = Device::Cpu;
    let model = checkpoint::load(&args.checkpoint, &device)?;
    let model_cfg = model.config().clone();
    let records = load_for_model(run, &model_cfg)?;
    let record = records
        .iter()
        .find(|r| r.id == args.id)
        .ok_or_else(|| Error::invalid(format!("record {} not found", args.id)))?;
    let image = load_image(run.image_root()?.join(&record.image_path))?;
    let backend = run.text_backend(&model_cfg, &device)?;
    let sample = crate::model::train::prepare_sample(record, &image, backend.as_ref(), &model_cfg, &device)?;
    let paths = render_stage_heatmaps(&model, &sample, &image, run.out())?;
    for p in &paths {
        println!("{}", p.display());
    }
    run.outputs.extend(paths);
    Ok(())
}

fn fixtures(run: &mut Run, args: &FixtureArgs) -> Result<()> {
    if args.n == 0 || args.image_size < 16 {
        return Err(Error::invalid("need n > 0 and image_size >= 16"));
    }
    let set = gen_fixtures(args.n, run.cfg.seed, args.image_size);
    set.write_to(run.out())?;
    run.outputs.push(run.out().join("data.jsonl"));
    run.outputs.push(run.out().join("images"));
    println!("{} records written to {}", set.len(), run.out().display());
    Ok(())
}
