use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::seq::SliceRandom;
use serde_json::{json, Value as Json};

use nestgen::data::{check_records, ingest, read_records, write_records, Format};
use nestgen::metrics::{evaluate, EvalOptions, RuleSet};
use nestgen::model::Model;
use nestgen::rng::{derive, streams};
use nestgen::schema::{CompileOptions, SchemaNode};
use nestgen::tensor::TransformerConfig;
use nestgen::trainer::{self, DpConfig, TrainConfig};

use crate::manifest::{hash_inputs, RunManifest};
use crate::{EvalArgs, Family, FitArgs, InspectArgs, SampleArgs};

/// Tags a library error with the stage it came from.
fn stage<E>(name: &'static str) -> impl FnOnce(E) -> anyhow::Error
where
    E: std::error::Error + Send + Sync + 'static,
{
    move |e| anyhow::Error::new(e).context(format!("{name} failed"))
}

fn load_schema(path: &Path) -> Result<SchemaNode> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read schema {}", path.display()))
        .context("parse failed")?;
    SchemaNode::parse(&text).map_err(stage("parse"))
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let schema = load_schema(&a.schema)?;
    let format = a.format.unwrap_or_else(|| Format::from_path(&a.data));
    let data = ingest(&a.data, &schema, format).map_err(stage("ingest"))?;
    log::info!("ingested {} records from {}", data.records.len(), a.data.display());

    let options = CompileOptions {
        transformer: TransformerConfig {
            width: a.width,
            blocks: a.blocks,
            heads: a.heads,
            init_std: a.init_std,
        },
        trainable_c0: !a.fixed_c0,
        positional: a.positional,
    };
    let train = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        shuffle_passes: a.shuffle_passes,
        seed: a.seed,
        ..Default::default()
    };
    let dp = a.dp.then(|| DpConfig {
        enabled: true,
        clip_norm: a.clip,
        noise_multiplier: a.noise,
    });
    let (inputs, content_hash) = hash_inputs(&[&a.schema, &a.data]).context("ingest failed")?;
    let manifest = RunManifest {
        tool: "nestgen".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        schema_path: a.schema.display().to_string(),
        data_path: a.data.display().to_string(),
        data_format: format.to_string(),
        model_path: a.out.display().to_string(),
        seed: a.seed,
        train: train.clone(),
        dp: dp.clone(),
        width: a.width,
        blocks: a.blocks,
        heads: a.heads,
        init_std: a.init_std,
        positional: a.positional,
        trainable_c0: !a.fixed_c0,
        inputs,
        content_hash,
    };

    let (mut model, tree) =
        Model::init(schema, data.encodings.clone(), options, a.seed).map_err(stage("train"))?;
    log::info!(
        "{} parameters ({} trainable)",
        model.params.count(),
        model.params.trainable_count()
    );

    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("cannot create run log {}", log_path.display()))?,
    );
    writeln!(log, "{}", json!({"event": "manifest", "manifest": manifest}))?;
    let mut log_err = None;
    let report = trainer::fit(&tree, &mut model.params, &data.batch, &train, dp.as_ref(), &mut |r| {
        let line = json!({"event": "batch", "record": r});
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })
    .map_err(stage("train"))?;
    if let Some(e) = log_err {
        return Err(anyhow::Error::new(e).context("writing run log failed"));
    }
    writeln!(
        log,
        "{}",
        json!({
            "event": "done",
            "steps": report.steps,
            "epoch_means": report.epoch_means,
            "parameters": model.params.count(),
            "model": a.out.display().to_string(),
        })
    )?;
    log.flush()?;

    model.manifest = serde_json::to_value(&manifest)?;
    model.save(&a.out).map_err(stage("write"))?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    let model = Model::load(&a.model).map_err(stage("load"))?;
    let format = a.format.unwrap_or_else(|| Format::from_path(&a.out));
    if format == Format::Csv && !model.schema.is_flat() {
        bail!(
            "sample failed: CSV output needs a flat record schema, but {} is nested; use --format jsonl",
            model.schema.name()
        );
    }
    let tree = model.tree().map_err(stage("load"))?;
    let values = tree
        .sample(&model.params, a.count, &mut derive(a.seed, streams::SAMPLE))
        .map_err(stage("sample"))?;
    nestgen::data::emit(&a.out, &model.schema, &model.encodings, &values, format).map_err(stage("write"))?;
    log::info!("wrote {} records to {}", values.len(), a.out.display());
    Ok(())
}

fn load_records(path: &Path, schema: &SchemaNode, format: Option<Format>, what: &str) -> Result<Vec<Json>> {
    let format = format.unwrap_or_else(|| Format::from_path(path));
    let records = read_records(path, schema, format)
        .map_err(|e| anyhow!("{what} data {}: {e}", path.display()))
        .context("ingest failed")?;
    check_records(schema, &records)
        .map_err(|e| anyhow!("{what} data {}: {e}", path.display()))
        .context("ingest failed")?;
    Ok(records)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let schema = load_schema(&a.schema)?;
    let real = load_records(&a.data, &schema, a.format, "real")?;
    let synth = load_records(&a.synth, &schema, a.format, "synthetic")?;
    let rules: Option<RuleSet> = match &a.rules {
        None => None,
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read rules {}", p.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("bad rules file {}", p.display()))?)
        }
    };
    let opts = EvalOptions {
        distances: a.metrics.contains(&Family::Distances),
        correlation: a.metrics.contains(&Family::Correlation),
        marginal: a.metrics.contains(&Family::Marginal),
        k: a.k,
        subsets: a.subsets,
    };
    let report = evaluate(
        &schema,
        &real,
        &synth,
        &opts,
        rules.as_ref(),
        &mut derive(a.seed, streams::METRICS),
    )
    .map_err(stage("eval"))?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("cannot write {}", out.display()))?;
    }
    if let Some(dir) = &a.splits {
        write_splits(dir, &schema, real, a.format.unwrap_or_else(|| Format::from_path(&a.data)), a.seed)?;
    }
    Ok(())
}

/// Seeded 80/20 split of the real records for external utility harnesses.
fn write_splits(dir: &Path, schema: &SchemaNode, mut records: Vec<Json>, format: Format, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    records.shuffle(&mut derive(seed, streams::SPLIT));
    let cut = records.len() * 4 / 5;
    let ext = match format {
        Format::Csv => "csv",
        Format::Jsonl => "jsonl",
    };
    for (name, part) in [("train", &records[..cut]), ("test", &records[cut..])] {
        let path = dir.join(format!("{name}.{ext}"));
        let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        write_records(file, schema, part, format)?;
    }
    log::info!("wrote {cut}/{} train/test split to {}", records.len() - cut, dir.display());
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let model = Model::load(&a.model).map_err(stage("load"))?;
    let tree = model.tree().map_err(stage("load"))?;
    println!("schema:\n{}\n", serde_json::to_string_pretty(&model.schema.to_json())?);
    println!("codec tree:\n  {}\n", tree.describe());
    let t = &model.options.transformer;
    println!(
        "width {}, blocks {}, heads {}, c0 {}, positional {}\n",
        t.width,
        t.blocks,
        t.heads,
        if model.options.trainable_c0 { "trained" } else { "fixed" },
        model.options.positional
    );
    println!("{:<60} {:>12} {:>10}", "parameter", "shape", "count");
    for id in model.params.ids() {
        let p = model.params.get(id);
        let shape = p.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let mark = if model.params.is_trainable(id) { "" } else { " (fixed)" };
        println!("{:<60} {:>12} {:>10}{mark}", model.params.path(id), shape, p.data().len());
    }
    println!(
        "\ntotal {} parameters, {} trainable",
        model.params.count(),
        model.params.trainable_count()
    );
    if !model.manifest.is_null() {
        println!("\nmanifest:\n{}", serde_json::to_string_pretty(&model.manifest)?);
    }
    Ok(())
}
