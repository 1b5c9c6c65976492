// SPDX-License-Identifier: MIT OR Apache-2.0

//! `synth`, `train`, `eval` and `probe`.
//!
//! Each command resolves its settings (flag > config file > default), does its
//! work through the library, writes its artifacts into the output directory
//! and finishes with a `manifest.json` listing inputs and outputs by checksum.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tunedlens::activations::ActivationSet;
use tunedlens::corpus::synth_multilingual_corpus;
use tunedlens::lens::Lens;
use tunedlens::metrics::{evaluate, EvalOptions, EvalSample, MetricsReport, RankMode};
use tunedlens::model::{Model, ModelSpec};
use tunedlens::report::{build_lens_table, export_report, render_heatmap, StringTable};
use tunedlens::train::{train_lens, train_lens_per_language, PositionPolicy, TrainConfig};

use crate::args::{EvalArgs, ProbeArgs, SynthArgs, TrainArgs};
use crate::config::{pick, LoadedConfig};
use crate::error::CliError;
use crate::manifest::{ManifestBuilder, RunManifest};

pub const ACTIVATIONS_FILE: &str = "activations.bin";
pub const MODEL_FILE: &str = "model.json";
const MODEL_FORMAT: &str = "tunedlens-model";
/// Offset between the model seed and the corpus seed derived from one `--seed`.
const CORPUS_SEED_OFFSET: u64 = 1;

/// A model is stored as its spec plus a checksum of the weights it rebuilds to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub spec: ModelSpec,
    pub weights_sha256: String,
}

impl ModelFile {
    #[must_use]
    pub fn of(model: &Model) -> Self {
        Self {
            format: MODEL_FORMAT.to_owned(),
            spec: model.spec().clone(),
            weights_sha256: model.checksum(),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Rebuilds the model described by `model.json` and checks its weights.
pub fn load_model(path: &Path) -> Result<Model, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let input = |detail: String| CliError::Input {
        path: path.to_owned(),
        detail,
    };
    let file: ModelFile = serde_json::from_slice(&bytes).map_err(|e| input(e.to_string()))?;
    if file.format != MODEL_FORMAT {
        return Err(input(format!("unexpected format {:?}", file.format)));
    }
    let model = Model::build(file.spec)?;
    if model.checksum() != file.weights_sha256 {
        return Err(input("rebuilt weights do not match the recorded checksum".into()));
    }
    Ok(model)
}

/// Resolves `logit`, `identity`, `PATH` or `ID=PATH` against `spec`.
pub fn resolve_lens(arg: &str, spec: &ModelSpec) -> Result<(String, Lens), CliError> {
    let (id, target) = match arg.split_once('=') {
        Some((id, path)) if !id.is_empty() => (Some(id.to_owned()), path),
        _ => (None, arg),
    };
    let lens = match target {
        "logit" => Lens::logit(spec.clone()),
        "identity" => Lens::identity(spec.clone()),
        path => Lens::load_for(path, spec)?,
    };
    let id = id.unwrap_or_else(|| match target {
        "logit" | "identity" => target.to_owned(),
        path => Path::new(path)
            .file_stem()
            .map_or_else(|| path.to_owned(), |s| s.to_string_lossy().into_owned()),
    });
    Ok((id, lens))
}

/// Resolves several lens arguments, rejecting duplicate ids.
pub fn resolve_lenses(args: &[String], spec: &ModelSpec) -> Result<Vec<(String, Lens)>, CliError> {
    let mut seen = BTreeSet::new();
    args.iter()
        .map(|a| {
            let (id, lens) = resolve_lens(a, spec)?;
            if !seen.insert(id.clone()) {
                return Err(CliError::Usage(format!(
                    "lens id {id:?} given twice; use ID=PATH to disambiguate"
                )));
            }
            Ok((id, lens))
        })
        .collect()
}

fn lens_input(manifest: &mut ManifestBuilder, arg: &str) -> Result<(), CliError> {
    let target = arg.split_once('=').map_or(arg, |(_, p)| p);
    if target != "logit" && target != "identity" {
        manifest.input(Path::new(target))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SynthSettings {
    pub spec: ModelSpec,
    pub languages: Vec<String>,
    pub seqs: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl SynthSettings {
    pub fn resolve(a: &SynthArgs, cfg: &LoadedConfig) -> Result<Self, CliError> {
        let f = &cfg.file.synth;
        let d = ModelSpec::default();
        let seed = pick(a.seed, f.seed, 0);
        let spec = ModelSpec {
            d_model: pick(a.d_model, f.d_model, d.d_model),
            n_layers: pick(a.layers, f.layers, d.n_layers),
            n_heads: pick(a.heads, f.heads, d.n_heads),
            vocab_size: pick(a.vocab, f.vocab, d.vocab_size),
            max_seq: pick(a.max_seq, f.max_seq, d.max_seq),
            final_norm: pick(a.final_norm, f.final_norm, d.final_norm),
            seed,
        };
        spec.validate().map_err(CliError::usage_if_config)?;
        let langs = pick(a.langs.clone(), f.langs.clone(), "bn,en,hi".to_owned());
        let languages: Vec<String> = langs.split(',').map(|s| s.trim().to_owned()).collect();
        let seq_len = pick(a.seq_len, f.seq_len, 32);
        if seq_len > spec.max_seq {
            return Err(CliError::Usage(format!(
                "--seq-len {seq_len} exceeds max_seq {}",
                spec.max_seq
            )));
        }
        if seq_len == 0 {
            return Err(CliError::Usage("--seq-len must be positive".into()));
        }
        Ok(Self {
            spec,
            languages,
            seqs: pick(a.seqs, f.seqs, 300),
            seq_len,
            seed,
        })
    }
}

pub fn synth(a: &SynthArgs, cfg: &LoadedConfig) -> Result<RunManifest, CliError> {
    let s = SynthSettings::resolve(a, cfg)?;
    let out = a.out.dir();
    create_dir(&out)?;
    let mut manifest = ManifestBuilder::new("synth", &s, cfg.source.clone(), Some(s.seed));

    let model = Model::build(s.spec.clone()).map_err(CliError::usage_if_config)?;
    let set = synth_multilingual_corpus(
        &model,
        &s.languages,
        s.seqs,
        s.seq_len,
        s.seed.wrapping_add(CORPUS_SEED_OFFSET),
    )
    .map_err(CliError::usage_if_config)?;

    let acts = out.join(ACTIVATIONS_FILE);
    set.write(&acts)?;
    let model_path = out.join(MODEL_FILE);
    write_json(&model_path, &ModelFile::of(&model))?;
    manifest.output(acts.clone());
    manifest.output(model_path);
    let m = manifest.finish(&out)?;

    let bytes = std::fs::metadata(&acts).map_err(|e| CliError::io(&acts, e))?.len();
    println!("model      {}", s.spec.summary());
    println!("languages  {}", s.languages.join(", "));
    for (tag, n) in set.language_counts() {
        println!("  {tag:<8} {n} sequences");
    }
    println!("sequences  {} ({} positions)", set.len(), set.n_positions());
    println!("wrote      {} ({bytes} bytes)", acts.display());
    Ok(m)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TrainSettings {
    pub config: TrainConfig,
}

impl TrainSettings {
    pub fn resolve(a: &TrainArgs, cfg: &LoadedConfig) -> Result<Self, CliError> {
        let f = &cfg.file.train;
        let d = TrainConfig::default();
        let positions = match a.positions.as_ref().or(f.positions.as_ref()) {
            Some(p) => p
                .parse::<PositionPolicy>()
                .map_err(|e| CliError::Usage(e.to_string()))?,
            None => d.positions,
        };
        let config = TrainConfig {
            steps: pick(a.steps, f.steps, d.steps),
            batch_sequences: pick(a.batch, f.batch, d.batch_sequences),
            learning_rate: pick(a.lr, f.lr, d.learning_rate),
            seed: pick(a.seed, f.seed, d.seed),
            positions,
            per_language: a.per_language || f.per_language.unwrap_or(d.per_language),
            ..d
        };
        if config.steps == 0 {
            return Err(CliError::Usage("--steps must be at least 1".into()));
        }
        config.validate().map_err(CliError::usage_if_config)?;
        Ok(Self { config })
    }
}

pub fn train(a: &TrainArgs, cfg: &LoadedConfig) -> Result<RunManifest, CliError> {
    let s = TrainSettings::resolve(a, cfg)?;
    let out = a.out.dir();
    let set = ActivationSet::read(&a.activations)?;
    let model = Model::build(set.spec.clone())?;
    create_dir(&out)?;
    let mut manifest = ManifestBuilder::new("train", &s, cfg.source.clone(), Some(s.config.seed));
    manifest.input(&a.activations)?;

    let mut report = |tag: &str, lens: &Lens, trace: &tunedlens::train::TrainTrace| -> Result<(), CliError> {
        let suffix = if tag.is_empty() {
            String::new()
        } else {
            format!("-{tag}")
        };
        let lens_path = out.join(format!("lens{suffix}.bin"));
        let trace_path = out.join(format!("trace{suffix}.jsonl"));
        lens.save(&lens_path)?;
        trace.write_jsonl(&trace_path)?;
        let (lead, trail) = trace.leading_trailing(0.1);
        let label = if tag.is_empty() { "all" } else { tag };
        println!("{label:<8} mean KL leading {lead:.6} -> trailing {trail:.6} nats");
        for t in lens.summary() {
            println!(
                "  layer {}: |M - I|_F = {:.4}, |b| = {:.4}",
                t.layer, t.frobenius_from_identity, t.bias_norm
            );
        }
        manifest.output(lens_path);
        manifest.output(trace_path);
        Ok(())
    };

    if s.config.per_language {
        for (tag, (lens, trace)) in train_lens_per_language(&set, model.head(), &s.config)? {
            report(&tag, &lens, &trace)?;
        }
    } else {
        let (lens, trace) = train_lens(&set, model.head(), &s.config)?;
        report("", &lens, &trace)?;
    }
    manifest.finish(&out)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EvalSettings {
    pub lenses: Vec<String>,
    pub options: EvalOptions,
    pub gold: bool,
}

pub fn eval(a: &EvalArgs, cfg: &LoadedConfig) -> Result<MetricsReport, CliError> {
    let bucket = pick(a.bucket, cfg.file.eval.bucket, 1);
    if bucket == 0 {
        return Err(CliError::Usage("--bucket must be positive".into()));
    }
    let options = EvalOptions {
        rank_mode: if a.gold.is_some() {
            RankMode::Gold
        } else {
            RankMode::FinalTop1
        },
        position_bucket: bucket,
    };
    let settings = EvalSettings {
        lenses: a.lenses.clone(),
        options,
        gold: a.gold.is_some(),
    };
    let set = ActivationSet::read(&a.activations)?;
    let model = Model::build(set.spec.clone())?;
    let lenses = resolve_lenses(&a.lenses, &set.spec)?;

    let out = a.out.dir();
    create_dir(&out)?;
    let mut manifest = ManifestBuilder::new("eval", &settings, cfg.source.clone(), None);
    manifest.input(&a.activations)?;
    for l in &a.lenses {
        lens_input(&mut manifest, l)?;
    }

    let samples = match &a.gold {
        Some(path) => {
            manifest.input(path)?;
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_slice::<Vec<EvalSample>>(&bytes).map_err(|e| CliError::Input {
                path: path.clone(),
                detail: e.to_string(),
            })?
        }
        None => EvalSample::all(&set),
    };

    let mut report = MetricsReport::new(&set.spec, options);
    for (id, lens) in &lenses {
        report
            .lenses
            .push(evaluate(id, lens, model.head(), &set, &samples, options)?);
    }
    report.add_deltas_against_first()?;
    let index = export_report(&report, &out)?;
    for f in &index.files {
        manifest.output(out.join(&f.path));
    }
    manifest.output(out.join(tunedlens::report::INDEX_FILE));
    manifest.finish(&out)?;

    print_summary(&report);
    Ok(report)
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "   -  ".to_owned(), |x| format!("{x:6.3}"))
}

fn print_summary(report: &MetricsReport) {
    let mode = match report.options.rank_mode {
        RankMode::FinalTop1 => "final-top1",
        RankMode::Gold => "gold",
    };
    println!("rank mode: {mode}");
    for lm in &report.lenses {
        println!("lens {} ({})", lm.lens, lm.kind);
        for lang in &lm.languages {
            let agree: Vec<String> = lang.layers.iter().map(|c| fmt_cell(c.agreement)).collect();
            let rank: Vec<String> = lang.layers.iter().map(|c| fmt_cell(c.mean_rank)).collect();
            println!("  {:<8} agreement {}", lang.language, agree.join(" "));
            println!("  {:<8} mean rank {}", "", rank.join(" "));
        }
    }
    for d in &report.deltas {
        println!("delta {} - {}", d.lens, d.baseline);
        for lang in &d.languages {
            let cells: Vec<String> = lang.cells.iter().map(|c| fmt_cell(c.delta)).collect();
            println!("  {:<8} {}", lang.language, cells.join(" "));
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ProbeSettings {
    pub lens: String,
    pub token_ids: Vec<u32>,
    pub top_k: usize,
}

pub const PROBE_LANGUAGE: &str = "probe";

fn parse_tokens(s: &str) -> Result<Vec<u32>, CliError> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<u32>()
                .map_err(|_| CliError::Usage(format!("token id {x:?} is not a non-negative integer")))
        })
        .collect()
}

pub fn probe(a: &ProbeArgs, cfg: &LoadedConfig) -> Result<tunedlens::report::LensTable, CliError> {
    let model = load_model(&a.model)?;
    let spec = model.spec().clone();
    let table = match &a.table {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Some(StringTable::parse(&text, spec.vocab_size).map_err(CliError::usage_if_config)?)
        }
        None => None,
    };
    let token_ids = match (&a.tokens, &a.text, &table) {
        (Some(t), _, _) => parse_tokens(t)?,
        (None, Some(text), Some(table)) => table.encode(text).map_err(CliError::usage_if_config)?,
        _ => return Err(CliError::Usage("give --tokens, or --text with --table".into())),
    };
    let top_k = pick(a.top_k, cfg.file.probe.top_k, 5);
    let settings = ProbeSettings {
        lens: a.lens.clone(),
        token_ids: token_ids.clone(),
        top_k,
    };
    let (id, lens) = resolve_lens(&a.lens, &spec)?;
    let seq = model.forward_collect(&token_ids, PROBE_LANGUAGE)?;
    let lt =
        build_lens_table(&lens, model.head(), &spec, &seq, top_k, table.as_ref()).map_err(CliError::usage_if_config)?;

    let out = a.out.dir();
    create_dir(&out)?;
    let mut manifest = ManifestBuilder::new("probe", &settings, cfg.source.clone(), None);
    manifest.input(&a.model)?;
    lens_input(&mut manifest, &a.lens)?;
    if let Some(p) = &a.table {
        manifest.input(p)?;
    }

    let json_path = out.join("lens_table.json");
    write_json(&json_path, &lt)?;
    let txt_path = out.join("lens_table.txt");
    let text = lt.to_text();
    std::fs::write(&txt_path, &text).map_err(|e| CliError::io(&txt_path, e))?;
    let svg_path = out.join("entropy.svg");
    let svg = render_heatmap(&lt.entropy_heatmap(&format!("{id} lens entropy"), spec.vocab_size))?;
    std::fs::write(&svg_path, svg).map_err(|e| CliError::io(&svg_path, e))?;
    for p in [json_path, txt_path, svg_path] {
        manifest.output(p);
    }
    manifest.finish(&out)?;

    print!("{text}");
    let last = *lt.final_prediction.last().expect("non-empty sequence");
    let shown = table
        .as_ref()
        .map_or_else(|| last.to_string(), |t| format!("{last} ({})", t.display(last)));
    println!("final prediction: {shown}");
    Ok(lt)
}

/// Paths that `synth` writes under `out`.
#[must_use]
pub fn synth_outputs(out: &Path) -> (PathBuf, PathBuf) {
    (out.join(ACTIVATIONS_FILE), out.join(MODEL_FILE))
}
