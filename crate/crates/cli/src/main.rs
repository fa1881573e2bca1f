//! `kbvqa`: command line driver. Every subcommand reads one TOML run config
//! (or synthetic defaults when `--config` is absent), applies flag
//! overrides, writes its artifacts under the output directory and records a
//! `manifest.json` there.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use kbvqa_core::explain::{
    explain_example, perturbation_test, write_explanations, ExplainMethod, ExplanationRecord,
};
use kbvqa_core::harness::*;
use kbvqa_core::injector::write_debug_dump;
use kbvqa_core::model::{load_checkpoint, save_checkpoint, Model};
use kbvqa_core::spans::{write_spanset, LinkMode, SpanMethod};

#[derive(Parser)]
#[command(
    name = "kbvqa",
    version,
    about = "Entity knowledge injection and explainability experiments for VQA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the entity-to-wordpiece alignment and write `alignment.txt`.
    Align(Opts),
    /// Build the span set and write `spans.jsonl` and `span_stats.json`.
    Spans(Opts),
    /// Tokenize every record with entity injection into `injected.jsonl`.
    Inject(Opts),
    /// Train injected (and baseline) models into `checkpoint/`.
    Train(Opts),
    /// Evaluate trained checkpoints on the test split and write reports.
    Eval(Opts),
    /// Explain the injected model's test predictions into `explanations.jsonl`.
    Explain(Opts),
    /// Mask the most relevant tokens and record accuracy into `perturbation.json`.
    Perturb(Opts),
    /// Run the whole pipeline: train, evaluate, explain, perturb, gate, report.
    Report(Opts),
    /// Write the synthetic benchmark and a config that points at it.
    Synth(Opts),
}

#[derive(Args, Clone)]
struct Opts {
    /// TOML run config; synthetic defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run with this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Span method: nerper, neragro, meta, ok13k, ok4k or ok2_5k.
    #[arg(long)]
    method: Option<SpanMethod>,
    /// Link mode: as_is, links or noisy.
    #[arg(long = "link-mode")]
    link_mode: Option<LinkMode>,
    /// Explainer for `explain` and `perturb`: bmgae, trf or random.
    #[arg(long)]
    explainer: Option<ExplainMethod>,
    /// Report format (md, csv or json); repeat for several.
    #[arg(long)]
    format: Vec<ReportFormat>,
}

impl Opts {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::synthetic(SynthConfig::default(), vec![0], "out"),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(m) = self.method {
            cfg.spans.method = m;
        }
        if let Some(l) = self.link_mode {
            cfg.spans.link_mode = l;
        }
        if !self.format.is_empty() {
            cfg.eval.formats = self.format.clone();
        }
        cfg.validate()?;
        fs::create_dir_all(&cfg.out_dir)
            .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        Ok(cfg)
    }
}

/// Collects output hashes and writes the manifest at the end.
struct Outputs<'a> {
    cfg: &'a RunConfig,
    hashes: IndexMap<String, String>,
}

impl<'a> Outputs<'a> {
    fn new(cfg: &'a RunConfig) -> Self {
        Self {
            cfg,
            hashes: IndexMap::new(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        self.hashes
            .insert(name.to_string(), sha256_file(&self.path(name))?);
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.record(name)
    }

    fn json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(
            name,
            (serde_json::to_string_pretty(value)? + "\n").as_bytes(),
        )
    }

    fn finish(self, inputs: IndexMap<String, String>, transport_failures: usize) -> Result<()> {
        let path = Manifest::new(self.cfg, inputs, self.hashes, transport_failures)
            .write(&self.cfg.out_dir)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn checkpoint_name(injected: bool, seed: u64) -> String {
    format!(
        "checkpoint/{}-seed{seed}.json",
        if injected { "injected" } else { "baseline" }
    )
}

fn load_model(cfg: &RunConfig, data: &PreparedData, injected: bool, seed: u64) -> Result<Model> {
    let path = cfg.out_dir.join(checkpoint_name(injected, seed));
    let (model, vocab) = load_checkpoint(&path)
        .with_context(|| format!("loading {} (run `kbvqa train` first)", path.display()))?;
    if vocab.answers() != data.vocab.answers() {
        bail!(
            "{}: answer vocabulary does not match the configured data",
            path.display()
        );
    }
    Ok(model)
}

fn align(cfg: &RunConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    let mut out = Outputs::new(cfg);
    data.alignment.save(out.path("alignment.txt"))?;
    out.record("alignment.txt")?;
    let fit = &data.alignment.fit_info;
    println!(
        "alignment {}x{} from {} shared words, residual {:.6e}, rank {:?}",
        data.alignment.target_dim(),
        data.alignment.source_dim(),
        fit.num_shared_keys,
        fit.sum_squared_residual,
        fit.effective_rank
    );
    out.finish(data.input_hashes, data.transport_failures)
}

fn spans(cfg: &RunConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    let mut out = Outputs::new(cfg);
    let mut buf = Vec::new();
    write_spanset(&data.spanset, &mut buf)?;
    out.write("spans.jsonl", &buf)?;
    out.json("span_stats.json", &data.span_stats)?;
    let s = &data.span_stats;
    println!(
        "{} {}: ents per Q {:.3}, eberts per Q {:.3}, Qs w/ eberts {:.3}, transport failures {}",
        cfg.spans.method,
        cfg.spans.link_mode,
        s.ents_per_q,
        s.eberts_per_q,
        s.frac_q_with_eberts,
        data.transport_failures
    );
    out.finish(data.input_hashes, data.transport_failures)
}

fn inject(cfg: &RunConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    let mut out = Outputs::new(cfg);
    let mut buf = Vec::new();
    let (mut groups, mut truncated) = (0, 0);
    for (r, e) in data.records.iter().zip(&data.injected) {
        write_debug_dump(&e.seq, Some(&r.id), &mut buf)?;
        groups += e.seq.injected;
        truncated += usize::from(e.seq.truncated);
    }
    out.write("injected.jsonl", &buf)?;
    println!(
        "{} records, {groups} entity groups, {truncated} truncated",
        data.records.len()
    );
    out.finish(data.input_hashes, data.transport_failures)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    let mut out = Outputs::new(cfg);
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let variants: &[bool] = if cfg.injector.baseline {
            &[true, false]
        } else {
            &[true]
        };
        for &injected in variants {
            let (model, summary) = train_model(cfg, &data, injected, seed)?;
            let name = checkpoint_name(injected, seed);
            fs::create_dir_all(out.path("checkpoint"))?;
            save_checkpoint(&model, &data.vocab, out.path(&name))?;
            out.record(&name)?;
            println!(
                "{} seed {seed}: loss {:.4}, train accuracy {:.3}",
                summary.label, summary.final_loss, summary.final_train_accuracy
            );
            summaries.push(summary);
        }
    }
    out.json("training.json", &summaries)?;
    out.finish(data.input_hashes, data.transport_failures)
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    let mut out = Outputs::new(cfg);
    let (test, holdout) = (
        cfg.eval.test_split.as_str(),
        cfg.eval.holdout_split.as_str(),
    );
    let mut runs = Vec::new();
    let mut gating = Vec::new();
    for &seed in &cfg.seeds {
        let inj = load_model(cfg, &data, true, seed)?;
        let (report, inj_test) =
            evaluate_split(cfg, &data, &inj, true, seed, test, cfg.eval.explainers)?;
        runs.push(report);
        if !cfg.injector.baseline {
            continue;
        }
        let base = load_model(cfg, &data, false, seed)?;
        let (report, base_test) = evaluate_split(cfg, &data, &base, false, seed, test, false)?;
        runs.push(report);
        if !data.split(holdout).is_empty() {
            let (_, inj_hold) = evaluate_split(cfg, &data, &inj, true, seed, holdout, false)?;
            let (_, base_hold) = evaluate_split(cfg, &data, &base, false, seed, holdout, false)?;
            let pair = |b: Vec<Prediction>, i: Vec<Prediction>| -> Vec<GatedInput> {
                b.into_iter()
                    .zip(i)
                    .map(|(baseline, injected)| GatedInput { baseline, injected })
                    .collect()
            };
            let g =
                confidence_gated_injection(&pair(base_hold, inj_hold), &pair(base_test, inj_test))?;
            gating.push(GatingSummary::new(seed, &g));
        }
    }
    let mut aggregates = IndexMap::new();
    for (label, injected) in [("baseline", false), ("injected", true)] {
        let group: Vec<EvalReport> = runs
            .iter()
            .filter(|r| r.metadata.injected == injected)
            .cloned()
            .collect();
        if !group.is_empty() {
            aggregates.insert(label.to_string(), aggregate_runs(&group)?);
        }
    }
    let summary = RunSummary {
        span_method: cfg.spans.method.to_string(),
        link_mode: cfg.spans.link_mode.to_string(),
        runs,
        aggregates,
        gating,
        perturbation: Vec::new(),
        training: Vec::new(),
    };
    for &format in &cfg.eval.formats {
        let path = emit_report(&summary, format, &cfg.out_dir)?;
        out.record(&path.file_name().unwrap_or_default().to_string_lossy())?;
    }
    for r in &summary.runs {
        println!(
            "{} seed {}: accuracy {:.4}",
            r.metadata.label, r.metadata.seed, r.overall_accuracy
        );
    }
    out.finish(data.input_hashes, data.transport_failures)
}

fn explain(cfg: &RunConfig, method: ExplainMethod) -> Result<()> {
    let data = prepare_data(cfg)?;
    let mut out = Outputs::new(cfg);
    let test = cfg.eval.test_split.as_str();
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let model = load_model(cfg, &data, true, seed)?;
        for &i in data.split(test) {
            let e = &data.injected[i];
            let ex = explain_example(&model, &e.seq, &e.vis, method, seed, i as u64)?;
            records.push(ExplanationRecord::new(
                &data.records[i].id,
                &ex,
                cfg.eval.top_k,
            ));
        }
    }
    let mut buf = Vec::new();
    write_explanations(&records, &mut buf)?;
    out.write("explanations.jsonl", &buf)?;
    println!("{} explanations ({method})", records.len());
    out.finish(data.input_hashes, data.transport_failures)
}

fn perturb(cfg: &RunConfig, method: ExplainMethod) -> Result<()> {
    let data = prepare_data(cfg)?;
    let mut out = Outputs::new(cfg);
    let examples = data.examples(true, &cfg.eval.test_split);
    let fractions = &cfg.eval.perturbation_fractions;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let model = load_model(cfg, &data, true, seed)?;
        let controls: Vec<Option<u64>> = if method == ExplainMethod::Random {
            cfg.eval
                .perturbation_seeds
                .iter()
                .map(|&s| Some(s))
                .collect()
        } else {
            vec![None]
        };
        for control in controls {
            let points = perturbation_test(
                &model,
                &examples,
                method,
                fractions,
                &data.unknown_embedding,
                control.unwrap_or(seed),
            )?;
            for p in points {
                rows.push(PerturbationRow {
                    seed,
                    method,
                    control_seed: control,
                    fraction: p.fraction,
                    accuracy: p.accuracy,
                });
            }
        }
    }
    out.json("perturbation.json", &rows)?;
    let mut stdout = std::io::stdout().lock();
    for r in &rows {
        writeln!(
            stdout,
            "{} seed {} f={:.2}: accuracy {:.4}",
            r.method, r.seed, r.fraction, r.accuracy
        )?;
    }
    out.finish(data.input_hashes, data.transport_failures)
}

fn report(cfg: &RunConfig) -> Result<()> {
    let out = run_pipeline(cfg)?;
    for (label, metrics) in &out.summary.aggregates {
        if let Some(a) = metrics.get("overall_accuracy") {
            println!(
                "{label}: accuracy mean {:.4} std {:.4} over {} runs",
                a.mean, a.std, a.n
            );
        }
    }
    println!("wrote {}", cfg.out_dir.join("manifest.json").display());
    Ok(())
}

/// Writes the benchmark files plus `config.toml`, a run config over them.
fn synth(opts: &Opts) -> Result<()> {
    let cfg = opts.config()?;
    let synth = cfg.synthetic.clone().unwrap_or_default();
    let bench = generate_synthetic_dataset(&synth)?;
    let dir = &cfg.out_dir;
    let paths = bench.write(dir)?;
    let relative = |p: &Path| PathBuf::from(p.file_name().expect("file path"));
    let mut run = cfg.clone();
    run.synthetic = None;
    run.data = Some(DataSection {
        dataset: relative(&paths.dataset),
        wiki_embeddings: relative(&paths.wiki_embeddings),
        wordpiece_embeddings: relative(&paths.wordpiece_embeddings),
        region_index: relative(&paths.region_index),
        region_bin: relative(&paths.region_bin),
        gazetteer: None,
        resolver_stub: None,
        okvqa_rules: None,
        okvqa_exclusions: None,
    });
    run.out_dir = PathBuf::from("run");
    let mut out = Outputs::new(&cfg);
    out.write("config.toml", run.to_toml()?.as_bytes())?;
    for p in [
        &paths.dataset,
        &paths.wiki_embeddings,
        &paths.wordpiece_embeddings,
        &paths.region_index,
        &paths.region_bin,
    ] {
        out.record(&relative(p).to_string_lossy())?;
    }
    let mut inputs = IndexMap::new();
    inputs.insert("synthetic".to_string(), bench.checksum()?);
    println!(
        "{} records written to {}",
        bench.records.len(),
        dir.display()
    );
    out.finish(inputs, 0)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let explainer = |o: &Opts| o.explainer.unwrap_or(ExplainMethod::Bmgae);
    match &cli.command {
        Command::Align(o) => align(&o.config()?),
        Command::Spans(o) => spans(&o.config()?),
        Command::Inject(o) => inject(&o.config()?),
        Command::Train(o) => train(&o.config()?),
        Command::Eval(o) => eval(&o.config()?),
        Command::Explain(o) => explain(&o.config()?, explainer(o)),
        Command::Perturb(o) => perturb(&o.config()?, explainer(o)),
        Command::Report(o) => report(&o.config()?),
        Command::Synth(o) => synth(o),
    }
}
