//! End-to-end runs driven by a TOML [`RunConfig`].

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{load_dataset, split_indices};
use super::metrics::{
    aggregate_runs, confidence_gated_injection, evaluate, EvalItem, EvalOptions, EvalReport,
    GatedInput, RunMetadata,
};
use super::report::{
    emit_report, GatingSummary, PerturbationRow, ReportFormat, RunSummary, TrainingSummary,
};
use super::scoring::{normalize_answer, ScoreMode};
use super::synth::{generate_synthetic_dataset, SynthConfig};
use super::HarnessError;
use crate::embeddings::{
    learn_alignment, shared_vocabulary, AlignmentMap, EmbeddingTable, NamespacePolicy,
};
use crate::explain::{
    explain_example, perturbation_test, write_explanations, ExplainMethod, ExplanationRecord,
};
use crate::injector::{inject, tokenize_baseline, WordpieceTokenizer};
use crate::model::{
    finetune, init_model, save_checkpoint, AnswerVocab, Model, ModelConfig, RegionStore,
    TrainConfig, TrainingExample,
};
use crate::spans::{
    build_spanset, compose_text, compute_span_stats, load_exclusion_list, Gazetteer, GazetteerNer,
    LexiconChunker, LinkMode, OkvqaRules, QuestionRecord, SpanContext, SpanMethod, SpanSet,
    SpanStats, StubResolver, Taggers,
};

/// Files of an on-disk dataset. Relative paths are resolved against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: PathBuf,
    pub wiki_embeddings: PathBuf,
    pub wordpiece_embeddings: PathBuf,
    pub region_index: PathBuf,
    pub region_bin: PathBuf,
    /// `name<TAB>LABEL` gazetteer for the NER tagger.
    #[serde(default)]
    pub gazetteer: Option<PathBuf>,
    /// Resolver answers in cache-record JSONL.
    #[serde(default)]
    pub resolver_stub: Option<PathBuf>,
    #[serde(default)]
    pub okvqa_rules: Option<PathBuf>,
    #[serde(default)]
    pub okvqa_exclusions: Option<PathBuf>,
}

impl DataSection {
    fn paths_mut(&mut self) -> Vec<&mut PathBuf> {
        let mut v = vec![
            &mut self.dataset,
            &mut self.wiki_embeddings,
            &mut self.wordpiece_embeddings,
            &mut self.region_index,
            &mut self.region_bin,
        ];
        v.extend(
            [
                &mut self.gazetteer,
                &mut self.resolver_stub,
                &mut self.okvqa_rules,
                &mut self.okvqa_exclusions,
            ]
            .into_iter()
            .flatten(),
        );
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanSection {
    pub method: SpanMethod,
    pub link_mode: LinkMode,
}

impl Default for SpanSection {
    fn default() -> Self {
        Self {
            method: SpanMethod::Meta,
            link_mode: LinkMode::AsIs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectorSection {
    pub max_len: usize,
    /// Also train a no-injection model per seed (needed for gating).
    pub baseline: bool,
}

impl Default for InjectorSection {
    fn default() -> Self {
        Self {
            max_len: 24,
            baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub lang_layers: usize,
    pub vis_layers: usize,
    pub cross_layers: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            num_heads: 2,
            lang_layers: 1,
            vis_layers: 1,
            cross_layers: 1,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub score_mode: ScoreMode,
    pub normalize: bool,
    pub explainers: bool,
    pub perturbation_fractions: Vec<f64>,
    /// Seeds of the RANDOM control ranking.
    pub perturbation_seeds: Vec<u64>,
    pub train_split: String,
    pub holdout_split: String,
    pub test_split: String,
    /// Tokens per record in the explanation dump.
    pub top_k: usize,
    pub formats: Vec<ReportFormat>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            score_mode: ScoreMode::Exact,
            normalize: true,
            explainers: true,
            perturbation_fractions: vec![0.0, 0.25, 0.5, 1.0],
            perturbation_seeds: vec![0, 1, 2, 3, 4],
            train_split: "train".into(),
            holdout_split: "holdout".into(),
            test_split: "test".into(),
            top_k: 5,
            formats: ReportFormat::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub synthetic: Option<SynthConfig>,
    #[serde(default)]
    pub spans: SpanSection,
    #[serde(default)]
    pub injector: InjectorSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// A synthetic-benchmark run with default settings.
    pub fn synthetic(synth: SynthConfig, seeds: Vec<u64>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            data: None,
            synthetic: Some(synth),
            spans: SpanSection::default(),
            injector: InjectorSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            seeds,
            out_dir: out_dir.into(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Parses a config file; relative data paths and `out_dir` are taken
    /// relative to the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(data) = cfg.data.as_mut() {
            for p in data.paths_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => return bad("set either [data] or [synthetic], not both"),
            (None, None) => return bad("one of [data] or [synthetic] is required"),
            (Some(d), None) => {
                let mut d = d.clone();
                if let Some(missing) = d.paths_mut().into_iter().find(|p| !p.exists()) {
                    return Err(HarnessError::Config(format!(
                        "missing input {}",
                        missing.display()
                    )));
                }
            }
            (None, Some(s)) => s.validate()?,
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self
            .eval
            .perturbation_fractions
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
        {
            return bad("perturbation fractions must lie in [0, 1]");
        }
        if self.eval.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        Ok(())
    }
}

/// Everything a run needs before training: records, tables, the span set
/// and model inputs per split with and without injection.
pub struct PreparedData {
    pub records: Vec<QuestionRecord>,
    pub wiki: EmbeddingTable,
    pub wordpieces: EmbeddingTable,
    pub regions: RegionStore,
    pub alignment: AlignmentMap,
    pub spanset: SpanSet,
    pub span_stats: SpanStats,
    pub transport_failures: usize,
    pub vocab: AnswerVocab,
    /// Record indices per split.
    pub splits: IndexMap<String, Vec<usize>>,
    /// Per record, aligned with `records`.
    pub baseline: Vec<TrainingExample>,
    pub injected: Vec<TrainingExample>,
    pub unknown_embedding: Vec<f64>,
    /// SHA-256 of each input, by name.
    pub input_hashes: IndexMap<String, String>,
}

impl PreparedData {
    pub fn split(&self, name: &str) -> &[usize] {
        self.splits.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn examples(&self, injected: bool, split: &str) -> Vec<TrainingExample> {
        let source = if injected {
            &self.injected
        } else {
            &self.baseline
        };
        self.split(split)
            .iter()
            .map(|&i| source[i].clone())
            .collect()
    }

    pub fn num_regions(&self) -> usize {
        self.baseline.first().map_or(0, |e| e.vis.num_regions())
    }
}

fn answer_key(text: &str, normalize: bool) -> String {
    if normalize {
        normalize_answer(text)
    } else {
        text.to_string()
    }
}

/// Loads or synthesizes data, fits the alignment, builds spans, the answer
/// vocabulary (from the training split) and tokenized inputs.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData, HarnessError> {
    cfg.validate()?;
    let mut input_hashes = IndexMap::new();
    let mut taggers = Taggers::default();
    let mut resolver = StubResolver::new([]);
    let mut rules = OkvqaRules::default();
    let mut exclusions: Option<HashSet<String>> = None;
    let (records, wiki, wordpieces, regions) = match (&cfg.data, &cfg.synthetic) {
        (None, Some(s)) => {
            let bench = generate_synthetic_dataset(s)?;
            input_hashes.insert("synthetic".to_string(), bench.checksum()?);
            (bench.records, bench.wiki, bench.wordpieces, bench.regions)
        }
        (Some(d), _) => {
            for (name, p) in [
                ("dataset", &d.dataset),
                ("wiki_embeddings", &d.wiki_embeddings),
                ("wordpiece_embeddings", &d.wordpiece_embeddings),
                ("region_index", &d.region_index),
                ("region_bin", &d.region_bin),
            ] {
                input_hashes.insert(name.to_string(), sha256_file(p)?);
            }
            if let Some(g) = &d.gazetteer {
                input_hashes.insert("gazetteer".into(), sha256_file(g)?);
                taggers = Taggers::new(
                    GazetteerNer::new(Gazetteer::load(g)?),
                    LexiconChunker::default(),
                );
            }
            if let Some(r) = &d.resolver_stub {
                input_hashes.insert("resolver_stub".into(), sha256_file(r)?);
                resolver =
                    StubResolver::load(r).map_err(|e| HarnessError::Config(e.to_string()))?;
            }
            if let Some(r) = &d.okvqa_rules {
                input_hashes.insert("okvqa_rules".into(), sha256_file(r)?);
                rules = OkvqaRules::load(r)?;
            }
            if let Some(x) = &d.okvqa_exclusions {
                input_hashes.insert("okvqa_exclusions".into(), sha256_file(x)?);
                exclusions = Some(load_exclusion_list(x)?);
            }
            (
                load_dataset(&d.dataset)?,
                EmbeddingTable::load(&d.wiki_embeddings, NamespacePolicy::words())?,
                EmbeddingTable::load(&d.wordpiece_embeddings, NamespacePolicy::wordpieces())?,
                RegionStore::load(&d.region_index, &d.region_bin)?,
            )
        }
        (None, None) => unreachable!("validated"),
    };

    let alignment = learn_alignment(&wiki, &wordpieces, &shared_vocabulary(&wiki, &wordpieces)?)?;
    let ctx = SpanContext {
        taggers: &taggers,
        resolver: &resolver,
        entity_table: &wiki,
        okvqa_rules: &rules,
        exclusions: exclusions.as_ref(),
    };
    let build = build_spanset(&records, cfg.spans.method, cfg.spans.link_mode, &ctx)?;
    let span_stats = compute_span_stats(&build.spanset, &wiki, records.len())?;

    let splits = split_indices(&records);
    let normalize = cfg.eval.normalize;
    let train_idx = splits
        .get(&cfg.eval.train_split)
        .cloned()
        .unwrap_or_default();
    let vocab = AnswerVocab::from_answers(train_idx.iter().flat_map(|&i| {
        records[i]
            .answers
            .iter()
            .map(|a| answer_key(&a.text, normalize))
    }));
    if vocab.is_empty() {
        return Err(HarnessError::Config(format!(
            "split `{}` has no answers to build a vocabulary from",
            cfg.eval.train_split
        )));
    }

    let max_len = cfg.injector.max_len;
    let mut baseline = Vec::with_capacity(records.len());
    let mut injected = Vec::with_capacity(records.len());
    for r in &records {
        let vis = regions.get(&r.image_ref).ok_or_else(|| {
            HarnessError::Config(format!(
                "record `{}`: no regions for `{}`",
                r.id, r.image_ref
            ))
        })?;
        let mut answers: Vec<(usize, f64)> = Vec::new();
        for a in &r.answers {
            if let Some(i) = vocab.index_of(&answer_key(&a.text, normalize)) {
                match answers.iter_mut().find(|(j, _)| *j == i) {
                    Some(slot) => slot.1 += a.weight,
                    None => answers.push((i, a.weight)),
                }
            }
        }
        let text = match build.spanset.composed_text(&r.id) {
            Some(t) => t.to_string(),
            None => compose_text(r)?,
        };
        let spans = build.spanset.spans(&r.id);
        baseline.push(TrainingExample {
            seq: tokenize_baseline(&text, &wordpieces, max_len)?,
            vis: vis.clone(),
            answers: answers.clone(),
        });
        injected.push(TrainingExample {
            seq: inject(&text, spans, &alignment, &wiki, &wordpieces, max_len)?,
            vis,
            answers,
        });
    }
    let unknown_embedding = WordpieceTokenizer::new(&wordpieces)?
        .unknown_embedding()
        .to_vec();
    Ok(PreparedData {
        records,
        wiki,
        wordpieces,
        regions,
        alignment,
        spanset: build.spanset,
        span_stats,
        transport_failures: build.transport_failures,
        vocab,
        splits,
        baseline,
        injected,
        unknown_embedding,
        input_hashes,
    })
}

pub fn model_config(cfg: &RunConfig, data: &PreparedData, seed: u64) -> ModelConfig {
    ModelConfig {
        hidden_dim: cfg.model.hidden_dim,
        num_heads: cfg.model.num_heads,
        lang_layers: cfg.model.lang_layers,
        vis_layers: cfg.model.vis_layers,
        cross_layers: cfg.model.cross_layers,
        answer_vocab_size: data.vocab.len(),
        max_text_len: cfg.injector.max_len,
        num_regions: data.num_regions(),
        region_feat_dim: data.regions.feat_dim(),
        dropout: cfg.model.dropout,
        seed,
        input_dim: data.wordpieces.dim(),
    }
}

/// A freshly initialized model trained on the training split.
pub fn train_model(
    cfg: &RunConfig,
    data: &PreparedData,
    injected: bool,
    seed: u64,
) -> Result<(Model, TrainingSummary), HarnessError> {
    let mut model = init_model(&model_config(cfg, data, seed))?;
    let train = data.examples(injected, &cfg.eval.train_split);
    let metrics = finetune(&mut model, &train, &[], &cfg.train)?;
    let last = metrics.last();
    let summary = TrainingSummary {
        label: label(injected).to_string(),
        seed,
        epochs: metrics.epochs.len(),
        final_loss: last.map_or(0.0, |m| m.loss),
        final_train_accuracy: last.map_or(0.0, |m| m.train_accuracy),
        model_checksum: model.checksum(),
    };
    Ok((model, summary))
}

fn label(injected: bool) -> &'static str {
    if injected {
        "injected"
    } else {
        "baseline"
    }
}

/// Evaluates `model` on one split using the injected or baseline inputs.
pub fn evaluate_split(
    cfg: &RunConfig,
    data: &PreparedData,
    model: &Model,
    injected: bool,
    seed: u64,
    split: &str,
    explainers: bool,
) -> Result<(EvalReport, Vec<super::metrics::Prediction>), HarnessError> {
    let source = if injected {
        &data.injected
    } else {
        &data.baseline
    };
    let items: Vec<EvalItem> = data
        .split(split)
        .iter()
        .map(|&i| EvalItem {
            record: &data.records[i],
            example: &source[i],
        })
        .collect();
    let opts = EvalOptions {
        score_mode: cfg.eval.score_mode,
        normalize: cfg.eval.normalize,
        explainers,
        seed,
    };
    let meta = RunMetadata {
        label: label(injected).to_string(),
        span_method: cfg.spans.method.as_str().to_string(),
        link_mode: cfg.spans.link_mode.as_str().to_string(),
        injected,
        seed,
        split: split.to_string(),
        score_mode: cfg.eval.score_mode,
        num_questions: items.len(),
        model_checksum: model.checksum(),
    };
    evaluate(model, &data.vocab, &items, data.span_stats, &opts, meta)
}

/// Config, seeds and content hashes of inputs and outputs of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub inputs: IndexMap<String, String>,
    pub outputs: IndexMap<String, String>,
    pub transport_failures: usize,
}

impl Manifest {
    pub fn new(
        cfg: &RunConfig,
        inputs: IndexMap<String, String>,
        outputs: IndexMap<String, String>,
        transport_failures: usize,
    ) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            seeds: cfg.seeds.clone(),
            inputs,
            outputs,
            transport_failures,
        }
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, HarnessError> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

/// SHA-256 of a file, hex encoded.
pub fn sha256_file(path: &Path) -> Result<String, HarnessError> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub struct PipelineOutput {
    pub summary: RunSummary,
    pub manifest: Manifest,
    pub data: PreparedData,
    /// Injected model per seed, in seed order.
    pub injected_models: Vec<Model>,
    pub baseline_models: Vec<Model>,
}

/// Runs everything for every seed and writes `report.*`,
/// `explanations.jsonl`, `checkpoint/` and `manifest.json` under `out_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput, HarnessError> {
    let data = prepare_data(cfg)?;
    log::info!(
        "{} records, vocabulary {}, splits {:?}",
        data.records.len(),
        data.vocab.len(),
        data.splits
            .iter()
            .map(|(k, v)| (k.as_str(), v.len()))
            .collect::<Vec<_>>()
    );
    if data.split(&cfg.eval.test_split).is_empty() {
        return Err(HarnessError::EmptyEvalSplit);
    }
    let out = &cfg.out_dir;
    fs::create_dir_all(out.join("checkpoint"))?;
    let mut outputs = IndexMap::new();

    let mut runs = Vec::new();
    let mut training = Vec::new();
    let mut gating = Vec::new();
    let mut perturbation = Vec::new();
    let mut injected_models = Vec::new();
    let mut baseline_models = Vec::new();
    let mut explanation_records = Vec::new();
    let test = cfg.eval.test_split.as_str();
    let holdout = cfg.eval.holdout_split.as_str();
    let test_examples = data.examples(true, test);

    for &seed in &cfg.seeds {
        log::info!("seed {seed}: training injected model");
        let (model, summary) = train_model(cfg, &data, true, seed)?;
        training.push(summary);
        let (report, test_preds) =
            evaluate_split(cfg, &data, &model, true, seed, test, cfg.eval.explainers)?;
        runs.push(report);

        if seed == cfg.seeds[0] && cfg.eval.explainers {
            for method in [ExplainMethod::Bmgae, ExplainMethod::Trf] {
                for (&i, e) in data.split(test).iter().zip(&test_examples) {
                    let ex = explain_example(&model, &e.seq, &e.vis, method, seed, i as u64)?;
                    explanation_records.push(ExplanationRecord::new(
                        &data.records[i].id,
                        &ex,
                        cfg.eval.top_k,
                    ));
                }
            }
        }

        if !cfg.eval.perturbation_fractions.is_empty() {
            let fr = &cfg.eval.perturbation_fractions;
            for method in [ExplainMethod::Bmgae, ExplainMethod::Trf] {
                for p in perturbation_test(
                    &model,
                    &test_examples,
                    method,
                    fr,
                    &data.unknown_embedding,
                    seed,
                )? {
                    perturbation.push(PerturbationRow {
                        seed,
                        method,
                        control_seed: None,
                        fraction: p.fraction,
                        accuracy: p.accuracy,
                    });
                }
            }
            for &control in &cfg.eval.perturbation_seeds {
                let points = perturbation_test(
                    &model,
                    &test_examples,
                    ExplainMethod::Random,
                    fr,
                    &data.unknown_embedding,
                    control,
                )?;
                for p in points {
                    perturbation.push(PerturbationRow {
                        seed,
                        method: ExplainMethod::Random,
                        control_seed: Some(control),
                        fraction: p.fraction,
                        accuracy: p.accuracy,
                    });
                }
            }
        }

        let ckpt = out
            .join("checkpoint")
            .join(format!("injected-seed{seed}.json"));
        save_checkpoint(&model, &data.vocab, &ckpt)?;
        outputs.insert(
            format!("checkpoint/injected-seed{seed}.json"),
            sha256_file(&ckpt)?,
        );

        if cfg.injector.baseline {
            log::info!("seed {seed}: training baseline model");
            let (base, summary) = train_model(cfg, &data, false, seed)?;
            training.push(summary);
            let (report, base_test) = evaluate_split(cfg, &data, &base, false, seed, test, false)?;
            runs.push(report);
            if !data.split(holdout).is_empty() {
                let (_, inj_hold) = evaluate_split(cfg, &data, &model, true, seed, holdout, false)?;
                let (_, base_hold) =
                    evaluate_split(cfg, &data, &base, false, seed, holdout, false)?;
                let pair = |b: Vec<_>, i: Vec<_>| -> Vec<GatedInput> {
                    b.into_iter()
                        .zip(i)
                        .map(|(baseline, injected)| GatedInput { baseline, injected })
                        .collect()
                };
                let g = confidence_gated_injection(
                    &pair(base_hold, inj_hold),
                    &pair(base_test, test_preds),
                )?;
                gating.push(GatingSummary::new(seed, &g));
            }
            let ckpt = out
                .join("checkpoint")
                .join(format!("baseline-seed{seed}.json"));
            save_checkpoint(&base, &data.vocab, &ckpt)?;
            outputs.insert(
                format!("checkpoint/baseline-seed{seed}.json"),
                sha256_file(&ckpt)?,
            );
            baseline_models.push(base);
        }
        injected_models.push(model);
    }

    let mut aggregates = IndexMap::new();
    for injected in [false, true] {
        let group: Vec<EvalReport> = runs
            .iter()
            .filter(|r| r.metadata.injected == injected)
            .cloned()
            .collect();
        if !group.is_empty() {
            aggregates.insert(label(injected).to_string(), aggregate_runs(&group)?);
        }
    }
    let summary = RunSummary {
        span_method: cfg.spans.method.as_str().to_string(),
        link_mode: cfg.spans.link_mode.as_str().to_string(),
        runs,
        aggregates,
        gating,
        perturbation,
        training,
    };

    let expl_path = out.join("explanations.jsonl");
    let mut buf = Vec::new();
    write_explanations(&explanation_records, &mut buf)?;
    fs::write(&expl_path, &buf)?;
    outputs.insert(
        "explanations.jsonl".into(),
        hex::encode(Sha256::digest(&buf)),
    );
    for &format in &cfg.eval.formats {
        let path = emit_report(&summary, format, out)?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        outputs.insert(name, sha256_file(&path)?);
    }
    let manifest = Manifest::new(
        cfg,
        data.input_hashes.clone(),
        outputs,
        data.transport_failures,
    );
    manifest.write(out)?;
    Ok(PipelineOutput {
        summary,
        manifest,
        data,
        injected_models,
        baseline_models,
    })
}
