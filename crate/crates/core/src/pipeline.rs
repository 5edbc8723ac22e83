//! End-to-end experiment driver.
//!
//! Every stage writes its artifacts under one output directory and records a
//! SHA-256 digest of its inputs next to the digests of its outputs in
//! `.stages/<stage>.json`. A stage whose inputs and outputs still match its
//! record is skipped; anything else is rebuilt. A stage refuses to overwrite
//! a file it did not produce itself unless `force` is set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    build_importance_vectors, hcluster, length_ratio_report, similarity_matrix, target_jaccard_contrast, Dendrogram,
    Distance, ExpertSet, LengthRatioReport, Linkage,
};
use crate::checkpoint;
use crate::config::{ModelConfig, Side};
use crate::corpus::{self, CorpusSample, DataConfig, LanguageSpec, ParallelLine, SplitSizes};
use crate::decode::translate_corpus;
use crate::error::{Error, Result};
use crate::eval::{corpus_eval, score_directions, DirectionOutput, EvalReport, MaskPlan, MemorySpec};
use crate::mask::PruningMask;
use crate::model::MoEModel;
use crate::pruning::{
    compute_metric, prune, prune_random, Algorithm, Budget, MetricKind, Split, DEFAULT_MIN_PER_LAYER,
};
use crate::stats::{
    aggregate_by_granularity, keyed_to_per_direction, parse_stats, per_direction_to_keyed, stats_for_direction,
    write_stats, DirectionStats, GateRecorder, Granularity, PerDirection,
};
use crate::train::{train, TrainConfig};

/// Model hyperparameters; the vocabulary size follows from the languages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub moe_frequency: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub beam_size: usize,
    pub label_smoothing: f64,
    pub lb_loss_coeff: f64,
    pub max_positions: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::toy(0);
        Self {
            d_model: c.d_model,
            d_ffn: c.d_ffn,
            n_heads: c.n_heads,
            enc_layers: c.enc_layers,
            dec_layers: c.dec_layers,
            moe_frequency: c.moe_frequency,
            num_experts: c.num_experts,
            top_k: c.top_k,
            beam_size: c.beam_size,
            label_smoothing: c.label_smoothing,
            lb_loss_coeff: c.lb_loss_coeff,
            max_positions: c.max_positions,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            n_heads: self.n_heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            moe_frequency: self.moe_frequency,
            num_experts: self.num_experts,
            top_k: self.top_k,
            beam_size: self.beam_size,
            label_smoothing: self.label_smoothing,
            lb_loss_coeff: self.lb_loss_coeff,
            max_positions: self.max_positions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub content_vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let d = DataConfig::toy();
        Self {
            content_vocab: d.content_vocab,
            min_len: d.min_len,
            max_len: d.max_len,
        }
    }
}

/// Artifact locations, relative to the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub stats: PathBuf,
    pub masks: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoint: "model".into(),
            stats: "stats".into(),
            masks: "masks".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub linkage: String,
    pub distance: String,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            linkage: "average".into(),
            distance: "euclidean".into(),
        }
    }
}

/// Everything a pipeline run depends on. Stored as TOML; see
/// `configs/toy.toml` for the documented schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSection,
    pub sizes: SplitSizes,
    pub languages: Vec<LanguageSpec>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

impl PipelineConfig {
    /// Four languages, 32 experts, trained in a couple of minutes.
    pub fn toy() -> Self {
        let data = DataConfig::toy();
        Self {
            seed: 7,
            corpus: CorpusSection::default(),
            sizes: data.sizes,
            languages: data.languages,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
            analysis: AnalysisSection::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::parse("config", line, e.message())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.sizes;
        if s.train == 0 || s.valid == 0 || s.test == 0 {
            return Err(Error::Invalid("corpus sizes must all be positive".into()));
        }
        if self.languages.len() < 2 {
            return Err(Error::Invalid("at least two languages are needed".into()));
        }
        self.data_config().validate()?;
        self.model_config().validate()?;
        Linkage::parse(&self.analysis.linkage)?;
        Distance::parse(&self.analysis.distance)?;
        Ok(())
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            languages: self.languages.clone(),
            content_vocab: self.corpus.content_vocab,
            min_len: self.corpus.min_len,
            max_len: self.corpus.max_len,
            sizes: self.sizes,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.to_config(self.data_config().vocab().len())
    }

    fn group_of(&self, lang: &str) -> Option<String> {
        self.languages.iter().find(|l| l.code == lang).map(|l| l.group.clone())
    }

    /// Evaluation bucket of a direction: `<source group>-<target group>`.
    pub fn direction_group(&self, src: &str, tgt: &str) -> String {
        let g = |l: &str| self.group_of(l).unwrap_or_else(|| "unknown".into());
        format!("{}-{}", g(src), g(tgt))
    }
}

/// How experts are scored before pruning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scoring {
    Metric(MetricKind),
    /// Uniformly random experts; ignores statistics, algorithm and granularity.
    Random {
        seed: u64,
    },
}

/// One pruning configuration: scoring × algorithm × granularity × rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneSpec {
    pub scoring: Scoring,
    pub algorithm: Algorithm,
    pub granularity: Granularity,
    pub rate: f64,
    pub split: Split,
    pub min_per_layer: usize,
}

impl PruneSpec {
    /// Fixed per-layer pruning with per-direction statistics and a balanced split.
    pub fn new(metric: MetricKind, rate: f64) -> Self {
        Self {
            scoring: Scoring::Metric(metric),
            algorithm: Algorithm::FixedPerLayer,
            granularity: Granularity::LangPair,
            rate,
            split: Split::Balanced,
            min_per_layer: DEFAULT_MIN_PER_LAYER,
        }
    }

    pub fn random(seed: u64, rate: f64) -> Self {
        Self {
            scoring: Scoring::Random { seed },
            ..Self::new(MetricKind::Importance, rate)
        }
    }

    /// Directory-safe name, unique per distinct spec.
    pub fn label(&self) -> String {
        let head = match self.scoring {
            Scoring::Metric(m) => format!("{}_{}_{}", m.as_str(), self.algorithm, self.granularity),
            Scoring::Random { seed } => format!("random-seed{seed}"),
        };
        let raw = format!("{head}_rate{}_{}_min{}", self.rate, self.split, self.min_per_layer);
        raw.chars()
            .filter(|&c| c != '=')
            .map(|c| {
                if c.is_ascii_alphanumeric() || "._-".contains(c) {
                    c
                } else {
                    '-'
                }
            })
            .collect()
    }
}

/// Results of the analysis stage.
#[derive(Clone, Debug)]
pub struct AnalysisSummary {
    /// Mean encoder Jaccard over direction pairs sharing / not sharing the source.
    pub encoder_same_source: f64,
    pub encoder_diff_source: f64,
    /// Mean decoder Jaccard over direction pairs sharing / not sharing the target.
    pub decoder_same_target: f64,
    pub decoder_diff_target: f64,
    /// Jaccard of the encoder sets of `a→b` and `a→c` for every such pair.
    pub encoder_shared_source_jaccards: Vec<f64>,
    pub encoder_tree: Dendrogram,
    pub decoder_tree: Dendrogram,
    pub length_ratio: LengthRatioReport,
}

#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub baseline: EvalReport,
    pub pruned: EvalReport,
    pub analysis: AnalysisSummary,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StageRecord {
    inputs: String,
    outputs: BTreeMap<String, String>,
}

pub const UNPRUNED_LABEL: &str = "unpruned";
const HYPOTHESES_HEADER: &str = "src\ttgt\thypothesis\treference";
const MASK_INDEX_HEADER: &str = "src\ttgt\tmask";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

/// Lines grouped by direction, directions in first-seen order.
fn by_direction(lines: &[ParallelLine]) -> Vec<((String, String), Vec<&ParallelLine>)> {
    let mut out: Vec<((String, String), Vec<&ParallelLine>)> = Vec::new();
    for l in lines {
        let key = (l.src_lang.clone(), l.tgt_lang.clone());
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(l),
            None => out.push((key, vec![l])),
        }
    }
    out
}

fn hypotheses_to_text(outputs: &[DirectionOutput]) -> String {
    let mut out = format!("{HYPOTHESES_HEADER}\n");
    for o in outputs {
        for (h, r) in o.hypotheses.iter().zip(&o.references) {
            writeln!(out, "{}\t{}\t{h}\t{r}", o.src, o.tgt).unwrap();
        }
    }
    out
}

fn parse_hypotheses(text: &str) -> Result<Vec<DirectionOutput>> {
    let mut lines = text.lines();
    if lines.next() != Some(HYPOTHESES_HEADER) {
        return Err(Error::parse("hypotheses", 1, "unexpected header"));
    }
    let mut outputs: Vec<DirectionOutput> = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(
                "hypotheses",
                i + 2,
                format!("expected 4 fields, found {}", f.len()),
            ));
        }
        let same = outputs.last().is_some_and(|o| o.src == f[0] && o.tgt == f[1]);
        if !same {
            outputs.push(DirectionOutput {
                src: f[0].into(),
                tgt: f[1].into(),
                hypotheses: vec![],
                references: vec![],
            });
        }
        let o = outputs.last_mut().expect("just pushed");
        o.hypotheses.push(f[2].into());
        o.references.push(f[3].into());
    }
    Ok(outputs)
}

fn mask_file_name(key: &str) -> String {
    let stem: String = key
        .chars()
        .map(|c| match c {
            ':' | ',' => '.',
            '=' => '-',
            c => c,
        })
        .collect();
    format!("{stem}.mask")
}

/// Drives the stages for one configuration and output directory.
pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
    force: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            out: out.into(),
            force: false,
        })
    }

    /// Overwrite files that no earlier run of the same stage produced.
    pub fn with_force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn at(&self, rel: &Path) -> PathBuf {
        self.out.join(rel)
    }

    pub fn data_path(&self, split: &str) -> PathBuf {
        self.at(&self.config.paths.data).join(format!("{split}.tsv"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.at(&self.config.paths.checkpoint).join("model.ckpt")
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.at(&self.config.paths.checkpoint).join("train_log.tsv")
    }

    pub fn stats_path(&self) -> PathBuf {
        self.at(&self.config.paths.stats).join("valid.stats.tsv")
    }

    pub fn valid_hypotheses_path(&self) -> PathBuf {
        self.at(&self.config.paths.stats).join("valid.hypotheses.tsv")
    }

    pub fn mask_dir(&self, spec: &PruneSpec) -> PathBuf {
        self.at(&self.config.paths.masks).join(spec.label())
    }

    pub fn report_dir(&self, label: &str) -> PathBuf {
        self.at(&self.config.paths.reports).join(label)
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn input_digest(&self, stage: &str, fingerprint: &str, inputs: &[PathBuf]) -> Result<String> {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update([0]);
        h.update(fingerprint.as_bytes());
        for p in inputs {
            let bytes = read(p)?;
            h.update([0]);
            h.update(self.rel(p).as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Runs `build` unless the recorded outputs of `stage` are present,
    /// unmodified and were produced from identical inputs. `declared` are the
    /// outputs known up front; `build` returns everything it wrote.
    fn stage(
        &self,
        stage: &str,
        fingerprint: &str,
        inputs: &[PathBuf],
        declared: &[PathBuf],
        build: impl FnOnce() -> Result<Vec<PathBuf>>,
    ) -> Result<()> {
        let wrap = |e: Error| Error::Stage {
            stage: stage.into(),
            source: Box::new(e),
        };
        let digest = self.input_digest(stage, fingerprint, inputs).map_err(wrap)?;
        let record_path = self.out.join(".stages").join(format!("{stage}.json"));
        let record: Option<StageRecord> = std::fs::read(&record_path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        let current = |rel: &str| std::fs::read(self.out.join(rel)).ok().map(|b| sha256_hex(&b));
        if let Some(r) = &record {
            let intact = !r.outputs.is_empty() && r.outputs.iter().all(|(p, h)| current(p).as_ref() == Some(h));
            if r.inputs == digest && intact {
                log::info!("{stage}: up to date");
                return Ok(());
            }
        }
        if !self.force {
            for p in declared {
                let rel = self.rel(p);
                if let Some(h) = current(&rel) {
                    let ours = record.as_ref().and_then(|r| r.outputs.get(&rel)) == Some(&h);
                    if !ours {
                        return Err(wrap(Error::Exists { path: p.clone() }));
                    }
                }
            }
        }
        log::info!("{stage}: running");
        let written = build().map_err(wrap)?;
        let mut outputs = BTreeMap::new();
        for p in &written {
            outputs.insert(self.rel(p), sha256_hex(&read(p).map_err(wrap)?));
        }
        let record = StageRecord {
            inputs: digest,
            outputs,
        };
        write(&record_path, json(&record)).map_err(wrap)
    }

    /// Generates the train, valid and test corpora.
    pub fn gen_data(&self) -> Result<()> {
        let outputs: Vec<PathBuf> = ["train", "valid", "test"].iter().map(|s| self.data_path(s)).collect();
        let data = self.config.data_config();
        let fingerprint = json(&(&data, self.config.seed));
        self.stage("gen-data", &fingerprint, &[], &outputs, || {
            let c = corpus::generate(&data, self.config.seed)?;
            for (path, lines) in outputs.iter().zip([&c.train, &c.valid, &c.test]) {
                write(path, corpus::to_tsv(lines))?;
            }
            Ok(outputs.clone())
        })
    }

    pub fn read_split(&self, split: &str) -> Result<Vec<ParallelLine>> {
        corpus::read_tsv(&self.data_path(split))
    }

    /// Trains the model and returns it as saved.
    pub fn train(&self) -> Result<MoEModel> {
        self.gen_data()?;
        let inputs = vec![self.data_path("train"), self.data_path("valid")];
        let outputs = vec![self.checkpoint_path(), self.train_log_path()];
        let fingerprint = json(&(&self.config.model, &self.config.train, self.config.seed));
        self.stage("train", &fingerprint, &inputs, &outputs, || {
            let vocab = self.config.data_config().vocab();
            let train_set = corpus::tokenize(&self.read_split("train")?, &vocab)?;
            let valid_set = corpus::tokenize(&self.read_split("valid")?, &vocab)?;
            let mut model = MoEModel::new(self.config.model_config(), vocab, self.config.seed.wrapping_add(1))?;
            let start = std::time::Instant::now();
            let logs = train(
                &mut model,
                &train_set,
                &valid_set,
                &self.config.train,
                self.config.seed.wrapping_add(2),
            )?;
            let mut log = String::from("epoch\ttask_loss\tlb_loss\tvalid_accuracy\n");
            for l in &logs {
                writeln!(
                    log,
                    "{}\t{:.6}\t{:.6}\t{:.6}",
                    l.epoch, l.mean_task_loss, l.mean_lb_loss, l.valid_accuracy
                )
                .unwrap();
            }
            log::info!("trained {} epochs in {:.1}s", logs.len(), start.elapsed().as_secs_f64());
            write(&outputs[0], checkpoint::to_bytes(&model))?;
            write(&outputs[1], log)?;
            Ok(outputs.clone())
        })?;
        checkpoint::load(&self.checkpoint_path()).map_err(|e| Error::Stage {
            stage: "train".into(),
            source: Box::new(e),
        })
    }

    /// Final validation accuracy recorded by the training stage.
    pub fn trained_accuracy(&self) -> Result<f64> {
        let path = self.train_log_path();
        let text = read_text(&path)?;
        let last = text
            .lines()
            .skip(1)
            .last()
            .ok_or_else(|| Error::parse("train log", 1, "no epochs"))?;
        last.split('\t')
            .nth(3)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse("train log", text.lines().count(), "bad accuracy field"))
    }

    /// Decodes the valid split without a mask and records routing
    /// statistics per direction.
    pub fn collect_stats(&self) -> Result<PerDirection> {
        let model = self.train()?;
        let inputs = vec![self.checkpoint_path(), self.data_path("valid")];
        let outputs = vec![self.stats_path(), self.valid_hypotheses_path()];
        self.stage("decode", "", &inputs, &outputs, || {
            let valid = self.read_split("valid")?;
            let mut per_direction = PerDirection::new();
            let mut decoded = Vec::new();
            for ((src, tgt), lines) in by_direction(&valid) {
                let samples: Vec<CorpusSample> = lines
                    .iter()
                    .map(|l| CorpusSample::from_line(l, &model.vocab))
                    .collect::<Result<_>>()?;
                let translations = translate_corpus(&model, &samples, None, model.config.beam_size, true)?;
                let mut stats = DirectionStats::new(&model.config);
                for t in &translations {
                    for (side, d) in &t.routing {
                        stats.record(*side, d)?;
                    }
                }
                per_direction.insert((src.clone(), tgt.clone()), stats);
                decoded.push(DirectionOutput {
                    hypotheses: translations.iter().map(|t| model.vocab.decode_ids(&t.words)).collect(),
                    references: lines.iter().map(|l| l.tgt_text.clone()).collect(),
                    src,
                    tgt,
                });
            }
            write(&outputs[0], write_stats(&per_direction_to_keyed(&per_direction)))?;
            write(&outputs[1], hypotheses_to_text(&decoded))?;
            Ok(outputs.clone())
        })?;
        self.read_stats()
    }

    fn read_stats(&self) -> Result<PerDirection> {
        keyed_to_per_direction(&parse_stats(&read_text(&self.stats_path())?)?)
    }

    /// Masks for every direction under `spec`, computed in memory.
    pub fn build_masks(
        &self,
        per_direction: &PerDirection,
        spec: &PruneSpec,
    ) -> Result<BTreeMap<(String, String), PruningMask>> {
        let config = self.config.model_config();
        let directions = self.config.data_config().directions();
        let budget = Budget::from_rate(&config, spec.rate, spec.split, spec.min_per_layer)?;
        let mut out = BTreeMap::new();
        match spec.scoring {
            Scoring::Random { seed } => {
                let mask = prune_random(&config, &budget, seed)?;
                for d in directions {
                    out.insert(d, mask.clone());
                }
            }
            Scoring::Metric(kind) => {
                let keyed = aggregate_by_granularity(per_direction, &directions, spec.granularity)?;
                let mut by_key: BTreeMap<String, PruningMask> = BTreeMap::new();
                for (src, tgt) in directions {
                    let (key, stats) = stats_for_direction(&keyed, spec.granularity, &src, &tgt)?;
                    if !by_key.contains_key(&key) {
                        let table = compute_metric(&stats.finalize(&key)?, kind, &key);
                        by_key.insert(key.clone(), prune(&table, spec.algorithm, &budget, &config)?);
                    }
                    out.insert((src, tgt), by_key[&key].clone());
                }
            }
        }
        Ok(out)
    }

    /// Writes one mask file per distinct mask plus an index mapping each
    /// direction to its file.
    pub fn prune(&self, spec: &PruneSpec) -> Result<BTreeMap<(String, String), PruningMask>> {
        let per_direction = self.collect_stats()?;
        let dir = self.mask_dir(spec);
        let index = dir.join("index.tsv");
        let stage = format!("prune-{}", spec.label());
        let fingerprint = json(&(format!("{spec:?}"), &self.config.model));
        self.stage(
            &stage,
            &fingerprint,
            &[self.stats_path()],
            std::slice::from_ref(&index),
            || {
                let masks = self.build_masks(&per_direction, spec)?;
                let mut written = Vec::new();
                let mut index_text = format!("{MASK_INDEX_HEADER}\n");
                for ((src, tgt), mask) in &masks {
                    let file = mask_file_name(&mask.key);
                    let path = dir.join(&file);
                    if !written.contains(&path) {
                        write(&path, mask.to_text())?;
                        written.push(path);
                    }
                    writeln!(index_text, "{src}\t{tgt}\t{file}").unwrap();
                }
                write(&index, index_text)?;
                written.push(index.clone());
                Ok(written)
            },
        )?;
        self.read_masks(spec).map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }

    fn mask_files(&self, spec: &PruneSpec) -> Result<Vec<(String, String, PathBuf)>> {
        let dir = self.mask_dir(spec);
        let text = read_text(&dir.join("index.tsv"))?;
        let mut lines = text.lines();
        if lines.next() != Some(MASK_INDEX_HEADER) {
            return Err(Error::parse("mask index", 1, "unexpected header"));
        }
        lines
            .enumerate()
            .map(|(i, l)| match l.split('\t').collect::<Vec<_>>()[..] {
                [s, t, f] => Ok((s.to_string(), t.to_string(), dir.join(f))),
                _ => Err(Error::parse("mask index", i + 2, "expected 3 fields")),
            })
            .collect()
    }

    fn read_masks(&self, spec: &PruneSpec) -> Result<BTreeMap<(String, String), PruningMask>> {
        let config = self.config.model_config();
        let mut out = BTreeMap::new();
        for (s, t, path) in self.mask_files(spec)? {
            let mask = PruningMask::parse(&read_text(&path)?)?;
            mask.validate(&config)?;
            out.insert((s, t), mask);
        }
        Ok(out)
    }

    /// Decodes the test split, with the masks of `spec` or unpruned, and
    /// scores it.
    pub fn evaluate(&self, spec: Option<&PruneSpec>) -> Result<EvalReport> {
        let model = self.train()?;
        let mut inputs = vec![self.checkpoint_path(), self.data_path("test")];
        let (label, plan) = match spec {
            None => (UNPRUNED_LABEL.to_string(), MaskPlan::Unpruned),
            Some(s) => {
                let masks = self.prune(s)?;
                inputs.push(self.mask_dir(s).join("index.tsv"));
                inputs.extend(self.mask_files(s)?.into_iter().map(|(_, _, p)| p));
                (s.label(), MaskPlan::PerDirection(masks))
            }
        };
        let dir = self.report_dir(&label);
        let outputs = vec![dir.join("eval.tsv"), dir.join("hypotheses.tsv")];
        let group_of = |s: &str, t: &str| self.config.direction_group(s, t);
        self.stage(&format!("eval-{label}"), "", &inputs, &outputs, || {
            let test = self.read_split("test")?;
            let (report, decoded) = corpus_eval(&model, &plan, &test, &group_of)?;
            write(&outputs[0], report.to_text())?;
            write(&outputs[1], hypotheses_to_text(&decoded))?;
            Ok(outputs.clone())
        })?;
        let decoded = parse_hypotheses(&read_text(&outputs[1])?)?;
        score_directions(&decoded, &group_of)
    }

    /// Expert-set overlap, language dendrograms and length ratios for `spec`.
    /// Jaccard overlaps always use per-direction masks built with the
    /// scoring, algorithm and rate of `spec`.
    pub fn analyze(&self, spec: &PruneSpec) -> Result<AnalysisSummary> {
        self.evaluate(Some(spec))?;
        let per_direction = self.read_stats()?;
        let label = spec.label();
        let hyp_path = self.report_dir(&label).join("hypotheses.tsv");
        let stage = format!("analyze-{label}");
        let summary = self
            .analysis_summary(&per_direction, spec, &read_text(&hyp_path)?)
            .map_err(|e| Error::Stage {
                stage: stage.clone(),
                source: Box::new(e),
            })?;
        let dir = self.report_dir(&label).join("analysis");
        let names = [
            "encoder_jaccard.tsv",
            "decoder_jaccard.tsv",
            "jaccard_summary.tsv",
            "encoder.nwk",
            "decoder.nwk",
            "encoder.svg",
            "decoder.svg",
            "length_ratio.tsv",
        ];
        let outputs: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
        let fingerprint = json(&(format!("{spec:?}"), &self.config.analysis, &self.config.languages));
        let inputs = vec![self.stats_path(), hyp_path];
        self.stage(&stage, &fingerprint, &inputs, &outputs, || {
            let masks = self.build_masks(&per_direction, &PruneSpec {
                granularity: Granularity::LangPair,
                ..*spec
            })?;
            let labelled = |side: Side| -> Vec<(String, ExpertSet)> {
                masks
                    .iter()
                    .map(|((s, t), m)| (format!("{s}-{t}"), ExpertSet::from_mask(m, side)))
                    .collect()
            };
            let group = |leaf: &str| self.config.group_of(leaf);
            let contents = [
                similarity_matrix(&labelled(Side::Encoder))?,
                similarity_matrix(&labelled(Side::Decoder))?,
                format!(
                    "side\tshared\tsame_mean\tdifferent_mean\nencoder\tsource\t{:.6}\t{:.6}\ndecoder\ttarget\t{:.6}\t{:.6}\n",
                    summary.encoder_same_source,
                    summary.encoder_diff_source,
                    summary.decoder_same_target,
                    summary.decoder_diff_target
                ),
                format!("{}\n", summary.encoder_tree.to_newick()),
                format!("{}\n", summary.decoder_tree.to_newick()),
                summary.encoder_tree.to_svg(&group),
                summary.decoder_tree.to_svg(&group),
                summary.length_ratio.to_text(),
            ];
            for (p, c) in outputs.iter().zip(contents) {
                write(p, c)?;
            }
            Ok(outputs.clone())
        })?;
        Ok(summary)
    }

    fn analysis_summary(
        &self,
        per_direction: &PerDirection,
        spec: &PruneSpec,
        hypotheses: &str,
    ) -> Result<AnalysisSummary> {
        let lang_pair = PruneSpec {
            granularity: Granularity::LangPair,
            ..*spec
        };
        let masks = self.build_masks(per_direction, &lang_pair)?;
        let sets = |side: Side, swap: bool| -> Vec<((String, String), ExpertSet)> {
            masks
                .iter()
                .map(|((s, t), m)| {
                    let key = if swap {
                        (t.clone(), s.clone())
                    } else {
                        (s.clone(), t.clone())
                    };
                    (key, ExpertSet::from_mask(m, side))
                })
                .collect()
        };
        // Grouping by "target" of the swapped pairs groups by source.
        let (encoder_same_source, encoder_diff_source) = target_jaccard_contrast(&sets(Side::Encoder, true))?;
        let (decoder_same_target, decoder_diff_target) = target_jaccard_contrast(&sets(Side::Decoder, false))?;
        let mut encoder_shared_source_jaccards = Vec::new();
        for ((s1, t1), m1) in &masks {
            for ((s2, t2), m2) in &masks {
                if s1 == s2 && t1 < t2 {
                    encoder_shared_source_jaccards.push(crate::analysis::jaccard(
                        &ExpertSet::from_mask(m1, Side::Encoder),
                        &ExpertSet::from_mask(m2, Side::Encoder),
                    )?);
                }
            }
        }

        let languages: Vec<String> = self.config.languages.iter().map(|l| l.code.clone()).collect();
        let directions = self.config.data_config().directions();
        let keyed = aggregate_by_granularity(per_direction, &directions, Granularity::LangSpecific)?;
        let linkage = Linkage::parse(&self.config.analysis.linkage)?;
        let distance = Distance::parse(&self.config.analysis.distance)?;
        let tree = |side: Side| -> Result<Dendrogram> {
            let items: Vec<(String, Vec<f64>)> = build_importance_vectors(&keyed, side, &languages)?
                .into_iter()
                .map(|v| (v.language, v.values))
                .collect();
            hcluster(&items, linkage, distance)
        };

        let decoded = parse_hypotheses(hypotheses)?;
        let ratio_input: Vec<(String, Vec<&str>, Vec<&str>)> = decoded
            .iter()
            .map(|o| {
                (
                    format!("{}-{}", o.src, o.tgt),
                    o.hypotheses.iter().map(|s| s.as_str()).collect(),
                    o.references.iter().map(|s| s.as_str()).collect(),
                )
            })
            .collect();
        Ok(AnalysisSummary {
            encoder_same_source,
            encoder_diff_source,
            decoder_same_target,
            decoder_diff_target,
            encoder_shared_source_jaccards,
            encoder_tree: tree(Side::Encoder)?,
            decoder_tree: tree(Side::Decoder)?,
            length_ratio: length_ratio_report(&ratio_input)?,
        })
    }

    /// Train, collect statistics on valid, prune, evaluate unpruned and
    /// pruned on test, analyze.
    pub fn run(&self, spec: &PruneSpec) -> Result<PipelineReport> {
        let baseline = self.evaluate(None)?;
        let pruned = self.evaluate(Some(spec))?;
        let analysis = self.analyze(spec)?;
        let summary = format!(
            "label\tchrf_pp\n{UNPRUNED_LABEL}\t{:.4}\n{}\t{:.4}\n",
            baseline.mean_chrf(),
            spec.label(),
            pruned.mean_chrf()
        );
        write(&self.report_dir(&spec.label()).join("summary.tsv"), summary)?;
        Ok(PipelineReport {
            baseline,
            pruned,
            analysis,
        })
    }
}

/// Memory of the 54.5B-parameter model: dense part only, all experts, and
/// the experts kept by fixed per-layer pruning at `rate` with `split`.
pub fn memory_report(rate: f64, split: Split, min_per_layer: usize) -> Result<String> {
    let spec = MemorySpec::nllb_moe();
    let config = ModelConfig::nllb_moe();
    let q = Budget::from_rate(&config, rate, split, min_per_layer)?.quotas(&config)?;
    let kept =
        q.encoder * config.moe_layers_on(Side::Encoder).len() + q.decoder * config.moe_layers_on(Side::Decoder).len();
    let pruned = spec.bytes_with(kept as u64)?;
    let mut out = String::from("model\tretained_experts\tparams\tbytes\tgib\n");
    let mut row = |name: &str, params: u64, retained: u64, bytes: u64| {
        writeln!(
            out,
            "{name}\t{retained}\t{params}\t{bytes}\t{:.2}",
            bytes as f64 / crate::eval::GIB
        )
        .unwrap();
    };
    let dense = MemorySpec::dense(3_300_000_000);
    row("dense-3.3B", dense.total_params(), 0, dense.bytes_with(0)?);
    row(
        "moe-54.5B",
        spec.total_params(),
        spec.num_experts_total,
        spec.bytes_with(spec.num_experts_total)?,
    );
    row(
        "experts-only",
        spec.num_experts_total * spec.expert_params_each,
        spec.num_experts_total,
        spec.num_experts_total * spec.expert_params_each * spec.bytes_per_param,
    );
    let label = format!("pruned-{rate}-{split}");
    row(
        &label,
        spec.dense_params + kept as u64 * spec.expert_params_each,
        kept as u64,
        pruned,
    );
    Ok(out)
}
