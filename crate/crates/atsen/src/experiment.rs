//! Experiment bundle: one human-readable config file drives corpus
//! synthesis, training, ablation sweeps and evaluation, with every
//! sub-seed derived deterministically from a single master seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    distant_annotate, noise_report, synth_corpus, Dataset, NoiseReport, Split, SynthConfig,
    TagVocab, TokenVocab,
};
use crate::distill::WeightMode;
use crate::error::{Error, Result};
use crate::metrics::{entity_prf_tags, EntityMetrics};
use crate::tagger::{self, ParamSet, TaggerConfig};
use crate::trainer::{self, Corpora, RunOutput, TrainerConfig};

/// Mixes a named stream into a base seed (splitmix64 over an FNV-1a tag).
/// Every derived seed is a pure function of `(base, stream)`.
pub fn mix_seed(base: u64, stream: &str) -> u64 {
    let mut tag: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.as_bytes() {
        tag ^= *b as u64;
        tag = tag.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ tag;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Architecture parameters of one tagger; the vocabulary size and init seed
/// are filled in at resolution time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            embed_dim: 16,
            hidden_dim: 32,
            init_scale: 0.3,
        }
    }
}

/// Scalar ensemble parameters; the rng seed is derived at resolution time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleParams {
    pub m: f64,
    pub sigma2: f64,
}

impl Default for EnsembleParams {
    fn default() -> Self {
        EnsembleParams { m: 0.98, sigma2: 0.75 }
    }
}

/// Trainer parameters as written in the config file (seed-free).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerParams {
    pub pretrain_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub selection: crate::selection::SelectionConfig,
    pub distill: crate::distill::DistillConfig,
    pub ensemble: [EnsembleParams; 2],
    pub relabel_granularity: trainer::RelabelGranularity,
    pub use_ce: bool,
    pub use_kd: bool,
}

impl Default for TrainerParams {
    fn default() -> Self {
        let d = TrainerConfig::default();
        TrainerParams {
            pretrain_epochs: d.pretrain_epochs,
            max_epochs: d.max_epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            selection: d.selection,
            distill: d.distill,
            ensemble: [EnsembleParams::default(), EnsembleParams::default()],
            relabel_granularity: d.relabel_granularity,
            use_ce: d.use_ce,
            use_kd: d.use_kd,
        }
    }
}

/// The complete experiment bundle. Round-trips losslessly through TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    /// Where corpus files live (written by `synth`, read by `train`).
    pub data_dir: PathBuf,
    pub synth: SynthConfig,
    pub tagger1: ArchConfig,
    pub tagger2: ArchConfig,
    pub trainer: TrainerParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            master_seed: 0,
            data_dir: PathBuf::from("data"),
            synth: SynthConfig::default(),
            tagger1: ArchConfig::default(),
            tagger2: ArchConfig {
                hidden_dim: 24,
                ..ArchConfig::default()
            },
            trainer: TrainerParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            message: e.to_string(),
        })
    }

    /// Loads a TOML config file, applying dotted-path `--set key=value`
    /// overrides of scalar fields before deserialization.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        if overrides.is_empty() {
            return Self::from_toml(&text);
        }
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            field: "config".into(),
            message: e.to_string(),
        })?;
        let mut value = toml::Value::Table(table);
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        table = match value {
            toml::Value::Table(t) => t,
            _ => unreachable!("document root is a table"),
        };
        let rendered = toml::to_string(&table).map_err(|e| Error::Config {
            field: "config".into(),
            message: e.to_string(),
        })?;
        Self::from_toml(&rendered)
    }

    pub fn derived_seed(&self, stream: &str) -> u64 {
        mix_seed(self.master_seed, stream)
    }

    /// Materializes the component configs, deriving every sub-seed from the
    /// master seed.
    pub fn resolve(&self, token_vocab_size: usize, tag_count: usize) -> ([TaggerConfig; 2], TrainerConfig) {
        let tagger = |arch: &ArchConfig, stream: &str| TaggerConfig {
            token_vocab_size,
            embed_dim: arch.embed_dim,
            hidden_dim: arch.hidden_dim,
            tag_count,
            init_seed: self.derived_seed(stream),
            init_scale: arch.init_scale,
        };
        let taggers = [
            tagger(&self.tagger1, "init/1"),
            tagger(&self.tagger2, "init/2"),
        ];
        let t = &self.trainer;
        let trainer_cfg = TrainerConfig {
            pretrain_epochs: t.pretrain_epochs,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            selection: t.selection.clone(),
            distill: t.distill.clone(),
            ensemble: [
                crate::ensemble::EnsembleConfig {
                    m: t.ensemble[0].m,
                    sigma2: t.ensemble[0].sigma2,
                    rng_seed: self.derived_seed("ensemble/1"),
                },
                crate::ensemble::EnsembleConfig {
                    m: t.ensemble[1].m,
                    sigma2: t.ensemble[1].sigma2,
                    rng_seed: self.derived_seed("ensemble/2"),
                },
            ],
            relabel_granularity: t.relabel_granularity,
            data_seed: self.derived_seed("data"),
            use_ce: t.use_ce,
            use_kd: t.use_kd,
        };
        (taggers, trainer_cfg)
    }
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = root;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .get_mut(part)
            .ok_or_else(|| Error::config(key, "unknown config path"))?;
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| Error::config(key, "path does not end in a table"))?;
    let last = parts[parts.len() - 1];
    // Parse the value as a TOML literal; fall back to a plain string.
    let parsed: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    table.insert(last.to_string(), parsed);
    Ok(())
}

const TRAIN_FILE: &str = "train.jsonl";
const DEV_FILE: &str = "dev.jsonl";
const TEST_FILE: &str = "test.jsonl";
const DICT_FILE: &str = "dictionary.json";
const VOCAB_FILE: &str = "vocab.json";
const RECORD_FILE: &str = "record.json";

/// Sidecar written next to checkpoints so a saved model can be applied to
/// new text: the token vocabulary plus the tag vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelVocab {
    pub token_vocab: TokenVocab,
    pub tag_vocab: TagVocab,
}

/// Synthesizes the corpus, distant-annotates the train split, writes the
/// three split files and the dictionary, and reports the injected noise.
pub fn cmd_synth(cfg: &ExperimentConfig, out_dir: &Path) -> Result<NoiseReport> {
    let corpus = synth_corpus(&cfg.synth, cfg.derived_seed("synth"))?;
    let distant_train = distant_annotate(&corpus.train, &corpus.dictionary)?;
    let report = noise_report(&corpus.train, &distant_train)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(TRAIN_FILE), distant_train.to_jsonl())?;
    fs::write(out_dir.join(DEV_FILE), corpus.dev.to_jsonl())?;
    fs::write(out_dir.join(TEST_FILE), corpus.test.to_jsonl())?;
    fs::write(
        out_dir.join(DICT_FILE),
        serde_json::to_string_pretty(&corpus.dictionary).expect("dictionary serializes"),
    )?;
    Ok(report)
}

/// Loads the three split files under one shared tag vocabulary (the union of
/// the types present, sorted by name).
pub fn load_corpora(dir: &Path) -> Result<Corpora> {
    let train_text = fs::read_to_string(dir.join(TRAIN_FILE))?;
    let dev_text = fs::read_to_string(dir.join(DEV_FILE))?;
    let test_text = fs::read_to_string(dir.join(TEST_FILE))?;
    // Two passes: first learn the union vocabulary, then re-index all splits
    // against it so tag indices agree across files.
    let mut types = std::collections::BTreeSet::new();
    for text in [&train_text, &dev_text, &test_text] {
        let ds = Dataset::from_jsonl(text, None, Split::Train)?;
        for t in ds.vocab.entity_types() {
            types.insert(t.clone());
        }
    }
    let vocab = TagVocab::new(&types.into_iter().collect::<Vec<_>>())?;
    Ok(Corpora {
        train: Dataset::from_jsonl(&train_text, Some(&vocab), Split::Train)?,
        dev: Dataset::from_jsonl(&dev_text, Some(&vocab), Split::Dev)?,
        test: Dataset::from_jsonl(&test_text, Some(&vocab), Split::Test)?,
    })
}

/// Runs the full training pipeline from the files under `cfg.data_dir` and
/// writes the record, the four final checkpoints, the dev-best checkpoint
/// and the vocabulary sidecar into `out_dir`.
pub fn cmd_train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutput> {
    let corpora = load_corpora(&cfg.data_dir)?;
    let token_vocab = TokenVocab::build(&corpora.train);
    let (archs, trainer_cfg) = cfg.resolve(token_vocab.len(), corpora.train.vocab.len());
    let out = trainer::run(&archs, &trainer_cfg, &corpora)?;
    fs::create_dir_all(out_dir)?;
    write_record(&out, cfg, out_dir)?;
    let names = ["teacher1", "student1", "teacher2", "student2"];
    let models = [
        (&out.final_pairs[0].teacher, &out.final_pairs[0].arch),
        (&out.final_pairs[0].student, &out.final_pairs[0].arch),
        (&out.final_pairs[1].teacher, &out.final_pairs[1].arch),
        (&out.final_pairs[1].student, &out.final_pairs[1].arch),
    ];
    for (name, (params, arch)) in names.iter().zip(models) {
        write_checkpoint(params, arch, &out_dir.join(format!("checkpoint_{name}.params")))?;
    }
    write_checkpoint(
        &out.best_params,
        &out.best_arch,
        &out_dir.join("checkpoint_best.params"),
    )?;
    let sidecar = ModelVocab {
        token_vocab: out.token_vocab.clone(),
        tag_vocab: corpora.train.vocab.clone(),
    };
    fs::write(
        out_dir.join(VOCAB_FILE),
        serde_json::to_string(&sidecar).expect("vocab serializes"),
    )?;
    Ok(out)
}

fn write_record(out: &RunOutput, cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct FullRecord<'a> {
        experiment: &'a ExperimentConfig,
        run: &'a trainer::RunRecord,
    }
    let rendered = serde_json::to_string_pretty(&FullRecord {
        experiment: cfg,
        run: &out.record,
    })
    .expect("record serializes");
    fs::write(out_dir.join(RECORD_FILE), rendered)?;
    Ok(())
}

fn write_checkpoint(params: &ParamSet, arch: &TaggerConfig, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    params.write_to(arch, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Loads a checkpoint plus its vocabulary sidecar (searched next to the
/// checkpoint file) and scores it on a gold-tagged dataset file.
pub fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<EntityMetrics> {
    let (params, _arch, vocabs) = load_model(checkpoint)?;
    let text = fs::read_to_string(data)?;
    let dataset = Dataset::from_jsonl(&text, Some(&vocabs.tag_vocab), Split::Test)?;
    let ids: Vec<Vec<usize>> = dataset.sentences.iter().map(|s| vocabs.token_vocab.encode(s)).collect();
    let gold: Vec<Vec<usize>> = dataset
        .sentences
        .iter()
        .map(|s| s.gold_tags.clone().unwrap_or_else(|| s.tags.clone()))
        .collect();
    let mut pred = Vec::with_capacity(ids.len());
    for sentence in &ids {
        pred.push(tagger::predict(&params, sentence)?.0);
    }
    entity_prf_tags(&pred, &gold, &vocabs.tag_vocab)
}

/// Opens a checkpoint and its vocabulary sidecar.
pub fn load_model(checkpoint: &Path) -> Result<(ParamSet, TaggerConfig, ModelVocab)> {
    let bytes = fs::read(checkpoint)?;
    let (arch, params) = ParamSet::read_from(&mut bytes.as_slice())?;
    let vocab_path = checkpoint
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(VOCAB_FILE);
    let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("missing vocabulary sidecar {}: {e}", vocab_path.display()),
        ))
    })?;
    let mut vocabs: ModelVocab = serde_json::from_str(&vocab_text)
        .map_err(|e| Error::Schema(format!("bad vocabulary sidecar: {e}")))?;
    vocabs.token_vocab.rebuild_index();
    Ok((params, arch, vocabs))
}

/// The ablation grid. Each variant is a pure configuration delta applied to
/// a baseline experiment config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Drop the two-teacher agreement filter.
    Cp,
    /// Drop the confidence threshold (sigma1 = 0).
    Tp,
    /// Drop the CE term from the student loss.
    Ce,
    /// Drop adaptive distillation entirely (CE only).
    Ad,
    /// Replace the fine-grained ensemble with a direct teacher copy.
    Fe,
    /// Fixed equal distillation weights instead of adaptive ones.
    AvgKd,
    /// Fixed hand-picked distillation weights (0.7 / 0.3).
    ManualKd,
    /// Drop the segment part of the ensemble (sigma2 = 0, EMA stays).
    Se,
    /// Drop the EMA part of the ensemble (m = 0, segment stays).
    Ema,
    /// Drop both ensemble parts (direct teacher copy).
    AllEnsemble,
}

impl Ablation {
    pub const NAMES: [&'static str; 10] = [
        "cp", "tp", "ce", "ad", "fe", "avg_kd", "manual_kd", "se", "ema", "all_ensemble",
    ];

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "cp" => Ablation::Cp,
            "tp" => Ablation::Tp,
            "ce" => Ablation::Ce,
            "ad" => Ablation::Ad,
            "fe" => Ablation::Fe,
            "avg_kd" => Ablation::AvgKd,
            "manual_kd" => Ablation::ManualKd,
            "se" => Ablation::Se,
            "ema" => Ablation::Ema,
            "all_ensemble" => Ablation::AllEnsemble,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Cp => "cp",
            Ablation::Tp => "tp",
            Ablation::Ce => "ce",
            Ablation::Ad => "ad",
            Ablation::Fe => "fe",
            Ablation::AvgKd => "avg_kd",
            Ablation::ManualKd => "manual_kd",
            Ablation::Se => "se",
            Ablation::Ema => "ema",
            Ablation::AllEnsemble => "all_ensemble",
        }
    }

    /// Applies the delta; everything else (seeds included) stays identical.
    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut out = cfg.clone();
        match self {
            Ablation::Cp => out.trainer.selection.consistency = false,
            Ablation::Tp => out.trainer.selection.sigma1 = 0.0,
            Ablation::Ce => out.trainer.use_ce = false,
            Ablation::Ad => out.trainer.use_kd = false,
            Ablation::Fe | Ablation::AllEnsemble => {
                for e in &mut out.trainer.ensemble {
                    e.m = 0.0;
                    e.sigma2 = 0.0;
                }
            }
            Ablation::AvgKd => out.trainer.distill.weight_mode = WeightMode::Fixed(0.5),
            Ablation::ManualKd => out.trainer.distill.weight_mode = WeightMode::Fixed(0.7),
            Ablation::Se => {
                for e in &mut out.trainer.ensemble {
                    e.sigma2 = 0.0;
                }
            }
            Ablation::Ema => {
                for e in &mut out.trainer.ensemble {
                    e.m = 0.0;
                }
            }
        }
        out
    }
}

/// Side-by-side result of a baseline-vs-ablation pair run under identical
/// seeds and data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: String,
    pub baseline_test: EntityMetrics,
    pub ablated_test: EntityMetrics,
    pub baseline_best: trainer::BestSelection,
    pub ablated_best: trainer::BestSelection,
}

impl AblationReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>9} {:>9} {:>9}\n",
            "configuration", "P", "R", "F1"
        ));
        for (name, m) in [
            ("baseline", &self.baseline_test),
            (self.ablation.as_str(), &self.ablated_test),
        ] {
            out.push_str(&format!(
                "{:<24} {:>9.4} {:>9.4} {:>9.4}\n",
                format!("w/o {name}").replace("w/o baseline", "baseline"),
                m.precision,
                m.recall,
                m.f1
            ));
        }
        out
    }
}

/// Runs the baseline configuration and one ablated configuration on the same
/// corpus under identical seeds, writing both records plus a comparison.
pub fn cmd_ablate(cfg: &ExperimentConfig, name: &str, out_dir: &Path) -> Result<AblationReport> {
    let ablation = Ablation::parse(name).ok_or_else(|| {
        Error::config(
            "name",
            format!("unknown ablation {name:?}; valid: {}", Ablation::NAMES.join(", ")),
        )
    })?;
    let corpora = load_corpora(&cfg.data_dir)?;
    let token_vocab = TokenVocab::build(&corpora.train);

    let run_one = |config: &ExperimentConfig| -> Result<RunOutput> {
        let (archs, trainer_cfg) = config.resolve(token_vocab.len(), corpora.train.vocab.len());
        trainer::run(&archs, &trainer_cfg, &corpora)
    };
    let baseline = run_one(cfg)?;
    let ablated_cfg = ablation.apply(cfg);
    let ablated = run_one(&ablated_cfg)?;

    let report = AblationReport {
        ablation: ablation.name().to_string(),
        baseline_test: baseline.record.test.clone().ok_or_else(|| {
            Error::Input("baseline run incomplete".into())
        })?,
        ablated_test: ablated.record.test.clone().ok_or_else(|| {
            Error::Input("ablated run incomplete".into())
        })?,
        baseline_best: baseline.record.best.clone(),
        ablated_best: ablated.record.best.clone(),
    };
    fs::create_dir_all(out_dir)?;
    #[derive(Serialize)]
    struct Full<'a> {
        report: &'a AblationReport,
        baseline_record: &'a trainer::RunRecord,
        ablated_record: &'a trainer::RunRecord,
        baseline_config: &'a ExperimentConfig,
        ablated_config: &'a ExperimentConfig,
    }
    fs::write(
        out_dir.join(format!("ablation_{}.json", ablation.name())),
        serde_json::to_string_pretty(&Full {
            report: &report,
            baseline_record: &baseline.record,
            ablated_record: &ablated.record,
            baseline_config: cfg,
            ablated_config: &ablated_cfg,
        })
        .expect("report serializes"),
    )?;
    Ok(report)
}
