//! Training orchestration: pretraining on distant labels, the alternating
//! self-training loop (teacher prediction -> reliable-label selection ->
//! student gradient step -> fine-grained teacher update -> mutual label
//! update), and best-of-four model selection on the dev split.
//!
//! Everything is seeded and single-threaded; two runs with the same
//! configuration produce bitwise-identical records and checkpoints.

use serde::{Deserialize, Serialize};

use crate::corpus::{epoch_permutation, Dataset, TagVocab, TokenVocab};
use crate::distill::{self, DistillConfig, WeightMode};
use crate::ensemble::{fine_grained_update, EnsembleConfig, EnsembleRng};
use crate::error::{Error, Result};
use crate::metrics::{entity_prf_tags, EntityMetrics};
use crate::selection::{select_reliable, select_single, ReliableLabels, SelectionConfig};
use crate::tagger::{self, CeTerm, KdTerm, LossSpec, ParamSet, TaggerConfig};

/// One teacher-student pair; both share a fragment layout.
#[derive(Debug, Clone)]
pub struct TeacherStudentPair {
    pub teacher: ParamSet,
    pub student: ParamSet,
    pub arch: TaggerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelGranularity {
    /// Re-label the full corpus after every batch (faithful but quadratic).
    PerBatch,
    /// Re-label once per epoch (the default).
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub pretrain_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub selection: SelectionConfig,
    pub distill: DistillConfig,
    pub ensemble: [EnsembleConfig; 2],
    pub relabel_granularity: RelabelGranularity,
    pub data_seed: u64,
    /// Supervise students with CE on reliable labels.
    pub use_ce: bool,
    /// Distill students from both teachers.
    pub use_kd: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            pretrain_epochs: 6,
            max_epochs: 10,
            batch_size: 32,
            learning_rate: 1.5,
            selection: SelectionConfig {
                sigma1: 0.5,
                mask_policy: crate::selection::MaskPolicy::Exclude,
                consistency: true,
            },
            distill: DistillConfig::default(),
            ensemble: [
                EnsembleConfig { m: 0.98, sigma2: 0.75, rng_seed: 0 },
                EnsembleConfig { m: 0.98, sigma2: 0.75, rng_seed: 1 },
            ],
            relabel_granularity: RelabelGranularity::PerEpoch,
            data_seed: 0,
            use_ce: true,
            use_kd: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_epochs == 0 {
            return Err(Error::config("pretrain_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        self.selection.validate()?;
        self.distill.validate()?;
        for e in &self.ensemble {
            e.validate()?;
        }
        Ok(())
    }
}

/// The two full-corpus working label assignments of the self-training loop,
/// one per pair, initialized from the distant labels and overwritten
/// crosswise by the opposite pair's teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelState {
    pub y_one: Vec<Vec<usize>>,
    pub y_two: Vec<Vec<usize>>,
}

impl LabelState {
    pub fn from_distant(tags: &[Vec<usize>]) -> Self {
        LabelState {
            y_one: tags.to_vec(),
            y_two: tags.to_vec(),
        }
    }
}

/// Per-batch log of the self-training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Distillation weight on teacher 1, per pair (None when KD is off).
    pub alpha: [Option<f64>; 2],
    pub total_loss: [f64; 2],
    pub ce_loss: [f64; 2],
    /// KD loss per pair and teacher.
    pub kd_loss: [[f64; 2]; 2],
    /// CE-supervised token count per pair.
    pub supervised_tokens: [usize; 2],
    /// Tokens carrying a non-"O" reliable label, per pair.
    pub entity_tokens: [usize; 2],
    pub total_tokens: usize,
}

/// Epoch-level aggregate of the step logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    pub mean_alpha: [Option<f64>; 2],
    pub mean_total_loss: [f64; 2],
    pub mean_ce_loss: [f64; 2],
    pub mean_kd_loss: [[f64; 2]; 2],
    pub supervised_token_rate: [f64; 2],
}

impl TrainStats {
    fn from_steps(steps: &[StepLog]) -> Option<Self> {
        if steps.is_empty() {
            return None;
        }
        let n = steps.len() as f64;
        let mut out = TrainStats {
            steps: steps.len(),
            mean_alpha: [None, None],
            mean_total_loss: [0.0; 2],
            mean_ce_loss: [0.0; 2],
            mean_kd_loss: [[0.0; 2]; 2],
            supervised_token_rate: [0.0; 2],
        };
        let mut total_tokens = 0usize;
        let mut supervised = [0usize; 2];
        for s in steps {
            for p in 0..2 {
                if let Some(a) = s.alpha[p] {
                    *out.mean_alpha[p].get_or_insert(0.0) += a / n;
                }
                out.mean_total_loss[p] += s.total_loss[p] / n;
                out.mean_ce_loss[p] += s.ce_loss[p] / n;
                out.mean_kd_loss[p][0] += s.kd_loss[p][0] / n;
                out.mean_kd_loss[p][1] += s.kd_loss[p][1] / n;
                supervised[p] += s.supervised_tokens[p];
            }
            total_tokens += s.total_tokens;
        }
        if total_tokens > 0 {
            for p in 0..2 {
                out.supervised_token_rate[p] = supervised[p] as f64 / total_tokens as f64;
            }
        }
        Some(out)
    }
}

/// Dev-set evaluation of one model at one point in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub model: String,
    pub metrics: EntityMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the post-pretraining evaluation; 1..=max_epochs follow.
    pub epoch: usize,
    pub dev: Vec<ModelEval>,
    pub stats: Option<TrainStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSelection {
    pub model: String,
    pub epoch: usize,
    pub dev_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedEcho {
    pub data_seed: u64,
    pub init_seeds: [u64; 2],
    pub ensemble_seeds: [u64; 2],
}

/// Complete, serializable record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tagger_configs: [TaggerConfig; 2],
    pub trainer_config: TrainerConfig,
    pub seeds: SeedEcho,
    pub epochs: Vec<EpochRecord>,
    pub best: BestSelection,
    pub test: Option<EntityMetrics>,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The three splits a run consumes: distant-labeled train, gold dev, gold
/// test, all sharing one tag vocabulary.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl Corpora {
    pub fn validate(&self) -> Result<()> {
        if self.train.vocab != self.dev.vocab || self.train.vocab != self.test.vocab {
            return Err(Error::Schema("splits use different tag vocabularies".into()));
        }
        Ok(())
    }
}

struct Encoded {
    ids: Vec<Vec<usize>>,
    tags: Vec<Vec<usize>>,
}

fn encode(dataset: &Dataset, vocab: &TokenVocab) -> Encoded {
    Encoded {
        ids: dataset.sentences.iter().map(|s| vocab.encode(s)).collect(),
        tags: dataset.sentences.iter().map(|s| s.tags.clone()).collect(),
    }
}

/// Mean CE gradient descent step over one batch; returns the mean loss.
fn gd_step(
    params: &mut ParamSet,
    ids: &[Vec<usize>],
    tags: &[Vec<usize>],
    batch: &[usize],
    lr: f64,
) -> Result<f64> {
    let mut acc = params.zeros_like();
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &i in batch {
        let mask = vec![true; ids[i].len()];
        let spec = LossSpec {
            ce: Some(CeTerm {
                tags: &tags[i],
                mask: &mask,
                weight: 1.0,
            }),
            kd: vec![],
        };
        let (l, g) = tagger::loss_and_grad(params, &ids[i], &spec)?;
        loss += l * inv_b;
        acc.add_scaled(&g, inv_b)?;
    }
    params.add_scaled(&acc, -lr)?;
    Ok(loss)
}

/// Pretrains both models on the distant labels by minibatch gradient
/// descent, then duplicates each into its teacher.
pub fn pretrain(
    pair_configs: &[TaggerConfig; 2],
    distant: &Dataset,
    token_vocab: &TokenVocab,
    cfg: &TrainerConfig,
) -> Result<[TeacherStudentPair; 2]> {
    cfg.validate()?;
    if distant.sentences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let enc = encode(distant, token_vocab);
    let mut pairs = Vec::with_capacity(2);
    for arch in pair_configs {
        if arch.token_vocab_size != token_vocab.len() {
            return Err(Error::config(
                "token_vocab_size",
                format!("config says {}, corpus has {}", arch.token_vocab_size, token_vocab.len()),
            ));
        }
        if arch.tag_count != distant.vocab.len() {
            return Err(Error::config(
                "tag_count",
                format!("config says {}, corpus has {}", arch.tag_count, distant.vocab.len()),
            ));
        }
        let mut params = tagger::init(arch)?;
        for epoch in 0..cfg.pretrain_epochs {
            let order = epoch_permutation(cfg.data_seed, epoch as u64, enc.ids.len());
            for batch in order.chunks(cfg.batch_size) {
                gd_step(&mut params, &enc.ids, &enc.tags, batch, cfg.learning_rate)?;
            }
        }
        pairs.push(TeacherStudentPair {
            teacher: params.clone(),
            student: params,
            arch: arch.clone(),
        });
    }
    Ok(pairs.try_into().map_err(|_| Error::Input("expected two pairs".into()))?)
}

/// Picks the pretraining depth from a candidate list by dev F1 (mean of the
/// two pretrained models), the counterpart of tuning the pretraining epoch
/// count per dataset. Training runs once to the deepest candidate; the
/// returned depth reproduces `pretrain` bitwise when written back into the
/// config.
pub fn select_pretrain_depth(
    pair_configs: &[TaggerConfig; 2],
    corpora: &Corpora,
    token_vocab: &TokenVocab,
    cfg: &TrainerConfig,
    candidates: &[usize],
) -> Result<usize> {
    cfg.validate()?;
    corpora.validate()?;
    if candidates.is_empty() || candidates.contains(&0) {
        return Err(Error::config("candidates", "need non-zero candidate depths"));
    }
    let max_depth = *candidates.iter().max().unwrap();
    let train = encode(&corpora.train, token_vocab);
    let dev = encode(&corpora.dev, token_vocab);
    let mut score_at: std::collections::BTreeMap<usize, f64> = Default::default();
    for arch in pair_configs {
        let mut params = tagger::init(arch)?;
        for epoch in 1..=max_depth {
            let order = epoch_permutation(cfg.data_seed, (epoch - 1) as u64, train.ids.len());
            for batch in order.chunks(cfg.batch_size) {
                gd_step(&mut params, &train.ids, &train.tags, batch, cfg.learning_rate)?;
            }
            if candidates.contains(&epoch) {
                let m = evaluate_model(&params, &dev.ids, &dev.tags, &corpora.train.vocab)?;
                *score_at.entry(epoch).or_insert(0.0) += m.f1 / 2.0;
            }
        }
    }
    let best = score_at
        .iter()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(a.0)))
        .map(|(d, _)| *d)
        .unwrap();
    Ok(best)
}

/// One self-training step over a batch: teacher predictions, reliable-label
/// selection, one student gradient step on the composite loss with adaptive
/// distillation weights, then a fine-grained teacher update per pair.
///
/// `labels` is the working label state of Algorithm-style bookkeeping; the
/// selection itself is defined purely on teacher predictions.
pub fn self_train_step(
    pairs: &mut [TeacherStudentPair; 2],
    ids: &[Vec<usize>],
    batch: &[usize],
    _labels: &LabelState,
    cfg: &TrainerConfig,
    rngs: &mut [EnsembleRng; 2],
) -> Result<StepLog> {
    // (a) Teacher forward passes; logits reused for prediction and KD.
    let mut teacher_logits: [Vec<crate::mat::Mat>; 2] = [Vec::new(), Vec::new()];
    let mut teacher_preds: [Vec<(Vec<usize>, Vec<f64>)>; 2] = [Vec::new(), Vec::new()];
    for (p, pair) in pairs.iter().enumerate() {
        for &i in batch {
            let trace = tagger::forward(&pair.teacher, &ids[i])?;
            teacher_preds[p].push(tagger::predict_from_logits(&trace.logits));
            teacher_logits[p].push(trace.logits);
        }
    }

    // (b) Reliable labels. With the agreement filter on, both pairs select
    // from the same two-teacher evidence; ablated, each uses its own teacher.
    let mut reliable: [Vec<ReliableLabels>; 2] = [Vec::new(), Vec::new()];
    for (b_idx, _) in batch.iter().enumerate() {
        let (t1_tags, t1_conf) = &teacher_preds[0][b_idx];
        let (t2_tags, t2_conf) = &teacher_preds[1][b_idx];
        if cfg.selection.consistency {
            let sel = select_reliable((t1_tags, t1_conf), (t2_tags, t2_conf), &cfg.selection)?;
            reliable[0].push(sel.clone());
            reliable[1].push(sel);
        } else {
            reliable[0].push(select_single((t1_tags, t1_conf), &cfg.selection)?);
            reliable[1].push(select_single((t2_tags, t2_conf), &cfg.selection)?);
        }
    }

    let total_tokens: usize = batch.iter().map(|&i| ids[i].len()).sum();
    let mut log = StepLog {
        alpha: [None, None],
        total_loss: [0.0; 2],
        ce_loss: [0.0; 2],
        kd_loss: [[0.0; 2]; 2],
        supervised_tokens: [0, 0],
        entity_tokens: [0, 0],
        total_tokens,
    };

    // (c) Student updates.
    for p in 0..2 {
        let alpha = if cfg.use_kd {
            Some(match cfg.distill.weight_mode {
                WeightMode::Fixed(a) => a,
                WeightMode::Adaptive => {
                    adaptive_alpha(&pairs[p].student, ids, batch, &teacher_logits, &cfg.distill)?
                }
            })
        } else {
            None
        };
        log.alpha[p] = alpha;

        let inv_b = 1.0 / batch.len() as f64;
        let mut acc = pairs[p].student.zeros_like();
        for (b_idx, &i) in batch.iter().enumerate() {
            let sel = &reliable[p][b_idx];
            log.supervised_tokens[p] += sel.supervised_count();
            log.entity_tokens[p] += sel.tags.iter().filter(|&&t| t != crate::corpus::O_TAG).count();
            let mut spec = LossSpec::default();
            if cfg.use_ce {
                spec.ce = Some(CeTerm {
                    tags: &sel.tags,
                    mask: &sel.mask,
                    weight: 1.0,
                });
            }
            if let Some(a) = alpha {
                spec.kd = vec![
                    KdTerm {
                        teacher_logits: &teacher_logits[0][b_idx],
                        temperature: cfg.distill.temperature,
                        weight: a,
                    },
                    KdTerm {
                        teacher_logits: &teacher_logits[1][b_idx],
                        temperature: cfg.distill.temperature,
                        weight: 1.0 - a,
                    },
                ];
            }
            let (loss, grad) = tagger::loss_and_grad(&pairs[p].student, &ids[i], &spec)?;
            log.total_loss[p] += loss * inv_b;
            // Component view for the log.
            let s_trace = tagger::forward(&pairs[p].student, &ids[i])?;
            let kd1 = distill::kd_loss(&s_trace.logits, &teacher_logits[0][b_idx], cfg.distill.temperature)?;
            let kd2 = distill::kd_loss(&s_trace.logits, &teacher_logits[1][b_idx], cfg.distill.temperature)?;
            log.kd_loss[p][0] += kd1 * inv_b;
            log.kd_loss[p][1] += kd2 * inv_b;
            if let Some(a) = alpha {
                log.ce_loss[p] += (loss - a * kd1 - (1.0 - a) * kd2) * inv_b;
            } else {
                log.ce_loss[p] += loss * inv_b;
            }
            acc.add_scaled(&grad, inv_b)?;
        }
        pairs[p].student.add_scaled(&acc, -cfg.learning_rate)?;
    }

    // (d) Teacher updates.
    for p in 0..2 {
        let updated = fine_grained_update(
            &pairs[p].teacher,
            &pairs[p].student,
            &cfg.ensemble[p],
            &mut rngs[p],
        )?;
        pairs[p].teacher = updated;
    }
    Ok(log)
}

/// Solves for the weight on teacher 1 from the batch's feature-space
/// distillation gradients (concatenated over the batch's tokens).
fn adaptive_alpha(
    student: &ParamSet,
    ids: &[Vec<usize>],
    batch: &[usize],
    teacher_logits: &[Vec<crate::mat::Mat>; 2],
    distill_cfg: &DistillConfig,
) -> Result<f64> {
    let mut grads: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (b_idx, &i) in batch.iter().enumerate() {
        for t in 0..2 {
            let g = tagger::feature_grad_of_kd(
                student,
                &ids[i],
                &teacher_logits[t][b_idx],
                distill_cfg.temperature,
            )?;
            grads[t].extend_from_slice(g.data());
        }
    }
    let solution = distill::min_norm_weights(
        &[std::mem::take(&mut grads[0]), std::mem::take(&mut grads[1])],
        distill_cfg.c_bound,
        distill_cfg.solver,
    )?;
    Ok(solution.alphas[0])
}

/// Cross-assignment of working labels: pair 1 receives teacher 2's
/// predictions over the whole corpus and vice versa.
pub fn mutual_relabel(
    pairs: &[TeacherStudentPair; 2],
    ids: &[Vec<usize>],
    _labels: &LabelState,
) -> Result<LabelState> {
    let mut y_one = Vec::with_capacity(ids.len());
    let mut y_two = Vec::with_capacity(ids.len());
    for sentence in ids {
        y_one.push(tagger::predict(&pairs[1].teacher, sentence)?.0);
        y_two.push(tagger::predict(&pairs[0].teacher, sentence)?.0);
    }
    Ok(LabelState { y_one, y_two })
}

/// Entity metrics of a model's argmax predictions on an encoded split.
pub fn evaluate_model(
    params: &ParamSet,
    ids: &[Vec<usize>],
    gold: &[Vec<usize>],
    vocab: &TagVocab,
) -> Result<EntityMetrics> {
    let mut pred = Vec::with_capacity(ids.len());
    for sentence in ids {
        pred.push(tagger::predict(params, sentence)?.0);
    }
    entity_prf_tags(&pred, gold, vocab)
}

const MODEL_NAMES: [&str; 4] = ["teacher1", "student1", "teacher2", "student2"];

fn eval_four(
    pairs: &[TeacherStudentPair; 2],
    dev: &Encoded,
    vocab: &TagVocab,
) -> Result<Vec<ModelEval>> {
    let models = [
        &pairs[0].teacher,
        &pairs[0].student,
        &pairs[1].teacher,
        &pairs[1].student,
    ];
    models
        .iter()
        .zip(MODEL_NAMES)
        .map(|(params, name)| {
            Ok(ModelEval {
                model: name.to_string(),
                metrics: evaluate_model(params, &dev.ids, &dev.tags, vocab)?,
            })
        })
        .collect()
}

struct BestTracker {
    params: ParamSet,
    selection: BestSelection,
}

impl BestTracker {
    fn consider(&mut self, evals: &[ModelEval], pairs: &[TeacherStudentPair; 2], epoch: usize) {
        for eval in evals {
            if eval.metrics.f1 > self.selection.dev_f1 {
                self.selection = BestSelection {
                    model: eval.model.clone(),
                    epoch,
                    dev_f1: eval.metrics.f1,
                };
                self.params = model_by_name(pairs, &eval.model).clone();
            }
        }
    }
}

fn model_by_name<'a>(pairs: &'a [TeacherStudentPair; 2], name: &str) -> &'a ParamSet {
    match name {
        "teacher1" => &pairs[0].teacher,
        "student1" => &pairs[0].student,
        "teacher2" => &pairs[1].teacher,
        "student2" => &pairs[1].student,
        other => panic!("unknown model name {other}"),
    }
}

/// Runs the full pipeline and returns the record along with the checkpoints
/// of all four final models plus the dev-best one.
pub struct RunOutput {
    pub record: RunRecord,
    pub final_pairs: [TeacherStudentPair; 2],
    pub best_params: ParamSet,
    pub best_arch: TaggerConfig,
    pub token_vocab: TokenVocab,
}

/// Executes pretraining plus the self-training epochs, evaluating all four
/// models on dev each epoch, and scores the dev-best model on test exactly
/// once. Component errors inside the loop abort into a partial record
/// flagged incomplete.
pub fn run(
    pair_configs: &[TaggerConfig; 2],
    cfg: &TrainerConfig,
    corpora: &Corpora,
) -> Result<RunOutput> {
    cfg.validate()?;
    corpora.validate()?;
    let token_vocab = TokenVocab::build(&corpora.train);
    let vocab = corpora.train.vocab.clone();
    let train = encode(&corpora.train, &token_vocab);
    let dev = encode(&corpora.dev, &token_vocab);
    let test = encode(&corpora.test, &token_vocab);

    let seeds = SeedEcho {
        data_seed: cfg.data_seed,
        init_seeds: [pair_configs[0].init_seed, pair_configs[1].init_seed],
        ensemble_seeds: [cfg.ensemble[0].rng_seed, cfg.ensemble[1].rng_seed],
    };

    let mut pairs = pretrain(pair_configs, &corpora.train, &token_vocab, cfg)?;
    let mut labels = LabelState::from_distant(&train.tags);
    let mut rngs = [
        EnsembleRng::new(cfg.ensemble[0].rng_seed),
        EnsembleRng::new(cfg.ensemble[1].rng_seed),
    ];

    let mut epochs = Vec::with_capacity(cfg.max_epochs + 1);
    let initial_eval = eval_four(&pairs, &dev, &vocab)?;
    let mut best = BestTracker {
        params: pairs[0].teacher.clone(),
        selection: BestSelection {
            model: "teacher1".to_string(),
            epoch: 0,
            dev_f1: f64::NEG_INFINITY,
        },
    };
    best.consider(&initial_eval, &pairs, 0);
    epochs.push(EpochRecord {
        epoch: 0,
        dev: initial_eval,
        stats: None,
    });

    let mut failure: Option<String> = None;
    'outer: for epoch in 1..=cfg.max_epochs {
        let order = epoch_permutation(
            cfg.data_seed,
            (cfg.pretrain_epochs + epoch - 1) as u64,
            train.ids.len(),
        );
        let mut step_logs = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            match self_train_step(&mut pairs, &train.ids, batch, &labels, cfg, &mut rngs) {
                Ok(log) => step_logs.push(log),
                Err(e) => {
                    failure = Some(format!("epoch {epoch}: {e}"));
                    break 'outer;
                }
            }
            if cfg.relabel_granularity == RelabelGranularity::PerBatch {
                labels = mutual_relabel(&pairs, &train.ids, &labels)?;
            }
        }
        if cfg.relabel_granularity == RelabelGranularity::PerEpoch {
            labels = mutual_relabel(&pairs, &train.ids, &labels)?;
        }
        let dev_eval = eval_four(&pairs, &dev, &vocab)?;
        best.consider(&dev_eval, &pairs, epoch);
        epochs.push(EpochRecord {
            epoch,
            dev: dev_eval,
            stats: TrainStats::from_steps(&step_logs),
        });
    }

    let complete = failure.is_none();
    let test_metrics = if complete {
        Some(evaluate_model(&best.params, &test.ids, &test.tags, &vocab)?)
    } else {
        None
    };

    let best_arch = if best.selection.model.ends_with('1') {
        pair_configs[0].clone()
    } else {
        pair_configs[1].clone()
    };
    Ok(RunOutput {
        record: RunRecord {
            tagger_configs: pair_configs.clone(),
            trainer_config: cfg.clone(),
            seeds,
            epochs,
            best: best.selection,
            test: test_metrics,
            complete,
            error: failure,
        },
        final_pairs: pairs,
        best_params: best.params,
        best_arch,
        token_vocab,
    })
}

/// The noisy-supervised control: the same two architectures trained directly
/// on the distant labels for the same total epoch budget, dev-selected the
/// same way. No selection, no distillation, no ensembling.
pub fn run_distant_baseline(
    pair_configs: &[TaggerConfig; 2],
    cfg: &TrainerConfig,
    corpora: &Corpora,
) -> Result<RunOutput> {
    cfg.validate()?;
    corpora.validate()?;
    let token_vocab = TokenVocab::build(&corpora.train);
    let vocab = corpora.train.vocab.clone();
    let train = encode(&corpora.train, &token_vocab);
    let dev = encode(&corpora.dev, &token_vocab);
    let test = encode(&corpora.test, &token_vocab);
    let total_epochs = cfg.pretrain_epochs + cfg.max_epochs;

    let mut models: Vec<ParamSet> = pair_configs
        .iter()
        .map(tagger::init)
        .collect::<Result<_>>()?;
    let mut epochs = Vec::with_capacity(total_epochs);
    let mut best: Option<(ParamSet, BestSelection, usize)> = None;
    for epoch in 1..=total_epochs {
        let order = epoch_permutation(cfg.data_seed, (epoch - 1) as u64, train.ids.len());
        for (m, params) in models.iter_mut().enumerate() {
            let _ = m;
            for batch in order.chunks(cfg.batch_size) {
                gd_step(params, &train.ids, &train.tags, batch, cfg.learning_rate)?;
            }
        }
        let mut dev_eval = Vec::new();
        for (m, params) in models.iter().enumerate() {
            let metrics = evaluate_model(params, &dev.ids, &dev.tags, &vocab)?;
            let name = format!("model{}", m + 1);
            let f1 = metrics.f1;
            if best.as_ref().map_or(true, |(_, sel, _)| f1 > sel.dev_f1) {
                best = Some((
                    params.clone(),
                    BestSelection {
                        model: name.clone(),
                        epoch,
                        dev_f1: f1,
                    },
                    m,
                ));
            }
            dev_eval.push(ModelEval {
                model: name,
                metrics,
            });
        }
        epochs.push(EpochRecord {
            epoch,
            dev: dev_eval,
            stats: None,
        });
    }
    let (best_params, best_sel, best_idx) = best.expect("at least one epoch");
    let test_metrics = evaluate_model(&best_params, &test.ids, &test.tags, &vocab)?;
    let final_pairs = [
        TeacherStudentPair {
            teacher: models[0].clone(),
            student: models[0].clone(),
            arch: pair_configs[0].clone(),
        },
        TeacherStudentPair {
            teacher: models[1].clone(),
            student: models[1].clone(),
            arch: pair_configs[1].clone(),
        },
    ];
    Ok(RunOutput {
        record: RunRecord {
            tagger_configs: pair_configs.clone(),
            trainer_config: cfg.clone(),
            seeds: SeedEcho {
                data_seed: cfg.data_seed,
                init_seeds: [pair_configs[0].init_seed, pair_configs[1].init_seed],
                ensemble_seeds: [cfg.ensemble[0].rng_seed, cfg.ensemble[1].rng_seed],
            },
            epochs,
            best: best_sel,
            test: Some(test_metrics),
            complete: true,
            error: None,
        },
        final_pairs,
        best_params,
        best_arch: pair_configs[best_idx].clone(),
        token_vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, distant_annotate, SynthConfig};

    pub(crate) fn tiny_corpora(seed: u64) -> Corpora {
        let cfg = SynthConfig {
            train_sentences: 24,
            dev_sentences: 8,
            test_sentences: 8,
            entity_types: 2,
            surfaces_per_type: 4,
            head_words_per_type: 3,
            tail_words_per_type: 3,
            context_vocab_size: 20,
            min_entity_len: 1,
            max_entity_len: 2,
            min_context_len: 3,
            max_context_len: 6,
            max_mentions_per_sentence: 1,
            cue_words_per_type: 3,
            cue_prob: 0.7,
            shared_head_fraction: 0.3,
            polyseme_fraction: 0.0,
            polyseme_rate: 0.0,
            dict_coverage: 0.75,
            dict_confusion: 0.0,
        };
        let synth = synth_corpus(&cfg, seed).unwrap();
        let train = distant_annotate(&synth.train, &synth.dictionary).unwrap();
        Corpora {
            train,
            dev: synth.dev,
            test: synth.test,
        }
    }

    pub(crate) fn tiny_archs(vocab_size: usize, tag_count: usize) -> [TaggerConfig; 2] {
        [
            TaggerConfig {
                token_vocab_size: vocab_size,
                embed_dim: 6,
                hidden_dim: 8,
                tag_count,
                init_seed: 11,
                init_scale: 0.3,
            },
            TaggerConfig {
                token_vocab_size: vocab_size,
                embed_dim: 6,
                hidden_dim: 10,
                tag_count,
                init_seed: 22,
                init_scale: 0.3,
            },
        ]
    }

    fn tiny_trainer() -> TrainerConfig {
        TrainerConfig {
            pretrain_epochs: 2,
            max_epochs: 2,
            batch_size: 8,
            learning_rate: 0.5,
            ensemble: [
                EnsembleConfig { m: 0.9, sigma2: 0.5, rng_seed: 100 },
                EnsembleConfig { m: 0.9, sigma2: 0.5, rng_seed: 200 },
            ],
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn pretrain_duplicates_model_into_teacher() {
        let corpora = tiny_corpora(1);
        let tv = TokenVocab::build(&corpora.train);
        let archs = tiny_archs(tv.len(), corpora.train.vocab.len());
        let cfg = tiny_trainer();
        let pairs = pretrain(&archs, &corpora.train, &tv, &cfg).unwrap();
        for p in &pairs {
            assert_eq!(p.teacher, p.student);
        }
        // Determinism.
        let again = pretrain(&archs, &corpora.train, &tv, &cfg).unwrap();
        assert_eq!(pairs[0].teacher, again[0].teacher);
        assert_eq!(pairs[1].student, again[1].student);
    }

    #[test]
    fn pretrain_loss_decreases_full_batch() {
        let corpora = tiny_corpora(2);
        let tv = TokenVocab::build(&corpora.train);
        let archs = tiny_archs(tv.len(), corpora.train.vocab.len());
        let enc = encode(&corpora.train, &tv);
        let mut params = tagger::init(&archs[0]).unwrap();
        let all: Vec<usize> = (0..enc.ids.len()).collect();
        let mut last = f64::INFINITY;
        for _ in 0..5 {
            let loss = gd_step(&mut params, &enc.ids, &enc.tags, &all, 0.2).unwrap();
            assert!(loss <= last + 1e-6, "full-batch CE must not increase: {loss} vs {last}");
            last = loss;
        }
    }

    #[test]
    fn mutual_relabel_is_crosswise() {
        let corpora = tiny_corpora(3);
        let tv = TokenVocab::build(&corpora.train);
        let archs = tiny_archs(tv.len(), corpora.train.vocab.len());
        let cfg = tiny_trainer();
        let pairs = pretrain(&archs, &corpora.train, &tv, &cfg).unwrap();
        let enc = encode(&corpora.train, &tv);
        let labels = LabelState::from_distant(&enc.tags);
        let relabeled = mutual_relabel(&pairs, &enc.ids, &labels).unwrap();

        // Y_I must equal teacher 2's argmax predictions exactly.
        for (i, sentence) in enc.ids.iter().enumerate() {
            let expect = tagger::predict(&pairs[1].teacher, sentence).unwrap().0;
            assert_eq!(relabeled.y_one[i], expect);
        }

        // Y_I never reads teacher 1: perturbing teacher 1 leaves it unchanged.
        // The perturbation pins teacher 1's argmax to tag 1 everywhere.
        let mut mutated = pairs.clone();
        let mut t1 = mutated[0].teacher.clone();
        t1.fragment_mut("head.bias").unwrap().values[1] += 100.0;
        mutated[0].teacher = t1;
        let relabeled2 = mutual_relabel(&mutated, &enc.ids, &labels).unwrap();
        assert_eq!(relabeled.y_one, relabeled2.y_one);
        assert_ne!(relabeled.y_two, relabeled2.y_two);

        // Coverage: every sentence has labels of matching length.
        for (i, sentence) in enc.ids.iter().enumerate() {
            assert_eq!(relabeled.y_one[i].len(), sentence.len());
            assert!(relabeled.y_one[i].iter().all(|&t| t < corpora.train.vocab.len()));
        }
    }

    #[test]
    fn identical_teachers_give_half_alpha() {
        let corpora = tiny_corpora(4);
        let tv = TokenVocab::build(&corpora.train);
        let archs = [
            tiny_archs(tv.len(), corpora.train.vocab.len())[0].clone(),
            tiny_archs(tv.len(), corpora.train.vocab.len())[0].clone(),
        ];
        let cfg = tiny_trainer();
        // Same arch and seed: both pairs are bitwise identical after pretrain.
        let mut pairs = pretrain(&archs, &corpora.train, &tv, &cfg).unwrap();
        let enc = encode(&corpora.train, &tv);
        let labels = LabelState::from_distant(&enc.tags);
        let mut rngs = [EnsembleRng::new(1), EnsembleRng::new(2)];
        let batch: Vec<usize> = (0..4).collect();
        let log = self_train_step(&mut pairs, &enc.ids, &batch, &labels, &cfg, &mut rngs).unwrap();
        assert_eq!(log.alpha[0], Some(0.5));
        assert_eq!(log.alpha[1], Some(0.5));
    }

    #[test]
    fn sigma_one_at_unity_supervises_nothing() {
        let corpora = tiny_corpora(5);
        let tv = TokenVocab::build(&corpora.train);
        let archs = tiny_archs(tv.len(), corpora.train.vocab.len());
        let mut cfg = tiny_trainer();
        cfg.selection.sigma1 = 1.0;
        cfg.selection.mask_policy = crate::selection::MaskPolicy::Exclude;
        let mut pairs = pretrain(&archs, &corpora.train, &tv, &cfg).unwrap();
        let enc = encode(&corpora.train, &tv);
        let labels = LabelState::from_distant(&enc.tags);
        let mut rngs = [EnsembleRng::new(1), EnsembleRng::new(2)];
        let batch: Vec<usize> = (0..6).collect();
        let log = self_train_step(&mut pairs, &enc.ids, &batch, &labels, &cfg, &mut rngs).unwrap();
        assert_eq!(log.supervised_tokens, [0, 0], "confidence can never exceed 1.0");
    }

    #[test]
    fn run_zero_epochs_still_selects_a_model() {
        let corpora = tiny_corpora(6);
        let tv = TokenVocab::build(&corpora.train);
        let archs = tiny_archs(tv.len(), corpora.train.vocab.len());
        let mut cfg = tiny_trainer();
        cfg.max_epochs = 0;
        let out = run(&archs, &cfg, &corpora).unwrap();
        assert!(out.record.complete);
        assert_eq!(out.record.epochs.len(), 1);
        assert!(out.record.test.is_some());
        assert!(MODEL_NAMES.contains(&out.record.best.model.as_str()));
    }

    #[test]
    fn run_is_deterministic() {
        let corpora = tiny_corpora(7);
        let tv = TokenVocab::build(&corpora.train);
        let archs = tiny_archs(tv.len(), corpora.train.vocab.len());
        let cfg = tiny_trainer();
        let a = run(&archs, &cfg, &corpora).unwrap();
        let b = run(&archs, &cfg, &corpora).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.best_params, b.best_params);
    }

    #[test]
    fn best_is_max_over_recorded_dev_f1() {
        let corpora = tiny_corpora(8);
        let tv = TokenVocab::build(&corpora.train);
        let archs = tiny_archs(tv.len(), corpora.train.vocab.len());
        let cfg = tiny_trainer();
        let out = run(&archs, &cfg, &corpora).unwrap();
        let max_f1 = out
            .record
            .epochs
            .iter()
            .flat_map(|e| e.dev.iter())
            .map(|m| m.metrics.f1)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.record.best.dev_f1, max_f1);
    }

    #[test]
    fn plain_self_training_configuration_copies_teacher() {
        let corpora = tiny_corpora(9);
        let tv = TokenVocab::build(&corpora.train);
        let archs = tiny_archs(tv.len(), corpora.train.vocab.len());
        let mut cfg = tiny_trainer();
        cfg.selection.sigma1 = 0.0;
        cfg.selection.consistency = false;
        cfg.distill.weight_mode = WeightMode::Fixed(0.5);
        cfg.ensemble = [
            EnsembleConfig { m: 0.0, sigma2: 0.0, rng_seed: 1 },
            EnsembleConfig { m: 0.0, sigma2: 0.0, rng_seed: 2 },
        ];
        cfg.max_epochs = 1;
        let out = run(&archs, &cfg, &corpora).unwrap();
        for p in &out.final_pairs {
            assert_eq!(p.teacher, p.student, "direct-copy config collapses teacher onto student");
        }
    }

    #[test]
    fn frozen_teachers_only_change_via_ensemble() {
        let corpora = tiny_corpora(10);
        let tv = TokenVocab::build(&corpora.train);
        let archs = tiny_archs(tv.len(), corpora.train.vocab.len());
        let mut cfg = tiny_trainer();
        // sigma2 = 1 preserves every unit: teachers must stay bitwise fixed
        // while students keep moving.
        cfg.ensemble = [
            EnsembleConfig { m: 0.9, sigma2: 1.0, rng_seed: 5 },
            EnsembleConfig { m: 0.9, sigma2: 1.0, rng_seed: 6 },
        ];
        let mut pairs = pretrain(&archs, &corpora.train, &tv, &cfg).unwrap();
        let teachers_before = [pairs[0].teacher.clone(), pairs[1].teacher.clone()];
        let students_before = [pairs[0].student.clone(), pairs[1].student.clone()];
        let enc = encode(&corpora.train, &tv);
        let labels = LabelState::from_distant(&enc.tags);
        let mut rngs = [EnsembleRng::new(5), EnsembleRng::new(6)];
        let batch: Vec<usize> = (0..8).collect();
        self_train_step(&mut pairs, &enc.ids, &batch, &labels, &cfg, &mut rngs).unwrap();
        assert_eq!(pairs[0].teacher, teachers_before[0]);
        assert_eq!(pairs[1].teacher, teachers_before[1]);
        assert_ne!(pairs[0].student, students_before[0]);
        assert_ne!(pairs[1].student, students_before[1]);
    }
}
