//! Temporary calibration runner: prints the quantities that get frozen into
//! the regression/acceptance suites. Deleted once the values are pinned.

use atsen::corpus::{distant_annotate, noise_report, synth_corpus, SynthConfig, TokenVocab};
use atsen::ensemble::EnsembleConfig;
use atsen::metrics::decode_spans;
use atsen::selection::select_reliable;
use atsen::tagger::{self, TaggerConfig};
use atsen::trainer::{self, Corpora, TrainerConfig};

fn bench_synth() -> SynthConfig {
    SynthConfig {
        train_sentences: 2000,
        dev_sentences: 400,
        test_sentences: 400,
        entity_types: 4,
        surfaces_per_type: envu("CAL_SURFACES", 160),
        head_words_per_type: envu("CAL_HEADS", 8),
        tail_words_per_type: envu("CAL_TAILS", 6),
        context_vocab_size: 120,
        min_entity_len: envu("CAL_MINLEN", 2),
        max_entity_len: 3,
        min_context_len: 6,
        max_context_len: 14,
        max_mentions_per_sentence: 2,
        cue_words_per_type: 6,
        cue_prob: envf("CAL_CUE_PROB", 0.7),
        shared_head_fraction: envf("CAL_SHARED", 0.0),
        polyseme_fraction: envf("CAL_POLY_FRAC", 0.5),
        polyseme_rate: envf("CAL_POLY_RATE", 0.1),
        dict_coverage: 0.6,
        dict_confusion: 0.1,
    }
}

fn bench_corpora(seed: u64) -> Corpora {
    let synth = synth_corpus(&bench_synth(), seed).unwrap();
    let train = distant_annotate(&synth.train, &synth.dictionary).unwrap();
    Corpora {
        train,
        dev: synth.dev,
        test: synth.test,
    }
}

fn bench_archs(vocab: usize, tags: usize, seed: u64) -> [TaggerConfig; 2] {
    let embed = envu("CAL_EMBED", 16);
    let h1 = envu("CAL_H1", 32);
    let h2 = envu("CAL_H2", 24);
    [
        TaggerConfig {
            token_vocab_size: vocab,
            embed_dim: embed,
            hidden_dim: h1,
            tag_count: tags,
            init_seed: seed.wrapping_mul(31).wrapping_add(1),
            init_scale: 0.3,
        },
        TaggerConfig {
            token_vocab_size: vocab,
            embed_dim: embed,
            hidden_dim: h2,
            tag_count: tags,
            init_seed: seed.wrapping_mul(31).wrapping_add(2),
            init_scale: 0.3,
        },
    ]
}

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn envu(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn bench_trainer(seed: u64) -> TrainerConfig {
    let m = envf("CAL_M", 0.98);
    let sigma2 = envf("CAL_SIGMA2", 0.75);
    let mut cfg = TrainerConfig {
        pretrain_epochs: envu("CAL_PRETRAIN", 6),
        max_epochs: envu("CAL_EPOCHS", 10),
        batch_size: 32,
        learning_rate: envf("CAL_LR", 1.5),
        ensemble: [
            EnsembleConfig { m, sigma2, rng_seed: seed.wrapping_mul(7).wrapping_add(11) },
            EnsembleConfig { m, sigma2, rng_seed: seed.wrapping_mul(7).wrapping_add(12) },
        ],
        data_seed: seed.wrapping_mul(13).wrapping_add(5),
        ..TrainerConfig::default()
    };
    cfg.selection.sigma1 = envf("CAL_SIGMA1", 0.5);
    if std::env::var("CAL_SUPERVISE_O").is_ok() {
        cfg.selection.mask_policy = atsen::selection::MaskPolicy::SuperviseAsO;
    }
    cfg
}

#[test]
fn calibrate_noise_report_seed7() {
    let cfg = SynthConfig::default();
    let corpus = synth_corpus(&cfg, 7).unwrap();
    let distant = distant_annotate(&corpus.train, &corpus.dictionary).unwrap();
    let rep = noise_report(&corpus.train, &distant).unwrap();
    println!(
        "NOISE seed7: precision={:.10} recall={:.10} confusion={} noisy={} gold={}",
        rep.label_precision, rep.label_recall, rep.confusion_count, rep.noisy_spans, rep.gold_spans
    );
}

#[test]
fn calibrate_selection_regression_seed7() {
    let corpora = bench_corpora(7);
    let tv = TokenVocab::build(&corpora.train);
    let archs = bench_archs(tv.len(), corpora.train.vocab.len(), 7);
    let tcfg = bench_trainer(7);
    let pairs = trainer::pretrain(&archs, &corpora.train, &tv, &tcfg).unwrap();

    // Span precision of reliable labels vs raw distant labels on train.
    let vocab = &corpora.train.vocab;
    let mut tp_rel = 0usize;
    let mut n_rel = 0usize;
    let mut tp_dist = 0usize;
    let mut n_dist = 0usize;
    for s in &corpora.train.sentences {
        let ids = tv.encode(s);
        let p1 = tagger::predict(&pairs[0].teacher, &ids).unwrap();
        let p2 = tagger::predict(&pairs[1].teacher, &ids).unwrap();
        let rel = select_reliable((&p1.0, &p1.1), (&p2.0, &p2.1), &tcfg.selection).unwrap();
        let gold = s.gold_tags.as_ref().unwrap();
        let gold_spans: std::collections::HashSet<_> =
            decode_spans(gold, vocab).into_iter().collect();
        for sp in decode_spans(&rel.tags, vocab) {
            n_rel += 1;
            if gold_spans.contains(&sp) {
                tp_rel += 1;
            }
        }
        for sp in decode_spans(&s.tags, vocab) {
            n_dist += 1;
            if gold_spans.contains(&sp) {
                tp_dist += 1;
            }
        }
    }
    println!(
        "SELECTION seed7: reliable_precision={:.10} ({tp_rel}/{n_rel}) distant_precision={:.10} ({tp_dist}/{n_dist})",
        tp_rel as f64 / n_rel as f64,
        tp_dist as f64 / n_dist as f64
    );
}

#[test]
fn calibrate_benchmark_seeds() {
    let max_seed: u64 = envu("CAL_SEEDS", 5) as u64;
    for seed in 1..=max_seed {
        let corpora = bench_corpora(seed);
        let tv = TokenVocab::build(&corpora.train);
        let archs = bench_archs(tv.len(), corpora.train.vocab.len(), seed);
        let mut tcfg = bench_trainer(seed);
        let t0 = std::time::Instant::now();
        let depth = trainer::select_pretrain_depth(&archs, &corpora, &tv, &tcfg, &[3, 4, 5, 6, 8, 10, 12, 14, 16]).unwrap();
        tcfg.pretrain_epochs = depth;
        let atsen_run = trainer::run(&archs, &tcfg, &corpora).unwrap();
        let baseline = trainer::run_distant_baseline(&archs, &tcfg, &corpora).unwrap();
        let af = atsen_run.record.test.as_ref().unwrap().f1;
        let bf = baseline.record.test.as_ref().unwrap().f1;
        println!(
            "BENCH seed{seed}: atsen={af:.10} baseline={bf:.10} margin={:+.10} best={}@{} depth={depth} time={:?}",
            af - bf,
            atsen_run.record.best.model,
            atsen_run.record.best.epoch,
            t0.elapsed()
        );
    }
}

#[test]
fn calibrate_curves() {
    let seed = 1u64;
    let corpora = bench_corpora(seed);
    let tv = TokenVocab::build(&corpora.train);
    let archs = bench_archs(tv.len(), corpora.train.vocab.len(), seed);
    let tcfg = bench_trainer(seed);
    let atsen_run = trainer::run(&archs, &tcfg, &corpora).unwrap();
    let baseline = trainer::run_distant_baseline(&archs, &tcfg, &corpora).unwrap();
    println!("== ATSEN dev F1 by epoch (t1 s1 t2 s2) [alpha1 alpha2 sup_rate]");
    for e in &atsen_run.record.epochs {
        let f1s: Vec<String> = e.dev.iter().map(|m| format!("{:.4}", m.metrics.f1)).collect();
        let extra = e.stats.as_ref().map(|s| format!(
            " [a1={:?} a2={:?} sup={:.3}]",
            s.mean_alpha[0].map(|a| (a * 1000.0).round() / 1000.0),
            s.mean_alpha[1].map(|a| (a * 1000.0).round() / 1000.0),
            s.supervised_token_rate[0]
        )).unwrap_or_default();
        println!("  epoch {:02}: {}{}", e.epoch, f1s.join(" "), extra);
    }
    println!("== BASELINE dev F1 by epoch (m1 m2)");
    for e in &baseline.record.epochs {
        let f1s: Vec<String> = e.dev.iter().map(|m| format!("{:.4}", m.metrics.f1)).collect();
        println!("  epoch {:02}: {}", e.epoch, f1s.join(" "));
    }
}

#[test]
fn calibrate_skyline() {
    let seed = 1u64;
    let synth = synth_corpus(&bench_synth(), seed).unwrap();
    let distant = distant_annotate(&synth.train, &synth.dictionary).unwrap();
    let rep = noise_report(&synth.train, &distant).unwrap();
    println!("DISTANT train quality: P={:.4} R={:.4}", rep.label_precision, rep.label_recall);

    // Clean-supervised skyline: same tagger trained on gold train labels.
    let corpora_gold = Corpora { train: synth.train.clone(), dev: synth.dev.clone(), test: synth.test.clone() };
    let corpora_noisy = Corpora { train: distant, dev: synth.dev, test: synth.test };
    let tv = TokenVocab::build(&corpora_gold.train);
    let archs = bench_archs(tv.len(), corpora_gold.train.vocab.len(), seed);
    let tcfg = bench_trainer(seed);
    let gold_run = trainer::run_distant_baseline(&archs, &tcfg, &corpora_gold).unwrap();
    println!("GOLD-SUPERVISED skyline: test F1={:.4} best@{}", gold_run.record.test.as_ref().unwrap().f1, gold_run.record.best.epoch);

    // Pseudo-label quality after pretraining: teacher train-set predictions vs gold.
    let pairs = trainer::pretrain(&archs, &corpora_noisy.train, &tv, &tcfg).unwrap();
    let vocab = &corpora_noisy.train.vocab;
    for (i, pair) in pairs.iter().enumerate() {
        let mut tp = 0usize; let mut np = 0usize; let mut ng = 0usize;
        for s in &corpora_noisy.train.sentences {
            let ids = tv.encode(s);
            let pred = tagger::predict(&pair.teacher, &ids).unwrap().0;
            let gold = s.gold_tags.as_ref().unwrap();
            let gset: std::collections::HashSet<_> = decode_spans(gold, vocab).into_iter().collect();
            for sp in decode_spans(&pred, vocab) { np += 1; if gset.contains(&sp) { tp += 1; } }
            ng += gset.len();
        }
        println!("PSEUDO teacher{} on train: P={:.4} R={:.4} F1={:.4}", i + 1,
            tp as f64 / np as f64, tp as f64 / ng as f64,
            2.0 * tp as f64 / (np + ng) as f64);
    }
}

#[test]
fn calibrate_pseudo_curve() {
    let seed: u64 = envu("CAL_SEED", 1) as u64;
    let synth = synth_corpus(&bench_synth(), seed).unwrap();
    let distant = distant_annotate(&synth.train, &synth.dictionary).unwrap();
    let corpora = Corpora { train: distant, dev: synth.dev, test: synth.test };
    let tv = TokenVocab::build(&corpora.train);
    let archs = bench_archs(tv.len(), corpora.train.vocab.len(), seed);
    let vocab = &corpora.train.vocab;
    {
        let rep = noise_report(&synth_corpus(&bench_synth(), seed).unwrap().train, &corpora.train).unwrap();
        let f1 = 2.0 * rep.label_precision * rep.label_recall / (rep.label_precision + rep.label_recall);
        println!("PSEUDO-CURVE distant: P={:.3} R={:.3} F1={:.4}", rep.label_precision, rep.label_recall, f1);
    }
    for pre in [2usize, 3, 4, 5, 6, 8, 10, 14, 20] {
        let mut tcfg = bench_trainer(seed);
        tcfg.pretrain_epochs = pre;
        let pairs = trainer::pretrain(&archs, &corpora.train, &tv, &tcfg).unwrap();
        let mut line = format!("PSEUDO-CURVE pre={pre}:");
        for pair in &pairs {
            let mut tp = 0usize; let mut np = 0usize; let mut ng = 0usize;
            for s in &corpora.train.sentences {
                let ids = tv.encode(s);
                let pred = tagger::predict(&pair.teacher, &ids).unwrap().0;
                let gold = s.gold_tags.as_ref().unwrap();
                let gset: std::collections::HashSet<_> = decode_spans(gold, vocab).into_iter().collect();
                for sp in decode_spans(&pred, vocab) { np += 1; if gset.contains(&sp) { tp += 1; } }
                ng += gset.len();
            }
            line.push_str(&format!("  F1={:.4} (P={:.3} R={:.3})",
                2.0 * tp as f64 / (np + ng) as f64, tp as f64 / np.max(1) as f64, tp as f64 / ng as f64));
        }
        println!("{line}");
    }
}

#[test]
fn calibrate_token_recovery() {
    let seed = 1u64;
    let synth = synth_corpus(&bench_synth(), seed).unwrap();
    let distant = distant_annotate(&synth.train, &synth.dictionary).unwrap();
    let corpora = Corpora { train: distant, dev: synth.dev, test: synth.test };
    let tv = TokenVocab::build(&corpora.train);
    let archs = bench_archs(tv.len(), corpora.train.vocab.len(), seed);
    let mut tcfg = bench_trainer(seed);
    tcfg.pretrain_epochs = envu("CAL_PRETRAIN", 6);
    let pairs = trainer::pretrain(&archs, &corpora.train, &tv, &tcfg).unwrap();
    // Token classes: gold-entity+distant-entity (kept), gold-entity+distant-O
    // (missing = incompleteness), gold-O (context).
    let mut kept = [0usize; 2];
    let mut kept_total = 0usize;
    let mut recovered = [0usize; 2];
    let mut recovered_exact = [0usize; 2];
    let mut missing_total = 0usize;
    let mut false_entity = [0usize; 2];
    let mut ctx_total = 0usize;
    for s in &corpora.train.sentences {
        let ids = tv.encode(s);
        let gold = s.gold_tags.as_ref().unwrap();
        let preds = [
            tagger::predict(&pairs[0].teacher, &ids).unwrap().0,
            tagger::predict(&pairs[1].teacher, &ids).unwrap().0,
        ];
        for j in 0..ids.len() {
            let gold_entity = gold[j] != 0;
            let distant_entity = s.tags[j] != 0;
            if gold_entity && distant_entity {
                kept_total += 1;
                for p in 0..2 { if preds[p][j] != 0 { kept[p] += 1; } }
            } else if gold_entity {
                missing_total += 1;
                for p in 0..2 {
                    if preds[p][j] != 0 { recovered[p] += 1; }
                    if preds[p][j] == gold[j] { recovered_exact[p] += 1; }
                }
            } else {
                ctx_total += 1;
                for p in 0..2 { if preds[p][j] != 0 { false_entity[p] += 1; } }
            }
        }
    }
    for p in 0..2 {
        println!(
            "TOKENS t{}: kept {:.3} ({kept_total}), recovered-as-entity {:.3}, recovered-exact {:.3} ({missing_total}), false-entity {:.4} ({ctx_total})",
            p + 1,
            kept[p] as f64 / kept_total as f64,
            recovered[p] as f64 / missing_total as f64,
            recovered_exact[p] as f64 / missing_total as f64,
            false_entity[p] as f64 / ctx_total as f64
        );
    }
}

#[test]
fn calibrate_majority_oracle() {
    let seed = 1u64;
    let synth = synth_corpus(&bench_synth(), seed).unwrap();
    let distant = distant_annotate(&synth.train, &synth.dictionary).unwrap();
    // Empirical per-token tag distribution in the distant labels.
    let mut counts: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
    let k = distant.vocab.len();
    for s in &distant.sentences {
        for (tok, &tag) in s.tokens.iter().zip(&s.tags) {
            counts.entry(tok).or_insert_with(|| vec![0; k])[tag] += 1;
        }
    }
    let majority: std::collections::HashMap<&str, usize> = counts
        .iter()
        .map(|(tok, c)| (*tok, c.iter().enumerate().max_by_key(|(_, &n)| n).unwrap().0))
        .collect();
    // Oracle: predict per-token majority tag everywhere; measure on the
    // missing tokens (gold entity, distant O) and overall span F1.
    let mut missing = 0usize;
    let mut recovered = 0usize;
    let mut tp = 0usize;
    let mut np = 0usize;
    let mut ng = 0usize;
    let vocab = &distant.vocab;
    for s in &distant.sentences {
        let gold = s.gold_tags.as_ref().unwrap();
        let pred: Vec<usize> = s.tokens.iter().map(|t| majority[t.as_str()]).collect();
        for j in 0..pred.len() {
            if gold[j] != 0 && s.tags[j] == 0 {
                missing += 1;
                if pred[j] == gold[j] {
                    recovered += 1;
                }
            }
        }
        let gset: std::collections::HashSet<_> = decode_spans(gold, vocab).into_iter().collect();
        for sp in decode_spans(&pred, vocab) {
            np += 1;
            if gset.contains(&sp) { tp += 1; }
        }
        ng += gset.len();
    }
    println!(
        "ORACLE majority-vote: missing-token recovery {:.3} ({missing}), span P={:.3} R={:.3} F1={:.4}",
        recovered as f64 / missing as f64,
        tp as f64 / np as f64,
        tp as f64 / ng as f64,
        2.0 * tp as f64 / (np + ng) as f64
    );
}

#[test]
fn calibrate_selection_retention() {
    let seed = 1u64;
    let synth = synth_corpus(&bench_synth(), seed).unwrap();
    let distant = distant_annotate(&synth.train, &synth.dictionary).unwrap();
    let corpora = Corpora { train: distant, dev: synth.dev, test: synth.test };
    let tv = TokenVocab::build(&corpora.train);
    let archs = bench_archs(tv.len(), corpora.train.vocab.len(), seed);
    let tcfg = bench_trainer(seed);
    let pairs = trainer::pretrain(&archs, &corpora.train, &tv, &tcfg).unwrap();
    let mut conf_entity: Vec<f64> = Vec::new();
    let mut agree_entity = 0usize;
    let mut entity_pred = 0usize;
    for s in corpora.train.sentences.iter() {
        let ids = tv.encode(s);
        let (t1, c1) = tagger::predict(&pairs[0].teacher, &ids).unwrap();
        let (t2, c2) = tagger::predict(&pairs[1].teacher, &ids).unwrap();
        for j in 0..ids.len() {
            if t1[j] != 0 || t2[j] != 0 {
                entity_pred += 1;
                if t1[j] == t2[j] {
                    agree_entity += 1;
                    conf_entity.push(c1[j].min(c2[j]));
                }
            }
        }
    }
    conf_entity.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |p: f64| conf_entity[(p * (conf_entity.len() - 1) as f64) as usize];
    println!(
        "RETENTION: entity-predicted tokens {entity_pred}, agreement {:.3}; min-conf percentiles p10={:.3} p25={:.3} p50={:.3} p75={:.3} p90={:.3}",
        agree_entity as f64 / entity_pred as f64,
        pct(0.1), pct(0.25), pct(0.5), pct(0.75), pct(0.9)
    );
    for sigma1 in [0.3, 0.5, 0.7, 0.9] {
        let kept = conf_entity.iter().filter(|&&c| c > sigma1).count();
        println!("RETENTION sigma1={sigma1}: kept {:.3} of agreed entity tokens", kept as f64 / conf_entity.len() as f64);
    }
}


#[test]
fn calibrate_ablations() {
    let mut full_sum = 0.0;
    let mut fe_sum = 0.0;
    let max_seed: u64 = envu("CAL_SEEDS", 5) as u64;
    let start_seed: u64 = envu("CAL_SEED_START", 1) as u64;
    let mut base_sum = 0.0;
    for seed in start_seed..=max_seed {
        let corpora = bench_corpora(seed);
        let tv = TokenVocab::build(&corpora.train);
        let archs = bench_archs(tv.len(), corpora.train.vocab.len(), seed);
        let mut tcfg = bench_trainer(seed);
        let depth = trainer::select_pretrain_depth(&archs, &corpora, &tv, &tcfg, &[3, 4, 5, 6, 8, 10, 12, 14, 16]).unwrap();
        tcfg.pretrain_epochs = depth;
        let full = trainer::run(&archs, &tcfg, &corpora).unwrap().record.test.unwrap().f1;
        let mut fe_cfg = tcfg.clone();
        for e in &mut fe_cfg.ensemble { e.m = 0.0; e.sigma2 = 0.0; }
        let fe = trainer::run(&archs, &fe_cfg, &corpora).unwrap().record.test.unwrap().f1;
        let base = trainer::run_distant_baseline(&archs, &tcfg, &corpora).unwrap().record.test.unwrap().f1;
        println!("ABLATE seed{seed}: full={full:.10} no_fe={fe:.10} baseline={base:.10} vs_fe={:+.4} vs_base={:+.4} depth={depth}", full - fe, full - base);
        full_sum += full;
        fe_sum += fe;
        base_sum += base;
    }
    let n = max_seed as f64;
    println!("ABLATE mean: full={:.6} no_fe={:.6} baseline={:.6}", full_sum / n, fe_sum / n, base_sum / n);
}
