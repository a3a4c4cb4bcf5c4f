//! End-to-end wiring: data generation, predictor and masked-LM training,
//! feature extraction, estimator training, evaluation, the ablation ladder
//! and the corpus-filtering experiment.

use crate::config::RunConfig;
use crate::corpus::{
    self, corrupt, gen_parallel, make_qe_dataset, CorpusError, ParallelPair, QeDataConfig,
    QeDataset, QESample, Vocabulary,
};
use crate::estimator::{
    EstimatorConfig, EstimatorError, EstimatorModel, QEPrediction, Task, TrainReport,
};
use crate::eval::{self, EvalError, SentenceEvalReport, WordEvalReport};
use crate::features::{self, FeatureError, QeFeatures};
use crate::filter::{filter_corpus, FilterError, FilterReport, SentenceScorer};
use crate::nmt::{DualPredictor, EpochStats, NmtConfig, NmtError};
use crate::nn::Adam;
use crate::rng::SeededRng;
use crate::xlm::{self, MaskPolicy, XlmConfig, XlmError, XlmModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Nmt(#[from] NmtError),
    #[error(transparent)]
    Xlm(#[from] XlmError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

/// Pipeline variants in the incremental order of the ablation ladder: a
/// single-direction single-expert baseline, plus the XLM stream, plus
/// mixture-of-experts dual training, plus the dual-model feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    NmtOnly,
    PlusXlm,
    PlusMixtureDual,
    Full,
}

impl Variant {
    pub const LADDER: [Variant; 4] = [
        Variant::NmtOnly,
        Variant::PlusXlm,
        Variant::PlusMixtureDual,
        Variant::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::NmtOnly => "nmt-only",
            Variant::PlusXlm => "+xlm",
            Variant::PlusMixtureDual => "+mixture-dual",
            Variant::Full => "+dual-feature",
        }
    }

    pub fn uses_xlm(self) -> bool {
        self != Variant::NmtOnly
    }

    pub fn uses_mixture_dual(self) -> bool {
        matches!(self, Variant::PlusMixtureDual | Variant::Full)
    }

    pub fn uses_dual_feature(self) -> bool {
        self == Variant::Full
    }
}

/// Generated synthetic world: model vocabulary, parallel corpus (in model
/// token ids) and the labelled QE dataset (word strings).
#[derive(Debug, Clone)]
pub struct PipelineData {
    /// Word-level vocabulary the corpus and labels were generated with.
    pub word_vocab: Vocabulary,
    /// Vocabulary the models consume (equal to `word_vocab` unless BPE
    /// merges were trained, in which case it holds subwords).
    pub vocab: Vocabulary,
    pub pairs: Vec<ParallelPair>,
    pub qe: QeDataset,
}

/// Generate corpus + QE data from the config. Pure function of the config.
pub fn generate_data(cfg: &RunConfig) -> Result<PipelineData, PipelineError> {
    let word_vocab = Vocabulary::synthetic(cfg.data.vocab_content_size, cfg.model.expert_count);
    let word_pairs = gen_parallel(
        cfg.seed ^ 0x6461_7461, // independent stream per stage
        cfg.data.n_pairs,
        &word_vocab,
        cfg.data.style_count,
    )?;
    let qe = make_qe_dataset(
        &word_pairs,
        &word_vocab,
        QeDataConfig {
            rates: cfg.data.corruption,
            split: cfg.data.split,
        },
        cfg.seed,
    )?;
    let (vocab, pairs) = if cfg.data.bpe_merges > 0 {
        let mut freq: std::collections::HashMap<String, u64> = std::collections::HashMap::new();
        for pair in &word_pairs {
            for &id in pair.source.iter().chain(&pair.target) {
                *freq.entry(word_vocab.token(id).to_string()).or_insert(0) += 1;
            }
        }
        let merges = corpus::train_bpe(&freq, cfg.data.bpe_merges);
        let mut inventory: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut words: Vec<&String> = freq.keys().collect();
        words.sort();
        for w in words {
            for sub in corpus::segment(w, &merges) {
                if seen.insert(sub.clone()) {
                    inventory.push(sub);
                }
            }
        }
        let vocab = Vocabulary::new(inventory, cfg.model.expert_count, merges);
        let pairs = word_pairs
            .iter()
            .map(|p| ParallelPair {
                source: vocab.encode_words(&word_vocab.decode(&p.source)).0,
                target: vocab.encode_words(&word_vocab.decode(&p.target)).0,
                style_id: p.style_id,
            })
            .collect();
        (vocab, pairs)
    } else {
        (word_vocab.clone(), word_pairs)
    };
    Ok(PipelineData {
        word_vocab,
        vocab,
        pairs,
        qe,
    })
}

/// Train an NMT predictor on a parallel corpus. `dual` toggles the
/// target-to-source pass; `experts` sets the active mixture size.
pub fn train_predictor(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    pairs: &[ParallelPair],
    dual: bool,
    experts: usize,
    epochs: usize,
    seed: u64,
) -> Result<(DualPredictor<f32>, Vec<EpochStats>), PipelineError> {
    let nmt_cfg = NmtConfig {
        vocab_size: vocab.size(),
        d: cfg.model.d,
        heads: cfg.model.heads,
        layers: cfg.model.layers,
        ff: cfg.model.ff,
        expert_count: experts,
        reserved_sos: vocab.expert_count(),
        max_len: cfg.model.max_len,
    };
    let mut model = DualPredictor::<f32>::init(nmt_cfg, seed);
    let adam = Adam {
        lr: cfg.optim.lr,
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
    };
    let mut rng = SeededRng::derive(seed, "nmt-train");
    let mut stats = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        stats.push(model.train_epoch(pairs, &adam, cfg.optim.batch_size, dual, &mut rng)?);
    }
    Ok((model, stats))
}

/// Pretrain the masked LM on the corpus: each batch item is a
/// translation-pair batch with probability `tlm_mix`, otherwise monolingual
/// masking over a source or target half.
pub fn pretrain_xlm(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    pairs: &[ParallelPair],
    seed: u64,
) -> Result<(XlmModel<f32>, Vec<f64>), PipelineError> {
    let xlm_cfg = XlmConfig {
        vocab_size: vocab.size(),
        d: cfg.model.d,
        heads: cfg.model.heads,
        layers: cfg.model.layers,
        ff: cfg.model.ff,
        expert_count: vocab.expert_count(),
        max_len: cfg.model.max_len,
    };
    let mut model = XlmModel::<f32>::init(xlm_cfg, seed);
    let adam = Adam {
        lr: cfg.optim.lr,
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
    };
    let mut rng = SeededRng::derive(seed, "xlm-train");
    let mut losses = Vec::new();
    for _ in 0..cfg.optim.xlm_steps {
        let mut batch = Vec::with_capacity(cfg.optim.batch_size);
        for _ in 0..cfg.optim.batch_size {
            let pair = &pairs[rng.usize_below(pairs.len())];
            let item = if rng.chance(cfg.optim.tlm_mix) {
                xlm::tlm_batch(
                    pair,
                    cfg.optim.mask_rate,
                    MaskPolicy::default(),
                    &mut rng,
                    vocab,
                )?
            } else {
                let (seq, lang) = if rng.chance(0.5) {
                    (&pair.source, xlm::Lang::Src)
                } else {
                    (&pair.target, xlm::Lang::Tgt)
                };
                xlm::mlm_mask(
                    seq,
                    lang,
                    cfg.optim.mask_rate,
                    MaskPolicy::default(),
                    &mut rng,
                    vocab,
                )?
            };
            batch.push(item);
        }
        if let Some(loss) = model.pretrain_step(&batch, &adam)?.loss {
            losses.push(loss);
        }
    }
    Ok((model, losses))
}

/// A fully trained pipeline able to produce QE predictions.
pub struct QePipeline {
    pub vocab: Vocabulary,
    pub predictor: DualPredictor<f32>,
    pub xlm: Option<XlmModel<f32>>,
    pub sentence: EstimatorModel<f32>,
    pub word: EstimatorModel<f32>,
    pub gap: EstimatorModel<f32>,
    pub include_dual: bool,
}

impl QePipeline {
    pub fn features_for(
        &self,
        source: &[String],
        mt: &[String],
    ) -> Result<QeFeatures<f32>, PipelineError> {
        Ok(features::extract_features(
            &self.predictor,
            self.xlm.as_ref(),
            &self.vocab,
            source,
            mt,
            self.include_dual,
        )?)
    }

    /// Sentence HTER estimate plus word/gap BAD probabilities.
    pub fn predict(&self, source: &[String], mt: &[String]) -> Result<QEPrediction, PipelineError> {
        let feats = self.features_for(source, mt)?;
        let hter_hat = self.sentence.predict_hter(&feats)?;
        let word_bad_probs = self.word.tag_probs(Task::Word, &feats)?.blended;
        let gap_bad_probs = self.gap.tag_probs(Task::Gap, &feats)?.blended;
        Ok(QEPrediction {
            hter_hat,
            word_bad_probs,
            gap_bad_probs,
            threshold: self.word.cfg.tag_threshold,
        })
    }
}

impl SentenceScorer for QePipeline {
    fn score(&self, source: &[String], mt: &[String]) -> Result<f64, PipelineError> {
        let feats = self.features_for(source, mt)?;
        Ok(self.sentence.predict_hter(&feats)?)
    }
}

/// Dev/test evaluation of a pipeline: sentence metrics plus the combined
/// word+gap report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub sentence: SentenceEvalReport,
    pub word: WordEvalReport,
}

impl EvalSummary {
    /// Flat metric-name → value document.
    pub fn to_metric_map(&self) -> std::collections::BTreeMap<String, f64> {
        let mut m = std::collections::BTreeMap::new();
        m.insert("sentence_pearson".into(), self.sentence.pearson);
        m.insert("sentence_mae".into(), self.sentence.mae);
        m.insert("sentence_rmse".into(), self.sentence.rmse);
        m.insert("word_mcc".into(), self.word.mcc);
        m.insert("word_f1_bad".into(), self.word.f1_bad);
        m.insert("word_f1_ok".into(), self.word.f1_ok);
        m
    }
}

pub fn evaluate_pipeline(
    pipeline: &QePipeline,
    samples: &[QESample],
) -> Result<EvalSummary, PipelineError> {
    let mut gold_hter = Vec::with_capacity(samples.len());
    let mut pred_hter = Vec::with_capacity(samples.len());
    let mut gold_tags = Vec::with_capacity(samples.len());
    let mut pred_tags = Vec::with_capacity(samples.len());
    for s in samples {
        let p = pipeline.predict(&s.source, &s.mt)?;
        gold_hter.push(s.hter);
        pred_hter.push(p.hter_hat);
        gold_tags.push((s.word_tags.clone(), s.gap_tags.clone()));
        pred_tags.push((p.word_tags(), p.gap_tags()));
    }
    Ok(EvalSummary {
        sentence: eval::sentence_eval(&gold_hter, &pred_hter)?,
        word: eval::word_level_eval(&gold_tags, &pred_tags)?,
    })
}

/// Per-stage summaries of one pipeline training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub variant: Variant,
    pub nmt_primal_loss: Vec<f64>,
    pub nmt_dual_loss: Vec<f64>,
    pub xlm_final_loss: Option<f64>,
    pub estimator_best_dev: std::collections::BTreeMap<String, f64>,
    pub dev: EvalSummary,
}

fn extract_split(
    predictor: &DualPredictor<f32>,
    xlm: Option<&XlmModel<f32>>,
    vocab: &Vocabulary,
    samples: &[QESample],
    include_dual: bool,
) -> Result<Vec<QeFeatures<f32>>, PipelineError> {
    samples
        .iter()
        .map(|s| {
            features::extract_features(predictor, xlm, vocab, &s.source, &s.mt, include_dual)
                .map_err(PipelineError::from)
        })
        .collect()
}

fn train_estimator_task(
    cfg: &RunConfig,
    est_cfg: EstimatorConfig,
    task: Task,
    train: &[(&QeFeatures<f32>, &QESample)],
    dev: &[(&QeFeatures<f32>, &QESample)],
    seed: u64,
) -> Result<(EstimatorModel<f32>, TrainReport), PipelineError> {
    let mut model = EstimatorModel::<f32>::init(est_cfg, seed);
    let adam = Adam {
        lr: cfg.optim.estimator_lr,
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
    };
    let report = model.train(
        task,
        train,
        dev,
        cfg.optim.estimator_epochs,
        cfg.optim.batch_size,
        &adam,
        seed,
    )?;
    Ok((model, report))
}

/// Train the full pipeline for one variant and evaluate it on dev.
pub fn train_pipeline(
    cfg: &RunConfig,
    variant: Variant,
    data: &PipelineData,
) -> Result<(QePipeline, PipelineReport), PipelineError> {
    let experts = if variant.uses_mixture_dual() {
        cfg.model.expert_count
    } else {
        1
    };
    let include_dual = variant.uses_dual_feature();
    let (predictor, nmt_stats) = train_predictor(
        cfg,
        &data.vocab,
        &data.pairs,
        variant.uses_mixture_dual(),
        experts,
        cfg.optim.nmt_epochs,
        cfg.seed ^ 0x6e6d_7400,
    )?;
    let (xlm, xlm_losses) = if variant.uses_xlm() {
        let (m, losses) = pretrain_xlm(cfg, &data.vocab, &data.pairs, cfg.seed ^ 0x786c_6d00)?;
        (Some(m), losses)
    } else {
        (None, Vec::new())
    };

    let train_feats = extract_split(
        &predictor,
        xlm.as_ref(),
        &data.vocab,
        &data.qe.train,
        include_dual,
    )?;
    let dev_feats = extract_split(
        &predictor,
        xlm.as_ref(),
        &data.vocab,
        &data.qe.dev,
        include_dual,
    )?;
    fn zip<'a>(
        feats: &'a [QeFeatures<f32>],
        samples: &'a [QESample],
    ) -> Vec<(&'a QeFeatures<f32>, &'a QESample)> {
        feats.iter().zip(samples.iter()).collect()
    }

    let est_cfg = EstimatorConfig {
        input_width: features::feature_width(experts, cfg.model.d, include_dual),
        hidden: cfg.estimator.hidden,
        head_hidden: cfg.estimator.head_hidden,
        pool_k: cfg.estimator.pool_k,
        pool_mode: cfg.estimator.pool_mode,
        blend_nmt: cfg.estimator.blend_nmt,
        bad_weight: cfg.estimator.bad_weight,
        tag_threshold: cfg.estimator.tag_threshold,
        dual_stream: variant.uses_xlm(),
    };
    let train_refs = zip(&train_feats, &data.qe.train);
    let dev_refs = zip(&dev_feats, &data.qe.dev);
    let (sentence, sent_rep) = train_estimator_task(
        cfg,
        est_cfg,
        Task::Sentence,
        &train_refs,
        &dev_refs,
        cfg.seed ^ 0x0531,
    )?;
    let (word, word_rep) = train_estimator_task(
        cfg,
        est_cfg,
        Task::Word,
        &train_refs,
        &dev_refs,
        cfg.seed ^ 0x0532,
    )?;
    let (gap, gap_rep) = train_estimator_task(
        cfg,
        est_cfg,
        Task::Gap,
        &train_refs,
        &dev_refs,
        cfg.seed ^ 0x0533,
    )?;

    let pipeline = QePipeline {
        vocab: data.vocab.clone(),
        predictor,
        xlm,
        sentence,
        word,
        gap,
        include_dual,
    };
    let dev = evaluate_pipeline(&pipeline, &data.qe.dev)?;
    let mut estimator_best_dev = std::collections::BTreeMap::new();
    estimator_best_dev.insert("sentence".to_string(), sent_rep.best_dev);
    estimator_best_dev.insert("word".to_string(), word_rep.best_dev);
    estimator_best_dev.insert("gap".to_string(), gap_rep.best_dev);
    let report = PipelineReport {
        variant,
        nmt_primal_loss: nmt_stats.iter().map(|s| s.primal_loss).collect(),
        nmt_dual_loss: nmt_stats.iter().filter_map(|s| s.dual_loss).collect(),
        xlm_final_loss: xlm_losses.last().copied(),
        estimator_best_dev,
        dev,
    };
    Ok((pipeline, report))
}

/// One row of the ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub sentence_pearson: f64,
    pub sentence_mae: f64,
    pub sentence_rmse: f64,
    pub word_mcc: f64,
    pub word_f1_bad: f64,
    pub word_f1_ok: f64,
}

/// Run the four-variant ladder (shared data, shared budgets) and report one
/// row per variant, in incremental order.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>, PipelineError> {
    let data = generate_data(cfg)?;
    let mut rows = Vec::with_capacity(Variant::LADDER.len());
    for variant in Variant::LADDER {
        let (_, report) = train_pipeline(cfg, variant, &data)?;
        rows.push(AblationRow {
            variant,
            label: variant.label().to_string(),
            sentence_pearson: report.dev.sentence.pearson,
            sentence_mae: report.dev.sentence.mae,
            sentence_rmse: report.dev.sentence.rmse,
            word_mcc: report.dev.word.mcc,
            word_f1_bad: report.dev.word.f1_bad,
            word_f1_ok: report.dev.word.f1_ok,
        });
    }
    Ok(rows)
}

/// Render ablation rows as an aligned text table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "variant          pearson    mae     rmse    mcc     f1-bad  f1-ok\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n",
            r.label,
            r.sentence_pearson,
            r.sentence_mae,
            r.sentence_rmse,
            r.word_mcc,
            r.word_f1_bad,
            r.word_f1_ok
        ));
    }
    out
}

// ── corpus-filtering experiment ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub bleu_unfiltered: f64,
    pub bleu_filtered: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub filter: FilterReport,
    pub seeds: Vec<SeedOutcome>,
    /// Seeds where the filtered corpus retrained at least as well.
    pub filtered_wins: usize,
}

/// Corrupt a fraction of corpus targets (ground truth recorded as flags).
pub fn corrupt_corpus(
    pairs: &[ParallelPair],
    vocab: &Vocabulary,
    fraction: f64,
    rates: crate::corpus::CorruptionRates,
    seed: u64,
) -> Result<(Vec<ParallelPair>, Vec<bool>), PipelineError> {
    let mut rng = SeededRng::derive(seed, "corpus-corruption");
    let mut out = Vec::with_capacity(pairs.len());
    let mut flags = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let hit = rng.chance(fraction);
        flags.push(hit);
        if hit {
            let mt = loop {
                let (mt, _, _) = corrupt(&pair.target, rates, &mut rng, vocab)?;
                if !mt.is_empty() {
                    break mt;
                }
            };
            out.push(ParallelPair {
                source: pair.source.clone(),
                target: mt,
                style_id: pair.style_id,
            });
        } else {
            out.push(pair.clone());
        }
    }
    Ok((out, flags))
}

/// Retrain a fresh single-expert predictor and return dev BLEU averaged
/// over the best three per-epoch checkpoints.
fn retrain_bleu(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    corpus: &[ParallelPair],
    dev: &[ParallelPair],
    seed: u64,
) -> Result<f64, PipelineError> {
    let nmt_cfg = NmtConfig {
        vocab_size: vocab.size(),
        d: cfg.model.d,
        heads: cfg.model.heads,
        layers: cfg.model.layers,
        ff: cfg.model.ff,
        expert_count: 1,
        reserved_sos: vocab.expert_count(),
        max_len: cfg.model.max_len,
    };
    let mut model = DualPredictor::<f32>::init(nmt_cfg, seed);
    let adam = Adam {
        lr: cfg.optim.lr,
        beta1: cfg.optim.beta1,
        beta2: cfg.optim.beta2,
        eps: cfg.optim.eps,
    };
    let mut rng = SeededRng::derive(seed, "retrain");
    let mut bleus = Vec::with_capacity(cfg.filter.retrain_epochs);
    for _ in 0..cfg.filter.retrain_epochs {
        model.train_epoch(corpus, &adam, cfg.optim.batch_size, true, &mut rng)?;
        let mut hyps = Vec::with_capacity(dev.len());
        let mut refs = Vec::with_capacity(dev.len());
        for pair in dev {
            let (hyp, _) = model.greedy_decode(&pair.source, 0, cfg.model.max_len.min(24))?;
            hyps.push(hyp);
            refs.push(pair.target.clone());
        }
        bleus.push(eval::corpus_bleu(&hyps, &refs, 4)?);
    }
    bleus.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let top = &bleus[..bleus.len().min(3)];
    Ok(top.iter().sum::<f64>() / top.len() as f64)
}

/// The end-to-end filtering experiment: train a QE pipeline on clean
/// synthetic data, score a partly corrupted corpus, drop the highest
/// predicted-HTER fraction, and compare retraining on the filtered corpus
/// against the unfiltered one (identical budgets) across several seeds.
/// The experiment corpus is single-style so dev BLEU has one valid
/// reference per source.
pub fn filtering_experiment(cfg: &RunConfig) -> Result<ExperimentReport, PipelineError> {
    // 1. A pipeline to score with, trained on its own clean data.
    let mut pipe_cfg = cfg.clone();
    pipe_cfg.data.style_count = 1;
    pipe_cfg.seed = cfg.seed ^ 0x7069_7065;
    let data = generate_data(&pipe_cfg)?;
    let (pipeline, _) = train_pipeline(&pipe_cfg, Variant::Full, &data)?;

    // 2. A partly corrupted corpus with ground-truth flags.
    let clean = gen_parallel(
        cfg.seed ^ 0x636f_7270,
        cfg.filter.experiment_pairs,
        &data.word_vocab,
        1,
    )?;
    let (corpus, flags) = corrupt_corpus(
        &clean,
        &data.word_vocab,
        cfg.filter.corrupt_fraction,
        cfg.data.corruption,
        cfg.seed ^ 0x666c_6167,
    )?;

    // 3. Score and filter.
    let outcome = filter_corpus(
        &corpus,
        &data.vocab,
        &pipeline,
        cfg.filter.drop_fraction,
        Some(&flags),
    )?;

    // 4. Retrain comparison on identical budgets.
    let dev = gen_parallel(
        cfg.seed ^ 0x6465_7620,
        cfg.filter.experiment_dev_pairs,
        &data.word_vocab,
        1,
    )?;
    let mut seeds = Vec::with_capacity(cfg.filter.experiment_seeds.len());
    let mut filtered_wins = 0usize;
    for &seed in &cfg.filter.experiment_seeds {
        let bleu_unfiltered = retrain_bleu(cfg, &data.vocab, &corpus, &dev, seed)?;
        let bleu_filtered = retrain_bleu(cfg, &data.vocab, &outcome.kept, &dev, seed)?;
        if bleu_filtered >= bleu_unfiltered {
            filtered_wins += 1;
        }
        seeds.push(SeedOutcome {
            seed,
            bleu_unfiltered,
            bleu_filtered,
        });
    }
    Ok(ExperimentReport {
        filter: outcome.report,
        seeds,
        filtered_wins,
    })
}

/// Expert-style agreement on a held-out set: greedily decode every source
/// with every expert, match experts to styles by best agreement (greedy
/// bipartite matching) and report the per-expert exact-match accuracy under
/// that assignment, plus how often expert outputs are pairwise distinct.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecializationReport {
    /// expert → style assignment.
    pub assignment: Vec<usize>,
    /// Exact-match accuracy of each expert on its assigned style.
    pub per_expert_accuracy: Vec<f64>,
    /// Fraction of sources whose expert hypotheses are pairwise distinct.
    pub distinct_fraction: f64,
}

pub fn expert_specialization(
    predictor: &DualPredictor<f32>,
    maps: &crate::corpus::StyleMaps,
    sources: &[Vec<u32>],
    max_len: usize,
) -> Result<SpecializationReport, PipelineError> {
    let k = predictor.cfg.expert_count;
    let styles = maps.style_count();
    let mut hits = vec![vec![0usize; styles]; k];
    let mut distinct = 0usize;
    for source in sources {
        let mut hyps = Vec::with_capacity(k);
        for expert in 0..k {
            let (hyp, _) = predictor.greedy_decode(source, expert, max_len)?;
            hyps.push(hyp);
        }
        for (expert, hyp) in hyps.iter().enumerate() {
            for style in 0..styles {
                if *hyp == maps.translate(style, source) {
                    hits[expert][style] += 1;
                }
            }
        }
        let mut all_distinct = true;
        for a in 0..k {
            for b in (a + 1)..k {
                if hyps[a] == hyps[b] {
                    all_distinct = false;
                }
            }
        }
        if all_distinct {
            distinct += 1;
        }
    }
    // Greedy bipartite matching on hit counts.
    let mut assignment = vec![usize::MAX; k];
    let mut taken = vec![false; styles];
    let mut order: Vec<(usize, usize, usize)> = Vec::new();
    for (e, row) in hits.iter().enumerate() {
        for (s, &h) in row.iter().enumerate() {
            order.push((h, e, s));
        }
    }
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, e, s) in order {
        if assignment[e] == usize::MAX && !taken[s] {
            assignment[e] = s;
            taken[s] = true;
        }
    }
    let n = sources.len().max(1) as f64;
    let per_expert_accuracy: Vec<f64> = assignment
        .iter()
        .enumerate()
        .map(|(e, &s)| {
            if s == usize::MAX {
                0.0
            } else {
                hits[e][s] as f64 / n
            }
        })
        .collect();
    Ok(SpecializationReport {
        assignment,
        per_expert_accuracy,
        distinct_fraction: distinct as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.model.d = 16;
        cfg.model.heads = 2;
        cfg.model.layers = 1;
        cfg.model.ff = 24;
        cfg.model.expert_count = 2;
        cfg.data.vocab_content_size = 16;
        cfg.data.n_pairs = 30;
        cfg.data.style_count = 2;
        cfg.optim.nmt_epochs = 1;
        cfg.optim.xlm_steps = 3;
        cfg.optim.estimator_epochs = 2;
        cfg.estimator.hidden = 8;
        cfg.estimator.head_hidden = 8;
        cfg.filter.experiment_pairs = 20;
        cfg.filter.experiment_dev_pairs = 8;
        cfg.filter.retrain_epochs = 3;
        cfg.filter.experiment_seeds = vec![1];
        cfg
    }

    #[test]
    fn generate_data_is_deterministic() {
        let cfg = tiny_cfg();
        let a = generate_data(&cfg).unwrap();
        let b = generate_data(&cfg).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.qe, b.qe);
    }

    #[test]
    fn bpe_data_reencodes_pairs() {
        let mut cfg = tiny_cfg();
        cfg.data.bpe_merges = 10;
        let data = generate_data(&cfg).unwrap();
        assert_ne!(data.vocab.fingerprint(), data.word_vocab.fingerprint());
        // Subword sequences are at least as long as word sequences.
        let plain = generate_data(&tiny_cfg()).unwrap();
        for (a, b) in data.pairs.iter().zip(&plain.pairs) {
            assert!(a.source.len() >= b.source.len());
        }
        // QE labels stay at word level regardless of model vocabulary.
        assert_eq!(data.qe, plain.qe);
    }

    #[test]
    fn tiny_pipeline_trains_and_predicts() {
        let cfg = tiny_cfg();
        let data = generate_data(&cfg).unwrap();
        let (pipeline, report) = train_pipeline(&cfg, Variant::Full, &data).unwrap();
        assert!(report.nmt_primal_loss[0].is_finite());
        let s = &data.qe.dev[0];
        let p = pipeline.predict(&s.source, &s.mt).unwrap();
        assert!(p.validate());
        assert_eq!(p.word_bad_probs.len(), s.mt.len());
    }

    #[test]
    fn variant_ladder_labels_in_order() {
        let labels: Vec<&str> = Variant::LADDER.iter().map(|v| v.label()).collect();
        assert_eq!(
            labels,
            vec!["nmt-only", "+xlm", "+mixture-dual", "+dual-feature"]
        );
        assert!(!Variant::NmtOnly.uses_xlm());
        assert!(!Variant::PlusXlm.uses_mixture_dual());
        assert!(Variant::PlusMixtureDual.uses_mixture_dual());
        assert!(!Variant::PlusMixtureDual.uses_dual_feature());
        assert!(Variant::Full.uses_dual_feature());
    }

    #[test]
    fn zero_drop_experiment_gives_identical_bleu() {
        let mut cfg = tiny_cfg();
        cfg.filter.drop_fraction = 0.0;
        cfg.optim.nmt_epochs = 1;
        cfg.optim.estimator_epochs = 1;
        let report = filtering_experiment(&cfg).unwrap();
        for s in &report.seeds {
            assert_eq!(s.bleu_unfiltered.to_bits(), s.bleu_filtered.to_bits());
        }
    }
}
