//! The QE estimator: one shared-weight Bi-GRU over both feature streams,
//! a sentence regression head (top-k pooling + two affine layers), word and
//! gap classification heads (two affine layers each), stream blending, and
//! a stacking ensemble for combining multiple systems.

use crate::checkpoint::{self, CheckpointError, LoadedCheckpoint};
use crate::corpus::{QESample, Tag};
use crate::features::{FeatureMatrix, QeFeatures};
use crate::nn::{
    accumulate_grads, Adam, BiGru, Graph, Linear, NodeId, OptimError, Parameter, PoolMode, Scalar,
};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("feature width {got} does not match the estimator's input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("estimator was built for dual_stream={expected} but features say otherwise")]
    StreamMismatch { expected: bool },
    #[error("blend weights must sum to 1, got {0}")]
    BlendWeights(f64),
    #[error("probability vectors differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty sentence")]
    EmptySentence,
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Which estimator task a model instance is trained for. Gap tagging is a
/// separate task with its own head and training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Sentence,
    Word,
    Gap,
}

impl Task {
    pub fn checkpoint_kind(self) -> &'static str {
        match self {
            Task::Sentence => "sentence-estimator",
            Task::Word => "word-estimator",
            Task::Gap => "gap-estimator",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub input_width: usize,
    /// Bi-GRU hidden size h; the single GRU weight set serves both streams.
    pub hidden: usize,
    pub head_hidden: usize,
    pub pool_k: usize,
    pub pool_mode: PoolMode,
    /// NMT-stream weight for blending per-class probabilities (XLM stream
    /// gets the complement).
    pub blend_nmt: f64,
    /// Loss weight of BAD-class positions in word/gap training.
    pub bad_weight: f64,
    /// BAD probability above this tags a position BAD.
    pub tag_threshold: f64,
    /// Whether an XLM stream is present.
    pub dual_stream: bool,
}

impl EstimatorConfig {
    pub fn streams(&self) -> usize {
        if self.dual_stream {
            2
        } else {
            1
        }
    }
}

/// Convex blend of per-position BAD probabilities from the two streams.
pub fn combine_streams(
    p_nmt: &[f64],
    p_xlm: &[f64],
    w_nmt: f64,
    w_xlm: f64,
) -> Result<Vec<f64>, EstimatorError> {
    if (w_nmt + w_xlm - 1.0).abs() > 1e-9 {
        return Err(EstimatorError::BlendWeights(w_nmt + w_xlm));
    }
    if p_nmt.len() != p_xlm.len() {
        return Err(EstimatorError::LengthMismatch {
            a: p_nmt.len(),
            b: p_xlm.len(),
        });
    }
    Ok(p_nmt
        .iter()
        .zip(p_xlm)
        .map(|(a, b)| w_nmt * a + w_xlm * b)
        .collect())
}

/// Per-position BAD probabilities of one task, per stream and blended.
#[derive(Debug, Clone)]
pub struct TagProbs {
    pub nmt: Vec<f64>,
    pub xlm: Option<Vec<f64>>,
    pub blended: Vec<f64>,
}

/// Full prediction for one sentence: HTER plus word/gap BAD probabilities.
#[derive(Debug, Clone)]
pub struct QEPrediction {
    pub hter_hat: f64,
    pub word_bad_probs: Vec<f64>,
    pub gap_bad_probs: Vec<f64>,
    pub threshold: f64,
}

impl QEPrediction {
    pub fn word_tags(&self) -> Vec<Tag> {
        self.word_bad_probs
            .iter()
            .map(|p| if *p > self.threshold { Tag::Bad } else { Tag::Ok })
            .collect()
    }

    pub fn gap_tags(&self) -> Vec<Tag> {
        self.gap_bad_probs
            .iter()
            .map(|p| if *p > self.threshold { Tag::Bad } else { Tag::Ok })
            .collect()
    }

    pub fn validate(&self) -> bool {
        self.gap_bad_probs.len() == self.word_bad_probs.len() + 1
            && (0.0..=1.0).contains(&self.hter_hat)
    }
}

#[derive(Debug, Clone)]
pub struct EstimatorModel<F: Scalar> {
    pub cfg: EstimatorConfig,
    pub gru: BiGru<F>,
    pub sentence_head: (Linear<F>, Linear<F>),
    pub word_head: (Linear<F>, Linear<F>),
    pub gap_head: (Linear<F>, Linear<F>),
}

impl<F: Scalar> EstimatorModel<F> {
    pub fn init(cfg: EstimatorConfig, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, "estimator-init");
        let h2 = 2 * cfg.hidden;
        let gru = BiGru::init("est.gru", cfg.input_width, cfg.hidden, &mut rng);
        let sentence_head = (
            Linear::init(
                "est.sentence.lin1",
                cfg.streams() * h2,
                cfg.head_hidden,
                true,
                &mut rng,
            ),
            Linear::init("est.sentence.lin2", cfg.head_hidden, 1, true, &mut rng),
        );
        let word_head = (
            Linear::init("est.word.lin1", h2, cfg.head_hidden, true, &mut rng),
            Linear::init("est.word.lin2", cfg.head_hidden, 2, true, &mut rng),
        );
        let gap_head = (
            Linear::init("est.gap.lin1", h2, cfg.head_hidden, true, &mut rng),
            Linear::init("est.gap.lin2", cfg.head_hidden, 2, true, &mut rng),
        );
        Self {
            cfg,
            gru,
            sentence_head,
            word_head,
            gap_head,
        }
    }

    fn check_features(&self, feats: &QeFeatures<F>) -> Result<(), EstimatorError> {
        if feats.width() != self.cfg.input_width {
            return Err(EstimatorError::WidthMismatch {
                expected: self.cfg.input_width,
                got: feats.width(),
            });
        }
        if feats.xlm_tokens.is_some() != self.cfg.dual_stream {
            return Err(EstimatorError::StreamMismatch {
                expected: self.cfg.dual_stream,
            });
        }
        Ok(())
    }

    fn gru_states(&self, g: &mut Graph<F>, rows: usize, width: usize, values: &[F]) -> NodeId {
        let x = g.constant(vec![rows, width], values.to_vec());
        self.gru.forward(g, x)
    }

    /// Raw (unclamped) sentence score from subword-granularity features:
    /// shared Bi-GRU on each stream, top-k pooling, concatenation, two
    /// affine layers with a ReLU between.
    pub fn sentence_score_node(
        &self,
        g: &mut Graph<F>,
        feats: &QeFeatures<F>,
    ) -> Result<NodeId, EstimatorError> {
        self.check_features(feats)?;
        if feats.nmt_tokens.rows() == 0 {
            return Err(EstimatorError::EmptySentence);
        }
        let mut pooled = Vec::with_capacity(self.cfg.streams());
        let m = &feats.nmt_tokens.matrix;
        let states = self.gru_states(g, m.rows, m.width, &m.values);
        pooled.push(g.topk_pool(states, self.cfg.pool_k, self.cfg.pool_mode));
        if let Some(x) = &feats.xlm_tokens {
            let states = self.gru_states(g, x.matrix.rows, x.matrix.width, &x.matrix.values);
            pooled.push(g.topk_pool(states, self.cfg.pool_k, self.cfg.pool_mode));
        }
        let cat = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat_cols(&pooled)
        };
        let h = self.sentence_head.0.forward(g, cat);
        let h = g.relu(h);
        Ok(self.sentence_head.1.forward(g, h))
    }

    /// Sentence-level HTER estimate, clamped to [0, 1].
    pub fn predict_hter(&self, feats: &QeFeatures<F>) -> Result<f64, EstimatorError> {
        let mut g = Graph::new();
        let raw = self.sentence_score_node(&mut g, feats)?;
        Ok(g.scalar_value(raw).to_f64().clamp(0.0, 1.0))
    }

    fn head(&self, task: Task) -> &(Linear<F>, Linear<F>) {
        match task {
            Task::Sentence => &self.sentence_head,
            Task::Word => &self.word_head,
            Task::Gap => &self.gap_head,
        }
    }

    /// Two-class logits of one stream for the word or gap task.
    fn tag_logits_node(&self, g: &mut Graph<F>, task: Task, matrix: &FeatureMatrix<F>) -> NodeId {
        let states = self.gru_states(g, matrix.rows, matrix.width, &matrix.values);
        let head = self.head(task);
        let h = head.0.forward(g, states);
        let h = g.relu(h);
        head.1.forward(g, h)
    }

    fn stream_matrices<'a>(
        &self,
        task: Task,
        feats: &'a QeFeatures<F>,
    ) -> (&'a FeatureMatrix<F>, Option<&'a FeatureMatrix<F>>) {
        match task {
            Task::Word | Task::Sentence => (&feats.nmt_words, feats.xlm_words.as_ref()),
            Task::Gap => (&feats.nmt_gaps, feats.xlm_gaps.as_ref()),
        }
    }

    /// Per-position BAD probabilities (class 1) for the word or gap task,
    /// per stream, plus the convex blend.
    pub fn tag_probs(&self, task: Task, feats: &QeFeatures<F>) -> Result<TagProbs, EstimatorError> {
        self.check_features(feats)?;
        let (nmt_m, xlm_m) = self.stream_matrices(task, feats);
        if nmt_m.rows == 0 {
            return Err(EstimatorError::EmptySentence);
        }
        let bad_of = |g: &mut Graph<F>, logits: NodeId, rows: usize| -> Vec<f64> {
            let probs = g.softmax(logits, 1);
            (0..rows)
                .map(|i| g.values(probs)[i * 2 + 1].to_f64())
                .collect()
        };
        let mut g = Graph::new();
        let logits = self.tag_logits_node(&mut g, task, nmt_m);
        let nmt = bad_of(&mut g, logits, nmt_m.rows);
        let xlm = match xlm_m {
            Some(m) => {
                let logits = self.tag_logits_node(&mut g, task, m);
                Some(bad_of(&mut g, logits, m.rows))
            }
            None => None,
        };
        let blended = match &xlm {
            Some(x) => combine_streams(&nmt, x, self.cfg.blend_nmt, 1.0 - self.cfg.blend_nmt)?,
            None => nmt.clone(),
        };
        Ok(TagProbs { nmt, xlm, blended })
    }

    // ── training ────────────────────────────────────────────────────────

    fn sentence_loss_node(
        &self,
        g: &mut Graph<F>,
        feats: &QeFeatures<F>,
        hter: f64,
    ) -> Result<NodeId, EstimatorError> {
        let raw = self.sentence_score_node(g, feats)?;
        let label = g.constant(vec![1, 1], vec![F::from_f64(hter)]);
        let diff = g.sub(raw, label);
        Ok(g.mul(diff, diff))
    }

    fn tag_loss_node(
        &self,
        g: &mut Graph<F>,
        task: Task,
        matrix: &FeatureMatrix<F>,
        tags: &[Tag],
    ) -> Result<NodeId, EstimatorError> {
        if matrix.rows != tags.len() {
            return Err(EstimatorError::LengthMismatch {
                a: matrix.rows,
                b: tags.len(),
            });
        }
        let logits = self.tag_logits_node(g, task, matrix);
        let lsm = g.log_softmax(logits);
        let idx: Vec<usize> = tags
            .iter()
            .map(|t| if *t == Tag::Bad { 1 } else { 0 })
            .collect();
        let picked = g.pick_per_row(lsm, &idx);
        let weights: Vec<F> = tags
            .iter()
            .map(|t| {
                F::from_f64(if *t == Tag::Bad {
                    self.cfg.bad_weight
                } else {
                    1.0
                })
            })
            .collect();
        let total_w: f64 = weights.iter().map(|w| w.to_f64()).sum();
        let w = g.constant(vec![tags.len()], weights);
        let weighted = g.mul(picked, w);
        let total = g.sum(weighted);
        Ok(g.scale(total, -1.0 / total_w))
    }

    fn task_loss_node(
        &self,
        g: &mut Graph<F>,
        task: Task,
        feats: &QeFeatures<F>,
        sample: &QESample,
    ) -> Result<NodeId, EstimatorError> {
        self.check_features(feats)?;
        match task {
            Task::Sentence => self.sentence_loss_node(g, feats, sample.hter),
            Task::Word | Task::Gap => {
                let tags = match task {
                    Task::Word => &sample.word_tags,
                    _ => &sample.gap_tags,
                };
                let (nmt_m, xlm_m) = self.stream_matrices(task, feats);
                // Each stream's prediction must converge on its own; the
                // blend only combines them at inference.
                let mut loss = self.tag_loss_node(g, task, nmt_m, tags)?;
                if let Some(m) = xlm_m {
                    let xlm_loss = self.tag_loss_node(g, task, m, tags)?;
                    loss = g.add(loss, xlm_loss);
                }
                Ok(loss)
            }
        }
    }

    /// Parameters involved in one task: the shared Bi-GRU plus that task's
    /// head.
    pub fn task_params_mut(&mut self, task: Task) -> Vec<&mut Parameter<F>> {
        let mut out = self.gru.params_mut();
        let head = match task {
            Task::Sentence => &mut self.sentence_head,
            Task::Word => &mut self.word_head,
            Task::Gap => &mut self.gap_head,
        };
        out.extend(head.0.params_mut());
        out.extend(head.1.params_mut());
        out
    }

    pub fn task_params(&self, task: Task) -> Vec<&Parameter<F>> {
        let mut out = self.gru.params();
        let head = self.head(task);
        out.extend(head.0.params());
        out.extend(head.1.params());
        out
    }

    /// Dev-set score used for best-epoch selection: Pearson for the
    /// sentence task (falling back below the valid range when correlation
    /// is undefined), blended-tag MCC for word/gap.
    pub fn dev_score(
        &self,
        task: Task,
        dev: &[(&QeFeatures<F>, &QESample)],
    ) -> Result<f64, EstimatorError> {
        match task {
            Task::Sentence => {
                let gold: Vec<f64> = dev.iter().map(|(_, s)| s.hter).collect();
                let mut pred = Vec::with_capacity(dev.len());
                for (f, _) in dev {
                    pred.push(self.predict_hter(f)?);
                }
                match crate::eval::pearson(&gold, &pred) {
                    Ok(r) => Ok(r),
                    Err(_) => {
                        let (_, rmse) = crate::eval::mae_rmse(&gold, &pred)
                            .unwrap_or((f64::INFINITY, f64::INFINITY));
                        Ok(-1.0 - rmse)
                    }
                }
            }
            Task::Word | Task::Gap => {
                let mut gold = Vec::new();
                let mut pred = Vec::new();
                for (f, s) in dev {
                    let probs = self.tag_probs(task, f)?;
                    let tags = match task {
                        Task::Word => &s.word_tags,
                        _ => &s.gap_tags,
                    };
                    gold.extend_from_slice(tags);
                    pred.extend(probs.blended.iter().map(|p| {
                        if *p > self.cfg.tag_threshold {
                            Tag::Bad
                        } else {
                            Tag::Ok
                        }
                    }));
                }
                Ok(crate::eval::mcc(&gold, &pred).unwrap_or(0.0))
            }
        }
    }

    /// Train one task. Mini-batch updates with Adam over per-sample graphs;
    /// the model state that scored best on dev is retained.
    pub fn train(
        &mut self,
        task: Task,
        train: &[(&QeFeatures<F>, &QESample)],
        dev: &[(&QeFeatures<F>, &QESample)],
        epochs: usize,
        batch_size: usize,
        adam: &Adam,
        seed: u64,
    ) -> Result<TrainReport, EstimatorError> {
        if train.is_empty() {
            return Err(EstimatorError::EmptyDataset);
        }
        assert!(batch_size >= 1 && epochs >= 1);
        let mut rng = SeededRng::derive(seed, "estimator-train");
        let mut report = TrainReport {
            task,
            epochs: Vec::with_capacity(epochs),
            best_epoch: 0,
            best_dev: f64::NEG_INFINITY,
        };
        let mut best: Option<Self> = None;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            rng.shuffle(&mut order);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(batch_size) {
                let inv = F::from_f64(1.0 / chunk.len() as f64);
                for &i in chunk {
                    let (f, s) = train[i];
                    let mut g = Graph::new();
                    let loss = self.task_loss_node(&mut g, task, f, s)?;
                    loss_sum += g.scalar_value(loss).to_f64();
                    g.backward(loss, inv);
                    accumulate_grads(&g, self.task_params_mut(task));
                }
                adam.step(self.task_params_mut(task))?;
            }
            let train_loss = loss_sum / train.len() as f64;
            let dev_score = if dev.is_empty() {
                -train_loss
            } else {
                self.dev_score(task, dev)?
            };
            report.epochs.push(EpochReport {
                epoch,
                train_loss,
                dev_score,
            });
            if dev_score > report.best_dev {
                report.best_dev = dev_score;
                report.best_epoch = epoch;
                best = Some(self.clone());
            }
        }
        if let Some(b) = best {
            *self = b;
        }
        Ok(report)
    }

    pub fn save_task(
        &self,
        task: Task,
        dir: &std::path::Path,
        vocab_fp: u64,
    ) -> Result<(), CheckpointError> {
        let hyper = EstimatorCheckpointHyper {
            cfg: self.cfg,
            task,
        };
        checkpoint::save_checkpoint(
            dir,
            task.checkpoint_kind(),
            vocab_fp,
            &hyper,
            &self.task_params(task),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimatorCheckpointHyper {
    cfg: EstimatorConfig,
    task: Task,
}

impl EstimatorModel<f32> {
    /// Load a task checkpoint. A checkpoint for a different task is
    /// rejected, first by its kind and then by the missing-head check.
    pub fn load_task(
        dir: &std::path::Path,
        task: Task,
        vocab_fp: u64,
    ) -> Result<Self, CheckpointError> {
        let loaded = checkpoint::load_checkpoint(dir)?;
        loaded.expect_kind(task.checkpoint_kind())?;
        loaded.expect_vocab(vocab_fp)?;
        Self::load_task_from(&loaded, task)
    }

    pub fn load_task_from(loaded: &LoadedCheckpoint, task: Task) -> Result<Self, CheckpointError> {
        let hyper: EstimatorCheckpointHyper = loaded.hyper()?;
        let mut model = Self::init(hyper.cfg, 0);
        loaded.assign(model.task_params_mut(task))?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_score: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub task: Task,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_dev: f64,
}

// ── stacking ensemble ───────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum StackingError {
    #[error("need at least one prediction column")]
    NoColumns,
    #[error("column {index} has {got} rows, labels have {expected}")]
    ColumnLength {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("{n} samples cannot be split into {folds} folds")]
    FewerSamplesThanFolds { n: usize, folds: usize },
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
}

/// Second-phase ridge regressor over single-system outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackingFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Out-of-fold ensemble predictions: sample i was predicted by a
    /// regressor fit without sample i's fold.
    pub oof_predictions: Vec<f64>,
}

impl StackingFit {
    pub fn apply(&self, inputs: &[f64]) -> f64 {
        self.intercept
            + self
                .weights
                .iter()
                .zip(inputs)
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }
}

/// Cholesky solve of the (symmetric positive definite) system `A x = b`.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                l[i][j] = s.max(1e-300).sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Ridge fit (bias unpenalized) on the row subset `rows`.
fn ridge_on(columns: &[Vec<f64>], labels: &[f64], rows: &[usize], lambda: f64) -> (Vec<f64>, f64) {
    let m = columns.len();
    let dim = m + 1; // bias last
    let mut ata = vec![vec![0.0; dim]; dim];
    let mut atb = vec![0.0; dim];
    for &r in rows {
        let mut x = Vec::with_capacity(dim);
        for col in columns {
            x.push(col[r]);
        }
        x.push(1.0);
        for i in 0..dim {
            for j in 0..dim {
                ata[i][j] += x[i] * x[j];
            }
            atb[i] += x[i] * labels[r];
        }
    }
    for (i, row) in ata.iter_mut().enumerate().take(m) {
        row[i] += lambda;
    }
    let beta = cholesky_solve(&ata, &atb);
    (beta[..m].to_vec(), beta[m])
}

/// Stacking with k-fold cross validation: each sample's out-of-fold
/// prediction comes from a ridge regressor trained without that sample's
/// fold; the returned regressor itself is fit on all samples.
pub fn stack_ensemble(
    columns: &[Vec<f64>],
    labels: &[f64],
    folds: usize,
    lambda: f64,
) -> Result<StackingFit, StackingError> {
    if columns.is_empty() {
        return Err(StackingError::NoColumns);
    }
    if folds < 2 {
        return Err(StackingError::TooFewFolds(folds));
    }
    let n = labels.len();
    for (index, col) in columns.iter().enumerate() {
        if col.len() != n {
            return Err(StackingError::ColumnLength {
                index,
                expected: n,
                got: col.len(),
            });
        }
    }
    if n < folds {
        return Err(StackingError::FewerSamplesThanFolds { n, folds });
    }
    let mut oof = vec![0.0; n];
    for fold in 0..folds {
        let held: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
        let rest: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
        let (w, b) = ridge_on(columns, labels, &rest, lambda);
        for &i in &held {
            let x: Vec<f64> = columns.iter().map(|c| c[i]).collect();
            oof[i] = b + w.iter().zip(&x).map(|(wi, xi)| wi * xi).sum::<f64>();
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let (weights, intercept) = ridge_on(columns, labels, &all, lambda);
    Ok(StackingFit {
        weights,
        intercept,
        oof_predictions: oof,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_parallel, make_qe_dataset, QeDataConfig, Vocabulary};
    use crate::features::{extract_features, feature_width};
    use crate::nmt::{DualPredictor, NmtConfig};
    use crate::xlm::{XlmConfig, XlmModel};

    #[allow(clippy::type_complexity)]
    fn tiny_world() -> (Vocabulary, Vec<(QeFeatures<f64>, QESample)>) {
        let vocab = Vocabulary::synthetic(14, 2);
        let nmt = DualPredictor::init(
            NmtConfig {
                vocab_size: vocab.size(),
                d: 8,
                heads: 2,
                layers: 1,
                ff: 12,
                expert_count: 2,
                reserved_sos: 2,
                max_len: 32,
            },
            1,
        );
        let xlm = XlmModel::init(
            XlmConfig {
                vocab_size: vocab.size(),
                d: 8,
                heads: 2,
                layers: 1,
                ff: 12,
                expert_count: 2,
                max_len: 40,
            },
            2,
        );
        let pairs = gen_parallel(4, 12, &vocab, 2).unwrap();
        let ds = make_qe_dataset(&pairs, &vocab, QeDataConfig::default(), 5).unwrap();
        let data: Vec<(QeFeatures<f64>, QESample)> = ds
            .train
            .iter()
            .chain(&ds.dev)
            .chain(&ds.test)
            .map(|s| {
                (
                    extract_features(&nmt, Some(&xlm), &vocab, &s.source, &s.mt, true).unwrap(),
                    s.clone(),
                )
            })
            .collect();
        (vocab, data)
    }

    fn tiny_estimator(width: usize, dual: bool, seed: u64) -> EstimatorModel<f64> {
        EstimatorModel::init(
            EstimatorConfig {
                input_width: width,
                hidden: 6,
                head_hidden: 8,
                pool_k: 3,
                pool_mode: PoolMode::MeanOfTopK,
                blend_nmt: 0.8,
                bad_weight: 1.0,
                tag_threshold: 0.5,
                dual_stream: dual,
            },
            seed,
        )
    }

    #[test]
    fn sentence_prediction_is_clamped_scalar() {
        let (_, data) = tiny_world();
        let est = tiny_estimator(feature_width(2, 8, true), true, 3);
        for (f, _) in &data {
            let h = est.predict_hter(f).unwrap();
            assert!((0.0..=1.0).contains(&h));
        }
    }

    #[test]
    fn channel_permutation_equivariance() {
        // Permuting feature channels together with the GRU input-weight
        // rows leaves the sentence output unchanged.
        let (_, data) = tiny_world();
        let width = feature_width(2, 8, true);
        let est = tiny_estimator(width, true, 4);
        let mut rng = SeededRng::new(11);
        let perm = rng.permutation(width);

        let mut est_p = est.clone();
        for dir in [&mut est_p.gru.forward_dir, &mut est_p.gru.backward_dir] {
            for w in [&mut dir.w_z, &mut dir.w_r, &mut dir.w_h] {
                let old = w.tensor.values.clone();
                let cols = w.tensor.shape[1];
                for (new_row, &src_row) in perm.iter().enumerate() {
                    w.tensor.values[new_row * cols..(new_row + 1) * cols]
                        .copy_from_slice(&old[src_row * cols..(src_row + 1) * cols]);
                }
            }
        }
        let permute_feats = |f: &QeFeatures<f64>| {
            let mut f = f.clone();
            let permute_matrix = |m: &mut FeatureMatrix<f64>| {
                let old = m.values.clone();
                for r in 0..m.rows {
                    for (new_c, &src_c) in perm.iter().enumerate() {
                        m.values[r * m.width + new_c] = old[r * m.width + src_c];
                    }
                }
            };
            permute_matrix(&mut f.nmt_tokens.matrix);
            if let Some(x) = &mut f.xlm_tokens {
                permute_matrix(&mut x.matrix);
            }
            f
        };
        for (f, _) in data.iter().take(3) {
            let base = est.predict_hter(f).unwrap();
            let fp = permute_feats(f);
            let moved = est_p.predict_hter(&fp).unwrap();
            assert!((base - moved).abs() < 1e-9, "{base} vs {moved}");
        }
    }

    #[test]
    fn tag_probs_shapes_and_blend() {
        let (_, data) = tiny_world();
        let est = tiny_estimator(feature_width(2, 8, true), true, 5);
        for (f, s) in data.iter().take(4) {
            let word = est.tag_probs(Task::Word, f).unwrap();
            assert_eq!(word.blended.len(), s.mt.len());
            let gap = est.tag_probs(Task::Gap, f).unwrap();
            assert_eq!(gap.blended.len(), s.mt.len() + 1);
            for p in word.blended.iter().chain(&gap.blended) {
                assert!((0.0..=1.0).contains(p));
            }
            // Blend arithmetic per position.
            let xlm = word.xlm.as_ref().unwrap();
            for i in 0..word.blended.len() {
                let expect = 0.8 * word.nmt[i] + 0.2 * xlm[i];
                assert!((word.blended[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combine_streams_examples() {
        let c = combine_streams(&[0.9], &[0.4], 0.8, 0.2).unwrap();
        assert!((c[0] - 0.8).abs() < 1e-12);
        let same = combine_streams(&[0.3, 0.7], &[0.3, 0.7], 0.8, 0.2).unwrap();
        for (a, b) in same.iter().zip([0.3, 0.7]) {
            assert!((a - b).abs() < 1e-12);
        }
        let only_nmt = combine_streams(&[0.25], &[0.99], 1.0, 0.0).unwrap();
        assert_eq!(only_nmt, vec![0.25]);
        assert!(combine_streams(&[0.1], &[0.2], 0.8, 0.3).is_err());
        assert!(combine_streams(&[0.1, 0.2], &[0.2], 0.8, 0.2).is_err());
    }

    #[test]
    fn shared_gru_drives_both_streams() {
        let (_, data) = tiny_world();
        let mut est = tiny_estimator(feature_width(2, 8, true), true, 6);
        let (f, _) = &data[0];
        let before = est.tag_probs(Task::Word, f).unwrap();
        // Nudge one shared GRU weight; both streams' outputs must move.
        est.gru.forward_dir.w_z.tensor.values[0] += 0.5;
        let after = est.tag_probs(Task::Word, f).unwrap();
        assert_ne!(before.nmt, after.nmt);
        assert_ne!(before.xlm.unwrap(), after.xlm.unwrap());
    }

    #[test]
    fn width_and_stream_mismatches_rejected() {
        let (_, data) = tiny_world();
        let est = tiny_estimator(feature_width(2, 8, true) + 1, true, 7);
        assert!(matches!(
            est.predict_hter(&data[0].0),
            Err(EstimatorError::WidthMismatch { .. })
        ));
        let est2 = tiny_estimator(feature_width(2, 8, true), false, 7);
        assert!(matches!(
            est2.predict_hter(&data[0].0),
            Err(EstimatorError::StreamMismatch { .. })
        ));
    }

    #[test]
    fn one_sample_memorization() {
        let (_, data) = tiny_world();
        let mut est = tiny_estimator(feature_width(2, 8, true), true, 8);
        let train = [(&data[0].0, &data[0].1)];
        let adam = Adam::with_lr(3e-3);
        let report = est
            .train(Task::Sentence, &train, &[], 220, 1, &adam, 1)
            .unwrap();
        let last = report.epochs.last().unwrap();
        assert!(
            last.train_loss < 1e-3,
            "memorization failed: loss {}",
            last.train_loss
        );
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (_, data) = tiny_world();
            let mut est = tiny_estimator(feature_width(2, 8, true), true, 9);
            let refs: Vec<(&QeFeatures<f64>, &QESample)> =
                data.iter().map(|(f, s)| (f, s)).collect();
            let adam = Adam::with_lr(1e-3);
            let report = est
                .train(Task::Word, &refs[..8], &refs[8..], 3, 4, &adam, 2)
                .unwrap();
            report
                .epochs
                .iter()
                .map(|e| e.train_loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn task_checkpoints_reject_other_tasks() {
        let (vocab, _) = tiny_world();
        let est32: EstimatorModel<f32> = EstimatorModel::init(
            EstimatorConfig {
                input_width: 12,
                hidden: 4,
                head_hidden: 6,
                pool_k: 3,
                pool_mode: PoolMode::MeanOfTopK,
                blend_nmt: 0.8,
                bad_weight: 1.0,
                tag_threshold: 0.5,
                dual_stream: true,
            },
            3,
        );
        let dir = tempfile::tempdir().unwrap();
        est32
            .save_task(Task::Sentence, dir.path(), vocab.fingerprint())
            .unwrap();
        assert!(
            EstimatorModel::load_task(dir.path(), Task::Sentence, vocab.fingerprint()).is_ok()
        );
        let err =
            EstimatorModel::load_task(dir.path(), Task::Word, vocab.fingerprint()).unwrap_err();
        assert!(matches!(err, CheckpointError::WrongKind { .. }));
    }

    #[test]
    fn stacking_identity_column() {
        let labels: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let fit = stack_ensemble(&[labels.clone()], &labels, 5, 1e-6).unwrap();
        assert!((fit.weights[0] - 1.0).abs() < 1e-6);
        assert!(fit.intercept.abs() < 1e-6);
    }

    #[test]
    fn stacking_duplicate_columns_match_single_fit_predictions() {
        let mut rng = SeededRng::new(13);
        let col: Vec<f64> = (0..40).map(|_| rng.f64()).collect();
        let labels: Vec<f64> = col.iter().map(|x| 0.6 * x + 0.1).collect();
        let single = stack_ensemble(&[col.clone()], &labels, 5, 1e-6).unwrap();
        let double = stack_ensemble(&[col.clone(), col.clone()], &labels, 5, 1e-6).unwrap();
        for i in 0..labels.len() {
            let a = single.apply(&[col[i]]);
            let b = double.apply(&[col[i], col[i]]);
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn stacking_matches_normal_equations_oracle() {
        // Independent oracle: explicit Gauss-Jordan inversion of the
        // regularized normal equations.
        let mut rng = SeededRng::new(17);
        let n = 100;
        let m = 3;
        let columns: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..n).map(|_| rng.f64() * 2.0 - 1.0).collect())
            .collect();
        let labels: Vec<f64> = (0..n)
            .map(|i| {
                0.3 * columns[0][i] - 0.9 * columns[1][i] + 0.5 * columns[2][i] + 0.2
                    + (rng.f64() - 0.5) * 0.01
            })
            .collect();
        let lambda = 1e-6;
        let fit = stack_ensemble(&columns, &labels, 5, lambda).unwrap();

        let dim = m + 1;
        let mut ata = vec![vec![0.0; dim]; dim];
        let mut atb = vec![0.0; dim];
        for i in 0..n {
            let mut x: Vec<f64> = columns.iter().map(|c| c[i]).collect();
            x.push(1.0);
            for a in 0..dim {
                for b in 0..dim {
                    ata[a][b] += x[a] * x[b];
                }
                atb[a] += x[a] * labels[i];
            }
        }
        for d in 0..m {
            ata[d][d] += lambda;
        }
        // Gauss-Jordan inversion of ata.
        let mut aug: Vec<Vec<f64>> = ata
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..dim).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..dim {
            let pivot = (col..dim)
                .max_by(|&a, &b| aug[a][col].abs().partial_cmp(&aug[b][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, pivot);
            let p = aug[col][col];
            for v in &mut aug[col] {
                *v /= p;
            }
            for r in 0..dim {
                if r != col {
                    let factor = aug[r][col];
                    for c in 0..2 * dim {
                        aug[r][c] -= factor * aug[col][c];
                    }
                }
            }
        }
        let mut beta = vec![0.0; dim];
        for i in 0..dim {
            for j in 0..dim {
                beta[i] += aug[i][dim + j] * atb[j];
            }
        }
        for j in 0..m {
            assert!(
                (fit.weights[j] - beta[j]).abs() < 1e-8,
                "weight {j}: {} vs oracle {}",
                fit.weights[j],
                beta[j]
            );
        }
        assert!((fit.intercept - beta[m]).abs() < 1e-8);
    }

    #[test]
    fn stacking_rejects_bad_inputs() {
        let labels = vec![0.1, 0.2, 0.3];
        assert!(matches!(
            stack_ensemble(&[], &labels, 2, 1e-6),
            Err(StackingError::NoColumns)
        ));
        assert!(matches!(
            stack_ensemble(&[vec![1.0, 2.0, 3.0]], &labels, 5, 1e-6),
            Err(StackingError::FewerSamplesThanFolds { .. })
        ));
        assert!(matches!(
            stack_ensemble(&[vec![1.0, 2.0]], &labels, 2, 1e-6),
            Err(StackingError::ColumnLength { .. })
        ));
    }
}
