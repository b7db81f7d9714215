//! Two-stage training (third-person pretraining, then joint training under
//! the combined objective), first-person evaluation, single experiments and
//! ablation grids. Everything is a deterministic function of the config.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datagen::{generate_world, sample_dataset, SyntheticWorld, VideoSample, View};
use crate::error::{Error, Result};
use crate::fsutil::{atomic_write, write_err};
use crate::losses::{self, LossOutput, NegativeSet};
use crate::mining::{apply_selection, mine_pseudo_pairs, PairBatch, Selection};
use crate::model::{
    cosine_lr, sgd_momentum_step, step_lr, Checkpoint, EncoderStack, Encoded, MomentumState,
    StackGrads,
};
use crate::numerics::{axpy, RealMatrix};
use crate::seed::{rng_from_seed, split_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Task loss on first-person clips only.
    FpvOnly,
    /// Decoupled contrastive alignment on every mined pair.
    TypicalCl,
    /// Hardest-negative triplet alignment on every mined pair.
    Triplet,
    /// Gated, semantics-weighted alignment plus video-text alignment.
    SumL,
    /// Gated alignment without semantic weights, plus video-text alignment.
    SumLNoWeighting,
    /// Gated, weighted alignment without video-text alignment.
    SumLNoMultimodal,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FpvOnly,
        Method::TypicalCl,
        Method::Triplet,
        Method::SumL,
        Method::SumLNoWeighting,
        Method::SumLNoMultimodal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FpvOnly => "fpv_only",
            Method::TypicalCl => "typical_cl",
            Method::Triplet => "triplet",
            Method::SumL => "sum_l",
            Method::SumLNoWeighting => "sum_l_no_weighting",
            Method::SumLNoMultimodal => "sum_l_no_multimodal",
        }
    }

    fn uses_tpv(self) -> bool {
        self != Method::FpvOnly
    }

    fn uses_multimodal(self) -> bool {
        matches!(self, Method::SumL | Method::SumLNoWeighting)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TpvMode {
    /// Stage-1 weights, trained in stage 2.
    Trainable,
    /// Stage-1 weights, never updated.
    Frozen,
    /// One stack serves both views, starting from the stage-1 weights.
    SharedWeights,
    /// Third-person stack starts as a copy of the fresh first-person stack.
    SameInit,
}

impl TpvMode {
    pub const ALL: [TpvMode; 4] = [
        TpvMode::Trainable,
        TpvMode::Frozen,
        TpvMode::SharedWeights,
        TpvMode::SameInit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TpvMode::Trainable => "trainable",
            TpvMode::Frozen => "frozen",
            TpvMode::SharedWeights => "shared_weights",
            TpvMode::SameInit => "same_init",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Cosine,
    Step { step: usize, gamma: f64 },
}

impl Schedule {
    pub fn lr(&self, epoch: usize, total: usize, base_lr: f64) -> f64 {
        match *self {
            Schedule::Cosine => cosine_lr(epoch, total, base_lr),
            Schedule::Step { step, gamma } => step_lr(epoch, step, gamma, base_lr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub tpv_mode: TpvMode,
    pub negative_set_mode: NegativeSet,
    pub selection: Selection,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::SumL,
            batch_size: 16,
            epochs_stage1: 20,
            epochs_stage2: 40,
            base_lr: 0.05,
            momentum: 0.9,
            seed: 0,
            tpv_mode: TpvMode::Trainable,
            negative_set_mode: NegativeSet::SelectedSubset,
            selection: Selection::Threshold,
            schedule: Schedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 2 {
            return err("batch_size must be >= 2");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err("base_lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum must lie in [0, 1)");
        }
        if let Selection::TopFraction(f) = self.selection {
            if !(0.0..=1.0).contains(&f) {
                return err("selection top fraction must lie in [0, 1]");
            }
        }
        if let Schedule::Step { step, gamma } = self.schedule {
            if step == 0 || !(gamma > 0.0) {
                return err("step schedule needs step >= 1 and gamma > 0");
            }
        }
        Ok(())
    }
}

/// Per-epoch stage-2 metrics. Component losses are batch means; a term that
/// a method does not use, or that a batch skipped, contributes 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub stage: usize,
    pub loss_f: f64,
    pub loss_t: f64,
    pub loss_aw: f64,
    pub loss_m: f64,
    pub loss_total: f64,
    pub selected_pair_fraction: f64,
    pub fpv_train_acc: f64,
    pub fpv_test_acc: f64,
    pub tpv_test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Record {
    pub epoch: usize,
    pub stage: usize,
    pub loss_t: f64,
    pub tpv_train_acc: f64,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub world: SyntheticWorld,
    pub fpv_train: Vec<VideoSample>,
    pub fpv_test: Vec<VideoSample>,
    pub tpv_train: Vec<VideoSample>,
    pub tpv_test: Vec<VideoSample>,
}

pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let seed = cfg.train.seed;
    let world = generate_world(&cfg.world_spec())?;
    let d = &cfg.data;
    Ok(Corpus {
        fpv_train: sample_dataset(&world, View::Fpv, d.n_fpv_train, split_seed(seed, Stream::FpvTrain))?,
        fpv_test: sample_dataset(&world, View::Fpv, d.n_fpv_test, split_seed(seed, Stream::FpvTest))?,
        tpv_train: sample_dataset(&world, View::Tpv, d.n_tpv_train, split_seed(seed, Stream::TpvTrain))?,
        tpv_test: sample_dataset(&world, View::Tpv, d.n_tpv_test, split_seed(seed, Stream::TpvTest))?,
        world,
    })
}

fn fresh_stack(cfg: &ExperimentConfig, view: View) -> EncoderStack {
    let stream = match view {
        View::Fpv => Stream::FpvInit,
        View::Tpv => Stream::TpvInit,
    };
    let w = cfg.world_spec();
    EncoderStack::init(
        view,
        &cfg.model,
        w.feat_dim,
        w.text_dim,
        w.n_classes(),
        split_seed(cfg.train.seed, stream),
    )
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn accuracy(stack: &EncoderStack, samples: &[VideoSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut correct = 0usize;
    for s in samples {
        let logits = stack.classify(&stack.pool(&s.frames)?)?;
        if argmax(&logits) == s.action_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Top-1 action accuracy of a first-person stack. Only the first-person
/// encoder and task head are involved.
pub fn evaluate_fpv(fpv_stack: &EncoderStack, test: &[VideoSample]) -> Result<f64> {
    accuracy(fpv_stack, test)
}

fn task_step(
    stack: &EncoderStack,
    samples: &[&VideoSample],
) -> Result<(LossOutput, Vec<Encoded>, StackGrads)> {
    let mut encs = Vec::with_capacity(samples.len());
    let mut logits = Vec::with_capacity(samples.len());
    for s in samples {
        let e = stack.encode(&s.frames)?;
        logits.push(stack.classify(&e.hidden)?);
        encs.push(e);
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.action_id).collect();
    let ce = losses::cross_entropy(&RealMatrix::from_rows(&logits)?, &labels)?;
    Ok((ce, encs, stack.zero_grads()))
}

/// Stage 1: cross-entropy training of a fresh third-person stack.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub stack: EncoderStack,
    pub records: Vec<Stage1Record>,
}

pub fn pretrain_tpv(cfg: &ExperimentConfig, tpv: &[VideoSample]) -> Result<Stage1> {
    if tpv.is_empty() {
        return Err(Error::Config("stage-1 dataset is empty".into()));
    }
    let t = &cfg.train;
    let mut stack = fresh_stack(cfg, View::Tpv);
    let mut state = MomentumState::new(&stack);
    let mut rng = rng_from_seed(split_seed(t.seed, Stream::PretrainShuffle));
    let mut order: Vec<usize> = (0..tpv.len()).collect();
    let mut records = Vec::with_capacity(t.epochs_stage1);
    for epoch in 0..t.epochs_stage1 {
        let lr = t.schedule.lr(epoch, t.epochs_stage1, t.base_lr);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(t.batch_size) {
            let samples: Vec<&VideoSample> = chunk.iter().map(|&i| &tpv[i]).collect();
            let (ce, encs, mut grads) = task_step(&stack, &samples)?;
            let zero_z = vec![0.0; stack.proj_dim()];
            for (i, e) in encs.iter().enumerate() {
                stack.backward(&e.cache, &zero_z, ce.grads[0].row(i), &mut grads)?;
            }
            sgd_momentum_step(&mut stack, &grads, lr, t.momentum, &mut state)?;
            loss_sum += ce.value;
            batches += 1;
        }
        records.push(Stage1Record {
            epoch,
            stage: 1,
            loss_t: loss_sum / batches as f64,
            tpv_train_acc: accuracy(&stack, tpv)?,
        });
    }
    Ok(Stage1 { stack, records })
}

/// Held-out sets reported in every metrics record.
pub struct EvalSets<'a> {
    pub fpv_train: &'a [VideoSample],
    pub fpv_test: &'a [VideoSample],
    pub tpv_test: &'a [VideoSample],
}

/// First- and third-person stacks for stage 2. In shared-weights mode there
/// is a single stack and [`ViewStacks::tpv`] returns it.
#[derive(Debug, Clone)]
pub struct ViewStacks {
    pub fpv: EncoderStack,
    tpv: Option<EncoderStack>,
    fpv_state: MomentumState,
    tpv_state: Option<MomentumState>,
}

impl ViewStacks {
    pub fn new(fpv: EncoderStack, tpv: EncoderStack) -> Self {
        Self {
            fpv_state: MomentumState::new(&fpv),
            tpv_state: Some(MomentumState::new(&tpv)),
            fpv,
            tpv: Some(tpv),
        }
    }

    pub fn shared(stack: EncoderStack) -> Self {
        Self {
            fpv_state: MomentumState::new(&stack),
            fpv: stack,
            tpv: None,
            tpv_state: None,
        }
    }

    pub fn is_shared(&self) -> bool {
        self.tpv.is_none()
    }

    pub fn tpv(&self) -> &EncoderStack {
        self.tpv.as_ref().unwrap_or(&self.fpv)
    }

    /// Applies one momentum step. In shared mode both views' gradients are
    /// summed into the single parameter set first.
    pub fn update(&mut self, fpv_grads: &StackGrads, tpv_grads: Option<&StackGrads>, lr: f64, momentum: f64) -> Result<()> {
        match (&mut self.tpv, &mut self.tpv_state) {
            (Some(tpv), Some(state)) => {
                sgd_momentum_step(&mut self.fpv, fpv_grads, lr, momentum, &mut self.fpv_state)?;
                if let Some(g) = tpv_grads {
                    sgd_momentum_step(tpv, g, lr, momentum, state)?;
                }
            }
            _ => {
                let mut sum = fpv_grads.clone();
                if let Some(g) = tpv_grads {
                    sum.add_assign(g);
                }
                sgd_momentum_step(&mut self.fpv, &sum, lr, momentum, &mut self.fpv_state)?;
            }
        }
        Ok(())
    }

    pub fn into_stacks(self) -> (EncoderStack, EncoderStack) {
        match self.tpv {
            Some(t) => (self.fpv, t),
            None => {
                let mut t = self.fpv.clone();
                t.view = View::Tpv;
                (self.fpv, t)
            }
        }
    }
}

/// Sets up the stage-2 stacks for the configured third-person mode.
pub fn stage2_stacks(cfg: &ExperimentConfig, stage1_tpv: EncoderStack) -> ViewStacks {
    let fpv = fresh_stack(cfg, View::Fpv);
    match cfg.train.tpv_mode {
        TpvMode::Trainable => ViewStacks::new(fpv, stage1_tpv),
        TpvMode::Frozen => {
            let mut tpv = stage1_tpv;
            tpv.frozen = true;
            ViewStacks::new(fpv, tpv)
        }
        TpvMode::SharedWeights => {
            let mut shared = stage1_tpv;
            shared.view = View::Fpv;
            ViewStacks::shared(shared)
        }
        TpvMode::SameInit => {
            let mut tpv = fpv.clone();
            tpv.view = View::Tpv;
            ViewStacks::new(fpv, tpv)
        }
    }
}

fn text_rows(samples: &[&VideoSample]) -> Result<RealMatrix> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.narration.as_slice()).collect();
    RealMatrix::from_rows(&rows)
}

fn z_rows(encs: &[Encoded]) -> Result<RealMatrix> {
    let rows: Vec<&[f64]> = encs.iter().map(|e| e.z.as_slice()).collect();
    RealMatrix::from_rows(&rows)
}

#[derive(Default)]
struct BatchTerms {
    loss_f: f64,
    loss_t: f64,
    loss_aw: f64,
    loss_m: f64,
    aligned_pairs: usize,
}

/// One optimization step on a batch of pseudo-pair indices.
fn train_batch(
    cfg: &ExperimentConfig,
    stacks: &mut ViewStacks,
    fpv: &[VideoSample],
    tpv: &[VideoSample],
    pairs: &PairBatch,
    chunk: &[usize],
    lr: f64,
) -> Result<BatchTerms> {
    let method = cfg.train.method;
    let lc = &cfg.loss;
    let n = chunk.len();
    let f_samples: Vec<&VideoSample> = chunk.iter().map(|&k| &fpv[pairs.pairs[k].fpv_index]).collect();
    let (lf, f_encs, mut f_grads) = task_step(&stacks.fpv, &f_samples)?;
    let mut terms = BatchTerms {
        loss_f: lf.value,
        ..BatchTerms::default()
    };
    let proj = stacks.fpv.proj_dim();
    let mut gzf = RealMatrix::zeros(n, proj);
    let mut gzt = RealMatrix::zeros(n, proj);
    let mut tpv_part = None;

    if method.uses_tpv() {
        let t_samples: Vec<&VideoSample> = chunk.iter().map(|&k| &tpv[pairs.pairs[k].tpv_index]).collect();
        let (lt, t_encs, t_grads) = task_step(stacks.tpv(), &t_samples)?;
        terms.loss_t = lt.value;
        let zf = z_rows(&f_encs)?;
        let zt = z_rows(&t_encs)?;

        let align = match method {
            Method::TypicalCl if n >= 2 => {
                let all: Vec<usize> = (0..n).collect();
                Some((losses::alignment_loss(&zf, &zt, &all, None, NegativeSet::SelectedSubset, lc.tau)?, n))
            }
            Method::Triplet if n >= 2 => Some((losses::triplet_loss(&zf, &zt, lc.triplet_margin)?, n)),
            Method::SumL | Method::SumLNoWeighting | Method::SumLNoMultimodal => {
                let sel: Vec<usize> = (0..n).filter(|&i| pairs.selected[chunk[i]]).collect();
                if sel.len() >= 2 {
                    let weights = if method == Method::SumLNoWeighting {
                        None
                    } else {
                        let df = text_rows(&sel.iter().map(|&i| f_samples[i]).collect::<Vec<_>>())?;
                        let dt = text_rows(&sel.iter().map(|&i| t_samples[i]).collect::<Vec<_>>())?;
                        Some(losses::semantic_weights(&df, &dt, lc.sigma)?)
                    };
                    let out = losses::alignment_loss(
                        &zf,
                        &zt,
                        &sel,
                        weights.as_deref(),
                        cfg.train.negative_set_mode,
                        lc.tau,
                    )?;
                    Some((out, sel.len()))
                } else {
                    None
                }
            }
            _ => None,
        };
        if let Some((out, used)) = align {
            terms.loss_aw = out.value;
            terms.aligned_pairs = used;
            if lc.w_aw != 0.0 {
                axpy(lc.w_aw, out.grads[0].as_slice(), gzf.as_mut_slice());
                axpy(lc.w_aw, out.grads[1].as_slice(), gzt.as_mut_slice());
            }
        }
        if method.uses_multimodal() && n >= 2 {
            let df = text_rows(&f_samples)?;
            let dt = text_rows(&t_samples)?;
            let out = losses::multimodal_loss(&zf, &df, &zt, &dt, lc.tau)?;
            terms.loss_m = out.value;
            if lc.w_m != 0.0 {
                axpy(lc.w_m, out.grads[0].as_slice(), gzf.as_mut_slice());
                axpy(lc.w_m, out.grads[1].as_slice(), gzt.as_mut_slice());
            }
        }
        tpv_part = Some((lt, t_encs, t_grads));
    }

    for (i, e) in f_encs.iter().enumerate() {
        stacks.fpv.backward(&e.cache, gzf.row(i), lf.grads[0].row(i), &mut f_grads)?;
    }
    let t_grads = match tpv_part {
        Some((lt, t_encs, mut t_grads)) if !stacks.tpv().frozen => {
            let mut glt = RealMatrix::zeros(n, stacks.tpv().n_classes());
            if lc.w_t != 0.0 {
                axpy(lc.w_t, lt.grads[0].as_slice(), glt.as_mut_slice());
            }
            let tstack = stacks.tpv();
            for (i, e) in t_encs.iter().enumerate() {
                tstack.backward(&e.cache, gzt.row(i), glt.row(i), &mut t_grads)?;
            }
            Some(t_grads)
        }
        _ => None,
    };
    stacks.update(&f_grads, t_grads.as_ref(), lr, cfg.train.momentum)?;
    Ok(terms)
}

/// Mined pairs and their selection mask for stage 2. Narrations are fixed,
/// so mining is a pure function of the two training corpora.
pub fn stage2_pairs(cfg: &ExperimentConfig, fpv: &[VideoSample], tpv: &[VideoSample]) -> Result<PairBatch> {
    let pairs = mine_pseudo_pairs(fpv, tpv)?;
    apply_selection(&pairs, cfg.train.selection, cfg.loss.theta)
}

#[derive(Debug, Clone)]
pub struct JointOutput {
    pub fpv: EncoderStack,
    pub tpv: EncoderStack,
    pub metrics: Vec<MetricsRecord>,
}

/// Stage 2: joint training under the combined objective. Each epoch
/// shuffles the mined pairs, chunks them into batches and takes one step per
/// batch; batches with fewer than two selected pairs skip the cross-view
/// term.
pub fn joint_train(
    cfg: &ExperimentConfig,
    fpv: &[VideoSample],
    tpv: &[VideoSample],
    mut stacks: ViewStacks,
    eval: &EvalSets<'_>,
) -> Result<JointOutput> {
    cfg.validate()?;
    let t = &cfg.train;
    let pairs = stage2_pairs(cfg, fpv, tpv)?;
    let mut rng = rng_from_seed(split_seed(t.seed, Stream::Shuffle));
    let mut order: Vec<usize> = (0..pairs.pairs.len()).collect();
    let mut metrics = Vec::with_capacity(t.epochs_stage2);
    for epoch in 0..t.epochs_stage2 {
        let lr = t.schedule.lr(epoch, t.epochs_stage2, t.base_lr);
        order.shuffle(&mut rng);
        let mut sums = BatchTerms::default();
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(t.batch_size) {
            let b = train_batch(cfg, &mut stacks, fpv, tpv, &pairs, chunk, lr)?;
            total += losses::combine_values(b.loss_f, b.loss_t, b.loss_aw, b.loss_m, &cfg.loss);
            sums.loss_f += b.loss_f;
            sums.loss_t += b.loss_t;
            sums.loss_aw += b.loss_aw;
            sums.loss_m += b.loss_m;
            sums.aligned_pairs += b.aligned_pairs;
            batches += 1;
        }
        let nb = batches as f64;
        metrics.push(MetricsRecord {
            epoch,
            stage: 2,
            loss_f: sums.loss_f / nb,
            loss_t: sums.loss_t / nb,
            loss_aw: sums.loss_aw / nb,
            loss_m: sums.loss_m / nb,
            loss_total: total / nb,
            selected_pair_fraction: sums.aligned_pairs as f64 / pairs.pairs.len() as f64,
            fpv_train_acc: evaluate_fpv(&stacks.fpv, eval.fpv_train)?,
            fpv_test_acc: evaluate_fpv(&stacks.fpv, eval.fpv_test)?,
            tpv_test_acc: accuracy(stacks.tpv(), eval.tpv_test)?,
        });
    }
    let (fpv_stack, tpv_stack) = stacks.into_stacks();
    Ok(JointOutput {
        fpv: fpv_stack,
        tpv: tpv_stack,
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub tpv_mode: TpvMode,
    pub seed: u64,
    pub final_fpv_test_acc: f64,
    pub final_tpv_test_acc: f64,
    pub stage1_tpv_train_acc: Option<f64>,
    pub selected_pair_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub stage1: Stage1,
    pub fpv: EncoderStack,
    pub tpv: EncoderStack,
    pub metrics: Vec<MetricsRecord>,
    pub summary: Summary,
}

/// Stage 1, stage 2 and final evaluation for one config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let corpus = build_corpus(cfg)?;
    let stage1 = pretrain_tpv(cfg, &corpus.tpv_train)?;
    let stacks = stage2_stacks(cfg, stage1.stack.clone());
    let eval = EvalSets {
        fpv_train: &corpus.fpv_train,
        fpv_test: &corpus.fpv_test,
        tpv_test: &corpus.tpv_test,
    };
    let joint = joint_train(cfg, &corpus.fpv_train, &corpus.tpv_train, stacks, &eval)?;
    let final_fpv = evaluate_fpv(&joint.fpv, &corpus.fpv_test)?;
    let final_tpv = accuracy(&joint.tpv, &corpus.tpv_test)?;
    let summary = Summary {
        method: cfg.train.method,
        tpv_mode: cfg.train.tpv_mode,
        seed: cfg.train.seed,
        final_fpv_test_acc: final_fpv,
        final_tpv_test_acc: final_tpv,
        stage1_tpv_train_acc: stage1.records.last().map(|r| r.tpv_train_acc),
        selected_pair_fraction: joint.metrics.last().map_or(0.0, |m| m.selected_pair_fraction),
    };
    Ok(ExperimentResult {
        stage1,
        fpv: joint.fpv,
        tpv: joint.tpv,
        metrics: joint.metrics,
        summary,
    })
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    atomic_write(path, |w| {
        for r in records {
            serde_json::to_writer(&mut *w, r).map_err(|e| Error::Config(e.to_string()))?;
            w.write_all(b"\n").map_err(write_err(path))?;
        }
        Ok(())
    })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(write_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes metrics, stage-1 records, checkpoints and the summary into `dir`.
pub fn write_experiment(result: &ExperimentResult, dir: &Path) -> Result<()> {
    write_jsonl(&result.metrics, &dir.join("metrics.jsonl"))?;
    write_jsonl(&result.stage1.records, &dir.join("stage1.jsonl"))?;
    Checkpoint::new("stage1", result.stage1.stack.clone()).save(&dir.join("tpv_stage1.json"))?;
    Checkpoint::new("stage2", result.fpv.clone()).save(&dir.join("fpv.json"))?;
    Checkpoint::new("stage2", result.tpv.clone()).save(&dir.join("tpv.json"))?;
    let path = dir.join("summary.json");
    atomic_write(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &result.summary).map_err(|e| Error::Config(e.to_string()))?;
        w.write_all(b"\n").map_err(write_err(&path))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub methods: Vec<Method>,
    pub tpv_modes: Vec<TpvMode>,
    pub seeds: Vec<u64>,
}

impl GridSpec {
    /// Loss-combination grid: no alignment, weighted alignment only, the
    /// full objective, and the unweighted variant.
    pub fn task_combinations(seeds: Vec<u64>) -> Self {
        Self {
            methods: vec![
                Method::FpvOnly,
                Method::SumLNoMultimodal,
                Method::SumL,
                Method::SumLNoWeighting,
            ],
            tpv_modes: vec![TpvMode::Trainable],
            seeds,
        }
    }

    pub fn tpv_encoder_variants(seeds: Vec<u64>) -> Self {
        Self {
            methods: vec![Method::SumL],
            tpv_modes: TpvMode::ALL.to_vec(),
            seeds,
        }
    }

    pub fn baselines(seeds: Vec<u64>) -> Self {
        Self {
            methods: vec![Method::FpvOnly, Method::TypicalCl, Method::Triplet, Method::SumL],
            tpv_modes: vec![TpvMode::Trainable],
            seeds,
        }
    }

    fn cells(&self) -> Vec<(Method, TpvMode, u64)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            for &t in &self.tpv_modes {
                for &s in &self.seeds {
                    out.push((m, t, s));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub method: Method,
    pub tpv_mode: TpvMode,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_fpv_acc: f64,
    pub std_fpv_acc: f64,
}

pub struct GridResult {
    pub cells: Vec<Summary>,
    pub rows: Vec<GridRow>,
}

/// Runs every (method, tpv_mode, seed) cell, in parallel, and aggregates
/// one row per (method, tpv_mode) with the mean and sample standard
/// deviation of the final first-person test accuracy.
pub fn run_ablation_grid(base: &ExperimentConfig, grid: &GridSpec) -> Result<GridResult> {
    if grid.methods.is_empty() || grid.tpv_modes.is_empty() || grid.seeds.is_empty() {
        return Err(Error::Config("ablation grid has an empty axis".into()));
    }
    let cells = grid.cells();
    let summaries: Vec<Summary> = cells
        .par_iter()
        .map(|&(method, tpv_mode, seed)| {
            let mut cfg = base.clone();
            cfg.train.method = method;
            cfg.train.tpv_mode = tpv_mode;
            cfg.train.seed = seed;
            run_experiment(&cfg).map(|r| r.summary)
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for group in summaries.chunks(grid.seeds.len()) {
        let accs: Vec<f64> = group.iter().map(|s| s.final_fpv_test_acc).collect();
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = if accs.len() > 1 {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(GridRow {
            method: group[0].method,
            tpv_mode: group[0].tpv_mode,
            seeds: group.iter().map(|s| s.seed).collect(),
            accuracies: accs,
            mean_fpv_acc: mean,
            std_fpv_acc: std,
        });
    }
    Ok(GridResult {
        cells: summaries,
        rows,
    })
}

impl GridResult {
    /// Per-cell CSV: `method,tpv_mode,seed,final_fpv_acc`.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| {
            writeln!(w, "method,tpv_mode,seed,final_fpv_acc").map_err(write_err(path))?;
            for c in &self.cells {
                writeln!(w, "{},{},{},{}", c.method.name(), c.tpv_mode.name(), c.seed, c.final_fpv_test_acc)
                    .map_err(write_err(path))?;
            }
            Ok(())
        })
    }

    /// Aggregated CSV: `method,tpv_mode,n_seeds,mean_fpv_acc,std_fpv_acc`.
    pub fn write_table_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, |w| {
            writeln!(w, "method,tpv_mode,n_seeds,mean_fpv_acc,std_fpv_acc").map_err(write_err(path))?;
            for r in &self.rows {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    r.method.name(),
                    r.tpv_mode.name(),
                    r.seeds.len(),
                    r.mean_fpv_acc,
                    r.std_fpv_acc
                )
                .map_err(write_err(path))?;
            }
            Ok(())
        })
    }
}
