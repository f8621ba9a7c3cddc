//! Deterministic end-to-end optimization: seeded batch planning, loss
//! composition with mode gating, RMSProp with polynomial decay, and
//! divergence rollback.
//!
//! Every batch element is a frame *pair* from one video (the second
//! frame at most `pair_gap` steps away). Cross-frame modes enhance each
//! frame from its partner; plain modes treat the pair as two independent
//! frames, so all modes see identical data budgets. The four loss kinds
//! are each averaged over every scored frame, then combined as
//! `reg + cls + lambda_rank*rank + lambda_ce*ce`, with kinds the mode
//! does not produce simply absent.
//!
//! Determinism: parameter init comes from the training seed, and one
//! dedicated generator stream drives shuffling, pair sampling, flips,
//! and negative picks in a fixed consumption order. Two runs with the
//! same seed and dataset produce bitwise-identical parameters and
//! history.
//!
//! Divergence (a non-finite value in any forward, backward, or updated
//! parameter) aborts training and restores the snapshot taken at the end
//! of the last completed epoch, so a usable model always survives.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::Settings;
use crate::geom::Box2;
use crate::head;
use crate::metrics;
use crate::model::{Grounder, ModelConfig, ModelError, RankNegatives};
use crate::params::{Bindings, ParamStore};
use crate::records::HistoryRow;
use crate::synth::Dataset;
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, TensorError};
use crate::visual::{FrameImage, VisualError};

pub const RMSPROP_RHO: Real = 0.99;
pub const RMSPROP_EPS: Real = 1e-8;
pub const POLY_POWER: Real = 0.9;
pub const DEFAULT_LR: Real = 1e-4;
pub const DEFAULT_LAMBDA_RANK: Real = 100.0;
pub const DEFAULT_LAMBDA_CE: Real = 1.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {detail}")]
    Setup { detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Whether an error means the optimization blew up (as opposed to a
/// caller mistake). Non-finite values cannot enter the graph, so
/// divergence always surfaces as a `NonFinite` somewhere downstream.
pub fn is_divergence(e: &TrainError) -> bool {
    let nf = |t: &TensorError| matches!(t, TensorError::NonFinite { .. });
    match e {
        TrainError::Tensor(t) => nf(t),
        TrainError::Model(ModelError::Tensor(t)) => nf(t),
        TrainError::Model(ModelError::Visual(VisualError::Tensor(t))) => nf(t),
        TrainError::Model(ModelError::Head(head::HeadError::Tensor(t))) => nf(t),
        _ => false,
    }
}

/// Everything a training run needs besides the dataset.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch: usize,
    /// Initial learning rate; decays polynomially to zero.
    pub lr: Real,
    pub lambda_rank: Real,
    pub lambda_ce: Real,
    pub seed: u64,
    /// Horizontal-flip augmentation. Flipping mirrors the image and the
    /// box *and* swaps left/right words, keeping side expressions true.
    pub flip: bool,
    /// Maximum frame distance when sampling the pair partner.
    pub pair_gap: usize,
    /// Trailing fraction of videos held out for per-epoch validation.
    pub val_fraction: Real,
    /// Frame pairs sampled per video per epoch.
    pub pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 30,
            batch: 16,
            lr: DEFAULT_LR,
            lambda_rank: DEFAULT_LAMBDA_RANK,
            lambda_ce: DEFAULT_LAMBDA_CE,
            seed: 7,
            flip: true,
            pair_gap: 8,
            val_fraction: 0.2,
            pairs: 1,
        }
    }
}

impl TrainConfig {
    pub fn from_settings(s: &Settings, seed: u64) -> TrainConfig {
        TrainConfig {
            model: s.model_config(),
            epochs: s.epochs,
            batch: s.batch,
            lr: s.lr,
            lambda_rank: s.lambda_rank,
            lambda_ce: s.lambda_ce,
            seed,
            flip: s.flip,
            pair_gap: s.pair_gap,
            val_fraction: s.val_fraction,
            pairs: s.pairs,
        }
    }

    fn validate(&self, data: &Dataset) -> Result<(), TrainError> {
        let fail = |detail: String| Err(TrainError::Setup { detail });
        self.model.validate()?;
        if self.epochs == 0 || self.batch == 0 {
            return fail("epochs and batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive and finite, got {}", self.lr));
        }
        if self.lambda_rank < 0.0 || self.lambda_ce < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if self.pair_gap == 0 {
            return fail("pair_gap must be at least 1".into());
        }
        if self.pairs == 0 {
            return fail("pairs must be at least 1".into());
        }
        if data.videos.is_empty() {
            return fail("dataset has no videos".into());
        }
        if data.config.canvas != self.model.image_size {
            return fail(format!(
                "dataset canvas {} does not match model input size {}",
                data.config.canvas, self.model.image_size
            ));
        }
        Ok(())
    }
}

/// `lr0 * (1 - step/total)^power`, clamped at zero.
pub fn poly_lr(step: usize, total_steps: usize, lr0: Real, power: Real) -> Real {
    if total_steps == 0 {
        return lr0;
    }
    let frac = 1.0 - step as Real / total_steps as Real;
    lr0 * frac.max(0.0).powf(power)
}

/// Root-mean-square gradient scaling with a decaying accumulator.
#[derive(Debug, Default, Clone)]
pub struct RmsProp {
    acc: BTreeMap<String, Vec<Real>>,
}

impl RmsProp {
    pub fn new() -> RmsProp {
        RmsProp::default()
    }

    /// `acc = rho*acc + (1-rho)*g^2; p -= lr * g / sqrt(acc + eps)`.
    /// Parameters without a gradient this step stay put, but their
    /// accumulator still decays.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<Real>>, lr: Real) {
        for (path, g) in grads {
            let t = params.get_mut(path).expect("gradient for unknown parameter");
            let acc = self.acc.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let data = t.data_mut();
            for i in 0..g.len() {
                acc[i] = RMSPROP_RHO * acc[i] + (1.0 - RMSPROP_RHO) * g[i] * g[i];
                data[i] -= lr * g[i] / (acc[i] + RMSPROP_EPS).sqrt();
            }
        }
        for (path, acc) in &mut self.acc {
            if !grads.contains_key(path) {
                for a in acc.iter_mut() {
                    *a *= RMSPROP_RHO;
                }
            }
        }
    }
}

/// One planned batch element: which video, which frame pair, whether the
/// sample is mirrored, and the raw draw that picks the negative cell.
#[derive(Debug, Clone)]
pub struct PlanElement {
    pub video: usize,
    pub frame_a: usize,
    pub frame_b: usize,
    pub flip: bool,
    pub neg_pick: u64,
}

/// A batch fixed before any forward pass, so the same plan can be
/// scored, stepped, and re-scored.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub elements: Vec<PlanElement>,
}

/// Plain-value loss readings from one batch forward. Each kind is the
/// mean over the frames that produced it; absent kinds read zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub reg: Real,
    pub cls: Real,
    pub rank: Real,
    pub ce: Real,
    pub total: Real,
    /// Frames that contributed losses.
    pub scored: usize,
    /// Frames skipped for degenerate ground truth.
    pub skipped: usize,
}

/// Final state of a run: the (possibly rolled-back) model, per-epoch
/// history, and where divergence struck, if it did.
#[derive(Debug)]
pub struct TrainReport {
    pub grounder: Grounder,
    pub history: Vec<HistoryRow>,
    pub diverged_at: Option<usize>,
    pub train_videos: usize,
    pub val_videos: usize,
}

/// A materialized batch element after augmentation.
struct Element {
    frame_a: FrameImage,
    frame_b: FrameImage,
    gt_a: Box2,
    gt_b: Box2,
    tokens: Vec<usize>,
}

struct FlipIds {
    left: Option<usize>,
    right: Option<usize>,
}

/// Incremental training driver; [`train`] wraps the whole loop.
pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub grounder: Grounder,
    data: &'d Dataset,
    opt: RmsProp,
    rng: ChaCha8Rng,
    flip_ids: FlipIds,
    warned_single: bool,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, data: &'d Dataset) -> Result<Trainer<'d>, TrainError> {
        cfg.validate(data)?;
        let grounder = Grounder::new(cfg.model.clone(), cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX); // distinct from the per-video generator streams
        let flip_ids = FlipIds { left: data.vocab.id("left"), right: data.vocab.id("right") };
        Ok(Trainer { cfg, grounder, data, opt: RmsProp::new(), rng, flip_ids, warned_single: false })
    }

    /// Draw the next batch: frame pair, flip coin, and negative pick per
    /// element, consumed from the stream in a fixed order.
    pub fn plan_batch(&mut self, videos: &[usize]) -> BatchPlan {
        let elements = videos
            .iter()
            .map(|&v| {
                let t_len = self.data.videos[v].frames.len();
                let frame_a = self.rng.gen_range(0..t_len);
                let frame_b = if t_len == 1 {
                    frame_a
                } else {
                    let gap = self.rng.gen_range(1..=self.cfg.pair_gap.min(t_len - 1));
                    if frame_a + gap < t_len {
                        frame_a + gap
                    } else {
                        frame_a - gap.min(frame_a)
                    }
                };
                let flip = self.cfg.flip && self.rng.gen_bool(0.5);
                PlanElement { video: v, frame_a, frame_b, flip, neg_pick: self.rng.gen() }
            })
            .collect();
        BatchPlan { elements }
    }

    /// Materialize one element under its flip flag: both frames, both
    /// ground-truth boxes, and the (possibly side-swapped) tokens.
    fn element_data(&self, el: &PlanElement) -> Element {
        let video = &self.data.videos[el.video];
        let size = self.data.config.canvas as Real;
        let frame = |t: usize| if el.flip { video.frames[t].flip_horizontal() } else { video.frames[t].clone() };
        let gt = |t: usize| {
            let b = &video.gt[t];
            if el.flip {
                Box2::new(size - b.x2, b.y1, size - b.x1, b.y2)
            } else {
                *b
            }
        };
        let swap = |t: usize| {
            if Some(t) == self.flip_ids.left {
                self.flip_ids.right.expect("vocabulary includes both side words")
            } else if Some(t) == self.flip_ids.right {
                self.flip_ids.left.expect("vocabulary includes both side words")
            } else {
                t
            }
        };
        let tokens = if el.flip { video.tokens.iter().map(|&t| swap(t)).collect() } else { video.tokens.clone() };
        Element { frame_a: frame(el.frame_a), frame_b: frame(el.frame_b), gt_a: gt(el.frame_a), gt_b: gt(el.frame_b), tokens }
    }

    /// Cells at Chebyshev distance >= 2 from `cell` (falling back to
    /// distance 1 on tiny grids), indexed by the raw pick.
    fn negative_cell(&self, cell: usize, pick: u64) -> Option<usize> {
        let grid = self.cfg.model.grid();
        let (ci, cj) = (cell / grid, cell % grid);
        for threshold in [2usize, 1] {
            let candidates: Vec<usize> = (0..grid * grid)
                .filter(|&c| ci.abs_diff(c / grid).max(cj.abs_diff(c % grid)) >= threshold)
                .collect();
            if !candidates.is_empty() {
                return Some(candidates[(pick % candidates.len() as u64) as usize]);
            }
        }
        None
    }

    /// Forward the whole plan on one tape. Returns the total-loss node
    /// and plain-value stats, or `None` when every frame was skipped.
    fn forward_batch(
        &mut self,
        tape: &mut Tape,
        b: &Bindings,
        plan: &BatchPlan,
    ) -> Result<Option<(TensorId, BatchStats)>, TrainError> {
        let n = plan.elements.len();
        let elements: Vec<Element> = plan.elements.iter().map(|el| self.element_data(el)).collect();

        // Expression features first, so each element can borrow another
        // element's subject query as its foreign negative.
        let mut exprs = Vec::with_capacity(n);
        for el in &elements {
            exprs.push(self.grounder.expression_features(tape, b, &el.tokens)?);
        }

        let subject = self.cfg.model.mode.subject_attention();
        let mut reg_terms = Vec::new();
        let mut cls_terms = Vec::new();
        let mut rank_terms = Vec::new();
        let mut ce_terms = Vec::new();
        let mut skipped = 0usize;

        for (i, el) in plan.elements.iter().enumerate() {
            let data = &elements[i];
            let foreign = (1..n).map(|k| (i + k) % n).find(|&k| plan.elements[k].video != el.video);
            if subject && foreign.is_none() && !self.warned_single {
                warn!("batch holds a single video; the margin loss runs without its foreign-expression negative");
                self.warned_single = true;
            }
            let (ga, gb) = self.grounder.ground_pair(tape, b, &exprs[i], &data.frame_a, &data.frame_b)?;
            for (g, gt) in [(&ga, &data.gt_a), (&gb, &data.gt_b)] {
                let size = self.cfg.model.image_size;
                let center = crate::geom::CenterBox::from_pixels(gt, size as Real);
                let responsible = match head::encode_targets(&center, self.cfg.model.grid(), &self.cfg.model.anchors, size) {
                    Ok(r) => r,
                    Err(head::HeadError::Degenerate { detail }) => {
                        warn!("skipping a frame of video {}: degenerate ground truth ({detail})", el.video);
                        skipped += 1;
                        continue;
                    }
                    Err(head::HeadError::Tensor(e)) => return Err(TrainError::Tensor(e)),
                };
                let neg = match (subject, foreign) {
                    (true, Some(f)) => self
                        .negative_cell(responsible.cell, el.neg_pick)
                        .map(|cell| RankNegatives { cell, query: exprs[f].q_sub }),
                    _ => None,
                };
                let losses = self.grounder.frame_losses(tape, g, gt, neg.as_ref())?;
                reg_terms.push(losses.reg);
                cls_terms.push(losses.cls);
                rank_terms.extend(losses.rank);
                ce_terms.extend(losses.ce);
            }
        }

        if reg_terms.is_empty() {
            return Ok(None);
        }
        let reg = tape.mean_scalars(&reg_terms)?;
        let cls = tape.mean_scalars(&cls_terms)?;
        let mut total = tape.add(reg, cls)?;
        let mut stats = BatchStats {
            reg: tape.value_scalar(reg),
            cls: tape.value_scalar(cls),
            rank: 0.0,
            ce: 0.0,
            total: 0.0,
            scored: reg_terms.len(),
            skipped,
        };
        if !rank_terms.is_empty() {
            let rank = tape.mean_scalars(&rank_terms)?;
            let weighted = tape.scale(rank, self.cfg.lambda_rank)?;
            total = tape.add(total, weighted)?;
            stats.rank = tape.value_scalar(rank);
        }
        if !ce_terms.is_empty() {
            let ce = tape.mean_scalars(&ce_terms)?;
            let weighted = tape.scale(ce, self.cfg.lambda_ce)?;
            total = tape.add(total, weighted)?;
            stats.ce = tape.value_scalar(ce);
        }
        stats.total = tape.value_scalar(total);
        Ok(Some((total, stats)))
    }

    /// Score a plan without touching parameters.
    pub fn batch_loss(&mut self, plan: &BatchPlan) -> Result<Option<BatchStats>, TrainError> {
        let mut tape = Tape::new();
        let b = self.grounder.bind(&mut tape, false)?;
        Ok(self.forward_batch(&mut tape, &b, plan)?.map(|(_, s)| s))
    }

    /// Forward, backward, and one RMSProp update at the given rate. On a
    /// diverging update the parameters are left non-finite; [`train`]
    /// rolls back to its snapshot when that happens.
    pub fn batch_step(&mut self, plan: &BatchPlan, lr: Real) -> Result<Option<BatchStats>, TrainError> {
        let mut tape = Tape::new();
        let b = self.grounder.bind(&mut tape, true)?;
        let Some((total, stats)) = self.forward_batch(&mut tape, &b, plan)? else {
            return Ok(None);
        };
        tape.backward(total)?;
        let mut grads: BTreeMap<String, Vec<Real>> = BTreeMap::new();
        for (path, id) in b.iter() {
            if let Some(g) = tape.take_grad(id) {
                grads.insert(path.to_string(), g);
            }
        }
        self.opt.step(&mut self.grounder.params, &grads, lr);
        for (_, t) in self.grounder.params.iter() {
            if t.first_non_finite().is_some() {
                return Err(TrainError::Tensor(TensorError::NonFinite { op: "optimizer step" }));
            }
        }
        Ok(Some(stats))
    }

    /// Selected-box quality on a video subset: strict Acc@0.5 and mean
    /// IoU, pooled over frames. Predicted boxes are clipped to the image
    /// before scoring.
    pub fn evaluate(&self, indices: &[usize]) -> Result<(Real, Real), TrainError> {
        let size = self.cfg.model.image_size as Real;
        let mut scores = Vec::new();
        for &vi in indices {
            let video = &self.data.videos[vi];
            let preds = self.grounder.predict_video(&video.frames, &video.tokens, 1, false)?;
            let boxes: Vec<Box2> =
                preds.iter().map(|p| p.topk.boxes[p.selected].to_pixels(size).clip(size, size)).collect();
            let fs = metrics::frame_scores(&boxes, &video.gt)
                .map_err(|e| TrainError::Setup { detail: format!("evaluation failed on video {}: {e}", video.id) })?;
            scores.extend(fs);
        }
        if scores.is_empty() {
            return Ok((0.0, 0.0));
        }
        let n = scores.len() as Real;
        let acc = scores.iter().filter(|s| s.iou > 0.5).count() as Real / n;
        let miou = scores.iter().map(|s| s.iou).sum::<Real>() / n;
        Ok((acc, miou))
    }
}

/// Run the full loop: split, shuffle, step with polynomial decay,
/// validate each epoch, and roll back on divergence.
pub fn train(cfg: TrainConfig, data: &Dataset) -> Result<TrainReport, TrainError> {
    let mut t = Trainer::new(cfg, data)?;
    let n = data.videos.len();
    let n_val = (((n as Real) * t.cfg.val_fraction).floor() as usize).min(n - 1);
    let n_train = n - n_val;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let val_idx: Vec<usize> = (n_train..n).collect();
    let total_steps = t.cfg.epochs * (n_train * t.cfg.pairs).div_ceil(t.cfg.batch);

    let mut history = Vec::new();
    let mut snapshot = t.grounder.params.clone();
    let mut diverged_at = None;
    let mut step = 0usize;

    'epochs: for epoch in 0..t.cfg.epochs {
        let mut order = train_idx.repeat(t.cfg.pairs);
        order.shuffle(&mut t.rng);
        let mut sums = [0.0 as Real; 5]; // reg, cls, rank, ce, total
        let mut scored = 0usize;
        for chunk in order.chunks(t.cfg.batch) {
            let plan = t.plan_batch(chunk);
            let lr = poly_lr(step, total_steps, t.cfg.lr, POLY_POWER);
            step += 1;
            match t.batch_step(&plan, lr) {
                Ok(Some(st)) => {
                    let w = st.scored as Real;
                    for (s, v) in sums.iter_mut().zip([st.reg, st.cls, st.rank, st.ce, st.total]) {
                        *s += v * w;
                    }
                    scored += st.scored;
                }
                Ok(None) => {}
                Err(e) if is_divergence(&e) => {
                    warn!("training diverged in epoch {epoch} ({e}); restoring the last good parameters");
                    t.grounder.params = snapshot.clone();
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let (val_acc, val_miou) = match t.evaluate(&val_idx) {
            Ok(m) => m,
            Err(e) if is_divergence(&e) => {
                warn!("validation diverged in epoch {epoch} ({e}); restoring the last good parameters");
                t.grounder.params = snapshot.clone();
                diverged_at = Some(epoch);
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        let m = |x: Real| if scored > 0 { x / scored as Real } else { 0.0 };
        let row = HistoryRow {
            epoch,
            loss: m(sums[4]),
            reg: m(sums[0]),
            cls: m(sums[1]),
            rank: m(sums[2]),
            ce: m(sums[3]),
            val_acc,
            val_miou,
        };
        info!(
            "epoch {epoch}: loss {:.6} (reg {:.6} cls {:.6} rank {:.6} ce {:.6}) val_acc {:.4} val_miou {:.4}",
            row.loss, row.reg, row.cls, row.rank, row.ce, row.val_acc, row.val_miou
        );
        history.push(row);
        snapshot = t.grounder.params.clone();
    }

    Ok(TrainReport { grounder: t.grounder, history, diverged_at, train_videos: n_train, val_videos: n_val })
}
