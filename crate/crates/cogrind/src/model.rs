//! End-to-end grounding pipeline: expression encoding, visual backbone,
//! similarity maps, cross-frame enhancement, and the prediction head,
//! gated by an ablation [`Mode`].
//!
//! The mode switches change *wiring only* — every configuration
//! registers the identical parameter set, so two models built from the
//! same seed differ purely in which paths participate in the forward
//! pass. Combined with the identity initialization of the cross-frame
//! convolution, a freshly seeded `cg-*` model predicts bitwise the same
//! boxes as its non-`cg` sibling, which keeps ablation comparisons
//! honest: any divergence comes from training, not initialization.
//!
//! Score composition at inference: the head's objectness is multiplied
//! per cell by the unit-mapped subject map `(1+S)/2` when subject
//! attention is active, and additionally by `(1+L)/2` when location
//! attention is active. Classification loss always trains the raw
//! objectness; the maps train through their own margin and
//! cross-entropy terms.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, DEFAULT_MARGIN, DEFAULT_TAU};
use crate::cogrounding;
use crate::geom::{Box2, CenterBox};
use crate::head::{self, Anchor, HeadDims, HeadError, Responsible};
use crate::params::{Bindings, CkptError, ParamStore};
use crate::postproc::{self, PostprocError, TopKFrame};
use crate::tape::{Tape, TensorId};
use crate::tensor::{Real, Tensor, TensorError};
use crate::text::{self, Encoded, TextDims};
use crate::visual::{self, FrameImage, VisualDims, VisualError};

pub const SUB_ATT_W: &str = "att/sub/w";
pub const LOC_ATT_W: &str = "att/loc/w";
pub const SUB_PROJ_W: &str = "att/sub/proj/w";
pub const SUB_PROJ_B: &str = "att/sub/proj/b";
pub const LOC_PROJ_W: &str = "att/loc/proj/w";
pub const LOC_PROJ_B: &str = "att/loc/proj/b";
pub const COORD_PREFIX: &str = "coord";
pub const LOC_FC_W: &str = "loc/fc/w";
pub const LOC_FC_B: &str = "loc/fc/b";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {detail}")]
    Config { detail: String },
    #[error("invalid model input: {detail}")]
    Input { detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Visual(#[from] VisualError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Postproc(#[from] PostprocError),
    #[error(transparent)]
    Checkpoint(#[from] CkptError),
    #[error("model sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
}

/// Ablation switches. Naming follows the convention that `s` adds the
/// subject similarity map, `sl` adds the location map on top, and the
/// `cg-` prefix adds cross-frame feature enhancement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    SAtt,
    SlAtt,
    CgBaseline,
    CgSAtt,
    CgSlAtt,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Baseline,
        Mode::SAtt,
        Mode::SlAtt,
        Mode::CgBaseline,
        Mode::CgSAtt,
        Mode::CgSlAtt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::SAtt => "s-att",
            Mode::SlAtt => "sl-att",
            Mode::CgBaseline => "cg-baseline",
            Mode::CgSAtt => "cg-s-att",
            Mode::CgSlAtt => "cg-sl-att",
        }
    }

    /// Whether the subject similarity map scales scores (and the margin
    /// loss trains).
    pub fn subject_attention(&self) -> bool {
        matches!(self, Mode::SAtt | Mode::SlAtt | Mode::CgSAtt | Mode::CgSlAtt)
    }

    /// Whether the location map scales scores (and its cross-entropy
    /// trains). Implies subject attention: the location features are
    /// masked by the subject map.
    pub fn location_attention(&self) -> bool {
        matches!(self, Mode::SlAtt | Mode::CgSlAtt)
    }

    /// Whether frame features are enhanced from a partner frame.
    pub fn co_grounding(&self) -> bool {
        matches!(self, Mode::CgBaseline | Mode::CgSAtt | Mode::CgSlAtt)
    }
}

impl std::str::FromStr for Mode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Mode, ModelError> {
        let lower = s.to_lowercase();
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| ModelError::Config {
                detail: format!(
                    "unknown mode {s:?}; valid modes: {}",
                    Mode::ALL.map(|m| m.name()).join(", ")
                ),
            })
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyper-parameters; saved as a JSON sidecar next to every
/// checkpoint so inference can rebuild the exact model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub image_size: usize,
    /// Channel widths of the visual tower; the last entry is the
    /// feature width `D` used everywhere downstream.
    pub widths: Vec<usize>,
    /// Word embedding width.
    pub embed: usize,
    /// Per-direction LSTM state width.
    pub hidden: usize,
    pub vocab: usize,
    pub anchors: Vec<Anchor>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::SlAtt,
            image_size: 64,
            widths: vec![12, 24, 48, 48],
            embed: 16,
            hidden: 16,
            vocab: text::Vocab::builtin().len(),
            anchors: head::default_anchors(),
        }
    }
}

impl ModelConfig {
    /// Feature width `D` shared by the visual map, queries, and head.
    pub fn feature(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    /// Side length of the final feature grid.
    pub fn grid(&self) -> usize {
        self.image_size >> self.widths.len()
    }

    pub fn cells(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn visual_dims(&self) -> VisualDims {
        VisualDims { image_size: self.image_size, widths: self.widths.clone() }
    }

    pub fn text_dims(&self) -> TextDims {
        TextDims { vocab: self.vocab, embed: self.embed, hidden: self.hidden }
    }

    pub fn head_dims(&self) -> HeadDims {
        HeadDims { feature: self.feature(), coord: self.feature(), anchors: self.anchors.len() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |detail: String| Err(ModelError::Config { detail });
        if self.widths.is_empty() {
            return fail("visual tower needs at least one block".into());
        }
        self.visual_dims().validate().map_err(|e| ModelError::Config { detail: e.to_string() })?;
        if self.grid() < 2 {
            return fail(format!(
                "image size {} with {} halvings leaves a {}-cell grid; need at least 2x2",
                self.image_size,
                self.widths.len(),
                self.grid()
            ));
        }
        if self.embed == 0 || self.hidden == 0 {
            return fail("embed and hidden widths must be positive".into());
        }
        if self.vocab < 2 {
            return fail("vocabulary must include <pad> and <unk>".into());
        }
        if self.anchors.is_empty() {
            return fail("need at least one anchor".into());
        }
        if self.anchors.iter().any(|a| !(a.w > 0.0 && a.h > 0.0 && a.w.is_finite() && a.h.is_finite())) {
            return fail("anchors must have positive finite extents".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelConfig, ModelError> {
        let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A configuration plus its parameter store.
#[derive(Debug)]
pub struct Grounder {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Grounder {
    /// Build a freshly initialized model. Every mode registers the same
    /// parameters in the same order, so the seed alone fixes them.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Grounder, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        text::register(&mut params, &config.text_dims(), &mut rng);

        let (two_h, e, d) = (2 * config.hidden, config.embed, config.feature());
        let att_bound = (1.0 / two_h as Real).sqrt();
        params.insert_uniform(SUB_ATT_W, &[two_h, 1], att_bound, &mut rng);
        params.insert_uniform(LOC_ATT_W, &[two_h, 1], att_bound, &mut rng);
        let proj_bound = (1.0 / e as Real).sqrt();
        params.insert_uniform(SUB_PROJ_W, &[e, d], proj_bound, &mut rng);
        params.insert(SUB_PROJ_B, Tensor::zeros(&[d]));
        params.insert_uniform(LOC_PROJ_W, &[e, d], proj_bound, &mut rng);
        params.insert(LOC_PROJ_B, Tensor::zeros(&[d]));

        visual::register(&mut params, &config.visual_dims(), &mut rng);
        visual::register_coord_projection(&mut params, COORD_PREFIX, d, &mut rng);

        let hw = config.cells();
        params.insert_uniform(LOC_FC_W, &[hw, d], (1.0 / hw as Real).sqrt(), &mut rng);
        params.insert(LOC_FC_B, Tensor::zeros(&[d]));

        cogrounding::register(&mut params, d, &mut rng);
        head::register(&mut params, &config.head_dims(), &mut rng);
        Ok(Grounder { config, params })
    }

    /// Attach loaded parameters to a config, verifying that every path
    /// and shape matches what the config would register.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Grounder, ModelError> {
        let reference = Grounder::new(config.clone(), 0)?;
        for (path, tensor) in reference.params.iter() {
            match params.get(path) {
                None => {
                    return Err(ModelError::Config { detail: format!("checkpoint is missing parameter {path:?}") })
                }
                Some(t) if t.shape() != tensor.shape() => {
                    return Err(ModelError::Config {
                        detail: format!(
                            "checkpoint parameter {path:?} has shape {:?}, config needs {:?}",
                            t.shape(),
                            tensor.shape()
                        ),
                    })
                }
                Some(_) => {}
            }
        }
        if params.len() != reference.params.len() {
            return Err(ModelError::Config {
                detail: format!(
                    "checkpoint carries {} parameters, config registers {}",
                    params.len(),
                    reference.params.len()
                ),
            });
        }
        Ok(Grounder { config, params })
    }

    /// Write parameters and the config sidecar.
    pub fn save(&self, ckpt: &Path, sidecar: &Path) -> Result<(), ModelError> {
        self.params.save(ckpt)?;
        self.config.save(sidecar)
    }

    pub fn load(ckpt: &Path, sidecar: &Path) -> Result<Grounder, ModelError> {
        let config = ModelConfig::load(sidecar)?;
        Grounder::from_parts(config, ParamStore::load(ckpt)?)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bindings, ModelError> {
        Ok(self.params.bind(tape, trainable)?)
    }

    /// Encode an expression and pool it into the two projected queries.
    /// Baseline modes pool with fixed uniform weights through the same
    /// projections, so the head input layout never changes.
    pub fn expression_features(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        tokens: &[usize],
    ) -> Result<ExpressionFeatures, ModelError> {
        let enc = text::encode(tape, b, &self.config.text_dims(), tokens)?;
        let (alpha_sub, q_sub_e) = if self.config.mode.subject_attention() {
            attention::attend(tape, b, SUB_ATT_W, &enc)?
        } else {
            attention::attend_uniform(tape, &enc)?
        };
        let (alpha_loc, q_loc_e) = if self.config.mode.location_attention() {
            attention::attend(tape, b, LOC_ATT_W, &enc)?
        } else {
            attention::attend_uniform(tape, &enc)?
        };
        let q_sub = tape.conv1x1(q_sub_e, b.p(SUB_PROJ_W), b.p(SUB_PROJ_B))?;
        let q_loc = tape.conv1x1(q_loc_e, b.p(LOC_PROJ_W), b.p(LOC_PROJ_B))?;
        Ok(ExpressionFeatures { encoded: enc, alpha_sub, alpha_loc, q_sub, q_loc })
    }

    /// Backbone features `[HW, D]` and projected coordinates `[HW, D]`.
    pub fn frame_features(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        frame: &FrameImage,
    ) -> Result<FrameFeatures, ModelError> {
        let img = tape.constant(frame.to_tensor())?;
        let taps = visual::backbone_forward(tape, b, &self.config.visual_dims(), img)?;
        let top = *taps.last().expect("tower has blocks");
        let v = tape.reshape(top, &[self.config.cells(), self.config.feature()])?;
        let u = visual::coordinate_features(tape, b, COORD_PREFIX, self.config.grid(), self.config.grid())?;
        Ok(FrameFeatures { v, u })
    }

    /// Similarity maps and raw head grid for one (possibly enhanced)
    /// frame feature map.
    fn ground_features(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        expr: &ExpressionFeatures,
        v: TensorId,
        u: TensorId,
    ) -> Result<FrameGround, ModelError> {
        let mode = self.config.mode;
        let s = if mode.subject_attention() {
            Some(attention::subject_map(tape, v, expr.q_sub)?)
        } else {
            None
        };
        let l = if mode.location_attention() {
            let aff = attention::location_affinity(tape, u)?;
            let feats = attention::location_features(tape, b, LOC_FC_W, LOC_FC_B, aff, s.expect("sl implies s"))?;
            Some(attention::location_map(tape, feats, expr.q_loc)?)
        } else {
            None
        };
        let raw = head::head_forward(tape, b, &self.config.head_dims(), v, expr.q_sub, expr.q_loc, u)?;
        Ok(FrameGround { v, u, s, l, raw })
    }

    /// Ground a training pair. In `cg-*` modes each frame's features are
    /// enhanced from the other frame before the maps and head run.
    pub fn ground_pair(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        expr: &ExpressionFeatures,
        frame_a: &FrameImage,
        frame_b: &FrameImage,
    ) -> Result<(FrameGround, FrameGround), ModelError> {
        let fa = self.frame_features(tape, b, frame_a)?;
        let fb = self.frame_features(tape, b, frame_b)?;
        let (va, vb) = if self.config.mode.co_grounding() {
            cogrounding::enhance_pair(tape, b, fa.v, fb.v)?
        } else {
            (fa.v, fb.v)
        };
        let ga = self.ground_features(tape, b, expr, va, fa.u)?;
        let gb = self.ground_features(tape, b, expr, vb, fb.u)?;
        Ok((ga, gb))
    }

    /// Ground a single frame for inference; `partner` supplies the
    /// enhancement source in `cg-*` modes (itself when absent).
    pub fn ground_frame(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        expr: &ExpressionFeatures,
        frame: &FrameImage,
        partner: Option<&FrameImage>,
    ) -> Result<FrameGround, ModelError> {
        let own = self.frame_features(tape, b, frame)?;
        let v = if self.config.mode.co_grounding() {
            let other = match partner {
                Some(p) => self.frame_features(tape, b, p)?.v,
                None => own.v,
            };
            cogrounding::enhance(tape, b, own.v, other)?
        } else {
            own.v
        };
        self.ground_features(tape, b, expr, v, own.u)
    }

    /// Mode-gated loss terms for one grounded frame; weighting and
    /// averaging live in the trainer.
    pub fn frame_losses(
        &self,
        tape: &mut Tape,
        g: &FrameGround,
        gt: &Box2,
        neg: Option<&RankNegatives>,
    ) -> Result<FrameLosses, ModelError> {
        let size = self.config.image_size as Real;
        let gt_center = CenterBox::from_pixels(gt, size);
        let responsible = head::encode_targets(&gt_center, self.config.grid(), &self.config.anchors, self.config.image_size)?;
        let anchors = self.config.anchors.len();
        let cls = head::cls_loss(tape, g.raw, anchors, responsible.slot(anchors))?;
        let reg = head::reg_loss(tape, g.raw, responsible.cell, responsible.anchor, &responsible.targets)?;
        let rank = match (g.s, neg) {
            (Some(s), Some(neg)) => {
                let pos = map_entry(tape, s, responsible.cell)?;
                let neg_cell = map_entry(tape, s, neg.cell)?;
                let s_foreign = attention::subject_map(tape, g.v, neg.query)?;
                let neg_query = map_entry(tape, s_foreign, responsible.cell)?;
                Some(attention::rank_loss(tape, pos, neg_cell, neg_query, DEFAULT_MARGIN)?)
            }
            _ => None,
        };
        let ce = match g.l {
            Some(l) => Some(attention::location_ce_loss(tape, l, DEFAULT_TAU, responsible.cell)?),
            None => None,
        };
        Ok(FrameLosses { responsible, reg, cls, rank, ce })
    }

    /// Per-cell score multipliers from the active similarity maps,
    /// `None` in baseline modes.
    pub fn cell_factors(&self, tape: &Tape, g: &FrameGround) -> Option<Vec<Real>> {
        let unit = |id: TensorId| -> Vec<Real> { tape.value(id).data().iter().map(|&x| (1.0 + x) / 2.0).collect() };
        match (g.s, g.l) {
            (None, _) => None,
            (Some(s), None) => Some(unit(s)),
            (Some(s), Some(l)) => {
                let (sf, lf) = (unit(s), unit(l));
                Some(sf.iter().zip(&lf).map(|(a, b)| a * b).collect())
            }
        }
    }

    /// Run the whole video, one tape per frame, returning top-`k`
    /// candidates for the post-processor. `cg-*` modes enhance frame `t`
    /// from frame `t-1` (frame 0 borrows frame 1).
    pub fn predict_video(
        &self,
        frames: &[FrameImage],
        tokens: &[usize],
        k: usize,
        dump_maps: bool,
    ) -> Result<Vec<FramePrediction>, ModelError> {
        if frames.is_empty() {
            return Err(ModelError::Input { detail: "video has no frames".into() });
        }
        let mut out = Vec::with_capacity(frames.len());
        for t in 0..frames.len() {
            let mut tape = Tape::new();
            let b = self.bind(&mut tape, false)?;
            let expr = self.expression_features(&mut tape, &b, tokens)?;
            let partner = if t == 0 { frames.get(1) } else { Some(&frames[t - 1]) };
            let g = self.ground_frame(&mut tape, &b, &expr, &frames[t], partner)?;
            let mut preds = head::decode_grid(tape.value(g.raw), self.config.grid(), &self.config.anchors)?;
            if let Some(factors) = self.cell_factors(&tape, &g) {
                head::scale_scores_by_cell(&mut preds, &factors);
            }
            let order = head::top_k(&preds, k);
            let best = head::select(&preds);
            let selected = order.iter().position(|&i| i == best).unwrap_or(0);
            let topk = postproc::gather_topk(&preds, tape.value(g.v), k)?;
            let maps = dump_maps.then(|| MapValues {
                alpha_sub: tape.value(expr.alpha_sub).data().to_vec(),
                alpha_loc: tape.value(expr.alpha_loc).data().to_vec(),
                s: g.s.map(|id| tape.value(id).data().to_vec()),
                l: g.l.map(|id| tape.value(id).data().to_vec()),
            });
            out.push(FramePrediction { topk, selected, maps });
        }
        Ok(out)
    }
}

/// Pull one cell's map value out as a `[1]` scalar node.
fn map_entry(tape: &mut Tape, map: TensorId, cell: usize) -> Result<TensorId, TensorError> {
    let row = tape.gather_rows(map, &[cell])?;
    tape.reshape(row, &[1])
}

/// Encoded expression with attention weights and projected queries.
pub struct ExpressionFeatures {
    pub encoded: Encoded,
    /// `[1, N]` word weights of the subject query.
    pub alpha_sub: TensorId,
    /// `[1, N]` word weights of the location query.
    pub alpha_loc: TensorId,
    /// `[1, D]` subject query in visual feature space.
    pub q_sub: TensorId,
    /// `[1, D]` location query in location feature space.
    pub q_loc: TensorId,
}

/// Raw per-frame visual features before any enhancement.
pub struct FrameFeatures {
    /// `[HW, D]` backbone output rows.
    pub v: TensorId,
    /// `[HW, D]` projected coordinate descriptors.
    pub u: TensorId,
}

/// One grounded frame: head-ready features plus the active maps.
pub struct FrameGround {
    /// `[HW, D]` features as seen by the head (enhanced in `cg` modes).
    pub v: TensorId,
    pub u: TensorId,
    /// `[HW, 1]` subject similarity, when subject attention is active.
    pub s: Option<TensorId>,
    /// `[HW, 1]` location similarity, when location attention is active.
    pub l: Option<TensorId>,
    /// `[HW, 5A]` raw head grid.
    pub raw: TensorId,
}

/// Negative samples for the subject margin loss: a cell away from the
/// target and a projected subject query from a different video.
pub struct RankNegatives {
    pub cell: usize,
    /// `[1, D]` projected foreign subject query.
    pub query: TensorId,
}

/// Loss nodes for one frame; `rank`/`ce` follow the mode gating.
#[derive(Debug)]
pub struct FrameLosses {
    pub responsible: Responsible,
    pub reg: TensorId,
    pub cls: TensorId,
    pub rank: Option<TensorId>,
    pub ce: Option<TensorId>,
}

/// Raw attention values captured for inspection dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapValues {
    pub alpha_sub: Vec<Real>,
    pub alpha_loc: Vec<Real>,
    pub s: Option<Vec<Real>>,
    pub l: Option<Vec<Real>>,
}

/// Per-frame inference output: top-K candidates (score-sorted) and the
/// index of the selected candidate within them.
#[derive(Debug, Clone)]
pub struct FramePrediction {
    pub topk: TopKFrame,
    pub selected: usize,
    pub maps: Option<MapValues>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::str::FromStr;

    fn tiny_config(mode: Mode) -> ModelConfig {
        ModelConfig {
            mode,
            image_size: 32,
            widths: vec![6, 8],
            embed: 6,
            hidden: 5,
            ..ModelConfig::default()
        }
    }

    fn tokens(expr: &str) -> Vec<usize> {
        text::Vocab::builtin().encode(expr).unwrap()
    }

    fn checker_frame(size: usize) -> FrameImage {
        let mut img = FrameImage::filled(size, 0.0).unwrap();
        for i in 8..16 {
            for j in 4..12 {
                img.set_pixel(i, j, [1.0, 0.0, 0.0]);
            }
        }
        for i in 20..28 {
            for j in 18..26 {
                img.set_pixel(i, j, [0.0, 0.0, 1.0]);
            }
        }
        img
    }

    #[test]
    fn mode_names_round_trip_through_parser_and_serde() {
        for m in Mode::ALL {
            assert_eq!(Mode::from_str(m.name()).unwrap(), m);
            assert_eq!(Mode::from_str(&m.name().to_uppercase()).unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
            assert_eq!(serde_json::from_str::<Mode>(&json).unwrap(), m);
        }
        let err = Mode::from_str("fancy").unwrap_err().to_string();
        assert!(err.contains("cg-sl-att") && err.contains("baseline"), "{}", err);
    }

    #[test]
    fn config_validation_rejects_bad_geometry() {
        let ok = tiny_config(Mode::Baseline);
        assert!(ok.validate().is_ok());
        assert_eq!(ok.grid(), 8);
        assert_eq!(ok.feature(), 8);

        let cfg = ModelConfig { widths: vec![], ..ok.clone() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { widths: vec![4; 5], image_size: 32, ..ok.clone() };
        assert!(cfg.validate().is_err(), "32 px cannot halve five times into a 2x2 grid");
        let cfg = ModelConfig { vocab: 1, ..ok.clone() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { anchors: vec![], ..ok.clone() };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig { anchors: vec![Anchor { w: 0.0, h: 0.1 }], ..ok };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_mode_registers_the_same_parameters() {
        let stores: Vec<ParamStore> =
            Mode::ALL.iter().map(|&m| Grounder::new(tiny_config(m), 11).unwrap().params).collect();
        for s in &stores[1..] {
            assert_eq!(s.len(), stores[0].len());
            for ((pa, ta), (pb, tb)) in stores[0].iter().zip(s.iter()) {
                assert_eq!(pa, pb);
                assert_eq!(ta, tb);
            }
        }
    }

    #[test]
    fn same_seed_same_params_different_seed_different_params() {
        let a = Grounder::new(tiny_config(Mode::SlAtt), 3).unwrap();
        let b = Grounder::new(tiny_config(Mode::SlAtt), 3).unwrap();
        let c = Grounder::new(tiny_config(Mode::SlAtt), 4).unwrap();
        for ((_, ta), (_, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(ta, tb);
        }
        assert!(a.params.iter().zip(c.params.iter()).any(|((_, ta), (_, tc))| ta != tc));
    }

    #[test]
    fn every_mode_predicts_finite_sorted_candidates() {
        let frames = vec![checker_frame(32), checker_frame(32)];
        let toks = tokens("the red square");
        for mode in Mode::ALL {
            let g = Grounder::new(tiny_config(mode), 5).unwrap();
            let preds = g.predict_video(&frames, &toks, 4, true).unwrap();
            assert_eq!(preds.len(), 2);
            for p in &preds {
                assert_eq!(p.topk.boxes.len(), 4);
                assert_eq!(p.selected, 0, "top-K is score-sorted, argmax leads");
                assert!(p.topk.scores.windows(2).all(|w| w[0] >= w[1]));
                assert!(p.topk.scores.iter().all(|s| s.is_finite() && *s >= 0.0));
                let maps = p.maps.as_ref().unwrap();
                assert_eq!(maps.alpha_sub.len(), toks.len());
                assert_eq!(maps.s.is_some(), mode.subject_attention());
                assert_eq!(maps.l.is_some(), mode.location_attention());
            }
        }
    }

    #[test]
    fn untrained_enhancement_does_not_change_predictions() {
        // cg/w starts as an identity block, so at init the cg modes must
        // predict bitwise what their plain siblings predict.
        let frames = vec![checker_frame(32), checker_frame(32)];
        let toks = tokens("blue circle on the left");
        for (plain, cg) in [
            (Mode::Baseline, Mode::CgBaseline),
            (Mode::SAtt, Mode::CgSAtt),
            (Mode::SlAtt, Mode::CgSlAtt),
        ] {
            let a = Grounder::new(tiny_config(plain), 9).unwrap();
            let b = Grounder::new(tiny_config(cg), 9).unwrap();
            let pa = a.predict_video(&frames, &toks, 3, false).unwrap();
            let pb = b.predict_video(&frames, &toks, 3, false).unwrap();
            for (x, y) in pa.iter().zip(&pb) {
                assert_eq!(x.topk.scores, y.topk.scores, "{plain} vs {cg}");
                assert_eq!(x.topk.boxes, y.topk.boxes);
            }
        }
    }

    #[test]
    fn prediction_is_bitwise_deterministic() {
        let frames = vec![checker_frame(32), checker_frame(32), checker_frame(32)];
        let toks = tokens("the blue circle");
        let g = Grounder::new(tiny_config(Mode::CgSlAtt), 21).unwrap();
        let a = g.predict_video(&frames, &toks, 5, false).unwrap();
        let b = g.predict_video(&frames, &toks, 5, false).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.topk.scores, y.topk.scores);
            assert_eq!(x.topk.boxes, y.topk.boxes);
            assert_eq!(x.topk.features, y.topk.features);
        }
    }

    #[test]
    fn loss_terms_follow_mode_gating() {
        let frame = checker_frame(32);
        let toks = tokens("the red square");
        let gt = Box2::new(4.0, 8.0, 12.0, 16.0);
        for mode in Mode::ALL {
            let g = Grounder::new(tiny_config(mode), 2).unwrap();
            let mut tape = Tape::new();
            let b = g.bind(&mut tape, true).unwrap();
            let expr = g.expression_features(&mut tape, &b, &toks).unwrap();
            let foreign = g.expression_features(&mut tape, &b, &tokens("green triangle on the top")).unwrap();
            let (ga, _gb) = g.ground_pair(&mut tape, &b, &expr, &frame, &frame).unwrap();
            let neg = RankNegatives { cell: 63, query: foreign.q_sub };
            let losses = g.frame_losses(&mut tape, &ga, &gt, Some(&neg)).unwrap();
            assert_eq!(losses.rank.is_some(), mode.subject_attention(), "{mode}");
            assert_eq!(losses.ce.is_some(), mode.location_attention(), "{mode}");
            for id in [Some(losses.reg), Some(losses.cls), losses.rank, losses.ce].into_iter().flatten() {
                let v = tape.value_scalar(id);
                assert!(v.is_finite() && v >= 0.0, "{mode}: loss {v}");
            }
        }
    }

    #[test]
    fn losses_reject_degenerate_ground_truth() {
        let g = Grounder::new(tiny_config(Mode::Baseline), 2).unwrap();
        let mut tape = Tape::new();
        let b = g.bind(&mut tape, true).unwrap();
        let expr = g.expression_features(&mut tape, &b, &tokens("the red square")).unwrap();
        let ga = g.ground_frame(&mut tape, &b, &expr, &checker_frame(32), None).unwrap();
        let flat = Box2::new(4.0, 8.0, 12.0, 8.5);
        let err = g.frame_losses(&mut tape, &ga, &flat, None).unwrap_err();
        assert!(matches!(err, ModelError::Head(HeadError::Degenerate { .. })));
    }

    #[test]
    fn sidecar_and_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("model.ckpt");
        let sidecar = dir.path().join("model.json");
        let g = Grounder::new(tiny_config(Mode::CgSAtt), 17).unwrap();
        g.save(&ckpt, &sidecar).unwrap();
        let loaded = Grounder::load(&ckpt, &sidecar).unwrap();
        assert_eq!(loaded.config, g.config);
        for ((pa, ta), (pb, tb)) in g.params.iter().zip(loaded.params.iter()) {
            assert_eq!(pa, pb);
            assert_eq!(ta, tb);
        }
        // A config with different dims must refuse the checkpoint.
        let other = ModelConfig { hidden: 7, ..tiny_config(Mode::CgSAtt) };
        let err = Grounder::from_parts(other, ParamStore::load(&ckpt).unwrap()).unwrap_err();
        assert!(matches!(err, ModelError::Config { .. }));
    }

    #[test]
    fn empty_video_is_rejected() {
        let g = Grounder::new(tiny_config(Mode::Baseline), 2).unwrap();
        assert!(matches!(
            g.predict_video(&[], &tokens("the red square"), 3, false),
            Err(ModelError::Input { .. })
        ));
    }

    #[test]
    fn subject_map_reacts_to_the_expression_but_baseline_factors_stay_none() {
        let g = Grounder::new(tiny_config(Mode::SAtt), 13).unwrap();
        let frame = checker_frame(32);
        let mut tape = Tape::new();
        let b = g.bind(&mut tape, false).unwrap();
        let red = g.expression_features(&mut tape, &b, &tokens("the red square")).unwrap();
        let blue = g.expression_features(&mut tape, &b, &tokens("the blue circle")).unwrap();
        let ga = g.ground_frame(&mut tape, &b, &red, &frame, None).unwrap();
        let gb = g.ground_frame(&mut tape, &b, &blue, &frame, None).unwrap();
        let fa = g.cell_factors(&tape, &ga).unwrap();
        let fb = g.cell_factors(&tape, &gb).unwrap();
        assert_ne!(fa, fb, "different expressions must move the subject map");
        assert!(fa.iter().chain(&fb).all(|&f| (0.0..=1.0).contains(&f)));

        let base = Grounder::new(tiny_config(Mode::Baseline), 13).unwrap();
        let mut tape2 = Tape::new();
        let b2 = base.bind(&mut tape2, false).unwrap();
        let e2 = base.expression_features(&mut tape2, &b2, &tokens("the red square")).unwrap();
        let g2 = base.ground_frame(&mut tape2, &b2, &e2, &frame, None).unwrap();
        assert!(base.cell_factors(&tape2, &g2).is_none());
    }
}
