//! Deterministic toy videos: moving colored shapes plus templated
//! referring expressions, with exact ground-truth boxes.
//!
//! Every video gets its own counter-mode RNG stream derived from the
//! dataset seed, so generation is bitwise reproducible regardless of
//! thread count or video order. Scenes are rasterized without
//! anti-aliasing at pixel centers; ground-truth boxes are the exact
//! bounding rectangles of each target's own mask, annotated even on
//! frames where an occluder hides the target (tracking-style).
//!
//! Four scene families exercise different failure modes:
//! `unique_attribute` (target identified by color+kind), `location_only`
//! (two identical shapes split by a side word), `distractor` (the
//! expression also names a second, non-target entity), and `occlusion`
//! (a gray square fully hides the target for 1–3 mid-video frames).
//! A rule-based resolver ([`oracle_resolve`]) recovers the target from
//! the expression alone, guaranteeing that every label is solvable.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Box2;
use crate::tensor::Real;
use crate::text::{self, Vocab};
use crate::visual::FrameImage;

/// Gray occluder fill, distinct from every shape color and background.
pub const OCCLUDER_GRAY: Real = 0.5;
/// Attempts to sample a scene satisfying all constraints before giving up.
const MAX_ATTEMPTS: usize = 300;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {detail}")]
    Config { detail: String },
    #[error("could not satisfy scene constraints for video {video} after {MAX_ATTEMPTS} attempts")]
    Unsatisfiable { video: usize },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("dataset image: {0}")]
    Png(#[from] image::ImageError),
    #[error("malformed dataset: {detail}")]
    Malformed { detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(&self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(&self) -> [Real; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

impl Side {
    pub fn word(&self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Top => "top",
            Side::Bottom => "bottom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmbiguityClass {
    UniqueAttribute,
    LocationOnly,
    Distractor,
    Occlusion,
}

impl AmbiguityClass {
    pub const ALL: [AmbiguityClass; 4] = [
        AmbiguityClass::UniqueAttribute,
        AmbiguityClass::LocationOnly,
        AmbiguityClass::Distractor,
        AmbiguityClass::Occlusion,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AmbiguityClass::UniqueAttribute => "unique_attribute",
            AmbiguityClass::LocationOnly => "location_only",
            AmbiguityClass::Distractor => "distractor",
            AmbiguityClass::Occlusion => "occlusion",
        }
    }
}

/// One rendered entity: attributes plus its realized per-frame centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: Color,
    pub size: Real,
    /// Center (x, y) in pixels per frame.
    pub track: Vec<(Real, Real)>,
    pub z: usize,
}

/// One sample: frames, expression, and the ground-truth tube.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: usize,
    pub class: AmbiguityClass,
    pub shapes: Vec<ShapeSpec>,
    pub target: usize,
    pub expression: String,
    pub tokens: Vec<usize>,
    pub frames: Vec<FrameImage>,
    pub gt: Vec<Box2>,
    /// `[start, end)` frame range where the target is fully hidden.
    pub occlusion: Option<(usize, usize)>,
}

impl Video {
    /// Frame indices inside the occlusion window, empty without one.
    pub fn occluded_frames(&self) -> Vec<usize> {
        match self.occlusion {
            Some((a, b)) => (a..b).collect(),
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub videos: usize,
    pub frames: usize,
    pub canvas: usize,
    /// Proportions of unique_attribute / location_only / distractor /
    /// occlusion scenes; must sum to 1.
    pub mix: [Real; 4],
    /// Per-frame positional jitter (standard deviation, pixels).
    pub jitter: Real,
    pub seed: u64,
    /// Write frames as PNG instead of raw float tensors.
    pub png: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            videos: 100,
            frames: 8,
            canvas: 64,
            mix: [0.25, 0.25, 0.25, 0.25],
            jitter: 0.5,
            seed: 7,
            png: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let fail = |detail: String| Err(GenError::Config { detail });
        if self.videos == 0 {
            return fail("videos must be positive".into());
        }
        if self.frames < 1 {
            return fail("frames must be positive".into());
        }
        if self.canvas < 48 {
            return fail(format!("canvas {} too small; shapes need at least 48 px", self.canvas));
        }
        let sum: Real = self.mix.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.mix.iter().any(|&m| m < 0.0) {
            return fail(format!("ambiguity mix must be non-negative and sum to 1, got {:?}", self.mix));
        }
        if self.mix[3] > 0.0 && self.frames < 4 {
            return fail("occlusion scenes need at least 4 frames".into());
        }
        if !self.jitter.is_finite() || self.jitter < 0.0 {
            return fail("jitter must be a non-negative real".into());
        }
        Ok(())
    }
}

/// An in-memory dataset plus the vocabulary its tokens refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub videos: Vec<Video>,
    pub vocab: Vocab,
}

/// Deterministic proportional class schedule: video `i` takes the class
/// with the largest remaining quota, so every prefix of the dataset
/// (and hence every contiguous split) tracks the configured mix.
pub fn schedule_classes(mix: &[Real; 4], n: usize) -> Vec<AmbiguityClass> {
    let mut assigned = [0usize; 4];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = 0;
        let mut best_deficit = Real::MIN;
        for k in 0..4 {
            let deficit = mix[k] * (i + 1) as Real - assigned[k] as Real;
            if deficit > best_deficit + 1e-12 {
                best = k;
                best_deficit = deficit;
            }
        }
        assigned[best] += 1;
        out.push(AmbiguityClass::ALL[best]);
    }
    out
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset, GenError> {
    cfg.validate()?;
    let classes = schedule_classes(&cfg.mix, cfg.videos);
    let videos: Vec<Video> = (0..cfg.videos)
        .into_par_iter()
        .map(|i| gen_video(cfg, i, classes[i]))
        .collect::<Result<_, _>>()?;
    Ok(Dataset { config: cfg.clone(), videos, vocab: Vocab::builtin() })
}

// ---- scene sampling ----------------------------------------------------

/// Center bounds (inclusive) keeping a shape inside a horizontal/vertical
/// band of the canvas.
#[derive(Debug, Clone, Copy)]
struct Region {
    x: (Real, Real),
    y: (Real, Real),
}

impl Region {
    fn full(size: Real, canvas: usize) -> Option<Region> {
        let m = size / 2.0 + 2.0;
        let hi = canvas as Real - m;
        if m >= hi {
            return None;
        }
        Some(Region { x: (m, hi), y: (m, hi) })
    }

    /// Restrict the x band to one half of the canvas with a 3 px buffer
    /// off the midline (or the y band for top/bottom).
    fn confined(size: Real, canvas: usize, side: Side) -> Option<Region> {
        let base = Region::full(size, canvas)?;
        let mid = canvas as Real / 2.0;
        let m = size / 2.0 + 3.0;
        let (lo_band, hi_band) = (base.x.0.max(0.0), base.x.1);
        let near = (lo_band, mid - m);
        let far = (mid + m, hi_band);
        if near.0 >= near.1 || far.0 >= far.1 {
            return None;
        }
        Some(match side {
            Side::Left => Region { x: near, ..base },
            Side::Right => Region { x: far, ..base },
            Side::Top => Region { y: near, ..base },
            Side::Bottom => Region { y: far, ..base },
        })
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> Real {
    // Box-Muller; u1 bounded away from zero keeps ln finite.
    let u1: Real = rng.gen_range(1e-12..1.0);
    let u2: Real = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn bounce(pos: &mut Real, vel: &mut Real, lo: Real, hi: Real) {
    if *pos < lo {
        *pos = (2.0 * lo - *pos).min(hi);
        *vel = -*vel;
    } else if *pos > hi {
        *pos = (2.0 * hi - *pos).max(lo);
        *vel = -*vel;
    }
}

/// Linear motion with jitter, reflected off the region bounds.
fn sample_track(
    rng: &mut ChaCha8Rng,
    region: &Region,
    frames: usize,
    jitter: Real,
    base_vel: Option<(Real, Real)>,
) -> (Vec<(Real, Real)>, (Real, Real)) {
    let mut x = rng.gen_range(region.x.0..=region.x.1);
    let mut y = rng.gen_range(region.y.0..=region.y.1);
    let (mut vx, mut vy) = base_vel.unwrap_or_else(|| (rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)));
    let vel = (vx, vy);
    let mut track = Vec::with_capacity(frames);
    for t in 0..frames {
        if t > 0 {
            x += vx + jitter * gaussian(rng);
            y += vy + jitter * gaussian(rng);
            bounce(&mut x, &mut vx, region.x.0, region.x.1);
            bounce(&mut y, &mut vy, region.y.0, region.y.1);
            x = x.clamp(region.x.0, region.x.1);
            y = y.clamp(region.y.0, region.y.1);
        }
        track.push((x, y));
    }
    (track, vel)
}

/// Conservative separation test: the size-side squares of two shapes
/// must keep a 2 px gap on at least one axis, every frame.
fn well_separated(a: &ShapeSpec, b: &ShapeSpec) -> bool {
    let need = (a.size + b.size) / 2.0 + 2.0;
    a.track.iter().zip(&b.track).all(|(&(ax, ay), &(bx, by))| {
        (ax - bx).abs() >= need || (ay - by).abs() >= need
    })
}

fn all_separated(shapes: &[ShapeSpec]) -> bool {
    for i in 0..shapes.len() {
        for j in i + 1..shapes.len() {
            if !well_separated(&shapes[i], &shapes[j]) {
                return false;
            }
        }
    }
    true
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.gen_range(0..items.len())]
}

struct Scene {
    shapes: Vec<ShapeSpec>,
    target: usize,
    expression: String,
    occlusion: Option<(usize, usize)>,
}

fn sample_scene(cfg: &GenConfig, rng: &mut ChaCha8Rng, class: AmbiguityClass) -> Option<Scene> {
    let t = cfg.frames;
    let size_range = (10.0 as Real)..=18.0;
    let shape = |rng: &mut ChaCha8Rng, kind, color, region: Region, base_vel, z| {
        let size = rng.gen_range(size_range.clone()).round();
        let (track, vel) = sample_track(rng, &region, t, cfg.jitter, base_vel);
        (ShapeSpec { kind, color, size, track, z }, vel)
    };
    match class {
        AmbiguityClass::UniqueAttribute | AmbiguityClass::Occlusion => {
            let n = rng.gen_range(2..=3);
            let kind = pick(rng, &ShapeKind::ALL);
            let color = pick(rng, &Color::ALL);
            let region = Region::full(18.0, cfg.canvas)?;
            let (target_spec, _) = shape(rng, kind, color, region, None, 0);
            let mut shapes = vec![target_spec];
            for z in 1..n {
                // Confusers share exactly one attribute with the target.
                let (k2, c2) = if rng.gen_bool(0.5) {
                    (kind, pick(rng, &Color::ALL.into_iter().filter(|&c| c != color).collect::<Vec<_>>()))
                } else {
                    (pick(rng, &ShapeKind::ALL.into_iter().filter(|&k| k != kind).collect::<Vec<_>>()), color)
                };
                let (s, _) = shape(rng, k2, c2, region, None, z);
                shapes.push(s);
            }
            if !all_separated(&shapes) {
                return None;
            }
            let occlusion = if class == AmbiguityClass::Occlusion {
                let len = rng.gen_range(1..=3.min(t - 2).max(1));
                let start = rng.gen_range(1..=t - 1 - len);
                Some((start, start + len))
            } else {
                None
            };
            Some(Scene {
                expression: format!("the {} {}", color.word(), kind.word()),
                shapes,
                target: 0,
                occlusion,
            })
        }
        AmbiguityClass::LocationOnly => {
            let kind = pick(rng, &ShapeKind::ALL);
            let color = pick(rng, &Color::ALL);
            let target_side = pick(rng, &[Side::Left, Side::Right, Side::Top, Side::Bottom]);
            let other_side = match target_side {
                Side::Left => Side::Right,
                Side::Right => Side::Left,
                Side::Top => Side::Bottom,
                Side::Bottom => Side::Top,
            };
            let size = rng.gen_range(size_range).round();
            let build = |rng: &mut ChaCha8Rng, side, z| -> Option<ShapeSpec> {
                let region = Region::confined(size, cfg.canvas, side)?;
                let (track, _) = sample_track(rng, &region, t, cfg.jitter, None);
                Some(ShapeSpec { kind, color, size, track, z })
            };
            let shapes = vec![build(rng, target_side, 0)?, build(rng, other_side, 1)?];
            if !all_separated(&shapes) {
                return None;
            }
            Some(Scene {
                expression: format!("{} {} on the {}", color.word(), kind.word(), target_side.word()),
                shapes,
                target: 0,
                occlusion: None,
            })
        }
        AmbiguityClass::Distractor => {
            // The expression names a second entity; only one shape of the
            // subject's kind exists, so attribute grounding suffices.
            let kind = pick(rng, &ShapeKind::ALL);
            let color = pick(rng, &Color::ALL);
            let ref_kind = pick(rng, &ShapeKind::ALL.into_iter().filter(|&k| k != kind).collect::<Vec<_>>());
            let ref_color = pick(rng, &Color::ALL);
            let region = Region::full(18.0, cfg.canvas)?;
            let (target_spec, vel) = shape(rng, kind, color, region, None, 0);
            // Reference rides the same velocity, starting near the target.
            let (t0x, t0y) = target_spec.track[0];
            let near = Region {
                x: ((t0x - 20.0).max(region.x.0), (t0x + 20.0).min(region.x.1)),
                y: ((t0y - 20.0).max(region.y.0), (t0y + 20.0).min(region.y.1)),
            };
            if near.x.0 >= near.x.1 || near.y.0 >= near.y.1 {
                return None;
            }
            let (ref_spec, _) = shape(rng, ref_kind, ref_color, near, Some(vel), 1);
            let mut shapes = vec![target_spec, ref_spec];
            if rng.gen_bool(0.5) {
                // Optional extra entity, never the subject's kind and
                // never a second copy of the reference's identity.
                let k2 = pick(rng, &ShapeKind::ALL.into_iter().filter(|&k| k != kind).collect::<Vec<_>>());
                let c2 = if k2 == ref_kind {
                    pick(rng, &Color::ALL.into_iter().filter(|&c| c != ref_color).collect::<Vec<_>>())
                } else {
                    pick(rng, &Color::ALL)
                };
                let (s, _) = shape(rng, k2, c2, region, None, 2);
                shapes.push(s);
            }
            if !all_separated(&shapes) {
                return None;
            }
            Some(Scene {
                expression: format!("{} near the {} {}", kind.word(), ref_color.word(), ref_kind.word()),
                shapes,
                target: 0,
                occlusion: None,
            })
        }
    }
}

// ---- rasterization -----------------------------------------------------

fn inside(kind: ShapeKind, cx: Real, cy: Real, half: Real, px: Real, py: Real) -> bool {
    match kind {
        ShapeKind::Square => (px - cx).abs() <= half && (py - cy).abs() <= half,
        ShapeKind::Circle => {
            let (dx, dy) = (px - cx, py - cy);
            dx * dx + dy * dy <= half * half
        }
        ShapeKind::Triangle => {
            // Upward isoceles: apex (cx, cy-half), base y = cy+half.
            let (ax, ay) = (cx, cy - half);
            let (bx, by) = (cx - half, cy + half);
            let (ox, oy) = (cx + half, cy + half);
            let sign = |x1: Real, y1: Real, x2: Real, y2: Real| (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2);
            let d1 = sign(ax, ay, bx, by);
            let d2 = sign(bx, by, ox, oy);
            let d3 = sign(ox, oy, ax, ay);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        }
    }
}

/// Pixel mask of one shape at frame `t`, clipped to the canvas.
pub fn shape_mask(spec: &ShapeSpec, t: usize, canvas: usize) -> Vec<bool> {
    let (cx, cy) = spec.track[t];
    let half = spec.size / 2.0;
    let lo_i = ((cy - half - 1.0).floor().max(0.0)) as usize;
    let hi_i = ((cy + half + 1.0).ceil() as usize).min(canvas);
    let lo_j = ((cx - half - 1.0).floor().max(0.0)) as usize;
    let hi_j = ((cx + half + 1.0).ceil() as usize).min(canvas);
    let mut mask = vec![false; canvas * canvas];
    for i in lo_i..hi_i {
        for j in lo_j..hi_j {
            if inside(spec.kind, cx, cy, half, j as Real + 0.5, i as Real + 0.5) {
                mask[i * canvas + j] = true;
            }
        }
    }
    mask
}

/// Exact bounding rectangle of a mask, edges on pixel boundaries.
pub fn mask_bbox(mask: &[bool], canvas: usize) -> Option<Box2> {
    let (mut min_i, mut min_j, mut max_i, mut max_j) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for i in 0..canvas {
        for j in 0..canvas {
            if mask[i * canvas + j] {
                any = true;
                min_i = min_i.min(i);
                min_j = min_j.min(j);
                max_i = max_i.max(i);
                max_j = max_j.max(j);
            }
        }
    }
    any.then(|| Box2::new(min_j as Real, min_i as Real, (max_j + 1) as Real, (max_i + 1) as Real))
}

/// Occluder rectangle for an occlusion window: a square centered on the
/// target's position at the window start, oversized to absorb drift.
fn occluder_rect(target: &ShapeSpec, start: usize) -> Box2 {
    let (cx, cy) = target.track[start];
    let half = target.size / 2.0 + 6.0;
    Box2::new(cx - half, cy - half, cx + half, cy + half)
}

fn render_frame(shapes: &[ShapeSpec], t: usize, canvas: usize, occluder: Option<&Box2>) -> FrameImage {
    let mut img = FrameImage::filled(canvas, 0.0).expect("valid canvas");
    let mut order: Vec<&ShapeSpec> = shapes.iter().collect();
    order.sort_by_key(|s| s.z);
    for s in order {
        let rgb = s.color.rgb();
        let mask = shape_mask(s, t, canvas);
        for i in 0..canvas {
            for j in 0..canvas {
                if mask[i * canvas + j] {
                    img.set_pixel(i, j, rgb);
                }
            }
        }
    }
    if let Some(r) = occluder {
        for i in 0..canvas {
            for j in 0..canvas {
                let (px, py) = (j as Real + 0.5, i as Real + 0.5);
                if px >= r.x1 && px <= r.x2 && py >= r.y1 && py <= r.y2 {
                    img.set_pixel(i, j, [OCCLUDER_GRAY; 3]);
                }
            }
        }
    }
    img
}

fn gen_video(cfg: &GenConfig, id: usize, class: AmbiguityClass) -> Result<Video, GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id as u64);
    let vocab = Vocab::builtin();
    'attempt: for _ in 0..MAX_ATTEMPTS {
        let Some(scene) = sample_scene(cfg, &mut rng, class) else { continue };
        // Ground truth from the target's own mask, every frame.
        let mut gt = Vec::with_capacity(cfg.frames);
        for t in 0..cfg.frames {
            let mask = shape_mask(&scene.shapes[scene.target], t, cfg.canvas);
            match mask_bbox(&mask, cfg.canvas) {
                Some(b) => gt.push(b),
                None => continue 'attempt,
            }
        }
        // Occlusion windows must fully cover the target and must not
        // touch any other shape.
        let occ_rect = scene.occlusion.map(|(s, _)| occluder_rect(&scene.shapes[scene.target], s));
        if let (Some((s, e)), Some(rect)) = (scene.occlusion, &occ_rect) {
            for t in s..e {
                let mask = shape_mask(&scene.shapes[scene.target], t, cfg.canvas);
                let covered = mask.iter().enumerate().all(|(at, &m)| {
                    if !m {
                        return true;
                    }
                    let (px, py) = ((at % cfg.canvas) as Real + 0.5, (at / cfg.canvas) as Real + 0.5);
                    px >= rect.x1 && px <= rect.x2 && py >= rect.y1 && py <= rect.y2
                });
                if !covered {
                    continue 'attempt;
                }
                for (k, other) in scene.shapes.iter().enumerate() {
                    if k == scene.target {
                        continue;
                    }
                    let om = shape_mask(other, t, cfg.canvas);
                    let touched = om.iter().enumerate().any(|(at, &m)| {
                        if !m {
                            return false;
                        }
                        let (px, py) = ((at % cfg.canvas) as Real + 0.5, (at / cfg.canvas) as Real + 0.5);
                        px >= rect.x1 && px <= rect.x2 && py >= rect.y1 && py <= rect.y2
                    });
                    if touched {
                        continue 'attempt;
                    }
                }
            }
        }
        let frames: Vec<FrameImage> = (0..cfg.frames)
            .map(|t| {
                let occ = match (scene.occlusion, &occ_rect) {
                    (Some((s, e)), Some(rect)) if t >= s && t < e => Some(rect),
                    _ => None,
                };
                render_frame(&scene.shapes, t, cfg.canvas, occ)
            })
            .collect();
        let tokens = vocab.encode(&scene.expression).expect("templates are non-empty");
        return Ok(Video {
            id,
            class,
            shapes: scene.shapes,
            target: scene.target,
            expression: scene.expression,
            tokens,
            frames,
            gt,
            occlusion: scene.occlusion,
        });
    }
    Err(GenError::Unsatisfiable { video: id })
}

// ---- rule-based resolver -----------------------------------------------

/// Recover the target index from the expression and scene geometry using
/// the generator's own semantics. `None` means the expression does not
/// uniquely resolve — generation guarantees this never happens.
pub fn oracle_resolve(video: &Video) -> Option<usize> {
    let words = text::tokenize(&video.expression).ok()?;
    let kind_of = |w: &str| ShapeKind::ALL.into_iter().find(|k| k.word() == w);
    let color_of = |w: &str| Color::ALL.into_iter().find(|c| c.word() == w);
    let side_of = |w: &str| {
        [Side::Left, Side::Right, Side::Top, Side::Bottom]
            .into_iter()
            .find(|s| s.word() == w)
    };
    let kinds: Vec<ShapeKind> = words.iter().filter_map(|w| kind_of(w)).collect();
    let colors: Vec<Color> = words.iter().filter_map(|w| color_of(w)).collect();
    let side = words.iter().find_map(|w| side_of(w));

    if words.contains(&"near".to_string()) {
        // "<shape> near the <color> <shape>": subject = first kind word;
        // if several candidates share it, take the closest to the
        // reference at frame 0.
        let subject = *kinds.first()?;
        let (ref_color, ref_kind) = (*colors.last()?, *kinds.last()?);
        let reference = unique_index(video, |s| s.kind == ref_kind && s.color == ref_color)?;
        let candidates: Vec<usize> = (0..video.shapes.len())
            .filter(|&i| i != reference && video.shapes[i].kind == subject)
            .collect();
        return match candidates.as_slice() {
            [] => None,
            [one] => Some(*one),
            many => {
                let (rx, ry) = video.shapes[reference].track[0];
                many.iter()
                    .copied()
                    .min_by(|&a, &b| {
                        let da = dist2(video.shapes[a].track[0], (rx, ry));
                        let db = dist2(video.shapes[b].track[0], (rx, ry));
                        da.partial_cmp(&db).unwrap()
                    })
            }
        };
    }
    if let Some(side) = side {
        let (color, kind) = (*colors.first()?, *kinds.first()?);
        let candidates: Vec<usize> = (0..video.shapes.len())
            .filter(|&i| video.shapes[i].kind == kind && video.shapes[i].color == color)
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let key = |i: usize| {
            let (x, y) = video.shapes[i].track[0];
            match side {
                Side::Left => x,
                Side::Right => -x,
                Side::Top => y,
                Side::Bottom => -y,
            }
        };
        return candidates
            .iter()
            .copied()
            .min_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap());
    }
    let (color, kind) = (*colors.first()?, *kinds.first()?);
    unique_index(video, |s| s.kind == kind && s.color == color)
}

fn unique_index(video: &Video, pred: impl Fn(&ShapeSpec) -> bool) -> Option<usize> {
    let mut found = None;
    for (i, s) in video.shapes.iter().enumerate() {
        if pred(s) {
            if found.is_some() {
                return None;
            }
            found = Some(i);
        }
    }
    found
}

fn dist2(a: (Real, Real), b: (Real, Real)) -> Real {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    dx * dx + dy * dy
}

// ---- persistence -------------------------------------------------------

/// Annotation side of one saved video, without its frame images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: usize,
    pub ambiguity_class: AmbiguityClass,
    pub expression: String,
    pub tokens: Vec<usize>,
    pub target: usize,
    pub shapes: Vec<ShapeSpec>,
    pub gt_tube: Vec<Box2>,
    pub occlusion: Option<(usize, usize)>,
}

/// Read a saved dataset's config and annotations only, leaving the frame
/// files untouched: enough for evaluation and subset slicing, at a tiny
/// fraction of the cost of [`Dataset::load`].
pub fn load_manifest(dir: &Path) -> Result<(GenConfig, Vec<ManifestEntry>), GenError> {
    let config: GenConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let manifest = fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut entries = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| GenError::Malformed {
            detail: format!("manifest line {}: {e}", lineno + 1),
        })?;
        entries.push(entry);
    }
    Ok((config, entries))
}

impl Dataset {
    /// Write `config.json`, `manifest.jsonl`, `vocab.txt`, and one frame
    /// file per frame under `frames/v{id}/`.
    pub fn save(&self, dir: &Path) -> Result<(), GenError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        self.vocab.save(&dir.join("vocab.txt")).map_err(|e| GenError::Malformed { detail: e.to_string() })?;
        let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
        for v in &self.videos {
            let entry = ManifestEntry {
                video_id: v.id,
                ambiguity_class: v.class,
                expression: v.expression.clone(),
                tokens: v.tokens.clone(),
                target: v.target,
                shapes: v.shapes.clone(),
                gt_tube: v.gt.clone(),
                occlusion: v.occlusion,
            };
            serde_json::to_writer(&mut manifest, &entry)?;
            manifest.write_all(b"\n")?;
        }
        for v in &self.videos {
            let vdir = dir.join("frames").join(format!("v{:04}", v.id));
            fs::create_dir_all(&vdir)?;
            for (t, frame) in v.frames.iter().enumerate() {
                if self.config.png {
                    save_png(&vdir.join(format!("f{t:02}.png")), frame)?;
                } else {
                    save_raw(&vdir.join(format!("f{t:02}.raw")), frame)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, GenError> {
        let (config, entries) = load_manifest(dir)?;
        let vocab = Vocab::load(&dir.join("vocab.txt")).map_err(|e| GenError::Malformed { detail: e.to_string() })?;
        let mut videos = Vec::new();
        for entry in entries {
            let vdir = dir.join("frames").join(format!("v{:04}", entry.video_id));
            let mut frames = Vec::with_capacity(config.frames);
            for t in 0..config.frames {
                let frame = if config.png {
                    load_png(&vdir.join(format!("f{t:02}.png")), config.canvas)?
                } else {
                    load_raw(&vdir.join(format!("f{t:02}.raw")), config.canvas)?
                };
                frames.push(frame);
            }
            videos.push(Video {
                id: entry.video_id,
                class: entry.ambiguity_class,
                shapes: entry.shapes,
                target: entry.target,
                expression: entry.expression,
                tokens: entry.tokens,
                frames,
                gt: entry.gt_tube,
                occlusion: entry.occlusion,
            });
        }
        Ok(Dataset { config, videos, vocab })
    }
}

fn save_raw(path: &Path, frame: &FrameImage) -> Result<(), GenError> {
    let mut bytes = Vec::with_capacity(frame.data().len() * 8);
    for v in frame.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn load_raw(path: &Path, canvas: usize) -> Result<FrameImage, GenError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let want = canvas * canvas * 3 * 8;
    if bytes.len() != want {
        return Err(GenError::Malformed {
            detail: format!("{}: expected {want} bytes, got {}", path.display(), bytes.len()),
        });
    }
    let data: Vec<Real> = bytes
        .chunks_exact(8)
        .map(|c| Real::from_le_bytes(c.try_into().expect("chunk width")))
        .collect();
    FrameImage::new(canvas, data).map_err(|e| GenError::Malformed { detail: e.to_string() })
}

fn save_png(path: &Path, frame: &FrameImage) -> Result<(), GenError> {
    let s = frame.size() as u32;
    let mut img = image::RgbImage::new(s, s);
    for (i, px) in img.pixels_mut().enumerate() {
        let at = i * 3;
        let d = frame.data();
        *px = image::Rgb([
            (d[at] * 255.0).round() as u8,
            (d[at + 1] * 255.0).round() as u8,
            (d[at + 2] * 255.0).round() as u8,
        ]);
    }
    img.save(path)?;
    Ok(())
}

fn load_png(path: &Path, canvas: usize) -> Result<FrameImage, GenError> {
    let img = image::open(path)?.into_rgb8();
    if img.width() as usize != canvas || img.height() as usize != canvas {
        return Err(GenError::Malformed {
            detail: format!("{}: expected {canvas}x{canvas} image", path.display()),
        });
    }
    let data: Vec<Real> = img.pixels().flat_map(|p| p.0.map(|v| v as Real / 255.0)).collect();
    FrameImage::new(canvas, data).map_err(|e| GenError::Malformed { detail: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig { videos: 12, frames: 6, ..GenConfig::default() }
    }

    #[test]
    fn identical_config_generates_identical_datasets() {
        let cfg = small_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn counts_match_config() {
        let cfg = GenConfig { videos: 10, frames: 8, ..GenConfig::default() };
        let d = generate(&cfg).unwrap();
        assert_eq!(d.videos.len(), 10);
        assert_eq!(d.videos.iter().map(|v| v.frames.len()).sum::<usize>(), 80);
        assert!(d.videos.iter().all(|v| v.gt.len() == 8 && !v.expression.is_empty()));
    }

    #[test]
    fn class_schedule_is_proportional_on_every_prefix() {
        let classes = schedule_classes(&[0.25, 0.25, 0.25, 0.25], 40);
        for k in AmbiguityClass::ALL {
            assert_eq!(classes.iter().filter(|&&c| c == k).count(), 10);
        }
        // Mixed proportions stay within 1 of the ideal on all prefixes.
        let mix = [0.1, 0.3, 0.3, 0.3];
        let classes = schedule_classes(&mix, 50);
        for n in 1..=50 {
            for (k, class) in AmbiguityClass::ALL.iter().enumerate() {
                let got = classes[..n].iter().filter(|&&c| c == *class).count() as Real;
                assert!((got - mix[k] * n as Real).abs() <= 1.0, "prefix {n} class {class:?}");
            }
        }
    }

    #[test]
    fn pure_location_mix_always_emits_a_side_word() {
        let cfg = GenConfig { videos: 8, mix: [0.0, 1.0, 0.0, 0.0], ..small_cfg() };
        let d = generate(&cfg).unwrap();
        for v in &d.videos {
            assert_eq!(v.class, AmbiguityClass::LocationOnly);
            assert!(
                ["left", "right", "top", "bottom"].iter().any(|w| v.expression.contains(w)),
                "{}",
                v.expression
            );
            // The ambiguous pair shares kind and color.
            assert_eq!(v.shapes.len(), 2);
            assert_eq!(v.shapes[0].kind, v.shapes[1].kind);
            assert_eq!(v.shapes[0].color, v.shapes[1].color);
        }
    }

    #[test]
    fn location_side_relation_holds_on_every_frame() {
        let cfg = GenConfig { videos: 10, mix: [0.0, 1.0, 0.0, 0.0], ..small_cfg() };
        let d = generate(&cfg).unwrap();
        for v in &d.videos {
            let side = [Side::Left, Side::Right, Side::Top, Side::Bottom]
                .into_iter()
                .find(|s| v.expression.contains(s.word()))
                .unwrap();
            for t in 0..v.frames.len() {
                let (tx, ty) = v.shapes[0].track[t];
                let (ox, oy) = v.shapes[1].track[t];
                match side {
                    Side::Left => assert!(tx < ox),
                    Side::Right => assert!(tx > ox),
                    Side::Top => assert!(ty < oy),
                    Side::Bottom => assert!(ty > oy),
                }
            }
        }
    }

    #[test]
    fn oracle_recovers_every_target() {
        let cfg = GenConfig { videos: 60, mix: [0.25, 0.25, 0.25, 0.25], ..small_cfg() };
        let d = generate(&cfg).unwrap();
        for v in &d.videos {
            assert_eq!(oracle_resolve(v), Some(v.target), "video {}: {}", v.id, v.expression);
        }
    }

    #[test]
    fn expressions_use_only_builtin_vocabulary() {
        let cfg = GenConfig { videos: 24, ..small_cfg() };
        let d = generate(&cfg).unwrap();
        for v in &d.videos {
            assert!(!v.tokens.contains(&text::UNK), "{}", v.expression);
            assert_eq!(d.vocab.encode(&v.expression).unwrap(), v.tokens);
        }
    }

    #[test]
    fn ground_truth_boxes_are_exactly_tight() {
        let cfg = GenConfig { videos: 9, ..small_cfg() };
        let d = generate(&cfg).unwrap();
        for v in &d.videos {
            for t in 0..v.frames.len() {
                let mask = shape_mask(&v.shapes[v.target], t, cfg.canvas);
                let b = &v.gt[t];
                assert_eq!(mask_bbox(&mask, cfg.canvas).unwrap(), *b);
                // Tightness: the border rows/columns contain mask pixels.
                let (x1, y1, x2, y2) = (b.x1 as usize, b.y1 as usize, b.x2 as usize, b.y2 as usize);
                assert!((x1..x2).any(|j| mask[y1 * cfg.canvas + j]), "top row");
                assert!((x1..x2).any(|j| mask[(y2 - 1) * cfg.canvas + j]), "bottom row");
                assert!((y1..y2).any(|i| mask[i * cfg.canvas + x1]), "left column");
                assert!((y1..y2).any(|i| mask[i * cfg.canvas + x2 - 1]), "right column");
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
            }
        }
    }

    #[test]
    fn occlusion_windows_hide_the_target_completely() {
        let cfg = GenConfig { videos: 10, mix: [0.0, 0.0, 0.0, 1.0], frames: 8, ..GenConfig::default() };
        let d = generate(&cfg).unwrap();
        for v in &d.videos {
            let (s, e) = v.occlusion.expect("occlusion class");
            assert!(s >= 1 && e < v.frames.len(), "first and last frames stay clean");
            assert!((1..=3).contains(&(e - s)));
            for t in 0..v.frames.len() {
                let mask = shape_mask(&v.shapes[v.target], t, cfg.canvas);
                let rgb = v.shapes[v.target].color.rgb();
                let visible = mask.iter().enumerate().any(|(at, &m)| {
                    m && v.frames[t].pixel(at / cfg.canvas, at % cfg.canvas) == rgb
                });
                if t >= s && t < e {
                    assert!(!visible, "video {} frame {t} should be hidden", v.id);
                    // Hidden pixels show the occluder.
                    let grayed = mask.iter().enumerate().all(|(at, &m)| {
                        !m || v.frames[t].pixel(at / cfg.canvas, at % cfg.canvas) == [OCCLUDER_GRAY; 3]
                    });
                    assert!(grayed);
                } else {
                    assert!(visible, "video {} frame {t} should be visible", v.id);
                }
            }
        }
    }

    #[test]
    fn distractor_scenes_keep_the_subject_kind_unique() {
        let cfg = GenConfig { videos: 12, mix: [0.0, 0.0, 1.0, 0.0], ..small_cfg() };
        let d = generate(&cfg).unwrap();
        for v in &d.videos {
            assert!(v.expression.contains("near"));
            let subject = v.shapes[v.target].kind;
            let same: usize = v.shapes.iter().filter(|s| s.kind == subject).count();
            assert_eq!(same, 1, "subject kind must be unique: {}", v.expression);
            assert!(v.shapes.len() >= 2, "a second entity is mentioned");
        }
    }

    #[test]
    fn triangle_and_circle_masks_match_plain_geometry() {
        let spec = ShapeSpec {
            kind: ShapeKind::Circle,
            color: Color::Red,
            size: 10.0,
            track: vec![(32.0, 32.0)],
            z: 0,
        };
        let mask = shape_mask(&spec, 0, 64);
        // Pixel centers at distance <= 5 from (32, 32).
        let count = mask.iter().filter(|&&m| m).count();
        let brute = (0..64 * 64)
            .filter(|&at| {
                let (px, py) = ((at % 64) as Real + 0.5, (at / 64) as Real + 0.5);
                (px - 32.0).powi(2) + (py - 32.0).powi(2) <= 25.0
            })
            .count();
        assert_eq!(count, brute);

        let tri = ShapeSpec { kind: ShapeKind::Triangle, size: 12.0, ..spec };
        let mask = shape_mask(&tri, 0, 64);
        let b = mask_bbox(&mask, 64).unwrap();
        // Base spans the full width at the bottom; apex is one pixel.
        assert_eq!(b.x2 - b.x1, 12.0);
        let bottom = (b.x1 as usize..b.x2 as usize)
            .filter(|&j| mask[(b.y2 as usize - 1) * 64 + j])
            .count();
        let top = (b.x1 as usize..b.x2 as usize)
            .filter(|&j| mask[(b.y1 as usize) * 64 + j])
            .count();
        assert!(bottom > top, "triangle narrows toward the apex");
    }

    #[test]
    fn squares_rasterize_to_exact_integer_boxes() {
        let spec = ShapeSpec {
            kind: ShapeKind::Square,
            color: Color::Blue,
            size: 12.0,
            track: vec![(20.0, 30.0)],
            z: 0,
        };
        let mask = shape_mask(&spec, 0, 64);
        let b = mask_bbox(&mask, 64).unwrap();
        assert_eq!(b, Box2::new(14.0, 24.0, 26.0, 36.0));
        assert_eq!(mask.iter().filter(|&&m| m).count(), 144);
    }

    #[test]
    fn unsatisfiable_config_is_an_error() {
        let cfg = GenConfig { canvas: 47, ..small_cfg() };
        assert!(matches!(cfg.validate(), Err(GenError::Config { .. })));
        let cfg = GenConfig { mix: [0.5, 0.5, 0.5, 0.0], ..small_cfg() };
        assert!(matches!(generate(&cfg), Err(GenError::Config { .. })));
    }

    #[test]
    fn raw_dataset_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig { videos: 4, frames: 3, mix: [0.5, 0.25, 0.25, 0.0], ..GenConfig::default() };
        let d = generate(&cfg).unwrap();
        d.save(dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(d.config, loaded.config);
        assert_eq!(d.vocab, loaded.vocab);
        for (a, b) in d.videos.iter().zip(&loaded.videos) {
            assert_eq!(a.shapes, b.shapes, "video {}", a.id);
            assert_eq!(a.gt, b.gt, "video {}", a.id);
            assert_eq!(a.frames, b.frames, "video {}", a.id);
        }
        assert_eq!(d, loaded);
    }

    #[test]
    fn png_mode_saves_viewable_frames() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig { videos: 2, frames: 2, png: true, mix: [0.5, 0.5, 0.0, 0.0], ..GenConfig::default() };
        let d = generate(&cfg).unwrap();
        d.save(dir.path()).unwrap();
        assert!(dir.path().join("frames/v0000/f00.png").exists());
        let loaded = Dataset::load(dir.path()).unwrap();
        // Shape colors are exact 8-bit values, so pixels survive PNG.
        assert_eq!(loaded.videos[0].frames[0], d.videos[0].frames[0]);
    }
}
