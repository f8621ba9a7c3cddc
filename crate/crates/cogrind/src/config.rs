//! Plain-text run settings: one `key=value` per line, `#` comments,
//! every key documented in [`KEYS`]. Unknown keys fail loudly with the
//! full list of valid keys, duplicates are rejected, and the resolved
//! settings render back to canonical text so manifests capture exactly
//! what a run used.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::head::Anchor;
use crate::model::{Mode, ModelConfig};
use crate::synth::GenConfig;
use crate::tensor::Real;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("config line {line}: unknown key {key:?}; valid keys: {valid}")]
    UnknownKey { line: usize, key: String, valid: String },
    #[error("config line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
}

/// Every accepted key with its documentation line.
pub const KEYS: &[(&str, &str)] = &[
    ("videos", "number of videos to generate (default 100)"),
    ("frames", "frames per video (default 8)"),
    ("canvas", "square image size in pixels, also the model input size (default 64)"),
    ("mix", "comma list of four scene-class proportions: unique_attribute,location_only,distractor,occlusion (default 0.25,0.25,0.25,0.25)"),
    ("jitter", "per-frame positional jitter stddev in pixels (default 0.5)"),
    ("png", "write frames as PNG instead of raw float tensors: true|false (default false)"),
    ("mode", "ablation mode: baseline|s-att|sl-att|cg-baseline|cg-s-att|cg-sl-att (default sl-att)"),
    ("widths", "comma list of visual tower channel widths; last entry is the feature width (default 12,24,48,48)"),
    ("embed", "word embedding width (default 16)"),
    ("hidden", "per-direction LSTM state width (default 16)"),
    ("anchors", "comma list of square anchor sizes in normalized units (default 0.15,0.3,0.5)"),
    ("epochs", "training epochs (default 30)"),
    ("batch", "videos per batch (default 16)"),
    ("lr", "initial learning rate for polynomial decay (default 0.0001)"),
    ("lambda_rank", "weight of the subject margin loss (default 100)"),
    ("lambda_ce", "weight of the location cross-entropy loss (default 1)"),
    ("val_fraction", "trailing fraction of videos held out for validation (default 0.2)"),
    ("flip", "horizontal-flip augmentation with left/right token swap: true|false (default true)"),
    ("pair_gap", "maximum frame gap when sampling training pairs (default 8)"),
    ("pairs", "frame pairs sampled per video per epoch (default 1)"),
    ("topk", "candidates kept per frame at inference (default 5)"),
    ("window", "temporal stabilization window, odd (default 5)"),
];

/// Typed settings with defaults; subcommands read the fields they need.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub videos: usize,
    pub frames: usize,
    pub canvas: usize,
    pub mix: [Real; 4],
    pub jitter: Real,
    pub png: bool,
    pub mode: Mode,
    pub widths: Vec<usize>,
    pub embed: usize,
    pub hidden: usize,
    pub anchors: Vec<Real>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: Real,
    pub lambda_rank: Real,
    pub lambda_ce: Real,
    pub val_fraction: Real,
    pub flip: bool,
    pub pair_gap: usize,
    pub pairs: usize,
    pub topk: usize,
    pub window: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            videos: 100,
            frames: 8,
            canvas: 64,
            mix: [0.25, 0.25, 0.25, 0.25],
            jitter: 0.5,
            png: false,
            mode: Mode::SlAtt,
            widths: vec![12, 24, 48, 48],
            embed: 16,
            hidden: 16,
            anchors: vec![0.15, 0.3, 0.5],
            epochs: 30,
            batch: 16,
            lr: 1e-4,
            lambda_rank: 100.0,
            lambda_ce: 1.0,
            val_fraction: 0.2,
            flip: true,
            pair_gap: 8,
            pairs: 1,
            topk: 5,
            window: 5,
        }
    }
}

fn valid_keys() -> String {
    KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
}

fn parse_num<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| ConfigError::Parse {
        line,
        detail: format!("{key}: cannot parse {value:?}: {e}"),
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::Parse { line, detail: format!("{key}: expected true or false, got {value:?}") }),
    }
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|v| parse_num(line, key, v.trim())).collect()
}

impl Settings {
    pub fn parse(text: &str) -> Result<Settings, ConfigError> {
        let mut s = Settings::default();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse { line: lineno, detail: format!("expected key=value, got {line:?}") });
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(ConfigError::UnknownKey { line: lineno, key: key.to_string(), valid: valid_keys() });
            }
            if let Some(first) = seen.insert(key.to_string(), lineno) {
                return Err(ConfigError::Duplicate { line: lineno, key: format!("{key} (first set on line {first})") });
            }
            match key {
                "videos" => s.videos = parse_num(lineno, key, value)?,
                "frames" => s.frames = parse_num(lineno, key, value)?,
                "canvas" => s.canvas = parse_num(lineno, key, value)?,
                "mix" => {
                    let v: Vec<Real> = parse_list(lineno, key, value)?;
                    s.mix = v.try_into().map_err(|v: Vec<Real>| ConfigError::Parse {
                        line: lineno,
                        detail: format!("mix: expected 4 proportions, got {}", v.len()),
                    })?;
                }
                "jitter" => s.jitter = parse_num(lineno, key, value)?,
                "png" => s.png = parse_bool(lineno, key, value)?,
                "mode" => {
                    s.mode = Mode::from_str(value)
                        .map_err(|e| ConfigError::Parse { line: lineno, detail: e.to_string() })?
                }
                "widths" => s.widths = parse_list(lineno, key, value)?,
                "embed" => s.embed = parse_num(lineno, key, value)?,
                "hidden" => s.hidden = parse_num(lineno, key, value)?,
                "anchors" => s.anchors = parse_list(lineno, key, value)?,
                "epochs" => s.epochs = parse_num(lineno, key, value)?,
                "batch" => s.batch = parse_num(lineno, key, value)?,
                "lr" => s.lr = parse_num(lineno, key, value)?,
                "lambda_rank" => s.lambda_rank = parse_num(lineno, key, value)?,
                "lambda_ce" => s.lambda_ce = parse_num(lineno, key, value)?,
                "val_fraction" => s.val_fraction = parse_num(lineno, key, value)?,
                "flip" => s.flip = parse_bool(lineno, key, value)?,
                "pair_gap" => s.pair_gap = parse_num(lineno, key, value)?,
                "pairs" => s.pairs = parse_num(lineno, key, value)?,
                "topk" => s.topk = parse_num(lineno, key, value)?,
                "window" => s.window = parse_num(lineno, key, value)?,
                _ => unreachable!("key membership checked above"),
            }
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Settings, ConfigError> {
        Settings::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical `key=value` map of every setting, for manifests.
    pub fn resolved_map(&self) -> BTreeMap<String, String> {
        let list = |v: &[Real]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let ints = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        BTreeMap::from([
            ("videos".into(), self.videos.to_string()),
            ("frames".into(), self.frames.to_string()),
            ("canvas".into(), self.canvas.to_string()),
            ("mix".into(), list(&self.mix)),
            ("jitter".into(), self.jitter.to_string()),
            ("png".into(), self.png.to_string()),
            ("mode".into(), self.mode.name().to_string()),
            ("widths".into(), ints(&self.widths)),
            ("embed".into(), self.embed.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("anchors".into(), list(&self.anchors)),
            ("epochs".into(), self.epochs.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("lambda_rank".into(), self.lambda_rank.to_string()),
            ("lambda_ce".into(), self.lambda_ce.to_string()),
            ("val_fraction".into(), self.val_fraction.to_string()),
            ("flip".into(), self.flip.to_string()),
            ("pair_gap".into(), self.pair_gap.to_string()),
            ("pairs".into(), self.pairs.to_string()),
            ("topk".into(), self.topk.to_string()),
            ("window".into(), self.window.to_string()),
        ])
    }

    /// Render as a parseable config file (keys sorted).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.resolved_map() {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn gen_config(&self, seed: u64) -> GenConfig {
        GenConfig {
            videos: self.videos,
            frames: self.frames,
            canvas: self.canvas,
            mix: self.mix,
            jitter: self.jitter,
            seed,
            png: self.png,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            image_size: self.canvas,
            widths: self.widths.clone(),
            embed: self.embed,
            hidden: self.hidden,
            vocab: crate::text::Vocab::builtin().len(),
            anchors: self.anchors.iter().map(|&s| Anchor { w: s, h: s }).collect(),
        }
    }
}

/// Human-readable key reference for help output.
pub fn describe_keys() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    KEYS.iter()
        .map(|(k, doc)| format!("  {k:<width$}  {doc}"))
        .collect::<Vec<_>>()
        .join("\n")
}
