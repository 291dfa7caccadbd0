//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors. Model keys are unprefixed; synthetic-data keys carry a
//! `synth.` prefix (see [`SYNTH_KEYS`]). A run reads its data from `data = DIR`
//! (a directory holding `train/`, `gallery/` and `probe/` splits) or, when that
//! key is absent, generates it from the `synth.*` keys.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Hyperparams;
use crate::synth::SynthSpec;

/// `(key, meaning)` of every model key, in echo order.
pub const MODEL_KEYS: &[(&str, &str)] = &[
    ("frames", "sampled frames per video, one per chunk (N)"),
    ("heads", "spatial attention heads (K), 1..=16"),
    ("grid_height", "feature grid rows"),
    ("grid_width", "feature grid columns"),
    ("feature_dim", "backbone feature dimension (D)"),
    ("hidden_dim", "spatial head hidden width (d)"),
    ("embed_dim", "embedding dimension (E)"),
    ("classes", "training identities; always replaced by the count found in the data"),
    ("lambda_div", "weight of the receptive-field penalty"),
    ("penalty", "Q | Qprime | none"),
    ("spatial_mode", "attention | uniform"),
    ("enhancement", "true | false; false skips the enhancement stage"),
    ("sigma", "positional decay length of the enhancement stage, > 0"),
    ("temporal_mode", "attention | average | max"),
    ("temporal_norm", "softmax | linear"),
    ("loss", "oim | softmax"),
    ("temperature", "lookup-table softmax temperature"),
    ("oim_momentum", "lookup-table update momentum, [0, 1)"),
    ("embedding_norm", "l2 (fixed)"),
    ("lr", "initial learning rate"),
    ("lr_final", "learning rate after the drop"),
    ("lr_drop_epoch", "0-based epoch of the drop, or `half`"),
    ("sgd_momentum", "SGD momentum, 0 for plain SGD"),
    ("warmup_epochs", "leading epochs with average temporal pooling and frozen temporal heads"),
    ("seed", "seed of initialisation, sampling and shuffling"),
    ("epochs", "training epochs"),
    ("batch_size", "videos per SGD step"),
];

/// `(key, meaning)` of every synthetic-data key, without the `synth.` prefix.
pub const SYNTH_KEYS: &[(&str, &str)] = &[
    ("seed", "generation seed"),
    ("identities", "training identities"),
    ("test_identities", "extra identities used only for evaluation; 0 evaluates on fresh videos of the training identities"),
    ("train_videos", "training videos per identity, alternating cameras"),
    ("frames_min", "shortest video"),
    ("frames_max", "longest video"),
    ("grid_height", "feature grid rows"),
    ("grid_width", "feature grid columns"),
    ("feature_dim", "feature dimension"),
    ("parts", "planted parts, one per band of grid rows"),
    ("part_width", "cells per part"),
    ("prototype", "norm of the part prototype shared by all identities"),
    ("signal", "norm of an identity's part signature"),
    ("background", "norm of the per-video scene vector"),
    ("clutter", "norm of occluder vectors"),
    ("distractors", "size of the shared occluder pool"),
    ("noise", "per-cell noise norm"),
    ("jitter", "per-frame probability of a one-column part shift"),
    ("p_occ", "per-frame probability that a part is occluded"),
];

pub const DEFAULT_SYNTH_SEED: u64 = 1;

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub hyper: Hyperparams,
    pub synth: SynthSpec,
    pub synth_seed: u64,
    pub data: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hyper: Hyperparams::default(),
            synth: SynthSpec::default(),
            synth_seed: DEFAULT_SYNTH_SEED,
            data: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("expected {what}, got {value:?}")))
}

fn keyword<T: FromStr<Err = String>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|reason: String| Error::config(key, reason))
}

fn set_model(h: &mut Hyperparams, key: &str, v: &str) -> Result<bool> {
    const UINT: &str = "an unsigned integer";
    const REAL: &str = "a number";
    match key {
        "frames" => h.frames = parse(key, v, UINT)?,
        "heads" => h.heads = parse(key, v, UINT)?,
        "grid_height" => h.grid_height = parse(key, v, UINT)?,
        "grid_width" => h.grid_width = parse(key, v, UINT)?,
        "feature_dim" => h.feature_dim = parse(key, v, UINT)?,
        "hidden_dim" => h.hidden_dim = parse(key, v, UINT)?,
        "embed_dim" => h.embed_dim = parse(key, v, UINT)?,
        "classes" => h.classes = parse(key, v, UINT)?,
        "lambda_div" => h.lambda_div = parse(key, v, REAL)?,
        "penalty" => h.penalty = keyword(key, v)?,
        "spatial_mode" => h.spatial_mode = keyword(key, v)?,
        "enhancement" => h.enhancement = parse(key, v, "true or false")?,
        "sigma" => h.sigma = parse(key, v, REAL)?,
        "temporal_mode" => h.temporal_mode = keyword(key, v)?,
        "temporal_norm" => h.temporal_norm = keyword(key, v)?,
        "loss" => h.loss = keyword(key, v)?,
        "temperature" => h.temperature = parse(key, v, REAL)?,
        "oim_momentum" => h.oim_momentum = parse(key, v, REAL)?,
        "embedding_norm" => {
            if !v.eq_ignore_ascii_case("l2") {
                return Err(Error::config(key, "only l2 is supported"));
            }
        }
        "lr" => h.lr = parse(key, v, REAL)?,
        "lr_final" => h.lr_final = parse(key, v, REAL)?,
        "lr_drop_epoch" => {
            h.lr_drop_epoch = if v == "half" {
                None
            } else {
                Some(parse(key, v, "an unsigned integer or `half`")?)
            }
        }
        "sgd_momentum" => h.sgd_momentum = parse(key, v, REAL)?,
        "warmup_epochs" => h.warmup_epochs = parse(key, v, UINT)?,
        "seed" => h.seed = parse(key, v, UINT)?,
        "epochs" => h.epochs = parse(key, v, UINT)?,
        "batch_size" => h.batch_size = parse(key, v, UINT)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_synth(s: &mut SynthSpec, seed: &mut u64, key: &str, v: &str, prefix: &str) -> Result<bool> {
    let full = format!("{prefix}{key}");
    let k = full.as_str();
    const UINT: &str = "an unsigned integer";
    const REAL: &str = "a number";
    match key {
        "seed" => *seed = parse(k, v, UINT)?,
        "identities" => s.identities = parse(k, v, UINT)?,
        "test_identities" => s.test_identities = parse(k, v, UINT)?,
        "train_videos" => s.train_videos = parse(k, v, UINT)?,
        "frames_min" => s.frames_min = parse(k, v, UINT)?,
        "frames_max" => s.frames_max = parse(k, v, UINT)?,
        "grid_height" => s.grid_height = parse(k, v, UINT)?,
        "grid_width" => s.grid_width = parse(k, v, UINT)?,
        "feature_dim" => s.feature_dim = parse(k, v, UINT)?,
        "parts" => s.parts = parse(k, v, UINT)?,
        "part_width" => s.part_width = parse(k, v, UINT)?,
        "prototype" => s.prototype = parse(k, v, REAL)?,
        "signal" => s.signal = parse(k, v, REAL)?,
        "background" => s.background = parse(k, v, REAL)?,
        "clutter" => s.clutter = parse(k, v, REAL)?,
        "distractors" => s.distractors = parse(k, v, UINT)?,
        "noise" => s.noise = parse(k, v, REAL)?,
        "jitter" => s.jitter = parse(k, v, REAL)?,
        "p_occ" => s.p_occ = parse(k, v, REAL)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// `(key, value)` pairs of a config file, rejecting repeats.
fn entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(&format!("line {}", i + 1), format!("expected `key = value`, got {line:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        if out.iter().any(|(k, _)| k == key) {
            return Err(Error::config(key, "given more than once"));
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

fn prefixed(err: Error, prefix: &str) -> Error {
    match err {
        Error::Config { key, reason } if !key.starts_with(prefix) => Error::Config {
            key: format!("{prefix}{key}"),
            reason,
        },
        e => e,
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (key, value) in entries(text)? {
        let known = if key == "data" {
            cfg.data = Some(PathBuf::from(&value));
            true
        } else if let Some(rest) = key.strip_prefix("synth.") {
            set_synth(&mut cfg.synth, &mut cfg.synth_seed, rest, &value, "synth.")?
        } else {
            set_model(&mut cfg.hyper, &key, &value)?
        };
        if !known {
            return Err(Error::config(&key, "unknown key"));
        }
    }
    cfg.hyper.validate()?;
    cfg.synth.validate().map_err(|e| prefixed(e, "synth."))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Standalone synthetic-data spec: the `synth.*` keys without the prefix.
pub fn parse_synth_spec(text: &str) -> Result<(SynthSpec, u64)> {
    let mut spec = SynthSpec::default();
    let mut seed = DEFAULT_SYNTH_SEED;
    for (key, value) in entries(text)? {
        if !set_synth(&mut spec, &mut seed, &key, &value, "")? {
            return Err(Error::config(&key, "unknown key"));
        }
    }
    spec.validate()?;
    Ok((spec, seed))
}

fn pair(key: &str, value: impl Display) -> (String, String) {
    (key.to_string(), value.to_string())
}

/// Effective model settings, every key of [`MODEL_KEYS`] in order.
pub fn model_entries(h: &Hyperparams) -> Vec<(String, String)> {
    vec![
        pair("frames", h.frames),
        pair("heads", h.heads),
        pair("grid_height", h.grid_height),
        pair("grid_width", h.grid_width),
        pair("feature_dim", h.feature_dim),
        pair("hidden_dim", h.hidden_dim),
        pair("embed_dim", h.embed_dim),
        pair("classes", h.classes),
        pair("lambda_div", h.lambda_div),
        pair("penalty", h.penalty),
        pair("spatial_mode", h.spatial_mode),
        pair("enhancement", h.enhancement),
        pair("sigma", h.sigma),
        pair("temporal_mode", h.temporal_mode),
        pair("temporal_norm", h.temporal_norm),
        pair("loss", h.loss),
        pair("temperature", h.temperature),
        pair("oim_momentum", h.oim_momentum),
        pair("embedding_norm", "l2"),
        pair("lr", h.lr),
        pair("lr_final", h.lr_final),
        pair("lr_drop_epoch", h.drop_epoch()),
        pair("sgd_momentum", h.sgd_momentum),
        pair("warmup_epochs", h.warmup_epochs),
        pair("seed", h.seed),
        pair("epochs", h.epochs),
        pair("batch_size", h.batch_size),
    ]
}

pub fn synth_entries(s: &SynthSpec, seed: u64) -> Vec<(String, String)> {
    vec![
        pair("seed", seed),
        pair("identities", s.identities),
        pair("test_identities", s.test_identities),
        pair("train_videos", s.train_videos),
        pair("frames_min", s.frames_min),
        pair("frames_max", s.frames_max),
        pair("grid_height", s.grid_height),
        pair("grid_width", s.grid_width),
        pair("feature_dim", s.feature_dim),
        pair("parts", s.parts),
        pair("part_width", s.part_width),
        pair("prototype", s.prototype),
        pair("signal", s.signal),
        pair("background", s.background),
        pair("clutter", s.clutter),
        pair("distractors", s.distractors),
        pair("noise", s.noise),
        pair("jitter", s.jitter),
        pair("p_occ", s.p_occ),
    ]
}

/// Resolved settings of a run; parsing them back yields the same run.
pub fn echo(cfg: &RunConfig) -> Vec<(String, String)> {
    let mut out = model_entries(&cfg.hyper);
    match &cfg.data {
        Some(dir) => out.push(pair("data", dir.display())),
        None => out.extend(
            synth_entries(&cfg.synth, cfg.synth_seed)
                .into_iter()
                .map(|(k, v)| (format!("synth.{k}"), v)),
        ),
    }
    out
}

/// `# key = value` lines.
pub fn render_header(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("# {k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SpatialMode;
    use crate::spatial::PenaltyKind;
    use crate::temporal::TemporalMode;

    fn key_of(err: Error) -> String {
        match err {
            Error::Config { key, .. } => key,
            e => panic!("not a config error: {e:?}"),
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.hyper.frames, 6);
        assert_eq!(cfg.hyper.heads, 6);
        assert_eq!(cfg.hyper.lambda_div, 0.1);
        assert_eq!(cfg.hyper.lr, 0.1);
        assert_eq!(cfg.hyper.lr_final, 0.01);
    }

    #[test]
    fn values_comments_and_keywords() {
        let cfg = parse_config(
            "# comment\n\npenalty = Qprime\nheads=1\n spatial_mode = uniform \ntemporal_mode = AVERAGE\n\
             lr_drop_epoch = 7\nenhancement = false\nsynth.p_occ = 0.4\nsynth.seed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.hyper.penalty, PenaltyKind::QPrime);
        assert_eq!(cfg.hyper.heads, 1);
        assert_eq!(cfg.hyper.spatial_mode, SpatialMode::Uniform);
        assert_eq!(cfg.hyper.temporal_mode, TemporalMode::Average);
        assert_eq!(cfg.hyper.lr_drop_epoch, Some(7));
        assert!(!cfg.hyper.enhancement);
        assert_eq!(cfg.synth.p_occ, 0.4);
        assert_eq!(cfg.synth_seed, 9);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(parse_config("sigma = -1").unwrap_err()), "sigma");
        assert_eq!(key_of(parse_config("sigma = abc").unwrap_err()), "sigma");
        assert_eq!(key_of(parse_config("heads = 17").unwrap_err()), "heads");
        assert_eq!(key_of(parse_config("heads = -2").unwrap_err()), "heads");
        assert_eq!(key_of(parse_config("penalty = L1").unwrap_err()), "penalty");
        assert_eq!(key_of(parse_config("colour = red").unwrap_err()), "colour");
        assert_eq!(key_of(parse_config("synth.colour = 1").unwrap_err()), "synth.colour");
        assert_eq!(key_of(parse_config("synth.p_occ = 2").unwrap_err()), "synth.p_occ");
        assert_eq!(key_of(parse_config("epochs = 3\nepochs = 4").unwrap_err()), "epochs");
        assert_eq!(key_of(parse_config("embedding_norm = l1").unwrap_err()), "embedding_norm");
        assert_eq!(key_of(parse_config("just words").unwrap_err()), "line 1");
    }

    #[test]
    fn echo_parses_back_to_the_same_run() {
        let cfg = parse_config("penalty = none\nlambda_div = 0.25\nsynth.noise = 0\nsigma = 1.5").unwrap();
        let header = render_header(&echo(&cfg));
        assert!(header.contains("# frames = 6\n"));
        assert!(header.contains("# embedding_norm = l2\n"));
        assert!(header.contains("# lr_drop_epoch = 15\n"));
        let mut back = parse_config(&header.replace("# ", "")).unwrap();
        back.hyper.lr_drop_epoch = None;
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_documented_key_is_echoed() {
        let cfg = RunConfig::default();
        let echoed: Vec<String> = echo(&cfg).into_iter().map(|(k, _)| k).collect();
        for (k, _) in MODEL_KEYS {
            assert!(echoed.iter().any(|e| e == k), "{k}");
        }
        for (k, _) in SYNTH_KEYS {
            assert!(echoed.contains(&format!("synth.{k}")), "{k}");
        }
        assert_eq!(MODEL_KEYS.len(), model_entries(&cfg.hyper).len());
    }

    #[test]
    fn standalone_synth_spec() {
        let (spec, seed) = parse_synth_spec("identities = 5\nseed = 3\np_occ = 0.4").unwrap();
        assert_eq!((spec.identities, seed, spec.p_occ), (5, 3, 0.4));
        assert_eq!(key_of(parse_synth_spec("heads = 2").unwrap_err()), "heads");
        assert_eq!(key_of(parse_synth_spec("identities = 1").unwrap_err()), "identities");
    }
}
