//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, keys are dotted
//! (`model.heads = 4`). Grid files use the same syntax with several
//! alternatives per key, separated by `|` (or by `,` for keys whose values
//! are scalars).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::GenConfig;
use crate::train::TrainConfig;

/// Every setting an experiment needs. `nms` is the optional post-processing
/// threshold applied at evaluation time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub nms: Option<f64>,
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}`: expected a boolean, got `{value}`"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// `off`/`none` disables an optional number.
fn parse_opt<V: FromStr>(key: &str, value: &str) -> Result<Option<V>> {
    match value.to_ascii_lowercase().as_str() {
        "off" | "none" | "" => Ok(None),
        _ => parse(key, value).map(Some),
    }
}

/// Keys whose values are comma-separated lists.
const LIST_KEYS: &[&str] = &["eval.iou_thresholds", "eval.iou", "eval.length_edges"];

impl ExperimentConfig {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key {
            "data.seed" => d.seed = parse(key, v)?,
            "data.num_train" => d.num_train = parse(key, v)?,
            "data.num_val" => d.num_val = parse(key, v)?,
            "data.min_sec" => d.min_sec = parse(key, v)?,
            "data.max_sec" => d.max_sec = parse(key, v)?,
            "data.fps" => d.fps = parse(key, v)?,
            "data.stride" => d.stride = parse(key, v)?,
            "data.channels" => d.channels = parse(key, v)?,
            "data.num_classes" => d.num_classes = parse(key, v)?,
            "data.instances_per_minute" => d.instances_per_minute = parse(key, v)?,
            "data.class_signature_dim" => d.class_signature_dim = parse(key, v)?,
            "data.noise_std" => d.noise_std = parse(key, v)?,
            "data.min_gap_sec" => d.min_gap_sec = parse(key, v)?,
            "data.min_instance_sec" => d.min_instance_sec = parse(key, v)?,
            "data.max_instance_frac" => d.max_instance_frac = parse(key, v)?,
            "data.envelope_floor" => d.envelope_floor = parse(key, v)?,
            "data.signal_scale" => d.signal_scale = parse(key, v)?,

            "model.dim" | "pyramid.model_dim" => m.pyramid.model_dim = parse(key, v)?,
            "pyramid.num_levels" => m.pyramid.num_levels = parse(key, v)?,
            "pyramid.kernel_size" => m.pyramid.kernel_size = parse(key, v)?,
            "model.enc_layers" => m.attention.num_encoder_layers = parse(key, v)?,
            "model.dec_layers" => m.attention.num_decoder_layers = parse(key, v)?,
            "model.heads" => m.attention.num_heads = parse(key, v)?,
            "model.points" => m.attention.points_per_level = parse(key, v)?,
            "model.ablate_enc_self" => m.attention.encoder_self_attn = !parse_bool(key, v)?,
            "model.ablate_dec_self" => m.attention.decoder_self_attn = !parse_bool(key, v)?,
            "model.ablate_dec_cross" => m.attention.decoder_cross_attn = !parse_bool(key, v)?,
            "model.ffn_dim" => m.ffn_dim = parse(key, v)?,
            "model.seed" => m.seed = parse(key, v)?,

            "coord.expression" => m.coord.expression = parse(key, v)?,
            "coord.mode" => m.coord.mode = parse(key, v)?,
            "coord.base_scale" => m.coord.base_scale = parse(key, v)?,

            "select.mode" => m.select.mode = parse(key, v)?,
            "select.t_sector" => m.select.t_sector = parse(key, v)?,
            "select.k" => m.select.k = parse(key, v)?,
            "select.fixed_n" => m.select.fixed_n = parse(key, v)?,

            "loss.w_cls" => t.loss.w_cls = parse(key, v)?,
            "loss.w_diou" => t.loss.w_diou = parse(key, v)?,
            "loss.w_logwidth" => t.loss.w_logwidth = parse(key, v)?,
            "loss.focal_gamma" => t.loss.focal_gamma = parse(key, v)?,
            "loss.focal_alpha" => t.loss.focal_alpha = parse(key, v)?,
            "loss.aux" => t.loss.aux_enabled = parse_bool(key, v)?,
            "loss.encoder" => t.loss.encoder_enabled = parse_bool(key, v)?,

            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.grad_clip_norm" => t.grad_clip_norm = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.eval_every" => t.eval_every = parse(key, v)?,
            "train.checkpoint_dir" => t.checkpoint_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.lr_drop_epoch" => t.lr_drop_epoch = parse(key, v)?,
            "train.lr_drop_factor" => t.lr_drop_factor = parse(key, v)?,

            "eval.iou_thresholds" | "eval.iou" => t.eval.iou_thresholds = parse_list(key, v)?,
            "eval.top_n_cap" => t.eval.top_n_cap = parse_opt(key, v)?,
            "eval.length_edges" => {
                t.eval.length_edges = match v.to_ascii_lowercase().as_str() {
                    "off" | "none" | "quintiles" => None,
                    _ => {
                        let e = parse_list(key, v)?;
                        let arr: [f64; 4] = e.try_into().map_err(|_| {
                            Error::Config(format!("`{key}` needs exactly four edges"))
                        })?;
                        Some(arr)
                    }
                }
            }
            "eval.nms" => self.nms = parse_opt(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (key, value) in parse_lines(text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if let Some(t) = self.nms {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!(
                    "eval.nms must lie in (0, 1], got {t}"
                )));
            }
        }
        Ok(())
    }

    /// Canonical text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let (d, m, t) = (&self.data, &self.model, &self.train);
        let a = &m.attention;
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data.seed", d.seed.to_string());
        kv("data.num_train", d.num_train.to_string());
        kv("data.num_val", d.num_val.to_string());
        kv("data.min_sec", d.min_sec.to_string());
        kv("data.max_sec", d.max_sec.to_string());
        kv("data.fps", d.fps.to_string());
        kv("data.stride", d.stride.to_string());
        kv("data.channels", d.channels.to_string());
        kv("data.num_classes", d.num_classes.to_string());
        kv(
            "data.instances_per_minute",
            d.instances_per_minute.to_string(),
        );
        kv(
            "data.class_signature_dim",
            d.class_signature_dim.to_string(),
        );
        kv("data.noise_std", d.noise_std.to_string());
        kv("data.min_gap_sec", d.min_gap_sec.to_string());
        kv("data.min_instance_sec", d.min_instance_sec.to_string());
        kv("data.max_instance_frac", d.max_instance_frac.to_string());
        kv("data.envelope_floor", d.envelope_floor.to_string());
        kv("data.signal_scale", d.signal_scale.to_string());
        kv("model.dim", m.pyramid.model_dim.to_string());
        kv("pyramid.num_levels", m.pyramid.num_levels.to_string());
        kv("pyramid.kernel_size", m.pyramid.kernel_size.to_string());
        kv("model.enc_layers", a.num_encoder_layers.to_string());
        kv("model.dec_layers", a.num_decoder_layers.to_string());
        kv("model.heads", a.num_heads.to_string());
        kv("model.points", a.points_per_level.to_string());
        kv("model.ablate_enc_self", (!a.encoder_self_attn).to_string());
        kv("model.ablate_dec_self", (!a.decoder_self_attn).to_string());
        kv(
            "model.ablate_dec_cross",
            (!a.decoder_cross_attn).to_string(),
        );
        kv("model.ffn_dim", m.ffn_dim.to_string());
        kv("model.seed", m.seed.to_string());
        kv("coord.expression", m.coord.expression.as_str().to_string());
        kv("coord.mode", m.coord.mode.as_str().to_string());
        kv("coord.base_scale", m.coord.base_scale.to_string());
        kv("select.mode", m.select.mode.as_str().to_string());
        kv("select.t_sector", m.select.t_sector.to_string());
        kv("select.k", m.select.k.to_string());
        kv("select.fixed_n", m.select.fixed_n.to_string());
        kv("loss.w_cls", t.loss.w_cls.to_string());
        kv("loss.w_diou", t.loss.w_diou.to_string());
        kv("loss.w_logwidth", t.loss.w_logwidth.to_string());
        kv("loss.focal_gamma", t.loss.focal_gamma.to_string());
        kv("loss.focal_alpha", t.loss.focal_alpha.to_string());
        kv("loss.aux", t.loss.aux_enabled.to_string());
        kv("loss.encoder", t.loss.encoder_enabled.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.grad_clip_norm", t.grad_clip_norm.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        kv(
            "train.checkpoint_dir",
            t.checkpoint_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("train.lr_drop_epoch", t.lr_drop_epoch.to_string());
        kv("train.lr_drop_factor", t.lr_drop_factor.to_string());
        kv("eval.iou_thresholds", join(&t.eval.iou_thresholds));
        kv(
            "eval.top_n_cap",
            t.eval.top_n_cap.map_or("off".into(), |n| n.to_string()),
        );
        kv(
            "eval.length_edges",
            t.eval.length_edges.map_or("quintiles".into(), |e| join(&e)),
        );
        kv("eval.nms", self.nms.map_or("off".into(), |n| n.to_string()));
        s
    }
}

/// Splits text into `(key, value)` pairs, rejecting malformed lines.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                n + 1
            ))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// One axis of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses a grid file into axes, checking every value against a default
/// config so unknown keys and unparsable values fail before any run.
pub fn parse_grid(text: &str) -> Result<Vec<GridAxis>> {
    let mut axes: Vec<GridAxis> = Vec::new();
    for (key, value) in parse_lines(text)? {
        let sep = if value.contains('|') || LIST_KEYS.contains(&key.as_str()) {
            '|'
        } else {
            ','
        };
        let values: Vec<String> = value
            .split(sep)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid key `{key}` has no values")));
        }
        if axes.iter().any(|a| a.key == key) {
            return Err(Error::Config(format!("grid key `{key}` appears twice")));
        }
        let mut probe = ExperimentConfig::default();
        for v in &values {
            probe.set(&key, v)?;
        }
        axes.push(GridAxis { key, values });
    }
    Ok(axes)
}

/// Cross product of the axes in row-major order (last axis fastest).
pub fn grid_cells(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                axis.values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

/// The default ablation grid: coordinate expression x query selection x NMS.
pub const DEFAULT_GRID: &str = "\
coord.expression = time_aligned, normalized
select.mode = adaptive, fixed
eval.nms = off, 0.5
";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coord::CoordExpression;
    use crate::select::SelectMode;

    #[test]
    fn keys_reach_their_fields() {
        let cfg = ExperimentConfig::from_text(
            "# comment\n\
             model.ablate_dec_self = true\n\
             coord.expression = normalized  # trailing\n\
             select.mode = fixed\n\
             train.epochs = 3\n\
             eval.iou = 0.3,0.5,0.7\n\
             eval.nms = 0.4\n\
             data.min_sec = 12.5\n",
        )
        .unwrap();
        assert!(!cfg.model.attention.decoder_self_attn);
        assert_eq!(cfg.model.coord.expression, CoordExpression::Normalized);
        assert_eq!(cfg.model.select.mode, SelectMode::Fixed);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.eval.iou_thresholds, vec![0.3, 0.5, 0.7]);
        assert_eq!(cfg.nms, Some(0.4));
        assert_eq!(cfg.data.min_sec, 12.5);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("eval.length_edges", "1,2,3,4").unwrap();
        cfg.set("train.checkpoint_dir", "/tmp/x").unwrap();
        cfg.set("eval.top_n_cap", "50").unwrap();
        cfg.set("model.ablate_enc_self", "on").unwrap();
        assert_eq!(ExperimentConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(
            ExperimentConfig::from_text(&ExperimentConfig::default().to_text()).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn errors_are_config_errors() {
        for bad in [
            "model.nope = 1",
            "model.heads = four",
            "garbage",
            "= 3",
            "loss.aux = maybe",
            "eval.length_edges = 1,2",
        ] {
            assert!(
                matches!(ExperimentConfig::from_text(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
        let mut cfg = ExperimentConfig::default();
        cfg.set("train.epochs", "0").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.set("data.min_sec", "2000").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn grids_expand_to_cross_products() {
        let axes = parse_grid(DEFAULT_GRID).unwrap();
        let cells = grid_cells(&axes);
        assert_eq!(cells.len(), 8);
        assert_eq!(
            cells[0][0],
            ("coord.expression".to_string(), "time_aligned".to_string())
        );
        assert_eq!(cells[1][2], ("eval.nms".to_string(), "0.5".to_string()));
        let one = grid_cells(&parse_grid("select.k = 4").unwrap());
        assert_eq!(one.len(), 1);
        assert_eq!(grid_cells(&[]).len(), 1);
        let lists = parse_grid("eval.iou = 0.3,0.5 | 0.7").unwrap();
        assert_eq!(lists[0].values, vec!["0.3,0.5", "0.7"]);
        assert!(matches!(
            parse_grid("model.unknown = 1,2"),
            Err(Error::Config(_))
        ));
        assert!(parse_grid("select.k = 1,x").is_err());
        assert!(parse_grid("select.k = 1\nselect.k = 2").is_err());
    }
}
