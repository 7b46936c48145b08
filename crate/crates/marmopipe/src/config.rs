//! Run configuration: line-oriented `key=value`, `#` starts a comment.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Validation collects every problem instead of stopping at the first.

use std::fmt;
use std::path::{Path, PathBuf};

use marmopipe_core::flatfield::{DEFAULT_LOWER_CUT, DEFAULT_UPPER_CUT};
use marmopipe_core::injsite::{DEFAULT_SIGMA_UM, DEFAULT_T_HIGH, DEFAULT_T_RAW};
use marmopipe_core::mapping::Interpolation;
use marmopipe_core::stitch::DEFAULT_MARGIN;
use marmopipe_core::tracerseg::{
    DEFAULT_CLOSE_RADIUS, DEFAULT_HIGH_THRESHOLD, DEFAULT_LOW_THRESHOLD, DEFAULT_SALIENCY_THRESHOLD,
    DEFAULT_SUBTRACTION_FACTOR,
};

use crate::formats;

/// One validation problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// Offending keys; more than one for cross-key constraints.
    pub keys: Vec<String>,
    pub value: String,
    pub constraint: String,
}

impl ConfigError {
    fn new(key: &str, value: &str, constraint: impl Into<String>) -> Self {
        ConfigError {
            keys: vec![key.to_string()],
            value: value.to_string(),
            constraint: constraint.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: value {:?}: {}", self.keys.join(","), self.value, self.constraint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellBackend {
    Hessian,
    Unet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TracerBackend {
    Threshold,
    Unet,
}

/// Every setting of a pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub tiles: PathBuf,
    pub out: PathBuf,
    pub atlas: PathBuf,
    /// `None` maps with the identity on the atlas grid.
    pub field: Option<PathBuf>,
    pub brain: String,
    pub injection_id: String,
    pub threads: usize,
    pub seed: u64,

    pub flatfield: bool,
    pub ff_lower: f64,
    pub ff_upper: f64,
    pub margin: usize,

    pub low_voxel_um: f64,
    pub t_raw: f64,
    pub sigma_um: f64,
    pub roi_pad_px: usize,
    pub cell_backend: CellBackend,
    pub cell_model: Option<PathBuf>,
    pub cell_sigmas: Vec<f64>,
    /// Hessian response cutoff for the hessian backend.
    pub cell_threshold: f64,
    /// Saliency cutoff for the unet backend.
    pub t_high: f64,

    pub tracer_backend: TracerBackend,
    pub tracer_model: Option<PathBuf>,
    pub factor: f64,
    pub hi: f64,
    pub lo: f64,
    pub close: usize,
    pub theta: f64,
    pub input_extent: usize,

    pub interp: Interpolation,
    pub normalize: bool,
}

/// Default text of every key, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("tiles", ""),
    ("out", ""),
    ("atlas", ""),
    ("field", ""),
    ("brain", "brain"),
    ("injection_id", "injection"),
    ("threads", "1"),
    ("seed", "0"),
    ("flatfield", "true"),
    ("ff_lower", "2"),
    ("ff_upper", "2500"),
    ("margin", "50"),
    ("low_voxel_um", "50"),
    ("t_raw", "4500"),
    ("sigma_um", "150"),
    ("roi_pad_px", "10"),
    ("cell_backend", "hessian"),
    ("cell_model", ""),
    ("cell_sigmas", "2 3 4"),
    ("cell_threshold", "20"),
    ("t_high", "0.5"),
    ("tracer_backend", "threshold"),
    ("tracer_model", ""),
    ("factor", "1.1"),
    ("hi", "300"),
    ("lo", "100"),
    ("close", "3"),
    ("theta", "0.5"),
    ("input_extent", "108"),
    ("interp", "linear"),
    ("normalize", "false"),
];

// keep the table and the core defaults in step
const _: () = {
    assert!(DEFAULT_MARGIN == 50);
    assert!(DEFAULT_CLOSE_RADIUS == 3);
};

/// Closest known key within edit distance 3.
pub fn suggest_key(key: &str) -> Option<&'static str> {
    KEYS.iter()
        .map(|(k, _)| (*k, strsim::levenshtein(key, k)))
        .filter(|&(_, d)| d <= 3)
        .min_by_key(|&(_, d)| d)
        .map(|(k, _)| k)
}

/// Raw `key=value` pairs in file order, or line-level errors.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, Vec<ConfigError>> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => out.push((k.trim().to_string(), v.trim().to_string())),
            None => errors.push(ConfigError::new(
                &format!("line {}", i + 1),
                line,
                "expected key=value",
            )),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(errors)
    }
}

struct Reader<'a> {
    pairs: &'a [(String, String)],
    base: &'a Path,
    errors: Vec<ConfigError>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> String {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .or_else(|| KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| d.to_string()))
            .unwrap_or_default()
    }

    fn num<T: std::str::FromStr + Default>(&mut self, key: &str, constraint: &str, ok: impl Fn(&T) -> bool) -> T {
        let v = self.raw(key);
        match v.parse::<T>() {
            Ok(x) if ok(&x) => x,
            _ => {
                self.errors.push(ConfigError::new(key, &v, constraint));
                T::default()
            }
        }
    }

    fn boolean(&mut self, key: &str) -> bool {
        let v = self.raw(key);
        match v.as_str() {
            "true" | "yes" | "on" | "1" => true,
            "false" | "no" | "off" | "0" => false,
            _ => {
                self.errors.push(ConfigError::new(key, &v, "must be true or false"));
                false
            }
        }
    }

    fn path(&mut self, key: &str, required: bool) -> Option<PathBuf> {
        let v = self.raw(key);
        if v.is_empty() {
            if required {
                self.errors.push(ConfigError::new(key, &v, "is required"));
            }
            return None;
        }
        let p = Path::new(&v);
        Some(if p.is_absolute() { p.to_path_buf() } else { self.base.join(p) })
    }

    fn choice<'c>(&mut self, key: &str, options: &[&'c str]) -> &'c str {
        let v = self.raw(key);
        match options.iter().find(|o| **o == v) {
            Some(o) => o,
            None => {
                self.errors
                    .push(ConfigError::new(key, &v, format!("must be one of {}", options.join("|"))));
                options[0]
            }
        }
    }
}

impl PipelineConfig {
    /// Parse and validate, resolving relative paths against `base`.
    /// Referenced inputs must exist.
    pub fn from_text(text: &str, base: &Path) -> Result<Self, Vec<ConfigError>> {
        let pairs = parse_pairs(text)?;
        let mut errors = Vec::new();
        for (k, v) in &pairs {
            if !KEYS.iter().any(|(known, _)| known == k) {
                let hint = match suggest_key(k) {
                    Some(s) => format!("unknown key; did you mean `{s}`?"),
                    None => "unknown key".to_string(),
                };
                errors.push(ConfigError::new(k, v, hint));
            }
        }
        let mut r = Reader {
            pairs: &pairs,
            base,
            errors,
        };
        let pos = |x: &f64| *x > 0.0 && x.is_finite();
        let nonneg = |x: &f64| *x >= 0.0 && x.is_finite();

        let tiles = r.path("tiles", true).unwrap_or_default();
        let out = r.path("out", true).unwrap_or_default();
        let atlas = r.path("atlas", true).unwrap_or_default();
        let field = r.path("field", false);
        let brain = r.raw("brain");
        let injection_id = r.raw("injection_id");
        for (k, v) in [("brain", &brain), ("injection_id", &injection_id)] {
            if v.is_empty() || v.contains(char::is_whitespace) {
                r.errors.push(ConfigError::new(k, v, "must be a nonempty word without spaces"));
            }
        }
        let threads = r.num("threads", "must be an integer >= 1", |&n: &usize| n >= 1);
        let seed = r.num("seed", "must be an unsigned integer", |_: &u64| true);

        let flatfield = r.boolean("flatfield");
        let ff_lower = r.num("ff_lower", "must be >= 0", nonneg);
        let ff_upper = r.num("ff_upper", "must be > 0", pos);
        let margin = r.num("margin", "must be an integer >= 0", |_: &usize| true);

        let low_voxel_um = r.num("low_voxel_um", "must be > 0", pos);
        let t_raw = r.num("t_raw", "must be >= 0", nonneg);
        let sigma_um = r.num("sigma_um", "must be > 0", pos);
        let roi_pad_px = r.num("roi_pad_px", "must be an integer >= 0", |_: &usize| true);
        let cell_backend = match r.choice("cell_backend", &["hessian", "unet"]) {
            "unet" => CellBackend::Unet,
            _ => CellBackend::Hessian,
        };
        let cell_model = r.path("cell_model", false);
        let sigmas_raw = r.raw("cell_sigmas");
        let cell_sigmas: Vec<f64> = sigmas_raw
            .split_whitespace()
            .map(|s| s.parse::<f64>().ok().filter(|x| pos(x)))
            .collect::<Option<_>>()
            .filter(|v: &Vec<f64>| !v.is_empty())
            .unwrap_or_else(|| {
                r.errors.push(ConfigError::new(
                    "cell_sigmas",
                    &sigmas_raw,
                    "must be a space-separated list of scales > 0",
                ));
                Vec::new()
            });
        let cell_threshold = r.num("cell_threshold", "must be >= 0", nonneg);
        let t_high = r.num("t_high", "must lie in [0, 1)", |x: &f64| (0.0..1.0).contains(x));

        let tracer_backend = match r.choice("tracer_backend", &["threshold", "unet"]) {
            "unet" => TracerBackend::Unet,
            _ => TracerBackend::Threshold,
        };
        let tracer_model = r.path("tracer_model", false);
        let factor = r.num("factor", "must be >= 0", nonneg);
        let hi = r.num("hi", "must be >= 0", nonneg);
        let lo = r.num("lo", "must be >= 0", nonneg);
        let close = r.num("close", "must be an integer >= 0", |_: &usize| true);
        let theta = r.num("theta", "must lie in [0, 1)", |x: &f64| (0.0..1.0).contains(x));
        let input_extent = r.num("input_extent", "must be an integer >= 1", |&n: &usize| n >= 1);
        let interp = match r.choice("interp", &["linear", "nearest"]) {
            "nearest" => Interpolation::Nearest,
            _ => Interpolation::Linear,
        };
        let normalize = r.boolean("normalize");

        let mut errors = r.errors;
        if !(hi > lo) {
            errors.push(ConfigError {
                keys: vec!["hi".into(), "lo".into()],
                value: format!("hi={hi} lo={lo}"),
                constraint: "hi must be greater than lo".into(),
            });
        }
        if !(ff_upper > ff_lower) {
            errors.push(ConfigError {
                keys: vec!["ff_upper".into(), "ff_lower".into()],
                value: format!("ff_upper={ff_upper} ff_lower={ff_lower}"),
                constraint: "ff_upper must be greater than ff_lower".into(),
            });
        }
        for (key, backend_unet, model) in [
            ("cell_model", cell_backend == CellBackend::Unet, &cell_model),
            ("tracer_model", tracer_backend == TracerBackend::Unet, &tracer_model),
        ] {
            if !backend_unet {
                continue;
            }
            match model {
                None => errors.push(ConfigError::new(key, "", "is required when the backend is unet")),
                Some(m) => {
                    if let Some(missing) = formats::model_files(m).into_iter().find(|f| !f.is_file()) {
                        errors.push(ConfigError::new(
                            key,
                            &m.display().to_string(),
                            format!("model file {} does not exist", missing.display()),
                        ));
                    }
                }
            }
        }
        if !tiles.as_os_str().is_empty() && !tiles.is_dir() {
            errors.push(ConfigError::new("tiles", &tiles.display().to_string(), "must be an existing directory"));
        }
        if !atlas.as_os_str().is_empty() {
            if let Some(missing) = formats::atlas_files(&atlas).into_iter().find(|f| !f.is_file()) {
                errors.push(ConfigError::new(
                    "atlas",
                    &atlas.display().to_string(),
                    format!("atlas file {} does not exist", missing.display()),
                ));
            }
        }
        if let Some(f) = &field {
            if let Some(missing) = formats::field_files(f).into_iter().find(|p| !p.is_file()) {
                errors.push(ConfigError::new(
                    "field",
                    &f.display().to_string(),
                    format!("field file {} does not exist", missing.display()),
                ));
            }
        }
        if !errors.is_empty() {
            return Err(errors);
        }
        Ok(PipelineConfig {
            tiles,
            out,
            atlas,
            field,
            brain,
            injection_id,
            threads,
            seed,
            flatfield,
            ff_lower,
            ff_upper,
            margin,
            low_voxel_um,
            t_raw,
            sigma_um,
            roi_pad_px,
            cell_backend,
            cell_model,
            cell_sigmas,
            cell_threshold,
            t_high,
            tracer_backend,
            tracer_model,
            factor,
            hi,
            lo,
            close,
            theta,
            input_extent,
            interp,
            normalize,
        })
    }

    /// Read and validate a config file. An unreadable file is reported as an
    /// error on the pseudo-key `file`.
    pub fn load(path: &Path) -> Result<Self, Vec<ConfigError>> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            vec![ConfigError::new("file", &path.display().to_string(), format!("unreadable: {e}"))]
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_text(&text, base)
    }
}

/// Core defaults the table above mirrors.
pub fn core_defaults() -> [(&'static str, f64); 9] {
    [
        ("ff_lower", DEFAULT_LOWER_CUT),
        ("ff_upper", DEFAULT_UPPER_CUT),
        ("t_raw", DEFAULT_T_RAW),
        ("sigma_um", DEFAULT_SIGMA_UM),
        ("t_high", DEFAULT_T_HIGH),
        ("factor", DEFAULT_SUBTRACTION_FACTOR),
        ("hi", DEFAULT_HIGH_THRESHOLD),
        ("lo", DEFAULT_LOW_THRESHOLD),
        ("theta", DEFAULT_SALIENCY_THRESHOLD),
    ]
}
