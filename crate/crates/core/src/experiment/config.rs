//! Experiment configuration: a sectioned TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cell_problems::BcMode;
use crate::coarse::Scheme;
use crate::error::{Error, Result};
use crate::field::Inclusion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub mesh: MeshSpec,
    pub field: FieldSpec,
    #[serde(default)]
    pub continua: ContinuaSpec,
    #[serde(default)]
    pub cell: CellSpec,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub time: TimeSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_name() -> String {
    "custom".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    #[serde(default = "default_nx")]
    pub nx: usize,
    #[serde(rename = "nH", default = "default_nh")]
    pub n_h: usize,
}

fn default_nx() -> usize {
    200
}

fn default_nh() -> usize {
    10
}

impl Default for MeshSpec {
    fn default() -> Self {
        Self { nx: default_nx(), n_h: default_nh() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "lowercase", deny_unknown_fields)]
pub enum FieldSpec {
    Uniform {
        value: f64,
    },
    /// Horizontal stripes cycling through `values`.
    Layered {
        layers: usize,
        values: Vec<f64>,
    },
    Inclusions {
        background: f64,
        #[serde(default)]
        inclusions: Vec<Inclusion>,
        #[serde(default)]
        lattices: Vec<Lattice>,
    },
    /// Whitespace-separated cell values, bottom row first; relative to the config file.
    File {
        path: PathBuf,
    },
}

/// Square inclusions repeated with period `period` starting at `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lattice {
    pub period: f64,
    pub offset: [f64; 2],
    pub half: f64,
    pub value: f64,
}

/// Continua as coefficient value classes. `values[k]` selects continuum `k + 1` (default:
/// distinct field values ascending); `mixing` lists 1-based class indices per continuum.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuaSpec {
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub mixing: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    #[serde(default)]
    pub bc: BcMode,
    /// Oversampling layers, default `ceil(-2 ln H)`.
    #[serde(default)]
    pub layers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    #[default]
    Eigen,
    Index,
    None,
}

/// Which block's tensors define the splitting plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanReference {
    #[default]
    Central,
    /// Entrywise median over all blocks.
    Median,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default)]
    pub mode: SplitKind,
    /// Eigenvalue gap ratio that places `i₀`.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// 1-based explicit continua for `mode = "index"`.
    #[serde(default)]
    pub explicit: Vec<usize>,
    #[serde(default)]
    pub reference: PlanReference,
}

fn default_threshold() -> f64 {
    10.0
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { mode: SplitKind::Eigen, threshold: default_threshold(), explicit: Vec::new(), reference: PlanReference::Central }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// `1000 exp(-40 |x - (0.5, 0.5)|²) exp(-40 t)`.
    #[default]
    Default,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(rename = "T", default = "default_t")]
    pub t_final: f64,
    #[serde(default)]
    pub source: SourceKind,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default)]
    pub mass_lumping: bool,
}

fn default_tau() -> f64 {
    1e-3
}

fn default_t() -> f64 {
    0.05
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::Implicit, Scheme::Scheme1, Scheme::Scheme2]
}

impl Default for TimeSpec {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            t_final: default_t(),
            source: SourceKind::Default,
            schemes: default_schemes(),
            mass_lumping: false,
        }
    }
}

impl TimeSpec {
    pub fn steps(&self) -> usize {
        (self.t_final / self.tau).round() as usize
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Reuse the cell basis stored in the output directory when the key matches.
    #[serde(default)]
    pub cache: bool,
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub n_h: Option<usize>,
    pub schemes: Vec<Scheme>,
    pub threads: Option<usize>,
    pub full: bool,
    pub out: Option<PathBuf>,
}

/// Parsed configuration with the text it came from (for error locations).
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub text: String,
    /// Directory relative paths are resolved against.
    pub base: PathBuf,
}

const BUILTINS: [(&str, &str); 5] = [
    ("example1", include_str!("builtin/example1.toml")),
    ("example2", include_str!("builtin/example2.toml")),
    ("example3", include_str!("builtin/example3.toml")),
    ("example4", include_str!("builtin/example4.toml")),
    ("uniform", include_str!("builtin/uniform.toml")),
];

pub fn builtin_names() -> Vec<&'static str> {
    BUILTINS.iter().map(|(n, _)| *n).collect()
}

pub fn builtin_text(name: &str) -> Option<&'static str> {
    BUILTINS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Parsed builtin configuration.
pub fn builtin(name: &str) -> Result<ExperimentConfig> {
    let text = builtin_text(name).ok_or_else(|| Error::Config(format!("unknown builtin '{name}'")))?;
    Ok(parse_config(text, Path::new("."))?.config)
}

/// Reads `spec` as a config file, or as a builtin name when no such file exists.
pub fn load_config(spec: &str) -> Result<LoadedConfig> {
    let path = Path::new(spec);
    if !path.exists() {
        if let Some(text) = builtin_text(spec) {
            return parse_config(text, Path::new("."));
        }
        return Err(Error::Config(format!(
            "'{spec}' is neither a config file nor a builtin ({})",
            builtin_names().join(", ")
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &base).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Parses and validates config text; errors name the offending line.
pub fn parse_config(text: &str, base: &Path) -> Result<LoadedConfig> {
    let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let at = e.span().map(|s| format!("line {}: ", line_of_offset(text, s.start))).unwrap_or_default();
        Error::Config(format!("{at}{}", e.message()))
    })?;
    if let FieldSpec::File { path } = &mut config.field {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
    let loaded = LoadedConfig { config, text: text.to_string(), base: base.to_path_buf() };
    loaded.validate(None)?;
    Ok(loaded)
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]` (empty section: top level).
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().trim_matches('[').trim_matches(']').to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(n + 1);
                }
            }
        }
    }
    None
}

impl LoadedConfig {
    /// Applies overrides and re-validates.
    pub fn apply(&mut self, ov: &Overrides) -> Result<()> {
        if let Some(h) = ov.n_h {
            self.config.mesh.n_h = h;
        }
        if !ov.schemes.is_empty() {
            self.config.time.schemes = ov.schemes.clone();
        }
        if ov.threads.is_some() {
            self.config.threads = ov.threads;
        }
        if ov.full {
            self.config.mesh.nx = 400;
        }
        if let Some(out) = &ov.out {
            self.config.output.dir = Some(out.clone());
        }
        self.validate(Some(ov))
    }

    fn validate(&self, ov: Option<&Overrides>) -> Result<()> {
        let c = &self.config;
        let at = |section: &str, key: &str, flag: Option<&str>| -> String {
            if let (Some(flag), Some(_)) = (flag, ov) {
                return format!("flag --{flag}: ");
            }
            key_line(&self.text, section, key).map(|l| format!("line {l}: ")).unwrap_or_else(|| format!("{section}.{key}: "))
        };
        let fail = |loc: String, msg: String| Err(Error::Config(format!("{loc}{msg}")));
        let h_flag = ov.and_then(|o| o.n_h).map(|_| "H");
        let nx_flag = ov.filter(|o| o.full).map(|_| "full");
        if c.mesh.n_h < 2 {
            return fail(at("mesh", "nH", h_flag), format!("nH must be at least 2, got {}", c.mesh.n_h));
        }
        if c.mesh.nx == 0 || c.mesh.nx % c.mesh.n_h != 0 {
            return fail(
                at("mesh", "nx", nx_flag.or(h_flag)),
                format!("nx = {} must be a positive multiple of nH = {}", c.mesh.nx, c.mesh.n_h),
            );
        }
        if !(c.time.tau > 0.0) || !c.time.tau.is_finite() {
            return fail(at("time", "tau", None), format!("tau must be positive, got {}", c.time.tau));
        }
        if !(c.time.t_final >= c.time.tau) {
            return fail(at("time", "T", None), format!("T = {} must be at least tau = {}", c.time.t_final, c.time.tau));
        }
        if c.time.schemes.is_empty() {
            return fail(at("time", "schemes", None), "at least one scheme is required".into());
        }
        if c.time.mass_lumping {
            return fail(at("time", "mass_lumping", None), Error::Unsupported("mass lumping".into()).to_string());
        }
        if !(c.split.threshold > 1.0) {
            return fail(at("split", "threshold", None), format!("threshold must exceed 1, got {}", c.split.threshold));
        }
        if c.split.mode == SplitKind::Index && c.split.explicit.contains(&0) {
            return fail(at("split", "explicit", None), "continuum indices are 1-based".into());
        }
        if let Some(mix) = &c.continua.mixing {
            if mix.iter().flatten().any(|&k| k == 0) {
                return fail(at("continua", "mixing", None), "class indices are 1-based".into());
            }
        }
        if c.threads == Some(0) {
            return fail(at("", "threads", Some("threads")), "threads must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for name in builtin_names() {
            builtin(name).unwrap();
        }
    }

    #[test]
    fn bad_tau_names_its_line() {
        let text = "[field]\ngenerator = \"uniform\"\nvalue = 1.0\n\n[time]\ntau = -1\n";
        let err = parse_config(text, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("line 6"), "{err}");
    }

    #[test]
    fn unknown_key_names_its_line() {
        let text = "[field]\ngenerator = \"uniform\"\nvalue = 1.0\n[mesh]\nnx = 20\nfoo = 3\n";
        let err = parse_config(text, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("line 6") && err.contains("foo"), "{err}");
    }

    #[test]
    fn mass_lumping_is_rejected() {
        let text = "[field]\ngenerator = \"uniform\"\nvalue = 1.0\n[time]\nmass_lumping = true\n";
        let err = parse_config(text, Path::new(".")).unwrap_err().to_string();
        assert!(err.contains("line 5") && err.contains("mass lumping"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let mut c = load_config("example1").unwrap();
        c.apply(&Overrides { n_h: Some(20), full: true, schemes: vec![Scheme::Explicit], ..Default::default() }).unwrap();
        assert_eq!((c.config.mesh.nx, c.config.mesh.n_h), (400, 20));
        assert_eq!(c.config.time.schemes, vec![Scheme::Explicit]);
        let err = c.apply(&Overrides { n_h: Some(7), ..Default::default() }).unwrap_err().to_string();
        assert!(err.contains("--H"), "{err}");
    }
}
