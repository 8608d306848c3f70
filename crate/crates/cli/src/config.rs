//! Experiment configuration: a versioned JSON document with one section per command.
//!
//! Every section has defaults, so a config needs only `schema` and `system`. Overrides
//! are applied to the parsed JSON tree before it is validated.

use std::path::{Path, PathBuf};

use rdslab::admissible::WordSet;
use rdslab::cocycle::{AngleMode, Cone};
use rdslab::curves::CurveSpec;
use rdslab::dynamics::{Constants, System, SystemSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Schema tag expected in configuration files.
pub const CONFIG_SCHEMA: &str = "rdslab-config/1";

/// A configuration problem, reported with the offending location.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemRef {
    /// Built-in name: `ab`, `ab-perturbed`, `cat` or `shear`.
    Builtin(String),
    /// Path of a system file, relative to the config file.
    File {
        file: String,
    },
    Inline(SystemSpec),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema: String,
    pub system: SystemRef,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "Constants::desk_default")]
    pub constants: Constants,
    /// Run even when the constants break the inequalities a command relies on.
    #[serde(default)]
    pub override_constants: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Worker threads; results do not depend on this value.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default)]
    pub moments: MomentsSection,
    #[serde(default)]
    pub angle_stats: AngleSection,
    #[serde(default)]
    pub push_curve: PushCurveSection,
    #[serde(default)]
    pub nct_et: NctEtSection,
    #[serde(default)]
    pub seminorm: SeminormSection,
    #[serde(default)]
    pub ac_diagnostic: AcSection,
    #[serde(default)]
    pub good_conv: GoodConvSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub ly_trace: LyTraceSection,
    #[serde(default)]
    pub cesaro: CesaroSection,
    #[serde(default)]
    pub equidistribute: EquidistributeSection,
    #[serde(default)]
    pub orbit: OrbitSection,
    #[serde(default)]
    pub tails: TailsSection,
}

fn default_output_dir() -> String {
    "out".into()
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordMode {
    #[default]
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySection {
    pub n: usize,
    pub x_grid: usize,
    pub v_grid: usize,
    pub cone: Option<Cone>,
    pub words: WordMode,
    pub samples: usize,
    /// Largest word count enumerated in `auto` mode.
    pub cap: usize,
}

impl Default for CertifySection {
    fn default() -> Self {
        CertifySection { n: 1, x_grid: 48, v_grid: 64, cone: None, words: WordMode::Auto, samples: 4096, cap: 1 << 20 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentsSection {
    pub delta: f64,
    pub n_max: usize,
    pub samples: usize,
    pub x: [f64; 2],
    pub v_angle: f64,
    pub past: bool,
}

impl Default for MomentsSection {
    fn default() -> Self {
        MomentsSection { delta: 0.1, n_max: 30, samples: 4096, x: [0.1234, 0.5678], v_angle: 0.3, past: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AngleSection {
    pub n: usize,
    pub samples: usize,
    pub x: [f64; 2],
    pub v_angle: f64,
    pub mode: AngleMode,
}

impl Default for AngleSection {
    fn default() -> Self {
        AngleSection { n: 25, samples: 100_000, x: [0.1234, 0.5678], v_angle: 0.3, mode: AngleMode::StableVsV }
    }
}

/// A curve: the shape fields (`kind` plus its parameters) sit beside the others.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurveConfig {
    #[serde(flatten)]
    pub spec: CurveSpec,
    pub length: f64,
    pub start: [f64; 2],
    #[serde(default = "default_h_max")]
    pub h_max: f64,
}

fn default_h_max() -> f64 {
    rdslab::curves::DEFAULT_H_MAX
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig {
            spec: CurveSpec::Segment { angle: std::f64::consts::FRAC_PI_4 },
            length: 0.05,
            start: [0.3, 0.4],
            h_max: 5e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PushCurveSection {
    pub curve: CurveConfig,
    /// Explicit word; when absent a word of `word_length` letters is sampled.
    pub word: Option<Vec<usize>>,
    pub word_length: usize,
}

impl Default for PushCurveSection {
    fn default() -> Self {
        PushCurveSection { curve: CurveConfig::default(), word: None, word_length: 10 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NctEtSection {
    pub curve: CurveConfig,
    /// Multiple of `constants.p0`.
    pub word_length: usize,
    pub samples: usize,
}

impl Default for NctEtSection {
    fn default() -> Self {
        NctEtSection { curve: CurveConfig::default(), word_length: 40, samples: 64 }
    }
}

/// A point-cloud measure.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    Uniform {
        count: usize,
    },
    Jittered {
        side: usize,
    },
    Dirac {
        x: [f64; 2],
    },
    Circle {
        y0: f64,
        count: usize,
    },
    /// Cell masses from an `rdsgrid v1` file, one point per cell center.
    Grid {
        path: String,
    },
    /// A uniform curve atom projected at the given sampling density.
    Curve {
        curve: CurveConfig,
        samples_per_unit_length: f64,
    },
}

impl Default for MeasureSpec {
    fn default() -> Self {
        MeasureSpec::Uniform { count: 100_000 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeminormSection {
    pub measure: MeasureSpec,
    pub rhos: Vec<f64>,
    /// `ρ / grid cell`, at least 4.
    pub refine: f64,
}

impl Default for SeminormSection {
    fn default() -> Self {
        SeminormSection { measure: MeasureSpec::default(), rhos: vec![0.05, 0.02], refine: 4.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcSection {
    pub measures: Vec<MeasureSpec>,
    pub rho0: f64,
    pub levels: usize,
    pub refine: f64,
}

impl Default for AcSection {
    fn default() -> Self {
        AcSection { measures: vec![MeasureSpec::default()], rho0: 0.08, levels: 4, refine: 4.0 }
    }
}

/// Curve-supported initial measure.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// One uniform atom of unit mass.
    Curve { curve: CurveConfig },
    /// `side²` parallel segments of total mass 1.
    Lattice { side: usize, length: f64, angle: f64, h_max: f64 },
}

impl Default for InitialSpec {
    fn default() -> Self {
        InitialSpec::Curve { curve: CurveConfig::default() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoodConvSection {
    pub initial: InitialSpec,
    pub n: usize,
    pub cut: f64,
    pub words: WordSet,
    pub nc_grid: usize,
}

impl Default for GoodConvSection {
    fn default() -> Self {
        GoodConvSection { initial: InitialSpec::default(), n: 10, cut: 0.05, words: WordSet::default(), nc_grid: 16 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub initial: InitialSpec,
    pub m: usize,
    pub d: usize,
    pub budget: usize,
    pub words: WordSet,
    pub nc_grid: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            initial: InitialSpec::default(),
            m: 4,
            d: 0,
            budget: 32,
            words: WordSet::default(),
            nc_grid: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceInitial {
    Admissible { initial: InitialSpec },
    Dirac { x: [f64; 2], replicas: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyTraceSection {
    pub initial: TraceInitial,
    pub m: usize,
    pub d: usize,
    pub budget: usize,
    pub words: WordSet,
    pub nc_grid: usize,
    pub refine: f64,
}

impl Default for LyTraceSection {
    fn default() -> Self {
        LyTraceSection {
            initial: TraceInitial::Admissible { initial: InitialSpec::default() },
            m: 2,
            d: 0,
            budget: 32,
            words: WordSet::default(),
            nc_grid: 16,
            refine: 4.0,
        }
    }
}

/// Point-cloud input of a Cesàro run.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CloudSpec {
    Uniform { count: usize },
    Jittered { side: usize },
    Dirac { x: [f64; 2], replicas: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CesaroSection {
    pub initial: CloudSpec,
    pub n: usize,
    pub grid: usize,
    /// Sub-sampling of the stationarity residual of the final average.
    pub residual_sub: usize,
}

impl Default for CesaroSection {
    fn default() -> Self {
        CesaroSection { initial: CloudSpec::Jittered { side: 256 }, n: 16, grid: 64, residual_sub: 2 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    #[default]
    Lebesgue,
    /// An `rdsgrid v1` file, for instance a Cesàro estimate.
    Grid { path: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EquidistributeSection {
    pub x: [f64; 2],
    pub checkpoints: Vec<usize>,
    pub grid: usize,
    pub replicas: usize,
    pub reference: ReferenceSpec,
}

impl Default for EquidistributeSection {
    fn default() -> Self {
        EquidistributeSection {
            x: [0.1234567, 0.7654321],
            checkpoints: vec![1, 8, 64, 512, 4096],
            grid: 64,
            replicas: 64,
            reference: ReferenceSpec::Lebesgue,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitSection {
    pub x: [f64; 2],
    pub depth: usize,
    pub epsilon: f64,
}

impl Default for OrbitSection {
    fn default() -> Self {
        OrbitSection { x: [0.1234567, 0.7654321], depth: 20, epsilon: 0.05 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailsSection {
    pub n_min: u32,
    pub n_max: u32,
    pub etas: Vec<f64>,
    pub a_values: Vec<f64>,
    /// Exponent of the weighted upper tail; the smallest admissible value when absent.
    pub b: Option<f64>,
}

impl Default for TailsSection {
    fn default() -> Self {
        TailsSection { n_min: 5, n_max: 60, etas: vec![0.05, 0.1, 0.2, 0.3], a_values: vec![0.1, 1.0, 3.0], b: None }
    }
}

/// Parse a JSON override value; bare words that are not JSON become strings.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Set `path` (dot-separated) in `tree`, creating intermediate objects.
pub fn apply_override(tree: &mut Value, path: &str, raw: &str) -> Result<(), ConfigError> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError(format!("override path \"{path}\" has an empty component")));
    }
    let mut node = tree;
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| ConfigError(format!("override {path}: \"{}\" is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), override_value(raw));
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("non-empty path")
}

/// Sort object keys recursively so that serialization is independent of input order.
pub fn canonical(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            Value::Object(keys.into_iter().map(|k| (k.clone(), canonical(&map[k]))).collect())
        }
        Value::Array(items) => Value::Array(items.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

/// A validated configuration with its canonical tree and location.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: Config,
    pub tree: Value,
    pub base_dir: PathBuf,
}

/// Parse `text`, apply `overrides` (`path=value`) and validate.
pub fn load_str(text: &str, overrides: &[(String, String)], base_dir: &Path) -> Result<LoadedConfig, ConfigError> {
    let mut tree: Value =
        serde_json::from_str(text).map_err(|e| ConfigError(format!("line {} column {}: {e}", e.line(), e.column())))?;
    if !tree.is_object() {
        return Err(ConfigError("config must be a JSON object".into()));
    }
    for (path, raw) in overrides {
        apply_override(&mut tree, path, raw)?;
    }
    let tree = canonical(&tree);
    let config: Config = serde_path_to_error::deserialize(tree.clone()).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<root>".to_string() } else { path };
        ConfigError(format!("field {field}: {}", e.inner()))
    })?;
    if config.schema != CONFIG_SCHEMA {
        return Err(ConfigError(format!("field schema: expected \"{CONFIG_SCHEMA}\", found \"{}\"", config.schema)));
    }
    Ok(LoadedConfig { config, tree, base_dir: base_dir.to_path_buf() })
}

pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    load_str(&text, overrides, &base)
}

impl LoadedConfig {
    pub fn resolve(&self, relative: &str) -> PathBuf {
        let p = Path::new(relative);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn system(&self) -> Result<System, ConfigError> {
        let built = match &self.config.system {
            SystemRef::Builtin(name) => System::builtin(name),
            SystemRef::File { file } => {
                let path = self.resolve(file);
                let text =
                    std::fs::read_to_string(&path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
                System::from_json(&text)
            }
            SystemRef::Inline(spec) => System::from_spec(spec),
        };
        built.map_err(|e| ConfigError(format!("field system: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"schema": "rdslab-config/1", "system": "ab"}"#
    }

    #[test]
    fn defaults_fill_every_section() {
        let c = load_str(minimal(), &[], Path::new(".")).unwrap();
        assert_eq!(c.config.certify.n, 1);
        assert_eq!(c.config.tails.n_max, 60);
        assert!(c.system().is_ok());
    }

    #[test]
    fn overrides_use_dotted_paths() {
        let ov = vec![("certify.n".to_string(), "7".to_string()), ("orbit.x".to_string(), "[0.5, 0.25]".to_string())];
        let c = load_str(minimal(), &ov, Path::new(".")).unwrap();
        assert_eq!(c.config.certify.n, 7);
        assert_eq!(c.config.orbit.x, [0.5, 0.25]);
        let ov = vec![("system".to_string(), "cat".to_string())];
        assert!(
            matches!(load_str(minimal(), &ov, Path::new(".")).unwrap().config.system, SystemRef::Builtin(ref s) if s == "cat")
        );
    }

    #[test]
    fn missing_field_names_its_path() {
        let e = load_str(r#"{"schema": "rdslab-config/1"}"#, &[], Path::new(".")).unwrap_err();
        assert!(e.0.contains("system"), "{e}");
        let e = load_str(r#"{"schema": "rdslab-config/1", "system": "ab", "nct_et": {"curve": {"kind": "segment", "angle": 0.1, "start": [0, 0]}}}"#, &[], Path::new(".")).unwrap_err();
        assert!(e.0.contains("nct_et.curve") && e.0.contains("length"), "{e}");
    }

    #[test]
    fn unknown_field_is_rejected() {
        let e =
            load_str(r#"{"schema": "rdslab-config/1", "system": "ab", "orbit": {"dpeth": 3}}"#, &[], Path::new("."))
                .unwrap_err();
        assert!(e.0.contains("orbit") && e.0.contains("dpeth"), "{e}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e =
            load_str("{\n  \"schema\": \"rdslab-config/1\",\n  \"system\" \"ab\"\n}", &[], Path::new(".")).unwrap_err();
        assert!(e.0.starts_with("line 3"), "{e}");
    }

    #[test]
    fn canonical_form_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"b": 1, "a": {"y": 2, "x": [3, {"q": 1, "p": 2}]}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a": {"x": [3, {"p": 2, "q": 1}], "y": 2}, "b": 1}"#).unwrap();
        assert_eq!(serde_json::to_string(&canonical(&a)).unwrap(), serde_json::to_string(&canonical(&b)).unwrap());
    }
}
