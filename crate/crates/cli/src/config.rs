//! Run configuration: one TOML file with a section per command.

use std::path::{Path, PathBuf};

use phaselab::flatness::{DecomposeOptions, FlatnessOptions};
use phaselab::levelset::LevelOptions;
use phaselab::potential::Kink;
use phaselab::solver::SolveConfig;
use phaselab::stability::{EigenOptions, StabilityRegion};
use phaselab::toda::{RadialCutoff, TodaConfig, DEFAULT_KAPPA};
use phaselab::{BoundaryConditions, Face, GridSpec, ScalarField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub field: Option<FieldSpec>,
    pub solve: Option<SolveSpec>,
    pub verify: Option<VerifySpec>,
    pub index: Option<IndexSpec>,
    pub layers: Option<LayersSpec>,
    pub toda: Option<TodaSpec>,
    pub flatness: Option<FlatnessSpec>,
    /// Directory the config was read from; relative paths resolve here.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(format!("{}: {e}", origin.display())))?;
        cfg.base_dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Canonical serialization used for the digest.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FaceSpec {
    Uniform(Face),
    PerAxis(Vec<[Face; 2]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub spacing: f64,
    #[serde(default = "one")]
    pub epsilon: f64,
    pub faces: FaceSpec,
    pub initial: Initial,
}

/// Initial data u0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Initial {
    Constant {
        value: f64,
    },
    /// sign(n.x - offset).
    Sign {
        normal: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// g((n.x - offset)/eps).
    Kink {
        normal: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// Alternating product of kinks across the given offsets; -1 outside.
    Layers {
        normal: Vec<f64>,
        offsets: Vec<f64>,
    },
    /// g((|x - c| - R)/eps).
    Circle {
        center: Vec<f64>,
        radius: f64,
    },
    /// Uniform noise in [-a, a] inside the ball, +1 outside; uses the seed.
    Noise {
        amplitude: f64,
        center: Vec<f64>,
        radius: f64,
    },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl FieldSpec {
    pub fn build(&self, seed: u64) -> Result<ScalarField, CliError> {
        let d = self.lower.len();
        let grid = GridSpec::with_spacing(&self.lower, &self.upper, self.spacing).map_err(CliError::config_from)?;
        let bc = match &self.faces {
            FaceSpec::Uniform(f) => BoundaryConditions::uniform(d, *f),
            FaceSpec::PerAxis(v) => BoundaryConditions::new(v.clone()).map_err(CliError::config_from)?,
        };
        let eps = self.epsilon;
        let need = |v: &[f64], what: &str| {
            if v.len() == d {
                Ok(())
            } else {
                Err(CliError::config(format!("initial.{what} has {} components, grid has {d}", v.len())))
            }
        };
        let k = Kink::default();
        let values: Vec<f64> = match &self.initial {
            Initial::Constant { value } => vec![*value; grid.len()],
            Initial::Sign { normal, offset } => {
                need(normal, "normal")?;
                (0..grid.len()).map(|i| sign(dot(normal, &grid.point(i)[..d]) - offset)).collect()
            }
            Initial::Kink { normal, offset } => {
                need(normal, "normal")?;
                (0..grid.len()).map(|i| k.value((dot(normal, &grid.point(i)[..d]) - offset) / eps)).collect()
            }
            Initial::Layers { normal, offsets } => {
                need(normal, "normal")?;
                if offsets.is_empty() || offsets.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(CliError::config("initial.offsets must be non-empty and increasing"));
                }
                (0..grid.len())
                    .map(|i| {
                        let t = dot(normal, &grid.point(i)[..d]);
                        let p: f64 = offsets.iter().map(|o| k.value((t - o) / eps)).product();
                        if offsets.len() % 2 == 1 {
                            p
                        } else {
                            -p
                        }
                    })
                    .collect()
            }
            Initial::Circle { center, radius } => {
                need(center, "center")?;
                (0..grid.len())
                    .map(|i| {
                        let p = grid.point(i);
                        let r = (0..d).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>().sqrt();
                        k.value((r - radius) / eps)
                    })
                    .collect()
            }
            Initial::Noise { amplitude, center, radius } => {
                need(center, "center")?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..grid.len())
                    .map(|i| {
                        let p = grid.point(i);
                        let r2: f64 = (0..d).map(|a| (p[a] - center[a]).powi(2)).sum();
                        let x: f64 = rng.gen_range(-1.0..1.0);
                        if r2 < radius * radius {
                            amplitude * x
                        } else {
                            1.0
                        }
                    })
                    .collect()
            }
        };
        ScalarField::new(grid, bc, eps, values).map_err(CliError::config_from)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    /// Relax, then Newton.
    #[default]
    Solve,
    Relax,
    /// Newton directly from the initial data.
    Newton,
    /// Checkpoint the initial data as is, for analysis of non-solutions.
    None,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveSpec {
    #[serde(default)]
    pub method: SolveMethod,
    #[serde(flatten)]
    pub config: SolveConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationSpec {
    #[serde(default)]
    pub level: f64,
    pub radius: f64,
    #[serde(default = "half")]
    pub theta: f64,
    #[serde(default)]
    pub options: LevelOptions,
}

fn half() -> f64 {
    0.5
}

/// Test function eta = (1 - |x - c|^2 / R^2)_+^2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl BumpSpec {
    pub fn eta(&self, field: &ScalarField) -> Vec<f64> {
        let d = field.dim();
        (0..field.values().len())
            .map(|i| {
                let p = field.grid().point(i);
                let r2: f64 = (0..d).map(|a| (p[a] - self.center[a]).powi(2)).sum::<f64>() / (self.radius * self.radius);
                (1.0 - r2).max(0.0).powi(2)
            })
            .collect()
    }
}

/// Sternberg-Zumbrun quantity sampled on the band |u| < band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvatureSpec {
    #[serde(default = "default_band")]
    pub band: f64,
    pub expected: Option<f64>,
    #[serde(default = "default_curv_tol")]
    pub tol: f64,
}

fn default_band() -> f64 {
    0.1
}
fn default_curv_tol() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    /// Defaults to `<out>/field.json`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the grid centre.
    pub center: Option<Vec<f64>>,
    pub radii: Vec<f64>,
    #[serde(default = "default_modica_tol")]
    pub modica_tol: f64,
    pub modica_margin: Option<f64>,
    #[serde(default = "default_allard_delta")]
    pub allard_delta: f64,
    pub expected_plateau: Option<f64>,
    #[serde(default = "default_plateau_tol")]
    pub plateau_tol: f64,
    #[serde(default = "yes")]
    pub modica: bool,
    /// Density profile, monotonicity and plateau.
    #[serde(default = "yes")]
    pub density: bool,
    #[serde(default = "yes")]
    pub spectrum: bool,
    #[serde(default)]
    pub expected_index: usize,
    #[serde(default)]
    pub eigen: EigenOptions,
    pub separation: Option<SeparationSpec>,
    pub sz: Option<BumpSpec>,
    pub curvature: Option<CurvatureSpec>,
}

fn default_modica_tol() -> f64 {
    1e-4
}
fn default_allard_delta() -> f64 {
    0.1
}
fn default_plateau_tol() -> f64 {
    0.02
}
fn yes() -> bool {
    true
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            checkpoint: None,
            center: None,
            radii: Vec::new(),
            modica_tol: default_modica_tol(),
            modica_margin: None,
            allard_delta: default_allard_delta(),
            expected_plateau: None,
            plateau_tol: default_plateau_tol(),
            modica: true,
            density: true,
            spectrum: true,
            expected_index: 0,
            eigen: EigenOptions::default(),
            separation: None,
            sz: None,
            curvature: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExteriorSpec {
    pub center: Vec<f64>,
    pub r_min: f64,
    pub r_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexSpec {
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "whole")]
    pub region: StabilityRegion,
    #[serde(default)]
    pub eigen: EigenOptions,
    pub exterior: Option<ExteriorSpec>,
}

fn whole() -> StabilityRegion {
    StabilityRegion::Whole
}

impl Default for IndexSpec {
    fn default() -> Self {
        Self { checkpoint: None, region: StabilityRegion::Whole, eigen: EigenOptions::default(), exterior: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayersSpec {
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub level: f64,
    #[serde(default)]
    pub options: LevelOptions,
}

fn ppd() -> usize {
    64
}
fn kappa() -> f64 {
    DEFAULT_KAPPA
}
fn two() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TodaProblem {
    /// A general boundary value problem.
    General(TodaConfig),
    /// Symmetric two-layer Liouville data for the given mu, solved from a
    /// perturbed oracle guess.
    Liouville {
        mu: f64,
        r_min: f64,
        r_max: f64,
        #[serde(default = "ppd")]
        points_per_decade: usize,
    },
    /// Exact log ends f_i = b_i + c_i log r, analysed without solving.
    LogEnds {
        r_min: f64,
        r_max: f64,
        #[serde(default = "ppd")]
        points_per_decade: usize,
        #[serde(default = "two")]
        dim: usize,
        #[serde(default = "kappa")]
        kappa: f64,
        ends: Vec<[f64; 2]>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySpec {
    pub cutoffs: Vec<RadialCutoff>,
    #[serde(default = "one")]
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FarinaSpec {
    /// Base dimension m = n - 1.
    pub dim: usize,
    pub q: f64,
    #[serde(default = "one")]
    pub r0: f64,
    #[serde(default)]
    pub pair: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TodaSpec {
    pub problem: TodaProblem,
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
    pub stability: Option<StabilitySpec>,
    pub farina: Option<FarinaSpec>,
}

fn default_gap_tol() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SampleSpec {
    /// Flat hyperplane {x_n = 0} in R^n.
    Plane {
        dim: usize,
        scales: [i32; 2],
        per_octave: usize,
    },
    /// Graph x_n = amplitude R^exponent.
    Power {
        dim: usize,
        scales: [i32; 2],
        per_octave: usize,
        amplitude: f64,
        exponent: f64,
    },
    Catenoid {
        scales: [i32; 2],
        per_octave: usize,
        angles: usize,
    },
    Helicoid {
        scales: [i32; 2],
        per_octave: usize,
        pitch: f64,
        z_max: f64,
        turns_resolution: usize,
    },
    /// CSV of coordinates, one point per row.
    Points {
        path: PathBuf,
    },
    /// Level set of a field checkpoint, centred at `center`.
    Layers {
        checkpoint: Option<PathBuf>,
        #[serde(default)]
        level: f64,
        center: Option<Vec<f64>>,
        #[serde(default)]
        options: LevelOptions,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlatnessSpec {
    pub sample: SampleSpec,
    #[serde(default)]
    pub iteration: FlatnessOptions,
    pub decompose: Option<DecomposeOptions>,
    /// Fit b + c log|x'| to each sheet beyond this radius.
    pub log_fit_radius: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_are_line_anchored() {
        let err = RunConfig::parse("[field]\nlower = [0.0\n", Path::new("bad.toml")).unwrap_err();
        assert_eq!(err.code, 1);
        assert!(err.message.contains("line 2"), "{}", err.message);
        let err = RunConfig::parse("sed = 3\n", Path::new("typo.toml")).unwrap_err();
        assert!(err.message.contains("unknown field"), "{}", err.message);
    }

    #[test]
    fn layered_initial_data() {
        let text = r#"
            [field]
            lower = [-10.0]
            upper = [10.0]
            spacing = 0.5
            faces = "neumann"
            initial = { kind = "layers", normal = [1.0], offsets = [-3.0, 3.0] }
        "#;
        let cfg = RunConfig::parse(text, Path::new("x.toml")).unwrap();
        let u = cfg.field.unwrap().build(0).unwrap();
        let v = u.values();
        assert!(v[0] < -0.99 && v[v.len() - 1] < -0.99 && v[20] > 0.9);
        let text = text.replace("[-3.0, 3.0]", "[0.0]");
        let u = RunConfig::parse(&text, Path::new("x.toml")).unwrap().field.unwrap().build(0).unwrap();
        assert!(u.values()[0] < -0.99 && u.values()[40] > 0.99);
    }

    #[test]
    fn canonical_form_is_stable() {
        let text = "seed = 3\n[toda.problem]\nkind = \"liouville\"\nmu = 1.0\nr_min = 0.1\nr_max = 100.0\n";
        let a = RunConfig::parse(text, Path::new("a.toml")).unwrap();
        let b = RunConfig::parse(&text.replace("mu = 1.0", "mu = 1"), Path::new("b/a.toml"));
        assert!(b.is_err() || b.unwrap().canonical() == a.canonical());
        assert!(a.canonical().contains("\"liouville\""));
    }
}
