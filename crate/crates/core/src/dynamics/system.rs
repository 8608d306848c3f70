//! System definition files and built-in example systems.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Diffeo, DrivingMeasure, Mode};
use crate::error::{Error, Result};
use crate::torus::TorusPoint;

/// Schema tag expected in system definition files.
pub const SYSTEM_SCHEMA: &str = "rdslab-system/1";

/// One diffeomorphism in a system file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffeoSpec {
    pub name: String,
    pub matrix: [[i64; 2]; 2],
    #[serde(default)]
    pub modes: Vec<ModeSpec>,
    /// Whether the map belongs to the nearly volume-preserving subfamily.
    #[serde(default = "yes")]
    pub nearly_conservative: bool,
}

fn yes() -> bool {
    true
}

pub type ModeSpec = Mode;

/// One atom of the driving measure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub index: usize,
    pub prob: f64,
}

/// Serialized form of a [`System`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub schema: String,
    pub diffeos: Vec<DiffeoSpec>,
    pub measure: Vec<AtomSpec>,
}

/// A diffeo table with a driving measure on it.
#[derive(Clone, Debug)]
pub struct System {
    pub table: Vec<Arc<Diffeo>>,
    pub measure: DrivingMeasure,
    /// Membership of each table entry in the nearly volume-preserving subfamily.
    pub nearly_conservative: Vec<bool>,
}

impl System {
    pub fn new(table: Vec<Diffeo>, measure: DrivingMeasure) -> Result<Self> {
        if let Some(&(i, _)) = measure.atoms().iter().find(|(i, _)| *i >= table.len()) {
            return Err(Error::InvalidInput(format!("measure atom index {i} out of range")));
        }
        let n = table.len();
        Ok(System { table: table.into_iter().map(Arc::new).collect(), measure, nearly_conservative: vec![true; n] })
    }

    pub fn from_spec(spec: &SystemSpec) -> Result<Self> {
        if spec.schema != SYSTEM_SCHEMA {
            return Err(Error::InvalidInput(format!(
                "schema: expected \"{SYSTEM_SCHEMA}\", found \"{}\"",
                spec.schema
            )));
        }
        let table = spec
            .diffeos
            .iter()
            .map(|d| Diffeo::new(d.name.clone(), d.matrix, d.modes.clone()))
            .collect::<Result<Vec<_>>>()?;
        let measure = DrivingMeasure::new(spec.measure.iter().map(|a| (a.index, a.prob)).collect())?;
        let mut sys = System::new(table, measure)?;
        sys.nearly_conservative = spec.diffeos.iter().map(|d| d.nearly_conservative).collect();
        Ok(sys)
    }

    pub fn to_spec(&self) -> SystemSpec {
        SystemSpec {
            schema: SYSTEM_SCHEMA.into(),
            diffeos: self
                .table
                .iter()
                .zip(&self.nearly_conservative)
                .map(|(d, &nc)| DiffeoSpec {
                    name: d.name().into(),
                    matrix: d.matrix(),
                    modes: d.modes().to_vec(),
                    nearly_conservative: nc,
                })
                .collect(),
            measure: self.measure.atoms().iter().map(|&(index, prob)| AtomSpec { index, prob }).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SystemSpec =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("system file: {e}")))?;
        System::from_spec(&spec)
    }

    /// Built-in systems by name: `ab`, `ab-perturbed`, `cat`, `shear`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "ab" => Ok(System::ab()),
            "ab-perturbed" => System::ab_perturbed(0.02),
            "cat" => Ok(System::single(Diffeo::linear("M", [[2, 1], [1, 1]])?)),
            "shear" => Ok(System::single(Diffeo::linear("A", [[1, 1], [0, 1]])?)),
            other => Err(Error::InvalidInput(format!("unknown built-in system \"{other}\""))),
        }
    }

    /// `½δ_A + ½δ_B` with `A = (1 1; 0 1)`, `B = (1 0; 1 1)`.
    pub fn ab() -> Self {
        let a = Diffeo::linear("A", [[1, 1], [0, 1]]).expect("valid");
        let b = Diffeo::linear("B", [[1, 0], [1, 1]]).expect("valid");
        System::new(vec![a, b], DrivingMeasure::new(vec![(0, 0.5), (1, 0.5)]).expect("valid")).expect("valid")
    }

    /// `A + ε(sin 2πy, 0)` and `B + ε(0, sin 2πx)`, both area-preserving, with equal
    /// weights; the origin stays a common fixed point.
    pub fn ab_perturbed(eps: f64) -> Result<Self> {
        let a = Diffeo::new("A", [[1, 1], [0, 1]], vec![Mode { k: [0, 1], amp: [eps, 0.0], phase: 0.0 }])?;
        let b = Diffeo::new("B", [[1, 0], [1, 1]], vec![Mode { k: [1, 0], amp: [0.0, eps], phase: 0.0 }])?;
        System::new(vec![a, b], DrivingMeasure::new(vec![(0, 0.5), (1, 0.5)])?)
    }

    /// Point mass on one map.
    pub fn single(f: Diffeo) -> Self {
        System::new(vec![f], DrivingMeasure::dirac(0)).expect("valid")
    }

    pub fn is_linear(&self) -> bool {
        self.measure.atoms().iter().all(|&(i, _)| self.table[i].is_linear())
    }

    /// Largest cached C² bound over the support, an `e^{C₀′}` candidate.
    pub fn c2_bound(&self) -> f64 {
        self.measure.atoms().iter().map(|&(i, _)| self.table[i].c2()).fold(1.0, f64::max)
    }

    /// Grid points of the nearly-conservative atoms whose Jacobian leaves
    /// `(e^{−ε₀−C₀}, e^{ε₀+C₀})`.
    pub fn jacobian_drift_violations(&self, c0: f64, eps0: f64, grid_n: usize) -> Vec<(usize, TorusPoint, f64)> {
        let bound = eps0 + c0;
        let mut out = Vec::new();
        for &(i, _) in self.measure.atoms() {
            if !self.nearly_conservative[i] {
                continue;
            }
            for a in 0..grid_n {
                for b in 0..grid_n {
                    let p = TorusPoint::new(a as f64 / grid_n as f64, b as f64 / grid_n as f64).expect("finite");
                    let j = self.table[i].jacobian(&p);
                    if j.ln().abs() >= bound {
                        out.push((i, p, j));
                    }
                }
            }
        }
        out
    }
}
