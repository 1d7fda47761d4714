//! JSON documents for systems, mode sets and design problems.
//!
//! Matrices are row-major nested arrays. Masks are bit strings where character `j` is `1`
//! when actuator `j` is attacked, so `"010"` attacks the second of three actuators.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{enumerate_modes, LinearGaussianSystem, ModeSet};
use crate::objectives::{
    build_control_objective, build_detection_bound, expand_constraints, rows_of, vec_of, ControlWeights,
    ExpandedConstraints,
};
use crate::optimizer::{Formulation, ProblemSpec};

pub type Rows = Vec<Vec<f64>>;

pub fn matrix_from_rows(name: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("{name}: rows have differing lengths")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn mask_to_bits(mask: &[bool]) -> String {
    mask.iter().map(|&a| if a { '1' } else { '0' }).collect()
}

pub fn mask_from_bits(bits: &str) -> Result<Vec<bool>> {
    bits.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::Parse(format!("mask `{bits}` contains `{other}`"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModesDocument {
    pub masks: Vec<String>,
    pub priors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintsDocument {
    #[serde(rename = "Gx")]
    pub gx: Rows,
    #[serde(rename = "Gu")]
    pub gu: Rows,
    pub g: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemDocument {
    pub horizon: usize,
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(rename = "R")]
    pub r: Rows,
    /// Either one `m`-vector held over the window or the full stacked `r_0..r_N`.
    pub reference: Vec<f64>,
    #[serde(default)]
    pub constraints: Option<ConstraintsDocument>,
    #[serde(default = "default_jd_max")]
    pub jd_max: f64,
    #[serde(default = "default_jc_max")]
    pub jc_max: f64,
}

fn default_jd_max() -> f64 {
    1.0
}

fn default_jc_max() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemDocument {
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    #[serde(rename = "C")]
    pub c: Rows,
    #[serde(rename = "Hw")]
    pub hw: Rows,
    #[serde(rename = "Hv")]
    pub hv: Rows,
    pub x0_mean: Vec<f64>,
    pub x0_cov: Rows,
    /// Defaults to all `2^p` modes with uniform priors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<ModesDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemDocument>,
}

/// A parsed system document.
#[derive(Debug, Clone)]
pub struct LoadedSystem {
    pub system: LinearGaussianSystem<f64>,
    pub modes: ModeSet<f64>,
    pub problem: Option<ProblemDocument>,
}

impl SystemDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serializes")
    }

    pub fn from_model(sys: &LinearGaussianSystem<f64>, modes: &ModeSet<f64>) -> Self {
        Self {
            a: rows_of(sys.a()),
            b: rows_of(sys.b()),
            c: rows_of(sys.c()),
            hw: rows_of(sys.hw()),
            hv: rows_of(sys.hv()),
            x0_mean: vec_of(sys.x0_mean()),
            x0_cov: rows_of(sys.x0_cov()),
            modes: Some(ModesDocument {
                masks: modes.masks().iter().map(|m| mask_to_bits(m)).collect(),
                priors: vec_of(modes.priors()),
            }),
            problem: None,
        }
    }

    pub fn load(&self) -> Result<LoadedSystem> {
        let system = LinearGaussianSystem::new(
            matrix_from_rows("A", &self.a)?,
            matrix_from_rows("B", &self.b)?,
            matrix_from_rows("C", &self.c)?,
            matrix_from_rows("Hw", &self.hw)?,
            matrix_from_rows("Hv", &self.hv)?,
            DVector::from_vec(self.x0_mean.clone()),
            matrix_from_rows("x0_cov", &self.x0_cov)?,
        )?;
        let modes = match &self.modes {
            Some(doc) => {
                let masks = doc
                    .masks
                    .iter()
                    .map(|m| mask_from_bits(m))
                    .collect::<Result<Vec<_>>>()?;
                if masks.iter().any(|m| m.len() != system.p()) {
                    return Err(Error::Parse(format!("masks must have {} characters", system.p())));
                }
                ModeSet::from_masks(system.b(), masks, DVector::from_vec(doc.priors.clone()))?
            }
            None => {
                let count = 1usize << system.p().min(crate::model::MAX_INPUTS + 1);
                enumerate_modes(system.b(), &DVector::from_element(count, 1.0 / count as f64))?
            }
        };
        Ok(LoadedSystem { system, modes, problem: self.problem.clone() })
    }
}

impl ProblemDocument {
    /// Stacked reference `r_0..r_N`.
    pub fn stacked_reference(&self, m: usize) -> Result<DVector<f64>> {
        let len = m * (self.horizon + 1);
        if self.reference.len() == len {
            Ok(DVector::from_vec(self.reference.clone()))
        } else if self.reference.len() == m {
            Ok(DVector::from_fn(len, |i, _| self.reference[i % m]))
        } else {
            Err(Error::Parse(format!(
                "reference must have {m} or {len} entries, got {}",
                self.reference.len()
            )))
        }
    }

    pub fn weights(&self) -> Result<ControlWeights<f64>> {
        ControlWeights::new(matrix_from_rows("Q", &self.q)?, matrix_from_rows("R", &self.r)?)
    }

    pub fn constraints(&self, sys: &LinearGaussianSystem<f64>, modes: &ModeSet<f64>) -> Result<ExpandedConstraints<f64>> {
        match &self.constraints {
            None => Ok(ExpandedConstraints::none(sys.p() * self.horizon)),
            Some(doc) => expand_constraints(
                sys,
                modes,
                &matrix_from_rows("Gx", &doc.gx)?,
                &matrix_from_rows("Gu", &doc.gu)?,
                &DVector::from_vec(doc.g.clone()),
                self.horizon,
            ),
        }
    }

    /// Builds every form for `kind` from the system's current initial belief.
    pub fn build(
        &self,
        kind: Formulation,
        sys: &LinearGaussianSystem<f64>,
        modes: &ModeSet<f64>,
    ) -> Result<ProblemSpec<f64>> {
        let control = build_control_objective(sys, modes, &self.stacked_reference(sys.m())?, &self.weights()?, self.horizon)?;
        let detection = build_detection_bound(sys, modes, self.horizon)?;
        let constraints = self.constraints(sys, modes)?;
        ProblemSpec::new(kind, control, detection, constraints, self.jd_max, self.jc_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"{
        "A": [[1.0, 0.1], [0.0, 0.9]],
        "B": [[1.0, 0.0], [0.0, 1.0]],
        "C": [[1.0, 0.0]],
        "Hw": [[0.1, 0.0], [0.0, 0.1]],
        "Hv": [[0.2]],
        "x0_mean": [1.0, 2.0],
        "x0_cov": [[0.5, 0.0], [0.0, 0.5]],
        "modes": {"masks": ["00", "10", "01", "11"], "priors": [0.4, 0.2, 0.2, 0.2]},
        "problem": {"horizon": 3, "Q": [[1.0]], "R": [[1.0, 0.0], [0.0, 1.0]], "reference": [0.5],
                    "constraints": {"Gx": [[1.0, 0.0]], "Gu": [[0.0, 0.0]], "g": [10.0]}}
    }"#;

    #[test]
    fn parses_and_roundtrips() {
        let doc = SystemDocument::from_json(DOC).unwrap();
        let loaded = doc.load().unwrap();
        assert_eq!(loaded.modes.len(), 4);
        assert!(loaded.modes.masks()[2][1]);
        let again = SystemDocument::from_model(&loaded.system, &loaded.modes);
        let reloaded = SystemDocument::from_json(&again.to_json()).unwrap().load().unwrap();
        assert_eq!(reloaded.system, loaded.system);
        assert_eq!(reloaded.modes, loaded.modes);
        let problem = loaded.problem.unwrap();
        assert_eq!(problem.stacked_reference(1).unwrap().len(), 4);
        let spec = problem.build(Formulation::PureControl, &loaded.system, &loaded.modes).unwrap();
        assert_eq!(spec.constraints.len(), 16);
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = SystemDocument::from_json("{\n  \"A\": [[1.0,]]\n}").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(matches!(mask_from_bits("0x1"), Err(Error::Parse(_))));
    }

    #[test]
    fn default_modes_are_uniform() {
        let mut doc = SystemDocument::from_json(DOC).unwrap();
        doc.modes = None;
        let loaded = doc.load().unwrap();
        assert_eq!(loaded.modes.priors().as_slice(), &[0.25; 4]);
    }
}
