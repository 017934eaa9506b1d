//! Versioned JSON interchange for learned parameters. Matrices are stored
//! row-major with explicit shapes so snapshots stay readable and other tools
//! can consume them without guessing layouts.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::DiscreteMdp;
use crate::rslds::{ModeDynamics, Recurrence, RsldsParams};

/// Bumped whenever the snapshot layout changes shape.
pub const SNAPSHOT_VERSION: u32 = 1;

/// Row-major dense matrix with its shape spelled out.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixDto {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixDto {
    pub fn from_matrix(m: &DMatrix<f64>) -> MatrixDto {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        MatrixDto {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn from_vector(v: &DVector<f64>) -> MatrixDto {
        MatrixDto {
            rows: v.len(),
            cols: 1,
            data: v.iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.rows * self.cols != self.data.len() {
            return Err(Error::Snapshot(format!(
                "matrix shape {}x{} does not match {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        if self.cols != 1 {
            return Err(Error::Snapshot(format!(
                "expected a column vector, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(DVector::from_row_slice(&self.data))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeDto {
    pub transition: MatrixDto,
    pub control: MatrixDto,
    pub offset: MatrixDto,
    pub noise_cov: MatrixDto,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecurrenceDto {
    pub state_weights: MatrixDto,
    pub control_weights: MatrixDto,
    pub bias: MatrixDto,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamsDto {
    pub modes: Vec<ModeDto>,
    pub recurrence: RecurrenceDto,
    pub emission_cov: MatrixDto,
}

impl ParamsDto {
    pub fn from_params(params: &RsldsParams) -> ParamsDto {
        ParamsDto {
            modes: params
                .modes
                .iter()
                .map(|m| ModeDto {
                    transition: MatrixDto::from_matrix(&m.transition),
                    control: MatrixDto::from_matrix(&m.control),
                    offset: MatrixDto::from_vector(&m.offset),
                    noise_cov: MatrixDto::from_matrix(&m.noise_cov),
                })
                .collect(),
            recurrence: RecurrenceDto {
                state_weights: MatrixDto::from_matrix(&params.recurrence.state_weights),
                control_weights: MatrixDto::from_matrix(&params.recurrence.control_weights),
                bias: MatrixDto::from_vector(&params.recurrence.bias),
            },
            emission_cov: MatrixDto::from_matrix(&params.emission_cov),
        }
    }

    pub fn to_params(&self) -> Result<RsldsParams> {
        let modes = self
            .modes
            .iter()
            .map(|m| {
                Ok(ModeDynamics {
                    transition: m.transition.to_matrix()?,
                    control: m.control.to_matrix()?,
                    offset: m.offset.to_vector()?,
                    noise_cov: m.noise_cov.to_matrix()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = RsldsParams {
            modes,
            recurrence: Recurrence {
                state_weights: self.recurrence.state_weights.to_matrix()?,
                control_weights: self.recurrence.control_weights.to_matrix()?,
                bias: self.recurrence.bias.to_vector()?,
            },
            emission_cov: self.emission_cov.to_matrix()?,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Dirichlet beliefs flattened with the successor index fastest, matching the
/// in-memory layout of the rank-3 concentration array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirichletDto {
    pub regions: usize,
    pub concentrations: Vec<f64>,
}

impl DirichletDto {
    pub fn from_mdp(mdp: &DiscreteMdp) -> DirichletDto {
        DirichletDto {
            regions: mdp.num_states(),
            concentrations: mdp.alpha().values().to_vec(),
        }
    }
}

/// Everything the agent relearned at one refit point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefitSnapshot {
    pub version: u32,
    /// Continuous step count at which the refit ran.
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
    pub num_modes: usize,
    pub params: ParamsDto,
    pub dirichlet: DirichletDto,
    pub preferences: Vec<f64>,
    /// Old-to-new region relabeling used to carry counts across the refit.
    pub mode_mapping: Vec<Option<usize>>,
    /// Surrogate objective value after each EM round of this fit.
    pub objective_trace: Vec<f64>,
}

impl RefitSnapshot {
    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<RefitSnapshot> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
