//! Constant-velocity Kalman filter over `(cx, cy, w, h)`.

use nalgebra::{SMatrix, SVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::uld::BoundingBox;

type M8 = SMatrix<f64, 8, 8>;
type M4 = SMatrix<f64, 4, 4>;
type M48 = SMatrix<f64, 4, 8>;
type V8 = SVector<f64, 8>;

/// Symmetry and eigenvalue tolerance for covariance checks.
pub const PSD_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalmanConfig {
    /// Process noise diagonal (px²): positions/extents then velocities.
    pub process: [f64; 8],
    /// Measurement noise diagonal (px²).
    pub measurement: [f64; 4],
    /// Initial variance of the velocity components.
    pub initial_velocity_var: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig {
            process: [1.0, 1.0, 1.0, 1.0, 0.25, 0.25, 0.25, 0.25],
            measurement: [4.0; 4],
            initial_velocity_var: 1.0,
        }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        let all = self.process.iter().chain(&self.measurement).chain([&self.initial_velocity_var]);
        for v in all {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::Config(format!("Kalman noise terms must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KalmanState {
    /// `cx, cy, w, h, vcx, vcy, vw, vh`.
    pub mean: [f64; 8],
    /// `8×8` covariance.
    pub covariance: Array,
}

fn transition() -> M8 {
    let mut f = M8::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation() -> M48 {
    let mut h = M48::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn symmetrize(p: &M8) -> M8 {
    (p + p.transpose()) * 0.5
}

impl KalmanState {
    /// Mean at `bbox` with zero velocity.
    pub fn from_box(bbox: &BoundingBox, cfg: &KalmanConfig) -> Self {
        let (cx, cy) = bbox.center();
        let mut cov = M8::zeros();
        for i in 0..4 {
            cov[(i, i)] = cfg.measurement[i];
            cov[(i + 4, i + 4)] = cfg.initial_velocity_var;
        }
        KalmanState {
            mean: [cx, cy, bbox.width(), bbox.height(), 0.0, 0.0, 0.0, 0.0],
            covariance: to_array(&cov),
        }
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::from_center(self.mean[0], self.mean[1], self.mean[2], self.mean[3])
    }

    pub fn center(&self) -> (f64, f64) {
        (self.mean[0], self.mean[1])
    }

    fn matrix(&self) -> Result<M8> {
        if self.covariance.shape() != [8, 8] {
            return Err(Error::NumericalState(format!(
                "covariance must be 8x8, got {:?}",
                self.covariance.shape()
            )));
        }
        Ok(M8::from_row_slice(self.covariance.data()))
    }

    /// Largest asymmetry `max |P − Pᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        let p = M8::from_row_slice(self.covariance.data());
        (p - p.transpose()).abs().max()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let p = symmetrize(&M8::from_row_slice(self.covariance.data()));
        SymmetricEigen::new(p).eigenvalues.min()
    }

    /// Errors unless the state is finite and the covariance symmetric PSD.
    pub fn check(&self) -> Result<()> {
        let p = self.matrix()?;
        if !self.mean.iter().all(|v| v.is_finite()) || !self.covariance.is_finite() {
            return Err(Error::NumericalState("Kalman state is not finite".into()));
        }
        let asym = (p - p.transpose()).abs().max();
        if asym > PSD_TOL {
            return Err(Error::NumericalState(format!("covariance asymmetric by {asym:e}")));
        }
        let min_eig = SymmetricEigen::new(symmetrize(&p)).eigenvalues.min();
        if min_eig < -PSD_TOL {
            return Err(Error::NumericalState(format!(
                "covariance not positive semidefinite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(())
    }

    pub fn trace_position(&self) -> f64 {
        (0..4).map(|i| self.covariance.at(&[i, i])).sum()
    }
}

fn to_array(m: &M8) -> Array {
    Array::from_fn(&[8, 8], |i| m[(i / 8, i % 8)])
}

/// Constant-velocity prediction.
pub fn kalman_predict(k: &KalmanState, cfg: &KalmanConfig) -> Result<KalmanState> {
    k.check()?;
    let f = transition();
    let x = f * V8::from_row_slice(&k.mean);
    let q = M8::from_diagonal(&V8::from_row_slice(&cfg.process));
    let p = symmetrize(&(f * k.matrix()? * f.transpose() + q));
    let mut mean = [0.0; 8];
    mean.copy_from_slice(x.as_slice());
    Ok(KalmanState {
        mean,
        covariance: to_array(&p),
    })
}

/// Measurement update on an observed box (Joseph form).
pub fn kalman_update(k: &KalmanState, obs: &BoundingBox, cfg: &KalmanConfig) -> Result<KalmanState> {
    k.check()?;
    let (cx, cy) = obs.center();
    let z = SVector::<f64, 4>::new(cx, cy, obs.width(), obs.height());
    let h = observation();
    let r = M4::from_diagonal(&SVector::<f64, 4>::from_row_slice(&cfg.measurement));
    let p = k.matrix()?;
    let x = V8::from_row_slice(&k.mean);
    let s = h * p * h.transpose() + r;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::NumericalState("innovation covariance is singular".into()))?;
    let gain = p * h.transpose() * s_inv;
    let x = x + gain * (z - h * x);
    let i_kh = M8::identity() - gain * h;
    let p = symmetrize(&(i_kh * p * i_kh.transpose() + gain * r * gain.transpose()));
    let mut mean = [0.0; 8];
    mean.copy_from_slice(x.as_slice());
    mean[2] = mean[2].max(0.0);
    mean[3] = mean[3].max(0.0);
    Ok(KalmanState {
        mean,
        covariance: to_array(&p),
    })
}

/// One filter step: predict, then update when an observation is given.
pub fn kalman_step(k: &KalmanState, observation: Option<&BoundingBox>, cfg: &KalmanConfig) -> Result<KalmanState> {
    let predicted = kalman_predict(k, cfg)?;
    match observation {
        Some(obs) => kalman_update(&predicted, obs, cfg),
        None => Ok(predicted),
    }
}
