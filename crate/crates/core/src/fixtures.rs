//! Two worked problems used by tests, the acceptance suite and the bundled
//! JSON configs: an unstable plant tracking a sinusoid, and a plant tracking
//! a ramp with nonzero stabilizer feedthrough.

use crate::linalg::Matrix;
use crate::model::{ExoSystem, PlantModel};
use crate::synthesis::{InternalModel, StabilizerParams};

fn m(r: usize, c: usize, v: &[f64]) -> Matrix {
    Matrix::from_row_slice(r, c, v)
}

pub fn example1_plant() -> (PlantModel, ExoSystem) {
    let plant = PlantModel::new(
        m(2, 2, &[-2.0, 1.0, 0.0, 0.8]),
        m(2, 1, &[0.0, 1.0]),
        m(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        m(1, 2, &[0.1, 0.0]),
        m(1, 2, &[0.0, 2.0]),
    )
    .expect("example 1 plant");
    let exo = ExoSystem::new(m(2, 2, &[0.0, 1.0, -1.0, 0.0])).expect("example 1 exosystem");
    (plant, exo)
}

pub fn example1_internal_model() -> InternalModel {
    InternalModel {
        g1: m(2, 2, &[0.0, 1.0, -1.0, 0.0]),
        g2: m(2, 1, &[-5.0, -4.0]),
        k: m(1, 2, &[1.0, 0.0]),
    }
}

pub fn example1_stabilizer() -> StabilizerParams {
    StabilizerParams {
        a_zeta: m(
            4,
            4,
            &[
                -2.0, 1.0, 14.98, 0.0, //
                -5.85, -2.8, 37.94, 16.5, //
                -0.5, 0.0, -3.6, 1.0, //
                -0.4, 0.0, -2.24, 0.0,
            ],
        ),
        b_zeta: m(4, 1, &[-14.98, -33.44, 3.6, 1.24]),
        c_zeta: m(1, 4, &[-5.85, -3.6, 4.5, 16.5]),
        d_zeta: m(1, 1, &[0.0]),
    }
}

/// Observer gains `(Q, W)` published for the first problem at `lambda = 2`.
pub fn example1_reference_gains() -> (Matrix, Matrix) {
    (
        m(8, 1, &[1163.51, 3374.21, 132.36, 578.15, 100.99, 154.48, 120.87, 170.665]),
        m(1, 1, &[-116.008]),
    )
}

pub const EXAMPLE1_LAMBDA: f64 = 2.0;
pub const EXAMPLE1_GAMMA: f64 = 0.1;

pub fn example2_plant() -> (PlantModel, ExoSystem) {
    let plant = PlantModel::new(
        m(2, 2, &[0.0, 1.0, 0.5, 0.8]),
        m(2, 1, &[0.0, 1.0]),
        m(2, 2, &[1.0, 0.0, 0.0, 0.0]),
        m(1, 2, &[0.1, 0.5]),
        m(1, 2, &[0.0, 2.0]),
    )
    .expect("example 2 plant");
    let exo = ExoSystem::new(m(2, 2, &[0.0, 1.0, 0.0, 0.0])).expect("example 2 exosystem");
    (plant, exo)
}

pub fn example2_internal_model() -> InternalModel {
    InternalModel {
        g1: m(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        g2: m(2, 1, &[2.0, -4.0]),
        k: m(1, 2, &[1.0, 0.0]),
    }
}

pub fn example2_stabilizer() -> StabilizerParams {
    StabilizerParams {
        a_zeta: m(
            4,
            4,
            &[
                0.0, 1.0, 25.42, 0.0, //
                -37.0, -5.8, 32.31, -8.87, //
                0.2, 1.0, -6.6, 1.0, //
                -0.4, -2.0, -52.43, 0.0,
            ],
        ),
        b_zeta: m(4, 1, &[-25.42, -24.81, 6.6, 52.43]),
        c_zeta: m(1, 4, &[-37.5, -6.6, 2.5, -8.87]),
        d_zeta: m(1, 1, &[5.0]),
    }
}

/// Observer gains `(Q, W)` published for the second problem at `lambda = 4.5`.
pub fn example2_reference_gains() -> (Matrix, Matrix) {
    (
        m(8, 1, &[67.41, 104.11, 191.66, 73.36, -4.05, 55.95, -41.84, 0.3543]),
        m(1, 1, &[-2998.8]),
    )
}

pub const EXAMPLE2_LAMBDA: f64 = 4.5;
