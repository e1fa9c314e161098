//! Constructors for the fixed and parametric gates used by the circuits.
//!
//! Rotations follow `R_a(φ) = exp(-i φ σ_a / 2)`. In multi-qubit gates the
//! control qubits are the most significant ones.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg, QcmmError, Result};
use crate::qtensor::{GateMatrix, Mat2, Operator, C64};

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ControlPolarity {
    /// Filled control dot: active on `|1>`.
    OnOne,
    /// Open control dot: active on `|0>`.
    OnZero,
}

/// How a gate parameter enters the circuit, which decides the exact
/// parameter-shift rule for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    /// Generator with eigenvalues `±1/2`; the two-term `±π/2` rule is exact.
    PauliRotation,
    /// Generator with eigenvalues `{0, ±1/2}`; needs the four-term rule.
    ControlledRotation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateKind {
    RX,
    RY,
    RZ,
    U3,
    H,
    X,
    CNOT,
    CZ,
    CRX,
    CRZ,
    AntiCRX,
    CCRY,
}

impl GateKind {
    pub fn param_count(self) -> usize {
        match self {
            GateKind::U3 => 3,
            GateKind::H | GateKind::X | GateKind::CNOT | GateKind::CZ => 0,
            _ => 1,
        }
    }

    pub fn arity(self) -> usize {
        match self {
            GateKind::RX | GateKind::RY | GateKind::RZ | GateKind::U3 | GateKind::H | GateKind::X => 1,
            GateKind::CCRY => 3,
            _ => 2,
        }
    }

    pub fn generator(self) -> Option<GeneratorKind> {
        match self {
            GateKind::RX | GateKind::RY | GateKind::RZ | GateKind::U3 => {
                Some(GeneratorKind::PauliRotation)
            }
            GateKind::CRX | GateKind::CRZ | GateKind::AntiCRX | GateKind::CCRY => {
                Some(GeneratorKind::ControlledRotation)
            }
            _ => None,
        }
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A gate kind together with its angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub kind: GateKind,
    pub params: Vec<f64>,
}

impl GateSpec {
    pub fn new(kind: GateKind, params: Vec<f64>) -> Result<Self> {
        if params.len() != kind.param_count() {
            return arg(format!(
                "{kind} takes {} angles, got {}",
                kind.param_count(),
                params.len()
            ));
        }
        check_finite(&params)?;
        Ok(Self { kind, params })
    }

    pub fn matrix(&self) -> GateMatrix {
        let p = &self.params;
        let op = match self.kind {
            GateKind::RX => Operator::from_mat2(&rotation_mat2(Axis::X, p[0])),
            GateKind::RY => Operator::from_mat2(&rotation_mat2(Axis::Y, p[0])),
            GateKind::RZ => Operator::from_mat2(&rotation_mat2(Axis::Z, p[0])),
            GateKind::U3 => Operator::from_mat2(&u3_mat2(p[0], p[1], p[2])),
            GateKind::H => Operator::from_mat2(&hadamard_mat2()),
            GateKind::X => Operator::from_mat2(&pauli(Axis::X)),
            GateKind::CNOT => block_controlled(&pauli(Axis::X), &identity2(), ControlPolarity::OnOne),
            GateKind::CZ => block_controlled(&pauli(Axis::Z), &identity2(), ControlPolarity::OnOne),
            GateKind::CRX => block_controlled(&rotation_mat2(Axis::X, p[0]), &identity2(), ControlPolarity::OnOne),
            GateKind::CRZ => block_controlled(&rotation_mat2(Axis::Z, p[0]), &identity2(), ControlPolarity::OnOne),
            GateKind::AntiCRX => block_controlled(&rotation_mat2(Axis::X, p[0]), &identity2(), ControlPolarity::OnZero),
            GateKind::CCRY => cc_ry_operator(p[0]),
        };
        GateMatrix::from_operator_unchecked(op)
    }

    /// Elementwise derivative of the matrix with respect to `params[index]`.
    pub fn derivative(&self, index: usize) -> Result<Operator> {
        if index >= self.params.len() {
            return arg(format!("{} has no parameter {index}", self.kind));
        }
        let p = &self.params;
        let zero2 = [[ZERO; 2]; 2];
        Ok(match self.kind {
            GateKind::RX => Operator::from_mat2(&rotation_derivative(Axis::X, p[0])),
            GateKind::RY => Operator::from_mat2(&rotation_derivative(Axis::Y, p[0])),
            GateKind::RZ => Operator::from_mat2(&rotation_derivative(Axis::Z, p[0])),
            GateKind::U3 => Operator::from_mat2(&u3_derivative(p[0], p[1], p[2], index)),
            GateKind::CRX => block_controlled(&rotation_derivative(Axis::X, p[0]), &zero2, ControlPolarity::OnOne),
            GateKind::CRZ => block_controlled(&rotation_derivative(Axis::Z, p[0]), &zero2, ControlPolarity::OnOne),
            GateKind::AntiCRX => block_controlled(&rotation_derivative(Axis::X, p[0]), &zero2, ControlPolarity::OnZero),
            GateKind::CCRY => {
                let d = rotation_derivative(Axis::Y, p[0]);
                Operator::from_fn(3, |r, c| if r >= 6 && c >= 6 { d[r - 6][c - 6] } else { ZERO })?
            }
            _ => unreachable!("parameterless gates rejected above"),
        })
    }
}

impl FromStr for GateKind {
    type Err = QcmmError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "RX" => GateKind::RX,
            "RY" => GateKind::RY,
            "RZ" => GateKind::RZ,
            "U3" => GateKind::U3,
            "H" => GateKind::H,
            "X" => GateKind::X,
            "CNOT" | "CX" => GateKind::CNOT,
            "CZ" => GateKind::CZ,
            "CRX" => GateKind::CRX,
            "CRZ" => GateKind::CRZ,
            "ANTI-CRX" | "ANTICRX" => GateKind::AntiCRX,
            "CCRY" | "CC-RY" => GateKind::CCRY,
            other => return arg(format!("unknown gate kind {other:?}")),
        })
    }
}

fn check_finite(angles: &[f64]) -> Result<()> {
    match angles.iter().find(|a| !a.is_finite()) {
        Some(a) => arg(format!("non-finite angle {a}")),
        None => Ok(()),
    }
}

pub fn identity2() -> Mat2 {
    [[ONE, ZERO], [ZERO, ONE]]
}

pub fn pauli(axis: Axis) -> Mat2 {
    match axis {
        Axis::X => [[ZERO, ONE], [ONE, ZERO]],
        Axis::Y => [[ZERO, -I], [I, ZERO]],
        Axis::Z => [[ONE, ZERO], [ZERO, -ONE]],
    }
}

fn hadamard_mat2() -> Mat2 {
    let h = C64::new(FRAC_1_SQRT_2, 0.0);
    [[h, h], [h, -h]]
}

pub fn mat2_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    std::array::from_fn(|r| std::array::from_fn(|c| a[r][0] * b[0][c] + a[r][1] * b[1][c]))
}

pub fn mat2_adjoint(a: &Mat2) -> Mat2 {
    [[a[0][0].conj(), a[1][0].conj()], [a[0][1].conj(), a[1][1].conj()]]
}

/// Unchecked 2x2 rotation; callers validate the angle.
pub fn rotation_mat2(axis: Axis, angle: f64) -> Mat2 {
    let (s, c) = (angle / 2.0).sin_cos();
    match axis {
        Axis::X => [[C64::new(c, 0.0), C64::new(0.0, -s)], [C64::new(0.0, -s), C64::new(c, 0.0)]],
        Axis::Y => [[C64::new(c, 0.0), C64::new(-s, 0.0)], [C64::new(s, 0.0), C64::new(c, 0.0)]],
        Axis::Z => [[C64::new(c, -s), ZERO], [ZERO, C64::new(c, s)]],
    }
}

/// `d R_a(φ) / dφ = (-i/2) σ_a R_a(φ)`
pub fn rotation_derivative(axis: Axis, angle: f64) -> Mat2 {
    let m = mat2_mul(&pauli(axis), &rotation_mat2(axis, angle));
    let k = C64::new(0.0, -0.5);
    std::array::from_fn(|r| std::array::from_fn(|c| m[r][c] * k))
}

pub fn rotation(axis: Axis, angle: f64) -> Result<GateMatrix> {
    check_finite(&[angle])?;
    Ok(GateMatrix::from_operator_unchecked(Operator::from_mat2(&rotation_mat2(axis, angle))))
}

fn u3_mat2(theta: f64, phi: f64, lambda: f64) -> Mat2 {
    let (s, c) = (theta / 2.0).sin_cos();
    let el = C64::from_polar(1.0, lambda);
    let ep = C64::from_polar(1.0, phi);
    let epl = C64::from_polar(1.0, phi + lambda);
    [[C64::new(c, 0.0), -el * s], [ep * s, epl * c]]
}

fn u3_derivative(theta: f64, phi: f64, lambda: f64, index: usize) -> Mat2 {
    let (s, c) = (theta / 2.0).sin_cos();
    let el = C64::from_polar(1.0, lambda);
    let ep = C64::from_polar(1.0, phi);
    let epl = C64::from_polar(1.0, phi + lambda);
    match index {
        0 => [[C64::new(-s / 2.0, 0.0), -el * (c / 2.0)], [ep * (c / 2.0), -epl * (s / 2.0)]],
        1 => [[ZERO, ZERO], [I * ep * s, I * epl * c]],
        _ => [[ZERO, -I * el * s], [ZERO, I * epl * c]],
    }
}

pub fn u3(theta: f64, phi: f64, lambda: f64) -> Result<GateMatrix> {
    check_finite(&[theta, phi, lambda])?;
    Ok(GateMatrix::from_operator_unchecked(Operator::from_mat2(&u3_mat2(theta, phi, lambda))))
}

pub fn hadamard() -> GateMatrix {
    GateMatrix::from_operator_unchecked(Operator::from_mat2(&hadamard_mat2()))
}

pub fn pauli_x() -> GateMatrix {
    GateMatrix::from_operator_unchecked(Operator::from_mat2(&pauli(Axis::X)))
}

pub fn cnot() -> GateMatrix {
    GateSpec { kind: GateKind::CNOT, params: vec![] }.matrix()
}

pub fn cz() -> GateMatrix {
    GateSpec { kind: GateKind::CZ, params: vec![] }.matrix()
}

/// 4x4 operator with `active` on the polarity-matching control block and
/// `inactive` on the other; control is the most significant qubit.
pub(crate) fn block_controlled(active: &Mat2, inactive: &Mat2, polarity: ControlPolarity) -> Operator {
    let (b0, b1) = match polarity {
        ControlPolarity::OnOne => (inactive, active),
        ControlPolarity::OnZero => (active, inactive),
    };
    Operator::from_fn(2, |r, c| match (r >= 2, c >= 2) {
        (false, false) => b0[r][c],
        (true, true) => b1[r - 2][c - 2],
        _ => ZERO,
    })
    .expect("two qubits is within capacity")
}

pub fn controlled(base: &GateMatrix, polarity: ControlPolarity) -> Result<GateMatrix> {
    let m = base
        .matrix()
        .to_mat2()
        .ok_or_else(|| QcmmError::Argument(format!("controlled() needs a 1-qubit base, got {} qubits", base.arity())))?;
    GateMatrix::new(block_controlled(&m, &identity2(), polarity))
}

fn cc_ry_operator(theta: f64) -> Operator {
    let r = rotation_mat2(Axis::Y, theta);
    Operator::from_fn(3, |row, col| {
        if row >= 6 && col >= 6 {
            r[row - 6][col - 6]
        } else if row == col {
            ONE
        } else {
            ZERO
        }
    })
    .expect("three qubits is within capacity")
}

/// `(I - |11><11|) ⊗ I + |11><11| ⊗ R_y(θ)`, controls on the two leading qubits.
pub fn cc_ry(theta: f64) -> Result<GateMatrix> {
    check_finite(&[theta])?;
    Ok(GateMatrix::from_operator_unchecked(cc_ry_operator(theta)))
}
