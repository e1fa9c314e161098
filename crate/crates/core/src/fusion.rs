//! Angle encoding, the bit-wise CC-R_y evidential fusion channel, and the
//! two entangling baseline fusers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg, QcmmError, Result};
use crate::gates::cnot;
use crate::qtensor::{conjugate, kron, DensityMatrix, Mat2, Operator, PureState, C64};

/// How the two modalities are merged before the QCNN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionStrategy {
    #[serde(rename = "qcmm")]
    Qcmm,
    #[serde(rename = "all-to-all")]
    AllToAll,
    #[serde(rename = "circuit-block")]
    CircuitBlock,
    #[serde(rename = "classical")]
    Classical,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::Qcmm,
        FusionStrategy::AllToAll,
        FusionStrategy::CircuitBlock,
        FusionStrategy::Classical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Qcmm => "qcmm",
            FusionStrategy::AllToAll => "all-to-all",
            FusionStrategy::CircuitBlock => "circuit-block",
            FusionStrategy::Classical => "classical",
        }
    }

    /// Entangling baselines run on a 4 + 4 qubit register.
    pub fn is_baseline(self) -> bool {
        matches!(self, FusionStrategy::AllToAll | FusionStrategy::CircuitBlock)
    }

    /// Number of multi-qubit fusion gates for feature width `d`.
    pub fn gate_count(self, d: usize) -> usize {
        match self {
            FusionStrategy::Qcmm => d,
            FusionStrategy::AllToAll | FusionStrategy::CircuitBlock => baseline_cnots(self).len(),
            FusionStrategy::Classical => 0,
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = QcmmError;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| QcmmError::Argument(format!("unknown fusion strategy {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub thetas: Vec<f64>,
}

impl FusionParams {
    pub fn new(thetas: Vec<f64>) -> Self {
        Self { thetas }
    }

    /// Every channel at θ = π, the Toffoli point.
    pub fn pass_through(d: usize) -> Self {
        Self {
            thetas: vec![std::f64::consts::PI; d],
        }
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }
}

/// The fused register, kept as one single-qubit factor per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedState {
    pub per_qubit: Vec<DensityMatrix>,
    pub materialized: Option<DensityMatrix>,
}

impl FusedState {
    pub fn from_factors(per_qubit: Vec<DensityMatrix>) -> Self {
        Self {
            per_qubit,
            materialized: None,
        }
    }

    pub fn n_qubits(&self) -> usize {
        self.per_qubit.len()
    }

    pub fn factors(&self) -> Vec<Mat2> {
        self.per_qubit
            .iter()
            .map(|f| f.operator().to_mat2().expect("single-qubit factor"))
            .collect()
    }

    /// Kronecker product of the factors.
    pub fn to_density(&self) -> Result<DensityMatrix> {
        if let Some(m) = &self.materialized {
            return Ok(m.clone());
        }
        Ok(DensityMatrix::from_operator_unchecked(kron_factors(&self.factors())?))
    }

    pub fn materialize(&mut self) -> Result<&DensityMatrix> {
        if self.materialized.is_none() {
            self.materialized = Some(self.to_density()?);
        }
        Ok(self.materialized.as_ref().expect("just set"))
    }
}

pub(crate) fn kron_factors(factors: &[Mat2]) -> Result<Operator> {
    let mut acc = Operator::identity(0)?;
    for f in factors {
        acc = kron(&acc, &Operator::from_mat2(f))?;
    }
    Ok(acc)
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => arg(format!("non-finite {what} at index {i}")),
        None => Ok(()),
    }
}

fn re(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// `R_y(v)|0><0|R_y(v)^†` as a 2×2 matrix.
pub fn encode_factor(v: f64) -> Mat2 {
    let (s, c) = (v / 2.0).sin_cos();
    [[re(c * c), re(c * s)], [re(c * s), re(s * s)]]
}

/// Derivative of [`encode_factor`] with respect to `v`.
pub fn encode_factor_derivative(v: f64) -> Mat2 {
    let (s, c) = v.sin_cos();
    [[re(-s / 2.0), re(c / 2.0)], [re(c / 2.0), re(s / 2.0)]]
}

/// `⊗_j R_y(v_j)|0>`.
pub fn angle_encode(v: &[f64]) -> Result<PureState> {
    check_finite(v, "feature")?;
    let mut state = PureState::basis(0, 0)?;
    for &x in v {
        let (s, c) = (x / 2.0).sin_cos();
        state = state.kron(&PureState::new(vec![re(c), re(s)])?)?;
    }
    Ok(state)
}

/// Closed-form reduced state of one fusion triplet, without input checks.
pub fn triplet_mat2(v_h: f64, v_l: f64, theta: f64) -> Mat2 {
    let p = (v_h / 2.0).sin().powi(2) * (v_l / 2.0).sin().powi(2);
    let (s, c) = (theta / 2.0).sin_cos();
    [
        [re(1.0 - p * s * s), re(p * c * s)],
        [re(p * c * s), re(p * s * s)],
    ]
}

/// Partial derivatives of [`triplet_mat2`] in `(v_h, v_l, θ)`.
pub fn triplet_derivatives(v_h: f64, v_l: f64, theta: f64) -> [Mat2; 3] {
    let sh2 = (v_h / 2.0).sin().powi(2);
    let sl2 = (v_l / 2.0).sin().powi(2);
    let p = sh2 * sl2;
    let (s, c) = (theta / 2.0).sin_cos();
    let dp_rho = [[re(-s * s), re(c * s)], [re(c * s), re(s * s)]];
    let scale = |m: &Mat2, k: f64| -> Mat2 {
        [[m[0][0] * k, m[0][1] * k], [m[1][0] * k, m[1][1] * k]]
    };
    let dp_dh = v_h.sin() / 2.0 * sl2;
    let dp_dl = v_l.sin() / 2.0 * sh2;
    let (st, ct) = theta.sin_cos();
    let dtheta = [
        [re(-p * st / 2.0), re(p * ct / 2.0)],
        [re(p * ct / 2.0), re(p * st / 2.0)],
    ];
    [scale(&dp_rho, dp_dh), scale(&dp_rho, dp_dl), dtheta]
}

/// Reduced fused state of the target qubit after CC-R_y(θ) on encoded
/// controls `v_h`, `v_l`.
pub fn fuse_triplet(v_h: f64, v_l: f64, theta: f64) -> Result<DensityMatrix> {
    check_finite(&[v_h, v_l, theta], "fusion input")?;
    DensityMatrix::from_mat2(&triplet_mat2(v_h, v_l, theta))
}

pub fn fuse(v_h: &[f64], v_l: &[f64], params: &FusionParams) -> Result<FusedState> {
    if v_h.len() != v_l.len() || v_h.len() != params.len() {
        return arg(format!(
            "fusion width mismatch: v_h {}, v_l {}, thetas {}",
            v_h.len(),
            v_l.len(),
            params.len()
        ));
    }
    let per_qubit = v_h
        .iter()
        .zip(v_l)
        .zip(&params.thetas)
        .map(|((&h, &l), &t)| fuse_triplet(h, l, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(FusedState::from_factors(per_qubit))
}

/// Modality width expected by the entangling baselines.
pub const BASELINE_WIDTH: usize = 4;

/// `(control, target)` CNOTs of a baseline fuser, in application order.
pub fn baseline_cnots(strategy: FusionStrategy) -> Vec<(usize, usize)> {
    let n = 2 * BASELINE_WIDTH;
    match strategy {
        FusionStrategy::AllToAll => [1, 2, 4]
            .iter()
            .flat_map(|&stride| (0..n).map(move |i| (i, (i + stride) % n)))
            .collect(),
        FusionStrategy::CircuitBlock => (0..BASELINE_WIDTH)
            .flat_map(|i| (0..BASELINE_WIDTH).map(move |j| (i, BASELINE_WIDTH + j)))
            .collect(),
        FusionStrategy::Qcmm | FusionStrategy::Classical => Vec::new(),
    }
}

/// Conjugate `op` by the CNOT network, or pull it back when `adjoint`.
pub(crate) fn apply_cnot_network(op: &mut Operator, cnots: &[(usize, usize)], adjoint: bool) {
    let cx = cnot().into_operator();
    if adjoint {
        for &(c, t) in cnots.iter().rev() {
            conjugate(op, &cx, &[c, t]);
        }
    } else {
        for &(c, t) in cnots {
            conjugate(op, &cx, &[c, t]);
        }
    }
}

/// Encode both 4-vectors onto `q0..q3 | q4..q7` and entangle them.
pub fn fuse_baseline(strategy: FusionStrategy, v_h: &[f64], v_l: &[f64]) -> Result<PureState> {
    if !strategy.is_baseline() {
        return arg(format!("{strategy} is not an entangling baseline"));
    }
    if v_h.len() != BASELINE_WIDTH || v_l.len() != BASELINE_WIDTH {
        return arg(format!(
            "baseline fusion takes two {BASELINE_WIDTH}-vectors, got {} and {}",
            v_h.len(),
            v_l.len()
        ));
    }
    let mut state = angle_encode(v_h)?.kron(&angle_encode(v_l)?)?;
    let cx = cnot();
    for (c, t) in baseline_cnots(strategy) {
        state.apply(&cx, &[c, t])?;
    }
    Ok(state)
}

/// Belief mass `sin²(θ/2)` carried by a fusion channel.
pub fn belief_mass(theta: f64) -> f64 {
    (theta / 2.0).sin().powi(2)
}
