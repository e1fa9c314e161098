//! Dense complex linear algebra over qubit registers.
//!
//! Qubit 0 is the most significant bit of a computational basis label. A
//! k-qubit gate placed on `targets = [t0, t1, ..]` treats `t0` as the most
//! significant qubit of its own `2^k` index, so `CNOT` on `[c, t]` has its
//! control on `c`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{arg, QcmmError, Result};

pub type C64 = Complex64;

/// Single-qubit operator stored row-major.
pub type Mat2 = [[C64; 2]; 2];

pub const MAX_QUBITS: usize = 16;
pub const UNITARY_TOL: f64 = 1e-10;
pub const HERMITIAN_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-10;
pub const PSD_FLOOR: f64 = -1e-9;
pub const NORM_TOL: f64 = 1e-10;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

fn check_capacity(n_qubits: usize) -> Result<()> {
    if n_qubits > MAX_QUBITS {
        return Err(QcmmError::Capacity {
            requested: n_qubits,
            max: MAX_QUBITS,
        });
    }
    Ok(())
}

fn log2_exact(dim: usize) -> Option<usize> {
    if dim == 0 || !dim.is_power_of_two() {
        None
    } else {
        Some(dim.trailing_zeros() as usize)
    }
}

/// Square complex matrix acting on `n_qubits` qubits, row-major.
///
/// No invariant beyond shape; [`GateMatrix`] and [`DensityMatrix`] wrap it
/// with their respective checks.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    n_qubits: usize,
    data: Vec<C64>,
}

impl Operator {
    pub fn zeros(n_qubits: usize) -> Result<Self> {
        check_capacity(n_qubits)?;
        let dim = 1usize << n_qubits;
        Ok(Self {
            n_qubits,
            data: vec![ZERO; dim * dim],
        })
    }

    pub fn identity(n_qubits: usize) -> Result<Self> {
        let mut op = Self::zeros(n_qubits)?;
        let dim = op.dim();
        for i in 0..dim {
            op.data[i * dim + i] = ONE;
        }
        Ok(op)
    }

    pub fn from_fn(n_qubits: usize, f: impl Fn(usize, usize) -> C64) -> Result<Self> {
        let mut op = Self::zeros(n_qubits)?;
        let dim = op.dim();
        for r in 0..dim {
            for c in 0..dim {
                op.data[r * dim + c] = f(r, c);
            }
        }
        Ok(op)
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Result<Self> {
        let dim = rows.len();
        let n = log2_exact(dim).ok_or_else(|| {
            QcmmError::Argument(format!("dimension {dim} is not a power of two"))
        })?;
        if rows.iter().any(|r| r.len() != dim) {
            return arg("operator rows must form a square matrix");
        }
        Self::from_fn(n, |r, c| rows[r][c])
    }

    pub fn from_mat2(m: &Mat2) -> Self {
        Self {
            n_qubits: 1,
            data: vec![m[0][0], m[0][1], m[1][0], m[1][1]],
        }
    }

    /// `|v><v|` for an unnormalized amplitude vector.
    pub fn outer(v: &[C64]) -> Result<Self> {
        let n = log2_exact(v.len()).ok_or_else(|| {
            QcmmError::Argument(format!("vector length {} is not a power of two", v.len()))
        })?;
        Self::from_fn(n, |r, c| v[r] * v[c].conj())
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.dim() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: C64) {
        let dim = self.dim();
        self.data[r * dim + c] = v;
    }

    pub fn to_mat2(&self) -> Option<Mat2> {
        (self.n_qubits == 1).then(|| [[self.data[0], self.data[1]], [self.data[2], self.data[3]]])
    }

    pub fn matmul(&self, rhs: &Operator) -> Result<Operator> {
        if self.n_qubits != rhs.n_qubits {
            return arg(format!(
                "matmul of {}-qubit and {}-qubit operators",
                self.n_qubits, rhs.n_qubits
            ));
        }
        let dim = self.dim();
        let mut out = vec![ZERO; dim * dim];
        for r in 0..dim {
            let row = &self.data[r * dim..(r + 1) * dim];
            let orow = &mut out[r * dim..(r + 1) * dim];
            for (k, &a) in row.iter().enumerate() {
                if a == ZERO {
                    continue;
                }
                let brow = &rhs.data[k * dim..(k + 1) * dim];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Operator {
            n_qubits: self.n_qubits,
            data: out,
        })
    }

    pub fn adjoint(&self) -> Operator {
        let dim = self.dim();
        let mut data = vec![ZERO; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                data[c * dim + r] = self.data[r * dim + c].conj();
            }
        }
        Operator {
            n_qubits: self.n_qubits,
            data,
        }
    }

    pub fn trace(&self) -> C64 {
        let dim = self.dim();
        (0..dim).map(|i| self.data[i * dim + i]).sum()
    }

    pub fn scaled(&self, s: C64) -> Operator {
        Operator {
            n_qubits: self.n_qubits,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Operator, s: C64) -> Result<()> {
        if self.n_qubits != other.n_qubits {
            return arg("add_scaled on operators of different size");
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Operator) -> f64 {
        if self.n_qubits != other.n_qubits {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn hermiticity_error(&self) -> f64 {
        let dim = self.dim();
        let mut worst = 0.0f64;
        for r in 0..dim {
            for c in r..dim {
                let d = (self.data[r * dim + c] - self.data[c * dim + r].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    /// `max |U U^† - I|` elementwise.
    pub fn unitarity_error(&self) -> f64 {
        let dim = self.dim();
        let mut worst = 0.0f64;
        for r in 0..dim {
            let row_r = &self.data[r * dim..(r + 1) * dim];
            for c in 0..dim {
                let row_c = &self.data[c * dim..(c + 1) * dim];
                let dot: C64 = row_r.iter().zip(row_c).map(|(a, b)| a * b.conj()).sum();
                let target = if r == c { ONE } else { ZERO };
                worst = worst.max((dot - target).norm());
            }
        }
        worst
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_eigenvalue(&self) -> f64 {
        let dim = self.dim();
        let m = DMatrix::<C64>::from_fn(dim, dim, |r, c| {
            (self.data[r * dim + c] + self.data[c * dim + r].conj()) * 0.5
        });
        m.symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn apply_to_vec(&self, v: &[C64]) -> Vec<C64> {
        let dim = self.dim();
        (0..dim)
            .map(|r| {
                self.data[r * dim..(r + 1) * dim]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// `<v|O|v>`
    pub fn expectation(&self, v: &[C64]) -> C64 {
        let ov = self.apply_to_vec(v);
        v.iter().zip(&ov).map(|(a, b)| a.conj() * b).sum()
    }
}

/// Unitary over a small qubit count.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMatrix {
    op: Operator,
}

impl GateMatrix {
    pub fn new(op: Operator) -> Result<Self> {
        let err = op.unitarity_error();
        if !(err <= UNITARY_TOL) {
            return Err(QcmmError::Invariant(format!(
                "gate is not unitary (max |UU^†-I| = {err:e})"
            )));
        }
        Ok(Self { op })
    }

    /// Caller guarantees unitarity by construction.
    pub(crate) fn from_operator_unchecked(op: Operator) -> Self {
        Self { op }
    }

    pub fn from_rows(rows: &[Vec<C64>]) -> Result<Self> {
        Self::new(Operator::from_rows(rows)?)
    }

    pub fn identity(n_qubits: usize) -> Result<Self> {
        Ok(Self {
            op: Operator::identity(n_qubits)?,
        })
    }

    pub fn arity(&self) -> usize {
        self.op.n_qubits()
    }

    pub fn matrix(&self) -> &Operator {
        &self.op
    }

    pub fn into_operator(self) -> Operator {
        self.op
    }

    pub fn adjoint(&self) -> GateMatrix {
        GateMatrix {
            op: self.op.adjoint(),
        }
    }

    /// `self · rhs`, i.e. `rhs` acts first.
    pub fn then_after(&self, rhs: &GateMatrix) -> Result<GateMatrix> {
        Ok(GateMatrix {
            op: self.op.matmul(&rhs.op)?,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.op.get(r, c)
    }
}

/// Normalized state vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PureState {
    n_qubits: usize,
    amps: Vec<C64>,
}

impl PureState {
    pub fn new(amps: Vec<C64>) -> Result<Self> {
        let n = log2_exact(amps.len()).ok_or_else(|| {
            QcmmError::Argument(format!("state length {} is not a power of two", amps.len()))
        })?;
        check_capacity(n)?;
        let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        if !((norm - 1.0).abs() <= NORM_TOL) {
            return Err(QcmmError::Invariant(format!(
                "state squared norm {norm} is not 1"
            )));
        }
        Ok(Self { n_qubits: n, amps })
    }

    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        check_capacity(n_qubits)?;
        let dim = 1usize << n_qubits;
        if index >= dim {
            return arg(format!("basis index {index} out of range for {n_qubits} qubits"));
        }
        let mut amps = vec![ZERO; dim];
        amps[index] = ONE;
        Ok(Self { n_qubits, amps })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn probability(&self, index: usize) -> f64 {
        self.amps.get(index).map_or(0.0, |a| a.norm_sqr())
    }

    pub fn kron(&self, other: &PureState) -> Result<PureState> {
        check_capacity(self.n_qubits + other.n_qubits)?;
        let mut amps = Vec::with_capacity(self.amps.len() * other.amps.len());
        for a in &self.amps {
            for b in &other.amps {
                amps.push(a * b);
            }
        }
        Ok(PureState {
            n_qubits: self.n_qubits + other.n_qubits,
            amps,
        })
    }

    pub fn apply(&mut self, gate: &GateMatrix, targets: &[usize]) -> Result<()> {
        validate_targets(self.n_qubits, gate.arity(), targets)?;
        let layout = TargetLayout::new(self.n_qubits, targets);
        let g = gate.matrix().data();
        let kk = layout.offsets.len();
        let mut v = [ZERO; 8];
        for &b in &layout.bases {
            for m in 0..kk {
                v[m] = self.amps[b | layout.offsets[m]];
            }
            for m in 0..kk {
                let mut acc = ZERO;
                for l in 0..kk {
                    acc += g[m * kk + l] * v[l];
                }
                self.amps[b | layout.offsets[m]] = acc;
            }
        }
        Ok(())
    }

    pub fn to_density(&self) -> DensityMatrix {
        DensityMatrix {
            op: Operator::outer(&self.amps).expect("pure state has power-of-two length"),
        }
    }
}

/// Hermitian, unit-trace, positive semidefinite operator.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    op: Operator,
}

impl DensityMatrix {
    /// Validates all three invariants (the PSD check diagonalizes).
    pub fn new(op: Operator) -> Result<Self> {
        let dm = Self { op };
        dm.validate()?;
        Ok(dm)
    }

    pub(crate) fn from_operator_unchecked(op: Operator) -> Self {
        Self { op }
    }

    pub fn basis(n_qubits: usize, index: usize) -> Result<Self> {
        Ok(PureState::basis(n_qubits, index)?.to_density())
    }

    pub fn maximally_mixed(n_qubits: usize) -> Result<Self> {
        let op = Operator::identity(n_qubits)?;
        let scale = 1.0 / op.dim() as f64;
        Ok(Self {
            op: op.scaled(C64::new(scale, 0.0)),
        })
    }

    pub fn from_mat2(m: &Mat2) -> Result<Self> {
        Self::new(Operator::from_mat2(m))
    }

    pub fn validate(&self) -> Result<()> {
        let herm = self.op.hermiticity_error();
        if !(herm <= HERMITIAN_TOL) {
            return Err(QcmmError::Invariant(format!(
                "density matrix not Hermitian (max deviation {herm:e})"
            )));
        }
        let tr = self.op.trace();
        if !((tr.re - 1.0).abs() <= TRACE_TOL && tr.im.abs() <= TRACE_TOL) {
            return Err(QcmmError::Invariant(format!(
                "density matrix trace {tr} is not 1"
            )));
        }
        let min_ev = self.op.min_eigenvalue();
        if !(min_ev >= PSD_FLOOR) {
            return Err(QcmmError::Invariant(format!(
                "density matrix not PSD (min eigenvalue {min_ev:e})"
            )));
        }
        Ok(())
    }

    pub fn n_qubits(&self) -> usize {
        self.op.n_qubits()
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn into_operator(self) -> Operator {
        self.op
    }

    pub fn get(&self, r: usize, c: usize) -> C64 {
        self.op.get(r, c)
    }

    pub fn max_abs_diff(&self, other: &DensityMatrix) -> f64 {
        self.op.max_abs_diff(&other.op)
    }

    /// Diagonal readout, clamped into `[0, 1]`.
    pub fn probabilities(&self) -> Vec<f64> {
        (0..self.op.dim())
            .map(|i| self.op.get(i, i).re.clamp(0.0, 1.0))
            .collect()
    }
}

pub fn kron(a: &Operator, b: &Operator) -> Result<Operator> {
    let n = a.n_qubits + b.n_qubits;
    check_capacity(n)?;
    let (da, db) = (a.dim(), b.dim());
    let dim = da * db;
    let mut data = vec![ZERO; dim * dim];
    for ar in 0..da {
        for ac in 0..da {
            let av = a.data[ar * da + ac];
            if av == ZERO {
                continue;
            }
            for br in 0..db {
                let row = (ar * db + br) * dim + ac * db;
                for bc in 0..db {
                    data[row + bc] = av * b.data[br * db + bc];
                }
            }
        }
    }
    Ok(Operator { n_qubits: n, data })
}

/// `rho -> U rho U^†` with `U` acting on `targets`.
pub fn apply_unitary(
    state: &DensityMatrix,
    u: &GateMatrix,
    targets: &[usize],
) -> Result<DensityMatrix> {
    validate_targets(state.n_qubits(), u.arity(), targets)?;
    let mut op = state.op.clone();
    conjugate(&mut op, u.matrix(), targets);
    Ok(DensityMatrix { op })
}

/// Reduced state after tracing out `discard`; surviving qubits keep their
/// relative order.
pub fn partial_trace(state: &DensityMatrix, discard: &[usize]) -> Result<DensityMatrix> {
    let n = state.n_qubits();
    let mut seen = vec![false; n];
    for &q in discard {
        if q >= n {
            return arg(format!("qubit {q} out of range for {n} qubits"));
        }
        if std::mem::replace(&mut seen[q], true) {
            return arg(format!("qubit {q} listed twice in trace set"));
        }
    }
    if discard.len() == n {
        return arg("cannot trace out every qubit");
    }
    Ok(DensityMatrix {
        op: trace_out(&state.op, discard),
    })
}

/// `Tr(|k><k| rho)`, clamped into `[0, 1]`.
pub fn projector_expectation(state: &DensityMatrix, basis_index: usize) -> Result<f64> {
    if basis_index >= state.op.dim() {
        return arg(format!(
            "basis index {basis_index} out of range for {} qubits",
            state.n_qubits()
        ));
    }
    Ok(state.op.get(basis_index, basis_index).re.clamp(0.0, 1.0))
}

pub fn validate_targets(n_qubits: usize, arity: usize, targets: &[usize]) -> Result<()> {
    if targets.len() != arity {
        return arg(format!(
            "{arity}-qubit gate given {} targets",
            targets.len()
        ));
    }
    for (i, &t) in targets.iter().enumerate() {
        if t >= n_qubits {
            return arg(format!("target qubit {t} out of range for {n_qubits} qubits"));
        }
        if targets[..i].contains(&t) {
            return arg(format!("duplicate target qubit {t}"));
        }
    }
    Ok(())
}

/// Index bookkeeping for a gate placed on `targets` of an `n`-qubit register.
pub(crate) struct TargetLayout {
    /// Full-register offset of each local gate index.
    pub offsets: Vec<usize>,
    /// Every full index whose target bits are zero, ascending.
    pub bases: Vec<usize>,
}

impl TargetLayout {
    pub fn new(n_qubits: usize, targets: &[usize]) -> Self {
        let k = targets.len();
        let bits: Vec<usize> = targets.iter().map(|&t| 1usize << (n_qubits - 1 - t)).collect();
        let mask: usize = bits.iter().sum();
        let offsets = (0..1usize << k)
            .map(|m| {
                (0..k)
                    .filter(|&i| m >> (k - 1 - i) & 1 == 1)
                    .map(|i| bits[i])
                    .sum()
            })
            .collect();
        let bases = (0..1usize << n_qubits).filter(|i| i & mask == 0).collect();
        Self { offsets, bases }
    }
}

/// `op <- G op` with `G` placed on up to three `targets`. Targets are assumed valid.
pub fn left_apply(op: &mut Operator, gate: &Operator, targets: &[usize]) {
    match targets.len() {
        1 => left_apply_k::<2>(op, gate, targets),
        2 => left_apply_k::<4>(op, gate, targets),
        3 => left_apply_k::<8>(op, gate, targets),
        k => panic!("left_apply supports 1 to 3 targets, got {k}"),
    }
}

fn left_apply_k<const K: usize>(op: &mut Operator, gate: &Operator, targets: &[usize]) {
    let layout = TargetLayout::new(op.n_qubits, targets);
    let dim = op.dim();
    let g: [[C64; K]; K] = std::array::from_fn(|m| std::array::from_fn(|l| gate.data()[m * K + l]));
    let data = &mut op.data;
    for &b in &layout.bases {
        let rows: [usize; K] = std::array::from_fn(|m| (b | layout.offsets[m]) * dim);
        for c in 0..dim {
            let v: [C64; K] = std::array::from_fn(|m| data[rows[m] + c]);
            for m in 0..K {
                let mut acc = ZERO;
                for l in 0..K {
                    acc += g[m][l] * v[l];
                }
                data[rows[m] + c] = acc;
            }
        }
    }
}

/// `op <- op G` (or `op G^†` when `adjoint`) with `G` placed on up to three `targets`.
pub fn right_apply(op: &mut Operator, gate: &Operator, targets: &[usize], adjoint: bool) {
    match targets.len() {
        1 => right_apply_k::<2>(op, gate, targets, adjoint),
        2 => right_apply_k::<4>(op, gate, targets, adjoint),
        3 => right_apply_k::<8>(op, gate, targets, adjoint),
        k => panic!("right_apply supports 1 to 3 targets, got {k}"),
    }
}

fn right_apply_k<const K: usize>(op: &mut Operator, gate: &Operator, targets: &[usize], adjoint: bool) {
    let layout = TargetLayout::new(op.n_qubits, targets);
    let dim = op.dim();
    // eff[m][l] multiplies v[l] into out[m]
    let eff: [[C64; K]; K] = std::array::from_fn(|m| {
        std::array::from_fn(|l| if adjoint { gate.get(m, l).conj() } else { gate.get(l, m) })
    });
    let offsets: [usize; K] = std::array::from_fn(|m| layout.offsets[m]);
    for row in op.data.chunks_exact_mut(dim) {
        for &b in &layout.bases {
            let v: [C64; K] = std::array::from_fn(|m| row[b | offsets[m]]);
            for m in 0..K {
                let mut acc = ZERO;
                for l in 0..K {
                    acc += eff[m][l] * v[l];
                }
                row[b | offsets[m]] = acc;
            }
        }
    }
}

/// `op <- G op G^†`
pub fn conjugate(op: &mut Operator, gate: &Operator, targets: &[usize]) {
    left_apply(op, gate, targets);
    right_apply(op, gate, targets, true);
}

/// `op <- G^† op G`, the Heisenberg-picture pull-back through `G`.
pub fn conjugate_adjoint(op: &mut Operator, gate: &Operator, targets: &[usize]) {
    let adj = gate.adjoint();
    left_apply(op, &adj, targets);
    right_apply(op, gate, targets, false);
}

fn trace_maps(n: usize, discard: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = (0..n).filter(|q| !discard.contains(q)).collect();
    let scatter = |qubits: &[usize]| -> Vec<usize> {
        let k = qubits.len();
        (0..1usize << k)
            .map(|x| {
                (0..k)
                    .filter(|&i| x >> (k - 1 - i) & 1 == 1)
                    .map(|i| 1usize << (n - 1 - qubits[i]))
                    .sum()
            })
            .collect()
    };
    (scatter(&kept), scatter(discard))
}

/// Partial trace of an arbitrary (not necessarily normalized) operator.
pub fn trace_out(op: &Operator, discard: &[usize]) -> Operator {
    let n = op.n_qubits;
    let dim = op.dim();
    let (kmap, dmap) = trace_maps(n, discard);
    let kd = kmap.len();
    let mut data = vec![ZERO; kd * kd];
    for (i, &ki) in kmap.iter().enumerate() {
        for (j, &kj) in kmap.iter().enumerate() {
            let mut acc = ZERO;
            for &t in &dmap {
                acc += op.data[(ki | t) * dim + (kj | t)];
            }
            data[i * kd + j] = acc;
        }
    }
    Operator {
        n_qubits: n - discard.len(),
        data,
    }
}

/// Adjoint of [`trace_out`]: `G -> G ⊗ I` on the discarded qubits of an
/// `n_total`-qubit register.
pub fn embed_identity(op: &Operator, n_total: usize, discard: &[usize]) -> Operator {
    let dim = 1usize << n_total;
    let (kmap, dmap) = trace_maps(n_total, discard);
    let kd = kmap.len();
    let mut data = vec![ZERO; dim * dim];
    for (i, &ki) in kmap.iter().enumerate() {
        for (j, &kj) in kmap.iter().enumerate() {
            let v = op.data[i * kd + j];
            for &t in &dmap {
                data[(ki | t) * dim + (kj | t)] = v;
            }
        }
    }
    Operator {
        n_qubits: n_total,
        data,
    }
}

/// Contract qubit `q` of `op` against a single-qubit factor:
/// `out[r][c] = Σ_ab op[(r,a),(c,b)] m[b][a]`, so that
/// `Tr(op (A ⊗ m)) = Tr(out A)` with `m` placed on `q`.
pub fn contract_qubit(op: &Operator, q: usize, m: &Mat2) -> Operator {
    let n = op.n_qubits;
    let dim = op.dim();
    let p = n - 1 - q;
    let low = (1usize << p) - 1;
    let half = dim / 2;
    let full0: Vec<usize> = (0..half).map(|x| ((x >> p) << (p + 1)) | (x & low)).collect();
    let bit = 1usize << p;
    let mut data = vec![ZERO; half * half];
    for (r, &r0) in full0.iter().enumerate() {
        let r1 = r0 | bit;
        let row0 = &op.data[r0 * dim..(r0 + 1) * dim];
        let row1 = &op.data[r1 * dim..(r1 + 1) * dim];
        let out = &mut data[r * half..(r + 1) * half];
        for (o, &c0) in out.iter_mut().zip(&full0) {
            let c1 = c0 | bit;
            *o = row0[c0] * m[0][0] + row0[c1] * m[1][0] + row1[c0] * m[0][1] + row1[c1] * m[1][1];
        }
    }
    Operator {
        n_qubits: n - 1,
        data,
    }
}

/// `Tr(op · ⊗_j factors[j])`.
pub fn product_expectation(op: &Operator, factors: &[Mat2]) -> Result<C64> {
    if factors.len() != op.n_qubits {
        return arg(format!(
            "{} factors for a {}-qubit operator",
            factors.len(),
            op.n_qubits
        ));
    }
    let mut cur = op.clone();
    for q in (0..factors.len()).rev() {
        cur = contract_qubit(&cur, q, &factors[q]);
    }
    Ok(cur.data[0])
}

/// Environment of factor `j`: the 2x2 `E` with
/// `Tr(op · ⊗ factors) = Σ_ab E[a][b] factors[j][b][a]`.
pub fn product_environment(op: &Operator, factors: &[Mat2], j: usize) -> Result<Mat2> {
    if factors.len() != op.n_qubits || j >= factors.len() {
        return arg("factor count or index does not match the operator");
    }
    let mut cur = op.clone();
    for q in (j + 1..factors.len()).rev() {
        cur = contract_qubit(&cur, q, &factors[q]);
    }
    // remaining qubits 0..=j; contract the leading ones, always at index 0
    for f in factors.iter().take(j) {
        cur = contract_qubit(&cur, 0, f);
    }
    Ok([[cur.data[0], cur.data[1]], [cur.data[2], cur.data[3]]])
}

/// Environments of every factor, sharing the trailing contractions.
pub fn product_environments(op: &Operator, factors: &[Mat2]) -> Result<Vec<Mat2>> {
    let n = factors.len();
    if n != op.n_qubits || n == 0 {
        return arg("factor count does not match the operator");
    }
    // suffix[j]: op with qubits j+1.. contracted, over qubits 0..=j
    let mut suffix = vec![op.clone()];
    for q in (1..n).rev() {
        let next = contract_qubit(suffix.last().unwrap(), q, &factors[q]);
        suffix.push(next);
    }
    suffix.reverse();
    Ok((0..n)
        .map(|j| {
            let mut cur = suffix[j].clone();
            for f in factors.iter().take(j) {
                cur = contract_qubit(&cur, 0, f);
            }
            [[cur.data[0], cur.data[1]], [cur.data[2], cur.data[3]]]
        })
        .collect())
}

/// Reduced operator `F = Tr_others(rho · g)` on `targets`, laid out so that
/// `Tr((A ⊗ I) rho g) = Tr(A F)`. `g` must be Hermitian.
pub fn pair_environment(rho: &Operator, g_hermitian: &Operator, targets: &[usize]) -> Operator {
    let layout = TargetLayout::new(rho.n_qubits, targets);
    let dim = rho.dim();
    let kk = layout.offsets.len();
    let mut data = vec![ZERO; kk * kk];
    for &base in &layout.bases {
        for b in 0..kk {
            let rr = base | layout.offsets[b];
            let rrow = &rho.data[rr * dim..(rr + 1) * dim];
            for a in 0..kk {
                let gr = base | layout.offsets[a];
                let grow = &g_hermitian.data[gr * dim..(gr + 1) * dim];
                let dot: C64 = rrow.iter().zip(grow).map(|(x, y)| x * y.conj()).sum();
                data[b * kk + a] += dot;
            }
        }
    }
    Operator {
        n_qubits: targets.len(),
        data,
    }
}
