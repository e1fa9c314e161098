//! Two-qubit convolution kernels, the pooling unit, and layer builders.
//!
//! Kernel wiring is read left to right as temporal order; `Top` is the
//! first (most significant) qubit of the pair.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg, QcmmError, Result};
use crate::gates::{
    block_controlled, identity2, mat2_adjoint, mat2_mul, rotation_mat2, Axis, ControlPolarity,
    GateKind, GateSpec,
};
use crate::qtensor::{
    conjugate, kron, left_apply, DensityMatrix, GateMatrix, Mat2, Operator, C64,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelName {
    TTN,
    U5,
    U6,
    U9,
    U13,
    U14,
    U15,
    SO4,
    SU4,
}

impl KernelName {
    pub const ALL: [KernelName; 9] = [
        KernelName::TTN,
        KernelName::U5,
        KernelName::U6,
        KernelName::U9,
        KernelName::U13,
        KernelName::U14,
        KernelName::U15,
        KernelName::SO4,
        KernelName::SU4,
    ];

    pub fn param_count(self) -> usize {
        match self {
            KernelName::TTN | KernelName::U9 => 2,
            KernelName::U15 => 4,
            KernelName::U13 | KernelName::U14 | KernelName::SO4 => 6,
            KernelName::U5 | KernelName::U6 => 10,
            KernelName::SU4 => 15,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KernelName::TTN => "TTN",
            KernelName::U5 => "U5",
            KernelName::U6 => "U6",
            KernelName::U9 => "U9",
            KernelName::U13 => "U13",
            KernelName::U14 => "U14",
            KernelName::U15 => "U15",
            KernelName::SO4 => "SO4",
            KernelName::SU4 => "SU4",
        }
    }

    pub fn template(self) -> KernelTemplate {
        use GateKind::*;
        use Wires::*;
        let g = |kind, wires, params: &[usize]| PlacedGate {
            kind,
            wires,
            params: params.to_vec(),
        };
        let gates = match self {
            KernelName::TTN => vec![g(RY, Top, &[0]), g(RY, Bottom, &[1]), g(CNOT, TopToBottom, &[])],
            KernelName::SO4 => vec![
                g(RY, Top, &[0]),
                g(RY, Bottom, &[1]),
                g(CNOT, TopToBottom, &[]),
                g(RY, Top, &[2]),
                g(RY, Bottom, &[3]),
                g(CNOT, TopToBottom, &[]),
                g(RY, Top, &[4]),
                g(RY, Bottom, &[5]),
            ],
            KernelName::SU4 => vec![
                g(U3, Top, &[0, 1, 2]),
                g(U3, Bottom, &[3, 4, 5]),
                g(CNOT, TopToBottom, &[]),
                g(RY, Top, &[6]),
                g(RZ, Bottom, &[7]),
                g(CNOT, BottomToTop, &[]),
                g(RY, Top, &[8]),
                g(CNOT, TopToBottom, &[]),
                g(U3, Top, &[9, 10, 11]),
                g(U3, Bottom, &[12, 13, 14]),
            ],
            KernelName::U15 => vec![
                g(RY, Top, &[0]),
                g(RY, Bottom, &[1]),
                g(CNOT, BottomToTop, &[]),
                g(RY, Top, &[2]),
                g(RY, Bottom, &[3]),
                g(CNOT, TopToBottom, &[]),
            ],
            KernelName::U5 | KernelName::U6 => {
                let ctrl = if self == KernelName::U5 { CRZ } else { CRX };
                vec![
                    g(RX, Top, &[0]),
                    g(RX, Bottom, &[1]),
                    g(RZ, Top, &[2]),
                    g(RZ, Bottom, &[3]),
                    g(ctrl, BottomToTop, &[4]),
                    g(ctrl, TopToBottom, &[5]),
                    g(RX, Top, &[6]),
                    g(RX, Bottom, &[7]),
                    g(RZ, Top, &[8]),
                    g(RZ, Bottom, &[9]),
                ]
            }
            KernelName::U9 => vec![
                g(H, Top, &[]),
                g(H, Bottom, &[]),
                g(CZ, TopToBottom, &[]),
                g(RX, Top, &[0]),
                g(RX, Bottom, &[1]),
            ],
            KernelName::U13 | KernelName::U14 => {
                let ctrl = if self == KernelName::U13 { CRZ } else { CRX };
                vec![
                    g(RY, Top, &[0]),
                    g(RY, Bottom, &[1]),
                    g(ctrl, BottomToTop, &[2]),
                    g(RY, Top, &[3]),
                    g(RY, Bottom, &[4]),
                    g(ctrl, TopToBottom, &[5]),
                ]
            }
        };
        KernelTemplate {
            name: self,
            param_count: self.param_count(),
            gates,
        }
    }
}

impl fmt::Display for KernelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelName {
    type Err = QcmmError;

    fn from_str(s: &str) -> Result<Self> {
        KernelName::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| QcmmError::Argument(format!("unknown kernel {s:?}")))
    }
}

/// Where a kernel gate sits on the two wires of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wires {
    Top,
    Bottom,
    /// Control on top, target on bottom.
    TopToBottom,
    /// Control on bottom, target on top.
    BottomToTop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedGate {
    pub kind: GateKind,
    pub wires: Wires,
    /// Indices into the kernel's parameter vector, in gate-parameter order.
    pub params: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelTemplate {
    pub name: KernelName,
    pub param_count: usize,
    pub gates: Vec<PlacedGate>,
}

fn swap_conjugate(op: &Operator) -> Operator {
    const PERM: [usize; 4] = [0, 2, 1, 3];
    Operator::from_fn(2, |r, c| op.get(PERM[r], PERM[c])).expect("two qubits")
}

fn place(op: Operator, wires: Wires) -> Operator {
    let id = Operator::identity(1).expect("one qubit");
    match wires {
        Wires::Top => kron(&op, &id).expect("two qubits"),
        Wires::Bottom => kron(&id, &op).expect("two qubits"),
        Wires::TopToBottom => op,
        Wires::BottomToTop => swap_conjugate(&op),
    }
}

impl KernelTemplate {
    fn specs(&self, params: &[f64]) -> Result<Vec<GateSpec>> {
        if params.len() != self.param_count {
            return arg(format!(
                "kernel {} takes {} parameters, got {}",
                self.name,
                self.param_count,
                params.len()
            ));
        }
        self.gates
            .iter()
            .map(|pg| GateSpec::new(pg.kind, pg.params.iter().map(|&i| params[i]).collect()))
            .collect()
    }

    pub fn instantiate(&self, params: &[f64]) -> Result<GateMatrix> {
        let mut u = Operator::identity(2)?;
        for (pg, spec) in self.gates.iter().zip(self.specs(params)?) {
            u = place(spec.matrix().into_operator(), pg.wires).matmul(&u)?;
        }
        Ok(GateMatrix::from_operator_unchecked(u))
    }

    /// The kernel unitary and its derivative with respect to every parameter.
    pub fn instantiate_with_derivatives(&self, params: &[f64]) -> Result<(Operator, Vec<Operator>)> {
        let specs = self.specs(params)?;
        let placed: Vec<Operator> = self
            .gates
            .iter()
            .zip(&specs)
            .map(|(pg, s)| place(s.matrix().into_operator(), pg.wires))
            .collect();
        let m = placed.len();
        // prefix[j] = M_j ... M_1 (gates 0..j applied), suffix[j] = M_m ... M_{j+1}
        let mut prefix = vec![Operator::identity(2)?];
        for g in &placed {
            let next = g.matmul(prefix.last().unwrap())?;
            prefix.push(next);
        }
        let mut suffix = vec![Operator::identity(2)?; m + 1];
        for j in (0..m).rev() {
            suffix[j] = suffix[j + 1].matmul(&placed[j])?;
        }
        let mut derivs = vec![Operator::zeros(2)?; self.param_count];
        for (j, (pg, spec)) in self.gates.iter().zip(&specs).enumerate() {
            for (local, &global) in pg.params.iter().enumerate() {
                let dg = place(spec.derivative(local)?, pg.wires);
                derivs[global] = suffix[j + 1].matmul(&dg)?.matmul(&prefix[j])?;
            }
        }
        Ok((prefix.pop().unwrap(), derivs))
    }
}

pub fn instantiate_kernel(template: &KernelTemplate, params: &[f64]) -> Result<GateMatrix> {
    template.instantiate(params)
}

/// Pair layout of one convolution + pooling block on `n_qubits`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub n_qubits: usize,
    pub sublayer_a: Vec<(usize, usize)>,
    pub sublayer_b: Vec<(usize, usize)>,
    /// `(source, target)`: odd source, preceding even target.
    pub pool_pairs: Vec<(usize, usize)>,
}

impl LayerPlan {
    /// Convolution additionally needs `n_qubits >= 4`; pooling alone accepts 2.
    pub fn new(n_qubits: usize) -> Result<Self> {
        if n_qubits < 2 || !n_qubits.is_multiple_of(2) {
            return arg(format!("layer width must be even and at least 2, got {n_qubits}"));
        }
        let sublayer_a = (0..n_qubits / 2).map(|k| (2 * k, 2 * k + 1)).collect();
        let sublayer_b = (0..n_qubits / 2)
            .map(|k| (2 * k + 1, (2 * k + 2) % n_qubits))
            .collect();
        let pool_pairs = (0..n_qubits / 2).map(|k| (2 * k + 1, 2 * k)).collect();
        Ok(Self {
            n_qubits,
            sublayer_a,
            sublayer_b,
            pool_pairs,
        })
    }

    /// Sublayer A first, then sublayer B.
    pub fn conv_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sublayer_a.iter().chain(&self.sublayer_b).copied()
    }

    fn check_conv(&self) -> Result<()> {
        if self.n_qubits < 4 {
            return arg(format!(
                "convolution needs at least 4 qubits, got {}",
                self.n_qubits
            ));
        }
        Ok(())
    }
}

/// Conjugate `op` by every kernel instance of the layer, in order.
pub fn apply_conv(op: &mut Operator, plan: &LayerPlan, kernel: &Operator) {
    for (a, b) in plan.conv_pairs() {
        conjugate(op, kernel, &[a, b]);
    }
}

/// Dense `U_c` over the full register: sublayer B after sublayer A, shared
/// kernel parameters at every pair.
pub fn conv_layer(plan: &LayerPlan, template: &KernelTemplate, kernel_params: &[f64]) -> Result<GateMatrix> {
    plan.check_conv()?;
    let u = template.instantiate(kernel_params)?;
    let mut full = Operator::identity(plan.n_qubits)?;
    for (a, b) in plan.conv_pairs() {
        left_apply(&mut full, u.matrix(), &[a, b]);
    }
    Ok(GateMatrix::from_operator_unchecked(full))
}

/// The `(source |0>, source |1>)` branches of the pooling unit:
/// `R_x(ϑ2)` and `R_z(ϑ1)`.
pub fn pooling_branches(theta1: f64, theta2: f64) -> (Mat2, Mat2) {
    (rotation_mat2(Axis::X, theta2), rotation_mat2(Axis::Z, theta1))
}

/// `|0><0| ⊗ R_x(ϑ2) + |1><1| ⊗ R_z(ϑ1)`, source on the leading qubit.
pub fn pooling_unit(theta1: f64, theta2: f64) -> Result<GateMatrix> {
    if !theta1.is_finite() || !theta2.is_finite() {
        return arg("non-finite pooling angle");
    }
    let (v0, v1) = pooling_branches(theta1, theta2);
    let on1 = block_controlled(&v1, &identity2(), ControlPolarity::OnOne);
    let on0 = block_controlled(&v0, &identity2(), ControlPolarity::OnZero);
    Ok(GateMatrix::from_operator_unchecked(on0.matmul(&on1)?))
}

/// Source and survivor index maps of a pooling layer.
pub(crate) struct PoolMaps {
    pub sources: Vec<usize>,
    pub survivors: Vec<usize>,
}

impl PoolMaps {
    pub fn new(plan: &LayerPlan) -> Self {
        let n = plan.n_qubits;
        let half = n / 2;
        let scatter = |qubits: Vec<usize>| -> Vec<usize> {
            (0..1usize << half)
                .map(|x| {
                    (0..half)
                        .filter(|&i| x >> (half - 1 - i) & 1 == 1)
                        .map(|i| 1usize << (n - 1 - qubits[i]))
                        .sum()
                })
                .collect()
        };
        Self {
            sources: scatter(plan.pool_pairs.iter().map(|p| p.0).collect()),
            survivors: scatter(plan.pool_pairs.iter().map(|p| p.1).collect()),
        }
    }

    /// Branch unitary on survivor `i` given source pattern `s`.
    pub fn branch<'a>(s: usize, i: usize, half: usize, v0: &'a Mat2, v1: &'a Mat2) -> &'a Mat2 {
        if s >> (half - 1 - i) & 1 == 1 {
            v1
        } else {
            v0
        }
    }

    /// Diagonal source block `<s| op |s>` over the survivors.
    pub fn block(&self, op: &Operator, s: usize) -> Operator {
        let dim = op.dim();
        let sb = self.sources[s];
        let half_n = self.survivors.len().trailing_zeros() as usize;
        let mut out = Operator::zeros(half_n).expect("within capacity");
        let kd = self.survivors.len();
        let data = out.data_mut();
        for (t, &tt) in self.survivors.iter().enumerate() {
            let row = (sb | tt) * dim;
            for (u, &uu) in self.survivors.iter().enumerate() {
                data[t * kd + u] = op.data()[row + (sb | uu)];
            }
        }
        out
    }
}

/// Conjugate each survivor `i` by its branch unitary for pattern `s`.
pub(crate) fn conjugate_branches(op: &mut Operator, s: usize, v0: &Mat2, v1: &Mat2, adjoint: bool) {
    let half = op.n_qubits();
    for i in 0..half {
        let v = PoolMaps::branch(s, i, half, v0, v1);
        let g = Operator::from_mat2(&if adjoint { mat2_adjoint(v) } else { *v });
        conjugate(op, &g, &[i]);
    }
}

/// Pooling channel on an arbitrary operator: apply every pooling unit and
/// trace out the sources. Because each unit is block-diagonal in its
/// source, only the diagonal source blocks survive the trace.
pub(crate) fn pool_operator(op: &Operator, plan: &LayerPlan, theta1: f64, theta2: f64) -> Operator {
    let maps = PoolMaps::new(plan);
    let (v0, v1) = pooling_branches(theta1, theta2);
    let mut out = Operator::zeros(plan.n_qubits / 2).expect("within capacity");
    for s in 0..maps.sources.len() {
        let mut blk = maps.block(op, s);
        conjugate_branches(&mut blk, s, &v0, &v1, false);
        out.add_scaled(&blk, C64::new(1.0, 0.0)).expect("same size");
    }
    out
}

/// Heisenberg-picture adjoint of [`pool_operator`].
pub(crate) fn pool_adjoint(g: &Operator, plan: &LayerPlan, theta1: f64, theta2: f64) -> Operator {
    let maps = PoolMaps::new(plan);
    let (v0, v1) = pooling_branches(theta1, theta2);
    let mut full = Operator::zeros(plan.n_qubits).expect("within capacity");
    let dim = full.dim();
    let kd = maps.survivors.len();
    for (s, &sb) in maps.sources.iter().enumerate() {
        let mut blk = g.clone();
        conjugate_branches(&mut blk, s, &v0, &v1, true);
        let data = full.data_mut();
        for (t, &tt) in maps.survivors.iter().enumerate() {
            for (u, &uu) in maps.survivors.iter().enumerate() {
                data[(sb | tt) * dim + (sb | uu)] = blk.data()[t * kd + u];
            }
        }
    }
    full
}

/// Pool `state` down to its even-index qubits with shared angles.
pub fn pool_layer(state: &DensityMatrix, plan: &LayerPlan, theta1: f64, theta2: f64) -> Result<DensityMatrix> {
    if state.n_qubits() != plan.n_qubits {
        return arg(format!(
            "pooling plan for {} qubits given a {}-qubit state",
            plan.n_qubits,
            state.n_qubits()
        ));
    }
    if !theta1.is_finite() || !theta2.is_finite() {
        return arg("non-finite pooling angle");
    }
    Ok(DensityMatrix::from_operator_unchecked(pool_operator(
        state.operator(),
        plan,
        theta1,
        theta2,
    )))
}

/// `dV V^†` for the branch each pooling angle lives on: `(ϑ1 on R_z, ϑ2 on R_x)`.
pub(crate) fn pooling_generators(theta1: f64, theta2: f64) -> (Mat2, Mat2) {
    let (v0, v1) = pooling_branches(theta1, theta2);
    let d1 = crate::gates::rotation_derivative(Axis::Z, theta1);
    let d2 = crate::gates::rotation_derivative(Axis::X, theta2);
    (mat2_mul(&d1, &mat2_adjoint(&v1)), mat2_mul(&d2, &mat2_adjoint(&v0)))
}

#[cfg(test)]
fn conjugate_full(op: &mut Operator, u: &Operator) {
    *op = u.matmul(op).unwrap().matmul(&u.adjoint()).unwrap();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::{cnot, cz, hadamard, rotation};
    use crate::qtensor::{apply_unitary, partial_trace, PureState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_params(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect()
    }

    #[test]
    fn kernel_param_counts_and_unitarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for name in KernelName::ALL {
            let t = name.template();
            let used: usize = t.gates.iter().map(|g| g.params.len()).sum();
            assert_eq!(used, name.param_count(), "{name}");
            let mut idx: Vec<usize> = t.gates.iter().flat_map(|g| g.params.clone()).collect();
            idx.sort();
            assert_eq!(idx, (0..name.param_count()).collect::<Vec<_>>());
            let u = t.instantiate(&random_params(&mut rng, name.param_count())).unwrap();
            assert!(u.matrix().unitarity_error() <= 1e-10, "{name}");
            assert!(t.instantiate(&vec![0.0; name.param_count() + 1]).is_err());
            assert_eq!(name.as_str().parse::<KernelName>().unwrap(), name);
        }
        assert!("U7".parse::<KernelName>().is_err());
    }

    #[test]
    fn so4_at_zero_is_identity() {
        let u = KernelName::SO4.template().instantiate(&[0.0; 6]).unwrap();
        assert!(u.matrix().max_abs_diff(&Operator::identity(2).unwrap()) < 1e-15);
    }

    #[test]
    fn ttn_half_turn_copies_into_bottom() {
        let u = KernelName::TTN.template().instantiate(&[PI, 0.0]).unwrap();
        let mut s = PureState::basis(2, 0).unwrap();
        s.apply(&u, &[0, 1]).unwrap();
        assert!((s.probability(3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn u9_at_zero_matches_dense_construction() {
        let u = KernelName::U9.template().instantiate(&[0.0, 0.0]).unwrap();
        let hh = kron(hadamard().matrix(), hadamard().matrix()).unwrap();
        let want = cz().matrix().matmul(&hh).unwrap();
        assert!(u.matrix().max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn so4_matches_explicit_gate_product() {
        let p = [0.3, 1.1, -0.4, 2.2, 0.9, -1.3];
        let ry = |a: f64| rotation(Axis::Y, a).unwrap().into_operator();
        let layer = |a, b| kron(&ry(a), &ry(b)).unwrap();
        let cx = cnot().into_operator();
        let want = layer(p[4], p[5])
            .matmul(&cx).unwrap()
            .matmul(&layer(p[2], p[3])).unwrap()
            .matmul(&cx).unwrap()
            .matmul(&layer(p[0], p[1])).unwrap();
        let got = KernelName::SO4.template().instantiate(&p).unwrap();
        assert!(got.matrix().max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn su4_zero_point_is_entangler_skeleton() {
        // all-zero U3 and rotations vanish, leaving CNOT(t→b)·CNOT(b→t)·CNOT(t→b) = SWAP
        let u = KernelName::SU4.template().instantiate(&[0.0; 15]).unwrap();
        let cx = cnot().into_operator();
        let rev = swap_conjugate(&cx);
        let skeleton = cx.matmul(&rev).unwrap().matmul(&cx).unwrap();
        assert!(u.matrix().max_abs_diff(&skeleton) < 1e-15);
    }

    #[test]
    fn kernel_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in KernelName::ALL {
            let t = name.template();
            let p = random_params(&mut rng, name.param_count());
            let (u, derivs) = t.instantiate_with_derivatives(&p).unwrap();
            assert!(u.max_abs_diff(t.instantiate(&p).unwrap().matrix()) < 1e-14);
            let h = 1e-6;
            for (i, d) in derivs.iter().enumerate() {
                let mut pp = p.clone();
                pp[i] += h;
                let mut pm = p.clone();
                pm[i] -= h;
                let mut fd = t.instantiate(&pp).unwrap().into_operator();
                fd.add_scaled(t.instantiate(&pm).unwrap().matrix(), C64::new(-1.0, 0.0)).unwrap();
                let fd = fd.scaled(C64::new(0.5 / h, 0.0));
                assert!(d.max_abs_diff(&fd) < 1e-8, "{name} param {i}");
            }
        }
    }

    #[test]
    fn layer_plan_pairs() {
        let p = LayerPlan::new(8).unwrap();
        assert_eq!(p.sublayer_a, vec![(0, 1), (2, 3), (4, 5), (6, 7)]);
        assert_eq!(p.sublayer_b, vec![(1, 2), (3, 4), (5, 6), (7, 0)]);
        assert_eq!(p.pool_pairs, vec![(1, 0), (3, 2), (5, 4), (7, 6)]);
        assert!(LayerPlan::new(7).is_err());
        assert!(LayerPlan::new(0).is_err());
        let small = LayerPlan::new(2).unwrap();
        let t = KernelName::SO4.template();
        assert!(conv_layer(&small, &t, &[0.0; 6]).is_err());
    }

    #[test]
    fn conv_layer_identity_kernel() {
        let plan = LayerPlan::new(4).unwrap();
        let u = conv_layer(&plan, &KernelName::SO4.template(), &[0.0; 6]).unwrap();
        assert!(u.matrix().max_abs_diff(&Operator::identity(4).unwrap()) < 1e-15);
    }

    #[test]
    fn conv_layer_n4_matches_placed_kernel_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 6);
        let plan = LayerPlan::new(4).unwrap();
        let k = KernelName::SO4.template().instantiate(&p).unwrap().into_operator();
        let i2 = Operator::identity(2).unwrap();
        let i1 = Operator::identity(1).unwrap();
        let a = kron(&k, &k).unwrap();
        let b12 = kron(&kron(&i1, &k).unwrap(), &i1).unwrap();
        // pair (3, 0): conjugate a (0,1)-placed kernel by the cyclic shift taking 3→0, 0→1
        let shift = Operator::from_fn(4, |r, c| {
            // maps basis bit of qubit q to qubit (q+1) mod 4
            let mut img = 0;
            for q in 0..4 {
                if c >> (3 - q) & 1 == 1 {
                    img |= 1 << (3 - (q + 1) % 4);
                }
            }
            if r == img { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }
        })
        .unwrap();
        let k01 = kron(&k, &i2).unwrap();
        let b30 = shift.adjoint().matmul(&k01).unwrap().matmul(&shift).unwrap();
        let want = b30.matmul(&b12).unwrap().matmul(&a).unwrap();
        let got = conv_layer(&plan, &KernelName::SO4.template(), &p).unwrap();
        assert!(got.matrix().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn conv_layer_shift_by_two_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for name in [KernelName::SO4, KernelName::SU4, KernelName::U13] {
            let p = random_params(&mut rng, name.param_count());
            let plan = LayerPlan::new(8).unwrap();
            let u = conv_layer(&plan, &name.template(), &p).unwrap();
            let perm = Operator::from_fn(8, |r, c| {
                let mut img = 0;
                for q in 0..8 {
                    if c >> (7 - q) & 1 == 1 {
                        img |= 1 << (7 - (q + 2) % 8);
                    }
                }
                if r == img { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }
            })
            .unwrap();
            let conj = perm.matmul(u.matrix()).unwrap().matmul(&perm.adjoint()).unwrap();
            assert!(conj.max_abs_diff(u.matrix()) < 1e-10, "{name}");
        }
    }

    #[test]
    fn weight_sharing_is_bit_exact() {
        let t = KernelName::SO4.template();
        let p = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let a = t.instantiate(&p).unwrap();
        let b = t.instantiate(&p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pooling_unit_examples() {
        assert!(pooling_unit(0.0, 0.0).unwrap().matrix().max_abs_diff(&Operator::identity(2).unwrap()) < 1e-15);

        let u = pooling_unit(PI, 0.0).unwrap();
        let mut s = PureState::basis(2, 0b10).unwrap();
        s.apply(&u, &[0, 1]).unwrap();
        assert!((s.amplitudes()[0b10] - C64::from_polar(1.0, -PI / 2.0)).norm() < 1e-15);
        assert!((s.probability(0b10) - 1.0).abs() < 1e-15);

        let u = pooling_unit(0.0, PI).unwrap();
        let mut s = PureState::basis(2, 0).unwrap();
        s.apply(&u, &[0, 1]).unwrap();
        assert!((s.probability(0b01) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pool_layer_examples() {
        let plan = LayerPlan::new(4).unwrap();
        let zero = DensityMatrix::basis(4, 0).unwrap();
        let out = pool_layer(&zero, &plan, 0.0, 0.0).unwrap();
        assert!(out.max_abs_diff(&DensityMatrix::basis(2, 0).unwrap()) < 1e-15);

        let plan2 = LayerPlan::new(2).unwrap();
        let s = DensityMatrix::basis(2, 0b10).unwrap();
        let out = pool_layer(&s, &plan2, 0.4, 1.3).unwrap();
        let r = out.get(0, 0).re;
        // source |0> applies R_x(1.3) to the target |1>: population stays cos² on |1>
        assert!((out.get(1, 1).re - (1.3f64 / 2.0).cos().powi(2)).abs() < 1e-15);
        assert!((r - (1.3f64 / 2.0).sin().powi(2)).abs() < 1e-15);
        let ident = pool_layer(&s, &plan2, 0.0, 0.0).unwrap();
        assert!(ident.max_abs_diff(&DensityMatrix::basis(1, 1).unwrap()) < 1e-15);

        assert!(pool_layer(&s, &plan, 0.0, 0.0).is_err());
    }

    #[test]
    fn pool_layer_matches_dense_apply_then_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let mut state = PureState::basis(0, 0).unwrap();
            for _ in 0..4 {
                let a = rng.random_range(0.0..PI);
                let ph = rng.random_range(0.0..2.0 * PI);
                let q = PureState::new(vec![C64::new((a / 2.0).cos(), 0.0), C64::from_polar((a / 2.0).sin(), ph)]).unwrap();
                state = state.kron(&q).unwrap();
            }
            let rho = state.to_density();
            let (t1, t2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
            let plan = LayerPlan::new(4).unwrap();
            let unit = pooling_unit(t1, t2).unwrap();
            let mut dense = rho.clone();
            for &(s, t) in &plan.pool_pairs {
                dense = apply_unitary(&dense, &unit, &[s, t]).unwrap();
            }
            let oracle = partial_trace(&dense, &[1, 3]).unwrap();
            let got = pool_layer(&rho, &plan, t1, t2).unwrap();
            assert!(got.max_abs_diff(&oracle) < 1e-10);
            got.validate().unwrap();
        }
    }

    #[test]
    fn pool_adjoint_is_the_heisenberg_dual() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let plan = LayerPlan::new(4).unwrap();
        let vals: Vec<C64> = (0..256).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let rho = Operator::from_fn(4, |r, c| vals[r * 16 + c]).unwrap();
        let g = Operator::from_fn(2, |r, c| C64::new((r + 2 * c) as f64 * 0.3, (r as f64 - c as f64) * 0.2)).unwrap();
        let (t1, t2) = (0.7, -1.9);
        let lhs = g.matmul(&pool_operator(&rho, &plan, t1, t2)).unwrap().trace();
        let rhs = pool_adjoint(&g, &plan, t1, t2).matmul(&rho).unwrap().trace();
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn full_conjugation_helper_agrees_with_pairwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let plan = LayerPlan::new(4).unwrap();
        let p = random_params(&mut rng, 6);
        let u = conv_layer(&plan, &KernelName::SO4.template(), &p).unwrap();
        let base = DensityMatrix::maximally_mixed(4).unwrap().into_operator();
        let mut a = Operator::from_fn(4, |r, c| base.get(r, c) + if r == 0 && c == 0 { C64::new(0.5, 0.0) } else { C64::new(0.0, 0.0) }).unwrap();
        let mut b = a.clone();
        conjugate_full(&mut a, u.matrix());
        apply_conv(&mut b, &plan, KernelName::SO4.template().instantiate(&p).unwrap().matrix());
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
