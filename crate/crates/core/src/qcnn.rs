//! The hierarchical conv + pool classifier and its Born-rule readout.
//!
//! [`qcnn_forward`] is the direct Schrödinger-picture evaluation.
//! [`CompiledQcnn`] serves training: it pulls the class projectors back to
//! input-space observables and differentiates aggregated input states.

use serde::{Deserialize, Serialize};

use crate::ansatz::{
    apply_conv, pool_adjoint, pool_operator, pooling_branches, pooling_generators, KernelName,
    LayerPlan, PoolMaps, conjugate_branches,
};
use crate::error::{arg, Result};
use crate::fusion::{kron_factors, FusedState};
use crate::qtensor::{
    conjugate_adjoint, embed_identity, pair_environment, trace_out, DensityMatrix, Mat2, Operator,
    PureState, C64,
};

pub const N_CLASSES: usize = 4;
pub const READOUT_QUBITS: usize = 2;
pub const POOL_PARAMS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub conv: Vec<f64>,
    /// `(ϑ1, ϑ2)`: the `R_z` angle on source `|1>`, the `R_x` angle on source `|0>`.
    pub pool: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcnnConfig {
    pub n_qubits_in: usize,
    pub kernel: KernelName,
    pub blocks: Vec<BlockParams>,
}

impl QcnnConfig {
    pub fn new(n_qubits_in: usize, kernel: KernelName, blocks: Vec<BlockParams>) -> Result<Self> {
        let cfg = Self {
            n_qubits_in,
            kernel,
            blocks,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn zeros(n_qubits_in: usize, kernel: KernelName, n_blocks: usize) -> Result<Self> {
        let block = BlockParams {
            conv: vec![0.0; kernel.param_count()],
            pool: [0.0; 2],
        };
        Self::new(n_qubits_in, kernel, vec![block; n_blocks])
    }

    pub fn validate(&self) -> Result<()> {
        validate_shape(self.n_qubits_in, self.blocks.len())?;
        for (b, block) in self.blocks.iter().enumerate() {
            if block.conv.len() != self.kernel.param_count() {
                return arg(format!(
                    "block {b}: kernel {} takes {} angles, got {}",
                    self.kernel,
                    self.kernel.param_count(),
                    block.conv.len()
                ));
            }
            if block.conv.iter().chain(&block.pool).any(|x| !x.is_finite()) {
                return arg(format!("block {b}: non-finite angle"));
            }
        }
        Ok(())
    }

    /// Register width entering each block.
    pub fn block_widths(&self) -> Vec<usize> {
        (0..self.blocks.len()).map(|b| self.n_qubits_in >> b).collect()
    }

    /// Register width after the last pool.
    pub fn output_width(&self) -> usize {
        self.n_qubits_in >> self.blocks.len()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.len() * (self.kernel.param_count() + POOL_PARAMS)
    }

    /// Per block: conv angles, then `ϑ1`, `ϑ2`.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.conv.iter().chain(&b.pool).copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return arg(format!(
                "expected {} qcnn parameters, got {}",
                self.param_count(),
                flat.len()
            ));
        }
        let k = self.kernel.param_count();
        for (block, chunk) in self.blocks.iter_mut().zip(flat.chunks_exact(k + POOL_PARAMS)) {
            block.conv.copy_from_slice(&chunk[..k]);
            block.pool = [chunk[k], chunk[k + 1]];
        }
        Ok(())
    }
}

fn validate_shape(n_qubits_in: usize, n_blocks: usize) -> Result<()> {
    if n_blocks == 0 {
        return arg("at least one conv + pool block is required");
    }
    for b in 0..n_blocks {
        let w = n_qubits_in >> b;
        if w < 4 || !w.is_multiple_of(2) || (w << b) != n_qubits_in {
            return arg(format!(
                "{n_qubits_in} input qubits cannot feed {n_blocks} blocks (block {b} width {w})"
            ));
        }
    }
    if (n_qubits_in >> n_blocks) < READOUT_QUBITS {
        return arg("fewer than two qubits left for readout");
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; N_CLASSES],
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for k in 1..N_CLASSES {
            if self.probs[k] > self.probs[best] {
                best = k;
            }
        }
        best
    }

    /// Clamp raw readouts into `[0, 1]`.
    pub fn from_raw(raw: [f64; N_CLASSES]) -> Self {
        Self {
            probs: raw.map(|p| p.clamp(0.0, 1.0)),
        }
    }
}

/// State entering the QCNN.
#[derive(Clone, Debug)]
pub enum QcnnInput {
    /// One single-qubit density factor per qubit.
    Product(Vec<Mat2>),
    Pure(PureState),
    Density(DensityMatrix),
}

impl QcnnInput {
    pub fn n_qubits(&self) -> usize {
        match self {
            QcnnInput::Product(f) => f.len(),
            QcnnInput::Pure(s) => s.n_qubits(),
            QcnnInput::Density(d) => d.n_qubits(),
        }
    }

    pub fn to_operator(&self) -> Result<Operator> {
        Ok(match self {
            QcnnInput::Product(f) => kron_factors(f)?,
            QcnnInput::Pure(s) => s.to_density().into_operator(),
            QcnnInput::Density(d) => d.operator().clone(),
        })
    }
}

impl From<&FusedState> for QcnnInput {
    fn from(f: &FusedState) -> Self {
        match &f.materialized {
            Some(m) => QcnnInput::Density(m.clone()),
            None => QcnnInput::Product(f.factors()),
        }
    }
}

fn readout_discard(width: usize) -> Vec<usize> {
    (READOUT_QUBITS..width).collect()
}

fn readout(op: &Operator) -> [f64; N_CLASSES] {
    let reduced = if op.n_qubits() > READOUT_QUBITS {
        trace_out(op, &readout_discard(op.n_qubits()))
    } else {
        op.clone()
    };
    std::array::from_fn(|k| reduced.get(k, k).re)
}

/// Conv then pool per block, then the four basis-state probabilities of
/// the two leading survivors.
pub fn qcnn_forward(input: &QcnnInput, config: &QcnnConfig) -> Result<Prediction> {
    config.validate()?;
    if input.n_qubits() != config.n_qubits_in {
        return arg(format!(
            "qcnn expects {} input qubits, got {}",
            config.n_qubits_in,
            input.n_qubits()
        ));
    }
    let template = config.kernel.template();
    let mut rho = input.to_operator()?;
    for (block, width) in config.blocks.iter().zip(config.block_widths()) {
        let plan = LayerPlan::new(width)?;
        let kernel = template.instantiate(&block.conv)?;
        apply_conv(&mut rho, &plan, kernel.matrix());
        rho = pool_operator(&rho, &plan, block.pool[0], block.pool[1]);
    }
    Ok(Prediction::from_raw(readout(&rho)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub fusion: usize,
    pub qcnn: usize,
    pub total_quantum: usize,
}

/// `d` fusion angles plus `kernel + 2` angles per block.
pub fn count_parameters(kernel: KernelName, n_blocks: usize, d: usize) -> ParamCounts {
    let qcnn = n_blocks * (kernel.param_count() + POOL_PARAMS);
    ParamCounts {
        fusion: d,
        qcnn,
        total_quantum: d + qcnn,
    }
}

struct Stage {
    plan: LayerPlan,
    kernel: Operator,
    /// `dU/dθ_m · U^†` for every kernel angle.
    generators: Vec<Operator>,
    pool: [f64; 2],
}

/// A QCNN with its kernels instantiated once, for repeated evaluation
/// and differentiation.
pub struct CompiledQcnn {
    n_in: usize,
    kernel_params: usize,
    stages: Vec<Stage>,
}

fn projector(k: usize) -> Operator {
    let mut p = Operator::zeros(READOUT_QUBITS).expect("two qubits");
    p.set(k, k, C64::new(1.0, 0.0));
    p
}

impl CompiledQcnn {
    pub fn new(config: &QcnnConfig) -> Result<Self> {
        config.validate()?;
        let template = config.kernel.template();
        let mut stages = Vec::with_capacity(config.blocks.len());
        for (block, width) in config.blocks.iter().zip(config.block_widths()) {
            let (kernel, derivs) = template.instantiate_with_derivatives(&block.conv)?;
            let adj = kernel.adjoint();
            let generators = derivs
                .iter()
                .map(|d| d.matmul(&adj))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                plan: LayerPlan::new(width)?,
                kernel,
                generators,
                pool: block.pool,
            });
        }
        Ok(Self {
            n_in: config.n_qubits_in,
            kernel_params: config.kernel.param_count(),
            stages,
        })
    }

    pub fn n_qubits_in(&self) -> usize {
        self.n_in
    }

    pub fn param_count(&self) -> usize {
        self.stages.len() * (self.kernel_params + POOL_PARAMS)
    }

    fn output_width(&self) -> usize {
        self.n_in >> self.stages.len()
    }

    /// Schrödinger-picture forward on an arbitrary operator; returns the
    /// raw (unclamped) readout `Tr(P_k Φ(op))`.
    pub fn forward_operator(&self, op: &Operator) -> Result<[f64; N_CLASSES]> {
        if op.n_qubits() != self.n_in {
            return arg(format!(
                "qcnn expects {} input qubits, got {}",
                self.n_in,
                op.n_qubits()
            ));
        }
        let mut rho = op.clone();
        for st in &self.stages {
            apply_conv(&mut rho, &st.plan, &st.kernel);
            rho = pool_operator(&rho, &st.plan, st.pool[0], st.pool[1]);
        }
        Ok(readout(&rho))
    }

    /// Heisenberg-picture observable of class `k` on the readout register.
    fn readout_observable(&self, k: usize) -> Operator {
        let w = self.output_width();
        let p = projector(k);
        if w > READOUT_QUBITS {
            embed_identity(&p, w, &readout_discard(w))
        } else {
            p
        }
    }

    /// `O_k = Φ^†(P_k)` on the input register, so that `ŷ_k = Tr(O_k ρ)`.
    pub fn observable(&self, k: usize) -> Operator {
        self.observable_tape(k).input
    }

    pub fn observables(&self) -> Vec<Operator> {
        (0..N_CLASSES).map(|k| self.observable(k)).collect()
    }

    /// Pull `P_k` back through the circuit, keeping every intermediate.
    pub fn observable_tape(&self, k: usize) -> ObservableTape {
        let mut g = self.readout_observable(k);
        let mut pool_out = vec![Operator::identity(0).expect("scalar"); self.stages.len()];
        let mut after_gate = vec![Vec::new(); self.stages.len()];
        for (s, st) in self.stages.iter().enumerate().rev() {
            g = {
                let pulled = pool_adjoint(&g, &st.plan, st.pool[0], st.pool[1]);
                pool_out[s] = g;
                pulled
            };
            let pairs: Vec<(usize, usize)> = st.plan.conv_pairs().collect();
            let mut tape = vec![Operator::identity(0).expect("scalar"); pairs.len()];
            for (i, &(a, b)) in pairs.iter().enumerate().rev() {
                tape[i] = g.clone();
                conjugate_adjoint(&mut g, &st.kernel, &[a, b]);
            }
            after_gate[s] = tape;
        }
        ObservableTape {
            k,
            pool_out,
            after_gate,
            input: g,
        }
    }

    /// Gradient of `Tr(P_k Φ(r))` with respect to the flat QCNN parameters.
    /// `r` must be Hermitian.
    pub fn param_gradient(&self, r: &Operator, k: usize) -> Result<Vec<f64>> {
        self.param_gradient_taped(r, &self.observable_tape(k))
    }

    /// As [`Self::param_gradient`], reusing a precomputed observable tape.
    pub fn param_gradient_taped(&self, r: &Operator, obs: &ObservableTape) -> Result<Vec<f64>> {
        if r.n_qubits() != self.n_in {
            return arg("aggregated state has the wrong width");
        }
        let per_block = self.kernel_params + POOL_PARAMS;
        let mut grad = vec![0.0; self.param_count()];
        let mut rho = r.clone();
        for (s, st) in self.stages.iter().enumerate() {
            let out = &mut grad[s * per_block..(s + 1) * per_block];
            for (i, (a, b)) in st.plan.conv_pairs().enumerate() {
                crate::qtensor::conjugate(&mut rho, &st.kernel, &[a, b]);
                let env = pair_environment(&rho, &obs.after_gate[s][i], &[a, b]);
                for (m, gen) in st.generators.iter().enumerate() {
                    out[m] += 2.0 * gen.matmul(&env)?.trace().re;
                }
            }
            let g = &obs.pool_out[s];
            let [d1, d2] = pool_gradient(&rho, g, &st.plan, st.pool[0], st.pool[1]);
            out[self.kernel_params] += d1;
            out[self.kernel_params + 1] += d2;
            rho = pool_operator(&rho, &st.plan, st.pool[0], st.pool[1]);
        }
        Ok(grad)
    }
}

/// Intermediate Heisenberg-picture observables of one class.
pub struct ObservableTape {
    pub k: usize,
    /// Per stage: the observable on the pooled register.
    pool_out: Vec<Operator>,
    /// Per stage and conv gate: the observable just after that gate.
    after_gate: Vec<Vec<Operator>>,
    /// `O_k` on the input register.
    pub input: Operator,
}

/// `d/dϑ Tr(G Pool(ρ))` for both pooling angles.
fn pool_gradient(rho: &Operator, g: &Operator, plan: &LayerPlan, t1: f64, t2: f64) -> [f64; 2] {
    let maps = PoolMaps::new(plan);
    let (v0, v1) = pooling_branches(t1, t2);
    let (a1, a2) = pooling_generators(t1, t2);
    let (a1, a2) = (Operator::from_mat2(&a1), Operator::from_mat2(&a2));
    let half = plan.n_qubits / 2;
    let mut out = [0.0; 2];
    for s in 0..maps.sources.len() {
        let mut tau = maps.block(rho, s);
        conjugate_branches(&mut tau, s, &v0, &v1, false);
        for i in 0..half {
            let env = pair_environment(&tau, g, &[i]);
            if s >> (half - 1 - i) & 1 == 1 {
                out[0] += 2.0 * a1.matmul(&env).expect("2x2").trace().re;
            } else {
                out[1] += 2.0 * a2.matmul(&env).expect("2x2").trace().re;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{angle_encode, fuse, FusionParams};
    use crate::qtensor::product_expectation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_config(rng: &mut ChaCha8Rng, n: usize, kernel: KernelName, blocks: usize) -> QcnnConfig {
        let blocks = (0..blocks)
            .map(|_| BlockParams {
                conv: (0..kernel.param_count()).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
                pool: [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)],
            })
            .collect();
        QcnnConfig::new(n, kernel, blocks).unwrap()
    }

    fn random_fused(rng: &mut ChaCha8Rng, d: usize) -> FusedState {
        let v = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.random_range(0.0..PI)).collect::<Vec<_>>();
        let (h, l, t) = (v(rng), v(rng), v(rng));
        fuse(&h, &l, &FusionParams::new(t)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(QcnnConfig::zeros(8, KernelName::SO4, 2).is_ok());
        assert!(QcnnConfig::zeros(8, KernelName::SO4, 1).is_ok());
        assert!(QcnnConfig::zeros(4, KernelName::SO4, 1).is_ok());
        assert!(QcnnConfig::zeros(8, KernelName::SO4, 3).is_err());
        assert!(QcnnConfig::zeros(6, KernelName::SO4, 2).is_err());
        assert!(QcnnConfig::zeros(8, KernelName::SO4, 0).is_err());
        let mut cfg = QcnnConfig::zeros(8, KernelName::SO4, 2).unwrap();
        cfg.blocks[1].conv.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = random_config(&mut rng, 8, KernelName::SU4, 2);
        let flat = cfg.flatten();
        assert_eq!(flat.len(), 34);
        let mut other = QcnnConfig::zeros(8, KernelName::SU4, 2).unwrap();
        other.set_flat(&flat).unwrap();
        assert_eq!(other, cfg);
        assert!(other.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn zero_params_on_ground_state() {
        let cfg = QcnnConfig::zeros(8, KernelName::SO4, 2).unwrap();
        let input = QcnnInput::Pure(angle_encode(&[0.0; 8]).unwrap());
        let p = qcnn_forward(&input, &cfg).unwrap();
        assert!((p.probs[0] - 1.0).abs() < 1e-12);
        assert_eq!(p.argmax(), 0);
    }

    #[test]
    fn maximally_mixed_stays_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = random_config(&mut rng, 8, KernelName::SU4, 2);
        for b in &mut cfg.blocks {
            b.pool = [0.0, 0.0];
        }
        let input = QcnnInput::Density(DensityMatrix::maximally_mixed(8).unwrap());
        let p = qcnn_forward(&input, &cfg).unwrap();
        for k in 0..4 {
            assert!((p.probs[k] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_normalize_and_inputs_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kernel in [KernelName::SO4, KernelName::U13, KernelName::TTN] {
            let cfg = random_config(&mut rng, 8, kernel, 2);
            let mut fused = random_fused(&mut rng, 8);
            let a = qcnn_forward(&QcnnInput::from(&fused), &cfg).unwrap();
            fused.materialize().unwrap();
            let b = qcnn_forward(&QcnnInput::from(&fused), &cfg).unwrap();
            assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for k in 0..4 {
                assert!((a.probs[k] - b.probs[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn wrong_width_is_rejected() {
        let cfg = QcnnConfig::zeros(8, KernelName::SO4, 2).unwrap();
        let input = QcnnInput::Pure(angle_encode(&[0.0; 4]).unwrap());
        assert!(qcnn_forward(&input, &cfg).is_err());
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(
            count_parameters(KernelName::SU4, 2, 8),
            ParamCounts { fusion: 8, qcnn: 34, total_quantum: 42 }
        );
        assert_eq!(count_parameters(KernelName::SO4, 2, 8).total_quantum, 24);
        assert_eq!(count_parameters(KernelName::U15, 2, 8).total_quantum, 20);
    }

    #[test]
    fn observables_reproduce_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (n, blocks) in [(8, 2), (8, 1), (4, 1)] {
            let cfg = random_config(&mut rng, n, KernelName::SO4, blocks);
            let compiled = CompiledQcnn::new(&cfg).unwrap();
            let obs = compiled.observables();
            let fused = random_fused(&mut rng, n);
            let want = qcnn_forward(&QcnnInput::from(&fused), &cfg).unwrap();
            for k in 0..4 {
                let got = product_expectation(&obs[k], &fused.factors()).unwrap();
                assert!((got.re - want.probs[k]).abs() < 1e-10);
                assert!(got.im.abs() < 1e-10);
                assert!(obs[k].hermiticity_error() < 1e-12);
            }
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (n, blocks, kernel) in [(4, 1, KernelName::SU4), (8, 2, KernelName::U5)] {
            let cfg = random_config(&mut rng, n, kernel, blocks);
            let rho = random_fused(&mut rng, n).to_density().unwrap().into_operator();
            let compiled = CompiledQcnn::new(&cfg).unwrap();
            for k in 0..4 {
                let grad = compiled.param_gradient(&rho, k).unwrap();
                let flat = cfg.flatten();
                let h = 1e-5;
                for i in 0..flat.len() {
                    let eval = |delta: f64| {
                        let mut c = cfg.clone();
                        let mut f = flat.clone();
                        f[i] += delta;
                        c.set_flat(&f).unwrap();
                        CompiledQcnn::new(&c).unwrap().forward_operator(&rho).unwrap()[k]
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    assert!((fd - grad[i]).abs() < 1e-8, "n={n} k={k} param {i}: {fd} vs {}", grad[i]);
                }
            }
        }
    }
}
