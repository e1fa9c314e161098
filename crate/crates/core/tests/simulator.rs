use std::f64::consts::PI;

use proptest::prelude::*;
use qcmm::ansatz::{conv_layer, pool_layer, KernelName, LayerPlan};
use qcmm::fusion::{angle_encode, fuse, FusionParams};
use qcmm::gates::cc_ry;
use qcmm::qcnn::{qcnn_forward, BlockParams, QcnnConfig, QcnnInput};
use qcmm::qtensor::{apply_unitary, partial_trace, DensityMatrix, Operator, PureState, C64};

const TOL: f64 = 1e-10;

fn angle() -> impl Strategy<Value = f64> {
    -2.0 * PI..2.0 * PI
}

fn kernel() -> impl Strategy<Value = KernelName> {
    prop::sample::select(KernelName::ALL.to_vec())
}

fn kernel_with_params() -> impl Strategy<Value = (KernelName, Vec<f64>)> {
    kernel().prop_flat_map(|k| (Just(k), prop::collection::vec(angle(), k.param_count())))
}

/// Mixture of up to three random pure states on `n` qubits.
fn density(n: usize) -> impl Strategy<Value = DensityMatrix> {
    let dim = 1 << n;
    let state = prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), dim);
    prop::collection::vec((0.1..1.0f64, state), 1..=3).prop_map(move |mix| {
        let total: f64 = mix.iter().map(|m| m.0).sum();
        let mut op = Operator::zeros(n).unwrap();
        for (w, amps) in mix {
            let amps: Vec<C64> = amps.into_iter().map(|(re, im)| C64::new(re, im)).collect();
            let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            let psi = PureState::new(amps.into_iter().map(|a| a / norm).collect()).unwrap();
            op.add_scaled(psi.to_density().operator(), C64::new(w / total, 0.0)).unwrap();
        }
        DensityMatrix::new(op).unwrap()
    })
}

fn assert_state(s: &DensityMatrix) -> Result<(), TestCaseError> {
    prop_assert!((s.operator().trace() - 1.0).norm() < TOL);
    prop_assert!(s.operator().hermiticity_error() < TOL);
    prop_assert!(s.operator().min_eigenvalue() > -TOL);
    let p: f64 = s.probabilities().iter().sum();
    prop_assert!((p - 1.0).abs() < TOL);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kernels_and_layers_are_unitary((k, params) in kernel_with_params(), theta in angle()) {
        let g = k.template().instantiate(&params).unwrap();
        prop_assert!(g.matrix().unitarity_error() < TOL);
        let layer = conv_layer(&LayerPlan::new(4).unwrap(), &k.template(), &params).unwrap();
        prop_assert!(layer.matrix().unitarity_error() < TOL);
        prop_assert!(cc_ry(theta).unwrap().matrix().unitarity_error() < TOL);
    }

    #[test]
    fn channels_preserve_trace_and_positivity(
        rho in density(4),
        (k, params) in kernel_with_params(),
        a in 0usize..4,
        shift in 1usize..4,
        t1 in angle(),
        t2 in angle(),
    ) {
        let b = (a + shift) % 4;
        let g = k.template().instantiate(&params).unwrap();
        let out = apply_unitary(&rho, &g, &[a, b]).unwrap();
        assert_state(&out)?;
        assert_state(&partial_trace(&out, &[a]).unwrap())?;
        assert_state(&pool_layer(&rho, &LayerPlan::new(4).unwrap(), t1, t2).unwrap())?;
    }

    #[test]
    fn fused_states_are_valid(v in prop::collection::vec((angle(), angle(), angle()), 1..=4)) {
        let (v_h, v_l): (Vec<f64>, Vec<f64>) = v.iter().map(|t| (t.0, t.1)).unzip();
        let thetas = v.iter().map(|t| t.2).collect();
        let fused = fuse(&v_h, &v_l, &FusionParams::new(thetas)).unwrap();
        assert_state(&fused.to_density().unwrap())?;
    }

    #[test]
    fn qcnn_readout_is_a_distribution(
        (k, conv) in kernel_with_params(),
        pool in (angle(), angle()),
        v in prop::collection::vec(angle(), 4),
    ) {
        let config = QcnnConfig::new(4, k, vec![BlockParams { conv, pool: [pool.0, pool.1] }]).unwrap();
        let p = qcnn_forward(&QcnnInput::Pure(angle_encode(&v).unwrap()), &config).unwrap();
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < TOL);
        prop_assert!(p.probs.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
