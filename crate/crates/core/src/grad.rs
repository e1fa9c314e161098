//! Gradients of the batch loss: the analytic backward pass, parameter-shift
//! rules and a central-difference oracle.

use std::f64::consts::{PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Sample;
use crate::error::{QcmmError, Result};
use crate::exec::Exec;
use crate::fusion::FusionParams;
use crate::gates::GeneratorKind;
use crate::model::{ModelSpec, ParamStore};
use crate::qcnn::N_CLASSES;
use crate::qtensor::{Operator, C64};

/// Central differences `(f(x+ε) − f(x−ε)) / 2ε` per coordinate.
pub fn fd_gradient(mut loss_fn: impl FnMut(&[f64]) -> Result<f64>, params: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(QcmmError::Argument(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut x = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        x[i] = params[i] + eps;
        let up = loss_fn(&x)?;
        x[i] = params[i] - eps;
        let down = loss_fn(&x)?;
        x[i] = params[i];
        if !(up.is_finite() && down.is_finite()) {
            return Err(QcmmError::Evaluation(format!(
                "non-finite loss while probing parameter {i}: {up}, {down}"
            )));
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// How a parameter enters the circuit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRole {
    pub generator: GeneratorKind,
    /// Number of gates sharing the angle.
    pub occurrences: usize,
}

impl ParamRole {
    pub fn single(generator: GeneratorKind) -> Self {
        Self {
            generator,
            occurrences: 1,
        }
    }
}

fn shifted(
    model_fn: &mut impl FnMut(&[f64]) -> Result<Vec<f64>>,
    params: &[f64],
    index: usize,
    class: usize,
    shift: f64,
) -> Result<f64> {
    let mut x = params.to_vec();
    x[index] += shift;
    let y = model_fn(&x)?;
    y.get(class).copied().ok_or_else(|| {
        QcmmError::Argument(format!("class {class} outside a {}-output model", y.len()))
    })
}

fn check_index(params: &[f64], index: usize, role: ParamRole) -> Result<()> {
    if index >= params.len() {
        return Err(QcmmError::Argument(format!(
            "parameter {index} outside a vector of {}",
            params.len()
        )));
    }
    if role.occurrences != 1 {
        return Err(QcmmError::Contract(format!(
            "parameter {index} drives {} gates; shift rules need a single occurrence",
            role.occurrences
        )));
    }
    Ok(())
}

/// Two-term rule `(ŷ(φ+π/2) − ŷ(φ−π/2)) / 2`. Exact only for a single
/// Pauli rotation.
pub fn shift_gradient(
    mut model_fn: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    params: &[f64],
    role: ParamRole,
    index: usize,
    class: usize,
) -> Result<f64> {
    check_index(params, index, role)?;
    if role.generator != GeneratorKind::PauliRotation {
        return Err(QcmmError::Contract(format!(
            "parameter {index} is a controlled rotation; use the four-term rule"
        )));
    }
    let up = shifted(&mut model_fn, params, index, class, PI / 2.0)?;
    let down = shifted(&mut model_fn, params, index, class, -PI / 2.0)?;
    Ok((up - down) / 2.0)
}

/// Four-term rule for generators with eigenvalues `{0, ±1/2}`:
/// shifts `π/2` and `3π/2` with weights `(√2 ± 1) / 4√2`.
pub fn four_term_shift_gradient(
    mut model_fn: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    params: &[f64],
    role: ParamRole,
    index: usize,
    class: usize,
) -> Result<f64> {
    check_index(params, index, role)?;
    let (alpha, beta) = (PI / 2.0, 3.0 * PI / 2.0);
    let d_plus = (SQRT_2 + 1.0) / (4.0 * SQRT_2);
    let d_minus = (SQRT_2 - 1.0) / (4.0 * SQRT_2);
    let mut f = |s| shifted(&mut model_fn, params, index, class, s);
    let near = f(alpha)? - f(-alpha)?;
    let far = f(beta)? - f(-beta)?;
    Ok(d_plus * near - d_minus * far)
}

/// Mean batch loss and its gradient in flat parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// Analytic gradient of the mean cross-entropy over `batch`. Frozen
/// parameters get exactly zero. Reductions run in sample order, so the
/// result does not depend on `exec`.
pub fn backward(batch: &[&Sample], store: &ParamStore, exec: Exec) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(QcmmError::Argument("empty batch".into()));
    }
    let model = store.compile()?;
    let n = batch.len();
    let per_sample = exec.map(batch, |s| model.sample_grad(s, n));

    let mut loss = 0.0;
    let mut front: Option<Vec<f64>> = None;
    let mut aggregated: Vec<Option<Operator>> = vec![None; N_CLASSES];
    for (s, g) in batch.iter().zip(per_sample) {
        let g = g?;
        loss += g.loss;
        match front.as_mut() {
            None => front = Some(g.front),
            Some(acc) => acc.iter_mut().zip(&g.front).for_each(|(a, x)| *a += x),
        }
        if g.weight != 0.0 {
            let w = C64::new(g.weight, 0.0);
            match aggregated[s.label].as_mut() {
                None => aggregated[s.label] = Some(g.state.scaled(w)),
                Some(r) => r.add_scaled(&g.state, w)?,
            }
        }
    }
    let mut gradient = front.unwrap_or_default();
    gradient.extend(model.qcnn_gradient(&aggregated, exec)?);
    for (g, trainable) in gradient.iter_mut().zip(store.trainable_mask()) {
        if !trainable {
            *g = 0.0;
        }
    }
    if let Some(i) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(QcmmError::Training(format!("non-finite gradient entry {i}")));
    }
    Ok(BatchGradient {
        loss: loss / n as f64,
        gradient,
    })
}

/// Mean batch loss at an arbitrary flat parameter vector.
pub fn loss_at(store: &ParamStore, flat: &[f64], batch: &[&Sample]) -> Result<f64> {
    let mut probe = store.clone();
    probe.set_flat(flat)?;
    probe.compile()?.batch_loss(batch)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub kernel: String,
    pub n_params: usize,
    pub max_abs_dev: f64,
    /// Segment and offset of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

pub const GRADCHECK_EPS: f64 = 1e-4;
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Analytic gradient against central differences on a seeded random
/// store and batch. Fusion angles are drawn at random rather than left at `π`.
pub fn gradcheck(spec: &ModelSpec, seed: u64, batch_len: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::init(spec, &mut rng)?;
    if let Some(f) = store.fusion.as_mut() {
        *f = FusionParams::new((0..f.len()).map(|_| rng.random_range(0.0..2.0 * PI)).collect());
    }
    let samples: Vec<Sample> = (0..batch_len)
        .map(|_| Sample {
            x_h: (0..spec.d_h).map(|_| rng.random_range(-2.0..2.0)).collect(),
            x_l: (0..spec.d_l).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label: rng.random_range(0..N_CLASSES),
        })
        .collect();
    if !spec.uses_mlp() {
        let bundle = crate::data::DatasetBundle::new(
            samples.clone(),
            crate::data::Split {
                train: (0..batch_len).collect(),
                test: Vec::new(),
            },
            N_CLASSES,
        )?;
        store.fit_inputs(&bundle)?;
    }
    let batch: Vec<&Sample> = samples.iter().collect();
    let analytic = backward(&batch, &store, Exec::default())?.gradient;
    let flat = store.flatten();
    let numeric = fd_gradient(|x| loss_at(&store, x, &batch), &flat, GRADCHECK_EPS)?;
    let mask = store.trainable_mask();
    let layout = store.layout();
    let mut report = GradCheckReport {
        kernel: spec.kernel.to_string(),
        n_params: mask.iter().filter(|m| **m).count(),
        max_abs_dev: 0.0,
        worst: None,
    };
    for (i, ((a, f), m)) in analytic.iter().zip(&numeric).zip(&mask).enumerate() {
        let dev = if *m { (a - f).abs() } else { a.abs() };
        if dev > report.max_abs_dev || report.worst.is_none() {
            let seg = layout.iter().find(|s| s.range().contains(&i)).expect("covered");
            report.max_abs_dev = dev.max(report.max_abs_dev);
            report.worst = Some((seg.name.clone(), i - seg.start));
        }
    }
    Ok(report)
}
