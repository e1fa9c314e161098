//! The end-to-end classifier: per-modality aligners, a fusion front end
//! and the QCNN, with a single flat parameter vector.
//!
//! Every front end ends in a product of single-qubit density factors.
//! Entangling baselines fold their CNOT network into the class
//! observables, so prediction is always `ŷ_k = Tr(O_k ⊗_j f_j)`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ansatz::KernelName;
use crate::classical::{FusionLayer, MlpParams};
use crate::data::{DatasetBundle, MinMaxScaler, Sample};
use crate::error::{arg, QcmmError, Result};
use crate::exec::Exec;
use crate::fusion::{
    apply_cnot_network, baseline_cnots, encode_factor, encode_factor_derivative, kron_factors,
    triplet_derivatives, triplet_mat2, FusionParams, FusionStrategy, BASELINE_WIDTH,
};
use crate::qcnn::{CompiledQcnn, ObservableTape, Prediction, QcnnConfig, N_CLASSES};
use crate::qtensor::{product_environments, product_expectation, Mat2, Operator};

pub const DEFAULT_D: usize = 8;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_BLOCKS: usize = 2;
/// Floor applied to the target-class probability inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "no-mlp")]
    NoMlp,
    #[serde(rename = "fixed-fusion")]
    FixedFusion,
    #[serde(rename = "hsi-only")]
    HsiOnly,
    #[serde(rename = "lidar-only")]
    LidarOnly,
    #[serde(rename = "shallow-qcnn")]
    ShallowQcnn,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::None,
        AblationMode::NoMlp,
        AblationMode::FixedFusion,
        AblationMode::HsiOnly,
        AblationMode::LidarOnly,
        AblationMode::ShallowQcnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::None => "none",
            AblationMode::NoMlp => "no-mlp",
            AblationMode::FixedFusion => "fixed-fusion",
            AblationMode::HsiOnly => "hsi-only",
            AblationMode::LidarOnly => "lidar-only",
            AblationMode::ShallowQcnn => "shallow-qcnn",
        }
    }

    pub fn is_unimodal(self) -> bool {
        matches!(self, AblationMode::HsiOnly | AblationMode::LidarOnly)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = QcmmError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                QcmmError::Argument(format!(
                    "unknown ablation mode '{s}' (expected one of none, no-mlp, fixed-fusion, hsi-only, lidar-only, shallow-qcnn)"
                ))
            })
    }
}

/// Architecture of one model instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Raw input widths of the two modalities.
    pub d_h: usize,
    pub d_l: usize,
    /// Aligned feature width (fusion qubits for `qcmm`).
    pub d: usize,
    pub hidden: usize,
    pub kernel: KernelName,
    pub strategy: FusionStrategy,
    pub mode: AblationMode,
    pub blocks: usize,
}

impl ModelSpec {
    /// Default architecture for the given inputs; `shallow-qcnn` gets one block.
    pub fn new(d_h: usize, d_l: usize, kernel: KernelName, strategy: FusionStrategy, mode: AblationMode) -> Self {
        Self {
            d_h,
            d_l,
            d: DEFAULT_D,
            hidden: DEFAULT_HIDDEN,
            kernel,
            strategy,
            mode,
            blocks: if mode == AblationMode::ShallowQcnn { 1 } else { DEFAULT_BLOCKS },
        }
    }

    /// Small QCMM model used for gradient checks: 2 raw features per
    /// modality, 3 hidden units, 4 fused qubits and one block.
    pub fn toy(kernel: KernelName) -> Self {
        Self {
            d_h: 2,
            d_l: 2,
            d: 4,
            hidden: 3,
            kernel,
            strategy: FusionStrategy::Qcmm,
            mode: AblationMode::None,
            blocks: 1,
        }
    }

    /// Width of each aligned modality vector.
    pub fn feature_width(&self) -> usize {
        if !self.mode.is_unimodal() && self.strategy.is_baseline() {
            BASELINE_WIDTH
        } else {
            self.d
        }
    }

    pub fn n_qubits(&self) -> usize {
        if !self.mode.is_unimodal() && self.strategy.is_baseline() {
            2 * BASELINE_WIDTH
        } else {
            self.d
        }
    }

    pub fn uses_mlp(&self) -> bool {
        self.mode != AblationMode::NoMlp
    }

    pub fn uses_h(&self) -> bool {
        self.mode != AblationMode::LidarOnly
    }

    pub fn uses_l(&self) -> bool {
        self.mode != AblationMode::HsiOnly
    }

    fn uses_thetas(&self) -> bool {
        !self.mode.is_unimodal() && self.strategy == FusionStrategy::Qcmm
    }

    fn uses_classical(&self) -> bool {
        !self.mode.is_unimodal() && self.strategy == FusionStrategy::Classical
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_h == 0 || self.d_l == 0 || self.hidden == 0 {
            return arg("model widths must be positive");
        }
        let w = self.feature_width();
        if !self.uses_mlp() && ((self.uses_h() && self.d_h < w) || (self.uses_l() && self.d_l < w)) {
            return arg(format!(
                "no-mlp mode encodes the first {w} raw features, but inputs have {} and {}",
                self.d_h, self.d_l
            ));
        }
        if self.mode == AblationMode::FixedFusion && self.strategy != FusionStrategy::Qcmm {
            return arg(format!("fixed-fusion freezes qcmm fusion angles; strategy is {}", self.strategy));
        }
        QcnnConfig::zeros(self.n_qubits(), self.kernel, self.blocks).map(|_| ())
    }
}

/// Named contiguous range of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// All model state. Flat order: `mlp_h`, `mlp_l`, `fusion`, `classical`, `qcnn`,
/// with absent components skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub spec: ModelSpec,
    pub mlp_h: Option<MlpParams>,
    pub mlp_l: Option<MlpParams>,
    pub fusion: Option<FusionParams>,
    pub classical: Option<FusionLayer>,
    pub qcnn: QcnnConfig,
    /// Input scaling for `no-mlp`, fitted on the training split.
    pub scaler_h: Option<MinMaxScaler>,
    pub scaler_l: Option<MinMaxScaler>,
}

impl ParamStore {
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let w = spec.feature_width();
        let mlp = |on: bool, d_in: usize| (on && spec.uses_mlp()).then(|| MlpParams::zeros(d_in, spec.hidden, w));
        Ok(Self {
            mlp_h: mlp(spec.uses_h(), spec.d_h),
            mlp_l: mlp(spec.uses_l(), spec.d_l),
            fusion: spec.uses_thetas().then(|| FusionParams::pass_through(spec.d)),
            classical: spec.uses_classical().then(|| FusionLayer::zeros(spec.d)),
            qcnn: QcnnConfig::zeros(spec.n_qubits(), spec.kernel, spec.blocks)?,
            scaler_h: None,
            scaler_l: None,
            spec: spec.clone(),
        })
    }

    /// Uniform `±sqrt(1/fan_in)` dense layers, QCNN angles uniform in
    /// `[0, 2π)` and fusion angles at `π`.
    pub fn init(spec: &ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut store = Self::zeros(spec)?;
        let w = spec.feature_width();
        if let Some(m) = store.mlp_h.as_mut() {
            *m = MlpParams::init(spec.d_h, spec.hidden, w, rng);
        }
        if let Some(m) = store.mlp_l.as_mut() {
            *m = MlpParams::init(spec.d_l, spec.hidden, w, rng);
        }
        if let Some(c) = store.classical.as_mut() {
            *c = FusionLayer::init(spec.d, rng);
        }
        let angles: Vec<f64> = (0..store.qcnn.param_count())
            .map(|_| rng.random_range(0.0..2.0 * PI))
            .collect();
        store.qcnn.set_flat(&angles)?;
        Ok(store)
    }

    /// Fit the `no-mlp` input scalers on the training split.
    pub fn fit_inputs(&mut self, bundle: &DatasetBundle) -> Result<()> {
        if self.spec.uses_mlp() {
            return Ok(());
        }
        let train = bundle.subset(&bundle.split.train);
        if self.spec.uses_h() {
            self.scaler_h = Some(MinMaxScaler::fit(train.iter().map(|s| s.x_h.as_slice()))?);
        }
        if self.spec.uses_l() {
            self.scaler_l = Some(MinMaxScaler::fit(train.iter().map(|s| s.x_l.as_slice()))?);
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut start = 0;
        let mut push = |name: &str, len: usize| {
            out.push(Segment {
                name: name.to_string(),
                start,
                len,
            });
            start += len;
        };
        if let Some(m) = &self.mlp_h {
            push("mlp_h", m.param_count());
        }
        if let Some(m) = &self.mlp_l {
            push("mlp_l", m.param_count());
        }
        if let Some(f) = &self.fusion {
            push("fusion", f.len());
        }
        if let Some(c) = &self.classical {
            push("classical", c.param_count());
        }
        push("qcnn", self.qcnn.param_count());
        out
    }

    pub fn segment(&self, name: &str) -> Option<Segment> {
        self.layout().into_iter().find(|s| s.name == name)
    }

    pub fn len(&self) -> usize {
        self.layout().iter().map(|s| s.len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        if let Some(m) = &self.mlp_h {
            out.extend(m.flatten());
        }
        if let Some(m) = &self.mlp_l {
            out.extend(m.flatten());
        }
        if let Some(f) = &self.fusion {
            out.extend(&f.thetas);
        }
        if let Some(c) = &self.classical {
            out.extend(c.flatten());
        }
        out.extend(self.qcnn.flatten());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return arg(format!("expected {} parameters, got {}", self.len(), flat.len()));
        }
        for seg in self.layout() {
            let chunk = &flat[seg.range()];
            match seg.name.as_str() {
                "mlp_h" => self.mlp_h.as_mut().expect("segment present").set_flat(chunk)?,
                "mlp_l" => self.mlp_l.as_mut().expect("segment present").set_flat(chunk)?,
                "fusion" => self.fusion.as_mut().expect("segment present").thetas.copy_from_slice(chunk),
                "classical" => self.classical.as_mut().expect("segment present").set_flat(chunk)?,
                _ => self.qcnn.set_flat(chunk)?,
            }
        }
        Ok(())
    }

    /// `false` for parameters the optimiser must leave untouched.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.len()];
        if self.spec.mode == AblationMode::FixedFusion {
            if let Some(seg) = self.segment("fusion") {
                mask[seg.range()].iter_mut().for_each(|m| *m = false);
            }
        }
        mask
    }

    pub fn compile(&self) -> Result<CompiledModel<'_>> {
        CompiledModel::new(self)
    }
}

/// Front-end quantities of one sample, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Front {
    /// Aligned modality vectors (MLP outputs or scaled raw features).
    pub v_h: Option<Vec<f64>>,
    pub v_l: Option<Vec<f64>>,
    /// Classical-fusion output.
    pub fused: Option<Vec<f64>>,
    pub factors: Vec<Mat2>,
}

/// Per-sample backward result before reduction.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: f64,
    /// `∂L/∂ŷ_y`; zero when the probability was clipped.
    pub weight: f64,
    /// Gradient of every non-QCNN segment, laid out like the flat vector prefix.
    pub front: Vec<f64>,
    /// `⊗_j f_j` (before any baseline CNOT network).
    pub state: Operator,
}

/// A [`ParamStore`] with QCNN observables pulled back to the encoded register.
pub struct CompiledModel<'a> {
    pub store: &'a ParamStore,
    pub qcnn: CompiledQcnn,
    cnots: Vec<(usize, usize)>,
    tapes: Vec<ObservableTape>,
    observables: Vec<Operator>,
}

/// `Re Tr(E · m)`.
fn contract(env: &Mat2, m: &Mat2) -> f64 {
    (env[0][0] * m[0][0] + env[0][1] * m[1][0] + env[1][0] * m[0][1] + env[1][1] * m[1][1]).re
}

impl<'a> CompiledModel<'a> {
    pub fn new(store: &'a ParamStore) -> Result<Self> {
        let qcnn = CompiledQcnn::new(&store.qcnn)?;
        let cnots = if store.spec.mode.is_unimodal() {
            Vec::new()
        } else {
            baseline_cnots(store.spec.strategy)
        };
        let tapes = Exec::default().map_range(N_CLASSES, |k| qcnn.observable_tape(k));
        let observables = tapes
            .iter()
            .map(|t| {
                let mut o = t.input.clone();
                apply_cnot_network(&mut o, &cnots, true);
                o
            })
            .collect();
        Ok(Self {
            store,
            qcnn,
            cnots,
            tapes,
            observables,
        })
    }

    /// Observable of class `k` on the encoded product register.
    pub fn observable(&self, k: usize) -> &Operator {
        &self.observables[k]
    }

    fn align(&self, x: &[f64], mlp: &Option<MlpParams>, scaler: &Option<MinMaxScaler>, which: &str) -> Result<Vec<f64>> {
        let w = self.store.spec.feature_width();
        match (mlp, scaler) {
            (Some(m), _) => m.forward(x),
            (None, Some(s)) => {
                if x.len() < w {
                    return arg(format!("{which} input has {} features, need {w}", x.len()));
                }
                Ok(s.transform(&x[..w]))
            }
            (None, None) => Err(QcmmError::Contract(format!(
                "{which} scaler not fitted; call fit_inputs before evaluating a no-mlp model"
            ))),
        }
    }

    pub fn front(&self, sample: &Sample) -> Result<Front> {
        let st = self.store;
        let spec = &st.spec;
        let v_h = if spec.uses_h() {
            Some(self.align(&sample.x_h, &st.mlp_h, &st.scaler_h, "modality h")?)
        } else {
            None
        };
        let v_l = if spec.uses_l() {
            Some(self.align(&sample.x_l, &st.mlp_l, &st.scaler_l, "modality l")?)
        } else {
            None
        };
        let encode = |v: &[f64]| v.iter().map(|&x| encode_factor(x)).collect::<Vec<_>>();
        let mut fused = None;
        let factors = match (&v_h, &v_l) {
            (Some(h), None) => encode(h),
            (None, Some(l)) => encode(l),
            (Some(h), Some(l)) => match spec.strategy {
                FusionStrategy::Qcmm => {
                    let th = &st.fusion.as_ref().expect("qcmm has fusion angles").thetas;
                    (0..spec.d).map(|j| triplet_mat2(h[j], l[j], th[j])).collect()
                }
                FusionStrategy::AllToAll | FusionStrategy::CircuitBlock => [encode(h), encode(l)].concat(),
                FusionStrategy::Classical => {
                    let u = st.classical.as_ref().expect("classical layer").forward(h, l)?;
                    let f = encode(&u);
                    fused = Some(u);
                    f
                }
            },
            (None, None) => unreachable!("at least one modality is always used"),
        };
        if let Some(i) = factors.iter().flatten().flatten().position(|z| !z.re.is_finite()) {
            return Err(QcmmError::Evaluation(format!("non-finite encoded factor entry {i}")));
        }
        Ok(Front { v_h, v_l, fused, factors })
    }

    fn readout(&self, factors: &[Mat2]) -> Result<[f64; N_CLASSES]> {
        let mut out = [0.0; N_CLASSES];
        for (k, o) in self.observables.iter().enumerate() {
            out[k] = product_expectation(o, factors)?.re;
        }
        Ok(out)
    }

    /// Raw (unclamped) class readouts.
    pub fn raw_outputs(&self, sample: &Sample) -> Result<[f64; N_CLASSES]> {
        self.readout(&self.front(sample)?.factors)
    }

    pub fn predict(&self, sample: &Sample) -> Result<Prediction> {
        Ok(Prediction::from_raw(self.raw_outputs(sample)?))
    }

    pub fn sample_loss(&self, sample: &Sample) -> Result<f64> {
        check_label(sample)?;
        let p = self.raw_outputs(sample)?[sample.label];
        Ok(-p.max(PROB_FLOOR).ln())
    }

    /// Mean cross-entropy over `batch`, summed in sample order.
    pub fn batch_loss(&self, batch: &[&Sample]) -> Result<f64> {
        if batch.is_empty() {
            return arg("empty batch");
        }
        let mut total = 0.0;
        for s in batch {
            total += self.sample_loss(s)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Loss and front-end gradient of one sample, scaled by `1/batch_len`.
    pub fn sample_grad(&self, sample: &Sample, batch_len: usize) -> Result<SampleGrad> {
        check_label(sample)?;
        let front = self.front(sample)?;
        let o = &self.observables[sample.label];
        let p = product_expectation(o, &front.factors)?.re;
        let loss = -p.max(PROB_FLOOR).ln();
        let weight = if p > PROB_FLOOR { -1.0 / (batch_len as f64 * p) } else { 0.0 };
        let state = kron_factors(&front.factors)?;
        let prefix: usize = self
            .store
            .layout()
            .iter()
            .filter(|s| s.name != "qcnn")
            .map(|s| s.len)
            .sum();
        let mut grad = vec![0.0; prefix];
        if weight != 0.0 {
            let envs = product_environments(o, &front.factors)?;
            self.front_backward(sample, &front, &envs, weight, &mut grad)?;
        }
        Ok(SampleGrad {
            loss,
            weight,
            front: grad,
            state,
        })
    }

    fn front_backward(&self, sample: &Sample, front: &Front, envs: &[Mat2], w: f64, grad: &mut [f64]) -> Result<()> {
        let st = self.store;
        let spec = &st.spec;
        let layout = st.layout();
        let seg = |name: &str| layout.iter().find(|s| s.name == name).map(Segment::range);
        let enc = |env: &Mat2, v: f64| w * contract(env, &encode_factor_derivative(v));

        let mut dv_h = vec![0.0; spec.feature_width()];
        let mut dv_l = vec![0.0; spec.feature_width()];
        match (&front.v_h, &front.v_l) {
            (Some(h), None) => dv_h.iter_mut().zip(envs.iter().zip(h)).for_each(|(d, (e, &v))| *d = enc(e, v)),
            (None, Some(l)) => dv_l.iter_mut().zip(envs.iter().zip(l)).for_each(|(d, (e, &v))| *d = enc(e, v)),
            (Some(h), Some(l)) => match spec.strategy {
                FusionStrategy::Qcmm => {
                    let th = &st.fusion.as_ref().expect("qcmm has fusion angles").thetas;
                    let r = seg("fusion").expect("fusion segment");
                    for j in 0..spec.d {
                        let [dh, dl, dt] = triplet_derivatives(h[j], l[j], th[j]);
                        dv_h[j] = w * contract(&envs[j], &dh);
                        dv_l[j] = w * contract(&envs[j], &dl);
                        grad[r.start + j] = w * contract(&envs[j], &dt);
                    }
                }
                FusionStrategy::AllToAll | FusionStrategy::CircuitBlock => {
                    let b = BASELINE_WIDTH;
                    for j in 0..b {
                        dv_h[j] = enc(&envs[j], h[j]);
                        dv_l[j] = enc(&envs[b + j], l[j]);
                    }
                }
                FusionStrategy::Classical => {
                    let u = front.fused.as_ref().expect("classical output");
                    let du: Vec<f64> = envs.iter().zip(u).map(|(e, &x)| enc(e, x)).collect();
                    let layer = st.classical.as_ref().expect("classical layer");
                    let (dp, dh, dl) = layer.backward(h, l, &du)?;
                    grad[seg("classical").expect("classical segment")].copy_from_slice(&dp);
                    dv_h = dh;
                    dv_l = dl;
                }
            },
            (None, None) => unreachable!("at least one modality is always used"),
        }
        if let (Some(m), Some(r)) = (&st.mlp_h, seg("mlp_h")) {
            grad[r].copy_from_slice(&m.backward(&sample.x_h, &dv_h)?.params);
        }
        if let (Some(m), Some(r)) = (&st.mlp_l, seg("mlp_l")) {
            grad[r].copy_from_slice(&m.backward(&sample.x_l, &dv_l)?.params);
        }
        Ok(())
    }

    /// QCNN parameter gradient from per-class aggregated states
    /// `R_k = Σ_{i: y_i = k} w_i ⊗f_i`.
    pub fn qcnn_gradient(&self, aggregated: &[Option<Operator>], exec: Exec) -> Result<Vec<f64>> {
        let per_class = exec.map_range(N_CLASSES, |k| -> Result<Option<Vec<f64>>> {
            match &aggregated[k] {
                None => Ok(None),
                Some(r) => {
                    let mut r = r.clone();
                    apply_cnot_network(&mut r, &self.cnots, false);
                    self.qcnn.param_gradient_taped(&r, &self.tapes[k]).map(Some)
                }
            }
        });
        let mut total = vec![0.0; self.qcnn.param_count()];
        for g in per_class {
            if let Some(g) = g? {
                total.iter_mut().zip(g).for_each(|(t, x)| *t += x);
            }
        }
        Ok(total)
    }
}

fn check_label(sample: &Sample) -> Result<()> {
    if sample.label >= N_CLASSES {
        return Err(QcmmError::Data(format!(
            "label {} outside 0..{N_CLASSES}",
            sample.label
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{fuse, fuse_baseline};
    use crate::qcnn::{qcnn_forward, QcnnInput};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(rng: &mut impl Rng, d_h: usize, d_l: usize) -> Sample {
        Sample {
            x_h: (0..d_h).map(|_| rng.random_range(-1.0..1.0)).collect(),
            x_l: (0..d_l).map(|_| rng.random_range(-1.0..1.0)).collect(),
            label: rng.random_range(0..N_CLASSES),
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.as_str().parse::<AblationMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{m}\""));
        }
        assert!("deep".parse::<AblationMode>().is_err());
    }

    #[test]
    fn default_parameter_layout() {
        let spec = ModelSpec::new(8, 8, KernelName::SU4, FusionStrategy::Qcmm, AblationMode::None);
        let store = ParamStore::zeros(&spec).unwrap();
        let names: Vec<String> = store.layout().into_iter().map(|s| s.name).collect();
        assert_eq!(names, ["mlp_h", "mlp_l", "fusion", "qcnn"]);
        assert_eq!(store.len(), 2192 + 8 + 34);

        let base = ModelSpec::new(8, 8, KernelName::SO4, FusionStrategy::CircuitBlock, AblationMode::None);
        let store = ParamStore::zeros(&base).unwrap();
        assert_eq!(store.qcnn.n_qubits_in, 8);
        assert_eq!(store.mlp_h.as_ref().unwrap().d_out(), 4);
        assert!(store.fusion.is_none());

        let cls = ModelSpec::new(8, 8, KernelName::SO4, FusionStrategy::Classical, AblationMode::None);
        assert_eq!(ParamStore::zeros(&cls).unwrap().segment("classical").unwrap().len, 136);

        let uni = ModelSpec::new(8, 8, KernelName::SO4, FusionStrategy::Qcmm, AblationMode::HsiOnly);
        let names: Vec<String> = ParamStore::zeros(&uni).unwrap().layout().into_iter().map(|s| s.name).collect();
        assert_eq!(names, ["mlp_h", "qcnn"]);

        let shallow = ModelSpec::new(8, 8, KernelName::SO4, FusionStrategy::Qcmm, AblationMode::ShallowQcnn);
        assert_eq!(ParamStore::zeros(&shallow).unwrap().qcnn.blocks.len(), 1);

        let bad = ModelSpec::new(8, 8, KernelName::SO4, FusionStrategy::Classical, AblationMode::FixedFusion);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn flatten_round_trip_and_mask() {
        let spec = ModelSpec::new(5, 3, KernelName::U15, FusionStrategy::Qcmm, AblationMode::FixedFusion);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = ParamStore::init(&spec, &mut rng).unwrap();
        assert!(store.fusion.as_ref().unwrap().thetas.iter().all(|&t| t == PI));
        let flat = store.flatten();
        let mut other = ParamStore::zeros(&spec).unwrap();
        other.set_flat(&flat).unwrap();
        assert_eq!(other, store);
        let mask = store.trainable_mask();
        let fusion = store.segment("fusion").unwrap();
        assert_eq!(mask.iter().filter(|m| !**m).count(), 8);
        assert!(mask[fusion.range()].iter().all(|m| !m));
    }

    #[test]
    fn qcmm_prediction_matches_direct_path() {
        let spec = ModelSpec::new(5, 6, KernelName::SO4, FusionStrategy::Qcmm, AblationMode::None);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::init(&spec, &mut rng).unwrap();
        store.fusion = Some(FusionParams::new((0..8).map(|_| rng.random_range(0.0..PI)).collect()));
        let model = store.compile().unwrap();
        for _ in 0..3 {
            let s = sample(&mut rng, 5, 6);
            let v_h = store.mlp_h.as_ref().unwrap().forward(&s.x_h).unwrap();
            let v_l = store.mlp_l.as_ref().unwrap().forward(&s.x_l).unwrap();
            let fused = fuse(&v_h, &v_l, store.fusion.as_ref().unwrap()).unwrap();
            let direct = qcnn_forward(&QcnnInput::from(&fused), &store.qcnn).unwrap();
            let got = model.predict(&s).unwrap();
            for k in 0..N_CLASSES {
                assert!((got.probs[k] - direct.probs[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn baseline_prediction_matches_direct_path() {
        for strategy in [FusionStrategy::AllToAll, FusionStrategy::CircuitBlock] {
            let spec = ModelSpec::new(3, 4, KernelName::SU4, strategy, AblationMode::None);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let store = ParamStore::init(&spec, &mut rng).unwrap();
            let model = store.compile().unwrap();
            let s = sample(&mut rng, 3, 4);
            let v_h = store.mlp_h.as_ref().unwrap().forward(&s.x_h).unwrap();
            let v_l = store.mlp_l.as_ref().unwrap().forward(&s.x_l).unwrap();
            let state = fuse_baseline(strategy, &v_h, &v_l).unwrap();
            let direct = qcnn_forward(&QcnnInput::Pure(state), &store.qcnn).unwrap();
            let got = model.predict(&s).unwrap();
            for k in 0..N_CLASSES {
                assert!((got.probs[k] - direct.probs[k]).abs() < 1e-10, "{strategy}");
            }
        }
    }

    #[test]
    fn no_mlp_needs_fitted_scalers() {
        let spec = ModelSpec::new(8, 8, KernelName::SO4, FusionStrategy::Qcmm, AblationMode::NoMlp);
        let store = ParamStore::zeros(&spec).unwrap();
        assert!(store.mlp_h.is_none() && store.mlp_l.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample(&mut rng, 8, 8);
        assert!(matches!(store.compile().unwrap().predict(&s), Err(QcmmError::Contract(_))));
    }

    #[test]
    fn batch_loss_is_mean_of_sample_losses() {
        let spec = ModelSpec::toy(KernelName::SO4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let store = ParamStore::init(&spec, &mut rng).unwrap();
        let model = store.compile().unwrap();
        let batch: Vec<Sample> = (0..5).map(|_| sample(&mut rng, 2, 2)).collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let mean = batch.iter().map(|s| model.sample_loss(s).unwrap()).sum::<f64>() / 5.0;
        assert!((model.batch_loss(&refs).unwrap() - mean).abs() < 1e-15);
        let probs = model.predict(&batch[0]).unwrap().probs;
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
