//! Per-modality MLP aligners, PCA, and the classical-fusion baseline layer.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, QcmmError, Result};

/// Affine map `W x + b`, weights row-major `d_out × d_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub d_in: usize,
    pub d_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            w: vec![0.0; d_in * d_out],
            b: vec![0.0; d_out],
        }
    }

    /// Uniform in `±sqrt(1 / d_in)` for weights and biases.
    pub fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        let w = draw(d_in * d_out);
        let b = draw(d_out);
        Self { d_in, d_out, w, b }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in {
            return arg(format!("layer expects {} inputs, got {}", self.d_in, x.len()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self
            .w
            .chunks_exact(self.d_in)
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect())
    }

    /// Accumulates `dW`, `db` into `grad` (laid out as `w` then `b`) and
    /// returns `dx`.
    fn backward_into(&self, x: &[f64], upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (gw, gb) = grad.split_at_mut(self.w.len());
        let mut dx = vec![0.0; self.d_in];
        for (o, &u) in upstream.iter().enumerate() {
            gb[o] += u;
            if u == 0.0 {
                continue;
            }
            let row = &self.w[o * self.d_in..(o + 1) * self.d_in];
            let grow = &mut gw[o * self.d_in..(o + 1) * self.d_in];
            for i in 0..self.d_in {
                grow[i] += u * x[i];
                dx[i] += u * row[i];
            }
        }
        dx
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.b);
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let (w, b) = flat.split_at(self.w.len());
        self.w.copy_from_slice(w);
        self.b.copy_from_slice(b);
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// `W2 · ReLU(W1 x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGradient {
    /// `W1, b1, W2, b2`, matching [`MlpParams::flatten`].
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(d_in: usize, k: usize, d_out: usize) -> Self {
        Self {
            hidden: Dense::zeros(d_in, k),
            output: Dense::zeros(k, d_out),
        }
    }

    pub fn init(d_in: usize, k: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let hidden = Dense::init(d_in, k, rng);
        let output = Dense::init(k, d_out, rng);
        Self { hidden, output }
    }

    pub fn d_in(&self) -> usize {
        self.hidden.d_in
    }

    pub fn d_out(&self) -> usize {
        self.output.d_out
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.output.param_count()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.hidden.flatten_into(&mut out);
        self.output.flatten_into(&mut out);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return arg(format!(
                "expected {} mlp parameters, got {}",
                self.param_count(),
                flat.len()
            ));
        }
        let (h, o) = flat.split_at(self.hidden.param_count());
        self.hidden.set_flat(h);
        self.output.set_flat(o);
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.hidden.forward(x)?;
        relu(&mut h);
        self.output.forward(&h)
    }

    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<MlpGradient> {
        if upstream.len() != self.d_out() {
            return arg(format!(
                "upstream gradient has {} entries, expected {}",
                upstream.len(),
                self.d_out()
            ));
        }
        let mut pre = self.hidden.forward(x)?;
        let mut act = pre.clone();
        relu(&mut act);
        let mut params = vec![0.0; self.param_count()];
        let (gh, go) = params.split_at_mut(self.hidden.param_count());
        let mut dh = self.output.backward_into(&act, upstream, go);
        for (d, p) in dh.iter_mut().zip(&mut pre) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
        let input = self.hidden.backward_into(x, &dh, gh);
        Ok(MlpGradient { params, input })
    }
}

pub fn mlp_forward(x: &[f64], p: &MlpParams) -> Result<Vec<f64>> {
    p.forward(x)
}

pub fn mlp_backward(x: &[f64], p: &MlpParams, upstream: &[f64]) -> Result<MlpGradient> {
    p.backward(x, upstream)
}

/// Single `ReLU(W [v_h; v_l] + b)` layer of the classical-fusion baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionLayer {
    pub layer: Dense,
}

impl FusionLayer {
    pub fn zeros(d: usize) -> Self {
        Self {
            layer: Dense::zeros(2 * d, d),
        }
    }

    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        Self {
            layer: Dense::init(2 * d, d, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer.param_count()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.layer.flatten_into(&mut out);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return arg("fusion layer parameter count mismatch");
        }
        self.layer.set_flat(flat);
        Ok(())
    }

    pub fn forward(&self, v_h: &[f64], v_l: &[f64]) -> Result<Vec<f64>> {
        let x = [v_h, v_l].concat();
        let mut y = self.layer.forward(&x)?;
        relu(&mut y);
        Ok(y)
    }

    /// Returns `(param grads, d v_h, d v_l)`.
    pub fn backward(&self, v_h: &[f64], v_l: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let x = [v_h, v_l].concat();
        let pre = self.layer.forward(&x)?;
        let gated: Vec<f64> = upstream
            .iter()
            .zip(&pre)
            .map(|(&u, &p)| if p > 0.0 { u } else { 0.0 })
            .collect();
        let mut params = vec![0.0; self.param_count()];
        let dx = self.layer.backward_into(&x, &gated, &mut params);
        let (dh, dl) = dx.split_at(v_h.len());
        Ok((params, dh.to_vec(), dl.to_vec()))
    }
}

pub fn classical_fusion(v_h: &[f64], v_l: &[f64], params: &FusionLayer) -> Result<Vec<f64>> {
    if v_h.len() != v_l.len() || v_h.len() + v_l.len() != params.layer.d_in {
        return arg(format!(
            "classical fusion expects two {}-vectors",
            params.layer.d_in / 2
        ));
    }
    params.forward(v_h, v_l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `d` unit rows of length `B`, eigenvalue-descending.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

/// Widths above this use subspace iteration instead of a full
/// eigendecomposition of the covariance.
pub const PCA_DENSE_LIMIT: usize = 512;
const PCA_ITERS: usize = 300;

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn input_width(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return arg(format!("pca expects {} inputs, got {}", self.mean.len(), x.len()));
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect())
    }
}

fn centered(data: &[Vec<f64>]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = data.len();
    let b = data.first().map_or(0, Vec::len);
    if data.iter().any(|r| r.len() != b) {
        return Err(QcmmError::Fit("ragged input rows".into()));
    }
    let mut mean = vec![0.0; b];
    for row in data {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let x = DMatrix::from_fn(n, b, |i, j| data[i][j] - mean[j]);
    Ok((x, mean))
}

/// Top-`d` eigenpairs of `XᵀX / (n-1)` by blocked subspace iteration.
fn subspace_eigs(x: &DMatrix<f64>, d: usize) -> (Vec<f64>, DMatrix<f64>) {
    let (n, b) = x.shape();
    let q = (d + 8).min(b);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = DMatrix::from_fn(b, q, |_, _| rng.random_range(-1.0..1.0));
    let scale = 1.0 / (n as f64 - 1.0);
    let mut last = vec![0.0; d];
    for _ in 0..PCA_ITERS {
        let y = x.transpose() * (x * &v) * scale;
        v = y.qr().q();
        let small = v.transpose() * (x.transpose() * (x * &v)) * scale;
        let eig = SymmetricEigen::new(small);
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| b.total_cmp(a));
        let done = vals[..d]
            .iter()
            .zip(&last)
            .all(|(a, b)| (a - b).abs() <= 1e-13 * vals[0].abs().max(1e-300));
        last = vals[..d].to_vec();
        if done {
            break;
        }
    }
    let small = v.transpose() * (x.transpose() * (x * &v)) * scale;
    let eig = SymmetricEigen::new(small);
    (eig.eigenvalues.iter().copied().collect(), &v * eig.eigenvectors)
}

pub fn pca_fit(data: &[Vec<f64>], d: usize) -> Result<PcaModel> {
    let n = data.len();
    let b = data.first().map_or(0, Vec::len);
    if d == 0 || n <= d || b < d {
        return Err(QcmmError::Fit(format!(
            "pca needs more than {d} samples of width at least {d}, got {n}×{b}"
        )));
    }
    let (x, mean) = centered(data)?;
    let (values, vectors) = if b <= PCA_DENSE_LIMIT {
        let cov = x.transpose() * &x / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        (eig.eigenvalues.iter().copied().collect::<Vec<_>>(), eig.eigenvectors)
    } else {
        subspace_eigs(&x, d)
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let top = values[order[0]].max(0.0);
    let floor = top * 1e-12 * b as f64;
    let nonzero = order.iter().filter(|&&i| values[i] > floor).count();
    if top <= 0.0 || nonzero < d {
        return Err(QcmmError::Fit(format!(
            "covariance has {nonzero} nonzero eigenvalues, {d} required"
        )));
    }
    let mut components = Vec::with_capacity(d);
    let mut eigenvalues = Vec::with_capacity(d);
    for &i in order.iter().take(d) {
        let col: DVector<f64> = vectors.column(i).into_owned();
        let norm = col.norm();
        let mut row: Vec<f64> = col.iter().map(|v| v / norm).collect();
        let pivot = row
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            for v in &mut row {
                *v = -*v;
            }
        }
        components.push(row);
        eigenvalues.push(values[i]);
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
    })
}

pub fn pca_transform(model: &PcaModel, x: &[f64]) -> Result<Vec<f64>> {
    model.transform(x)
}
