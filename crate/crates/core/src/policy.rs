//! Actor-critic network and its tanh-squashed Gaussian action head.
//!
//! Layout: `obs -> tanh(hidden) -> tanh(hidden)` shared trunk, a linear
//! action-mean head, a state-independent log standard deviation, and a linear
//! value head. All parameters live in one flat `f64` buffer so that
//! optimizers, gradient checks and serialization treat them uniformly.

use std::fs;
use std::io::{self, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gym::Observation;
use crate::{Control, VehicleParams};

pub const ACT_DIM: usize = 2;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

const MAGIC: &[u8; 4] = b"KPLW";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a weights file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported weights format version {0} (expected {WEIGHTS_FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("weights file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unexpected tensor `{found}` (expected `{expected}`)")]
    UnexpectedTensor { expected: String, found: String },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("observation has {found} entries, network expects {expected}")]
    ObsDim { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub obs_dim: usize,
    pub hidden: usize,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self {
            obs_dim: 49,
            hidden: 256,
        }
    }
}

/// Tensor index into [`PolicyShape::tensors`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    W1 = 0,
    B1,
    W2,
    B2,
    MeanW,
    MeanB,
    LogStd,
    ValueW,
    ValueB,
}

pub const TENSOR_NAMES: [&str; 9] = [
    "trunk.0.weight",
    "trunk.0.bias",
    "trunk.1.weight",
    "trunk.1.bias",
    "actor.mean.weight",
    "actor.mean.bias",
    "actor.log_std",
    "critic.weight",
    "critic.bias",
];

impl PolicyShape {
    /// `(name, dims)` for every tensor, in storage order.
    pub fn tensors(&self) -> [(&'static str, Vec<usize>); 9] {
        let (i, h) = (self.obs_dim, self.hidden);
        let dims = [
            vec![h, i],
            vec![h],
            vec![h, h],
            vec![h],
            vec![ACT_DIM, h],
            vec![ACT_DIM],
            vec![ACT_DIM],
            vec![1, h],
            vec![1],
        ];
        let mut k = 0;
        dims.map(|d| {
            k += 1;
            (TENSOR_NAMES[k - 1], d)
        })
    }

    fn ranges(&self) -> [Range<usize>; 9] {
        let mut off = 0;
        self.tensors().map(|(_, d)| {
            let n: usize = d.iter().product();
            off += n;
            off - n..off
        })
    }

    pub fn n_params(&self) -> usize {
        self.ranges()[8].end
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
    pub mean: Array2<f64>,
    pub value: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    ranges: [Range<usize>; 9],
    data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            ranges: shape.ranges(),
            data: vec![0.0; shape.n_params()],
        }
    }

    /// Orthogonal initialization: gain `sqrt(2)` for the trunk, `0.01` for
    /// the action mean, `1` for the value head; zero biases.
    pub fn init<R: Rng + ?Sized>(shape: PolicyShape, log_std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let (i, h) = (shape.obs_dim, shape.hidden);
        p.tensor_mut(Tensor::W1).copy_from_slice(&orthogonal(h, i, 2f64.sqrt(), rng));
        p.tensor_mut(Tensor::W2).copy_from_slice(&orthogonal(h, h, 2f64.sqrt(), rng));
        p.tensor_mut(Tensor::MeanW).copy_from_slice(&orthogonal(ACT_DIM, h, 0.01, rng));
        p.tensor_mut(Tensor::ValueW).copy_from_slice(&orthogonal(1, h, 1.0, rng));
        p.tensor_mut(Tensor::LogStd).fill(log_std.clamp(LOG_STD_MIN, LOG_STD_MAX));
        p
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn range(&self, t: Tensor) -> Range<usize> {
        self.ranges[t as usize].clone()
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.data[self.range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.range(t);
        &mut self.data[r]
    }

    fn matrix(&self, t: Tensor, rows: usize) -> ArrayView2<'_, f64> {
        let s = self.tensor(t);
        ArrayView2::from_shape((rows, s.len() / rows), s).expect("tensor shape")
    }

    fn vector(&self, t: Tensor) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.tensor(t))
    }

    pub fn log_std(&self) -> [f64; ACT_DIM] {
        let s = self.tensor(Tensor::LogStd);
        [s[0], s[1]]
    }

    pub fn clamp_log_std(&mut self) {
        for v in self.tensor_mut(Tensor::LogStd) {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batched forward pass; rows of `x` are observations.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Forward {
        assert_eq!(x.ncols(), self.shape.obs_dim, "observation width");
        let h = self.shape.hidden;
        let mut h1 = x.dot(&self.matrix(Tensor::W1, h).t()) + self.vector(Tensor::B1);
        h1.mapv_inplace(f64::tanh);
        let mut h2 = h1.dot(&self.matrix(Tensor::W2, h).t()) + self.vector(Tensor::B2);
        h2.mapv_inplace(f64::tanh);
        let mean = h2.dot(&self.matrix(Tensor::MeanW, ACT_DIM).t()) + self.vector(Tensor::MeanB);
        let value = h2.dot(&self.vector(Tensor::ValueW)) + self.tensor(Tensor::ValueB)[0];
        Forward { h1, h2, mean, value }
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss's partial derivatives with respect to the network outputs.
    ///
    /// With `value_into_trunk` false the value head still learns but its
    /// error does not reach the shared trunk.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        fwd: &Forward,
        d_mean: ArrayView2<'_, f64>,
        d_value: ArrayView1<'_, f64>,
        d_log_std: [f64; ACT_DIM],
        value_into_trunk: bool,
    ) -> Vec<f64> {
        let h = self.shape.hidden;
        let mut grad = vec![0.0; self.len()];
        let mut put = |t: Tensor, src: &mut dyn Iterator<Item = f64>| {
            for (g, v) in grad[self.range(t)].iter_mut().zip(src) {
                *g = v;
            }
        };
        put(Tensor::MeanW, &mut d_mean.t().dot(&fwd.h2).into_iter());
        put(Tensor::MeanB, &mut d_mean.sum_axis(Axis(0)).into_iter());
        put(Tensor::LogStd, &mut d_log_std.into_iter());
        put(Tensor::ValueW, &mut d_value.dot(&fwd.h2).into_iter());
        put(Tensor::ValueB, &mut std::iter::once(d_value.sum()));

        let mut dz2 = d_mean.dot(&self.matrix(Tensor::MeanW, ACT_DIM));
        if value_into_trunk {
            let vw = self.vector(Tensor::ValueW);
            for (mut row, dv) in dz2.rows_mut().into_iter().zip(d_value.iter()) {
                row.scaled_add(*dv, &vw);
            }
        }
        dz2.zip_mut_with(&fwd.h2, |d, a| *d *= 1.0 - a * a);
        put(Tensor::W2, &mut dz2.t().dot(&fwd.h1).into_iter());
        put(Tensor::B2, &mut dz2.sum_axis(Axis(0)).into_iter());

        let mut dz1 = dz2.dot(&self.matrix(Tensor::W2, h));
        dz1.zip_mut_with(&fwd.h1, |d, a| *d *= 1.0 - a * a);
        put(Tensor::W1, &mut dz1.t().dot(&x).into_iter());
        put(Tensor::B1, &mut dz1.sum_axis(Axis(0)).into_iter());
        grad
    }

    /// Action distribution and value estimate for one observation.
    pub fn forward(&self, obs: &[f64]) -> Result<(ActionDist, f64), PolicyError> {
        if obs.len() != self.shape.obs_dim {
            return Err(PolicyError::ObsDim {
                expected: self.shape.obs_dim,
                found: obs.len(),
            });
        }
        let x = ArrayView2::from_shape((1, obs.len()), obs).expect("row vector");
        let f = self.forward_batch(x);
        Ok((
            ActionDist {
                mean: [f.mean[[0, 0]], f.mean[[0, 1]]],
                log_std: self.log_std(),
            },
            f.value[0],
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PolicyError> {
        let path = path.as_ref();
        let io_err = |source| PolicyError::Io {
            path: path.to_path_buf(),
            source,
        };
        fs::write(path, self.to_bytes()).map_err(io_err)?;
        let manifest = manifest_path(path);
        fs::write(&manifest, self.manifest()).map_err(|source| PolicyError::Io { path: manifest, source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| PolicyError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable tensor listing written next to the weights file.
    pub fn manifest(&self) -> String {
        let mut s = format!(
            "format {WEIGHTS_FORMAT_VERSION}\nobs_dim {}\nhidden {}\n",
            self.shape.obs_dim, self.shape.hidden
        );
        for (name, dims) in self.shape.tensors() {
            let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("{name} [{}]\n", dims.join(", ")));
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.len());
        out.extend_from_slice(MAGIC);
        out.write_all(&WEIGHTS_FORMAT_VERSION.to_le_bytes()).unwrap();
        out.write_all(&(self.shape.obs_dim as u32).to_le_bytes()).unwrap();
        out.write_all(&(self.shape.hidden as u32).to_le_bytes()).unwrap();
        out.write_all(&(TENSOR_NAMES.len() as u32).to_le_bytes()).unwrap();
        for (k, (name, dims)) in self.shape.tensors().into_iter().enumerate() {
            out.write_all(&(name.len() as u32).to_le_bytes()).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_all(&(dims.len() as u32).to_le_bytes()).unwrap();
            for d in &dims {
                out.write_all(&(*d as u64).to_le_bytes()).unwrap();
            }
            for v in &self.data[self.ranges[k].clone()] {
                out.write_all(&v.to_le_bytes()).unwrap();
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(PolicyError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != WEIGHTS_FORMAT_VERSION {
            return Err(PolicyError::UnsupportedVersion(version));
        }
        let shape = PolicyShape {
            obs_dim: r.u32("header")? as usize,
            hidden: r.u32("header")? as usize,
        };
        let n = r.u32("header")? as usize;
        if n != TENSOR_NAMES.len() {
            return Err(PolicyError::ShapeMismatch {
                name: "<tensor count>".into(),
                expected: vec![TENSOR_NAMES.len()],
                found: vec![n],
            });
        }
        let mut p = Self::zeros(shape);
        for (k, (name, dims)) in shape.tensors().into_iter().enumerate() {
            let len = r.u32("tensor name")? as usize;
            let found = String::from_utf8_lossy(r.take(len, "tensor name")?).into_owned();
            if found != name {
                return Err(PolicyError::UnexpectedTensor {
                    expected: name.into(),
                    found,
                });
            }
            let ndim = r.u32("tensor rank")? as usize;
            let mut found_dims = Vec::with_capacity(ndim);
            for _ in 0..ndim.min(8) {
                found_dims.push(r.u64("tensor dims")? as usize);
            }
            if found_dims != dims {
                return Err(PolicyError::ShapeMismatch {
                    name: name.into(),
                    expected: dims,
                    found: found_dims,
                });
            }
            let range = p.ranges[k].clone();
            for v in &mut p.data[range] {
                *v = f64::from_le_bytes(r.take(8, "tensor data")?.try_into().unwrap());
            }
        }
        if r.pos != bytes.len() {
            return Err(PolicyError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(p)
    }
}

pub fn manifest_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], PolicyError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(PolicyError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, PolicyError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, PolicyError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Row-major `rows x cols` matrix with orthonormal rows or columns
/// (whichever is shorter), times `gain`.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (n, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut m = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = if rows <= cols { basis[r][c] } else { basis[c][r] };
            m[r * cols + c] = gain * v;
        }
    }
    m
}

/// A draw from the action head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSample {
    /// Pre-squash Gaussian sample.
    pub z: [f64; ACT_DIM],
    /// `tanh(z)`, each entry in `(-1, 1)`.
    pub unit: [f64; ACT_DIM],
    /// Log-density of `unit`.
    pub log_prob: f64,
}

/// Diagonal Gaussian over `z`, squashed through `tanh`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionDist {
    pub mean: [f64; ACT_DIM],
    pub log_std: [f64; ACT_DIM],
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `ln(1 - tanh(z)^2)`, stable for large `|z|`.
pub fn log_squash_jacobian(z: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - z.abs() - (-2.0 * z.abs()).exp().ln_1p())
}

impl ActionDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ActionSample {
        let z: [f64; ACT_DIM] = std::array::from_fn(|i| {
            let e: f64 = rng.sample(StandardNormal);
            self.mean[i] + self.log_std[i].exp() * e
        });
        ActionSample {
            z,
            unit: z.map(f64::tanh),
            log_prob: self.log_prob(&z),
        }
    }

    /// Log-density of the pre-squash sample `z`.
    pub fn gaussian_log_prob(&self, z: &[f64; ACT_DIM]) -> f64 {
        (0..ACT_DIM)
            .map(|i| {
                let u = (z[i] - self.mean[i]) / self.log_std[i].exp();
                -0.5 * u * u - self.log_std[i] - HALF_LN_2PI
            })
            .sum()
    }

    /// Log-density of the squashed action `tanh(z)`.
    pub fn log_prob(&self, z: &[f64; ACT_DIM]) -> f64 {
        self.gaussian_log_prob(z) - z.iter().map(|&v| log_squash_jacobian(v)).sum::<f64>()
    }

    /// Entropy of the pre-squash Gaussian.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| l + 0.5 + HALF_LN_2PI).sum()
    }

    pub fn mode(&self) -> [f64; ACT_DIM] {
        self.mean.map(f64::tanh)
    }
}

/// Scales a unit action onto the vehicle's control bounds.
pub fn unit_to_control(u: [f64; ACT_DIM], p: &VehicleParams) -> Control {
    Control::new(u[0] * p.a_max, u[1] * p.omega_max)
}

/// Stochastic action for the given observation, with its log-density.
pub fn sample_action<R: Rng + ?Sized>(
    params: &PolicyParams,
    obs: &Observation,
    p: &VehicleParams,
    rng: &mut R,
) -> Result<(Control, f64), PolicyError> {
    let (dist, _) = params.forward(&obs.to_vec())?;
    let s = dist.sample(rng);
    Ok((unit_to_control(s.unit, p), s.log_prob))
}

/// Deterministic (mean) action.
pub fn mean_action(params: &PolicyParams, obs: &Observation, p: &VehicleParams) -> Result<Control, PolicyError> {
    let (dist, _) = params.forward(&obs.to_vec())?;
    Ok(unit_to_control(dist.mode(), p))
}

/// Anything that maps observations to controls.
pub trait Actor: Sync {
    fn act(&self, obs: &Observation, p: &VehicleParams) -> Control;
}

impl Actor for PolicyParams {
    fn act(&self, obs: &Observation, p: &VehicleParams) -> Control {
        mean_action(self, obs, p).expect("observation width matches the network")
    }
}

impl<A: Actor + ?Sized> Actor for &A {
    fn act(&self, obs: &Observation, p: &VehicleParams) -> Control {
        (**self).act(obs, p)
    }
}

impl<A: Actor + ?Sized + Send> Actor for Box<A> {
    fn act(&self, obs: &Observation, p: &VehicleParams) -> Control {
        (**self).act(obs, p)
    }
}
