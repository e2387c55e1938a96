//! Feed-forward regressor (Linear, BatchNorm, SiLU, Dropout per hidden layer)
//! trained by minibatch AdamW with early stopping, plus the two-stage residual
//! safeguard.
//!
//! All parameters live in one flat vector; each layer reads its weights,
//! bias and batch-norm affine terms from fixed offsets. Gradients share the
//! same layout, so the optimizer, the finite-difference check and the
//! checkpoint format all work on plain slices.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const CHECKPOINT_MAGIC: &[u8; 5] = b"SEMLP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// Hidden widths; empty gives a linear model.
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// First-moment decay; `0` disables momentum.
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        MlpSpec {
            input_dim: 1,
            hidden: vec![128, 128, 128],
            batch_norm: true,
            dropout: 0.1,
            epochs: 300,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.0,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 20,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl MlpSpec {
    pub fn with_input_dim(&self, input_dim: usize) -> MlpSpec {
        MlpSpec { input_dim, ..self.clone() }
    }

    pub fn with_seed(&self, seed: u64) -> MlpSpec {
        MlpSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.input_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return bad("learning rate must be positive and weight decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid optimizer moments");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return bad("validation fraction must lie in (0, 0.5)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    /// Offsets of the batch-norm scale and shift.
    bn: Option<(usize, usize)>,
}

fn build_layout(spec: &MlpSpec) -> (Vec<Layer>, usize) {
    let mut dims = vec![spec.input_dim];
    dims.extend(&spec.hidden);
    dims.push(1);
    let mut off = 0;
    let mut layers = Vec::new();
    for (l, win) in dims.windows(2).enumerate() {
        let (fi, fo) = (win[0], win[1]);
        let w = off;
        off += fi * fo;
        let b = off;
        off += fo;
        let hidden = l + 2 < dims.len();
        let bn = (hidden && spec.batch_norm).then(|| {
            let g = off;
            off += 2 * fo;
            (g, g + fo)
        });
        layers.push(Layer { fan_in: fi, fan_out: fo, w, b, bn });
    }
    (layers, off)
}

/// Affine standardization of columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    fn fit(a: ArrayView2<f64>) -> Scaler {
        let n = a.nrows() as f64;
        let mut mean = Vec::with_capacity(a.ncols());
        let mut std = Vec::with_capacity(a.ncols());
        for c in a.columns() {
            let m = c.sum() / n;
            let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            std.push(if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
        }
        Scaler { mean, std }
    }

    fn identity(d: usize) -> Scaler {
        Scaler { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    fn apply(&self, a: ArrayView2<f64>) -> Array2<f64> {
        let mut out = a.to_owned();
        for (j, mut c) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            c.mapv_inplace(|x| (x - m) / s);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: MlpSpec,
    x_scaler: Scaler,
    y_mean: f64,
    y_std: f64,
    best_epoch: usize,
    history: Vec<EpochRecord>,
    n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    spec: MlpSpec,
    layers: Vec<Layer>,
    params: Vec<f64>,
    /// Batch-norm running mean and variance per hidden layer.
    running: Vec<(Array1<f64>, Array1<f64>)>,
    x_scaler: Scaler,
    y_mean: f64,
    y_std: f64,
    history: Vec<EpochRecord>,
    best_epoch: usize,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations kept for the backward pass of one hidden layer.
struct Cache {
    /// Normalized pre-activation (batch-norm only).
    xhat: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
    /// Input of the SiLU and its sigmoid.
    pre: Array2<f64>,
    sig: Array2<f64>,
    /// Dropout keep mask scaled by `1 / (1 - p)`.
    mask: Option<Array2<f64>>,
    /// Output of the layer after dropout.
    out: Array2<f64>,
}

enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng, dropout: bool, update_running: bool },
}

impl MlpModel {
    /// Untrained model with PyTorch-style uniform initialization.
    pub fn init(spec: &MlpSpec) -> Result<MlpModel> {
        spec.validate()?;
        let (layers, n) = build_layout(spec);
        let mut params = vec![0.0; n];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for l in &layers {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for v in &mut params[l.w..l.b + l.fan_out] {
                *v = rng.random_range(-bound..bound);
            }
            if let Some((g, _)) = l.bn {
                params[g..g + l.fan_out].fill(1.0);
            }
        }
        let running = layers
            .iter()
            .filter(|l| l.bn.is_some())
            .map(|l| (Array1::zeros(l.fan_out), Array1::ones(l.fan_out)))
            .collect();
        Ok(MlpModel {
            spec: spec.clone(),
            layers,
            params,
            running,
            x_scaler: Scaler::identity(spec.input_dim),
            y_mean: 0.0,
            y_std: 1.0,
            history: Vec::new(),
            best_epoch: 0,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.params.len(), p.len())));
        }
        self.params.copy_from_slice(p);
        Ok(())
    }

    /// Sets the output scaling `y = y_mean + y_std * net(x)`.
    pub fn set_target_scaling(&mut self, y_mean: f64, y_std: f64) {
        self.y_mean = y_mean;
        self.y_std = y_std;
    }

    fn weight(&self, l: &Layer) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((l.fan_in, l.fan_out), &self.params[l.w..l.b]).unwrap()
    }

    fn slice(&self, off: usize, len: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[off..off + len])
    }

    /// Forward pass on already-standardized inputs. Returns the output column
    /// and per-hidden-layer caches.
    fn forward(&mut self, xs: ArrayView2<f64>, mut mode: Mode) -> (Array1<f64>, Vec<Cache>) {
        let mut h = xs.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        let mut bn_idx = 0;
        for (li, l) in self.layers.clone().iter().enumerate() {
            let mut a = h.dot(&self.weight(l));
            a += &self.slice(l.b, l.fan_out);
            if li == last {
                return (a.column(0).to_owned(), caches);
            }
            let (pre, xhat, inv_std) = match l.bn {
                Some((g, be)) => {
                    let (centered, var) = match &mut mode {
                        Mode::Train { update_running, .. } => {
                            let m = a.nrows() as f64;
                            let mean = a.sum_axis(Axis(0)) / m;
                            let centered = a - &mean;
                            let var = centered.map(|v| v * v).sum_axis(Axis(0)) / m;
                            if *update_running {
                                let (rm, rv) = &mut self.running[bn_idx];
                                let unbiased = &var * (m / (m - 1.0).max(1.0));
                                rm.zip_mut_with(&mean, |r, v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
                                rv.zip_mut_with(&unbiased, |r, v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
                            }
                            (centered, var)
                        }
                        Mode::Eval => (a - &self.running[bn_idx].0, self.running[bn_idx].1.clone()),
                    };
                    bn_idx += 1;
                    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    let xhat = centered * &inv_std;
                    let pre = &xhat * &self.slice(g, l.fan_out) + &self.slice(be, l.fan_out);
                    (pre, Some(xhat), Some(inv_std))
                }
                None => (a, None, None),
            };
            let sig = pre.mapv(sigmoid);
            let mut out = &pre * &sig;
            let mask = match &mut mode {
                Mode::Train { rng, dropout: true, .. } if self.spec.dropout > 0.0 => {
                    let keep = 1.0 - self.spec.dropout;
                    let cut = (keep * u32::MAX as f64) as u32;
                    let m = Array2::from_shape_simple_fn(out.raw_dim(), || {
                        if rng.random::<u32>() < cut {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    out *= &m;
                    Some(m)
                }
                _ => None,
            };
            caches.push(Cache { xhat, inv_std, pre, sig, mask, out: out.clone() });
            h = out;
        }
        unreachable!("network has an output layer")
    }

    /// Gradient of `0.5 mean(r^2)` given `dout = r / m`. `train_bn` selects the
    /// batch-statistics form of the batch-norm derivative.
    fn backward(&self, xs: ArrayView2<f64>, caches: &[Cache], dout: Array1<f64>, train_bn: bool) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let m = xs.nrows() as f64;
        let mut dh = dout.insert_axis(Axis(1));
        for li in (0..self.layers.len()).rev() {
            let l = self.layers[li];
            let input = if li == 0 { xs } else { caches[li - 1].out.view() };
            let da = if li + 1 == self.layers.len() {
                dh.clone()
            } else {
                let c = &caches[li];
                let mut d = dh.clone();
                if let Some(mask) = &c.mask {
                    d *= mask;
                }
                Zip::from(&mut d).and(&c.pre).and(&c.sig).for_each(|g, &v, &s| {
                    *g *= s * (1.0 + v * (1.0 - s));
                });
                match (l.bn, &c.xhat, &c.inv_std) {
                    (Some((g, be)), Some(xhat), Some(inv_std)) => {
                        let dgamma = (&d * xhat).sum_axis(Axis(0));
                        let dbeta = d.sum_axis(Axis(0));
                        grad[g..g + l.fan_out].copy_from_slice(dgamma.as_slice().unwrap());
                        grad[be..be + l.fan_out].copy_from_slice(dbeta.as_slice().unwrap());
                        let dxhat = d * &self.slice(g, l.fan_out);
                        if train_bn {
                            let sum_d = dxhat.sum_axis(Axis(0));
                            let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                            let mut r = dxhat * m - &sum_d - &(xhat * &sum_dx);
                            r *= &(inv_std / m);
                            r
                        } else {
                            dxhat * inv_std
                        }
                    }
                    _ => d,
                }
            };
            let dw = input.t().dot(&da);
            grad[l.w..l.b].copy_from_slice(dw.as_standard_layout().as_slice().unwrap());
            let db = da.sum_axis(Axis(0));
            grad[l.b..l.b + l.fan_out].copy_from_slice(db.as_slice().unwrap());
            if li > 0 {
                dh = da.dot(&self.weight(&l).t());
            }
        }
        grad
    }

    fn check_features(&self, features: ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} inputs, got {}",
                self.spec.input_dim,
                features.ncols()
            )));
        }
        Ok(())
    }

    /// Loss `0.5 mean((net(x) - y_std)^2)` in evaluation mode and its gradient.
    /// Inputs and targets pass through the stored scalers first.
    pub fn loss_and_gradient(&self, features: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<(f64, Vec<f64>)> {
        self.check_features(features)?;
        if y.len() != features.nrows() || y.is_empty() {
            return Err(Error::Shape("features and target differ in length".into()));
        }
        let xs = self.x_scaler.apply(features);
        let ys = y.mapv(|v| (v - self.y_mean) / self.y_std);
        let mut probe = self.clone();
        let (out, caches) = probe.forward(xs.view(), Mode::Eval);
        let r = out - &ys;
        let m = r.len() as f64;
        let loss = 0.5 * r.dot(&r) / m;
        Ok((loss, self.backward(xs.view(), &caches, r / m, false)))
    }

    /// Max relative error between analytic gradients and central differences
    /// (step `1e-5`) over up to 100 randomly chosen parameters, evaluation mode.
    /// Relative error is `|a - f| / max(|a|, |f|, 1e-6)`.
    pub fn gradient_check(&self, features: ArrayView2<f64>, y: ArrayView1<f64>, seed: u64) -> Result<f64> {
        let (_, grad) = self.loss_and_gradient(features, y)?;
        let mut idx: Vec<usize> = (0..self.params.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(100);
        let h = 1e-5;
        let mut probe = self.clone();
        let mut worst = 0.0_f64;
        for &i in &idx {
            let orig = probe.params[i];
            probe.params[i] = orig + h;
            let (lp, _) = probe.loss_and_gradient(features, y)?;
            probe.params[i] = orig - h;
            let (lm, _) = probe.loss_and_gradient(features, y)?;
            probe.params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        Ok(worst)
    }

    /// Evaluation-mode predictions on the original target scale.
    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_features(features)?;
        let xs = self.x_scaler.apply(features);
        let mut probe = self.clone();
        let (out, _) = probe.forward(xs.view(), Mode::Eval);
        Ok(out.mapv(|v| self.y_mean + self.y_std * v))
    }

    /// Trains with a random validation split of `validation_fraction`.
    pub fn train(features: ArrayView2<f64>, y: ArrayView1<f64>, spec: &MlpSpec) -> Result<MlpModel> {
        let n = features.nrows();
        let val = validation_indices(n, spec.validation_fraction, spec.seed);
        Self::train_with_validation(features, y, spec, &val)
    }

    /// Trains on the rows outside `val`, early-stopping on the rows in `val`.
    pub fn train_with_validation(
        features: ArrayView2<f64>,
        y: ArrayView1<f64>,
        spec: &MlpSpec,
        val: &[usize],
    ) -> Result<MlpModel> {
        let mut model = MlpModel::init(spec)?;
        model.check_features(features)?;
        let n = features.nrows();
        if y.len() != n {
            return Err(Error::Shape("features and target differ in length".into()));
        }
        if n < 2 * spec.batch_size.min(n.max(1)) || n < 4 {
            return Err(Error::InvalidArgument(format!("{n} rows are too few to train")));
        }
        if features.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite training data".into()));
        }
        let mut is_val = vec![false; n];
        for &i in val {
            if i >= n {
                return Err(Error::InvalidArgument(format!("validation index {i} out of range")));
            }
            is_val[i] = true;
        }
        let train_idx: Vec<usize> = (0..n).filter(|&i| !is_val[i]).collect();
        if val.is_empty() || train_idx.len() < 2 {
            return Err(Error::InvalidArgument("validation split leaves no training or validation rows".into()));
        }

        let xt = features.select(Axis(0), &train_idx);
        model.x_scaler = Scaler::fit(xt.view());
        let yt = y.select(Axis(0), &train_idx);
        let ys = Scaler::fit(yt.view().insert_axis(Axis(1)));
        model.y_mean = ys.mean[0];
        model.y_std = ys.std[0];

        let xs_all = model.x_scaler.apply(features);
        let ys_all = y.mapv(|v| (v - model.y_mean) / model.y_std);
        let xv = xs_all.select(Axis(0), val);
        let yv = ys_all.select(Axis(0), val);

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x005E_ED0F_D47A);
        let np = model.params.len();
        let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
        let mut step = 0_i32;
        let mut order = train_idx.clone();
        let mut best = (f64::INFINITY, model.params.clone(), model.running.clone(), 0);
        let mut stale = 0;
        let bs = spec.batch_size;
        for epoch in 1..=spec.epochs {
            order.shuffle(&mut rng);
            let (mut sum_loss, mut rows) = (0.0, 0usize);
            for chunk in order.chunks(bs) {
                if chunk.len() < 2 && spec.batch_norm {
                    continue;
                }
                let xb = xs_all.select(Axis(0), chunk);
                let yb = ys_all.select(Axis(0), chunk);
                let (out, caches) = model.forward(
                    xb.view(),
                    Mode::Train { rng: &mut rng, dropout: true, update_running: true },
                );
                let r = out - &yb;
                let m = r.len() as f64;
                let loss = 0.5 * r.dot(&r) / m;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                sum_loss += loss * m;
                rows += chunk.len();
                let grad = model.backward(xb.view(), &caches, r / m, true);
                step += 1;
                adamw_step(&mut model.params, &grad, &mut m1, &mut m2, step, spec);
            }
            let (vout, _) = model.forward(xv.view(), Mode::Eval);
            let vr = vout - &yv;
            let val_loss = 0.5 * vr.dot(&vr) / vr.len() as f64;
            if !val_loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            model.history.push(EpochRecord { epoch, train_loss: sum_loss / rows.max(1) as f64, val_loss });
            if val_loss < best.0 {
                best = (val_loss, model.params.clone(), model.running.clone(), epoch);
                stale = 0;
            } else {
                stale += 1;
                if stale >= spec.patience {
                    break;
                }
            }
        }
        model.params = best.1;
        model.running = best.2;
        model.best_epoch = best.3;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            spec: self.spec.clone(),
            x_scaler: self.x_scaler.clone(),
            y_mean: self.y_mean,
            y_std: self.y_std,
            best_epoch: self.best_epoch,
            history: self.history.clone(),
            n_params: self.params.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(32 + json.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let floats = self
            .params
            .iter()
            .chain(self.running.iter().flat_map(|(m, v)| m.iter().chain(v.iter())));
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MlpModel> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 17 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("not a model checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
        let body = bytes.get(17..17 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut model = MlpModel::init(&header.spec)?;
        if model.params.len() != header.n_params {
            return Err(bad("parameter count does not match architecture"));
        }
        let n_running: usize = model.running.iter().map(|(m, _)| 2 * m.len()).sum();
        let rest = &bytes[17 + len..];
        if rest.len() != 8 * (header.n_params + n_running) {
            return Err(bad("parameter block has the wrong length"));
        }
        let mut vals = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for p in model.params.iter_mut() {
            *p = vals.next().unwrap();
        }
        for (m, v) in model.running.iter_mut() {
            for x in m.iter_mut().chain(v.iter_mut()) {
                *x = vals.next().unwrap();
            }
        }
        if model.params.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameters"));
        }
        model.x_scaler = header.x_scaler;
        model.y_mean = header.y_mean;
        model.y_std = header.y_std;
        model.best_epoch = header.best_epoch;
        model.history = header.history;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<MlpModel> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        MlpModel::from_bytes(&buf)
    }
}

fn adamw_step(p: &mut [f64], g: &[f64], m1: &mut [f64], m2: &mut [f64], t: i32, spec: &MlpSpec) {
    let (b1, b2, lr) = (spec.beta1, spec.beta2, spec.learning_rate);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * spec.weight_decay;
    for i in 0..p.len() {
        m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
        m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m1[i] / c1;
        let vhat = m2[i] / c2;
        p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + spec.adam_eps);
    }
}

/// Random `round(fraction * n)` row indices (at least one), sorted.
pub fn validation_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7A11_DA7E));
    let k = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Column-wise concatenation.
pub fn hstack(blocks: &[ArrayView2<f64>]) -> Result<Array2<f64>> {
    ndarray::concatenate(Axis(1), blocks).map_err(|e| Error::Shape(e.to_string()))
}

/// `h(x, t_hat) + alpha r(x, z)` with `alpha` chosen on validation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeguardedModel {
    pub main: MlpModel,
    pub residual: MlpModel,
    /// `1` when the residual network improves validation MSE by at least 1%.
    pub alpha: f64,
    pub val_mse_main: f64,
    pub val_mse_combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeguardReport {
    pub alpha: f64,
    pub val_mse_main: f64,
    pub val_mse_combined: f64,
    pub rule: String,
}

impl SafeguardedModel {
    pub fn predict(&self, x: ArrayView2<f64>, z: ArrayView2<f64>, t_hat: ArrayView1<f64>) -> Result<Array1<f64>> {
        let main_in = hstack(&[x, t_hat.insert_axis(Axis(1))])?;
        let h = self.main.predict(main_in.view())?;
        if self.alpha == 0.0 {
            return Ok(h);
        }
        let r = self.residual.predict(hstack(&[x, z])?.view())?;
        Ok(h + &(r * self.alpha))
    }

    pub fn report(&self) -> SafeguardReport {
        SafeguardReport {
            alpha: self.alpha,
            val_mse_main: self.val_mse_main,
            val_mse_combined: self.val_mse_combined,
            rule: "residual network kept only if validation MSE drops by >= 1% (reconstructed gating rule)".into(),
        }
    }
}

fn mse_on(a: ArrayView1<f64>, b: ArrayView1<f64>, rows: &[usize]) -> f64 {
    rows.iter().map(|&i| (a[i] - b[i]).powi(2)).sum::<f64>() / rows.len() as f64
}

/// Two-stage fit: `h` on `[x, t_hat]`, then `r` on `[x, z]` against the
/// residuals `y - h`. Both stages share one validation split, which also
/// decides `alpha`.
pub fn fit_with_safeguard(
    x: ArrayView2<f64>,
    z: ArrayView2<f64>,
    t_hat: ArrayView1<f64>,
    y: ArrayView1<f64>,
    spec_main: &MlpSpec,
    spec_resid: &MlpSpec,
) -> Result<SafeguardedModel> {
    let n = y.len();
    if x.nrows() != n || z.nrows() != n || t_hat.len() != n {
        return Err(Error::Shape("safeguard inputs differ in row count".into()));
    }
    let val = validation_indices(n, spec_main.validation_fraction, spec_main.seed);
    let main_in = hstack(&[x, t_hat.insert_axis(Axis(1))])?;
    let main = MlpModel::train_with_validation(main_in.view(), y, &spec_main.with_input_dim(main_in.ncols()), &val)?;
    let h = main.predict(main_in.view())?;
    let resid_target = &y - &h;
    let resid_in = hstack(&[x, z])?;
    let residual = MlpModel::train_with_validation(
        resid_in.view(),
        resid_target.view(),
        &spec_resid.with_input_dim(resid_in.ncols()),
        &val,
    )?;
    let r = residual.predict(resid_in.view())?;
    let combined = &h + &r;
    let val_mse_main = mse_on(y, h.view(), &val);
    let val_mse_combined = mse_on(y, combined.view(), &val);
    let alpha = if val_mse_combined <= 0.99 * val_mse_main { 1.0 } else { 0.0 };
    Ok(SafeguardedModel { main, residual, alpha, val_mse_main, val_mse_combined })
}
