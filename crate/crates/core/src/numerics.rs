//! Dense linear algebra, activations, the GRU cell with its backward pass,
//! cross-entropy, AdaDelta, and a finite-difference gradient checker.
//!
//! Everything is `f64`. Matrices are row-major.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are clipped before taking the log in [`cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-12;

/// Vectors with a smaller norm are treated as zero by [`cosine`].
pub const COSINE_ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::usage(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.shape() == other.shape()
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.matvec_rows_into(0..self.rows, x, &mut out);
        out
    }

    /// `out += self[rows] · x`, where `out` has one entry per selected row.
    pub fn matvec_rows_into(&self, rows: Range<usize>, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), rows.len());
        for (o, r) in out.iter_mut().zip(rows) {
            *o += dot(self.row(r), x);
        }
    }

    /// `selfᵀ · y`.
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        self.t_matvec_rows_into(0..self.rows, y, &mut out);
        out
    }

    /// `out += self[rows]ᵀ · y`, where `y` has one entry per selected row.
    pub fn t_matvec_rows_into(&self, rows: Range<usize>, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), rows.len());
        debug_assert_eq!(out.len(), self.cols);
        for (&yi, r) in y.iter().zip(rows) {
            if yi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += yi * w;
            }
        }
    }

    /// `self[row_offset + i][j] += a[i] · b[j]`.
    pub fn add_outer_at(&mut self, row_offset: usize, a: &[f64], b: &[f64]) {
        debug_assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (m, &bj) in self.row_mut(row_offset + i).iter_mut().zip(b) {
                *m += ai * bj;
            }
        }
    }

    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        self.add_outer_at(0, a, b);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::usage("softmax of an empty vector"));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

/// `−ln p[target]`, with `p[target]` floored at [`PROB_FLOOR`]. NaN propagates.
pub fn cross_entropy(p: &[f64], target: usize) -> Result<f64> {
    let pt = *p.get(target).ok_or_else(|| {
        Error::usage(format!(
            "target {target} out of range for {} classes",
            p.len()
        ))
    })?;
    if pt.is_nan() {
        return Ok(f64::NAN);
    }
    Ok(-pt.max(PROB_FLOOR).ln())
}

/// Cosine similarity; 0 when either vector is (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::usage(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < COSINE_ZERO_NORM || nb < COSINE_ZERO_NORM {
        return Ok(0.0);
    }
    // Single rounding in the denominator.
    let denom = (dot(a, a) * dot(b, b)).sqrt();
    Ok((dot(a, b) / denom).clamp(-1.0, 1.0))
}

/// Borrowed GRU weights. Rows of `w`, `u` and `b` are stacked as
/// `[update; reset; candidate]`, each block `hidden` rows tall.
#[derive(Clone, Copy, Debug)]
pub struct Gru<'a> {
    pub w: &'a Matrix,
    pub u: &'a Matrix,
    pub b: &'a Matrix,
}

/// Gradient buffers matching a [`Gru`].
pub struct GruGrad<'a> {
    pub w: &'a mut Matrix,
    pub u: &'a mut Matrix,
    pub b: &'a mut Matrix,
}

/// Activations kept from a GRU forward step for the backward pass.
#[derive(Clone, Debug)]
pub struct GruCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub cand: Vec<f64>,
    pub h: Vec<f64>,
}

impl<'a> Gru<'a> {
    pub fn new(w: &'a Matrix, u: &'a Matrix, b: &'a Matrix) -> Result<Self> {
        let n = u.cols();
        if u.rows() != 3 * n || w.rows() != 3 * n || b.shape() != (3 * n, 1) {
            return Err(Error::usage(format!(
                "inconsistent GRU shapes w={:?} u={:?} b={:?}",
                w.shape(),
                u.shape(),
                b.shape()
            )));
        }
        Ok(Gru { w, u, b })
    }

    pub fn hidden(&self) -> usize {
        self.u.cols()
    }

    pub fn input(&self) -> usize {
        self.w.cols()
    }

    /// One step:
    /// `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
    /// `h̃ = tanh(Wh x + Uh (r⊙h) + bh)`, `h' = (1−z)⊙h + z⊙h̃`.
    pub fn step(&self, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        self.check(x, h_prev)?;
        Ok(self.step_cached(x, h_prev).h)
    }

    pub(crate) fn check(&self, x: &[f64], h_prev: &[f64]) -> Result<()> {
        if x.len() != self.input() || h_prev.len() != self.hidden() {
            return Err(Error::usage(format!(
                "GRU expects input {} and state {}, got {} and {}",
                self.input(),
                self.hidden(),
                x.len(),
                h_prev.len()
            )));
        }
        Ok(())
    }

    pub fn step_cached(&self, x: &[f64], h_prev: &[f64]) -> GruCache {
        let n = self.hidden();
        let mut pre = self.b.as_slice().to_vec();
        self.w.matvec_rows_into(0..3 * n, x, &mut pre);
        self.u.matvec_rows_into(0..2 * n, h_prev, &mut pre[..2 * n]);
        let z: Vec<f64> = pre[..n].iter().map(|&a| sigmoid(a)).collect();
        let r: Vec<f64> = pre[n..2 * n].iter().map(|&a| sigmoid(a)).collect();
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
        self.u
            .matvec_rows_into(2 * n..3 * n, &rh, &mut pre[2 * n..]);
        let cand: Vec<f64> = pre[2 * n..].iter().map(|a| a.tanh()).collect();
        let h = (0..n)
            .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * cand[i])
            .collect();
        GruCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            cand,
            h,
        }
    }

    /// Back-propagates `dh` (gradient w.r.t. the step output) through one step.
    /// Accumulates weight gradients into `grad` and returns `(dx, dh_prev)`.
    pub fn backward(
        &self,
        cache: &GruCache,
        dh: &[f64],
        grad: &mut GruGrad<'_>,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = self.hidden();
        let GruCache {
            x,
            h_prev,
            z,
            r,
            cand,
            ..
        } = cache;

        let mut dh_prev: Vec<f64> = (0..n).map(|i| dh[i] * (1.0 - z[i])).collect();
        let da_cand: Vec<f64> = (0..n)
            .map(|i| dh[i] * z[i] * (1.0 - cand[i] * cand[i]))
            .collect();
        let da_z: Vec<f64> = (0..n)
            .map(|i| dh[i] * (cand[i] - h_prev[i]) * z[i] * (1.0 - z[i]))
            .collect();

        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(r, h)| r * h).collect();
        let mut d_rh = vec![0.0; n];
        self.u.t_matvec_rows_into(2 * n..3 * n, &da_cand, &mut d_rh);
        let da_r: Vec<f64> = (0..n)
            .map(|i| d_rh[i] * h_prev[i] * r[i] * (1.0 - r[i]))
            .collect();
        for i in 0..n {
            dh_prev[i] += d_rh[i] * r[i];
        }

        let mut da = Vec::with_capacity(3 * n);
        da.extend_from_slice(&da_z);
        da.extend_from_slice(&da_r);
        da.extend_from_slice(&da_cand);

        let mut dx = vec![0.0; x.len()];
        self.w.t_matvec_rows_into(0..3 * n, &da, &mut dx);
        self.u
            .t_matvec_rows_into(0..2 * n, &da[..2 * n], &mut dh_prev);

        grad.w.add_outer(&da, x);
        grad.u.add_outer_at(0, &da[..2 * n], h_prev);
        grad.u.add_outer_at(2 * n, &da_cand, &rh);
        for (g, d) in grad.b.as_mut_slice().iter_mut().zip(&da) {
            *g += d;
        }
        (dx, dh_prev)
    }
}

/// Named parameters, their gradients, and AdaDelta accumulators, all kept in
/// insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    mean_sq_grad: Vec<Matrix>,
    mean_sq_update: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its slot index.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter name {name}")));
        }
        let (r, c) = value.shape();
        let idx = self.names.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.values.push(value);
        self.grads.push(Matrix::zeros(r, c));
        self.mean_sq_grad.push(Matrix::zeros(r, c));
        self.mean_sq_update.push(Matrix::zeros(r, c));
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn grad(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.grads[i])
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn grads(&self) -> &[Matrix] {
        &self.grads
    }

    /// Values for reading alongside gradients for writing.
    pub fn split_mut(&mut self) -> (&[Matrix], &mut [Matrix]) {
        (&self.values, &mut self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.as_slice())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.as_slice().len()).sum()
    }

    /// Clears optimizer accumulators, keeping values.
    pub fn reset_optimizer(&mut self) {
        self.mean_sq_grad.iter_mut().for_each(|m| m.fill(0.0));
        self.mean_sq_update.iter_mut().for_each(|m| m.fill(0.0));
    }
}

/// AdaDelta with decay `rho` and stabilizer `eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaDelta {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdaDelta {
    fn default() -> Self {
        AdaDelta {
            rho: 0.95,
            eps: 1e-6,
        }
    }
}

impl AdaDelta {
    /// Applies one update from the store's current gradients. Gradients are left as-is.
    pub fn step(&self, store: &mut ParamStore) {
        let (rho, eps) = (self.rho, self.eps);
        for i in 0..store.values.len() {
            let g = store.grads[i].as_slice();
            let x = store.values[i].as_mut_slice();
            let eg2 = store.mean_sq_grad[i].as_mut_slice();
            let edx2 = store.mean_sq_update[i].as_mut_slice();
            for j in 0..g.len() {
                eg2[j] = rho * eg2[j] + (1.0 - rho) * g[j] * g[j];
                let dx = -((edx2[j] + eps).sqrt() / (eg2[j] + eps).sqrt()) * g[j];
                edx2[j] = rho * edx2[j] + (1.0 - rho) * dx * dx;
                x[j] += dx;
            }
        }
    }
}

/// A scalar loss over the parameters in a [`ParamStore`].
pub trait Objective {
    fn loss(&self, store: &ParamStore) -> Result<f64>;

    /// Returns the loss and accumulates its gradient into the store's gradient buffers.
    fn loss_and_grad(&self, store: &mut ParamStore) -> Result<f64>;
}

/// Zeroes the gradients, then fills them with d(loss)/d(param).
pub fn backward<O: Objective + ?Sized>(objective: &O, store: &mut ParamStore) -> Result<f64> {
    store.zero_grads();
    objective.loss_and_grad(store)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Worst relative error per parameter tensor, in store order.
    pub per_tensor: Vec<(String, f64)>,
}

/// Compares [`backward`] against central differences `(f(x+ε) − f(x−ε)) / 2ε` on every
/// scalar of every parameter. Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check<O: Objective + ?Sized>(
    objective: &O,
    store: &mut ParamStore,
    eps: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    backward(objective, store)?;
    let analytic = store.grads.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        per_tensor: Vec::with_capacity(store.len()),
    };
    for t in 0..store.len() {
        let mut tensor_max: f64 = 0.0;
        for j in 0..store.values[t].as_slice().len() {
            let orig = store.values[t].as_slice()[j];
            store.values[t].as_mut_slice()[j] = orig + eps;
            let plus = objective.loss(store)?;
            store.values[t].as_mut_slice()[j] = orig - eps;
            let minus = objective.loss(store)?;
            store.values[t].as_mut_slice()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t].as_slice()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            tensor_max = tensor_max.max(rel);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.names[t].clone(), j));
            }
        }
        report.per_tensor.push((store.names[t].clone(), tensor_max));
    }
    store.grads = analytic;
    Ok(report)
}
