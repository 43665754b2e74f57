//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are handles (`Rc`) to graph nodes. An operation whose inputs all
//! have `requires_grad == false` produces a detached node with no parents, so
//! evaluation-only code pays nothing for the tape. Graphs are thread-confined;
//! detached tensors are read-only and freely shareable.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor::new_node(shape.to_vec(), data, false, vec![], None)
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor::new_node(shape.to_vec(), data, true, vec![], None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..shape.iter().product())
            .map(|_| dist.sample(rng))
            .collect();
        Tensor::from_vec(shape, data)
    }

    pub fn randn_param(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let t = Tensor::randn(shape, std, rng);
        let data = t.node.data.borrow().clone();
        Tensor::param(shape, data)
    }

    /// Same values as a fresh leaf with no tape attachment; gradients do not
    /// flow past a detach.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.shape(), self.data())
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    pub fn at(&self, idx: usize) -> f64 {
        self.node.data.borrow()[idx]
    }

    /// In-place element write. Only meaningful for leaves (perturbation in
    /// finite-difference checks, optimizer updates).
    pub fn set_at(&self, idx: usize, v: f64) {
        self.node.data.borrow_mut()[idx] = v;
    }

    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), data.len());
        d.copy_from_slice(data);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: &[f64]) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn op(parents: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>, bw: BackwardFn) -> Tensor {
        let requires = parents.iter().any(|p| p.node.requires_grad);
        if requires {
            Tensor::new_node(shape, data, true, parents, Some(bw))
        } else {
            Tensor::new_node(shape, data, false, vec![], None)
        }
    }

    /// Reverse-mode backward pass from a scalar output. Gradients accumulate
    /// into every reachable `requires_grad` tensor.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar output");
        if !self.node.requires_grad {
            return;
        }
        self.accumulate_grad(&[1.0]);
        let order = topo_order(self);
        for t in order.iter().rev() {
            if t.node.backward.is_none() {
                continue;
            }
            let g = match t.node.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            (t.node.backward.as_ref().unwrap())(&g);
        }
    }

    // ---- elementwise binary ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape("add", other, |a, b| a + b, |g, _, _| (g, g), 1.0, 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err("sub", self, other));
        }
        let (a, b) = (self.data(), other.data());
        let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::op(
            vec![self.clone(), other.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |g| {
                pa.accumulate_grad(g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                pb.accumulate_grad(&neg);
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err("mul", self, other));
        }
        let (a, b) = (self.data(), other.data());
        let out: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::op(
            vec![self.clone(), other.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |g| {
                let ga: Vec<f64> = g.iter().zip(&b).map(|(gi, y)| gi * y).collect();
                let gb: Vec<f64> = g.iter().zip(&a).map(|(gi, x)| gi * x).collect();
                pa.accumulate_grad(&ga);
                pb.accumulate_grad(&gb);
            }),
        ))
    }

    fn binary_same_shape(
        &self,
        op: &'static str,
        other: &Tensor,
        f: fn(f64, f64) -> f64,
        _g: fn(f64, f64, f64) -> (f64, f64),
        ca: f64,
        cb: f64,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, self, other));
        }
        let out: Vec<f64> = self
            .node
            .data
            .borrow()
            .iter()
            .zip(other.node.data.borrow().iter())
            .map(|(a, b)| f(*a, *b))
            .collect();
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::op(
            vec![self.clone(), other.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |g| {
                let ga: Vec<f64> = g.iter().map(|x| ca * x).collect();
                let gb: Vec<f64> = g.iter().map(|x| cb * x).collect();
                pa.accumulate_grad(&ga);
                pb.accumulate_grad(&gb);
            }),
        ))
    }

    // ---- elementwise unary ----

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.node.data.borrow().iter().map(|x| c * x).collect();
        let p = self.clone();
        Tensor::op(
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |g| {
                let ga: Vec<f64> = g.iter().map(|x| c * x).collect();
                p.accumulate_grad(&ga);
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.node.data.borrow().iter().map(|x| c + x).collect();
        let p = self.clone();
        Tensor::op(
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |g| p.accumulate_grad(g)),
        )
    }

    pub fn relu(&self) -> Tensor {
        let x = self.data();
        let out: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        let p = self.clone();
        Tensor::op(
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            // Subgradient convention: exactly-zero pre-activation gets grad 0.
            Box::new(move |g| {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                p.accumulate_grad(&ga);
            }),
        )
    }

    pub fn gelu(&self) -> Tensor {
        // tanh approximation; the derivative below matches this expression.
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let x = self.data();
        let out: Vec<f64> = x
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (C * (v + A * v * v * v)).tanh()))
            .collect();
        let p = self.clone();
        Tensor::op(
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |g| {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gi, &v)| {
                        let u = C * (v + A * v * v * v);
                        let t = u.tanh();
                        let du = C * (1.0 + 3.0 * A * v * v);
                        gi * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                p.accumulate_grad(&ga);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f64> = self
            .node
            .data
            .borrow()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let s = out.clone();
        let p = self.clone();
        Tensor::op(
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |g| {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&s)
                    .map(|(gi, si)| gi * si * (1.0 - si))
                    .collect();
                p.accumulate_grad(&ga);
            }),
        )
    }

    pub fn log(&self) -> Tensor {
        let x = self.data();
        let out: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let p = self.clone();
        Tensor::op(
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |g| {
                let ga: Vec<f64> = g.iter().zip(&x).map(|(gi, xi)| gi / xi).collect();
                p.accumulate_grad(&ga);
            }),
        )
    }

    /// Clamp with pass-through gradient strictly inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let x = self.data();
        let out: Vec<f64> = x.iter().map(|v| v.clamp(lo, hi)).collect();
        let p = self.clone();
        Tensor::op(
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |g| {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&x)
                    .map(|(gi, &xi)| if xi > lo && xi < hi { *gi } else { 0.0 })
                    .collect();
                p.accumulate_grad(&ga);
            }),
        )
    }

    pub fn dropout(&self, rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
        assert!((0.0..1.0).contains(&rate));
        if rate == 0.0 {
            return self.clone();
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let out: Vec<f64> = self
            .node
            .data
            .borrow()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let p = self.clone();
        Tensor::op(
            vec![self.clone()],
            self.shape().to_vec(),
            out,
            Box::new(move |g| {
                let ga: Vec<f64> = g.iter().zip(&mask).map(|(gi, m)| gi * m).collect();
                p.accumulate_grad(&ga);
            }),
        )
    }

    // ---- matrix ops ----

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [m, n] => Ok((*m, *n)),
            _ => Err(TensorError::InvalidInput(format!(
                "{op}: expected 2-D tensor, got shape {:?}",
                self.shape()
            ))),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self, other));
        }
        let a = self.data();
        let b = other.data();
        let out = matmul_raw(&a, &b, m, k, n);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::op(
            vec![self.clone(), other.clone()],
            vec![m, n],
            out,
            Box::new(move |g| {
                // dA = g . B^T ; dB = A^T . g
                pa.accumulate_grad(&matmul_nt_raw(g, &b, m, n, k));
                pb.accumulate_grad(&matmul_tn_raw(&a, g, m, k, n));
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        let p = self.clone();
        Ok(Tensor::op(
            vec![self.clone()],
            vec![n, m],
            out,
            Box::new(move |g| {
                let mut ga = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                p.accumulate_grad(&ga);
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::InvalidInput(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            )));
        }
        let p = self.clone();
        Ok(Tensor::op(
            vec![self.clone()],
            shape.to_vec(),
            self.data(),
            Box::new(move |g| p.accumulate_grad(g)),
        ))
    }

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        let x = self.data();
        if x.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let s = out.clone();
        let p = self.clone();
        Ok(Tensor::op(
            vec![self.clone()],
            vec![m, n],
            out,
            Box::new(move |g| {
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let srow = &s[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let dot: f64 = srow.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                    for j in 0..n {
                        ga[i * n + j] = srow[j] * (grow[j] - dot);
                    }
                }
                p.accumulate_grad(&ga);
            }),
        ))
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = self.dims2("layer_norm")?;
        if gamma.numel() != n || beta.numel() != n {
            return Err(shape_err("layer_norm", self, gamma));
        }
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = gm[j] * xh + bt[j];
            }
        }
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        let gm_c = gm.clone();
        Ok(Tensor::op(
            vec![self.clone(), gamma.clone(), beta.clone()],
            vec![m, n],
            out,
            Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    let xh = &xhat[i * n..(i + 1) * n];
                    let grow = &g[i * n..(i + 1) * n];
                    let mut mean_gy = 0.0;
                    let mut mean_gy_xh = 0.0;
                    for j in 0..n {
                        let gy = grow[j] * gm_c[j];
                        mean_gy += gy;
                        mean_gy_xh += gy * xh[j];
                        gg[j] += grow[j] * xh[j];
                        gb[j] += grow[j];
                    }
                    mean_gy /= n as f64;
                    mean_gy_xh /= n as f64;
                    for j in 0..n {
                        let gy = grow[j] * gm_c[j];
                        gx[i * n + j] = (gy - mean_gy - xh[j] * mean_gy_xh) * inv_std[i];
                    }
                }
                px.accumulate_grad(&gx);
                pg.accumulate_grad(&gg);
                pb.accumulate_grad(&gb);
            }),
        ))
    }

    /// Row-wise L2 normalization. A zero row maps to the zero row.
    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("l2_normalize_rows")?;
        let x = self.data();
        let mut out = vec![0.0; m * n];
        let mut norms = vec![0.0; m];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = norm;
            if norm > 0.0 {
                for j in 0..n {
                    out[i * n + j] = row[j] / norm;
                }
            }
        }
        let y = out.clone();
        let p = self.clone();
        Ok(Tensor::op(
            vec![self.clone()],
            vec![m, n],
            out,
            Box::new(move |g| {
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[i * n + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                p.accumulate_grad(&ga);
            }),
        ))
    }

    /// Concatenate along `axis` (0 or 1) for 2-D tensors.
    pub fn concat(axis: usize, parts: &[Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty());
        assert!(axis < 2, "concat: axis must be 0 or 1");
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| p.dims2("concat"))
            .collect::<Result<_>>()?;
        let other = 1 - axis;
        let fixed = if other == 0 { dims[0].0 } else { dims[0].1 };
        for (i, d) in dims.iter().enumerate() {
            let v = if other == 0 { d.0 } else { d.1 };
            if v != fixed {
                return Err(shape_err("concat", &parts[0], &parts[i]));
            }
        }
        let (m, n) = if axis == 0 {
            (dims.iter().map(|d| d.0).sum(), fixed)
        } else {
            (fixed, dims.iter().map(|d| d.1).sum())
        };
        let mut out = vec![0.0; m * n];
        if axis == 0 {
            let mut row = 0;
            for (p, d) in parts.iter().zip(&dims) {
                out[row * n..(row + d.0) * n].copy_from_slice(&p.data());
                row += d.0;
            }
        } else {
            let mut col = 0;
            for (p, d) in parts.iter().zip(&dims) {
                let pd = p.data();
                for i in 0..m {
                    out[i * n + col..i * n + col + d.1]
                        .copy_from_slice(&pd[i * d.1..(i + 1) * d.1]);
                }
                col += d.1;
            }
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let dims_c = dims.clone();
        let handles = owned.clone();
        Ok(Tensor::op(
            owned,
            vec![m, n],
            out,
            Box::new(move |g| {
                if axis == 0 {
                    let mut row = 0;
                    for (p, d) in handles.iter().zip(&dims_c) {
                        p.accumulate_grad(&g[row * n..(row + d.0) * n]);
                        row += d.0;
                    }
                } else {
                    let mut col = 0;
                    for (p, d) in handles.iter().zip(&dims_c) {
                        let mut gp = vec![0.0; m * d.1];
                        for i in 0..m {
                            gp[i * d.1..(i + 1) * d.1]
                                .copy_from_slice(&g[i * n + col..i * n + col + d.1]);
                        }
                        p.accumulate_grad(&gp);
                        col += d.1;
                    }
                }
            }),
        ))
    }

    /// Mean along `axis` (0: over rows -> [1 x n]; 1: over cols -> [m x 1]).
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("mean_axis")?;
        assert!(axis < 2);
        let x = self.data();
        let p = self.clone();
        if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += x[i * n + j];
                }
            }
            for v in out.iter_mut() {
                *v /= m as f64;
            }
            Ok(Tensor::op(
                vec![self.clone()],
                vec![1, n],
                out,
                Box::new(move |g| {
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = g[j] / m as f64;
                        }
                    }
                    p.accumulate_grad(&ga);
                }),
            ))
        } else {
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = x[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
            }
            Ok(Tensor::op(
                vec![self.clone()],
                vec![m, 1],
                out,
                Box::new(move |g| {
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = g[i] / n as f64;
                        }
                    }
                    p.accumulate_grad(&ga);
                }),
            ))
        }
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.node.data.borrow().iter().sum();
        let numel = self.numel();
        let shape = self.shape().to_vec();
        let p = self.clone();
        let _ = shape;
        Tensor::op(
            vec![self.clone()],
            vec![1],
            vec![s],
            Box::new(move |g| {
                p.accumulate_grad(&vec![g[0]; numel]);
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Rows of `table` selected by id. Backward scatter-adds into the table.
    pub fn embedding_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = table.dims2("embedding_lookup")?;
        for &id in ids {
            if id >= v {
                return Err(TensorError::InvalidInput(format!(
                    "embedding_lookup: id {id} out of range for table with {v} rows"
                )));
            }
        }
        let t = table.data();
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
        }
        let p = table.clone();
        let ids_c = ids.to_vec();
        Ok(Tensor::op(
            vec![table.clone()],
            vec![ids.len(), d],
            out,
            Box::new(move |g| {
                let mut gt = vec![0.0; v * d];
                for (i, &id) in ids_c.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[i * d + j];
                    }
                }
                p.accumulate_grad(&gt);
            }),
        ))
    }

    /// Select elements by flat index into a 1-D result.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let numel = self.numel();
        for &i in indices {
            if i >= numel {
                return Err(TensorError::InvalidInput(format!(
                    "gather: flat index {i} out of range ({numel} elements)"
                )));
            }
        }
        let x = self.data();
        let out: Vec<f64> = indices.iter().map(|&i| x[i]).collect();
        let p = self.clone();
        let idx = indices.to_vec();
        Ok(Tensor::op(
            vec![self.clone()],
            vec![indices.len()],
            out,
            Box::new(move |g| {
                let mut ga = vec![0.0; numel];
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
                p.accumulate_grad(&ga);
            }),
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_rows")?;
        if start > end || end > m {
            return Err(TensorError::InvalidInput(format!(
                "slice_rows: range {start}..{end} out of bounds for {m} rows"
            )));
        }
        let out = self.data()[start * n..end * n].to_vec();
        let p = self.clone();
        Ok(Tensor::op(
            vec![self.clone()],
            vec![end - start, n],
            out,
            Box::new(move |g| {
                let mut ga = vec![0.0; m * n];
                ga[start * n..end * n].copy_from_slice(g);
                p.accumulate_grad(&ga);
            }),
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if start > end || end > n {
            return Err(TensorError::InvalidInput(format!(
                "slice_cols: range {start}..{end} out of bounds for {n} cols"
            )));
        }
        let w = end - start;
        let x = self.data();
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&x[i * n + start..i * n + end]);
        }
        let p = self.clone();
        Ok(Tensor::op(
            vec![self.clone()],
            vec![m, w],
            out,
            Box::new(move |g| {
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                p.accumulate_grad(&ga);
            }),
        ))
    }

    /// Add a [1 x n] (or [n]) row vector to every row of a [m x n] tensor.
    pub fn add_row_broadcast(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_row_broadcast")?;
        if row.numel() != n {
            return Err(shape_err("add_row_broadcast", self, row));
        }
        let x = self.data();
        let r = row.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = x[i * n + j] + r[j];
            }
        }
        let (pa, pb) = (self.clone(), row.clone());
        Ok(Tensor::op(
            vec![self.clone(), row.clone()],
            vec![m, n],
            out,
            Box::new(move |g| {
                pa.accumulate_grad(g);
                let mut gr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gr[j] += g[i * n + j];
                    }
                }
                pb.accumulate_grad(&gr);
            }),
        ))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // Iterative post-order DFS.
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.node.id) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in &t.node.parents {
            if p.node.requires_grad && !visited.contains(&p.node.id) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

// ---- raw matmul kernels (row-major) ----

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// a[m x n] . b[k x n]^T -> [m x k]
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// a[m x k]^T . b[m x n] -> [k x n]
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// Compare tape gradients of a scalar-valued computation against central
/// finite differences, returning the worst relative error over all elements
/// of all `inputs`.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    for t in inputs {
        t.zero_grad();
    }
    let out = f(inputs);
    out.backward();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut worst: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.at(i);
            t.set_at(i, orig + eps);
            let fp = f(inputs).item();
            t.set_at(i, orig - eps);
            let fm = f(inputs).item();
            t.set_at(i, orig);
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti][i];
            let denom = a.abs().max(numeric.abs());
            let err = if denom < 1e-10 {
                0.0
            } else {
                (a - numeric).abs() / denom.max(1e-6)
            };
            worst = worst.max(err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_identity_and_zero() {
        let i2 = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = i2.matmul(&i2).unwrap();
        assert_eq!(out.data(), vec![1.0, 0.0, 0.0, 1.0]);

        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::zeros(&[2, 1]);
        assert_eq!(a.matmul(&z).unwrap().data(), vec![0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message was: {msg}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut r = rng(7);
        let a = Tensor::randn_param(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn_param(&[4, 2], 1.0, &mut r);
        let err = check_gradients(
            |ins| ins[0].matmul(&ins[1]).unwrap().sum_all(),
            &[a, b],
            1e-5,
        );
        assert!(err < 1e-6, "matmul grad error {err}");
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let x = Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]);
        let s = x.softmax_rows().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let c = 4.2;
        let x = Tensor::from_vec(&[1, 2], vec![c, c + std::f64::consts::LN_2]);
        let s = x.softmax_rows().unwrap().data();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_stable() {
        let x = Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]);
        let s = x.softmax_rows().unwrap().data();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1] < 1e-12);
    }

    #[test]
    fn softmax_nan_input_is_error() {
        let x = Tensor::from_vec(&[1, 2], vec![f64::NAN, 0.0]);
        assert!(matches!(
            x.softmax_rows(),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = rng(3);
        for _ in 0..20 {
            let x = Tensor::randn(&[4, 7], 10.0, &mut r);
            let s = x.softmax_rows().unwrap().data();
            for i in 0..4 {
                let sum: f64 = s[i * 7..(i + 1) * 7].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_beta() {
        let x = Tensor::from_vec(&[1, 4], vec![5.0, 5.0, 5.0, 5.0]);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap().data();
        for v in y {
            assert!(v.abs() < 1e-8);
        }
        let gamma0 = Tensor::zeros(&[4]);
        let beta2 = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.layer_norm(&gamma0, &beta2, 1e-5).unwrap().data();
        assert_eq!(y, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn layer_norm_moments() {
        let mut r = rng(11);
        let x = Tensor::randn(&[3, 16], 2.0, &mut r);
        let gamma = Tensor::full(&[16], 1.0);
        let beta = Tensor::zeros(&[16]);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap().data();
        for i in 0..3 {
            let row = &y[i * 16..(i + 1) * 16];
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_gradient() {
        let mut r = rng(5);
        let x = Tensor::randn_param(&[2, 6], 1.0, &mut r);
        let gamma = Tensor::randn_param(&[6], 0.5, &mut r);
        let beta = Tensor::randn_param(&[6], 0.5, &mut r);
        let err = check_gradients(
            |ins| {
                ins[0]
                    .layer_norm(&ins[1], &ins[2], 1e-5)
                    .unwrap()
                    .mul(&ins[0].layer_norm(&ins[1], &ins[2], 1e-5).unwrap())
                    .unwrap()
                    .sum_all()
            },
            &[x, gamma, beta],
            1e-5,
        );
        assert!(err < 1e-5, "layer_norm grad error {err}");
    }

    #[test]
    fn check_gradients_analytic_square() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let err = check_gradients(|ins| ins[0].mul(&ins[0]).unwrap().sum_all(), &[x.clone()], 1e-5);
        assert!(err < 1e-8);
        // analytic grad is [2, 4]
        x.zero_grad();
        let y = x.mul(&x).unwrap().sum_all();
        y.backward();
        let g = x.grad().unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn check_gradients_constant_function() {
        let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]);
        let err = check_gradients(|_| Tensor::scalar(3.5), &[x], 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn l2_normalize_unit_norm_and_zero_row() {
        let mut r = rng(2);
        let x = Tensor::randn(&[5, 8], 3.0, &mut r);
        let y = x.l2_normalize_rows().unwrap().data();
        for i in 0..5 {
            let norm: f64 = y[i * 8..(i + 1) * 8].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        let z = Tensor::zeros(&[1, 4]);
        assert_eq!(z.l2_normalize_rows().unwrap().data(), vec![0.0; 4]);
    }

    #[test]
    fn tape_linearity_of_branches() {
        let mut r = rng(9);
        let x = Tensor::randn_param(&[4], 1.0, &mut r);

        // combined: backward of (f + g)
        x.zero_grad();
        let f = x.mul(&x).unwrap().sum_all();
        let g = x.sigmoid().sum_all();
        let total = f.add(&g).unwrap();
        total.backward();
        let combined = x.grad().unwrap();

        // separate backward passes accumulate
        x.zero_grad();
        x.mul(&x).unwrap().sum_all().backward();
        x.sigmoid().sum_all().backward();
        let separate = x.grad().unwrap();

        for (a, b) in combined.iter().zip(&separate) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn primitive_ops_pass_gradient_checks() {
        for seed in 0..10u64 {
            let mut r = rng(seed);
            let a = Tensor::randn_param(&[3, 5], 1.0, &mut r);
            let b = Tensor::randn_param(&[3, 5], 1.0, &mut r);
            let cases: Vec<(&str, Box<dyn Fn(&[Tensor]) -> Tensor>)> = vec![
                ("add", Box::new(|i: &[Tensor]| i[0].add(&i[1]).unwrap().sum_all())),
                ("sub", Box::new(|i: &[Tensor]| i[0].sub(&i[1]).unwrap().sum_all())),
                ("mul", Box::new(|i: &[Tensor]| i[0].mul(&i[1]).unwrap().sum_all())),
                ("scale", Box::new(|i: &[Tensor]| i[0].scale(2.5).sum_all())),
                ("gelu", Box::new(|i: &[Tensor]| i[0].gelu().sum_all())),
                ("sigmoid", Box::new(|i: &[Tensor]| i[0].sigmoid().sum_all())),
                (
                    "softmax",
                    Box::new(|i: &[Tensor]| {
                        i[0].softmax_rows().unwrap().mul(&i[1]).unwrap().sum_all()
                    }),
                ),
                (
                    "transpose",
                    Box::new(|i: &[Tensor]| {
                        i[0].transpose().unwrap().sigmoid().sum_all()
                    }),
                ),
                (
                    "mean_axis0",
                    Box::new(|i: &[Tensor]| i[0].mean_axis(0).unwrap().sigmoid().sum_all()),
                ),
                (
                    "mean_axis1",
                    Box::new(|i: &[Tensor]| i[0].mean_axis(1).unwrap().sigmoid().sum_all()),
                ),
                (
                    "concat0",
                    Box::new(|i: &[Tensor]| {
                        Tensor::concat(0, &[i[0].clone(), i[1].clone()])
                            .unwrap()
                            .sigmoid()
                            .sum_all()
                    }),
                ),
                (
                    "concat1",
                    Box::new(|i: &[Tensor]| {
                        Tensor::concat(1, &[i[0].clone(), i[1].clone()])
                            .unwrap()
                            .sigmoid()
                            .sum_all()
                    }),
                ),
                (
                    "l2norm",
                    Box::new(|i: &[Tensor]| {
                        i[0].l2_normalize_rows().unwrap().mul(&i[1]).unwrap().sum_all()
                    }),
                ),
                (
                    "slice",
                    Box::new(|i: &[Tensor]| {
                        i[0].slice_rows(1, 3)
                            .unwrap()
                            .slice_cols(0, 2)
                            .unwrap()
                            .sigmoid()
                            .sum_all()
                    }),
                ),
                (
                    "gather",
                    Box::new(|i: &[Tensor]| i[0].gather(&[0, 3, 3, 14]).unwrap().sigmoid().sum_all()),
                ),
            ];
            for (name, f) in cases {
                let err = check_gradients(&f, &[a.clone(), b.clone()], 1e-5);
                assert!(err < 1e-3, "{name} grad error {err} at seed {seed}");
            }
            // log on positive inputs
            let pos = Tensor::param(&[4], vec![0.5, 1.2, 3.0, 0.07]);
            let err = check_gradients(|i| i[0].log().sum_all(), &[pos], 1e-7);
            assert!(err < 1e-3, "log grad error {err}");
            // relu away from the kink
            let rr = Tensor::param(&[4], vec![0.5, -1.2, 3.0, -0.07]);
            let err = check_gradients(|i| i[0].relu().sum_all(), &[rr], 1e-5);
            assert!(err < 1e-3, "relu grad error {err}");
            // embedding lookup
            let table = Tensor::randn_param(&[6, 4], 1.0, &mut r);
            let err = check_gradients(
                |i| {
                    Tensor::embedding_lookup(&i[0], &[1, 4, 1])
                        .unwrap()
                        .sigmoid()
                        .sum_all()
                },
                &[table],
                1e-5,
            );
            assert!(err < 1e-3, "embedding grad error {err}");
        }
    }

    #[test]
    fn relu_subgradient_zero_at_boundary() {
        let x = Tensor::param(&[1], vec![0.0]);
        let y = x.relu().sum_all();
        y.backward();
        assert_eq!(x.grad().unwrap()[0], 0.0);
    }
}
