//! Minimal reverse-mode differentiable array engine.
//!
//! A [`Tape`] records operations in execution order; every node owns an f64
//! value buffer and an accumulated-gradient buffer of the same shape. Backward
//! rules are closures that map the node's output gradient to per-parent
//! gradient contributions, captured with whatever forward values they need.
//! A tape is confined to one thread; independent passes use independent tapes.

mod conv;
pub mod gradcheck;

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense row-major n-dimensional f64 buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Buf {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Buf {
    pub fn zeros(shape: &[usize]) -> Buf {
        Buf { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Buf> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} does not hold {} values", shape, data.len()),
            ));
        }
        Ok(Buf { shape: shape.to_vec(), data })
    }

    pub fn scalar(v: f64) -> Buf {
        Buf { shape: vec![1], data: vec![v] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Buf {
        Buf { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Rows/cols of a 2D buffer; 1D buffers count as a single row.
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => (self.shape[0], self.data.len() / self.shape[0]),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Buf {
        Buf { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    fn zip(&self, other: &Buf, f: impl Fn(f64, f64) -> f64) -> Buf {
        Buf {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

type BackFn = Box<dyn Fn(&Buf) -> Vec<(usize, Buf)>>;

struct Node {
    value: Buf,
    grad: Buf,
    requires_grad: bool,
    back: Option<BackFn>,
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn leaf(&mut self, value: Buf, requires_grad: bool) -> Var {
        let grad = Buf::zeros(value.shape());
        self.nodes.push(Node { value, grad, requires_grad, back: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Buf) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Buf {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Buf {
        &self.nodes[v.0].grad
    }

    fn push(&mut self, value: Buf, parents: &[Var], back: BackFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let grad = Buf::zeros(value.shape());
        let back = if requires_grad { Some(back) } else { None };
        self.nodes.push(Node { value, grad, requires_grad, back });
        Var(self.nodes.len() - 1)
    }

    /// Accumulate gradients of a scalar root into every upstream node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardReplayed);
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NotScalar);
        }
        self.backward_done = true;
        self.nodes[root.0].grad.data[0] = 1.0;
        for i in (0..=root.0).rev() {
            let contribs = {
                let node = &self.nodes[i];
                if !node.requires_grad {
                    continue;
                }
                match &node.back {
                    Some(f) => f(&node.grad),
                    None => continue,
                }
            };
            for (parent, gb) in contribs {
                let dst = &mut self.nodes[parent].grad;
                debug_assert_eq!(dst.shape(), gb.shape());
                for (d, s) in dst.data.iter_mut().zip(&gb.data) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x + y);
        Ok(self.push(value, &[a, b], Box::new(move |g| {
            vec![(a.0, g.clone()), (b.0, g.clone())]
        })))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.nodes[a.0].value.zip(&self.nodes[b.0].value, |x, y| x - y);
        Ok(self.push(value, &[a, b], Box::new(move |g| {
            vec![(a.0, g.clone()), (b.0, g.map(|v| -v))]
        })))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        let value = va.zip(&vb, |x, y| x * y);
        Ok(self.push(value, &[a, b], Box::new(move |g| {
            vec![(a.0, g.zip(&vb, |gv, y| gv * y)), (b.0, g.zip(&va, |gv, x| gv * x))]
        })))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        let value = va.zip(&vb, |x, y| x / y);
        Ok(self.push(value, &[a, b], Box::new(move |g| {
            let da = g.zip(&vb, |gv, y| gv / y);
            let mut db = Buf::zeros(g.shape());
            for i in 0..db.len() {
                db.data[i] = -g.data[i] * va.data[i] / (vb.data[i] * vb.data[i]);
            }
            vec![(a.0, da), (b.0, db)]
        })))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|v| -v);
        self.push(value, &[a], Box::new(move |g| vec![(a.0, g.map(|v| -v))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v + s);
        self.push(value, &[a], Box::new(move |g| vec![(a.0, g.clone())]))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v * s);
        self.push(value, &[a], Box::new(move |g| vec![(a.0, g.map(|v| v * s))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.nodes[a.0].value.clone();
        let value = va.map(|v| v.max(0.0));
        self.push(value, &[a], Box::new(move |g| {
            vec![(a.0, g.zip(&va, |gv, x| if x > 0.0 { gv } else { 0.0 }))]
        }))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(f64::exp);
        let out = value.clone();
        self.push(value, &[a], Box::new(move |g| vec![(a.0, g.zip(&out, |gv, y| gv * y))]))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let va = self.nodes[a.0].value.clone();
        let value = va.map(f64::ln);
        self.push(value, &[a], Box::new(move |g| vec![(a.0, g.zip(&va, |gv, x| gv / x))]))
    }

    /// Elementwise `atan2(a, b)`; not differentiable at (0, 0).
    pub fn atan2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("atan2", a, b)?;
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        let value = va.zip(&vb, f64::atan2);
        Ok(self.push(value, &[a, b], Box::new(move |g| {
            let mut da = Buf::zeros(g.shape());
            let mut db = Buf::zeros(g.shape());
            for i in 0..g.len() {
                let denom = va.data[i] * va.data[i] + vb.data[i] * vb.data[i];
                da.data[i] = g.data[i] * vb.data[i] / denom;
                db.data[i] = -g.data[i] * va.data[i] / denom;
            }
            vec![(a.0, da), (b.0, db)]
        })))
    }

    /// Identity forward, zero backward.
    pub fn detach(&mut self, a: Var) -> Var {
        self.constant(self.nodes[a.0].value.clone())
    }

    // ---- broadcasting over rows ----

    fn row_broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (rows, cols) = self.nodes[a.0].value.rows_cols();
        if self.nodes[b.0].value.len() != cols {
            return Err(Error::shape(
                op,
                format!(
                    "row vector of {} values against matrix {:?}",
                    self.nodes[b.0].value.len(),
                    self.nodes[a.0].value.shape()
                ),
            ));
        }
        Ok((rows, cols))
    }

    /// `a[r, c] + b[c]`
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.row_broadcast_check("add_row", a, b)?;
        let mut value = self.nodes[a.0].value.clone();
        for r in 0..rows {
            for c in 0..cols {
                value.data[r * cols + c] += self.nodes[b.0].value.data[c];
            }
        }
        Ok(self.push(value, &[a, b], Box::new(move |g| {
            let mut db = Buf::zeros(&[cols]);
            for r in 0..rows {
                for c in 0..cols {
                    db.data[c] += g.data[r * cols + c];
                }
            }
            vec![(a.0, g.clone()), (b.0, db)]
        })))
    }

    /// `a[r, c] * b[c]`
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.row_broadcast_check("mul_row", a, b)?;
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        let mut value = va.clone();
        for r in 0..rows {
            for c in 0..cols {
                value.data[r * cols + c] *= vb.data[c];
            }
        }
        Ok(self.push(value, &[a, b], Box::new(move |g| {
            let mut da = Buf::zeros(va.shape());
            let mut db = Buf::zeros(&[cols]);
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    da.data[i] = g.data[i] * vb.data[c];
                    db.data[c] += g.data[i] * va.data[i];
                }
            }
            vec![(a.0, da), (b.0, db)]
        })))
    }

    // ---- linear algebra ----

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected 2D, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m, k] x b[k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2("matmul", a)?;
        let (kb, n) = self.dims2("matmul", b)?;
        if ka != kb {
            return Err(Error::shape("matmul", format!("inner dims {ka} vs {kb}")));
        }
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        let value = mat_mul(&va, &vb, m, ka, n);
        Ok(self.push(value, &[a, b], Box::new(move |g| {
            // dA = G * B^T, dB = A^T * G
            let da = mat_mul_nt(g, &vb, m, n, ka);
            let db = mat_mul_tn(&va, g, ka, m, n);
            vec![(a.0, da), (b.0, db)]
        })))
    }

    /// `a[m, k] x b[n, k]^T -> [m, n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2("matmul_nt", a)?;
        let (n, kb) = self.dims2("matmul_nt", b)?;
        if ka != kb {
            return Err(Error::shape("matmul_nt", format!("inner dims {ka} vs {kb}")));
        }
        let va = self.nodes[a.0].value.clone();
        let vb = self.nodes[b.0].value.clone();
        let value = mat_mul_nt(&va, &vb, m, ka, n);
        Ok(self.push(value, &[a, b], Box::new(move |g| {
            // dA = G * B, dB = G^T * A
            let da = mat_mul(g, &vb, m, n, ka);
            let db = mat_mul_tn(g, &va, n, m, ka);
            vec![(a.0, da), (b.0, db)]
        })))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let va = &self.nodes[a.0].value;
        let mut value = Buf::zeros(&[n, m]);
        for r in 0..m {
            for c in 0..n {
                value.data[c * m + r] = va.data[r * n + c];
            }
        }
        Ok(self.push(value, &[a], Box::new(move |g| {
            let mut da = Buf::zeros(&[m, n]);
            for r in 0..m {
                for c in 0..n {
                    da.data[r * n + c] = g.data[c * m + r];
                }
            }
            vec![(a.0, da)]
        })))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let node_len = self.nodes[a.0].value.len();
        if shape.iter().product::<usize>() != node_len {
            return Err(Error::shape("reshape", format!("{node_len} values into {shape:?}")));
        }
        let mut value = self.nodes[a.0].value.clone();
        value.shape = shape.to_vec();
        let old_shape = self.nodes[a.0].value.shape().to_vec();
        Ok(self.push(value, &[a], Box::new(move |g| {
            let mut gb = g.clone();
            gb.shape = old_shape.clone();
            vec![(a.0, gb)]
        })))
    }

    // ---- shuffling rows and columns ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs".to_string()));
        }
        let (_, cols) = self.dims2("concat_rows", parts[0])?;
        let mut data = Vec::new();
        let mut spans = Vec::new(); // (parent, rows)
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("cols {c} vs {cols}")));
            }
            data.extend_from_slice(self.nodes[p.0].value.data());
            spans.push((p.0, r));
            total_rows += r;
        }
        let value = Buf::from_vec(&[total_rows, cols], data)?;
        Ok(self.push(value, parts, Box::new(move |g| {
            let mut out = Vec::with_capacity(spans.len());
            let mut row = 0;
            for &(p, r) in &spans {
                let slice = g.data[row * cols..(row + r) * cols].to_vec();
                out.push((p, Buf { shape: vec![r, cols], data: slice }));
                row += r;
            }
            out
        })))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_rows", a)?;
        if start >= end || end > rows {
            return Err(Error::shape("slice_rows", format!("[{start}, {end}) of {rows} rows")));
        }
        let data = self.nodes[a.0].value.data[start * cols..end * cols].to_vec();
        let value = Buf::from_vec(&[end - start, cols], data)?;
        Ok(self.push(value, &[a], Box::new(move |g| {
            let mut da = Buf::zeros(&[rows, cols]);
            da.data[start * cols..end * cols].copy_from_slice(&g.data);
            vec![(a.0, da)]
        })))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("slice_cols", a)?;
        if start >= end || end > cols {
            return Err(Error::shape("slice_cols", format!("[{start}, {end}) of {cols} cols")));
        }
        let w = end - start;
        let mut value = Buf::zeros(&[rows, w]);
        for r in 0..rows {
            value.data[r * w..(r + 1) * w]
                .copy_from_slice(&self.nodes[a.0].value.data[r * cols + start..r * cols + end]);
        }
        Ok(self.push(value, &[a], Box::new(move |g| {
            let mut da = Buf::zeros(&[rows, cols]);
            for r in 0..rows {
                da.data[r * cols + start..r * cols + end]
                    .copy_from_slice(&g.data[r * w..(r + 1) * w]);
            }
            vec![(a.0, da)]
        })))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs".to_string()));
        }
        let (rows, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::new();
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("rows {r} vs {rows}")));
            }
            widths.push((p.0, c));
            total += c;
        }
        let mut value = Buf::zeros(&[rows, total]);
        let mut off = 0;
        for &(p, c) in &widths {
            for r in 0..rows {
                value.data[r * total + off..r * total + off + c]
                    .copy_from_slice(&self.nodes[p].value.data[r * c..(r + 1) * c]);
            }
            off += c;
        }
        Ok(self.push(value, parts, Box::new(move |g| {
            let mut out = Vec::with_capacity(widths.len());
            let mut off = 0;
            for &(p, c) in &widths {
                let mut gb = Buf::zeros(&[rows, c]);
                for r in 0..rows {
                    gb.data[r * c..(r + 1) * c]
                        .copy_from_slice(&g.data[r * total + off..r * total + off + c]);
                }
                out.push((p, gb));
                off += c;
            }
            out
        })))
    }

    /// `out[i] = a[indices[i]]`; backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2("gather_rows", a)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {bad} of {rows} rows")));
        }
        let idx = indices.to_vec();
        let mut value = Buf::zeros(&[idx.len(), cols]);
        for (o, &i) in idx.iter().enumerate() {
            value.data[o * cols..(o + 1) * cols]
                .copy_from_slice(&self.nodes[a.0].value.data[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(value, &[a], Box::new(move |g| {
            let mut da = Buf::zeros(&[rows, cols]);
            for (o, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    da.data[i * cols + c] += g.data[o * cols + c];
                }
            }
            vec![(a.0, da)]
        })))
    }

    /// Place row `i` of `a` at row `indices[i]` of a zero `[total_rows, c]` matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, indices: &[usize], total_rows: usize) -> Result<Var> {
        let (rows, cols) = self.dims2("scatter_rows", a)?;
        if rows != indices.len() {
            return Err(Error::shape("scatter_rows", format!("{rows} rows vs {} indices", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= total_rows) {
            return Err(Error::shape("scatter_rows", format!("index {bad} of {total_rows} rows")));
        }
        let idx = indices.to_vec();
        let mut value = Buf::zeros(&[total_rows, cols]);
        for (r, &i) in idx.iter().enumerate() {
            value.data[i * cols..(i + 1) * cols]
                .copy_from_slice(&self.nodes[a.0].value.data[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(value, &[a], Box::new(move |g| {
            let mut da = Buf::zeros(&[rows, cols]);
            for (r, &i) in idx.iter().enumerate() {
                da.data[r * cols..(r + 1) * cols].copy_from_slice(&g.data[i * cols..(i + 1) * cols]);
            }
            vec![(a.0, da)]
        })))
    }

    // ---- reductions and normalization ----

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Buf::scalar(self.nodes[a.0].value.data.iter().sum());
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(value, &[a], Box::new(move |g| {
            vec![(a.0, Buf::filled(&shape, g.data[0]))]
        }))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let value = Buf::scalar(self.nodes[a.0].value.data.iter().sum::<f64>() / n);
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(value, &[a], Box::new(move |g| {
            vec![(a.0, Buf::filled(&shape, g.data[0] / n))]
        }))
    }

    /// Column sums of a 2D buffer: `[r, c] -> [c]`.
    pub fn col_sums(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("col_sums", a)?;
        let mut value = Buf::zeros(&[cols]);
        for r in 0..rows {
            for c in 0..cols {
                value.data[c] += self.nodes[a.0].value.data[r * cols + c];
            }
        }
        Ok(self.push(value, &[a], Box::new(move |g| {
            let mut da = Buf::zeros(&[rows, cols]);
            for r in 0..rows {
                for c in 0..cols {
                    da.data[r * cols + c] = g.data[c];
                }
            }
            vec![(a.0, da)]
        })))
    }

    /// Single element by flat index, as a scalar.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let node_len = self.nodes[a.0].value.len();
        if index >= node_len {
            return Err(Error::shape("select", format!("index {index} of {node_len}")));
        }
        let value = Buf::scalar(self.nodes[a.0].value.data[index]);
        let shape = self.nodes[a.0].value.shape().to_vec();
        Ok(self.push(value, &[a], Box::new(move |g| {
            let mut da = Buf::zeros(&shape);
            da.data[index] = g.data[0];
            vec![(a.0, da)]
        })))
    }

    /// Softmax over the last axis (each row of a 2D buffer, or the whole 1D buffer).
    pub fn softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = self.nodes[a.0].value.rows_cols();
        let va = &self.nodes[a.0].value;
        let mut value = va.clone();
        for r in 0..rows {
            let row = &mut value.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                denom += *v;
            }
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        let out = value.clone();
        self.push(value, &[a], Box::new(move |g| {
            let mut da = Buf::zeros(g.shape());
            for r in 0..rows {
                let y = &out.data[r * cols..(r + 1) * cols];
                let gr = &g.data[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                for c in 0..cols {
                    da.data[r * cols + c] = y[c] * (gr[c] - dot);
                }
            }
            vec![(a.0, da)]
        }))
    }

    /// Layer norm over the last axis with `(x - mean) / sqrt(var + eps)`, no affine.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (rows, cols) = self.nodes[a.0].value.rows_cols();
        let va = &self.nodes[a.0].value;
        let mut value = va.clone();
        let mut sigmas = vec![0.0; rows];
        for r in 0..rows {
            let row = &mut value.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let sigma = (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) / sigma;
            }
            sigmas[r] = sigma;
        }
        let xhat = value.clone();
        Ok(self.push(value, &[a], Box::new(move |g| {
            let mut da = Buf::zeros(g.shape());
            let inv_n = 1.0 / cols as f64;
            for r in 0..rows {
                let xh = &xhat.data[r * cols..(r + 1) * cols];
                let gr = &g.data[r * cols..(r + 1) * cols];
                let g_mean: f64 = gr.iter().sum::<f64>() * inv_n;
                let gx_mean: f64 = gr.iter().zip(xh).map(|(&gi, &xi)| gi * xi).sum::<f64>() * inv_n;
                for c in 0..cols {
                    da.data[r * cols + c] = (gr[c] - g_mean - xh[c] * gx_mean) / sigmas[r];
                }
            }
            vec![(a.0, da)]
        })))
    }

    /// `sum_k coeffs[k] * parts[k]`, all parts the same shape.
    pub fn linear_combination(&mut self, coeffs: Var, parts: &[Var]) -> Result<Var> {
        let k = self.nodes[coeffs.0].value.len();
        if k != parts.len() {
            return Err(Error::shape(
                "linear_combination",
                format!("{k} coefficients vs {} parts", parts.len()),
            ));
        }
        let shape = self.nodes[parts[0].0].value.shape().to_vec();
        for &p in parts {
            if self.nodes[p.0].value.shape() != shape.as_slice() {
                return Err(Error::shape("linear_combination", "part shapes differ".to_string()));
            }
        }
        let cs = self.nodes[coeffs.0].value.clone();
        let part_vals: Vec<Buf> = parts.iter().map(|&p| self.nodes[p.0].value.clone()).collect();
        let part_ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let mut value = Buf::zeros(&shape);
        for (i, pv) in part_vals.iter().enumerate() {
            let c = cs.data[i];
            if c != 0.0 {
                for (o, &v) in value.data.iter_mut().zip(&pv.data) {
                    *o += c * v;
                }
            }
        }
        let mut all_parents = vec![coeffs];
        all_parents.extend_from_slice(parts);
        Ok(self.push(value, &all_parents, Box::new(move |g| {
            let mut out = Vec::with_capacity(part_ids.len() + 1);
            let mut dc = Buf::zeros(cs.shape());
            for (i, pv) in part_vals.iter().enumerate() {
                dc.data[i] = g.data.iter().zip(&pv.data).map(|(&gv, &v)| gv * v).sum();
            }
            out.push((coeffs.0, dc));
            for (i, &p) in part_ids.iter().enumerate() {
                out.push((p, g.map(|v| v * cs.data[i])));
            }
            out
        })))
    }

    /// Two-layer MLP with relu: `relu(x w1 + b1) w2 + b2`.
    pub fn mlp_forward(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let h = self.matmul(x, w1)?;
        let h = self.add_row(h, b1)?;
        let h = self.relu(h);
        let o = self.matmul(h, w2)?;
        self.add_row(o, b2)
    }
}

fn mat_mul(a: &Buf, b: &Buf, m: usize, k: usize, n: usize) -> Buf {
    let mut out = Buf::zeros(&[m, n]);
    for r in 0..m {
        for i in 0..k {
            let av = a.data[r * k + i];
            if av == 0.0 {
                continue;
            }
            for c in 0..n {
                out.data[r * n + c] += av * b.data[i * n + c];
            }
        }
    }
    out
}

// a[m, k] * b[n, k]^T
fn mat_mul_nt(a: &Buf, b: &Buf, m: usize, k: usize, n: usize) -> Buf {
    let mut out = Buf::zeros(&[m, n]);
    for r in 0..m {
        for c in 0..n {
            let mut acc = 0.0;
            for i in 0..k {
                acc += a.data[r * k + i] * b.data[c * k + i];
            }
            out.data[r * n + c] = acc;
        }
    }
    out
}

// a[k, m]^T * b[k, n]
fn mat_mul_tn(a: &Buf, b: &Buf, m: usize, k: usize, n: usize) -> Buf {
    let mut out = Buf::zeros(&[m, n]);
    for i in 0..k {
        for r in 0..m {
            let av = a.data[i * m + r];
            if av == 0.0 {
                continue;
            }
            for c in 0..n {
                out.data[r * n + c] += av * b.data[i * n + c];
            }
        }
    }
    out
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_logits() {
        let mut t = Tape::new();
        let x = t.leaf(Buf::from_vec(&[3], vec![0.0; 3]).unwrap(), true);
        let y = t.softmax(x);
        for &v in t.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(Buf::from_vec(&[3, 4], (0..12).map(|i| (i as f64).sin() * 5.0).collect()).unwrap(), true);
        let y = t.softmax(x);
        let v = t.value(y);
        for r in 0..3 {
            let s: f64 = v.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(v.data()[r * 4..(r + 1) * 4].iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut t = Tape::new();
        let x = t.leaf(Buf::from_vec(&[1, 5], vec![3.0, -1.0, 4.0, 1.0, 5.0]).unwrap(), true);
        let y = t.layer_norm(x, 1e-12).unwrap();
        let v = t.value(y);
        let mean: f64 = v.data().iter().sum::<f64>() / 5.0;
        let var: f64 = v.data().iter().map(|&u| (u - mean) * (u - mean)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        // f(x) = sum(x) + sum(x) doubles the gradient.
        let mut t = Tape::new();
        let x = t.leaf(Buf::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s1 = t.sum(x);
        let s2 = t.sum(x);
        let f = t.add(s1, s2).unwrap();
        t.backward(f).unwrap();
        assert_eq!(t.grad(x).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut t = Tape::new();
        let x = t.leaf(Buf::scalar(2.0), true);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::BackwardReplayed)));
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Buf::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        assert!(matches!(t.backward(x), Err(Error::NotScalar)));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut t = Tape::new();
        let a = t.leaf(Buf::zeros(&[2, 3]), true);
        let b = t.leaf(Buf::zeros(&[3, 3]), true);
        assert!(matches!(t.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(t.matmul(a, a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Buf::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
        let sq = t.mul(x, x).unwrap();
        let f = t.sum(sq);
        t.backward(f).unwrap();
        assert_eq!(t.value(f).item(), 5.0);
        assert_eq!(t.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Buf::scalar(3.0), true);
        let d = t.detach(x);
        let y = t.mul(x, d).unwrap();
        t.backward(y).unwrap();
        // d/dx (x * detach(x)) = detach(x) = 3, not 2x.
        assert_eq!(t.grad(x).item(), 3.0);
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let mut t = Tape::new();
        let x = t.leaf(Buf::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let g = t.gather_rows(x, &[2, 0, 1]).unwrap();
        let s = t.scatter_rows(g, &[2, 0, 1], 3).unwrap();
        assert_eq!(t.value(s).data(), t.value(x).data());
        let total = t.sum(s);
        t.backward(total).unwrap();
        assert_eq!(t.grad(x).data(), &[1.0; 6]);
    }

    #[test]
    fn matmul_known_product() {
        let mut t = Tape::new();
        let a = t.leaf(Buf::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap(), true);
        let b = t.leaf(Buf::from_vec(&[2, 2], vec![5., 6., 7., 8.]).unwrap(), true);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19., 22., 43., 50.]);
        let bt = t.transpose(b).unwrap();
        let c2 = t.matmul_nt(a, bt).unwrap();
        assert_eq!(t.value(c2).data(), t.value(c).data());
    }
}
