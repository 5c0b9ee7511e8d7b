//! Minimal reverse-mode differentiation over small dense matrices.

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param { offset: usize },
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Broadcast a `1×c` row over every row of `a`.
    AddRow(Var, Var),
    Tanh(Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    SoftmaxRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations during a forward pass; [`Tape::backward`] then
/// accumulates gradients into a flat parameter-gradient buffer.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Parameter block of shape `rows×cols` starting at `offset` in `params`.
    pub fn param(&mut self, params: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        let t = Tensor::new(rows, cols, params[offset..offset + rows * cols].to_vec());
        self.push(t, Op::Param { offset })
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.rows, "matmul shapes");
        let mut out = Tensor::zeros(x.rows, y.cols);
        for r in 0..x.rows {
            for k in 0..x.cols {
                let xv = x.data[r * x.cols + k];
                if xv == 0.0 {
                    continue;
                }
                let yr = &y.data[k * y.cols..(k + 1) * y.cols];
                let or = &mut out.data[r * y.cols..(r + 1) * y.cols];
                for (o, yv) in or.iter_mut().zip(yr) {
                    *o += xv * yv;
                }
            }
        }
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "matmul_t shapes");
        let mut out = Tensor::zeros(x.rows, y.rows);
        for r in 0..x.rows {
            for c in 0..y.rows {
                out.data[r * y.rows + c] = x.row(r).iter().zip(y.row(c)).map(|(p, q)| p * q).sum();
            }
        }
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!((x.rows, x.cols), (y.rows, y.cols), "add shapes");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.rows, x.cols, data);
        self.push(t, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert!(b.rows == 1 && b.cols == x.cols, "bias shape");
        let mut t = x.clone();
        for r in 0..t.rows {
            for c in 0..t.cols {
                t.data[r * t.cols + c] += b.data[c];
            }
        }
        self.push(t, Op::AddRow(a, bias))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v.tanh()).collect());
        self.push(t, Op::Tanh(a))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(k.len(), x.data.len(), "mask shape");
        let t = Tensor::new(x.rows, x.cols, x.data.iter().zip(&k).map(|(p, q)| p * q).collect());
        self.push(t, Op::MulConst(a, k))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.rows, x.cols, x.data.iter().map(|v| v * s).collect());
        self.push(t, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut t = x.clone();
        for r in 0..t.rows {
            let row = &mut t.data[r * x.cols..(r + 1) * x.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(t, Op::SoftmaxRows(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows, "row slice");
        let t = Tensor::new(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        self.push(t, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "column slice");
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(Tensor::new(x.rows, len, data), Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols, cols, "concat_rows shapes");
            data.extend_from_slice(&x.data);
            rows += x.rows;
        }
        self.push(Tensor::new(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut t = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows, "concat_cols shapes");
            for r in 0..rows {
                t.data[r * cols + c0..r * cols + c0 + x.cols].copy_from_slice(x.row(r));
            }
            c0 += x.cols;
        }
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    /// Propagate `seeds` (gradients of the loss with respect to some nodes)
    /// back to the parameters, accumulating into `param_grad`.
    pub fn backward(&self, seeds: &[(Var, Vec<f64>)], param_grad: &mut [f64]) {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(g.len(), self.nodes[v.0].value.data.len(), "seed shape");
            accumulate(&mut grads[v.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (p, v) in param_grad[*offset..*offset + g.len()].iter_mut().zip(&g) {
                        *p += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (x.rows, x.cols, y.cols);
                    let mut ga = vec![0.0; n * k];
                    let mut gb = vec![0.0; k * m];
                    for r in 0..n {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let xv = x.data[r * k + kk];
                            for c in 0..m {
                                let gv = g[r * m + c];
                                acc += gv * y.data[kk * m + c];
                                gb[kk * m + c] += xv * gv;
                            }
                            ga[r * k + kk] = acc;
                        }
                    }
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::MatMulT(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (x.rows, x.cols, y.rows);
                    let mut ga = vec![0.0; n * k];
                    let mut gb = vec![0.0; m * k];
                    for r in 0..n {
                        for c in 0..m {
                            let gv = g[r * m + c];
                            if gv == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                ga[r * k + kk] += gv * y.data[c * k + kk];
                                gb[c * k + kk] += gv * x.data[r * k + kk];
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], &ga);
                    accumulate(&mut grads[b.0], &gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::AddRow(a, bias) => {
                    let cols = node.value.cols;
                    let mut gb = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % cols] += v;
                    }
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[bias.0], &gb);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g.iter().zip(&node.value.data).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::MulConst(a, k) => {
                    let ga: Vec<f64> = g.iter().zip(k).map(|(gv, kv)| gv * kv).collect();
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::Scale(a, s) => {
                    let ga: Vec<f64> = g.iter().map(|gv| gv * s).collect();
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = vec![0.0; g.len()];
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &g[r * y.cols..(r + 1) * y.cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..y.cols {
                            ga[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::SliceRows(a, start) => {
                    let x = self.value(*a);
                    let mut ga = vec![0.0; x.data.len()];
                    ga[start * x.cols..start * x.cols + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let len = node.value.cols;
                    let mut ga = vec![0.0; x.data.len()];
                    for r in 0..x.rows {
                        ga[r * x.cols + start..r * x.cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(&mut grads[a.0], &ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).data.len();
                        accumulate(&mut grads[p.0], &g[off..off + n]);
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let cols = node.value.cols;
                    let mut c0 = 0;
                    for p in parts {
                        let x = self.value(*p);
                        let mut gp = vec![0.0; x.data.len()];
                        for r in 0..x.rows {
                            gp[r * x.cols..(r + 1) * x.cols]
                                .copy_from_slice(&g[r * cols + c0..r * cols + c0 + x.cols]);
                        }
                        accumulate(&mut grads[p.0], &gp);
                        c0 += x.cols;
                    }
                }
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}
