//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A `Tape` records every operation of a forward pass; `backward` replays it
//! in reverse accumulating gradients. All tensors are 2-D; vectors are 1xN or
//! Nx1 rows/columns. Sequence-structured computations (per-walk attention,
//! per-walk pooling) flatten the batch into the row dimension and use the
//! block ops, which keeps the tape short and the matrix products large.

use ndarray::{s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input tensor; gradient is accumulated but has no inputs of its own.
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    /// Elementwise product.
    Mul(usize, usize),
    /// Multiply by a compile-time constant.
    Scale(usize, f64),
    /// Add a 1xN row to every row of an MxN matrix.
    AddRow(usize, usize),
    /// Multiply every row of an MxN matrix elementwise by a 1xN row.
    MulRow(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    /// Horizontal concatenation [A | B].
    ConcatCols(usize, usize),
    /// Select rows by index; backward scatter-adds.
    GatherRows(usize, Vec<usize>),
    SumAll(usize),
    SumSquares(usize),
    /// Standardize each column to zero mean / unit variance (batch-norm core).
    ColStandardize(usize),
    /// Standardize each row (layer-norm core).
    RowStandardize(usize),
    /// Scaled dot-product attention applied independently per block:
    /// rows of q are consecutive blocks of `q_block`, rows of k/v consecutive
    /// blocks of `kv_block`; per block y = softmax(q k^T * scale) v.
    BlockAttention {
        q: usize,
        k: usize,
        v: usize,
        q_block: usize,
        kv_block: usize,
        scale: f64,
    },
    /// Mean over each consecutive block of `block` rows.
    BlockMeanRows(usize, usize),
}

struct Node {
    op: Op,
    value: Array2<f64>,
    /// Op-specific cache (softmax weights, standardization sigmas).
    aux: Option<Array2<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Array2<f64>, aux: Option<Array2<f64>>) -> Var {
        self.nodes.push(Node { op, value, aux });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(Op::MatMul(a.0, b.0), y, None)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let y = self.nodes[a.0].value.t().to_owned();
        self.push(Op::Transpose(a.0), y, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a.0, b.0), y, None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(Op::Sub(a.0, b.0), y, None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(Op::Mul(a.0, b.0), y, None)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = &self.nodes[a.0].value * c;
        self.push(Op::Scale(a.0, c), y, None)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.nodes[row.0].value.row(0).to_owned();
        let y = &self.nodes[a.0].value + &r;
        self.push(Op::AddRow(a.0, row.0), y, None)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.nodes[row.0].value.row(0).to_owned();
        let y = &self.nodes[a.0].value * &r;
        self.push(Op::MulRow(a.0, row.0), y, None)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(Op::Tanh(a.0), y, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a.0), y, None)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(Op::Relu(a.0), y, None)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.nrows(), bv.nrows());
        let mut y = Array2::zeros((av.nrows(), av.ncols() + bv.ncols()));
        y.slice_mut(s![.., ..av.ncols()]).assign(av);
        y.slice_mut(s![.., av.ncols()..]).assign(bv);
        self.push(Op::ConcatCols(a.0, b.0), y, None)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let av = &self.nodes[a.0].value;
        let mut y = Array2::zeros((rows.len(), av.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            y.row_mut(i).assign(&av.row(r));
        }
        self.push(Op::GatherRows(a.0, rows), y, None)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let y = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(Op::SumAll(a.0), y, None)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let y = Array2::from_elem((1, 1), self.nodes[a.0].value.mapv(|x| x * x).sum());
        self.push(Op::SumSquares(a.0), y, None)
    }

    /// (x - mean_col) / sqrt(var_col + eps); population variance over rows.
    pub fn col_standardize(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).unwrap();
        let var = x.map_axis(Axis(0), |c| {
            let m = c.sum() / n;
            c.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n
        });
        let sigma = var.mapv(|v| (v + eps).sqrt());
        let y = (x - &mean) / &sigma;
        let aux = sigma.insert_axis(Axis(0));
        self.push(Op::ColStandardize(a.0), y, Some(aux))
    }

    /// (x - mean_row) / sqrt(var_row + eps); population variance over columns.
    pub fn row_standardize(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let n = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).unwrap();
        let var = x.map_axis(Axis(1), |r| {
            let m = r.sum() / n;
            r.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n
        });
        let sigma = var.mapv(|v| (v + eps).sqrt());
        let mut y = x.clone();
        for (i, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| (v - mean[i]) / sigma[i]);
        }
        let aux = sigma.insert_axis(Axis(1));
        self.push(Op::RowStandardize(a.0), y, Some(aux))
    }

    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_block: usize,
        kv_block: usize,
        scale: f64,
    ) -> Var {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        assert_eq!(qv.nrows() % q_block, 0);
        assert_eq!(kv.nrows() % kv_block, 0);
        let blocks = qv.nrows() / q_block;
        assert_eq!(kv.nrows() / kv_block, blocks, "q/kv block count mismatch");
        assert_eq!(kv.nrows(), vv.nrows());
        assert_eq!(qv.ncols(), kv.ncols());
        let mut y = Array2::zeros((qv.nrows(), vv.ncols()));
        let mut weights = Array2::zeros((qv.nrows(), kv_block));
        for b in 0..blocks {
            let qb = qv.slice(s![b * q_block..(b + 1) * q_block, ..]);
            let kb = kv.slice(s![b * kv_block..(b + 1) * kv_block, ..]);
            let vb = vv.slice(s![b * kv_block..(b + 1) * kv_block, ..]);
            let mut scores = qb.dot(&kb.t());
            scores *= scale;
            // numerically stable row softmax
            for mut row in scores.axis_iter_mut(Axis(0)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - m).exp());
                let s = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            y.slice_mut(s![b * q_block..(b + 1) * q_block, ..])
                .assign(&scores.dot(&vb));
            weights
                .slice_mut(s![b * q_block..(b + 1) * q_block, ..])
                .assign(&scores);
        }
        self.push(
            Op::BlockAttention {
                q: q.0,
                k: k.0,
                v: v.0,
                q_block,
                kv_block,
                scale,
            },
            y,
            Some(weights),
        )
    }

    pub fn block_mean_rows(&mut self, a: Var, block: usize) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.nrows() % block, 0);
        let blocks = x.nrows() / block;
        let mut y = Array2::zeros((blocks, x.ncols()));
        for b in 0..blocks {
            let m = x
                .slice(s![b * block..(b + 1) * block, ..])
                .mean_axis(Axis(0))
                .unwrap();
            y.row_mut(b).assign(&m);
        }
        self.push(Op::BlockMeanRows(a.0, block), y, None)
    }

    /// Gradients of a scalar output with respect to every node. The output
    /// node must be 1x1.
    pub fn backward(&self, out: Var) -> Vec<Array2<f64>> {
        assert_eq!(self.nodes[out.0].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.dim()))
            .collect();
        grads[out.0][[0, 0]] = 1.0;
        for i in (0..=out.0).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[i].clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&g);
                    grads[*a] += &da;
                    grads[*b] += &db;
                }
                Op::Transpose(a) => {
                    grads[*a] += &g.t();
                }
                Op::Add(a, b) => {
                    grads[*a] += &g;
                    grads[*b] += &g;
                }
                Op::Sub(a, b) => {
                    grads[*a] += &g;
                    grads[*b] -= &g;
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    grads[*a] += &da;
                    grads[*b] += &db;
                }
                Op::Scale(a, c) => {
                    grads[*a] += &(&g * *c);
                }
                Op::AddRow(a, r) => {
                    grads[*a] += &g;
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[*r] += &gr;
                }
                Op::MulRow(a, r) => {
                    let row = self.nodes[*r].value.row(0).to_owned();
                    grads[*a] += &(&g * &row);
                    let gr = (&g * &self.nodes[*a].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    grads[*r] += &gr;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    grads[*a] += &(&g * &y.mapv(|v| 1.0 - v * v));
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    grads[*a] += &(&g * &y.mapv(|v| v * (1.0 - v)));
                }
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    grads[*a] += &(&g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.ncols();
                    grads[*a] += &g.slice(s![.., ..ca]);
                    grads[*b] += &g.slice(s![.., ca..]);
                }
                Op::GatherRows(a, rows) => {
                    let mut da = grads[*a].clone();
                    for (j, &r) in rows.iter().enumerate() {
                        let mut row = da.row_mut(r);
                        row += &g.row(j);
                    }
                    grads[*a] = da;
                }
                Op::SumAll(a) => {
                    grads[*a] += g[[0, 0]];
                }
                Op::SumSquares(a) => {
                    grads[*a] += &(&self.nodes[*a].value * (2.0 * g[[0, 0]]));
                }
                Op::ColStandardize(a) => {
                    // dx = (g - mean(g) - y * mean(g*y)) / sigma, per column
                    let y = &self.nodes[i].value;
                    let sigma = self.nodes[i].aux.as_ref().unwrap().row(0).to_owned();
                    let n = y.nrows() as f64;
                    let gm = g.sum_axis(Axis(0)) / n;
                    let gym = (&g * y).sum_axis(Axis(0)) / n;
                    let mut dx = g.clone();
                    for mut row in dx.axis_iter_mut(Axis(0)) {
                        row -= &gm;
                    }
                    dx -= &(y * &gym);
                    dx /= &sigma;
                    grads[*a] += &dx;
                }
                Op::RowStandardize(a) => {
                    let y = &self.nodes[i].value;
                    let sigma = self.nodes[i].aux.as_ref().unwrap();
                    let n = y.ncols() as f64;
                    let gm = g.sum_axis(Axis(1)) / n;
                    let gym = (&g * y).sum_axis(Axis(1)) / n;
                    let mut dx = g.clone();
                    for (r, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        row.mapv_inplace(|v| v - gm[r]);
                    }
                    for (r, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        let yr = y.row(r);
                        for (c, v) in row.iter_mut().enumerate() {
                            *v = (*v - yr[c] * gym[r]) / sigma[[r, 0]];
                        }
                    }
                    grads[*a] += &dx;
                }
                Op::BlockAttention {
                    q,
                    k,
                    v,
                    q_block,
                    kv_block,
                    scale,
                } => {
                    let weights = self.nodes[i].aux.as_ref().unwrap();
                    let (qv, kv_, vv) = (
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                    );
                    let blocks = qv.nrows() / q_block;
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv_.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for b in 0..blocks {
                        let qr = b * q_block..(b + 1) * q_block;
                        let kr = b * kv_block..(b + 1) * kv_block;
                        let a_b = weights.slice(s![qr.clone(), ..]);
                        let g_b = g.slice(s![qr.clone(), ..]);
                        let qb = qv.slice(s![qr.clone(), ..]);
                        let kb = kv_.slice(s![kr.clone(), ..]);
                        let vb = vv.slice(s![kr.clone(), ..]);
                        dv.slice_mut(s![kr.clone(), ..])
                            .scaled_add(1.0, &a_b.t().dot(&g_b));
                        let da = g_b.dot(&vb.t());
                        // softmax Jacobian per row
                        let mut ds = Array2::zeros(da.dim());
                        for r in 0..da.nrows() {
                            let dot: f64 =
                                da.row(r).iter().zip(a_b.row(r)).map(|(x, y)| x * y).sum();
                            for c in 0..da.ncols() {
                                ds[[r, c]] = a_b[[r, c]] * (da[[r, c]] - dot);
                            }
                        }
                        dq.slice_mut(s![qr, ..]).scaled_add(*scale, &ds.dot(&kb));
                        dk.slice_mut(s![kr, ..]).scaled_add(*scale, &ds.t().dot(&qb));
                    }
                    grads[*q] += &dq;
                    grads[*k] += &dk;
                    grads[*v] += &dv;
                }
                Op::BlockMeanRows(a, block) => {
                    let mut da = grads[*a].clone();
                    let scale = 1.0 / *block as f64;
                    for b in 0..g.nrows() {
                        for r in b * block..(b + 1) * block {
                            let mut row = da.row_mut(r);
                            row.scaled_add(scale, &g.row(b));
                        }
                    }
                    grads[*a] = da;
                }
            }
        }
        grads
    }
}
