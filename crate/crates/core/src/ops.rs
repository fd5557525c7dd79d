//! Differentiable tensor operations.
//!
//! Conventions shared by every op:
//! - shapes are validated before any allocation; mismatches return
//!   [`Error::Dimension`] carrying both shapes,
//! - backward closures compute each parent's full contribution into a local
//!   buffer before accumulating, so an op may consume the same tensor twice
//!   (both contributions sum),
//! - gradients for clipped or masked-out elements are exactly zero, and
//!   pass-through gradients are bitwise copies of the upstream values.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Row-major [m,k] x [k,n] -> [m,n].
fn matmul_raw<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == S::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

impl<S: Scalar> Tensor<S> {
    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls != rs {
            return Err(dim_err("add", &ls, &rs));
        }
        let data = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect())
        });
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            ls,
            data,
            vec![self.clone(), other.clone()],
            "add",
            Box::new(move |g| {
                pa.accumulate_grad(g);
                pb.accumulate_grad(g);
            }),
        ))
    }

    /// Elementwise difference; shapes must match exactly.
    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls != rs {
            return Err(dim_err("sub", &ls, &rs));
        }
        let data = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect())
        });
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            ls,
            data,
            vec![self.clone(), other.clone()],
            "sub",
            Box::new(move |g| {
                pa.accumulate_grad(g);
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                pb.accumulate_grad(&neg);
            }),
        ))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls != rs {
            return Err(dim_err("mul", &ls, &rs));
        }
        let data = self.with_data(|a| {
            other.with_data(|b| a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect())
        });
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            ls,
            data,
            vec![self.clone(), other.clone()],
            "mul",
            Box::new(move |g| {
                if pa.requires_grad() {
                    let da: Vec<S> =
                        pb.with_data(|b| g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect());
                    pa.accumulate_grad(&da);
                }
                if pb.requires_grad() {
                    let db: Vec<S> =
                        pa.with_data(|a| g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect());
                    pb.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: S) -> Tensor<S> {
        let data = self.with_data(|a| a.iter().map(|&x| x * c).collect());
        let p = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            "scale",
            Box::new(move |g| {
                let dg: Vec<S> = g.iter().map(|&v| v * c).collect();
                p.accumulate_grad(&dg);
            }),
        )
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        let data = self.with_data(|a| a.iter().map(|&x| x + c).collect());
        let p = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            "add_scalar",
            Box::new(move |g| p.accumulate_grad(g)),
        )
    }

    /// Rectified linear unit. The subgradient at zero is taken as zero.
    pub fn relu(&self) -> Tensor<S> {
        let data = self.with_data(|a| {
            a.iter()
                .map(|&x| if x > S::zero() { x } else { S::zero() })
                .collect()
        });
        let p = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            "relu",
            Box::new(move |g| {
                let dg: Vec<S> = p.with_data(|x| {
                    g.iter()
                        .zip(x.iter())
                        .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                        .collect()
                });
                p.accumulate_grad(&dg);
            }),
        )
    }

    /// Gaussian error linear unit, tanh form:
    /// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(&self) -> Tensor<S> {
        let k = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let c = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let one = S::one();
        let three = S::from_f64(3.0);
        let data = self.with_data(|a| {
            a.iter()
                .map(|&x| {
                    let t = (k * (x + c * x * x * x)).tanh();
                    half * x * (one + t)
                })
                .collect()
        });
        let p = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            "gelu",
            Box::new(move |g| {
                let dg: Vec<S> = p.with_data(|xs| {
                    g.iter()
                        .zip(xs.iter())
                        .map(|(&gv, &x)| {
                            let t = (k * (x + c * x * x * x)).tanh();
                            let sech2 = one - t * t;
                            let du = k * (one + three * c * x * x);
                            gv * (half * (one + t) + half * x * sech2 * du)
                        })
                        .collect()
                });
                p.accumulate_grad(&dg);
            }),
        )
    }

    /// Clamp every element into [lo, hi]. Elements strictly inside the range
    /// pass values and gradients through unchanged (bitwise); clipped
    /// elements get zero gradient.
    pub fn clamp(&self, lo: S, hi: S) -> Result<Tensor<S>> {
        if !(lo <= hi) {
            return Err(Error::contract(
                "clamp",
                format!("lo {lo} must not exceed hi {hi}"),
            ));
        }
        let data = self.with_data(|a| {
            a.iter()
                .map(|&x| {
                    if x < lo {
                        lo
                    } else if x > hi {
                        hi
                    } else {
                        x
                    }
                })
                .collect()
        });
        let p = self.clone();
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            "clamp",
            Box::new(move |g| {
                let dg: Vec<S> = p.with_data(|xs| {
                    g.iter()
                        .zip(xs.iter())
                        .map(|(&gv, &x)| if x < lo || x > hi { S::zero() } else { gv })
                        .collect()
                });
                p.accumulate_grad(&dg);
            }),
        ))
    }

    /// Rank-2 matrix product: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(dim_err("matmul", &ls, &rs));
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let data = self.with_data(|a| rhs.with_data(|b| matmul_raw(m, k, n, a, b)));
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), rhs.clone()],
            "matmul",
            Box::new(move |g| {
                if pa.requires_grad() {
                    // dA[i,j] = sum_t g[i,t] B[j,t]
                    let da = pb.with_data(|b| {
                        let mut da = vec![S::zero(); m * k];
                        for i in 0..m {
                            for t in 0..n {
                                let gv = g[i * n + t];
                                if gv == S::zero() {
                                    continue;
                                }
                                for j in 0..k {
                                    da[i * k + j] += gv * b[j * n + t];
                                }
                            }
                        }
                        da
                    });
                    pa.accumulate_grad(&da);
                }
                if pb.requires_grad() {
                    // dB[j,t] = sum_i A[i,j] g[i,t]
                    let db = pa.with_data(|a| {
                        let mut db = vec![S::zero(); k * n];
                        for i in 0..m {
                            for j in 0..k {
                                let av = a[i * k + j];
                                if av == S::zero() {
                                    continue;
                                }
                                let grow = &g[i * n..(i + 1) * n];
                                let drow = &mut db[j * n..(j + 1) * n];
                                for (d, &gv) in drow.iter_mut().zip(grow.iter()) {
                                    *d += av * gv;
                                }
                            }
                        }
                        db
                    });
                    pb.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Rank-2 transpose.
    pub fn transpose2d(&self) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(dim_err("transpose2d", &s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let data = self.with_data(|a| {
            let mut out = vec![S::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a[i * c + j];
                }
            }
            out
        });
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![c, r],
            data,
            vec![self.clone()],
            "transpose2d",
            Box::new(move |g| {
                // g is [c,r]; transpose back to [r,c].
                let mut dg = vec![S::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        dg[i * c + j] = g[j * r + i];
                    }
                }
                p.accumulate_grad(&dg);
            }),
        ))
    }

    /// Reinterpret the element buffer under a new shape with the same total
    /// element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(dim_err("reshape", &self.shape(), shape));
        }
        let p = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data_vec(),
            vec![self.clone()],
            "reshape",
            Box::new(move |g| p.accumulate_grad(g)),
        ))
    }

    /// Repeat a [d] or [1,d] tensor as n identical rows -> [n,d].
    pub fn broadcast_rows(&self, n: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        let d = match s.as_slice() {
            [d] => *d,
            [1, d] => *d,
            _ => return Err(dim_err("broadcast_rows", &s, &[n])),
        };
        let data = self.with_data(|v| {
            let mut out = Vec::with_capacity(n * d);
            for _ in 0..n {
                out.extend_from_slice(v);
            }
            out
        });
        let p = self.clone();
        let plen = self.len();
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            vec![self.clone()],
            "broadcast_rows",
            Box::new(move |g| {
                let mut dg = vec![S::zero(); plen];
                for r in 0..n {
                    for j in 0..d {
                        dg[j] += g[r * d + j];
                    }
                }
                p.accumulate_grad(&dg);
            }),
        ))
    }

    /// Tile a rank-2 tensor k times along rows: [r,c] -> [k*r, c].
    pub fn tile_rows(&self, k: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 || k == 0 {
            return Err(dim_err("tile_rows", &s, &[k]));
        }
        let (r, c) = (s[0], s[1]);
        let data = self.with_data(|v| {
            let mut out = Vec::with_capacity(k * r * c);
            for _ in 0..k {
                out.extend_from_slice(v);
            }
            out
        });
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![k * r, c],
            data,
            vec![self.clone()],
            "tile_rows",
            Box::new(move |g| {
                let mut dg = vec![S::zero(); r * c];
                for t in 0..k {
                    let block = &g[t * r * c..(t + 1) * r * c];
                    for (d, &gv) in dg.iter_mut().zip(block.iter()) {
                        *d += gv;
                    }
                }
                p.accumulate_grad(&dg);
            }),
        ))
    }

    /// Contiguous row range of a rank-2 tensor: rows [r0, r1).
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(dim_err("slice_rows", &s, &[r0, r1]));
        }
        let (rows, cols) = (s[0], s[1]);
        if r0 >= r1 || r1 > rows {
            return Err(Error::Index {
                op: "slice_rows",
                index: r1,
                bound: rows + 1,
            });
        }
        let data = self.with_data(|v| v[r0 * cols..r1 * cols].to_vec());
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![r1 - r0, cols],
            data,
            vec![self.clone()],
            "slice_rows",
            Box::new(move |g| {
                let mut dg = vec![S::zero(); rows * cols];
                dg[r0 * cols..r1 * cols].copy_from_slice(g);
                p.accumulate_grad(&dg);
            }),
        ))
    }

    /// Contiguous column range of a rank-2 tensor: columns [c0, c1).
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(dim_err("slice_cols", &s, &[c0, c1]));
        }
        let (rows, cols) = (s[0], s[1]);
        if c0 >= c1 || c1 > cols {
            return Err(Error::Index {
                op: "slice_cols",
                index: c1,
                bound: cols + 1,
            });
        }
        let w = c1 - c0;
        let data = self.with_data(|v| {
            let mut out = Vec::with_capacity(rows * w);
            for r in 0..rows {
                out.extend_from_slice(&v[r * cols + c0..r * cols + c1]);
            }
            out
        });
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![rows, w],
            data,
            vec![self.clone()],
            "slice_cols",
            Box::new(move |g| {
                let mut dg = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    dg[r * cols + c0..r * cols + c1].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                p.accumulate_grad(&dg);
            }),
        ))
    }

    /// Average every consecutive group of `group` rows: [n*group, c] -> [n, c].
    pub fn mean_pool_rows(&self, group: usize) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 || group == 0 || s[0] % group != 0 {
            return Err(dim_err("mean_pool_rows", &s, &[group]));
        }
        let (rows, cols) = (s[0], s[1]);
        let n = rows / group;
        let inv = S::one() / S::from_f64(group as f64);
        let data = self.with_data(|v| {
            let mut out = vec![S::zero(); n * cols];
            for i in 0..n {
                for t in 0..group {
                    let row = &v[(i * group + t) * cols..(i * group + t + 1) * cols];
                    let orow = &mut out[i * cols..(i + 1) * cols];
                    for (o, &x) in orow.iter_mut().zip(row.iter()) {
                        *o += x;
                    }
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
            out
        });
        let p = self.clone();
        Ok(Tensor::from_op(
            vec![n, cols],
            data,
            vec![self.clone()],
            "mean_pool_rows",
            Box::new(move |g| {
                let mut dg = vec![S::zero(); rows * cols];
                for i in 0..n {
                    for t in 0..group {
                        let drow = &mut dg[(i * group + t) * cols..(i * group + t + 1) * cols];
                        let grow = &g[i * cols..(i + 1) * cols];
                        for (d, &gv) in drow.iter_mut().zip(grow.iter()) {
                            *d = gv * inv;
                        }
                    }
                }
                p.accumulate_grad(&dg);
            }),
        ))
    }

    /// Row-wise softmax of a rank-2 tensor, with max subtraction for
    /// stability.
    pub fn softmax_rows(&self) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(dim_err("softmax_rows", &s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let probs: Vec<S> = self.with_data(|v| {
            let mut out = vec![S::zero(); rows * cols];
            for r in 0..rows {
                let row = &v[r * cols..(r + 1) * cols];
                let m = row.iter().copied().fold(row[0], S::max);
                let mut z = S::zero();
                for (j, &x) in row.iter().enumerate() {
                    let e = (x - m).exp();
                    out[r * cols + j] = e;
                    z += e;
                }
                for j in 0..cols {
                    out[r * cols + j] /= z;
                }
            }
            out
        });
        let p = self.clone();
        let saved = probs.clone();
        Ok(Tensor::from_op(
            vec![rows, cols],
            probs,
            vec![self.clone()],
            "softmax_rows",
            Box::new(move |g| {
                let mut dg = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    let pr = &saved[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut dot = S::zero();
                    for (&pv, &gv) in pr.iter().zip(gr.iter()) {
                        dot += pv * gv;
                    }
                    for j in 0..cols {
                        dg[r * cols + j] = pr[j] * (gr[j] - dot);
                    }
                }
                p.accumulate_grad(&dg);
            }),
        ))
    }

    /// Row-wise layer normalization with learned gain and bias (both shape
    /// [d]). Uses population variance over each row.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(dim_err("layer_norm", &s, &gain.shape()));
        }
        let (rows, d) = (s[0], s[1]);
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(dim_err("layer_norm", &s, &gain.shape()));
        }
        let inv_d = S::one() / S::from_f64(d as f64);
        let mut xhat = vec![S::zero(); rows * d];
        let mut istd = vec![S::zero(); rows];
        let data = self.with_data(|v| {
            gain.with_data(|gv| {
                bias.with_data(|bv| {
                    let mut out = vec![S::zero(); rows * d];
                    for r in 0..rows {
                        let row = &v[r * d..(r + 1) * d];
                        let mu = row.iter().copied().sum::<S>() * inv_d;
                        let mut var = S::zero();
                        for &x in row {
                            let c = x - mu;
                            var += c * c;
                        }
                        var *= inv_d;
                        let is = S::one() / (var + eps).sqrt();
                        istd[r] = is;
                        for j in 0..d {
                            let xh = (row[j] - mu) * is;
                            xhat[r * d + j] = xh;
                            out[r * d + j] = gv[j] * xh + bv[j];
                        }
                    }
                    out
                })
            })
        });
        let (px, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            vec![rows, d],
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            "layer_norm",
            Box::new(move |g| {
                if pg.requires_grad() {
                    let mut dgain = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dgain[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    pg.accumulate_grad(&dgain);
                }
                if pb.requires_grad() {
                    let mut dbias = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dbias[j] += g[r * d + j];
                        }
                    }
                    pb.accumulate_grad(&dbias);
                }
                if px.requires_grad() {
                    let gv = pg.data_vec();
                    let mut dx = vec![S::zero(); rows * d];
                    for r in 0..rows {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            dx[r * d + j] = istd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    px.accumulate_grad(&dx);
                }
            }),
        ))
    }

    /// Valid-padding 2D convolution. Input [n,c,h,w], kernel [o,c,kh,kw],
    /// output [n,o,oh,ow] with oh = (h-kh)/stride + 1.
    pub fn conv2d(&self, kernel: &Tensor<S>, stride: usize) -> Result<Tensor<S>> {
        let xs = self.shape();
        let ks = kernel.shape();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(dim_err("conv2d", &xs, &ks));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kh > h || kw > w {
            return Err(dim_err("conv2d", &xs, &ks));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let data = self.with_data(|x| {
            kernel.with_data(|k| {
                let mut out = vec![S::zero(); n * o * oh * ow];
                for ni in 0..n {
                    for oi in 0..o {
                        for yi in 0..oh {
                            for xi in 0..ow {
                                let mut acc = S::zero();
                                for ci in 0..c {
                                    for ky in 0..kh {
                                        let xrow =
                                            ((ni * c + ci) * h + (yi * stride + ky)) * w
                                                + xi * stride;
                                        let krow = ((oi * c + ci) * kh + ky) * kw;
                                        for kx in 0..kw {
                                            acc += x[xrow + kx] * k[krow + kx];
                                        }
                                    }
                                }
                                out[((ni * o + oi) * oh + yi) * ow + xi] = acc;
                            }
                        }
                    }
                }
                out
            })
        });
        let (px, pk) = (self.clone(), kernel.clone());
        Ok(Tensor::from_op(
            vec![n, o, oh, ow],
            data,
            vec![self.clone(), kernel.clone()],
            "conv2d",
            Box::new(move |g| {
                let xv = px.data_vec();
                let kv = pk.data_vec();
                let mut dx = vec![S::zero(); xv.len()];
                let mut dk = vec![S::zero(); kv.len()];
                for ni in 0..n {
                    for oi in 0..o {
                        for yi in 0..oh {
                            for xi in 0..ow {
                                let gv = g[((ni * o + oi) * oh + yi) * ow + xi];
                                if gv == S::zero() {
                                    continue;
                                }
                                for ci in 0..c {
                                    for ky in 0..kh {
                                        let xrow =
                                            ((ni * c + ci) * h + (yi * stride + ky)) * w
                                                + xi * stride;
                                        let krow = ((oi * c + ci) * kh + ky) * kw;
                                        for kx in 0..kw {
                                            dx[xrow + kx] += gv * kv[krow + kx];
                                            dk[krow + kx] += gv * xv[xrow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if px.requires_grad() {
                    px.accumulate_grad(&dx);
                }
                if pk.requires_grad() {
                    pk.accumulate_grad(&dk);
                }
            }),
        ))
    }

    /// Add a per-channel bias [c] to a rank-4 tensor [n,c,h,w].
    pub fn add_channel_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let xs = self.shape();
        let bs = bias.shape();
        if xs.len() != 4 || bs != [xs[1]] {
            return Err(dim_err("add_channel_bias", &xs, &bs));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let data = self.with_data(|x| {
            bias.with_data(|b| {
                let mut out = x.to_vec();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            out[base + i] += b[ci];
                        }
                    }
                }
                out
            })
        });
        let (px, pb) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            xs.clone(),
            data,
            vec![self.clone(), bias.clone()],
            "add_channel_bias",
            Box::new(move |g| {
                px.accumulate_grad(g);
                if pb.requires_grad() {
                    let mut db = vec![S::zero(); c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                db[ci] += g[base + i];
                            }
                        }
                    }
                    pb.accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Row lookup into an embedding table [v,d]; `self` is the table.
    /// Output is [ids.len(), d]; gradients scatter-add back into the table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(dim_err("embedding", &s, &[ids.len()]));
        }
        let (v, d) = (s[0], s[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
        }
        let n = ids.len();
        let data = self.with_data(|t| {
            let mut out = Vec::with_capacity(n * d);
            for &id in ids {
                out.extend_from_slice(&t[id * d..(id + 1) * d]);
            }
            out
        });
        let p = self.clone();
        let ids_saved = ids.to_vec();
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            vec![self.clone()],
            "embedding",
            Box::new(move |g| {
                let mut dt = vec![S::zero(); v * d];
                for (r, &id) in ids_saved.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                p.accumulate_grad(&dt);
            }),
        ))
    }

    /// Scalar sum of all elements.
    pub fn sum_all(&self) -> Tensor<S> {
        let total = self.with_data(|v| v.iter().copied().sum::<S>());
        let p = self.clone();
        let len = self.len();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            "sum_all",
            Box::new(move |g| {
                let dg = vec![g[0]; len];
                p.accumulate_grad(&dg);
            }),
        )
    }

    /// Scalar mean of all elements.
    pub fn mean_all(&self) -> Tensor<S> {
        let len = self.len();
        let inv = S::one() / S::from_f64(len as f64);
        let total = self.with_data(|v| v.iter().copied().sum::<S>() * inv);
        let p = self.clone();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            "mean_all",
            Box::new(move |g| {
                let dg = vec![g[0] * inv; len];
                p.accumulate_grad(&dg);
            }),
        )
    }

    /// Fused softmax + cross-entropy over rank-2 logits [n,c].
    ///
    /// Returns the weighted mean negative log-likelihood as a single-element
    /// tensor. `weights` (default all ones) weight each row; the mean is
    /// normalized by the weight sum. Row maxima are subtracted before
    /// exponentiation so large logits do not overflow.
    pub fn softmax_cross_entropy(
        &self,
        labels: &[usize],
        weights: Option<&[S]>,
    ) -> Result<Tensor<S>> {
        let s = self.shape();
        if s.len() != 2 || labels.len() != s[0] {
            return Err(dim_err("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (n, c) = (s[0], s[1]);
        for &l in labels {
            if l >= c {
                return Err(Error::Index {
                    op: "softmax_cross_entropy",
                    index: l,
                    bound: c,
                });
            }
        }
        let w: Vec<S> = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(dim_err("softmax_cross_entropy", &[n], &[w.len()]));
                }
                w.to_vec()
            }
            None => vec![S::one(); n],
        };
        let wsum = w.iter().copied().sum::<S>();
        if !(wsum > S::zero()) {
            return Err(Error::contract(
                "softmax_cross_entropy",
                "row weights sum to zero",
            ));
        }
        let mut probs = vec![S::zero(); n * c];
        let loss = self.with_data(|v| {
            let mut acc = S::zero();
            for r in 0..n {
                let row = &v[r * c..(r + 1) * c];
                let m = row.iter().copied().fold(row[0], S::max);
                let mut z = S::zero();
                for (j, &x) in row.iter().enumerate() {
                    let e = (x - m).exp();
                    probs[r * c + j] = e;
                    z += e;
                }
                for j in 0..c {
                    probs[r * c + j] /= z;
                }
                let nll = z.ln() - (row[labels[r]] - m);
                acc += w[r] * nll;
            }
            acc / wsum
        });
        let p = self.clone();
        let labels_saved = labels.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            "softmax_cross_entropy",
            Box::new(move |g| {
                let g0 = g[0];
                let mut dg = vec![S::zero(); n * c];
                for r in 0..n {
                    if w[r] == S::zero() {
                        continue;
                    }
                    let scale = g0 * w[r] / wsum;
                    for j in 0..c {
                        let ind = if j == labels_saved[r] {
                            S::one()
                        } else {
                            S::zero()
                        };
                        dg[r * c + j] = scale * (probs[r * c + j] - ind);
                    }
                }
                p.accumulate_grad(&dg);
            }),
        ))
    }
}

/// Stack rank-2 tensors along rows; all parts must share the column count.
pub fn concat_rows<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::contract("concat_rows", "no parts given"));
    }
    let cols = {
        let s = parts[0].shape();
        if s.len() != 2 {
            return Err(dim_err("concat_rows", &s, &[]));
        }
        s[1]
    };
    let mut rows = 0usize;
    let mut row_counts = Vec::with_capacity(parts.len());
    for part in parts {
        let s = part.shape();
        if s.len() != 2 || s[1] != cols {
            return Err(dim_err("concat_rows", &parts[0].shape(), &s));
        }
        row_counts.push(s[0]);
        rows += s[0];
    }
    let mut data = Vec::with_capacity(rows * cols);
    for part in parts {
        part.with_data(|v| data.extend_from_slice(v));
    }
    let handles: Vec<Tensor<S>> = parts.to_vec();
    let counts = row_counts.clone();
    Ok(Tensor::from_op(
        vec![rows, cols],
        data,
        parts.to_vec(),
        "concat_rows",
        Box::new(move |g| {
            let mut offset = 0usize;
            for (part, &rc) in handles.iter().zip(counts.iter()) {
                part.accumulate_grad(&g[offset * cols..(offset + rc) * cols]);
                offset += rc;
            }
        }),
    ))
}

/// Stack rank-2 tensors along columns; all parts must share the row count.
pub fn concat_cols<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::contract("concat_cols", "no parts given"));
    }
    let rows = {
        let s = parts[0].shape();
        if s.len() != 2 {
            return Err(dim_err("concat_cols", &s, &[]));
        }
        s[0]
    };
    let mut cols = 0usize;
    let mut col_counts = Vec::with_capacity(parts.len());
    for part in parts {
        let s = part.shape();
        if s.len() != 2 || s[0] != rows {
            return Err(dim_err("concat_cols", &parts[0].shape(), &s));
        }
        col_counts.push(s[1]);
        cols += s[1];
    }
    let mut data = vec![S::zero(); rows * cols];
    let mut offset = 0usize;
    for (part, &cc) in parts.iter().zip(col_counts.iter()) {
        part.with_data(|v| {
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + cc]
                    .copy_from_slice(&v[r * cc..(r + 1) * cc]);
            }
        });
        offset += cc;
    }
    let handles: Vec<Tensor<S>> = parts.to_vec();
    let counts = col_counts.clone();
    Ok(Tensor::from_op(
        vec![rows, cols],
        data,
        parts.to_vec(),
        "concat_cols",
        Box::new(move |g| {
            let mut offset = 0usize;
            for (part, &cc) in handles.iter().zip(counts.iter()) {
                let mut dg = vec![S::zero(); rows * cc];
                for r in 0..rows {
                    dg[r * cc..(r + 1) * cc]
                        .copy_from_slice(&g[r * cols + offset..r * cols + offset + cc]);
                }
                part.accumulate_grad(&dg);
                offset += cc;
            }
        }),
    ))
}
