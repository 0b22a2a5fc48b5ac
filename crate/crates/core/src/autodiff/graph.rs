use crate::autodiff::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;

/// Batchnorm normalization source.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with the batch statistics.
    Train,
    /// Normalize with frozen running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of a training-mode batchnorm, `var` unbiased.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.hout * self.wout
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let hw = self.out_hw();
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.hout {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wout..(oy + 1) * self.wout];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let hw = self.out_hw();
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.hout {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wout {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.wout + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    Relu {
        x: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        channels: usize,
        spatial: usize,
    },
    AvgPool {
        x: usize,
        k: usize,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    GlobalAvgPool {
        x: usize,
        spatial: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
        channels: usize,
        inner: usize,
    },
    MulScalar {
        x: usize,
        s: T,
    },
    Reshape {
        x: usize,
    },
    Log {
        x: usize,
    },
    Exp {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    LogSoftmax {
        x: usize,
        cols: usize,
    },
    Gather {
        x: usize,
        cols: usize,
        index: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
    /// Accumulated gradient, kept only for leaves.
    grad: Option<Vec<T>>,
}

/// Tape of recorded tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the tape is already topologically
/// sorted; [`Graph::backward`] walks it once in reverse.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn ensure_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it receives gradients when the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        ensure_finite("leaf", t.data())?;
        Ok(self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        ))
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        ensure_finite("constant", t.data())?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Constant, false))
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.constant(&t)
    }

    /// Copies `v` into a constant node, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = self.node(v);
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.push(shape, value, Op::Constant, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = self.node(v);
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "item() on a non-scalar node");
        value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = &mut node.grad {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        ensure_finite("matmul", &out)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            g,
        ))
    }

    /// NCHW convolution without bias; `weight` is `[cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        let bad = || Error::Shape {
            op: "conv2d",
            lhs: sx.clone(),
            rhs: sw.clone(),
        };
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(bad());
        }
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(bad());
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            hout: (h + 2 * pad - k) / stride + 1,
            wout: (w + 2 * pad - k) / stride + 1,
        };
        let hw = geom.out_hw();
        let patch = geom.patch();
        let mut out = vec![T::zero(); n * cout * hw];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); patch * hw]
        };
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[weight.0].value;
        for i in 0..n {
            let xi = &xv[i * cin * h * w..(i + 1) * cin * h * w];
            let cols_ref: &[T] = if geom.is_pointwise() {
                xi
            } else {
                geom.im2col(xi, &mut cols);
                &cols
            };
            T::gemm(
                cout,
                patch,
                hw,
                T::one(),
                wv,
                patch as isize,
                1,
                cols_ref,
                hw as isize,
                1,
                T::zero(),
                &mut out[i * cout * hw..(i + 1) * cout * hw],
                hw as isize,
                1,
            );
        }
        ensure_finite("conv2d", &out)?;
        let g = self.any_grad(&[x, weight]);
        Ok(self.push(
            vec![n, cout, geom.hout, geom.wout],
            out,
            Op::Conv2d {
                x: x.0,
                w: weight.0,
                geom,
            },
            g,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::Relu { x: x.0 }, g))
    }

    /// Batch normalization over axis 1 of a `[N, C]` or `[N, C, H, W]` input.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 && sx.len() != 4 {
            return Err(Error::Shape {
                op: "batchnorm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (n, c) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::Shape {
                    op: "batchnorm",
                    lhs: sx,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let count = n * spatial;
        let xv = self.value(x);
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                if count < 2 {
                    return Err(Error::invalid(
                        "batchnorm: training mode needs more than one value per channel",
                    ));
                }
                let mut mean = vec![0f64; c];
                let mut var = vec![0f64; c];
                for ch in 0..c {
                    let mut s = 0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        s += xv[base..base + spatial].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut q = 0f64;
                    for i in 0..n {
                        let base = (i * c + ch) * spatial;
                        q += xv[base..base + spatial]
                            .iter()
                            .map(|v| {
                                let d = v.as_f64() - mu;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / count as f64;
                }
                let unbiased = count as f64 / (count - 1) as f64;
                let stats = BatchStats {
                    mean: mean.iter().map(|&m| T::from_f64(m)).collect(),
                    var: var.iter().map(|&v| T::from_f64(v * unbiased)).collect(),
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape {
                        op: "batchnorm",
                        lhs: sx,
                        rhs: vec![mean.len(), var.len()],
                    });
                }
                (
                    mean.iter().map(|v| v.as_f64()).collect(),
                    var.iter().map(|v| v.as_f64()).collect(),
                    None,
                )
            }
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::from_f64(1.0 / (v + BN_EPS).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for s in base..base + spatial {
                    let h = (xv[s] - mean_t[ch]) * inv_std[ch];
                    xhat[s] = h;
                    out[s] = gv[ch] * h + bv[ch];
                }
            }
        }
        ensure_finite("batchnorm", &out)?;
        let g = self.any_grad(&[x, gamma, beta]);
        let train = stats.is_some();
        let var_out = self.push(
            sx,
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                train,
                channels: c,
                spatial,
            },
            g,
        );
        Ok((var_out, stats))
    }

    /// Non-overlapping `k`×`k` average pooling.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || k == 0 || sx[2] < k || sx[3] < k {
            return Err(Error::Shape {
                op: "avgpool2d",
                lhs: sx,
                rhs: vec![k, k],
            });
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h / k, w / k);
        let scale = T::from_f64(1.0 / (k * k) as f64);
        let xv = self.value(x);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            s = s + src[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[(plane * ho + oy) * wo + ox] = s * scale;
                }
            }
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(
            vec![n, c, ho, wo],
            out,
            Op::AvgPool {
                x: x.0,
                k,
                n,
                c,
                h,
                w,
            },
            g,
        ))
    }

    /// Mean over all spatial positions: `[N, C, H, W] -> [N, C]`; `[N, C]` passes through.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::Shape {
                op: "global_avgpool",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (n, c) = (sx[0], sx[1]);
        let spatial: usize = sx[2..].iter().product();
        let scale = T::from_f64(1.0 / spatial as f64);
        let out: Vec<T> = self
            .value(x)
            .chunks(spatial)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect();
        let g = self.any_grad(&[x]);
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool { x: x.0, spatial }, g))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(self.shape(a).to_vec())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        ensure_finite("add", &out)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        ensure_finite("sub", &out)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Sub { a: a.0, b: b.0 }, g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        ensure_finite("mul", &out)?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }, g))
    }

    /// Adds a per-channel bias `[C]` along axis 1 of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let bv = self.value(bias);
        let out: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[(i / inner) % channels])
            .collect();
        ensure_finite("add_bias", &out)?;
        let g = self.any_grad(&[x, bias]);
        Ok(self.push(
            sx,
            out,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
                channels,
                inner,
            },
            g,
        ))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|&v| v * s).collect();
        ensure_finite("mul_scalar", &out)?;
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::MulScalar { x: x.0, s }, g))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let g = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::Reshape { x: x.0 }, g))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|v| v.ln()).collect();
        ensure_finite("log", &out)?;
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::Log { x: x.0 }, g))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.value(x).iter().map(|v| v.exp()).collect();
        ensure_finite("exp", &out)?;
        let shape = self.shape(x).to_vec();
        let g = self.any_grad(&[x]);
        Ok(self.push(shape, out, Op::Exp { x: x.0 }, g))
    }

    /// Sum of all elements into a scalar, accumulated in storage order.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).iter().copied().sum();
        ensure_finite("sum", &[s])?;
        let g = self.any_grad(&[x]);
        Ok(self.push(Vec::new(), vec![s], Op::Sum { x: x.0 }, g))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let len = self.value(x).len();
        if len == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s: T = self.value(x).iter().copied().sum::<T>() / T::from_f64(len as f64);
        ensure_finite("mean", &[s])?;
        let g = self.any_grad(&[x]);
        Ok(self.push(Vec::new(), vec![s], Op::Mean { x: x.0 }, g))
    }

    /// Row-wise log-softmax of a `[rows, cols]` matrix, max-subtracted.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[1] == 0 {
            return Err(Error::Shape {
                op: "log_softmax",
                lhs: sx,
                rhs: vec![],
            });
        }
        let cols = sx[1];
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            out.extend(row.iter().map(|&v| v - lse));
        }
        ensure_finite("log_softmax", &out)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(sx, out, Op::LogSoftmax { x: x.0, cols }, g))
    }

    /// Picks `x[r, index[r]]` from each row: `[rows, cols] -> [rows]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != index.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: sx,
                rhs: vec![index.len()],
            });
        }
        let cols = sx[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(Error::invalid(format!(
                "gather: index {bad} out of range for {cols} columns"
            )));
        }
        let xv = self.value(x);
        let out: Vec<T> = index
            .iter()
            .enumerate()
            .map(|(r, &i)| xv[r * cols + i])
            .collect();
        let g = self.any_grad(&[x]);
        Ok(self.push(
            vec![index.len()],
            out,
            Op::Gather {
                x: x.0,
                cols,
                index: index.to_vec(),
            },
            g,
        ))
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    ///
    /// Each node is visited at most once, in reverse recording order. Calling
    /// backward again without [`Graph::zero_grad`] adds to the existing leaf
    /// gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 || !self.shape(loss).iter().all(|&d| d == 1) {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let len = gout.len();
                accumulate(&mut self.nodes[i].grad, len, |buf| {
                    buf.iter_mut().zip(&gout).for_each(|(a, &b)| *a = *a + b)
                });
                continue;
            }
            self.backprop_node(i, &gout, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].needs_grad;
        let len = |j: usize| nodes[j].value.len();
        let node = &nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    accumulate(&mut grads[a], len(a), |da| {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            gout,
                            n as isize,
                            1,
                            &nodes[b].value,
                            1,
                            n as isize,
                            T::one(),
                            da,
                            k as isize,
                            1,
                        )
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b], len(b), |db| {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &nodes[a].value,
                            1,
                            k as isize,
                            gout,
                            n as isize,
                            1,
                            T::one(),
                            db,
                            n as isize,
                            1,
                        )
                    });
                }
            }
            &Op::Conv2d { x, w, geom } => {
                let hw = geom.out_hw();
                let patch = geom.patch();
                let in_len = geom.cin * geom.h * geom.w;
                let xv = &nodes[x].value;
                let wv = &nodes[w].value;
                let mut cols = if geom.is_pointwise() {
                    Vec::new()
                } else {
                    vec![T::zero(); patch * hw]
                };
                if wants(w) {
                    accumulate(&mut grads[w], len(w), |dw| {
                        for s in 0..geom.n {
                            let xi = &xv[s * in_len..(s + 1) * in_len];
                            let cols_ref: &[T] = if geom.is_pointwise() {
                                xi
                            } else {
                                geom.im2col(xi, &mut cols);
                                &cols
                            };
                            T::gemm(
                                geom.cout,
                                hw,
                                patch,
                                T::one(),
                                &gout[s * geom.cout * hw..(s + 1) * geom.cout * hw],
                                hw as isize,
                                1,
                                cols_ref,
                                1,
                                hw as isize,
                                T::one(),
                                dw,
                                patch as isize,
                                1,
                            );
                        }
                    });
                }
                if wants(x) {
                    let mut dcols = vec![T::zero(); patch * hw];
                    accumulate(&mut grads[x], len(x), |dx| {
                        for s in 0..geom.n {
                            let go = &gout[s * geom.cout * hw..(s + 1) * geom.cout * hw];
                            let dxi = &mut dx[s * in_len..(s + 1) * in_len];
                            if geom.is_pointwise() {
                                T::gemm(
                                    patch,
                                    geom.cout,
                                    hw,
                                    T::one(),
                                    wv,
                                    1,
                                    patch as isize,
                                    go,
                                    hw as isize,
                                    1,
                                    T::one(),
                                    dxi,
                                    hw as isize,
                                    1,
                                );
                            } else {
                                T::gemm(
                                    patch,
                                    geom.cout,
                                    hw,
                                    T::one(),
                                    wv,
                                    1,
                                    patch as isize,
                                    go,
                                    hw as isize,
                                    1,
                                    T::zero(),
                                    &mut dcols,
                                    hw as isize,
                                    1,
                                );
                                geom.col2im_add(&dcols, dxi);
                            }
                        }
                    });
                }
            }
            &Op::Relu { x } => {
                if wants(x) {
                    let xv = &nodes[x].value;
                    accumulate(&mut grads[x], len(x), |dx| {
                        for ((d, &g), &v) in dx.iter_mut().zip(gout).zip(xv) {
                            if v > T::zero() {
                                *d = *d + g;
                            }
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                channels,
                spatial,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (c, spatial) = (*channels, *spatial);
                let n = gout.len() / (c * spatial);
                let count = T::from_f64((n * spatial) as f64);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        for p in base..base + spatial {
                            sum_dy[ch] = sum_dy[ch] + gout[p];
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + gout[p] * xhat[p];
                        }
                    }
                }
                if wants(gamma) {
                    accumulate(&mut grads[gamma], c, |dg| {
                        dg.iter_mut()
                            .zip(&sum_dy_xhat)
                            .for_each(|(a, &b)| *a = *a + b)
                    });
                }
                if wants(beta) {
                    accumulate(&mut grads[beta], c, |db| {
                        db.iter_mut().zip(&sum_dy).for_each(|(a, &b)| *a = *a + b)
                    });
                }
                if wants(x) {
                    let gv = &nodes[gamma].value;
                    accumulate(&mut grads[x], len(x), |dx| {
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * spatial;
                                let scale = gv[ch] * inv_std[ch];
                                for p in base..base + spatial {
                                    let d = if *train {
                                        scale
                                            * (gout[p]
                                                - sum_dy[ch] / count
                                                - xhat[p] * sum_dy_xhat[ch] / count)
                                    } else {
                                        scale * gout[p]
                                    };
                                    dx[p] = dx[p] + d;
                                }
                            }
                        }
                    });
                }
            }
            &Op::AvgPool { x, k, n, c, h, w } => {
                if wants(x) {
                    let (ho, wo) = (h / k, w / k);
                    let scale = T::from_f64(1.0 / (k * k) as f64);
                    accumulate(&mut grads[x], len(x), |dx| {
                        for plane in 0..n * c {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let g = gout[(plane * ho + oy) * wo + ox] * scale;
                                    for dy in 0..k {
                                        for dxx in 0..k {
                                            let p = plane * h * w + (oy * k + dy) * w + ox * k + dxx;
                                            dx[p] = dx[p] + g;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            &Op::GlobalAvgPool { x, spatial } => {
                if wants(x) {
                    let scale = T::from_f64(1.0 / spatial as f64);
                    accumulate(&mut grads[x], len(x), |dx| {
                        for (plane, &g) in dx.chunks_mut(spatial).zip(gout) {
                            plane.iter_mut().for_each(|d| *d = *d + g * scale);
                        }
                    });
                }
            }
            &Op::Add { a, b } => {
                for j in [a, b] {
                    if wants(j) {
                        accumulate(&mut grads[j], len(j), |d| {
                            d.iter_mut().zip(gout).for_each(|(a, &g)| *a = *a + g)
                        });
                    }
                }
            }
            &Op::Sub { a, b } => {
                if wants(a) {
                    accumulate(&mut grads[a], len(a), |d| {
                        d.iter_mut().zip(gout).for_each(|(a, &g)| *a = *a + g)
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b], len(b), |d| {
                        d.iter_mut().zip(gout).for_each(|(a, &g)| *a = *a - g)
                    });
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let bv = &nodes[b].value;
                    accumulate(&mut grads[a], len(a), |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(gout).zip(bv) {
                            *d = *d + g * y;
                        }
                    });
                }
                if wants(b) {
                    let av = &nodes[a].value;
                    accumulate(&mut grads[b], len(b), |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(gout).zip(av) {
                            *d = *d + g * y;
                        }
                    });
                }
            }
            &Op::AddBias {
                x,
                bias,
                channels,
                inner,
            } => {
                if wants(x) {
                    accumulate(&mut grads[x], len(x), |d| {
                        d.iter_mut().zip(gout).for_each(|(a, &g)| *a = *a + g)
                    });
                }
                if wants(bias) {
                    accumulate(&mut grads[bias], channels, |db| {
                        for (i, &g) in gout.iter().enumerate() {
                            let ch = (i / inner) % channels;
                            db[ch] = db[ch] + g;
                        }
                    });
                }
            }
            &Op::MulScalar { x, s } => {
                if wants(x) {
                    accumulate(&mut grads[x], len(x), |d| {
                        d.iter_mut().zip(gout).for_each(|(a, &g)| *a = *a + g * s)
                    });
                }
            }
            &Op::Reshape { x } => {
                if wants(x) {
                    accumulate(&mut grads[x], len(x), |d| {
                        d.iter_mut().zip(gout).for_each(|(a, &g)| *a = *a + g)
                    });
                }
            }
            &Op::Log { x } => {
                if wants(x) {
                    let xv = &nodes[x].value;
                    accumulate(&mut grads[x], len(x), |d| {
                        for ((d, &g), &v) in d.iter_mut().zip(gout).zip(xv) {
                            *d = *d + g / v;
                        }
                    });
                }
            }
            &Op::Exp { x } => {
                if wants(x) {
                    let yv = &node.value;
                    accumulate(&mut grads[x], len(x), |d| {
                        for ((d, &g), &y) in d.iter_mut().zip(gout).zip(yv) {
                            *d = *d + g * y;
                        }
                    });
                }
            }
            &Op::Sum { x } => {
                if wants(x) {
                    let g = gout[0];
                    accumulate(&mut grads[x], len(x), |d| {
                        d.iter_mut().for_each(|a| *a = *a + g)
                    });
                }
            }
            &Op::Mean { x } => {
                if wants(x) {
                    let g = gout[0] / T::from_f64(len(x) as f64);
                    accumulate(&mut grads[x], len(x), |d| {
                        d.iter_mut().for_each(|a| *a = *a + g)
                    });
                }
            }
            &Op::LogSoftmax { x, cols } => {
                if wants(x) {
                    let yv = &node.value;
                    accumulate(&mut grads[x], len(x), |d| {
                        for ((drow, grow), yrow) in d
                            .chunks_mut(cols)
                            .zip(gout.chunks(cols))
                            .zip(yv.chunks(cols))
                        {
                            let gsum: T = grow.iter().copied().sum();
                            for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d = *d + g - y.exp() * gsum;
                            }
                        }
                    });
                }
            }
            Op::Gather { x, cols, index } => {
                let (x, cols) = (*x, *cols);
                if wants(x) {
                    accumulate(&mut grads[x], len(x), |d| {
                        for (r, (&i, &g)) in index.iter().zip(gout).enumerate() {
                            d[r * cols + i] = d[r * cols + i] + g;
                        }
                    });
                }
            }
        }
    }
}
