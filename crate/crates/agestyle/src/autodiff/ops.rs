//! Tape operations.
//!
//! Every op records a VJP closure that emits input adjoints by calling tape
//! ops again, so gradients are differentiable. Ops whose derivative is zero
//! almost everywhere (sign masks, leaky slopes) emit constant masks instead.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::conv::{conv2d_dinput, conv2d_dkernel, conv2d_fwd};
use super::{Scalar, Tape, Var};

fn as4<T: Scalar>(a: &ArrayD<T>) -> ndarray::ArrayView4<'_, T> {
    a.view().into_dimensionality().expect("rank-4 tensor")
}

impl<T: Scalar> Tape<T> {
    // ---- leaf helpers ----------------------------------------------------

    pub fn zeros(&self, shape: &[usize]) -> Var {
        self.constant(ArrayD::zeros(IxDyn(shape)))
    }

    // ---- elementwise binary ----------------------------------------------

    fn assert_same_shape(&self, a: Var, b: Var, op: &str) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let value = self.with_values2(a, b, |x, y| x + y);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|_, g, _, _| vec![Some(g), Some(g)]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let value = self.with_values2(a, b, |x, y| x - y);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|t, g, _, _| vec![Some(g), Some(t.neg(g))]),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let value = self.with_values2(a, b, |x, y| x * y);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|t, g, p, _| vec![Some(t.mul(g, p[1])), Some(t.mul(g, p[0]))]),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let value = self.with_values2(a, b, |x, y| x / y);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|t, g, p, out| {
                let ga = t.div(g, p[1]);
                let gb = t.neg(t.div(t.mul(g, out), p[1]));
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = self.with_value(a, |x| x.mapv(|v| -v));
        self.push_op(value, vec![a], Box::new(|t, g, _, _| vec![Some(t.neg(g))]))
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let value = self.with_value(a, |x| x.mapv(|v| v * c));
        self.push_op(
            value,
            vec![a],
            Box::new(move |t, g, _, _| vec![Some(t.scale(g, c))]),
        )
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let value = self.with_value(a, |x| x.mapv(|v| v + c));
        self.push_op(value, vec![a], Box::new(|_, g, _, _| vec![Some(g)]))
    }

    // ---- shape manipulation ----------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let in_shape = self.shape(a);
        let value = self.with_value(a, |x| x.to_shape(IxDyn(shape)).expect("reshape").to_owned());
        self.push_op(
            value,
            vec![a],
            Box::new(move |t, g, _, _| vec![Some(t.reshape(g, &in_shape))]),
        )
    }

    /// Broadcast to a same-rank shape (1-sized axes expand).
    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Var {
        let in_shape = self.shape(a);
        assert_eq!(in_shape.len(), shape.len(), "broadcast_to: rank mismatch");
        let value = self.with_value(a, |x| {
            x.broadcast(IxDyn(shape)).expect("broadcast").to_owned()
        });
        self.push_op(
            value,
            vec![a],
            Box::new(move |t, g, _, _| vec![Some(t.sum_to(g, &in_shape))]),
        )
    }

    /// Reduce by summation onto a same-rank shape with 1-sized axes.
    pub fn sum_to(&self, a: Var, shape: &[usize]) -> Var {
        let in_shape = self.shape(a);
        assert_eq!(in_shape.len(), shape.len(), "sum_to: rank mismatch");
        let value = self.with_value(a, |x| {
            let mut acc = x.to_owned();
            for (ax, (&src, &dst)) in in_shape.iter().zip(shape).enumerate() {
                if dst == 1 && src != 1 {
                    acc = acc.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                } else {
                    assert_eq!(src, dst, "sum_to: incompatible axis {ax}");
                }
            }
            acc
        });
        self.push_op(
            value,
            vec![a],
            Box::new(move |t, g, _, _| vec![Some(t.broadcast_to(g, &in_shape))]),
        )
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let value = self.with_value(a, |x| ArrayD::from_elem(IxDyn(&[]), x.sum()));
        let in_shape = self.shape(a);
        self.push_op(
            value,
            vec![a],
            Box::new(move |t, g, _, _| vec![Some(t.expand_scalar(g, &in_shape))]),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.with_value(a, |x| x.len());
        let inv = T::from_f64(1.0 / n as f64);
        self.scale(self.sum_all(a), inv)
    }

    /// Fill `shape` with a 0-d scalar.
    pub fn expand_scalar(&self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(
            self.with_value(a, |x| x.len()),
            1,
            "expand_scalar: not scalar"
        );
        let value = self.with_value(a, |x| {
            ArrayD::from_elem(IxDyn(shape), *x.iter().next().unwrap())
        });
        self.push_op(
            value,
            vec![a],
            Box::new(|t, g, _, _| vec![Some(t.sum_all(g))]),
        )
    }

    /// Sum over `axes`, keeping reduced axes with size 1.
    pub fn sum_axes(&self, a: Var, axes: &[usize]) -> Var {
        let in_shape = self.shape(a);
        let value = self.with_value(a, |x| {
            let mut acc = x.to_owned();
            for &ax in axes {
                acc = acc.sum_axis(Axis(ax)).insert_axis(Axis(ax));
            }
            acc
        });
        self.push_op(
            value,
            vec![a],
            Box::new(move |t, g, _, _| vec![Some(t.broadcast_to(g, &in_shape))]),
        )
    }

    /// Mean over `axes`, keeping reduced axes with size 1.
    pub fn mean_axes(&self, a: Var, axes: &[usize]) -> Var {
        let in_shape = self.shape(a);
        let n: usize = axes.iter().map(|&ax| in_shape[ax]).product();
        let inv = T::from_f64(1.0 / n as f64);
        self.scale(self.sum_axes(a, axes), inv)
    }

    // ---- elementwise unary -------------------------------------------------

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let value = self.with_value(a, |x| x.mapv(|v| v.sqrt()));
        self.push_op(
            value,
            vec![a],
            Box::new(|t, g, _, out| {
                let half = T::from_f64(0.5);
                vec![Some(t.div(t.scale(g, half), out))]
            }),
        )
    }

    pub fn ln(&self, a: Var) -> Var {
        let value = self.with_value(a, |x| x.mapv(|v| v.ln()));
        self.push_op(
            value,
            vec![a],
            Box::new(|t, g, p, _| vec![Some(t.div(g, p[0]))]),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.with_value(a, |x| x.mapv(|v| v.exp()));
        self.push_op(
            value,
            vec![a],
            Box::new(|t, g, _, out| vec![Some(t.mul(g, out))]),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.with_value(a, |x| x.mapv(|v| T::one() / (T::one() + (-v).exp())));
        self.push_op(
            value,
            vec![a],
            Box::new(|t, g, _, out| {
                let one_minus = t.add_scalar(t.neg(out), T::one());
                vec![Some(t.mul(g, t.mul(out, one_minus)))]
            }),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.with_value(a, |x| x.mapv(|v| v.tanh()));
        self.push_op(
            value,
            vec![a],
            Box::new(|t, g, _, out| {
                let deriv = t.add_scalar(t.neg(t.square(out)), T::one());
                vec![Some(t.mul(g, deriv))]
            }),
        )
    }

    pub fn abs(&self, a: Var) -> Var {
        let (value, mask) = self.with_value(a, |x| {
            (
                x.mapv(|v| v.abs()),
                x.mapv(|v| if v >= T::zero() { T::one() } else { -T::one() }),
            )
        });
        self.push_op(
            value,
            vec![a],
            Box::new(move |t, g, _, _| {
                let m = t.constant(mask.clone());
                vec![Some(t.mul(g, m))]
            }),
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Var {
        let (value, mask) = self.with_value(a, |x| {
            (
                x.mapv(|v| if v > T::zero() { v } else { v * slope }),
                x.mapv(|v| if v > T::zero() { T::one() } else { slope }),
            )
        });
        self.push_op(
            value,
            vec![a],
            Box::new(move |t, g, _, _| {
                let m = t.constant(mask.clone());
                vec![Some(t.mul(g, m))]
            }),
        )
    }

    // ---- structural ----------------------------------------------------

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
            ndarray::concatenate(Axis(axis), &views).expect("concat")
        };
        let sizes: Vec<usize> = parts.iter().map(|v| self.shape(*v)[axis]).collect();
        self.push_op(
            value,
            parts.to_vec(),
            Box::new(move |t, g, _, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &len in &sizes {
                    out.push(Some(t.narrow(g, axis, start, len)));
                    start += len;
                }
                out
            }),
        )
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let in_shape = self.shape(a);
        let total = in_shape[axis];
        assert!(start + len <= total, "narrow out of bounds");
        let value = self.with_value(a, |x| {
            x.slice_axis(Axis(axis), Slice::from(start..start + len))
                .to_owned()
        });
        self.push_op(
            value,
            vec![a],
            Box::new(move |t, g, _, _| {
                if start == 0 && len == total {
                    return vec![Some(g)];
                }
                let mut parts = Vec::new();
                if start > 0 {
                    let mut s = in_shape.clone();
                    s[axis] = start;
                    parts.push(t.zeros(&s));
                }
                parts.push(g);
                if start + len < total {
                    let mut s = in_shape.clone();
                    s[axis] = total - start - len;
                    parts.push(t.zeros(&s));
                }
                vec![Some(t.concat(axis, &parts))]
            }),
        )
    }

    pub fn transpose2(&self, a: Var) -> Var {
        assert_eq!(self.shape(a).len(), 2, "transpose2: rank-2 only");
        let value = self.with_value(a, |x| x.t().to_owned());
        self.push_op(
            value,
            vec![a],
            Box::new(|t, g, _, _| vec![Some(t.transpose2(g))]),
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "matmul: lhs rank");
        assert_eq!(sb.len(), 2, "matmul: rhs rank");
        assert_eq!(sa[1], sb[0], "matmul: inner dims {sa:?} x {sb:?}");
        let value = self.with_values2(a, b, |x, y| {
            let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let y2 = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            x2.dot(&y2).into_dyn()
        });
        self.push_op(
            value,
            vec![a, b],
            Box::new(|t, g, p, _| {
                let ga = t.matmul(g, t.transpose2(p[1]));
                let gb = t.matmul(t.transpose2(p[0]), g);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// out[i] = a[i, idx[i]] for a (B, K) input.
    pub fn select_per_row(&self, a: Var, idx: &[usize]) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape.len(), 2, "select_per_row: rank-2 only");
        assert_eq!(shape[0], idx.len(), "select_per_row: batch mismatch");
        let idx_owned = idx.to_vec();
        let value = self.with_value(a, |x| {
            let x2 = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            ndarray::Array1::from_iter(idx_owned.iter().enumerate().map(|(i, &j)| x2[(i, j)]))
                .into_dyn()
        });
        let ncols = shape[1];
        let idx2 = idx.to_vec();
        self.push_op(
            value,
            vec![a],
            Box::new(move |t, g, _, _| vec![Some(t.scatter_per_row(g, &idx2, ncols))]),
        )
    }

    /// Inverse of `select_per_row`: place a (B,) vector into a zero (B, K).
    pub fn scatter_per_row(&self, a: Var, idx: &[usize], ncols: usize) -> Var {
        let shape = self.shape(a);
        assert_eq!(shape.len(), 1, "scatter_per_row: rank-1 only");
        assert_eq!(shape[0], idx.len(), "scatter_per_row: batch mismatch");
        let idx_owned = idx.to_vec();
        let value = self.with_value(a, |x| {
            let mut out = ndarray::Array2::zeros((idx_owned.len(), ncols));
            for (i, &j) in idx_owned.iter().enumerate() {
                out[(i, j)] = x[i];
            }
            out.into_dyn()
        });
        let idx2 = idx.to_vec();
        self.push_op(
            value,
            vec![a],
            Box::new(move |t, g, _, _| vec![Some(t.select_per_row(g, &idx2))]),
        )
    }

    /// Cut the graph: same value, no gradient flow.
    pub fn detach(&self, a: Var) -> Var {
        let value = self.value(a);
        self.constant(value)
    }

    // ---- convolutions ----------------------------------------------------

    /// 2-d convolution; x is (B, Cin, H, W), w is (Cout, Cin, KH, KW).
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let value = self.with_values2(x, w, |xv, wv| {
            conv2d_fwd(&as4(xv), &as4(wv), stride, pad).into_dyn()
        });
        let in_hw = (xs[2], xs[3]);
        let k_hw = (ws[2], ws[3]);
        self.push_op(
            value,
            vec![x, w],
            Box::new(move |t, g, p, _| {
                let gx = t.conv_transpose2d(g, p[1], stride, pad, in_hw);
                let gw = t.conv2d_kernel_grad(p[0], g, stride, pad, k_hw);
                vec![Some(gx), Some(gw)]
            }),
        )
    }

    /// Transposed 2-d convolution (adjoint of `conv2d` in its input).
    /// x is (B, F, Hs, Ws), w is (F, Cout, KH, KW), output is (B, Cout, *out_hw).
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Var {
        let ws = self.shape(w);
        let value = self.with_values2(x, w, |xv, wv| {
            conv2d_dinput(&as4(xv), &as4(wv), stride, pad, out_hw).into_dyn()
        });
        let k_hw = (ws[2], ws[3]);
        self.push_op(
            value,
            vec![x, w],
            Box::new(move |t, g, p, _| {
                let gx = t.conv2d(g, p[1], stride, pad);
                let gw = t.conv2d_kernel_grad(g, p[0], stride, pad, k_hw);
                vec![Some(gx), Some(gw)]
            }),
        )
    }

    /// Kernel-gradient of `conv2d` as a first-class op so that convolution
    /// backward passes can themselves be differentiated.
    /// xin is (B, Cin, H, W), gout is (B, Cout, Ho, Wo); output (Cout, Cin, KH, KW).
    pub fn conv2d_kernel_grad(
        &self,
        xin: Var,
        gout: Var,
        stride: usize,
        pad: usize,
        k_hw: (usize, usize),
    ) -> Var {
        let xs = self.shape(xin);
        let value = self.with_values2(xin, gout, |xv, gv| {
            conv2d_dkernel(&as4(xv), &as4(gv), stride, pad, k_hw).into_dyn()
        });
        let in_hw = (xs[2], xs[3]);
        self.push_op(
            value,
            vec![xin, gout],
            Box::new(move |t, g, p, _| {
                let gxin = t.conv_transpose2d(p[1], g, stride, pad, in_hw);
                let ggout = t.conv2d(p[0], g, stride, pad);
                vec![Some(gxin), Some(ggout)]
            }),
        )
    }
}
