use super::kernels::{self, ConvGeom};
use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn unary<S: Scalar>(x: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    x.map(f)
}

/// Splits a rank >= 2 shape into (outer, dim1, inner).
fn split_dim1(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn add(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        self.tape.op(
            &[self, other],
            a.zip_map(&b, |x, y| x + y),
            Box::new(|args| vec![args.needs[0].then(|| args.grad.clone()), args.needs[1].then(|| args.grad.clone())]),
        )
    }

    pub fn sub(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        self.tape.op(
            &[self, other],
            a.zip_map(&b, |x, y| x - y),
            Box::new(|args| {
                vec![args.needs[0].then(|| args.grad.clone()), args.needs[1].then(|| args.grad.map(|g| -g))]
            }),
        )
    }

    pub fn mul(self, other: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        self.tape.op(
            &[self, other],
            a.zip_map(&b, |x, y| x * y),
            Box::new(|args| {
                vec![
                    args.needs[0].then(|| args.grad.zip_map(args.inputs[1], |g, y| g * y)),
                    args.needs[1].then(|| args.grad.zip_map(args.inputs[0], |g, x| g * x)),
                ]
            }),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t, S> {
        let c = S::of(c);
        self.tape.op(
            &[self],
            unary(&self.value(), |x| x * c),
            Box::new(move |args| vec![Some(args.grad.map(|g| g * c))]),
        )
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        self.tape.op(
            &[self],
            unary(&self.value(), |x| S::one() / (S::one() + (-x).exp())),
            Box::new(|args| vec![Some(args.grad.zip_map(args.output, |g, y| g * y * (S::one() - y)))]),
        )
    }

    pub fn tanh(self) -> Var<'t, S> {
        self.tape.op(
            &[self],
            unary(&self.value(), |x| x.tanh()),
            Box::new(|args| vec![Some(args.grad.zip_map(args.output, |g, y| g * (S::one() - y * y)))]),
        )
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, S> {
        let s = S::of(slope);
        self.tape.op(
            &[self],
            unary(&self.value(), |x| if x > S::zero() { x } else { x * s }),
            Box::new(move |args| {
                vec![Some(args.grad.zip_map(args.inputs[0], |g, x| if x > S::zero() { g } else { g * s }))]
            }),
        )
    }

    /// Elementwise square root; callers keep inputs positive.
    pub fn sqrt(self) -> Var<'t, S> {
        self.tape.op(
            &[self],
            unary(&self.value(), |x| x.sqrt()),
            Box::new(|args| vec![Some(args.grad.zip_map(args.output, |g, y| g / (y + y)))]),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, S> {
        let v = (*self.value()).clone().reshape(shape).expect("reshape element count");
        self.tape.op(
            &[self],
            v,
            Box::new(|args| vec![Some(args.grad.clone().reshape(args.inputs[0].shape()).expect("same numel"))]),
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(self) -> Var<'t, S> {
        self.tape.op(
            &[self],
            Tensor::scalar(self.value().sum()),
            Box::new(|args| vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'t, S> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Concatenation along axis 1.
    pub fn concat(parts: &[Var<'t, S>]) -> Var<'t, S> {
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (outer, _, inner) = split_dim1(values[0].shape());
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        for v in &values {
            assert_eq!(v.shape()[0], outer, "concat batch mismatch");
            assert_eq!(split_dim1(v.shape()).2, inner, "concat trailing dims mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut shape = values[0].shape().to_vec();
        shape[1] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let out = Tensor::from_vec(&shape, data).expect("concat size");
        tape.op(
            parts,
            out,
            Box::new(move |args| {
                let mut offset = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let start = offset;
                        offset += w;
                        args.needs[i].then(|| narrow_values(args.grad, start, w))
                    })
                    .collect()
            }),
        )
    }

    /// Channels `[start, start + len)` along axis 1.
    pub fn narrow(self, start: usize, len: usize) -> Var<'t, S> {
        let v = narrow_values(&self.value(), start, len);
        self.tape.op(
            &[self],
            v,
            Box::new(move |args| {
                let shape = args.inputs[0].shape();
                let (outer, n1, inner) = split_dim1(shape);
                let mut g = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = (o * n1 + start) * inner;
                    let src = o * len * inner;
                    g.data_mut()[dst..dst + len * inner].copy_from_slice(&args.grad.data()[src..src + len * inner]);
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn conv2d(self, weight: Var<'t, S>, bias: Option<Var<'t, S>>, geom: ConvGeom) -> Var<'t, S> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let out = kernels::conv2d(&x, &w, b.as_deref(), geom);
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.tape.op(
            &inputs,
            out,
            Box::new(move |args| {
                let needs = [args.needs[0], args.needs[1], args.needs.get(2).copied().unwrap_or(false)];
                let [gx, gw, gb] = kernels::conv2d_backward(args.inputs[0], args.inputs[1], args.grad, geom, needs);
                let mut v = vec![gx, gw];
                if args.inputs.len() == 3 {
                    v.push(gb);
                }
                v
            }),
        )
    }

    pub fn conv_transpose2d(self, weight: Var<'t, S>, bias: Option<Var<'t, S>>, geom: ConvGeom) -> Var<'t, S> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let out = kernels::conv_transpose2d(&x, &w, b.as_deref(), geom);
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        self.tape.op(
            &inputs,
            out,
            Box::new(move |args| {
                let needs = [args.needs[0], args.needs[1], args.needs.get(2).copied().unwrap_or(false)];
                let [gx, gw, gb] =
                    kernels::conv_transpose2d_backward(args.inputs[0], args.inputs[1], args.grad, geom, needs);
                let mut v = vec![gx, gw];
                if args.inputs.len() == 3 {
                    v.push(gb);
                }
                v
            }),
        )
    }

    /// `x[B, F] * w[O, F]^T + b[O]`.
    pub fn linear(self, weight: Var<'t, S>, bias: Var<'t, S>) -> Var<'t, S> {
        use crate::scalar::{gemm, MatRef};
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (bn, f) = (x.dim(0), x.dim(1));
        let o = w.dim(0);
        assert_eq!(w.dim(1), f, "linear weight {:?} vs input {:?}", w.shape(), x.shape());
        let mut out = Tensor::zeros(&[bn, o]);
        for r in 0..bn {
            out.data_mut()[r * o..(r + 1) * o].copy_from_slice(b.data());
        }
        gemm(MatRef::new(x.data(), bn, f), MatRef::new(w.data(), o, f).t(), S::one(), out.data_mut());
        self.tape.op(
            &[self, weight, bias],
            out,
            Box::new(move |args| {
                let (x, w, g) = (args.inputs[0], args.inputs[1], args.grad);
                let gx = args.needs[0].then(|| {
                    let mut gx = Tensor::zeros(x.shape());
                    gemm(MatRef::new(g.data(), bn, o), MatRef::new(w.data(), o, f), S::zero(), gx.data_mut());
                    gx
                });
                let gw = args.needs[1].then(|| {
                    let mut gw = Tensor::zeros(w.shape());
                    gemm(MatRef::new(g.data(), bn, o).t(), MatRef::new(x.data(), bn, f), S::zero(), gw.data_mut());
                    gw
                });
                let gb = args.needs[2].then(|| {
                    let mut gb = Tensor::zeros(&[o]);
                    for r in 0..bn {
                        for j in 0..o {
                            gb.data_mut()[j] += g.data()[r * o + j];
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        )
    }

    pub fn group_norm(self, gamma: Var<'t, S>, beta: Var<'t, S>, groups: usize) -> Var<'t, S> {
        const EPS: f64 = 1e-5;
        let out = kernels::group_norm(&self.value(), &gamma.value(), &beta.value(), groups, EPS);
        self.tape.op(
            &[self, gamma, beta],
            out,
            Box::new(move |args| {
                let needs = [args.needs[0], args.needs[1], args.needs[2]];
                kernels::group_norm_backward(args.inputs[0], args.inputs[1], args.grad, groups, EPS, needs).into()
            }),
        )
    }

    pub fn max_pool2(self) -> Var<'t, S> {
        self.tape.op(
            &[self],
            kernels::max_pool2(&self.value()),
            Box::new(|args| vec![Some(kernels::max_pool2_backward(args.inputs[0], args.grad))]),
        )
    }

    pub fn upsample_nearest(self, factor: usize) -> Var<'t, S> {
        if factor == 1 {
            return self;
        }
        self.tape.op(
            &[self],
            kernels::upsample_nearest(&self.value(), factor),
            Box::new(move |args| vec![Some(kernels::upsample_nearest_backward(args.inputs[0].shape(), args.grad, factor))]),
        )
    }

    /// Per-sample sum of squared differences to a fixed target: `[B]`.
    pub fn sq_err_per_sample(self, target: &Tensor<S>) -> Var<'t, S> {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "prediction/target shape mismatch");
        let bn = x.dim(0);
        let inner = x.numel() / bn;
        let diff = x.zip_map(target, |a, b| a - b);
        let mut out = Tensor::zeros(&[bn]);
        for b in 0..bn {
            out.data_mut()[b] = diff.data()[b * inner..(b + 1) * inner].iter().map(|&d| d * d).sum();
        }
        self.tape.op(
            &[self],
            out,
            Box::new(move |args| {
                let two = S::of(2.0);
                let mut g = diff.clone();
                for (i, v) in g.data_mut().iter_mut().enumerate() {
                    *v = *v * two * args.grad.data()[i / inner];
                }
                vec![Some(g)]
            }),
        )
    }
}

fn narrow_values<S: Scalar>(t: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let (outer, n1, inner) = split_dim1(t.shape());
    assert!(start + len <= n1, "narrow out of range");
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n1 + start) * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[1] = len;
    Tensor::from_vec(&shape, data).expect("narrow size")
}
