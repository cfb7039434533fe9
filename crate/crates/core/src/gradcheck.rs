//! Central finite-difference checks of reverse-mode gradients.

use rand::Rng;

use crate::autodiff::{Graph, OpKind, Var};
use crate::condense::{match_loss_on_graph, real_param_grads, DistanceMetric};
use crate::error::Result;
use crate::kernels::ConvGeom;
use crate::models::{init_network, Network, NetworkSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport<T> {
    /// Max over compared coordinates of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_error: T,
    pub compared: usize,
    /// Coordinates whose `±eps` probes switched a ReLU piece; the function is
    /// not smooth there, so they are left out.
    pub skipped: usize,
}

/// [`gradient_check_report`] reduced to the worst error.
pub fn gradient_check<T, F>(f: F, point: &Tensor<T>, eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    Ok(gradient_check_report(f, point, eps)?.max_error)
}

/// Compares reverse-mode gradients of `f` at `point` with central differences.
///
/// `f` builds a scalar from the single leaf it is handed. NaN anywhere yields NaN.
pub fn gradient_check_report<T, F>(f: F, point: &Tensor<T>, eps: T) -> Result<CheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.param(point.clone());
        let y = f(&mut g, x)?;
        if !g.requires_grad(y) {
            // Constant function: the analytic gradient is identically zero.
            Tensor::zeros(point.shape())
        } else {
            let grads = g.backward(y)?;
            g.value(grads.get(x).expect("leaf gradient")).clone()
        }
    };
    // A recording graph, so `f` may differentiate internally.
    let eval = |p: Tensor<T>| -> Result<(T, u64)> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        Ok((g.value(y).item(), g.kink_signature()))
    };

    let (_, base) = eval(point.clone())?;
    let two = T::one() + T::one();
    let mut report = CheckReport {
        max_error: T::zero(),
        compared: 0,
        skipped: 0,
    };
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let ((fp, sp), (fm, sm)) = (eval(plus)?, eval(minus)?);
        if sp != base || sm != base {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (two * eps);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(T::one());
        if err.is_nan() {
            report.max_error = T::nan();
            return Ok(report);
        }
        report.compared += 1;
        report.max_error = report.max_error.max(err);
    }
    Ok(report)
}

/// Random input tensors for [`check_registered_op`].
struct Inputs<R> {
    rng: R,
}

impl<R: Rng> Inputs<R> {
    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    fn uniform<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.rng.random_range(-1.0..1.0)))
            .collect();
        Tensor::new(shape, data).expect("shape")
    }

    /// Values bounded away from zero, so kinks at 0 are never crossed.
    fn off_zero<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m: f64 = self.rng.random_range(0.1..1.0);
                T::from_f64_lossy(if self.rng.random_bool(0.5) { m } else { -m })
            })
            .collect();
        Tensor::new(shape, data).expect("shape")
    }
}

/// Worst gradient-check error of `op` over every differentiable input, on
/// random shapes and values drawn from `seed`.
///
/// Each op output is reduced to a scalar by a random weighted sum, so the
/// whole Jacobian is exercised.
pub fn check_registered_op<T: Scalar>(kind: OpKind, seed: u64, eps: T) -> Result<T> {
    use rand::SeedableRng;
    let mut inp = Inputs {
        rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
    };

    // Each entry: the inputs, and the op applied to them.
    type Build<T> = Box<dyn Fn(&mut Graph<T>, &[Var]) -> Result<Var>>;
    let (inputs, op): (Vec<Tensor<T>>, Build<T>) = match kind {
        OpKind::MatMul => {
            let (m, k, n) = (inp.dim(1, 4), inp.dim(1, 4), inp.dim(1, 4));
            let (ta, tb) = (inp.rng.random_bool(0.5), inp.rng.random_bool(0.5));
            let a = inp.uniform(&if ta { [k, m] } else { [m, k] });
            let b = inp.uniform(&if tb { [n, k] } else { [k, n] });
            (
                vec![a, b],
                Box::new(move |g, v| g.matmul_t(v[0], v[1], ta, tb)),
            )
        }
        OpKind::Conv2d | OpKind::Conv2dInputGrad | OpKind::Conv2dWeightGrad => {
            let k = if inp.rng.random_bool(0.5) { 3 } else { 1 };
            let geom = ConvGeom {
                batch: inp.dim(1, 2),
                in_ch: inp.dim(1, 2),
                in_h: inp.dim(3, 5),
                in_w: inp.dim(3, 5),
                out_ch: inp.dim(1, 3),
                k_h: k,
                k_w: k,
                stride: inp.dim(1, 2),
                pad: inp.dim(0, 1),
            };
            let x = inp.uniform(&geom.input_shape());
            let w = inp.uniform(&geom.kernel_shape());
            let gy = inp.uniform(&geom.output_shape());
            match kind {
                OpKind::Conv2d => (
                    vec![x, w],
                    Box::new(move |g, v| g.conv2d(v[0], v[1], geom.stride, geom.pad)),
                ),
                OpKind::Conv2dInputGrad => (
                    vec![gy, w],
                    Box::new(move |g, v| g.conv2d_input_grad(v[0], v[1], geom)),
                ),
                _ => (
                    vec![x, gy],
                    Box::new(move |g, v| g.conv2d_weight_grad(v[0], v[1], geom)),
                ),
            }
        }
        OpKind::Relu => {
            let s = [inp.dim(1, 3), inp.dim(1, 5)];
            (vec![inp.off_zero(&s)], Box::new(|g, v| Ok(g.relu(v[0]))))
        }
        OpKind::ReluMask => {
            let s = [inp.dim(1, 3), inp.dim(1, 5)];
            (
                vec![inp.uniform(&s), inp.off_zero(&s)],
                Box::new(|g, v| g.relu_mask(v[0], v[1])),
            )
        }
        OpKind::AvgPool2d | OpKind::AvgPool2dGrad => {
            let k = inp.dim(1, 2);
            let (n, c, h, w) = (inp.dim(1, 2), inp.dim(1, 2), inp.dim(1, 3), inp.dim(1, 3));
            if kind == OpKind::AvgPool2d {
                let x = inp.uniform(&[n, c, h * k, w * k]);
                (vec![x], Box::new(move |g, v| g.avgpool2d(v[0], k)))
            } else {
                let gy = inp.uniform(&[n, c, h, w]);
                (vec![gy], Box::new(move |g, v| g.avgpool2d_grad(v[0], k)))
            }
        }
        OpKind::Reshape => {
            let (a, b) = (inp.dim(1, 3), inp.dim(1, 4));
            (
                vec![inp.uniform(&[a, b])],
                Box::new(move |g, v| g.reshape(v[0], &[b, a])),
            )
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Mse => {
            let s = [inp.dim(1, 3), inp.dim(1, 4)];
            let (a, b) = (inp.uniform(&s), inp.uniform(&s));
            let op: Build<T> = match kind {
                OpKind::Add => Box::new(|g, v| g.add(v[0], v[1])),
                OpKind::Sub => Box::new(|g, v| g.sub(v[0], v[1])),
                OpKind::Mul => Box::new(|g, v| g.mul(v[0], v[1])),
                _ => Box::new(|g, v| g.mse(v[0], v[1])),
            };
            (vec![a, b], op)
        }
        OpKind::Scale => {
            let c = T::from_f64_lossy(inp.rng.random_range(-2.0..2.0));
            let s = [inp.dim(1, 3), inp.dim(1, 4)];
            (
                vec![inp.uniform(&s)],
                Box::new(move |g, v| Ok(g.scale(v[0], c))),
            )
        }
        OpKind::SumAll => {
            let s = [inp.dim(1, 3), inp.dim(1, 4)];
            (vec![inp.uniform(&s)], Box::new(|g, v| Ok(g.sum_all(v[0]))))
        }
        OpKind::Expand => {
            let target = [inp.dim(1, 3), inp.dim(1, 4)];
            (
                vec![inp.uniform(&[1])],
                Box::new(move |g, v| g.expand(v[0], &target)),
            )
        }
        OpKind::BroadcastChannels | OpKind::SumChannels => {
            let s = [inp.dim(1, 2), inp.dim(1, 3), inp.dim(1, 3), inp.dim(1, 3)];
            if kind == OpKind::BroadcastChannels {
                (
                    vec![inp.uniform(&[s[1]])],
                    Box::new(move |g, v| g.broadcast_channels(v[0], &s)),
                )
            } else {
                (vec![inp.uniform(&s)], Box::new(|g, v| g.sum_channels(v[0])))
            }
        }
        OpKind::Softmax | OpKind::RowSumBroadcast => {
            let s = [inp.dim(1, 3), inp.dim(1, 5)];
            let op: Build<T> = if kind == OpKind::Softmax {
                Box::new(|g, v| g.softmax(v[0]))
            } else {
                Box::new(|g, v| g.row_sum_broadcast(v[0]))
            };
            (vec![inp.uniform(&s)], op)
        }
        OpKind::SoftmaxCrossEntropy => {
            let (b, k) = (inp.dim(1, 4), inp.dim(2, 5));
            let labels: Vec<usize> = (0..b).map(|_| inp.rng.random_range(0..k)).collect();
            (
                vec![inp.uniform(&[b, k])],
                Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
            )
        }
        OpKind::SliceRows => {
            let rows = inp.dim(1, 5);
            let start = inp.dim(0, rows - 1);
            let end = inp.dim(start + 1, rows);
            let cols = inp.dim(1, 3);
            let x = inp.uniform(&[rows, cols]);
            (
                vec![x],
                Box::new(move |g, v| g.slice_rows(v[0], start, end)),
            )
        }
        OpKind::PadRows => {
            let rows = inp.dim(1, 3);
            let total = rows + inp.dim(0, 3);
            let start = inp.dim(0, total - rows);
            let cols = inp.dim(1, 3);
            let x = inp.uniform(&[rows, cols]);
            (
                vec![x],
                Box::new(move |g, v| g.pad_rows(v[0], start, total)),
            )
        }
    };

    // Output shape, for the random reduction weights.
    let out_shape = {
        let mut g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = op(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let weights: Tensor<T> = inp.uniform(&out_shape);

    let mut worst = T::zero();
    for i in 0..inputs.len() {
        let err = gradient_check(
            |g, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { x } else { g.constant(t.clone()) })
                    .collect();
                let y = op(g, &vars)?;
                let w = g.constant(weights.clone());
                let yw = g.mul(y, w)?;
                Ok(g.sum_all(yw))
            },
            &inputs[i],
            eps,
        )?;
        if err.is_nan() {
            return Ok(err);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Worst gradient-check error on a depth-2 ConvNet: the class loss w.r.t.
/// its input and first kernel, and the gradient-matching loss w.r.t. the
/// synthetic batch (which differentiates through parameter gradients).
pub fn check_convnet_end_to_end<T: Scalar>(seed: u64, eps: T) -> Result<CheckReport<T>> {
    use rand::SeedableRng;
    let mut inp = Inputs {
        rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
    };
    let classes = 3;
    let spec = NetworkSpec::convnet(2, 3, [1, 4, 4], classes);
    let mut net: Network<T> = init_network(&spec, inp.rng.random())?;
    // Non-zero biases keep pre-activations off the ReLU kink at a generic point.
    for l in net.layer_groups() {
        let shape = net.params[l[1]].shape().to_vec();
        net.params[l[1]] = inp.uniform(&shape);
    }
    let rows = inp.dim(1, 3);
    let x: Tensor<T> = inp.uniform(&[rows, 1, 4, 4]);
    let labels: Vec<usize> = (0..rows)
        .map(|_| inp.rng.random_range(0..classes))
        .collect();

    let input = gradient_check_report(
        |g, xv| {
            let params = net.bind(g, false);
            let out = net.forward(g, &params, xv)?;
            g.softmax_cross_entropy(out.logits, &labels)
        },
        &x,
        eps,
    )?;
    let kernel = gradient_check_report(
        |g, wv| {
            let mut params = net.bind(g, false);
            params[0] = wv;
            let xc = g.constant(x.clone());
            let out = net.forward(g, &params, xc)?;
            g.softmax_cross_entropy(out.logits, &labels)
        },
        &net.params[0],
        eps,
    )?;
    let class = labels[0];
    let real: Tensor<T> = inp.uniform(&[4, 1, 4, 4]);
    let real_grads = real_param_grads(&net, &real, class)?;
    let matching = gradient_check_report(
        |g, sv| {
            match_loss_on_graph(
                g,
                &net,
                sv,
                class,
                &real_grads,
                DistanceMetric::LayerwiseMseGrad,
                None,
                true,
            )
        },
        &x,
        eps,
    )?;
    Ok([input, kernel, matching].into_iter().fold(
        CheckReport {
            max_error: T::zero(),
            compared: 0,
            skipped: 0,
        },
        |acc, r| CheckReport {
            max_error: acc.max_error.max(r.max_error),
            compared: acc.compared + r.compared,
            skipped: acc.skipped + r.skipped,
        },
    ))
}
