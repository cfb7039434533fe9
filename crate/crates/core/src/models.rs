//! Small classifiers: a ConvNet of `conv3×3 → ReLU → avgpool2` blocks, and an MLP.
//!
//! Neither architecture uses a normalization layer that mixes batch rows, so
//! the logits and features of sample `i` depend only on sample `i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding::{rng_for, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Convnet,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub depth: usize,
    pub width: usize,
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn convnet(
        depth: usize,
        width: usize,
        input_shape: [usize; 3],
        num_classes: usize,
    ) -> Self {
        Self {
            arch: Arch::Convnet,
            depth,
            width,
            input_shape,
            num_classes,
        }
    }

    pub fn mlp(depth: usize, width: usize, input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            arch: Arch::Mlp,
            ..Self::convnet(depth, width, input_shape, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidSpec("depth must be at least 1".into()));
        }
        if self.width == 0 || self.num_classes == 0 {
            return Err(Error::InvalidSpec(
                "width and num_classes must be positive".into(),
            ));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "empty input shape {:?}",
                self.input_shape
            )));
        }
        if self.arch == Arch::Convnet {
            let div = 1usize << self.depth;
            let [_, h, w] = self.input_shape;
            if h % div != 0 || w % div != 0 {
                return Err(Error::InvalidSpec(format!(
                    "input {h}x{w} not divisible by 2^{} for {} pooling stages",
                    self.depth, self.depth
                )));
            }
        }
        Ok(())
    }

    /// Width of the penultimate activation.
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            Arch::Convnet => {
                let [_, h, w] = self.input_shape;
                self.width * (h >> self.depth) * (w >> self.depth)
            }
            Arch::Mlp => self.width,
        }
    }

    fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// `(name, shape, fan_in)` of every parameter tensor, in layer order.
    fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut prev = match self.arch {
            Arch::Convnet => self.input_shape[0],
            Arch::Mlp => self.input_len(),
        };
        for l in 0..self.depth {
            match self.arch {
                Arch::Convnet => {
                    out.push((
                        format!("conv{l}.weight"),
                        vec![self.width, prev, 3, 3],
                        prev * 9,
                    ));
                    out.push((format!("conv{l}.bias"), vec![self.width], prev * 9));
                }
                Arch::Mlp => {
                    out.push((format!("fc{l}.weight"), vec![prev, self.width], prev));
                    out.push((format!("fc{l}.bias"), vec![self.width], prev));
                }
            }
            prev = self.width;
        }
        let f = self.feature_dim();
        out.push(("classifier.weight".into(), vec![f, self.num_classes], f));
        out.push(("classifier.bias".into(), vec![self.num_classes], f));
        out
    }
}

/// Parameters of one classifier instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub params: Vec<Tensor<T>>,
    pub names: Vec<String>,
    pub seed: u64,
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub features: Var,
    pub logits: Var,
}

/// Kaiming-uniform weights (variance `2 / fan_in`), zero biases.
pub fn init_network<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<Network<T>> {
    spec.validate()?;
    let mut rng = rng_for(seed, Stream::NetworkInit, 0);
    let mut params = Vec::new();
    let mut names = Vec::new();
    for (name, shape, fan_in) in spec.param_layout() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect();
            Tensor::new(&shape, data)?
        };
        params.push(t);
        names.push(name);
    }
    Ok(Network {
        spec: spec.clone(),
        params,
        names,
        seed,
    })
}

impl<T: Scalar> Network<T> {
    /// Parameter indices grouped by layer (weight, bias), in forward order.
    pub fn layer_groups(&self) -> Vec<Vec<usize>> {
        (0..self.params.len() / 2)
            .map(|l| vec![2 * l, 2 * l + 1])
            .collect()
    }

    /// Places parameters on `g`, as grad-requiring leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    pub fn check_batch(&self, batch: &[usize]) -> Result<()> {
        if batch.len() != 4 || batch[1..] != self.spec.input_shape {
            return Err(Error::shape(
                "network",
                format!(
                    "batch {batch:?} does not match input [N, {}, {}, {}]",
                    self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2]
                ),
            ));
        }
        Ok(())
    }

    /// Records a forward pass of `x` (`[N, C, H, W]`) using bound `params`.
    pub fn forward(&self, g: &mut Graph<T>, params: &[Var], x: Var) -> Result<Forward> {
        self.check_batch(g.shape(x))?;
        let mut h = x;
        match self.spec.arch {
            Arch::Convnet => {
                for l in 0..self.spec.depth {
                    let c = g.conv2d(h, params[2 * l], 1, 1)?;
                    let c = g.add_bias(c, params[2 * l + 1])?;
                    let r = g.relu(c);
                    h = g.avgpool2d(r, 2)?;
                }
                h = g.flatten(h)?;
            }
            Arch::Mlp => {
                h = g.flatten(h)?;
                for l in 0..self.spec.depth {
                    let z = g.matmul(h, params[2 * l])?;
                    let z = g.add_bias(z, params[2 * l + 1])?;
                    h = g.relu(z);
                }
            }
        }
        let d = self.spec.depth;
        let z = g.matmul(h, params[2 * d])?;
        let logits = g.add_bias(z, params[2 * d + 1])?;
        Ok(Forward {
            features: h,
            logits,
        })
    }

    fn infer(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::inference();
        let params = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &params, x)?;
        Ok((g.value(out.features).clone(), g.value(out.logits).clone()))
    }

    /// `[N, num_classes]` logits.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer(batch)?.1)
    }

    /// `[N, F]` penultimate activations (the classifier's input).
    pub fn features(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer(batch)?.0)
    }

    /// Mean softmax cross-entropy.
    pub fn class_loss(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let mut g = Graph::inference();
        let params = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &params, x)?;
        let l = g.softmax_cross_entropy(out.logits, labels)?;
        Ok(g.value(l).item())
    }

    /// Gradient of `class_loss` w.r.t. each layer, as flat `[weight.., bias..]` arrays.
    pub fn gradient_vector(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<Vec<Vec<T>>> {
        let grads = self.param_gradients(batch, labels)?;
        Ok(self
            .layer_groups()
            .into_iter()
            .map(|idx| idx.iter().flat_map(|&i| grads[i].data().to_vec()).collect())
            .collect())
    }

    /// Gradient of `class_loss` w.r.t. each parameter tensor.
    pub fn param_gradients(&self, batch: &Tensor<T>, labels: &[usize]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, true);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &params, x)?;
        let l = g.softmax_cross_entropy(out.logits, labels)?;
        let grads = g.backward(l)?;
        Ok(params
            .iter()
            .map(|&p| g.value(grads.get(p).expect("param gradient")).clone())
            .collect())
    }

    /// Top-1 predictions.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        let k = self.spec.num_classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }
}

/// Parameter gradients of the class loss of `x` recorded on `g`.
///
/// With `create_graph`, the returned gradient nodes remain differentiable
/// w.r.t. `x` (and anything upstream of it).
pub fn param_grads_on_graph<T: Scalar>(
    net: &Network<T>,
    g: &mut Graph<T>,
    x: Var,
    labels: &[usize],
    create_graph: bool,
) -> Result<Vec<Var>> {
    let params = net.bind(g, true);
    let out = net.forward(g, &params, x)?;
    let loss = g.softmax_cross_entropy(out.logits, labels)?;
    g.grad(loss, &params, create_graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn spec() -> NetworkSpec {
        NetworkSpec::convnet(2, 8, [1, 8, 8], 10)
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let d = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::new(shape, d).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_network::<f32>(&spec(), 3).unwrap();
        let b = init_network::<f32>(&spec(), 3).unwrap();
        let c = init_network::<f32>(&spec(), 4).unwrap();
        assert!(a.params.iter().zip(&b.params).all(|(x, y)| x.bit_eq(y)));
        assert!(a.params.iter().zip(&c.params).any(|(x, y)| x != y));
    }

    #[test]
    fn first_conv_variance_matches_fan_in() {
        let s = NetworkSpec::convnet(1, 64, [3, 8, 8], 10);
        let net = init_network::<f64>(&s, 11).unwrap();
        let w = &net.params[0];
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / 27.0;
        assert!((var - want).abs() / want < 0.2, "{var} vs {want}");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(init_network::<f32>(&NetworkSpec::convnet(3, 8, [1, 12, 12], 10), 0).is_err());
        assert!(init_network::<f32>(&NetworkSpec::convnet(0, 8, [1, 8, 8], 10), 0).is_err());
        assert!(init_network::<f32>(&NetworkSpec::mlp(1, 8, [1, 5, 5], 3), 0).is_ok());
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let mut net = init_network::<f64>(&spec(), 1).unwrap();
        let d = net.spec.depth;
        net.params[2 * d] = Tensor::zeros(net.params[2 * d].shape());
        let logits = net.logits(&randn(&[3, 1, 8, 8], 2)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_row_matches_batched_row() {
        let net = init_network::<f64>(&spec(), 5).unwrap();
        let batch = randn(&[8, 1, 8, 8], 6);
        let full = net.logits(&batch).unwrap();
        let one = net.logits(&batch.slice_rows(3, 4).unwrap()).unwrap();
        for (a, b) in one.data().iter().zip(full.slice_rows(3, 4).unwrap().data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn permuting_rows_permutes_logits() {
        let net = init_network::<f64>(&spec(), 5).unwrap();
        let batch = randn(&[4, 1, 8, 8], 7);
        let rows: Vec<Tensor<f64>> = (0..4)
            .map(|i| batch.slice_rows(i, i + 1).unwrap())
            .collect();
        let perm = [2usize, 0, 3, 1];
        let permuted =
            Tensor::concat_rows(&perm.iter().map(|&i| &rows[i]).collect::<Vec<_>>()).unwrap();
        let a = net.logits(&batch).unwrap();
        let b = net.logits(&permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(
                b.slice_rows(j, j + 1).unwrap(),
                a.slice_rows(i, i + 1).unwrap()
            );
        }
    }

    #[test]
    fn feature_prefix_rows_equal_subset_forward() {
        let net = init_network::<f32>(&spec(), 9).unwrap();
        let batch = randn(&[6, 1, 8, 8], 8).cast::<f32>();
        let full = net.features(&batch).unwrap();
        let sub = net.features(&batch.slice_rows(0, 2).unwrap()).unwrap();
        assert!(sub.bit_eq(&full.slice_rows(0, 2).unwrap()));
        assert_eq!(full.shape(), &[6, net.spec.feature_dim()]);
        assert_eq!(net.spec.feature_dim(), 8 * 2 * 2);
    }

    #[test]
    fn zero_input_and_biases_give_zero_features() {
        let net = init_network::<f64>(&spec(), 9).unwrap();
        let f = net.features(&Tensor::zeros(&[2, 1, 8, 8])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_loss_uniform_and_confident() {
        let mut net = init_network::<f64>(&spec(), 1).unwrap();
        let d = net.spec.depth;
        net.params[2 * d] = Tensor::zeros(net.params[2 * d].shape());
        let x = randn(&[4, 1, 8, 8], 3);
        let l = net.class_loss(&x, &[0, 1, 2, 3]).unwrap();
        assert!((l - (10f64).ln()).abs() < 1e-12);

        let mut bias = vec![0.0; 10];
        bias[7] = 100.0;
        net.params[2 * d + 1] = Tensor::from_f64(&[10], &bias).unwrap();
        assert!(net.class_loss(&x, &[7, 7, 7, 7]).unwrap() < 1e-12);
        assert!(net.class_loss(&x, &[10, 0, 0, 0]).is_err());
    }

    #[test]
    fn class_loss_matches_log_sum_exp_oracle() {
        let net = init_network::<f64>(&spec(), 21).unwrap();
        let x = randn(&[5, 1, 8, 8], 22);
        let labels = [3, 1, 4, 1, 5];
        let logits = net.logits(&x).unwrap();
        let mut want = 0.0;
        for (row, &y) in logits.data().chunks(10).zip(&labels) {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[y];
        }
        want /= 5.0;
        assert!((net.class_loss(&x, &labels).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let net = init_network::<f64>(&spec(), 2).unwrap();
        let x = randn(&[3, 1, 8, 8], 4);
        let labels = [0, 5, 9];
        let xx = Tensor::concat_rows(&[&x, &x]).unwrap();
        let ll = [0, 5, 9, 0, 5, 9];
        let a = net.gradient_vector(&x, &labels).unwrap();
        let b = net.gradient_vector(&xx, &ll).unwrap();
        assert_eq!(a.len(), 3);
        for (la, lb) in a.iter().zip(&b) {
            for (u, v) in la.iter().zip(lb) {
                assert!((u - v).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn saturated_margins_give_near_zero_gradient() {
        let mut net = init_network::<f64>(&spec(), 2).unwrap();
        let d = net.spec.depth;
        let mut bias = vec![0.0; 10];
        bias[4] = 60.0;
        net.params[2 * d + 1] = Tensor::from_f64(&[10], &bias).unwrap();
        let x = randn(&[4, 1, 8, 8], 4);
        let labels = net.predict(&x).unwrap();
        let gv = net.gradient_vector(&x, &labels).unwrap();
        let norm: f64 = gv.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-4, "{norm}");
    }

    #[test]
    fn gradient_vector_leaves_params_unchanged() {
        let net = init_network::<f64>(&spec(), 2).unwrap();
        let before = net.clone();
        net.gradient_vector(&randn(&[2, 1, 8, 8], 1), &[1, 2])
            .unwrap();
        assert_eq!(net, before);
    }
}
