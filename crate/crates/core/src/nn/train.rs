//! Loss, learning-rate schedule, momentum SGD, Xavier initialization and
//! the mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Gradients, Network};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_base: f64,
    pub lr_decay_a: f64,
    pub lr_decay_pow: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 0.0001,
            lr_base: 0.0025,
            lr_decay_a: 0.0001,
            lr_decay_pow: 0.75,
            epochs: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_base", self.lr_base),
            ("lr_decay_a", self.lr_decay_a),
            ("lr_decay_pow", self.lr_decay_pow),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidParameter("batch_size and epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// `lr_base * (1 + a * i)^(-pow)` at global iteration `i`.
pub fn lr_schedule(i: usize, config: &TrainConfig) -> f64 {
    config.lr_base * (1.0 + config.lr_decay_a * i as f64).powf(-config.lr_decay_pow)
}

/// Mean over the batch of the squared Euclidean residual norms.
pub fn mse_loss(outputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Empty("loss over an empty batch".into()));
    }
    if outputs.len() != targets.len() {
        return Err(Error::Shape {
            layer: "loss".into(),
            expected: format!("{} targets", outputs.len()),
            got: format!("{} targets", targets.len()),
        });
    }
    let mut total = 0.0;
    for (f, y) in outputs.iter().zip(targets) {
        if f.len() != y.len() {
            return Err(Error::Shape {
                layer: "loss".into(),
                expected: format!("{} components", f.len()),
                got: format!("{} components", y.len()),
            });
        }
        total += f.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
    }
    Ok(total / outputs.len() as f64)
}

/// Momentum buffer, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(pub Gradients);

impl Velocity {
    pub fn zeros_like(net: &Network) -> Self {
        Velocity(Gradients::zeros_like(net))
    }
}

/// `v <- m v - lr (g + d W)`, `W <- W + v`. Decay applies to weights, not
/// biases.
pub fn sgd_step(net: &mut Network, grads: &Gradients, velocity: &mut Velocity, config: &TrainConfig, iteration: usize) {
    let lr = lr_schedule(iteration, config);
    let (m, d) = (config.momentum, config.weight_decay);
    for ((layer, g), v) in net.layers_mut().iter_mut().zip(&grads.layers).zip(&mut velocity.0.layers) {
        let Some((w, b)) = layer.params_mut() else {
            continue;
        };
        for ((wi, gi), vi) in w.iter_mut().zip(&g.weights).zip(&mut v.weights) {
            *vi = m * *vi - lr * (gi + d * *wi);
            *wi += *vi;
        }
        for ((bi, gi), vi) in b.iter_mut().zip(&g.bias).zip(&mut v.bias) {
            *vi = m * *vi - lr * gi;
            *bi += *vi;
        }
    }
}

/// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn xavier_init(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in net.layers_mut() {
        let Some((fan_in, fan_out)) = layer.fans() else {
            continue;
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let (w, b) = layer.params_mut().expect("parametric layer");
        w.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        b.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Samples per gradient chunk. Chunks are reduced in order, so the batch
/// gradient does not depend on how many threads evaluate them.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub iterations: usize,
}

/// Mini-batch SGD over `(input, target)` pairs. Samples are reshuffled each
/// epoch from a generator seeded by `config.seed`.
pub fn train(net: &mut Network, inputs: &[Vec<f64>], targets: &[Vec<f64>], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if inputs.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Shape {
            layer: "dataset".into(),
            expected: format!("{} targets", inputs.len()),
            got: format!("{} targets", targets.len()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut velocity = Velocity::zeros_like(net);
    let mut iteration = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let partials: Vec<Result<(Gradients, f64)>> = batch
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut g = Gradients::zeros_like(net);
                    let mut loss = 0.0;
                    for &i in chunk {
                        loss += net.accumulate_gradient(&inputs[i], &targets[i], &mut g)?;
                    }
                    Ok((g, loss))
                })
                .collect();
            let mut total: Option<Gradients> = None;
            let mut batch_loss = 0.0;
            for p in partials {
                let (g, loss) = p?;
                batch_loss += loss;
                match total.as_mut() {
                    None => total = Some(g),
                    Some(t) => t.add_assign(&g),
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    iteration,
                    loss: batch_loss,
                });
            }
            let mut grads = total.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            sgd_step(net, &grads, &mut velocity, config, iteration);
            epoch_loss += batch_loss;
            iteration += 1;
        }
        epoch_losses.push(epoch_loss / inputs.len() as f64);
    }
    Ok(TrainReport {
        epoch_losses,
        iterations: iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{Architecture, LayerSpec, Shape3};
    use super::*;
    use rand::Rng;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0, &cfg()), 0.0025);
        let expected = 0.0025 * 2f64.powf(-0.75);
        assert!((lr_schedule(10_000, &cfg()) - expected).abs() < 1e-15);
        assert!((lr_schedule(10_000, &cfg()) - 0.0014865).abs() < 1e-7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let i = rng.random_range(0..10_000_000usize);
            assert!(lr_schedule(i + 1, &cfg()) <= lr_schedule(i, &cfg()));
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(mse_loss(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[vec![0.0, 0.0, 0.0]], &[vec![1.0, 0.0, 0.0]]).unwrap(), 1.0);
        let f = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let y = vec![vec![1.0, 0.0], vec![1.0, 2f64.sqrt()]];
        assert!((mse_loss(&f, &y).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(mse_loss(&[], &[]), Err(Error::Empty(_))));
    }

    fn linear_net(params: &[f64]) -> Network {
        let mut net = Network::new(Shape3::flat(2), &[LayerSpec::Dense { outputs: 1 }]).unwrap();
        net.set_flat_params(params).unwrap();
        net
    }

    #[test]
    fn plain_gradient_step_without_momentum_or_decay() {
        let config = TrainConfig { momentum: 0.0, weight_decay: 0.0, ..cfg() };
        let mut net = linear_net(&[1.0, -2.0, 0.5]);
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights = vec![0.4, 0.8];
        g.layers[0].bias = vec![-1.0];
        let mut v = Velocity::zeros_like(&net);
        sgd_step(&mut net, &g, &mut v, &config, 7);
        let lr = lr_schedule(7, &config);
        assert_eq!(net.flat_params(), vec![1.0 - lr * 0.4, -2.0 - lr * 0.8, 0.5 + lr]);
    }

    #[test]
    fn pure_inertia() {
        let config = TrainConfig { weight_decay: 0.0, ..cfg() };
        let mut net = linear_net(&[1.0, 1.0, 1.0]);
        let g = Gradients::zeros_like(&net);
        let mut v = Velocity::zeros_like(&net);
        v.0.layers[0].weights = vec![0.5, -0.5];
        v.0.layers[0].bias = vec![0.25];
        sgd_step(&mut net, &g, &mut v, &config, 0);
        assert_eq!(net.flat_params(), vec![1.0 + 0.9 * 0.5, 1.0 - 0.9 * 0.5, 1.0 + 0.9 * 0.25]);
    }

    #[test]
    fn squared_norm_contracts_by_exact_factor() {
        // f(w) = ||w||², gradient 2w: w_{i+1} = (1 - 2 lr_i) w_i
        let config = TrainConfig { momentum: 0.0, weight_decay: 0.0, lr_base: 0.1, ..cfg() };
        let mut net = linear_net(&[3.0, -4.0, 0.0]);
        let mut v = Velocity::zeros_like(&net);
        for i in 0..20 {
            let w = net.flat_params();
            let mut g = Gradients::zeros_like(&net);
            g.layers[0].weights = vec![2.0 * w[0], 2.0 * w[1]];
            sgd_step(&mut net, &g, &mut v, &config, i);
            let f = 1.0 - 2.0 * lr_schedule(i, &config);
            let after = net.flat_params();
            assert_eq!(after[0], w[0] - lr_schedule(i, &config) * (2.0 * w[0]));
            assert!((after[0] - f * w[0]).abs() < 1e-15 && (after[1] - f * w[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_descent_reaches_quadratic_minimum() {
        // f(w) = (w0 - 1)² + 3 (w1 + 2)², minimizer (1, -2)
        let config = TrainConfig { lr_base: 0.05, weight_decay: 0.0, momentum: 0.5, ..cfg() };
        let mut net = linear_net(&[0.0, 0.0, 0.0]);
        let mut v = Velocity::zeros_like(&net);
        for i in 0..50 {
            let w = net.flat_params();
            let mut g = Gradients::zeros_like(&net);
            g.layers[0].weights = vec![2.0 * (w[0] - 1.0), 6.0 * (w[1] + 2.0)];
            sgd_step(&mut net, &g, &mut v, &config, i);
        }
        let w = net.flat_params();
        assert!((w[0] - 1.0).abs() < 1e-6 && (w[1] + 2.0).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn xavier_statistics_and_determinism() {
        let mut net = Network::new(Shape3::flat(200), &[LayerSpec::Dense { outputs: 100 }]).unwrap();
        xavier_init(&mut net, 42);
        let w = net.layers()[0].params().unwrap().0.to_vec();
        let bound = (6.0f64 / 300.0).sqrt();
        assert!(w.len() >= 10_000);
        assert!(w.iter().all(|v| v.abs() <= bound));
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / 300.0;
        assert!((var - expected).abs() / expected < 0.1, "var {var}");
        assert!(net.layers()[0].params().unwrap().1.iter().all(|&b| b == 0.0));

        let mut again = Network::new(Shape3::flat(200), &[LayerSpec::Dense { outputs: 100 }]).unwrap();
        xavier_init(&mut again, 42);
        assert!(net.flat_params().iter().zip(again.flat_params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    fn toy_regression() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        // y = A x exactly, so the least-squares floor is zero
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = [[0.5, -0.3, 0.2, 0.1], [-0.2, 0.4, 0.0, 0.3]];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..256 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            ys.push(a.iter().map(|row| row.iter().zip(&x).map(|(p, q)| p * q).sum()).collect());
            xs.push(x);
        }
        (xs, ys)
    }

    #[test]
    fn linear_toy_regression_converges() {
        let (xs, ys) = toy_regression();
        let mut net = Network::new(Shape3::flat(4), &[LayerSpec::Dense { outputs: 2 }]).unwrap();
        xavier_init(&mut net, 1);
        let config = TrainConfig { lr_base: 0.1, weight_decay: 0.0, epochs: 60, batch_size: 16, ..cfg() };
        let report = train(&mut net, &xs, &ys, &config).unwrap();
        assert!(*report.epoch_losses.last().unwrap() < 1e-3, "{:?}", report.epoch_losses);
        assert_eq!(report.iterations, 60 * 16);
    }

    #[test]
    fn training_is_deterministic_across_thread_counts() {
        let arch = Architecture {
            input_rows: 12,
            input_cols: 12,
            conv1_channels: 2,
            conv2_channels: 2,
            kernel: 3,
            hidden: 8,
            n_out: 2,
            conv_relu: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Vec<f64>> = (0..70).map(|_| (0..144).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] - x[50], x[100]]).collect();
        let config = TrainConfig { epochs: 3, batch_size: 20, seed: 17, ..cfg() };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut net = arch.build().unwrap();
                xavier_init(&mut net, 3);
                let r = train(&mut net, &xs, &ys, &config).unwrap();
                (net, r)
            })
        };
        let (a, ra) = run(1);
        let (b, rb) = run(4);
        assert_eq!(ra, rb);
        assert!(a.flat_params().iter().zip(b.flat_params()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn divergence_is_reported() {
        let (xs, mut ys) = toy_regression();
        ys[3][0] = f64::INFINITY;
        let mut net = Network::new(Shape3::flat(4), &[LayerSpec::Dense { outputs: 2 }]).unwrap();
        let config = TrainConfig { epochs: 1, ..cfg() };
        match train(&mut net, &xs, &ys, &config) {
            Err(Error::Divergence { epoch: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
