//! Desk-scale low-rank adaptation: a frozen dense map plus trainable rank-r
//! factors, with a toy softmax-classification training loop and a
//! finite-difference gradient check.
//!
//! The adapted map is `W' = W + B·A` with `W` (d_out × d_in) frozen, `A`
//! (r × d_in) and `B` (d_out × r) trainable, so the trainable parameter count
//! is `r · (d_in + d_out)`. Everything here is 64-bit for reliable gradient
//! checks.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A frozen weight matrix with trainable low-rank factors.
#[derive(Debug, Clone)]
pub struct LoraLayer {
    w: Array2<f64>,
    a: Array2<f64>,
    b: Array2<f64>,
    rank: usize,
}

impl LoraLayer {
    /// Wrap a frozen matrix with freshly initialized factors: `A` is a
    /// seeded scaled Gaussian, `B` is zero, so the adapted map starts exactly
    /// at the frozen one.
    pub fn from_frozen(w: Array2<f64>, rank: usize, seed: u64) -> Result<Self> {
        let (d_out, d_in) = w.dim();
        if rank == 0 || rank >= d_out.min(d_in) {
            return Err(Error::InvalidConfig(format!(
                "rank {rank} must satisfy 0 < rank < min({d_out}, {d_in})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d_in as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("positive std dev");
        let a = Array2::from_shape_fn((rank, d_in), |_| normal.sample(&mut rng));
        let b = Array2::zeros((d_out, rank));
        Ok(LoraLayer { w, a, b, rank })
    }

    /// Assemble a layer from explicit factors. Dimensions must conform;
    /// unlike [`LoraLayer::from_frozen`] the rank may degenerate to
    /// `min(d_out, d_in)`, which some identity checks rely on.
    pub fn with_factors(w: Array2<f64>, a: Array2<f64>, b: Array2<f64>) -> Result<Self> {
        let (d_out, d_in) = w.dim();
        let rank = a.nrows();
        if a.ncols() != d_in || b.nrows() != d_out || b.ncols() != rank {
            return Err(Error::InvalidConfig(format!(
                "factor shapes A{:?} / B{:?} do not conform to W ({d_out} x {d_in})",
                a.dim(),
                b.dim()
            )));
        }
        Ok(LoraLayer { w, a, b, rank })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dims(&self) -> (usize, usize) {
        self.w.dim()
    }

    /// The frozen matrix. No training path ever writes to it.
    pub fn frozen(&self) -> ArrayView2<'_, f64> {
        self.w.view()
    }

    pub fn factor_a(&self) -> ArrayView2<'_, f64> {
        self.a.view()
    }

    pub fn factor_b(&self) -> ArrayView2<'_, f64> {
        self.b.view()
    }

    /// Bit pattern of the frozen matrix, for byte-equality assertions.
    pub fn frozen_bits(&self) -> Vec<u64> {
        self.w.iter().map(|v| v.to_bits()).collect()
    }

    /// `(W + B·A) · x`, computed as `W·x + B·(A·x)`.
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let (_, d_in) = self.w.dim();
        if x.len() != d_in {
            return Err(Error::InvalidConfig(format!(
                "input length {} does not match d_in {d_in}",
                x.len()
            )));
        }
        Ok(self.w.dot(&x) + self.b.dot(&self.a.dot(&x)))
    }

    /// The dense effective weight `W + B·A` (e.g. for merging an adapter).
    pub fn merged_weight(&self) -> Array2<f64> {
        &self.w + &self.b.dot(&self.a)
    }
}

/// Trainable parameters of a rank-r adapter over a d_out × d_in map.
pub fn param_count(d_in: usize, d_out: usize, rank: usize) -> usize {
    rank * (d_in + d_out)
}

/// Trainable-to-full parameter ratio, `r·(d_in+d_out) / (d_in·d_out)`.
pub fn param_ratio(d_in: usize, d_out: usize, rank: usize) -> f64 {
    param_count(d_in, d_out, rank) as f64 / (d_in * d_out) as f64
}

/// Which layers of the foundation model a checkpoint's training adapted.
/// Pure experiment metadata, recorded in manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdaptationTarget {
    #[serde(rename = "QKVO")]
    Qkvo,
    #[serde(rename = "ALL_LINEAR")]
    AllLinear,
}

/// Settings for the toy training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub rank: usize,
    /// The declared rank grid the rank must come from.
    pub rank_grid: Vec<usize>,
    pub seed: u64,
}

impl TrainConfig {
    /// The rank grid used by the full-scale experiments.
    pub const DEFAULT_RANK_GRID: [usize; 4] = [8, 16, 32, 64];

    pub fn new(learning_rate: f64, steps: usize, rank: usize) -> Self {
        TrainConfig {
            learning_rate,
            steps,
            rank,
            rank_grid: Self::DEFAULT_RANK_GRID.to_vec(),
            seed: 0,
        }
    }

    pub fn with_rank_grid(mut self, grid: Vec<usize>) -> Self {
        self.rank_grid = grid;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if !self.rank_grid.contains(&self.rank) {
            return Err(Error::InvalidConfig(format!(
                "rank {} is not in the declared grid {:?}",
                self.rank, self.rank_grid
            )));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::new(0.5, 200, 8)
    }
}

/// A labeled sample for the toy classifier.
pub type ToySample = (Array1<f64>, usize);

fn log_sum_exp(z: ArrayView1<'_, f64>) -> f64 {
    let m = z.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean softmax cross-entropy and its gradients with respect to A and B.
/// W receives no gradient; only the factors train.
fn loss_and_grads(
    layer: &LoraLayer,
    dataset: &[ToySample],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (d_out, d_in) = layer.w.dim();
    let mut loss = 0.0;
    let mut grad_a = Array2::<f64>::zeros((layer.rank, d_in));
    let mut grad_b = Array2::<f64>::zeros((d_out, layer.rank));
    for (x, class) in dataset {
        if *class >= d_out {
            return Err(Error::InvalidConfig(format!(
                "class {class} out of range for {d_out} outputs"
            )));
        }
        let z = layer.forward(x.view())?;
        let lse = log_sum_exp(z.view());
        loss += lse - z[*class];

        // g = softmax(z) - onehot(class)
        let mut g = z.mapv(|v| (v - lse).exp());
        g[*class] -= 1.0;

        let ax = layer.a.dot(x);
        for i in 0..d_out {
            for k in 0..layer.rank {
                grad_b[(i, k)] += g[i] * ax[k];
            }
        }
        let bt_g = layer.b.t().dot(&g);
        for k in 0..layer.rank {
            for j in 0..d_in {
                grad_a[(k, j)] += bt_g[k] * x[j];
            }
        }
    }
    let n = dataset.len() as f64;
    loss /= n;
    grad_a.mapv_inplace(|v| v / n);
    grad_b.mapv_inplace(|v| v / n);
    Ok((loss, grad_a, grad_b))
}

/// Full-batch gradient descent on A and B. Returns the loss trajectory: the
/// loss before each step plus the final loss, `steps + 1` entries in all.
/// Aborts on a non-finite loss.
pub fn train_toy(
    layer: &mut LoraLayer,
    dataset: &[ToySample],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if config.rank != layer.rank {
        return Err(Error::InvalidConfig(format!(
            "config rank {} does not match layer rank {}",
            config.rank, layer.rank
        )));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("training set must be non-empty".into()));
    }
    let mut trajectory = Vec::with_capacity(config.steps + 1);
    for step in 0..config.steps {
        let (loss, grad_a, grad_b) = loss_and_grads(layer, dataset)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        trajectory.push(loss);
        layer.a.scaled_add(-config.learning_rate, &grad_a);
        layer.b.scaled_add(-config.learning_rate, &grad_b);
    }
    let (final_loss, _, _) = loss_and_grads(layer, dataset)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: config.steps,
            loss: final_loss,
        });
    }
    trajectory.push(final_loss);
    Ok(trajectory)
}

/// Compare analytic gradients against central finite differences
/// (h = 1e-5) on one sample; returns the maximum relative error over every
/// entry of A and B.
pub fn grad_check(layer: &LoraLayer, sample: &ToySample) -> Result<f64> {
    const H: f64 = 1e-5;
    let dataset = std::slice::from_ref(sample);
    let (_, grad_a, grad_b) = loss_and_grads(layer, dataset)?;

    let mut probe = layer.clone();
    let mut max_rel = 0.0f64;

    let (rank, d_in) = probe.a.dim();
    for k in 0..rank {
        for j in 0..d_in {
            let original = probe.a[(k, j)];
            probe.a[(k, j)] = original + H;
            let (plus, _, _) = loss_and_grads(&probe, dataset)?;
            probe.a[(k, j)] = original - H;
            let (minus, _, _) = loss_and_grads(&probe, dataset)?;
            probe.a[(k, j)] = original;
            let numeric = (plus - minus) / (2.0 * H);
            max_rel = max_rel.max(relative_error(grad_a[(k, j)], numeric));
        }
    }
    let (d_out, rank) = probe.b.dim();
    for i in 0..d_out {
        for k in 0..rank {
            let original = probe.b[(i, k)];
            probe.b[(i, k)] = original + H;
            let (plus, _, _) = loss_and_grads(&probe, dataset)?;
            probe.b[(i, k)] = original - H;
            let (minus, _, _) = loss_and_grads(&probe, dataset)?;
            probe.b[(i, k)] = original;
            let numeric = (plus - minus) / (2.0 * H);
            max_rel = max_rel.max(relative_error(grad_b[(i, k)], numeric));
        }
    }
    Ok(max_rel)
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Analytic gradients on one sample, exposed for the chain-rule edge cases.
pub fn sample_grads(layer: &LoraLayer, sample: &ToySample) -> Result<(Array2<f64>, Array2<f64>)> {
    let (_, grad_a, grad_b) = loss_and_grads(layer, std::slice::from_ref(sample))?;
    Ok((grad_a, grad_b))
}

/// The bundled linearly separable toy problem: three Gaussian clusters in
/// 8 dimensions whose means span a 2-dimensional subspace, 20 points per
/// class.
pub fn toy_dataset(seed: u64) -> Vec<ToySample> {
    const D_IN: usize = 8;
    let means = [
        [3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [-3.0, -3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).expect("positive std dev");
    let mut dataset = Vec::with_capacity(3 * 20);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..20 {
            let x = Array1::from_shape_fn(D_IN, |j| mean[j] + noise.sample(&mut rng));
            dataset.push((x, class));
        }
    }
    dataset
}

/// A small frozen map matching [`toy_dataset`]: 3 x 8, near zero so the
/// adapter does the classifying, rank 2.
pub fn toy_layer(seed: u64) -> LoraLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let small = Normal::new(0.0, 0.01).expect("positive std dev");
    let w = Array2::from_shape_fn((3, 8), |_| small.sample(&mut rng));
    LoraLayer::from_frozen(w, 2, seed).expect("rank 2 < min(3, 8)")
}

/// The [`TrainConfig`] the bundled toy problem is verified under.
pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig::new(0.5, 200, 2)
        .with_rank_grid(vec![2])
        .with_seed(seed)
}

/// Emit a loss trajectory as `step,loss` CSV.
pub fn write_loss_csv(trajectory: &[f64], mut sink: impl Write) -> std::io::Result<()> {
    writeln!(sink, "step,loss")?;
    for (step, loss) in trajectory.iter().enumerate() {
        writeln!(sink, "{step},{loss}")?;
    }
    Ok(())
}

/// Emit grad-check results as `case,max_rel_error` CSV.
pub fn write_grad_check_csv(rows: &[(String, f64)], mut sink: impl Write) -> std::io::Result<()> {
    writeln!(sink, "case,max_rel_error")?;
    for (case, err) in rows {
        writeln!(sink, "{case},{err}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_b_means_forward_is_the_frozen_map() {
        let w = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let layer = LoraLayer::from_frozen(w.clone(), 1, 3).unwrap();
        for x in [array![1.0, 0.0, -1.0], array![0.5, 2.0, 7.0]] {
            let out = layer.forward(x.view()).unwrap();
            let dense = w.dot(&x);
            assert!(out
                .iter()
                .zip(dense.iter())
                .all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn identity_factors_on_zero_w_give_identity() {
        // Degenerate r = d case, allowed by with_factors only.
        let eye = Array2::eye(3);
        let layer = LoraLayer::with_factors(Array2::zeros((3, 3)), eye.clone(), eye).unwrap();
        let x = array![1.5, -2.0, 0.25];
        let out = layer.forward(x.view()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn forward_matches_hand_multiplied_dense_route() {
        // W (4x3), A (2x3), B (4x2), x (3): expected values multiplied out
        // by hand from (W + B·A)·x.
        let w = array![
            [1.0, 0.0, 2.0],
            [0.0, 1.0, -1.0],
            [3.0, 1.0, 0.0],
            [-1.0, 2.0, 1.0],
        ];
        let a = array![[1.0, 1.0, 0.0], [0.0, -1.0, 2.0]];
        let b = array![[1.0, 0.0], [0.0, 1.0], [2.0, -1.0], [1.0, 1.0]];
        let x = array![2.0, -1.0, 3.0];
        // A·x = (1, 7); B·(A·x) = (1, 7, -5, 8); W·x = (8, -4, 5, -1).
        let layer = LoraLayer::with_factors(w, a, b).unwrap();
        let out = layer.forward(x.view()).unwrap();
        let expected = array![9.0, 3.0, 0.0, 7.0];
        for (o, e) in out.iter().zip(expected.iter()) {
            assert!((o - e).abs() < 1e-12, "{out:?} vs {expected:?}");
        }
    }

    #[test]
    fn two_routes_agree_on_random_layers() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let w = Array2::from_shape_fn((5, 7), |_| normal.sample(&mut rng));
            let a = Array2::from_shape_fn((3, 7), |_| normal.sample(&mut rng));
            let b = Array2::from_shape_fn((5, 3), |_| normal.sample(&mut rng));
            let x = Array1::from_shape_fn(7, |_| normal.sample(&mut rng));
            let layer = LoraLayer::with_factors(w, a, b).unwrap();
            let fast = layer.forward(x.view()).unwrap();
            let dense = layer.merged_weight().dot(&x);
            for (f, d) in fast.iter().zip(dense.iter()) {
                assert!((f - d).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_is_linear() {
        let layer = toy_layer(11);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..20 {
            let x = Array1::from_shape_fn(8, |_| normal.sample(&mut rng));
            let y = Array1::from_shape_fn(8, |_| normal.sample(&mut rng));
            let sum = layer.forward((&x + &y).view()).unwrap();
            let parts = layer.forward(x.view()).unwrap() + layer.forward(y.view()).unwrap();
            for (s, p) in sum.iter().zip(parts.iter()) {
                assert!((s - p).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let layer = toy_layer(0);
        assert!(layer.forward(array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn from_frozen_enforces_the_rank_bound() {
        assert!(LoraLayer::from_frozen(Array2::zeros((3, 8)), 3, 0).is_err());
        assert!(LoraLayer::from_frozen(Array2::zeros((3, 8)), 0, 0).is_err());
        assert!(LoraLayer::from_frozen(Array2::zeros((3, 8)), 2, 0).is_ok());
    }

    #[test]
    fn param_count_arithmetic() {
        assert_eq!(param_count(3, 4, 2), 14);
        assert_eq!(param_count(4096, 4096, 8), 65_536);
        assert_eq!(4096 * 4096, 16_777_216);
        assert!((param_ratio(4096, 4096, 8) - 1.0 / 256.0).abs() < 1e-15);
        // r = d doubles the parameters instead of saving any.
        let d = 64;
        assert_eq!(param_count(d, d, d), 2 * d * d);
        assert!(param_count(d, d, d) >= d * d);
    }

    #[test]
    fn adapter_saves_parameters_below_the_rank_threshold() {
        // r < d_in*d_out / (d_in + d_out) implies fewer trainable parameters
        // than the dense map.
        for (d_in, d_out) in [(3, 4), (8, 3), (16, 16), (4096, 4096), (100, 7)] {
            let threshold = (d_in * d_out) as f64 / (d_in + d_out) as f64;
            for rank in 1..=(2 * d_in.min(d_out)) {
                if (rank as f64) < threshold {
                    assert!(
                        param_count(d_in, d_out, rank) < d_in * d_out,
                        "({d_in}, {d_out}, {rank})"
                    );
                }
            }
        }
    }

    #[test]
    fn training_halves_the_loss_and_freezes_w() {
        let mut layer = toy_layer(5);
        let before = layer.frozen_bits();
        let dataset = toy_dataset(5);
        let trajectory = train_toy(&mut layer, &dataset, &toy_train_config(5)).unwrap();
        assert_eq!(trajectory.len(), 201);
        let initial = trajectory[0];
        let final_loss = *trajectory.last().unwrap();
        assert!(
            final_loss < 0.5 * initial,
            "final {final_loss} vs initial {initial}"
        );
        assert_eq!(layer.frozen_bits(), before, "W must stay bitwise frozen");
    }

    #[test]
    fn zero_learning_rate_keeps_the_trajectory_constant() {
        let mut layer = toy_layer(5);
        let dataset = toy_dataset(5);
        let mut config = toy_train_config(5);
        config.learning_rate = 0.0;
        config.steps = 10;
        let trajectory = train_toy(&mut layer, &dataset, &config).unwrap();
        assert!(trajectory.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let dataset = toy_dataset(7);
        let run = || {
            let mut layer = toy_layer(7);
            train_toy(&mut layer, &dataset, &toy_train_config(7)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn diverging_training_aborts_with_a_diagnostic() {
        let mut layer = toy_layer(3);
        let dataset = toy_dataset(3);
        let mut config = toy_train_config(3);
        config.learning_rate = 1e12;
        let err = train_toy(&mut layer, &dataset, &config);
        assert!(
            matches!(err, Err(Error::NonFiniteLoss { .. })),
            "expected divergence, got {err:?}"
        );
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::new(0.5, 200, 8).validate().is_ok());
        assert!(TrainConfig::new(0.5, 200, 5).validate().is_err());
        assert!(TrainConfig::new(-1.0, 200, 8).validate().is_err());
        assert!(TrainConfig::new(0.5, 0, 8).validate().is_err());
        assert!(TrainConfig::new(0.5, 200, 2)
            .with_rank_grid(vec![2])
            .validate()
            .is_ok());
    }

    fn random_small_layer(seed: u64) -> LoraLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let w = Array2::from_shape_fn((4, 6), |_| normal.sample(&mut rng));
        let a = Array2::from_shape_fn((2, 6), |_| normal.sample(&mut rng));
        let b = Array2::from_shape_fn((4, 2), |_| normal.sample(&mut rng));
        LoraLayer::with_factors(w, a, b).unwrap()
    }

    #[test]
    fn grad_check_is_tight_on_random_layers() {
        for seed in 0..5 {
            let layer = random_small_layer(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let x = Array1::from_shape_fn(6, |_| normal.sample(&mut rng));
            let sample = (x, (seed % 4) as usize);
            let err = grad_check(&layer, &sample).unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn zero_input_zeroes_the_factor_gradients() {
        let layer = random_small_layer(42);
        let sample = (Array1::zeros(6), 1);
        let (grad_a, grad_b) = sample_grads(&layer, &sample).unwrap();
        assert!(grad_a.iter().all(|&v| v == 0.0));
        assert!(grad_b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_sample_gives_identical_gradients() {
        let layer = random_small_layer(9);
        let sample = (Array1::from_elem(6, 0.3), 2);
        let (a1, b1) = sample_grads(&layer, &sample).unwrap();
        let (a2, b2) = sample_grads(&layer, &sample).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn csv_emitters_produce_one_row_per_entry() {
        let mut loss_csv = Vec::new();
        write_loss_csv(&[1.0, 0.5, 0.25], &mut loss_csv).unwrap();
        let text = String::from_utf8(loss_csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("step,loss\n0,1\n"));

        let mut grad_csv = Vec::new();
        write_grad_check_csv(&[("seed-0".into(), 1e-9)], &mut grad_csv).unwrap();
        assert_eq!(String::from_utf8(grad_csv).unwrap().lines().count(), 2);
    }
}
