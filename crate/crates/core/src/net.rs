//! Width-`m` two-layer ReLU network `f(x; W) = (1/m) sum_j b_j relu(W_j . x)`.
//!
//! The same type parameterizes the soft Q-function and the reward. Output
//! signs `b` and the initialization snapshot `W_0` are frozen at
//! construction; only `W` moves. Weights are stored row-major per hidden
//! unit and treated as one flat `m * d` vector for norms and projection.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{FeatureMap, Trajectory};
use crate::error::{Error, Result};
use crate::parallel;

pub const NET_SCHEMA: &str = "net/v1";
const UNIT_TOL: f64 = 1e-9;
const BINARY_MAGIC: &[u8; 4] = b"NET1";

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Scalar function of a unit input, parameterized by an `m x d` weight matrix,
/// whose weight-gradient has the ReLU block form `(b_j / m) 1{A_j . x > 0} x`
/// for some activation matrix `A`.
pub trait NetFunction: Sync {
    fn value(&self, x: ArrayView1<'_, f64>) -> f64;

    fn signs(&self) -> &[f64];

    fn weights(&self) -> &Array2<f64>;

    /// Matrix whose rows decide which units are active at `x`.
    fn activation_weights(&self) -> &Array2<f64>;

    /// Initialization `W_0`, the anchor of the linearized class.
    fn anchor_weights(&self) -> &Array2<f64>;

    fn with_weights(&self, weights: Array2<f64>) -> Self
    where
        Self: Sized;

    fn width(&self) -> usize {
        self.weights().nrows()
    }

    fn dim(&self) -> usize {
        self.weights().ncols()
    }

    /// `out += scale * grad_W f(x)`.
    fn accumulate_gradient(&self, x: ArrayView1<'_, f64>, scale: f64, out: &mut Array2<f64>) {
        let m = self.width() as f64;
        let pre = self.activation_weights().dot(&x);
        for ((&p, mut target), &b) in pre.iter().zip(out.outer_iter_mut()).zip(self.signs()) {
            // indicator is 0 at exactly 0
            if p > 0.0 {
                target.scaled_add(scale * b / m, &x);
            }
        }
    }

    fn gradient(&self, x: ArrayView1<'_, f64>) -> Array2<f64> {
        let mut g = Array2::zeros(self.weights().raw_dim());
        self.accumulate_gradient(x, 1.0, &mut g);
        g
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    signs: Vec<f64>,
    init_weights: Array2<f64>,
    weights: Array2<f64>,
    radius: f64,
}

impl TwoLayerNet {
    /// Rademacher signs, rows of `W_0` i.i.d. `N(0, I_d / d)`, `W = W_0`.
    pub fn init(width: usize, dim: usize, radius: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("network width must be at least 1".into()));
        }
        if dim <= 2 {
            return Err(Error::Config(format!("input dimension {dim} must exceed 2")));
        }
        if !(radius > 0.0) {
            return Err(Error::Config(format!("ball radius {radius} must be positive")));
        }
        let signs: Vec<f64> = (0..width)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let normal = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid std");
        let init = Array2::from_shape_simple_fn((width, dim), || normal.sample(rng));
        Ok(Self {
            signs,
            weights: init.clone(),
            init_weights: init,
            radius,
        })
    }

    /// Assemble a network from explicit parts (checkpoints, hand-built tests).
    pub fn from_parts(signs: Vec<f64>, init_weights: Array2<f64>, weights: Array2<f64>, radius: f64) -> Result<Self> {
        if signs.len() != init_weights.nrows() || init_weights.dim() != weights.dim() {
            return Err(Error::Format("network part shapes disagree".into()));
        }
        if signs.iter().any(|&b| b != 1.0 && b != -1.0) {
            return Err(Error::Format("output signs must be +1 or -1".into()));
        }
        if !(radius > 0.0) {
            return Err(Error::Format(format!("ball radius {radius} must be positive")));
        }
        Ok(Self {
            signs,
            init_weights,
            weights,
            radius,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn init_weights(&self) -> &Array2<f64> {
        &self.init_weights
    }

    /// Replace `W` without any constraint (reward updates).
    pub fn set_weights(&mut self, weights: Array2<f64>) {
        assert_eq!(weights.dim(), self.weights.dim(), "weight shape mismatch");
        self.weights = weights;
    }

    /// Replace `W` by its projection onto the ball `S_B` (soft Q updates).
    pub fn set_weights_projected(&mut self, candidate: Array2<f64>) {
        self.weights = self.project_ball(candidate);
    }

    /// `||W - W_0||_2` over the flattened matrix.
    pub fn distance_from_init(&self) -> f64 {
        flat_distance(&self.weights, &self.init_weights)
    }

    fn check_input(&self, x: ArrayView1<'_, f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Contract(format!(
                "input has length {}, expected {}",
                x.len(),
                self.dim()
            )));
        }
        let norm = x.dot(&x).sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Contract(format!("input norm {norm} is not 1")));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.value(x))
    }

    pub fn grad_weights(&self, x: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(self.gradient(x))
    }

    /// `Phi(x)^T W` with indicators frozen at `W_0`.
    pub fn linearized_forward(&self, x: ArrayView1<'_, f64>) -> f64 {
        let anchor = self.init_weights.dot(&x);
        let pre = self.weights.dot(&x);
        let mut acc = 0.0;
        for ((&a, &p), &b) in anchor.iter().zip(&pre).zip(&self.signs) {
            if a > 0.0 {
                acc += b * p;
            }
        }
        acc / self.width() as f64
    }

    /// Euclidean projection of `candidate` onto `{W : ||W - W_0||_2 <= B}`.
    pub fn project_ball(&self, mut candidate: Array2<f64>) -> Array2<f64> {
        let dist = flat_distance(&candidate, &self.init_weights);
        if dist > self.radius {
            let scale = self.radius / dist;
            Zip::from(&mut candidate)
                .and(&self.init_weights)
                .for_each(|c, &w0| *c = w0 + scale * (*c - w0));
        }
        candidate
    }

    pub fn linearized(&self) -> LinearizedNet {
        LinearizedNet { net: self.clone() }
    }

    pub fn to_document(&self) -> NetDocument {
        NetDocument {
            schema: NET_SCHEMA.to_string(),
            width: self.width(),
            dim: self.dim(),
            radius: self.radius,
            signs: self.signs.iter().map(|&b| b as i8).collect(),
            init_weights: self.init_weights.outer_iter().map(|r| r.to_vec()).collect(),
            weights: self.weights.outer_iter().map(|r| r.to_vec()).collect(),
        }
    }

    /// Little-endian binary checkpoint: magic, `m`, `d` (u64), `B`, signs (i8),
    /// `W_0` and `W` as row-major f64.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&(self.width() as u64).to_le_bytes())?;
        out.write_all(&(self.dim() as u64).to_le_bytes())?;
        out.write_all(&self.radius.to_le_bytes())?;
        for &b in &self.signs {
            out.write_all(&(b as i8).to_le_bytes())?;
        }
        for v in self.init_weights.iter().chain(self.weights.iter()) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Format("not a net/v1 binary checkpoint".into()));
        }
        let mut word = [0u8; 8];
        let mut next_u64 = |input: &mut R| -> Result<u64> {
            input.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let width = next_u64(&mut input)? as usize;
        let dim = next_u64(&mut input)? as usize;
        let radius = f64::from_bits(next_u64(&mut input)?);
        let mut signs = vec![0u8; width];
        input.read_exact(&mut signs)?;
        let signs = signs.into_iter().map(|b| b as i8 as f64).collect();
        let mut read_matrix = |input: &mut R| -> Result<Array2<f64>> {
            let mut data = vec![0.0; width * dim];
            for v in data.iter_mut() {
                *v = f64::from_bits(next_u64(input)?);
            }
            Ok(Array2::from_shape_vec((width, dim), data).expect("sized buffer"))
        };
        let init = read_matrix(&mut input)?;
        let weights = read_matrix(&mut input)?;
        Self::from_parts(signs, init, weights, radius)
    }
}

impl NetFunction for TwoLayerNet {
    fn value(&self, x: ArrayView1<'_, f64>) -> f64 {
        let pre = self.weights.dot(&x);
        let acc: f64 = pre.iter().zip(&self.signs).map(|(&p, &b)| b * relu(p)).sum();
        acc / self.width() as f64
    }

    fn signs(&self) -> &[f64] {
        &self.signs
    }

    fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    fn activation_weights(&self) -> &Array2<f64> {
        &self.weights
    }

    fn anchor_weights(&self) -> &Array2<f64> {
        &self.init_weights
    }

    fn with_weights(&self, weights: Array2<f64>) -> Self {
        let mut out = self.clone();
        out.set_weights(weights);
        out
    }
}

/// First-order expansion of a [`TwoLayerNet`] at its initialization:
/// `f_0(x; W) = Phi(x)^T W`, exactly linear in `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedNet {
    net: TwoLayerNet,
}

impl LinearizedNet {
    pub fn anchor(&self) -> &TwoLayerNet {
        &self.net
    }

    /// Anchored feature vector `Phi(x)` as an `m x d` matrix.
    pub fn features(&self, x: ArrayView1<'_, f64>) -> Array2<f64> {
        self.gradient(x)
    }
}

impl NetFunction for LinearizedNet {
    fn value(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.net.linearized_forward(x)
    }

    fn signs(&self) -> &[f64] {
        &self.net.signs
    }

    fn weights(&self) -> &Array2<f64> {
        &self.net.weights
    }

    fn activation_weights(&self) -> &Array2<f64> {
        &self.net.init_weights
    }

    fn anchor_weights(&self) -> &Array2<f64> {
        &self.net.init_weights
    }

    fn with_weights(&self, weights: Array2<f64>) -> Self {
        Self {
            net: self.net.with_weights(weights),
        }
    }
}

pub fn flat_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a)
        .and(b)
        .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
        .sqrt()
}

pub fn flat_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rows per block in batched evaluation. Fixed so that the sequential and
/// parallel paths perform identical floating-point operations.
const ROW_BLOCK: usize = 64;
/// Hidden units per block in batched gradient sums.
const UNIT_BLOCK: usize = 64;

/// Values for rows `[blk * ROW_BLOCK, (blk + 1) * ROW_BLOCK)` of `inputs`.
/// Exposed so benchmarks can drive the same kernel through either executor.
pub fn value_block<N: NetFunction>(net: &N, inputs: ArrayView2<'_, f64>, blk: usize) -> Vec<f64> {
    let n = inputs.nrows();
    let m = net.width() as f64;
    let rows = inputs.slice(s![blk * ROW_BLOCK..((blk + 1) * ROW_BLOCK).min(n), ..]);
    let pre = rows.dot(&net.weights().t());
    let shared = std::ptr::eq(net.weights(), net.activation_weights());
    let act = (!shared).then(|| rows.dot(&net.activation_weights().t()));
    let act = act.as_ref().unwrap_or(&pre);
    pre.outer_iter()
        .zip(act.outer_iter())
        .map(|(p, a)| {
            let total: f64 = p
                .iter()
                .zip(a.iter())
                .zip(net.signs())
                .map(|((&p, &a), &b)| if a > 0.0 { b * p } else { 0.0 })
                .sum();
            total / m
        })
        .collect()
}

/// Number of row blocks `value_block` splits `n` inputs into.
pub fn value_block_count(n: usize) -> usize {
    n.div_ceil(ROW_BLOCK)
}

/// `f(x_i)` for every row `x_i` of `inputs`.
pub fn batch_values<N: NetFunction>(net: &N, inputs: ArrayView2<'_, f64>) -> Array1<f64> {
    let blocks = parallel::map_indexed(value_block_count(inputs.nrows()), |blk| value_block(net, inputs, blk));
    Array1::from_iter(blocks.into_iter().flatten())
}

/// Chunk length, in flat `f64` entries, used by `gradient_block`.
pub fn gradient_chunk_len(dim: usize) -> usize {
    UNIT_BLOCK * dim
}

/// Writes rows `[blk * UNIT_BLOCK, ..)` of `sum_i c_i grad_W f(x_i)` into `chunk`.
pub fn gradient_block<N: NetFunction>(
    net: &N,
    inputs: ArrayView2<'_, f64>,
    coeffs: &[f64],
    blk: usize,
    chunk: &mut [f64],
) {
    let (m, d) = (net.width(), net.dim());
    let j0 = blk * UNIT_BLOCK;
    let j1 = j0 + chunk.len() / d;
    let signs = &net.signs()[j0..j1];
    let mut mask = inputs.dot(&net.activation_weights().slice(s![j0..j1, ..]).t());
    for (mut row, &c) in mask.outer_iter_mut().zip(coeffs) {
        for (v, &b) in row.iter_mut().zip(signs) {
            *v = if *v > 0.0 { c * b / m as f64 } else { 0.0 };
        }
    }
    let block = mask.t().dot(&inputs);
    chunk.copy_from_slice(block.as_slice().expect("fresh product is contiguous"));
}

/// `sum_i c_i grad_W f(x_i)` over the rows of `inputs`, blocked over hidden units.
pub fn batch_gradient_sum<N: NetFunction>(net: &N, inputs: ArrayView2<'_, f64>, coeffs: &[f64]) -> Array2<f64> {
    assert_eq!(inputs.nrows(), coeffs.len(), "one coefficient per input row");
    let mut out = Array2::<f64>::zeros(net.weights().raw_dim());
    let slice = out.as_slice_mut().expect("standard layout");
    parallel::for_each_chunk_mut(slice, gradient_chunk_len(net.dim()), |blk, chunk| {
        gradient_block(net, inputs, coeffs, blk, chunk)
    });
    out
}

/// `f(psi(s, a))` for every pair, as an `(n_states, n_actions)` table.
pub fn value_table<N: NetFunction>(net: &N, features: &FeatureMap) -> Array2<f64> {
    batch_values(net, features.table().view())
        .into_shape_with_order((features.n_states(), features.n_actions()))
        .expect("pair count")
}

/// `sum_{(s,a)} weight(s, a) grad_W f(psi(s, a))`.
pub fn weighted_gradient_sum<N: NetFunction>(net: &N, features: &FeatureMap, weight: &Array2<f64>) -> Array2<f64> {
    let coeffs: Vec<f64> = weight.iter().copied().collect();
    batch_gradient_sum(net, features.table().view(), &coeffs)
}

/// `h(W; tau) = sum_{t < H} gamma^t grad_W f(psi(s_t, a_t))`.
pub fn discounted_feature_sum<N: NetFunction>(
    net: &N,
    trajectory: &Trajectory,
    discount: f64,
    features: &FeatureMap,
) -> Result<Array2<f64>> {
    if trajectory.is_empty() {
        return Err(Error::Contract("empty trajectory".into()));
    }
    let rows: Vec<usize> = trajectory.steps().map(|(s, a)| features.index(s, a)).collect();
    let inputs = features.table().select(Axis(0), &rows);
    let coeffs: Vec<f64> = std::iter::successors(Some(1.0), |w| Some(w * discount))
        .take(rows.len())
        .collect();
    Ok(batch_gradient_sum(net, inputs.view(), &coeffs))
}

/// `net/v1` JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetDocument {
    pub schema: String,
    pub width: usize,
    pub dim: usize,
    pub radius: f64,
    pub signs: Vec<i8>,
    pub init_weights: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl NetDocument {
    pub fn into_net(self) -> Result<TwoLayerNet> {
        if self.schema != NET_SCHEMA {
            return Err(Error::Format(format!("unsupported schema {:?}", self.schema)));
        }
        let shape = (self.width, self.dim);
        let to_matrix = |rows: Vec<Vec<f64>>, what: &str| {
            Array2::from_shape_vec(shape, rows.into_iter().flatten().collect())
                .map_err(|e| Error::Format(format!("{what}: {e}")))
        };
        let init = to_matrix(self.init_weights, "init_weights")?;
        let weights = to_matrix(self.weights, "weights")?;
        TwoLayerNet::from_parts(
            self.signs.into_iter().map(f64::from).collect(),
            init,
            weights,
            self.radius,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::random_unit_vector;
    use crate::rng::rng_from_seed;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn net(m: usize, d: usize, seed: u64) -> TwoLayerNet {
        TwoLayerNet::init(m, d, 1.0, &mut rng_from_seed(seed)).unwrap()
    }

    /// Straightforward re-implementation of the forward pass.
    fn reference_forward(net: &TwoLayerNet, x: &Array1<f64>) -> f64 {
        let mut total = 0.0;
        for j in 0..net.width() {
            let mut pre = 0.0;
            for k in 0..net.dim() {
                pre += net.weights()[[j, k]] * x[k];
            }
            total += net.signs()[j] * pre.max(0.0);
        }
        total / net.width() as f64
    }

    #[test]
    fn init_is_seeded_and_starts_at_anchor() {
        let a = net(4, 4, 3);
        assert_eq!(a, net(4, 4, 3));
        assert_eq!(a.weights(), a.init_weights());
        assert_eq!(a.distance_from_init(), 0.0);
        assert!(a.signs().iter().all(|&b| b == 1.0 || b == -1.0));
    }

    #[test]
    fn init_row_norms_have_unit_mean() {
        let n = net(10_000, 16, 1);
        let mean = n.init_weights().outer_iter().map(|r| r.dot(&r)).sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn init_rejects_bad_config() {
        let mut rng = rng_from_seed(0);
        assert!(TwoLayerNet::init(0, 4, 1.0, &mut rng).is_err());
        assert!(TwoLayerNet::init(4, 2, 1.0, &mut rng).is_err());
        assert!(TwoLayerNet::init(4, 4, 0.0, &mut rng).is_err());
    }

    #[test]
    fn forward_closed_forms() {
        let x = array![0.6, 0.8, 0.0];
        let row = array![[0.3, -0.2, 0.9]];
        let init = ndarray::concatenate![ndarray::Axis(0), row, row];
        let cancel = TwoLayerNet::from_parts(vec![1.0, -1.0], init.clone(), init, 1.0).unwrap();
        assert_eq!(cancel.forward(x.view()).unwrap(), 0.0);

        let aligned = array![[0.6, 0.8, 0.0]];
        let one = TwoLayerNet::from_parts(vec![1.0], aligned.clone(), aligned, 1.0).unwrap();
        assert!((one.forward(x.view()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_reference() {
        let n = net(64, 8, 5);
        let mut rng = rng_from_seed(6);
        for _ in 0..20 {
            let x = random_unit_vector(8, &mut rng);
            assert!((n.forward(x.view()).unwrap() - reference_forward(&n, &x)).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_rejects_non_unit_input() {
        let n = net(4, 4, 0);
        assert!(matches!(
            n.forward(array![1.0, 1.0, 0.0, 0.0].view()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradient_vanishes_when_all_units_inactive() {
        let x = array![1.0, 0.0, 0.0];
        let init = array![[-1.0, 0.2, 0.0], [-0.5, 0.0, 1.0]];
        let n = TwoLayerNet::from_parts(vec![1.0, -1.0], init.clone(), init, 1.0).unwrap();
        assert!(n.grad_weights(x.view()).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let n = net(32, 6, 7);
        let mut rng = rng_from_seed(8);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 20 {
            let x = random_unit_vector(6, &mut rng);
            // skip inputs near an activation flip
            if n.weights().outer_iter().any(|w| w.dot(&x).abs() < 1e-3) {
                continue;
            }
            let v = Array2::from_shape_simple_fn((32, 6), || rng.random_range(-1.0..1.0));
            let plus = n.with_weights(n.weights() + &(&v * h)).value(x.view());
            let minus = n.with_weights(n.weights() - &(&v * h)).value(x.view());
            let fd = (plus - minus) / (2.0 * h);
            let analytic: f64 = (n.gradient(x.view()) * &v).sum();
            assert!((fd - analytic).abs() < 1e-5, "{fd} vs {analytic}");
            checked += 1;
        }
    }

    #[test]
    fn linearization_agrees_at_anchor() {
        let n = net(16, 5, 2);
        let mut rng = rng_from_seed(3);
        for _ in 0..10 {
            let x = random_unit_vector(5, &mut rng);
            assert_eq!(n.linearized_forward(x.view()), n.linearized().value(x.view()));
            assert!((n.linearized_forward(x.view()) - n.value(x.view())).abs() < 1e-15);
        }
    }

    #[test]
    fn linearization_is_linear_in_weights() {
        let n = net(16, 5, 2);
        let lin = n.linearized();
        let mut rng = rng_from_seed(4);
        let x = random_unit_vector(5, &mut rng);
        let w1 = Array2::from_shape_simple_fn((16, 5), || rng.random_range(-1.0..1.0));
        let w2 = Array2::from_shape_simple_fn((16, 5), || rng.random_range(-1.0..1.0));
        let sum = lin.with_weights(&w1 + &w2).value(x.view());
        let parts = lin.with_weights(w1).value(x.view()) + lin.with_weights(w2).value(x.view());
        assert!((sum - parts).abs() < 1e-13);
        // gradient of the linearization does not depend on W
        let g1 = lin.gradient(x.view());
        let g2 = lin.with_weights(Array2::zeros((16, 5))).gradient(x.view());
        assert_eq!(g1, g2);
    }

    #[test]
    fn linearization_error_small_in_wide_regime() {
        let mut rng = rng_from_seed(10);
        let mut n = TwoLayerNet::init(4096, 8, 0.01, &mut rng).unwrap();
        let dir = Array2::from_shape_simple_fn((4096, 8), || rng.random_range(-1.0..1.0));
        n.set_weights_projected(n.init_weights() + &(dir * 10.0));
        assert!((n.distance_from_init() - 0.01).abs() < 1e-12);
        let mut total = 0.0;
        for _ in 0..100 {
            let x = random_unit_vector(8, &mut rng);
            total += (n.value(x.view()) - n.linearized_forward(x.view())).abs();
        }
        assert!(total / 100.0 <= 1e-2);
    }

    #[test]
    fn projection_cases() {
        let n = net(8, 4, 9);
        let mut rng = rng_from_seed(1);
        let u = Array2::from_shape_simple_fn((8, 4), || rng.random_range(-1.0..1.0));
        let u = &u / flat_norm(&u);
        let inside = n.init_weights() + &(&u * 0.5);
        assert_eq!(n.project_ball(inside.clone()), inside);
        let outside = n.init_weights() + &(&u * 2.0);
        let projected = n.project_ball(outside);
        let expect = n.init_weights() + &u;
        assert!(flat_distance(&projected, &expect) < 1e-12);
    }

    #[test]
    fn parameter_lipschitz_and_gradient_bound() {
        let mut rng = rng_from_seed(12);
        for trial in 0..200 {
            let m = 1 + trial % 50;
            let n = net(m, 5, trial as u64);
            let x = random_unit_vector(5, &mut rng);
            let w2 = n.weights() + &Array2::from_shape_simple_fn((m, 5), || rng.random_range(-2.0..2.0));
            let other = n.with_weights(w2);
            let lhs = (n.value(x.view()) - other.value(x.view())).abs();
            let rhs = flat_distance(n.weights(), other.weights()) / (m as f64).sqrt();
            assert!(lhs <= rhs + 1e-12);
            assert!(flat_norm(&other.gradient(x.view())) <= 1.0 / (m as f64).sqrt() + 1e-12);
        }
    }

    #[test]
    fn feature_sum_cases() {
        let mut rng = rng_from_seed(2);
        let psi = FeatureMap::random_unit(4, 2, 6, &mut rng).unwrap();
        let n = net(16, 6, 1);
        let gamma = 0.9;
        let single = Trajectory::new(vec![1], vec![0]).unwrap();
        let h = discounted_feature_sum(&n, &single, gamma, &psi).unwrap();
        assert_eq!(h, n.gradient(psi.get(1, 0)));

        let horizon = 50;
        let repeat = Trajectory::new(vec![0; horizon], vec![1; horizon]).unwrap();
        let h = discounted_feature_sum(&n, &repeat, gamma, &psi).unwrap();
        let expect = n.gradient(psi.get(0, 1)) * ((1.0 - gamma.powi(horizon as i32)) / (1.0 - gamma));
        assert!(flat_distance(&h, &expect) < 1e-12);
        let bound = 1.0 / ((16f64).sqrt() * (1.0 - gamma));
        assert!(flat_norm(&h) <= bound);
        assert!(discounted_feature_sum(&n, &Trajectory::default(), gamma, &psi).is_err());
    }

    #[test]
    fn weighted_sum_matches_pairwise_accumulation() {
        let mut rng = rng_from_seed(5);
        let psi = FeatureMap::random_unit(12, 3, 6, &mut rng).unwrap();
        let n = net(40, 6, 4);
        let weight = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let fast = weighted_gradient_sum(&n, &psi, &weight);
        let mut slow = Array2::zeros((40, 6));
        for s in 0..4 {
            for a in 0..3 {
                n.accumulate_gradient(psi.get(s, a), weight[[s, a]], &mut slow);
            }
        }
        assert!(flat_distance(&fast, &slow) < 1e-14);
    }

    #[test]
    fn batched_kernels_match_per_input_evaluation_across_blocks() {
        let mut rng = rng_from_seed(8);
        let psi = FeatureMap::random_unit(150, 3, 6, &mut rng).unwrap();
        let mut n = net(150, 6, 3);
        let shift = Array2::from_shape_simple_fn((150, 6), || rng.random_range(-0.5..0.5));
        n.set_weights(n.init_weights() + &shift);
        let lin = n.linearized();
        let coeffs: Vec<f64> = (0..psi.n_pairs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let inputs = psi.table().view();

        let values = batch_values(&n, inputs);
        let lin_values = batch_values(&lin, inputs);
        let mut grad = Array2::zeros((150, 6));
        let mut lin_grad = Array2::zeros((150, 6));
        for (i, x) in inputs.outer_iter().enumerate() {
            assert!((values[i] - n.value(x)).abs() < 1e-14);
            assert!((lin_values[i] - n.linearized_forward(x)).abs() < 1e-14);
            n.accumulate_gradient(x, coeffs[i], &mut grad);
            lin.accumulate_gradient(x, coeffs[i], &mut lin_grad);
        }
        assert!(flat_distance(&batch_gradient_sum(&n, inputs, &coeffs), &grad) < 1e-13);
        assert!(flat_distance(&batch_gradient_sum(&lin, inputs, &coeffs), &lin_grad) < 1e-13);
    }

    #[test]
    fn json_and_binary_checkpoints_are_bit_exact() {
        let mut n = net(7, 5, 77);
        let mut rng = rng_from_seed(1);
        n.set_weights(n.weights() + &Array2::from_shape_simple_fn((7, 5), || rng.random_range(-1.0..1.0)));
        let text = serde_json::to_string(&n.to_document()).unwrap();
        let back: NetDocument = serde_json::from_str(&text).unwrap();
        let back = back.into_net().unwrap();
        let bits = |a: &Array2<f64>| a.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.weights()), bits(n.weights()));
        assert_eq!(back, n);

        let mut buf = Vec::new();
        n.write_binary(&mut buf).unwrap();
        assert_eq!(TwoLayerNet::read_binary(&buf[..]).unwrap(), n);
        assert!(TwoLayerNet::read_binary(&b"NOPE"[..]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn projection_is_idempotent_and_nonexpansive(seed in 0u64..10_000, scale in 0.1f64..10.0) {
            let n = net(6, 4, seed);
            let mut rng = rng_from_seed(seed ^ 0xABCD);
            let x = n.init_weights() + &Array2::from_shape_simple_fn((6, 4), || scale * rng.random_range(-1.0..1.0));
            let y = n.init_weights() + &Array2::from_shape_simple_fn((6, 4), || scale * rng.random_range(-1.0..1.0));
            let px = n.project_ball(x.clone());
            let py = n.project_ball(y.clone());
            prop_assert!(flat_distance(&px, n.init_weights()) <= n.radius() + 1e-9);
            prop_assert!(flat_distance(&n.project_ball(px.clone()), &px) <= 1e-12);
            prop_assert!(flat_distance(&px, &py) <= flat_distance(&x, &y) + 1e-12);
        }
    }
}
