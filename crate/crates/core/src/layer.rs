//! Trainable logic layers.
//!
//! Every neuron reads two inputs through a fixed random connectivity and
//! outputs a softmax-weighted mixture of the sixteen relaxed gates. Because
//! every relaxation is multilinear, the mixture is itself multilinear in the
//! two inputs: it only depends on the probability mass `q_c` that the mixture
//! puts on gates whose truth table is 1 at corner `c`. Forward and backward
//! work with those four corner masses instead of all sixteen gates.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateKind;
use crate::rng;
use crate::tensor::Acts;

pub const GATES: usize = GateKind::COUNT;

static NEXT_LAYER_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_LAYER_UID.fetch_add(1, Ordering::Relaxed)
}

/// Logit initialization for freshly built layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NodeInit {
    /// i.i.d. `N(0, σ²)` logits.
    Gaussian { sigma: f64 },
    /// `N(0, σ²)` logits plus `beta` on the pass-through gate `A`.
    Residual { sigma: f64, beta: f64 },
}

impl Default for NodeInit {
    fn default() -> Self {
        NodeInit::Residual {
            sigma: 1.0,
            beta: 5.0,
        }
    }
}

impl NodeInit {
    pub fn validate(&self) -> Result<()> {
        let (sigma, beta) = match *self {
            NodeInit::Gaussian { sigma } => (sigma, 1.0),
            NodeInit::Residual { sigma, beta } => (sigma, beta),
        };
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::config("node_init.sigma", "must be finite and >= 0"));
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::config("node_init.beta", "must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GumbelConfig {
    pub enabled: bool,
    pub tau: f64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            enabled: false,
            tau: 1.0,
        }
    }
}

/// A layer of `width` soft gate neurons over `in_dim` inputs.
#[derive(Debug)]
pub struct SoftLogicLayer {
    uid: u64,
    version: u64,
    in_dim: usize,
    conn_a: Vec<u32>,
    conn_b: Vec<u32>,
    /// Row-major `width × 16`.
    logits: Vec<f64>,
}

impl Clone for SoftLogicLayer {
    fn clone(&self) -> Self {
        SoftLogicLayer {
            uid: next_uid(),
            version: 0,
            in_dim: self.in_dim,
            conn_a: self.conn_a.clone(),
            conn_b: self.conn_b.clone(),
            logits: self.logits.clone(),
        }
    }
}

impl PartialEq for SoftLogicLayer {
    fn eq(&self, other: &Self) -> bool {
        self.in_dim == other.in_dim
            && self.conn_a == other.conn_a
            && self.conn_b == other.conn_b
            && self.logits.len() == other.logits.len()
            && self
                .logits
                .iter()
                .zip(&other.logits)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Forward state kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerTape {
    layer_uid: u64,
    version: u64,
    input: Acts,
    /// Mixture weights, `width × 16`.
    probs: Vec<f64>,
    /// Mass on gates that output 1 at corners 00, 01, 10, 11.
    corners: Vec<[f64; 4]>,
    inv_tau: f64,
}

impl LayerTape {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn input(&self) -> &Acts {
        &self.input
    }
}

fn softmax16(z: &[f64], noise: Option<&[f64]>, inv_tau: f64, out: &mut [f64]) {
    for l in 0..GATES {
        let g = noise.map_or(0.0, |n| n[l]);
        out[l] = (z[l] + g) * inv_tau;
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

fn corner_masses(p: &[f64]) -> [f64; 4] {
    let mut q = [0.0; 4];
    for (l, &pl) in p.iter().enumerate() {
        for (c, qc) in q.iter_mut().enumerate() {
            if (l >> c) & 1 == 1 {
                *qc += pl;
            }
        }
    }
    q
}

#[inline]
fn mix(q: &[f64; 4], a: f64, b: f64) -> f64 {
    let na = 1.0 - a;
    let nb = 1.0 - b;
    (q[0] * na * nb + q[1] * na * b + q[2] * a * nb + q[3] * a * b).clamp(0.0, 1.0)
}

impl SoftLogicLayer {
    /// Builds a layer with uniform random connectivity (no neuron reads the
    /// same input twice) and logits drawn according to `init`.
    pub fn new(
        in_dim: usize,
        width: usize,
        connectivity_seed: u64,
        init_seed: u64,
        init: NodeInit,
    ) -> Result<Self> {
        if in_dim < 2 {
            return Err(Error::config("in_dim", format!("must be >= 2, got {in_dim}")));
        }
        if width == 0 {
            return Err(Error::config("width", "must be >= 1"));
        }
        if in_dim > u32::MAX as usize {
            return Err(Error::config("in_dim", "exceeds u32 index range"));
        }
        init.validate()?;

        let mut conn_rng = rng::stream(connectivity_seed, &[0xC0]);
        let mut conn_a = Vec::with_capacity(width);
        let mut conn_b = Vec::with_capacity(width);
        for _ in 0..width {
            let a = conn_rng.random_range(0..in_dim as u32);
            let b = loop {
                let b = conn_rng.random_range(0..in_dim as u32);
                if b != a {
                    break b;
                }
            };
            conn_a.push(a);
            conn_b.push(b);
        }

        let mut init_rng = rng::stream(init_seed, &[0x1A]);
        let (sigma, beta) = match init {
            NodeInit::Gaussian { sigma } => (sigma, 0.0),
            NodeInit::Residual { sigma, beta } => (sigma, beta),
        };
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::config("node_init.sigma", e.to_string()))?;
        let mut logits: Vec<f64> = (0..width * GATES).map(|_| normal.sample(&mut init_rng)).collect();
        if beta != 0.0 {
            for j in 0..width {
                logits[j * GATES + GateKind::A.index() as usize] += beta;
            }
        }

        Ok(SoftLogicLayer {
            uid: next_uid(),
            version: 0,
            in_dim,
            conn_a,
            conn_b,
            logits,
        })
    }

    pub fn from_parts(in_dim: usize, conn_a: Vec<u32>, conn_b: Vec<u32>, logits: Vec<f64>) -> Result<Self> {
        let width = conn_a.len();
        if in_dim < 2 {
            return Err(Error::config("in_dim", format!("must be >= 2, got {in_dim}")));
        }
        if width == 0 || conn_b.len() != width || logits.len() != width * GATES {
            return Err(Error::Corrupt(format!(
                "layer parts: width {width}, conn_b {}, logits {}",
                conn_b.len(),
                logits.len()
            )));
        }
        for (j, (&a, &b)) in conn_a.iter().zip(&conn_b).enumerate() {
            if a as usize >= in_dim || b as usize >= in_dim || a == b {
                return Err(Error::Corrupt(format!("neuron {j}: invalid connection ({a}, {b})")));
            }
        }
        Ok(SoftLogicLayer {
            uid: next_uid(),
            version: 0,
            in_dim,
            conn_a,
            conn_b,
            logits,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn width(&self) -> usize {
        self.conn_a.len()
    }

    pub fn conn_a(&self) -> &[u32] {
        &self.conn_a
    }

    pub fn conn_b(&self) -> &[u32] {
        &self.conn_b
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Mutable logits. Invalidates all tapes recorded so far.
    pub fn logits_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.logits
    }

    pub fn param_count(&self) -> usize {
        self.logits.len()
    }

    /// Softmax of neuron `j`'s logits.
    pub fn probabilities(&self, j: usize) -> [f64; GATES] {
        let mut p = [0.0; GATES];
        softmax16(&self.logits[j * GATES..(j + 1) * GATES], None, 1.0, &mut p);
        p
    }

    fn check_input(&self, x: &Acts) -> Result<()> {
        if x.dim() != self.in_dim {
            return Err(Error::Shape {
                context: "logic layer input",
                expected: self.in_dim,
                actual: x.dim(),
            });
        }
        debug_assert!(
            x.as_slice().iter().all(|v| (0.0..=1.0).contains(v)),
            "logic layer input outside [0,1]"
        );
        Ok(())
    }

    fn mixture(&self, noise: Option<&[f64]>, inv_tau: f64) -> (Vec<f64>, Vec<[f64; 4]>) {
        let width = self.width();
        let mut probs = vec![0.0; width * GATES];
        let mut corners = Vec::with_capacity(width);
        for j in 0..width {
            let row = j * GATES..(j + 1) * GATES;
            softmax16(
                &self.logits[row.clone()],
                noise.map(|n| &n[row.clone()]),
                inv_tau,
                &mut probs[row.clone()],
            );
            corners.push(corner_masses(&probs[row]));
        }
        (probs, corners)
    }

    fn apply(&self, x: &Acts, corners: &[[f64; 4]]) -> Acts {
        let batch = x.batch();
        let mut y = Acts::zeros(self.width(), batch);
        for (j, q) in corners.iter().enumerate() {
            let xa = x.feature(self.conn_a[j] as usize);
            let xb = x.feature(self.conn_b[j] as usize);
            let out = y.feature_mut(j);
            for r in 0..batch {
                out[r] = mix(q, xa[r], xb[r]);
            }
        }
        y
    }

    fn run(&self, x: &Acts, noise: Option<&[f64]>, tau: f64) -> Result<(Acts, LayerTape)> {
        self.check_input(x)?;
        let inv_tau = 1.0 / tau;
        let (probs, corners) = self.mixture(noise, inv_tau);
        let y = self.apply(x, &corners);
        let tape = LayerTape {
            layer_uid: self.uid,
            version: self.version,
            input: x.clone(),
            probs,
            corners,
            inv_tau,
        };
        Ok((y, tape))
    }

    /// Soft forward pass: `y_j = Σ_l softmax(z_j)_l · g_l(x[a_j], x[b_j])`.
    pub fn forward(&self, x: &Acts) -> Result<(Acts, LayerTape)> {
        self.run(x, None, 1.0)
    }

    /// Soft forward without recording a tape.
    pub fn forward_eval(&self, x: &Acts) -> Result<Acts> {
        self.check_input(x)?;
        let (_, corners) = self.mixture(None, 1.0);
        Ok(self.apply(x, &corners))
    }

    /// Forward with mixture weights `softmax((z + G) / τ)` for explicit noise
    /// `G` (`width × 16`). One noise draw is shared by the whole batch.
    pub fn forward_perturbed(&self, x: &Acts, noise: &[f64], tau: f64) -> Result<(Acts, LayerTape)> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config("gumbel.tau", format!("must be > 0, got {tau}")));
        }
        if noise.len() != self.logits.len() {
            return Err(Error::Shape {
                context: "gumbel noise",
                expected: self.logits.len(),
                actual: noise.len(),
            });
        }
        self.run(x, Some(noise), tau)
    }

    /// Gumbel-softmax forward with `G = −ln(−ln U)`, `U ~ Uniform(0,1)`.
    pub fn forward_gumbel<R: Rng + ?Sized>(&self, x: &Acts, tau: f64, rng: &mut R) -> Result<(Acts, LayerTape)> {
        let noise: Vec<f64> = (0..self.logits.len()).map(|_| sample_gumbel(rng)).collect();
        self.forward_perturbed(x, &noise, tau)
    }

    /// Backward pass. Adds the logit gradient into `grad_logits`
    /// (`width × 16`) and returns the input gradient.
    pub fn backward_into(&self, tape: &LayerTape, grad_y: &Acts, grad_logits: &mut [f64]) -> Result<Acts> {
        if tape.layer_uid != self.uid || tape.version != self.version {
            return Err(Error::StaleTape("layer tape does not match the current layer parameters"));
        }
        let width = self.width();
        if grad_y.dim() != width || grad_y.batch() != tape.input.batch() {
            return Err(Error::Shape {
                context: "logic layer output gradient",
                expected: width,
                actual: grad_y.dim(),
            });
        }
        if grad_logits.len() != width * GATES {
            return Err(Error::Shape {
                context: "logic layer logit gradient",
                expected: width * GATES,
                actual: grad_logits.len(),
            });
        }
        let x = &tape.input;
        let batch = x.batch();
        let mut grad_x = Acts::zeros(self.in_dim, batch);
        let gx = grad_x.as_mut_slice();
        for j in 0..width {
            let gy = grad_y.feature(j);
            let ia = self.conn_a[j] as usize;
            let ib = self.conn_b[j] as usize;
            let xa = x.feature(ia);
            let xb = x.feature(ib);
            let q = &tape.corners[j];
            let (dqa0, dqa1) = (q[2] - q[0], q[3] - q[1]);
            let (dqb0, dqb1) = (q[1] - q[0], q[3] - q[2]);
            let mut basis = [0.0; 4];
            for r in 0..batch {
                let g = gy[r];
                if g == 0.0 {
                    continue;
                }
                let (a, b) = (xa[r], xb[r]);
                let (na, nb) = (1.0 - a, 1.0 - b);
                basis[0] += g * na * nb;
                basis[1] += g * na * b;
                basis[2] += g * a * nb;
                basis[3] += g * a * b;
                gx[ia * batch + r] += g * (nb * dqa0 + b * dqa1);
                gx[ib * batch + r] += g * (na * dqb0 + a * dqb1);
            }
            let mean: f64 = (0..4).map(|c| q[c] * basis[c]).sum();
            let p = &tape.probs[j * GATES..(j + 1) * GATES];
            let gz = &mut grad_logits[j * GATES..(j + 1) * GATES];
            for l in 0..GATES {
                let gate_term: f64 = (0..4).filter(|c| (l >> c) & 1 == 1).map(|c| basis[c]).sum();
                gz[l] += tape.inv_tau * p[l] * (gate_term - mean);
            }
        }
        Ok(grad_x)
    }

    /// Backward pass returning `(grad_x, grad_logits)`.
    pub fn backward(&self, tape: &LayerTape, grad_y: &Acts) -> Result<(Acts, Vec<f64>)> {
        let mut grad_logits = vec![0.0; self.logits.len()];
        let grad_x = self.backward_into(tape, grad_y, &mut grad_logits)?;
        Ok((grad_x, grad_logits))
    }

    /// Discretizes every neuron to its highest-logit gate. Ties go to the
    /// lowest gate index.
    pub fn collapse(&self) -> CollapsedLogicLayer {
        let gates = self
            .logits
            .chunks_exact(GATES)
            .map(|row| {
                let mut best = 0;
                for l in 1..GATES {
                    if row[l] > row[best] {
                        best = l;
                    }
                }
                GateKind::ALL[best]
            })
            .collect();
        CollapsedLogicLayer {
            in_dim: self.in_dim,
            conn_a: self.conn_a.clone(),
            conn_b: self.conn_b.clone(),
            gates,
        }
    }
}

pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// A discretized logic layer: one fixed gate per neuron.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CollapsedLogicLayer {
    pub(crate) in_dim: usize,
    pub(crate) conn_a: Vec<u32>,
    pub(crate) conn_b: Vec<u32>,
    pub(crate) gates: Vec<GateKind>,
}

impl CollapsedLogicLayer {
    pub fn from_parts(in_dim: usize, conn_a: Vec<u32>, conn_b: Vec<u32>, gates: Vec<GateKind>) -> Result<Self> {
        let width = gates.len();
        if in_dim < 2 || width == 0 || conn_a.len() != width || conn_b.len() != width {
            return Err(Error::Corrupt(format!(
                "collapsed layer parts: in_dim {in_dim}, gates {width}, conn {} / {}",
                conn_a.len(),
                conn_b.len()
            )));
        }
        if conn_a.iter().chain(&conn_b).any(|&i| i as usize >= in_dim) {
            return Err(Error::Corrupt("collapsed layer connection out of range".into()));
        }
        Ok(CollapsedLogicLayer {
            in_dim,
            conn_a,
            conn_b,
            gates,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn width(&self) -> usize {
        self.gates.len()
    }

    pub fn gates(&self) -> &[GateKind] {
        &self.gates
    }

    pub fn conn_a(&self) -> &[u32] {
        &self.conn_a
    }

    pub fn conn_b(&self) -> &[u32] {
        &self.conn_b
    }

    pub fn forward_hard(&self, bits: &[bool]) -> Result<Vec<bool>> {
        if bits.len() != self.in_dim {
            return Err(Error::Shape {
                context: "collapsed layer input",
                expected: self.in_dim,
                actual: bits.len(),
            });
        }
        Ok(self
            .gates
            .iter()
            .enumerate()
            .map(|(j, g)| g.eval(bits[self.conn_a[j] as usize], bits[self.conn_b[j] as usize]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(dim: usize, batch: usize, rng: &mut ChaCha8Rng) -> Acts {
        Acts::from_feature_major(dim, batch, (0..dim * batch).map(|_| rng.random::<f64>()).collect())
    }

    fn random_layer(in_dim: usize, width: usize, seed: u64) -> SoftLogicLayer {
        SoftLogicLayer::new(in_dim, width, seed, seed + 1, NodeInit::Gaussian { sigma: 1.5 }).unwrap()
    }

    /// Loops over all sixteen gates per neuron using the scalar relaxations.
    fn naive_forward(layer: &SoftLogicLayer, x: &[f64]) -> Vec<f64> {
        (0..layer.width())
            .map(|j| {
                let z = &layer.logits()[j * 16..(j + 1) * 16];
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                let (a, b) = (x[layer.conn_a()[j] as usize], x[layer.conn_b()[j] as usize]);
                GateKind::ALL.iter().zip(&e).map(|(g, w)| w / s * g.relaxed(a, b)).sum()
            })
            .collect()
    }

    fn one_hot_layer(in_dim: usize, conn_a: Vec<u32>, conn_b: Vec<u32>, gates: &[GateKind], hot: f64, cold: f64) -> SoftLogicLayer {
        let mut logits = vec![cold; gates.len() * 16];
        for (j, g) in gates.iter().enumerate() {
            logits[j * 16 + g.index() as usize] = hot;
        }
        SoftLogicLayer::from_parts(in_dim, conn_a, conn_b, logits).unwrap()
    }

    #[test]
    fn construction_is_deterministic() {
        let a = random_layer(10, 20, 7);
        let b = random_layer(10, 20, 7);
        assert_eq!(a.conn_a(), b.conn_a());
        assert_eq!(a.conn_b(), b.conn_b());
        assert_eq!(a, b);
        assert!(a.conn_a().iter().zip(a.conn_b()).all(|(x, y)| x != y));
        assert_eq!(a.param_count(), 16 * 20);
    }

    #[test]
    fn minimal_layer_uses_the_only_pair() {
        let l = random_layer(2, 1, 3);
        let mut pair = [l.conn_a()[0], l.conn_b()[0]];
        pair.sort();
        assert_eq!(pair, [0, 1]);
    }

    #[test]
    fn rejects_tiny_input() {
        assert!(SoftLogicLayer::new(1, 4, 0, 0, NodeInit::default()).is_err());
    }

    #[test]
    fn residual_init_is_near_projection() {
        let l = SoftLogicLayer::new(6, 5, 1, 2, NodeInit::Residual { sigma: 0.0, beta: 5.0 }).unwrap();
        for j in 0..5 {
            let p = l.probabilities(j);
            let pa = p[GateKind::A.index() as usize];
            assert!((pa - 148.413159 / (148.413159 + 15.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_give_one_half_on_boolean_inputs() {
        let l = SoftLogicLayer::from_parts(3, vec![0, 1, 2], vec![1, 2, 0], vec![0.0; 48]).unwrap();
        for bits in 0..8u32 {
            let x: Vec<f64> = (0..3).map(|i| ((bits >> i) & 1) as f64).collect();
            let (y, _) = l.forward(&Acts::from_vec(x)).unwrap();
            assert!(y.as_slice().iter().all(|&v| v == 0.5), "{:?}", y);
        }
    }

    #[test]
    fn near_one_hot_and_matches_relaxed_and() {
        let l = one_hot_layer(2, vec![0], vec![1], &[GateKind::AND], 40.0, 0.0);
        let (y, _) = l.forward(&Acts::from_vec(vec![0.5, 0.5])).unwrap();
        assert!((y.get(0, 0) - GateKind::AND.relaxed(0.5, 0.5)).abs() < 1e-9);
    }

    #[test]
    fn matches_naive_sixteen_gate_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let l = random_layer(7, 3, seed);
            let x = random_input(7, 4, &mut rng);
            let (y, _) = l.forward(&x).unwrap();
            for s in 0..4 {
                let want = naive_forward(&l, &x.sample(s));
                for j in 0..3 {
                    assert!((y.get(j, s) - want[j]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let l = random_layer(5, 2, 0);
        assert!(matches!(l.forward(&Acts::zeros(4, 1)), Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_logits_and_gradient_at_corner() {
        let l = SoftLogicLayer::from_parts(2, vec![0], vec![1], vec![0.0; 16]).unwrap();
        let (_, tape) = l.forward(&Acts::from_vec(vec![1.0, 1.0])).unwrap();
        let (_, gz) = l.backward(&tape, &Acts::from_vec(vec![2.0])).unwrap();
        assert!((gz[GateKind::AND.index() as usize] - 2.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = random_layer(6, 4, 9);
        let x = random_input(6, 3, &mut rng);
        let (_, tape) = l.forward(&x).unwrap();
        let (gx, gz) = l.backward(&tape, &Acts::zeros(4, 3)).unwrap();
        assert!(gx.is_zero());
        assert!(gz.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pass_through_routes_gradient_to_first_input() {
        let l = one_hot_layer(3, vec![2], vec![0], &[GateKind::A], 0.0, f64::NEG_INFINITY);
        let (_, tape) = l.forward(&Acts::from_vec(vec![0.3, 0.6, 0.9])).unwrap();
        let (gx, _) = l.backward(&tape, &Acts::from_vec(vec![1.7])).unwrap();
        assert_eq!(gx.as_slice(), &[0.0, 0.0, 1.7]);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut l = random_layer(4, 2, 0);
        let (_, tape) = l.forward(&Acts::filled(4, 1, 0.5)).unwrap();
        l.logits_mut()[0] += 1.0;
        assert!(matches!(l.backward(&tape, &Acts::zeros(2, 1)), Err(Error::StaleTape(_))));
        let other = random_layer(4, 2, 0);
        assert!(matches!(other.backward(&tape, &Acts::zeros(2, 1)), Err(Error::StaleTape(_))));
    }

    fn check_fd(l: &SoftLogicLayer, x: &Acts, tau: f64, noise: Option<&[f64]>) {
        let h = 1e-6;
        let fwd = |layer: &SoftLogicLayer, x: &Acts| -> f64 {
            let y = match noise {
                Some(n) => layer.forward_perturbed(x, n, tau).unwrap().0,
                None => layer.forward(x).unwrap().0,
            };
            y.as_slice().iter().sum()
        };
        let (y, tape) = match noise {
            Some(n) => l.forward_perturbed(x, n, tau).unwrap(),
            None => l.forward(x).unwrap(),
        };
        let ones = Acts::filled(y.dim(), y.batch(), 1.0);
        let (gx, gz) = l.backward(&tape, &ones).unwrap();
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-4 * a.abs().max(n.abs()).max(1e-3);
        for i in 0..gz.len() {
            let mut lp = l.clone();
            lp.logits_mut()[i] += h;
            let mut lm = l.clone();
            lm.logits_mut()[i] -= h;
            let fd = (fwd(&lp, x) - fwd(&lm, x)) / (2.0 * h);
            assert!(close(gz[i], fd), "logit {i}: {} vs {fd}", gz[i]);
        }
        for i in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let fd = (fwd(l, &xp) - fwd(l, &xm)) / (2.0 * h);
            assert!(close(gx.as_slice()[i], fd), "input {i}: {} vs {fd}", gx.as_slice()[i]);
        }
    }

    #[test]
    fn finite_difference_small_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..12 {
            let in_dim = rng.random_range(2..=16);
            let width = rng.random_range(1..=16);
            let l = random_layer(in_dim, width, seed);
            let x = Acts::from_feature_major(in_dim, 2, (0..in_dim * 2).map(|_| rng.random_range(0.01..0.99)).collect());
            check_fd(&l, &x, 1.0, None);
        }
    }

    #[test]
    fn finite_difference_gumbel_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = random_layer(8, 6, 3);
        let noise: Vec<f64> = (0..6 * 16).map(|_| sample_gumbel(&mut rng)).collect();
        let x = Acts::from_feature_major(8, 2, (0..16).map(|_| rng.random_range(0.01..0.99)).collect());
        check_fd(&l, &x, 0.7, Some(&noise));
    }

    #[test]
    fn logit_gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = random_layer(9, 7, 4);
        let x = random_input(9, 5, &mut rng);
        let (_, tape) = l.forward(&x).unwrap();
        let gy = random_input(7, 5, &mut rng);
        let (_, gz) = l.backward(&tape, &gy).unwrap();
        for row in gz.chunks(16) {
            assert!(row.iter().sum::<f64>().abs() < 1e-14);
        }
    }

    #[test]
    fn gumbel_zero_noise_unit_tau_is_soft_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = random_layer(6, 5, 2);
        let x = random_input(6, 3, &mut rng);
        let (a, _) = l.forward(&x).unwrap();
        let (b, _) = l.forward_perturbed(&x, &vec![0.0; 80], 1.0).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn gumbel_low_temperature_approaches_argmax_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let l = random_layer(6, 5, 12);
        let x = random_input(6, 2, &mut rng);
        let (y, _) = l.forward_perturbed(&x, &vec![0.0; 80], 1e-3).unwrap();
        let collapsed = l.collapse();
        for j in 0..5 {
            for s in 0..2 {
                let g = collapsed.gates()[j];
                let want = g.relaxed(x.get(l.conn_a()[j] as usize, s), x.get(l.conn_b()[j] as usize, s));
                assert!((y.get(j, s) - want).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn gumbel_is_seeded_and_validates_tau() {
        let l = random_layer(6, 5, 2);
        let x = Acts::filled(6, 2, 0.3);
        let run = || l.forward_gumbel(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().0;
        assert_eq!(run(), run());
        assert!(l.forward_gumbel(&x, 0.0, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn collapse_picks_argmax_with_low_index_ties() {
        let mut logits = vec![0.0; 32];
        logits[GateKind::OR.index() as usize] = 3.0;
        logits[16 + 5] = 2.0;
        logits[16 + 9] = 2.0;
        let l = SoftLogicLayer::from_parts(3, vec![0, 1], vec![1, 2], logits).unwrap();
        let c = l.collapse();
        assert_eq!(c.gates(), &[GateKind::OR, GateKind::NOT_B]);
        assert_eq!(c, l.collapse());
        assert_eq!(c.conn_a(), l.conn_a());
    }

    #[test]
    fn hard_forward_examples() {
        let c = CollapsedLogicLayer::from_parts(3, vec![0, 1, 2], vec![1, 2, 0], vec![GateKind::TRUE; 3]).unwrap();
        assert_eq!(c.forward_hard(&[false, false, true]).unwrap(), vec![true; 3]);
        let c = CollapsedLogicLayer::from_parts(3, vec![2, 0, 1], vec![1, 2, 0], vec![GateKind::A; 3]).unwrap();
        assert_eq!(c.forward_hard(&[true, false, false]).unwrap(), vec![false, true, false]);
    }

    #[test]
    fn collapse_consistency_on_boolean_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for seed in 0..20 {
            let l = random_layer(8, 12, seed);
            let c = l.collapse();
            let hot = one_hot_layer(8, l.conn_a().to_vec(), l.conn_b().to_vec(), c.gates(), 0.0, f64::NEG_INFINITY);
            for _ in 0..10 {
                let bits: Vec<bool> = (0..8).map(|_| rng.random()).collect();
                let x = Acts::from_vec(bits.iter().map(|&b| b as u8 as f64).collect());
                let soft = hot.forward(&x).unwrap().0;
                let hard = c.forward_hard(&bits).unwrap();
                let rounded: Vec<bool> = soft.as_slice().iter().map(|&v| v.round() == 1.0).collect();
                assert_eq!(rounded, hard);
                assert!(soft.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }
}
