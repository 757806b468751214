//! Finite-difference verification of the analytic gradients.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DropoutConfig, Group, HiddenInit, ModelConfig};
use crate::error::{Error, Result};
use crate::gate::GateKind;
use crate::layer::{NodeInit, SoftLogicLayer, GATES};
use crate::model::{ModelGrads, Pass, Seq2SeqModel};
use crate::tensor::Acts;
use crate::train::smoothed_cross_entropy;
use crate::GumbelConfig;

pub const MAX_PARAMS: usize = 5_000;
pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error. Central differences at
/// `h = 1e-5` carry roughly `1e-11` of rounding noise, so gradients far below
/// this floor are compared in absolute terms instead.
pub const REL_FLOOR: f64 = 1e-6;

/// About 3K parameters: V=8, d=8, S=3, widths at most 32.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        emb_dim: 8,
        seq_len: 3,
        sizes_n: vec![16, 12],
        sizes_k: vec![24, 16],
        sizes_l: vec![16, 12],
        sizes_p: vec![24, 16],
        sizes_m: vec![32, 16],
        group_factor: 2,
        groupsum_tau: 2.0,
        node_init: NodeInit::Gaussian { sigma: 1.0 },
        hidden_init: HiddenInit::default(),
        dropout: DropoutConfig {
            embedding: 0.1,
            n: 0.1,
            k: 0.1,
            l: 0.1,
            p: 0.1,
            m: 0.1,
        },
        gumbel: GumbelConfig::default(),
        seeds: Default::default(),
    }
}

/// Largest relative error seen in one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub group: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub params: usize,
    pub max_rel_err: f64,
    /// Embedding first, then N, K, L, P, M.
    pub worst: Vec<Offender>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "parameters checked: {}", self.params)?;
        for o in &self.worst {
            writeln!(
                f,
                "{:<9} worst #{:<5} analytic {:+.6e} numeric {:+.6e} rel {:.3e}",
                o.group, o.index, o.analytic, o.numeric, o.rel_err
            )?;
        }
        writeln!(f, "max relative error: {:.3e} (tolerance {TOLERANCE:e})", self.max_rel_err)?;
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

struct Probe {
    src: Vec<Vec<u32>>,
    dec: Vec<Vec<u32>>,
    tgt: Vec<Vec<u32>>,
    alpha: f64,
    reg_weight: f64,
}

impl Probe {
    fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let v = cfg.vocab_size as u32;
        let mut seq = |lo: u32| -> Vec<Vec<u32>> {
            (0..4).map(|_| (0..cfg.seq_len).map(|_| r.random_range(lo..v)).collect()).collect()
        };
        let src = seq(0);
        let dec = seq(0);
        let mut tgt = seq(0);
        // exercise the pad mask
        tgt[0][0] = crate::data::PAD;
        tgt[1][0] = 4;
        Probe {
            src,
            dec,
            tgt,
            alpha: 0.1,
            reg_weight: 0.3,
        }
    }

    fn loss(&self, model: &Seq2SeqModel) -> Result<f64> {
        let out = model.forward(&self.src, &self.dec, &mut Pass::training(&model.config().seeds, 0))?;
        let (ce, _) = smoothed_cross_entropy(&out.probs, &self.tgt, self.alpha)?;
        Ok(ce + self.reg_weight * out.emb_reg)
    }

    fn grads(&self, model: &Seq2SeqModel) -> Result<ModelGrads> {
        let out = model.forward(&self.src, &self.dec, &mut Pass::training(&model.config().seeds, 0))?;
        let (_, g) = smoothed_cross_entropy(&out.probs, &self.tgt, self.alpha)?;
        model.backward(&out.tape, &g, self.reg_weight)
    }
}

fn tensor_names(model: &Seq2SeqModel) -> Vec<String> {
    std::iter::once("embedding".to_string())
        .chain(Group::ALL.iter().flat_map(|&g| (0..model.group(g).layers().len()).map(move |_| g.to_string())))
        .collect()
}

/// Compares every analytic gradient against central differences.
pub fn gradcheck(cfg: &ModelConfig) -> Result<GradcheckReport> {
    gradcheck_with(cfg, |_| {})
}

/// Same as [`gradcheck`], with a hook that may tamper with the analytic
/// gradients before comparison.
pub fn gradcheck_with(cfg: &ModelConfig, corrupt: impl FnOnce(&mut ModelGrads)) -> Result<GradcheckReport> {
    let model = Seq2SeqModel::new(cfg.clone())?;
    let params = model.param_count();
    if params > MAX_PARAMS {
        return Err(Error::config(
            "model",
            format!("gradient check needs at most {MAX_PARAMS} parameters, config has {params}"),
        ));
    }
    let probe = Probe::new(cfg, 17);
    let mut grads = probe.grads(&model)?;
    corrupt(&mut grads);
    let names = tensor_names(&model);
    let mut worst: Vec<Offender> = Vec::new();
    let mut perturbed = model.clone();
    for (ti, name) in names.iter().enumerate() {
        let analytic = grads.tensors()[ti].to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = perturbed.tensors()[ti][i];
            perturbed.tensors_mut()[ti][i] = orig + STEP;
            let up = probe.loss(&perturbed)?;
            perturbed.tensors_mut()[ti][i] = orig - STEP;
            let down = probe.loss(&perturbed)?;
            perturbed.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            let slot = match worst.iter_mut().find(|o| &o.group == name) {
                Some(o) => o,
                None => {
                    worst.push(Offender {
                        group: name.clone(),
                        index: i,
                        analytic: a,
                        numeric,
                        rel_err: -1.0,
                    });
                    worst.last_mut().unwrap()
                }
            };
            if rel_err > slot.rel_err {
                *slot = Offender {
                    group: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_err,
                };
            }
        }
    }
    let max_rel_err = worst.iter().map(|o| o.rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        params,
        max_rel_err,
        worst,
    })
}

/// Checks the per-neuron logit gradient of single layers against the closed
/// form `∂y/∂z_i = p_i (f_i − Σ_j p_j f_j)`. Returns the largest absolute
/// deviation over `layers` random layers.
pub fn closed_form_logit_check(layers: usize, seed: u64) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for n in 0..layers {
        let in_dim = r.random_range(2..12);
        let width = r.random_range(1..20);
        let layer = SoftLogicLayer::new(in_dim, width, seed ^ n as u64, seed.wrapping_add(n as u64), NodeInit::Gaussian { sigma: 2.0 })?;
        let x = Acts::from_vec((0..in_dim).map(|_| r.random::<f64>()).collect());
        let (_, tape) = layer.forward(&x)?;
        for j in 0..width {
            let mut gy = Acts::zeros(width, 1);
            gy.set(j, 0, 1.0);
            let (_, g) = layer.backward(&tape, &gy)?;
            let p = layer.probabilities(j);
            let (a, b) = (x.get(layer.conn_a()[j] as usize, 0), x.get(layer.conn_b()[j] as usize, 0));
            let f: Vec<f64> = GateKind::ALL.iter().map(|g| g.relaxed(a, b)).collect();
            let mean: f64 = p.iter().zip(&f).map(|(p, f)| p * f).sum();
            for i in 0..GATES {
                let want = p[i] * (f[i] - mean);
                worst = worst.max((g[j * GATES + i] - want).abs());
            }
            // other neurons receive nothing
            for (k, v) in g.iter().enumerate() {
                if k / GATES != j {
                    worst = worst.max(v.abs());
                }
            }
        }
    }
    Ok(worst)
}
