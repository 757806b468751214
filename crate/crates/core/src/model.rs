//! The recurrent logic-gate encoder–decoder.
//!
//! Encoder, per step `t`:
//!   `h_t = N(σ(E[src_t]))`, `k_t = K([h_t; k_{t−1}])`; the context is `c = k_S`.
//! Decoder, per step `t`:
//!   `l_t = L(σ(E[dec_t]))`, `p_t = P([p_{t−1}; c; l_t])`,
//!   `m_t = M([p_t; c; l_t])`, `r_t = GroupSum(m_t)`, `probs_t = softmax(r_t)`.
//!
//! Source and decoder inputs share one embedding table.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::config::{Group, HiddenInit, ModelConfig, Seeds};
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::layer::{LayerTape, SoftLogicLayer};
use crate::rng::{self, StreamRng};
use crate::tensor::Acts;

static NEXT_MODEL_UID: AtomicU64 = AtomicU64::new(1);

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean of `x(1 − x)` over all entries; 0 for binary values, 0.25 at 0.5.
pub fn embedding_reg_loss(x: &Acts) -> f64 {
    let v = x.as_slice();
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|&e| e * (1.0 - e)).sum::<f64>() / v.len() as f64
}

/// Sums consecutive groups of `k` entries and scales by `1/τ`.
pub fn group_sum(v: &[f64], k: usize, tau: f64) -> Result<Vec<f64>> {
    if k == 0 || !v.len().is_multiple_of(k) {
        return Err(Error::Shape {
            context: "group sum input (must be divisible by the group factor)",
            expected: k,
            actual: v.len(),
        });
    }
    Ok(v.chunks_exact(k).map(|g| g.iter().sum::<f64>() / tau).collect())
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= sum);
    e
}

/// First index of the maximum.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn group_sum_acts(m: &Acts, k: usize, tau: f64) -> Acts {
    let classes = m.dim() / k;
    let batch = m.batch();
    let mut out = Acts::zeros(classes, batch);
    for g in 0..classes {
        let o = out.feature_mut(g);
        for i in 0..k {
            for (ov, &mv) in o.iter_mut().zip(m.feature(g * k + i)) {
                *ov += mv;
            }
        }
        o.iter_mut().for_each(|v| *v /= tau);
    }
    out
}

fn softmax_acts(scores: &Acts) -> Acts {
    let mut probs = Acts::zeros(scores.dim(), scores.batch());
    for s in 0..scores.batch() {
        let p = softmax(&scores.sample(s));
        for (i, v) in p.into_iter().enumerate() {
            probs.set(i, s, v);
        }
    }
    probs
}

/// Trainable `V × d` embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    vocab: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl Embedding {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[0xE5]);
        let weights = (0..vocab * dim).map(|_| StandardNormal.sample(&mut r)).collect();
        Embedding { vocab, dim, weights }
    }

    pub fn from_weights(vocab: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != vocab * dim {
            return Err(Error::Shape {
                context: "embedding weights",
                expected: vocab * dim,
                actual: weights.len(),
            });
        }
        Ok(Embedding { vocab, dim, weights })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn check(&self, id: u32) -> Result<()> {
        if id as usize >= self.vocab {
            return Err(Error::TokenOutOfRange { id, vocab: self.vocab });
        }
        Ok(())
    }

    pub fn row(&self, id: u32) -> Result<&[f64]> {
        self.check(id)?;
        let i = id as usize * self.dim;
        Ok(&self.weights[i..i + self.dim])
    }

    /// `σ(E[id])` for every id; one column per id.
    pub fn relax(&self, ids: &[u32]) -> Result<Acts> {
        let mut x = Acts::zeros(self.dim, ids.len());
        for (s, &id) in ids.iter().enumerate() {
            for (i, &e) in self.row(id)?.iter().enumerate() {
                x.set(i, s, sigmoid(e));
            }
        }
        Ok(x)
    }

    /// Heaviside binarization: bit set iff the entry is `>= 0`.
    pub fn hard(&self, ids: &[u32]) -> Result<Vec<Vec<bool>>> {
        ids.iter()
            .map(|&id| Ok(self.row(id)?.iter().map(|&e| e >= 0.0).collect()))
            .collect()
    }
}

/// Random streams consumed by one forward pass.
pub struct Pass {
    train: bool,
    hidden: StreamRng,
    gumbel: StreamRng,
    dropout: StreamRng,
}

impl Pass {
    /// Training pass for a given optimizer step: dropout and Gumbel noise on.
    pub fn training(seeds: &Seeds, step: u64) -> Self {
        Pass {
            train: true,
            hidden: rng::stream(seeds.hidden_noise, &[0x7A, step]),
            gumbel: rng::stream(seeds.gumbel, &[0x7A, step]),
            dropout: rng::stream(seeds.dropout, &[0x7A, step]),
        }
    }

    /// Evaluation pass: deterministic mixture weights, no dropout.
    pub fn evaluation(seeds: &Seeds) -> Self {
        Pass {
            train: false,
            hidden: rng::stream(seeds.hidden_noise, &[0xE7]),
            gumbel: rng::stream(seeds.gumbel, &[0xE7]),
            dropout: rng::stream(seeds.dropout, &[0xE7]),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }
}

/// The stacked layers of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGroup {
    layers: Vec<SoftLogicLayer>,
}

impl LayerGroup {
    pub fn new(layers: Vec<SoftLogicLayer>) -> Self {
        LayerGroup { layers }
    }

    pub fn layers(&self) -> &[SoftLogicLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [SoftLogicLayer] {
        &mut self.layers
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.width())
    }

    fn forward(&self, mut x: Acts, gumbel: Option<(f64, &mut StreamRng)>, record: bool) -> Result<(Acts, Vec<LayerTape>)> {
        let mut tapes = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        match gumbel {
            Some((tau, r)) => {
                for layer in &self.layers {
                    let (y, tape) = layer.forward_gumbel(&x, tau, r)?;
                    tapes.push(tape);
                    x = y;
                }
            }
            None if record => {
                for layer in &self.layers {
                    let (y, tape) = layer.forward(&x)?;
                    tapes.push(tape);
                    x = y;
                }
            }
            None => {
                for layer in &self.layers {
                    x = layer.forward_eval(&x)?;
                }
            }
        }
        Ok((x, tapes))
    }

    fn backward(&self, tapes: &[LayerTape], mut grad: Acts, grads: &mut [Vec<f64>]) -> Result<Acts> {
        if tapes.len() != self.layers.len() {
            return Err(Error::StaleTape("group tape has the wrong number of layers"));
        }
        for ((layer, tape), g) in self.layers.iter().zip(tapes).zip(grads.iter_mut()).rev() {
            grad = layer.backward_into(tape, &grad, g)?;
        }
        Ok(grad)
    }
}

/// 0/1 dropout mask; `None` when dropout is off for this pass.
type Mask = Option<Vec<f64>>;

fn sample_mask(p: f64, len: usize, pass: &mut Pass) -> Mask {
    if !pass.train || p <= 0.0 {
        return None;
    }
    Some((0..len).map(|_| if pass.dropout.random::<f64>() < p { 0.0 } else { 1.0 }).collect())
}

fn apply_mask(x: &mut Acts, mask: &Mask) {
    if let Some(m) = mask {
        for (v, k) in x.as_mut_slice().iter_mut().zip(m) {
            *v *= k;
        }
    }
}

struct EncoderStep {
    ids: Vec<u32>,
    x: Acts,
    emb_mask: Mask,
    n_tapes: Vec<LayerTape>,
    n_mask: Mask,
    k_tapes: Vec<LayerTape>,
    k_mask: Mask,
}

/// Forward state of the encoder.
pub struct EncoderTape {
    steps: Vec<EncoderStep>,
    reg_sum: f64,
    reg_count: usize,
}

struct DecoderStep {
    ids: Vec<u32>,
    x: Acts,
    emb_mask: Mask,
    l_tapes: Vec<LayerTape>,
    l_mask: Mask,
    p_tapes: Vec<LayerTape>,
    p_mask: Mask,
    m_tapes: Vec<LayerTape>,
    m_mask: Mask,
}

/// Forward state of the decoder.
pub struct DecoderTape {
    steps: Vec<DecoderStep>,
    reg_sum: f64,
    reg_count: usize,
}

/// Everything the backward pass needs from one forward pass.
pub struct ModelTape {
    model_uid: u64,
    version: u64,
    batch: usize,
    encoder: EncoderTape,
    decoder: DecoderTape,
}

impl ModelTape {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

pub struct ForwardOutput {
    /// GroupSum scores per decoder step, `V × batch`.
    pub scores: Vec<Acts>,
    /// Softmax of the scores per decoder step.
    pub probs: Vec<Acts>,
    /// Embedding regularizer averaged over all source and decoder positions.
    pub emb_reg: f64,
    pub tape: ModelTape,
}

/// Gradients for every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub embedding: Vec<f64>,
    /// Indexed like [`Group::ALL`], then by layer.
    pub groups: Vec<Vec<Vec<f64>>>,
}

impl ModelGrads {
    pub fn zeros_like(model: &Seq2SeqModel) -> Self {
        ModelGrads {
            embedding: vec![0.0; model.embedding.weights.len()],
            groups: model
                .groups
                .iter()
                .map(|g| g.layers.iter().map(|l| vec![0.0; l.param_count()]).collect())
                .collect(),
        }
    }

    pub fn group(&self, g: Group) -> &[Vec<f64>] {
        &self.groups[g as usize]
    }

    /// Tensors in canonical order: embedding, then N, K, L, P, M layers.
    pub fn tensors(&self) -> Vec<&[f64]> {
        std::iter::once(self.embedding.as_slice())
            .chain(self.groups.iter().flatten().map(|v| v.as_slice()))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        std::iter::once(self.embedding.as_mut_slice())
            .chain(self.groups.iter_mut().flatten().map(|v| v.as_mut_slice()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// The trainable encoder–decoder.
#[derive(Debug)]
pub struct Seq2SeqModel {
    uid: u64,
    version: u64,
    config: ModelConfig,
    embedding: Embedding,
    groups: Vec<LayerGroup>,
}

impl Clone for Seq2SeqModel {
    fn clone(&self) -> Self {
        Seq2SeqModel {
            uid: NEXT_MODEL_UID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            config: self.config.clone(),
            embedding: self.embedding.clone(),
            groups: self.groups.clone(),
        }
    }
}

impl PartialEq for Seq2SeqModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.groups == other.groups
            && self.embedding.vocab == other.embedding.vocab
            && self.embedding.dim == other.embedding.dim
            && self
                .embedding
                .weights
                .iter()
                .zip(&other.embedding.weights)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn transpose(seqs: &[Vec<u32>], seq_len: usize, what: &'static str) -> Result<Vec<Vec<u32>>> {
    if seqs.is_empty() {
        return Err(Error::Empty(what));
    }
    for s in seqs {
        if s.len() != seq_len {
            return Err(Error::Shape {
                context: what,
                expected: seq_len,
                actual: s.len(),
            });
        }
    }
    Ok((0..seq_len).map(|t| seqs.iter().map(|s| s[t]).collect()).collect())
}

fn mul_sigmoid_grad(grad_x: &Acts, x: &Acts, reg_scale: f64, ids: &[u32], dim: usize, out: &mut [f64]) {
    let batch = x.batch();
    for i in 0..dim {
        let gx = grad_x.feature(i);
        let xv = x.feature(i);
        for s in 0..batch {
            let xs = xv[s];
            let g = gx[s] + reg_scale * (1.0 - 2.0 * xs);
            out[ids[s] as usize * dim + i] += g * xs * (1.0 - xs);
        }
    }
}

impl Seq2SeqModel {
    /// Builds a model; every layer gets its own connectivity and init stream.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let embedding = Embedding::new(config.vocab_size, config.emb_dim, rng::derive_seed(config.seeds.init, &[0]));
        let groups = Group::ALL
            .iter()
            .map(|&g| {
                let layers = config
                    .layer_shapes(g)
                    .into_iter()
                    .enumerate()
                    .map(|(i, (in_dim, width))| {
                        SoftLogicLayer::new(
                            in_dim,
                            width,
                            rng::derive_seed(config.seeds.connectivity, &[g.tag(), i as u64]),
                            rng::derive_seed(config.seeds.init, &[g.tag(), i as u64]),
                            config.node_init,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LayerGroup::new(layers))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Seq2SeqModel {
            uid: NEXT_MODEL_UID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            config,
            embedding,
            groups,
        })
    }

    /// Assembles a model from loaded parts, checking every shape against the config.
    pub fn from_parts(config: ModelConfig, embedding: Embedding, groups: Vec<LayerGroup>) -> Result<Self> {
        config.validate()?;
        if embedding.vocab != config.vocab_size || embedding.dim != config.emb_dim {
            return Err(Error::Corrupt("embedding shape does not match config".into()));
        }
        if groups.len() != 5 {
            return Err(Error::Corrupt(format!("expected 5 layer groups, got {}", groups.len())));
        }
        for (g, group) in Group::ALL.iter().zip(&groups) {
            let shapes: Vec<_> = group.layers.iter().map(|l| (l.in_dim(), l.width())).collect();
            if shapes != config.layer_shapes(*g) {
                return Err(Error::Corrupt(format!("group {g} layer shapes do not match config")));
            }
        }
        Ok(Seq2SeqModel {
            uid: NEXT_MODEL_UID.fetch_add(1, Ordering::Relaxed),
            version: 0,
            config,
            embedding,
            groups,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    pub fn group(&self, g: Group) -> &LayerGroup {
        &self.groups[g as usize]
    }

    pub fn groups(&self) -> &[LayerGroup] {
        &self.groups
    }

    /// Mutable access to one group. Invalidates outstanding tapes.
    pub fn group_mut(&mut self, g: Group) -> &mut LayerGroup {
        self.version += 1;
        &mut self.groups[g as usize]
    }

    /// Mutable embedding table. Invalidates outstanding tapes.
    pub fn embedding_mut(&mut self) -> &mut Embedding {
        self.version += 1;
        &mut self.embedding
    }

    /// Mutable parameter tensors in the order of [`ModelGrads::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        std::iter::once(self.embedding.weights.as_mut_slice())
            .chain(
                self.groups
                    .iter_mut()
                    .flat_map(|g| g.layers.iter_mut().map(|l| l.logits_mut())),
            )
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        std::iter::once(self.embedding.weights.as_slice())
            .chain(self.groups.iter().flat_map(|g| g.layers.iter().map(|l| l.logits())))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn initial_state(&self, dim: usize, batch: usize, pass: &mut Pass) -> Acts {
        match self.config.hidden_init {
            HiddenInit::Zero => Acts::zeros(dim, batch),
            HiddenInit::One => Acts::filled(dim, batch, 1.0),
            HiddenInit::Uniform => {
                Acts::from_feature_major(dim, batch, (0..dim * batch).map(|_| pass.hidden.random::<f64>()).collect())
            }
            HiddenInit::Gaussian { mean, std } => {
                let normal = Normal::new(mean, std).expect("validated hidden_init");
                Acts::from_feature_major(
                    dim,
                    batch,
                    (0..dim * batch)
                        .map(|_| normal.sample(&mut pass.hidden).clamp(0.0, 1.0))
                        .collect(),
                )
            }
        }
    }

    fn run_group(&self, g: Group, x: Acts, pass: &mut Pass, record: bool) -> Result<(Acts, Vec<LayerTape>, Mask)> {
        let gumbel = if pass.train && self.config.gumbel.enabled {
            Some((self.config.gumbel.tau, &mut pass.gumbel))
        } else {
            None
        };
        let (mut y, tapes) = self.groups[g as usize].forward(x, gumbel, record)?;
        let mask = sample_mask(self.config.dropout.for_group(g), y.as_slice().len(), pass);
        apply_mask(&mut y, &mask);
        Ok((y, tapes, mask))
    }

    fn embed_step(&self, ids: &[u32], pass: &mut Pass) -> Result<(Acts, Acts, Mask)> {
        let x = self.embedding.relax(ids)?;
        let mut xd = x.clone();
        let mask = sample_mask(self.config.dropout.embedding, x.as_slice().len(), pass);
        apply_mask(&mut xd, &mask);
        Ok((x, xd, mask))
    }

    fn encode_inner(&self, src: &[Vec<u32>], pass: &mut Pass, record: bool) -> Result<(Acts, EncoderTape)> {
        let steps_ids = transpose(src, self.config.seq_len, "source sequence")?;
        let batch = src.len();
        let mut k = self.initial_state(self.config.out_dim(Group::K), batch, pass);
        let mut steps = Vec::new();
        let mut reg_sum = 0.0;
        let mut reg_count = 0;
        for ids in steps_ids {
            let (x, xd, emb_mask) = self.embed_step(&ids, pass)?;
            reg_sum += embedding_reg_loss(&x) * x.as_slice().len() as f64;
            reg_count += x.as_slice().len();
            let (h, n_tapes, n_mask) = self.run_group(Group::N, xd, pass, record)?;
            let kin = Acts::concat(&[&h, &k]);
            let (k_next, k_tapes, k_mask) = self.run_group(Group::K, kin, pass, record)?;
            k = k_next;
            if record {
                steps.push(EncoderStep {
                    ids,
                    x,
                    emb_mask,
                    n_tapes,
                    n_mask,
                    k_tapes,
                    k_mask,
                });
            }
        }
        Ok((
            k,
            EncoderTape {
                steps,
                reg_sum,
                reg_count,
            },
        ))
    }

    /// Runs the encoder over `S`-long source sequences and returns the
    /// context `c = k_S` (one column per sequence).
    pub fn encode(&self, src: &[Vec<u32>], pass: &mut Pass) -> Result<(Acts, EncoderTape)> {
        self.encode_inner(src, pass, true)
    }

    fn head(&self, m: &Acts) -> (Acts, Acts) {
        let scores = group_sum_acts(m, self.config.group_factor, self.config.groupsum_tau);
        let probs = softmax_acts(&scores);
        (scores, probs)
    }

    fn decode_inner(
        &self,
        context: &Acts,
        dec_in: &[Vec<u32>],
        pass: &mut Pass,
        record: bool,
    ) -> Result<(Vec<Acts>, Vec<Acts>, DecoderTape)> {
        let steps_ids = transpose(dec_in, self.config.seq_len, "decoder input sequence")?;
        let batch = dec_in.len();
        if context.batch() != batch || context.dim() != self.config.out_dim(Group::K) {
            return Err(Error::Shape {
                context: "decoder context",
                expected: self.config.out_dim(Group::K),
                actual: context.dim(),
            });
        }
        let mut p = self.initial_state(self.config.out_dim(Group::P), batch, pass);
        let mut steps = Vec::new();
        let mut all_scores = Vec::new();
        let mut all_probs = Vec::new();
        let mut reg_sum = 0.0;
        let mut reg_count = 0;
        for ids in steps_ids {
            let (x, xd, emb_mask) = self.embed_step(&ids, pass)?;
            reg_sum += embedding_reg_loss(&x) * x.as_slice().len() as f64;
            reg_count += x.as_slice().len();
            let (l, l_tapes, l_mask) = self.run_group(Group::L, xd, pass, record)?;
            let pin = Acts::concat(&[&p, context, &l]);
            let (p_next, p_tapes, p_mask) = self.run_group(Group::P, pin, pass, record)?;
            p = p_next;
            let min = Acts::concat(&[&p, context, &l]);
            let (m, m_tapes, m_mask) = self.run_group(Group::M, min, pass, record)?;
            let (scores, probs) = self.head(&m);
            all_scores.push(scores);
            all_probs.push(probs);
            if record {
                steps.push(DecoderStep {
                    ids,
                    x,
                    emb_mask,
                    l_tapes,
                    l_mask,
                    p_tapes,
                    p_mask,
                    m_tapes,
                    m_mask,
                });
            }
        }
        Ok((
            all_scores,
            all_probs,
            DecoderTape {
                steps,
                reg_sum,
                reg_count,
            },
        ))
    }

    /// Teacher-forced decoder: one step per decoder input token. Returns
    /// per-step scores and probabilities.
    pub fn decode_teacher_forced(
        &self,
        context: &Acts,
        dec_in: &[Vec<u32>],
        pass: &mut Pass,
    ) -> Result<(Vec<Acts>, Vec<Acts>, DecoderTape)> {
        self.decode_inner(context, dec_in, pass, true)
    }

    /// Full teacher-forced forward with tapes.
    pub fn forward(&self, src: &[Vec<u32>], dec_in: &[Vec<u32>], pass: &mut Pass) -> Result<ForwardOutput> {
        if src.len() != dec_in.len() {
            return Err(Error::Shape {
                context: "decoder batch",
                expected: src.len(),
                actual: dec_in.len(),
            });
        }
        let (c, encoder) = self.encode(src, pass)?;
        let (scores, probs, decoder) = self.decode_teacher_forced(&c, dec_in, pass)?;
        let emb_reg = (encoder.reg_sum + decoder.reg_sum) / (encoder.reg_count + decoder.reg_count) as f64;
        Ok(ForwardOutput {
            scores,
            probs,
            emb_reg,
            tape: ModelTape {
                model_uid: self.uid,
                version: self.version,
                batch: src.len(),
                encoder,
                decoder,
            },
        })
    }

    /// Teacher-forced forward in evaluation mode; returns per-step probabilities.
    pub fn forward_eval(&self, src: &[Vec<u32>], dec_in: &[Vec<u32>]) -> Result<Vec<Acts>> {
        let mut pass = Pass::evaluation(&self.config.seeds);
        let (c, _) = self.encode_inner(src, &mut pass, false)?;
        let (_, probs, _) = self.decode_inner(&c, dec_in, &mut pass, false)?;
        Ok(probs)
    }

    /// Teacher-forced argmax predictions, one sequence per sample.
    pub fn predict(&self, src: &[Vec<u32>], dec_in: &[Vec<u32>]) -> Result<Vec<Vec<u32>>> {
        let probs = self.forward_eval(src, dec_in)?;
        Ok((0..src.len())
            .map(|s| probs.iter().map(|p| argmax(&p.sample(s)) as u32).collect())
            .collect())
    }

    /// Reverse pass through the whole unrolled graph.
    ///
    /// `grad_scores[t]` is the loss gradient with respect to the GroupSum
    /// scores at decoder step `t`; `emb_reg_weight` scales the embedding
    /// regularizer returned by [`Seq2SeqModel::forward`]. Gradients with
    /// respect to the initial recurrent states are dropped.
    pub fn backward(&self, tape: &ModelTape, grad_scores: &[Acts], emb_reg_weight: f64) -> Result<ModelGrads> {
        if tape.model_uid != self.uid || tape.version != self.version {
            return Err(Error::StaleTape("model tape does not match the current parameters"));
        }
        let s_len = self.config.seq_len;
        if grad_scores.len() != s_len || tape.decoder.steps.len() != s_len || tape.encoder.steps.len() != s_len {
            return Err(Error::Shape {
                context: "score gradients (one per decoder step)",
                expected: s_len,
                actual: grad_scores.len(),
            });
        }
        let batch = tape.batch;
        let cfg = &self.config;
        let (dim_p, dim_k, dim_l) = (cfg.out_dim(Group::P), cfg.out_dim(Group::K), cfg.out_dim(Group::L));
        let k = cfg.group_factor;
        let inv_tau = 1.0 / cfg.groupsum_tau;
        let reg_scale = emb_reg_weight / (tape.encoder.reg_count + tape.decoder.reg_count) as f64;
        let d = cfg.emb_dim;

        let mut grads = ModelGrads::zeros_like(self);
        let mut grad_c = Acts::zeros(dim_k, batch);
        let mut grad_p_next = Acts::zeros(dim_p, batch);

        for (step, gs) in tape.decoder.steps.iter().zip(grad_scores).rev() {
            if gs.dim() != cfg.vocab_size || gs.batch() != batch {
                return Err(Error::Shape {
                    context: "score gradient",
                    expected: cfg.vocab_size,
                    actual: gs.dim(),
                });
            }
            let mut gm = Acts::zeros(cfg.out_dim(Group::M), batch);
            for g in 0..cfg.vocab_size {
                let src = gs.feature(g);
                for i in 0..k {
                    for (o, &v) in gm.feature_mut(g * k + i).iter_mut().zip(src) {
                        *o = v * inv_tau;
                    }
                }
            }
            apply_mask(&mut gm, &step.m_mask);
            let gmin = self.groups[Group::M as usize].backward(&step.m_tapes, gm, &mut grads.groups[Group::M as usize])?;
            let mut parts = gmin.split(&[dim_p, dim_k, dim_l]).into_iter();
            let (mut gp, gc_m, mut gl) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
            gp.add_assign(&grad_p_next);
            apply_mask(&mut gp, &step.p_mask);
            let gpin = self.groups[Group::P as usize].backward(&step.p_tapes, gp, &mut grads.groups[Group::P as usize])?;
            let mut parts = gpin.split(&[dim_p, dim_k, dim_l]).into_iter();
            let (gp_prev, gc_p, gl_p) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
            grad_p_next = gp_prev;
            grad_c.add_assign(&gc_m);
            grad_c.add_assign(&gc_p);
            gl.add_assign(&gl_p);
            apply_mask(&mut gl, &step.l_mask);
            let mut gx = self.groups[Group::L as usize].backward(&step.l_tapes, gl, &mut grads.groups[Group::L as usize])?;
            apply_mask(&mut gx, &step.emb_mask);
            mul_sigmoid_grad(&gx, &step.x, reg_scale, &step.ids, d, &mut grads.embedding);
        }

        let dim_n = cfg.out_dim(Group::N);
        let mut gk = grad_c;
        for step in tape.encoder.steps.iter().rev() {
            apply_mask(&mut gk, &step.k_mask);
            let gkin = self.groups[Group::K as usize].backward(&step.k_tapes, gk, &mut grads.groups[Group::K as usize])?;
            let mut parts = gkin.split(&[dim_n, dim_k]).into_iter();
            let (mut gh, gk_prev) = (parts.next().unwrap(), parts.next().unwrap());
            apply_mask(&mut gh, &step.n_mask);
            let mut gx = self.groups[Group::N as usize].backward(&step.n_tapes, gh, &mut grads.groups[Group::N as usize])?;
            apply_mask(&mut gx, &step.emb_mask);
            mul_sigmoid_grad(&gx, &step.x, reg_scale, &step.ids, d, &mut grads.embedding);
            gk = gk_prev;
        }
        Ok(grads)
    }

    /// Greedy decoding from BOS for a batch of sources. Each output stops
    /// before the first EOS or after `max_len` tokens.
    pub fn generate_batch(&self, srcs: &[Vec<u32>], max_len: usize) -> Result<Vec<Vec<u32>>> {
        let mut pass = Pass::evaluation(&self.config.seeds);
        let (c, _) = self.encode_inner(srcs, &mut pass, false)?;
        let batch = srcs.len();
        let mut p = self.initial_state(self.config.out_dim(Group::P), batch, &mut pass);
        let mut tokens = vec![BOS; batch];
        let mut out = vec![Vec::new(); batch];
        let mut done = vec![false; batch];
        for _ in 0..max_len {
            let x = self.embedding.relax(&tokens)?;
            let (l, _, _) = self.run_group(Group::L, x, &mut pass, false)?;
            let (p_next, _, _) = self.run_group(Group::P, Acts::concat(&[&p, &c, &l]), &mut pass, false)?;
            p = p_next;
            let (m, _, _) = self.run_group(Group::M, Acts::concat(&[&p, &c, &l]), &mut pass, false)?;
            let (scores, _) = self.head(&m);
            for s in 0..batch {
                let next = argmax(&scores.sample(s)) as u32;
                if !done[s] {
                    if next == EOS {
                        done[s] = true;
                    } else {
                        out[s].push(next);
                    }
                }
                tokens[s] = next;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    pub fn generate(&self, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
        Ok(self.generate_batch(&[src.to_vec()], max_len)?.remove(0))
    }
}
