//! Collapsed Boolean models and word-parallel evaluation.
//!
//! Activations are packed feature-major: feature `i` owns `⌈lanes/64⌉`
//! words and bit `b` of word `w` belongs to lane `64w + b`. Bits of lanes
//! past the end are kept at zero.

use crate::config::{Group, ModelConfig};
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::gate::GateKind;
use crate::layer::CollapsedLogicLayer;
use crate::model::Seq2SeqModel;

const W: usize = u64::BITS as usize;

/// A `width × lanes` bit matrix packed along lanes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitLanes {
    width: usize,
    lanes: usize,
    words: Vec<u64>,
}

impl BitLanes {
    pub fn zeros(width: usize, lanes: usize) -> Self {
        BitLanes {
            width,
            lanes,
            words: vec![0; width * lanes.div_ceil(W)],
        }
    }

    /// One `Vec<bool>` of length `width` per lane.
    pub fn from_lanes(lanes: &[Vec<bool>]) -> Result<Self> {
        let width = lanes.first().map_or(0, Vec::len);
        let mut out = BitLanes::zeros(width, lanes.len());
        for (l, bits) in lanes.iter().enumerate() {
            if bits.len() != width {
                return Err(Error::Shape {
                    context: "lane width",
                    expected: width,
                    actual: bits.len(),
                });
            }
            for (i, &b) in bits.iter().enumerate() {
                out.set(i, l, b);
            }
        }
        Ok(out)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lanes(&self) -> usize {
        self.lanes
    }

    pub fn words_per_feature(&self) -> usize {
        self.lanes.div_ceil(W)
    }

    pub fn feature(&self, i: usize) -> &[u64] {
        let n = self.words_per_feature();
        &self.words[i * n..(i + 1) * n]
    }

    pub fn get(&self, feature: usize, lane: usize) -> bool {
        self.feature(feature)[lane / W] >> (lane % W) & 1 == 1
    }

    pub fn set(&mut self, feature: usize, lane: usize, bit: bool) {
        let n = self.words_per_feature();
        let w = &mut self.words[feature * n + lane / W];
        let m = 1u64 << (lane % W);
        if bit {
            *w |= m;
        } else {
            *w &= !m;
        }
    }

    pub fn lane(&self, lane: usize) -> Vec<bool> {
        (0..self.width).map(|i| self.get(i, lane)).collect()
    }

    /// Stacks features of inputs with the same lane count.
    pub fn concat(parts: &[&BitLanes]) -> BitLanes {
        let lanes = parts.first().map_or(0, |p| p.lanes);
        debug_assert!(parts.iter().all(|p| p.lanes == lanes));
        let mut words = Vec::with_capacity(parts.iter().map(|p| p.words.len()).sum());
        for p in parts {
            words.extend_from_slice(&p.words);
        }
        BitLanes {
            width: parts.iter().map(|p| p.width).sum(),
            lanes,
            words,
        }
    }

    fn lane_masks(&self) -> Vec<u64> {
        let n = self.words_per_feature();
        (0..n)
            .map(|w| {
                let valid = (self.lanes - w * W).min(W);
                if valid == W {
                    u64::MAX
                } else {
                    (1u64 << valid) - 1
                }
            })
            .collect()
    }
}

/// Evaluates a collapsed layer on every lane at once.
pub fn eval_bitpacked(layer: &CollapsedLogicLayer, x: &BitLanes) -> Result<BitLanes> {
    if x.width != layer.in_dim() {
        return Err(Error::Shape {
            context: "collapsed layer input",
            expected: layer.in_dim(),
            actual: x.width,
        });
    }
    if x.lanes == 0 {
        return Err(Error::Empty("lanes"));
    }
    let masks = x.lane_masks();
    let n = masks.len();
    let mut out = BitLanes::zeros(layer.width(), x.lanes);
    for (j, ((&g, &a), &b)) in layer.gates().iter().zip(layer.conn_a()).zip(layer.conn_b()).enumerate() {
        let (fa, fb) = (x.feature(a as usize), x.feature(b as usize));
        let dst = &mut out.words[j * n..(j + 1) * n];
        for w in 0..n {
            dst[w] = g.eval_word(fa[w], fb[w]) & masks[w];
        }
    }
    Ok(out)
}

/// Popcount of each group of `k` bits; class is the first maximum.
pub fn hard_group_scores(bits: &[bool], k: usize) -> Result<(Vec<u32>, usize)> {
    if k == 0 || !bits.len().is_multiple_of(k) {
        return Err(Error::Shape {
            context: "group popcount input (must be divisible by the group factor)",
            expected: k,
            actual: bits.len(),
        });
    }
    let scores: Vec<u32> = bits.chunks_exact(k).map(|g| g.iter().filter(|&&b| b).count() as u32).collect();
    let class = crate::model::argmax(&scores);
    Ok((scores, class))
}

/// A fully discrete copy of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct CollapsedModel {
    config: ModelConfig,
    /// Row-major `V × d`.
    embedding: Vec<bool>,
    groups: Vec<Vec<CollapsedLogicLayer>>,
}

/// Argmax gate per neuron and Heaviside embeddings.
pub fn collapse_model(model: &Seq2SeqModel) -> CollapsedModel {
    CollapsedModel {
        config: model.config().clone(),
        embedding: model.embedding().weights().iter().map(|&e| e >= 0.0).collect(),
        groups: model
            .groups()
            .iter()
            .map(|g| g.layers().iter().map(|l| l.collapse()).collect())
            .collect(),
    }
}

impl CollapsedModel {
    pub fn from_parts(config: ModelConfig, embedding: Vec<bool>, groups: Vec<Vec<CollapsedLogicLayer>>) -> Result<Self> {
        config.validate()?;
        if embedding.len() != config.vocab_size * config.emb_dim {
            return Err(Error::Corrupt("binary embedding size does not match config".into()));
        }
        if groups.len() != 5 {
            return Err(Error::Corrupt(format!("expected 5 layer groups, got {}", groups.len())));
        }
        for (g, layers) in Group::ALL.iter().zip(&groups) {
            let shapes: Vec<_> = layers.iter().map(|l| (l.in_dim(), l.width())).collect();
            if shapes != config.layer_shapes(*g) {
                return Err(Error::Corrupt(format!("group {g} layer shapes do not match config")));
            }
        }
        Ok(CollapsedModel {
            config,
            embedding,
            groups,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding_bits(&self) -> &[bool] {
        &self.embedding
    }

    pub fn group(&self, g: Group) -> &[CollapsedLogicLayer] {
        &self.groups[g as usize]
    }

    pub fn groups(&self) -> &[Vec<CollapsedLogicLayer>] {
        &self.groups
    }

    pub fn gate_count(&self) -> usize {
        self.groups.iter().flatten().map(|l| l.width()).sum()
    }

    /// Number of neurons per gate kind, indexed by truth table.
    pub fn gate_histogram(&self) -> [usize; GateKind::COUNT] {
        let mut h = [0; GateKind::COUNT];
        for l in self.groups.iter().flatten() {
            for g in l.gates() {
                h[g.index() as usize] += 1;
            }
        }
        h
    }

    fn embed(&self, ids: &[u32]) -> Result<BitLanes> {
        let d = self.config.emb_dim;
        let mut out = BitLanes::zeros(d, ids.len());
        for (lane, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
            let row = &self.embedding[id as usize * d..(id as usize + 1) * d];
            for (i, &b) in row.iter().enumerate() {
                if b {
                    out.set(i, lane, true);
                }
            }
        }
        Ok(out)
    }

    fn run(&self, g: Group, mut x: BitLanes) -> Result<BitLanes> {
        for l in &self.groups[g as usize] {
            x = eval_bitpacked(l, &x)?;
        }
        Ok(x)
    }

    fn classes(&self, m: &BitLanes) -> Result<Vec<u32>> {
        (0..m.lanes())
            .map(|lane| Ok(hard_group_scores(&m.lane(lane), self.config.group_factor)?.1 as u32))
            .collect()
    }

    fn check_lengths(&self, seqs: &[Vec<u32>], what: &'static str) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::Empty(what));
        }
        for s in seqs {
            if s.len() != self.config.seq_len {
                return Err(Error::Shape {
                    context: what,
                    expected: self.config.seq_len,
                    actual: s.len(),
                });
            }
        }
        Ok(())
    }

    /// Encoder context with an all-zero initial state; one lane per source.
    pub fn encode(&self, srcs: &[Vec<u32>]) -> Result<BitLanes> {
        self.check_lengths(srcs, "source sequence")?;
        let mut k = BitLanes::zeros(self.config.out_dim(Group::K), srcs.len());
        for t in 0..self.config.seq_len {
            let ids: Vec<u32> = srcs.iter().map(|s| s[t]).collect();
            let h = self.run(Group::N, self.embed(&ids)?)?;
            k = self.run(Group::K, BitLanes::concat(&[&h, &k]))?;
        }
        Ok(k)
    }

    fn decode_step(&self, c: &BitLanes, p: &BitLanes, ids: &[u32]) -> Result<(BitLanes, Vec<u32>)> {
        let l = self.run(Group::L, self.embed(ids)?)?;
        let p = self.run(Group::P, BitLanes::concat(&[p, c, &l]))?;
        let m = self.run(Group::M, BitLanes::concat(&[&p, c, &l]))?;
        let classes = self.classes(&m)?;
        Ok((p, classes))
    }

    /// Teacher-forced class predictions for every decoder step.
    pub fn predict(&self, srcs: &[Vec<u32>], dec_in: &[Vec<u32>]) -> Result<Vec<Vec<u32>>> {
        self.check_lengths(dec_in, "decoder input sequence")?;
        if srcs.len() != dec_in.len() {
            return Err(Error::Shape {
                context: "decoder batch",
                expected: srcs.len(),
                actual: dec_in.len(),
            });
        }
        let c = self.encode(srcs)?;
        let mut p = BitLanes::zeros(self.config.out_dim(Group::P), srcs.len());
        let mut out = vec![Vec::with_capacity(self.config.seq_len); srcs.len()];
        for t in 0..self.config.seq_len {
            let ids: Vec<u32> = dec_in.iter().map(|s| s[t]).collect();
            let (pn, classes) = self.decode_step(&c, &p, &ids)?;
            p = pn;
            for (o, c) in out.iter_mut().zip(classes) {
                o.push(c);
            }
        }
        Ok(out)
    }

    /// Greedy decoding from BOS; each output stops before the first EOS or
    /// after `max_len` tokens.
    pub fn generate_batch(&self, srcs: &[Vec<u32>], max_len: usize) -> Result<Vec<Vec<u32>>> {
        let c = self.encode(srcs)?;
        let mut p = BitLanes::zeros(self.config.out_dim(Group::P), srcs.len());
        let mut tokens = vec![BOS; srcs.len()];
        let mut out = vec![Vec::new(); srcs.len()];
        let mut done = vec![false; srcs.len()];
        for _ in 0..max_len {
            let (pn, classes) = self.decode_step(&c, &p, &tokens)?;
            p = pn;
            for (s, &next) in classes.iter().enumerate() {
                if !done[s] {
                    if next == EOS {
                        done[s] = true;
                    } else {
                        out[s].push(next);
                    }
                }
            }
            tokens = classes;
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

/// Greedy hard-mode generation for one source sequence.
pub fn hard_forward_seq(model: &CollapsedModel, src: &[u32]) -> Result<Vec<u32>> {
    Ok(model.generate_batch(&[src.to_vec()], model.config.seq_len)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::HiddenInit;
    use crate::layer::{SoftLogicLayer, GATES};
    use crate::model::tests::tiny_config;
    use crate::model::group_sum;
    use crate::NodeInit;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(in_dim: usize, width: usize, rng: &mut ChaCha8Rng) -> CollapsedLogicLayer {
        let conn_a: Vec<u32> = (0..width).map(|_| rng.random_range(0..in_dim as u32)).collect();
        let conn_b: Vec<u32> = conn_a
            .iter()
            .map(|&a| loop {
                let b = rng.random_range(0..in_dim as u32);
                if b != a {
                    break b;
                }
            })
            .collect();
        let gates = (0..width).map(|_| GateKind::from_index(rng.random_range(0..16)).unwrap()).collect();
        CollapsedLogicLayer::from_parts(in_dim, conn_a, conn_b, gates).unwrap()
    }

    #[test]
    fn packed_matches_scalar_on_random_lanes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let layer = random_layer(12, 40, &mut rng);
            let lanes: Vec<Vec<bool>> = (0..200).map(|_| (0..12).map(|_| rng.random()).collect()).collect();
            let out = eval_bitpacked(&layer, &BitLanes::from_lanes(&lanes).unwrap()).unwrap();
            for (l, bits) in lanes.iter().enumerate() {
                assert_eq!(out.lane(l), layer.forward_hard(bits).unwrap());
            }
        }
    }

    #[test]
    fn single_lane_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = random_layer(5, 30, &mut rng);
        let bits: Vec<bool> = (0..5).map(|_| rng.random()).collect();
        let out = eval_bitpacked(&layer, &BitLanes::from_lanes(std::slice::from_ref(&bits)).unwrap()).unwrap();
        assert_eq!(out.lane(0), layer.forward_hard(&bits).unwrap());
    }

    #[test]
    fn padding_lanes_stay_zero() {
        let layer = CollapsedLogicLayer::from_parts(2, vec![0, 0], vec![1, 1], vec![GateKind::TRUE, GateKind::NOR]).unwrap();
        let out = eval_bitpacked(&layer, &BitLanes::zeros(2, 70)).unwrap();
        assert_eq!(out.feature(0), &[u64::MAX, 0b11_1111]);
        assert_eq!(out.feature(1), &[u64::MAX, 0b11_1111]);
    }

    #[test]
    fn group_score_examples() {
        let b = |v: &[u8]| v.iter().map(|&x| x == 1).collect::<Vec<bool>>();
        assert_eq!(hard_group_scores(&b(&[1, 1, 0, 0, 0, 0]), 3).unwrap(), (vec![2, 0], 0));
        assert_eq!(hard_group_scores(&b(&[0; 6]), 3).unwrap(), (vec![0, 0], 0));
        assert_eq!(hard_group_scores(&b(&[0, 1, 1, 1]), 2).unwrap(), (vec![1, 2], 1));
        assert!(hard_group_scores(&b(&[0; 5]), 3).is_err());
    }

    proptest! {
        #[test]
        fn popcount_argmax_matches_scaled_group_sum(bits in prop::collection::vec(any::<bool>(), 24), tau in 0.01f64..50.0) {
            let (_, class) = hard_group_scores(&bits, 4).unwrap();
            let v: Vec<f64> = bits.iter().map(|&b| b as u8 as f64).collect();
            let soft = group_sum(&v, 4, tau).unwrap();
            prop_assert_eq!(crate::model::argmax(&soft), class);
        }
    }

    /// Soft model whose logits are one-hot with huge margins and whose
    /// embeddings saturate the sigmoid, so soft evaluation is exactly Boolean.
    fn saturated_model(seed: u64) -> Seq2SeqModel {
        let cfg = ModelConfig {
            hidden_init: HiddenInit::Zero,
            node_init: NodeInit::Gaussian { sigma: 1.0 },
            seeds: crate::config::Seeds::default().offset(seed),
            ..tiny_config()
        };
        let mut model = Seq2SeqModel::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in model.tensors_mut().into_iter().skip(1) {
            for row in t.chunks_exact_mut(GATES) {
                let pick = rng.random_range(0..GATES);
                for (i, v) in row.iter_mut().enumerate() {
                    *v = if i == pick { 1e3 } else { -1e3 };
                }
            }
        }
        for w in model.embedding_mut().weights_mut() {
            *w = if *w >= 0.0 { 800.0 } else { -800.0 };
        }
        model
    }

    #[test]
    fn collapsed_generation_matches_saturated_soft_model() {
        for seed in 0..8 {
            let model = saturated_model(seed);
            let cm = collapse_model(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let srcs: Vec<Vec<u32>> = (0..6).map(|_| (0..3).map(|_| rng.random_range(0..8)).collect()).collect();
            assert_eq!(cm.generate_batch(&srcs, 3).unwrap(), model.generate_batch(&srcs, 3).unwrap());
            assert_eq!(cm.predict(&srcs, &srcs).unwrap(), model.predict(&srcs, &srcs).unwrap());
            for s in &srcs {
                assert_eq!(hard_forward_seq(&cm, s).unwrap(), hard_forward_seq(&cm, s).unwrap());
            }
        }
    }

    #[test]
    fn collapse_keeps_one_hot_gates() {
        let model = saturated_model(3);
        let cm = collapse_model(&model);
        assert_eq!(cm, collapse_model(&model));
        for (sg, cg) in model.groups().iter().zip(cm.groups()) {
            for (sl, cl) in sg.layers().iter().zip(cg) {
                for (j, g) in cl.gates().iter().enumerate() {
                    assert_eq!(sl.logits()[j * GATES + g.index() as usize], 1e3);
                }
            }
        }
        assert_eq!(cm.gate_count(), model.config().accounting().gate_count);
        assert_eq!(cm.gate_histogram().iter().sum::<usize>(), cm.gate_count());
    }

    #[test]
    fn soft_layer_collapse_packs_like_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let soft = SoftLogicLayer::new(9, 33, 5, 6, NodeInit::Gaussian { sigma: 2.0 }).unwrap();
        let hard = soft.collapse();
        let lanes: Vec<Vec<bool>> = (0..65).map(|_| (0..9).map(|_| rng.random()).collect()).collect();
        let out = eval_bitpacked(&hard, &BitLanes::from_lanes(&lanes).unwrap()).unwrap();
        for (l, bits) in lanes.iter().enumerate() {
            assert_eq!(out.lane(l), hard.forward_hard(bits).unwrap());
        }
    }
}
