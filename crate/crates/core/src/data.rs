//! Tokenization, vocabularies, fixed-length pairs, batching and metrics.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits into maximal alphanumeric runs; every other
/// non-whitespace character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Corrupt(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    /// Frequency-ranked vocabulary of at most `capacity` entries; ties are
    /// broken lexicographically.
    pub fn build<'a, I, S>(sentences: I, capacity: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        if capacity < 5 {
            return Err(Error::config("vocab_size", format!("must be at least 5, got {capacity}")));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for sentence in sentences {
            for tok in sentence {
                any = true;
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Empty("vocabulary corpus"));
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(capacity - SPECIALS.len()).map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Specials plus `w4 .. w{V-1}`; used by the synthetic tasks.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < 5 {
            return Err(Error::config("vocab_size", format!("must be at least 5, got {size}")));
        }
        Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain((SPECIALS.len()..size).map(|i| format!("w{i}")))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens; unknown ids become `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK as usize]).to_string())
            .collect()
    }

    /// One token per line, line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Corrupt(format!(
                "{}: vocabulary must start with {SPECIALS:?}",
                path.display()
            )));
        }
        Self::from_tokens(tokens)
    }
}

/// One fixed-length training example.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PreparedPair {
    pub src: Vec<u32>,
    /// Decoder input at each step.
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
}

impl PreparedPair {
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }

    /// `true` where the target is not PAD.
    pub fn target_mask(&self) -> Vec<bool> {
        self.tgt_out.iter().map(|&t| t != PAD).collect()
    }
}

/// Truncates to `len − 1` ids, appends EOS and right-pads to `len`.
pub fn fix_length(ids: &[u32], len: usize) -> Vec<u32> {
    let keep = ids.len().min(len.saturating_sub(1));
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&ids[..keep]);
    if len > 0 {
        out.push(EOS);
    }
    out.resize(len, PAD);
    out
}

/// Encodes a translation pair; `None` if either side is empty or `len` is 0.
pub fn prepare_pair<S: AsRef<str>>(src: &[S], tgt: &[S], vocab: &Vocab, len: usize) -> Option<PreparedPair> {
    if src.is_empty() || tgt.is_empty() || len == 0 {
        return None;
    }
    let src = fix_length(&vocab.encode(src), len);
    let tgt_out = fix_length(&vocab.encode(tgt), len);
    let mut tgt_in = Vec::with_capacity(len);
    tgt_in.push(BOS);
    tgt_in.extend_from_slice(&tgt_out[..len - 1]);
    Some(PreparedPair { src, tgt_in, tgt_out })
}

/// Target is the input delayed by `shift` positions behind PADs.
pub fn make_shift_sample(tokens: &[u32], shift: usize) -> Result<(Vec<u32>, Vec<u32>)> {
    let s = tokens.len();
    if shift >= s {
        return Err(Error::config("shift", format!("must be below the sequence length {s}, got {shift}")));
    }
    let mut target = vec![PAD; shift];
    target.extend_from_slice(&tokens[..s - shift]);
    Ok((tokens.to_vec(), target))
}

/// Shift-task pair. The decoder reads the input stream itself, so the task
/// measures how far back the decoder state can carry a token.
pub fn shift_pair(tokens: &[u32], shift: usize) -> Result<PreparedPair> {
    let (input, target) = make_shift_sample(tokens, shift)?;
    Ok(PreparedPair {
        src: input.clone(),
        tgt_in: input,
        tgt_out: target,
    })
}

/// Uniform token stream over the non-special ids `4 .. vocab`.
pub fn synthetic_stream<R: Rng>(len: usize, vocab: usize, rng: &mut R) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(SPECIALS.len() as u32..vocab as u32)).collect()
}

/// Cuts a token stream into non-overlapping windows of `seq_len` and builds
/// one shift pair per window.
pub fn shift_pairs(stream: &[u32], seq_len: usize, shift: usize) -> Result<Vec<PreparedPair>> {
    stream.chunks_exact(seq_len).map(|w| shift_pair(w, shift)).collect()
}

/// Greedy token-budget batching. Each batch holds at least one pair and,
/// beyond that, at most `budget` non-pad target tokens.
pub fn batch_by_tokens(pairs: &[PreparedPair], budget: usize) -> Vec<Vec<PreparedPair>> {
    let mut batches = Vec::new();
    let mut cur: Vec<PreparedPair> = Vec::new();
    let mut used = 0;
    for p in pairs {
        let n = p.target_tokens();
        if !cur.is_empty() && used + n > budget {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        used += n;
        cur.push(p.clone());
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Same as [`batch_by_tokens`] after shuffling the pair order.
pub fn shuffled_batches<R: Rng>(pairs: &[PreparedPair], budget: usize, rng: &mut R) -> Vec<Vec<PreparedPair>> {
    let mut order: Vec<PreparedPair> = pairs.to_vec();
    order.shuffle(rng);
    batch_by_tokens(&order, budget)
}

/// Fraction of non-pad target positions predicted correctly.
pub fn token_accuracy(preds: &[Vec<u32>], targets: &[Vec<u32>]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::Shape {
            context: "prediction batch",
            expected: targets.len(),
            actual: preds.len(),
        });
    }
    let mut hit = 0usize;
    let mut total = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        for (i, &tt) in t.iter().enumerate() {
            if tt == PAD {
                continue;
            }
            total += 1;
            if p.get(i) == Some(&tt) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("non-pad target positions"));
    }
    Ok(hit as f64 / total as f64)
}

/// `exp` of the mean negative log-likelihood over non-pad targets.
/// `target_probs[i][t]` is the probability assigned to `targets[i][t]`.
pub fn perplexity(target_probs: &[Vec<f64>], targets: &[Vec<u32>]) -> Result<f64> {
    let mut nll = 0.0;
    let mut total = 0usize;
    for (p, t) in target_probs.iter().zip(targets) {
        for (&pp, &tt) in p.iter().zip(t) {
            if tt != PAD {
                nll -= pp.max(1e-12).ln();
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("non-pad target positions"));
    }
    Ok((nll / total as f64).exp())
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Corpus BLEU (0–100) with clipped 1–4-gram precisions and a brevity
/// penalty. No unigram match gives 0; a higher order with no match uses
/// `1 / (total + 1)`.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Empty("BLEU corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Shape {
            context: "BLEU references",
            expected: hyps.len(),
            actual: refs.len(),
        });
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            if matches[i] == 0 {
                (1.0 / (totals[i] + 1) as f64).ln()
            } else {
                (matches[i] as f64 / totals[i] as f64).ln()
            }
        })
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Strips everything from the first EOS on, plus PADs.
pub fn strip_target(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().take_while(|&t| t != EOS).filter(|&t| t != PAD).collect()
}

/// Reads `source<TAB>target` lines, skipping blank lines.
pub fn load_parallel_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::Corrupt(format!("{}:{}: expected a tab-separated pair", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The cat sat."), toks("the cat sat ."));
        assert_eq!(tokenize("don't"), toks("don ' t"));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Grüße, 42x!"), toks("grüße , 42x !"));
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(s in "\\PC{0,40}") {
            let t = tokenize(&s);
            prop_assert_eq!(tokenize(&t.join(" ")), t);
        }
    }

    #[test]
    fn vocab_examples() {
        let corpus = [toks("a a b")];
        let v = Vocab::build(corpus.iter().map(|s| s.as_slice()), 6).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!((v.id("<pad>"), v.id("<bos>"), v.id("<eos>"), v.id("<unk>")), (0, 1, 2, 3));
        assert_eq!((v.id("a"), v.id("b")), (4, 5));
        assert_eq!(v.id("zebra"), UNK);
        assert_eq!(v, Vocab::build(corpus.iter().map(|s| s.as_slice()), 6).unwrap());
        assert!(Vocab::build(corpus.iter().map(|s| s.as_slice()), 4).is_err());
    }

    #[test]
    fn vocab_ties_are_lexicographic_and_capped() {
        let corpus = [toks("d c b a c d")];
        let v = Vocab::build(corpus.iter().map(|s| s.as_slice()), 6).unwrap();
        assert_eq!(v.decode(&[4, 5]), toks("c d"));
        assert_eq!(v.id("a"), UNK);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::synthetic(9).unwrap();
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        std::fs::write(&path, "x\ny\n").unwrap();
        assert!(Vocab::load(&path).is_err());
    }

    #[test]
    fn encode_decode_round_trip_except_unk() {
        let corpus = [toks("the cat sat on the mat")];
        let v = Vocab::build(corpus.iter().map(|s| s.as_slice()), 20).unwrap();
        let t = toks("the dog sat");
        assert_eq!(v.decode(&v.encode(&t)), toks("the <unk> sat"));
    }

    #[test]
    fn prepare_pair_examples() {
        let v = Vocab::synthetic(40).unwrap();
        let long: Vec<String> = (4..24).map(|i| format!("w{i}")).collect();
        let p = prepare_pair(&long, &long[..3], &v, 16).unwrap();
        assert_eq!(p.src[..15], (4..19).collect::<Vec<u32>>()[..]);
        assert_eq!(p.src[15], EOS);
        assert_eq!(p.tgt_out[..4], [4, 5, 6, EOS]);
        assert!(p.tgt_out[4..].iter().all(|&t| t == PAD));
        assert_eq!(p.tgt_in[0], BOS);
        assert_eq!(p.tgt_in[1..], p.tgt_out[..15]);
        assert!(prepare_pair::<String>(&[], &long, &v, 16).is_none());
        let p = prepare_pair(&long[..3], &long[..3], &v, 16).unwrap();
        assert_eq!(p.src.iter().filter(|&&t| t == PAD).count(), 12);
    }

    proptest! {
        #[test]
        fn prepared_pairs_are_well_formed(src in prop::collection::vec(0u32..60, 0..30), tgt in prop::collection::vec(0u32..60, 0..30), len in 1usize..20) {
            let v = Vocab::synthetic(50).unwrap();
            let s: Vec<String> = src.iter().map(|i| format!("w{i}")).collect();
            let t: Vec<String> = tgt.iter().map(|i| format!("w{i}")).collect();
            match prepare_pair(&s, &t, &v, len) {
                None => prop_assert!(src.is_empty() || tgt.is_empty()),
                Some(p) => {
                    for seq in [&p.src, &p.tgt_in, &p.tgt_out] {
                        prop_assert_eq!(seq.len(), len);
                        prop_assert!(seq.iter().all(|&i| (i as usize) < v.len()));
                    }
                    prop_assert!(p.target_tokens() > 0);
                    prop_assert!(p.src.contains(&EOS) && p.tgt_out.contains(&EOS));
                }
            }
        }
    }

    #[test]
    fn shift_examples() {
        let v = Vocab::build([toks("the cat sat on mat")].iter().map(|s| s.as_slice()), 20).unwrap();
        let input = v.encode(&toks("the cat sat on the mat"));
        let (i, t) = make_shift_sample(&input, 2).unwrap();
        assert_eq!(i, input);
        assert_eq!(v.decode(&t), toks("<pad> <pad> the cat sat on"));
        assert_eq!(make_shift_sample(&input, 0).unwrap().1, input);
        let (_, t) = make_shift_sample(&input, 5).unwrap();
        assert_eq!(t, [vec![PAD; 5], vec![input[0]]].concat());
        assert!(make_shift_sample(&input, 6).is_err());
    }

    proptest! {
        #[test]
        fn shift_pad_prefix_equals_shift(tokens in prop::collection::vec(4u32..50, 1..16), f in 0usize..16) {
            prop_assume!(f < tokens.len());
            let (_, t) = make_shift_sample(&tokens, f).unwrap();
            prop_assert_eq!(t.iter().take_while(|&&x| x == PAD).count(), f);
            prop_assert_eq!(&t[f..], &tokens[..tokens.len() - f]);
        }
    }

    #[test]
    fn batching_examples() {
        let full = PreparedPair {
            src: vec![5; 16],
            tgt_in: vec![5; 16],
            tgt_out: vec![5; 16],
        };
        let pairs = vec![full.clone(); 130];
        let b = batch_by_tokens(&pairs, 1024);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 64, 2]);
        assert_eq!(batch_by_tokens(&pairs[..1], 1024).len(), 1);
    }

    proptest! {
        #[test]
        fn batching_is_a_permutation(lens in prop::collection::vec(1usize..9, 1..60), budget in 8usize..40, seed in any::<u64>()) {
            let pairs: Vec<PreparedPair> = lens.iter().enumerate().map(|(i, &n)| {
                let mut out = vec![4 + i as u32; n];
                out.resize(8, PAD);
                PreparedPair { src: out.clone(), tgt_in: out.clone(), tgt_out: out }
            }).collect();
            let batches = shuffled_batches(&pairs, budget, &mut ChaCha8Rng::seed_from_u64(seed));
            for b in &batches {
                prop_assert!(!b.is_empty());
                let used: usize = b.iter().map(PreparedPair::target_tokens).sum();
                prop_assert!(b.len() == 1 || used <= budget);
            }
            let mut flat: Vec<_> = batches.into_iter().flatten().collect();
            let mut orig = pairs.clone();
            flat.sort_by(|a, b| a.src.cmp(&b.src));
            orig.sort_by(|a, b| a.src.cmp(&b.src));
            prop_assert_eq!(flat, orig);
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(token_accuracy(&[vec![5, 2, 9, 9]], &[vec![5, 7, PAD, PAD]]).unwrap(), 0.5);
        assert_eq!(token_accuracy(&[vec![5, 7]], &[vec![5, 7]]).unwrap(), 1.0);
        assert!(token_accuracy(&[vec![5]], &[vec![PAD]]).is_err());
    }

    #[test]
    fn random_accuracy_is_near_chance() {
        let v = 16_000u32;
        let n = 1_000_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let preds: Vec<u32> = (0..n).map(|_| rng.random_range(4..v)).collect();
        let targets: Vec<u32> = (0..n).map(|_| rng.random_range(4..v)).collect();
        let acc = token_accuracy(&[preds], &[targets]).unwrap();
        let p = 1.0 / (v - 4) as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * sigma, "acc {acc}");
    }

    #[test]
    fn perplexity_examples() {
        let u = 1.0 / 16_000.0;
        let ppl = perplexity(&[vec![u, u, u]], &[vec![4, 5, 6]]).unwrap();
        assert!((ppl - 16_000.0).abs() < 1e-6);
        assert_eq!(perplexity(&[vec![1.0, 0.3]], &[vec![4, PAD]]).unwrap(), 1.0);
        let ppl = perplexity(&[vec![0.5, 0.25]], &[vec![4, 5]]).unwrap();
        assert!((ppl - (0.125f64).powf(-0.5)).abs() < 1e-12);
        assert!(perplexity(&[vec![0.5]], &[vec![PAD]]).is_err());
    }

    #[test]
    fn bleu_examples() {
        let r = vec![vec!["a", "b", "c", "d", "e"], vec!["x", "y", "z", "w"]];
        assert!((corpus_bleu(&r, &r).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(corpus_bleu(&[vec!["q", "r"]], &[vec!["a", "b"]]).unwrap(), 0.0);
        // p = 3/4, 2/3, 1/2 and a smoothed 4-gram 1/(1+1); no brevity penalty
        let got = corpus_bleu(&[vec!["a", "b", "c", "d"]], &[vec!["a", "b", "c", "e"]]).unwrap();
        let want = 100.0 * (0.75f64 * (2.0 / 3.0) * 0.5 * 0.5).powf(0.25);
        assert!((got - want).abs() < 1e-9);
        assert!((got - 59.46).abs() < 0.01);
        assert!(corpus_bleu::<u32>(&[], &[]).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        let got = corpus_bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4, 5, 6, 7, 8]]).unwrap();
        assert!((got - 100.0 * (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn tsv_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        std::fs::write(&path, "a b\tx y\n\nc\tz\n").unwrap();
        assert_eq!(load_parallel_tsv(&path).unwrap().len(), 2);
        std::fs::write(&path, "no tab here\n").unwrap();
        assert!(load_parallel_tsv(&path).is_err());
    }
}
