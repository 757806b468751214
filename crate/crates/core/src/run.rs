//! Run configuration, dataset assembly and the training loop.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TrainState};
use crate::config::{ModelConfig, Seeds};
use crate::data::{self, PreparedPair, Vocab};
use crate::error::{Error, Result};
use crate::inference::CollapsedModel;
use crate::model::{argmax, Pass, Seq2SeqModel};
use crate::rng;
use crate::train::{
    smoothed_cross_entropy, AdamW, GradStats, LossConfig, OptimizerConfig, PlateauScheduler, SchedulerConfig,
};

/// Where training and evaluation pairs come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Delayed copy of a token stream; `shift = 0` is plain copying. The
    /// stream is uniform synthetic tokens unless `corpus` names a text file.
    Shift {
        shift: usize,
        train_sequences: usize,
        val_sequences: usize,
        #[serde(default)]
        corpus: Option<PathBuf>,
        #[serde(default)]
        decoder_input: DecoderInput,
    },
    /// Tab-separated parallel corpus.
    Translation { path: PathBuf, val_fraction: f64 },
}

/// What the decoder reads at each step of a shift task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    /// The input stream itself; the target must be recalled from decoder state.
    #[default]
    Source,
    /// BOS followed by the target; the target must be recalled from the context.
    ShiftedTarget,
}

impl DataConfig {
    /// Whether decoding starts from BOS and feeds back its own outputs.
    pub fn is_generative(&self) -> bool {
        matches!(self, DataConfig::Translation { .. })
    }
}

fn default_batch_tokens() -> usize {
    1024
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    pub data: DataConfig,
    /// Token budget per batch, counted over non-pad targets.
    #[serde(default = "default_batch_tokens")]
    pub batch_tokens: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.scheduler.validate()?;
        match &self.data {
            DataConfig::Shift {
                shift,
                train_sequences,
                val_sequences,
                ..
            } => {
                if *shift >= self.model.seq_len {
                    return Err(Error::config(
                        "data.shift",
                        format!("must be below seq_len {}, got {shift}", self.model.seq_len),
                    ));
                }
                if *train_sequences == 0 || *val_sequences == 0 {
                    return Err(Error::config("data", "train_sequences and val_sequences must be > 0"));
                }
            }
            DataConfig::Translation { val_fraction, .. } => {
                if !(*val_fraction > 0.0 && *val_fraction < 1.0) {
                    return Err(Error::config("data.val_fraction", "must be in (0,1)"));
                }
            }
        }
        if self.batch_tokens < self.model.seq_len {
            return Err(Error::config("batch_tokens", "must be at least seq_len"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be > 0"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be > 0"));
        }
        Ok(())
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        let d = |tag| rng::derive_seed(seed, &[tag]);
        self.model.seeds = Seeds {
            connectivity: d(1),
            init: d(2),
            hidden_noise: d(3),
            gumbel: d(4),
            dropout: d(5),
            data: d(6),
        };
    }
}

/// Vocabulary plus train and validation pairs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<PreparedPair>,
    pub val: Vec<PreparedPair>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Dataset {
    /// Builds the dataset described by `cfg`; relative paths are resolved
    /// against `base_dir`.
    pub fn load(cfg: &RunConfig, base_dir: &Path) -> Result<Self> {
        let m = &cfg.model;
        let seed = m.seeds.data;
        match &cfg.data {
            DataConfig::Shift {
                shift,
                train_sequences,
                val_sequences,
                corpus,
                decoder_input,
            } => {
                let total = train_sequences + val_sequences;
                let (vocab, stream) = match corpus {
                    None => {
                        let mut r = rng::stream(seed, &[0x5D]);
                        let stream = data::synthetic_stream(total * m.seq_len, m.vocab_size, &mut r);
                        (Vocab::synthetic(m.vocab_size)?, stream)
                    }
                    Some(path) => {
                        let path = resolve(base_dir, path);
                        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                        let sentences: Vec<Vec<String>> = text.lines().map(data::tokenize).collect();
                        let vocab = Vocab::build(sentences.iter().map(Vec::as_slice), m.vocab_size)?;
                        let stream: Vec<u32> = sentences.iter().flat_map(|s| vocab.encode(s)).collect();
                        (vocab, stream)
                    }
                };
                let mut pairs = data::shift_pairs(&stream, m.seq_len, *shift)?;
                if *decoder_input == DecoderInput::ShiftedTarget {
                    for p in &mut pairs {
                        p.tgt_in = std::iter::once(data::BOS).chain(p.tgt_out[..m.seq_len - 1].iter().copied()).collect();
                    }
                }
                if pairs.len() <= *val_sequences {
                    return Err(Error::config(
                        "data",
                        format!("corpus yields {} windows, need more than {val_sequences}", pairs.len()),
                    ));
                }
                let val = pairs.split_off(pairs.len() - val_sequences);
                pairs.truncate(*train_sequences);
                Ok(Dataset {
                    vocab,
                    train: pairs,
                    val,
                })
            }
            DataConfig::Translation { path, val_fraction } => {
                let path = resolve(base_dir, path);
                let lines = data::load_parallel_tsv(&path)?;
                let tokenized: Vec<(Vec<String>, Vec<String>)> =
                    lines.iter().map(|(s, t)| (data::tokenize(s), data::tokenize(t))).collect();
                let vocab = Vocab::build(
                    tokenized.iter().flat_map(|(s, t)| [s.as_slice(), t.as_slice()]),
                    m.vocab_size,
                )?;
                let mut pairs: Vec<PreparedPair> = tokenized
                    .iter()
                    .filter_map(|(s, t)| data::prepare_pair(s, t, &vocab, m.seq_len))
                    .collect();
                if pairs.len() < 2 {
                    return Err(Error::Empty("usable translation pairs"));
                }
                use rand::seq::SliceRandom;
                pairs.shuffle(&mut rng::stream(seed, &[0x5E]));
                let n_val = ((pairs.len() as f64 * val_fraction).round() as usize).clamp(1, pairs.len() - 1);
                let val = pairs.split_off(pairs.len() - n_val);
                Ok(Dataset {
                    vocab,
                    train: pairs,
                    val,
                })
            }
        }
    }
}

/// Any model that can produce teacher-forced and greedy predictions.
pub enum Evaluated<'a> {
    Soft(&'a Seq2SeqModel),
    Hard(&'a CollapsedModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub bleu: f64,
    /// Plain cross-entropy; `None` in hard mode.
    pub loss: Option<f64>,
    pub perplexity: Option<f64>,
    pub tokens: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "tokens: {}", self.tokens)?;
        writeln!(f, "accuracy: {:.4}", self.accuracy)?;
        writeln!(f, "bleu: {:.2}", self.bleu)?;
        match self.perplexity {
            Some(p) => write!(f, "ppl: {p:.4}"),
            None => write!(f, "ppl: n/a"),
        }
    }
}

const EVAL_CHUNK: usize = 256;

/// Teacher-forced accuracy and perplexity, plus BLEU over decoded outputs:
/// greedy generation when `generative`, teacher-forced argmax otherwise.
pub fn evaluate(model: Evaluated<'_>, pairs: &[PreparedPair], generative: bool) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut preds = Vec::with_capacity(pairs.len());
    let mut decoded = Vec::with_capacity(pairs.len());
    let mut target_probs = Vec::new();
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let src: Vec<Vec<u32>> = chunk.iter().map(|p| p.src.clone()).collect();
        let dec: Vec<Vec<u32>> = chunk.iter().map(|p| p.tgt_in.clone()).collect();
        let max_len = src[0].len();
        let chunk_preds = match &model {
            Evaluated::Soft(m) => {
                let probs = m.forward_eval(&src, &dec)?;
                for (s, p) in chunk.iter().enumerate() {
                    target_probs.push(
                        p.tgt_out
                            .iter()
                            .enumerate()
                            .map(|(t, &y)| probs[t].get(y as usize, s))
                            .collect::<Vec<f64>>(),
                    );
                }
                let chunk_preds: Vec<Vec<u32>> = (0..chunk.len())
                    .map(|s| probs.iter().map(|p| argmax(&p.sample(s)) as u32).collect())
                    .collect();
                if generative {
                    decoded.extend(m.generate_batch(&src, max_len)?);
                }
                chunk_preds
            }
            Evaluated::Hard(m) => {
                if generative {
                    decoded.extend(m.generate_batch(&src, max_len)?);
                }
                m.predict(&src, &dec)?
            }
        };
        if !generative {
            for (p, pair) in chunk_preds.iter().zip(chunk) {
                decoded.push(
                    p.iter()
                        .zip(&pair.tgt_out)
                        .filter(|(_, &t)| t != data::PAD)
                        .map(|(&x, _)| x)
                        .collect(),
                );
            }
        }
        preds.extend(chunk_preds);
    }
    let targets: Vec<Vec<u32>> = pairs.iter().map(|p| p.tgt_out.clone()).collect();
    let refs: Vec<Vec<u32>> = targets.iter().map(|t| data::strip_target(t)).collect();
    let decoded: Vec<Vec<u32>> = if generative {
        decoded
    } else {
        decoded.iter().map(|d| data::strip_target(d)).collect()
    };
    let perplexity = if target_probs.is_empty() {
        None
    } else {
        Some(data::perplexity(&target_probs, &targets)?)
    };
    Ok(EvalReport {
        accuracy: data::token_accuracy(&preds, &targets)?,
        bleu: data::corpus_bleu(&decoded, &refs)?,
        loss: perplexity.map(f64::ln),
        perplexity,
        tokens: pairs.iter().map(PreparedPair::target_tokens).sum(),
    })
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub aux_w: f64,
    pub acc: f64,
    pub ppl: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "step,train_loss,val_loss,lr,aux_w,acc,ppl";

    fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:e},{:e},{:.6},{:.6}\n",
            self.step, self.train_loss, self.val_loss, self.lr, self.aux_w, self.acc, self.ppl
        )
    }
}

pub const MODEL_FILE: &str = "model.rdlg";
pub const STATE_FILE: &str = "state.rdlgt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const GRAD_STATS_FILE: &str = "grad_stats.csv";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Result of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_stats: GradStats,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Seq2SeqModel,
    pub state: TrainState,
    data: Dataset,
    out_dir: PathBuf,
    epoch: Option<(u64, Vec<Vec<PreparedPair>>)>,
    pub history: Vec<MetricsRow>,
}

impl Trainer {
    /// Starts a fresh run, or resumes one if `out_dir` holds a checkpoint
    /// written with the same model configuration.
    pub fn new(config: RunConfig, data: Dataset, out_dir: PathBuf) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let model_path = out_dir.join(MODEL_FILE);
        let state_path = out_dir.join(STATE_FILE);
        let (model, state) = if model_path.exists() && state_path.exists() {
            let model = checkpoint::load_model(&model_path)?;
            if model.config() != &config.model {
                return Err(Error::config(
                    "output_dir",
                    format!("{} holds a run with a different model config", out_dir.display()),
                ));
            }
            (model, checkpoint::load_train_state(&state_path)?)
        } else {
            let model = Seq2SeqModel::new(config.model.clone())?;
            let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
            let state = TrainState {
                step: 0,
                optimizer: AdamW::new(config.optimizer.clone(), &shapes),
                scheduler: PlateauScheduler::new(config.scheduler.clone()),
                last_eval_step: 0,
                loss_sum: 0.0,
                loss_count: 0,
            };
            (model, state)
        };
        data.vocab.save(&out_dir.join(VOCAB_FILE))?;
        let mut t = Trainer {
            config,
            model,
            state,
            data,
            out_dir,
            epoch: None,
            history: Vec::new(),
        };
        t.trim_logs()?;
        Ok(t)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Drops log rows written after the checkpoint being resumed from.
    fn trim_logs(&mut self) -> Result<()> {
        let step = self.state.step;
        for (file, header) in [(METRICS_FILE, MetricsRow::HEADER), (GRAD_STATS_FILE, GradStats::CSV_HEADER)] {
            let path = self.out_dir.join(file);
            let kept: String = match fs::read_to_string(&path) {
                Ok(text) => text
                    .lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
                    .map(|l| format!("{l}\n"))
                    .collect(),
                Err(_) => String::new(),
            };
            fs::write(&path, format!("{header}\n{kept}")).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn append(&self, file: &str, text: &str) -> Result<()> {
        let path = self.out_dir.join(file);
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    fn batch_for(&mut self, step: u64) -> Vec<PreparedPair> {
        let per_epoch = data::batch_by_tokens(&self.data.train, self.config.batch_tokens).len() as u64;
        let epoch = step / per_epoch;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut r = rng::stream(self.config.model.seeds.data, &[0xB7, epoch]);
            self.epoch = Some((epoch, data::shuffled_batches(&self.data.train, self.config.batch_tokens, &mut r)));
        }
        let batches = &self.epoch.as_ref().unwrap().1;
        batches[(step % per_epoch) as usize % batches.len()].clone()
    }

    fn dump_state(&self, what: &str, detail: serde_json::Value) -> Error {
        let path = self.out_dir.join("nan_dump.json");
        let body = serde_json::json!({
            "step": self.state.step,
            "lr": self.state.optimizer.lr,
            "what": what,
            "detail": detail,
        });
        let _ = fs::write(&path, serde_json::to_string_pretty(&body).unwrap_or_default());
        let _ = checkpoint::save_model(&self.model, &self.out_dir.join("nan_model.rdlg"));
        Error::NonFinite(format!(
            "{what} at step {}; state dumped to {}",
            self.state.step,
            path.display()
        ))
    }

    /// One teacher-forced optimizer step.
    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.state.step;
        let batch = self.batch_for(step);
        let src: Vec<Vec<u32>> = batch.iter().map(|p| p.src.clone()).collect();
        let dec: Vec<Vec<u32>> = batch.iter().map(|p| p.tgt_in.clone()).collect();
        let tgt: Vec<Vec<u32>> = batch.iter().map(|p| p.tgt_out.clone()).collect();
        let mut pass = Pass::training(&self.config.model.seeds, step);
        let out = self.model.forward(&src, &dec, &mut pass)?;
        let (ce, grad_scores) = smoothed_cross_entropy(&out.probs, &tgt, self.config.loss.label_smoothing)?;
        let aux_w = self.config.loss.embedding_weight(step);
        let loss = ce + aux_w * out.emb_reg;
        if !loss.is_finite() {
            return Err(self.dump_state(
                "loss",
                serde_json::json!({"ce": ce, "emb_reg": out.emb_reg, "aux_w": aux_w}),
            ));
        }
        let grads = self.model.backward(&out.tape, &grad_scores, aux_w)?;
        if !grads.is_finite() {
            return Err(self.dump_state("gradient", serde_json::json!({"loss": loss})));
        }
        let grad_stats = GradStats::compute(&grads)?;
        self.state.optimizer.step(self.model.tensors_mut(), grads.tensors())?;
        self.state.step += 1;
        self.state.loss_sum += loss;
        self.state.loss_count += 1;
        Ok(StepReport {
            step: self.state.step,
            loss,
            grad_stats,
        })
    }

    pub fn validate_now(&self) -> Result<EvalReport> {
        evaluate(Evaluated::Soft(&self.model), &self.data.val, false)
    }

    pub fn save(&self) -> Result<()> {
        checkpoint::save_model(&self.model, &self.out_dir.join(MODEL_FILE))?;
        checkpoint::save_train_state(&self.state, &self.out_dir.join(STATE_FILE))
    }

    /// Trains until `config.steps` total steps, validating, logging and
    /// checkpointing on the configured cadence.
    pub fn run(&mut self) -> Result<()> {
        if self.state.step == 0 {
            self.save()?;
        }
        while self.state.step < self.config.steps {
            let report = self.step()?;
            let step = report.step;
            if step % self.config.eval_every == 0 {
                let eval = self.validate_now()?;
                let val_loss = eval.loss.unwrap_or(f64::NAN);
                let elapsed = step - self.state.last_eval_step;
                self.state.last_eval_step = step;
                let lr = self.state.optimizer.lr;
                self.state.optimizer.lr = self.state.scheduler.update(val_loss, elapsed, lr);
                let row = MetricsRow {
                    step,
                    train_loss: self.state.loss_sum / self.state.loss_count.max(1) as f64,
                    val_loss,
                    lr,
                    aux_w: self.config.loss.embedding_weight(step),
                    acc: eval.accuracy,
                    ppl: eval.perplexity.unwrap_or(f64::NAN),
                };
                self.state.loss_sum = 0.0;
                self.state.loss_count = 0;
                self.append(METRICS_FILE, &row.csv())?;
                self.append(GRAD_STATS_FILE, &report.grad_stats.csv_rows(step))?;
                self.history.push(row);
            }
            if step % self.config.checkpoint_every == 0 || step == self.config.steps {
                self.save()?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    pub(crate) fn tiny_run() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                dropout: crate::config::DropoutConfig::default(),
                ..tiny_config()
            },
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerConfig {
                patience: 20,
                ..SchedulerConfig::default()
            },
            data: DataConfig::Shift {
                shift: 1,
                train_sequences: 40,
                val_sequences: 8,
                corpus: None,
                decoder_input: DecoderInput::Source,
            },
            batch_tokens: 24,
            steps: 12,
            eval_every: 4,
            checkpoint_every: 6,
            output_dir: "unused".into(),
        }
    }

    #[test]
    fn run_config_rejects_bad_fields() {
        let mut c = tiny_run();
        c.model.sizes_m = vec![24, 15];
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "model.sizes_m"));
        let mut c = tiny_run();
        c.data = DataConfig::Shift {
            shift: 3,
            train_sequences: 1,
            val_sequences: 1,
            corpus: None,
            decoder_input: DecoderInput::Source,
        };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "data.shift"));
        let text = serde_json::to_string(&tiny_run()).unwrap().replacen('{', "{\"bogus\":1,", 1);
        assert!(RunConfig::from_json(&text).is_err());
        let back = RunConfig::from_json(&serde_json::to_string(&tiny_run()).unwrap()).unwrap();
        assert_eq!(back, tiny_run());
    }

    #[test]
    fn shift_dataset_shapes() {
        let d = Dataset::load(&tiny_run(), Path::new(".")).unwrap();
        assert_eq!((d.train.len(), d.val.len()), (40, 8));
        for p in d.train.iter().chain(&d.val) {
            assert_eq!(p.tgt_out[0], data::PAD);
            assert_eq!(p.tgt_out[1..], p.src[..2]);
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str, steps: u64| {
            let mut cfg = tiny_run();
            cfg.steps = steps;
            let data = Dataset::load(&cfg, Path::new(".")).unwrap();
            let mut t = Trainer::new(cfg, data, dir.path().join(sub)).unwrap();
            t.run().unwrap();
            (t.model.clone(), fs::read_to_string(dir.path().join(sub).join(METRICS_FILE)).unwrap())
        };
        let (m1, log1) = run("a", 12);
        let (m2, log2) = run("b", 12);
        assert_eq!(m1, m2);
        assert_eq!(log1, log2);
        assert_eq!(log1.lines().count(), 4);
        // resume from the step-6 checkpoint of a 6-step run
        run("c", 6);
        let (m3, log3) = run("c", 12);
        assert_eq!(m3, m1);
        assert_eq!(log3, log1);
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run();
        cfg.steps = 0;
        let data = Dataset::load(&cfg, Path::new(".")).unwrap();
        let mut t = Trainer::new(cfg.clone(), data, dir.path().to_path_buf()).unwrap();
        t.run().unwrap();
        assert_eq!(checkpoint::load_model(&dir.path().join(MODEL_FILE)).unwrap(), Seq2SeqModel::new(cfg.model).unwrap());
        assert_eq!(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap().lines().count(), 1);
    }

    #[test]
    fn translation_dataset_from_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let tsv = dir.path().join("p.tsv");
        fs::write(&tsv, "a b\tx y\nb c\ty z\nc a\tz x\nempty\t\n").unwrap();
        let mut cfg = tiny_run();
        cfg.data = DataConfig::Translation {
            path: "p.tsv".into(),
            val_fraction: 0.3,
        };
        let d = Dataset::load(&cfg, dir.path()).unwrap();
        assert_eq!(d.train.len() + d.val.len(), 3);
        assert!(d.train.iter().all(|p| p.tgt_in[0] == data::BOS));
        cfg.data = DataConfig::Translation {
            path: "missing.tsv".into(),
            val_fraction: 0.3,
        };
        assert!(matches!(Dataset::load(&cfg, dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn eval_rejects_empty_set_and_is_repeatable() {
        let cfg = tiny_run();
        let model = Seq2SeqModel::new(cfg.model.clone()).unwrap();
        assert!(evaluate(Evaluated::Soft(&model), &[], false).is_err());
        let d = Dataset::load(&cfg, Path::new(".")).unwrap();
        let a = evaluate(Evaluated::Soft(&model), &d.val, true).unwrap();
        assert_eq!(a, evaluate(Evaluated::Soft(&model), &d.val, true).unwrap());
        let cm = crate::inference::collapse_model(&model);
        let h = evaluate(Evaluated::Hard(&cm), &d.val, false).unwrap();
        assert!(h.perplexity.is_none());
    }
}
