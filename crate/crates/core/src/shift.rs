//! Accuracy versus shift factor.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::run::{DataConfig, Dataset, RunConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftResult {
    pub shift: usize,
    pub accuracy: f64,
}

/// Trains one model per shift from `base` and reports validation accuracy.
/// Runs go to `out_dir/shift-<f>`; existing runs there are resumed.
pub fn shift_bench(base: &RunConfig, shifts: &[usize], base_dir: &Path, out_dir: &Path) -> Result<Vec<ShiftResult>> {
    if shifts.is_empty() {
        return Err(Error::Empty("shift list"));
    }
    let DataConfig::Shift {
        train_sequences,
        val_sequences,
        corpus,
        decoder_input,
        ..
    } = &base.data
    else {
        return Err(Error::config("data.task", "shift-bench needs a shift task config"));
    };
    for &f in shifts {
        if f >= base.model.seq_len {
            return Err(Error::config(
                "shifts",
                format!("shift {f} is not below seq_len {}", base.model.seq_len),
            ));
        }
    }
    let mut results = Vec::with_capacity(shifts.len());
    for &shift in shifts {
        let mut cfg = base.clone();
        cfg.data = DataConfig::Shift {
            shift,
            train_sequences: *train_sequences,
            val_sequences: *val_sequences,
            corpus: corpus.clone(),
            decoder_input: *decoder_input,
        };
        let data = Dataset::load(&cfg, base_dir)?;
        let mut trainer = Trainer::new(cfg, data, out_dir.join(format!("shift-{shift}")))?;
        trainer.run()?;
        results.push(ShiftResult {
            shift,
            accuracy: trainer.validate_now()?.accuracy,
        });
    }
    Ok(results)
}

pub fn to_csv(results: &[ShiftResult]) -> String {
    let mut s = String::from("shift,accuracy\n");
    for r in results {
        let _ = writeln!(s, "{},{:.6}", r.shift, r.accuracy);
    }
    s
}
