//! Shared SGD training protocol: shuffled mini-batches and early stopping on
//! validation accuracy.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Rows per forward pass when scoring a whole split.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 64,
            patience: 5,
            max_epochs: 200,
        }
    }
}

/// Shuffled index batches covering `0..n` once.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len() as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Patience-based stopping. Improvement means strictly higher accuracy.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch result; returns true when it is the new best.
    pub fn observe(&mut self, epoch: usize, acc: f64) -> bool {
        if acc > self.best {
            self.best = acc;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// A model that [`fit`] can drive.
pub trait Trainable {
    /// One SGD step on the given training rows; `b` is 1-based within
    /// `total` batches of the epoch.
    fn train_batch(&mut self, batch: &[usize], b: usize, total: usize, rng: &mut crate::rng::Rng) -> Result<()>;
    fn validate(&self) -> Result<f64>;
    fn snapshot(&self) -> Vec<Tensor>;
    fn restore(&mut self, snapshot: &[Tensor]);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_accuracy: f64,
}

/// Epoch loop with patience-based early stopping. The parameters of the best
/// validation epoch are restored before returning.
pub fn fit<T: Trainable + ?Sized>(
    model: &mut T,
    train_len: usize,
    protocol: &Protocol,
    rng: &mut crate::rng::Rng,
) -> Result<FitSummary> {
    if train_len == 0 {
        return Err(Error::Input("empty training split".into()));
    }
    if protocol.max_epochs == 0 || protocol.batch_size == 0 {
        return Err(Error::Config("max_epochs and batch_size must be positive".into()));
    }
    let mut stopper = EarlyStopping::new(protocol.patience);
    let mut best = model.snapshot();
    let mut epochs = 0;
    for epoch in 0..protocol.max_epochs {
        let batches = epoch_batches(train_len, protocol.batch_size, rng);
        let total = batches.len();
        for (i, batch) in batches.iter().enumerate() {
            model.train_batch(batch, i + 1, total, rng)?;
        }
        epochs = epoch + 1;
        let acc = model.validate()?;
        if !acc.is_finite() {
            return Err(Error::State(format!("validation accuracy is {acc} at epoch {epoch}")));
        }
        if stopper.observe(epoch, acc) {
            best = model.snapshot();
        }
        if stopper.should_stop() {
            break;
        }
    }
    model.restore(&best);
    Ok(FitSummary {
        epochs,
        best_epoch: stopper.best_epoch(),
        best_accuracy: stopper.best(),
    })
}

/// Concatenated per-chunk outputs of `f` over the rows of `x`.
pub fn in_chunks(x: &Tensor, mut f: impl FnMut(Tensor) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let d = x.cols();
    for start in (0..x.rows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.rows());
        let chunk = Tensor::new(end - start, d, x.values()[start * d..end * d].to_vec())?;
        out.extend(f(chunk)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn patience_counts_stale_epochs() {
        let mut es = EarlyStopping::new(2);
        assert!(es.observe(0, 0.5));
        assert!(!es.observe(1, 0.5));
        assert!(!es.should_stop());
        assert!(!es.observe(2, 0.4));
        assert!(es.should_stop());
        assert_eq!(es.best_epoch(), 0);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(130, 64, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 64, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..130).collect::<Vec<_>>());
    }

    /// Validation accuracy follows a fixed script; the "parameter" is the
    /// epoch counter so restores are observable.
    struct Scripted {
        script: Vec<f64>,
        epoch: usize,
        steps: usize,
    }

    impl Trainable for Scripted {
        fn train_batch(&mut self, _: &[usize], b: usize, total: usize, _: &mut crate::rng::Rng) -> Result<()> {
            assert!(b >= 1 && b <= total);
            self.steps += 1;
            if b == total {
                self.epoch += 1;
            }
            Ok(())
        }
        fn validate(&self) -> Result<f64> {
            Ok(self.script[self.epoch - 1])
        }
        fn snapshot(&self) -> Vec<Tensor> {
            vec![Tensor::filled(1, 1, self.epoch as f64)]
        }
        fn restore(&mut self, s: &[Tensor]) {
            self.epoch = s[0].values()[0] as usize;
        }
    }

    #[test]
    fn fit_stops_on_patience_and_restores_best() {
        let mut m = Scripted {
            script: vec![0.2, 0.6, 0.5, 0.6, 0.4, 0.9],
            epoch: 0,
            steps: 0,
        };
        let p = Protocol {
            patience: 3,
            batch_size: 4,
            ..Protocol::default()
        };
        let mut r = crate::rng::stream(0, &[]);
        let s = fit(&mut m, 10, &p, &mut r).unwrap();
        assert_eq!(s.epochs, 5);
        assert_eq!(s.best_epoch, 1);
        assert_eq!(s.best_accuracy, 0.6);
        assert_eq!(m.epoch, 2);
        assert_eq!(m.steps, 15);
    }

    #[test]
    fn fit_respects_epoch_cap() {
        let mut m = Scripted {
            script: (0..10).map(|i| i as f64 / 10.0).collect(),
            epoch: 0,
            steps: 0,
        };
        let p = Protocol {
            max_epochs: 4,
            ..Protocol::default()
        };
        let mut r = crate::rng::stream(0, &[]);
        let s = fit(&mut m, 3, &p, &mut r).unwrap();
        assert_eq!((s.epochs, s.best_epoch), (4, 3));
        assert!(fit(&mut m, 0, &p, &mut r).is_err());
    }

    #[test]
    fn chunks_cover_all_rows() {
        let x = Tensor::new(600, 1, (0..600).map(f64::from).collect()).unwrap();
        let mut calls = 0;
        let out = in_chunks(&x, |c| {
            calls += 1;
            Ok(c.into_values())
        })
        .unwrap();
        assert_eq!(calls, 3);
        assert_eq!(out, x.values());
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits = [0.1, 0.9, 0.8, 0.2, 0.5, 0.4];
        assert_eq!(accuracy(&logits, 2, &[1, 0, 1]), 2.0 / 3.0);
    }
}
