//! Training loop and experiment drivers: split-optimizer epochs with decay
//! and clipping, evaluation with confusion matrices, best-validation model
//! selection, the drop-rate sweep, and per-class text-attention statistics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::head::ClassPrediction;
use crate::model::{BatchOutput, Freeze, ImageOnlyNet, ModelConfig, SampleRef, TandemNet};
use crate::optim::{OptimizerConfig, Optimizers};
use crate::params::{ParamGroup, ParamKind, ParamVisitor};
use crate::tensor::tape::{Mode, Tape};
use crate::tensor::{from_f64, to_f64, Elem, SharedTensor, Tensor};

const EVAL_BATCH: usize = 32;

/// What the loop needs from a model; implemented by the tandem network and
/// the image-only ablation so both train through the same code.
pub trait Classifier {
    fn forward_batch<R: Rng>(
        &self,
        tape: &mut Tape,
        samples: &[SampleRef],
        mode: Mode,
        freeze: Freeze,
        rng: &mut R,
    ) -> Result<BatchOutput>;

    fn visit_params(&self, f: &mut ParamVisitor);

    fn config(&self) -> &ModelConfig;
}

impl Classifier for TandemNet {
    fn forward_batch<R: Rng>(
        &self,
        tape: &mut Tape,
        samples: &[SampleRef],
        mode: Mode,
        freeze: Freeze,
        rng: &mut R,
    ) -> Result<BatchOutput> {
        TandemNet::forward_batch(self, tape, samples, mode, freeze, rng)
    }

    fn visit_params(&self, f: &mut ParamVisitor) {
        TandemNet::visit_params(self, f)
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }
}

impl Classifier for ImageOnlyNet {
    fn forward_batch<R: Rng>(
        &self,
        tape: &mut Tape,
        samples: &[SampleRef],
        mode: Mode,
        freeze: Freeze,
        rng: &mut R,
    ) -> Result<BatchOutput> {
        ImageOnlyNet::forward_batch(self, tape, samples, mode, freeze, rng)
    }

    fn visit_params(&self, f: &mut ParamVisitor) {
        ImageOnlyNet::visit_params(self, f)
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }
}

pub fn trainable_params(model: &impl Classifier) -> Vec<(String, SharedTensor, ParamGroup)> {
    let mut out = Vec::new();
    model.visit_params(&mut |path, cell, kind| {
        if kind == ParamKind::Trainable {
            let group = TandemNet::group_of(&path);
            out.push((path, cell.clone(), group));
        }
    });
    out
}

type Snapshot = Vec<(String, Tensor)>;

/// Copies every parameter and state buffer (batch-norm statistics included)
/// so the best validation model can be restored bitwise.
fn snapshot(model: &impl Classifier) -> Snapshot {
    let mut out = Vec::new();
    model.visit_params(&mut |path, cell, _| out.push((path, cell.borrow().clone())));
    out
}

fn restore(model: &impl Classifier, saved: &[(String, Tensor)]) {
    let mut i = 0;
    model.visit_params(&mut |path, cell, _| {
        assert_eq!(saved[i].0, path, "parameter walk changed between snapshot and restore");
        *cell.borrow_mut() = saved[i].1.clone();
        i += 1;
    });
    assert_eq!(i, saved.len());
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of training patients held out for model selection.
    pub validation_fraction: f64,
    /// Cap on how many training samples the per-epoch train-split accuracy
    /// is computed over; keeps metric rows cheap on big corpora.
    pub train_eval_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            epochs: 30,
            validation_fraction: 0.2,
            train_eval_cap: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1".to_string()));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction", format!("{} outside [0, 1)", self.validation_fraction)));
        }
        if self.train_eval_cap == 0 {
            return Err(Error::config("train_eval_cap", "must be at least 1".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub accuracy: f64,
}

fn sample_ref<'a>(corpus: &'a Corpus, idx: usize, variant: Option<usize>) -> SampleRef<'a> {
    let s = &corpus.samples[idx];
    SampleRef {
        image: &s.image,
        report: variant.and_then(|v| s.reports.get(v)),
        label: Some(s.label as usize),
    }
}

/// One pass over `order` in shuffled mini-batches: forward, backward, clip,
/// step. Report variants are drawn uniformly per sample per epoch. A
/// non-finite batch loss aborts with a diverged-training error.
// The argument list is the full step context; a bundle would just rename it.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<M: Classifier, R: Rng>(
    model: &M,
    corpus: &Corpus,
    order: &[usize],
    params: &[(String, SharedTensor, ParamGroup)],
    opt: &mut Optimizers,
    epoch: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochStats> {
    if order.is_empty() {
        return Err(Error::input("empty training set".to_string()));
    }
    let mut shuffled = order.to_vec();
    shuffled.shuffle(rng);

    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut labeled = 0usize;
    for chunk in shuffled.chunks(batch_size) {
        let refs: Vec<SampleRef> = chunk
            .iter()
            .map(|&i| {
                let variants = corpus.samples[i].reports.len();
                let v = if variants > 0 { Some(rng.gen_range(0..variants)) } else { None };
                sample_ref(corpus, i, v)
            })
            .collect();
        let mut tape = Tape::new();
        let out = model.forward_batch(&mut tape, &refs, Mode::Train, Freeze::none(), rng)?;
        let loss = to_f64(tape.data(out.loss)[0]);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        tape.backward(out.loss)?;
        opt.step(params, epoch)?;
        total_loss += loss * out.labeled as f64;
        correct += out.correct;
        labeled += out.labeled;
    }
    Ok(EpochStats { mean_loss: total_loss / labeled as f64, accuracy: correct as f64 / labeled as f64 })
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// rows = true class, columns = predicted class.
    pub confusion: Vec<Vec<usize>>,
    /// Per-class accuracy; NaN for classes absent from the evaluation set.
    pub per_class: Vec<f64>,
    pub samples: usize,
}

impl EvalReport {
    pub fn confusion_csv(&self) -> String {
        let classes = self.confusion.len();
        let mut out = String::from("true\\predicted");
        for c in 0..classes {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Deterministic evaluation: eval mode, frozen bindings, report variant 0
/// when text is available. Works for the image-only model too (it ignores
/// the reports).
pub fn evaluate<M: Classifier>(model: &M, corpus: &Corpus, idx: &[usize], text_available: bool) -> Result<EvalReport> {
    if idx.is_empty() {
        return Err(Error::input("empty evaluation set".to_string()));
    }
    let classes = model.config().classes;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut total_loss = 0.0;
    // Eval-mode forward draws no randomness; the generator is only here to
    // satisfy the signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in idx.chunks(EVAL_BATCH) {
        let refs: Vec<SampleRef> =
            chunk.iter().map(|&i| sample_ref(corpus, i, text_available.then_some(0))).collect();
        let mut tape = Tape::new();
        let out = model.forward_batch(&mut tape, &refs, Mode::Eval, Freeze::all(), &mut rng)?;
        total_loss += to_f64(tape.data(out.loss)[0]) * out.labeled as f64;
        for (&i, &logit_id) in chunk.iter().zip(&out.logits) {
            let pred = ClassPrediction::from_logits(tape.data(logit_id))?;
            confusion[corpus.samples[i].label as usize][pred.predicted_class] += 1;
        }
    }
    let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<f64> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 { f64::NAN } else { confusion[c][c] as f64 / n as f64 }
        })
        .collect();
    Ok(EvalReport {
        accuracy: trace as f64 / idx.len() as f64,
        mean_loss: total_loss / idx.len() as f64,
        confusion,
        per_class,
        samples: idx.len(),
    })
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub acc_with_text: f64,
    pub acc_without_text: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,split,loss,acc_with_text,acc_without_text\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.epoch, r.split, r.loss, r.acc_with_text, r.acc_without_text
        ));
    }
    out
}

#[derive(Debug)]
pub struct FitReport {
    pub rows: Vec<MetricsRow>,
    pub best_epoch: usize,
    /// Mean of with-text and without-text validation accuracy at the
    /// selected epoch.
    pub best_metric: f64,
}

/// Splits `idx` into (kept, held out) at patient granularity. Patients are
/// ordered by id, so the carve is deterministic.
fn hold_out_patients(corpus: &Corpus, idx: &[usize], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut patients: Vec<u32> = idx.iter().map(|&i| corpus.samples[i].patient_id).collect();
    patients.sort_unstable();
    patients.dedup();
    let held = ((patients.len() as f64 * fraction).round() as usize).min(patients.len().saturating_sub(1));
    let cut = patients.len() - held;
    let mut kept = Vec::new();
    let mut out = Vec::new();
    for &i in idx {
        let pos = patients.binary_search(&corpus.samples[i].patient_id).expect("patient from idx");
        if pos < cut {
            kept.push(i);
        } else {
            out.push(i);
        }
    }
    (kept, out)
}

/// Full training run over `train_idx`: carves a patient-level validation
/// subset, trains for `cfg.epochs`, selects the epoch with the best mean of
/// validation accuracy with and without text, and leaves the model holding
/// that epoch's parameters.
pub fn fit<M: Classifier, R: Rng>(
    model: &M,
    corpus: &Corpus,
    train_idx: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<FitReport> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::input("empty training set".to_string()));
    }
    let (tr, va) = hold_out_patients(corpus, train_idx, cfg.validation_fraction);
    let params = trainable_params(model);
    let mut opt = Optimizers::new(cfg.optimizer.clone())?;
    let train_probe: Vec<usize> = tr.iter().copied().take(cfg.train_eval_cap).collect();

    let mut rows = Vec::with_capacity(cfg.epochs * 2);
    let mut best: Option<(f64, usize, Snapshot)> = None;
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(model, corpus, &tr, &params, &mut opt, epoch, cfg.batch_size, rng)?;
        let tr_with = evaluate(model, corpus, &train_probe, true)?;
        let tr_without = evaluate(model, corpus, &train_probe, false)?;
        rows.push(MetricsRow {
            epoch,
            split: "train",
            loss: stats.mean_loss,
            acc_with_text: tr_with.accuracy,
            acc_without_text: tr_without.accuracy,
        });
        let metric = if va.is_empty() {
            // Degenerate corpora (too few patients to hold any out) fall
            // back to selecting on the train probe.
            let m = 0.5 * (tr_with.accuracy + tr_without.accuracy);
            rows.push(MetricsRow {
                epoch,
                split: "validation",
                loss: f64::NAN,
                acc_with_text: f64::NAN,
                acc_without_text: f64::NAN,
            });
            m
        } else {
            let va_with = evaluate(model, corpus, &va, true)?;
            let va_without = evaluate(model, corpus, &va, false)?;
            rows.push(MetricsRow {
                epoch,
                split: "validation",
                loss: va_with.mean_loss,
                acc_with_text: va_with.accuracy,
                acc_without_text: va_without.accuracy,
            });
            0.5 * (va_with.accuracy + va_without.accuracy)
        };
        if best.as_ref().is_none_or(|(b, _, _)| metric > *b) {
            best = Some((metric, epoch, snapshot(model)));
        }
    }
    let (best_metric, best_epoch, saved) = best.expect("epochs >= 1");
    restore(model, &saved);
    Ok(FitReport { rows, best_epoch, best_metric })
}

#[derive(Debug)]
pub struct SweepCell {
    pub rate: Elem,
    pub acc_with_text: f64,
    pub acc_without_text: f64,
    /// Populated when this rate's run failed; accuracies are NaN then.
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("drop_rate,acc_with_text,acc_without_text,error\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{:.6},{:.6},{}\n",
                c.rate,
                c.acc_with_text,
                c.acc_without_text,
                c.error.as_deref().unwrap_or("")
            ));
        }
        out
    }
}

/// Trains one model per drop rate and reports test accuracy with and
/// without text. A failed cell records its error and the sweep moves on.
pub fn drop_rate_sweep<F, R>(
    mut factory: F,
    corpus: &Corpus,
    train_idx: &[usize],
    test_idx: &[usize],
    rates: &[Elem],
    cfg: &TrainConfig,
    rng: &mut R,
) -> SweepReport
where
    F: FnMut(Elem) -> Result<TandemNet>,
    R: Rng,
{
    let mut cells = Vec::with_capacity(rates.len());
    for &rate in rates {
        let seed: u64 = rng.gen();
        let mut cell_rng = ChaCha8Rng::seed_from_u64(seed);
        let run = factory(rate).and_then(|model| {
            fit(&model, corpus, train_idx, cfg, &mut cell_rng)?;
            let with = evaluate(&model, corpus, test_idx, true)?;
            let without = evaluate(&model, corpus, test_idx, false)?;
            Ok((with.accuracy, without.accuracy))
        });
        cells.push(match run {
            Ok((acc_with_text, acc_without_text)) => {
                SweepCell { rate, acc_with_text, acc_without_text, error: None }
            }
            Err(e) => SweepCell {
                rate,
                acc_with_text: f64::NAN,
                acc_without_text: f64::NAN,
                error: Some(e.to_string()),
            },
        });
    }
    SweepReport { cells }
}

/// Mean attention weight on each sentence position per true class, plus an
/// overall column averaging across positions: shape [classes, N+1]. Classes
/// absent from `idx` get NaN rows (reported on stderr).
pub fn text_attention_stats(model: &TandemNet, corpus: &Corpus, idx: &[usize]) -> Result<Tensor> {
    let classes = model.cfg.classes;
    let n = model.cfg.sentences;
    let mut sums = vec![vec![0.0; n]; classes];
    let mut counts = vec![0usize; classes];
    for &i in idx {
        let s = &corpus.samples[i];
        let report = s.reports.first().ok_or_else(|| Error::input(format!("sample {i} has no report")))?;
        let inf = model.infer(&s.image, Some(report))?;
        let class = s.label as usize;
        for (j, slot) in sums[class].iter_mut().enumerate() {
            *slot += to_f64(inf.alpha[inf.regions + j]);
        }
        counts[class] += 1;
    }
    let mut data = vec![0.0; classes * (n + 1)];
    for c in 0..classes {
        if counts[c] == 0 {
            eprintln!("warning: no samples of class {c}; attention row is NaN");
            for j in 0..=n {
                data[c * (n + 1) + j] = Elem::NAN;
            }
            continue;
        }
        let mut overall = 0.0;
        for j in 0..n {
            let mean = sums[c][j] / counts[c] as f64;
            data[c * (n + 1) + j] = from_f64(mean);
            overall += mean;
        }
        data[c * (n + 1) + n] = from_f64(overall / n as f64);
    }
    Tensor::new(vec![classes, n + 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GeneratorSpec};

    fn tiny_corpus(patients: usize, seed: u64) -> Corpus {
        generate_corpus(&GeneratorSpec {
            num_patients: patients,
            samples_per_patient: 1,
            seed,
            ..GeneratorSpec::default()
        })
        .unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig { epochs: 1, batch_size: 4, validation_fraction: 0.0, ..TrainConfig::default() }
    }

    fn desk_model(corpus: &Corpus, seed: u64) -> TandemNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TandemNet::new(ModelConfig::desk(corpus.vocab.len()), &mut rng).unwrap()
    }

    #[test]
    fn one_epoch_reduces_eval_loss_on_a_small_set() {
        let corpus = tiny_corpus(10, 11);
        let idx: Vec<usize> = (0..corpus.samples.len()).collect();
        let mut wins = 0;
        for seed in 0..3 {
            let model = desk_model(&corpus, seed);
            let params = trainable_params(&model);
            let mut opt = Optimizers::new(OptimizerConfig::default()).unwrap();
            let before = evaluate(&model, &corpus, &idx, true).unwrap().mean_loss;
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            train_epoch(&model, &corpus, &idx, &params, &mut opt, 0, 4, &mut rng).unwrap();
            let after = evaluate(&model, &corpus, &idx, true).unwrap().mean_loss;
            if after < before {
                wins += 1;
            }
        }
        assert!(wins >= 2, "loss decreased in only {wins}/3 seeds");
    }

    #[test]
    fn confusion_matrix_counts_are_consistent() {
        let corpus = tiny_corpus(12, 5);
        let idx: Vec<usize> = (0..corpus.samples.len()).collect();
        let model = desk_model(&corpus, 1);
        let report = evaluate(&model, &corpus, &idx, true).unwrap();
        assert_eq!(report.samples, 12);
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, 12);
        for (c, row) in report.confusion.iter().enumerate() {
            let truth_count = corpus.samples.iter().filter(|s| s.label as usize == c).count();
            assert_eq!(row.iter().sum::<usize>(), truth_count, "row {c}");
        }
        let trace: usize = (0..4).map(|c| report.confusion[c][c]).sum();
        assert!((report.accuracy - trace as f64 / 12.0).abs() < 1e-12);
        for (c, &acc) in report.per_class.iter().enumerate() {
            let n: usize = report.confusion[c].iter().sum();
            if n == 0 {
                assert!(acc.is_nan());
            } else {
                assert!((acc - report.confusion[c][c] as f64 / n as f64).abs() < 1e-12);
            }
        }
        assert!(evaluate(&model, &corpus, &[], true).is_err());
    }

    #[test]
    fn same_seed_fit_reproduces_epoch_losses() {
        let corpus = tiny_corpus(8, 21);
        let idx: Vec<usize> = (0..corpus.samples.len()).collect();
        let run = || {
            let model = desk_model(&corpus, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            fit(&model, &corpus, &idx, &quick_cfg(), &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits(), "epoch {} {}", x.epoch, x.split);
            // Bit compare: validation cells are NaN when no patients were
            // held out, and NaN != NaN.
            assert_eq!(x.acc_with_text.to_bits(), y.acc_with_text.to_bits());
        }
    }

    #[test]
    fn fit_restores_the_best_validation_epoch() {
        let corpus = tiny_corpus(10, 31);
        let idx: Vec<usize> = (0..corpus.samples.len()).collect();
        let model = desk_model(&corpus, 9);
        let cfg = TrainConfig { epochs: 2, batch_size: 4, validation_fraction: 0.3, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let report = fit(&model, &corpus, &idx, &cfg, &mut rng).unwrap();
        assert_eq!(report.rows.len(), 4, "train + validation row per epoch");
        assert!(report.best_epoch < 2);
        // The restored parameters reproduce the selected epoch's validation
        // accuracy exactly.
        let (_, va) = hold_out_patients(&corpus, &idx, cfg.validation_fraction);
        let va_with = evaluate(&model, &corpus, &va, true).unwrap();
        let va_without = evaluate(&model, &corpus, &va, false).unwrap();
        let metric = 0.5 * (va_with.accuracy + va_without.accuracy);
        assert!((metric - report.best_metric).abs() < 1e-12);
    }

    #[test]
    fn patient_hold_out_is_disjoint_and_sized() {
        let corpus = generate_corpus(&GeneratorSpec {
            num_patients: 10,
            samples_per_patient: 3,
            seed: 2,
            ..GeneratorSpec::default()
        })
        .unwrap();
        let idx: Vec<usize> = (0..30).collect();
        let (kept, held) = hold_out_patients(&corpus, &idx, 0.2);
        assert_eq!(kept.len() + held.len(), 30);
        assert_eq!(held.len(), 6, "2 of 10 patients, 3 samples each");
        let kp: std::collections::HashSet<u32> = kept.iter().map(|&i| corpus.samples[i].patient_id).collect();
        let hp: std::collections::HashSet<u32> = held.iter().map(|&i| corpus.samples[i].patient_id).collect();
        assert!(kp.is_disjoint(&hp));
    }

    #[test]
    fn sweep_records_errors_and_keeps_going() {
        let corpus = tiny_corpus(6, 41);
        let idx: Vec<usize> = (0..corpus.samples.len()).collect();
        let vocab = corpus.vocab.len();
        let factory = |rate: Elem| {
            let mut cfg = ModelConfig::desk(vocab);
            cfg.drop_rate = rate;
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            TandemNet::new(cfg, &mut rng)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // 1.5 is an invalid drop rate: that cell must fail without sinking
        // the following one.
        let report = drop_rate_sweep(factory, &corpus, &idx, &idx, &[1.5, 0.5], &quick_cfg(), &mut rng);
        assert_eq!(report.cells.len(), 2);
        assert!(report.cells[0].error.is_some());
        assert!(report.cells[0].acc_with_text.is_nan());
        assert!(report.cells[1].error.is_none());
        assert!(report.cells[1].acc_with_text.is_finite());
        let csv = report.to_csv();
        assert!(csv.starts_with("drop_rate,acc_with_text,acc_without_text,error\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn uniform_attention_yields_uniform_text_stats() {
        let corpus = tiny_corpus(8, 51);
        let idx: Vec<usize> = (0..corpus.samples.len()).collect();
        let model = desk_model(&corpus, 4);
        model.attention.score_weight.borrow_mut().data_mut().fill(0.0);
        model.attention.score_bias.borrow_mut().data_mut().fill(0.0);
        let stats = text_attention_stats(&model, &corpus, &idx).unwrap();
        assert_eq!(stats.shape(), [4, 6]);
        let regions = model.cfg.encoder.grid_area();
        let uniform = 1.0 / (regions + model.cfg.sentences) as f64;
        // Element-precision bound: softmax rounding scales with Elem width.
        let tol = 1e-12 + to_f64(Elem::EPSILON) * 1e4;
        for c in 0..4 {
            let row = &stats.data()[c * 6..(c + 1) * 6];
            let has_samples = corpus.samples.iter().any(|s| s.label as usize == c);
            if has_samples {
                for &v in row {
                    assert!((to_f64(v) - uniform).abs() < tol, "class {c}: {v} vs {uniform}");
                }
            } else {
                assert!(row.iter().all(|v| v.is_nan()));
            }
        }
    }

    #[test]
    fn missing_class_rows_are_nan() {
        let corpus = tiny_corpus(10, 61);
        let model = desk_model(&corpus, 8);
        // Evaluate only on one class; the other rows must be NaN-flagged.
        let keep: Vec<usize> =
            (0..corpus.samples.len()).filter(|&i| corpus.samples[i].label == corpus.samples[0].label).collect();
        let kept_class = corpus.samples[0].label as usize;
        let stats = text_attention_stats(&model, &corpus, &keep).unwrap();
        for c in 0..4 {
            let row = &stats.data()[c * 6..(c + 1) * 6];
            if c == kept_class {
                assert!(row.iter().all(|v| v.is_finite()));
                let mean: f64 = row[..5].iter().map(|&v| to_f64(v)).sum::<f64>() / 5.0;
                assert!((to_f64(row[5]) - mean).abs() < 1e-12 + to_f64(Elem::EPSILON), "overall column is the row mean");
            } else {
                assert!(row.iter().all(|v| v.is_nan()), "class {c} should be NaN");
            }
        }
    }

    #[test]
    fn metrics_csv_has_the_pinned_columns() {
        let rows = vec![
            MetricsRow { epoch: 0, split: "train", loss: 1.25, acc_with_text: 0.5, acc_without_text: 0.25 },
            MetricsRow { epoch: 0, split: "validation", loss: 1.5, acc_with_text: 0.4, acc_without_text: 0.3 },
        ];
        let csv = metrics_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,split,loss,acc_with_text,acc_without_text"));
        assert_eq!(lines.next(), Some("0,train,1.250000,0.500000,0.250000"));
        assert_eq!(lines.next(), Some("0,validation,1.500000,0.400000,0.300000"));
    }

    #[test]
    fn image_only_model_trains_through_the_same_loop() {
        let corpus = tiny_corpus(6, 71);
        let idx: Vec<usize> = (0..corpus.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ImageOnlyNet::new(ModelConfig::desk(corpus.vocab.len()), &mut rng).unwrap();
        let report = fit(&model, &corpus, &idx, &quick_cfg(), &mut rng).unwrap();
        assert_eq!(report.rows.len(), 2);
        let eval = evaluate(&model, &corpus, &idx, false).unwrap();
        assert!(eval.accuracy >= 0.0 && eval.accuracy <= 1.0);
        // With and without text are identical for the ablation.
        let with = evaluate(&model, &corpus, &idx, true).unwrap();
        assert_eq!(with.confusion, eval.confusion);
    }
}
