//! Trains the tandem classifier on a freshly generated corpus and reports
//! test accuracy with and without the report text.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use tandemnet::corpus::{generate_corpus, patient_level_split, GeneratorSpec};
use tandemnet::model::{ModelConfig, TandemNet};
use tandemnet::trainer::{evaluate, fit, metrics_csv, TrainConfig};

fn main() -> tandemnet::Result<()> {
    let corpus = generate_corpus(&GeneratorSpec {
        num_patients: 30,
        samples_per_patient: 3,
        seed: 42,
        ..GeneratorSpec::default()
    })?;
    let splits = patient_level_split(&corpus, 0.2, 0.0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = TandemNet::new(ModelConfig::desk(corpus.vocab.len()), &mut rng)?;
    let cfg = TrainConfig { epochs: 5, batch_size: 8, ..TrainConfig::default() };

    println!("training on {} samples, testing on {}", splits.train.len(), splits.test.len());
    let report = fit(&model, &corpus, &splits.train, &cfg, &mut rng)?;
    println!("best epoch: {} (validation metric {:.3})\n", report.best_epoch, report.best_metric);
    print!("{}", metrics_csv(&report.rows));

    let with = evaluate(&model, &corpus, &splits.test, true)?;
    let without = evaluate(&model, &corpus, &splits.test, false)?;
    println!("\ntest accuracy with text:    {:.3}", with.accuracy);
    println!("test accuracy without text: {:.3}", without.accuracy);
    println!("\nconfusion (with text):\n{}", with.confusion_csv());
    Ok(())
}
