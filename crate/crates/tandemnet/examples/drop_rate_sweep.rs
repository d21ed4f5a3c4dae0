//! Trains one model per text drop rate on the same corpus and compares test
//! accuracy with and without reports. Rates near zero let the model lean on
//! the text; higher rates force the image path to carry weight on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tandemnet::corpus::{generate_corpus, patient_level_split, GeneratorSpec};
use tandemnet::model::{ModelConfig, TandemNet};
use tandemnet::trainer::{drop_rate_sweep, TrainConfig};

fn main() -> tandemnet::Result<()> {
    let corpus = generate_corpus(&GeneratorSpec {
        num_patients: 24,
        samples_per_patient: 2,
        seed: 5,
        ..GeneratorSpec::default()
    })?;
    let splits = patient_level_split(&corpus, 0.25, 0.0)?;
    println!("sweeping on {} train / {} test samples", splits.train.len(), splits.test.len());

    // Each rate gets a fresh model, all drawn from one init stream.
    let mut init_rng = ChaCha8Rng::seed_from_u64(3);
    let base = ModelConfig::desk(corpus.vocab.len());
    let factory = |rate| {
        let mut cfg = base.clone();
        cfg.drop_rate = rate;
        TandemNet::new(cfg, &mut init_rng)
    };

    let cfg = TrainConfig { epochs: 3, batch_size: 8, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let report =
        drop_rate_sweep(factory, &corpus, &splits.train, &splits.test, &[0.05, 0.5, 0.9], &cfg, &mut rng);

    for cell in &report.cells {
        match &cell.error {
            Some(e) => println!("r={}: failed ({e})", cell.rate),
            None => println!(
                "r={}: accuracy {:.3} with text / {:.3} without",
                cell.rate, cell.acc_with_text, cell.acc_without_text
            ),
        }
    }
    println!("\n{}", report.to_csv());
    Ok(())
}
