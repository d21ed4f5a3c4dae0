//! Measures which report sentences the model attends to, per true class.
//! The corpus decides the "insufficient" label from the polarity sentence
//! alone, so a trained model should weight that sentence above its row mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tandemnet::corpus::{
    generate_corpus, patient_level_split, GeneratorSpec, CLASS_NAMES, DESIGNATED_CLASS, DESIGNATED_FEATURE,
};
use tandemnet::model::{ModelConfig, TandemNet};
use tandemnet::trainer::{fit, text_attention_stats, TrainConfig};

fn main() -> tandemnet::Result<()> {
    let corpus = generate_corpus(&GeneratorSpec {
        num_patients: 30,
        samples_per_patient: 2,
        seed: 3,
        ..GeneratorSpec::default()
    })?;
    let splits = patient_level_split(&corpus, 0.2, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = TandemNet::new(ModelConfig::desk(corpus.vocab.len()), &mut rng)?;
    fit(&model, &corpus, &splits.train, &TrainConfig { epochs: 4, batch_size: 8, ..TrainConfig::default() }, &mut rng)?;

    // Rows are true classes; columns are the mean attention weight per
    // sentence position, then the row mean.
    let idx: Vec<usize> = (0..corpus.samples.len()).collect();
    let stats = text_attention_stats(&model, &corpus, &idx)?;
    let cols = stats.shape()[1];
    let n = cols - 1;
    println!("mean attention per sentence position");
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let row = &stats.data()[c * cols..(c + 1) * cols];
        let cells: Vec<String> = row[..n].iter().map(|v| format!("{v:.4}")).collect();
        println!("  {name:<13} [{}]  mean {:.4}", cells.join(" "), row[n]);
    }

    let row = &stats.data()[DESIGNATED_CLASS * cols..(DESIGNATED_CLASS + 1) * cols];
    println!(
        "\n'{}' rows put {:.4} on the polarity sentence vs {:.4} mean",
        CLASS_NAMES[DESIGNATED_CLASS],
        row[DESIGNATED_FEATURE],
        row[n]
    );
    Ok(())
}
