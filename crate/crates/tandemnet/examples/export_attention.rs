//! Exports where a trained model looked: the region attention weights as a
//! bilinearly upsampled PGM heat map plus the raw grid as CSV.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tandemnet::corpus::{generate_corpus, GeneratorSpec, CLASS_NAMES};
use tandemnet::model::{ModelConfig, TandemNet};
use tandemnet::trainer::{fit, TrainConfig};
use tandemnet::viz::export_attention_map;

fn main() -> tandemnet::Result<()> {
    let corpus = generate_corpus(&GeneratorSpec {
        num_patients: 20,
        samples_per_patient: 2,
        seed: 21,
        ..GeneratorSpec::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = TandemNet::new(ModelConfig::desk(corpus.vocab.len()), &mut rng)?;
    let idx: Vec<usize> = (0..corpus.samples.len()).collect();
    fit(&model, &corpus, &idx, &TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() }, &mut rng)?;

    let sample = &corpus.samples[0];
    let inf = model.infer(&sample.image, Some(&sample.reports[0]))?;
    println!(
        "sample 0: true class {} ({}), predicted {} ({})",
        sample.label,
        CLASS_NAMES[sample.label as usize],
        inf.prediction.predicted_class,
        CLASS_NAMES[inf.prediction.predicted_class],
    );

    // α covers the G image regions first, then the sentences; the map
    // renders the region part on its square grid.
    let g = (inf.regions as f64).sqrt() as usize;
    let stem = std::env::temp_dir().join("tandemnet_attention");
    let files = export_attention_map(&inf.alpha, g, 128, &stem)?;
    println!("wrote {} ({g}x{g} grid upsampled to 128x128)", files.pgm.display());
    println!("wrote {}", files.csv.display());
    println!("\nregion weights:\n{}", std::fs::read_to_string(&files.csv)?);
    Ok(())
}
