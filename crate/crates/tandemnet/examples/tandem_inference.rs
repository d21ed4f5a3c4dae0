//! Runs single-sample inference three ways: with the report, without it, and
//! shows that the report shifts both the prediction and the attention.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tandemnet::corpus::{generate_corpus, GeneratorSpec, CLASS_NAMES};
use tandemnet::model::{ModelConfig, TandemNet};
use tandemnet::trainer::{fit, TrainConfig};
use tandemnet::Elem;

fn main() -> tandemnet::Result<()> {
    let corpus = generate_corpus(&GeneratorSpec {
        num_patients: 24,
        samples_per_patient: 2,
        seed: 9,
        ..GeneratorSpec::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = TandemNet::new(ModelConfig::desk(corpus.vocab.len()), &mut rng)?;
    let idx: Vec<usize> = (0..corpus.samples.len()).collect();
    fit(&model, &corpus, &idx, &TrainConfig { epochs: 3, batch_size: 8, ..TrainConfig::default() }, &mut rng)?;

    let sample = &corpus.samples[1];
    println!("true class: {} ({})\n", sample.label, CLASS_NAMES[sample.label as usize]);

    let with = model.infer(&sample.image, Some(&sample.reports[0]))?;
    let without = model.infer(&sample.image, None)?;
    for (name, inf) in [("with report", &with), ("image only", &without)] {
        let p = &inf.prediction;
        println!(
            "{name:<11} -> class {} ({}) with p={:.3}",
            p.predicted_class,
            CLASS_NAMES[p.predicted_class],
            p.probabilities[p.predicted_class]
        );
    }

    // The attention vector covers image regions first, then the sentences.
    let g = with.regions;
    let region_mass: Elem = with.alpha[..g].iter().sum();
    println!("\nattention mass on {} image regions: {:.3}", g, region_mass);
    println!("attention mass on {} sentences:     {:.3}", with.sentences, 1.0 - region_mass);
    let sent: Vec<String> = with.alpha[g..].iter().map(|w| format!("{w:.4}")).collect();
    println!("per-sentence weights: [{}]", sent.join(", "));
    Ok(())
}
