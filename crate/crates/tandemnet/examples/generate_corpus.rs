//! Synthesizes a small labeled corpus, prints what one sample looks like,
//! and round-trips the whole thing through the single-file container.

use tandemnet::captioner::detokenize;
use tandemnet::corpus::{generate_corpus, read_corpus, write_corpus, GeneratorSpec, CLASS_NAMES};

fn main() -> tandemnet::Result<()> {
    let spec = GeneratorSpec {
        num_patients: 20,
        samples_per_patient: 3,
        seed: 11,
        ..GeneratorSpec::default()
    };
    let corpus = generate_corpus(&spec)?;

    let mut counts = [0usize; CLASS_NAMES.len()];
    for s in &corpus.samples {
        counts[s.label as usize] += 1;
    }
    println!("{} samples, vocabulary of {} words", corpus.samples.len(), corpus.vocab.len());
    for (name, n) in CLASS_NAMES.iter().zip(counts) {
        println!("  {name:<13} {n}");
    }

    let sample = &corpus.samples[0];
    println!("\nsample 0: class {} ({}), severity {:?}", sample.label, CLASS_NAMES[sample.label as usize], sample.severity);
    println!("report variant 0 ({} tokens):", sample.reports[0].tokens.len());
    for sentence in detokenize(&corpus.vocab, &sample.reports[0].tokens).lines() {
        println!("  {sentence}");
    }

    let path = std::env::temp_dir().join("tandemnet_example_corpus.tndc");
    write_corpus(&corpus, &path)?;
    let back = read_corpus(&path)?;
    assert_eq!(back.samples.len(), corpus.samples.len());
    assert_eq!(back.vocab, corpus.vocab);
    println!("\nround-tripped through {}", path.display());
    Ok(())
}
