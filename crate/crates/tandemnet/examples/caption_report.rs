//! Bolts a greedy LSTM decoder onto the classifier and fine-tunes it until
//! it can describe an image in the corpus's report language. The CNN stays
//! frozen throughout; attention stays frozen for the first epochs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tandemnet::captioner::{detokenize, CaptionConfig, Captioner};
use tandemnet::corpus::{generate_corpus, GeneratorSpec, CLASS_NAMES};
use tandemnet::model::{ModelConfig, TandemNet};
use tandemnet::optim::Optimizers;

fn main() -> tandemnet::Result<()> {
    let corpus = generate_corpus(&GeneratorSpec {
        num_patients: 2,
        samples_per_patient: 1,
        seed: 13,
        ..GeneratorSpec::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = TandemNet::new(ModelConfig::desk(corpus.vocab.len()), &mut rng)?;
    let cap = Captioner::new(model, &mut rng);

    // Memorize a single reference; the default rate is tuned for corpora,
    // not demos, so run hotter.
    let cfg = CaptionConfig { finetune_lr: 5e-3, ..CaptionConfig::default() };
    let params = cap.trainable_params();
    let mut opt = Optimizers::new(cfg.optimizer())?;
    let sample = &corpus.samples[0];
    println!("target (class {}):", CLASS_NAMES[sample.label as usize]);
    print!("{}", detokenize(&corpus.vocab, &sample.reports[0].tokens));

    println!("\nfine-tuning the decoder on this one sample:");
    for step in 0..200 {
        let stats =
            cap.train_step(&sample.image, &sample.reports[0], Some(sample.label as usize), &cfg, &params, &mut opt, 0, &mut rng)?;
        if step % 40 == 0 || step == 199 {
            println!(
                "  step {step:>3}: cross-entropy {:.4} per token, classification {:.4}",
                stats.caption_loss, stats.classification_loss
            );
        }
    }

    let tokens = cap.generate_report(&sample.image, &cfg)?;
    println!("\ngreedy decode ({} tokens):", tokens.len());
    print!("{}", detokenize(&corpus.vocab, &tokens));
    let matched = tokens == sample.reports[0].tokens[1..];
    println!("\nreproduces the reference: {matched}");
    Ok(())
}
