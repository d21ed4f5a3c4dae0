//! Command-line front end. Every subcommand shares one configuration
//! mechanism: a named preset, an optional key=value file, then repeatable
//! `--set key=value` overrides, most specific last. Commands that read a
//! checkpoint start from the config embedded in it instead of a preset, so
//! a run stays self-describing end to end.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::captioner::{detokenize, Captioner};
use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{dump_pngs, generate_corpus, patient_level_split, read_corpus, write_corpus, Corpus, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::model::TandemNet;
use crate::optim::Optimizers;
use crate::tensor::{from_f64, kernels, Elem, Tensor};
use crate::trainer::{drop_rate_sweep, evaluate, fit, metrics_csv, text_attention_stats};
use crate::viz::export_attention_map;
use crate::vocab::Vocabulary;

pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    apply_thread_env()?;
    match cmd {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::AttnExport(a) => cmd_attn_export(a),
        Command::TextAttnStats(a) => cmd_text_attn_stats(a),
        Command::Caption(a) => cmd_caption(a),
    }
}

fn apply_thread_env() -> Result<()> {
    let Ok(raw) = std::env::var("TANDEM_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::config("TANDEM_THREADS", format!("not a thread count: {raw:?}")))?;
    if n == 0 {
        return Err(Error::config("TANDEM_THREADS", "must be at least 1".to_string()));
    }
    kernels::set_worker_threads(n);
    Ok(())
}

#[derive(Parser)]
#[command(
    name = "tandemnet",
    version,
    about = "Train and probe an image classifier that reads diagnostic reports as an optional second input"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled image and report corpus into one file
    Generate(GenerateArgs),
    /// Train a tandem classifier; writes checkpoint, metrics and config echo
    Train(TrainArgs),
    /// Score a checkpoint on a corpus, with and without report text
    Eval(EvalArgs),
    /// Train one model per report drop rate and tabulate test accuracy
    Sweep(SweepArgs),
    /// Render one sample's region attention as a PGM image plus CSV weights
    AttnExport(AttnExportArgs),
    /// Per-class mean attention weight on each report sentence
    TextAttnStats(TextAttnStatsArgs),
    /// Fine-tune the text decoder and generate a report for one sample
    Caption(CaptionArgs),
}

/// Config plumbing for subcommands that build a model from scratch.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Baseline configuration: desk, toy or paper
    #[arg(long, default_value = "desk")]
    preset: String,
    /// File of key=value lines layered over the preset (# comments allowed)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for model init, shuffling and modality drop
    #[arg(long)]
    seed: Option<u64>,
    /// Probability of hiding the report during a training step
    #[arg(long)]
    drop_rate: Option<f64>,
    /// Single key=value override, highest precedence; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut run = RunConfig::preset(&self.preset)?;
        apply_file(&mut run, self.config.as_deref())?;
        if let Some(seed) = self.seed {
            run.set("seed", &seed.to_string())?;
        }
        if let Some(rate) = self.drop_rate {
            run.set("model.drop_rate", &rate.to_string())?;
        }
        run.apply_overrides(&self.set)?;
        run.validate()?;
        Ok(run)
    }
}

/// Config plumbing for subcommands that start from a checkpoint's embedded
/// config rather than a preset.
#[derive(Args, Debug)]
struct OverrideArgs {
    /// File of key=value lines layered over the checkpoint's config
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for any stage that still draws randomness (captioner init, shuffles)
    #[arg(long)]
    seed: Option<u64>,
    /// Single key=value override, highest precedence; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl OverrideArgs {
    fn apply(&self, run: &mut RunConfig) -> Result<()> {
        apply_file(run, self.config.as_deref())?;
        if let Some(seed) = self.seed {
            run.set("seed", &seed.to_string())?;
        }
        run.apply_overrides(&self.set)?;
        run.validate()
    }
}

fn apply_file(run: &mut RunConfig, path: Option<&Path>) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let text = fs::read_to_string(path)?;
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    run.apply_overrides(&lines)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::input(format!("{what} not found: {}", path.display())))
    }
}

/// Writes `text`, creating parent directories as needed.
fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// Config echo sibling for a single-file output: `<file>.config.txt`.
fn echo_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_os_string();
    s.push(".config.txt");
    PathBuf::from(s)
}

fn obtain_corpus(path: Option<&Path>, run: &RunConfig) -> Result<Corpus> {
    match path {
        Some(p) => {
            require_file(p, "corpus")?;
            read_corpus(p)
        }
        None => {
            eprintln!("no corpus file given; generating one in memory (seed {})", run.generator.seed);
            generate_corpus(&run.generator)
        }
    }
}

fn split_indices(corpus: &Corpus, which: &str, test_fraction: f64) -> Result<Vec<usize>> {
    if which == "all" {
        return Ok((0..corpus.samples.len()).collect());
    }
    let splits = patient_level_split(corpus, test_fraction, 0.0)?;
    match which {
        "train" => Ok(splits.train),
        "test" => Ok(splits.test),
        other => Err(Error::config("split", format!("unknown split {other:?}, expected train, test or all"))),
    }
}

fn class_name(idx: usize) -> String {
    CLASS_NAMES.get(idx).map_or_else(|| idx.to_string(), |n| (*n).to_string())
}

struct Loaded {
    ckpt: Checkpoint,
    run: RunConfig,
    vocab: Vocabulary,
}

fn load_bundle(path: &Path, over: &OverrideArgs) -> Result<Loaded> {
    require_file(path, "checkpoint")?;
    let ckpt = Checkpoint::load(path)?;
    let mut run = RunConfig::from_text(&blob_str(&ckpt, checkpoint::CONFIG_BLOB)?)?;
    over.apply(&mut run)?;
    let vocab = Vocabulary::from_tsv(&blob_str(&ckpt, checkpoint::VOCAB_BLOB)?)?;
    Ok(Loaded { ckpt, run, vocab })
}

fn blob_str(ckpt: &Checkpoint, name: &str) -> Result<String> {
    let bytes = ckpt
        .blob(name)
        .ok_or_else(|| Error::input(format!("checkpoint lacks a {name} record")))?;
    String::from_utf8(bytes.to_vec()).map_err(|e| Error::input(format!("{name} record is not UTF-8: {e}")))
}

fn restore_classifier(loaded: &Loaded) -> Result<TandemNet> {
    // Init values are overwritten immediately, so the seed is arbitrary.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = TandemNet::new(loaded.run.model.clone(), &mut rng)?;
    checkpoint::restore_params(&loaded.ckpt, |f| model.visit_params(f))?;
    Ok(model)
}

fn check_vocab(corpus: &Corpus, vocab: &Vocabulary) -> Result<()> {
    if corpus.vocab != *vocab {
        return Err(Error::input(
            "corpus vocabulary differs from the one the checkpoint was trained with".to_string(),
        ));
    }
    Ok(())
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output corpus file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Also render the first few images as PNGs into this directory
    #[arg(long, value_name = "DIR")]
    png_dir: Option<PathBuf>,
    /// How many PNGs to render
    #[arg(long, default_value_t = 8)]
    png_count: usize,
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let run = a.cfg.build()?;
    let corpus = generate_corpus(&run.generator)?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_corpus(&corpus, &a.out)?;
    write_text(&echo_path(&a.out), &run.to_text())?;

    let mut counts = vec![0usize; CLASS_NAMES.len()];
    for s in &corpus.samples {
        if let Some(c) = counts.get_mut(s.label as usize) {
            *c += 1;
        }
    }
    println!(
        "wrote {} samples ({} patients, {}x{} px, vocabulary {}) to {}",
        corpus.samples.len(),
        run.generator.num_patients,
        corpus.image_size,
        corpus.image_size,
        corpus.vocab.len(),
        a.out.display()
    );
    for (i, c) in counts.iter().enumerate() {
        println!("  class {i} ({}): {c}", class_name(i));
    }
    if let Some(dir) = &a.png_dir {
        let files = dump_pngs(&corpus, dir, a.png_count)?;
        println!("rendered {} PNGs into {}", files.len(), dir.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus file; generated on the fly from the config when omitted
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Output directory for checkpoint, metrics and config echo
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Fraction of patients held out as the test split
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = a.cfg.build()?;
    fs::create_dir_all(&a.out)?;
    let corpus = obtain_corpus(a.corpus.as_deref(), &run)?;
    run.model.vocab_size = corpus.vocab.len();
    write_text(&a.out.join("config.txt"), &run.to_text())?;

    let splits = patient_level_split(&corpus, a.test_fraction, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let model = TandemNet::new(run.model.clone(), &mut rng)?;
    println!(
        "training on {} samples ({} held out for test), {} epochs",
        splits.train.len(),
        splits.test.len(),
        run.train.epochs
    );
    let report = fit(&model, &corpus, &splits.train, &run.train, &mut rng)?;
    for row in report.rows.iter().filter(|r| r.split == "validation") {
        println!(
            "epoch {:>3}: validation loss {:.4}, accuracy {:.3} with text / {:.3} without",
            row.epoch, row.loss, row.acc_with_text, row.acc_without_text
        );
    }
    println!("best epoch {} (validation metric {:.4})", report.best_epoch, report.best_metric);

    write_text(&a.out.join("metrics.csv"), &metrics_csv(&report.rows))?;
    let ckpt = bundle_model(&model, report.best_epoch, &rng, &run, &corpus.vocab);
    let ckpt_path = a.out.join("model.ckpt");
    ckpt.save(&ckpt_path)?;

    if splits.test.is_empty() {
        println!("test split is empty; skipping final evaluation");
    } else {
        let with = evaluate(&model, &corpus, &splits.test, true)?;
        let without = evaluate(&model, &corpus, &splits.test, false)?;
        println!("test accuracy with text    {:.4} ({} samples)", with.accuracy, with.samples);
        println!("test accuracy without text {:.4}", without.accuracy);
        write_text(&a.out.join("test_confusion_with_text.csv"), &with.confusion_csv())?;
        write_text(&a.out.join("test_confusion_without_text.csv"), &without.confusion_csv())?;
    }
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn bundle_model(model: &TandemNet, epoch: usize, rng: &ChaCha8Rng, run: &RunConfig, vocab: &Vocabulary) -> Checkpoint {
    checkpoint::bundle(|f| model.visit_params(f), None, epoch, rng, &run.to_text(), &vocab.to_tsv())
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    over: OverrideArgs,
    /// Trained model bundle
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Corpus file to score on
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Which patient-level split to score: test, train or all
    #[arg(long, default_value = "test")]
    split: String,
    /// Fraction of patients in the test split (must match the training run)
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Score only the with-text pass
    #[arg(long, conflicts_with = "no_text")]
    with_text: bool,
    /// Score only the without-text pass
    #[arg(long)]
    no_text: bool,
    /// Directory for confusion matrices and config echo; stdout only when omitted
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let loaded = load_bundle(&a.checkpoint, &a.over)?;
    require_file(&a.corpus, "corpus")?;
    let corpus = read_corpus(&a.corpus)?;
    check_vocab(&corpus, &loaded.vocab)?;
    let model = restore_classifier(&loaded)?;
    let idx = split_indices(&corpus, &a.split, a.test_fraction)?;
    println!("split {}: {} samples", a.split, idx.len());

    let passes: &[bool] = match (a.with_text, a.no_text) {
        (true, _) => &[true],
        (_, true) => &[false],
        _ => &[true, false],
    };
    for &text in passes {
        let label = if text { "with text:   " } else { "without text:" };
        let report = evaluate(&model, &corpus, &idx, text)?;
        println!("{label} accuracy {:.4}, mean loss {:.4}", report.accuracy, report.mean_loss);
        for (i, recall) in report.per_class.iter().enumerate() {
            if !recall.is_nan() {
                println!("  class {i} ({}): recall {recall:.4}", class_name(i));
            }
        }
        if let Some(dir) = &a.out {
            let name = if text { "confusion_with_text.csv" } else { "confusion_without_text.csv" };
            write_text(&dir.join(name), &report.confusion_csv())?;
        }
    }
    if let Some(dir) = &a.out {
        write_text(&dir.join("config.txt"), &loaded.run.to_text())?;
        println!("wrote confusion matrices to {}", dir.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus file; generated on the fly from the config when omitted
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Comma-separated training drop rates to try
    #[arg(long, default_value = "0,0.25,0.5,0.75,1", value_delimiter = ',')]
    rates: Vec<f64>,
    /// Fraction of patients held out as the test split
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// CSV destination; stdout when omitted
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut run = a.cfg.build()?;
    let corpus = obtain_corpus(a.corpus.as_deref(), &run)?;
    run.model.vocab_size = corpus.vocab.len();
    let splits = patient_level_split(&corpus, a.test_fraction, 0.0)?;
    println!(
        "sweeping {} drop rates over {} train / {} test samples",
        a.rates.len(),
        splits.train.len(),
        splits.test.len()
    );

    let mut init_rng = ChaCha8Rng::seed_from_u64(run.seed);
    let model_cfg = run.model.clone();
    let factory = |rate: Elem| {
        let mut cfg = model_cfg.clone();
        cfg.drop_rate = rate;
        TandemNet::new(cfg, &mut init_rng)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x51EE_70F5);
    let rates: Vec<Elem> = a.rates.iter().map(|&r| from_f64(r)).collect();
    let report = drop_rate_sweep(factory, &corpus, &splits.train, &splits.test, &rates, &run.train, &mut rng);
    for cell in &report.cells {
        match &cell.error {
            Some(e) => println!("r={}: failed ({e})", cell.rate),
            None => println!(
                "r={}: accuracy {:.4} with text / {:.4} without",
                cell.rate, cell.acc_with_text, cell.acc_without_text
            ),
        }
    }
    match &a.out {
        Some(path) => {
            write_text(path, &report.to_csv())?;
            write_text(&echo_path(path), &run.to_text())?;
            println!("wrote {}", path.display());
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

#[derive(Args, Debug)]
struct AttnExportArgs {
    #[command(flatten)]
    over: OverrideArgs,
    /// Trained model bundle
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Corpus file to draw the sample from
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Corpus sample to inspect
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Run the image-only path instead of image plus report
    #[arg(long)]
    no_text: bool,
    /// Upsampled map width in pixels; defaults to the model input size
    #[arg(long)]
    size: Option<usize>,
    /// Output stem; writes STEM.pgm, STEM.csv and STEM.config.txt
    #[arg(long, value_name = "STEM", default_value = "attention")]
    out: PathBuf,
}

fn cmd_attn_export(a: AttnExportArgs) -> Result<()> {
    let loaded = load_bundle(&a.checkpoint, &a.over)?;
    require_file(&a.corpus, "corpus")?;
    let corpus = read_corpus(&a.corpus)?;
    let model = restore_classifier(&loaded)?;
    let sample = corpus
        .samples
        .get(a.sample)
        .ok_or_else(|| Error::input(format!("sample {} out of range (corpus has {})", a.sample, corpus.samples.len())))?;

    let report = if a.no_text {
        None
    } else {
        check_vocab(&corpus, &loaded.vocab)?;
        Some(&sample.reports[0])
    };
    let inf = model.infer(&sample.image, report)?;
    let g = (inf.regions as f64).sqrt().round() as usize;
    if g * g != inf.regions {
        return Err(Error::dim("attention map", format!("{} regions do not form a square grid", inf.regions)));
    }
    let size = a.size.unwrap_or(loaded.run.model.encoder.input_size);
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let files = export_attention_map(&inf.alpha, g, size, &a.out)?;
    write_text(&echo_path(&a.out), &loaded.run.to_text())?;

    let pred = inf.prediction.predicted_class;
    println!(
        "sample {}: predicted class {pred} ({}, p={:.3}), true class {} ({})",
        a.sample,
        class_name(pred),
        inf.prediction.probabilities[pred],
        sample.label,
        class_name(sample.label as usize)
    );
    if !a.no_text {
        let weights: Vec<String> = inf.alpha[inf.regions..].iter().map(|w| format!("{w:.4}")).collect();
        println!("sentence attention: [{}]", weights.join(", "));
    }
    println!("wrote {} and {}", files.pgm.display(), files.csv.display());
    Ok(())
}

#[derive(Args, Debug)]
struct TextAttnStatsArgs {
    #[command(flatten)]
    over: OverrideArgs,
    /// Trained model bundle
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Corpus file to score on
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Which patient-level split to use: test, train or all
    #[arg(long, default_value = "test")]
    split: String,
    /// Fraction of patients in the test split
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// CSV destination; stdout when omitted
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn stats_csv(stats: &Tensor) -> String {
    let (classes, cols) = (stats.shape()[0], stats.shape()[1]);
    let mut out = String::from("class");
    for j in 1..cols {
        out.push_str(&format!(",sentence_{j}"));
    }
    out.push_str(",overall\n");
    for i in 0..classes {
        out.push_str(&class_name(i));
        let row = &stats.data()[i * cols..(i + 1) * cols];
        for v in row {
            out.push_str(&format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

fn cmd_text_attn_stats(a: TextAttnStatsArgs) -> Result<()> {
    let loaded = load_bundle(&a.checkpoint, &a.over)?;
    require_file(&a.corpus, "corpus")?;
    let corpus = read_corpus(&a.corpus)?;
    check_vocab(&corpus, &loaded.vocab)?;
    let model = restore_classifier(&loaded)?;
    let idx = split_indices(&corpus, &a.split, a.test_fraction)?;
    let stats = text_attention_stats(&model, &corpus, &idx)?;
    let csv = stats_csv(&stats);
    match &a.out {
        Some(path) => {
            write_text(path, &csv)?;
            write_text(&echo_path(path), &loaded.run.to_text())?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Args, Debug)]
struct CaptionArgs {
    #[command(flatten)]
    over: OverrideArgs,
    /// Model bundle (classifier, or captioner saved by an earlier run)
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Corpus file providing fine-tune data and the sample to describe
    #[arg(long, value_name = "FILE")]
    corpus: PathBuf,
    /// Decoder fine-tuning epochs to run before generating
    #[arg(long, default_value_t = 0)]
    finetune_epochs: usize,
    /// Fraction of patients excluded from fine-tuning
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Corpus sample to describe
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Write the generated report here instead of stdout
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Save the fine-tuned captioner as a new bundle
    #[arg(long, value_name = "FILE")]
    save: Option<PathBuf>,
}

fn cmd_caption(a: CaptionArgs) -> Result<()> {
    let loaded = load_bundle(&a.checkpoint, &a.over)?;
    require_file(&a.corpus, "corpus")?;
    let corpus = read_corpus(&a.corpus)?;
    check_vocab(&corpus, &loaded.vocab)?;
    if a.sample >= corpus.samples.len() {
        return Err(Error::input(format!(
            "sample {} out of range (corpus has {})",
            a.sample,
            corpus.samples.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(loaded.run.seed);
    let model = TandemNet::new(loaded.run.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let cap = Captioner::new(model, &mut rng);
    if loaded.ckpt.tensor("caption.adapter.weight").is_some() {
        checkpoint::restore_params(&loaded.ckpt, |f| cap.visit_params(f))?;
    } else {
        // Classifier-only bundle: decoder adapter and readout keep their
        // fresh init and need fine-tuning before decodes mean anything.
        checkpoint::restore_params(&loaded.ckpt, |f| cap.model.visit_params(f))?;
        if a.finetune_epochs == 0 {
            eprintln!("note: checkpoint has no decoder weights and --finetune-epochs is 0; output will be noise");
        }
    }

    let mut opt = Optimizers::new(loaded.run.caption.optimizer())?;
    if a.finetune_epochs > 0 {
        let params = cap.trainable_params();
        let splits = patient_level_split(&corpus, a.test_fraction, 0.0)?;
        let mut order = splits.train;
        if order.is_empty() {
            return Err(Error::input("no samples left to fine-tune on".to_string()));
        }
        for epoch in 0..a.finetune_epochs {
            order.shuffle(&mut rng);
            let (mut cap_loss, mut cls_loss, mut cls_n) = (0.0, 0.0, 0usize);
            for &i in &order {
                let s = &corpus.samples[i];
                let stats =
                    cap.train_step(&s.image, &s.reports[0], Some(s.label as usize), &loaded.run.caption, &params, &mut opt, epoch, &mut rng)?;
                cap_loss += stats.caption_loss;
                if !stats.classification_loss.is_nan() {
                    cls_loss += stats.classification_loss;
                    cls_n += 1;
                }
            }
            println!(
                "epoch {epoch}: caption loss {:.4}, classification loss {:.4}",
                cap_loss / order.len() as f64,
                if cls_n > 0 { cls_loss / cls_n as f64 } else { f64::NAN }
            );
        }
    }

    if let Some(path) = &a.save {
        let ckpt = checkpoint::bundle(
            |f| cap.visit_params(f),
            Some(&opt),
            a.finetune_epochs,
            &rng,
            &loaded.run.to_text(),
            &corpus.vocab.to_tsv(),
        );
        ckpt.save(path)?;
        println!("saved captioner to {}", path.display());
    }

    let sample = &corpus.samples[a.sample];
    let tokens = cap.generate_report(&sample.image, &loaded.run.caption)?;
    let text = detokenize(&corpus.vocab, &tokens);
    eprintln!(
        "sample {} (true class {} {}), {} tokens:",
        a.sample,
        sample.label,
        class_name(sample.label as usize),
        tokens.len()
    );
    match &a.out {
        Some(path) => {
            write_text(path, &text)?;
            write_text(&echo_path(path), &loaded.run.to_text())?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}
