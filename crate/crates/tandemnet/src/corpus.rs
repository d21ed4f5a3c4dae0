//! Synthetic dataset with a known ground truth: procedurally rendered images
//! plus templated five-sentence reports. Labels are a deterministic function
//! of a five-way severity vector; the text states every severity exactly,
//! while the image renders it through noise, so text is the easier modality
//! by construction.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};
use crate::vocab::{TokenizedReport, Vocabulary};

pub const NUM_FEATURES: usize = 5;
pub const NUM_CLASSES: usize = 4;
pub const SEVERITY_LEVELS: u8 = 3;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] =
    ["nuclear pleomorphism", "cell crowding", "cell polarity", "mitosis", "prominence of nucleoli"];
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["normal", "low-grade", "high-grade", "insufficient"];
pub const LEVEL_WORDS: [&str; SEVERITY_LEVELS as usize] = ["minimal", "moderate", "marked"];

/// The polarity feature alone decides the "insufficient" class, giving one
/// designated sentence whose content pins one label.
pub const DESIGNATED_FEATURE: usize = 2;
pub const DESIGNATED_CLASS: usize = 3;

/// Sentence templates, `{}` is the severity word. Indexed [feature][variant].
const TEMPLATES: [[&str; 5]; NUM_FEATURES] = [
    [
        "nuclear pleomorphism is {} in this section",
        "the nuclei show {} pleomorphism",
        "{} nuclear pleomorphism is seen",
        "pleomorphism of the nuclei appears {}",
        "degree of nuclear pleomorphism is {}",
    ],
    [
        "cell crowding is {} throughout",
        "the cells show {} crowding",
        "{} crowding of cells is seen",
        "crowding of the cells appears {}",
        "degree of cell crowding is {}",
    ],
    [
        "loss of cell polarity is {}",
        "the cells show {} loss of polarity",
        "{} loss of polarity is seen",
        "polarity loss across cells appears {}",
        "degree of polarity loss is {}",
    ],
    [
        "mitotic activity is {} overall",
        "the tissue shows {} mitotic figures",
        "{} mitotic activity is seen",
        "frequency of mitotic figures appears {}",
        "degree of mitotic activity is {}",
    ],
    [
        "nucleoli prominence is {} here",
        "the cells show {} prominent nucleoli",
        "{} prominence of nucleoli is seen",
        "prominence of the nucleoli appears {}",
        "degree of nucleoli prominence is {}",
    ],
];

/// Per-feature blob color (RGB) and the image zone it may paint, in units of
/// the 32-pixel reference frame: (row0, row1, col0, col1).
const FEATURE_COLORS: [[Elem; 3]; NUM_FEATURES] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.90, 0.20],
    [0.20, 0.30, 0.90],
    [0.90, 0.80, 0.20],
    [0.80, 0.20, 0.90],
];
const FEATURE_ZONES: [(usize, usize, usize, usize); NUM_FEATURES] =
    [(0, 8, 0, 16), (0, 8, 16, 32), (8, 16, 0, 16), (8, 16, 16, 32), (16, 24, 0, 16)];

/// Label rule over a severity vector (entries in 0..3). Checked in order:
/// marked polarity loss wins, then the near-zero and high-burden bands.
pub fn class_of(severity: &[u8; NUM_FEATURES]) -> u8 {
    if severity[DESIGNATED_FEATURE] == 2 {
        return DESIGNATED_CLASS as u8;
    }
    let total: u32 = severity.iter().map(|&s| s as u32).sum();
    if total <= 1 {
        0
    } else if total >= 6 {
        2
    } else {
        1
    }
}

/// All 3^5 severity vectors partitioned by class.
pub fn severity_buckets() -> [Vec<[u8; NUM_FEATURES]>; NUM_CLASSES] {
    let mut buckets: [Vec<[u8; NUM_FEATURES]>; NUM_CLASSES] = Default::default();
    for code in 0..3usize.pow(NUM_FEATURES as u32) {
        let mut v = [0u8; NUM_FEATURES];
        let mut rest = code;
        for slot in &mut v {
            *slot = (rest % 3) as u8;
            rest /= 3;
        }
        buckets[class_of(&v) as usize].push(v);
    }
    buckets
}

/// Vocabulary covering every template and severity word, independent of what
/// a particular corpus happens to sample.
pub fn canonical_vocab() -> Vocabulary {
    let mut vocab = Vocabulary::new();
    for level in LEVEL_WORDS {
        vocab.add(level);
    }
    for bank in TEMPLATES {
        for template in bank {
            for word in template.split_whitespace() {
                if word != "{}" {
                    vocab.add(word);
                }
            }
        }
    }
    vocab
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub num_patients: usize,
    pub samples_per_patient: usize,
    /// Square image side; a multiple of 32 so feature zones stay aligned to
    /// the encoder's region grid.
    pub image_size: usize,
    /// Relative intensity jitter per feature per sample. At the default the
    /// adjacent severity levels overlap visually, so images alone cannot
    /// reach perfect accuracy.
    pub feature_jitter: Elem,
    /// Half-width of the uniform background noise around mid gray.
    pub background_noise: Elem,
    /// Report variants per sample (1..=5).
    pub report_variants: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            num_patients: 200,
            samples_per_patient: 5,
            image_size: 32,
            feature_jitter: 0.18,
            background_noise: 0.15,
            report_variants: 5,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_patients == 0 || self.samples_per_patient == 0 {
            return Err(Error::config("corpus", "need at least one patient and one sample".to_string()));
        }
        if self.image_size < 32 || !self.image_size.is_multiple_of(32) {
            return Err(Error::config("image_size", format!("{} must be a positive multiple of 32", self.image_size)));
        }
        if !(0.0..1.0).contains(&self.feature_jitter) {
            return Err(Error::config("feature_jitter", format!("{} outside [0, 1)", self.feature_jitter)));
        }
        if !(0.0..0.5).contains(&self.background_noise) {
            return Err(Error::config("background_noise", format!("{} outside [0, 0.5)", self.background_noise)));
        }
        if self.report_variants == 0 || self.report_variants > TEMPLATES[0].len() {
            return Err(Error::config(
                "report_variants",
                format!("{} outside 1..={}", self.report_variants, TEMPLATES[0].len()),
            ));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.num_patients * self.samples_per_patient
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor, // [3, H, W], values in [0, 1]
    pub reports: Vec<TokenizedReport>,
    pub label: u8,
    pub severity: [u8; NUM_FEATURES],
    pub patient_id: u32,
}

#[derive(Debug)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub vocab: Vocabulary,
    pub image_size: usize,
    pub sentences: usize,
}

fn patient_seed(base: u64, patient: usize) -> u64 {
    base ^ (patient as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Renders one image: noisy mid-gray background, then per-feature blobs in
/// that feature's zone. Blob count and color strength both rise with
/// severity; strength is jittered per sample.
pub fn render_image<R: Rng>(rng: &mut R, spec: &GeneratorSpec, severity: &[u8; NUM_FEATURES]) -> Tensor {
    let size = spec.image_size;
    let scale = size / 32;
    let mut img = Tensor::zeros(vec![3, size, size]);
    let plane = size * size;
    for v in img.data_mut().iter_mut() {
        *v = 0.5 + rng.gen_range(-spec.background_noise..=spec.background_noise);
    }
    for (f, &sev) in severity.iter().enumerate() {
        let (r0, r1, c0, c1) = FEATURE_ZONES[f];
        let (r0, r1, c0, c1) = (r0 * scale, r1 * scale, c0 * scale, c1 * scale);
        let jitter = 1.0 + rng.gen_range(-spec.feature_jitter..=spec.feature_jitter);
        let strength = ((0.35 + 0.2 * sev as Elem) * jitter).clamp(0.0, 1.0);
        let count = (2 + 2 * sev as i64 + rng.gen_range(-1..=1)).max(1) as usize;
        let side = 2 * scale;
        for _ in 0..count {
            let top = rng.gen_range(r0..=r1 - side);
            let left = rng.gen_range(c0..=c1 - side);
            for (ch, &color) in FEATURE_COLORS[f].iter().enumerate() {
                for r in top..top + side {
                    for c in left..left + side {
                        let idx = ch * plane + r * size + c;
                        let bg = img.data()[idx];
                        img.data_mut()[idx] = bg + strength * (color - bg);
                    }
                }
            }
        }
    }
    img
}

fn sentence_words(feature: usize, variant: usize, severity: u8) -> Vec<String> {
    TEMPLATES[feature][variant]
        .split_whitespace()
        .map(|w| if w == "{}" { LEVEL_WORDS[severity as usize].to_string() } else { w.to_string() })
        .collect()
}

pub fn make_reports(
    vocab: &mut Vocabulary,
    severity: &[u8; NUM_FEATURES],
    variants: usize,
) -> Vec<TokenizedReport> {
    (0..variants)
        .map(|v| {
            let sentences: Vec<Vec<String>> =
                (0..NUM_FEATURES).map(|f| sentence_words(f, v, severity[f])).collect();
            TokenizedReport::from_sentences(vocab, &sentences)
        })
        .collect()
}

/// Deterministic for a given spec: classes are drawn uniformly, then a
/// severity vector from that class's bucket, so labels stay balanced.
pub fn generate_corpus(spec: &GeneratorSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut vocab = canonical_vocab();
    let buckets = severity_buckets();
    let mut samples = Vec::with_capacity(spec.total_samples());
    for patient in 0..spec.num_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(patient_seed(spec.seed, patient));
        for _ in 0..spec.samples_per_patient {
            let class = rng.gen_range(0..NUM_CLASSES);
            let severity = buckets[class][rng.gen_range(0..buckets[class].len())];
            let image = render_image(&mut rng, spec, &severity);
            let reports = make_reports(&mut vocab, &severity, spec.report_variants);
            samples.push(Sample { image, reports, label: class as u8, severity, patient_id: patient as u32 });
        }
    }
    Ok(Corpus { samples, vocab, image_size: spec.image_size, sentences: NUM_FEATURES })
}

/// Sample indices for the patient-level train/validation/test partition.
/// Patients never straddle a boundary.
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn patient_level_split(corpus: &Corpus, test_fraction: f64, validation_fraction: f64) -> Result<Splits> {
    if !(0.0..1.0).contains(&test_fraction) || !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::config("split", "fractions must lie in [0, 1)".to_string()));
    }
    let mut patients: Vec<u32> = corpus.samples.iter().map(|s| s.patient_id).collect();
    patients.sort_unstable();
    patients.dedup();
    let n = patients.len();
    let test_patients = ((n as f64 * test_fraction).round() as usize).min(n.saturating_sub(1));
    let holdout_start = n - test_patients;
    let val_patients = (((holdout_start) as f64 * validation_fraction).round() as usize)
        .min(holdout_start.saturating_sub(1));
    let val_start = holdout_start - val_patients;
    let group_of = |pid: u32| -> usize {
        let pos = patients.binary_search(&pid).expect("patient id from this corpus");
        if pos >= holdout_start {
            2
        } else if pos >= val_start {
            1
        } else {
            0
        }
    };
    let mut splits = Splits { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for (i, s) in corpus.samples.iter().enumerate() {
        match group_of(s.patient_id) {
            0 => splits.train.push(i),
            1 => splits.validation.push(i),
            _ => splits.test.push(i),
        }
    }
    if splits.train.is_empty() {
        return Err(Error::config("split", "no training samples left after the split".to_string()));
    }
    Ok(splits)
}

const MAGIC: &[u8; 4] = b"TNDC";
const VERSION: u32 = 1;

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(Error::format(at, format!("truncated while reading {what}")))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.take(&mut b, what)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}

pub fn write_corpus_to<W: Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(corpus.image_size as u32).to_le_bytes())?;
    w.write_all(&(corpus.sentences as u32).to_le_bytes())?;
    w.write_all(&(corpus.samples.len() as u64).to_le_bytes())?;
    let vocab_tsv = corpus.vocab.to_tsv();
    w.write_all(&(vocab_tsv.len() as u64).to_le_bytes())?;
    w.write_all(vocab_tsv.as_bytes())?;
    for s in &corpus.samples {
        w.write_all(&[s.label])?;
        w.write_all(&s.severity)?;
        w.write_all(&s.patient_id.to_le_bytes())?;
        // Images are stored at f32 regardless of the training precision.
        #[allow(clippy::unnecessary_cast)]
        for &v in s.image.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.write_all(&(s.reports.len() as u32).to_le_bytes())?;
        for r in &s.reports {
            w.write_all(&(r.tokens.len() as u32).to_le_bytes())?;
            for &t in &r.tokens {
                w.write_all(&t.to_le_bytes())?;
            }
            w.write_all(&(r.sentence_ends.len() as u32).to_le_bytes())?;
            for &p in &r.sentence_ends {
                w.write_all(&(p as u32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_corpus_from<R: Read>(r: R) -> Result<Corpus> {
    let mut r = CountingReader::new(r);
    let mut magic = [0u8; 4];
    r.take(&mut magic, "header magic")?;
    if &magic != MAGIC {
        return Err(Error::format(0, format!("not a corpus file (magic {magic:?})")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported corpus version {version}, expected {VERSION}")));
    }
    let image_size = r.u32("image size")? as usize;
    let sentences = r.u32("sentence count")? as usize;
    let count = r.u64("sample count")? as usize;
    let vocab_len = r.u64("vocabulary length")? as usize;
    let mut vocab_bytes = vec![0u8; vocab_len];
    r.take(&mut vocab_bytes, "vocabulary")?;
    let vocab_text = String::from_utf8(vocab_bytes)
        .map_err(|e| Error::format(r.offset, format!("vocabulary is not UTF-8: {e}")))?;
    let vocab = Vocabulary::from_tsv(&vocab_text)?;

    let plane = 3 * image_size * image_size;
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let label = r.u8("label")?;
        let mut severity = [0u8; NUM_FEATURES];
        r.take(&mut severity, "severity")?;
        let patient_id = r.u32("patient id")?;
        let mut pixels = vec![0u8; plane * 4];
        r.take(&mut pixels, "image")?;
        #[allow(clippy::unnecessary_cast)]
        let data: Vec<Elem> = pixels
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as Elem)
            .collect();
        let image = Tensor::new(vec![3, image_size, image_size], data)?;
        let report_count = r.u32("report count")? as usize;
        let mut reports = Vec::with_capacity(report_count);
        for _ in 0..report_count {
            let token_count = r.u32("token count")? as usize;
            let mut tokens = Vec::with_capacity(token_count);
            for _ in 0..token_count {
                tokens.push(r.u32("token")?);
            }
            let marker_count = r.u32("marker count")? as usize;
            let mut sentence_ends = Vec::with_capacity(marker_count);
            for _ in 0..marker_count {
                sentence_ends.push(r.u32("marker position")? as usize);
            }
            reports.push(
                TokenizedReport::new(tokens, sentence_ends)
                    .map_err(|e| Error::format(r.offset, format!("sample {i}: {e}")))?,
            );
        }
        samples.push(Sample { image, reports, label, severity, patient_id });
    }
    Ok(Corpus { samples, vocab, image_size, sentences })
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_corpus_to(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path)?;
    read_corpus_from(BufReader::new(file))
}

/// Writes the first `count` sample images as PNGs for inspection.
pub fn dump_pngs(corpus: &Corpus, dir: &Path, count: usize) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let size = corpus.image_size;
    let plane = size * size;
    let mut written = Vec::new();
    for (i, s) in corpus.samples.iter().take(count).enumerate() {
        let mut img = image::RgbImage::new(size as u32, size as u32);
        for r in 0..size {
            for c in 0..size {
                let px = |ch: usize| (s.image.data()[ch * plane + r * size + c].clamp(0.0, 1.0) * 255.0) as u8;
                img.put_pixel(c as u32, r as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        let path = dir.join(format!("sample_{i:04}_class{}.png", s.label));
        img.save(&path).map_err(|e| Error::input(format!("png write failed: {e}")))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{BOS, EOS, SENT_END, UNK};

    fn small_spec() -> GeneratorSpec {
        GeneratorSpec { num_patients: 10, samples_per_patient: 3, seed: 7, ..GeneratorSpec::default() }
    }

    #[test]
    fn class_rule_pins_the_corners() {
        assert_eq!(class_of(&[0, 0, 0, 0, 0]), 0);
        assert_eq!(class_of(&[1, 0, 0, 0, 0]), 0);
        assert_eq!(class_of(&[0, 0, 2, 0, 0]), 3, "designated feature overrides");
        assert_eq!(class_of(&[2, 2, 2, 2, 2]), 3);
        assert_eq!(class_of(&[2, 2, 0, 2, 0]), 2);
        assert_eq!(class_of(&[1, 1, 1, 0, 0]), 1);
    }

    #[test]
    fn buckets_partition_all_severity_vectors() {
        let buckets = severity_buckets();
        let total: usize = buckets.iter().map(Vec::len).sum();
        assert_eq!(total, 243);
        for (class, bucket) in buckets.iter().enumerate() {
            assert!(!bucket.is_empty(), "class {class} unreachable");
            for v in bucket {
                assert_eq!(class_of(v) as usize, class);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_the_corpus_bitwise() {
        let spec = small_spec();
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.reports, y.reports);
            assert_eq!((x.label, x.severity, x.patient_id), (y.label, y.severity, y.patient_id));
        }
    }

    #[test]
    fn stored_labels_replay_from_stored_severities() {
        let spec = GeneratorSpec { num_patients: 200, samples_per_patient: 5, seed: 3, ..Default::default() };
        let corpus = generate_corpus(&spec).unwrap();
        assert_eq!(corpus.samples.len(), 1000);
        for s in &corpus.samples {
            assert_eq!(s.label, class_of(&s.severity));
        }
    }

    #[test]
    fn reports_have_five_marked_sentences_within_length_bounds() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        for s in &corpus.samples {
            assert_eq!(s.reports.len(), 5);
            for r in &s.reports {
                assert_eq!(r.sentence_ends.len(), 5);
                assert!(
                    (30..=59).contains(&r.tokens.len()),
                    "report length {} outside bounds",
                    r.tokens.len()
                );
                assert_eq!(r.tokens[0], BOS);
                assert_eq!(*r.tokens.last().unwrap(), EOS);
                assert!(!r.tokens.contains(&UNK));
            }
        }
    }

    #[test]
    fn every_report_variant_states_the_same_severities() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let level_ids: Vec<u32> = LEVEL_WORDS.iter().map(|w| corpus.vocab.get(w).unwrap()).collect();
        for s in &corpus.samples {
            for r in &s.reports {
                let mut start = 1; // skip BOS
                for (f, &end) in r.sentence_ends.iter().enumerate() {
                    let sentence = &r.tokens[start..end];
                    let levels: Vec<u8> = sentence
                        .iter()
                        .filter_map(|t| level_ids.iter().position(|l| l == t).map(|p| p as u8))
                        .collect();
                    assert_eq!(levels, vec![s.severity[f]], "sentence {f} mis-states severity");
                    start = end + 1;
                }
            }
        }
        // Distinct variants produce distinct token sequences.
        let s = &corpus.samples[0];
        assert_ne!(s.reports[0].tokens, s.reports[1].tokens);
    }

    #[test]
    fn blobs_stay_inside_their_feature_zone() {
        let spec = GeneratorSpec::default();
        for f in 0..NUM_FEATURES {
            let mut severity = [0u8; NUM_FEATURES];
            severity[f] = 2;
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            // Suppress everything except feature f by comparing against a
            // render with the same rng stream and zero background.
            let mut lone = GeneratorSpec { background_noise: 0.0, ..spec.clone() };
            lone.feature_jitter = 0.0;
            let img = render_image(&mut rng, &lone, &severity);
            let size = lone.image_size;
            let (r0, r1, c0, c1) = FEATURE_ZONES[f];
            let mut painted_inside = 0;
            for r in 0..size {
                for c in 0..size {
                    let v = img.data()[r * size + c]; // red channel
                    let deviates = (v - 0.5).abs() > 1e-9;
                    // Zones of other features with severity 0 still get a
                    // couple of faint blobs, so only assert about pixels
                    // outside every zone.
                    let in_any_zone = FEATURE_ZONES
                        .iter()
                        .any(|&(zr0, zr1, zc0, zc1)| r >= zr0 && r < zr1 && c >= zc0 && c < zc1);
                    if !in_any_zone {
                        assert!(!deviates, "paint leaked outside all zones at ({r},{c})");
                    }
                    if r >= r0 && r < r1 && c >= c0 && c < c1 && deviates {
                        painted_inside += 1;
                    }
                }
            }
            assert!(painted_inside > 0, "feature {f} painted nothing in its zone");
        }
    }

    #[test]
    fn patient_split_is_disjoint_and_total() {
        let corpus = generate_corpus(&GeneratorSpec {
            num_patients: 20,
            samples_per_patient: 4,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        let splits = patient_level_split(&corpus, 0.2, 0.2).unwrap();
        assert_eq!(splits.train.len() + splits.validation.len() + splits.test.len(), 80);
        assert!(!splits.test.is_empty() && !splits.validation.is_empty());
        let pid = |idx: &Vec<usize>| -> std::collections::HashSet<u32> {
            idx.iter().map(|&i| corpus.samples[i].patient_id).collect()
        };
        let (tr, va, te) = (pid(&splits.train), pid(&splits.validation), pid(&splits.test));
        assert!(tr.is_disjoint(&va));
        assert!(tr.is_disjoint(&te));
        assert!(va.is_disjoint(&te));
    }

    #[test]
    fn container_round_trip_is_byte_identical() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let mut bytes = Vec::new();
        write_corpus_to(&corpus, &mut bytes).unwrap();
        let back = read_corpus_from(&bytes[..]).unwrap();
        let mut again = Vec::new();
        write_corpus_to(&back, &mut again).unwrap();
        assert_eq!(bytes, again, "write-read-write must be a fixed point");
        assert_eq!(back.vocab, corpus.vocab);
        assert_eq!(back.samples.len(), corpus.samples.len());
    }

    #[test]
    fn truncated_container_is_a_format_error_with_offset() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let mut bytes = Vec::new();
        write_corpus_to(&corpus, &mut bytes).unwrap();
        bytes.truncate(bytes.len() / 2);
        match read_corpus_from(&bytes[..]) {
            Err(Error::Format { offset, detail }) => {
                assert!(offset > 0, "offset should point at the failure: {detail}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
        match read_corpus_from(&b"NOPE"[..]) {
            Err(Error::Format { detail, .. }) => assert!(detail.contains("magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn thousand_sample_corpus_stays_under_50mb() {
        let spec = GeneratorSpec { num_patients: 200, samples_per_patient: 5, seed: 1, ..Default::default() };
        let corpus = generate_corpus(&spec).unwrap();
        let mut bytes = Vec::new();
        write_corpus_to(&corpus, &mut bytes).unwrap();
        assert!(bytes.len() < 50 * 1024 * 1024, "container is {} bytes", bytes.len());
    }

    #[test]
    fn generated_tokens_all_resolve_in_the_canonical_vocabulary() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        assert_eq!(corpus.vocab, canonical_vocab(), "sampling must not grow the vocabulary");
        for s in &corpus.samples {
            for r in &s.reports {
                for &t in &r.tokens {
                    assert!(corpus.vocab.token(t).is_some());
                }
                assert_eq!(r.tokens.iter().filter(|&&t| t == SENT_END).count(), 5);
            }
        }
    }
}
