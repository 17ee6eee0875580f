//! Deterministic synthetic text with learnable sequential structure.
//!
//! A fixed random "language" is a Markov chain over word classes. Each class
//! emits words from a Zipf distribution, and a per-paragraph topic rotates
//! which words of a class are frequent, so context beyond the previous token
//! carries information. Train/valid/test draw independent text from one
//! language.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageSpec {
    pub word_types: usize,
    pub classes: usize,
    pub successors: usize,
    pub topics: usize,
    pub zipf_exponent: f64,
    pub sentences_per_topic: usize,
    pub max_sentence_len: usize,
}

impl Default for LanguageSpec {
    fn default() -> Self {
        LanguageSpec {
            word_types: 6000,
            classes: 32,
            successors: 4,
            topics: 4,
            zipf_exponent: 1.1,
            sentences_per_topic: 6,
            max_sentence_len: 40,
        }
    }
}

/// Cumulative-weight categorical sampler.
#[derive(Clone, Debug)]
struct Categorical {
    cumulative: Vec<f64>,
}

impl Categorical {
    fn new(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        for c in cumulative.iter_mut() {
            *c /= acc;
        }
        Categorical { cumulative }
    }

    fn sample(&self, rng: &mut SeededRng) -> usize {
        let u: f64 = rng.uniform(0.0, 1.0);
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }
}

#[derive(Clone, Debug)]
struct WordClass {
    first_word: usize,
    size: usize,
    next: Vec<usize>,
    next_dist: Categorical,
    end_prob: f64,
    zipf: Categorical,
}

#[derive(Clone, Debug)]
pub struct Language {
    spec: LanguageSpec,
    classes: Vec<WordClass>,
    start: Categorical,
    start_classes: Vec<usize>,
}

impl Language {
    pub fn new(spec: LanguageSpec, seed: u64) -> Result<Self> {
        if spec.classes == 0 || spec.word_types < spec.classes || spec.successors == 0 || spec.topics == 0 {
            return Err(Error::InvalidArgument(format!("degenerate language spec {spec:?}")));
        }
        let mut rng = SeededRng::new(seed).derive("language");

        // Class sizes fall off with class rank; every class gets at least one word.
        let raw: Vec<f64> = (0..spec.classes).map(|c| 1.0 / ((c + 1) as f64).sqrt()).collect();
        let total: f64 = raw.iter().sum();
        let spare = spec.word_types - spec.classes;
        let mut sizes: Vec<usize> = raw.iter().map(|w| 1 + (w / total * spare as f64) as usize).collect();
        let assigned: usize = sizes.iter().sum();
        sizes[0] += spec.word_types - assigned;

        let succ_weights: Vec<f64> = (0..spec.successors).map(|i| 1.0 / (1u64 << i) as f64).collect();
        let mut first_word = 0;
        let mut classes = Vec::with_capacity(spec.classes);
        for (c, &size) in sizes.iter().enumerate() {
            let next: Vec<usize> = (0..spec.successors).map(|_| rng.below(spec.classes)).collect();
            let end_prob = if c % 5 == 4 { 0.6 } else { 0.02 };
            let zipf_w: Vec<f64> = (0..size).map(|r| 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent)).collect();
            classes.push(WordClass {
                first_word,
                size,
                next,
                next_dist: Categorical::new(&succ_weights),
                end_prob,
                zipf: Categorical::new(&zipf_w),
            });
            first_word += size;
        }
        let start_classes: Vec<usize> = (0..4).map(|_| rng.below(spec.classes)).collect();
        Ok(Language { start: Categorical::new(&[0.4, 0.3, 0.2, 0.1]), start_classes, classes, spec })
    }

    fn word(&self, class: usize, topic: usize, rng: &mut SeededRng) -> usize {
        let cls = &self.classes[class];
        let rank = cls.zipf.sample(rng);
        let shift = topic * cls.size / self.spec.topics;
        cls.first_word + (rank + shift) % cls.size
    }

    /// Text of at least `n_tokens` tokens (line ends included), one
    /// sentence per line.
    pub fn sample_text(&self, n_tokens: usize, rng: &mut SeededRng) -> String {
        let mut out = String::new();
        let mut produced = 0;
        let mut sentences = 0;
        let mut topic = rng.below(self.spec.topics);
        while produced < n_tokens {
            if sentences % self.spec.sentences_per_topic == 0 {
                topic = rng.below(self.spec.topics);
            }
            let mut class = self.start_classes[self.start.sample(rng)];
            let mut len = 0;
            loop {
                if len > 0 {
                    out.push(' ');
                }
                out.push('w');
                out.push_str(&self.word(class, topic, rng).to_string());
                len += 1;
                let cls = &self.classes[class];
                if len >= self.spec.max_sentence_len || (len >= 3 && rng.uniform(0.0, 1.0) < cls.end_prob) {
                    break;
                }
                class = cls.next[cls.next_dist.sample(rng)];
            }
            out.push('\n');
            produced += len + 1;
            sentences += 1;
        }
        out
    }
}

/// Paths of a written train/valid/test corpus.
#[derive(Clone, Debug)]
pub struct CorpusFiles {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

/// Writes `train.txt`, `valid.txt` and `test.txt` under `dir`.
pub fn write_corpus(
    dir: &Path,
    spec: LanguageSpec,
    seed: u64,
    sizes: (usize, usize, usize),
) -> Result<CorpusFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let lang = Language::new(spec, seed)?;
    let root = SeededRng::new(seed);
    let files = CorpusFiles { train: dir.join("train.txt"), valid: dir.join("valid.txt"), test: dir.join("test.txt") };
    for (path, n, label) in [
        (&files.train, sizes.0, "train"),
        (&files.valid, sizes.1, "valid"),
        (&files.test, sizes.2, "test"),
    ] {
        let text = lang.sample_text(n, &mut root.derive(label));
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}
