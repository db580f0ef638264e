//! Seeded synthetic corpora and their conversion to token sequences.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::HarnessError;
use crate::audio::{fit_codebooks, rvq_encode, Codebooks};
use crate::sequence::{Modality, TokenSequence};
use crate::vision::{build_nfsp_sequence, build_pyramid_codes, Latent, NfspOptions};

/// Next-token probabilities of the three continuations of every context.
pub const GRAMMAR_PROBS: [f64; 3] = [0.7, 0.2, 0.1];

/// Second-order grammar: each ordered token pair has three seeded
/// continuations drawn with [`GRAMMAR_PROBS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grammar {
    pub vocab: usize,
    next: Vec<[usize; 3]>,
}

impl Grammar {
    pub fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let next = (0..vocab * vocab)
            .map(|_| {
                let picks = sample(&mut rng, vocab, 3.min(vocab)).into_vec();
                [0, 1, 2].map(|i| picks[i % picks.len()])
            })
            .collect();
        Self { vocab, next }
    }

    pub fn continuations(&self, a: usize, b: usize) -> [usize; 3] {
        self.next[a * self.vocab + b]
    }

    pub fn sample<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(len);
        while out.len() < len {
            let t = if out.len() < 2 {
                rng.gen_range(0..self.vocab)
            } else {
                let cont = self.continuations(out[out.len() - 2], out[out.len() - 1]);
                let u: f64 = rng.gen();
                if u < GRAMMAR_PROBS[0] {
                    cont[0]
                } else if u < GRAMMAR_PROBS[0] + GRAMMAR_PROBS[1] {
                    cont[1]
                } else {
                    cont[2]
                }
            };
            out.push(t);
        }
        out
    }
}

/// Corpus shapes shared by every item of a modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusShape {
    pub text_length: usize,
    pub vocab: usize,
    pub pyramid: Vec<(usize, usize)>,
    pub channels: usize,
    pub audio_frames: usize,
    pub audio_dim: usize,
}

impl CorpusShape {
    pub fn of(config: &RunConfig) -> Self {
        Self {
            text_length: config.data.text_length,
            vocab: config.model.text_vocab,
            pyramid: config.data.vision_pyramid.clone(),
            channels: config.model.bits,
            audio_frames: config.data.audio_frames,
            audio_dim: config.data.audio_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "modality", content = "items")]
pub enum Dataset {
    Text(Vec<Vec<usize>>),
    Vision(Vec<Latent>),
    /// Clips of `frames × dim` feature frames.
    Audio(Vec<Vec<Vec<f64>>>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Text(v) => v.len(),
            Dataset::Vision(v) => v.len(),
            Dataset::Audio(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn split_off(&mut self, at: usize) -> Dataset {
        match self {
            Dataset::Text(v) => Dataset::Text(v.split_off(at)),
            Dataset::Vision(v) => Dataset::Vision(v.split_off(at)),
            Dataset::Audio(v) => Dataset::Audio(v.split_off(at)),
        }
    }
}

/// Salt separating the modality streams of one seed.
fn stream_seed(modality: Modality, seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(modality.index() as u64 + 1)
}

/// `size` items of one modality. Text is drawn from the grammar seeded by
/// `seed`; vision latents are sums of seeded plane waves on the finest
/// grid; audio frames are seeded sinusoid mixtures with small noise.
pub fn gen_corpus(modality: Modality, size: usize, seed: u64, shape: &CorpusShape) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(modality, seed));
    match modality {
        Modality::Text => {
            let grammar = Grammar::new(shape.vocab, seed);
            Dataset::Text((0..size).map(|_| grammar.sample(shape.text_length, &mut rng)).collect())
        }
        Modality::Vision => {
            let (h, w) = *shape.pyramid.last().expect("validated pyramid");
            Dataset::Vision((0..size).map(|_| plane_waves(h, w, shape.channels, &mut rng)).collect())
        }
        Modality::Audio => {
            Dataset::Audio((0..size).map(|_| sinusoid_clip(shape.audio_frames, shape.audio_dim, &mut rng)).collect())
        }
    }
}

fn plane_waves<R: Rng>(h: usize, w: usize, channels: usize, rng: &mut R) -> Latent {
    let waves: Vec<(f64, f64, f64)> =
        (0..2).map(|_| (rng.gen_range(0.2..1.2), rng.gen_range(0.2..1.2), rng.gen_range(0.0..6.3))).collect();
    let offsets: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.0..6.3)).collect();
    let mut data = Vec::with_capacity(h * w * channels);
    for r in 0..h {
        for c in 0..w {
            for off in &offsets {
                let v: f64 = waves.iter().map(|&(fr, fc, ph)| (fr * r as f64 + fc * c as f64 + ph + off).sin()).sum();
                data.push(v / 2.0);
            }
        }
    }
    Latent::new(h, w, channels, data).expect("sized by construction")
}

fn sinusoid_clip<R: Rng>(frames: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let params: Vec<(f64, f64)> = (0..dim).map(|_| (rng.gen_range(0.1..0.8), rng.gen_range(0.0..6.3))).collect();
    (0..frames)
        .map(|t| params.iter().map(|&(om, ph)| (om * t as f64 + ph).sin() + rng.gen_range(-0.05..0.05)).collect())
        .collect()
}

/// Training and validation items of one modality from a single stream; the
/// validation items are the last `val` ones.
pub fn gen_split(modality: Modality, train: usize, val: usize, seed: u64, shape: &CorpusShape) -> (Dataset, Dataset) {
    let mut all = gen_corpus(modality, train + val, seed, shape);
    let tail = all.split_off(train);
    (all, tail)
}

/// Token sequences ready for the model.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<TokenSequence>,
    pub val: Vec<TokenSequence>,
    /// Fitted on the training audio only.
    pub codebooks: Option<Codebooks>,
}

impl Prepared {
    /// Validation sequences of one modality.
    pub fn val_of(&self, modality: Modality) -> Vec<&TokenSequence> {
        self.val.iter().filter(|s| s.modality.first() == Some(&modality)).collect()
    }
}

/// Generates every configured corpus and serializes it into sequences.
pub fn prepare(config: &RunConfig) -> Result<Prepared, HarnessError> {
    let shape = CorpusShape::of(config);
    let d = &config.data;
    let seed = config.data_seed();
    let mut train = Vec::new();
    let mut val = Vec::new();

    let (tt, tv) = gen_split(Modality::Text, d.text_train, d.text_val, seed, &shape);
    for (ds, out) in [(tt, &mut train), (tv, &mut val)] {
        if let Dataset::Text(items) = ds {
            out.extend(items.iter().map(|t| TokenSequence::text(t)));
        }
    }

    let (vt, vv) = gen_split(Modality::Vision, d.vision_train, d.vision_val, seed, &shape);
    for (split, (ds, out)) in [(vt, &mut train), (vv, &mut val)].into_iter().enumerate() {
        if let Dataset::Vision(items) = ds {
            for (i, latent) in items.iter().enumerate() {
                let codes = build_pyramid_codes(latent, &d.vision_pyramid)?;
                let flip = if split == 0 { d.vision_flip_prob } else { 0.0 };
                let opts = NfspOptions { flip_prob: flip, seed: seed.wrapping_add(i as u64), start_t: 0 };
                out.push(build_nfsp_sequence(&[codes], &d.vision_pyramid, opts)?);
            }
        }
    }

    let (at, av) = gen_split(Modality::Audio, d.audio_train, d.audio_val, seed, &shape);
    let mut codebooks = None;
    if let (Dataset::Audio(train_clips), Dataset::Audio(val_clips)) = (at, av) {
        if !train_clips.is_empty() {
            let frames: Vec<Vec<f64>> = train_clips.iter().flatten().cloned().collect();
            let books = fit_codebooks(
                &frames,
                config.model.audio_levels,
                config.model.audio_codes,
                d.codebook_iters,
                stream_seed(Modality::Audio, seed),
            )?;
            for (clips, out) in [(&train_clips, &mut train), (&val_clips, &mut val)] {
                for clip in clips.iter() {
                    let codes: Vec<Vec<usize>> = clip
                        .iter()
                        .map(|f| rvq_encode(f, &books).map(|(frame, _)| frame.codes))
                        .collect::<Result<_, _>>()?;
                    out.push(TokenSequence::audio(&codes));
                }
            }
            codebooks = Some(books);
        }
    }
    Ok(Prepared { train, val, codebooks })
}

/// Empirical unigram entropy (nats) of the tokens that serve as targets.
pub fn unigram_entropy(corpus: &[Vec<usize>], vocab: usize) -> f64 {
    let mut counts = vec![0usize; vocab];
    for seq in corpus {
        for &t in seq.iter().skip(1) {
            counts[t] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}
