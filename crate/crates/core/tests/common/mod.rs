//! Synthetic desk-scale translation task shared by the integration tests.
//!
//! Sources read "a {noun} {verb}", targets "ein {colour} {noun} {verb}".
//! The colour never appears in the source; it is only recoverable from the
//! pair's images.

#![allow(dead_code)]

use mmtprobe::corpus::{EncodedSplit, Side};
use mmtprobe::filters::{FixtureScorer, ScoreRecord};
use mmtprobe::nn::Init;
use mmtprobe::retrieval::ImageFeatureGrid;
use mmtprobe::training::{PreparedSplit, SplitInput};
use mmtprobe::{CorpusSplit, Matrix, ModelDims, SentenceVisual, SplitName, TrainConfig, Vocabulary, Wiring};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NOUNS: [(&str, &str); 8] = [
    ("dog", "hund"),
    ("cat", "katze"),
    ("man", "mann"),
    ("woman", "frau"),
    ("child", "kind"),
    ("horse", "pferd"),
    ("bird", "vogel"),
    ("boy", "junge"),
];
pub const VERBS: [(&str, &str); 2] = [("runs", "läuft"), ("sleeps", "schläft")];
pub const COLOURS: [&str; 5] = ["rot", "blau", "grün", "gelb", "schwarz"];

pub const GRID_ROWS: usize = 4;
pub const VISUAL_DIM: usize = 8;

pub struct Task {
    pub train: CorpusSplit,
    pub dev: CorpusSplit,
    pub train_colours: Vec<usize>,
    pub dev_colours: Vec<usize>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

/// All 80 noun x verb x colour combinations, shuffled once and split 64/16.
pub fn task() -> Task {
    let mut combos = Vec::new();
    for n in 0..NOUNS.len() {
        for v in 0..VERBS.len() {
            for c in 0..COLOURS.len() {
                combos.push((n, v, c));
            }
        }
    }
    combos.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    let build = |name, items: &[(usize, usize, usize)]| {
        let raw: Vec<(String, String)> = items
            .iter()
            .map(|&(n, v, c)| {
                (
                    format!("a {} {}", NOUNS[n].0, VERBS[v].0),
                    format!("ein {} {} {}", COLOURS[c], NOUNS[n].1, VERBS[v].1),
                )
            })
            .collect();
        CorpusSplit::from_raw(name, &raw).unwrap()
    };
    let (tr, dv) = combos.split_at(64);
    let train = build(SplitName::Train, tr);
    let dev = build(SplitName::Dev, dv);
    let src_vocab = Vocabulary::build(&train, Side::Source, 1).unwrap();
    let tgt_vocab = Vocabulary::build(&train, Side::Target, 1).unwrap();
    Task {
        train,
        dev,
        train_colours: tr.iter().map(|c| c.2).collect(),
        dev_colours: dv.iter().map(|c| c.2).collect(),
        src_vocab,
        tgt_vocab,
    }
}

pub fn dims(task: &Task) -> ModelDims {
    ModelDims {
        src_vocab: task.src_vocab.len(),
        tgt_vocab: task.tgt_vocab.len(),
        embed: 64,
        hidden: 64,
        decoder_hidden: 64,
        visual_dim: VISUAL_DIM,
        grid_rows: GRID_ROWS,
        key_dim: 64,
        region_dim: 8,
        attention_dim: 64,
        readout: 64,
        init: Init::Uniform,
    }
}

pub fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 0.01,
        dropout: 0.0,
        max_epochs: 40,
        patience: 40,
        seeds: vec![seed],
        max_updates: Some(300),
        max_decode_len: 10,
        ..TrainConfig::default()
    }
}

/// Rows carry a one-hot colour code plus small noise.
pub fn informative_grid(colour: usize, id: String, rng: &mut ChaCha8Rng) -> ImageFeatureGrid<f64> {
    let m = Matrix::from_fn(GRID_ROWS, VISUAL_DIM, |_, j| {
        let base = if j == colour { 1.0 } else { 0.0 };
        base + rng.gen_range(-0.1..0.1)
    });
    ImageFeatureGrid::new(m, id)
}

pub fn noise_grid(id: String, rng: &mut ChaCha8Rng) -> ImageFeatureGrid<f64> {
    ImageFeatureGrid::new(Matrix::from_fn(GRID_ROWS, VISUAL_DIM, |_, _| rng.gen_range(-1.0..1.0)), id)
}

pub fn prepare(split: &CorpusSplit, task: &Task, visuals: Vec<SentenceVisual<f64>>) -> PreparedSplit<f64> {
    PreparedSplit {
        encoded: EncodedSplit::new(split, &task.src_vocab, &task.tgt_vocab),
        visuals,
        references: split.pairs.iter().map(|p| p.target_tokens.clone()).collect(),
    }
}

pub fn text_only(split: &CorpusSplit, task: &Task) -> PreparedSplit<f64> {
    let v = split.pairs.iter().map(|p| SentenceVisual::text_only(p.pair_id)).collect();
    prepare(split, task, v)
}

/// Five informative grids per pair.
pub fn informative(split: &CorpusSplit, colours: &[usize], task: &Task, seed: u64) -> PreparedSplit<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = split
        .pairs
        .iter()
        .zip(colours)
        .map(|(p, &c)| SentenceVisual {
            grids: (0..5)
                .map(|k| informative_grid(c, format!("{}_{k}", p.pair_id), &mut rng))
                .collect(),
            ..SentenceVisual::text_only(p.pair_id)
        })
        .collect();
    prepare(split, task, v)
}

/// Ten candidates per pair: five informative and five noise grids in a
/// shuffled retrieval order, plus scores that rank the informative ones
/// first. Noise ids start with `n`.
pub fn noisy(split: &CorpusSplit, colours: &[usize], task: &Task, seed: u64) -> (PreparedSplit<f64>, FixtureScorer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut visuals = Vec::new();
    for (p, &c) in split.pairs.iter().zip(colours) {
        let mut grids = Vec::with_capacity(10);
        for k in 0..5 {
            grids.push(informative_grid(c, format!("i{}_{k}", p.pair_id), &mut rng));
        }
        for k in 0..5 {
            grids.push(noise_grid(format!("n{}_{k}", p.pair_id), &mut rng));
        }
        grids.shuffle(&mut rng);
        for g in &grids {
            let informative = g.source_id.starts_with('i');
            records.push(ScoreRecord {
                pair_id: p.pair_id,
                candidate_id: g.source_id.clone(),
                score: if informative { 0.9 } else { 0.1 } + rng.gen_range(-0.05..0.05),
            });
        }
        visuals.push(SentenceVisual {
            grids,
            ..SentenceVisual::text_only(p.pair_id)
        });
    }
    (prepare(split, task, visuals), FixtureScorer::from_records(records))
}

/// The first `m` retrieved candidates only.
pub fn first_ranks(data: &PreparedSplit<f64>, m: usize) -> PreparedSplit<f64> {
    let mut out = data.clone();
    for v in &mut out.visuals {
        v.grids.truncate(m);
    }
    out
}

pub fn input<'a>(wiring: Wiring<'a, f64>, data: &'a PreparedSplit<f64>) -> SplitInput<'a, f64> {
    SplitInput { wiring, data }
}
