//! End-to-end runs: data loading, query generation, per-condition retrieval
//! and filtering, multi-seed training, test decoding and reporting.
//!
//! An output directory holds `manifest.json`, `results.tsv`, the two
//! vocabularies, query dumps and per seed a checkpoint, training log and
//! decoded hypotheses.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ExperimentConfig, ImageBackendKind, Precision, RegionProviderKind, ScorerKind};
use crate::corpus::{load_parallel_corpus, CorpusSplit, EncodedSplit, Side, SplitName, Vocabulary};
use crate::encoders::{supplementary_features, HashEmbeddingProvider};
use crate::error::{Error, Result};
use crate::evaluation::{bleu_corpus, macro_average_report, render_table, BleuReport, RunReport};
use crate::filters::{CosineScorer, FixtureScorer, SimilarityScorer};
use crate::model::{Condition, Model, SentenceVisual, Wiring};
use crate::nn::ModelDims;
use crate::querygen::{compute_idf, queries_for_split, write_query_dump, IdfTable, SearchQuery, Stopwords};
use crate::retrieval::{
    extract_regions, retrieve_images, retrieve_supplementary_texts, FixtureImages, ImageBackend, ItemStore,
    RegionProvider, RetrievalManifest, RetrievalRequest, TextStore,
};
use crate::scalar::Scalar;
use crate::training::{translate_split, train_model, write_history, PreparedSplit, SplitInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    /// Paths relative to the run directory.
    pub checkpoint: PathBuf,
    pub training_log: PathBuf,
    pub hypotheses: PathBuf,
    pub best_epoch: usize,
    pub best_dev_bleu: f64,
    pub updates: usize,
    pub bleu: BleuReport,
    pub timings: Vec<StageTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    /// Split the reported BLEU was measured on.
    pub evaluated_on: SplitName,
    pub dims: ModelDims,
    pub seeds: Vec<SeedRecord>,
    pub report: RunReport,
    pub timings: Vec<StageTiming>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Accepts the manifest file or its run directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_FILE);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }
}

/// Re-renders a comparison table (BLEU x 100) from stored manifests.
pub fn render_manifests(manifests: &[RunManifest]) -> String {
    let rows: Vec<(String, Vec<Option<f64>>)> = manifests
        .iter()
        .map(|m| (m.report.condition.label().to_string(), vec![Some(m.report.macro_average * 100.0)]))
        .collect();
    render_table(&["BLEU".to_string()], &rows)
}

struct Timer(Vec<StageTiming>);

impl Timer {
    fn run<R>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        let start = Instant::now();
        let out = f().map_err(|e| e.at(stage))?;
        self.0.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

/// Corpus splits, vocabularies and query material shared by all seeds.
pub struct Corpus {
    pub train: CorpusSplit,
    pub dev: CorpusSplit,
    pub test: Option<CorpusSplit>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub idf: IdfTable,
    pub stopwords: Stopwords,
}

fn path_of<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{key} missing")))
}

pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let d = &cfg.data;
    let train = load_parallel_corpus(
        path_of(&d.train_src, "data.train_src")?,
        path_of(&d.train_tgt, "data.train_tgt")?,
        SplitName::Train,
    )?;
    let dev = load_parallel_corpus(
        path_of(&d.dev_src, "data.dev_src")?,
        path_of(&d.dev_tgt, "data.dev_tgt")?,
        SplitName::Dev,
    )?;
    let test = match (&d.test_src, &d.test_tgt) {
        (Some(s), Some(t)) => Some(load_parallel_corpus(s, t, SplitName::Test)?),
        (None, None) => None,
        _ => return Err(Error::Config("data.test_src and data.test_tgt go together".into())),
    };
    let stopwords = match &d.stopwords {
        Some(p) => Stopwords::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => Stopwords::default(),
    };
    Ok(Corpus {
        src_vocab: Vocabulary::build(&train, Side::Source, d.min_freq)?,
        tgt_vocab: Vocabulary::build(&train, Side::Target, d.min_freq)?,
        idf: compute_idf(&train)?,
        train,
        dev,
        test,
        stopwords,
    })
}

/// Retrieval resources that do not depend on the split or seed.
pub struct Resources<T> {
    manifest: Option<RetrievalManifest<T>>,
    pool: Option<ItemStore<T>>,
    texts: Option<TextStore>,
    cosine: Option<CosineScorer<T>>,
}

impl<T: Scalar> Resources<T> {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let c = cfg.condition()?;
        let r = &cfg.retrieval;
        let manifest = if c.uses_images()
            && !matches!(c, Condition::BlankImages | Condition::RandomImages)
            && r.image_backend == ImageBackendKind::LocalIndex
        {
            Some(RetrievalManifest::load(
                path_of(&r.manifest, "retrieval.manifest")?,
                path_of(&r.item_dir, "retrieval.item_dir")?,
            )?)
        } else {
            None
        };
        let pool = if c == Condition::RandomImages {
            Some(ItemStore::load_dir(path_of(&r.item_dir, "retrieval.item_dir")?)?)
        } else {
            None
        };
        let texts = if c.uses_texts() {
            Some(TextStore::load(path_of(&r.text_store, "retrieval.text_store")?)?)
        } else {
            None
        };
        let cosine = (c.filters_images() && r.scorer == ScorerKind::Cosine).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(r.scorer_seed);
            CosineScorer::random(&cfg.model, &mut rng)
        });
        Ok(Self {
            manifest,
            pool,
            texts,
            cosine,
        })
    }
}

fn split_dir(base: &Path, split: SplitName) -> PathBuf {
    let sub = base.join(split.to_string());
    if sub.is_dir() {
        sub
    } else {
        base.to_path_buf()
    }
}

/// Builds the per-sentence retrieved material of one split.
pub fn prepare_split<T: Scalar>(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    split: &CorpusSplit,
    res: &Resources<T>,
    seed: u64,
) -> Result<PreparedSplit<T>> {
    let c = cfg.condition()?;
    let r = &cfg.retrieval;
    let dims = &cfg.model;
    let encoded = EncodedSplit::new(split, &corpus.src_vocab, &corpus.tgt_vocab);
    let references = split.pairs.iter().map(|p| p.target_tokens.clone()).collect();
    if c == Condition::TextOnly {
        return Ok(PreparedSplit {
            visuals: split.pairs.iter().map(|p| SentenceVisual::text_only(p.pair_id)).collect(),
            encoded,
            references,
        });
    }
    let images = cfg.images_per_sentence();
    let queries = queries_for_split(split, &corpus.idf, images.max(r.m), &corpus.stopwords)?;

    let backend = if !c.uses_images() {
        None
    } else {
        Some(match c {
            Condition::BlankImages => ImageBackend::Blank {
                rows: dims.grid_rows,
                cols: dims.visual_dim,
            },
            Condition::RandomImages => ImageBackend::Random {
                store: res.pool.clone().ok_or_else(|| Error::Config("random pool not loaded".into()))?,
                seed,
            },
            _ => match r.image_backend {
                ImageBackendKind::LocalIndex => ImageBackend::LocalIndex(
                    res.manifest.clone().ok_or_else(|| Error::Config("manifest not loaded".into()))?,
                ),
                ImageBackendKind::Fixture => ImageBackend::Fixture(FixtureImages::load_dir(split_dir(
                    path_of(&r.fixture_dir, "retrieval.fixture_dir")?,
                    split.name,
                ))?),
            },
        })
    };
    let regions = if c.filters_regions() {
        Some(match r.region_provider {
            RegionProviderKind::GridSlices => RegionProvider::GridSlices,
            RegionProviderKind::Fixture => RegionProvider::load_fixture_dir(split_dir(
                path_of(&r.region_dir, "retrieval.region_dir")?,
                split.name,
            ))?,
        })
    } else {
        None
    };
    let provider = HashEmbeddingProvider::new(dims.visual_dim);

    let mut visuals = Vec::with_capacity(split.len());
    for (pair, qs) in split.pairs.iter().zip(&queries) {
        let mut v = SentenceVisual::text_only(pair.pair_id);
        if let Some(backend) = &backend {
            let request = RetrievalRequest {
                pair_id: pair.pair_id,
                queries: qs,
            };
            v.grids = retrieve_images(&request, images, backend)?;
            for g in &v.grids {
                if g.shape() != (dims.grid_rows, dims.visual_dim) {
                    return Err(Error::shape(
                        "retrieved grid",
                        format!(
                            "`{}` is {:?}, model expects {:?}",
                            g.source_id,
                            g.shape(),
                            (dims.grid_rows, dims.visual_dim)
                        ),
                    ));
                }
            }
        }
        if let Some(provider_regions) = &regions {
            v.regions = v
                .grids
                .iter()
                .map(|g| Ok(extract_regions(g, r.o, provider_regions)?.regions))
                .collect::<Result<_>>()?;
        }
        if let Some(store) = &res.texts {
            let first: Vec<SearchQuery> = qs.iter().take(r.m).cloned().collect();
            let texts = retrieve_supplementary_texts(&first, r.m, store)?;
            v.texts = supplementary_features(&texts, &provider, dims.grid_rows, dims.visual_dim)?;
        }
        visuals.push(v);
    }
    Ok(PreparedSplit {
        encoded,
        visuals,
        references,
    })
}

/// The scorer the image filter uses on `split`, if any.
pub fn split_scorer<T: Scalar>(
    cfg: &ExperimentConfig,
    res: &Resources<T>,
    split: SplitName,
) -> Result<Option<Box<dyn SimilarityScorer<T>>>> {
    let c = cfg.condition()?;
    if !c.filters_images() {
        return Ok(None);
    }
    Ok(Some(match cfg.retrieval.scorer {
        ScorerKind::Cosine => Box::new(res.cosine.clone().ok_or_else(|| Error::Config("cosine scorer missing".into()))?),
        ScorerKind::Fixture => {
            let dir = path_of(&cfg.retrieval.score_dir, "retrieval.score_dir")?;
            Box::new(FixtureScorer::load(dir.join(format!("{split}.jsonl")))?)
        }
    }))
}

fn wiring<'a, T: Scalar>(cfg: &ExperimentConfig, scorer: &'a Option<Box<dyn SimilarityScorer<T>>>) -> Result<Wiring<'a, T>> {
    let mut w = Wiring::new(cfg.condition()?, cfg.retrieval.m, cfg.retrieval.o);
    if let Some(s) = scorer {
        w = w.with_scorer(s.as_ref());
    }
    Ok(w)
}

fn model_dims(cfg: &ExperimentConfig, corpus: &Corpus) -> ModelDims {
    ModelDims {
        src_vocab: corpus.src_vocab.len(),
        tgt_vocab: corpus.tgt_vocab.len(),
        ..cfg.model
    }
}

fn write_lines(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs every configured seed and writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg),
        Precision::F64 => run_typed::<f64>(cfg),
    }
}

fn run_typed<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate().map_err(|e| e.at("config"))?;
    cfg.validate_paths().map_err(|e| e.at("config"))?;
    let condition = cfg.condition()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e).at("output"))?;
    let mut timer = Timer(Vec::new());

    let corpus = timer.run("load data", || load_corpus(cfg))?;
    timer.run("vocabulary", || {
        corpus.src_vocab.save(out.join("vocab.src.tsv"))?;
        corpus.tgt_vocab.save(out.join("vocab.tgt.tsv"))
    })?;
    let (eval_split, evaluated_on) = match &corpus.test {
        Some(t) => (t, SplitName::Test),
        None => (&corpus.dev, SplitName::Dev),
    };
    timer.run("queries", || {
        for split in [&corpus.train, &corpus.dev, eval_split] {
            let qs = queries_for_split(split, &corpus.idf, cfg.images_per_sentence(), &corpus.stopwords)?;
            let path = out.join(format!("queries.{}.jsonl", split.name));
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let ids: Vec<usize> = split.pairs.iter().map(|p| p.pair_id).collect();
            write_query_dump(std::io::BufWriter::new(f), &ids, &qs).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })?;
    let res = timer.run("retrieval resources", || Resources::<T>::load(cfg))?;
    let scorers = timer.run("scorers", || {
        Ok([
            split_scorer(cfg, &res, SplitName::Train)?,
            split_scorer(cfg, &res, SplitName::Dev)?,
            split_scorer(cfg, &res, evaluated_on)?,
        ])
    })?;
    let dims = model_dims(cfg, &corpus);

    let mut seeds = Vec::new();
    let mut reports = Vec::new();
    for &seed in &cfg.train.seeds {
        let mut t = Timer(Vec::new());
        let (train, dev, eval) = t.run("retrieval", || {
            Ok((
                prepare_split::<T>(cfg, &corpus, &corpus.train, &res, seed)?,
                prepare_split::<T>(cfg, &corpus, &corpus.dev, &res, seed)?,
                prepare_split::<T>(cfg, &corpus, eval_split, &res, seed)?,
            ))
        })?;
        let train_in = SplitInput {
            wiring: wiring(cfg, &scorers[0])?,
            data: &train,
        };
        let dev_in = SplitInput {
            wiring: wiring(cfg, &scorers[1])?,
            data: &dev,
        };
        let eval_in = SplitInput {
            wiring: wiring(cfg, &scorers[2])?,
            data: &eval,
        };
        let trained = t.run("training", || {
            train_model(Model::<T>::new(dims, seed), train_in, dev_in, &corpus.tgt_vocab, &cfg.train, seed)
        })?;
        let hyps = t.run("decoding", || {
            translate_split(&trained.model, eval_in, &corpus.tgt_vocab, cfg.train.max_decode_len)
        })?;
        let bleu = t.run("evaluation", || bleu_corpus(&hyps, &eval.references))?;
        let rec = SeedRecord {
            seed,
            checkpoint: PathBuf::from(format!("seed{seed}.mmtc")),
            training_log: PathBuf::from(format!("seed{seed}.log.tsv")),
            hypotheses: PathBuf::from(format!("seed{seed}.{evaluated_on}.hyp")),
            best_epoch: trained.best_epoch,
            best_dev_bleu: trained.best_dev_bleu,
            updates: trained.updates,
            bleu: bleu.clone(),
            timings: Vec::new(),
        };
        t.run("outputs", || {
            save_checkpoint(&trained.model.params, out.join(&rec.checkpoint))?;
            write_history(&trained.history, out.join(&rec.training_log))?;
            write_lines(&out.join(&rec.hypotheses), &hyps)
        })?;
        reports.push((seed, bleu));
        seeds.push(SeedRecord { timings: t.0, ..rec });
    }
    let report = macro_average_report(&reports, condition).map_err(|e| e.at("report"))?;
    report.save_tsv(out.join("results.tsv")).map_err(|e| e.at("report"))?;
    let manifest = RunManifest {
        config: cfg.clone(),
        evaluated_on,
        dims,
        seeds,
        report,
        timings: timer.0,
    };
    manifest.save(out).map_err(|e| e.at("manifest"))?;
    Ok(manifest)
}

/// Re-decodes a split with a stored seed checkpoint.
pub fn evaluate_checkpoint(manifest: &RunManifest, run_dir: &Path, seed: u64, split: SplitName) -> Result<BleuReport> {
    match manifest.config.precision {
        Precision::F32 => evaluate_typed::<f32>(manifest, run_dir, seed, split),
        Precision::F64 => evaluate_typed::<f64>(manifest, run_dir, seed, split),
    }
}

fn evaluate_typed<T: Scalar>(manifest: &RunManifest, run_dir: &Path, seed: u64, split: SplitName) -> Result<BleuReport> {
    let cfg = &manifest.config;
    let rec = manifest
        .seeds
        .iter()
        .find(|s| s.seed == seed)
        .ok_or_else(|| Error::Manifest(format!("no seed {seed} in manifest")))?;
    let corpus = load_corpus(cfg).map_err(|e| e.at("load data"))?;
    let data = match split {
        SplitName::Train => &corpus.train,
        SplitName::Dev => &corpus.dev,
        SplitName::Test => corpus
            .test
            .as_ref()
            .ok_or_else(|| Error::Config("no test split configured".into()).at("load data"))?,
    };
    let res = Resources::<T>::load(cfg).map_err(|e| e.at("retrieval"))?;
    let prepared = prepare_split::<T>(cfg, &corpus, data, &res, seed).map_err(|e| e.at("retrieval"))?;
    let scorer = split_scorer(cfg, &res, split).map_err(|e| e.at("retrieval"))?;
    let mut model = Model::<T>::new(manifest.dims, seed);
    load_checkpoint(&mut model.params, run_dir.join(&rec.checkpoint)).map_err(|e| e.at("checkpoint"))?;
    let input = SplitInput {
        wiring: wiring(cfg, &scorer)?,
        data: &prepared,
    };
    let hyps = translate_split(&model, input, &corpus.tgt_vocab, cfg.train.max_decode_len).map_err(|e| e.at("decoding"))?;
    bleu_corpus(&hyps, &prepared.references).map_err(|e| e.at("evaluation"))
}
