//! Deterministic stand-ins for search-engine retrieval.
//!
//! Queries resolve against local stores instead of live engines: a
//! term-to-items manifest, a pool for random draws, per-pair fixtures, or
//! all-zero blank grids. Features live in `.mmtf` files:
//!
//! ```text
//! "MMTF" | 0x01 | rows: u32 LE | cols: u32 LE | rows*cols f32 LE, row-major
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};
use crate::querygen::SearchQuery;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: [u8; 4] = *b"MMTF";
pub const FORMAT_VERSION: u8 = 0x01;
pub const FEATURE_EXT: &str = "mmtf";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureGrid<T> {
    /// `L x D_v`
    pub values: Matrix<T>,
    pub source_id: String,
}

impl<T: Scalar> ImageFeatureGrid<T> {
    pub fn new(values: Matrix<T>, source_id: impl Into<String>) -> Self {
        Self {
            values,
            source_id: source_id.into(),
        }
    }

    pub fn blank(rows: usize, cols: usize) -> Self {
        Self::new(Matrix::zeros(rows, cols), "blank")
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

/// `O` region vectors of one image, stacked as an `O x D_v` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureSet<T> {
    pub region_ids: Vec<String>,
    pub regions: Matrix<T>,
    pub parent_image: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupplementaryText {
    pub tokens: Vec<String>,
    pub source_id: String,
    pub matched_query: SearchQuery,
}

impl SupplementaryText {
    /// Whether this is the echo fallback rather than a store hit.
    pub fn is_fallback(&self) -> bool {
        self.source_id == FALLBACK_TEXT_ID
    }
}

pub const FALLBACK_TEXT_ID: &str = "fallback";

// Feature files -------------------------------------------------------------

fn header(magic: [u8; 4], rows: usize, cols: usize) -> Result<Vec<u8>> {
    let (r, c) = (u32::try_from(rows), u32::try_from(cols));
    let (Ok(r), Ok(c)) = (r, c) else {
        return Err(Error::DimOverflow {
            rows: rows as u64,
            cols: cols as u64,
        });
    };
    let mut out = Vec::with_capacity(13 + rows * cols * 4);
    out.extend_from_slice(&magic);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&r.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    Ok(out)
}

pub(crate) fn push_f32_payload<T: Scalar>(out: &mut Vec<u8>, m: &Matrix<T>) {
    for v in m.as_slice() {
        out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
}

/// Serializes a grid; values are stored as binary32.
pub fn encode_feature_bytes<T: Scalar>(values: &Matrix<T>) -> Result<Vec<u8>> {
    if !values.is_finite() {
        return Err(Error::NonFinite("feature grid".into()));
    }
    let mut out = header(FEATURE_MAGIC, values.rows(), values.cols())?;
    push_f32_payload(&mut out, values);
    Ok(out)
}

/// Little-endian cursor shared by the feature and checkpoint readers.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncated {
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.take(4).map_err(|_| Error::BadMagic {
            expected,
            found: self.bytes.to_vec(),
        })?;
        if found != expected {
            return Err(Error::BadMagic {
                expected,
                found: found.to_vec(),
            });
        }
        let version = self.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// `rows x cols` binary32 payload.
    pub(crate) fn matrix<T: Scalar>(&mut self, rows: u32, cols: u32) -> Result<Matrix<T>> {
        let overflow = Error::DimOverflow {
            rows: rows as u64,
            cols: cols as u64,
        };
        let n = (rows as u64)
            .checked_mul(cols as u64)
            .and_then(|n| n.checked_mul(4))
            .and_then(|b| usize::try_from(b).ok())
            .ok_or(overflow)?;
        let payload = self.take(n)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Matrix::from_vec(rows as usize, cols as usize, data)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_feature_bytes<T: Scalar>(bytes: &[u8]) -> Result<Matrix<T>> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let rows = r.u32()?;
    let cols = r.u32()?;
    let m = r.matrix(rows, cols)?;
    r.finish()?;
    Ok(m)
}

pub fn write_feature_file<T: Scalar>(grid: &ImageFeatureGrid<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_feature_bytes(&grid.values)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a grid; its `source_id` is the file stem.
pub fn read_feature_file<T: Scalar>(path: impl AsRef<Path>) -> Result<ImageFeatureGrid<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let values = decode_feature_bytes(&bytes)?;
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ImageFeatureGrid { values, source_id })
}

// Stores ---------------------------------------------------------------------

/// Feature grids keyed by item id.
#[derive(Debug, Clone, Default)]
pub struct ItemStore<T> {
    items: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> ItemStore<T> {
    pub fn new() -> Self {
        Self {
            items: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, values: Matrix<T>) {
        self.items.insert(id.into(), values);
    }

    pub fn get(&self, id: &str) -> Option<ImageFeatureGrid<T>> {
        self.items
            .get(id)
            .map(|v| ImageFeatureGrid::new(v.clone(), id))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item ids in sorted order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.keys().map(String::as_str)
    }

    /// Loads every `*.mmtf` file of `dir`; ids are file stems.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut store = Self::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(FEATURE_EXT) {
                let g = read_feature_file::<T>(&path)?;
                store.items.insert(g.source_id, g.values);
            }
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub term: String,
    pub item_ids: Vec<String>,
}

/// Query term to ordered item ids, backed by an item store.
#[derive(Debug, Clone)]
pub struct RetrievalManifest<T> {
    pub entries: HashMap<String, Vec<String>>,
    pub store: ItemStore<T>,
    pub store_path: Option<PathBuf>,
}

impl<T: Scalar> RetrievalManifest<T> {
    /// Checks that every referenced item exists in the store.
    pub fn new(entries: Vec<ManifestEntry>, store: ItemStore<T>) -> Result<Self> {
        let mut map = HashMap::new();
        for e in entries {
            if let Some(missing) = e.item_ids.iter().find(|id| store.get(id).is_none()) {
                return Err(Error::Manifest(format!(
                    "term `{}` references missing item `{missing}`",
                    e.term
                )));
            }
            map.insert(e.term, e.item_ids);
        }
        Ok(Self {
            entries: map,
            store,
            store_path: None,
        })
    }

    /// Reads JSON lines `{term, item_ids}` and the item directory.
    pub fn load(manifest_path: impl AsRef<Path>, item_dir: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let entries: Vec<ManifestEntry> = read_json_lines(path)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        let store = ItemStore::load_dir(item_dir.as_ref())?;
        let mut m = Self::new(entries, store)?;
        m.store_path = Some(item_dir.as_ref().to_path_buf());
        Ok(m)
    }

    fn lookup(&self, query: &SearchQuery) -> Option<&Vec<String>> {
        self.entries.get(&query.terms.join(" "))
    }
}

/// Grids addressed by `(pair_id, rank)`.
#[derive(Debug, Clone, Default)]
pub struct FixtureImages<T> {
    grids: HashMap<(usize, usize), Matrix<T>>,
}

impl<T: Scalar> FixtureImages<T> {
    pub fn new() -> Self {
        Self {
            grids: HashMap::new(),
        }
    }

    pub fn insert(&mut self, pair_id: usize, rank: usize, values: Matrix<T>) {
        self.grids.insert((pair_id, rank), values);
    }

    pub fn fixture_id(pair_id: usize, rank: usize) -> String {
        format!("{pair_id}_{rank}")
    }

    /// Loads files named `{pair_id}_{rank}.mmtf`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let store = ItemStore::<T>::load_dir(dir)?;
        let mut out = Self::new();
        for (id, values) in store.items {
            let parsed = id
                .split_once('_')
                .and_then(|(p, r)| Some((p.parse().ok()?, r.parse().ok()?)));
            let Some((pair_id, rank)) = parsed else {
                return Err(Error::MissingFixture(format!(
                    "fixture file `{id}` is not named pair_rank"
                )));
            };
            out.grids.insert((pair_id, rank), values);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum ImageBackend<T> {
    LocalIndex(RetrievalManifest<T>),
    Blank { rows: usize, cols: usize },
    Random { store: ItemStore<T>, seed: u64 },
    Fixture(FixtureImages<T>),
}

/// Queries of one source sentence.
#[derive(Debug, Clone)]
pub struct RetrievalRequest<'a> {
    pub pair_id: usize,
    pub queries: &'a [SearchQuery],
}

fn mix_seed(seed: u64, pair_id: usize) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ (pair_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Resolves a sentence's queries to exactly `count` grids.
///
/// The local index cycles through the queries; pass `c` over the queries
/// takes the `c`-th listed item (wrapping), so the first pass returns each
/// query's first item. Unmatched queries yield blank grids of the store's
/// shape.
pub fn retrieve_images<T: Scalar>(
    request: &RetrievalRequest<'_>,
    count: usize,
    backend: &ImageBackend<T>,
) -> Result<Vec<ImageFeatureGrid<T>>> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    match backend {
        ImageBackend::Blank { rows, cols } => {
            Ok((0..count).map(|_| ImageFeatureGrid::blank(*rows, *cols)).collect())
        }
        ImageBackend::LocalIndex(manifest) => {
            let queries = request.queries;
            if queries.is_empty() {
                return Err(Error::InvalidArgument("no queries".into()));
            }
            let shape = manifest
                .store
                .items
                .values()
                .next()
                .map(Matrix::shape)
                .ok_or_else(|| Error::Manifest("item store is empty".into()))?;
            Ok((0..count)
                .map(|k| {
                    let q = &queries[k % queries.len()];
                    let pass = k / queries.len();
                    manifest
                        .lookup(q)
                        .filter(|ids| !ids.is_empty())
                        .and_then(|ids| manifest.store.get(&ids[pass % ids.len()]))
                        .unwrap_or_else(|| ImageFeatureGrid::blank(shape.0, shape.1))
                })
                .collect())
        }
        ImageBackend::Random { store, seed } => {
            let ids: Vec<&str> = store.ids().collect();
            if ids.is_empty() {
                return Err(Error::Manifest("random backend store is empty".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(*seed, request.pair_id));
            Ok((0..count)
                .map(|_| store.get(ids[rng.gen_range(0..ids.len())]).unwrap())
                .collect())
        }
        ImageBackend::Fixture(fx) => (1..=count)
            .map(|rank| {
                fx.grids
                    .get(&(request.pair_id, rank))
                    .map(|v| {
                        ImageFeatureGrid::new(v.clone(), FixtureImages::<T>::fixture_id(request.pair_id, rank))
                    })
                    .ok_or_else(|| {
                        Error::MissingFixture(FixtureImages::<T>::fixture_id(request.pair_id, rank))
                    })
            })
            .collect(),
    }
}

// Supplementary text ---------------------------------------------------------

/// Candidate sentences for supplementary-text retrieval.
#[derive(Debug, Clone, Default)]
pub struct TextStore {
    pub sentences: Vec<Vec<String>>,
}

impl TextStore {
    pub fn from_lines<S: AsRef<str>>(lines: &[S]) -> Self {
        Self {
            sentences: lines
                .iter()
                .map(|l| tokenize(l.as_ref()))
                .filter(|t| !t.is_empty())
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_lines(&text.lines().collect::<Vec<_>>()))
    }
}

/// Exactly `count` texts, cycling through the queries. Each is the first
/// stored sentence containing every query term (pass `c` takes the `c`-th
/// match, wrapping); a query without matches echoes its own terms.
pub fn retrieve_supplementary_texts(
    queries: &[SearchQuery],
    count: usize,
    store: &TextStore,
) -> Result<Vec<SupplementaryText>> {
    if count == 0 || queries.is_empty() {
        return Err(Error::InvalidArgument("need count >= 1 and at least one query".into()));
    }
    Ok((0..count)
        .map(|k| {
            let q = &queries[k % queries.len()];
            let pass = k / queries.len();
            let matches: Vec<usize> = store
                .sentences
                .iter()
                .enumerate()
                .filter(|(_, s)| q.terms.iter().all(|t| s.contains(t)))
                .map(|(i, _)| i)
                .collect();
            if matches.is_empty() {
                SupplementaryText {
                    tokens: q.terms.clone(),
                    source_id: FALLBACK_TEXT_ID.into(),
                    matched_query: q.clone(),
                }
            } else {
                let i = matches[pass % matches.len()];
                SupplementaryText {
                    tokens: store.sentences[i].clone(),
                    source_id: format!("text{i}"),
                    matched_query: q.clone(),
                }
            }
        })
        .collect())
}

// Regions --------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum RegionProvider<T> {
    /// First `o` rows of the item's grid.
    GridSlices,
    /// Precomputed region matrices keyed by parent image id.
    Fixture(HashMap<String, Matrix<T>>),
}

impl<T: Scalar> RegionProvider<T> {
    /// Loads `{image_id}.mmtf` region matrices from a directory.
    pub fn load_fixture_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let store = ItemStore::<T>::load_dir(dir)?;
        Ok(Self::Fixture(store.items.into_iter().collect()))
    }
}

pub fn extract_regions<T: Scalar>(
    image: &ImageFeatureGrid<T>,
    o: usize,
    provider: &RegionProvider<T>,
) -> Result<RegionFeatureSet<T>> {
    if o == 0 {
        return Err(Error::InvalidArgument("o must be at least 1".into()));
    }
    let regions = match provider {
        RegionProvider::GridSlices => {
            if image.values.rows() < o {
                return Err(Error::InvalidArgument(format!(
                    "grid has {} rows, cannot slice {o} regions",
                    image.values.rows()
                )));
            }
            image.values.select_rows(&(0..o).collect::<Vec<_>>())
        }
        RegionProvider::Fixture(map) => {
            let m = map
                .get(&image.source_id)
                .ok_or_else(|| Error::MissingFixture(format!("regions of `{}`", image.source_id)))?;
            if m.rows() != o {
                return Err(Error::MissingFixture(format!(
                    "`{}` has {} regions, expected {o}",
                    image.source_id,
                    m.rows()
                )));
            }
            m.clone()
        }
    };
    Ok(RegionFeatureSet {
        region_ids: (0..o).map(|i| format!("{}#{i}", image.source_id)).collect(),
        regions,
        parent_image: image.source_id.clone(),
    })
}

// JSON lines -----------------------------------------------------------------

pub(crate) fn read_json_lines<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(terms: &[&str], rank: usize) -> SearchQuery {
        SearchQuery {
            terms: terms.iter().map(|s| s.to_string()).collect(),
            rank,
        }
    }

    fn grid(rows: usize, cols: usize, base: f32) -> Matrix<f32> {
        Matrix::from_fn(rows, cols, |r, c| base + (r * cols + c) as f32 * 0.25)
    }

    #[test]
    fn feature_round_trip_bitwise() {
        let g = Matrix::<f32>::zeros(1, 1);
        assert_eq!(decode_feature_bytes::<f32>(&encode_feature_bytes(&g).unwrap()).unwrap(), g);
        let g = Matrix::from_vec(2, 3, vec![1.5f32, -0.0, 3.25e-7, f32::MAX, 7.0, -2.0]).unwrap();
        let back = decode_feature_bytes::<f32>(&encode_feature_bytes(&g).unwrap()).unwrap();
        assert_eq!(back.shape(), (2, 3));
        let bits = |m: &Matrix<f32>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&g));
    }

    #[test]
    fn feature_format_errors() {
        let mut bytes = encode_feature_bytes(&grid(2, 2, 0.0)).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_feature_bytes::<f32>(&wrong), Err(Error::BadMagic { .. })));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_feature_bytes::<f32>(&bytes), Err(Error::Truncated { .. })));
        let mut version = encode_feature_bytes(&grid(1, 1, 0.0)).unwrap();
        version[4] = 9;
        assert!(matches!(decode_feature_bytes::<f32>(&version), Err(Error::UnsupportedVersion(9))));
        let mut huge = Vec::from(*b"MMTF");
        huge.push(1);
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = decode_feature_bytes::<f32>(&huge).unwrap_err();
        assert!(matches!(err, Error::DimOverflow { .. } | Error::Truncated { .. }));
        assert!(encode_feature_bytes(&Matrix::from_vec(1, 1, vec![f32::NAN]).unwrap()).is_err());
    }

    #[test]
    fn blank_backend() {
        let qs = [q(&["dog"], 1)];
        let req = RetrievalRequest { pair_id: 0, queries: &qs };
        let out = retrieve_images::<f64>(&req, 5, &ImageBackend::Blank { rows: 3, cols: 2 }).unwrap();
        assert_eq!(out.len(), 5);
        assert!(out.iter().all(|g| g.values == Matrix::zeros(3, 2)));
    }

    #[test]
    fn local_index_lookup_and_backoff() {
        let mut store = ItemStore::new();
        store.insert("img7", grid(2, 2, 1.0));
        store.insert("img8", grid(2, 2, 5.0));
        let manifest = RetrievalManifest::new(
            vec![ManifestEntry {
                term: "dog".into(),
                item_ids: vec!["img7".into(), "img8".into()],
            }],
            store,
        )
        .unwrap();
        let backend = ImageBackend::LocalIndex(manifest);
        let qs = [q(&["dog"], 1)];
        let req = RetrievalRequest { pair_id: 0, queries: &qs };
        let out = retrieve_images(&req, 1, &backend).unwrap();
        assert_eq!(out[0].source_id, "img7");
        assert_eq!(out[0].values, grid(2, 2, 1.0));

        let two = retrieve_images(&req, 2, &backend).unwrap();
        assert_eq!(two[1].source_id, "img8");

        let qs = [q(&["cat"], 1)];
        let req = RetrievalRequest { pair_id: 0, queries: &qs };
        let out = retrieve_images(&req, 3, &backend).unwrap();
        assert!(out.iter().all(|g| g.values == Matrix::zeros(2, 2)));
    }

    #[test]
    fn manifest_rejects_missing_items() {
        let err = RetrievalManifest::<f32>::new(
            vec![ManifestEntry {
                term: "dog".into(),
                item_ids: vec!["nope".into()],
            }],
            ItemStore::new(),
        );
        assert!(matches!(err, Err(Error::Manifest(_))));
    }

    #[test]
    fn random_backend_deterministic() {
        let mut store = ItemStore::new();
        for i in 0..6 {
            store.insert(format!("i{i}"), grid(2, 2, i as f32));
        }
        let backend = ImageBackend::Random { store, seed: 42 };
        let qs = [q(&["x"], 1)];
        let req = RetrievalRequest { pair_id: 3, queries: &qs };
        let a = retrieve_images(&req, 8, &backend).unwrap();
        let b = retrieve_images(&req, 8, &backend).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }

    #[test]
    fn fixture_backend() {
        let mut fx = FixtureImages::new();
        fx.insert(4, 1, grid(2, 2, 0.0));
        let backend = ImageBackend::Fixture(fx);
        let qs = [q(&["x"], 1)];
        let req = RetrievalRequest { pair_id: 4, queries: &qs };
        assert_eq!(retrieve_images(&req, 1, &backend).unwrap()[0].source_id, "4_1");
        assert!(matches!(retrieve_images(&req, 2, &backend), Err(Error::MissingFixture(_))));
    }

    #[test]
    fn supplementary_text_lookup() {
        let store = TextStore::from_lines(&["the dog barks"]);
        let out = retrieve_supplementary_texts(&[q(&["dog"], 1)], 1, &store).unwrap();
        assert_eq!(out[0].tokens, ["the", "dog", "barks"]);
        assert!(!out[0].is_fallback());

        let empty = TextStore::default();
        let out = retrieve_supplementary_texts(&[q(&["dog"], 1)], 2, &empty).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].tokens, ["dog"]);
        assert!(out[0].is_fallback());

        let store = TextStore::from_lines(&[
            "A small cafe.",
            "They serve everything from sushi to barbecue.",
        ]);
        let out = retrieve_supplementary_texts(&[q(&["barbecue"], 1)], 1, &store).unwrap();
        assert!(out[0].tokens.contains(&"barbecue".to_string()));
    }

    #[test]
    fn regions_from_grid_slices() {
        let g = ImageFeatureGrid::new(grid(6, 3, 0.0), "im");
        let r = extract_regions(&g, 4, &RegionProvider::GridSlices).unwrap();
        assert_eq!(r.regions, g.values.select_rows(&[0, 1, 2, 3]));
        assert_eq!(r.region_ids.len(), 4);
        assert!(extract_regions(&g, 7, &RegionProvider::GridSlices).is_err());

        let big = ImageFeatureGrid::new(Matrix::<f32>::zeros(196, 2), "big");
        assert_eq!(extract_regions(&big, 128, &RegionProvider::GridSlices).unwrap().regions.rows(), 128);

        let mut map = HashMap::new();
        map.insert("im".to_string(), grid(3, 3, 1.0));
        let fx = RegionProvider::Fixture(map);
        assert_eq!(extract_regions(&g, 3, &fx).unwrap().regions.rows(), 3);
        assert!(extract_regions(&g, 2, &fx).is_err());
        let other = ImageFeatureGrid::new(grid(6, 3, 0.0), "other");
        assert!(matches!(extract_regions(&other, 3, &fx), Err(Error::MissingFixture(_))));
    }
}
