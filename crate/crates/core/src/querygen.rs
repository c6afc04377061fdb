//! TF-IDF keyword extraction and search-query generation.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSplit;
use crate::error::{Error, Result};

/// Bundled English stopword list, one token per line.
pub const STOPWORDS_EN_V1: &str = include_str!("../data/stopwords_en_v1.txt");

#[derive(Debug, Clone)]
pub struct Stopwords {
    words: HashSet<String>,
}

impl Default for Stopwords {
    fn default() -> Self {
        Self::parse(STOPWORDS_EN_V1)
    }
}

impl Stopwords {
    pub fn parse(text: &str) -> Self {
        Self {
            words: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        }
    }

    pub fn empty() -> Self {
        Self {
            words: HashSet::new(),
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keyword {
    pub term: String,
    pub score: f64,
    pub first_position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub terms: Vec<String>,
    /// 1-based.
    pub rank: usize,
}

/// Smoothed inverse document frequencies; each source sentence is a document.
#[derive(Debug, Clone)]
pub struct IdfTable {
    pub doc_count: usize,
    pub df: HashMap<String, usize>,
    pub idf: HashMap<String, f64>,
}

impl IdfTable {
    pub fn from_documents<'a, I, D>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a String>,
    {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut doc_count = 0;
        for doc in docs {
            doc_count += 1;
            let unique: HashSet<&String> = doc.into_iter().collect();
            for t in unique {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        if doc_count == 0 {
            return Err(Error::EmptySplit);
        }
        let idf = df
            .iter()
            .map(|(t, &d)| (t.clone(), smoothed_idf(doc_count, d)))
            .collect();
        Ok(Self { doc_count, df, idf })
    }

    /// IDF of `term`; unseen terms get the `df = 0` value.
    pub fn idf(&self, term: &str) -> f64 {
        self.idf
            .get(term)
            .copied()
            .unwrap_or_else(|| smoothed_idf(self.doc_count, 0))
    }
}

/// `ln((1 + docs) / (1 + df)) + 1`
pub fn smoothed_idf(doc_count: usize, df: usize) -> f64 {
    ((1.0 + doc_count as f64) / (1.0 + df as f64)).ln() + 1.0
}

pub fn compute_idf(split: &CorpusSplit) -> Result<IdfTable> {
    IdfTable::from_documents(split.pairs.iter().map(|p| &p.source_tokens))
}

/// Orders keywords best first: higher score, then earlier position, then term.
pub fn keyword_order(a: &Keyword, b: &Keyword) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.first_position.cmp(&b.first_position))
        .then_with(|| a.term.cmp(&b.term))
}

/// Top-`m` non-stopword terms by `tf * idf` with `tf = count / N`.
pub fn extract_keywords(
    sentence: &[String],
    idf: &IdfTable,
    m: usize,
    stopwords: &Stopwords,
) -> Result<Vec<Keyword>> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be at least 1".into()));
    }
    let n = sentence.len() as f64;
    let mut first: HashMap<&str, (usize, usize)> = HashMap::new();
    for (pos, t) in sentence.iter().enumerate() {
        if stopwords.contains(t) {
            continue;
        }
        first.entry(t.as_str()).or_insert((pos, 0)).1 += 1;
    }
    let mut keywords: Vec<Keyword> = first
        .into_iter()
        .map(|(term, (first_position, count))| Keyword {
            term: term.to_string(),
            score: (count as f64 / n) * idf.idf(term),
            first_position,
        })
        .collect();
    keywords.sort_by(keyword_order);
    keywords.truncate(m);
    Ok(keywords)
}

/// Exactly `m` single-term queries. Scarce keywords are cycled from the top;
/// without keywords every query is the sentence's first token.
pub fn generate_queries(
    keywords: &[Keyword],
    m: usize,
    sentence: &[String],
) -> Result<Vec<SearchQuery>> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be at least 1".into()));
    }
    let first = sentence.first().ok_or(Error::EmptySentence)?;
    Ok((0..m)
        .map(|k| {
            let term = if keywords.is_empty() {
                first.clone()
            } else {
                keywords[k % keywords.len()].term.clone()
            };
            SearchQuery {
                terms: vec![term],
                rank: k + 1,
            }
        })
        .collect())
}

/// Queries for every sentence of a split.
pub fn queries_for_split(
    split: &CorpusSplit,
    idf: &IdfTable,
    m: usize,
    stopwords: &Stopwords,
) -> Result<Vec<Vec<SearchQuery>>> {
    split
        .pairs
        .iter()
        .map(|p| {
            let kws = extract_keywords(&p.source_tokens, idf, m, stopwords)?;
            generate_queries(&kws, m, &p.source_tokens)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub pair_id: usize,
    pub rank: usize,
    pub terms: Vec<String>,
}

/// JSON lines `{pair_id, rank, terms}`.
pub fn write_query_dump<W: Write>(
    mut out: W,
    pair_ids: &[usize],
    queries: &[Vec<SearchQuery>],
) -> std::io::Result<()> {
    for (&pair_id, qs) in pair_ids.iter().zip(queries) {
        for q in qs {
            let rec = QueryRecord {
                pair_id,
                rank: q.rank,
                terms: q.terms.clone(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SentencePair, SplitName};

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    fn split(docs: &[&[&str]]) -> CorpusSplit {
        CorpusSplit {
            name: SplitName::Train,
            pairs: docs
                .iter()
                .enumerate()
                .map(|(i, d)| SentencePair {
                    source_tokens: toks(d),
                    target_tokens: toks(&["x"]),
                    pair_id: i,
                })
                .collect(),
        }
    }

    fn unit_idf(terms: &[&str]) -> IdfTable {
        IdfTable {
            doc_count: 1,
            df: terms.iter().map(|t| (t.to_string(), 1)).collect(),
            idf: terms.iter().map(|t| (t.to_string(), 1.0)).collect(),
        }
    }

    #[test]
    fn idf_examples() {
        let t = compute_idf(&split(&[&["a", "b"]])).unwrap();
        assert_eq!(t.idf("a"), 1.0);
        let t = compute_idf(&split(&[&["a"], &["a"]])).unwrap();
        assert_eq!(t.df["a"], 2);
        assert_eq!(t.idf("a"), 1.0);
        let t = compute_idf(&split(&[&["a"], &["b"]])).unwrap();
        assert!((t.idf("a") - 1.405465).abs() < 1e-6);
        assert!(matches!(compute_idf(&split(&[])), Err(Error::EmptySplit)));
    }

    #[test]
    fn keyword_examples() {
        let sw = Stopwords::default();
        let k = extract_keywords(&toks(&["the", "the", "the"]), &unit_idf(&[]), 5, &sw).unwrap();
        assert!(k.is_empty());

        let k = extract_keywords(&toks(&["dog", "runs"]), &unit_idf(&["dog", "runs"]), 1, &sw)
            .unwrap();
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].term, "dog");

        let k = extract_keywords(
            &toks(&["snow", "dog", "snow"]),
            &unit_idf(&["snow", "dog"]),
            2,
            &sw,
        )
        .unwrap();
        assert_eq!(k[0].term, "snow");
        assert!((k[0].score - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(k[1].term, "dog");
        assert!((k[1].score - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn query_examples() {
        let kw = |t: &str, p| Keyword {
            term: t.into(),
            score: 1.0,
            first_position: p,
        };
        let five: Vec<_> = ["a", "b", "c", "d", "e"].iter().enumerate().map(|(i, t)| kw(t, i)).collect();
        let q = generate_queries(&five, 5, &toks(&["a"])).unwrap();
        assert_eq!(q.len(), 5);
        assert!(q.iter().enumerate().all(|(i, q)| q.rank == i + 1 && q.terms == [five[i].term.clone()]));

        let q = generate_queries(&[kw("snow", 0), kw("dog", 1)], 3, &toks(&["x"])).unwrap();
        let terms: Vec<_> = q.iter().map(|q| q.terms[0].as_str()).collect();
        assert_eq!(terms, ["snow", "dog", "snow"]);

        let q = generate_queries(&[], 5, &toks(&["the"])).unwrap();
        assert!(q.iter().all(|q| q.terms == ["the"]));
        assert!(matches!(generate_queries(&[], 5, &[]), Err(Error::EmptySentence)));
    }

    #[test]
    fn idf_ignores_document_order() {
        let a = compute_idf(&split(&[&["a", "b"], &["b", "c"], &["c"]])).unwrap();
        let b = compute_idf(&split(&[&["c"], &["b", "c"], &["a", "b"]])).unwrap();
        for t in ["a", "b", "c", "zz"] {
            assert_eq!(a.idf(t), b.idf(t));
        }
    }

    #[test]
    fn query_dump_is_json_lines() {
        let q = vec![vec![SearchQuery {
            terms: toks(&["dog"]),
            rank: 1,
        }]];
        let mut buf = Vec::new();
        write_query_dump(&mut buf, &[7], &q).unwrap();
        let rec: QueryRecord = serde_json::from_slice(buf.strip_suffix(b"\n").unwrap()).unwrap();
        assert_eq!(rec.pair_id, 7);
        assert_eq!(rec.terms, ["dog"]);
    }
}
