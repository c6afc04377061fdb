//! Corpus BLEU, keyword/image noise tallies and multi-seed reporting.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Condition;
use crate::retrieval::read_json_lines;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// In `[0, 1]`.
    pub score: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_length: usize,
    pub ref_length: usize,
}

fn ngram_counts<S: Eq + Hash>(tokens: &[S], n: usize) -> HashMap<&[S], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Unsmoothed single-reference 4-gram corpus BLEU.
pub fn bleu_corpus<S: Eq + Hash>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<BleuReport> {
    bleu_corpus_with(hypotheses, references, false)
}

/// Corpus BLEU; `add_one` smooths every precision to `(m + 1) / (c + 1)`.
pub fn bleu_corpus_with<S: Eq + Hash>(
    hypotheses: &[Vec<S>],
    references: &[Vec<S>],
    add_one: bool,
) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    for (h, r) in hypotheses.iter().zip(references) {
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let hyp_length: usize = hypotheses.iter().map(Vec::len).sum();
    let ref_length: usize = references.iter().map(Vec::len).sum();
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if add_one {
            (matches[n] as f64 + 1.0) / (totals[n] as f64 + 1.0)
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_length == 0 {
        0.0
    } else if hyp_length > ref_length {
        1.0
    } else {
        (1.0 - ref_length as f64 / hyp_length as f64).exp()
    };
    let score = if hyp_length == 0 || precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        brevity_penalty * log_mean.exp()
    };
    Ok(BleuReport {
        score,
        precisions,
        brevity_penalty,
        hyp_length,
        ref_length,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeywordLabel {
    Entity,
    NonEntity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageLabel {
    Ok,
    Noise,
}

/// One line of a label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub pair_id: usize,
    pub keyword_labels: Vec<KeywordLabel>,
    pub image_labels: Vec<ImageLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub n_sentences: usize,
    pub n_half_or_more_nonentity_keywords: usize,
    pub n_half_or_more_noise_images: usize,
}

fn half_or_more(hits: usize, total: usize) -> bool {
    2 * hits >= total
}

/// Counts sentences whose non-entity keywords (resp. noise images) make up
/// at least half of their labels.
pub fn noise_statistics(records: &[LabelRecord]) -> Result<NoiseStats> {
    let mut stats = NoiseStats {
        n_sentences: records.len(),
        n_half_or_more_nonentity_keywords: 0,
        n_half_or_more_noise_images: 0,
    };
    for r in records {
        if r.keyword_labels.is_empty() || r.image_labels.is_empty() {
            return Err(Error::InvalidArgument(format!("pair {} has an empty label list", r.pair_id)));
        }
        let k = r.keyword_labels.iter().filter(|&&l| l == KeywordLabel::NonEntity).count();
        let i = r.image_labels.iter().filter(|&&l| l == ImageLabel::Noise).count();
        stats.n_half_or_more_nonentity_keywords += half_or_more(k, r.keyword_labels.len()) as usize;
        stats.n_half_or_more_noise_images += half_or_more(i, r.image_labels.len()) as usize;
    }
    Ok(stats)
}

/// JSON lines `{pair_id, keyword_labels, image_labels}`.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    read_json_lines(path.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub condition: Condition,
    pub per_seed: Vec<(u64, f64)>,
    pub macro_average: f64,
}

pub fn macro_average_report(per_seed: &[(u64, BleuReport)], condition: Condition) -> Result<RunReport> {
    if per_seed.is_empty() {
        return Err(Error::InvalidArgument("no seed reports".into()));
    }
    let scores: Vec<(u64, f64)> = per_seed.iter().map(|(s, r)| (*s, r.score)).collect();
    let macro_average = scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64;
    Ok(RunReport {
        condition,
        per_seed: scores,
        macro_average,
    })
}

pub const MACRO_ROW: &str = "macro";

impl RunReport {
    /// `condition<TAB>seed<TAB>bleu` per seed, then the macro row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("condition\tseed\tbleu\n");
        for (seed, s) in &self.per_seed {
            let _ = writeln!(out, "{}\t{seed}\t{s}", self.condition);
        }
        let _ = writeln!(out, "{}\t{MACRO_ROW}\t{}", self.condition, self.macro_average);
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Record {
            path: "results.tsv".into(),
            line,
            message: msg,
        };
        let mut condition = None;
        let mut per_seed = Vec::new();
        let mut macro_average = None;
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(i + 1, format!("expected 3 fields, found {}", f.len())));
            }
            let c: Condition = f[0].parse().map_err(|e: Error| bad(i + 1, e.to_string()))?;
            if condition.is_some_and(|prev| prev != c) {
                return Err(bad(i + 1, "mixed conditions".into()));
            }
            condition = Some(c);
            let score: f64 = f[2].parse().map_err(|_| bad(i + 1, format!("bad score `{}`", f[2])))?;
            if f[1] == MACRO_ROW {
                macro_average = Some(score);
            } else {
                let seed = f[1].parse().map_err(|_| bad(i + 1, format!("bad seed `{}`", f[1])))?;
                per_seed.push((seed, score));
            }
        }
        match (condition, macro_average) {
            (Some(condition), Some(macro_average)) => Ok(Self {
                condition,
                per_seed,
                macro_average,
            }),
            _ => Err(bad(0, "missing rows".into())),
        }
    }

    pub fn save_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Renders a `Method | column...` table with scores on the 0-100 scale
/// (already multiplied), two decimals, missing cells left blank.
pub fn render_table(columns: &[String], rows: &[(String, Vec<Option<f64>>)]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, vals)| {
            std::iter::once(label.clone())
                .chain(vals.iter().map(|v| v.map(|x| format!("{x:.2}")).unwrap_or_default()))
                .collect()
        })
        .collect();
    let header: Vec<String> = std::iter::once("Method".to_string()).chain(columns.iter().cloned()).collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |row: &[String]| {
        let parts: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        format!("| {} |\n", parts.join(" | "))
    };
    let mut out = line(&header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for row in &cells {
        out.push_str(&line(row));
    }
    out
}

/// One-column table of macro-averaged BLEU (x100) per condition.
pub fn render_reports(reports: &[RunReport]) -> String {
    let rows: Vec<(String, Vec<Option<f64>>)> = reports
        .iter()
        .map(|r| (r.condition.label().to_string(), vec![Some(r.macro_average * 100.0)]))
        .collect();
    render_table(&["BLEU".to_string()], &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_examples() {
        let r = bleu_corpus(&[toks("a b c d e")], &[toks("a b c d e")]).unwrap();
        assert_eq!(r.score, 1.0);

        let r = bleu_corpus(&[toks("a a a a")], &[toks("a b c d")]).unwrap();
        assert_eq!(r.precisions, [0.25, 0.0, 0.0, 0.0]);
        assert_eq!(r.score, 0.0);

        let r = bleu_corpus(&[toks("a b c d")], &[toks("a b c d e")]).unwrap();
        assert_eq!(r.precisions, [1.0; 4]);
        assert!((r.score - (-0.25f64).exp()).abs() < 1e-12);
        assert!((r.score - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn bleu_edge_cases() {
        let empty: Vec<Vec<String>> = Vec::new();
        assert_eq!(bleu_corpus(&empty, &empty).unwrap().score, 0.0);
        assert_eq!(bleu_corpus(&[vec![]], &[toks("a b")]).unwrap().score, 0.0);
        assert!(bleu_corpus(&[toks("a")], &[]).is_err());
        let s = bleu_corpus_with(&[toks("a b")], &[toks("a b")], true).unwrap();
        assert!(s.score > 0.0 && s.score <= 1.0);
    }

    #[test]
    fn noise_threshold_is_inclusive() {
        use ImageLabel::*;
        use KeywordLabel::*;
        let recs = vec![
            LabelRecord {
                pair_id: 0,
                keyword_labels: vec![Entity, NonEntity, NonEntity],
                image_labels: vec![Ok, Ok, Noise],
            },
            LabelRecord {
                pair_id: 1,
                keyword_labels: vec![Entity, NonEntity],
                image_labels: vec![Noise, Ok],
            },
            LabelRecord {
                pair_id: 2,
                keyword_labels: vec![Entity, Entity, NonEntity],
                image_labels: vec![Ok],
            },
        ];
        let s = noise_statistics(&recs).unwrap();
        assert_eq!(s.n_sentences, 3);
        assert_eq!(s.n_half_or_more_nonentity_keywords, 2);
        assert_eq!(s.n_half_or_more_noise_images, 1);
        let mut bad = recs.clone();
        bad[1].image_labels.clear();
        assert!(noise_statistics(&bad).is_err());
    }

    #[test]
    fn label_json_format() {
        let r: LabelRecord =
            serde_json::from_str(r#"{"pair_id":3,"keyword_labels":["entity","non-entity"],"image_labels":["ok","noise"]}"#)
                .unwrap();
        assert_eq!(r.keyword_labels, vec![KeywordLabel::Entity, KeywordLabel::NonEntity]);
    }

    fn report(s: f64) -> BleuReport {
        BleuReport {
            score: s,
            precisions: [s; 4],
            brevity_penalty: 1.0,
            hyp_length: 4,
            ref_length: 4,
        }
    }

    #[test]
    fn macro_average_examples() {
        let r = macro_average_report(&[(1, report(0.3))], Condition::TextOnly).unwrap();
        assert_eq!(r.macro_average, 0.3);
        let r = macro_average_report(&[(1, report(0.10)), (2, report(0.20))], Condition::TextOnly).unwrap();
        assert!((r.macro_average - 0.15).abs() < 1e-15);
        let five: Vec<_> = (1..=5).map(|s| (s, report(0.37))).collect();
        let r = macro_average_report(&five, Condition::BlankImages).unwrap();
        assert!((r.macro_average - 0.37).abs() < 1e-15);
        assert!(macro_average_report(&[], Condition::TextOnly).is_err());
    }

    #[test]
    fn results_tsv_round_trip() {
        let r = macro_average_report(&[(1, report(0.125)), (7, report(0.5))], Condition::ImageFilter).unwrap();
        let text = r.to_tsv();
        assert!(text.starts_with("condition\tseed\tbleu\nimage_filter\t1\t0.125\n"));
        assert!(text.ends_with("image_filter\tmacro\t0.3125\n"));
        assert_eq!(RunReport::from_tsv(&text).unwrap(), r);
    }

    #[test]
    fn table_layout() {
        let reports = vec![
            RunReport {
                condition: Condition::TextOnly,
                per_seed: vec![(1, 0.3370)],
                macro_average: 0.3370,
            },
            RunReport {
                condition: Condition::RetrievedImages,
                per_seed: vec![(1, 0.3843)],
                macro_average: 0.3843,
            },
        ];
        let t = render_reports(&reports);
        let expected = "\
| Method                    |  BLEU |
|---------------------------|-------|
| Text-only NMT             | 33.70 |
| MMT with Retrieved Images | 38.43 |
";
        assert_eq!(t, expected);
    }
}
