//! Noise filtering: image-level top-M selection by text–image similarity and
//! region-level top-O selection by the additive relevance score
//! `S(a_o, C') = V_a^T tanh(W_a a_o + U_a C')`.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ModelDims;
use crate::params::{ParamId, ParamSet};
use crate::retrieval::{read_json_lines, ImageFeatureGrid};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Indices of the `k` largest scores, best first; equal scores keep input order.
pub fn top_k_indices<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // stable sort: ties stay in input order
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx.truncate(k);
    idx
}

/// Text–image relevance used to pick the top `M` of `M'` candidates.
pub trait SimilarityScorer<T>: Send + Sync {
    fn score(&self, pair_id: usize, pooled: &Matrix<T>, grid: &ImageFeatureGrid<T>) -> Result<T>;
}

/// Cosine between `W_s * C'` and the grid's mean row. Zero vectors score 0.
#[derive(Debug, Clone)]
pub struct CosineScorer<T> {
    /// `D_v x 2d`
    pub w_s: Matrix<T>,
}

impl<T: Scalar> CosineScorer<T> {
    pub fn random<R: Rng + ?Sized>(dims: &ModelDims, rng: &mut R) -> Self {
        Self {
            w_s: Matrix::uniform(dims.visual_dim, dims.ctx(), dims.init.scale(dims.visual_dim, dims.ctx()), rng),
        }
    }
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        T::zero()
    } else {
        dot / (na * nb)
    }
}

impl<T: Scalar> SimilarityScorer<T> for CosineScorer<T> {
    fn score(&self, _pair_id: usize, pooled: &Matrix<T>, grid: &ImageFeatureGrid<T>) -> Result<T> {
        if pooled.cols() != self.w_s.cols() || grid.values.cols() != self.w_s.rows() {
            return Err(Error::shape(
                "cosine scorer",
                format!(
                    "W_s {:?}, pooled {:?}, grid {:?}",
                    self.w_s.shape(),
                    pooled.shape(),
                    grid.shape()
                ),
            ));
        }
        let projected = pooled.matmul_t(&self.w_s);
        let mean = grid.values.mean_rows();
        Ok(cosine(projected.as_slice(), mean.as_slice()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub pair_id: usize,
    pub candidate_id: String,
    pub score: f64,
}

/// Precomputed scores keyed by `(pair_id, candidate source id)`.
#[derive(Debug, Clone, Default)]
pub struct FixtureScorer {
    pub scores: HashMap<(usize, String), f64>,
}

impl FixtureScorer {
    pub fn from_records(records: impl IntoIterator<Item = ScoreRecord>) -> Self {
        Self {
            scores: records
                .into_iter()
                .map(|r| ((r.pair_id, r.candidate_id), r.score))
                .collect(),
        }
    }

    /// JSON lines `{pair_id, candidate_id, score}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_records(read_json_lines::<ScoreRecord>(path.as_ref())?))
    }
}

impl<T: Scalar> SimilarityScorer<T> for FixtureScorer {
    fn score(&self, pair_id: usize, _pooled: &Matrix<T>, grid: &ImageFeatureGrid<T>) -> Result<T> {
        self.scores
            .get(&(pair_id, grid.source_id.clone()))
            .map(|&s| T::of(s))
            .ok_or_else(|| {
                Error::MissingFixture(format!("score for pair {pair_id}, `{}`", grid.source_id))
            })
    }
}

/// Positions of the `m` best-scoring candidates, best first.
pub fn select_images<T: Scalar>(
    candidates: &[ImageFeatureGrid<T>],
    pooled: &Matrix<T>,
    m: usize,
    scorer: &dyn SimilarityScorer<T>,
    pair_id: usize,
) -> Result<Vec<usize>> {
    if candidates.len() < m {
        return Err(Error::InvalidArgument(format!(
            "{} candidates cannot yield {m} images",
            candidates.len()
        )));
    }
    let scores: Vec<T> = candidates
        .iter()
        .map(|g| scorer.score(pair_id, pooled, g))
        .collect::<Result<_>>()?;
    Ok(top_k_indices(&scores, m))
}

/// The `m` most text-relevant of the `M'` candidates, score-descending.
pub fn filter_images<T: Scalar>(
    candidates: &[ImageFeatureGrid<T>],
    pooled: &Matrix<T>,
    m: usize,
    scorer: &dyn SimilarityScorer<T>,
    pair_id: usize,
) -> Result<Vec<ImageFeatureGrid<T>>> {
    Ok(select_images(candidates, pooled, m, scorer, pair_id)?
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub struct RegionFilterParams {
    /// `1 x d_a`
    pub v_a: ParamId,
    /// `d_a x D_v`
    pub w_a: ParamId,
    /// `d_a x 2d`
    pub u_a: ParamId,
}

impl RegionFilterParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<T>, dims: &ModelDims, rng: &mut R) -> Self {
        Self {
            v_a: params.add_init("region.v_a", 1, dims.region_dim, dims.init, rng),
            w_a: params.add_init("region.w_a", dims.region_dim, dims.visual_dim, dims.init, rng),
            u_a: params.add_init("region.u_a", dims.region_dim, dims.ctx(), dims.init, rng),
        }
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.v_a, self.w_a, self.u_a]
    }
}

/// Scores every row of `regions` (`K x D_v`) against `pooled` (`1 x 2d`);
/// returns a `K x 1` node.
pub fn region_scores_on<T: Scalar>(
    tape: &mut Tape<T>,
    p: &RegionFilterParams,
    regions: Var,
    pooled: Var,
) -> Result<Var> {
    let wa = tape.linear(regions, p.w_a.var())?;
    let uc = tape.linear(pooled, p.u_a.var())?;
    let pre = tape.add_row(wa, uc)?;
    let act = tape.tanh(pre);
    tape.linear(act, p.v_a.var())
}

pub fn region_score<T: Scalar>(
    region: &[T],
    pooled: &Matrix<T>,
    params: &ParamSet<T>,
    p: &RegionFilterParams,
) -> Result<T> {
    let mut tape = Tape::new();
    params.bind(&mut tape);
    let a = tape.leaf(Matrix::row_vector(region.to_vec()));
    let c = tape.leaf(pooled.clone());
    let s = region_scores_on(&mut tape, p, a, c)?;
    Ok(tape.scalar(s))
}

/// Keeps the `o` highest-scoring rows of `regions`, score-descending.
///
/// The selected rows pass through a straight-through gate on their score so
/// the scorer receives gradient despite the hard selection; the forward value
/// is exactly the selected rows.
pub fn filter_regions_on<T: Scalar>(
    tape: &mut Tape<T>,
    p: &RegionFilterParams,
    regions: Var,
    pooled: Var,
    o: usize,
) -> Result<(Var, Vec<usize>)> {
    let k = tape.shape(regions).0;
    if k < o {
        return Err(Error::InvalidArgument(format!("{k} regions cannot yield {o}")));
    }
    let scores = region_scores_on(tape, p, regions, pooled)?;
    let picked = top_k_indices(tape.value(scores).as_slice(), o);
    let rows: Vec<Var> = picked
        .iter()
        .map(|&i| {
            let row = tape.gather(regions, &[i])?;
            let s = tape.gather(scores, &[i])?;
            tape.straight_through(row, s)
        })
        .collect::<Result<_>>()?;
    Ok((tape.vcat(&rows)?, picked))
}

/// Top-`o` rows of `regions` (all `M x O` region vectors stacked) as an
/// `o x D_v` visual representation.
pub fn filter_regions<T: Scalar>(
    regions: &Matrix<T>,
    pooled: &Matrix<T>,
    o: usize,
    params: &ParamSet<T>,
    p: &RegionFilterParams,
) -> Result<Matrix<T>> {
    let mut tape = Tape::new();
    params.bind(&mut tape);
    let r = tape.leaf(regions.clone());
    let c = tape.leaf(pooled.clone());
    let (out, _) = filter_regions_on(&mut tape, p, r, c, o)?;
    Ok(tape.value(out).clone())
}
