//! Bidirectional GRU text encoder and text-aware attentive fusion of
//! retrieved feature grids or supplementary texts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::nn::{maybe_dropout, Dropout, GruCell, ModelDims};
use crate::params::{ParamId, ParamSet};
use crate::retrieval::{ImageFeatureGrid, SupplementaryText};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Encoder states `h_1..h_N`, each the concatenation `[fwd_n ; bwd_n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding<T> {
    /// `N x 2d`
    pub states: Matrix<T>,
    pub d: usize,
}

/// Mean of the unmasked encoder states, `1 x 2d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledText<T> {
    pub vector: Matrix<T>,
}

/// Attention-weighted combination of `M` grids.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation<T> {
    /// `L x D_v`
    pub values: Matrix<T>,
    pub attention_weights: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub forward: GruCell,
    pub backward: GruCell,
    /// `d_k x 2d`
    pub w_q: ParamId,
    /// `d_k x D_v`
    pub w_k: ParamId,
}

impl EncoderParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<T>, dims: &ModelDims, rng: &mut R) -> Self {
        let embedding = params.add_init("enc.embedding", dims.src_vocab, dims.embed, dims.init, rng);
        let forward = GruCell::new(params, "enc.fwd", dims.embed, dims.hidden, dims.init, rng);
        let backward = GruCell::new(params, "enc.bwd", dims.embed, dims.hidden, dims.init, rng);
        let w_q = params.add_init("fuse.w_q", dims.key_dim, dims.ctx(), dims.init, rng);
        let w_k = params.add_init("fuse.w_k", dims.key_dim, dims.visual_dim, dims.init, rng);
        Self {
            embedding,
            forward,
            backward,
            w_q,
            w_k,
        }
    }
}

/// Drops PAD positions and range-checks ids.
pub fn unmasked_ids(ids: &[u32], vocab_size: usize) -> Result<Vec<usize>> {
    let kept: Vec<usize> = ids
        .iter()
        .filter(|&&id| id != PAD)
        .map(|&id| id as usize)
        .collect();
    if let Some(&bad) = kept.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::IdOutOfRange {
            id: bad,
            size: vocab_size,
        });
    }
    if kept.is_empty() {
        return Err(Error::EmptySentence);
    }
    Ok(kept)
}

/// Runs both recurrent directions over one sentence and returns the
/// `N x 2d` state matrix (PAD positions removed).
pub fn encode_text_on<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &EncoderParams,
    ids: &[u32],
    vocab_size: usize,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    let ids = unmasked_ids(ids, vocab_size)?;
    let embedded: Vec<Var> = ids
        .iter()
        .map(|&id| tape.gather(enc.embedding.var(), &[id]))
        .collect::<Result<_>>()?;

    let mut fwd = Vec::with_capacity(ids.len());
    let mut h = tape.zeros(1, enc.forward.hidden);
    for &x in &embedded {
        h = enc.forward.step(tape, x, h)?;
        fwd.push(h);
    }
    let mut bwd = vec![h; ids.len()];
    let mut h = tape.zeros(1, enc.backward.hidden);
    for (n, &x) in embedded.iter().enumerate().rev() {
        h = enc.backward.step(tape, x, h)?;
        bwd[n] = h;
    }
    let rows: Vec<Var> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.hcat(&[f, b]))
        .collect::<Result<_>>()?;
    let states = tape.vcat(&rows)?;
    maybe_dropout(dropout, tape, states)
}

/// Encodes each sentence of a padded id batch.
pub fn encode_text<T: Scalar>(
    batch: &[Vec<u32>],
    params: &ParamSet<T>,
    enc: &EncoderParams,
) -> Result<Vec<TextEncoding<T>>> {
    let vocab = params.get(enc.embedding).rows();
    batch
        .iter()
        .map(|ids| {
            let mut tape = Tape::new();
            params.bind(&mut tape);
            let h = encode_text_on(&mut tape, enc, ids, vocab, &mut None)?;
            Ok(TextEncoding {
                states: tape.value(h).clone(),
                d: enc.forward.hidden,
            })
        })
        .collect()
}

/// Mean over rows where `mask` is true.
pub fn pool_text<T: Scalar>(enc: &TextEncoding<T>, mask: &[bool]) -> Result<PooledText<T>> {
    if mask.len() != enc.states.rows() {
        return Err(Error::shape(
            "pool_text",
            format!("mask of {} for {} rows", mask.len(), enc.states.rows()),
        ));
    }
    let keep: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if keep.is_empty() {
        return Err(Error::InvalidArgument("every position is masked".into()));
    }
    Ok(PooledText {
        vector: enc.states.select_rows(&keep).mean_rows(),
    })
}

/// Scaled dot-product attention with the pooled text as query and the
/// grids as keys (mean row projected by `W_k`) and values.
///
/// Returns the fused `L x D_v` node and the `1 x M` attention weights.
pub fn attend_over_grids_on<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &EncoderParams,
    pooled: Var,
    grids: &[Var],
) -> Result<(Var, Var)> {
    let first = *grids
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one grid".into()))?;
    let (rows, cols) = tape.shape(first);
    if let Some(&bad) = grids.iter().find(|&&g| tape.shape(g) != (rows, cols)) {
        return Err(Error::shape(
            "attend_over_grids",
            format!("{:?} vs {:?}", tape.shape(bad), (rows, cols)),
        ));
    }
    let key_dim = tape.shape(enc.w_q.var()).0;

    let query = tape.linear(pooled, enc.w_q.var())?;
    let means: Vec<Var> = grids.iter().map(|&g| tape.mean_rows(g)).collect();
    let means = tape.vcat(&means)?;
    let keys = tape.linear(means, enc.w_k.var())?;
    let scores = tape.linear(query, keys)?;
    let scaled = tape.scale(scores, T::one() / T::of(key_dim as f64).sqrt());
    let alpha = tape.softmax_rows(scaled);

    let flat: Vec<Var> = grids
        .iter()
        .map(|&g| tape.reshape(g, 1, rows * cols))
        .collect::<Result<_>>()?;
    let stacked = tape.vcat(&flat)?;
    let mixed = tape.matmul(alpha, stacked)?;
    let values = tape.reshape(mixed, rows, cols)?;
    Ok((values, alpha))
}

pub fn attend_over_grids<T: Scalar>(
    pooled: &PooledText<T>,
    grids: &[ImageFeatureGrid<T>],
    params: &ParamSet<T>,
    enc: &EncoderParams,
) -> Result<FusedRepresentation<T>> {
    let mut tape = Tape::new();
    params.bind(&mut tape);
    let p = tape.leaf(pooled.vector.clone());
    let g: Vec<Var> = grids.iter().map(|g| tape.leaf(g.values.clone())).collect();
    let (values, alpha) = attend_over_grids_on(&mut tape, enc, p, &g)?;
    Ok(FusedRepresentation {
        values: tape.value(values).clone(),
        attention_weights: tape.value(alpha).as_slice().to_vec(),
    })
}

/// Maps a supplementary text to an `N_t x D_v` feature matrix.
pub trait TextFeatureProvider<T>: Send + Sync {
    fn features(&self, text: &SupplementaryText) -> Result<Matrix<T>>;
}

/// Weight-free token features: each token's row is drawn from a ChaCha8
/// stream seeded by the FNV-1a hash of its UTF-8 bytes.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbeddingProvider {
    pub dim: usize,
    pub scale: f64,
}

impl HashEmbeddingProvider {
    pub fn new(dim: usize) -> Self {
        Self { dim, scale: 1.0 }
    }

    pub fn token_vector<T: Scalar>(&self, token: &str) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
        (0..self.dim)
            .map(|_| T::of(rng.gen_range(-self.scale..self.scale)))
            .collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Scalar> TextFeatureProvider<T> for HashEmbeddingProvider {
    fn features(&self, text: &SupplementaryText) -> Result<Matrix<T>> {
        let rows: Vec<Vec<T>> = text.tokens.iter().map(|t| self.token_vector(t)).collect();
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.dim));
        }
        Matrix::from_rows(&rows)
    }
}

/// Precomputed features keyed by the space-joined tokens.
#[derive(Debug, Clone, Default)]
pub struct FixtureTextProvider<T> {
    pub features: HashMap<String, Matrix<T>>,
}

impl<T: Scalar> TextFeatureProvider<T> for FixtureTextProvider<T> {
    fn features(&self, text: &SupplementaryText) -> Result<Matrix<T>> {
        let key = text.tokens.join(" ");
        self.features
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::MissingFixture(format!("text features for `{key}`")))
    }
}

/// Zero-pads or truncates rows to exactly `rows`.
pub fn pad_or_truncate<T: Scalar>(m: &Matrix<T>, rows: usize) -> Matrix<T> {
    Matrix::from_fn(rows, m.cols(), |r, c| {
        if r < m.rows() {
            m.get(r, c)
        } else {
            T::zero()
        }
    })
}

/// Text features for each supplementary text, shaped `L x D_v`.
pub fn supplementary_features<T: Scalar>(
    texts: &[SupplementaryText],
    provider: &dyn TextFeatureProvider<T>,
    rows: usize,
    cols: usize,
) -> Result<Vec<Matrix<T>>> {
    texts
        .iter()
        .map(|t| {
            let f = provider.features(t)?;
            if f.cols() != cols {
                return Err(Error::shape(
                    "supplementary_features",
                    format!("provider returned {} columns, expected {cols}", f.cols()),
                ));
            }
            Ok(pad_or_truncate(&f, rows))
        })
        .collect()
}

/// Fuses supplementary texts exactly like image grids, after padding each
/// text's features to `L x D_v`.
pub fn encode_supplementary<T: Scalar>(
    pooled: &PooledText<T>,
    texts: &[SupplementaryText],
    provider: &dyn TextFeatureProvider<T>,
    params: &ParamSet<T>,
    enc: &EncoderParams,
    grid_rows: usize,
) -> Result<FusedRepresentation<T>> {
    let cols = params.get(enc.w_k).cols();
    let feats = supplementary_features(texts, provider, grid_rows, cols)?;
    let grids: Vec<ImageFeatureGrid<T>> = feats
        .into_iter()
        .zip(texts)
        .map(|(f, t)| ImageFeatureGrid::new(f, t.source_id.clone()))
        .collect();
    attend_over_grids(pooled, &grids, params, enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::querygen::SearchQuery;

    fn setup(seed: u64) -> (ParamSet<f64>, EncoderParams, ModelDims) {
        let dims = ModelDims::tiny(7, 5);
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = EncoderParams::new(&mut params, &dims, &mut rng);
        (params, enc, dims)
    }

    fn text(tokens: &[&str]) -> SupplementaryText {
        SupplementaryText {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            source_id: "t".into(),
            matched_query: SearchQuery {
                terms: vec![tokens[0].to_string()],
                rank: 1,
            },
        }
    }

    #[test]
    fn encode_shapes_and_errors() {
        let (params, enc, dims) = setup(1);
        let out = encode_text(&[vec![4]], &params, &enc).unwrap();
        assert_eq!(out[0].states.shape(), (1, dims.ctx()));
        assert!(matches!(
            encode_text(&[vec![4, 99]], &params, &enc),
            Err(Error::IdOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn zero_parameters_give_zero_states() {
        let (mut params, enc, _) = setup(2);
        for id in params.ids().collect::<Vec<_>>() {
            let (r, c) = params.get(id).shape();
            *params.get_mut(id) = Matrix::zeros(r, c);
        }
        let out = encode_text(&[vec![4, 5, 6]], &params, &enc).unwrap();
        assert_eq!(out[0].states, Matrix::zeros(3, 4));
    }

    #[test]
    fn reversal_swaps_directions() {
        let (mut params, enc, _) = setup(3);
        // share weights between the two directions
        let pairs = [
            (enc.forward.w_z, enc.backward.w_z),
            (enc.forward.u_z, enc.backward.u_z),
            (enc.forward.b_z, enc.backward.b_z),
            (enc.forward.w_r, enc.backward.w_r),
            (enc.forward.u_r, enc.backward.u_r),
            (enc.forward.b_r, enc.backward.b_r),
            (enc.forward.w_h, enc.backward.w_h),
            (enc.forward.u_h, enc.backward.u_h),
            (enc.forward.b_h, enc.backward.b_h),
        ];
        for (f, b) in pairs {
            *params.get_mut(b) = params.get(f).clone();
        }
        let ab = &encode_text(&[vec![4, 5]], &params, &enc).unwrap()[0].states;
        let ba = &encode_text(&[vec![5, 4]], &params, &enc).unwrap()[0].states;
        let d = 2;
        for n in 0..2 {
            for k in 0..d {
                assert!((ab.get(n, k) - ba.get(1 - n, d + k)).abs() < 1e-15);
                assert!((ab.get(n, d + k) - ba.get(1 - n, k)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn padding_leaves_pool_unchanged() {
        let (params, enc, _) = setup(4);
        let a = &encode_text(&[vec![4, 5]], &params, &enc).unwrap()[0];
        let b = &encode_text(&[vec![4, 5, PAD, PAD]], &params, &enc).unwrap()[0];
        let pa = pool_text(a, &[true, true]).unwrap();
        let pb = pool_text(b, &[true, true]).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn pool_examples() {
        let enc = |rows: &[Vec<f64>]| TextEncoding {
            states: Matrix::from_rows(rows).unwrap(),
            d: 1,
        };
        let p = pool_text(&enc(&[vec![1., 3.]]), &[true]).unwrap();
        assert_eq!(p.vector.as_slice(), &[1., 3.]);
        let p = pool_text(&enc(&[vec![0., 0.], vec![2., 4.]]), &[true, true]).unwrap();
        assert_eq!(p.vector.as_slice(), &[1., 2.]);
        let p = pool_text(&enc(&[vec![1.], vec![9.]]), &[true, false]).unwrap();
        assert_eq!(p.vector.as_slice(), &[1.]);
        assert!(pool_text(&enc(&[vec![1.]]), &[false]).is_err());
    }

    fn pooled(v: &[f64]) -> PooledText<f64> {
        PooledText {
            vector: Matrix::row_vector(v.to_vec()),
        }
    }

    #[test]
    fn attention_examples() {
        let (params, enc, dims) = setup(5);
        let p = pooled(&[0.3, -0.2, 0.5, 0.1]);
        let g = ImageFeatureGrid::new(
            Matrix::from_fn(dims.grid_rows, dims.visual_dim, |r, c| (r + 2 * c) as f64 * 0.1),
            "g",
        );
        let one = attend_over_grids(&p, std::slice::from_ref(&g), &params, &enc).unwrap();
        assert_eq!(one.attention_weights, vec![1.0]);
        assert_eq!(one.values, g.values);

        let z = ImageFeatureGrid::blank(dims.grid_rows, dims.visual_dim);
        let zero = attend_over_grids(&p, &[z.clone(), z.clone(), z], &params, &enc).unwrap();
        assert_eq!(zero.values, Matrix::zeros(dims.grid_rows, dims.visual_dim));
        assert!(zero.attention_weights.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));

        let two = attend_over_grids(&p, &[g.clone(), g.clone()], &params, &enc).unwrap();
        assert_eq!(two.attention_weights, vec![0.5, 0.5]);
        assert!(two.values.max_abs_diff(&g.values) < 1e-15);

        let bad = ImageFeatureGrid::blank(1, dims.visual_dim);
        assert!(attend_over_grids(&p, &[g, bad], &params, &enc).is_err());
    }

    #[test]
    fn padding_and_truncation() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let p = pad_or_truncate(&m, 4);
        assert_eq!(p.shape(), (4, 2));
        assert_eq!(p.row(2), &[0.0, 0.0]);
        assert_eq!(p.row(3), &[0.0, 0.0]);
        assert_eq!(pad_or_truncate(&m, 2), m);
        assert_eq!(pad_or_truncate(&m, 1).shape(), (1, 2));
    }

    #[test]
    fn supplementary_with_zero_features() {
        let (params, enc, dims) = setup(6);
        let mut fx = FixtureTextProvider::default();
        fx.features.insert("a b".into(), Matrix::zeros(2, dims.visual_dim));
        let out = encode_supplementary(
            &pooled(&[0.1, 0.2, 0.3, 0.4]),
            &[text(&["a", "b"])],
            &fx,
            &params,
            &enc,
            dims.grid_rows,
        )
        .unwrap();
        assert_eq!(out.values, Matrix::zeros(dims.grid_rows, dims.visual_dim));
        assert!(encode_supplementary(
            &pooled(&[0.1, 0.2, 0.3, 0.4]),
            &[text(&["zz"])],
            &fx,
            &params,
            &enc,
            dims.grid_rows
        )
        .is_err());
    }

    #[test]
    fn hash_embedding_is_deterministic() {
        let h = HashEmbeddingProvider::new(4);
        let a: Vec<f64> = h.token_vector("dog");
        assert_eq!(a, h.token_vector::<f64>("dog"));
        assert_ne!(a, h.token_vector::<f64>("cat"));
        let f: Matrix<f64> = h.features(&text(&["dog", "cat"])).unwrap();
        assert_eq!(f.shape(), (2, 4));
    }
}
