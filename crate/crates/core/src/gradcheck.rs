//! Finite-difference checks of each differentiable component on tiny
//! float64 shapes. Each component is reduced to a scalar through a fixed
//! random projection so no gradient cancels by symmetry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::{BOS, EOS};
use crate::decoder::{bidirectional_attention_on, decode_step_on, initial_state_on, DecoderMemory, EnhancedVars};
use crate::encoders::{attend_over_grids_on, encode_text_on, supplementary_features, HashEmbeddingProvider};
use crate::error::Result;
use crate::filters::region_scores_on;
use crate::model::{Condition, Model, SentenceVisual, Wiring};
use crate::nn::ModelDims;
use crate::params::{ParamId, ParamSet};
use crate::querygen::SearchQuery;
use crate::retrieval::{ImageFeatureGrid, SupplementaryText};
use crate::tensor::Matrix;
use crate::training::{gradient_check, GradCheckReport};

pub const COMPONENTS: [&str; 7] = [
    "encode_text",
    "attend_over_grids",
    "encode_supplementary",
    "bidirectional_attention",
    "decode_step",
    "region_score",
    "pipeline",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub report: GradCheckReport,
}

/// Source length 2, two grids of `3 x 4`, vocabularies of 6.
pub fn gradcheck_dims() -> ModelDims {
    ModelDims::tiny(6, 6)
}

fn random(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

/// Sum of `x` weighted elementwise by a fixed random matrix.
fn project(tape: &mut Tape<f64>, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let (r, c) = tape.shape(x);
    let w = random(r, c, 1.0, rng);
    let m = tape.mul_const(x, w)?;
    Ok(tape.sum(m))
}

fn with_prefix(params: &ParamSet<f64>, prefixes: &[&str]) -> Vec<ParamId> {
    params
        .ids()
        .filter(|&id| prefixes.iter().any(|p| params.name(id).starts_with(p)))
        .collect()
}

/// Weights of magnitude in `[0.3, 0.8)` with random sign. Near-zero
/// weights leave gradients so small that step-1e-5 differences are
/// dominated by roundoff.
fn model(seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::new(gradcheck_dims(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = m.params.ids().collect();
    for id in ids {
        for v in m.params.get_mut(id).as_mut_slice() {
            let mag = rng.gen_range(0.3..0.8);
            *v = if rng.gen::<bool>() { mag } else { -mag };
        }
    }
    m
}

/// `params` extended with the given inputs, so their gradients are
/// checked too. Returns the extended set and the input ids.
fn with_inputs(params: &ParamSet<f64>, inputs: &[(&str, &Matrix<f64>)]) -> (ParamSet<f64>, Vec<ParamId>) {
    let mut q = params.clone();
    let ids = inputs.iter().map(|(n, m)| q.add(format!("input.{n}"), (*m).clone())).collect();
    (q, ids)
}

fn check<F>(params: &ParamSet<f64>, ids: &[ParamId], inputs: &[(&str, &Matrix<f64>)], forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (q, input_ids) = with_inputs(params, inputs);
    let vars: Vec<Var> = input_ids.iter().map(|id| id.var()).collect();
    let mut all = ids.to_vec();
    all.extend(&input_ids);
    gradient_check(&q, &all, |t| forward(t, &vars))
}

fn supplementary(dims: &ModelDims) -> Result<Vec<Matrix<f64>>> {
    let texts: Vec<SupplementaryText> = [vec!["a", "dog", "runs"], vec!["green", "grass"]]
        .iter()
        .map(|t| SupplementaryText {
            tokens: t.iter().map(|s| s.to_string()).collect(),
            source_id: t.join("_"),
            matched_query: SearchQuery {
                terms: vec![t[0].to_string()],
                rank: 1,
            },
        })
        .collect();
    supplementary_features(
        &texts,
        &HashEmbeddingProvider::new(dims.visual_dim),
        dims.grid_rows,
        dims.visual_dim,
    )
}

/// Runs every component check with parameters drawn from `seed`.
pub fn component_gradient_checks(seed: u64) -> Result<Vec<ComponentCheck>> {
    let m = model(seed);
    let dims = m.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let source = [4u32, 5];
    let target = [BOS, 4, 5, EOS];
    let grids = [
        random(dims.grid_rows, dims.visual_dim, 1.0, &mut rng),
        random(dims.grid_rows, dims.visual_dim, 1.0, &mut rng),
    ];
    let texts = supplementary(&dims)?;
    let pooled = random(1, dims.ctx(), 1.0, &mut rng);
    let states = random(source.len(), dims.ctx(), 1.0, &mut rng);
    let visual = random(dims.grid_rows, dims.visual_dim, 1.0, &mut rng);
    let enhanced = random(source.len(), dims.ctx(), 1.0, &mut rng);
    let enhanced_visual = random(dims.grid_rows, dims.ctx(), 1.0, &mut rng);
    let regions = random(5, dims.visual_dim, 1.0, &mut rng);
    let proj_seed: u64 = rng.gen();
    let p = &m.params;
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(ComponentCheck {
            component: name.to_string(),
            report,
        })
    };

    let r = || ChaCha8Rng::seed_from_u64(proj_seed);
    push(
        "encode_text",
        check(p, &with_prefix(p, &["enc."]), &[], |t, _| {
            let s = encode_text_on(t, &m.encoder, &source, dims.src_vocab, &mut None)?;
            project(t, s, &mut r())
        })?,
    );
    let fuse = |items: &[Matrix<f64>]| {
        let names = ["item0", "item1", "item2"];
        let mut inputs = vec![("pooled", &pooled)];
        inputs.extend(names.iter().copied().zip(items));
        check(p, &with_prefix(p, &["fuse."]), &inputs, |t, v| {
            let (fused, _) = attend_over_grids_on(t, &m.encoder, v[0], &v[1..])?;
            project(t, fused, &mut r())
        })
    };
    push("attend_over_grids", fuse(&grids)?);
    push("encode_supplementary", fuse(&texts)?);
    let d = &m.decoder;
    push(
        "bidirectional_attention",
        check(
            p,
            &[d.w_p, d.w_b, d.w_t, d.w_v],
            &[("states", &states), ("visual", &visual)],
            |t, v| {
                let e = bidirectional_attention_on(t, d, v[0], Some(v[1]))?;
                let mut rr = r();
                let a = project(t, e.text_enh, &mut rr)?;
                let b = project(t, e.visual_enh.expect("visual input given"), &mut rr)?;
                t.add(a, b)
            },
        )?,
    );
    let mut step_ids = with_prefix(p, &["dec.gru", "dec.text_att", "dec.visual_att", "dec.embedding"]);
    step_ids.extend([d.w_1, d.w_2, d.w_3, d.w_4, d.w_o, d.w_init]);
    push(
        "decode_step",
        check(
            p,
            &step_ids,
            &[("pooled", &pooled), ("text_enh", &enhanced), ("visual_enh", &enhanced_visual)],
            |t, v| {
                let enh = EnhancedVars {
                    text_enh: v[1],
                    visual_enh: Some(v[2]),
                    text_attention: None,
                    visual_attention: None,
                };
                let memory = DecoderMemory::new(t, d, &enh)?;
                let mut state = initial_state_on(t, d, v[0])?;
                let mut picks = Vec::new();
                for w in target.windows(2) {
                    let s = decode_step_on(t, d, &memory, state, w[0], &mut None)?;
                    picks.push(t.pick(s.distribution, &[(0, w[1] as usize)])?);
                    state = s.state;
                }
                let all = t.hcat(&picks)?;
                let logs = t.ln_clamped(all);
                let total = t.sum(logs);
                Ok(t.scale(total, -1.0))
            },
        )?,
    );
    push(
        "region_score",
        check(
            p,
            &with_prefix(p, &["region."]),
            &[("regions", &regions), ("pooled", &pooled)],
            |t, v| {
                let s = region_scores_on(t, &m.region, v[0], v[1])?;
                project(t, s, &mut r())
            },
        )?,
    );

    let sentence = SentenceVisual {
        grids: grids
            .iter()
            .enumerate()
            .map(|(i, g)| ImageFeatureGrid::new(g.clone(), format!("g{i}")))
            .collect(),
        ..SentenceVisual::text_only(0)
    };
    let wiring = Wiring::new(Condition::RetrievedImages, 2, 1);
    let all: Vec<ParamId> = p.ids().filter(|id| !m.region_ids().contains(id)).collect();
    push(
        "pipeline",
        check(p, &all, &[], |t, _| {
            Ok(m.sentence_nll_on(t, &wiring, &source, &target, &sentence, &mut None)?.0)
        })?,
    );
    Ok(out)
}
