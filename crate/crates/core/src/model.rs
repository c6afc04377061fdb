//! The full translation model and the per-condition visual wiring.
//!
//! Every condition shares the same parameter set, text encoder, decoder and
//! training code; conditions differ only in what reaches the decoder as the
//! visual representation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::unpad;
use crate::decoder::{
    bidirectional_attention_on, decode_step_on, greedy_decode_on, initial_state_on, DecoderMemory,
    DecoderParams,
};
use crate::encoders::{attend_over_grids_on, encode_text_on, EncoderParams};
use crate::error::{Error, Result};
use crate::filters::{filter_regions_on, select_images, RegionFilterParams, SimilarityScorer};
use crate::nn::{Dropout, ModelDims};
use crate::params::{ParamId, ParamSet};
use crate::retrieval::ImageFeatureGrid;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    TextOnly,
    RandomImages,
    BlankImages,
    RetrievedImages,
    ImageFilter,
    RegionFilter,
    BothFilters,
    SupplementaryText,
    VisualAndText,
}

impl Condition {
    pub const ALL: [Condition; 9] = [
        Condition::TextOnly,
        Condition::RandomImages,
        Condition::BlankImages,
        Condition::RetrievedImages,
        Condition::ImageFilter,
        Condition::RegionFilter,
        Condition::BothFilters,
        Condition::SupplementaryText,
        Condition::VisualAndText,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::TextOnly => "text_only",
            Condition::RandomImages => "random_images",
            Condition::BlankImages => "blank_images",
            Condition::RetrievedImages => "retrieved_images",
            Condition::ImageFilter => "image_filter",
            Condition::RegionFilter => "region_filter",
            Condition::BothFilters => "both_filters",
            Condition::SupplementaryText => "supplementary_text",
            Condition::VisualAndText => "visual_and_text",
        }
    }

    /// Row label in the published tables.
    pub fn label(self) -> &'static str {
        match self {
            Condition::TextOnly => "Text-only NMT",
            Condition::RandomImages => "MMT with Random Images",
            Condition::BlankImages => "MMT with Blank Images",
            Condition::RetrievedImages => "MMT with Retrieved Images",
            Condition::ImageFilter => "+ noise image filter",
            Condition::RegionFilter => "+ noise region filter",
            Condition::BothFilters => "+ noise image & region filter",
            Condition::SupplementaryText => "+ textual information",
            Condition::VisualAndText => "+ visual & textual information",
        }
    }

    pub fn uses_images(self) -> bool {
        !matches!(self, Condition::TextOnly | Condition::SupplementaryText)
    }

    pub fn uses_texts(self) -> bool {
        matches!(self, Condition::SupplementaryText | Condition::VisualAndText)
    }

    pub fn filters_images(self) -> bool {
        matches!(self, Condition::ImageFilter | Condition::BothFilters)
    }

    pub fn filters_regions(self) -> bool {
        matches!(self, Condition::RegionFilter | Condition::BothFilters)
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition `{s}`")))
    }
}

/// Retrieved material for one source sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceVisual<T> {
    pub pair_id: usize,
    /// `M` grids, or `M'` candidates when images are filtered.
    pub grids: Vec<ImageFeatureGrid<T>>,
    /// `O x D_v` regions of each grid, parallel to `grids`.
    pub regions: Vec<Matrix<T>>,
    /// Supplementary-text features, each `L x D_v`.
    pub texts: Vec<Matrix<T>>,
}

impl<T> SentenceVisual<T> {
    pub fn text_only(pair_id: usize) -> Self {
        Self {
            pair_id,
            grids: Vec::new(),
            regions: Vec::new(),
            texts: Vec::new(),
        }
    }
}

/// How a condition turns retrieved material into the decoder's visual input.
#[derive(Clone, Copy)]
pub struct Wiring<'a, T> {
    pub condition: Condition,
    /// Images kept by the image filter.
    pub m: usize,
    /// Regions kept by the region filter.
    pub o: usize,
    pub scorer: Option<&'a dyn SimilarityScorer<T>>,
}

impl<'a, T> Wiring<'a, T> {
    pub fn new(condition: Condition, m: usize, o: usize) -> Self {
        Self {
            condition,
            m,
            o,
            scorer: None,
        }
    }

    pub fn with_scorer(mut self, scorer: &'a dyn SimilarityScorer<T>) -> Self {
        self.scorer = Some(scorer);
        self
    }
}

impl<T> fmt::Debug for Wiring<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Wiring")
            .field("condition", &self.condition)
            .field("m", &self.m)
            .field("o", &self.o)
            .field("scorer", &self.scorer.is_some())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub dims: ModelDims,
    pub params: ParamSet<T>,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub region: RegionFilterParams,
}

/// Tape nodes shared by every decoding step of one sentence.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub states: Var,
    pub pooled: Var,
    pub visual: Option<Var>,
    /// Fusion weights over grids (and over texts for the combined condition).
    pub fusion_weights: Vec<Var>,
    pub text_attention: Option<Var>,
    pub visual_attention: Option<Var>,
    pub memory: DecoderMemory,
    pub initial: Var,
}

/// Values observed at one teacher-forced step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace<T> {
    pub distribution: Vec<T>,
    pub text_weights: Vec<T>,
    pub visual_weights: Option<Vec<T>>,
    pub c_t: Matrix<T>,
    pub v_t: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub fusion_weights: Vec<Vec<T>>,
    pub text_attention: Option<Matrix<T>>,
    pub visual_attention: Option<Matrix<T>>,
    pub steps: Vec<StepTrace<T>>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters initialized per `dims.init`. Every condition
    /// allocates the same parameters in the same order.
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = EncoderParams::new(&mut params, &dims, &mut rng);
        let decoder = DecoderParams::new(&mut params, &dims, &mut rng);
        let region = RegionFilterParams::new(&mut params, &dims, &mut rng);
        Self {
            dims,
            params,
            encoder,
            decoder,
            region,
        }
    }

    pub fn set_region_frozen(&mut self, frozen: bool) {
        for id in self.region.ids() {
            self.params.set_frozen(id, frozen);
        }
    }

    pub fn region_ids(&self) -> [ParamId; 3] {
        self.region.ids()
    }

    fn fuse(&self, tape: &mut Tape<T>, pooled: Var, items: &[Matrix<T>]) -> Result<(Var, Var)> {
        let vars: Vec<Var> = items.iter().map(|m| tape.leaf(m.clone())).collect();
        attend_over_grids_on(tape, &self.encoder, pooled, &vars)
    }

    fn chosen_images(
        &self,
        tape: &Tape<T>,
        wiring: &Wiring<'_, T>,
        visual: &SentenceVisual<T>,
        pooled: Var,
    ) -> Result<Vec<usize>> {
        if !wiring.condition.filters_images() {
            return Ok((0..visual.grids.len()).collect());
        }
        let scorer = wiring
            .scorer
            .ok_or_else(|| Error::Config(format!("{} needs an image scorer", wiring.condition)))?;
        select_images(&visual.grids, tape.value(pooled), wiring.m, scorer, visual.pair_id)
    }

    /// The decoder's visual input under `wiring`, or `None` for text-only.
    pub fn visual_on(
        &self,
        tape: &mut Tape<T>,
        wiring: &Wiring<'_, T>,
        visual: &SentenceVisual<T>,
        pooled: Var,
    ) -> Result<(Option<Var>, Vec<Var>)> {
        let need = |what: &str, n: usize| {
            if n == 0 {
                Err(Error::InvalidArgument(format!(
                    "pair {}: {} has no {what}",
                    visual.pair_id, wiring.condition
                )))
            } else {
                Ok(())
            }
        };
        let c = wiring.condition;
        match c {
            Condition::TextOnly => Ok((None, Vec::new())),
            Condition::SupplementaryText => {
                need("supplementary texts", visual.texts.len())?;
                let (v, a) = self.fuse(tape, pooled, &visual.texts)?;
                Ok((Some(v), vec![a]))
            }
            Condition::RegionFilter | Condition::BothFilters => {
                need("images", visual.grids.len())?;
                if visual.regions.len() != visual.grids.len() {
                    return Err(Error::InvalidArgument(format!(
                        "pair {}: {} region sets for {} images",
                        visual.pair_id,
                        visual.regions.len(),
                        visual.grids.len()
                    )));
                }
                let chosen = self.chosen_images(tape, wiring, visual, pooled)?;
                let stacked: Vec<&Matrix<T>> = chosen.iter().map(|&i| &visual.regions[i]).collect();
                let all = tape.leaf(Matrix::vstack(&stacked)?);
                let (kept, _) = filter_regions_on(tape, &self.region, all, pooled, wiring.o)?;
                Ok((Some(kept), Vec::new()))
            }
            _ => {
                need("images", visual.grids.len())?;
                let chosen = self.chosen_images(tape, wiring, visual, pooled)?;
                let grids: Vec<Matrix<T>> = chosen.iter().map(|&i| visual.grids[i].values.clone()).collect();
                let (v, a) = self.fuse(tape, pooled, &grids)?;
                if c != Condition::VisualAndText {
                    return Ok((Some(v), vec![a]));
                }
                need("supplementary texts", visual.texts.len())?;
                let (t, b) = self.fuse(tape, pooled, &visual.texts)?;
                let sum = tape.add(v, t)?;
                Ok((Some(tape.scale(sum, T::of(0.5))), vec![a, b]))
            }
        }
    }

    /// Encodes the source, builds the visual input and the decoder memory.
    pub fn prepare_on(
        &self,
        tape: &mut Tape<T>,
        wiring: &Wiring<'_, T>,
        source: &[u32],
        visual: &SentenceVisual<T>,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Prepared> {
        let states = encode_text_on(tape, &self.encoder, source, self.dims.src_vocab, dropout)?;
        let pooled = tape.mean_rows(states);
        let (vis, fusion_weights) = self.visual_on(tape, wiring, visual, pooled)?;
        let enh = bidirectional_attention_on(tape, &self.decoder, states, vis)?;
        let memory = DecoderMemory::new(tape, &self.decoder, &enh)?;
        let initial = initial_state_on(tape, &self.decoder, pooled)?;
        Ok(Prepared {
            states,
            pooled,
            visual: vis,
            fusion_weights,
            text_attention: enh.text_attention,
            visual_attention: enh.visual_attention,
            memory,
            initial,
        })
    }

    /// Summed negative log-likelihood of a BOS/EOS-wrapped target under
    /// teacher forcing, plus the number of predicted tokens.
    pub fn sentence_nll_on(
        &self,
        tape: &mut Tape<T>,
        wiring: &Wiring<'_, T>,
        source: &[u32],
        target: &[u32],
        visual: &SentenceVisual<T>,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<(Var, usize)> {
        let target = unpad(target);
        if target.len() < 2 {
            return Err(Error::InvalidArgument("target needs BOS and EOS".into()));
        }
        let prep = self.prepare_on(tape, wiring, source, visual, dropout)?;
        let mut state = prep.initial;
        let mut dists = Vec::with_capacity(target.len() - 1);
        for &y_prev in &target[..target.len() - 1] {
            let step = decode_step_on(tape, &self.decoder, &prep.memory, state, y_prev, dropout)?;
            dists.push(step.distribution);
            state = step.state;
        }
        let all = tape.vcat(&dists)?;
        let gold: Vec<(usize, usize)> = target[1..].iter().enumerate().map(|(t, &y)| (t, y as usize)).collect();
        let picked = tape.pick(all, &gold)?;
        let logs = tape.ln_clamped(picked);
        let total = tape.sum(logs);
        Ok((tape.scale(total, -T::one()), gold.len()))
    }

    /// Greedy translation of one source sentence.
    pub fn translate(
        &self,
        wiring: &Wiring<'_, T>,
        source: &[u32],
        visual: &SentenceVisual<T>,
        max_len: usize,
    ) -> Result<Vec<u32>> {
        let mut tape = Tape::new();
        self.params.bind(&mut tape);
        let prep = self.prepare_on(&mut tape, wiring, source, visual, &mut None)?;
        greedy_decode_on(&mut tape, &self.decoder, &prep.memory, prep.initial, max_len)
    }

    /// Teacher-forced forward pass exposing every attention distribution.
    pub fn trace(
        &self,
        wiring: &Wiring<'_, T>,
        source: &[u32],
        target: &[u32],
        visual: &SentenceVisual<T>,
    ) -> Result<ForwardTrace<T>> {
        let mut tape = Tape::new();
        self.params.bind(&mut tape);
        let prep = self.prepare_on(&mut tape, wiring, source, visual, &mut None)?;
        let target = unpad(target);
        let mut state = prep.initial;
        let mut steps = Vec::new();
        for &y_prev in &target[..target.len().saturating_sub(1)] {
            let s = decode_step_on(&mut tape, &self.decoder, &prep.memory, state, y_prev, &mut None)?;
            steps.push(StepTrace {
                distribution: tape.value(s.distribution).as_slice().to_vec(),
                text_weights: tape.value(s.text_weights).as_slice().to_vec(),
                visual_weights: s.visual_weights.map(|w| tape.value(w).as_slice().to_vec()),
                c_t: tape.value(s.c_t).clone(),
                v_t: tape.value(s.v_t).clone(),
            });
            state = s.state;
        }
        Ok(ForwardTrace {
            fusion_weights: prep
                .fusion_weights
                .iter()
                .map(|&w| tape.value(w).as_slice().to_vec())
                .collect(),
            text_attention: prep.text_attention.map(|v| tape.value(v).clone()),
            visual_attention: prep.visual_attention.map(|v| tape.value(v).clone()),
            steps,
        })
    }
}
