//! Asymmetric construction of the fusion input sequence.
//!
//! Text rows are `token + position + segment`. Region rows are
//! `label token + bbox projection + feature projection + segment C`, so a
//! region's embedding never depends on where it sits in the sequence.

use crate::config::{FusionConfig, VisualPosition};
use crate::error::{Error, Result};
use crate::mask::{layout_roles, Role};
use crate::params::{BoundParams, Initializer, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    A,
    B,
    /// Visual tokens.
    C,
}

impl Segment {
    pub fn index(self) -> usize {
        match self {
            Segment::A => 0,
            Segment::B => 1,
            Segment::C => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextInput {
    pub token_ids: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl TextInput {
    /// All tokens in segment A (captions).
    pub fn caption(token_ids: Vec<usize>) -> Self {
        let segments = vec![Segment::A; token_ids.len()];
        Self { token_ids, segments }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn validate(&self, cfg: &FusionConfig) -> Result<()> {
        if self.token_ids.is_empty() {
            return Err(Error::InvalidInput("text has no tokens".into()));
        }
        if self.token_ids.len() > cfg.max_text_len {
            return Err(Error::InvalidInput(format!(
                "text of {} tokens exceeds max_text_len {}",
                self.token_ids.len(),
                cfg.max_text_len
            )));
        }
        if self.segments.len() != self.token_ids.len() {
            return Err(Error::InvalidInput(format!(
                "{} segment tags for {} tokens",
                self.segments.len(),
                self.token_ids.len()
            )));
        }
        if self.segments.contains(&Segment::C) {
            return Err(Error::InvalidInput("segment C is reserved for regions".into()));
        }
        if let Some(&id) = self.token_ids.iter().find(|&&id| id >= cfg.vocab) {
            return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab });
        }
        Ok(())
    }
}

/// One detected object (or the whole image).
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    /// Detector class; `None` is the null label (whole image, or a masked region).
    pub label: Option<usize>,
    /// `(x1, y1, x2, y2)` normalized to `[0, 1]`.
    pub bbox: [f64; 4],
    pub feature: Vec<f64>,
    pub detector_scores: Option<Vec<f64>>,
}

impl Region {
    pub fn full_image(feature: Vec<f64>) -> Self {
        Self { label: None, bbox: [0.0, 0.0, 1.0, 1.0], feature, detector_scores: None }
    }

    pub fn is_full_image(&self) -> bool {
        self.label.is_none() && self.bbox == [0.0, 0.0, 1.0, 1.0]
    }

    pub fn validate(&self, cfg: &FusionConfig) -> Result<()> {
        let [x1, y1, x2, y2] = self.bbox;
        let ordered = 0.0 <= x1 && x1 <= x2 && x2 <= 1.0 && 0.0 <= y1 && y1 <= y2 && y2 <= 1.0;
        if !ordered {
            return Err(Error::InvalidInput(format!("invalid bbox {:?}", self.bbox)));
        }
        if self.feature.len() != cfg.d_v {
            return Err(Error::InvalidInput(format!(
                "region feature has length {}, expected d_v = {}",
                self.feature.len(),
                cfg.d_v
            )));
        }
        if self.feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite region feature".into()));
        }
        if let Some(c) = self.label {
            if c >= cfg.n_detector_classes {
                return Err(Error::InvalidInput(format!(
                    "region label {c} out of range for {} detector classes",
                    cfg.n_detector_classes
                )));
            }
        }
        if let Some(scores) = &self.detector_scores {
            if scores.len() != cfg.n_detector_classes {
                return Err(Error::InvalidInput(format!(
                    "detector scores have length {}, expected {}",
                    scores.len(),
                    cfg.n_detector_classes
                )));
            }
            if scores.iter().any(|s| !s.is_finite() || *s < 0.0) || (scores.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput("detector scores must sum to 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualInput {
    /// `regions[0]` is the whole-image region.
    pub regions: Vec<Region>,
}

impl VisualInput {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn validate(&self, cfg: &FusionConfig) -> Result<()> {
        let Some(first) = self.regions.first() else {
            return Err(Error::InvalidInput("image has no regions".into()));
        };
        if !first.is_full_image() {
            return Err(Error::InvalidInput(
                "first region must be the whole image with bbox (0,0,1,1) and no label".into(),
            ));
        }
        if self.regions.len() > cfg.max_regions {
            return Err(Error::InvalidInput(format!(
                "{} regions exceed max_regions {}",
                self.regions.len(),
                cfg.max_regions
            )));
        }
        self.regions.iter().try_for_each(|r| r.validate(cfg))
    }
}

pub const TOKEN_TABLE: &str = "emb.token";
pub const TEXT_POSITION_TABLE: &str = "emb.text_pos";
pub const SEGMENT_TABLE: &str = "emb.segment";
pub const BBOX_WEIGHT: &str = "emb.bbox.w";
pub const BBOX_BIAS: &str = "emb.bbox.b";
pub const REGION_INDEX_TABLE: &str = "emb.region_pos";
pub const FEATURE_WEIGHT: &str = "emb.feature.w";
pub const FEATURE_BIAS: &str = "emb.feature.b";
pub const CLS_TABLE: &str = "emb.cls";
pub const PAD_EMBEDDING: &str = "emb.pad";

/// Adds the embedding tables for `cfg` to `store`.
pub fn init_embedding_params(store: &mut ParamStore, cfg: &FusionConfig, init: &mut Initializer) {
    let d = cfg.d_model;
    store.insert(TOKEN_TABLE, init.normal(&[cfg.vocab, d]));
    store.insert(TEXT_POSITION_TABLE, init.normal(&[cfg.max_text_len, d]));
    store.insert(SEGMENT_TABLE, init.normal(&[3, d]));
    match cfg.visual_position {
        VisualPosition::Bbox => {
            store.insert(BBOX_WEIGHT, init.normal(&[4, d]));
            store.insert(BBOX_BIAS, init.constant(&[d], 0.0));
        }
        VisualPosition::Index => {
            store.insert(REGION_INDEX_TABLE, init.normal(&[cfg.max_regions, d]));
        }
    }
    store.insert(FEATURE_WEIGHT, init.normal(&[cfg.d_v, d]));
    store.insert(FEATURE_BIAS, init.constant(&[d], 0.0));
    store.insert(CLS_TABLE, init.normal(&[3, d]));
    store.insert(PAD_EMBEDDING, init.normal(&[d]));
}

enum VisualPositionVars {
    Bbox { weight: Var, bias: Var },
    Index { table: Var },
}

/// Tape handles of the embedding tables.
pub struct EmbeddingVars {
    pub token_table: Var,
    pub text_position_table: Var,
    pub segment_table: Var,
    visual_position: VisualPositionVars,
    pub feature_weight: Var,
    pub feature_bias: Var,
    pub cls_embeddings: Var,
    pub pad_embedding: Var,
}

impl EmbeddingVars {
    pub fn from_bound(bound: &BoundParams, cfg: &FusionConfig) -> Result<Self> {
        let visual_position = match cfg.visual_position {
            VisualPosition::Bbox => {
                VisualPositionVars::Bbox { weight: bound.get(BBOX_WEIGHT)?, bias: bound.get(BBOX_BIAS)? }
            }
            VisualPosition::Index => VisualPositionVars::Index { table: bound.get(REGION_INDEX_TABLE)? },
        };
        Ok(Self {
            token_table: bound.get(TOKEN_TABLE)?,
            text_position_table: bound.get(TEXT_POSITION_TABLE)?,
            segment_table: bound.get(SEGMENT_TABLE)?,
            visual_position,
            feature_weight: bound.get(FEATURE_WEIGHT)?,
            feature_bias: bound.get(FEATURE_BIAS)?,
            cls_embeddings: bound.get(CLS_TABLE)?,
            pad_embedding: bound.get(PAD_EMBEDDING)?,
        })
    }
}

/// `token_table[id_i] + text_position_table[i] + segment_table[seg_i]`, one row per token.
pub fn embed_text(tape: &mut Tape, text: &TextInput, p: &EmbeddingVars, cfg: &FusionConfig) -> Result<Var> {
    text.validate(cfg)?;
    let ids: Vec<_> = text.token_ids.iter().map(|&id| Some(id)).collect();
    let positions: Vec<_> = (0..text.len()).map(Some).collect();
    let segments: Vec<_> = text.segments.iter().map(|s| Some(s.index())).collect();
    let tok = tape.gather_rows(p.token_table, &ids)?;
    let pos = tape.gather_rows(p.text_position_table, &positions)?;
    let seg = tape.gather_rows(p.segment_table, &segments)?;
    let sum = tape.add(tok, pos)?;
    tape.add(sum, seg)
}

/// Per region: `label_embed + bbox_projection(bbox) + feature_projection(feature) + segment_table[C]`,
/// with the null label embedding to the zero vector.
pub fn embed_visual(tape: &mut Tape, visual: &VisualInput, p: &EmbeddingVars, cfg: &FusionConfig) -> Result<Var> {
    visual.validate(cfg)?;
    let n = visual.len();
    let labels: Vec<_> = visual.regions.iter().map(|r| r.label.map(|c| cfg.label_token(c))).collect();
    let label_rows = tape.gather_rows(p.token_table, &labels)?;

    let position_rows = match p.visual_position {
        VisualPositionVars::Bbox { weight, bias } => {
            let boxes: Vec<f64> = visual.regions.iter().flat_map(|r| r.bbox).collect();
            let boxes = tape.leaf(Tensor::new(vec![n, 4], boxes)?);
            let projected = tape.matmul(boxes, weight)?;
            tape.add_bias(projected, bias)?
        }
        VisualPositionVars::Index { table } => {
            let idx: Vec<_> = (0..n).map(Some).collect();
            tape.gather_rows(table, &idx)?
        }
    };

    let features: Vec<f64> = visual.regions.iter().flat_map(|r| r.feature.iter().copied()).collect();
    let features = tape.leaf(Tensor::new(vec![n, cfg.d_v], features)?);
    let feature_rows = tape.matmul(features, p.feature_weight)?;
    let feature_rows = tape.add_bias(feature_rows, p.feature_bias)?;

    let seg = tape.gather_rows(p.segment_table, &vec![Some(Segment::C.index()); n])?;

    let sum = tape.add(label_rows, position_rows)?;
    let sum = tape.add(sum, feature_rows)?;
    tape.add(sum, seg)
}

/// The fusion transformer input: `[L, d]` rows plus their roles.
#[derive(Clone, Debug)]
pub struct EmbeddingSequence {
    pub rows: Var,
    pub roles: Vec<Role>,
    pub n_text: usize,
    pub n_img: usize,
}

impl EmbeddingSequence {
    pub fn text_offset(&self) -> usize {
        3
    }

    pub fn image_offset(&self, cfg: &FusionConfig) -> usize {
        3 + cfg.max_text_len
    }
}

/// Lays out `[CLS, CLS_T, CLS_I, text.., PAD.., regions.., PAD..]`. An absent
/// modality contributes only PAD rows.
pub fn assemble(
    tape: &mut Tape,
    text: Option<&TextInput>,
    visual: Option<&VisualInput>,
    p: &EmbeddingVars,
    cfg: &FusionConfig,
) -> Result<EmbeddingSequence> {
    if text.is_none() && visual.is_none() {
        return Err(Error::InvalidInput("at least one of text or image must be present".into()));
    }
    let mut parts = vec![p.cls_embeddings];
    let n_text = text.map_or(0, TextInput::len);
    let n_img = visual.map_or(0, VisualInput::len);
    if let Some(text) = text {
        parts.push(embed_text(tape, text, p, cfg)?);
    }
    if n_text < cfg.max_text_len {
        parts.push(tape.repeat_row(p.pad_embedding, cfg.max_text_len - n_text)?);
    }
    if let Some(visual) = visual {
        parts.push(embed_visual(tape, visual, p, cfg)?);
    }
    if n_img < cfg.max_regions {
        parts.push(tape.repeat_row(p.pad_embedding, cfg.max_regions - n_img)?);
    }
    let rows = tape.concat_rows(&parts)?;
    Ok(EmbeddingSequence { rows, roles: layout_roles(n_text, n_img, cfg.max_text_len, cfg.max_regions), n_text, n_img })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Initializer;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> FusionConfig {
        FusionConfig {
            d_model: 4,
            n_heads: 2,
            vocab: 16,
            n_detector_classes: 4,
            max_text_len: 4,
            max_regions: 4,
            d_v: 3,
            ..Default::default()
        }
    }

    fn setup(cfg: &FusionConfig, seed: u64) -> (Tape, EmbeddingVars, ParamStore) {
        let mut store = ParamStore::new();
        init_embedding_params(&mut store, cfg, &mut Initializer::new(seed, 0.5));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let vars = EmbeddingVars::from_bound(&bound, cfg).unwrap();
        (tape, vars, store)
    }

    fn row(t: &Tensor, i: usize) -> Vec<f64> {
        t.row(i).to_vec()
    }

    fn add_rows(rows: &[&[f64]]) -> Vec<f64> {
        let mut out = vec![0.0; rows[0].len()];
        for r in rows {
            out.iter_mut().zip(r.iter()).for_each(|(o, v)| *o += v);
        }
        out
    }

    fn random_visual(rng: &mut ChaCha8Rng, cfg: &FusionConfig, n: usize) -> VisualInput {
        let mut regions = vec![Region::full_image((0..cfg.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect())];
        for _ in 1..n {
            let x1: f64 = rng.gen_range(0.0..0.5);
            let y1: f64 = rng.gen_range(0.0..0.5);
            regions.push(Region {
                label: Some(rng.gen_range(0..cfg.n_detector_classes)),
                bbox: [x1, y1, x1 + rng.gen_range(0.0..0.5), y1 + rng.gen_range(0.0..0.5)],
                feature: (0..cfg.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                detector_scores: None,
            });
        }
        VisualInput { regions }
    }

    #[test]
    fn text_row_is_sum_of_tables() {
        let cfg = small_cfg();
        let (mut tape, p, store) = setup(&cfg, 1);
        let text = TextInput::caption(vec![5]);
        let rows = embed_text(&mut tape, &text, &p, &cfg).unwrap();
        let expected = add_rows(&[
            store.get(TOKEN_TABLE).unwrap().row(5),
            store.get(TEXT_POSITION_TABLE).unwrap().row(0),
            store.get(SEGMENT_TABLE).unwrap().row(Segment::A.index()),
        ]);
        assert_eq!(row(tape.value(rows), 0), expected);
    }

    #[test]
    fn zero_tables_give_zero_rows() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        init_embedding_params(&mut store, &cfg, &mut Initializer::new(0, 0.0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = EmbeddingVars::from_bound(&bound, &cfg).unwrap();
        let rows = embed_text(&mut tape, &TextInput::caption(vec![3, 7, 2]), &p, &cfg).unwrap();
        assert!(tape.value(rows).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_token_rows_differ_by_position() {
        let cfg = small_cfg();
        let (mut tape, p, _) = setup(&cfg, 2);
        let rows = embed_text(&mut tape, &TextInput::caption(vec![4, 4]), &p, &cfg).unwrap();
        assert_ne!(row(tape.value(rows), 0), row(tape.value(rows), 1));
    }

    #[test]
    fn out_of_range_token_is_an_error() {
        let cfg = small_cfg();
        let (mut tape, p, _) = setup(&cfg, 2);
        let err = embed_text(&mut tape, &TextInput::caption(vec![16]), &p, &cfg).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { id: 16, vocab: 16 }));
    }

    #[test]
    fn whole_image_with_zero_projections_is_segment_c() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        init_embedding_params(&mut store, &cfg, &mut Initializer::new(3, 0.5));
        for name in [BBOX_WEIGHT, BBOX_BIAS, FEATURE_WEIGHT, FEATURE_BIAS] {
            let t = store.get_mut(name).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = EmbeddingVars::from_bound(&bound, &cfg).unwrap();
        let v = VisualInput { regions: vec![Region::full_image(vec![0.0; cfg.d_v])] };
        let rows = embed_visual(&mut tape, &v, &p, &cfg).unwrap();
        assert_eq!(row(tape.value(rows), 0), store.get(SEGMENT_TABLE).unwrap().row(Segment::C.index()));
    }

    #[test]
    fn bbox_distinguishes_identical_regions() {
        let cfg = small_cfg();
        let (mut tape, p, _) = setup(&cfg, 4);
        let mut v = random_visual(&mut ChaCha8Rng::seed_from_u64(0), &cfg, 2);
        let mut twin = v.regions[1].clone();
        twin.bbox = [0.1, 0.1, 0.2, 0.9];
        v.regions.push(twin);
        let rows = embed_visual(&mut tape, &v, &p, &cfg).unwrap();
        assert_ne!(row(tape.value(rows), 1), row(tape.value(rows), 2));
    }

    #[test]
    fn feature_width_mismatch_is_an_error() {
        let cfg = small_cfg();
        let (mut tape, p, _) = setup(&cfg, 4);
        let v = VisualInput { regions: vec![Region::full_image(vec![0.0; cfg.d_v + 1])] };
        assert!(embed_visual(&mut tape, &v, &p, &cfg).is_err());
    }

    #[test]
    fn paired_layout_matches_hand_count() {
        let cfg = small_cfg();
        let (mut tape, p, _) = setup(&cfg, 5);
        let text = TextInput::caption(vec![3, 4]);
        let v = random_visual(&mut ChaCha8Rng::seed_from_u64(1), &cfg, 3);
        let seq = assemble(&mut tape, Some(&text), Some(&v), &p, &cfg).unwrap();
        use Role::*;
        assert_eq!(seq.roles, vec![Cls, ClsText, ClsImage, Text, Text, Pad, Pad, Image, Image, Image, Pad]);
        assert_eq!(tape.value(seq.rows).shape(), &[11, 4]);
        // text block equals embed_text row for row
        let direct = embed_text(&mut tape, &text, &p, &cfg).unwrap();
        for i in 0..2 {
            assert_eq!(row(tape.value(seq.rows), 3 + i), row(tape.value(direct), i));
        }
    }

    #[test]
    fn missing_modality_is_all_pad() {
        let cfg = small_cfg();
        let (mut tape, p, store) = setup(&cfg, 6);
        let pad = store.get(PAD_EMBEDDING).unwrap().data().to_vec();

        let seq = assemble(&mut tape, Some(&TextInput::caption(vec![7])), None, &p, &cfg).unwrap();
        for i in 7..11 {
            assert_eq!(seq.roles[i], Role::Pad);
            assert_eq!(row(tape.value(seq.rows), i), pad);
        }
        let v = random_visual(&mut ChaCha8Rng::seed_from_u64(2), &cfg, 2);
        let seq = assemble(&mut tape, None, Some(&v), &p, &cfg).unwrap();
        for i in 3..7 {
            assert_eq!(seq.roles[i], Role::Pad);
            assert_eq!(row(tape.value(seq.rows), i), pad);
        }
        assert!(assemble(&mut tape, None, None, &p, &cfg).is_err());
    }

    #[test]
    fn visual_input_requires_whole_image_first() {
        let cfg = small_cfg();
        let mut v = random_visual(&mut ChaCha8Rng::seed_from_u64(3), &cfg, 3);
        v.regions.swap(0, 1);
        assert!(v.validate(&cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn region_permutation_permutes_rows_exactly(seed in 0u64..1000, n in 2usize..=4) {
            let cfg = small_cfg();
            let (mut tape, p, _) = setup(&cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = random_visual(&mut rng, &cfg, n);
            // keep the whole-image region first, permute the objects
            let mut order: Vec<usize> = (1..n).collect();
            order.shuffle(&mut rng);
            order.insert(0, 0);
            let permuted = VisualInput { regions: order.iter().map(|&i| v.regions[i].clone()).collect() };
            let a = embed_visual(&mut tape, &v, &p, &cfg).unwrap();
            let b = embed_visual(&mut tape, &permuted, &p, &cfg).unwrap();
            for (j, &src) in order.iter().enumerate() {
                prop_assert_eq!(row(tape.value(b), j), row(tape.value(a), src));
            }
        }

        #[test]
        fn region_rows_are_independent_of_index(seed in 0u64..1000, n in 2usize..=4) {
            let cfg = small_cfg();
            let (mut tape, p, _) = setup(&cfg, seed);
            let v = random_visual(&mut ChaCha8Rng::seed_from_u64(seed + 1), &cfg, n);
            let all = embed_visual(&mut tape, &v, &p, &cfg).unwrap();
            for j in 1..n {
                // the region alone, behind a whole-image region
                let solo = VisualInput { regions: vec![v.regions[0].clone(), v.regions[j].clone()] };
                let r = embed_visual(&mut tape, &solo, &p, &cfg).unwrap();
                prop_assert_eq!(row(tape.value(r), 1), row(tape.value(all), j));
            }
        }
    }
}
