//! Post-LN masked self-attention encoder and its output heads.

use crate::config::FusionConfig;
use crate::embedding::{assemble, init_embedding_params, EmbeddingSequence, EmbeddingVars, TextInput, VisualInput};
use crate::error::{Error, Result};
use crate::mask::{build_mask, AttentionMask, Role};
use crate::params::{BoundParams, Initializer, ParamStore};
use crate::tape::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

pub struct LayerVars {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub o_w: Var,
    pub o_b: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

pub struct HeadVars {
    pub mlm_w1: Var,
    pub mlm_b1: Var,
    pub mlm_w2: Var,
    pub mlm_b2: Var,
    pub itm_w: Var,
    pub itm_b: Var,
    pub roi_w: Var,
    pub roi_b: Var,
    pub domain_w: Var,
    pub domain_b: Var,
    pub task_w1: Var,
    pub task_b1: Var,
    pub task_w2: Var,
    pub task_b2: Var,
}

/// Tape handles for every parameter of the model.
pub struct ModelVars {
    pub embed: EmbeddingVars,
    pub layers: Vec<LayerVars>,
    pub heads: HeadVars,
}

fn layer_param(i: usize, suffix: &str) -> String {
    format!("layer{i}.{suffix}")
}

const LAYER_SHAPES: [&str; 16] = [
    "attn.q.w", "attn.q.b", "attn.k.w", "attn.k.b", "attn.v.w", "attn.v.b", "attn.o.w", "attn.o.b", "ln1.g", "ln1.b",
    "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.g", "ln2.b",
];

/// Fresh parameters: normal(0, 0.02) weights and tables, zero biases, unit
/// layer-norm gains.
pub fn init_params(cfg: &FusionConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut init = Initializer::new(seed, INIT_STD);
    let mut store = ParamStore::new();
    init_embedding_params(&mut store, cfg, &mut init);
    let (d, f) = (cfg.d_model, cfg.d_ff);
    for i in 0..cfg.n_layers {
        for suffix in LAYER_SHAPES {
            let t = match suffix {
                "ffn.w1" => init.normal(&[d, f]),
                "ffn.b1" => init.constant(&[f], 0.0),
                "ffn.w2" => init.normal(&[f, d]),
                "ln1.g" | "ln2.g" => init.constant(&[d], 1.0),
                s if s.ends_with(".w") => init.normal(&[d, d]),
                _ => init.constant(&[d], 0.0),
            };
            store.insert(layer_param(i, suffix), t);
        }
    }
    store.insert("head.mlm.w1", init.normal(&[d, d]));
    store.insert("head.mlm.b1", init.constant(&[d], 0.0));
    store.insert("head.mlm.w2", init.normal(&[d, cfg.vocab]));
    store.insert("head.mlm.b2", init.constant(&[cfg.vocab], 0.0));
    store.insert("head.itm.w", init.normal(&[d, 1]));
    store.insert("head.itm.b", init.constant(&[1], 0.0));
    store.insert("head.roi.w", init.normal(&[d, cfg.n_detector_classes]));
    store.insert("head.roi.b", init.constant(&[cfg.n_detector_classes], 0.0));
    store.insert("head.domain.w", init.normal(&[d, 1]));
    store.insert("head.domain.b", init.constant(&[1], 0.0));
    store.insert("head.task.w1", init.normal(&[d, d]));
    store.insert("head.task.b1", init.constant(&[d], 0.0));
    store.insert("head.task.w2", init.normal(&[d, cfg.n_task_classes]));
    store.insert("head.task.b2", init.constant(&[cfg.n_task_classes], 0.0));
    Ok(store)
}

/// Parameters shared by every head: embeddings and encoder layers.
pub fn is_trunk_param(name: &str) -> bool {
    name.starts_with("emb.") || name.starts_with("layer")
}

pub fn is_task_head_param(name: &str) -> bool {
    name.starts_with("head.task.")
}

impl ModelVars {
    pub fn from_bound(bound: &BoundParams, cfg: &FusionConfig) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let g = |s: &str| bound.get(&layer_param(i, s));
            layers.push(LayerVars {
                q_w: g("attn.q.w")?,
                q_b: g("attn.q.b")?,
                k_w: g("attn.k.w")?,
                k_b: g("attn.k.b")?,
                v_w: g("attn.v.w")?,
                v_b: g("attn.v.b")?,
                o_w: g("attn.o.w")?,
                o_b: g("attn.o.b")?,
                ln1_g: g("ln1.g")?,
                ln1_b: g("ln1.b")?,
                ff1_w: g("ffn.w1")?,
                ff1_b: g("ffn.b1")?,
                ff2_w: g("ffn.w2")?,
                ff2_b: g("ffn.b2")?,
                ln2_g: g("ln2.g")?,
                ln2_b: g("ln2.b")?,
            });
        }
        let g = |s: &str| bound.get(s);
        let heads = HeadVars {
            mlm_w1: g("head.mlm.w1")?,
            mlm_b1: g("head.mlm.b1")?,
            mlm_w2: g("head.mlm.w2")?,
            mlm_b2: g("head.mlm.b2")?,
            itm_w: g("head.itm.w")?,
            itm_b: g("head.itm.b")?,
            roi_w: g("head.roi.w")?,
            roi_b: g("head.roi.b")?,
            domain_w: g("head.domain.w")?,
            domain_b: g("head.domain.b")?,
            task_w1: g("head.task.w1")?,
            task_b1: g("head.task.b1")?,
            task_w2: g("head.task.w2")?,
            task_b2: g("head.task.b2")?,
        };
        Ok(Self { embed: EmbeddingVars::from_bound(bound, cfg)?, layers, heads })
    }

    /// Binds `store` onto `tape` and resolves every handle.
    pub fn bind(tape: &mut Tape, store: &ParamStore, cfg: &FusionConfig) -> Result<(BoundParams, Self)> {
        let bound = store.bind(tape);
        let vars = Self::from_bound(&bound, cfg)?;
        Ok((bound, vars))
    }
}

/// Encoder outputs; the three summaries are rows 0, 1 and 2 of `tokens`, each `[1, d]`.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutputs {
    pub tokens: Var,
    pub f_vl: Var,
    pub f_l: Var,
    pub f_v: Var,
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn attention(tape: &mut Tape, x: Var, mask: &AttentionMask, layer: &LayerVars, cfg: &FusionConfig) -> Result<Var> {
    let q = linear(tape, x, layer.q_w, layer.q_b)?;
    let k = linear(tape, x, layer.k_w, layer.k_b)?;
    let v = linear(tape, x, layer.v_w, layer.v_b)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_masked(scores, mask.matrix())?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    linear(tape, merged, layer.o_w, layer.o_b)
}

fn encoder_layers(
    tape: &mut Tape,
    rows: Var,
    mask: &AttentionMask,
    cfg: &FusionConfig,
    vars: &ModelVars,
) -> Result<Var> {
    let mut x = rows;
    for layer in &vars.layers {
        let attn = attention(tape, x, mask, layer, cfg)?;
        let res = tape.add(x, attn)?;
        let x1 = tape.layer_norm(res, layer.ln1_g, layer.ln1_b, LAYER_NORM_EPS)?;
        let hidden = linear(tape, x1, layer.ff1_w, layer.ff1_b)?;
        let hidden = tape.gelu(hidden);
        let ff = linear(tape, hidden, layer.ff2_w, layer.ff2_b)?;
        let res = tape.add(x1, ff)?;
        x = tape.layer_norm(res, layer.ln2_g, layer.ln2_b, LAYER_NORM_EPS)?;
    }
    Ok(x)
}

/// Runs the encoder: per layer, masked multi-head self-attention, residual,
/// layer norm, GELU feed-forward, residual, layer norm.
pub fn forward(
    tape: &mut Tape,
    seq: &EmbeddingSequence,
    mask: &AttentionMask,
    cfg: &FusionConfig,
    vars: &ModelVars,
) -> Result<FusionOutputs> {
    let shape = tape.value(seq.rows).shape().to_vec();
    if shape != [mask.len(), cfg.d_model] || mask.roles() != seq.roles.as_slice() {
        return Err(Error::Shape { op: "forward", left: shape, right: vec![mask.len(), cfg.d_model] });
    }
    let pads: Vec<usize> = (0..seq.roles.len()).filter(|&i| seq.roles[i] == Role::Pad).collect();
    let x = if pads.len() < 2 {
        encoder_layers(tape, seq.rows, mask, cfg, vars)?
    } else {
        // Every PAD row sees only itself, and no other row sees it, so all
        // PAD rows compute the same function of the PAD embedding. Encode the
        // live rows plus one PAD row and copy that row back out.
        let keep: Vec<usize> = (0..seq.roles.len()).filter(|&i| seq.roles[i] != Role::Pad || i == pads[0]).collect();
        let roles: Vec<Role> = keep.iter().map(|&i| seq.roles[i]).collect();
        let compact_mask = build_mask(&roles)?;
        let ids: Vec<Option<usize>> = keep.iter().map(|&i| Some(i)).collect();
        let rows = tape.gather_rows(seq.rows, &ids)?;
        let out = encoder_layers(tape, rows, &compact_mask, cfg, vars)?;
        let pad_slot = keep.iter().position(|&i| i == pads[0]).expect("kept");
        let mut back = vec![Some(pad_slot); seq.roles.len()];
        for (slot, &i) in keep.iter().enumerate() {
            back[i] = Some(slot);
        }
        tape.gather_rows(out, &back)?
    };
    Ok(FusionOutputs {
        tokens: x,
        f_vl: tape.gather_rows(x, &[Some(0)])?,
        f_l: tape.gather_rows(x, &[Some(1)])?,
        f_v: tape.gather_rows(x, &[Some(2)])?,
    })
}

/// Assembles the input sequence, builds its mask and runs the encoder.
pub fn encode(
    tape: &mut Tape,
    text: Option<&TextInput>,
    visual: Option<&VisualInput>,
    vars: &ModelVars,
    cfg: &FusionConfig,
) -> Result<(EmbeddingSequence, FusionOutputs)> {
    let seq = assemble(tape, text, visual, &vars.embed, cfg)?;
    let mask = build_mask(&seq.roles)?;
    let out = forward(tape, &seq, &mask, cfg, vars)?;
    Ok((seq, out))
}

/// Masked-token logits `[positions.len(), vocab]` at the given sequence
/// positions: affine, GELU, affine.
pub fn head_mlm(tape: &mut Tape, tokens: Var, positions: &[usize], heads: &HeadVars) -> Result<Var> {
    let ids: Vec<_> = positions.iter().map(|&p| Some(p)).collect();
    let rows = tape.gather_rows(tokens, &ids)?;
    let h = linear(tape, rows, heads.mlm_w1, heads.mlm_b1)?;
    let h = tape.gelu(h);
    linear(tape, h, heads.mlm_w2, heads.mlm_b2)
}

/// Logits over all `max_text_len` text positions.
pub fn head_mlm_all(tape: &mut Tape, tokens: Var, heads: &HeadVars, cfg: &FusionConfig) -> Result<Var> {
    let positions: Vec<usize> = (3..3 + cfg.max_text_len).collect();
    head_mlm(tape, tokens, &positions, heads)
}

/// Image-text match logit, `[1, 1]`.
pub fn head_itm(tape: &mut Tape, f_vl: Var, heads: &HeadVars) -> Result<Var> {
    linear(tape, f_vl, heads.itm_w, heads.itm_b)
}

/// Detector-class logits `[positions.len(), n_detector_classes]`.
pub fn head_roi(tape: &mut Tape, tokens: Var, positions: &[usize], heads: &HeadVars) -> Result<Var> {
    let ids: Vec<_> = positions.iter().map(|&p| Some(p)).collect();
    let rows = tape.gather_rows(tokens, &ids)?;
    linear(tape, rows, heads.roi_w, heads.roi_b)
}

/// Logits over all `max_regions` image positions.
pub fn head_roi_all(tape: &mut Tape, tokens: Var, heads: &HeadVars, cfg: &FusionConfig) -> Result<Var> {
    let start = 3 + cfg.max_text_len;
    let positions: Vec<usize> = (start..start + cfg.max_regions).collect();
    head_roi(tape, tokens, &positions, heads)
}

/// Harmful-vs-safe logit, `[1, 1]`.
pub fn head_domain(tape: &mut Tape, f_vl: Var, heads: &HeadVars) -> Result<Var> {
    linear(tape, f_vl, heads.domain_w, heads.domain_b)
}

/// Downstream classifier: affine, ReLU, affine. `[1, n_task_classes]`.
pub fn head_task(tape: &mut Tape, f_vl: Var, heads: &HeadVars) -> Result<Var> {
    let h = linear(tape, f_vl, heads.task_w1, heads.task_b1)?;
    let h = tape.relu(h);
    linear(tape, h, heads.task_w2, heads.task_b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{assemble, Region, TextInput, VisualInput};
    use crate::mask::build_mask;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> FusionConfig {
        FusionConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab: 24,
            n_detector_classes: 4,
            max_text_len: 4,
            max_regions: 3,
            d_v: 5,
            ..Default::default()
        }
    }

    fn sample(rng: &mut ChaCha8Rng, c: &FusionConfig) -> (TextInput, VisualInput) {
        let text = TextInput::caption((0..3).map(|_| rng.gen_range(2..c.word_end())).collect());
        let mut regions = vec![Region::full_image((0..c.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect())];
        regions.push(Region {
            label: Some(1),
            bbox: [0.1, 0.2, 0.6, 0.7],
            feature: (0..c.d_v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            detector_scores: None,
        });
        (text, VisualInput { regions })
    }

    fn run(
        store: &ParamStore,
        c: &FusionConfig,
        text: Option<&TextInput>,
        visual: Option<&VisualInput>,
    ) -> (Tape, FusionOutputs, ModelVars) {
        let mut tape = Tape::new();
        let (_, vars) = ModelVars::bind(&mut tape, store, c).unwrap();
        let seq = assemble(&mut tape, text, visual, &vars.embed, c).unwrap();
        let mask = build_mask(&seq.roles).unwrap();
        let out = forward(&mut tape, &seq, &mask, c, &vars).unwrap();
        (tape, out, vars)
    }

    #[test]
    fn zero_layers_is_identity() {
        let c = FusionConfig { n_layers: 0, ..cfg() };
        let store = init_params(&c, 1).unwrap();
        let (t, v) = sample(&mut ChaCha8Rng::seed_from_u64(1), &c);
        let mut tape = Tape::new();
        let (_, vars) = ModelVars::bind(&mut tape, &store, &c).unwrap();
        let seq = assemble(&mut tape, Some(&t), Some(&v), &vars.embed, &c).unwrap();
        let mask = build_mask(&seq.roles).unwrap();
        let out = forward(&mut tape, &seq, &mask, &c, &vars).unwrap();
        assert_eq!(tape.value(out.tokens), tape.value(seq.rows));
        assert_eq!(tape.value(out.f_vl).data(), store.get("emb.cls").unwrap().row(0));
    }

    #[test]
    fn summaries_are_rows_of_tokens() {
        let c = cfg();
        let store = init_params(&c, 2).unwrap();
        let (t, v) = sample(&mut ChaCha8Rng::seed_from_u64(2), &c);
        let (tape, out, _) = run(&store, &c, Some(&t), Some(&v));
        let tokens = tape.value(out.tokens);
        assert_eq!(tape.value(out.f_vl).data(), tokens.row(0));
        assert_eq!(tape.value(out.f_l).data(), tokens.row(1));
        assert_eq!(tape.value(out.f_v).data(), tokens.row(2));
    }

    #[test]
    fn one_layer_text_summary_ignores_image_rows() {
        let c = cfg();
        let store = init_params(&c, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, v) = sample(&mut rng, &c);
        let (_, v2) = sample(&mut rng, &c);
        let (ta, a, _) = run(&store, &c, Some(&t), Some(&v));
        let (tb, b, _) = run(&store, &c, Some(&t), Some(&v2));
        let bits = |tape: &Tape, x: Var| tape.value(x).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&ta, a.f_l), bits(&tb, b.f_l));
        assert_ne!(bits(&ta, a.f_v), bits(&tb, b.f_v));
    }

    #[test]
    fn pad_compaction_matches_full_sequence() {
        let c = FusionConfig { n_layers: 2, ..cfg() };
        let store = init_params(&c, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, v) = sample(&mut rng, &c);
        for (text, visual) in [(Some(&t), Some(&v)), (Some(&t), None), (None, Some(&v))] {
            let mut tape = Tape::new();
            let (_, vars) = ModelVars::bind(&mut tape, &store, &c).unwrap();
            let seq = assemble(&mut tape, text, visual, &vars.embed, &c).unwrap();
            let mask = build_mask(&seq.roles).unwrap();
            let out = forward(&mut tape, &seq, &mask, &c, &vars).unwrap();
            let full = encoder_layers(&mut tape, seq.rows, &mask, &c, &vars).unwrap();
            let bits = |x: Var| tape.value(x).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(out.tokens), bits(full));
        }
    }

    #[test]
    fn heads_have_documented_shapes() {
        let c = cfg();
        let store = init_params(&c, 4).unwrap();
        let (t, v) = sample(&mut ChaCha8Rng::seed_from_u64(4), &c);
        let (mut tape, out, vars) = run(&store, &c, Some(&t), Some(&v));
        let mlm = head_mlm_all(&mut tape, out.tokens, &vars.heads, &c).unwrap();
        assert_eq!(tape.value(mlm).shape(), &[4, 24]);
        let roi = head_roi_all(&mut tape, out.tokens, &vars.heads, &c).unwrap();
        assert_eq!(tape.value(roi).shape(), &[3, 4]);
        let itm = head_itm(&mut tape, out.f_vl, &vars.heads).unwrap();
        assert_eq!(tape.value(itm).shape(), &[1, 1]);
        let dom = head_domain(&mut tape, out.f_vl, &vars.heads).unwrap();
        assert_eq!(tape.value(dom).shape(), &[1, 1]);
        let task = head_task(&mut tape, out.f_vl, &vars.heads).unwrap();
        assert_eq!(tape.value(task).shape(), &[1, 2]);
        for x in [mlm, roi, itm, dom, task] {
            assert!(tape.value(x).all_finite());
        }
    }

    #[test]
    fn zero_weight_heads() {
        let c = cfg();
        let mut store = init_params(&c, 5).unwrap();
        for name in ["head.mlm.w2", "head.itm.w", "head.task.w2"] {
            store.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (t, v) = sample(&mut ChaCha8Rng::seed_from_u64(5), &c);
        let (mut tape, out, vars) = run(&store, &c, Some(&t), Some(&v));
        let mlm = head_mlm_all(&mut tape, out.tokens, &vars.heads, &c).unwrap();
        let probs = tape.softmax_masked(mlm, &Tensor::zeros(&[4, 24])).unwrap();
        for p in tape.value(probs).data() {
            assert!((p - 1.0 / 24.0).abs() < 1e-15);
        }
        let itm = head_itm(&mut tape, out.f_vl, &vars.heads).unwrap();
        assert_eq!(tape.value(itm).item(), 0.0);
        let task = head_task(&mut tape, out.f_vl, &vars.heads).unwrap();
        assert_eq!(tape.value(task).data(), &[0.0, 0.0]);
    }

    #[test]
    fn itm_logit_is_monotone_along_weight_direction() {
        let c = cfg();
        let store = init_params(&c, 6).unwrap();
        let mut tape = Tape::new();
        let (_, vars) = ModelVars::bind(&mut tape, &store, &c).unwrap();
        let w = store.get("head.itm.w").unwrap().data().to_vec();
        let mut last = f64::NEG_INFINITY;
        for s in [-2.0, -0.5, 0.0, 1.0, 3.0] {
            let f = tape.leaf(Tensor::new(vec![1, 8], w.iter().map(|x| x * s).collect()).unwrap());
            let out = head_itm(&mut tape, f, &vars.heads).unwrap();
            let z = tape.value(out).item();
            assert!(z > last);
            last = z;
        }
    }

    #[test]
    fn forward_rejects_mismatched_mask() {
        let c = cfg();
        let store = init_params(&c, 7).unwrap();
        let (t, _) = sample(&mut ChaCha8Rng::seed_from_u64(7), &c);
        let mut tape = Tape::new();
        let (_, vars) = ModelVars::bind(&mut tape, &store, &c).unwrap();
        let seq = assemble(&mut tape, Some(&t), None, &vars.embed, &c).unwrap();
        let wrong = build_mask(&crate::mask::layout_roles(1, 1, 1, 1)).unwrap();
        assert!(forward(&mut tape, &seq, &wrong, &c, &vars).is_err());
    }
}
