//! One-sample-per-line JSON corpus format.
//!
//! ```text
//! {"id": str,
//!  "text": [int]?,              token ids
//!  "segments": [0|1]?,          per-token segment (A=0, B=1); default all A
//!  "regions": [{"label": int|null, "bbox": [x1,y1,x2,y2], "feature": [f64; d_v],
//!               "scores": [f64]?}]?,
//!  "domain_label": -1|0|1,
//!  "task_label": int?,
//!  "source": str}
//! ```
//!
//! Region `label` is a detector class index; `null` marks the whole-image region.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sample::{Corpus, CorpusDims, DomainLabel, MixedSample};
use crate::embedding::{Region, Segment, TextInput, VisualInput};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRegion {
    label: Option<usize>,
    bbox: [f64; 4],
    feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSample {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segments: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    regions: Option<Vec<JsonRegion>>,
    domain_label: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_label: Option<usize>,
    source: String,
}

fn check_dims(s: &MixedSample, dims: &CorpusDims) -> std::result::Result<(), String> {
    if s.text.is_none() && s.image.is_none() {
        return Err("sample has neither text nor regions".into());
    }
    if let Some(t) = &s.text {
        if t.token_ids.is_empty() {
            return Err("text is empty".into());
        }
        if let Some(id) = t.token_ids.iter().find(|&&id| id >= dims.vocab_size) {
            return Err(format!("token id {id} out of range for vocabulary of {}", dims.vocab_size));
        }
    }
    if let Some(v) = &s.image {
        match v.regions.first() {
            None => return Err("regions is empty".into()),
            Some(r) if !r.is_full_image() => {
                return Err("first region must be the whole image (label null, bbox [0,0,1,1])".into())
            }
            _ => {}
        }
        for (j, r) in v.regions.iter().enumerate() {
            if r.feature.len() != dims.d_v {
                return Err(format!("region {j}: feature has length {}, expected d_v = {}", r.feature.len(), dims.d_v));
            }
            let [x1, y1, x2, y2] = r.bbox;
            if !(0.0 <= x1 && x1 <= x2 && x2 <= 1.0 && 0.0 <= y1 && y1 <= y2 && y2 <= 1.0) {
                return Err(format!("region {j}: invalid bbox {:?}", r.bbox));
            }
            if let Some(c) = r.label {
                if c >= dims.n_detector_classes {
                    return Err(format!("region {j}: label {c} out of range"));
                }
            }
            if let Some(scores) = &r.detector_scores {
                if scores.len() != dims.n_detector_classes {
                    return Err(format!(
                        "region {j}: scores have length {}, expected {}",
                        scores.len(),
                        dims.n_detector_classes
                    ));
                }
                if scores.iter().any(|p| *p < 0.0) || (scores.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                    return Err(format!("region {j}: scores must be a probability vector"));
                }
            }
        }
    }
    Ok(())
}

fn from_json(j: JsonSample) -> std::result::Result<MixedSample, String> {
    let text = match (j.text, j.segments) {
        (None, None) => None,
        (None, Some(_)) => return Err("`segments` given without `text`".into()),
        (Some(ids), segs) => {
            let segments = match segs {
                None => vec![Segment::A; ids.len()],
                Some(segs) => {
                    if segs.len() != ids.len() {
                        return Err(format!("{} segments for {} tokens", segs.len(), ids.len()));
                    }
                    segs.iter()
                        .map(|&s| match s {
                            0 => Ok(Segment::A),
                            1 => Ok(Segment::B),
                            other => Err(format!("segment must be 0 or 1, got {other}")),
                        })
                        .collect::<std::result::Result<_, _>>()?
                }
            };
            Some(TextInput { token_ids: ids, segments })
        }
    };
    let image = j.regions.map(|rs| VisualInput {
        regions: rs
            .into_iter()
            .map(|r| Region { label: r.label, bbox: r.bbox, feature: r.feature, detector_scores: r.scores })
            .collect(),
    });
    Ok(MixedSample {
        id: j.id,
        text,
        image,
        domain_label: DomainLabel::from_i64(j.domain_label).map_err(|e| e.to_string())?,
        task_label: j.task_label,
        source: j.source,
    })
}

fn to_json(s: &MixedSample) -> JsonSample {
    JsonSample {
        id: s.id.clone(),
        text: s.text.as_ref().map(|t| t.token_ids.clone()),
        segments: s
            .text
            .as_ref()
            .map(|t| t.segments.iter().map(|seg| if *seg == Segment::B { 1 } else { 0 }).collect()),
        regions: s.image.as_ref().map(|v| {
            v.regions
                .iter()
                .map(|r| JsonRegion {
                    label: r.label,
                    bbox: r.bbox,
                    feature: r.feature.clone(),
                    scores: r.detector_scores.clone(),
                })
                .collect()
        }),
        domain_label: s.domain_label.as_i8() as i64,
        task_label: s.task_label,
        source: s.source.clone(),
    }
}

/// Parses corpus text; `path` is only used in error locations.
pub fn parse_jsonl(content: &str, path: &Path, dims: CorpusDims) -> Result<Corpus> {
    let mut corpus = Corpus::new(dims);
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let raw: JsonSample = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let sample = from_json(raw).map_err(err)?;
        check_dims(&sample, &dims).map_err(err)?;
        corpus.samples.push(sample);
    }
    Ok(corpus)
}

pub fn load_jsonl(path: &Path, dims: CorpusDims) -> Result<Corpus> {
    let content = fs::read_to_string(path)?;
    parse_jsonl(&content, path, dims)
}

pub fn to_jsonl_string(corpus: &Corpus) -> String {
    let mut out = String::new();
    for s in &corpus.samples {
        out.push_str(&serde_json::to_string(&to_json(s)).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    fs::write(path, to_jsonl_string(corpus))?;
    Ok(())
}
