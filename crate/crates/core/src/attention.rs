//! Attention-map capture and export as CSV matrices and an SVG panel.
//!
//! Heatmap colors interpolate linearly from white (0) to dark blue at the
//! map's own maximum. The panel also traces the trial's feature envelope,
//! the mean absolute feature value per frame.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::Example;
use crate::decode::{encode_trial, predict_phonemes, predict_words};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Ctx;
use crate::vocab::PhonemeVocab;
use neuroseq_autodiff::{Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub name: String,
    /// Rows are queries; every row sums to one.
    pub weights: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub maps: Vec<AttentionMap>,
    pub envelope: Vec<f64>,
}

/// Head-averaged attention of every encoder layer and of both decoders,
/// the decoders teacher-forced on the model's own greedy predictions.
pub fn capture_attention(model: &Model, store: &ParamStore, ex: &Example, max_len: usize) -> Result<AttentionExport> {
    let enc = encode_trial(model, store, &ex.features, ex.day, true)?;
    let mut maps: Vec<AttentionMap> = enc
        .attention
        .iter()
        .enumerate()
        .map(|(i, w)| AttentionMap {
            name: format!("encoder_layer{}", i + 1),
            weights: w.clone(),
        })
        .collect();
    if enc.ctc_logits.is_none() {
        let pred = predict_phonemes(model, store, &enc, max_len)?;
        let mut inputs = vec![PhonemeVocab::BOS];
        inputs.extend(pred);
        let mut g = Graph::inference(store);
        let memory = g.constant(enc.memory.clone());
        let out = model.phoneme_logits(&mut g, memory, &inputs, &mut Ctx::capture())?;
        push_decoder(&mut maps, "phoneme", out.self_attention, out.cross_attention);
    }
    if model.has_word_decoder() {
        let pred = predict_words(model, store, &enc, max_len)?;
        let mut inputs = vec![model.arch.n_words];
        inputs.extend(pred);
        let mut g = Graph::inference(store);
        let memory = g.constant(enc.memory.clone());
        let out = model.word_logits(&mut g, memory, &inputs, &mut Ctx::capture())?;
        push_decoder(&mut maps, "word", out.self_attention, out.cross_attention);
    }
    let envelope = (0..ex.features.rows())
        .map(|r| {
            let row = ex.features.row(r);
            row.iter().map(|v| v.abs()).sum::<f64>() / row.len().max(1) as f64
        })
        .collect();
    Ok(AttentionExport { maps, envelope })
}

fn push_decoder(maps: &mut Vec<AttentionMap>, name: &str, self_attn: Vec<Tensor>, cross: Vec<Tensor>) {
    for (i, w) in self_attn.into_iter().enumerate() {
        maps.push(AttentionMap {
            name: format!("{name}_self_layer{}", i + 1),
            weights: w,
        });
    }
    for (i, w) in cross.into_iter().enumerate() {
        maps.push(AttentionMap {
            name: format!("{name}_cross_layer{}", i + 1),
            weights: w,
        });
    }
}

pub fn matrix_csv(m: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

const CELL: f64 = 6.0;
const MARGIN: f64 = 20.0;
const TRACE_HEIGHT: f64 = 60.0;

fn color(v: f64, max: f64) -> String {
    let t = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One SVG with the envelope trace on top and the maps stacked below.
pub fn render_svg(export: &AttentionExport, title: &str) -> String {
    let width = export
        .maps
        .iter()
        .map(|m| m.weights.cols() as f64 * CELL)
        .fold(export.envelope.len() as f64, f64::max)
        + 2.0 * MARGIN;
    let mut body = String::new();
    let mut y = MARGIN;
    let _ = writeln!(body, r#"<text x="{MARGIN}" y="{:.1}" font-size="12">{}</text>"#, y, escape(title));
    y += 10.0;
    let peak = export.envelope.iter().cloned().fold(0.0, f64::max);
    if !export.envelope.is_empty() {
        let points: Vec<String> = export
            .envelope
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let h = if peak > 0.0 { v / peak } else { 0.0 };
                format!("{:.1},{:.1}", MARGIN + i as f64, y + TRACE_HEIGHT * (1.0 - h))
            })
            .collect();
        let _ = writeln!(
            body,
            r##"<polyline fill="none" stroke="#444444" stroke-width="1" points="{}"/>"##,
            points.join(" ")
        );
    }
    y += TRACE_HEIGHT + MARGIN;
    for m in &export.maps {
        let _ = writeln!(body, r#"<text x="{MARGIN}" y="{:.1}" font-size="10">{}</text>"#, y, escape(&m.name));
        y += 4.0;
        let max = m.weights.data().iter().cloned().fold(0.0, f64::max);
        for r in 0..m.weights.rows() {
            for c in 0..m.weights.cols() {
                let _ = writeln!(
                    body,
                    r#"<rect x="{:.1}" y="{:.1}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                    MARGIN + c as f64 * CELL,
                    y + r as f64 * CELL,
                    color(m.weights.get(r, c), max)
                );
            }
        }
        y += m.weights.rows() as f64 * CELL + MARGIN;
    }
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{y:.0}\" viewBox=\"0 0 {width:.0} {y:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n{body}</svg>\n"
    )
}

/// Writes `trial{id}_{map}.csv` per map and `trial{id}.svg` into `dir`.
pub fn write_export(export: &AttentionExport, dir: &Path, trial_id: usize) -> Result<Vec<PathBuf>> {
    if export.maps.is_empty() {
        return Err(Error::Config("model produced no attention maps".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for m in &export.maps {
        let p = dir.join(format!("trial{trial_id}_{}.csv", m.name));
        std::fs::write(&p, matrix_csv(&m.weights))?;
        written.push(p);
    }
    let p = dir.join(format!("trial{trial_id}.svg"));
    std::fs::write(&p, render_svg(export, &format!("trial {trial_id}")))?;
    written.push(p);
    Ok(written)
}
