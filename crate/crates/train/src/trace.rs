//! Gate-value traces: per-token member weights at every stitch layer,
//! with prompt/generated segment annotations and context-switch probes.
//! Exports to CSV, JSON, and a stacked-line SVG chart.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stitchkit_core::rng::Rng;
use stitchkit_core::tape::Tape;
use stitchkit_model::stitch::{StitchKind, StitchedModel};
use stitchkit_model::transformer::Decode;

use crate::corpus::tokenizer;
use crate::error::TrainError;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Segment {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceLayer {
    /// Stitch position: inserted after this many transformer layers.
    pub position: usize,
    pub kind: StitchKind,
    /// rows[token][member]: Experts-into-Hub rows cover hub + experts and
    /// sum to 1; Hub-into-Experts rows cover the experts' sigmoid gates.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GateTrace {
    /// Hub first, then experts, in model order.
    pub member_names: Vec<String>,
    pub tokens: Vec<String>,
    pub segments: Vec<Segment>,
    pub layers: Vec<TraceLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub label: String,
    pub start: usize,
    pub end: usize,
    /// Mean gate mass per member at the last Experts-into-Hub layer.
    pub mean_mass: Vec<f64>,
}

fn run_traced(
    stitched: &StitchedModel<f32>,
    tokens: &[u32],
    member_names: &[String],
    segments: Vec<Segment>,
) -> Result<GateTrace> {
    let mut tape = Tape::<f32>::new(false);
    let mut rng = Rng::seeded(0);
    let (_, records) = stitched
        .forward(&mut tape, tokens, 1, tokens.len(), false, &mut rng, true)
        .map_err(TrainError::Model)?;
    let records = records.expect("trace requested");
    let layers = records
        .into_iter()
        .map(|r| TraceLayer {
            position: r.position,
            kind: r.kind,
            rows: r.weights,
        })
        .collect();
    Ok(GateTrace {
        member_names: member_names.to_vec(),
        tokens: tokens
            .iter()
            .map(|&t| tokenizer::decode_char(t).map(String::from).unwrap_or_default())
            .collect(),
        segments,
        layers,
    })
}

/// Trace gates over a prompt and `n_generate` greedily generated tokens.
/// Prompt and generated positions are recorded as separate segments.
pub fn trace_gates(
    stitched: &StitchedModel<f32>,
    prompt: &[u32],
    n_generate: usize,
    member_names: &[String],
) -> Result<GateTrace> {
    let mut rng = Rng::seeded(0);
    let full = stitched
        .generate(prompt, n_generate, Decode::Greedy, None, &mut rng)
        .map_err(TrainError::Model)?;
    let mut segments = vec![Segment {
        label: "prompt".into(),
        start: 0,
        end: prompt.len(),
    }];
    if full.len() > prompt.len() {
        segments.push(Segment {
            label: "generated".into(),
            start: prompt.len(),
            end: full.len(),
        });
    }
    run_traced(stitched, &full, member_names, segments)
}

/// Concatenate labeled token segments into one prompt and trace it.
/// Returns per-segment mean gate mass at the last Experts-into-Hub layer.
pub fn context_switch_probe(
    stitched: &StitchedModel<f32>,
    segments: &[(String, Vec<u32>)],
    member_names: &[String],
) -> Result<(GateTrace, Vec<SegmentSummary>)> {
    if segments.is_empty() {
        return Err(TrainError::InsufficientData("no probe segments".into()));
    }
    let mut tokens = Vec::new();
    let mut marks = Vec::new();
    for (label, toks) in segments {
        let start = tokens.len();
        tokens.extend_from_slice(toks);
        marks.push(Segment {
            label: label.clone(),
            start,
            end: tokens.len(),
        });
    }
    let trace = run_traced(stitched, &tokens, member_names, marks.clone())?;
    let last_eih = trace
        .layers
        .iter()
        .rev()
        .find(|l| l.kind == StitchKind::ExpertsIntoHub)
        .ok_or_else(|| TrainError::BadParams("no Experts-into-Hub layer".into()))?;
    let n_members = trace.member_names.len();
    let summaries = marks
        .into_iter()
        .map(|seg| {
            let mut mass = vec![0.0f64; n_members];
            for row in &last_eih.rows[seg.start..seg.end] {
                for (m, w) in mass.iter_mut().zip(row) {
                    *m += w;
                }
            }
            let len = (seg.end - seg.start).max(1) as f64;
            for m in mass.iter_mut() {
                *m /= len;
            }
            SegmentSummary {
                label: seg.label,
                start: seg.start,
                end: seg.end,
                mean_mass: mass,
            }
        })
        .collect();
    Ok((trace, summaries))
}

/// Label of the token segment containing a position.
fn segment_label(segments: &[Segment], pos: usize) -> &str {
    segments
        .iter()
        .find(|s| (s.start..s.end).contains(&pos))
        .map(|s| s.label.as_str())
        .unwrap_or("")
}

/// CSV schema: layer, position, segment, member, weight.
pub fn write_csv(trace: &GateTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "position", "segment", "member", "weight"])?;
    for (li, layer) in trace.layers.iter().enumerate() {
        for (pos, row) in layer.rows.iter().enumerate() {
            let members: Vec<&str> = match layer.kind {
                StitchKind::ExpertsIntoHub => {
                    trace.member_names.iter().map(String::as_str).collect()
                }
                StitchKind::HubIntoExperts => trace.member_names[1..]
                    .iter()
                    .map(String::as_str)
                    .collect(),
            };
            for (member, weight) in members.iter().zip(row) {
                w.write_record([
                    li.to_string(),
                    pos.to_string(),
                    segment_label(&trace.segments, pos).to_string(),
                    member.to_string(),
                    format!("{weight:.9}"),
                ])?;
            }
        }
    }
    w.flush().map_err(std::io::Error::from)?;
    Ok(())
}

/// Parse the CSV back into (layer, position, member, weight) rows.
pub fn read_csv(path: &Path) -> Result<Vec<(usize, usize, String, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push((
            rec[0].parse::<usize>().map_err(|e| TrainError::BadParams(e.to_string()))?,
            rec[1].parse::<usize>().map_err(|e| TrainError::BadParams(e.to_string()))?,
            rec[3].to_string(),
            rec[4].parse::<f64>().map_err(|e| TrainError::BadParams(e.to_string()))?,
        ));
    }
    Ok(out)
}

pub fn write_json(trace: &GateTrace, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(trace)?)?;
    Ok(())
}

const SVG_COLORS: &[&str] = &[
    "#4363d8", "#e6194b", "#3cb44b", "#f58231", "#911eb4", "#46f0f0", "#808000",
];

/// Stacked per-member line charts, one panel per stitch layer, with dotted
/// segment-boundary markers.
pub fn write_svg(trace: &GateTrace, path: &Path) -> Result<()> {
    let panel_w = 860.0;
    let panel_h = 150.0;
    let margin = 45.0;
    let n_panels = trace.layers.len().max(1);
    let total_h = margin + n_panels as f64 * (panel_h + margin);
    let n_pos = trace.tokens.len().max(2);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="monospace" font-size="11">"#,
        panel_w + 2.0 * margin,
        total_h
    );
    let _ = writeln!(
        s,
        r#"<rect width="100%" height="100%" fill="white"/>"#
    );
    for (li, layer) in trace.layers.iter().enumerate() {
        let top = margin + li as f64 * (panel_h + margin);
        let x_of = |pos: usize| margin + panel_w * pos as f64 / (n_pos - 1) as f64;
        let y_of = |wgt: f64| top + panel_h * (1.0 - wgt.clamp(0.0, 1.0));
        let _ = writeln!(
            s,
            r#"<text x="{margin}" y="{}">stitch {} after layer {} ({:?})</text>"#,
            top - 8.0,
            li,
            layer.position,
            layer.kind
        );
        let _ = writeln!(
            s,
            r##"<rect x="{margin}" y="{top}" width="{panel_w}" height="{panel_h}" fill="none" stroke="#999"/>"##
        );
        for seg in &trace.segments {
            if seg.start > 0 && seg.start < n_pos {
                let x = x_of(seg.start);
                let _ = writeln!(
                    s,
                    r##"<line x1="{x}" y1="{top}" x2="{x}" y2="{}" stroke="#555" stroke-dasharray="4 3"/>"##,
                    top + panel_h
                );
            }
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{}" fill="#555">{}</text>"##,
                x_of(seg.start) + 3.0,
                top + panel_h - 4.0,
                seg.label
            );
        }
        let members: Vec<&String> = match layer.kind {
            StitchKind::ExpertsIntoHub => trace.member_names.iter().collect(),
            StitchKind::HubIntoExperts => trace.member_names[1..].iter().collect(),
        };
        for (mi, name) in members.iter().enumerate() {
            let color = SVG_COLORS[mi % SVG_COLORS.len()];
            let pts: Vec<String> = layer
                .rows
                .iter()
                .enumerate()
                .map(|(pos, row)| format!("{:.2},{:.2}", x_of(pos), y_of(row[mi])))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                pts.join(" ")
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
                margin + panel_w + 4.0,
                top + 12.0 + 13.0 * mi as f64
            );
        }
    }
    let _ = writeln!(s, "</svg>");
    std::fs::write(path, s)?;
    Ok(())
}
