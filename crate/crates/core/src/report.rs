// SPDX-License-Identifier: MIT OR Apache-2.0

//! Heatmaps, lens tables and report exports.
//!
//! Heatmaps are plain SVG. Each cell `<rect>` carries `data-row`, `data-col`
//! and `data-value` attributes; the value is written with Rust's shortest
//! round-trip float formatting, so [`embedded_values`] recovers the source
//! grid exactly. Absent cells are drawn grey with an empty `data-value`.
//!
//! Palettes:
//!
//! - sequential: a five-stop viridis-like ramp, low values dark;
//! - diverging: blue → white → red, symmetric about zero, so `0` is always
//!   the neutral white whatever the data range.
//!
//! An auto range whose width is below [`RANGE_EPSILON`] is widened by
//! `RANGE_EPSILON` on each side.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::sha256_hex;
use crate::error::{LensError, Result};
use crate::lens::Lens;
use crate::metrics::{decode_logits, final_top1, MetricsReport};
use crate::model::{CapturedSequence, LogitHead, ModelSpec};
use crate::numerics::{entropy, softmax};

/// Minimum width of an automatically chosen value range.
pub const RANGE_EPSILON: f64 = 1e-6;

const CELL_W: usize = 48;
const CELL_H: usize = 28;
const LEFT: usize = 96;
const TOP: usize = 56;
const ABSENT_FILL: &str = "#cccccc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorScale {
    Sequential,
    Diverging,
}

/// Everything needed to draw one heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    pub title: String,
    pub units: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// `values[row][col]`; `None` marks an empty cell.
    pub values: Vec<Vec<Option<f64>>>,
    pub scale: ColorScale,
    /// Explicit `(min, max)`; `None` derives it from the data.
    pub range: Option<(f64, f64)>,
}

impl HeatmapSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LensError::InvalidConfig(m));
        if self.values.len() != self.row_labels.len() {
            return bad(format!(
                "{} rows but {} row labels",
                self.values.len(),
                self.row_labels.len()
            ));
        }
        for (i, row) in self.values.iter().enumerate() {
            if row.len() != self.col_labels.len() {
                return bad(format!(
                    "row {i} has {} cells, expected {}",
                    row.len(),
                    self.col_labels.len()
                ));
            }
            if let Some(j) = row.iter().position(|v| v.is_some_and(|x| !x.is_finite())) {
                return Err(LensError::NonFinite {
                    what: "heatmap cell",
                    index: i * self.col_labels.len() + j,
                });
            }
        }
        if let Some((lo, hi)) = self.range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("explicit range ({lo}, {hi}) must be finite with min < max"));
            }
        }
        Ok(())
    }

    /// The range actually used for coloring.
    #[must_use]
    pub fn resolved_range(&self) -> (f64, f64) {
        let (lo, hi) = self.range.unwrap_or_else(|| {
            let present = self.values.iter().flatten().flatten().copied();
            let (lo, hi) = present.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if lo > hi {
                (0.0, 1.0)
            } else {
                (lo, hi)
            }
        });
        match self.scale {
            ColorScale::Sequential if hi - lo < RANGE_EPSILON => (lo - RANGE_EPSILON, hi + RANGE_EPSILON),
            ColorScale::Sequential => (lo, hi),
            ColorScale::Diverging => {
                let m = lo.abs().max(hi.abs()).max(RANGE_EPSILON);
                (-m, m)
            }
        }
    }
}

type Rgb = (f64, f64, f64);

const VIRIDIS: [Rgb; 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];
const DIVERGING: [Rgb; 3] = [(33.0, 102.0, 172.0), (247.0, 247.0, 247.0), (178.0, 24.0, 43.0)];

fn ramp(stops: &[Rgb], t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * (stops.len() - 1) as f64;
    let i = (t.floor() as usize).min(stops.len() - 2);
    let f = t - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Fill color for `v` under `scale` and the resolved `(lo, hi)` range.
#[must_use]
pub fn color_for(scale: ColorScale, (lo, hi): (f64, f64), v: f64) -> String {
    match scale {
        ColorScale::Sequential => ramp(&VIRIDIS, (v - lo) / (hi - lo)),
        ColorScale::Diverging => ramp(&DIVERGING, 0.5 + 0.5 * v / hi.max(-lo)),
    }
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn short(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

/// Renders `spec` as an SVG document.
///
/// ```
/// use tunedlens::report::{render_heatmap, embedded_values, ColorScale, HeatmapSpec};
/// let spec = HeatmapSpec {
///     title: "demo".into(),
///     units: "nats".into(),
///     row_labels: vec!["layer 1".into()],
///     col_labels: vec!["t=0".into()],
///     values: vec![vec![Some(0.25)]],
///     scale: ColorScale::Sequential,
///     range: None,
/// };
/// let svg = render_heatmap(&spec).unwrap();
/// assert_eq!(embedded_values(&svg).unwrap(), spec.values);
/// ```
pub fn render_heatmap(spec: &HeatmapSpec) -> Result<String> {
    spec.validate()?;
    let range = spec.resolved_range();
    let (rows, cols) = (spec.row_labels.len(), spec.col_labels.len());
    let width = LEFT + cols * CELL_W + 16;
    let height = TOP + rows * CELL_H + 40;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11" data-rows="{rows}" data-cols="{cols}" data-scale="{}" data-min="{}" data-max="{}">"#,
        match spec.scale {
            ColorScale::Sequential => "sequential",
            ColorScale::Diverging => "diverging",
        },
        range.0,
        range.1
    );
    let _ = writeln!(s, "<title>{}</title>", xml_escape(&spec.title));
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="18" font-size="14">{} ({})</text>"#,
        xml_escape(&spec.title),
        xml_escape(&spec.units)
    );
    for (j, label) in spec.col_labels.iter().enumerate() {
        let x = LEFT + j * CELL_W + CELL_W / 2;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            TOP - 8,
            xml_escape(label)
        );
    }
    for (i, label) in spec.row_labels.iter().enumerate() {
        let y = TOP + i * CELL_H + CELL_H / 2 + 4;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#,
            LEFT - 6,
            xml_escape(label)
        );
    }
    for (i, row) in spec.values.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (x, y) = (LEFT + j * CELL_W, TOP + i * CELL_H);
            let (fill, value, caption) = match v {
                Some(v) => (color_for(spec.scale, range, *v), v.to_string(), short(*v)),
                None => (ABSENT_FILL.to_owned(), String::new(), "n/a".to_owned()),
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" data-row="{i}" data-col="{j}" data-value="{value}"><title>{}, {}: {caption}</title></rect>"#,
                xml_escape(&spec.row_labels[i]),
                xml_escape(&spec.col_labels[j]),
            );
        }
    }
    let legend_y = TOP + rows * CELL_H + 24;
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{legend_y}">range [{}, {}] {}</text>"#,
        short(range.0),
        short(range.1),
        xml_escape(&spec.units)
    );
    s.push_str("</svg>\n");
    Ok(s)
}

fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    let key = format!(" {name}=\"");
    let start = tag.find(&key)? + key.len();
    let end = start + tag[start..].find('"')?;
    Some(&tag[start..end])
}

/// Recovers the value grid from a document produced by [`render_heatmap`].
pub fn embedded_values(svg: &str) -> Result<Vec<Vec<Option<f64>>>> {
    let bad = |m: &str| LensError::InvalidConfig(format!("not a heatmap document: {m}"));
    let root = svg.lines().next().ok_or_else(|| bad("empty"))?;
    let parse_dim = |name| {
        attr(root, name)
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| bad(name))
    };
    let (rows, cols) = (parse_dim("data-rows")?, parse_dim("data-cols")?);
    let mut grid = vec![vec![None; cols]; rows];
    for line in svg.lines().filter(|l| l.starts_with("<rect ")) {
        let idx = |name| {
            attr(line, name)
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| bad(name))
        };
        let (i, j) = (idx("data-row")?, idx("data-col")?);
        let raw = attr(line, "data-value").ok_or_else(|| bad("data-value"))?;
        let cell = grid
            .get_mut(i)
            .and_then(|r| r.get_mut(j))
            .ok_or_else(|| bad("cell outside grid"))?;
        *cell = if raw.is_empty() {
            None
        } else {
            Some(raw.parse::<f64>().map_err(|_| bad("data-value"))?)
        };
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// String tables and lens tables
// ---------------------------------------------------------------------------

/// Optional id → display string mapping, loaded from `id<TAB>text` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StringTable {
    entries: std::collections::BTreeMap<u32, String>,
}

impl StringTable {
    /// Parses a TSV table; blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, vocab_size: usize) -> Result<Self> {
        let mut entries = std::collections::BTreeMap::new();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| LensError::InvalidConfig(format!("string table line {}: {m}", n + 1));
            let (id, s) = line.split_once('\t').ok_or_else(|| bad("expected id<TAB>text"))?;
            let id: u32 = id.trim().parse().map_err(|_| bad("id is not an integer"))?;
            if id as usize >= vocab_size {
                return Err(bad(&format!("id {id} outside vocabulary of {vocab_size}")));
            }
            if s.is_empty() || !seen.insert(s.to_owned()) {
                return Err(bad("text must be non-empty and unique"));
            }
            if entries.insert(id, s.to_owned()).is_some() {
                return Err(bad(&format!("duplicate id {id}")));
            }
        }
        Ok(Self { entries })
    }

    #[must_use]
    pub fn get(&self, id: u32) -> Option<&str> {
        self.entries.get(&id).map(String::as_str)
    }

    /// Display form of a token; unknown ids render as `⟨id⟩`.
    #[must_use]
    pub fn display(&self, id: u32) -> String {
        self.get(id).map_or_else(|| format!("⟨{id}⟩"), str::to_owned)
    }

    /// Maps whitespace-separated words back to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.entries
                    .iter()
                    .find(|(_, s)| s.as_str() == w)
                    .map(|(&id, _)| id)
                    .ok_or_else(|| LensError::InvalidConfig(format!("word {w:?} not in string table")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: u32,
    pub prob: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensCell {
    /// Top-k tokens, most probable first.
    pub top: Vec<TokenProb>,
    /// Entropy of the full lens distribution, nats.
    pub entropy: f64,
}

/// Top-k decoded tokens for every requested `(layer, position)` of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensTable {
    pub k: usize,
    pub token_ids: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tokens: Option<Vec<String>>,
    /// Layers in row order.
    pub layers: Vec<usize>,
    /// `cells[row][t]`.
    pub cells: Vec<Vec<LensCell>>,
    /// Base model next-token prediction per position.
    pub final_prediction: Vec<u32>,
}

/// Indices sorted by descending probability, ties by ascending index.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

/// [`build_lens_table_rows`] over every layer.
pub fn build_lens_table(
    lens: &Lens,
    head: &LogitHead,
    spec: &ModelSpec,
    seq: &CapturedSequence,
    k: usize,
    strings: Option<&StringTable>,
) -> Result<LensTable> {
    let layers: Vec<usize> = (1..=spec.n_layers).collect();
    build_lens_table_rows(lens, head, spec, seq, k, &layers, strings)
}

/// Builds a lens table restricted to `layers` (in the given order).
pub fn build_lens_table_rows(
    lens: &Lens,
    head: &LogitHead,
    spec: &ModelSpec,
    seq: &CapturedSequence,
    k: usize,
    layers: &[usize],
    strings: Option<&StringTable>,
) -> Result<LensTable> {
    lens.spec().ensure_same(spec, "lens vs sequence spec")?;
    seq.validate(spec)?;
    if k == 0 || k > spec.vocab_size {
        return Err(LensError::InvalidConfig(format!(
            "top-k must lie in 1..={}, got {k}",
            spec.vocab_size
        )));
    }
    if let Some(&layer) = layers.iter().find(|&&l| l == 0 || l > spec.n_layers) {
        return Err(LensError::LayerOutOfRange {
            layer,
            n_layers: spec.n_layers,
        });
    }
    let text = |id: u32| strings.map(|s| s.display(id));
    let cells = layers
        .iter()
        .map(|&layer| {
            (0..seq.len())
                .map(|t| {
                    let z = decode_logits(lens, head, spec, seq, layer, t)?;
                    let p = softmax(&z)?;
                    let top = ranked(p.probs())
                        .into_iter()
                        .take(k)
                        .map(|i| TokenProb {
                            token: i as u32,
                            prob: p.probs()[i],
                            text: text(i as u32),
                        })
                        .collect();
                    Ok(LensCell {
                        top,
                        entropy: entropy(&p),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LensTable {
        k,
        token_ids: seq.token_ids.clone(),
        tokens: strings.map(|s| seq.token_ids.iter().map(|&id| s.display(id)).collect()),
        layers: layers.to_vec(),
        cells,
        final_prediction: (0..seq.len()).map(|t| final_top1(spec, seq, t) as u32).collect(),
    })
}

impl LensTable {
    /// Fixed-width text rendering: one row per layer, top-1 (and its probability) per cell.
    #[must_use]
    pub fn to_text(&self) -> String {
        let label = |id: u32, txt: &Option<String>| txt.clone().unwrap_or_else(|| id.to_string());
        let mut s = String::new();
        let input: Vec<String> = match &self.tokens {
            Some(t) => t.clone(),
            None => self.token_ids.iter().map(u32::to_string).collect(),
        };
        let _ = writeln!(
            s,
            "{:>8} | {}",
            "input",
            input.iter().map(|x| format!("{x:>14}")).collect::<String>()
        );
        for (layer, row) in self.layers.iter().zip(&self.cells).rev() {
            let cells: String = row
                .iter()
                .map(|c| {
                    let t = &c.top[0];
                    format!("{:>14}", format!("{} {:.3}", label(t.token, &t.text), t.prob))
                })
                .collect();
            let _ = writeln!(s, "{:>8} | {cells}", format!("layer {layer}"));
        }
        let finals: String = self.final_prediction.iter().map(|id| format!("{id:>14}")).collect();
        let _ = writeln!(s, "{:>8} | {finals}", "model");
        s
    }

    /// Entropy grid of the table as a heatmap on the fixed `[0, ln |V|]` scale.
    #[must_use]
    pub fn entropy_heatmap(&self, title: &str, vocab_size: usize) -> HeatmapSpec {
        HeatmapSpec {
            title: title.to_owned(),
            units: "nats".into(),
            row_labels: self.layers.iter().map(|l| format!("layer {l}")).collect(),
            col_labels: (0..self.token_ids.len()).map(|t| format!("t={t}")).collect(),
            values: self
                .cells
                .iter()
                .map(|row| row.iter().map(|c| Some(c.entropy)).collect())
                .collect(),
            scale: ColorScale::Sequential,
            range: Some(entropy_range(vocab_size)),
        }
    }
}

/// Fixed color range for entropy: `[0, ln |V|]`.
#[must_use]
pub fn entropy_range(vocab_size: usize) -> (f64, f64) {
    (0.0, (vocab_size.max(2) as f64).ln())
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Listing of every exported file, relative to the export directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportIndex {
    pub format_version: u32,
    pub files: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn bucket_label(start: usize, end: usize) -> String {
    if end - start == 1 {
        start.to_string()
    } else {
        format!("{start}-{}", end - 1)
    }
}

/// Flat CSV: one row per cell and metric.
pub fn report_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| LensError::InvalidConfig(format!("csv: {e}"));
    w.write_record([
        "lens",
        "language",
        "layer",
        "position-bucket",
        "metric",
        "value",
        "count",
    ])
    .map_err(csv_err)?;
    let val = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for lm in &report.lenses {
        for lang in &lm.languages {
            for c in &lang.layers {
                for (metric, v, n) in [
                    ("agreement", c.agreement, c.count),
                    ("mean_entropy", c.mean_entropy, c.count),
                    ("mean_rank", c.mean_rank, c.rank_count),
                ] {
                    w.write_record([
                        lm.lens.as_str(),
                        &lang.language,
                        &c.layer.to_string(),
                        "all",
                        metric,
                        &val(v),
                        &n.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
            for p in &lang.positions {
                w.write_record([
                    lm.lens.as_str(),
                    &lang.language,
                    &p.layer.to_string(),
                    &bucket_label(p.bucket_start, p.bucket_end),
                    "position_accuracy",
                    &val(p.accuracy),
                    &p.count.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    for d in &report.deltas {
        for lang in &d.languages {
            for c in &lang.cells {
                w.write_record([
                    d.lens.as_str(),
                    &lang.language,
                    &c.layer.to_string(),
                    "all",
                    &format!("agreement_delta_vs_{}", d.baseline),
                    &val(c.delta),
                    &c.count.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| LensError::InvalidConfig(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Name, units, cell accessor, scale and fixed range of one per-layer heatmap.
type LayerMap = (
    &'static str,
    &'static str,
    fn(&crate::metrics::LayerCell) -> Option<f64>,
    ColorScale,
    Option<(f64, f64)>,
);

/// Every heatmap the export produces, keyed by relative file name.
#[must_use]
pub fn report_heatmaps(report: &MetricsReport) -> Vec<(String, HeatmapSpec)> {
    let layer_labels: Vec<String> = (1..=report.n_layers).map(|l| format!("L{l}")).collect();
    let mut out = Vec::new();
    for lm in &report.lenses {
        let langs: Vec<String> = lm.languages.iter().map(|l| l.language.clone()).collect();
        let metrics: [LayerMap; 3] = [
            (
                "agreement",
                "fraction",
                |c| c.agreement,
                ColorScale::Sequential,
                Some((0.0, 1.0)),
            ),
            (
                "mean_entropy",
                "nats",
                |c| c.mean_entropy,
                ColorScale::Sequential,
                Some(entropy_range(report.vocab_size)),
            ),
            ("mean_rank", "rank", |c| c.mean_rank, ColorScale::Sequential, None),
        ];
        for (name, units, get, scale, range) in metrics {
            out.push((
                format!("heatmaps/{}-{name}.svg", slug(&lm.lens)),
                HeatmapSpec {
                    title: format!("{} lens: {name} by language and layer", lm.lens),
                    units: units.into(),
                    row_labels: langs.clone(),
                    col_labels: layer_labels.clone(),
                    values: lm
                        .languages
                        .iter()
                        .map(|l| l.layers.iter().map(get).collect())
                        .collect(),
                    scale,
                    range,
                },
            ));
        }
        for lang in &lm.languages {
            let mut buckets: Vec<(usize, usize)> =
                lang.positions.iter().map(|p| (p.bucket_start, p.bucket_end)).collect();
            buckets.sort_unstable();
            buckets.dedup();
            let values = (1..=report.n_layers)
                .map(|layer| {
                    buckets
                        .iter()
                        .map(|&(s, _)| {
                            lang.positions
                                .iter()
                                .find(|p| p.layer == layer && p.bucket_start == s)
                                .and_then(|p| p.accuracy)
                        })
                        .collect()
                })
                .collect();
            out.push((
                format!(
                    "heatmaps/{}-{}-position_accuracy.svg",
                    slug(&lm.lens),
                    slug(&lang.language)
                ),
                HeatmapSpec {
                    title: format!("{} lens, {}: accuracy by layer and position", lm.lens, lang.language),
                    units: "fraction".into(),
                    row_labels: layer_labels.clone(),
                    col_labels: buckets.iter().map(|&(s, e)| bucket_label(s, e)).collect(),
                    values,
                    scale: ColorScale::Sequential,
                    range: Some((0.0, 1.0)),
                },
            ));
        }
    }
    for d in &report.deltas {
        for lang in &d.languages {
            out.push((
                format!(
                    "heatmaps/delta-{}-vs-{}-{}.svg",
                    slug(&d.lens),
                    slug(&d.baseline),
                    slug(&lang.language)
                ),
                HeatmapSpec {
                    title: format!("{} minus {} agreement, {}", d.lens, d.baseline, lang.language),
                    units: "fraction".into(),
                    row_labels: vec![lang.language.clone()],
                    col_labels: lang.cells.iter().map(|c| format!("L{}", c.layer)).collect(),
                    values: vec![lang.cells.iter().map(|c| c.delta).collect()],
                    scale: ColorScale::Diverging,
                    range: None,
                },
            ));
        }
    }
    out
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8]) -> Result<IndexEntry> {
    let path: PathBuf = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LensError::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| LensError::io(&path, e))?;
    Ok(IndexEntry {
        path: rel.to_owned(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(bytes),
    })
}

/// Writes `report.json`, `report.csv`, all heatmaps and `index.json` into `dir`.
///
/// A report with no lenses produces only an index with zero entries.
pub fn export_report(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<ExportIndex> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| LensError::io(dir, e))?;
    let mut files = Vec::new();
    if !report.lenses.is_empty() {
        let mut json = serde_json::to_string_pretty(report)?;
        json.push('\n');
        files.push(write_file(dir, "report.json", json.as_bytes())?);
        files.push(write_file(dir, "report.csv", report_csv(report)?.as_bytes())?);
        for (rel, spec) in report_heatmaps(report) {
            files.push(write_file(dir, &rel, render_heatmap(&spec)?.as_bytes())?);
        }
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let index = ExportIndex {
        format_version: crate::metrics::REPORT_FORMAT_VERSION,
        files,
    };
    let mut json = serde_json::to_string_pretty(&index)?;
    json.push('\n');
    let path = dir.join(INDEX_FILE);
    fs::write(&path, json).map_err(|e| LensError::io(&path, e))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::ActivationSet;
    use crate::corpus::synth_multilingual_corpus;
    use crate::metrics::{evaluate, EvalOptions, EvalSample};
    use crate::model::Model;
    use proptest::prelude::*;

    fn grid(values: Vec<Vec<Option<f64>>>, scale: ColorScale) -> HeatmapSpec {
        HeatmapSpec {
            title: "t".into(),
            units: "u".into(),
            row_labels: (0..values.len()).map(|i| format!("r{i}")).collect(),
            col_labels: (0..values.first().map_or(0, Vec::len))
                .map(|j| format!("c{j}"))
                .collect(),
            values,
            scale,
            range: None,
        }
    }

    #[test]
    fn single_cell_has_label_and_value() {
        let svg = render_heatmap(&grid(vec![vec![Some(0.5)]], ColorScale::Sequential)).unwrap();
        assert!(svg.contains(r#"data-value="0.5""#));
        assert!(svg.contains(">r0<"));
        assert!(svg.contains(">c0<"));
        assert_eq!(svg.matches("<rect ").count(), 1);
    }

    #[test]
    fn degenerate_range_is_widened() {
        let spec = grid(vec![vec![Some(2.0), Some(2.0)]], ColorScale::Sequential);
        let (lo, hi) = spec.resolved_range();
        assert_eq!((lo, hi), (2.0 - RANGE_EPSILON, 2.0 + RANGE_EPSILON));
        let svg = render_heatmap(&spec).unwrap();
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn diverging_scale_centers_zero() {
        let spec = grid(vec![vec![Some(-0.02), Some(0.0), Some(0.05)]], ColorScale::Diverging);
        assert_eq!(spec.resolved_range(), (-0.05, 0.05));
        let neutral = color_for(ColorScale::Diverging, spec.resolved_range(), 0.0);
        assert_eq!(neutral, "#f7f7f7");
        let svg = render_heatmap(&spec).unwrap();
        assert!(svg.contains(r##"fill="#f7f7f7" data-row="0" data-col="1""##));
        assert_eq!(color_for(ColorScale::Diverging, (-0.05, 0.05), 0.05), "#b2182b");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut ragged = grid(vec![vec![Some(1.0)], vec![Some(1.0)]], ColorScale::Sequential);
        ragged.values[1].push(Some(2.0));
        assert!(render_heatmap(&ragged).is_err());
        let mut inverted = grid(vec![vec![Some(1.0)]], ColorScale::Sequential);
        inverted.range = Some((1.0, 1.0));
        assert!(render_heatmap(&inverted).is_err());
        let nan = grid(vec![vec![Some(f64::NAN)]], ColorScale::Sequential);
        assert!(render_heatmap(&nan).is_err());
    }

    #[test]
    fn labels_are_escaped() {
        let mut spec = grid(vec![vec![None]], ColorScale::Sequential);
        spec.row_labels[0] = "<a&b>".into();
        let svg = render_heatmap(&spec).unwrap();
        assert!(svg.contains("&lt;a&amp;b&gt;"));
        assert_eq!(embedded_values(&svg).unwrap(), vec![vec![None]]);
    }

    proptest! {
        #[test]
        fn heatmap_values_round_trip(
            rows in 1usize..5,
            cols in 1usize..6,
            seed in prop::collection::vec(prop::option::weighted(0.9, -1e6f64..1e6), 30),
            diverging in any::<bool>(),
        ) {
            let values: Vec<Vec<Option<f64>>> =
                (0..rows).map(|i| (0..cols).map(|j| seed[(i * cols + j) % seed.len()]).collect()).collect();
            let scale = if diverging { ColorScale::Diverging } else { ColorScale::Sequential };
            let spec = grid(values.clone(), scale);
            let a = render_heatmap(&spec).unwrap();
            prop_assert_eq!(&a, &render_heatmap(&spec).unwrap());
            prop_assert_eq!(embedded_values(&a).unwrap(), values);
        }
    }

    fn setup() -> (Model, ActivationSet) {
        let model = Model::build(ModelSpec {
            d_model: 8,
            n_layers: 3,
            n_heads: 2,
            vocab_size: 10,
            max_seq: 8,
            final_norm: true,
            seed: 4,
        })
        .unwrap();
        let langs = vec!["bn".to_owned(), "hi".to_owned()];
        let set = synth_multilingual_corpus(&model, &langs, 4, 6, 3).unwrap();
        (model, set)
    }

    #[test]
    fn lens_table_contracts() {
        let (model, set) = setup();
        let spec = &set.spec;
        let seq = &set.sequences()[0];
        let lens = Lens::identity(spec.clone());

        let t1 = build_lens_table(&lens, model.head(), spec, seq, 1, None).unwrap();
        assert_eq!(t1.cells.len(), 3);
        for (t, cell) in t1.cells[2].iter().enumerate() {
            assert_eq!(cell.top[0].token, t1.final_prediction[t]);
        }

        let full = build_lens_table(&lens, model.head(), spec, seq, 10, None).unwrap();
        for cell in full.cells.iter().flatten() {
            let mut ids: Vec<u32> = cell.top.iter().map(|x| x.token).collect();
            ids.sort_unstable();
            assert_eq!(ids, (0..10).collect::<Vec<_>>());
            assert!(cell.top.windows(2).all(|w| w[0].prob >= w[1].prob));
            let sum: f64 = cell.top.iter().map(|x| x.prob).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }

        assert!(build_lens_table(&lens, model.head(), spec, seq, 11, None).is_err());
        assert!(build_lens_table(&lens, model.head(), spec, seq, 0, None).is_err());
        let mut other = spec.clone();
        other.seed += 1;
        assert!(matches!(
            build_lens_table(&Lens::logit(other), model.head(), spec, seq, 1, None),
            Err(LensError::SpecMismatch(_))
        ));

        let rows = build_lens_table_rows(&lens, model.head(), spec, seq, 2, &[1, 3], None).unwrap();
        assert_eq!(rows.layers, [1, 3]);
        assert_eq!(
            rows.cells[1],
            full.cells[2]
                .iter()
                .map(|c| LensCell {
                    top: c.top[..2].to_vec(),
                    entropy: c.entropy
                })
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn lens_table_ties_prefer_lowest_index() {
        assert_eq!(ranked(&[0.25, 0.25, 0.5, 0.0]), [2, 0, 1, 3]);
    }

    #[test]
    fn string_table_display_and_encode() {
        let table = StringTable::parse("# demo\n0\tনমস্কার\n3\tनमस्ते\n", 10).unwrap();
        assert_eq!(table.display(3), "नमस्ते");
        assert_eq!(table.display(4), "⟨4⟩");
        assert_eq!(table.encode("नमस्ते নমস্কার").unwrap(), [3, 0]);
        assert!(table.encode("unknown").is_err());
        assert!(StringTable::parse("12\tx\n", 10).is_err());
        assert!(StringTable::parse("1\tx\n2\tx\n", 10).is_err());
        assert!(StringTable::parse("1 x\n", 10).is_err());
    }

    fn report(model: &Model, set: &ActivationSet) -> MetricsReport {
        let samples = EvalSample::all(set);
        let mut r = MetricsReport::new(&set.spec, EvalOptions::default());
        for (name, lens) in [
            ("logit", Lens::logit(set.spec.clone())),
            ("tuned", Lens::identity(set.spec.clone())),
        ] {
            r.lenses
                .push(evaluate(name, &lens, model.head(), set, &samples, EvalOptions::default()).unwrap());
        }
        r.add_deltas_against_first().unwrap();
        r
    }

    #[test]
    fn export_is_deterministic_with_one_delta_map_per_language() {
        let (model, set) = setup();
        let r = report(&model, &set);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ia = export_report(&r, a.path()).unwrap();
        let ib = export_report(&r, b.path()).unwrap();
        assert_eq!(ia, ib);
        for e in &ia.files {
            let bytes = fs::read(a.path().join(&e.path)).unwrap();
            assert_eq!(sha256_hex(&bytes), e.sha256);
        }
        let deltas: Vec<&IndexEntry> = ia
            .files
            .iter()
            .filter(|f| f.path.starts_with("heatmaps/delta-"))
            .collect();
        assert_eq!(deltas.len(), 2);
        for d in deltas {
            let svg = fs::read_to_string(a.path().join(&d.path)).unwrap();
            assert!(svg.contains(r#"data-scale="diverging""#));
            let vals = embedded_values(&svg).unwrap();
            assert!(vals.iter().flatten().all(|v| *v == Some(0.0)));
        }
        // 3 metrics × 2 lenses + 2 lenses × 2 languages position maps + 2 delta maps + json + csv
        assert_eq!(ia.files.len(), 6 + 4 + 2 + 2);
    }

    #[test]
    fn empty_report_exports_empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let r = MetricsReport::new(&ModelSpec::default(), EvalOptions::default());
        let index = export_report(&r, dir.path()).unwrap();
        assert!(index.files.is_empty());
        assert!(dir.path().join(INDEX_FILE).exists());
    }

    #[test]
    fn unwritable_directory_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let r = MetricsReport::new(&ModelSpec::default(), EvalOptions::default());
        assert!(matches!(
            export_report(&r, blocker.join("sub")),
            Err(LensError::Io { .. })
        ));
    }

    #[test]
    fn csv_has_one_row_per_cell_and_metric() {
        let (model, set) = setup();
        let r = report(&model, &set);
        let text = report_csv(&r).unwrap();
        let mut rows = csv::Reader::from_reader(text.as_bytes());
        let n = rows.records().count();
        // per lens: 2 langs × 3 layers × 3 metrics + 2 langs × 3 layers × 6 positions; deltas: 2 × 3
        assert_eq!(n, 2 * (18 + 36) + 6);
        assert!(text.starts_with("lens,language,layer,position-bucket,metric,value,count\n"));
    }
}
