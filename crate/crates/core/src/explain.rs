//! Explanation-score export: per-utterance aspect traces, cohort
//! aggregates, CSV/JSON files, and SVG heatmaps.
//!
//! An explanation is the `[T, K]` attention-weight matrix of an aspect
//! model: each row is a probability distribution over the K speech
//! aspects at one time step. No further rescaling is applied anywhere in
//! this module; cross-sample comparability rests on that row-stochastic
//! normalization alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::model::PredictionOutput;
use crate::tensor::Tensor;

const ROW_SUM_TOL: f64 = 1e-9;

/// One utterance's explanation scores.
#[derive(Debug, Clone)]
pub struct ExplanationRecord {
    pub utterance_id: String,
    pub aspect_names: Vec<String>,
    /// `[T, K]` row-stochastic attention weights.
    pub scores: Tensor,
    /// Column means of `scores`; sums to 1.
    pub mean_scores: Vec<f64>,
    /// Predicted label.
    pub prediction: Label,
    /// Ground-truth label.
    pub label: Label,
}

impl ExplanationRecord {
    pub fn new(
        utterance_id: String,
        aspect_names: Vec<String>,
        scores: Tensor,
        prediction: Label,
        label: Label,
    ) -> Result<Self> {
        if scores.rank() != 2 || scores.dim(1) != aspect_names.len() {
            return Err(Error::Shape(format!(
                "scores {:?} do not match {} aspects",
                scores.shape(),
                aspect_names.len()
            )));
        }
        for (t, row) in scores.rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Numeric(format!(
                    "score row {t} sums to {sum}, not 1"
                )));
            }
        }
        let mean_scores = column_means(&scores);
        Ok(ExplanationRecord {
            utterance_id,
            aspect_names,
            scores,
            mean_scores,
            prediction,
            label,
        })
    }

    /// Builds a record from a model's forward output (aspect variants
    /// only: the score matrix must be time-by-aspect).
    pub fn from_prediction(
        utterance_id: &str,
        aspect_names: &[String],
        output: &PredictionOutput,
        label: Label,
    ) -> Result<Self> {
        let prediction = if output.p_positive() >= 0.5 {
            Label::Pd
        } else {
            Label::Hc
        };
        ExplanationRecord::new(
            utterance_id.to_string(),
            aspect_names.to_vec(),
            output.scores.weights.clone(),
            prediction,
            label,
        )
    }

    pub fn t_len(&self) -> usize {
        self.scores.dim(0)
    }

    pub fn k(&self) -> usize {
        self.aspect_names.len()
    }
}

fn column_means(scores: &Tensor) -> Vec<f64> {
    let (t, k) = (scores.dim(0), scores.dim(1));
    let mut means = vec![0.0; k];
    for row in scores.rows() {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= t as f64);
    means
}

/// Per-utterance summary: mean scores and the dominant aspect.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub mean_scores: Vec<f64>,
    pub dominant_aspect: usize,
    pub dominant_name: String,
}

/// Column means plus the argmax aspect; ties break to the lowest index.
pub fn summarize(record: &ExplanationRecord) -> Summary {
    let means = column_means(&record.scores);
    let mut dominant = 0;
    for (i, &m) in means.iter().enumerate() {
        if m > means[dominant] {
            dominant = i;
        }
    }
    Summary {
        mean_scores: means.clone(),
        dominant_aspect: dominant,
        dominant_name: record.aspect_names[dominant].clone(),
    }
}

/// Mean scores over a set of records, overall and per ground-truth label.
#[derive(Debug, Clone, Serialize)]
pub struct CohortSummary {
    pub aspect_names: Vec<String>,
    pub n_records: usize,
    pub overall_mean: Vec<f64>,
    pub pd_mean: Option<Vec<f64>>,
    pub hc_mean: Option<Vec<f64>>,
}

pub fn cohort_summary(records: &[ExplanationRecord]) -> Result<CohortSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Data("cohort summary needs at least one record".into()))?;
    let k = first.k();
    let mut acc = vec![(vec![0.0; k], 0usize); 3]; // overall, pd, hc
    for r in records {
        if r.aspect_names != first.aspect_names {
            return Err(Error::Data("records disagree on aspect names".into()));
        }
        let slots: &[usize] = match r.label {
            Label::Pd => &[0, 1],
            Label::Hc => &[0, 2],
        };
        for &slot in slots {
            for (a, v) in acc[slot].0.iter_mut().zip(&r.mean_scores) {
                *a += v;
            }
            acc[slot].1 += 1;
        }
    }
    let finish = |(sums, n): &(Vec<f64>, usize)| -> Option<Vec<f64>> {
        if *n == 0 {
            None
        } else {
            Some(sums.iter().map(|s| s / *n as f64).collect())
        }
    };
    Ok(CohortSummary {
        aspect_names: first.aspect_names.clone(),
        n_records: records.len(),
        overall_mean: finish(&acc[0]).expect("nonempty"),
        pd_mean: finish(&acc[1]),
        hc_mean: finish(&acc[2]),
    })
}

// ── CSV / JSON export ───────────────────────────────────────────────────

/// Long-format CSV: one row per `(utterance, t)` with one column per
/// aspect score. An empty record list yields a header-only file with the
/// generic `aspect_k` column names.
pub fn export_csv(records: &[ExplanationRecord], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let aspect_names: Vec<String> = records
        .first()
        .map(|r| r.aspect_names.clone())
        .unwrap_or_else(|| (0..4).map(|k| format!("aspect_{k}")).collect());
    let mut header = vec!["utterance_id".to_string(), "t".to_string()];
    header.extend(aspect_names.iter().cloned());
    header.push("prediction".into());
    header.push("label".into());
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in records {
        for (t, row) in r.scores.rows().enumerate() {
            let mut record = vec![r.utterance_id.clone(), t.to_string()];
            record.extend(row.iter().map(|v| format!("{v:.12}")));
            record.push(r.prediction.as_str().to_string());
            record.push(r.label.as_str().to_string());
            writer.write_record(&record).map_err(|e| csv_error(path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::parse(path, e.to_string())
}

/// JSON mirror of [`ExplanationRecord`] with scores as nested rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplanationRecordJson {
    pub utterance_id: String,
    pub aspect_names: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    pub mean_scores: Vec<f64>,
    pub prediction: Label,
    pub label: Label,
}

impl From<&ExplanationRecord> for ExplanationRecordJson {
    fn from(r: &ExplanationRecord) -> Self {
        ExplanationRecordJson {
            utterance_id: r.utterance_id.clone(),
            aspect_names: r.aspect_names.clone(),
            scores: r.scores.rows().map(|row| row.to_vec()).collect(),
            mean_scores: r.mean_scores.clone(),
            prediction: r.prediction,
            label: r.label,
        }
    }
}

impl ExplanationRecordJson {
    pub fn into_record(self) -> Result<ExplanationRecord> {
        ExplanationRecord::new(
            self.utterance_id,
            self.aspect_names,
            Tensor::from_rows(&self.scores)?,
            self.prediction,
            self.label,
        )
    }
}

pub fn export_json(records: &[ExplanationRecord], path: &Path) -> Result<()> {
    let mirror: Vec<ExplanationRecordJson> = records.iter().map(Into::into).collect();
    let text = serde_json::to_string_pretty(&mirror).expect("records serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn import_json(path: &Path) -> Result<Vec<ExplanationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mirror: Vec<ExplanationRecordJson> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    mirror.into_iter().map(|m| m.into_record()).collect()
}

// ── SVG heatmap ─────────────────────────────────────────────────────────

const CELL: f64 = 14.0;
const LEFT: f64 = 110.0;
const TOP: f64 = 46.0;
const LEGEND_STEPS: usize = 24;

/// Monotone white-to-blue colormap on [0, 1].
fn colormap(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * v).round() as u8;
    (lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

/// Renders a `K x T` heat grid (aspects as rows, time as columns) with a
/// value legend spanning [0, 1]. Static SVG 1.1.
pub fn render_heatmap_svg(record: &ExplanationRecord, path: &Path) -> Result<()> {
    let (t_len, k) = (record.t_len(), record.k());
    let width = LEFT + CELL * t_len as f64 + 60.0;
    let height = TOP + CELL * k as f64 + 70.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        concat!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n",
            "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" ",
            "width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.0} {:.0}\">\n"
        ),
        width, height, width, height
    ));
    svg.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">{} (pred {}, label {})</text>\n",
        xml_escape(&record.utterance_id),
        record.prediction.as_str(),
        record.label.as_str()
    ));
    for (ki, name) in record.aspect_names.iter().enumerate() {
        let y = TOP + CELL * (ki as f64 + 0.7);
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            LEFT - 6.0,
            xml_escape(name)
        ));
        for t in 0..t_len {
            let v = record.scores.at(t, ki);
            let (r, g, b) = colormap(v);
            svg.push_str(&format!(
                "<rect class=\"cell\" data-t=\"{t}\" data-k=\"{ki}\" x=\"{:.1}\" y=\"{:.1}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"#{r:02x}{g:02x}{b:02x}\"/>\n",
                LEFT + CELL * t as f64,
                TOP + CELL * ki as f64,
            ));
        }
    }
    // Time axis label plus a discrete legend for the [0, 1] scale.
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">time frames (T = {t_len})</text>\n",
        LEFT,
        TOP + CELL * k as f64 + 18.0
    ));
    let legend_y = TOP + CELL * k as f64 + 32.0;
    let legend_w = 160.0;
    for i in 0..LEGEND_STEPS {
        let v = i as f64 / (LEGEND_STEPS - 1) as f64;
        let (r, g, b) = colormap(v);
        svg.push_str(&format!(
            "<rect class=\"legend\" x=\"{:.2}\" y=\"{legend_y:.1}\" width=\"{:.2}\" height=\"10\" fill=\"#{r:02x}{g:02x}{b:02x}\"/>\n",
            LEFT + legend_w * i as f64 / LEGEND_STEPS as f64,
            legend_w / LEGEND_STEPS as f64 + 0.5,
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">0</text>\n",
        LEFT - 8.0,
        legend_y + 9.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\">1</text>\n",
        LEFT + legend_w + 4.0,
        legend_y + 9.0
    ));
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn names() -> Vec<String> {
        ["articulation", "glottal", "phonation", "prosody"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn record_from_rows(rows: &[Vec<f64>]) -> ExplanationRecord {
        ExplanationRecord::new(
            "utt01".into(),
            names(),
            Tensor::from_rows(rows).unwrap(),
            Label::Pd,
            Label::Hc,
        )
        .unwrap()
    }

    fn random_stochastic_rows(t: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = crate::rng::SeededRng::new(seed);
        (0..t)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 0.05).collect();
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|v| v / sum).collect()
            })
            .collect()
    }

    #[test]
    fn uniform_scores_summarize_to_tie_break() {
        let record = record_from_rows(&vec![vec![0.25; 4]; 6]);
        let s = summarize(&record);
        for m in &s.mean_scores {
            assert_abs_diff_eq!(*m, 0.25, epsilon = 1e-15);
        }
        assert_eq!(s.dominant_aspect, 0);
        assert_eq!(s.dominant_name, "articulation");
    }

    #[test]
    fn one_hot_scores_dominate_their_aspect() {
        let rows = vec![vec![0.0, 0.0, 1.0, 0.0]; 5];
        let record = record_from_rows(&rows);
        let s = summarize(&record);
        assert_eq!(s.dominant_aspect, 2);
        assert_eq!(s.mean_scores, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn summary_matches_column_average_oracle() {
        let rows = random_stochastic_rows(7, 4, 5);
        let record = record_from_rows(&rows);
        let s = summarize(&record);
        for k in 0..4 {
            let want: f64 = rows.iter().map(|r| r[k]).sum::<f64>() / 7.0;
            assert_abs_diff_eq!(s.mean_scores[k], want, epsilon = 1e-15);
        }
        let total: f64 = s.mean_scores.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn summarize_is_permutation_equivariant() {
        let rows = random_stochastic_rows(5, 4, 6);
        let record = record_from_rows(&rows);
        let base = summarize(&record);
        let perm = [2usize, 0, 3, 1];
        let permuted_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| perm.iter().map(|&j| r[j]).collect())
            .collect();
        let permuted = ExplanationRecord::new(
            "utt01".into(),
            perm.iter().map(|&j| names()[j].clone()).collect(),
            Tensor::from_rows(&permuted_rows).unwrap(),
            Label::Pd,
            Label::Hc,
        )
        .unwrap();
        let out = summarize(&permuted);
        for (i, &j) in perm.iter().enumerate() {
            assert_abs_diff_eq!(out.mean_scores[i], base.mean_scores[j], epsilon = 1e-15);
        }
    }

    #[test]
    fn non_stochastic_rows_are_rejected() {
        let rows = vec![vec![0.5, 0.5, 0.2, 0.0]];
        assert!(ExplanationRecord::new(
            "bad".into(),
            names(),
            Tensor::from_rows(&rows).unwrap(),
            Label::Pd,
            Label::Pd
        )
        .is_err());
    }

    #[test]
    fn csv_export_header_only_when_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        export_csv(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1);
        assert!(lines[0].starts_with("utterance_id,t,"));
    }

    #[test]
    fn csv_has_one_aspect_column_per_manifest_name() {
        let record = record_from_rows(&random_stochastic_rows(3, 4, 7));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        export_csv(&[record], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "utterance_id,t,articulation,glottal,phonation,prosody,prediction,label"
        );
        assert_eq!(text.lines().count(), 1 + 3);
        // Round trip through the CSV text recovers the scores closely.
        let row1: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        let record = record_from_rows(&random_stochastic_rows(3, 4, 7));
        for k in 0..4 {
            let got: f64 = row1[2 + k].parse().unwrap();
            assert_abs_diff_eq!(got, record.scores.at(0, k), epsilon = 1e-9);
        }
    }

    #[test]
    fn json_round_trip_preserves_rows_and_sums() {
        let records = vec![
            record_from_rows(&random_stochastic_rows(4, 4, 8)),
            record_from_rows(&random_stochastic_rows(6, 4, 9)),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.json");
        export_json(&records, &path).unwrap();
        let loaded = import_json(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in records.iter().zip(&loaded) {
            assert_eq!(a.utterance_id, b.utterance_id);
            for (x, y) in a.scores.data().iter().zip(b.scores.data()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-9);
            }
            for row in b.scores.rows() {
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn cohort_summary_averages_by_label() {
        let mut a = record_from_rows(&vec![vec![0.7, 0.1, 0.1, 0.1]; 3]);
        a.label = Label::Pd;
        let mut b = record_from_rows(&vec![vec![0.1, 0.7, 0.1, 0.1]; 3]);
        b.label = Label::Hc;
        let s = cohort_summary(&[a, b]).unwrap();
        assert_eq!(s.n_records, 2);
        assert_abs_diff_eq!(s.overall_mean[0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(s.pd_mean.unwrap()[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(s.hc_mean.unwrap()[1], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn svg_is_well_formed_and_colors_track_scores() {
        // Scores spaced well apart so 8-bit color quantization cannot
        // reorder them.
        let rows = vec![
            vec![0.70, 0.20, 0.06, 0.04],
            vec![0.10, 0.40, 0.35, 0.15],
        ];
        let record = record_from_rows(&rows);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.svg");
        render_heatmap_svg(&record, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let cells: Vec<(usize, usize, f64)> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("cell"))
            .map(|n| {
                let t: usize = n.attribute("data-t").unwrap().parse().unwrap();
                let k: usize = n.attribute("data-k").unwrap().parse().unwrap();
                let fill = n.attribute("fill").unwrap();
                let r = u8::from_str_radix(&fill[1..3], 16).unwrap() as f64;
                let g = u8::from_str_radix(&fill[3..5], 16).unwrap() as f64;
                let b = u8::from_str_radix(&fill[5..7], 16).unwrap() as f64;
                (t, k, r + g + b)
            })
            .collect();
        assert_eq!(cells.len(), 8);
        // Higher score means darker cell (smaller channel sum).
        for &(t1, k1, lum1) in &cells {
            for &(t2, k2, lum2) in &cells {
                let s1 = rows[t1][k1];
                let s2 = rows[t2][k2];
                if s1 > s2 + 0.02 {
                    assert!(
                        lum1 < lum2,
                        "score {s1} vs {s2} but luminance {lum1} vs {lum2}"
                    );
                }
            }
        }
        // Uniform records render a uniform grid.
        let uniform = record_from_rows(&vec![vec![0.25; 4]; 3]);
        let upath = dir.path().join("uniform.svg");
        render_heatmap_svg(&uniform, &upath).unwrap();
        let utext = std::fs::read_to_string(&upath).unwrap();
        let udoc = roxmltree::Document::parse(&utext).unwrap();
        let fills: std::collections::BTreeSet<String> = udoc
            .descendants()
            .filter(|n| n.attribute("class") == Some("cell"))
            .map(|n| n.attribute("fill").unwrap().to_string())
            .collect();
        assert_eq!(fills.len(), 1);
    }
}
