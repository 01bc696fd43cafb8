//! Renderer-agnostic Sankey flow document, with a minimal SVG writer.

use std::fmt::Write;

use serde::{Deserialize, Serialize};
use sinkflow::TransportPlan;

pub const SANKEY_FORMAT: &str = "sinkflow-sankey";
/// Row sums of each flow block must match its step's marginal this closely.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Column sums must reach the next step's marginal this closely.
pub const COL_SUM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSource {
    Observed,
    Predicted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SankeyStep {
    pub source: StepSource,
    pub marginal: Vec<f64>,
    /// Mass moving to the next step; absent on the last step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flows: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SankeyDocument {
    pub format: String,
    pub labels: Vec<String>,
    /// Steps before this index were given; the rest are forecasts.
    pub marker: usize,
    pub steps: Vec<SankeyStep>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl SankeyDocument {
    /// Builds a document from consecutive plans. Each step's marginal is
    /// its outgoing flow's row sums; the last step takes `last_marginal`.
    /// Steps after `last_observed` are marked as predicted.
    pub fn from_plans(
        labels: Vec<String>,
        plans: &[TransportPlan],
        last_marginal: &[f64],
        marker: usize,
        last_observed: usize,
        config: serde_json::Value,
    ) -> Result<Self, String> {
        if plans.is_empty() {
            return Err("no plans to export".into());
        }
        let mut steps: Vec<SankeyStep> = plans
            .iter()
            .enumerate()
            .map(|(i, p)| SankeyStep {
                source: if i <= last_observed {
                    StepSource::Observed
                } else {
                    StepSource::Predicted
                },
                marginal: p.source_mass(),
                flows: Some(p.flow().to_rows()),
            })
            .collect();
        steps.push(SankeyStep {
            source: if plans.len() <= last_observed {
                StepSource::Observed
            } else {
                StepSource::Predicted
            },
            marginal: last_marginal.to_vec(),
            flows: None,
        });
        let doc = Self {
            format: SANKEY_FORMAT.into(),
            labels,
            marker,
            steps,
            config,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.format != SANKEY_FORMAT {
            return Err(format!("unknown document format `{}`", self.format));
        }
        let k = self.labels.len();
        if k == 0 || self.steps.is_empty() {
            return Err("document needs labels and at least one step".into());
        }
        if self.marker > self.steps.len() {
            return Err(format!("marker {} beyond {} steps", self.marker, self.steps.len()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.marginal.len() != k || step.marginal.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(format!("step {i}: marginal must hold {k} nonnegative values"));
            }
            let last = i + 1 == self.steps.len();
            match (&step.flows, last) {
                (None, true) => {}
                (None, false) => return Err(format!("step {i}: missing flows")),
                (Some(_), true) => return Err(format!("step {i}: last step cannot have flows")),
                (Some(flows), false) => {
                    if flows.len() != k || flows.iter().any(|r| r.len() != k) {
                        return Err(format!("step {i}: flows must be {k}x{k}"));
                    }
                    if flows.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
                        return Err(format!("step {i}: flows must be finite and nonnegative"));
                    }
                    for (r, row) in flows.iter().enumerate() {
                        let total: f64 = row.iter().sum();
                        if (total - step.marginal[r]).abs() > ROW_SUM_TOL {
                            return Err(format!(
                                "step {i}: row {r} sums to {total}, marginal is {}",
                                step.marginal[r]
                            ));
                        }
                    }
                    let next = &self.steps[i + 1].marginal;
                    for (j, want) in next.iter().enumerate() {
                        let total: f64 = flows.iter().map(|row| row[j]).sum();
                        if (total - want).abs() > COL_SUM_TOL {
                            return Err(format!("step {i}: column {j} sums to {total}, next marginal is {want}"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let doc: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        doc.validate()?;
        Ok(doc)
    }

    /// Columns of stacked faction bars joined by flow bands; a dashed line
    /// marks the end of the given history.
    pub fn to_svg(&self) -> String {
        const COL_GAP: f64 = 160.0;
        const BAR_W: f64 = 14.0;
        const HEIGHT: f64 = 400.0;
        const PAD: f64 = 30.0;
        const PALETTE: [&str; 8] = [
            "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
        ];
        let k = self.labels.len();
        let gap = 6.0;
        let scale = HEIGHT - gap * (k.saturating_sub(1)) as f64;
        let width = 2.0 * PAD + COL_GAP * (self.steps.len().saturating_sub(1)) as f64 + BAR_W;
        let x_of = |i: usize| PAD + COL_GAP * i as f64;
        let tops = |m: &[f64]| -> Vec<f64> {
            let mut y = PAD;
            m.iter()
                .map(|v| {
                    let top = y;
                    y += v * scale + gap;
                    top
                })
                .collect()
        };

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{:.1}">"#,
            HEIGHT + 2.0 * PAD
        );
        for (i, w) in self.steps.windows(2).enumerate() {
            let Some(flows) = &w[0].flows else { continue };
            let mut out_y = tops(&w[0].marginal);
            let mut in_y = tops(&w[1].marginal);
            let (x0, x1) = (x_of(i) + BAR_W, x_of(i + 1));
            let mid = (x0 + x1) / 2.0;
            for (a, row) in flows.iter().enumerate() {
                for (b, v) in row.iter().enumerate() {
                    let h = v * scale;
                    if h <= 0.0 {
                        continue;
                    }
                    let (ya, yb) = (out_y[a], in_y[b]);
                    let _ = writeln!(
                        svg,
                        r#"<path d="M{x0:.1},{ya:.1} C{mid:.1},{ya:.1} {mid:.1},{yb:.1} {x1:.1},{yb:.1} L{x1:.1},{:.1} C{mid:.1},{:.1} {mid:.1},{:.1} {x0:.1},{:.1} Z" fill="{}" fill-opacity="0.35"/>"#,
                        yb + h,
                        yb + h,
                        ya + h,
                        ya + h,
                        PALETTE[a % PALETTE.len()]
                    );
                    out_y[a] += h;
                    in_y[b] += h;
                }
            }
        }
        for (i, step) in self.steps.iter().enumerate() {
            for (f, (top, v)) in tops(&step.marginal).into_iter().zip(&step.marginal).enumerate() {
                let _ = writeln!(
                    svg,
                    r#"<rect x="{:.1}" y="{top:.1}" width="{BAR_W}" height="{:.1}" fill="{}"><title>{} t{i}: {v:.4}</title></rect>"#,
                    x_of(i),
                    v * scale,
                    PALETTE[f % PALETTE.len()],
                    escape(&self.labels[f])
                );
            }
        }
        if self.marker > 0 && self.marker < self.steps.len() {
            let x = (x_of(self.marker - 1) + BAR_W + x_of(self.marker)) / 2.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="red" stroke-dasharray="6,4"/>"#,
                PAD / 2.0,
                HEIGHT + 1.5 * PAD
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn default_labels(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("faction {i}")).collect()
}
