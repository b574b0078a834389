//! Score fusion and presentation attack detection error rates.
//!
//! Rates are kept as exact fractions of counts; percentages are derived at the edge.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, Mask};
use crate::error::{invalid, Error, Result};

pub type Fraction = Ratio<u64>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Live,
    /// An attack with its instrument tag, e.g. `print` or `replay`.
    Attack(String),
}

impl Label {
    pub fn is_live(&self) -> bool {
        matches!(self, Label::Live)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub label: Label,
    pub score: f64,
}

impl ScoreRecord {
    pub fn new(sample_id: impl Into<String>, label: Label, score: f64) -> Result<Self> {
        if !score.is_finite() {
            return Err(invalid(format!("score {score} is not finite")));
        }
        if let Label::Attack(pai) = &label {
            if pai.is_empty() {
                return Err(invalid("attack records need an instrument tag"));
            }
        }
        Ok(Self {
            sample_id: sample_id.into(),
            label,
            score,
        })
    }

    pub fn live(sample_id: impl Into<String>, score: f64) -> Result<Self> {
        Self::new(sample_id, Label::Live, score)
    }

    pub fn attack(sample_id: impl Into<String>, pai: impl Into<String>, score: f64) -> Result<Self> {
        Self::new(sample_id, Label::Attack(pai.into()), score)
    }

    /// Accepted as live iff `score >= threshold`.
    pub fn accepted(&self, threshold: f64) -> bool {
        self.score >= threshold
    }
}

/// Fraction as a percentage.
pub fn percent(r: Fraction) -> f64 {
    (*r.numer() as f64) * 100.0 / (*r.denom() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub threshold: f64,
    /// Attack acceptance rate per instrument.
    pub apcer_per_pai: BTreeMap<String, Fraction>,
    /// Worst instrument.
    pub apcer: Fraction,
    pub bpcer: Fraction,
    pub acer: Fraction,
    pub frr: Fraction,
    /// Acceptance rate over all attacks pooled.
    pub far: Fraction,
    pub hter: Fraction,
    pub live_count: u64,
    pub attack_counts: BTreeMap<String, u64>,
}

impl MetricsReport {
    pub fn attack_count(&self) -> u64 {
        self.attack_counts.values().sum()
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "threshold  {:.6}", self.threshold)?;
        writeln!(f, "live       {}", self.live_count)?;
        for (pai, n) in &self.attack_counts {
            writeln!(f, "attack     {n} ({pai}, APCER {:.4}%)", percent(self.apcer_per_pai[pai]))?;
        }
        writeln!(f, "APCER      {:.4}%", percent(self.apcer))?;
        writeln!(f, "BPCER      {:.4}%", percent(self.bpcer))?;
        writeln!(f, "ACER       {:.4}%", percent(self.acer))?;
        writeln!(f, "FRR        {:.4}%", percent(self.frr))?;
        writeln!(f, "FAR        {:.4}%", percent(self.far))?;
        write!(f, "HTER       {:.4}%", percent(self.hter))
    }
}

/// All rates at one operating threshold.
pub fn compute_metrics(records: &[ScoreRecord], threshold: f64) -> Result<MetricsReport> {
    let mut live = 0u64;
    let mut live_rejected = 0u64;
    let mut attacks: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for r in records {
        match &r.label {
            Label::Live => {
                live += 1;
                if !r.accepted(threshold) {
                    live_rejected += 1;
                }
            }
            Label::Attack(pai) => {
                let e = attacks.entry(pai.clone()).or_default();
                e.0 += 1;
                if r.accepted(threshold) {
                    e.1 += 1;
                }
            }
        }
    }
    if live == 0 {
        return Err(Error::MissingClass("live"));
    }
    if attacks.is_empty() {
        return Err(Error::MissingClass("attack"));
    }
    let apcer_per_pai: BTreeMap<String, Fraction> = attacks
        .iter()
        .map(|(k, &(n, acc))| (k.clone(), Fraction::new(acc, n)))
        .collect();
    let apcer = *apcer_per_pai.values().max().expect("nonempty");
    let bpcer = Fraction::new(live_rejected, live);
    let total_attacks: u64 = attacks.values().map(|v| v.0).sum();
    let accepted_attacks: u64 = attacks.values().map(|v| v.1).sum();
    let far = Fraction::new(accepted_attacks, total_attacks);
    let half = Fraction::new(1, 2);
    Ok(MetricsReport {
        threshold,
        apcer,
        bpcer,
        acer: (apcer + bpcer) * half,
        frr: bpcer,
        far,
        hter: (bpcer + far) * half,
        apcer_per_pai,
        live_count: live,
        attack_counts: attacks.into_iter().map(|(k, v)| (k, v.0)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    pub points: Vec<MetricsReport>,
    /// Index into `points` minimising `|FAR - FRR|`, first on ties.
    pub eer_index: usize,
    /// Every score is identical; the single point sits at that score.
    pub degenerate: bool,
}

impl ThresholdSweep {
    pub fn eer(&self) -> &MetricsReport {
        &self.points[self.eer_index]
    }
}

fn abs_diff(a: Fraction, b: Fraction) -> Fraction {
    if a >= b {
        a - b
    } else {
        b - a
    }
}

/// Evaluates every midpoint between consecutive distinct scores.
pub fn sweep_thresholds(records: &[ScoreRecord]) -> Result<ThresholdSweep> {
    let mut scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    if scores.len() < 2 {
        let t = scores.first().copied().unwrap_or(0.0);
        return Ok(ThresholdSweep {
            points: vec![compute_metrics(records, t)?],
            eer_index: 0,
            degenerate: true,
        });
    }
    let points = scores
        .windows(2)
        .map(|w| compute_metrics(records, w[0] + (w[1] - w[0]) / 2.0))
        .collect::<Result<Vec<_>>>()?;
    let mut eer_index = 0;
    for (i, p) in points.iter().enumerate() {
        if abs_diff(p.far, p.frr) < abs_diff(points[eer_index].far, points[eer_index].frr) {
            eer_index = i;
        }
    }
    Ok(ThresholdSweep {
        points,
        eer_index,
        degenerate: false,
    })
}

/// `beta * live_prob + (1 - beta) * mean_t(masked mean of map_t)`.
pub fn fuse_score(maps: &[DepthMap], masks: &[Mask], live_prob: f64, beta: f64) -> Result<f64> {
    if maps.is_empty() || maps.len() != masks.len() {
        return Err(invalid(format!(
            "need one mask per map and at least one map, got {} maps and {} masks",
            maps.len(),
            masks.len()
        )));
    }
    if !(0.0..=1.0).contains(&beta) || !(0.0..=1.0).contains(&live_prob) {
        return Err(invalid(format!("beta {beta} and live probability {live_prob} must lie in [0, 1]")));
    }
    let mut depth_term = 0.0;
    for (map, mask) in maps.iter().zip(masks) {
        if mask.size() != map.size() {
            return Err(invalid(format!("mask side {} does not match map side {}", mask.size(), map.size())));
        }
        let area = mask.area();
        if area == 0 {
            return Err(Error::EmptyMask);
        }
        let masked: f64 = map
            .data()
            .iter()
            .zip(mask.cells())
            .filter(|(_, &m)| m)
            .map(|(d, _)| d.abs())
            .sum();
        depth_term += masked / area as f64;
    }
    depth_term /= maps.len() as f64;
    Ok(beta * live_prob + (1.0 - beta) * depth_term)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    sample_id: String,
    label: String,
    pai: String,
    score: f64,
}

const SCORE_HEADER: [&str; 4] = ["sample_id", "label", "pai", "score"];

/// Reads `sample_id,label,pai,score` rows; `pai` is empty for live samples.
pub fn read_scores(reader: impl Read) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != SCORE_HEADER {
        return Err(Error::Format(format!(
            "score file header must be {}, got {}",
            SCORE_HEADER.join(","),
            header.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<ScoreRow>().enumerate() {
        let row = row.map_err(|e| Error::Format(format!("score row {}: {e}", i + 1)))?;
        let label = match (row.label.as_str(), row.pai.is_empty()) {
            ("live", true) => Label::Live,
            ("attack", false) => Label::Attack(row.pai),
            _ => {
                return Err(Error::Format(format!(
                    "score row {}: label must be live with empty pai or attack with a pai",
                    i + 1
                )))
            }
        };
        out.push(ScoreRecord::new(row.sample_id, label, row.score).map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_scores(writer: impl Write, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        let (label, pai) = match &r.label {
            Label::Live => ("live".to_owned(), String::new()),
            Label::Attack(p) => ("attack".to_owned(), p.clone()),
        };
        w.serialize(ScoreRow {
            sample_id: r.sample_id.clone(),
            label,
            pai,
            score: r.score,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// One CSV row per report: threshold, rates in percent, and per-instrument APCER.
pub fn write_reports(writer: impl Write, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let pais: Vec<String> = reports
        .first()
        .map(|r| r.apcer_per_pai.keys().cloned().collect())
        .unwrap_or_default();
    let mut header = vec!["threshold", "apcer", "bpcer", "acer", "frr", "far", "hter"]
        .into_iter()
        .map(str::to_owned)
        .collect::<Vec<_>>();
    header.extend(pais.iter().map(|p| format!("apcer_{p}")));
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.threshold.to_string()];
        row.extend([r.apcer, r.bpcer, r.acer, r.frr, r.far, r.hter].map(|x| percent(x).to_string()));
        row.extend(pais.iter().map(|p| percent(r.apcer_per_pai[p]).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
