//! Verification scoring and detection metrics.
//!
//! A trial is accepted when `score ≥ θ`. Sweeping θ over every distinct
//! score, plus `+∞`, walks the operating points from (false alarm 1, miss 0)
//! to (0, 1); EER, minDCF and the DET curve are all read off that sweep.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine_score", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding("cosine score of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

/// Parses `label enroll_id test_id` lines, label 1 (target) or 0.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [label, enroll, test] = fields[..] else {
            return Err(Error::Parse(format!(
                "trial line {}: expected `label enroll test`",
                n + 1
            )));
        };
        let target = match label {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse(format!(
                    "trial line {}: label must be 1 or 0, got `{other}`",
                    n + 1
                )))
            }
        };
        out.push(Trial {
            target,
            enroll: enroll.to_string(),
            test: test.to_string(),
        });
    }
    Ok(out)
}

/// Every same-speaker pair plus random different-speaker pairs, up to
/// `total` trials (or all pairs if fewer exist). `utterances` holds
/// `(speaker, utterance_id)`.
pub fn make_trials(utterances: &[(String, String)], total: usize, seed: u64) -> Vec<Trial> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for (i, (si, a)) in utterances.iter().enumerate() {
        for (sj, b) in &utterances[i + 1..] {
            let t = Trial {
                target: si == sj,
                enroll: a.clone(),
                test: b.clone(),
            };
            if t.target {
                targets.push(t);
            } else {
                nontargets.push(t);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nontargets.shuffle(&mut rng);
    nontargets.truncate(total.saturating_sub(targets.len()));
    let mut all = targets;
    all.extend(nontargets);
    all.shuffle(&mut rng);
    all
}

pub fn load_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    parse_trials(&std::fs::read_to_string(path)?)
}

pub fn trials_to_text(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", u8::from(t.target), t.enroll, t.test);
    }
    s
}

/// Embeddings keyed by utterance id, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    rows: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: String, v: Vec<f64>) -> Result<()> {
        if id.is_empty() || id.contains(',') || id.contains('\n') {
            return Err(Error::Parse(format!(
                "utterance id `{id}` cannot be stored (empty, or contains a comma or newline)"
            )));
        }
        if let Some(first) = self.rows.first() {
            if first.1.len() != v.len() {
                return Err(Error::dim("embedding table", &[first.1.len()], &[v.len()]));
            }
        }
        if self.index.contains_key(&id) {
            return Err(Error::Parse(format!("duplicate utterance id `{id}`")));
        }
        self.index.insert(id.clone(), self.rows.len());
        self.rows.push((id, v));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.index
            .get(id)
            .map(|&i| self.rows[i].1.as_slice())
            .ok_or_else(|| Error::Lookup(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[(String, Vec<f64>)] {
        &self.rows
    }

    /// `id,v1,…,vn` per row, values in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (id, v) in &self.rows {
            s.push_str(id);
            for x in v {
                let _ = write!(s, ",{x:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut table = EmbeddingTable::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let id = fields.next().unwrap_or_default().to_string();
            let v = fields
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| {
                        Error::Parse(format!("embedding line {}: bad value `{f}`", n + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if v.is_empty() {
                return Err(Error::Parse(format!("embedding line {}: no values", n + 1)));
            }
            table.insert(id, v)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Scores paired with target (`true`) / nontarget labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    targets: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(Error::dim("score set", &[scores.len()], &[targets.len()]));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Metric(format!("non-finite score {bad}")));
        }
        Ok(ScoreSet { scores, targets })
    }

    pub fn from_classes(target_scores: &[f64], nontarget_scores: &[f64]) -> Result<Self> {
        let scores = [target_scores, nontarget_scores].concat();
        let targets = (0..scores.len()).map(|i| i < target_scores.len()).collect();
        Self::new(scores, targets)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.targets
    }

    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|&&t| t).count()
    }

    pub fn nontarget_count(&self) -> usize {
        self.len() - self.target_count()
    }

    /// Operating points for θ = each distinct score (ascending), then `+∞`.
    fn sweep(&self) -> Result<Vec<OperatingPoint>> {
        let (nt, nn) = (self.target_count(), self.nontarget_count());
        if nt == 0 || nn == 0 {
            return Err(Error::Metric(format!(
                "need both target and nontarget scores, got {nt} and {nn}"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        // everything is accepted at the lowest threshold
        let (mut misses, mut false_alarms) = (0usize, nn);
        let mut points = Vec::with_capacity(self.len() + 1);
        let mut i = 0;
        while i < order.len() {
            let theta = self.scores[order[i]];
            points.push(OperatingPoint {
                threshold: theta,
                fa: false_alarms as f64 / nn as f64,
                miss: misses as f64 / nt as f64,
            });
            while i < order.len() && self.scores[order[i]] == theta {
                if self.targets[order[i]] {
                    misses += 1;
                } else {
                    false_alarms -= 1;
                }
                i += 1;
            }
        }
        points.push(OperatingPoint {
            threshold: f64::INFINITY,
            fa: 0.0,
            miss: 1.0,
        });
        Ok(points)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct OperatingPoint {
    threshold: f64,
    fa: f64,
    miss: f64,
}

pub fn score_trials(trials: &[Trial], table: &EmbeddingTable) -> Result<ScoreSet> {
    if trials.is_empty() {
        return Err(Error::EmptyInput("trial list is empty".into()));
    }
    let mut scores = Vec::with_capacity(trials.len());
    for t in trials {
        scores.push(cosine_score(table.get(&t.enroll)?, table.get(&t.test)?)?);
    }
    ScoreSet::new(scores, trials.iter().map(|t| t.target).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorRate {
    pub rate: f64,
    pub threshold: f64,
}

/// Equal error rate, interpolated linearly between the two operating points
/// that bracket the crossing of the miss and false-alarm curves.
pub fn eer(scores: &ScoreSet) -> Result<ErrorRate> {
    let points = scores.sweep()?;
    let i = points
        .iter()
        .position(|p| p.miss >= p.fa)
        .expect("the +inf point has miss 1 and false alarm 0");
    let hi = points[i];
    if hi.miss == hi.fa || i == 0 {
        return Ok(ErrorRate {
            rate: hi.miss,
            threshold: hi.threshold,
        });
    }
    let lo = points[i - 1];
    // lo has miss < fa, hi has miss > fa
    let alpha = (lo.fa - lo.miss) / ((hi.miss - lo.miss) - (hi.fa - lo.fa));
    let threshold = if hi.threshold.is_finite() {
        lo.threshold + alpha * (hi.threshold - lo.threshold)
    } else {
        lo.threshold
    };
    Ok(ErrorRate {
        rate: lo.miss + alpha * (hi.miss - lo.miss),
        threshold,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DcfParams {
    pub c_fa: f64,
    pub c_miss: f64,
    pub p_target: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            c_fa: 1.0,
            c_miss: 1.0,
            p_target: 0.01,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_fa > 0.0 && self.c_miss > 0.0) {
            return Err(Error::Config("detection costs must be positive".into()));
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::Config(format!(
                "target prior must lie in (0, 1), got {}",
                self.p_target
            )));
        }
        Ok(())
    }

    /// Cost of the better of accepting or rejecting everything.
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    fn cost(&self, miss: f64, fa: f64) -> f64 {
        self.c_miss * miss * self.p_target + self.c_fa * fa * (1.0 - self.p_target)
    }
}

/// Minimum of `C_M·P_miss·P_T + C_FA·P_FA·(1−P_T)` over thresholds
/// (unnormalized).
pub fn min_dcf(scores: &ScoreSet, params: &DcfParams) -> Result<ErrorRate> {
    params.validate()?;
    let points = scores.sweep()?;
    let best = points
        .iter()
        .map(|p| (params.cost(p.miss, p.fa), p.threshold))
        .fold((f64::INFINITY, f64::NAN), |a, b| if b.0 < a.0 { b } else { a });
    Ok(ErrorRate {
        rate: best.0,
        threshold: best.1,
    })
}

/// [`min_dcf`] divided by [`DcfParams::default_cost`].
pub fn min_dcf_normalized(scores: &ScoreSet, params: &DcfParams) -> Result<ErrorRate> {
    let raw = min_dcf(scores, params)?;
    Ok(ErrorRate {
        rate: raw.rate / params.default_cost(),
        ..raw
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub fa: f64,
    pub miss: f64,
    pub probit_fa: f64,
    pub probit_miss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

/// One point per distinct threshold plus `−∞` and `+∞`, in increasing
/// threshold order.
pub fn det_curve(scores: &ScoreSet) -> Result<DetCurve> {
    let sweep = scores.sweep()?;
    let mk = |p: &OperatingPoint| DetPoint {
        threshold: p.threshold,
        fa: p.fa,
        miss: p.miss,
        probit_fa: probit(p.fa),
        probit_miss: probit(p.miss),
    };
    let mut points = vec![mk(&OperatingPoint {
        threshold: f64::NEG_INFINITY,
        fa: 1.0,
        miss: 0.0,
    })];
    points.extend(sweep.iter().map(mk));
    Ok(DetCurve { points })
}

impl DetCurve {
    /// `threshold,fa,miss,probit_fa,probit_miss` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fa,miss,probit_fa,probit_miss\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{:?},{:?},{:?},{:?},{:?}",
                p.threshold, p.fa, p.miss, p.probit_fa, p.probit_miss
            );
        }
        s
    }
}

/// Inverse standard normal CDF (Acklam's rational approximation, relative
/// error below 1.2e-9). Returns `∓∞` at 0 and 1.
pub fn probit(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383_577_518_672_69e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    const LOW: f64 = 0.02425;
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if p < LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - LOW {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub trials: usize,
    pub targets: usize,
    pub nontargets: usize,
    /// Percent.
    pub eer_percent: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_threshold: f64,
    pub dcf_normalized: bool,
    pub dcf: DcfParams,
}

impl MetricsReport {
    pub fn compute(scores: &ScoreSet, dcf: &DcfParams, normalized: bool) -> Result<Self> {
        let e = eer(scores)?;
        let d = if normalized {
            min_dcf_normalized(scores, dcf)?
        } else {
            min_dcf(scores, dcf)?
        };
        Ok(MetricsReport {
            trials: scores.len(),
            targets: scores.target_count(),
            nontargets: scores.nontarget_count(),
            eer_percent: 100.0 * e.rate,
            eer_threshold: e.threshold,
            min_dcf: d.rate,
            min_dcf_threshold: d.threshold,
            dcf_normalized: normalized,
            dcf: *dcf,
        })
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "trials = {}\ntargets = {}\nnontargets = {}\neer_percent = {:.2}\neer_threshold = {}\n\
             min_dcf = {:.4}\nmin_dcf_threshold = {}\ndcf_normalized = {}\n\
             dcf_c_fa = {}\ndcf_c_miss = {}\ndcf_p_target = {}\n",
            self.trials,
            self.targets,
            self.nontargets,
            self.eer_percent,
            self.eer_threshold,
            self.min_dcf,
            self.min_dcf_threshold,
            self.dcf_normalized,
            self.dcf.c_fa,
            self.dcf.c_miss,
            self.dcf.p_target,
        )
    }
}
