//! Workload characterization: distribution fitting over trace statistics,
//! advisor-assisted refinement of poor fits, and similarity scoring.

mod family;
mod fit;
mod stats;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advisor::{Advisor, AdvisorError};
use crate::trace::{Op, TimeWindowSummary, TraceStats};

pub use family::{generalized_harmonic, DistributionFamily, FamilyTag};
pub use fit::{
    empirical_from_sorted, evaluate_candidates, fit_candidates, fit_family, rank_fits, DistributionFit, EcdfGrid,
    MIN_FIT_SAMPLES, R2_TIE_TOLERANCE,
};
pub use stats::{
    erf, erfc, kolmogorov_q, ks_two_sample, normal_cdf, profile_similarity, quantile_profile, r_squared,
    SimilarityReport, KS_MIN_SAMPLES, PROFILE_POINTS,
};

/// Best-fit R² below which the advisor is asked for other candidates.
pub const DEFAULT_R2_THRESHOLD: f64 = 0.90;

/// Window rows included in a refinement prompt before stride sampling.
const MAX_PROMPT_WINDOWS: usize = 240;

#[derive(Debug, Error)]
pub enum CharacterizeError {
    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("length mismatch: {observed} observed vs {predicted} predicted")]
    LengthMismatch { observed: usize, predicted: usize },
    #[error("no candidate family could be fitted")]
    FitFailure,
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("samples contain non-finite values")]
    NonFiniteSample,
    #[error("trace statistics are empty")]
    EmptyStats,
    #[error("advisor failed: {0}")]
    Advisor(#[from] AdvisorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FitTarget {
    KeySize,
    ValueSize,
    KeyAccess,
}

impl FitTarget {
    pub const ALL: [FitTarget; 3] = [FitTarget::KeySize, FitTarget::ValueSize, FitTarget::KeyAccess];

    pub fn label(self) -> &'static str {
        match self {
            FitTarget::KeySize => "key_size",
            FitTarget::ValueSize => "value_size",
            FitTarget::KeyAccess => "key_access",
        }
    }

    fn from_label(s: &str) -> Option<FitTarget> {
        let s = s.trim_end_matches(':').to_ascii_lowercase().replace('-', "_");
        FitTarget::ALL.into_iter().find(|t| t.label() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicHint {
    pub period_s: f64,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadCharacterization {
    pub key_size: DistributionFit,
    pub value_size: DistributionFit,
    /// Fitted over key ranks (1 = hottest key), one sample per access.
    pub key_access: DistributionFit,
    pub query_ratios: BTreeMap<Op, f64>,
    pub periodic_hint: Option<PeriodicHint>,
    pub source_windows: Vec<TimeWindowSummary>,
    pub distinct_keys: u64,
    pub total_records: u64,
    pub duration_s: f64,
    pub value_size_stddev: f64,
}

impl WorkloadCharacterization {
    pub fn fit(&self, target: FitTarget) -> &DistributionFit {
        match target {
            FitTarget::KeySize => &self.key_size,
            FitTarget::ValueSize => &self.value_size,
            FitTarget::KeyAccess => &self.key_access,
        }
    }

    fn fit_mut(&mut self, target: FitTarget) -> &mut DistributionFit {
        match target {
            FitTarget::KeySize => &mut self.key_size,
            FitTarget::ValueSize => &mut self.value_size,
            FitTarget::KeyAccess => &mut self.key_access,
        }
    }

    /// Short multi-line description used in tuning prompts.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let ratios: Vec<String> = self
            .query_ratios
            .iter()
            .map(|(op, r)| format!("{op}={r:.4}"))
            .collect();
        let _ = writeln!(s, "query_ratios: {}", ratios.join(" "));
        for t in FitTarget::ALL {
            let f = self.fit(t);
            let _ = writeln!(s, "{}: {} (r2={:.4})", t.label(), f.family, f.r_squared);
        }
        let _ = writeln!(s, "distinct_keys: {}", self.distinct_keys);
        let _ = writeln!(s, "value_size_stddev: {:.2}", self.value_size_stddev);
        if let Some(h) = &self.periodic_hint {
            let _ = writeln!(s, "periodic: every {}s, {}", h.period_s, h.description);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct CharacterizeConfig {
    pub candidates: Vec<FamilyTag>,
    pub r2_threshold: f64,
}

impl Default for CharacterizeConfig {
    fn default() -> Self {
        CharacterizeConfig {
            candidates: FamilyTag::PARAMETRIC.to_vec(),
            r2_threshold: DEFAULT_R2_THRESHOLD,
        }
    }
}

fn expand_histogram(hist: &BTreeMap<u64, u64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(hist.values().sum::<u64>() as usize);
    for (v, c) in hist {
        out.extend(std::iter::repeat_n(*v as f64, *c as usize));
    }
    out
}

/// Samples underlying one fit target: sizes from the histograms, and for key
/// access one rank per access after ordering keys by descending count.
pub fn target_samples(stats: &TraceStats, target: FitTarget) -> Vec<f64> {
    match target {
        FitTarget::KeySize => expand_histogram(&stats.key_size_histogram),
        FitTarget::ValueSize => expand_histogram(&stats.value_size_histogram),
        FitTarget::KeyAccess => rank_samples(&stats.ranked_access_counts()),
    }
}

/// One sample per access, valued at the (1-based) rank of the accessed key.
pub fn rank_samples(ranked_counts: &[u64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ranked_counts.iter().sum::<u64>() as usize);
    for (i, c) in ranked_counts.iter().enumerate() {
        out.extend(std::iter::repeat_n((i + 1) as f64, *c as usize));
    }
    out
}

fn fit_target(samples: &[f64], candidates: &[FamilyTag]) -> Result<DistributionFit, CharacterizeError> {
    if samples.is_empty() {
        return Ok(DistributionFit {
            family: DistributionFamily::Fixed { value: 0.0 },
            r_squared: 1.0,
            sample_count: 0,
        });
    }
    if samples.len() < MIN_FIT_SAMPLES {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let family = empirical_from_sorted(&sorted);
        let r_squared = EcdfGrid::from_sorted(&sorted).score(&family);
        return Ok(DistributionFit {
            family,
            r_squared,
            sample_count: samples.len(),
        });
    }
    fit_candidates(samples, candidates)
}

fn std_dev(hist: &BTreeMap<u64, u64>) -> f64 {
    let n: u64 = hist.values().sum();
    if n == 0 {
        return 0.0;
    }
    let mean = hist.iter().map(|(v, c)| *v as f64 * *c as f64).sum::<f64>() / n as f64;
    let var = hist
        .iter()
        .map(|(v, c)| (*v as f64 - mean).powi(2) * *c as f64)
        .sum::<f64>()
        / n as f64;
    var.sqrt()
}

/// Fits key sizes, value sizes and key-access ranks with the default
/// candidate set.
pub fn characterize(
    stats: &TraceStats,
    windows: &[TimeWindowSummary],
) -> Result<WorkloadCharacterization, CharacterizeError> {
    characterize_with(stats, windows, &CharacterizeConfig::default())
}

pub fn characterize_with(
    stats: &TraceStats,
    windows: &[TimeWindowSummary],
    cfg: &CharacterizeConfig,
) -> Result<WorkloadCharacterization, CharacterizeError> {
    if stats.total_records == 0 {
        return Err(CharacterizeError::EmptyStats);
    }
    let key_size = fit_target(&target_samples(stats, FitTarget::KeySize), &cfg.candidates)?;
    let value_size = fit_target(&target_samples(stats, FitTarget::ValueSize), &cfg.candidates)?;
    let key_access = fit_target(&target_samples(stats, FitTarget::KeyAccess), &cfg.candidates)?;
    Ok(WorkloadCharacterization {
        key_size,
        value_size,
        key_access,
        query_ratios: stats.op_ratios.clone(),
        periodic_hint: None,
        source_windows: windows.to_vec(),
        distinct_keys: stats.distinct_keys(),
        total_records: stats.total_records,
        duration_s: stats.duration_us as f64 / 1e6,
        value_size_stddev: std_dev(&stats.value_size_histogram),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilySuggestion {
    /// `None` applies the suggestion to every failed target.
    pub target: Option<FitTarget>,
    pub tag: FamilyTag,
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Suggestion {
    Family(FamilySuggestion),
    Periodic(PeriodicHint),
}

/// Renders the refinement prompt: condensed windows plus the failed fits.
pub fn build_refine_prompt(windows: &[TimeWindowSummary], failed: &[(FitTarget, DistributionFit)]) -> String {
    let mut p = String::new();
    p.push_str("You are an expert in storage workload analysis.\n");
    p.push_str("Local curve fitting could not describe some distributions of this key-value workload.\n");
    p.push_str("Suggest distribution families that fit better and any periodic pattern you see.\n\n");
    p.push_str("## Failed fits\n");
    for (target, fit) in failed {
        let _ = writeln!(
            p,
            "{}: best {} r2={:.4} samples={}",
            target.label(),
            fit.family,
            fit.r_squared,
            fit.sample_count
        );
    }
    let stride = windows.len().div_ceil(MAX_PROMPT_WINDOWS).max(1);
    let _ = writeln!(p, "\n## Time-windowed trace (every {stride} window(s))");
    p.push_str("start_s,len_s,put,get,delete,seek,merge,accesses,distinct_keys,key_mean,key_median,key_mode,value_mean,value_median,value_mode\n");
    for w in windows.iter().step_by(stride) {
        let c = |op| w.op_counts.get(&op).copied().unwrap_or(0);
        let _ = writeln!(
            p,
            "{},{},{},{},{},{},{},{},{},{:.1},{:.1},{:.1},{:.1},{:.1},{:.1}",
            w.window_start_us as f64 / 1e6,
            w.window_len_us as f64 / 1e6,
            c(Op::Put),
            c(Op::Get),
            c(Op::Delete),
            c(Op::Seek),
            c(Op::Merge),
            w.total_accesses,
            w.distinct_keys,
            w.key_size_stats.mean,
            w.key_size_stats.median,
            w.key_size_stats.mode,
            w.value_size_stats.mean,
            w.value_size_stats.median,
            w.value_size_stats.mode,
        );
    }
    p.push_str("\n## Output format\n");
    p.push_str("One suggestion per line: `<target>: <family> <param>=<value> ...` where target is one of\n");
    p.push_str("key_size, value_size, key_access and family is one of fixed(value), uniform(min,max),\n");
    p.push_str("zipfian(s,n), pareto(shape,scale), exponential(rate), two_term_exponential(a,b,c,d), normal(mu,sigma).\n");
    p.push_str("For a periodic pattern add a line `periodic period_s=<seconds> <description>`.\n");
    p
}

/// Asks the advisor for alternative families for poorly fitted targets.
///
/// The returned suggestions are untrusted; [`refine_fit`] re-scores them
/// against the observed samples before any is accepted.
pub fn advisor_refine(
    windows: &[TimeWindowSummary],
    failed: &[(FitTarget, DistributionFit)],
    advisor: &mut dyn Advisor,
) -> Result<Vec<Suggestion>, CharacterizeError> {
    if failed.is_empty() {
        return Ok(Vec::new());
    }
    let prompt = build_refine_prompt(windows, failed);
    let reply = advisor.complete(&prompt)?;
    Ok(parse_suggestions(&reply))
}

/// Parses free-text suggestions, skipping lines that name no known family.
pub fn parse_suggestions(text: &str) -> Vec<Suggestion> {
    let mut out = Vec::new();
    for raw in text.lines() {
        let line = raw.trim().trim_start_matches(['-', '*', ' ']).trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',' || c == '(' || c == ')')
            .filter(|t| !t.is_empty())
            .collect();
        let params = parse_params(&tokens);
        let lower = line.to_ascii_lowercase();
        if lower.starts_with("periodic") || lower.starts_with("period ") {
            let period = params.get("period_s").or_else(|| params.get("period")).copied();
            if let Some(period_s) = period.filter(|p| *p > 0.0) {
                let description = tokens
                    .iter()
                    .skip(1)
                    .filter(|t| !t.contains('='))
                    .copied()
                    .collect::<Vec<_>>()
                    .join(" ");
                out.push(Suggestion::Periodic(PeriodicHint { period_s, description }));
            } else {
                debug!("unparseable periodic suggestion: {line}");
            }
            continue;
        }
        let target = tokens.first().and_then(|t| FitTarget::from_label(t));
        match find_family(&tokens) {
            Some(tag) => out.push(Suggestion::Family(FamilySuggestion { target, tag, params })),
            None => debug!("no family in advisor line: {line}"),
        }
    }
    out
}

fn parse_params(tokens: &[&str]) -> BTreeMap<String, f64> {
    tokens
        .iter()
        .filter_map(|t| {
            let (k, v) = t.split_once('=')?;
            let v = v.trim_end_matches(|c: char| c.is_ascii_alphabetic() && c != 'e');
            Some((k.trim().to_ascii_lowercase(), v.trim().parse::<f64>().ok()?))
        })
        .collect()
}

fn find_family(tokens: &[&str]) -> Option<FamilyTag> {
    let words: Vec<&str> = tokens.iter().filter(|t| !t.contains('=')).copied().collect();
    for i in 0..words.len() {
        for span in (1..=3).rev() {
            if i + span > words.len() {
                continue;
            }
            let joined = words[i..i + span].join("");
            if let Some(tag) = FamilyTag::from_loose(&joined) {
                if tag != FamilyTag::Empirical {
                    return Some(tag);
                }
            }
        }
    }
    None
}

/// Re-scores advisor suggestions against the samples. A suggestion is
/// considered both with its stated parameters and re-estimated locally; the
/// current fit is kept unless a suggestion ranks above it.
pub fn refine_fit(samples: &[f64], current: &DistributionFit, suggestions: &[FamilySuggestion]) -> DistributionFit {
    if samples.len() < MIN_FIT_SAMPLES || suggestions.is_empty() {
        return current.clone();
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let grid = EcdfGrid::from_sorted(&sorted);
    let mut fits = vec![current.clone()];
    for s in suggestions {
        let mut fams = Vec::new();
        if let Some(f) = DistributionFamily::from_params(s.tag, &s.params) {
            fams.push(f);
        }
        if let Some(f) = fit_family(s.tag, &sorted, &grid) {
            fams.push(f);
        }
        for family in fams.into_iter().filter(|f| f.validate().is_ok()) {
            let r_squared = grid.score(&family);
            if r_squared.is_nan() {
                continue;
            }
            fits.push(DistributionFit {
                family,
                r_squared,
                sample_count: samples.len(),
            });
        }
    }
    rank_fits(&mut fits);
    fits.swap_remove(0)
}

/// [`characterize_with`] followed by advisor refinement of every fit below
/// the threshold. Targets still below the threshold afterwards, or when the
/// advisor is unavailable, fall back to the empirical distribution.
pub fn characterize_with_advisor(
    stats: &TraceStats,
    windows: &[TimeWindowSummary],
    cfg: &CharacterizeConfig,
    advisor: &mut dyn Advisor,
) -> Result<WorkloadCharacterization, CharacterizeError> {
    let mut ch = characterize_with(stats, windows, cfg)?;
    let failed: Vec<(FitTarget, DistributionFit)> = FitTarget::ALL
        .into_iter()
        .filter(|t| ch.fit(*t).r_squared < cfg.r2_threshold)
        .map(|t| (t, ch.fit(t).clone()))
        .collect();
    if failed.is_empty() {
        return Ok(ch);
    }
    let suggestions = match advisor_refine(windows, &failed, advisor) {
        Ok(s) => s,
        Err(CharacterizeError::Advisor(e)) => {
            warn!("advisor unavailable for characterization refinement: {e}");
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    for s in &suggestions {
        if let Suggestion::Periodic(h) = s {
            ch.periodic_hint = Some(h.clone());
        }
    }
    for (target, current) in failed {
        let samples = target_samples(stats, target);
        let relevant: Vec<FamilySuggestion> = suggestions
            .iter()
            .filter_map(|s| match s {
                Suggestion::Family(f) if f.target.is_none() || f.target == Some(target) => Some(f.clone()),
                _ => None,
            })
            .collect();
        let mut refined = refine_fit(&samples, &current, &relevant);
        if refined.r_squared < cfg.r2_threshold && samples.len() >= MIN_FIT_SAMPLES {
            let mut sorted = samples.clone();
            sorted.sort_by(f64::total_cmp);
            let family = empirical_from_sorted(&sorted);
            refined = DistributionFit {
                r_squared: EcdfGrid::from_sorted(&sorted).score(&family),
                family,
                sample_count: samples.len(),
            };
        }
        *ch.fit_mut(target) = refined;
    }
    Ok(ch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{aggregate_stats, summarize_windows, TraceRecord};

    #[test]
    fn parses_family_lines() {
        let s = parse_suggestions("value_size: normal mu=100 sigma=10\n- two-term exponential a=1 b=-0.5 c=0 d=-1\nhello");
        assert_eq!(s.len(), 2);
        match &s[0] {
            Suggestion::Family(f) => {
                assert_eq!(f.target, Some(FitTarget::ValueSize));
                assert_eq!(f.tag, FamilyTag::Normal);
                assert_eq!(f.params["mu"], 100.0);
            }
            other => panic!("{other:?}"),
        }
        match &s[1] {
            Suggestion::Family(f) => {
                assert_eq!(f.target, None);
                assert_eq!(f.tag, FamilyTag::TwoTermExponential);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parses_periodic_hint() {
        let s = parse_suggestions("periodic period_s=300 write-heavy then read-heavy");
        assert_eq!(
            s,
            vec![Suggestion::Periodic(PeriodicHint {
                period_s: 300.0,
                description: "write-heavy then read-heavy".into()
            })]
        );
    }

    #[test]
    fn single_op_trace_echoes_stats() {
        let recs: Vec<_> = (0..200u64)
            .map(|i| TraceRecord::new(i * 1000, Op::Get, format!("{:08}", i % 20).into_bytes(), 0))
            .collect();
        let stats = aggregate_stats(&recs).unwrap();
        let windows = summarize_windows(&recs, 100_000).unwrap();
        let ch = characterize(&stats, &windows).unwrap();
        assert_eq!(ch.query_ratios, stats.op_ratios);
        assert_eq!(ch.key_size.family, DistributionFamily::Fixed { value: 8.0 });
        assert_eq!(ch.value_size.sample_count, 0);
        assert_eq!(ch.distinct_keys, 20);
        assert_eq!(ch.total_records, 200);
        assert_eq!(ch.source_windows, windows);
        // every key accessed equally often: a flat rank curve
        match ch.key_access.family {
            DistributionFamily::Uniform { .. } => {}
            DistributionFamily::Zipfian { s, .. } => assert!(s < 0.05, "s={s}"),
            ref other => panic!("unexpected access family {other}"),
        }
    }

    #[test]
    fn rank_samples_expand_counts() {
        assert_eq!(rank_samples(&[3, 1]), vec![1.0, 1.0, 1.0, 2.0]);
    }
}
