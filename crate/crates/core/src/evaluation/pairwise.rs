//! Blind pairwise comparison: task construction, judgment import and the
//! preference analysis.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::stats::{binomial_preference_test, cohens_kappa, BinomialResult};
use super::EvalError;
use crate::corpus::Speaker;
use crate::generator::Condition;
use crate::numerics::SeedStream;

pub const FLOW_BINS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Left,
    Right,
    Tie,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    Empathy,
    Relevance,
    Safety,
    Fluency,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::Empathy, Criterion::Relevance, Criterion::Safety, Criterion::Fluency];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub speaker: Speaker,
    pub text: String,
}

/// What the judge sees. Carries no condition identifiers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTask {
    pub task_id: String,
    pub history: Vec<HistoryTurn>,
    pub response_left: String,
    pub response_right: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat_of: Option<String>,
}

/// Which condition sits on which side of a task; kept apart from the tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_id: String,
    pub point_id: String,
    pub left: Condition,
    pub right: Condition,
    pub normalized_position: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat_of: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMap {
    pub seed: u64,
    pub pair: (Condition, Condition),
    pub assignments: Vec<Assignment>,
}

/// One point offered for comparison, with each condition's response.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseSource {
    pub point_id: String,
    pub history: Vec<HistoryTurn>,
    pub normalized_position: f64,
    pub responses: BTreeMap<Condition, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseBundle {
    pub tasks: Vec<PairwiseTask>,
    pub map: AssignmentMap,
}

/// Builds one task per point with a seeded left/right order, plus a
/// `repeat_fraction` share of repeated tasks with a fresh order, and
/// shuffles the lot.
pub fn build_pairwise_tasks(
    points: &[PairwiseSource],
    pair: (Condition, Condition),
    repeat_fraction: f64,
    seed: u64,
) -> Result<PairwiseBundle, EvalError> {
    if points.is_empty() {
        return Err(EvalError::Invalid("no points to compare".into()));
    }
    if !(0.0..=0.5).contains(&repeat_fraction) {
        return Err(EvalError::Invalid(format!("repeat fraction {repeat_fraction} outside [0, 0.5]")));
    }
    if pair.0 == pair.1 {
        return Err(EvalError::Invalid("a condition cannot be compared with itself".into()));
    }
    let seeds = SeedStream::new(seed).child("pairwise");
    let mut sides = seeds.keyed("sides", 0);
    let mut entries: Vec<(usize, bool, Option<usize>)> = Vec::new();
    for i in 0..points.len() {
        for c in [pair.0, pair.1] {
            if !points[i].responses.contains_key(&c) {
                return Err(EvalError::Invalid(format!("point {} has no {c} response", points[i].point_id)));
            }
        }
        entries.push((i, sides.random_bool(0.5), None));
    }
    let repeats = (repeat_fraction * points.len() as f64).round() as usize;
    let picks: Vec<usize> = (0..points.len()).collect::<Vec<_>>().choose_multiple(&mut seeds.keyed("repeats", 0), repeats).copied().collect();
    for i in picks {
        entries.push((i, sides.random_bool(0.5), Some(i)));
    }
    entries.shuffle(&mut seeds.keyed("order", 0));

    let width = entries.len().to_string().len().max(4);
    let mut primary_id: BTreeMap<usize, String> = BTreeMap::new();
    for (n, e) in entries.iter().enumerate() {
        if e.2.is_none() {
            primary_id.insert(e.0, format!("task-{n:0width$}"));
        }
    }
    let mut tasks = Vec::with_capacity(entries.len());
    let mut assignments = Vec::with_capacity(entries.len());
    for (n, &(i, swap, rep)) in entries.iter().enumerate() {
        let p = &points[i];
        let (left, right) = if swap { (pair.1, pair.0) } else { (pair.0, pair.1) };
        let task_id = format!("task-{n:0width$}");
        let repeat_of = rep.map(|r| primary_id[&r].clone());
        tasks.push(PairwiseTask {
            task_id: task_id.clone(),
            history: p.history.clone(),
            response_left: p.responses[&left].clone(),
            response_right: p.responses[&right].clone(),
            repeat_of: repeat_of.clone(),
        });
        assignments.push(Assignment {
            task_id,
            point_id: p.point_id.clone(),
            left,
            right,
            normalized_position: p.normalized_position,
            repeat_of,
        });
    }
    Ok(PairwiseBundle {
        tasks,
        map: AssignmentMap { seed, pair, assignments },
    })
}

/// A judge's answer to one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub task_id: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub criteria: Vec<Criterion>,
}

/// Outcome from the point of view of the first condition of the pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub win_percent: f64,
    pub loss_percent: f64,
    pub tie_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionRates {
    pub cases: usize,
    /// Percentage of winning cases citing each criterion.
    pub rates: BTreeMap<Criterion, f64>,
    pub all_four_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgmentReport {
    pub focus: Condition,
    pub baseline: Condition,
    pub judged: usize,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Shares in percent, rounded to one decimal.
    pub win_percent: f64,
    pub loss_percent: f64,
    pub tie_percent: f64,
    pub focus_criteria: CriterionRates,
    pub baseline_criteria: CriterionRates,
    pub binomial: Option<BinomialResult<f64>>,
    pub repeats: usize,
    pub kappa: Option<f64>,
    pub kappa_undefined: bool,
    pub flow: Vec<FlowBin>,
}

fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

/// Bin index for a normalized position: `(0, 0.2]` is bin 0 and so on,
/// with position 0 joining the first bin.
pub fn flow_bin(position: f64) -> usize {
    ((position * FLOW_BINS as f64).ceil() as usize).clamp(1, FLOW_BINS) - 1
}

fn criterion_rates(cases: &[&Judgment]) -> CriterionRates {
    let mut rates = BTreeMap::new();
    for c in Criterion::ALL {
        let n = cases.iter().filter(|j| j.criteria.contains(&c)).count();
        rates.insert(c, round_to(percent(n, cases.len()), 2));
    }
    let all = cases
        .iter()
        .filter(|j| Criterion::ALL.iter().all(|c| j.criteria.contains(c)))
        .count();
    CriterionRates {
        cases: cases.len(),
        rates,
        all_four_percent: round_to(percent(all, cases.len()), 1),
    }
}

/// Validates judgments against the assignment map and summarizes them from
/// the point of view of the map's first condition.
pub fn analyze_judgments(map: &AssignmentMap, judgments: &[Judgment]) -> Result<JudgmentReport, EvalError> {
    let by_task: BTreeMap<&str, &Assignment> = map.assignments.iter().map(|a| (a.task_id.as_str(), a)).collect();
    let (focus, baseline) = map.pair;
    let mut seen = BTreeSet::new();
    let mut outcome: BTreeMap<&str, Outcome> = BTreeMap::new();
    for j in judgments {
        let a = by_task
            .get(j.task_id.as_str())
            .ok_or_else(|| EvalError::Invalid(format!("judgment for unknown task {}", j.task_id)))?;
        if !seen.insert(j.task_id.as_str()) {
            return Err(EvalError::Duplicate(j.task_id.clone()));
        }
        if j.verdict != Verdict::Tie && j.criteria.is_empty() {
            return Err(EvalError::Invalid(format!("task {}: a preference must cite at least one criterion", j.task_id)));
        }
        let winner = match j.verdict {
            Verdict::Left => Some(a.left),
            Verdict::Right => Some(a.right),
            Verdict::Tie => None,
        };
        outcome.insert(
            a.task_id.as_str(),
            match winner {
                None => Outcome::Tie,
                Some(c) if c == focus => Outcome::Win,
                Some(_) => Outcome::Loss,
            },
        );
    }
    let mut primaries = Vec::new();
    let mut pairs = Vec::new();
    for j in judgments {
        let a = by_task[j.task_id.as_str()];
        match &a.repeat_of {
            None => primaries.push((j, a)),
            Some(p) => {
                let first = outcome
                    .get(p.as_str())
                    .ok_or_else(|| EvalError::Invalid(format!("repeat {} judged without its primary {p}", j.task_id)))?;
                pairs.push((*first, outcome[j.task_id.as_str()]));
            }
        }
    }
    let of = |o: Outcome| primaries.iter().filter(|(j, _)| outcome[j.task_id.as_str()] == o).count();
    let (wins, losses, ties) = (of(Outcome::Win), of(Outcome::Loss), of(Outcome::Tie));
    let judged = primaries.len();
    let focus_wins: Vec<&Judgment> = primaries.iter().filter(|(j, _)| outcome[j.task_id.as_str()] == Outcome::Win).map(|(j, _)| *j).collect();
    let base_wins: Vec<&Judgment> = primaries.iter().filter(|(j, _)| outcome[j.task_id.as_str()] == Outcome::Loss).map(|(j, _)| *j).collect();

    let mut flow: Vec<FlowBin> = (0..FLOW_BINS)
        .map(|b| FlowBin {
            lower: b as f64 / FLOW_BINS as f64,
            upper: (b + 1) as f64 / FLOW_BINS as f64,
            count: 0,
            wins: 0,
            losses: 0,
            ties: 0,
            win_percent: 0.0,
            loss_percent: 0.0,
            tie_percent: 0.0,
        })
        .collect();
    for (j, a) in &primaries {
        let bin = &mut flow[flow_bin(a.normalized_position)];
        bin.count += 1;
        match outcome[j.task_id.as_str()] {
            Outcome::Win => bin.wins += 1,
            Outcome::Loss => bin.losses += 1,
            Outcome::Tie => bin.ties += 1,
        }
    }
    for b in &mut flow {
        b.win_percent = round_to(percent(b.wins, b.count), 1);
        b.loss_percent = round_to(percent(b.losses, b.count), 1);
        b.tie_percent = round_to(percent(b.ties, b.count), 1);
    }

    let (kappa, kappa_undefined) = if pairs.is_empty() {
        (None, true)
    } else {
        let (a, b): (Vec<Outcome>, Vec<Outcome>) = pairs.into_iter().unzip();
        match cohens_kappa::<_, f64>(&a, &b) {
            Ok(k) => (Some(k), false),
            Err(_) => (None, true),
        }
    };
    Ok(JudgmentReport {
        focus,
        baseline,
        judged,
        wins,
        losses,
        ties,
        win_percent: round_to(percent(wins, judged), 1),
        loss_percent: round_to(percent(losses, judged), 1),
        tie_percent: round_to(percent(ties, judged), 1),
        focus_criteria: criterion_rates(&focus_wins),
        baseline_criteria: criterion_rates(&base_wins),
        binomial: binomial_preference_test(wins as u64, losses as u64, ties as u64).ok(),
        repeats: judgments.len() - judged,
        kappa,
        kappa_undefined,
        flow,
    })
}

impl JudgmentReport {
    /// Preference-flow bins as CSV.
    pub fn flow_csv(&self) -> String {
        let mut s = String::from("lower,upper,count,wins,losses,ties,win_percent,loss_percent,tie_percent\n");
        for b in &self.flow {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                b.lower, b.upper, b.count, b.wins, b.losses, b.ties, b.win_percent, b.loss_percent, b.tie_percent
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_are_right_closed_with_zero_in_the_first() {
        assert_eq!(flow_bin(0.0), 0);
        assert_eq!(flow_bin(0.2), 0);
        assert_eq!(flow_bin(0.2000001), 1);
        assert_eq!(flow_bin(0.8), 3);
        assert_eq!(flow_bin(1.0), 4);
    }
}
