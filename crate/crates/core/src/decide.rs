//! Weighted-vote aggregation with leader enhancement and deterministic
//! tie-breaking.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Decision, Label};

/// Leader ballot multiplier when leadership is active.
pub const LEADER_MULTIPLIER: f64 = 1.5;

/// Two tallies (or two ballot weights) closer than this are tied.
pub const TIE_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecideError {
    #[error("no ballots to aggregate")]
    EmptyBallots,
    #[error("ballot weight must be positive, got {0}")]
    NonPositiveWeight(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ballot {
    pub agent_id: String,
    pub label: Label,
    pub base_weight: f64,
    pub effective_weight: f64,
}

impl Ballot {
    pub fn new(
        agent_id: impl Into<String>,
        label: Label,
        base_weight: f64,
        is_leader: bool,
        leadership_active: bool,
    ) -> Result<Self, DecideError> {
        Ok(Self {
            agent_id: agent_id.into(),
            label,
            base_weight,
            effective_weight: effective_weight(base_weight, is_leader, leadership_active)?,
        })
    }
}

pub fn effective_weight(base: f64, is_leader: bool, leadership_active: bool) -> Result<f64, DecideError> {
    if base <= 0.0 || !base.is_finite() {
        return Err(DecideError::NonPositiveWeight(base));
    }
    Ok(if is_leader && leadership_active { base * LEADER_MULTIPLIER } else { base })
}

/// Sums effective weight per label and picks the winner.
///
/// Ties (within [`TIE_EPSILON`]) are broken by, in order:
/// 1. the leader's label, when leadership is active and it is tied;
/// 2. the label of the heaviest ballot cast for a tied label, when every
///    ballot sharing that top weight agrees;
/// 3. the alphabetically first tied label.
pub fn aggregate(
    ballots: &[Ballot],
    leadership_active: bool,
    leader_id: Option<&str>,
) -> Result<Decision, DecideError> {
    if ballots.is_empty() {
        return Err(DecideError::EmptyBallots);
    }
    let mut tallies: BTreeMap<Label, f64> = BTreeMap::new();
    for b in ballots {
        *tallies.entry(b.label).or_insert(0.0) += b.effective_weight;
    }
    let top = tallies.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: BTreeSet<Label> = tallies.iter().filter(|(_, t)| top - **t <= TIE_EPSILON).map(|(l, _)| *l).collect();

    let mut trace = Vec::new();
    let winner = if tied.len() == 1 {
        *tied.iter().next().unwrap()
    } else {
        let names: Vec<String> = tied.iter().map(Label::to_string).collect();
        trace.push(format!("tie among {} at {top:.6}", names.join(",")));
        break_tie(ballots, &tied, leadership_active, leader_id, &mut trace)
    };

    Ok(Decision { winner, tallies, tiebreak_trace: trace, leader_synthesis: None })
}

fn break_tie(
    ballots: &[Ballot],
    tied: &BTreeSet<Label>,
    leadership_active: bool,
    leader_id: Option<&str>,
    trace: &mut Vec<String>,
) -> Label {
    if leadership_active {
        if let Some(leader) = leader_id {
            if let Some(b) = ballots.iter().find(|b| b.agent_id == leader) {
                if tied.contains(&b.label) {
                    trace.push(format!("rule 1 (leader {leader}): {}", b.label));
                    return b.label;
                }
            }
        }
    }

    let contenders: Vec<&Ballot> = ballots.iter().filter(|b| tied.contains(&b.label)).collect();
    let heaviest = contenders.iter().map(|b| b.effective_weight).fold(f64::NEG_INFINITY, f64::max);
    let top_labels: BTreeSet<Label> =
        contenders.iter().filter(|b| heaviest - b.effective_weight <= TIE_EPSILON).map(|b| b.label).collect();
    if top_labels.len() == 1 {
        let label = *top_labels.iter().next().unwrap();
        trace.push(format!("rule 2 (highest weight {heaviest:.6}): {label}"));
        return label;
    }

    let label = *tied.iter().next().unwrap();
    trace.push(format!("rule 3 (lexicographic): {label}"));
    label
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(c: char) -> Label {
        Label::new(c).unwrap()
    }

    fn ballot(id: &str, c: char, w: f64, leader: bool, active: bool) -> Ballot {
        Ballot::new(id, l(c), w, leader, active).unwrap()
    }

    #[test]
    fn symmetric_majority() {
        let w = 1.0 / 3.0;
        let bs = [
            ballot("a1", 'A', w, false, false),
            ballot("a2", 'A', w, false, false),
            ballot("a3", 'B', w, false, false),
        ];
        let d = aggregate(&bs, false, None).unwrap();
        assert_eq!(d.winner, l('A'));
        assert!((d.tallies[&l('A')] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.tallies[&l('B')] - 1.0 / 3.0).abs() < 1e-12);
        assert!(d.tiebreak_trace.is_empty());
    }

    #[test]
    fn weighted_minority_of_agents_loses() {
        let bs = [
            ballot("agent1", 'A', 0.4, false, false),
            ballot("agent2", 'B', 0.3, false, false),
            ballot("agent3", 'B', 0.3, false, false),
        ];
        let d = aggregate(&bs, false, None).unwrap();
        assert_eq!(d.winner, l('B'));
        assert!((d.tallies[&l('B')] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn leader_breaks_constructed_tie() {
        let bs = [
            ballot("agent1", 'A', 0.4, true, true),
            ballot("agent2", 'B', 0.3, false, true),
            ballot("agent3", 'B', 0.3, false, true),
        ];
        let d = aggregate(&bs, true, Some("agent1")).unwrap();
        assert_eq!(d.winner, l('A'));
        assert!(d.tiebreak_trace[1].starts_with("rule 1"));
    }

    #[test]
    fn heaviest_ballot_breaks_tie_without_leader() {
        // A: 0.5, B: 0.25 + 0.25
        let bs = [
            ballot("a1", 'B', 0.25, false, false),
            ballot("a2", 'A', 0.5, false, false),
            ballot("a3", 'B', 0.25, false, false),
        ];
        let d = aggregate(&bs, false, None).unwrap();
        assert_eq!(d.winner, l('A'));
        assert!(d.tiebreak_trace[1].starts_with("rule 2"));
    }

    #[test]
    fn lexicographic_floor() {
        let bs = [ballot("a1", 'C', 0.5, false, false), ballot("a2", 'B', 0.5, false, false)];
        let d = aggregate(&bs, false, None).unwrap();
        assert_eq!(d.winner, l('B'));
        assert!(d.tiebreak_trace[1].starts_with("rule 3"));
    }

    #[test]
    fn leader_outside_tie_falls_through() {
        // Leader votes C (0.15 effective); A and B tie at 0.4.
        let bs = [
            ballot("lead", 'C', 0.1, true, true),
            ballot("a1", 'A', 0.4, false, true),
            ballot("a2", 'B', 0.4, false, true),
        ];
        let d = aggregate(&bs, true, Some("lead")).unwrap();
        assert_eq!(d.winner, l('A'));
        assert!(d.tiebreak_trace[1].starts_with("rule 3"));
    }

    #[test]
    fn empty_ballots() {
        assert_eq!(aggregate(&[], false, None), Err(DecideError::EmptyBallots));
    }

    #[test]
    fn effective_weight_examples() {
        assert_eq!(effective_weight(1.0, true, true).unwrap(), 1.5);
        assert_eq!(effective_weight(1.0, true, false).unwrap(), 1.0);
        assert_eq!(effective_weight(0.25, false, true).unwrap(), 0.25);
        assert_eq!(effective_weight(0.0, false, true), Err(DecideError::NonPositiveWeight(0.0)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn ballots() -> impl Strategy<Value = Vec<(u8, u32)>> {
            prop::collection::vec((0u8..4, 1u32..1000), 1..6)
        }

        fn build(raw: &[(u8, u32)], scale: f64) -> Vec<Ballot> {
            raw.iter()
                .enumerate()
                .map(|(i, (lab, w))| {
                    let base = *w as f64 / 1000.0 * scale;
                    ballot(&format!("a{i}"), (b'A' + lab) as char, base, i == 0, true)
                })
                .collect()
        }

        proptest! {
            #[test]
            fn scaling_weights_keeps_winner(raw in ballots(), scale in prop::sample::select(vec![0.5, 2.0, 4.0, 0.25])) {
                let a = aggregate(&build(&raw, 1.0), true, Some("a0")).unwrap();
                let b = aggregate(&build(&raw, scale), true, Some("a0")).unwrap();
                prop_assert_eq!(a.winner, b.winner);
            }

            #[test]
            fn tallies_sum_to_total_weight(raw in ballots()) {
                let bs = build(&raw, 1.0);
                let d = aggregate(&bs, true, Some("a0")).unwrap();
                let total: f64 = bs.iter().map(|b| b.effective_weight).sum();
                let tallied: f64 = d.tallies.values().sum();
                prop_assert!((total - tallied).abs() <= 1e-9);
                prop_assert!(d.tallies.values().all(|t| *t >= 0.0));
            }

            #[test]
            fn permutation_invariant(raw in ballots(), rot in 0usize..6) {
                let bs = build(&raw, 1.0);
                let mut rotated = bs.clone();
                let k = rot % rotated.len();
                rotated.rotate_left(k);
                let a = aggregate(&bs, true, Some("a0")).unwrap();
                let b = aggregate(&rotated, true, Some("a0")).unwrap();
                prop_assert_eq!(a.winner, b.winner);
            }
        }
    }
}
