//! Greedy label-cover clustering with local replication.
//!
//! Agents are grouped so that every cluster holds every label; when the
//! not-yet-clustered agents cannot finish a cluster, an already-clustered agent
//! is reused and later runs as one virtual node per cluster it belongs to.

use std::collections::BTreeSet;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-agent label sets over classes `0..num_classes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSets {
    sets: Vec<BTreeSet<usize>>,
    num_classes: usize,
}

impl LabelSets {
    pub fn new(sets: Vec<BTreeSet<usize>>, num_classes: usize) -> Result<Self> {
        for (agent, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::EmptyLabelSet(agent));
            }
            if let Some(&k) = set.iter().find(|&&k| k >= num_classes) {
                return Err(Error::InvalidParameter(format!(
                    "agent {agent} holds label {k} outside 0..{num_classes}"
                )));
            }
        }
        Ok(LabelSets { sets, num_classes })
    }

    pub fn from_lists(lists: &[Vec<usize>], num_classes: usize) -> Result<Self> {
        Self::new(lists.iter().map(|l| l.iter().copied().collect()).collect(), num_classes)
    }

    pub fn n_agents(&self) -> usize {
        self.sets.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self, agent: usize) -> &BTreeSet<usize> {
        &self.sets[agent]
    }

    pub fn holds(&self, agent: usize, class: usize) -> bool {
        self.sets[agent].contains(&class)
    }
}

/// One (possibly replicated) copy of an agent assigned to a single cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualNode {
    pub id: usize,
    pub agent: usize,
    pub cluster: usize,
    /// 0 for the first cluster the agent appears in, 1 for the next, ...
    pub replica: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPlan {
    /// Agent ids per cluster, ascending.
    pub clusters: Vec<Vec<usize>>,
    /// `S_i`: number of clusters containing agent `i`.
    #[serde(rename = "S")]
    pub replication: Vec<u32>,
    pub virtual_nodes: Vec<VirtualNode>,
}

/// `m^s` and `m_k^s` of one cluster as exact rationals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterMass {
    pub total: Ratio<u64>,
    pub per_class: Vec<Ratio<u64>>,
}

impl ClusterPlan {
    /// Build the plan bookkeeping (replication counts, virtual nodes) for the
    /// given membership lists. Members are sorted; no validation is done here.
    pub fn from_clusters(mut clusters: Vec<Vec<usize>>, n_agents: usize) -> Self {
        clusters.iter_mut().for_each(|c| c.sort_unstable());
        let mut replication = vec![0u32; n_agents];
        let mut virtual_nodes = Vec::new();
        for (s, members) in clusters.iter().enumerate() {
            for &agent in members {
                if agent < n_agents {
                    virtual_nodes.push(VirtualNode {
                        id: virtual_nodes.len(),
                        agent,
                        cluster: s,
                        replica: replication[agent] as usize,
                    });
                    replication[agent] += 1;
                }
            }
        }
        ClusterPlan { clusters, replication, virtual_nodes }
    }

    pub fn n_agents(&self) -> usize {
        self.replication.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Virtual nodes of cluster `s` in ascending agent order.
    pub fn cluster_nodes(&self, s: usize) -> Vec<VirtualNode> {
        self.virtual_nodes.iter().filter(|v| v.cluster == s).copied().collect()
    }

    /// Virtual nodes hosted by `agent`.
    pub fn replicas_of(&self, agent: usize) -> Vec<VirtualNode> {
        self.virtual_nodes.iter().filter(|v| v.agent == agent).copied().collect()
    }

    /// `m^s = Σ_{i∈V^s} m_i/S_i` and `m_k^s = Σ_{i∈V^s} m_{i,k}/S_i` from
    /// per-agent class counts.
    pub fn cluster_masses(&self, counts: &[Vec<usize>]) -> Vec<ClusterMass> {
        let k = counts.first().map(Vec::len).unwrap_or(0);
        self.clusters
            .iter()
            .map(|members| {
                let mut per_class = vec![Ratio::from_integer(0u64); k];
                for &a in members {
                    let s = self.replication[a] as u64;
                    for (c, &n) in counts[a].iter().enumerate() {
                        per_class[c] += Ratio::new(n as u64, s);
                    }
                }
                let total = per_class.iter().fold(Ratio::from_integer(0), |acc, &x| acc + x);
                ClusterMass { total, per_class }
            })
            .collect()
    }
}

fn gain(labels: &BTreeSet<usize>, uncovered: &BTreeSet<usize>) -> usize {
    labels.intersection(uncovered).count()
}

/// Highest-gain candidate, lowest id on ties.
fn best<'a>(candidates: impl Iterator<Item = &'a usize>, sets: &LabelSets, uncovered: &BTreeSet<usize>) -> Option<(usize, usize)> {
    candidates
        .map(|&i| (i, gain(sets.labels(i), uncovered)))
        .fold(None, |acc, (i, g)| match acc {
            Some((_, bg)) if bg >= g => acc,
            _ => Some((i, g)),
        })
}

/// Greedy cover of the label set, cluster by cluster.
///
/// Unclustered agents are preferred; an already-clustered agent is reused
/// only when no unclustered agent adds an uncovered label.
pub fn cluster_with_replication(sets: &LabelSets) -> Result<ClusterPlan> {
    let all: BTreeSet<usize> = (0..sets.num_classes()).collect();
    let covered: BTreeSet<usize> = (0..sets.n_agents()).flat_map(|i| sets.labels(i).iter().copied()).collect();
    if let Some(&k) = all.difference(&covered).next() {
        return Err(Error::UncoverableLabel(k));
    }
    let agents: Vec<usize> = (0..sets.n_agents()).collect();
    let mut unclustered: BTreeSet<usize> = agents.iter().copied().collect();
    let mut clusters = Vec::new();
    while !unclustered.is_empty() {
        let mut members = Vec::new();
        let mut uncovered = all.clone();
        while !uncovered.is_empty() {
            let fresh = best(unclustered.iter(), sets, &uncovered).filter(|&(_, g)| g > 0);
            let pick = match fresh {
                Some((i, _)) => {
                    unclustered.remove(&i);
                    i
                }
                // Replication: every label is held by someone, so the gain is positive.
                None => best(agents.iter(), sets, &uncovered).map(|(i, _)| i).expect("at least one agent"),
            };
            members.push(pick);
            for k in sets.labels(pick) {
                uncovered.remove(k);
            }
        }
        clusters.push(members);
    }
    Ok(ClusterPlan::from_clusters(clusters, sets.n_agents()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanViolation {
    EmptyCluster { cluster: usize },
    UnknownAgent { cluster: usize, agent: usize },
    DuplicateMember { cluster: usize, agent: usize },
    MissingLabel { cluster: usize, label: usize },
    ReplicationMismatch { agent: usize, declared: u32, actual: u32 },
    Unclustered { agent: usize },
    VirtualRegistry { agent: usize },
}

/// Every broken plan invariant; an empty list means the plan is valid.
pub fn validate_plan(plan: &ClusterPlan, sets: &LabelSets) -> Vec<PlanViolation> {
    let n = sets.n_agents();
    let mut out = Vec::new();
    let mut actual = vec![0u32; n];
    for (s, members) in plan.clusters.iter().enumerate() {
        if members.is_empty() {
            out.push(PlanViolation::EmptyCluster { cluster: s });
        }
        let mut seen = BTreeSet::new();
        let mut union = BTreeSet::new();
        for &a in members {
            if a >= n {
                out.push(PlanViolation::UnknownAgent { cluster: s, agent: a });
                continue;
            }
            if !seen.insert(a) {
                out.push(PlanViolation::DuplicateMember { cluster: s, agent: a });
            }
            actual[a] += 1;
            union.extend(sets.labels(a).iter().copied());
        }
        for label in (0..sets.num_classes()).filter(|k| !union.contains(k)) {
            out.push(PlanViolation::MissingLabel { cluster: s, label });
        }
    }
    for agent in 0..n {
        let declared = plan.replication.get(agent).copied().unwrap_or(0);
        if actual[agent] == 0 {
            out.push(PlanViolation::Unclustered { agent });
        }
        if declared != actual[agent] {
            out.push(PlanViolation::ReplicationMismatch { agent, declared, actual: actual[agent] });
        }
        let registered = plan.virtual_nodes.iter().filter(|v| v.agent == agent).count() as u32;
        if registered != actual[agent] {
            out.push(PlanViolation::VirtualRegistry { agent });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(lists: &[&[usize]], k: usize) -> LabelSets {
        LabelSets::from_lists(&lists.iter().map(|l| l.to_vec()).collect::<Vec<_>>(), k).unwrap()
    }

    #[test]
    fn five_agents_replicate_agent_one() {
        let s = sets(&[&[1, 3, 5, 6], &[0, 5, 7, 8], &[1, 3, 8, 9], &[2, 4, 6, 7], &[0, 2, 4, 9]], 10);
        let plan = cluster_with_replication(&s).unwrap();
        assert_eq!(plan.clusters, vec![vec![0, 1, 4], vec![1, 2, 3]]);
        assert_eq!(plan.replication, vec![1, 2, 1, 1, 1]);
        assert_eq!(plan.replicas_of(1).len(), 2);
        assert!(validate_plan(&plan, &s).is_empty());
    }

    #[test]
    fn four_agents_no_replication() {
        let s = sets(&[&[1, 2, 3, 4, 5], &[6, 7, 8, 9, 0], &[0, 3, 5, 7, 9], &[1, 2, 4, 6, 8]], 10);
        let plan = cluster_with_replication(&s).unwrap();
        assert_eq!(plan.clusters, vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(plan.replication, vec![1; 4]);
    }

    #[test]
    fn single_agent() {
        let s = sets(&[&[0, 1, 2]], 3);
        let plan = cluster_with_replication(&s).unwrap();
        assert_eq!(plan.clusters, vec![vec![0]]);
        assert_eq!(plan.replication, vec![1]);
    }

    #[test]
    fn lowest_id_tie_break() {
        let s = sets(&[&[0], &[1], &[0, 1]], 2);
        let plan = cluster_with_replication(&s).unwrap();
        assert_eq!(plan.clusters, vec![vec![2], vec![0, 1]]);
        assert_eq!(plan.replication, vec![1, 1, 1]);
    }

    #[test]
    fn zero_gain_agent_triggers_replication() {
        // While building the second cluster, unclustered agent 2 adds nothing
        // to the missing label 1, so agent 0 is borrowed instead of looping.
        let s = sets(&[&[0, 1], &[0], &[0]], 2);
        let plan = cluster_with_replication(&s).unwrap();
        assert_eq!(plan.clusters, vec![vec![0], vec![0, 1], vec![0, 2]]);
        assert_eq!(plan.replication, vec![3, 1, 1]);
        assert!(validate_plan(&plan, &s).is_empty());
    }

    #[test]
    fn uncoverable_label() {
        let s = sets(&[&[0], &[1]], 3);
        assert_eq!(cluster_with_replication(&s), Err(Error::UncoverableLabel(2)));
        assert_eq!(LabelSets::from_lists(&[vec![0], vec![]], 2), Err(Error::EmptyLabelSet(1)));
    }

    #[test]
    fn constructed_violations() {
        let s = sets(&[&[0], &[1]], 2);
        let plan = ClusterPlan::from_clusters(vec![vec![0]], 2);
        let v = validate_plan(&plan, &s);
        assert!(v.contains(&PlanViolation::MissingLabel { cluster: 0, label: 1 }));
        assert!(v.contains(&PlanViolation::Unclustered { agent: 1 }));

        let mut bad = ClusterPlan::from_clusters(vec![vec![0, 1]], 2);
        bad.replication[0] = 2;
        assert_eq!(
            validate_plan(&bad, &s),
            vec![PlanViolation::ReplicationMismatch { agent: 0, declared: 2, actual: 1 }]
        );
    }

    #[test]
    fn masses_sum_to_total() {
        let s = sets(&[&[1, 3, 5, 6], &[0, 5, 7, 8], &[1, 3, 8, 9], &[2, 4, 6, 7], &[0, 2, 4, 9]], 10);
        let plan = cluster_with_replication(&s).unwrap();
        let counts: Vec<Vec<usize>> = (0..5)
            .map(|a| (0..10).map(|k| if s.holds(a, k) { 7 + a + k } else { 0 }).collect())
            .collect();
        let m: usize = counts.iter().flatten().sum();
        let total = plan.cluster_masses(&counts).iter().fold(Ratio::from_integer(0), |acc, c| acc + c.total);
        assert_eq!(total, Ratio::from_integer(m as u64));
    }
}
