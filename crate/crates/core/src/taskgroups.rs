//! Overlapping task groups: circular windows of `M` classes over a class
//! ordering, advancing by a stride derived from the overlap fraction λ.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One expert's task space. The head has `size() + 1` outputs; the last one is
/// the not-in-group sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGroup {
    pub index: usize,
    pub members: Vec<usize>,
}

impl TaskGroup {
    pub fn new(index: usize, members: Vec<usize>) -> Result<Self> {
        let mut sorted = members.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invariant(format!("group {index} repeats a class")));
        }
        if members.is_empty() {
            return Err(Error::Invariant(format!("group {index} is empty")));
        }
        Ok(Self { index, members })
    }

    /// M.
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn sentinel_index(&self) -> usize {
        self.members.len()
    }

    pub fn slot_of(&self, class: usize) -> Option<usize> {
        self.members.iter().position(|&c| c == class)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.slot_of(class).is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingPlan {
    pub lambda: f64,
    #[serde(rename = "M")]
    pub group_size: usize,
    pub stride: usize,
    #[serde(with = "group_lists")]
    pub groups: Vec<TaskGroup>,
}

mod group_lists {
    use super::TaskGroup;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(groups: &[TaskGroup], s: S) -> Result<S::Ok, S::Error> {
        groups.iter().map(|g| &g.members).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<TaskGroup>, D::Error> {
        let lists = Vec::<Vec<usize>>::deserialize(d)?;
        lists
            .into_iter()
            .enumerate()
            .map(|(index, members)| TaskGroup::new(index, members).map_err(serde::de::Error::custom))
            .collect()
    }
}

impl GroupingPlan {
    /// ϑ.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Ω, the number of distinct classes covered.
    pub fn n_classes(&self) -> usize {
        self.groups.iter().flat_map(|g| g.members.iter()).max().map_or(0, |&m| m + 1)
    }

    /// Every `(group, slot)` holding `class`.
    pub fn membership(&self, class: usize) -> Result<Vec<(usize, usize)>> {
        let found: Vec<(usize, usize)> =
            self.groups.iter().filter_map(|g| g.slot_of(class).map(|slot| (g.index, slot))).collect();
        if found.is_empty() {
            return Err(Error::Lookup { kind: "class", id: class });
        }
        Ok(found)
    }

    pub fn membership_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for g in &self.groups {
            for &c in &g.members {
                counts[c] += 1;
            }
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        for (i, g) in self.groups.iter().enumerate() {
            if g.index != i {
                return Err(Error::Invariant(format!("group at position {i} has index {}", g.index)));
            }
            if g.size() != self.group_size {
                return Err(Error::Invariant(format!(
                    "group {i} has {} members, expected {}",
                    g.size(),
                    self.group_size
                )));
            }
        }
        if let Some(c) = self.membership_counts().iter().position(|&k| k == 0) {
            return Err(Error::Invariant(format!("class {c} is in no group")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::invalid(format!("overlap fraction {lambda} must lie in [0, 1)")));
    }
    Ok(())
}

/// Window advance `max(1, round(M·(1−λ)))`.
pub fn stride(group_size: usize, lambda: f64) -> Result<usize> {
    check_lambda(lambda)?;
    Ok(((group_size as f64 * (1.0 - lambda)).round() as usize).max(1))
}

/// ϑ = ⌈n / stride⌉.
pub fn group_count(n: usize, group_size: usize, lambda: f64) -> Result<usize> {
    if group_size == 0 || group_size > n {
        return Err(Error::invalid(format!("group size {group_size} must lie in 1..={n}")));
    }
    Ok(n.div_ceil(stride(group_size, lambda)?))
}

/// Tree-guided assignment: circular windows over `order`.
pub fn generate_groups(order: &[usize], group_size: usize, lambda: f64) -> Result<GroupingPlan> {
    let n = order.len();
    let mut seen = vec![false; n];
    for &c in order {
        if c >= n || std::mem::replace(&mut seen[c], true) {
            return Err(Error::invalid("class order must be a permutation of 0..n"));
        }
    }
    let count = group_count(n, group_size, lambda)?;
    let step = stride(group_size, lambda)?;
    let groups = (0..count)
        .map(|j| TaskGroup::new(j, (0..group_size).map(|t| order[(j * step + t) % n]).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(GroupingPlan { lambda, group_size, stride: step, groups })
}

/// Baseline assignment: the same windowing over a seeded shuffle of the classes.
pub fn random_groups(n_classes: usize, group_size: usize, lambda: f64, seed: u64) -> Result<GroupingPlan> {
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    generate_groups(&order, group_size, lambda)
}
