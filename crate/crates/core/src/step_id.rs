//! Hierarchical step identifiers.
//!
//! Within one module, ids are dot-joined positions: the top-level operation
//! at index 3 is `3`; the first body operation of the second iteration of
//! that loop is `3.2.1`; branch bodies use the branch ordinal in place of the
//! iteration (`then` = 1, `else` = 2, switch cases in declaration order,
//! parallel branches in declaration order). Steps of a submodule are
//! namespaced under the call's id with `/`, e.g. `2/1`.
//!
//! Ordering compares module frames in turn and, inside a frame, positions
//! lexicographically with a prefix sorting first. Under that ordering the
//! sequence of step starts in a sequential run is strictly increasing.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StepId {
    frames: Vec<Vec<u32>>,
}

/// The position under which a body's operations are numbered.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IdPrefix {
    frames: Vec<Vec<u32>>,
}

impl IdPrefix {
    /// Top level of the root workflow.
    pub fn root() -> Self {
        IdPrefix { frames: vec![Vec::new()] }
    }

    /// Id of the `op_index`-th (1-based) operation of this body.
    pub fn child(&self, op_index: u32) -> StepId {
        let mut frames = self.frames.clone();
        frames.last_mut().expect("prefix has a frame").push(op_index);
        StepId { frames }
    }

    pub fn is_root(&self) -> bool {
        self.frames.len() == 1 && self.frames[0].is_empty()
    }
}

impl StepId {
    pub fn top(op_index: u32) -> Self {
        IdPrefix::root().child(op_index)
    }

    /// Prefix for a nested body: a loop iteration or a branch ordinal.
    pub fn body(&self, ordinal: u32) -> IdPrefix {
        let mut frames = self.frames.clone();
        frames.last_mut().expect("non-empty").push(ordinal);
        IdPrefix { frames }
    }

    /// Prefix for the body of a submodule invoked by this step.
    pub fn module(&self) -> IdPrefix {
        let mut frames = self.frames.clone();
        frames.push(Vec::new());
        IdPrefix { frames }
    }

    pub fn frames(&self) -> &[Vec<u32>] {
        &self.frames
    }

    /// Number of `/`-separated module frames.
    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    /// True when `self` is `other` or nested anywhere beneath it.
    pub fn is_within(&self, other: &StepId) -> bool {
        if self.frames.len() < other.frames.len() {
            return false;
        }
        let last = other.frames.len() - 1;
        self.frames[..last] == other.frames[..last]
            && self.frames[last].starts_with(&other.frames[last])
    }
}

/// Compute the id of an operation from its parent prefix, 1-based position
/// and, for loop bodies, the 1-based iteration.
pub fn assign_step_id(parent: Option<&StepId>, op_index: u32, iteration: Option<u32>) -> StepId {
    match (parent, iteration) {
        (None, _) => StepId::top(op_index),
        (Some(p), Some(k)) => p.body(k).child(op_index),
        (Some(p), None) => IdPrefix { frames: p.frames.clone() }.child(op_index),
    }
}

impl fmt::Display for StepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, frame) in self.frames.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            for (j, n) in frame.iter().enumerate() {
                if j > 0 {
                    f.write_str(".")?;
                }
                write!(f, "{n}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid step id `{0}`")]
pub struct StepIdParseError(pub String);

impl FromStr for StepId {
    type Err = StepIdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StepIdParseError(String::from(s));
        let frames = s
            .split('/')
            .map(|frame| {
                frame
                    .split('.')
                    .map(|n| match n.parse::<u32>() {
                        Ok(v) if v >= 1 => Ok(v),
                        _ => Err(bad()),
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        if frames.is_empty() || frames.iter().any(Vec::is_empty) {
            return Err(bad());
        }
        Ok(StepId { frames })
    }
}

impl Serialize for StepId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for StepId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn loop_iteration_ids() {
        let loop_id = StepId::top(3);
        assert_eq!(loop_id.body(2).child(1).to_string(), "3.2.1");
        assert_eq!(assign_step_id(Some(&loop_id), 1, Some(2)).to_string(), "3.2.1");
        assert_eq!(assign_step_id(None, 1, None).to_string(), "1");
    }

    #[test]
    fn submodule_namespacing() {
        let call = StepId::top(2);
        let first = call.module().child(1);
        assert_eq!(first.to_string(), "2/1");
        assert!(call < first);
        assert!(first.is_within(&call));
        assert!(!StepId::top(3).is_within(&call));
    }

    #[test]
    fn ordering_follows_preorder() {
        let ids: Vec<StepId> = ["1", "2", "2/1", "2/2", "2/2.1.1", "3", "3.1.1", "3.1.2", "3.2.1", "4"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        for w in ids.windows(2) {
            assert!(w[0] < w[1], "{} < {}", w[0], w[1]);
        }
    }

    #[test]
    fn parse_round_trip_and_errors() {
        for s in ["1", "3.2.1", "2/1", "2/3.1.4/1"] {
            assert_eq!(s.parse::<StepId>().unwrap().to_string(), s);
        }
        for s in ["", "0", "1.", "a", "1//2"] {
            assert!(s.parse::<StepId>().is_err(), "{s}");
        }
    }

    #[test]
    fn direct_child_without_iteration() {
        assert_eq!(assign_step_id(Some(&StepId::top(4)), 2, None).to_string(), "4.2");
    }
}
