//! Problem-instance types and the exact collision/success predicate.
//!
//! An instance has `N` nodes that must deliver `L` shared messages over
//! `M >= L` orthogonal transmission opportunities. At each step, message `l`
//! is held by a nonempty active set of nodes; each active node picks a
//! binary move vector over the `M` opportunities. A message is delivered iff
//! some opportunity carries exactly one transmission of that message and no
//! transmission of any other message; the joint attempt succeeds iff every
//! message is delivered.
//!
//! All types here are immutable values after construction and every
//! operation is a pure function.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("instance dimensions must be strictly positive (got N={n_nodes}, L={n_messages}, M={n_opportunities})")]
    NonPositiveDims {
        n_nodes: usize,
        n_messages: usize,
        n_opportunities: usize,
    },
    #[error("need at least as many opportunities as messages (M={n_opportunities} < L={n_messages})")]
    TooFewOpportunities {
        n_messages: usize,
        n_opportunities: usize,
    },
    #[error("active set for message {message} is empty")]
    EmptyActiveSet { message: usize },
    #[error("node index {node} out of range for message {message} (N={n_nodes})")]
    NodeOutOfRange {
        message: usize,
        node: usize,
        n_nodes: usize,
    },
    #[error("duplicate node {node} in active set for message {message}")]
    DuplicateNode { message: usize, node: usize },
    #[error("expected {expected} messages, got {got}")]
    MessageCountMismatch { expected: usize, got: usize },
    #[error("move tensor shaped {got:?} does not match dims {expected:?}")]
    TensorShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("node {node} transmits message {message} while inactive for it")]
    InactiveTransmission { message: usize, node: usize },
}

/// Instance dimensions: `N` nodes, `L` messages, `M` opportunities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDims {
    n_nodes: usize,
    n_messages: usize,
    n_opportunities: usize,
}

impl InstanceDims {
    pub fn new(
        n_nodes: usize,
        n_messages: usize,
        n_opportunities: usize,
    ) -> Result<Self, ModelError> {
        if n_nodes == 0 || n_messages == 0 || n_opportunities == 0 {
            return Err(ModelError::NonPositiveDims {
                n_nodes,
                n_messages,
                n_opportunities,
            });
        }
        if n_opportunities < n_messages {
            return Err(ModelError::TooFewOpportunities {
                n_messages,
                n_opportunities,
            });
        }
        Ok(Self {
            n_nodes,
            n_messages,
            n_opportunities,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_messages(&self) -> usize {
        self.n_messages
    }

    pub fn n_opportunities(&self) -> usize {
        self.n_opportunities
    }

    /// Length of the concatenated activity pattern, `K = L * N`.
    pub fn concat_len(&self) -> usize {
        self.n_messages * self.n_nodes
    }

    /// Total number of move-tensor bits, `L * N * M`.
    pub fn tensor_bits(&self) -> usize {
        self.n_messages * self.n_nodes * self.n_opportunities
    }
}

/// The realized per-message active sets at one time step.
///
/// Each set is sorted, deduplicated and nonempty; node indices are 0-based.
/// A node may appear in several sets (it then holds several messages and is
/// counted once per message in the concatenated cardinality).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSets {
    sets: Vec<Vec<usize>>,
}

impl ActiveSets {
    pub fn new(sets: Vec<Vec<usize>>, dims: &InstanceDims) -> Result<Self, ModelError> {
        if sets.len() != dims.n_messages() {
            return Err(ModelError::MessageCountMismatch {
                expected: dims.n_messages(),
                got: sets.len(),
            });
        }
        let mut sorted = sets;
        for (l, set) in sorted.iter_mut().enumerate() {
            if set.is_empty() {
                return Err(ModelError::EmptyActiveSet { message: l });
            }
            set.sort_unstable();
            for w in set.windows(2) {
                if w[0] == w[1] {
                    return Err(ModelError::DuplicateNode {
                        message: l,
                        node: w[0],
                    });
                }
            }
            let last = *set.last().unwrap();
            if last >= dims.n_nodes() {
                return Err(ModelError::NodeOutOfRange {
                    message: l,
                    node: last,
                    n_nodes: dims.n_nodes(),
                });
            }
        }
        Ok(Self { sets: sorted })
    }

    pub fn n_messages(&self) -> usize {
        self.sets.len()
    }

    /// Sorted node indices active for message `l`.
    pub fn message(&self, l: usize) -> &[usize] {
        &self.sets[l]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.sets.iter().map(|s| s.as_slice())
    }

    pub fn contains(&self, l: usize, n: usize) -> bool {
        self.sets[l].binary_search(&n).is_ok()
    }

    /// `|A| = sum_l |A_l|`: a node active for several messages is counted
    /// once per message.
    pub fn concatenated_cardinality(&self) -> usize {
        self.sets.iter().map(|s| s.len()).sum()
    }
}

/// Dense binary transmission tensor, indexed `[l][n][m]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveTensor {
    n_messages: usize,
    n_nodes: usize,
    n_opportunities: usize,
    bits: Vec<bool>,
}

impl MoveTensor {
    pub fn zeros(dims: &InstanceDims) -> Self {
        Self {
            n_messages: dims.n_messages(),
            n_nodes: dims.n_nodes(),
            n_opportunities: dims.n_opportunities(),
            bits: vec![false; dims.tensor_bits()],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_messages, self.n_nodes, self.n_opportunities)
    }

    fn offset(&self, l: usize, n: usize, m: usize) -> usize {
        debug_assert!(l < self.n_messages && n < self.n_nodes && m < self.n_opportunities);
        (l * self.n_nodes + n) * self.n_opportunities + m
    }

    pub fn get(&self, l: usize, n: usize, m: usize) -> bool {
        self.bits[self.offset(l, n, m)]
    }

    pub fn set(&mut self, l: usize, n: usize, m: usize, value: bool) {
        let i = self.offset(l, n, m);
        self.bits[i] = value;
    }

    /// The move vector of node `n` for message `l`.
    pub fn row(&self, l: usize, n: usize) -> &[bool] {
        let start = self.offset(l, n, 0);
        &self.bits[start..start + self.n_opportunities]
    }

    pub fn set_row(&mut self, l: usize, n: usize, row: &[bool]) {
        assert_eq!(row.len(), self.n_opportunities);
        let start = self.offset(l, n, 0);
        self.bits[start..start + self.n_opportunities].copy_from_slice(row);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn matches(&self, dims: &InstanceDims) -> bool {
        self.shape()
            == (
                dims.n_messages(),
                dims.n_nodes(),
                dims.n_opportunities(),
            )
    }
}

/// Outcome of one joint transmission attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reward {
    xi: bool,
    per_message_acks: Vec<bool>,
}

impl Reward {
    pub fn from_acks(per_message_acks: Vec<bool>) -> Self {
        let xi = per_message_acks.iter().all(|&y| y);
        Self {
            xi,
            per_message_acks,
        }
    }

    /// The scalar joint-success reward (the conjunction of all ACKs).
    pub fn xi(&self) -> bool {
        self.xi
    }

    pub fn xi_f64(&self) -> f64 {
        if self.xi {
            1.0
        } else {
            0.0
        }
    }

    pub fn acks(&self) -> &[bool] {
        &self.per_message_acks
    }
}

/// Exact success predicate.
///
/// Message `l` is delivered iff there is an opportunity `m` on which exactly
/// one node of its active set transmits it and no active node of any other
/// message transmits; the joint attempt succeeds iff all messages are
/// delivered. A node transmitting two messages on the same opportunity
/// contributes to both per-opportunity totals, so it collides with itself.
///
/// Transmissions by nodes outside their message's active set are rejected as
/// a precondition violation rather than ignored.
pub fn evaluate_success(
    active: &ActiveSets,
    moves: &MoveTensor,
    dims: &InstanceDims,
) -> Result<Reward, ModelError> {
    if active.n_messages() != dims.n_messages() {
        return Err(ModelError::MessageCountMismatch {
            expected: dims.n_messages(),
            got: active.n_messages(),
        });
    }
    if !moves.matches(dims) {
        return Err(ModelError::TensorShapeMismatch {
            expected: (
                dims.n_messages(),
                dims.n_nodes(),
                dims.n_opportunities(),
            ),
            got: moves.shape(),
        });
    }

    let m_len = dims.n_opportunities();
    // Transmissions per opportunity, all messages combined.
    let mut total = vec![0u32; m_len];
    // Transmissions per opportunity for one message at a time.
    let mut per_message = vec![vec![0u32; m_len]; dims.n_messages()];

    for l in 0..dims.n_messages() {
        let mut next_active = active.message(l).iter().copied().peekable();
        for n in 0..dims.n_nodes() {
            let is_active = next_active.peek() == Some(&n);
            if is_active {
                next_active.next();
            }
            let row = moves.row(l, n);
            if is_active {
                for (m, &bit) in row.iter().enumerate() {
                    if bit {
                        per_message[l][m] += 1;
                        total[m] += 1;
                    }
                }
            } else if row.iter().any(|&bit| bit) {
                return Err(ModelError::InactiveTransmission { message: l, node: n });
            }
        }
    }

    let acks = per_message
        .iter()
        .map(|counts| {
            counts
                .iter()
                .zip(total.iter())
                .any(|(&own, &all)| own == 1 && all == 1)
        })
        .collect();
    Ok(Reward::from_acks(acks))
}
