//! Finite controlled Markov chains: transition kernel `p(y | x, u)`, stage
//! cost `k(x, u)`, stationary policies and positive value functions.
//!
//! Transition rows are kept in compressed sparse form. Exact `+0.0` entries
//! are dropped, which leaves every ascending-order row sum bitwise unchanged,
//! so dense and sparse evaluations of the Bellman operator agree exactly.

use std::fmt;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums must equal one within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Smallest admissible entry when a model claims strict positivity.
pub const POSITIVITY_FLOOR: f64 = 1e-15;

/// Optional per-state label carried through serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateLabel {
    Scalar(f64),
    Coords(Vec<f64>),
    Name(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    n_states: usize,
    n_actions: usize,
    /// Row `(x, u)` occupies `offsets[r]..offsets[r + 1]` with `r = x * n_actions + u`.
    offsets: Vec<usize>,
    cols: Vec<usize>,
    probs: Vec<f64>,
    costs: Vec<f64>,
    labels: Option<Vec<StateLabel>>,
    strictly_positive: bool,
}

impl ChainModel {
    /// Builds a model from a dense `[state][action][next_state]` tensor and a
    /// `[state][action]` cost matrix. Only shapes are checked here; use
    /// [`validate`] or [`ChainModel::new`] for the numerical invariants.
    pub fn from_dense(p: Vec<Vec<Vec<f64>>>, k: Vec<Vec<f64>>) -> Result<Self> {
        let n = p.len();
        if n == 0 {
            return Err(Error::Dimension("model needs at least one state".into()));
        }
        let m = p[0].len();
        if m == 0 {
            return Err(Error::Dimension("model needs at least one action".into()));
        }
        if k.len() != n {
            return Err(Error::Dimension(format!(
                "k has {} rows, expected {n}",
                k.len()
            )));
        }
        let mut rows = Vec::with_capacity(n * m);
        let mut costs = Vec::with_capacity(n * m);
        for (x, (px, kx)) in p.into_iter().zip(k).enumerate() {
            if px.len() != m {
                return Err(Error::Dimension(format!(
                    "P[{x}] has {} actions, expected {m}",
                    px.len()
                )));
            }
            if kx.len() != m {
                return Err(Error::Dimension(format!(
                    "k[{x}] has {} actions, expected {m}",
                    kx.len()
                )));
            }
            for (u, row) in px.into_iter().enumerate() {
                if row.len() != n {
                    return Err(Error::Dimension(format!(
                        "P[{x}][{u}] has {} entries, expected {n}",
                        row.len()
                    )));
                }
                rows.push(
                    row.into_iter()
                        .enumerate()
                        .filter(|(_, v)| v.to_bits() != 0)
                        .collect(),
                );
            }
            costs.extend(kx);
        }
        Self::from_sparse_rows(n, m, rows, costs)
    }

    /// Builds a model from sparse rows ordered `state * n_actions + action`.
    /// Each row lists `(next_state, probability)`; indices must be strictly
    /// increasing.
    pub fn from_sparse_rows(
        n_states: usize,
        n_actions: usize,
        rows: Vec<Vec<(usize, f64)>>,
        costs: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Dimension(
                "model needs at least one state and one action".into(),
            ));
        }
        if rows.len() != n_states * n_actions || costs.len() != n_states * n_actions {
            return Err(Error::Dimension(format!(
                "expected {} rows and costs, got {} and {}",
                n_states * n_actions,
                rows.len(),
                costs.len()
            )));
        }
        let nnz = rows.iter().map(Vec::len).sum();
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::with_capacity(nnz);
        let mut probs = Vec::with_capacity(nnz);
        offsets.push(0);
        for (r, row) in rows.into_iter().enumerate() {
            let mut prev = None;
            for (y, v) in row {
                if y >= n_states || prev.is_some_and(|p| y <= p) {
                    return Err(Error::Dimension(format!(
                        "row (x={}, u={}) has out-of-order or out-of-range column {y}",
                        r / n_actions,
                        r % n_actions
                    )));
                }
                prev = Some(y);
                cols.push(y);
                probs.push(v);
            }
            offsets.push(cols.len());
        }
        Ok(Self {
            n_states,
            n_actions,
            offsets,
            cols,
            probs,
            costs,
            labels: None,
            strictly_positive: false,
        })
    }

    /// Dense constructor that also enforces every model invariant.
    pub fn new(p: Vec<Vec<Vec<f64>>>, k: Vec<Vec<f64>>) -> Result<Self> {
        let model = Self::from_dense(p, k)?;
        model.check()?;
        Ok(model)
    }

    pub fn with_labels(mut self, labels: Vec<StateLabel>) -> Result<Self> {
        if labels.len() != self.n_states {
            return Err(Error::Dimension(format!(
                "{} labels for {} states",
                labels.len(),
                self.n_states
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_strictly_positive(mut self, flag: bool) -> Self {
        self.strictly_positive = flag;
        self
    }

    /// Fails with [`Error::InvalidModel`] unless [`validate`] is clean.
    pub fn check(&self) -> Result<()> {
        let violations = validate(self);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidModel(violations))
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn strictly_positive(&self) -> bool {
        self.strictly_positive
    }

    pub fn labels(&self) -> Option<&[StateLabel]> {
        self.labels.as_deref()
    }

    /// Nonzero entries of row `(x, u)` as parallel `(next_states, probabilities)` slices.
    #[inline]
    pub fn row(&self, x: usize, u: usize) -> (&[usize], &[f64]) {
        let r = x * self.n_actions + u;
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        (&self.cols[a..b], &self.probs[a..b])
    }

    #[inline]
    pub fn cost(&self, x: usize, u: usize) -> f64 {
        self.costs[x * self.n_actions + u]
    }

    pub fn prob(&self, x: usize, u: usize, y: usize) -> f64 {
        let (cols, probs) = self.row(x, u);
        match cols.binary_search(&y) {
            Ok(i) => probs[i],
            Err(_) => 0.0,
        }
    }

    /// Dense copy of row `(x, u)`.
    pub fn dense_row(&self, x: usize, u: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states];
        let (cols, probs) = self.row(x, u);
        for (&y, &p) in cols.iter().zip(probs) {
            out[y] = p;
        }
        out
    }

    /// Number of stored (nonzero) transition entries.
    pub fn nnz(&self) -> usize {
        self.probs.len()
    }

    /// Returns a copy with every stage cost shifted by `shift`.
    pub fn shift_costs(&self, shift: f64) -> Self {
        let mut out = self.clone();
        out.costs.iter_mut().for_each(|k| *k += shift);
        out
    }

    fn to_file(&self) -> ChainFile {
        let p = (0..self.n_states)
            .map(|x| (0..self.n_actions).map(|u| self.dense_row(x, u)).collect())
            .collect();
        let k = (0..self.n_states)
            .map(|x| (0..self.n_actions).map(|u| self.cost(x, u)).collect())
            .collect();
        ChainFile {
            kind: CHAIN_TAG.to_string(),
            n_states: self.n_states,
            n_actions: self.n_actions,
            p,
            k,
            labels: self.labels.clone(),
            strictly_positive: self.strictly_positive,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("chain model is always serializable")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("chain model is always serializable")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        load_model(s.as_bytes())
    }
}

const CHAIN_TAG: &str = "chain";

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ChainFile {
    #[serde(rename = "type")]
    kind: String,
    n_states: usize,
    n_actions: usize,
    #[serde(rename = "P")]
    p: Vec<Vec<Vec<f64>>>,
    k: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<StateLabel>>,
    #[serde(default)]
    strictly_positive: bool,
}

impl ChainFile {
    pub(crate) fn into_model(self) -> Result<ChainModel> {
        if self.kind != CHAIN_TAG {
            return Err(Error::Dimension(format!(
                "expected \"type\": \"chain\", found {:?}",
                self.kind
            )));
        }
        if self.p.len() != self.n_states {
            return Err(Error::Dimension(format!(
                "n_states = {} but P has {} rows",
                self.n_states,
                self.p.len()
            )));
        }
        if let Some(px) = self.p.iter().position(|r| r.len() != self.n_actions) {
            return Err(Error::Dimension(format!(
                "n_actions = {} but P[{px}] has {} actions",
                self.n_actions,
                self.p[px].len()
            )));
        }
        let mut model =
            ChainModel::from_dense(self.p, self.k)?.with_strictly_positive(self.strictly_positive);
        if let Some(labels) = self.labels {
            model = model.with_labels(labels)?;
        }
        model.check()?;
        Ok(model)
    }
}

/// Parses a chain problem document and enforces every model invariant.
pub fn load_model<R: Read>(source: R) -> Result<ChainModel> {
    let file: ChainFile = serde_json::from_reader(source)?;
    file.into_model()
}

/// A single broken invariant of a [`ChainModel`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NegativeProbability {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },
    NonFiniteProbability {
        state: usize,
        action: usize,
        next: usize,
    },
    RowSum {
        state: usize,
        action: usize,
        sum: f64,
    },
    NotStrictlyPositive {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },
    NonFiniteCost {
        state: usize,
        action: usize,
        value: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NegativeProbability {
                state,
                action,
                next,
                value,
            } => write!(
                f,
                "negative probability P[{state}][{action}][{next}] = {value}"
            ),
            Violation::NonFiniteProbability {
                state,
                action,
                next,
            } => write!(f, "non-finite probability P[{state}][{action}][{next}]"),
            Violation::RowSum { state, action, sum } => {
                write!(f, "row (x={state}, u={action}) sums to {sum}, expected 1")
            }
            Violation::NotStrictlyPositive {
                state,
                action,
                next,
                value,
            } => write!(
                f,
                "strictly_positive is set but P[{state}][{action}][{next}] = {value}"
            ),
            Violation::NonFiniteCost {
                state,
                action,
                value,
            } => write!(f, "non-finite cost k[{state}][{action}] = {value}"),
        }
    }
}

/// Lists every broken invariant; an empty report means the model is valid.
pub fn validate(model: &ChainModel) -> Vec<Violation> {
    let mut out = Vec::new();
    for x in 0..model.n_states {
        for u in 0..model.n_actions {
            let (cols, probs) = model.row(x, u);
            let mut sum = 0.0;
            let mut finite = true;
            for (&y, &p) in cols.iter().zip(probs) {
                if !p.is_finite() {
                    finite = false;
                    out.push(Violation::NonFiniteProbability {
                        state: x,
                        action: u,
                        next: y,
                    });
                    continue;
                }
                if p < 0.0 {
                    out.push(Violation::NegativeProbability {
                        state: x,
                        action: u,
                        next: y,
                        value: p,
                    });
                }
                sum += p;
            }
            if finite && (sum - 1.0).abs() > ROW_SUM_TOL {
                out.push(Violation::RowSum {
                    state: x,
                    action: u,
                    sum,
                });
            }
            if model.strictly_positive {
                let dense = model.dense_row(x, u);
                if let Some((y, &v)) = dense
                    .iter()
                    .enumerate()
                    .find(|(_, &v)| (0.0..POSITIVITY_FLOOR).contains(&v))
                {
                    out.push(Violation::NotStrictlyPositive {
                        state: x,
                        action: u,
                        next: y,
                        value: v,
                    });
                }
            }
            let k = model.cost(x, u);
            if !k.is_finite() {
                out.push(Violation::NonFiniteCost {
                    state: x,
                    action: u,
                    value: k,
                });
            }
        }
    }
    out
}

/// Stationary deterministic selector: `actions[x]` is the action index used in state `x`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy(Vec<usize>);

impl Policy {
    pub fn new(actions: Vec<usize>) -> Self {
        Self(actions)
    }

    /// The policy that plays `action` everywhere.
    pub fn constant(n_states: usize, action: usize) -> Self {
        Self(vec![action; n_states])
    }

    pub fn actions(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_for(&self, model: &ChainModel) -> Result<()> {
        if self.0.len() != model.n_states() {
            return Err(Error::PolicyLength {
                got: self.0.len(),
                expected: model.n_states(),
            });
        }
        if let Some((state, &action)) = self
            .0
            .iter()
            .enumerate()
            .find(|(_, &a)| a >= model.n_actions())
        {
            return Err(Error::PolicyOutOfRange {
                state,
                action,
                n_actions: model.n_actions(),
            });
        }
        Ok(())
    }

    /// Number of states where `self` and `other` select different actions.
    pub fn changes_from(&self, other: &Policy) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

/// Strictly positive, finite multiplicative value over states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ValueFunction(Vec<f64>);

impl ValueFunction {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((state, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > 0.0 && v.is_finite()))
        {
            return Err(Error::NonPositiveValue { state, value });
        }
        Ok(Self(values))
    }

    pub fn constant(n_states: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n_states])
    }

    pub(crate) fn from_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| *v > 0.0 && v.is_finite()));
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * c).collect())
    }

    pub(crate) fn check_len(&self, n_states: usize) -> Result<()> {
        if self.0.len() != n_states {
            return Err(Error::Dimension(format!(
                "value function has {} entries, model has {n_states} states",
                self.0.len()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for ValueFunction {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ValueFunction> for Vec<f64> {
    fn from(v: ValueFunction) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for ValueFunction {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Single-action chain obtained by freezing `policy`.
pub fn restrict(model: &ChainModel, policy: &Policy) -> Result<ChainModel> {
    policy.check_for(model)?;
    let n = model.n_states();
    let mut rows = Vec::with_capacity(n);
    let mut costs = Vec::with_capacity(n);
    for (x, &u) in policy.actions().iter().enumerate() {
        let (cols, probs) = model.row(x, u);
        rows.push(cols.iter().copied().zip(probs.iter().copied()).collect());
        costs.push(model.cost(x, u));
    }
    let mut out = ChainModel::from_sparse_rows(n, 1, rows, costs)?
        .with_strictly_positive(model.strictly_positive());
    out.labels = model.labels.clone();
    Ok(out)
}

/// Seeded random model whose transition probabilities are all at least
/// `delta` and whose costs lie in `[-1, 1]`.
pub fn random_model(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    delta: f64,
) -> Result<ChainModel> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::Dimension(
            "random model needs at least one state and one action".into(),
        ));
    }
    let budget = 1.0 - n_states as f64 * delta;
    if !(delta >= 0.0) || budget < -ROW_SUM_TOL {
        return Err(Error::InfeasibleDelta { delta, n_states });
    }
    let budget = budget.max(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_states * n_actions);
    let mut costs = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states * n_actions {
        let w: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = w.iter().sum();
        rows.push(
            w.iter()
                .map(|wi| delta + budget * wi / total)
                .enumerate()
                .collect(),
        );
        costs.push(rng.random_range(-1.0..=1.0));
    }
    Ok(
        ChainModel::from_sparse_rows(n_states, n_actions, rows, costs)?
            .with_strictly_positive(delta >= POSITIVITY_FLOOR),
    )
}
