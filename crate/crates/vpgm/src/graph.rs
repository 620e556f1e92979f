//! The verbalized PGM: a DAG of latent variables whose conditional
//! distributions are natural-language descriptions rather than numeric tables.
//!
//! A structure has one observed node `X`, one output node `Y`, and latent
//! nodes `Z1..Zn`. Validation checks the graph-theoretic invariants; nothing
//! here evaluates probabilities — that is the LLM's job at inference time.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Variable identifier: `X` (observed input), `Y` (output), or `Z<n>`.
///
/// Ordering is domain-aware: `X` sorts first, latents ascend numerically
/// (`Z2` < `Z10`), `Y` sorts last. Anything else sorts after `Y` so malformed
/// ids still have a stable position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VarId(String);

#[derive(PartialEq, Eq, PartialOrd, Ord)]
enum IdRank {
    Observed,
    Latent(u64),
    Output,
    Other,
}

impl VarId {
    pub fn new(id: impl Into<String>) -> Self {
        VarId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_observed(&self) -> bool {
        self.0 == "X"
    }

    pub fn is_output(&self) -> bool {
        self.0 == "Y"
    }

    /// The `n` of a well-formed latent id `Z<n>`.
    pub fn latent_index(&self) -> Option<u64> {
        let digits = self.0.strip_prefix('Z')?;
        if digits.is_empty()
            || digits.starts_with('0')
            || !digits.bytes().all(|b| b.is_ascii_digit())
        {
            return None;
        }
        digits.parse().ok()
    }

    pub fn is_latent(&self) -> bool {
        self.latent_index().is_some()
    }

    /// `X`, `Y`, or `Z<positive integer>`.
    pub fn is_well_formed(&self) -> bool {
        self.is_observed() || self.is_output() || self.is_latent()
    }

    fn rank(&self) -> IdRank {
        if self.is_observed() {
            IdRank::Observed
        } else if self.is_output() {
            IdRank::Output
        } else if let Some(n) = self.latent_index() {
            IdRank::Latent(n)
        } else {
            IdRank::Other
        }
    }
}

impl Ord for VarId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank().cmp(&other.rank()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for VarId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VarId {
    fn from(s: &str) -> Self {
        VarId::new(s)
    }
}

/// States a variable can take: an explicit enumeration, or free-form text
/// judged by the LLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainRepr", into = "DomainRepr")]
pub enum ValueDomain {
    Enumerated(Vec<String>),
    Verbalized,
}

impl ValueDomain {
    /// The default domain: the variable either holds or fails.
    pub fn binary() -> Self {
        ValueDomain::Enumerated(vec!["holds".into(), "fails".into()])
    }
}

impl Default for ValueDomain {
    fn default() -> Self {
        ValueDomain::binary()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DomainRepr {
    List(Vec<String>),
    Tag(String),
}

impl TryFrom<DomainRepr> for ValueDomain {
    type Error = String;

    fn try_from(repr: DomainRepr) -> Result<Self, Self::Error> {
        match repr {
            DomainRepr::List(states) => Ok(ValueDomain::Enumerated(states)),
            DomainRepr::Tag(tag) if tag == "verbalized" => Ok(ValueDomain::Verbalized),
            DomainRepr::Tag(tag) => Err(format!(
                "value_domain must be a list of states or \"verbalized\", got \"{tag}\""
            )),
        }
    }
}

impl From<ValueDomain> for DomainRepr {
    fn from(domain: ValueDomain) -> Self {
        match domain {
            ValueDomain::Enumerated(states) => DomainRepr::List(states),
            ValueDomain::Verbalized => DomainRepr::Tag("verbalized".into()),
        }
    }
}

/// One node of the structure. Despite the name this also covers the observed
/// node `X` and the output node `Y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVariable {
    pub id: VarId,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub value_domain: ValueDomain,
}

impl LatentVariable {
    pub fn new(
        id: impl Into<String>,
        name: impl Into<String>,
        description: impl Into<String>,
    ) -> Self {
        LatentVariable {
            id: VarId::new(id),
            name: name.into(),
            description: description.into(),
            value_domain: ValueDomain::default(),
        }
    }
}

/// `from → to`: `to` is conditionally dependent on `from`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub from: VarId,
    pub to: VarId,
}

impl DependencyEdge {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        DependencyEdge { from: VarId::new(from), to: VarId::new(to) }
    }
}

impl fmt::Display for DependencyEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}→{}", self.from, self.to)
    }
}

/// Natural-language description of P(child | parents).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbalizedCpd {
    pub child: VarId,
    pub parents: Vec<VarId>,
    pub description: String,
}

/// The full verbalized PGM. Immutable after construction; nothing here has
/// interior mutability, so shared references are safe across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgmStructure {
    #[serde(default)]
    pub task_description: String,
    pub variables: Vec<LatentVariable>,
    #[serde(default)]
    pub edges: Vec<DependencyEdge>,
    #[serde(default)]
    pub cpds: Vec<VerbalizedCpd>,
}

/// A single invariant breach, carrying the offending element.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateId(VarId),
    MalformedId(VarId),
    MissingObserved,
    MissingOutput,
    EmptyValueDomain(VarId),
    UnknownEndpoint { edge: DependencyEdge, missing: VarId },
    SelfLoop(VarId),
    DuplicateEdge(DependencyEdge),
    Cycle(Vec<VarId>),
    ObservedHasParents(VarId),
    OutputHasChildren(VarId),
    CpdUnknownChild(VarId),
    CpdParentMismatch { child: VarId, expected: Vec<VarId>, actual: Vec<VarId> },
    CpdEmptyDescription(VarId),
    TooManyLatents { count: usize, max: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate variable id {id}"),
            Violation::MalformedId(id) => {
                write!(f, "malformed variable id {id} (expected X, Y, or Z<n>)")
            }
            Violation::MissingObserved => write!(f, "no observed node X declared"),
            Violation::MissingOutput => write!(f, "no output node Y declared"),
            Violation::EmptyValueDomain(id) => write!(f, "empty value domain on {id}"),
            Violation::UnknownEndpoint { edge, missing } => {
                write!(f, "edge {edge} references undeclared variable {missing}")
            }
            Violation::SelfLoop(id) => write!(f, "self-loop at {id}"),
            Violation::DuplicateEdge(edge) => write!(f, "duplicate edge {edge}"),
            Violation::Cycle(path) => {
                write!(f, "cycle: ")?;
                for (i, id) in path.iter().enumerate() {
                    if i > 0 {
                        write!(f, "→")?;
                    }
                    write!(f, "{id}")?;
                }
                Ok(())
            }
            Violation::ObservedHasParents(id) => write!(f, "observed node {id} has parents"),
            Violation::OutputHasChildren(id) => write!(f, "output node {id} has children"),
            Violation::CpdUnknownChild(id) => write!(f, "CPD for undeclared variable {id}"),
            Violation::CpdParentMismatch { child, expected, actual } => write!(
                f,
                "CPD for {child} lists parents [{}] but the edge set implies [{}]",
                join_ids(actual),
                join_ids(expected)
            ),
            Violation::CpdEmptyDescription(id) => write!(f, "empty CPD description for {id}"),
            Violation::TooManyLatents { count, max } => {
                write!(f, "{count} latent variables exceed the configured maximum of {max}")
            }
        }
    }
}

fn join_ids(ids: &[VarId]) -> String {
    ids.iter().map(VarId::as_str).collect::<Vec<_>>().join(", ")
}

/// Non-fatal structural oddity. Discovered graphs in practice always connect
/// X to Y through every latent, but an LLM is free to hand back one that
/// does not.
#[derive(Debug, Clone, PartialEq)]
pub enum StructureWarning {
    UnreachableFromObserved(VarId),
    DoesNotReachOutput(VarId),
}

impl fmt::Display for StructureWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StructureWarning::UnreachableFromObserved(id) => {
                write!(f, "{id} is not reachable from X")
            }
            StructureWarning::DoesNotReachOutput(id) => write!(f, "{id} does not reach Y"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationResult {
    pub violations: Vec<Violation>,
    pub warnings: Vec<StructureWarning>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    /// All violations rendered one per line, for error reporting upstream.
    pub fn describe_violations(&self) -> String {
        self.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone)]
pub struct ValidationOptions {
    /// Discovery prompts ask the model for at most this many latents; a graph
    /// above the cap is rejected outright rather than silently truncated.
    pub max_latents: usize,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions { max_latents: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("cycle: {}", .0.iter().map(VarId::as_str).collect::<Vec<_>>().join("→"))]
    CyclicGraph(Vec<VarId>),
    #[error("unknown variable {0}")]
    UnknownVariable(VarId),
}

impl PgmStructure {
    pub fn new(task_description: impl Into<String>) -> Self {
        PgmStructure {
            task_description: task_description.into(),
            variables: Vec::new(),
            edges: Vec::new(),
            cpds: Vec::new(),
        }
    }

    pub fn variable(&self, id: &VarId) -> Option<&LatentVariable> {
        self.variables.iter().find(|v| &v.id == id)
    }

    pub fn contains(&self, id: &VarId) -> bool {
        self.variable(id).is_some()
    }

    /// Latent ids in ascending order.
    pub fn latent_ids(&self) -> Vec<VarId> {
        let mut ids: Vec<VarId> =
            self.variables.iter().filter(|v| v.id.is_latent()).map(|v| v.id.clone()).collect();
        ids.sort();
        ids
    }

    /// In-neighbors of `id`, ascending. Duplicate edges collapse to one entry.
    pub fn parents_of(&self, id: &VarId) -> Result<Vec<VarId>, GraphError> {
        if !self.contains(id) {
            return Err(GraphError::UnknownVariable(id.clone()));
        }
        let parents: BTreeSet<VarId> =
            self.edges.iter().filter(|e| &e.to == id).map(|e| e.from.clone()).collect();
        Ok(parents.into_iter().collect())
    }

    /// Out-neighbors of `id`, ascending.
    pub fn children_of(&self, id: &VarId) -> Result<Vec<VarId>, GraphError> {
        if !self.contains(id) {
            return Err(GraphError::UnknownVariable(id.clone()));
        }
        let children: BTreeSet<VarId> =
            self.edges.iter().filter(|e| &e.from == id).map(|e| e.to.clone()).collect();
        Ok(children.into_iter().collect())
    }

    /// Kahn's algorithm with ties broken by ascending id, which by the id
    /// ordering also puts X first and Y last. Deterministic for a given
    /// structure.
    pub fn topological_order(&self) -> Result<Vec<VarId>, GraphError> {
        let ids: BTreeSet<VarId> = self.variables.iter().map(|v| v.id.clone()).collect();
        let mut indegree: BTreeMap<VarId, usize> = ids.iter().map(|id| (id.clone(), 0)).collect();
        let mut successors: BTreeMap<VarId, BTreeSet<VarId>> = BTreeMap::new();
        for edge in &self.edges {
            if edge.from == edge.to || !ids.contains(&edge.from) || !ids.contains(&edge.to) {
                continue; // reported by validate(); do not let it wedge the sort
            }
            if successors.entry(edge.from.clone()).or_default().insert(edge.to.clone()) {
                *indegree.get_mut(&edge.to).unwrap() += 1;
            }
        }

        let mut ready: BTreeSet<VarId> =
            indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| id.clone()).collect();
        let mut order = Vec::with_capacity(ids.len());
        while let Some(next) = ready.iter().next().cloned() {
            ready.remove(&next);
            if let Some(succ) = successors.get(&next) {
                for child in succ {
                    let d = indegree.get_mut(child).unwrap();
                    *d -= 1;
                    if *d == 0 {
                        ready.insert(child.clone());
                    }
                }
            }
            order.push(next);
        }

        if order.len() != ids.len() {
            let leftover: BTreeSet<VarId> =
                indegree.into_iter().filter(|(_, d)| *d > 0).map(|(id, _)| id).collect();
            return Err(GraphError::CyclicGraph(find_cycle(&self.edges, &leftover)));
        }
        Ok(order)
    }

    /// Checks every structural invariant and reports all breaches at once.
    /// Violations are data, not failures; pure and idempotent.
    pub fn validate(&self, options: &ValidationOptions) -> ValidationResult {
        let mut result = ValidationResult::default();

        let mut seen: BTreeSet<&VarId> = BTreeSet::new();
        for var in &self.variables {
            if !seen.insert(&var.id) {
                result.violations.push(Violation::DuplicateId(var.id.clone()));
            }
            if !var.id.is_well_formed() {
                result.violations.push(Violation::MalformedId(var.id.clone()));
            }
            if let ValueDomain::Enumerated(states) = &var.value_domain {
                if states.is_empty() {
                    result.violations.push(Violation::EmptyValueDomain(var.id.clone()));
                }
            }
        }
        let has_observed = self.variables.iter().any(|v| v.id.is_observed());
        let has_output = self.variables.iter().any(|v| v.id.is_output());
        if !has_observed {
            result.violations.push(Violation::MissingObserved);
        }
        if !has_output {
            result.violations.push(Violation::MissingOutput);
        }

        let latent_count = self.variables.iter().filter(|v| v.id.is_latent()).count();
        if latent_count > options.max_latents {
            result
                .violations
                .push(Violation::TooManyLatents { count: latent_count, max: options.max_latents });
        }

        let mut edge_seen: BTreeSet<(&VarId, &VarId)> = BTreeSet::new();
        for edge in &self.edges {
            for endpoint in [&edge.from, &edge.to] {
                if !self.contains(endpoint) {
                    result.violations.push(Violation::UnknownEndpoint {
                        edge: edge.clone(),
                        missing: endpoint.clone(),
                    });
                }
            }
            if edge.from == edge.to {
                result.violations.push(Violation::SelfLoop(edge.from.clone()));
            } else if !edge_seen.insert((&edge.from, &edge.to)) {
                result.violations.push(Violation::DuplicateEdge(edge.clone()));
            }
            if edge.to.is_observed() && self.contains(&edge.to) {
                result.violations.push(Violation::ObservedHasParents(edge.to.clone()));
            }
            if edge.from.is_output() && self.contains(&edge.from) {
                result.violations.push(Violation::OutputHasChildren(edge.from.clone()));
            }
        }

        if let Err(GraphError::CyclicGraph(path)) = self.topological_order() {
            result.violations.push(Violation::Cycle(path));
        }

        for cpd in &self.cpds {
            if !self.contains(&cpd.child) {
                result.violations.push(Violation::CpdUnknownChild(cpd.child.clone()));
                continue;
            }
            if cpd.description.trim().is_empty() {
                result.violations.push(Violation::CpdEmptyDescription(cpd.child.clone()));
            }
            let expected = self.parents_of(&cpd.child).unwrap_or_default();
            let mut actual = cpd.parents.clone();
            actual.sort();
            if actual != expected {
                result.violations.push(Violation::CpdParentMismatch {
                    child: cpd.child.clone(),
                    expected,
                    actual: cpd.parents.clone(),
                });
            }
        }

        if has_observed && has_output {
            let from_x = self.reachable_from(&VarId::new("X"), Direction::Forward);
            let to_y = self.reachable_from(&VarId::new("Y"), Direction::Backward);
            for var in &self.variables {
                if !var.id.is_latent() {
                    continue;
                }
                if !from_x.contains(&var.id) {
                    result.warnings.push(StructureWarning::UnreachableFromObserved(var.id.clone()));
                }
                if !to_y.contains(&var.id) {
                    result.warnings.push(StructureWarning::DoesNotReachOutput(var.id.clone()));
                }
            }
        }

        result
    }

    fn reachable_from(&self, start: &VarId, direction: Direction) -> BTreeSet<VarId> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start.clone()]);
        while let Some(id) = queue.pop_front() {
            if !seen.insert(id.clone()) {
                continue;
            }
            for edge in &self.edges {
                let next = match direction {
                    Direction::Forward if edge.from == id => &edge.to,
                    Direction::Backward if edge.to == id => &edge.from,
                    _ => continue,
                };
                if !seen.contains(next) {
                    queue.push_back(next.clone());
                }
            }
        }
        seen
    }

    /// Content hash of the structure's canonical JSON form; prompt records
    /// carry it so downstream stages can detect a structure swap.
    pub fn structure_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("structure serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("structure serializes");
        out.push('\n');
        out
    }
}

enum Direction {
    Forward,
    Backward,
}

/// Walk predecessors inside the leftover set of a failed Kahn pass until a
/// node repeats, then report the forward cycle starting from its smallest
/// member, closed by repeating that member.
fn find_cycle(edges: &[DependencyEdge], leftover: &BTreeSet<VarId>) -> Vec<VarId> {
    let start = match leftover.iter().next() {
        Some(id) => id.clone(),
        None => return Vec::new(),
    };
    let mut path = vec![start.clone()];
    let mut current = start;
    loop {
        let pred = edges
            .iter()
            .filter(|e| e.to == current && e.from != e.to && leftover.contains(&e.from))
            .map(|e| e.from.clone())
            .min()
            .expect("leftover node retains an in-edge from the leftover set");
        if let Some(pos) = path.iter().position(|id| *id == pred) {
            // Backward walk: path[pos..] is the cycle in reverse direction.
            let mut cycle: Vec<VarId> = path[pos..].to_vec();
            cycle.reverse();
            let smallest =
                cycle.iter().enumerate().min_by_key(|(_, id)| *id).map(|(i, _)| i).unwrap();
            cycle.rotate_left(smallest);
            cycle.push(cycle[0].clone());
            return cycle;
        }
        path.push(pred.clone());
        current = pred;
    }
}
