//! Triple-backed knowledge graph of packages, functions, attributes, and
//! their descriptions.
//!
//! The on-disk form is JSON-Lines, one `{"s", "r", "o"}` triple per line.
//! Entities come into existence only through an `is_a` declaration; every
//! other relation refers to declared entities or carries a literal object.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REL_IS_A: &str = "is_a";
pub const REL_HAS_CHILD: &str = "has_child";
pub const REL_HAS_NAME: &str = "has_name";
pub const REL_HAS_DESCRIPTION: &str = "has_description";
pub const REL_HAS_PARAMETER: &str = "has_parameter";

#[derive(Debug, Error)]
pub enum KgError {
    #[error("io error reading knowledge graph: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("integrity error: {message}: {}", ids.join(", "))]
    Integrity { message: String, ids: Vec<String> },
    #[error("entity `{0}` is not a package")]
    NotAPackage(String),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
}

/// One `⟨subject, relation, object⟩` statement.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    #[serde(rename = "s")]
    pub subject: String,
    #[serde(rename = "r")]
    pub relation: String,
    #[serde(rename = "o")]
    pub object: String,
}

impl Triple {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Package,
    Function,
    Attribute,
    Parameter,
    DescriptionLiteral,
}

impl NodeKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "package" => Some(Self::Package),
            "function" => Some(Self::Function),
            "attribute" => Some(Self::Attribute),
            "parameter" => Some(Self::Parameter),
            "description" => Some(Self::DescriptionLiteral),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Package => "package",
            Self::Function => "function",
            Self::Attribute => "attribute",
            Self::Parameter => "parameter",
            Self::DescriptionLiteral => "description",
        }
    }

    /// Function and attribute nodes are what clustering and retrieval operate on.
    pub fn is_member(self) -> bool {
        matches!(self, Self::Function | Self::Attribute)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgNode {
    pub id: String,
    pub kind: NodeKind,
    /// Display name; falls back to the id when no `has_name` triple exists.
    pub name: String,
    /// Possibly empty.
    pub description: String,
    pub parent: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct KgStats {
    pub entities: usize,
    pub triples: usize,
    pub packages: usize,
    pub functions: usize,
    pub attributes: usize,
    pub parameters: usize,
    pub description_literals: usize,
}

/// Immutable, fully indexed knowledge graph.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    triples: Vec<Triple>,
    nodes: BTreeMap<String, KgNode>,
    children: BTreeMap<String, Vec<String>>,
    /// member id -> owning package id
    package_of: BTreeMap<String, String>,
}

impl KnowledgeGraph {
    /// Builds a graph from triples. Duplicate triples collapse, so the result
    /// does not depend on input order or repetition.
    pub fn from_triples<I: IntoIterator<Item = Triple>>(triples: I) -> Result<Self, KgError> {
        let set: BTreeSet<Triple> = triples.into_iter().collect();
        let triples: Vec<Triple> = set.into_iter().collect();

        let mut kinds: BTreeMap<String, NodeKind> = BTreeMap::new();
        let mut conflicting = BTreeSet::new();
        for t in triples.iter().filter(|t| t.relation == REL_IS_A) {
            let kind = NodeKind::parse(&t.object).ok_or_else(|| KgError::Integrity {
                message: format!("unknown entity kind `{}`", t.object),
                ids: vec![t.subject.clone()],
            })?;
            if let Some(prev) = kinds.insert(t.subject.clone(), kind) {
                if prev != kind {
                    conflicting.insert(t.subject.clone());
                }
            }
        }
        if !conflicting.is_empty() {
            return Err(KgError::Integrity {
                message: "entity declared with more than one kind".into(),
                ids: conflicting.into_iter().collect(),
            });
        }

        let dangling: BTreeSet<String> = triples
            .iter()
            .filter(|t| !kinds.contains_key(&t.subject))
            .map(|t| t.subject.clone())
            .collect();
        if !dangling.is_empty() {
            return Err(KgError::Integrity {
                message: "triples reference undeclared subjects".into(),
                ids: dangling.into_iter().collect(),
            });
        }

        let mut names: BTreeMap<&str, &str> = BTreeMap::new();
        let mut descriptions: BTreeMap<&str, &str> = BTreeMap::new();
        let mut parents: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        let mut bad_objects = BTreeSet::new();
        for t in &triples {
            match t.relation.as_str() {
                "" => {
                    return Err(KgError::Integrity {
                        message: "empty relation label".into(),
                        ids: vec![t.subject.clone()],
                    })
                }
                REL_IS_A => {}
                REL_HAS_NAME => {
                    names.insert(&t.subject, &t.object);
                }
                REL_HAS_DESCRIPTION => {
                    descriptions.insert(&t.subject, &t.object);
                }
                REL_HAS_CHILD | REL_HAS_PARAMETER => {
                    if !kinds.contains_key(&t.object) {
                        bad_objects.insert(t.object.clone());
                        continue;
                    }
                    parents.entry(t.object.clone()).or_default().insert(t.subject.clone());
                }
                _ => {}
            }
        }
        if !bad_objects.is_empty() {
            return Err(KgError::Integrity {
                message: "structural relations point at undeclared entities".into(),
                ids: bad_objects.into_iter().collect(),
            });
        }

        let multi: Vec<String> = parents
            .iter()
            .filter(|(_, p)| p.len() > 1)
            .map(|(c, _)| c.clone())
            .collect();
        if !multi.is_empty() {
            return Err(KgError::Integrity {
                message: "entities with more than one parent".into(),
                ids: multi,
            });
        }
        let parented_packages: Vec<String> = parents
            .keys()
            .filter(|id| kinds[*id] == NodeKind::Package)
            .cloned()
            .collect();
        if !parented_packages.is_empty() {
            return Err(KgError::Integrity {
                message: "package nodes cannot have a parent".into(),
                ids: parented_packages,
            });
        }

        let mut nodes = BTreeMap::new();
        let mut children: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (id, kind) in &kinds {
            let parent = parents.get(id).and_then(|p| p.iter().next().cloned());
            if let Some(p) = &parent {
                children.entry(p.clone()).or_default().push(id.clone());
            }
            let description = match descriptions.get(id.as_str()) {
                // A description may point at a declared description-literal entity.
                Some(d) => match kinds.get(*d) {
                    Some(NodeKind::DescriptionLiteral) => names.get(*d).copied().unwrap_or(d).to_string(),
                    _ => d.to_string(),
                },
                None => String::new(),
            };
            nodes.insert(
                id.clone(),
                KgNode {
                    id: id.clone(),
                    kind: *kind,
                    name: names
                        .get(id.as_str())
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| id.clone()),
                    description,
                    parent,
                },
            );
        }

        let mut package_of = BTreeMap::new();
        let mut orphans = Vec::new();
        for node in nodes.values().filter(|n| n.kind.is_member()) {
            match find_package(&nodes, &node.id) {
                Ok(Some(pkg)) => {
                    package_of.insert(node.id.clone(), pkg);
                }
                Ok(None) => orphans.push(node.id.clone()),
                Err(cycle) => {
                    return Err(KgError::Integrity {
                        message: "parent links form a cycle".into(),
                        ids: vec![cycle],
                    })
                }
            }
        }
        if !orphans.is_empty() {
            return Err(KgError::Integrity {
                message: "function/attribute nodes without a package ancestor".into(),
                ids: orphans,
            });
        }

        Ok(Self {
            triples,
            nodes,
            children,
            package_of,
        })
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, KgError> {
        let mut triples = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Triple = serde_json::from_str(&line).map_err(|e| KgError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            triples.push(t);
        }
        Self::from_triples(triples)
    }

    /// Writes the canonical JSON-Lines form: deduplicated triples in sorted order.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        for t in &self.triples {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn node(&self, id: &str) -> Option<&KgNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.values()
    }

    pub fn entity_count(&self) -> usize {
        self.nodes.len()
    }

    /// Direct children in id order.
    pub fn direct_children(&self, id: &str) -> impl Iterator<Item = &KgNode> {
        self.children
            .get(id)
            .into_iter()
            .flatten()
            .filter_map(|c| self.nodes.get(c))
    }

    /// Every package node, sorted by id.
    pub fn anchors(&self) -> Vec<&KgNode> {
        self.nodes.values().filter(|n| n.kind == NodeKind::Package).collect()
    }

    /// All function/attribute descendants of a package, sorted by id.
    pub fn children(&self, anchor: &str) -> Result<Vec<&KgNode>, KgError> {
        match self.nodes.get(anchor) {
            Some(n) if n.kind == NodeKind::Package => {}
            Some(_) => return Err(KgError::NotAPackage(anchor.to_string())),
            None => return Err(KgError::UnknownEntity(anchor.to_string())),
        }
        Ok(self
            .package_of
            .iter()
            .filter(|(_, p)| p.as_str() == anchor)
            .map(|(id, _)| &self.nodes[id])
            .collect())
    }

    /// Owning package of a function or attribute node.
    pub fn package_of(&self, id: &str) -> Option<&str> {
        self.package_of.get(id).map(String::as_str)
    }

    pub fn stats(&self) -> KgStats {
        let mut s = KgStats {
            entities: self.nodes.len(),
            triples: self.triples.len(),
            ..Default::default()
        };
        for n in self.nodes.values() {
            match n.kind {
                NodeKind::Package => s.packages += 1,
                NodeKind::Function => s.functions += 1,
                NodeKind::Attribute => s.attributes += 1,
                NodeKind::Parameter => s.parameters += 1,
                NodeKind::DescriptionLiteral => s.description_literals += 1,
            }
        }
        s
    }
}

fn find_package(nodes: &BTreeMap<String, KgNode>, start: &str) -> Result<Option<String>, String> {
    let mut seen = BTreeSet::new();
    let mut cur = start;
    loop {
        if !seen.insert(cur) {
            return Err(cur.to_string());
        }
        let node = &nodes[cur];
        if node.kind == NodeKind::Package {
            return Ok(Some(node.id.clone()));
        }
        match &node.parent {
            Some(p) => cur = p,
            None => return Ok(None),
        }
    }
}

pub fn load_kg(path: impl AsRef<Path>) -> Result<KnowledgeGraph, KgError> {
    let file = fs::File::open(path.as_ref())?;
    KnowledgeGraph::from_reader(file)
}
