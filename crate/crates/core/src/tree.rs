//! The hierarchical domain tree: a root, up to three named levels below it,
//! and one `unk` expansion arm under every named node above the leaf level.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Deepest level of the tree. Level-3 domains are leaves and own data pools.
pub const LEAF_LEVEL: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub u32);

impl DomainId {
    pub const ROOT: DomainId = DomainId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("domain name already present in the tree: {0:?}")]
    DuplicateName(String),
    #[error("domain name is empty")]
    EmptyName,
    #[error("invalid parent {0}: missing, unk, or at leaf level")]
    InvalidParent(DomainId),
    #[error("invalid domain {0}")]
    InvalidDomain(DomainId),
    #[error("malformed tree document: {0}")]
    Malformed(String),
}

/// One node of the tree. Root and `unk` nodes carry empty names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub id: DomainId,
    pub name: String,
    pub level: u8,
    pub parent_id: Option<DomainId>,
    pub is_unk: bool,
    pub active: bool,
}

impl Domain {
    /// Name for display: "Root" and "unk" for the unnamed nodes.
    pub fn display_name(&self) -> &str {
        if self.is_unk {
            "unk"
        } else if self.parent_id.is_none() {
            "Root"
        } else {
            &self.name
        }
    }
}

/// An ordered root-to-node chain. A valid path has exactly four entries
/// (levels 0 through 3) and contains no `unk` node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Path {
    pub domains: Vec<DomainId>,
    pub valid: bool,
}

impl Path {
    pub fn leaf(&self) -> Option<DomainId> {
        if self.domains.len() == usize::from(LEAF_LEVEL) + 1 {
            self.domains.last().copied()
        } else {
            None
        }
    }

    /// Every non-root member, in level order.
    pub fn arms(&self) -> &[DomainId] {
        self.domains.get(1..).unwrap_or(&[])
    }
}

/// Case-insensitive, whitespace-trimmed key used for name deduplication.
pub fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Domain>", into = "Vec<Domain>")]
pub struct KnowledgeTree {
    nodes: Vec<Domain>,
    children: Vec<Vec<DomainId>>,
    names: HashSet<String>,
    level_counts: [usize; 3],
}

impl Default for KnowledgeTree {
    fn default() -> Self {
        Self::new()
    }
}

impl KnowledgeTree {
    /// A root with a single level-1 `unk` arm.
    pub fn new() -> Self {
        let mut tree = KnowledgeTree {
            nodes: Vec::new(),
            children: Vec::new(),
            names: HashSet::new(),
            level_counts: [0; 3],
        };
        tree.push(String::new(), 0, None, false);
        tree.push(String::new(), 1, Some(DomainId::ROOT), true);
        tree
    }

    fn push(&mut self, name: String, level: u8, parent_id: Option<DomainId>, is_unk: bool) -> DomainId {
        let id = DomainId(u32::try_from(self.nodes.len()).expect("tree size fits in u32"));
        self.nodes.push(Domain {
            id,
            name,
            level,
            parent_id,
            is_unk,
            active: true,
        });
        self.children.push(Vec::new());
        if let Some(p) = parent_id {
            self.children[p.index()].push(id);
        }
        id
    }

    pub fn root(&self) -> DomainId {
        DomainId::ROOT
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: DomainId) -> Option<&Domain> {
        self.nodes.get(id.index())
    }

    pub fn domain(&self, id: DomainId) -> Result<&Domain, TreeError> {
        self.get(id).ok_or(TreeError::InvalidDomain(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Domain> {
        self.nodes.iter()
    }

    /// Adds a named child under `parent_id`. Non-leaf children get their own
    /// `unk` arm immediately.
    pub fn add_domain(&mut self, parent_id: DomainId, name: &str) -> Result<DomainId, TreeError> {
        let parent = self.get(parent_id).ok_or(TreeError::InvalidParent(parent_id))?;
        if parent.is_unk || parent.level >= LEAF_LEVEL {
            return Err(TreeError::InvalidParent(parent_id));
        }
        let level = parent.level + 1;
        let key = normalize_name(name);
        if key.is_empty() {
            return Err(TreeError::EmptyName);
        }
        if self.names.contains(&key) {
            return Err(TreeError::DuplicateName(name.to_string()));
        }
        self.names.insert(key);
        let id = self.push(name.to_string(), level, Some(parent_id), false);
        if level < LEAF_LEVEL {
            self.push(String::new(), level + 1, Some(id), true);
        }
        self.level_counts[usize::from(level) - 1] += 1;
        Ok(id)
    }

    /// All children of a named non-leaf node, `unk` first, then insertion order.
    pub fn children(&self, id: DomainId) -> Result<&[DomainId], TreeError> {
        match self.get(id) {
            Some(d) if !d.is_unk && d.level < LEAF_LEVEL => Ok(&self.children[id.index()]),
            _ => Err(TreeError::InvalidDomain(id)),
        }
    }

    pub fn unk_child(&self, id: DomainId) -> Option<DomainId> {
        self.children
            .get(id.index())?
            .iter()
            .copied()
            .find(|c| self.nodes[c.index()].is_unk)
    }

    pub fn contains_name(&self, name: &str) -> bool {
        self.names.contains(&normalize_name(name))
    }

    /// `(N1, N2, N3)`: named domains per level.
    pub fn level_counts(&self) -> (usize, usize, usize) {
        let [a, b, c] = self.level_counts;
        (a, b, c)
    }

    pub fn path_of(&self, id: DomainId) -> Result<Path, TreeError> {
        let mut chain = Vec::with_capacity(4);
        let mut cur = Some(id);
        while let Some(c) = cur {
            let d = self.domain(c)?;
            chain.push(c);
            cur = d.parent_id;
        }
        chain.reverse();
        let valid = chain.len() == usize::from(LEAF_LEVEL) + 1
            && chain.iter().all(|c| !self.nodes[c.index()].is_unk);
        Ok(Path { domains: chain, valid })
    }

    /// Names of the named members of `path` (root excluded).
    pub fn path_names(&self, path: &Path) -> Vec<String> {
        path.arms()
            .iter()
            .filter_map(|id| self.get(*id))
            .map(|d| d.name.clone())
            .collect()
    }

    pub fn set_active(&mut self, id: DomainId, active: bool) -> Result<(), TreeError> {
        let d = self
            .nodes
            .get_mut(id.index())
            .ok_or(TreeError::InvalidDomain(id))?;
        d.active = active;
        Ok(())
    }

    /// Named level-3 domains in id order.
    pub fn leaves(&self) -> impl Iterator<Item = &Domain> {
        self.nodes
            .iter()
            .filter(|d| d.level == LEAF_LEVEL && !d.is_unk)
    }

    /// Structural self-check; returns the first violated invariant.
    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |m: String| Err(TreeError::Malformed(m));
        let Some(root) = self.nodes.first() else {
            return bad("empty tree".into());
        };
        if root.level != 0 || root.parent_id.is_some() || root.is_unk {
            return bad("root must be level 0, parentless, and named".into());
        }
        let mut seen = HashSet::new();
        let mut counts = [0usize; 3];
        for (i, d) in self.nodes.iter().enumerate() {
            if d.id.index() != i {
                return bad(format!("node {i} carries id {}", d.id));
            }
            if i > 0 {
                let Some(p) = d.parent_id.and_then(|p| self.get(p)) else {
                    return bad(format!("node {i} has no valid parent"));
                };
                if p.is_unk || d.level != p.level + 1 || p.id.index() >= i {
                    return bad(format!("node {i} has an invalid parent edge"));
                }
            }
            let kids = &self.children[i];
            if d.is_unk && !kids.is_empty() {
                return bad(format!("unk node {i} has children"));
            }
            if !d.is_unk && d.level < LEAF_LEVEL {
                let unks = kids.iter().filter(|c| self.nodes[c.index()].is_unk).count();
                if unks != 1 {
                    return bad(format!("node {i} has {unks} unk children"));
                }
            }
            if !d.is_unk && i > 0 {
                if !seen.insert(normalize_name(&d.name)) {
                    return bad(format!("duplicate name {:?}", d.name));
                }
                counts[usize::from(d.level) - 1] += 1;
            }
        }
        if counts != self.level_counts || seen != self.names {
            return bad("cached counters disagree with nodes".into());
        }
        Ok(())
    }
}

impl From<KnowledgeTree> for Vec<Domain> {
    fn from(t: KnowledgeTree) -> Self {
        t.nodes
    }
}

impl TryFrom<Vec<Domain>> for KnowledgeTree {
    type Error = TreeError;

    fn try_from(nodes: Vec<Domain>) -> Result<Self, TreeError> {
        let mut children = vec![Vec::new(); nodes.len()];
        let mut names = HashSet::new();
        let mut level_counts = [0usize; 3];
        for d in &nodes {
            if let Some(p) = d.parent_id {
                children
                    .get_mut(p.index())
                    .ok_or(TreeError::InvalidDomain(p))?
                    .push(d.id);
            }
            if !d.is_unk && d.parent_id.is_some() {
                names.insert(normalize_name(&d.name));
                if (1..=3).contains(&d.level) {
                    level_counts[usize::from(d.level) - 1] += 1;
                }
            }
        }
        let tree = KnowledgeTree {
            nodes,
            children,
            names,
            level_counts,
        };
        tree.validate()?;
        Ok(tree)
    }
}
