use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::INVALID_LABEL;

/// One node of the category tree as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryNode {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<CategoryNode>,
}

impl CategoryNode {
    pub fn leaf(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            children: Vec::new(),
        }
    }

    pub fn branch(name: impl Into<String>, children: Vec<CategoryNode>) -> Self {
        Self {
            name: name.into(),
            children,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Rooted product category tree with unique leaf names.
///
/// Leaves and second-level nodes are kept in depth-first (file) order, which
/// is the default class-list order for prompts.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    tree: CategoryNode,
    leaves: Vec<String>,
    level2: Vec<String>,
    paths: HashMap<String, Vec<String>>,
    leaves_by_level2: HashMap<String, Vec<String>>,
}

impl Taxonomy {
    pub fn new(tree: CategoryNode) -> Result<Self, CorpusError> {
        if tree.is_leaf() {
            return Err(CorpusError::Taxonomy(format!(
                "root '{}' has no children",
                tree.name
            )));
        }
        let mut leaves = Vec::new();
        let mut paths = HashMap::new();
        let mut level2 = Vec::new();
        let mut leaves_by_level2 = HashMap::new();
        let mut seen_level2 = HashSet::new();

        for child in &tree.children {
            if !seen_level2.insert(child.name.clone()) {
                return Err(CorpusError::Taxonomy(format!(
                    "duplicate second-level category '{}'",
                    child.name
                )));
            }
            let mut under = Vec::new();
            let mut prefix = vec![tree.name.clone()];
            collect_leaves(child, &mut prefix, &mut |leaf, path| {
                under.push(leaf.to_string());
                leaves.push(leaf.to_string());
                if paths.insert(leaf.to_string(), path.to_vec()).is_some() {
                    return Err(CorpusError::Taxonomy(format!(
                        "leaf name '{leaf}' appears more than once"
                    )));
                }
                Ok(())
            })?;
            if under.is_empty() {
                return Err(CorpusError::Taxonomy(format!(
                    "second-level category '{}' has no leaves",
                    child.name
                )));
            }
            level2.push(child.name.clone());
            leaves_by_level2.insert(child.name.clone(), under);
        }
        if paths.contains_key(INVALID_LABEL) {
            return Err(CorpusError::Taxonomy(format!(
                "'{INVALID_LABEL}' is reserved and cannot be a leaf name"
            )));
        }
        Ok(Self {
            tree,
            leaves,
            level2,
            paths,
            leaves_by_level2,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let tree: CategoryNode = serde_json::from_str(text)
            .map_err(|e| CorpusError::Taxonomy(format!("malformed taxonomy: {e}")))?;
        Self::new(tree)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.tree).expect("taxonomy serializes")
    }

    pub fn root(&self) -> &str {
        &self.tree.name
    }

    pub fn tree(&self) -> &CategoryNode {
        &self.tree
    }

    pub fn leaves(&self) -> &[String] {
        &self.leaves
    }

    pub fn is_leaf(&self, name: &str) -> bool {
        self.paths.contains_key(name)
    }

    /// Children of the root, in tree order.
    pub fn second_level(&self) -> &[String] {
        &self.level2
    }

    /// Root-to-leaf path, inclusive on both ends.
    pub fn path_to(&self, leaf: &str) -> Option<&[String]> {
        self.paths.get(leaf).map(Vec::as_slice)
    }

    pub fn level2_of(&self, leaf: &str) -> Option<&str> {
        self.paths.get(leaf).map(|p| p[1].as_str())
    }

    pub fn leaves_under(&self, level2: &str) -> Option<&[String]> {
        self.leaves_by_level2.get(level2).map(Vec::as_slice)
    }

    /// Number of levels below the root along the deepest path.
    pub fn depth(&self) -> usize {
        self.paths.values().map(|p| p.len() - 1).max().unwrap_or(0)
    }
}

fn collect_leaves<F>(
    node: &CategoryNode,
    prefix: &mut Vec<String>,
    visit: &mut F,
) -> Result<(), CorpusError>
where
    F: FnMut(&str, &[String]) -> Result<(), CorpusError>,
{
    prefix.push(node.name.clone());
    if node.is_leaf() {
        visit(&node.name, prefix)?;
    } else {
        for child in &node.children {
            collect_leaves(child, prefix, visit)?;
        }
    }
    prefix.pop();
    Ok(())
}
