use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyNode {
    pub id: u64,
    pub parent: Option<u64>,
    pub label: String,
}

/// Rooted taxonomy whose leaves are the atomic classes.
///
/// Class identifiers are the positions of the leaves in node order, so the
/// `c`-th leaf encountered is class `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyTree {
    nodes: Vec<TaxonomyNode>,
    parent_index: Vec<Option<usize>>,
    /// Node index of each class.
    leaves: Vec<usize>,
    /// Edges from the root, per node.
    depth: Vec<usize>,
    depth_max: usize,
}

impl TaxonomyTree {
    pub fn from_nodes(nodes: Vec<TaxonomyNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Invariant("taxonomy has no nodes".into()));
        }
        let mut by_id = HashMap::with_capacity(nodes.len());
        for (idx, node) in nodes.iter().enumerate() {
            if by_id.insert(node.id, idx).is_some() {
                return Err(Error::Invariant(format!("duplicate node id {}", node.id)));
            }
        }
        let mut parent_index = Vec::with_capacity(nodes.len());
        let mut has_child = vec![false; nodes.len()];
        let mut roots = 0;
        for node in &nodes {
            match node.parent {
                None => {
                    roots += 1;
                    parent_index.push(None);
                }
                Some(pid) => {
                    let &p = by_id
                        .get(&pid)
                        .ok_or_else(|| Error::Invariant(format!("node {} has unknown parent {pid}", node.id)))?;
                    has_child[p] = true;
                    parent_index.push(Some(p));
                }
            }
        }
        if roots != 1 {
            return Err(Error::Invariant(format!("expected exactly one root, found {roots}")));
        }

        let n = nodes.len();
        let mut depth = vec![usize::MAX; n];
        for (start, node) in nodes.iter().enumerate() {
            let mut chain = Vec::new();
            let mut cur = start;
            while depth[cur] == usize::MAX {
                chain.push(cur);
                if chain.len() > n {
                    return Err(Error::Invariant(format!("cycle through node {}", node.id)));
                }
                match parent_index[cur] {
                    Some(p) => cur = p,
                    None => {
                        depth[cur] = 0;
                        chain.pop();
                        break;
                    }
                }
            }
            let mut d = depth[cur];
            for &node in chain.iter().rev() {
                d += 1;
                depth[node] = d;
            }
        }

        let leaves: Vec<usize> = (0..n).filter(|&i| !has_child[i]).collect();
        let depth_max = leaves.iter().map(|&l| depth[l] + 1).max().unwrap_or(1);
        Ok(Self { nodes, parent_index, leaves, depth, depth_max })
    }

    /// Parses `node_id<TAB>parent_id_or_dash<TAB>label` records.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut nodes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let id = fields
                .next()
                .and_then(|f| f.trim().parse::<u64>().ok())
                .ok_or_else(|| Error::parse(line_no, "expected integer node id"))?;
            let parent = match fields.next().map(str::trim) {
                Some("-") => None,
                Some(p) => Some(p.parse::<u64>().map_err(|_| Error::parse(line_no, format!("bad parent id {p:?}")))?),
                None => return Err(Error::parse(line_no, "missing parent column")),
            };
            let label = fields.next().ok_or_else(|| Error::parse(line_no, "missing label column"))?.to_string();
            nodes.push(TaxonomyNode { id, parent, label });
        }
        if nodes.is_empty() {
            return Err(Error::parse(1, "empty taxonomy"));
        }
        Self::from_nodes(nodes)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for node in &self.nodes {
            let parent = node.parent.map_or_else(|| "-".to_string(), |p| p.to_string());
            let _ = writeln!(out, "{}\t{}\t{}", node.id, parent, node.label);
        }
        out
    }

    pub fn nodes(&self) -> &[TaxonomyNode] {
        &self.nodes
    }

    pub fn n_classes(&self) -> usize {
        self.leaves.len()
    }

    /// Maximum node count on a root-to-leaf path.
    pub fn depth_max(&self) -> usize {
        self.depth_max
    }

    pub fn leaf_node(&self, class: usize) -> Result<&TaxonomyNode> {
        self.leaves.get(class).map(|&idx| &self.nodes[idx]).ok_or(Error::Lookup { kind: "class", id: class })
    }

    /// Nodes on the unique path between the leaves of two classes, both
    /// endpoints included. Equal classes give 1.
    pub fn path_node_count(&self, a: usize, b: usize) -> Result<usize> {
        let mut x = *self.leaves.get(a).ok_or(Error::Lookup { kind: "class", id: a })?;
        let mut y = *self.leaves.get(b).ok_or(Error::Lookup { kind: "class", id: b })?;
        let mut edges = 0;
        while self.depth[x] > self.depth[y] {
            x = self.parent_index[x].expect("non-root has a parent");
            edges += 1;
        }
        while self.depth[y] > self.depth[x] {
            y = self.parent_index[y].expect("non-root has a parent");
            edges += 1;
        }
        while x != y {
            x = self.parent_index[x].expect("non-root has a parent");
            y = self.parent_index[y].expect("non-root has a parent");
            edges += 2;
        }
        Ok(edges + 1)
    }

    /// Groups classes by the parent node of their leaf, in order of first
    /// appearance. Useful as a ground-truth category layer.
    pub fn sibling_groups(&self) -> Vec<Vec<usize>> {
        let mut order: Vec<Option<usize>> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (class, &leaf) in self.leaves.iter().enumerate() {
            let parent = self.parent_index[leaf];
            match order.iter().position(|p| *p == parent) {
                Some(g) => groups[g].push(class),
                None => {
                    order.push(parent);
                    groups.push(vec![class]);
                }
            }
        }
        groups
    }
}
