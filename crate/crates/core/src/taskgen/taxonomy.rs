use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{contract, Error, Result};
use crate::seed;

/// Per-coordinate perturbation half-width applied to depth-2 children.
pub const PERTURBATION: f64 = 1.0;
/// Each level's perturbation is this fraction of its parent level's.
pub const DECAY: f64 = 0.6;
/// Default share of prototype coordinates an internal node perturbs for its
/// children.
pub const SUPPORT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub parent: Option<usize>,
    pub depth: usize,
    pub children: Vec<usize>,
    pub prototype: Vec<f64>,
    /// Class id for leaves.
    pub class: Option<usize>,
}

/// Rooted concept tree whose leaves are the classes. Node 0 is the root and
/// leaves are numbered left to right, so siblings have consecutive class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    nodes: Vec<Node>,
    leaves: Vec<usize>,
}

/// Builds a complete `branching`-ary tree of `depth` levels (root depth 1).
///
/// The root prototype is standard normal. Each internal node picks
/// `ceil(SUPPORT·proto_dim)` coordinates and its children perturb only those,
/// uniformly in `±PERTURBATION·DECAY^(d−2)` for a child at depth `d`, so
/// prototypes drift apart with tree distance.
pub fn build_taxonomy(branching: usize, depth: usize, proto_dim: usize, seed: u64) -> Result<Taxonomy> {
    build_taxonomy_with_support(branching, depth, proto_dim, SUPPORT, seed)
}

/// [`build_taxonomy`] where each internal node perturbs a random
/// `ceil(support·proto_dim)` of the coordinates, so discriminating its
/// children needs features specific to that node.
pub fn build_taxonomy_with_support(branching: usize, depth: usize, proto_dim: usize, support: f64, seed: u64) -> Result<Taxonomy> {
    if !(support > 0.0 && support <= 1.0) {
        return Err(Error::Config(format!("taxonomy support must lie in (0, 1], got {support}")));
    }
    if branching < 2 || depth < 3 || proto_dim == 0 {
        return Err(Error::Config(format!(
            "taxonomy needs branching >= 2, depth >= 3 and a non-empty prototype (got {branching}, {depth}, {proto_dim})"
        )));
    }
    let mut rng = seed::rng(seed::derive_tag(seed, "taxonomy"));
    let root: Vec<f64> = (0..proto_dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut nodes = vec![Node { parent: None, depth: 1, children: Vec::new(), prototype: root, class: None }];
    let mut leaves = Vec::new();
    // Depth-first so leaf ids come out in left-to-right order.
    let mut stack = vec![0usize];
    while let Some(id) = stack.pop() {
        let d = nodes[id].depth;
        if d == depth {
            nodes[id].class = Some(leaves.len());
            leaves.push(id);
            continue;
        }
        let scale = PERTURBATION * DECAY.powi(d as i32 - 1);
        let k = ((proto_dim as f64 * support - 1e-9).ceil() as usize).clamp(1, proto_dim);
        let coords = rand::seq::index::sample(&mut rng, proto_dim, k).into_vec();
        let mut kids = Vec::with_capacity(branching);
        for _ in 0..branching {
            let mut proto = nodes[id].prototype.clone();
            for &i in &coords {
                proto[i] += rng.gen_range(-scale..=scale);
            }
            kids.push(nodes.len());
            nodes.push(Node { parent: Some(id), depth: d + 1, children: Vec::new(), prototype: proto, class: None });
        }
        nodes[id].children = kids.clone();
        stack.extend(kids.into_iter().rev());
    }
    Ok(Taxonomy { nodes, leaves })
}

impl Taxonomy {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn num_classes(&self) -> usize {
        self.leaves.len()
    }

    pub fn proto_dim(&self) -> usize {
        self.nodes[0].prototype.len()
    }

    pub fn leaf_node(&self, class: usize) -> Result<usize> {
        self.leaves.get(class).copied().ok_or(Error::UnknownClass(class))
    }

    pub fn prototype(&self, class: usize) -> Result<&[f64]> {
        Ok(&self.nodes[self.leaf_node(class)?].prototype)
    }

    pub fn depth(&self, node: usize) -> usize {
        self.nodes[node].depth
    }

    /// Lowest common ancestor of two nodes.
    pub fn lcs(&self, mut a: usize, mut b: usize) -> usize {
        while self.nodes[a].depth > self.nodes[b].depth {
            a = self.nodes[a].parent.expect("non-root has a parent");
        }
        while self.nodes[b].depth > self.nodes[a].depth {
            b = self.nodes[b].parent.expect("non-root has a parent");
        }
        while a != b {
            a = self.nodes[a].parent.expect("distinct nodes below the root");
            b = self.nodes[b].parent.expect("distinct nodes below the root");
        }
        a
    }

    /// Number of edges from either leaf up to their lowest common ancestor.
    pub fn class_distance(&self, a: usize, b: usize) -> Result<usize> {
        let (na, nb) = (self.leaf_node(a)?, self.leaf_node(b)?);
        Ok(self.nodes[na].depth - self.nodes[self.lcs(na, nb)].depth)
    }

    /// Classes under the ancestor of `class` that sits at `depth`.
    pub fn subtree_classes(&self, class: usize, depth: usize) -> Result<Vec<usize>> {
        let mut n = self.leaf_node(class)?;
        if depth == 0 || depth > self.nodes[n].depth {
            return Err(contract(format!("no ancestor at depth {depth}")));
        }
        while self.nodes[n].depth > depth {
            n = self.nodes[n].parent.expect("non-root has a parent");
        }
        let mut out = Vec::new();
        let mut stack = vec![n];
        while let Some(id) = stack.pop() {
            match self.nodes[id].class {
                Some(c) => out.push(c),
                None => stack.extend(&self.nodes[id].children),
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// `node <id> parent=<p|-> depth=<d> proto=<v,...>`, one line per node.
impl fmt::Display for Taxonomy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (id, n) in self.nodes.iter().enumerate() {
            let parent = n.parent.map_or("-".to_string(), |p| p.to_string());
            let proto: Vec<String> = n.prototype.iter().map(|v| format!("{v:?}")).collect();
            writeln!(f, "node {id} parent={parent} depth={} proto={}", n.depth, proto.join(","))?;
        }
        Ok(())
    }
}

impl FromStr for Taxonomy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |line: &str| Error::Parse(format!("bad taxonomy line {line:?}"));
        let mut nodes: Vec<Node> = Vec::new();
        for line in s.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 || f[0] != "node" || f[1].parse::<usize>().ok() != Some(nodes.len()) {
                return Err(bad(line));
            }
            let val = |i: usize, key: &str| f[i].strip_prefix(key).ok_or_else(|| bad(line));
            let parent = match val(2, "parent=")? {
                "-" => None,
                p => Some(p.parse::<usize>().map_err(|_| bad(line))?),
            };
            let depth = val(3, "depth=")?.parse::<usize>().map_err(|_| bad(line))?;
            let prototype = val(4, "proto=")?
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| bad(line)))
                .collect::<Result<Vec<_>>>()?;
            let id = nodes.len();
            match parent {
                None if id == 0 && depth == 1 => {}
                Some(p) if p < id && nodes[p].depth + 1 == depth => nodes[p].children.push(id),
                _ => return Err(bad(line)),
            }
            nodes.push(Node { parent, depth, children: Vec::new(), prototype, class: None });
        }
        if nodes.is_empty() {
            return Err(Error::Parse("empty taxonomy".into()));
        }
        // Leaves in depth-first, left-to-right order, as built.
        let mut leaves = Vec::new();
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            if nodes[id].children.is_empty() {
                nodes[id].class = Some(leaves.len());
                leaves.push(id);
            } else {
                stack.extend(nodes[id].children.iter().rev());
            }
        }
        Ok(Taxonomy { nodes, leaves })
    }
}
