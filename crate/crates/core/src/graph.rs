//! Dependency-tree algorithms: lowest common ancestor, entity paths,
//! path-centric pruning and the self-looped, degree-normalized adjacency.
//!
//! Node indices in this module are 1-based like [`Instance`] tokens.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{check_tree, Instance, Span};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A rooted dependency tree over tokens `1..=n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepTree {
    head: Vec<usize>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    root: usize,
}

impl DepTree {
    /// `head[i-1]` is the head of token `i`, `0` for the root.
    pub fn new(head: &[usize]) -> Result<Self> {
        check_tree(head).map_err(Error::Instance)?;
        let n = head.len();
        let mut children = vec![Vec::new(); n + 1];
        let mut root = 0;
        for (k, &h) in head.iter().enumerate() {
            if h == 0 {
                root = k + 1;
            } else {
                children[h].push(k + 1);
            }
        }
        let mut depth = vec![0; n + 1];
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &c in &children[u] {
                depth[c] = depth[u] + 1;
                queue.push_back(c);
            }
        }
        Ok(DepTree {
            head: head.to_vec(),
            children,
            depth,
            root,
        })
    }

    pub fn from_instance(inst: &Instance) -> Result<Self> {
        Self::new(&inst.head)
    }

    pub fn len(&self) -> usize {
        self.head.len()
    }

    pub fn is_empty(&self) -> bool {
        self.head.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Head of token `i`, `0` for the root.
    pub fn parent(&self, i: usize) -> usize {
        self.head[i - 1]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn depth(&self, i: usize) -> usize {
        self.depth[i]
    }

    pub fn heads(&self) -> &[usize] {
        &self.head
    }

    /// Undirected neighbours of `i`.
    pub fn neighbours(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let p = self.parent(i);
        (p != 0).then_some(p).into_iter().chain(self.children[i].iter().copied())
    }

    /// Tree edges as `(dependent, head)` pairs.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..=self.len()).filter_map(|i| {
            let h = self.parent(i);
            (h != 0).then_some((i, h))
        })
    }

    fn lca_pair(&self, mut a: usize, mut b: usize) -> usize {
        while self.depth[a] > self.depth[b] {
            a = self.parent(a);
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent(b);
        }
        while a != b {
            a = self.parent(a);
            b = self.parent(b);
        }
        a
    }

    /// Deepest node that is an ancestor (inclusive) of every token of every
    /// span, folded pairwise.
    pub fn lca(&self, spans: &[Span]) -> usize {
        spans
            .iter()
            .flat_map(|s| s.tokens())
            .reduce(|acc, t| self.lca_pair(acc, t))
            .unwrap_or(self.root)
    }

    /// Nodes on the unique tree path from `u` to `v`, both included.
    pub fn path(&self, u: usize, v: usize) -> Vec<usize> {
        let top = self.lca_pair(u, v);
        let mut left = vec![u];
        let mut cur = u;
        while cur != top {
            cur = self.parent(cur);
            left.push(cur);
        }
        let mut right = Vec::new();
        cur = v;
        while cur != top {
            right.push(cur);
            cur = self.parent(cur);
        }
        left.extend(right.into_iter().rev());
        left
    }

    /// Union over token pairs `(u, v) ∈ a × b` of the nodes on the path u→v.
    pub fn sdp_nodes(&self, a: Span, b: Span) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for u in a.tokens() {
            for v in b.tokens() {
                out.extend(self.path(u, v));
            }
        }
        out
    }

    /// Path nodes for any number of entities: the union over all entity pairs.
    pub fn entity_path_nodes(&self, spans: &[Span]) -> BTreeSet<usize> {
        let mut out: BTreeSet<usize> = spans.iter().flat_map(|s| s.tokens()).collect();
        for (i, a) in spans.iter().enumerate() {
            for b in &spans[i + 1..] {
                out.extend(self.sdp_nodes(*a, *b));
            }
        }
        out
    }

    /// Keeps the nodes within `k` undirected edges of the entity path and the
    /// tree edges between kept nodes.
    pub fn prune(&self, spans: &[Span], k: Pruning) -> PrunedGraph {
        let kept_nodes: BTreeSet<usize> = match k {
            Pruning::Full => (1..=self.len()).collect(),
            Pruning::Hops(radius) => {
                let sources = self.entity_path_nodes(spans);
                let mut dist = vec![usize::MAX; self.len() + 1];
                let mut queue = VecDeque::new();
                for &s in &sources {
                    dist[s] = 0;
                    queue.push_back(s);
                }
                while let Some(u) = queue.pop_front() {
                    if dist[u] == radius {
                        continue;
                    }
                    for v in self.neighbours(u) {
                        if dist[v] == usize::MAX {
                            dist[v] = dist[u] + 1;
                            queue.push_back(v);
                        }
                    }
                }
                (1..=self.len()).filter(|&i| dist[i] != usize::MAX).collect()
            }
        };
        let kept_edges = self
            .edges()
            .filter(|(d, h)| kept_nodes.contains(d) && kept_nodes.contains(h))
            .collect();
        PrunedGraph {
            n: self.len(),
            kept_nodes,
            kept_edges,
            pruning: k,
        }
    }
}

/// Pruning distance: `Hops(k)` keeps the k-hop neighbourhood of the entity
/// path, `Full` keeps the whole tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Pruning {
    Hops(usize),
    Full,
}

impl Pruning {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" | "inf" | "-1" => Ok(Pruning::Full),
            other => other
                .parse()
                .map(Pruning::Hops)
                .map_err(|_| Error::config(format!("bad pruning distance {s:?}"))),
        }
    }
}

impl fmt::Display for Pruning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pruning::Hops(k) => write!(f, "{k}"),
            Pruning::Full => f.write_str("full"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrunedGraph {
    pub n: usize,
    pub kept_nodes: BTreeSet<usize>,
    /// `(dependent, head)` pairs.
    pub kept_edges: BTreeSet<(usize, usize)>,
    pub pruning: Pruning,
}

impl PrunedGraph {
    /// 0-based keep mask over all `n` tokens.
    pub fn keep_mask(&self) -> Vec<bool> {
        (1..=self.n).map(|i| self.kept_nodes.contains(&i)).collect()
    }

    pub fn adjacency(&self) -> NormAdjacency {
        NormAdjacency::new(self.n, self.kept_edges.iter().copied())
    }
}

/// `A` with reverse edges, `Ã = A + I` and degrees `d_i = Σ_j Ã_ij`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormAdjacency {
    pub a: Tensor,
    pub a_tilde: Tensor,
    pub degree: Vec<f64>,
}

impl NormAdjacency {
    /// From 1-based undirected edges over `n` nodes.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut a = Tensor::zeros(&[n, n]);
        for (i, j) in edges {
            a.set(i - 1, j - 1, 1.0);
            a.set(j - 1, i - 1, 1.0);
        }
        let mut a_tilde = a.clone();
        for i in 0..n {
            a_tilde.set(i, i, 1.0);
        }
        let degree = (0..n).map(|i| a_tilde.row(i).iter().sum()).collect();
        NormAdjacency { a, a_tilde, degree }
    }

    /// `Ã` with row `i` divided by `d_i`, the operator applied by a GCN layer.
    pub fn normalized(&self) -> Tensor {
        let mut out = self.a_tilde.clone();
        for (i, d) in self.degree.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v /= d);
        }
        out
    }
}

/// Plain-text dump of a pruned graph and its adjacency, one section per
/// block, for inspection and golden-file tests.
pub fn dump(inst: &Instance, pg: &PrunedGraph) -> String {
    let adj = pg.adjacency();
    let mut out = String::new();
    writeln!(out, "id\t{}", inst.id).unwrap();
    writeln!(out, "k\t{}", pg.pruning).unwrap();
    let nodes: Vec<String> = pg.kept_nodes.iter().map(|i| i.to_string()).collect();
    writeln!(out, "kept\t{}", nodes.join(" ")).unwrap();
    for (d, h) in &pg.kept_edges {
        writeln!(out, "edge\t{d}\t{h}").unwrap();
    }
    for i in 0..pg.n {
        let row: Vec<String> = adj.a_tilde.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(out, "a_tilde\t{}", row.join(" ")).unwrap();
    }
    let deg: Vec<String> = adj.degree.iter().map(|v| format!("{v}")).collect();
    writeln!(out, "degree\t{}", deg.join(" ")).unwrap();
    out
}

/// A uniformly relabelled random recursive tree on `n` nodes.
pub fn random_tree<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DepTree {
    let mut perm: Vec<usize> = (1..=n).collect();
    perm.shuffle(rng);
    let mut head = vec![0; n];
    for k in 1..n {
        let parent = perm[rng.gen_range(0..k)];
        head[perm[k] - 1] = parent;
    }
    DepTree::new(&head).expect("random recursive tree is valid")
}
