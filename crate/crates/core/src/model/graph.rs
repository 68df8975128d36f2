use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use petgraph::graph::{DiGraph, NodeIndex};
use petgraph::Direction;

use super::Pipeline;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("job {job:?} needs unknown job {target:?}")]
    UnresolvedNeed { job: String, target: String },
    #[error("needs graph contains a cycle through {0:?}")]
    Cycle(Vec<String>),
}

/// Directed `needs` graph over job names. An edge `u -> v` means `v`
/// declares `u` in its needs list.
#[derive(Debug, Clone)]
pub struct NeedsGraph {
    graph: DiGraph<String, ()>,
    index: BTreeMap<String, NodeIndex>,
}

/// Builds the needs graph of `pipeline`, one node per job.
pub fn needs_graph(pipeline: &Pipeline) -> Result<NeedsGraph, GraphError> {
    let mut graph = DiGraph::new();
    let mut index = BTreeMap::new();
    for job in &pipeline.jobs {
        let ix = graph.add_node(job.name.clone());
        index.insert(job.name.clone(), ix);
    }
    for job in &pipeline.jobs {
        let to = index[&job.name];
        for need in &job.needs {
            let from = *index.get(need).ok_or_else(|| GraphError::UnresolvedNeed {
                job: job.name.clone(),
                target: need.clone(),
            })?;
            graph.add_edge(from, to, ());
        }
    }
    Ok(NeedsGraph { graph, index })
}

impl NeedsGraph {
    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn edge_count(&self) -> usize {
        self.graph.edge_count()
    }

    /// All edges as `(dependency, dependent)` pairs, sorted.
    pub fn edges(&self) -> Vec<(&str, &str)> {
        let mut out: Vec<_> = self
            .graph
            .edge_indices()
            .map(|e| {
                let (a, b) = self.graph.edge_endpoints(e).expect("edge exists");
                (self.graph[a].as_str(), self.graph[b].as_str())
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn contains_edge(&self, from: &str, to: &str) -> bool {
        match (self.index.get(from), self.index.get(to)) {
            (Some(&a), Some(&b)) => self.graph.contains_edge(a, b),
            _ => false,
        }
    }

    /// Jobs that `name` directly enables, sorted by name.
    pub fn successors(&self, name: &str) -> Vec<&str> {
        self.neighbors(name, Direction::Outgoing)
    }

    /// Jobs that `name` directly needs, sorted by name.
    pub fn predecessors(&self, name: &str) -> Vec<&str> {
        self.neighbors(name, Direction::Incoming)
    }

    fn neighbors(&self, name: &str, dir: Direction) -> Vec<&str> {
        let Some(&ix) = self.index.get(name) else {
            return Vec::new();
        };
        let mut out: Vec<&str> = self
            .graph
            .neighbors_directed(ix, dir)
            .map(|n| self.graph[n].as_str())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Kahn's algorithm with the smallest ready name taken first, so the
    /// order is unique for a given graph.
    pub fn topological_order(&self) -> Result<Vec<&str>, GraphError> {
        let mut indegree: BTreeMap<NodeIndex, usize> = self
            .graph
            .node_indices()
            .map(|n| (n, self.graph.neighbors_directed(n, Direction::Incoming).count()))
            .collect();
        let mut ready: BinaryHeap<Reverse<(&str, NodeIndex)>> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&n, _)| Reverse((self.graph[n].as_str(), n)))
            .collect();
        let mut order = Vec::with_capacity(self.graph.node_count());
        while let Some(Reverse((name, n))) = ready.pop() {
            order.push(name);
            for m in self.graph.neighbors_directed(n, Direction::Outgoing) {
                let d = indegree.get_mut(&m).expect("node known");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse((self.graph[m].as_str(), m)));
                }
            }
        }
        if order.len() != self.graph.node_count() {
            let mut stuck: Vec<String> = indegree
                .iter()
                .filter(|(_, &d)| d > 0)
                .map(|(&n, _)| self.graph[n].clone())
                .collect();
            stuck.sort();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    pub fn inner(&self) -> &DiGraph<String, ()> {
        &self.graph
    }
}
