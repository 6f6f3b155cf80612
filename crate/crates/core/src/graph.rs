//! DAG dependency inference, cycle detection and topological ordering.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::expr::placeholders;
use crate::template::{CompositeTemplate, StepDef};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("task `{task}` references unknown task `{reference}`")]
    UnresolvedReference { task: String, reference: String },
}

/// Sibling names a step reads from: `StepOutput` bindings plus
/// `{{tasks.<t>...}}` / `{{steps.<s>...}}` placeholders in `when` and `key_template`.
pub fn referenced_siblings(step: &StepDef) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = step
        .input_bindings
        .values()
        .filter_map(|v| v.referenced_step())
        .map(ToString::to_string)
        .collect();
    for text in step.when.iter().chain(step.key_template.iter()) {
        for p in placeholders(text) {
            if let Some(name) = sibling_of_path(p.path) {
                out.insert(name.to_string());
            }
        }
    }
    out
}

/// `tasks.<t>.outputs...` or `steps.<s>.outputs...` -> `<t>`.
pub fn sibling_of_path(path: &str) -> Option<&str> {
    let rest = path
        .strip_prefix("tasks.")
        .or_else(|| path.strip_prefix("steps."))?;
    rest.split_once('.').map(|(name, _)| name)
}

/// Edges `(producer, consumer)` of a DAG body, inferred from references and
/// unioned with explicit dependencies. Sorted.
pub fn infer_dag_dependencies(
    template: &CompositeTemplate,
) -> Result<Vec<(String, String)>, GraphError> {
    let names: BTreeSet<&str> = template.body.iter().map(|s| s.name.as_str()).collect();
    let mut edges = BTreeSet::new();
    for task in &template.body {
        let refs = referenced_siblings(task);
        for producer in refs.iter().chain(task.dependencies.iter()) {
            if !names.contains(producer.as_str()) {
                return Err(GraphError::UnresolvedReference {
                    task: task.name.clone(),
                    reference: producer.clone(),
                });
            }
            edges.insert((producer.clone(), task.name.clone()));
        }
    }
    Ok(edges.into_iter().collect())
}

/// Returns one cycle as a node list `[n0, n1, ..., nk]` with edges
/// `n0->n1 ... nk->n0`, or `None` when the graph is acyclic.
pub fn detect_cycles<S: AsRef<str>>(nodes: &[S], edges: &[(S, S)]) -> Option<Vec<String>> {
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in nodes {
        adj.entry(n.as_ref()).or_default();
    }
    for (a, b) in edges {
        adj.entry(a.as_ref()).or_default().push(b.as_ref());
        adj.entry(b.as_ref()).or_default();
    }
    for succ in adj.values_mut() {
        succ.sort_unstable();
        succ.dedup();
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Grey,
        Black,
    }
    let mut color: BTreeMap<&str, Color> = adj.keys().map(|k| (*k, Color::White)).collect();
    let roots: Vec<&str> = adj.keys().copied().collect();

    for root in roots {
        if color[root] != Color::White {
            continue;
        }
        // Iterative DFS: (node, next successor index); `path` mirrors the grey stack.
        let mut stack: Vec<(&str, usize)> = Vec::from([(root, 0)]);
        let mut path: Vec<&str> = Vec::from([root]);
        color.insert(root, Color::Grey);
        while let Some(&(node, idx)) = stack.last() {
            let succ = &adj[node];
            if idx < succ.len() {
                let next = succ[idx];
                if let Some(top) = stack.last_mut() {
                    top.1 += 1;
                }
                match color[next] {
                    Color::White => {
                        color.insert(next, Color::Grey);
                        stack.push((next, 0));
                        path.push(next);
                    }
                    Color::Grey => {
                        let start = path.iter().position(|n| *n == next).unwrap_or(0);
                        return Some(path[start..].iter().map(|s| s.to_string()).collect());
                    }
                    Color::Black => {}
                }
            } else {
                color.insert(node, Color::Black);
                stack.pop();
                path.pop();
            }
        }
    }
    None
}

/// Kahn's algorithm, always picking the smallest ready name, so the order is
/// deterministic. Errors with a cycle witness.
pub fn topological_order<S: AsRef<str>>(
    nodes: &[S],
    edges: &[(S, S)],
) -> Result<Vec<String>, Vec<String>> {
    let mut indeg: BTreeMap<&str, usize> = nodes.iter().map(|n| (n.as_ref(), 0)).collect();
    let mut adj: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (a, b) in edges {
        indeg.entry(a.as_ref()).or_insert(0);
        if adj.entry(a.as_ref()).or_default().insert(b.as_ref()) {
            *indeg.entry(b.as_ref()).or_insert(0) += 1;
        }
    }
    let mut ready: BTreeSet<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(n) = ready.pop_first() {
        order.push(n.to_string());
        for m in adj.get(n).into_iter().flatten() {
            let d = indeg.get_mut(m).expect("edge target registered");
            *d -= 1;
            if *d == 0 {
                ready.insert(m);
            }
        }
    }
    if order.len() == indeg.len() {
        Ok(order)
    } else {
        Err(detect_cycles(nodes, edges).unwrap_or_default())
    }
}

/// Direct predecessors of every node.
pub fn predecessors(edges: &[(String, String)]) -> BTreeMap<&str, BTreeSet<&str>> {
    let mut out: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (a, b) in edges {
        out.entry(b.as_str()).or_default().insert(a.as_str());
    }
    out
}

/// Nodes reachable from `start` (excluding it unless on a cycle).
pub fn reachable_from<'a>(
    start: &'a str,
    successors: &BTreeMap<&'a str, BTreeSet<&'a str>>,
) -> BTreeSet<&'a str> {
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([start]);
    while let Some(n) = queue.pop_front() {
        for m in successors.get(n).into_iter().flatten() {
            if seen.insert(*m) {
                queue.push_back(*m);
            }
        }
    }
    seen
}
