use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::JobError;
use crate::bsp::{run_bsp, BspJob, BspOptions, BspProgram, Incoming, Outbox, PhaseReport};
use crate::cluster::Cluster;
use crate::types::{agent_id_from_global, agent_id_to_global, AddressError, AgentId, Backend};

pub const MAX_OUT_DEGREE: usize = 3;

/// Where vertices get their out-edges from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GraphSource {
    /// Seeded random graph; each node draws its own vertices' edges.
    Random { seed: u64, n_nodes: usize, agents_per_node: usize },
    /// Edges by global vertex index.
    Explicit { agents_per_node: usize, edges: Arc<Vec<Vec<AgentId>>> },
}

impl GraphSource {
    pub fn random(seed: u64, n_nodes: usize, agents_per_node: usize) -> Self {
        GraphSource::Random {
            seed,
            n_nodes,
            agents_per_node,
        }
    }

    /// Graph on `n_nodes x agents_per_node` vertices with the given edges
    /// by global index.
    pub fn explicit(agents_per_node: usize, edges: Vec<Vec<u64>>) -> Self {
        let edges = edges
            .into_iter()
            .map(|e| e.into_iter().map(|g| agent_id_from_global(g, agents_per_node)).collect())
            .collect();
        GraphSource::Explicit {
            agents_per_node,
            edges: Arc::new(edges),
        }
    }

    pub fn agents_per_node(&self) -> usize {
        match self {
            GraphSource::Random { agents_per_node, .. } | GraphSource::Explicit { agents_per_node, .. } => {
                *agents_per_node
            }
        }
    }

    pub fn n_vertices(&self) -> usize {
        match self {
            GraphSource::Random {
                n_nodes,
                agents_per_node,
                ..
            } => n_nodes * agents_per_node,
            GraphSource::Explicit { edges, .. } => edges.len(),
        }
    }

    pub fn out_edges(&self, v: AgentId) -> Vec<AgentId> {
        let per = self.agents_per_node();
        let g = agent_id_to_global(v, per).expect("vertex inside the graph");
        match self {
            GraphSource::Random { seed, .. } => random_edges(*seed, g, self.n_vertices() as u64, per),
            GraphSource::Explicit { edges, .. } => edges[g as usize].clone(),
        }
    }

    /// Out-edges of every vertex by global index.
    pub fn edge_list(&self) -> Vec<Vec<AgentId>> {
        let per = self.agents_per_node();
        (0..self.n_vertices() as u64)
            .map(|g| self.out_edges(agent_id_from_global(g, per)))
            .collect()
    }
}

/// Edges of vertex `g`: a degree uniform in `0..=3`, capped at the number
/// of other vertices, then that many distinct non-self targets.
fn random_edges(seed: u64, g: u64, total: u64, per: usize) -> Vec<AgentId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(g);
    let d = rng.gen_range(0..=MAX_OUT_DEGREE as u64).min(total.saturating_sub(1));
    let mut out: Vec<u64> = Vec::with_capacity(d as usize);
    while (out.len() as u64) < d {
        let t = rng.gen_range(0..total);
        if t != g && !out.contains(&t) {
            out.push(t);
        }
    }
    out.into_iter().map(|t| agent_id_from_global(t, per)).collect()
}

/// Seeded random graph with at most three out-edges per vertex.
pub fn generate_graph(seed: u64, n_nodes: usize, agents_per_node: usize) -> Vec<Vec<AgentId>> {
    GraphSource::random(seed, n_nodes, agents_per_node).edge_list()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: AgentId,
    /// Set once, by the first message received; the start is its own parent.
    pub parent: Option<AgentId>,
    pub out_edges: Vec<AgentId>,
}

/// Vertex program: adopt the first sender as parent, notify every target,
/// deactivate.
pub struct Explore {
    graph: GraphSource,
    start: AgentId,
}

impl Explore {
    pub fn new(graph: GraphSource, start: AgentId) -> Self {
        Explore { graph, start }
    }
}

impl BspProgram for Explore {
    type State = Vertex;
    type Msg = ();

    fn init(&self, id: AgentId) -> Vertex {
        Vertex {
            id,
            parent: None,
            out_edges: self.graph.out_edges(id),
        }
    }

    fn compute(
        &self,
        id: AgentId,
        v: &mut Vertex,
        inbox: Vec<Incoming<()>>,
        out: &mut Outbox<()>,
    ) -> Result<(), AddressError> {
        if v.parent.is_some() {
            return Ok(());
        }
        v.parent = match inbox.first() {
            Some(m) => Some(m.from),
            None if id == self.start => Some(id),
            None => return Ok(()),
        };
        for &t in &v.out_edges {
            out.send(t, ())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Exploration {
    /// Parent of every visited vertex.
    pub parents: BTreeMap<AgentId, AgentId>,
    pub reports: Vec<PhaseReport>,
    pub wall: Duration,
}

impl Exploration {
    pub fn phases(&self) -> u64 {
        self.reports.len() as u64
    }

    /// Depth of the parent tree plus one: the phases in which some vertex
    /// was visited. `None` if the parents do not form a tree.
    pub fn visiting_phases(&self) -> Option<u64> {
        let mut deepest = 0;
        for &v in self.parents.keys() {
            let (mut cur, mut depth) = (v, 0u64);
            while self.parents.get(&cur) != Some(&cur) {
                cur = *self.parents.get(&cur)?;
                depth += 1;
                if depth > self.parents.len() as u64 {
                    return None;
                }
            }
            deepest = deepest.max(depth);
        }
        (!self.parents.is_empty()).then_some(deepest + 1)
    }

    /// `vertex_id parent_id edge,edge,edge` per visited vertex, after a
    /// header naming the seed.
    pub fn dump(&self, seed: u64, edges: &[Vec<AgentId>], per_node: usize) -> String {
        let g = |a: &AgentId| agent_id_to_global(*a, per_node).expect("vertex in graph");
        let mut s = format!("# seed {seed}\n");
        for (v, p) in &self.parents {
            let e: Vec<String> = edges[g(v) as usize].iter().map(|t| g(t).to_string()).collect();
            let _ = writeln!(s, "{} {} {}", g(v), g(p), e.join(","));
        }
        s
    }
}

/// Breadth-first exploration of `graph` from `start` on `cluster`.
pub fn explore_graph(
    graph: &GraphSource,
    start: AgentId,
    cluster: &Cluster,
    backend: Backend,
    opts: &BspOptions,
) -> Result<Exploration, JobError> {
    let per = graph.agents_per_node();
    let job = BspJob::new(Explore::new(graph.clone(), start), per, vec![start]);
    let out = run_bsp(job, cluster, backend, opts)?;
    let parents = out
        .states
        .iter()
        .flatten()
        .filter_map(|v| v.parent.map(|p| (v.id, p)))
        .collect();
    Ok(Exploration {
        parents,
        reports: out.reports,
        wall: out.wall,
    })
}

/// BFS level of every vertex reachable from `start`, by global index.
pub fn bfs_levels(edges: &[Vec<AgentId>], start: AgentId, per_node: usize) -> Vec<Option<u32>> {
    let g = |a: AgentId| agent_id_to_global(a, per_node).expect("vertex in graph") as usize;
    let mut level = vec![None; edges.len()];
    let mut queue = VecDeque::from([g(start)]);
    level[g(start)] = Some(0);
    while let Some(v) = queue.pop_front() {
        let l = level[v].expect("queued vertices have a level");
        for &t in &edges[v] {
            let t = g(t);
            if level[t].is_none() {
                level[t] = Some(l + 1);
                queue.push_back(t);
            }
        }
    }
    level
}

/// Phases the engine must run: a visited vertex at level `l` computes in
/// phase `l`, and its messages, if any, keep phase `l + 1` busy.
pub fn expected_phases(edges: &[Vec<AgentId>], levels: &[Option<u32>]) -> u64 {
    levels
        .iter()
        .zip(edges)
        .filter_map(|(l, e)| l.map(|l| l as u64 + 1 + u64::from(!e.is_empty())))
        .max()
        .unwrap_or(0)
}

/// Checks that `parents` is a tree rooted at `start` over exactly the
/// vertices with a BFS level, using only graph edges.
pub fn check_tree(
    parents: &BTreeMap<AgentId, AgentId>,
    edges: &[Vec<AgentId>],
    levels: &[Option<u32>],
    start: AgentId,
    per_node: usize,
) -> Result<(), String> {
    let g = |a: AgentId| agent_id_to_global(a, per_node).map_err(|e| e.to_string()).map(|x| x as usize);
    if parents.get(&start) != Some(&start) {
        return Err(format!("root {start} is not its own parent"));
    }
    let reachable = levels.iter().filter(|l| l.is_some()).count();
    if parents.len() != reachable {
        return Err(format!("visited {} vertices, {reachable} reachable", parents.len()));
    }
    for (&v, &p) in parents {
        if levels[g(v)?].is_none() {
            return Err(format!("{v} visited but unreachable"));
        }
        if v != start && !edges[g(p)?].contains(&v) {
            return Err(format!("parent edge {p} -> {v} not in graph"));
        }
    }
    // Following parents from any vertex must reach the root within
    // |visited| steps.
    for &v in parents.keys() {
        let mut cur = v;
        let mut steps = 0;
        while cur != start {
            cur = *parents.get(&cur).ok_or_else(|| format!("{cur} has no parent"))?;
            steps += 1;
            if steps > parents.len() {
                return Err(format!("parent cycle through {v}"));
            }
        }
    }
    Ok(())
}
