//! Reads generated BPMN back with a plain XML reader and checks graph
//! properties on what was actually written.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeInfo {
    /// Local element name, e.g. `task` or `parallelGateway`.
    pub kind: String,
    pub name: Option<String>,
    pub direction: Option<String>,
    /// Local name of the event definition child, if any.
    pub event_definition: Option<String>,
    pub documentation: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flow {
    pub id: String,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl Rect {
    pub fn overlaps(&self, o: &Rect) -> bool {
        self.x < o.x + o.width && o.x < self.x + self.width && self.y < o.y + o.height && o.y < self.y + self.height
    }
}

#[derive(Debug, Clone, Default)]
pub struct Inventory {
    pub lanes: Vec<(String, String, Vec<String>)>,
    pub nodes: BTreeMap<String, NodeInfo>,
    pub flows: Vec<Flow>,
    pub shapes: BTreeMap<String, Rect>,
    pub edges: BTreeMap<String, Vec<(f64, f64)>>,
    pub signals: Vec<String>,
    pub messages: Vec<String>,
}

const FLOW_NODES: &[&str] = &[
    "task",
    "userTask",
    "startEvent",
    "endEvent",
    "parallelGateway",
    "exclusiveGateway",
];

fn local(name: &[u8]) -> String {
    let s = String::from_utf8_lossy(name);
    s.rsplit(':').next().unwrap_or_default().to_string()
}

fn attr(e: &BytesStart<'_>, key: &str) -> Option<String> {
    e.attributes()
        .flatten()
        .find(|a| a.key.as_ref() == key.as_bytes())
        .map(|a| a.unescape_value().expect("attribute text").into_owned())
}

fn num(e: &BytesStart<'_>, key: &str) -> f64 {
    attr(e, key).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN)
}

impl Inventory {
    pub fn parse(xml: &str) -> Result<Inventory, String> {
        let mut reader = Reader::from_str(xml);
        let mut inv = Inventory::default();
        let mut stack: Vec<String> = Vec::new();
        let mut current_node: Option<String> = None;
        let mut current_lane: Option<usize> = None;
        let mut current_shape: Option<String> = None;
        let mut current_edge: Option<String> = None;
        let mut text = String::new();
        loop {
            let ev = reader
                .read_event()
                .map_err(|e| format!("XML error at {}: {e}", reader.buffer_position()))?;
            match ev {
                Event::Start(ref e) | Event::Empty(ref e) => {
                    let empty = matches!(ev, Event::Empty(_));
                    let name = local(e.name().as_ref());
                    let id = attr(e, "id");
                    match name.as_str() {
                        n if FLOW_NODES.contains(&n) => {
                            let id = id.ok_or("flow node without id")?;
                            inv.nodes.insert(
                                id.clone(),
                                NodeInfo {
                                    kind: n.to_string(),
                                    name: attr(e, "name"),
                                    direction: attr(e, "gatewayDirection"),
                                    event_definition: None,
                                    documentation: Vec::new(),
                                },
                            );
                            if !empty {
                                current_node = Some(id);
                            }
                        }
                        "signalEventDefinition" | "messageEventDefinition" => {
                            let owner = current_node.as_ref().ok_or("event definition outside a node")?;
                            inv.nodes.get_mut(owner).unwrap().event_definition = Some(name.clone());
                        }
                        "signal" => inv.signals.push(id.unwrap_or_default()),
                        "message" => inv.messages.push(id.unwrap_or_default()),
                        "lane" => {
                            inv.lanes
                                .push((id.unwrap_or_default(), attr(e, "name").unwrap_or_default(), Vec::new()));
                            if !empty {
                                current_lane = Some(inv.lanes.len() - 1);
                            }
                        }
                        "sequenceFlow" => inv.flows.push(Flow {
                            id: id.unwrap_or_default(),
                            source: attr(e, "sourceRef").unwrap_or_default(),
                            target: attr(e, "targetRef").unwrap_or_default(),
                        }),
                        "BPMNShape" => current_shape = attr(e, "bpmnElement"),
                        "Bounds" => {
                            let owner = current_shape.clone().ok_or("bounds outside a shape")?;
                            inv.shapes.insert(
                                owner,
                                Rect {
                                    x: num(e, "x"),
                                    y: num(e, "y"),
                                    width: num(e, "width"),
                                    height: num(e, "height"),
                                },
                            );
                        }
                        "BPMNEdge" => {
                            let el = attr(e, "bpmnElement").unwrap_or_default();
                            inv.edges.insert(el.clone(), Vec::new());
                            current_edge = Some(el);
                        }
                        "waypoint" => {
                            let owner = current_edge.as_ref().ok_or("waypoint outside an edge")?;
                            inv.edges.get_mut(owner).unwrap().push((num(e, "x"), num(e, "y")));
                        }
                        _ => {}
                    }
                    if !empty {
                        stack.push(name);
                        text.clear();
                    }
                }
                Event::Text(t) => text.push_str(&t.unescape().map_err(|e| e.to_string())?),
                Event::CData(t) => text.push_str(&String::from_utf8_lossy(&t)),
                Event::End(e) => {
                    let name = local(e.name().as_ref());
                    stack.pop();
                    match name.as_str() {
                        "flowNodeRef" => {
                            if let Some(l) = current_lane {
                                inv.lanes[l].2.push(text.trim().to_string());
                            }
                        }
                        "documentation" => {
                            if let Some(n) = &current_node {
                                inv.nodes.get_mut(n).unwrap().documentation.push(text.clone());
                            }
                        }
                        "lane" => current_lane = None,
                        "BPMNShape" => current_shape = None,
                        "BPMNEdge" => current_edge = None,
                        n if FLOW_NODES.contains(&n) => current_node = None,
                        _ => {}
                    }
                    text.clear();
                }
                Event::Eof => break,
                _ => {}
            }
        }
        Ok(inv)
    }

    pub fn count(&self, kind: &str) -> usize {
        self.nodes.values().filter(|n| n.kind == kind).count()
    }

    pub fn ids_of(&self, kind: &str) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.kind == kind)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Activity names (tasks and user tasks).
    pub fn activity_names(&self) -> BTreeSet<String> {
        self.nodes
            .values()
            .filter(|n| n.kind == "task" || n.kind == "userTask")
            .filter_map(|n| n.name.clone())
            .collect()
    }

    pub fn typed_starts(&self) -> usize {
        self.nodes
            .values()
            .filter(|n| n.kind == "startEvent" && n.event_definition.is_some())
            .count()
    }

    pub fn gateways(&self, kind: &str, direction: &str) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.kind == kind && n.direction.as_deref() == Some(direction))
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn lane_of(&self, node: &str) -> Option<&str> {
        self.lanes
            .iter()
            .find(|(_, _, refs)| refs.iter().any(|r| r == node))
            .map(|(id, _, _)| id.as_str())
    }

    fn adjacency(&self, forward: bool) -> BTreeMap<&str, Vec<&str>> {
        let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for f in &self.flows {
            let (a, b) = if forward {
                (&f.source, &f.target)
            } else {
                (&f.target, &f.source)
            };
            adj.entry(a.as_str()).or_default().push(b.as_str());
        }
        adj
    }

    fn reach<'a>(
        adj: &BTreeMap<&'a str, Vec<&'a str>>,
        from: &[&'a str],
        keep: impl Fn(&str) -> bool,
    ) -> BTreeSet<&'a str> {
        let mut seen: BTreeSet<&str> = from.iter().copied().collect();
        let mut queue: VecDeque<&str> = from.iter().copied().collect();
        while let Some(n) = queue.pop_front() {
            for &m in adj.get(n).into_iter().flatten() {
                if keep(m) && seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        seen
    }

    pub fn in_degree(&self, id: &str) -> usize {
        self.flows.iter().filter(|f| f.target == id).count()
    }

    pub fn out_degree(&self, id: &str) -> usize {
        self.flows.iter().filter(|f| f.source == id).count()
    }

    /// Flow ends resolve to nodes, lanes reference known nodes, and every
    /// element has diagram interchange.
    pub fn check_references(&self) -> Result<(), String> {
        for f in &self.flows {
            for end in [&f.source, &f.target] {
                if !self.nodes.contains_key(end) {
                    return Err(format!("flow {} references unknown node {end}", f.id));
                }
            }
            match self.edges.get(&f.id) {
                Some(points) if points.len() >= 2 => {}
                _ => return Err(format!("flow {} has no edge with two waypoints", f.id)),
            }
        }
        for (lane, _, refs) in &self.lanes {
            if let Some(r) = refs.iter().find(|r| !self.nodes.contains_key(*r)) {
                return Err(format!("lane {lane} references unknown node {r}"));
            }
            if !self.shapes.contains_key(lane) {
                return Err(format!("lane {lane} has no shape"));
            }
        }
        if let Some(n) = self.nodes.keys().find(|n| !self.shapes.contains_key(*n)) {
            return Err(format!("node {n} has no shape"));
        }
        Ok(())
    }

    /// Every node lies on a path from some start event to some end event.
    pub fn check_connectivity(&self) -> Result<(), String> {
        let starts = self.ids_of("startEvent");
        let ends = self.ids_of("endEvent");
        if starts.is_empty() || ends.is_empty() {
            return Err("missing start or end event".into());
        }
        let fwd = Self::reach(&self.adjacency(true), &starts, |_| true);
        let back = Self::reach(&self.adjacency(false), &ends, |_| true);
        for id in self.nodes.keys() {
            if !fwd.contains(id.as_str()) {
                return Err(format!("{id} is not reachable from a start event"));
            }
            if !back.contains(id.as_str()) {
                return Err(format!("{id} does not reach an end event"));
            }
        }
        Ok(())
    }

    /// Parallel forks re-converge inside their lane, gateways have the
    /// degree their direction implies, and the trigger merge takes one
    /// flow per start event.
    pub fn check_gateway_balance(&self) -> Result<(), String> {
        let fwd = self.adjacency(true);
        for id in self.gateways("parallelGateway", "Diverging") {
            if self.out_degree(id) < 2 || self.in_degree(id) != 1 {
                return Err(format!(
                    "fork {id} has in {} / out {}",
                    self.in_degree(id),
                    self.out_degree(id)
                ));
            }
            let lane = self.lane_of(id).ok_or(format!("fork {id} is in no lane"))?;
            let in_lane = |n: &str| self.lane_of(n) == Some(lane);
            let mut common: Option<BTreeSet<&str>> = None;
            for &branch in &fwd[id] {
                let r = Self::reach(&fwd, &[branch], in_lane);
                common = Some(match common {
                    None => r,
                    Some(c) => c.intersection(&r).copied().collect(),
                });
            }
            let joined = common.unwrap_or_default().into_iter().any(|n| {
                let node = &self.nodes[n];
                node.kind == "parallelGateway" && node.direction.as_deref() == Some("Converging")
            });
            if !joined {
                return Err(format!("fork {id} has no matching join in {lane}"));
            }
        }
        for id in self.gateways("parallelGateway", "Converging") {
            if self.in_degree(id) < 2 || self.out_degree(id) != 1 {
                return Err(format!(
                    "join {id} has in {} / out {}",
                    self.in_degree(id),
                    self.out_degree(id)
                ));
            }
        }
        let starts = self.count("startEvent");
        for id in self.ids_of("exclusiveGateway") {
            if self.in_degree(id) != starts {
                return Err(format!(
                    "merge {id} has in-degree {} for {starts} start events",
                    self.in_degree(id)
                ));
            }
        }
        Ok(())
    }

    /// All structural checks at once.
    pub fn check_all(&self) -> Result<(), String> {
        self.check_references()?;
        self.check_connectivity()?;
        self.check_gateway_balance()
    }
}

/// Reference, connectivity and balance checks plus the job, manual-job and
/// lane counts `p` implies.
pub fn check_structure(name: &str, p: &pipetwin_core::Pipeline, xml: &str) -> Result<(), String> {
    let inv = Inventory::parse(xml)?;
    inv.check_all().map_err(|e| format!("{name}: {e}"))?;
    let activities = inv.count("task") + inv.count("userTask");
    if activities != p.jobs.len() {
        return Err(format!("{name}: {activities} activities for {} jobs", p.jobs.len()));
    }
    let manual = p
        .jobs
        .iter()
        .filter(|j| j.when == pipetwin_core::model::WhenPolicy::Manual)
        .count();
    if inv.count("userTask") != manual {
        return Err(format!("{name}: user tasks do not match manual jobs"));
    }
    if inv.lanes.len() != p.stage_order.len() {
        return Err(format!("{name}: lane count differs from stage count"));
    }
    Ok(())
}
