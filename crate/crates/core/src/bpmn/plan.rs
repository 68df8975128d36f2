use std::collections::{BTreeMap, BTreeSet};

use crate::model::{GraphError, Pipeline, Trigger, TriggerType};

use super::{lane_id, map_activity, sanitize, task_id, ActivityKind, BpmnError};

pub const TRIGGER_MERGE_ID: &str = "gw_trigger_merge";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventType {
    Untyped,
    Signal,
    Message,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StartSpec {
    pub id: String,
    pub name: String,
    pub trigger: Option<TriggerType>,
    pub event: EventType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StartEventPlan {
    pub starts: Vec<StartSpec>,
    /// Set when two or more start events converge on an exclusive gateway.
    pub merge_gateway: Option<String>,
    pub warnings: Vec<String>,
}

pub fn plan_start_events(triggers: &[Trigger]) -> StartEventPlan {
    let mut warnings = Vec::new();
    if triggers.is_empty() {
        return StartEventPlan {
            starts: vec![StartSpec {
                id: "start".into(),
                name: "start".into(),
                trigger: None,
                event: EventType::Untyped,
            }],
            merge_gateway: None,
            warnings,
        };
    }
    let starts = triggers
        .iter()
        .map(|t| {
            let ty = t.trigger_type;
            let event = match ty {
                TriggerType::Push | TriggerType::Schedule | TriggerType::TagPush => EventType::Signal,
                TriggerType::MergeRequest => EventType::Message,
                TriggerType::Api | TriggerType::Web => {
                    warnings.push(format!(
                        "trigger {ty} has no event definition; rendered as an untyped start event"
                    ));
                    EventType::Untyped
                }
            };
            StartSpec {
                id: format!("start_{ty}"),
                name: ty.to_string(),
                trigger: Some(ty),
                event,
            }
        })
        .collect::<Vec<_>>();
    let merge_gateway = (starts.len() >= 2).then(|| TRIGGER_MERGE_ID.to_string());
    StartEventPlan {
        starts,
        merge_gateway,
        warnings,
    }
}

/// Gateway decisions for one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageGateways {
    pub stage: String,
    /// Jobs in vertical order: within-stage topological, ties by name.
    pub rows: Vec<String>,
    /// Jobs with no same-stage predecessor, in row order.
    pub entries: Vec<String>,
    /// Jobs with no same-stage successor, in row order.
    pub exits: Vec<String>,
    pub fork: bool,
    pub join: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GatewayPlan {
    /// One entry per stage in stage order, empty stages included.
    pub stages: Vec<StageGateways>,
    /// Same-stage predecessors of each job, in row order.
    pub preds: BTreeMap<String, Vec<String>>,
    /// Same-stage successors of each job, in row order.
    pub succs: BTreeMap<String, Vec<String>>,
    pub job_joins: BTreeSet<String>,
    pub job_splits: BTreeSet<String>,
}

impl GatewayPlan {
    pub fn gateway_count(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.fork as usize + s.join as usize)
            .sum::<usize>()
            + self.job_joins.len()
            + self.job_splits.len()
    }
}

/// Decides where parallel gateways go. Needs that cross stages are carried
/// by the stage sequence and produce no gateway.
pub fn plan_gateways(pipeline: &Pipeline) -> Result<GatewayPlan, GraphError> {
    let mut plan = GatewayPlan::default();
    for stage in &pipeline.stage_order {
        let members: BTreeSet<&str> = pipeline.jobs_in_stage(stage).map(|j| j.name.as_str()).collect();
        let mut preds: BTreeMap<&str, BTreeSet<&str>> = members.iter().map(|&m| (m, BTreeSet::new())).collect();
        let mut succs: BTreeMap<&str, BTreeSet<&str>> = preds.clone();
        for job in pipeline.jobs_in_stage(stage) {
            for need in &job.needs {
                if members.contains(need.as_str()) && need != &job.name {
                    preds.get_mut(job.name.as_str()).expect("member").insert(need.as_str());
                    succs.get_mut(need.as_str()).expect("member").insert(job.name.as_str());
                }
            }
        }

        let mut indegree: BTreeMap<&str, usize> = preds.iter().map(|(k, v)| (*k, v.len())).collect();
        let mut ready: BTreeSet<&str> = indegree.iter().filter(|(_, &d)| d == 0).map(|(k, _)| *k).collect();
        let mut rows = Vec::with_capacity(members.len());
        while let Some(next) = ready.pop_first() {
            rows.push(next.to_string());
            for &s in &succs[next] {
                let d = indegree.get_mut(s).expect("member");
                *d -= 1;
                if *d == 0 {
                    ready.insert(s);
                }
            }
        }
        if rows.len() != members.len() {
            let stuck = indegree
                .into_iter()
                .filter(|(_, d)| *d > 0)
                .map(|(k, _)| k.to_string())
                .collect();
            return Err(GraphError::Cycle(stuck));
        }

        let position: BTreeMap<&str, usize> = rows.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let in_row_order = |set: &BTreeSet<&str>| {
            let mut v: Vec<&str> = set.iter().copied().collect();
            v.sort_by_key(|n| position[n]);
            v.into_iter().map(str::to_string).collect::<Vec<_>>()
        };
        for name in &rows {
            let p = in_row_order(&preds[name.as_str()]);
            let s = in_row_order(&succs[name.as_str()]);
            if p.len() >= 2 {
                plan.job_joins.insert(name.clone());
            }
            if s.len() >= 2 {
                plan.job_splits.insert(name.clone());
            }
            plan.preds.insert(name.clone(), p);
            plan.succs.insert(name.clone(), s);
        }
        let entries: Vec<String> = rows.iter().filter(|n| plan.preds[*n].is_empty()).cloned().collect();
        let exits: Vec<String> = rows.iter().filter(|n| plan.succs[*n].is_empty()).cloned().collect();
        plan.stages.push(StageGateways {
            stage: stage.clone(),
            fork: entries.len() >= 2,
            join: exits.len() >= 2,
            rows,
            entries,
            exits,
        });
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatewayDirection {
    Diverging,
    Converging,
}

impl GatewayDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            GatewayDirection::Diverging => "Diverging",
            GatewayDirection::Converging => "Converging",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    StartEvent {
        event: EventType,
        trigger: Option<TriggerType>,
    },
    EndEvent,
    Activity(ActivityKind),
    ParallelGateway(GatewayDirection),
    ExclusiveGateway(GatewayDirection),
}

impl NodeKind {
    pub fn is_gateway(&self) -> bool {
        matches!(self, NodeKind::ParallelGateway(_) | NodeKind::ExclusiveGateway(_))
    }

    pub fn is_event(&self) -> bool {
        matches!(self, NodeKind::StartEvent { .. } | NodeKind::EndEvent)
    }
}

/// Horizontal position of a node inside its column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Stage fork or job join, left of the activity.
    Left,
    Center,
    /// Job split or stage join, right of the activity.
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowNode {
    pub id: String,
    pub name: Option<String>,
    pub kind: NodeKind,
    pub lane: Option<usize>,
    pub column: usize,
    pub row: usize,
    pub slot: Slot,
    pub documentation: Vec<String>,
    pub incoming: Vec<String>,
    pub outgoing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceFlow {
    pub id: String,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lane {
    pub id: String,
    pub name: String,
    pub node_ids: Vec<String>,
    /// Rows the lane must hold; at least 1.
    pub rows: usize,
}

/// The process graph with placement hints, before coordinates are assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessStructure {
    pub participant_name: String,
    pub lanes: Vec<Lane>,
    /// Flow nodes in creation order.
    pub nodes: Vec<FlowNode>,
    /// Sequence flows in creation order.
    pub flows: Vec<SequenceFlow>,
    pub column_count: usize,
    /// Stage name and its column.
    pub stage_columns: Vec<(String, usize)>,
    pub signals: Vec<(String, String)>,
    pub messages: Vec<(String, String)>,
    pub element_index: BTreeMap<String, String>,
    pub gateway_ids: Vec<String>,
    pub lane_index: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl ProcessStructure {
    pub fn node(&self, id: &str) -> Option<&FlowNode> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

struct Builder {
    nodes: Vec<FlowNode>,
    index: BTreeMap<String, usize>,
    flows: Vec<SequenceFlow>,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn node(
        &mut self,
        id: String,
        name: Option<String>,
        kind: NodeKind,
        lane: Option<usize>,
        column: usize,
        row: usize,
        slot: Slot,
        documentation: Vec<String>,
    ) -> String {
        self.index.insert(id.clone(), self.nodes.len());
        self.nodes.push(FlowNode {
            id: id.clone(),
            name,
            kind,
            lane,
            column,
            row,
            slot,
            documentation,
            incoming: Vec::new(),
            outgoing: Vec::new(),
        });
        id
    }

    fn gateway(&mut self, id: String, kind: NodeKind, lane: usize, column: usize, row: usize, slot: Slot) -> String {
        self.node(id, None, kind, Some(lane), column, row, slot, Vec::new())
    }

    fn connect(&mut self, source: &str, target: &str) {
        let id = format!("flow_{:04}", self.flows.len() + 1);
        self.nodes[self.index[source]].outgoing.push(id.clone());
        self.nodes[self.index[target]].incoming.push(id.clone());
        self.flows.push(SequenceFlow {
            id,
            source: source.to_string(),
            target: target.to_string(),
        });
    }

    fn get(&self, id: &str) -> &FlowNode {
        &self.nodes[self.index[id]]
    }
}

fn check_collisions<'a>(kind: &'static str, names: impl Iterator<Item = &'a str>) -> Result<(), BpmnError> {
    let mut seen: BTreeMap<String, &str> = BTreeMap::new();
    for name in names {
        let id = sanitize(name);
        if let Some(prev) = seen.get(&id) {
            if *prev != name {
                return Err(BpmnError::SanitizationCollision {
                    kind,
                    first: prev.to_string(),
                    second: name.to_string(),
                    id,
                });
            }
        }
        seen.insert(id, name);
    }
    Ok(())
}

/// Builds the flow-node graph: start events, per-stage gateways and
/// activities, the stage-to-stage links, and the end event.
pub fn build_structure(pipeline: &Pipeline) -> Result<ProcessStructure, BpmnError> {
    check_collisions("job", pipeline.jobs.iter().map(|j| j.name.as_str()))?;
    check_collisions("stage", pipeline.stage_order.iter().map(String::as_str))?;

    let gateways = plan_gateways(pipeline)?;
    let starts = plan_start_events(&pipeline.triggers);
    let column_count = pipeline.stage_order.len() + 2;

    let start_lane = gateways
        .stages
        .iter()
        .position(|s| !s.rows.is_empty())
        .or(if pipeline.stage_order.is_empty() { None } else { Some(0) });

    let mut b = Builder {
        nodes: Vec::new(),
        index: BTreeMap::new(),
        flows: Vec::new(),
    };

    let mut signals = Vec::new();
    let mut messages = Vec::new();
    let mut start_ids = Vec::new();
    for (row, s) in starts.starts.iter().enumerate() {
        if let Some(t) = s.trigger {
            match s.event {
                EventType::Signal => signals.push((format!("signal_{t}"), t.to_string())),
                EventType::Message => messages.push((format!("message_{t}"), t.to_string())),
                EventType::Untyped => {}
            }
        }
        start_ids.push(b.node(
            s.id.clone(),
            Some(s.name.clone()),
            NodeKind::StartEvent {
                event: s.event,
                trigger: s.trigger,
            },
            start_lane,
            0,
            row,
            Slot::Center,
            Vec::new(),
        ));
    }
    let mut gateway_ids = Vec::new();
    let mut cursor = match &starts.merge_gateway {
        Some(id) => {
            let merge = b.node(
                id.clone(),
                None,
                NodeKind::ExclusiveGateway(GatewayDirection::Converging),
                start_lane,
                0,
                0,
                Slot::Right,
                Vec::new(),
            );
            gateway_ids.push(merge.clone());
            for s in &start_ids {
                b.connect(s, &merge);
            }
            merge
        }
        None => start_ids[0].clone(),
    };

    let mut element_index = BTreeMap::new();
    let mut stage_columns = Vec::new();
    for (k, sg) in gateways.stages.iter().enumerate() {
        let column = k + 1;
        stage_columns.push((sg.stage.clone(), column));
        if sg.rows.is_empty() {
            continue;
        }
        let row_of: BTreeMap<&str, usize> = sg.rows.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let s_id = sanitize(&sg.stage);

        let fork = sg.fork.then(|| {
            b.gateway(
                format!("gw_stage_fork_{s_id}"),
                NodeKind::ParallelGateway(GatewayDirection::Diverging),
                k,
                column,
                row_of[sg.entries[0].as_str()],
                Slot::Left,
            )
        });
        if let Some(f) = &fork {
            gateway_ids.push(f.clone());
        }
        let mut input = BTreeMap::new();
        let mut output = BTreeMap::new();
        for (row, name) in sg.rows.iter().enumerate() {
            let job = pipeline.job(name).expect("planned jobs exist");
            let j_id = sanitize(name);
            let task = task_id(name);
            if gateways.job_joins.contains(name) {
                let id = b.gateway(
                    format!("gw_job_join_{j_id}"),
                    NodeKind::ParallelGateway(GatewayDirection::Converging),
                    k,
                    column,
                    row,
                    Slot::Left,
                );
                gateway_ids.push(id.clone());
                input.insert(name.as_str(), id);
            } else {
                input.insert(name.as_str(), task.clone());
            }
            let activity = map_activity(job);
            b.node(
                task.clone(),
                Some(name.clone()),
                NodeKind::Activity(activity.kind),
                Some(k),
                column,
                row,
                Slot::Center,
                activity.documentation,
            );
            element_index.insert(name.clone(), task.clone());
            if gateways.job_splits.contains(name) {
                let id = b.gateway(
                    format!("gw_job_split_{j_id}"),
                    NodeKind::ParallelGateway(GatewayDirection::Diverging),
                    k,
                    column,
                    row,
                    Slot::Right,
                );
                gateway_ids.push(id.clone());
                output.insert(name.as_str(), id);
            } else {
                output.insert(name.as_str(), task);
            }
        }
        let join = sg.join.then(|| {
            b.gateway(
                format!("gw_stage_join_{s_id}"),
                NodeKind::ParallelGateway(GatewayDirection::Converging),
                k,
                column,
                row_of[sg.exits.last().expect("join implies exits").as_str()],
                Slot::Right,
            )
        });
        if let Some(j) = &join {
            gateway_ids.push(j.clone());
        }

        let entry_point = fork.clone().unwrap_or_else(|| input[sg.entries[0].as_str()].clone());
        b.connect(&cursor, &entry_point);
        if let Some(f) = &fork {
            for e in &sg.entries {
                b.connect(f, &input[e.as_str()]);
            }
        }
        for name in &sg.rows {
            for p in &gateways.preds[name] {
                b.connect(&output[p.as_str()], &input[name.as_str()]);
            }
            let task = task_id(name);
            if input[name.as_str()] != task {
                b.connect(&input[name.as_str()], &task);
            }
            if output[name.as_str()] != task {
                b.connect(&task, &output[name.as_str()]);
            }
        }
        cursor = match &join {
            Some(j) => {
                for x in &sg.exits {
                    b.connect(&output[x.as_str()], j);
                }
                j.clone()
            }
            None => output[sg.exits[0].as_str()].clone(),
        };
    }

    let (end_lane, end_row) = {
        let tail = b.get(&cursor);
        (tail.lane, if tail.column == 0 { 0 } else { tail.row })
    };
    b.node(
        "end".into(),
        Some("end".into()),
        NodeKind::EndEvent,
        end_lane,
        column_count - 1,
        end_row,
        Slot::Center,
        Vec::new(),
    );
    b.connect(&cursor, "end");

    let mut lanes: Vec<Lane> = gateways
        .stages
        .iter()
        .map(|sg| Lane {
            id: lane_id(&sg.stage),
            name: sg.stage.clone(),
            node_ids: Vec::new(),
            rows: sg.rows.len().max(1),
        })
        .collect();
    if let Some(l) = start_lane {
        lanes[l].rows = lanes[l].rows.max(starts.starts.len());
    }
    for n in &b.nodes {
        if let Some(l) = n.lane {
            lanes[l].node_ids.push(n.id.clone());
        }
    }
    let lane_index = lanes.iter().map(|l| (l.name.clone(), l.id.clone())).collect();

    let participant_name = if pipeline.file_path.is_empty() {
        "pipeline".to_string()
    } else {
        pipeline.file_path.clone()
    };

    Ok(ProcessStructure {
        participant_name,
        lanes,
        nodes: b.nodes,
        flows: b.flows,
        column_count,
        stage_columns,
        signals,
        messages,
        element_index,
        gateway_ids,
        lane_index,
        warnings: starts.warnings,
    })
}
