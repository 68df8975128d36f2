use quick_xml::events::{BytesDecl, BytesEnd, BytesStart, BytesText, Event};
use quick_xml::Writer;

use super::layout::LayoutPlan;
use super::plan::{EventType, NodeKind, ProcessStructure};

pub const NS_MODEL: &str = "http://www.omg.org/spec/BPMN/20100524/MODEL";
pub const NS_BPMNDI: &str = "http://www.omg.org/spec/BPMN/20100524/DI";
pub const NS_DC: &str = "http://www.omg.org/spec/DD/20100524/DC";
pub const NS_DI: &str = "http://www.omg.org/spec/DD/20100524/DI";

const PROCESS_ID: &str = "process_pipeline";
const COLLABORATION_ID: &str = "collaboration_pipeline";
const PARTICIPANT_ID: &str = "participant_pipeline";

struct Out {
    w: Writer<Vec<u8>>,
}

// Writing into a Vec cannot fail.
impl Out {
    fn emit(&mut self, event: Event<'_>) {
        self.w.write_event(event).expect("in-memory write");
    }

    fn start(name: &str, attrs: &[(&str, &str)]) -> BytesStart<'static> {
        let mut e = BytesStart::new(name.to_string());
        for (k, v) in attrs {
            e.push_attribute((*k, clean(v).as_str()));
        }
        e
    }

    fn open(&mut self, name: &str, attrs: &[(&str, &str)]) {
        self.emit(Event::Start(Self::start(name, attrs)));
    }

    fn close(&mut self, name: &str) {
        self.emit(Event::End(BytesEnd::new(name)));
    }

    fn empty(&mut self, name: &str, attrs: &[(&str, &str)]) {
        self.emit(Event::Empty(Self::start(name, attrs)));
    }

    fn text_element(&mut self, name: &str, text: &str) {
        self.open(name, &[]);
        let text = clean(text);
        if !text.is_empty() {
            self.emit(Event::Text(BytesText::new(&text)));
        }
        self.close(name);
    }
}

/// Replaces characters that XML 1.0 cannot carry.
fn clean(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            '\t' | '\n' | '\r' => c,
            c if (c as u32) < 0x20 || c == '\u{FFFE}' || c == '\u{FFFF}' => '\u{FFFD}',
            c => c,
        })
        .collect()
}

fn element_name(kind: &NodeKind) -> &'static str {
    match kind {
        NodeKind::StartEvent { .. } => "bpmn:startEvent",
        NodeKind::EndEvent => "bpmn:endEvent",
        NodeKind::Activity(a) => match a {
            super::ActivityKind::Task => "bpmn:task",
            super::ActivityKind::UserTask => "bpmn:userTask",
        },
        NodeKind::ParallelGateway(_) => "bpmn:parallelGateway",
        NodeKind::ExclusiveGateway(_) => "bpmn:exclusiveGateway",
    }
}

/// Writes the process model and its diagram interchange section.
pub fn serialize(s: &ProcessStructure, plan: &LayoutPlan) -> String {
    let mut out = Out {
        w: Writer::new_with_indent(Vec::new(), b' ', 2),
    };
    out.emit(Event::Decl(BytesDecl::new("1.0", Some("UTF-8"), None)));
    out.open(
        "bpmn:definitions",
        &[
            ("xmlns:bpmn", NS_MODEL),
            ("xmlns:bpmndi", NS_BPMNDI),
            ("xmlns:dc", NS_DC),
            ("xmlns:di", NS_DI),
            ("id", "definitions_pipeline"),
            ("targetNamespace", "urn:pipetwin:bpmn"),
            ("exporter", "pipetwin"),
            ("exporterVersion", env!("CARGO_PKG_VERSION")),
        ],
    );
    for (id, name) in &s.signals {
        out.empty("bpmn:signal", &[("id", id), ("name", name)]);
    }
    for (id, name) in &s.messages {
        out.empty("bpmn:message", &[("id", id), ("name", name)]);
    }

    out.open("bpmn:collaboration", &[("id", COLLABORATION_ID)]);
    out.empty(
        "bpmn:participant",
        &[
            ("id", PARTICIPANT_ID),
            ("name", &s.participant_name),
            ("processRef", PROCESS_ID),
        ],
    );
    out.close("bpmn:collaboration");

    out.open("bpmn:process", &[("id", PROCESS_ID), ("isExecutable", "false")]);
    if !s.lanes.is_empty() {
        out.open("bpmn:laneSet", &[("id", "laneset_pipeline")]);
        for lane in &s.lanes {
            if lane.node_ids.is_empty() {
                out.empty("bpmn:lane", &[("id", &lane.id), ("name", &lane.name)]);
                continue;
            }
            out.open("bpmn:lane", &[("id", &lane.id), ("name", &lane.name)]);
            for id in &lane.node_ids {
                out.text_element("bpmn:flowNodeRef", id);
            }
            out.close("bpmn:lane");
        }
        out.close("bpmn:laneSet");
    }

    for n in &s.nodes {
        let tag = element_name(&n.kind);
        let mut attrs: Vec<(&str, &str)> = vec![("id", &n.id)];
        if let Some(name) = &n.name {
            attrs.push(("name", name));
        }
        match &n.kind {
            NodeKind::ParallelGateway(d) | NodeKind::ExclusiveGateway(d) => {
                attrs.push(("gatewayDirection", d.as_str()))
            }
            _ => {}
        }
        out.open(tag, &attrs);
        for d in &n.documentation {
            out.text_element("bpmn:documentation", d);
        }
        for f in &n.incoming {
            out.text_element("bpmn:incoming", f);
        }
        for f in &n.outgoing {
            out.text_element("bpmn:outgoing", f);
        }
        if let NodeKind::StartEvent {
            event,
            trigger: Some(t),
        } = &n.kind
        {
            let def_id = format!("{}_definition", n.id);
            match event {
                EventType::Signal => out.empty(
                    "bpmn:signalEventDefinition",
                    &[("id", &def_id), ("signalRef", &format!("signal_{t}"))],
                ),
                EventType::Message => out.empty(
                    "bpmn:messageEventDefinition",
                    &[("id", &def_id), ("messageRef", &format!("message_{t}"))],
                ),
                EventType::Untyped => {}
            }
        }
        out.close(tag);
    }
    for f in &s.flows {
        out.empty(
            "bpmn:sequenceFlow",
            &[("id", &f.id), ("sourceRef", &f.source), ("targetRef", &f.target)],
        );
    }
    out.close("bpmn:process");

    out.open("bpmndi:BPMNDiagram", &[("id", "diagram_pipeline")]);
    out.open(
        "bpmndi:BPMNPlane",
        &[("id", "plane_pipeline"), ("bpmnElement", COLLABORATION_ID)],
    );
    shape(&mut out, PARTICIPANT_ID, &plan.pool, true);
    for lane in &s.lanes {
        shape(&mut out, &lane.id, &plan.lane_bounds[&lane.id], true);
    }
    for n in &s.nodes {
        shape(&mut out, &n.id, &plan.node_positions[&n.id], false);
    }
    for f in &s.flows {
        let id = format!("{}_di", f.id);
        out.open("bpmndi:BPMNEdge", &[("id", &id), ("bpmnElement", &f.id)]);
        for p in &plan.edge_waypoints[&f.id] {
            out.empty("di:waypoint", &[("x", &p.x.to_string()), ("y", &p.y.to_string())]);
        }
        out.close("bpmndi:BPMNEdge");
    }
    out.close("bpmndi:BPMNPlane");
    out.close("bpmndi:BPMNDiagram");
    out.close("bpmn:definitions");

    let mut xml = String::from_utf8(out.w.into_inner()).expect("writer emits UTF-8");
    xml.push('\n');
    xml
}

fn shape(out: &mut Out, element: &str, b: &super::layout::Bounds, horizontal: bool) {
    let id = format!("{element}_di");
    let mut attrs = vec![("id", id.as_str()), ("bpmnElement", element)];
    if horizontal {
        attrs.push(("isHorizontal", "true"));
    }
    out.open("bpmndi:BPMNShape", &attrs);
    out.empty(
        "dc:Bounds",
        &[
            ("x", &b.x.to_string()),
            ("y", &b.y.to_string()),
            ("width", &b.width.to_string()),
            ("height", &b.height.to_string()),
        ],
    );
    out.close("bpmndi:BPMNShape");
}
