use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::plan::{FlowNode, NodeKind, ProcessStructure, Slot};

/// Diagram dimensions in pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub column_width: i64,
    pub row_height: i64,
    pub node_width: i64,
    pub node_height: i64,
    pub margin: i64,
    pub min_lane_height: i64,
    pub lane_padding: i64,
    pub pool_header: i64,
    pub lane_header: i64,
    pub gateway_size: i64,
    pub event_size: i64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            column_width: 220,
            row_height: 90,
            node_width: 100,
            node_height: 80,
            margin: 60,
            min_lane_height: 120,
            lane_padding: 15,
            pool_header: 30,
            lane_header: 30,
            gateway_size: 50,
            event_size: 36,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub x: i64,
    pub y: i64,
    pub width: i64,
    pub height: i64,
}

impl Bounds {
    pub fn right(&self) -> i64 {
        self.x + self.width
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.height
    }

    pub fn center(&self) -> Point {
        Point {
            x: self.x + self.width / 2,
            y: self.y + self.height / 2,
        }
    }

    pub fn overlaps(&self, other: &Bounds) -> bool {
        self.x < other.right() && other.x < self.right() && self.y < other.bottom() && other.y < self.bottom()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Point {
    pub x: i64,
    pub y: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutPlan {
    /// Stage name to the left edge of its column.
    pub column_x: BTreeMap<String, i64>,
    pub node_positions: BTreeMap<String, Bounds>,
    pub edge_waypoints: BTreeMap<String, Vec<Point>>,
    pub lane_bounds: BTreeMap<String, Bounds>,
    pub pool: Bounds,
}

/// Assigns coordinates. Column 0 holds the start events, stage `k` sits in
/// column `k + 1` and the end event in the trailing column. Lanes are
/// horizontal bands sized to their row count.
pub fn layout(s: &ProcessStructure, c: &LayoutConfig) -> LayoutPlan {
    let content_x = c.margin + c.pool_header + c.lane_header;
    let column_left = |col: usize| content_x + col as i64 * c.column_width;
    let lane_height = |rows: usize| c.min_lane_height.max(rows as i64 * c.row_height + 2 * c.lane_padding);

    let mut lane_bounds = BTreeMap::new();
    let mut lane_top = Vec::with_capacity(s.lanes.len());
    let pool_width = c.pool_header + c.lane_header + s.column_count as i64 * c.column_width;
    let mut y = c.margin;
    for lane in &s.lanes {
        let h = lane_height(lane.rows);
        lane_top.push(y);
        lane_bounds.insert(
            lane.id.clone(),
            Bounds {
                x: c.margin + c.pool_header,
                y,
                width: pool_width - c.pool_header,
                height: h,
            },
        );
        y += h;
    }
    let pool_height = if s.lanes.is_empty() {
        let rows = s.nodes.iter().map(|n| n.row + 1).max().unwrap_or(1);
        lane_height(rows)
    } else {
        y - c.margin
    };
    let pool = Bounds {
        x: c.margin,
        y: c.margin,
        width: pool_width,
        height: pool_height,
    };

    let mut node_positions = BTreeMap::new();
    for n in &s.nodes {
        let top = n.lane.map_or(c.margin, |l| lane_top[l]);
        let center_y = top + c.lane_padding + n.row as i64 * c.row_height + c.node_height / 2;
        let (w, h) = match n.kind {
            NodeKind::Activity(_) => (c.node_width, c.node_height),
            NodeKind::StartEvent { .. } | NodeKind::EndEvent => (c.event_size, c.event_size),
            _ => (c.gateway_size, c.gateway_size),
        };
        let col = column_left(n.column);
        let center_x = match n.slot {
            Slot::Center => col + c.column_width / 2,
            // Gateways flank the activity with a 5 px gap on either side.
            Slot::Left => col + (c.column_width - c.node_width) / 2 - 5 - c.gateway_size / 2,
            Slot::Right => col + (c.column_width + c.node_width) / 2 + 5 + c.gateway_size / 2,
        };
        node_positions.insert(
            n.id.clone(),
            Bounds {
                x: center_x - w / 2,
                y: center_y - h / 2,
                width: w,
                height: h,
            },
        );
    }

    let by_id: BTreeMap<&str, &FlowNode> = s.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
    let mut edge_waypoints = BTreeMap::new();
    for f in &s.flows {
        let (src, tgt) = (by_id[f.source.as_str()], by_id[f.target.as_str()]);
        let points = route(
            src,
            &node_positions[&f.source],
            tgt,
            &node_positions[&f.target],
            column_left(tgt.column),
        );
        edge_waypoints.insert(f.id.clone(), points);
    }

    let column_x = s
        .stage_columns
        .iter()
        .map(|(stage, col)| (stage.clone(), column_left(*col)))
        .collect();

    LayoutPlan {
        column_x,
        node_positions,
        edge_waypoints,
        lane_bounds,
        pool,
    }
}

fn pt(x: i64, y: i64) -> Point {
    Point { x, y }
}

/// Orthogonal route between two shapes. Flows that change column turn on
/// the vertical bus at the target column's left edge.
fn route(src: &FlowNode, sb: &Bounds, tgt: &FlowNode, tb: &Bounds, bus_x: i64) -> Vec<Point> {
    let (sc, tc) = (sb.center(), tb.center());
    if src.column != tgt.column {
        let (start, end) = (pt(sb.right(), sc.y), pt(tb.x, tc.y));
        return if sc.y == tc.y {
            vec![start, end]
        } else {
            vec![start, pt(bus_x, sc.y), pt(bus_x, tc.y), end]
        };
    }
    if sc.y == tc.y {
        return if tc.x >= sc.x {
            vec![pt(sb.right(), sc.y), pt(tb.x, tc.y)]
        } else {
            vec![pt(sb.x, sc.y), pt(tb.right(), tc.y)]
        };
    }
    let down = tc.y > sc.y;
    let target_edge_y = if down { tb.y } else { tb.bottom() };
    if src.kind.is_event() {
        return vec![pt(sb.right(), sc.y), pt(tc.x, sc.y), pt(tc.x, target_edge_y)];
    }
    let p0 = pt(sc.x, if down { sb.bottom() } else { sb.y });
    if sc.x == tc.x {
        vec![p0, pt(tc.x, target_edge_y)]
    } else {
        let side = if tc.x > sc.x { tb.x } else { tb.right() };
        vec![p0, pt(sc.x, tc.y), pt(side, tc.y)]
    }
}
