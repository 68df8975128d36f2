//! Concurrent publish/subscribe harness for the event bus.

use std::collections::BTreeMap;
use std::time::Duration;

use pipetwin_twin::bus::{Bus, ExecutionData, Topic};
use tokio::sync::Barrier;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StressReport {
    pub published: usize,
    /// Envelopes each early subscriber received.
    pub delivered: Vec<usize>,
    /// Every early subscriber saw sequences 1..=published in order.
    pub ordered: bool,
    /// Every subscriber saw each publisher's messages in publish order.
    pub per_publisher_order: bool,
    /// The late subscriber saw nothing published before it subscribed and
    /// a gap-free run after.
    pub no_replay: bool,
    /// A full buffer held a publisher back and released it without loss.
    pub backpressure: bool,
}

impl StressReport {
    pub fn passed(&self) -> bool {
        self.ordered
            && self.per_publisher_order
            && self.no_replay
            && self.backpressure
            && self.delivered.iter().all(|d| *d == self.published)
    }
}

fn payload(publisher: usize, n: usize) -> serde_json::Value {
    serde_json::to_value(ExecutionData {
        project: format!("p{publisher}/{n:06}"),
        runs: vec![],
    })
    .unwrap()
}

fn origin(env: &pipetwin_twin::Envelope) -> (usize, usize) {
    let p = env.payload["project"].as_str().unwrap();
    let (a, b) = p[1..].split_once('/').unwrap();
    (a.parse().unwrap(), b.parse().unwrap())
}

fn check(seen: &[pipetwin_twin::Envelope], expect_from: u64, expect_total: usize) -> (bool, bool) {
    let ordered = seen.len() == expect_total
        && seen
            .iter()
            .enumerate()
            .all(|(i, e)| e.sequence == expect_from + i as u64);
    let mut last: BTreeMap<usize, usize> = BTreeMap::new();
    let mut per_pub = true;
    for e in seen {
        let (p, n) = origin(e);
        if let Some(prev) = last.insert(p, n) {
            per_pub &= n == prev + 1;
        }
    }
    (ordered, per_pub)
}

/// `publishers` tasks each publish `per_publisher` envelopes on one topic
/// while `subscribers` tasks consume them through buffers of `buffer`.
pub async fn run(publishers: usize, subscribers: usize, per_publisher: usize, buffer: usize) -> StressReport {
    let bus = Bus::new(buffer);
    let topic = Topic::ExecutionData;
    let total = publishers * per_publisher;

    let mut consumers = Vec::new();
    for i in 0..subscribers {
        let mut sub = bus.subscribe(topic).await;
        consumers.push(tokio::spawn(async move {
            let mut seen = Vec::with_capacity(total);
            while seen.len() < total {
                match sub.recv().await {
                    Some(e) => seen.push(e),
                    None => break,
                }
                // Uneven consumers keep buffers filling up.
                if seen.len() % (50 + 25 * i) == 0 {
                    tokio::time::sleep(Duration::from_millis(1)).await;
                }
            }
            seen
        }));
    }

    let halfway = std::sync::Arc::new(Barrier::new(2));
    let mut producers = Vec::new();
    for p in 0..publishers {
        let (bus, halfway) = (bus.clone(), halfway.clone());
        producers.push(tokio::spawn(async move {
            for n in 0..per_publisher {
                if p == 0 && n == per_publisher / 2 {
                    halfway.wait().await;
                }
                bus.publish(topic, payload(p, n)).await.unwrap();
            }
        }));
    }

    halfway.wait().await;
    let before = bus.last_sequence(topic).await;
    let mut late = bus.subscribe(topic).await;
    let late_task = tokio::spawn(async move {
        let mut seen = Vec::new();
        while let Some(e) = late.recv().await {
            let done = e.sequence as usize == total;
            seen.push(e);
            if done {
                break;
            }
        }
        seen
    });

    for p in producers {
        p.await.unwrap();
    }
    let mut delivered = Vec::new();
    let (mut ordered, mut per_publisher_order) = (true, true);
    for c in consumers {
        let seen = c.await.unwrap();
        let (o, pp) = check(&seen, 1, total);
        ordered &= o;
        per_publisher_order &= pp;
        delivered.push(seen.len());
    }
    let late_seen = late_task.await.unwrap();
    let no_replay = match late_seen.first() {
        Some(first) => {
            let (contiguous, pp) = check(&late_seen, first.sequence, total + 1 - first.sequence as usize);
            per_publisher_order &= pp;
            first.sequence > before && contiguous
        }
        None => false,
    };

    StressReport {
        published: total,
        delivered,
        ordered,
        per_publisher_order,
        no_replay,
        backpressure: backpressure(buffer).await,
    }
}

/// With an idle subscriber, the publish after `buffer` envelopes waits
/// until one is consumed, and nothing is lost.
pub async fn backpressure(buffer: usize) -> bool {
    let bus = Bus::new(buffer);
    let mut sub = bus.subscribe(Topic::ExecutionData).await;
    for n in 0..buffer {
        let quick = tokio::time::timeout(
            Duration::from_millis(500),
            bus.publish(Topic::ExecutionData, payload(0, n)),
        );
        if quick.await.is_err() {
            return false;
        }
    }
    let blocked = {
        let bus = bus.clone();
        tokio::spawn(async move { bus.publish(Topic::ExecutionData, payload(0, buffer)).await })
    };
    tokio::time::sleep(Duration::from_millis(50)).await;
    if blocked.is_finished() {
        return false;
    }
    let first = sub.recv().await.map(|e| e.sequence);
    let released = tokio::time::timeout(Duration::from_secs(2), blocked).await;
    if !matches!(released, Ok(Ok(Ok(_)))) {
        return false;
    }
    let mut rest = Vec::new();
    while let Some(e) = sub.try_recv() {
        rest.push(e.sequence);
    }
    first == Some(1) && rest == (2..=buffer as u64 + 1).collect::<Vec<_>>()
}
