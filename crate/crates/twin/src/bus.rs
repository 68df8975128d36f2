//! In-process publish/subscribe with per-topic sequencing and lossless
//! backpressure: a full subscriber buffer blocks the publisher.

use std::fmt;
use std::pin::Pin;
use std::sync::Arc;
use std::task::{Context, Poll};

use chrono::{DateTime, Utc};
use futures::Stream;
use pipetwin_core::PipelineRun;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::{mpsc, Mutex};

use crate::acquisition::{ChangeDetection, ConfigSnapshot};

pub const DEFAULT_BUFFER: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topic {
    ConfigSnapshot,
    ExecutionData,
    BpmnXml,
    ChangeDetection,
}

impl Topic {
    pub const ALL: [Topic; 4] = [
        Topic::ConfigSnapshot,
        Topic::ExecutionData,
        Topic::BpmnXml,
        Topic::ChangeDetection,
    ];

    fn index(self) -> usize {
        self as usize
    }

    /// Checks that `payload` has this topic's shape.
    pub fn check(self, payload: &Value) -> Result<(), BusError> {
        match self {
            Topic::ConfigSnapshot => decode::<SnapshotMessage>(self, payload).map(drop),
            Topic::ExecutionData => decode::<ExecutionData>(self, payload).map(drop),
            Topic::BpmnXml => {
                let m = decode::<BpmnXml>(self, payload)?;
                if !is_hash(&m.yaml_hash) {
                    return Err(BusError::SchemaViolation {
                        topic: self,
                        reason: format!("yaml_hash {:?} is not 64 lowercase hex characters", m.yaml_hash),
                    });
                }
                Ok(())
            }
            Topic::ChangeDetection => decode::<ChangeDetection>(self, payload).map(drop),
        }
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("unit variant"))
    }
}

pub fn is_hash(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn decode<T: DeserializeOwned>(topic: Topic, payload: &Value) -> Result<T, BusError> {
    T::deserialize(payload).map_err(|e| BusError::SchemaViolation {
        topic,
        reason: e.to_string(),
    })
}

/// Payload of [`Topic::ConfigSnapshot`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotMessage {
    pub project: String,
    pub snapshot: ConfigSnapshot,
}

/// Payload of [`Topic::ExecutionData`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionData {
    pub project: String,
    pub runs: Vec<PipelineRun>,
}

/// Payload of [`Topic::BpmnXml`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpmnXml {
    pub project: String,
    pub yaml_hash: String,
    pub xml: String,
}

/// A typed payload bound to its topic.
pub trait Message: Serialize + DeserializeOwned {
    const TOPIC: Topic;
}

impl Message for SnapshotMessage {
    const TOPIC: Topic = Topic::ConfigSnapshot;
}

impl Message for ExecutionData {
    const TOPIC: Topic = Topic::ExecutionData;
}

impl Message for BpmnXml {
    const TOPIC: Topic = Topic::BpmnXml;
}

impl Message for ChangeDetection {
    const TOPIC: Topic = Topic::ChangeDetection;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: Topic,
    pub sequence: u64,
    pub payload: Value,
    pub published_at: DateTime<Utc>,
}

impl Envelope {
    pub fn decode<T: Message>(&self) -> Result<T, BusError> {
        if self.topic != T::TOPIC {
            return Err(BusError::SchemaViolation {
                topic: self.topic,
                reason: format!("expected a {} envelope", T::TOPIC),
            });
        }
        decode(self.topic, &self.payload)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BusError {
    #[error("payload does not match the {topic} schema: {reason}")]
    SchemaViolation { topic: Topic, reason: String },
}

struct TopicState {
    last_sequence: u64,
    subscribers: Vec<mpsc::Sender<Envelope>>,
}

/// Cheap to clone; clones share topics.
#[derive(Clone)]
pub struct Bus {
    topics: Arc<[Mutex<TopicState>; 4]>,
    buffer: usize,
}

impl fmt::Debug for Bus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Bus")
            .field("buffer", &self.buffer)
            .finish_non_exhaustive()
    }
}

impl Default for Bus {
    fn default() -> Self {
        Bus::new(DEFAULT_BUFFER)
    }
}

impl Bus {
    /// `buffer` is the per-subscription capacity.
    pub fn new(buffer: usize) -> Self {
        let state = || {
            Mutex::new(TopicState {
                last_sequence: 0,
                subscribers: Vec::new(),
            })
        };
        Bus {
            topics: Arc::new([state(), state(), state(), state()]),
            buffer: buffer.max(1),
        }
    }

    /// Assigns the next sequence number and hands the envelope to every
    /// current subscriber, waiting while any of their buffers is full.
    pub async fn publish(&self, topic: Topic, payload: Value) -> Result<u64, BusError> {
        topic.check(&payload)?;
        let mut state = self.topics[topic.index()].lock().await;
        state.last_sequence += 1;
        let envelope = Envelope {
            topic,
            sequence: state.last_sequence,
            payload,
            published_at: Utc::now(),
        };
        let mut closed = Vec::new();
        for (i, tx) in state.subscribers.iter().enumerate() {
            if tx.send(envelope.clone()).await.is_err() {
                closed.push(i);
            }
        }
        for i in closed.into_iter().rev() {
            state.subscribers.swap_remove(i);
        }
        Ok(envelope.sequence)
    }

    pub async fn publish_message<T: Message>(&self, message: &T) -> Result<u64, BusError> {
        let payload = serde_json::to_value(message).map_err(|e| BusError::SchemaViolation {
            topic: T::TOPIC,
            reason: e.to_string(),
        })?;
        self.publish(T::TOPIC, payload).await
    }

    /// Receives envelopes published after this call returns.
    pub async fn subscribe(&self, topic: Topic) -> Subscription {
        let (tx, rx) = mpsc::channel(self.buffer);
        let mut state = self.topics[topic.index()].lock().await;
        state.subscribers.retain(|s| !s.is_closed());
        state.subscribers.push(tx);
        Subscription { topic, rx }
    }

    pub async fn last_sequence(&self, topic: Topic) -> u64 {
        self.topics[topic.index()].lock().await.last_sequence
    }

    pub async fn subscriber_count(&self, topic: Topic) -> usize {
        let state = self.topics[topic.index()].lock().await;
        state.subscribers.iter().filter(|s| !s.is_closed()).count()
    }
}

/// Dropping or closing a subscription stops delivery to it.
#[derive(Debug)]
pub struct Subscription {
    topic: Topic,
    rx: mpsc::Receiver<Envelope>,
}

impl Subscription {
    pub fn topic(&self) -> Topic {
        self.topic
    }

    pub async fn recv(&mut self) -> Option<Envelope> {
        self.rx.recv().await
    }

    pub fn try_recv(&mut self) -> Option<Envelope> {
        self.rx.try_recv().ok()
    }

    /// Stops delivery; envelopes already buffered can still be drained.
    pub fn close(&mut self) {
        self.rx.close();
    }
}

impl Stream for Subscription {
    type Item = Envelope;

    fn poll_next(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Option<Envelope>> {
        self.rx.poll_recv(cx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn execution(project: &str) -> Value {
        json!({ "project": project, "runs": [] })
    }

    #[tokio::test]
    async fn zero_subscribers_still_sequence() {
        let bus = Bus::new(4);
        assert_eq!(bus.publish(Topic::ExecutionData, execution("p")).await.unwrap(), 1);
        assert_eq!(bus.publish(Topic::ExecutionData, execution("p")).await.unwrap(), 2);
        assert_eq!(
            bus.publish(
                Topic::BpmnXml,
                json!({"project": "p", "yaml_hash": "a".repeat(64), "xml": ""})
            )
            .await
            .unwrap(),
            1
        );
    }

    #[tokio::test]
    async fn malformed_payloads_are_refused() {
        let bus = Bus::new(4);
        let err = bus
            .publish(Topic::ExecutionData, json!({"project": 3}))
            .await
            .unwrap_err();
        assert!(matches!(
            err,
            BusError::SchemaViolation {
                topic: Topic::ExecutionData,
                ..
            }
        ));
        let bad_hash = json!({"project": "p", "yaml_hash": "ABC", "xml": ""});
        assert!(bus.publish(Topic::BpmnXml, bad_hash).await.is_err());
        let extra = json!({"project": "p", "runs": [], "extra": 1});
        assert!(bus.publish(Topic::ExecutionData, extra).await.is_err());
        assert_eq!(bus.last_sequence(Topic::ExecutionData).await, 0);
    }

    #[tokio::test]
    async fn three_subscribers_see_one_to_five() {
        let bus = Bus::new(8);
        let mut subs = vec![
            bus.subscribe(Topic::ExecutionData).await,
            bus.subscribe(Topic::ExecutionData).await,
            bus.subscribe(Topic::ExecutionData).await,
        ];
        for _ in 0..5 {
            bus.publish(Topic::ExecutionData, execution("p")).await.unwrap();
        }
        for s in &mut subs {
            let seen: Vec<u64> = (0..5).map(|_| s.try_recv().unwrap().sequence).collect();
            assert_eq!(seen, [1, 2, 3, 4, 5]);
            assert!(s.try_recv().is_none());
        }
    }

    #[tokio::test]
    async fn late_subscribers_get_no_replay() {
        let bus = Bus::new(8);
        bus.publish(Topic::ExecutionData, execution("p")).await.unwrap();
        let mut s = bus.subscribe(Topic::ExecutionData).await;
        assert!(s.try_recv().is_none());
        bus.publish(Topic::ExecutionData, execution("p")).await.unwrap();
        assert_eq!(s.try_recv().unwrap().sequence, 2);
    }

    #[tokio::test]
    async fn dropped_subscriptions_are_pruned() {
        let bus = Bus::new(1);
        let s = bus.subscribe(Topic::ExecutionData).await;
        drop(s);
        // Would block forever on a full buffer if the sender were kept.
        for _ in 0..3 {
            bus.publish(Topic::ExecutionData, execution("p")).await.unwrap();
        }
        assert_eq!(bus.subscriber_count(Topic::ExecutionData).await, 0);
    }

    #[tokio::test]
    async fn typed_round_trip() {
        let bus = Bus::new(2);
        let mut s = bus.subscribe(Topic::BpmnXml).await;
        let m = BpmnXml {
            project: "p".into(),
            yaml_hash: "0".repeat(64),
            xml: "<x/>".into(),
        };
        bus.publish_message(&m).await.unwrap();
        let env = s.recv().await.unwrap();
        assert_eq!(env.decode::<BpmnXml>().unwrap(), m);
        assert!(env.decode::<ExecutionData>().is_err());
        assert_eq!(Topic::BpmnXml.to_string(), "bpmn_xml");
    }
}
