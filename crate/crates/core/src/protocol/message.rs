//! Messages exchanged between roles and the append-only ledger recording them.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Role {
    Client(usize),
    Server(usize),
    /// The SFL weight aggregator.
    FedServer,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Client(i) => write!(f, "client:{i}"),
            Role::Server(i) => write!(f, "server:{i}"),
            Role::FedServer => f.write_str("fed"),
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "fed" {
            return Ok(Role::FedServer);
        }
        let (kind, id) = s
            .split_once(':')
            .ok_or_else(|| Error::format(format!("bad role `{s}`")))?;
        let id = id
            .parse()
            .map_err(|_| Error::format(format!("bad role id in `{s}`")))?;
        match kind {
            "client" => Ok(Role::Client(id)),
            "server" => Ok(Role::Server(id)),
            _ => Err(Error::format(format!("bad role `{s}`"))),
        }
    }
}

impl From<Role> for String {
    fn from(r: Role) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for Role {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl Role {
    pub fn is_client(&self) -> bool {
        matches!(self, Role::Client(_))
    }
}

/// Identifies one client iteration: `seq`-th batch of `client` in `epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BatchId {
    pub epoch: usize,
    pub client: usize,
    pub seq: usize,
}

/// Why a weight snapshot was sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotKind {
    /// Round-robin SL: previous client to the next one within an epoch.
    Relay,
    /// Round-robin SL: last client of an epoch to the first of the next.
    Carry,
    /// Round-robin SL: final weights to the remaining clients.
    Broadcast,
    /// SFL: client weights to the aggregator.
    Upload,
    /// SFL: averaged weights back to a client.
    Sync,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    SmashedBatch {
        batch: BatchId,
        activations: Tensor,
        labels: Vec<usize>,
    },
    SplitGradients {
        batch: BatchId,
        gradients: Tensor,
    },
    WeightSnapshot {
        kind: SnapshotKind,
        params: ParameterSet,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    SmashedBatch,
    SplitGradients,
    WeightSnapshot,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::SmashedBatch { .. } => MessageKind::SmashedBatch,
            Message::SplitGradients { .. } => MessageKind::SplitGradients,
            Message::WeightSnapshot { .. } => MessageKind::WeightSnapshot,
        }
    }

    /// Scalars carried by the payload (labels excluded).
    pub fn scalar_count(&self) -> usize {
        match self {
            Message::SmashedBatch { activations, .. } => activations.len(),
            Message::SplitGradients { gradients, .. } => gradients.len(),
            Message::WeightSnapshot { params, .. } => params.scalar_count(),
        }
    }

    pub fn batch_id(&self) -> Option<BatchId> {
        match self {
            Message::SmashedBatch { batch, .. } | Message::SplitGradients { batch, .. } => {
                Some(*batch)
            }
            Message::WeightSnapshot { .. } => None,
        }
    }
}

/// Payload kept for verbose ledgers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Smashed {
        activations: Tensor,
        labels: Vec<usize>,
        /// Dataset indices of the batch rows. Ground truth for leakage
        /// evaluation only; never consulted by the protocol.
        sample_ids: Vec<usize>,
    },
    Gradients {
        gradients: Tensor,
    },
    Weights {
        params: ParameterSet,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub seq: u64,
    pub epoch: usize,
    pub variant: MessageKind,
    pub sender: Role,
    pub receiver: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_id: Option<BatchId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<SnapshotKind>,
    pub scalars: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Payload>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerOptions {
    /// Keep message payloads.
    pub verbose: bool,
    /// With `verbose`, keep payloads only for this many most recent epochs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_epochs: Option<usize>,
}

/// Append-only record of every message in a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageLedger {
    pub options: LedgerOptions,
    entries: Vec<Envelope>,
}

impl MessageLedger {
    pub fn new(options: LedgerOptions) -> Self {
        MessageLedger {
            options,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[Envelope] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Builds the envelope for `msg`; the payload is cloned only when verbose.
    pub fn envelope(
        &self,
        msg: &Message,
        sender: Role,
        receiver: Role,
        epoch: usize,
        sample_ids: Option<&[usize]>,
    ) -> Envelope {
        let payload = self.options.verbose.then(|| match msg {
            Message::SmashedBatch {
                activations,
                labels,
                ..
            } => Payload::Smashed {
                activations: activations.clone(),
                labels: labels.clone(),
                sample_ids: sample_ids.map(<[usize]>::to_vec).unwrap_or_default(),
            },
            Message::SplitGradients { gradients, .. } => Payload::Gradients {
                gradients: gradients.clone(),
            },
            Message::WeightSnapshot { params, .. } => Payload::Weights {
                params: params.clone(),
            },
        });
        Envelope {
            seq: 0,
            epoch,
            variant: msg.kind(),
            sender,
            receiver,
            batch_id: msg.batch_id(),
            snapshot: match msg {
                Message::WeightSnapshot { kind, .. } => Some(*kind),
                _ => None,
            },
            scalars: msg.scalar_count(),
            payload,
        }
    }

    /// Appends an envelope, assigning the next sequence number.
    pub fn push(&mut self, mut env: Envelope) {
        env.seq = self.entries.len() as u64;
        self.entries.push(env);
    }

    pub fn record(
        &mut self,
        msg: &Message,
        sender: Role,
        receiver: Role,
        epoch: usize,
        sample_ids: Option<&[usize]>,
    ) {
        let env = self.envelope(msg, sender, receiver, epoch, sample_ids);
        self.push(env);
    }

    /// Drops payloads older than the retention window, given the epoch now starting.
    pub fn begin_epoch(&mut self, epoch: usize) {
        if let Some(keep) = self.options.payload_epochs {
            for e in &mut self.entries {
                if e.epoch + keep <= epoch {
                    e.payload = None;
                }
            }
        }
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.entries.iter().filter(|e| e.variant == kind).count()
    }

    /// Weight snapshots sent from one client directly to another.
    pub fn client_to_client_snapshots(&self) -> impl Iterator<Item = &Envelope> {
        self.entries.iter().filter(|e| {
            e.variant == MessageKind::WeightSnapshot
                && e.sender.is_client()
                && e.receiver.is_client()
        })
    }

    /// Fails if any client ever received another client's weights.
    pub fn audit_no_client_weight_exchange(&self) -> Result<()> {
        match self.client_to_client_snapshots().next() {
            None => Ok(()),
            Some(e) => Err(Error::Audit(format!(
                "weight snapshot from {} to {} (seq {})",
                e.sender, e.receiver, e.seq
            ))),
        }
    }

    /// Message counts keyed by variant name.
    pub fn digest(&self) -> LedgerDigest {
        LedgerDigest {
            smashed_batch: self.count(MessageKind::SmashedBatch),
            split_gradients: self.count(MessageKind::SplitGradients),
            weight_snapshot: self.count(MessageKind::WeightSnapshot),
            client_to_client_snapshots: self.client_to_client_snapshots().count(),
            total_scalars: self.entries.iter().map(|e| e.scalars).sum(),
        }
    }

    /// Writes one JSON envelope per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Envelope>> {
        let mut out = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::format(format!("ledger line {}: {e}", i + 1)))?,
            );
        }
        Ok(out)
    }

    /// Appends all entries of `other`, renumbering them.
    pub fn absorb(&mut self, other: MessageLedger) {
        for e in other.entries {
            self.push(e);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerDigest {
    pub smashed_batch: usize,
    pub split_gradients: usize,
    pub weight_snapshot: usize,
    pub client_to_client_snapshots: usize,
    pub total_scalars: usize,
}
