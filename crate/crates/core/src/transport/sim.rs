//! Deterministic in-process transport.
//!
//! A single-threaded scheduler moves frames over per-link FIFO queues (one
//! global queue preserves per-link order and fixes a total delivery order),
//! advances a virtual clock one tick per delivery, and jumps the clock to the
//! earliest timer deadline when the network drains. Identical inputs produce
//! byte-identical message logs.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use crate::protocol::{decode_frame, Message, MAX_FRAME_LEN};
use crate::transport::alice::{AliceAction, AliceNode};
use crate::transport::bob::BobNode;
use crate::transport::server::WeightServerNode;
use crate::transport::log::MessageLog;
use crate::transport::NodeError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultKind {
    /// Silently discard the frame.
    Drop,
    /// Flip one payload byte before delivery.
    Corrupt { byte: usize },
    /// Requeue the frame at the back of the delivery queue.
    Delay,
}

/// Applies to the `nth` (1-based) frame attempted on the `from -> to` link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultRule {
    pub from: String,
    pub to: String,
    pub nth: u64,
    pub kind: FaultKind,
}

/// Kills the node's connections right after its `after_sends`-th frame is
/// delivered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisconnectRule {
    pub node: String,
    pub after_sends: u64,
}

#[derive(Debug, Clone, Default)]
pub struct SimNet {
    pub faults: Vec<FaultRule>,
    pub disconnects: Vec<DisconnectRule>,
}

struct InFlight {
    from: String,
    to: String,
    frame: Vec<u8>,
    disconnect_after: bool,
    generation: u64,
}

/// Connection lifecycle of one (unordered) node pair: frames belong to the
/// generation in which they were sent and die with it.
#[derive(Default, Clone, Copy)]
struct LinkState {
    generation: u64,
    dead: bool,
}

/// All nodes of one simulated deployment plus the global session turn order.
pub struct Deployment {
    pub alices: Vec<AliceNode>,
    pub bob: BobNode,
    pub server: Option<WeightServerNode>,
    /// Session turns in schedule order (one entry per session, naming the
    /// client whose turn it is).
    pub turn_order: Vec<String>,
}

pub struct SimOutcome {
    pub log: MessageLog,
    pub final_time: Duration,
    pub deliveries: u64,
}

const TICK: Duration = Duration::from_millis(1);

pub struct SimRunner<'a> {
    dep: &'a mut Deployment,
    net: SimNet,
    queue: VecDeque<InFlight>,
    clock: Duration,
    log: MessageLog,
    link_counters: BTreeMap<(String, String), u64>,
    sends_by_node: BTreeMap<String, u64>,
    links: BTreeMap<(String, String), LinkState>,
    cursor: usize,
    cursor_turn_base: usize,
    deliveries: u64,
}

impl<'a> SimRunner<'a> {
    pub fn new(dep: &'a mut Deployment, net: SimNet) -> Self {
        let cursor_turn_base = dep
            .turn_order
            .first()
            .and_then(|id| dep.alices.iter().find(|a| a.id() == id))
            .map(|a| a.turns_taken())
            .unwrap_or(0);
        SimRunner {
            dep,
            net,
            queue: VecDeque::new(),
            clock: Duration::ZERO,
            log: MessageLog::new(),
            link_counters: BTreeMap::new(),
            sends_by_node: BTreeMap::new(),
            links: BTreeMap::new(),
            cursor: 0,
            cursor_turn_base,
            deliveries: 0,
        }
    }

    fn link_key(a: &str, b: &str) -> (String, String) {
        if a <= b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        }
    }

    fn alice_mut(&mut self, id: &str) -> Option<&mut AliceNode> {
        self.dep.alices.iter_mut().find(|a| a.id() == id)
    }

    fn enqueue(&mut self, from: &str, to: &str, msg: &Message) {
        let frame = msg.to_frame();
        let key = Self::link_key(from, to);
        let link = self.links.entry(key).or_default();
        if link.dead {
            // A client opening a fresh session re-establishes the link; any
            // other write lands on a dead socket.
            let revives = matches!(
                msg,
                Message::TrainingRequest { .. } | Message::WeightRequest { .. }
            );
            if revives {
                link.dead = false;
            } else {
                return;
            }
        }
        let generation = link.generation;
        if let Some(a) = self.alice_mut(from) {
            a.note_sent(frame.len());
        }
        let sends = self.sends_by_node.entry(from.to_string()).or_insert(0);
        *sends += 1;
        let sends = *sends;
        let mut disconnect_after = false;
        self.net.disconnects.retain(|rule| {
            if rule.node == from && rule.after_sends == sends {
                disconnect_after = true;
                false
            } else {
                true
            }
        });
        self.queue.push_back(InFlight {
            from: from.to_string(),
            to: to.to_string(),
            frame,
            disconnect_after,
            generation,
        });
    }

    fn kill_link(&mut self, a: &str, b: &str) {
        let link = self.links.entry(Self::link_key(a, b)).or_default();
        link.dead = true;
        link.generation += 1;
        let now = self.clock;
        if self.dep.bob.id() == a || self.dep.bob.id() == b {
            let peer = if self.dep.bob.id() == a { b } else { a };
            self.dep.bob.on_peer_disconnect(peer, now);
        }
        for side in [a, b] {
            if let Some(alice) = self.alice_mut(side) {
                alice.on_disconnect(if side == a { b } else { a }, now);
            }
        }
    }

    fn handle_alice_action(&mut self, alice_id: &str, action: AliceAction) {
        match action {
            AliceAction::Send(ep, msg) => self.enqueue(alice_id, &ep.node_id, &msg),
            AliceAction::Idle => {}
            AliceAction::Abort => {
                let bob_id = self.dep.bob.id().to_string();
                self.kill_link(alice_id, &bob_id);
            }
        }
    }

    fn deliver(&mut self, mut inflight: InFlight) {
        // Frames of a killed connection never arrive.
        let key = Self::link_key(&inflight.from, &inflight.to);
        let link = self.links.entry(key).or_default();
        if link.dead || inflight.generation < link.generation {
            return;
        }

        // Per-link fault application.
        let counter = self
            .link_counters
            .entry((inflight.from.clone(), inflight.to.clone()))
            .or_insert(0);
        *counter += 1;
        let nth = *counter;
        let mut matched: Option<FaultKind> = None;
        self.net.faults.retain(|rule| {
            if matched.is_none()
                && rule.from == inflight.from
                && rule.to == inflight.to
                && rule.nth == nth
            {
                matched = Some(rule.kind.clone());
                false
            } else {
                true
            }
        });
        match matched {
            Some(FaultKind::Drop) => return,
            Some(FaultKind::Corrupt { byte }) => {
                if inflight.frame.len() > 4 {
                    let idx = 4 + byte % (inflight.frame.len() - 4);
                    inflight.frame[idx] ^= 0xFF;
                }
            }
            Some(FaultKind::Delay) => {
                self.queue.push_back(inflight);
                return;
            }
            None => {}
        }

        self.clock += TICK;
        self.deliveries += 1;
        let decoded = decode_frame(&inflight.frame, MAX_FRAME_LEN).ok();
        self.log.record(
            self.clock,
            &inflight.from,
            &inflight.to,
            inflight.frame.len(),
            decoded.clone(),
        );
        if let Some(a) = self.alice_mut(&inflight.to) {
            a.note_received(inflight.frame.len());
        }

        let now = self.clock;
        let from = inflight.from.clone();
        let to = inflight.to.clone();

        match decoded {
            None => {
                // Malformed frame: the receiver simply disconnects.
                self.kill_link(&from, &to);
            }
            Some(msg) => {
                if to == self.dep.bob.id() {
                    match self.dep.bob.handle_frame(&from, msg, now) {
                        Ok(reply) => {
                            let bob_id = self.dep.bob.id().to_string();
                            self.enqueue(&bob_id, &from, &reply);
                        }
                        Err(_) => self.kill_link(&from, &to),
                    }
                } else if self.dep.server.as_ref().is_some_and(|s| s.id() == to) {
                    let server = self.dep.server.as_mut().unwrap();
                    match server.handle_frame(&from, msg) {
                        Ok(reply) => {
                            let sid = self.dep.server.as_ref().unwrap().id().to_string();
                            self.enqueue(&sid, &from, &reply);
                        }
                        Err(_) => self.kill_link(&from, &to),
                    }
                } else if let Some(alice) = self.dep.alices.iter().position(|a| a.id() == to) {
                    let is_peer_request = matches!(msg, Message::WeightRequest { .. });
                    if is_peer_request {
                        let reply = self.dep.alices[alice].handle_peer_request(&from, &msg);
                        self.enqueue(&to, &from, &reply);
                    } else {
                        let action = self.dep.alices[alice].on_message(&from, msg, now);
                        self.handle_alice_action(&to.clone(), action);
                    }
                }
                // Frames to unknown nodes vanish.
            }
        }

        if inflight.disconnect_after {
            self.kill_link(&from, &to);
        }
    }

    /// True when the scheduled turn finished and the cursor advanced.
    fn advance_cursor_if_done(&mut self) {
        while self.cursor < self.dep.turn_order.len() {
            let id = self.dep.turn_order[self.cursor].clone();
            let taken = self
                .dep
                .alices
                .iter()
                .find(|a| a.id() == id)
                .map(|a| a.turns_taken())
                .unwrap_or(usize::MAX);
            if taken > self.cursor_turn_base {
                self.cursor += 1;
                self.cursor_turn_base = if self.cursor < self.dep.turn_order.len() {
                    let next = &self.dep.turn_order[self.cursor];
                    self.dep
                        .alices
                        .iter()
                        .find(|a| a.id() == next)
                        .map(|a| a.turns_taken())
                        .unwrap_or(0)
                } else {
                    0
                };
            } else {
                break;
            }
        }
    }

    fn earliest_deadline(&self) -> Option<Duration> {
        let mut d: Option<Duration> = None;
        if self.cursor < self.dep.turn_order.len() {
            let id = &self.dep.turn_order[self.cursor];
            if let Some(a) = self.dep.alices.iter().find(|a| a.id() == *id) {
                if let Some(x) = a.next_deadline() {
                    d = Some(d.map_or(x, |y| y.min(x)));
                }
            }
        }
        if let Some(x) = self.dep.bob.session().next_deadline() {
            d = Some(d.map_or(x, |y| y.min(x)));
        }
        d
    }

    pub fn run(mut self, max_deliveries: u64) -> Result<SimOutcome, NodeError> {
        loop {
            self.advance_cursor_if_done();
            if self.cursor >= self.dep.turn_order.len() && self.queue.is_empty() {
                return Ok(SimOutcome {
                    log: self.log,
                    final_time: self.clock,
                    deliveries: self.deliveries,
                });
            }
            if self.deliveries > max_deliveries {
                return Err(NodeError::Transport(format!(
                    "delivery budget {max_deliveries} exhausted at t={:?}",
                    self.clock
                )));
            }

            // Let the scheduled client act.
            if self.cursor < self.dep.turn_order.len() {
                let id = self.dep.turn_order[self.cursor].clone();
                let now = self.clock;
                let polled = self.alice_mut(&id).and_then(|a| a.poll(now));
                if let Some((ep, msg)) = polled {
                    self.enqueue(&id, &ep.node_id, &msg);
                }
            }

            if let Some(inflight) = self.queue.pop_front() {
                self.deliver(inflight);
                continue;
            }

            // Nothing in flight: jump to the next timer.
            match self.earliest_deadline() {
                Some(deadline) => {
                    self.clock = self.clock.max(deadline);
                    let now = self.clock;
                    if self.cursor < self.dep.turn_order.len() {
                        let id = self.dep.turn_order[self.cursor].clone();
                        if let Some(a) = self.alice_mut(&id) {
                            a.on_tick(now);
                        }
                    }
                    self.dep.bob.on_tick(now);
                }
                None => {
                    // No frames, no timers: if turns remain the deployment is
                    // stuck (e.g. a client waiting on backoff that never
                    // fires).
                    return Err(NodeError::Transport(format!(
                        "deadlock with {} turns outstanding at t={:?}",
                        self.dep.turn_order.len() - self.cursor,
                        self.clock
                    )));
                }
            }
        }
    }
}
