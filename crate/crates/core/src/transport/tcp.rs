//! TCP transport: the same node actors served over loopback-or-real sockets.
//!
//! Connections open with a framed hello carrying the peer's identity and
//! shared secret, checked against the static registry; every subsequent
//! frame is a protocol message, strictly request/response. A pluggable
//! secure-channel hook wraps each accepted/dialed stream (plaintext by
//! default; deployments substitute an encrypting wrapper).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::Value;

use crate::protocol::session::ClientRegistry;
use crate::protocol::{decode_frame, read_frame, Message, MAX_FRAME_LEN};
use crate::transport::alice::{AliceAction, AliceNode};
use crate::transport::log::MessageLog;
use crate::transport::scenario::{collect_output, RunOutput, Scenario};
use crate::transport::sim::Deployment;
use crate::transport::NodeError;

const READ_POLL: Duration = Duration::from_millis(50);

/// A bidirectional byte stream (what the secure-channel hook yields).
pub trait Channel: Read + Write + Send {}
impl<T: Read + Write + Send> Channel for T {}

/// Pluggable stream wrapper applied at connection time.
pub trait SecureChannel: Send + Sync {
    fn wrap(&self, stream: TcpStream) -> std::io::Result<Box<dyn Channel>>;
}

/// Default: plaintext passthrough.
pub struct PlainChannel;

impl SecureChannel for PlainChannel {
    fn wrap(&self, stream: TcpStream) -> std::io::Result<Box<dyn Channel>> {
        Ok(Box::new(stream))
    }
}

fn hello_frame(node_id: &str, secret: &str) -> Vec<u8> {
    let payload = serde_json::to_vec(&serde_json::json!({
        "hello": node_id,
        "secret": secret,
    }))
    .expect("hello serializes");
    let mut frame = Vec::with_capacity(4 + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    frame
}

fn parse_hello(frame: &[u8]) -> Option<(String, String)> {
    let value: Value = serde_json::from_slice(frame.get(4..)?).ok()?;
    Some((
        value.get("hello")?.as_str()?.to_string(),
        value.get("secret")?.as_str()?.to_string(),
    ))
}

fn write_frame(channel: &mut dyn Channel, frame: &[u8]) -> std::io::Result<()> {
    channel.write_all(frame)?;
    channel.flush()
}

/// What a serving node does with one authenticated frame.
pub type Dispatch = dyn FnMut(&str, Message, Duration) -> Result<Message, NodeError> + Send;

/// Called when a peer's connection ends for any reason.
pub type OnDisconnect = dyn FnMut(&str, Duration) + Send;

/// Shared run context for serving loops.
pub struct Shared {
    pub log: Arc<Mutex<MessageLog>>,
    pub epoch: Instant,
    pub stop: Arc<AtomicBool>,
}

/// Accept loop: each connection gets a thread that authenticates the hello
/// and then serves request/response frames until EOF or a fatal error.
pub fn serve(
    listener: TcpListener,
    node_id: String,
    registry: ClientRegistry,
    secure: Arc<dyn SecureChannel>,
    dispatch: Box<Dispatch>,
    on_disconnect: Box<OnDisconnect>,
    shared: Shared,
) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        listener
            .set_nonblocking(true)
            .expect("nonblocking listener");
        let dispatch = Arc::new(Mutex::new(dispatch));
        let on_disconnect = Arc::new(Mutex::new(on_disconnect));
        let mut conn_threads = Vec::new();
        while !shared.stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let registry = registry.clone();
                    let secure = secure.clone();
                    let dispatch = dispatch.clone();
                    let on_disconnect = on_disconnect.clone();
                    let node_id = node_id.clone();
                    let log = shared.log.clone();
                    let epoch = shared.epoch;
                    let stop = shared.stop.clone();
                    conn_threads.push(std::thread::spawn(move || {
                        let _ = serve_connection(
                            stream,
                            &node_id,
                            &registry,
                            secure.as_ref(),
                            &dispatch,
                            &on_disconnect,
                            &log,
                            epoch,
                            &stop,
                        );
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(READ_POLL);
                }
                Err(_) => break,
            }
        }
        for t in conn_threads {
            let _ = t.join();
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn serve_connection(
    stream: TcpStream,
    node_id: &str,
    registry: &ClientRegistry,
    secure: &dyn SecureChannel,
    dispatch: &Mutex<Box<Dispatch>>,
    on_disconnect: &Mutex<Box<OnDisconnect>>,
    log: &Mutex<MessageLog>,
    epoch: Instant,
    stop: &AtomicBool,
) -> Result<(), NodeError> {
    stream
        .set_read_timeout(Some(READ_POLL))
        .map_err(|e| NodeError::Transport(e.to_string()))?;
    let mut channel = secure
        .wrap(stream)
        .map_err(|e| NodeError::Transport(e.to_string()))?;

    // Identity is established once per connection.
    let hello = read_frame_patient(channel.as_mut(), stop)?
        .ok_or_else(|| NodeError::Transport("closed before hello".into()))?;
    let (peer, secret) =
        parse_hello(&hello).ok_or_else(|| NodeError::Transport("bad hello".into()))?;
    if !registry.authenticate(&peer, &secret) {
        return Err(NodeError::NotAuthorized { from: peer });
    }

    loop {
        let frame = match read_frame_patient(channel.as_mut(), stop) {
            Ok(Some(f)) => f,
            Ok(None) | Err(_) => {
                let now = epoch.elapsed();
                (on_disconnect.lock().unwrap())(&peer, now);
                return Ok(());
            }
        };
        let now = epoch.elapsed();
        let decoded = decode_frame(&frame, MAX_FRAME_LEN);
        log.lock().unwrap().record(
            now,
            &peer,
            node_id,
            frame.len(),
            decoded.as_ref().ok().cloned(),
        );
        let msg = match decoded {
            Ok(m) => m,
            Err(_) => {
                // Malformed frame: simply disconnect this peer.
                (on_disconnect.lock().unwrap())(&peer, now);
                return Ok(());
            }
        };
        let reply = match (dispatch.lock().unwrap())(&peer, msg, now) {
            Ok(r) => r,
            Err(_) => {
                (on_disconnect.lock().unwrap())(&peer, now);
                return Ok(());
            }
        };
        let reply_frame = reply.to_frame();
        if write_frame(channel.as_mut(), &reply_frame).is_err() {
            let now = epoch.elapsed();
            (on_disconnect.lock().unwrap())(&peer, now);
            return Ok(());
        }
    }
}

/// Blocking read that tolerates poll-timeout wakeups until `stop` is set.
fn read_frame_patient(
    channel: &mut dyn Channel,
    stop: &AtomicBool,
) -> Result<Option<Vec<u8>>, NodeError> {
    loop {
        if stop.load(Ordering::Relaxed) {
            return Ok(None);
        }
        match read_frame(channel, MAX_FRAME_LEN) {
            Ok(f) => return Ok(f),
            Err(crate::protocol::ProtocolError::Io(e))
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                continue;
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Client-side connection cache for one driver.
pub struct Dialer {
    id: String,
    secret: String,
    book: BTreeMap<String, String>,
    secure: Arc<dyn SecureChannel>,
    conns: BTreeMap<String, Box<dyn Channel>>,
}

impl Dialer {
    pub fn new(
        id: impl Into<String>,
        secret: impl Into<String>,
        book: BTreeMap<String, String>,
        secure: Arc<dyn SecureChannel>,
    ) -> Self {
        Dialer {
            id: id.into(),
            secret: secret.into(),
            book,
            secure,
            conns: BTreeMap::new(),
        }
    }

    fn dial(&mut self, node_id: &str, address: &str) -> Result<&mut Box<dyn Channel>, NodeError> {
        if !self.conns.contains_key(node_id) {
            let addr = self
                .book
                .get(node_id)
                .cloned()
                .unwrap_or_else(|| address.to_string());
            let stream = TcpStream::connect(&addr)
                .map_err(|e| NodeError::Transport(format!("dial {addr}: {e}")))?;
            stream
                .set_read_timeout(Some(crate::transport::alice::RESPONSE_TIMEOUT))
                .map_err(|e| NodeError::Transport(e.to_string()))?;
            let mut channel = self
                .secure
                .wrap(stream)
                .map_err(|e| NodeError::Transport(e.to_string()))?;
            write_frame(channel.as_mut(), &hello_frame(&self.id, &self.secret))
                .map_err(|e| NodeError::Transport(e.to_string()))?;
            self.conns.insert(node_id.to_string(), channel);
        }
        Ok(self.conns.get_mut(node_id).unwrap())
    }

    fn drop_conn(&mut self, node_id: &str) {
        self.conns.remove(node_id);
    }
}

/// Drives one client turn to completion over TCP: poll, send, await reply,
/// feed the driver, repeat.
pub fn drive_turn(
    alice: &Mutex<AliceNode>,
    dialer: &mut Dialer,
    log: &Mutex<MessageLog>,
    epoch: Instant,
) -> Result<(), NodeError> {
    let target_turns = alice.lock().unwrap().turns_taken() + 1;
    loop {
        {
            let a = alice.lock().unwrap();
            if a.turns_taken() >= target_turns {
                return Ok(());
            }
            if a.is_finished() {
                return Ok(());
            }
        }
        let now = epoch.elapsed();
        let polled = alice.lock().unwrap().poll(now);
        let (mut ep, mut msg) = match polled {
            Some(x) => x,
            None => {
                let deadline = alice.lock().unwrap().next_deadline();
                match deadline {
                    Some(d) if d > now => std::thread::sleep((d - now).min(READ_POLL)),
                    _ => std::thread::sleep(Duration::from_millis(1)),
                }
                let now = epoch.elapsed();
                alice.lock().unwrap().on_tick(now);
                continue;
            }
        };

        // Follow one request/response chain until the driver goes idle.
        loop {
            let frame = msg.to_frame();
            let send_result = dialer
                .dial(&ep.node_id, &ep.address)
                .and_then(|ch| {
                    write_frame(ch.as_mut(), &frame)
                        .map_err(|e| NodeError::Transport(e.to_string()))
                });
            if send_result.is_err() {
                dialer.drop_conn(&ep.node_id);
                let now = epoch.elapsed();
                alice.lock().unwrap().on_disconnect(&ep.node_id, now);
                break;
            }
            alice.lock().unwrap().note_sent(frame.len());

            let reply_frame = {
                let ch = dialer.dial(&ep.node_id, &ep.address)?;
                match read_frame(ch.as_mut(), MAX_FRAME_LEN) {
                    Ok(Some(f)) => f,
                    _ => {
                        dialer.drop_conn(&ep.node_id);
                        let now = epoch.elapsed();
                        alice.lock().unwrap().on_disconnect(&ep.node_id, now);
                        break;
                    }
                }
            };
            let now = epoch.elapsed();
            let decoded = decode_frame(&reply_frame, MAX_FRAME_LEN);
            {
                let mut a = alice.lock().unwrap();
                a.note_received(reply_frame.len());
                let id = a.id().to_string();
                log.lock().unwrap().record(
                    now,
                    &ep.node_id,
                    &id,
                    reply_frame.len(),
                    decoded.as_ref().ok().cloned(),
                );
            }
            let reply = match decoded {
                Ok(m) => m,
                Err(_) => {
                    dialer.drop_conn(&ep.node_id);
                    let now = epoch.elapsed();
                    alice.lock().unwrap().on_disconnect(&ep.node_id, now);
                    break;
                }
            };
            let action = alice.lock().unwrap().on_message(&ep.node_id, reply, now);
            match action {
                AliceAction::Send(next_ep, next_msg) => {
                    ep = next_ep;
                    msg = next_msg;
                }
                AliceAction::Idle => break,
                AliceAction::Abort => {
                    dialer.drop_conn(&ep.node_id);
                    break;
                }
            }
        }
    }
}

/// Runs a scenario over loopback TCP: same nodes, same turn order, real
/// sockets. Faults and injected disconnects are a simulator feature and are
/// rejected here.
pub fn run_scenario_tcp(
    scenario: &Scenario,
    secure: Arc<dyn SecureChannel>,
) -> Result<RunOutput, NodeError> {
    if !scenario.faults.is_empty() || !scenario.disconnects.is_empty() {
        return Err(NodeError::Transport(
            "fault injection requires the simulated transport".into(),
        ));
    }
    let start = Instant::now();

    // Bind every listener first so the registry can carry real addresses.
    let bob_listener = TcpListener::bind("127.0.0.1:0")
        .map_err(|e| NodeError::Transport(e.to_string()))?;
    let server_listener = TcpListener::bind("127.0.0.1:0")
        .map_err(|e| NodeError::Transport(e.to_string()))?;
    let mut book: BTreeMap<String, String> = BTreeMap::new();
    book.insert(
        crate::transport::scenario::BOB_ID.to_string(),
        bob_listener.local_addr().unwrap().to_string(),
    );
    book.insert(
        crate::transport::scenario::WEIGHT_SERVER_ID.to_string(),
        server_listener.local_addr().unwrap().to_string(),
    );
    let mut alice_listeners = BTreeMap::new();
    for id in scenario.client_ids() {
        let l = TcpListener::bind("127.0.0.1:0")
            .map_err(|e| NodeError::Transport(e.to_string()))?;
        book.insert(id.clone(), l.local_addr().unwrap().to_string());
        alice_listeners.insert(id, l);
    }

    // Registry locators stay logical node ids on every transport (the
    // address book resolves them to sockets here), so refresh responses are
    // byte-identical across transports.
    let mut dep = scenario.build_deployment()?;
    let registry = scenario.registry();

    let log = Arc::new(Mutex::new(MessageLog::new()));
    let stop = Arc::new(AtomicBool::new(false));

    // Move servers into shared cells.
    let bob = Arc::new(Mutex::new(dep.bob));
    let server = dep.server.take().map(|s| Arc::new(Mutex::new(s)));
    let alices: Vec<Arc<Mutex<AliceNode>>> = dep
        .alices
        .into_iter()
        .map(|a| Arc::new(Mutex::new(a)))
        .collect();

    let mut threads = Vec::new();
    {
        let bob2 = bob.clone();
        let bob3 = bob.clone();
        threads.push(serve(
            bob_listener,
            crate::transport::scenario::BOB_ID.to_string(),
            registry.clone(),
            secure.clone(),
            Box::new(move |from, msg, now| bob2.lock().unwrap().handle_frame(from, msg, now)),
            Box::new(move |peer, now| bob3.lock().unwrap().on_peer_disconnect(peer, now)),
            Shared {
                log: log.clone(),
                epoch: start,
                stop: stop.clone(),
            },
        ));
    }
    if let Some(server) = server.clone() {
        let s2 = server.clone();
        threads.push(serve(
            server_listener,
            crate::transport::scenario::WEIGHT_SERVER_ID.to_string(),
            registry.clone(),
            secure.clone(),
            Box::new(move |from, msg, _now| s2.lock().unwrap().handle_frame(from, msg)),
            Box::new(|_, _| {}),
            Shared {
                log: log.clone(),
                epoch: start,
                stop: stop.clone(),
            },
        ));
    }
    for (id, listener) in alice_listeners {
        let holder = alices
            .iter()
            .find(|a| a.lock().unwrap().id() == id)
            .cloned()
            .expect("listener for known client");
        threads.push(serve(
            listener,
            id,
            registry.clone(),
            secure.clone(),
            Box::new(move |from, msg, _now| {
                // Served traffic counts toward this client's byte totals,
                // mirroring the simulator's accounting.
                let mut a = holder.lock().unwrap();
                a.note_received(msg.to_frame().len());
                let reply = a.handle_peer_request(from, &msg);
                a.note_sent(reply.to_frame().len());
                Ok(reply)
            }),
            Box::new(|_, _| {}),
            Shared {
                log: log.clone(),
                epoch: start,
                stop: stop.clone(),
            },
        ));
    }

    // Execute session turns in the global order, one at a time.
    let mut result: Result<(), NodeError> = Ok(());
    for (client_id, _) in &scenario.turns {
        let holder = alices
            .iter()
            .find(|a| a.lock().unwrap().id() == *client_id)
            .cloned()
            .expect("scheduled client exists");
        let mut dialer = Dialer::new(
            client_id.clone(),
            format!("secret-{client_id}"),
            book.clone(),
            secure.clone(),
        );
        if let Err(e) = drive_turn(&holder, &mut dialer, &log, start) {
            result = Err(e);
            break;
        }
    }

    stop.store(true, Ordering::Relaxed);
    for t in threads {
        let _ = t.join();
    }
    result?;

    // Reassemble a Deployment for output collection.
    let dep = Deployment {
        alices: alices
            .into_iter()
            .map(|a| {
                Arc::try_unwrap(a)
                    .map_err(|_| ())
                    .expect("alice threads joined")
                    .into_inner()
                    .unwrap()
            })
            .collect(),
        bob: Arc::try_unwrap(bob)
            .map_err(|_| ())
            .expect("bob threads joined")
            .into_inner()
            .unwrap(),
        server: server.map(|s| {
            Arc::try_unwrap(s)
                .map_err(|_| ())
                .expect("server threads joined")
                .into_inner()
                .unwrap()
        }),
        turn_order: scenario.turns.iter().map(|(id, _)| id.clone()).collect(),
    };
    let final_time = start.elapsed();
    let log = Arc::try_unwrap(log).expect("log threads joined").into_inner().unwrap();
    let deliveries = log.entries().len() as u64;
    Ok(collect_output(&dep, log, final_time, deliveries))
}
