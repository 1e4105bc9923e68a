use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use super::{read_frame, write_frame, Message, RoundBegin, WeightBlob, PROTOCOL_VERSION};
use crate::cl3loop::{evaluate_global, Cl3Config, Cl3RunLog, LogRecord, RUN_LOG_VERSION};
use crate::dataio::DatasetShard;
use crate::error::{Error, Result};
use crate::fedcore::{close_round, LocalUpdate, RoundContext, RoundReport, ServerState};
use crate::metrics;
use crate::nnkernel::Mlp;
use crate::transfer::GlobalModel;

#[derive(Debug, Clone)]
pub struct CentralOptions {
    pub expected_clients: usize,
    /// Time allowed for every client to answer a round; a straggler aborts
    /// the run.
    pub round_timeout: Duration,
    /// Time allowed for all clients to join.
    pub join_timeout: Duration,
    /// Binary capture of every frame sent and received.
    pub transcript: Option<PathBuf>,
}

impl CentralOptions {
    pub fn new(expected_clients: usize) -> Self {
        CentralOptions {
            expected_clients,
            round_timeout: Duration::from_secs(60),
            join_timeout: Duration::from_secs(60),
            transcript: None,
        }
    }
}

/// One captured frame. On disk: direction u8 (0 received, 1 sent),
/// hospital_id u16 BE, then the raw frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptEntry {
    pub sent: bool,
    pub hospital_id: u16,
    pub frame: Vec<u8>,
}

impl TranscriptEntry {
    pub fn encode_all(entries: &[TranscriptEntry]) -> Vec<u8> {
        let mut out = Vec::new();
        for e in entries {
            out.push(e.sent as u8);
            out.extend_from_slice(&e.hospital_id.to_be_bytes());
            out.extend_from_slice(&e.frame);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct CentralOutcome {
    pub log: Cl3RunLog,
    pub global: GlobalModel,
    pub transcript: Vec<TranscriptEntry>,
}

pub struct CentralServer {
    listener: TcpListener,
}

struct Peer {
    hospital_id: u16,
    stream: TcpStream,
}

type Inbox = mpsc::Receiver<(u16, Result<(Message, Vec<u8>)>)>;

impl CentralServer {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self> {
        Ok(CentralServer {
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Runs the whole session: waits for the clients, drives every round of
    /// every increment and shuts the clients down.
    pub fn serve(
        self,
        config: &Cl3Config,
        options: &CentralOptions,
        initial: GlobalModel,
        test_set: &DatasetShard,
        mut observe: impl FnMut(&RoundReport, &Mlp),
    ) -> Result<CentralOutcome> {
        config.validate()?;
        if options.expected_clients == 0 {
            return Err(Error::Config(
                "expected client count must be positive".into(),
            ));
        }
        let started = Instant::now();
        let mut transcript = Vec::new();
        let mut peers = self.accept_clients(options, &mut transcript)?;
        peers.sort_by_key(|p| p.hospital_id);
        let inbox = spawn_readers(&peers)?;

        let mut session = Session {
            peers,
            inbox,
            transcript,
            timeout: options.round_timeout,
        };
        let result = session.drive(config, initial, test_set, started, &mut observe);
        match &result {
            Ok(_) => session.broadcast(&Message::Shutdown).ok(),
            Err(e) => session.broadcast(&Message::Error(e.to_string())).ok(),
        };
        if let Some(path) = &options.transcript {
            std::fs::write(path, TranscriptEntry::encode_all(&session.transcript))
                .map_err(|e| Error::io(path, e))?;
        }
        let (log, global) = result?;
        Ok(CentralOutcome {
            log,
            global,
            transcript: session.transcript,
        })
    }

    fn accept_clients(
        &self,
        options: &CentralOptions,
        transcript: &mut Vec<TranscriptEntry>,
    ) -> Result<Vec<Peer>> {
        let deadline = Instant::now() + options.join_timeout;
        self.listener.set_nonblocking(true)?;
        let mut peers: Vec<Peer> = Vec::new();
        while peers.len() < options.expected_clients {
            let mut stream = match self.listener.accept() {
                Ok((s, _)) => s,
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(Error::Protocol(format!(
                            "only {} of {} clients joined before the deadline",
                            peers.len(),
                            options.expected_clients
                        )));
                    }
                    thread::sleep(Duration::from_millis(5));
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            stream.set_nonblocking(false)?;
            stream.set_nodelay(true)?;
            stream.set_read_timeout(Some(options.join_timeout))?;
            let (msg, raw) = match read_frame(&mut stream) {
                Ok(Some(frame)) => frame,
                // a connection that never speaks is not a participant
                _ => continue,
            };
            let admitted = match msg {
                Message::Join {
                    version,
                    hospital_id,
                } => {
                    transcript.push(TranscriptEntry {
                        sent: false,
                        hospital_id,
                        frame: raw,
                    });
                    if version != PROTOCOL_VERSION {
                        Err((hospital_id, format!(
                            "protocol version {version} not supported (server speaks {PROTOCOL_VERSION})"
                        )))
                    } else if peers.iter().any(|p| p.hospital_id == hospital_id) {
                        Err((
                            hospital_id,
                            format!("hospital {hospital_id} already joined"),
                        ))
                    } else {
                        Ok(hospital_id)
                    }
                }
                other => Err((
                    0,
                    format!("expected JOIN, got message 0x{:02x}", other.msg_type()),
                )),
            };
            match admitted {
                Ok(hospital_id) => {
                    stream.set_read_timeout(None)?;
                    peers.push(Peer {
                        hospital_id,
                        stream,
                    });
                }
                Err((hospital_id, text)) => {
                    if let Ok(frame) = write_frame(&mut stream, &Message::Error(text)) {
                        transcript.push(TranscriptEntry {
                            sent: true,
                            hospital_id,
                            frame,
                        });
                    }
                }
            }
        }
        Ok(peers)
    }
}

fn spawn_readers(peers: &[Peer]) -> Result<Inbox> {
    let (tx, rx) = mpsc::channel();
    for p in peers {
        let mut stream = p.stream.try_clone()?;
        let id = p.hospital_id;
        let tx = tx.clone();
        thread::spawn(move || loop {
            let item = match read_frame(&mut stream) {
                Ok(Some(frame)) => Ok(frame),
                Ok(None) => Err(Error::Protocol(format!("hospital {id} disconnected"))),
                Err(e) => Err(e),
            };
            let stop = item.is_err();
            if tx.send((id, item)).is_err() || stop {
                break;
            }
        });
    }
    Ok(rx)
}

struct Session {
    peers: Vec<Peer>,
    inbox: Inbox,
    transcript: Vec<TranscriptEntry>,
    timeout: Duration,
}

impl Session {
    fn send(&mut self, idx: usize, msg: &Message) -> Result<()> {
        let peer = &mut self.peers[idx];
        let frame = write_frame(&mut peer.stream, msg).map_err(|e| {
            Error::Protocol(format!("hospital {} unreachable: {e}", peer.hospital_id))
        })?;
        self.transcript.push(TranscriptEntry {
            sent: true,
            hospital_id: peer.hospital_id,
            frame,
        });
        Ok(())
    }

    /// Best effort: every peer is attempted even if some fail.
    fn broadcast(&mut self, msg: &Message) -> Result<()> {
        let mut first_err = None;
        for i in 0..self.peers.len() {
            if let Err(e) = self.send(i, msg) {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    fn drive(
        &mut self,
        config: &Cl3Config,
        initial: GlobalModel,
        test_set: &DatasetShard,
        started: Instant,
        observe: &mut impl FnMut(&RoundReport, &Mlp),
    ) -> Result<(Cl3RunLog, GlobalModel)> {
        let mut log = Cl3RunLog::default();
        log.records.push(LogRecord::RunHeader {
            format_version: RUN_LOG_VERSION,
            config: Box::new(config.clone()),
        });
        let mut server = ServerState::new(initial, config.momentum)?;
        let mut last_confusion = evaluate_global(&server.global, test_set)?;
        let rounds = config.rounds_per_increment as u16;

        for increment in 1..=config.increments as u16 {
            let inc_started = Instant::now();
            let mut participants = Vec::new();
            for r in 1..=rounds {
                let round = server.round + 1;
                let wire_round = u16::try_from(round)
                    .map_err(|_| Error::Config(format!("round {round} exceeds 16 bits")))?;
                let global = Message::GlobalWeights(WeightBlob {
                    model: server.global.model.clone(),
                    sample_count: 0,
                    hospital_id: 0,
                    round: wire_round,
                });
                let begin = Message::RoundBegin(RoundBegin {
                    round,
                    increment,
                    round_in_increment: r,
                    rounds_per_increment: rounds,
                });
                for i in 0..self.peers.len() {
                    self.send(i, &global)?;
                    self.send(i, &begin)?;
                }
                let updates = self.collect(round)?;
                let ctx = RoundContext {
                    increment: increment as u32,
                    round_in_increment: r as u32,
                    model_seed: config.model_seed,
                };
                let (next, report) = close_round(&server, &updates, test_set, ctx)?;
                server = next;
                observe(&report, &server.global.model);
                if r == 1 {
                    participants = report.participants.clone();
                }
                last_confusion = report.global_confusion;
                log.records.push(LogRecord::RoundReport(report));
            }
            log.records.push(LogRecord::IncrementSummary {
                increment: increment as u32,
                participants,
                global_accuracy: last_confusion.accuracy(),
                confusion: last_confusion,
                metrics: metrics::scores(&last_confusion)?,
                elapsed_ms: inc_started.elapsed().as_millis() as u64,
            });
        }
        log.records.push(LogRecord::RunSummary {
            final_accuracy: last_confusion.accuracy(),
            confusion: last_confusion,
            pretrain_elapsed_ms: 0,
            total_elapsed_ms: started.elapsed().as_millis() as u64,
        });
        Ok((log, server.global))
    }

    /// Round barrier: one answer from every client.
    fn collect(&mut self, round: u32) -> Result<Vec<LocalUpdate>> {
        let deadline = Instant::now() + self.timeout;
        let mut pending: Vec<u16> = self.peers.iter().map(|p| p.hospital_id).collect();
        let mut updates = Vec::new();
        while !pending.is_empty() {
            let left = deadline.saturating_duration_since(Instant::now());
            let (id, item) = match self.inbox.recv_timeout(left) {
                Ok(x) => x,
                Err(_) => {
                    return Err(Error::Protocol(format!(
                        "round {round}: no answer from hospitals {pending:?} within {:?}",
                        self.timeout
                    )))
                }
            };
            let (msg, raw) = item.map_err(|e| Error::Protocol(format!("round {round}: {e}")))?;
            self.transcript.push(TranscriptEntry {
                sent: false,
                hospital_id: id,
                frame: raw,
            });
            let Some(pos) = pending.iter().position(|&p| p == id) else {
                return Err(Error::Protocol(format!(
                    "round {round}: hospital {id} answered twice"
                )));
            };
            pending.swap_remove(pos);
            match msg {
                Message::RoundComplete => {}
                Message::LocalUpdate { blob, confusion } => {
                    if blob.hospital_id != id || blob.round as u32 != round {
                        return Err(Error::Protocol(format!(
                            "round {round}: update from connection {id} claims hospital {} round {}",
                            blob.hospital_id, blob.round
                        )));
                    }
                    updates.push(LocalUpdate {
                        hospital_id: id,
                        head: blob.model,
                        sample_count: blob.sample_count as u64,
                        local_confusion: confusion,
                    });
                }
                Message::Error(text) => {
                    return Err(Error::Protocol(format!("hospital {id} failed: {text}")))
                }
                other => {
                    return Err(Error::Protocol(format!(
                        "round {round}: unexpected message 0x{:02x} from hospital {id}",
                        other.msg_type()
                    )))
                }
            }
        }
        Ok(updates)
    }
}
