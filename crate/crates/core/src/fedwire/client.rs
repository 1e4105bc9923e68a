use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use super::{read_frame, write_frame, Message, WeightBlob, PROTOCOL_VERSION};
use crate::cl3loop::{hospital_increments, Cl3Config};
use crate::dataio::{DatasetShard, DriftInjection, Sample};
use crate::driftwatch::{DriftDetector, DriftVerdict};
use crate::error::{Error, Result};
use crate::fedcore::{local_seed, local_train, ClientState};
use crate::nnkernel::Mlp;

const CONNECT_PATIENCE: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub hospital_id: u16,
    pub verdicts: Vec<(u32, DriftVerdict)>,
    pub updates_sent: usize,
    pub completes_sent: usize,
    /// Last global model received from the server.
    pub last_global: Option<Mlp>,
}

/// Joins the server at `addr` as `shard.hospital_id` and follows it until
/// SHUTDOWN. Increments are scheduled exactly as in simulation.
pub fn run_client(
    addr: impl ToSocketAddrs,
    shard: &DatasetShard,
    config: &Cl3Config,
    drift: Option<&(DriftInjection, Vec<f64>)>,
) -> Result<ClientOutcome> {
    let increments = hospital_increments(config, shard, drift)?;
    run_client_with_increments(addr, shard.hospital_id, increments, config)
}

pub fn run_client_with_increments(
    addr: impl ToSocketAddrs,
    hospital_id: u16,
    mut increments: Vec<Vec<Sample>>,
    config: &Cl3Config,
) -> Result<ClientOutcome> {
    config.validate()?;
    let mut stream = connect(addr)?;
    stream.set_nodelay(true)?;
    write_frame(
        &mut stream,
        &Message::Join {
            version: PROTOCOL_VERSION,
            hospital_id,
        },
    )?;

    let hyper = config.hyper();
    let mut client = ClientState::new(
        hospital_id,
        DriftDetector::new(config.drift_settings())?,
        config.client_policy(),
    );
    let mut outcome = ClientOutcome {
        hospital_id,
        verdicts: Vec::new(),
        updates_sent: 0,
        completes_sent: 0,
        last_global: None,
    };
    let mut open_increment = 0u16;
    loop {
        let Some((msg, _)) = read_frame(&mut stream)? else {
            return Err(Error::Protocol(
                "server closed the connection before SHUTDOWN".into(),
            ));
        };
        match msg {
            Message::GlobalWeights(blob) => {
                if let Some(prev) = &outcome.last_global {
                    if prev.layer_dims() != blob.model.layer_dims()
                        || prev.frozen_prefix() != blob.model.frozen_prefix()
                    {
                        return Err(Error::Protocol(format!(
                            "global model shape changed from {:?} to {:?}",
                            prev.layer_dims(),
                            blob.model.layer_dims()
                        )));
                    }
                }
                outcome.last_global = Some(blob.model);
            }
            Message::RoundBegin(rb) => {
                let global = outcome
                    .last_global
                    .as_ref()
                    .ok_or_else(|| Error::Protocol("ROUND_BEGIN before any global model".into()))?;
                if rb.increment != open_increment {
                    if open_increment != 0 {
                        client.end_increment()?;
                    }
                    let delivered = increments
                        .get_mut(rb.increment as usize - 1)
                        .map(std::mem::take)
                        .unwrap_or_default();
                    let verdict = client.begin_increment(delivered, global)?;
                    outcome.verdicts.push((rb.increment as u32, verdict));
                    open_increment = rb.increment;
                }
                client.receive_global(global);
                let reply = if client.is_drifted() {
                    let h = hyper.with_seed(local_seed(config.model_seed, hospital_id, rb.round));
                    let update = match local_train(&mut client, global, &h) {
                        Ok(u) => u,
                        Err(e) => {
                            let _ = write_frame(&mut stream, &Message::Error(e.to_string()));
                            return Err(e);
                        }
                    };
                    let sample_count = u32::try_from(update.sample_count)
                        .map_err(|_| Error::Protocol("pool exceeds 32-bit sample count".into()))?;
                    outcome.updates_sent += 1;
                    Message::LocalUpdate {
                        blob: WeightBlob {
                            model: update.head,
                            sample_count,
                            hospital_id,
                            round: rb.round as u16,
                        },
                        confusion: update.local_confusion,
                    }
                } else {
                    outcome.completes_sent += 1;
                    Message::RoundComplete
                };
                write_frame(&mut stream, &reply)?;
                if rb.round_in_increment == rb.rounds_per_increment {
                    client.end_increment()?;
                    open_increment = u16::MAX;
                }
            }
            Message::Shutdown => return Ok(outcome),
            Message::Error(text) => {
                return Err(Error::Protocol(format!(
                    "server aborted the session: {text}"
                )))
            }
            other => {
                return Err(Error::Protocol(format!(
                    "unexpected message 0x{:02x} from server",
                    other.msg_type()
                )))
            }
        }
    }
}

/// Retries refused connections for a while so a client may start before
/// its server.
fn connect(addr: impl ToSocketAddrs) -> Result<TcpStream> {
    let addrs: Vec<_> = addr.to_socket_addrs()?.collect();
    let deadline = Instant::now() + CONNECT_PATIENCE;
    loop {
        match TcpStream::connect(addrs.as_slice()) {
            Ok(s) => return Ok(s),
            Err(e)
                if e.kind() == std::io::ErrorKind::ConnectionRefused
                    && Instant::now() < deadline =>
            {
                thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(e.into()),
        }
    }
}
