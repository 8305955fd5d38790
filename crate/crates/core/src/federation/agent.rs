//! Long-running participants for multi-process file exchange: each center
//! runs in its own process with only its own data, the coordinator in
//! another, all polling a shared directory.

use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info};

use crate::error::{CenterId, Error, Result};
use crate::federation::message::Message;
use crate::federation::pipeline::{AnalysisResult, PipelineRun, Transcript};
use crate::federation::protocol::{CenterSite, CenterState, CoordinatorState, GroundTruth, PipelineConfig};
use crate::federation::transport::{Address, FileExchangeTransport, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PollPolicy {
    pub interval: Duration,
    /// Maximum wait without any inbound message.
    pub idle_timeout: Duration,
}

impl Default for PollPolicy {
    fn default() -> Self {
        Self {
            interval: Duration::from_millis(20),
            idle_timeout: Duration::from_secs(120),
        }
    }
}

pub struct CenterAgent {
    state: CenterState,
    transport: FileExchangeTransport,
    poll: PollPolicy,
}

impl CenterAgent {
    pub fn new(site: CenterSite, config: PipelineConfig, n_centers: usize, transport: FileExchangeTransport) -> Result<Self> {
        Ok(Self {
            state: CenterState::new(site, config, n_centers)?,
            transport,
            poll: PollPolicy::default(),
        })
    }

    pub fn with_poll(mut self, poll: PollPolicy) -> Self {
        self.poll = poll;
        self
    }

    fn send_all(&mut self, out: Vec<(Address, Message)>) -> Result<()> {
        let me = Address::Center(self.state.id());
        for (to, msg) in out {
            debug!("center {} sends {}", self.state.id(), msg.kind().name());
            self.transport.send(me, to, &msg)?;
        }
        Ok(())
    }

    /// Runs until the protocol finishes for this center.
    pub fn run(mut self) -> Result<()> {
        let me = Address::Center(self.state.id());
        let out = self.state.start()?;
        self.send_all(out)?;
        let mut last = Instant::now();
        while !self.state.is_done() {
            match self.transport.receive(me)? {
                Some((from, msg)) => {
                    last = Instant::now();
                    let out = self.state.handle(from, msg)?;
                    self.send_all(out)?;
                }
                None => {
                    if last.elapsed() > self.poll.idle_timeout {
                        return Err(Error::PhaseTimeout {
                            phase: self.state.phase().to_string(),
                            missing: Vec::new(),
                        });
                    }
                    thread::sleep(self.poll.interval);
                }
            }
        }
        info!("center {} finished", self.state.id());
        Ok(())
    }
}

pub struct CoordinatorAgent {
    state: CoordinatorState,
    transport: FileExchangeTransport,
    poll: PollPolicy,
}

impl CoordinatorAgent {
    pub fn new(roster: &[CenterId], config: PipelineConfig, transport: FileExchangeTransport) -> Result<Self> {
        Ok(Self {
            state: CoordinatorState::new(roster.iter().copied(), config)?,
            transport,
            poll: PollPolicy::default(),
        })
    }

    pub fn with_truth(mut self, truth: GroundTruth) -> Self {
        self.state = self.state.with_truth(truth);
        self
    }

    pub fn with_poll(mut self, poll: PollPolicy) -> Self {
        self.poll = poll;
        self
    }

    /// Runs the coordinator to completion. The transcript lists each round's
    /// center messages in id order followed by the broadcast, the same order
    /// the single-process driver produces.
    pub fn run(mut self) -> Result<PipelineRun> {
        let mut transcript = Transcript::default();
        let mut pending: Vec<(CenterId, Address, Message)> = Vec::new();
        let mut last = Instant::now();
        let flush = |pending: &mut Vec<(CenterId, Address, Message)>, transcript: &mut Transcript| {
            pending.sort_by_key(|(id, _, _)| *id);
            for (_, from, msg) in pending.drain(..) {
                transcript.push(from, Address::Coordinator, &msg);
            }
        };
        while !self.state.is_done() {
            match self.transport.receive(Address::Coordinator)? {
                Some((from, msg)) => {
                    last = Instant::now();
                    let id = msg.sender().ok_or(Error::UnexpectedPhase {
                        phase: self.state.phase().to_string(),
                        got: msg.kind().name().into(),
                    })?;
                    let record = msg.clone();
                    let out = self.state.handle(from, msg)?;
                    pending.push((id, from, record));
                    for (to, reply) in out {
                        flush(&mut pending, &mut transcript);
                        debug!("coordinator broadcasts {}", reply.kind().name());
                        self.transport.send(Address::Coordinator, to, &reply)?;
                        transcript.push(Address::Coordinator, to, &reply);
                    }
                }
                None => {
                    if last.elapsed() > self.poll.idle_timeout {
                        return Err(Error::PhaseTimeout {
                            phase: self.state.phase().to_string(),
                            missing: self.state.missing(),
                        });
                    }
                    thread::sleep(self.poll.interval);
                }
            }
        }
        flush(&mut pending, &mut transcript);
        info!("coordinator finished after {} messages", transcript.len());
        let result: AnalysisResult = self.state.output().expect("coordinator is done").into();
        Ok(PipelineRun { result, transcript })
    }
}
