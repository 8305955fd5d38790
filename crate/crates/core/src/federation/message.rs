//! The closed set of payloads exchanged between centers and the coordinator.
//!
//! Every frame is `"FDCV"`, `version: u16`, `tag: u16`, `payload_len: u64`,
//! followed by the payload. Only [`Message::ScoresShare`] carries rows indexed
//! by subject, and its column count is capped.

use nalgebra::DMatrix;

use crate::admm::ConsensusWeights;
use crate::error::{CenterId, Error, Result};
use crate::fpca::{GlobalBasis, LocalEigenpack, Scores};
use crate::stats::{FeatureMoments, GlobalStats};
use crate::wire::{Reader, Writer};

pub const MAGIC: &[u8; 4] = b"FDCV";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    StatsShare = 1,
    GlobalStatsBroadcast = 2,
    AdmmLocalShare = 3,
    ConsensusBroadcast = 4,
    EigenpackShare = 5,
    GlobalBasisBroadcast = 6,
    ScoresShare = 7,
}

impl MessageKind {
    pub const ALL: [MessageKind; 7] = [
        MessageKind::StatsShare,
        MessageKind::GlobalStatsBroadcast,
        MessageKind::AdmmLocalShare,
        MessageKind::ConsensusBroadcast,
        MessageKind::EigenpackShare,
        MessageKind::GlobalBasisBroadcast,
        MessageKind::ScoresShare,
    ];

    pub fn from_tag(tag: u16) -> Option<Self> {
        Self::ALL.into_iter().find(|k| *k as u16 == tag)
    }

    pub fn tag(self) -> u16 {
        self as u16
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::StatsShare => "StatsShare",
            MessageKind::GlobalStatsBroadcast => "GlobalStatsBroadcast",
            MessageKind::AdmmLocalShare => "AdmmLocalShare",
            MessageKind::ConsensusBroadcast => "ConsensusBroadcast",
            MessageKind::EigenpackShare => "EigenpackShare",
            MessageKind::GlobalBasisBroadcast => "GlobalBasisBroadcast",
            MessageKind::ScoresShare => "ScoresShare",
        }
    }

    /// Protocol phase the message belongs to, as used in exchange file names.
    pub fn phase(self) -> &'static str {
        match self {
            MessageKind::StatsShare | MessageKind::GlobalStatsBroadcast => "stats",
            MessageKind::AdmmLocalShare | MessageKind::ConsensusBroadcast => "admm",
            MessageKind::EigenpackShare | MessageKind::GlobalBasisBroadcast => "pca",
            MessageKind::ScoresShare => "scores",
        }
    }

    pub fn is_broadcast(self) -> bool {
        matches!(
            self,
            MessageKind::GlobalStatsBroadcast | MessageKind::ConsensusBroadcast | MessageKind::GlobalBasisBroadcast
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    StatsShare {
        center: CenterId,
        moments: FeatureMoments,
    },
    GlobalStatsBroadcast(GlobalStats),
    AdmmLocalShare {
        center: CenterId,
        round: u32,
        w: DMatrix<f64>,
        alpha: DMatrix<f64>,
    },
    ConsensusBroadcast {
        round: u32,
        /// Set on the last ADMM round; centers move on to PCA.
        final_round: bool,
        w_tilde: ConsensusWeights,
    },
    EigenpackShare {
        center: CenterId,
        pack: LocalEigenpack,
    },
    GlobalBasisBroadcast(GlobalBasis),
    ScoresShare {
        center: CenterId,
        scores: Scores,
        labels: Option<Vec<String>>,
    },
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::StatsShare { .. } => MessageKind::StatsShare,
            Message::GlobalStatsBroadcast(_) => MessageKind::GlobalStatsBroadcast,
            Message::AdmmLocalShare { .. } => MessageKind::AdmmLocalShare,
            Message::ConsensusBroadcast { .. } => MessageKind::ConsensusBroadcast,
            Message::EigenpackShare { .. } => MessageKind::EigenpackShare,
            Message::GlobalBasisBroadcast(_) => MessageKind::GlobalBasisBroadcast,
            Message::ScoresShare { .. } => MessageKind::ScoresShare,
        }
    }

    /// Sending center, `None` for coordinator broadcasts.
    pub fn sender(&self) -> Option<CenterId> {
        match self {
            Message::StatsShare { center, .. }
            | Message::AdmmLocalShare { center, .. }
            | Message::EigenpackShare { center, .. }
            | Message::ScoresShare { center, .. } => Some(*center),
            _ => None,
        }
    }

    /// ADMM round, 0 outside the ADMM phase.
    pub fn round(&self) -> u32 {
        match self {
            Message::AdmmLocalShare { round, .. } | Message::ConsensusBroadcast { round, .. } => *round,
            _ => 0,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Message::StatsShare { center, moments } => {
                w.u64(center.0 as u64);
                moments.write(&mut w);
            }
            Message::GlobalStatsBroadcast(s) => {
                w.u64(s.n_features() as u64).u64(s.n_total);
                w.f64s(s.mean.iter()).f64s(s.std.iter());
            }
            Message::AdmmLocalShare { center, round, w: wc, alpha } => {
                w.u64(center.0 as u64).u64(*round as u64);
                w.matrix(wc).matrix(alpha);
            }
            Message::ConsensusBroadcast {
                round,
                final_round,
                w_tilde,
            } => {
                w.u64(*round as u64).u8(*final_round as u8);
                w.matrix(&w_tilde.0);
            }
            Message::EigenpackShare { center, pack } => {
                w.u64(center.0 as u64);
                pack.write(&mut w);
                w.f64(pack.variance_captured);
            }
            Message::GlobalBasisBroadcast(b) => b.write(&mut w),
            Message::ScoresShare { center, scores, labels } => {
                w.u64(center.0 as u64)
                    .u64(scores.0.nrows() as u64)
                    .u64(scores.0.ncols() as u64);
                w.matrix_body_row_major(&scores.0);
                match labels {
                    None => {
                        w.u8(0);
                    }
                    Some(ls) => {
                        w.u8(1);
                        for l in ls {
                            w.str(l);
                        }
                    }
                }
            }
        }
        w.finish()
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut w = Writer::new();
        w.bytes(MAGIC).u16(VERSION).u16(self.kind().tag()).u64(payload.len() as u64);
        w.bytes(&payload);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let frame = Frame::parse(bytes)?;
        let kind = MessageKind::from_tag(frame.tag)
            .ok_or_else(|| Error::Wire(format!("unknown variant tag {}", frame.tag)))?;
        Self::decode_payload(kind, frame.payload)
    }

    pub fn decode_payload(kind: MessageKind, payload: &[u8]) -> Result<Self> {
        let mut r = Reader::new(payload);
        let center = |r: &mut Reader<'_>| -> Result<CenterId> {
            let id = r.u64()?;
            u32::try_from(id)
                .map(CenterId)
                .map_err(|_| Error::Wire(format!("center id {id} out of range")))
        };
        let round = |r: &mut Reader<'_>| -> Result<u32> {
            let v = r.u64()?;
            u32::try_from(v).map_err(|_| Error::Wire(format!("round {v} out of range")))
        };
        let msg = match kind {
            MessageKind::StatsShare => Message::StatsShare {
                center: center(&mut r)?,
                moments: FeatureMoments::read(&mut r)?,
            },
            MessageKind::GlobalStatsBroadcast => {
                let f = r.dim()?;
                let n_total = r.u64()?;
                let mean = r.vector(f)?;
                let std = r.vector(f)?;
                Message::GlobalStatsBroadcast(GlobalStats { mean, std, n_total })
            }
            MessageKind::AdmmLocalShare => Message::AdmmLocalShare {
                center: center(&mut r)?,
                round: round(&mut r)?,
                w: r.matrix()?,
                alpha: r.matrix()?,
            },
            MessageKind::ConsensusBroadcast => Message::ConsensusBroadcast {
                round: round(&mut r)?,
                final_round: match r.u8()? {
                    0 => false,
                    1 => true,
                    other => return Err(Error::Wire(format!("bad final-round flag {other}"))),
                },
                w_tilde: ConsensusWeights(r.matrix()?),
            },
            MessageKind::EigenpackShare => {
                let c = center(&mut r)?;
                // The captured fraction trails the pack layout.
                let body = r.bytes(r.remaining().saturating_sub(8))?;
                let captured = r.f64()?;
                Message::EigenpackShare {
                    center: c,
                    pack: LocalEigenpack::from_bytes(&body, captured)?,
                }
            }
            MessageKind::GlobalBasisBroadcast => Message::GlobalBasisBroadcast(GlobalBasis::read(&mut r)?),
            MessageKind::ScoresShare => {
                let c = center(&mut r)?;
                let n = r.dim()?;
                let m = r.dim()?;
                let coords = r.matrix_body_row_major(n, m)?;
                let labels = match r.u8()? {
                    0 => None,
                    1 => Some((0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?),
                    other => return Err(Error::Wire(format!("bad label flag {other}"))),
                };
                Message::ScoresShare {
                    center: c,
                    scores: Scores(coords),
                    labels,
                }
            }
        };
        r.finish()?;
        Ok(msg)
    }
}

/// A parsed envelope whose payload has not been interpreted.
#[derive(Debug, Clone, Copy)]
pub struct Frame<'a> {
    pub version: u16,
    pub tag: u16,
    pub payload: &'a [u8],
}

impl<'a> Frame<'a> {
    pub fn parse(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Wire(format!("frame of {} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Wire("bad magic".into()));
        }
        let mut r = Reader::new(&bytes[4..HEADER_LEN]);
        let version = r.u16()?;
        let tag = r.u16()?;
        let len = r.u64()?;
        if version != VERSION {
            return Err(Error::Wire(format!("unsupported version {version}")));
        }
        if len != (bytes.len() - HEADER_LEN) as u64 {
            return Err(Error::Wire(format!(
                "declared payload of {len} bytes, frame holds {}",
                bytes.len() - HEADER_LEN
            )));
        }
        Ok(Self {
            version,
            tag,
            payload: &bytes[HEADER_LEN..],
        })
    }
}
