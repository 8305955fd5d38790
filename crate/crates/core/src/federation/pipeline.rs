//! Single-process driver: every center and the coordinator as state machines
//! exchanging frames through a [`Transport`].

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::admm::{AdmmTrace, IterationDiagnostics};
use crate::error::{shape_err, CenterId, Error, Result};
use crate::federation::message::{Message, MessageKind};
use crate::federation::protocol::{
    CenterScores, CenterSite, CenterState, CoordinatorOutput, CoordinatorState, GroundTruth, Outbound, PhaseKind,
    PipelineConfig,
};
use crate::federation::transport::{Address, Transport};
use crate::fpca::{GlobalBasis, Scores};
use crate::stats::{CenterData, GlobalStats};
use crate::wire::{Reader, Writer};

const RESULT_MAGIC: &[u8; 4] = b"FDCR";
const TRANSCRIPT_MAGIC: &[u8; 4] = b"FDCT";

/// What the coordinator knows at the end of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisResult {
    pub global_stats: GlobalStats,
    pub w_tilde: DMatrix<f64>,
    pub trace: AdmmTrace,
    pub basis: GlobalBasis,
    /// Per-center scores in center-id order; empty unless scores are shared.
    pub scores: Vec<CenterScores>,
}

impl From<CoordinatorOutput> for AnalysisResult {
    fn from(o: CoordinatorOutput) -> Self {
        Self {
            global_stats: o.global_stats,
            w_tilde: o.w_tilde.0,
            trace: o.trace,
            basis: o.basis,
            scores: o.scores,
        }
    }
}

fn write_stats(w: &mut Writer, s: &GlobalStats) {
    w.u64(s.n_features() as u64).u64(s.n_total);
    w.f64s(s.mean.iter()).f64s(s.std.iter());
}

fn read_stats(r: &mut Reader<'_>) -> Result<GlobalStats> {
    let f = r.dim()?;
    let n_total = r.u64()?;
    Ok(GlobalStats {
        mean: r.vector(f)?,
        std: r.vector(f)?,
        n_total,
    })
}

fn write_opt_f64(w: &mut Writer, v: Option<f64>) {
    match v {
        None => w.u8(0).f64(0.0),
        Some(x) => w.u8(1).f64(x),
    };
}

fn read_opt_f64(r: &mut Reader<'_>) -> Result<Option<f64>> {
    let flag = r.u8()?;
    let v = r.f64()?;
    match flag {
        0 => Ok(None),
        1 => Ok(Some(v)),
        other => Err(Error::Wire(format!("bad option flag {other}"))),
    }
}

impl AnalysisResult {
    pub fn admm_rounds(&self) -> usize {
        self.trace.len()
    }

    /// Canonical little-endian encoding; equal results give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(RESULT_MAGIC);
        write_stats(&mut w, &self.global_stats);
        w.matrix(&self.w_tilde);
        w.u64(self.trace.len() as u64);
        for row in &self.trace.rows {
            w.u64(row.iteration as u64)
                .f64(row.max_primal_residual)
                .f64(row.consensus_change);
            write_opt_f64(&mut w, row.mse_vs_truth);
        }
        self.basis.write(&mut w);
        w.u64(self.scores.len() as u64);
        for s in &self.scores {
            w.u32(s.center.0).matrix(&s.scores.0);
            match &s.labels {
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
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(4)? != RESULT_MAGIC {
            return Err(Error::Wire("not an analysis result".into()));
        }
        let global_stats = read_stats(&mut r)?;
        let w_tilde = r.matrix()?;
        let n_rows = r.dim()?;
        let mut trace = AdmmTrace::default();
        for _ in 0..n_rows {
            trace.push(IterationDiagnostics {
                iteration: r.u64()? as usize,
                max_primal_residual: r.f64()?,
                consensus_change: r.f64()?,
                mse_vs_truth: read_opt_f64(&mut r)?,
            });
        }
        let basis = GlobalBasis::read(&mut r)?;
        let n_scores = r.dim()?;
        let mut scores = Vec::new();
        for _ in 0..n_scores {
            let center = CenterId(r.u32()?);
            let m = r.matrix()?;
            let labels = match r.u8()? {
                0 => None,
                1 => Some((0..m.nrows()).map(|_| r.str()).collect::<Result<Vec<_>>>()?),
                other => return Err(Error::Wire(format!("bad label flag {other}"))),
            };
            scores.push(CenterScores {
                center,
                scores: Scores(m),
                labels,
            });
        }
        r.finish()?;
        Ok(Self {
            global_stats,
            w_tilde,
            trace,
            basis,
            scores,
        })
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// All shared scores stacked in center order, with `(center, label)` per row.
    pub fn pooled_scores(&self) -> (DMatrix<f64>, Vec<(CenterId, Option<String>)>) {
        let m = self.scores.first().map_or(0, |s| s.scores.0.ncols());
        let n: usize = self.scores.iter().map(|s| s.scores.0.nrows()).sum();
        let mut out = DMatrix::zeros(n, m);
        let mut tags = Vec::with_capacity(n);
        let mut row = 0;
        for s in &self.scores {
            let k = s.scores.0.nrows();
            out.rows_mut(row, k).copy_from(&s.scores.0);
            for i in 0..k {
                tags.push((s.center, s.labels.as_ref().map(|l| l[i].clone())));
            }
            row += k;
        }
        (out, tags)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub from: Address,
    pub to: Address,
    pub frame: Vec<u8>,
}

/// Every frame sent during a run, in send order. Broadcasts appear once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

fn write_address(w: &mut Writer, a: Address) {
    match a {
        Address::Coordinator => w.u8(0).u32(0),
        Address::Center(id) => w.u8(1).u32(id.0),
        Address::AllCenters => w.u8(2).u32(0),
    };
}

fn read_address(r: &mut Reader<'_>) -> Result<Address> {
    let tag = r.u8()?;
    let id = r.u32()?;
    match tag {
        0 => Ok(Address::Coordinator),
        1 => Ok(Address::Center(CenterId(id))),
        2 => Ok(Address::AllCenters),
        other => Err(Error::Wire(format!("bad address tag {other}"))),
    }
}

impl Transcript {
    pub fn push(&mut self, from: Address, to: Address, msg: &Message) {
        self.entries.push(TranscriptEntry {
            from,
            to,
            frame: msg.encode(),
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Message counts by kind, from the frame tags.
    pub fn counts(&self) -> BTreeMap<MessageKind, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            if let Some(kind) = e
                .frame
                .get(6..8)
                .and_then(|t| MessageKind::from_tag(u16::from_le_bytes([t[0], t[1]])))
            {
                *out.entry(kind).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(TRANSCRIPT_MAGIC).u64(self.entries.len() as u64);
        for e in &self.entries {
            write_address(&mut w, e.from);
            write_address(&mut w, e.to);
            w.u64(e.frame.len() as u64).bytes(&e.frame);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(4)? != TRANSCRIPT_MAGIC {
            return Err(Error::Wire("not a transcript".into()));
        }
        let n = r.dim()?;
        let mut entries = Vec::new();
        for _ in 0..n {
            let from = read_address(&mut r)?;
            let to = read_address(&mut r)?;
            let len = r.dim()?;
            entries.push(TranscriptEntry {
                from,
                to,
                frame: r.bytes(len)?,
            });
        }
        r.finish()?;
        Ok(Self { entries })
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// `index,from,to,kind,round,bytes`; undecodable frames show as `invalid`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,from,to,kind,round,bytes\n");
        for (i, e) in self.entries.iter().enumerate() {
            let (kind, round) = match Message::decode(&e.frame) {
                Ok(m) => (m.kind().name(), m.round().to_string()),
                Err(_) => ("invalid", String::new()),
            };
            s.push_str(&format!("{i},{},{},{kind},{round},{}\n", e.from, e.to, e.frame.len()));
        }
        s
    }
}

/// Expected message count for `c` centers and `k` ADMM rounds.
pub fn expected_message_count(c: usize, k: usize, share_scores: bool) -> usize {
    (c + 1) + k * (c + 1) + (c + 1) + if share_scores { c } else { 0 }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub result: AnalysisResult,
    pub transcript: Transcript,
}

/// Which protocol phase a center-originated message belongs to.
fn phase_of(kind: MessageKind) -> PhaseKind {
    match kind {
        MessageKind::StatsShare | MessageKind::GlobalStatsBroadcast => PhaseKind::Standardize,
        MessageKind::AdmmLocalShare | MessageKind::ConsensusBroadcast => PhaseKind::Admm,
        MessageKind::EigenpackShare | MessageKind::GlobalBasisBroadcast => PhaseKind::Pca,
        MessageKind::ScoresShare => PhaseKind::Scores,
    }
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    truth: Option<GroundTruth>,
    dropout: Option<(CenterId, PhaseKind)>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Self {
            config,
            truth: None,
            dropout: None,
        }
    }

    /// Ground truth for the MSE column of the ADMM trace.
    pub fn with_truth(mut self, truth: GroundTruth) -> Self {
        self.truth = Some(truth);
        self
    }

    /// Simulates `center` going silent instead of sending its first message of `phase`.
    pub fn with_dropout(mut self, center: CenterId, phase: PhaseKind) -> Self {
        self.dropout = Some((center, phase));
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn run(&self, mut sites: Vec<CenterSite>, transport: &mut dyn Transport) -> Result<PipelineRun> {
        self.config.validate()?;
        if sites.is_empty() {
            return Err(Error::NoCenters);
        }
        sites.sort_by_key(|s| s.id);
        if let Some(w) = sites.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::DuplicateSender(w[0].id));
        }
        let (f, q) = (sites[0].data.n_features(), sites[0].data.n_covariates());
        if let Some(s) = sites.iter().find(|s| s.data.n_features() != f || s.data.n_covariates() != q) {
            return Err(shape_err(format!(
                "center {} has {} features / {} covariates, expected {f} / {q}",
                s.id,
                s.data.n_features(),
                s.data.n_covariates()
            )));
        }
        let n = sites.len();
        let mut coord = CoordinatorState::new(sites.iter().map(|s| s.id), self.config.clone())?;
        if let Some(t) = &self.truth {
            coord = coord.with_truth(t.clone());
        }
        let mut centers = sites
            .into_iter()
            .map(|s| CenterState::new(s, self.config.clone(), n))
            .collect::<Result<Vec<_>>>()?;

        let mut transcript = Transcript::default();
        let mut silent: BTreeSet<CenterId> = BTreeSet::new();
        let mut emit_center = |id: CenterId,
                               out: Vec<Outbound>,
                               transport: &mut dyn Transport,
                               transcript: &mut Transcript|
         -> Result<()> {
            for (to, msg) in out {
                if silent.contains(&id) || self.dropout == Some((id, phase_of(msg.kind()))) {
                    silent.insert(id);
                    continue;
                }
                transport.send(Address::Center(id), to, &msg)?;
                transcript.push(Address::Center(id), to, &msg);
            }
            Ok(())
        };

        for c in centers.iter_mut() {
            let out = c.start()?;
            emit_center(c.id(), out, transport, &mut transcript)?;
        }
        loop {
            let mut progress = false;
            while let Some((from, msg)) = transport.receive(Address::Coordinator)? {
                progress = true;
                for (to, reply) in coord.handle(from, msg)? {
                    transport.send(Address::Coordinator, to, &reply)?;
                    transcript.push(Address::Coordinator, to, &reply);
                }
            }
            for c in centers.iter_mut() {
                let at = c.address();
                while let Some((from, msg)) = transport.receive(at)? {
                    progress = true;
                    let out = c.handle(from, msg)?;
                    emit_center(c.id(), out, transport, &mut transcript)?;
                }
            }
            if !progress {
                if coord.is_done() {
                    break;
                }
                return Err(Error::PhaseTimeout {
                    phase: coord.phase().to_string(),
                    missing: coord.missing(),
                });
            }
        }
        let result = coord.output().expect("coordinator is done").into();
        Ok(PipelineRun { result, transcript })
    }
}

/// Runs the full protocol over `centers`, numbered `0..C` in order.
pub fn run_pipeline(
    centers: &[CenterData],
    config: &PipelineConfig,
    transport: &mut dyn Transport,
) -> Result<AnalysisResult> {
    let sites = centers
        .iter()
        .enumerate()
        .map(|(i, d)| CenterSite::new(CenterId(i as u32), d.clone()))
        .collect();
    Ok(Pipeline::new(config.clone()).run(sites, transport)?.result)
}
