//! Transcript audit: which shapes left which center.
//!
//! The audit decodes every frame independently of the running protocol and
//! fails when a frame is not a known variant, when its byte length differs
//! from the size implied by its dimensions, when a matrix has a shape the
//! variant does not allow for the declared `F` and `q`, or when a matrix is
//! shaped like a center's raw features (`N_c x F`) or raw covariates
//! (`N_c x q`). A raw-looking shape that is also the legal one (a basis when
//! `N_c == F`, say) cannot be told apart by shape and is noted instead.
//! Shared scores are the one subject-indexed payload allowed; they must stay
//! within the column cap and are reported with a note.

use std::fmt::Write as _;

use crate::federation::message::{Frame, Message, HEADER_LEN};
use crate::federation::pipeline::Transcript;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditContext {
    /// Declared subject counts, one per center.
    pub center_sizes: Vec<usize>,
    pub n_features: usize,
    pub n_covariates: usize,
    pub score_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub index: usize,
    pub kind: String,
    pub dims: Vec<(usize, usize)>,
    pub bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
    pub violations: Vec<String>,
    pub notes: Vec<String>,
    pub subject_indexed_payloads: usize,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "result: {}", if self.passed() { "PASS" } else { "FAIL" });
        let _ = writeln!(s, "messages: {}", self.entries.len());
        let _ = writeln!(s, "subject_indexed_payloads: {}", self.subject_indexed_payloads);
        for v in &self.violations {
            let _ = writeln!(s, "violation: {v}");
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        for e in &self.entries {
            let dims: Vec<String> = e.dims.iter().map(|(r, c)| format!("{r}x{c}")).collect();
            let _ = writeln!(s, "message {} {} bytes={} dims=[{}]", e.index, e.kind, e.bytes, dims.join(","));
        }
        s
    }
}

/// Matrix shapes carried by a message, vectors as `1 x n`.
fn payload_dims(msg: &Message) -> Vec<(usize, usize)> {
    match msg {
        Message::StatsShare { moments, .. } => vec![(1, moments.n_features()); 2],
        Message::GlobalStatsBroadcast(s) => vec![(1, s.n_features()); 2],
        Message::AdmmLocalShare { w, alpha, .. } => vec![w.shape(), alpha.shape()],
        Message::ConsensusBroadcast { w_tilde, .. } => vec![w_tilde.0.shape()],
        Message::EigenpackShare { pack, .. } => vec![(1, pack.rank()), pack.basis.shape()],
        Message::GlobalBasisBroadcast(b) => {
            vec![(1, b.n_components()), (1, b.n_components()), b.components.shape()]
        }
        Message::ScoresShare { scores, .. } => vec![scores.0.shape()],
    }
}

/// Whether each shape from [`payload_dims`] is what the variant allows.
/// Ranks and component counts are free; feature and covariate axes are not.
fn legal_dims(msg: &Message, ctx: &AuditContext) -> Vec<bool> {
    let (f, q) = (ctx.n_features, ctx.n_covariates);
    let row_f = |d: (usize, usize)| d.0 == 1 && d.1 == f;
    match msg {
        Message::StatsShare { moments, .. } => vec![row_f((1, moments.n_features())); 2],
        Message::GlobalStatsBroadcast(s) => vec![row_f((1, s.n_features())); 2],
        Message::AdmmLocalShare { w, alpha, .. } => vec![w.shape() == (q, f), alpha.shape() == (q, f)],
        Message::ConsensusBroadcast { w_tilde, .. } => vec![w_tilde.0.shape() == (q, f)],
        Message::EigenpackShare { pack, .. } => vec![true, pack.basis.nrows() == f],
        Message::GlobalBasisBroadcast(b) => vec![true, true, b.components.nrows() == f],
        Message::ScoresShare { scores, .. } => vec![ctx.center_sizes.contains(&scores.0.nrows())],
    }
}

/// Payload size implied by a message's dimensions.
fn expected_payload_len(msg: &Message) -> usize {
    match msg {
        Message::StatsShare { moments, .. } => 8 + 16 + 16 * moments.n_features(),
        Message::GlobalStatsBroadcast(s) => 16 + 16 * s.n_features(),
        Message::AdmmLocalShare { w, alpha, .. } => 16 + (16 + 8 * w.len()) + (16 + 8 * alpha.len()),
        Message::ConsensusBroadcast { w_tilde, .. } => 9 + 16 + 8 * w_tilde.0.len(),
        Message::EigenpackShare { pack, .. } => {
            let (f, k) = pack.basis.shape();
            8 + 24 + 8 * k + 8 * f * k + 8
        }
        Message::GlobalBasisBroadcast(b) => {
            let (f, m) = b.components.shape();
            16 + 16 * m + 8 * f * m
        }
        Message::ScoresShare { scores, labels, .. } => {
            let base = 24 + 8 * scores.0.len() + 1;
            base + labels.as_ref().map_or(0, |ls| ls.iter().map(|l| 4 + l.len()).sum())
        }
    }
}

pub fn audit_privacy(transcript: &Transcript, ctx: &AuditContext) -> AuditReport {
    let mut report = AuditReport::default();
    let mut forbidden: Vec<((usize, usize), &str)> = Vec::new();
    for &n in &ctx.center_sizes {
        forbidden.push(((n, ctx.n_features), "raw features"));
        forbidden.push(((n, ctx.n_covariates), "raw covariates"));
    }
    for (index, entry) in transcript.entries.iter().enumerate() {
        let bytes = entry.frame.len();
        let msg = match Message::decode(&entry.frame) {
            Ok(m) => m,
            Err(e) => {
                let tag = Frame::parse(&entry.frame).map(|f| f.tag).ok();
                report.violations.push(format!(
                    "message {index}: not a legal variant (tag {}): {e}",
                    tag.map_or_else(|| "?".into(), |t| t.to_string())
                ));
                report.entries.push(AuditEntry {
                    index,
                    kind: "invalid".into(),
                    dims: Vec::new(),
                    bytes,
                });
                continue;
            }
        };
        let dims = payload_dims(&msg);
        let expected = HEADER_LEN + expected_payload_len(&msg);
        if bytes != expected {
            report
                .violations
                .push(format!("message {index}: {bytes} bytes, dimensions imply {expected}"));
        }
        let is_scores = matches!(msg, Message::ScoresShare { .. });
        let legal = legal_dims(&msg, ctx);
        for (&d, &ok) in dims.iter().zip(&legal) {
            let name = msg.kind().name();
            if !ok {
                report
                    .violations
                    .push(format!("message {index} ({name}): {}x{} is not a legal shape here", d.0, d.1));
            }
            let mut hits: Vec<&str> = forbidden.iter().filter(|(shape, _)| *shape == d).map(|(_, w)| *w).collect();
            hits.dedup();
            for what in hits {
                // Scores are N_c x m by design; only a full feature width is a leak there.
                if is_scores && what == "raw covariates" {
                    continue;
                }
                let msg_text = format!("message {index} ({name}): {}x{} payload matches a center's {what}", d.0, d.1);
                if ok && !is_scores {
                    report.notes.push(format!("{msg_text}, but is also the legal shape (ambiguous)"));
                } else {
                    report.violations.push(msg_text);
                }
            }
        }
        if is_scores {
            report.subject_indexed_payloads += 1;
            let m = dims[0].1;
            if m > ctx.score_cap {
                report
                    .violations
                    .push(format!("message {index}: {m} score columns exceed the cap of {}", ctx.score_cap));
            }
            report.notes.push(format!(
                "message {index}: scores are derived projections onto {m} global components"
            ));
        }
        report.entries.push(AuditEntry {
            index,
            kind: msg.kind().name().into(),
            dims,
            bytes,
        });
    }
    report
}
