//! Message delivery between the coordinator and centers.
//!
//! Both transports move encoded frames, so a message always crosses the
//! wire codec whichever transport carries it.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CenterId, Error, Result};
use crate::federation::message::Message;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Address {
    Coordinator,
    Center(CenterId),
    AllCenters,
}

impl std::fmt::Display for Address {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Address::Coordinator => write!(f, "coordinator"),
            Address::Center(id) => write!(f, "center-{id}"),
            Address::AllCenters => write!(f, "all-centers"),
        }
    }
}

pub trait Transport {
    fn send(&mut self, from: Address, to: Address, msg: &Message) -> Result<()>;
    /// Next message addressed to `at` (directly or by broadcast), if any.
    fn receive(&mut self, at: Address) -> Result<Option<(Address, Message)>>;
}

/// FIFO queues per recipient, for single-process simulation.
#[derive(Debug, Default)]
pub struct InProcessTransport {
    queues: BTreeMap<Address, VecDeque<(Address, Vec<u8>)>>,
    centers: Vec<CenterId>,
}

impl InProcessTransport {
    pub fn new(centers: &[CenterId]) -> Self {
        let mut queues = BTreeMap::new();
        queues.insert(Address::Coordinator, VecDeque::new());
        for c in centers {
            queues.insert(Address::Center(*c), VecDeque::new());
        }
        Self {
            queues,
            centers: centers.to_vec(),
        }
    }

    fn queue(&mut self, at: Address) -> Result<&mut VecDeque<(Address, Vec<u8>)>> {
        self.queues
            .get_mut(&at)
            .ok_or_else(|| Error::InvalidConfig(format!("{at} is not registered with the transport")))
    }
}

impl Transport for InProcessTransport {
    fn send(&mut self, from: Address, to: Address, msg: &Message) -> Result<()> {
        let bytes = msg.encode();
        match to {
            Address::AllCenters => {
                for c in self.centers.clone() {
                    self.queue(Address::Center(c))?.push_back((from, bytes.clone()));
                }
            }
            other => self.queue(other)?.push_back((from, bytes)),
        }
        Ok(())
    }

    fn receive(&mut self, at: Address) -> Result<Option<(Address, Message)>> {
        match self.queue(at)?.pop_front() {
            None => Ok(None),
            Some((from, bytes)) => Ok(Some((from, Message::decode(&bytes)?))),
        }
    }
}

/// Message exchange through a shared directory.
///
/// Each message becomes `{phase}_{round}/{phase}_{round}_{sender}.msg` under
/// the root, where `sender` is the center id or `master` for coordinator
/// broadcasts. Center messages are addressed to the coordinator and
/// coordinator messages to all centers. Files are written under a temporary
/// name and renamed, so readers never observe partial frames.
#[derive(Debug)]
pub struct FileExchangeTransport {
    root: PathBuf,
    consumed: BTreeMap<Address, HashSet<PathBuf>>,
    // Protocol traffic is monotone: a reader never needs directories older
    // than the newest one it has read from.
    cursor: BTreeMap<Address, DirKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct DirKey {
    phase_rank: u8,
    round: u32,
    name: String,
}

fn phase_rank(phase: &str) -> Option<u8> {
    match phase {
        "stats" => Some(0),
        "admm" => Some(1),
        "pca" => Some(2),
        "scores" => Some(3),
        _ => None,
    }
}

impl DirKey {
    fn parse(name: &str) -> Option<Self> {
        let (phase, round) = name.rsplit_once('_')?;
        Some(Self {
            phase_rank: phase_rank(phase)?,
            round: round.parse().ok()?,
            name: name.to_string(),
        })
    }
}

pub const MASTER: &str = "master";

impl FileExchangeTransport {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            consumed: BTreeMap::new(),
            cursor: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Relative path of the file carrying `msg` from `from`.
    pub fn message_path(from: Address, msg: &Message) -> Result<PathBuf> {
        let kind = msg.kind();
        let dir = format!("{}_{}", kind.phase(), msg.round());
        let sender = match (from, msg.sender()) {
            (Address::Coordinator, None) => MASTER.to_string(),
            (Address::Center(id), Some(c)) if id == c => id.to_string(),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "{} from {from} does not fit the star layout",
                    kind.name()
                )))
            }
        };
        Ok(PathBuf::from(&dir).join(format!("{dir}_{sender}.msg")))
    }

    fn sorted_dirs(&self) -> Result<Vec<DirKey>> {
        let mut dirs = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                if let Some(key) = entry.file_name().to_str().and_then(DirKey::parse) {
                    dirs.push(key);
                }
            }
        }
        dirs.sort();
        Ok(dirs)
    }

    fn wanted(at: Address, file_stem_sender: &str) -> bool {
        match at {
            Address::Coordinator => file_stem_sender != MASTER,
            Address::Center(_) => file_stem_sender == MASTER,
            Address::AllCenters => false,
        }
    }
}

impl Transport for FileExchangeTransport {
    fn send(&mut self, from: Address, to: Address, msg: &Message) -> Result<()> {
        let expected = if msg.kind().is_broadcast() {
            Address::AllCenters
        } else {
            Address::Coordinator
        };
        if to != expected {
            return Err(Error::InvalidConfig(format!(
                "file exchange routes {} to {expected}, not {to}",
                msg.kind().name()
            )));
        }
        let rel = Self::message_path(from, msg)?;
        let path = self.root.join(&rel);
        fs::create_dir_all(path.parent().expect("message path has a directory"))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, msg.encode())?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn receive(&mut self, at: Address) -> Result<Option<(Address, Message)>> {
        let dirs = self.sorted_dirs()?;
        let start = self.cursor.get(&at).cloned();
        for dir in dirs.into_iter().filter(|d| start.as_ref().is_none_or(|s| d >= s)) {
            let mut files: Vec<PathBuf> = fs::read_dir(self.root.join(&dir.name))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "msg"))
                .collect();
            files.sort();
            for path in files {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let sender = stem.rsplit('_').next().unwrap_or_default();
                if !Self::wanted(at, sender) {
                    continue;
                }
                let seen = self.consumed.entry(at).or_default();
                if seen.contains(&path) {
                    continue;
                }
                let msg = Message::decode(&fs::read(&path)?)?;
                let from = match msg.sender() {
                    Some(c) => Address::Center(c),
                    None => Address::Coordinator,
                };
                if msg.kind().is_broadcast() != (sender == MASTER) {
                    return Err(Error::Wire(format!("{} stored under {}", msg.kind().name(), path.display())));
                }
                seen.insert(path);
                self.cursor.insert(at, dir);
                return Ok(Some((from, msg)));
            }
        }
        Ok(None)
    }
}
