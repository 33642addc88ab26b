//! Dataset readers and writers.
//!
//! Three formats are understood: whitespace edge lists (`src dst [weight] t`),
//! JODIE interaction CSVs, and the labeled TSV written by `inject`.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::tgraph::{EdgeId, EventStore, GraphError, Label, NodeId, TemporalEdge};

const LABELED_MAGIC: &str = "# tgad-labeled";

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error("{path}: no edges")]
    Empty { path: String },
    #[error("{path}: {source}")]
    Graph { path: String, source: GraphError },
}

/// A loaded store plus the raw name of every dense node id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub store: EventStore,
    pub node_names: Vec<String>,
}

impl Dataset {
    /// Writes `dense_id \t raw_name` lines.
    pub fn write_node_map<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (i, name) in self.node_names.iter().enumerate() {
            writeln!(out, "{i}\t{name}")?;
        }
        out.flush()
    }
}

/// Dense ids in first-appearance order.
#[derive(Default)]
struct Interner {
    ids: HashMap<String, NodeId>,
    names: Vec<String>,
}

impl Interner {
    fn id(&mut self, name: &str) -> NodeId {
        if let Some(&i) = self.ids.get(name) {
            return i;
        }
        let i = self.names.len();
        self.ids.insert(name.to_string(), i);
        self.names.push(name.to_string());
        i
    }
}

fn read(path: &Path) -> Result<String, LoadError> {
    fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn finish(path: &Path, nodes: usize, edges: Vec<TemporalEdge>) -> Result<EventStore, LoadError> {
    let path = path.display().to_string();
    if edges.is_empty() {
        return Err(LoadError::Empty { path });
    }
    EventStore::new(nodes, edges).map_err(|source| LoadError::Graph { path, source })
}

fn parse_f64(tok: &str, what: &str) -> Result<f64, String> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format!("bad {what} `{tok}`"))
}

/// Reads `src dst [weight] timestamp` lines; `%` and `#` start comments.
/// Node ids must be integers and are remapped densely in order of first
/// appearance. The weight, when present, is the single edge feature.
pub fn load_edge_list(path: &Path) -> Result<Dataset, LoadError> {
    let text = read(path)?;
    let mut nodes = Interner::default();
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') || line.starts_with('#') {
            continue;
        }
        let parsed = (|| -> Result<TemporalEdge, String> {
            let toks: Vec<&str> = line.split_whitespace().collect();
            let (weight, t) = match toks.len() {
                3 => (0.0, toks[2]),
                4 => (parse_f64(toks[2], "weight")?, toks[3]),
                n => return Err(format!("expected 3 or 4 fields, found {n}")),
            };
            for tok in &toks[..2] {
                tok.parse::<u64>().map_err(|_| format!("bad node id `{tok}`"))?;
            }
            Ok(TemporalEdge {
                id: EdgeId(edges.len() as u64),
                src: nodes.id(toks[0]),
                dst: nodes.id(toks[1]),
                t: parse_f64(t, "timestamp")?,
                features: vec![weight],
                label: Label::Normal,
            })
        })();
        edges.push(parsed.map_err(|msg| LoadError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        })?);
    }
    let store = finish(path, nodes.names.len(), edges)?;
    Ok(Dataset {
        store,
        node_names: nodes.names,
    })
}

/// Reads a JODIE CSV: a header, then `user,item,timestamp,state_label,f...`.
/// Users take ids `0..U`, items `U..U+I`; the state label is the ground truth.
pub fn load_jodie_csv(path: &Path) -> Result<Dataset, LoadError> {
    let text = read(path)?;
    let mut users = Interner::default();
    let mut items = Interner::default();
    let mut rows: Vec<(NodeId, NodeId, f64, Label, Vec<f64>)> = Vec::new();
    let mut arity = None;
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| LoadError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let toks: Vec<&str> = line.split(',').map(str::trim).collect();
        if toks.len() < 4 {
            return Err(malformed(format!("expected at least 4 columns, found {}", toks.len())));
        }
        let t = parse_f64(toks[2], "timestamp").map_err(malformed)?;
        let label = match toks[3] {
            "0" | "0.0" => Label::Normal,
            "1" | "1.0" => Label::Anomaly,
            other => return Err(malformed(format!("bad state label `{other}`"))),
        };
        let features = toks[4..]
            .iter()
            .map(|tok| parse_f64(tok, "feature"))
            .collect::<Result<Vec<_>, _>>()
            .map_err(malformed)?;
        match arity {
            None => arity = Some(features.len()),
            Some(a) if a != features.len() => {
                return Err(malformed(format!("{} features, earlier rows have {a}", features.len())));
            }
            Some(_) => {}
        }
        rows.push((users.id(toks[0]), items.id(toks[1]), t, label, features));
    }
    let offset = users.names.len();
    let edges = rows
        .into_iter()
        .enumerate()
        .map(|(k, (u, it, t, label, features))| TemporalEdge {
            id: EdgeId(k as u64),
            src: u,
            dst: offset + it,
            t,
            features,
            label,
        })
        .collect();
    let node_names: Vec<String> = users
        .names
        .iter()
        .map(|n| format!("user:{n}"))
        .chain(items.names.iter().map(|n| format!("item:{n}")))
        .collect();
    let store = finish(path, node_names.len(), edges)?;
    Ok(Dataset { store, node_names })
}

/// Writes the labeled TSV: a header with the node count, then
/// `id \t src \t dst \t t \t label \t f...` in store order. Unlabeled edges
/// are written with label `-1`.
pub fn write_labeled<W: Write>(store: &EventStore, mut out: W) -> io::Result<()> {
    writeln!(out, "{LABELED_MAGIC} nodes={}", store.num_nodes())?;
    for e in store.edges() {
        let label = e.label.as_binary().map_or(-1, i32::from);
        write!(out, "{}\t{}\t{}\t{}\t{}", e.id.0, e.src, e.dst, e.t, label)?;
        for f in &e.features {
            write!(out, "\t{f}")?;
        }
        writeln!(out)?;
    }
    out.flush()
}

/// Reads a file produced by [`write_labeled`]. Node ids are kept as written.
pub fn load_labeled(path: &Path) -> Result<Dataset, LoadError> {
    let text = read(path)?;
    let malformed = |line: usize, msg: String| LoadError::Malformed {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let nodes = lines
        .next()
        .and_then(|(_, h)| h.strip_prefix(LABELED_MAGIC))
        .and_then(|rest| rest.trim().strip_prefix("nodes="))
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| malformed(1, format!("expected header `{LABELED_MAGIC} nodes=N`")))?;
    let mut edges = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split('\t').collect();
        let parsed = (|| -> Result<TemporalEdge, String> {
            if toks.len() < 5 {
                return Err(format!("expected at least 5 columns, found {}", toks.len()));
            }
            let int = |tok: &str, what: &str| tok.parse::<u64>().map_err(|_| format!("bad {what} `{tok}`"));
            let label = match toks[4] {
                "0" => Label::Normal,
                "1" => Label::Anomaly,
                "-1" => Label::Unlabeled,
                other => return Err(format!("bad label `{other}`")),
            };
            Ok(TemporalEdge {
                id: EdgeId(int(toks[0], "edge id")?),
                src: int(toks[1], "node id")? as NodeId,
                dst: int(toks[2], "node id")? as NodeId,
                t: parse_f64(toks[3], "timestamp")?,
                features: toks[5..].iter().map(|f| parse_f64(f, "feature")).collect::<Result<_, _>>()?,
                label,
            })
        })();
        edges.push(parsed.map_err(|msg| malformed(i + 1, msg))?);
    }
    let store = finish(path, nodes, edges)?;
    let node_names = (0..store.num_nodes()).map(|i| i.to_string()).collect();
    Ok(Dataset { store, node_names })
}
