//! Line-delimited JSON graph records.
//!
//! One object per line: `{"n_nodes": 3, "node_labels": [0, 0, 0], "edges": [[0, 1, 1]]}`.
//! Each unordered pair appears at most once; class 0 (absent) may not be listed.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Graph, ABSENT};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    n_nodes: usize,
    node_labels: Vec<usize>,
    edges: Vec<(usize, usize, usize)>,
}

fn to_graph(r: Record) -> std::result::Result<Graph, String> {
    if r.node_labels.len() != r.n_nodes {
        return Err(format!(
            "{} node labels for n_nodes = {}",
            r.node_labels.len(),
            r.n_nodes
        ));
    }
    let mut g = Graph::empty(r.n_nodes);
    for (i, &l) in r.node_labels.iter().enumerate() {
        g.set_node_label(i, l);
    }
    for (i, j, c) in r.edges {
        if i >= r.n_nodes || j >= r.n_nodes {
            return Err(format!("edge ({i}, {j}) out of range for {} nodes", r.n_nodes));
        }
        if i == j {
            return Err(format!("self-loop at node {i}"));
        }
        if c == ABSENT {
            return Err(format!("edge ({i}, {j}) listed with the absent class"));
        }
        if g.has_edge(i, j) {
            return Err(format!("edge ({i}, {j}) listed twice"));
        }
        g.set_edge(i, j, c).map_err(|e| e.to_string())?;
    }
    Ok(g)
}

pub fn parse_graph_line(line: &str, line_no: usize) -> Result<Graph> {
    let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    to_graph(record).map_err(|msg| Error::Parse { line: line_no, msg })
}

/// Read every non-blank line; errors carry 1-based line numbers.
pub fn read_graphs(reader: impl BufRead) -> Result<Vec<Graph>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_graph_line(&line, idx + 1)?);
    }
    Ok(out)
}

pub fn format_graph(g: &Graph) -> String {
    let record = Record {
        n_nodes: g.n_nodes(),
        node_labels: g.node_labels().to_vec(),
        edges: g.edges(),
    };
    serde_json::to_string(&record).expect("record serializes")
}

pub fn write_graphs(mut writer: impl Write, graphs: &[Graph]) -> Result<()> {
    for g in graphs {
        writeln!(writer, "{}", format_graph(g))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_graphs(path: &std::path::Path) -> Result<Vec<Graph>> {
    let file = std::fs::File::open(path)?;
    read_graphs(std::io::BufReader::new(file))
}

pub fn save_graphs(path: &std::path::Path, graphs: &[Graph]) -> Result<()> {
    let mut buf = Vec::new();
    write_graphs(&mut buf, graphs)?;
    std::fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut g = Graph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        g.set_edge(1, 2, 2).unwrap();
        g.set_node_label(3, 1);
        let mut buf = Vec::new();
        write_graphs(&mut buf, &[g.clone(), Graph::empty(1)]).unwrap();
        let back = read_graphs(buf.as_slice()).unwrap();
        assert_eq!(back, vec![g, Graph::empty(1)]);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let text = "{\"n_nodes\":2,\"node_labels\":[0,0],\"edges\":[[0,1,1]]}\n\n{\"n_nodes\":2,\"node_labels\":[0,0],\"edges\":[[0,0,1]]}\n";
        match read_graphs(text.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("self-loop"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad = "{\"n_nodes\":2,\"node_labels\":[0],\"edges\":[]}";
        assert!(matches!(read_graphs(bad.as_bytes()), Err(Error::Parse { line: 1, .. })));
        let dup = "{\"n_nodes\":2,\"node_labels\":[0,0],\"edges\":[[0,1,1],[1,0,1]]}";
        assert!(read_graphs(dup.as_bytes()).is_err());
        let extra = "{\"n_nodes\":1,\"node_labels\":[0],\"edges\":[],\"x\":1}";
        assert!(read_graphs(extra.as_bytes()).is_err());
    }
}
