//! Reader and writer for the TU flat-file graph collection format.
//!
//! A dataset `NAME` lives in one directory as a handful of text files:
//!
//! | file                         | content                                   |
//! |------------------------------|-------------------------------------------|
//! | `NAME_A.txt`                 | `i, j` per line, 1-based global node ids  |
//! | `NAME_graph_indicator.txt`   | graph id (1-based) of node `k` on line `k`|
//! | `NAME_graph_labels.txt`      | class label of graph `g` on line `g`      |
//! | `NAME_node_labels.txt`       | optional integer label per node           |
//! | `NAME_node_attributes.txt`   | optional comma-separated reals per node   |
//! | `NAME_graph_dist_labels.txt` | optional 0/1 ID/OOD label per graph       |
//!
//! The last file is not part of the public format; it lets mixed test sets
//! survive a round trip through disk.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{validate_dataset, Dataset, DistLabel, Graph, LabeledGraph};
use crate::linalg::Matrix;

fn file_path(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

/// Non-empty trimmed lines with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(format!("reading {}", path.display()), e)
        }
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn read_optional(path: &Path) -> Result<Option<Vec<(usize, String)>>> {
    if path.exists() {
        read_lines(path).map(Some)
    } else {
        Ok(None)
    }
}

fn parse_int(path: &Path, line: usize, token: &str) -> Result<i64> {
    token.trim().parse::<i64>().map_err(|_| Error::NotAnInteger {
        file: path.to_path_buf(),
        line,
        token: token.trim().to_string(),
    })
}

fn parse_real(path: &Path, line: usize, token: &str) -> Result<f64> {
    token.trim().parse::<f64>().map_err(|_| Error::NotAReal {
        file: path.to_path_buf(),
        line,
        token: token.trim().to_string(),
    })
}

fn int_column(path: &Path, lines: &[(usize, String)]) -> Result<Vec<i64>> {
    lines.iter().map(|(n, l)| parse_int(path, *n, l)).collect()
}

/// Reads dataset `name` from `dir`.
///
/// Node labels are one-hot encoded with column `label - min(0, min_label)`,
/// so non-negative labels index their own column; when node
/// attributes are also present the features are `[one-hot | attributes]`.
/// Without either file every node gets the single constant feature 1.
/// Graph labels are kept as-is when all are non-negative, otherwise they are
/// remapped to their rank among the distinct values. Self-loops in the edge
/// file are dropped.
pub fn parse_tu_dataset(dir: &Path, name: &str) -> Result<Dataset> {
    let a_path = file_path(dir, name, "A");
    let ind_path = file_path(dir, name, "graph_indicator");
    let gl_path = file_path(dir, name, "graph_labels");
    let a_lines = read_lines(&a_path)?;
    let ind_lines = read_lines(&ind_path)?;
    let gl_lines = read_lines(&gl_path)?;

    // Graph membership: ids must be 1-based and appear in contiguous blocks.
    let indicator = int_column(&ind_path, &ind_lines)?;
    let node_total = indicator.len();
    if node_total == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut graph_of = Vec::with_capacity(node_total);
    let mut starts: Vec<usize> = Vec::new();
    let mut prev: Option<usize> = None;
    for (k, &g) in indicator.iter().enumerate() {
        if g < 1 {
            return Err(Error::Malformed(format!(
                "{}:{}: graph id {g} is not 1-based",
                ind_path.display(),
                ind_lines[k].0
            )));
        }
        let g = (g - 1) as usize;
        match prev {
            Some(p) if p == g => {}
            Some(p) if g < p || starts.len() > g => {
                // Graph `g` already owns an earlier block, so its node range
                // overlaps graph `p`'s.
                return Err(Error::NodeInTwoGraphs {
                    node: k + 1,
                    first: p + 1,
                    second: g + 1,
                });
            }
            _ => {
                if g != starts.len() {
                    return Err(Error::Malformed(format!("graph {} has no nodes", starts.len() + 1)));
                }
                starts.push(k);
            }
        }
        prev = Some(g);
        graph_of.push(g);
    }
    let graph_count = starts.len();
    let mut bounds = starts.clone();
    bounds.push(node_total);

    let class_raw = int_column(&gl_path, &gl_lines)?;
    if class_raw.len() != graph_count {
        return Err(Error::Malformed(format!(
            "{} has {} labels for {graph_count} graphs",
            gl_path.display(),
            class_raw.len()
        )));
    }
    let class_labels: Vec<usize> = if class_raw.iter().all(|&c| c >= 0) {
        class_raw.iter().map(|&c| c as usize).collect()
    } else {
        let mut distinct = class_raw.clone();
        distinct.sort_unstable();
        distinct.dedup();
        class_raw.iter().map(|c| distinct.binary_search(c).unwrap()).collect()
    };

    // Edges, bucketed per graph in local indices.
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph_count];
    for (line, text) in &a_lines {
        let mut parts = text.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Malformed(format!(
                "{}:{line}: expected two comma-separated node ids",
                a_path.display()
            )));
        };
        let u = parse_int(&a_path, *line, a)?;
        let v = parse_int(&a_path, *line, b)?;
        for x in [u, v] {
            if x < 1 || x as usize > node_total {
                return Err(Error::Malformed(format!(
                    "{}:{line}: node id {x} outside 1..={node_total}",
                    a_path.display()
                )));
            }
        }
        let (u, v) = ((u - 1) as usize, (v - 1) as usize);
        if u == v {
            continue;
        }
        let (gu, gv) = (graph_of[u], graph_of[v]);
        if gu != gv {
            return Err(Error::EdgeCrossesGraphs {
                u: u + 1,
                v: v + 1,
                gu: gu + 1,
                gv: gv + 1,
            });
        }
        edges[gu].push((u - bounds[gu], v - bounds[gu]));
    }

    // Node features.
    let nl_path = file_path(dir, name, "node_labels");
    let at_path = file_path(dir, name, "node_attributes");
    let mut columns: Vec<Matrix> = Vec::new();
    let mut node_label_dim = 0;
    if let Some(lines) = read_optional(&nl_path)? {
        let labels = int_column(&nl_path, &lines)?;
        if labels.len() != node_total {
            return Err(Error::Malformed(format!(
                "{} has {} entries for {node_total} nodes",
                nl_path.display(),
                labels.len()
            )));
        }
        let min = (*labels.iter().min().unwrap()).min(0);
        let max = *labels.iter().max().unwrap();
        node_label_dim = (max - min + 1) as usize;
        let mut onehot = Matrix::zeros(node_total, node_label_dim);
        for (k, &l) in labels.iter().enumerate() {
            onehot[(k, (l - min) as usize)] = 1.0;
        }
        columns.push(onehot);
    }
    if let Some(lines) = read_optional(&at_path)? {
        if lines.len() != node_total {
            return Err(Error::Malformed(format!(
                "{} has {} rows for {node_total} nodes",
                at_path.display(),
                lines.len()
            )));
        }
        let rows = lines
            .iter()
            .map(|(n, l)| l.split(',').map(|t| parse_real(&at_path, *n, t)).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let attrs =
            Matrix::from_rows(&rows).map_err(|_| Error::Malformed(format!("{} has ragged rows", at_path.display())))?;
        columns.push(attrs);
    }
    let features = match columns.as_slice() {
        [] => Matrix::filled(node_total, 1, 1.0),
        [only] => only.clone(),
        [labels, attrs] => Matrix::hstack(labels, attrs)?,
        _ => unreachable!(),
    };
    let feature_dim = features.cols();

    let dl_path = file_path(dir, name, "graph_dist_labels");
    let dist_labels = match read_optional(&dl_path)? {
        None => None,
        Some(lines) => {
            let raw = int_column(&dl_path, &lines)?;
            if raw.len() != graph_count {
                return Err(Error::Malformed(format!(
                    "{} has {} labels for {graph_count} graphs",
                    dl_path.display(),
                    raw.len()
                )));
            }
            let labels = raw
                .iter()
                .zip(&lines)
                .map(|(&v, (n, _))| {
                    u8::try_from(v).ok().and_then(DistLabel::from_u8).ok_or_else(|| {
                        Error::Malformed(format!("{}:{n}: distribution label must be 0 or 1", dl_path.display()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(labels)
        }
    };

    let mut graphs = Vec::with_capacity(graph_count);
    for g in 0..graph_count {
        let (lo, hi) = (bounds[g], bounds[g + 1]);
        let idx: Vec<usize> = (lo..hi).collect();
        let graph = Graph::new(hi - lo, &edges[g], features.select_rows(&idx))?;
        let mut lg = LabeledGraph::new(graph, class_labels[g]);
        if let Some(d) = &dist_labels {
            lg = lg.with_dist_label(d[g]);
        }
        graphs.push(lg);
    }
    let mut ds = Dataset::new(name, feature_dim, graphs);
    ds.node_label_dim = node_label_dim;
    Ok(ds)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `dataset` under `dir` (created if needed) using the dataset's own
/// name as file prefix. The first `node_label_dim` feature columns must be a
/// one-hot encoding; they go to the node-label file and the remaining columns
/// to the attribute file, printed with 9 significant digits.
pub fn write_tu_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let report = validate_dataset(dataset);
    if let Some(v) = report.violations.first() {
        return Err(Error::Malformed(format!(
            "graph {}: {:?} ({} violations)",
            v.graph_index,
            v.kind,
            report.violations.len()
        )));
    }
    if dataset.node_label_dim > dataset.feature_dim {
        return Err(Error::Malformed(format!(
            "node_label_dim {} exceeds feature_dim {}",
            dataset.node_label_dim, dataset.feature_dim
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;

    let name = &dataset.name;
    let lab = dataset.node_label_dim;
    let mut a = String::new();
    let mut indicator = String::new();
    let mut graph_labels = String::new();
    let mut node_labels = String::new();
    let mut attributes = String::new();
    let mut dist = String::new();
    let mut offset = 0;
    for (g, lg) in dataset.graphs.iter().enumerate() {
        let graph = &lg.graph;
        for &(u, v) in graph.edges() {
            a.push_str(&format!("{}, {}\n", u + offset + 1, v + offset + 1));
            a.push_str(&format!("{}, {}\n", v + offset + 1, u + offset + 1));
        }
        for i in 0..graph.node_count() {
            indicator.push_str(&format!("{}\n", g + 1));
            let row = graph.features().row(i);
            if lab > 0 {
                let hot: Vec<usize> = (0..lab).filter(|&c| row[c] != 0.0).collect();
                if hot.len() != 1 || row[hot[0]] != 1.0 {
                    return Err(Error::Malformed(format!(
                        "graph {g} node {i}: label columns are not one-hot"
                    )));
                }
                node_labels.push_str(&format!("{}\n", hot[0]));
            }
            if dataset.feature_dim > lab {
                let cells: Vec<String> = row[lab..].iter().map(|x| format!("{x:.8e}")).collect();
                attributes.push_str(&cells.join(", "));
                attributes.push('\n');
            }
        }
        offset += graph.node_count();
        graph_labels.push_str(&format!("{}\n", lg.class_label));
        if let Some(d) = lg.dist_label {
            dist.push_str(&format!("{}\n", d.as_u8()));
        }
    }
    write_file(&file_path(dir, name, "A"), &a)?;
    write_file(&file_path(dir, name, "graph_indicator"), &indicator)?;
    write_file(&file_path(dir, name, "graph_labels"), &graph_labels)?;
    if lab > 0 {
        write_file(&file_path(dir, name, "node_labels"), &node_labels)?;
    }
    if dataset.feature_dim > lab {
        write_file(&file_path(dir, name, "node_attributes"), &attributes)?;
    }
    if dataset.dist_labels().is_some() {
        write_file(&file_path(dir, name, "graph_dist_labels"), &dist)?;
    }
    Ok(())
}
