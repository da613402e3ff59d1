use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, FeatureKind};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::graph::{LabeledGraph, SparseGraph};
use crate::scalar::Scalar;

/// Non-blank lines with their 1-based line numbers. Accepts LF and CRLF.
fn records(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_int(file: &Path, line: usize, field: &str) -> Result<i64> {
    field.trim().parse::<i64>().map_err(|_| {
        parse_err(
            file,
            line,
            format!("expected an integer, found {:?}", field.trim()),
        )
    })
}

fn file_for(dir: &Path, name: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{name}_{suffix}.txt"))
}

/// Reads `{name}_A.txt`, `{name}_graph_indicator.txt` and
/// `{name}_graph_labels.txt` (plus optional node labels / attributes) from
/// `dir`.
///
/// Node features are chosen by precedence: attributes, then one-hot node
/// labels, then one-hot degrees. Degree features are built with a bound taken
/// from the whole dataset; callers re-derive it per training split.
pub fn parse_tu_dataset<T: Scalar>(dir: &Path, name: &str) -> Result<Dataset<T>> {
    let a_path = file_for(dir, name, "A");
    let ind_path = file_for(dir, name, "graph_indicator");
    let gl_path = file_for(dir, name, "graph_labels");
    for p in [&a_path, &ind_path, &gl_path] {
        if !p.is_file() {
            return Err(Error::MissingFile(p.clone()));
        }
    }

    let raw_labels: Vec<i64> = records(&gl_path)?
        .into_iter()
        .map(|(ln, l)| parse_int(&gl_path, ln, &l))
        .collect::<Result<_>>()?;
    let num_graphs = raw_labels.len();
    if num_graphs == 0 {
        return Err(parse_err(&gl_path, 1, "no graph labels"));
    }

    // node -> (graph, local index)
    let mut graph_of = Vec::new();
    let mut local_of = Vec::new();
    let mut sizes = vec![0usize; num_graphs];
    for (ln, l) in records(&ind_path)? {
        let g = parse_int(&ind_path, ln, &l)?;
        if g < 1 || g as usize > num_graphs {
            return Err(parse_err(
                &ind_path,
                ln,
                format!("graph id {g} outside 1..={num_graphs}"),
            ));
        }
        let g = g as usize - 1;
        graph_of.push(g);
        local_of.push(sizes[g]);
        sizes[g] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return Err(parse_err(
            &ind_path,
            0,
            format!("graph {} has no nodes", empty + 1),
        ));
    }
    let num_nodes = graph_of.len();

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    for (ln, l) in records(&a_path)? {
        let mut parts = l.split(',');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(
                &a_path,
                ln,
                format!("expected \"i, j\", found {l:?}"),
            ));
        };
        let (u, v) = (parse_int(&a_path, ln, a)?, parse_int(&a_path, ln, b)?);
        for x in [u, v] {
            if x < 1 || x as usize > num_nodes {
                return Err(parse_err(
                    &a_path,
                    ln,
                    format!("node index {x} outside the {num_nodes} declared nodes"),
                ));
            }
        }
        let (u, v) = (u as usize - 1, v as usize - 1);
        if graph_of[u] != graph_of[v] {
            return Err(parse_err(
                &a_path,
                ln,
                format!(
                    "edge joins graphs {} and {}",
                    graph_of[u] + 1,
                    graph_of[v] + 1
                ),
            ));
        }
        if u != v {
            edges[graph_of[u]].push((local_of[u], local_of[v]));
        }
    }

    let attrs_path = file_for(dir, name, "node_attributes");
    let nlab_path = file_for(dir, name, "node_labels");
    let (kind, node_rows, node_label_values) = if attrs_path.is_file() {
        let rows = parse_attributes::<T>(&attrs_path, num_nodes)?;
        (FeatureKind::NodeAttributes, Some(rows), Vec::new())
    } else if nlab_path.is_file() {
        let recs = records(&nlab_path)?;
        if recs.len() != num_nodes {
            return Err(parse_err(
                &nlab_path,
                recs.last().map_or(0, |r| r.0),
                format!("{} node labels for {num_nodes} nodes", recs.len()),
            ));
        }
        let values: Vec<i64> = recs
            .iter()
            .map(|(ln, l)| parse_int(&nlab_path, *ln, l.split(',').next().unwrap_or("")))
            .collect::<Result<_>>()?;
        let alphabet: Vec<i64> = values
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let pos: HashMap<i64, usize> = alphabet.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        let rows = values
            .iter()
            .map(|v| {
                let mut row = vec![T::zero(); alphabet.len()];
                row[pos[v]] = T::one();
                row
            })
            .collect();
        (FeatureKind::NodeLabelsOnehot, Some(rows), alphabet)
    } else {
        (FeatureKind::DegreeOnehot, None, Vec::new())
    };

    let label_values: Vec<i64> = raw_labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let label_pos: HashMap<i64, usize> = label_values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, i))
        .collect();

    // Gather node rows per graph in local order.
    let mut per_graph_rows: Vec<Vec<Vec<T>>> = vec![Vec::new(); num_graphs];
    if let Some(rows) = node_rows {
        for (node, row) in rows.into_iter().enumerate() {
            per_graph_rows[graph_of[node]].push(row);
        }
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for (g, graph_edges) in edges.into_iter().enumerate() {
        let graph = SparseGraph::from_edges(sizes[g], &graph_edges)?;
        let features = match kind {
            FeatureKind::DegreeOnehot => Tensor::zeros(sizes[g], 1),
            _ => Tensor::from_rows(&per_graph_rows[g]),
        };
        graphs.push(LabeledGraph::new(
            graph,
            features,
            label_pos[&raw_labels[g]],
        )?);
    }

    let mut ds = Dataset {
        name: name.to_string(),
        graphs,
        num_classes: label_values.len(),
        feature_kind: kind,
        label_values,
        node_label_values,
        max_degree: None,
    };
    if kind == FeatureKind::DegreeOnehot {
        let all: Vec<usize> = (0..ds.graphs.len()).collect();
        let bound = ds.degree_bound(&all);
        ds.set_degree_features(bound)?;
    }
    Ok(ds)
}

fn parse_attributes<T: Scalar>(path: &Path, num_nodes: usize) -> Result<Vec<Vec<T>>> {
    let recs = records(path)?;
    if recs.len() != num_nodes {
        return Err(parse_err(
            path,
            recs.last().map_or(0, |r| r.0),
            format!("{} attribute rows for {num_nodes} nodes", recs.len()),
        ));
    }
    let mut width = None;
    let mut rows = Vec::with_capacity(num_nodes);
    for (ln, l) in recs {
        let row: Vec<T> = l
            .split(',')
            .map(|f| {
                let v: f64 = f.trim().parse().map_err(|_| {
                    parse_err(path, ln, format!("expected a number, found {:?}", f.trim()))
                })?;
                if !v.is_finite() {
                    return Err(parse_err(path, ln, "non-finite attribute"));
                }
                Ok(T::of(v))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(parse_err(
                    path,
                    ln,
                    format!("{} attributes, expected {w}", row.len()),
                ))
            }
            _ => {}
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Writes `dataset` back out in the same text format. Degree features are
/// derived, so nothing is written for them.
pub fn write_tu_dataset<T: Scalar>(dataset: &Dataset<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let name = &dataset.name;
    let mut a = String::new();
    let mut ind = String::new();
    let mut gl = String::new();
    let mut nl = String::new();
    let mut attrs = String::new();
    let mut base = 0;
    for (g, lg) in dataset.graphs.iter().enumerate() {
        let n = lg.num_nodes();
        for u in 0..n {
            ind.push_str(&format!("{}\n", g + 1));
            for &v in lg.graph.neighbors(u) {
                a.push_str(&format!("{}, {}\n", base + u + 1, base + v + 1));
            }
            let row = lg.features.row(u);
            match dataset.feature_kind {
                FeatureKind::NodeAttributes => {
                    let fields: Vec<String> =
                        row.iter().map(|v| format!("{}", v.as_f64())).collect();
                    attrs.push_str(&fields.join(", "));
                    attrs.push('\n');
                }
                FeatureKind::NodeLabelsOnehot => {
                    let hot = row.iter().position(|&v| v == T::one()).unwrap_or(0);
                    nl.push_str(&format!("{}\n", dataset.node_label_values[hot]));
                }
                FeatureKind::DegreeOnehot => {}
            }
        }
        gl.push_str(&format!("{}\n", dataset.label_values[lg.label]));
        base += n;
    }
    fs::write(file_for(dir, name, "A"), a)?;
    fs::write(file_for(dir, name, "graph_indicator"), ind)?;
    fs::write(file_for(dir, name, "graph_labels"), gl)?;
    match dataset.feature_kind {
        FeatureKind::NodeAttributes => fs::write(file_for(dir, name, "node_attributes"), attrs)?,
        FeatureKind::NodeLabelsOnehot => fs::write(file_for(dir, name, "node_labels"), nl)?,
        FeatureKind::DegreeOnehot => {}
    }
    Ok(())
}
