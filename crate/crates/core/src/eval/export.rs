use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{EmbeddingMatrix, FeatureKind};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Writes `id,label_<task>...,f0..f{d-1}`. Floats use the shortest decimal
/// that parses back to the same bits.
pub fn export_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if matrix.is_empty() || matrix.dim() == 0 {
        return Err(Error::Degenerate("refusing to export an empty embedding matrix".into()));
    }
    let mut out = String::from("id");
    for task in matrix.labels.keys() {
        write!(out, ",label_{task}").expect("writing to a String");
    }
    for j in 0..matrix.dim() {
        write!(out, ",f{j}").expect("writing to a String");
    }
    out.push('\n');
    for r in 0..matrix.len() {
        write!(out, "{}", matrix.ids[r]).expect("writing to a String");
        for col in matrix.labels.values() {
            write!(out, ",{}", col[r]).expect("writing to a String");
        }
        for v in matrix.features.row(r) {
            write!(out, ",{v:?}").expect("writing to a String");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`export_embeddings`].
pub fn read_embeddings(path: impl AsRef<Path>, kind: FeatureKind, source: &str) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::MalformedRecord("empty embedding file".into()))?
        .split(',')
        .collect();
    if header.first() != Some(&"id") {
        return Err(Error::MalformedRecord("header must start with `id`".into()));
    }
    let tasks: Vec<String> = header[1..]
        .iter()
        .map_while(|h| h.strip_prefix("label_").map(str::to_string))
        .collect();
    let d = header.len() - 1 - tasks.len();
    for (j, h) in header[1 + tasks.len()..].iter().enumerate() {
        if *h != format!("f{j}") {
            return Err(Error::MalformedRecord(format!("unexpected column `{h}`")));
        }
    }
    let bad = |line: usize, what: &str| Error::MalformedRecord(format!("line {}: {what}", line + 2));
    let mut ids = Vec::new();
    let mut labels: Vec<Vec<usize>> = vec![Vec::new(); tasks.len()];
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(bad(i, "wrong field count"));
        }
        ids.push(fields[0].parse().map_err(|_| bad(i, "bad id"))?);
        for (t, f) in fields[1..=tasks.len()].iter().enumerate() {
            labels[t].push(f.parse().map_err(|_| bad(i, "bad label"))?);
        }
        for f in &fields[1 + tasks.len()..] {
            data.push(f.parse::<f64>().map_err(|_| bad(i, "bad feature"))?);
        }
    }
    let n = ids.len();
    Ok(EmbeddingMatrix {
        features: Matrix::from_vec(n, d, data),
        kind,
        source: source.to_string(),
        ids,
        labels: tasks.into_iter().zip(labels).collect::<BTreeMap<_, _>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingMatrix {
        EmbeddingMatrix {
            features: Matrix::from_vec(2, 3, vec![0.1, -1e-300, 1.0 / 3.0, 7.0, f64::MIN_POSITIVE, 2.5e17]),
            kind: FeatureKind::Cls,
            source: "x".into(),
            ids: vec![0, 1],
            labels: [("class".to_string(), vec![3, 1]), ("count".to_string(), vec![1, 6])]
                .into_iter()
                .collect(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let m = sample();
        export_embeddings(&m, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("id,label_class,label_count,f0,f1,f2\n"));
        assert_eq!(read_embeddings(&p, FeatureKind::Cls, "x").unwrap(), m);
    }

    #[test]
    fn empty_matrix_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = EmbeddingMatrix {
            features: Matrix::zeros(0, 3),
            ids: vec![],
            labels: BTreeMap::new(),
            ..sample()
        };
        assert!(matches!(
            export_embeddings(&m, dir.path().join("e.csv")),
            Err(Error::Degenerate(_))
        ));
    }
}
