//! Label, sub-label, name-list and word-list files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_file};
use crate::retrieval::SubLabels;
use crate::types::ConceptLabelMatrix;

#[derive(Serialize, Deserialize)]
struct LabelsJson {
    concepts: Vec<String>,
    labels: Vec<Vec<u8>>,
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Reads a label file: JSON (`{"concepts": [...], "labels": [[0,1,..],..]}`)
/// when the extension is `.json`, otherwise CSV with a header row of
/// concept names and one 0/1 row per item.
pub fn read_labels(path: &Path) -> Result<ConceptLabelMatrix> {
    let bytes = read_file(path)?;
    let (names, rows) = if is_json(path) {
        let j: LabelsJson =
            serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
        (j.concepts, j.labels)
    } else {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::format(path, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            let row = rec
                .iter()
                .map(|v| match v {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::format(
                        path,
                        format!("row {}: label {other:?} is not 0 or 1", line + 1),
                    )),
                })
                .collect::<Result<Vec<u8>>>()?;
            rows.push(row);
        }
        (names, rows)
    };
    ConceptLabelMatrix::new(names, &rows).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_labels(path: &Path, labels: &ConceptLabelMatrix) -> Result<()> {
    let bytes = if is_json(path) {
        let j = LabelsJson {
            concepts: labels.names().to_vec(),
            labels: labels.rows().map(<[u8]>::to_vec).collect(),
        };
        serde_json::to_vec(&j).map_err(|e| Error::format(path, e.to_string()))?
    } else {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(labels.names()).map_err(err)?;
        for row in labels.rows() {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(err)?;
        }
        w.into_inner().map_err(|e| Error::format(path, e.to_string()))?
    };
    atomic_write(path, &bytes)
}

/// Reads `item,parent_concept,sub_label` rows. The parent concept is a
/// concept name from `concepts` or a 0-based index.
pub fn read_sub_labels(path: &Path, n_items: usize, concepts: &[String]) -> Result<SubLabels> {
    let bytes = read_file(path)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["item", "parent_concept", "sub_label"] {
        return Err(Error::format(path, "header must be item,parent_concept,sub_label"));
    }
    let mut triples = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let bad = |m: &str| Error::format(path, format!("row {}: {m}", line + 1));
        let item: usize = rec[0].parse().map_err(|_| bad("item is not an index"))?;
        let concept = match concepts.iter().position(|c| c == &rec[1]) {
            Some(c) => c,
            None => rec[1]
                .parse::<usize>()
                .ok()
                .filter(|&c| c < concepts.len())
                .ok_or_else(|| bad("unknown parent concept"))?,
        };
        if item >= n_items {
            return Err(bad("item index out of range"));
        }
        triples.push((item, concept, rec[2].to_string()));
    }
    SubLabels::from_triples(n_items, triples.iter().map(|(i, c, s)| (*i, *c, s.as_str())))
}

/// Reads a JSON array of strings.
pub fn read_names(path: &Path) -> Result<Vec<String>> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_names(path: &Path, names: &[String]) -> Result<()> {
    atomic_write(path, &serde_json::to_vec(names).expect("strings serialize"))
}

/// Reads a newline-delimited word list; blank lines are skipped.
pub fn read_word_list(path: &Path) -> Result<Vec<String>> {
    let text = String::from_utf8(read_file(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = ConceptLabelMatrix::new(
            vec!["animal".into(), "sky".into()],
            &[vec![1, 0], vec![1, 1], vec![0, 1]],
        )
        .unwrap();
        for name in ["l.csv", "l.json"] {
            let p = dir.path().join(name);
            write_labels(&p, &l).unwrap();
            assert_eq!(read_labels(&p).unwrap(), l);
        }
        let text = std::fs::read_to_string(dir.path().join("l.csv")).unwrap();
        assert_eq!(text, "animal,sky\n1,0\n1,1\n0,1\n");
    }

    #[test]
    fn bad_labels_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Format { .. })));
        std::fs::write(&p, "a,b\n0,0\n").unwrap();
        assert!(matches!(read_labels(&p), Err(Error::Format { .. })));
        let missing = dir.path().join("missing.csv");
        match read_labels(&missing) {
            Err(e @ Error::Io { .. }) => {
                assert!(e.is_input_error());
                assert!(e.to_string().contains("missing.csv"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sub_labels_by_name_or_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        std::fs::write(&p, "item,parent_concept,sub_label\n0,animal,dog\n1,0,dog\n1,animal,cat\n2,sky,clouds\n")
            .unwrap();
        let concepts = vec!["animal".to_string(), "sky".to_string()];
        let s = read_sub_labels(&p, 3, &concepts).unwrap();
        assert!(s.share(&s, 0, 1, 0));
        assert!(!s.share(&s, 0, 2, 0));
        assert_eq!(s.under(2, 1).count(), 1);
        std::fs::write(&p, "item,parent_concept,sub_label\n5,animal,dog\n").unwrap();
        assert!(read_sub_labels(&p, 3, &concepts).is_err());
    }

    #[test]
    fn word_lists_and_names() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.txt");
        std::fs::write(&p, "dog\n\n cat \nsky\n").unwrap();
        assert_eq!(read_word_list(&p).unwrap(), vec!["dog", "cat", "sky"]);
        let n = dir.path().join("n.json");
        write_names(&n, &["a".into(), "b".into()]).unwrap();
        assert_eq!(read_names(&n).unwrap(), vec!["a", "b"]);
    }
}
