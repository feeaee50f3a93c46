//! Text formats.
//!
//! Prototype file:
//!
//! ```text
//! d K num_labels domain
//! <label name>
//! v_1 ... v_d          (K lines per label, 17 significant digits)
//! ```
//!
//! Projection file: `input_dim dim`, a `mean` line, a `variance` line, then
//! `input_dim` rows of `dim` values. Word-vector file: `name v_1 ... v_d`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{normalize, PrototypeTable, Projection};
use crate::domain::LabelSpace;
use crate::error::{Error, Result};

fn fmt_row(out: &mut String, vals: &[f64]) {
    for (i, v) in vals.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v:.16e}").expect("write to string");
    }
    out.push('\n');
}

fn parse_row(line: &str, want: usize, what: &str) -> Result<Vec<f64>> {
    let vals = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{what}: {t:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != want {
        return Err(Error::Parse(format!("{what}: expected {want} values, got {}", vals.len())));
    }
    Ok(vals)
}

pub fn format_prototypes(t: &PrototypeTable) -> String {
    let mut s = format!("{} {} {} {}\n", t.dim(), t.k(), t.num_labels(), t.domain());
    for (l, name) in t.labels().iter().enumerate() {
        s.push_str(name);
        s.push('\n');
        for j in 0..t.k() {
            fmt_row(&mut s, t.vector(l, j));
        }
    }
    s
}

pub fn write_prototypes(path: &Path, t: &PrototypeTable) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, format_prototypes(t)).map_err(|e| Error::io(path, e))
}

pub fn parse_prototypes(text: &str) -> Result<PrototypeTable> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty prototype file".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(Error::Parse(format!("bad header {header:?}")));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("header {s:?}: {e}")));
    let (d, k, nl, domain) = (num(parts[0])?, num(parts[1])?, num(parts[2])?, parts[3]);
    let mut labels = Vec::with_capacity(nl);
    let mut vectors = Vec::with_capacity(nl * k * d);
    for _ in 0..nl {
        let name = lines.next().ok_or_else(|| Error::Parse("missing label line".into()))?;
        labels.push(name.to_string());
        for _ in 0..k {
            let row = lines.next().ok_or_else(|| Error::Parse(format!("missing vector for {name}")))?;
            vectors.extend(parse_row(row, d, name)?);
        }
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(Error::Parse("trailing content in prototype file".into()));
    }
    PrototypeTable::new(domain, labels, d, k, vectors)
}

pub fn read_prototypes(path: &Path) -> Result<PrototypeTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_prototypes(&text)
}

pub fn write_projection(path: &Path, p: &Projection) -> Result<()> {
    let mut s = format!("{} {}\n", p.input_dim, p.dim);
    s.push_str("mean ");
    fmt_row(&mut s, &p.mean);
    s.push_str("variance ");
    fmt_row(&mut s, &p.explained_variance);
    for row in p.components.chunks(p.dim) {
        fmt_row(&mut s, row);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_projection(path: &Path) -> Result<Projection> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty projection file".into()))?;
    let dims = parse_row(header, 2, "projection header")?;
    let (c, d) = (dims[0] as usize, dims[1] as usize);
    let tagged = |line: Option<&str>, tag: &str, n: usize| -> Result<Vec<f64>> {
        let line = line.ok_or_else(|| Error::Parse(format!("missing {tag} line")))?;
        let rest = line
            .strip_prefix(tag)
            .ok_or_else(|| Error::Parse(format!("expected {tag} line")))?;
        parse_row(rest, n, tag)
    };
    let mean = tagged(lines.next(), "mean", c)?;
    let explained_variance = tagged(lines.next(), "variance", d)?;
    let mut components = Vec::with_capacity(c * d);
    for i in 0..c {
        let line = lines.next().ok_or_else(|| Error::Parse(format!("missing component row {i}")))?;
        components.extend(parse_row(line, d, "component")?);
    }
    Ok(Projection {
        input_dim: c,
        dim: d,
        mean,
        components,
        explained_variance,
    })
}

/// Labels whose word vectors coincide (their similarity scores tie).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordVectorReport {
    pub duplicate_pairs: Vec<(String, String)>,
}

/// Builds a `K = 1` table from a `name v_1 ... v_d` file, normalized.
pub fn load_word_vectors(path: &Path, label_space: &LabelSpace, domain: &str) -> Result<(PrototypeTable, WordVectorReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut dim = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut it = line.split_whitespace();
        let name = it.next().expect("non-empty line");
        let vals = it
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("{name}: {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        match dim {
            None => dim = Some(vals.len()),
            Some(d) if d != vals.len() => {
                return Err(Error::Parse(format!("{name} has {} values, expected {d}", vals.len())))
            }
            _ => {}
        }
        map.insert(name, vals);
    }
    let d = dim.filter(|&d| d > 0).ok_or_else(|| Error::Parse("no word vectors".into()))?;
    let mut vectors = Vec::with_capacity(label_space.len() * d);
    for name in label_space.names() {
        let v = map.get(name.as_str()).ok_or_else(|| Error::MissingLabel(name.clone()))?;
        let mut v = v.clone();
        normalize(&mut v);
        vectors.extend(v);
    }
    let mut report = WordVectorReport::default();
    let names = label_space.names();
    for a in 0..names.len() {
        for b in a + 1..names.len() {
            if vectors[a * d..(a + 1) * d] == vectors[b * d..(b + 1) * d] {
                report.duplicate_pairs.push((names[a].clone(), names[b].clone()));
            }
        }
    }
    Ok((PrototypeTable::new(domain, names.to_vec(), d, 1, vectors)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_vectors_load_and_flag() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("wv.txt");
        fs::write(&p, "road 1 0 0\nsky 0 2 0\ncar 0 2 0\nextra 1 1 1\n").unwrap();
        let ls = LabelSpace::from_names(&["road", "sky", "car"]).unwrap();
        let (t, r) = load_word_vectors(&p, &ls, "a").unwrap();
        assert_eq!((t.k(), t.dim(), t.num_labels()), (1, 3, 3));
        assert_eq!(t.vector(1, 0), &[0.0, 1.0, 0.0]);
        assert_eq!(r.duplicate_pairs, vec![("sky".to_string(), "car".to_string())]);

        let ls = LabelSpace::from_names(&["road", "rider"]).unwrap();
        let err = load_word_vectors(&p, &ls, "a").unwrap_err();
        assert!(err.to_string().contains("rider"), "{err}");
    }

    #[test]
    fn prototype_text_round_trip() {
        let t = PrototypeTable::new(
            "dom",
            vec!["a".into(), "b c".into()],
            3,
            2,
            vec![0.1, -1.0 / 3.0, 2.0e-300, 1.0, 0.0, -0.0, 7.5, 1e10, -3.25, 0.5, 0.25, std::f64::consts::PI],
        )
        .unwrap();
        let back = parse_prototypes(&format_prototypes(&t)).unwrap();
        assert!(back.same_vectors(&t));
        assert_eq!(format_prototypes(&back), format_prototypes(&t));
    }

    #[test]
    fn malformed_prototype_files() {
        assert!(parse_prototypes("").is_err());
        assert!(parse_prototypes("2 1 1 d\na\n1.0\n").is_err());
        assert!(parse_prototypes("2 1 2 d\na\n1 0\n").is_err());
    }
}
