//! Corpus file formats.
//!
//! Text: a header `dim=<d> count=<N>` then `N` lines `<item_id> <v_1> ... <v_d>`.
//! Binary (`.bin`): little-endian `u32 dim`, `u32 count`, then per item a
//! `u64 item_id` followed by `dim` `f32` values.
//!
//! Vectors are normalized on load; a zero vector is reported with its line
//! (text) or record (binary) number.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{l2_normalize, CorpusIndex};
use crate::error::{GrapeError, Result};

pub type RawItems = Vec<(u64, Vec<f64>)>;

fn parse_err(line: usize, message: impl Into<String>) -> GrapeError {
    GrapeError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let mut dim = None;
    let mut count = None;
    for tok in line.split_whitespace() {
        match tok.split_once('=') {
            Some(("dim", v)) => dim = v.parse().ok(),
            Some(("count", v)) => count = v.parse().ok(),
            _ => return Err(parse_err(1, format!("unexpected header token `{tok}`"))),
        }
    }
    match (dim, count) {
        (Some(d), Some(n)) if d > 0 => Ok((d, n)),
        _ => Err(parse_err(1, "header must be `dim=<d> count=<N>` with d > 0")),
    }
}

/// Parse the text corpus format without normalizing.
pub fn parse_text(src: &str) -> Result<RawItems> {
    let mut lines = src.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty corpus file"))?;
    let (dim, count) = parse_header(header)?;
    let mut items = Vec::with_capacity(count);
    for (i, line) in lines {
        let lineno = i + 1;
        let mut toks = line.split_whitespace();
        let id: u64 = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(lineno, "expected an integer item id"))?;
        let values = toks
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_err(lineno, format!("bad float `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(parse_err(
                lineno,
                format!("expected {dim} values, found {}", values.len()),
            ));
        }
        items.push((id, values));
    }
    if items.len() != count {
        return Err(parse_err(
            1,
            format!("header declares {count} items, found {}", items.len()),
        ));
    }
    Ok(items)
}

/// Parse the binary corpus format without normalizing.
pub fn parse_bin(bytes: &[u8]) -> Result<RawItems> {
    let mut cur = bytes;
    let mut take = |n: usize, rec: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(parse_err(rec, "truncated binary corpus"));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    let dim = u32::from_le_bytes(take(4, 0)?.try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(take(4, 0)?.try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(parse_err(0, "dim must be positive"));
    }
    let mut items = Vec::with_capacity(count);
    for rec in 1..=count {
        let id = u64::from_le_bytes(take(8, rec)?.try_into().unwrap());
        let raw = take(4 * dim, rec)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        items.push((id, values));
    }
    if !cur.is_empty() {
        return Err(parse_err(count, "trailing bytes after last record"));
    }
    Ok(items)
}

/// Normalize parsed items; `first_line` is the line/record number of item 0.
fn normalize_items(items: RawItems, first_line: usize) -> Result<CorpusIndex> {
    let normalized = items
        .into_iter()
        .enumerate()
        .map(|(i, (id, v))| {
            l2_normalize(&v)
                .map(|e| (id, e))
                .map_err(|_| parse_err(first_line + i, format!("item {id} is a zero or non-finite vector")))
        })
        .collect::<Result<Vec<_>>>()?;
    CorpusIndex::new(normalized)
}

/// Parse text corpus contents into a normalized index.
pub fn index_from_text(src: &str) -> Result<CorpusIndex> {
    // Header is line 1; blank lines are not expected in well-formed files.
    normalize_items(parse_text(src)?, 2)
}

/// Load a corpus file; `.bin` selects the binary layout.
pub fn read_corpus(path: &Path) -> Result<CorpusIndex> {
    if path.extension().is_some_and(|e| e == "bin") {
        normalize_items(parse_bin(&fs::read(path)?)?, 1)
    } else {
        index_from_text(&fs::read_to_string(path)?)
    }
}

pub fn write_text<W: Write>(items: &[(u64, Vec<f64>)], dim: usize, mut out: W) -> Result<()> {
    writeln!(out, "dim={dim} count={}", items.len())?;
    for (id, v) in items {
        write!(out, "{id}")?;
        for x in v {
            write!(out, " {x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_bin<W: Write>(items: &[(u64, Vec<f32>)], dim: usize, mut out: W) -> Result<()> {
    out.write_all(&(dim as u32).to_le_bytes())?;
    out.write_all(&(items.len() as u32).to_le_bytes())?;
    for (id, v) in items {
        out.write_all(&id.to_le_bytes())?;
        for x in v {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Write a normalized index in the text format.
pub fn write_index<W: Write>(index: &CorpusIndex, out: W) -> Result<()> {
    let items: Vec<_> = index
        .iter()
        .map(|(id, e)| (id, e.as_slice().to_vec()))
        .collect();
    write_text(&items, index.dim(), out)
}

/// SHA-256 over the normalized contents (dim, count, ids and f64 bits).
pub fn index_digest(index: &CorpusIndex) -> String {
    let mut h = Sha256::new();
    h.update((index.dim() as u64).to_le_bytes());
    h.update((index.len() as u64).to_le_bytes());
    for (id, e) in index.iter() {
        h.update(id.to_le_bytes());
        for x in e.as_slice() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_hand_corpus() {
        let idx = index_from_text("dim=2 count=3\n0 3 4\n1 1 0\n2 0 2\n").unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.dim(), 2);
        assert_eq!(idx.get(0).unwrap().as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_vector_names_line() {
        let err = index_from_text("dim=2 count=3\n0 3 4\n1 0 0\n2 0 2\n").unwrap_err();
        match err {
            GrapeError::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("item 1"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs() {
        assert!(index_from_text("").is_err());
        assert!(index_from_text("dim=2\n0 1 1\n").is_err());
        assert!(index_from_text("dim=2 count=2\n0 1 1\n").is_err());
        let e = index_from_text("dim=2 count=1\n0 1 x\n").unwrap_err();
        assert!(matches!(e, GrapeError::Parse { line: 2, .. }));
        let e = index_from_text("dim=3 count=1\n0 1 1\n").unwrap_err();
        assert!(matches!(e, GrapeError::Parse { line: 2, .. }));
        assert!(parse_bin(&[1, 0, 0, 0]).is_err());
    }

    #[test]
    fn bin_and_text_agree() {
        let raw: Vec<(u64, Vec<f32>)> = vec![
            (4, vec![0.1, -2.5, 3.0]),
            (1, vec![1.0e-3, 7.25, -0.3]),
            (9, vec![5.0, 0.0, 0.0]),
        ];
        let mut bin = Vec::new();
        write_bin(&raw, 3, &mut bin).unwrap();
        let widened: Vec<(u64, Vec<f64>)> = raw
            .iter()
            .map(|(id, v)| (*id, v.iter().map(|&x| x as f64).collect()))
            .collect();
        let mut text = Vec::new();
        write_text(&widened, 3, &mut text).unwrap();

        let a = normalize_items(parse_bin(&bin).unwrap(), 1).unwrap();
        let b = index_from_text(std::str::from_utf8(&text).unwrap()).unwrap();
        assert_eq!(index_digest(&a), index_digest(&b));
    }

    #[test]
    fn write_index_round_trips_bits() {
        let idx = index_from_text("dim=3 count=2\n5 0.3 1 -2\n6 1e-7 3 3\n").unwrap();
        let mut buf = Vec::new();
        write_index(&idx, &mut buf).unwrap();
        let again = index_from_text(std::str::from_utf8(&buf).unwrap()).unwrap();
        // Re-normalizing a unit vector can move the last bit; ranks must not move.
        for (a, b) in idx.embeddings().iter().zip(again.embeddings()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
