//! Plain-text model checkpoints.
//!
//! ```text
//! capse k=<k> n_filters=<N> d=<d> m=<m> step=<step>
//! entities <count> <k>          (embedding sections)
//! relations <count> <k>
//! filters <N> 3                 (N rows)
//! biases <N>                    (one row)
//! W <i> <d> <N>                 (d rows, for i = 1..=k)
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::embed::{read_embedding_sections, write_embeddings, EmbeddingTable};
use crate::kg::Vocab;
use crate::model::{CapsE, CapsEShape};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub emb: EmbeddingTable,
    pub model: CapsE,
    /// Epochs completed when the checkpoint was taken.
    pub step: usize,
}

impl Checkpoint {
    /// Fails with a shape error unless the checkpoint was trained on exactly
    /// `vocab` (same names in the same order).
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if self.vocab.entity_names() != vocab.entity_names()
            || self.vocab.relation_names() != vocab.relation_names()
        {
            return Err(Error::Shape(format!(
                "checkpoint vocabulary ({} entities, {} relations) does not match the dataset ({}, {})",
                self.vocab.num_entities(),
                self.vocab.num_relations(),
                vocab.num_entities(),
                vocab.num_relations()
            )));
        }
        Ok(())
    }
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    vocab: &Vocab,
    emb: &EmbeddingTable,
    model: &CapsE,
    step: usize,
) -> Result<()> {
    let s = model.shape();
    if s.k != emb.dim() {
        return Err(Error::Shape(format!(
            "model k = {} but embeddings have k = {}",
            s.k,
            emb.dim()
        )));
    }
    writeln!(
        w,
        "capse k={} n_filters={} d={} m={} step={step}",
        s.k, s.n_filters, s.d, s.iterations
    )?;
    write_embeddings(&mut w, emb, vocab)?;
    writeln!(w, "filters {} 3", s.n_filters)?;
    for row in model.filters().chunks(3) {
        write_row(&mut w, row)?;
    }
    writeln!(w, "biases {}", s.n_filters)?;
    write_row(&mut w, model.biases())?;
    for i in 0..s.k {
        writeln!(w, "W {} {} {}", i + 1, s.d, s.n_filters)?;
        for row in model.weight(i).chunks(s.n_filters) {
            write_row(&mut w, row)?;
        }
    }
    Ok(())
}

fn write_row<W: Write>(w: &mut W, row: &[f64]) -> Result<()> {
    let text: Vec<String> = row.iter().map(f64::to_string).collect();
    writeln!(w, "{}", text.join(" "))?;
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    vocab: &Vocab,
    emb: &EmbeddingTable,
    model: &CapsE,
    step: usize,
) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, vocab, emb, model, step)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(reader: R, source: &Path) -> Result<Checkpoint> {
    let mut lines = reader.lines().enumerate();
    let (line_no, header) = next(&mut lines, source, "checkpoint header")?;
    let (shape, step) = parse_header(&header).map_err(|m| Error::parse(source, line_no, m))?;
    shape.validate()?;
    let (vocab, emb) = read_embedding_sections(&mut lines, source)?;
    if emb.dim() != shape.k {
        return Err(Error::Shape(format!(
            "header says k = {} but embeddings have k = {}",
            shape.k,
            emb.dim()
        )));
    }
    let n = shape.n_filters;
    expect_header(&mut lines, source, &format!("filters {n} 3"))?;
    let mut filters = Vec::with_capacity(3 * n);
    for _ in 0..n {
        filters.extend(read_row(&mut lines, source, 3)?);
    }
    expect_header(&mut lines, source, &format!("biases {n}"))?;
    let biases = read_row(&mut lines, source, n)?;
    let mut weights = Vec::with_capacity(shape.weight_len());
    for i in 0..shape.k {
        expect_header(&mut lines, source, &format!("W {} {} {n}", i + 1, shape.d))?;
        for _ in 0..shape.d {
            weights.extend(read_row(&mut lines, source, n)?);
        }
    }
    let model = CapsE::from_parts(shape, filters, biases, weights)?;
    Ok(Checkpoint {
        vocab,
        emb,
        model,
        step,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?), path)
}

/// Loads a checkpoint and checks it against `vocab`.
pub fn load_checkpoint_for(path: &Path, vocab: &Vocab) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_vocab(vocab)?;
    Ok(ckpt)
}

type Lines<'a> = dyn Iterator<Item = (usize, std::io::Result<String>)> + 'a;

fn next(lines: &mut Lines<'_>, source: &Path, expecting: &str) -> Result<(usize, String)> {
    match lines.next() {
        Some((idx, line)) => Ok((idx + 1, line?)),
        None => Err(Error::Format(format!(
            "{}: unexpected end of file, expected {expecting}",
            source.display()
        ))),
    }
}

fn expect_header(lines: &mut Lines<'_>, source: &Path, header: &str) -> Result<()> {
    let (line_no, line) = next(lines, source, header)?;
    if line.split_whitespace().collect::<Vec<_>>().join(" ") != header {
        return Err(Error::parse(
            source,
            line_no,
            format!("expected `{header}`"),
        ));
    }
    Ok(())
}

fn read_row(lines: &mut Lines<'_>, source: &Path, len: usize) -> Result<Vec<f64>> {
    let (line_no, line) = next(lines, source, "parameter row")?;
    let row = line
        .split_whitespace()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|_| Error::parse(source, line_no, format!("bad number `{f}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if row.len() != len {
        return Err(Error::parse(
            source,
            line_no,
            format!("expected {len} values, found {}", row.len()),
        ));
    }
    Ok(row)
}

fn parse_header(line: &str) -> std::result::Result<(CapsEShape, usize), String> {
    let mut fields = line.split_whitespace();
    if fields.next() != Some("capse") {
        return Err("not a capse checkpoint".into());
    }
    let mut values = [None; 5];
    const KEYS: [&str; 5] = ["k", "n_filters", "d", "m", "step"];
    for field in fields {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| format!("malformed header field `{field}`"))?;
        let slot = KEYS
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| format!("unknown header field `{key}`"))?;
        values[slot] = Some(
            value
                .parse::<usize>()
                .map_err(|_| format!("bad value for `{key}`"))?,
        );
    }
    let get = |i: usize| values[i].ok_or_else(|| format!("header lacks `{}`", KEYS[i]));
    Ok((
        CapsEShape {
            k: get(0)?,
            n_filters: get(1)?,
            d: get(2)?,
            iterations: get(3)?,
        },
        get(4)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::init_random;
    use std::io::Cursor;

    fn sample() -> (Vocab, EmbeddingTable, CapsE) {
        let vocab =
            Vocab::from_names(vec!["a".into(), "b".into(), "c".into()], vec!["r".into()]).unwrap();
        let emb = init_random(&vocab, 3, 4);
        let shape = CapsEShape {
            k: 3,
            n_filters: 2,
            d: 2,
            iterations: 3,
        };
        (vocab, emb, CapsE::new_random(shape, 5).unwrap())
    }

    #[test]
    fn round_trip_is_exact() {
        let (vocab, emb, model) = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &vocab, &emb, &model, 30).unwrap();
        let ckpt = read_checkpoint(Cursor::new(buf), Path::new("ckpt")).unwrap();
        assert_eq!(ckpt.vocab, vocab);
        assert_eq!(ckpt.emb, emb);
        assert_eq!(ckpt.model, model);
        assert_eq!(ckpt.step, 30);
    }

    #[test]
    fn vocabulary_mismatch_is_a_shape_error() {
        let (vocab, emb, model) = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &vocab, &emb, &model, 1).unwrap();
        let ckpt = read_checkpoint(Cursor::new(buf), Path::new("ckpt")).unwrap();
        let other = Vocab::from_names(vec!["a".into(), "b".into()], vec!["r".into()]).unwrap();
        assert!(matches!(ckpt.check_vocab(&other), Err(Error::Shape(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (vocab, emb, model) = sample();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &vocab, &emb, &model, 1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
        assert!(read_checkpoint(Cursor::new(cut), Path::new("ckpt")).is_err());
    }

    #[test]
    fn header_parsing() {
        let (shape, step) = parse_header("capse k=4 n_filters=3 d=2 m=1 step=7").unwrap();
        assert_eq!(
            (shape.k, shape.n_filters, shape.d, shape.iterations, step),
            (4, 3, 2, 1, 7)
        );
        assert!(parse_header("capse k=4 d=2 m=1 step=7").is_err());
        assert!(parse_header("convkb k=4").is_err());
    }
}
