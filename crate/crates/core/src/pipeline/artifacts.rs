//! Stage artifacts on disk. Every file carries the config digest: JSON files
//! wrap their content as `{"config_digest": .., "content": ..}`, CSV files
//! start with a `# config_digest: ..` line, and `dataset.jsonl` starts with a
//! `{"config_digest": ..}` line.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseVec;

const CSV_DIGEST_PREFIX: &str = "# config_digest: ";

#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    config_digest: String,
    content: T,
}

#[derive(Serialize, Deserialize)]
struct DigestLine {
    config_digest: String,
}

/// Shortest round-trip decimal; exponent form for very small or large
/// magnitudes so sparse files stay compact.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "NA".to_string())
}

pub fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::invalid(format!("not a number: {s:?}")))
}

pub(crate) fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse::<T>().map_err(|_| {
        Error::invalid(format!(
            "{}: bad field {i} {raw:?} on line {}",
            path.display(),
            rec.position().map(|p| p.line()).unwrap_or(0)
        ))
    })
}

/// The output directory of one run, bound to one config digest.
#[derive(Debug, Clone)]
pub struct ArtifactDir {
    dir: PathBuf,
    digest: String,
}

impl ArtifactDir {
    pub fn new(dir: impl Into<PathBuf>, digest: impl Into<String>) -> Self {
        ArtifactDir {
            dir: dir.into(),
            digest: digest.into(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn ensure_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))
    }

    /// Path of an upstream artifact; missing files name the stage producing them.
    pub fn require(&self, name: &str, producer: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, stage: producer })
        }
    }

    fn check_digest(&self, path: &Path, found: &str) -> Result<()> {
        if found == self.digest {
            Ok(())
        } else {
            Err(Error::DigestMismatch {
                path: path.to_path_buf(),
                expected: self.digest.clone(),
                found: found.to_string(),
            })
        }
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
        self.ensure_dir()?;
        let p = self.path(name);
        let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
        Ok((p, BufWriter::new(f)))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, content: &T) -> Result<()> {
        let (p, mut w) = self.create(name)?;
        let stamped = Stamped {
            config_digest: self.digest.clone(),
            content,
        };
        serde_json::to_writer_pretty(&mut w, &stamped)?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(&p, e))
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str, producer: &'static str) -> Result<T> {
        let p = self.require(name, producer)?;
        let f = File::open(&p).map_err(|e| Error::io(&p, e))?;
        let stamped: Stamped<T> = serde_json::from_reader(BufReader::new(f))?;
        self.check_digest(&p, &stamped.config_digest)?;
        Ok(stamped.content)
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let (p, mut w) = self.create(name)?;
        let io = |e| Error::io(&p, e);
        serde_json::to_writer(
            &mut w,
            &DigestLine {
                config_digest: self.digest.clone(),
            },
        )?;
        w.write_all(b"\n").map_err(io)?;
        for r in rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, name: &str, producer: &'static str) -> Result<Vec<T>> {
        let p = self.require(name, producer)?;
        let f = File::open(&p).map_err(|e| Error::io(&p, e))?;
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::invalid(format!("{} is empty", p.display())))?
            .map_err(|e| Error::io(&p, e))?;
        let head: DigestLine = serde_json::from_str(&first)?;
        self.check_digest(&p, &head.config_digest)?;
        let mut out = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(&p, e))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    /// Writes a CSV with the digest line, a header and the given rows.
    pub fn write_csv<I>(&self, name: &str, header: &[&str], rows: I) -> Result<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let (p, mut w) = self.create(name)?;
        writeln!(w, "{CSV_DIGEST_PREFIX}{}", self.digest).map_err(|e| Error::io(&p, e))?;
        let mut cw = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        cw.write_record(header)?;
        for r in rows {
            cw.write_record(&r)?;
        }
        cw.flush().map_err(|e| Error::io(&p, e))
    }

    /// Opens a CSV written by [`ArtifactDir::write_csv`] after checking its
    /// digest and header.
    pub fn read_csv(&self, name: &str, producer: &'static str, header: &[&str]) -> Result<(PathBuf, csv::Reader<BufReader<File>>)> {
        let p = self.require(name, producer)?;
        let f = File::open(&p).map_err(|e| Error::io(&p, e))?;
        let mut r = BufReader::new(f);
        let mut first = String::new();
        r.read_line(&mut first).map_err(|e| Error::io(&p, e))?;
        let found = first
            .trim_end()
            .strip_prefix(CSV_DIGEST_PREFIX)
            .ok_or_else(|| Error::invalid(format!("{} has no config digest line", p.display())))?;
        self.check_digest(&p, found)?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let got: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if got != header {
            return Err(Error::invalid(format!(
                "{}: unexpected header {got:?}, expected {header:?}",
                p.display()
            )));
        }
        Ok((p, reader))
    }

    /// Sparse rows as `id,column,value` triplets, ids and columns ascending.
    pub fn write_triplets(&self, name: &str, rows: &BTreeMap<u64, SparseVec>) -> Result<()> {
        let (p, mut w) = self.create(name)?;
        let io = |e| Error::io(&p, e);
        writeln!(w, "{CSV_DIGEST_PREFIX}{}", self.digest).map_err(io)?;
        writeln!(w, "id,column,value").map_err(io)?;
        for (id, v) in rows {
            for (c, x) in v.iter() {
                writeln!(w, "{id},{c},{}", fmt_f64(x)).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Reads triplets back; `ids` lists rows that exist even when empty.
    pub fn read_triplets(&self, name: &str, producer: &'static str, ids: &[u64], dim: usize) -> Result<BTreeMap<u64, SparseVec>> {
        let (p, mut reader) = self.read_csv(name, producer, &["id", "column", "value"])?;
        let mut pairs: BTreeMap<u64, Vec<(usize, f64)>> = ids.iter().map(|&id| (id, Vec::new())).collect();
        let mut rec = csv::StringRecord::new();
        while reader.read_record(&mut rec)? {
            let id: u64 = parse_field(&rec, 0, &p)?;
            let col: usize = parse_field(&rec, 1, &p)?;
            let val: f64 = parse_field(&rec, 2, &p)?;
            if col >= dim {
                return Err(Error::DimensionMismatch { expected: dim, found: col + 1 });
            }
            pairs
                .get_mut(&id)
                .ok_or_else(|| Error::invalid(format!("{}: unknown message id {id}", p.display())))?
                .push((col, val));
        }
        Ok(pairs.into_iter().map(|(id, v)| (id, SparseVec::from_pairs(v))).collect())
    }
}
