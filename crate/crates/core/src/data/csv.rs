//! Minimal header-first CSV reader: comma separated, no quoting.

use std::io::BufRead;

use crate::error::{Error, Result};

pub struct CsvReader<R> {
    inner: R,
    header: Vec<String>,
    line: usize,
    buf: String,
}

impl<R: BufRead> CsvReader<R> {
    /// Reads the header row. An input without one is a schema error.
    pub fn new(mut inner: R) -> Result<Self> {
        let mut buf = String::new();
        if read_line(&mut inner, &mut buf, 1)? == 0 {
            return Err(Error::Schema("missing header row".into()));
        }
        let header: Vec<String> = split_record(&buf).map(str::to_owned).collect();
        for (i, h) in header.iter().enumerate() {
            if header[..i].contains(h) {
                return Err(Error::Schema(format!("duplicate column {:?}", h)));
            }
        }
        Ok(CsvReader {
            inner,
            header,
            line: 1,
            buf,
        })
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {:?}", name)))
    }

    /// Next record's line number and cells; blank lines are skipped.
    pub fn next_record(&mut self) -> Result<Option<(usize, Vec<&str>)>> {
        loop {
            self.line += 1;
            if read_line(&mut self.inner, &mut self.buf, self.line)? == 0 {
                return Ok(None);
            }
            if !trim_eol(&self.buf).is_empty() {
                break;
            }
        }
        let cells: Vec<&str> = split_record(&self.buf).collect();
        if cells.len() != self.header.len() {
            return Err(Error::Parse {
                line: self.line,
                msg: format!("expected {} columns, found {}", self.header.len(), cells.len()),
            });
        }
        Ok(Some((self.line, cells)))
    }
}

fn read_line<R: BufRead>(r: &mut R, buf: &mut String, line: usize) -> Result<usize> {
    buf.clear();
    match r.read_line(buf) {
        Ok(n) => Ok(n),
        Err(e) if e.kind() == std::io::ErrorKind::InvalidData => Err(Error::Parse {
            line,
            msg: "invalid UTF-8".into(),
        }),
        Err(e) => Err(e.into()),
    }
}

fn trim_eol(s: &str) -> &str {
    s.trim_end_matches(['\n', '\r'])
}

fn split_record(s: &str) -> std::str::Split<'_, char> {
    trim_eol(s).split(',')
}

/// Parses a 0/1 label cell (`0`, `1`, `0.0`, `1.0`, ...).
pub fn parse_label(cell: &str, line: usize) -> Result<u8> {
    let bad = || Error::Parse {
        line,
        msg: format!("label {:?} is not 0 or 1", cell),
    };
    let v: f64 = cell.trim().parse().map_err(|_| bad())?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(bad())
    }
}
