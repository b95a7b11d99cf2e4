//! Plain-text parameter archive.
//!
//! ```text
//! metakg-archive 1
//! meta <key> <value>
//! table <name> <dim> <dim> ...
//! <values, whitespace separated>
//! end
//! ```
//!
//! Values are written with the shortest representation that parses back to
//! the same bits, so save → load → save is byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &str = "metakg-archive 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: BTreeMap<String, String>,
    pub tables: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        assert!(
            !key.contains(char::is_whitespace) && !value.contains('\n'),
            "archive meta must be single-token keys and single-line values"
        );
        self.meta.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("archive lacks meta key `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Config(format!("archive meta `{key}` = `{raw}` does not parse")))
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tables.insert(name.to_string(), t);
    }

    pub fn table(&self, name: &str) -> Result<&Tensor> {
        self.tables
            .get(name)
            .ok_or_else(|| Error::Config(format!("archive lacks table `{name}`")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MAGIC}").unwrap();
        for (k, v) in &self.meta {
            writeln!(s, "meta {k} {v}").unwrap();
        }
        for (name, t) in &self.tables {
            write!(s, "table {name}").unwrap();
            for d in t.shape() {
                write!(s, " {d}").unwrap();
            }
            s.push('\n');
            for (i, v) in t.data().iter().enumerate() {
                if i > 0 {
                    s.push(if i % 8 == 0 { '\n' } else { ' ' });
                }
                write!(s, "{v:?}").unwrap();
            }
            if !t.data().is_empty() {
                s.push('\n');
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str, file: &str) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::Parse {
            file: file.to_string(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, l)) if l == MAGIC => {}
            _ => return Err(err(1, "not a parameter archive")),
        }
        let mut out = Archive::new();
        while let Some((no, line)) = lines.next() {
            if line == "end" {
                return Ok(out);
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                out.meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("table ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| err(no + 1, "table without name"))?;
                let shape = parts
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err(no + 1, "bad shape"))?;
                let n: usize = shape.iter().product();
                let mut data = Vec::with_capacity(n);
                while data.len() < n {
                    let (vno, vline) = lines.next().ok_or_else(|| err(no + 1, "truncated table"))?;
                    for tok in vline.split_whitespace() {
                        data.push(tok.parse::<f64>().map_err(|_| err(vno + 1, "bad value"))?);
                    }
                }
                if data.len() != n {
                    return Err(err(no + 1, "table length does not match its shape"));
                }
                let t = Tensor::new(shape, data).map_err(|e| err(no + 1, &e.to_string()))?;
                out.tables.insert(name.to_string(), t);
            } else {
                return Err(err(no + 1, "unexpected line"));
            }
        }
        Err(err(text.lines().count(), "missing `end`"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}
