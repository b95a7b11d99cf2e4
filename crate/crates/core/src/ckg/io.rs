use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Alignment, EntityId, ItemId, Triple, UserId};
use crate::error::{Error, Result};

/// Raw dataset files.
///
/// * `train.txt`, `test.txt`: `user item item ...` per line
/// * `kg_final.txt`: `head relation tail` per line
/// * `item_list.txt` (optional): `item entity` per line, identity when absent
/// * `user_time.txt`, `item_time.txt` (optional): `id time` per line; ids
///   stand in for times when absent
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<(UserId, ItemId)>,
    pub test: Vec<(UserId, ItemId)>,
    pub kg: Vec<Triple>,
    pub alignment: Alignment,
    pub user_time: Vec<f64>,
    pub item_time: Vec<f64>,
}

impl Dataset {
    pub fn n_users(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .map(|(u, _)| u.0 + 1)
            .max()
            .unwrap_or(0)
            .max(self.user_time.len())
    }

    pub fn n_items(&self) -> usize {
        self.alignment.n_items()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let train = parse_interactions(&read_required(dir, "train.txt")?, "train.txt")?;
        let test = match read_optional(dir, "test.txt")? {
            Some(s) => parse_interactions(&s, "test.txt")?,
            None => Vec::new(),
        };
        let kg = parse_kg(&read_required(dir, "kg_final.txt")?)?;

        let max_item = train.iter().chain(&test).map(|(_, i)| i.0 + 1).max().unwrap_or(0);
        let n_users = train.iter().chain(&test).map(|(u, _)| u.0 + 1).max().unwrap_or(0);
        let user_time = read_times(dir, "user_time.txt", n_users)?;
        let item_list = read_optional(dir, "item_list.txt")?;
        let alignment = match item_list {
            Some(s) => {
                let pairs = parse_pairs(&s, "item_list.txt")?;
                let mut map = vec![None; pairs.iter().map(|p| p.0 + 1).max().unwrap_or(0)];
                for (item, entity) in pairs {
                    map[item] = Some(EntityId(entity));
                }
                let item_entity = map
                    .into_iter()
                    .enumerate()
                    .map(|(i, e)| e.ok_or(Error::DanglingItem(i)))
                    .collect::<Result<Vec<_>>>()?;
                if item_entity.len() < max_item {
                    return Err(Error::DanglingItem(item_entity.len()));
                }
                Alignment::new(item_entity)
            }
            None => {
                // items without interactions are still known through their times
                let timed = read_times(dir, "item_time.txt", 0)?.len();
                Alignment::identity(max_item.max(timed))
            }
        };
        let item_time = read_times(dir, "item_time.txt", alignment.n_items())?;
        Ok(Self {
            train,
            test,
            kg,
            alignment,
            user_time,
            item_time,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n_users = self.n_users();
        write(dir, "train.txt", &format_interactions(&self.train, n_users))?;
        write(dir, "test.txt", &format_interactions(&self.test, n_users))?;
        let mut kg = String::new();
        for t in &self.kg {
            writeln!(kg, "{} {} {}", t.head.0, t.relation.0, t.tail.0).unwrap();
        }
        write(dir, "kg_final.txt", &kg)?;
        if self.alignment != Alignment::identity(self.alignment.n_items()) {
            let mut s = String::new();
            for (i, e) in self.alignment.pairs() {
                writeln!(s, "{} {}", i.0, e.0).unwrap();
            }
            write(dir, "item_list.txt", &s)?;
        }
        write(dir, "user_time.txt", &format_times(&self.user_time))?;
        write(dir, "item_time.txt", &format_times(&self.item_time))?;
        Ok(())
    }
}

fn read_required(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    fs::read_to_string(&path).map_err(|e| Error::io(path, e))
}

fn read_optional(dir: &Path, name: &str) -> Result<Option<String>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    fs::read_to_string(&path).map(Some).map_err(|e| Error::io(path, e))
}

fn write(dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|e| Error::io(path, e))
}

fn parse_err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

fn numbers<T: std::str::FromStr>(line: &str, file: &str, no: usize) -> Result<Vec<T>> {
    line.split_whitespace()
        .map(|tok| tok.parse().map_err(|_| parse_err(file, no, format!("bad number `{tok}`"))))
        .collect()
}

fn parse_interactions(s: &str, file: &str) -> Result<Vec<(UserId, ItemId)>> {
    let mut out = Vec::new();
    for (no, line) in s.lines().enumerate() {
        let v: Vec<usize> = numbers(line, file, no + 1)?;
        if let Some((&u, items)) = v.split_first() {
            out.extend(items.iter().map(|&i| (UserId(u), ItemId(i))));
        }
    }
    Ok(out)
}

fn parse_kg(s: &str) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (no, line) in s.lines().enumerate() {
        let v: Vec<usize> = numbers(line, "kg_final.txt", no + 1)?;
        match v.as_slice() {
            [] => {}
            &[h, r, t] => out.push(Triple::new(h, r, t)),
            _ => return Err(parse_err("kg_final.txt", no + 1, "expected `head relation tail`")),
        }
    }
    Ok(out)
}

fn parse_pairs(s: &str, file: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (no, line) in s.lines().enumerate() {
        let v: Vec<usize> = numbers(line, file, no + 1)?;
        match v.as_slice() {
            [] => {}
            &[a, b] => out.push((a, b)),
            _ => return Err(parse_err(file, no + 1, "expected two integers")),
        }
    }
    Ok(out)
}

fn read_times(dir: &Path, name: &str, n: usize) -> Result<Vec<f64>> {
    let Some(s) = read_optional(dir, name)? else {
        return Ok((0..n).map(|i| i as f64).collect());
    };
    let mut times: Vec<Option<f64>> = vec![None; n];
    for (no, line) in s.lines().enumerate() {
        let mut it = line.split_whitespace();
        let (Some(id), Some(t), None) = (it.next(), it.next(), it.next()) else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(parse_err(name, no + 1, "expected `id time`"));
        };
        let id: usize = id.parse().map_err(|_| parse_err(name, no + 1, "bad id"))?;
        let t: f64 = t.parse().map_err(|_| parse_err(name, no + 1, "bad time"))?;
        if id >= times.len() {
            times.resize(id + 1, None);
        }
        times[id] = Some(t);
    }
    times
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| parse_err(name, 0, format!("no time for id {i}"))))
        .collect()
}

fn format_interactions(pairs: &[(UserId, ItemId)], n_users: usize) -> String {
    let mut per_user = vec![Vec::new(); n_users];
    for &(u, i) in pairs {
        per_user[u.0].push(i.0);
    }
    let mut s = String::new();
    for (u, items) in per_user.iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        write!(s, "{u}").unwrap();
        for i in items {
            write!(s, " {i}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn format_times(times: &[f64]) -> String {
    let mut s = String::new();
    for (i, t) in times.iter().enumerate() {
        writeln!(s, "{i} {t:?}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        Dataset {
            train: vec![(UserId(0), ItemId(1)), (UserId(0), ItemId(0)), (UserId(2), ItemId(2))],
            test: vec![(UserId(1), ItemId(2))],
            kg: vec![Triple::new(0, 0, 3), Triple::new(2, 1, 3)],
            alignment: Alignment::identity(3),
            user_time: vec![0.5, 1.25, 3.0],
            item_time: vec![1.0, 0.1, 2.0],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = sample();
        d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
    }

    #[test]
    fn explicit_alignment_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = sample();
        d.alignment = Alignment::new(vec![EntityId(4), EntityId(0), EntityId(2)]);
        d.save(dir.path()).unwrap();
        assert!(dir.path().join("item_list.txt").exists());
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
    }

    #[test]
    fn missing_train_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::MissingInput(_))));
    }

    #[test]
    fn malformed_kg_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.txt"), "0 1\n").unwrap();
        fs::write(dir.path().join("kg_final.txt"), "0 0 1\n1 x 2\n").unwrap();
        match Dataset::load(dir.path()) {
            Err(Error::Parse { file, line, .. }) => assert_eq!((file.as_str(), line), ("kg_final.txt", 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn absent_times_default_to_ids() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.txt"), "0 1\n1 0 1\n").unwrap();
        fs::write(dir.path().join("kg_final.txt"), "").unwrap();
        let d = Dataset::load(dir.path()).unwrap();
        assert_eq!(d.user_time, vec![0.0, 1.0]);
        assert_eq!(d.item_time, vec![0.0, 1.0]);
        assert_eq!(d.alignment, Alignment::identity(2));
    }
}
