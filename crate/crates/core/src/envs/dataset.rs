//! Demonstration records and their JSON-lines file format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub mode: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoMeta {
    pub env: String,
    pub seed: u64,
    pub dt: f64,
    #[serde(rename = "L")]
    pub l: usize,
    /// Index of the first record of every episode.
    pub episode_starts: Vec<usize>,
    /// Leading records that form the training split, when the split is temporal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_frames: Option<usize>,
    /// Ground-truth goals for goal-reaching tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goals: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub meta: DemoMeta,
    pub records: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: DemoMeta,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.records.first() else {
            return Ok(());
        };
        let dims = (first.x.len(), first.u.len(), first.z.len());
        for (i, w) in self.records.windows(2).enumerate() {
            if !(w[1].t > w[0].t) {
                return Err(Error::Parse { line: i + 3, detail: "t must be strictly increasing".into() });
            }
        }
        for (i, r) in self.records.iter().enumerate() {
            if (r.x.len(), r.u.len(), r.z.len()) != dims {
                return Err(Error::Parse {
                    line: i + 2,
                    detail: format!("dims {:?} differ from first record {dims:?}", (r.x.len(), r.u.len(), r.z.len())),
                });
            }
        }
        if self.meta.episode_starts.first().is_some_and(|&s| s != 0) || self.meta.episode_starts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parse { line: 1, detail: "episode_starts must begin at 0 and increase".into() });
        }
        Ok(())
    }

    /// Start index of the episode containing record `i`.
    pub fn episode_start(&self, i: usize) -> usize {
        let s = &self.meta.episode_starts;
        match s.binary_search(&i) {
            Ok(j) => s[j],
            Err(0) => 0,
            Err(j) => s[j - 1],
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &Header { meta: self.meta.clone() })?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let meta = match lines.next() {
            Some((_, line)) => {
                let line = line?;
                serde_json::from_str::<Header>(&line).map_err(|e| Error::Parse { line: 1, detail: format!("header: {e}") })?.meta
            }
            None => return Err(Error::Parse { line: 1, detail: "empty file".into() }),
        };
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, detail: e.to_string() })?;
            records.push(rec);
        }
        let d = Demonstration { meta, records };
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    /// Relative frequency of each ground-truth mode label.
    pub fn mode_frequencies(&self) -> Vec<f64> {
        let k = self.records.iter().filter_map(|r| r.mode).max().map_or(0, |m| m + 1);
        let mut c = vec![0.0; k];
        for m in self.records.iter().filter_map(|r| r.mode) {
            c[m] += 1.0;
        }
        let n = self.records.len().max(1) as f64;
        c.iter().map(|v| v / n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Demonstration {
        Demonstration {
            meta: DemoMeta { env: "toy".into(), seed: 1, dt: 0.1, l: 3, episode_starts: vec![0, 2], train_frames: None, goals: None },
            records: (0..3)
                .map(|i| Record {
                    t: i as f64 * 0.1,
                    x: vec![i as f64],
                    u: vec![0.5],
                    z: vec![1.0, 2.0],
                    mode: if i == 1 { None } else { Some(i) },
                })
                .collect(),
        }
    }

    #[test]
    fn roundtrip() {
        let d = sample();
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        let back = Demonstration::read_jsonl(&buf[..]).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn bad_record_reports_line() {
        let mut buf = Vec::new();
        sample().write_jsonl(&mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("{\"t\": 9.0, \"x\": \"oops\"}\n");
        match Demonstration::read_jsonl(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn episode_lookup() {
        let d = sample();
        assert_eq!(d.episode_start(0), 0);
        assert_eq!(d.episode_start(1), 0);
        assert_eq!(d.episode_start(2), 2);
    }
}
