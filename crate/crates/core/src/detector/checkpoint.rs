//! Checkpoint files.
//!
//! ```text
//! SRTCKPT 1
//! kind detector | oracle
//! seed <u64>
//! landmarks <K>
//! detector <json>            detector only, from here on
//! step <n>
//! epoch <n>
//! sampler <json>
//! log <json>                 one per completed epoch
//! params <n>                 then n reals, one per line
//! adam <t> <n>               then n lines `m v`
//! ```
//!
//! Reals use 17 significant digits so a checkpoint restores bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::adam::AdamState;
use super::train::{EpochLog, TrainState};
use super::{Detector, DetectorConfig};
use crate::raster::{fmt_real, parse_real};
use crate::{Error, Result};

const MAGIC: &str = "SRTCKPT 1";

/// What a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Trained {
        seed: u64,
        state: Box<TrainState>,
    },
    /// Test double that answers with the reference landmarks.
    Oracle {
        seed: u64,
        landmarks: usize,
    },
}

impl Checkpoint {
    pub fn landmarks(&self) -> usize {
        match self {
            Checkpoint::Trained { state, .. } => state.detector.config().landmarks,
            Checkpoint::Oracle { landmarks, .. } => *landmarks,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Checkpoint::Trained { seed, .. } | Checkpoint::Oracle { seed, .. } => *seed,
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Config(e.to_string()))
}

pub fn write_checkpoint<W: Write>(out: &mut W, ckpt: &Checkpoint) -> Result<()> {
    writeln!(out, "{MAGIC}")?;
    match ckpt {
        Checkpoint::Oracle { seed, landmarks } => {
            writeln!(out, "kind oracle")?;
            writeln!(out, "seed {seed}")?;
            writeln!(out, "landmarks {landmarks}")?;
        }
        Checkpoint::Trained { seed, state } => {
            writeln!(out, "kind detector")?;
            writeln!(out, "seed {seed}")?;
            writeln!(out, "landmarks {}", state.detector.config().landmarks)?;
            writeln!(out, "detector {}", json(state.detector.config())?)?;
            writeln!(out, "step {}", state.step)?;
            writeln!(out, "epoch {}", state.epoch)?;
            writeln!(out, "sampler {}", json(&state.sampler)?)?;
            for l in &state.log {
                writeln!(out, "log {}", json(l)?)?;
            }
            let p = state.detector.params();
            writeln!(out, "params {}", p.len())?;
            for v in p {
                writeln!(out, "{}", fmt_real(*v))?;
            }
            writeln!(out, "adam {} {}", state.adam.t, state.adam.m.len())?;
            for (m, v) in state.adam.m.iter().zip(&state.adam.v) {
                writeln!(out, "{} {}", fmt_real(*m), fmt_real(*v))?;
            }
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self) -> Result<String> {
        self.line += 1;
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(Error::parse(
                "checkpoint",
                format!("unexpected end at line {}", self.line),
            )),
        }
    }

    /// Next line, which must start with `tag`; returns the rest.
    fn tagged(&mut self, tag: &str) -> Result<String> {
        let l = self.next()?;
        match l.split_once(' ') {
            Some((t, rest)) if t == tag => Ok(rest.to_string()),
            _ => Err(Error::parse(
                "checkpoint",
                format!("line {}: expected {tag:?}, got {l:?}", self.line),
            )),
        }
    }

    fn number<T: std::str::FromStr>(&mut self, tag: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let rest = self.tagged(tag)?;
        rest.trim()
            .parse()
            .map_err(|e| Error::parse("checkpoint", format!("line {}: {e}", self.line)))
    }
}

fn from_json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_str(s).map_err(|e| Error::parse(format!("checkpoint {what}"), e))
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Checkpoint> {
    let mut lines = Lines {
        inner: input.lines(),
        line: 0,
    };
    let magic = lines.next()?;
    if magic.trim() != MAGIC {
        return Err(Error::parse("checkpoint", format!("expected {MAGIC:?}, got {magic:?}")));
    }
    let kind = lines.tagged("kind")?;
    let seed: u64 = lines.number("seed")?;
    let landmarks: usize = lines.number("landmarks")?;
    match kind.trim() {
        "oracle" => Ok(Checkpoint::Oracle { seed, landmarks }),
        "detector" => {
            let config: DetectorConfig = from_json(&lines.tagged("detector")?, "detector")?;
            if config.landmarks != landmarks {
                return Err(Error::parse("checkpoint", "landmark count disagrees with the detector"));
            }
            let step: u64 = lines.number("step")?;
            let epoch: usize = lines.number("epoch")?;
            let sampler = from_json(&lines.tagged("sampler")?, "sampler")?;
            let mut log: Vec<EpochLog> = Vec::new();
            let mut l = lines.next()?;
            while let Some(rest) = l.strip_prefix("log ") {
                log.push(from_json(rest, "log")?);
                l = lines.next()?;
            }
            let n: usize = l
                .strip_prefix("params ")
                .ok_or_else(|| Error::parse("checkpoint", format!("line {}: expected params", lines.line)))?
                .trim()
                .parse()
                .map_err(|e| Error::parse("checkpoint", e))?;
            let mut params = Vec::with_capacity(n);
            for _ in 0..n {
                params.push(parse_real(lines.next()?.trim(), "checkpoint params")?);
            }
            let detector = Detector::from_params(config, params)?;
            let head = lines.tagged("adam")?;
            let mut it = head.split_whitespace();
            let t: u64 = it
                .next()
                .unwrap_or("")
                .parse()
                .map_err(|e| Error::parse("checkpoint adam", e))?;
            let na: usize = it
                .next()
                .unwrap_or("")
                .parse()
                .map_err(|e| Error::parse("checkpoint adam", e))?;
            if na != n {
                return Err(Error::parse(
                    "checkpoint",
                    format!("{na} optimizer entries for {n} parameters"),
                ));
            }
            let mut adam = AdamState::new(n);
            adam.t = t;
            for i in 0..n {
                let l = lines.next()?;
                let mut it = l.split_whitespace();
                adam.m[i] = parse_real(it.next().unwrap_or(""), "checkpoint adam")?;
                adam.v[i] = parse_real(it.next().unwrap_or(""), "checkpoint adam")?;
            }
            Ok(Checkpoint::Trained {
                seed,
                state: Box::new(TrainState {
                    detector,
                    adam,
                    sampler,
                    step,
                    epoch,
                    log,
                }),
            })
        }
        other => Err(Error::parse("checkpoint", format!("unknown kind {other:?}"))),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    read_checkpoint(BufReader::new(File::open(path)?))
}
