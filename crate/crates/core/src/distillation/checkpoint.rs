//! Checkpoint bundle: a directory holding the particle (`field.wtfx`), the
//! adapter (`adapter.wmdl`), both optimizers' moments (`optimizer.bin`), the
//! random stream positions (`rng.txt`), the iteration and frozen-model
//! checksums (`state.txt`), the config echo (`config.txt`) and `metrics.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Distiller, Particle};
use crate::error::{Error, Result};
use crate::params::{Adam, ByteReader};
use crate::rng::{Stream, StreamState};

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub t: f64,
    pub lambda_sr: f64,
    pub vsd_grad_norm: f64,
    pub sr_grad_norm: f64,
    pub adapter_loss: f64,
    /// Per-instance colour error of the post-update render; `None` when the
    /// instance was not visible.
    pub color_errors: Vec<Option<f64>>,
}

const METRICS_HEADER: &str = "iteration,t,lambda_sr,vsd_grad_norm,sr_grad_norm,adapter_loss";

/// CSV text; unobserved instances are written as `-`.
pub fn write_metrics(rows: &[MetricsRow]) -> String {
    let n = rows.iter().map(|r| r.color_errors.len()).max().unwrap_or(0);
    let mut out = METRICS_HEADER.to_string();
    for i in 0..n {
        let _ = write!(out, ",color_error_{i}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.t, r.lambda_sr, r.vsd_grad_norm, r.sr_grad_norm, r.adapter_loss
        );
        for i in 0..n {
            match r.color_errors.get(i).copied().flatten() {
                Some(e) => {
                    let _ = write!(out, ",{e}");
                }
                None => out.push_str(",-"),
            }
        }
        out.push('\n');
    }
    out
}

fn perr(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn read_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| perr(1, "empty metrics file"))?;
    if !header.starts_with(METRICS_HEADER) {
        return Err(perr(1, format!("unexpected metrics header `{header}`")));
    }
    let n = header.split(',').count() - 6;
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 + n {
                return Err(perr(i + 2, format!("expected {} fields, found {}", 6 + n, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| perr(i + 2, format!("bad number `{s}`")));
            Ok(MetricsRow {
                iteration: f[0].parse().map_err(|_| perr(i + 2, format!("bad iteration `{}`", f[0])))?,
                t: num(f[1])?,
                lambda_sr: num(f[2])?,
                vsd_grad_norm: num(f[3])?,
                sr_grad_norm: num(f[4])?,
                adapter_loss: num(f[5])?,
                color_errors: f[6..]
                    .iter()
                    .map(|s| if *s == "-" { Ok(None) } else { num(s).map(Some) })
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| Error::io(p, e))
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let p = dir.join(name);
    fs::read(&p).map_err(|e| Error::io(p, e))
}

fn read_text(dir: &Path, name: &str) -> Result<String> {
    String::from_utf8(read(dir, name)?).map_err(|_| Error::Checkpoint(format!("{name} is not UTF-8")))
}

fn key_values(text: &str) -> Vec<(&str, &str)> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect()
}

/// Config lines that may differ between a checkpoint and the resuming run.
const RESUMABLE_KEYS: [&str; 2] = ["iterations", "checkpoint_every"];

fn stream_line(name: &str, s: StreamState) -> String {
    format!("{name} {} {} {}\n", s.seed, s.stream, s.word_pos)
}

fn parse_stream(line: &str, name: &str) -> Result<Stream> {
    let f: Vec<&str> = line.split_whitespace().collect();
    let bad = || Error::Checkpoint(format!("bad rng line `{line}`"));
    if f.len() != 4 || f[0] != name {
        return Err(bad());
    }
    Ok(Stream::restore(StreamState {
        seed: f[1].parse().map_err(|_| bad())?,
        stream: f[2].parse().map_err(|_| bad())?,
        word_pos: f[3].parse().map_err(|_| bad())?,
    }))
}

impl<P: Particle> Distiller<P> {
    fn optimizer_bytes(&self) -> Vec<u8> {
        let a = self.texture_adam.to_bytes();
        let mut out = (a.len() as u64).to_le_bytes().to_vec();
        out.extend(a);
        out.extend(self.adapter.optimizer().to_bytes());
        out
    }

    /// Write the bundle to a sibling temp directory, then swap it in.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let tmp = PathBuf::from(format!("{}.tmp", dir.display()));
        let old = PathBuf::from(format!("{}.old", dir.display()));
        for p in [&tmp, &old] {
            if p.exists() {
                fs::remove_dir_all(p).map_err(|e| Error::io(p.clone(), e))?;
            }
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(tmp.clone(), e))?;
        write(&tmp, "field.wtfx", self.particle.to_bytes())?;
        write(&tmp, "adapter.wmdl", self.adapter.to_bytes())?;
        write(&tmp, "optimizer.bin", self.optimizer_bytes())?;
        let seed = self.config.seed;
        let rng = stream_line("view", self.view_rng.state(seed))
            + &stream_line("time", self.time_rng.state(seed))
            + &stream_line("noise", self.noise_rng.state(seed));
        write(&tmp, "rng.txt", rng)?;
        let sr = self.sr_checksum.map_or("none".to_string(), |c| c.to_string());
        write(
            &tmp,
            "state.txt",
            format!(
                "iteration = {}\nteacher_checksum = {}\nsr_checksum = {sr}\n",
                self.iteration, self.teacher_checksum
            ),
        )?;
        write(&tmp, "config.txt", self.config.to_text())?;
        write(&tmp, "metrics.csv", write_metrics(&self.metrics))?;
        if dir.exists() {
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(old, e))?;
        }
        Ok(())
    }

    /// Load a bundle written by [`Distiller::save_checkpoint`] into a
    /// distiller built from the same inputs.
    pub fn restore(&mut self, dir: &Path) -> Result<()> {
        let saved = read_text(dir, "config.txt")?;
        let ours = self.config.to_text();
        let strip = |t: &str| -> Vec<(String, String)> {
            key_values(t)
                .into_iter()
                .filter(|(k, _)| !RESUMABLE_KEYS.contains(k))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        };
        if strip(&saved) != strip(&ours) {
            return Err(Error::Checkpoint("checkpoint was written with a different config".into()));
        }
        let state = read_text(dir, "state.txt")?;
        let kv = key_values(&state);
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| *key == k)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Checkpoint(format!("state.txt lacks `{k}`")))
        };
        let iteration: u64 = get("iteration")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad iteration".into()))?;
        if get("teacher_checksum")? != self.teacher_checksum.to_string() {
            return Err(Error::Checkpoint("teacher differs from the one used for the checkpoint".into()));
        }
        let sr = self.sr_checksum.map_or("none".to_string(), |c| c.to_string());
        if get("sr_checksum")? != sr {
            return Err(Error::Checkpoint("SR model differs from the one used for the checkpoint".into()));
        }
        if iteration > self.config.iterations {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at iteration {iteration}, past the configured {}",
                self.config.iterations
            )));
        }

        let rng = read_text(dir, "rng.txt")?;
        let lines: Vec<&str> = rng.lines().collect();
        if lines.len() != 3 {
            return Err(Error::Checkpoint("rng.txt needs three streams".into()));
        }
        let view = parse_stream(lines[0], "view")?;
        let time = parse_stream(lines[1], "time")?;
        let noise = parse_stream(lines[2], "noise")?;

        let opt = read(dir, "optimizer.bin")?;
        let mut r = ByteReader::new(&opt);
        let n = r.u64()? as usize;
        let texture_adam = Adam::from_bytes(r.take(n)?)?;
        let adapter_adam = Adam::from_bytes(&opt[8 + n..])?;
        if texture_adam.m.len() != self.particle.params().len()
            || adapter_adam.m.len() != self.adapter.params().len()
        {
            return Err(Error::Checkpoint("optimizer state has the wrong size".into()));
        }

        let metrics = read_metrics(&read_text(dir, "metrics.csv")?)?;
        if metrics.len() as u64 != iteration {
            return Err(Error::Checkpoint(format!(
                "metrics.csv has {} rows for iteration {iteration}",
                metrics.len()
            )));
        }

        self.particle.load_bytes(&read(dir, "field.wtfx")?)?;
        self.adapter.load_bytes(&read(dir, "adapter.wmdl")?)?;
        *self.adapter.optimizer_mut() = adapter_adam;
        self.texture_adam = texture_adam;
        self.view_rng = view;
        self.time_rng = time;
        self.noise_rng = noise;
        self.iteration = iteration;
        self.metrics = metrics;
        Ok(())
    }
}
