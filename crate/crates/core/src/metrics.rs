//! Per-episode training records written as JSON lines.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub meta_iter: usize,
    pub task: usize,
    pub episode: usize,
    pub total_reward: f64,
    pub distance: i64,
    pub moves: u64,
}

impl EpisodeRecord {
    pub fn from_episode(meta_iter: usize, task: usize, episode: usize, ep: &Episode) -> Self {
        Self {
            meta_iter,
            task,
            episode,
            total_reward: ep.total_reward,
            distance: ep.final_distance(),
            moves: ep.moves(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<EpisodeRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: EpisodeRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let records = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}
