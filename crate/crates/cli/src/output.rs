//! Serialisation of command outputs and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use mutagame_core::bellman::{DiscreteStateSpace, ValueSolution};
use mutagame_core::harness::{EpochRecord, SliceThreshold, SweepCell};
use mutagame_core::model::ProtocolState;

/// Fixed-width scientific notation with 17 significant digits, which
/// round-trips every `f64`.
pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn epochs_csv(records: &[EpochRecord]) -> Vec<u8> {
    let n = records.first().map_or(0, |r| r.agents.len());
    let mut header: Vec<String> = ["epoch", "shock_occurred", "shock_magnitude"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(ProtocolState::FIELD_NAMES.iter().map(|s| s.to_string()));
    header.push("epoch_of_last_shock".into());
    header.push("deviant_fraction".into());
    for i in 0..n {
        for col in ["action", "payoff", "discount", "confidence"] {
            header.push(format!("a{i}_{col}"));
        }
    }
    let rows = records.iter().map(|r| {
        let mut row = vec![
            r.epoch.to_string(),
            r.shock_occurred.to_string(),
            float(r.shock_magnitude),
        ];
        row.extend(r.protocol.fields().iter().map(|&v| float(v)));
        row.push(r.protocol.epoch_of_last_shock.to_string());
        row.push(float(r.deviant_fraction));
        for a in &r.agents {
            row.push(a.action.to_string());
            row.push(float(a.payoff));
            row.push(float(a.discount));
            row.push(float(a.confidence));
        }
        row
    });
    csv_bytes(&header, rows)
}

pub const SWEEP_COLUMNS: [&str; 9] = [
    "eps",
    "kappa",
    "gamma",
    "incidence",
    "cooperation_index",
    "mean_churn",
    "first_deviation_gamma_hi",
    "first_deviation_gamma_lo",
    "replicates",
];

pub fn sweep_csv(cells: &[SweepCell]) -> Vec<u8> {
    let header: Vec<String> = SWEEP_COLUMNS.iter().map(|s| s.to_string()).collect();
    let rows = cells.iter().map(|c| {
        vec![
            float(c.eps),
            float(c.kappa),
            float(c.gamma),
            float(c.incidence),
            float(c.cooperation_index),
            float(c.mean_churn),
            float(c.first_deviation_gamma_hi),
            float(c.first_deviation_gamma_lo),
            c.replicates.to_string(),
        ]
    });
    csv_bytes(&header, rows)
}

/// One row per grid state and phase. The first `space.len()` entries of
/// the solution are the cooperative phase.
pub fn values_csv(space: &DiscreteStateSpace, solution: &ValueSolution) -> Vec<u8> {
    let mut header: Vec<String> = ProtocolState::FIELD_NAMES
        .iter()
        .map(|s| s.to_string())
        .collect();
    for col in ["phase", "value", "policy", "delta"] {
        header.push(col.into());
    }
    let n = space.len();
    let rows = (0..solution.values.len()).map(|k| {
        let s = k % n;
        let phase = if k < n { "cooperative" } else { "punished" };
        let mut row: Vec<String> = space.states[s].fields().iter().map(|&v| float(v)).collect();
        row.push(phase.into());
        row.push(float(solution.values[k]));
        row.push(solution.policy[k].to_string());
        row.push(float(space.delta_per_state[s]));
        row
    });
    csv_bytes(&header, rows)
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serialisable");
    v.push(b'\n');
    v
}

pub fn thresholds_json(slices: &[SliceThreshold]) -> Vec<u8> {
    json_bytes(&slices)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct OutputDigest {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub master_seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputDigest>,
}

/// Files produced by one command, held in memory until every step has
/// succeeded.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    /// Writes every file, then `manifest.json` with their digests.
    pub fn commit(
        self,
        dir: &Path,
        command: &str,
        master_seed: u64,
        started_at: String,
        config: serde_json::Value,
    ) -> std::io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut outputs = Vec::new();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            fs::write(&path, bytes)?;
            outputs.push(OutputDigest {
                file: name.clone(),
                sha256: sha256_hex(bytes),
            });
            written.push(path);
        }
        let manifest = RunManifest {
            tool: "mutagame",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            master_seed,
            started_at,
            finished_at: now(),
            config,
            outputs,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, json_bytes(&manifest))?;
        written.push(path);
        Ok(written)
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, 6.25, 1e-300, -2.5e17, 0.0] {
            let s = float(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
        assert_eq!(float(0.125), "1.2500000000000000e-1");
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
