use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::composite::Topology;
use crate::error::{Error, Result};
use crate::files::write_atomic;

pub const CSV_HEADER: &str = "seed,topology,per_class,examples_seen,batch_index,test_accuracy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub seed: u64,
    pub topology: Topology,
    pub per_class: usize,
    pub examples_seen: u64,
    pub batch_index: usize,
    pub test_accuracy: f64,
}

impl CurveRow {
    fn key(&self) -> (u64, Topology, usize, u64) {
        (self.seed, self.topology, self.per_class, self.examples_seen)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearningCurve {
    pub rows: Vec<CurveRow>,
}

impl LearningCurve {
    /// Sorts rows by `(seed, topology, per_class, examples_seen)`.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.key().cmp(&b.key()));
    }

    /// Accuracies in range, keys strictly increasing, and every
    /// `(seed, per_class)` cell has the same batch indices for each topology.
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.rows.iter().find(|r| !(0.0..=1.0).contains(&r.test_accuracy)) {
            return Err(Error::Contract(format!("accuracy {} out of range", r.test_accuracy)));
        }
        if self.rows.windows(2).any(|w| w[0].key() >= w[1].key()) {
            return Err(Error::Contract("curve rows are not strictly ordered".into()));
        }
        let mut cells: BTreeMap<(u64, usize), BTreeMap<Topology, BTreeSet<usize>>> = BTreeMap::new();
        for r in &self.rows {
            cells
                .entry((r.seed, r.per_class))
                .or_default()
                .entry(r.topology)
                .or_default()
                .insert(r.batch_index);
        }
        let topologies: BTreeSet<Topology> = self.rows.iter().map(|r| r.topology).collect();
        for ((seed, pc), by_topo) in &cells {
            let first = by_topo.values().next().unwrap();
            if by_topo.len() != topologies.len() || by_topo.values().any(|b| b != first) {
                return Err(Error::Contract(format!(
                    "seed {seed}, per_class {pc}: topologies cover different batches"
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| Error::Corrupt(format!("csv: {e}")))?;
        if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
            return Err(Error::Corrupt(format!("unexpected csv header {header:?}")));
        }
        let rows = rd
            .deserialize()
            .collect::<std::result::Result<Vec<CurveRow>, _>>()
            .map_err(|e| Error::Corrupt(format!("csv: {e}")))?;
        Ok(LearningCurve { rows })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Accuracy of the last row of every `(seed, topology, per_class)` run.
    pub fn finals(&self) -> BTreeMap<(Topology, usize), BTreeMap<u64, f64>> {
        let mut out: BTreeMap<(Topology, usize), BTreeMap<u64, (u64, f64)>> = BTreeMap::new();
        for r in &self.rows {
            let e = out.entry((r.topology, r.per_class)).or_default();
            let slot = e.entry(r.seed).or_insert((r.examples_seen, r.test_accuracy));
            if r.examples_seen >= slot.0 {
                *slot = (r.examples_seen, r.test_accuracy);
            }
        }
        out.into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|(s, (_, a))| (s, a)).collect()))
            .collect()
    }

    /// Mean final accuracy over seeds, per `(topology, per_class)`.
    pub fn mean_finals(&self) -> BTreeMap<(Topology, usize), f64> {
        self.finals()
            .into_iter()
            .map(|(k, v)| (k, v.values().sum::<f64>() / v.len() as f64))
            .collect()
    }

    /// Mean accuracy over seeds at each `(examples_seen)` for one
    /// topology and per-class size.
    pub fn mean_series(&self, topology: Topology, per_class: usize) -> Vec<(u64, f64)> {
        let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.topology == topology && r.per_class == per_class) {
            let e = acc.entry(r.examples_seen).or_default();
            e.0 += r.test_accuracy;
            e.1 += 1;
        }
        acc.into_iter().map(|(x, (s, n))| (x, s / n as f64)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, topology: Topology, pc: usize, b: usize, acc: f64) -> CurveRow {
        CurveRow {
            seed,
            topology,
            per_class: pc,
            examples_seen: (b as u64 + 1) * 10,
            batch_index: b,
            test_accuracy: acc,
        }
    }

    fn curve() -> LearningCurve {
        let mut c = LearningCurve::default();
        for seed in [1, 0] {
            for t in [Topology::TwoTowers, Topology::Finetune] {
                for b in 0..2 {
                    c.rows.push(row(seed, t, 2, b, 0.25 * (b + 1) as f64 + seed as f64 * 0.1));
                }
            }
        }
        c.sort();
        c
    }

    #[test]
    fn csv_round_trip_and_header() {
        let c = curve();
        let text = c.to_csv();
        assert!(text.starts_with(&format!("{CSV_HEADER}\n")));
        assert!(text.contains("\n0,two_towers,2,10,0,0.25\n"));
        assert_eq!(LearningCurve::from_csv(&text).unwrap(), c);
        assert!(LearningCurve::from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn validation_catches_gaps_and_disorder() {
        let c = curve();
        c.validate().unwrap();
        let mut gap = c.clone();
        gap.rows.remove(1);
        assert!(gap.validate().is_err());
        let mut shuffled = c.clone();
        shuffled.rows.swap(0, 1);
        assert!(shuffled.validate().is_err());
        let mut bad = c;
        bad.rows[0].test_accuracy = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn finals_take_last_batch() {
        let m = curve().mean_finals();
        assert!((m[&(Topology::Finetune, 2)] - 0.55).abs() < 1e-12);
        assert_eq!(curve().mean_series(Topology::Finetune, 2).len(), 2);
    }
}
