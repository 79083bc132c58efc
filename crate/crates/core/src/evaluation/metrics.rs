use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldsim::Band;

/// Outcome of one evaluated episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub id: u64,
    pub band: Band,
    pub success: bool,
    /// Whether the agent issued STOP before the step cap.
    pub stopped: bool,
    pub steps: usize,
    /// Meters actually traveled.
    pub path_length: f64,
    /// Geodesic start-to-goal distance of the episode.
    pub shortest_length: f64,
    /// Euclidean distance to the goal at the end.
    pub final_distance: f64,
    pub collisions: usize,
}

fn non_empty(results: &[EpisodeResult], what: &str) -> Result<()> {
    if results.is_empty() {
        return Err(Error::usage(format!("{what} of an empty result set is undefined")));
    }
    Ok(())
}

pub fn success_rate(results: &[EpisodeResult]) -> Result<f64> {
    non_empty(results, "success rate")?;
    Ok(results.iter().filter(|r| r.success).count() as f64 / results.len() as f64)
}

/// Success weighted by path length: mean of `S·l / max(p, l)`.
pub fn spl(results: &[EpisodeResult]) -> Result<f64> {
    non_empty(results, "SPL")?;
    let mut total = 0.0;
    for r in results {
        if !(r.shortest_length > 0.0) {
            return Err(Error::usage(format!(
                "episode {} has non-positive shortest length {}",
                r.id, r.shortest_length
            )));
        }
        if r.success {
            total += r.shortest_length / r.path_length.max(r.shortest_length);
        }
    }
    Ok(total / results.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub success_rate: f64,
    pub spl: f64,
}

impl Aggregate {
    pub fn of(results: &[EpisodeResult]) -> Result<Self> {
        Ok(Self {
            episodes: results.len(),
            success_rate: success_rate(results)?,
            spl: spl(results)?,
        })
    }
}

/// Evaluation report written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub checkpoint: Option<String>,
    pub overall: Aggregate,
    /// Keyed by band label, e.g. `"1.5-3.0"`.
    pub bands: BTreeMap<String, Aggregate>,
    pub episodes: Vec<EpisodeResult>,
}

impl EvalReport {
    pub fn new(config_hash: &str, checkpoint: Option<&Path>, mut results: Vec<EpisodeResult>) -> Result<Self> {
        results.sort_by_key(|r| r.id);
        let mut by_band: BTreeMap<String, Vec<EpisodeResult>> = BTreeMap::new();
        for r in &results {
            by_band.entry(r.band.label()).or_default().push(r.clone());
        }
        let bands = by_band
            .iter()
            .map(|(k, v)| Ok((k.clone(), Aggregate::of(v)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config_hash: config_hash.to_string(),
            checkpoint: checkpoint.map(|p| p.display().to_string()),
            overall: Aggregate::of(&results)?,
            bands,
            episodes: results,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(id: u64, success: bool, p: f64, l: f64) -> EpisodeResult {
        EpisodeResult {
            id,
            band: Band::new(1.5, 3.0),
            success,
            stopped: success,
            steps: 10,
            path_length: p,
            shortest_length: l,
            final_distance: if success { 0.5 } else { 3.0 },
            collisions: 0,
        }
    }

    #[test]
    fn spl_hand_computation() {
        assert_eq!(spl(&[result(0, false, 1.0, 2.0), result(1, false, 0.0, 2.0)]).unwrap(), 0.0);
        assert_eq!(spl(&[result(0, true, 2.0, 2.0)]).unwrap(), 1.0);
        assert_eq!(spl(&[result(0, true, 4.0, 2.0), result(1, false, 1.0, 2.0)]).unwrap(), 0.25);
        // Shorter than the geodesic is clipped to 1.
        assert_eq!(spl(&[result(0, true, 1.0, 2.0)]).unwrap(), 1.0);
    }

    #[test]
    fn success_rate_counts() {
        let rs: Vec<_> = (0..10).map(|i| result(i, i < 3, 1.0, 2.0)).collect();
        assert!((success_rate(&rs).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(success_rate(&rs[..3]).unwrap(), 1.0);
        assert_eq!(success_rate(&rs[3..]).unwrap(), 0.0);
    }

    #[test]
    fn empty_sets_are_errors() {
        assert!(spl(&[]).is_err());
        assert!(success_rate(&[]).is_err());
        assert!(spl(&[result(0, true, 1.0, 0.0)]).is_err());
    }

    #[test]
    fn report_groups_by_band() {
        let mut rs: Vec<_> = (0..4).map(|i| result(i, i % 2 == 0, 2.0, 2.0)).collect();
        rs[3].band = Band::new(5.0, 8.0);
        let rep = EvalReport::new("h", None, rs).unwrap();
        assert_eq!(rep.bands.keys().cloned().collect::<Vec<_>>(), vec![Band::new(1.5, 3.0).label(), Band::new(5.0, 8.0).label()]);
        assert_eq!(rep.bands[&Band::new(1.5, 3.0).label()].episodes, 3);
        assert!(rep.overall.spl <= rep.overall.success_rate);
    }
}
