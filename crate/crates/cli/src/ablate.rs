use std::fmt::Write as _;
use std::path::Path;

use goalnav::config::RunConfig;
use goalnav::evaluation::{evaluate_model, Aggregate};
use goalnav::trainer::{generate_episodes, load_model, train, Split};
use goalnav::worldsim::Episode;
use goalnav::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Mechanism,
    MidMapping,
    MidDepth,
    EarlyConcat,
    Modeling,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mechanism" => Axis::Mechanism,
            "mid_mapping" => Axis::MidMapping,
            "mid_depth" => Axis::MidDepth,
            "early_concat" => Axis::EarlyConcat,
            "modeling" => Axis::Modeling,
            other => {
                return Err(Error::usage(format!(
                    "unknown axis {other:?}, expected mechanism, mid_mapping, mid_depth, early_concat or modeling"
                )))
            }
        })
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Mechanism => "mechanism",
            Axis::MidMapping => "mid_mapping",
            Axis::MidDepth => "mid_depth",
            Axis::EarlyConcat => "early_concat",
            Axis::Modeling => "modeling",
        })
    }
}

/// Variant label and the config overrides that select it.
pub fn variants(axis: Axis) -> Vec<(&'static str, Vec<String>)> {
    let set = |pairs: &[(&str, &str)]| pairs.iter().map(|(k, v)| format!("fusion.{k}=\"{v}\"")).collect::<Vec<_>>();
    match axis {
        Axis::Mechanism => ["LATE", "EARLY", "MID", "SKIP"]
            .into_iter()
            .map(|m| (m, set(&[("mechanism", m)])))
            .collect(),
        Axis::MidMapping => ["FG_HR", "SEMANTIC"]
            .into_iter()
            .map(|m| (m, set(&[("mechanism", "MID"), ("mid_mapping", m)])))
            .collect(),
        Axis::MidDepth => [("1", 1), ("2", 2), ("4", 4)]
            .into_iter()
            .map(|(label, d)| {
                let mut o = set(&[("mechanism", "MID")]);
                o.push(format!("fusion.mid_depth={d}"));
                (label, o)
            })
            .collect(),
        Axis::EarlyConcat => ["STACK3D", "EDGE", "CHANNEL"]
            .into_iter()
            .map(|c| (c, set(&[("mechanism", "EARLY"), ("early_concat", c)])))
            .collect(),
        Axis::Modeling => vec![
            ("SEPARATE", set(&[("mechanism", "LATE"), ("modeling", "SEPARATE")])),
            ("TIED", set(&[("mechanism", "LATE"), ("modeling", "TIED")])),
            ("JOINT", set(&[("mechanism", "EARLY"), ("modeling", "JOINT")])),
        ],
    }
}

/// Result of one variant across seeds; `error` holds the first failure.
#[derive(Clone, Debug)]
pub struct VariantRow {
    pub variant: String,
    pub hash: String,
    pub per_seed: Vec<Option<Aggregate>>,
    pub error: Option<String>,
}

fn run_variant(config: &RunConfig, heldout: &[Episode]) -> Result<Aggregate> {
    let outcome = train(config, None, None)?;
    let ckpt = outcome
        .last_checkpoint()
        .ok_or_else(|| Error::usage("training produced no checkpoint"))?;
    let (cfg, model, store) = load_model(ckpt)?;
    let traces = evaluate_model(
        &model,
        &store,
        heldout,
        &cfg.world.camera(),
        &cfg.eval,
        cfg.reward.success_radius_m,
        cfg.seed,
    )?;
    Aggregate::of(&traces.into_iter().map(|t| t.result).collect::<Vec<_>>())
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn csv_text(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "'").replace('\n', " "))
}

/// Trains and evaluates each variant for `seeds` seeds on one shared
/// held-out set, rewriting the CSV after every variant. Failed runs are
/// recorded and the sweep continues.
pub fn sweep(base: &RunConfig, axis: Axis, seeds: u64, csv: &Path) -> Result<Vec<VariantRow>> {
    let heldout = match &base.episodes.heldout {
        Some(path) => goalnav::worldsim::materialize(
            &goalnav::worldsim::read_episode_records(path)?,
            &base.world.camera(),
        )?,
        None => generate_episodes(base, Split::Heldout, base.eval.episodes)?,
    };
    let mut rows = Vec::new();
    for (label, overrides) in variants(axis) {
        let mut row = VariantRow {
            variant: label.to_string(),
            hash: String::new(),
            per_seed: Vec::new(),
            error: None,
        };
        for s in 0..seeds {
            let attempt = base.with_overrides(&overrides).and_then(|mut c| {
                c.seed = base.seed + s;
                c.output_dir = base.output_dir.join(format!("ablate_{axis}")).join(label).join(format!("seed{s}"));
                c.validate()?;
                if s == 0 {
                    row.hash = c.short_hash();
                }
                log::info!("{axis}={label} seed {} ({})", c.seed, c.short_hash());
                run_variant(&c, &heldout)
            });
            match attempt {
                Ok(agg) => row.per_seed.push(Some(agg)),
                Err(e) => {
                    log::error!("{axis}={label} seed {s} failed: {e}");
                    row.error.get_or_insert_with(|| format!("seed {s}: {e}"));
                    row.per_seed.push(None);
                }
            }
        }
        rows.push(row);
        write_csv(base, axis, seeds, &rows, csv)?;
    }
    Ok(rows)
}

fn write_csv(base: &RunConfig, axis: Axis, seeds: u64, rows: &[VariantRow], path: &Path) -> Result<()> {
    let mut text = format!("# config_hash={}\n", base.hash());
    text.push_str("axis,variant,config_hash");
    for s in 0..seeds {
        write!(text, ",sr_seed{s},spl_seed{s}").unwrap();
    }
    text.push_str(",mean_sr,mean_spl,error\n");
    for r in rows {
        write!(text, "{axis},{},{}", r.variant, r.hash).unwrap();
        for a in &r.per_seed {
            write!(
                text,
                ",{},{}",
                fmt_opt(a.as_ref().map(|a| a.success_rate)),
                fmt_opt(a.as_ref().map(|a| a.spl))
            )
            .unwrap();
        }
        let ok = || r.per_seed.iter().flatten();
        writeln!(
            text,
            ",{},{},{}",
            fmt_opt(mean(ok().map(|a| a.success_rate))),
            fmt_opt(mean(ok().map(|a| a.spl))),
            r.error.as_deref().map(csv_text).unwrap_or_default()
        )
        .unwrap();
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_have_the_expected_variants() {
        let labels = |a| variants(a).into_iter().map(|v| v.0).collect::<Vec<_>>();
        assert_eq!(labels(Axis::MidMapping), ["FG_HR", "SEMANTIC"]);
        assert_eq!(labels(Axis::MidDepth), ["1", "2", "4"]);
        assert_eq!(labels(Axis::EarlyConcat), ["STACK3D", "EDGE", "CHANNEL"]);
        assert_eq!(labels(Axis::Mechanism).len(), 4);
    }

    #[test]
    fn every_variant_is_a_valid_config() {
        for axis in [Axis::Mechanism, Axis::MidMapping, Axis::MidDepth, Axis::EarlyConcat, Axis::Modeling] {
            for (label, o) in variants(axis) {
                let c = RunConfig::default().with_overrides(&o).unwrap();
                c.validate().unwrap_or_else(|e| panic!("{axis}={label}: {e}"));
            }
        }
    }

    #[test]
    fn axis_names_round_trip() {
        for a in ["mechanism", "mid_mapping", "mid_depth", "early_concat", "modeling"] {
            assert_eq!(a.parse::<Axis>().unwrap().to_string(), a);
        }
        assert!("depth".parse::<Axis>().is_err());
    }
}
