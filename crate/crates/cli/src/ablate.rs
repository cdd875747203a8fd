//! One-axis sweeps over the run config.

use std::fmt::Write as _;

use dualpl_core::bank::{Sampling, Selecting};
use dualpl_core::regen::RegenMode;
use dualpl_core::selftrain::{component_variant, Metrics, RunConfig, COMPONENT_IDS};

use crate::manifest::{json_diff, Variant};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    K,
    U,
    Phi,
    Omega,
    Sampling,
    Selecting,
    Interaction,
    Components,
}

impl Axis {
    pub const ALL: [Axis; 8] = [
        Axis::K,
        Axis::U,
        Axis::Phi,
        Axis::Omega,
        Axis::Sampling,
        Axis::Selecting,
        Axis::Interaction,
        Axis::Components,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::K => "K",
            Axis::U => "u",
            Axis::Phi => "phi",
            Axis::Omega => "omega",
            Axis::Sampling => "sampling",
            Axis::Selecting => "selecting",
            Axis::Interaction => "interaction",
            Axis::Components => "components",
        }
    }

    pub fn parse(s: &str) -> CliResult<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
            CliError::Config(format!("unknown ablation axis {s:?}; expected one of {}", names.join(", ")))
        })
    }

    /// Config fields (dotted JSON paths) a variant of this axis may change.
    pub fn swept_fields(self) -> &'static [&'static str] {
        match self {
            Axis::K => &["bank_size"],
            Axis::U => &["policy.interval"],
            Axis::Phi => &["strategy.phi"],
            Axis::Omega => &["policy.momentum"],
            Axis::Sampling => &["policy.sampling"],
            Axis::Selecting => &["policy.selecting"],
            Axis::Interaction => &["strategy.z_mode", "strategy.q_mode"],
            Axis::Components => &[
                "lambda_ins",
                "regen",
                "strategy.phi",
                "policy.sampling",
                "policy.selecting",
            ],
        }
    }
}

const K_VALUES: [usize; 5] = [10, 25, 50, 100, 200];
const U_VALUES: [usize; 5] = [25, 50, 100, 200, 500];
const PHI_VALUES: [f64; 5] = [0.0, 0.8, 0.9, 0.95, 1.0];
const OMEGA_VALUES: [f64; 5] = [0.0, 0.9, 0.99, 0.999, 1.0];

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> CliResult<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("bad {what} value {s:?}")))
        })
        .collect()
}

pub fn parse_seeds(text: &str) -> CliResult<Vec<u64>> {
    let seeds: Vec<u64> = parse_list(text, "seed")?;
    if seeds.is_empty() {
        return Err(CliError::Config("no seeds given".into()));
    }
    Ok(seeds)
}

fn mode_name(m: RegenMode) -> &'static str {
    match m {
        RegenMode::Smoothing => "smoothing",
        RegenMode::Scaling => "scaling",
    }
}

/// The variants of `axis` around `base`. `values` replaces the default list
/// of the numeric axes.
pub fn variants(base: &RunConfig, axis: Axis, values: Option<&str>) -> CliResult<Vec<Variant>> {
    let numeric = matches!(axis, Axis::K | Axis::U | Axis::Phi | Axis::Omega);
    if values.is_some() && !numeric {
        return Err(CliError::Config(format!("--values does not apply to axis {}", axis.name())));
    }
    let with = |name: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        Variant { name, config: c }
    };
    let out = match axis {
        Axis::K | Axis::U => {
            let vals = match values {
                Some(v) => parse_list::<usize>(v, axis.name())?,
                None if axis == Axis::K => K_VALUES.to_vec(),
                None => U_VALUES.to_vec(),
            };
            vals.into_iter()
                .map(|v| {
                    with(v.to_string(), &|c| match axis {
                        Axis::K => c.bank_size = v,
                        _ => c.policy.interval = v,
                    })
                })
                .collect()
        }
        Axis::Phi | Axis::Omega => {
            let vals = match values {
                Some(v) => parse_list::<f64>(v, axis.name())?,
                None if axis == Axis::Phi => PHI_VALUES.to_vec(),
                None => OMEGA_VALUES.to_vec(),
            };
            vals.into_iter()
                .map(|v| {
                    with(v.to_string(), &|c| match axis {
                        Axis::Phi => c.strategy.phi = v,
                        _ => c.policy.momentum = v,
                    })
                })
                .collect()
        }
        Axis::Sampling => Sampling::ALL
            .into_iter()
            .map(|s| with(s.code().into(), &|c| c.policy.sampling = s))
            .collect(),
        Axis::Selecting => Selecting::ALL
            .into_iter()
            .map(|s| with(s.code().into(), &|c| c.policy.selecting = s))
            .collect(),
        Axis::Interaction => {
            let modes = [RegenMode::Smoothing, RegenMode::Scaling];
            let mut v = Vec::new();
            for z in modes {
                for q in modes {
                    let name = format!("z_{}-q_{}", mode_name(z), mode_name(q));
                    v.push(with(name, &|c| {
                        c.strategy.z_mode = z;
                        c.strategy.q_mode = q;
                    }));
                }
            }
            v
        }
        Axis::Components => COMPONENT_IDS
            .iter()
            .map(|id| Variant {
                name: id.to_string(),
                config: component_variant(base, id).expect("known component id"),
            })
            .collect(),
    };
    for v in &out {
        v.config
            .validate()
            .map_err(|e| CliError::Config(format!("variant {}: {e}", v.name)))?;
    }
    check_variants(base, axis, &out)?;
    Ok(out)
}

/// Fails unless every variant differs from `base` only in the fields the
/// axis sweeps.
pub fn check_variants(base: &RunConfig, axis: Axis, variants: &[Variant]) -> CliResult<()> {
    let b = serde_json::to_value(base).expect("serializable");
    for v in variants {
        let d = json_diff(&b, &serde_json::to_value(&v.config).expect("serializable"));
        if let Some(extra) = d.iter().find(|p| !axis.swept_fields().contains(&p.as_str())) {
            return Err(CliError::Config(format!(
                "variant {} changes {extra}, outside axis {}",
                v.name,
                axis.name()
            )));
        }
    }
    Ok(())
}

/// Outcome of one variant at one seed.
#[derive(Debug, Clone)]
pub struct RunRow {
    pub variant: String,
    pub seed: u64,
    pub metrics: Metrics,
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => String::new(),
    }
}

fn trace(m: &Metrics, pick: fn(&dualpl_core::selftrain::MetricsRow) -> Option<f64>) -> String {
    m.rows.iter().map(|r| cell(pick(r))).collect::<Vec<_>>().join(";")
}

pub const COMPARISON_HEADER: &str =
    "axis,variant,seed,final_miou,L_src,L_tgt,L_ins,L_overall,trace_iter,trace_miou,trace_L_overall";

/// One row per variant per seed. Losses are those of the last metrics
/// window; traces list every metrics row, `;`-separated.
pub fn comparison_csv(axis: Axis, rows: &[RunRow]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in rows {
        let last = r.metrics.rows.last();
        let iters: Vec<String> = r.metrics.rows.iter().map(|x| x.iter.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            axis.name(),
            r.variant,
            r.seed,
            cell(last.map(|x| x.miou_target)),
            cell(last.and_then(|x| x.l_src)),
            cell(last.and_then(|x| x.l_tgt)),
            cell(last.and_then(|x| x.l_ins)),
            cell(last.and_then(|x| x.l_overall)),
            iters.join(";"),
            trace(&r.metrics, |x| Some(x.miou_target)),
            trace(&r.metrics, |x| x.l_overall),
        )
        .unwrap();
    }
    out
}

/// Mean and sample standard deviation of the final mIoU per variant, in
/// first-seen order.
pub fn summary_csv(rows: &[RunRow]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    let mut out = String::from("variant,seeds,mean_miou,std_miou\n");
    for name in names {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == name)
            .filter_map(|r| r.metrics.final_miou())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        writeln!(out, "{name},{},{},{}", vals.len(), cell(Some(mean)), cell(Some(std))).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in Axis::ALL {
            assert_eq!(Axis::parse(a.name()).unwrap(), a);
        }
        assert!(matches!(Axis::parse("lr"), Err(CliError::Config(_))));
    }

    #[test]
    fn listed_axes_have_expected_values() {
        let base = RunConfig::desk();
        let phi: Vec<f64> = variants(&base, Axis::Phi, None)
            .unwrap()
            .iter()
            .map(|v| v.config.strategy.phi)
            .collect();
        assert_eq!(phi, vec![0.0, 0.8, 0.9, 0.95, 1.0]);
        let omega: Vec<f64> = variants(&base, Axis::Omega, None)
            .unwrap()
            .iter()
            .map(|v| v.config.policy.momentum)
            .collect();
        assert_eq!(omega, vec![0.0, 0.9, 0.99, 0.999, 1.0]);
        let names: Vec<String> = variants(&base, Axis::Components, None)
            .unwrap()
            .into_iter()
            .map(|v| v.name)
            .collect();
        assert_eq!(names, ["baseline", "I", "II", "III", "IV", "V"]);
        assert_eq!(variants(&base, Axis::Interaction, None).unwrap().len(), 4);
        assert_eq!(variants(&base, Axis::Sampling, None).unwrap().len(), 4);
    }

    #[test]
    fn variants_touch_only_swept_fields() {
        let base = RunConfig::desk();
        let b = serde_json::to_value(&base).unwrap();
        for axis in Axis::ALL {
            for v in variants(&base, axis, None).unwrap() {
                let d = json_diff(&b, &serde_json::to_value(&v.config).unwrap());
                assert!(d.iter().all(|p| axis.swept_fields().contains(&p.as_str())), "{axis:?} {d:?}");
            }
        }
    }

    #[test]
    fn check_rejects_stray_changes() {
        let base = RunConfig::desk();
        let mut c = base.clone();
        c.strategy.phi = 0.5;
        c.learning_rate = 0.01;
        let v = [Variant { name: "x".into(), config: c }];
        assert!(check_variants(&base, Axis::Phi, &v).is_err());
    }

    #[test]
    fn values_override_numeric_axes_only() {
        let base = RunConfig::desk();
        let v = variants(&base, Axis::K, Some("5,20")).unwrap();
        assert_eq!(v.iter().map(|v| v.config.bank_size).collect::<Vec<_>>(), vec![5, 20]);
        assert!(variants(&base, Axis::Sampling, Some("1")).is_err());
        assert!(variants(&base, Axis::U, Some("x")).is_err());
    }
}
