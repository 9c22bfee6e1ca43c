//! Named sweeps over model variants and seeds, with per-run and summary
//! results tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, group_attributes, random_grouping, split, AttributeSpec, GroupingKind, GroupingScheme,
    SyntheticSpec,
};
use crate::error::{io_err, Error, Result};
use crate::metrics::REPORT_HEADER;
use crate::par::{self, Execution};
use crate::sharing::AblationConfig;
use crate::train::{train, ModelKind, RunRecord, Splits, TrainConfig};

pub const REDUCTIONS: [usize; 5] = [2, 4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    /// Hard sharing, vanilla, cross-stitch, sluice and co-attentive sharing.
    Baselines,
    /// The six reduced co-attentive units plus the full one.
    Ablations,
    /// The four attribute grouping schemes.
    Grouping,
    /// Reduction ratios 2 to 32.
    Reduction,
    /// Every run of consecutive insertion stages.
    Integration,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 5] = [
        SuiteKind::Baselines,
        SuiteKind::Ablations,
        SuiteKind::Grouping,
        SuiteKind::Reduction,
        SuiteKind::Integration,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SuiteKind::Baselines => "baselines",
            SuiteKind::Ablations => "ablations",
            SuiteKind::Grouping => "grouping",
            SuiteKind::Reduction => "reduction",
            SuiteKind::Integration => "integration",
        }
    }
}

impl FromStr for SuiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SuiteKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

/// Insertion masks for every window of consecutive stages, shortest first:
/// four singles, three pairs, two triples and all four.
pub fn integration_masks() -> Vec<Vec<bool>> {
    let mut out = Vec::new();
    for len in 1..=4 {
        for start in 0..=4 - len {
            out.push((0..4).map(|i| i >= start && i < start + len).collect());
        }
    }
    out
}

fn mask_name(mask: &[bool]) -> String {
    let on: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).map(|i| i + 1).collect();
    match on.as_slice() {
        [one] => format!("layer{one}"),
        [first, .., last] => format!("layer{first}-{last}"),
        [] => "none".into(),
    }
}

/// The configurations a suite trains, derived from `base`.
pub fn variants(kind: SuiteKind, base: &TrainConfig) -> Vec<Variant> {
    let cas = TrainConfig {
        sharing_kind: ModelKind::Cas,
        ..base.clone()
    };
    match kind {
        SuiteKind::Baselines => ModelKind::BASELINES
            .iter()
            .map(|&k| Variant {
                name: k.label().into(),
                config: TrainConfig {
                    sharing_kind: k,
                    ablation: AblationConfig::default(),
                    ..base.clone()
                },
            })
            .collect(),
        SuiteKind::Ablations => AblationConfig::table()
            .into_iter()
            .map(|(name, ablation)| Variant {
                name: name.into(),
                config: TrainConfig { ablation, ..cas.clone() },
            })
            .collect(),
        SuiteKind::Grouping => GroupingKind::ALL
            .iter()
            .map(|&g| Variant {
                name: g.label().into(),
                config: TrainConfig { grouping: g, ..cas.clone() },
            })
            .collect(),
        SuiteKind::Reduction => REDUCTIONS
            .iter()
            .map(|&r| Variant {
                name: format!("r={r}"),
                config: TrainConfig { reduction: r, ..cas.clone() },
            })
            .collect(),
        SuiteKind::Integration => integration_masks()
            .into_iter()
            .map(|m| Variant {
                name: mask_name(&m),
                config: TrainConfig {
                    insertion_mask: m,
                    ..cas.clone()
                },
            })
            .collect(),
    }
}

/// Splits for one seed plus the attribute descriptions used for grouping.
pub struct SeedData {
    pub splits: Splits,
    pub attributes: Vec<AttributeSpec>,
}

impl SeedData {
    /// Grouping of this data's attributes. Without attribute descriptions
    /// only random grouping is possible.
    pub fn grouping(&self, kind: GroupingKind, seed: u64) -> Result<GroupingScheme> {
        if self.attributes.is_empty() {
            if kind != GroupingKind::Random {
                return Err(Error::Config(format!(
                    "{} grouping needs attribute descriptions",
                    kind.label()
                )));
            }
            return random_grouping(self.splits.train.num_attributes(), seed);
        }
        group_attributes(&self.attributes, kind, seed)
    }
}

/// `n` synthetic samples split 8:1:1, all drawn from `seed`.
pub fn synthetic_seed_data(spec: &SyntheticSpec, n: usize, seed: u64, exec: Execution) -> Result<SeedData> {
    let ds = generate_synthetic(n, spec, seed, exec)?;
    let (train, val, test) = split(&ds, (0.8, 0.1, 0.1), seed)?;
    Ok(SeedData {
        splits: Splits { train, val, test },
        attributes: spec.attributes.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub variant: String,
    pub seed: u64,
    pub result: std::result::Result<RunRecord, String>,
}

impl RunOutcome {
    pub fn run_id(&self) -> String {
        format!("{}/seed{}", self.variant, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub succeeded: usize,
    pub failed: usize,
    /// mA, accuracy, precision, recall, F1.
    pub mean: [f64; 5],
    /// Sample standard deviation; 0 for a single run.
    pub std: [f64; 5],
}

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub kind: SuiteKind,
    pub variants: Vec<String>,
    pub runs: Vec<RunOutcome>,
}

impl SuiteResult {
    pub fn summary(&self) -> Vec<SummaryRow> {
        self.variants
            .iter()
            .map(|v| {
                let mine: Vec<&RunOutcome> = self.runs.iter().filter(|r| &r.variant == v).collect();
                let ok: Vec<[f64; 5]> = mine
                    .iter()
                    .filter_map(|r| r.result.as_ref().ok().map(|rec| rec.test.values()))
                    .collect();
                let mut mean = [f64::NAN; 5];
                let mut std = [f64::NAN; 5];
                if !ok.is_empty() {
                    let n = ok.len() as f64;
                    for m in 0..5 {
                        mean[m] = ok.iter().map(|v| v[m]).sum::<f64>() / n;
                        std[m] = if ok.len() > 1 {
                            (ok.iter().map(|v| (v[m] - mean[m]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                        } else {
                            0.0
                        };
                    }
                }
                SummaryRow {
                    variant: v.clone(),
                    succeeded: ok.len(),
                    failed: mine.len() - ok.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    /// Successful runs, one results row each.
    pub fn runs_table(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.runs {
            if let Ok(rec) = &r.result {
                writeln!(s, "{}", rec.test.to_row(&r.run_id())).unwrap();
            }
        }
        s
    }

    /// Per-variant means (or standard deviations) in the results-row schema.
    pub fn summary_table(&self, std: bool) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for row in self.summary() {
            let vals = if std { row.std } else { row.mean };
            write!(s, "{}", row.variant).unwrap();
            for v in vals {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Human-readable `mean ± std` table.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<16} {:>5} {:>17} {:>17} {:>17} {:>17} {:>17}\n",
            "variant", "runs", "mA", "accuracy", "precision", "recall", "F1"
        );
        for row in self.summary() {
            write!(s, "{:<16} {:>2}/{:<2}", row.variant, row.succeeded, row.succeeded + row.failed).unwrap();
            for m in 0..5 {
                write!(s, " {:>8.4} ± {:<6.4}", row.mean[m], row.std[m]).unwrap();
            }
            s.push('\n');
        }
        for r in &self.runs {
            if let Err(e) = &r.result {
                writeln!(s, "FAILED {}: {e}", r.run_id()).unwrap();
            }
        }
        s
    }

    /// Writes `runs.csv`, `summary.csv`, `summary_std.csv`, `failures.txt`
    /// and one JSON record per successful run under `records/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let records = dir.join("records");
        fs::create_dir_all(&records).map_err(io_err(&records))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))
        };
        put("runs.csv", self.runs_table())?;
        put("summary.csv", self.summary_table(false))?;
        put("summary_std.csv", self.summary_table(true))?;
        let mut failures = String::new();
        for r in &self.runs {
            match &r.result {
                Ok(rec) => {
                    let p = records.join(format!("{}_seed{}.json", r.variant, r.seed));
                    fs::write(&p, serde_json::to_vec_pretty(rec)?).map_err(io_err(&p))?;
                }
                Err(e) => writeln!(failures, "{}: {e}", r.run_id()).unwrap(),
            }
        }
        put("failures.txt", failures)
    }
}

/// Trains every variant of `kind` on every seed. Data for a seed comes
/// from `data(seed)` and is shared by that seed's runs; each run's config
/// seed is set to the data seed. Failed runs are recorded and the suite
/// carries on. Results are ordered by seed, then variant.
pub fn run_suite<F>(kind: SuiteKind, base: &TrainConfig, seeds: &[u64], data: F, exec: Execution) -> Result<SuiteResult>
where
    F: Fn(u64) -> Result<SeedData>,
{
    if seeds.is_empty() {
        return Err(Error::Config("a suite needs at least one seed".into()));
    }
    let vars = variants(kind, base);
    let mut runs = Vec::with_capacity(vars.len() * seeds.len());
    for &seed in seeds {
        info!("suite {}: seed {seed}", kind.label());
        let seed_data = data(seed);
        let outcomes = par::map(exec, &vars, |v| {
            let result = match &seed_data {
                Err(e) => Err(format!("data: {e}")),
                Ok(d) => {
                    let cfg = TrainConfig {
                        seed,
                        ..v.config.clone()
                    };
                    d.grouping(cfg.grouping, seed)
                        .and_then(|g| train(&cfg, &d.splits, &g, Execution::Sequential))
                        .map(|out| out.record)
                        .map_err(|e| e.to_string())
                }
            };
            if let Err(e) = &result {
                warn!("{} seed {seed} failed: {e}", v.name);
            }
            RunOutcome {
                variant: v.name.clone(),
                seed,
                result,
            }
        });
        runs.extend(outcomes);
    }
    Ok(SuiteResult {
        kind,
        variants: vars.into_iter().map(|v| v.name).collect(),
        runs,
    })
}
