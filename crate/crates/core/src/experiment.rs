//! Ablation matrix over data curation and restorer guidance, run on
//! synthetic scenes with shared seeds, architecture and step budget.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curation::MaskBank;
use crate::data::{class_pixel_count, class_pixel_fraction, SceneSample};
use crate::error::{Error, Result};
use crate::evaluation::{checkpoint_id, evaluate_samples, EvalReport, EvalSettings};
use crate::losses::Phase;
use crate::manifest::Split;
use crate::nets::{Embedder, EmbedderConfig, FeatureNet};
use crate::synth::{generate_scene, SynthConfig};
use crate::training::{train_baseline, train_remover, train_restorer, Checkpoint, Guidance, TrainConfig};

/// Scene indices of held-out data start here so they never collide with
/// training scenes.
pub const TEST_INDEX_OFFSET: u64 = 1 << 32;

/// One configuration of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationRow {
    /// Conventional training on every image.
    Baseline,
    /// Target-free images with class-shaped masks, no restorer.
    CurationOnly,
    CurationAfterimage,
    CurationAdvAfterimage,
    /// Curated data with restorer outputs as discriminator fakes only.
    CurationAdv,
}

impl AblationRow {
    pub const DEFAULT_MATRIX: [AblationRow; 4] = [
        AblationRow::Baseline,
        AblationRow::CurationOnly,
        AblationRow::CurationAfterimage,
        AblationRow::CurationAdvAfterimage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Baseline => "baseline",
            AblationRow::CurationOnly => "curation_only",
            AblationRow::CurationAfterimage => "curation_afterimage",
            AblationRow::CurationAdvAfterimage => "curation_adv_afterimage",
            AblationRow::CurationAdv => "curation_adv",
        }
    }

    /// `(curation, adversarial guidance, afterimage)` flags.
    pub fn flags(self) -> [bool; 3] {
        match self {
            AblationRow::Baseline => [false, false, false],
            AblationRow::CurationOnly => [true, false, false],
            AblationRow::CurationAfterimage => [true, false, true],
            AblationRow::CurationAdvAfterimage => [true, true, true],
            AblationRow::CurationAdv => [true, true, false],
        }
    }

    pub fn guidance(self) -> Guidance {
        let [_, adv, after] = self.flags();
        Guidance {
            afterimage: after,
            restorer_adversarial: adv,
            afterimage_on_irregular: false,
        }
    }

    pub fn needs_restorer(self) -> bool {
        self.guidance().any()
    }
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationRow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            AblationRow::Baseline,
            AblationRow::CurationOnly,
            AblationRow::CurationAfterimage,
            AblationRow::CurationAdvAfterimage,
            AblationRow::CurationAdv,
        ]
        .into_iter()
        .find(|r| r.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown ablation row `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scene generator settings; its seed is replaced by each run seed.
    pub synth: SynthConfig,
    pub n_train: usize,
    /// Held-out scenes; target-free ones form the comparison set and the
    /// rest are removal queries.
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub restorer_steps: usize,
    /// Shared training settings; phase, seed, guidance and step cap are set per run.
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub embedder: EmbedderConfig,
    pub rows: Vec<AblationRow>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig {
            lr_generator: 5e-4,
            lr_discriminator: 1e-3,
            generator: crate::nets::GeneratorConfig {
                base_width: 8,
                n_down: 2,
                n_blocks: 3,
                spectral_blocks: true,
            },
            discriminator: crate::nets::DiscriminatorConfig {
                base_width: 16,
                n_layers: 4,
            },
            epochs: 1000,
            batch_size: 2,
            ..TrainConfig::default()
        };
        Self {
            synth: SynthConfig::default(),
            n_train: 1500,
            n_test: 1200,
            seeds: vec![0, 1, 2],
            steps: 2000,
            restorer_steps: 800,
            train,
            eval: EvalSettings::default(),
            embedder: EmbedderConfig::default(),
            rows: AblationRow::DEFAULT_MATRIX.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.n_train == 0 || self.n_test == 0 || self.steps == 0 || self.restorer_steps == 0 {
            return Err(Error::Config("scene counts and step budgets must be positive".into()));
        }
        if self.seeds.is_empty() || self.rows.is_empty() {
            return Err(Error::Config("experiment needs at least one seed and one row".into()));
        }
        if self.synth.target_class != self.train.target_class || self.train.target_class != self.eval.target_class {
            return Err(Error::Config("synth, train and eval target classes differ".into()));
        }
        Ok(())
    }

    pub fn run_config(&self, phase: Phase, seed: u64, steps: usize, guidance: Guidance) -> TrainConfig {
        TrainConfig {
            phase,
            seed,
            max_steps: Some(steps),
            guidance,
            ..self.train.clone()
        }
    }
}

/// Training and held-out scenes for one seed.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
    pub comparison: Vec<SceneSample>,
}

impl ExperimentData {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let synth = SynthConfig {
            seed,
            split: Split::Train,
            ..cfg.synth.clone()
        };
        let train = (0..cfg.n_train as u64)
            .map(|i| generate_scene(&synth, i))
            .collect::<Result<Vec<_>>>()?;
        let held = SynthConfig {
            split: Split::Test,
            ..synth
        };
        let mut test = Vec::new();
        let mut comparison = Vec::new();
        for i in 0..cfg.n_test as u64 {
            let s = generate_scene(&held, TEST_INDEX_OFFSET + i)?;
            if class_pixel_count(&s.seg, cfg.synth.target_class) == 0 {
                comparison.push(s);
            } else {
                test.push(s);
            }
        }
        Ok(Self { train, test, comparison })
    }

    pub fn restorer_set(&self, cfg: &ExperimentConfig) -> Vec<SceneSample> {
        let rule = &cfg.train.curation;
        self.train
            .iter()
            .filter(|s| {
                let f = class_pixel_fraction(&s.seg, cfg.train.target_class);
                f >= rule.select_lo && f <= rule.select_hi
            })
            .cloned()
            .collect()
    }

    pub fn remover_set(&self, cfg: &ExperimentConfig) -> Vec<SceneSample> {
        self.train
            .iter()
            .filter(|s| class_pixel_count(&s.seg, cfg.train.target_class) == 0)
            .cloned()
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RowOutcome {
    pub row: AblationRow,
    pub seed: u64,
    pub checkpoint_id: Option<String>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config_hash: String,
    pub outcomes: Vec<RowOutcome>,
}

/// Runs every configured row for one seed. Failures of individual rows are
/// recorded rather than propagated.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    mut on_checkpoint: impl FnMut(AblationRow, &Checkpoint),
    mut progress: impl FnMut(&str),
) -> Result<Vec<RowOutcome>> {
    cfg.validate()?;
    let data = ExperimentData::generate(cfg, seed)?;
    let bank = MaskBank::from_samples(&data.train, cfg.train.target_class);
    let remover_set = data.remover_set(cfg);
    let embedder = Embedder::new(cfg.embedder.clone())?;
    let phi = FeatureNet::new(cfg.train.features.clone())?;

    let restorer = if cfg.rows.iter().any(|r| r.needs_restorer()) {
        progress(&format!("seed {seed}: restorer"));
        let rc = cfg.run_config(Phase::Restorer, seed, cfg.restorer_steps, Guidance::NONE);
        Some(train_restorer(&rc, &data.restorer_set(cfg)).map(|r| r.checkpoint))
    } else {
        None
    };

    let mut outcomes = Vec::with_capacity(cfg.rows.len());
    for &row in &cfg.rows {
        progress(&format!("seed {seed}: {row}"));
        let trained = match (row, &restorer) {
            (AblationRow::Baseline, _) => {
                let c = cfg.run_config(Phase::Baseline, seed, cfg.steps, Guidance::NONE);
                train_baseline(&c, &data.train, &bank)
            }
            (r, _) if !r.needs_restorer() => {
                let c = cfg.run_config(Phase::Remover, seed, cfg.steps, Guidance::NONE);
                train_remover(&c, &remover_set, &bank, None)
            }
            (r, Some(Ok(rest))) => {
                let c = cfg.run_config(Phase::Remover, seed, cfg.steps, r.guidance());
                train_remover(&c, &remover_set, &bank, Some(rest))
            }
            (_, Some(Err(e))) => Err(Error::MissingArtifact(format!("restorer training failed: {e}"))),
            (_, None) => unreachable!("restorer is trained whenever a row needs it"),
        };
        let outcome = trained.and_then(|run| {
            on_checkpoint(row, &run.checkpoint);
            progress(&format!("seed {seed}: {row} evaluation"));
            let id = checkpoint_id(&run.checkpoint);
            let report = evaluate_samples(
                &run.checkpoint.generator,
                &id,
                &data.test,
                &data.comparison,
                &embedder,
                &phi,
                &cfg.eval,
            )?;
            Ok((id, report))
        });
        outcomes.push(match outcome {
            Ok((id, report)) => RowOutcome {
                row,
                seed,
                checkpoint_id: Some(id),
                report: Some(report),
                error: None,
            },
            Err(e) => RowOutcome {
                row,
                seed,
                checkpoint_id: None,
                report: None,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(outcomes)
}

pub fn run_experiment(cfg: &ExperimentConfig, mut progress: impl FnMut(&str)) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut outcomes = Vec::new();
    for &seed in &cfg.seeds {
        outcomes.extend(run_seed(cfg, seed, |_, _| {}, &mut progress)?);
    }
    Ok(ExperimentResult {
        config_hash: config_hash(cfg),
        outcomes,
    })
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(cfg).expect("config is serialisable");
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Per-row summary across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationLine {
    pub row: AblationRow,
    pub flags: [bool; 3],
    pub seeds: Vec<u64>,
    pub fid_star: Option<f64>,
    pub u_ids_star: Option<f64>,
    pub fid_delta: Option<f64>,
    pub u_ids_delta: Option<f64>,
    pub failed: bool,
}

impl ExperimentResult {
    pub fn outcome(&self, row: AblationRow, seed: u64) -> Option<&RowOutcome> {
        self.outcomes.iter().find(|o| o.row == row && o.seed == seed)
    }

    pub fn metric(&self, row: AblationRow, seed: u64, name: &str) -> Option<f64> {
        self.outcome(row, seed)?.report.as_ref()?.metric(name)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.outcomes.iter().map(|o| o.seed).collect();
        s.dedup();
        s
    }

    pub fn rows(&self) -> Vec<AblationRow> {
        let mut r: Vec<AblationRow> = Vec::new();
        for o in &self.outcomes {
            if !r.contains(&o.row) {
                r.push(o.row);
            }
        }
        r
    }

    pub fn any_failed(&self) -> bool {
        self.outcomes.iter().any(|o| o.error.is_some())
    }

    fn mean_metric(&self, row: AblationRow, name: &str) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.seeds().iter().map(|&s| self.metric(row, s, name)).collect();
        vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Seed-averaged FID*/U-IDS* per row with differences to the baseline
    /// row (negative FID* and positive U-IDS* deltas are improvements).
    pub fn ablation_table(&self) -> Vec<AblationLine> {
        let base_fid = self.mean_metric(AblationRow::Baseline, "fid_star");
        let base_uids = self.mean_metric(AblationRow::Baseline, "u_ids_star");
        self.rows()
            .into_iter()
            .map(|row| {
                let fid = self.mean_metric(row, "fid_star");
                let uids = self.mean_metric(row, "u_ids_star");
                AblationLine {
                    row,
                    flags: row.flags(),
                    seeds: self.seeds(),
                    fid_star: fid,
                    u_ids_star: uids,
                    fid_delta: fid.zip(base_fid).map(|(a, b)| a - b),
                    u_ids_delta: uids.zip(base_uids).map(|(a, b)| a - b),
                    failed: self.outcomes.iter().any(|o| o.row == row && o.error.is_some()),
                }
            })
            .collect()
    }

    /// Seeds on which `better` has strictly lower FID* than `worse`.
    pub fn fid_wins(&self, better: AblationRow, worse: AblationRow) -> Vec<u64> {
        self.seeds()
            .into_iter()
            .filter(|&s| match (self.metric(better, s, "fid_star"), self.metric(worse, s, "fid_star")) {
                (Some(a), Some(b)) => a < b,
                _ => false,
            })
            .collect()
    }

    /// Fraction of paired test scenes where `better` is perceptually closer
    /// to the removal ground truth than `worse`, for one seed.
    pub fn perceptual_win_rate(&self, better: AblationRow, worse: AblationRow, seed: u64) -> Option<f64> {
        let a = self.outcome(better, seed)?.report.as_ref()?;
        let b = self.outcome(worse, seed)?.report.as_ref()?;
        let mut wins = 0usize;
        let mut total = 0usize;
        for sa in &a.per_sample {
            if let Some(sb) = b.per_sample.iter().find(|x| x.id == sa.id) {
                total += 1;
                wins += usize::from(sa.perceptual < sb.perceptual);
            }
        }
        (total > 0).then(|| wins as f64 / total as f64)
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "+"
    } else {
        "-"
    }
}

fn fmt_opt(v: Option<f64>, signed: bool) -> String {
    match (v, signed) {
        (Some(x), true) => format!("{x:+.4}"),
        (Some(x), false) => format!("{x:.4}"),
        (None, _) => "failed".to_string(),
    }
}

/// Text rendering: one line per row with curation/adversarial/afterimage
/// flags, seed-averaged metrics and `(delta)` against the baseline.
pub fn render_ablation_table(lines: &[AblationLine], config_hash: &str) -> String {
    let mut out = format!(
        "{:<26} {:>3} {:>3} {:>3}  {:>22}  {:>22}  {}\n",
        "row", "cur", "adv", "ai", "FID* (delta)", "U-IDS* (delta)", "seeds/config"
    );
    for l in lines {
        let [c, a, i] = l.flags;
        let fid = format!("{} ({})", fmt_opt(l.fid_star, false), fmt_opt(l.fid_delta, true));
        let uids = format!("{} ({})", fmt_opt(l.u_ids_star, false), fmt_opt(l.u_ids_delta, true));
        let seeds: Vec<String> = l.seeds.iter().map(u64::to_string).collect();
        out += &format!(
            "{:<26} {:>3} {:>3} {:>3}  {:>22}  {:>22}  {}/{}{}\n",
            l.row.name(),
            flag(c),
            flag(a),
            flag(i),
            fid,
            uids,
            seeds.join(","),
            config_hash,
            if l.failed { "  FAILED" } else { "" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_names_round_trip() {
        for r in AblationRow::DEFAULT_MATRIX.into_iter().chain([AblationRow::CurationAdv]) {
            assert_eq!(r.name().parse::<AblationRow>().unwrap(), r);
        }
        assert!("nope".parse::<AblationRow>().is_err());
        assert!(!AblationRow::CurationAfterimage.guidance().restorer_adversarial);
        assert!(!AblationRow::CurationOnly.needs_restorer());
    }

    #[test]
    fn table_marks_failed_rows_and_deltas() {
        let report = |fid: f64| EvalReport {
            metrics: [
                (
                    "fid_star".to_string(),
                    crate::evaluation::MetricValue {
                        value: fid,
                        n_query: 1,
                        n_comparison: 1,
                    },
                ),
                (
                    "u_ids_star".to_string(),
                    crate::evaluation::MetricValue {
                        value: 0.1,
                        n_query: 1,
                        n_comparison: 1,
                    },
                ),
            ]
            .into(),
            query_id: String::new(),
            comparison_id: String::new(),
            checkpoint_id: String::new(),
            extractor: String::new(),
            timestamp: String::new(),
            config_hash: String::new(),
            per_sample: vec![],
        };
        let ok = |row, fid| RowOutcome {
            row,
            seed: 0,
            checkpoint_id: Some("k".into()),
            report: Some(report(fid)),
            error: None,
        };
        let result = ExperimentResult {
            config_hash: "h".into(),
            outcomes: vec![
                ok(AblationRow::Baseline, 5.0),
                ok(AblationRow::CurationOnly, 3.0),
                RowOutcome {
                    row: AblationRow::CurationAfterimage,
                    seed: 0,
                    checkpoint_id: None,
                    report: None,
                    error: Some("boom".into()),
                },
                ok(AblationRow::CurationAdvAfterimage, 2.0),
            ],
        };
        let table = result.ablation_table();
        assert_eq!(table.len(), 4);
        assert_eq!(table[1].fid_delta, Some(-2.0));
        assert!(table[2].failed && table[2].fid_star.is_none());
        assert!(result.any_failed());
        assert_eq!(result.fid_wins(AblationRow::CurationAdvAfterimage, AblationRow::CurationOnly), vec![0]);
        let text = render_ablation_table(&table, &result.config_hash);
        assert_eq!(text.lines().count(), 5);
        assert!(text.contains("(-2.0000)") && text.contains("FAILED"));
    }
}
