//! Experiment grid: train, decode and score every (variant, condition) cell
//! for several seeds, then summarize mean MER per cell.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attention::{BankAccess, Variant};
use crate::autodiff::TensorError;
use crate::data::{self, Condition, DataError, DecodeLine, Example};
use crate::decode::{beam_search, BeamConfig};
use crate::kv::{KvError, KvMap};
use crate::metrics::{score_corpus, MetricsError};
use crate::model::{save_checkpoint, CheckpointError, ConfigError, Model, ModelConfig};
use crate::synth::SynthConfig;
use crate::train::{train, Corpus, StepLog, TrainConfig, TrainError};
use crate::vocab::{LanguageTag, Vocab};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid plan: {0}")]
    Plan(String),
}

/// A grid plan. Keys: `data`, `out`, `variants`, `conditions`, `seeds`,
/// `steps`, `batch_size`, `beam`, `max_len`, `test`; every other key is a
/// model setting (see [`ModelConfig::to_kv`]).
#[derive(Debug, Clone, PartialEq)]
pub struct GridPlan {
    pub data: PathBuf,
    pub out: PathBuf,
    pub cells: Vec<(Variant, Condition)>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub batch_size: usize,
    pub beam: BeamConfig,
    /// Manifest stem scored for every cell.
    pub test: String,
    /// Model settings shared by all cells; variant and seed are set per cell.
    pub model: ModelConfig,
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ExperimentError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| ExperimentError::Plan(format!("{key}: {e}"))))
        .collect()
}

impl GridPlan {
    /// Parses a plan; relative `data`/`out` paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ExperimentError> {
        let mut m = KvMap::parse(text)?;
        let path = |m: &mut KvMap, k: &str| -> Result<PathBuf, ExperimentError> {
            let p = PathBuf::from(m.require::<String>(k)?);
            Ok(if p.is_absolute() { p } else { base.join(p) })
        };
        let data = path(&mut m, "data")?;
        let out = path(&mut m, "out")?;
        let variants: Vec<Variant> = list("variants", &m.require::<String>("variants")?)?;
        let conditions: Vec<Condition> = list("conditions", &m.require::<String>("conditions")?)?;
        let seeds: Vec<u64> = list("seeds", &m.require::<String>("seeds")?)?;
        let train_defaults = TrainConfig::default();
        let mut beam = BeamConfig::default();
        let steps = m.take("steps")?.unwrap_or(train_defaults.steps);
        let batch_size = m.take("batch_size")?.unwrap_or(train_defaults.batch_size);
        m.take_into("beam", &mut beam.beam)?;
        m.take_into("max_len", &mut beam.max_len)?;
        let test = m.take("test")?.unwrap_or_else(|| "test".to_string());
        let mut model = ModelConfig::default();
        model.apply_kv(&mut m)?;
        m.finish()?;
        let cells = variants.iter().flat_map(|&v| conditions.iter().map(move |&c| (v, c))).collect();
        let plan = Self {
            data,
            out,
            cells,
            seeds,
            steps,
            batch_size,
            beam,
            test,
            model,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Plan(m));
        if self.cells.is_empty() || self.seeds.is_empty() {
            return bad("at least one variant, condition and seed are required".into());
        }
        for (i, c) in self.cells.iter().enumerate() {
            if self.cells[..i].contains(c) {
                return bad(format!("duplicate cell ({}, {})", c.0, c.1));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return bad(format!("duplicate seed {s}"));
            }
        }
        if self.steps == 0 || self.batch_size == 0 || self.beam.beam == 0 || self.beam.max_len == 0 {
            return bad("steps, batch_size, beam and max_len must be at least 1".into());
        }
        Ok(())
    }

    /// Checks that every corpus the plan needs exists in the data directory.
    pub fn check_corpora(&self) -> Result<(), ExperimentError> {
        let mut stems: Vec<&str> = self.cells.iter().flat_map(|c| c.1.manifests().iter().copied()).collect();
        stems.push(&self.test);
        for f in [data::VOCAB_FILE, data::SYNTH_CONF_FILE] {
            if !self.data.join(f).is_file() {
                return Err(ExperimentError::Plan(format!("missing {}", self.data.join(f).display())));
            }
        }
        for s in stems {
            let p = data::manifest_path(&self.data, s);
            if !p.is_file() {
                return Err(ExperimentError::Plan(format!("missing corpus {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn runs(&self) -> usize {
        self.cells.len() * self.seeds.len()
    }

    pub fn cell_dir(&self, variant: Variant, condition: Condition, seed: u64) -> PathBuf {
        let cond = condition.to_string().replace('+', "_");
        self.out.join(format!("{}_{cond}_s{seed}", variant.cli_name()))
    }
}

/// Featurized corpora of a data directory, loaded on first use.
pub struct DataSet {
    pub dir: PathBuf,
    pub vocab: Vocab,
    pub synth: SynthConfig,
    pub token_langs: Vec<LanguageTag>,
    cache: BTreeMap<String, Vec<Example>>,
}

impl DataSet {
    pub fn open(dir: &Path) -> Result<Self, ExperimentError> {
        let (vocab, synth) = data::load_dataset_meta(dir)?;
        let token_langs = vocab.languages(&(0..vocab.len()).collect::<Vec<_>>()).map_err(DataError::from)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            vocab,
            synth,
            token_langs,
            cache: BTreeMap::new(),
        })
    }

    pub fn examples(&mut self, stem: &str) -> Result<&[Example], ExperimentError> {
        if !self.cache.contains_key(stem) {
            let entries = data::load_manifest(&data::manifest_path(&self.dir, stem))?;
            let ex = data::featurize_entries(&entries, &self.vocab, &self.synth)?;
            self.cache.insert(stem.to_string(), ex);
        }
        Ok(&self.cache[stem])
    }

    /// Training corpora of a condition.
    pub fn corpora(&mut self, condition: Condition) -> Result<Vec<Corpus>, ExperimentError> {
        condition
            .manifests()
            .iter()
            .map(|&stem| {
                Ok(Corpus {
                    name: stem.to_string(),
                    examples: self.examples(stem)?.to_vec(),
                })
            })
            .collect()
    }
}

/// Decodes every example; the hypothesis text excludes sos/eos.
pub fn decode_examples(
    model: &Model,
    examples: &[Example],
    vocab: &Vocab,
    token_langs: &[LanguageTag],
    beam: BeamConfig,
    mut access: Option<&mut BankAccess>,
) -> Result<Vec<DecodeLine>, ExperimentError> {
    examples
        .iter()
        .map(|e| {
            let r = beam_search(model, &e.features, token_langs, beam, access.as_deref_mut(), None)?;
            Ok(DecodeLine {
                id: e.id.clone(),
                text: vocab.decode(r.best.output()).map_err(DataError::from)?,
                logprob: r.best.logprob,
            })
        })
        .collect()
}

/// Outcome of one (variant, condition, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub variant: Variant,
    pub condition: Condition,
    pub seed: u64,
    pub mer: f64,
    /// False when the run was found complete on disk.
    pub trained: bool,
}

pub const CKPT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const DECODE_FILE: &str = "decode.tsv";
pub const SCORE_FILE: &str = "score.txt";

fn read_mer(path: &Path) -> Result<Option<f64>, ExperimentError> {
    let text = data::read_to_string(path)?;
    let m = KvMap::parse(&text)?;
    Ok(m.get("MER").and_then(|v| v.parse().ok()))
}

/// Trains, decodes and scores one run, in `plan.cell_dir(..)`. A run whose
/// checkpoint and score file already exist is not repeated.
pub fn run_cell(plan: &GridPlan, ds: &mut DataSet, variant: Variant, condition: Condition, seed: u64) -> Result<CellResult, ExperimentError> {
    let dir = plan.cell_dir(variant, condition, seed);
    let (ckpt, score) = (dir.join(CKPT_FILE), dir.join(SCORE_FILE));
    if ckpt.is_file() && score.is_file() {
        if let Some(mer) = read_mer(&score)? {
            return Ok(CellResult {
                variant,
                condition,
                seed,
                mer,
                trained: false,
            });
        }
    }
    std::fs::create_dir_all(&dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut cfg = plan.model.clone();
    cfg.vocab_size = ds.vocab.len();
    cfg.feat_dim = ds.synth.features.dim;
    cfg.variant.variant = variant;
    cfg.seed = seed;
    let mut model = Model::new(cfg)?;
    let corpora = ds.corpora(condition)?;
    let tc = TrainConfig {
        steps: plan.steps,
        batch_size: plan.batch_size,
        seed,
    };
    let mut log = String::from(StepLog::HEADER);
    train(&mut model, &corpora, &ds.token_langs, &tc, &mut |s| log.push_str(&s.format()))?;
    drop(corpora);
    data::write(&dir.join(LOG_FILE), log)?;
    save_checkpoint(&ckpt, &model, plan.steps as u64)?;

    ds.examples(&plan.test)?;
    let test = &ds.cache[&plan.test];
    let lines = decode_examples(&model, test, &ds.vocab, &ds.token_langs, plan.beam, None)?;
    data::write(&dir.join(DECODE_FILE), lines.iter().map(DecodeLine::format).collect::<String>())?;
    let refs = data::load_manifest(&data::manifest_path(&ds.dir, &plan.test))?;
    let hyps: Vec<(String, String)> = lines.into_iter().map(|l| (l.id, l.text)).collect();
    let report = score_corpus(&refs, &hyps, &ds.vocab)?;
    data::write(&score, report.to_kv_lines())?;
    Ok(CellResult {
        variant,
        condition,
        seed,
        mer: report.mer().unwrap_or(0.0),
        trained: true,
    })
}

/// Runs the whole plan, cells in plan order, seeds innermost.
pub fn run_grid(plan: &GridPlan, on_cell: &mut dyn FnMut(&CellResult)) -> Result<GridSummary, ExperimentError> {
    plan.validate()?;
    plan.check_corpora()?;
    let mut ds = DataSet::open(&plan.data)?;
    let mut results = Vec::with_capacity(plan.runs());
    for &(v, c) in &plan.cells {
        for &seed in &plan.seeds {
            let r = run_cell(plan, &mut ds, v, c, seed)?;
            on_cell(&r);
            results.push(r);
        }
    }
    Ok(GridSummary::new(&plan.cells, results))
}

/// Seed-averaged MER per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSummary {
    pub cells: Vec<(Variant, Condition)>,
    pub results: Vec<CellResult>,
}

/// Relative reduction of `mer` against `reference`, as a fraction.
pub fn relative_reduction(reference: f64, mer: f64) -> Option<f64> {
    (reference > 0.0).then(|| (reference - mer) / reference)
}

impl GridSummary {
    pub fn new(cells: &[(Variant, Condition)], results: Vec<CellResult>) -> Self {
        Self {
            cells: cells.to_vec(),
            results,
        }
    }

    pub fn seed_mers(&self, v: Variant, c: Condition) -> Vec<f64> {
        self.results.iter().filter(|r| r.variant == v && r.condition == c).map(|r| r.mer).collect()
    }

    pub fn mean(&self, v: Variant, c: Condition) -> Option<f64> {
        let m = self.seed_mers(v, c);
        (!m.is_empty()).then(|| m.iter().sum::<f64>() / m.len() as f64)
    }

    /// Reduction of `(v, c)` against the same variant trained on cs only.
    pub fn reduction_vs_cs(&self, v: Variant, c: Condition) -> Option<f64> {
        relative_reduction(self.mean(v, Condition::Cs)?, self.mean(v, c)?)
    }

    /// Reduction of `(v, c)` against `(baseline, cs)`.
    pub fn reduction_vs_baseline(&self, v: Variant, c: Condition) -> Option<f64> {
        relative_reduction(self.mean(Variant::Baseline, Condition::Cs)?, self.mean(v, c)?)
    }

    /// One row per cell: seeds, mean MER and the two relative reductions, in percent.
    pub fn to_table(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = format!(
            "{:<18}{:<7}{:>6}{:>10}{:>10}{:>16}{:>12}\n",
            "variant", "data", "seeds", "MER%", "sd", "rel_vs_base_cs%", "rel_vs_cs%"
        );
        for &(v, c) in &self.cells {
            let m = self.seed_mers(v, c);
            let mean = self.mean(v, c);
            let sd = mean.filter(|_| m.len() > 1).map(|mu| (m.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (m.len() - 1) as f64).sqrt());
            let _ = writeln!(
                s,
                "{:<18}{:<7}{:>6}{:>10}{:>10}{:>16}{:>12}",
                v.to_string(),
                c.to_string(),
                m.len(),
                pct(mean),
                pct(sd),
                pct(self.reduction_vs_baseline(v, c)),
                pct(self.reduction_vs_cs(v, c))
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PLAN: &str = "data = d\nout = runs\nvariants = baseline, independent\nconditions = cs, all\nseeds = 1, 2, 3\nsteps = 10\nd_model = 16\n";

    #[test]
    fn plan_expands_cells_and_seeds() {
        let p = GridPlan::parse(PLAN, Path::new("/x")).unwrap();
        assert_eq!(p.runs(), 12);
        assert_eq!(p.cells[1], (Variant::Baseline, Condition::All));
        assert_eq!(p.data, Path::new("/x/d"));
        assert_eq!(p.model.d_model, 16);
        assert_eq!(p.beam.beam, 10);
        assert_eq!(p.cell_dir(Variant::SplitIndependent, Condition::All, 3), Path::new("/x/runs/independent_all_s3"));
    }

    #[test]
    fn plan_rejects_bad_input() {
        let base = Path::new("/");
        assert!(GridPlan::parse(&PLAN.replace("cs, all", "cs, cs"), base).is_err());
        assert!(GridPlan::parse(&PLAN.replace("1, 2, 3", "1, 1"), base).is_err());
        assert!(GridPlan::parse(&format!("{PLAN}bogus = 1\n"), base).is_err());
        assert!(GridPlan::parse(&PLAN.replace("cs, all", "cs, mono"), base).is_err());
    }

    #[test]
    fn summary_reductions() {
        let r = |v, c, seed, mer| CellResult {
            variant: v,
            condition: c,
            seed,
            mer,
            trained: true,
        };
        let cells = vec![(Variant::Baseline, Condition::Cs), (Variant::Baseline, Condition::All), (Variant::SplitIndependent, Condition::All)];
        let s = GridSummary::new(
            &cells,
            vec![
                r(Variant::Baseline, Condition::Cs, 1, 0.10),
                r(Variant::Baseline, Condition::Cs, 2, 0.20),
                r(Variant::Baseline, Condition::All, 1, 0.12),
                r(Variant::SplitIndependent, Condition::All, 1, 0.09),
            ],
        );
        assert!((s.mean(Variant::Baseline, Condition::Cs).unwrap() - 0.15).abs() < 1e-12);
        assert!((s.reduction_vs_cs(Variant::Baseline, Condition::All).unwrap() - 0.2).abs() < 1e-12);
        assert!((s.reduction_vs_baseline(Variant::SplitIndependent, Condition::All).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(s.reduction_vs_cs(Variant::SplitIndependent, Condition::All), None);
        let t = s.to_table();
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("40.00"));
    }
}
