//! Evaluation harness: seeded fixed subsets, four accuracy metrics per cell,
//! repeated runs aggregated as mean ± sample std, and sweeps over attack
//! modes and diffusion stopping times.
//!
//! A *cell* is one `(mode, t_star, repeat)` combination; it is evaluated on
//! every subset of the plan, producing one record per `(cell, subset)`. The
//! expensive intermediates are shared: attacks depend only on `(mode,
//! subset)` and are cached in memory and optionally on disk, purified-clean
//! accuracy depends only on `(t_star, subset, repeat)` and is shared across
//! modes. All purification noise is pre-seeded per record, so reports are
//! byte-identical across runs and worker counts.

use crate::attack::{run_attack, AttackConfig, AttackMode, Classifier};
use crate::diffusion::{purify, DiffusionSchedule, PurifyConfig, ScoreModel};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::io::{atomic_write, BatchFile};
use crate::models::LabeledBatch;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

/// Report schema tag.
pub const EVAL_REPORT_SCHEMA: &str = "eval-report/1";

/// What to evaluate: subset geometry, attack modes, diffusion stopping
/// times, and the per-repeat seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalPlan {
    /// Images per subset, drawn without replacement from the test split.
    pub subset_size: usize,
    /// Number of independently drawn subsets.
    pub subset_count: usize,
    /// Repeated purification runs per cell; must equal `seeds.len()`.
    pub repeats: usize,
    /// Attack modes to sweep; empty evaluates only the clean columns.
    pub modes: Vec<AttackMode>,
    /// Diffusion stopping times to sweep.
    pub t_star_list: Vec<f64>,
    /// One purification seed per repeat.
    pub seeds: Vec<u64>,
    /// Base seed of the subset draws (fixed across repeats).
    pub subset_seed: u64,
}

impl Default for EvalPlan {
    fn default() -> Self {
        EvalPlan {
            subset_size: 512,
            subset_count: 3,
            repeats: 3,
            modes: AttackMode::ALL_MODES.to_vec(),
            t_star_list: vec![0.15],
            seeds: vec![0, 1, 2],
            subset_seed: 0,
        }
    }
}

impl EvalPlan {
    pub fn validate(&self, test_len: usize) -> Result<()> {
        if self.subset_size == 0 || self.subset_size > test_len {
            return Err(Error::invalid(format!(
                "subset_size must lie in 1..={test_len}, got {}",
                self.subset_size
            )));
        }
        if self.subset_count == 0 {
            return Err(Error::invalid("subset_count must be at least 1"));
        }
        if self.repeats == 0 || self.repeats != self.seeds.len() {
            return Err(Error::invalid(format!(
                "repeats ({}) must be positive and equal seeds.len() ({})",
                self.repeats,
                self.seeds.len()
            )));
        }
        if self.t_star_list.is_empty() {
            return Err(Error::invalid("t_star_list must not be empty"));
        }
        if let Some(&bad) = self
            .t_star_list
            .iter()
            .find(|&&t| !(t > 0.0 && t < 1.0))
        {
            return Err(Error::invalid(format!(
                "every t_star must lie in (0, 1), got {bad}"
            )));
        }
        Ok(())
    }
}

/// Everything a sweep needs besides the plan: the models under test, solver
/// settings, identities for caching, and the worker count.
pub struct BenchComponents<'a, T: Scalar> {
    pub classifier: &'a dyn Classifier<T>,
    pub score: &'a dyn ScoreModel<T>,
    pub schedule: DiffusionSchedule,
    pub attack: AttackConfig,
    /// Reverse-solver step size.
    pub dt: f64,
    pub final_step_noiseless: bool,
    /// Human-readable model name for report rows.
    pub model_tag: String,
    /// Content hash of the classifier weights (attack cache key part).
    pub model_hash: String,
    /// Hash of the run configuration that produced this sweep.
    pub config_hash: String,
    /// Attack cache directory; `None` disables the disk cache.
    pub cache_dir: Option<PathBuf>,
    /// Concurrent cell jobs; `1` runs sequentially.
    pub workers: usize,
}

/// The four accuracy metrics of one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Clean,
    Adversarial,
    PurifiedClean,
    PurifiedAdversarial,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Clean,
        Metric::Adversarial,
        Metric::PurifiedClean,
        Metric::PurifiedAdversarial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Clean => "clean",
            Metric::Adversarial => "adversarial",
            Metric::PurifiedClean => "purified_clean",
            Metric::PurifiedAdversarial => "purified_adversarial",
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One evaluated `(cell, subset)` combination. Accuracies are percentages;
/// the attack columns are `None` for clean-only (empty-mode) cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRunRecord {
    pub model: String,
    pub mode: Option<AttackMode>,
    pub t_star: f64,
    pub subset: usize,
    pub repeat: usize,
    pub seed: u64,
    pub clean: f64,
    pub adversarial: Option<f64>,
    pub purified_clean: f64,
    pub purified_adversarial: Option<f64>,
}

impl CellRunRecord {
    pub fn metric(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Clean => Some(self.clean),
            Metric::Adversarial => self.adversarial,
            Metric::PurifiedClean => Some(self.purified_clean),
            Metric::PurifiedAdversarial => self.purified_adversarial,
        }
    }
}

/// Aggregate over all records of one `(mode, t_star, metric)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: Option<AttackMode>,
    pub t_star: f64,
    pub metric: Metric,
    /// Per-run values in record order; mean/std recompute from these.
    pub runs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n-1 denominator); 0 for a single run.
    pub std: f64,
}

/// A cell whose evaluation failed; the sweep records the cause and continues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub mode: Option<AttackMode>,
    pub t_star: f64,
    pub repeat: usize,
    pub cause: String,
}

/// Machine-readable sweep result. Serialization is canonical: identical
/// inputs produce byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub model: String,
    pub model_hash: String,
    pub config_hash: String,
    pub plan: EvalPlan,
    pub records: Vec<CellRunRecord>,
    pub summaries: Vec<SummaryRow>,
    pub failures: Vec<CellFailure>,
}

impl EvalReport {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self).map_err(|e| Error::Serde(e.to_string()))?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }
}

/// Wall-clock of one cell (not part of the deterministic report).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellTiming {
    pub mode: Option<AttackMode>,
    pub t_star: f64,
    pub repeat: usize,
    pub wall_ms: u64,
}

/// Timings and versions of one sweep execution; reproducibility metadata
/// that intentionally lives outside the byte-identical report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub cells: Vec<CellTiming>,
    pub total_wall_ms: u64,
    pub versions: BTreeMap<String, String>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds seed parts into one well-mixed stream seed.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243F_6A88_85A3_08D3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed of the plan's `index`-th subset draw.
pub fn subset_seed(plan_subset_seed: u64, index: usize) -> u64 {
    mix_seed(&[plan_subset_seed, index as u64])
}

/// Draws `size` distinct indices from `0..len` — a pure function of its
/// arguments, so the same seed always selects the same subset.
pub fn subset_indices(len: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > len {
        return Err(Error::invalid(format!(
            "cannot draw {size} distinct indices from {len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..len).collect();
    // Partial Fisher-Yates: only the first `size` swaps are needed.
    for i in 0..size {
        let j = i + rng.random_range(0..len - i);
        pool.swap(i, j);
    }
    pool.truncate(size);
    Ok(pool)
}

/// Purification seed domains: purified-clean excludes the mode, so every
/// mode of a cell shares the same purified-clean run.
const PURIFY_CLEAN_DOMAIN: u64 = 0;
fn purify_adv_domain(mode: AttackMode) -> u64 {
    1 + mode as u64
}

type AttackResult<T> = std::result::Result<(ImageBatch<T>, f64), String>;

struct SweepCtx<'a, T: Scalar> {
    comps: &'a BenchComponents<'a, T>,
    plan: &'a EvalPlan,
    subsets: Vec<LabeledBatch<T>>,
    clean: Vec<f64>,
    attacks: Mutex<HashMap<(AttackMode, usize), Arc<AttackResult<T>>>>,
    purified_clean: Mutex<HashMap<(u64, usize, usize), std::result::Result<f64, String>>>,
}

impl<'a, T: Scalar> SweepCtx<'a, T> {
    fn new(
        comps: &'a BenchComponents<'a, T>,
        plan: &'a EvalPlan,
        test: &LabeledBatch<T>,
    ) -> Result<Self> {
        plan.validate(test.len())?;
        let mut subsets = Vec::with_capacity(plan.subset_count);
        let mut clean = Vec::with_capacity(plan.subset_count);
        for s in 0..plan.subset_count {
            let seed = subset_seed(plan.subset_seed, s);
            let indices = subset_indices(test.len(), plan.subset_size, seed)?;
            let subset = test.select(&indices)?;
            let acc = comps
                .classifier
                .accuracy_pct(&subset.images, &subset.labels)?;
            subsets.push(subset);
            clean.push(acc);
        }
        Ok(SweepCtx {
            comps,
            plan,
            subsets,
            clean,
            attacks: Mutex::new(HashMap::new()),
            purified_clean: Mutex::new(HashMap::new()),
        })
    }

    /// Content-addressed attack cache key: classifier weights, mode, attack
    /// settings, and the exact subset content all participate.
    fn attack_cache_path(&self, mode: AttackMode, subset: usize) -> Option<PathBuf> {
        let dir = self.comps.cache_dir.as_ref()?;
        let cfg = serde_json::to_string(&self.comps.attack).ok()?;
        let mut hasher = <sha2::Sha256 as sha2::Digest>::new();
        sha2::Digest::update(&mut hasher, self.comps.model_hash.as_bytes());
        sha2::Digest::update(&mut hasher, mode.name().as_bytes());
        sha2::Digest::update(&mut hasher, cfg.as_bytes());
        let sub = &self.subsets[subset];
        for &v in sub.images.data().iter() {
            sha2::Digest::update(&mut hasher, v.to_f64_c().to_le_bytes());
        }
        for &l in &sub.labels {
            sha2::Digest::update(&mut hasher, (l as u64).to_le_bytes());
        }
        let digest = hex::encode(sha2::Digest::finalize(hasher));
        Some(dir.join(format!("attack-{}.json", &digest[..32])))
    }

    fn load_cached_attack(&self, path: &PathBuf) -> Option<(ImageBatch<T>, f64)> {
        let file = BatchFile::load(path).ok()?;
        let acc: f64 = file.meta.get("adversarial_accuracy")?.parse().ok()?;
        let batch = file.to_batch::<T>().ok()?;
        Some((batch, acc))
    }

    fn attack(&self, mode: AttackMode, subset: usize) -> Arc<AttackResult<T>> {
        if let Some(hit) = self.attacks.lock().unwrap().get(&(mode, subset)) {
            return Arc::clone(hit);
        }
        let cache_path = self.attack_cache_path(mode, subset);
        let result: AttackResult<T> = (|| {
            if let Some(path) = &cache_path {
                if let Some(hit) = self.load_cached_attack(path) {
                    return Ok(hit);
                }
            }
            let sub = &self.subsets[subset];
            let outcome = run_attack(
                self.comps.classifier,
                &sub.images,
                &sub.labels,
                mode,
                &self.comps.attack,
            )
            .map_err(|e| e.to_string())?;
            let acc = self
                .comps
                .classifier
                .accuracy_pct(&outcome.adversarial, &sub.labels)
                .map_err(|e| e.to_string())?;
            if let Some(path) = &cache_path {
                let mut file = BatchFile::from_batch(&outcome.adversarial, Some(&sub.labels));
                file.meta
                    .insert("adversarial_accuracy".into(), acc.to_string());
                file.meta.insert("mode".into(), mode.name().into());
                // Cache write failures only cost future reuse.
                let _ = crate::io::ensure_dir(path.parent().unwrap_or(std::path::Path::new(".")));
                let _ = file.save(path);
            }
            Ok((outcome.adversarial, acc))
        })();
        let arc = Arc::new(result);
        self.attacks
            .lock()
            .unwrap()
            .entry((mode, subset))
            .or_insert_with(|| Arc::clone(&arc))
            .clone()
    }

    fn purify_cfg(&self, t_star: f64, seed: u64) -> PurifyConfig {
        PurifyConfig {
            t_star,
            dt: self.comps.dt,
            final_step_noiseless: self.comps.final_step_noiseless,
            seed,
        }
    }

    fn purified_clean(&self, t_star: f64, subset: usize, rep: usize) -> std::result::Result<f64, String> {
        let key = (t_star.to_bits(), subset, rep);
        if let Some(hit) = self.purified_clean.lock().unwrap().get(&key) {
            return hit.clone();
        }
        let seed = mix_seed(&[
            self.plan.seeds[rep],
            subset as u64,
            t_star.to_bits(),
            PURIFY_CLEAN_DOMAIN,
        ]);
        let sub = &self.subsets[subset];
        let result = purify(
            &sub.images,
            &self.comps.schedule,
            self.comps.score,
            &self.purify_cfg(t_star, seed),
        )
        .and_then(|p| self.comps.classifier.accuracy_pct(&p, &sub.labels))
        .map_err(|e| e.to_string());
        self.purified_clean
            .lock()
            .unwrap()
            .entry(key)
            .or_insert_with(|| result.clone());
        result
    }

    fn purified_adversarial(
        &self,
        adv: &ImageBatch<T>,
        labels: &[usize],
        mode: AttackMode,
        t_star: f64,
        subset: usize,
        rep: usize,
    ) -> std::result::Result<f64, String> {
        let seed = mix_seed(&[
            self.plan.seeds[rep],
            subset as u64,
            t_star.to_bits(),
            purify_adv_domain(mode),
        ]);
        purify(
            adv,
            &self.comps.schedule,
            self.comps.score,
            &self.purify_cfg(t_star, seed),
        )
        .and_then(|p| self.comps.classifier.accuracy_pct(&p, labels))
        .map_err(|e| e.to_string())
    }

    /// Evaluates one `(mode, t_star, repeat)` cell over every subset.
    fn run_cell(
        &self,
        mode: Option<AttackMode>,
        t_star: f64,
        rep: usize,
    ) -> (Vec<CellRunRecord>, Vec<CellFailure>) {
        let mut records = Vec::with_capacity(self.subsets.len());
        let mut failures = Vec::new();
        let fail = |cause: String, failures: &mut Vec<CellFailure>| {
            failures.push(CellFailure {
                mode,
                t_star,
                repeat: rep,
                cause,
            });
        };
        for subset in 0..self.subsets.len() {
            let (adversarial, purified_adversarial) = match mode {
                None => (None, None),
                Some(mode) => {
                    let attack = self.attack(mode, subset);
                    match attack.as_ref() {
                        Err(cause) => {
                            fail(format!("subset {subset}: attack failed: {cause}"), &mut failures);
                            continue;
                        }
                        Ok((adv, adv_acc)) => {
                            let labels = &self.subsets[subset].labels;
                            match self
                                .purified_adversarial(adv, labels, mode, t_star, subset, rep)
                            {
                                Err(cause) => {
                                    fail(
                                        format!(
                                            "subset {subset}: adversarial purification failed: {cause}"
                                        ),
                                        &mut failures,
                                    );
                                    continue;
                                }
                                Ok(pa) => (Some(*adv_acc), Some(pa)),
                            }
                        }
                    }
                }
            };
            let purified_clean = match self.purified_clean(t_star, subset, rep) {
                Err(cause) => {
                    fail(
                        format!("subset {subset}: clean purification failed: {cause}"),
                        &mut failures,
                    );
                    continue;
                }
                Ok(pc) => pc,
            };
            records.push(CellRunRecord {
                model: self.comps.model_tag.clone(),
                mode,
                t_star,
                subset,
                repeat: rep,
                seed: self.plan.seeds[rep],
                clean: self.clean[subset],
                adversarial,
                purified_clean,
                purified_adversarial,
            });
        }
        (records, failures)
    }
}

/// Evaluates one cell on fresh caches: clean, adversarial, purified-clean,
/// and purified-adversarial accuracy on every subset of the plan. `seed`
/// must be one of `plan.seeds`; attack artifacts are generated once per
/// `(mode, subset)` and reused across the metrics.
pub fn evaluate_cell<T: Scalar>(
    comps: &BenchComponents<'_, T>,
    test: &LabeledBatch<T>,
    mode: Option<AttackMode>,
    t_star: f64,
    plan: &EvalPlan,
    seed: u64,
) -> Result<(Vec<CellRunRecord>, Vec<CellFailure>)> {
    if !(t_star > 0.0 && t_star < 1.0) {
        return Err(Error::invalid(format!(
            "t_star must lie in (0, 1), got {t_star}"
        )));
    }
    let rep = plan
        .seeds
        .iter()
        .position(|&s| s == seed)
        .ok_or_else(|| Error::invalid(format!("seed {seed} is not in the plan's seed list")))?;
    let ctx = SweepCtx::new(comps, plan, test)?;
    Ok(ctx.run_cell(mode, t_star, rep))
}

fn summarize(records: &[CellRunRecord]) -> Vec<SummaryRow> {
    // Group in first-appearance order so summaries are deterministic.
    let mut order: Vec<(Option<AttackMode>, u64)> = Vec::new();
    for r in records {
        let key = (r.mode, r.t_star.to_bits());
        if !order.contains(&key) {
            order.push(key);
        }
    }
    let mut rows = Vec::new();
    for (mode, t_bits) in order {
        let t_star = f64::from_bits(t_bits);
        for metric in Metric::ALL {
            let runs: Vec<f64> = records
                .iter()
                .filter(|r| r.mode == mode && r.t_star.to_bits() == t_bits)
                .filter_map(|r| r.metric(metric))
                .collect();
            if runs.is_empty() {
                continue;
            }
            let n = runs.len() as f64;
            let mean = runs.iter().sum::<f64>() / n;
            let std = if runs.len() > 1 {
                (runs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            rows.push(SummaryRow {
                mode,
                t_star,
                metric,
                runs,
                mean,
                std,
            });
        }
    }
    rows
}

/// Runs the full grid `modes x t_star_list x repeats` (clean-only cells when
/// `modes` is empty), aggregates summaries, and returns the deterministic
/// report plus execution metadata. Partial failures are recorded and skipped
/// in aggregation; the sweep itself keeps going.
pub fn run_sweep<T: Scalar>(
    comps: &BenchComponents<'_, T>,
    plan: &EvalPlan,
    test: &LabeledBatch<T>,
) -> Result<(EvalReport, RunSummary)> {
    let total = Instant::now();
    let ctx = SweepCtx::new(comps, plan, test)?;
    let cell_modes: Vec<Option<AttackMode>> = if plan.modes.is_empty() {
        vec![None]
    } else {
        plan.modes.iter().copied().map(Some).collect()
    };
    let mut jobs = Vec::new();
    for &mode in &cell_modes {
        for &t_star in &plan.t_star_list {
            for rep in 0..plan.repeats {
                jobs.push((mode, t_star, rep));
            }
        }
    }
    let run_job = |&(mode, t_star, rep): &(Option<AttackMode>, f64, usize)| {
        let start = Instant::now();
        let (records, failures) = ctx.run_cell(mode, t_star, rep);
        let timing = CellTiming {
            mode,
            t_star,
            repeat: rep,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        (records, failures, timing)
    };
    let results: Vec<(Vec<CellRunRecord>, Vec<CellFailure>, CellTiming)> =
        if comps.workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(comps.workers)
                .build()
                .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
            pool.install(|| {
                use rayon::prelude::*;
                jobs.par_iter().map(run_job).collect()
            })
        } else {
            jobs.iter().map(run_job).collect()
        };

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut cells = Vec::new();
    for (r, f, t) in results {
        records.extend(r);
        failures.extend(f);
        cells.push(t);
    }
    let summaries = summarize(&records);
    let report = EvalReport {
        schema: EVAL_REPORT_SCHEMA.to_string(),
        model: comps.model_tag.clone(),
        model_hash: comps.model_hash.clone(),
        config_hash: comps.config_hash.clone(),
        plan: plan.clone(),
        records,
        summaries,
        failures,
    };
    let mut versions = BTreeMap::new();
    versions.insert("freqpure".to_string(), env!("CARGO_PKG_VERSION").to_string());
    let summary = RunSummary {
        cells,
        total_wall_ms: total.elapsed().as_millis() as u64,
        versions,
    };
    Ok((report, summary))
}

/// Renders the report as a plain-text table: one row per `(mode, t_star)`,
/// the four metric columns as `mean ± std`.
pub fn render_table(report: &EvalReport) -> String {
    use std::fmt::Write;
    let mut grouped: HashMap<(Option<AttackMode>, u64), [Option<(f64, f64)>; 4]> = HashMap::new();
    let mut order: Vec<(Option<AttackMode>, u64)> = Vec::new();
    for row in &report.summaries {
        let key = (row.mode, row.t_star.to_bits());
        if !grouped.contains_key(&key) {
            order.push(key);
        }
        let slot = grouped.entry(key).or_insert([None; 4]);
        let idx = Metric::ALL.iter().position(|&m| m == row.metric).unwrap();
        slot[idx] = Some((row.mean, row.std));
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "model: {}  weights: {}  config: {}",
        report.model,
        &report.model_hash.get(..12).unwrap_or(&report.model_hash),
        &report.config_hash.get(..12).unwrap_or(&report.config_hash),
    );
    let _ = writeln!(
        out,
        "{:<10} {:>6}  {:>15} {:>15} {:>15} {:>15}",
        "mode", "t*", "clean", "adversarial", "purified-clean", "purified-adv"
    );
    for (mode, t_bits) in order {
        let cells = grouped[&(mode, t_bits)];
        let fmt_cell = |c: Option<(f64, f64)>| match c {
            Some((mean, std)) => format!("{mean:6.2} \u{b1} {std:5.2}"),
            None => "--".to_string(),
        };
        let _ = writeln!(
            out,
            "{:<10} {:>6.3}  {:>15} {:>15} {:>15} {:>15}",
            mode.map_or("(none)", |m| m.name()),
            f64::from_bits(t_bits),
            fmt_cell(cells[0]),
            fmt_cell(cells[1]),
            fmt_cell(cells[2]),
            fmt_cell(cells[3]),
        );
    }
    if !report.failures.is_empty() {
        let _ = writeln!(out, "failed cells: {}", report.failures.len());
        for f in &report.failures {
            let _ = writeln!(
                out,
                "  {} t*={} repeat {}: {}",
                f.mode.map_or("(none)", |m| m.name()),
                f.t_star,
                f.repeat,
                f.cause
            );
        }
    }
    out
}
