//! Experiment orchestration: labelled/unlabelled partitions, repeated-run
//! stability studies and manifest-driven end-to-end pipelines.
//!
//! Every random choice flows from the manifest's base seed through
//! [`seed::derive_seed`]; reports carry the manifest hash and every derived
//! seed, and contain no timestamps or absolute paths, so replaying a
//! manifest reproduces its report byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;
use crate::latent::{self, FeatureBank, FeatureBankConfig, KMeansConfig, LatentMatrix};
use crate::metrics::{self, ClusterReport};
use crate::mixae::{self, MixaeConfig, MixaeWeights, RunStatus, TrainConfig};
use crate::par;
use crate::pipeline::{self, ImageGrid, PreprocessConfig};
use crate::seed;
use crate::simkit::{self, EventCloud, FieldConfig, NoiseConfig, SimDatasetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
    pub fraction: f64,
    pub seed: u64,
}

/// Seeded, class-stratified choice of `round(fraction · n)` labelled events.
///
/// Only events that carry a label can be chosen. Per-class quotas follow the
/// class proportions among labelled events, with leftover slots going to the
/// largest remainders (lowest class id first on ties).
pub fn partition_dataset(labels: &[Option<usize>], fraction: f64, seed: u64) -> Result<Partition> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(format!("labelled fraction must lie in (0, 1], got {fraction}")));
    }
    let n = labels.len();
    let target = (fraction * n as f64).round() as usize;
    if target == 0 {
        return Err(Error::contract(format!("fraction {fraction} of {n} events selects no labelled samples")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            by_class.entry(*c).or_default().push(i);
        }
    }
    let available: usize = by_class.values().map(Vec::len).sum();
    if target > available {
        return Err(Error::contract(format!(
            "{target} labelled samples requested but only {available} events carry labels"
        )));
    }
    let mut quotas: Vec<(usize, usize, f64)> = by_class
        .iter()
        .map(|(c, ids)| {
            let exact = target as f64 * ids.len() as f64 / available as f64;
            (*c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|a, b| quotas[*b].2.total_cmp(&quotas[*a].2).then(quotas[*a].0.cmp(&quotas[*b].0)));
    for i in order.into_iter().take(target - assigned) {
        quotas[i].1 += 1;
    }
    let mut labelled = Vec::with_capacity(target);
    for (c, quota, _) in quotas {
        let mut ids = by_class[&c].clone();
        ids.shuffle(&mut seed::rng_for(seed, "harness/partition", &[c as u64]));
        labelled.extend_from_slice(&ids[..quota]);
    }
    labelled.sort_unstable();
    let mut is_labelled = vec![false; n];
    labelled.iter().for_each(|i| is_labelled[*i] = true);
    let unlabelled = (0..n).filter(|i| !is_labelled[*i]).collect();
    Ok(Partition { labelled, unlabelled, fraction, seed })
}

/// One row of a stability table. `ari` and `accuracy` are missing when the
/// run failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRun {
    pub run: usize,
    pub seed: u64,
    pub status: String,
    pub ari: Option<f64>,
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub runs: Vec<StabilityRun>,
    pub completed: usize,
    pub failed: usize,
    pub top1_run: Option<usize>,
    pub top1_ari: Option<f64>,
    pub top1_accuracy: Option<f64>,
    pub mean_ari: Option<f64>,
    pub std_ari: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// What a single stability run reports back.
#[derive(Clone, Debug, PartialEq)]
pub struct RunScore {
    pub status: String,
    pub ari: f64,
    pub accuracy: f64,
}

pub fn run_seeds(runs: usize, base_seed: u64, purpose: &str) -> Vec<u64> {
    (0..runs as u64).map(|r| seed::derive_seed(base_seed, purpose, &[r])).collect()
}

/// Runs `train` once per seed (in parallel, results in seed order) and
/// summarises with the top-1 and μ±σ convention. Failed runs stay in the
/// table as missing cells and are excluded from the statistics.
pub fn stability_study_with_seeds<F>(seeds: &[u64], train: F) -> Result<StabilityReport>
where
    F: Fn(usize, u64) -> Result<RunScore> + Sync + Send,
{
    if seeds.len() < 2 {
        return Err(Error::contract(format!("a stability study needs N >= 2 runs, got {}", seeds.len())));
    }
    let jobs: Vec<(usize, u64)> = seeds.iter().copied().enumerate().collect();
    let outcomes = par::map(jobs, |(run, s)| (run, s, train(run, s)));
    let mut runs = Vec::with_capacity(seeds.len());
    for (run, s, outcome) in outcomes {
        runs.push(match outcome {
            Ok(score) => StabilityRun {
                run,
                seed: s,
                status: score.status,
                ari: Some(score.ari),
                accuracy: Some(score.accuracy),
                message: None,
            },
            Err(e) => StabilityRun {
                run,
                seed: s,
                status: if matches!(e.root(), Error::Diverged { .. }) { "diverged" } else { "failed" }.to_string(),
                ari: None,
                accuracy: None,
                message: Some(e.to_string()),
            },
        });
    }
    Ok(summarise(runs))
}

pub fn stability_study<F>(runs: usize, base_seed: u64, purpose: &str, train: F) -> Result<StabilityReport>
where
    F: Fn(usize, u64) -> Result<RunScore> + Sync + Send,
{
    stability_study_with_seeds(&run_seeds(runs, base_seed, purpose), train)
}

fn summarise(runs: Vec<StabilityRun>) -> StabilityReport {
    let done: Vec<&StabilityRun> = runs.iter().filter(|r| r.ari.is_some()).collect();
    let failed = runs.len() - done.len();
    let top1 = done.iter().fold(None::<&StabilityRun>, |best, r| match best {
        Some(b) if b.ari >= r.ari => Some(b),
        _ => Some(r),
    });
    let stats = |f: fn(&StabilityRun) -> Option<f64>| {
        let v: Vec<f64> = done.iter().filter_map(|r| f(r)).collect();
        if v.is_empty() {
            (None, None)
        } else {
            let (m, s) = latent::mean_std(&v);
            (Some(m), Some(s))
        }
    };
    let (mean_ari, std_ari) = stats(|r| r.ari);
    let (mean_accuracy, std_accuracy) = stats(|r| r.accuracy);
    StabilityReport {
        completed: done.len(),
        failed,
        top1_run: top1.map(|r| r.run),
        top1_ari: top1.and_then(|r| r.ari),
        top1_accuracy: top1.and_then(|r| r.accuracy),
        mean_ari,
        std_ari,
        mean_accuracy,
        std_accuracy,
        note: (failed > 0)
            .then(|| format!("{failed} of {} runs failed and are excluded from mean and std", runs.len())),
        runs,
    }
}

/// Where events or images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Simulate {
        #[serde(default)]
        config: SimDatasetConfig,
        #[serde(default)]
        field: FieldConfig,
        #[serde(default)]
        noise: NoiseConfig,
    },
    /// A JSONL event file; labels come from the events themselves.
    Events { path: PathBuf },
    /// Preprocessed `ATC1` images with an optional `id,label` CSV.
    Images {
        path: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureStage {
    Standin {
        #[serde(default)]
        bank: FeatureBankConfig,
        #[serde(default = "default_out_dim")]
        out_dim: usize,
    },
    /// Externally extracted `ATL1` latents, one row per event.
    Latents { path: PathBuf },
}

fn default_out_dim() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClusterStage {
    Kmeans {
        #[serde(default)]
        config: KMeansConfig,
    },
    Mixae {
        config: MixaeConfig,
        weights: MixaeWeights,
        #[serde(default)]
        train: TrainConfig,
        runs: usize,
    },
}

fn default_fraction() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub name: String,
    pub seed: u64,
    /// Relative paths resolve against the manifest's directory.
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    /// Share of events whose labels are used for evaluation.
    #[serde(default = "default_fraction")]
    pub labelled_fraction: f64,
    /// Required for k-means, ignored for MIXAE (which reads images).
    #[serde(default)]
    pub features: Option<FeatureStage>,
    pub clustering: ClusterStage,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        formats::read_json(path)
    }

    /// SHA-256 of the manifest's canonical (compact, field-ordered) JSON.
    pub fn hash(&self) -> String {
        seed::sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }

    fn input_files(&self) -> Vec<&Path> {
        let mut files: Vec<&Path> = Vec::new();
        match &self.dataset {
            DatasetSource::Simulate { .. } => {}
            DatasetSource::Events { path } => files.push(path),
            DatasetSource::Images { path, labels } => {
                files.push(path);
                if let Some(l) = labels {
                    files.push(l);
                }
            }
        }
        if let (Some(FeatureStage::Latents { path }), ClusterStage::Kmeans { .. }) = (&self.features, &self.clustering)
        {
            files.push(path);
        }
        files
    }

    /// Structural checks plus existence of every input file, before any compute.
    pub fn preflight(&self, base_dir: &Path) -> Result<()> {
        for f in self.input_files() {
            let p = base_dir.join(f);
            if !p.is_file() {
                return Err(Error::contract(format!("manifest references missing file {}", p.display())));
            }
        }
        self.preprocess.validate()?;
        if !(self.labelled_fraction > 0.0 && self.labelled_fraction <= 1.0) {
            return Err(Error::contract("labelled_fraction must lie in (0, 1]"));
        }
        match &self.clustering {
            ClusterStage::Kmeans { config } => {
                config.validate()?;
                if self.features.is_none() {
                    return Err(Error::contract("k-means clustering needs a features stage"));
                }
            }
            ClusterStage::Mixae { config, weights, train, runs } => {
                config.validate()?;
                weights.validate()?;
                train.validate()?;
                if *runs < 2 {
                    return Err(Error::contract("a MIXAE stability study needs runs >= 2"));
                }
                if !matches!(self.dataset, DatasetSource::Images { .. })
                    && self.preprocess.resolution != config.autoencoder.resolution
                {
                    return Err(Error::contract(format!(
                        "preprocess resolution {} does not match autoencoder resolution {}",
                        self.preprocess.resolution, config.autoencoder.resolution
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub events: usize,
    pub labelled: usize,
    pub unlabelled: usize,
    /// Labelled events per class id.
    pub labelled_per_class: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub name: String,
    pub manifest_sha256: String,
    pub seed: u64,
    pub sub_seeds: BTreeMap<String, u64>,
    pub dataset: DatasetSummary,
    /// Stage name → artifact path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub clustering: String,
    pub stability: StabilityReport,
    /// Full evaluation of the top-1 run on the labelled partition.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1: Option<ClusterReport>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: name.to_string(), source: Box::new(e) })
}

struct Loaded {
    ids: Vec<String>,
    labels: Vec<Option<usize>>,
    events: Option<Vec<EventCloud>>,
    images: Option<Vec<ImageGrid>>,
}

/// Runs every configured stage, writing artifacts into a staging directory
/// that is renamed onto the output directory only after the report is
/// written. On failure the staging directory is left in place and the error
/// names the failing stage.
pub fn run_pipeline(
    manifest: &ExperimentManifest,
    base_dir: &Path,
    output_override: Option<&Path>,
) -> Result<PipelineReport> {
    manifest.preflight(base_dir)?;
    let out = match output_override {
        Some(p) => p.to_path_buf(),
        None => base_dir.join(&manifest.output_dir),
    };
    let staging = formats::sibling(&out, ".partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;

    let report = execute(manifest, base_dir, &staging)?;
    formats::write_json(&staging.join("report.json"), &report)?;
    if out.exists() {
        fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    fs::rename(&staging, &out).map_err(|e| Error::io(&out, e))?;
    Ok(report)
}

fn execute(manifest: &ExperimentManifest, base_dir: &Path, dir: &Path) -> Result<PipelineReport> {
    let base = manifest.seed;
    let mut sub_seeds = BTreeMap::new();
    let mut artifacts = BTreeMap::new();
    let mut sub = |name: &str| {
        let s = seed::derive_seed(base, &format!("harness/{name}"), &[]);
        sub_seeds.insert(name.to_string(), s);
        s
    };
    let sim_seed = sub("simulate");
    let partition_seed = sub("partition");
    let feature_seed = sub("features");
    let cluster_seed = sub("cluster");

    let loaded = stage("load", load_dataset(manifest, base_dir, dir, sim_seed, &mut artifacts))?;
    let images = match (&loaded.images, &loaded.events) {
        (Some(images), _) => images.clone(),
        (None, Some(events)) => {
            let images: Vec<ImageGrid> = stage("preprocess", pipeline::preprocess_all(events, &manifest.preprocess))?
                .into_iter()
                .map(|p| p.image)
                .collect();
            stage("preprocess", formats::write_images(&dir.join("images.atc"), &images))?;
            artifacts.insert("preprocess".into(), "images.atc".into());
            images
        }
        (None, None) => unreachable!("loader yields events or images"),
    };

    let partition = stage("partition", partition_dataset(&loaded.labels, manifest.labelled_fraction, partition_seed))?;
    stage("partition", formats::write_json(&dir.join("partition.json"), &partition))?;
    artifacts.insert("partition".into(), "partition.json".into());
    let mut labelled_per_class = BTreeMap::new();
    for i in &partition.labelled {
        *labelled_per_class.entry(loaded.labels[*i].unwrap()).or_insert(0) += 1;
    }
    let truth: Vec<usize> = partition.labelled.iter().map(|i| loaded.labels[*i].unwrap()).collect();

    // Clustering sees images or latents only; labels enter in `score` below.
    let (kind, assignments_per_run, stability) = match &manifest.clustering {
        ClusterStage::Kmeans { config } => {
            let latents =
                stage("features", features(manifest.features.as_ref().unwrap(), &images, base_dir, feature_seed))?;
            stage("features", formats::write_latents(&dir.join("latents.atl"), &latents))?;
            artifacts.insert("features".into(), "latents.atl".into());
            let cfg = KMeansConfig { rng_seed: cluster_seed, ..config.clone() };
            let runs: Vec<Result<Vec<usize>>> = par::map_range(cfg.n_runs, |run| {
                latent::kmeans_best_of_run(&latents, &cfg, run).map(|r| r.assignments)
            });
            let runs = stage("cluster", runs.into_iter().collect::<Result<Vec<_>>>())?;
            let seeds: Vec<u64> = (0..cfg.n_runs).map(|r| cfg.restart_seed(r, 0)).collect();
            let stability = stage(
                "evaluate",
                stability_study_with_seeds(&seeds, |run, _| score(&runs[run], &partition.labelled, &truth, "ok")),
            )?;
            ("kmeans".to_string(), runs, stability)
        }
        ClusterStage::Mixae { config, weights, train, runs } => {
            let seeds = run_seeds(*runs, cluster_seed, "harness/mixae");
            let outcomes: Vec<Result<(mixae::TrainOutcome, Vec<usize>)>> = par::map(seeds.clone(), |s| {
                let out = mixae::train_mixae(&images, None, config, weights, train, s)?;
                let pred = mixae::assign_clusters(&out.model, &images)?;
                Ok((out, pred))
            });
            let outcomes = stage("cluster", outcomes.into_iter().collect::<Result<Vec<_>>>())?;
            for (run, (out, _)) in outcomes.iter().enumerate() {
                let run_dir = dir.join("runs").join(format!("run{run:02}"));
                fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
                stage("cluster", mixae::write_run_dir(&run_dir, out, weights, train))?;
            }
            artifacts.insert("runs".into(), "runs".into());
            let stability = stage(
                "evaluate",
                stability_study_with_seeds(&seeds, |run, _| {
                    let (out, pred) = &outcomes[run];
                    if out.status == RunStatus::Diverged {
                        return Err(Error::Diverged {
                            epoch: out.history.len(),
                            message: out.message.clone().unwrap_or_else(|| format!("run {run} diverged")),
                        });
                    }
                    score(pred, &partition.labelled, &truth, out.status.as_str())
                }),
            )?;
            let preds = outcomes.into_iter().map(|o| o.1).collect();
            ("mixae".to_string(), preds, stability)
        }
    };
    write_assignments(&dir.join("assignments.csv"), &loaded.ids, &assignments_per_run)?;
    artifacts.insert("cluster".into(), "assignments.csv".into());
    artifacts.insert("evaluate".into(), "report.json".into());

    let top1 = match stability.top1_run {
        Some(run) => {
            let pred: Vec<usize> = partition.labelled.iter().map(|i| assignments_per_run[run][*i]).collect();
            Some(stage("evaluate", metrics::evaluate(&truth, &pred))?)
        }
        None => None,
    };
    Ok(PipelineReport {
        name: manifest.name.clone(),
        manifest_sha256: manifest.hash(),
        seed: base,
        sub_seeds,
        dataset: DatasetSummary {
            events: loaded.labels.len(),
            labelled: partition.labelled.len(),
            unlabelled: partition.unlabelled.len(),
            labelled_per_class,
        },
        artifacts,
        clustering: kind,
        stability,
        top1,
    })
}

fn score(assignments: &[usize], labelled: &[usize], truth: &[usize], status: &str) -> Result<RunScore> {
    let pred: Vec<usize> = labelled.iter().map(|i| assignments[*i]).collect();
    let report = metrics::evaluate(truth, &pred)?;
    Ok(RunScore { status: status.to_string(), ari: report.ari, accuracy: report.accuracy })
}

fn load_dataset(
    manifest: &ExperimentManifest,
    base_dir: &Path,
    dir: &Path,
    sim_seed: u64,
    artifacts: &mut BTreeMap<String, String>,
) -> Result<Loaded> {
    let from_events = |events: Vec<EventCloud>| Loaded {
        ids: events.iter().map(|e| e.id.clone()).collect(),
        labels: events.iter().map(|e| e.label.map(|l| l.index())).collect(),
        events: Some(events),
        images: None,
    };
    match &manifest.dataset {
        DatasetSource::Simulate { config, field, noise } => {
            let cfg = SimDatasetConfig { rng_seed: sim_seed, ..config.clone() };
            let events = simkit::generate_dataset(&cfg, field, noise)?;
            formats::write_events(&dir.join("events.jsonl"), &events)?;
            formats::write_labels(&dir.join("labels.csv"), &formats::event_label_rows(&events))?;
            artifacts.insert("simulate".into(), "events.jsonl".into());
            artifacts.insert("labels".into(), "labels.csv".into());
            Ok(from_events(events))
        }
        DatasetSource::Events { path } => Ok(from_events(formats::read_events(&base_dir.join(path))?)),
        DatasetSource::Images { path, labels } => {
            let images = formats::read_images(&base_dir.join(path))?;
            let (ids, labels) = match labels {
                Some(l) => formats::read_label_ids(&base_dir.join(l))?,
                None => ((0..images.len()).map(|i| i.to_string()).collect(), vec![None; images.len()]),
            };
            if labels.len() != images.len() {
                return Err(Error::contract(format!("{} label rows for {} images", labels.len(), images.len())));
            }
            Ok(Loaded { ids, labels, events: None, images: Some(images) })
        }
    }
}

fn features(stage: &FeatureStage, images: &[ImageGrid], base_dir: &Path, seed: u64) -> Result<LatentMatrix> {
    match stage {
        FeatureStage::Standin { bank, out_dim } => FeatureBank::new(bank.clone(), seed)?.features(images, *out_dim),
        FeatureStage::Latents { path } => {
            let latents = formats::read_latents(&base_dir.join(path))?;
            if latents.rows != images.len() {
                return Err(Error::contract(format!("{} latent rows for {} events", latents.rows, images.len())));
            }
            Ok(latents)
        }
    }
}

/// `id,run0,run1,…` with one cluster id per event and run.
pub fn write_assignments(path: &Path, ids: &[String], runs: &[Vec<usize>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let mut header = vec!["id".to_string()];
    header.extend((0..runs.len()).map(|r| format!("run{r}")));
    w.write_record(&header).map_err(|e| Error::parse(path, e.to_string()))?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(runs.iter().map(|r| r[i].to_string()));
        w.write_record(&row).map_err(|e| Error::parse(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
