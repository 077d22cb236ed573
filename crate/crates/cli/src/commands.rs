use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use spiralcluster::harness::{self, ClusterStage, ExperimentManifest, PipelineReport, RunScore, StabilityReport};
use spiralcluster::latent::{self, FeatureBank, FeatureBankConfig, KMeansConfig};
use spiralcluster::mixae::{
    self, AutoencoderConfig, GridSearchSpec, MixaeConfig, MixaeWeights, RunStatus, TrainConfig,
};
use spiralcluster::neuralcore::AdamConfig;
use spiralcluster::pipeline::{self, PreprocessConfig};
use spiralcluster::simkit::{self, ClassCounts, FieldConfig, NoiseConfig, SimDatasetConfig};
use spiralcluster::{formats, metrics, Error, Result};

use crate::{
    Cli, Command, EvaluateArgs, FeaturesArgs, KmeansArgs, MixaeCommand, ModelArgs, PreprocessArgs, SimulateArgs,
    StabilityArgs, WeightArgs,
};

/// Exit code for a run that diverged or collapsed.
const EXIT_UNSTABLE: u8 = 3;

struct Globals {
    seed: u64,
    out: Option<PathBuf>,
    manifest: Option<PathBuf>,
}

impl Globals {
    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::contract("--out is required for this command"))
    }

    fn manifest(&self) -> Result<(ExperimentManifest, PathBuf)> {
        let path =
            self.manifest.as_deref().ok_or_else(|| Error::contract("--manifest is required for this command"))?;
        let manifest = ExperimentManifest::load(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((manifest, base))
    }
}

pub fn run(cli: Cli) -> Result<u8> {
    let explicit_seed = cli.seed;
    let g = Globals { seed: cli.seed.unwrap_or(0), out: cli.out, manifest: cli.manifest };
    match cli.command {
        Command::Simulate(a) => simulate(&g, a),
        Command::Preprocess(a) => preprocess(&g, a),
        Command::Features(a) => features(&g, a),
        Command::Kmeans(a) => kmeans(&g, a),
        Command::Mixae(c) => match c {
            MixaeCommand::Train { model, weights } => mixae_train(&g, &model, &weights),
            MixaeCommand::Grid { model, spec, runs_per_cell } => mixae_grid(&g, &model, spec.as_deref(), runs_per_cell),
            MixaeCommand::Stability { model, weights, runs } => mixae_stability(&g, &model, &weights, runs),
        },
        Command::Evaluate(a) => evaluate(&g, a),
        Command::Pipeline(_) => pipeline_cmd(&g, explicit_seed, None),
        Command::Stability(StabilityArgs { runs }) => pipeline_cmd(&g, explicit_seed, Some(runs)),
    }
}

fn labels_sidecar(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| out.with_extension("labels.csv"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn simulate(g: &Globals, a: SimulateArgs) -> Result<u8> {
    let out = g.out()?;
    let config = SimDatasetConfig {
        counts: ClassCounts { proton: a.proton, carbon: a.carbon, other: a.other },
        rng_seed: g.seed,
        ..Default::default()
    };
    let field = FieldConfig { b_field: a.b_field, ..Default::default() };
    let noise = NoiseConfig { uniform_count: a.noise_points, structured_arc_count: a.noise_arcs, ..Default::default() };
    let events = simkit::generate_dataset(&config, &field, &noise)?;
    ensure_parent(out)?;
    formats::write_events(out, &events)?;
    let labels = labels_sidecar(out, a.labels_out);
    formats::write_labels(&labels, &formats::event_label_rows(&events))?;
    println!("wrote {} events to {} (labels: {})", events.len(), out.display(), labels.display());
    Ok(0)
}

fn preprocess(g: &Globals, a: PreprocessArgs) -> Result<u8> {
    let out = g.out()?;
    let config = PreprocessConfig {
        resolution: a.resolution,
        bounds: a.bounds,
        apply_nn_filter: a.nn_filter,
        nn_radius: a.nn_radius,
        nn_min_neighbors: a.nn_min_neighbors,
        apply_hough: a.hough,
        ..Default::default()
    };
    config.validate()?;
    let events = formats::read_events(&a.events)?;
    let processed = pipeline::preprocess_all(&events, &config)?;
    let degenerate = processed.iter().filter(|p| p.degenerate).count();
    let hough_warnings = processed.iter().filter(|p| p.hough_warning).count();
    let images: Vec<_> = processed.into_iter().map(|p| p.image).collect();
    ensure_parent(out)?;
    formats::write_images(out, &images)?;
    let labels = labels_sidecar(out, a.labels_out);
    formats::write_labels(&labels, &formats::event_label_rows(&events))?;
    println!(
        "wrote {} {r}x{r} images to {} ({degenerate} blank, {hough_warnings} without a Hough circle)",
        images.len(),
        out.display(),
        r = config.resolution
    );
    Ok(0)
}

fn features(g: &Globals, a: FeaturesArgs) -> Result<u8> {
    let out = g.out()?;
    let images = formats::read_images(&a.images)?;
    let mut latents = FeatureBank::new(FeatureBankConfig::default(), g.seed)?.features(&images, a.out_dim)?;
    if let Some(n) = a.pca {
        let p = latent::pca(&latents, n)?;
        let kept: f64 = p.explained_ratio.iter().sum();
        println!("PCA to {n} components keeps {:.1}% of the variance", kept * 100.0);
        latents = p.projected;
    }
    ensure_parent(out)?;
    formats::write_latents(out, &latents)?;
    println!("wrote {}x{} latents to {}", latents.rows, latents.dim, out.display());
    Ok(0)
}

fn write_pred(path: &Path, ids: &[String], assignments: &[usize]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(["id", "cluster"]).map_err(err)?;
    for (id, c) in ids.iter().zip(assignments) {
        w.write_record([id.as_str(), &c.to_string()]).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn kmeans(g: &Globals, a: KmeansArgs) -> Result<u8> {
    let out = g.out()?;
    let mut data = formats::read_latents(&a.latents)?;
    if let Some(n) = a.pca {
        data = latent::pca(&data, n)?.projected;
    }
    let config = KMeansConfig { k: a.k, m_inits: a.m_inits, n_runs: a.n_runs, rng_seed: g.seed, ..Default::default() };
    config.validate()?;
    let (ids, run) = match &a.labels {
        Some(path) => {
            let (ids, labels) = formats::read_label_ids(path)?;
            let stats = latent::kmeans_experiment(&data, &labels, &config)?;
            ensure_parent(out)?;
            formats::write_json(out, &stats)?;
            println!(
                "{}",
                table(
                    stats.top1.ari,
                    stats.top1.accuracy,
                    stats.mean_ari,
                    stats.std_ari,
                    stats.mean_accuracy,
                    stats.std_accuracy
                )
            );
            (ids, stats.top1_run)
        }
        None => {
            // Without labels the lowest-inertia run is the only defensible pick.
            let runs = (0..config.n_runs)
                .map(|r| latent::kmeans_best_of_run(&data, &config, r).map(|c| (r, c.inertia)))
                .collect::<Result<Vec<_>>>()?;
            let best = runs.iter().min_by(|x, y| x.1.total_cmp(&y.1)).map(|r| r.0).unwrap_or(0);
            let summary: Vec<_> =
                runs.iter().map(|(run, inertia)| serde_json::json!({ "run": run, "inertia": inertia })).collect();
            ensure_parent(out)?;
            formats::write_json(out, &serde_json::json!({ "runs": summary, "selected_run": best }))?;
            println!("no labels given; selected run {best} by inertia");
            ((0..data.rows).map(|i| i.to_string()).collect(), best)
        }
    };
    if let Some(pred) = &a.pred {
        let chosen = latent::kmeans_best_of_run(&data, &config, run)?;
        write_pred(pred, &ids, &chosen.assignments)?;
    }
    Ok(0)
}

fn model_config(m: &ModelArgs, resolution: usize) -> MixaeConfig {
    MixaeConfig::new(
        m.k,
        AutoencoderConfig { resolution, filters: m.filters.clone(), latent_dim: m.latent_dim, ..Default::default() },
    )
}

fn train_config(m: &ModelArgs) -> TrainConfig {
    TrainConfig {
        epochs: m.epochs,
        batch_size: m.batch,
        adam: AdamConfig { eta: m.lr, ..Default::default() },
        clip_norm: (m.clip > 0.0).then_some(m.clip),
        ..Default::default()
    }
}

fn weights(w: &WeightArgs) -> MixaeWeights {
    MixaeWeights { theta: w.theta, alpha: w.alpha, gamma: w.gamma }
}

struct TrainingData {
    images: Vec<spiralcluster::pipeline::ImageGrid>,
    labels: Option<Vec<Option<usize>>>,
    config: MixaeConfig,
    train: TrainConfig,
}

fn load_training(m: &ModelArgs) -> Result<TrainingData> {
    let images = formats::read_images(&m.images)?;
    let resolution = images.first().map(|i| i.height).ok_or_else(|| Error::contract("image file is empty"))?;
    let labels = match &m.labels {
        Some(p) => Some(formats::read_label_ids(p)?.1),
        None => None,
    };
    let config = model_config(m, resolution);
    config.validate()?;
    let train = train_config(m);
    train.validate()?;
    Ok(TrainingData { images, labels, config, train })
}

fn mixae_train(g: &Globals, m: &ModelArgs, w: &WeightArgs) -> Result<u8> {
    let out = g.out()?;
    let data = load_training(m)?;
    let w = weights(w);
    let outcome = mixae::train_mixae(&data.images, data.labels.as_deref(), &data.config, &w, &data.train, g.seed)?;
    mixae::write_run_dir(out, &outcome, &w, &data.train)?;
    if let Some(last) = outcome.history.last() {
        println!("epoch {}: total {:.6e} (r {:.6e}, s {:.4}, b {:.4})", last.epoch, last.total, last.r, last.s, last.b);
    }
    if let Some(r) = &outcome.report {
        println!("ARI {:.4}, accuracy {:.4}", r.ari, r.accuracy);
    }
    println!("status {}; run written to {}", outcome.status.as_str(), out.display());
    Ok(if outcome.status == RunStatus::Ok { 0 } else { EXIT_UNSTABLE })
}

fn mixae_grid(g: &Globals, m: &ModelArgs, spec: Option<&Path>, runs_per_cell: usize) -> Result<u8> {
    let out = g.out()?;
    let data = load_training(m)?;
    let spec = match spec {
        Some(p) => formats::read_json(p)?,
        None => GridSearchSpec::decades(),
    };
    let result = mixae::grid_search(
        &data.images,
        data.labels.as_deref(),
        &data.config,
        &data.train,
        &spec,
        runs_per_cell,
        g.seed,
    )?;
    ensure_parent(out)?;
    formats::write_json(out, &result)?;
    match result.best_cell {
        Some(c) => {
            let w = result.cells[c].weights;
            println!(
                "best cell {c} by {}: theta {:e}, alpha {:e}, gamma {:e}",
                result.best_by, w.theta, w.alpha, w.gamma
            );
            Ok(0)
        }
        None => {
            println!("every grid run diverged");
            Ok(EXIT_UNSTABLE)
        }
    }
}

fn mixae_stability(g: &Globals, m: &ModelArgs, w: &WeightArgs, runs: usize) -> Result<u8> {
    let out = g.out()?;
    let data = load_training(m)?;
    let labels =
        data.labels.as_deref().ok_or_else(|| Error::contract("mixae stability scores runs and needs --labels"))?;
    let w = weights(w);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = harness::stability_study(runs, g.seed, "cli/mixae", |run, seed| {
        let outcome = mixae::train_mixae(&data.images, Some(labels), &data.config, &w, &data.train, seed)?;
        mixae::write_run_dir(&out.join(format!("run{run:02}")), &outcome, &w, &data.train)?;
        if outcome.status == RunStatus::Diverged {
            return Err(Error::Diverged { epoch: outcome.history.len(), message: outcome.message.unwrap_or_default() });
        }
        let r = outcome.report.ok_or_else(|| Error::contract("no labelled events to score"))?;
        Ok(RunScore { status: outcome.status.as_str().to_string(), ari: r.ari, accuracy: r.accuracy })
    })?;
    formats::write_json(&out.join("stability.json"), &report)?;
    print_stability(&report);
    Ok(if report.completed == 0 { EXIT_UNSTABLE } else { 0 })
}

/// Reads an id-keyed CSV and returns (ids, column values) for `column`, or
/// for the first column after the id when none is named.
fn read_pred(path: &Path, column: Option<&str>) -> Result<(Vec<String>, Vec<usize>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::parse(path, e.to_string()))?.clone();
    let col = match column {
        Some(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::parse(path, format!("no column named {name:?}")))?,
        None if headers.len() >= 2 => 1,
        None => return Err(Error::parse(path, "expected an id column and a cluster column")),
    };
    let (mut ids, mut pred) = (Vec::new(), Vec::new());
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
        let value = record.get(col).unwrap_or("").trim();
        let cluster = value.parse().map_err(|_| {
            Error::parse(path, format!("row {}: cluster {value:?} is not a non-negative integer", line + 2))
        })?;
        ids.push(record.get(0).unwrap_or("").to_string());
        pred.push(cluster);
    }
    Ok((ids, pred))
}

fn evaluate(g: &Globals, a: EvaluateArgs) -> Result<u8> {
    let out = g.out()?;
    let (truth_ids, truth) = formats::read_label_ids(&a.truth)?;
    let (pred_ids, pred) = read_pred(&a.pred, a.column.as_deref())?;
    let by_id: HashMap<&str, usize> = pred_ids.iter().map(String::as_str).zip(pred.iter().copied()).collect();
    if by_id.len() != pred_ids.len() {
        return Err(Error::parse(&a.pred, "duplicate ids"));
    }
    // Score every labelled truth row; each needs a prediction.
    let (mut y_true, mut y_pred) = (Vec::new(), Vec::new());
    for (id, label) in truth_ids.iter().zip(&truth) {
        if let Some(l) = label {
            let p = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::contract(format!("no prediction for labelled id {id:?}")))?;
            y_true.push(*l);
            y_pred.push(*p);
        }
    }
    let report = metrics::evaluate(&y_true, &y_pred)?;
    ensure_parent(out)?;
    formats::write_json(out, &report)?;
    println!("n {}, accuracy {:.4}, ARI {:.4}", report.n, report.accuracy, report.ari);
    Ok(0)
}

fn pipeline_cmd(g: &Globals, seed: Option<u64>, runs: Option<Option<usize>>) -> Result<u8> {
    let (mut manifest, base) = g.manifest()?;
    if let Some(s) = seed {
        manifest.seed = s;
    }
    if let Some(Some(n)) = runs {
        match &mut manifest.clustering {
            ClusterStage::Kmeans { config } => config.n_runs = n,
            ClusterStage::Mixae { runs, .. } => *runs = n,
        }
    }
    let report: PipelineReport = harness::run_pipeline(&manifest, &base, g.out.as_deref())?;
    let out = g.out.clone().unwrap_or_else(|| base.join(&manifest.output_dir));
    println!(
        "{}: {} events, {} labelled; report in {}",
        report.name,
        report.dataset.events,
        report.dataset.labelled,
        out.join("report.json").display()
    );
    if runs.is_some() {
        for r in &report.stability.runs {
            match (r.ari, r.accuracy) {
                (Some(ari), Some(acc)) => println!("run {:>3}  {:<9} ARI {ari:.4}  accuracy {acc:.4}", r.run, r.status),
                _ => println!("run {:>3}  {}", r.run, r.status),
            }
        }
    }
    print_stability(&report.stability);
    Ok(if report.stability.completed == 0 { EXIT_UNSTABLE } else { 0 })
}

fn table(top_ari: f64, top_acc: f64, mean_ari: f64, std_ari: f64, mean_acc: f64, std_acc: f64) -> String {
    format!(
        "          ARI              accuracy\nTop 1     {top_ari:.4}           {top_acc:.4}\nmean±std  {mean_ari:.4}±{std_ari:.4}    {mean_acc:.4}±{std_acc:.4}"
    )
}

fn print_stability(r: &StabilityReport) {
    let f = |v: Option<f64>| v.unwrap_or(f64::NAN);
    println!(
        "{}",
        table(f(r.top1_ari), f(r.top1_accuracy), f(r.mean_ari), f(r.std_ari), f(r.mean_accuracy), f(r.std_accuracy))
    );
    if r.failed > 0 {
        println!("{} of {} runs failed", r.failed, r.runs.len());
    }
}
