use serde_json::json;
use spiralcluster::latent::{self, KMeansConfig};
use spiralcluster::pipeline::{self, PreprocessConfig};
use spiralcluster::simkit::{self, ClassCounts, FieldConfig, NoiseConfig, SimDatasetConfig, Species};
use spiralcluster::{metrics, seed};

/// Largest dataset the clustering demo accepts; keeps the page responsive.
pub const MAX_DEMO_EVENTS: usize = 400;

pub fn render_event(
    species: &str,
    b_field: f64,
    noise_points: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<f32>, String> {
    let species = Species::parse(species).ok_or_else(|| format!("unknown species {species:?}"))?;
    let config = SimDatasetConfig { rng_seed: seed, ..Default::default() };
    let field = FieldConfig { b_field, ..Default::default() };
    let noise = NoiseConfig { uniform_count: noise_points, ..Default::default() };
    let event = simkit::generate_event(0, species, &config, &field, &noise).map_err(|e| e.to_string())?;
    let pre = PreprocessConfig { resolution, ..Default::default() };
    let image = pipeline::preprocess_event(&event, &pre).map_err(|e| e.to_string())?.image;
    Ok(image.values.iter().map(|v| *v as f32).collect())
}

fn parse_ids(name: &str, text: &str) -> Result<Vec<usize>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("{name}: {s:?} is not a non-negative integer")))
        .collect()
}

pub fn score_labels(truth: &str, pred: &str) -> Result<String, String> {
    let t = parse_ids("truth", truth)?;
    let p = parse_ids("prediction", pred)?;
    let report = metrics::evaluate(&t, &p).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

pub fn cluster_demo(
    protons: usize,
    carbons: usize,
    resolution: usize,
    runs: usize,
    base_seed: u64,
) -> Result<String, String> {
    if protons + carbons > MAX_DEMO_EVENTS {
        return Err(format!("the demo handles at most {MAX_DEMO_EVENTS} events"));
    }
    let config = SimDatasetConfig {
        counts: ClassCounts { proton: protons, carbon: carbons, other: 0 },
        rng_seed: seed::derive_seed(base_seed, "web/simulate", &[]),
        ..Default::default()
    };
    let err = |e: spiralcluster::Error| e.to_string();
    let events = simkit::generate_dataset(&config, &FieldConfig::default(), &NoiseConfig::default()).map_err(err)?;
    let pre = PreprocessConfig { resolution, ..Default::default() };
    let images: Vec<_> = pipeline::preprocess_all(&events, &pre).map_err(err)?.into_iter().map(|p| p.image).collect();
    let latents =
        latent::standin_features(&images, 64, seed::derive_seed(base_seed, "web/features", &[])).map_err(err)?;
    let labels: Vec<Option<usize>> = events.iter().map(|e| e.label.map(|l| l.index())).collect();
    let km = KMeansConfig {
        k: 2,
        m_inits: 5,
        n_runs: runs,
        rng_seed: seed::derive_seed(base_seed, "web/kmeans", &[]),
        ..Default::default()
    };
    let stats = latent::kmeans_experiment(&latents, &labels, &km).map_err(err)?;
    Ok(json!({
        "events": events.len(),
        "top1_ari": stats.top1.ari,
        "top1_accuracy": stats.top1.accuracy,
        "mean_ari": stats.mean_ari,
        "std_ari": stats.std_ari,
        "mean_accuracy": stats.mean_accuracy,
        "std_accuracy": stats.std_accuracy,
        "runs": stats.runs,
        "contingency": stats.top1.contingency,
    })
    .to_string())
}
