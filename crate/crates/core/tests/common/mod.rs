#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spiralcluster::mixae::{self, MixaeModel, MixaeWeights};
use spiralcluster::neuralcore::{LayerSpec, Network, Tensor};
use spiralcluster::pipeline::{self, ImageGrid, PreprocessConfig};
use spiralcluster::simkit::{self, ClassCounts, EventCloud, FieldConfig, NoiseConfig, SimDatasetConfig};

pub const FD_STEP: f64 = 1e-5;
pub const FD_COORDS: usize = 64;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely: the central
/// difference carries roundoff of order 1e-11 times the loss scale.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(len: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates redrawn because a ±h step flipped an LReLU input sign.
    pub redrawn: usize,
    pub max_rel: f64,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.max_rel = self.max_rel.max(relative_error(analytic, numeric));
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel <= FD_TOLERANCE
    }
}

/// Signs of every LReLU input in one forward pass.
pub fn lrelu_signs(net: &Network, input: &Tensor) -> Vec<bool> {
    let cache = net.forward(input).unwrap();
    let mut signs = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        if matches!(layer.spec, LayerSpec::Lrelu { .. }) {
            signs.extend(cache.activations[l].data.iter().map(|v| *v > 0.0));
        }
    }
    signs
}

fn probe_loss(net: &Network, input: &Tensor, probe: &[f64]) -> f64 {
    let out = net.forward(input).unwrap();
    out.output().data.iter().zip(probe).map(|(y, c)| y * c).sum()
}

/// Central differences of `L = Σ c ⊙ net(x)` against `backward`, on
/// `FD_COORDS` random parameters and `FD_COORDS` random input entries.
pub fn check_network(net: &Network, input: &Tensor, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let cache = net.forward(input).unwrap();
    let probe = uniform(cache.output().data.len(), -1.0, 1.0, &mut r);
    let grad_out = Tensor::new(cache.output().shape.clone(), probe.clone()).unwrap();
    let (grads, dx) = net.backward(&cache, &grad_out).unwrap();
    let base = lrelu_signs(net, input);
    let mut report = GradCheck::default();

    if net.param_count() > 0 {
        let mut work = net.clone();
        let mut done = 0;
        while done < FD_COORDS {
            let i = r.gen_range(0..net.param_count());
            let orig = work.params()[i];
            work.params_mut()[i] = orig + FD_STEP;
            let (plus, s_plus) = (probe_loss(&work, input, &probe), lrelu_signs(&work, input));
            work.params_mut()[i] = orig - FD_STEP;
            let (minus, s_minus) = (probe_loss(&work, input, &probe), lrelu_signs(&work, input));
            work.params_mut()[i] = orig;
            if s_plus != base || s_minus != base {
                report.redrawn += 1;
                assert!(report.redrawn < 10 * FD_COORDS, "too many coordinates sit on LReLU kinks");
                continue;
            }
            report.record(grads[i], (plus - minus) / (2.0 * FD_STEP));
            done += 1;
        }
    }

    let mut x = input.clone();
    let mut done = 0;
    while done < FD_COORDS {
        let i = r.gen_range(0..x.data.len());
        let orig = x.data[i];
        x.data[i] = orig + FD_STEP;
        let (plus, s_plus) = (probe_loss(net, &x, &probe), lrelu_signs(net, &x));
        x.data[i] = orig - FD_STEP;
        let (minus, s_minus) = (probe_loss(net, &x, &probe), lrelu_signs(net, &x));
        x.data[i] = orig;
        if s_plus != base || s_minus != base {
            report.redrawn += 1;
            assert!(report.redrawn < 10 * FD_COORDS, "too many coordinates sit on LReLU kinks");
            continue;
        }
        report.record(dx.data[i], (plus - minus) / (2.0 * FD_STEP));
        done += 1;
    }
    report
}

fn mixae_signs(model: &MixaeModel, batch: &Tensor) -> Vec<bool> {
    let fwd = mixae::mixae_forward(model, batch).unwrap();
    let mut signs = Vec::new();
    for j in 0..model.config.k {
        signs.extend(lrelu_signs(&model.encoders[j], batch));
        signs.extend(lrelu_signs(&model.decoders[j], &fwd.latents[j]));
    }
    let b = batch.batch();
    let dim = model.config.autoencoder.latent_dim;
    let mut concat = Vec::with_capacity(b * dim * model.config.k);
    for s in 0..b {
        for z in &fwd.latents {
            concat.extend_from_slice(z.sample(s));
        }
    }
    let concat = Tensor::new(vec![b, dim * model.config.k], concat).unwrap();
    signs.extend(lrelu_signs(&model.assigner, &concat));
    signs
}

/// Central differences of the full MIXAE loss on `FD_COORDS` random
/// parameters drawn across all networks.
///
/// Each term is differenced before weighting. With γ = 1e5 the total sits
/// near -6e4, where one ulp over 2h is already ~4e-7 and swamps the small
/// decoder gradients; θΔr + αΔs + γΔb is the same difference without that
/// cancellation.
pub fn check_mixae(model: &MixaeModel, batch: &Tensor, weights: &MixaeWeights, seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let (_, grads, _) = mixae::mixae_loss_and_grads(model, batch, weights).unwrap();
    let base = mixae_signs(model, batch);
    let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let loss = |m: &MixaeModel| {
        let fwd = mixae::mixae_forward(m, batch).unwrap();
        mixae::mixae_loss(&fwd, batch, weights).unwrap()
    };
    let mut work = model.clone();
    let mut report = GradCheck::default();
    let mut done = 0;
    while done < FD_COORDS {
        let mut flat = r.gen_range(0..total);
        let mut net = 0;
        while flat >= sizes[net] {
            flat -= sizes[net];
            net += 1;
        }
        let orig = work.networks()[net].params()[flat];
        work.networks_mut()[net].params_mut()[flat] = orig + FD_STEP;
        let (plus, s_plus) = (loss(&work), mixae_signs(&work, batch));
        work.networks_mut()[net].params_mut()[flat] = orig - FD_STEP;
        let (minus, s_minus) = (loss(&work), mixae_signs(&work, batch));
        work.networks_mut()[net].params_mut()[flat] = orig;
        if s_plus != base || s_minus != base {
            report.redrawn += 1;
            assert!(report.redrawn < 10 * FD_COORDS, "too many coordinates sit on LReLU kinks");
            continue;
        }
        let diff = weights.theta * (plus.reconstruction - minus.reconstruction)
            + weights.alpha * (plus.sample_entropy - minus.sample_entropy)
            + weights.gamma * (plus.batch_entropy - minus.batch_entropy);
        report.record(grads[net][flat], diff / (2.0 * FD_STEP));
        done += 1;
    }
    report
}

pub fn two_class_events(proton: usize, carbon: usize, seed: u64) -> Vec<EventCloud> {
    let cfg =
        SimDatasetConfig { counts: ClassCounts { proton, carbon, other: 0 }, rng_seed: seed, ..Default::default() };
    simkit::generate_dataset(&cfg, &FieldConfig::default(), &NoiseConfig::default()).unwrap()
}

pub fn images(events: &[EventCloud], resolution: usize) -> Vec<ImageGrid> {
    let cfg = PreprocessConfig { resolution, ..Default::default() };
    pipeline::preprocess_all(events, &cfg).unwrap().into_iter().map(|p| p.image).collect()
}

pub fn labels(events: &[EventCloud]) -> Vec<Option<usize>> {
    events.iter().map(|e| e.label.map(|l| l.index())).collect()
}

/// Pair-counting Rand statistics straight from the definition: every pair of
/// samples is visited once.
pub fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut neither) = (0i128, 0i128, 0i128, 0i128);
    for i in 0..n {
        for j in i + 1..n {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1,
                (true, false) => only_a += 1,
                (false, true) => only_b += 1,
                (false, false) => neither += 1,
            }
        }
    }
    // Hubert-Arabie pair form: 2(ad - bc) / ((a + b)(b + d) + (a + c)(c + d)).
    let (a, b, c, d) = (both, only_a, only_b, neither);
    let den = (a + b) * (b + d) + (a + c) * (c + d);
    if den == 0 {
        1.0
    } else {
        (2 * (a * d - b * c)) as f64 / den as f64
    }
}

/// Every permutation of `0..n`, in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Worst relative deviation of the orbit from the analytic circle over one
/// drag-free period at dt = T/1000. The centre comes from the initial state
/// alone: `c = x + (v_y, -v_x)/ω` with `ω = qB/m`.
pub fn cyclotron_radius_error(particle: &simkit::ParticleSpec, b: f64) -> f64 {
    let field = FieldConfig { b_field: b, drag_coefficient: 0.0, drag_exponent: 1.0 };
    let geom = simkit::DetectorGeometry { radius: 1e4, length: 1e4 };
    let period = particle.cyclotron_period(b);
    let dt = period / 1000.0;
    let omega = particle.charge_coulomb() * b / particle.mass_kg();
    let radius = particle.momentum() * particle.polar_angle.sin() / (particle.charge_coulomb().abs() * b);
    let accel = |_: &[f64; 3], v: &[f64; 3]| field.acceleration(particle, v);
    let v = particle.initial_speed();
    let (st, ct) = particle.polar_angle.sin_cos();
    let (sp, cp) = particle.azimuthal_angle.sin_cos();
    let mut state = [
        particle.vertex[0] * 1e-3,
        particle.vertex[1] * 1e-3,
        particle.vertex[2] * 1e-3,
        v * st * cp,
        v * st * sp,
        v * ct,
    ];
    assert!(geom.contains_mm(&particle.vertex));
    let centre = [state[0] + state[4] / omega, state[1] - state[3] / omega];
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        state = simkit::rk4_step(&state, dt, accel).unwrap();
        let r = ((state[0] - centre[0]).powi(2) + (state[1] - centre[1]).powi(2)).sqrt();
        worst = worst.max((r - radius).abs() / radius);
    }
    worst
}

/// Integrates `tracks` seeded particles with drag for up to `steps` steps and
/// returns the number of steps at which kinetic energy failed to decrease.
pub fn energy_increases(tracks: usize, steps: usize, seed: u64) -> (usize, usize) {
    let field = FieldConfig::default();
    let geom = simkit::DetectorGeometry { radius: 1e6, length: 1e6 };
    let opts = simkit::IntegrationOptions { steps_per_timescale: 2000.0, max_steps: steps, ..Default::default() };
    let mut r = rng(seed);
    let (mut violations, mut total) = (0, 0);
    for t in 0..tracks {
        let energy = r.gen_range(0.5..3.0);
        let polar = r.gen_range(0.2..0.8) * std::f64::consts::PI;
        let azimuth = r.gen_range(0.0..std::f64::consts::TAU);
        let vertex = [0.0, 0.0, 5e5];
        let p = if t % 2 == 0 {
            simkit::ParticleSpec::proton(energy, polar, azimuth, vertex)
        } else {
            simkit::ParticleSpec::carbon(energy, polar, azimuth, vertex)
        }
        .unwrap();
        let traj = simkit::integrate_track(&p, &field, &geom, &opts).unwrap();
        let ke: Vec<f64> = traj.states.iter().map(|s| s[3] * s[3] + s[4] * s[4] + s[5] * s[5]).collect();
        total += ke.len() - 1;
        violations += ke.windows(2).filter(|w| !(w[1] < w[0])).count();
    }
    (violations, total)
}

/// Best matched-count accuracy by trying every cluster→class relabeling
/// (a permutation of the padded square id space).
pub fn accuracy_brute(y_true: &[usize], y_pred: &[usize]) -> f64 {
    let kt = y_true.iter().max().map_or(0, |m| m + 1);
    let kp = y_pred.iter().max().map_or(0, |m| m + 1);
    let m = kt.max(kp);
    let mut best = 0;
    for perm in permutations(m) {
        let hits = y_true.iter().zip(y_pred).filter(|(t, p)| perm[**p] == **t).count();
        best = best.max(hits);
    }
    best as f64 / y_true.len() as f64
}

/// Minimum total cost over all `min(rows, cols)`-sized one-to-one assignments.
pub fn assignment_brute(cost: &[Vec<f64>]) -> f64 {
    let (r, c) = (cost.len(), cost[0].len());
    let m = r.max(c);
    permutations(m)
        .into_iter()
        .map(|p| (0..r).filter(|i| p[*i] < c).map(|i| cost[i][p[i]]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}
