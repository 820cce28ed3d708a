//! Central finite-difference gradient checks.

use gfr_core::detect::{
    generate_priors, match_priors, multibox_loss, predict_heads, GroundTruth, MatchResult, MATCH_THRESHOLD,
};
use gfr_core::gate::{apply_gate, GateInit, GateParams};
use gfr_core::layers::Conv;
use gfr_core::pyramid::{downsample_path, new_features, upsample_path, Backbone, Bottleneck, Pyramid};
use gfr_core::tensor::ParamTensor;
use gfr_core::{Detector, FeatureMap, ModelConfig, ParamStore, PyramidConfig, Result, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error. Central-difference roundoff is
/// about ulp(loss) / EPS, near 1e-10 for losses of order 10, so gradients
/// below the floor are compared absolutely at 1e-9.
pub const REL_FLOOR: f64 = 1e-5;
/// Coordinates checked per tensor.
pub const SAMPLES: usize = 8;
pub const SEEDS: u64 = 10;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose +-EPS step changed a ReLU sign, a max-pool argmax or
    /// the mined negative set; the difference quotient straddles a kink there.
    pub skipped: usize,
    pub worst: String,
}

impl GradReport {
    fn new() -> Self {
        Self {
            max_rel: 0.0,
            checked: 0,
            skipped: 0,
            worst: String::new(),
        }
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        if rel > self.max_rel || self.checked == 1 {
            self.max_rel = rel;
            self.worst = format!("{} analytic {analytic:e} numeric {numeric:e}", what());
        }
    }
}

pub struct Eval {
    pub loss: f64,
    /// Gradient of every input, filled on backward evaluations.
    pub input_grads: Vec<Vec<f64>>,
    /// Which smooth piece the evaluation lies on.
    pub pattern: Vec<usize>,
}

/// A scalar function of some input maps and a parameter store.
pub trait Objective {
    /// With `backward`, also accumulates parameter gradients into `store`.
    fn eval(&self, store: &mut ParamStore, inputs: &[FeatureMap], backward: bool) -> Result<Eval>;
}

/// `sum(w * f(inputs))` for a tape graph `f` and fixed random weights `w`.
pub struct Weighted<F> {
    pub f: F,
    pub weight_seed: u64,
}

fn weights(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn input_grads(tape: &Tape, vars: &[Var], inputs: &[FeatureMap]) -> Vec<Vec<f64>> {
    vars.iter()
        .zip(inputs)
        .map(|(v, x)| tape.grad(*v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
        .collect()
}

/// Marks the priors whose class row enters the loss, so a change in the
/// mined negatives shows up in the pattern.
fn loss_pattern(grad_logits: &[f64], num_labels: usize) -> Vec<usize> {
    grad_logits
        .chunks(num_labels)
        .map(|row| usize::from(row.iter().any(|&g| g != 0.0)))
        .collect()
}

impl<F> Objective for Weighted<F>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    fn eval(&self, store: &mut ParamStore, inputs: &[FeatureMap], backward: bool) -> Result<Eval> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|x| tape.input(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = (self.f)(&mut tape, store, &vars)?;
        let y = tape.value(out).data().to_vec();
        let w = weights(self.weight_seed, y.len());
        let loss = y.iter().zip(&w).map(|(a, b)| a * b).sum();
        let pattern = tape.switch_pattern();
        if !backward {
            return Ok(Eval {
                loss,
                input_grads: Vec::new(),
                pattern,
            });
        }
        tape.backward(vec![(out, w)], store)?;
        Ok(Eval {
            loss,
            input_grads: input_grads(&tape, &vars, inputs),
            pattern,
        })
    }
}

fn sample_indices(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    if len <= SAMPLES {
        (0..len).collect()
    } else {
        (0..4 * SAMPLES).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Central difference of `objective` along one coordinate, or `None` when the
/// step leaves the smooth piece of the unperturbed point.
fn difference(
    objective: &dyn Objective,
    store: &mut ParamStore,
    inputs: &[FeatureMap],
    pattern: &[usize],
    mut set: impl FnMut(&mut ParamStore, &mut [FeatureMap], f64),
) -> Result<Option<f64>> {
    let mut inputs = inputs.to_vec();
    set(store, &mut inputs, EPS);
    let up = objective.eval(store, &inputs, false)?;
    set(store, &mut inputs, -EPS);
    let down = objective.eval(store, &inputs, false)?;
    set(store, &mut inputs, 0.0);
    if up.pattern != pattern || down.pattern != pattern {
        return Ok(None);
    }
    Ok(Some((up.loss - down.loss) / (2.0 * EPS)))
}

/// Compares analytic and central-difference gradients at up to `SAMPLES`
/// sampled coordinates of every input and every parameter tensor.
pub fn check(
    objective: &dyn Objective,
    store: &mut ParamStore,
    inputs: &[FeatureMap],
    seed: u64,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    store.zero_grads();
    let base = objective.eval(store, inputs, true)?;
    let param_grads: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grads();
    let mut report = GradReport::new();

    for i in 0..inputs.len() {
        let mut done = 0;
        for j in sample_indices(&mut rng, inputs[i].len()) {
            if done == SAMPLES {
                break;
            }
            let x0 = inputs[i].data()[j];
            let numeric = difference(objective, store, inputs, &base.pattern, |_, xs, d| {
                xs[i].data_mut()[j] = x0 + d
            })?;
            match numeric {
                Some(n) => {
                    report.record(|| format!("input {i}[{j}]"), base.input_grads[i][j], n);
                    done += 1;
                }
                None => report.skipped += 1,
            }
        }
    }
    let ids: Vec<_> = (0..store.len()).map(gfr_core::ParamId).collect();
    for id in ids {
        let mut done = 0;
        for j in sample_indices(&mut rng, store.get(id).len()) {
            if done == SAMPLES {
                break;
            }
            let w0 = store.get(id).values[j];
            let numeric = difference(objective, store, inputs, &base.pattern, |s, _, d| {
                s.get_mut(id).values[j] = w0 + d
            })?;
            match numeric {
                Some(n) => {
                    let name = &store.get(id).name;
                    report.record(|| format!("{name}[{j}]"), param_grads[id.0][j], n);
                    done += 1;
                }
                None => report.skipped += 1,
            }
        }
    }
    Ok(report)
}

pub fn random_map(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> FeatureMap {
    let n = shape.iter().product();
    FeatureMap::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero, so ReLU kinks stay further than
/// `EPS` from every sample.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> FeatureMap {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    FeatureMap::from_vec(shape, data).unwrap()
}

fn random_param(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> gfr_core::ParamId {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    store.insert(ParamTensor::from_values(name, shape, values).unwrap())
}

fn run<F>(seed: u64, mut store: ParamStore, inputs: Vec<FeatureMap>, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    check(&Weighted { f, weight_seed: seed }, &mut store, &inputs, seed)
}

pub fn conv_case(seed: u64, k: usize, stride: usize, pad: usize, size: [usize; 2]) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (ci, co) = (3, 4);
    let w = random_param(&mut store, &mut rng, "w", &[co, ci, k, k]);
    let b = random_param(&mut store, &mut rng, "b", &[co]);
    let x = random_map(&mut rng, [2, ci, size[0], size[1]]);
    run(seed, store, vec![x], move |t, s, v| {
        t.conv2d(s, v[0], w, b, stride, pad)
    })
}

pub fn maxpool_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_map(&mut rng, [2, 3, 5, 7]);
    run(seed, ParamStore::new(), vec![x], |t, _, v| t.maxpool2d(v[0], 2, 2))
}

pub fn upsample_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_map(&mut rng, [2, 2, 3, 4]);
    run(seed, ParamStore::new(), vec![x], |t, _, v| t.bilinear_upsample2x(v[0]))
}

pub fn crop_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_map(&mut rng, [2, 2, 6, 6]);
    run(seed, ParamStore::new(), vec![x], |t, _, v| t.crop(v[0], 5, 4))
}

pub fn global_avg_pool_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_map(&mut rng, [2, 3, 4, 5]);
    run(seed, ParamStore::new(), vec![x], |t, _, v| t.global_avg_pool(v[0]))
}

pub fn fully_connected_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let w = random_param(&mut store, &mut rng, "w", &[5, 7]);
    let b = random_param(&mut store, &mut rng, "b", &[5]);
    let x = random_map(&mut rng, [3, 7, 1, 1]);
    run(seed, store, vec![x], move |t, s, v| t.fully_connected(s, v[0], w, b))
}

pub fn sigmoid_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = FeatureMap::from_vec([2, 3, 2, 2], (0..24).map(|_| rng.random_range(-6.0..6.0)).collect())?;
    run(seed, ParamStore::new(), vec![x], |t, _, v| t.sigmoid(v[0]))
}

pub fn relu_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = away_from_zero(&mut rng, [2, 3, 3, 3]);
    run(seed, ParamStore::new(), vec![x], |t, _, v| t.relu(v[0]))
}

pub fn concat_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = vec![
        random_map(&mut rng, [2, 1, 3, 3]),
        random_map(&mut rng, [2, 3, 3, 3]),
        random_map(&mut rng, [2, 2, 3, 3]),
    ];
    run(seed, ParamStore::new(), xs, |t, _, v| t.concat_channels(v))
}

pub fn channel_scale_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = vec![random_map(&mut rng, [2, 3, 3, 4]), random_map(&mut rng, [2, 3, 1, 1])];
    run(seed, ParamStore::new(), xs, |t, _, v| t.channel_scale(v[0], v[1]))
}

pub fn scalar_scale_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = vec![random_map(&mut rng, [2, 3, 3, 4]), random_map(&mut rng, [2, 1, 1, 1])];
    run(seed, ParamStore::new(), xs, |t, _, v| t.scalar_scale(v[0], v[1]))
}

pub fn add_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = vec![random_map(&mut rng, [2, 3, 3, 4]), random_map(&mut rng, [2, 3, 3, 4])];
    run(seed, ParamStore::new(), xs, |t, _, v| t.add(v[0], v[1]))
}

pub fn gate_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gate = GateParams::new(&mut store, "gate", 48, GateInit::Xavier, &mut rng);
    // Nonzero biases so every term of the gate carries gradient.
    for id in [gate.b_reduce, gate.b_channel, gate.b_global] {
        for v in &mut store.get_mut(id).values {
            *v = rng.random_range(0.05..0.5);
        }
    }
    let x = random_map(&mut rng, [2, 48, 3, 3]);
    run(seed, store, vec![x], move |t, s, v| {
        Ok(apply_gate(t, s, v[0], &gate)?.output)
    })
}

pub fn bottleneck_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = Bottleneck::new(&mut store, "b", 4, 3, 5, &mut rng);
    let x = random_map(&mut rng, [2, 4, 5, 5]);
    run(seed, store, vec![x], move |t, s, v| new_features(t, s, v[0], &block))
}

pub fn downsample_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let proj = Conv::pointwise(&mut store, "down", 3, 2, &mut rng);
    let x = random_map(&mut rng, [2, 3, 12, 12]);
    run(seed, store, vec![x], move |t, s, v| {
        downsample_path(t, s, v[0], &proj, 3)
    })
}

pub fn upsample_path_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let proj = Conv::pointwise(&mut store, "up", 3, 2, &mut rng);
    let x = random_map(&mut rng, [2, 3, 3, 3]);
    run(seed, store, vec![x], move |t, s, v| upsample_path(t, s, v[0], &proj, 5))
}

/// Multibox loss as a function of logits and deltas.
pub struct MultiboxObjective {
    pub num_labels: usize,
    pub matches: Vec<MatchResult>,
}

impl Objective for MultiboxObjective {
    fn eval(&self, _: &mut ParamStore, inputs: &[FeatureMap], _: bool) -> Result<Eval> {
        let out = multibox_loss(inputs[0].data(), inputs[1].data(), self.num_labels, &self.matches)?;
        Ok(Eval {
            loss: out.loss,
            pattern: loss_pattern(&out.grad_logits, self.num_labels),
            input_grads: vec![out.grad_logits, out.grad_deltas],
        })
    }
}

pub fn small_pyramid_config() -> PyramidConfig {
    PyramidConfig {
        input_size: 48,
        scale_sizes: vec![6, 3, 2],
        channels_per_scale: 12,
        bottleneck_channels: 4,
        backbone_channels: vec![4, 6, 8, 8, 8],
        ..PyramidConfig::default()
    }
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        pyramid: small_pyramid_config(),
        ..ModelConfig::default()
    }
}

fn random_ground_truth(rng: &mut ChaCha8Rng, n: usize) -> Vec<GroundTruth> {
    (0..n)
        .map(|_| {
            let (w, h) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6));
            let (x, y) = (rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h));
            GroundTruth {
                class_id: rng.random_range(0..3),
                bbox: gfr_core::detect::BBox::new(x, y, x + w, y + h),
            }
        })
        .collect()
}

pub fn multibox_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let priors = generate_priors(&small_model_config().prior_config());
    let matches: Vec<MatchResult> = (0..2)
        .map(|i| match_priors(&priors, &random_ground_truth(&mut rng, i + 1), MATCH_THRESHOLD))
        .collect();
    let np = priors.len();
    let logits = random_map(&mut rng, [2, np, 4, 1]);
    let deltas = FeatureMap::from_vec(
        [2, np, 4, 1],
        (0..2 * np * 4).map(|_| rng.random_range(-2.5..2.5)).collect(),
    )?;
    let mut store = ParamStore::new();
    check(
        &MultiboxObjective { num_labels: 4, matches },
        &mut store,
        &[logits, deltas],
        seed,
    )
}

/// Backbone, gated reuse pyramid, head and multibox loss end to end.
pub struct DetectorObjective {
    pub backbone: Backbone,
    pub pyramid: Pyramid,
    pub head: gfr_core::detect::DetectHead,
    pub config: PyramidConfig,
    pub matches: Vec<MatchResult>,
    /// Replace the multibox loss by a fixed random weighting of the outputs.
    pub weighted_outputs: bool,
}

impl Objective for DetectorObjective {
    fn eval(&self, store: &mut ParamStore, inputs: &[FeatureMap], backward: bool) -> Result<Eval> {
        let mut tape = Tape::new();
        let image = tape.input(inputs[0].clone())?;
        let taps = self.backbone.forward(&mut tape, store, image, &self.config)?;
        let state = self.pyramid.build(&mut tape, store, &taps, &self.config)?;
        let vars = predict_heads(&mut tape, store, &state, &self.head)?;
        let logits = vars.class_logits(&tape, &self.head);
        let deltas = vars.box_deltas(&tape, &self.head);
        let out = if self.weighted_outputs {
            let wl = weights(1, logits.len());
            let wd = weights(2, deltas.len());
            let loss = logits
                .iter()
                .zip(&wl)
                .chain(deltas.iter().zip(&wd))
                .map(|(a, b)| a * b)
                .sum();
            gfr_core::detect::LossOutput {
                loss,
                cls_loss: 0.0,
                loc_loss: 0.0,
                num_positives: 0,
                grad_logits: wl,
                grad_deltas: wd,
            }
        } else {
            multibox_loss(&logits, &deltas, self.head.num_labels, &self.matches)?
        };
        let mut pattern = tape.switch_pattern();
        pattern.extend(loss_pattern(&out.grad_logits, self.head.num_labels));
        if !backward {
            return Ok(Eval {
                loss: out.loss,
                input_grads: Vec::new(),
                pattern,
            });
        }
        let seeds = vars.seeds(&tape, &self.head, &out.grad_logits, &out.grad_deltas);
        tape.backward(seeds, store)?;
        Ok(Eval {
            loss: out.loss,
            input_grads: input_grads(&tape, &[image], inputs),
            pattern,
        })
    }
}

pub fn detector_objective(seed: u64, config: ModelConfig) -> Result<(DetectorObjective, ParamStore, FeatureMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let Detector {
        config,
        mut store,
        backbone,
        pyramid,
        head,
        priors,
    } = Detector::new(config, seed)?;
    // Nonzero biases exercise every gate term and keep pre-activations
    // over dead regions off the ReLU kink.
    for p in store.iter_mut().filter(|p| p.name.ends_with(".bias")) {
        for v in &mut p.values {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let size = config.pyramid.input_size;
    let image = random_map(&mut rng, [2, 3, size, size]);
    let matches = (0..2)
        .map(|i| match_priors(&priors, &random_ground_truth(&mut rng, i + 1), MATCH_THRESHOLD))
        .collect();
    Ok((
        DetectorObjective {
            backbone,
            pyramid,
            head,
            config: config.pyramid,
            matches,
            weighted_outputs: false,
        },
        store,
        image,
    ))
}

pub fn detector_case(seed: u64) -> Result<GradReport> {
    let (objective, mut store, image) = detector_objective(seed, small_model_config())?;
    check(&objective, &mut store, &[image], seed)
}

pub fn detector_weighted_case(seed: u64) -> Result<GradReport> {
    let (mut objective, mut store, image) = detector_objective(seed, small_model_config())?;
    objective.weighted_outputs = true;
    check(&objective, &mut store, &[image], seed)
}

pub type Case = (&'static str, fn(u64) -> Result<GradReport>);

/// Every differentiable operation plus the composed graph.
pub fn cases() -> Vec<Case> {
    vec![
        ("conv2d 3x3 stride 1 pad 1", |s| conv_case(s, 3, 1, 1, [5, 6])),
        ("conv2d 3x3 stride 2 pad 1", |s| conv_case(s, 3, 2, 1, [7, 5])),
        ("conv2d 1x1", |s| conv_case(s, 1, 1, 0, [4, 3])),
        ("maxpool2d 2x2 ceil", maxpool_case),
        ("bilinear_upsample2x", upsample_case),
        ("crop", crop_case),
        ("global_avg_pool", global_avg_pool_case),
        ("fully_connected", fully_connected_case),
        ("sigmoid", sigmoid_case),
        ("relu", relu_case),
        ("concat_channels", concat_case),
        ("channel_scale", channel_scale_case),
        ("scalar_scale", scalar_scale_case),
        ("add", add_case),
        ("apply_gate", gate_case),
        ("new_features", bottleneck_case),
        ("downsample_path", downsample_case),
        ("upsample_path", upsample_path_case),
        ("multibox_loss", multibox_case),
        ("gate + pyramid + head", detector_case),
        ("weighted outputs", detector_weighted_case),
    ]
}
