//! Runtime self-test suite behind `etlnet verify`: finite-difference
//! gradient checks for every layer and a miniature whole model, convolution
//! causality mutation tests, a brute-force metrics oracle, and the
//! preprocessing invariants. One [`Check`] per property.

use crate::dataio::{self, Feature, WindowOptions};
use crate::error::Result;
use crate::gradcheck::{central_diff, max_rel_err, DEFAULT_STEP};
use crate::layers::{batchnorm, conv, dense, dropout, lstm, Activation, Mode};
use crate::model::{build_model, ModelConfig, VariantName};
use crate::numcore::{Precision, Rng, Tensor};
use crate::train::MetricsReport;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Check {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

const LAYER_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

fn check_grad(name: &str, analytic: &Tensor, numeric: &Tensor, tol: f64) -> Result<Check> {
    let err = max_rel_err(analytic, numeric)?;
    Ok(Check::new(
        name,
        err < tol,
        format!("max rel err {err:.3e} (tolerance {tol:.0e})"),
    ))
}

/// Gradient checks for every layer kind, three random shapes each.
pub fn gradient_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut checks = Vec::new();
    let p = Precision::Extended;

    // Dilated causal convolution.
    for (i, (b, t, ci, co, k, d)) in [(1, 8, 2, 3, 3, 2), (2, 6, 1, 2, 2, 1), (1, 9, 3, 2, 3, 4)]
        .into_iter()
        .enumerate()
    {
        let params = conv::ConvParams::init(ci, co, k, d, &mut rng, p)?;
        let x = rng.uniform_tensor(&[b, t, ci], -1.0, 1.0, p)?;
        let dy = rng.uniform_tensor(&[b, t, co], -1.0, 1.0, p)?;
        let (_, cache) = conv::forward(&x, &params)?;
        let grads = conv::backward(&dy, &cache, &params)?;
        let num_w = central_diff(
            &params.weight,
            |w| {
                let p2 = conv::ConvParams {
                    weight: w.clone(),
                    bias: params.bias.clone(),
                    dilation: d,
                    kernel: k,
                };
                Ok(dot(&conv::forward(&x, &p2)?.0, &dy))
            },
            DEFAULT_STEP,
        )?;
        checks.push(check_grad(
            &format!("grad.conv.weight.shape{i}"),
            &grads.weight,
            &num_w,
            LAYER_TOL,
        )?);
        let num_x = central_diff(&x, |xi| Ok(dot(&conv::forward(xi, &params)?.0, &dy)), DEFAULT_STEP)?;
        checks.push(check_grad(
            &format!("grad.conv.input.shape{i}"),
            &grads.input,
            &num_x,
            LAYER_TOL,
        )?);
    }

    // Batch normalization (train mode, batch statistics path).
    for (i, shape) in [vec![4, 3], vec![2, 5, 2], vec![3, 4, 4]].into_iter().enumerate() {
        let channels = *shape.last().unwrap();
        let mut state = batchnorm::BatchNormState::init(channels, 0.1, 1e-5, p)?;
        state.gamma = rng.uniform_tensor(&[channels], 0.5, 1.5, p)?;
        let x = rng.uniform_tensor(&shape, -2.0, 2.0, p)?;
        let dy = rng.uniform_tensor(&shape, -1.0, 1.0, p)?;
        let (_, cache) = batchnorm::forward(&x, &mut state.clone(), Mode::Train)?;
        let grads = batchnorm::backward(&dy, &cache, &state)?;
        let num = central_diff(
            &x,
            |xi| {
                let mut s2 = state.clone();
                Ok(dot(&batchnorm::forward(xi, &mut s2, Mode::Train)?.0, &dy))
            },
            DEFAULT_STEP,
        )?;
        checks.push(check_grad(
            &format!("grad.batchnorm.input.shape{i}"),
            &grads.input,
            &num,
            LAYER_TOL,
        )?);
    }

    // Dropout: backward gradient is zero exactly where the mask zeroed.
    for (i, n) in [40usize, 80, 120].into_iter().enumerate() {
        let x = rng.uniform_tensor(&[n], -1.0, 1.0, p)?;
        let (y, cache) = dropout::forward(&x, 0.4, &mut Rng::new(seed + i as u64), Mode::Train)?;
        let dy = Tensor::full(&[n], 1.0, p);
        let dx = dropout::backward(&dy, &cache)?;
        let consistent = y
            .data()
            .iter()
            .zip(dx.data())
            .all(|(&yv, &gv)| (yv == 0.0) == (gv == 0.0));
        checks.push(Check::new(
            &format!("grad.dropout.mask.shape{i}"),
            consistent,
            "mask and gradient zeros coincide".into(),
        ));
    }

    // LSTM backpropagation through time (both directions among the shapes).
    for (i, (b, t, ci, h, reverse)) in [(1, 4, 2, 3, false), (2, 3, 3, 2, true), (1, 5, 1, 2, false)]
        .into_iter()
        .enumerate()
    {
        let params = lstm::LstmParams::init(ci, h, &mut rng, p)?;
        let x = rng.uniform_tensor(&[b, t, ci], -1.0, 1.0, p)?;
        let dh_seq = rng.uniform_tensor(&[b, t, h], -1.0, 1.0, p)?;
        let dh_last = rng.uniform_tensor(&[b, h], -1.0, 1.0, p)?;
        let (_, _, cache) = lstm::forward(&x, &params, reverse)?;
        let grads = lstm::backward(Some(&dh_seq), Some(&dh_last), &cache, &params)?;
        let num = central_diff(
            &x,
            |xi| {
                let (seq, last, _) = lstm::forward(xi, &params, reverse)?;
                Ok(dot(&seq, &dh_seq) + dot(&last, &dh_last))
            },
            DEFAULT_STEP,
        )?;
        checks.push(check_grad(
            &format!("grad.lstm.input.shape{i}"),
            &grads.input,
            &num,
            LAYER_TOL,
        )?);
        let num_w = central_diff(
            &params.input_gate.w,
            |w| {
                let mut p2 = params.clone();
                p2.input_gate.w = w.clone();
                let (seq, last, _) = lstm::forward(&x, &p2, reverse)?;
                Ok(dot(&seq, &dh_seq) + dot(&last, &dh_last))
            },
            DEFAULT_STEP,
        )?;
        checks.push(check_grad(
            &format!("grad.lstm.weight.shape{i}"),
            &grads.params.input_gate.w,
            &num_w,
            LAYER_TOL,
        )?);
    }

    // BiLSTM final-state form.
    for (i, (b, t, ci, h)) in [(1, 4, 2, 2), (2, 3, 1, 3), (1, 6, 3, 2)].into_iter().enumerate() {
        let pf = lstm::LstmParams::init(ci, h, &mut rng, p)?;
        let pb = lstm::LstmParams::init(ci, h, &mut rng, p)?;
        let x = rng.uniform_tensor(&[b, t, ci], -1.0, 1.0, p)?;
        let dout = rng.uniform_tensor(&[b, 2 * h], -1.0, 1.0, p)?;
        let (_, cache) = lstm::bilstm_fwd(&x, &pf, &pb)?;
        let grads = lstm::bilstm_bwd(&dout, &cache, &pf, &pb)?;
        let num = central_diff(
            &x,
            |xi| Ok(dot(&lstm::bilstm_fwd(xi, &pf, &pb)?.0, &dout)),
            DEFAULT_STEP,
        )?;
        checks.push(check_grad(
            &format!("grad.bilstm.input.shape{i}"),
            &grads.input,
            &num,
            LAYER_TOL,
        )?);
    }

    // Dense with each activation.
    for (i, (b, ci, co, act)) in [
        (2, 3, 4, Activation::None),
        (3, 5, 2, Activation::Relu),
        (4, 2, 1, Activation::Sigmoid),
    ]
    .into_iter()
    .enumerate()
    {
        let params = dense::DenseParams::init(ci, co, &mut rng, p)?;
        let x = rng.uniform_tensor(&[b, ci], -1.0, 1.0, p)?;
        let dy = rng.uniform_tensor(&[b, co], -1.0, 1.0, p)?;
        let (_, cache) = dense::forward(&x, &params, act)?;
        let grads = dense::backward(&dy, &cache, &params)?;
        let num_w = central_diff(
            &params.weight,
            |w| {
                let p2 = dense::DenseParams {
                    weight: w.clone(),
                    bias: params.bias.clone(),
                };
                Ok(dot(&dense::forward(&x, &p2, act)?.0, &dy))
            },
            DEFAULT_STEP,
        )?;
        checks.push(check_grad(
            &format!("grad.dense.weight.shape{i}"),
            &grads.weight,
            &num_w,
            LAYER_TOL,
        )?);
        let num_x = central_diff(&x, |xi| Ok(dot(&dense::forward(xi, &params, act)?.0, &dy)), DEFAULT_STEP)?;
        checks.push(check_grad(
            &format!("grad.dense.input.shape{i}"),
            &grads.input,
            &num_x,
            LAYER_TOL,
        )?);
    }

    // Standalone activations over three shapes.
    for (i, shape) in [vec![6], vec![2, 5], vec![2, 3, 4]].into_iter().enumerate() {
        let x = rng.uniform_tensor(&shape, -2.0, 2.0, p)?;
        let dy = rng.uniform_tensor(&shape, -1.0, 1.0, p)?;
        use crate::layers::activation as act;
        let (_, cache) = act::relu_fwd(&x)?;
        let analytic = act::relu_bwd(&dy, &cache)?;
        let num = central_diff(&x, |xi| Ok(dot(&act::relu_fwd(xi)?.0, &dy)), DEFAULT_STEP)?;
        checks.push(check_grad(&format!("grad.relu.shape{i}"), &analytic, &num, LAYER_TOL)?);
        let (_, cache) = act::sigmoid_fwd(&x)?;
        let analytic = act::sigmoid_bwd(&dy, &cache)?;
        let num = central_diff(&x, |xi| Ok(dot(&act::sigmoid_fwd(xi)?.0, &dy)), DEFAULT_STEP)?;
        checks.push(check_grad(&format!("grad.sigmoid.shape{i}"), &analytic, &num, LAYER_TOL)?);
    }

    // Miniature whole model: 20 sampled parameters against the loss.
    checks.push(whole_model_check(seed)?);
    Ok(checks)
}

fn whole_model_check(seed: u64) -> Result<Check> {
    let mut cfg = ModelConfig::for_variant(VariantName::Etlnet);
    cfg.window = 16;
    cfg.tcn_filters = 4;
    cfg.lstm_hidden = 4;
    cfg.dense_hidden = 4;
    cfg.dropout_rate = 0.0;
    let mut model = build_model(&cfg, &mut Rng::new(seed), Precision::Extended)?;
    let mut rng = Rng::new(seed ^ 0x5555);
    let x = rng.uniform_tensor(&[4, 16, 7], -1.0, 1.0, Precision::Extended)?;
    let y = Tensor::from_data(&[4], vec![1.0, 0.0, 1.0, 0.0], Precision::Extended)?;

    let (p, cache) = model.forward(&x, Mode::Train, &mut Rng::new(0))?;
    let (_, d_p) = crate::train::bce_loss(&p, &y)?;
    let grads = model.backward(&d_p, &cache)?;
    let n_params = grads.len();

    let mut worst = 0.0f64;
    let h = 1e-5;
    for probe in 0..20 {
        let ti = rng.next_index(n_params);
        let ei = rng.next_index(model.trainable()[ti].1.len().max(1));
        let orig = model.trainable()[ti].1.data()[ei];
        let set = |model: &mut crate::model::Model, v: f64| -> Result<()> {
            let t = &mut model.trainable_mut()[ti];
            let mut data = t.data().to_vec();
            data[ei] = v;
            **t = Tensor::from_data(t.shape(), data, Precision::Extended)?;
            Ok(())
        };
        let loss_now = |model: &mut crate::model::Model| -> Result<f64> {
            let (p, _) = model.forward(&x, Mode::Train, &mut Rng::new(0))?;
            Ok(crate::train::bce_loss(&p, &y)?.0)
        };
        set(&mut model, orig + h)?;
        let plus = loss_now(&mut model)?;
        set(&mut model, orig - h)?;
        let minus = loss_now(&mut model)?;
        set(&mut model, orig)?;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[ti].data()[ei];
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        let rel = ((analytic - numeric) / denom).abs();
        if rel > worst {
            worst = rel;
        }
        let _ = probe;
    }
    Ok(Check::new(
        "grad.whole_model.sampled20",
        worst < MODEL_TOL,
        format!("max rel err {worst:.3e} over 20 sampled parameters (tolerance {MODEL_TOL:.0e})"),
    ))
}

/// Convolution outputs at time t must be independent of inputs after t,
/// for kernel sizes 1..3 and dilations 1, 2, 4.
pub fn causality_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut checks = Vec::new();
    for k in [1usize, 2, 3] {
        for d in [1usize, 2, 4] {
            let p = conv::ConvParams::init(2, 3, k, d, &mut rng, Precision::Extended)?;
            let x = rng.uniform_tensor(&[1, 12, 2], -1.0, 1.0, Precision::Extended)?;
            let (y, _) = conv::forward(&x, &p)?;
            let mut ok = true;
            for t_mut in 1..12usize {
                let mut data = x.data().to_vec();
                data[t_mut * 2] += 5.0;
                data[t_mut * 2 + 1] -= 3.0;
                let x2 = Tensor::from_data(&[1, 12, 2], data, Precision::Extended)?;
                let (y2, _) = conv::forward(&x2, &p)?;
                for t in 0..t_mut {
                    for f in 0..3 {
                        if y.data()[t * 3 + f] != y2.data()[t * 3 + f] {
                            ok = false;
                        }
                    }
                }
            }
            checks.push(Check::new(
                &format!("causality.conv.k{k}.d{d}"),
                ok,
                "earlier outputs unchanged under later-input mutation".into(),
            ));
        }
    }
    Ok(checks)
}

/// Metrics against a brute-force confusion-matrix enumerator on 1,000
/// randomized prediction sets, plus the published-arithmetic spot checks.
pub fn metrics_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut exact = true;
    for _ in 0..1000 {
        let n = 1 + rng.next_index(60);
        let probs: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let labels: Vec<f64> = (0..n)
            .map(|_| if rng.next_f64() < 0.5 { 1.0 } else { 0.0 })
            .collect();
        let thr = rng.next_f64();
        let m = MetricsReport::from_predictions(&probs, &labels, thr)?;
        let mut tp = 0;
        let mut fp = 0;
        let mut tn = 0;
        let mut fn_ = 0;
        for i in 0..n {
            match (probs[i] >= thr, labels[i] == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        if (m.confusion.tp, m.confusion.fp, m.confusion.tn, m.confusion.fn_) != (tp, fp, tn, fn_) {
            exact = false;
        }
        let n_total = m.confusion.total();
        if n_total != n {
            exact = false;
        }
    }
    let mut checks = vec![Check::new(
        "metrics.brute_force_1000",
        exact,
        "confusion counts match the enumerator exactly".into(),
    )];

    let f1: f64 = 2.0 * 0.9946 * 0.9919 / (0.9946 + 0.9919);
    checks.push(Check::new(
        "metrics.f1_published_point",
        (f1 - 0.9933).abs() <= 1e-4,
        format!("F1(0.9946, 0.9919) = {f1:.6}, within 1e-4 of 0.9933"),
    ));
    let mean = (0.9880 + 0.9857 + 0.9830) / 3.0;
    checks.push(Check::new(
        "metrics.table_average_rendering",
        crate::experiments::render_percent(mean) == "98.56",
        format!("mean renders as {}", crate::experiments::render_percent(mean)),
    ));
    Ok(checks)
}

/// Windowing count formula, balancing parity, split disjointness, and the
/// degenerate-normalizer convention.
pub fn preprocessing_checks(seed: u64) -> Result<Vec<Check>> {
    let mut rng = Rng::new(seed);
    let mut checks = Vec::new();

    let mut formula_ok = true;
    for _ in 0..200 {
        let len = 1 + rng.next_index(400);
        let w = 1 + rng.next_index(50);
        let s = 1 + rng.next_index(40);
        let records = flat_trace(len);
        let opts = WindowOptions {
            window: w,
            stride: s,
            threshold: 0.15,
            features: Feature::ALL.to_vec(),
        };
        let ws = dataio::make_windows(&records, &opts, Precision::Standard)?;
        let expect = if len < w { 0 } else { (0..=len - w).filter(|i| i % s == 0).count() };
        if ws.len() != expect {
            formula_ok = false;
        }
    }
    checks.push(Check::new(
        "prep.window_count_formula_200",
        formula_ok,
        "floor((len-W)/S)+1 matches brute-force enumeration".into(),
    ));

    // Balance parity on an unbalanced synthetic set.
    let mut records = Vec::new();
    for i in 0..60 {
        let bumps = if i < 12 { 1..7 } else { 0..0 };
        records.extend(labeled_trace(&format!("t{i}"), 8, bumps));
    }
    let opts = WindowOptions {
        window: 8,
        stride: 8,
        threshold: 0.5,
        features: Feature::ALL.to_vec(),
    };
    let ws = dataio::make_windows(&records, &opts, Precision::Standard)?;
    let balanced = dataio::balance_classes(&ws, &mut Rng::new(seed))?;
    let (pos, neg) = balanced.class_counts();
    checks.push(Check::new(
        "prep.balance_exact_parity",
        pos == neg && pos > 0,
        format!("{pos} positive vs {neg} negative after balancing"),
    ));

    // Split disjointness over nine traces.
    let mut records = Vec::new();
    for i in 0..9 {
        records.extend(labeled_trace(&format!("pvs{i}"), 40, 10..20));
    }
    let mut split_ok = true;
    for index in 0..9 {
        let out = dataio::split(
            &records,
            &dataio::SplitSpec::LeaveOneOut { index },
            &dataio::PrepareOptions {
                scheme: dataio::NormScheme::MinMax,
                window: WindowOptions {
                    window: 10,
                    stride: 5,
                    threshold: 0.15,
                    features: Feature::ALL.to_vec(),
                },
                precision: Precision::Standard,
            },
            &mut Rng::new(seed),
        )?;
        let train: std::collections::BTreeSet<_> =
            out.train.provenance.iter().map(|(t, _)| t.clone()).collect();
        let val: std::collections::BTreeSet<_> =
            out.val.provenance.iter().map(|(t, _)| t.clone()).collect();
        if !train.is_disjoint(&val) || val.len() != 1 {
            split_ok = false;
        }
    }
    checks.push(Check::new(
        "prep.split_disjointness_loo9",
        split_ok,
        "train and validation trace sets never intersect".into(),
    ));

    // Degenerate feature handling.
    let mut constant = flat_trace(5);
    let stats = dataio::fit_normalizer(&constant, dataio::NormScheme::MinMax, "train")?;
    dataio::apply_normalizer(&mut constant, &stats);
    let all_finite_zero_speed = constant.iter().all(|r| r.speed == 0.0);
    checks.push(Check::new(
        "prep.degenerate_feature_to_zero",
        all_finite_zero_speed,
        "constant features normalize to 0 without division errors".into(),
    ));
    Ok(checks)
}

fn flat_trace(len: usize) -> Vec<dataio::SampleRecord> {
    labeled_trace("t", len, 0..0)
}

fn labeled_trace(
    trace: &str,
    len: usize,
    bumps: std::ops::Range<usize>,
) -> Vec<dataio::SampleRecord> {
    (0..len)
        .map(|i| dataio::SampleRecord {
            timestamp: i as f64,
            acc: [0.01 * i as f64, -0.2, 9.81],
            gyro: [0.0, 0.001 * i as f64, 0.0],
            speed: 10.0,
            label: if bumps.contains(&i) {
                dataio::Label::Bump
            } else {
                dataio::Label::NoBump
            },
            position: dataio::Position::Dashboard,
            side: dataio::Side::Right,
            trace_id: trace.to_string(),
        })
        .collect()
}

/// The full suite.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut checks = gradient_checks(seed)?;
    checks.extend(causality_checks(seed)?);
    checks.extend(metrics_checks(seed)?);
    checks.extend(preprocessing_checks(seed)?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let checks = run_all(7).unwrap();
        assert!(checks.len() > 30);
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
