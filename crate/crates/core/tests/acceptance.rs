//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion, and exits non-zero if any failed. A name fragment on the
//! command line restricts the run to matching criteria.

mod common;

use std::collections::BTreeMap;
use std::fmt::Display;
use std::net::UdpSocket;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use emfield::evalsel::{
    build_scenario, learn, median, reconstruct, select_model, sensor_sweep, Candidate, ProtocolConfig, Scenario,
};
use emfield::field_sim::{field_at_point, SimConfig};
use emfield::geometry::{make_grid, GridSpec, Point, SensorArray, SourceSpec};
use emfield::gp::{fit, lml_gradient, log_marginal, predict};
use emfield::hyper_opt::{map_objective, optimize, HyperPrior, OptimizeConfig};
use emfield::kernels::{factor_with_jitter, gram_sym, sample_gp, HyperParams, KernelFamily, KernelSpec};
use emfield::meanfn::MeanSpec;
use emfield::net::{
    decode, encode, encode_reading, serve, FieldEngine, Frame, OscArg, OscMessage, SensorReading, ServeConfig,
    FIELD_ADDRESS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, String>;

fn err<E: Display>(e: E) -> String {
    e.to_string()
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria = [
        Criterion { id: 1, name: "gradient-correctness", limit: Some(Duration::from_secs(30)), run: gradients },
        Criterion { id: 2, name: "conditioning-oracle", limit: Some(Duration::from_secs(10)), run: conditioning },
        Criterion { id: 3, name: "interpolation", limit: None, run: interpolation },
        Criterion { id: 4, name: "mean-mode-collapse", limit: None, run: mean_collapse },
        Criterion { id: 5, name: "kernel-ranking", limit: Some(Duration::from_secs(600)), run: kernel_ranking },
        Criterion { id: 6, name: "basis-mean-benefit", limit: None, run: basis_mean_benefit },
        Criterion { id: 7, name: "sensor-count-trend", limit: None, run: sensor_trend },
        Criterion { id: 8, name: "kernel-properties", limit: None, run: kernel_properties },
        Criterion { id: 9, name: "hyperparameter-recovery", limit: None, run: recovery },
        Criterion { id: 10, name: "wire-protocol", limit: Some(Duration::from_secs(5)), run: wire_protocol },
        Criterion { id: 11, name: "pipeline-determinism", limit: None, run: determinism },
    ];
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| filter.as_deref().is_none_or(|f| c.name.contains(f))) {
        ran += 1;
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = t0.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(d), Some(lim)) if elapsed > lim => Err(format!("{d}; took {elapsed:.1?}, limit {lim:?}")),
            (o, _) => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if outcome.is_err() {
            failed += 1;
        }
        println!("{tag} criterion {:>2} {}: {detail} [{:.2?}]", c.id, c.name, elapsed);
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn worst_ratio(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / 1e-4f64.max(1e-3 * a.abs()))
        .fold(0.0, f64::max)
}

fn gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let prior = HyperPrior::default();
    let mut worst = 0.0f64;
    for i in 0..25 {
        let family = KernelFamily::ALL[i % 7];
        let mean = if i % 2 == 0 { MeanSpec::zero() } else { random_basis_mean(&mut rng) };
        let n = rng.random_range(2..=8);
        let x = random_points(&mut rng, n);
        let y = normals(&mut rng, n);
        let k = random_kernel(&mut rng, family);
        let at = k.hyper.to_vec();

        let model = fit(&x, &y, &k, &mean).map_err(err)?;
        if model.jitter != 0.0 {
            return Err(format!("problem {i}: unexpected jitter {}", model.jitter));
        }
        let lml = |v: &[f64]| log_marginal(&fit(&x, &y, &k.with_params(v).unwrap(), &mean).unwrap());
        let r = worst_ratio(&lml_gradient(&model), &fd_gradient(lml, &at, 1e-5));

        let (_, g) = map_objective(&x, &y, &k, &mean, &prior).map_err(err)?;
        let obj = |v: &[f64]| map_objective(&x, &y, &k.with_params(v).unwrap(), &mean, &prior).unwrap().0;
        let r = r.max(worst_ratio(&g, &fd_gradient(obj, &at, 1e-5)));
        if r > 1.0 {
            return Err(format!("problem {i} ({family}, {}): error ratio {r:.3}", mean.mode));
        }
        worst = worst.max(r);
    }
    Ok(format!("25 problems, worst error / tolerance {worst:.2e}"))
}

fn conditioning() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let family = KernelFamily::ALL[rng.random_range(0..7)];
        let mean = if i % 2 == 0 { MeanSpec::zero() } else { random_basis_mean(&mut rng) };
        let n = rng.random_range(1..=6);
        let q = rng.random_range(1..=3);
        let x = random_points(&mut rng, n);
        let xq = random_points(&mut rng, q);
        let y = normals(&mut rng, n);
        let k = random_kernel(&mut rng, family);
        let model = fit(&x, &y, &k, &mean).map_err(err)?;
        let p = predict(&model, &xq, false, true);
        let cov = p.covariance.expect("full covariance");
        let (om, oc) = dense_condition(&k, &mean, &x, &y, &xq, k.hyper.noise_var() + model.jitter);
        for j in 0..q {
            worst = worst.max((p.mean[j] - om[j]).abs());
            worst = worst.max((p.variance[j] - oc[(j, j)]).abs());
            for l in 0..q {
                worst = worst.max((cov[(j, l)] - oc[(j, l)]).abs());
            }
        }
        if worst > 1e-8 {
            return Err(format!("problem {i} ({family}, {}): max deviation {worst:.3e}", mean.mode));
        }
    }
    Ok(format!("50 problems, max deviation {worst:.2e}"))
}

fn source2_readings(points: &[Point<f64>]) -> Result<Vec<f64>, String> {
    let cfg = SimConfig::new(SourceSpec::canonical(2).map_err(err)?, 0);
    points.iter().map(|p| field_at_point(&cfg, p).map_err(err)).collect()
}

fn interpolation() -> Check {
    let x = SensorArray::default().positions;
    let y = source2_readings(&x)?;
    let h = HyperParams { log_signal_var: 100f64.ln(), log_len: vec![1.5f64.ln(); 2], log_noise_var: -30.0, extras: vec![] };
    let k = KernelSpec::new(KernelFamily::Matern32, h).map_err(err)?;
    let model = fit(&x, &y, &k, &MeanSpec::zero()).map_err(err)?;
    let p = predict(&model, &x, false, false);
    let dm = p.mean.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let dv = p.variance.iter().copied().fold(0.0, f64::max);
    if dm < 1e-4 && dv < 1e-4 {
        Ok(format!("max |mean − target| {dm:.2e}, max variance {dv:.2e}"))
    } else {
        Err(format!("max |mean − target| {dm:.2e}, max variance {dv:.2e}"))
    }
}

fn mean_collapse() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let base = MeanSpec::<f64>::basis_default();
    let tight = MeanSpec::basis(base.centers.clone(), vec![0.0; base.n_basis()], 1e-12);
    let mut worst = 0.0f64;
    let mut problems: Vec<(KernelSpec<f64>, Vec<Point<f64>>, Vec<f64>)> = vec![];
    let sensors = SensorArray::default().positions;
    let ys = source2_readings(&sensors)?;
    problems.push((KernelSpec::default_for(KernelFamily::Matern32), sensors, ys));
    for i in 0..14 {
        let n = rng.random_range(2..=9);
        let x = random_points(&mut rng, n);
        let y: Vec<f64> = normals(&mut rng, n).iter().map(|v| 3.0 * v).collect();
        problems.push((random_kernel(&mut rng, KernelFamily::ALL[i % 7]), x, y));
    }
    let xq = make_grid::<f64>(&GridSpec::with_step(0.4)).map_err(err)?;
    for (k, x, y) in &problems {
        let z = fit(x, y, k, &MeanSpec::zero()).map_err(err)?;
        let b = fit(x, y, k, &tight).map_err(err)?;
        worst = worst.max((log_marginal(&z) - log_marginal(&b)).abs());
        let (pz, pb) = (predict(&z, &xq, false, false), predict(&b, &xq, false, false));
        for j in 0..xq.len() {
            worst = worst.max((pz.mean[j] - pb.mean[j]).abs()).max((pz.variance[j] - pb.variance[j]).abs());
        }
    }
    if worst < 1e-6 {
        Ok(format!("{} problems, max deviation {worst:.2e}", problems.len()))
    } else {
        Err(format!("max deviation {worst:.2e}"))
    }
}

fn kernel_ranking() -> Check {
    let cfg = ProtocolConfig::default();
    let scenarios: Vec<Scenario<f64>> =
        SourceSpec::all().into_iter().map(|s| build_scenario(&cfg, s, 1)).collect::<Result<_, _>>().map_err(err)?;
    let se = Candidate::new(KernelFamily::SquaredExponential, MeanSpec::zero());
    let m32 = Candidate::new(KernelFamily::Matern32, MeanSpec::zero());
    let table = select_model(&scenarios, &[se.clone(), m32.clone()], &cfg).map_err(err)?;
    let mut losses = vec![];
    for s in &scenarios {
        if table.winner(&s.id) != Some(m32.label.as_str()) {
            losses.push(s.id.clone());
        }
    }
    let nm = |label: &str| -> Vec<f64> {
        scenarios.iter().filter_map(|s| table.row(&s.id, label).map(|r| r.nmse)).collect()
    };
    let wins = scenarios.len() - losses.len();
    let detail = format!(
        "Matern32 wins {wins}/16 (median NMSE {:.3} vs SE {:.3}; SE wins on {})",
        median(&nm(&m32.label)),
        median(&nm(&se.label)),
        if losses.is_empty() { "none".to_string() } else { losses.join(",") }
    );
    if wins >= 12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn basis_mean_benefit() -> Check {
    let cfg = ProtocolConfig::default();
    let source = SourceSpec::canonical(2).map_err(err)?;
    let mut rows: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for seed in 1..=3 {
        let sc: Scenario<f64> = build_scenario(&cfg, source, seed).map_err(err)?;
        for (name, m) in [("zero", MeanSpec::zero()), ("basis", MeanSpec::basis_default())] {
            let opt = learn(&sc, KernelFamily::Matern32, &m, &cfg, seed).map_err(err)?;
            let (_, r) = reconstruct(&sc, &opt.kernel(), &opt.mean(&m), 9, cfg.center).map_err(err)?;
            let e = rows.entry(name).or_default();
            e.0.push(r.nmse_range);
            e.1.push(r.correlation);
        }
    }
    let (zn, zc) = (median(&rows["zero"].0), median(&rows["zero"].1));
    let (bn, bc) = (median(&rows["basis"].0), median(&rows["basis"].1));
    let detail = format!("median NMSE basis {bn:.4} vs zero {zn:.4}; correlation basis {bc:.4} vs zero {zc:.4}");
    if bn < zn && bc > zc {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sensor_trend() -> Check {
    let cfg = ProtocolConfig::default();
    let source = SourceSpec::canonical(2).map_err(err)?;
    let counts = [9, 30, 100];
    let mut nmse = vec![vec![]; 3];
    let mut corr = vec![vec![]; 3];
    for seed in 1..=3 {
        let sc: Scenario<f64> = build_scenario(&cfg, source, seed).map_err(err)?;
        let rows = sensor_sweep(&sc, KernelFamily::Matern32, &MeanSpec::basis_default(), &counts, &cfg).map_err(err)?;
        for (i, r) in rows.iter().enumerate() {
            nmse[i].push(r.nmse);
            corr[i].push(r.correlation);
        }
    }
    let mn: Vec<f64> = nmse.iter().map(|v| median(v)).collect();
    let mc: Vec<f64> = corr.iter().map(|v| median(v)).collect();
    let detail = format!(
        "median NMSE {:.4}/{:.4}/{:.4}, correlation {:.4}/{:.4}/{:.4} for 9/30/100 sensors",
        mn[0], mn[1], mn[2], mc[0], mc[1], mc[2]
    );
    if mn[0] > mn[1] && mn[1] > mn[2] && mc[0] < mc[1] && mc[1] < mc[2] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn unit_kernel(family: KernelFamily) -> KernelSpec<f64> {
    KernelSpec::default_for(family)
}

fn kernel_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut problems = vec![];
    for family in KernelFamily::ALL {
        let k = random_kernel(&mut rng, family);
        for _ in 0..1000 {
            let p = random_points(&mut rng, 2);
            let (a, b) = (p[0], p[1]);
            if k.eval(&a, &b) != k.eval(&b, &a) {
                problems.push(format!("{family} asymmetric at {a:?}, {b:?}"));
                break;
            }
            if family.is_stationary() {
                let s = Point::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                let shifted = k.eval(&Point::new(a.x + s.x, a.y + s.y), &Point::new(b.x + s.x, b.y + s.y));
                if (shifted - k.eval(&a, &b)).abs() > 1e-12 {
                    problems.push(format!("{family} not translation invariant"));
                    break;
                }
            }
        }
        for _ in 0..20 {
            let mut x = random_points(&mut rng, 25);
            x.push(x[0]);
            let g = gram_sym(&k, &x);
            match factor_with_jitter(&g.values, k.hyper.signal_var()) {
                Ok((_, jitter)) => {
                    let mut m = g.values.clone();
                    m.add_diag(jitter);
                    let e = min_eigenvalue(&m);
                    if e < -1e-12 * k.hyper.signal_var() {
                        problems.push(format!("{family}: eigenvalue {e:.3e} after jitter {jitter:.1e}"));
                        break;
                    }
                }
                Err(e) => {
                    problems.push(format!("{family}: {e}"));
                    break;
                }
            }
        }
    }

    let mut rq = unit_kernel(KernelFamily::RationalQuadratic);
    rq.hyper.extras[0] = 20.0;
    let mut se = unit_kernel(KernelFamily::SquaredExponential);
    let (ell, s2) = (rng.random_range(-0.5..0.5f64), rng.random_range(-0.5..0.5f64));
    rq.hyper.log_len[0] = ell;
    rq.hyper.log_signal_var = s2;
    se.hyper.log_len = vec![ell; 2];
    se.hyper.log_signal_var = s2;
    let mut rq_gap = 0.0f64;
    for _ in 0..1000 {
        let p = random_points(&mut rng, 2);
        rq_gap = rq_gap.max((rq.eval(&p[0], &p[1]) - se.eval(&p[0], &p[1])).abs());
    }
    if rq_gap >= 1e-6 {
        problems.push(format!("RQ differs from SE by {rq_gap:.2e} at alpha = e^20"));
    }

    // Unit length scale and signal variance; r runs over (0, 3].
    let chain = [KernelFamily::Matern12, KernelFamily::Matern32, KernelFamily::Matern52, KernelFamily::SquaredExponential]
        .map(unit_kernel);
    let origin = Point::new(0.0, 0.0);
    for i in 1..=3000 {
        let r = 3.0 * i as f64 / 3000.0;
        let v: Vec<f64> = chain.iter().map(|k| k.eval(&origin, &Point::new(r, 0.0))).collect();
        if let Some(j) = (0..3).find(|&j| v[j] > v[j + 1]) {
            problems.push(format!(
                "smoothness ordering breaks at r = {r:.3}: {} {:.5} > {} {:.5}",
                chain[j].family,
                v[j],
                chain[j + 1].family,
                v[j + 1]
            ));
            break;
        }
    }

    if problems.is_empty() {
        Ok(format!("7 families, RQ/SE gap {rq_gap:.2e}"))
    } else {
        Err(problems.join("; "))
    }
}

fn recovery() -> Check {
    let truth = HyperParams::from_natural(KernelFamily::Matern32, &[2.0, 1.0, 1.0, 0.01]).map_err(err)?;
    let k = KernelSpec::new(KernelFamily::Matern32, truth).map_err(err)?;
    let mut good = 0;
    let mut found = vec![];
    for seed in 1..=5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_points(&mut rng, 60);
        let f = sample_gp(&k, &[0.0; 60], &x, 1, seed).map_err(err)?.remove(0);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let y: Vec<f64> = f.iter().map(|v| v + noise.sample(&mut rng)).collect();
        let r = optimize(&x, &y, KernelFamily::Matern32, &MeanSpec::zero(), &HyperPrior::default(), &OptimizeConfig::new(5, seed))
            .map_err(err)?;
        let ls = r.best_params.lengths();
        if ls.iter().all(|l| (1.0 / 1.5..=1.5).contains(l)) {
            good += 1;
        }
        found.push(format!("({:.2}, {:.2})", ls[0], ls[1]));
    }
    let detail = format!("{good}/5 seeds within a factor 1.5; length scales {}", found.join(" "));
    if good >= 4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn wire_protocol() -> Check {
    let reading: Vec<u8> = [
        &b"/em/sensor\0\0"[..],
        b",ifff\0\0\0",
        &[0, 0, 0, 3],
        &[0x3F, 0x80, 0, 0],
        &[0x40, 0x20, 0, 0],
        &[0xC0, 0x50, 0, 0],
    ]
    .concat();
    let field: Vec<u8> = [
        &b"/em/field\0\0\0"[..],
        b",iib\0\0\0\0",
        &[0, 0, 0, 7],
        &[0, 0, 0, 48],
        &[0, 0, 0, 3],
        &[1, 2, 3, 0],
    ]
    .concat();
    let stats: Vec<u8> = [&b"/em/stats\0\0\0"[..], b",\0\0\0"].concat();
    let fixtures = [
        (
            &reading,
            OscMessage::new(
                "/em/sensor",
                vec![OscArg::Int(3), OscArg::Float(1.0), OscArg::Float(2.5), OscArg::Float(-3.25)],
            ),
        ),
        (&field, OscMessage::new("/em/field", vec![OscArg::Int(7), OscArg::Int(48), OscArg::Blob(vec![1, 2, 3])])),
        (&stats, OscMessage::new("/em/stats", vec![])),
    ];
    for (bytes, want) in &fixtures {
        let got = decode(bytes).map_err(err)?;
        if &got != want {
            return Err(format!("decoded {got:?}, expected {want:?}"));
        }
        if &encode(want) != *bytes {
            return Err(format!("{} does not re-encode to the fixture", want.address));
        }
    }
    if encode_reading(3, 1.0, 2.5, -3.25) != reading {
        return Err("encode_reading differs from the fixture".into());
    }

    let kernel = KernelSpec::new(
        KernelFamily::Matern32,
        HyperParams::from_natural(KernelFamily::Matern32, &[30.0, 1.5, 1.5, 0.25]).map_err(err)?,
    )
    .map_err(err)?;
    let grid = make_grid::<f64>(&GridSpec::default()).map_err(err)?;
    let engine = FieldEngine::new(kernel, MeanSpec::basis_default(), grid, 49, true).map_err(err)?;
    let offline = engine.clone();

    let sink = UdpSocket::bind("127.0.0.1:0").map_err(err)?;
    sink.set_read_timeout(Some(Duration::from_secs(2))).map_err(err)?;
    let handle = serve(engine, ServeConfig::new("127.0.0.1:0".parse().unwrap(), sink.local_addr().map_err(err)?))
        .map_err(err)?;
    let sensors = SensorArray::default();
    let values = source2_readings(&sensors.positions)?;
    let sender = UdpSocket::bind("127.0.0.1:0").map_err(err)?;
    let mut readings = BTreeMap::new();
    let now = Instant::now();
    for ((&id, p), &v) in sensors.ids.iter().zip(&sensors.positions).zip(&values) {
        let (x, y, v) = (p.x as f32, p.y as f32, v as f32);
        sender.send_to(&encode_reading(id, x, y, v), handle.local_addr).map_err(err)?;
        readings.insert(
            id,
            SensorReading { sensor_id: id, x: x as f64, y: y as f64, value_db: v as f64, recv_time: now },
        );
    }

    let mut rows: BTreeMap<i32, Vec<u8>> = BTreeMap::new();
    let mut frame_ids = vec![];
    let mut buf = [0u8; 2048];
    while rows.len() < 49 {
        let (len, _) = sink.recv_from(&mut buf).map_err(|e| format!("after {} messages: {e}", rows.len()))?;
        let msg = decode(&buf[..len]).map_err(err)?;
        match &msg.args[..] {
            [OscArg::Int(f), OscArg::Int(r), OscArg::Blob(b)] if msg.address == FIELD_ADDRESS => {
                frame_ids.push(*f);
                rows.insert(*r, b.clone());
            }
            _ => return Err(format!("unexpected message {msg:?}")),
        }
    }
    handle.shutdown();
    let frame_id = frame_ids[0];
    if frame_ids.len() != 49 || frame_ids.iter().any(|f| *f != frame_id) {
        return Err(format!("expected 49 messages of one frame, got frame ids {frame_ids:?}"));
    }
    let frame = Frame { frame_id: frame_id as u64, readings, complete: true };
    let want = offline.predict_frame(&frame).map_err(err)?;
    for (r, blob) in &rows {
        let r = *r as usize;
        let expect: Vec<u8> = want.mean[r * 49..(r + 1) * 49].iter().flat_map(|v| v.to_be_bytes()).collect();
        if *blob != expect {
            return Err(format!("row {r} differs from the offline prediction"));
        }
    }
    Ok("3 fixtures decode exactly; 49 rows bit-identical to offline prediction".into())
}

fn pipeline(dir: &Path) -> Result<Vec<Vec<u8>>, String> {
    let s = |p: &str| dir.join(p).to_string_lossy().into_owned();
    let steps: [Vec<String>; 3] = [
        vec!["simulate".into(), "--source".into(), "2".into(), "--seed".into(), "11".into(), "--out".into(), s("field.csv")],
        vec!["train".into(), "--data".into(), s("field.csv"), "--seed".into(), "11".into(), "--restarts".into(), "2".into()],
        vec!["predict".into(), "--model".into(), s("field.csv.model.toml"), "--out".into(), s("pred.csv")],
    ];
    for args in steps {
        let argv = std::iter::once("emfield".to_string()).chain(args.iter().cloned());
        let code = emfield::cli::run(argv);
        if code != 0 {
            return Err(format!("`{}` exited with {code}", args.join(" ")));
        }
    }
    ["field.csv", "field.csv.model.toml", "pred.csv"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map_err(err))
        .collect()
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let fa = pipeline(a.path())?;
    let fb = pipeline(b.path())?;
    for (name, (x, y)) in ["field.csv", "model", "pred.csv"].iter().zip(fa.iter().zip(&fb)) {
        if x != y {
            return Err(format!("{name} differs between runs"));
        }
    }
    Ok(format!("simulate/train/predict outputs identical ({} prediction bytes)", fa[2].len()))
}
