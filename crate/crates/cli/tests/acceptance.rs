//! Acceptance run: one line per criterion, nonzero exit if any fails or runs
//! over its time budget.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use afpn_cli::{run, Cli};
use afpn_core::analysis::{compare, count_flops, count_params};
use afpn_core::fusion::{Fusion, FusionOp};
use afpn_core::kernels::conv::{conv2d_forward, conv_out_dim};
use afpn_core::kernels::resize::bilinear_forward;
use afpn_core::necks::build;
use afpn_core::scale_align::ResampleKind;
use afpn_core::{
    Execution, FeaturePyramid, FusionKind, Graph, Initializer, NeckConfig, NeckModel, OpKind, ParamStore, Real,
    Shape, Tensor,
};
use clap::Parser;
use oracles::{hand_count_afpn, naive_conv, rel, triangle_resize, Count};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Check = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).display().to_string()
}

fn cli(args: &[&str]) -> Result<afpn_cli::Output, String> {
    let parsed = Cli::try_parse_from(std::iter::once("afpn").chain(args.iter().copied())).map_err(|e| e.to_string())?;
    run(parsed).map_err(|e| format!("exit {}: {}", e.code, e.message))
}

fn json(path: PathBuf) -> Result<serde_json::Value, String> {
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn stride_contract() -> Check {
    let m: NeckModel<f32> = build(&NeckConfig::afpn_frcnn()).map_err(|e| e.to_string())?;
    let shapes = m.output_shapes(640).map_err(|e| e.to_string())?;
    let expect: BTreeMap<u8, Shape> = [(2, 160), (3, 80), (4, 40), (5, 20), (6, 10)]
        .into_iter()
        .map(|(l, side)| (l, Shape::new(1, 256, side, side)))
        .collect();
    ensure!(shapes == expect, "got {shapes:?}");
    let strides: Vec<usize> = shapes.values().map(|s| 640 / s.h).collect();
    ensure!(strides == [4, 8, 16, 32, 64], "strides {strides:?}");
    Ok(format!("P2..P6 strides {strides:?}"))
}

fn simplex() -> Check {
    let mut forwards = 0;
    let mut maps = 0;
    let mut worst = 0.0f64;
    for cfg in [NeckConfig::micro(), NeckConfig::afpn_yolo().to_micro()] {
        let m: NeckModel<f64> = build(&cfg).map_err(|e| e.to_string())?;
        for seed in 0..60u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale: f64 = rng.random_range(0.1..20.0);
            let mut input = FeaturePyramid::random_input(&cfg, cfg.resolution, 1, &mut rng).map_err(|e| e.to_string())?;
            let levels = input.levels();
            let mut map = input.into_map();
            for l in levels {
                let t = map.remove(&l).unwrap();
                map.insert(l, t.map(|v| v * scale));
            }
            input = FeaturePyramid::new(map).map_err(|e| e.to_string())?;
            let (_, weights) = m.forward_with_weights(&input).map_err(|e| e.to_string())?;
            for (name, w) in &weights {
                worst = worst.max(w.max_sum_error());
                ensure!(w.max_sum_error() < 1e-6, "{name}: sum error {}", w.max_sum_error());
                ensure!(w.in_unit_interval(), "{name}: weight outside [0, 1]");
            }
            maps += weights.len();
            forwards += 1;
        }
    }
    ensure!(forwards >= 100, "only {forwards} forwards");
    Ok(format!("{forwards} forwards, {maps} weight maps, max |sum - 1| {worst:.1e}"))
}

fn identical_inputs<T: Real>(op: FusionOp, norm: bool, seed: u64) -> Result<f64, String> {
    let mut store = ParamStore::<T>::new();
    let f = Fusion::new(&mut store, &mut Initializer::new(seed), "site", op, norm).map_err(|e| e.to_string())?;
    let x = Tensor::<T>::randn(Shape::new(1, op.level_channels, 5, 7), 4.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut g = Graph::new();
    let id = g.input(x.clone(), false).map_err(|e| e.to_string())?;
    let out = f.forward(&mut g, &store, &vec![id; op.arity]).map_err(|e| e.to_string())?;
    let y = g.value(out.fused).map_err(|e| e.to_string())?;
    y.max_abs_diff(&x).map(|d| d.as_f64()).map_err(|e| e.to_string())
}

fn convexity() -> Check {
    let mut sites = 0;
    for cfg in [NeckConfig::afpn_frcnn(), NeckConfig::afpn_yolo(), NeckConfig::micro()] {
        let m: NeckModel<f32> = build(&cfg).map_err(|e| e.to_string())?;
        let widths = cfg.internal_widths();
        let first = cfg.input_levels()[0];
        for (i, site) in m.topology().iter().enumerate() {
            let c = widths[(site.target - first) as usize];
            let op = FusionOp::new(FusionKind::Adaptive, site.arity, cfg.compress_channels, c).map_err(|e| e.to_string())?;
            let d64 = identical_inputs::<f64>(op, cfg.norm, i as u64)?;
            ensure!(d64 == 0.0, "stage {} level {}: f64 differs by {d64:e}", site.stage, site.target);
            let d32 = identical_inputs::<f32>(op, cfg.norm, i as u64)?;
            ensure!(d32 <= 1e-6, "stage {} level {}: f32 differs by {d32:e}", site.stage, site.target);
            sites += 1;
        }
    }
    Ok(format!("{sites} fusion sites: f64 bitwise equal, f32 within 1e-6"))
}

fn gradients() -> Check {
    let tmp = TempDir::new().unwrap();
    let out = cli(&["gradcheck", &config("micro.json"), "--seed", "0", "--out", tmp.path().to_str().unwrap()])?;
    let r = json(tmp.path().join("gradcheck.json"))?;
    let coords = r["coordinates"].as_u64().unwrap_or(0);
    let params = r["params_checked"].as_u64().unwrap_or(0);
    let err = r["max_rel_error"].as_f64().unwrap_or(f64::INFINITY);
    ensure!(out.passed, "gradcheck failed:\n{}", out.text);
    ensure!(coords >= 200 && params >= 10, "{coords} coordinates over {params} params");
    ensure!(r["step"].as_f64() == Some(1e-5), "step {}", r["step"]);
    ensure!(err < 1e-4, "max relative error {err:e}");
    Ok(format!("{coords} coordinates over {params} params, max relative error {err:.2e}"))
}

fn operator_oracles() -> Check {
    let execs = [Execution::Sequential, Execution::default()];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut convs = 0;
    for n in 1..=2 {
        for ci in 1..=3 {
            for co in 1..=2 {
                for h in 1..=5 {
                    for w in 1..=5 {
                        for k in 1..=3 {
                            for stride in 1..=3 {
                                for pad in 0..=2 {
                                    if conv_out_dim(h, k, stride, pad).is_none() || conv_out_dim(w, k, stride, pad).is_none() {
                                        continue;
                                    }
                                    let x = Tensor::randn(Shape::new(n, ci, h, w), 1.0, &mut rng);
                                    let wt = Tensor::randn(Shape::new(co, ci, k, k), 1.0, &mut rng);
                                    let b = Tensor::randn(Shape::new(1, co, 1, 1), 1.0, &mut rng);
                                    let (shape, expect) = naive_conv(&x, &wt, &b, stride, pad);
                                    for exec in execs {
                                        let got = conv2d_forward(&x, &wt, Some(&b), stride, pad, exec).map_err(|e| e.to_string())?;
                                        ensure!(got.shape() == shape, "conv shape {} vs {shape}", got.shape());
                                        let bad = got.data().iter().zip(&expect).any(|(g, e)| rel(*g, *e) >= 1e-6);
                                        ensure!(!bad, "conv n{n} ci{ci} co{co} {h}x{w} k{k} s{stride} p{pad}");
                                    }
                                    convs += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut resizes = 0;
    for h in 1..=6 {
        for w in 1..=6 {
            for (oh, ow) in [(1, 1), (h * 2, w * 2), (h * 4, w * 4), (h * 8, w * 8), (7, 3), (13, 11)] {
                for align in [false, true] {
                    let x = Tensor::randn(Shape::new(1, 2, h, w), 1.0, &mut rng);
                    let expect = triangle_resize(&x, oh, ow, align);
                    for exec in execs {
                        let got = bilinear_forward(&x, oh, ow, align, exec).map_err(|e| e.to_string())?;
                        let bad = got.data().iter().zip(&expect).any(|(g, e)| rel(*g, *e) >= 1e-6);
                        ensure!(!bad, "resize {h}x{w} -> {oh}x{ow} align {align}");
                    }
                    resizes += 1;
                }
            }
        }
    }
    Ok(format!("{convs} conv cases, {resizes} resize cases"))
}

fn topology() -> Check {
    let arities = |cfg: &NeckConfig| -> Result<Vec<Vec<usize>>, String> {
        let m: NeckModel<f32> = build(cfg).map_err(|e| e.to_string())?;
        let mut by_stage: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for s in m.topology() {
            ensure!(s.sources.len() == s.arity, "site arity {} with {} sources", s.arity, s.sources.len());
            by_stage.entry(s.stage).or_default().push(s.arity);
        }
        Ok(by_stage.into_values().collect())
    };
    let frcnn = arities(&NeckConfig::afpn_frcnn())?;
    let yolo = arities(&NeckConfig::afpn_yolo())?;
    ensure!(frcnn == [vec![2; 2], vec![3; 3], vec![4; 4]], "frcnn arities {frcnn:?}");
    ensure!(yolo == [vec![2; 2], vec![3; 3]], "yolo arities {yolo:?}");

    let yolo_model: NeckModel<f32> = build(&NeckConfig::afpn_yolo()).map_err(|e| e.to_string())?;
    for s in yolo_model.topology() {
        let eight = s.sources.iter().any(|(_, k)| matches!(k, ResampleKind::Upsample(8) | ResampleKind::Downsample(8)));
        ensure!(!eight, "yolo site at level {} uses a factor-8 resampler", s.target);
    }
    let trace = yolo_model.trace_at(640).map_err(|e| e.to_string())?;
    let mut resamplers = 0;
    for n in trace.graph.nodes() {
        match n.kind {
            OpKind::BilinearResize { .. } => {
                let src = trace.graph.shape(n.inputs[0]);
                ensure!(n.shape.h / src.h < 8, "{} upsamples x{}", n.name, n.shape.h / src.h);
                resamplers += 1;
            }
            OpKind::Conv2d { stride, .. } if *stride > 1 => {
                ensure!(*stride < 8, "{} has stride {stride}", n.name);
                resamplers += 1;
            }
            _ => {}
        }
    }
    Ok(format!("frcnn {:?}, yolo {:?}; {resamplers} yolo resampler nodes, none x8", [2, 3, 4], [2, 3]))
}

fn cost_accounting() -> Check {
    let mut yolo_norm = NeckConfig::afpn_yolo().to_micro();
    yolo_norm.norm = true;
    let configs = [NeckConfig::micro(), NeckConfig::micro().with_fusion(FusionKind::Sum), yolo_norm];
    for cfg in &configs {
        let m: NeckModel<f32> = build(cfg).map_err(|e| e.to_string())?;
        let res = cfg.resolution;
        let got = Count { params: count_params(&m), flops: count_flops(&m, res).map_err(|e| e.to_string())? };
        let want = hand_count_afpn(cfg, res as u64);
        ensure!(got == want, "{} {} at {res}: {got:?} vs hand {want:?}", cfg.variant, cfg.fusion.name());
    }
    let afpn: NeckModel<f32> = build(&NeckConfig::afpn_frcnn()).map_err(|e| e.to_string())?;
    let fpn: NeckModel<f32> = build(&NeckConfig::fpn()).map_err(|e| e.to_string())?;
    let cmp = compare(&[("afpn".into(), &afpn), ("fpn".into(), &fpn)], 640).map_err(|e| e.to_string())?;
    let (a, f) = (cmp.rows[0].flops, cmp.rows[1].flops);
    ensure!(a < f, "AFPN {a} FLOPs not below FPN {f}");
    Ok(format!("3 micro configs exact; AFPN {:.2} vs FPN {:.2} GFLOPs at 640", a as f64 / 1e9, f as f64 / 1e9))
}

fn trainability() -> Check {
    let tmp = TempDir::new().unwrap();
    cli(&["train-toy", &config("micro.json"), "--steps", "200", "--seed", "0", "--out", tmp.path().to_str().unwrap()])?;
    let csv = fs::read_to_string(tmp.path().join("loss.csv")).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.split_once(',').unwrap().1.parse().unwrap()).collect();
    ensure!(losses.len() == 200, "{} losses", losses.len());
    let ratio = losses[199] / losses[0];
    ensure!(ratio < 0.5, "final/initial {ratio:.4}");
    Ok(format!("loss {:.4} -> {:.4}, ratio {ratio:.4}", losses[0], losses[199]))
}

fn determinism() -> Check {
    let tmp = TempDir::new().unwrap();
    let dir = |name: &str| tmp.path().join(name).display().to_string();
    let micro = config("micro.json");
    for d in ["f1", "f2"] {
        cli(&["forward", &micro, "--random", "--seed", "7", "--out", &dir(d)])?;
    }
    for d in ["t1", "t2"] {
        cli(&["train-toy", &micro, "--steps", "30", "--seed", "7", "--out", &dir(d)])?;
    }
    let (f1, f2) = (artifacts(&tmp.path().join("f1")), artifacts(&tmp.path().join("f2")));
    let (t1, t2) = (artifacts(&tmp.path().join("t1")), artifacts(&tmp.path().join("t2")));
    ensure!(f1.len() == 6 && f1 == f2, "forward artifacts differ");
    ensure!(t1.len() == 1 && t1 == t2, "train-toy artifacts differ");
    Ok(format!("{} forward and {} train-toy artifacts bitwise identical", f1.len(), t1.len()))
}

fn ablation_parity() -> Check {
    let tmp = TempDir::new().unwrap();
    let out = cli(&["ablate", &config("afpn_frcnn.json"), "--seed", "0", "--out", tmp.path().to_str().unwrap()])?;
    let ab = json(tmp.path().join("ablation.json"))?;
    let rows = ab["rows"].as_array().ok_or("no rows")?;
    let kinds: Vec<&str> = rows.iter().filter_map(|r| r["fusion"].as_str()).collect();
    ensure!(kinds == ["adaptive", "sum", "concat"], "rows {kinds:?}");
    ensure!(rows.windows(2).all(|w| w[0]["output_shapes"] == w[1]["output_shapes"]), "output shapes differ");
    let fp = |i: usize| rows[i]["fusion_params"].as_u64().unwrap_or(0);
    let (adaptive, sum, concat) = (fp(0), fp(1), fp(2));
    ensure!(sum < adaptive && sum < concat, "fusion params adaptive {adaptive} sum {sum} concat {concat}");
    ensure!(out.passed, "ablate reported failure:\n{}", out.text);
    Ok(format!("shapes identical; fusion params sum {sum} < adaptive {adaptive}, sum < concat {concat}"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("stride contract", 1, stride_contract),
        ("simplex invariant", 10, simplex),
        ("convex combination", 1, convexity),
        ("gradient correctness", 60, gradients),
        ("operator oracles", 30, operator_oracles),
        ("asymptotic topology", 1, topology),
        ("cost accounting", 5, cost_accounting),
        ("end-to-end trainability", 120, trainability),
        ("determinism", 10, determinism),
        ("ablation parity", 60, ablation_parity),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = start.elapsed();
        let budget = Duration::from_secs(*budget);
        let (ok, detail) = match result {
            Ok(d) if took < budget => (true, d),
            Ok(d) => (false, format!("{d}; over budget")),
            Err(e) => (false, e),
        };
        failed += usize::from(!ok);
        println!(
            "{} criterion {:>2} {name} ({:.2}s / {}s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
