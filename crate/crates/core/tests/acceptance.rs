//! One test per acceptance criterion. Each writes a single PASS/FAIL line to
//! stderr (bypassing output capture) so a plain `cargo test` run shows the
//! full scorecard.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use common::oracles::{correlation, lambda_return_oracle, naive_conv, oracle_graph};
use common::{model_gradient_check, small_fusion, small_policy, tiny_run_config, view_pair, ALL_MECHANISMS};
use goalnav::config::{RewardConfig, RunConfig, TrainConfig};
use goalnav::evaluation::{evaluate_model, run_episode, success_rate, OracleController};
use goalnav::fusion::{eigencam, EncoderInput, FusionConfig, FusionEncoder, Mechanism, MidMapping, Modeling};
use goalnav::keypoints::{topk_flatten, Match, MatchSet};
use goalnav::model::NavModel;
use goalnav::numerics::{Checkpoint, Graph, ParamStore, Tensor};
use goalnav::policy::PolicyConfig;
use goalnav::trainer::{compute_reward, gae, generate_episodes, load_model, ppo_loss, train, LossInputs, Split};
use goalnav::worldsim::{generate_world, step, Action, DistanceField, Pose};
use petgraph::algo::dijkstra;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

/// Runs `check`, prints one verdict line, and fails the test on failure.
fn criterion(n: u32, title: &str, check: impl FnOnce() -> String) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check));
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => report(&format!("criterion {n} [{title}]: PASS ({detail}; {secs:.1}s)")),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            report(&format!("criterion {n} [{title}]: FAIL ({msg}; {secs:.1}s)"));
            std::panic::resume_unwind(e);
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn criterion_1_numerics_oracles() {
    criterion(1, "numerics oracle suite", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut worst: f64 = 0.0;
        for case in 0..50 {
            let (stride, pad, k) = ([1, 2][case % 2], [0, 1, 2][case % 3], [1, 3, 5][case % 3]);
            let (c, o) = (rng.random_range(1..5), rng.random_range(1..6));
            let (h, w) = (rng.random_range(k..12), rng.random_range(k..12));
            // f64 isolates the algorithm from single-precision accumulation.
            let x = uniform(&mut rng, &[1, c, h, w]).cast::<f64>();
            let wt = uniform(&mut rng, &[o, c, k, k]).cast::<f64>();
            let b = uniform(&mut rng, &[o]).cast::<f64>();
            let store = ParamStore::<f64>::new();
            let mut g = Graph::new(&store);
            let (xv, wv, bv) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
            let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
            let want = naive_conv(x.data(), c, h, w, wt.data(), o, k, b.data(), stride, pad);
            assert_eq!(g.value(y).numel(), want.len());
            for (a, e) in g.value(y).data().iter().zip(&want) {
                worst = worst.max((a - e).abs());
            }
        }
        assert!(worst < 1e-6, "conv2d max abs diff {worst}");

        for _ in 0..10 {
            let (c, h, w) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
            let n = c * h * w;
            let (z, ga, be) = (uniform(&mut rng, &[1, c, h, w]), uniform(&mut rng, &[1, c, h, w]), uniform(&mut rng, &[1, c, h, w]));
            let (gc, bc) = (uniform(&mut rng, &[1, c]), uniform(&mut rng, &[1, c]));
            let store = ParamStore::<f32>::new();
            let mut g = Graph::new(&store);
            let zv = g.input(z.clone());
            let (gv, bv) = (g.input(ga.clone()), g.input(be.clone()));
            let spatial = g.film(zv, gv, bv).unwrap();
            let (gcv, bcv) = (g.input(gc.clone()), g.input(bc.clone()));
            let channel = g.film(zv, gcv, bcv).unwrap();
            for i in 0..n {
                assert_eq!(g.value(spatial).data()[i], ga.data()[i] * z.data()[i] + be.data()[i]);
                let ch = i / (h * w);
                assert_eq!(g.value(channel).data()[i], gc.data()[ch] * z.data()[i] + bc.data()[ch]);
            }
        }

        let mut worst_rel: f64 = 0.0;
        for mech in ALL_MECHANISMS {
            let samples = model_gradient_check(mech, 11, 20);
            assert!(samples.len() >= 20);
            for s in samples {
                let r = s.rel_error(1e-6);
                assert!(r < 1e-3, "{mech}: {s:?}");
                worst_rel = worst_rel.max(r);
            }
        }
        format!("conv max diff {worst:.1e}, FiLM exact, worst gradient rel err {worst_rel:.1e} over 4x20 params")
    });
}

fn ppo_cfg() -> TrainConfig {
    TrainConfig {
        entropy_coef: 0.0,
        value_coef: 0.0,
        ..TrainConfig::default()
    }
}

fn actor_case(logits: [f64; 4], action: usize, old_logp: f32, adv: f64) -> (f64, Vec<f64>) {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let l = g.input_with_grad(Tensor::new(vec![1, 4], logits.to_vec()).unwrap());
    let v = g.input(Tensor::zeros(vec![1, 1]));
    let inp = LossInputs {
        actions: &[action],
        old_log_probs: &[old_logp],
        advantages: &[adv],
        returns: &[0.0],
    };
    let t = ppo_loss(&mut g, l, v, &inp, &ppo_cfg()).unwrap();
    let grads = g.backward(t.actor).unwrap();
    (g.value(t.actor).data()[0], grads.wrt(l).unwrap().to_vec())
}

#[test]
fn criterion_2_gae_and_ppo_oracles() {
    criterion(2, "GAE and PPO oracles", || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for case in 0..100 {
            let len = rng.random_range(1..32);
            let r: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dones: Vec<bool> = (0..len).map(|_| case % 2 == 1 && rng.random_bool(0.15)).collect();
            let boot = rng.random_range(-2.0..2.0);
            for lambda in [0.0, 0.5, 1.0] {
                let (adv, _) = gae(&r, &v, &dones, boot, 0.99, lambda);
                let want = lambda_return_oracle(&r, &v, &dones, boot, 0.99, lambda);
                for t in 0..len {
                    worst = worst.max((adv[t] - want[t]).abs());
                }
            }
        }
        assert!(worst < 1e-10, "GAE max diff {worst}");

        let eps = 0.2f64;
        let logp = -(4f64.ln());
        // Positive advantage beyond the band: clipped, zero gradient.
        let (loss, grad) = actor_case([0.0; 4], 2, (logp - (1.0 + 2.0 * eps).ln()) as f32, 1.0);
        assert!(grad.iter().all(|g| *g == 0.0), "clipped gradient {grad:?}");
        assert!((loss + (1.0 + eps)).abs() < 1e-12, "clipped loss {loss}");
        // Negative advantage below the band: also clipped.
        let (_, grad) = actor_case([0.0; 4], 0, (logp - (1.0 - 2.0 * eps).ln()) as f32, -1.0);
        assert!(grad.iter().all(|g| *g == 0.0));
        // On-policy: loss −A, gradient −A·(onehot − p).
        let old = logp as f32;
        let r = (logp - old as f64).exp();
        let (loss, grad) = actor_case([0.0; 4], 1, old, 0.7);
        assert!((loss + 0.7 * r).abs() < 1e-12);
        for (j, g) in grad.iter().enumerate() {
            let want = -0.7 * r * (if j == 1 { 1.0 } else { 0.0 } - 0.25);
            assert!((g - want).abs() < 1e-12, "{j}: {g} vs {want}");
        }
        // Pessimism: the surrogate never exceeds r·A.
        for _ in 0..200 {
            let l = [0; 4].map(|_| rng.random_range(-3.0..3.0));
            let a = rng.random_range(0..4);
            let lp = goalnav::numerics::log_softmax_row(&l)[a];
            let old = (lp + rng.random_range(-1.0..1.0)) as f32;
            let adv = rng.random_range(-3.0..3.0);
            let (loss, _) = actor_case(l, a, old, adv);
            assert!(-loss <= (lp - old as f64).exp() * adv + 1e-12);
        }
        format!("GAE max diff {worst:.1e} over 300 cases, clipped/unclipped hand cases exact")
    });
}

#[test]
fn criterion_3_simulator_suite() {
    criterion(3, "simulator suite", || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..100u64 {
            let grid = generate_world(seed, 4.0 + (seed % 7) as f64).unwrap();
            let (g, nodes) = oracle_graph(&grid);
            let cells: Vec<_> = grid.free_cells().collect();
            let src = cells[rng.random_range(0..cells.len())];
            let want = dijkstra(&g, nodes[&src], None, |e| *e.weight());
            let field = DistanceField::from_cell(&grid, src);
            for (&cell, &n) in &nodes {
                let got = field.cell_distance(cell.0, cell.1);
                assert!((want[&n] - got).abs() < 1e-9, "grid {seed} cell {cell:?}: {got} vs {}", want[&n]);
            }
        }

        let grid = generate_world(0, 8.0).unwrap();
        for _ in 0..100 {
            let start = Pose::new(4.0, 4.0, rng.random_range(0.0..std::f64::consts::TAU));
            let mut p = start;
            for _ in 0..12 {
                p = step(&grid, &p, Action::TurnLeft).0;
            }
            assert_eq!(p, start);
        }

        let config = RunConfig::default();
        let shaping = RewardConfig {
            c_a: 0.0,
            c_s: 0.0,
            c_slack: 0.0,
            ..RewardConfig::default()
        };
        let episodes = generate_episodes(&config, Split::Train, 100).unwrap();
        for ep in &episodes {
            let field = DistanceField::from_pose(ep.grid(), &ep.goal);
            let mut pose = ep.start;
            let mut total = 0.0;
            for _ in 0..rng.random_range(10..120) {
                let a = [Action::MoveForward, Action::MoveForward, Action::TurnLeft, Action::TurnRight][rng.random_range(0..4)];
                let next = step(ep.grid(), &pose, a).0;
                total += compute_reward(&pose, &next, a, &ep.goal, &field, &shaping);
                pose = next;
            }
            let want = field.distance_at(ep.start.x, ep.start.y) - field.distance_at(pose.x, pose.y);
            assert!((total - want).abs() < 1e-9, "episode {}: {total} vs {want}", ep.id);
        }

        let camera = config.world.camera();
        let mut results = Vec::new();
        for split in [Split::Train, Split::Heldout] {
            for ep in generate_episodes(&config, split, 50).unwrap() {
                let trace = run_episode(&ep, &mut OracleController::default(), &camera, &config.eval, 1.0).unwrap();
                assert!(trace.result.steps <= 500);
                results.push(trace.result);
            }
        }
        let sr = success_rate(&results).unwrap();
        assert_eq!(sr, 1.0, "oracle success rate {sr}");
        "Dijkstra on 100 grids, 12 turns exact, telescoping on 100 episodes, oracle SR 1.0 on 100 episodes".into()
    });
}

fn build(config: &FusionConfig, res: usize, seed: u64) -> (FusionEncoder, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = FusionEncoder::new(&mut store, config, res, &mut rng).unwrap();
    (enc, store)
}

#[test]
fn criterion_4_fusion_contracts() {
    criterion(4, "fusion contracts", || {
        let (o1, g1) = view_pair(1, 32);
        let (o2, g2) = view_pair(2, 32);
        let cfg = FusionConfig {
            mid_depth: 4,
            ..small_fusion(Mechanism::Mid)
        };
        let inp = EncoderInput::<f32>::from_images(&[&o1, &o2], &[&g1, &g2], &cfg).unwrap();
        let (enc, store) = build(&cfg, 32, 3);
        let mut g = Graph::new(&store);
        let out = enc.forward(&mut g, &inp).unwrap();
        let goal_blocks = out.goal_trace.as_ref().unwrap().blocks.clone();
        assert_eq!(out.factors.len(), 4);
        for ((ga, be), z) in out.factors.iter().zip(&goal_blocks) {
            assert_eq!(g.shape(*ga), g.shape(*z));
            assert_eq!(g.shape(*be), g.shape(*z));
        }

        let mut worst: f32 = 0.0;
        for depth in [1, 2, 4] {
            for mapping in [MidMapping::FgHr, MidMapping::Semantic] {
                let cfg = FusionConfig {
                    mid_depth: depth,
                    mid_mapping: mapping,
                    ..small_fusion(Mechanism::Mid)
                };
                let (enc, store) = build(&cfg, 32, 4);
                let mut g = Graph::new(&store);
                let mid = enc.forward(&mut g, &inp).unwrap().embedding;
                let x = g.input(inp.obs.clone());
                let plain = enc.obs_backbone().forward(&mut g, x, &[], cfg.film_placement).unwrap();
                worst = worst.max(g.value(mid).max_abs_diff(g.value(plain.embedding.unwrap())));
            }
        }
        assert!(worst < 1e-6, "identity MID diff {worst}");

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let n = rng.random_range(0..40);
            let k = rng.random_range(1..24);
            let pairs = (0..n)
                .map(|_| Match {
                    x: rng.random_range(0.0..64.0),
                    y: rng.random_range(0.0..64.0),
                    x2: rng.random_range(0.0..64.0),
                    y2: rng.random_range(0.0..64.0),
                    score: rng.random_range(0.0..1.0),
                })
                .collect();
            let v = topk_flatten(&MatchSet { width: 64, height: 64, pairs }, k);
            assert_eq!(v.len(), 4 * k);
            let filled = n.min(k) * 4;
            assert!(v[..filled].iter().all(|x| (0.0..=1.0).contains(x)));
            assert!(v[filled..].iter().all(|x| *x == -1.0));
        }

        let mut min_corr: f64 = 1.0;
        for _ in 0..20 {
            let (c, h, w) = (rng.random_range(2..10), rng.random_range(2..8), rng.random_range(2..8));
            let a: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.0..2.0)).collect();
            let z: Vec<f32> = (0..c * h * w).map(|i| a[i / (h * w)] * b[i % (h * w)]).collect();
            min_corr = min_corr.min(correlation(&eigencam(&z, c, h, w).unwrap(), &b));
        }
        assert!(min_corr > 0.999, "eigencam correlation {min_corr}");
        format!("FG_HR keeps 4/4 block shapes, identity MID diff {worst:.1e}, padding holds on 500 draws, eigencam corr >= {min_corr:.5}")
    });
}

/// Trains every variant for each seed at full budget and returns held-out
/// success rates per variant.
fn trend_sweep(variants: &[(&str, FusionConfig)], seeds: u64, tag: &str) -> BTreeMap<String, Vec<f64>> {
    let root = std::env::var_os("GOALNAV_OUTPUT_ROOT")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("goalnav-acceptance"));
    let base = RunConfig {
        output_dir: root.join(tag),
        ..RunConfig::default()
    };
    assert_eq!((base.world.resolution, base.world.train_worlds, base.train.total_steps), (64, 20, 2_000_000));
    let heldout = generate_episodes(&base, Split::Heldout, 200).unwrap();
    sweep_on(&base, variants, seeds, &heldout)
}

fn sweep_on(
    base: &RunConfig,
    variants: &[(&str, FusionConfig)],
    seeds: u64,
    heldout: &[goalnav::worldsim::Episode],
) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (label, fusion) in variants {
        for s in 0..seeds {
            let mut c = base.clone();
            c.fusion = fusion.clone();
            c.seed = base.seed + s;
            c.output_dir = base.output_dir.join(label).join(format!("seed{s}"));
            let outcome = train(&c, None, None).unwrap();
            let (cfg, model, store) = load_model(outcome.last_checkpoint().unwrap()).unwrap();
            let traces =
                evaluate_model(&model, &store, heldout, &cfg.world.camera(), &cfg.eval, cfg.reward.success_radius_m, cfg.seed).unwrap();
            let results: Vec<_> = traces.into_iter().map(|t| t.result).collect();
            out.entry(label.to_string()).or_insert_with(Vec::new).push(success_rate(&results).unwrap());
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mechanism_variants(base: &FusionConfig) -> Vec<(&'static str, FusionConfig)> {
    let with = |m| FusionConfig {
        mechanism: m,
        ..base.clone()
    };
    vec![
        ("LATE", with(Mechanism::Late)),
        ("SKIP", with(Mechanism::Skip)),
        ("MID", with(Mechanism::Mid)),
        ("EARLY", with(Mechanism::Early)),
    ]
}

fn mapping_variants(base: &FusionConfig) -> Vec<(&'static str, FusionConfig)> {
    let with = |m| FusionConfig {
        mechanism: Mechanism::Mid,
        mid_mapping: m,
        ..base.clone()
    };
    vec![("FG_HR", with(MidMapping::FgHr)), ("SEMANTIC", with(MidMapping::Semantic))]
}

fn check_table3(sr: &BTreeMap<String, Vec<f64>>) -> String {
    let (late, skip, mid, early) = (mean(&sr["LATE"]), mean(&sr["SKIP"]), mean(&sr["MID"]), mean(&sr["EARLY"]));
    let detail = format!("SR late {late:.3} skip {skip:.3} mid {mid:.3} early {early:.3}");
    assert!(early - late >= 0.20 && mid - late >= 0.20 && skip - late >= 0.05, "{detail}");
    detail
}

fn check_table4(sr: &BTreeMap<String, Vec<f64>>) -> String {
    let (fg, sem) = (mean(&sr["FG_HR"]), mean(&sr["SEMANTIC"]));
    let detail = format!("SR FG_HR {fg:.3} SEMANTIC {sem:.3}");
    assert!(fg - sem >= 0.10, "{detail}");
    detail
}

#[test]
#[ignore = "trains 12 models for 2M steps each; roughly 43 h per model on one core"]
fn criterion_5_mechanism_ordering_full_budget() {
    criterion(5, "mechanism SR ordering at 2M steps", || {
        check_table3(&trend_sweep(&mechanism_variants(&FusionConfig::default()), 3, "criterion5"))
    });
}

#[test]
#[ignore = "trains 6 models for 2M steps each; roughly 43 h per model on one core"]
fn criterion_6_mid_mapping_ordering_full_budget() {
    criterion(6, "FG_HR over SEMANTIC at 2M steps", || {
        check_table4(&trend_sweep(&mapping_variants(&FusionConfig::default()), 3, "criterion6"))
    });
}

/// The full-budget sweeps above are not run by default. This exercises the
/// same train/evaluate path at a tiny budget so the harness itself is
/// known to work, and states plainly that the thresholds were not checked.
#[test]
fn criteria_5_and_6_harness_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = tiny_run_config(Mechanism::Late, dir.path());
    base.train.total_steps = 32;
    base.episodes.probe_episodes = 0;
    let heldout = generate_episodes(&base, Split::Heldout, 4).unwrap();
    let small = small_fusion(Mechanism::Late);
    let t3 = sweep_on(&base, &mechanism_variants(&small), 1, &heldout);
    let t4 = sweep_on(&base, &mapping_variants(&small), 1, &heldout);
    for sr in t3.values().chain(t4.values()).flatten() {
        assert!((0.0..=1.0).contains(sr));
    }
    assert_eq!(t3.len(), 4);
    assert_eq!(t4.len(), 2);
    for (n, title) in [(5, "mechanism SR ordering at 2M steps"), (6, "FG_HR over SEMANTIC at 2M steps")] {
        report(&format!(
            "criterion {n} [{title}]: NOT VERIFIED (full budget not run here; harness smoke-tested at 32 steps; \
             run `cargo test --release -p goalnav --test acceptance -- --ignored`)"
        ));
    }
}

#[test]
fn criterion_7_joint_early_is_smaller() {
    criterion(7, "JOINT early smaller than SEPARATE late", || {
        let policy = PolicyConfig::default();
        let count = |mech, modeling| {
            let f = FusionConfig {
                modeling: Some(modeling),
                ..FusionConfig::with_mechanism(mech)
            };
            NavModel::new(&f, &policy, 64, 0).unwrap().1.num_scalars()
        };
        let joint = count(Mechanism::Early, Modeling::Joint);
        let separate = count(Mechanism::Late, Modeling::Separate);
        assert!(joint < separate, "{joint} vs {separate}");
        format!("{joint} vs {separate} parameters")
    });
}

fn smoke_config(out: &Path) -> RunConfig {
    let mut c = tiny_run_config(Mechanism::Mid, out);
    c.fusion = small_fusion(Mechanism::Mid);
    c.policy = small_policy();
    c.train.total_steps = 2048;
    c.train.num_envs = 4;
    c.train.rollout_len = 32;
    c.train.checkpoint_every = 1000;
    c.episodes.probe_every = 4;
    c.validate().unwrap();
    c
}

#[test]
fn criterion_8_determinism() {
    criterion(8, "determinism and resume", || {
        let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let run_a = train(&smoke_config(a.path()), None, None).unwrap();
        let run_b = train(&smoke_config(b.path()), None, None).unwrap();
        let (csv_a, csv_b) = (std::fs::read(&run_a.metrics).unwrap(), std::fs::read(&run_b.metrics).unwrap());
        assert_eq!(csv_a, csv_b, "metrics CSVs differ");
        let updates = run_a.records.len();
        assert_eq!(run_a.records.last().unwrap().step, 2048);

        let cfg_c = smoke_config(c.path());
        let k = (updates / 2) as u64;
        let first = train(&cfg_c, None, Some(k)).unwrap();
        let ckpt = Checkpoint::load(first.last_checkpoint().unwrap()).unwrap();
        assert_eq!(ckpt.config_hash, cfg_c.hash());
        let next = train(&cfg_c, first.last_checkpoint(), Some(1)).unwrap();
        assert_eq!(next.records[0], run_a.records[k as usize], "update {} after resume differs", k + 1);
        format!("{updates} updates, CSVs byte-identical ({} bytes), update {} identical after resume", csv_a.len(), k + 1)
    });
}
