//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_RED` are reported as FAIL but do not fail the
//! process; anything else failing does. The training criteria use the
//! committed `fixtures/toy_acceptance.json`.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{cosine_softmax, replay_selection};
use promptfocus::config;
use promptfocus::dcp::{category_filter, hierarchical_cluster, select_from_scores, select_prompts, DcpConfig, DcpError};
use promptfocus::embedding::{
    load_fixture, normalize, read_image_embedding, CategoryLibrary, EmbeddingTable, LibrarySource, SimilarityScores,
};
use promptfocus::gradcheck::{self, Scope};
use promptfocus::harness::{ablate, train, AblationAxis, Fixture, TrainConfig, Variant};
use promptfocus::pff::{PffConfig, PffParams};
use promptfocus::tensor::nn::Params;
use promptfocus::tensor::{OpKind, RngState};
use rand::Rng;

const KNOWN_RED: &[&str] = &["A6"];
/// Tolerance for "self-only ≈ cross-only", in mIoU points.
const APPROX_POINTS: f64 = 3.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn toy_config() -> TrainConfig {
    let file = config::read_file(&fixtures().join("toy_acceptance.json")).unwrap();
    config::resolve(Some(&file), &[]).unwrap()
}

fn within(start: Instant, budget: Duration, detail: &mut String) -> bool {
    let t = start.elapsed();
    detail.push_str(&format!("; {:.1}s (budget {}s)", t.as_secs_f64(), budget.as_secs()));
    t < budget
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

fn unit_rows(n: usize, d: usize, rng: &mut RngState) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut v = rng.normal_vec(d, 1.0);
            normalize(&mut v);
            v
        })
        .collect()
}

fn world(rows: &[Vec<f64>]) -> (CategoryLibrary, EmbeddingTable) {
    let n = names(rows.len());
    let table = EmbeddingTable::new(n.clone(), rows[0].len(), rows.concat()).unwrap();
    (CategoryLibrary::new(n, LibrarySource::Initial).unwrap(), table)
}

fn random_config(rng: &mut RngState) -> DcpConfig {
    let mut r = rng.stream();
    let tau_f_min = r.random_range(0.005..0.3);
    let tau_c_min = r.random_range(0.0..1.5);
    DcpConfig {
        tau_f_min,
        tau_f_max: (tau_f_min + r.random_range(0.0..0.2)).min(0.99),
        delta_tau_f: r.random_range(0.001..0.1),
        tau_c_min,
        tau_c_max: tau_c_min + r.random_range(0.0..1.0),
        delta_tau_c: r.random_range(0.05..0.5),
        max_classes: r.random_range(1..=5),
        tau_c_scale: r.random_range(0.05..1.0),
        temperature: r.random_range(0.05..2.0),
    }
}

fn a1() -> Outcome {
    let start = Instant::now();
    let mut rng = RngState::new(101);
    let mut mismatches = 0;
    let mut empty = 0;
    for _ in 0..200 {
        let n = rng.stream().random_range(1..=10);
        let d = rng.stream().random_range(2..=4);
        let rows = unit_rows(n, d, &mut rng);
        let mut img = rng.normal_vec(d, 1.0);
        normalize(&mut img);
        let cfg = random_config(&mut rng);
        let s = cosine_softmax(&img, &rows, cfg.temperature);
        let (lib, table) = world(&rows);
        let scores = SimilarityScores {
            values: s.clone(),
            normalized: true,
        };
        let got = select_from_scores(&scores, &lib, &table, &cfg);
        let want = replay_selection(&s, lib.names(), &rows, &cfg);
        let same = match (&got, &want) {
            (Ok(g), Some(w)) => g.cls == w.cls && g.sim == w.sim && g.iterations_used == w.iterations,
            (Err(DcpError::EmptySelection(_)), None) => {
                empty += 1;
                true
            }
            _ => false,
        };
        mismatches += usize::from(!same);
    }
    let mut detail = format!("200 instances, {mismatches} mismatches ({empty} empty on both sides)");
    let fast = within(start, Duration::from_secs(5), &mut detail);
    outcome(mismatches == 0 && fast, detail)
}

fn a2() -> Outcome {
    let start = Instant::now();
    let mut rng = RngState::new(202);
    let mut filter_bad = 0;
    for _ in 0..1000 {
        let n = rng.stream().random_range(1..=40);
        let raw = rng.uniform_vec(n, 0.0, 1.0);
        let total: f64 = raw.iter().sum();
        let scores = SimilarityScores {
            values: raw.iter().map(|v| v / total).collect(),
            normalized: true,
        };
        let lib = CategoryLibrary::new(names(n), LibrarySource::Initial).unwrap();
        let mut taus = rng.uniform_vec(6, 0.0, 2.0 / n as f64);
        taus.sort_by(f64::total_cmp);
        let sets: Vec<BTreeSet<String>> = taus
            .iter()
            .map(|&t| category_filter(&scores, &lib, t).unwrap().cls.into_iter().collect())
            .collect();
        filter_bad += sets.windows(2).filter(|w| !w[1].is_subset(&w[0])).count();
    }
    let mut cluster_bad = 0;
    for _ in 0..1000 {
        let n = rng.stream().random_range(1..=12);
        let rows = unit_rows(n, 3, &mut rng);
        let (lib, table) = world(&rows);
        let sel = category_filter(
            &SimilarityScores {
                values: vec![1.0 / n as f64; n],
                normalized: true,
            },
            &lib,
            0.0,
        )
        .unwrap();
        let mut taus = rng.uniform_vec(6, 0.0, 2.0);
        taus.sort_by(f64::total_cmp);
        let counts: Vec<usize> = taus
            .iter()
            .map(|&t| hierarchical_cluster(&sel, &table, t).unwrap().0.len())
            .collect();
        cluster_bad += counts.windows(2).filter(|w| w[1] > w[0]).count();
    }
    let mut detail = format!("filter violations {filter_bad}/1000 instances, cluster-count violations {cluster_bad}/1000");
    let fast = within(start, Duration::from_secs(10), &mut detail);
    outcome(filter_bad == 0 && cluster_bad == 0 && fast, detail)
}

fn a3() -> Outcome {
    let start = Instant::now();
    let (lib, table) = load_fixture(&fixtures().join("street.embt")).unwrap();
    let img = read_image_embedding(&fixtures().join("img0.vec")).unwrap();
    let cfg = DcpConfig::default();
    let run = || select_prompts(&img, &lib, &table, &cfg).unwrap();
    let sel = run();
    let deterministic = sel == run();
    let pair = ["minibus", "minivan"];
    let survivors: Vec<&str> = sel.cls.iter().map(String::as_str).filter(|c| pair.contains(c)).collect();

    // Re-run the final pass to see the pair pass the filter and share a cluster.
    let scores = promptfocus::embedding::image_class_similarity(&img, &table, cfg.temperature).unwrap();
    let filtered = category_filter(&scores, &lib, sel.final_tau_f).unwrap();
    let both_kept = pair.iter().all(|p| filtered.cls.iter().any(|c| c == p));
    let (_, tree) = hierarchical_cluster(&filtered, &table, sel.final_tau_c * cfg.tau_c_scale).unwrap();
    let labels = tree.cut(sel.final_tau_c * cfg.tau_c_scale);
    let label_of = |n: &str| filtered.cls.iter().position(|c| c == n).map(|i| labels[i]);
    let together = both_kept && label_of(pair[0]) == label_of(pair[1]);

    let mut detail = format!(
        "{} prompts, tau_f {} tau_c {}; pair filtered in: {both_kept}, same cluster: {together}, survivors {survivors:?}",
        sel.len(),
        sel.final_tau_f,
        sel.final_tau_c
    );
    let fast = within(start, Duration::from_secs(1), &mut detail);
    outcome(
        together && survivors.len() == 1 && sel.len() <= cfg.max_classes && deterministic && fast,
        detail,
    )
}

fn a4() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run(Scope::All, 0, None).unwrap();
    let ops: BTreeSet<String> = report.checks.iter().filter_map(|c| c.op.clone()).collect();
    let all_ops = OpKind::ALL.iter().all(|k| ops.contains(k.name()));
    let cfg = PffConfig {
        tokens: 3,
        heads: 2,
        ..PffConfig::default()
    };
    let want: BTreeSet<String> = PffParams::new(&cfg, 6, 8, &mut RngState::new(0))
        .unwrap()
        .named_params("")
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let pff: BTreeSet<String> = report
        .checks
        .iter()
        .filter(|c| c.group == "pff/full")
        .map(|c| c.parameter.clone())
        .collect();
    let worst = report.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let mut detail = format!(
        "{} checks, {}/{} ops, {}/{} pff tensors, worst rel err {worst:.2e} (tol {:e}, eps {:e})",
        report.checks.len(),
        ops.len(),
        OpKind::ALL.len(),
        pff.intersection(&want).count(),
        want.len(),
        gradcheck::TOLERANCE,
        gradcheck::EPSILON
    );
    let fast = within(start, Duration::from_secs(60), &mut detail);
    outcome(report.passed && all_ops && pff == want && fast, detail)
}

fn a5() -> Outcome {
    let start = Instant::now();
    let cfg = TrainConfig {
        steps: 500,
        ..toy_config()
    };
    let out = train(&cfg, &Fixture::street(), None).unwrap();
    let r = &out.report;
    let same_hash = r.backbone_hash_start == r.backbone_hash_end;
    let mut detail = format!(
        "step-0 logits bitwise equal: {}, backbone hash unchanged after {} steps: {same_hash}",
        r.step0_equivalence, r.steps
    );
    let fast = within(start, Duration::from_secs(120), &mut detail);
    outcome(r.step0_equivalence && r.backbone_frozen && same_hash && fast, detail)
}

fn a6() -> Outcome {
    let start = Instant::now();
    let cfg = toy_config();
    let variants: Vec<String> = [Variant::Full, Variant::SelfOnly, Variant::CrossOnly, Variant::NoPrompts, Variant::Baseline]
        .iter()
        .map(|v| v.name().to_string())
        .collect();
    let seeds: Vec<u64> = (0..5).collect();
    let rows = ablate(&cfg, &Fixture::street(), AblationAxis::Component, &variants, &seeds).unwrap();
    let m: Vec<f64> = rows.iter().map(|r| 100.0 * r.mean).collect();
    let (full, self_only, cross_only, no_prompts, baseline) = (m[0], m[1], m[2], m[3], m[4]);
    let checks = [
        ("full>self", full > self_only),
        ("full>cross", full > cross_only),
        ("self≈cross", (self_only - cross_only).abs() <= APPROX_POINTS),
        ("min(self,cross)>no_prompts", self_only.min(cross_only) > no_prompts),
        ("no_prompts>baseline", no_prompts > baseline),
        ("full-baseline>=5", full - baseline >= 5.0),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let mut detail = format!(
        "mean mIoU over 5 seeds: full {full:.2}, self_only {self_only:.2}, cross_only {cross_only:.2}, \
         no_prompts {no_prompts:.2}, baseline {baseline:.2}; failed: {failed:?}"
    );
    let fast = within(start, Duration::from_secs(15 * 60), &mut detail);
    outcome(failed.is_empty() && fast, detail)
}

fn a7() -> Outcome {
    let start = Instant::now();
    let base = toy_config();
    let mut mious = Vec::new();
    let mut shapes_ok = true;
    for tokens in [25, 50, 75, 100, 125, 150] {
        let mut cfg = base;
        cfg.pff.tokens = tokens;
        let out = train(&cfg, &Fixture::street(), None).unwrap();
        shapes_ok &= out
            .model
            .blocks
            .iter()
            .all(|b| b.tokens.shape() == [tokens, cfg.model.width]);
        mious.push(100.0 * out.report.final_metrics.application.miou);
    }
    let spread = mious.iter().copied().fold(f64::MIN, f64::max) - mious.iter().copied().fold(f64::MAX, f64::min);
    let listed: Vec<String> = mious.iter().map(|v| format!("{v:.2}")).collect();
    let mut detail = format!("mIoU by length [{}], spread {spread:.2} points, shapes ok: {shapes_ok}", listed.join(", "));
    let fast = within(start, Duration::from_secs(20 * 60), &mut detail);
    outcome(shapes_ok && spread <= 20.0 && mious.iter().all(|v| v.is_finite()) && fast, detail)
}

fn a8() -> Outcome {
    let cfg = TrainConfig {
        steps: 50,
        ..toy_config()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train(&cfg, &Fixture::street(), Some(d.path())).unwrap();
    }
    let same = |f: &str| fs::read(dirs[0].path().join(f)).unwrap() == fs::read(dirs[1].path().join(f)).unwrap();
    let (report, loss) = (same("report.json"), same("loss.csv"));
    outcome(report && loss, format!("report.json identical: {report}, loss.csv identical: {loss}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
    ];
    let mut unexpected = Vec::new();
    let mut red = Vec::new();
    for (id, f) in criteria {
        let o = f();
        let known = KNOWN_RED.contains(&id);
        let note = match (o.pass, known) {
            (false, true) => " [known red]",
            (true, true) => " [listed as known red but now passes]",
            _ => "",
        };
        println!("{id} {} {}{note}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            red.push(id);
            if !known {
                unexpected.push(id);
            }
        }
    }
    println!("{}/8 pass; red: {red:?}", 8 - red.len());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
