mod common;

use common::{cosine_softmax, dist, naive_average_linkage, replay_selection};
use proptest::prelude::*;
use promptfocus::dcp::{
    average_linkage, category_filter, hierarchical_cluster, select_from_scores, select_prompts, DcpConfig, DcpError,
    PromptSelection,
};
use promptfocus::embedding::{
    image_class_similarity, normalize, CategoryLibrary, EmbeddingTable, LibrarySource, SimilarityScores,
};
use promptfocus::harness::street::{street_image, street_table};
use promptfocus::harness::Fixture;
use promptfocus::tensor::RngState;

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

fn scores(v: Vec<f64>) -> SimilarityScores {
    SimilarityScores {
        values: v,
        normalized: true,
    }
}

fn selection_of(names: &[String], sim: &[f64]) -> PromptSelection {
    PromptSelection {
        cls: names.to_vec(),
        sim: sim.to_vec(),
        iterations_used: 0,
        final_tau_f: 0.0,
        final_tau_c: 0.0,
        meta: None,
    }
}

#[test]
fn similarity_matches_exp_normalised_cosines() {
    let mut rng = RngState::new(5);
    let rows = unit_rows(5, 4, &mut rng);
    let (_, table) = world(&rows);
    let mut img = rng.normal_vec(4, 1.0);
    normalize(&mut img);
    for t in [0.01, 0.3, 2.0] {
        let got = image_class_similarity(&img, &table, t).unwrap();
        let want = cosine_softmax(&img, &rows, t);
        assert!(got.normalized);
        for (g, w) in got.values.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn similarity_is_permutation_equivariant() {
    let mut rng = RngState::new(6);
    let rows = unit_rows(7, 5, &mut rng);
    let (_, table) = world(&rows);
    let img = rows[2].clone();
    let base = image_class_similarity(&img, &table, 0.05).unwrap().values;
    let order = [6, 0, 3, 1, 5, 2, 4];
    let permuted: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
    let (_, ptable) = world(&permuted);
    let got = image_class_similarity(&img, &ptable, 0.05).unwrap().values;
    for (j, &i) in order.iter().enumerate() {
        assert!((got[j] - base[i]).abs() < 1e-15);
    }
}

#[test]
fn filter_matches_brute_force_on_1000_classes() {
    let mut rng = RngState::new(7);
    let raw: Vec<f64> = rng.normal_vec(1000, 1.0).into_iter().map(f64::exp).collect();
    let total: f64 = raw.iter().sum();
    let s: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let lib = CategoryLibrary::new(names(1000), LibrarySource::Initial).unwrap();
    for tau in [0.0005, 0.001, 0.002, 0.005] {
        let got = category_filter(&scores(s.clone()), &lib, tau).unwrap();
        let want: Vec<String> = (0..1000).filter(|&i| s[i] > tau).map(|i| format!("c{i}")).collect();
        assert_eq!(got.cls, want);
    }
}

#[test]
fn filter_worked_examples() {
    let lib = CategoryLibrary::new(names(3), LibrarySource::Initial).unwrap();
    let got = category_filter(&scores(vec![0.5, 0.3, 0.2]), &lib, 0.25).unwrap();
    assert_eq!(got.cls, ["c0", "c1"]);
    let lib = CategoryLibrary::new(names(1000), LibrarySource::Initial).unwrap();
    assert!(category_filter(&scores(vec![0.001; 1000]), &lib, 0.002).unwrap().is_empty());
}

#[test]
fn clustering_degenerate_thresholds() {
    let mut rng = RngState::new(8);
    let rows = unit_rows(6, 3, &mut rng);
    let (_, table) = world(&rows);
    let n = names(6);
    let sim = [0.3, 0.1, 0.2, 0.15, 0.05, 0.2];
    let sel = selection_of(&n, &sim);
    let min_pair = (0..6)
        .flat_map(|i| (i + 1..6).map(move |j| (i, j)))
        .map(|(i, j)| dist(&rows[i], &rows[j]))
        .fold(f64::INFINITY, f64::min);
    let (none, _) = hierarchical_cluster(&sel, &table, min_pair * 0.999).unwrap();
    let mut got = none.cls.clone();
    got.sort();
    assert_eq!(got, n);
    assert!(none.sim.windows(2).all(|w| w[0] >= w[1]));

    let (all, tree) = hierarchical_cluster(&sel, &table, 10.0).unwrap();
    assert_eq!(all.len(), 1);
    let last = tree.merges.last().unwrap().distance;
    assert_eq!(hierarchical_cluster(&sel, &table, last).unwrap().0.len(), 1);
}

#[test]
fn clustering_matches_naive_average_linkage() {
    let mut rng = RngState::new(9);
    for trial in 0..50 {
        let n = 2 + trial % 9;
        let rows = unit_rows(n, 3, &mut rng);
        let (_, table) = world(&rows);
        let nm = names(n);
        let sim: Vec<f64> = (0..n).map(|i| 1.0 / (i + 2) as f64).collect();
        let tau = 0.3 + 0.1 * (trial % 10) as f64;
        let clusters = naive_average_linkage(&rows, tau);
        let (got, tree) = hierarchical_cluster(&selection_of(&nm, &sim), &table, tau).unwrap();
        assert_eq!(got.len(), clusters.len(), "trial {trial}");
        let expected: Vec<String> = clusters
            .iter()
            .map(|m| format!("c{}", common::central_member(&rows, m)))
            .collect();
        let mut a = got.cls.clone();
        let mut b = expected;
        a.sort();
        b.sort();
        assert_eq!(a, b, "trial {trial}");
        assert!(tree.merges.windows(2).all(|w| w[0].distance <= w[1].distance));
    }
}

#[test]
fn two_tight_groups_give_two_representatives() {
    let mut rng = RngState::new(10);
    let centers = unit_rows(2, 8, &mut rng);
    let rows: Vec<Vec<f64>> = (0..10)
        .map(|i| {
            let mut v: Vec<f64> = centers[i % 2].iter().zip(rng.normal_vec(8, 0.02)).map(|(c, n)| c + n).collect();
            normalize(&mut v);
            v
        })
        .collect();
    let (lib, table) = world(&rows);
    let s: Vec<f64> = {
        let raw: Vec<f64> = (0..10).map(|i| 1.0 + 0.01 * i as f64).collect();
        let t: f64 = raw.iter().sum();
        raw.iter().map(|v| v / t).collect()
    };
    let cfg = DcpConfig {
        max_classes: 2,
        ..DcpConfig::default()
    };
    let got = select_from_scores(&scores(s.clone()), &lib, &table, &cfg).unwrap();
    assert_eq!(got.len(), 2);
    let groups: Vec<usize> = got.cls.iter().map(|c| c[1..].parse::<usize>().unwrap() % 2).collect();
    assert_ne!(groups[0], groups[1]);
    let want = replay_selection(&s, &names(10), &rows, &cfg).unwrap();
    assert_eq!(got.cls, want.cls);
    assert_eq!(got.iterations_used, want.iterations);
}

#[test]
fn single_class_library_selects_itself() {
    let rows = vec![vec![1.0, 0.0]];
    let (lib, table) = world(&rows);
    let got = select_prompts(&[1.0, 0.0], &lib, &table, &DcpConfig::default()).unwrap();
    assert_eq!(got.cls, ["c0"]);
    assert_eq!(got.sim, [1.0]);
    assert_eq!(got.iterations_used, 1);
}

#[test]
fn every_pass_empty_reports_the_score_summary() {
    let rows = vec![vec![1.0, 0.0]; 1000];
    let (lib, table) = world(&rows);
    let err = select_prompts(&[1.0, 0.0], &lib, &table, &DcpConfig::default()).unwrap_err();
    match err {
        DcpError::EmptySelection(summary) => {
            assert_eq!(summary.count, 1000);
            assert!((summary.max - 0.001).abs() < 1e-15);
        }
        other => panic!("{other}"),
    }
}

#[test]
fn street_pair_distance_and_schedule() {
    let t = street_table();
    let cfg = DcpConfig::default();
    let (lo, hi) = (cfg.tau_c_min * cfg.tau_c_scale, cfg.tau_c_max * cfg.tau_c_scale);
    let bus = t.row_by_name("minibus").unwrap();
    let van = t.row_by_name("minivan").unwrap();
    assert!(dist(bus, van) <= lo, "pair merges on the first pass");
    for i in 0..t.len() {
        for j in i + 1..t.len() {
            let pair = [t.names()[i].as_str(), t.names()[j].as_str()];
            if pair != ["minibus", "minivan"] {
                assert!(dist(t.row(i), t.row(j)) > hi, "{pair:?} would merge");
            }
        }
    }
}

#[test]
fn street_image_selection_is_stable_under_library_order() {
    let fx = Fixture::street();
    let img = street_image(&fx.table);
    let cfg = DcpConfig::default();
    let base = select_prompts(&img, &fx.library, &fx.table, &cfg).unwrap();
    let mut reversed: Vec<String> = fx.library.names().to_vec();
    reversed.reverse();
    let lib = CategoryLibrary::new(reversed, LibrarySource::Initial).unwrap();
    let got = select_prompts(&img, &lib, &fx.table, &cfg).unwrap();
    let mut a = base.cls.clone();
    let mut b = got.cls.clone();
    a.sort();
    b.sort();
    assert_eq!(a, b);
}

fn arb_instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, DcpConfig)> {
    (1usize..=10, 2usize..=4, any::<u64>()).prop_flat_map(|(n, d, seed)| {
        (
            Just(n),
            Just(d),
            Just(seed),
            0.005f64..0.3,
            0.0f64..0.2,
            0.001f64..0.1,
            0.0f64..1.5,
            0.0f64..1.0,
            0.05f64..0.5,
            1usize..=5,
            0.05f64..2.0,
        )
            .prop_map(|(n, d, seed, f_min, f_span, df, c_min, c_span, dc, max_classes, temp)| {
                let mut rng = RngState::new(seed);
                let rows = unit_rows(n, d, &mut rng);
                let mut img = rng.normal_vec(d, 1.0);
                normalize(&mut img);
                let s = cosine_softmax(&img, &rows, temp);
                let cfg = DcpConfig {
                    tau_f_min: f_min,
                    tau_f_max: (f_min + f_span).min(0.99),
                    delta_tau_f: df,
                    tau_c_min: c_min,
                    tau_c_max: c_min + c_span,
                    delta_tau_c: dc,
                    max_classes,
                    tau_c_scale: 1.0,
                    temperature: temp,
                };
                (rows, s, cfg)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selection_invariants((rows, s, cfg) in arb_instance()) {
        let (lib, table) = world(&rows);
        match select_from_scores(&scores(s.clone()), &lib, &table, &cfg) {
            Ok(sel) => {
                prop_assert!(sel.iterations_used <= cfg.max_iterations());
                prop_assert_eq!(sel.cls.len(), sel.sim.len());
                let pre = category_filter(&scores(s.clone()), &lib, sel.final_tau_f).unwrap();
                for (c, p) in sel.cls.iter().zip(&sel.sim) {
                    prop_assert!(pre.cls.contains(c));
                    prop_assert!(*p > sel.final_tau_f);
                }
                let exit = sel.meta.as_ref().unwrap().exit_reason;
                if exit == promptfocus::dcp::ExitReason::WithinLimit {
                    prop_assert!(sel.len() <= cfg.max_classes);
                }
            }
            Err(DcpError::EmptySelection(_)) => {
                prop_assert!(s.iter().all(|&p| p <= cfg.tau_f_min));
            }
            Err(e) => prop_assert!(false, "{}", e),
        }
    }

    #[test]
    fn library_permutation_changes_only_order((rows, s, cfg) in arb_instance(), rot in 0usize..10) {
        let n = rows.len();
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let (lib, table) = world(&rows);
        let nm = names(n);
        let plib = CategoryLibrary::new(order.iter().map(|&i| nm[i].clone()).collect(), LibrarySource::Initial).unwrap();
        let ps: Vec<f64> = order.iter().map(|&i| s[i]).collect();
        let a = select_from_scores(&scores(s.clone()), &lib, &table, &cfg);
        let b = select_from_scores(&scores(ps), &plib, &table, &cfg);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                let mut x = a.cls.clone();
                let mut y = b.cls.clone();
                x.sort();
                y.sort();
                prop_assert_eq!(x, y);
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn merge_distances_never_decrease(n in 1usize..12, seed in any::<u64>()) {
        let rows = unit_rows(n, 3, &mut RngState::new(seed));
        let pts: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let tree = average_linkage(&pts, names(n));
        prop_assert_eq!(tree.merges.len(), n - 1);
        prop_assert!(tree.merges.windows(2).all(|w| w[0].distance <= w[1].distance));
    }
}
