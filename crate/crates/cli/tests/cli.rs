use std::path::Path;
use std::process::{Command, Output};

use shapflow::document::{read_phi_sidecar, ExplanationDocument};

fn shapflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapflow"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generated(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let (g, m) = (dir.join("g.sfg"), dir.join("m.json"));
    let out = shapflow(&[
        "gen",
        "--nodes",
        "80",
        "--seed",
        "3",
        "--graph",
        s(&g),
        "--model",
        s(&m),
    ]);
    assert!(out.status.success());
    (g, m)
}

#[test]
fn explain_then_rescore() {
    let dir = tempfile::tempdir().unwrap();
    let (g, m) = generated(dir.path());
    let doc_path = dir.path().join("doc.json");
    let sidecar = dir.path().join("phi.sfp");
    let out = shapflow(&[
        "explain",
        "--graph",
        s(&g),
        "--model",
        s(&m),
        "--nodes",
        "degree-range:[4,40]:3",
        "--workers",
        "2",
        "--out",
        s(&doc_path),
        "--phi-sidecar",
        s(&sidecar),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let doc = ExplanationDocument::load(&doc_path).unwrap();
    assert!(!doc.nodes.is_empty());
    let phis: Vec<(usize, Vec<f64>)> = doc.nodes.iter().map(|n| (n.node, n.phi.clone())).collect();
    assert_eq!(read_phi_sidecar(&sidecar).unwrap(), phis);

    let rescored = dir.path().join("re.json");
    let out = shapflow(&[
        "fidelity",
        "--graph",
        s(&g),
        "--model",
        s(&m),
        "--doc",
        s(&doc_path),
        "--top-k",
        "3",
        "--sparsity",
        "0.5",
        "--out",
        s(&rescored),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let re = ExplanationDocument::load(&rescored).unwrap();
    assert_eq!(re.settings.top_k, vec![3]);
    assert_eq!(
        re.nodes[0].fidelity.as_ref().unwrap().fidelity_plus.len(),
        1
    );
}

#[test]
fn oracle_and_bench_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (g, m) = generated(dir.path());
    let graph = shapflow::graph::load_graph(&g).unwrap();
    let node = (0..graph.num_nodes())
        .find(|&v| {
            (2..=12).contains(
                &graph
                    .extract_computational_graph(v, 2)
                    .unwrap()
                    .num_players(),
            )
        })
        .unwrap()
        .to_string();
    let oracle = dir.path().join("oracle.json");
    let out = shapflow(&[
        "oracle",
        "--graph",
        s(&g),
        "--model",
        s(&m),
        "--nodes",
        &node,
        "--out",
        s(&oracle),
    ]);
    assert!(out.status.success());
    assert_eq!(
        shapflow::pipeline::load_oracle_records(&oracle)
            .unwrap()
            .len(),
        1
    );

    let csv = dir.path().join("bench.csv");
    let out = shapflow(&[
        "bench",
        "--graph",
        s(&g),
        "--model",
        s(&m),
        "--node",
        &node,
        "--workers",
        "1,2",
        "--samples",
        "200",
        "--force-sampled",
        "--out",
        s(&csv),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(shapflow(&["explain", "--bogus"]).status.code(), Some(1));

    let missing = dir.path().join("none.sfg");
    let out = shapflow(&[
        "explain",
        "--graph",
        s(&missing),
        "--model",
        s(&missing),
        "--nodes",
        "0",
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let (g, m) = generated(dir.path());
    let graph = shapflow::graph::load_graph(&g).unwrap();
    let big = (0..graph.num_nodes())
        .find(|&v| {
            graph
                .extract_computational_graph(v, 2)
                .unwrap()
                .num_players()
                > 22
        })
        .unwrap()
        .to_string();
    let out = shapflow(&[
        "oracle",
        "--graph",
        s(&g),
        "--model",
        s(&m),
        "--nodes",
        &big,
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("22"));
}
