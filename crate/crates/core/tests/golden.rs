//! Frozen reference outputs. Set `REGENERATE_GOLDEN=1` to rewrite them.

use std::path::PathBuf;

use serde_json::{json, Value};
use spatial_memory::construct::{make_token, InstanceTriplet};
use spatial_memory::geometry::Aabb;
use spatial_memory::harness::{run_episode, EpisodeConfig, MemoryMode};
use spatial_memory::nets::{MlpStack, EMBED_DIM};
use spatial_memory::numkern::{Matrix, Rng};
use spatial_memory::refine::{alpha, UpdateStrategy};
use spatial_memory::retrieve::{align_memory, AttentionConfig, Booster};
use spatial_memory::scene::{category_prototype, NoiseSpec};

fn path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn regenerate() -> bool {
    std::env::var_os("REGENERATE_GOLDEN").is_some()
}

/// Exact comparison of a text artifact.
fn check_text(name: &str, text: &str) {
    if regenerate() {
        std::fs::write(path(name), text).unwrap();
        return;
    }
    let want = std::fs::read_to_string(path(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    assert!(want == text, "{name} differs from the golden copy");
}

fn approx(a: &Value, b: &Value, tol: f64, at: &str) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= tol, "{at}: {x} vs {y}");
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{at}: length");
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                approx(u, v, tol, &format!("{at}[{i}]"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(x.keys().collect::<Vec<_>>(), y.keys().collect::<Vec<_>>(), "{at}: keys");
            for (k, u) in x {
                approx(u, &y[k], tol, &format!("{at}.{k}"));
            }
        }
        _ => assert_eq!(a, b, "{at}"),
    }
}

/// Numeric comparison within `tol`.
fn check_numbers(name: &str, value: Value, tol: f64) {
    if regenerate() {
        std::fs::write(path(name), serde_json::to_string_pretty(&value).unwrap() + "\n").unwrap();
        return;
    }
    let want: Value = serde_json::from_str(&std::fs::read_to_string(path(name)).unwrap()).unwrap();
    approx(&value, &want, tol, name);
}

fn rows(m: &Matrix) -> Value {
    json!(m.iter_rows().map(<[f64]>::to_vec).collect::<Vec<_>>())
}

fn fixed_triplet() -> InstanceTriplet {
    InstanceTriplet {
        embedding: category_prototype("mug"),
        category: "mug".into(),
        bbox3d: Aabb::from_center([0.8, 0.3, -0.2], [0.05, 0.04, 0.06]).corners(),
        support_count: 1,
        provenance: vec![(0, 0)],
    }
}

#[test]
fn prng_streams() {
    let mut text = String::new();
    for seed in [0u64, 1, 42] {
        let mut rng = Rng::new(seed);
        let draws: Vec<String> = (0..64).map(|_| format!("{:016x}", rng.next_u64())).collect();
        text.push_str(&format!("{seed}: {}\n", draws.join(" ")));
    }
    check_text("prng.txt", &text);
}

#[test]
fn network_outputs() {
    let nets = MlpStack::seeded(42, 64).unwrap();
    let tok = make_token(&fixed_triplet(), &nets, 0).unwrap();
    let prev = category_prototype("bowl");
    let obs = category_prototype("can");
    let a = alpha(&prev, &obs, &nets, UpdateStrategy::Full).unwrap();
    let mem = spatial_memory::construct::SceneMemory { created_t: 0, tokens: vec![tok.clone()] };
    let aligned = align_memory(&mem, &nets).unwrap();
    let booster = Booster::new(AttentionConfig::default()).unwrap();
    let mut rng = Rng::new(5);
    let x = Matrix::from_vec(3, 64, rng.gaussian_vec(3 * 64)).unwrap();
    let boosted = booster.forward(&x).unwrap();
    assert_eq!(tok.embedding.len(), EMBED_DIM);
    check_numbers(
        "networks.json",
        json!({
            "make_token": tok.embedding,
            "alpha_full": a,
            "align": rows(&aligned),
            "booster": rows(&boosted),
        }),
        1e-9,
    );
}

#[test]
fn episode_rollout() {
    let cfg = EpisodeConfig {
        seed: 0,
        noise: NoiseSpec::noiseless(),
        memory_mode: MemoryMode::Full,
        ..EpisodeConfig::default()
    };
    let (nets, booster) = cfg.build_nets().unwrap();
    let out = run_episode(&cfg, &nets, &booster).unwrap();
    check_text("episode_log.json", &(serde_json::to_string_pretty(&out.log).unwrap() + "\n"));
    check_text("memory.json", &(out.memory.unwrap().to_json().unwrap() + "\n"));
}
