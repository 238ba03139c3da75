mod common;

use common::{attention_oracle, unit_gaussian};
use proptest::prelude::*;
use spatial_memory::construct::{MemoryToken, SceneMemory};
use spatial_memory::geometry::Aabb;
use spatial_memory::nets::{MlpStack, WeightMode, EMBED_DIM};
use spatial_memory::numkern::{cosine, grad_check, Matrix, Rng};
use spatial_memory::retrieve::{
    align_memory, booster_transformer, cross_attend, probe_projection, retrieve, AttentionConfig, AttentionMode,
    Booster, CrossAttentionProbe, QueryConfig,
};
use spatial_memory::scene::category_prototype;
use spatial_memory::Error;

fn memory(rows: &[(&str, Vec<f64>)]) -> SceneMemory {
    SceneMemory {
        created_t: 0,
        tokens: rows
            .iter()
            .enumerate()
            .map(|(id, (cat, e))| MemoryToken {
                id,
                category: cat.to_string(),
                embedding: e.clone(),
                bbox3d: Aabb::from_center([id as f64, 0.0, 0.0], [0.1; 3]).corners(),
                last_update_t: 0,
                provenance: vec![],
            })
            .collect(),
    }
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

fn identity_booster() -> Booster {
    Booster::new(AttentionConfig { layers: 3, heads: 4, head_dim: 96, mode: AttentionMode::Identity }).unwrap()
}

#[test]
fn align_examples() {
    let mut rng = Rng::new(1);
    let mem = memory(&[("mug", unit_gaussian(&mut rng, EMBED_DIM)), ("can", unit_gaussian(&mut rng, EMBED_DIM))]);
    let id = MlpStack::new(WeightMode::Identity, EMBED_DIM).unwrap();
    let aligned = align_memory(&mem, &id).unwrap();
    for (row, tok) in aligned.iter_rows().zip(&mem.tokens) {
        assert_eq!(row, tok.embedding.as_slice());
    }
    let zero = MlpStack::new(WeightMode::Zero, 64).unwrap();
    let z = align_memory(&mem, &zero).unwrap();
    assert_eq!((z.rows(), z.cols()), (2, 64));
    assert!(z.iter_rows().flatten().all(|&v| v == 0.0));
    assert!(matches!(align_memory(&SceneMemory::default(), &zero), Err(Error::EmptyMemory)));
    assert!(MlpStack::new(WeightMode::Identity, 64).is_err());
}

#[test]
fn cross_attend_examples() {
    let v = Matrix::from_rows(&[[0.5, -1.0, 2.0]]).unwrap();
    let q = Matrix::from_rows(&[[3.0, 1.0, 0.0], [-2.0, 0.0, 7.0]]).unwrap();
    let (out, a) = cross_attend(&q, &v).unwrap();
    for i in 0..2 {
        assert_eq!(out.row(i), v.row(0));
        assert_eq!(a.row(i), &[1.0]);
    }

    let twins = Matrix::from_rows(&[[0.5, -1.0, 2.0], [0.5, -1.0, 2.0]]).unwrap();
    let (out, _) = cross_attend(&q, &twins).unwrap();
    for i in 0..2 {
        for (o, w) in out.row(i).iter().zip(v.row(0)) {
            assert!((o - w).abs() < 1e-15);
        }
    }

    let q = Matrix::from_rows(&[[1.0, 0.0, 2.0], [-1.0, 3.0, 1.0]]).unwrap();
    let kv = Matrix::from_rows(&[[1.0, 2.0, 0.0], [0.0, -1.0, 1.0], [2.0, 1.0, -2.0]]).unwrap();
    let (out, a) = cross_attend(&q, &kv).unwrap();
    let (want_out, want_a) = attention_oracle(&to_rows(&q), &to_rows(&kv));
    for i in 0..2 {
        for c in 0..3 {
            assert!((out.get(i, c) - want_out[i][c]).abs() < 1e-14);
            assert!((a.get(i, c) - want_a[i][c]).abs() < 1e-15);
        }
    }

    assert!(cross_attend(&Matrix::zeros(1, 2), &kv).is_err());
}

#[test]
fn identity_booster_is_a_pure_residual() {
    let mut rng = Rng::new(2);
    let x = Matrix::from_vec(3, 384, rng.gaussian_vec(3 * 384)).unwrap();
    assert_eq!(booster_transformer(&x, &identity_booster()).unwrap(), x);
}

#[test]
fn booster_preserves_shape() {
    let mut rng = Rng::new(3);
    for (heads, head_dim, n) in [(4, 16, 1), (4, 16, 5), (2, 8, 3), (1, 4, 2)] {
        let b = Booster::new(AttentionConfig { layers: 3, heads, head_dim, mode: AttentionMode::Seeded(7) }).unwrap();
        let d = heads * head_dim;
        let y = b.forward(&Matrix::from_vec(n, d, rng.gaussian_vec(n * d)).unwrap()).unwrap();
        assert_eq!((y.rows(), y.cols()), (n, d));
        assert!(y.iter_rows().flatten().all(|v| v.is_finite()));
    }
    let full = AttentionConfig::full_scale(AttentionMode::Seeded(1));
    assert_eq!(full.d_model(), 2048);
    assert!(Booster::new(AttentionConfig { layers: 0, ..AttentionConfig::default() }).is_err());
}

#[test]
fn retrieval_selects_the_query_token() {
    let nets = MlpStack::new(WeightMode::Identity, EMBED_DIM).unwrap();
    let booster = identity_booster();
    let mem = memory(&[
        ("mug", category_prototype("mug")),
        ("bowl", category_prototype("bowl")),
        ("can", category_prototype("can")),
    ]);
    let r = retrieve(&mem, "can", &nets, &booster, &QueryConfig::default()).unwrap();
    let row = r.attention.row(0);
    assert!(row[2] > row[0] && row[2] > row[1]);
    assert_eq!(r.top1_token_id, 2);
    assert_eq!(r.attention.rows(), 3);
    assert_eq!(r.dump("can").attention.len(), 3);

    match retrieve(&mem, "banana", &nets, &booster, &QueryConfig::default()) {
        Err(Error::UnknownCategory { known, .. }) => assert_eq!(known, vec!["bowl", "can", "mug"]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn retrieval_selectivity_over_seeded_memories() {
    let mut rng = Rng::new(4);
    let d = EMBED_DIM as f64;
    let mut cases = 0;
    while cases < 100 {
        let k = 2 + rng.below(7) as usize;
        let rows: Vec<Vec<f64>> = (0..k).map(|_| unit_gaussian(&mut rng, EMBED_DIM)).collect();
        let separated = (0..k).all(|i| (i + 1..k).all(|j| cosine(&rows[i], &rows[j]).unwrap() < 0.1));
        if !separated {
            continue;
        }
        let pick = rng.below(k as u64) as usize;
        let q: Vec<f64> = rows[pick].iter().map(|v| v * 5.0 * d.sqrt()).collect();
        let (_, a) = cross_attend(&Matrix::row_vector(&q), &Matrix::from_rows(&rows).unwrap()).unwrap();
        assert!(a.get(0, pick) > 0.9, "k={k} weight {}", a.get(0, pick));
        cases += 1;
    }
}

#[test]
fn single_token_memory_gives_unit_attention() {
    let nets = MlpStack::seeded(42, 64).unwrap();
    let booster = Booster::new(AttentionConfig::default()).unwrap();
    let mem = memory(&[("mug", category_prototype("mug"))]);
    let r = retrieve(&mem, "mug", &nets, &booster, &QueryConfig::default()).unwrap();
    assert_eq!(r.attention.cols(), 1);
    assert!(r.attention.iter_rows().all(|row| row == [1.0]));
}

#[test]
fn cross_attention_gradient_matches_finite_differences() {
    let mut rng = Rng::new(6);
    let probe = CrossAttentionProbe {
        kv: Matrix::from_vec(4, 8, rng.gaussian_vec(32)).unwrap(),
        n_queries: 3,
        projection: probe_projection(8, &mut rng),
    };
    assert!(grad_check(&probe, &rng.gaussian_vec(24), 1e-5).unwrap() <= 1e-4);
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed);
    for i in (1..n).rev() {
        p.swap(i, rng.below(i as u64 + 1) as usize);
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), n in 1usize..7, nq in 1usize..4) {
        let mut rng = Rng::new(seed);
        let d = 16;
        let kv = Matrix::from_vec(n, d, rng.gaussian_vec(n * d)).unwrap();
        let q = Matrix::from_vec(nq, d, rng.gaussian_vec(nq * d)).unwrap();
        let perm = shuffled(n, seed ^ 1);
        let rows: Vec<&[f64]> = perm.iter().map(|&i| kv.row(i)).collect();
        let kv_p = Matrix::from_rows(&rows).unwrap();
        let (out, a) = cross_attend(&q, &kv).unwrap();
        let (out_p, a_p) = cross_attend(&q, &kv_p).unwrap();
        for i in 0..nq {
            for c in 0..d {
                prop_assert!((out.get(i, c) - out_p.get(i, c)).abs() <= 1e-12);
            }
            for (k, &src) in perm.iter().enumerate() {
                prop_assert!((a_p.get(i, k) - a.get(i, src)).abs() <= 1e-12);
            }
        }
        let booster = Booster::new(AttentionConfig { layers: 2, heads: 2, head_dim: 8, mode: AttentionMode::Seeded(3) }).unwrap();
        let (x, x_p) = (booster.forward(&out).unwrap(), booster.forward(&out_p).unwrap());
        prop_assert!(x.iter_rows().flatten().zip(x_p.iter_rows().flatten()).all(|(u, v)| (u - v).abs() <= 1e-12));
    }

    #[test]
    fn attention_rows_are_convex_combinations(seed in any::<u64>(), n in 1usize..8, nq in 1usize..4) {
        let mut rng = Rng::new(seed);
        let d = 12;
        let kv = Matrix::from_vec(n, d, rng.gaussian_vec(n * d)).unwrap();
        let q = Matrix::from_vec(nq, d, (0..nq * d).map(|_| 4.0 * rng.gaussian()).collect()).unwrap();
        let (out, a) = cross_attend(&q, &kv).unwrap();
        for i in 0..nq {
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for c in 0..d {
                let lo = (0..n).map(|k| kv.get(k, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..n).map(|k| kv.get(k, c)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo - 1e-12 <= out.get(i, c) && out.get(i, c) <= hi + 1e-12);
            }
        }
    }
}
