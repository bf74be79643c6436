use std::sync::Arc;
use std::time::Instant;

use moesumm_core::autodiff::{finite_diff_check, AttentionSpan, GradCheckOptions, Graph, Var};
use moesumm_core::model::{PackedBatch, BOS, EOS};
use moesumm_core::objectives::{batch_loss, ObjectiveOptions};
use moesumm_core::{ModelConfig, Result, RoutingOverride, Tensor, TransformerParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn reduce(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let w = g.constant(&w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn check(name: &str, theta: &[Tensor], mut f: impl FnMut(&mut Graph, &[Var]) -> Result<Var>) {
    let report = finite_diff_check(&mut f, theta, &GradCheckOptions::default()).unwrap();
    assert!(report.passed, "{name}: max rel error {}", report.max_rel_error);
}

#[test]
fn primitives_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for round in 0..6 {
        let (r, c, k) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let seed = rng.random::<u64>();

        let (a, b) = (random(&mut rng, &[r, k]), random(&mut rng, &[k, c]));
        check("matmul", &[a.clone(), b.clone()], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            reduce(g, y, seed)
        });
        let bt = random(&mut rng, &[c, k]);
        check("matmul_nt", &[a.clone(), bt], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            reduce(g, y, seed)
        });

        let x = random(&mut rng, &[r, c]);
        let (row, col) = (random(&mut rng, &[c]), random(&mut rng, &[r, 1]));
        check("elementwise", &[x.clone(), random(&mut rng, &[r, c])], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            let e = g.exp(m);
            let p = g.powi(v[0], 3);
            let y = g.add(e, p)?;
            let y = g.affine(y, 0.7, -0.2);
            reduce(g, y, seed)
        });
        check("broadcast", &[x.clone(), row, col], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            let y = g.mul_col(y, v[2])?;
            let t = g.transpose(y)?;
            reduce(g, t, seed)
        });
        check("softmax", &[x.clone()], |g, v| {
            let s = g.softmax(v[0]);
            let l = g.log_softmax(v[0]);
            let y = g.add(s, l)?;
            reduce(g, y, seed)
        });
        check("layer_norm", &[x.clone(), random(&mut rng, &[c]), random(&mut rng, &[c])], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            reduce(g, y, seed)
        });
        check("gelu", &[x.clone()], |g, v| {
            let y = g.gelu(v[0]);
            reduce(g, y, seed)
        });
        let positive = Tensor::new(vec![r, c], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        check("log", &[positive], |g, v| {
            let y = g.log(v[0]);
            reduce(g, y, seed)
        });

        let table = random(&mut rng, &[6, c]);
        let ids: Vec<usize> = (0..r).map(|_| rng.random_range(0..6)).collect();
        let picks: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        check("indexing", &[table, x.clone()], |g, v| {
            let e = g.embedding(v[0], &ids)?;
            let y = g.mul(e, v[1])?;
            let rows: Vec<usize> = (0..r).rev().collect();
            let gathered = g.gather_rows(y, &rows)?;
            let scattered = g.scatter_rows(gathered, &rows, r + 1)?;
            let picked = g.pick(y, &picks)?;
            let a = reduce(g, scattered, seed)?;
            let b = g.mean(picked);
            g.add(a, b)
        });
        check("concat_slice", &[x.clone(), random(&mut rng, &[r, c])], |g, v| {
            let cat = g.concat(&[v[0], v[1]])?;
            let s = g.slice(cat, 1, c)?;
            reduce(g, s, seed)
        });

        let heads = [1, 2][round % 2];
        let width = heads * rng.random_range(1..=4);
        let (nq, nk) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let spans: Arc<[AttentionSpan]> = Arc::from(vec![
            AttentionSpan {
                q_start: 0,
                q_len: nq,
                k_start: 0,
                k_len: nk,
                causal: round % 3 == 0,
            },
            AttentionSpan {
                q_start: nq,
                q_len: 2,
                k_start: nk,
                k_len: 3,
                causal: true,
            },
        ]);
        check(
            "attention",
            &[
                random(&mut rng, &[nq + 2, width]),
                random(&mut rng, &[nk + 3, width]),
                random(&mut rng, &[nk + 3, width]),
            ],
            |g, v| {
                let y = g.attention(v[0], v[1], v[2], heads, spans.clone())?;
                reduce(g, y, seed)
            },
        );
    }
}

#[test]
fn backward_is_linear_over_independent_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs: Vec<Tensor> = (0..4).map(|_| random(&mut rng, &[3, 2])).collect();
    let term = |g: &mut Graph, v: Var| {
        let s = g.softmax(v);
        let p = g.powi(s, 2);
        g.sum(p)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t)).collect();
    let terms: Vec<Var> = vars.iter().map(|&v| term(&mut g, v)).collect();
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t).unwrap();
    }
    let joint = g.backward(total).unwrap();
    for (i, x) in xs.iter().enumerate() {
        let mut h = Graph::new();
        let v = h.param(x);
        let t = term(&mut h, v);
        let alone = h.backward(t).unwrap();
        let a = joint.get(vars[i]).unwrap();
        let b = alone.get(v).unwrap();
        for (p, q) in a.iter().zip(b) {
            assert!((p - q).abs() < 1e-15);
        }
    }
}

#[test]
fn full_loss_gradient_on_desk_model() {
    let start = Instant::now();
    let cfg = ModelConfig::desk();
    let params = TransformerParams::init(&cfg, 0).unwrap();
    let batch = PackedBatch::new(1, &[(&[9, 41, 300, EOS][..], &[BOS, 77, EOS][..])]).unwrap();
    assert_eq!(batch.target_tokens(), 2);
    let opts = ObjectiveOptions {
        margin_weight: 1.0,
        ..Default::default()
    };
    let check_opts = GradCheckOptions {
        max_coords_per_tensor: Some(12),
        seed: 5,
        ..Default::default()
    };
    let report = finite_diff_check(
        |g, vars| {
            let bound = params.layout.map(&mut |&i| vars[i]);
            Ok(batch_loss(g, &params, &bound, &batch, &opts, RoutingOverride::None)?.root)
        },
        &params.tensors,
        &check_opts,
    )
    .unwrap();
    assert_eq!(report.tensors.len(), params.len());
    for t in &report.tensors {
        assert!(t.checked > 0, "{} was not probed", params.info[t.tensor].name);
        assert!(
            t.failures == 0,
            "{}: {:?}",
            params.info[t.tensor].name,
            t.worst
        );
    }
    assert!(report.max_rel_error < 1e-4, "max rel error {}", report.max_rel_error);
    assert!(start.elapsed().as_secs() < 120);
}
