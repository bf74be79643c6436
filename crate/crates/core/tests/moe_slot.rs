use moesumm_core::autodiff::{gelu_scalar, Graph};
use moesumm_core::model::{
    moe_forward, route_classic, route_dataset_aware, top1, DeputyExpert, FfnMode, MainExpert, MoeFfnParams,
    MoeOptions, RoutingOverride,
};
use moesumm_core::{Activation, GateSite, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_slot(selectors: usize) -> MoeFfnParams<Tensor> {
    let one = || Tensor::full(&[1, 1], 1.0);
    MoeFfnParams {
        main: MainExpert {
            w1: one(),
            b1: Tensor::zeros(&[1]),
            w2: one(),
            b2: Tensor::zeros(&[1]),
        },
        deputies: vec![DeputyExpert {
            w1: one(),
            b1: Tensor::zeros(&[1]),
            w2: one(),
        }],
        selectors: (0..selectors).map(|_| one()).collect(),
        classic_gate: Some(one()),
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_slot(rng: &mut ChaCha8Rng, d: usize, hm: usize, hp: usize, np: usize, nd: usize) -> MoeFfnParams<Tensor> {
    MoeFfnParams {
        main: MainExpert {
            w1: random(rng, &[d, hm]),
            b1: random(rng, &[hm]),
            w2: random(rng, &[hm, d]),
            b2: random(rng, &[d]),
        },
        deputies: (0..np)
            .map(|_| DeputyExpert {
                w1: random(rng, &[d, hp]),
                b1: random(rng, &[hp]),
                w2: random(rng, &[hp, d]),
            })
            .collect(),
        selectors: (0..nd).map(|_| random(rng, &[d, np])).collect(),
        classic_gate: Some(random(rng, &[d, np])),
    }
}

fn run(p: &MoeFfnParams<Tensor>, a: &Tensor, ds: usize, mode: FfnMode, opts: &MoeOptions) -> (Tensor, Vec<usize>) {
    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let x = g.constant(a);
    let out = moe_forward(&mut g, x, ds, &bound, mode, opts).unwrap();
    (g.value(out.output).clone(), out.routes.iter().map(|r| r.deputy).collect())
}

#[test]
fn scalar_slot_fuses_main_and_deputy() {
    let p = scalar_slot(1);
    let (x, routes) = run(&p, &Tensor::full(&[1, 1], 1.0), 0, FfnMode::DatasetAware, &MoeOptions::default());
    assert_eq!(routes, vec![0]);
    assert!((x.item() - 2.0 * gelu_scalar(1.0)).abs() < 1e-15);
    assert!((x.item() - 1.6823839812165535).abs() < 1e-12);
    let (m, routes) = run(&p, &Tensor::full(&[1, 1], 1.0), 0, FfnMode::MainOnly, &MoeOptions::default());
    assert!(routes.is_empty());
    assert!((m.item() - 0.8411919906082768).abs() < 1e-12);
}

#[test]
fn gate_site_changes_only_the_deputy_term() {
    // two deputies with identical weights split the gate evenly
    let mut p = scalar_slot(1);
    p.deputies.push(p.deputies[0].clone());
    p.selectors = vec![Tensor::zeros(&[1, 2])];
    let a = Tensor::full(&[1, 1], 1.0);
    let pre = MoeOptions::default();
    let post = MoeOptions {
        gate_site: GateSite::PostActivation,
        ..Default::default()
    };
    let (x_pre, r) = run(&p, &a, 0, FfnMode::DatasetAware, &pre);
    let (x_post, _) = run(&p, &a, 0, FfnMode::DatasetAware, &post);
    assert_eq!(r, vec![0]);
    let main = gelu_scalar(1.0);
    assert!((x_pre.item() - (main + gelu_scalar(0.5))).abs() < 1e-14);
    assert!((x_post.item() - (main + 0.5 * gelu_scalar(1.0))).abs() < 1e-14);
}

#[test]
fn relu_activation() {
    let p = scalar_slot(1);
    let opts = MoeOptions {
        activation: Activation::Relu,
        ..Default::default()
    };
    let (x, _) = run(&p, &Tensor::full(&[1, 1], -2.0), 0, FfnMode::DatasetAware, &opts);
    assert_eq!(x.item(), 0.0);
    let (x, _) = run(&p, &Tensor::full(&[1, 1], 3.0), 0, FfnMode::DatasetAware, &opts);
    assert_eq!(x.item(), 6.0);
}

#[test]
fn ties_route_to_lowest_index() {
    assert_eq!(top1(&[0.25, 0.25, 0.5]), (2, 0.5));
    assert_eq!(top1(&[0.4, 0.4, 0.2]), (0, 0.4));
    let third = 1.0 / 3.0;
    assert_eq!(top1(&[third; 3]).0, 0);
}

#[test]
fn routing_reads_only_its_selector() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = random_slot(&mut rng, 6, 5, 4, 3, 3);
    let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let before = route_dataset_aware(&a, 1, &p).unwrap();
    p.selectors[0] = random(&mut rng, &[6, 3]);
    p.selectors[2] = Tensor::full(&[6, 3], f64::NAN);
    p.classic_gate = Some(Tensor::full(&[6, 3], f64::NAN));
    assert_eq!(route_dataset_aware(&a, 1, &p).unwrap(), before);
    assert!((before.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(route_dataset_aware(&a, 3, &p).is_err());
    p.classic_gate = None;
    assert!(route_classic(&a, &p).is_err());
}

#[test]
fn pinned_routing_uses_that_deputy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = random_slot(&mut rng, 4, 3, 3, 3, 2);
    let a = random(&mut rng, &[5, 4]);
    for k in 0..3 {
        let opts = MoeOptions {
            routing: RoutingOverride::Pin(k),
            ..Default::default()
        };
        let (_, routes) = run(&p, &a, 1, FfnMode::DatasetAware, &opts);
        assert_eq!(routes, vec![k; 5]);
    }
    let mut g = Graph::new();
    let bound = p.bind(&mut g);
    let x = g.constant(&a);
    let opts = MoeOptions {
        routing: RoutingOverride::Pin(3),
        ..Default::default()
    };
    assert!(moe_forward(&mut g, x, 0, &bound, FfnMode::DatasetAware, &opts).is_err());
}

#[test]
fn zero_gate_slot_equals_main_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..100 {
        let d = rng.random_range(1..9);
        let np = rng.random_range(1..5);
        let nd = rng.random_range(1..4);
        let (hm, hp, rows) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..7));
        let p = random_slot(&mut rng, d, hm, hp, np, nd);
        let a = random(&mut rng, &[rows, d]);
        let site = if trial % 2 == 0 {
            GateSite::PreActivation
        } else {
            GateSite::PostActivation
        };
        let zero = MoeOptions {
            gate_site: site,
            routing: RoutingOverride::ZeroGate,
            ..Default::default()
        };
        let (full, _) = run(&p, &a, rng.random_range(0..nd), FfnMode::DatasetAware, &zero);
        let (main, _) = run(&p, &a, 0, FfnMode::MainOnly, &zero);
        assert!(full.max_abs_diff(&main) <= 1e-12, "trial {trial}");
    }
}

#[test]
fn main_only_ignores_deputies_and_selectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = random_slot(&mut rng, 5, 4, 4, 2, 2);
    let a = random(&mut rng, &[3, 5]);
    let (before, _) = run(&p, &a, 0, FfnMode::MainOnly, &MoeOptions::default());
    for dep in &mut p.deputies {
        dep.w1 = Tensor::full(&[5, 4], f64::NAN);
        dep.w2 = Tensor::full(&[4, 5], f64::NAN);
    }
    p.selectors[0] = Tensor::full(&[5, 2], f64::NAN);
    let (after, _) = run(&p, &a, 0, FfnMode::MainOnly, &MoeOptions::default());
    assert!(before.bitwise_eq(&after));
}
