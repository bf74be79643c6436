use moesumm_core::autodiff::Graph;
use moesumm_core::model::{decode_step, encode, forward_log_probs, teacher_forced_logits, Forward, PackedBatch, BOS, EOS};
use moesumm_core::objectives::{generation_loss, max_margin_loss, total_loss, ObjectiveOptions};
use moesumm_core::{ForwardOptions, ModelConfig, Positional, TransformerParams};

fn desk(seed: u64) -> TransformerParams {
    TransformerParams::init(&ModelConfig::desk(), seed).unwrap()
}

#[test]
fn encoder_output_shape() {
    let p = desk(0);
    let (enc, trace) = encode(&p, &[10, 11, 12, 13, EOS], 0, &ForwardOptions::full()).unwrap();
    assert_eq!(enc.shape(), &[5, 64]);
    // two encoder layers, five positions each
    assert_eq!(trace.len(), 10);
    assert!(encode(&p, &[10, 600], 0, &ForwardOptions::full()).is_err());
    assert!(encode(&p, &[10, 11], 3, &ForwardOptions::full()).is_err());
}

#[test]
fn decoder_is_causal() {
    let p = desk(1);
    let src = [40, 41, 42, 43, EOS];
    let a = teacher_forced_logits(&p, &src, &[BOS, 7, 8, 9], 1, &ForwardOptions::full()).unwrap();
    let b = teacher_forced_logits(&p, &src, &[BOS, 7, 200, 300], 1, &ForwardOptions::full()).unwrap();
    assert_eq!(a.shape(), &[4, 512]);
    for r in 0..2 {
        assert_eq!(a.row(r), b.row(r));
    }
    assert_ne!(a.row(2), b.row(2));
    let step = decode_step(&p, &[BOS, 7, 8, 9], &encode(&p, &src, 1, &ForwardOptions::full()).unwrap().0, 1, &ForwardOptions::full())
        .unwrap();
    for (x, y) in step.iter().zip(a.row(3)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn packing_matches_single_sequences() {
    for positional in [Positional::Learned, Positional::Sinusoidal] {
        let cfg = ModelConfig {
            positional,
            ..ModelConfig::desk()
        };
        let p = TransformerParams::init(&cfg, 2).unwrap();
        let pairs: [(&[usize], &[usize]); 3] = [
            (&[20, 21, 22, EOS], &[BOS, 5, 6, EOS]),
            (&[30, 31, 32, 33, 34, 35, EOS], &[BOS, 9, EOS]),
            (&[50, EOS], &[BOS, 50, 51, 52, 53, EOS]),
        ];
        for opts in [ForwardOptions::full(), ForwardOptions::main_only()] {
            let batch = PackedBatch::new(2, &pairs).unwrap();
            let mut g = Graph::new();
            let bound = p.bind_frozen(&mut g);
            let mut f = Forward::new(&mut g, &p.config, &bound);
            let (lp, _) = f.gold_log_probs(&batch, &opts).unwrap();
            let packed = g.value(lp).data().to_vec();
            let single: Vec<f64> = pairs
                .iter()
                .flat_map(|(s, t)| forward_log_probs(&p, s, t, 2, &opts).unwrap())
                .collect();
            assert_eq!(packed.len(), single.len());
            for (x, y) in packed.iter().zip(&single) {
                assert!((x - y).abs() < 1e-12, "{positional:?}");
            }
        }
    }
}

#[test]
fn total_loss_decomposes() {
    let p = desk(3);
    let (src, tgt) = ([9, 41, 300, EOS], [BOS, 77, EOS]);
    let opts = ObjectiveOptions {
        margin_weight: 0.7,
        ..Default::default()
    };
    let l = total_loss(&p, &src, &tgt, 0, &opts).unwrap();
    let full = forward_log_probs(&p, &src, &tgt, 0, &ForwardOptions::full()).unwrap();
    let main = forward_log_probs(&p, &src, &tgt, 0, &ForwardOptions::main_only()).unwrap();
    assert_eq!(full.len(), 2);
    let gen = generation_loss(&full).unwrap();
    let pf: Vec<f64> = full.iter().map(|v| v.exp()).collect();
    let pm: Vec<f64> = main.iter().map(|v| v.exp()).collect();
    let lm = max_margin_loss(&pf, &pm).unwrap();
    assert!((l.gen_loss - gen).abs() < 1e-12);
    assert!((l.margin_loss - lm).abs() < 1e-12);
    assert!((l.total - (gen + 0.7 * lm)).abs() < 1e-12);
    for ((m, f), q) in l.per_token_margins.iter().zip(&pf).zip(&pm) {
        assert!((m - (f - q)).abs() < 1e-12);
    }
    let ablated = total_loss(
        &p,
        &src,
        &tgt,
        0,
        &ObjectiveOptions {
            margin_enabled: false,
            ..opts
        },
    )
    .unwrap();
    assert_eq!(ablated.total, ablated.gen_loss);
    assert!(ablated.per_token_margins.is_empty());
}
