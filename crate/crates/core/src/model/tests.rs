use ndarray::{array, Array1, Array2};
use rand::Rng as _;

use super::*;
use crate::corpus::{MSK, PAD};

fn tiny_config(causal: bool) -> ModelConfig {
    ModelConfig {
        d: 8,
        blocks: 1,
        heads: 2,
        max_len: 6,
        ffn_dim: 8,
        dropout: 0.0,
        causal,
        ln_eps: 1e-5,
    }
}

/// Parameters with larger magnitudes than the initializer so gradients are
/// far from round-off.
fn spread_params(config: &ModelConfig, num_tracks: usize, seed_value: u64) -> ModelParams {
    let mut params = init_params(config, num_tracks, seed_value).unwrap();
    let mut rng = seed::rng(seed_value, "spread");
    for (name, t) in params.tensors_mut() {
        for v in t.iter_mut() {
            let base = if name.contains("gamma") { 1.0 } else { 0.0 };
            *v = base + rng.gen_range(-0.5..0.5);
        }
    }
    params.zero_pad_row();
    params
}

#[test]
fn init_values_within_bound() {
    let params = init_params(&ModelConfig::default(), 300, 11).unwrap();
    for t in params.tensors().iter().filter(|t| !t.name.contains("gamma")) {
        assert!(t.data.iter().all(|v| v.abs() <= INIT_BOUND), "{}", t.name);
    }
    assert!(params.item_emb.row(PAD as usize).iter().all(|&v| v == 0.0));
    assert!(params.blocks[0].ln1_gamma.iter().all(|&v| v == 1.0));
    assert!(params.blocks[1].bq.iter().all(|&v| v == 0.0));
    assert_eq!(params.item_emb.dim(), (302, 128));
}

#[test]
fn init_is_deterministic() {
    let a = init_params(&tiny_config(true), 40, 5).unwrap();
    let b = init_params(&tiny_config(true), 40, 5).unwrap();
    let c = init_params(&tiny_config(true), 40, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn truncated_normal_is_flat_on_its_interval() {
    // The N(0,1) density varies by a factor exp(-0.0002) across
    // [-0.02, 0.02], so a KS test against the uniform must not reject.
    let mut rng = seed::rng(17, "ks");
    let n = 100_000;
    let mut xs: Vec<f64> = (0..n).map(|_| truncated_normal(&mut rng, 0.02)).collect();
    xs.sort_by(f64::total_cmp);
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = (x + 0.02) / 0.04;
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            (cdf - lo).abs().max((hi - cdf).abs())
        })
        .fold(0.0, f64::max);
    let critical = 1.628 / (n as f64).sqrt();
    assert!(d < critical, "KS statistic {d} >= {critical}");
}

#[test]
fn gelu_reference_values() {
    assert_eq!(gelu(0.0), 0.0);
    assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    for &x in &[-3.0, -0.7, 0.1, 0.5, 2.2, 5.0] {
        assert!((gelu(x) - gelu(-x) - x).abs() < 1e-12);
        let h = 1e-5;
        let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        assert!((fd - gelu_grad(x)).abs() < 1e-8);
    }
}

#[test]
fn embed_adds_positions() {
    let params = spread_params(&tiny_config(true), 10, 1);
    let tokens = array![[5u32, 3, PAD, 9, 5, 7]];
    let x = embed(&params, tokens.view()).unwrap();
    let e5 = params.item_emb.row(5);
    let expected0 = &e5 + &params.pos_emb.row(0);
    assert_eq!(x.slice(s![0, 0, ..]), expected0);
    // PAD row is zero, so only the positional part remains.
    assert_eq!(x.slice(s![0, 2, ..]), params.pos_emb.row(2));
    // Same token at positions 0 and 4 differs by the positional rows.
    let diff = &x.slice(s![0, 0, ..]) - &x.slice(s![0, 4, ..]);
    let pe_diff = &params.pos_emb.row(0) - &params.pos_emb.row(4);
    for (a, b) in diff.iter().zip(pe_diff.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
    let bad = array![[12u32 + 2]];
    assert!(embed(&params, bad.view()).is_err());
}

fn layer_norm_vec(x: &Array1<f64>, gamma: &Array1<f64>, beta: &Array1<f64>, eps: f64) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (x - mean) / (var + eps).sqrt() * gamma + beta
}

fn matvec(x: &Array1<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let mut out = b.clone();
    for j in 0..w.ncols() {
        for i in 0..w.nrows() {
            out[j] += x[i] * w[[i, j]];
        }
    }
    out
}

#[test]
fn single_position_matches_closed_form() {
    // With one position the attention weight is 1, so the block reduces to
    // LN2(h1 + FFN(h1)) with h1 = LN1(x + (x Wv + bv) Wo + bo).
    for causal in [true, false] {
        let params = spread_params(&tiny_config(causal), 10, 2);
        let b = &params.blocks[0];
        let x: Array1<f64> = &params.item_emb.row(4) + &params.pos_emb.row(0);
        let v = matvec(&x, &b.wv, &b.bv);
        let a = matvec(&v, &b.wo, &b.bo);
        let h1 = layer_norm_vec(&(&x + &a), &b.ln1_gamma, &b.ln1_beta, 1e-5);
        let u = matvec(&h1, &b.w1, &b.b1).mapv(gelu);
        let f = matvec(&u, &b.w2, &b.b2);
        let h2 = layer_norm_vec(&(&h1 + &f), &b.ln2_gamma, &b.ln2_beta, 1e-5);
        let yhat = matvec(&h2, &params.head_w, &params.head_b).mapv(gelu);

        let pass = ForwardPass::run(&params, &[vec![4]], None).unwrap();
        for (got, want) in pass.hidden.row(0).iter().zip(h2.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in pass.predicted.row(0).iter().zip(yhat.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
        let attn = pass.attention(0, 0);
        assert!(attn.iter().all(|&p| p == 1.0));
    }
}

#[test]
fn public_ops_agree_with_packed_pass() {
    let mut cfg = tiny_config(false);
    cfg.blocks = 2;
    let params = spread_params(&cfg, 20, 3);
    let rows = vec![vec![3u32, 4, 5, 6], vec![7u32, MSK, 9]];
    let mut tokens = Array2::from_elem((2, 6), PAD);
    let mut mask = Array2::from_elem((2, 6), false);
    for (b, row) in rows.iter().enumerate() {
        for (i, &t) in row.iter().enumerate() {
            tokens[[b, i]] = t;
            mask[[b, i]] = true;
        }
    }
    let x = embed(&params, tokens.view()).unwrap();
    let h = encoder_forward(&params, &x, mask.view()).unwrap();
    let y = predict_embeddings(&params, &h);
    let pass = ForwardPass::run(&params, &rows, None).unwrap();
    for (b, row) in rows.iter().enumerate() {
        for i in 0..row.len() {
            for k in 0..cfg.d {
                assert!((y[[b, i, k]] - pass.predicted_at(b, i)[k]).abs() < 1e-12);
            }
        }
        for i in row.len()..6 {
            assert!(h.slice(s![b, i, ..]).iter().all(|&v| v == 0.0));
        }
    }
    let mut bad_mask = mask.clone();
    bad_mask[[1, 5]] = true;
    assert!(encoder_forward(&params, &x, bad_mask.view()).is_err());
}

#[test]
fn pad_values_do_not_leak() {
    // Changing the input vectors at PAD positions leaves real outputs alone.
    let params = spread_params(&tiny_config(false), 20, 4);
    let tokens = array![[3u32, 4, 5, PAD, PAD, PAD]];
    let mask = tokens.mapv(|t| t != PAD);
    let x = embed(&params, tokens.view()).unwrap();
    let mut noisy = x.clone();
    noisy.slice_mut(s![0, 3.., ..]).fill(123.0);
    let a = encoder_forward(&params, &x, mask.view()).unwrap();
    let b = encoder_forward(&params, &noisy, mask.view()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn causal_prefix_outputs_ignore_suffix() {
    let mut cfg = tiny_config(true);
    cfg.blocks = 2;
    let params = spread_params(&cfg, 30, 5);
    let mut rng = seed::rng(5, "causal");
    for _ in 0..20 {
        let n = rng.gen_range(2..=6);
        let row: Vec<u32> = (0..n).map(|_| rng.gen_range(2..32)).collect();
        let cut = rng.gen_range(1..n);
        let mut other = row.clone();
        for t in &mut other[cut..] {
            *t = rng.gen_range(2..32);
        }
        let a = ForwardPass::run(&params, &[row], None).unwrap();
        let b = ForwardPass::run(&params, &[other], None).unwrap();
        for i in 0..cut {
            assert_eq!(a.predicted_at(0, i), b.predicted_at(0, i));
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    for causal in [true, false] {
        let mut cfg = tiny_config(causal);
        cfg.blocks = 2;
        let params = spread_params(&cfg, 30, 6);
        let rows = vec![vec![2u32, 3, 4, 5, 6, 7], vec![8, 9], vec![10]];
        let pass = ForwardPass::run(&params, &rows, None).unwrap();
        for block in 0..2 {
            for (r, row) in rows.iter().enumerate() {
                let attn = pass.attention(block, r);
                for h in 0..cfg.heads {
                    for i in 0..row.len() {
                        let sum: f64 = attn.slice(s![h, i, ..]).sum();
                        assert!((sum - 1.0).abs() < 1e-6);
                        if causal {
                            assert!(attn.slice(s![h, i, i + 1..]).iter().all(|&p| p == 0.0));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn scoring_examples() {
    let mut params = ModelParams::zeros(
        &ModelConfig {
            d: 2,
            heads: 1,
            ..tiny_config(true)
        },
        3,
    );
    params.item_emb = array![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
    let y = array![2.0, -1.0];
    let logits = score_candidates(&params, y.view(), &[2, 3, 4]);
    assert_eq!(logits, vec![2.0, -1.0, 2.0 * 0.6 - 0.8]);
    // Unit-norm query equal to a candidate's embedding maximizes its own logit.
    let q = params.item_emb.row(4).to_owned();
    let logits = score_candidates(&params, q.view(), &[2, 3, 4]);
    let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(logits[2], best);
    // Orthogonal query.
    let logits = score_candidates(&params, array![0.0, 1.0].view(), &[2]);
    assert_eq!(logits, vec![0.0]);
    // Swapping two candidate ids swaps their logits.
    let a = score_candidates(&params, y.view(), &[3, 4]);
    let b = score_candidates(&params, y.view(), &[4, 3]);
    assert_eq!((a[0], a[1]), (b[1], b[0]));
}

/// Loss = sum of predicted embeddings weighted by a fixed random probe.
fn probe_loss(params: &ModelParams, rows: &[Vec<u32>], probe: &Array2<f64>) -> f64 {
    let pass = ForwardPass::run(params, rows, None).unwrap();
    (&pass.predicted * probe).sum()
}

#[test]
fn backward_matches_finite_differences() {
    for causal in [true, false] {
        let mut cfg = tiny_config(causal);
        cfg.blocks = 2;
        let params = spread_params(&cfg, 12, 7);
        let rows = vec![vec![2u32, 5, 7, 3, 9, 4], vec![MSK, 8, 13], vec![6]];
        let n: usize = rows.iter().map(Vec::len).sum();
        let mut rng = seed::rng(7, "probe");
        let probe = Array2::from_shape_simple_fn((n, cfg.d), || rng.gen_range(-1.0..1.0));

        let pass = ForwardPass::run(&params, &rows, None).unwrap();
        let mut grads = params.zeros_like();
        pass.backward(&params, &probe, &mut grads);

        let h = 1e-5;
        let analytic = grads.tensors();
        for (ti, t) in analytic.iter().enumerate() {
            let mut worst: f64 = 0.0;
            for idx in 0..t.data.len() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].1[idx] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].1[idx] -= h;
                let fd = (probe_loss(&plus, &rows, &probe) - probe_loss(&minus, &rows, &probe)) / (2.0 * h);
                let err = (fd - t.data[idx]).abs() / (fd.abs() + t.data[idx].abs()).max(1e-3);
                worst = worst.max(err);
            }
            assert!(worst < 1e-5, "{} (causal={causal}): rel err {worst}", t.name);
        }
    }
}

#[test]
fn dropout_only_in_training_mode() {
    let mut cfg = tiny_config(false);
    cfg.dropout = 0.3;
    let params = spread_params(&cfg, 12, 8);
    let rows = vec![vec![2u32, 5, 7, 3]];
    let a = ForwardPass::run(&params, &rows, None).unwrap();
    let b = ForwardPass::run(&params, &rows, None).unwrap();
    assert_eq!(a.predicted, b.predicted);
    let mut rng = seed::rng(1, "dropout");
    let c = ForwardPass::run(&params, &rows, Some(&mut rng)).unwrap();
    assert_ne!(a.predicted, c.predicted);
}

#[test]
fn nan_input_is_reported_with_block() {
    let mut params = spread_params(&tiny_config(true), 12, 9);
    params.item_emb[[3, 0]] = f64::NAN;
    match ForwardPass::run(&params, &[vec![3u32, 4]], None) {
        Err(Error::EncoderNaN { block }) => assert_eq!(block, 0),
        other => panic!("expected NaN fault, got {:?}", other.err()),
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let params = init_params(&tiny_config(false), 30, 10).unwrap();
    save_checkpoint(&path, &params, 10, "abc", serde_json::json!({"mode": "bidirectional"})).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.header.num_tracks, 30);
    assert_eq!(loaded.header.vocab_fingerprint, "abc");
    assert_eq!(loaded.header.config, params.config);
    for (a, b) in params.tensors().iter().zip(loaded.params.tensors().iter()) {
        assert_eq!(a.name, b.name);
        for (x, y) in a.data.iter().zip(b.data) {
            assert_eq!(*x as f32 as f64, *y);
        }
    }

    // Layout: header line, magic, then f32 data whose size matches the manifest.
    let bytes = std::fs::read(&path).unwrap();
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    assert_eq!(&bytes[nl + 1..nl + 1 + CHECKPOINT_MAGIC.len()], CHECKPOINT_MAGIC);
    let data_len = bytes.len() - nl - 1 - CHECKPOINT_MAGIC.len();
    assert_eq!(data_len, 4 * params.num_parameters());

    let opt = dir.path().join("model.opt");
    let m = spread_params(&tiny_config(false), 30, 11);
    let v = spread_params(&tiny_config(false), 30, 12);
    save_optimizer_state(&opt, &m, &v, 42).unwrap();
    let (m2, v2, step) = load_optimizer_state(&opt).unwrap();
    assert_eq!(step, 42);
    assert_eq!(m2.head_w.mapv(|x| x as f32), m.head_w.mapv(|x| x as f32));
    assert_eq!(v2.item_emb.mapv(|x| x as f32), v.item_emb.mapv(|x| x as f32));

    std::fs::write(&path, b"{}\nnot-magic").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
