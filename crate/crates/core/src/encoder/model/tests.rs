use super::*;
use crate::encoder::config::AdapterConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_config() -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        adapter: Some(AdapterConfig {
            hidden_dim: 3,
            scale: 0.5,
            learnable_scale: false,
        }),
        ln_epsilon: 1e-6,
        input_mean: 0.5,
        input_std: 0.5,
    }
}

fn random_image(cfg: &EncoderConfig, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    Tensor::new(
        vec![cfg.image_size, cfg.image_size, cfg.channels],
        (0..n).map(|_| r.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

/// Encoder whose adapters have non-zero up-projections too.
fn randomized(cfg: EncoderConfig, seed: u64) -> Encoder {
    let mut r = rng(seed);
    let mut enc = Encoder::new(cfg, &mut r).unwrap();
    for i in 0..enc.params().len() {
        let group = enc.params().entry(i).group;
        let t = enc.params_mut().value_mut(i);
        if group != ParamGroup::Backbone {
            for v in t.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
    }
    enc
}

fn zero_all(enc: &mut Encoder) {
    for i in 0..enc.params().len() {
        enc.params_mut().value_mut(i).data_mut().fill(0.0);
    }
}

#[test]
fn patch_embed_token_count() {
    let cfg = small_config();
    let enc = Encoder::new(cfg.clone(), &mut rng(0)).unwrap();
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, &[]).unwrap();
    let x = enc.patch_embed(&mut tape, &bound, &[random_image(&cfg, 1)]).unwrap();
    assert_eq!(tape.shape(x), &[1, 5, 8]);
}

#[test]
fn patch_embed_rejects_wrong_image_size() {
    let cfg = small_config();
    let enc = Encoder::new(cfg, &mut rng(0)).unwrap();
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, &[]).unwrap();
    let bad = Tensor::zeros(&[4, 4, 1]);
    assert!(enc.patch_embed(&mut tape, &bound, &[bad]).is_err());
}

#[test]
fn patchify_normalizes_pixels() {
    let enc = Encoder::new(small_config(), &mut rng(0)).unwrap();
    let p = enc.patchify(&[Tensor::full(&[8, 8, 1], 0.5), Tensor::full(&[8, 8, 1], 1.0)]).unwrap();
    assert_eq!(p.shape(), &[8, 16]);
    assert!(p.data()[..64].iter().all(|&v| v == 0.0));
    assert!(p.data()[64..].iter().all(|&v| v == 1.0));
}

#[test]
fn zero_image_with_zero_projection_gives_position_embeddings() {
    let cfg = small_config();
    let mut enc = Encoder::new(cfg.clone(), &mut rng(0)).unwrap();
    enc.params_mut().get_mut("patch_embed.weight").unwrap().data_mut().fill(0.0);
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, &[]).unwrap();
    let x = enc.patch_embed(&mut tape, &bound, &[Tensor::zeros(&[8, 8, 1])]).unwrap();
    let pos = enc.params().get("pos_embed").unwrap().data();
    let cls = enc.params().get("cls_token").unwrap().data();
    let got = tape.value(x).data();
    for i in 0..8 {
        assert_eq!(got[i], pos[i] + cls[i]);
    }
    assert_eq!(&got[8..], &pos[8..]);
}

#[test]
fn patch_projection_is_linear() {
    let cfg = EncoderConfig { input_mean: 0.0, input_std: 1.0, ..small_config() };
    let mut enc = Encoder::new(cfg.clone(), &mut rng(0)).unwrap();
    enc.params_mut().get_mut("pos_embed").unwrap().data_mut().fill(0.0);
    let img = random_image(&cfg, 4);
    let doubled =
        Tensor::new(img.shape().to_vec(), img.data().iter().map(|v| 2.0 * v).collect()).unwrap();
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, &[]).unwrap();
    let a = enc.patch_embed(&mut tape, &bound, &[img]).unwrap();
    let b = enc.patch_embed(&mut tape, &bound, &[doubled]).unwrap();
    let (a, b) = (tape.value(a).data(), tape.value(b).data());
    // skip the class token; patch bias is zero
    for i in 8..a.len() {
        assert!((b[i] - 2.0 * a[i]).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    let one = tape.constant(Tensor::full(&[3], 1.0)).unwrap();
    let zero = tape.constant(Tensor::zeros(&[3])).unwrap();
    let y = tape.layer_norm(x, one, zero, 0.0).unwrap();
    let expected = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
    for (a, b) in tape.value(y).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }

    let beta = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0])).unwrap();
    let y = tape.layer_norm(x, zero, beta, 1e-6).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0]);

    let c = tape.constant(Tensor::full(&[3], 4.2)).unwrap();
    let y = tape.layer_norm(c, one, beta, 1e-6).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0]);
}

fn adapter_leaves(tape: &mut Tape, d: usize, r: usize, down: Vec<f64>, up: Vec<f64>, s: f64) -> AdapterVars {
    AdapterVars {
        down_w: tape.constant(Tensor::new(vec![d, r], down).unwrap()).unwrap(),
        down_b: tape.constant(Tensor::zeros(&[r])).unwrap(),
        up_w: tape.constant(Tensor::new(vec![r, d], up).unwrap()).unwrap(),
        up_b: tape.constant(Tensor::zeros(&[d])).unwrap(),
        scale: AdapterScale::Fixed(s),
    }
}

#[test]
fn adapt_mlp_hand_example() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
    let a = adapter_leaves(&mut tape, 2, 1, vec![1.0, 1.0], vec![0.5, 0.5], 2.0);
    let y = adapt_mlp(&mut tape, x, None, Some(&a)).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 2.0]);
}

#[test]
fn adapt_mlp_reduces_to_mlp() {
    let mut r = rng(9);
    let (d, h, ad) = (4, 6, 2);
    let mut tape = Tape::new();
    let rand = |shape: &[usize], r: &mut ChaCha8Rng| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let x = tape.constant(rand(&[3, d], &mut r)).unwrap();
    let mlp = MlpVars {
        fc1_w: tape.constant(rand(&[d, h], &mut r)).unwrap(),
        fc1_b: tape.constant(rand(&[h], &mut r)).unwrap(),
        fc2_w: tape.constant(rand(&[h, d], &mut r)).unwrap(),
        fc2_b: tape.constant(rand(&[d], &mut r)).unwrap(),
    };
    let plain = adapt_mlp(&mut tape, x, Some(&mlp), None).unwrap();
    let up: Vec<f64> = (0..ad * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let down: Vec<f64> = (0..d * ad).map(|_| r.random_range(-1.0..1.0)).collect();

    let zero_down = adapter_leaves(&mut tape, d, ad, vec![0.0; d * ad], up.clone(), 0.7);
    let y = adapt_mlp(&mut tape, x, Some(&mlp), Some(&zero_down)).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(plain).data());

    let zero_scale = adapter_leaves(&mut tape, d, ad, down, up, 0.0);
    let y = adapt_mlp(&mut tape, x, Some(&mlp), Some(&zero_scale)).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(plain).data());
}

#[test]
fn zero_weights_make_block_the_identity() {
    let cfg = small_config();
    let mut enc = Encoder::new(cfg.clone(), &mut rng(0)).unwrap();
    zero_all(&mut enc);
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, &[]).unwrap();
    let mut r = rng(5);
    let data: Vec<f64> = (0..2 * 5 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
    let x = tape.constant(Tensor::new(vec![2, 5, 8], data.clone()).unwrap()).unwrap();
    let y = enc.block(&mut tape, &bound, x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &data[..]);
}

#[test]
fn single_token_attention_is_the_value_projection() {
    let cfg = small_config();
    let enc = randomized(cfg, 2);
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, &[]).unwrap();
    let mut r = rng(6);
    let data: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let x = tape.constant(Tensor::new(vec![1, 1, 8], data.clone()).unwrap()).unwrap();
    let attn = enc.attention(&mut tape, &bound, x, 0).unwrap();

    let flat = tape.constant(Tensor::new(vec![1, 8], data).unwrap()).unwrap();
    let v = enc.linear(&mut tape, &bound, flat, "blocks.0.attn.v").unwrap();
    let o = enc.linear(&mut tape, &bound, v, "blocks.0.attn.o").unwrap();
    for (a, b) in tape.value(attn).data().iter().zip(tape.value(o).data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn block_is_equivariant_to_patch_token_permutation() {
    let cfg = small_config();
    let enc = randomized(cfg, 3);
    let mut r = rng(11);
    let (t, d) = (5, 8);
    let data: Vec<f64> = (0..t * d).map(|_| r.random_range(-1.0..1.0)).collect();
    // keep the class token in front, reverse the patch tokens
    let order = [0usize, 4, 3, 1, 2];
    let permuted: Vec<f64> = order
        .iter()
        .flat_map(|&i| data[i * d..(i + 1) * d].to_vec())
        .collect();
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, &[]).unwrap();
    let x = tape.constant(Tensor::new(vec![1, t, d], data).unwrap()).unwrap();
    let xp = tape.constant(Tensor::new(vec![1, t, d], permuted).unwrap()).unwrap();
    let y = enc.block(&mut tape, &bound, x, 0).unwrap();
    let yp = enc.block(&mut tape, &bound, xp, 0).unwrap();
    let (y, yp) = (tape.value(y).data(), tape.value(yp).data());
    for (k, &i) in order.iter().enumerate() {
        for j in 0..d {
            assert!((yp[k * d + j] - y[i * d + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn encode_is_deterministic_and_sized() {
    let cfg = small_config();
    let enc = randomized(cfg.clone(), 4);
    let img = random_image(&cfg, 8);
    let a = enc.encode(&img).unwrap();
    let b = enc.encode(&img).unwrap();
    assert_eq!(a.len(), cfg.embed_dim);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn encode_batch_matches_single_encodes_bitwise() {
    let cfg = small_config();
    let enc = randomized(cfg.clone(), 4);
    let images: Vec<Tensor> = (0..40).map(|s| random_image(&cfg, s)).collect();
    let batch = enc.encode_batch(&images).unwrap();
    for (img, z) in images.iter().zip(&batch) {
        let single = enc.encode(img).unwrap();
        assert!(single.iter().zip(z).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn every_norm_gamma_affects_the_feature() {
    let cfg = small_config();
    let enc = randomized(cfg.clone(), 5);
    let img = random_image(&cfg, 9);
    let base = enc.encode(&img).unwrap();
    for idx in enc.select_parameters(ParamMode::Norm) {
        if !enc.params().entry(idx).name.ends_with("gamma") {
            continue;
        }
        let mut probe = enc.clone();
        probe.params_mut().value_mut(idx).data_mut()[0] += 0.25;
        let z = probe.encode(&img).unwrap();
        let moved = z.iter().zip(&base).any(|(a, b)| (a - b).abs() > 1e-9);
        assert!(moved, "{} has no effect", enc.params().entry(idx).name);
    }
}

#[test]
fn parameter_group_counts() {
    let cfg = EncoderConfig::default();
    let enc = Encoder::new(cfg.clone(), &mut rng(0)).unwrap();
    let norm = enc.select_parameters(ParamMode::Norm);
    assert_eq!(norm.len(), 2 * (2 * cfg.depth + 1));
    let adapter = enc.select_parameters(ParamMode::Adapter);
    let adapter_numel: usize = adapter.iter().map(|&i| enc.params().entry(i).value.numel()).sum();
    assert_eq!(adapter_numel, cfg.depth * (2 * 64 * 8 + 8 + 64));
    assert_eq!(adapter_numel, cfg.adapter_param_count());
    assert!(norm.iter().all(|i| !adapter.contains(i)));
    assert!(enc.select_parameters(ParamMode::Head).is_empty());
    assert_eq!(
        enc.select_parameters(ParamMode::All).len(),
        enc.params().len(),
        "without a head, all covers every tensor"
    );

    let learnable = EncoderConfig {
        adapter: Some(AdapterConfig {
            learnable_scale: true,
            ..Default::default()
        }),
        ..cfg
    };
    let enc = Encoder::new(learnable.clone(), &mut rng(0)).unwrap();
    assert_eq!(enc.params().count(ParamGroup::Adapter), learnable.adapter_param_count());
    assert_eq!(learnable.adapter_param_count(), 4 * (2 * 64 * 8 + 8 + 64 + 1));
}

#[test]
fn adapter_fraction_of_default_config() {
    let enc = Encoder::new(EncoderConfig::default(), &mut rng(0)).unwrap();
    let phi = enc.params().count(ParamGroup::Adapter);
    let theta = enc.params().count(ParamGroup::Backbone);
    let frac = phi as f64 / (phi + theta) as f64;
    eprintln!("adapter parameters: {phi} of {} ({:.2}%)", phi + theta, 100.0 * frac);
    assert!(frac > 0.0 && frac < 0.5);
}

#[test]
fn groups_partition_the_store() {
    let enc = Encoder::new(EncoderConfig::default(), &mut rng(0)).unwrap();
    let total: usize = ParamGroup::ALL.iter().map(|&g| enc.params().count(g)).sum();
    let numel: usize = enc.params().entries().iter().map(|e| e.value.numel()).sum();
    assert_eq!(total, numel);
}

#[test]
fn snapshot_restore_reproduces_predictions() {
    let cfg = small_config();
    let mut enc = randomized(cfg.clone(), 6);
    let img = random_image(&cfg, 10);
    let before = enc.encode(&img).unwrap();
    let snap = enc.params().snapshot();
    for i in 0..enc.params().len() {
        enc.params_mut().value_mut(i).data_mut().iter_mut().for_each(|v| *v += 0.1);
    }
    assert_ne!(enc.encode(&img).unwrap(), before);
    enc.params_mut().restore(&snap).unwrap();
    enc.params_mut().restore(&snap).unwrap();
    assert_eq!(enc.params().snapshot(), snap);
    let after = enc.encode(&img).unwrap();
    assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn zero_scale_adapters_match_the_plain_encoder() {
    let mut cfg = small_config();
    cfg.adapter.as_mut().unwrap().scale = 0.0;
    let mut with = randomized(cfg.clone(), 7);
    // give the adapters real weights; s = 0 must still cancel them
    for idx in with.select_parameters(ParamMode::Adapter) {
        with.params_mut().value_mut(idx).data_mut().fill(0.37);
    }
    let plain_cfg = EncoderConfig {
        adapter: None,
        ..cfg.clone()
    };
    let mut plain = Encoder::new(plain_cfg, &mut rng(0)).unwrap();
    for i in 0..plain.params().len() {
        let name = plain.params().entry(i).name.clone();
        let src = with.params().get(&name).unwrap().clone();
        *plain.params_mut().value_mut(i) = src;
    }
    for s in 0..5 {
        let img = random_image(&cfg, 20 + s);
        let a = with.encode(&img).unwrap();
        let b = plain.encode(&img).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn norm_mode_gradients_reach_only_norms() {
    let cfg = small_config();
    let enc = randomized(cfg.clone(), 8);
    let images: Vec<Tensor> = (0..3).map(|s| random_image(&cfg, 30 + s)).collect();
    let trainable = enc.select_parameters(ParamMode::Norm);
    let mut tape = Tape::new();
    let bound = enc.bind(&mut tape, &trainable).unwrap();
    let z = enc.features(&mut tape, &bound, &images).unwrap();
    let w = tape
        .constant(Tensor::new(vec![8, 3], (0..24).map(|v| (v as f64).sin()).collect()).unwrap())
        .unwrap();
    let logits = tape.matmul(z, w).unwrap();
    let p = tape.softmax(logits);
    let lp = tape.log(p, 1e-12);
    let e = tape.mul(p, lp).unwrap();
    let loss = tape.sum(e);
    let grads = tape.backward(loss).unwrap();
    for (i, entry) in enc.params().entries().iter().enumerate() {
        let g = grads.get_or_zeros(bound.var(i), entry.value.shape());
        let nonzero = g.data().iter().any(|&v| v != 0.0);
        if entry.group == ParamGroup::Norm {
            assert!(nonzero, "{} has zero gradient", entry.name);
        } else {
            assert!(!nonzero, "{} received a gradient", entry.name);
        }
    }
}
