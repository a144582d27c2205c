use rand::Rng as _;

use super::*;
use crate::gradcheck;
use crate::rng::seeded;

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: vocab,
        max_caption_len: 6,
        dropout_p: 0.0,
        attention_dropout: true,
        patch_size: 2,
        image_height: 4,
        image_width: 4,
        layer_norm_eps: 1e-5,
    }
}

/// Replace every parameter with uniform noise so gradients are not tiny.
fn scramble(model: &mut CaptionModel<f64>, scale: f64, seed: u64) {
    let mut rng = seeded(seed);
    for p in model.parameters_mut() {
        for v in p.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn random_patches(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let n = batch * cfg.n_patches() * cfg.patch_dim();
    Tensor::new(
        vec![batch, cfg.n_patches(), cfg.patch_dim()],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn sinusoid_table_values() {
    let pe = sinusoid_positions::<f64>(10, 6).unwrap();
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!((pe.row(1)[0] - 0.8415).abs() < 1e-4);
    assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(sinusoid_positions::<f64>(4, 5).is_err());
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = ModelConfig::default();
    let (d, f, v) = (768usize, 3072usize, cfg.vocab_size);
    let (n, pd) = (576usize, 16 * 16 * 3);
    let attn = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let norm = 2 * d;
    let expect = (pd * d + d + n * d) + 12 * (attn + ffn + 2 * norm) + v * d + 4 * (2 * attn + ffn + 3 * norm) + (d * v + v);
    assert_eq!(Layout::new(&cfg).parameter_count(), expect);
    let mut rng = seeded(0);
    let small = CaptionModel::<f32>::new(ModelConfig::toy(16), &mut rng).unwrap();
    let summed: usize = small.parameters().iter().map(|t| t.numel()).sum();
    assert_eq!(small.parameter_count(), summed);
}

#[test]
fn parameter_names_are_unique() {
    let layout = Layout::new(&ModelConfig::toy(16));
    let mut names: Vec<&str> = layout.specs.iter().map(|s| s.name.as_str()).collect();
    let total = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), total);
}

#[test]
fn from_parameters_rejects_missing_and_misshapen() {
    let cfg = tiny_config(11);
    let mut rng = seeded(1);
    let model = CaptionModel::<f32>::new(cfg.clone(), &mut rng).unwrap();
    let named: Vec<(String, Tensor<f32>)> = model.named_parameters().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert!(CaptionModel::from_parameters(cfg.clone(), named.clone()).is_ok());

    let mut missing = named.clone();
    missing.pop();
    assert!(CaptionModel::from_parameters(cfg.clone(), missing).is_err());

    let mut wrong = named;
    wrong[0].1 = Tensor::zeros(vec![3]).unwrap();
    let err = CaptionModel::from_parameters(cfg, wrong).unwrap_err().to_string();
    assert!(err.contains("patch_embed.weight"), "{err}");
}

#[test]
fn encoder_shape_for_layer_counts() {
    for layers in [1, 2, 6, 12] {
        let cfg = ModelConfig {
            n_enc_layers: layers,
            ..tiny_config(11)
        };
        let mut rng = seeded(layers as u64);
        let model = CaptionModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let mut trace = AttentionTrace::new();
        let mut tape = Tape::no_grad();
        let b = model.bind(&mut tape);
        let p = tape.constant(random_patches(&cfg, 2, 3));
        let m = model.encode(&mut tape, &b, p, &mut Mode::Eval, Some(&mut trace)).unwrap();
        assert_eq!(tape.value(m).dims(), &[2, 4, 8]);
        assert_eq!(trace.of_stack(Stack::EncoderSelf).count(), layers * 2 * 2);
    }
}

#[test]
fn decode_shape_and_errors() {
    let cfg = tiny_config(11);
    let mut rng = seeded(4);
    let model = CaptionModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let patches = random_patches(&cfg, 2, 5);
    let logits = model.logits(&patches, &[1, 4, 5, 1, 6, 7], 3).unwrap();
    assert_eq!(logits.dims(), &[2, 3, 11]);
    assert!(model.logits(&patches, &[1, 4, 11, 1, 6, 7], 3).is_err());
    assert!(model.logits(&patches, &[1; 14], 7).is_err());
    let wrong_res = Tensor::zeros(vec![1, 9, 12]).unwrap();
    assert!(matches!(model.logits(&wrong_res, &[1], 1), Err(Error::Config(_))));
}

#[test]
fn decoder_is_causal() {
    let cfg = tiny_config(11);
    for seed in 0..10 {
        let mut rng = seeded(seed);
        let mut model = CaptionModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
        scramble(&mut model, 0.5, seed + 100);
        let patches = random_patches(&cfg, 1, seed + 200);
        let base: Vec<u32> = (0..6).map(|_| rng.random_range(0..11)).collect();
        let a = model.logits(&patches, &base, 6).unwrap();
        for t in 0..5 {
            let mut other = base.clone();
            for v in other.iter_mut().skip(t + 1) {
                *v = (*v + 1 + rng.random_range(0..10)) % 11;
            }
            let b = model.logits(&patches, &other, 6).unwrap();
            let diff = a.data()[..(t + 1) * 11]
                .iter()
                .zip(&b.data()[..(t + 1) * 11])
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-6, "seed {seed} t {t}: {diff}");
        }
    }
}

#[test]
fn traced_rows_are_distributions() {
    let cfg = tiny_config(11);
    let mut rng = seeded(7);
    let mut model = CaptionModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
    scramble(&mut model, 1.0, 8);
    let mut trace = AttentionTrace::new();
    let mut tape = Tape::no_grad();
    let b = model.bind(&mut tape);
    let p = tape.constant(random_patches(&cfg, 2, 9));
    let m = model.encode(&mut tape, &b, p, &mut Mode::Eval, Some(&mut trace)).unwrap();
    model
        .decode(&mut tape, &b, &[1, 4, 5, 6, 1, 7, 8, 9], 2, 4, m, &mut Mode::Eval, Some(&mut trace))
        .unwrap();
    assert_eq!(trace.maps.len(), 3 * 2 * 2);
    for map in &trace.maps {
        for q in 0..map.n_queries {
            let s: f64 = map.row(q).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            if map.stack == Stack::DecoderSelf {
                assert!(map.row(q)[q + 1..].iter().all(|&v| v == 0.0));
            }
        }
        if map.stack == Stack::DecoderCross {
            assert_eq!((map.n_queries, map.n_keys), (4, cfg.n_patches()));
        }
    }
}

#[test]
fn dropout_only_in_train_mode() {
    let cfg = ModelConfig {
        dropout_p: 0.3,
        ..tiny_config(11)
    };
    let mut rng = seeded(10);
    let model = CaptionModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let patches = random_patches(&cfg, 1, 11);
    let run = |train: bool| {
        let mut r = seeded(12);
        let mut tape = Tape::no_grad();
        let b = model.bind(&mut tape);
        let p = tape.constant(patches.clone());
        let mut mode = if train { Mode::Train(&mut r) } else { Mode::Eval };
        let m = model.encode(&mut tape, &b, p, &mut mode, None).unwrap();
        let out = model.decode(&mut tape, &b, &[1, 4, 5], 1, 3, m, &mut mode, None).unwrap();
        tape.value(out).clone()
    };
    assert_eq!(run(false), run(false));
    assert_eq!(run(true), run(true));
    assert_ne!(run(true), run(false));
}

#[test]
fn end_to_end_gradient_check() {
    let cfg = tiny_config(11);
    let mut rng = seeded(13);
    let mut model = CaptionModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
    scramble(&mut model, 0.5, 14);
    let patches = random_patches(&cfg, 1, 15);
    let tokens = [1u32, 5, 7];
    let targets = [5u32, 7, 2];
    let inputs: Vec<Tensor<f64>> = model.parameters().to_vec();
    let report = gradcheck::check(&inputs, 1e-5, |tape, vars| {
        let bound = Bound::from_vars(vars.to_vec());
        let p = tape.constant(patches.clone());
        let m = model.encode(tape, &bound, p, &mut Mode::Eval, None)?;
        let logits = model.decode(tape, &bound, &tokens, 1, 3, m, &mut Mode::Eval, None)?;
        tape.cross_entropy(logits, &targets, &[1.0; 3])
    })
    .unwrap();
    assert_eq!(report.checked, model.parameter_count());
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

// Plain-loop reference for a single encoder layer.
mod oracle {
    pub fn affine(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
        let out = b.len();
        x.iter()
            .map(|row| {
                (0..out)
                    .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn layer_norm(x: &[Vec<f64>], g: &[f64], b: &[f64], eps: f64) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    pub fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
    }

    pub fn self_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
        let d = q[0].len();
        let dk = d / heads;
        let mut out = vec![vec![0.0; d]; q.len()];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for (i, qi) in q.iter().enumerate() {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    let p = (l - m).exp() / z;
                    for c in cols.clone() {
                        out[i][c] += p * v[j][c];
                    }
                }
            }
        }
        out
    }

    pub fn gelu(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| r.iter().map(|&v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt()))).collect())
            .collect()
    }
}

#[test]
fn one_layer_encoder_matches_composition_oracle() {
    let cfg = tiny_config(11);
    let mut rng = seeded(16);
    let mut model = CaptionModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
    scramble(&mut model, 0.5, 17);
    let patches = random_patches(&cfg, 1, 18);
    let got = model.memory(&patches).unwrap();

    let p = |name: &str| -> Vec<f64> {
        model
            .named_parameters()
            .find(|(n, _)| *n == name)
            .unwrap_or_else(|| panic!("{name}"))
            .1
            .data()
            .to_vec()
    };
    let rows: Vec<Vec<f64>> = (0..4).map(|i| patches.row(i).to_vec()).collect();
    let emb = oracle::affine(&rows, &p("patch_embed.weight"), &p("patch_embed.bias"));
    let pos = p("patch_embed.positions");
    let x: Vec<Vec<f64>> = emb
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().enumerate().map(|(j, v)| v + pos[i * 8 + j]).collect())
        .collect();
    let l = "encoder.0";
    let proj = |w: &str, x: &[Vec<f64>]| {
        oracle::affine(x, &p(&format!("{l}.self_attn.{w}.weight")), &p(&format!("{l}.self_attn.{w}.bias")))
    };
    let ctx = oracle::self_attention(&proj("q", &x), &proj("k", &x), &proj("v", &x), 2);
    let attn = proj("o", &ctx);
    let eps = cfg.layer_norm_eps;
    let h = oracle::layer_norm(&oracle::add(&x, &attn), &p(&format!("{l}.norm1.gain")), &p(&format!("{l}.norm1.bias")), eps);
    let f1 = oracle::affine(&h, &p(&format!("{l}.ffn.fc1.weight")), &p(&format!("{l}.ffn.fc1.bias")));
    let f2 = oracle::affine(&oracle::gelu(&f1), &p(&format!("{l}.ffn.fc2.weight")), &p(&format!("{l}.ffn.fc2.bias")));
    let out = oracle::layer_norm(&oracle::add(&h, &f2), &p(&format!("{l}.norm2.gain")), &p(&format!("{l}.norm2.bias")), eps);

    for (i, row) in out.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!((got.data()[i * 8 + j] - v).abs() < 1e-5);
        }
    }
}

#[test]
fn f32_and_f64_agree() {
    let cfg = tiny_config(11);
    let mut rng = seeded(19);
    let m64 = CaptionModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let m32: CaptionModel<f32> = m64.cast();
    let p64 = random_patches(&cfg, 1, 20);
    let a = m64.logits(&p64, &[1, 4, 6], 3).unwrap();
    let b = m32.logits(&p64.cast(), &[1, 4, 6], 3).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - *y as f64).abs() < 1e-4);
    }
}
