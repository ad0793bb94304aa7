use super::*;
use crate::autodiff::Graph;
use crate::text::{BOS, EOS};

const TAG_A: u32 = 5;
const TAG_B: u32 = 6;

fn tiny(variant: &str) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ffn: 16,
        d_v: 4,
        vocab_size: 14,
        n_fuse_layers: 1,
        n_coattn_layers: 1,
        d_ctrl: 8,
        variant: variant.into(),
        dropout: 0.0,
        eps_ls: 0.1,
        init_seed: 7,
    }
}

fn visual<S: Scalar>(batch: usize, m_v: usize, d_v: usize, seed: u64) -> Tensor<S> {
    let mut data = Vec::new();
    for b in 0..batch {
        let v = crate::vision::pseudo_visual_tokens(&format!("img{b}"), m_v, d_v, seed);
        data.extend(v.tokens.data().iter().map(|&x| S::from_f64(x as f64)));
    }
    Tensor::new(vec![batch, m_v, d_v], data).unwrap()
}

fn batch<S: Scalar>() -> ModelBatch<S> {
    ModelBatch {
        src: vec![vec![TAG_A, BOS, 9, 10, 11, EOS], vec![TAG_B, BOS, 12, EOS]],
        tgt_in: vec![vec![BOS, 13, 9], vec![BOS, 10, 11, 12]],
        tgt_out: vec![vec![13, 9, EOS], vec![10, 11, 12, EOS]],
        visual: Some(visual(2, 3, 4, 0)),
    }
}

/// Runs `f` on an inference-mode context over `model`.
fn with_ctx<S: Scalar, T>(model: &LvpM3Model<S>, f: impl FnOnce(&mut Ctx<'_, S>) -> Result<T>) -> (Graph<S>, T) {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let out = {
        let mut ctx = Ctx::new(&mut g, &bound, model.config(), None);
        f(&mut ctx).unwrap()
    };
    (g, out)
}

#[test]
fn parameter_names_follow_variant() {
    let full = LvpM3Model::<f32>::new(tiny("full")).unwrap();
    assert!(full.params().contains_key("lvpg.fc2.bias"));
    assert!(full.params().contains_key("coattn.0.attn.q.weight"));
    let text = LvpM3Model::<f32>::new(tiny("text_only")).unwrap();
    assert!(!text.params().keys().any(|k| k.starts_with("fuse") || k.starts_with("coattn")));
    let stat = LvpM3Model::<f32>::new(tiny("static")).unwrap();
    assert_eq!(stat.params()["static.weight"].shape(), &[4, 8]);
    let proj = LvpM3Model::<f32>::new(tiny("no_lvpg")).unwrap();
    assert!(proj.params().contains_key("proj.weight"));
    assert!(!proj.params().contains_key("proj.bias"));
}

#[test]
fn unknown_variant_lists_choices() {
    let err = LvpM3Model::<f32>::new(tiny("bogus")).unwrap_err().to_string();
    assert!(err.contains("full") && err.contains("text_only"), "{err}");
}

#[derive(Default)]
struct ZeroPrompts;

impl<S: Scalar> PromptStrategy<S> for ZeroPrompts {
    fn name(&self) -> &'static str {
        "zero"
    }
    fn declare(&self, _c: &ModelConfig, _specs: &mut ParamSpecs) {}
    fn prompts(&self, ctx: &mut Ctx<'_, S>, visual: Var, _tags: &[usize]) -> Result<Var> {
        Ok(ctx.g.scale(visual, S::zero()))
    }
}

#[test]
fn registry_accepts_new_strategies() {
    let mut reg = StrategyRegistry::<f64>::builtin();
    reg.register("zero", || Box::new(ZeroPrompts));
    assert_eq!(reg.names(), ["full", "no_lvpg", "static", "text_only", "zero"]);
    let cfg = ModelConfig {
        d_v: 8,
        ..tiny("zero")
    };
    let model = LvpM3Model::with_registry(cfg, &reg).unwrap();
    assert_eq!(model.variant(), "zero");
    let mut b = batch::<f64>();
    b.visual = Some(visual(2, 3, 8, 0));
    let (g, loss) = with_ctx(&model, |ctx| model.forward_loss(ctx, &b));
    assert!(g.value(loss).item().is_finite());
}

#[test]
fn output_shapes() {
    let model = LvpM3Model::<f64>::new(tiny("full")).unwrap();
    let b = batch::<f64>();
    let (g, (s0, p0, q, logits)) = with_ctx(&model, |ctx| {
        let s0 = model.encode_source(ctx, &b.src)?;
        let v = ctx.g.constant(b.visual.clone().unwrap());
        let p0 = model.prompts(ctx, v, &[TAG_A as usize, TAG_B as usize])?;
        let (s, p) = model.self_fuse(ctx, s0, p0, &[6, 4])?;
        let q = model.co_attention(ctx, s, p)?;
        let logits = model.decode(ctx, q, &[6, 4], &b.tgt_in)?;
        Ok((s0, p0, q, logits))
    });
    assert_eq!(g.shape(s0), &[2, 6, 8]);
    assert_eq!(g.shape(p0), &[2, 3, 8]);
    assert_eq!(g.shape(q), &[2, 6, 8]);
    assert_eq!(g.shape(logits), &[2, 4, 14]);
}

#[test]
fn prompts_reject_wrong_visual_width() {
    let model = LvpM3Model::<f64>::new(tiny("full")).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let mut ctx = Ctx::new(&mut g, &bound, model.config(), None);
    let v = ctx.g.constant(visual(1, 3, 5, 0));
    assert!(matches!(model.prompts(&mut ctx, v, &[5]), Err(Error::Shape { .. })));
}

#[test]
fn decoder_is_causal() {
    let model = LvpM3Model::<f64>::new(tiny("full")).unwrap();
    let b = batch::<f64>();
    let run = |tgt: Vec<Vec<u32>>| {
        let (g, logits) = with_ctx(&model, |ctx| {
            let q = model.memory(ctx, &b.src, b.visual.as_ref())?;
            model.decode(ctx, q, &[6, 4], &[tgt[0].clone(), tgt[0].clone()])
        });
        g.value(logits).clone()
    };
    let base = run(vec![vec![BOS, 13, 9, 10]]);
    let changed = run(vec![vec![BOS, 13, 12, 11]]);
    let v = 14;
    // Positions 0 and 1 only see BOS and 13.
    for i in 0..2 * v {
        assert_eq!(base.data()[i], changed.data()[i]);
    }
    assert!(base.data()[2 * v..].iter().zip(&changed.data()[2 * v..]).any(|(a, b)| a != b));
}

#[test]
fn source_padding_does_not_leak() {
    let model = LvpM3Model::<f64>::new(tiny("full")).unwrap();
    let short = vec![TAG_A, BOS, 9, EOS];
    let long = vec![TAG_B, BOS, 9, 10, 11, 12, 13, EOS];
    let (g1, alone) = with_ctx(&model, |ctx| model.encode_source(ctx, std::slice::from_ref(&short)));
    let (g2, padded) = with_ctx(&model, |ctx| model.encode_source(ctx, &[short.clone(), long.clone()]));
    let a = g1.value(alone).data();
    let p = g2.value(padded).data();
    for i in 0..4 * 8 {
        assert!((a[i] - p[i]).abs() < 1e-5);
    }

    // The same holds after fusion, co-attention and decoding.
    let vis = visual::<f64>(2, 3, 4, 1);
    let first = Tensor::new(vec![1, 3, 4], vis.data()[..12].to_vec()).unwrap();
    let (g1, l1) = with_ctx(&model, |ctx| {
        let q = model.memory(ctx, std::slice::from_ref(&short), Some(&first))?;
        model.decode(ctx, q, &[4], &[vec![BOS, 9]])
    });
    let (g2, l2) = with_ctx(&model, |ctx| {
        let q = model.memory(ctx, &[short.clone(), long.clone()], Some(&vis))?;
        model.decode(ctx, q, &[4, 8], &[vec![BOS, 9], vec![BOS, 9]])
    });
    let a = g1.value(l1).data();
    let p = g2.value(l2).data();
    for i in 0..2 * 14 {
        assert!((a[i] - p[i]).abs() < 1e-5);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let model = LvpM3Model::<f64>::new(tiny("full")).unwrap();
    let b = batch::<f64>();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let mut ctx = Ctx::new(&mut g, &bound, model.config(), None);
    model.forward_loss(&mut ctx, &b).unwrap();
    let probs = ctx.attention.clone();
    assert_eq!(probs.len(), 6);
    for (name, p) in probs {
        let t = g.value(p);
        let lk = *t.shape().last().unwrap();
        for row in t.data().chunks(lk) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "{name}: {s}");
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn controller_differs_per_language() {
    let model = LvpM3Model::<f32>::new(tiny("full")).unwrap();
    let (g, (w, b)) = with_ctx(&model, |ctx| model.controller_forward(ctx, &[TAG_A as usize, TAG_B as usize]));
    assert_eq!(g.shape(w), &[2, 4, 8]);
    assert_eq!(g.shape(b), &[2, 8]);
    let wd = g.value(w).data();
    let diff = wd[..32].iter().zip(&wd[32..]).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn mapping_matches_manual_product() {
    let model = LvpM3Model::<f64>::new(tiny("full")).unwrap();
    let vis = visual::<f64>(1, 3, 4, 2);
    let (g, (w, b, p)) = with_ctx(&model, |ctx| {
        let (w, b) = model.controller_forward(ctx, &[TAG_A as usize])?;
        let v = ctx.g.constant(vis.clone());
        let p = LanguageAware::apply_mapping(ctx, v, w, b)?;
        Ok((w, b, p))
    });
    let (wd, bd, pd) = (g.value(w).data(), g.value(b).data(), g.value(p).data());
    for m in 0..3 {
        for j in 0..8 {
            let mut expect = bd[j];
            for i in 0..4 {
                expect += vis.data()[m * 4 + i] * wd[i * 8 + j];
            }
            assert!((pd[m * 8 + j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn static_prompts_ignore_language() {
    let model = LvpM3Model::<f32>::new(tiny("static")).unwrap();
    let v1 = visual::<f32>(1, 3, 4, 3);
    let two = Tensor::new(vec![2, 3, 4], [v1.data(), v1.data()].concat()).unwrap();
    let (g, p) = with_ctx(&model, |ctx| {
        let v = ctx.g.constant(two.clone());
        model.prompts(ctx, v, &[TAG_A as usize, TAG_B as usize])
    });
    let d = g.value(p).data();
    assert_eq!(d[..24], d[24..]);
    assert!(matches!(
        with_ctx_err(&model, |ctx| model.controller_forward(ctx, &[5]).map(|_| ())),
        Error::Variant { .. }
    ));
}

fn with_ctx_err<S: Scalar>(model: &LvpM3Model<S>, f: impl FnOnce(&mut Ctx<'_, S>) -> Result<()>) -> Error {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let mut ctx = Ctx::new(&mut g, &bound, model.config(), None);
    f(&mut ctx).unwrap_err()
}

#[test]
fn text_only_ignores_vision() {
    let model = LvpM3Model::<f64>::new(tiny("text_only")).unwrap();
    let b = batch::<f64>();
    let (g1, q1) = with_ctx(&model, |ctx| model.memory(ctx, &b.src, b.visual.as_ref()));
    let (g2, q2) = with_ctx(&model, |ctx| model.memory(ctx, &b.src, None));
    let (g3, s0) = with_ctx(&model, |ctx| model.encode_source(ctx, &b.src));
    assert_eq!(g1.value(q1), g2.value(q2));
    assert_eq!(g1.value(q1), g3.value(s0));
    let err = with_ctx_err(&model, |ctx| {
        let v = ctx.g.constant(visual(1, 3, 4, 0));
        let s = model.encode_source(ctx, &[vec![5, 1, 2]])?;
        model.self_fuse(ctx, s, v, &[3]).map(|_| ())
    });
    assert!(matches!(err, Error::Variant { .. }));
}

#[test]
fn vision_variants_require_tokens() {
    let model = LvpM3Model::<f64>::new(tiny("full")).unwrap();
    let err = with_ctx_err(&model, |ctx| model.memory(ctx, &[vec![5, 1, 2]], None).map(|_| ()));
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn zero_sublayers_leave_normalized_embeddings() {
    let mut model = LvpM3Model::<f64>::new(tiny("text_only")).unwrap();
    for (name, t) in model.params_mut().iter_mut() {
        if name.starts_with("enc.") && (name.contains(".attn.o.") || name.contains(".ffn.fc2.")) {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let src = vec![TAG_A, BOS, 9, 10, EOS];
    let (g, s0) = with_ctx(&model, |ctx| model.encode_source(ctx, std::slice::from_ref(&src)));
    let table = &model.params()["embed.weight"];
    let pos = positions::<f64>(5, 8);
    for (t, &id) in src.iter().enumerate() {
        let x: Vec<f64> = (0..8)
            .map(|j| table.row(id as usize)[j] * 8f64.sqrt() + pos.row(t)[j])
            .collect();
        let mean = x.iter().sum::<f64>() / 8.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for j in 0..8 {
            let expect = (x[j] - mean) / (var + LN_EPS).sqrt();
            let got = g.value(s0).data()[t * 8 + j];
            assert!((got - expect).abs() < 1e-4, "{got} vs {expect}");
        }
    }
}

#[test]
fn loss_is_finite_and_dropout_only_in_training() {
    use rand::SeedableRng;
    let cfg = ModelConfig {
        dropout: 0.3,
        ..tiny("full")
    };
    let model = LvpM3Model::<f32>::new(cfg).unwrap();
    let b = batch::<f32>();
    let eval = |rng: Option<&mut rand_chacha::ChaCha8Rng>| {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let mut ctx = Ctx::new(&mut g, &bound, model.config(), rng);
        let l = model.forward_loss(&mut ctx, &b).unwrap();
        g.value(l).item()
    };
    let a = eval(None);
    let c = eval(None);
    assert_eq!(a, c);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let d = eval(Some(&mut rng));
    assert!(a.is_finite() && d.is_finite());
    assert_ne!(a, d);
}

#[test]
fn incremental_log_probs_match_full_decode() {
    let model = LvpM3Model::<f64>::new(tiny("full")).unwrap();
    let src = vec![TAG_A, BOS, 9, 10, EOS];
    let vis = visual::<f64>(1, 3, 4, 4);
    let enc = model.encode_for_decoding(&src, Some(&vis)).unwrap();
    let lp = model.next_log_probs(&enc, &[&[BOS, 9, 10], &[BOS, 11, 12]]).unwrap();
    assert_eq!(lp.len(), 2);
    let z: f64 = lp[0].iter().map(|x| x.exp()).sum();
    assert!((z - 1.0).abs() < 1e-9);
    let (g, logits) = with_ctx(&model, |ctx| {
        let q = model.memory(ctx, std::slice::from_ref(&src), Some(&vis))?;
        model.decode(ctx, q, &[5], &[vec![BOS, 9, 10]])
    });
    let last = log_softmax(&g.value(logits).data()[2 * 14..3 * 14]);
    for (a, b) in last.iter().zip(&lp[0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for variant in ["full", "static", "no_lvpg", "text_only"] {
        let model = LvpM3Model::<f64>::new(tiny(variant)).unwrap();
        let report = model.grad_check(&batch(), 1e-6, 1e-4, None).unwrap();
        assert_eq!(report.checked, model.num_parameters());
        assert!(report.passed(), "{variant}: {report:?}");
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let model = LvpM3Model::<f32>::new(tiny("full")).unwrap();
    let tok = crate::text::train_bpe(["a b ab"], &["en", "de"], 16, 1).unwrap();
    let mut ckpt = Checkpoint::from_model(&model, Some(&tok));
    let m: ParamStore<f32> = model.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    ckpt.optimizer = Some(OptimizerSection {
        meta: serde_json::json!({"step": 3}),
        m: m.clone(),
        v: m,
    });
    let bytes = ckpt.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config, ckpt.config);
    assert_eq!(back.params, ckpt.params);
    assert_eq!(back.optimizer, ckpt.optimizer);
    assert_eq!(back.tokenizer.as_ref().unwrap(), &tok);
    let reloaded = back.model().unwrap();
    for (a, b) in model.params().values().zip(reloaded.params().values()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })));
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

#[test]
fn cast_preserves_values() {
    let model = LvpM3Model::<f32>::new(tiny("full")).unwrap();
    let wide = model.cast::<f64>().unwrap();
    let back = wide.cast::<f32>().unwrap();
    assert_eq!(model.params(), back.params());
}
