use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t4t_core::model::{
    argmax_masks, checkpoint, gradcheck, map_to_tokens, tokens_to_map, Builder, Model, ModelConfig, ParamSet,
    ReductionKind, SpatialReductionAttention, TransformerBlock,
};
use t4t_core::tensor::{grad_check_coords, Tape, Tensor};
use t4t_core::Error;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn zero_param<T: t4t_core::Element>(params: &mut ParamSet<T>, name: &str) {
    let i = params.index_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
    params.tensor_mut(i).data_mut().fill(T::zero());
}

#[test]
fn tiny_shape_ladder_and_full_resolution_heads() {
    let model = Model::new(ModelConfig::tiny().dual_head()).unwrap();
    let params = model.init_params::<f32>(1);
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    let x = tape.constant(Tensor::<f32>::ones(vec![1, 3, 64, 96]));
    let pyr = model.encode_pyramid(&p, &x).unwrap();
    assert_eq!(
        pyr.shapes(),
        [vec![1, 64, 16, 24], vec![1, 128, 8, 12], vec![1, 320, 4, 6], vec![1, 512, 2, 3]]
    );
    let out = model.forward_dual(&p, &x).unwrap();
    assert_eq!(out.general_logits.shape(), [1, 13, 64, 96]);
    assert_eq!(out.trans_logits.shape(), [1, 12, 64, 96]);
}

#[test]
fn indivisible_input_is_rejected() {
    let model = Model::new(ModelConfig::nano()).unwrap();
    let params = model.init_params::<f32>(1);
    let err = model.predict(&params, &Tensor::zeros(vec![1, 3, 48, 32])).unwrap_err();
    assert!(err.is_validation(), "{err}");
    let err = model.predict(&params, &Tensor::zeros(vec![1, 4, 32, 32])).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn forward_dual_needs_dual_config() {
    let model = Model::new(ModelConfig::nano().single_head()).unwrap();
    let params = model.init_params::<f32>(1);
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    let x = tape.constant(Tensor::<f32>::zeros(vec![1, 3, 32, 32]));
    assert!(matches!(model.forward_dual(&p, &x), Err(Error::Config(_))));
    assert_eq!(model.forward(&p, &x).unwrap()[0].shape(), [1, 13, 32, 32]);
}

#[test]
fn dual_head_adds_exactly_one_decoder() {
    for cfg in [ModelConfig::tiny(), ModelConfig::small(), ModelConfig::nano().single_head()] {
        let single = Model::new(cfg.clone().single_head()).unwrap();
        let dual = Model::new(cfg.dual_head()).unwrap();
        let head = |m: &Model, prefix: &str| -> usize {
            m.specs()
                .iter()
                .filter(|s| s.name.starts_with(prefix))
                .map(|s| s.shape.iter().product::<usize>())
                .sum()
        };
        let general = head(&dual, "decoder.general.");
        let trans = head(&dual, "decoder.transparency.");
        assert_eq!(single.param_count(), dual.param_count() - trans);
        assert_eq!(head(&single, "decoder.main."), general);
    }
}

#[test]
fn transparency_head_does_not_touch_general_logits() {
    let model = Model::new(ModelConfig::nano()).unwrap();
    let params = model.init_params::<f32>(3);
    let image = random(&[1, 3, 32, 32], 4).cast::<f32>();
    let before = model.predict(&params, &image).unwrap();
    let mut perturbed = params.clone();
    for i in 0..perturbed.len() {
        if perturbed.names()[i].starts_with("decoder.transparency.") {
            for v in perturbed.tensor_mut(i).data_mut() {
                *v += 0.5;
            }
        }
    }
    let after = model.predict(&perturbed, &image).unwrap();
    assert_eq!(before[0], after[0]);
    assert_ne!(before[1], after[1]);
}

#[test]
fn batch_entries_are_processed_independently() {
    let model = Model::new(ModelConfig::nano()).unwrap();
    let params = model.init_params::<f64>(5);
    let a = random(&[1, 3, 32, 32], 6);
    let b = random(&[1, 3, 32, 32], 7);
    let both = Tensor::from_vec(vec![2, 3, 32, 32], [a.data(), b.data()].concat()).unwrap();
    let joint = model.predict(&params, &both).unwrap();
    for (k, single) in [a, b].iter().enumerate() {
        let alone = model.predict(&params, single).unwrap();
        for (head, out) in alone.iter().enumerate() {
            let n = out.len();
            let slice = &joint[head].data()[k * n..(k + 1) * n];
            for (x, y) in out.data().iter().zip(slice) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn stored_position_embedding_is_used_at_its_own_resolution() {
    let cfg = ModelConfig::nano().with_input_size(64, 64);
    let model = Model::new(cfg).unwrap();
    let params = model.init_params::<f64>(2);
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    for stage in &model.stages {
        let same = stage.position_embedding(&p, stage.pos_grid).unwrap();
        assert_eq!(same.value(), params.get(stage.pos_embed));
        // Resizing through the bilinear kernel at equal size is also exact.
        let map = tokens_to_map(p.var(stage.pos_embed), stage.pos_grid).unwrap();
        let back = map_to_tokens(&map.bilinear_resize(stage.pos_grid.0, stage.pos_grid.1).unwrap()).unwrap();
        assert_eq!(back.value(), params.get(stage.pos_embed));
        let half = stage.position_embedding(&p, (stage.pos_grid.0 / 2, stage.pos_grid.1 / 2)).unwrap();
        assert_eq!(half.shape()[1], stage.pos_grid.0 * stage.pos_grid.1 / 4);
    }
}

fn single_block(c: usize, heads: usize, r: usize, kind: ReductionKind) -> (TransformerBlock, ParamSet<f64>) {
    let mut b = Builder::default();
    let block = TransformerBlock::new(&mut b, "block", c, heads, r, 2, kind, 1e-6);
    let specs = b.finish();
    (block, ParamSet::init(&specs, 11))
}

#[test]
fn uniform_attention_returns_mean_value_token() {
    let mut b = Builder::default();
    let attn = SpatialReductionAttention::new(&mut b, 3, 1, 1, ReductionKind::Projection, 1e-6);
    let specs = b.finish();
    let mut params = ParamSet::<f64>::init(&specs, 1);
    zero_param(&mut params, "attn.q.weight");
    for name in ["attn.v.weight", "attn.proj.weight"] {
        let i = params.index_of(name).unwrap();
        let t = params.tensor_mut(i);
        t.data_mut().fill(0.0);
        for d in 0..3 {
            t.data_mut()[d * 3 + d] = 1.0;
        }
    }
    let x = random(&[1, 4, 3], 9);
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    let out = attn.forward(&p, &tape.constant(x.clone()), (2, 2)).unwrap();
    for n in 0..4 {
        for c in 0..3 {
            let mean: f64 = (0..4).map(|m| x.data()[m * 3 + c]).sum::<f64>() / 4.0;
            assert!((out.value().data()[n * 3 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn reduced_attention_rows_sum_to_one_over_four_keys() {
    for kind in [ReductionKind::Projection, ReductionKind::Pool] {
        let (block, params) = single_block(8, 2, 2, kind);
        let tape = Tape::inference();
        let p = params.bind(&tape, false);
        let x = tape.constant(random(&[2, 16, 8], 3));
        let w = block.attn.attention_weights(&p, &x, (4, 4)).unwrap();
        assert_eq!(w.shape(), [2, 2, 16, 4]);
        for row in w.value().data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_grid_mismatch() {
    let (block, params) = single_block(8, 2, 1, ReductionKind::Pool);
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    let x = tape.constant(random(&[1, 15, 8], 3));
    assert!(block.forward(&p, &x, (4, 4)).is_err());
}

#[test]
fn block_with_zero_output_projections_is_identity() {
    let (block, mut params) = single_block(8, 2, 2, ReductionKind::Projection);
    zero_param(&mut params, "block.attn.proj.weight");
    zero_param(&mut params, "block.fc2.weight");
    let x = random(&[1, 16, 8], 4);
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    let y = block.forward(&p, &tape.constant(x.clone()), (4, 4)).unwrap();
    assert_eq!(y.value(), &x);
    assert_eq!(y.shape(), x.shape());
}

#[test]
fn block_gradients_match_finite_differences() {
    for kind in [ReductionKind::Projection, ReductionKind::Pool] {
        let (block, params) = single_block(4, 2, 2, kind);
        let n = params.len();
        let mut inputs: Vec<Tensor<f64>> = params.tensors().cloned().collect();
        inputs.push(random(&[1, 16, 4], 8));
        let target = random(&[1, 16, 4], 9);
        let coords: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(w, t)| (0..t.len()).map(move |i| (w, i)))
            .collect();
        let report = grad_check_coords(
            |tape, vars| {
                let p = t4t_core::model::Bound::from_vars(vars[..n].to_vec());
                let y = block.forward(&p, &vars[n], (4, 4))?;
                y.mul(&tape.constant(target.clone()))?.sum().pipe_ok()
            },
            &inputs,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{kind:?}: {report:?}");
    }
}

trait PipeOk: Sized {
    fn pipe_ok(self) -> t4t_core::Result<Self> {
        Ok(self)
    }
}
impl<T> PipeOk for T {}

#[test]
fn tpm_with_identity_block_is_projection_then_resize() {
    let model = Model::new(ModelConfig::nano()).unwrap();
    let mut params = model.init_params::<f64>(4);
    for i in 1..=4 {
        zero_param(&mut params, &format!("decoder.general.tpm{i}.block.attn.proj.weight"));
        zero_param(&mut params, &format!("decoder.general.tpm{i}.block.fc2.weight"));
    }
    let head = model.head("general").unwrap();
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    let image = tape.constant(random(&[1, 3, 32, 32], 5));
    let pyr = model.encode_pyramid(&p, &image).unwrap();
    for (tpm, level) in head.tpms.iter().zip(&pyr.levels) {
        let got = tpm.forward(&p, level, (8, 8)).unwrap();
        assert_eq!(got.shape(), [1, 16, 8, 8]);
        let s = level.shape();
        let projected = tokens_to_map(&tpm.proj.forward(&p, &map_to_tokens(level).unwrap()).unwrap(), (s[2], s[3]))
            .unwrap();
        let want = if s[2] == 8 { projected } else { projected.bilinear_resize(8, 8).unwrap() };
        assert_eq!(got.value(), want.value());
    }
}

#[test]
fn fused_features_depend_only_on_surviving_tpms() {
    let model = Model::new(ModelConfig::nano()).unwrap();
    let mut params = model.init_params::<f64>(6);
    for i in 1..=3 {
        zero_param(&mut params, &format!("decoder.general.tpm{i}.proj.weight"));
    }
    let head = model.head("general").unwrap();
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    let image = tape.constant(random(&[1, 3, 32, 32], 5));
    let pyr = model.encode_pyramid(&p, &image).unwrap();
    let base = head.fuse(&p, &pyr).unwrap();
    let mut scrambled = pyr.clone();
    for (i, level) in scrambled.levels.iter_mut().take(3).enumerate() {
        *level = tape.constant(random(level.shape(), 100 + i as u64));
    }
    assert_eq!(head.fuse(&p, &scrambled).unwrap().value(), base.value());
    let only4 = head.tpms[3].forward(&p, &pyr.levels[3], (8, 8)).unwrap();
    assert_eq!(only4.value(), base.value());
}

#[test]
fn zeroing_one_tpm_removes_exactly_its_term() {
    let model = Model::new(ModelConfig::nano()).unwrap();
    let params = model.init_params::<f64>(6);
    let head = model.head("transparency").unwrap();
    let tape = Tape::inference();
    let p = params.bind(&tape, false);
    let image = tape.constant(random(&[1, 3, 32, 32], 5));
    let pyr = model.encode_pyramid(&p, &image).unwrap();
    let full = head.fuse(&p, &pyr).unwrap();
    let term2 = head.tpms[1].forward(&p, &pyr.levels[1], (8, 8)).unwrap();
    let mut zeroed = params.clone();
    zero_param(&mut zeroed, "decoder.transparency.tpm2.proj.weight");
    let pz = zeroed.bind(&tape, false);
    let without = head.fuse(&pz, &pyr).unwrap();
    for ((f, t), w) in full.value().data().iter().zip(term2.value().data()).zip(without.value().data()) {
        assert!((f - t - w).abs() < 1e-12);
    }
}

#[test]
fn classifier_scaling_scales_logits() {
    let model = Model::new(ModelConfig::nano()).unwrap();
    let params = model.init_params::<f64>(8);
    let image = random(&[1, 3, 32, 32], 1);
    let base = model.predict(&params, &image).unwrap();
    let mut scaled = params.clone();
    let i = scaled.index_of("decoder.general.classifier.weight").unwrap();
    for v in scaled.tensor_mut(i).data_mut() {
        *v *= 2.0;
    }
    let out = model.predict(&scaled, &image).unwrap();
    let doubled = base[0].map(|v| 2.0 * v);
    assert_eq!(out[0], doubled);
}

#[test]
fn nano_end_to_end_gradient_check() {
    let check = gradcheck::end_to_end(&ModelConfig::nano(), 42, Some(4), 1e-5).unwrap();
    assert!(check.report.max_rel_err < 1e-4, "{} at {}", check.report.max_rel_err, check.worst_name);
    assert!(check.report.checked > 100);
}

#[test]
fn inference_is_bitwise_repeatable() {
    let model = Model::new(ModelConfig::nano()).unwrap();
    let params = model.init_params::<f32>(9);
    let image = random(&[1, 3, 32, 32], 2).cast::<f32>();
    let first = argmax_masks(&model.predict(&params, &image).unwrap()[1]).unwrap();
    for _ in 0..3 {
        assert_eq!(argmax_masks(&model.predict(&params, &image).unwrap()[1]).unwrap(), first);
    }
}

#[test]
fn argmax_prefers_lower_id_on_ties() {
    let logits = Tensor::from_vec(vec![1, 3, 1, 2], vec![1.0f32, 0.0, 1.0, 5.0, 0.5, 5.0]).unwrap();
    assert_eq!(argmax_masks(&logits).unwrap(), vec![vec![0u8, 1]]);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = ModelConfig::nano();
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init_params::<f32>(12);
    let mut first = Vec::new();
    checkpoint::save(&mut first, &cfg, &params).unwrap();
    assert_eq!(&first[..8], b"T4TCKPT1");
    let loaded = checkpoint::load(&first[..]).unwrap();
    assert_eq!(loaded.config, cfg);
    assert_eq!(loaded.params, params);
    let mut second = Vec::new();
    checkpoint::save(&mut second, &loaded.config, &loaded.params).unwrap();
    assert_eq!(first, second);
}

#[test]
fn checkpoint_rejects_mismatch_and_truncation() {
    let cfg = ModelConfig::nano();
    let model = Model::new(cfg.clone()).unwrap();
    let params = model.init_params::<f32>(12);
    let mut bytes = Vec::new();
    checkpoint::save(&mut bytes, &cfg, &params).unwrap();
    let other = cfg.clone().with_tpm_channels(8);
    assert!(checkpoint::load_matching(&bytes[..], &other).unwrap_err().is_validation());
    assert!(matches!(
        checkpoint::load(&bytes[..bytes.len() - 3]),
        Err(Error::Truncated { .. })
    ));
    // A header whose manifest disagrees with its own config.
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[16..16 + header_len].to_vec()).unwrap();
    let tampered = header.replacen("patch_norm", "patch_nrom", 1);
    let mut forged = bytes[..16].to_vec();
    forged.extend_from_slice(tampered.as_bytes());
    forged.extend_from_slice(&bytes[16 + header_len..]);
    assert!(checkpoint::load(&forged[..]).unwrap_err().is_validation());
    // Parameters laid out for another model are refused on save.
    let wrong = Model::new(other).unwrap().init_params::<f32>(1);
    assert!(checkpoint::save(&mut Vec::new(), &cfg, &wrong).is_err());
}
