use std::sync::Arc;

use cyclevc_autograd::gradcheck::{check_gradients, GradCheckOptions};
use cyclevc_autograd::{Binder, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::MelSpec;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_mel(frames: usize, bins: usize, seed: u64) -> MelSpec {
    let mut r = rng(seed);
    MelSpec::new(frames, bins, (0..frames * bins).map(|_| r.random_range(-8.0f32..0.0)).collect()).unwrap()
}

fn generator(cfg: &NetConfig, seed: u64) -> Generator {
    Generator::new(cfg, &MelNorm::identity(cfg.mel_bins), &mut rng(seed)).unwrap()
}

#[test]
fn fusion_shapes_follow_compression() {
    let cfg = NetConfig {
        mel_bins: 8,
        content_channels: 64,
        conformer_layers: 1,
        conformer_ff_mult: 1,
        ref_compress_factor: 4,
        ..NetConfig::desk()
    };
    let gen = generator(&cfg, 0);
    let g = Graph::new();
    let p = Binder::frozen(&g, gen.store());
    let content = g.constant(random_mel(10, 8, 1).to_tensor());
    let reference = g.constant(random_mel(20, 8, 2).to_tensor());
    let zc = gen.encode_content(&p, content).unwrap();
    let s = gen.encode_timbre(&p, reference).unwrap();
    assert_eq!(zc.shape(), [1, 10, 64]);
    assert_eq!(s.shape(), [1, 64]);
    let (_, shapes) = gen.fuse(&p, zc, s, reference).unwrap();
    assert_eq!(shapes.unified, [1, 10, 128]);
    assert_eq!(shapes.compressed_reference, Some([1, 5, 128]));
    assert_eq!(shapes.conformer_input, Some([1, 15, 128]));
    assert_eq!(shapes.output, [1, 10, 128]);
}

#[test]
fn ragged_reference_is_zero_padded() {
    let cfg = NetConfig { ref_compress_factor: 4, ..NetConfig::miniature() };
    let gen = generator(&cfg, 0);
    let g = Graph::new();
    let p = Binder::frozen(&g, gen.store());
    let r = gen.compress_reference(&p, g.constant(random_mel(7, cfg.mel_bins, 3).to_tensor())).unwrap();
    assert_eq!(r.shape(), [1, 2, 2 * cfg.content_channels]);
}

#[test]
fn frozen_content_encoder_gets_no_gradient() {
    let cfg = NetConfig { content_frozen: true, ..NetConfig::miniature() };
    let gen = generator(&cfg, 4);
    let g = Graph::new();
    let p = Binder::trainable(&g, gen.store());
    let out = gen
        .forward(&p, g.constant(random_mel(6, 6, 1).to_tensor()), g.constant(random_mel(5, 6, 2).to_tensor()))
        .unwrap();
    let grads = p.grads(&g.backward(out.square().mean_all()));
    let mut others = 0.0;
    for (id, name, _) in gen.store().iter() {
        let n = grads[id.index()].max_abs();
        if name.starts_with("content.") {
            assert_eq!(n, 0.0, "{name}");
        } else if !name.starts_with("norm.") {
            others += n;
        }
    }
    assert!(others > 0.0);
}

#[test]
fn silence_gives_time_constant_content_interior() {
    let cfg = NetConfig::desk();
    let gen = generator(&cfg, 5);
    let t = 40;
    let silence = MelSpec::new(t, cfg.mel_bins, vec![-11.5; t * cfg.mel_bins]).unwrap();
    let g = Graph::new();
    let p = Binder::frozen(&g, gen.store());
    let zc = gen.encode_content(&p, g.constant(silence.to_tensor())).unwrap().value();
    let c = cfg.content_channels;
    let radius = cfg.content_layers * (cfg.content_kernel / 2);
    let row = |i: usize| &zc.data()[i * c..(i + 1) * c];
    for i in radius + 1..t - radius {
        for (a, b) in row(i).iter().zip(row(radius)) {
            assert!((a - b).abs() < 1e-9, "frame {i}");
        }
    }
}

#[test]
fn timbre_embedding_ignores_frame_order() {
    let cfg = NetConfig::desk();
    let gen = generator(&cfg, 6);
    let mel = random_mel(23, cfg.mel_bins, 7);
    let embed = |m: &MelSpec| {
        let g = Graph::new();
        let p = Binder::frozen(&g, gen.store());
        gen.encode_timbre(&p, g.constant(m.to_tensor())).unwrap().value().data().to_vec()
    };
    assert_eq!(embed(&mel), embed(&mel.reversed()));
}

#[test]
fn conformer_attends_to_reference_segment() {
    let cfg = NetConfig::miniature();
    let gen = generator(&cfg, 8);
    let g = Graph::new();
    let p = Binder::frozen(&g, gen.store());
    let content = g.constant(random_mel(6, 6, 1).to_tensor());
    let reference = g.constant(random_mel(8, 6, 2).to_tensor());
    let u = gen.unify(gen.encode_content(&p, content).unwrap(), gen.encode_timbre(&p, reference).unwrap()).unwrap();
    let real = gen.compress_reference(&p, reference).unwrap();
    let zeros = g.constant(Tensor::zeros(&real.shape()));
    let a = gen.fuse_compressed(&p, u, real).unwrap().value();
    let b = gen.fuse_compressed(&p, u, zeros).unwrap().value();
    let diff = a.zip_map(&b, |x, y| (x - y).abs()).max_abs();
    assert!(diff > 1e-6, "{diff}");
}

#[test]
fn zero_decoder_outputs_zero_mel() {
    let cfg = NetConfig::miniature();
    let mut gen = generator(&cfg, 9);
    let ids: Vec<_> = gen.store().iter().filter(|(_, n, _)| n.starts_with("decoder.")).map(|(id, _, _)| id).collect();
    for id in ids {
        let shape = gen.store().get(id).shape().to_vec();
        gen.store_mut().set(id, Tensor::zeros(&shape));
    }
    let out = gen.convert(&random_mel(6, 6, 1), &random_mel(4, 6, 2)).unwrap();
    assert!(out.values().iter().all(|&v| v == 0.0));
}

#[test]
fn decoder_starts_at_corpus_mean() {
    let cfg = NetConfig::miniature();
    let norm = MelNorm { mean: (0..6).map(|b| -(b as f64)).collect(), std: vec![2.0; 6] };
    let gen = Generator::new(&cfg, &norm, &mut rng(0)).unwrap();
    let id = gen.store().find("decoder.output.bias").unwrap();
    assert_eq!(gen.store().get(id).data(), norm.mean.as_slice());
}

#[test]
fn discriminator_grid() {
    let cfg = NetConfig { mel_bins: 80, ..NetConfig::desk() };
    let d = Discriminator::new(&cfg, &MelNorm::identity(80), &mut rng(0)).unwrap();
    let g = Graph::new();
    let p = Binder::frozen(&g, d.store());
    let s = d.forward(&p, g.constant(random_mel(100, 80, 1).to_tensor())).unwrap();
    assert_eq!(s.shape(), [1, 7, 5]);
    assert_eq!(Discriminator::grid(100, 80), (7, 5));
}

#[test]
fn linear_fusion_ignores_reference_frames() {
    let cfg = NetConfig { fusion: FusionKind::Linear, ..NetConfig::miniature() };
    let gen = generator(&cfg, 10);
    assert!(gen.store().iter().all(|(_, n, _)| !n.starts_with("fusion.layer")));
    let out = gen.convert(&random_mel(6, 6, 1), &random_mel(4, 6, 2)).unwrap();
    assert_eq!((out.frames(), out.bins()), (6, 6));
}

#[test]
fn mismatched_mel_bins_is_a_shape_error() {
    let gen = generator(&NetConfig::miniature(), 0);
    let e = gen.convert(&random_mel(6, 5, 1), &random_mel(4, 6, 2)).unwrap_err();
    assert!(matches!(e, crate::Error::Shape(_)), "{e}");
}

struct Fixed {
    frames_delta: isize,
    channels: usize,
}

impl ExternalContentEncoder for Fixed {
    fn channels(&self) -> usize {
        self.channels
    }

    fn encode(&self, mel: &MelSpec) -> crate::Result<Tensor> {
        let t = (mel.frames() as isize + self.frames_delta) as usize;
        Ok(Tensor::from_fn(&[t, self.channels], |i| i as f64 * 0.01))
    }
}

#[test]
fn external_encoder_alignment() {
    let cfg = NetConfig::miniature();
    let norm = MelNorm::identity(6);
    let ok = Generator::with_external(&cfg, &norm, Arc::new(Fixed { frames_delta: 1, channels: 8 }), &mut rng(0)).unwrap();
    assert!(ok.store().iter().all(|(_, n, _)| !n.starts_with("content.")));
    assert_eq!(ok.convert(&random_mel(6, 6, 1), &random_mel(4, 6, 2)).unwrap().frames(), 6);
    let bad = Generator::with_external(&cfg, &norm, Arc::new(Fixed { frames_delta: 3, channels: 8 }), &mut rng(0)).unwrap();
    let e = bad.convert(&random_mel(6, 6, 1), &random_mel(4, 6, 2)).unwrap_err();
    assert!(matches!(e, crate::Error::Alignment(_)), "{e}");
    let wrong = Generator::with_external(&cfg, &norm, Arc::new(Fixed { frames_delta: 0, channels: 5 }), &mut rng(0));
    assert!(wrong.is_err());
}

#[test]
fn upsampled_content_decodes_to_mel_frames() {
    let cfg = NetConfig { content_upsample: (2, 1), ..NetConfig::miniature() };
    let gen = generator(&cfg, 11);
    let g = Graph::new();
    let p = Binder::frozen(&g, gen.store());
    let zc = gen.encode_content(&p, g.constant(random_mel(5, 6, 1).to_tensor())).unwrap();
    assert_eq!(zc.dim(1), 10);
    let out = gen.convert(&random_mel(5, 6, 1), &random_mel(4, 6, 2)).unwrap();
    assert_eq!(out.frames(), 5);
}

fn assert_gradients(name: &str, inputs: &[Tensor], f: impl for<'g> Fn(&'g Graph, &[cyclevc_autograd::Var<'g>]) -> cyclevc_autograd::Var<'g> + Sync) {
    let rep = check_gradients(inputs, f, GradCheckOptions::default());
    for (i, r) in rep.inputs.iter().enumerate() {
        assert!(r.max_rel_err < 1e-4, "{name} input {i}: {r:?}");
    }
}

#[test]
fn generator_input_gradients() {
    let cfg = NetConfig::miniature();
    let gen = generator(&cfg, 12);
    let w = Tensor::from_fn(&[1, 6, 6], |i| ((i * 7 % 11) as f64 - 5.0) / 5.0);
    assert_gradients("generator", &[random_mel(6, 6, 1).to_tensor(), random_mel(5, 6, 2).to_tensor()], |g, v| {
        let p = Binder::frozen(g, gen.store());
        gen.forward(&p, v[0], v[1]).unwrap().mul(g.constant(w.clone())).sum_all()
    });
}

#[test]
fn discriminator_input_gradients() {
    let cfg = NetConfig::miniature();
    let d = Discriminator::new(&cfg, &MelNorm::identity(6), &mut rng(13)).unwrap();
    assert_gradients("discriminator", &[random_mel(6, 6, 1).to_tensor()], |g, v| {
        let p = Binder::frozen(g, d.store());
        d.forward(&p, v[0]).unwrap().square().sum_all()
    });
}

#[test]
fn output_bias_gradient_sums_output_gradient() {
    // The decoder output bias enters additively, so its gradient equals the
    // gradient of the loss with respect to the output summed over frames.
    let cfg = NetConfig::miniature();
    let gen = generator(&cfg, 14);
    let g = Graph::new();
    let p = Binder::trainable(&g, gen.store());
    let out = gen
        .forward(&p, g.constant(random_mel(6, 6, 1).to_tensor()), g.constant(random_mel(5, 6, 2).to_tensor()))
        .unwrap();
    let grads = p.grads(&g.backward(out.square().sum_all()));
    let bias = gen.store().find("decoder.output.bias").unwrap();
    let ov = out.value();
    for b in 0..6 {
        let expect: f64 = (0..6).map(|t| 2.0 * ov.data()[t * 6 + b]).sum();
        assert!((grads[bias.index()].data()[b] - expect).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn timbre_is_permutation_invariant(frames in 1usize..20, seed in 0u64..1000) {
        let cfg = NetConfig::miniature();
        let gen = generator(&cfg, 1);
        let mel = random_mel(frames, cfg.mel_bins, seed);
        let mut order: Vec<usize> = (0..frames).collect();
        let mut r = rng(seed ^ 0xabc);
        for i in (1..frames).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let shuffled: Vec<f32> = order.iter().flat_map(|&t| mel.row(t).to_vec()).collect();
        let shuffled = MelSpec::new(frames, cfg.mel_bins, shuffled).unwrap();
        let embed = |m: &MelSpec| {
            let g = Graph::new();
            let p = Binder::frozen(&g, gen.store());
            gen.encode_timbre(&p, g.constant(m.to_tensor())).unwrap().value().data().to_vec()
        };
        prop_assert_eq!(embed(&mel), embed(&shuffled));
    }

    #[test]
    fn conversion_preserves_frames(ct in 1usize..12, rt in 1usize..12, seed in 0u64..100) {
        let gen = generator(&NetConfig::miniature(), 2);
        let out = gen.convert(&random_mel(ct, 6, seed), &random_mel(rt, 6, seed + 1)).unwrap();
        prop_assert_eq!((out.frames(), out.bins()), (ct, 6));
        prop_assert!(out.values().iter().all(|v| v.is_finite()));
    }
}
