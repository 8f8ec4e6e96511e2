//! Acceptance suite: one test per shipping criterion, each printing a
//! PASS line with its measured numbers (run with `--nocapture` to see them).
//!
//! The two training criteria share a stage-1 fixture trained once.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mqvq_core::config::RunConfig;
use mqvq_core::data::generate_synthetic;
use mqvq_core::mqvae::{keep_count, mask_scale_schedule, top_n_positions, MqVae, VaeConfig};
use mqvq_core::quantizer::{codebook_usage, quantize, Codebook};
use mqvq_core::rng::{stream_rng, uniform};
use mqvq_core::sampler::{sample, SamplerConfig};
use mqvq_core::stackformer::{Stackformer, TokenPositionSequence, TransformerConfig};
use mqvq_core::tensor::{finite_difference, rel_err, Tensor};
use mqvq_core::train;

// ---------------------------------------------------------------------
// shared stage-1 fixture (criteria 6, 7, 11)
// ---------------------------------------------------------------------

struct Stage1Fixture {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    checkpoint: PathBuf,
    metrics_text: String,
    final_mse: f64,
    steps_run: usize,
    elapsed: Duration,
}

static STAGE1: OnceLock<Stage1Fixture> = OnceLock::new();

/// Criterion 6 operating point: 8 synthetic 32x32 grayscale images, f=8,
/// K=64, 25% mask ratio.
fn stage1_fixture() -> &'static Stage1Fixture {
    STAGE1.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.path().to_path_buf();
        cfg.data_count = 8;
        cfg.resolution = 32;
        cfg.channels = 1;
        cfg.f = 8;
        cfg.widths = vec![8, 16, 32];
        cfg.n_z = 8;
        cfg.codebook_size = 64;
        cfg.mask_ratio = 0.25;
        cfg.h_sub = 8;
        cfg.steps_vae = 5000;
        cfg.batch_size = 4;
        cfg.lr_vae = 2e-3;
        cfg.eval_every = 100;
        cfg.target_mse = 0.008;
        cfg.log_every = 0;
        cfg.dump_every = 1000;
        let start = Instant::now();
        let out = train::train_stage1::<f32>(&cfg).expect("stage-1 training");
        let elapsed = start.elapsed();
        let metrics_text = std::fs::read_to_string(&out.metrics).unwrap();
        Stage1Fixture {
            _dir: dir,
            cfg,
            checkpoint: out.checkpoint,
            metrics_text,
            final_mse: out.final_eval_mse,
            steps_run: out.steps_run,
            elapsed,
        }
    })
}

// ---------------------------------------------------------------------

/// Criterion 1: quantization matches an exhaustive nearest-neighbor scan
/// exactly on 1000 random vectors (K=64, n_z=8), ties toward the smaller
/// index, in under 5 seconds.
#[test]
fn criterion_01_quantization_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = stream_rng(101, "c1", 0);
    let k = 64;
    let d = 8;
    let codebook = Codebook::<f32>::new(k, d, &mut rng).unwrap();
    let features = Tensor::<f32>::uniform(vec![1000, d], -0.05, 0.05, &mut rng, false);
    let result = quantize(&features, &codebook).unwrap();

    let f = features.to_vec();
    let e = codebook.embeddings.to_vec();
    let mut mismatches = 0usize;
    for row in 0..1000 {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for c in 0..k {
            let mut dist = 0.0f64;
            for j in 0..d {
                let diff = f[row * d + j] as f64 - e[c * d + j] as f64;
                dist += diff * diff;
            }
            // tie-break toward the smaller index: strict improvement only
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        if result.codes[row] != best {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    assert_eq!(mismatches, 0, "codes disagree with the exhaustive scan");
    assert!(elapsed < Duration::from_secs(5), "took {elapsed:?}");

    // the documented tie-break, exercised on an exact tie
    let tied = Codebook::<f32> {
        embeddings: Tensor::param(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        mask_embedding: Tensor::param(vec![2], vec![0.0, 0.0]).unwrap(),
    };
    let z = Tensor::from_vec(vec![1, 2], vec![0.5, 0.5]).unwrap();
    assert_eq!(quantize(&z, &tied).unwrap().codes, vec![0]);
    println!("[criterion 1] PASS - 1000/1000 codes match the exhaustive scan in {elapsed:?}");
}

/// Criterion 2: on a miniature end-to-end stage-1 graph (L=16, n_z=8,
/// H_sub=2) in f64, every parameter's autodiff gradient matches central
/// finite differences (step 1e-5) to relative error < 1e-4 — excluding
/// parameters whose loss path crosses the straight-through quantizer, where
/// finite differences see a locally constant output by construction
/// (encoder, scoring MLP, mask LayerNorm, codebook entries).
#[test]
fn criterion_02_gradient_soundness() {
    let start = Instant::now();
    let cfg = VaeConfig {
        in_channels: 1,
        resolution: 16,
        f: 4,
        widths: vec![4, 8],
        n_z: 8,
        codebook_size: 8,
        mask_ratio: 0.25,
        h_sub: 2,
        epsilon_mask: 0.02,
        beta: 0.25,
    };
    assert_eq!(cfg.grid_len(), 16);
    let mut rng = stream_rng(102, "c2", 0);
    let vae = MqVae::<f64>::new(cfg, &mut rng).unwrap();
    let image = generate_synthetic::<f64>(1, 16, 1, 11).images.remove(0);

    // Probe at a generic parameter point. At the stock initialization every
    // masked slot holds the identical mask embedding, which leaves some
    // group-norm groups with variance at the eps scale — the sqrt kink —
    // where step-1e-5 differences are dominated by curvature, not gradient.
    let mut prng = stream_rng(102, "c2-point", 1);
    for (name, p) in vae.parameters() {
        p.with_data_mut(|d| {
            for v in d.iter_mut() {
                *v = if name.ends_with(".gain") {
                    uniform(&mut prng, 0.7, 1.3)
                } else if name.ends_with(".bias") {
                    uniform(&mut prng, -0.2, 0.2)
                } else {
                    uniform(&mut prng, -0.4, 0.4)
                };
            }
        });
    }

    let out = vae.forward(&image).unwrap();
    out.loss.backward().unwrap();

    let crosses_boundary = |name: &str| {
        name.starts_with("enc.")
            || name.starts_with("mask.")
            || name == "codebook.embeddings"
    };

    let mut checked_params = 0usize;
    let mut checked_elems = 0usize;
    let mut worst = 0.0f64;
    for (name, param) in vae.parameters() {
        if crosses_boundary(&name) {
            continue;
        }
        checked_params += 1;
        let auto = param
            .grad_vec()
            .unwrap_or_else(|| panic!("{name} received no gradient"));
        let fd = finite_difference(&param, || Ok(vae.forward(&image)?.loss.item()), 1e-5).unwrap();
        for (i, (&a, &n)) in auto.iter().zip(fd.iter()).enumerate() {
            let err = rel_err(a, n);
            worst = worst.max(err);
            assert!(err < 1e-4, "{name}[{i}]: autodiff {a} vs fd {n} (rel {err})");
            checked_elems += 1;
        }
    }
    let elapsed = start.elapsed();
    assert!(checked_params >= 10, "only {checked_params} params checked");
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    println!(
        "[criterion 2] PASS - {checked_elems} gradient entries across {checked_params} tensors, worst rel err {worst:.2e}, {elapsed:?}"
    );
}

/// Criterion 3: with epsilon 0.02 and H=8, the masked-key scales equal the
/// analytic chain 0.02^(1/2^(h-1)) to 1e-12 and unmasked scales are exactly
/// 1 at every sub-module.
#[test]
fn criterion_03_mask_update_schedule() {
    let schedule = mask_scale_schedule(0.02, 8);
    for (h, &got) in schedule.iter().enumerate() {
        let want = 0.02f64.powf(1.0 / 2f64.powi(h as i32));
        assert!(
            (got - want).abs() < 1e-12,
            "sub-module {h}: {got} vs analytic {want}"
        );
    }

    // scales as actually constructed by the de-mask stack
    let mut rng = stream_rng(103, "c3", 0);
    let cfg = VaeConfig {
        h_sub: 8,
        epsilon_mask: 0.02,
        ..VaeConfig::default()
    };
    let vae = MqVae::<f32>::new(cfg, &mut rng).unwrap();
    let masked: Vec<bool> = (0..16).map(|l| l % 3 == 0).collect();
    let per_sub = vae.demask.key_scales(&masked);
    assert_eq!(per_sub.len(), 8);
    for (h, scales) in per_sub.iter().enumerate() {
        for (l, &s) in scales.iter().enumerate() {
            if masked[l] {
                assert!((s - schedule[h]).abs() < 1e-15);
            } else {
                assert_eq!(s.to_bits(), 1.0f64.to_bits(), "sub {h} pos {l}");
            }
        }
    }
    println!(
        "[criterion 3] PASS - schedule 0.02 -> {:.6} -> ... -> {:.6}; unmasked scale exactly 1 for all 8 sub-modules",
        schedule[1], schedule[7]
    );
}

/// Criterion 4: in the strict test mode (epsilon = 0), perturbing the mask
/// embedding by random vectors of norm <= 1 changes unmasked-position
/// attention-block outputs by less than 1e-6 (100 trials, every sub-module).
#[test]
fn criterion_04_direction_constraint_invariance() {
    let cfg = VaeConfig {
        in_channels: 1,
        resolution: 16,
        f: 4,
        widths: vec![4, 8],
        n_z: 8,
        codebook_size: 16,
        mask_ratio: 0.25,
        h_sub: 8,
        epsilon_mask: 0.0,
        beta: 0.25,
    };
    let mut rng = stream_rng(104, "c4", 0);
    let vae = MqVae::<f64>::new(cfg, &mut rng).unwrap();
    let image = generate_synthetic::<f64>(1, 16, 1, 4).images.remove(0);
    let feats = vae.encode(&image).unwrap();
    let sel = vae.adaptive_mask(&feats).unwrap();
    let q = quantize(&sel.kept, &vae.codebook).unwrap();
    let l = vae.cfg.grid_len();
    let masked: Vec<bool> = (0..l).map(|i| !sel.positions.contains(&i)).collect();
    let key_scales = vae.demask.key_scales(&masked);
    let d = vae.cfg.n_z;

    let run_blocks = |vae: &MqVae<f64>| -> Vec<Vec<f64>> {
        let grid = vae.fill_grid(&q.quantized, &sel.positions).unwrap();
        key_scales
            .iter()
            .enumerate()
            .map(|(h, ks)| vae.demask.attention(h, &grid, ks).unwrap().to_vec())
            .collect()
    };
    let base = run_blocks(&vae);

    let mut max_diff = 0.0f64;
    for trial in 0..100 {
        let mut t_rng = stream_rng(104, "c4-trial", trial);
        let mut delta: Vec<f64> = (0..d).map(|_| uniform(&mut t_rng, -1.0, 1.0)).collect();
        let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let target = uniform(&mut t_rng, 0.05, 1.0);
        for v in delta.iter_mut() {
            *v *= target / norm.max(1e-12);
        }
        vae.codebook.mask_embedding.with_data_mut(|m| {
            for (x, dx) in m.iter_mut().zip(&delta) {
                *x += dx;
            }
        });
        let perturbed = run_blocks(&vae);
        vae.codebook.mask_embedding.with_data_mut(|m| {
            for (x, dx) in m.iter_mut().zip(&delta) {
                *x -= dx;
            }
        });
        for (h, (b, p)) in base.iter().zip(&perturbed).enumerate() {
            for &pos in &sel.positions {
                for j in 0..d {
                    let diff = (b[pos * d + j] - p[pos * d + j]).abs();
                    max_diff = max_diff.max(diff);
                    assert!(
                        diff < 1e-6,
                        "trial {trial} sub {h} position {pos} dim {j}: diff {diff}"
                    );
                }
            }
        }
    }
    println!(
        "[criterion 4] PASS - 100 trials x 8 blocks, max unmasked-output drift {max_diff:.2e}"
    );
}

/// Criterion 5: top-N selection matches a full-sort oracle on 1000 random
/// score vectors (L=64, alpha=0.75 -> N=48), is invariant under 100 random
/// strictly increasing transforms, and reproduces the 6-kept/10-masked
/// operating point at L=16.
#[test]
fn criterion_05_adaptive_mask_correctness() {
    let mut rng = stream_rng(105, "c5", 0);
    for trial in 0..1000 {
        let scores: Vec<f64> = (0..64).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let kept = top_n_positions(&scores, 0.75).unwrap();
        assert_eq!(kept.len(), 48);
        let mut order: Vec<usize> = (0..64).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        assert_eq!(kept, order[..48].to_vec(), "trial {trial}");
    }

    // monotone-transform invariance of the kept set
    let scores: Vec<f64> = (0..64).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
    let base = top_n_positions(&scores, 0.75).unwrap();
    for trial in 0..100 {
        let a = uniform(&mut rng, 0.1, 3.0);
        let b = uniform(&mut rng, 0.1, 2.0);
        let c = uniform(&mut rng, -1.0, 1.0);
        // strictly increasing: positive-slope affine + tanh + cubic pieces
        let mapped: Vec<f64> = scores
            .iter()
            .map(|&s| a * s + b * (s + c).tanh() + 0.05 * s.powi(3))
            .collect();
        let kept = top_n_positions(&mapped, 0.75).unwrap();
        assert_eq!(kept, base, "monotone trial {trial}");
    }

    // the published operating point: 16 positions, 6 kept, 10 masked
    let alpha = 6.0 / 16.0;
    assert_eq!(keep_count(alpha, 16), 6);
    let scores: Vec<f64> = (0..16).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
    let kept = top_n_positions(&scores, alpha).unwrap();
    assert_eq!(kept.len(), 6);
    assert_eq!(16 - kept.len(), 10);
    println!("[criterion 5] PASS - 1000 sort-oracle trials, 100 monotone maps, 6/16 kept point");
}

/// Criterion 6: stage-1 overfit on 8 synthetic 32x32 grayscale images
/// (f=8, K=64, 25% mask ratio) reaches reconstruction MSE < 0.01 within
/// 5000 steps.
#[test]
fn criterion_06_stage1_overfit() {
    let fx = stage1_fixture();
    assert!(
        fx.final_mse < 0.01,
        "eval MSE {} after {} steps",
        fx.final_mse,
        fx.steps_run
    );
    assert!(fx.steps_run <= 5000);
    assert!(
        fx.elapsed < Duration::from_secs(30 * 60),
        "took {:?}",
        fx.elapsed
    );
    println!(
        "[criterion 6] PASS - MSE {:.6} after {} steps in {:?}",
        fx.final_mse, fx.steps_run, fx.elapsed
    );
}

/// Criterion 7: a 4+2-block, d=128 model memorizes the 8 extracted
/// sequences to joint NLL < 0.2 within 3000 steps, and greedy decoding from
/// a training prefix reproduces that training sequence token-for-token.
#[test]
fn criterion_07_stage2_memorization() {
    let fx = stage1_fixture();
    let start = Instant::now();
    let mut cfg = fx.cfg.clone();
    cfg.steps_ar = 3000;
    cfg.batch_size = 8;
    cfg.eval_every = 25;
    cfg.target_nll = 0.18;
    cfg.lr_ar = 1e-3;
    cfg.warmup_ar = 50;
    assert_eq!(cfg.d_model, 128);
    assert_eq!(cfg.code_blocks, 4);
    assert_eq!(cfg.pos_blocks, 2);
    let out = train::train_stage2::<f32>(&cfg).expect("stage-2 training");
    let elapsed = start.elapsed();
    assert!(
        out.final_joint_nll < 0.2,
        "joint NLL {} after {} steps",
        out.final_joint_nll,
        out.steps_run
    );
    assert!(out.steps_run <= 3000);
    assert!(out.vae_params_unchanged, "stage-1 parameters moved");
    assert!(elapsed < Duration::from_secs(30 * 60), "took {elapsed:?}");

    // greedy reproduction from a disambiguating training prefix
    let vae = train::load_vae::<f32>(&cfg, &fx.checkpoint).unwrap();
    let model = {
        let (m, _) = train::load_stackformer_self_describing::<f32>(&out.checkpoint).unwrap();
        m
    };
    let dataset = mqvq_core::data::build_dataset::<f32>(&cfg).unwrap();
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let sequences = train::extract_sequences(&vae, &dataset, &indices, &cfg).unwrap();

    let target = &sequences[0];
    let n = target.payload_len();
    // shortest prefix that uniquely identifies the target among all eight
    let mut prefix_len = 1;
    while prefix_len < n {
        let ambiguous = sequences.iter().skip(1).any(|s| {
            s.payload_codes()[..prefix_len] == target.payload_codes()[..prefix_len]
                && s.payload_positions()[..prefix_len] == target.payload_positions()[..prefix_len]
        });
        if !ambiguous {
            break;
        }
        prefix_len += 1;
    }

    let mut codes = target.codes[..1 + prefix_len].to_vec();
    let mut positions = target.positions[..1 + prefix_len].to_vec();
    let mut used = vec![false; model.cfg.grid_len];
    for &p in &positions[1..] {
        used[p] = true;
    }
    for _ in prefix_len..n {
        let seq = TokenPositionSequence {
            codes: codes.clone(),
            positions: positions.clone(),
            n_c: 1,
        };
        let h_c = model.code_forward(&seq).unwrap();
        let logits = model
            .code_head
            .forward(&h_c.slice_rows(seq.len() - 1, 1).unwrap())
            .unwrap()
            .to_vec();
        let next_code = logits[..model.cfg.codebook_size]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        codes.push(next_code);
        let h_p = model.position_hidden(&h_c, 1, &codes[1..]).unwrap();
        let plogits = model
            .pos_head
            .forward(&h_p.slice_rows(h_p.shape()[0] - 1, 1).unwrap())
            .unwrap()
            .to_vec();
        let mut best = usize::MAX;
        let mut best_val = f32::NEG_INFINITY;
        for p in 0..model.cfg.grid_len {
            if !used[p] && plogits[p] > best_val {
                best_val = plogits[p];
                best = p;
            }
        }
        used[best] = true;
        positions.push(best);
    }
    assert_eq!(codes, target.codes, "greedy codes diverged from the training sequence");
    assert_eq!(
        positions, target.positions,
        "greedy positions diverged from the training sequence"
    );
    println!(
        "[criterion 7] PASS - joint NLL {:.4} after {} steps in {:?}; greedy reproduction from a {}-pair prefix",
        out.final_joint_nll, out.steps_run, elapsed, prefix_len
    );
}

/// Criterion 8: 1000 samples at N = L = 16 always produce distinct in-range
/// positions (a full permutation), in-range codes, and decodable image files.
#[test]
fn criterion_08_sampling_validity_fuzz() {
    let start = Instant::now();
    let mut rng = stream_rng(108, "c8", 0);
    let vae_cfg = VaeConfig {
        in_channels: 1,
        resolution: 16,
        f: 4,
        widths: vec![4, 8],
        n_z: 8,
        codebook_size: 16,
        mask_ratio: 0.0,
        h_sub: 2,
        epsilon_mask: 0.02,
        beta: 0.25,
    };
    let vae = MqVae::<f32>::new(vae_cfg, &mut rng).unwrap();
    let ar_cfg = TransformerConfig {
        code_blocks: 1,
        pos_blocks: 1,
        d_model: 32,
        heads: 2,
        ff_mult: 2,
        codebook_size: 16,
        grid_len: 16,
        num_classes: 0,
    };
    let model = Stackformer::<f32>::new(ar_cfg, &mut rng).unwrap();
    let sampler_cfg = SamplerConfig {
        steps: 16,
        top_k: 8,
        top_p: 0.95,
        temperature: 1.1,
        seed: 0,
        greedy: false,
    };
    let dir = tempfile::tempdir().unwrap();

    for run in 0..1000u64 {
        let mut run_rng = stream_rng(108, "c8-run", run);
        let out = sample(&model, &vae, &sampler_cfg, None, &mut run_rng).unwrap();
        let mut positions = out.sequence.payload_positions().to_vec();
        assert_eq!(positions.len(), 16, "run {run}");
        positions.sort_unstable();
        assert_eq!(positions, (0..16).collect::<Vec<_>>(), "run {run}: not a permutation");
        assert!(
            out.sequence.payload_codes().iter().all(|&c| c < 16),
            "run {run}: code out of range"
        );

        let path = dir.path().join("sample.pgm");
        mqvq_core::image::write_image(
            &path,
            &mqvq_core::image::tensor_to_image(&out.image).unwrap(),
        )
        .unwrap();
        let back = mqvq_core::image::read_image(&path).unwrap();
        assert_eq!((back.width, back.height, back.channels), (16, 16, 1), "run {run}");
    }
    let elapsed = start.elapsed();
    println!("[criterion 8] PASS - 1000 sampled sequences valid and decodable in {elapsed:?}");
}

/// Criterion 9: with zeroed output heads at the shipping scale (K=64,
/// L=16), the NLLs sit at ln(vocabulary) within 1e-4.
#[test]
fn criterion_09_uniform_logit_nll_anchors() {
    let mut rng = stream_rng(109, "c9", 0);
    let cfg = TransformerConfig {
        code_blocks: 4,
        pos_blocks: 2,
        d_model: 128,
        heads: 4,
        ff_mult: 4,
        codebook_size: 64,
        grid_len: 16,
        num_classes: 0,
    };
    let code_vocab = cfg.code_vocab();
    let pos_vocab = cfg.pos_vocab();
    let model = Stackformer::<f64>::new(cfg, &mut rng).unwrap();
    model.code_head.weight.with_data_mut(|d| d.fill(0.0));
    model.code_head.bias.with_data_mut(|d| d.fill(0.0));
    model.pos_head.weight.with_data_mut(|d| d.fill(0.0));
    model.pos_head.bias.with_data_mut(|d| d.fill(0.0));

    let seq = TokenPositionSequence::from_payload(
        &[3, 17, 42, 8],
        &[1, 5, 9, 14],
        None,
        &model.cfg,
    )
    .unwrap();
    let (code, pos) = model.losses(&seq).unwrap();
    let code_want = (code_vocab as f64).ln();
    let pos_want = (pos_vocab as f64).ln();
    assert!(
        (code.item() - code_want).abs() < 1e-4,
        "code NLL {} vs ln({code_vocab}) = {code_want}",
        code.item()
    );
    assert!(
        (pos.item() - pos_want).abs() < 1e-4,
        "position NLL {} vs ln({pos_vocab}) = {pos_want}",
        pos.item()
    );
    println!(
        "[criterion 9] PASS - code NLL ln({code_vocab}) and position NLL ln({pos_vocab}) within 1e-4"
    );
}

/// Criterion 10: checkpoints round-trip bit-exactly, and a run interrupted
/// at step 100 and resumed reproduces the uninterrupted 200-step loss trace
/// step for step.
#[test]
fn criterion_10_checkpoint_and_resume() {
    // bit-exact round trip through parse -> save
    let fx = stage1_fixture();
    let original = std::fs::read(&fx.checkpoint).unwrap();
    let parsed = mqvq_core::checkpoint::Checkpoint::load(&fx.checkpoint).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let copy_path = dir.path().join("copy.ckpt");
    parsed.save(&copy_path).unwrap();
    assert_eq!(
        std::fs::read(&copy_path).unwrap(),
        original,
        "re-serialized checkpoint differs"
    );

    // resume determinism over 200 steps
    let tiny = |out: &std::path::Path| {
        let mut cfg = RunConfig::default();
        cfg.out_dir = out.to_path_buf();
        cfg.resolution = 16;
        cfg.f = 4;
        cfg.widths = vec![4, 8];
        cfg.codebook_size = 16;
        cfg.h_sub = 2;
        cfg.data_count = 4;
        cfg.batch_size = 2;
        cfg.steps_vae = 200;
        cfg.log_every = 0;
        cfg.eval_every = 0;
        cfg.dump_every = 0;
        cfg
    };

    let full_dir = tempfile::tempdir().unwrap();
    let full = train::train_stage1::<f32>(&tiny(full_dir.path())).unwrap();
    assert_eq!(full.losses.len(), 200);

    let split_dir = tempfile::tempdir().unwrap();
    let mut first_half = tiny(split_dir.path());
    first_half.steps_vae = 100;
    let half = train::train_stage1::<f32>(&first_half).unwrap();
    assert_eq!(half.losses.len(), 100);

    let mut second_half = tiny(split_dir.path());
    second_half.steps_vae = 200;
    second_half.resume = half.checkpoint.display().to_string();
    let resumed = train::train_stage1::<f32>(&second_half).unwrap();
    assert_eq!(resumed.losses.len(), 100);

    let mut spliced = half.losses.clone();
    spliced.extend(&resumed.losses);
    for (step, (a, b)) in full.losses.iter().zip(&spliced).enumerate() {
        assert_eq!(a, b, "loss diverged at step {step}: {a} vs {b}");
    }

    // resuming under a different architecture is rejected
    let mut wrong = tiny(split_dir.path());
    wrong.codebook_size = 32;
    wrong.resume = half.checkpoint.display().to_string();
    assert!(matches!(
        train::train_stage1::<f32>(&wrong),
        Err(mqvq_core::Error::ConfigDigestMismatch { .. })
    ));
    println!("[criterion 10] PASS - bit-exact round trip; 200-step resume trace identical");
}

/// Criterion 11: the usage metric reproduces exact hand-built percentages,
/// and criterion 6's training emitted a non-decreasing usage column.
#[test]
fn criterion_11_codebook_usage_metric() {
    // exact arithmetic
    assert_eq!(codebook_usage(&[vec![0]], 1024).unwrap(), 100.0 / 1024.0);
    assert_eq!(
        codebook_usage(&[vec![0]], 1024).unwrap(),
        0.09765625
    );
    assert_eq!(
        codebook_usage(&[(0..512).collect::<Vec<_>>()], 1024).unwrap(),
        50.0
    );
    assert_eq!(
        codebook_usage(&[vec![1, 1, 1], vec![3, 3], vec![1]], 8).unwrap(),
        25.0
    );

    // the trend during the overfit run: emitted every step, non-decreasing
    let fx = stage1_fixture();
    let mut usages = Vec::new();
    for line in fx.metrics_text.lines().skip(1) {
        let usage: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        usages.push(usage);
    }
    assert_eq!(usages.len(), fx.steps_run);
    for w in usages.windows(2) {
        assert!(w[1] >= w[0], "usage decreased: {} -> {}", w[0], w[1]);
    }
    assert!(
        usages.last().unwrap() > usages.first().unwrap(),
        "usage never grew over the run"
    );
    println!(
        "[criterion 11] PASS - exact percentages; usage {:.2}% -> {:.2}% over {} steps",
        usages.first().unwrap(),
        usages.last().unwrap(),
        usages.len()
    );
}
