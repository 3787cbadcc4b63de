//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with its observed numbers. Benchmark-dataset scores are out of
//! desk-scale reach (gated data, multi-hour GPU training), so the gate is
//! this set of property and end-to-end checks on synthetic phantoms; the
//! README documents that mapping.

use std::time::Instant;

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use nestseg::augment::{augment, flip_volume, rotate_volume, AugmentConfig, RotationPlane};
use nestseg::cascade::{CascadeConfig, CascadeModel, Gating};
use nestseg::checkpoint::{load_checkpoint, save_checkpoint};
use nestseg::config::{InferSection, PipelineConfig};
use nestseg::infer::predict_case;
use nestseg::losses::{focal_loss, focal_loss_grad, FocalParams};
use nestseg::metrics::{dice, hausdorff, sensitivity, specificity, surface_voxels};
use nestseg::nn::{Adam, AdamConfig, ParamStore, Tape};
use nestseg::patch::{assemble, extract3, grid_patches};
use nestseg::preprocess::{correct_bias, estimate_bias_field, preprocess_stack, BiasOptions, PreprocessOptions};
use nestseg::synth::{case_seed, generate_case, inject_bias_field, BiasFieldSpec, PhantomParams};
use nestseg::train::{train_run, update_learning_rate, TrainOutcome};
use nestseg::unet::NormKind;
use nestseg::volume::{
    compose_labels, region_mask_from_labels, validate_hierarchy, LabelMap, Modality,
    ModalityStack, Region, RegionMask, DEFAULT_SPACING,
};

fn pass(id: &str, name: &str, details: &str) {
    println!("ACCEPTANCE {id} ({name}): PASS — {details}");
}

/// Criterion 1: the repository documents that the published benchmark scores
/// (validation Dice 0.886/0.813/0.771 for WT/TC/ET) are not reproducible at
/// desk scale and that this suite substitutes for them.
#[test]
fn a01_desk_scale_mapping_documented() {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md"))
        .expect("README.md must exist at the workspace root");
    for needle in ["0.886", "0.813", "0.771", "acceptance"] {
        assert!(
            readme.contains(needle),
            "README must document the desk-scale substitution (missing '{needle}')"
        );
    }
    pass("a01", "desk-scale mapping", "README documents the benchmark-score substitution");
}

fn random_mask(shape: [usize; 3], p: f64, rng: &mut impl Rng) -> RegionMask {
    RegionMask {
        mask: Array3::from_shape_fn(shape, |_| rng.random::<f64>() < p),
        region: Region::Wt,
    }
}

/// Criterion 2: all four metrics match exhaustive brute-force oracles exactly
/// on 100 seeded random 6³ mask pairs, in under a minute.
#[test]
fn a02_metrics_match_bruteforce_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    let mut hausdorff_defined = 0;
    for trial in 0..100 {
        let p = random_mask([6, 6, 6], 0.25, &mut rng);
        let t = random_mask([6, 6, 6], 0.25, &mut rng);

        // Counting oracles, computed independently of the implementation.
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        let mut tn = 0u64;
        for (&a, &b) in p.mask.iter().zip(t.mask.iter()) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let dice_oracle = if 2 * tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        assert_eq!(dice(&p, &t).unwrap(), dice_oracle, "trial {trial}: dice");
        let sens_oracle = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
        assert_eq!(sensitivity(&p, &t).unwrap(), sens_oracle, "trial {trial}: sensitivity");
        let spec_oracle = (tn + fp > 0).then(|| tn as f64 / (tn + fp) as f64);
        assert_eq!(specificity(&p, &t).unwrap(), spec_oracle, "trial {trial}: specificity");

        // All-pairs surface-distance oracle.
        let ps = surface_voxels(&p.mask);
        let ts = surface_voxels(&t.mask);
        let hd_oracle = if ps.is_empty() || ts.is_empty() {
            None
        } else {
            let d2 = |a: &[usize; 3], b: &[usize; 3]| -> f64 {
                let dd = a[0] as f64 - b[0] as f64;
                let dh = a[1] as f64 - b[1] as f64;
                let dw = a[2] as f64 - b[2] as f64;
                dd * dd + dh * dh + dw * dw
            };
            let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
                from.iter()
                    .map(|a| to.iter().map(|b| d2(a, b)).fold(f64::INFINITY, f64::min).sqrt())
                    .fold(0.0, f64::max)
            };
            Some(directed(&ps, &ts).max(directed(&ts, &ps)))
        };
        let hd = hausdorff(&p, &t, DEFAULT_SPACING, 100.0).unwrap();
        assert_eq!(hd, hd_oracle, "trial {trial}: hausdorff");
        if hd.is_some() {
            hausdorff_defined += 1;
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 60, "metrics oracle check took {elapsed:?}");
    pass(
        "a02",
        "metrics oracle equivalence",
        &format!("100/100 exact matches ({hausdorff_defined} defined Hausdorff pairs) in {elapsed:.2?}"),
    );
}

/// Criterion 3: focal-loss identities — γ=0 reduction to α-weighted
/// cross-entropy (1e-6), gradient vs central differences (1e-4 relative),
/// and the hand-evaluated scalar case (1e-9).
#[test]
fn a03_focal_loss_identities() {
    let mut rng = ChaCha12Rng::seed_from_u64(33);

    // γ = 0 reduction on 20 random grids.
    let mut max_dev: f64 = 0.0;
    for _ in 0..20 {
        let probs = Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(0.01..0.99));
        let targets = Array3::from_shape_fn((4, 4, 4), |_| rng.random::<f64>() < 0.4);
        let alpha = rng.random_range(0.1..0.9);
        let params = FocalParams { gamma: 0.0, alpha, epsilon: 1e-7 };
        let fl = focal_loss(probs.view(), targets.view(), &params).unwrap();
        let mut ce = 0.0;
        for (&p, &y) in probs.iter().zip(targets.iter()) {
            let (pt, at) = if y { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            ce += -at * pt.clamp(1e-7, 1.0 - 1e-7).ln();
        }
        ce /= probs.len() as f64;
        max_dev = max_dev.max((fl - ce).abs());
        assert!((fl - ce).abs() < 1e-6, "γ=0 reduction violated: {fl} vs {ce}");
    }

    // Gradient vs central finite differences on a 4³ instance.
    let mut probs = Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(0.05..0.95));
    let targets = Array3::from_shape_fn((4, 4, 4), |_| rng.random::<f64>() < 0.3);
    let params = FocalParams::default();
    let (_, grad) = focal_loss_grad(probs.view(), targets.view(), &params).unwrap();
    let h = 1e-6;
    let mut max_rel: f64 = 0.0;
    for d in 0..4 {
        for hh in 0..4 {
            for w in 0..4 {
                let idx = [d, hh, w];
                let orig = probs[idx];
                probs[idx] = orig + h;
                let up = focal_loss(probs.view(), targets.view(), &params).unwrap();
                probs[idx] = orig - h;
                let down = focal_loss(probs.view(), targets.view(), &params).unwrap();
                probs[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (grad[idx] - fd).abs() / fd.abs().max(1e-12);
                max_rel = max_rel.max(rel);
                assert!(rel < 1e-4, "at {idx:?}: grad {} vs fd {fd}", grad[idx]);
            }
        }
    }

    // Hand-evaluated scalar: y=1, p=0.9, γ=2, α=0.25.
    let probs1 = Array3::from_elem((1, 1, 1), 0.9);
    let targets1 = Array3::from_elem((1, 1, 1), true);
    let loss = focal_loss(probs1.view(), targets1.view(), &FocalParams::default()).unwrap();
    let reference = 2.634012891445657e-4;
    assert!((loss - reference).abs() < 1e-9, "scalar case: {loss} vs {reference}");

    pass(
        "a03",
        "focal-loss identities",
        &format!(
            "γ=0 max |Δ| {max_dev:.2e}; FD max rel {max_rel:.2e}; scalar |Δ| {:.2e}",
            (loss - reference).abs()
        ),
    );
}

/// Criterion 4: on a micro cascade, a loss on any step's output produces
/// nonzero gradients in every earlier step's first layer; under a minute.
#[test]
fn a04_cascade_gradient_flow() {
    let t0 = Instant::now();
    let cfg = CascadeConfig { levels: 2, base_channels: 2, norm: NormKind::Instance };
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(44);
    let model = CascadeModel::build(cfg, &mut store, &mut rng).unwrap();
    let flair = Array4::from_shape_fn((1, 16, 16, 16), |_| rng.random_range(-1.0..1.0));
    let t1ce = Array4::from_shape_fn((1, 16, 16, 16), |_| rng.random_range(-1.0..1.0));
    let target = Array3::from_shape_fn((16, 16, 16), |(d, _, _)| d < 8);
    let stems = [
        model.step1.param_ids()[0],
        model.step2.param_ids()[0],
        model.step3.param_ids()[0],
    ];

    let mut checked_pairs = 0;
    for k in 0..3 {
        store.zero_grads();
        let mut tape = Tape::new(true);
        let f = tape.input(flair.clone());
        let t = tape.input(t1ce.clone());
        let fwd = model.forward(&mut tape, &store, f, t, Gating::Soft).unwrap();
        let head = fwd.steps[k].main;
        let (_, grad) = focal_loss_grad(
            tape.value3(head).to_owned().view(),
            target.view(),
            &FocalParams::default(),
        )
        .unwrap();
        tape.backward(&mut store, vec![(head, grad.insert_axis(Axis(0)))]).unwrap();
        for earlier in 0..=k {
            let g = store.grad(stems[earlier]);
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(
                norm > 0.0,
                "loss on step {} produces zero gradient in step {}'s first layer",
                k + 1,
                earlier + 1
            );
            checked_pairs += 1;
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 60, "gradient-flow check took {elapsed:?}");
    pass(
        "a04",
        "cascade gradient flow",
        &format!("{checked_pairs} step pairs with nonzero stem gradients in {elapsed:.2?}"),
    );
}

fn acceptance_phantoms(n: usize, shape: [usize; 3], base_seed: u64) -> Vec<(ModalityStack, LabelMap)> {
    (0..n)
        .map(|i| {
            let min_dim = shape.iter().copied().min().unwrap() as f64;
            let params = PhantomParams {
                // Larger nested regions than the generator defaults so the
                // smallest region is not boundary-dominated at 64³.
                wt_radius_range: [0.18 * min_dim, 0.24 * min_dim],
                tc_scale_range: [0.65, 0.80],
                et_scale_range: [0.60, 0.75],
                noise_sigma: 0.03,
                seed: case_seed(base_seed, i as u64),
                ..PhantomParams::for_shape(shape)
            };
            generate_case(&params, &format!("case_{i:04}")).unwrap()
        })
        .collect()
}

/// Criterion 5: overfit four 64³ phantoms end to end (preprocess → train a
/// micro cascade on 32³ patches for ≤1000 iterations → sliding-window
/// inference → evaluation) and clear the mean-Dice bars 0.90/0.85/0.80.
/// Also checks the stride-halving stability property on the same model.
#[test]
fn a05_overfit_phantoms_end_to_end() {
    let t0 = Instant::now();
    let raw = acceptance_phantoms(4, [64, 64, 64], 40);
    let dataset: Vec<(ModalityStack, LabelMap)> = raw
        .iter()
        .map(|(stack, labels)| {
            (preprocess_stack(stack, PreprocessOptions::default()).unwrap(), labels.clone())
        })
        .collect();

    // Calibrated once (see README): α weights the rare foreground up so the
    // smallest region does not collapse to all-background within the
    // iteration budget, and half the crops are forced to contain tumor.
    let mut cfg = PipelineConfig::default();
    cfg.seed = 5;
    cfg.cascade = CascadeConfig { levels: 2, base_channels: 4, norm: NormKind::Instance };
    cfg.train.epochs = 250; // 4 iterations per epoch = 1000 total (≤ 1000)
    cfg.train.patch_size = [32, 32, 32];
    cfg.train.foreground_bias = 0.5;
    cfg.loss.focal.alpha = 0.75;
    cfg.augment = AugmentConfig::disabled();

    let run_dir = tempfile::tempdir().unwrap();
    let outcome: TrainOutcome = train_run(&cfg, &dataset, run_dir.path(), None).unwrap();
    let iterations = cfg.train.epochs * dataset.len();
    assert!(iterations <= 1000, "budget is 1000 iterations, configured {iterations}");
    assert!(outcome.epoch_losses.iter().all(|l| l.is_finite()));

    // Inference through the persisted checkpoint, as the pipeline would.
    let loaded = load_checkpoint(&outcome.checkpoint).unwrap();
    let opts = InferSection {
        patch_size: [32, 32, 32],
        stride: Some([16, 16, 16]),
        thresholds: [0.5; 3],
        gating: Gating::Hard,
        save_probs: false,
    };

    let mut dice_sums = [0.0f64; 3];
    let mut differing_voxels = 0usize;
    let mut total_voxels = 0usize;
    for ((stack, _), (_, truth)) in dataset.iter().zip(&raw) {
        let pred = predict_case(&loaded.model, &loaded.store, stack, &opts).unwrap();
        assert!(validate_hierarchy(&pred.labels.labels).valid);
        for (i, region) in Region::ALL.iter().enumerate() {
            let p = region_mask_from_labels(&pred.labels, *region);
            let t = region_mask_from_labels(truth, *region);
            dice_sums[i] += dice(&p, &t).unwrap();
        }
        // Stride variation: full-stride (no overlap) vs half-stride fused
        // outputs must differ on well under 1% of voxels.
        let coarse_opts = InferSection { stride: Some([32, 32, 32]), ..opts.clone() };
        let pred_coarse = predict_case(&loaded.model, &loaded.store, stack, &coarse_opts).unwrap();
        differing_voxels += pred
            .labels
            .labels
            .iter()
            .zip(pred_coarse.labels.labels.iter())
            .filter(|(a, b)| a != b)
            .count();
        total_voxels += pred.labels.labels.len();
    }
    // A trained cascade maps an all-zero (empty-support) volume to an
    // all-background label map: the probabilities stay below threshold and
    // the gating chain suppresses the later steps.
    let zero_stack =
        ModalityStack::new(Array4::zeros((4, 64, 64, 64)), DEFAULT_SPACING, "zero").unwrap();
    let pred_zero = predict_case(&loaded.model, &loaded.store, &zero_stack, &opts).unwrap();
    assert!(
        pred_zero.labels.labels.iter().all(|&l| l == 0),
        "all-zero input must yield an all-background prediction"
    );

    let means: Vec<f64> = dice_sums.iter().map(|s| s / dataset.len() as f64).collect();
    let elapsed = t0.elapsed();
    assert!(
        means[0] >= 0.90 && means[1] >= 0.85 && means[2] >= 0.80,
        "mean dice WT/TC/ET = {:.4}/{:.4}/{:.4} below 0.90/0.85/0.80",
        means[0],
        means[1],
        means[2]
    );
    let differ_frac = differing_voxels as f64 / total_voxels as f64;
    assert!(
        differ_frac < 0.01,
        "stride variation changes {:.3}% of fused voxels",
        100.0 * differ_frac
    );
    assert!(elapsed.as_secs() < 2 * 3600, "end-to-end run took {elapsed:?}");
    pass(
        "a05",
        "overfit-a-phantom end-to-end",
        &format!(
            "mean dice WT/TC/ET = {:.4}/{:.4}/{:.4} (bars 0.90/0.85/0.80), {iterations} iterations, stride Δ {:.4}%, {elapsed:.1?}",
            means[0], means[1], means[2], 100.0 * differ_frac
        ),
    );
}

/// Criterion 6: bias-correction contract on a noise-free phantom with an
/// injected degree-2, amplitude-0.3 field: shell CV at most halved and the
/// recovered field correlating with the injected one at r ≥ 0.95.
#[test]
fn a06_bias_correction_contract() {
    let mut params = PhantomParams::for_shape([64, 64, 64]);
    params.noise_sigma = 0.0;
    params.seed = 606;
    let (stack, labels) = generate_case(&params, "bias_case").unwrap();
    let spec = BiasFieldSpec::random_for_seed(2, 0.3, 606).unwrap();
    let flair = stack.channel(Modality::Flair).to_owned();
    let biased = inject_bias_field(&flair, &spec);
    let opts = BiasOptions { degree: 2, iterations: 5 };

    // Recovered field vs injected field, on the support.
    let recovered = estimate_bias_field(&biased, opts).unwrap();
    let truth_field = spec.field([64, 64, 64]);
    let support: Vec<usize> = biased
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| i)
        .collect();
    let rec: Vec<f64> = support.iter().map(|&i| recovered.as_slice().unwrap()[i]).collect();
    let tru: Vec<f64> = support.iter().map(|&i| truth_field.as_slice().unwrap()[i]).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mr, mt) = (mean(&rec), mean(&tru));
    let mut cov = 0.0;
    let mut vr = 0.0;
    let mut vt = 0.0;
    for (r, t) in rec.iter().zip(&tru) {
        cov += (r - mr) * (t - mt);
        vr += (r - mr) * (r - mr);
        vt += (t - mt) * (t - mt);
    }
    let pearson = cov / (vr.sqrt() * vt.sqrt());
    assert!(pearson >= 0.95, "field recovery r = {pearson}");

    // CV of the homogeneous edema shell before and after correction.
    let corrected = correct_bias(&biased, opts).unwrap();
    let shell_cv = |vol: &Array3<f64>| {
        let vals: Vec<f64> = vol
            .iter()
            .zip(labels.labels.iter())
            .filter(|(_, &l)| l == 2)
            .map(|(&v, _)| v)
            .collect();
        let m = mean(&vals);
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        var.sqrt() / m
    };
    let before = shell_cv(&biased);
    let after = shell_cv(&corrected);
    assert!(after <= 0.5 * before, "shell CV {before:.5} → {after:.5}, reduction < 50%");
    pass(
        "a06",
        "bias-correction contract",
        &format!("field r = {pearson:.4}; shell CV {before:.5} → {after:.5}"),
    );
}

/// Criterion 7: geometry identities, each property-checked over ≥100 draws.
#[test]
fn a07_geometry_identities() {
    let mut rng = ChaCha12Rng::seed_from_u64(77);

    // assemble ∘ extract identity on random feasible grids.
    for _ in 0..100 {
        let shape = [
            rng.random_range(6..20),
            rng.random_range(6..20),
            rng.random_range(6..20),
        ];
        let size = [
            rng.random_range(2..=shape[0]),
            rng.random_range(2..=shape[1]),
            rng.random_range(2..=shape[2]),
        ];
        let stride = [
            rng.random_range(1..=size[0]),
            rng.random_range(1..=size[1]),
            rng.random_range(1..=size[2]),
        ];
        // Volume values on the f32 grid, as NIfTI-sourced data always is;
        // overlap-count multiples of such values are exactly representable,
        // which is what makes the round trip bit-exact.
        let volume = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |_| {
            rng.random_range(-10.0f64..10.0) as f32 as f64
        });
        let corners = grid_patches(shape, size, stride).unwrap();
        let patches: Vec<_> =
            corners.iter().map(|&c| (c, extract3(volume.view(), c, size))).collect();
        assert_eq!(assemble(&patches, shape).unwrap(), volume);
    }

    // Flip involution and 0° rotation identity on random volumes.
    for _ in 0..100 {
        let images = Array4::from_shape_fn((2, 5, 6, 7), |_| rng.random_range(-1.0..1.0));
        let labels = Array3::from_shape_fn((5, 6, 7), |_| *[0u8, 1, 2, 4].get(rng.random_range(0..4)).unwrap());
        let axis = rng.random_range(0..3);
        let mut i2 = images.clone();
        let mut l2 = labels.clone();
        flip_volume(&mut i2, &mut l2, axis);
        flip_volume(&mut i2, &mut l2, axis);
        assert_eq!(i2, images);
        assert_eq!(l2, labels);
        let (ri, rl) = rotate_volume(&images, &labels, 0.0, RotationPlane::Hw);
        assert_eq!(ri, images);
        assert_eq!(rl, labels);
    }

    // Label-alphabet preservation under full random augmentation.
    let cfg = AugmentConfig::default();
    for _ in 0..100 {
        let images = Array4::from_shape_fn((2, 8, 8, 8), |_| rng.random_range(-1.0..1.0));
        let labels = Array3::from_shape_fn((8, 8, 8), |_| *[0u8, 1, 2, 4].get(rng.random_range(0..4)).unwrap());
        let (_, out) = augment(&images, &labels, &cfg, &mut rng);
        assert!(validate_hierarchy(&out).valid, "augmentation invented a label value");
    }
    pass("a07", "geometry identities", "3 properties × 100 random draws each");
}

/// Criterion 8: every fused prediction passes hierarchy validation, and the
/// compose/decompose round trip is exact on random valid label maps.
#[test]
fn a08_hierarchy_guarantee() {
    let mut rng = ChaCha12Rng::seed_from_u64(88);

    // Fused predictions from random-weight models on random inputs.
    for seed in 0..5 {
        let cfg = CascadeConfig { levels: 2, base_channels: 2, norm: NormKind::Instance };
        let mut store = ParamStore::new();
        let mut mrng = ChaCha12Rng::seed_from_u64(seed);
        let model = CascadeModel::build(cfg, &mut store, &mut mrng).unwrap();
        let data = Array4::from_shape_fn((4, 16, 16, 16), |_| rng.random_range(-1.0..1.0));
        let stack = ModalityStack::new(data, DEFAULT_SPACING, "case").unwrap();
        let opts = InferSection {
            patch_size: [8, 8, 8],
            stride: None,
            thresholds: [0.5; 3],
            gating: if seed % 2 == 0 { Gating::Hard } else { Gating::Soft },
            save_probs: false,
        };
        let pred = predict_case(&model, &store, &stack, &opts).unwrap();
        assert!(validate_hierarchy(&pred.labels.labels).valid);
    }

    // Compose/decompose identity on 200 random valid maps.
    for _ in 0..200 {
        let labels = Array3::from_shape_fn((6, 6, 6), |_| *[0u8, 1, 2, 4].get(rng.random_range(0..4)).unwrap());
        let map = LabelMap::new(labels, DEFAULT_SPACING).unwrap();
        let wt = region_mask_from_labels(&map, Region::Wt);
        let tc = region_mask_from_labels(&map, Region::Tc);
        let et = region_mask_from_labels(&map, Region::Et);
        let fused = compose_labels(&wt, &tc, &et).unwrap();
        assert_eq!(fused.labels, map.labels);
    }
    pass("a08", "hierarchy guarantee", "5 fused predictions valid; 200 exact round trips");
}

/// Criterion 9: determinism — byte-identical synthetic cases, identical loss
/// logs for identical seeds, and bit-exact checkpoint round trips.
#[test]
fn a09_determinism() {
    // Byte-identical synth output through the NIfTI writer.
    let params = PhantomParams { seed: 99, ..PhantomParams::for_shape([48, 48, 48]) };
    let (s1, l1) = generate_case(&params, "det").unwrap();
    let (s2, l2) = generate_case(&params, "det").unwrap();
    assert_eq!(s1.data, s2.data);
    assert_eq!(l1.labels, l2.labels);
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    nestseg::io::write_case(d1.path(), &s1, Some(&l1)).unwrap();
    nestseg::io::write_case(d2.path(), &s2, Some(&l2)).unwrap();
    for suffix in ["flair", "t1", "t1ce", "t2", "seg"] {
        let f1 = std::fs::read(d1.path().join("det").join(format!("det_{suffix}.nii.gz"))).unwrap();
        let f2 = std::fs::read(d2.path().join("det").join(format!("det_{suffix}.nii.gz"))).unwrap();
        assert_eq!(f1, f2, "{suffix} files differ between identically seeded writes");
    }

    // Identical loss logs for identical seeds.
    let dataset: Vec<(ModalityStack, LabelMap)> = acceptance_phantoms(2, [32, 32, 32], 9)
        .into_iter()
        .map(|(stack, labels)| (preprocess_stack(&stack, PreprocessOptions::default()).unwrap(), labels))
        .collect();
    let mut cfg = PipelineConfig::default();
    cfg.seed = 13;
    cfg.cascade = CascadeConfig { levels: 2, base_channels: 2, norm: NormKind::Instance };
    cfg.train.epochs = 2;
    cfg.train.patch_size = [16, 16, 16];
    let run = |dir: &std::path::Path| {
        train_run(&cfg, &dataset, dir, None).unwrap();
        nestseg::train::read_loss_log(&dir.join("loss_log.csv")).unwrap()
    };
    let r1 = tempfile::tempdir().unwrap();
    let r2 = tempfile::tempdir().unwrap();
    assert_eq!(run(r1.path()), run(r2.path()), "loss logs differ for identical seeds");

    // Bit-exact checkpoint round trip after real optimizer steps.
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let ccfg = CascadeConfig { levels: 2, base_channels: 2, norm: NormKind::Instance };
    let _model = CascadeModel::build(ccfg, &mut store, &mut rng).unwrap();
    let mut adam = Adam::new(&store, AdamConfig::default());
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in &ids {
        let g: Vec<f64> = (0..store.data(*id).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        store.grad_mut(*id).copy_from_slice(&g);
    }
    adam.step(&mut store, 1e-3);
    let ck = tempfile::tempdir().unwrap();
    let path = ck.path().join("ckpt.bin");
    save_checkpoint(&path, &ccfg, &store, &adam, 3).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(loaded.store.iter()) {
        assert_eq!(a.data, b.data, "checkpoint round trip is not bit-exact");
    }
    let (m0, v0) = adam.moments();
    let (m1, v1) = loaded.adam.moments();
    assert_eq!((m0, v0), (m1, v1));

    pass("a09", "determinism", "synth bytes, loss logs and checkpoint round trips all identical");
}

/// Criterion 10: the plateau learning-rate rule, including the hand-walked
/// example and the published schedule values.
#[test]
fn a10_learning_rate_schedule() {
    let mut cfg = PipelineConfig::default().train;
    assert_eq!(cfg.lr_initial, 0.001, "initial learning rate must be 0.001");
    assert_eq!(cfg.lr_after_plateau, 0.0005, "decayed learning rate must be 0.0005");

    cfg.plateau_patience = 3;
    // Strictly decreasing history keeps the initial rate.
    assert_eq!(update_learning_rate(&[1.0, 0.8, 0.6, 0.4, 0.2], &cfg), cfg.lr_initial);
    // Flat history longer than the patience decays.
    assert_eq!(update_learning_rate(&[0.7; 4], &cfg), cfg.lr_after_plateau);
    // Hand-walked example: decay happens exactly at epoch 5.
    let history = [1.0, 0.5, 0.5001, 0.5002, 0.5001];
    assert_eq!(update_learning_rate(&history[..4], &cfg), cfg.lr_initial);
    assert_eq!(update_learning_rate(&history, &cfg), cfg.lr_after_plateau);
    // Once decayed, later improvements never restore the initial rate.
    assert_eq!(
        update_learning_rate(&[0.5, 0.5, 0.5, 0.5, 0.2, 0.1], &cfg),
        cfg.lr_after_plateau
    );
    pass("a10", "learning-rate schedule", "plateau rule and 0.001 → 0.0005 values verified");
}
