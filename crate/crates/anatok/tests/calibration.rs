//! Ignored calibration probes: print the raw numbers behind the
//! end-to-end and ablation gates so thresholds can be sanity-checked
//! without running the full acceptance suite.

use std::time::Instant;

use anatok::backbone::ModelCfg;
use anatok::evaluate::{auc, build_holdout, cluster_quality, score_image};
use anatok::phantom::{generate_phantom, Image, PhantomConfig};
use anatok::trainer::{resume_loop, TrainConfig, TrainState};

fn gen_images(n: usize, seed: u64, pcfg: &PhantomConfig) -> Vec<Image> {
    (0..n)
        .map(|i| generate_phantom(seed + i as u64, pcfg).unwrap())
        .collect()
}

fn holdout_auc(state: &TrainState, pcfg: &PhantomConfig, n_each: usize) -> f64 {
    let samples = build_holdout(
        pcfg,
        state.cfg.model.patch,
        (state.cfg.r_lo, state.cfg.r_hi),
        5_000_000,
        n_each,
        n_each,
    )
    .unwrap();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in &samples {
        let (score, _) =
            score_image(&state.teacher.enc, &state.params.dec, &state.cfg.model, &s.image)
                .unwrap();
        scores.push(score);
        labels.push(s.normal);
    }
    auc(&scores, &labels).unwrap()
}

#[test]
#[ignore]
fn ablation_probe() {
    let pcfg = PhantomConfig::default();
    let images = gen_images(400, 10_000_000, &pcfg);
    for seed in [1u64, 2, 3] {
        for (name, cate, rest, subst) in [
            ("full     ", true, true, true),
            ("no_recon ", true, false, true),
            ("no_subst ", true, true, false),
            ("no_cate  ", false, true, true),
        ] {
            let mut cfg = TrainConfig {
                epochs: 10,
                seed,
                checkpoint_every: 100,
                ..TrainConfig::default()
            };
            cfg.with_category = cate;
            cfg.with_restoration = rest;
            cfg.with_substitution = subst;
            let dir = tempfile::tempdir().unwrap();
            let t0 = Instant::now();
            let mut state = TrainState::new(cfg).unwrap();
            resume_loop(&mut state, &images, dir.path(), None, None).unwrap();
            let a = holdout_auc(&state, &pcfg, 64);
            println!(
                "seed {seed} {name} auc {a:.4}  ({:.1}s)",
                t0.elapsed().as_secs_f64()
            );
        }
    }
}

fn ablation_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        checkpoint_every: 100,
        model: ModelCfg {
            dim: 64,
            depth: 3,
            dec_dim: 64,
            dec_depth: 1,
            head_hidden: 192,
            ..ModelCfg::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
#[ignore]
fn ablation_scale_probe() {
    let pcfg = PhantomConfig::default();
    let images = gen_images(2000, 10_000_000, &pcfg);
    for seed in [2u64, 3] {
        for (name, cate, rest, subst) in [
            ("full     ", true, true, true),
            ("no_recon ", true, false, true),
            ("no_subst ", true, true, false),
            ("no_cate  ", false, true, true),
        ] {
            let mut cfg = ablation_cfg(seed);
            cfg.with_category = cate;
            cfg.with_restoration = rest;
            cfg.with_substitution = subst;
            let dir = tempfile::tempdir().unwrap();
            let t0 = Instant::now();
            let mut state = TrainState::new(cfg).unwrap();
            resume_loop(&mut state, &images, dir.path(), None, None).unwrap();
            let a = holdout_auc(&state, &pcfg, 64);
            println!(
                "seed {seed} {name} auc {a:.4}  ({:.1}s)",
                t0.elapsed().as_secs_f64()
            );
        }
    }
}

#[test]
#[ignore]
fn probe_variants() {
    use anatok::evaluate::{linear_probe, logistic_probe, position_group, ProbeConfig};
    use ndarray::Array2;
    let pcfg = PhantomConfig::default();
    let state =
        anatok::trainer::load_checkpoint(std::path::Path::new("target/desk_calib/checkpoint.bin"))
            .unwrap();
    let mcfg = &state.cfg.model;
    let samples = build_holdout(&pcfg, 8, (1, 4), 1_000_000, 200, 200).unwrap();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut per_class = [0usize; 2];
    for s in &samples {
        let c = usize::from(s.normal);
        if per_class[c] % 2 == 0 {
            train.push((&s.image, s.normal));
        } else {
            test.push((&s.image, s.normal));
        }
        per_class[c] += 1;
    }
    let mean_probe = linear_probe(
        &state.teacher.enc,
        mcfg,
        &train,
        &test,
        &ProbeConfig::default(),
    )
    .unwrap();
    println!("mean-pool probe auc {:.4}", mean_probe.auc);

    // 3x3 region-mean concatenation, same frozen encoder
    let l = mcfg.tokens();
    let (gh, gw) = (mcfg.img_h / mcfg.patch, mcfg.img_w / mcfg.patch);
    let feats = |set: &[(&Image, bool)]| -> (Array2<f64>, Vec<bool>) {
        let mut x = Array2::<f64>::zeros((set.len(), 9 * mcfg.dim));
        let mut y = Vec::new();
        for (i, (img, lab)) in set.iter().enumerate() {
            let z = anatok::backbone::encode(&state.teacher.enc, img, mcfg).unwrap();
            let mut counts = [0usize; 9];
            for j in 0..l {
                let g = position_group(j, gh, gw);
                counts[g] += 1;
                for d in 0..mcfg.dim {
                    x[[i, g * mcfg.dim + d]] += z[[j, d]] as f64;
                }
            }
            for g in 0..9 {
                for d in 0..mcfg.dim {
                    x[[i, g * mcfg.dim + d]] /= counts[g] as f64;
                }
            }
            y.push(*lab);
        }
        (x, y)
    };
    let (xtr, ytr) = feats(&train);
    let (xte, yte) = feats(&test);
    for epochs in [500usize, 2000] {
        let cfg = ProbeConfig {
            epochs,
            ..ProbeConfig::default()
        };
        let r = logistic_probe(&xtr, &ytr, &xte, &yte, &cfg).unwrap();
        println!("region-pool probe ({epochs} ep) auc {:.4}", r.auc);
    }

    // max-pool over tokens, and mean+max concat
    let maxfeats = |set: &[(&Image, bool)]| -> Array2<f64> {
        let mut x = Array2::<f64>::from_elem((set.len(), 2 * mcfg.dim), f64::NEG_INFINITY);
        for (i, (img, _)) in set.iter().enumerate() {
            let z = anatok::backbone::encode(&state.teacher.enc, img, mcfg).unwrap();
            for d in 0..mcfg.dim {
                let mut mx = f64::NEG_INFINITY;
                let mut mn = 0.0f64;
                for j in 0..l {
                    mx = mx.max(z[[j, d]] as f64);
                    mn += z[[j, d]] as f64 / l as f64;
                }
                x[[i, d]] = mx;
                x[[i, mcfg.dim + d]] = mn;
            }
        }
        x
    };
    let xtr2 = maxfeats(&train);
    let xte2 = maxfeats(&test);
    let r = logistic_probe(&xtr2, &ytr, &xte2, &yte, &ProbeConfig::default()).unwrap();
    println!("max+mean-pool probe auc {:.4}", r.auc);
    let r = logistic_probe(
        &xtr2.slice(ndarray::s![.., ..mcfg.dim]).to_owned(),
        &ytr,
        &xte2.slice(ndarray::s![.., ..mcfg.dim]).to_owned(),
        &yte,
        &ProbeConfig::default(),
    )
    .unwrap();
    println!("max-pool probe auc {:.4}", r.auc);

    let random = TrainState::new(state.cfg.clone()).unwrap();
    let maxfeats_r = |set: &[(&Image, bool)]| -> Array2<f64> {
        let mut x = Array2::<f64>::from_elem((set.len(), 2 * mcfg.dim), f64::NEG_INFINITY);
        for (i, (img, _)) in set.iter().enumerate() {
            let z = anatok::backbone::encode(&random.teacher.enc, img, mcfg).unwrap();
            for d in 0..mcfg.dim {
                let mut mx = f64::NEG_INFINITY;
                let mut mn = 0.0f64;
                for j in 0..l {
                    mx = mx.max(z[[j, d]] as f64);
                    mn += z[[j, d]] as f64 / l as f64;
                }
                x[[i, d]] = mx;
                x[[i, mcfg.dim + d]] = mn;
            }
        }
        x
    };
    let r = logistic_probe(
        &maxfeats_r(&train),
        &ytr,
        &maxfeats_r(&test),
        &yte,
        &ProbeConfig::default(),
    )
    .unwrap();
    println!("random-init max+mean-pool probe auc {:.4}", r.auc);

    let r = linear_probe(
        &random.teacher.enc,
        mcfg,
        &train,
        &test,
        &ProbeConfig::default(),
    )
    .unwrap();
    println!("random-init mean-pool probe auc {:.4}", r.auc);
    let regfeats_r = |set: &[(&Image, bool)]| -> Array2<f64> {
        let mut x = Array2::<f64>::zeros((set.len(), 9 * mcfg.dim));
        for (i, (img, _)) in set.iter().enumerate() {
            let z = anatok::backbone::encode(&random.teacher.enc, img, mcfg).unwrap();
            let mut counts = [0usize; 9];
            for j in 0..l {
                let g = position_group(j, gh, gw);
                counts[g] += 1;
                for d in 0..mcfg.dim {
                    x[[i, g * mcfg.dim + d]] += z[[j, d]] as f64;
                }
            }
            for g in 0..9 {
                for d in 0..mcfg.dim {
                    x[[i, g * mcfg.dim + d]] /= counts[g] as f64;
                }
            }
        }
        x
    };
    let r = logistic_probe(
        &regfeats_r(&train),
        &ytr,
        &regfeats_r(&test),
        &yte,
        &ProbeConfig::default(),
    )
    .unwrap();
    println!("random-init region-pool probe auc {:.4}", r.auc);
}

#[test]
#[ignore]
fn desk_random_baseline() {
    let pcfg = PhantomConfig::default();
    let cfg = TrainConfig::default();
    let state = TrainState::new(cfg).unwrap();
    let samples = build_holdout(&pcfg, 8, (1, 4), 1_000_000, 200, 200).unwrap();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in &samples {
        let (score, _) =
            score_image(&state.teacher.enc, &state.params.dec, &state.cfg.model, &s.image)
                .unwrap();
        scores.push(score);
        labels.push(s.normal);
    }
    println!("random-init detect auc {:.4}", auc(&scores, &labels).unwrap());
}

#[test]
#[ignore]
fn desk_probe_lr_sweep() {
    let pcfg = PhantomConfig::default();
    let images = gen_images(2000, 0, &pcfg);
    for base_lr in [0.002f32, 0.001] {
        let cfg = TrainConfig {
            sinkhorn_position_wise: true,
            base_lr,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let mut state = TrainState::new(cfg).unwrap();
        let dir = std::path::PathBuf::from(format!("target/desk_lr_{base_lr}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let outcome = resume_loop(&mut state, &images, &dir, None, None).unwrap();
        println!("base_lr {base_lr}: train wall time {:.1}s", t0.elapsed().as_secs_f64());
        println!(
            "base_lr {base_lr}: epoch means first {:.4} last {:.4} ratio {:.4}",
            outcome.epoch_mean_total[0],
            outcome.epoch_mean_total.last().unwrap(),
            outcome.epoch_mean_total.last().unwrap() / outcome.epoch_mean_total[0]
        );
        let samples = build_holdout(&pcfg, 8, (1, 4), 1_000_000, 200, 200).unwrap();
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for s in &samples {
            let (score, _) =
                score_image(&state.teacher.enc, &state.params.dec, &state.cfg.model, &s.image)
                    .unwrap();
            scores.push(score);
            labels.push(s.normal);
        }
        println!("base_lr {base_lr}: detect auc {:.4}", auc(&scores, &labels).unwrap());
        let mut train = Vec::new();
        let mut test = Vec::new();
        let mut per_class = [0usize; 2];
        for s in &samples {
            let c = usize::from(s.normal);
            if per_class[c] % 2 == 0 {
                train.push((&s.image, s.normal));
            } else {
                test.push((&s.image, s.normal));
            }
            per_class[c] += 1;
        }
        let probe = anatok::evaluate::linear_probe(
            &state.teacher.enc,
            &state.cfg.model,
            &train,
            &test,
            &anatok::evaluate::ProbeConfig::default(),
        )
        .unwrap();
        println!("base_lr {base_lr}: probe auc {:.4}", probe.auc);
        let cluster_imgs: Vec<&Image> = samples
            .iter()
            .filter(|s| s.normal)
            .take(16)
            .map(|s| &s.image)
            .collect();
        let sil = cluster_quality(&state.teacher.enc, &state.cfg.model, &cluster_imgs).unwrap();
        println!("base_lr {base_lr}: silhouette pooled-z trained {sil:.4}");
    }
}

#[test]
#[ignore]
fn desk_probe_position_balance() {
    let pcfg = PhantomConfig::default();
    let cfg = TrainConfig {
        sinkhorn_position_wise: true,
        ..TrainConfig::default()
    };
    let images = gen_images(2000, 0, &pcfg);
    let t0 = Instant::now();
    let mut state = TrainState::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = resume_loop(&mut state, &images, dir.path(), None, None).unwrap();
    println!("train wall time {:.1}s", t0.elapsed().as_secs_f64());
    println!(
        "epoch means first {:.4} last {:.4} ratio {:.4}",
        outcome.epoch_mean_total[0],
        outcome.epoch_mean_total.last().unwrap(),
        outcome.epoch_mean_total.last().unwrap() / outcome.epoch_mean_total[0]
    );
    let samples = build_holdout(&pcfg, 8, (1, 4), 1_000_000, 200, 200).unwrap();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in &samples {
        let (score, _) =
            score_image(&state.teacher.enc, &state.params.dec, &state.cfg.model, &s.image)
                .unwrap();
        scores.push(score);
        labels.push(s.normal);
    }
    println!("detect auc {:.4}", auc(&scores, &labels).unwrap());
    let cluster_imgs: Vec<&Image> = samples
        .iter()
        .filter(|s| s.normal)
        .take(16)
        .map(|s| &s.image)
        .collect();
    let sil = cluster_quality(&state.teacher.enc, &state.cfg.model, &cluster_imgs).unwrap();
    println!("silhouette pooled-z trained {sil:.4}");
}

#[test]
#[ignore]
fn desk_probe() {
    let pcfg = PhantomConfig::default();
    let cfg = TrainConfig::default();
    let images = gen_images(2000, 0, &pcfg);
    let t0 = Instant::now();
    let mut state = TrainState::new(cfg).unwrap();
    let dir = std::path::PathBuf::from("target/desk_calib");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let outcome = resume_loop(&mut state, &images, &dir, None, None).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    println!("train wall time {train_secs:.1}s");
    println!(
        "epoch means first {:.4} last {:.4} ratio {:.4}",
        outcome.epoch_mean_total[0],
        outcome.epoch_mean_total.last().unwrap(),
        outcome.epoch_mean_total.last().unwrap() / outcome.epoch_mean_total[0]
    );
    let samples = build_holdout(&pcfg, 8, (1, 4), 1_000_000, 200, 200).unwrap();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in &samples {
        let (score, _) =
            score_image(&state.teacher.enc, &state.params.dec, &state.cfg.model, &s.image)
                .unwrap();
        scores.push(score);
        labels.push(s.normal);
    }
    println!("detect auc {:.4}", auc(&scores, &labels).unwrap());

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut per_class = [0usize; 2];
    for s in &samples {
        let c = usize::from(s.normal);
        if per_class[c] % 2 == 0 {
            train.push((&s.image, s.normal));
        } else {
            test.push((&s.image, s.normal));
        }
        per_class[c] += 1;
    }
    let probe = anatok::evaluate::linear_probe(
        &state.teacher.enc,
        &state.cfg.model,
        &train,
        &test,
        &anatok::evaluate::ProbeConfig::default(),
    )
    .unwrap();
    println!("probe auc {:.4}", probe.auc);

    let cluster_imgs: Vec<&Image> = samples
        .iter()
        .filter(|s| s.normal)
        .take(16)
        .map(|s| &s.image)
        .collect();
    let sil = cluster_quality(&state.teacher.enc, &state.cfg.model, &cluster_imgs).unwrap();
    let random = TrainState::new(state.cfg.clone()).unwrap();
    let sil0 = cluster_quality(&random.teacher.enc, &state.cfg.model, &cluster_imgs).unwrap();
    println!("silhouette pooled-z trained {sil:.4} random-init {sil0:.4}");
    for (name, st) in [("trained", &state), ("random ", &random)] {
        let (p, q, z) = silhouette_variants(st, &cluster_imgs);
        println!("silhouette {name}: pooled-z {p:.4} head-q {q:.4} raw-z {z:.4}");
    }
    println!("total wall time {:.1}s", t0.elapsed().as_secs_f64());
}

/// Silhouette of (a) 3x3 region-pooled token features, (b) head
/// probabilities, (c) raw token features, all on the teacher.
fn silhouette_variants(state: &TrainState, images: &[&Image]) -> (f64, f64, f64) {
    use anatok::evaluate::{position_group, silhouette};
    use ndarray::Array2;
    let mcfg = &state.cfg.model;
    let l = mcfg.tokens();
    let (gh, gw) = (mcfg.img_h / mcfg.patch, mcfg.img_w / mcfg.patch);
    let n = images.len();

    let mut pooled = Array2::<f32>::zeros((n * 9, mcfg.dim));
    let mut pooled_groups = Vec::new();
    let mut probs_all = Array2::<f32>::zeros((n * l, mcfg.k));
    let mut z_all = Array2::<f32>::zeros((n * l, mcfg.dim));
    let mut token_groups = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let z = anatok::backbone::encode(&state.teacher.enc, img, mcfg).unwrap();
        let (logits, _) = anatok::backbone::project(&state.teacher.head, &z).unwrap();
        let q = anatok::nn::softmax_rows(&logits, state.cfg.tau_s);
        let mut counts = [0usize; 9];
        for j in 0..l {
            let g = position_group(j, gh, gw);
            token_groups.push(g);
            let mut row = pooled.row_mut(i * 9 + g);
            row += &z.row(j);
            counts[g] += 1;
        }
        for g in 0..9 {
            let mut row = pooled.row_mut(i * 9 + g);
            row.mapv_inplace(|v| v / counts[g] as f32);
            pooled_groups.push(g);
        }
        probs_all
            .slice_mut(ndarray::s![i * l..(i + 1) * l, ..])
            .assign(&q);
        z_all
            .slice_mut(ndarray::s![i * l..(i + 1) * l, ..])
            .assign(&z);
    }
    (
        silhouette(&pooled, &pooled_groups).unwrap(),
        silhouette(&probs_all, &token_groups).unwrap(),
        silhouette(&z_all, &token_groups).unwrap(),
    )
}
