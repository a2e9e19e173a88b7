//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 2 5`.

use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use attrhash::analysis::{
    coherence_mu, cosine_objective, landscape_grid, minimize_coherence, random_unit_columns, verify_bound,
    welch_lower_bound,
};
use attrhash::dataset::Dataset;
use attrhash::io::{Checkpoint, TrainingMeta};
use attrhash::model::{Model, ModelConfig};
use attrhash::numerics::Tensor;
use attrhash::objective::{
    train, update_database_codes, DatabaseCodes, LossWeights, Objective, SimilarityOracle, TrainConfig,
};
use attrhash::pyramid::{LevelShape, PyramidGeometry};
use attrhash::retrieval::{average_precision, encode_database, hamming, label_map, rank_all, rank_query, PackedCodes};
use attrhash::synthgen::{generate, SynthSpec};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_integrity() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_attrhash"))
        .args(["gradcheck", "--branches", "1,2,4", "--step", "1e-6", "--tolerance", "1e-5"])
        .output()
        .map_err(err)?;
    let text = String::from_utf8_lossy(&out.stdout);
    let errors: Vec<&str> = text
        .lines()
        .filter(|l| l.starts_with("branches="))
        .map(|l| l.trim())
        .collect();
    check(
        out.status.success() && errors.len() == 3 && text.contains("status=pass"),
        errors.join(", "),
    )
}

fn welch_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_gap = f64::INFINITY;
    for trial in 0..1000 {
        let n = rng.gen_range(4..=32);
        let c = rng.gen_range(n + 1..=4 * n);
        let v = random_unit_columns(n, c, rng.gen()).map_err(err)?;
        let mu = coherence_mu(&v).map_err(err)?.mu;
        let bound = welch_lower_bound(c, n);
        if mu < bound - 1e-12 {
            return Err(format!("trial {trial}: mu {mu} below bound {bound} (n={n}, C={c})"));
        }
        let trace = verify_bound(&v).map_err(err)?;
        if !trace.holds(1e-12) {
            return Err(format!("trial {trial}: bound chain violated {trace:?}"));
        }
        worst_gap = worst_gap.min(mu - bound);
    }
    let mut printed = Vec::new();
    for (dims, expected) in [(12, 0.28058), (48, 0.12615)] {
        let out = Command::new(env!("CARGO_BIN_EXE_attrhash"))
            .args(["bound", "--classes", "200", "--dims", &dims.to_string()])
            .output()
            .map_err(err)?;
        let value: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().map_err(err)?;
        if (value - expected).abs() > 1e-5 {
            return Err(format!("bound(200, {dims}) printed {value}, expected {expected}"));
        }
        printed.push(format!("bound(200,{dims})={value}"));
    }
    Ok(format!("1000 trials, min mu-welch {worst_gap:.3e}; {}", printed.join(" ")))
}

fn coherence_trend() -> Outcome {
    let low = minimize_coherence(200, 12, 1500, 7).map_err(err)?.final_mu();
    let high = minimize_coherence(200, 48, 1500, 7).map_err(err)?.final_mu();
    check(
        high < low && low >= 0.2805,
        format!("mu(n=12)={low:.5} mu(n=48)={high:.5}"),
    )
}

fn landscape_trend() -> Outcome {
    let mut mins = Vec::new();
    for n in [12, 48] {
        let v = random_unit_columns(n, 200, 11).map_err(err)?;
        let grid = landscape_grid(&v, 21, 1.0, 13).map_err(err)?;
        let (center, _) = cosine_objective(&v).map_err(err)?;
        if (grid.center() - center).abs() > 1e-9 {
            return Err(format!("grid centre {} differs from objective {center}", grid.center()));
        }
        mins.push(grid.min());
    }
    check(mins[1] < mins[0], format!("min(n=12)={:.5} min(n=48)={:.5}", mins[0], mins[1]))
}

fn random_codes(count: usize, bits: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<i8>> {
    (0..count)
        .map(|_| (0..bits).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect())
        .collect()
}

fn retrieval_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in [12, 63, 64, 65, 128] {
        let codes = random_codes(1000, k, &mut rng);
        let packed = PackedCodes::pack(&codes).map_err(err)?;
        for q in (0..1000).step_by(37) {
            let float: Vec<f64> = (0..1000)
                .map(|j| codes[q].iter().zip(&codes[j]).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum())
                .collect();
            for (j, &d) in float.iter().enumerate() {
                let h = hamming(packed.code(q), packed.code(j)).map_err(err)?;
                if d != k as f64 - 2.0 * f64::from(h) {
                    return Err(format!("k={k}: dot {d} != k - 2H with H={h}"));
                }
            }
            let mut brute: Vec<usize> = (0..1000).collect();
            brute.sort_by(|&a, &b| float[b].total_cmp(&float[a]).then(a.cmp(&b)));
            if rank_query(q, packed.code(q), &packed).map_err(err)?.order != brute {
                return Err(format!("k={k}: ranking for query {q} differs from brute force"));
            }
        }
    }
    let ap = average_precision([true, false, true, false]);
    check((ap - 5.0 / 6.0).abs() < 1e-12, format!("AP fixture {ap:.15}"))
}

fn code_update_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut min_slack = f64::INFINITY;
    for instance in 0..100 {
        let gallery = rng.gen_range(3..16);
        let bits = rng.gen_range(1..10);
        let mut omega: Vec<usize> = (0..gallery).filter(|_| rng.gen_bool(0.6)).collect();
        if omega.is_empty() {
            omega.push(0);
        }
        let v = Tensor::matrix(
            omega.len(),
            bits,
            (0..omega.len() * bits).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .map_err(err)?;
        let oracle = SimilarityOracle::new((0..gallery).map(|_| rng.gen_range(0..4)).collect());
        let weights = LossWeights {
            beta: rng.gen_range(0.0..3.0),
            gamma: rng.gen_range(0.0..300.0),
        };
        let z = DatabaseCodes::random(gallery, bits, rng.gen());
        let value = |codes: &DatabaseCodes| {
            Objective { codes, oracle: &oracle, weights }.value(&v, &omega)
        };
        let before = value(&z).map_err(err)?;
        let updated = update_database_codes(&z, &v, &omega, &oracle, weights, 50).map_err(err)?;
        let after = value(&updated).map_err(err)?;
        let slack = before - after;
        if slack < -1e-12 {
            return Err(format!("instance {instance}: objective rose from {before} to {after}"));
        }
        min_slack = min_slack.min(slack);
    }
    Ok(format!("100 instances, min decrease {min_slack:.3e}"))
}

/// Benchmark, model and schedule shared by every arm of the branch ablation.
fn ablation_setup(seed: u64) -> Result<(Dataset, ModelConfig, TrainConfig), String> {
    let ds = generate(&SynthSpec {
        seed,
        ..SynthSpec::default()
    })
    .map_err(err)?;
    let mc = ModelConfig {
        geometry: ds.geometry.clone(),
        width: 64,
        heads: 8,
        ffn_hidden: 256,
        bits: 12,
        branches: 1,
    };
    let tc = TrainConfig {
        weights: LossWeights { beta: 1.0, gamma: 10.0 },
        learning_rate: 5e-6,
        samples: 140,
        outer_iterations: 10,
        seed,
        ..TrainConfig::default()
    };
    Ok((ds, mc, tc))
}

fn branch_ablation() -> Outcome {
    let seeds = [1u64, 2, 3];
    let mut means = Vec::new();
    for n in [1usize, 2, 4, 8] {
        let start = Instant::now();
        let mut total = 0.0;
        for &seed in &seeds {
            let (ds, mut mc, tc) = ablation_setup(seed)?;
            mc.branches = n;
            let out = train(&ds, &mc, &tc).map_err(err)?;
            let split = ds.require_split().map_err(err)?;
            let gallery = encode_database(&out.model, split.gallery.iter().map(|&i| &ds.images[i])).map_err(err)?;
            let queries = encode_database(&out.model, split.query.iter().map(|&i| &ds.images[i])).map_err(err)?;
            let rankings = rank_all(&queries, &gallery).map_err(err)?;
            total += label_map(&rankings, &ds.labels_of(&split.query), &ds.labels_of(&split.gallery)).map_err(err)?;
        }
        let mean = total / seeds.len() as f64;
        eprintln!("  branches={n} mean mAP={mean:.4} ({:.0}s)", start.elapsed().as_secs_f64());
        means.push(mean);
    }
    let monotone = means.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let detail = format!(
        "mAP N=1 {:.4}, N=2 {:.4}, N=4 {:.4}, N=8 {:.4}",
        means[0], means[1], means[2], means[3]
    );
    check(means[3] > means[0] && monotone && means[3] >= 0.80, detail)
}

fn inference_invariance() -> Outcome {
    let ds = generate(&SynthSpec {
        classes: 10,
        images_per_class: 2,
        query_fraction: None,
        seed: 4,
        ..SynthSpec::default()
    })
    .map_err(err)?;
    let config = |branches| ModelConfig {
        geometry: ds.geometry.clone(),
        width: 64,
        heads: 8,
        ffn_hidden: 256,
        bits: 12,
        branches,
    };
    let wide = Model::init(config(8), 9).map_err(err)?;
    let meta = TrainingMeta {
        beta: 1.0,
        gamma: 200.0,
        seed: 9,
        iterations: 0,
    };
    let tensors: Vec<Tensor> = wide.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    let narrow = Model::from_tensors(config(1), tensors).map_err(err)?;
    let reloaded = |m: Model| -> Result<Model, String> {
        let bytes = Checkpoint { model: m, meta: meta.clone() }.to_bytes();
        Ok(Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).map_err(err)?.model)
    };
    let wide = reloaded(wide)?;
    let narrow = reloaded(narrow)?;
    for (i, image) in ds.images.iter().enumerate() {
        let a = wide.forward_logits(image).map_err(err)?;
        let b = narrow.forward_logits(image).map_err(err)?;
        if a.iter().map(|x| x.to_bits()).ne(b.iter().map(|x| x.to_bits())) {
            return Err(format!("image {i}: logits differ between N=8 and N=1"));
        }
        if wide.forward_infer(image).map_err(err)? != narrow.forward_infer(image).map_err(err)? {
            return Err(format!("image {i}: codes differ"));
        }
    }
    Ok(format!("{} images bit-identical", ds.images.len()))
}

fn determinism_and_persistence() -> Outcome {
    let geometry = PyramidGeometry::new(vec![
        LevelShape { channels: 6, width: 2, height: 2 },
        LevelShape { channels: 4, width: 4, height: 4 },
    ])
    .map_err(err)?;
    let ds = generate(&SynthSpec {
        classes: 6,
        attributes: 8,
        images_per_class: 4,
        geometry: geometry.clone(),
        seed: 8,
        ..SynthSpec::default()
    })
    .map_err(err)?;
    let mc = ModelConfig {
        geometry,
        width: 16,
        heads: 2,
        ffn_hidden: 32,
        bits: 12,
        branches: 4,
    };
    let tc = TrainConfig {
        samples: 8,
        batch_size: 4,
        outer_iterations: 2,
        inner_epochs: 2,
        learning_rate: 1e-5,
        seed: 21,
        ..TrainConfig::default()
    };
    let run = || -> Result<Vec<u8>, String> {
        let out = train(&ds, &mc, &tc).map_err(err)?;
        let meta = TrainingMeta {
            beta: tc.weights.beta,
            gamma: tc.weights.gamma,
            seed: tc.seed,
            iterations: tc.outer_iterations as u64,
        };
        Ok(Checkpoint { model: out.model, meta }.to_bytes())
    };
    let first = run()?;
    if run()? != first {
        return Err("two runs with the same seed produced different checkpoints".into());
    }
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("model.ck");
    let original = Checkpoint::from_bytes(&first, std::path::Path::new("mem")).map_err(err)?;
    original.save(&path).map_err(err)?;
    let loaded = Checkpoint::load(&path).map_err(err)?;
    let before = encode_database(&original.model, &ds.images).map_err(err)?;
    let after = encode_database(&loaded.model, &ds.images).map_err(err)?;
    if before != after {
        return Err("codes changed across checkpoint save/load".into());
    }
    let codes_path = dir.path().join("codes.aqhc");
    after.save(&codes_path).map_err(err)?;
    let back = PackedCodes::load(&codes_path).map_err(err)?;
    check(
        back == after && back.to_bytes() == after.to_bytes(),
        format!("checkpoint {} bytes reproduced; {} codes round-tripped", first.len(), back.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient integrity", gradient_integrity),
        ("welch bound property", welch_property),
        ("coherence minimization trend", coherence_trend),
        ("landscape trend", landscape_trend),
        ("retrieval engine oracles", retrieval_oracles),
        ("code update contract", code_update_contract),
        ("auxiliary branch ablation", branch_ablation),
        ("inference invariance", inference_invariance),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {number} PASS [{name}] {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {number} FAIL [{name}] {detail} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
