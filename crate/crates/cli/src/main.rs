use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use attrhash::analysis::{self, CoherenceReport};
use attrhash::dataset::Dataset;
use attrhash::io::{self, Checkpoint, RunConfig, TrainingMeta};
use attrhash::model::{Model, ModelConfig, ModelNodes};
use attrhash::numerics::{grad_check, Tensor};
use attrhash::objective::{self, DatabaseCodes, Objective, SimilarityOracle};
use attrhash::pyramid::{LevelShape, PyramidGeometry};
use attrhash::retrieval::{self, PackedCodes};
use attrhash::synthgen::{self, SynthSpec};
use attrhash::Error;

#[derive(Parser)]
#[command(name = "attrhash", version, about = "Attribute-aware hashing for fine-grained retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    All,
    Query,
    Gallery,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (manifest plus feature file).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value_t = 50)]
        classes: usize,
        #[arg(long, default_value_t = 24)]
        attributes: usize,
        #[arg(long, default_value_t = 20)]
        images_per_class: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0.25)]
        jitter: f64,
        /// Levels as `c,w,h` triples separated by `;`, coarsest first.
        #[arg(long, default_value = "32,8,8;16,16,16")]
        levels: String,
        #[arg(long, default_value_t = 0.5)]
        query_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model from a config file and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `manifest`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Encode dataset images into a codes file.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        subset: Subset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank gallery codes for every query code.
    Retrieve {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean average precision of a rankings file.
    Eval {
        #[arg(long)]
        rankings: PathBuf,
        /// Labels from the manifest's query/gallery split.
        #[arg(long, conflicts_with = "labels")]
        manifest: Option<PathBuf>,
        /// File with `query=…` and `gallery=…` label lists.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Coherence of one code per class.
    Coherence {
        #[arg(long)]
        manifest: PathBuf,
        /// Relaxed codes from this checkpoint.
        #[arg(long, conflicts_with = "codes")]
        checkpoint: Option<PathBuf>,
        /// Binary codes of every manifest image, in manifest order.
        #[arg(long)]
        codes: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Welch lower bound on coherence.
    Bound {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        dims: usize,
    },
    /// Squared-cosine loss over a random 2-D slice, as CSV.
    Landscape {
        /// Random unit codes of this many classes (with `--dims`).
        #[arg(long, requires = "dims", conflicts_with = "checkpoint")]
        classes: Option<usize>,
        #[arg(long)]
        dims: Option<usize>,
        /// Class representatives of a trained model (with `--manifest`).
        #[arg(long, requires = "manifest")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
        #[arg(long, default_value_t = 1.0)]
        extent: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decoder attention of every query over one image's tokens, as CSV.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the training gradient on a small model.
    Gradcheck {
        /// Takes bits, heads, beta and gamma from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        branches: Vec<usize>,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure with an explicit exit status.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Exit>() {
        return e.code;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Invalid(_)) => 1,
        Some(Error::Numerical(_) | Error::NonScalarRoot(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn parse_levels(text: &str) -> anyhow::Result<PyramidGeometry> {
    let levels = text
        .split(';')
        .map(|part| {
            let v: Vec<usize> = part
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad level '{part}'")))?;
            match v.as_slice() {
                &[channels, width, height] => Ok(LevelShape { channels, width, height }),
                _ => Err(Error::Config(format!("level '{part}' needs c,w,h"))),
            }
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(PyramidGeometry::new(levels).map_err(|e| Error::Config(e.to_string()))?)
}

fn load_dataset(manifest: &Path) -> anyhow::Result<Dataset> {
    Ok(io::ingest(manifest)?.load()?)
}

fn subset_indices(ds: &Dataset, subset: Subset) -> anyhow::Result<Vec<usize>> {
    Ok(match subset {
        Subset::All => (0..ds.len()).collect(),
        Subset::Query => ds.require_split()?.query.clone(),
        Subset::Gallery => ds.require_split()?.gallery.clone(),
    })
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn relaxed_codes(model: &Model, ds: &Dataset) -> anyhow::Result<Vec<Vec<f64>>> {
    ds.images
        .iter()
        .map(|img| Ok(model.forward_logits(img)?.iter().map(|h| h.tanh()).collect()))
        .collect()
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth {
            out,
            name,
            classes,
            attributes,
            images_per_class,
            noise,
            jitter,
            levels,
            query_fraction,
            seed,
        } => {
            let spec = SynthSpec {
                name: name.clone(),
                classes,
                attributes,
                images_per_class,
                noise,
                jitter,
                geometry: parse_levels(&levels)?,
                query_fraction: Some(query_fraction),
                seed,
                ..SynthSpec::default()
            };
            let ds = synthgen::generate(&spec)?;
            let path = io::write_dataset(&ds, &out, &name)?;
            println!("{}", path.display());
        }
        Command::Train {
            config,
            manifest,
            out,
            log,
            seed,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let manifest = manifest
                .or(cfg.manifest.clone())
                .ok_or_else(|| Error::Config("no manifest given in config or on the command line".into()))?;
            let ds = load_dataset(&manifest)?;
            let model_config = cfg.model_config(ds.geometry.clone())?;
            let mut log_text = String::from("outer epoch pairwise quantization total\n");
            let outcome = objective::train_with(&ds, &model_config, &cfg.train, |r| {
                log_text.push_str(&format!(
                    "{} {} {} {} {}\n",
                    r.outer, r.epoch, r.pairwise, r.quantization, r.total
                ));
                eprintln!(
                    "outer {:>3} epoch {} pairwise {:.4} quantization {:.4} total {:.4}",
                    r.outer, r.epoch, r.pairwise, r.quantization, r.total
                );
            })?;
            let ck = Checkpoint {
                model: outcome.model,
                meta: TrainingMeta {
                    beta: cfg.train.weights.beta,
                    gamma: cfg.train.weights.gamma,
                    seed: cfg.train.seed,
                    iterations: cfg.train.outer_iterations as u64,
                },
            };
            ck.save(&out)?;
            if let Some(p) = log {
                std::fs::write(&p, log_text).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("{}", out.display());
        }
        Command::Encode {
            checkpoint,
            manifest,
            subset,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = load_dataset(&manifest)?;
            if ds.geometry != ck.model.config.geometry {
                return Err(Error::Data {
                    path: manifest,
                    msg: "pyramid geometry does not match the checkpoint".into(),
                }
                .into());
            }
            let idx = subset_indices(&ds, subset)?;
            let codes = retrieval::encode_database(&ck.model, idx.iter().map(|&i| &ds.images[i]))?;
            codes.save(&out)?;
            println!("{} codes of {} bits -> {}", codes.len(), codes.bits(), out.display());
        }
        Command::Retrieve { queries, gallery, out } => {
            let q = PackedCodes::load(&queries)?;
            let g = PackedCodes::load(&gallery)?;
            let rankings = retrieval::rank_all(&q, &g)?;
            std::fs::write(&out, retrieval::rankings_to_text(&rankings))
                .with_context(|| format!("writing {}", out.display()))?;
            println!("{} rankings -> {}", rankings.len(), out.display());
        }
        Command::Eval {
            rankings,
            manifest,
            labels,
        } => {
            let text = std::fs::read_to_string(&rankings).map_err(|e| Error::Io {
                path: rankings.clone(),
                source: e,
            })?;
            let ranked = retrieval::rankings_from_text(&text, &rankings)?;
            let (ql, gl) = match (manifest, labels) {
                (Some(m), None) => {
                    let h = io::ingest(&m)?;
                    let split = h
                        .manifest
                        .split
                        .clone()
                        .ok_or_else(|| Error::Data { path: m.clone(), msg: "manifest has no split".into() })?;
                    let l = &h.manifest.labels;
                    (
                        split.query.iter().map(|&i| l[i]).collect::<Vec<_>>(),
                        split.gallery.iter().map(|&i| l[i]).collect::<Vec<_>>(),
                    )
                }
                (None, Some(p)) => read_label_file(&p)?,
                _ => return Err(Exit { code: 1, message: "give --manifest or --labels".into() }.into()),
            };
            for r in &ranked {
                if r.query >= ql.len() || r.order.iter().any(|&i| i >= gl.len()) {
                    return Err(Error::Data {
                        path: rankings.clone(),
                        msg: format!("ranking for query {} indexes outside the label lists", r.query),
                    }
                    .into());
                }
            }
            let m = retrieval::label_map(&ranked, &ql, &gl)?;
            println!("queries={}", ranked.len());
            println!("map={m:.6}");
        }
        Command::Coherence {
            manifest,
            checkpoint,
            codes,
            seed,
        } => {
            let ds = load_dataset(&manifest)?;
            let vectors: Vec<Vec<f64>> = match (checkpoint, codes) {
                (Some(c), None) => relaxed_codes(&Checkpoint::load(&c)?.model, &ds)?,
                (None, Some(p)) => {
                    let packed = PackedCodes::load(&p)?;
                    if packed.len() != ds.len() {
                        bail!(Error::Data {
                            path: p,
                            msg: format!("{} codes for {} images", packed.len(), ds.len()),
                        });
                    }
                    packed
                        .unpack()
                        .into_iter()
                        .map(|c| c.into_iter().map(f64::from).collect())
                        .collect()
                }
                _ => return Err(Exit { code: 1, message: "give --checkpoint or --codes".into() }.into()),
            };
            let v = analysis::class_representatives(&vectors, &ds.labels, seed)?;
            print!("{}", CoherenceReport::new(&v)?.render());
        }
        Command::Bound { classes, dims } => {
            if classes < 2 || dims == 0 {
                return Err(Exit { code: 1, message: "need --classes ≥ 2 and --dims ≥ 1".into() }.into());
            }
            println!("{:.6}", analysis::welch_lower_bound(classes, dims));
        }
        Command::Landscape {
            classes,
            dims,
            checkpoint,
            manifest,
            resolution,
            extent,
            seed,
            out,
        } => {
            let v = match (classes, dims, checkpoint, manifest) {
                (Some(c), Some(n), None, _) => analysis::random_unit_columns(n, c, seed)?,
                (None, _, Some(ck), Some(m)) => {
                    let ds = load_dataset(&m)?;
                    let codes = relaxed_codes(&Checkpoint::load(&ck)?.model, &ds)?;
                    analysis::class_representatives(&codes, &ds.labels, seed)?
                }
                _ => {
                    return Err(Exit {
                        code: 1,
                        message: "give --classes and --dims, or --checkpoint and --manifest".into(),
                    }
                    .into())
                }
            };
            let grid = analysis::landscape_grid(&v, resolution, extent, seed)?;
            write_or_print(out.as_deref(), &grid.to_csv())?;
            eprintln!("center={} min={}", grid.center(), grid.min());
        }
        Command::Attn {
            checkpoint,
            manifest,
            image,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let handle = io::ingest(&manifest)?;
            let img = handle.read_image(image)?;
            write_or_print(out.as_deref(), &analysis::attention_export(&ck.model, &img)?)?;
        }
        Command::Gradcheck {
            config,
            branches,
            step,
            tolerance,
            seed,
        } => gradcheck(config.as_deref(), &branches, step, tolerance, seed)?,
    }
    Ok(())
}

fn read_label_file(path: &Path) -> anyhow::Result<(Vec<usize>, Vec<usize>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut pairs = io::config::parse_pairs(&text, path)?;
    let mut list = |key: &str| -> anyhow::Result<Vec<usize>> {
        let v = pairs.remove(key).ok_or_else(|| Error::Data {
            path: path.to_path_buf(),
            msg: format!("missing '{key}'"),
        })?;
        v.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    anyhow!(Error::Data {
                        path: path.to_path_buf(),
                        msg: format!("bad label '{s}'"),
                    })
                })
            })
            .collect()
    };
    let q = list("query")?;
    let g = list("gallery")?;
    if let Some(k) = pairs.keys().next() {
        bail!(Error::Data {
            path: path.to_path_buf(),
            msg: format!("unknown key '{k}'"),
        });
    }
    Ok((q, g))
}

fn gradcheck(config: Option<&Path>, branches: &[usize], step: f64, tolerance: f64, seed: u64) -> anyhow::Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig {
            bits: 3,
            heads: 2,
            ..RunConfig::default()
        },
    };
    let weights = cfg.train.weights;
    let geometry = PyramidGeometry::new(vec![
        LevelShape { channels: 3, width: 1, height: 1 },
        LevelShape { channels: 2, width: 2, height: 2 },
    ])?;
    let mut worst = 0.0f64;
    for &n in branches {
        let mut width = lcm(cfg.heads.max(1), n.max(1));
        while width < 8 {
            width *= 2;
        }
        let mc = ModelConfig {
            geometry: geometry.clone(),
            width,
            heads: cfg.heads,
            ffn_hidden: 2 * width,
            bits: cfg.bits.min(4),
            branches: n,
        };
        let model = Model::init(mc.clone(), seed)?;
        let images = synthgen::generate(&SynthSpec {
            classes: 3,
            attributes: 3,
            images_per_class: 1,
            geometry: geometry.clone(),
            query_fraction: None,
            seed,
            ..SynthSpec::default()
        })?
        .images;
        let oracle = SimilarityOracle::new(vec![0, 1, 0]);
        let codes = DatabaseCodes::random(3, mc.train_bits(), seed + 5);
        let obj = Objective {
            codes: &codes,
            oracle: &oracle,
            weights,
        };
        let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let report = grad_check(&params, step, tolerance, |g, ids| {
            let nodes = ModelNodes::from_ids(&mc, ids.to_vec());
            obj.total_loss(g, &model, &nodes, &[(0, &images[0]), (2, &images[2])])
        })?;
        println!("branches={n} max_rel_error={:.3e}", report.max_rel_error);
        for ((name, _), e) in model.named_params().iter().zip(&report.per_param) {
            println!("  {name:<28} {e:.3e}");
        }
        worst = worst.max(report.max_rel_error);
    }
    println!("tolerance={tolerance:e}");
    if worst < tolerance {
        println!("status=pass");
        Ok(())
    } else {
        println!("status=fail");
        Err(Exit {
            code: 3,
            message: format!("gradient check failed: {worst:.3e} ≥ {tolerance:e}"),
        }
        .into())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}
