use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use medformer::bench::{self, BenchShape, Variant};
use medformer::data::{mft, synth_task, write_dataset, Dataset, MftData, MftFile, SegSample};
use medformer::labels::LabelMap;
use medformer::metrics::{report_csv, summarize, summary_csv};
use medformer::model::{load_checkpoint, AttentionKind, Checkpoint};
use medformer::semantic_map::token_cosine_similarity;
use medformer::train::{evaluate, run_training, Preprocess, RunConfig};
use medformer::{data, Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "medformer", version, about = "Train, evaluate and inspect MedFormer segmentation models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected H,W")?;
    let a: usize = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{e}"))?;
    if a == 0 || b == 0 {
        return Err("extents must be positive".into());
    }
    Ok((a, b))
}

fn parse_spacing(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected SY,SX")?;
    Ok((a.trim().parse().map_err(|e| format!("{e}"))?, b.trim().parse().map_err(|e| format!("{e}"))?))
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on the `train` split, validating on `val`.
    Train {
        /// Run config (key=value); defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sliding-window evaluation with per-case DSC and HD95.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics.csv and summary.csv.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Sliding window H,W; defaults to the whole image.
        #[arg(long, value_parser = parse_pair)]
        window: Option<(usize, usize)>,
    },
    /// Segment one MFT image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// f32 [C, H, W] MFT file.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_parser = parse_spacing, default_value = "1,1")]
        spacing: (f64, f64),
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_pair)]
        window: Option<(usize, usize)>,
    },
    /// MAC counts and scaling fits for the attention variants.
    Bench {
        /// conv, mhsa, window, bmha or all.
        #[arg(long, default_value = "all")]
        variant: String,
        /// Largest side of the doubling sweep.
        #[arg(long, default_value_t = 64)]
        sweep: usize,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export one semantic token's attention over the token map.
    InspectAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        case: String,
        /// Encoder level 0..=2.
        #[arg(long, default_value_t = 2)]
        level: usize,
        #[arg(long)]
        token: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export |cosine| similarity between semantic tokens of one level.
    InspectCosine {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        case: String,
        #[arg(long, default_value_t = 2)]
        level: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        n_train: usize,
        #[arg(long, default_value_t = 64)]
        n_val: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

/// Plain (P2) grayscale rendering scaled so the maximum maps to 255.
fn pgm(values: &[f32], h: usize, w: usize) -> String {
    let max = values.iter().cloned().fold(0.0f32, f32::max);
    let mut s = format!("P2\n{w} {h}\n255\n");
    for row in values.chunks(w) {
        let px: Vec<String> = row
            .iter()
            .map(|&v| if max > 0.0 { ((v / max) * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 }.to_string())
            .collect();
        s.push_str(&px.join(" "));
        s.push('\n');
    }
    s
}

fn load(checkpoint: &Path) -> Result<(Checkpoint<f32>, Preprocess)> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let pre = Preprocess::from_meta(&ck.meta)?;
    Ok((ck, pre))
}

fn find_case(ds: &Dataset, id: &str) -> Result<SegSample> {
    let entry = ds
        .manifest
        .cases
        .iter()
        .find(|c| c.id == id)
        .ok_or_else(|| Error::Data(format!("case `{id}` not in {}", ds.root.display())))?;
    ds.load_case(entry)
}

fn cmd_train(config: Option<PathBuf>, data_dir: PathBuf, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let text = match &config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = Dataset::open(&data_dir)?;
    let (_, report) = run_training(&cfg, &ds, &out)?;
    for e in &report.history {
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.5}  val_dsc {}",
            e.epoch,
            e.lr,
            e.loss,
            e.val_dsc.map_or("-".into(), |d| format!("{d:.4}"))
        );
    }
    println!("run written to {}", out.display());
    Ok(())
}

fn cmd_eval(checkpoint: PathBuf, data_dir: PathBuf, out: PathBuf, split: String, window: Option<(usize, usize)>) -> Result<()> {
    let (ck, pre) = load(&checkpoint)?;
    let ds = Dataset::open(&data_dir)?;
    let cases = ds.load_split(&split)?;
    let cases = cases.iter().map(|s| pre.apply(s)).collect::<Result<Vec<_>>>()?;
    let recs = evaluate(&ck.model, &cases, window)?;
    let summary = summarize(&recs);
    mkdir(&out)?;
    write(&out.join("metrics.csv"), &report_csv(&recs))?;
    write(&out.join("summary.csv"), &summary_csv(&summary))?;
    for s in &summary {
        println!(
            "class {}  cases {}  mean DSC {:.4}  mean HD95 {:.3}  undefined HD95 {}",
            s.class, s.cases, s.mean_dsc, s.mean_hd95, s.undefined_hd95
        );
    }
    Ok(())
}

fn cmd_infer(checkpoint: PathBuf, image: PathBuf, spacing: (f64, f64), out: PathBuf, window: Option<(usize, usize)>) -> Result<()> {
    let (ck, pre) = load(&checkpoint)?;
    let f = mft::read_mft(&image)?;
    let (c, h, w, v) = match (f.shape.as_slice(), f.data) {
        (&[c, h, w], MftData::F32(v)) => (c, h, w, v),
        (s, _) => return Err(Error::Data(format!("image must be f32 [C, H, W], got {s:?}"))),
    };
    let s = pre.apply(&SegSample::new("input", c, v, LabelMap::filled(h, w, 0), spacing)?)?;
    let win = window.unwrap_or((s.height(), s.width()));
    let probs = data::sliding_window_infer(&ck.model, &s.image_tensor::<f32>(), win, true)?;
    let labels = LabelMap::argmax(&probs)?;
    mkdir(&out)?;
    mft::write_tensor(&out.join("probs.mft"), &probs)?;
    mft::write_mft(&out.join("labels.mft"), &MftFile::from_labels(&labels))?;
    let lv: Vec<f32> = labels.data.iter().map(|&l| l as f32).collect();
    write(&out.join("labels.pgm"), &pgm(&lv, labels.height, labels.width))?;
    println!("{}×{} prediction written to {}", labels.height, labels.width, out.display());
    Ok(())
}

fn cmd_bench(variant: String, sweep: usize, d: usize, heads: usize, out: Option<PathBuf>) -> Result<()> {
    let variants = if variant == "all" { Variant::ALL.to_vec() } else { vec![variant.parse()?] };
    let base = BenchShape { d, heads, ..bench::default_shape() };
    let shapes = bench::doubling_shapes(base, sweep);
    let configs: Vec<(Variant, BenchShape)> = variants.iter().flat_map(|&v| shapes.iter().map(move |&s| (v, s))).collect();
    let rows = bench::report(&configs)?;
    print!("{}", bench::report_table(&rows));
    for v in &variants {
        let pts: Vec<(usize, u64)> = rows.iter().filter(|r| r.variant == *v).map(|r| (r.shape.n(), r.measured_macs)).collect();
        match bench::linearity_fit(&pts) {
            Ok(f) => println!("{v}: log-log slope {:.4}, R² {:.6}", f.slope, f.r2),
            Err(e) => println!("{v}: no fit ({e})"),
        }
    }
    if let Some(p) = out {
        write(&p, &bench::report_csv(&rows))?;
    }
    Ok(())
}

fn traced_case(checkpoint: &Path, data_dir: &Path, case: &str, level: usize) -> Result<(Checkpoint<f32>, medformer::model::ForwardOutput<f32>)> {
    let (ck, pre) = load(checkpoint)?;
    if ck.model.cfg.attention != AttentionKind::Bidirectional {
        return Err(Error::Data("the checkpoint's model has no semantic maps".into()));
    }
    if level >= medformer::model::LEVELS {
        return Err(Error::config("level", format!("{level} is not an encoder level (0..{})", medformer::model::LEVELS)));
    }
    let s = pre.apply(&find_case(&Dataset::open(data_dir)?, case)?)?;
    let _g = medformer::tensor::no_grad();
    let out = ck.model.forward_traced(&s.image_tensor::<f32>())?;
    Ok((ck, out))
}

fn cmd_inspect_attn(checkpoint: PathBuf, data_dir: PathBuf, case: String, level: usize, token: usize, out: PathBuf) -> Result<()> {
    let (_, fwd) = traced_case(&checkpoint, &data_dir, &case, level)?;
    let block = fwd.encoder_trace[level].blocks.last().ok_or_else(|| Error::Data("level has no blocks".into()))?;
    let (h, w) = (fwd.encoder_maps[level].shape()[1], fwd.encoder_maps[level].shape()[2]);
    let heads = &block.m_weights;
    let l = heads[0].shape()[0];
    if token >= l {
        return Err(Error::config("token", format!("{token} out of range, the semantic map has {l} tokens")));
    }
    // head-averaged row of the semantic-stream attention
    let n = h * w;
    let mut row = vec![0.0f32; n];
    for a in heads {
        let d = a.data();
        for p in 0..n {
            row[p] += d[token * n + p] / heads.len() as f32;
        }
    }
    mkdir(&out)?;
    mft::write_tensor(&out.join("attn.mft"), &Tensor::from_vec(&[h, w], row.clone())?)?;
    write(&out.join("attn.pgm"), &pgm(&row, h, w))?;
    println!("token {token} at level {level}: {h}×{w} map, weights sum to {:.6}", row.iter().map(|&v| v as f64).sum::<f64>());
    Ok(())
}

fn cmd_inspect_cosine(checkpoint: PathBuf, data_dir: PathBuf, case: String, level: usize, out: PathBuf) -> Result<()> {
    let (_, fwd) = traced_case(&checkpoint, &data_dir, &case, level)?;
    let cos = token_cosine_similarity(&fwd.semantic_maps[level])?;
    let l = cos.shape()[0];
    let d = cos.to_vec();
    let mut csv = String::new();
    for r in 0..l {
        let row: Vec<String> = (0..l).map(|c| d[r * l + c].to_string()).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    mkdir(&out)?;
    write(&out.join("cosine.csv"), &csv)?;
    println!("{l}×{l} |cosine| matrix written to {}", out.join("cosine.csv").display());
    Ok(())
}

fn cmd_synth(out: PathBuf, n_train: usize, n_val: usize, size: usize, classes: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = synth_task(&mut rng, n_train + n_val, size, size, classes)?;
    let tagged: Vec<(SegSample, String)> = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, if i < n_train { "train" } else { "val" }.to_string()))
        .collect();
    write_dataset(&out, classes, &tagged)?;
    println!("{} cases written to {}", tagged.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Train { config, data, out, seed } => cmd_train(config, data, out, seed),
        Cmd::Eval { checkpoint, data, out, split, window } => cmd_eval(checkpoint, data, out, split, window),
        Cmd::Infer { checkpoint, image, spacing, out, window } => cmd_infer(checkpoint, image, spacing, out, window),
        Cmd::Bench { variant, sweep, d, heads, out } => cmd_bench(variant, sweep, d, heads, out),
        Cmd::InspectAttn { checkpoint, data, case, level, token, out } => cmd_inspect_attn(checkpoint, data, case, level, token, out),
        Cmd::InspectCosine { checkpoint, data, case, level, out } => cmd_inspect_cosine(checkpoint, data, case, level, out),
        Cmd::Synth { out, n_train, n_val, size, classes, seed } => cmd_synth(out, n_train, n_val, size, classes, seed),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
