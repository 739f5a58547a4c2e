use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde_json::json;

use lesion_count::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lesion_count::config::KvMap;
use lesion_count::data::{
    generate_synthetic, lvol, nifti, split_cases, CaseSampler, DatasetSampler, LvolDtype, Manifest,
    ManifestEntry, Split, SynthSpec, DEFAULT_PATCH_SIZE,
};
use lesion_count::eval::{
    detect_argmax, detect_quantile, evaluate, export_scatter, pair_order_experiment, ConstantPredictor,
    CountPredictor, OraclePredictor,
};
use lesion_count::fsutil::write_atomic;
use lesion_count::model::{ArchConfig, Network};
use lesion_count::train::{train, TrainConfig};
use lesion_count::Error;

use crate::{Cli, Command, ModelArgs};

const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn run(cli: Cli) -> Result<()> {
    let Cli {
        seed,
        out,
        config,
        command,
    } = cli;
    let kv = match &config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            KvMap::parse(&text).with_context(|| format!("in config {}", p.display()))?
        }
        None => KvMap::default(),
    };
    let ctx = Ctx { seed, out, kv };
    match command {
        Command::Synth { null } => synth(ctx, null),
        Command::Train {
            manifest,
            max_iterations,
        } => train_cmd(ctx, &manifest, max_iterations),
        Command::Eval { model, n, scatter } => eval_cmd(ctx, &model, n, scatter),
        Command::Pairs {
            model,
            n_pairs,
            constant,
        } => pairs_cmd(ctx, &model, n_pairs as usize, constant),
        Command::Detect {
            model,
            case_id,
            n,
            q,
        } => detect_cmd(ctx, &model, &case_id, n, q),
        Command::Convert { input, output, u8 } => convert(&input, &output, u8),
    }
}

struct Ctx {
    seed: Option<u64>,
    out: Option<PathBuf>,
    kv: KvMap,
}

impl Ctx {
    fn out_dir(&self) -> Result<&Path> {
        let out = self.out.as_deref().context("--out is required for this command")?;
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    write_atomic(&path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn json_text(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn synth(mut ctx: Ctx, null: bool) -> Result<()> {
    let mut spec = SynthSpec::from_kv(&mut ctx.kv).context("invalid synthetic spec")?;
    std::mem::take(&mut ctx.kv).finish().context("invalid synthetic spec")?;
    if let Some(s) = ctx.seed {
        spec.seed = s;
    }
    if null {
        spec = spec.null();
    }
    spec.validate().context("invalid synthetic spec")?;
    let out = ctx.out_dir()?;
    info!("generating {} cases with seed {}", spec.n_cases, spec.seed);
    let cases = generate_synthetic(&spec)?;
    let ids: Vec<String> = cases.iter().map(|c| c.case.case_id().to_string()).collect();
    let (train_ids, _) = split_cases(ids.clone(), spec.n_train, spec.seed)?;

    let mut entries = Vec::new();
    let mut truth = Vec::new();
    for sc in &cases {
        let id = sc.case.case_id();
        let rel = PathBuf::from("cases").join(id);
        fs::create_dir_all(out.join(&rel))?;
        let mut paths = Vec::new();
        for (m, name) in ["flair", "dwi", "t1", "t1c"].iter().enumerate() {
            let p = rel.join(format!("{name}.lvol"));
            lvol::save_lvol(&sc.case.modality_grid(m), LvolDtype::F64, &out.join(&p))?;
            paths.push(p);
        }
        let mask = rel.join("mask.lvol");
        lvol::save_lvol(&sc.case.mask_grid(), LvolDtype::U8, &out.join(&mask))?;
        let split = if train_ids.iter().any(|t| t == id) {
            Split::Train
        } else {
            Split::Val
        };
        let [flair, dwi, t1, t1c]: [PathBuf; 4] = paths.try_into().expect("four modalities");
        entries.push(ManifestEntry {
            case_id: id.to_string(),
            flair,
            dwi,
            t1,
            t1c,
            mask,
            split,
        });
        truth.push(json!({
            "case_id": id,
            "split": split.to_string(),
            "lesion_total": sc.case.lesion_total(),
            "lesions": sc.lesions.iter().map(|e| json!({
                "center": e.center,
                "semi_axes": e.semi_axes,
                "bbox_min": e.bounding_box(sc.case.dims()).0,
                "bbox_max": e.bounding_box(sc.case.dims()).1,
            })).collect::<Vec<_>>(),
        }));
    }
    Manifest::new(entries, out).save(&out.join("manifest.csv"))?;
    let mut kv = KvMap::default();
    spec.to_kv(&mut kv);
    kv.insert("tool_version", VERSION);
    write_text(out, "config.txt", &kv.to_canonical_text())?;
    write_text(out, "lesions.json", &json_text(&json!({ "seed": spec.seed, "cases": truth })))?;
    info!(
        "wrote {} cases ({} train, {} val) to {}",
        spec.n_cases,
        spec.n_train,
        spec.n_cases - spec.n_train,
        out.display()
    );
    Ok(())
}

fn train_cmd(mut ctx: Ctx, manifest_path: &Path, max_iterations: Option<u64>) -> Result<()> {
    let arch = ArchConfig::from_kv(&mut ctx.kv).context("invalid architecture config")?;
    let mut cfg = TrainConfig::from_kv(&mut ctx.kv).context("invalid training config")?;
    std::mem::take(&mut ctx.kv).finish().context("invalid config")?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if let Some(n) = max_iterations {
        cfg.max_iterations = n;
    }
    cfg.validate()?;
    let out = ctx.out_dir()?.to_path_buf();

    let manifest = Manifest::load(manifest_path)?;
    let cases = manifest.load_split(Split::Train)?;
    if cases.is_empty() {
        bail!("manifest {} has no training cases", manifest_path.display());
    }
    info!("loaded {} training cases", cases.len());

    let mut kv = KvMap::default();
    arch.to_kv(&mut kv);
    cfg.to_kv(&mut kv);
    kv.insert("manifest", manifest_path.display());
    kv.insert("tool_version", VERSION);
    write_text(&out, "config.txt", &kv.to_canonical_text())?;

    let mut sampler = DatasetSampler::new(&cases, arch.patch_size)?;
    let network = Network::init(arch, cfg.seed)?;
    let outcome = match train(network, &mut sampler, &cfg) {
        Ok(o) => o,
        Err(Error::Diverged {
            iteration,
            reason,
            last_good,
        }) => {
            let path = out.join("checkpoint.diverged.pcnt");
            save_checkpoint(&last_good, &path)?;
            bail!(
                "training diverged at iteration {iteration} ({reason}); last good state saved to {}",
                path.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&outcome.checkpoint, &out.join("checkpoint.pcnt"))?;
    write_text(&out, "loss_trace.csv", &outcome.trace_csv())?;
    let best = outcome.checkpoint.best_window.as_ref().map(|b| {
        json!({
            "index": b.index,
            "end_iteration": b.end_iteration,
            "mean_nll": b.mean_nll,
            "mean_total_loss": b.mean_total_loss,
        })
    });
    let summary = json!({
        "iterations_run": outcome.iterations_run,
        "stopped_early": outcome.stopped_early,
        "checkpoint_iteration": outcome.checkpoint.iteration,
        "complete_windows": outcome.windows.iter().filter(|w| w.complete).count(),
        "best_window": best,
        "seed": cfg.seed,
    });
    write_text(&out, "summary.json", &json_text(&summary))?;
    info!(
        "trained {} iterations{}; outputs in {}",
        outcome.iterations_run,
        if outcome.stopped_early { " (early stop)" } else { "" },
        out.display()
    );
    Ok(())
}

enum Predictor {
    Model(Box<Checkpoint>, Network),
    Oracle,
    Constant(ConstantPredictor),
}

impl Predictor {
    fn load(model: &ModelArgs, constant: Option<u32>) -> Result<Self> {
        if model.oracle {
            return Ok(Predictor::Oracle);
        }
        if let Some(c) = constant {
            return Ok(Predictor::Constant(ConstantPredictor(c)));
        }
        let path = model
            .checkpoint
            .as_ref()
            .context("--checkpoint is required unless --oracle is given")?;
        let ckpt = load_checkpoint(path)?;
        let net = ckpt.network()?;
        Ok(Predictor::Model(Box::new(ckpt), net))
    }

    fn as_dyn(&self) -> &dyn CountPredictor {
        match self {
            Predictor::Model(_, net) => net,
            Predictor::Oracle => &OraclePredictor,
            Predictor::Constant(c) => c,
        }
    }

    fn patch_size(&self) -> usize {
        match self {
            Predictor::Model(c, _) => c.arch.patch_size,
            _ => DEFAULT_PATCH_SIZE,
        }
    }

    fn describe(&self, kv: &mut KvMap, model: &ModelArgs) {
        let mode = match self {
            Predictor::Model(..) => "model".to_string(),
            Predictor::Oracle => "oracle".to_string(),
            Predictor::Constant(c) => format!("constant:{}", c.0),
        };
        kv.insert("predictor", mode);
        if let (Predictor::Model(..), Some(p)) = (self, &model.checkpoint) {
            kv.insert("checkpoint", p.display());
        }
        kv.insert("manifest", model.manifest.display());
        kv.insert("tool_version", VERSION);
    }
}

fn finish_report(ctx: &Ctx, name: &str, kv: &KvMap, report: &serde_json::Value) -> Result<()> {
    let text = json_text(report);
    if ctx.out.is_some() {
        let out = ctx.out_dir()?;
        write_text(out, "config.txt", &kv.to_canonical_text())?;
        write_text(out, name, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn no_config(ctx: &mut Ctx) -> Result<()> {
    std::mem::take(&mut ctx.kv)
        .finish()
        .context("this command takes no configuration keys")
}

fn eval_cmd(mut ctx: Ctx, model: &ModelArgs, n: usize, scatter: Option<usize>) -> Result<()> {
    no_config(&mut ctx)?;
    let predictor = Predictor::load(model, None)?;
    let manifest = Manifest::load(&model.manifest)?;
    let cases = manifest.load_split(Split::Val)?;
    let sampler = DatasetSampler::new(&cases, predictor.patch_size())?;
    let mut rng = Pcg64::seed_from_u64(ctx.seed());
    let report = evaluate(predictor.as_dyn(), &sampler, n, &mut rng)?;

    let mut kv = KvMap::default();
    predictor.describe(&mut kv, model);
    kv.insert("n", n);
    kv.insert("seed", ctx.seed());
    if let Some(k) = scatter {
        let out = ctx.out_dir()?;
        let pairs = &report.pairs[..k.min(report.pairs.len())];
        export_scatter(pairs, &out.join("scatter.csv"))?;
        kv.insert("scatter", k);
    }
    finish_report(&ctx, "metrics.json", &kv, &serde_json::to_value(&report)?)
}

fn pairs_cmd(mut ctx: Ctx, model: &ModelArgs, n_pairs: usize, constant: Option<u32>) -> Result<()> {
    no_config(&mut ctx)?;
    let predictor = Predictor::load(model, constant)?;
    let manifest = Manifest::load(&model.manifest)?;
    let cases = manifest.load_split(Split::Val)?;
    let sampler = DatasetSampler::new(&cases, predictor.patch_size())?;
    let mut rng = Pcg64::seed_from_u64(ctx.seed());
    let report = pair_order_experiment(predictor.as_dyn(), &sampler, n_pairs, &mut rng)?;

    let mut kv = KvMap::default();
    predictor.describe(&mut kv, model);
    kv.insert("n_pairs", n_pairs);
    kv.insert("seed", ctx.seed());
    finish_report(&ctx, "pairs.json", &kv, &serde_json::to_value(&report)?)
}

fn detect_cmd(mut ctx: Ctx, model: &ModelArgs, case_id: &str, n: usize, q: Option<f64>) -> Result<()> {
    no_config(&mut ctx)?;
    if n == 0 {
        bail!("usage: --n must be at least 1");
    }
    let predictor = Predictor::load(model, None)?;
    let manifest = Manifest::load(&model.manifest)?;
    let entry = manifest
        .find(case_id)
        .with_context(|| format!("case `{case_id}` is not in {}", model.manifest.display()))?;
    let case = manifest.load_case(entry)?;
    let sampler = CaseSampler::new(&case, predictor.patch_size())?;
    let mut rng = Pcg64::seed_from_u64(ctx.seed());

    let mut kv = KvMap::default();
    predictor.describe(&mut kv, model);
    kv.insert("case", case_id);
    kv.insert("n", n);
    kv.insert("seed", ctx.seed());
    let report = match q {
        None => {
            let d = detect_argmax(predictor.as_dyn(), &sampler, n, &mut rng)?;
            json!({
                "mode": "argmax",
                "case_id": case_id,
                "n": n,
                "center": d.center,
                "predicted_count": d.predicted_count,
                "true_count": d.true_count,
            })
        }
        Some(q) => {
            kv.insert("q", q);
            let found = detect_quantile(predictor.as_dyn(), &sampler, n, q, &mut rng)?;
            json!({
                "mode": "quantile",
                "case_id": case_id,
                "n": n,
                "q": q,
                "centers": found,
            })
        }
    };
    finish_report(&ctx, "detect.json", &kv, &report)
}

fn convert(input: &Path, output: &Path, as_u8: bool) -> Result<()> {
    let grid = nifti::load_nifti(input)?;
    let dtype = if as_u8 { LvolDtype::U8 } else { LvolDtype::F64 };
    lvol::save_lvol(&grid, dtype, output)?;
    info!(
        "converted {} ({:?}) to {}",
        input.display(),
        grid.dims(),
        output.display()
    );
    Ok(())
}
