use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use lpmc::codec::{Codec, PromptSet};
use lpmc::config::{Precision, RunConfig};
use lpmc::io::{
    load_checkpoint, read_ppm, save_checkpoint, write_atomic, write_pgm, Checkpoint,
    CheckpointKind, Container, Dataset, NO_PROMPT,
};
use lpmc::metrics::{
    bd_rate, bit_allocation_map, map_csv, ms_ssim, psnr, to_gray8, upsample_nearest, Quality,
    RdCurve, RdPoint,
};
use lpmc::params::ParamStore;
use lpmc::report::ParamReport;
use lpmc::tensor::{Real, Tensor};
use lpmc::training::{train_backbone, tune_prompt_set, StepLog};
use lpmc::{Error, Result};
use rayon::prelude::*;

use crate::{Command, Metric};

pub fn run(run: &RunConfig, command: Command) -> Result<()> {
    match command {
        Command::Train { steps } => match run.train.precision {
            Precision::F32 => train::<f32>(run, steps),
            Precision::F64 => train::<f64>(run, steps),
        },
        Command::Tune { lambda_id, steps } => match run.train.precision {
            Precision::F32 => tune::<f32>(run, lambda_id, steps),
            Precision::F64 => tune::<f64>(run, lambda_id, steps),
        },
        Command::Encode {
            input,
            out,
            promptset,
        } => encode(run, &input, &out, promptset),
        Command::Decode { input, out } => decode(run, &input, &out),
        Command::Eval { dir, out } => eval(run, &dir, &out),
        Command::Bdrate {
            test,
            anchor,
            metric,
        } => bdrate(&test, &anchor, metric),
        Command::Maps {
            input,
            promptset,
            out_dir,
        } => maps(run, &input, promptset, &out_dir),
        Command::Params { paper_scale } => params(run, paper_scale),
    }
}

fn checkpoint_dir(run: &RunConfig) -> PathBuf {
    PathBuf::from(&run.paths.checkpoints)
}

fn backbone_path(run: &RunConfig) -> PathBuf {
    checkpoint_dir(run).join("backbone.lpmk")
}

fn promptset_path(run: &RunConfig, lambda_id: u8) -> PathBuf {
    checkpoint_dir(run).join(format!("promptset_{lambda_id}.lpmk"))
}

fn load_codec(run: &RunConfig) -> Result<Codec> {
    Codec::from_checkpoint(run.model.clone(), load_checkpoint(&backbone_path(run))?)
}

fn load_promptset(run: &RunConfig, lambda_id: u8) -> Result<PromptSet> {
    let ps = PromptSet::from_checkpoint(
        &run.model,
        load_checkpoint(&promptset_path(run, lambda_id))?,
    )?;
    if ps.lambda_id != lambda_id {
        return Err(Error::Format(format!(
            "promptset_{lambda_id}.lpmk holds lambda id {}",
            ps.lambda_id
        )));
    }
    Ok(ps)
}

fn load_dataset(run: &RunConfig) -> Result<Dataset> {
    let data = Dataset::load_dir(Path::new(&run.paths.dataset))?;
    let small = data
        .images
        .iter()
        .filter(|i| i.width < run.train.crop || i.height < run.train.crop)
        .count();
    if small > 0 {
        eprintln!(
            "warning: {small} image(s) smaller than the {0}x{0} crop are replicate-padded",
            run.train.crop
        );
    }
    Ok(data)
}

/// Averages step logs over one epoch and appends them to the metrics log.
struct EpochLog {
    path: PathBuf,
    steps_per_epoch: usize,
    pending: Vec<StepLog>,
}

impl EpochLog {
    fn new(run: &RunConfig, data: &Dataset) -> Self {
        Self {
            path: PathBuf::from(&run.paths.metrics),
            steps_per_epoch: data.batches_per_epoch(run.train.batch_size),
            pending: Vec::new(),
        }
    }

    fn push(&mut self, entry: &StepLog) -> Result<()> {
        self.pending.push(entry.clone());
        if self.pending.len() == self.steps_per_epoch {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let Some(last) = self.pending.last() else {
            return Ok(());
        };
        let n = self.pending.len() as f64;
        let mean = |f: fn(&StepLog) -> f64| self.pending.iter().map(f).sum::<f64>() / n;
        let row = StepLog {
            loss: mean(|s| s.loss),
            bpp: mean(|s| s.bpp),
            mse: mean(|s| s.mse),
            ..last.clone()
        };
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let fresh = !self.path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        if fresh {
            writeln!(f, "{}", StepLog::CSV_HEADER)?;
        }
        writeln!(f, "{}", row.csv_row())?;
        println!("{}", row.csv_row());
        self.pending.clear();
        Ok(())
    }
}

fn due(every: usize, step: usize, total: usize) -> bool {
    every > 0 && (step + 1).is_multiple_of(every) && step + 1 < total
}

fn train<F: Real>(run: &RunConfig, steps: Option<usize>) -> Result<()> {
    let data = load_dataset(run)?;
    let steps = steps.unwrap_or(run.train.stage1_steps);
    std::fs::create_dir_all(checkpoint_dir(run))?;
    let model_id = run.model.model_id();
    let save = |store: &ParamStore<F>| {
        let ck = Checkpoint {
            model_id,
            kind: CheckpointKind::Backbone,
            params: store.cast(),
        };
        save_checkpoint(&backbone_path(run), &ck)
    };
    let mut store = lpmc::backbone::init_backbone::<F>(&run.model, run.train.seed)?;
    let mut log = EpochLog::new(run, &data);
    let mut failure = None;
    train_backbone(
        &run.model,
        &run.train,
        &data,
        &mut store,
        steps,
        |entry, store| {
            let r = log.push(entry).and_then(|_| {
                if due(run.train.checkpoint_every, entry.step, steps) {
                    save(store)
                } else {
                    Ok(())
                }
            });
            if let Err(e) = r {
                failure.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    log.flush()?;
    save(&store)
}

fn tune<F: Real>(run: &RunConfig, lambda_id: u8, steps: Option<usize>) -> Result<()> {
    let lambda = run.train.lambda(lambda_id)?;
    let codec = load_codec(run)?;
    let data = load_dataset(run)?;
    let steps = steps.unwrap_or(run.train.stage2_steps);
    let backbone: ParamStore<F> = codec.backbone.cast();
    let mut prompts: ParamStore<F> =
        PromptSet::init(&run.model, lambda_id, lambda, run.train.seed)?
            .params
            .cast();
    let save = |store: &ParamStore<F>| {
        let ps = PromptSet {
            lambda_id,
            lambda,
            params: store.cast(),
        };
        save_checkpoint(
            &promptset_path(run, lambda_id),
            &ps.to_checkpoint(&run.model),
        )
    };
    let mut log = EpochLog::new(run, &data);
    let mut failure = None;
    tune_prompt_set(
        &run.model,
        &run.train,
        &data,
        &backbone,
        &mut prompts,
        lambda_id,
        lambda,
        steps,
        |entry, store| {
            let r = log.push(entry).and_then(|_| {
                if due(run.train.checkpoint_every, entry.step, steps) {
                    save(store)
                } else {
                    Ok(())
                }
            });
            if let Err(e) = r {
                failure.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    log.flush()?;
    save(&prompts)
}

fn encode(run: &RunConfig, input: &Path, out: &Path, promptset: Option<u8>) -> Result<()> {
    let codec = load_codec(run)?;
    let prompt = promptset.map(|id| load_promptset(run, id)).transpose()?;
    let img = read_ppm(input)?;
    let c = codec.compress(&img, prompt.as_ref())?;
    write_atomic(out, &c.to_bytes())?;
    println!("bytes={} bpp={:.6}", c.total_bits() / 8, c.bpp());
    Ok(())
}

fn decode(run: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let codec = load_codec(run)?;
    let c = Container::parse(&std::fs::read(input)?, Some(codec.model_id()))?;
    let prompt = if c.lambda_id == NO_PROMPT {
        None
    } else {
        Some(load_promptset(run, c.lambda_id)?)
    };
    let img = codec.decompress(&c, prompt.as_ref())?;
    lpmc::io::write_ppm(out, &img)
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var("LPMC_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("LPMC_THREADS={v:?} is not a thread count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Invalid(format!(
            "no .ppm images in {}",
            dir.display()
        )));
    }
    Ok(paths)
}

fn eval(run: &RunConfig, dir: &Path, out: &Path) -> Result<()> {
    let codec = load_codec(run)?;
    let mut prompts = Vec::new();
    for id in 0..run.train.lambdas.len() as u8 {
        if promptset_path(run, id).exists() {
            prompts.push(load_promptset(run, id)?);
        }
    }
    let paths = list_ppm(dir)?;
    let rows: Vec<Vec<RdPoint>> = thread_pool()?.install(|| {
        paths
            .par_iter()
            .map(|path| {
                let img = read_ppm(path)?;
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                std::iter::once(None)
                    .chain(prompts.iter().map(Some))
                    .map(|p| {
                        let bytes = codec.compress(&img, p)?.to_bytes();
                        let c = Container::parse(&bytes, Some(codec.model_id()))?;
                        let decoded = codec.decompress(&c, p)?;
                        Ok(RdPoint {
                            image: name.clone(),
                            lambda_id: c.lambda_id,
                            bpp: c.bpp(),
                            psnr: psnr(&img, &decoded)?,
                            msssim: ms_ssim(&img, &decoded)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = format!("{}\n", RdPoint::CSV_HEADER);
    for p in rows.iter().flatten() {
        csv.push_str(&p.csv_row());
        csv.push('\n');
    }
    write_atomic(out, csv.as_bytes())?;
    println!("rows={}", rows.iter().map(Vec::len).sum::<usize>());
    Ok(())
}

fn read_points(path: &Path) -> Result<Vec<RdPoint>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == RdPoint::CSV_HEADER => {}
        _ => {
            return Err(Error::Format(format!(
                "{}: missing rd_points header",
                path.display()
            )))
        }
    }
    lines.map(RdPoint::parse_row).collect()
}

fn bdrate(test: &Path, anchor: &Path, metric: Metric) -> Result<()> {
    let quality = match metric {
        Metric::Psnr => Quality::Psnr,
        Metric::Msssim => Quality::MsSsim,
    };
    let t = RdCurve::from_points(&read_points(test)?, quality);
    let a = RdCurve::from_points(&read_points(anchor)?, quality);
    println!("{:.4}", bd_rate(&t, &a)?);
    Ok(())
}

fn maps(run: &RunConfig, input: &Path, promptset: Option<u8>, out_dir: &Path) -> Result<()> {
    let codec = load_codec(run)?;
    let prompt = promptset.map(|id| load_promptset(run, id)).transpose()?;
    let img = read_ppm(input)?;
    let rec = codec.reconstruct(&img, prompt.as_ref())?;
    std::fs::create_dir_all(out_dir)?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let pad = run.model.pad_multiple;
    let tag = promptset.map_or("bare".to_string(), |id| format!("l{id}"));
    let write = |kind: &str, map: &Tensor<f64>| -> Result<()> {
        let padded = img.width.div_ceil(pad) * pad;
        let factor = (padded / map.shape()[1]).max(1);
        let full = upsample_nearest(map, factor, img.width, img.height)?;
        let base = out_dir.join(format!("{stem}_{tag}_{kind}"));
        write_pgm(
            &base.with_extension("pgm"),
            img.width,
            img.height,
            &to_gray8(&full),
        )?;
        write_atomic(&base.with_extension("csv"), map_csv(map).as_bytes())
    };
    let bits = bit_allocation_map(&rec.y_element_bits)?;
    write("bits", &bits)?;
    if let Some(att) = &rec.attention {
        write("attention", att)?;
    }
    let mean = bits.data().iter().sum::<f64>() / bits.numel() as f64;
    println!("mean_bits_per_element={mean:.6}");
    Ok(())
}

fn params(run: &RunConfig, paper_scale: bool) -> Result<()> {
    let cfg = if paper_scale {
        lpmc::config::ModelConfig::paper_scale()
    } else {
        run.model.clone()
    };
    let backbone = lpmc::backbone::init_backbone::<f32>(&cfg, 0)?;
    let ps = PromptSet::init(
        &cfg,
        0,
        run.train.lambdas.first().copied().unwrap_or(1.0),
        0,
    )?;
    print!("{}", ParamReport::new(&backbone, &[&ps]));
    Ok(())
}
