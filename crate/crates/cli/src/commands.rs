use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ldcformer::attention::CamTarget;
use ldcformer::data::{derive_seed, gen_synthetic, load_dataset, write_gray_png, write_png, Pool, Sample};
use ldcformer::diffcore::Tensor;
use ldcformer::gradsuite::run_all;
use ldcformer::metrics::{evaluate_fold, score_samples, write_scores, ProtocolResult};
use ldcformer::selfchallenge::{challenge_pair, PairInput};
use ldcformer::train::{fit, load_checkpoint, save_checkpoint, TrainState};
use ldcformer::{Error, Exec};
use log::info;

use crate::config::{RunConfig, EFFECTIVE_CONFIG};
use crate::{EvalArgs, ExportArgs, GenDataArgs, GradCheckArgs, MixPreviewArgs, Overrides, TrainArgs};

const PREVIEW_TAG: u64 = 0x9e1e;

pub fn gen_data(a: GenDataArgs, exec: Exec) -> Result<ExitCode, Error> {
    let m = gen_synthetic(&a.out, a.seed, &a.domains, a.n_per_class, a.size, exec)?;
    println!("wrote {} images to {}", m.records.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Config file (or defaults) with command-line overrides applied.
fn base_config(o: &Overrides, fallback: Option<&Path>) -> Result<RunConfig, Error> {
    let mut c = match (&o.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    if let Some(d) = &o.data {
        c.data.manifest = Some(d.clone());
    }
    if let Some(s) = o.seed {
        c.train.seed = s;
    }
    if let Some(p) = &o.protocol {
        c.protocol.spec = p.clone();
    }
    if let Some(f) = o.test_fraction {
        c.protocol.test_fraction = f;
    }
    if let Some(t) = &o.threshold {
        c.protocol.threshold = t.clone();
    }
    Ok(c)
}

fn load_data(c: &RunConfig, exec: Exec) -> Result<Vec<Sample>, Error> {
    let manifest = c
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Usage("no dataset: pass --data or set data.manifest".into()))?;
    let samples = load_dataset(manifest, exec)?;
    let side = c.train.model.height;
    if let Some(s) = samples.iter().find(|s| s.image.shape() != [c.train.model.channels, side, side]) {
        return Err(Error::Config(format!(
            "{} has shape {:?}, model expects [{}, {side}, {side}]",
            s.id,
            s.image.shape(),
            c.train.model.channels
        )));
    }
    Ok(samples)
}

pub fn train(a: TrainArgs, exec: Exec) -> Result<ExitCode, Error> {
    let mut c = base_config(&a.common, None)?;
    let t = &mut c.train;
    if let Some(v) = a.steps {
        t.steps = v;
        t.epochs = None;
    }
    if a.epochs.is_some() {
        t.epochs = a.epochs;
    }
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut t.lr_main, a.lr_main);
    set(&mut t.lr_aux, a.lr_aux);
    set(&mut t.beta, a.beta);
    set(&mut t.gamma, a.gamma);
    set(&mut t.delta, a.delta);
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if a.no_mix {
        t.mix = false;
    }
    if a.liveness_only {
        *t = t.liveness_only();
    }
    c.validate()?;

    let samples = load_data(&c, exec)?;
    let selection = c.protocol.selection(c.train.seed)?;
    let (train_idx, _) = selection.indices(&samples)?;
    let mut state = match &a.resume {
        Some(p) => {
            let mut s = load_checkpoint(p)?;
            let mut want = c.train.clone();
            want.steps = s.config.steps;
            want.epochs = s.config.epochs;
            if want != s.config {
                return Err(Error::Config(format!(
                    "{} was trained with a different configuration; only steps and epochs may change on resume",
                    p.display()
                )));
            }
            s.config = c.train.clone();
            s
        }
        None => TrainState::new(c.train.clone())?,
    };
    c.write_effective(&a.out)?;
    let total = c.train.total_steps(train_idx.len());
    info!(
        "training on {} samples ({}), steps {}..{total}",
        train_idx.len(),
        selection.name(),
        state.step
    );
    let log_path = a.out.join("train_log.jsonl");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .map_err(Error::io(&log_path))?;
    let mut log = BufWriter::new(log_file);
    let every = if a.checkpoint_every == 0 { u64::MAX } else { a.checkpoint_every };
    let mut last = None;
    while state.step < total {
        let until = (state.step / every).saturating_add(1).saturating_mul(every).min(total);
        let run = fit(&mut state, &samples, &train_idx, until, Some(&mut log))?;
        last = run.last().copied().or(last);
        if state.step % every == 0 && state.step < total {
            save_checkpoint(&state, &a.out.join(format!("step_{:06}.ckpt", state.step)))?;
        }
    }
    log.flush().map_err(Error::io(&log_path))?;
    let ckpt = a.out.join("last.ckpt");
    save_checkpoint(&state, &ckpt)?;
    match last {
        Some(b) => println!(
            "step {}: total {:.4} (liveness {:.4}); checkpoint {}",
            state.step,
            b.total,
            b.liveness,
            ckpt.display()
        ),
        None => println!("nothing to do at step {}; checkpoint {}", state.step, ckpt.display()),
    }
    Ok(ExitCode::SUCCESS)
}

/// Run config for a command that reads a checkpoint: the effective config
/// beside it, with the checkpoint's own training section.
fn checkpoint_config(o: &Overrides, ckpt: &Path, state: &TrainState) -> Result<RunConfig, Error> {
    let beside = ckpt.parent().map(|d| d.join(EFFECTIVE_CONFIG));
    let mut c = base_config(o, beside.as_deref())?;
    let seed = c.train.seed;
    c.train = state.config.clone();
    if o.seed.is_some() {
        c.protocol.split_seed.get_or_insert(seed);
    }
    c.validate()?;
    Ok(c)
}

pub fn eval(a: EvalArgs, exec: Exec) -> Result<ExitCode, Error> {
    let state = load_checkpoint(&a.checkpoint)?;
    let c = checkpoint_config(&a.common, &a.checkpoint, &state)?;
    let samples = load_data(&c, exec)?;
    let selection = c.protocol.selection(c.train.seed)?;
    let (_, test) = selection.indices(&samples)?;
    let rule = c.protocol.rule()?;
    let records = score_samples(&state, &samples, &test, c.protocol.score_batch, exec)?;
    let name = selection.name();
    let fold = evaluate_fold(name.clone(), &records, rule)?;
    let result = ProtocolResult::from_folds(name, rule, vec![fold])?;
    let out = a
        .out
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
    fs::create_dir_all(&out).map_err(Error::io(&out))?;
    write_scores(&out.join("scores.tsv"), &records)?;
    let report = result.report();
    let write = |file: &str, text: String| -> Result<(), Error> {
        let p = out.join(file);
        fs::write(&p, text).map_err(Error::io(&p))
    };
    write("report.txt", report.clone())?;
    let summary = serde_json::json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "step": state.step,
        "samples": records.len(),
        "result": result,
    });
    write("summary.json", format!("{summary:#}\n"))?;
    print!("{report}");
    Ok(ExitCode::SUCCESS)
}

pub fn grad_check(a: GradCheckArgs, exec: Exec) -> Result<ExitCode, Error> {
    let results = run_all(a.filter.as_deref(), a.points, a.seed, a.tolerance, exec)?;
    if results.is_empty() {
        return Err(Error::Usage(format!("no check matches {:?}", a.filter.unwrap_or_default())));
    }
    for r in &results {
        let skipped = if r.skipped > 0 { format!(" ({} at kinks skipped)", r.skipped) } else { String::new() };
        println!(
            "{:<22} {} max rel error {:.3e} over {} coords at {} points{skipped}",
            r.name,
            if r.passed { "ok  " } else { "FAIL" },
            r.max_rel_error,
            r.coords,
            r.points
        );
    }
    if let Some(p) = &a.json {
        let text = serde_json::to_string_pretty(&results).map_err(|e| Error::Usage(e.to_string()))?;
        fs::write(p, text).map_err(Error::io(p))?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed (tolerance {:.0e})", results.len(), a.tolerance);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// Nearest-neighbour upsampling of a `[1,g,g]` map to `[1,s,s]`.
fn upsample(map: &Tensor, side: usize) -> Tensor {
    let g = map.shape()[1];
    Tensor::from_fn(&[1, side, side], |i| {
        let (y, x) = (i / side, i % side);
        map.data()[(y * g / side) * g + x * g / side]
    })
}

pub fn mix_preview(a: MixPreviewArgs, exec: Exec) -> Result<ExitCode, Error> {
    let (state, c) = match &a.checkpoint {
        Some(p) => {
            let s = load_checkpoint(p)?;
            let c = checkpoint_config(&a.common, p, &s)?;
            (s, c)
        }
        None => {
            let c = base_config(&a.common, None)?;
            c.validate()?;
            (TrainState::new(c.train.clone())?, c)
        }
    };
    let samples = load_data(&c, exec)?;
    let all: Vec<usize> = (0..samples.len()).collect();
    let pool = Pool::new(&samples, &all)?;
    let batch_size = (2 * a.pairs).max(2);
    let batch = pool.batch(batch_size, derive_seed(&[c.train.seed, PREVIEW_TAG]))?;
    let side = c.train.model.grid();
    let size = c.train.model.height;
    let store = &state.store;
    let live = state.nets.aux.grad_cam(store, &batch.images, CamTarget::Live, side)?;
    let spoof = state.nets.aux.grad_cam(store, &batch.images, CamTarget::Spoof, side)?;
    let mut written = 0;
    for (k, &(l, s)) in batch.pairs.iter().enumerate().take(a.pairs) {
        let (li, si) = (batch.images.row(l), batch.images.row(s));
        let pair = PairInput {
            live_image: &li,
            spoof_image: &si,
            spoof_attack: batch.attacks[s],
            live_map: &live[l].map,
            spoof_map: &spoof[s].map,
        };
        let seed = derive_seed(&[c.train.seed, PREVIEW_TAG, k as u64]);
        let dir: PathBuf = a.out.join(format!("pair_{k:02}"));
        write_png(&dir.join("live.png"), &li)?;
        write_png(&dir.join("spoof.png"), &si)?;
        write_gray_png(&dir.join("cam_live.png"), &upsample(live[l].map.values(), size))?;
        write_gray_png(&dir.join("cam_spoof.png"), &upsample(spoof[s].map.values(), size))?;
        match challenge_pair(pair, seed, c.train.mix_threshold as f32)? {
            Some(m) => {
                write_png(&dir.join("mixed.png"), &m.image)?;
                write_gray_png(&dir.join("mask.png"), m.mask.values())?;
                write_gray_png(&dir.join("target_live.png"), &upsample(m.live_target.values(), size))?;
                write_gray_png(&dir.join("target_spoof.png"), &upsample(m.spoof_target.values(), size))?;
                println!(
                    "{}: {} + {} ({}, {:?} base, {} masked pixels)",
                    dir.display(),
                    batch_id(&samples, &batch.indices, l),
                    batch_id(&samples, &batch.indices, s),
                    m.attack,
                    m.base,
                    m.mask.count()
                );
                written += 1;
            }
            None => println!("{}: skipped, empty attention or mask", dir.display()),
        }
    }
    println!("{written} mixed samples written to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn batch_id<'a>(samples: &'a [Sample], indices: &[usize], pos: usize) -> &'a str {
    &samples[indices[pos]].id
}

pub fn export_features(a: ExportArgs, exec: Exec) -> Result<ExitCode, Error> {
    let state = load_checkpoint(&a.checkpoint)?;
    let c = checkpoint_config(&a.common, &a.checkpoint, &state)?;
    let samples = load_data(&c, exec)?;
    let chunks: Vec<&[Sample]> = samples.chunks(c.protocol.score_batch).collect();
    let feats = exec.map(&chunks, |chunk| -> Result<Tensor, Error> {
        let imgs = Tensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        state.nets.pooled_features(&state.store, &imgs)
    });
    let mut out = String::new();
    out.push_str(&format!("# sample_id\tdomain\tattack\ty\tpooled features ({})\n", c.train.model.dim));
    for (chunk, f) in chunks.iter().zip(feats) {
        let f = f?;
        let d = f.shape()[1];
        for (i, s) in chunk.iter().enumerate() {
            let row: Vec<String> = f.data()[i * d..(i + 1) * d].iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", s.id, s.domain, s.attack, s.y, row.join("\t")));
        }
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(&a.out, out).map_err(Error::io(&a.out))?;
    println!("{} feature vectors written to {}", samples.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
