use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use hmn_core::data::{
    generate_dataset_jobs, read_records_path, split, synth_episode, write_records_file, RecordHeader, SynthWorld,
};
use hmn_core::eval::{disc_seed, evaluate, pca_2d, run_ablation, train_and_evaluate, write_reports_csv, Variant};
use hmn_core::model::{write_traces, HmnParams, TraceRecord};
use hmn_core::training::{load_checkpoint, objective_grad_check, save_checkpoint, train as fit, write_loss_csv, Discriminator};
use hmn_core::Episode64;

use crate::config::{usage, Settings};
use crate::{Part, SweepParam};

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn variant(name: &str) -> anyhow::Result<Variant> {
    Variant::parse(name).map_err(|e| usage(e.to_string()))
}

fn load_data(s: &mut Settings, path: &Path) -> anyhow::Result<Vec<Episode64>> {
    let (header, episodes) =
        read_records_path::<f64>(path).with_context(|| format!("cannot read records from {}", path.display()))?;
    s.adopt_grid(header.patches, header.dim)?;
    log::info!(
        "{} episodes of {}x{} grids (delta {}) from {}",
        episodes.len(),
        header.patches,
        header.dim,
        header.delta,
        path.display()
    );
    Ok(episodes)
}

fn select(s: &Settings, episodes: Vec<Episode64>, part: Part) -> anyhow::Result<Vec<Episode64>> {
    if part == Part::All {
        return Ok(episodes);
    }
    let parts = split(episodes, s.split, s.split_seed)?;
    Ok(match part {
        Part::Train => parts.train,
        Part::Val => parts.val,
        Part::Test => parts.test,
        Part::All => unreachable!(),
    })
}

fn synth_data(s: &Settings, jobs: usize) -> anyhow::Result<Vec<Episode64>> {
    let world = SynthWorld::new(s.synth.clone(), s.world_seed).map_err(|e| usage(e.to_string()))?;
    Ok(generate_dataset_jobs(&world, s.episodes, s.frames, &s.tamper, s.data_seed, jobs)?)
}

/// Runs `f` over `items` on up to `jobs` threads, keeping the input order.
fn parallel<I: Sync, O: Send>(
    items: &[I],
    jobs: usize,
    f: impl Fn(&I) -> anyhow::Result<O> + Sync,
) -> anyhow::Result<Vec<O>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<anyhow::Result<Vec<O>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

pub fn gen_data(s: &Settings, out: &Path, jobs: usize) -> anyhow::Result<()> {
    let episodes = synth_data(s, jobs)?;
    let header = RecordHeader {
        patches: s.synth.patches,
        dim: s.synth.dim,
        delta: s.synth.delta,
    };
    let n = write_records_file(out, &header, &episodes).with_context(|| format!("cannot write {}", out.display()))?;
    println!("wrote {n} episodes to {}", out.display());
    Ok(())
}

pub fn train(s: &mut Settings, data: &Path, out: &Path, loss_csv: Option<&Path>, name: &str) -> anyhow::Result<()> {
    let v = variant(name)?;
    let episodes = load_data(s, data)?;
    let parts = split(episodes, s.split, s.split_seed)?;
    let model = v.model_config(s.model);
    let cfg = v.train_config(&s.train);
    log::info!("training {} on {} episodes: {}", v.name, parts.train.len(), s.describe());
    let mut params = HmnParams::<f64>::new(model, cfg.seed)?;
    let mut disc = Discriminator::<f64>::new(model.dim, model.width(), model.hidden, disc_seed(cfg.seed))?;
    let trace = fit(&mut params, &mut disc, &parts.train, &cfg)?;
    let extra = vec![
        ("variant".to_string(), v.name.clone()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("steps".to_string(), cfg.steps.to_string()),
    ];
    save_checkpoint(out, &params, &disc, &extra).with_context(|| format!("cannot write {}", out.display()))?;
    if let Some(path) = loss_csv {
        let mut w = create(path)?;
        write_loss_csv(&mut w, &trace)?;
        w.flush()?;
    }
    if let Some(last) = trace.last() {
        println!(
            "trained {} for {} steps; last step d {:.4} adv {:.4} cls {:.4} mse {:.4}",
            v.name,
            trace.len(),
            last.d_loss,
            last.g_adv,
            last.g_cls,
            last.g_mse
        );
    }
    if !parts.val.is_empty() {
        match evaluate(&params, &parts.val, s.threshold) {
            Ok(ev) => println!(
                "validation: frame acc {:.2}% video acc {:.2}% eer {:.2}%",
                ev.report.frame_acc, ev.report.video_acc, ev.report.eer
            ),
            Err(e) => log::warn!("validation skipped: {e}"),
        }
    }
    Ok(())
}

fn load_model(
    s: &mut Settings,
    checkpoint: &Path,
    data: &Path,
    part: Part,
) -> anyhow::Result<(HmnParams<f64>, Vec<Episode64>)> {
    let (params, _, _) =
        load_checkpoint::<f64>(checkpoint).with_context(|| format!("cannot load {}", checkpoint.display()))?;
    let episodes = load_data(s, data)?;
    let c = params.config;
    if (c.patches, c.dim) != (s.model.patches, s.model.dim) {
        anyhow::bail!(
            "checkpoint expects {}x{} grids, data has {}x{}",
            c.patches,
            c.dim,
            s.model.patches,
            s.model.dim
        );
    }
    let episodes = select(s, episodes, part)?;
    Ok((params, episodes))
}

pub fn eval(
    s: &Settings,
    checkpoint: &Path,
    data: &Path,
    part: Part,
    scores: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let mut s = s.clone();
    let (params, episodes) = load_model(&mut s, checkpoint, data, part)?;
    let ev = evaluate(&params, &episodes, s.threshold)?;
    let json = ev.report.to_json()?;
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, format!("{json}\n")).with_context(|| format!("cannot write {}", path.display()))?;
    }
    if let Some(path) = scores {
        let mut w = create(path)?;
        writeln!(w, "episode,frame,label,p_fake")?;
        for (ep, outs) in episodes.iter().zip(&ev.outputs) {
            for (t, o) in outs.iter().enumerate() {
                writeln!(w, "{},{t},{},{}", ep.id, ep.label.class(), o.y_hat[hmn_core::model::FAKE])?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

pub fn ablate(s: &mut Settings, data: &Path, names: &[String], out: Option<&Path>, jobs: usize) -> anyhow::Result<()> {
    let variants = names.iter().map(|n| variant(n)).collect::<anyhow::Result<Vec<_>>>()?;
    let episodes = load_data(s, data)?;
    let parts = split(episodes, s.split, s.split_seed)?;
    let s = &*s;
    let rows = parallel(&variants, jobs, |v| {
        Ok(run_ablation(v, s.model, &s.train, &parts.train, &parts.test, s.threshold)?)
    })?;
    let table: Vec<_> = rows.iter().map(|r| (r.variant.clone(), r.report)).collect();
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, &table)?;
    std::io::stdout().write_all(&buf)?;
    if let Some(path) = out {
        std::fs::write(path, &buf).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

pub fn sweep(
    s: &Settings,
    param: SweepParam,
    values: &[usize],
    name: &str,
    out: Option<&Path>,
    jobs: usize,
) -> anyhow::Result<()> {
    let v = variant(name)?;
    let key = match param {
        SweepParam::MemoryLen => "memory-len",
        SweepParam::Patches => "patches",
        SweepParam::Delta => "delta",
        SweepParam::Episodes => "episodes",
    };
    let mut runs = Vec::with_capacity(values.len());
    for &value in values {
        let mut run = s.clone();
        run.set(key, &value.to_string())?;
        run.validate()?;
        runs.push((value, run));
    }
    let rows = parallel(&runs, jobs, |(value, run)| {
        let episodes = synth_data(run, 1)?;
        let parts = split(episodes, run.split, run.split_seed)?;
        let (_, ev) = train_and_evaluate(
            v.model_config(run.model),
            &v.train_config(&run.train),
            &parts.train,
            &parts.test,
            run.threshold,
        )?;
        log::info!("{key}={value}: frame acc {:.2}%", ev.report.frame_acc);
        Ok((*value, ev.report))
    })?;
    let mut buf = Vec::new();
    writeln!(buf, "{key},frame_acc,video_acc,eer,future_mse")?;
    for (value, r) in rows {
        writeln!(buf, "{value},{},{},{},{}", r.frame_acc, r.video_acc, r.eer, r.future_mse)?;
    }
    std::io::stdout().write_all(&buf)?;
    if let Some(path) = out {
        std::fs::write(path, &buf).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

pub fn grad_check(s: &Settings, eps: f64, frames: usize, tol: f64) -> anyhow::Result<()> {
    if frames == 0 {
        return Err(usage("check-frames must be positive"));
    }
    let model = s.model;
    let mut synth = s.synth.clone();
    synth.delta = synth.delta.min(frames);
    let world = SynthWorld::new(synth.clone(), s.world_seed).map_err(|e| usage(e.to_string()))?;
    let length = frames.max(synth.delta + 1);
    let episode = synth_episode::<f64>(&world, 0, length, Some(s.tamper[0]), s.data_seed)?;
    let mut params = HmnParams::<f64>::new(model, s.train.seed)?;
    let mut disc = Discriminator::<f64>::new(model.dim, model.width(), model.hidden, disc_seed(s.train.seed))?;
    let report = objective_grad_check(&mut params, &mut disc, &episode, frames, eps, s.train.seed)?;
    println!(
        "{}",
        serde_json::json!({
            "max_rel_err": report.max_rel_err,
            "checked": report.checked,
            "worst": report.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")),
        })
    );
    if report.max_rel_err > tol {
        anyhow::bail!("max relative error {:.3e} exceeds {tol:.1e}", report.max_rel_err);
    }
    Ok(())
}

pub fn project(s: &Settings, checkpoint: &Path, data: &Path, part: Part, out: &Path) -> anyhow::Result<()> {
    let mut s = s.clone();
    let (params, episodes) = load_model(&mut s, checkpoint, data, part)?;
    let ev = evaluate(&params, &episodes, s.threshold)?;
    let pca = pca_2d(&ev.r_vectors)?;
    log::info!("variance along the two directions: {:?}", pca.eigenvalues);
    let mut w = create(out)?;
    writeln!(w, "episode,frame,label,x,y")?;
    let mut points = pca.points.iter();
    for ep in &episodes {
        for t in 0..ep.len() {
            let (x, y) = points.next().expect("one point per frame");
            writeln!(w, "{},{t},{},{x},{y}", ep.id, ep.label.class())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn trace(
    s: &Settings,
    checkpoint: &Path,
    data: &Path,
    part: Part,
    episode: Option<u32>,
    out: &Path,
) -> anyhow::Result<()> {
    let mut s = s.clone();
    let (params, episodes) = load_model(&mut s, checkpoint, data, part)?;
    let chosen: Vec<_> = episodes.iter().filter(|e| episode.is_none_or(|id| e.id == id)).collect();
    if chosen.is_empty() {
        anyhow::bail!("no matching episode in the selected split");
    }
    let mut records = Vec::new();
    for ep in chosen {
        let outs = params.run_episode(&ep.frames)?;
        records.extend(outs.iter().enumerate().map(|(t, o)| TraceRecord::from_output(ep.id, t, o)));
    }
    let mut w = create(out)?;
    write_traces(&mut w, &records)?;
    w.flush()?;
    Ok(())
}
