use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde_json::json;
use stylize_core::gradcheck::{self, GradCheckSettings};
use stylize_core::resample::{resize_long_edge, scaled_dims};
use stylize_core::transfer::Synthesis;
use stylize_core::vgg::LayerKind;
use stylize_core::{
    merge_parts, split_parts, super_resolve_observed, synthesize_observed,
    synthesize_texture_observed, InitMode, LayerName, PartManifest, PartSide, Preset, TraceEntry,
    WeightStore,
};

use crate::run_io::{
    load_image, report, require_file, resolve, save_png, trace_path, write_trace, Resolved,
};
use crate::{
    FixtureArgs, GradcheckArgs, InspectArgs, PartsMode, PartsRunArgs, SuperresArgs, TextureArgs,
    TransferArgs,
};

fn summary(out: &Path, s: &Synthesis) {
    let line = json!({
        "output": out.display().to_string(),
        "iterations": s.trace.len().saturating_sub(1),
        "initial_loss": s.initial_loss,
        "final_loss": s.final_loss,
        "final_style_loss": s.final_style_loss,
    });
    println!("{line}");
}

fn observer(progress: bool, prefix: String) -> impl Fn(&TraceEntry) {
    move |e| {
        if progress {
            report(&prefix, e)
        }
    }
}

pub fn transfer(a: TransferArgs, progress: bool) -> Result<ExitCode> {
    let mut r = resolve(&a.run, None)?;
    if a.size.is_some() {
        r.cfg.output_size = a.size;
    }
    let content = load_image(&a.content, "content")?;
    let style = load_image(&a.style, "style")?;
    let obs = observer(progress, String::new());
    let out = synthesize_observed(&content, &style, &r.cfg, &r.store, Some(&obs))?;
    save_png(&out.image, &a.out)?;
    let stanza = r.stanza("transfer", &[("content", &a.content), ("style", &a.style)])?;
    write_trace(&trace_path(&a.out), &out.trace, &stanza, a.run.timings)?;
    summary(&a.out, &out);
    Ok(ExitCode::SUCCESS)
}

pub fn texture(a: TextureArgs, progress: bool) -> Result<ExitCode> {
    let mut r = resolve(&a.run, Some(Preset::II))?;
    r.cfg.init = InitMode::Random;
    let style = load_image(&a.style, "style")?;
    if a.size == Some(0) {
        bail!("--size must be positive");
    }
    let (w, h) = match a.size {
        Some(size) => scaled_dims(style.width(), style.height(), size),
        None => style.dimensions(),
    };
    let obs = observer(progress, String::new());
    let out = synthesize_texture_observed(&style, w, h, &r.cfg, &r.store, Some(&obs))?;
    save_png(&out.image, &a.out)?;
    let stanza = r.stanza("texture", &[("style", &a.style)])?;
    write_trace(&trace_path(&a.out), &out.trace, &stanza, a.run.timings)?;
    summary(&a.out, &out);
    Ok(ExitCode::SUCCESS)
}

pub fn superres(a: SuperresArgs, progress: bool) -> Result<ExitCode> {
    let r = resolve(&a.run, None)?;
    let scales = a.schedule.scales();
    let content = resize_long_edge(&load_image(&a.content, "content")?, scales[0]);
    let style = resize_long_edge(&load_image(&a.style, "style")?, scales[scales.len() - 1]);
    let obs = |k: usize, e: &TraceEntry| {
        if progress {
            report(&format!("stage {k}  "), e)
        }
    };
    let sr = super_resolve_observed(&content, &style, &a.schedule, &r.cfg, &r.store, Some(&obs))?;

    let dir = a.out.parent().unwrap_or(Path::new(""));
    let stanza = r.stanza("superres", &[("content", &a.content), ("style", &a.style)])?;
    for (k, stage) in sr.stages.iter().enumerate() {
        let png = dir.join(format!("stage_{k}.png"));
        save_png(&stage.result.image, &png)?;
        let mut s = stanza.clone();
        s.push((
            "stage".into(),
            format!("{k} of {} (size {})", sr.stages.len(), stage.scale),
        ));
        write_trace(&trace_path(&png), &stage.result.trace, &s, a.run.timings)?;
    }
    save_png(&sr.image, &a.out)?;
    let last = &sr.stages[sr.stages.len() - 1].result;
    write_trace(&trace_path(&a.out), &last.trace, &stanza, a.run.timings)?;
    summary(&a.out, last);
    Ok(ExitCode::SUCCESS)
}

pub fn parts(mode: PartsMode, progress: bool) -> Result<ExitCode> {
    match mode {
        PartsMode::Split {
            manifest,
            content,
            style,
            out_dir,
        } => {
            let m = load_manifest(&manifest)?;
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("cannot create {}", out_dir.display()))?;
            let img = load_image(&content, "content")?;
            let mut sides = vec![("content", split_parts(&img, &m, PartSide::Content)?)];
            if let Some(style) = style {
                let img = load_image(&style, "style")?;
                sides.push(("style", split_parts(&img, &m, PartSide::Style)?));
            }
            for (side, crops) in sides {
                for (p, crop) in m.parts.iter().zip(crops) {
                    save_png(&crop, &out_dir.join(format!("{}.{side}.png", p.name)))?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        PartsMode::Merge {
            manifest,
            parts_dir,
            suffix,
            base,
            out,
        } => {
            let m = load_manifest(&manifest)?;
            let base = load_image(&base, "base")?;
            let placed = m
                .parts
                .iter()
                .map(|p| {
                    let path = parts_dir.join(format!("{}.{suffix}", p.name));
                    Ok((
                        load_image(&path, &format!("part `{}`", p.name))?,
                        p.content_rect,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            save_png(&merge_parts(&placed, &m, &base)?, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        PartsMode::Run(a) => parts_run(a, progress),
    }
}

fn load_manifest(path: &Path) -> Result<PartManifest> {
    require_file(path, "manifest")?;
    PartManifest::load(path).with_context(|| format!("invalid manifest {}", path.display()))
}

fn parts_run(a: PartsRunArgs, progress: bool) -> Result<ExitCode> {
    let r = resolve(&a.run, None)?;
    let m = load_manifest(&a.manifest)?;
    let content = load_image(&a.content, "content")?;
    let style = load_image(&a.style, "style")?;
    let contents = split_parts(&content, &m, PartSide::Content)?;
    let styles = split_parts(&style, &m, PartSide::Style)?;

    // Workers pull part indices from a shared counter; results land in their
    // own slots so the output does not depend on scheduling.
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Synthesis>>>> =
        m.parts.iter().map(|_| Mutex::new(None)).collect();
    let work = |r: &Resolved| loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= m.parts.len() {
            break;
        }
        let obs = observer(progress, format!("{}  ", m.parts[i].name));
        let out = synthesize_observed(&contents[i], &styles[i], &r.cfg, &r.store, Some(&obs))
            .with_context(|| format!("part `{}`", m.parts[i].name));
        *slots[i].lock().expect("no panics while held") = Some(out);
    };
    std::thread::scope(|s| {
        for _ in 0..a.jobs.min(m.parts.len() as u32) {
            s.spawn(|| work(&r));
        }
    });

    let mut placed = Vec::new();
    for (p, slot) in m.parts.iter().zip(slots) {
        let out = slot
            .into_inner()
            .expect("no panics while held")
            .expect("every part ran")?;
        if let Some(dir) = &a.parts_dir {
            save_png(&out.image, &dir.join(format!("{}.png", p.name)))?;
        }
        let mut stanza = r.stanza("parts run", &[("content", &a.content), ("style", &a.style)])?;
        stanza.push(("part".into(), p.name.clone()));
        let trace = a.out.with_extension(format!("{}.trace.csv", p.name));
        write_trace(&trace, &out.trace, &stanza, a.run.timings)?;
        placed.push((out.image, p.content_rect));
    }
    let merged = merge_parts(&placed, &m, &content)?;
    save_png(&merged, &a.out)?;
    println!(
        "{}",
        json!({ "output": a.out.display().to_string(), "parts": m.parts.len() })
    );
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut settings = GradCheckSettings {
        seed: a.seed,
        pixels: a.pixels,
        ..Default::default()
    };
    if let Some(step) = a.perturb {
        if !(step > 0.0 && step.is_finite()) {
            bail!("--perturb must be a positive step");
        }
        settings = settings.with_step(step);
    }
    let store = match &a.weights {
        Some(path) => {
            require_file(path, "weights")?;
            Some(
                WeightStore::load(path)
                    .with_context(|| format!("cannot load weights {}", path.display()))?,
            )
        }
        None => None,
    };
    let results = gradcheck::run_all(&settings, store.as_ref())?;
    println!(
        "{:<28} {:>12} {:>7}  result",
        "check", "max rel err", "probes"
    );
    for c in &results {
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        println!(
            "{:<28} {:>12.3e} {:>7}  {verdict}",
            c.name, c.max_rel_err, c.probes
        );
    }
    if results.iter().all(|c| c.passed()) {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "error: gradient check exceeded tolerance {:e}",
            settings.tolerance
        );
        Ok(ExitCode::FAILURE)
    }
}

pub fn inspect(a: InspectArgs) -> Result<ExitCode> {
    require_file(&a.weights, "weights")?;
    let store = WeightStore::load(&a.weights)
        .with_context(|| format!("cannot load weights {}", a.weights.display()))?;
    let meta = store.meta();
    let layers: Vec<_> = LayerName::all()
        .map(|l| {
            let shape = match (l.kind(), store.kernel(l)) {
                (LayerKind::Conv { .. }, Some(k)) => {
                    Some([k.out_channels(), k.in_channels(), 3, 3])
                }
                _ => None,
            };
            (l, shape)
        })
        .collect();

    if a.json {
        let dump = json!({
            "version": store.version(),
            "meta": meta,
            "layers": layers.iter().map(|(l, shape)| json!({
                "name": l.as_str(),
                "kind": if l.is_conv() { "conv" } else { "pool" },
                "weight_shape": shape,
                "channels": l.channels(),
                "feature_scale": l.feature_scale(),
            })).collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string_pretty(&dump)?);
        return Ok(ExitCode::SUCCESS);
    }

    println!("container version {}", store.version());
    println!("channel order     {:?}", meta.channel_order);
    println!("mean              {:?}", meta.mean);
    if let Some(hint) = meta.pooling_hint {
        println!("pooling hint      {hint}");
    }
    println!();
    println!(
        "{:<8} {:<18} {:>8} {:>6}",
        "layer", "weight shape", "channels", "scale"
    );
    for (l, shape) in &layers {
        let shape = match shape {
            Some([o, i, kh, kw]) => format!("{o}x{i}x{kh}x{kw}"),
            None => "-".into(),
        };
        println!(
            "{:<8} {:<18} {:>8} {:>6}",
            l.as_str(),
            shape,
            l.channels(),
            l.feature_scale()
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn fixture(a: FixtureArgs) -> Result<ExitCode> {
    WeightStore::random(a.seed)
        .save(&a.out)
        .with_context(|| format!("cannot write {}", a.out.display()))?;
    Ok(ExitCode::SUCCESS)
}
