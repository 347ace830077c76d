use std::path::{Path, PathBuf};

use gem_core::eigenmodel::{
    distill, serialized_size, CoefficientVector, ColorSource, DistillReport, GemModel, Modality, TexelLayout,
};
use gem_core::fit::fit_coefficients;
use gem_core::io::{load_coefficients, load_features, load_ply, save_coefficients};
use gem_core::metrics::{psnr, MetricReport};
use gem_core::refine::{refine_bases, write_history_csv, Checkpoint, RefineConfig, View};
use gem_core::regressor::{evaluate_mse, train, FeaturePca, PairManifest, RegressorModel};
use gem_core::synth::{render_ground_truth, write_dataset, Dataset};
use gem_core::{Camera, GaussianCloud, ImageBuffer};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::config::{self, echo, RunConfig};
use crate::media::{default_camera, load_coefficients_json, load_image, render_model, save_coefficients_json, save_image};
use crate::{data, require, require_dir, serve, usage, CliResult};

pub fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(path) = &cli.config {
        require(path)?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(a, cfg),
        Command::Distill(a) => cmd_distill(a, cfg),
        Command::Refine(a) => refine(a, cfg),
        Command::Fit(a) => fit(a, cfg),
        Command::Render(a) => render(a, cfg),
        Command::Traverse(a) => traverse(a, cfg),
        Command::RegressTrain(a) => regress_train(a, cfg),
        Command::RegressApply(a) => regress_apply(a),
        Command::Metrics(a) => metrics(a),
        Command::Info(a) => info(a),
        Command::Serve(a) => serve::run(a, cfg),
    }
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn write_json(value: &impl Serialize, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| data(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_model(path: &Path) -> CliResult<GemModel> {
    require(path)?;
    Ok(GemModel::load(path)?)
}

fn background(flag: Option<&[f64]>, fallback: [f64; 3]) -> CliResult<[f64; 3]> {
    flag.map(config::background).unwrap_or(Ok(fallback))
}

fn synth(a: SynthArgs, cfg: RunConfig) -> CliResult<()> {
    let mut spec = cfg.synth;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { spec.$field = v; })*};
    }
    set!(seed => seed, frames => frame_count, cameras => camera_count, tex_resolution => tex_resolution,
        image_size => image_size, feature_dim => feature_dim, feature_noise => feature_noise,
        position_noise => position_noise);
    if let Some(c) = &a.components {
        spec.components = config::components(c)?;
    }
    echo("synth", &json!({ "out": a.out, "spec": spec }));
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let (_, summary) = write_dataset(&spec, &a.out)?;
    print_json(&summary)
}

/// PLY frames sorted by file name, from `dir/clouds` when present.
fn frame_files(input: &Path) -> CliResult<Vec<PathBuf>> {
    require_dir(input)?;
    let dir = if input.join("clouds").is_dir() {
        input.join("clouds")
    } else {
        input.to_path_buf()
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(data(format!("no .ply frames in {}", dir.display())));
    }
    Ok(files)
}

fn cameras_in(root: &Path) -> CliResult<Vec<Camera>> {
    let dir = root.join("cams");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    files.iter().map(|p| Ok(Camera::load(p)?)).collect()
}

fn load_layout(path: &Path) -> CliResult<TexelLayout> {
    let text = std::fs::read_to_string(path)?;
    let layout: TexelLayout = serde_json::from_str(&text).map_err(|e| data(format!("{}: {e}", path.display())))?;
    layout.validate()?;
    Ok(layout)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SweepRow {
    components: usize,
    psnr: f64,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct DistillOutput {
    model: PathBuf,
    bytes: usize,
    report: DistillReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    sweep: Vec<SweepRow>,
}

/// Mean PSNR of the model's reconstruction of every frame against renders
/// of the frames themselves.
fn reconstruction_psnr(model: &GemModel, clouds: &[GaussianCloud], gt: &[Vec<ImageBuffer>], cams: &[Camera]) -> CliResult<f64> {
    let recon: Vec<GaussianCloud> = clouds
        .par_iter()
        .map(|c| model.evaluate(&model.project(c)?))
        .collect::<gem_core::Result<_>>()?;
    let imgs = render_ground_truth(&recon, cams, Vector3::zeros(), &Default::default())?;
    let scores: Vec<f64> = imgs
        .iter()
        .flatten()
        .zip(gt.iter().flatten())
        .map(|(a, b)| psnr(a, b))
        .collect::<gem_core::Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn cmd_distill(a: DistillArgs, cfg: RunConfig) -> CliResult<()> {
    let mut dc = cfg.distill;
    if let Some(c) = &a.components {
        dc.components = config::components(c)?;
    }
    if let Some(f) = a.color_frame {
        dc.color_source = ColorSource::Frame(f);
    }
    let files = frame_files(&a.input)?;
    let layout_path = a.layout.clone().or_else(|| Some(a.input.join("layout.json")).filter(|p| p.exists()));
    echo(
        "distill",
        &json!({ "input": a.input, "out": a.out, "layout": layout_path, "frames": files.len(), "sweep": a.sweep, "distill": dc }),
    );
    let clouds: Vec<GaussianCloud> = files.par_iter().map(|p| load_ply(p)).collect::<gem_core::Result<_>>()?;
    let layout = match &layout_path {
        Some(p) => load_layout(require(p)?)?,
        None => {
            log::warn!("no texel layout given; treating the {} Gaussians as a {}x1 map", clouds[0].len(), clouds[0].len());
            TexelLayout::full(clouds[0].len(), 1)
        }
    };
    let (model, report) = distill(&clouds, &layout, dc.components, dc.color_source)?;
    for m in &report.modalities {
        log::info!(
            "{}: {} of {} components fitted, leading stddev {:.4e}",
            m.modality,
            m.fitted,
            m.requested,
            m.stddev.first().copied().unwrap_or(0.0)
        );
    }
    model.save(&a.out)?;

    let mut sweep = Vec::new();
    if let Some(counts) = &a.sweep {
        let cams = cameras_in(&a.input)?;
        if cams.is_empty() {
            return Err(usage(format!("--sweep needs camera files in {}", a.input.join("cams").display())));
        }
        let gt = render_ground_truth(&clouds, &cams, Vector3::zeros(), &Default::default())?;
        for &m in counts {
            let (swept, _) = distill(&clouds, &layout, [m; 4], dc.color_source)?;
            let p = reconstruction_psnr(&swept, &clouds, &gt, &cams)?;
            log::info!("M = {m}: reconstruction PSNR {p:.2} dB");
            sweep.push(SweepRow { components: m, psnr: p });
        }
    }
    let t = layout.texel_count();
    let out = DistillOutput {
        model: a.out.clone(),
        bytes: serialized_size(layout.tex_width, layout.tex_height, t, model.component_counts()),
        report,
        sweep,
    };
    if let Some(p) = &a.report {
        write_json(&out, p)?;
    }
    print_json(&out)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct RefineSidecar<'a> {
    model: &'a Path,
    dataset: &'a Path,
    frames: &'a [usize],
    config: &'a RefineConfig,
    initial_psnr: f64,
    final_psnr: f64,
    checkpoints: &'a [Checkpoint],
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    out.with_file_name(name)
}

fn refine(a: RefineArgs, cfg: RunConfig) -> CliResult<()> {
    let mut rc = cfg.refine;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { rc.$field = v; })*};
    }
    set!(steps => steps, step_size => step_size, orthogonalize_every => orthogonalize_every, batch => batch, seed => seed);
    rc.validate().map_err(|e| usage(e.to_string()))?;
    let model = load_model(&a.model)?;
    let ds = Dataset::open(require_dir(&a.dataset)?)?;
    let frames: Vec<usize> = a.frames.clone().unwrap_or_else(|| (0..ds.spec.frame_count).collect());
    echo(
        "refine",
        &json!({ "model": a.model, "dataset": a.dataset, "out": a.out, "frames": frames, "coeffs": a.coeffs, "refine": rc }),
    );
    if let Some(&bad) = frames.iter().find(|&&f| f >= ds.spec.frame_count) {
        return Err(usage(format!("frame {bad} out of range (dataset has {})", ds.spec.frame_count)));
    }
    let coefficients: Vec<CoefficientVector> = match &a.coeffs {
        Some(p) => load_coefficients(require(p)?)?.0,
        None => {
            let mut ks = vec![model.zero_coefficients(); ds.spec.frame_count];
            let projected: Vec<(usize, CoefficientVector)> = frames
                .par_iter()
                .map(|&f| Ok((f, model.project(&load_ply(&ds.cloud_path(f))?)?)))
                .collect::<gem_core::Result<_>>()?;
            for (f, k) in projected {
                ks[f] = k;
            }
            ks
        }
    };
    let set = ds.training_set(&frames, &coefficients)?;
    let out = refine_bases(&model, &set, &rc, None)?;
    out.model.save(&a.out)?;
    if let Some(p) = &a.history {
        let file = std::fs::File::create(p)?;
        write_history_csv(&out.history, std::io::BufWriter::new(file))?;
    }
    if let Some(p) = &a.coeffs_out {
        save_coefficients(&out.coefficients, out.model.component_counts(), p)?;
    }
    let sidecar = RefineSidecar {
        model: &a.out,
        dataset: &a.dataset,
        frames: &frames,
        config: &rc,
        initial_psnr: out.initial_psnr,
        final_psnr: out.final_psnr(),
        checkpoints: &out.checkpoints,
    };
    write_json(&sidecar, &sidecar_path(&a.out))?;
    log::info!("training PSNR {:.3} dB -> {:.3} dB", out.initial_psnr, out.final_psnr());
    print_json(&sidecar)
}

fn fit(a: FitArgs, cfg: RunConfig) -> CliResult<()> {
    let mut fc = cfg.fit;
    if let Some(v) = a.steps {
        fc.steps = v;
    }
    if let Some(v) = a.step_size {
        fc.step_size = v;
    }
    fc.validate().map_err(|e| usage(e.to_string()))?;
    let model = load_model(&a.model)?;
    let (views, fallback_bg) = match (&a.dataset, &a.cams, &a.images) {
        (Some(dir), _, _) => {
            let ds = Dataset::open(require_dir(dir)?)?;
            let frame = a.frame.ok_or_else(|| usage("--dataset needs --frame"))?;
            if frame >= ds.spec.frame_count {
                return Err(usage(format!("frame {frame} out of range (dataset has {})", ds.spec.frame_count)));
            }
            let views = ds
                .cameras()?
                .into_iter()
                .enumerate()
                .map(|(c, cam)| Ok(View::new(cam, ImageBuffer::load(&ds.image_path(frame, c))?)?))
                .collect::<CliResult<Vec<_>>>()?;
            (views, ds.spec.background)
        }
        (None, Some(cams), Some(images)) => {
            if cams.len() != images.len() {
                return Err(usage(format!("{} cameras but {} images", cams.len(), images.len())));
            }
            let views = cams
                .iter()
                .zip(images)
                .map(|(c, i)| Ok(View::new(Camera::load(require(c)?)?, load_image(i)?)?))
                .collect::<CliResult<Vec<_>>>()?;
            (views, cfg.view.background)
        }
        _ => return Err(usage("give --dataset with --frame, or --cams with --images")),
    };
    let bg = background(a.background.as_deref(), fallback_bg)?;
    let init = match &a.init {
        Some(p) => load_coefficients_json(p, &model)?,
        None => model.zero_coefficients(),
    };
    echo(
        "fit",
        &json!({ "model": a.model, "dataset": a.dataset, "frame": a.frame, "cams": a.cams, "images": a.images,
                 "init": a.init, "out": a.out, "background": bg, "fit": fc }),
    );
    let out = fit_coefficients(&model, &views, Vector3::from(bg), &init, &fc, None)?;
    save_coefficients_json(&out.coefficients, &a.out)?;
    let (first, last) = (out.history.first(), out.history.last());
    print_json(&json!({
        "out": a.out,
        "steps": out.history.len(),
        "initialLoss": first.map(|r| r.total),
        "finalLoss": last.map(|r| r.total),
        "finalPsnr": last.map(|r| r.psnr),
    }))
}

fn camera_for(model: &GemModel, cam: Option<&Path>, size: usize) -> CliResult<Camera> {
    match cam {
        Some(p) => Ok(Camera::load(require(p)?)?),
        None => default_camera(model, size),
    }
}

fn render(a: RenderArgs, cfg: RunConfig) -> CliResult<()> {
    let mut view = cfg.view;
    if let Some(s) = a.size {
        view.image_size = s;
    }
    view.background = background(a.background.as_deref(), view.background)?;
    echo("render", &json!({ "model": a.model, "cam": a.cam, "k": a.k, "coeffs": a.coeffs, "frame": a.frame, "out": a.out, "view": view }));
    crate::media::ImageKind::from_path(&a.out)?;
    let model = load_model(&a.model)?;
    let k = match (&a.k, &a.coeffs) {
        (Some(p), _) => load_coefficients_json(p, &model)?,
        (None, Some(p)) => {
            let (table, _) = load_coefficients(require(p)?)?;
            let f = a.frame.unwrap_or(0);
            let k = table.get(f).cloned().ok_or_else(|| usage(format!("frame {f} out of range ({} frames)", table.len())))?;
            model.check_coefficients(&k)?;
            k
        }
        (None, None) => model.zero_coefficients(),
    };
    let cam = camera_for(&model, a.cam.as_deref(), view.image_size)?;
    let img = render_model(&model, &k, &cam, Vector3::from(view.background), &view.render)?;
    save_image(&img, &a.out)
}

/// Coefficients along one component at `steps` evenly spaced points of
/// `[-3 sigma, 3 sigma]`; a single step is the mean.
pub fn traversal(model: &GemModel, modality: Modality, component: usize, steps: usize) -> CliResult<Vec<CoefficientVector>> {
    let basis = model.basis(modality);
    if component >= basis.component_count() {
        return Err(usage(format!("{modality} has {} components, asked for {component}", basis.component_count())));
    }
    if steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let sd = basis.stddev[component];
    Ok((0..steps)
        .map(|i| {
            let s = if steps == 1 {
                0.0
            } else {
                -3.0 + 6.0 * i as f64 / (steps - 1) as f64
            };
            let mut k = model.zero_coefficients();
            k.get_mut(modality)[component] = s * sd;
            k
        })
        .collect())
}

fn traverse(a: TraverseArgs, cfg: RunConfig) -> CliResult<()> {
    let mut view = cfg.view;
    if let Some(s) = a.size {
        view.image_size = s;
    }
    view.background = background(a.background.as_deref(), view.background)?;
    let modality = Modality::parse(&a.modality).map_err(|e| usage(e.to_string()))?;
    echo(
        "traverse",
        &json!({ "model": a.model, "modality": modality, "component": a.component, "steps": a.steps, "cam": a.cam, "out": a.out, "view": view }),
    );
    crate::media::ImageKind::from_path(&a.out)?;
    let model = load_model(&a.model)?;
    let cam = camera_for(&model, a.cam.as_deref(), view.image_size)?;
    let ks = traversal(&model, modality, a.component, a.steps)?;
    let imgs = ks
        .par_iter()
        .map(|k| render_model(&model, k, &cam, Vector3::from(view.background), &view.render))
        .collect::<CliResult<Vec<_>>>()?;
    save_image(&ImageBuffer::hstack(&imgs)?, &a.out)
}

fn regress_train(a: RegressTrainArgs, cfg: RunConfig) -> CliResult<()> {
    let mut rc = cfg.regress;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag.clone() { rc.$field = v; })*};
    }
    set!(steps => steps, learning_rate => learning_rate, hidden => hidden, batch => batch, seed => seed);
    echo("regress-train", &json!({ "pairs": a.pairs, "model": a.model, "out": a.out, "regress": rc }));
    let model = load_model(&a.model)?;
    let manifest = PairManifest::load(require(&a.pairs)?)?;
    let base = a.pairs.parent().unwrap_or(Path::new("."));
    let (all, paired, targets) = manifest.resolve(base)?;
    let pca = FeaturePca::build(&all, manifest.neutral)?;
    if pca.rank_truncated {
        log::warn!("feature PCA kept {} components", pca.retained());
    }
    let retained = pca.retained();
    let out = train(pca, &model.stddevs_flat(), model.component_counts(), &paired, &targets, &rc)?;
    out.model.save(&a.out)?;
    let mse = evaluate_mse(&out.model, &paired, &targets)?;
    print_json(&json!({
        "out": a.out,
        "pairs": targets.len(),
        "retainedComponents": retained,
        "clampedTargets": out.clamped_targets,
        "finalLoss": out.losses.last(),
        "trainMse": mse,
    }))
}

fn regress_apply(a: RegressApplyArgs) -> CliResult<()> {
    echo("regress-apply", &json!({ "regressor": a.regressor, "features": a.features, "rows": a.rows, "out": a.out }));
    let reg = RegressorModel::load(require(&a.regressor)?)?;
    let features = load_features(require(&a.features)?)?;
    let rows: Vec<usize> = a.rows.clone().unwrap_or_else(|| (0..features.nrows()).collect());
    if let Some(&bad) = rows.iter().find(|&&r| r >= features.nrows()) {
        return Err(usage(format!("row {bad} out of range ({} rows)", features.nrows())));
    }
    let ks = rows
        .iter()
        .map(|&r| Ok(reg.regress(&features.row(r).transpose())?))
        .collect::<CliResult<Vec<_>>>()?;
    save_coefficients(&ks, reg.counts, &a.out)?;
    if a.json {
        let list: Vec<_> = ks.iter().map(crate::media::CoefficientJson::from_vector).collect();
        print_json(&list)?;
    }
    Ok(())
}

fn metrics(a: MetricsArgs) -> CliResult<()> {
    let (x, y) = (load_image(&a.a)?, load_image(&a.b)?);
    let report = MetricReport::compute(&x, &y)?;
    if a.json {
        print_json(&report)
    } else {
        println!("psnr {:.4} dB\nssim {:.6}\nl1   {:.6}", report.psnr, report.ssim, report.l1);
        Ok(())
    }
}

/// The document served at `/meta` and printed by `info --json`.
pub fn model_meta(model: &GemModel, means: bool) -> serde_json::Value {
    let layout = model.layout();
    let per = |f: &dyn Fn(Modality) -> serde_json::Value| {
        serde_json::Value::Object(Modality::ALL.iter().map(|&m| (m.name().to_string(), f(m))).collect())
    };
    let mut v = json!({
        "texWidth": layout.tex_width,
        "texHeight": layout.tex_height,
        "T": model.texel_count(),
        "M": per(&|m| json!(model.basis(m).component_count())),
        "stddevs": per(&|m| json!(model.basis(m).stddev.as_slice())),
    });
    if means {
        v["means"] = per(&|m| json!(model.basis(m).mean.as_slice()));
    }
    v
}

fn info(a: InfoArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let bytes = std::fs::metadata(&a.model)?.len();
    if a.json {
        let mut v = model_meta(&model, a.means);
        v["bytes"] = json!(bytes);
        v["orthonormalityError"] = json!(model.orthonormality_error());
        return print_json(&v);
    }
    let layout = model.layout();
    println!("{}", a.model.display());
    println!("  texel map   {}x{}, {} active", layout.tex_width, layout.tex_height, model.texel_count());
    println!("  file size   {bytes} bytes");
    println!("  orthonormality error {:.3e}", model.orthonormality_error());
    for m in Modality::ALL {
        let b = model.basis(m);
        let sd: Vec<String> = b.stddev.iter().take(5).map(|s| format!("{s:.4e}")).collect();
        let more = if b.component_count() > 5 { ", ..." } else { "" };
        println!("  {:<9} M = {:<3} stddev [{}{more}]", m.name(), b.component_count(), sd.join(", "));
    }
    Ok(())
}
