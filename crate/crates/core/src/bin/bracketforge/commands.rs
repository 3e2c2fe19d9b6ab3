use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use bracketforge::consistency::{BracketStack, GuidanceTarget};
use bracketforge::evalharness::{auto_ev0, bracket_consistency_report, export_crops, extract_brackets, CropSpec};
use bracketforge::guidance::{
    lambda_at, sample_brackets_traced, tiled_sample, GuidanceConfig, RunManifest, SamplingPlan, MANIFEST_VERSION,
};
use bracketforge::histogram::{hard_histogram, saturation_target_histogram, HistogramVec, SoftHistogramSpec};
use bracketforge::image::LdrImage;
use bracketforge::merge::io::{bracket_filename, read_brackets, read_pfm, read_png, write_brackets, write_bytes, write_pfm, write_png};
use bracketforge::merge::{merge_stack, tonemap, ToneMapKind};
use bracketforge::radiometry::Crf;
use bracketforge::score::toy::{generate_toy_dataset, train_toy_denoiser_with, ToyModel};
use bracketforge::score::{external_model_adapter, make_schedule, Condition, ScoreModel};
use bracketforge::{Error, Result};

use crate::params::*;
use crate::{Cli, Command, EvalCommand, HistArgs, MergeArgs, ReconstructArgs, SamplingArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<Value> {
    let Cli {
        seed,
        out,
        config,
        serial,
        command,
    } = cli;
    let g = Globals {
        seed,
        out,
        config,
        serial,
    };
    match command {
        Command::Generate(a) => generate(&g, a),
        Command::Reconstruct(a) => reconstruct(&g, a),
        Command::HistGenerate(a) => hist_generate(&g, a),
        Command::Merge(a) => merge(&g, a),
        Command::Eval(e) => eval(&g, e),
        Command::TrainToy(a) => train_toy(&g, a),
    }
}

struct Globals {
    seed: Option<u64>,
    out: Option<PathBuf>,
    config: Option<PathBuf>,
    serial: bool,
}

impl Globals {
    /// Defaults, then the config file, then command-line flags.
    fn load<P: DeserializeOwned + Default>(&self, command: &str) -> Result<RunConfig<P>> {
        let mut cfg = match &self.config {
            None => RunConfig {
                seed: 0,
                serial: false,
                params: P::default(),
            },
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                let mut value: Value =
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                if value.get("manifest_version").is_some() {
                    let m: RunManifest = serde_json::from_value(value)
                        .map_err(|e| Error::Config(format!("{}: not a run manifest: {e}", path.display())))?;
                    if m.manifest_version != MANIFEST_VERSION {
                        return Err(Error::Config(format!("unsupported manifest version {}", m.manifest_version)));
                    }
                    if m.command != command {
                        return Err(Error::Config(format!(
                            "manifest was written by '{}', not '{command}'",
                            m.command
                        )));
                    }
                    value = m.config;
                }
                serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.serial |= self.serial;
        if cfg.serial {
            // a second call only fails if the pool already exists
            let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
        }
        Ok(cfg)
    }

    fn out(&self, what: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config(format!("--out is required ({what})")))
    }
}

fn required<'a>(v: &'a Option<String>, flag: &str) -> Result<&'a str> {
    v.as_deref().ok_or_else(|| Error::Config(format!("{flag} is required")))
}

fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
    if let Some(v) = src {
        *dst = v.clone();
    }
}

fn set_opt<T: Clone>(dst: &mut Option<T>, src: &Option<T>) {
    if src.is_some() {
        *dst = src.clone();
    }
}

fn apply_sampling(a: &SamplingArgs, p: &mut SamplingParams) -> Result<()> {
    set_opt(&mut p.model, &a.model);
    set(&mut p.evs, &a.evs);
    set_opt(&mut p.steps, &a.steps);
    if let Some(m) = &a.lambda_mode {
        p.lambda_mode = parse_name("lambda mode", m)?;
    }
    set_opt(&mut p.lambda0, &a.lambda0);
    if let Some(f) = &a.form {
        p.form = parse_name("guidance form", f)?;
    }
    set(&mut p.crf, &a.crf);
    set_opt(&mut p.prompt, &a.prompt);
    set(&mut p.stem, &a.stem);
    set_opt(&mut p.width, &a.width);
    set_opt(&mut p.overlap, &a.overlap);
    set(&mut p.exposure, &a.exposure);
    p.resolve_lambda();
    Ok(())
}

fn parse_crf(s: &str) -> Result<Crf> {
    s.parse()
}

fn guidance_config(p: &SamplingParams, seed: u64, serial: bool, target: GuidanceTarget, fix_ev0: bool) -> Result<GuidanceConfig> {
    let cfg = GuidanceConfig {
        evs: p.evs.clone(),
        steps: p.steps,
        lambda_mode: p.lambda_mode,
        lambda0: p.lambda0.expect("lambda resolved"),
        form: p.form,
        weights: p.weights,
        crf: parse_crf(&p.crf)?,
        seed,
        fix_ev0,
        condition: p.prompt.clone().map(Condition),
        target,
        serial,
    };
    cfg.validate()?;
    p.merge.validate()?;
    if !(p.exposure.is_finite() && p.exposure > 0.0) {
        return Err(Error::Config(format!("preview exposure must be positive, got {}", p.exposure)));
    }
    Ok(cfg)
}

fn load_model(p: &SamplingParams) -> Result<Box<dyn ScoreModel>> {
    external_model_adapter(required(&p.model, "--model")?)
}

fn model_shape(model: &dyn ScoreModel) -> Result<(usize, usize, usize)> {
    model
        .resolution()
        .ok_or_else(|| Error::Capability(format!("{} has no native resolution", model.describe())))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn names(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

/// Reads every output back before the run is reported as a success.
fn validate_outputs(stack: &BracketStack, pngs: &[PathBuf], pfm: &Path) -> Result<()> {
    let shape = stack.shape();
    for p in pngs {
        let img = read_png(p)?;
        if img.shape() != shape {
            return Err(Error::format(p, format!("wrote {:?}, read back {:?}", shape, img.shape())));
        }
    }
    let hdr = read_pfm(pfm)?;
    if hdr.shape() != shape {
        return Err(Error::format(pfm, "merged image has the wrong shape"));
    }
    Ok(())
}

struct SampleJob<P> {
    command: &'static str,
    run: RunConfig<P>,
    cfg: GuidanceConfig,
    /// Bytes to store verbatim as the EV+0 file.
    ev0_bytes: Option<Vec<u8>>,
    extra: serde_json::Map<String, Value>,
}

fn run_sampling<P: Serialize>(g: &Globals, model: &dyn ScoreModel, p: &SamplingParams, job: SampleJob<P>) -> Result<Value> {
    let started = Instant::now();
    let out = g.out("output directory")?;
    let crf = job.cfg.crf;
    let (_, model_w, _) = model_shape(model)?;
    let plan = SamplingPlan::new(model, job.cfg.steps)?;
    let total = plan.len();
    let lambdas: Vec<f64> = (1..=total)
        .rev()
        .map(|t| lambda_at(t, total, job.cfg.lambda_mode, job.cfg.lambda0))
        .collect();
    let stack = match p.width {
        Some(w) if w != model_w => {
            let overlap = p.overlap.unwrap_or(model_w / 4);
            tiled_sample(model, &job.cfg, w, model_w, overlap)?
        }
        _ => sample_brackets_traced(model, &job.cfg)?.stack,
    };

    create_dir(out)?;
    let mut pngs = write_brackets(out, &p.stem, &stack)?;
    if let Some(bytes) = &job.ev0_bytes {
        write_bytes(&out.join(bracket_filename(&p.stem, 0.0)), bytes)?;
    }
    let hdr = merge_stack(&stack, &crf, &p.merge)?;
    let pfm = out.join(format!("{}.pfm", p.stem));
    write_pfm(&pfm, &hdr)?;
    let preview = out.join(format!("{}_preview.png", p.stem));
    write_png(&preview, &tonemap(&hdr, p.exposure, ToneMapKind::ReinhardGamma, &crf)?)?;
    validate_outputs(&stack, &pngs, &pfm)?;
    pngs.push(preview);
    pngs.push(pfm);

    let consistency = bracket_consistency_report(&stack, &crf).ok();
    let mut manifest = RunManifest::new(job.command, serde_json::to_value(&job.run)?, job.run.seed);
    manifest.model_spec = p.model.clone();
    manifest.model = Some(model.describe());
    manifest.schedule_kind = Some(model.schedule().kind.to_string());
    manifest.schedule_steps = Some(model.schedule().len());
    manifest.sampling_steps = Some(total);
    manifest.lambdas = lambdas;
    manifest.outputs = names(&pngs);
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    let manifest_path = out.join("manifest.json");
    manifest.write(&manifest_path)?;

    let mut report = json!({
        "ok": true,
        "command": job.command,
        "seed": job.run.seed,
        "outputs": names(&pngs),
        "manifest": manifest_path.display().to_string(),
        "shape": stack.shape(),
        "evs": stack.evs(),
        "dynamic_range": hdr.dynamic_range(),
        "consistency": consistency,
        "seconds": manifest.wall_clock_seconds,
    });
    report.as_object_mut().expect("object").extend(job.extra);
    Ok(report)
}

fn generate(g: &Globals, a: SamplingArgs) -> Result<Value> {
    let mut run: RunConfig<GenerateParams> = g.load("generate")?;
    apply_sampling(&a, &mut run.params.sampling)?;
    let p = run.params.sampling.clone();
    let cfg = guidance_config(&p, run.seed, run.serial, GuidanceTarget::None, false)?;
    let model = load_model(&p)?;
    run_sampling(
        g,
        model.as_ref(),
        &p,
        SampleJob {
            command: "generate",
            run,
            cfg,
            ev0_bytes: None,
            extra: Default::default(),
        },
    )
}

fn reconstruct(g: &Globals, a: ReconstructArgs) -> Result<Value> {
    let mut run: RunConfig<ReconstructParams> = g.load("reconstruct")?;
    apply_sampling(&a.sampling, &mut run.params.sampling)?;
    set_opt(&mut run.params.input, &a.input);
    if let Some(m) = &a.on_size_mismatch {
        run.params.on_size_mismatch = parse_name("size mismatch policy", m)?;
    }
    let p = run.params.sampling.clone();
    // placeholder target so the config is checked before any file is read
    guidance_config(&p, run.seed, run.serial, GuidanceTarget::None, false)?;
    let input = PathBuf::from(required(&run.params.input, "--input")?);
    let bytes = std::fs::read(&input).map_err(|e| Error::Io {
        path: input.clone(),
        source: e,
    })?;
    let mut guide = read_png(&input)?;
    let model = load_model(&p)?;
    let (h, w, c) = model_shape(model.as_ref())?;
    if guide.channels() != c {
        return Err(Error::Shape {
            expected: (h, w, c),
            actual: guide.shape(),
        });
    }
    let mut extra = serde_json::Map::new();
    let mut ev0_bytes = Some(bytes);
    let canvas_w = p.width.unwrap_or(w);
    if (guide.height(), guide.width()) != (h, canvas_w) {
        match run.params.on_size_mismatch {
            SizeMismatch::Error => {
                return Err(Error::Shape {
                    expected: (h, canvas_w, c),
                    actual: guide.shape(),
                })
            }
            SizeMismatch::Resize => {
                extra.insert("resized_from".into(), json!(guide.shape()));
                guide = LdrImage::from_clamped(guide.image().resize_bilinear(h, canvas_w)?);
                ev0_bytes = None;
            }
        }
    }
    extra.insert("input".into(), json!(input.display().to_string()));
    let cfg = guidance_config(&p, run.seed, run.serial, GuidanceTarget::Image(guide), true)?;
    run_sampling(
        g,
        model.as_ref(),
        &p,
        SampleJob {
            command: "reconstruct",
            run,
            cfg,
            ev0_bytes,
            extra,
        },
    )
}

fn hist_generate(g: &Globals, a: HistArgs) -> Result<Value> {
    let mut run: RunConfig<HistParams> = g.load("hist-generate")?;
    apply_sampling(&a.sampling, &mut run.params.sampling)?;
    set_opt(&mut run.params.histogram, &a.histogram);
    set_opt(&mut run.params.from_image, &a.from_image);
    set_opt(&mut run.params.saturated_frac, &a.saturated_frac);
    set(&mut run.params.bins, &a.bins);
    set_opt(&mut run.params.bandwidth, &a.bandwidth);
    let hp = run.params.clone();
    let p = hp.sampling.clone();
    guidance_config(&p, run.seed, run.serial, GuidanceTarget::None, false)?;
    let sources = [hp.histogram.is_some(), hp.from_image.is_some(), hp.saturated_frac.is_some()];
    if sources.iter().filter(|s| **s).count() != 1 {
        return Err(Error::Config(
            "give exactly one of --histogram, --from-image, --saturated-frac".into(),
        ));
    }
    let mut spec = SoftHistogramSpec::with_bins(hp.bins);
    if let Some(bw) = hp.bandwidth {
        spec.bandwidth = bw;
    }
    spec.validate()?;
    let model = load_model(&p)?;
    let (_, _, c) = model_shape(model.as_ref())?;
    let target: HistogramVec = if let Some(path) = &hp.histogram {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        HistogramVec::from_json(&text).map_err(|e| Error::format(path, e.to_string()))?
    } else if let Some(path) = &hp.from_image {
        hard_histogram(read_png(Path::new(path))?.image(), hp.bins)?
    } else {
        saturation_target_histogram(hp.saturated_frac.expect("checked"), hp.bins, c)?
    };
    if target.num_channels() != c {
        return Err(Error::Config(format!(
            "target histogram has {} channels, the model produces {c}",
            target.num_channels()
        )));
    }
    if target.channels.iter().any(|row| row.len() != hp.bins) {
        return Err(Error::Config(format!("target histogram must have {} bins per channel", hp.bins)));
    }
    let mut extra = serde_json::Map::new();
    extra.insert("target_histogram".into(), serde_json::to_value(&target)?);
    let cfg = guidance_config(&p, run.seed, run.serial, GuidanceTarget::Histogram { target, spec }, false)?;
    run_sampling(
        g,
        model.as_ref(),
        &p,
        SampleJob {
            command: "hist-generate",
            run,
            cfg,
            ev0_bytes: None,
            extra,
        },
    )
}

fn write_side_manifest<P: Serialize>(command: &str, run: &RunConfig<P>, out: &Path, outputs: Vec<String>, started: Instant) -> Result<PathBuf> {
    let mut m = RunManifest::new(command, serde_json::to_value(run)?, run.seed);
    m.outputs = outputs;
    m.wall_clock_seconds = started.elapsed().as_secs_f64();
    let path = sibling(out, ".manifest.json");
    m.write(&path)?;
    Ok(path)
}

fn merge(g: &Globals, a: MergeArgs) -> Result<Value> {
    let started = Instant::now();
    let mut run: RunConfig<MergeParams> = g.load("merge")?;
    let p = &mut run.params;
    set_opt(&mut p.brackets, &a.brackets);
    set_opt(&mut p.stem, &a.stem);
    set(&mut p.crf, &a.crf);
    if let Some(w) = &a.weight {
        p.weights.kind = parse_weight_kind(w)?;
    }
    set(&mut p.weights.low_cut, &a.low_cut);
    set(&mut p.weights.high_cut, &a.high_cut);
    p.preview |= a.preview;
    set(&mut p.exposure, &a.exposure);
    let crf = parse_crf(&p.crf)?;
    p.weights.validate()?;
    let out = g.out("merged .pfm path")?;
    let stack = read_brackets(Path::new(required(&p.brackets, "--brackets")?), p.stem.as_deref())?;
    let hdr = merge_stack(&stack, &crf, &p.weights)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_pfm(out, &hdr)?;
    if read_pfm(out)?.shape() != hdr.shape() {
        return Err(Error::format(out, "merged image did not read back"));
    }
    let mut outputs = vec![out.display().to_string()];
    if p.preview {
        let prev = out.with_extension("png");
        write_png(&prev, &tonemap(&hdr, p.exposure, ToneMapKind::ReinhardGamma, &crf)?)?;
        outputs.push(prev.display().to_string());
    }
    let manifest = write_side_manifest("merge", &run, out, outputs.clone(), started)?;
    Ok(json!({
        "ok": true,
        "command": "merge",
        "outputs": outputs,
        "manifest": manifest.display().to_string(),
        "evs": stack.evs(),
        "shape": hdr.shape(),
        "dynamic_range": hdr.dynamic_range(),
        "max_radiance": hdr.max(),
    }))
}

fn eval(g: &Globals, e: EvalCommand) -> Result<Value> {
    let started = Instant::now();
    match e {
        EvalCommand::Consistency { brackets, stem, crf } => {
            let mut run: RunConfig<ConsistencyParams> = g.load("eval consistency")?;
            let p = &mut run.params;
            set_opt(&mut p.brackets, &brackets);
            set_opt(&mut p.stem, &stem);
            set(&mut p.crf, &crf);
            let crf = parse_crf(&p.crf)?;
            let stack = read_brackets(Path::new(required(&p.brackets, "--brackets")?), p.stem.as_deref())?;
            let report = bracket_consistency_report(&stack, &crf)?;
            let mut value = json!({
                "ok": true,
                "command": "eval consistency",
                "evs": stack.evs(),
                "overall_db": report.overall_db,
                "pairs": report.pairs,
            });
            if let Some(out) = &g.out {
                std::fs::write(out, serde_json::to_string_pretty(&value)? + "\n").map_err(|e| Error::Io {
                    path: out.clone(),
                    source: e,
                })?;
                let m = write_side_manifest("eval consistency", &run, out, vec![out.display().to_string()], started)?;
                value["manifest"] = json!(m.display().to_string());
            }
            Ok(value)
        }
        EvalCommand::Crops {
            brackets,
            stem,
            count,
            size,
        } => {
            let mut run: RunConfig<CropsParams> = g.load("eval crops")?;
            let p = &mut run.params;
            set_opt(&mut p.brackets, &brackets);
            set_opt(&mut p.stem, &stem);
            set(&mut p.count, &count);
            set(&mut p.size, &size);
            let spec = CropSpec {
                count: p.count,
                size: p.size,
                seed: run.seed,
            };
            let out = g.out("crop directory")?;
            let stack = read_brackets(Path::new(required(&p.brackets, "--brackets")?), p.stem.as_deref())?;
            create_dir(out)?;
            let crop_manifest = export_crops(out, &stack, &spec)?;
            let mut m = RunManifest::new("eval crops", serde_json::to_value(&run)?, run.seed);
            m.outputs = vec![crop_manifest.display().to_string()];
            m.wall_clock_seconds = started.elapsed().as_secs_f64();
            let path = out.join("manifest.json");
            m.write(&path)?;
            Ok(json!({
                "ok": true,
                "command": "eval crops",
                "crop_manifest": crop_manifest.display().to_string(),
                "manifest": path.display().to_string(),
                "count": spec.count,
                "size": spec.size,
                "brackets": stack.len(),
            }))
        }
        EvalCommand::Extract {
            hdr,
            evs,
            crf,
            no_auto_ev0,
            stem,
        } => {
            let mut run: RunConfig<ExtractParams> = g.load("eval extract")?;
            let p = &mut run.params;
            set_opt(&mut p.hdr, &hdr);
            set(&mut p.evs, &evs);
            set(&mut p.crf, &crf);
            set(&mut p.stem, &stem);
            p.auto_ev0 &= !no_auto_ev0;
            let crf = parse_crf(&p.crf)?;
            let out = g.out("bracket directory")?;
            let radiance = read_pfm(Path::new(required(&p.hdr, "--hdr")?))?;
            let shift = if p.auto_ev0 { auto_ev0(&radiance, &crf)? } else { 0.0 };
            let stack = extract_brackets(&radiance.scaled(shift.exp2())?, &p.evs, &crf)?;
            create_dir(out)?;
            let pngs = write_brackets(out, &p.stem, &stack)?;
            let mut m = RunManifest::new("eval extract", serde_json::to_value(&run)?, run.seed);
            m.outputs = names(&pngs);
            m.wall_clock_seconds = started.elapsed().as_secs_f64();
            let path = out.join("manifest.json");
            m.write(&path)?;
            Ok(json!({
                "ok": true,
                "command": "eval extract",
                "ev_shift": shift,
                "outputs": names(&pngs),
                "manifest": path.display().to_string(),
            }))
        }
    }
}

fn train_toy(g: &Globals, a: TrainArgs) -> Result<Value> {
    let started = Instant::now();
    let mut run: RunConfig<TrainParams> = g.load("train-toy")?;
    let seed = run.seed;
    let p = &mut run.params;
    set(&mut p.scenes, &a.scenes);
    set(&mut p.train.epochs, &a.epochs);
    set(&mut p.train.batch_size, &a.batch_size);
    set(&mut p.train.learning_rate, &a.learning_rate);
    set(&mut p.train.hidden, &a.hidden);
    set(&mut p.scene.size, &a.size);
    if let Some(s) = &a.schedule {
        p.schedule = s.parse()?;
    }
    set(&mut p.schedule_steps, &a.schedule_steps);
    p.train.seed = seed;
    p.scene.validate()?;
    let out = g.out("model file")?;
    let schedule = make_schedule(p.schedule_steps, p.schedule)?;
    let data = generate_toy_dataset(&p.scene, p.scenes, seed)?;
    let (mut model, report) = train_toy_denoiser_with(&data, &schedule, &p.train)?;
    model.set_scene(p.scene.clone());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    model.save(out)?;
    let back = ToyModel::load(out)?;
    if back.arch() != model.arch() || back.parameter_count() != model.parameter_count() {
        return Err(Error::format(out, "saved model does not match the trained architecture"));
    }
    let manifest = write_side_manifest("train-toy", &run, out, vec![out.display().to_string()], started)?;
    Ok(json!({
        "ok": true,
        "command": "train-toy",
        "model": out.display().to_string(),
        "manifest": manifest.display().to_string(),
        "report": report,
    }))
}
