use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use mirrorseg::io::{self, read_any_volume};
use mirrorseg::metrics::{MetricReport, METRICS_CSV_HEADER};
use mirrorseg::perception::perceive;
use mirrorseg::phantom::{make_family, make_phantom, random_bump, Phantom, PhantomSpec, Style};
use mirrorseg::pipeline::{derive_seed, run_pipeline, write_manifest, PipelineData};
use mirrorseg::registration::{register, RegConfig, WeakLabels};
use mirrorseg::segmenter::{predict, train_seg, SegConfig, TrainItem, VoxelNet};
use mirrorseg::style::{wist, StyleMixer};
use mirrorseg::volume::{warp, warp_prob, Dims, LabelVolume};

use crate::settings::Settings;
use crate::{
    Cli, Command, ConvertArgs, Global, MetricsArgs, PerceiveArgs, PhantomArgs, PipelineArgs, RegArgs, RegisterArgs,
    SegmentArgs, TrainSegArgs, WistArgs,
};

struct Ctx {
    global: Global,
    settings: Settings,
    master: u64,
}

impl Ctx {
    fn seed(&self, stage: &str) -> u64 {
        derive_seed(self.master, stage, 0)
    }

    fn out(&self, name: &str) -> std::path::PathBuf {
        self.global.out.join(name)
    }

    fn reg_config(&self, args: &RegArgs, stage: &str) -> RegConfig {
        let mut cfg = self.settings.pipeline.reg.clone();
        apply_reg_args(&mut cfg, args);
        cfg.seed = self.seed(stage);
        cfg
    }

    fn manifest(&self, command: &str, body: serde_json::Value) -> Result<()> {
        let mut m = json!({ "command": command, "master_seed": self.master });
        if let (Some(obj), serde_json::Value::Object(extra)) = (m.as_object_mut(), body) {
            obj.extend(extra);
        }
        write_manifest(&self.global.out, &m)?;
        Ok(())
    }
}

fn apply_reg_args(cfg: &mut RegConfig, args: &RegArgs) {
    if let Some(s) = args.steps {
        cfg.steps_per_level = s;
    }
    if let Some(l) = args.levels {
        cfg.pyramid_levels = l;
    }
    if let Some(l) = args.lambda_smo {
        cfg.lambda_smo = l;
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.global.config.as_deref())?;
    let master = cli.global.seed.unwrap_or(settings.pipeline.seed);
    std::fs::create_dir_all(&cli.global.out).with_context(|| format!("creating {}", cli.global.out.display()))?;
    let ctx = Ctx { global: cli.global, settings, master };
    match cli.command {
        Command::Phantom(a) => phantom(&ctx, a),
        Command::Register(a) => register_cmd(&ctx, a),
        Command::Perceive(a) => perceive_cmd(&ctx, a),
        Command::Wist(a) => wist_cmd(&ctx, a),
        Command::TrainSeg(a) => train_seg_cmd(&ctx, a),
        Command::Segment(a) => segment(&ctx, a),
        Command::Metrics(a) => metrics(&ctx, a),
        Command::Pipeline(a) => pipeline(&ctx, a),
        Command::Convert(a) => convert(a),
    }
}

fn write_subject(ctx: &Ctx, name: &str, p: &Phantom) -> Result<()> {
    io::write_volume(ctx.out(&format!("{name}.v3d")), &p.image)?;
    io::write_labels(ctx.out(&format!("{name}_labels.v3d")), &p.labels)?;
    if let Some(f) = &p.field {
        io::write_field(ctx.out(&format!("{name}_field.d3f")), f)?;
    }
    Ok(())
}

fn phantom(ctx: &Ctx, a: PhantomArgs) -> Result<()> {
    if a.family {
        let mut spec = ctx.settings.family.clone();
        if let Some(n) = a.size {
            spec.dims = Dims::cube(n);
        }
        if let Some(s) = a.structures {
            spec.num_structures = s;
        }
        if let Some(d) = a.deformation {
            spec.deformation_amplitude = d;
        }
        if let Some(b) = a.bump {
            spec.bump_amplitude = b;
        }
        if let Some(n) = a.noise {
            spec.noise_sigma = n;
        }
        if let Some(u) = a.unlabeled {
            spec.unlabeled = u;
        }
        if let Some(t) = a.test {
            spec.test = t;
        }
        spec.seed = ctx.seed("family");
        let fam = make_family(&spec)?;
        io::write_volume(ctx.out("atlas.v3d"), &fam.atlas.image)?;
        io::write_labels(ctx.out("atlas_labels.v3d"), &fam.atlas.labels)?;
        for (j, p) in fam.unlabeled.iter().enumerate() {
            write_subject(ctx, &format!("unlabeled_{j}"), p)?;
        }
        for (t, p) in fam.test.iter().enumerate() {
            write_subject(ctx, &format!("test_{t}"), p)?;
        }
        println!("wrote atlas, {} unlabeled and {} test subjects to {}", spec.unlabeled, spec.test, ctx.global.out.display());
        return ctx.manifest("phantom", json!({ "family": spec }));
    }

    let mut spec = ctx.settings.phantom.clone();
    if let Some(n) = a.size {
        spec.dims = Dims::cube(n);
    }
    if let Some(s) = a.structures {
        spec.num_structures = s;
    }
    if let Some(d) = a.deformation {
        spec.deformation_amplitude = d;
    }
    if let Some(n) = a.noise {
        spec.style.noise_sigma = n;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed("phantom-draws"));
    if let Some(b) = a.bump {
        spec.bump = Some(random_bump(spec.dims, b, &mut rng));
    }
    if a.random_style {
        spec.style = Style::random(&mut rng, spec.style.noise_sigma);
    }
    spec.seed = ctx.seed("phantom");
    let atlas_spec = PhantomSpec {
        deformation_amplitude: 0.0,
        bump: None,
        style: Style { noise_sigma: spec.style.noise_sigma, ..Style::default() },
        seed: ctx.seed("phantom-atlas"),
        ..spec.clone()
    };
    let atlas = make_phantom(&atlas_spec)?;
    let subject = make_phantom(&spec)?;
    io::write_volume(ctx.out("atlas.v3d"), &atlas.image)?;
    io::write_labels(ctx.out("atlas_labels.v3d"), &atlas.labels)?;
    write_subject(ctx, "subject", &subject)?;
    println!("wrote atlas and subject ({}x{}x{}) to {}", spec.dims.nx, spec.dims.ny, spec.dims.nz, ctx.global.out.display());
    ctx.manifest("phantom", json!({ "atlas": atlas_spec, "subject": spec }))
}

fn register_cmd(ctx: &Ctx, a: RegisterArgs) -> Result<()> {
    let moving = read_any_volume(&a.moving).with_context(|| format!("reading {}", a.moving.display()))?;
    let fixed = read_any_volume(&a.fixed).with_context(|| format!("reading {}", a.fixed.display()))?;
    let cfg = ctx.reg_config(&a.reg, "register");
    let labels = a.moving_labels.as_ref().map(|p| io::read_labels(p, None)).transpose()?;
    let onehot = labels.as_ref().map(LabelVolume::one_hot);
    let pred = match (&a.fixed_pred, &labels) {
        (Some(p), Some(l)) => Some(io::read_labels(p, Some(l.num_classes()))?.one_hot()),
        _ => None,
    };
    let weak = match (&onehot, &pred) {
        (Some(m), Some(f)) => Some(WeakLabels { moving_labels: m, fixed_pred: f }),
        _ => None,
    };
    let t = Instant::now();
    let result = register(&moving, &fixed, &cfg, weak)?;
    let seconds = t.elapsed().as_secs_f64();
    io::write_field(ctx.out("phi.d3f"), &result.phi)?;
    io::write_volume(ctx.out("warped.v3d"), &warp(&moving, &result.phi)?)?;
    if let Some(p) = &onehot {
        io::write_labels(ctx.out("warped_labels.v3d"), &warp_prob(p, &result.phi)?.argmax())?;
    }
    std::fs::write(ctx.out("trace.csv"), result.trace_csv())?;
    let last = result.loss_trace.last();
    println!(
        "registered in {seconds:.1} s: final loss {:.5}, mean |phi| {:.3} voxels",
        last.map_or(f64::NAN, |r| r.total),
        result.phi.mean_magnitude()
    );
    ctx.manifest(
        "register",
        json!({
            "moving": a.moving, "fixed": a.fixed, "config": cfg, "weak": weak.is_some(),
            "converged": result.converged, "final": last, "seconds": seconds,
        }),
    )
}

fn perceive_cmd(ctx: &Ctx, a: PerceiveArgs) -> Result<()> {
    let atlas = read_any_volume(&a.atlas).with_context(|| format!("reading {}", a.atlas.display()))?;
    let unlabeled = read_any_volume(&a.unlabeled).with_context(|| format!("reading {}", a.unlabeled.display()))?;
    let cfg = ctx.reg_config(&a.reg, "perceive");
    let t = Instant::now();
    let pack = perceive(&atlas, &unlabeled, &cfg, None)?;
    let seconds = t.elapsed().as_secs_f64();
    io::write_field(ctx.out("phi.d3f"), &pack.phi)?;
    io::write_field(ctx.out("phi_prime.d3f"), &pack.phi_prime)?;
    io::write_field(ctx.out("Phi.d3f"), &pack.composite)?;
    io::write_volume(ctx.out("E.v3d"), &pack.error)?;
    io::write_volume(ctx.out("C.v3d"), &pack.confidence)?;
    let summary = pack.summary();
    println!(
        "perceived in {seconds:.1} s: mean E {:.3}, max E {:.3}, sigma {:.3}, mean C {:.3}",
        summary.mean_error, summary.max_error, summary.sigma, summary.mean_confidence
    );
    ctx.manifest(
        "perceive",
        json!({ "atlas": a.atlas, "unlabeled": a.unlabeled, "config": cfg, "summary": summary, "seconds": seconds }),
    )
}

fn wist_cmd(ctx: &Ctx, a: WistArgs) -> Result<()> {
    let warped = read_any_volume(&a.warped_atlas).with_context(|| format!("reading {}", a.warped_atlas.display()))?;
    let unlabeled = read_any_volume(&a.unlabeled).with_context(|| format!("reading {}", a.unlabeled.display()))?;
    let (image, body) = if let Some(beta) = a.beta {
        ensure!((0.0..=1.0).contains(&beta), "--beta must be in [0, 1], got {beta}");
        let image = StyleMixer::new(&warped, &unlabeled)?.ist(beta)?;
        (image, json!({ "mode": "ist", "betas": [beta] }))
    } else {
        let path = a.confidence.as_ref().expect("clap requires --confidence without --beta");
        let confidence = io::read_volume(path).with_context(|| format!("reading {}", path.display()))?;
        let bins = a.n.unwrap_or(ctx.settings.pipeline.bins);
        let seed = ctx.seed("wist");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = wist(&warped, &unlabeled, &confidence, bins, &mut rng)?;
        (out.image, json!({ "mode": "wist", "bins": bins, "seed": seed, "betas": out.betas }))
    };
    io::write_volume(ctx.out("styled.v3d"), &image)?;
    println!("wrote {}", ctx.out("styled.v3d").display());
    let mut body = body;
    body["warped_atlas"] = json!(a.warped_atlas);
    body["unlabeled"] = json!(a.unlabeled);
    ctx.manifest("wist", body)
}

fn train_seg_cmd(ctx: &Ctx, a: TrainSegArgs) -> Result<()> {
    ensure!(a.image.len() == a.labels.len(), "got {} --image but {} --labels", a.image.len(), a.labels.len());
    ensure!(
        a.weighted_image.len() == a.pseudo.len() && a.pseudo.len() == a.confidence.len(),
        "--weighted-image, --pseudo and --confidence must be given the same number of times"
    );
    let labels = a.labels.iter().map(|p| io::read_labels(p, None)).collect::<mirrorseg::Result<Vec<_>>>()?;
    let k = a.classes.unwrap_or_else(|| labels.iter().map(LabelVolume::num_classes).max().unwrap_or(2));
    let mut supervised = Vec::new();
    for (img, lab) in a.image.iter().zip(&labels) {
        ensure!(lab.num_classes() <= k, "labels exceed --classes {k}");
        let lab = LabelVolume::new(lab.dims(), lab.spacing(), k, lab.data().to_vec())?;
        supervised.push(TrainItem { image: read_any_volume(img)?, target: lab.one_hot(), confidence: None });
    }
    let mut weighted = Vec::new();
    for ((img, pseudo), conf) in a.weighted_image.iter().zip(&a.pseudo).zip(&a.confidence) {
        weighted.push(TrainItem {
            image: read_any_volume(img)?,
            target: io::read_labels(pseudo, Some(k))?.one_hot(),
            confidence: Some(io::read_volume(conf)?),
        });
    }
    let mut cfg: SegConfig = ctx.settings.pipeline.seg.clone();
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(h) = a.hidden {
        cfg.hidden = h;
    }
    cfg.lambda = a.lambda.unwrap_or(ctx.settings.pipeline.lambda);
    cfg.seed = ctx.seed("seg");
    let init = VoxelNet::new(k, cfg.hidden, ctx.seed("seg-init"))?;
    let t = Instant::now();
    let (net, trace) = train_seg(&init, &supervised, &weighted, &cfg)?;
    let seconds = t.elapsed().as_secs_f64();
    io::write_net(ctx.out("segmenter.net"), &net)?;
    let mut csv = String::from("epoch,total,dice,cgd\n");
    for r in &trace {
        writeln!(csv, "{},{},{},{}", r.epoch, r.total, r.dice, r.cgd)?;
    }
    std::fs::write(ctx.out("trace.csv"), csv)?;
    let last = trace.last();
    println!("trained {k}-class segmenter in {seconds:.1} s: final loss {:.4}", last.map_or(f64::NAN, |r| r.total));
    ctx.manifest(
        "train-seg",
        json!({
            "images": a.image, "labels": a.labels, "weighted_images": a.weighted_image,
            "pseudo": a.pseudo, "confidence": a.confidence, "classes": k, "config": cfg,
            "final": last, "seconds": seconds,
        }),
    )
}

fn segment(ctx: &Ctx, a: SegmentArgs) -> Result<()> {
    let net = io::read_net(&a.net).with_context(|| format!("reading {}", a.net.display()))?;
    let image = read_any_volume(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let labels = predict(&net, &image).argmax();
    io::write_labels(ctx.out("labels.v3d"), &labels)?;
    println!("wrote {}", ctx.out("labels.v3d").display());
    Ok(())
}

fn case_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn metrics(ctx: &Ctx, a: MetricsArgs) -> Result<()> {
    ensure!(a.pred.len() == a.truth.len(), "got {} --pred but {} --truth", a.pred.len(), a.truth.len());
    let mut csv = format!("{METRICS_CSV_HEADER}\n");
    let mut table = format!("{:<24} {:>5} {:>8} {:>10} {:>10}\n", "case", "class", "dice", "hd_sym_mm", "hd_dir_mm");
    let mut means = Vec::new();
    for (p, t) in a.pred.iter().zip(&a.truth) {
        let pred = io::read_labels(p, None).with_context(|| format!("reading {}", p.display()))?;
        let truth = io::read_labels(t, None).with_context(|| format!("reading {}", t.display()))?;
        let report = MetricReport::evaluate(&pred, &truth)?;
        let case = case_name(p);
        for row in report.csv_rows(&case) {
            csv.push_str(&row);
            csv.push('\n');
        }
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        for c in 0..report.dice.len() {
            writeln!(
                table,
                "{:<24} {:>5} {:>8.4} {:>10} {:>10}",
                case,
                c + 1,
                report.dice[c],
                fmt(report.hd_sym_mm[c]),
                fmt(report.hd_dir_mm[c])
            )?;
        }
        means.push(report.mean_dice);
    }
    if means.is_empty() {
        bail!("no cases given");
    }
    print!("{table}");
    println!("mean dice {:.4}", means.iter().sum::<f64>() / means.len() as f64);
    std::fs::write(ctx.out("metrics.csv"), csv)?;
    Ok(())
}

fn pipeline(ctx: &Ctx, a: PipelineArgs) -> Result<()> {
    let mut cfg = ctx.settings.pipeline.clone();
    if let Some(s) = a.style {
        cfg.style = s;
    }
    if a.no_cgd {
        cfg.use_cgd = false;
    }
    if let Some(i) = a.iterations {
        cfg.iterations = i;
    }
    if let Some(e) = a.epochs {
        cfg.seg.epochs = e;
    }
    apply_reg_args(&mut cfg.reg, &a.reg);
    cfg.seed = ctx.master;
    cfg.out = Some(ctx.global.out.clone());
    if a.atlas.is_some() {
        cfg.atlas = a.atlas.clone();
        cfg.atlas_labels = a.atlas_labels.clone();
        cfg.unlabeled = a.unlabeled.clone();
        cfg.test = a.test.clone();
        cfg.test_labels = a.test_labels.clone();
    }
    let data = if cfg.atlas.is_some() {
        PipelineData::load(&cfg)?
    } else {
        let mut spec = ctx.settings.family.clone();
        if let Some(n) = a.size {
            spec.dims = Dims::cube(n);
        }
        spec.seed = ctx.seed("family");
        std::fs::write(ctx.out("family.json"), serde_json::to_string_pretty(&spec)?)?;
        let fam = make_family(&spec)?;
        PipelineData {
            atlas: fam.atlas.image,
            atlas_labels: fam.atlas.labels,
            unlabeled: fam.unlabeled.into_iter().map(|p| p.image).collect(),
            test: fam.test.into_iter().map(|p| (p.image, p.labels)).collect(),
        }
    };
    let t = Instant::now();
    let manifest = run_pipeline(&cfg, &data)?;
    for r in &manifest.iterations {
        let reg = r.reg_test.as_ref().map_or_else(String::new, |m| format!(", registration dice {:.4}", m.mean_dice));
        println!("iteration {}: segmenter dice {:.4}{reg}", r.iteration, r.seg_test.mean_dice);
    }
    println!("finished in {:.1} s; manifest in {}", t.elapsed().as_secs_f64(), ctx.out("manifest.json").display());
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let vol = read_any_volume(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    if a.labels {
        let mut data = Vec::with_capacity(vol.data().len());
        for v in vol.data() {
            let r = v.round();
            ensure!((r - v).abs() < 1e-6 && r >= 0.0 && r <= u16::MAX as f64, "{v} is not a class label");
            data.push(r as u16);
        }
        let k = (data.iter().copied().max().unwrap_or(0) as usize + 1).max(2);
        io::write_labels(&a.output, &LabelVolume::new(vol.dims(), vol.spacing(), k, data)?)?;
    } else {
        io::write_volume(&a.output, &vol)?;
    }
    let d = vol.dims();
    println!("converted {} ({}x{}x{}) to {}", a.input.display(), d.nx, d.ny, d.nz, a.output.display());
    Ok(())
}
