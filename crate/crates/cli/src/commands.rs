use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use a3r_core::backbone::{
    hash_embed, load_feature_volume, load_language_embedding, Backbone, FeatureVolume, TestBackbone,
    TestBackboneConfig,
};
use a3r_core::bench::{bench_encoder, bench_input, run_bench_threads, BenchOptions};
use a3r_core::checkpoint::{load_policy, save_policy, save_store};
use a3r_core::config::{EncoderConfig, PointFeatures, Pooling, Variant};
use a3r_core::decoders::HeadConfig;
use a3r_core::geometry::{load_calibration, save_calibration};
use a3r_core::pipeline::{prepare_scene, Policy, Precision};
use a3r_core::ply::{feature_pca_colors, write_ply};
use a3r_core::sweep::{run_ablation, write_ablation_csv, AblationSetup, SWEEP_ANGLES};
use a3r_core::synth::{
    frame_files, load_dataset, load_frames, make_reach_task, render as render_scene, save_dataset, save_frames,
    ProprioRecord, ReachConfig, SceneSpec,
};
use a3r_core::tensor_io;
use a3r_core::train::{prepare_examples, train as run_training, write_loss_csv, TrainConfig, LANGUAGE_SEED};
use a3r_core::{Error, Result};
use ndarray::Array2;
use serde::de::DeserializeOwned;

use crate::manifest::{RunManifest, RUN_MANIFEST};
use crate::{AblateArgs, BenchArgs, EncodeArgs, EncoderArgs, GenDatasetArgs, RenderArgs, TrainArgs};

pub const PROPRIO_FILE: &str = "proprio.json";
pub const CALIB_FILE: &str = "calib.json";

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

impl EncoderArgs {
    fn has_overrides(&self) -> bool {
        self.config.is_some() || self.variant.is_some() || self.no_attention || self.num_points.is_some() || self.seed.is_some()
    }

    fn resolve(&self, default: EncoderConfig) -> Result<EncoderConfig> {
        let mut cfg = match &self.config {
            Some(p) => read_json(p)?,
            None => default,
        };
        if let Some(v) = self.variant {
            cfg = v.apply(&cfg);
        }
        if self.no_attention {
            cfg.pooling = Pooling::Max;
        }
        if let Some(p) = self.num_points {
            cfg.num_points = p;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn backbone(&self, cfg: &EncoderConfig) -> TestBackbone {
        TestBackbone::new(TestBackboneConfig {
            stride: self.backbone_stride,
            dim: cfg.feature_dim,
            ..TestBackboneConfig::default()
        })
    }
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    let policy = match &a.checkpoint {
        Some(dir) => {
            if a.encoder.has_overrides() {
                return Err(Error::InvalidInput(
                    "--checkpoint carries its own encoder config; drop the config flags".into(),
                ));
            }
            load_policy(dir)?
        }
        None => Policy::new(a.encoder.resolve(EncoderConfig::default())?, HeadConfig::default())?,
    };
    let cfg = policy.encoder;
    let calib = load_calibration(&a.calib)?;
    let frames = load_frames(&a.frames_dir, &frame_files(calib.len()), &calib)?;
    let proprio_path = a.frames_dir.join(PROPRIO_FILE);
    let proprio = read_json::<ProprioRecord>(&proprio_path)?.proprioception()?;

    let volumes: Vec<FeatureVolume> = match &a.features_dir {
        Some(dir) => frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let v = load_feature_volume(&dir.join(format!("cam{i}_features.a3rt")))?;
                v.check_against(f.height(), f.width(), cfg.feature_dim)?;
                Ok(v)
            })
            .collect::<Result<_>>()?,
        None => {
            let bb = a.encoder.backbone(&cfg);
            frames.iter().map(|f| bb.extract_features(f)).collect::<Result<_>>()?
        }
    };
    let language = match (&a.lang, &a.lang_embedding) {
        (Some(text), _) => Some(hash_embed(text, cfg.feature_dim, LANGUAGE_SEED)?),
        (None, Some(p)) => Some(load_language_embedding(p)?),
        (None, None) if cfg.language => {
            return Err(Error::InvalidInput("config uses language; pass --lang or --lang-embedding".into()))
        }
        (None, None) => None,
    };

    let mut scene = prepare_scene(&cfg, &frames, &volumes, &proprio, language.as_ref(), Precision::F64, None)?;
    let t = Instant::now();
    let (enc, cache) = policy.pool.forward_cached(&policy.store, scene.tokens.tokens.view(), cfg.pooling)?;
    scene.timings.pool_us += t.elapsed().as_secs_f64() * 1e6;

    create_dir(&a.out)?;
    let mut m = RunManifest::new("encode");
    m.config("encoder", cfg)
        .config("feature_source", if a.test_backbone { "test-backbone" } else { "features-dir" })
        .config("backbone_stride", a.encoder.backbone_stride)
        .config("lang", &a.lang)
        .input("calib", &a.calib)
        .input("frames_dir", &a.frames_dir)
        .input("proprio", &proprio_path);
    if let Some(d) = &a.features_dir {
        m.input("features_dir", d);
    }
    if let Some(p) = &a.lang_embedding {
        m.input("lang_embedding", p);
    }
    if let Some(p) = &a.checkpoint {
        m.input("checkpoint", p);
    }

    let z_path = a.out.join("z.a3rt");
    tensor_io::save(&z_path, &enc.z)?;
    m.output("z", &z_path);
    // Max pooling writes one one-hot row per output dimension marking the
    // winning point; attention pooling writes the softmax weights.
    let att_path = a.out.join("attention.a3rt");
    match cache.argmax() {
        Some(argmax) => {
            let mut onehot = Array2::<f64>::zeros((argmax.len(), enc.attention.len()));
            for (j, &i) in argmax.iter().enumerate() {
                onehot[(j, i)] = 1.0;
            }
            tensor_io::save(&att_path, &onehot)?;
        }
        None => tensor_io::save(&att_path, &enc.attention)?,
    }
    m.output("attention", &att_path);
    let points = scene.sampled_base_points();
    let pts_path = a.out.join("points.a3rt");
    tensor_io::save(&pts_path, &points)?;
    m.output("points", &pts_path);
    if a.ply {
        let colors = match cfg.point_features {
            PointFeatures::Backbone => feature_pca_colors(scene.sampled.features.view()),
            _ => scene.sampled.colors.clone(),
        };
        let ply_path = a.out.join("cloud.ply");
        write_ply(&ply_path, points.view(), colors.view(), Some(enc.attention.view()))?;
        m.output("ply", &ply_path);
    }
    m.timings_us = Some(scene.timings);
    let manifest_path = a.out.join(RUN_MANIFEST);
    m.write(&manifest_path)?;
    println!("{}", manifest_path.display());
    Ok(())
}

pub fn bench(a: BenchArgs, threads: usize) -> Result<()> {
    let enc = match &a.config {
        Some(p) => read_json(p)?,
        None => bench_encoder(),
    };
    enc.validate()?;
    let opts = BenchOptions {
        image_size: a.image_size,
        cameras: a.cameras,
        stride: a.stride,
        precision: a.precision,
        ..BenchOptions::default()
    };
    let input = bench_input(&enc, &opts)?;
    let report = run_bench_threads(&enc, &opts, &input, a.n_iters, threads)?;
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    if s.trim() == "all" {
        return Ok(Variant::ALL.to_vec());
    }
    s.split(',').map(|v| v.trim().parse()).collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("seed {v:?} is not a non-negative integer")))
        })
        .collect()
}

fn train_config(path: &Option<PathBuf>, epochs: Option<usize>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => read_json(p)?,
        None => TrainConfig::toy(),
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn head_config(path: &Option<PathBuf>) -> Result<HeadConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(HeadConfig::default()),
    }
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let variants = parse_variants(&a.variants)?;
    let seeds = parse_seeds(&a.seeds)?;
    let samples = load_dataset(&a.dataset)?;
    if a.eval_scenes == 0 || a.eval_scenes >= samples.len() {
        return Err(Error::InvalidInput(format!(
            "--eval-scenes must be in 1..{} for this dataset",
            samples.len()
        )));
    }
    let (train_set, eval) = samples.split_at(samples.len() - a.eval_scenes);
    let base = a.encoder.resolve(EncoderConfig::toy())?;
    let setup = AblationSetup {
        base,
        head: head_config(&a.head_config)?,
        train: train_config(&a.train_config, a.epochs)?,
        backbone: a.encoder.backbone(&base),
        angles: SWEEP_ANGLES.to_vec(),
    };
    let rows = run_ablation(&setup, &variants, &seeds, train_set, eval)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_ablation_csv(&a.out, &rows)?;
    let mut m = RunManifest::new("ablate");
    m.config("encoder", base)
        .config("head", setup.head)
        .config("train", setup.train)
        .config("backbone_stride", a.encoder.backbone_stride)
        .config("variants", &variants)
        .config("seeds", &seeds)
        .config("eval_scenes", a.eval_scenes)
        .config("angles", &setup.angles)
        .input("dataset", &a.dataset)
        .output("csv", &a.out);
    m.write(&a.out.with_extension("manifest.json"))?;
    print!("{}", fs::read_to_string(&a.out).map_err(|e| Error::io(&a.out, e))?);
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let enc = a.encoder.resolve(EncoderConfig::toy())?;
    let head = HeadConfig {
        kind: a.head,
        ..head_config(&a.head_config)?
    };
    let mut tcfg = train_config(&a.train_config, a.epochs)?;
    if let Some(s) = a.encoder.seed {
        tcfg.seed = s;
    }
    let samples = load_dataset(&a.dataset)?;
    let mut policy = Policy::new(enc, head)?;
    let mut backbone = a.encoder.backbone(&enc);
    let data = prepare_examples(&policy, &backbone, &samples)?;
    let report = run_training(&mut policy, Some(&mut backbone), &data, &tcfg)?;

    create_dir(&a.out)?;
    let ckpt = a.out.join("checkpoint");
    save_policy(&ckpt, &policy)?;
    let csv = a.out.join("loss.csv");
    write_loss_csv(&csv, &report.curve)?;
    let mut m = RunManifest::new("train");
    m.config("encoder", enc)
        .config("head", head)
        .config("train", tcfg)
        .config("backbone_stride", a.encoder.backbone_stride)
        .input("dataset", &a.dataset)
        .output("checkpoint", &ckpt)
        .output("loss_csv", &csv);
    if enc.finetune_backbone {
        let bb_dir = a.out.join("backbone");
        save_store(&bb_dir, backbone.params())?;
        m.output("backbone", &bb_dir);
    }
    m.write(&a.out.join(RUN_MANIFEST))?;
    println!(
        "initial loss {:.6}, final loss {:.6} over {} epochs",
        report.initial_loss(),
        report.final_loss(),
        report.curve.len()
    );
    Ok(())
}

pub fn gen_dataset(a: GenDatasetArgs) -> Result<()> {
    let cfg: ReachConfig = match &a.reach_config {
        Some(p) => read_json(p)?,
        None => ReachConfig::default(),
    };
    let samples = make_reach_task(&cfg, a.episodes, a.seed)?;
    let path = save_dataset(&a.out, &samples)?;
    let mut m = RunManifest::new("gen-dataset");
    m.config("reach", &cfg)
        .config("episodes", a.episodes)
        .config("seed", a.seed)
        .output("manifest", &path);
    if let Some(p) = &a.reach_config {
        m.input("reach_config", p);
    }
    m.write(&a.out.join(RUN_MANIFEST))?;
    println!("{}", path.display());
    Ok(())
}

pub fn render(a: RenderArgs) -> Result<()> {
    let (spec, instruction) = match &a.scene {
        Some(p) => (read_json::<SceneSpec>(p)?, None),
        None => {
            let s = make_reach_task(&ReachConfig::default(), 1, a.seed)?.remove(0);
            (s.spec, Some(s.instruction))
        }
    };
    spec.validate()?;
    let frames = render_scene(&spec)?;
    save_frames(&a.out, "", &frames)?;
    let calib = a.out.join(CALIB_FILE);
    save_calibration(&calib, &spec.cameras)?;
    write_json(&a.out.join(PROPRIO_FILE), &spec.proprio)?;
    write_json(&a.out.join("scene.json"), &spec)?;
    let mut m = RunManifest::new("render");
    m.config("seed", a.seed)
        .output("calib", &calib)
        .output("proprio", &a.out.join(PROPRIO_FILE))
        .output("scene", &a.out.join("scene.json"));
    if let Some(p) = &a.scene {
        m.input("scene", p);
    }
    if let Some(text) = instruction {
        let p = a.out.join("instruction.txt");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        m.output("instruction", &p);
    }
    m.write(&a.out.join(RUN_MANIFEST))?;
    println!("{}", a.out.display());
    Ok(())
}
