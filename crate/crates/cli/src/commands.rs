use std::fs;
use std::path::{Path, PathBuf};

use bandrest_core::config::{load_generator, RunConfig};
use bandrest_core::data::{
    degrade as apply_degradation, read_manifest, read_wav, scan_corpus, write_manifest, write_wav, Audio,
    DegradeConfig, DegradeMethod, StemLibrary, WavFormat,
};
use bandrest_core::generator::Generator;
use bandrest_core::metrics::{bench_rtf, sdr, si_snr, EvalRow, MetricReport};
use bandrest_core::nn::ParameterStore;
use bandrest_core::train::{step_rng, RunPaths, Trainer};
use bandrest_core::{Error, Result};
use serde::Deserialize;

use crate::{BenchArgs, DegradeArgs, EvaluateArgs, ManifestArgs, RestoreArgs, TrainArgs};

fn chunk_len(chunk_ms: u32, sample_rate: u32) -> Result<usize> {
    let n = chunk_ms as usize * sample_rate as usize / 1000;
    if n == 0 {
        return Err(Error::arg(format!("--chunk-ms {chunk_ms} gives an empty chunk")));
    }
    Ok(n)
}

fn check_rate(path: &Path, got: u32, want: u32) -> Result<()> {
    if got != want {
        return Err(Error::Data(format!(
            "{} is {got} Hz but the model runs at {want} Hz; resample the input first",
            path.display()
        )));
    }
    Ok(())
}

fn restore_streaming(gen: &Generator, params: &ParameterStore, wave: &[f64], chunk: usize) -> Result<Vec<f64>> {
    let mut session = gen.streaming_session(params)?;
    let mut out = Vec::with_capacity(wave.len());
    for c in wave.chunks(chunk) {
        out.extend(session.push(c)?);
    }
    out.extend(session.finish()?);
    Ok(out)
}

pub fn restore(a: RestoreArgs) -> Result<()> {
    let (cfg, gen, params) = load_generator(&a.checkpoint)?;
    let audio = read_wav(&a.input)?;
    let sr = cfg.stft.sample_rate;
    check_rate(&a.input, audio.sample_rate, sr)?;
    let chunk = chunk_len(a.chunk_ms, sr)?;
    let channels = audio
        .channels
        .iter()
        .map(|ch| {
            if a.streaming {
                restore_streaming(&gen, &params, ch, chunk)
            } else {
                gen.restore(&params, ch)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let out = Audio {
        sample_rate: sr,
        channels,
    };
    write_wav(&a.output, &out, WavFormat::Float32)?;
    println!(
        "restored {} channel(s) x {} samples -> {}",
        out.channels.len(),
        out.len(),
        a.output.display()
    );
    Ok(())
}

fn load_library(manifest: &Path, cfg: &RunConfig) -> Result<StemLibrary> {
    let entries = read_manifest(manifest)?;
    StemLibrary::load(&entries, cfg.data.sample_rate, &cfg.data.sad)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (mut trainer, run_dir) = match (&a.resume, &a.run_dir) {
        (Some(dir), _) => (Trainer::resume(dir)?, dir.clone()),
        (None, Some(dir)) => {
            if RunPaths::new(dir).metrics().exists() {
                return Err(Error::arg(format!(
                    "{} already holds a run; pass --resume to continue it",
                    dir.display()
                )));
            }
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.trainer.seed = s;
            }
            (Trainer::new(cfg)?, dir.clone())
        }
        (None, None) => return Err(Error::arg("either --run-dir or --resume is required")),
    };
    if let Some(e) = a.epochs {
        trainer.set_epochs(e);
    }
    let cfg = trainer.config().clone();
    let lib = load_library(&a.data, &cfg)?;
    let val = a.val_data.as_deref().map(|p| load_library(p, &cfg)).transpose()?;
    let first = trainer.state().step;
    let last = trainer.run(&lib, val.as_ref(), &run_dir)?;
    let s = trainer.state();
    println!("steps {first}..{} over {} epoch(s)", s.step, s.epoch);
    if let Some(best) = s.best_val {
        println!("best validation loss {best:.6}");
    }
    println!("last checkpoint {}", last.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairEntry {
    degraded: PathBuf,
    target: PathBuf,
    #[serde(default)]
    bitrate: Option<u32>,
}

fn read_pairs(path: &Path) -> Result<Vec<PairEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs: Vec<PairEntry> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in &mut pairs {
        p.degraded = base.join(&p.degraded);
        p.target = base.join(&p.target);
    }
    Ok(pairs)
}

fn wav_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no WAV files to evaluate".into()));
    }
    Ok(out)
}

fn fmt_db(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = a.checkpoint.as_deref().map(load_generator).transpose()?;
    let model_rate = model.as_ref().map(|(cfg, _, _)| cfg.stft.sample_rate);
    let score = |file: String, bitrate: Option<u32>, degraded: &[f64], target: &[f64]| -> Result<EvalRow> {
        let restored = match &model {
            Some((_, gen, params)) => gen.restore(params, degraded)?,
            None => degraded.to_vec(),
        };
        Ok(EvalRow {
            file,
            bitrate,
            si_snr: si_snr(&restored, target)?,
            sdr: sdr(&restored, target)?,
            input_si_snr: si_snr(degraded, target)?,
            input_sdr: sdr(degraded, target)?,
        })
    };

    let mut rows = Vec::new();
    if let Some(pairs) = &a.pairs {
        for p in read_pairs(pairs)? {
            let d = read_wav(&p.degraded)?;
            let t = read_wav(&p.target)?;
            check_rate(&p.degraded, d.sample_rate, t.sample_rate)?;
            if let Some(sr) = model_rate {
                check_rate(&p.degraded, d.sample_rate, sr)?;
            }
            let (d, t) = (d.downmix(), t.downmix());
            if d.len() != t.len() {
                return Err(Error::Data(format!(
                    "{}: {} samples but target has {}",
                    p.degraded.display(),
                    d.len(),
                    t.len()
                )));
            }
            rows.push(score(p.degraded.display().to_string(), p.bitrate, &d, &t)?);
        }
    } else {
        let dcfg = DegradeConfig {
            method: a.method,
            bitrates: a.bitrates.clone(),
            codec_command: a.codec_command.clone(),
            ..DegradeConfig::default()
        };
        dcfg.validate()?;
        for (i, f) in wav_inputs(&a.clean)?.iter().enumerate() {
            let audio = read_wav(f)?;
            if let Some(sr) = model_rate {
                check_rate(f, audio.sample_rate, sr)?;
            }
            let clean = audio.downmix();
            for (j, &b) in a.bitrates.iter().enumerate() {
                let mut rng = step_rng(a.seed, (i * a.bitrates.len() + j) as u64);
                let d = apply_degradation(&clean, audio.sample_rate, b, &dcfg, &mut rng)?;
                rows.push(score(f.display().to_string(), Some(b), &d, &clean)?);
            }
        }
    }

    let report = MetricReport::from_rows(rows);
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    report.write_json(&a.out_dir.join("report.json"))?;
    report.write_csv(&a.out_dir.join("rows.csv"), &a.out_dir.join("summary.csv"))?;
    println!(
        "{:>8}  {:>5}  {:>8}  {:>8}  {:>11}  {:>9}",
        "bitrate", "files", "si_snr", "sdr", "input_si_snr", "input_sdr"
    );
    for s in &report.summary {
        println!(
            "{:>8}  {:>5}  {:>8}  {:>8}  {:>11}  {:>9}",
            s.bitrate.map_or_else(|| "-".to_string(), |b| b.to_string()),
            s.n_files,
            fmt_db(s.si_snr),
            fmt_db(s.sdr),
            fmt_db(s.input_si_snr),
            fmt_db(s.input_sdr)
        );
    }
    Ok(())
}

pub fn degrade(a: DegradeArgs) -> Result<()> {
    let audio = read_wav(&a.input)?;
    let mut cfg = DegradeConfig {
        method: a.method,
        codec_command: a.codec_command,
        codec_timeout_s: a.codec_timeout_s,
        ..DegradeConfig::default()
    };
    if a.method == DegradeMethod::ExternalCodec {
        cfg.bitrates = vec![a.bitrate];
    }
    cfg.validate()?;
    let mut rng = step_rng(a.seed, 0);
    let channels = audio
        .channels
        .iter()
        .map(|ch| apply_degradation(ch, audio.sample_rate, a.bitrate, &cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let out = Audio {
        sample_rate: audio.sample_rate,
        channels,
    };
    write_wav(&a.output, &out, WavFormat::Float32)?;
    println!("degraded at {} bps -> {}", a.bitrate, a.output.display());
    Ok(())
}

/// Deterministic multi-tone test signal.
fn bench_signal(len: usize, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            [110.0, 440.0, 1760.0, 7040.0]
                .iter()
                .map(|f| 0.2 * (std::f64::consts::TAU * f * t).sin())
                .sum()
        })
        .collect()
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let (cfg, gen, params) = match &a.checkpoint {
        Some(dir) => load_generator(dir)?,
        None => {
            let cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let gen = Generator::new(cfg.stft, cfg.generator.clone())?;
            let params = gen.init_params(&mut step_rng(a.seed, 0))?;
            (cfg, gen, params)
        }
    };
    let sr = cfg.stft.sample_rate;
    let len = (a.clip_seconds * sr as f64).round() as usize;
    let x = bench_signal(len, sr);
    let chunk = chunk_len(a.chunk_ms, sr)?;
    let report = bench_rtf(
        || {
            if a.streaming {
                restore_streaming(&gen, &params, &x, chunk).map(drop)
            } else {
                gen.restore(&params, &x).map(drop)
            }
        },
        a.iters,
        a.clip_seconds,
        params.parameter_count(""),
    )?;
    println!(
        "{:>10}  {:>13}  {:>12}  {:>6}  {:>8}",
        "params (M)", "RTF mean (ms)", "RTF p95 (ms)", "iters", "clip (s)"
    );
    println!(
        "{:>10.2}  {:>13.2}  {:>12.2}  {:>6}  {:>8.2}",
        report.params_m, report.mean_ms, report.p95_ms, report.iters, report.clip_seconds
    );
    println!(
        "RTF is milliseconds of compute per second of {} Hz audio after {} warm-up runs",
        sr, report.warmup
    );
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&report)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn build_manifest(a: ManifestArgs) -> Result<()> {
    let entries = scan_corpus(&a.root, a.layout)?;
    write_manifest(&a.output, &entries)?;
    println!("{} stems -> {}", entries.len(), a.output.display());
    Ok(())
}
