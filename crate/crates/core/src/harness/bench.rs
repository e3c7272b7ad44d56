//! Seeded pipeline benchmark: wall-clock per stage plus the analytic cost
//! fields, always reported as mean ± sample standard deviation over at
//! least three repetitions.
//!
//! Stages are serial within a run: region extraction, one fusion forward,
//! then the task head (which may itself run further forwards, e.g. the
//! iterative caption decode). Weights come from the experiment seed, so the
//! numeric work — though not the wall times — is identical across runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::ArchConfig;
use crate::cost::count_arch_default;
use crate::detector::regions::RegionSet;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::fusion::tokenizer::FIRST_WORD_ID;
use crate::fusion::{assemble_input, FusionTransformer, Task};
use crate::heads::{
    caption_generate, nlvr2_predict, retrieval_score, vqa_predict, CaptionConfig, Nlvr2Head,
    VqaHead,
};
use crate::nn::init::Init;
use crate::nn::Initializer;

use super::{fingerprint, EnvironmentFingerprint, ExperimentConfig};

/// Wall time of one pipeline stage over all repetitions.
#[derive(Clone, Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub mean_ms: f64,
    /// Sample standard deviation (n - 1); never omitted.
    pub std_ms: f64,
}

/// Analytic counts for the benchmarked pair of networks.
#[derive(Clone, Copy, Debug, Serialize, PartialEq, Eq)]
pub struct BenchCost {
    pub detector_params: u64,
    pub detector_flops: u64,
    pub transformer_params: u64,
    pub transformer_flops: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkResult {
    pub config_hash: String,
    pub seed: u64,
    pub task: String,
    pub repetitions: usize,
    pub fingerprint: EnvironmentFingerprint,
    pub cost: BenchCost,
    pub stages: Vec<StageTiming>,
    pub regions_extracted: usize,
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Deterministic pseudo-words for the text side of the benchmark; real
/// corpora are not needed to time the pipeline.
fn bench_tokens(vocab_size: usize, count: usize, offset: u32) -> Result<Vec<u32>> {
    let first = FIRST_WORD_ID as usize;
    if vocab_size <= first + 1 {
        return Err(Error::InvalidConfig(format!(
            "vocabulary of {vocab_size} leaves no word ids (first word id is {first})"
        )));
    }
    let room = (vocab_size - first) as u32;
    Ok((0..count as u32).map(|i| FIRST_WORD_ID + (i * 7 + offset) % room).collect())
}

/// Tag tokens standing in for the detector's class names.
fn tag_tokens(regions: &RegionSet, vocab_size: usize) -> Vec<u32> {
    let first = FIRST_WORD_ID as usize;
    let room = (vocab_size - first) as u32;
    regions
        .regions
        .iter()
        .map(|r| FIRST_WORD_ID + u32::from(r.class_id) % room)
        .collect()
}

/// Run the timed pipeline described by an experiment config.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<BenchmarkResult> {
    config.validate()?;
    let reps = config.benchmark.repetitions;

    let detector_cfg = match config.detector.resolve()? {
        ArchConfig::Detector(c) => c,
        ArchConfig::Transformer(_) => {
            return Err(Error::InvalidConfig(
                "the `detector` reference resolved to a transformer config".into(),
            ))
        }
    };
    let transformer_cfg = match config.transformer.resolve()? {
        ArchConfig::Transformer(c) => c,
        ArchConfig::Detector(_) => {
            return Err(Error::InvalidConfig(
                "the `transformer` reference resolved to a detector config".into(),
            ))
        }
    };
    if detector_cfg.box_head.feature_dim != transformer_cfg.region_feature_dim {
        return Err(Error::InvalidConfig(format!(
            "detector features are {}-d but the transformer expects {}-d regions",
            detector_cfg.box_head.feature_dim, transformer_cfg.region_feature_dim
        )));
    }

    let cost = BenchCost {
        detector_params: count_arch_default(&ArchConfig::Detector(detector_cfg.clone()))?.params,
        detector_flops: count_arch_default(&ArchConfig::Detector(detector_cfg.clone()))?.flops,
        transformer_params: count_arch_default(&ArchConfig::Transformer(transformer_cfg.clone()))?
            .params,
        transformer_flops: count_arch_default(&ArchConfig::Transformer(transformer_cfg.clone()))?
            .flops,
    };

    let detector = Detector::new(detector_cfg.clone(), Init::Seeded(config.seed))?;
    let model =
        FusionTransformer::new(transformer_cfg.clone(), Init::Seeded(config.seed ^ 0x5eed))?;
    let hidden = model.config().hidden;
    let vocab = model.config().vocab_size;

    // Squash the seeded image into a stable range so region extraction finds
    // detections regardless of the seed.
    let mut image_init = Initializer::new(Init::Seeded(config.seed.wrapping_add(1)));
    let image = image_init
        .weight3((3, detector_cfg.input_height, detector_cfg.input_width))
        .mapv(|v| (v * 10.0).tanh() * 0.5 + 0.5);

    let sentence = bench_tokens(vocab, 12, 0)?;
    let vqa_head = VqaHead::new(hidden, 128, Init::Seeded(config.seed ^ 0xa15))?;
    let nlvr2_head = Nlvr2Head::new(hidden, Init::Seeded(config.seed ^ 0xb26))?;

    let mut extraction = Vec::with_capacity(reps);
    let mut fusion = Vec::with_capacity(reps);
    let mut head = Vec::with_capacity(reps);
    let mut regions_extracted = 0;

    for _ in 0..reps {
        let t0 = Instant::now();
        let regions = detector.extract_regions(&image, "bench")?;
        extraction.push(t0.elapsed().as_secs_f64() * 1e3);
        regions_extracted = regions.regions.len();
        let tags = tag_tokens(&regions, vocab);

        let fusion_task = match config.task.as_str() {
            "caption" => Task::Caption,
            "vqa" => Task::Vqa,
            "nlvr2" => Task::Nlvr2,
            "retrieval" => Task::Retrieval,
            _ => Task::PretrainMlm,
        };
        let t1 = Instant::now();
        let input = assemble_input(&sentence, &tags, &regions, fusion_task, model.config())?;
        let out = model.forward(&input)?;
        fusion.push(t1.elapsed().as_secs_f64() * 1e3);

        let t2 = Instant::now();
        match config.task.as_str() {
            "caption" => {
                caption_generate(&model, &regions, &tags, &CaptionConfig { max_len: 8, beam: 1 })?;
            }
            "vqa" => {
                vqa_predict(&model, &vqa_head, &sentence, &tags, &regions)?;
            }
            "nlvr2" => {
                nlvr2_predict(&model, &nlvr2_head, &sentence, (&regions, &tags), (&regions, &tags))?;
            }
            "retrieval" => {
                retrieval_score(&model, &regions, &tags, &sentence)?;
            }
            // Pre-training step stand-in: masked-token logits at every
            // sentence position plus the match head.
            _ => {
                let positions: Vec<usize> = (1..=input.sentence_len).collect();
                model.mlm_logits(&out.hidden, &positions)?;
                model.itm_logits(&out.pooled);
            }
        }
        head.push(t2.elapsed().as_secs_f64() * 1e3);
    }

    let stages = [("extraction", extraction), ("fusion", fusion), ("head", head)]
        .into_iter()
        .map(|(name, samples)| {
            let (mean_ms, std_ms) = mean_std(&samples);
            StageTiming { stage: name.into(), mean_ms, std_ms }
        })
        .collect();

    Ok(BenchmarkResult {
        config_hash: config.config_hash(),
        seed: config.seed,
        task: config.task.clone(),
        repetitions: reps,
        fingerprint: fingerprint(config.benchmark.threads),
        cost,
        stages,
        regions_extracted,
    })
}

/// Serialize and write `benchmark.json`, validating the emitted document
/// against the result schema first.
pub fn write_benchmark(result: &BenchmarkResult, dir: &Path) -> Result<PathBuf> {
    let value = serde_json::to_value(result)?;
    validate_benchmark_json(&value)?;
    fs::create_dir_all(dir)?;
    let path = dir.join("benchmark.json");
    fs::write(&path, serde_json::to_string_pretty(&value)?)?;
    Ok(path)
}

fn field<'v>(v: &'v serde_json::Value, key: &str) -> Result<&'v serde_json::Value> {
    v.get(key)
        .ok_or_else(|| Error::MalformedData(format!("benchmark result is missing `{key}`")))
}

/// Structural check of a benchmark result document: required fields, types,
/// at least three repetitions, std present for every stage.
pub fn validate_benchmark_json(v: &serde_json::Value) -> Result<()> {
    let fail = |why: &str| Err(Error::MalformedData(format!("benchmark result: {why}")));

    let hash = field(v, "config_hash")?.as_str().unwrap_or_default();
    if hash.len() != 64 || !hash.chars().all(|c| c.is_ascii_hexdigit()) {
        return fail("config_hash must be a 64-hex-digit string");
    }
    if field(v, "seed")?.as_u64().is_none() {
        return fail("seed must be an unsigned integer");
    }
    if field(v, "task")?.as_str().is_none() {
        return fail("task must be a string");
    }
    let reps = field(v, "repetitions")?.as_u64().unwrap_or(0);
    if reps < 3 {
        return fail("repetitions must be at least 3");
    }
    let fp = field(v, "fingerprint")?;
    for key in ["os", "arch", "family", "package_version"] {
        if field(fp, key)?.as_str().is_none() {
            return fail("fingerprint strings missing");
        }
    }
    for key in ["declared_threads", "available_parallelism"] {
        if field(fp, key)?.as_u64().unwrap_or(0) < 1 {
            return fail("fingerprint thread counts must be positive");
        }
    }
    let cost = field(v, "cost")?;
    for key in
        ["detector_params", "detector_flops", "transformer_params", "transformer_flops"]
    {
        if field(cost, key)?.as_u64().is_none() {
            return fail("cost counts must be unsigned integers");
        }
    }
    let stages = field(v, "stages")?
        .as_array()
        .ok_or_else(|| Error::MalformedData("benchmark result: stages must be an array".into()))?;
    if stages.len() != 3 {
        return fail("exactly three stages are reported");
    }
    for stage in stages {
        if field(stage, "stage")?.as_str().is_none() {
            return fail("stage name missing");
        }
        for key in ["mean_ms", "std_ms"] {
            match field(stage, key)?.as_f64() {
                Some(x) if x.is_finite() && x >= 0.0 => {}
                _ => return fail("stage timings must be non-negative numbers"),
            }
        }
    }
    if field(v, "regions_extracted")?.as_u64().is_none() {
        return fail("regions_extracted must be an unsigned integer");
    }
    Ok(())
}
