use std::path::{Path, PathBuf};

use csr_core::capture::{generate_synthetic, read_capture, write_capture, CaptureDataset, Generator, SyntheticSpec};
use csr_core::codec::{equivalent_bits, CodecConfig};
use csr_core::eval::{
    ablation_suite, cosine, footprint_csv, footprint_curve, lanes_csv, sweep_csv, sweep_s, FootprintMethod,
    FootprintRow, LaneRow, ModelGeometry, SweepOptions, LANES_CSV_HEADER, SCHEMA_VERSION,
};
use csr_core::merge::{build_merge_plan, HeadAggregation, MergePlan};
use csr_core::neural_dict::{
    read_csrd, train_on_merged_layers, write_csrd, DictKey, OfflineDictionary, TrainConfig, TrainReport,
};
use csr_core::runtime::{compress_capture, read_snapshot, read_snapshot_meta, write_snapshot, MemoryReport};
use csr_core::CacheKind;
use serde::Serialize;

use crate::config::{require, RunConfig, DEFAULT_OUTLIER_THRESHOLD};
use crate::error::CliError;
use crate::output::{open, sibling_config, write_atomic, write_json, write_text};
use crate::{
    AblateArgs, CodecArgs, CompressArgs, ConfigArg, EvalArgs, GeneratorKind, MergePlanArgs, SynthArgs, TrainArgs,
};

const CONFIG_ECHO: &str = "config.json";

fn default_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_layers: 4,
        num_heads: 4,
        head_dim: 64,
        tokens_per_layer: 512,
        generator: Generator::PlantedDictionary { num_atoms: 128, sparsity: 4, noise_sigma: 0.05 },
        seed: 0,
        kind: CacheKind::Key,
    }
}

fn default_generator(kind: GeneratorKind) -> Generator {
    match kind {
        GeneratorKind::Planted => Generator::PlantedDictionary { num_atoms: 128, sparsity: 4, noise_sigma: 0.05 },
        GeneratorKind::Mixture => Generator::GaussianMixture { num_components: 16, spread: 0.1 },
        GeneratorKind::Drift => Generator::LayerDrift { drift_rate: 0.1, break_layer: None },
    }
}

fn resolve_spec(a: &SynthArgs) -> Result<SyntheticSpec, CliError> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => default_spec(),
    };
    if let Some(g) = a.generator {
        let same = matches!(
            (g, &spec.generator),
            (GeneratorKind::Planted, Generator::PlantedDictionary { .. })
                | (GeneratorKind::Mixture, Generator::GaussianMixture { .. })
                | (GeneratorKind::Drift, Generator::LayerDrift { .. })
        );
        if !same {
            spec.generator = default_generator(g);
        }
    }
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(spec.num_layers, a.layers);
    set!(spec.num_heads, a.heads);
    set!(spec.head_dim, a.head_dim);
    set!(spec.tokens_per_layer, a.tokens);
    set!(spec.seed, a.seed);
    if let Some(k) = a.kind {
        spec.kind = k.into();
    }
    let mismatch =
        |flag: &str, generator: &str| CliError::Config(format!("--{flag} only applies to --generator {generator}"));
    match &mut spec.generator {
        Generator::PlantedDictionary { num_atoms, sparsity, noise_sigma } => {
            set!(*num_atoms, a.atoms);
            set!(*sparsity, a.sparsity);
            set!(*noise_sigma, a.noise);
        }
        Generator::GaussianMixture { num_components, spread } => {
            set!(*num_components, a.components);
            set!(*spread, a.spread);
        }
        Generator::LayerDrift { drift_rate, break_layer } => {
            set!(*drift_rate, a.drift_rate);
            if a.break_layer.is_some() {
                *break_layer = a.break_layer;
            }
        }
    }
    let planted = matches!(spec.generator, Generator::PlantedDictionary { .. });
    let mixture = matches!(spec.generator, Generator::GaussianMixture { .. });
    let drift = matches!(spec.generator, Generator::LayerDrift { .. });
    for (given, flag, ok, generator) in [
        (a.atoms.is_some(), "atoms", planted, "planted"),
        (a.sparsity.is_some(), "sparsity", planted, "planted"),
        (a.noise.is_some(), "noise", planted, "planted"),
        (a.components.is_some(), "components", mixture, "mixture"),
        (a.spread.is_some(), "spread", mixture, "mixture"),
        (a.drift_rate.is_some(), "drift-rate", drift, "drift"),
        (a.break_layer.is_some(), "break-layer", drift, "drift"),
    ] {
        if given && !ok {
            return Err(mismatch(flag, generator));
        }
    }
    spec.validate()?;
    Ok(spec)
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let spec = resolve_spec(&a)?;
    let dataset = generate_synthetic(&spec)?;
    write_atomic(&a.out, |w| write_capture(&dataset, w).map(|_| ()).map_err(|e| CliError::io(&a.out, e)))?;
    write_json(&sibling_config(&a.out), &spec)?;
    println!(
        "wrote {} ({} layers x {} heads x {} vectors, head_dim {})",
        a.out.display(),
        spec.num_layers,
        spec.num_heads,
        spec.tokens_per_layer,
        spec.head_dim
    );
    Ok(())
}

fn load_config(c: &ConfigArg) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        if let Some(t) = &mut cfg.train {
            t.seed = seed;
        }
    }
    Ok(cfg)
}

fn override_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn read_capture_file(path: &Path) -> Result<CaptureDataset, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Capture(format!("{}: {e}", path.display())))?;
    read_capture(std::io::BufReader::new(f)).map_err(|e| CliError::Capture(format!("{}: {e}", path.display())))
}

fn read_dictionary(path: &Path) -> Result<OfflineDictionary, CliError> {
    Ok(read_csrd(open(path)?)?)
}

pub fn merge_plan(a: MergePlanArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    override_path(&mut cfg.paths.capture, &a.capture);
    override_path(&mut cfg.paths.out, &a.out);
    if let Some(v) = a.delta1 {
        cfg.merge.delta1 = v;
    }
    if let Some(v) = a.delta2 {
        cfg.merge.delta2 = v;
    }
    if let Some(v) = a.bins {
        cfg.merge.bins = v;
    }
    if let Some(v) = a.sample_cap {
        cfg.merge.sample_cap = v;
    }
    if a.per_head {
        cfg.merge.aggregation = HeadAggregation::PerHeadMean;
    }
    if !(0.0..).contains(&cfg.merge.delta1) || !(0.0..).contains(&cfg.merge.delta2) {
        return Err(CliError::Config("delta1 and delta2 must be >= 0".into()));
    }
    if cfg.merge.bins == 0 || cfg.merge.sample_cap < 3 {
        return Err(CliError::Config("bins must be positive and sample_cap at least 3".into()));
    }
    let capture = require(&cfg.paths.capture, "--capture")?.to_path_buf();
    let out = require(&cfg.paths.out, "--out")?.to_path_buf();

    let dataset = read_capture_file(&capture)?;
    let plan = build_merge_plan(&dataset, &cfg.merge.options(cfg.seed))?;
    write_json(&out, &plan)?;
    write_json(&sibling_config(&out), &cfg)?;
    println!("{} groups: {:?}", plan.groups.len(), plan.groups);
    Ok(())
}

#[derive(Serialize)]
struct TrainReportEntry {
    group: u32,
    head: u32,
    chunk: u32,
    #[serde(flatten)]
    report: TrainReport,
}

#[derive(Serialize)]
struct TrainSummary {
    schema_version: u32,
    dictionary_hash: String,
    entries: Vec<TrainReportEntry>,
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    override_path(&mut cfg.paths.capture, &a.capture);
    override_path(&mut cfg.paths.plan, &a.plan);
    override_path(&mut cfg.paths.out, &a.out_dir);
    let capture = require(&cfg.paths.capture, "--capture")?.to_path_buf();
    let out_dir = require(&cfg.paths.out, "--out-dir")?.to_path_buf();
    let dataset = read_capture_file(&capture)?;
    let kind = dataset.header().kind;

    let mut tc = cfg.train.clone().unwrap_or_else(|| {
        let base = match kind {
            CacheKind::Key => TrainConfig::keys(),
            CacheKind::Value => TrainConfig::values(),
        };
        TrainConfig { seed: cfg.seed, ..base }
    });
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(tc.num_atoms, a.atoms);
    set!(tc.s_train, a.s_train);
    set!(tc.s_n, a.sn);
    set!(tc.epochs, a.epochs);
    set!(tc.batch_size, a.batch_size);
    set!(tc.learning_rate, a.lr);
    set!(tc.beta_cap, a.beta_cap);
    tc.validate()?;
    cfg.train = Some(tc.clone());
    cfg.head_shared |= a.head_shared;

    let plan = match &cfg.paths.plan {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str::<MergePlan>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => MergePlan::singletons(kind, dataset.header().num_layers),
    };
    let training = train_on_merged_layers(&dataset, &plan, &tc, tc.num_atoms, cfg.head_shared)?;
    let reports = training.reports.clone();
    let offline = OfflineDictionary::from_training(training, plan, tc, dataset.header().num_heads, cfg.head_shared)?;

    let dict_path = out_dir.join("dictionary.csrd");
    write_atomic(&dict_path, |w| write_csrd(&offline, w).map(|_| ()).map_err(|e| CliError::io(&dict_path, e)))?;
    let summary = TrainSummary {
        schema_version: SCHEMA_VERSION,
        dictionary_hash: offline.content_hash(),
        entries: reports
            .into_iter()
            .map(|(DictKey { group, head, chunk }, report)| TrainReportEntry { group, head, chunk, report })
            .collect(),
    };
    write_json(&out_dir.join("train_report.json"), &summary)?;
    write_json(&out_dir.join(CONFIG_ECHO), &cfg)?;

    let (init, last): (f64, f64) = summary
        .entries
        .iter()
        .fold((0.0, 0.0), |(i, l), e| (i + e.report.initial_train_mse, l + e.report.final_train_mse()));
    let n = summary.entries.len().max(1) as f64;
    println!(
        "trained {} dictionaries ({} atoms each); mean train MSE {:.6} -> {:.6}; wrote {}",
        summary.entries.len(),
        offline.meta().per_head_atoms,
        init / n,
        last / n,
        dict_path.display()
    );
    Ok(())
}

fn apply_codec_flags(cfg: &mut RunConfig, c: &CodecArgs) {
    if let Some(s) = c.s {
        cfg.codec.s = s;
    }
    if c.sn.is_some() {
        cfg.codec.s_n = c.sn;
    }
    if let Some(o) = c.online_size {
        cfg.online_size = o;
    }
    if c.outliers && cfg.codec.outlier_threshold.is_none() {
        cfg.codec.outlier_threshold = Some(DEFAULT_OUTLIER_THRESHOLD);
    }
    if c.outlier_threshold.is_some() {
        cfg.codec.outlier_threshold = c.outlier_threshold;
    }
}

/// Resolves the codec against the capture width and the dictionary's chunking.
fn codec_config(cfg: &mut RunConfig, head_dim: usize, offline: &OfflineDictionary) -> Result<CodecConfig, CliError> {
    let s_n = *cfg.codec.s_n.get_or_insert(offline.meta().s_n);
    if s_n != offline.meta().s_n {
        return Err(CliError::Mismatch(format!(
            "s_n = {s_n}, but the dictionary was trained with s_n = {}",
            offline.meta().s_n
        )));
    }
    let codec = CodecConfig::new(head_dim, cfg.codec.s, s_n).with_outlier_threshold(cfg.codec.outlier_threshold);
    codec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(codec)
}

#[derive(Serialize)]
struct CompressReport {
    schema_version: u32,
    kind: CacheKind,
    codec: CodecConfig,
    online_size: usize,
    dictionary_hash: String,
    lanes: usize,
    memory: MemoryReport,
}

pub fn compress(a: CompressArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    override_path(&mut cfg.paths.capture, &a.capture);
    override_path(&mut cfg.paths.dictionary, &a.dict);
    override_path(&mut cfg.paths.out, &a.out_dir);
    apply_codec_flags(&mut cfg, &a.codec);
    let capture = require(&cfg.paths.capture, "--capture")?.to_path_buf();
    let dict = require(&cfg.paths.dictionary, "--dict")?.to_path_buf();
    let out_dir = require(&cfg.paths.out, "--out-dir")?.to_path_buf();

    let dataset = read_capture_file(&capture)?;
    let offline = read_dictionary(&dict)?;
    let codec = codec_config(&mut cfg, dataset.head_dim(), &offline)?;
    let cache = compress_capture(&dataset, &offline, codec, cfg.online_size, cfg.seed)?;

    let snap = out_dir.join("cache.csrs");
    write_atomic(&snap, |w| write_snapshot(&cache, w).map(|_| ()).map_err(CliError::from))?;
    let memory = cache.memory_report();
    let report = CompressReport {
        schema_version: SCHEMA_VERSION,
        kind: cache.kind(),
        codec,
        online_size: cfg.online_size,
        dictionary_hash: cache.dictionary_hash().to_string(),
        lanes: cache.lanes().len(),
        memory: memory.clone(),
    };
    write_json(&out_dir.join("memory_report.json"), &report)?;
    write_json(&out_dir.join(CONFIG_ECHO), &cfg)?;
    println!(
        "compressed {} lanes, {} vectors: {:.3} equivalent bits/channel, ratio {:.3}; wrote {}",
        report.lanes,
        memory.tokens,
        memory.equivalent_bits_per_channel,
        memory.compression_ratio,
        snap.display()
    );
    Ok(())
}

fn footprint_rows(
    geometry: &ModelGeometry,
    offline: &OfflineDictionary,
    s_list: &[usize],
    s_n: usize,
    online_size: usize,
    lengths: &[u64],
) -> Vec<FootprintRow> {
    let meta = offline.meta();
    let mut methods =
        vec![FootprintMethod::Fp16, FootprintMethod::KBit { bits: 4.0 }, FootprintMethod::KBit { bits: 2.0 }];
    for &s in s_list {
        methods.push(FootprintMethod::Csr {
            s: s as u64,
            s_n: s_n as u64,
            online_atoms_per_head: online_size as u64,
            offline_atoms_per_head: meta.per_head_atoms as u64,
            merged_groups: meta.plan.groups.len() as u64,
        });
    }
    footprint_curve(lengths, geometry, &methods)
}

#[derive(Serialize)]
struct SnapshotEvalReport {
    schema_version: u32,
    kind: CacheKind,
    codec: CodecConfig,
    equivalent_bits: f64,
    memory: MemoryReport,
    lanes: Vec<LaneRow>,
    footprint: Vec<FootprintRow>,
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.common)?;
    override_path(&mut cfg.paths.capture, &a.capture);
    override_path(&mut cfg.paths.dictionary, &a.dict);
    override_path(&mut cfg.paths.snapshot, &a.snapshot);
    override_path(&mut cfg.paths.out, &a.out_dir);
    apply_codec_flags(&mut cfg, &a.codec);
    if let Some(s) = &a.sweep_s {
        cfg.eval.sweep_s.clone_from(s);
    }
    cfg.eval.attention |= a.attention;
    cfg.eval.causal |= a.causal;
    if let Some(q) = a.max_queries {
        cfg.eval.max_queries = q;
    }
    if let Some(l) = &a.footprint_lengths {
        cfg.eval.footprint_lengths.clone_from(l);
    }
    let dict = require(&cfg.paths.dictionary, "--dict")?.to_path_buf();
    let out_dir = require(&cfg.paths.out, "--out-dir")?.to_path_buf();
    let offline = read_dictionary(&dict)?;
    let dataset = cfg.paths.capture.as_deref().map(read_capture_file).transpose()?;

    match cfg.paths.snapshot.clone() {
        Some(snap) => eval_snapshot(&mut cfg, &snap, &offline, dataset.as_ref(), &out_dir),
        None => {
            let dataset = dataset.ok_or_else(|| CliError::Config("eval needs --capture or --snapshot".into()))?;
            eval_sweep(&mut cfg, &offline, &dataset, &out_dir)
        }
    }
}

fn eval_sweep(
    cfg: &mut RunConfig,
    offline: &OfflineDictionary,
    dataset: &CaptureDataset,
    out_dir: &Path,
) -> Result<(), CliError> {
    let template = codec_config(cfg, dataset.head_dim(), offline)?;
    let opts = SweepOptions {
        online_size: cfg.online_size,
        seed: cfg.seed,
        attention: cfg.eval.attention,
        causal: cfg.eval.causal,
        max_queries: cfg.eval.max_queries,
    };
    let mut report = sweep_s(dataset, offline, &cfg.eval.sweep_s, &template, &opts)?;
    let h = dataset.header();
    let geometry = ModelGeometry {
        head_dim: h.head_dim as u64,
        num_heads: h.num_heads as u64,
        num_layers: h.num_layers as u64,
        batch: 1,
    };
    report.footprint = footprint_rows(
        &geometry,
        offline,
        &cfg.eval.sweep_s,
        template.s_n,
        cfg.online_size,
        &cfg.eval.footprint_lengths,
    );

    write_json(&out_dir.join("report.json"), &report)?;
    write_text(&out_dir.join("sweep.csv"), &sweep_csv(&report.sweep))?;
    write_text(&out_dir.join("lanes.csv"), &lanes_csv(&report.lanes))?;
    write_text(&out_dir.join("footprint.csv"), &footprint_csv(&report.footprint))?;
    write_json(&out_dir.join(CONFIG_ECHO), &cfg)?;
    for row in &report.sweep {
        println!(
            "s={:<3} bits={:.3} mse={:.6} cosine={:.5}{}",
            row.s,
            row.equivalent_bits,
            row.mse,
            row.mean_cosine,
            row.attention_cosine.map(|c| format!(" attention_cosine={c:.5}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn eval_snapshot(
    cfg: &mut RunConfig,
    snap: &Path,
    offline: &OfflineDictionary,
    dataset: Option<&CaptureDataset>,
    out_dir: &Path,
) -> Result<(), CliError> {
    let meta = read_snapshot_meta(open(snap)?)?;
    let cache = read_snapshot(open(snap)?, offline)?;
    let codec = *cache.config();
    cfg.codec.s = codec.s;
    cfg.codec.s_n = Some(codec.s_n);
    cfg.codec.outlier_threshold = codec.outlier_threshold;
    cfg.online_size = meta.online_size;

    let mut lanes = Vec::new();
    for (&(layer, head), lane) in cache.lanes() {
        let decoded = cache.decode_all(layer, head)?;
        let n = decoded.nrows();
        let outliers = lane.outlier_tokens().len();
        let (mse, mean_cosine) = match dataset {
            Some(ds) => {
                let block = ds.require_block(layer, head)?;
                if block.vectors.dim() != decoded.dim() {
                    return Err(CliError::Mismatch(format!(
                        "lane ({layer}, {head}) holds {:?} vectors, capture has {:?}",
                        decoded.dim(),
                        block.vectors.dim()
                    )));
                }
                let mut sq = 0.0;
                let mut cos = 0.0;
                for (x, y) in block.vectors.rows().into_iter().zip(decoded.rows()) {
                    sq += x.iter().zip(y).map(|(&p, &q)| ((p - q) as f64).powi(2)).sum::<f64>();
                    cos += cosine(x, y);
                }
                let d = n.max(1) as f64;
                (sq / d, if n == 0 { 1.0 } else { cos / d })
            }
            None => (f64::NAN, f64::NAN),
        };
        lanes.push(LaneRow {
            s: codec.s,
            layer,
            head,
            mse,
            mean_cosine,
            outlier_fraction: if n == 0 { 0.0 } else { outliers as f64 / n as f64 },
        });
    }
    let om = offline.meta();
    let geometry = ModelGeometry {
        head_dim: codec.head_dim as u64,
        num_heads: om.num_heads as u64,
        num_layers: om.plan.num_layers() as u64,
        batch: 1,
    };
    let report = SnapshotEvalReport {
        schema_version: SCHEMA_VERSION,
        kind: cache.kind(),
        codec,
        equivalent_bits: equivalent_bits(&codec),
        memory: cache.memory_report(),
        footprint: footprint_rows(
            &geometry,
            offline,
            &[codec.s],
            codec.s_n,
            meta.online_size,
            &cfg.eval.footprint_lengths,
        ),
        lanes,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    let csv = if dataset.is_some() { lanes_csv(&report.lanes) } else { format!("{LANES_CSV_HEADER}\n") };
    write_text(&out_dir.join("lanes.csv"), &csv)?;
    write_text(&out_dir.join("footprint.csv"), &footprint_csv(&report.footprint))?;
    write_json(&out_dir.join(CONFIG_ECHO), &cfg)?;
    println!(
        "decoded {} lanes, {} vectors at s={} s_n={} ({:.3} equivalent bits)",
        report.lanes.len(),
        report.memory.tokens,
        codec.s,
        codec.s_n,
        report.equivalent_bits
    );
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<(), CliError> {
    let report = ablation_suite(a.seed)?;
    write_json(&a.out_dir.join("ablation.json"), &report)?;
    write_json(&a.out_dir.join(CONFIG_ECHO), &serde_json::json!({ "seed": a.seed }))?;
    for ab in &report.ablations {
        let metrics: Vec<String> = ab.metrics.iter().map(|(k, v)| format!("{k}={v:.5}")).collect();
        println!("{} {}: {}", if ab.passed { "PASS" } else { "FAIL" }, ab.name, metrics.join(" "));
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.ablations.iter().filter(|a| !a.passed).map(|a| a.name.as_str()).collect();
        Err(CliError::Failed(format!("ablation directions failed: {}", failed.join(", "))))
    }
}
