//! Configuration-driven experiment runner: one entry point per figure-style
//! experiment, each writing CSV/JSON/heatmap artifacts into a fresh run
//! directory stamped with the config hash.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpusgen::{
    make_domain_pair, sample_with_splits, DomainSpec, LengthRange, ParallelCorpus, ReorderRule,
    SplitSizes,
};
use crate::error::{Error, Result};
use crate::forensics::{
    accumulate_importance, decile_drift, erase_and_eval, export_heatmap, heatmap_paths,
    EraseOrder, ErasureCurve, ImportanceMap,
};
use crate::nanoformer::{tag_shape, Grouping, GroupingOptions, Model, ModelConfig, ParamTag};
use crate::trainer::{continual_train, run_strategy_sweep, train, EvalDomain, FreezeSpec, TrainOpts};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub seed: u64,
    pub post_norm: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_layers: 2,
            d_model: 32,
            d_ffn: 64,
            num_heads: 4,
            max_len: 64,
            dropout: 0.0,
            seed: 11,
            post_norm: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train: 20_000,
            dev: 500,
            test: 500,
            seed: 101,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainSection {
    pub shared_seed: u64,
    pub overlap: f64,
    pub vocab_size: usize,
    pub length_min: usize,
    pub length_max: usize,
    pub indomain_reorder: ReorderRule,
    pub general: SplitSection,
    pub indomain: SplitSection,
}

impl Default for DomainSection {
    fn default() -> Self {
        DomainSection {
            shared_seed: 7,
            overlap: 0.7,
            vocab_size: 200,
            length_min: 4,
            length_max: 12,
            indomain_reorder: ReorderRule::Reverse,
            general: SplitSection::default(),
            indomain: SplitSection {
                train: 5_000,
                dev: 500,
                test: 500,
                seed: 202,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_each: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 12,
            lr: 1e-3,
            batch_size: 32,
            eval_each: 1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinualSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_each: usize,
    pub seed: u64,
    pub grouping: Grouping,
    pub ln_with_host: bool,
}

impl Default for ContinualSection {
    fn default() -> Self {
        ContinualSection {
            epochs: 8,
            lr: 1e-3,
            batch_size: 32,
            eval_each: 1,
            seed: 2,
            grouping: Grouping::Position,
            ln_with_host: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSection {
    /// Cap on training sentences averaged into an importance map.
    pub t_limit: usize,
    pub fractions: Vec<f64>,
    /// Canonical tags of the matrices to analyze.
    pub matrices: Vec<String>,
    /// Test sentences used per erasure evaluation point.
    pub erasure_eval: usize,
    pub decode_max_len: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            t_limit: 2_000,
            fractions: crate::forensics::DEFAULT_FRACTIONS.to_vec(),
            matrices: vec![
                "enc.l0.sa.out_w".into(),
                "enc.l0.ffn.w2".into(),
                "enc.l1.ffn.w1".into(),
                "dec.l0.ca.out_w".into(),
                "dec.l0.ffn.w2".into(),
                "dec.l1.sa.out_w".into(),
                "dec.l1.ca.q_w".into(),
                "dec.out.w".into(),
            ],
            erasure_eval: 200,
            decode_max_len: 24,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub out_dir: String,
    pub model: ModelSection,
    pub domains: DomainSection,
    pub train: TrainSection,
    pub continual: ContinualSection,
    pub analysis: AnalysisSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        if cfg.out_dir.is_empty() {
            cfg.out_dir = "runs".into();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.epochs == 0 || self.continual.epochs == 0 {
            return Err(Error::config("epoch counts must be positive"));
        }
        if self.analysis.matrices.is_empty() {
            return Err(Error::config("analysis.matrices must not be empty"));
        }
        for m in &self.analysis.matrices {
            m.parse::<ParamTag>()?;
        }
        Ok(())
    }

    /// Hash of the canonical JSON serialization; stamped into every artifact.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            num_layers: self.model.num_layers,
            d_model: self.model.d_model,
            d_ffn: self.model.d_ffn,
            num_heads: self.model.num_heads,
            src_vocab,
            tgt_vocab,
            max_len: self.model.max_len,
            dropout: self.model.dropout,
            seed: self.model.seed,
            post_norm: self.model.post_norm,
        }
    }

    fn grouping_opts(&self) -> GroupingOptions {
        GroupingOptions {
            ln_with_host: self.continual.ln_with_host,
        }
    }

    fn train_opts(&self, record_test: bool) -> TrainOpts {
        TrainOpts {
            epochs: self.train.epochs,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            eval_each: self.train.eval_each,
            seed: self.train.seed,
            record_test,
            decode_max_len: self.analysis.decode_max_len,
        }
    }

    fn continual_opts(&self, record_test: bool) -> TrainOpts {
        TrainOpts {
            epochs: self.continual.epochs,
            lr: self.continual.lr,
            batch_size: self.continual.batch_size,
            eval_each: self.continual.eval_each,
            seed: self.continual.seed,
            record_test,
            decode_max_len: self.analysis.decode_max_len,
        }
    }
}

/// Cap rayon's worker count. Call once, before any parallel work; later
/// calls are ignored (the pool is process-global).
pub fn set_jobs(jobs: usize) {
    if jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
}

/// A freshly created run directory. Without `overwrite` each run gets a new
/// timestamped directory, so previous runs are never touched.
pub fn prepare_run_dir(cfg: &ExperimentConfig, command: &str, overwrite: bool) -> Result<PathBuf> {
    let hash8 = &cfg.hash()[..8];
    let base = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    let dir = if overwrite {
        let d = base.join(format!("{command}-{hash8}"));
        if d.exists() {
            fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        d
    } else {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("clock after epoch")
            .as_secs();
        let mut d = base.join(format!("{command}-{hash8}-{secs}"));
        let mut k = 1;
        while d.exists() {
            k += 1;
            d = base.join(format!("{command}-{hash8}-{secs}-{k}"));
        }
        d
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

struct RunWriter {
    dir: PathBuf,
    hash: String,
    files: Vec<String>,
}

impl RunWriter {
    fn new(dir: PathBuf, cfg: &ExperimentConfig) -> Result<Self> {
        let mut w = RunWriter {
            dir,
            hash: cfg.hash(),
            files: Vec::new(),
        };
        // Full defaults dump, so intent and execution can be diffed.
        let dump = toml::to_string_pretty(cfg).map_err(|e| Error::config(e.to_string()))?;
        w.write_raw("config_dump.toml", dump.as_bytes())?;
        Ok(w)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_raw(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_csv(&mut self, name: &str, body: &str) -> Result<()> {
        let text = format!("# config_hash={}\n{body}", self.hash);
        self.write_raw(name, text.as_bytes())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let wrapped = serde_json::json!({
            "config_hash": self.hash,
            "data": value,
        });
        let text = serde_json::to_string_pretty(&wrapped).expect("json serializes");
        self.write_raw(name, text.as_bytes())
    }

    fn note_file(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    /// Manifest with a sha256 per artifact; written last.
    fn finish(mut self, command: &str) -> Result<PathBuf> {
        self.files.sort();
        let mut entries = serde_json::Map::new();
        for f in &self.files {
            let bytes = fs::read(self.path(f)).map_err(|e| Error::io(self.path(f), e))?;
            let mut h = Sha256::new();
            h.update(&bytes);
            entries.insert(f.clone(), serde_json::Value::String(hex::encode(h.finalize())));
        }
        let manifest = serde_json::json!({
            "command": command,
            "config_hash": self.hash,
            "files": entries,
        });
        let p = self.path("manifest.json");
        fs::write(&p, serde_json::to_string_pretty(&manifest).expect("json"))
            .map_err(|e| Error::io(&p, e))?;
        Ok(self.dir)
    }
}

/// Both domains and their sampled corpora.
pub struct DomainData {
    pub spec_g: DomainSpec,
    pub spec_i: DomainSpec,
    pub general: ParallelCorpus,
    pub indomain: ParallelCorpus,
}

pub fn build_domains(cfg: &ExperimentConfig) -> Result<DomainData> {
    let d = &cfg.domains;
    let (mut spec_g, mut spec_i) = make_domain_pair(d.shared_seed, d.overlap, d.vocab_size)?;
    let len = LengthRange {
        min: d.length_min,
        max: d.length_max,
    };
    spec_g.len = len;
    spec_i.len = len;
    spec_i.reorder = d.indomain_reorder;
    let general = sample_with_splits(
        &spec_g,
        SplitSizes {
            train: d.general.train,
            dev: d.general.dev,
            test: d.general.test,
        },
        d.general.seed,
    )?;
    let indomain = sample_with_splits(
        &spec_i,
        SplitSizes {
            train: d.indomain.train,
            dev: d.indomain.dev,
            test: d.indomain.test,
        },
        d.indomain.seed,
    )?;
    Ok(DomainData {
        spec_g,
        spec_i,
        general,
        indomain,
    })
}

/// Stage 1 of every experiment: train on the general domain, keep the
/// best-G-dev checkpoint.
pub fn train_general(cfg: &ExperimentConfig, data: &DomainData) -> Result<(Model, crate::trainer::TrainLog)> {
    let mc = cfg.model_config(data.general.src_vocab_size(), data.general.tgt_vocab_size());
    let mut model = Model::build(mc)?;
    let evals = [
        EvalDomain {
            label: "G".into(),
            corpus: &data.general,
        },
        EvalDomain {
            label: "I".into(),
            corpus: &data.indomain,
        },
    ];
    let outcome = train(&mut model, &data.general, &evals, &cfg.train_opts(true))?;
    Ok((outcome.best, outcome.log))
}

/// Stage 2: vanilla continual training on the in-domain data.
pub fn continual_vanilla(
    cfg: &ExperimentConfig,
    data: &DomainData,
    checkpoint: &Model,
) -> Result<(Model, crate::trainer::TrainLog)> {
    let mut model = checkpoint.clone();
    let evals = [
        EvalDomain {
            label: "I".into(),
            corpus: &data.indomain,
        },
        EvalDomain {
            label: "G".into(),
            corpus: &data.general,
        },
    ];
    let outcome = continual_train(
        &mut model,
        &data.indomain,
        &evals,
        &FreezeSpec::none(),
        &cfg.continual_opts(true),
    )?;
    Ok((model, outcome.log))
}

fn forgetting_csv(general: &crate::trainer::TrainLog, continual: &crate::trainer::TrainLog) -> String {
    let cols = ["G_dev", "I_dev", "G_test", "I_test"];
    let mut out = String::from("phase,epoch,train_loss,dev_loss");
    for c in cols {
        let _ = write!(out, ",bleu_{c}");
    }
    out.push('\n');
    for (phase, log) in [("general", general), ("continual", continual)] {
        for rec in &log.epochs {
            let _ = write!(out, "{phase},{},{}", rec.epoch, rec.train_loss);
            match rec.dev_loss {
                Some(l) => {
                    let _ = write!(out, ",{l}");
                }
                None => out.push(','),
            }
            for c in cols {
                match rec.bleu.get(c) {
                    Some(b) => {
                        let _ = write!(out, ",{b}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Vanilla forgetting run: per-epoch dual-domain BLEU across both phases.
pub fn run_forgetting(cfg: &ExperimentConfig, dir: PathBuf) -> Result<PathBuf> {
    let mut w = RunWriter::new(dir, cfg)?;
    let data = build_domains(cfg)?;
    let (general_model, g_log) = train_general(cfg, &data)?;
    let (final_model, c_log) = continual_vanilla(cfg, &data, &general_model)?;

    w.write_csv("forgetting.csv", &forgetting_csv(&g_log, &c_log))?;
    w.write_json("general_log.json", &g_log)?;
    w.write_json("continual_log.json", &c_log)?;
    general_model.save(&w.path("general.flc"))?;
    w.note_file("general.flc");
    final_model.save(&w.path("final.flc"))?;
    w.note_file("final.flc");
    w.finish("forgetting")
}

/// Freeze/update sweep over the configured grouping.
pub fn run_modules(cfg: &ExperimentConfig, dir: PathBuf) -> Result<PathBuf> {
    let mut w = RunWriter::new(dir, cfg)?;
    let data = build_domains(cfg)?;
    let (general_model, _) = train_general(cfg, &data)?;
    let table = run_strategy_sweep(
        &general_model,
        &data.general,
        &data.indomain,
        cfg.continual.grouping,
        &cfg.continual_opts(true),
        cfg.grouping_opts(),
    )?;
    w.write_csv("modules.csv", &table.to_csv())?;
    w.write_json("modules.json", &table)?;
    general_model.save(&w.path("general.flc"))?;
    w.note_file("general.flc");
    w.finish("modules")
}

fn parse_matrices(cfg: &ExperimentConfig) -> Result<Vec<ParamTag>> {
    cfg.analysis.matrices.iter().map(|m| m.parse()).collect()
}

fn export_all_heatmaps(
    w: &mut RunWriter,
    model: &Model,
    imp: &ImportanceMap,
    tags: &[ParamTag],
) -> Result<()> {
    for tag in tags {
        let shape = tag_shape(model.config(), tag);
        let (png, csv) = heatmap_paths(&w.dir, &imp.domain, tag);
        export_heatmap(imp, &shape, tag, &png, &csv)?;
        let png_name = png.file_name().unwrap().to_string_lossy().into_owned();
        let csv_name = csv.file_name().unwrap().to_string_lossy().into_owned();
        w.note_file(&png_name);
        w.note_file(&csv_name);
    }
    Ok(())
}

/// Importance maps for both domains plus heatmaps of the configured matrices.
pub fn run_importance(cfg: &ExperimentConfig, dir: PathBuf) -> Result<PathBuf> {
    let mut w = RunWriter::new(dir, cfg)?;
    let data = build_domains(cfg)?;
    let tags = parse_matrices(cfg)?;
    let (general_model, _) = train_general(cfg, &data)?;
    let imp_g = accumulate_importance(&general_model, data.general.train(), cfg.analysis.t_limit, "G")?;
    let (indomain_model, _) = continual_vanilla(cfg, &data, &general_model)?;
    let imp_i = accumulate_importance(&indomain_model, data.indomain.train(), cfg.analysis.t_limit, "I")?;

    imp_g.save(&w.path("importance_G.flc"))?;
    w.note_file("importance_G.flc");
    imp_i.save(&w.path("importance_I.flc"))?;
    w.note_file("importance_I.flc");
    export_all_heatmaps(&mut w, &general_model, &imp_g, &tags)?;
    export_all_heatmaps(&mut w, &indomain_model, &imp_i, &tags)?;

    // Per-matrix rank correlation between the two maps.
    let mut rho = serde_json::Map::new();
    for tag in &tags {
        let r = crate::forensics::spearman(imp_g.get(tag)?, imp_i.get(tag)?);
        rho.insert(tag.to_string(), serde_json::json!(r));
    }
    w.write_json("importance_correlation.json", &serde_json::Value::Object(rho))?;
    w.finish("importance")
}

/// Erasure curves (both orderings) for every configured matrix on the
/// general-domain model and test set.
pub fn run_erasure(cfg: &ExperimentConfig, dir: PathBuf) -> Result<PathBuf> {
    let mut w = RunWriter::new(dir, cfg)?;
    let data = build_domains(cfg)?;
    let tags = parse_matrices(cfg)?;
    let (general_model, _) = train_general(cfg, &data)?;
    let imp_g = accumulate_importance(&general_model, data.general.train(), cfg.analysis.t_limit, "G")?;
    let eval_n = cfg.analysis.erasure_eval.min(data.general.test().len());
    let eval_pairs = &data.general.test()[..eval_n];
    let eval_label = format!("G-test[..{eval_n}]");

    let mut curves: Vec<ErasureCurve> = Vec::new();
    for tag in &tags {
        for order in [EraseOrder::Descending, EraseOrder::Ascending] {
            let curve = erase_and_eval(
                &general_model,
                &imp_g,
                tag,
                order,
                &cfg.analysis.fractions,
                eval_pairs,
                cfg.analysis.decode_max_len,
                &eval_label,
            )?;
            let name = format!(
                "erasure_{}_{}.csv",
                tag.to_string().replace('.', "_"),
                match order {
                    EraseOrder::Descending => "descending",
                    EraseOrder::Ascending => "ascending",
                }
            );
            w.write_csv(&name, &curve.to_csv())?;
            curves.push(curve);
        }
    }
    w.write_json("erasure.json", &curves)?;
    imp_g.save(&w.path("importance_G.flc"))?;
    w.note_file("importance_G.flc");
    w.finish("erasure")
}

/// Importance-decile drift between the general checkpoint and the
/// continually trained model.
pub fn run_drift(cfg: &ExperimentConfig, dir: PathBuf) -> Result<PathBuf> {
    let mut w = RunWriter::new(dir, cfg)?;
    let data = build_domains(cfg)?;
    let (general_model, _) = train_general(cfg, &data)?;
    let imp_g = accumulate_importance(&general_model, data.general.train(), cfg.analysis.t_limit, "G")?;
    let (indomain_model, _) = continual_vanilla(cfg, &data, &general_model)?;
    let report = decile_drift(&general_model, &indomain_model, &imp_g)?;
    w.write_csv("drift.csv", &report.to_csv())?;
    w.write_json("drift.json", &report)?;
    w.finish("drift")
}

/// Dispatch by subcommand name (shared by the CLI and the C ABI).
pub fn run_command(command: &str, cfg: &ExperimentConfig, overwrite: bool) -> Result<PathBuf> {
    let dir = prepare_run_dir(cfg, command, overwrite)?;
    match command {
        "forgetting" => run_forgetting(cfg, dir),
        "modules" => run_modules(cfg, dir),
        "importance" => run_importance(cfg, dir),
        "erasure" => run_erasure(cfg, dir),
        "drift" => run_drift(cfg, dir),
        other => Err(Error::config(format!(
            "unknown command '{other}'; expected forgetting|modules|importance|erasure|drift"
        ))),
    }
}
