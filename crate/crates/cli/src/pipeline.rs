//! Stage orchestration over one artifact tree.
//!
//! Every seed owns a directory under the output root with a manifest
//! recording which stages completed under which config hash. A stage whose
//! manifest entry is current and whose artifact files exist is skipped, so
//! re-running any subcommand is cheap and idempotent; `--force` rebuilds
//! the requested stage (and only it). A failed stage leaves whatever it
//! already wrote on disk for inspection and records nothing, so the next
//! run redoes it from its inputs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fuselab::augment::{
    compare_generators, window_condition, Bootstrap, DiffusionModel, DiffusionSampler,
    GaussianFit, GeneratorReport, ResidualGenerator,
};
use fuselab::bench::{
    ablate, prepare_from_log, run_akf_method, run_uwb_only, score_bilstm, score_fusion,
    train_residual_model, AblationRow, Method, MethodRun, SeedRun,
};
use fuselab::bilstm::{self, BilstmNet};
use fuselab::eval::{
    cdf_plot_data, gate_plot_data, series_plot_data, table_csv, table_markdown, ErrorReport,
};
use fuselab::fusionnet::{self, EpochStats, FusionNet};
use fuselab::imuprep::integrate;
use fuselab::jsonl;
use fuselab::neural::Checkpoint;
use fuselab::sim::{generate, MeasurementLog, PosSample, Scenario};
use fuselab::{augment::DganAugmentor, Vec3};

use crate::config::ResolvedConfig;

/// One pipeline stage as addressed from the command line. Train and infer
/// carry the learned estimator they apply to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Trilaterate,
    ImuIntegrate,
    FuseAkf,
    Train(Method),
    Infer(Method),
    Augment,
    Evaluate,
    Ablate,
    Report,
}

const MANIFEST: &str = "manifest.json";

/// Per-seed provenance record: the config hash the artifacts were built
/// under and, per completed stage, the files it wrote (relative to the
/// seed directory). A hash mismatch on load invalidates every entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    stages: BTreeMap<String, Vec<String>>,
}

impl Manifest {
    fn load_or_new(path: &Path, config_hash: &str, seed: u64) -> Result<Manifest> {
        if path.exists() {
            let found: Manifest = jsonl::read_json_file(path)
                .with_context(|| format!("reading {}", path.display()))?;
            if found.config_hash == config_hash && found.seed == seed {
                return Ok(found);
            }
        }
        Ok(Manifest {
            config_hash: config_hash.to_string(),
            seed,
            stages: BTreeMap::new(),
        })
    }

    fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        jsonl::write_json_file(path, self)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Error report wrapped with its provenance stamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StampedReport {
    pub config_hash: String,
    pub seed: u64,
    pub report: ErrorReport,
}

/// Fitted bias correction with its provenance stamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StampedBias {
    pub config_hash: String,
    pub seed: u64,
    /// Constant correction term, m/s^2 per body axis.
    pub a0: [f64; 3],
    /// Ramp correction term, m/s^3 per body axis.
    pub a1: [f64; 3],
    /// Endpoint cost after correction.
    pub endpoint_cost: f64,
}

/// Gate regime means without the full time series (that lives in
/// gate.dat).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateSummary {
    pub config_hash: String,
    pub seed: u64,
    pub mean_sparse: Option<f64>,
    pub mean_dense3: Option<f64>,
    pub mean_dense4: Option<f64>,
    /// (visible count, mean gate value, step count) per observed count.
    pub by_count: Vec<(usize, f64, usize)>,
}

/// Generator fidelity scores against the held-out residual set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FidelityReport {
    pub config_hash: String,
    pub seed: u64,
    pub n_holdout: usize,
    pub generators: Vec<GeneratorReport>,
}

/// Ablation grid with its provenance stamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StampedAblation {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

/// Mutable state for one seed's pipeline walk: lazily built shared inputs
/// plus models already in memory, so a chain of stages inside one process
/// never recomputes or reloads what it just produced.
pub struct SeedCtx<'a> {
    cfg: &'a ResolvedConfig,
    seed: u64,
    dir: PathBuf,
    manifest: Manifest,
    log: Option<MeasurementLog>,
    run: Option<SeedRun>,
    diffusion: Option<DiffusionModel>,
    fusion_models: HashMap<Method, FusionNet>,
    bilstm_model: Option<BilstmNet>,
}

impl<'a> SeedCtx<'a> {
    pub fn new(cfg: &'a ResolvedConfig, seed: u64) -> Result<Self> {
        let dir = cfg.seed_dir(seed);
        let manifest = Manifest::load_or_new(&dir.join(MANIFEST), &cfg.config_hash, seed)?;
        Ok(SeedCtx {
            cfg,
            seed,
            dir,
            manifest,
            log: None,
            run: None,
            diffusion: None,
            fusion_models: HashMap::new(),
            bilstm_model: None,
        })
    }

    pub fn ensure(&mut self, stage: Stage, force: bool) -> Result<()> {
        match stage {
            Stage::Simulate => self.simulate(force),
            Stage::Trilaterate => self.trilaterate(force),
            Stage::ImuIntegrate => self.imu_integrate(force),
            Stage::FuseAkf => self.classical(Method::Akf, force),
            Stage::Train(m) => self.train(m, force),
            Stage::Infer(m) => self.infer(m, force),
            Stage::Augment => self.augment(force),
            Stage::Evaluate => self.evaluate(force),
            Stage::Ablate => self.ablate_stage(force),
            Stage::Report => bail!("report aggregates across seeds; it is not a per-seed stage"),
        }
    }

    // ---- shared inputs ----

    fn scenario(&self) -> Scenario {
        let mut s = self.cfg.scenario.clone();
        s.seed = self.seed;
        s
    }

    /// Loads the simulate artifact, producing it first if needed.
    fn log(&mut self) -> Result<()> {
        self.simulate(false)?;
        if self.log.is_none() {
            let path = self.dir.join("log.jsonl");
            self.log = Some(
                MeasurementLog::read_jsonl(&path)
                    .with_context(|| format!("reading {}", path.display()))?,
            );
        }
        Ok(())
    }

    /// Builds (once) everything estimators share: fixes, bias-corrected
    /// acceleration, window sets and the split.
    fn seed_run(&mut self) -> Result<()> {
        if self.run.is_some() {
            return Ok(());
        }
        self.log()?;
        let log = self.log.clone().expect("log loaded above");
        let run = prepare_from_log(&self.scenario(), log, self.cfg.run.bench.window)?;
        self.run = Some(run);
        Ok(())
    }

    // ---- manifest bookkeeping ----

    fn done(&self, stage: &str) -> bool {
        self.manifest
            .stages
            .get(stage)
            .is_some_and(|arts| arts.iter().all(|rel| self.dir.join(rel).exists()))
    }

    fn record(&mut self, stage: &str, artifacts: Vec<String>) -> Result<()> {
        self.manifest.stages.insert(stage.to_string(), artifacts);
        self.manifest.save(&self.dir.join(MANIFEST))
    }

    fn note(&self, stage: &str, what: &str) {
        println!("[seed {}] {stage}: {what}", self.seed);
    }

    fn skip(&self, stage: &str) -> Result<()> {
        self.note(stage, "cached");
        Ok(())
    }

    /// Absolute path for a seed-relative artifact, with parents created.
    fn path_for(&self, rel: &str) -> Result<PathBuf> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(path)
    }

    fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        let path = self.path_for(rel)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Saves a checkpoint with the provenance stamp merged into its meta
    /// block (models read their keys individually, so extras are inert).
    fn save_checkpoint(&self, rel: &str, mut ck: Checkpoint) -> Result<()> {
        if let serde_json::Value::Object(meta) = &mut ck.meta {
            meta.insert(
                "config_hash".to_string(),
                serde_json::Value::String(self.cfg.config_hash.clone()),
            );
            meta.insert("seed".to_string(), serde_json::json!(self.seed));
        }
        let path = self.path_for(rel)?;
        ck.save(&path)
            .with_context(|| format!("writing {}", path.display()))
    }

    // ---- stages ----

    fn simulate(&mut self, force: bool) -> Result<()> {
        if !force && self.done("simulate") {
            return self.skip("simulate");
        }
        let log = generate(&self.scenario())?;
        let path = self.path_for("log.jsonl")?;
        log.write_jsonl(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        self.note(
            "simulate",
            &format!(
                "{} imu, {} uwb, {} ref records -> log.jsonl",
                log.imu.len(),
                log.uwb.len(),
                log.reference.len()
            ),
        );
        self.log = Some(log);
        self.record("simulate", vec!["log.jsonl".to_string()])
    }

    fn trilaterate(&mut self, force: bool) -> Result<()> {
        if !force && self.done("trilaterate") {
            return self.skip("trilaterate");
        }
        self.seed_run()?;
        let run = self.run.as_ref().expect("prepared above");
        let path = self.path_for("fixes.jsonl")?;
        jsonl::write_jsonl(&path, &run.fixes)
            .with_context(|| format!("writing {}", path.display()))?;
        let converged = run.fixes.iter().filter(|f| f.fix.converged).count();
        self.note(
            "trilaterate",
            &format!(
                "{} fixes ({converged} converged) -> fixes.jsonl",
                run.fixes.len()
            ),
        );
        self.record("trilaterate", vec!["fixes.jsonl".to_string()])
    }

    fn imu_integrate(&mut self, force: bool) -> Result<()> {
        if !force && self.done("imu-integrate") {
            return self.skip("imu-integrate");
        }
        self.seed_run()?;
        let run = self.run.as_ref().expect("prepared above");

        let stamped = StampedBias {
            config_hash: self.cfg.config_hash.clone(),
            seed: self.seed,
            a0: run.bias.a0,
            a1: run.bias.a1,
            endpoint_cost: run.bias_cost,
        };
        let bias_path = self.path_for("bias.json")?;
        jsonl::write_json_file(&bias_path, &stamped)
            .with_context(|| format!("writing {}", bias_path.display()))?;

        // corrected dead-reckoned track, thinned to a plottable size
        let p0 = run
            .log
            .reference
            .first()
            .expect("prepare requires reference fixes")
            .position_vec();
        let dr = integrate(
            &run.log.imu,
            &run.bias,
            run.scenario.imu.mount_rotvec,
            p0,
            Vec3::zeros(),
        )?;
        let step = dr.times.len().div_ceil(5000).max(1);
        let samples: Vec<PosSample> = dr
            .times
            .iter()
            .zip(&dr.positions)
            .enumerate()
            .filter(|(k, _)| k % step == 0 || *k == dr.times.len() - 1)
            .map(|(_, (&t, p))| PosSample {
                t,
                position: [p.x, p.y, p.z],
            })
            .collect();
        let dr_path = self.path_for("deadreckon.jsonl")?;
        jsonl::write_jsonl(&dr_path, &samples)
            .with_context(|| format!("writing {}", dr_path.display()))?;

        self.note(
            "imu-integrate",
            &format!(
                "endpoint cost {:.3e} -> bias.json, deadreckon.jsonl",
                run.bias_cost
            ),
        );
        self.record(
            "imu-integrate",
            vec!["bias.json".to_string(), "deadreckon.jsonl".to_string()],
        )
    }

    /// Estimators that need no training: raw multilateration and the
    /// loosely coupled filter. The stage name is the method name.
    fn classical(&mut self, method: Method, force: bool) -> Result<()> {
        let stage = method.name();
        if !force && self.done(stage) {
            return self.skip(stage);
        }
        self.seed_run()?;
        let run = self.run.as_ref().expect("prepared above");
        let m = match method {
            Method::UwbOnly => run_uwb_only(run)?,
            Method::Akf => run_akf_method(run, &self.cfg.run.bench.akf)?,
            _ => unreachable!("classical stage only covers uwb-only and akf"),
        };
        let arts = self.write_method_artifacts(method, &m)?;
        self.note(
            stage,
            &format!(
                "rmse {:.3} m, p95 {:.3} m over the test span",
                m.report.rmse, m.report.p95
            ),
        );
        self.record(stage, arts)
    }

    fn train(&mut self, method: Method, force: bool) -> Result<()> {
        let stage = format!("train-{}", method.name());
        if !force && self.done(&stage) {
            return self.skip(&stage);
        }
        if method == Method::FusionNetDgan {
            self.augment(false)?;
        }
        self.seed_run()?;
        let bench = self.cfg.run.bench.clone();
        let seed = self.seed;
        self.note(&stage, "training");
        let (ck, history) = match method {
            Method::Bilstm => {
                let run = self.run.as_ref().expect("prepared above");
                let trained = bilstm::train(&run.bilstm_windows, &bench.bilstm, seed)?;
                let ck = trained.model.to_checkpoint();
                let history = trained.history.clone();
                self.bilstm_model = Some(trained.model);
                (ck, history)
            }
            Method::FusionNet => {
                let run = self.run.as_ref().expect("prepared above");
                let trained = fusionnet::train(&run.fusion_windows, &bench.fusion, seed, None)?;
                let ck = trained.model.to_checkpoint();
                let history = trained.history.clone();
                self.fusion_models.insert(method, trained.model);
                (ck, history)
            }
            Method::FusionNetDgan => {
                let diffusion = self.take_diffusion()?;
                let run = self.run.as_ref().expect("prepared above");
                let mut augmentor =
                    DganAugmentor::new(diffusion, run.scenario.anchors.clone(), seed);
                let trained = fusionnet::train(
                    &run.fusion_windows,
                    &bench.fusion,
                    seed,
                    Some(&mut augmentor),
                )?;
                let ck = trained.model.to_checkpoint();
                let history = trained.history.clone();
                self.fusion_models.insert(method, trained.model);
                (ck, history)
            }
            Method::UwbOnly | Method::Akf => {
                bail!(
                    "`{}` is not a trained estimator; run fuse-akf or evaluate instead",
                    method.name()
                )
            }
        };
        let model_rel = format!("{}/model.json", method.name());
        let hist_rel = format!("{}/history.csv", method.name());
        self.save_checkpoint(&model_rel, ck)?;
        self.write_text(&hist_rel, &history_csv(&history))?;
        self.note(&stage, &format!("{} epochs -> {model_rel}", history.len()));
        self.record(&stage, vec![model_rel, hist_rel])
    }

    fn infer(&mut self, method: Method, force: bool) -> Result<()> {
        let stage = format!("infer-{}", method.name());
        self.train(method, false)?;
        if !force && self.done(&stage) {
            return self.skip(&stage);
        }
        self.seed_run()?;
        let m = match method {
            Method::Bilstm => {
                self.ensure_bilstm_model()?;
                let run = self.run.as_ref().expect("prepared above");
                let model = self.bilstm_model.as_ref().expect("loaded above");
                score_bilstm(run, model)?
            }
            Method::FusionNet | Method::FusionNetDgan => {
                self.ensure_fusion_model(method)?;
                let run = self.run.as_ref().expect("prepared above");
                let model = self.fusion_models.get(&method).expect("loaded above");
                score_fusion(run, model, method)?
            }
            Method::UwbOnly | Method::Akf => {
                bail!(
                    "`{}` has no checkpoint to infer from; run fuse-akf or evaluate instead",
                    method.name()
                )
            }
        };
        let arts = self.write_method_artifacts(method, &m)?;
        self.note(
            &stage,
            &format!(
                "rmse {:.3} m, p95 {:.3} m over the test span",
                m.report.rmse, m.report.p95
            ),
        );
        self.record(&stage, arts)
    }

    fn augment(&mut self, force: bool) -> Result<()> {
        if !force && self.done("augment") {
            return self.skip("augment");
        }
        self.seed_run()?;
        let run = self.run.as_ref().expect("prepared above");
        let dcfg = &self.cfg.run.bench.diffusion;
        self.note("augment", "training the residual diffusion model");
        let (model, holdout) = train_residual_model(run, dcfg, self.seed)?;

        // score the generator against the held-out residuals, next to a
        // moment-matched normal and an empirical bootstrap
        let holdout_vals: Vec<f64> = holdout.iter().map(|r| r.epsilon).collect();
        if holdout_vals.is_empty() {
            bail!("no held-out residuals; the scenario's validation span has no valid ranges");
        }
        let train_vals: Vec<f64> = {
            let (train_records, _) = fuselab::bench::residual_split(run)?;
            train_records.iter().map(|r| r.epsilon).collect()
        };
        let conditions: Vec<[f64; 2]> = run.fusion_windows[run.split.val.start..]
            .iter()
            .map(window_condition)
            .collect();
        let mut diffusion_gen = DiffusionSampler::new(&model, conditions, self.seed);
        let mut gaussian = GaussianFit::fit(&train_vals, self.seed);
        let mut bootstrap = Bootstrap::new(train_vals.clone(), self.seed);
        let mut generators: Vec<&mut dyn ResidualGenerator> =
            vec![&mut diffusion_gen, &mut gaussian, &mut bootstrap];
        let reports = compare_generators(&holdout_vals, &mut generators, holdout_vals.len());

        let fidelity = FidelityReport {
            config_hash: self.cfg.config_hash.clone(),
            seed: self.seed,
            n_holdout: holdout_vals.len(),
            generators: reports.clone(),
        };
        let fid_path = self.path_for("diffusion/fidelity.json")?;
        jsonl::write_json_file(&fid_path, &fidelity)
            .with_context(|| format!("writing {}", fid_path.display()))?;
        self.write_text("diffusion/holdout.dat", &one_column(&holdout_vals, "held-out ranging residuals (m)"))?;
        let plot_sample = diffusion_gen.sample(holdout_vals.len());
        self.write_text("diffusion/generated.dat", &one_column(&plot_sample, "diffusion-sampled residuals (m)"))?;
        self.save_checkpoint("diffusion/model.json", model.to_checkpoint())?;

        let ks_line = reports
            .iter()
            .map(|r| format!("{} {:.4}", r.name, r.ks))
            .collect::<Vec<_>>()
            .join(", ");
        self.note("augment", &format!("KS to holdout: {ks_line}"));
        self.diffusion = Some(model);
        self.record(
            "augment",
            vec![
                "diffusion/model.json".to_string(),
                "diffusion/fidelity.json".to_string(),
                "diffusion/holdout.dat".to_string(),
                "diffusion/generated.dat".to_string(),
            ],
        )
    }

    fn evaluate(&mut self, force: bool) -> Result<()> {
        let methods = self.cfg.run.methods.clone();
        for &m in &methods {
            self.ensure_method(m, false)?;
        }
        if !force && self.done("evaluate") {
            return self.skip("evaluate");
        }
        let mut reports = Vec::with_capacity(methods.len());
        for &m in &methods {
            reports.push(self.load_report(m)?);
        }
        self.write_text("table.csv", &table_csv(&reports))?;
        self.write_text("table.md", &table_markdown(&reports))?;
        self.note("evaluate", "-> table.csv, table.md");
        self.record(
            "evaluate",
            vec!["table.csv".to_string(), "table.md".to_string()],
        )
    }

    fn ablate_stage(&mut self, force: bool) -> Result<()> {
        if !force && self.done("ablate") {
            return self.skip("ablate");
        }
        self.seed_run()?;
        self.note("ablate", "training the 2x2 decay/gate grid");
        let run = self.run.as_ref().expect("prepared above");
        let rows = ablate(run, &self.cfg.run.bench.fusion, self.seed)?;
        let stamped = StampedAblation {
            config_hash: self.cfg.config_hash.clone(),
            seed: self.seed,
            rows: rows.clone(),
        };
        let path = self.path_for("ablation.json")?;
        jsonl::write_json_file(&path, &stamped)
            .with_context(|| format!("writing {}", path.display()))?;
        self.write_text("ablation.csv", &ablation_csv(&rows))?;
        let summary = rows
            .iter()
            .map(|r| format!("{} {:.3}", r.label, r.report.rmse))
            .collect::<Vec<_>>()
            .join(", ");
        self.note("ablate", &format!("rmse by cell: {summary}"));
        self.record(
            "ablate",
            vec!["ablation.json".to_string(), "ablation.csv".to_string()],
        )
    }

    // ---- helpers ----

    /// Runs whatever produces a method's report: the method itself for
    /// classical estimators, train + infer for learned ones.
    fn ensure_method(&mut self, method: Method, force: bool) -> Result<()> {
        match method {
            Method::UwbOnly | Method::Akf => self.classical(method, force),
            Method::Bilstm | Method::FusionNet | Method::FusionNetDgan => {
                self.infer(method, force)
            }
        }
    }

    /// Hands out the trained diffusion generator, producing it first if
    /// needed. Ownership moves to the caller; the checkpoint on disk
    /// remains the durable copy.
    fn take_diffusion(&mut self) -> Result<DiffusionModel> {
        if let Some(model) = self.diffusion.take() {
            return Ok(model);
        }
        self.augment(false)?;
        if let Some(model) = self.diffusion.take() {
            return Ok(model);
        }
        let path = self.dir.join("diffusion/model.json");
        let ck =
            Checkpoint::load(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(DiffusionModel::from_checkpoint(&ck)?)
    }

    fn ensure_bilstm_model(&mut self) -> Result<()> {
        if self.bilstm_model.is_none() {
            let path = self.dir.join("bilstm/model.json");
            let ck = Checkpoint::load(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            self.bilstm_model = Some(BilstmNet::from_checkpoint(&ck)?);
        }
        Ok(())
    }

    fn ensure_fusion_model(&mut self, method: Method) -> Result<()> {
        if !self.fusion_models.contains_key(&method) {
            let path = self.dir.join(format!("{}/model.json", method.name()));
            let ck = Checkpoint::load(&path)
                .with_context(|| format!("reading {}", path.display()))?;
            self.fusion_models
                .insert(method, FusionNet::from_checkpoint(&ck)?);
        }
        Ok(())
    }

    fn write_method_artifacts(&self, method: Method, m: &MethodRun) -> Result<Vec<String>> {
        let name = method.name();
        let mut arts = vec![
            format!("{name}/estimate.jsonl"),
            format!("{name}/report.json"),
            format!("{name}/cdf.dat"),
            format!("{name}/series.dat"),
        ];
        let est_path = self.path_for(&arts[0])?;
        jsonl::write_jsonl(&est_path, &m.estimate)
            .with_context(|| format!("writing {}", est_path.display()))?;
        let stamped = StampedReport {
            config_hash: self.cfg.config_hash.clone(),
            seed: self.seed,
            report: m.report.clone(),
        };
        let rep_path = self.path_for(&arts[1])?;
        jsonl::write_json_file(&rep_path, &stamped)
            .with_context(|| format!("writing {}", rep_path.display()))?;
        self.write_text(&arts[2], &cdf_plot_data(&m.report))?;
        self.write_text(&arts[3], &series_plot_data(&m.report))?;
        if let Some(gates) = &m.gates {
            let gate_dat = format!("{name}/gate.dat");
            self.write_text(&gate_dat, &gate_plot_data(gates))?;
            let gate_json = format!("{name}/gate.json");
            let summary = GateSummary {
                config_hash: self.cfg.config_hash.clone(),
                seed: self.seed,
                mean_sparse: gates.mean_sparse,
                mean_dense3: gates.mean_dense3,
                mean_dense4: gates.mean_dense4,
                by_count: gates.by_count.clone(),
            };
            let gs_path = self.path_for(&gate_json)?;
            jsonl::write_json_file(&gs_path, &summary)
                .with_context(|| format!("writing {}", gs_path.display()))?;
            arts.push(gate_dat);
            arts.push(gate_json);
        }
        Ok(arts)
    }

    fn load_report(&self, method: Method) -> Result<ErrorReport> {
        let path = self.dir.join(format!("{}/report.json", method.name()));
        let stamped: StampedReport = jsonl::read_json_file(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        Ok(stamped.report)
    }

    fn load_gate_summary(&self, method: Method) -> Result<GateSummary> {
        let path = self.dir.join(format!("{}/gate.json", method.name()));
        jsonl::read_json_file(&path).with_context(|| format!("reading {}", path.display()))
    }
}

fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_metric,lr\n");
    for h in history {
        out.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e}\n",
            h.epoch, h.train_loss, h.val_metric, h.lr
        ));
    }
    out
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("label,use_aoi,use_gate,rmse_m,mae_m,p50_m,p95_m,p99_m\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            r.label,
            r.use_aoi,
            r.use_gate,
            r.report.rmse,
            r.report.mae,
            r.report.p50,
            r.report.p95,
            r.report.p99
        ));
    }
    out
}

fn one_column(values: &[f64], label: &str) -> String {
    let mut out = format!("# {label}\n");
    for v in values {
        out.push_str(&format!("{v:.6}\n"));
    }
    out
}

/// Runs one stage for the given seeds, fanning out across the configured
/// worker threads. Report is the exception: it first brings every config
/// seed up to date, then aggregates single-threaded.
pub fn run_stage(cfg: &ResolvedConfig, stage: Stage, seeds: &[u64], force: bool) -> Result<()> {
    if stage == Stage::Report {
        for_each_seed(cfg, &cfg.run.seeds, |seed| {
            SeedCtx::new(cfg, seed)?.ensure(Stage::Evaluate, false)
        })?;
        return write_report(cfg);
    }
    for_each_seed(cfg, seeds, |seed| {
        SeedCtx::new(cfg, seed)?.ensure(stage, force)
    })
}

/// Seed-level fan-out. Each seed is fully isolated (own directory, own
/// RNG streams), so artifacts do not depend on scheduling. On failures
/// every seed still finishes or fails on its own; the first failure in
/// config order is reported.
fn for_each_seed<F>(cfg: &ResolvedConfig, seeds: &[u64], f: F) -> Result<()>
where
    F: Fn(u64) -> Result<()> + Sync,
{
    let workers = cfg.threads.min(seeds.len()).max(1);
    if workers == 1 {
        for &seed in seeds {
            f(seed).with_context(|| format!("seed {seed}"))?;
        }
        return Ok(());
    }
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(usize, u64, anyhow::Error)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = seeds.get(i) else { break };
                if let Err(err) = f(seed) {
                    failures.lock().expect("no poisoned lock").push((i, seed, err));
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("no poisoned lock");
    failures.sort_by_key(|(i, _, _)| *i);
    match failures.into_iter().next() {
        Some((_, seed, err)) => Err(err.context(format!("seed {seed}"))),
        None => Ok(()),
    }
}

/// Writes the cross-seed comparison: a CSV with one row per method and
/// seed, and a markdown summary with per-seed matrices and seed means.
pub fn write_report(cfg: &ResolvedConfig) -> Result<()> {
    let methods = &cfg.run.methods;
    let seeds = &cfg.run.seeds;

    let mut by_method: Vec<(Method, Vec<ErrorReport>)> = Vec::with_capacity(methods.len());
    for &m in methods {
        let mut rows = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let ctx = SeedCtx::new(cfg, seed)?;
            rows.push(ctx.load_report(m)?);
        }
        by_method.push((m, rows));
    }

    let mut csv = String::from("method,seed,rmse_m,mae_m,p50_m,p95_m,p99_m\n");
    for (m, rows) in &by_method {
        for (seed, r) in seeds.iter().zip(rows) {
            csv.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                m.name(),
                seed,
                r.rmse,
                r.mae,
                r.p50,
                r.p95,
                r.p99
            ));
        }
    }

    let mut md = String::from("# Benchmark report\n\n");
    md.push_str(&format!("- Config hash: `{}`\n", cfg.config_hash));
    md.push_str(&format!(
        "- Seeds: {}\n",
        seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(", ")
    ));
    md.push_str("- All errors in meters over the shared test span.\n\n");

    md.push_str("## Mean over seeds\n\n");
    md.push_str("| Method | RMSE | MAE | P50 | P95 | P99 |\n|---|---|---|---|---|---|\n");
    for (m, rows) in &by_method {
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&ErrorReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
        md.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            m.name(),
            mean(&|r| r.rmse),
            mean(&|r| r.mae),
            mean(&|r| r.p50),
            mean(&|r| r.p95),
            mean(&|r| r.p99)
        ));
    }

    for (title, pick) in [
        ("RMSE by seed", (|r: &ErrorReport| r.rmse) as fn(&ErrorReport) -> f64),
        ("P95 by seed", |r: &ErrorReport| r.p95),
    ] {
        md.push_str(&format!("\n## {title}\n\n"));
        md.push_str("| Method |");
        for seed in seeds {
            md.push_str(&format!(" {seed} |"));
        }
        md.push_str("\n|---|");
        md.push_str(&"---|".repeat(seeds.len()));
        md.push('\n');
        for (m, rows) in &by_method {
            md.push_str(&format!("| {} |", m.name()));
            for r in rows {
                md.push_str(&format!(" {:.4} |", pick(r)));
            }
            md.push('\n');
        }
    }

    // gate regimes, when a fusion method is in the mix
    let gated: Vec<Method> = methods
        .iter()
        .copied()
        .filter(|m| matches!(m, Method::FusionNet | Method::FusionNetDgan))
        .collect();
    if !gated.is_empty() {
        md.push_str("\n## Gate regime means\n\n");
        md.push_str("Mean inertial gate value by visible-anchor regime.\n\n");
        md.push_str("| Method | Seed | <3 anchors | >=4 anchors |\n|---|---|---|---|\n");
        for &m in &gated {
            for &seed in seeds {
                let ctx = SeedCtx::new(cfg, seed)?;
                let g = ctx.load_gate_summary(m)?;
                let fmt = |v: Option<f64>| {
                    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
                };
                md.push_str(&format!(
                    "| {} | {} | {} | {} |\n",
                    m.name(),
                    seed,
                    fmt(g.mean_sparse),
                    fmt(g.mean_dense4)
                ));
            }
        }
    }

    fs::create_dir_all(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join("report.csv");
    fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let md_path = cfg.out_dir.join("report.md");
    fs::write(&md_path, &md).with_context(|| format!("writing {}", md_path.display()))?;
    let root_manifest = serde_json::json!({
        "config_hash": cfg.config_hash,
        "seeds": seeds,
        "artifacts": ["report.csv", "report.md"],
    });
    jsonl::write_json_file(&cfg.out_dir.join(MANIFEST), &root_manifest)?;
    println!(
        "report: {} methods x {} seeds -> {}, {}",
        methods.len(),
        seeds.len(),
        csv_path.display(),
        md_path.display()
    );
    Ok(())
}
