use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use o2sif::emulator::EmulatorModel;
use o2sif::forward::SceneCube;
use o2sif::metrics::EvalReport;
use o2sif::pipeline::{self, ExperimentConfig, SceneEvaluation};
use o2sif::sfmnn::{AncillaryMode, EpochLoss, SfmnnModel};

use crate::error::{CliError, CliResult};
use crate::layout::{write_text, Layout, SceneEntry, ScenesManifest};
use crate::maps::export_map;
use crate::{Axis, Stage};

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(csv::Writer::from_path(path)?)
}

fn scene_entry(file: String, role: &str, seed: u64, scene: &SceneCube) -> SceneEntry {
    let f = scene.truth_f740();
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    SceneEntry {
        file,
        role: role.into(),
        seed,
        acquisition: scene.u,
        height: scene.height,
        width: scene.width,
        patch_size: scene.patch_size,
        mean_f740: mean,
        std_f740: var.sqrt(),
        min_f740: f.iter().copied().fold(f64::INFINITY, f64::min),
        max_f740: f.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        fraction_zero_f740: f.iter().filter(|&&v| v == 0.0).count() as f64 / n,
    }
}

pub fn simulate(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<()> {
    let bench = pipeline::simulate_benchmark(cfg)?;
    let dir = layout.scenes_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let s = &cfg.scenes;
    let mut entries = Vec::new();
    for (i, scene) in bench.train.iter().enumerate() {
        let file = format!("train_{i:03}.sifc");
        scene.save(&dir.join(&file))?;
        entries.push(scene_entry(file, "train", s.train_seed(i), scene));
    }
    for (j, scene) in bench.held_out.iter().enumerate() {
        let file = format!("held_out_{j:03}.sifc");
        scene.save(&dir.join(&file))?;
        entries.push(scene_entry(file, "held_out", s.held_out_seed(j), scene));
    }
    let manifest = ScenesManifest { scenes: entries };
    let text = toml::to_string(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
    write_text(&layout.scenes_manifest(), &text)?;
    eprintln!("wrote {} scenes to {}", manifest.scenes.len(), dir.display());
    Ok(())
}

pub fn fit_emulator(cfg: &ExperimentConfig, layout: &Layout, threshold: Option<f64>) -> CliResult<()> {
    let threshold = threshold.unwrap_or(cfg.emulator.max_mean_rel);
    if !(threshold > 0.0) {
        return Err(CliError::Config(format!("threshold must be positive, got {threshold}")));
    }
    let fit = pipeline::fit_experiment_emulator(cfg)?;
    let dir = layout.emulator_dir();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    fit.model.save(&layout.emulator_file())?;
    let r = &fit.report;
    let mut summary = fit.model.summary(Some(&fit.stats));
    summary.push_str(&format!(
        "held-out samples: {}\nheld-out mean rel error: {:.6e}\nheld-out p95 rel error: {:.6e}\n\
         held-out mean abs error: {:.6e}\nfluorescence signal (f740 = 1): {:.6e}\nerror-to-signal ratio: {:.6e}\n",
        r.n_samples, r.mean_rel, r.p95_rel, r.mean_abs, r.fluorescence_signal, r.signal_ratio
    ));
    write_text(&dir.join("summary.txt"), &summary)?;
    let mut w = csv_writer(&dir.join("error_report.csv"))?;
    w.write_record(["band_center", "mean_abs", "p95_abs", "mean_rel", "p95_rel"])?;
    for b in &r.per_band {
        w.write_record([b.center, b.mean_abs, b.p95_abs, b.mean_rel, b.p95_rel].map(|v| v.to_string()))?;
    }
    w.write_record([
        "all".to_string(),
        r.mean_abs.to_string(),
        r.p95_abs.to_string(),
        r.mean_rel.to_string(),
        r.p95_rel.to_string(),
    ])?;
    w.flush().map_err(|e| CliError::io(&dir, e))?;
    eprintln!(
        "emulator: held-out mean relative error {:.4}% (threshold {:.4}%), error-to-signal ratio {:.4}",
        100.0 * r.mean_rel,
        100.0 * threshold,
        r.signal_ratio
    );
    if !fit.passes(threshold) {
        return Err(CliError::Threshold(format!(
            "held-out mean relative error {:.6e} exceeds {threshold:.6e}",
            r.mean_rel
        )));
    }
    Ok(())
}

fn scenes_only(split: &[(String, SceneCube)]) -> Vec<SceneCube> {
    split.iter().map(|(_, s)| s.clone()).collect()
}

fn pretrained_model(cfg: &ExperimentConfig, emulator: Arc<EmulatorModel>, train: &[SceneCube]) -> CliResult<(SfmnnModel, o2sif::sfmnn::FinitReport)> {
    let mut model = pipeline::build_model(cfg, emulator, train)?;
    let report = pipeline::pretrain(cfg, &mut model)?;
    Ok((model, report))
}

pub fn pretrain(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<()> {
    let (train, _) = layout.load_split()?;
    let (emulator, _) = layout.load_emulator()?;
    let (model, report) = pretrained_model(cfg, emulator, &scenes_only(&train))?;
    let dir = layout.stage_dir("pretrain");
    layout.save_checkpoint(&dir, "pretrain", &model, 0)?;
    let mut w = csv_writer(&dir.join("finit_history.csv"))?;
    w.write_record(["epoch", "train_mse"])?;
    for (e, v) in report.history.iter().enumerate() {
        w.write_record([e.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(&dir, e))?;
    write_text(
        &dir.join("finit_report.toml"),
        &format!(
            "train_rmse = {}\nvalidation_rmse = {}\nlabel_std = {}\n",
            report.train_rmse, report.validation_rmse, report.label_std
        ),
    )?;
    eprintln!(
        "initial predictor: validation RMSE {:.4} (label std {:.4})",
        report.validation_rmse, report.label_std
    );
    Ok(())
}

const LOSS_COLUMNS: [&str; 9] = ["epoch", "res", "res_f", "m", "df", "n", "c", "total", "rel_recon"];

fn loss_row(l: &EpochLoss) -> [String; 9] {
    let v = &l.values;
    [
        l.epoch.to_string(),
        v.res.to_string(),
        v.res_f.to_string(),
        v.m.to_string(),
        v.df.to_string(),
        v.n.to_string(),
        v.c.to_string(),
        v.total.to_string(),
        v.rel_recon.to_string(),
    ]
}

/// Fresh model for `cfg` carrying the initial predictor of `base`.
fn model_from_pretrained(cfg: &ExperimentConfig, base: &SfmnnModel, train: &[SceneCube]) -> CliResult<SfmnnModel> {
    if base.mode != cfg.ancillary_mode {
        return Err(CliError::Config(format!(
            "pretrained checkpoint uses ancillary mode {:?} but the config selects {:?}; rerun pretrain",
            base.mode, cfg.ancillary_mode
        )));
    }
    let mut model = pipeline::build_model(cfg, base.emulator.clone(), train)?;
    model.finit = base.finit.clone();
    Ok(model)
}

/// Trains `model` and writes its checkpoint and loss history into `dir`.
fn train_into(cfg: &ExperimentConfig, layout: &Layout, model: &mut SfmnnModel, train: &[SceneCube], dir: &Path, verbose: bool) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut w = csv_writer(&dir.join("loss_history.csv"))?;
    w.write_record(LOSS_COLUMNS)?;
    let mut write_err = None;
    let result = pipeline::train_model(cfg, model, train, |l| {
        if let Err(e) = w.write_record(loss_row(l)) {
            write_err.get_or_insert(e);
        }
        if verbose {
            eprintln!(
                "epoch {:>4}: total {:.5e}  rel reconstruction {:.4}%",
                l.epoch,
                l.values.total,
                100.0 * l.values.rel_recon
            );
        }
    });
    w.flush().map_err(|e| CliError::io(dir, e))?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let report = result?;
    layout.save_checkpoint(dir, "train", model, report.history.len())
}

pub fn train(cfg: &ExperimentConfig, layout: &Layout) -> CliResult<()> {
    let (train, _) = layout.load_split()?;
    let train = scenes_only(&train);
    let (_, base) = layout.load_checkpoint(&layout.stage_dir("pretrain"), "pretrain")?;
    let mut model = model_from_pretrained(cfg, &base, &train)?;
    train_into(cfg, layout, &mut model, &train, &layout.stage_dir("train"), true)
}

const SUMMARY_COLUMNS: [&str; 14] = [
    "scene",
    "role",
    "estimate",
    "n",
    "r2",
    "mad",
    "r2_bias_corrected",
    "mad_bias_corrected",
    "r2_reflectance_constrained",
    "mae_b_signed",
    "mae_b_abs",
    "mean_rel_reconstruction",
    "bare_mean_abs_f",
    "train_mean_rel_reconstruction",
];

fn summary_rows(scene: &str, role: &str, ev: &SceneEvaluation, train_recon: f64) -> Vec<Vec<String>> {
    [("f740", &ev.full), ("f_init", &ev.initial)]
        .into_iter()
        .map(|(name, r)| {
            let mut row = vec![scene.to_string(), role.to_string(), name.to_string(), r.n.to_string()];
            row.extend(
                [
                    r.r2,
                    r.mad,
                    r.r2_bc,
                    r.mad_bc,
                    r.r2_a,
                    r.mae_b_signed,
                    r.mae_b_abs,
                    ev.mean_rel_reconstruction,
                    ev.bare_mean_abs_f,
                    train_recon,
                ]
                .map(|v| v.to_string()),
            );
            row
        })
        .collect()
}

struct Evaluated {
    rows: Vec<Vec<String>>,
    reports: Vec<EvalReport>,
}

/// Evaluates every scene; maps go to `maps_dir` when given.
fn evaluate_all(
    cfg: &ExperimentConfig,
    model: &SfmnnModel,
    train: &[(String, SceneCube)],
    held: &[(String, SceneCube)],
    maps_dir: Option<&Path>,
) -> CliResult<Evaluated> {
    let train_recon = pipeline::mean_reconstruction(model, &scenes_only(train))?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut index = Vec::new();
    let splits = train.iter().map(|x| ("train", x)).chain(held.iter().map(|x| ("held_out", x)));
    for (role, (label, scene)) in splits {
        let ev = pipeline::evaluate_scene(model, scene, &cfg.bins, label)?;
        rows.extend(summary_rows(label, role, &ev, train_recon));
        if let Some(dir) = maps_dir {
            let truth = scene.truth_f740();
            let layers = [
                ("f740", ev.maps.f740.as_slice()),
                ("f_init", ev.maps.f_init.as_slice()),
                ("rel_error", ev.maps.rel_error.as_slice()),
                ("truth_f740", truth.as_slice()),
            ];
            for (name, values) in layers {
                let stem = format!("{label}_{name}");
                let range = export_map(dir, &stem, values, scene.height, scene.width)?;
                let (lo, hi) = range.map_or((f64::NAN, f64::NAN), |r| (r.min, r.max));
                index.push([stem, scene.height.to_string(), scene.width.to_string(), lo.to_string(), hi.to_string()]);
            }
        }
        reports.push(ev.full);
        reports.push(ev.initial);
    }
    if let Some(dir) = maps_dir {
        let mut w = csv_writer(&dir.join("index.csv"))?;
        w.write_record(["stem", "height", "width", "min", "max"])?;
        for r in &index {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| CliError::io(dir, e))?;
    }
    Ok(Evaluated { rows, reports })
}

fn write_evaluation(dir: &Path, ev: &Evaluated) -> CliResult<()> {
    EvalReport::save_csv(&ev.reports, &dir.join("metrics.csv"))?;
    let mut w = csv_writer(&dir.join("summary.csv"))?;
    w.write_record(SUMMARY_COLUMNS)?;
    for r in &ev.rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| CliError::io(dir, e))?;
    Ok(())
}

pub fn eval(cfg: &ExperimentConfig, layout: &Layout, stage: Stage) -> CliResult<()> {
    let (train, held) = layout.load_split()?;
    let (stage_name, out) = match stage {
        Stage::Pretrain => ("pretrain", layout.root.join("eval_pretrain")),
        Stage::Train => ("train", layout.eval_dir()),
    };
    let (_, model) = layout.load_checkpoint(&layout.stage_dir(stage_name), stage_name)?;
    let maps = out.join("maps");
    fs::create_dir_all(&maps).map_err(|e| CliError::io(&maps, e))?;
    let ev = evaluate_all(cfg, &model, &train, &held, Some(&maps))?;
    write_evaluation(&out, &ev)?;
    for r in ev.rows.iter().filter(|r| r[2] == "f740") {
        eprintln!("{:<14} r2 {:>8}  R2_A {:>8}  MAD {:>8}", r[0], short(&r[4]), short(&r[8]), short(&r[5]));
    }
    Ok(())
}

fn short(v: &str) -> String {
    v.parse::<f64>().map_or(v.to_string(), |x| format!("{x:.4}"))
}

/// One gridsearch run: weight value and ancillary mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub value: f64,
    pub mode: AncillaryMode,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self.mode {
            AncillaryMode::Regularized => "regularized",
            AncillaryMode::AsInput => "as-input",
        }
    }
}

/// Parses gridsearch values; `as-input` maps to weight 0 in as-input mode.
pub fn parse_variants(axis: Axis, values: Option<&[String]>, base: AncillaryMode) -> CliResult<Vec<Variant>> {
    let defaults: Vec<String> = match axis {
        Axis::GammaC => vec!["0".into(), "5000".into()],
        Axis::GammaAot => vec!["as-input".into(), "1".into(), "100".into()],
    };
    let values = values.filter(|v| !v.is_empty()).unwrap_or(&defaults);
    values
        .iter()
        .map(|v| {
            let v = v.trim();
            if v == "as-input" || v == "as_input" {
                return Ok(Variant {
                    value: 0.0,
                    mode: AncillaryMode::AsInput,
                });
            }
            let value: f64 = v
                .parse()
                .map_err(|_| CliError::Config(format!("gridsearch value `{v}` is neither a number nor `as-input`")))?;
            if !(value >= 0.0) || !value.is_finite() {
                return Err(CliError::Config(format!("gridsearch value {value} must be finite and nonnegative")));
            }
            let mode = match axis {
                Axis::GammaC => base,
                Axis::GammaAot => AncillaryMode::Regularized,
            };
            Ok(Variant { value, mode })
        })
        .collect()
}

fn variant_config(cfg: &ExperimentConfig, axis: Axis, v: &Variant) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.ancillary_mode = v.mode;
    match axis {
        Axis::GammaC => c.weights.gamma_c = v.value,
        Axis::GammaAot => c.weights.gamma_aot = v.value,
    }
    c
}

pub fn gridsearch(cfg: &ExperimentConfig, layout: &Layout, axis: Axis, values: Option<&[String]>, jobs: usize) -> CliResult<()> {
    let variants = parse_variants(axis, values, cfg.ancillary_mode)?;
    let (train_split, held) = layout.load_split()?;
    let train = scenes_only(&train_split);
    let (emulator, _) = layout.load_emulator()?;
    let mut bases: BTreeMap<&'static str, SfmnnModel> = BTreeMap::new();
    for v in &variants {
        if !bases.contains_key(v.name()) {
            let c = variant_config(cfg, axis, v);
            eprintln!("pretraining the initial predictor ({})", v.name());
            let (model, _) = pretrained_model(&c, emulator.clone(), &train)?;
            bases.insert(v.name(), model);
        }
    }
    let root = layout.gridsearch_dir();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CliResult<Evaluated>>>> = Mutex::new((0..variants.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(v) = variants.get(i) else { break };
        let c = variant_config(cfg, axis, v);
        let dir = root.join(format!("{}_{i:02}_{}_{}", axis.name(), v.name(), v.value));
        let run = || -> CliResult<Evaluated> {
            let mut model = model_from_pretrained(&c, &bases[v.name()], &train)?;
            train_into(&c, layout, &mut model, &train, &dir, false)?;
            let ev = evaluate_all(&c, &model, &train_split, &held, None)?;
            write_evaluation(&dir, &ev)?;
            Ok(ev)
        };
        let out = run();
        eprintln!(
            "{} = {} ({}): {}",
            axis.name(),
            v.value,
            v.name(),
            if out.is_ok() { "done" } else { "failed" }
        );
        results.lock().expect("result slots")[i] = Some(out);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.min(variants.len()).max(1) {
            s.spawn(worker);
        }
    });
    let results = results.into_inner().expect("result slots");
    let mut w = csv_writer(&root.join(format!("{}.csv", axis.name())))?;
    w.write_record(["axis", "value", "variant", "scene", "role", "estimate", "metric", "metric_value"])?;
    let mut first_err = None;
    for (v, r) in variants.iter().zip(results) {
        match r.expect("every variant runs") {
            Ok(ev) => {
                for row in &ev.rows {
                    for (k, name) in SUMMARY_COLUMNS.iter().enumerate().skip(4) {
                        w.write_record([
                            axis.name(),
                            &v.value.to_string(),
                            v.name(),
                            &row[0],
                            &row[1],
                            &row[2],
                            name,
                            &row[k],
                        ])?;
                    }
                }
            }
            Err(e) => {
                eprintln!("{} = {} ({}) failed: {e}", axis.name(), v.value, v.name());
                first_err.get_or_insert(e);
            }
        }
    }
    w.flush().map_err(|e| CliError::io(&root, e))?;
    first_err.map_or(Ok(()), Err)
}

type Table = Vec<BTreeMap<String, String>>;

fn read_table(path: &Path) -> CliResult<Table> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

const REPORT_METRICS: [&str; 5] = ["r2", "r2_reflectance_constrained", "mad", "mean_rel_reconstruction", "bare_mean_abs_f"];

fn summary_section(title: &str, table: &Table) -> String {
    let mut s = format!("## {title}\n\n| scene | role | estimate | {} |\n|---|---|---|{}\n", REPORT_METRICS.join(" | "), "---|".repeat(REPORT_METRICS.len()));
    for row in table {
        let cells: Vec<String> = REPORT_METRICS.iter().map(|m| short(row.get(*m).map_or("", String::as_str))).collect();
        s.push_str(&format!("| {} | {} | {} | {} |\n", row["scene"], row["role"], row["estimate"], cells.join(" | ")));
    }
    s.push('\n');
    s
}

/// Mean of each metric over held-out scenes (training scenes when none are
/// held out) per (value, variant, estimate).
fn gridsearch_section(title: &str, table: &Table) -> String {
    let has_held = table.iter().any(|r| r["role"] == "held_out");
    let role = if has_held { "held_out" } else { "train" };
    let mut acc: BTreeMap<(String, String, String), BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for r in table.iter().filter(|r| r["role"] == role) {
        let key = (r["value"].clone(), r["variant"].clone(), r["estimate"].clone());
        let v: f64 = r["metric_value"].parse().unwrap_or(f64::NAN);
        let e = acc.entry(key).or_default().entry(r["metric"].clone()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let mut keys: Vec<_> = acc.keys().cloned().collect();
    keys.sort_by(|a, b| {
        let x: f64 = a.0.parse().unwrap_or(f64::NAN);
        let y: f64 = b.0.parse().unwrap_or(f64::NAN);
        x.total_cmp(&y).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let mut s = format!(
        "## {title} ({role} scenes)\n\n| value | variant | estimate | {} |\n|---|---|---|{}\n",
        REPORT_METRICS.join(" | "),
        "---|".repeat(REPORT_METRICS.len())
    );
    for k in keys {
        let m = &acc[&k];
        let cells: Vec<String> = REPORT_METRICS
            .iter()
            .map(|name| m.get(*name).map_or(String::new(), |(sum, n)| format!("{:.4}", sum / *n as f64)))
            .collect();
        s.push_str(&format!("| {} | {} | {} | {} |\n", k.0, k.1, k.2, cells.join(" | ")));
    }
    s.push('\n');
    s
}

pub fn report(layout: &Layout) -> CliResult<()> {
    let mut text = String::from("# o2sif report\n\n");
    let mut found = false;
    for (title, dir) in [("Pretrained model", layout.root.join("eval_pretrain")), ("Trained model", layout.eval_dir())] {
        let path = dir.join("summary.csv");
        if path.exists() {
            text.push_str(&summary_section(title, &read_table(&path)?));
            found = true;
        }
    }
    for axis in [Axis::GammaC, Axis::GammaAot] {
        let path = layout.gridsearch_dir().join(format!("{}.csv", axis.name()));
        if path.exists() {
            text.push_str(&gridsearch_section(&format!("Grid search over {}", axis.name()), &read_table(&path)?));
            found = true;
        }
    }
    if !found {
        return Err(CliError::Config(format!(
            "nothing to report in {}; run `o2sif eval` or `o2sif gridsearch` first",
            layout.root.display()
        )));
    }
    write_text(&layout.root.join("report.md"), &text)?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_default_and_parse() {
        let v = parse_variants(Axis::GammaAot, None, AncillaryMode::Regularized).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[0], Variant { value: 0.0, mode: AncillaryMode::AsInput });
        assert!(v[1..].iter().all(|x| x.mode == AncillaryMode::Regularized));
        let v = parse_variants(Axis::GammaC, Some(&["5e3".to_string()]), AncillaryMode::AsInput).unwrap();
        assert_eq!(v, vec![Variant { value: 5e3, mode: AncillaryMode::AsInput }]);
        assert!(parse_variants(Axis::GammaC, Some(&["-1".to_string()]), AncillaryMode::Regularized).is_err());
        assert!(parse_variants(Axis::GammaC, Some(&["abc".to_string()]), AncillaryMode::Regularized).is_err());
    }

    #[test]
    fn variant_config_sets_axis_weight() {
        let cfg = ExperimentConfig::default();
        let v = Variant { value: 7.0, mode: AncillaryMode::Regularized };
        assert_eq!(variant_config(&cfg, Axis::GammaAot, &v).weights.gamma_aot, 7.0);
        assert_eq!(variant_config(&cfg, Axis::GammaC, &v).weights.gamma_c, 7.0);
    }
}
