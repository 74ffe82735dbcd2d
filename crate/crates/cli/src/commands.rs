use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use saddle_core::attack::Norm;
use saddle_core::data::Batch;
use saddle_core::eval::{self, EvalReport, Histogram, Named};
use saddle_core::landscape::{self, concentration_stats, linf_expected_sq_distance, maxima_geometry};
use saddle_core::nn::{self, build_spec, init_params, Model};
use saddle_core::report::{self, Echo};
use saddle_core::seed::{self, tag};
use saddle_core::train;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

/// Stream selector for the ε-sweep's attack seed.
const SWEEP_STREAM: u64 = 0x5357;

/// The echo written into every result file. The output directory is left
/// out so that the same experiment run into two directories matches.
fn echo(cfg: &ExperimentConfig) -> Result<Echo> {
    let mut v = serde_json::to_value(cfg)?;
    if let Value::Object(m) = &mut v {
        m.remove("output_dir");
    }
    Ok(Echo::new(cfg.seed, &v)?)
}

fn load_model(path: &Path) -> Result<Model> {
    let (spec, params) = nn::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Model::new(spec, params)?)
}

fn target_model(cfg: &ExperimentConfig) -> Result<Model> {
    match &cfg.model.checkpoint {
        Some(p) => load_model(p),
        None => bail!("model.checkpoint is required for this command"),
    }
}

fn eval_batch(cfg: &ExperimentConfig) -> Result<Batch> {
    Ok(cfg.load_split()?.1.all())
}

fn write_histograms(w: &mut Vec<u8>, named: &[(String, &Histogram)]) -> saddle_core::Result<()> {
    writeln!(w, "series,lo,hi,count")?;
    for (name, h) in named {
        for (lo, hi, c) in h.bins() {
            writeln!(w, "{name},{lo},{hi},{c}")?;
        }
    }
    Ok(())
}

pub fn train(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let out = &cfg.output_dir;
    let echo = echo(cfg)?;
    let (tr, ev) = cfg.load_split()?;
    let spec = build_spec(cfg.model.preset()?, cfg.model.capacity_scale)?;
    ensure!(
        spec.input == tr.image_shape(),
        "preset expects {:?} images, data has {:?}",
        spec.input,
        tr.image_shape()
    );
    let init = init_params(&spec, seed::derive(cfg.seed, &[tag::INIT]))?;
    let (params, log) = train::train(&spec, init, &tr, Some(&ev), &cfg.train)?;
    nn::save_checkpoint(&spec, &params, out.join("model.ckpt"))?;
    report::write_csv(out.join("train_log.csv"), &echo, |w| log.write_steps_csv(w))?;

    let param_count = spec.param_count()?;
    let model = Model::new(spec, params)?;
    let summary = json!({
        "param_count": param_count,
        "n_train": tr.len(),
        "n_eval": ev.len(),
        "steps": log.steps.len(),
        "epochs": log.epochs,
        "eval_natural_accuracy": eval::natural_accuracy(&model, &ev.all())?,
    });
    report::write_json(out.join("train_summary.json"), &echo, &summary)?;
    Ok(vec!["model.ckpt".into(), "train_log.csv".into(), "train_summary.json".into()])
}

pub fn attack(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let out = &cfg.output_dir;
    let echo = echo(cfg)?;
    let target = target_model(cfg)?;
    let source = cfg.model.source_checkpoint.as_deref().map(load_model).transpose()?;
    let batch = eval_batch(cfg)?;
    let budget = cfg.attack.budget()?;
    let t = Named { id: "target", model: &target };
    let s = match &source {
        Some(m) => Named { id: "source", model: m },
        None => t,
    };
    let mut report = EvalReport::default();
    for a in &cfg.attack.attacks {
        let r = eval::robust_accuracy(t, s, &batch, a, &budget)?;
        report.rows.extend(r.rows);
        report.verdicts.extend(r.verdicts);
    }
    let result = json!({
        "natural_accuracy": eval::natural_accuracy(&target, &batch)?,
        "rows": report.rows,
    });
    report::write_json(out.join("eval_report.json"), &echo, &result)?;

    let mut buf = serde_json::to_vec(&json!({"seed": echo.seed, "config": echo.config}))?;
    buf.push(b'\n');
    report.write_verdicts_jsonl(&mut buf)?;
    std::fs::write(out.join("verdicts.jsonl"), buf)?;
    Ok(vec!["eval_report.json".into(), "verdicts.jsonl".into()])
}

pub fn explore(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let out = &cfg.output_dir;
    let echo = echo(cfg)?;
    let model = target_model(cfg)?;
    let batch = eval_batch(cfg)?;
    let budget = cfg.attack.budget()?;
    let lc = &cfg.landscape;
    let mut files = Vec::new();
    let mut examples = Vec::new();
    for &idx in &lc.examples {
        ensure!(idx < batch.len(), "landscape example {idx} outside the {}-example eval split", batch.len());
        let set = landscape::restart_study(&model, &batch, idx, &budget, &lc.attack, lc.restarts)?;
        let stats = concentration_stats(&set.losses)?;
        let geom = maxima_geometry(&set, &budget, lc.max_pairs, seed::derive(cfg.seed, &[tag::PAIRS]))?;

        let mut segments = Vec::new();
        let mut seg_csv = b"pair,i,j,t,loss\n".to_vec();
        for k in 0..lc.segment_pairs.min(set.len() / 2) {
            let (i, j) = (2 * k, 2 * k + 1);
            let p = landscape::segment_probe(
                &model,
                &set.x,
                set.label,
                &set.deltas[i],
                &set.deltas[j],
                lc.segment_points,
                &budget,
                seed::derive(cfg.seed, &[tag::PROBE, idx as u64, k as u64]),
            )?;
            for (t, l) in p.ts.iter().zip(&p.losses) {
                writeln!(seg_csv, "{k},{i},{j},{t},{l}")?;
            }
            segments.push(json!({
                "i": i,
                "j": j,
                "max_at_endpoint": p.max_at_endpoint(0.0),
                "midpoint_loss": p.midpoint_loss,
                "random_point_loss": p.random_point_loss,
            }));
        }

        let names = [
            format!("trajectories_{idx}.csv"),
            format!("pairs_{idx}.csv"),
            format!("segments_{idx}.csv"),
        ];
        report::write_csv(out.join(&names[0]), &echo, |w| set.write_trajectories_csv(w))?;
        report::write_csv(out.join(&names[1]), &echo, |w| geom.write_pairs_csv(w))?;
        report::write_csv(out.join(&names[2]), &echo, |w| {
            w.extend_from_slice(&seg_csv);
            Ok(())
        })?;
        files.extend(names);

        let expected = (budget.norm == Norm::Linf).then(|| linf_expected_sq_distance(set.x.len(), budget.epsilon));
        examples.push(json!({
            "example_index": idx,
            "id": set.example_index,
            "label": set.label,
            "natural_loss": set.natural_loss,
            "stats": stats,
            "mean_distance": geom.mean_distance,
            "mean_angle": geom.mean_angle,
            "pairs": geom.pairs.len(),
            "baseline_mean_distance": geom.baseline_mean_distance,
            "baseline_mean_angle": geom.baseline_mean_angle,
            "baseline_mean_sq_distance": geom.baseline_mean_sq_distance,
            "expected_sq_distance": expected,
            "segments": segments,
        }));
    }
    report::write_json(out.join("explore_summary.json"), &echo, &json!({ "examples": examples }))?;
    files.push("explore_summary.json".into());
    Ok(files)
}

pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let echo = echo(cfg)?;
    let model = target_model(cfg)?;
    let batch = eval_batch(cfg)?;
    let e = &cfg.eval;
    let points = eval::epsilon_sweep(
        &model,
        &batch,
        e.sweep_norm,
        &e.epsilons,
        e.sweep_steps,
        e.sweep_restarts,
        seed::derive(cfg.seed, &[tag::ATTACK, SWEEP_STREAM]),
    )?;
    report::write_csv(cfg.output_dir.join("sweep.csv"), &echo, |w| {
        writeln!(w, "epsilon,alpha,accuracy,correct")?;
        for p in &points {
            writeln!(w, "{},{},{},{}", p.epsilon, p.alpha, p.accuracy, p.correct)?;
        }
        Ok(())
    })?;
    Ok(vec!["sweep.csv".into()])
}

pub fn transfer(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let out = &cfg.output_dir;
    let echo = echo(cfg)?;
    ensure!(cfg.model.models.len() >= 2, "transfer needs at least two entries in model.models");
    let models = cfg
        .model
        .models
        .iter()
        .map(|m| load_model(&m.checkpoint))
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<Named> = cfg
        .model
        .models
        .iter()
        .zip(&models)
        .map(|(c, m)| Named { id: &c.id, model: m })
        .collect();
    let batch = eval_batch(cfg)?;
    let budget = cfg.attack.budget()?;
    let table = eval::transfer_matrix(&named, &cfg.attack.attacks, &budget, &batch)?;
    let natural = named
        .iter()
        .map(|n| Ok((n.id.to_string(), json!(eval::natural_accuracy(n.model, &batch)?))))
        .collect::<Result<serde_json::Map<_, _>>>()?;
    let angles = eval::gradient_angle_histogram(
        &models[0],
        &models[1],
        &batch,
        cfg.eval.histogram_bins,
        seed::derive(cfg.seed, &[tag::PAIRS]),
    )?;
    let result = json!({
        "natural_accuracy": natural,
        "rows": table.rows,
        "gradient_angles": {
            "models": [named[0].id, named[1].id],
            "mean": angles.mean(),
            "baseline_mean": angles.baseline_mean(),
            "skipped": angles.skipped,
        },
    });
    report::write_json(out.join("transfer.json"), &echo, &result)?;
    report::write_csv(out.join("gradient_angles.csv"), &echo, |w| {
        write_histograms(
            w,
            &[
                ("cross_model".into(), &angles.histogram),
                ("baseline".into(), &angles.baseline_histogram),
            ],
        )
    })?;
    Ok(vec!["transfer.json".into(), "gradient_angles.csv".into()])
}

pub fn inspect(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let out = &cfg.output_dir;
    let echo = echo(cfg)?;
    let model = target_model(cfg)?;
    let w = eval::inspect_weights(&model, cfg.eval.histogram_bins)?;
    let result = json!({
        "first_layer_filters": w.first_layer_filters,
        "utilized_filters": w.utilized_filters,
        "thresholding_filters": w.thresholding_filters,
        "dominant_ratio": w.dominant_ratio,
        "class_biases": w.class_biases,
        "bias_spread": w.bias_spread,
    });
    report::write_json(out.join("weights.json"), &echo, &result)?;
    let named: Vec<(String, &Histogram)> = w
        .histograms
        .iter()
        .enumerate()
        .map(|(i, h)| (format!("param{i}"), h))
        .collect();
    report::write_csv(out.join("weight_histograms.csv"), &echo, |buf| write_histograms(buf, &named))?;
    Ok(vec!["weights.json".into(), "weight_histograms.csv".into()])
}
