use std::fs;
use std::path::{Path, PathBuf};

use ebpl_core::experiment::{
    evaluate as evaluate_model, pl_accuracy_svg, prepare_dataset, read_predictions, read_run,
    run_method, summarize, summary_csv, summary_table, write_run, Manifest, Method, MANIFEST_FILE,
};
use ebpl_core::hybrid_model::HybridModel;
use ebpl_core::metrics::{ece, reliability_svg};

use crate::config::Settings;
use crate::CliError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body).map_err(io_err(path))
}

pub fn run_dir(root: &Path, method: Method, seed: u64) -> PathBuf {
    root.join("runs")
        .join(method.slug())
        .join(format!("seed-{seed}"))
}

pub fn prepare(s: &Settings) -> Result<(), CliError> {
    let dir = s.output.join("data");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for &seed in &s.seeds {
        let data = prepare_dataset(&s.experiment, seed)?;
        let path = dir.join(format!("seed-{seed}.json"));
        data.save(&path)?;
        println!(
            "seed {seed}: labeled {}, unlabeled {}, validation {}, test {}, digest {} -> {}",
            data.labeled.len(),
            data.unlabeled.len(),
            data.validation.len(),
            data.test.len(),
            &data.digest()?[..16],
            path.display()
        );
    }
    Ok(())
}

/// Clears a previous run in `dir` so no stale artifact survives. Refuses to
/// touch a non-empty directory that is not a run.
fn reset_run_dir(dir: &Path) -> Result<(), CliError> {
    if !dir.exists() {
        return Ok(());
    }
    if dir.join(MANIFEST_FILE).is_file() {
        return fs::remove_dir_all(dir).map_err(io_err(dir));
    }
    let empty = fs::read_dir(dir).map_err(io_err(dir))?.next().is_none();
    if empty {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{} exists and is not a run directory; refusing to overwrite",
            dir.display()
        )))
    }
}

fn train_one(s: &Settings, method: Method, seed: u64) -> Result<Manifest, CliError> {
    let data = prepare_dataset(&s.experiment, seed)?;
    log::info!("{} seed {seed}: training", method.slug());
    let run = run_method(&s.experiment, &data, method, seed)?;
    let dir = run_dir(&s.output, method, seed);
    reset_run_dir(&dir)?;
    let manifest = write_run(&dir, &s.experiment, &data, &run)?;
    // validate what was just written
    read_run(&dir)?;
    let m = &manifest.metrics;
    println!(
        "{} seed {seed}: accuracy {:.4}, F-score {:.4}, ECE {:.4} -> {}",
        method.slug(),
        m.accuracy,
        m.f_score,
        m.ece,
        dir.display()
    );
    Ok(manifest)
}

pub fn train(s: &Settings, method: Method) -> Result<(), CliError> {
    for &seed in &s.seeds {
        train_one(s, method, seed)?;
    }
    Ok(())
}

pub fn ablate(s: &Settings) -> Result<(), CliError> {
    for &seed in &s.seeds {
        for method in Method::ALL {
            train_one(s, method, seed)?;
        }
    }
    report(&[s.output.join("runs")], &s.output.join("report"))
}

/// Run directories under each path; a path holding a manifest is a run itself.
fn discover(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
        if dir.join(MANIFEST_FILE).is_file() {
            out.push(dir.to_path_buf());
            return Ok(());
        }
        let mut children: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        children.sort();
        for c in children {
            walk(&c, out)?;
        }
        Ok(())
    }
    let mut out = Vec::new();
    for p in paths {
        if !p.is_dir() {
            return Err(CliError::Validation(format!(
                "{} is not a directory",
                p.display()
            )));
        }
        walk(p, &mut out)?;
    }
    if out.is_empty() {
        return Err(CliError::Validation("no completed runs found".into()));
    }
    Ok(out)
}

pub fn evaluate(paths: &[PathBuf]) -> Result<(), CliError> {
    let mut mismatches = Vec::new();
    for dir in discover(paths)? {
        let (manifest, _) = read_run(&dir)?;
        let model = HybridModel::load_checkpoint(&dir.join("best_model.json"))?;
        let data = prepare_dataset(&manifest.config, manifest.seed)?;
        if data.digest()? != manifest.dataset_digest {
            mismatches.push(format!(
                "{}: dataset digest differs from the manifest",
                dir.display()
            ));
            continue;
        }
        let part = if manifest.evaluated_on == "test" {
            &data.test
        } else {
            &data.validation
        };
        let eval = evaluate_model(&model, part, manifest.config.bins())?;
        let r = &eval.report;
        let m = &manifest.metrics;
        let same = (r.accuracy - m.accuracy).abs() < 1e-12
            && (r.macro_f_score - m.f_score).abs() < 1e-12
            && (r.ece - m.ece).abs() < 1e-12;
        println!(
            "{} seed {} ({}): accuracy {:.4}, F-score {:.4}, ECE {:.4} {}",
            manifest.method.slug(),
            manifest.seed,
            manifest.evaluated_on,
            r.accuracy,
            r.macro_f_score,
            r.ece,
            if same { "ok" } else { "MISMATCH" }
        );
        if !same {
            mismatches.push(format!(
                "{}: metrics differ from the manifest",
                dir.display()
            ));
        }
    }
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(mismatches.join("; ")))
    }
}

pub fn report(paths: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let dirs = discover(paths)?;
    let mut manifests = Vec::new();
    for dir in &dirs {
        manifests.push(read_run(dir)?.0);
    }
    let rows = summarize(&manifests);
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("summary.csv"), &summary_csv(&rows))?;
    let table = summary_table(&rows);
    write_file(&out.join("summary.md"), &table)?;
    write_file(&out.join("pl_accuracy.svg"), &pl_accuracy_svg(&rows))?;
    // one reliability diagram per method, pooled over seeds
    for row in &rows {
        let mut records = Vec::new();
        let mut bins = None;
        for (dir, m) in dirs
            .iter()
            .zip(&manifests)
            .filter(|(_, m)| m.method == row.method)
        {
            let b = m.config.bins();
            if *bins.get_or_insert(b) != b {
                return Err(CliError::Validation(format!(
                    "{}: runs use different bin counts",
                    row.method.slug()
                )));
            }
            records.extend(read_predictions(dir)?);
        }
        let rep = ece(&records, bins.expect("at least one run per row"))?;
        let title = format!("{} ({} seeds)", row.method.label(), row.seeds.len());
        write_file(
            &out.join(format!("reliability-{}.svg", row.method.slug())),
            &reliability_svg(&rep, &title),
        )?;
    }
    print!("{table}");
    println!("{} runs summarized -> {}", manifests.len(), out.display());
    Ok(())
}
