//! End-to-end runs: data generation, teacher and student training,
//! evaluation, and the artifact manifest.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use crate::actstudent::{closed_loop_train_logged, StudentModel, TrainReport, Variant};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evalreport::{robustness_report, ReportTable};
use crate::metateacher::{train_teacher_logged, TeacherModel};
use crate::nn::{Checkpoint, Predictor};
use crate::pointcloud::{make_dataset, Dataset, Split};
use crate::rng;
use crate::saliency::class_saliency;

pub const MANIFEST: &str = "artifacts.txt";

pub fn dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.out.join("dataset")
}

pub fn student_path(cfg: &ExperimentConfig, variant: Variant) -> PathBuf {
    cfg.checkpoint_dir().join(format!("{}.ckpt", variant.name()))
}

pub fn reports_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.out.join("reports")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = make_dataset(&cfg.dataset_config()?)?;
    ds.save(&dataset_dir(cfg))?;
    write_file(&cfg.paths.out.join("config.toml"), &cfg.to_toml())?;
    write_manifest(cfg)?;
    Ok(ds)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::load(&dataset_dir(cfg))
}

/// Meta-train the teacher on the stored dataset. With `dump_saliency`,
/// per-point saliency of every test cloud is written under
/// `reports/saliency/`.
pub fn train_teacher(cfg: &ExperimentConfig, dump_saliency: bool) -> Result<TeacherModel> {
    let ds = load_dataset(cfg)?;
    let hash = cfg.hash();
    let mut log = create(&reports_dir(cfg).join("teacher_log.txt"))?;
    writeln!(log, "# config_hash {hash}\niteration query_loss")?;
    let result = train_teacher_logged(
        &cfg.teacher_config(),
        &ds.split(Split::Train),
        ds.num_classes(),
        rng::derive_seed(cfg.seed, "teacher", &[]),
        &hash,
        &mut log,
    );
    log.flush()?;
    let (teacher, _) = result?;
    teacher.save(&cfg.teacher_path())?;
    if dump_saliency {
        dump_test_saliency(cfg, &teacher, &ds)?;
    }
    write_manifest(cfg)?;
    Ok(teacher)
}

fn dump_test_saliency(cfg: &ExperimentConfig, teacher: &TeacherModel, ds: &Dataset) -> Result<()> {
    let dir = reports_dir(cfg).join("saliency");
    for cloud in ds.split(Split::Test) {
        let map = class_saliency(teacher, cloud)?;
        write_file(&dir.join(format!("{:06}.txt", cloud.id)), &map.dump())?;
    }
    Ok(())
}

pub fn load_teacher(cfg: &ExperimentConfig) -> Result<TeacherModel> {
    TeacherModel::load(&cfg.teacher_path())
}

/// Train the requested student variants; each gets a checkpoint and a
/// training report.
pub fn train_students(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<(Variant, StudentModel, TrainReport)>> {
    let ds = load_dataset(cfg)?;
    let teacher = if variants.contains(&Variant::Intact) {
        Some(load_teacher(cfg)?)
    } else {
        None
    };
    let before = teacher.as_ref().map(TeacherModel::hash);
    let hash = cfg.hash();
    let scfg = cfg.student_config();
    let mut out = Vec::new();
    for &v in variants {
        let path = reports_dir(cfg).join(format!("train_{}.txt", v.name()));
        let mut log = create(&path)?;
        writeln!(log, "# config_hash {hash}")?;
        let result = closed_loop_train_logged(
            &scfg,
            v,
            teacher.as_ref(),
            &ds,
            rng::derive_seed(cfg.seed, "student", &[]),
            &hash,
            &mut log,
        );
        log.flush()?;
        let (model, report) = result?;
        model.save(&student_path(cfg, v))?;
        out.push((v, model, report));
    }
    if let (Some(t), Some(h)) = (&teacher, before) {
        if t.hash() != h {
            return Err(Error::Data("teacher parameters changed during student training".into()));
        }
    }
    write_manifest(cfg)?;
    Ok(out)
}

/// Evaluate the teacher and all student variants on the test split under
/// every configured condition; writes the CSVs and the aligned table.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<ReportTable> {
    let ds = load_dataset(cfg)?;
    let teacher = load_teacher(cfg)?;
    let students = Variant::ALL
        .iter()
        .map(|&v| Ok((v, Checkpoint::load(&student_path(cfg, v))?)))
        .collect::<Result<Vec<_>>>()?;
    let mut models: Vec<(&str, &dyn Predictor)> = students
        .iter()
        .map(|(v, m)| (v.name(), &m.network as &dyn Predictor))
        .collect();
    models.push(("teacher", &teacher.network));
    let table = robustness_report(
        &models,
        &cfg.eval_conditions(),
        &ds.split(Split::Test),
        cfg.eval.trials,
        &cfg.hash(),
        cfg.seed,
    )?;
    let dir = reports_dir(cfg);
    write_file(&dir.join("eval_trials.csv"), &table.trials_csv())?;
    write_file(&dir.join("eval_summary.csv"), &table.summary_csv())?;
    write_file(&dir.join("eval_table.txt"), &table.to_text())?;
    write_file(&dir.join("summary.txt"), &summary(&table))?;
    write_manifest(cfg)?;
    Ok(table)
}

/// Robustness gaps between the variants for each condition.
pub fn summary(table: &ReportTable) -> String {
    let mut s = table.to_text();
    s.push('\n');
    for cond in &table.conditions {
        let get = |m: &str| table.cell(cond, m).map(|a| a.mean);
        if let (Some(b), Some(a), Some(i)) = (get("baseline"), get("act"), get("intact")) {
            writeln!(
                s,
                "{cond}: intact - act = {:+.2}, act - baseline = {:+.2}, intact - baseline = {:+.2}",
                i - a,
                a - b,
                i - b
            )
            .unwrap();
        }
    }
    s
}

/// gen-data, train-teacher, train-student for every variant, eval.
pub fn run_all(cfg: &ExperimentConfig, dump_saliency: bool) -> Result<ReportTable> {
    gen_data(cfg)?;
    train_teacher(cfg, dump_saliency)?;
    train_students(cfg, &Variant::ALL)?;
    evaluate(cfg)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Rewrite `<out>/artifacts.txt`: one `sha256 path` line per file under
/// the output directory, headed by the config hash.
pub fn write_manifest(cfg: &ExperimentConfig) -> Result<()> {
    let root = &cfg.paths.out;
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    let mut rel: Vec<PathBuf> = files
        .into_iter()
        .filter_map(|p| p.strip_prefix(root).ok().map(Path::to_path_buf))
        .filter(|p| p != Path::new(MANIFEST))
        .collect();
    rel.sort();
    let mut s = format!("config_hash {}\n", cfg.hash());
    for p in rel {
        let bytes = fs::read(root.join(&p))?;
        writeln!(s, "{} {}", rng::sha256_hex(&bytes), p.display()).unwrap();
    }
    write_file(&root.join(MANIFEST), &s)
}
