//! On-disk cohort layout: patient manifest, vocabulary file, PNG images and
//! the labelled per-eye dataset manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use retclip_core::data::{PatientTriplet, Vocabulary};
use retclip_core::eval::{eye_dataset, LabeledImageDataset, LabeledItem, TaskKind};

use crate::error::IoError;
use crate::imageio::{load_png, save_png};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const EYE_LABELS_FILE: &str = "eyes.tsv";
pub const IMAGE_DIR: &str = "images";

fn read(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or_else(|| Path::new("."))
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary, IoError> {
    let tokens = read(path)?.lines().map(str::to_owned).collect();
    Ok(Vocabulary::from_tokens(tokens)?)
}

pub fn save_vocab(path: &Path, vocab: &Vocabulary) -> Result<(), IoError> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    write(path, &text)
}

/// One parsed manifest line before images are loaded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub left: PathBuf,
    pub right: PathBuf,
    pub report: String,
}

/// `patient_id<TAB>left<TAB>right<TAB>report` per line; relative paths are
/// taken from the manifest's directory. Blank lines are skipped.
pub fn parse_manifest(path: &Path, text: &str) -> Result<Vec<ManifestEntry>, IoError> {
    let base = parent(path);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty patient id".into(),
            });
        }
        out.push(ManifestEntry {
            patient_id: fields[0].to_owned(),
            left: resolve(base, fields[1]),
            right: resolve(base, fields[2]),
            report: fields[3].to_owned(),
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path, vocab: &Vocabulary) -> Result<Vec<PatientTriplet>, IoError> {
    let entries = parse_manifest(path, &read(path)?)?;
    entries
        .into_iter()
        .map(|e| {
            let load = |p: &Path| {
                load_png(p).map_err(|err| IoError::Ingestion {
                    patient_id: e.patient_id.clone(),
                    message: err.to_string(),
                })
            };
            let left_image = load(&e.left)?;
            let right_image = load(&e.right)?;
            if (left_image.height(), left_image.width()) != (right_image.height(), right_image.width()) {
                return Err(IoError::Ingestion {
                    patient_id: e.patient_id.clone(),
                    message: "left and right images differ in size".into(),
                });
            }
            Ok(PatientTriplet {
                report_tokens: vocab.tokenize(&e.report),
                patient_id: e.patient_id,
                left_image,
                right_image,
                report: e.report,
                ground_truth: None,
            })
        })
        .collect()
}

fn image_names(patient_id: &str) -> (String, String) {
    (
        format!("{IMAGE_DIR}/{patient_id}_left.png"),
        format!("{IMAGE_DIR}/{patient_id}_right.png"),
    )
}

/// Writes images, the patient manifest and the vocabulary under `dir`.
/// When every patient carries ground truth, the per-eye labelled dataset
/// manifest is written as well.
pub fn save_cohort(
    dir: &Path,
    cohort: &[PatientTriplet],
    vocab: &Vocabulary,
    n_conditions: usize,
) -> Result<(), IoError> {
    let img_dir = dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| IoError::io(&img_dir, e))?;
    let mut manifest = String::new();
    for p in cohort {
        if p.report.contains(['\t', '\n']) || p.patient_id.contains(['\t', '\n', '/']) {
            return Err(IoError::Ingestion {
                patient_id: p.patient_id.clone(),
                message: "patient id or report contains a tab, newline or slash".into(),
            });
        }
        let (l, r) = image_names(&p.patient_id);
        save_png(&dir.join(&l), &p.left_image)?;
        save_png(&dir.join(&r), &p.right_image)?;
        writeln!(manifest, "{}\t{l}\t{r}\t{}", p.patient_id, p.report).expect("string write");
    }
    write(&dir.join(MANIFEST_FILE), &manifest)?;
    save_vocab(&dir.join(VOCAB_FILE), vocab)?;

    if !cohort.is_empty() && cohort.iter().all(|p| p.ground_truth.is_some()) {
        let ds = eye_dataset(cohort, n_conditions)?;
        let paths: Vec<String> = cohort
            .iter()
            .flat_map(|p| {
                let (l, r) = image_names(&p.patient_id);
                [l, r]
            })
            .collect();
        write(&dir.join(EYE_LABELS_FILE), &format_labeled(&ds, &paths))?;
    }
    Ok(())
}

fn task_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Multiclass => "multiclass",
        TaskKind::Multilabel => "multilabel",
    }
}

/// Header `#task=<kind> n_classes=K`, then `image_path<TAB>labels` lines.
pub fn format_labeled(ds: &LabeledImageDataset, paths: &[String]) -> String {
    let mut out = format!("#task={} n_classes={}\n", task_name(ds.task), ds.n_classes);
    for (item, path) in ds.items.iter().zip(paths) {
        let labels: Vec<String> = item.labels.iter().map(usize::to_string).collect();
        writeln!(out, "{path}\t{}", labels.join(",")).expect("string write");
    }
    out
}

/// Parsed labelled manifest: header plus `(path, labels)` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledManifest {
    pub task: TaskKind,
    pub n_classes: usize,
    pub rows: Vec<(PathBuf, Vec<usize>)>,
}

pub fn parse_labeled(path: &Path, text: &str) -> Result<LabeledManifest, IoError> {
    let err = |line: usize, message: String| IoError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "missing `#task=... n_classes=...` header".into()))?;
    let mut task = None;
    let mut n_classes = None;
    for field in header
        .strip_prefix('#')
        .ok_or_else(|| err(1, "header must start with `#`".into()))?
        .split_whitespace()
    {
        match field.split_once('=') {
            Some(("task", "multiclass")) => task = Some(TaskKind::Multiclass),
            Some(("task", "multilabel")) => task = Some(TaskKind::Multilabel),
            Some(("n_classes", k)) => {
                n_classes = Some(k.parse::<usize>().map_err(|_| err(1, format!("bad n_classes {k:?}")))?)
            }
            _ => return Err(err(1, format!("unknown header field {field:?}"))),
        }
    }
    let task = task.ok_or_else(|| err(1, "header lacks task".into()))?;
    let n_classes = n_classes.ok_or_else(|| err(1, "header lacks n_classes".into()))?;

    let base = parent(path);
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (p, spec) = line
            .split_once('\t')
            .ok_or_else(|| err(i + 1, "expected `path<TAB>labels`".into()))?;
        let labels = if spec.trim().is_empty() {
            Vec::new()
        } else {
            spec.split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| err(i + 1, format!("bad label list {spec:?}")))?
        };
        if task == TaskKind::Multiclass && labels.len() != 1 {
            return Err(err(i + 1, "multiclass rows carry exactly one label".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(err(i + 1, format!("label {l} outside [0, {n_classes})")));
        }
        rows.push((resolve(base, p), labels));
    }
    Ok(LabeledManifest {
        task,
        n_classes,
        rows,
    })
}

pub fn load_labeled_dataset(path: &Path) -> Result<LabeledImageDataset, IoError> {
    let m = parse_labeled(path, &read(path)?)?;
    let items = m
        .rows
        .into_iter()
        .map(|(p, labels)| {
            Ok(LabeledItem {
                image: load_png(&p)?,
                labels,
            })
        })
        .collect::<Result<Vec<_>, IoError>>()?;
    Ok(LabeledImageDataset {
        items,
        task: m.task,
        n_classes: m.n_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use retclip_core::data::{generate_cohort, SyntheticCohortConfig};

    #[test]
    fn empty_manifest_is_empty() {
        let vocab = Vocabulary::synthetic(2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p, &vocab).unwrap().is_empty());
    }

    #[test]
    fn three_fields_is_a_parse_error_at_that_line() {
        let text = "a\tl.png\tr.png\tboth eyes normal .\nb\tl.png\tr.png\n";
        match parse_manifest(Path::new("m.tsv"), text) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_image_names_the_patient() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        fs::write(&p, "p007\tnope.png\tnope.png\tleft: normal .\n").unwrap();
        match load_manifest(&p, &Vocabulary::synthetic(2)) {
            Err(IoError::Ingestion { patient_id, .. }) => assert_eq!(patient_id, "p007"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cohort_round_trips_through_disk() {
        let cfg = SyntheticCohortConfig {
            n_patients: 2,
            image_size: 8,
            n_conditions: 3,
            ..Default::default()
        };
        let cohort = generate_cohort(&cfg).unwrap();
        let vocab = Vocabulary::synthetic(3);
        let dir = tempfile::tempdir().unwrap();
        save_cohort(dir.path(), &cohort, &vocab, 3).unwrap();

        let vocab2 = load_vocab(&dir.path().join(VOCAB_FILE)).unwrap();
        assert_eq!(vocab2, vocab);
        let back = load_manifest(&dir.path().join(MANIFEST_FILE), &vocab2).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in cohort.iter().zip(&back) {
            assert_eq!(a.patient_id, b.patient_id);
            assert_eq!(a.report, b.report);
            assert_eq!(a.report_tokens, b.report_tokens);
            assert_eq!(a.left_image.quantized_u8(), b.left_image);
            assert_eq!(a.right_image.quantized_u8(), b.right_image);
        }

        let eyes = load_labeled_dataset(&dir.path().join(EYE_LABELS_FILE)).unwrap();
        let want = eye_dataset(&cohort, 3).unwrap();
        assert_eq!(eyes.task, TaskKind::Multilabel);
        assert_eq!(eyes.items.len(), 4);
        for (a, b) in want.items.iter().zip(&eyes.items) {
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn labeled_header_is_validated() {
        let p = Path::new("d.tsv");
        assert!(parse_labeled(p, "x.png\t1\n").is_err());
        assert!(parse_labeled(p, "#task=multiclass n_classes=2\nx.png\t2\n").is_err());
        assert!(parse_labeled(p, "#task=multiclass n_classes=2\nx.png\t0,1\n").is_err());
        let m = parse_labeled(p, "#task=multilabel n_classes=3\nx.png\t0,2\ny.png\t\n").unwrap();
        assert_eq!(m.rows[0].1, vec![0, 2]);
        assert!(m.rows[1].1.is_empty());
    }
}
