use std::collections::BTreeMap;
use std::path::PathBuf;

use regen::bench::{bench, compare_table, BenchOptions, BenchReport, StudentTarget, TeacherTarget};
use regen::data::{make_pairs, DatasetManifest, DomainTag, ImageRecord, Split};
use regen::error::RegenError;
use regen::export::{export_model, parity_check, ExportedModel};
use regen::imageio::{read_image, write_png};
use regen::onnx::Precision;
use regen::student::{checkpoint, train_student, ArchConfig, StudentModel, TrainConfig, TrainOptions};
use regen::synth::{render_scene, write_scene_dataset};
use regen::teacher::{generate_pairs, ingest_enhanced, OracleParams, OracleTeacher};

fn records(ids: impl Iterator<Item = String>, tag: DomainTag) -> DatasetManifest {
    DatasetManifest {
        name: format!("{tag:?}"),
        domain_tag: tag,
        records: ids
            .map(|id| ImageRecord {
                path: PathBuf::from(format!("{id}.png")),
                id,
                split: Split::Train,
                width: 1280,
                height: 720,
                aux_channels: BTreeMap::new(),
            })
            .collect(),
    }
}

#[test]
fn enhanced_subset_of_a_large_source_set_pairs_by_id() {
    let source = records((0..25_000).map(|i| format!("{i:05}")), DomainTag::SourceGame);
    // Roughly a fifth of the frames have no enhanced counterpart; listed in reverse order.
    let kept: Vec<String> = (0..25_000).rev().filter(|i| i % 100 < 78).map(|i| format!("{i:05}")).collect();
    let enhanced = records(kept.into_iter().take(19_252), DomainTag::Enhanced);
    assert_eq!(enhanced.records.len(), 19_252);
    let pairs = make_pairs(&source, &enhanced, None).unwrap();
    assert_eq!(pairs.len(), 19_252);
    assert_eq!(pairs.resolution, (1280, 720));
    assert!(pairs.pairs.iter().all(|p| p.source.file_name() == p.enhanced.file_name()));
}

#[test]
fn ingest_ignores_unmatched_enhanced_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_scene_dataset(&dir.path().join("src"), 4, (16, 16), 1, [1.0, 0.0, 0.0]).unwrap();
    let enhanced = dir.path().join("enh");
    std::fs::create_dir_all(&enhanced).unwrap();
    for rec in &manifest.records[..3] {
        write_png(&enhanced.join(format!("{}.png", rec.id)), &render_scene::<f32>(16, 16, 9)).unwrap();
    }
    write_png(&enhanced.join("stray.png"), &render_scene::<f32>(16, 16, 9)).unwrap();
    let pairs = ingest_enhanced(&manifest, &enhanced, None).unwrap();
    assert_eq!(pairs.len(), 3);

    // A directory holding the source frames themselves gives identity pairs.
    let identity = ingest_enhanced(&manifest, &dir.path().join("src"), None).unwrap();
    assert_eq!(identity.len(), 4);
    assert!(identity.pairs.iter().all(|p| p.source == p.enhanced));

    let empty = dir.path().join("none");
    std::fs::create_dir_all(&empty).unwrap();
    write_png(&empty.join("other.png"), &render_scene::<f32>(16, 16, 9)).unwrap();
    assert!(matches!(ingest_enhanced(&manifest, &empty, None), Err(RegenError::EmptyIntersection)));
}

/// Scenes → oracle pairs → a short training run → ONNX export with parity →
/// benchmarks → comparison table, all at 32x32.
#[test]
fn desk_scale_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let manifest = write_scene_dataset(&root.join("src"), 12, (32, 32), 5, [0.75, 0.25, 0.0]).unwrap();
    let teacher = OracleTeacher::new(OracleParams::photoreal_grade()).unwrap();
    let pairs = generate_pairs::<f32>(&teacher, &manifest, &root.join("enh"), None).unwrap();
    assert_eq!(pairs.len(), 12);
    for p in &pairs.pairs {
        let (s, e) = (read_image::<f32>(&p.source).unwrap(), read_image::<f32>(&p.enhanced).unwrap());
        assert_eq!(s.shape(), e.shape());
    }

    let config = TrainConfig {
        resolution: (32, 32),
        epochs: 2,
        arch: ArchConfig {
            ngf: 4,
            n_blocks: 1,
            ndf: 4,
            ..ArchConfig::tiny()
        },
        ..TrainConfig::tiny()
    };
    let ckpt = root.join("ckpt");
    let (model, log) = train_student(
        StudentModel::<f32>::build(&config).unwrap(),
        &pairs,
        &TrainOptions {
            validation: None,
            out_dir: Some(ckpt.clone()),
        },
    )
    .unwrap();
    assert_eq!(log.epochs().count(), 2);
    assert_eq!(log.iterations().count(), 24);
    let jsonl = std::fs::read_to_string(ckpt.join("train_log.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 26);
    let (reloaded, epoch) = checkpoint::load::<f32>(&ckpt.join("final.ckpt")).unwrap();
    assert_eq!(epoch, 2);

    let onnx = root.join("student.onnx");
    export_model(&reloaded, &onnx, Precision::Fp32, None).unwrap();
    let exported = ExportedModel::open(&onnx).unwrap();
    let probes: Vec<_> = pairs.pairs[..3].iter().map(|p| read_image::<f32>(&p.source).unwrap()).collect();
    let parity = parity_check(&model, &exported, &probes, 1e-4).unwrap();
    assert!(parity.passed, "worst diff {}", parity.worst());

    let opts = |name: &str| BenchOptions {
        method_name: name.into(),
        resolution: (32, 32),
        warmup: 5,
        iters: 30,
        ..BenchOptions::default()
    };
    let reports = vec![
        bench(&mut TeacherTarget(&teacher), &opts("teacher")).unwrap(),
        bench(&mut StudentTarget(&model), &opts("student")).unwrap(),
        bench(&mut exported.session((32, 32)).unwrap(), &opts("student-onnx")).unwrap(),
    ];
    for r in &reports {
        let path = root.join(format!("{}.json", r.method_name));
        r.save(&path).unwrap();
        assert_eq!(&BenchReport::load(&path).unwrap(), r);
    }
    let table = compare_table(&reports, &[("teacher".into(), "student-onnx".into())]).unwrap();
    assert_eq!(table.text.lines().filter(|l| l.starts_with("| student")).count(), 2);
    assert!(table.text.contains("Speedup student-onnx vs teacher:"));
}
