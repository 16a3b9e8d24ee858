use std::fs;
use std::path::{Path, PathBuf};

use evimask::cli::*;
use evimask::dataset::{decode_pgm16, decode_pgm8, encode_ppm, read_split};
use evimask::inference::Scorer;
use evimask::model::{load_model, ModelConfig, ModelParams};
use evimask::synth::{Image, Split};
use evimask::Error;

fn gen(dir: &Path, counts: [usize; 3]) {
    cmd_gen(&GenArgs { seed: 3, out: dir.to_path_buf(), counts: counts.to_vec(), force: false }).unwrap();
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p
}

fn train(dir: &Path, data: &Path, steps: usize) -> TrainSummary {
    let cfg = write_config(dir, "batch_size = 2\npoint_budget = 64\nbest_window = 2\n");
    cmd_train(&TrainArgs {
        config: Some(cfg),
        data: data.to_path_buf(),
        out: dir.join("run"),
        seed: Some(1),
        steps: Some(steps),
    })
    .unwrap()
}

#[test]
fn gen_is_reproducible_and_refuses_non_empty_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, [1, 1, 1]);
    gen(&b, [1, 1, 1]);
    let ma = fs::read(a.join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.json")).unwrap());
    for split in Split::ALL {
        assert_eq!(read_split(&a, split).unwrap().1.len(), 1);
    }

    let again = GenArgs { seed: 3, out: a.clone(), counts: vec![1, 1, 1], force: false };
    assert!(matches!(cmd_gen(&again), Err(Error::InvalidArgument(_))));
    cmd_gen(&GenArgs { force: true, ..again }).unwrap();
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, [2, 1, 1]);
    let s = train(tmp.path(), &data, 0);
    let init = ModelParams::init(ModelConfig::default(), 1).unwrap();
    assert_eq!(load_model(&s.final_checkpoint).unwrap(), init);
    assert_eq!(load_model(&s.best_checkpoint).unwrap(), init);
    assert_eq!(fs::read_to_string(&s.log).unwrap(), "step,ce,sdice,evi,total\n");
}

#[test]
fn train_log_has_one_row_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, [2, 1, 1]);
    let s = train(tmp.path(), &data, 3);
    let log = fs::read_to_string(&s.log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,"));
    assert_eq!(lines[3].split(',').count(), 5);
    let echoed = fs::read_to_string(tmp.path().join("run/config.txt")).unwrap();
    assert!(echoed.contains("batch_size = 2\n"));
}

#[test]
fn diverging_training_aborts_with_numeric_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, [2, 1, 1]);
    let cfg = write_config(tmp.path(), "lr = 1e308\nclip_norm = 1e308\nweight_decay = 0\nbatch_size = 1\n");
    let err = cmd_train(&TrainArgs {
        config: Some(cfg),
        data: data.clone(),
        out: tmp.path().join("run"),
        seed: None,
        steps: Some(5),
    })
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
    let log = fs::read_to_string(tmp.path().join("run").join(TRAIN_LOG)).unwrap();
    assert!(log.starts_with("step,ce,sdice,evi,total\n"));
}

#[test]
fn config_errors_map_to_exit_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, [1, 1, 1]);
    let cfg = write_config(tmp.path(), "no_such_key = 1\n");
    let err = cmd_train(&TrainArgs { config: Some(cfg), data, out: tmp.path().join("run"), seed: None, steps: None })
        .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn infer_writes_maps_and_instances() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, [2, 1, 1]);
    let s = train(tmp.path(), &data, 2);
    let image = data.join("val_open/00000.ppm");
    let out = tmp.path().join("infer");
    let r = cmd_infer(&InferArgs {
        model: s.final_checkpoint.clone(),
        image: image.clone(),
        out: out.clone(),
        config: None,
        catalog: Some(data.join("catalog.json")),
        cluster: true,
        stats: None,
        threshold: Some(-0.99),
    })
    .unwrap();
    let (w, h, cls) = decode_pgm16(&fs::read(out.join("class.pgm")).unwrap()).unwrap();
    assert_eq!((w, h, cls.len()), (64, 64, 4096));
    let (w, h, _) = decode_pgm16(&fs::read(out.join("instance.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (64, 64));
    let (_, _, u8s) = decode_pgm8(&fs::read(out.join("uncertainty.pgm")).unwrap()).unwrap();
    for (&b, &u) in u8s.iter().zip(&r.prediction.uncertainty) {
        assert_eq!(b, uncertainty_to_u8(u));
    }
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("instances.json")).unwrap()).unwrap();
    for inst in json["instances"].as_array().unwrap() {
        let c = inst["confidence"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&c));
    }
    assert!(json["confidence_rule"].is_string());

    // Clustering without a threshold source asks for the stats pass.
    let err = cmd_infer(&InferArgs {
        model: s.final_checkpoint.clone(),
        image,
        out: out.clone(),
        config: None,
        catalog: None,
        cluster: true,
        stats: None,
        threshold: None,
    })
    .unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("stats")), "{err}");

    let small = tmp.path().join("small.ppm");
    fs::write(&small, encode_ppm(&Image { width: 8, height: 8, rgb: vec![0; 192] })).unwrap();
    let err = cmd_infer(&InferArgs {
        model: s.final_checkpoint,
        image: small,
        out,
        config: None,
        catalog: None,
        cluster: false,
        stats: None,
        threshold: None,
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn uncertainty_encoding_endpoints() {
    assert_eq!(uncertainty_to_u8(0.0), 255);
    assert_eq!(uncertainty_to_u8(-1.0), 0);
    assert_eq!(uncertainty_to_u8(-0.5), 128);
}

#[test]
fn eval_reports_and_scorers() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, [2, 2, 2]);
    let s = train(tmp.path(), &data, 2);
    let model = s.final_checkpoint;
    let eval = |split, scorer, stats: Option<PathBuf>, name: &str| {
        cmd_eval(&EvalArgs {
            model: model.clone(),
            data: data.clone(),
            split,
            scorer,
            out: tmp.path().join(name),
            config: None,
            stats,
        })
    };

    let closed = eval(Split::ValClosed, Scorer::P2f, None, "closed.json").unwrap();
    assert!(closed.anomaly.is_none());
    let text = fs::read_to_string(tmp.path().join("closed.json")).unwrap();
    assert!(!text.contains("\"anomaly\""));
    assert!(text.contains("\"config\":{\"seed\":\"0\""));

    let err = eval(Split::ValClosed, Scorer::Sml, None, "sml.json").unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("evimask stats")), "{err}");

    let stats = tmp.path().join("stats.json");
    let st = cmd_stats(&StatsArgs { model: model.clone(), data: data.clone(), out: stats.clone(), config: None }).unwrap();
    assert_eq!(st.moments.len(), Scorer::ALL.len());

    let p2f = eval(Split::ValOpen, Scorer::P2f, Some(stats.clone()), "p2f.json").unwrap();
    assert!(p2f.anomaly.is_some());
    let again = eval(Split::ValOpen, Scorer::P2f, Some(stats.clone()), "p2f_again.json").unwrap();
    assert_eq!(p2f, again);
    assert_eq!(
        fs::read(tmp.path().join("p2f.json")).unwrap(),
        fs::read(tmp.path().join("p2f_again.json")).unwrap()
    );
    eval(Split::ValOpen, Scorer::Sml, Some(stats.clone()), "sml.json").unwrap();

    // Scorers only change the fields derived from anomaly scores.
    eval(Split::ValOpen, Scorer::Mm, Some(stats), "mm.json").unwrap();
    let load = |name: &str| -> serde_json::Value {
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join(name)).unwrap()).unwrap();
        let o = v.as_object_mut().unwrap();
        o.remove("scorer");
        o.remove("anomaly");
        v
    };
    assert_eq!(load("p2f.json"), load("mm.json"));
}
