use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use angioseg_cli::RunConfig;
use angioseg_core::data::io::{decode_pgm, load_pmap};

const TINY: &str = r#"
seed = 5

[synth]
size = 16

[arch]
kind = "unet3p"
num_scales = 3
base_channels = 2
input_size = 16

[train]
epochs = 2
batch_size = 2
lr = 1e-3

[split]
ratios = [0.5, 0.25, 0.25]
"#;

fn angioseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_angioseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        angioseg(self.dir.path(), args)
    }

    fn gen(&self, count: &str, out: &str) {
        let o = self.run(&["--config", "run.toml", "gen", "--count", count, "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
}

#[test]
fn gen_writes_images_masks_and_manifest() {
    let f = Fixture::new(TINY);
    f.gen("4", "a");
    f.gen("4", "b");
    let manifest = std::fs::read_to_string(f.path("a/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 5);
    assert_eq!(std::fs::read_dir(f.path("a/images")).unwrap().count(), 4);
    assert_eq!(std::fs::read_dir(f.path("a/masks")).unwrap().count(), 4);
    for rel in ["manifest.csv", "images/img-0002.pgm", "masks/img-0003.pgm"] {
        assert_eq!(
            std::fs::read(f.path("a").join(rel)).unwrap(),
            std::fs::read(f.path("b").join(rel)).unwrap()
        );
    }
    let o = f.run(&["--config", "run.toml", "gen", "--count", "0", "--out", "c"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_predict_and_evaluate() {
    let f = Fixture::new(TINY);
    f.gen("4", "data");
    let train = |out: &str| {
        let o = f.run(&["--config", "run.toml", "--out", out, "train", "--manifest", "data/manifest.csv"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    train("r1");
    train("r2");
    for file in ["best.vnck", "last.vnck", "history.csv", "split.toml", "config.toml"] {
        assert!(f.path("r1").join(file).exists(), "{file}");
    }
    let history = std::fs::read(f.path("r1/history.csv")).unwrap();
    assert_eq!(history, std::fs::read(f.path("r2/history.csv")).unwrap());
    assert_eq!(
        std::fs::read(f.path("r1/best.vnck")).unwrap(),
        std::fs::read(f.path("r2/best.vnck")).unwrap()
    );

    let o = f.run(&[
        "predict", "--checkpoint", "r1/best.vnck", "--image", "data/images/img-0001.pgm", "--out", "pred", "--overlay",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let map = load_pmap(&f.path("pred/img-0001.pmap")).unwrap();
    assert_eq!((map.height(), map.width()), (16, 16));
    let (_, _, _, mask) = decode_pgm(&std::fs::read(f.path("pred/img-0001_mask.pgm")).unwrap()).unwrap();
    let (h, w, _, overlay) = decode_pgm(&std::fs::read(f.path("pred/img-0001_overlay.pgm")).unwrap()).unwrap();
    assert_eq!((h, w), (16, 16));
    for (m, o) in mask.iter().zip(&overlay) {
        if *m == 255 {
            assert_eq!(*o, 255);
        }
    }

    let o = f.run(&[
        "eval", "--checkpoint", "r1/best.vnck", "--manifest", "data/manifest.csv", "--split", "r1/split.toml",
        "--out", "ev",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(f.path("ev/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("id,HD(mm),DSC,SN,SP,ASD(mm)"));
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn prediction_rejects_a_wrongly_sized_image() {
    let f = Fixture::new(TINY);
    f.gen("4", "data");
    let o = f.run(&["--config", "run.toml", "--out", "r", "train", "--manifest", "data/manifest.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let big = Fixture::new(&TINY.replace("size = 16", "size = 32"));
    big.gen("1", "data");
    let image = big.path("data/images/img-0000.pgm");
    let o = f.run(&["predict", "--checkpoint", "r/best.vnck", "--image", image.to_str().unwrap(), "--out", "p"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dimension"), "{}", stderr(&o));
}

#[test]
fn oracle_evaluation_is_perfect() {
    let f = Fixture::new(TINY);
    f.gen("3", "data");
    let o = f.run(&["eval", "--oracle", "--manifest", "data/manifest.csv", "--out", "ev"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(f.path("ev/metrics.csv")).unwrap();
    for line in metrics.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2], "1.000000", "{line}");
    }
    std::fs::write(f.path("empty.csv"), "id,image_path,mask_path,patient_id,view_tag,spacing_row_mm,spacing_col_mm\n")
        .unwrap();
    let o = f.run(&["eval", "--oracle", "--manifest", "empty.csv", "--out", "ev2"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn missing_manifest_is_named() {
    let f = Fixture::new(TINY);
    let o = f.run(&["--config", "run.toml", "train", "--manifest", "nowhere/manifest.csv"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("nowhere/manifest.csv"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_one() {
    let f = Fixture::new("seed = 1\nepochz = 3\n");
    let o = f.run(&["--config", "run.toml", "gen", "--count", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = f.run(&["--config", "absent.toml", "gen"]);
    assert_eq!(o.status.code(), Some(1));
    let o = f.run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergent_training_exits_with_three() {
    let f = Fixture::new(&TINY.replace("lr = 1e-3", "lr = 1e30").replace("epochs = 2", "epochs = 5"));
    f.gen("4", "data");
    let o = f.run(&["--config", "run.toml", "train", "--manifest", "data/manifest.csv"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn compare_two_configs_over_two_folds() {
    let f = Fixture::new(TINY);
    std::fs::write(
        f.path("plain.toml"),
        TINY.replace("kind = \"unet3p\"", "kind = \"unet\"\ndeep_supervision = false"),
    )
    .unwrap();
    f.gen("6", "data");
    let run = |out: &str| {
        let o = f.run(&[
            "compare", "run.toml", "plain.toml", "--folds", "2", "--manifest", "data/manifest.csv", "--out", out,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    run("c1");
    run("c2");
    let table = std::fs::read_to_string(f.path("c1/table.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("run,"));
    assert!(table.lines().nth(2).unwrap().starts_with("plain,"));
    assert_eq!(table, std::fs::read_to_string(f.path("c2/table.csv")).unwrap());
    for name in ["folds_hdmm.csv", "folds_dsc.csv", "folds_sn.csv", "folds_sp.csv", "folds_asdmm.csv"] {
        let series = std::fs::read_to_string(f.path("c1").join(name)).unwrap();
        assert_eq!(series.lines().count(), 3, "{name}");
        assert_eq!(series, std::fs::read_to_string(f.path("c2").join(name)).unwrap());
    }
}

#[test]
fn shipped_configs_parse_and_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for dir in [root.clone(), root.join("compare")] {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.extension().is_some_and(|x| x == "toml") {
                RunConfig::load(&p).unwrap().validate().unwrap();
                seen += 1;
            }
        }
    }
    assert!(seen >= 7, "{seen}");
    let documented = RunConfig::load(&root.join("default.toml")).unwrap();
    assert_eq!(
        RunConfig {
            name: String::new(),
            ..documented
        },
        RunConfig::default()
    );
}
