use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dgcspn::cli::Checkpoint;
use dgcspn::data::{write_idx, ImageDataset};
use dgcspn::leaves::{EvidenceMask, GaussianLeafParams};
use dgcspn::params::{AccumulatorSpace, LeafParams, ModelParams, SumWeights};
use dgcspn::training::TrainMode;
use dgcspn::{compile, forward_marginal, parse_structure, NetworkSpec};

fn dgcspn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgcspn")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Files {
    dir: tempfile::TempDir,
}

impl Files {
    fn new() -> Self {
        Files {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn text(&self, name: &str, body: &str) -> PathBuf {
        let path = self.path(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    fn dataset(&self, name: &str, d: &ImageDataset) -> (PathBuf, PathBuf) {
        let (im, lb) = (
            self.path(&format!("{name}-images.idx")),
            self.path(&format!("{name}-labels.idx")),
        );
        write_idx(d, &im, Some(&lb)).unwrap();
        (im, lb)
    }
}

fn random_images(n: usize, h: usize, w: usize, seed: u64) -> ImageDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let pixels = labels
        .iter()
        .flat_map(|&l| {
            (0..h * w)
                .map(|p| {
                    let bright = (p % w < w / 2) == (l == 0);
                    let base: i32 = if bright { 200 } else { 40 };
                    (base + rng.random_range(-30..=30)) as u8
                })
                .collect::<Vec<_>>()
        })
        .collect();
    ImageDataset::new(h, w, pixels, Some(labels)).unwrap()
}

#[test]
fn validate_exit_codes() {
    let f = Files::new();
    let valid = f.text("ok.txt", &NetworkSpec::generative(8, 8, 2, 2).to_string());
    let o = dgcspn(&["validate", "--structure", p(&valid)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "valid");

    let overlap = f.text(
        "overlap.txt",
        "input 1x8\nindicator_leaf arity=2\ngclp kernel=1x2 pad=full\nspatial_sum channels=2\ngclp kernel=1x2 pad=full\nroot\n",
    );
    let o = dgcspn(&["validate", "--structure", p(&overlap)]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.lines().count() > 0);
    for line in out.lines() {
        let fields: Vec<&str> = line.split(' ').collect();
        assert_eq!(fields.len(), 3, "{line}");
        assert!(fields[0].starts_with("layer=") && fields[1].starts_with("cell=") && fields[1].contains(','));
    }
    assert!(out.contains("kind=decomposability"));

    let bad = f.text("bad.txt", "input 4x4\ngaussian_leaf k=2\nspatial_sum chanels=3\nroot\n");
    let o = dgcspn(&["validate", "--structure", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn help_and_unknown_flags() {
    for sub in [
        &[][..],
        &["validate"],
        &["train"],
        &["inpaint"],
        &["classify"],
        &["eval"],
    ] {
        let mut args = sub.to_vec();
        args.push("--help");
        assert_eq!(dgcspn(&args).status.code(), Some(0), "{args:?}");
    }
    assert_eq!(
        dgcspn(&["validate", "--structure", "x", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(dgcspn(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn training_with_a_seed_is_byte_identical() {
    let f = Files::new();
    let data = random_images(40, 8, 8, 1);
    let (im, lb) = f.dataset("train", &data);
    let gen = f.text("gen.txt", &NetworkSpec::generative(8, 8, 2, 2).to_string());
    let disc = f.text(
        "disc.txt",
        &NetworkSpec::discriminative(8, 8, 2, 1, &[2], 2).to_string(),
    );
    for (structure, mode, extra) in [(&gen, "hard_em_usi", None), (&disc, "adam", Some(p(&lb)))] {
        let mut outs = Vec::new();
        for (run, threads) in [(0, "1"), (1, "3")] {
            let out = f.path(&format!("{mode}{run}.spnc"));
            let mut args = vec![
                "--threads",
                threads,
                "train",
                "--structure",
                p(structure),
                "--images",
                p(&im),
                "--mode",
                mode,
                "--epochs",
                "2",
                "--batch",
                "16",
                "--seed",
                "7",
                "--out",
                p(&out),
            ];
            if let Some(l) = extra {
                args.extend(["--labels", l]);
            }
            let o = dgcspn(&args);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            let progress = stdout(&o);
            assert!(progress
                .lines()
                .all(|l| l.starts_with("epoch=") && l.contains(" batch=") && l.contains(" metric=")));
            outs.push(std::fs::read(&out).unwrap());
        }
        assert_eq!(outs[0], outs[1], "{mode}");
        assert_eq!(&outs[0][..4], b"SPNC");
    }
}

#[test]
fn inpainting_runs() {
    let f = Files::new();
    let data = random_images(6, 8, 8, 2);
    let (im, _) = f.dataset("d", &data);
    let structure = f.text("gen.txt", &NetworkSpec::generative(8, 8, 2, 2).to_string());
    let ck = f.path("gen.spnc");
    let o = dgcspn(&[
        "train",
        "--structure",
        p(&structure),
        "--images",
        p(&im),
        "--mode",
        "hard_em",
        "--epochs",
        "1",
        "--out",
        p(&ck),
    ]);
    assert!(o.status.success());

    let out_dir = f.path("pgm");
    let o = dgcspn(&[
        "inpaint",
        "--checkpoint",
        p(&ck),
        "--images",
        p(&im),
        "--occlusion",
        "none",
        "--occlusion",
        "left",
        "--occlusion",
        "bottom",
        "--out",
        p(&out_dir),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "occlusion=none images=6 mse=0.0000");
    assert!(lines[1].starts_with("occlusion=left images=6 mse="));
    assert!(lines[2].starts_with("occlusion=bottom images=6 mse="));
    for i in 0..6 {
        let pgm = std::fs::read(out_dir.join(format!("{i:05}_none.pgm"))).unwrap();
        assert_eq!(&pgm[..pgm.len() - 64], b"P5\n8 8\n255\n");
        assert_eq!(&pgm[pgm.len() - 64..], data.image(i));
        assert!(out_dir.join(format!("{i:05}_left.pgm")).exists());
    }

    // a discriminative checkpoint is refused
    let disc = f.text(
        "disc.txt",
        &NetworkSpec::discriminative(8, 8, 2, 1, &[2], 2).to_string(),
    );
    let (im2, lb2) = f.dataset("l", &random_images(4, 8, 8, 3));
    let dck = f.path("disc.spnc");
    let o = dgcspn(&[
        "train",
        "--structure",
        p(&disc),
        "--images",
        p(&im2),
        "--labels",
        p(&lb2),
        "--mode",
        "adam",
        "--epochs",
        "1",
        "--out",
        p(&dck),
    ]);
    assert!(o.status.success());
    let o = dgcspn(&[
        "inpaint",
        "--checkpoint",
        p(&dck),
        "--images",
        p(&im2),
        "--occlusion",
        "left",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn constant_images_are_completed_exactly() {
    let f = Files::new();
    let data = ImageDataset::new(4, 4, vec![117; 5 * 16], None).unwrap();
    let (im, _) = f.dataset("c", &data);
    let structure = f.text("k1.txt", &NetworkSpec::generative(4, 4, 1, 2).to_string());
    let ck = f.path("k1.spnc");
    let o = dgcspn(&[
        "train",
        "--structure",
        p(&structure),
        "--images",
        p(&im),
        "--mode",
        "hard_em",
        "--epochs",
        "1",
        "--out",
        p(&ck),
    ]);
    assert!(o.status.success());
    let o = dgcspn(&[
        "inpaint",
        "--checkpoint",
        p(&ck),
        "--images",
        p(&im),
        "--occlusion",
        "left",
        "--occlusion",
        "bottom",
    ]);
    assert_eq!(
        stdout(&o),
        "occlusion=left images=5 mse=0.0000\nocclusion=bottom images=5 mse=0.0000\n"
    );
}

const PAIR: &str = "\
input 1x2
gaussian_leaf k=2
gclp kernel=1x2 pad=final channels=onehot:all
class_sums k=2
root
";

/// Class 0 = dark left pixel, class 1 = dark right pixel.
fn separable_checkpoint(tied: bool) -> Checkpoint {
    let spec = parse_structure(PAIR).unwrap();
    let plan = compile(&spec).unwrap();
    let g = GaussianLeafParams::new(1, 2, 2, vec![-1.0, 1.0, -1.0, 1.0], vec![0.1; 4]).unwrap();
    let mut params = ModelParams::uniform(&plan, LeafParams::Gaussian(g)).unwrap();
    let uniform = |i: usize, o: usize| SumWeights::new(i, o, AccumulatorSpace::Log, vec![0.0; i * o]).unwrap();
    params.sums = vec![
        if tied {
            uniform(4, 2)
        } else {
            SumWeights::new(
                4,
                2,
                AccumulatorSpace::Log,
                vec![-30.0, 0.0, -30.0, -30.0, -30.0, -30.0, 0.0, -30.0],
            )
            .unwrap()
        },
        uniform(2, 1),
    ];
    params.check(&plan).unwrap();
    Checkpoint {
        spec,
        params,
        seed: 0,
        mode: TrainMode::Adam,
    }
}

#[test]
fn classification_report() {
    let f = Files::new();
    let labels: Vec<u8> = vec![0, 1, 1, 0, 1];
    let pixels: Vec<u8> = labels
        .iter()
        .flat_map(|&l| if l == 0 { [10, 250] } else { [240, 5] })
        .collect();
    let (im, lb) = f.dataset("pair", &ImageDataset::new(1, 2, pixels, Some(labels)).unwrap());

    let ck = f.path("sep.spnc");
    separable_checkpoint(false).save(&ck).unwrap();
    let o = dgcspn(&[
        "classify",
        "--checkpoint",
        p(&ck),
        "--images",
        p(&im),
        "--labels",
        p(&lb),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "accuracy=1.0000\nclass=0 counts=2,0\nclass=1 counts=0,3\n");

    let tied = f.path("tied.spnc");
    separable_checkpoint(true).save(&tied).unwrap();
    let o = dgcspn(&[
        "classify",
        "--checkpoint",
        p(&tied),
        "--images",
        p(&im),
        "--labels",
        p(&lb),
    ]);
    assert_eq!(stdout(&o), "accuracy=0.4000\nclass=0 counts=2,0\nclass=1 counts=3,0\n");

    let o = dgcspn(&["classify", "--checkpoint", p(&ck), "--images", p(&im)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let spec = NetworkSpec::generative(6, 6, 3, 4);
    let plan = compile(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let means = (0..108).map(|_| rng.random_range(-2.0..2.0)).collect();
    let vars = (0..108).map(|_| rng.random_range(0.2..3.0)).collect();
    let g = GaussianLeafParams::new(6, 6, 3, means, vars).unwrap();
    let params = ModelParams::random_counts(&plan, LeafParams::Gaussian(g), &mut rng).unwrap();
    let ck = Checkpoint {
        spec,
        params,
        seed: 99,
        mode: TrainMode::HardEmUsi,
    };
    let f = Files::new();
    let path = f.path("m.spnc");
    ck.save(&path).unwrap();
    let (loaded, plan2) = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    let mask = EvidenceMask::all_observed(6, 6);
    for _ in 0..100 {
        let image: Vec<f64> = (0..36).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = forward_marginal(&plan, &ck.params, ck.params.gaussian_leaves(&image, &mask).unwrap())
            .unwrap()
            .0;
        let b = forward_marginal(
            &plan2,
            &loaded.params,
            loaded.params.gaussian_leaves(&image, &mask).unwrap(),
        )
        .unwrap()
        .0;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(Checkpoint::from_bytes(&bytes, &path).is_err());
    bytes[0] = b'X';
    assert!(Checkpoint::from_bytes(&bytes, &path).is_err());
}
