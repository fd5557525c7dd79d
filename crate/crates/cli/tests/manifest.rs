//! Manifest schema tests: parsing strictness, validation messages, and
//! the mapping from manifest sections onto training configuration.

use std::path::{Path, PathBuf};

use lat_cli::manifest::ExperimentManifest;
use lat_core::attack::IteratePolicy;
use lat_core::heldout::{IMAGE_KINDS, TEXT_KINDS};
use lat_core::perturb::NormKind;
use lat_core::train::{ImplantGoal, TrainMode};

const BASE: &str = r#"
schema = 1
seed = 11
output_dir = "store"

[task]
kind = "image-cls"
train_examples = 32
test_examples = 16
classes = 2

[poison]
specs = 1
count = 4
seed = 97

[pretrain]
learning_rate = 0.05
batch_size = 8
epochs = 1
goal_kind = "success-rate"
goal_value = 0.0

[finetune]
learning_rate = 0.05
batch_size = 8
epochs = 1
attack_steps = 2
attack_step_size = 0.05

[sweep]
modes = ["clean", "lat"]
epsilons = [0.5]
seeds = [7]
splits = [1]

[battery]
severities = [1]
seed = 5

[eval]
batch_size = 16
"#;

fn parse(text: &str) -> Result<ExperimentManifest, lat_core::error::Error> {
    ExperimentManifest::parse(text, Path::new("test.toml"))
}

/// BASE with one line swapped; panics if the needle is missing so edits
/// to BASE cannot silently defang a test.
fn patched(from: &str, to: &str) -> String {
    assert!(BASE.contains(from), "patch needle {from:?} not in BASE");
    BASE.replacen(from, to, 1)
}

fn err_containing(text: &str, needle: &str) {
    match parse(text) {
        Ok(_) => panic!("expected an error mentioning {needle:?}"),
        Err(e) => {
            let msg = e.to_string();
            assert!(msg.contains(needle), "error {msg:?} lacks {needle:?}");
        }
    }
}

fn manifests_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests")
}

#[test]
fn base_fixture_is_valid() {
    parse(BASE).expect("BASE parses");
}

#[test]
fn shipped_manifests_parse() {
    let dir = manifests_dir();
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).expect("manifests directory") {
        let path = entry.expect("dir entry").path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentManifest::load(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4, "expected the shipped manifest set, found {seen}");
}

#[test]
fn missing_file_is_a_config_error() {
    let err = ExperimentManifest::load(Path::new("/nonexistent/m.toml")).unwrap_err();
    assert!(err.to_string().contains("does not exist"), "{err}");
}

#[test]
fn unknown_keys_are_rejected_everywhere() {
    err_containing(&format!("mystery = 3\n{BASE}"), "mystery");
    err_containing(
        &patched("kind = \"image-cls\"", "kind = \"image-cls\"\nmystery = 3"),
        "mystery",
    );
    err_containing(
        &patched("attack_steps = 2", "attack_steps = 2\nmystery = 3"),
        "mystery",
    );
    err_containing(
        &patched("severities = [1]", "severities = [1]\nmystery = 3"),
        "mystery",
    );
}

#[test]
fn missing_sections_are_rejected() {
    let without_eval = BASE.replace("[eval]\nbatch_size = 16", "");
    err_containing(&without_eval, "eval");
}

#[test]
fn schema_must_be_one() {
    err_containing(&patched("schema = 1", "schema = 2"), "expected 1");
}

#[test]
fn task_validation() {
    err_containing(&patched("kind = \"image-cls\"", "kind = \"speech\""), "speech");
    err_containing(&patched("train_examples = 32", "train_examples = 0"), "positive");
    err_containing(&patched("classes = 2", "classes = 1"), "2..=8");
    err_containing(&patched("classes = 2", "classes = 9"), "2..=8");
    let text_cls = patched("kind = \"image-cls\"", "kind = \"text-cls\"")
        .replace("classes = 2", "vocab = 10")
        .replace("modes = [\"clean\", \"lat\"]", "modes = [\"clean\"]");
    err_containing(&text_cls, "at least 20");
    let text_gen = patched("kind = \"image-cls\"", "kind = \"text-gen\"")
        .replace("classes = 2", "vocab = 30")
        .replace("goal_kind = \"success-rate\"", "goal_kind = \"payload-loss\"")
        .replace("modes = [\"clean\", \"lat\"]", "modes = [\"clean\"]");
    err_containing(&text_gen, "at least 40");
}

#[test]
fn poison_validation() {
    err_containing(&patched("specs = 1", "specs = 0"), "8 default backdoors");
    err_containing(&patched("specs = 1", "specs = 9"), "8 default backdoors");
    err_containing(&patched("count = 4", "count = 0"), "poisoned copy");
}

#[test]
fn goal_kind_validation() {
    err_containing(
        &patched("goal_kind = \"success-rate\"", "goal_kind = \"wat\""),
        "success-rate or payload-loss",
    );
}

#[test]
fn sweep_validation() {
    err_containing(&patched("modes = [\"clean\", \"lat\"]", "modes = [\"fgsm\"]"), "fgsm");
    err_containing(&patched("epsilons = [0.5]", "epsilons = [-1.0]"), "non-negative");
    err_containing(&patched("epsilons = [0.5]", "epsilons = [nan]"), "non-negative");
    err_containing(&patched("seeds = [7]", "seeds = []"), "seeds");
    err_containing(&patched("splits = [1]", "splits = []"), "splits");
    err_containing(
        &patched("splits = [1]", "splits = [1]\nlayer_ratio = 0.0"),
        "layer_ratio",
    );
}

#[test]
fn input_space_mode_needs_continuous_inputs() {
    let tokens_with_at = patched("kind = \"image-cls\"", "kind = \"text-cls\"")
        .replace("classes = 2", "vocab = 24")
        .replace("modes = [\"clean\", \"lat\"]", "modes = [\"at\"]");
    err_containing(&tokens_with_at, "continuous inputs");
    let images_with_at =
        patched("modes = [\"clean\", \"lat\"]", "modes = [\"at\", \"lat\", \"rlp\"]");
    parse(&images_with_at).expect("images take input-space attacks");
}

#[test]
fn attack_misconfiguration_fails_at_parse_time() {
    err_containing(
        &patched("attack_step_size = 0.05", "attack_step_size = 0.0"),
        "step size",
    );
    err_containing(
        &patched("attack_steps = 2", "attack_steps = 2\nnorm = \"l7\""),
        "l7",
    );
}

#[test]
fn battery_and_eval_validation() {
    err_containing(&patched("severities = [1]", "severities = []"), "severity");
    err_containing(&patched("severities = [1]", "severities = [6]"), "maximum severity");
    err_containing(&patched("batch_size = 16", "batch_size = 0"), "positive");
}

#[test]
fn empty_sweep_grid_is_allowed() {
    let pretrain_only = BASE
        .replace("modes = [\"clean\", \"lat\"]", "modes = []")
        .replace("epsilons = [0.5]", "epsilons = []")
        .replace("seeds = [7]", "seeds = []")
        .replace("splits = [1]", "splits = []");
    parse(&pretrain_only).expect("pretrain-only manifest");
}

#[test]
fn finetune_config_carries_every_knob() {
    let text = patched(
        "attack_steps = 2\nattack_step_size = 0.05",
        "attack_steps = 3\nattack_step_size = 0.25\nnorm = \"linf\"\n\
         normalized = true\nalpha = 0.3\nsign_step = true\n\
         clip_latent = false\nbest_loss = false",
    );
    let manifest = parse(&text).expect("valid manifest");
    let cfg = manifest
        .finetune_config(TrainMode::Lat, 1.5, 42)
        .expect("finetune config");
    assert_eq!(cfg.mode, TrainMode::Lat);
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.learning_rate, 0.05);
    assert_eq!(cfg.momentum, 0.9);
    assert_eq!(cfg.batch_size, 8);
    assert_eq!(cfg.epochs, 1);
    assert_eq!(cfg.checkpoint_cadence, 1);
    assert_eq!(cfg.attack.steps, 3);
    assert_eq!(cfg.attack.step_size, 0.25);
    assert_eq!(cfg.attack.seed, 42);
    assert_eq!(cfg.attack.policy, IteratePolicy::Last);
    assert!(cfg.attack.sign_step);
    assert!(!cfg.attack.clip_latent);
    assert_eq!(cfg.attack.budget.epsilon, 1.5);
    assert_eq!(cfg.attack.budget.norm, NormKind::Linf);
    assert!(cfg.attack.budget.normalized);
    assert_eq!(cfg.attack.budget.alpha, 0.3);
}

#[test]
fn finetune_defaults_match_the_plain_fixture() {
    let manifest = parse(BASE).expect("valid manifest");
    let cfg = manifest
        .finetune_config(TrainMode::Clean, 0.0, 7)
        .expect("finetune config");
    assert_eq!(cfg.attack.policy, IteratePolicy::BestLoss);
    assert!(!cfg.attack.sign_step);
    assert!(cfg.attack.clip_latent);
    assert_eq!(cfg.attack.budget.norm, NormKind::L2);
    assert!(!cfg.attack.budget.normalized);
}

#[test]
fn pretrain_config_is_clean_mode() {
    let manifest = parse(BASE).expect("valid manifest");
    let cfg = manifest.pretrain_config().expect("pretrain config");
    assert_eq!(cfg.mode, TrainMode::Clean);
    assert_eq!(cfg.attack.steps, 0);
    assert_eq!(cfg.learning_rate, 0.05);
    assert_eq!(cfg.seed, 11);
    assert!(matches!(
        manifest.implant_goal().expect("goal"),
        ImplantGoal::SuccessRate(v) if v == 0.0
    ));
}

#[test]
fn battery_specs_cover_the_kind_by_severity_grid() {
    let manifest =
        parse(&patched("severities = [1]", "severities = [0, 2]")).expect("valid manifest");
    let specs = manifest.battery_specs().expect("battery specs");
    assert_eq!(specs.len(), IMAGE_KINDS.len() * 2);
    assert!(specs.iter().all(|s| s.severity == 0 || s.severity == 2));
    assert!(specs.iter().all(|s| s.seed == 5));

    let text = patched("kind = \"image-cls\"", "kind = \"text-cls\"")
        .replace("classes = 2", "vocab = 24")
        .replace("modes = [\"clean\", \"lat\"]", "modes = [\"clean\", \"lat\"]");
    let manifest = parse(&text).expect("valid manifest");
    let specs = manifest.battery_specs().expect("battery specs");
    assert_eq!(specs.len(), TEXT_KINDS.len());
}

#[test]
fn store_dir_resolves_relative_to_the_manifest() {
    let manifest = parse(BASE).expect("valid manifest");
    assert_eq!(
        manifest.store_dir(Path::new("/tmp/exp/m.toml")),
        PathBuf::from("/tmp/exp/store")
    );
    let absolute = parse(&patched("output_dir = \"store\"", "output_dir = \"/abs/store\""))
        .expect("valid manifest");
    assert_eq!(
        absolute.store_dir(Path::new("/tmp/exp/m.toml")),
        PathBuf::from("/abs/store")
    );
}

#[test]
fn fingerprint_tracks_the_exact_bytes() {
    assert_eq!(
        ExperimentManifest::fingerprint_of(BASE),
        ExperimentManifest::fingerprint_of(BASE)
    );
    assert_ne!(
        ExperimentManifest::fingerprint_of(BASE),
        ExperimentManifest::fingerprint_of(&patched("seed = 11", "seed = 12"))
    );
    assert_ne!(
        ExperimentManifest::fingerprint_of(BASE),
        ExperimentManifest::fingerprint_of(&format!("{BASE} "))
    );
}
