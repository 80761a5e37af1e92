use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MODEL: &str = "\
n_layers = 1
d_model = 8
n_heads = 2
d_ff = 12
vocab = 24
n_detector_classes = 4
max_text_len = 4
max_regions = 3
d_v = 5
";

fn mixfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixfuse")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn inspect_mask_matches_golden() {
    let out = mixfuse(&["inspect-mask", "--text", "2", "--img", "3"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out), include_str!("golden/inspect_mask_2_3.txt"));
}

#[test]
fn inspect_mask_with_padding_marks_pad_rows() {
    let out = mixfuse(&["inspect-mask", "--text", "1", "--img", "2", "--max-text", "2", "--max-regions", "3"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.lines().next().unwrap().ends_with("CLS CLT CLI TXT PAD IMG IMG PAD"), "{text}");
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&mixfuse(&["no-such-command"])), 1);
    assert_eq!(code(&mixfuse(&["inspect-mask", "--text", "3", "--img", "1", "--max-text", "2"])), 1);
    assert_eq!(code(&mixfuse(&["pretrain", "--config", "/nonexistent/run.conf"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let bad_key = write(dir.path(), "bad.conf", "learning_rate = 1\n");
    let out = mixfuse(&["pretrain", "--config", &bad_key]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `learning_rate`"));
    let no_data = write(dir.path(), "empty.conf", MODEL);
    assert_eq!(code(&mixfuse(&["pretrain", "--config", &no_data])), 1);
}

#[test]
fn help_exits_0() {
    let out = mixfuse(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("inspect-mask"));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = write(dir.path(), "model.conf", MODEL);
    let gen = mixfuse(&["gen-data", "--n", "40", "--out", data.to_str().unwrap(), "--config", &model]);
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    let eval = write(dir.path(), "eval.conf", &format!("mode = eval\neval_data = data/test.jsonl\n{MODEL}"));
    let ckpt = write(dir.path(), "junk.ckpt", "mixfuse-checkpoint\nformat_version = 1\nend\n\x01");
    let out = mixfuse(&["eval", "--config", &eval, "--ckpt", &ckpt]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt checkpoint"));
}

#[test]
fn gradcheck_passes_on_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write(dir.path(), "gc.conf", &format!("seed = 2\n{MODEL}"));
    let out = mixfuse(&["gradcheck", "--config", &conf]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.lines().last().unwrap().starts_with("gradcheck passed"), "{text}");
    assert!(text.contains("emb.token"));
}

#[test]
fn generate_pretrain_finetune_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = write(dir.path(), "model.conf", MODEL);
    let gen = mixfuse(&[
        "gen-data",
        "--n",
        "60",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
        "--config",
        &model,
        "--mixed",
        "30",
    ]);
    assert_eq!(code(&gen), 0, "{}", String::from_utf8_lossy(&gen.stderr));
    let manifest = fs::read_to_string(data.join("manifest.txt")).unwrap();
    assert!(manifest.contains("train = 48\n") && manifest.contains("test = 12\n"), "{manifest}");
    assert_eq!(fs::read_to_string(data.join("mixed.jsonl")).unwrap().lines().count(), 30);

    let pre = write(
        dir.path(),
        "pre.conf",
        &format!("mode = pretrain\ntrain_data = data/mixed.jsonl\nbase_lr = 1e-3\nwarmup_steps = 2\ntotal_steps = 6\nbatch_size = 8\n{MODEL}"),
    );
    let out = mixfuse(&["pretrain", "--config", &pre]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = stdout(&out);
    let steps: Vec<&str> = log.lines().filter(|l| l.starts_with("step=")).collect();
    assert_eq!(steps.len(), 6);
    for key in ["con=", "mlm=", "itm=", "roi=", "dom=", "total=", "lr="] {
        assert!(steps[0].contains(key), "{}", steps[0]);
    }
    assert!(dir.path().join("pretrain.ckpt").exists());

    let ft = write(
        dir.path(),
        "ft.conf",
        &format!("mode = finetune\ntrain_data = data/train.jsonl\ntotal_steps = 4\nwarmup_steps = 1\nbatch_size = 8\n{MODEL}"),
    );
    let pre_ckpt = dir.path().join("pretrain.ckpt");
    let out = mixfuse(&["finetune", "--config", &ft, "--init", pre_ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().next().unwrap().starts_with("step=1 task="));

    let eval = write(dir.path(), "eval.conf", &format!("mode = eval\neval_data = data/test.jsonl\n{MODEL}"));
    let ft_ckpt = dir.path().join("finetune.ckpt");
    for ablation in ["full", "text_only", "image_only", "max_fuse"] {
        let out = mixfuse(&["eval", "--config", &eval, "--ckpt", ft_ckpt.to_str().unwrap(), "--ablation", ablation]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let keys: Vec<String> = stdout(&out).lines().map(|l| l.split(" = ").next().unwrap().to_string()).collect();
        assert_eq!(keys, ["ablation", "auroc", "accuracy", "f1", "n_pos", "n_neg"]);
    }
    let bad = mixfuse(&["eval", "--config", &eval, "--ckpt", ft_ckpt.to_str().unwrap(), "--ablation", "both"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn eval_rejects_checkpoint_of_another_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = write(dir.path(), "model.conf", MODEL);
    assert_eq!(code(&mixfuse(&["gen-data", "--n", "40", "--out", data.to_str().unwrap(), "--config", &model])), 0);
    let pre = write(
        dir.path(),
        "pre.conf",
        &format!("mode = pretrain\ntrain_data = data/train.jsonl\ntotal_steps = 1\nwarmup_steps = 0\n{MODEL}"),
    );
    assert_eq!(code(&mixfuse(&["pretrain", "--config", &pre])), 0);
    let wider = MODEL.replace("d_model = 8", "d_model = 12");
    let eval = write(dir.path(), "eval.conf", &format!("mode = eval\neval_data = data/test.jsonl\n{wider}"));
    let ckpt = dir.path().join("pretrain.ckpt");
    let out = mixfuse(&["eval", "--config", &eval, "--ckpt", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("emb."));
}
