import json

import pytest

from tdkd.cli import main

TINY_DATA = {
    "vocab_size": 5, "feature_dim": 4, "frames_per_token": 3, "identity_frames": 1,
    "noise": 0.4, "u_min": 2, "u_max": 3, "n_labelled": 8, "n_unlabelled": 6,
    "n_dev": 4, "n_test": 4, "n_text": 40,
}
TINY_MODEL = {"enc_hidden": 6, "enc_layers": 1, "lookahead": 2, "enc_out": 6,
              "embed_dim": 4, "pred_hidden": 6, "joint_hidden": 6}
TINY_STREAM = dict(TINY_MODEL, lookahead=0)
TINY_SCHED = {"epochs": 2, "lr": 0.2, "batch_size": 4}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One miniature end-to-end run shared by the CLI tests."""
    ws = tmp_path_factory.mktemp("cli")
    (ws / "data_cfg.json").write_text(json.dumps(TINY_DATA))
    (ws / "model_cfg.json").write_text(json.dumps({"model": TINY_MODEL, "schedule": TINY_SCHED}))
    (ws / "stream_cfg.json").write_text(json.dumps({"model": TINY_STREAM, "schedule": TINY_SCHED}))
    assert main(["gen-data", "--out", str(ws / "data"), "--config", str(ws / "data_cfg.json"),
                 "--seed", "5"]) == 0
    assert main(["train-teacher", "--data", str(ws / "data"), "--out", str(ws / "teacher.ckpt"),
                 "--config", str(ws / "model_cfg.json"), "--seed", "1"]) == 0
    assert main(["train-lm", "--data", str(ws / "data"), "--out", str(ws / "lm.json"),
                 "--order", "2"]) == 0
    assert main(["make-targets", "--data", str(ws / "data"), "--teacher", str(ws / "teacher.ckpt"),
                 "--out", str(ws / "targets.jsonl"), "--pseudo-out", str(ws / "pseudo.jsonl"),
                 "--beam", "2"]) == 0
    return ws


def test_gen_data_outputs(workspace):
    for name in ("labelled.feat", "unlabelled.refs.jsonl", "text.jsonl", "config.json"):
        assert (workspace / "data" / name).exists()


def test_gen_data_reruns_byte_identical(workspace, tmp_path):
    out2 = tmp_path / "data2"
    assert main(["gen-data", "--out", str(out2), "--config", str(workspace / "data_cfg.json"),
                 "--seed", "5"]) == 0
    for name in ("labelled.feat", "labelled.json", "text.jsonl"):
        assert (out2 / name).read_bytes() == (workspace / "data" / name).read_bytes()


def test_targets_cache_shape(workspace):
    lines = (workspace / "targets.jsonl").read_text().strip().splitlines()
    assert len(lines) == TINY_DATA["n_labelled"] + TINY_DATA["n_unlabelled"]
    rec = json.loads(lines[0])
    assert set(rec) == {"id", "alignment", "dists", "fused", "beta"}
    assert len(rec["dists"]) == len(rec["alignment"])
    pseudo = (workspace / "pseudo.jsonl").read_text().strip().splitlines()
    assert len(pseudo) == TINY_DATA["n_unlabelled"]


def test_make_targets_rerun_byte_identical(workspace, tmp_path):
    out2 = tmp_path / "targets2.jsonl"
    assert main(["make-targets", "--data", str(workspace / "data"),
                 "--teacher", str(workspace / "teacher.ckpt"), "--out", str(out2),
                 "--pseudo-out", str(tmp_path / "p2.jsonl"), "--beam", "2"]) == 0
    assert out2.read_bytes() == (workspace / "targets.jsonl").read_bytes()


def test_make_targets_fused_requires_lm(workspace, tmp_path):
    code = main(["make-targets", "--data", str(workspace / "data"),
                 "--teacher", str(workspace / "teacher.ckpt"),
                 "--out", str(tmp_path / "t.jsonl"), "--pseudo-out", str(tmp_path / "p.jsonl"),
                 "--fuse-lm", "0.5"])
    assert code == 2


def test_make_targets_fused_runs(workspace, tmp_path):
    assert main(["make-targets", "--data", str(workspace / "data"),
                 "--teacher", str(workspace / "teacher.ckpt"),
                 "--out", str(tmp_path / "tf.jsonl"), "--pseudo-out", str(tmp_path / "pf.jsonl"),
                 "--fuse-lm", "0.5", "--lm", str(workspace / "lm.json"), "--beam", "2"]) == 0
    rec = json.loads((tmp_path / "tf.jsonl").read_text().splitlines()[0])
    assert rec["fused"] is True and rec["beta"] == 0.5


def test_train_student_baseline_and_st2(workspace, tmp_path):
    base = tmp_path / "student_base.ckpt"
    assert main(["train-student", "--data", str(workspace / "data"), "--out", str(base),
                 "--strategy", "baseline", "--labelled-only",
                 "--config", str(workspace / "model_cfg.json"), "--seed", "2"]) == 0
    st2 = tmp_path / "student_st2.ckpt"
    assert main(["train-student", "--data", str(workspace / "data"), "--out", str(st2),
                 "--strategy", "st2", "--lambda", "0.1", "--variant", "onebest",
                 "--targets", str(workspace / "targets.jsonl"),
                 "--pseudo", str(workspace / "pseudo.jsonl"),
                 "--init", str(base),
                 "--config", str(workspace / "model_cfg.json"), "--seed", "2"]) == 0
    assert st2.exists()


def test_train_student_streaming_tau(workspace, tmp_path):
    out = tmp_path / "student_stream.ckpt"
    assert main(["train-student", "--data", str(workspace / "data"), "--out", str(out),
                 "--strategy", "st1", "--lambda", "1.0", "--tau", "2", "--streaming",
                 "--targets", str(workspace / "targets.jsonl"),
                 "--pseudo", str(workspace / "pseudo.jsonl"),
                 "--config", str(workspace / "stream_cfg.json"), "--seed", "3"]) == 0


def test_train_student_rejects_bad_strategy_combo(workspace, tmp_path):
    code = main(["train-student", "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "x.ckpt"), "--strategy", "st2",
                 "--lambda", "0.1", "--targets", str(workspace / "targets.jsonl"),
                 "--config", str(workspace / "model_cfg.json")])
    assert code == 2  # st2 without --init


def test_train_student_collapsed_variant_needs_teacher(workspace, tmp_path):
    args = ["train-student", "--data", str(workspace / "data"),
            "--out", str(tmp_path / "c.ckpt"), "--strategy", "st1", "--lambda", "0.1",
            "--variant", "collapsed", "--labelled-only",
            "--config", str(workspace / "model_cfg.json"), "--seed", "4"]
    assert main(args) == 2
    assert main(args + ["--teacher", str(workspace / "teacher.ckpt")]) == 0


def test_cmd_eval_appends_results(workspace, tmp_path):
    results = tmp_path / "results.csv"
    assert main(["eval", "--data", str(workspace / "data"), "--ckpt", str(workspace / "teacher.ckpt"),
                 "--results", str(results), "--label", "teacher"]) == 0
    assert main(["eval", "--data", str(workspace / "data"), "--ckpt", str(workspace / "teacher.ckpt"),
                 "--results", str(results), "--label", "again", "--baseline", "teacher"]) == 0
    rows = results.read_text().strip().splitlines()
    assert len(rows) == 3  # header + 2 rows
    assert "werr_dev" in rows[0]


def test_cmd_eval_unlabelled_uses_sealed_refs(workspace):
    assert main(["eval", "--data", str(workspace / "data"), "--ckpt", str(workspace / "teacher.ckpt"),
                 "--splits", "unlabelled"]) == 0


def test_cmd_bench(workspace, tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--out", str(out), "--grid", "10,4,6;20,8,6;40,16,6"]) == 0
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 1 + 3 * 3  # header + variants x grid


def test_cmd_report(workspace, tmp_path, capsys):
    results = tmp_path / "results.csv"
    main(["eval", "--data", str(workspace / "data"), "--ckpt", str(workspace / "teacher.ckpt"),
          "--results", str(results), "--label", "teacher"])
    capsys.readouterr()
    assert main(["report", "--results", str(results)]) == 0
    out = capsys.readouterr().out
    assert "teacher" in out and "dev WER" in out


def test_unknown_config_key_is_config_error(workspace, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"enc_hiden": 4}}))
    code = main(["train-teacher", "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "t.ckpt"), "--config", str(bad)])
    assert code == 2
