import csv
import json
import shutil

import jsonschema
import numpy as np
import pytest

from ppac.cli import (
    ConfigError,
    RunConfig,
    cmd_eval,
    main,
    make_config,
    parse_config,
    report_schema,
)
from ppac.numerics import load_checkpoint
from ppac.synthetic import community_interactions, write_tsv

FAST = ["--set", "epochs=3", "--set", "batch_size=512", "--set", "d=16"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "d.tsv"
    write_tsv(community_interactions(150, 200, 5, 20, seed=4), data)
    cfg = root / "run.cfg"
    cfg.write_text(f"# desk run\ndataset = {data}\nepochs = 3\nbatch_size = 512\nd = 16\n")
    out = root / "out"
    assert main(["prepare", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return root, cfg, out


def run(*args):
    return main([str(a) for a in args])


def test_defaults_match_published_settings():
    c = RunConfig()
    assert (c.d, c.lr, c.k, c.gamma, c.beta, c.alpha, c.lam, c.topk, c.layers) == \
        (64, 0.01, 30, 256.0, -128.0, 0.1, 1e-4, 50, 3)
    assert c.batch_size == 8192


def test_config_parsing_and_overrides():
    vals = parse_config("k = 5\n# comment\n\ngamma=1.5  # trailing\nshare_embeddings = false\n")
    cfg = make_config(vals, {"k": "7"})
    assert cfg.k == 7 and cfg.gamma == 1.5 and cfg.share_embeddings is False


@pytest.mark.parametrize("text,over", [("bogus = 1", {}), ("", {"gama": "1"}), ("k = x", {}),
                                        ("variant = nope", {}), ("no equals sign", {})])
def test_bad_config_rejected(text, over):
    with pytest.raises(ConfigError):
        make_config(parse_config(text), over)


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run("train", "--out", tmp_path, "--set", "typo=1") == 1
    assert "unknown config keys: typo" in capsys.readouterr().err
    assert run("frobnicate") == 1
    assert run("prepare", "--out", tmp_path) == 1


def test_missing_dataset_is_stage_tagged(tmp_path, capsys):
    assert run("prepare", "--out", tmp_path, "--set", f"dataset={tmp_path / 'nope.tsv'}") == 2
    assert "[load]" in capsys.readouterr().err


def test_malformed_dataset_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.tsv"
    bad.write_text("u1\ti1\nu2\t\n")
    assert run("prepare", "--out", tmp_path, "--set", f"dataset={bad}") == 2
    assert "line 2" in capsys.readouterr().err


def test_train_without_prepare(tmp_path, capsys):
    assert run("train", "--out", tmp_path) == 2
    assert "prepare" in capsys.readouterr().err


def test_prepare_outputs_and_rerun_identical(workspace, tmp_path):
    root, cfg, out = workspace
    summary = json.loads((out / "summary.json").read_text())
    assert summary["num_users"] == 150
    assert sum(summary["splits"].values()) == summary["interactions"]
    again = tmp_path / "again"
    assert run("prepare", "--config", cfg, "--out", again) == 0
    for name in ("splits.tsv", "summary.json", "simindex_k30.bin"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_train_outputs(workspace):
    root, cfg, out = workspace
    ckpt = out / "checkpoint_bprmf-full-s0.bin"
    store, header = load_checkpoint(ckpt)
    assert header["kind"] == "bprmf" and header["meta"]["variant"] == "full"
    assert any(k.startswith("pp.") for k in store)
    log = [json.loads(x) for x in (out / "train_log_bprmf-full-s0.jsonl").read_text().splitlines()]
    assert len(log) == 3
    assert all(np.isfinite([r["L_R"], r["L_P"], r["L_G"], r["total"]]).all() for r in log)


def test_no_pp_checkpoint_lacks_pp_head(workspace):
    root, cfg, out = workspace
    assert run("train", "--config", cfg, "--out", out, "--set", "variant=no_pp") == 0
    store, header = load_checkpoint(out / "checkpoint_bprmf-no_pp-s0.bin")
    assert not any(k.startswith("pp.") for k in store)
    assert any(k.startswith("gp.") for k in store)
    # the full variant cannot be evaluated from a checkpoint without the pp head
    assert run("eval", "--config", cfg, "--out", out, "--checkpoint", out / "checkpoint_bprmf-no_pp-s0.bin") == 2


def test_two_seeds_two_checkpoints(workspace, tmp_path):
    root, cfg, out = workspace
    work = tmp_path / "w"
    shutil.copytree(out, work)
    for seed in (1, 2):
        assert run("train", "--config", cfg, "--out", work, "--set", f"seed={seed}") == 0
    a = (work / "checkpoint_bprmf-full-s1.bin").read_bytes()
    b = (work / "checkpoint_bprmf-full-s2.bin").read_bytes()
    assert a != b
    for seed in (1, 2):
        log = (work / f"train_log_bprmf-full-s{seed}.jsonl").read_text().splitlines()
        assert {json.loads(x)["seed"] for x in log} == {seed}


def test_eval_report_and_schema(workspace):
    root, cfg, out = workspace
    assert run("eval", "--config", cfg, "--out", out) == 0
    report = json.loads((out / "report_bprmf-full-s0_full.json").read_text())
    jsonschema.validate(report, report_schema())
    assert report["meta"]["gamma"] == 256.0 and report["meta"]["variant"] == "full"
    shares = [r["item_share"] for r in report["groups"]["head_tail"]]
    assert abs(sum(shares) - 1) < 1e-12
    with open(out / "metrics_bprmf-full-s0_full.csv") as fh:
        row = next(csv.DictReader(fh))
    assert float(row["recall"]) == report["recall_at_k"]
    assert (out / "groups_bprmf-full-s0_full_interaction_count.csv").exists()


def test_eval_baseline_needs_no_checkpoint(workspace, tmp_path):
    root, cfg, out = workspace
    work = tmp_path / "w"
    shutil.copytree(out, work)
    for f in work.glob("checkpoint_*"):
        f.unlink()
    for ranker in ("mostpop", "mostppop"):
        assert run("eval", "--config", cfg, "--out", work, "--set", f"ranker={ranker}") == 0
        rep = json.loads((work / f"report_bprmf-full-s0_{ranker}.json").read_text())
        jsonschema.validate(rep, report_schema())
    assert run("eval", "--config", cfg, "--out", work) == 2


def test_full_and_no_ci_share_weights(workspace):
    root, cfg, out = workspace
    ckpt = out / "checkpoint_bprmf-full-s0.bin"
    assert run("eval", "--config", cfg, "--out", out, "--checkpoint", ckpt,
               "--set", "variant=no_ci", "--set", "run_id=shared") == 0
    assert run("eval", "--config", cfg, "--out", out, "--checkpoint", ckpt, "--set", "variant=full",
               "--set", "gamma=0", "--set", "beta=0", "--set", "run_id=zero") == 0
    a = json.loads((out / "report_shared_no_ci.json").read_text())
    b = json.loads((out / "report_zero_full.json").read_text())
    for key in ("recall_at_k", "ndcg_at_k", "pru_at_k", "ppru_at_k", "groups"):
        assert a[key] == b[key]
    assert a["meta"]["trained_variant"] == b["meta"]["trained_variant"] == "full"


def test_checkpoint_dataset_mismatch_refused(workspace, tmp_path, capsys):
    root, cfg, out = workspace
    other = tmp_path / "other"
    assert run("prepare", "--config", cfg, "--out", other, "--set", "split_seed=9") == 0
    capsys.readouterr()
    assert run("eval", "--config", cfg, "--out", other, "--checkpoint", out / "checkpoint_bprmf-full-s0.bin") == 2
    assert "re-run prepare/train" in capsys.readouterr().err


def test_sweep_gamma(workspace):
    root, cfg, out = workspace
    assert run("sweep", "--config", cfg, "--out", out, "--param", "gamma", "--values", "0,64,256,1024",
               "--set", "beta=0") == 0
    with open(out / "sweep_bprmf-full-s0_gamma.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["value"]) for r in rows] == [0, 64, 256, 1024]
    assert list(rows[0]) == ["value", "recall", "ndcg", "pru", "ppru"]


def test_single_value_sweep_matches_eval(workspace):
    root, cfg, out = workspace
    assert run("sweep", "--config", cfg, "--out", out, "--param", "beta", "--values", "-128") == 0
    assert run("eval", "--config", cfg, "--out", out) == 0
    rep = json.loads((out / "report_bprmf-full-s0_full.json").read_text())
    with open(out / "sweep_bprmf-full-s0_beta.csv") as fh:
        row = next(csv.DictReader(fh))
    for col, key in (("recall", "recall_at_k"), ("ndcg", "ndcg_at_k"), ("pru", "pru_at_k"), ("ppru", "ppru_at_k")):
        assert float(row[col]) == rep[key]


def test_sweep_k_rebuilds_index(workspace):
    root, cfg, out = workspace
    assert run("sweep", "--config", cfg, "--out", out, "--param", "k", "--values", "5,30,100") == 0
    with open(out / "sweep_bprmf-full-s0_k.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert len({r["recall"] for r in rows}) > 1


def test_sweep_empty_values(workspace):
    root, cfg, out = workspace
    assert run("sweep", "--config", cfg, "--out", out, "--param", "gamma", "--values", "") == 1


def test_analyze(workspace):
    root, cfg, out = workspace
    assert run("analyze", "--config", cfg, "--out", out) == 0
    hist = json.loads((out / "overlap.json").read_text())["histogram"]
    assert sum(h["users"] for h in hist) == 150
    assert (out / "rating_vs_pp.csv").exists()


def test_run_manifest_references_outputs(workspace):
    root, cfg, out = workspace
    assert run("eval", "--config", cfg, "--out", out) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())["artifacts"]
    listed = {name for entry in manifest.values() for name in entry}
    on_disk = {p.name for p in out.iterdir()} - {"run_manifest.json"}
    assert on_disk <= listed
    assert {"splits.tsv", "summary.json", "checkpoint_bprmf-full-s0.bin", "report_bprmf-full-s0_full.json"} <= listed


def test_effective_config_round_trip(workspace, tmp_path):
    root, cfg, out = workspace
    eff = out / "config_train_bprmf-full-s0.txt"
    assert make_config(parse_config(eff.read_text()), {}) == make_config(parse_config(cfg.read_text()), {})
    fresh = tmp_path / "fresh"
    assert run("prepare", "--config", eff, "--out", fresh) == 0
    assert run("train", "--config", eff, "--out", fresh) == 0
    assert (fresh / "checkpoint_bprmf-full-s0.bin").read_bytes() == (out / "checkpoint_bprmf-full-s0.bin").read_bytes()


def test_pipeline_reports_byte_identical(tmp_path, workspace):
    root, cfg, _ = workspace
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in ("prepare", "train", "eval"):
            assert run(cmd, "--config", cfg, "--out", out) == 0
        reports.append((out / "report_bprmf-full-s0_full.json").read_bytes())
    assert reports[0] == reports[1]


def test_module_entry_point(workspace):
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "ppac", "eval", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--checkpoint" in proc.stdout


def test_cmd_eval_api(workspace):
    root, cfg, out = workspace
    c = make_config(parse_config(cfg.read_text()), {"ranker": "mostpop"})
    rep = cmd_eval(c, out)
    assert 0 <= rep.recall_at_k <= 1 and rep.meta["ranker"] == "mostpop"
