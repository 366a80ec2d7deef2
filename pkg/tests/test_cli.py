import csv
import json

import numpy as np
import pytest

from oclttt import autodiff as ad
from oclttt.cli import EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, main

TINY = {
    "scene": {"height": 16, "width": 16},
    "width": 8,
    "pretrain": {"n_images": 32, "epochs": 15, "lr": 0.05},
    "stream": {"n_per_condition": 2, "rounds": 2},
    "adaptation": {"lr": 1e-3},
}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write(root / "tiny.json", TINY)
    assert main(["pretrain", "--config", cfg, "--out", str(root / "pre")]) == EXIT_OK
    return root, cfg, str(root / "pre" / "checkpoint.ckpt")


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_missing_config(tmp_path, capsys):
    missing = str(tmp_path / "nope.json")
    assert main(["pretrain", "--config", missing]) == EXIT_CONFIG
    assert missing in capsys.readouterr().err


def test_unknown_keys_rejected(tmp_path, capsys):
    assert main(["pretrain", "--config", write(tmp_path / "a.json", {"sede": 1})]) == EXIT_CONFIG
    assert "sede" in capsys.readouterr().err
    bad = {"adaptation": {"lambda_pos": 3.0, "lamda_neg": 1.0}}
    assert main(["pretrain", "--config", write(tmp_path / "b.json", bad)]) == EXIT_CONFIG


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["adapt", "--seed", "notanint"])
    assert info.value.code == EXIT_CONFIG


def test_pretrain_outputs_and_determinism(trained, tmp_path):
    root, cfg, ckpt = trained
    metrics = json.loads((root / "pre" / "metrics.json").read_text())
    assert metrics["source_miou"] > metrics["chance_miou"] == 1 / 6
    assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / "again")]) == EXIT_OK
    assert (tmp_path / "again" / "checkpoint.ckpt").read_bytes() == open(ckpt, "rb").read()
    resolved = json.loads((root / "pre" / "config.resolved.json").read_text())
    assert resolved["pretrain"]["epochs"] == 15 and resolved["adaptation"]["lambda_pos"] == 3.0


def test_frozen_adapt_matches_eval(trained, tmp_path, capsys):
    _, cfg, ckpt = trained
    assert main(["eval", "--config", cfg, "--checkpoint", ckpt, "--out", str(tmp_path / "ev")]) == EXIT_OK
    ev = json.loads((tmp_path / "ev" / "eval.json").read_text())
    out = tmp_path / "fr"
    assert main(["adapt", "--config", cfg, "--checkpoint", ckpt, "--method", "frozen", "--out", str(out)]) == EXIT_OK
    table = rows(out / "comparison.csv")
    assert float(table[1][1]) == ev["miou"]
    summary = rows(out / "episode_summary.csv")
    assert float(summary[-1][7]) == ev["miou"]


def test_two_seeds_two_logs(trained, tmp_path):
    _, cfg, ckpt = trained
    logs = []
    for seed in (1, 2):
        out = tmp_path / f"s{seed}"
        assert main(["adapt", "--config", cfg, "--checkpoint", ckpt, "--seed", str(seed), "--out", str(out)]) == EXIT_OK
        text = (out / "episode.ndjson").read_text()
        for line in text.splitlines():
            rec = json.loads(line)
            assert {"step", "miou_image", "miou_accumulated", "class_ratio", "loss_total"} <= rec.keys()
        logs.append(text)
    assert logs[0] != logs[1]


def test_ablation_table(trained, tmp_path):
    _, cfg, ckpt = trained
    out = tmp_path / "abl"
    assert main(["adapt", "--config", cfg, "--checkpoint", ckpt, "--ablation", "--out", str(out)]) == EXIT_OK
    table = rows(out / "ablation.csv")
    assert [r[0] for r in table[1:]] == ["source", "ocl", "ocl+bn", "ocl+sr", "ocl+bn+sr"]


def test_class_ratio_table(trained, tmp_path):
    _, cfg, ckpt = trained
    out = tmp_path / "tau"
    assert main(["adapt", "--config", cfg, "--checkpoint", ckpt, "--taus", "0.1,100", "--out", str(out)]) == EXIT_OK
    table = rows(out / "class_ratio_vs_tau.csv")
    assert [r[0] for r in table[1:]] == ["baseline", "0.1", "100.0"]
    for r in table[1:]:
        assert abs(sum(float(x) for x in r[3:]) - 1) <= 1e-9


def test_descriptor_mismatch_names_both(trained, tmp_path, capsys):
    _, _, ckpt = trained
    other = write(tmp_path / "wide.json", {**TINY, "width": 16})
    assert main(["adapt", "--config", other, "--checkpoint", ckpt, "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "checkpoint:" in err and "configured:" in err and '"cout": 8' in err and '"cout": 16' in err


def test_resolved_config_reproduces_run(trained, tmp_path):
    _, cfg, ckpt = trained
    a = tmp_path / "a"
    assert main(["adapt", "--config", cfg, "--checkpoint", ckpt, "--seed", "4", "--out", str(a)]) == EXIT_OK
    b = tmp_path / "b"
    assert main(["adapt", "--config", str(a / "config.resolved.json"), "--out", str(b)]) == EXIT_OK
    for name in ("episode.ndjson", "episode_summary.csv", "comparison.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_flag_overrides_file(trained, tmp_path):
    _, _, ckpt = trained
    cfg = write(tmp_path / "c.json", {**TINY, "seed": 3, "method": "entropy", "checkpoint": ckpt})
    out = tmp_path / "o"
    assert main(["adapt", "--config", cfg, "--seed", "9", "--out", str(out)]) == EXIT_OK
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["seed"] == 9 and resolved["method"] == "entropy"


def test_env_output_root(trained, tmp_path, monkeypatch):
    _, cfg, ckpt = trained
    monkeypatch.setenv("OCLTTT_OUT", str(tmp_path / "root"))
    assert main(["eval", "--config", cfg, "--checkpoint", ckpt]) == EXIT_OK
    assert (tmp_path / "root" / "eval" / "eval.json").exists()


def test_continual_and_report(trained, tmp_path, capsys):
    _, cfg, ckpt = trained
    out = tmp_path / "runs" / "cont"
    assert main(["continual", "--config", cfg, "--checkpoint", ckpt, "--out", str(out)]) == EXIT_OK
    table = rows(out / "rounds.csv")
    assert len(table) - 1 == 2 * 4
    assert main(["report", "--out", str(tmp_path / "runs")]) == EXIT_OK
    assert "continual_summary.csv" in capsys.readouterr().out


def test_verify_all_pass(tmp_path, capsys):
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "verify.json").read_text())
    names = [s["suite"] for s in report["suites"]]
    assert sorted(names) == sorted(set(names)) == sorted(
        ["gradient", "temperature_limit", "bn_mix", "restoration", "miou_oracle"])


def test_verify_detects_corrupted_gradient(monkeypatch, capsys):
    real_exp = ad.exp

    def bad_exp(x):
        out = real_exp(x)
        if out._backward is not None:
            out._backward = lambda g, o=out.data: (g * o * 1.01,)
        return out
    monkeypatch.setattr(ad, "exp", bad_exp)
    assert main(["verify", "--suite", "gradient"]) == EXIT_VERIFY
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] is False and "exp" in report["suites"][0]["failing"]
