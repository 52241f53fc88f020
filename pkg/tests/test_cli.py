import json

import numpy as np
import pytest

from priordetr import gmm, synth
from priordetr.cli import EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, main

TINY = ["--set", "model.enc_layers=2", "--set", "model.dec_layers=2",
        "--set", "model.num_queries=5", "--set", "model.d_model=32", "--set", "model.heads=2",
        "--set", "data.n_train=8", "--set", "data.n_test=4", "--set", "batch_size=4",
        "--set", "prior_components=1"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    path = d / "ann.jsonl"
    assert main(["gen-data", "--seed", "3", "--count", "700", "--out", str(path)]) == EXIT_OK
    return path


def test_gen_data(dataset, capsys):
    recs = synth.read_records(dataset)
    assert len(recs) == 700
    assert (dataset.parent / recs[0]["image_file"]).exists()


def test_fit_gmm_recovers_generator(dataset, tmp_path, capsys):
    out = tmp_path / "prior.json"
    assert main(["fit-gmm", str(dataset), "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "fitted M=3" in text          # default M
    prior = gmm.load_prior(out)
    truth = synth.default_geometry().means
    perm = gmm.align_components(prior.means, truth)
    assert np.abs(prior.means[perm] - truth).max() < 0.1
    # deterministic for a fixed seed
    out2 = tmp_path / "prior2.json"
    main(["fit-gmm", str(dataset), "--out", str(out2)])
    assert out.read_text() == out2.read_text()


def test_fit_gmm_too_few_boxes(tmp_path, capsys):
    path = tmp_path / "few.jsonl"
    synth.write_annotations(synth.generate(synth.SynthConfig(), 3), path)
    assert main(["fit-gmm", str(path)]) == EXIT_INVALID
    assert "at least 30" in capsys.readouterr().err


def test_fit_gmm_unreadable(tmp_path, capsys):
    assert main(["fit-gmm", str(tmp_path / "missing.jsonl")]) == EXIT_INVALID


def test_train_eval_inspect(tmp_path, dataset, capsys):
    out = tmp_path / "run"
    rc = main(["train", *TINY, "--epochs", "1", "--interaction", "reversed", "--out-dir", str(out)])
    assert rc == EXIT_OK
    for name in ("config.json", "log.jsonl", "checkpoint.npz", "report.json", "prior.json"):
        assert (out / name).exists()
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["model"]["strategy"] == "reversed"
    capsys.readouterr()
    assert main(["eval", str(out / "checkpoint.npz"), str(dataset), "--json"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["config"]["model"]["strategy"] == "reversed"
    assert 0 <= rep["report"]["AP50"] <= 1
    assert main(["inspect-spectrum", "--checkpoint", str(out / "checkpoint.npz")]) == EXIT_OK
    text = capsys.readouterr().out
    assert "roundtrip error" in text and "level 2" in text


def test_bad_config_exit_1(tmp_path, capsys):
    assert main(["train", "--set", "bogus=1"]) == EXIT_INVALID
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == EXIT_INVALID


def test_numeric_failure_exit_2(tmp_path, monkeypatch):
    from priordetr import train as T
    real = T.batch_loss

    def poisoned(*a, **k):
        loss, comps = real(*a, **k)
        comps["loss"] = float("inf")
        return loss, comps

    monkeypatch.setattr(T, "batch_loss", poisoned)
    assert main(["train", *TINY, "--epochs", "1", "--out-dir", str(tmp_path)]) == EXIT_NUMERIC


def test_ablate_table(tmp_path, capsys):
    out = tmp_path / "abl.json"
    rc = main(["ablate", *TINY, "--epochs", "2", "--strategies", "original,dfi", "--seeds", "0",
               "--out", str(out)])
    assert rc == EXIT_OK
    text = capsys.readouterr().out
    table = text.split("-----")[-1]
    rows = [l for l in table.splitlines() if l.startswith(("original ", "dfi "))]
    assert [r.split()[0] for r in rows] == ["original", "dfi"]
    res = json.loads(out.read_text())
    assert [r["variant"] for r in res["rows"]] == ["original", "dfi"]
    assert "config" in res
    assert main(["ablate", *TINY, "--strategies", "dense"]) == EXIT_INVALID


def test_check_grads_subset(capsys):
    assert main(["check-grads", "--only", "linear,giou_loss"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "2/2 passed" in text
    # an impossible tolerance must fail with a nonzero exit
    assert main(["check-grads", "--only", "linear", "--tol", "0"]) == EXIT_INVALID
