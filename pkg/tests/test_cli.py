import hashlib
import json

import numpy as np
import pytest

from diffiqt import cli
from diffiqt.errors import RunAbort
from diffiqt.metrics import mssim, psnr
from diffiqt.volume import load_volume

TINY = {
    "corpus": {"n_volumes": 2, "split": [0.5, 0.0, 0.5], "phantom": {"dims": [24, 24, 24]}},
    "denoiser": {
        "patch_size": 8,
        "filters": [4, 8],
        "heads": 1,
        "embed_dim": 8,
        "token_sizes": [4, 2],
        "dfe_depth": 1,
        "halo": 2,
    },
    "train": {"steps": 3, "learning_rate": 1e-3, "log_every": 1},
    "sampler": {"T": 2},
    "ablation": {"steps": 1, "dfe_depth": 1},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def run(*args):
    return cli.main([str(a) for a in args])


def test_phantom_deterministic_with_checksums(tmp_path, config):
    for name in ("a", "b"):
        assert run("phantom", "--config", config, "--out", tmp_path / name, "--override", "corpus.n_volumes=1") == 0
    a = json.loads((tmp_path / "a" / "corpus.json").read_text())
    b = json.loads((tmp_path / "b" / "corpus.json").read_text())
    assert a["volumes"][0]["sha256"] == b["volumes"][0]["sha256"]
    raw = (tmp_path / "a" / a["volumes"][0]["path"]).read_bytes()
    assert hashlib.sha256(raw).hexdigest() == a["volumes"][0]["sha256"]
    assert (tmp_path / "a" / "resolved_config.phantom.json").exists()


def test_corpus_split_fractions(tmp_path, config):
    out = tmp_path / "c"
    assert run("phantom", "--config", config, "--out", out, "--override", "corpus.n_volumes=10",
               "--override", "corpus.split=[0.6,0.2,0.2]", "--override", "corpus.phantom.dims=[16,16,16]") == 0
    split = json.loads((out / "corpus.json").read_text())["split"]
    assert [len(split[k]) for k in ("train", "val", "test")] == [6, 2, 2]
    assert cli.split_counts(80, (0.6, 0.15, 0.25)) == (48, 12, 20)


def test_simulate_identity_and_factor_ordering(tmp_path, config):
    out = tmp_path / "s"
    base = ["--config", config, "--out", out, "--override", "corpus.n_volumes=1",
            "--override", "corpus.phantom.dims=[32,32,32]"]
    assert run("phantom", *base) == 0
    identity = ["--override", "decimation.factor=1", "--override", "decimation.noise_sigma=0",
                "--override", "decimation.blur_fwhm_slices=0"]
    assert run("simulate", *base, *identity) == 0
    pair = json.loads((out / "simulate.json").read_text())["pairs"][0]
    hf, lf = load_volume(out / pair["hf"]), load_volume(out / pair["lf"])
    assert np.array_equal(lf.data, hf.data)
    assert pair["psnr_lf_hf"] == "inf"
    scores = {}
    for k in (2, 8):
        assert run("simulate", *base, "--override", f"decimation.factor={k}") == 0
        scores[k] = json.loads((out / "simulate.json").read_text())["pairs"][0]["psnr_lf_hf"]
    assert scores[8] < scores[2]


def test_run_end_to_end_smoke(tmp_path, config):
    out = tmp_path / "r"
    assert run("run", "--config", config, "--out", out) == 0
    for name in ("corpus.json", "simulate.json", "model.iqtc", "train_log.jsonl", "enhance.json", "metrics.json"):
        assert (out / name).exists(), name
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) == {"enhanced", "baseline"}
    row = json.loads((out / "enhance.json").read_text())["volumes"][0]
    enhanced, hf = load_volume(out / row["enhanced"]), load_volume(out / row["hf"])
    assert enhanced.dims == hf.dims
    # CLI numbers match the library on the same files
    assert abs(metrics["enhanced"]["psnr_db"] - psnr(enhanced, hf)) <= 1e-9
    with pytest.warns(UserWarning):
        assert abs(metrics["enhanced"]["mssim"] - mssim(enhanced, hf, 3)) <= 1e-9


def test_evaluate_file_pair(tmp_path, config):
    out = tmp_path / "e"
    assert run("phantom", "--config", config, "--out", out, "--override", "corpus.phantom.dims=[48,48,48]",
               "--override", "corpus.n_volumes=2") == 0
    a, b = out / "hf" / "vol_000.iqtv", out / "hf" / "vol_001.iqtv"
    assert run("evaluate", "--config", config, "--out", out, "--pred", a, "--ref", a) == 0
    same = json.loads((out / "metrics.json").read_text())["pair"]
    assert same["psnr_db"] == "inf" and same["mssim"] == 1.0
    assert run("evaluate", "--config", config, "--out", out, "--pred", a, "--ref", b) == 0
    pair = json.loads((out / "metrics.json").read_text())["pair"]
    va, vb = load_volume(a), load_volume(b)
    assert abs(pair["psnr_db"] - psnr(va, vb)) <= 1e-9
    assert abs(pair["mssim"] - mssim(va, vb)) <= 1e-9


def test_exit_codes(tmp_path, config, monkeypatch, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"stepz": 3}}))
    assert run("phantom", "--config", bad, "--out", tmp_path / "x") == 2
    assert run("train", "--config", config, "--out", tmp_path / "empty") == 2
    assert run("evaluate", "--config", config, "--out", tmp_path / "x", "--pred", tmp_path / "nope.iqtv") == 2
    assert "error" in capsys.readouterr().err

    out = tmp_path / "abort"
    assert run("phantom", "--config", config, "--out", out) == 0
    assert run("simulate", "--config", config, "--out", out) == 0

    def boom(*a, **k):
        raise RunAbort("non-finite training loss", step=0)

    monkeypatch.setattr(cli, "fit", boom)
    assert run("train", "--config", config, "--out", out) == 3


def test_ablation_report(tmp_path, config):
    out = tmp_path / "ab"
    assert run("phantom", "--config", config, "--out", out) == 0
    assert run("simulate", "--config", config, "--out", out) == 0
    assert run("ablation", "--config", config, "--out", out) == 0
    rows = json.loads((out / "ablation.json").read_text())["rows"]
    assert [(r["dfe"], r["cross_batch"]) for r in rows] == [("off", "off"), ("on", "off"), ("on", "on")]
    params = [r["parameters"] for r in rows]
    assert params[0] < params[1] < params[2]
    assert all(r[k] is not None for r in rows for k in ("psnr_db", "mssim", "seam_score"))
    table = (out / "ablation.md").read_text().strip().splitlines()
    assert len(table) == 5 and all(line.count("|") == 7 for line in table)


def test_gradcheck_command(tmp_path, config):
    out = tmp_path / "g"
    assert run("gradcheck", "--config", config, "--out", out) == 0
    report = json.loads((out / "gradcheck.json").read_text())
    assert report["worst"] <= 1e-5
    assert sum(report["n_checked"].values()) >= 50
