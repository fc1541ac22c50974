import json

import pytest

from bimonn.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK, main
from bimonn.experiment import load_presets, parse_config, resolve_config

TINY = {
    "name": "tiny",
    "dataset": {"kind": "diskorect", "size": 50, "count": 100, "seed": 0},
    "target": {"kind": "dilation", "se": {"shape": "hstick", "side": 5}},
    "architecture": [[1, 1, 5]],
    "train": {"max_steps": 300, "batch_size": 16},
    "eval": {"count": 20},
}


def write_config(tmp_path, config=TINY, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    out = root / "run"
    assert main(["train", "--config", cfg, "--out", str(out)]) == EXIT_OK
    return cfg, out


def test_gen_data_idempotent(tmp_path):
    cfg = write_config(tmp_path, {**TINY, "dataset": {**TINY["dataset"], "count": 10}})
    for name in ("a", "b"):
        assert main(["gen-data", "--config", cfg, "--seed", "7", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a" / "data").iterdir())
    assert len([f for f in files if f.endswith(".pbm")]) == 20
    for f in files:
        assert (tmp_path / "a" / "data" / f).read_bytes() == (tmp_path / "b" / "data" / f).read_bytes()
    manifest = json.loads((tmp_path / "a" / "data" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["dataset"]["seed"] == 7
    assert "generator_version" in manifest and "version" in manifest


def test_train_report(trained):
    _, out = trained
    report = json.loads((out / "report.json").read_text())
    assert report["eval_r_dice"] >= 0.99
    assert report["config"]["name"] == "tiny" and report["seed"] == 0 and report["version"]
    assert (out / "model.bimonn").is_file()


def test_binarize_and_eval(trained, capsys):
    cfg, out = trained
    assert main(["binarize", "--config", cfg, "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "dilation" in printed and "totally activated" in printed
    assert (out / "certificate" / "certificate.json").is_file()
    assert (out / "weights" / "layer0_k0_n0.pgm").read_bytes().startswith(b"P5")
    assert main(["eval", "--config", cfg, "--out", str(out)]) == EXIT_OK
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["r_dice"] >= 0.99 and metrics["b_dice"] >= 0.99
    assert metrics["n_images"] == 20 and metrics["border"] == 2
    assert not any("time" in key for key in metrics)


def test_eval_is_deterministic(trained, tmp_path):
    cfg, out = trained
    model = str(out / "model.bimonn")
    for name in ("a", "b"):
        assert main(["eval", "--config", cfg, "--model", model, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()


def test_threads_env(trained, tmp_path, monkeypatch):
    cfg, out = trained
    model = str(out / "model.bimonn")
    for threads in ("1", "3"):
        monkeypatch.setenv("BIMONN_THREADS", threads)
        assert main(["eval", "--config", cfg, "--model", model, "--out", str(tmp_path / threads)]) == 0
    assert (tmp_path / "1" / "metrics.json").read_bytes() == (tmp_path / "3" / "metrics.json").read_bytes()
    monkeypatch.setenv("BIMONN_THREADS", "zero")
    assert main(["eval", "--config", cfg, "--model", model, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bench(tmp_path):
    cfg = write_config(tmp_path, {**TINY, "bench": {"sizes": [64], "repetitions": 2,
                                                    "ses": [{"shape": "disk", "side": 5}]}})
    assert main(["bench", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    (run,) = json.loads((tmp_path / "bench.json").read_text())["runs"]
    assert run["identical"] and run["size"] == 64
    assert set(run) == {"size", "se", "repetitions", "float_mpix_per_s", "binary_mpix_per_s",
                        "speedup", "identical"}


@pytest.mark.parametrize("patch", [
    {"architecture": [[1, 2, 5], [1, 1, 5]]},
    {"architecture": [[2, 1, 5]]},
    {"target": {"kind": "dilation"}},
    {"target": {"kind": "dilation", "se": {"shape": "star", "side": 5}}},
    {"dataset": {"kind": "diskorect", "size": 20}},
    {"dataset": {"kind": "mnist"}},
    {"dataset": {"kind": "mnist", "source_path": "/nonexistent/idx"}},
    {"train": {"loss": "hinge"}},
    {"train": {"momentum": 0.9}},
])
def test_config_errors(tmp_path, patch):
    cfg = write_config(tmp_path, {**TINY, **patch})
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_missing_config(tmp_path):
    assert main(["train", "--config", "no-such-preset", "--out", str(tmp_path)]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG


def test_divergence_exit(tmp_path):
    cfg = write_config(tmp_path, {**TINY, "train": {"learning_rate": 1e308, "max_steps": 20}})
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--config", cfg, "--out", str(tmp_path)])
    assert code == EXIT_DIVERGED
    assert (tmp_path / "model.last_good.bimonn").is_file()
    assert "diverged" in json.loads((tmp_path / "report.json").read_text())


def test_io_errors(tmp_path):
    cfg = write_config(tmp_path)
    (tmp_path / "model.bimonn").write_bytes(b"garbage")
    assert main(["binarize", "--out", str(tmp_path)]) == EXIT_IO
    assert main(["eval", "--config", cfg, "--model", str(tmp_path / "missing.bimonn")]) == EXIT_IO


def test_extends(tmp_path):
    base = write_config(tmp_path, TINY, "base.json")
    child = write_config(tmp_path, {"extends": base, "train": {"loss": "mse"}}, "child.json")
    config = parse_config(resolve_config(child))
    assert config.train.loss == "mse" and config.train.max_steps == 300


def test_presets_parse():
    presets = load_presets()
    assert len(presets) >= 57
    for name, raw in presets.items():
        if raw["dataset"]["kind"] in ("mnist", "inverted_mnist"):
            raw = {**raw, "dataset": {**raw["dataset"], "kind": "diskorect"}}
        config = parse_config(resolve_config(raw))
        assert config.name == name
    arch = {n: presets[n]["architecture"] for n in ("axspa-arch1", "axspa-arch2", "axspa-arch3")}
    assert arch["axspa-arch1"] == [[2, 1, 41]]
    assert arch["axspa-arch2"] == [[2, 2, 21], [2, 1, 21]]
    assert arch["axspa-arch3"] == [[2, 2, 15], [2, 2, 15], [2, 1, 15]]


def test_presets_command(capsys):
    assert main(["presets"]) == EXIT_OK
    assert "dilation-hstick-diskorect" in capsys.readouterr().out
