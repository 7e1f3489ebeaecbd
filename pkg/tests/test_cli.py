import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from smug.cli import load_checkpoint, main
from smug.container import read_container
from smug.denoiser import DenoiserConfig, init_params

TINY = {
    "data": {"height": 16, "width": 16, "n_coils": 2, "train_count": 3, "val_count": 2, "test_count": 2},
    "denoiser": {"depth": 2, "channels": 4},
    "recon": {"n_steps": 2, "m": 2},
    "train": {"epochs": 2, "decay_start": 0, "m": 2, "batch_size": 2},
    "attack": {"steps": 2},
}


def write_cfg(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:  # argparse usage errors
        return exc.code


def tree_hash(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(d.rglob("*")) if p.is_file()}


def read_pgm(path):
    """Minimal independent P5 reader."""
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode())
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    assert magic == "P5" and maxval == 255
    return np.frombuffer(raw[pos:], dtype=np.uint8).reshape(h, w)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "cfg.json", TINY)
    assert run("generate-data", "--config", cfg, "--out", root / "data") == 0
    assert run("pretrain", "--config", cfg, "--data", root / "data", "--out", root / "pre", "--threads", 1) == 0
    return root, cfg


def test_generate_data_deterministic(ws, tmp_path, capsys):
    root, cfg = ws
    assert run("generate-data", "--config", cfg, "--out", tmp_path / "again", "--acceleration", 4) == 0
    assert "sampling rate 25.0%" in capsys.readouterr().out
    assert tree_hash(root / "data") == tree_hash(tmp_path / "again")
    assert {"train.smugds", "val.smugds", "test.smugds"} <= set(tree_hash(tmp_path / "again"))


def test_default_config_split_counts(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", {"data": {"height": 16, "width": 16, "n_coils": 1}})
    assert run("generate-data", "--config", cfg, "--out", tmp_path / "d") == 0
    summary = json.loads((tmp_path / "d" / "summary.json").read_text())
    assert [summary["splits"][s]["count"] for s in ("train", "val", "test")] == [40, 8, 8]


def test_existing_output_needs_force(ws, capsys):
    root, cfg = ws
    assert run("generate-data", "--config", cfg, "--out", root / "data") == 1
    assert "--force" in capsys.readouterr().err
    before = tree_hash(root / "data")
    assert run("generate-data", "--config", cfg, "--out", root / "data", "--force") == 0
    assert tree_hash(root / "data") == before


def test_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", {"data": {"hieght": 8}})
    assert run("generate-data", "--config", cfg, "--out", tmp_path / "o") == 1
    assert "hieght" in capsys.readouterr().err
    cfg = write_cfg(tmp_path / "c2.json", {"nonsense": {}})
    assert run("generate-data", "--config", cfg, "--out", tmp_path / "o") == 1


def test_bad_flag_is_usage_error(tmp_path):
    assert run("generate-data", "--out", tmp_path / "o", "--bogus") == 1
    assert run("sweep", "--data", tmp_path, "--out", tmp_path / "o") == 1  # no --model


def test_runtime_failure_exit_code(ws, tmp_path):
    root, cfg = ws
    bad = tmp_path / "broken.smugck"
    bad.write_bytes(b"SMUGPK01garbage")
    assert run("reconstruct", "--config", cfg, "--data", root / "data", "--checkpoint", bad,
               "--out", tmp_path / "r") == 2


def test_pretrain_outputs(ws):
    root, _ = ws
    rows = (root / "pre" / "log.csv").read_text().splitlines()
    assert len(rows) == 1 + TINY["train"]["epochs"]
    cfg = json.loads((root / "pre" / "config.json").read_text())
    assert cfg["train"]["epochs"] == 2 and cfg["run"]["command"] == "pretrain"


def test_zero_epochs_checkpoint_is_init(ws, tmp_path):
    root, cfg = ws
    assert run("pretrain", "--config", cfg, "--data", root / "data", "--out", tmp_path / "p", "--epochs", 0) == 0
    params, meta = load_checkpoint(str(tmp_path / "p" / "checkpoint.smugck"))
    init = init_params(DenoiserConfig(depth=2, channels=4), 0)
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), init.arrays()))
    assert meta["stage"] == "pretrain"
    assert (tmp_path / "p" / "log.csv").read_text().count("\n") == 1


def test_finetune_rejects_vanilla(ws, tmp_path, capsys):
    root, cfg = ws
    code = run("finetune", "--config", cfg, "--data", root / "data", "--out", tmp_path / "f",
               "--init", root / "pre", "--mode", "vanilla")
    assert code == 1 and "RS-applied" in capsys.readouterr().err


def test_finetune_and_mode_mismatch(ws, tmp_path, capsys):
    root, cfg = ws
    assert run("finetune", "--config", cfg, "--data", root / "data", "--out", tmp_path / "f",
               "--init", root / "pre", "--mode", "smug", "--epochs", 1) == 0
    code = run("reconstruct", "--config", cfg, "--data", root / "data", "--checkpoint", tmp_path / "f",
               "--out", tmp_path / "r", "--mode", "vanilla")
    assert code == 1 and "trained for mode" in capsys.readouterr().err


def test_missing_checkpoint_named(ws, tmp_path, capsys):
    root, cfg = ws
    code = run("reconstruct", "--config", cfg, "--data", root / "data", "--checkpoint", tmp_path / "nope.smugck",
               "--out", tmp_path / "r")
    assert code == 1 and "nope.smugck" in capsys.readouterr().err


def test_reconstruct_outputs_and_degeneracy(ws, tmp_path):
    root, _ = ws
    cfg = write_cfg(tmp_path / "s0.json", {**TINY, "recon": {"n_steps": 2, "m": 2, "sigma": 0.0}})
    for mode in ("vanilla", "smug"):
        assert run("reconstruct", "--config", cfg, "--data", root / "data", "--checkpoint", root / "pre",
                   "--out", tmp_path / mode, "--mode", mode) == 0
    a = (tmp_path / "vanilla" / "metrics.csv").read_text()
    assert a == (tmp_path / "smug" / "metrics.csv").read_text()
    assert len(a.splitlines()) == 1 + TINY["data"]["test_count"]
    for i in range(TINY["data"]["test_count"]):
        header, payload = read_container(tmp_path / "vanilla" / f"recon_{i:03d}.smugimg")
        img = payload.view(np.complex128).reshape(header["shape"])
        pix = read_pgm(tmp_path / "vanilla" / f"recon_{i:03d}.pgm")
        assert pix.shape == img.shape == (16, 16)


def test_attack_outputs(ws, tmp_path):
    root, cfg = ws
    assert run("attack", "--config", cfg, "--data", root / "data", "--checkpoint", root / "pre",
               "--out", tmp_path / "a", "--mode", "vanilla", "--epsilon", 0.004) == 0
    lines = (tmp_path / "a" / "attack.csv").read_text().splitlines()
    assert len(lines) == 3
    for i in range(2):
        _, delta = read_container(tmp_path / "a" / f"delta_{i:03d}.smugarr")
        assert np.max(np.abs(delta)) <= 0.004


def sweep(root, cfg, out, *extra):
    return run("sweep", "--config", cfg, "--data", root / "data", "--out", out, "--threads", 1,
               "--model", f"vanilla={root / 'pre'}:vanilla", "--model", f"smug={root / 'pre'}:smug", *extra)


def test_sweep_report_and_reproducibility(ws, tmp_path):
    root, cfg = ws
    for name, axis, values in (("eps", "epsilon", "0,0.004"), ("noise", "noise", "0,0.004")):
        assert sweep(root, cfg, tmp_path / name, "--axis", axis, "--values", values) == 0
    assert sweep(root, cfg, tmp_path / "eps2", "--axis", "epsilon", "--values", "0,0.004") == 0
    assert tree_hash(tmp_path / "eps") == tree_hash(tmp_path / "eps2")

    assert run("report", tmp_path / "eps", tmp_path / "noise", "--out", tmp_path / "rep") == 0
    assert run("report", tmp_path / "eps", tmp_path / "noise", "--out", tmp_path / "rep2") == 0
    assert tree_hash(tmp_path / "rep") == tree_hash(tmp_path / "rep2")
    rows = (tmp_path / "rep" / "report.csv").read_text().splitlines()
    assert rows[0].startswith("model,clean_psnr_mean") and len(rows) == 3


def test_report_vanilla_only_zero_deltas(ws, tmp_path):
    root, cfg = ws
    assert run("sweep", "--config", cfg, "--data", root / "data", "--out", tmp_path / "s",
               "--model", f"vanilla={root / 'pre'}:vanilla", "--axis", "epsilon", "--values", "0,0.004") == 0
    assert run("report", tmp_path / "s", "--out", tmp_path / "r") == 0
    import csv
    row = next(csv.DictReader((tmp_path / "r" / "report.csv").open()))
    deltas = [v for k, v in row.items() if k.endswith("_delta") and v != ""]
    assert deltas and all(float(v) == 0.0 for v in deltas)


def test_report_refuses_mixed_datasets(ws, tmp_path, capsys):
    root, cfg = ws
    other = write_cfg(tmp_path / "o.json", {**TINY, "data": {**TINY["data"], "seed": 1}})
    assert run("generate-data", "--config", other, "--out", tmp_path / "data1") == 0
    for d, data in (("a", root / "data"), ("b", tmp_path / "data1")):
        assert run("sweep", "--config", cfg, "--data", data, "--out", tmp_path / d,
                   "--model", f"vanilla={root / 'pre'}:vanilla", "--values", "0") == 0
    assert run("report", tmp_path / "a", tmp_path / "b", "--out", tmp_path / "r") == 1
    assert "refusing" in capsys.readouterr().err


@pytest.mark.parametrize("command", ["pretrain", "train-baseline"])
def test_training_commands_reproducible(ws, tmp_path, command):
    root, cfg = ws
    for out in ("x", "y"):
        assert run(command, "--config", cfg, "--data", root / "data", "--out", tmp_path / out,
                   "--threads", 1, "--epochs", 1) == 0
    assert tree_hash(tmp_path / "x") == tree_hash(tmp_path / "y")


def test_threads_env_fallback(ws, tmp_path, monkeypatch):
    root, cfg = ws
    monkeypatch.setenv("SMUG_THREADS", "2")
    assert sweep(root, cfg, tmp_path / "t2", "--axis", "epsilon", "--values", "0,0.004") == 0
    monkeypatch.delenv("SMUG_THREADS")
    assert sweep(root, cfg, tmp_path / "t1", "--axis", "epsilon", "--values", "0,0.004") == 0
    assert (tmp_path / "t1" / "sweep.csv").read_bytes() == (tmp_path / "t2" / "sweep.csv").read_bytes()


def test_resume_continues_run(ws, tmp_path):
    root, cfg = ws
    args = ("pretrain", "--config", cfg, "--data", root / "data", "--threads", 1)
    assert run(*args, "--out", tmp_path / "full") == 0
    assert run(*args, "--out", tmp_path / "part", "--epochs", 1) == 0
    # resuming with the full epoch budget finishes the remaining epoch
    assert run(*args, "--out", tmp_path / "part", "--resume") == 0
    a, _ = load_checkpoint(str(tmp_path / "full" / "checkpoint.smugck"))
    b, _ = load_checkpoint(str(tmp_path / "part" / "checkpoint.smugck"))
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
