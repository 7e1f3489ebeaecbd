"""Command-line interface: ``smug <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .container import ContainerError, write_container
from .denoiser import Denoiser, DenoiserConfig, DenoiserParams, init_params, load_params_full
from .metrics import image_metrics
from .phantoms import Dataset, DatasetParams, load_dataset, make_dataset, save_dataset
from .robustness import (
    AXES,
    AttackConfig,
    ModelEntry,
    SweepSpec,
    evaluate_image,
    eval_noise_plan,
    map_ordered,
    pgd_attack,
    read_csv_rows,
    recon_closure,
    records_to_csv,
    records_to_json,
    run_sweep,
)
from .training import (
    TrainConfig,
    TrainState,
    load_train_state,
    run_finetune,
    run_pretrain,
    run_supervised,
    save_train_state,
)
from .unrolling import MODES, ReconConfig, reconstruct

CHECKPOINT = "checkpoint.smugck"
CONFIG_FILE = "config.json"


class UsageError(Exception):
    """Bad flags or configuration (exit code 1)."""


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class DataSection:
    height: int = 32
    width: int = 32
    n_coils: int = 4
    acceleration: int = 4
    acs_rows: int | None = None
    mask_seed: int = 0
    noise_std: float = 0.0
    seed: int = 0
    train_count: int = 40
    val_count: int = 8
    test_count: int = 8

    def params(self) -> DatasetParams:
        return DatasetParams(self.height, self.width, self.n_coils, self.acceleration,
                             self.acs_rows, self.mask_seed, self.noise_std)

    def counts(self) -> dict[str, int]:
        return {"train": self.train_count, "val": self.val_count, "test": self.test_count}


@dataclass(frozen=True)
class DenoiserSection:
    depth: int = 3
    channels: int = 16
    kernel_size: int = 3
    residual: bool = True
    init_seed: int = 0

    def config(self) -> DenoiserConfig:
        return DenoiserConfig(self.depth, self.channels, self.kernel_size, self.residual)


@dataclass(frozen=True)
class SweepSection:
    axis: str = "epsilon"
    values: tuple[float, ...] = (0.0, 0.001, 0.002, 0.004, 0.008)
    training_value: float | None = None


@dataclass(frozen=True)
class ReportSection:
    epsilon: float = 0.004
    noise_level: float = 0.004


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    recon: ReconConfig = field(default_factory=ReconConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    sweep: SweepSection = field(default_factory=SweepSection)
    report: ReportSection = field(default_factory=ReportSection)

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _build_section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise UsageError(f"config section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"unknown key(s) in config section {name!r}: {', '.join(unknown)}")
    raw = dict(raw)
    if "values" in raw and isinstance(raw["values"], list):
        raw["values"] = tuple(raw["values"])
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config section {name!r}: {exc}") from None


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(unknown)}")
    parts = {name: _build_section(name, SECTIONS[name], doc[name]) for name in doc}
    return RunConfig(**parts)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    return config_from_dict(doc)


def _override(cfg: RunConfig, section: str, **changes) -> RunConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    cur = asdict(getattr(cfg, section))
    new = _build_section(section, SECTIONS[section], {**cur, **changes})
    return RunConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(RunConfig)}, section: new})


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# helpers

def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("SMUG_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"SMUG_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError(f"thread count must be >= 1, got {n}")
    return n


def _prepare_out(out: str, force: bool, resume: bool = False) -> Path:
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not (force or resume):
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(out: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    doc = cfg.to_dict()
    if extra:
        doc["run"] = extra
    (out / CONFIG_FILE).write_text(dump_json(doc))


def _split_path(data: str, split: str) -> Path:
    return Path(data) / f"{split}.smugds"


def _load_split(data: str, split: str) -> Dataset:
    path = _split_path(data, split)
    if not path.exists():
        raise UsageError(f"dataset split {split!r} not found at {path}")
    return load_dataset(path)


def load_checkpoint(path: str) -> tuple[DenoiserParams, dict]:
    """Best-on-validation parameters of a checkpoint and its metadata."""
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} not found")
    try:
        state, meta = load_train_state(path)
        return state.best_params, meta
    except ValueError:
        params, extra, _ = load_params_full(path)
        return params, extra.get("meta", {})


def _checkpoint_arg(path: str) -> str:
    p = Path(path)
    return str(p / CHECKPOINT) if p.is_dir() else path


def _recon_for(cfg: RunConfig, meta: dict, path: str) -> ReconConfig:
    trained = meta.get("mode")
    if trained is not None and trained != cfg.recon.mode:
        raise UsageError(f"checkpoint {path} was trained for mode {trained!r} but the config asks "
                         f"for {cfg.recon.mode!r}")
    return cfg.recon


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def write_pgm(path: Path, image: np.ndarray, data_range: float) -> None:
    """Binary P5 preview of |image| scaled so ``data_range`` maps to 255."""
    mag = np.abs(image)
    scale = 255.0 / data_range if data_range > 0 else 0.0
    pix = np.clip(np.floor(mag * scale + 0.5), 0, 255).astype(np.uint8)
    h, w = pix.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def write_image(path: Path, image: np.ndarray, meta: dict) -> None:
    z = np.ascontiguousarray(image, dtype=np.complex128)
    header = {"format": "smug-image", "version": 1, "shape": list(z.shape),
              "layout": "complex128 as interleaved float64", **meta}
    write_container(path, header, z.view(np.float64).reshape(-1))


# ---------------------------------------------------------------------------
# commands

def cmd_generate_data(args, cfg: RunConfig) -> int:
    cfg = _override(cfg, "data", seed=args.seed, acceleration=args.acceleration)
    out = _prepare_out(args.out, args.force)
    params = cfg.data.params()
    summary = {"splits": {}}
    for split, count in cfg.data.counts().items():
        ds = make_dataset(split, count, params, cfg.data.seed)
        path = _split_path(str(out), split)
        save_dataset(ds, path)
        summary["splits"][split] = {"count": count, "bytes": path.stat().st_size,
                                    "fingerprint": ds.fingerprint()}
    mask = params.acquisition_model().mask
    summary["mask"] = {"kept_rows": len(mask.kept_rows), "height": mask.height,
                       "acs_rows": params.resolved_acs_rows, "sampling_rate": mask.sampling_rate}
    _write_config(out, cfg)
    (out / "summary.json").write_text(dump_json(summary))
    for split, info in summary["splits"].items():
        print(f"{split}: {info['count']} samples, {info['bytes']} bytes")
    print(f"mask: {len(mask.kept_rows)}/{mask.height} rows kept, sampling rate {100 * mask.sampling_rate:.1f}%")
    return 0


def _train_common(args, cfg: RunConfig, stage: str) -> int:
    cfg = _override(cfg, "train", seed=args.seed, epochs=args.epochs, lr_initial=args.lr,
                    lambda_ell=getattr(args, "lambda_ell", None), reference=getattr(args, "reference", None))
    if stage == "baseline":
        cfg = _override(cfg, "recon", mode="vanilla")
    elif stage == "finetune":
        cfg = _override(cfg, "recon", mode=args.mode)
        if cfg.recon.mode not in ("smug", "smugv0"):
            raise UsageError(f"finetune needs an RS-applied mode (smug or smugv0), got {cfg.recon.mode!r}")
        if args.init is None:
            raise UsageError("finetune needs --init (the pre-trained checkpoint)")
    if cfg.train.reference.startswith("frozen") and args.frozen is None:
        raise UsageError(f"reference {cfg.train.reference!r} needs --frozen CHECKPOINT")
    threads = _threads(args)
    train = _load_split(args.data, "train")
    val = _load_split(args.data, "val")
    out = _prepare_out(args.out, args.force, resume=args.resume)
    ckpt = out / CHECKPOINT

    init_path = None
    if args.init is not None:
        init_path = _checkpoint_arg(args.init)
        params, _ = load_checkpoint(init_path)
    else:
        params = init_params(cfg.denoiser.config(), cfg.denoiser.init_seed)
    frozen = None
    if args.frozen is not None:
        frozen, _ = load_checkpoint(_checkpoint_arg(args.frozen))

    mode = None if stage == "pretrain" else cfg.recon.mode
    val_recon = cfg.recon.replace(sigma=cfg.train.sigma, m=cfg.train.m) if mode != "vanilla" else cfg.recon
    meta = {"stage": stage, "mode": mode, "dataset": train.fingerprint(),
            "init": None if init_path is None else Path(init_path).name}
    state = None
    if args.resume and ckpt.exists():
        state, old_meta = load_train_state(ckpt)
        if old_meta.get("dataset") != meta["dataset"] or old_meta.get("stage") != stage:
            raise UsageError(f"{ckpt} belongs to a different run; refusing to resume")
    record_time = threads > 1

    def on_epoch(st: TrainState) -> None:
        save_train_state(st, ckpt, meta)

    common = dict(val=(val, val_recon), state=state, on_epoch=on_epoch, record_time=record_time,
                  threads=threads)
    if stage == "pretrain":
        state = run_pretrain(train, params, cfg.train, **common)
    elif stage == "baseline":
        state = run_supervised(train, params, cfg.train, cfg.recon, **common)
    else:
        state = run_finetune(train, params, cfg.train, cfg.recon, frozen_params=frozen, **common)
    save_train_state(state, ckpt, meta)
    frozen_name = Path(args.frozen).name if args.frozen else None
    _write_config(out, cfg, {"command": args.command, "init": meta["init"], "frozen": frozen_name})
    rows = [(r.epoch, r.lr, r.train_loss, r.val_psnr, r.val_ssim, r.wall_time_s) for r in state.history]
    (out / "log.csv").write_text(_csv(("epoch", "lr", "train_loss", "val_psnr", "val_ssim", "wall_time_s"), rows))
    msg = f"{stage}: {state.epoch} epochs"
    if math.isfinite(state.best_val):
        msg += f", best val PSNR {state.best_val:.3f} dB"
    print(msg)
    return 0


def cmd_pretrain(args, cfg):
    return _train_common(args, cfg, "pretrain")


def cmd_train_baseline(args, cfg):
    return _train_common(args, cfg, "baseline")


def cmd_finetune(args, cfg):
    return _train_common(args, cfg, "finetune")


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    cfg = _override(cfg, "recon", seed=args.seed, mode=args.mode)
    path = _checkpoint_arg(args.checkpoint)
    params, meta = load_checkpoint(path)
    recon = _recon_for(cfg, meta, path)
    test = _load_split(args.data, "test")
    out = _prepare_out(args.out, args.force)
    den = Denoiser.from_params(params)
    rows = []
    for i, s in enumerate(test.samples):
        x, trace = reconstruct(recon, den, test.model, s.kspace, noise=eval_noise_plan(recon, i, test.model.shape))
        img = ad.to_complex(x)
        p, q = image_metrics(img, s.target)
        rng = float(np.max(np.abs(s.target)))
        write_image(out / f"recon_{i:03d}.smugimg", img, {"index": i, "mode": recon.mode})
        write_pgm(out / f"recon_{i:03d}.pgm", img, rng)
        rows.append((i, p, q, trace.cg_solves, trace.all_converged))
    (out / "metrics.csv").write_text(_csv(("index", "psnr", "ssim", "cg_solves", "cg_converged"), rows))
    _write_config(out, cfg, {"command": "reconstruct", "checkpoint": Path(path).name, "dataset": test.fingerprint()})
    mean_p = float(np.mean([r[1] for r in rows])) if rows else float("nan")
    print(f"reconstructed {len(rows)} images, mean PSNR {mean_p:.3f} dB")
    return 0


def cmd_attack(args, cfg: RunConfig) -> int:
    cfg = _override(cfg, "recon", seed=args.seed, mode=args.mode)
    cfg = _override(cfg, "attack", epsilon=args.epsilon, seed=args.seed)
    path = _checkpoint_arg(args.checkpoint)
    params, meta = load_checkpoint(path)
    recon = _recon_for(cfg, meta, path)
    test = _load_split(args.data, "test")
    out = _prepare_out(args.out, args.force)
    entry = ModelEntry(Path(path).parent.name or "model", params, recon)
    threads = _threads(args)

    def one(i):
        s = test.samples[i]
        clean = evaluate_image(entry, test.model, s.kspace, s.target, i, "clean")
        target_fn = recon_closure(entry, test.model, s.kspace, i, attack_base=cfg.attack.attack_base)
        delta = pgd_attack(target_fn, ad.to_channels(s.target), cfg.attack)
        run = recon_closure(entry, test.model, s.kspace, i)
        robust = image_metrics(ad.to_complex(run(ad.Tensor(delta))), s.target)
        return clean, robust, delta

    results = map_ordered(one, list(range(len(test))), threads)
    rows = []
    for i, (clean, robust, delta) in enumerate(results):
        write_container(out / f"delta_{i:03d}.smugarr", {"format": "smug-perturbation", "version": 1,
                                                          "index": i, "shape": list(delta.shape)}, delta)
        rows.append((i, clean[0], clean[1], robust[0], robust[1], robust[0] - clean[0]))
    header = ("index", "clean_psnr", "clean_ssim", "robust_psnr", "robust_ssim", "psnr_drop")
    (out / "attack.csv").write_text(_csv(header, rows))
    _write_config(out, cfg, {"command": "attack", "checkpoint": Path(path).name, "dataset": test.fingerprint()})
    if rows:
        print(f"epsilon {cfg.attack.epsilon}: clean {np.mean([r[1] for r in rows]):.3f} dB, "
              f"robust {np.mean([r[3] for r in rows]):.3f} dB")
    return 0


def _parse_models(specs: list[str]) -> list[tuple[str, str]]:
    out = []
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--model expects NAME=CHECKPOINT[:MODE], got {spec!r}")
        out.append((name, path))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise UsageError("model names must be unique")
    return out


def cmd_sweep(args, cfg: RunConfig) -> int:
    cfg = _override(cfg, "recon", seed=args.seed)
    cfg = _override(cfg, "attack", seed=args.seed)
    values = None if args.values is None else tuple(float(v) for v in args.values.split(","))
    cfg = _override(cfg, "sweep", axis=args.axis, values=values)
    if cfg.sweep.axis not in AXES:
        raise UsageError(f"sweep axis must be one of {AXES}, got {cfg.sweep.axis!r}")
    if not args.model:
        raise UsageError("sweep needs at least one --model NAME=CHECKPOINT[:MODE]")
    test = _load_split(args.data, "test")
    entries, sources = [], {}
    for name, spec in _parse_models(args.model):
        path, _, mode = spec.rpartition(":")
        if mode not in MODES:
            path, mode = spec, ""
        path = _checkpoint_arg(path)
        params, meta = load_checkpoint(path)
        mode = mode or meta.get("mode") or cfg.recon.mode
        trained = meta.get("mode")
        if trained is not None and trained != mode:
            raise UsageError(f"checkpoint {path} was trained for mode {trained!r}, not {mode!r}")
        entries.append(ModelEntry(name, params, cfg.recon.replace(mode=mode)))
        sources[name] = {"checkpoint": Path(path).name, "mode": mode}
    try:
        spec = SweepSpec(cfg.sweep.axis, list(cfg.sweep.values), entries, cfg.attack, cfg.sweep.training_value)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _prepare_out(args.out, args.force)
    records = run_sweep(spec, test, _threads(args))
    (out / "sweep.csv").write_text(records_to_csv(records))
    provenance = {"config": cfg.to_dict(), "dataset": test.fingerprint(), "axis": cfg.sweep.axis, "models": sources}
    (out / "sweep.json").write_text(records_to_json(records, provenance) + "\n")
    _write_config(out, cfg, {"command": "sweep", "models": sources, "dataset": test.fingerprint()})
    for r in records:
        row = r.row()
        print(f"{r.model:>10s} {r.axis}={r.value:g}: PSNR {row['psnr_mean']:.3f} +- {row['psnr_std']:.3f}")
    return 0


REPORT_COLUMNS = ("clean", "noise", "robust")


def build_report(inputs: list[Path], cfg: RunConfig, baseline: str = "vanilla") -> tuple[str, str]:
    """(CSV, markdown) comparison table from sweep output directories."""
    fingerprint = None
    cells: dict[str, dict[str, dict]] = {}
    order: list[str] = []
    for d in inputs:
        side = d / "sweep.json"
        table = d / "sweep.csv"
        if not side.exists() or not table.exists():
            raise UsageError(f"{d} is not a sweep output directory")
        prov = json.loads(side.read_text())["provenance"]
        if fingerprint is None:
            fingerprint = prov["dataset"]
        elif prov["dataset"] != fingerprint:
            raise UsageError(f"{d} was evaluated on dataset {prov['dataset']}, others on {fingerprint}; "
                             "refusing to merge")
        for row in read_csv_rows(table.read_text()):
            col = None
            if row["value"] == 0.0 and row["axis"] in ("epsilon", "noise"):
                col = "clean"
            elif row["axis"] == "epsilon" and row["value"] == cfg.report.epsilon:
                col = "robust"
            elif row["axis"] == "noise" and row["value"] == cfg.report.noise_level:
                col = "noise"
            if col is None:
                continue
            if row["model"] not in cells:
                cells[row["model"]] = {}
                order.append(row["model"])
            cells[row["model"]].setdefault(col, row)
    ref = cells.get(baseline, {})
    header = ["model"]
    for c in REPORT_COLUMNS:
        header += [f"{c}_psnr_mean", f"{c}_psnr_std", f"{c}_ssim_mean", f"{c}_ssim_std",
                   f"{c}_psnr_delta", f"{c}_ssim_delta"]
    rows, md = [], []
    md.append("| model | " + " | ".join(f"{c} PSNR | {c} SSIM" for c in REPORT_COLUMNS) + " |")
    md.append("|---" * (1 + 2 * len(REPORT_COLUMNS)) + "|")
    for name in order:
        row, mdrow = [name], [name]
        for c in REPORT_COLUMNS:
            cell = cells[name].get(c)
            if cell is None:
                row += [""] * 6
                mdrow += ["-", "-"]
                continue
            base = ref.get(c)
            dp = cell["psnr_mean"] - base["psnr_mean"] if base else ""
            ds = cell["ssim_mean"] - base["ssim_mean"] if base else ""
            row += [cell["psnr_mean"], cell["psnr_std"], cell["ssim_mean"], cell["ssim_std"], dp, ds]
            tp = f"{cell['psnr_mean']:.2f}±{cell['psnr_std']:.2f}"
            ts = f"{cell['ssim_mean']:.3f}±{cell['ssim_std']:.3f}"
            if base:
                tp += f" ({dp:+.2f})"
                ts += f" ({ds:+.3f})"
            mdrow += [tp, ts]
        rows.append(row)
        md.append("| " + " | ".join(mdrow) + " |")
    note = f"\nDeltas are relative to `{baseline}`. Dataset {fingerprint}; robust at epsilon " \
           f"{cfg.report.epsilon}, noise std {cfg.report.noise_level}.\n"
    return _csv(header, rows), "\n".join(md) + "\n" + note


def cmd_report(args, cfg: RunConfig) -> int:
    cfg = _override(cfg, "report", epsilon=args.epsilon, noise_level=args.noise_level)
    inputs = [Path(p) for p in args.inputs]
    table, md = build_report(inputs, cfg, args.baseline)
    out = _prepare_out(args.out, args.force)
    (out / "report.csv").write_text(table)
    (out / "report.md").write_text(md)
    _write_config(out, cfg, {"command": "report", "inputs": [p.name for p in inputs], "baseline": args.baseline})
    print(md, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="smug", description="Smoothed unrolled MRI reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the seed(s) this command uses")
        p.add_argument("--threads", type=int, help="worker threads (default $SMUG_THREADS or 1)")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        if data:
            p.add_argument("--data", required=True, help="directory written by generate-data")

    p = sub.add_parser("generate-data", help="synthesize train/val/test phantoms and measurements")
    common(p, data=False)
    p.add_argument("--acceleration", type=int)
    p.set_defaults(func=cmd_generate_data)

    for name, func, help_ in (("pretrain", cmd_pretrain, "denoiser pre-training on noisy targets"),
                              ("train-baseline", cmd_train_baseline, "vanilla MoDL trained with plain MSE"),
                              ("finetune", cmd_finetune, "UStab fine-tuning of a smoothed architecture")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--init", help="checkpoint (file or run directory) to start from")
        p.add_argument("--resume", action="store_true", help="continue the run stored in --out")
        p.set_defaults(func=func, frozen=None)
        if name == "finetune":
            p.add_argument("--mode", help="smug or smugv0")
            p.add_argument("--lambda-ell", dest="lambda_ell", type=float)
            p.add_argument("--reference", help="UStab reference variant")
            p.add_argument("--frozen", help="checkpoint for the frozen-* references")

    p = sub.add_parser("reconstruct", help="reconstruct the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("attack", help="PGD attack on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode")
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="metrics versus epsilon, noise, sampling rate or unrolling steps")
    common(p)
    p.add_argument("--model", action="append", default=[], help="NAME=CHECKPOINT[:MODE], repeatable")
    p.add_argument("--axis")
    p.add_argument("--values", help="comma-separated axis values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="merge sweep outputs into a clean/noise/robust table")
    p.add_argument("inputs", nargs="+", help="sweep output directories")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--baseline", default="vanilla")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--noise-level", dest="noise_level", type=float)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"smug {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (ContainerError, ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"smug {args.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
