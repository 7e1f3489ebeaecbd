"""PGD attack, evaluation under clean / noisy / adversarial inputs, and sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import Denoiser, DenoiserParams
from .metrics import image_metrics
from .mri import AcquisitionModel, build_cartesian_mask, default_acs_rows, rows_budget
from .phantoms import Dataset
from .unrolling import NoisePlan, ReconConfig, data_term, reconstruct

AXES = ("epsilon", "noise", "sampling_rate", "unroll_steps")
CSV_COLUMNS = ("model", "axis", "value", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "n_images")
DEFAULT_EPSILONS = (0.0, 0.001, 0.002, 0.004, 0.008)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.004
    steps: int = 10
    step_size: float | None = None  # default 2.5 * epsilon / steps
    restarts: int = 1
    seed: int = 0
    attack_base: bool = False  # attack the unsmoothed pipeline instead of the deployed one

    def __post_init__(self):
        if self.epsilon < 0 or self.steps < 0 or self.restarts < 1:
            raise ValueError("need epsilon >= 0, steps >= 0, restarts >= 1")

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.steps if self.steps else 0.0


def pgd_attack(recon: Callable[[Tensor], Tensor], t: np.ndarray, config: AttackConfig) -> np.ndarray:
    """l_inf PGD ascent on ||recon(delta) - t||^2; returns the best iterate seen.

    ``recon`` maps a perturbation tensor shaped like ``t`` (2-channel) to the
    reconstruction.  The ball constraint holds per real/imaginary entry.
    """
    t = np.asarray(t, dtype=np.float64)
    eps = config.epsilon
    zero = np.zeros_like(t)
    if config.steps == 0 or eps == 0:
        return zero
    step = config.resolved_step_size

    def objective_and_grad(delta):
        d = Tensor(delta, requires_grad=True)
        obj = ad.sumsq(ad.sub(recon(d), t))
        (g,) = ad.grad(obj, [d])
        return obj.item(), g

    best_delta, best_obj = zero, -math.inf
    for r in range(config.restarts):
        if r == 0:
            delta = zero
        else:
            delta = np.random.default_rng([config.seed, r]).uniform(-eps, eps, size=t.shape)
        for k in range(config.steps + 1):
            if k < config.steps:
                obj, g = objective_and_grad(delta)
            else:
                obj = ad.sumsq(ad.sub(recon(Tensor(delta)), t)).item()
            if obj > best_obj:
                best_obj, best_delta = obj, delta
            if k < config.steps:
                delta = np.clip(delta + step * np.sign(g), -eps, eps)
    return best_delta


def attack_objective(recon: Callable[[Tensor], Tensor], t: np.ndarray, delta: np.ndarray) -> float:
    return ad.sumsq(ad.sub(recon(Tensor(delta)), np.asarray(t, dtype=np.float64))).item()


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class ModelEntry:
    """A named reconstructor: denoiser parameters plus architecture config."""

    name: str
    params: DenoiserParams
    recon: ReconConfig


def eval_noise_plan(config: ReconConfig, index: int, shape: tuple[int, int]) -> NoisePlan:
    """Fixed smoothing draws for evaluating test image ``index``."""
    return NoisePlan((config.seed, 7, index), (*shape, 2))


def recon_closure(entry: ModelEntry, model: AcquisitionModel, y: np.ndarray, index: int,
                  attack_base: bool = False) -> Callable[[Tensor | None], Tensor]:
    den = Denoiser.from_params(entry.params)
    cfg = entry.recon.replace(mode="vanilla") if attack_base else entry.recon
    plan = eval_noise_plan(entry.recon, index, model.shape)
    aty = data_term(model, y)

    def run(delta=None):
        return reconstruct(cfg, den, model, aty=aty, delta=delta, noise=plan)[0]

    return run


def evaluate_image(entry: ModelEntry, model: AcquisitionModel, y: np.ndarray, target: np.ndarray, index: int,
                   condition: str = "clean", value: float = 0.0,
                   attack: AttackConfig | None = None) -> tuple[float, float]:
    """(PSNR, SSIM) of one reconstruction under ``condition`` in {clean, noise, robust}."""
    run = recon_closure(entry, model, y, index)
    delta = None
    if condition == "noise" and value > 0:
        rng = np.random.default_rng([entry.recon.seed, 11, index])
        delta = value * rng.standard_normal((*model.shape, 2))
    elif condition == "robust" and value > 0:
        cfg = AttackConfig(**{**asdict(attack or AttackConfig()), "epsilon": value})
        target_fn = recon_closure(entry, model, y, index, attack_base=cfg.attack_base)
        delta = pgd_attack(target_fn, ad.to_channels(target), cfg)
    elif condition not in ("clean", "noise", "robust"):
        raise ValueError(f"unknown condition {condition!r}")
    out = run(None if delta is None else Tensor(delta))
    return image_metrics(ad.to_complex(out), target)


@dataclass
class MetricsRecord:
    model: str
    axis: str
    value: float
    psnr: list[float]
    ssim: list[float]

    @property
    def n_images(self) -> int:
        return len(self.psnr)

    def row(self) -> dict:
        p, s = np.asarray(self.psnr), np.asarray(self.ssim)
        with np.errstate(invalid="ignore"):  # inf - inf when an image is reproduced exactly
            p_std = float(p.std())
        return {
            "model": self.model,
            "axis": self.axis,
            "value": self.value,
            "psnr_mean": float(p.mean()),
            "psnr_std": p_std,
            "ssim_mean": float(s.mean()),
            "ssim_std": float(s.std()),
            "n_images": self.n_images,
        }


@dataclass
class SweepSpec:
    axis: str
    values: list[float]
    models: list[ModelEntry]
    attack: AttackConfig = field(default_factory=AttackConfig)
    training_value: float | None = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {AXES}, got {self.axis!r}")
        if list(self.values) != sorted(self.values):
            raise ValueError("sweep values must be sorted ascending")
        if self.training_value is not None and self.training_value not in self.values:
            raise ValueError(f"sweep values must include the training setting {self.training_value}")


def map_ordered(fn, items, threads: int) -> list:
    """``[fn(i) for i in items]``, optionally on a thread pool; result order is fixed."""
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def shifted_model(dataset: Dataset, rate: float) -> AcquisitionModel:
    """Acquisition model at sampling ``rate`` with the dataset's mask seed policy."""
    acc = max(1, int(round(1.0 / rate)))
    p = dataset.params
    acs = default_acs_rows(p.height, acc) if p.acs_rows is None else min(p.acs_rows, rows_budget(p.height, acc))
    mask = build_cartesian_mask(p.height, p.width, acc, acs, p.mask_seed)
    return dataset.model.with_mask(mask)


def run_sweep(spec: SweepSpec, dataset: Dataset, threads: int = 1) -> list[MetricsRecord]:
    """Metrics for every model x axis value over ``dataset`` (aggregation order fixed)."""
    records = []
    for entry in spec.models:
        for value in spec.values:
            model = dataset.model
            kspaces = [s.kspace for s in dataset.samples]
            cur = entry
            condition = "clean"
            if spec.axis == "epsilon":
                condition = "robust"
            elif spec.axis == "noise":
                condition = "noise"
            elif spec.axis == "sampling_rate":
                model = shifted_model(dataset, value)
                kspaces = [model.forward(s.target) for s in dataset.samples]
            else:
                cur = ModelEntry(entry.name, entry.params, entry.recon.replace(n_steps=int(value)))

            def one(i, cur=cur, model=model, kspaces=kspaces, condition=condition, value=value):
                return evaluate_image(cur, model, kspaces[i], dataset.samples[i].target, i,
                                      condition, value, spec.attack)

            scores = map_ordered(one, range(len(dataset)), threads)
            records.append(MetricsRecord(entry.name, spec.axis, float(value),
                                         [s[0] for s in scores], [s[1] for s in scores]))
    return records


def run_reference_ablation(variants: Sequence[ModelEntry], dataset: Dataset,
                           epsilons: Sequence[float] = DEFAULT_EPSILONS,
                           attack: AttackConfig | None = None, threads: int = 1) -> list[MetricsRecord]:
    """Epsilon sweep per UStab-reference variant (one fine-tuned model each)."""
    spec = SweepSpec("epsilon", list(epsilons), list(variants), attack or AttackConfig())
    return run_sweep(spec, dataset, threads)


# ---------------------------------------------------------------------------
# serialization

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in records:
        row = r.row()
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_csv_rows(text: str) -> list[dict]:
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row = dict(raw)
        for key in ("value", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std"):
            row[key] = float(row[key])
        row["n_images"] = int(row["n_images"])
        rows.append(row)
    return rows


def curves(records: Sequence[MetricsRecord]) -> dict:
    """Plot-ready ``{model: [(x, psnr_mean, psnr_std), ...]}``."""
    out: dict[str, list] = {}
    for r in records:
        row = r.row()
        out.setdefault(r.model, []).append([row["value"], row["psnr_mean"], row["psnr_std"]])
    return out


def _finite(v):
    """JSON has no infinity: non-finite floats become null (identical images give PSNR = inf)."""
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _finite(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_finite(x) for x in v]
    return v


def records_to_json(records: Sequence[MetricsRecord], provenance: dict) -> str:
    doc = {
        "provenance": provenance,
        "rows": [r.row() for r in records],
        "per_image": [{"model": r.model, "value": r.value, "psnr": r.psnr, "ssim": r.ssim} for r in records],
        "curves": curves(records),
        "non_finite_as_null": True,
    }
    return json.dumps(_finite(doc), sort_keys=True, indent=2, allow_nan=False)
