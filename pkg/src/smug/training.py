"""Losses, Adam, and the deterministic pre-training / fine-tuning loops."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import Denoiser, DenoiserParams, load_params_full, save_params
from .metrics import image_metrics
from .mri import AcquisitionModel
from .phantoms import Dataset, Sample
from .unrolling import NoisePlan, ReconConfig, ReconTrace, reconstruct

log = logging.getLogger(__name__)

REFERENCES = ("D(t)", "t", "D(x_n)", "frozen-D(t)", "frozen-D(x_n)")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    lr_initial: float = 1e-3
    decay_start: int = 4
    beta1: float = 0.5
    beta2: float = 0.999
    eps_hat: float = 1e-8
    batch_size: int = 2
    lambda_ell: float = 1.0
    sigma: float = 0.01
    m: int = 10
    seed: int = 0
    reference: str = "D(t)"
    reuse_noise: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr_initial <= 0:
            raise ValueError(f"lr_initial must be > 0, got {self.lr_initial}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.lambda_ell < 0:
            raise ValueError(f"lambda_ell must be >= 0, got {self.lambda_ell}")
        if self.batch_size < 1 or self.m < 1 or self.sigma < 0:
            raise ValueError("batch_size and m must be >= 1, sigma >= 0")
        if self.reference not in REFERENCES:
            raise ValueError(f"reference must be one of {REFERENCES}, got {self.reference!r}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant until ``decay_start``, then linear down to 0 at the final epoch.

    Runs too short to reach ``decay_start`` keep the initial rate throughout.
    """
    last = cfg.epochs - 1
    if epoch < cfg.decay_start or cfg.decay_start >= last:
        return cfg.lr_initial
    return cfg.lr_initial * (last - epoch) / (last - cfg.decay_start)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray], lr: float,
              betas: tuple[float, float] = (0.5, 0.999), eps_hat: float = 1e-8) -> list[np.ndarray]:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must have the same length")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i} has shape {p.shape} but gradient {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        out.append(p - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps_hat))
    return out


# ---------------------------------------------------------------------------
# losses

def _batch(t) -> Tensor:
    t = ad.as_tensor(t)
    return ad.reshape(t, (1, *t.shape)) if t.ndim == 3 else t


def pretrain_loss(denoiser, t, sigma: float, m: int, noise: np.ndarray | None = None) -> Tensor:
    """Monte Carlo mean of ||D(t + nu) - t||^2 with ``noise`` as unit-normal draws."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    tb = _batch(t)
    if sigma == 0:
        return ad.sumsq(ad.sub(denoiser(tb), tb))
    if noise is None or noise.shape[0] < m:
        raise ValueError(f"need {m} noise draws for sigma > 0")
    out = denoiser(ad.add(tb, sigma * noise[:m].reshape(m, *tb.shape[1:])))
    return ad.sumsq(ad.sub(out, tb)) / m


def ustab_loss(denoiser, trace: ReconTrace, t, sigma: float, m: int, reference: str = "D(t)",
               frozen=None, reuse_noise: bool = True, noise: NoisePlan | None = None) -> Tensor:
    """sum_n E_nu ||D(x_n + nu) - ref_n||^2 over the first N states of ``trace``.

    With ``reuse_noise`` the noisy denoiser outputs recorded during the
    forward pass are used; otherwise fresh draws come from ``noise``.
    ``frozen`` is the fixed denoiser behind the ``frozen-*`` references.
    """
    if reference not in REFERENCES:
        raise ValueError(f"reference must be one of {REFERENCES}, got {reference!r}")
    if reference.startswith("frozen") and frozen is None:
        raise ValueError(f"reference {reference!r} needs a frozen denoiser")
    tb = _batch(t)
    n_steps = trace.n_steps
    if len(trace.x) != n_steps + 1 or (n_steps and trace.x[0].shape != tb.shape):
        raise ValueError("trace does not match the target image or is incomplete")
    if reuse_noise and trace.mode not in ("smug", "smugv0"):
        raise ValueError(f"cannot reuse noisy denoised outputs from a {trace.mode!r} trace")
    if reuse_noise and len(trace.denoised) != n_steps:
        raise ValueError(
            f"trace holds {len(trace.denoised)} denoised batches for {n_steps} steps; "
            "was it produced by a smoothed mode with this denoiser?"
        )
    if not reuse_noise and sigma > 0 and noise is None:
        raise ValueError("fresh-noise UStab needs a NoisePlan")
    fixed_ref = None
    if reference == "D(t)":
        fixed_ref = denoiser(tb)
    elif reference == "t":
        fixed_ref = tb
    elif reference == "frozen-D(t)":
        fixed_ref = frozen(Tensor(tb.data))
    total = None
    for n in range(n_steps):
        x_n = trace.x[n]
        if reuse_noise:
            d = trace.denoised[n]
        elif sigma == 0:
            d = denoiser(x_n)
        else:
            # offset the step index so fresh draws never coincide with the forward pass
            draws = noise.draw(10_000 + n, m)
            d = denoiser(ad.add(x_n, sigma * draws.reshape(m, *x_n.shape[1:])))
        if fixed_ref is not None:
            ref = fixed_ref
        elif reference == "D(x_n)":
            ref = denoiser(x_n)
        else:
            ref = frozen(x_n)
        term = ad.sumsq(ad.sub(d, ref)) / d.shape[0]
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def finetune_loss(denoiser, model: AcquisitionModel, y: np.ndarray, t: np.ndarray, config: ReconConfig,
                  lambda_ell: float, reference: str = "D(t)", frozen=None, reuse_noise: bool = True,
                  noise: NoisePlan | None = None) -> tuple[Tensor, Tensor, ReconTrace]:
    """lambda_ell ||x_N - t||^2 + UStab for an RS-applied architecture.

    Returns (loss, reconstruction, trace).
    """
    if config.mode not in ("smug", "smugv0"):
        raise ValueError(f"fine-tuning needs an RS-applied mode (smug or smugv0), got {config.mode!r}")
    t_ch = ad.to_channels(t)
    x_n, trace = reconstruct(config, denoiser, model, y, noise=noise)
    loss = ustab_loss(denoiser, trace, t_ch, config.sigma, config.m, reference, frozen, reuse_noise, trace.noise)
    if lambda_ell:
        loss = lambda_ell * ad.sumsq(ad.sub(x_n, t_ch)) + loss
    return loss, x_n, trace


def mse_loss(denoiser, model: AcquisitionModel, y: np.ndarray, t: np.ndarray, config: ReconConfig) -> Tensor:
    """Plain end-to-end reconstruction loss ||x_N - t||^2 (vanilla baseline)."""
    x_n, _ = reconstruct(config, denoiser, model, y)
    return ad.sumsq(ad.sub(x_n, ad.to_channels(t)))


# ---------------------------------------------------------------------------
# training loops

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_psnr: float
    val_ssim: float
    wall_time_s: float


@dataclass
class TrainState:
    params: DenoiserParams
    adam: AdamState
    epoch: int = 0  # epochs completed
    best_params: DenoiserParams | None = None
    best_val: float = -np.inf
    history: list[EpochRecord] = field(default_factory=list)


def evaluate(params: DenoiserParams, dataset: Dataset, config: ReconConfig) -> tuple[float, float]:
    """Mean clean (PSNR, SSIM) of ``config`` reconstructions over ``dataset``."""
    den = Denoiser.from_params(params)
    scores = []
    for i, s in enumerate(dataset.samples):
        plan = NoisePlan((config.seed, 7, i), (*dataset.model.shape, 2))
        out, _ = reconstruct(config, den, dataset.model, s.kspace, noise=plan)
        scores.append(image_metrics(ad.to_complex(out), s.target))
    arr = np.array(scores)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


SampleLoss = Callable[[Denoiser, Sample, int, int], Tensor]


def train_loop(state: TrainState, dataset: Dataset, cfg: TrainConfig, sample_loss: SampleLoss,
               val: tuple[Dataset, ReconConfig] | None = None,
               on_epoch: Callable[[TrainState], None] | None = None,
               record_time: bool = True, threads: int = 1) -> TrainState:
    """Seeded-shuffle mini-batch Adam, resumable from any completed epoch."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if state.best_params is None:
        state.best_params = state.params.copy()
    n = len(dataset)
    betas = (cfg.beta1, cfg.beta2)
    while state.epoch < cfg.epochs:
        epoch = state.epoch
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            arrays = state.params.arrays()
            acc = [np.zeros_like(a) for a in arrays]

            def one(i, params=state.params, epoch=epoch):
                den = Denoiser.from_params(params, requires_grad=True)
                loss = sample_loss(den, dataset.samples[i], epoch, int(i))
                return loss.item(), ad.grad(loss, den.weights)

            # reduction runs in batch order whatever the worker count
            for value, grads in _map(one, idx, threads):
                for a, g in zip(acc, grads):
                    a += g
                losses.append(value)
            grads = [a / len(idx) for a in acc]
            new = adam_step(state.adam, arrays, grads, lr, betas, cfg.eps_hat)
            state.params = DenoiserParams.from_arrays(state.params.config, new)
        if val is not None:
            vp, vs = evaluate(state.params, *val)
        else:
            vp, vs = float("nan"), float("nan")
        rec = EpochRecord(epoch, lr, float(np.mean(losses)), vp, vs,
                          time.perf_counter() - t0 if record_time else 0.0)
        state.history.append(rec)
        if val is None or vp > state.best_val:
            state.best_val = vp if val is not None else state.best_val
            state.best_params = state.params.copy()
        state.epoch += 1
        log.info("epoch %d lr %.3g loss %.5g val_psnr %.3f", epoch, lr, rec.train_loss, vp)
        if on_epoch is not None:
            on_epoch(state)
    return state


def _noise_shape(dataset: Dataset) -> tuple[int, int, int]:
    return (*dataset.model.shape, 2)


def run_pretrain(dataset: Dataset, params: DenoiserParams, cfg: TrainConfig,
                 val: tuple[Dataset, ReconConfig] | None = None, state: TrainState | None = None,
                 on_epoch=None, record_time: bool = True, threads: int = 1) -> TrainState:
    """Denoiser pre-training on noisy targets."""
    shape = _noise_shape(dataset)

    def loss(den, sample, epoch, i):
        draws = NoisePlan((cfg.seed, epoch, i), shape).draw(0, cfg.m) if cfg.sigma > 0 else None
        return pretrain_loss(den, ad.to_channels(sample.target), cfg.sigma, cfg.m, draws)

    state = state or TrainState(params.copy(), AdamState.zeros_like(params.arrays()))
    return train_loop(state, dataset, cfg, loss, val, on_epoch, record_time, threads)


def run_finetune(dataset: Dataset, params: DenoiserParams, cfg: TrainConfig, recon: ReconConfig,
                 val: tuple[Dataset, ReconConfig] | None = None, frozen_params: DenoiserParams | None = None,
                 state: TrainState | None = None, on_epoch=None, record_time: bool = True, threads: int = 1) -> TrainState:
    """UStab fine-tuning of an RS-applied architecture, initialised from ``params``."""
    if recon.mode not in ("smug", "smugv0"):
        raise ValueError(f"fine-tuning needs an RS-applied mode (smug or smugv0), got {recon.mode!r}")
    recon = recon.replace(sigma=cfg.sigma, m=cfg.m)
    frozen = Denoiser.from_params(frozen_params) if frozen_params is not None else None
    if cfg.reference.startswith("frozen") and frozen is None:
        raise ValueError(f"reference {cfg.reference!r} needs frozen (vanilla) denoiser parameters")
    shape = _noise_shape(dataset)
    model = dataset.model

    def loss(den, sample, epoch, i):
        plan = NoisePlan((cfg.seed, epoch, i), shape)
        value, _, _ = finetune_loss(den, model, sample.kspace, sample.target, recon, cfg.lambda_ell,
                                    cfg.reference, frozen, cfg.reuse_noise, plan)
        return value

    state = state or TrainState(params.copy(), AdamState.zeros_like(params.arrays()))
    return train_loop(state, dataset, cfg, loss, val, on_epoch, record_time, threads)


def run_supervised(dataset: Dataset, params: DenoiserParams, cfg: TrainConfig, recon: ReconConfig,
                   val: tuple[Dataset, ReconConfig] | None = None, state: TrainState | None = None,
                   on_epoch=None, record_time: bool = True, threads: int = 1) -> TrainState:
    """End-to-end MSE training of the vanilla baseline."""
    model = dataset.model

    def loss(den, sample, epoch, i):
        return mse_loss(den, model, sample.kspace, sample.target, recon)

    state = state or TrainState(params.copy(), AdamState.zeros_like(params.arrays()))
    return train_loop(state, dataset, cfg, loss, val, on_epoch, record_time, threads)


LAMBDA_ELL_GRID = (0.1, 1.0, 10.0)


def select_lambda_ell(clean_psnr: dict[float, float], vanilla_clean: float) -> float:
    """Pick lambda_ell whose validation clean PSNR is closest to the vanilla model's.

    Ties go to the smaller lambda_ell, which leaves more weight on UStab.
    """
    if not clean_psnr:
        raise ValueError("no lambda_ell candidates")
    return min((abs(p - vanilla_clean), lam) for lam, p in clean_psnr.items())[1]


# ---------------------------------------------------------------------------
# checkpoints with optimizer state

def save_train_state(state: TrainState, path, meta: dict | None = None) -> None:
    best = state.best_params or state.params
    extra = {
        "epoch": state.epoch,
        "adam_step": state.adam.step,
        "best_val": None if not np.isfinite(state.best_val) else state.best_val,
        "history": [asdict(r) for r in state.history],
        "meta": meta or {},
    }
    arrays = [*state.adam.m, *state.adam.v, best.flatten()]
    save_params(state.params, path, extra=extra, extra_arrays=arrays)


def load_train_state(path) -> tuple[TrainState, dict]:
    params, extra, arrays = load_params_full(path)
    shapes = [a.shape for a in params.arrays()]
    k = len(shapes)
    if len(arrays) != 2 * k + 1:
        raise ValueError(f"{path}: checkpoint carries no optimizer state")
    m = [a.reshape(s) for a, s in zip(arrays[:k], shapes)]
    v = [a.reshape(s) for a, s in zip(arrays[k:2 * k], shapes)]
    best = DenoiserParams.unflatten(params.config, arrays[-1])
    bv = extra.get("best_val")
    state = TrainState(params, AdamState(m, v, int(extra["adam_step"])), int(extra["epoch"]), best,
                       -np.inf if bv is None else float(bv),
                       [EpochRecord(**r) for r in extra.get("history", [])])
    return state, extra.get("meta", {})
