"""Unrolled MoDL reconstruction with randomized smoothing at three placements.

Modes:

* ``vanilla``  x_{n+1} = DC(D(x_n))
* ``rs-e2e``   mean over copies of the whole vanilla pipeline started at u + nu
* ``smugv0``   x_{n+1} = mean_j DC(D(x_n + nu_j))
* ``smug``     z_n = mean_j D(x_n + nu_j), x_{n+1} = DC(z_n)

All states are ``(B, H, W, 2)`` tensors.  The network input is the
image-domain data term u = A^H y (optionally perturbed); the DC step solves
(A^H A + lam I) x = u + lam z, so a perturbation of u reaches every step.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mri import AcquisitionModel, DCStats, dc_layer

MODES = ("vanilla", "rs-e2e", "smugv0", "smug")


@dataclass(frozen=True)
class ReconConfig:
    mode: str = "smug"
    n_steps: int = 8
    lam: float = 1.0
    sigma: float = 0.01
    m: int = 10
    cg_tol: float = 1e-6
    cg_max_iter: int = 100
    grad_tol: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_steps < 0:
            raise ValueError(f"n_steps must be >= 0, got {self.n_steps}")
        if self.lam <= 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if self.cg_tol <= 0 or self.cg_max_iter < 1:
            raise ValueError("cg_tol must be > 0 and cg_max_iter >= 1")

    @property
    def smoothed(self) -> bool:
        return self.mode != "vanilla" and self.sigma > 0

    def replace(self, **changes) -> "ReconConfig":
        return ReconConfig(**{**asdict(self), **changes})


class NoisePlan:
    """Seeded unit-normal draws indexed by (unrolling step, Monte Carlo sample).

    ``draw(n, m)[j]`` does not depend on ``m``, so a plan can be replayed at
    any sample count.
    """

    def __init__(self, seed: int | Sequence[int], shape: tuple[int, ...]):
        self.seed = tuple(np.atleast_1d(seed).tolist())
        self.shape = tuple(shape)

    def draw(self, step: int, m: int) -> np.ndarray:
        rng = np.random.default_rng([*self.seed, step])
        return rng.standard_normal((m, *self.shape))


def rs_expectation(f: Callable[[Tensor], Tensor], x: Tensor, sigma: float, m: int,
                   noise: np.ndarray | None = None) -> Tensor:
    """Monte Carlo estimate of E_nu f(x + nu), nu ~ N(0, sigma^2 I).

    ``x`` is a single-item batch ``(1, ...)``; ``f`` maps batches to batches.
    ``noise`` holds the unit-normal draws (at least ``m`` of them).
    """
    return _smoothed(f, x, sigma, m, noise)[0]


def _smoothed(f, x: Tensor, sigma: float, m: int, noise):
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if sigma == 0:
        out = f(x)
        return out, out
    if noise is None or noise.shape[0] < m:
        raise ValueError(f"need {m} noise draws for sigma > 0")
    xs = ad.add(x, sigma * noise[:m].reshape(m, *x.shape[1:]))
    outs = f(xs)
    return ad.reshape(ad.mean(outs, axis=0), (1, *outs.shape[1:])), outs


@dataclass
class ReconTrace:
    mode: str
    x: list[Tensor] = field(default_factory=list)  # x_0 .. x_N
    z: list[Tensor] = field(default_factory=list)
    denoised: list[Tensor] = field(default_factory=list)  # D(x_n + nu_j) batches, per step
    step_stats: list[DCStats] = field(default_factory=list)
    noise: "NoisePlan | None" = None

    @property
    def n_steps(self) -> int:
        return len(self.step_stats)

    @property
    def cg_solves(self) -> int:
        return sum(s.solves for s in self.step_stats)

    @property
    def all_converged(self) -> bool:
        return all(all(s.converged) for s in self.step_stats)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_steps": self.n_steps,
            "cg_solves": self.cg_solves,
            "steps": [
                {
                    "step": n,
                    "residual_norms": [float(r) for r in s.residuals],
                    "converged": [bool(c) for c in s.converged],
                    "iterations": [int(i) for i in s.iterations],
                }
                for n, s in enumerate(self.step_stats)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def data_term(model: AcquisitionModel, y: np.ndarray) -> np.ndarray:
    """A^H y in 2-channel form ``(H, W, 2)``."""
    return ad.to_channels(model.adjoint(y))


def reconstruct(config: ReconConfig, denoiser: Callable[[Tensor], Tensor], model: AcquisitionModel,
                y: np.ndarray | None = None, *, aty=None, delta=None,
                noise: NoisePlan | None = None) -> tuple[Tensor, ReconTrace]:
    """Run the configured architecture on measurements ``y``.

    The network input is u = A^H y + delta (``aty`` may be passed instead of
    ``y``).  Returns the ``(H, W, 2)`` reconstruction and a trace whose
    tensors stay on the differentiation graph.
    """
    if aty is None:
        if y is None:
            raise ValueError("pass measurements y or the data term aty")
        aty = data_term(model, y)
    u = ad.as_tensor(aty)
    if delta is not None:
        u = ad.add(u, delta)
    h, w = model.shape
    if u.shape != (h, w, 2):
        raise ValueError(f"network input must be {(h, w, 2)}, got {u.shape}")
    u = ad.reshape(u, (1, h, w, 2))
    plan = noise if noise is not None else NoisePlan(config.seed, (h, w, 2))
    trace = ReconTrace(config.mode, noise=plan)
    cfg = config
    sigma = cfg.sigma if cfg.mode != "vanilla" else 0.0

    def dc(data, z, stats):
        return dc_layer(model, data, z, cfg.lam, cfg.cg_tol, cfg.cg_max_iter, cfg.grad_tol, stats)

    def unroll(x0: Tensor) -> Tensor:
        # vanilla iterations from x0; every copy keeps the shared data term u
        x = x0
        trace.x.append(x)
        for _ in range(cfg.n_steps):
            stats = DCStats()
            z = denoiser(x)
            x = dc(u, z, stats)
            trace.z.append(z)
            trace.step_stats.append(stats)
            trace.x.append(x)
        return x

    if cfg.n_steps == 0:
        trace.x.append(u)
        return ad.reshape(u, (h, w, 2)), trace

    if cfg.mode == "rs-e2e" or sigma == 0:
        out = rs_expectation(unroll, u, sigma, cfg.m, plan.draw(0, cfg.m) if sigma > 0 else None)
        if sigma == 0:
            trace.denoised = list(trace.z)
        return ad.reshape(out, (h, w, 2)), trace

    x = u
    trace.x.append(x)
    for n in range(cfg.n_steps):
        stats = DCStats()
        draws = plan.draw(n, cfg.m)
        if cfg.mode == "smug":
            z, batch = _smoothed(denoiser, x, sigma, cfg.m, draws)
            x = dc(u, z, stats)
        else:  # smugv0
            captured = {}

            def step(v, stats=stats, captured=captured):
                captured["d"] = denoiser(v)
                return dc(u, captured["d"], stats)

            x = rs_expectation(step, x, sigma, cfg.m, draws)
            batch = captured["d"]
            z = ad.reshape(ad.mean(batch, axis=0), (1, h, w, 2))
        trace.z.append(z)
        trace.denoised.append(batch)
        trace.step_stats.append(stats)
        trace.x.append(x)
    return ad.reshape(x, (h, w, 2)), trace


def reconstruct_image(config: ReconConfig, denoiser, model: AcquisitionModel, y: np.ndarray,
                      delta: np.ndarray | None = None, noise: NoisePlan | None = None) -> np.ndarray:
    """Complex ``(H, W)`` reconstruction without gradient bookkeeping."""
    out, _ = reconstruct(config, denoiser, model, y, delta=delta, noise=noise)
    return ad.to_complex(out)
