"""Cartesian multi-coil MRI acquisition: masks, coil maps, A / A^H and the DC solve.

Images are complex ``(..., H, W)`` arrays; k-space is ``(..., N_c, H, W)``.
The Fourier transform is the centered, orthonormal 2-D DFT, so phase-encode
row ``H // 2`` holds the k-space center and ``F`` is unitary.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, to_channels, to_complex


def fft2c(x: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))


def ifft2c(k: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=(-2, -1)), norm="ortho"), axes=(-2, -1))


# ---------------------------------------------------------------------------
# sampling mask

@dataclass(frozen=True)
class SamplingMask:
    height: int
    width: int
    acceleration: int
    acs_rows: int
    seed: int
    kept_rows: tuple[int, ...]

    @property
    def rows(self) -> np.ndarray:
        """Boolean phase-encode row selector of length ``height``."""
        sel = np.zeros(self.height, dtype=bool)
        sel[list(self.kept_rows)] = True
        return sel

    @property
    def array(self) -> np.ndarray:
        """Full ``(H, W)`` 0/1 mask."""
        return np.broadcast_to(self.rows[:, None], (self.height, self.width)).astype(np.float64)

    @property
    def sampling_rate(self) -> float:
        return len(self.kept_rows) / self.height

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "acceleration": self.acceleration,
            "acs_rows": self.acs_rows,
            "seed": self.seed,
            "kept_rows": list(self.kept_rows),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingMask":
        rows = tuple(int(r) for r in d["kept_rows"])
        if list(rows) != sorted(set(rows)) or (rows and (rows[0] < 0 or rows[-1] >= d["height"])):
            raise ValueError("kept_rows must be sorted, unique and inside [0, height)")
        return cls(int(d["height"]), int(d["width"]), int(d["acceleration"]),
                   int(d["acs_rows"]), int(d["seed"]), rows)

    @classmethod
    def from_json(cls, text: str) -> "SamplingMask":
        return cls.from_dict(json.loads(text))


def rows_budget(height: int, acceleration: int) -> int:
    # round half up; Python's round() is banker's rounding
    return int(np.floor(height / acceleration + 0.5))


def build_cartesian_mask(height: int, width: int, acceleration: int,
                         acs_rows: int, seed: int) -> SamplingMask:
    """Keep ``acs_rows`` central rows plus seeded uniformly random rows.

    Exactly ``round(height / acceleration)`` rows survive.
    """
    if acceleration < 1:
        raise ValueError(f"acceleration must be >= 1, got {acceleration}")
    if acs_rows < 0:
        raise ValueError(f"acs_rows must be >= 0, got {acs_rows}")
    budget = rows_budget(height, acceleration)
    if budget < acs_rows:
        raise ValueError(
            f"row budget round({height}/{acceleration}) = {budget} is smaller than acs_rows = {acs_rows}"
        )
    start = height // 2 - acs_rows // 2
    acs = list(range(start, start + acs_rows))
    others = np.array([r for r in range(height) if r not in set(acs)], dtype=np.int64)
    rng = np.random.default_rng(seed)
    extra = rng.choice(others, size=budget - acs_rows, replace=False) if budget > acs_rows else []
    kept = tuple(sorted(int(r) for r in [*acs, *extra]))
    return SamplingMask(height, width, acceleration, acs_rows, seed, kept)


def default_acs_rows(height: int, acceleration: int) -> int:
    """Central calibration band used by the dataset builder: 1/8 of the rows, capped by the budget."""
    return min(max(height // 8, 1), rows_budget(height, acceleration))


# ---------------------------------------------------------------------------
# coil sensitivities

@dataclass(frozen=True, eq=False)
class SensitivityMaps:
    maps: np.ndarray  # (N_c, H, W) complex

    @property
    def n_coils(self) -> int:
        return self.maps.shape[0]


def synth_sensitivities(height: int, width: int, n_coils: int) -> SensitivityMaps:
    """Smooth Gaussian-lobe coil maps on a ring around the FOV, sum-of-squares normalized."""
    if n_coils < 1:
        raise ValueError(f"n_coils must be >= 1, got {n_coils}")
    yy, xx = np.meshgrid(np.linspace(-1.0, 1.0, height), np.linspace(-1.0, 1.0, width), indexing="ij")
    maps = np.empty((n_coils, height, width), dtype=np.complex128)
    for c in range(n_coils):
        angle = 2.0 * np.pi * c / n_coils
        cy, cx = np.sin(angle), np.cos(angle)
        dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
        magnitude = np.exp(-dist2 / (2.0 * 0.8**2))
        phase = angle + 0.5 * np.pi * (cx * xx + cy * yy)
        maps[c] = magnitude * np.exp(1j * phase)
    sos = np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return SensitivityMaps(maps / sos)


# ---------------------------------------------------------------------------
# acquisition model

@dataclass(frozen=True, eq=False)
class AcquisitionModel:
    mask: SamplingMask
    sens: SensitivityMaps
    _rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.sens.maps.shape[1:] != (self.mask.height, self.mask.width):
            raise ValueError(
                f"sensitivity maps are {self.sens.maps.shape[1:]}, mask is {(self.mask.height, self.mask.width)}"
            )
        object.__setattr__(self, "_rows", self.mask.rows[:, None])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.mask.height, self.mask.width)

    @property
    def n_coils(self) -> int:
        return self.sens.n_coils

    @property
    def model_id(self) -> str:
        h = hashlib.sha256()
        h.update(self.mask.to_json().encode())
        h.update(np.ascontiguousarray(self.sens.maps).tobytes())
        return h.hexdigest()[:16]

    def _check_image(self, x: np.ndarray) -> None:
        if x.shape[-2:] != self.shape:
            raise ValueError(f"image spatial shape {x.shape[-2:]} does not match model {self.shape}")

    def _check_kspace(self, y: np.ndarray) -> None:
        if y.ndim < 3 or y.shape[-3:] != (self.n_coils, *self.shape):
            raise ValueError(f"k-space shape {y.shape} does not end in {(self.n_coils, *self.shape)}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """y_c = M F (S_c x); masked rows are exactly zero."""
        x = np.asarray(x, dtype=np.complex128)
        self._check_image(x)
        k = fft2c(self.sens.maps * x[..., None, :, :])
        return np.where(self._rows, k, 0.0)

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        """sum_c conj(S_c) F^{-1}(M y_c)."""
        y = np.asarray(y, dtype=np.complex128)
        self._check_kspace(y)
        img = ifft2c(np.where(self._rows, y, 0.0))
        return np.sum(np.conj(self.sens.maps) * img, axis=-3)

    def normal(self, x: np.ndarray, lam: float) -> np.ndarray:
        """(A^H A + lam I) x."""
        return self.adjoint(self.forward(x)) + lam * x

    def with_mask(self, mask: SamplingMask) -> "AcquisitionModel":
        return AcquisitionModel(mask, self.sens)


def forward(model: AcquisitionModel, x: np.ndarray) -> np.ndarray:
    return model.forward(x)


def adjoint(model: AcquisitionModel, y: np.ndarray) -> np.ndarray:
    return model.adjoint(y)


# ---------------------------------------------------------------------------
# conjugate gradient and data consistency

@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
    residual_history: list[float]


def _rdot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.vdot(a, b).real)


def conjugate_gradient(apply, rhs: np.ndarray, x0: np.ndarray, tol: float, max_iter: int) -> CGResult:
    """Solve a Hermitian positive-definite system; stop at ||r|| <= tol * ||rhs||."""
    x = np.array(x0, dtype=np.complex128)
    r = rhs - apply(x)
    target = tol * np.sqrt(_rdot(rhs, rhs))
    rr = _rdot(r, r)
    history = [np.sqrt(rr)]
    p = r.copy()
    it = 0
    while history[-1] > target and it < max_iter:
        ap = apply(p)
        alpha = rr / _rdot(p, ap)
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = _rdot(r, r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        history.append(np.sqrt(rr))
        it += 1
    return CGResult(x, it, history[-1], history[-1] <= target, history)


def dc_solve(model: AcquisitionModel, z: np.ndarray, y: np.ndarray, lam: float,
             tol: float = 1e-6, max_iter: int = 100) -> CGResult:
    """Solve (A^H A + lam I) x = A^H y + lam z by CG warm-started at z.

    Non-convergence is reported through ``converged`` rather than raised.
    """
    return dc_solve_image(model, z, model.adjoint(y), lam, tol, max_iter)


def dc_solve_image(model: AcquisitionModel, z: np.ndarray, aty: np.ndarray, lam: float,
                   tol: float = 1e-6, max_iter: int = 100) -> CGResult:
    """As :func:`dc_solve` but with the image-domain data term ``A^H y`` given directly."""
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    z = np.asarray(z, dtype=np.complex128)
    return conjugate_gradient(lambda v: model.normal(v, lam), aty + lam * z, z, tol, max_iter)


def dc_solve_grad(model: AcquisitionModel, lam: float, tol: float, upstream: np.ndarray,
                  max_iter: int = 100) -> np.ndarray:
    """Vector-Jacobian product of the DC solution with respect to ``z``: lam (A^H A + lam I)^{-1} g."""
    return lam * _solve_normal(model, lam, tol, upstream, max_iter)


def _solve_normal(model: AcquisitionModel, lam: float, tol: float, g: np.ndarray, max_iter: int) -> np.ndarray:
    g = np.asarray(g, dtype=np.complex128)
    if not np.any(g):
        return np.zeros_like(g)
    res = conjugate_gradient(lambda v: model.normal(v, lam), g, g / (1.0 + lam), tol, max_iter)
    return res.x


@dataclass
class DCStats:
    """Per-call CG bookkeeping collected while building a reconstruction graph."""

    residuals: list[float] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)

    @property
    def solves(self) -> int:
        return len(self.residuals)


def dc_layer(model: AcquisitionModel, aty: Tensor, z: Tensor, lam: float, tol: float = 1e-6,
             max_iter: int = 100, grad_tol: float | None = None, stats: DCStats | None = None) -> Tensor:
    """Differentiable DC step on 2-channel batches ``(B, H, W, 2)``.

    ``aty`` (the image-domain data term) broadcasts against ``z`` along the
    batch axis.  One CG solve runs per batch item.  The backward pass uses the
    implicit gradient: with w = (A^H A + lam I)^{-1} g, the data term gets w
    and ``z`` gets lam * w.
    """
    aty, z = as_tensor(aty), as_tensor(z)
    grad_tol = tol if grad_tol is None else grad_tol
    zc = to_complex(z)
    ac = np.broadcast_to(to_complex(aty), zc.shape)
    out = np.empty_like(zc)
    for b in range(zc.shape[0]):
        res = dc_solve_image(model, zc[b], ac[b], lam, tol, max_iter)
        out[b] = res.x
        if stats is not None:
            stats.residuals.append(res.residual_norm)
            stats.converged.append(res.converged)
            stats.iterations.append(res.iterations)

    def back(g):
        gc = to_complex(g)
        w = np.stack([_solve_normal(model, lam, grad_tol, gc[b], max_iter) for b in range(gc.shape[0])])
        wch = to_channels(w)
        g_aty = wch
        if aty.shape != z.shape:
            g_aty = wch.sum(axis=0, keepdims=True).reshape(aty.shape)
        return (g_aty, lam * wch)

    return Tensor.from_op(to_channels(out), (aty, z), back, "dc_solve")
