"""Small residual CNN denoiser acting on the 2-channel form of a complex image."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import ContainerError, read_container, write_container

CHECKPOINT_FORMAT = "smug-denoiser"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    depth: int = 3
    channels: int = 16
    kernel_size: int = 3
    residual: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")

    def layer_channels(self) -> list[tuple[int, int]]:
        """(C_in, C_out) per conv layer."""
        if self.depth == 1:
            return [(2, 2)]
        widths = [2] + [self.channels] * (self.depth - 1) + [2]
        return list(zip(widths[:-1], widths[1:]))

    def parameter_count(self) -> int:
        k2 = self.kernel_size**2
        return sum(c_out * c_in * k2 + c_out for c_in, c_out in self.layer_channels())


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    kernels: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for k, b in zip(self.kernels, self.biases):
            out += [k, b]
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    @classmethod
    def unflatten(cls, config: DenoiserConfig, vec: np.ndarray) -> "DenoiserParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != config.parameter_count():
            raise ValueError(f"vector has {vec.size} entries, config needs {config.parameter_count()}")
        k = config.kernel_size
        kernels, biases, pos = [], [], 0
        for c_in, c_out in config.layer_channels():
            n = c_out * c_in * k * k
            kernels.append(vec[pos:pos + n].reshape(c_out, c_in, k, k).copy())
            pos += n
            biases.append(vec[pos:pos + c_out].copy())
            pos += c_out
        return cls(config, kernels, biases)

    @classmethod
    def from_arrays(cls, config: DenoiserConfig, arrays: Sequence[np.ndarray]) -> "DenoiserParams":
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        return cls(config, arrays[0::2], arrays[1::2])

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, [k.copy() for k in self.kernels], [b.copy() for b in self.biases])

    def tensors(self, requires_grad: bool = False) -> list[Tensor]:
        return [Tensor(a, requires_grad=requires_grad) for a in self.arrays()]


def init_params(config: DenoiserConfig, seed: int) -> DenoiserParams:
    """Kaiming-uniform kernels (std sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    kernels, biases = [], []
    for c_in, c_out in config.layer_channels():
        bound = np.sqrt(6.0 / (c_in * k * k))
        kernels.append(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)))
        biases.append(np.zeros(c_out))
    return DenoiserParams(config, kernels, biases)


def zero_params(config: DenoiserConfig) -> DenoiserParams:
    return DenoiserParams.unflatten(config, np.zeros(config.parameter_count()))


class Denoiser:
    """Callable D(x) on batches ``(B, H, W, 2)`` bound to a list of weight tensors."""

    def __init__(self, config: DenoiserConfig, weights: Sequence[Tensor]):
        self.config = config
        self.weights = list(weights)

    @classmethod
    def from_params(cls, params: DenoiserParams, requires_grad: bool = False) -> "Denoiser":
        return cls(params.config, params.tensors(requires_grad))

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[-1] != 2:
            raise ValueError(f"denoiser input must be (B, H, W, 2), got {x.shape}")
        h = ad.transpose(x, (0, 3, 1, 2))
        n_layers = len(self.weights) // 2
        for i in range(n_layers):
            h = ad.conv2d(h, self.weights[2 * i], self.weights[2 * i + 1])
            if i < n_layers - 1:
                h = ad.relu(h)
        out = ad.transpose(h, (0, 2, 3, 1))
        return out + x if self.config.residual else out


def denoise(params: DenoiserParams, x: np.ndarray) -> np.ndarray:
    """Apply D_theta to a complex image ``(H, W)`` or batch ``(B, H, W)``."""
    z = np.asarray(x, dtype=np.complex128)
    batch = z[None] if z.ndim == 2 else z
    out = Denoiser.from_params(params)(Tensor(ad.to_channels(batch)))
    res = ad.to_complex(out)
    return res[0] if z.ndim == 2 else res


def save_params(params: DenoiserParams, path, extra: dict | None = None,
                extra_arrays: Sequence[np.ndarray] = ()) -> None:
    """Checkpoint: JSON descriptor plus float64 parameters (and optional trailing arrays)."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "parameter_count": params.config.parameter_count(),
        "extra_sizes": [int(np.size(a)) for a in extra_arrays],
        "extra": extra or {},
    }
    payload = np.concatenate([params.flatten(), *[np.asarray(a, np.float64).reshape(-1) for a in extra_arrays]])
    write_container(path, header, payload)


def load_params_full(path) -> tuple[DenoiserParams, dict, list[np.ndarray]]:
    header, flat = read_container(path)
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise ContainerError(f"{path}: not a version-{CHECKPOINT_VERSION} denoiser checkpoint")
    config = DenoiserConfig(**header["config"])
    n = config.parameter_count()
    sizes = header.get("extra_sizes", [])
    if flat.size != n + sum(sizes):
        raise ContainerError(f"{path}: payload holds {flat.size} values, descriptor implies {n + sum(sizes)}")
    params = DenoiserParams.unflatten(config, flat[:n])
    extras, pos = [], n
    for s in sizes:
        extras.append(flat[pos:pos + s].copy())
        pos += s
    return params, header.get("extra", {}), extras


def load_params(path) -> DenoiserParams:
    return load_params_full(path)[0]

