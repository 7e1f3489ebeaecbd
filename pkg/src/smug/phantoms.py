"""Synthetic complex phantoms, simulated k-space and dataset persistence."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .container import ContainerError, read_container, read_header, write_container
from .mri import AcquisitionModel, build_cartesian_mask, default_acs_rows, synth_sensitivities

DATASET_FORMAT = "smug-dataset"
DATASET_VERSION = 1

# disjoint seed ranges per split
SPLIT_OFFSETS = {"train": 0, "val": 1_000_000, "test": 2_000_000}


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float
    intensity: float


def phantom_ellipses(seed: int) -> list[Ellipse]:
    """The random ellipse set behind :func:`generate_phantom` (3 to 8 of them)."""
    rng = np.random.default_rng([seed, 0])
    count = int(rng.integers(3, 9))
    intensities = rng.permutation(np.linspace(0.25, 1.0, 8))[:count]
    out = []
    for k in range(count):
        # the first ellipse is a large body outline; the rest are inclusions
        size = (0.55, 0.85) if k == 0 else (0.08, 0.4)
        centre = 0.1 if k == 0 else 0.5
        out.append(Ellipse(
            cy=float(rng.uniform(-centre, centre)),
            cx=float(rng.uniform(-centre, centre)),
            ry=float(rng.uniform(*size)),
            rx=float(rng.uniform(*size)),
            angle=float(rng.uniform(0, np.pi)),
            intensity=float(intensities[k]),
        ))
    return out


def generate_phantom(height: int, width: int, seed: int) -> np.ndarray:
    """Ellipse superposition with a smooth bias field and a low-order phase.

    The magnitude is scaled so its maximum is 1.
    """
    if height < 8 or width < 8:
        raise ValueError(f"phantom needs height, width >= 8, got {height}x{width}")
    yy, xx = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    mag = np.zeros((height, width))
    for e in phantom_ellipses(seed):
        c, s = np.cos(e.angle), np.sin(e.angle)
        u = (c * (xx - e.cx) + s * (yy - e.cy)) / e.rx
        v = (-s * (xx - e.cx) + c * (yy - e.cy)) / e.ry
        mag += e.intensity * (u**2 + v**2 <= 1.0)
    rng = np.random.default_rng([seed, 1])
    b = rng.uniform(-0.15, 0.15, size=3)
    mag *= 1.0 + b[0] * xx + b[1] * yy + b[2] * xx * yy
    mag = np.clip(mag, 0.0, None)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    ph = rng.uniform(-0.5, 0.5, size=4)
    phase = np.pi * (ph[0] + ph[1] * xx + ph[2] * yy + 0.5 * ph[3] * xx * yy)
    return mag * np.exp(1j * phase)


def simulate_measurement(model: AcquisitionModel, t: np.ndarray, noise_std: float, seed: int) -> np.ndarray:
    """A t plus white Gaussian noise on kept rows.

    ``noise_std`` is the standard deviation of the real and of the imaginary
    part of each k-space sample.
    """
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    y = model.forward(t)
    if noise_std == 0:
        return y
    rng = np.random.default_rng(seed)
    noise = noise_std * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return y + np.where(model.mask.rows[:, None], noise, 0.0)


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class DatasetParams:
    height: int = 32
    width: int = 32
    n_coils: int = 4
    acceleration: int = 4
    acs_rows: int | None = None
    mask_seed: int = 0
    noise_std: float = 0.0

    @property
    def resolved_acs_rows(self) -> int:
        if self.acs_rows is None:
            return default_acs_rows(self.height, self.acceleration)
        return self.acs_rows

    def acquisition_model(self) -> AcquisitionModel:
        mask = build_cartesian_mask(self.height, self.width, self.acceleration,
                                    self.resolved_acs_rows, self.mask_seed)
        return AcquisitionModel(mask, synth_sensitivities(self.height, self.width, self.n_coils))


@dataclass
class Sample:
    target: np.ndarray  # (H, W) complex
    kspace: np.ndarray  # (N_c, H, W) complex
    phantom_seed: int
    noise_seed: int
    model_ref: str


@dataclass
class Dataset:
    samples: list[Sample]
    split: str
    seed: int
    params: DatasetParams
    _model: AcquisitionModel | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def model(self) -> AcquisitionModel:
        if self._model is None:
            self._model = self.params.acquisition_model()
        return self._model

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.split, self.seed, sorted(asdict(self.params).items()))).encode())
        for s in self.samples:
            h.update(np.ascontiguousarray(s.target).tobytes())
            h.update(np.ascontiguousarray(s.kspace).tobytes())
        return h.hexdigest()[:16]


def make_dataset(split: str, count: int, params: DatasetParams, seed: int) -> Dataset:
    """Pure function of (split, count, params, seed)."""
    if split not in SPLIT_OFFSETS:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(SPLIT_OFFSETS)}")
    model = params.acquisition_model()
    base = seed * 10_000_000 + SPLIT_OFFSETS[split]
    samples = []
    for i in range(count):
        ps = base + i
        ns = base + 500_000 + i
        t = generate_phantom(params.height, params.width, ps)
        y = simulate_measurement(model, t, params.noise_std, ns)
        samples.append(Sample(t, y, ps, ns, model.model_id))
    return Dataset(samples, split, seed, params, model)


def _interleave(z: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(z, dtype=np.complex128).view(np.float64).reshape(-1)


def _deinterleave(flat: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(flat).view(np.complex128).reshape(shape).copy()


def save_dataset(ds: Dataset, path) -> None:
    p = ds.params
    header = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "split": ds.split,
        "seed": ds.seed,
        "params": asdict(p),
        "acs_rows_resolved": p.resolved_acs_rows,
        "mask": ds.model.mask.to_dict(),
        "model_ref": ds.model.model_id,
        "n_samples": len(ds.samples),
        "sample_seeds": [[s.phantom_seed, s.noise_seed] for s in ds.samples],
        "layout": "per sample: target (H,W) then kspace (N_c,H,W); complex128 as interleaved float64",
    }
    parts = [np.concatenate([_interleave(s.target), _interleave(s.kspace)]) for s in ds.samples]
    payload = np.concatenate(parts) if parts else np.zeros(0)
    write_container(path, header, payload)


def read_dataset_header(path) -> dict:
    header = read_header(path)
    if header.get("format") != DATASET_FORMAT:
        raise ContainerError(f"{path}: not a dataset file (format={header.get('format')!r})")
    if header.get("version") != DATASET_VERSION:
        raise ContainerError(f"{path}: unsupported dataset version {header.get('version')!r}")
    return header


def load_dataset(path) -> Dataset:
    header, flat = read_container(path)
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise ContainerError(f"{path}: not a version-{DATASET_VERSION} dataset file")
    params = DatasetParams(**header["params"])
    h, w, nc = params.height, params.width, params.n_coils
    per = 2 * (h * w + nc * h * w)
    n = int(header["n_samples"])
    if flat.size != n * per:
        raise ContainerError(f"{path}: payload holds {flat.size} values, header implies {n * per}")
    model = params.acquisition_model()
    if model.mask.to_dict() != header["mask"]:
        raise ContainerError(f"{path}: stored mask does not match the one rebuilt from its parameters")
    samples = []
    for i, (ps, ns) in enumerate(header["sample_seeds"]):
        chunk = flat[i * per:(i + 1) * per]
        t = _deinterleave(chunk[: 2 * h * w], (h, w))
        y = _deinterleave(chunk[2 * h * w:], (nc, h, w))
        samples.append(Sample(t, y, int(ps), int(ns), header["model_ref"]))
    return Dataset(samples, header["split"], int(header["seed"]), params, model)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if (a.split, a.seed, a.params) != (b.split, b.seed, b.params) or len(a) != len(b):
        return False
    return all(
        np.array_equal(x.target, y.target) and np.array_equal(x.kspace, y.kspace)
        and (x.phantom_seed, x.noise_seed, x.model_ref) == (y.phantom_seed, y.noise_seed, y.model_ref)
        for x, y in zip(a.samples, b.samples)
    )
