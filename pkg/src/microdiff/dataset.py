"""Bitmap ingestion, material-property mapping, energy curves, and cubic targets.

Grayscale bitmaps are 28x28 uint8 grids. Pixel value 0 maps to the softest
material (modulus 1.0) and 255 to the stiffest (100.0). Energy curves hold 13
values sampled on the uniaxial displacement schedule 0..14 length units
(1 pixel = 1 unit); normalized curves are raw curves divided by a single
dataset-level constant stored in the dataset manifest.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError
from .formats import read_kv, write_kv

IMAGE_SIZE = 28
CURVE_STEPS = 13
MAX_DISPLACEMENT = 14.0  # half the 28-unit domain height
YOUNG_MIN = 1.0
YOUNG_MAX = 100.0
DEFAULT_POISSON = 0.3

IDX_IMAGE_MAGIC = 0x00000803

# Cubic-coefficient ranges observed across the reference dataset fits.
COEFF_RANGES = {
    "a": (-0.0162, -0.0047),
    "b": (0.6346, 1.3968),
    "c": (0.00532, 0.4114),
}


def displacement_schedule(steps: int = CURVE_STEPS, maximum: float = MAX_DISPLACEMENT):
    """Equally spaced applied displacements from 0 to `maximum`."""
    return np.linspace(0.0, maximum, steps)


def validate_bitmap(bitmap) -> np.ndarray:
    bitmap = np.asarray(bitmap)
    if bitmap.ndim != 2:
        raise ValueError(f"bitmap must be 2-D, got shape {bitmap.shape}")
    if bitmap.dtype != np.uint8:
        if np.any(bitmap < 0) or np.any(bitmap > 255):
            raise ValueError("bitmap values must lie in [0, 255]")
        bitmap = bitmap.astype(np.uint8)
    return bitmap


def load_idx(path) -> np.ndarray:
    """Read an IDX unsigned-byte image container into a (n, rows, cols) uint8 array.

    Big-endian 32-bit header words per the canonical format; gzipped files are
    detected by magic and decompressed transparently.
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated IDX header", offset=len(raw))
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}", offset=0
        )
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise DataFormatError(
            f"{path}: payload ends early ({len(raw)} bytes, need {expected})", offset=len(raw)
        )
    return np.frombuffer(raw[16:expected], dtype=np.uint8).reshape(count, rows, cols).copy()


def save_idx(path, images) -> None:
    """Write a stack of uint8 bitmaps as an IDX unsigned-byte container."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError(f"expected (n, rows, cols) array, got shape {images.shape}")
    header = struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape)
    Path(path).write_bytes(header + images.tobytes())


@dataclass
class PropertyField:
    """A bitmap with its derived modulus and Lame-parameter grids."""

    bitmap: np.ndarray       # (h, w) uint8
    young: np.ndarray        # (h, w) float64 in [YOUNG_MIN, YOUNG_MAX]
    lame_lambda: np.ndarray  # (h, w) float64
    lame_mu: np.ndarray      # (h, w) float64
    poisson: float


def to_property_field(bitmap, poisson: float = DEFAULT_POISSON) -> PropertyField:
    """Map grayscale values to Young's modulus and Lame parameters.

    E = gray / 255 * (100 - 1) + 1 per pixel, with lambda and mu derived from E
    and a constant Poisson ratio.
    """
    bitmap = validate_bitmap(bitmap)
    if not 0.0 < poisson < 0.5:
        raise ConfigError(
            f"poisson ratio {poisson} outside (0, 0.5); 0.5 is incompressible"
        )
    young = bitmap.astype(np.float64) / 255.0 * (YOUNG_MAX - YOUNG_MIN) + YOUNG_MIN
    lame_lambda = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    lame_mu = young / (2.0 * (1.0 + poisson))
    return PropertyField(bitmap, young, lame_lambda, lame_mu, poisson)


@dataclass
class EnergyCurve:
    """Total strain energy at each applied displacement of the load schedule."""

    displacements: np.ndarray  # (13,) strictly increasing from 0
    energies: np.ndarray       # (13,) non-negative
    normalized: bool = False

    def __post_init__(self):
        self.displacements = np.asarray(self.displacements, dtype=np.float64)
        self.energies = np.asarray(self.energies, dtype=np.float64)
        if self.displacements.shape != (CURVE_STEPS,) or self.energies.shape != (CURVE_STEPS,):
            raise ValueError(
                f"curve must have exactly {CURVE_STEPS} points, got "
                f"{self.displacements.shape} / {self.energies.shape}"
            )
        if self.displacements[0] != 0.0 or np.any(np.diff(self.displacements) <= 0):
            raise ValueError("displacements must increase strictly from 0")

    def normalized_by(self, constant: float) -> "EnergyCurve":
        if constant <= 0:
            raise ConfigError(f"normalization constant must be positive, got {constant}")
        return EnergyCurve(self.displacements, self.energies / constant, normalized=True)


@dataclass
class PolyCoeffs:
    """Coefficients of a cubic a*x^3 + b*x^2 + c*x over normalized displacement."""

    a: float
    b: float
    c: float

    @property
    def in_range(self) -> bool:
        (alo, ahi), (blo, bhi), (clo, chi) = (
            COEFF_RANGES["a"], COEFF_RANGES["b"], COEFF_RANGES["c"],
        )
        return alo <= self.a <= ahi and blo <= self.b <= bhi and clo <= self.c <= chi

    def as_tuple(self):
        return (self.a, self.b, self.c)


def fit_cubic(curve: EnergyCurve):
    """Least-squares cubic fit with zero constant term.

    Returns (PolyCoeffs, rms_residual). The abscissa is the displacement
    divided by its maximum, so coefficients are O(1) for normalized curves.
    An all-zero curve yields (0, 0, 0) with residual 0.
    """
    x = curve.displacements / curve.displacements[-1]
    design = np.stack([x**3, x**2, x], axis=1)
    coeffs, _, _, _ = np.linalg.lstsq(design, curve.energies, rcond=None)
    residual = design @ coeffs - curve.energies
    rms = float(np.sqrt(np.mean(residual**2)))
    return PolyCoeffs(*(float(v) for v in coeffs)), rms


def sample_polynomial(ranges=None, rng=None) -> PolyCoeffs:
    """Draw cubic coefficients uniformly from per-coefficient intervals."""
    ranges = ranges or COEFF_RANGES
    rng = rng if rng is not None else np.random.default_rng()
    values = {}
    for key in ("a", "b", "c"):
        lo, hi = ranges[key]
        if hi < lo:
            raise ConfigError(f"empty interval for coefficient {key}: [{lo}, {hi}]")
        values[key] = float(rng.uniform(lo, hi))
    return PolyCoeffs(values["a"], values["b"], values["c"])


def eval_polynomial(coeffs: PolyCoeffs, xs=None) -> EnergyCurve:
    """Evaluate the cubic on normalized displacements xs in [0, 1].

    Returns a normalized EnergyCurve on the physical schedule xs * 14.
    """
    if xs is None:
        xs = displacement_schedule() / MAX_DISPLACEMENT
    xs = np.asarray(xs, dtype=np.float64)
    if xs[0] != 0.0 or np.any(xs < 0) or np.any(xs > 1):
        raise ValueError("normalized displacements must start at 0 and lie in [0, 1]")
    energies = coeffs.a * xs**3 + coeffs.b * xs**2 + coeffs.c * xs
    energies[0] = 0.0
    return EnergyCurve(xs * MAX_DISPLACEMENT, energies, normalized=True)


def normalization_constant(raw_energies) -> float:
    """Dataset normalization constant: the maximum final-step raw energy."""
    raw_energies = np.asarray(raw_energies, dtype=np.float64)
    constant = float(raw_energies[:, -1].max())
    if constant <= 0:
        raise ConfigError("cannot normalize: no positive final-step energy in split")
    return constant


# Curve CSV: one row per sample, header `sample_id,d0..d12,psi0..psi12`.
CURVE_HEADER = (
    "sample_id,"
    + ",".join(f"d{i}" for i in range(CURVE_STEPS))
    + ","
    + ",".join(f"psi{i}" for i in range(CURVE_STEPS))
)


def write_curves_csv(path, sample_ids, curves) -> None:
    lines = [CURVE_HEADER]
    for sid, curve in zip(sample_ids, curves):
        cols = [str(int(sid))]
        cols += [f"{v:.17g}" for v in curve.displacements]
        cols += [f"{v:.17g}" for v in curve.energies]
        lines.append(",".join(cols))
    Path(path).write_text("\n".join(lines) + "\n")


def read_curves_csv(path, normalized: bool = True):
    """Read a curve CSV -> (sample_ids, list of EnergyCurve)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].replace(" ", "") != CURVE_HEADER:
        raise DataFormatError(f"{path}: unexpected curve CSV header", offset=0)
    sample_ids, curves = [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        cols = line.split(",")
        if len(cols) != 1 + 2 * CURVE_STEPS:
            raise DataFormatError(f"{path}: row with {len(cols)} columns")
        sample_ids.append(int(cols[0]))
        disp = np.array([float(v) for v in cols[1 : 1 + CURVE_STEPS]])
        psi = np.array([float(v) for v in cols[1 + CURVE_STEPS :]])
        curves.append(EnergyCurve(disp, psi, normalized=normalized))
    return sample_ids, curves


def curves_to_matrix(curves) -> np.ndarray:
    return np.stack([c.energies for c in curves]).astype(np.float64)


def write_manifest(path, *, split, count, normalization, poisson, schedule, extra=None):
    entries = {
        "split": split,
        "count": count,
        "normalization_constant": float(normalization),
        "poisson": float(poisson),
        "displacement_schedule": [float(v) for v in schedule],
    }
    if extra:
        entries.update(extra)
    write_kv(path, entries)


def read_manifest(path):
    entries = read_kv(path)
    entries["normalization_constant"] = float(entries["normalization_constant"])
    entries["poisson"] = float(entries["poisson"])
    entries["count"] = int(entries["count"])
    entries["displacement_schedule"] = [
        float(v) for v in entries["displacement_schedule"].split(",")
    ]
    return entries
