"""Slope-vs-offset calibration model and its inverse lookup.

Convention used throughout: delta_c = c_bf - c, so a positive offset
means the beamforming SoS overestimates the medium. Every persisted
model and CSV carries this tag explicitly.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

CONVENTION = "delta_c = c_bf - c"


class CalibrationError(ValueError):
    """Fitted calibration polynomial is unusable (e.g. non-monotonic)."""


class OffsetOutOfRangeError(ValueError):
    def __init__(self, msg: str, nearest_delta_c: float):
        super().__init__(msg)
        self.nearest_delta_c = nearest_delta_c


@dataclass(frozen=True)
class CalibrationEntry:
    delta_c: float  # m/s, c_bf - c
    slope: float  # s/rad
    r_squared: float


@dataclass(frozen=True)
class CalibrationDataset:
    entries: tuple[CalibrationEntry, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        dcs = [e.delta_c for e in self.entries]
        if len(set(dcs)) != len(dcs):
            raise ValueError("delta_c values must be distinct")
        if not all(np.isfinite(e.slope) for e in self.entries):
            raise ValueError("slopes must be finite")

    def delta_cs(self) -> np.ndarray:
        return np.array([e.delta_c for e in self.entries])

    def slopes(self) -> np.ndarray:
        return np.array([e.slope for e in self.entries])


@dataclass(frozen=True)
class CalibrationModel:
    """Polynomial slope(delta_c), strictly monotonic over its domain."""

    degree: int
    coefficients: np.ndarray  # ascending order
    domain: tuple[float, float]  # m/s
    training_indices: tuple[int, ...]
    metadata: dict = field(default_factory=dict)

    def predict(self, delta_c):
        return np.polynomial.polynomial.polyval(delta_c, self.coefficients)


def _train_indices(n: int, selector) -> np.ndarray:
    """Resolve an every-k selector or an explicit index list."""
    if isinstance(selector, str) and selector.startswith("every-"):
        k = int(selector.split("-", 1)[1])
        return np.arange(0, n, k)
    if isinstance(selector, int):
        return np.arange(0, n, selector)
    return np.asarray(list(selector), dtype=int)


def build_calibration(
    dataset: CalibrationDataset, degree: int = 1, train_selector="every-4"
) -> CalibrationModel:
    """Least-squares polynomial fit of slope against delta_c.

    The default every-4 selector turns an 81-point sweep into a 21-point
    training set with the remaining 60 points held out. Monotonicity is
    validated on a 0.1 m/s grid; a non-monotone fit raises
    CalibrationError naming the violating interval.
    """
    if degree not in (1, 3, 5):
        raise ValueError("degree must be 1, 3 or 5")
    order = np.argsort(dataset.delta_cs())
    dcs = dataset.delta_cs()[order]
    slopes = dataset.slopes()[order]
    train = _train_indices(dcs.size, train_selector)
    if train.size < degree + 1:
        raise ValueError(
            f"need at least {degree + 1} training points for degree {degree}"
        )
    coeffs = np.polynomial.polynomial.polyfit(dcs[train], slopes[train], degree)

    lo, hi = float(dcs.min()), float(dcs.max())
    grid = np.arange(lo, hi + 0.05, 0.1)
    vals = np.polynomial.polynomial.polyval(grid, coeffs)
    diffs = np.diff(vals)
    if np.any(diffs >= 0) and np.any(diffs <= 0):
        bad = np.flatnonzero(diffs * diffs[0] <= 0)
        a, b = grid[bad[0]], grid[min(bad[0] + 1, grid.size - 1)]
        raise CalibrationError(
            f"fitted degree-{degree} polynomial is not monotonic over "
            f"[{lo}, {hi}] m/s (violation near [{a:.1f}, {b:.1f}] m/s)"
        )
    return CalibrationModel(
        degree=degree,
        coefficients=coeffs,
        domain=(lo, hi),
        training_indices=tuple(int(i) for i in train),
        metadata=dict(dataset.metadata),
    )


def estimate_offset(model: CalibrationModel, observed_slope: float) -> float:
    """Invert the calibration model: observed slope -> delta_c in m/s.

    Degree 1 inverts analytically and tolerates mild (10% of the slope
    span) extrapolation; higher degrees bisect the monotone polynomial
    and require the slope to be inside the modeled range.
    """
    lo, hi = model.domain
    s_lo = float(model.predict(lo))
    s_hi = float(model.predict(hi))
    s_min, s_max = min(s_lo, s_hi), max(s_lo, s_hi)
    span = s_max - s_min

    if model.degree == 1:
        a0, a1 = model.coefficients[0], model.coefficients[1]
        if a1 == 0:
            raise CalibrationError("degree-1 model has zero slope")
        if not s_min - 0.1 * span <= observed_slope <= s_max + 0.1 * span:
            nearest = lo if abs(observed_slope - s_lo) < abs(observed_slope - s_hi) else hi
            raise OffsetOutOfRangeError(
                f"observed slope {observed_slope:.3e} s/rad outside the "
                f"invertible range [{s_min:.3e}, {s_max:.3e}] (+-10%); "
                f"nearest boundary delta_c = {nearest:+.1f} m/s",
                nearest,
            )
        return float((observed_slope - a0) / a1)

    if not s_min <= observed_slope <= s_max:
        nearest = lo if abs(observed_slope - s_lo) < abs(observed_slope - s_hi) else hi
        raise OffsetOutOfRangeError(
            f"observed slope {observed_slope:.3e} s/rad outside the "
            f"invertible range [{s_min:.3e}, {s_max:.3e}]; "
            f"nearest boundary delta_c = {nearest:+.1f} m/s",
            nearest,
        )

    def f(dc):
        return float(model.predict(dc)) - observed_slope

    if f(lo) == 0.0:
        return lo
    if f(hi) == 0.0:
        return hi
    return float(brentq(f, lo, hi, xtol=1e-3))


def corrected_sos(c_bf_assumed: float, delta_c_hat: float) -> float:
    """Apply the estimated offset: c_corrected = c_bf - delta_c_hat."""
    return c_bf_assumed - delta_c_hat


# ---------------------------------------------------------------------------
# persistence


def _metadata_hash(metadata: dict) -> str:
    blob = repr(sorted(metadata.items())).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_model(path: Path, model: CalibrationModel) -> None:
    lines = [
        "soscorr calibration model v1",
        f"convention {CONVENTION}",
        f"c_true {model.metadata.get('c_true', 'unknown')}",
        f"degree {model.degree}",
        f"domain {model.domain[0]!r} {model.domain[1]!r}",
        "coefficients " + " ".join(repr(float(c)) for c in model.coefficients),
        "training_indices " + " ".join(str(i) for i in model.training_indices),
        f"sweep_metadata_hash {_metadata_hash(model.metadata)}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path: Path) -> CalibrationModel:
    fields: dict[str, str] = {}
    for line in Path(path).read_text().splitlines()[1:]:
        if line.strip():
            key, _, val = line.partition(" ")
            fields[key] = val
    if fields.get("convention") != CONVENTION:
        raise ValueError(f"{path}: unexpected sign convention")
    dom = fields["domain"].split()
    meta = {"sweep_metadata_hash": fields.get("sweep_metadata_hash", "")}
    if fields.get("c_true", "unknown") != "unknown":
        meta["c_true"] = float(fields["c_true"])
    return CalibrationModel(
        degree=int(fields["degree"]),
        coefficients=np.array([float(c) for c in fields["coefficients"].split()]),
        domain=(float(dom[0]), float(dom[1])),
        training_indices=tuple(int(i) for i in fields["training_indices"].split()),
        metadata=meta,
    )


def export_sweep(path: Path, dataset: CalibrationDataset,
                 model: CalibrationModel | None = None) -> None:
    """CSV of (delta_c, slope, split) for calibration-curve plots."""
    train = set(model.training_indices) if model is not None else set()
    order = np.argsort(dataset.delta_cs())
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["delta_c_mps", "slope_s_per_rad", "split", "convention"])
        for rank, i in enumerate(order):
            e = dataset.entries[i]
            split = "train" if rank in train else "test"
            wr.writerow([f"{e.delta_c:.3f}", f"{e.slope:.9e}", split, CONVENTION])
