"""Geometric ray-based forward simulator for diverging-wave channel data.

Scatterer echoes are delayed by straight-ray travel times through a
piecewise-constant speed-of-sound map, so the simulator is the exact
forward model of the straight-path delay equations the rest of the
pipeline relies on. No diffraction, refraction or attenuation.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import ImagingGrid, TransducerArray, element_position

SOS_MIN = 1300.0
SOS_MAX = 1700.0

FRAME_MAGIC = b"SOSC"
FRAME_VERSION = 1

# spreading floor: below this radius the 1/(r_tx*r_rx) factor is clamped
R_MIN = 1.0e-3


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Inclusion:
    """Elliptical or rectangular SoS inclusion."""

    shape: str  # "ellipse" | "rectangle"
    center: tuple[float, float]
    half_axes: tuple[float, float]  # (hx, hz); half sizes for rectangles
    sos: float

    def __post_init__(self):
        if self.shape not in ("ellipse", "rectangle"):
            raise ValueError(f"unknown inclusion shape {self.shape!r}")
        if not SOS_MIN <= self.sos <= SOS_MAX:
            raise ValueError(f"inclusion sos {self.sos} outside sanity band")
        if min(self.half_axes) <= 0:
            raise ValueError("half_axes must be positive")

    def contains(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        cx, cz = self.center
        hx, hz = self.half_axes
        if self.shape == "ellipse":
            return ((x - cx) / hx) ** 2 + ((z - cz) / hz) ** 2 <= 1.0
        return (np.abs(x - cx) <= hx) & (np.abs(z - cz) <= hz)


@dataclass(frozen=True)
class MediumSpec:
    """Piecewise-constant SoS medium: background plus ordered inclusions.

    When inclusions overlap, the last one listed wins at that point.
    The grid fixes the rasterized map export and the quadrature step.
    """

    background_sos: float
    grid: ImagingGrid
    inclusions: tuple[Inclusion, ...] = ()

    def __post_init__(self):
        if not SOS_MIN <= self.background_sos <= SOS_MAX:
            raise ValueError(
                f"background sos {self.background_sos} outside sanity band"
            )

    @property
    def is_homogeneous(self) -> bool:
        return len(self.inclusions) == 0

    def sos_at(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        """SoS sampled at arbitrary points (vectorized)."""
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        c = np.full(np.broadcast(x, z).shape, self.background_sos)
        for inc in self.inclusions:
            c[inc.contains(x, z)] = inc.sos
        return c

    def rasterize(self, grid: ImagingGrid | None = None) -> np.ndarray:
        """Ground-truth SoS map on pixel centers, shape (nz, nx)."""
        g = grid if grid is not None else self.grid
        X, Z = g.meshgrid()
        return self.sos_at(X, Z)

    def describe(self) -> str:
        lines = [f"background_sos {self.background_sos!r}"]
        for inc in self.inclusions:
            lines.append(
                f"inclusion {inc.shape} center {inc.center[0]!r} {inc.center[1]!r} "
                f"half_axes {inc.half_axes[0]!r} {inc.half_axes[1]!r} sos {inc.sos!r}"
            )
        return "\n".join(lines)


@dataclass(frozen=True)
class PulseSpec:
    """Gaussian-windowed sinusoid transmit pulse."""

    center_frequency: float = 5.0e6
    half_cycles: int = 4
    sampling_frequency: float = 1.6e8

    def __post_init__(self):
        if self.sampling_frequency < 10 * self.center_frequency:
            raise ValueError("sampling_frequency must be >= 10x center_frequency")
        if self.half_cycles < 1:
            raise ValueError("half_cycles must be >= 1")

    @property
    def duration(self) -> float:
        return self.half_cycles / (2.0 * self.center_frequency)

    @property
    def envelope_sigma(self) -> float:
        return self.duration / 4.0

    @property
    def support_halfwidth(self) -> float:
        """Time beyond which the pulse is treated as zero (4 sigma)."""
        return 4.0 * self.envelope_sigma

    def waveform(self, t: np.ndarray) -> np.ndarray:
        """Pulse amplitude at times t (seconds, centered on 0)."""
        t = np.asarray(t, dtype=float)
        env = np.exp(-0.5 * (t / self.envelope_sigma) ** 2)
        return env * np.sin(2.0 * np.pi * self.center_frequency * t)


@dataclass(frozen=True)
class ScattererField:
    """Random point scatterers with unit-variance amplitudes."""

    positions: np.ndarray  # (n, 2) meters
    amplitudes: np.ndarray  # (n,)
    rng_seed: int


@dataclass(frozen=True)
class ChannelFrame:
    """Raw RF channel data for one single-element transmit."""

    tx_element: int
    samples: np.ndarray  # (num_rx, num_samples) float32
    t0: float
    fs: float

    @property
    def num_rx(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]


def gen_scatterers(grid: ImagingGrid, density: float, seed: int) -> ScattererField:
    """Uniform random scatterers over the grid extent.

    density is in scatterers per mm^2; the count is round(density * area).
    Same seed and config give a bit-identical field.
    """
    if density <= 0:
        raise ValueError("density must be > 0")
    count = int(round(density * grid.extent_area_mm2))
    rng = np.random.default_rng(seed)
    x = rng.uniform(grid.x_min, grid.x_max, size=count)
    z = rng.uniform(grid.z_min, grid.z_max, size=count)
    amp = rng.standard_normal(count)
    return ScattererField(
        positions=np.column_stack([x, z]), amplitudes=amp, rng_seed=seed
    )


def _check_bounds(points: np.ndarray, medium: MediumSpec) -> None:
    g = medium.grid
    wx = g.x_max - g.x_min
    wz = g.z_max - g.z_min
    lo_x, hi_x = g.x_min - wx / 2, g.x_max + wx / 2
    lo_z, hi_z = g.z_min - wz, g.z_max + wz
    x = points[..., 0]
    z = points[..., 1]
    if (
        np.any(x < lo_x)
        or np.any(x > hi_x)
        or np.any(z < min(lo_z, -1e-9))
        or np.any(z > hi_z)
    ):
        raise ValueError("point outside 2x imaging extent")


def travel_times(
    p_from: np.ndarray,
    p_to: np.ndarray,
    medium: MediumSpec,
    step: float | None = None,
) -> np.ndarray:
    """Straight-ray travel time(s) between point pairs, in seconds.

    Integrates slowness along each segment with the trapezoidal rule at
    a step of at most half the medium grid spacing. Broadcasts over
    leading dimensions of (..., 2) point arrays. For homogeneous media
    the integral collapses to distance / c.
    """
    p_from = np.atleast_2d(np.asarray(p_from, dtype=float))
    p_to = np.atleast_2d(np.asarray(p_to, dtype=float))
    p_from, p_to = np.broadcast_arrays(p_from, p_to)
    _check_bounds(p_from, medium)
    _check_bounds(p_to, medium)

    delta = p_to - p_from
    dist = np.hypot(delta[..., 0], delta[..., 1])
    if medium.is_homogeneous:
        return dist / medium.background_sos

    if step is None:
        step = min(medium.grid.dx, medium.grid.dz) / 2.0
    max_dist = float(dist.max(initial=0.0))
    if max_dist == 0.0:
        return np.zeros_like(dist)
    n = max(int(np.ceil(max_dist / step)), 1) + 1

    out = np.zeros_like(dist)
    flat_from = p_from.reshape(-1, 2)
    flat_delta = delta.reshape(-1, 2)
    flat_dist = dist.reshape(-1)
    flat_out = out.reshape(-1)

    # chunk so the (paths x quadrature) sample block stays small
    chunk = max(1, int(4_000_000 // n))
    t = np.linspace(0.0, 1.0, n)
    w = np.full(n, 1.0)
    w[0] = w[-1] = 0.5
    for i0 in range(0, flat_from.shape[0], chunk):
        sl = slice(i0, min(i0 + chunk, flat_from.shape[0]))
        px = flat_from[sl, 0, None] + flat_delta[sl, 0, None] * t
        pz = flat_from[sl, 1, None] + flat_delta[sl, 1, None] * t
        slowness = 1.0 / medium.sos_at(px, pz)
        dl = flat_dist[sl] / (n - 1)
        flat_out[sl] = (slowness @ w) * dl
    return out


def travel_time(
    p_from: tuple[float, float],
    p_to: tuple[float, float],
    medium: MediumSpec,
    step: float | None = None,
) -> float:
    """Scalar convenience wrapper around :func:`travel_times`."""
    return float(travel_times(np.array(p_from), np.array(p_to), medium, step)[0])


def required_samples(
    tx: int,
    field: ScattererField,
    medium: MediumSpec,
    pulse: PulseSpec,
    array: TransducerArray,
) -> int:
    """Minimum num_samples covering every scatterer's two-way echo."""
    if field.positions.shape[0] == 0:
        return 1
    tx_pos = np.array(element_position(array, tx))
    ex = array.element_x()
    s = field.positions
    t_tx = travel_times(tx_pos[None, :], s, medium)
    # farthest receive element bounds the two-way time
    d_rx_max = np.hypot(
        np.max(np.abs(s[:, 0:1] - ex[None, :]), axis=1), s[:, 1]
    )
    t_max = float(np.max(t_tx + d_rx_max / SOS_MIN))
    return int(np.ceil((t_max + pulse.support_halfwidth) * pulse.sampling_frequency)) + 1


def _element_directivity(
    dx: np.ndarray, r: np.ndarray, width: float, wavelength: float
) -> np.ndarray:
    """Soft directivity of a finite-width element: sinc(w sin/lambda) cos.

    The sinc null at grazing incidence is what keeps the lambda-pitch
    array from flooding the images with grating-lobe energy.
    """
    sin_t = np.abs(dx) / np.maximum(r, 1e-9)
    cos_t = np.sqrt(np.maximum(1.0 - sin_t**2, 0.0))
    return np.sinc(width * sin_t / wavelength) * cos_t


def simulate_frame(
    tx: int,
    field: ScattererField,
    medium: MediumSpec,
    pulse: PulseSpec,
    array: TransducerArray,
    num_samples: int,
    noise_snr_db: float | None = None,
    noise_seed: int = 0,
    directivity: bool = True,
) -> ChannelFrame:
    """Channel data for one diverging-wave transmit.

    Each scatterer contributes a delayed copy of the pulse on every
    receive channel, weighted by its amplitude, geometric spreading
    1/max(r_tx*r_rx, R_MIN^2), and (by default) the finite-element
    directivity of both the Tx and Rx elements with an effective
    element width of one pitch. Deterministic given the field;
    optional additive white Gaussian noise at the given SNR (in dB
    over the clean frame power).
    """
    if not 0 <= tx < array.num_elements:
        raise ValueError(f"tx element {tx} out of range")
    fs = pulse.sampling_frequency
    s = field.positions
    n_sc = s.shape[0]
    samples = np.zeros((array.num_elements, num_samples), dtype=np.float64)

    if n_sc > 0:
        need = required_samples(tx, field, medium, pulse, array)
        if num_samples < need:
            raise ConfigurationError(
                f"num_samples={num_samples} too small; need at least {need} "
                "to cover the deepest scatterer's two-way echo"
            )
        tx_pos = np.array(element_position(array, tx))
        t_tx = travel_times(tx_pos[None, :], s, medium)
        r_tx = np.hypot(s[:, 0] - tx_pos[0], s[:, 1] - tx_pos[1])
        wavelength = medium.background_sos / pulse.center_frequency
        d_tx = 1.0
        if directivity:
            d_tx = _element_directivity(
                s[:, 0] - tx_pos[0], r_tx, array.pitch, wavelength
            )

        half = int(np.ceil(pulse.support_halfwidth * fs))
        offs = np.arange(-half, half + 1)
        ex = array.element_x()
        for rx in range(array.num_elements):
            rx_pos = np.array([ex[rx], 0.0])
            t_rx = travel_times(s, rx_pos[None, :], medium)
            r_rx = np.hypot(s[:, 0] - rx_pos[0], s[:, 1] - rx_pos[1])
            spreading = 1.0 / np.maximum(r_tx * r_rx, R_MIN**2)
            if directivity:
                spreading = spreading * d_tx * _element_directivity(
                    s[:, 0] - rx_pos[0], r_rx, array.pitch, wavelength
                )
            t_total = t_tx + t_rx
            k0 = np.rint(t_total * fs).astype(np.int64)
            # (n_sc, support) sample indices and pulse arguments
            idx = k0[:, None] + offs[None, :]
            t_arg = idx / fs - t_total[:, None]
            vals = (field.amplitudes * spreading)[:, None] * pulse.waveform(t_arg)
            valid = (idx >= 0) & (idx < num_samples)
            samples[rx] = np.bincount(
                idx[valid].ravel(), weights=vals[valid].ravel(),
                minlength=num_samples,
            )

    if noise_snr_db is not None:
        power = float(np.mean(samples**2))
        if power > 0:
            sigma = np.sqrt(power / 10.0 ** (noise_snr_db / 10.0))
            rng = np.random.default_rng(noise_seed)
            samples = samples + rng.normal(0.0, sigma, size=samples.shape)

    return ChannelFrame(
        tx_element=tx, samples=samples.astype(np.float32), t0=0.0, fs=fs
    )


# ---------------------------------------------------------------------------
# frame set IO: one binary file per frame plus a plain-text manifest


def frame_filename(tx: int) -> str:
    return f"frame_tx{tx:03d}.sosc"


def write_frame(path: Path, frame: ChannelFrame) -> None:
    header = FRAME_MAGIC + struct.pack(
        "<HHIIdd",
        FRAME_VERSION,
        frame.tx_element,
        frame.num_rx,
        frame.num_samples,
        frame.fs,
        frame.t0,
    )
    payload = np.ascontiguousarray(frame.samples, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_frame(path: Path) -> ChannelFrame:
    raw = Path(path).read_bytes()
    if raw[:4] != FRAME_MAGIC:
        raise ValueError(f"{path}: not a SOSC frame file")
    version, tx, num_rx, num_samples, fs, t0 = struct.unpack_from("<HHIIdd", raw, 4)
    if version != FRAME_VERSION:
        raise ValueError(f"{path}: unsupported frame version {version}")
    off = 4 + struct.calcsize("<HHIIdd")
    samples = np.frombuffer(raw, dtype="<f4", offset=off).reshape(num_rx, num_samples)
    return ChannelFrame(tx_element=tx, samples=samples.copy(), t0=t0, fs=fs)


def write_frame_set(
    out_dir: Path, frames: list[ChannelFrame], medium: MediumSpec
) -> None:
    """Frame directory: one .sosc file per transmit plus MANIFEST.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["soscorr frame set v1", "", "[frames]"]
    for fr in frames:
        name = frame_filename(fr.tx_element)
        write_frame(out / name, fr)
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()[:16]
        lines.append(f"{name} tx={fr.tx_element} sha256_16={digest}")
    lines += ["", "[medium]", medium.describe(), ""]
    (out / "MANIFEST.txt").write_text("\n".join(lines))


def read_frame_set(in_dir: Path) -> dict[int, ChannelFrame]:
    """All frames of a directory, keyed by tx element."""
    in_dir = Path(in_dir)
    manifest = in_dir / "MANIFEST.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no MANIFEST.txt in {in_dir}")
    frames = {}
    for p in sorted(in_dir.glob("frame_tx*.sosc")):
        fr = read_frame(p)
        frames[fr.tx_element] = fr
    return frames
