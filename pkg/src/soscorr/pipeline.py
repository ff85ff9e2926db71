"""End-to-end pipeline orchestration: simulate, calibrate, estimate,
reconstruct, report.

Every stage persists its intermediates in documented open formats (CSV
plus the described flat binaries), so any stage can be re-run from disk
without the previous stage's in-memory state.
"""

from __future__ import annotations

import configparser
import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import calibrate as cal
from .beamform import BFConfig, BeamformedFrame, das_beamform
from .delaytrack import DelayMap, TrackConfig, export_delay_map, track_delays
from .geometry import ImagingGrid, PolarROI, TransducerArray, element_position
from .metrics import RegionLabels, cnr_db, rmse_map
from .regress import FITTERS, extract_pattern, export_pattern
from .synthsim import (
    ChannelFrame,
    Inclusion,
    MediumSpec,
    PulseSpec,
    gen_scatterers,
    read_frame_set,
    required_samples,
    simulate_frame,
    write_frame_set,
)
from .tomo import (
    ReconConfig,
    SlownessMap,
    build_path_matrix,
    reconstruct,
    tv_operator,
)


class ConfigError(ValueError):
    pass


DEFAULT_RECON_PAIRS = (
    (24, 40), (40, 56), (56, 72), (72, 88), (88, 104), (104, 120),
)


@dataclass
class PipelineConfig:
    array: TransducerArray = field(default_factory=TransducerArray)
    pulse: PulseSpec = field(default_factory=PulseSpec)
    background_sos: float = 1500.0
    inclusions: tuple[Inclusion, ...] = ()
    scatterer_density: float = 4.0  # per mm^2
    seed: int = 12345
    noise_snr_db: float | None = None

    # full beamforming grid for reconstruction
    bf_dx: float = 1.5e-4
    bf_dz: float = 3.75e-5
    bf_z0: float = 5.0e-3
    bf_depth: float = 33.0e-3

    # slowness grid
    slow_nx: int = 32
    slow_nz: int = 32

    tracking: TrackConfig = field(default_factory=TrackConfig)
    recon_axial_step: int = 4
    recon_lateral_step: int = 2

    roi_depth_min: float = 7.5e-3
    roi_depth_max: float = 15.0e-3
    roi_theta_min: float = -0.4
    roi_theta_max: float = 0.4
    roi_num_bins: int = 40
    roi_reference: str = "pair_midpoint"  # or "probe_center"

    regression_method: str = "robust"
    estimation_pair: tuple[int, int] = (55, 65)
    # wider tracking window for the global pattern fit; reconstruction keeps
    # the shorter default window for locality
    estimation_window_len: int = 224
    # receive apodization for the estimation-pair beamforming; smooth
    # aperture weighting keeps the tracked pattern close to the
    # transmit-path echo-shift model
    estimation_apodization: str = "hann"
    recon_pairs: tuple[tuple[int, int], ...] = DEFAULT_RECON_PAIRS
    recon: ReconConfig = field(default_factory=ReconConfig)
    calibration_degree: int = 1
    threads: int = 1
    quick: bool = False

    # ---- derived geometry -------------------------------------------------

    def medium_grid(self) -> ImagingGrid:
        half = self.array.aperture / 2 + self.array.pitch
        dx = 3.0e-4
        nx = int(np.ceil(2 * half / dx))
        depth = self.bf_z0 + self.bf_depth + 2e-3
        dz = 3.0e-4
        nz = int(np.ceil(depth / dz))
        return ImagingGrid(x0=-half + dx / 2, z0=dz / 2, dx=dx, dz=dz, nx=nx, nz=nz)

    def medium(self) -> MediumSpec:
        return MediumSpec(
            background_sos=self.background_sos,
            grid=self.medium_grid(),
            inclusions=self.inclusions,
        )

    def scatterer_grid(self) -> ImagingGrid:
        """Extent populated with speckle: full aperture, shallow to deep."""
        half = self.array.aperture / 2
        dx = 5.0e-4
        nx = int(np.ceil(2 * half / dx))
        z_top = 3.0e-3
        depth = self.bf_z0 + self.bf_depth + 1e-3 - z_top
        dz = 5.0e-4
        nz = int(np.ceil(depth / dz))
        return ImagingGrid(x0=-half + dx / 2, z0=z_top + dz / 2, dx=dx, dz=dz,
                           nx=nx, nz=nz)

    def full_grid(self) -> ImagingGrid:
        half = self.array.aperture / 2
        nx = int(np.floor(2 * half / self.bf_dx)) + 1
        nz = int(np.round(self.bf_depth / self.bf_dz)) + 1
        return ImagingGrid(
            x0=-half, z0=self.bf_z0, dx=self.bf_dx, dz=self.bf_dz, nx=nx, nz=nz
        )

    def slow_grid(self) -> ImagingGrid:
        half = self.array.aperture / 2
        depth = self.bf_z0 + self.bf_depth + 1e-3
        dx = 2 * half / self.slow_nx
        dz = depth / self.slow_nz
        return ImagingGrid(
            x0=-half + dx / 2, z0=dz / 2, dx=dx, dz=dz,
            nx=self.slow_nx, nz=self.slow_nz,
        )

    def roi(self) -> PolarROI:
        if self.roi_reference == "probe_center":
            ref = 0.0
        else:
            a, b = self.estimation_pair
            ref = 0.5 * (
                element_position(self.array, a)[0]
                + element_position(self.array, b)[0]
            )
        return PolarROI(
            depth_min=self.roi_depth_min,
            depth_max=self.roi_depth_max,
            theta_min=self.roi_theta_min,
            theta_max=self.roi_theta_max,
            num_bins=self.roi_num_bins,
            reference_x=ref,
        )

    def estimation_grid(self) -> ImagingGrid:
        """Tight beamforming grid around the pattern-extraction ROI."""
        roi = self.roi()
        w = self.estimation_window_len
        r = self.tracking.search_radius
        margin_z = (w / 2 + r + 2) * self.bf_dz
        z0 = max(self.bf_z0 * 0.5, roi.depth_min - margin_z - 1e-3)
        z1 = roi.depth_max + margin_z + 1e-3
        nz = int(np.ceil((z1 - z0) / self.bf_dz)) + 1
        half_lat = (roi.depth_max + 2e-3) * np.sin(
            max(abs(roi.theta_min), abs(roi.theta_max)) + 0.05
        )
        x0 = roi.reference_x - half_lat
        nx = int(np.ceil(2 * half_lat / self.bf_dx)) + 1
        return ImagingGrid(x0=x0, z0=z0, dx=self.bf_dx, dz=self.bf_dz, nx=nx, nz=nz)

    def required_tx(self) -> list[int]:
        txs = set(self.estimation_pair)
        for a, b in self.recon_pairs:
            txs |= {a, b}
        return sorted(txs)


def apply_quick(cfg: PipelineConfig) -> PipelineConfig:
    """Coarsen grids and speckle density for CI-scale runs."""
    return replace(
        cfg,
        quick=True,
        scatterer_density=min(cfg.scatterer_density, 2.0),
        bf_dx=3.0e-4,
        bf_dz=3.75e-5,
        bf_depth=min(cfg.bf_depth, 27.0e-3),
        slow_nx=min(cfg.slow_nx, 24),
        slow_nz=min(cfg.slow_nz, 24),
        recon_axial_step=max(cfg.recon_axial_step, 8),
        recon_lateral_step=max(cfg.recon_lateral_step, 2),
        recon_pairs=(
            cfg.recon_pairs
            if len(cfg.recon_pairs) <= 4
            else ((40, 56), (56, 72), (72, 88))
        ),
    )


# ---------------------------------------------------------------------------
# plain-text config files (INI sections, unknown keys rejected)

_SCHEMA = {
    "array": {"num_elements", "pitch"},
    "pulse": {"center_frequency", "half_cycles", "sampling_frequency"},
    "medium": {"background_sos"},  # plus inclusionN keys, validated below
    "scatterers": {"density", "seed"},
    "simulation": {"noise_snr_db"},
    "grids": {"bf_dx", "bf_dz", "bf_z0", "bf_depth", "slow_nx", "slow_nz"},
    "tracking": {"window_len", "search_radius", "axial_step", "lateral_step",
                 "min_ncc"},
    "roi": {"depth_min", "depth_max", "theta_min", "theta_max", "num_bins",
            "reference"},
    "regression": {"method"},
    "estimation": {"pair", "window_len", "apodization"},
    "reconstruction": {"pairs", "lam", "tv_axial_weight", "tv_lateral_weight",
                       "l1_epsilon", "max_iter", "axial_step", "lateral_step"},
    "calibration": {"degree"},
}


def _parse_inclusion(value: str) -> Inclusion:
    parts = value.split()
    if len(parts) != 6:
        raise ConfigError(
            f"inclusion must be 'shape cx cz hx hz sos', got {value!r}"
        )
    return Inclusion(
        shape=parts[0],
        center=(float(parts[1]), float(parts[2])),
        half_axes=(float(parts[3]), float(parts[4])),
        sos=float(parts[5]),
    )


def load_config(path: Path) -> PipelineConfig:
    """Parse the sectioned key/value config file; unknown keys are errors."""
    cp = configparser.ConfigParser()
    read = cp.read(path)
    if not read:
        raise FileNotFoundError(f"config file {path} not found")
    cfg = PipelineConfig()
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if section == "medium" and key.startswith("inclusion"):
                continue
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    g = cp
    if g.has_section("array"):
        cfg.array = TransducerArray(
            num_elements=g.getint("array", "num_elements",
                                  fallback=cfg.array.num_elements),
            pitch=g.getfloat("array", "pitch", fallback=cfg.array.pitch),
        )
    if g.has_section("pulse"):
        cfg.pulse = PulseSpec(
            center_frequency=g.getfloat("pulse", "center_frequency",
                                        fallback=cfg.pulse.center_frequency),
            half_cycles=g.getint("pulse", "half_cycles",
                                 fallback=cfg.pulse.half_cycles),
            sampling_frequency=g.getfloat("pulse", "sampling_frequency",
                                          fallback=cfg.pulse.sampling_frequency),
        )
    if g.has_section("medium"):
        cfg.background_sos = g.getfloat("medium", "background_sos",
                                        fallback=cfg.background_sos)
        incs = []
        for key in sorted(g["medium"]):
            if key.startswith("inclusion"):
                incs.append(_parse_inclusion(g.get("medium", key)))
        cfg.inclusions = tuple(incs)
    if g.has_section("scatterers"):
        cfg.scatterer_density = g.getfloat("scatterers", "density",
                                           fallback=cfg.scatterer_density)
        cfg.seed = g.getint("scatterers", "seed", fallback=cfg.seed)
    if g.has_section("simulation") and g.get("simulation", "noise_snr_db",
                                             fallback="") != "":
        cfg.noise_snr_db = g.getfloat("simulation", "noise_snr_db")
    if g.has_section("grids"):
        for key in ("bf_dx", "bf_dz", "bf_z0", "bf_depth"):
            if g.has_option("grids", key):
                setattr(cfg, key, g.getfloat("grids", key))
        for key in ("slow_nx", "slow_nz"):
            if g.has_option("grids", key):
                setattr(cfg, key, g.getint("grids", key))
    if g.has_section("tracking"):
        t = cfg.tracking
        cfg.tracking = TrackConfig(
            window_len=g.getint("tracking", "window_len", fallback=t.window_len),
            search_radius=g.getint("tracking", "search_radius",
                                   fallback=t.search_radius),
            axial_step=g.getint("tracking", "axial_step", fallback=t.axial_step),
            lateral_step=g.getint("tracking", "lateral_step",
                                  fallback=t.lateral_step),
            min_ncc=g.getfloat("tracking", "min_ncc", fallback=t.min_ncc),
        )
    if g.has_section("roi"):
        cfg.roi_depth_min = g.getfloat("roi", "depth_min", fallback=cfg.roi_depth_min)
        cfg.roi_depth_max = g.getfloat("roi", "depth_max", fallback=cfg.roi_depth_max)
        cfg.roi_theta_min = g.getfloat("roi", "theta_min", fallback=cfg.roi_theta_min)
        cfg.roi_theta_max = g.getfloat("roi", "theta_max", fallback=cfg.roi_theta_max)
        cfg.roi_num_bins = g.getint("roi", "num_bins", fallback=cfg.roi_num_bins)
        cfg.roi_reference = g.get("roi", "reference", fallback=cfg.roi_reference)
    if g.has_section("regression"):
        cfg.regression_method = g.get("regression", "method",
                                      fallback=cfg.regression_method)
        if cfg.regression_method not in FITTERS:
            raise ConfigError(
                f"unknown regression method {cfg.regression_method!r}"
            )
    if g.has_section("estimation"):
        if g.has_option("estimation", "pair"):
            a, b = g.get("estimation", "pair").split(",")
            cfg.estimation_pair = (int(a), int(b))
        cfg.estimation_window_len = g.getint(
            "estimation", "window_len", fallback=cfg.estimation_window_len
        )
        cfg.estimation_apodization = g.get(
            "estimation", "apodization", fallback=cfg.estimation_apodization
        )
    if g.has_section("reconstruction"):
        if g.has_option("reconstruction", "pairs"):
            pairs = []
            for tok in g.get("reconstruction", "pairs").split():
                a, b = tok.split(",")
                pairs.append((int(a), int(b)))
            cfg.recon_pairs = tuple(pairs)
        r = cfg.recon
        cfg.recon = ReconConfig(
            lam=g.getfloat("reconstruction", "lam", fallback=r.lam),
            tv_axial_weight=g.getfloat("reconstruction", "tv_axial_weight",
                                       fallback=r.tv_axial_weight),
            tv_lateral_weight=g.getfloat("reconstruction", "tv_lateral_weight",
                                         fallback=r.tv_lateral_weight),
            l1_epsilon=g.getfloat("reconstruction", "l1_epsilon",
                                  fallback=r.l1_epsilon),
            max_iter=g.getint("reconstruction", "max_iter", fallback=r.max_iter),
        )
        cfg.recon_axial_step = g.getint("reconstruction", "axial_step",
                                        fallback=cfg.recon_axial_step)
        cfg.recon_lateral_step = g.getint("reconstruction", "lateral_step",
                                          fallback=cfg.recon_lateral_step)
    if g.has_section("calibration"):
        cfg.calibration_degree = g.getint("calibration", "degree",
                                          fallback=cfg.calibration_degree)
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    """Fully-resolved config in the same sectioned format."""
    lines = [
        "[array]",
        f"num_elements = {cfg.array.num_elements}",
        f"pitch = {cfg.array.pitch!r}",
        "",
        "[pulse]",
        f"center_frequency = {cfg.pulse.center_frequency!r}",
        f"half_cycles = {cfg.pulse.half_cycles}",
        f"sampling_frequency = {cfg.pulse.sampling_frequency!r}",
        "",
        "[medium]",
        f"background_sos = {cfg.background_sos!r}",
    ]
    for i, inc in enumerate(cfg.inclusions, 1):
        lines.append(
            f"inclusion{i} = {inc.shape} {inc.center[0]!r} {inc.center[1]!r} "
            f"{inc.half_axes[0]!r} {inc.half_axes[1]!r} {inc.sos!r}"
        )
    lines += [
        "",
        "[scatterers]",
        f"density = {cfg.scatterer_density!r}",
        f"seed = {cfg.seed}",
        "",
        "[simulation]",
        "noise_snr_db = "
        + ("" if cfg.noise_snr_db is None else repr(cfg.noise_snr_db)),
        "",
        "[grids]",
        f"bf_dx = {cfg.bf_dx!r}",
        f"bf_dz = {cfg.bf_dz!r}",
        f"bf_z0 = {cfg.bf_z0!r}",
        f"bf_depth = {cfg.bf_depth!r}",
        f"slow_nx = {cfg.slow_nx}",
        f"slow_nz = {cfg.slow_nz}",
        "",
        "[tracking]",
        f"window_len = {cfg.tracking.window_len}",
        f"search_radius = {cfg.tracking.search_radius}",
        f"axial_step = {cfg.tracking.axial_step}",
        f"lateral_step = {cfg.tracking.lateral_step}",
        f"min_ncc = {cfg.tracking.min_ncc!r}",
        "",
        "[roi]",
        f"depth_min = {cfg.roi_depth_min!r}",
        f"depth_max = {cfg.roi_depth_max!r}",
        f"theta_min = {cfg.roi_theta_min!r}",
        f"theta_max = {cfg.roi_theta_max!r}",
        f"num_bins = {cfg.roi_num_bins}",
        f"reference = {cfg.roi_reference}",
        "",
        "[regression]",
        f"method = {cfg.regression_method}",
        "",
        "[estimation]",
        f"pair = {cfg.estimation_pair[0]},{cfg.estimation_pair[1]}",
        f"window_len = {cfg.estimation_window_len}",
        f"apodization = {cfg.estimation_apodization}",
        "",
        "[reconstruction]",
        "pairs = " + " ".join(f"{a},{b}" for a, b in cfg.recon_pairs),
        f"lam = {cfg.recon.lam!r}",
        f"tv_axial_weight = {cfg.recon.tv_axial_weight!r}",
        f"tv_lateral_weight = {cfg.recon.tv_lateral_weight!r}",
        f"l1_epsilon = {cfg.recon.l1_epsilon!r}",
        f"max_iter = {cfg.recon.max_iter}",
        f"axial_step = {cfg.recon_axial_step}",
        f"lateral_step = {cfg.recon_lateral_step}",
        "",
        "[calibration]",
        f"degree = {cfg.calibration_degree}",
        "",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# stage implementations


def simulate_frames(cfg: PipelineConfig,
                    tx_list: list[int] | None = None) -> dict[int, ChannelFrame]:
    """Channel data for the required transmits, keyed by tx element."""
    medium = cfg.medium()
    fld = gen_scatterers(cfg.scatterer_grid(), cfg.scatterer_density, cfg.seed)
    txs = tx_list if tx_list is not None else cfg.required_tx()
    num_samples = max(
        required_samples(tx, fld, medium, cfg.pulse, cfg.array) for tx in txs
    )

    def one(tx):
        return simulate_frame(
            tx, fld, medium, cfg.pulse, cfg.array, num_samples,
            noise_snr_db=cfg.noise_snr_db, noise_seed=cfg.seed + tx,
        )

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            frames = list(pool.map(one, txs))
    else:
        frames = [one(tx) for tx in txs]
    return {fr.tx_element: fr for fr in frames}


def write_gt_map(out_dir: Path, cfg: PipelineConfig) -> None:
    grid = cfg.slow_grid()
    gt = cfg.medium().rasterize(grid)
    np.savetxt(out_dir / "gt_sos.csv", gt, delimiter=",", fmt="%.6f")
    (out_dir / "gt_sos.csv.txt").write_text(
        f"ground-truth SoS in m/s on the slowness grid\n"
        f"x0 {grid.x0!r}\nz0 {grid.z0!r}\ndx {grid.dx!r}\ndz {grid.dz!r}\n"
        f"nx {grid.nx}\nnz {grid.nz}\n"
    )


def cmd_simulate(cfg: PipelineConfig, out_dir: Path) -> Path:
    """Simulate and persist all frames the configured pipeline needs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = simulate_frames(cfg)
    write_frame_set(out_dir, list(frames.values()), cfg.medium())
    write_gt_map(out_dir, cfg)
    (out_dir / "config_resolved.ini").write_text(dump_config(cfg))
    return out_dir


def beamform_pair(
    frames: dict[int, ChannelFrame],
    pair: tuple[int, int],
    c_bf: float,
    grid: ImagingGrid,
    cfg: PipelineConfig,
) -> tuple[BeamformedFrame, BeamformedFrame]:
    bf = BFConfig(c_bf=c_bf, grid=grid)
    return (
        das_beamform(frames[pair[0]], cfg.array, bf),
        das_beamform(frames[pair[1]], cfg.array, bf),
    )


def estimate_slope(
    frames: dict[int, ChannelFrame], c_bf: float, cfg: PipelineConfig
):
    """Track the estimation pair at c_bf and fit the angular pattern."""
    grid = cfg.estimation_grid()
    bfc = BFConfig(c_bf=c_bf, grid=grid, apodization=cfg.estimation_apodization)
    fa = das_beamform(frames[cfg.estimation_pair[0]], cfg.array, bfc)
    fb = das_beamform(frames[cfg.estimation_pair[1]], cfg.array, bfc)
    track_cfg = replace(cfg.tracking, window_len=cfg.estimation_window_len)
    dmap = track_delays(fa, fb, track_cfg)
    pattern = extract_pattern(dmap, cfg.roi())
    fit = FITTERS[cfg.regression_method](pattern)
    return fit, pattern, dmap


@dataclass
class SweepResult:
    dataset: cal.CalibrationDataset
    models: dict[int, cal.CalibrationModel]
    report_rows: list[dict]


def run_calibration_sweep(
    cfg: PipelineConfig,
    frames: dict[int, ChannelFrame],
    delta_c_min: float = -40.0,
    delta_c_max: float = 40.0,
    step: float = 1.0,
    degrees: tuple[int, ...] = (1, 3, 5),
    train_selector="every-4",
) -> SweepResult:
    """Beamform/track/fit across the BF-SoS offset sweep and build models.

    Requires a homogeneous medium (self-consistent calibration against
    the artifact's own simulator). Evaluation rows report, per degree,
    the R^2 and RMSE of the round-trip offset estimates on the held-out
    points.
    """
    if cfg.inclusions:
        raise ConfigError("calibration requires a homogeneous medium")
    c_true = cfg.background_sos
    deltas = np.arange(delta_c_min, delta_c_max + step / 2, step)

    def one(dc):
        fit, _, _ = estimate_slope(frames, c_true + dc, cfg)
        return cal.CalibrationEntry(
            delta_c=float(dc), slope=fit.slope, r_squared=fit.r_squared
        )

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            entries = list(pool.map(one, deltas))
    else:
        entries = [one(dc) for dc in deltas]

    dataset = cal.CalibrationDataset(
        entries=tuple(entries),
        metadata={
            "c_true": c_true,
            "pair": cfg.estimation_pair,
            "roi": (cfg.roi_depth_min, cfg.roi_depth_max,
                    cfg.roi_theta_min, cfg.roi_theta_max),
            "method": cfg.regression_method,
            "seed": cfg.seed,
        },
    )

    models = {}
    rows = []
    dcs = dataset.delta_cs()
    order = np.argsort(dcs)
    for deg in degrees:
        model = cal.build_calibration(dataset, degree=deg,
                                      train_selector=train_selector)
        models[deg] = model
        train = set(model.training_indices)
        est, true = [], []
        for rank in range(order.size):
            if rank in train:
                continue
            e = dataset.entries[order[rank]]
            try:
                est.append(cal.estimate_offset(model, e.slope))
            except cal.OffsetOutOfRangeError as err:
                est.append(err.nearest_delta_c)
            true.append(e.delta_c)
        est = np.array(est)
        true = np.array(true)
        resid = est - true
        ss_tot = np.sum((true - true.mean()) ** 2)
        r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 0.0
        rows.append(
            {
                "degree": deg,
                "n_train": len(train),
                "n_test": true.size,
                "test_r2": float(r2),
                "test_rmse_mps": float(np.sqrt(np.mean(resid**2))),
            }
        )
    return SweepResult(dataset=dataset, models=models, report_rows=rows)


def cmd_calibrate(
    cfg: PipelineConfig,
    out_dir: Path,
    frames: dict[int, ChannelFrame] | None = None,
    delta_c_min: float = -40.0,
    delta_c_max: float = 40.0,
    step: float = 1.0,
    degrees: tuple[int, ...] = (1, 3, 5),
) -> SweepResult:
    """Full calibration stage with persistence of model, sweep and report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if frames is None:
        frames = simulate_frames(cfg, tx_list=sorted(set(cfg.estimation_pair)))
    result = run_calibration_sweep(
        cfg, frames, delta_c_min, delta_c_max, step, degrees
    )
    chosen = result.models[cfg.calibration_degree]
    cal.save_model(out_dir / "calibration_model.txt", chosen)
    cal.export_sweep(out_dir / "calibration_sweep.csv", result.dataset, chosen)
    with open(out_dir / "calibration_report.csv", "w") as f:
        f.write("degree,n_train,n_test,test_r2,test_rmse_mps\n")
        for row in result.report_rows:
            f.write(
                f"{row['degree']},{row['n_train']},{row['n_test']},"
                f"{row['test_r2']:.6f},{row['test_rmse_mps']:.6f}\n"
            )
    (out_dir / "config_resolved.ini").write_text(dump_config(cfg))
    return result


@dataclass
class EstimateResult:
    observed_slope: float
    delta_c_hat: float
    corrected_sos: float
    fit_r_squared: float


def cmd_estimate(
    cfg: PipelineConfig,
    frames_dir_or_frames,
    model: cal.CalibrationModel | Path,
    c_bf_assumed: float,
    out_dir: Path | None = None,
) -> EstimateResult:
    """Estimate the BF-SoS offset of a dataset and correct it."""
    if isinstance(frames_dir_or_frames, (str, Path)):
        frames = read_frame_set(Path(frames_dir_or_frames))
    else:
        frames = frames_dir_or_frames
    if isinstance(model, (str, Path)):
        model = cal.load_model(model)
    fit, pattern, dmap = estimate_slope(frames, c_bf_assumed, cfg)
    dc_hat = cal.estimate_offset(model, fit.slope)
    corrected = cal.corrected_sos(c_bf_assumed, dc_hat)
    result = EstimateResult(
        observed_slope=fit.slope,
        delta_c_hat=dc_hat,
        corrected_sos=corrected,
        fit_r_squared=fit.r_squared,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        export_pattern(out_dir / "pattern.csv", pattern, fit)
        export_delay_map(out_dir / "delay_map.csv", dmap)
        (out_dir / "estimate.json").write_text(
            json.dumps(
                {
                    "convention": cal.CONVENTION,
                    "c_bf_assumed": c_bf_assumed,
                    "observed_slope_s_per_rad": fit.slope,
                    "delta_c_hat_mps": dc_hat,
                    "corrected_sos_mps": corrected,
                    "fit_r_squared": fit.r_squared,
                },
                indent=2,
            )
        )
    return result


@dataclass
class ReconResult:
    sos_map: np.ndarray  # absolute SoS, m/s, on the slowness grid
    slowness: SlownessMap
    converged: bool
    rmse_vs_gt: float | None = None


def cmd_reconstruct(
    cfg: PipelineConfig,
    frames_dir_or_frames,
    c_bf: float,
    out_dir: Path | None = None,
    gt_map: np.ndarray | None = None,
) -> ReconResult:
    """Tomographic local-SoS reconstruction at the given beamforming SoS."""
    if isinstance(frames_dir_or_frames, (str, Path)):
        frames_dir = Path(frames_dir_or_frames)
        frames = read_frame_set(frames_dir)
        gt_path = frames_dir / "gt_sos.csv"
        if gt_map is None and gt_path.exists():
            gt_map = np.loadtxt(gt_path, delimiter=",")
    else:
        frames = frames_dir_or_frames

    missing = [t for t in {e for p in cfg.recon_pairs for e in p}
               if t not in frames]
    if missing:
        raise FileNotFoundError(f"missing frames for tx elements {missing}")

    grid = cfg.full_grid()
    track_cfg = replace(
        cfg.tracking,
        axial_step=cfg.recon_axial_step,
        lateral_step=cfg.recon_lateral_step,
    )
    bf_cache: dict[int, BeamformedFrame] = {}

    def bf(tx):
        if tx not in bf_cache:
            bf_cache[tx] = das_beamform(
                frames[tx], cfg.array, BFConfig(c_bf=c_bf, grid=grid)
            )
        return bf_cache[tx]

    dmaps: list[DelayMap] = []
    for a, b in cfg.recon_pairs:
        dmaps.append(track_delays(bf(a), bf(b), track_cfg))

    meas_grid = dmaps[0].grid
    masks = [d.valid for d in dmaps]
    L = build_path_matrix(
        list(cfg.recon_pairs), meas_grid, cfg.slow_grid(), masks, cfg.array
    )
    delays = np.concatenate([d.delays[d.valid] for d in dmaps])
    D = tv_operator(cfg.slow_grid(), cfg.recon.tv_axial_weight,
                    cfg.recon.tv_lateral_weight)
    slowness, info = reconstruct(L, delays, D, cfg.recon)
    sos_map = slowness.to_sos(c_bf)

    rmse = rmse_map(sos_map, gt_map) if gt_map is not None else None
    result = ReconResult(
        sos_map=sos_map, slowness=slowness, converged=info.converged,
        rmse_vs_gt=rmse,
    )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savetxt(out_dir / "sos_map.csv", sos_map, delimiter=",", fmt="%.6f")
        sg = cfg.slow_grid()
        np.ascontiguousarray(sos_map, dtype="<f4").tofile(out_dir / "sos_map.f32")
        (out_dir / "sos_map.f32.txt").write_text(
            f"SoS map m/s, row-major nz x nx float32 little-endian\n"
            f"c_bf {c_bf!r}\nconverged {info.converged}\n"
            f"x0 {sg.x0!r}\nz0 {sg.z0!r}\ndx {sg.dx!r}\ndz {sg.dz!r}\n"
            f"nx {sg.nx}\nnz {sg.nz}\n"
        )
        with open(out_dir / "objective_trace.csv", "w") as f:
            f.write("iteration,objective\n")
            for i, v in enumerate(info.objective_trace):
                f.write(f"{i},{v:.9e}\n")
        if rmse is not None:
            (out_dir / "metrics.json").write_text(
                json.dumps({"rmse_vs_gt_mps": rmse,
                            "converged": info.converged}, indent=2)
            )
    return result


def region_labels(cfg: PipelineConfig) -> RegionLabels | None:
    """Inclusion/background masks on the slowness grid, if any inclusion."""
    if not cfg.inclusions:
        return None
    grid = cfg.slow_grid()
    X, Z = grid.meshgrid()
    inc = np.zeros(X.shape, dtype=bool)
    for i in cfg.inclusions:
        inc |= i.contains(X, Z)
    return RegionLabels(inclusion=inc, background=~inc)


# ---------------------------------------------------------------------------
# desk-scale phantom set


def default_phantom_set(background_sos: float = 1500.0) -> list[tuple[str, tuple[Inclusion, ...]]]:
    """8 phantoms: 4 elliptical and 4 rectangular inclusions, +-20/40 m/s."""
    phantoms = []
    specs = [
        ("ellipse_p40", "ellipse", (-4e-3, 20e-3), (5e-3, 4e-3), 40.0),
        ("ellipse_m40", "ellipse", (4e-3, 22e-3), (4e-3, 5e-3), -40.0),
        ("ellipse_p20", "ellipse", (0e-3, 18e-3), (6e-3, 4e-3), 20.0),
        ("ellipse_m20", "ellipse", (-3e-3, 24e-3), (5e-3, 5e-3), -20.0),
        ("rect_p40", "rectangle", (3e-3, 20e-3), (5e-3, 4e-3), 40.0),
        ("rect_m40", "rectangle", (-4e-3, 22e-3), (4e-3, 4e-3), -40.0),
        ("rect_p20", "rectangle", (0e-3, 24e-3), (6e-3, 4e-3), 20.0),
        ("rect_m20", "rectangle", (4e-3, 18e-3), (5e-3, 5e-3), -20.0),
    ]
    for name, shape, center, half, dsos in specs:
        phantoms.append(
            (
                name,
                (
                    Inclusion(
                        shape=shape, center=center, half_axes=half,
                        sos=background_sos + dsos,
                    ),
                ),
            )
        )
    return phantoms


@dataclass
class CaseResult:
    name: str
    c_bf_assumed: float
    delta_c_hat: float
    corrected_sos: float
    rmse_before: float
    rmse_after: float
    cnr_before_db: float
    cnr_after_db: float
    converged: bool

    @property
    def rmse_reduction(self) -> float:
        return 1.0 - self.rmse_after / self.rmse_before


def evaluate_phantom_set(
    base_cfg: PipelineConfig,
    model: cal.CalibrationModel,
    phantoms: list[tuple[str, tuple[Inclusion, ...]]] | None = None,
    offset_percents: tuple[float, float] = (1.5, -1.5),
    out_dir: Path | None = None,
) -> list[CaseResult]:
    """Before/after-correction reconstruction metrics over a phantom batch.

    Each phantom is beamformed with a deliberately wrong BF-SoS (offsets
    alternate through offset_percents, as a percentage of the true
    background SoS), the offset is estimated and corrected, and both maps
    are reconstructed and scored against the ground truth. When out_dir is
    given, per-case subdirectories with case_metrics.csv and the two SoS
    maps are written, ready for cmd_report aggregation.
    """
    if phantoms is None:
        phantoms = default_phantom_set(base_cfg.background_sos)
    results = []
    for i, (name, incs) in enumerate(phantoms):
        cfg = replace(base_cfg, inclusions=incs)
        pct = offset_percents[i % len(offset_percents)]
        c_bf = cfg.background_sos * (1.0 + pct / 100.0)
        frames = simulate_frames(cfg)
        gt = cfg.medium().rasterize(cfg.slow_grid())
        labels = region_labels(cfg)
        est = cmd_estimate(cfg, frames, model, c_bf)
        case_dir = Path(out_dir) / name if out_dir is not None else None
        before = cmd_reconstruct(
            cfg, frames, c_bf, gt_map=gt,
            out_dir=case_dir / "before" if case_dir else None,
        )
        after = cmd_reconstruct(
            cfg, frames, est.corrected_sos, gt_map=gt,
            out_dir=case_dir / "after" if case_dir else None,
        )
        res = CaseResult(
            name=name,
            c_bf_assumed=c_bf,
            delta_c_hat=est.delta_c_hat,
            corrected_sos=est.corrected_sos,
            rmse_before=before.rmse_vs_gt,
            rmse_after=after.rmse_vs_gt,
            cnr_before_db=cnr_db(before.sos_map, labels),
            cnr_after_db=cnr_db(after.sos_map, labels),
            converged=after.converged,
        )
        results.append(res)
        if case_dir is not None:
            case_dir.mkdir(parents=True, exist_ok=True)
            with open(case_dir / "case_metrics.csv", "w", newline="") as f:
                wr = csv.writer(f)
                wr.writerow([
                    "case_id", "c_bf_assumed", "delta_c_hat", "corrected_sos",
                    "rmse_before", "rmse_after", "rmse_reduction",
                    "cnr_before_db", "cnr_after_db",
                ])
                wr.writerow([
                    res.name, f"{res.c_bf_assumed:.3f}",
                    f"{res.delta_c_hat:.3f}", f"{res.corrected_sos:.3f}",
                    f"{res.rmse_before:.4f}", f"{res.rmse_after:.4f}",
                    f"{res.rmse_reduction:.4f}",
                    f"{res.cnr_before_db:.4f}", f"{res.cnr_after_db:.4f}",
                ])
    return results


def cmd_report(run_dir: Path, out_dir: Path | None = None) -> dict:
    """Aggregate per-case metrics of a run directory into CSV tables.

    Missing artifacts are listed rather than fatal; a partial report is
    still produced. Plot-ready data (pattern, calibration curve, SoS
    maps as PNG when matplotlib is available) is emitted alongside.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "report"
    if not run_dir.exists():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    metrics_files = sorted(run_dir.glob("**/case_metrics.csv"))
    cal_reports = sorted(run_dir.glob("**/calibration_report.csv"))
    sweeps = sorted(run_dir.glob("**/calibration_sweep.csv"))
    sos_maps = sorted(run_dir.glob("**/sos_map.csv"))
    missing = []
    if not metrics_files and not cal_reports and not sos_maps:
        raise FileNotFoundError(
            f"no report inputs under {run_dir}; expected case_metrics.csv, "
            "calibration_report.csv or sos_map.csv files"
        )
    out_dir.mkdir(parents=True, exist_ok=True)

    summary = {"cases": 0, "missing": missing, "outputs": []}
    if metrics_files:
        import csv as _csv

        rows = []
        for mf in metrics_files:
            with open(mf) as f:
                rows.extend(list(_csv.DictReader(f)))
        if rows:
            num_fields = [k for k in rows[0] if k != "case_id"]
            mean_row = {"case_id": "mean"}
            for k in num_fields:
                vals = [float(r[k]) for r in rows
                        if r[k] not in ("", "inf", "-inf")]
                mean_row[k] = f"{np.mean(vals):.6f}" if vals else ""
            with open(out_dir / "metrics_table.csv", "w", newline="") as f:
                wr = _csv.DictWriter(f, fieldnames=list(rows[0].keys()))
                wr.writeheader()
                for r in rows:
                    wr.writerow(r)
                wr.writerow(mean_row)
            summary["cases"] = len(rows)
            summary["outputs"].append(str(out_dir / "metrics_table.csv"))
    else:
        missing.append("case_metrics.csv")

    for src in cal_reports:
        dst = out_dir / "calibration_report.csv"
        dst.write_text(src.read_text())
        summary["outputs"].append(str(dst))

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for sweep in sweeps:
            data = np.genfromtxt(sweep, delimiter=",", skip_header=1,
                                 usecols=(0, 1))
            fig, ax = plt.subplots()
            ax.plot(data[:, 0], data[:, 1], "o", ms=3)
            ax.set_xlabel("delta_c (m/s), c_bf - c")
            ax.set_ylabel("pattern slope (s/rad)")
            fig.savefig(out_dir / (sweep.parent.name + "_calibration.png"),
                        dpi=120)
            plt.close(fig)
            summary["outputs"].append(
                str(out_dir / (sweep.parent.name + "_calibration.png")))
        for smap in sos_maps:
            arr = np.loadtxt(smap, delimiter=",")
            fig, ax = plt.subplots()
            im = ax.imshow(arr, cmap="viridis", aspect="auto")
            fig.colorbar(im, ax=ax, label="SoS (m/s)")
            name = smap.parent.name + "_sos_map.png"
            fig.savefig(out_dir / name, dpi=120)
            plt.close(fig)
            summary["outputs"].append(str(out_dir / name))
    except ImportError:
        missing.append("matplotlib (plots skipped)")

    (out_dir / "report_summary.json").write_text(json.dumps(summary, indent=2))
    return summary
