"""Deterministic synthetic world: drifting bloom fields, a spectral forward
model producing OC and SIF scenes with blobby cloud gaps, and simulated
in-situ sampling. This is the planted ground truth for end-to-end tests.

The forward model maps concentration c (cells/L) to reflectance through
log1p(c) scaled by log1p(1e7), keeping five decades of concentration inside a
unit dynamic range. Clouds are smoothed-noise threshold masks, independent
per instrument, covering the configured area fraction in contiguous patches.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .context import InSituRecord
from .georaster import FILL_VALUE, GridDef, OceanMask, Scene

LOG_SCALE = float(np.log1p(1e7))
_CLOUD_SMOOTH_SIGMA = 4.0  # cells; sets cloud patch size


@dataclass
class SpeciesSpec:
    name: str
    signature: np.ndarray  # per-OC-channel weights
    blooms: int
    amplitude: float  # peak cells/L
    radius_deg: float
    drift_deg_per_day: float

    def __post_init__(self):
        self.signature = np.asarray(self.signature, dtype=np.float64)
        if self.amplitude <= 0 or self.radius_deg <= 0 or self.blooms < 0:
            raise ValueError(f"invalid bloom dynamics for {self.name}")


@dataclass
class SynthConfig:
    grid: GridDef
    start_date: dt.date
    days: int
    species: list[SpeciesSpec]
    baseline_spectrum: np.ndarray
    noise_std: float
    cloud_fraction: float
    seed: int
    sif_gain: float = 1.0
    oc_instrument: str = "OC"
    sif_instrument: str = "SIF"

    def __post_init__(self):
        self.baseline_spectrum = np.asarray(self.baseline_spectrum, dtype=np.float64)
        if not 0.0 <= self.cloud_fraction <= 1.0:
            raise ValueError("cloud_fraction must be in [0, 1]")
        if self.days < 1:
            raise ValueError("need at least one day")
        for sp in self.species:
            if sp.signature.shape != self.baseline_spectrum.shape:
                raise ValueError(f"{sp.name} signature length != baseline channels")


@dataclass(eq=False)
class TruthField:
    date: dt.date
    grid: GridDef
    conc: dict[str, np.ndarray]  # species -> (rows, cols) cells/L
    total: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.total is None:
            self.total = sum(self.conc.values())
        for name, arr in self.conc.items():
            if np.any(arr < 0):
                raise ValueError(f"negative concentration in {name}")


def forward_reflectance(conc: dict[str, np.ndarray], cfg: SynthConfig) -> np.ndarray:
    """Noiseless OC reflectance: baselines plus signature-weighted log responses."""
    out = np.broadcast_to(
        cfg.baseline_spectrum[:, None, None],
        (cfg.baseline_spectrum.shape[0], cfg.grid.rows, cfg.grid.cols),
    ).astype(np.float64).copy()
    for sp in cfg.species:
        response = np.log1p(conc[sp.name]) / LOG_SCALE
        out += sp.signature[:, None, None] * response[None, :, :]
    return out


def sif_signal(total: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Noiseless SIF channel, proportional to log1p of total concentration."""
    return cfg.sif_gain * np.log1p(total) / LOG_SCALE


def _cloud_mask(rng: np.random.Generator, shape: tuple[int, int], fraction: float) -> np.ndarray:
    noise = rng.standard_normal(shape)
    if fraction <= 0.0:
        return np.zeros(shape, dtype=bool)
    smooth = gaussian_filter(noise, sigma=_CLOUD_SMOOTH_SIGMA)
    return smooth > np.quantile(smooth, 1.0 - fraction)


def gen_world(cfg: SynthConfig) -> tuple[list[TruthField], list[Scene], list[Scene]]:
    """Truth fields plus OC and SIF scenes for ``cfg.days`` consecutive days.

    Blooms are Gaussian blobs with seeded initial positions and per-bloom drift
    directions, wrapped to stay inside the domain. Cloud masks are drawn
    independently per instrument and day.
    """
    rng = np.random.default_rng(cfg.seed)
    grid = cfg.grid
    lat = grid.lat_centers()
    lon = grid.lon_centers()
    lat_lo = min(lat[0], lat[-1]) - abs(grid.dlat) / 2
    lon_lo = min(lon[0], lon[-1]) - abs(grid.dlon) / 2
    lat_span = grid.rows * abs(grid.dlat)
    lon_span = grid.cols * abs(grid.dlon)

    blooms = []  # (species, lat0, lon0, dlat/day, dlon/day)
    for sp in cfg.species:
        for _ in range(sp.blooms):
            f_lat = lat_lo + rng.random() * lat_span
            f_lon = lon_lo + rng.random() * lon_span
            angle = rng.random() * 2 * np.pi
            blooms.append((sp, f_lat, f_lon,
                           sp.drift_deg_per_day * np.sin(angle),
                           sp.drift_deg_per_day * np.cos(angle)))

    truths: list[TruthField] = []
    oc_scenes: list[Scene] = []
    sif_scenes: list[Scene] = []
    oc_names = [f"b{i}" for i in range(cfg.baseline_spectrum.shape[0])]
    for day in range(cfg.days):
        date = cfg.start_date + dt.timedelta(days=day)
        conc = {sp.name: np.zeros((grid.rows, grid.cols)) for sp in cfg.species}
        for sp, b_lat, b_lon, v_lat, v_lon in blooms:
            c_lat = lat_lo + (b_lat + v_lat * day - lat_lo) % lat_span
            c_lon = lon_lo + (b_lon + v_lon * day - lon_lo) % lon_span
            d2 = (lat - c_lat)[:, None] ** 2 + (lon - c_lon)[None, :] ** 2
            conc[sp.name] += sp.amplitude * np.exp(-d2 / (2 * sp.radius_deg ** 2))
        truth = TruthField(date=date, grid=grid, conc=conc)
        truths.append(truth)

        oc = forward_reflectance(conc, cfg)
        oc += cfg.noise_std * rng.standard_normal(oc.shape)
        oc_cloud = _cloud_mask(rng, (grid.rows, grid.cols), cfg.cloud_fraction)
        oc = oc.astype(np.float32)
        oc[:, oc_cloud] = np.float32(FILL_VALUE)
        oc_scenes.append(Scene(
            instrument_id=cfg.oc_instrument, date=date, grid=grid,
            channel_names=list(oc_names), data=oc,
        ))

        sif = sif_signal(truth.total, cfg)
        sif += cfg.noise_std * rng.standard_normal(sif.shape)
        sif_cloud = _cloud_mask(rng, (grid.rows, grid.cols), cfg.cloud_fraction)
        sif = sif.astype(np.float32)[None, :, :]
        sif[:, sif_cloud] = np.float32(FILL_VALUE)
        sif_scenes.append(Scene(
            instrument_id=cfg.sif_instrument, date=date, grid=grid,
            channel_names=["sif"], data=sif,
        ))
    return truths, oc_scenes, sif_scenes


def gen_insitu(truths: list[TruthField], sites: int, per_day: int, lognoise_std: float,
               seed: int, ocean_mask: OceanMask | None = None,
               max_site_attempts: int = 100_000) -> list[InSituRecord]:
    """Simulated sampling: fixed seeded site cells, lognormal measurement noise.

    Sites land on ocean cells only; draws on land (or duplicate cells) are
    rejected and resampled. Depth is uniform in [0, 2] m so the 1 m depth
    filter removes a real subset. One record per species per sampled site-day.
    """
    if sites < 1:
        raise ValueError("need at least one site")
    if not truths:
        raise ValueError("need at least one truth field")
    grid = truths[0].grid
    if ocean_mask is not None and ocean_mask.grid != grid:
        raise ValueError("ocean mask grid does not match truth grid")
    keep = ocean_mask.keep if ocean_mask is not None else np.ones((grid.rows, grid.cols), bool)
    if keep.sum() < sites:
        raise ValueError(f"only {int(keep.sum())} ocean cells for {sites} sites")

    rng = np.random.default_rng(seed)
    chosen: list[tuple[int, int]] = []
    attempts = 0
    while len(chosen) < sites:
        attempts += 1
        if attempts > max_site_attempts:
            raise RuntimeError("site placement failed: too many rejected draws")
        r = int(rng.integers(grid.rows))
        c = int(rng.integers(grid.cols))
        if not keep[r, c] or (r, c) in chosen:
            continue
        chosen.append((r, c))

    lat = grid.lat_centers()
    lon = grid.lon_centers()
    records: list[InSituRecord] = []
    for truth in truths:
        if per_day >= sites:
            sampled = list(range(sites))
        else:
            sampled = sorted(rng.choice(sites, size=per_day, replace=False).tolist())
        for i in sampled:
            r, c = chosen[i]
            for name, fieldvals in truth.conc.items():
                z = rng.standard_normal()
                depth = rng.uniform(0.0, 2.0)
                records.append(InSituRecord(
                    lat=float(lat[r]), lon=float(lon[c]), date=truth.date,
                    depth=float(depth), species=name,
                    concentration=float(fieldvals[r, c] * np.exp(lognoise_std * z)),
                ))
    return records


def write_truth(truth: TruthField, path) -> None:
    from .georaster import write_scene

    names = list(truth.conc) + ["total"]
    data = np.stack([truth.conc[n] for n in truth.conc] + [truth.total]).astype(np.float32)
    write_scene(Scene(instrument_id="truth", date=truth.date, grid=truth.grid,
                      channel_names=names, data=data), path)


def read_truth(path) -> TruthField:
    from .georaster import read_scene

    scene = read_scene(path)
    if scene.channel_names[-1] != "total":
        raise ValueError(f"{path}: not a truth container")
    conc = {name: scene.data[i].astype(np.float64)
            for i, name in enumerate(scene.channel_names[:-1])}
    return TruthField(date=scene.date, grid=scene.grid, conc=conc,
                      total=scene.data[-1].astype(np.float64))
