"""Gridded scene model: equirectangular lat/lon rasters with a fill sentinel.

Provides nearest-neighbor regridding, ocean masking, channel-wise colocation
stacking, and the SFG1 scene container (see README for the byte layout).
All operations are pure: they return new Scene objects.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .blockio import read_container, split_blocks, write_container
from .errors import GridMismatchError, SceneFormatError

FILL_VALUE = -9999.0
SCENE_MAGIC = b"SFG1"

# Guard band for the strict distance gate: a source cell at exactly one
# cell-size from the target center is outside, regardless of rounding noise.
_GATE_RELTOL = 1e-9


@dataclass(frozen=True)
class GridDef:
    """Equirectangular lat/lon grid; (lat0, lon0) is the center of cell (0, 0)."""

    lat0: float
    lon0: float
    dlat: float  # degrees per row, negative for north-up
    dlon: float  # degrees per col
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")
        if self.dlat == 0 or self.dlon == 0:
            raise ValueError("grid steps must be nonzero")

    def lat_centers(self) -> np.ndarray:
        return self.lat0 + np.arange(self.rows) * self.dlat

    def lon_centers(self) -> np.ndarray:
        return self.lon0 + np.arange(self.cols) * self.dlon

    def to_dict(self) -> dict:
        return {
            "lat0": self.lat0,
            "lon0": self.lon0,
            "dlat": self.dlat,
            "dlon": self.dlon,
            "rows": self.rows,
            "cols": self.cols,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridDef":
        return cls(
            lat0=float(d["lat0"]),
            lon0=float(d["lon0"]),
            dlat=float(d["dlat"]),
            dlon=float(d["dlon"]),
            rows=int(d["rows"]),
            cols=int(d["cols"]),
        )


@dataclass(eq=False)
class Scene:
    """One multi-channel raster for one instrument and one UTC day."""

    instrument_id: str
    date: dt.date
    grid: GridDef
    channel_names: list[str]
    data: np.ndarray  # (channels, rows, cols) float32
    fill_value: float = FILL_VALUE

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        expected = (len(self.channel_names), self.grid.rows, self.grid.cols)
        if self.data.shape != expected:
            raise ValueError(f"data shape {self.data.shape} != {expected}")
        if len(set(self.channel_names)) != len(self.channel_names):
            raise ValueError(f"duplicate channel names: {self.channel_names}")
        if not np.isfinite(self.fill_value):
            raise ValueError("fill_value must be finite")
        valued = self.data[self.data != np.float32(self.fill_value)]
        if valued.size and not np.all(np.isfinite(valued)):
            raise ValueError("non-fill scene values must be finite")

    @property
    def key(self) -> str:
        return f"{self.instrument_id}:{self.date.isoformat()}"

    def valid_mask(self) -> np.ndarray:
        """True where every channel holds a non-fill value."""
        return np.all(self.data != np.float32(self.fill_value), axis=0)


@dataclass(eq=False)
class OceanMask:
    grid: GridDef
    keep: np.ndarray = field(repr=False)  # (rows, cols) bool, True = ocean

    def __post_init__(self):
        self.keep = np.ascontiguousarray(self.keep, dtype=bool)
        if self.keep.shape != (self.grid.rows, self.grid.cols):
            raise ValueError(f"mask shape {self.keep.shape} != grid {self.grid.rows}x{self.grid.cols}")


def scenes_equal(a: Scene, b: Scene) -> bool:
    return (
        a.instrument_id == b.instrument_id
        and a.date == b.date
        and a.grid == b.grid
        and list(a.channel_names) == list(b.channel_names)
        and a.fill_value == b.fill_value
        and np.array_equal(a.data, b.data)
    )


def _nearest_index(targets: np.ndarray, origin: float, step: float, n: int) -> np.ndarray:
    # Separable nearest cell; exact half-way ties take the smaller index,
    # matching a first-occurrence argmin over a row-major scan.
    f = (targets - origin) / step
    base = np.floor(f)
    idx = base + (f - base > 0.5)
    return np.clip(idx, 0, n - 1).astype(np.int64)


def resample_nearest(scene: Scene, target: GridDef) -> Scene:
    """Regrid by nearest source cell center in degree space.

    A target cell takes the nearest source value only when the source center
    lies strictly within max(|dlat|, |dlon|) of the source grid; anything at
    or beyond that distance, and fill itself, comes out as fill.
    """
    src = scene.grid
    lat_t = target.lat_centers()
    lon_t = target.lon_centers()
    r_idx = _nearest_index(lat_t, src.lat0, src.dlat, src.rows)
    c_idx = _nearest_index(lon_t, src.lon0, src.dlon, src.cols)
    dlat = src.lat_centers()[r_idx] - lat_t
    dlon = src.lon_centers()[c_idx] - lon_t
    dist2 = dlat[:, None] ** 2 + dlon[None, :] ** 2
    gate = max(abs(src.dlat), abs(src.dlon))
    within = dist2 < gate * gate * (1.0 - _GATE_RELTOL)

    gathered = scene.data[:, r_idx[:, None], c_idx[None, :]]
    fill = np.float32(scene.fill_value)
    out = np.where(within[None, :, :], gathered, fill)
    return Scene(
        instrument_id=scene.instrument_id,
        date=scene.date,
        grid=target,
        channel_names=list(scene.channel_names),
        data=out,
        fill_value=scene.fill_value,
    )


def apply_mask(scene: Scene, mask: OceanMask) -> Scene:
    if mask.grid != scene.grid:
        raise GridMismatchError(f"mask grid {mask.grid} != scene grid {scene.grid}")
    fill = np.float32(scene.fill_value)
    out = np.where(mask.keep[None, :, :], scene.data, fill)
    return Scene(
        instrument_id=scene.instrument_id,
        date=scene.date,
        grid=scene.grid,
        channel_names=list(scene.channel_names),
        data=out,
        fill_value=scene.fill_value,
    )


def colocate_stack(scenes: list[Scene], instrument_id: str | None = None) -> Scene:
    """Stack scenes channel-wise on a shared grid and day.

    Output channel names are prefixed with each source instrument id. A cell
    missing from any contributing scene (fill in any of its channels) is fill
    in every output channel: fused streams require joint validity.
    """
    if not scenes:
        raise ValueError("colocate_stack needs at least one scene")
    first = scenes[0]
    for s in scenes[1:]:
        if s.grid != first.grid:
            raise GridMismatchError(f"{s.instrument_id} grid differs from {first.instrument_id}")
        if s.date != first.date:
            raise GridMismatchError(f"{s.instrument_id} date {s.date} != {first.date}")
    names = [f"{s.instrument_id}:{name}" for s in scenes for name in s.channel_names]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate prefixed channel names after stacking: {names}")

    fill = np.float32(first.fill_value)
    joint_valid = np.ones((first.grid.rows, first.grid.cols), dtype=bool)
    for s in scenes:
        joint_valid &= np.all(s.data != np.float32(s.fill_value), axis=0)
    stacked = np.concatenate([s.data for s in scenes], axis=0)
    stacked = np.where(joint_valid[None, :, :], stacked, fill)
    return Scene(
        instrument_id=instrument_id or "+".join(s.instrument_id for s in scenes),
        date=first.date,
        grid=first.grid,
        channel_names=names,
        data=stacked,
        fill_value=first.fill_value,
    )


def write_scene(scene: Scene, path) -> None:
    header = {
        "instrument_id": scene.instrument_id,
        "date": scene.date.isoformat(),
        "grid": scene.grid.to_dict(),
        "channel_names": list(scene.channel_names),
        "fill_value": scene.fill_value,
    }
    write_container(path, SCENE_MAGIC, header, [scene.data.astype("<f4")])


def read_scene(path) -> Scene:
    header, payload = read_container(path, SCENE_MAGIC)
    try:
        grid = GridDef.from_dict(header["grid"])
        names = [str(n) for n in header["channel_names"]]
        date = dt.date.fromisoformat(header["date"])
        instrument = str(header["instrument_id"])
        fill = float(header["fill_value"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"{path}: invalid scene header: {exc}") from exc
    (data,) = split_blocks(path, payload, [(len(names), grid.rows, grid.cols)], "<f4")
    return Scene(
        instrument_id=instrument,
        date=date,
        grid=grid,
        channel_names=names,
        data=data,
        fill_value=fill,
    )


def write_mask(mask: OceanMask, path) -> None:
    scene = Scene(
        instrument_id="oceanmask",
        date=dt.date(1970, 1, 1),
        grid=mask.grid,
        channel_names=["keep"],
        data=mask.keep.astype(np.float32)[None, :, :],
    )
    write_scene(scene, path)


def read_mask(path) -> OceanMask:
    scene = read_scene(path)
    if len(scene.channel_names) != 1:
        raise SceneFormatError(f"{path}: ocean mask must have exactly one channel")
    return OceanMask(grid=scene.grid, keep=scene.data[0] > 0.5)
