"""Daily product merging with a data-quality indicator, monthly composites,
validation confusion matrices, and PNG map rendering.

Merging takes the first valid value per pixel in the fixed stream order
fused (OC+SIF), SIF-only, OC-only; the DQI raster records which stream won.
"""

from __future__ import annotations

import datetime as dt
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .blockio import atomic_write_bytes
from .context import BinScheme, InSituRecord, bin_value
from .errors import GridMismatchError, SceneFormatError
from .georaster import FILL_VALUE, GridDef, Scene, read_scene, write_scene

DQI_OC_SIF = 0
DQI_SIF_ONLY = 1
DQI_OC_ONLY = 2

NODATA = -1

BIN_RULE_MEAN_ROUND = "mean-round"
BIN_RULE_MODE = "mode"


@dataclass(eq=False)
class ConcentrationProduct:
    """Per-pixel binned concentration for one species, stream, and day."""

    grid: GridDef
    date: dt.date
    species: str
    stream_id: str
    bins: np.ndarray  # (rows, cols) int32, NODATA where invalid
    certainty: np.ndarray  # (rows, cols) float32, NaN where invalid

    def __post_init__(self):
        shape = (self.grid.rows, self.grid.cols)
        self.bins = np.ascontiguousarray(self.bins, dtype=np.int32)
        self.certainty = np.ascontiguousarray(self.certainty, dtype=np.float32)
        if self.bins.shape != shape or self.certainty.shape != shape:
            raise ValueError(f"raster shapes must match grid {shape}")


@dataclass(eq=False)
class DqiRaster:
    """Which stream produced each merged pixel: 0 fused, 1 SIF-only, 2 OC-only."""

    grid: GridDef
    date: dt.date
    values: np.ndarray  # (rows, cols) int32, NODATA where invalid

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.int32)
        if self.values.shape != (self.grid.rows, self.grid.cols):
            raise ValueError("DQI shape must match grid")


@dataclass(eq=False)
class ConfusionMatrix:
    """Rows are in-situ bins, columns predicted bins; percentages row-normalized."""

    species: str
    counts: np.ndarray  # (n_bins, n_bins) int64
    percentages: np.ndarray  # (n_bins, n_bins) float64

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        total = self.total
        return float(np.trace(self.counts) / total) if total else 0.0


def _check_aligned(products: list[ConcentrationProduct]):
    first = products[0]
    for p in products[1:]:
        if p.grid != first.grid:
            raise GridMismatchError("merge inputs disagree on grid")
        if p.date != first.date or p.species != first.species:
            raise GridMismatchError(
                f"merge inputs disagree on date/species: "
                f"{p.date}/{p.species} vs {first.date}/{first.species}"
            )


def merge_streams(oc_sif: ConcentrationProduct | None,
                  sif: ConcentrationProduct | None,
                  oc: ConcentrationProduct | None):
    """First-valid-wins merge in the order fused, SIF-only, OC-only.

    Returns the merged product and the DQI raster recording the winning
    stream per pixel.
    """
    slots = [(DQI_OC_SIF, oc_sif), (DQI_SIF_ONLY, sif), (DQI_OC_ONLY, oc)]
    present = [(code, p) for code, p in slots if p is not None]
    if not present:
        raise ValueError("merge_streams needs at least one product")
    _check_aligned([p for _, p in present])
    ref = present[0][1]
    shape = (ref.grid.rows, ref.grid.cols)
    bins = np.full(shape, NODATA, dtype=np.int32)
    cert = np.full(shape, np.nan, dtype=np.float32)
    dqi = np.full(shape, NODATA, dtype=np.int32)
    for code, product in present:
        sel = (bins == NODATA) & (product.bins >= 0)
        bins[sel] = product.bins[sel]
        cert[sel] = product.certainty[sel]
        dqi[sel] = code
    merged = ConcentrationProduct(grid=ref.grid, date=ref.date, species=ref.species,
                                  stream_id="merged", bins=bins, certainty=cert)
    return merged, DqiRaster(grid=ref.grid, date=ref.date, values=dqi)


def monthly_composite(dailies: list[tuple[ConcentrationProduct, DqiRaster]], month: str,
                      bin_rule: str = BIN_RULE_MEAN_ROUND):
    """Monthly bin composite plus the per-pixel mode of the daily DQI.

    ``mean-round`` averages valid daily bin indices and rounds half-up;
    ``mode`` takes the most frequent bin (ties to the smaller bin). DQI ties
    also resolve to the smaller code. Certainty is the mean over valid days.
    """
    if not dailies:
        raise ValueError("monthly_composite needs at least one daily product")
    if bin_rule not in (BIN_RULE_MEAN_ROUND, BIN_RULE_MODE):
        raise ValueError(f"unknown bin rule {bin_rule!r}")
    year, mon = (int(x) for x in month.split("-"))
    ref = dailies[0][0]
    for product, dqi in dailies:
        if (product.date.year, product.date.month) != (year, mon):
            raise ValueError(f"product dated {product.date} is outside {month}")
        if product.grid != ref.grid or product.species != ref.species:
            raise GridMismatchError("composite inputs disagree on grid/species")
        if dqi.grid != ref.grid or dqi.date != product.date:
            raise GridMismatchError("DQI raster does not align with its product")

    bins = np.stack([p.bins for p, _ in dailies])
    cert = np.stack([p.certainty for p, _ in dailies])
    dqis = np.stack([q.values for _, q in dailies])
    valid = bins >= 0
    n_valid = valid.sum(axis=0)
    any_valid = n_valid > 0

    if bin_rule == BIN_RULE_MEAN_ROUND:
        sums = np.where(valid, bins, 0).sum(axis=0)
        mean = np.divide(sums, n_valid, out=np.zeros_like(sums, dtype=np.float64),
                         where=any_valid)
        comp_bins = np.floor(mean + 0.5).astype(np.int32)
    else:
        max_bin = int(bins.max()) if np.any(valid) else 0
        stacked = np.stack([((bins == b) & valid).sum(axis=0) for b in range(max_bin + 1)])
        comp_bins = np.argmax(stacked, axis=0).astype(np.int32)
    comp_bins = np.where(any_valid, comp_bins, NODATA).astype(np.int32)

    cert_sum = np.where(valid, cert, 0.0).sum(axis=0)
    comp_cert = np.full(ref.bins.shape, np.nan, dtype=np.float32)
    comp_cert[any_valid] = (cert_sum[any_valid] / n_valid[any_valid]).astype(np.float32)

    dqi_valid = dqis >= 0
    dqi_counts = np.stack([((dqis == code) & dqi_valid).sum(axis=0) for code in range(3)])
    comp_dqi = np.where(any_valid, np.argmax(dqi_counts, axis=0), NODATA).astype(np.int32)

    first = dt.date(year, mon, 1)
    product = ConcentrationProduct(grid=ref.grid, date=first, species=ref.species,
                                   stream_id=ref.stream_id, bins=comp_bins,
                                   certainty=comp_cert)
    return product, DqiRaster(grid=ref.grid, date=first, values=comp_dqi)


def confusion_matrix(products: list[ConcentrationProduct], records: list[InSituRecord],
                     scheme: BinScheme, radius: float) -> ConfusionMatrix:
    """Counts of (in-situ bin, predicted bin) over all same-day radius matchups."""
    n = scheme.n_bins
    counts = np.zeros((n, n), dtype=np.int64)
    for product in products:
        lat = product.grid.lat_centers()
        lon = product.grid.lon_centers()
        for record in records:
            if record.date != product.date or record.species != product.species:
                continue
            rec_bin = bin_value(scheme, record.concentration)
            dist2 = (lat - record.lat)[:, None] ** 2 + (lon - record.lon)[None, :] ** 2
            hit = (dist2 <= radius * radius) & (product.bins >= 0)
            for b, c in zip(*np.unique(product.bins[hit], return_counts=True)):
                counts[rec_bin, int(b)] += int(c)
    row_sums = counts.sum(axis=1, keepdims=True)
    percentages = np.divide(counts * 100.0, row_sums,
                            out=np.zeros_like(counts, dtype=np.float64),
                            where=row_sums > 0)
    return ConfusionMatrix(species=scheme.species, counts=counts, percentages=percentages)


# ---------------------------------------------------------------------------
# containers: products as SFG1 scenes with channels bins/<species>, certainty
# and optionally dqi; species rides in the bins channel name

def write_product(product: ConcentrationProduct, path, dqi: DqiRaster | None = None) -> None:
    fill = np.float32(FILL_VALUE)
    channels = [f"bins/{product.species}", "certainty"]
    layers = [
        np.where(product.bins >= 0, product.bins.astype(np.float32), fill),
        np.where(np.isfinite(product.certainty), product.certainty, fill),
    ]
    if dqi is not None:
        channels.append("dqi")
        layers.append(np.where(dqi.values >= 0, dqi.values.astype(np.float32), fill))
    scene = Scene(instrument_id=product.stream_id, date=product.date, grid=product.grid,
                  channel_names=channels, data=np.stack(layers))
    write_scene(scene, path)


def read_product(path) -> tuple[ConcentrationProduct, DqiRaster | None]:
    scene = read_scene(path)
    if not scene.channel_names or not scene.channel_names[0].startswith("bins/"):
        raise SceneFormatError(f"{path}: not a concentration product")
    species = scene.channel_names[0].split("/", 1)[1]
    fill = np.float32(scene.fill_value)
    bins = np.where(scene.data[0] == fill, NODATA, scene.data[0]).astype(np.int32)
    cert = scene.data[1].copy()
    cert[cert == fill] = np.nan
    product = ConcentrationProduct(grid=scene.grid, date=scene.date, species=species,
                                   stream_id=scene.instrument_id, bins=bins, certainty=cert)
    dqi = None
    if len(scene.channel_names) > 2 and scene.channel_names[2] == "dqi":
        values = np.where(scene.data[2] == fill, NODATA, scene.data[2]).astype(np.int32)
        dqi = DqiRaster(grid=scene.grid, date=scene.date, values=values)
    return product, dqi


# ---------------------------------------------------------------------------
# rendering: minimal deterministic PNG writer (8-bit RGB, zlib level 9)

def _parse_hex(color: str) -> tuple[int, int, int]:
    c = color.lstrip("#")
    if len(c) != 6:
        raise ValueError(f"expected #rrggbb color, got {color!r}")
    return int(c[0:2], 16), int(c[2:4], 16), int(c[4:6], 16)


def _png_chunk(tag: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + tag + data + \
        struct.pack(">I", zlib.crc32(tag + data))


def png_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    height, width = rgb.shape[:2]
    raw = b"".join(b"\x00" + rgb[i].tobytes() for i in range(height))
    header = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n"
            + _png_chunk(b"IHDR", header)
            + _png_chunk(b"IDAT", zlib.compress(raw, 9))
            + _png_chunk(b"IEND", b""))


def render_png(product: ConcentrationProduct, palette: list[str], path) -> None:
    """One image pixel per grid cell; palette lists bin colors then the nodata color."""
    if len(palette) < 2:
        raise ValueError("palette needs at least one bin color plus the nodata color")
    max_bin = int(product.bins.max())
    if max_bin >= len(palette) - 1:
        raise ValueError(
            f"palette size mismatch: product holds bin {max_bin} but palette has "
            f"{len(palette) - 1} bin colors"
        )
    colors = np.array([_parse_hex(c) for c in palette], dtype=np.uint8)
    idx = np.where(product.bins >= 0, product.bins, len(palette) - 1)
    atomic_write_bytes(path, png_bytes(colors[idx]))
