"""In-situ records, pixel matchups, and histogram-based context assignment.

Context-free segmentation labels acquire meaning here: matchups pair each
record with same-day product pixels inside a radius, and each label maps to
the concentration bin it most frequently overlapped with. Layer 2 runs the
same histogram twice, supplementing direct in-situ counts with agreement
against the layer-1 concentration map over the training scenes.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .blockio import atomic_write_bytes, canonical_json_bytes
from .iic import SegmentationProduct

# Matchup radii used operationally: dense Florida network vs pier-bound
# Southern California sites (decimal degrees).
FLORIDA_RADIUS_DEG = 0.0225
SOCAL_RADIUS_DEG = 0.09


@dataclass(frozen=True)
class InSituRecord:
    lat: float
    lon: float
    date: dt.date
    depth: float  # meters
    species: str
    concentration: float  # cells per liter

    def __post_init__(self):
        if not (np.isfinite(self.lat) and np.isfinite(self.lon)):
            raise ValueError("record coordinates must be finite")
        if not np.isfinite(self.concentration) or self.concentration < 0:
            raise ValueError(f"concentration must be >= 0, got {self.concentration}")


@dataclass(frozen=True)
class BinScheme:
    """Ordered concentration thresholds; n_bins = len(edges) + 1."""

    species: str
    edges: tuple[float, ...]

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        if len(edges) < 1:
            raise ValueError("need at least one bin edge")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"edges must be strictly ascending: {edges}")

    @property
    def n_bins(self) -> int:
        return len(self.edges) + 1


@dataclass(frozen=True)
class Matchup:
    record: InSituRecord
    stream_id: str
    date: dt.date
    pixel: tuple[int, int]
    layer1_label: int
    layer2_label: int | None
    bin: int


@dataclass
class ContextMap:
    species: str
    layer: int  # 1 or 2
    stream_id: str
    mapping: dict[int, int]

    def __post_init__(self):
        if self.layer not in (1, 2):
            raise ValueError("layer must be 1 or 2")
        self.mapping = {int(k): int(v) for k, v in self.mapping.items()}


REQUIRED_COLUMNS = ["date", "lat", "lon", "depth_m", "species", "concentration_cells_per_l"]


def parse_insitu_csv(path) -> tuple[list[InSituRecord], list[str]]:
    """Records plus per-row error strings ("line N: reason") for malformed rows."""
    records: list[InSituRecord] = []
    errors: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in REQUIRED_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing required columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(InSituRecord(
                    lat=float(row["lat"]),
                    lon=float(row["lon"]),
                    date=dt.date.fromisoformat(row["date"]),
                    depth=float(row["depth_m"]),
                    species=row["species"].strip(),
                    concentration=float(row["concentration_cells_per_l"]),
                ))
            except (TypeError, ValueError) as exc:
                errors.append(f"line {lineno}: {exc}")
    return records, errors


def load_insitu(path) -> list[InSituRecord]:
    records, _ = parse_insitu_csv(path)
    return records


def write_insitu_csv(records: list[InSituRecord], path) -> None:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REQUIRED_COLUMNS)
    for r in records:
        writer.writerow([r.date.isoformat(), repr(r.lat), repr(r.lon), repr(r.depth),
                         r.species, repr(r.concentration)])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def filter_depth(records: list[InSituRecord], max_depth: float = 1.0) -> list[InSituRecord]:
    """Keep records at or above ``max_depth`` meters (inclusive)."""
    return [r for r in records if r.depth <= max_depth]


def bin_value(scheme: BinScheme, value: float) -> int:
    """Left-inclusive bin index: edges[i-1] <= value < edges[i]."""
    if value < 0:
        raise ValueError(f"concentration must be >= 0, got {value}")
    return int(np.searchsorted(np.asarray(scheme.edges), value, side="right"))


def matchup(records: list[InSituRecord], seg: SegmentationProduct, radius: float,
            scheme: BinScheme) -> list[Matchup]:
    """One Matchup per labeled pixel within ``radius`` degrees of a same-day record."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    lat = seg.grid.lat_centers()
    lon = seg.grid.lon_centers()
    out: list[Matchup] = []
    for record in records:
        if record.date != seg.date:
            continue
        rec_bin = bin_value(scheme, record.concentration)
        dist2 = (lat - record.lat)[:, None] ** 2 + (lon - record.lon)[None, :] ** 2
        rows, cols = np.nonzero((dist2 <= radius * radius) & (seg.layer1 >= 0))
        for r, c in zip(rows, cols):
            l2 = int(seg.layer2[r, c])
            out.append(Matchup(
                record=record,
                stream_id=seg.stream_id,
                date=seg.date,
                pixel=(int(r), int(c)),
                layer1_label=int(seg.layer1[r, c]),
                layer2_label=l2 if l2 >= 0 else None,
                bin=rec_bin,
            ))
    return out


def _argmax_lower_bin(counts: Counter) -> int:
    best_bin, best_count = None, -1
    for b in sorted(counts):
        if counts[b] > best_count:
            best_bin, best_count = b, counts[b]
    return best_bin


def _uniform(values, what: str):
    uniq = sorted(set(values))
    if len(uniq) != 1:
        raise ValueError(f"matchups span multiple {what}: {uniq}")
    return uniq[0]


def assign_layer1(matchups: list[Matchup]) -> ContextMap:
    """Each observed layer-1 label maps to its most frequent bin (ties: lower bin)."""
    if not matchups:
        raise ValueError("cannot assign context from zero matchups")
    species = _uniform([m.record.species for m in matchups], "species")
    stream = _uniform([m.stream_id for m in matchups], "streams")
    hist: dict[int, Counter] = defaultdict(Counter)
    for m in matchups:
        hist[m.layer1_label][m.bin] += 1
    return ContextMap(
        species=species, layer=1, stream_id=stream,
        mapping={label: _argmax_lower_bin(c) for label, c in hist.items()},
    )


def assign_layer2_tiered(matchups: list[Matchup], layer1_map: ContextMap,
                         segs: list[SegmentationProduct]) -> ContextMap:
    """Layer-2 assignment from direct in-situ counts plus layer-1 agreement.

    The supplement walks every training scene and counts, at each pixel with a
    layer-2 label, the co-occurring bin obtained by sending the pixel's
    layer-1 label through ``layer1_map``. Direct and supplement counts sum
    unweighted; argmax per label with ties to the lower bin.
    """
    hist: dict[int, Counter] = defaultdict(Counter)
    for m in matchups:
        if m.layer2_label is not None:
            hist[m.layer2_label][m.bin] += 1
    lut_size = 1 + max(layer1_map.mapping, default=-1)
    lut = np.full(lut_size + 1, -1, dtype=np.int64)
    for label, b in layer1_map.mapping.items():
        lut[label] = b
    for seg in segs:
        if seg.stream_id != layer1_map.stream_id:
            raise ValueError(
                f"scene stream {seg.stream_id!r} does not match map stream "
                f"{layer1_map.stream_id!r}"
            )
        l1 = seg.layer1
        l2 = seg.layer2
        usable = (l2 >= 0) & (l1 >= 0) & (l1 < lut_size)
        if not np.any(usable):
            continue
        bins = lut[l1[usable]]
        labels = l2[usable]
        mapped = bins >= 0
        encoded = labels[mapped].astype(np.int64) * 1_000_000 + bins[mapped]
        for enc, count in zip(*np.unique(encoded, return_counts=True)):
            hist[int(enc // 1_000_000)][int(enc % 1_000_000)] += int(count)
    return ContextMap(
        species=layer1_map.species, layer=2, stream_id=layer1_map.stream_id,
        mapping={label: _argmax_lower_bin(c) for label, c in hist.items()},
    )


def apply_context(seg: SegmentationProduct, cmap: ContextMap, layer: int):
    """Binned concentration raster from a segmentation and a label->bin map.

    Labels absent from the map come out as nodata; certainty passes through.
    """
    from .productgen import ConcentrationProduct

    if cmap.layer != layer:
        raise ValueError(f"map is for layer {cmap.layer}, requested layer {layer}")
    labels = seg.layer1 if layer == 1 else seg.layer2
    lut_size = 1 + max(cmap.mapping, default=-1)
    lut = np.full(lut_size + 1, -1, dtype=np.int32)
    for label, b in cmap.mapping.items():
        lut[label] = b
    clipped = np.where((labels >= 0) & (labels < lut_size), labels, lut_size)
    bins = lut[clipped]
    return ConcentrationProduct(
        grid=seg.grid,
        date=seg.date,
        species=cmap.species,
        stream_id=seg.stream_id,
        bins=bins,
        certainty=np.where(bins >= 0, seg.certainty, np.nan),
    )


def save_context_map(cmap: ContextMap, path) -> None:
    payload = {
        "species": cmap.species,
        "layer": cmap.layer,
        "stream_id": cmap.stream_id,
        "mapping": {str(k): v for k, v in sorted(cmap.mapping.items())},
    }
    atomic_write_bytes(path, canonical_json_bytes(payload))


def load_context_map(path) -> ContextMap:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    return ContextMap(species=d["species"], layer=int(d["layer"]),
                      stream_id=d["stream_id"], mapping=d["mapping"])
