"""Pipeline orchestration: configuration, stage commands, artifact layout.

Each stage command reads its inputs from the artifact tree under
``output_dir``, writes its outputs there, and records a JSON run manifest
(inputs, config hash, seed, outputs). Stages are deterministic: rerunning one
with unchanged inputs and seed reproduces its outputs byte for byte.

Stage order mirrors the processing flow: synth, preprocess, train-encoder,
train-tree, segment, assign-context, apply-context, merge, composite,
validate, render.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import context as ctx
from . import dbn as dbnmod
from . import georaster as geo
from . import iic
from . import productgen as prod
from . import sampling as smp
from . import synthgen
from .blockio import atomic_write_bytes, canonical_json_bytes
from .errors import ConfigError, MissingInputError

DEFAULT_BIN_COLORS = [
    "#0b1d51", "#1d4e89", "#2a9d8f", "#e9c46a", "#f4a261", "#e76f51",
    "#d62828", "#9d0208", "#6a040f", "#b5179e", "#7209b7", "#3a0ca3",
]
NODATA_COLOR = "#14141c"

ROLE_OC_SIF = "oc_sif"
ROLE_SIF = "sif"
ROLE_OC = "oc"
ROLES = (ROLE_OC_SIF, ROLE_SIF, ROLE_OC)


@dataclass(frozen=True)
class StreamSpec:
    id: str
    role: str
    scene_dir: Path | None
    fuse: tuple[str, ...] = ()


@dataclass(frozen=True)
class RegionSpec:
    name: str
    radius_deg: float
    bbox: tuple[float, float, float, float] | None = None  # latmin, latmax, lonmin, lonmax

    def contains(self, lat: float, lon: float) -> bool:
        if self.bbox is None:
            return True
        latmin, latmax, lonmin, lonmax = self.bbox
        return latmin <= lat <= latmax and lonmin <= lon <= lonmax


@dataclass
class PipelineConfig:
    seed: int
    output_dir: Path
    grid: geo.GridDef
    train_dates: list[dt.date]
    test_dates: list[dt.date]
    streams: list[StreamSpec]
    species: list[ctx.BinScheme]
    regions: list[RegionSpec]
    insitu_csv: Path
    ocean_mask: Path | None
    sampling: dict
    dbn: dict
    tree: dict
    context_layer: int
    composite_rule: str
    render_palette: list[str] | None
    synth: dict | None
    raw: dict = field(repr=False, default_factory=dict)

    # -- artifact layout -----------------------------------------------------
    def work_scene(self, stream: str, date: dt.date) -> Path:
        return self.output_dir / "work" / "scenes" / stream / f"{date.isoformat()}.sfg"

    def samples_path(self, stream: str) -> Path:
        return self.output_dir / "work" / "samples" / f"{stream}.sfg"

    def normalizer_path(self, stream: str) -> Path:
        return self.output_dir / "work" / "normalizers" / f"{stream}.json"

    def dbn_path(self, stream: str) -> Path:
        return self.output_dir / "models" / "dbn" / f"{stream}.sfm"

    def tree_path(self, stream: str) -> Path:
        return self.output_dir / "models" / "tree" / f"{stream}.sft"

    def seg_path(self, stream: str, date: dt.date) -> Path:
        return self.output_dir / "segmentation" / stream / f"{date.isoformat()}.sfg"

    def context_map_path(self, species: str, stream: str, layer: int) -> Path:
        return self.output_dir / "context" / species / f"{stream}.layer{layer}.json"

    def product_path(self, species: str, stream: str, date: dt.date) -> Path:
        return self.output_dir / "products" / species / stream / f"{date.isoformat()}.sfg"

    def merged_path(self, species: str, date: dt.date) -> Path:
        return self.output_dir / "merged" / species / f"{date.isoformat()}.sfg"

    def monthly_path(self, species: str, month: str) -> Path:
        return self.output_dir / "monthly" / species / f"{month}.sfg"

    def validation_path(self, species: str) -> Path:
        return self.output_dir / "validation" / f"{species}.json"

    def render_path(self, species: str, kind: str, stem: str) -> Path:
        return self.output_dir / "renders" / species / kind / f"{stem}.png"

    def truth_path(self, date: dt.date) -> Path:
        return self.output_dir / "truth" / f"{date.isoformat()}.sfg"

    def manifest_path(self, command: str) -> Path:
        return self.output_dir / "manifests" / f"{command}.json"

    # -- helpers ---------------------------------------------------------------
    @property
    def all_dates(self) -> list[dt.date]:
        return sorted(set(self.train_dates) | set(self.test_dates))

    @property
    def real_streams(self) -> list[StreamSpec]:
        return [s for s in self.streams if not s.fuse]

    def stream_by_role(self, role: str) -> StreamSpec | None:
        hits = [s for s in self.streams if s.role == role]
        return hits[0] if hits else None

    def scheme(self, species: str) -> ctx.BinScheme:
        for sc in self.species:
            if sc.species == species:
                return sc
        raise ConfigError(f"unknown species {species!r}")

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json_bytes(self.raw)).hexdigest()


def derive_seed(base: int, purpose: str) -> int:
    """Stable per-purpose sub-seed (never Python's salted hash)."""
    return (base * 1_000_003 + zlib.crc32(purpose.encode("utf-8"))) % (2 ** 31)


def _date_range(start: dt.date, end: dt.date) -> list[dt.date]:
    return [start + dt.timedelta(days=i) for i in range((end - start).days + 1)]


def load_config(path, seed_override: int | None = None) -> PipelineConfig:
    """Parse and validate a pipeline config; reports every problem at once."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if seed_override is not None:
        raw["seed"] = int(seed_override)
    base = path.parent
    problems: list[str] = []

    def need(key, typ=None):
        if key not in raw:
            problems.append(f"missing key {key!r}")
            return None
        if typ is not None and not isinstance(raw[key], typ):
            problems.append(f"key {key!r} must be {typ}")
            return None
        return raw[key]

    seed = need("seed", int)
    out_raw = need("output_dir", str)
    grid = None
    if need("grid", dict) is not None:
        try:
            grid = geo.GridDef.from_dict(raw["grid"])
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"grid: {exc}")

    train_dates: list[dt.date] = []
    test_dates: list[dt.date] = []
    dates = need("dates", dict)
    if dates is not None:
        for split, sink in (("train", train_dates), ("test", test_dates)):
            pair = dates.get(split)
            if not (isinstance(pair, list) and len(pair) == 2):
                problems.append(f"dates.{split} must be [start, end]")
                continue
            try:
                start, end = (dt.date.fromisoformat(d) for d in pair)
            except (TypeError, ValueError) as exc:
                problems.append(f"dates.{split}: {exc}")
                continue
            if end < start:
                problems.append(f"dates.{split}: end before start")
                continue
            sink.extend(_date_range(start, end))
        if train_dates and test_dates and not (
            train_dates[-1] < test_dates[0] or test_dates[-1] < train_dates[0]
        ):
            problems.append("train and test date ranges must be disjoint")

    streams: list[StreamSpec] = []
    raw_streams = need("streams", list) or []
    ids = set()
    for i, s in enumerate(raw_streams):
        sid = s.get("id")
        role = s.get("role")
        if not sid or not isinstance(sid, str) or "/" in sid:
            problems.append(f"streams[{i}]: bad id {sid!r}")
            continue
        if sid in ids:
            problems.append(f"streams[{i}]: duplicate id {sid!r}")
        ids.add(sid)
        if role not in ROLES:
            problems.append(f"streams[{i}]: role must be one of {ROLES}, got {role!r}")
        fuse = tuple(s.get("fuse", ()))
        scene_dir = s.get("scene_dir")
        if fuse and scene_dir:
            problems.append(f"streams[{i}]: fused streams take no scene_dir")
        if not fuse and not scene_dir:
            problems.append(f"streams[{i}]: needs scene_dir or fuse")
        streams.append(StreamSpec(
            id=sid, role=role,
            scene_dir=(base / scene_dir) if scene_dir else None,
            fuse=fuse,
        ))
    for s in streams:
        for ref in s.fuse:
            if ref not in ids:
                problems.append(f"stream {s.id!r} fuses unknown stream {ref!r}")
    roles_seen = [s.role for s in streams]
    for role in set(roles_seen):
        if roles_seen.count(role) > 1:
            problems.append(f"multiple streams carry role {role!r}")
    dirs = [s.scene_dir for s in streams if s.scene_dir]
    if len(set(dirs)) != len(dirs):
        problems.append("stream scene_dirs must be distinct")

    species: list[ctx.BinScheme] = []
    for i, sp in enumerate(need("species", list) or []):
        try:
            name = sp["name"]
            if "/" in name:
                raise ValueError("species name must not contain '/'")
            species.append(ctx.BinScheme(species=name, edges=tuple(sp["bin_edges"])))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"species[{i}]: {exc}")
    names = [s.species for s in species]
    if len(set(names)) != len(names):
        problems.append("species names must be unique")

    regions: list[RegionSpec] = []
    for i, r in enumerate(raw.get("regions", [{"name": "default", "radius_deg": 0.0225}])):
        try:
            bbox = tuple(float(x) for x in r["bbox"]) if r.get("bbox") else None
            if bbox is not None and len(bbox) != 4:
                raise ValueError("bbox must be [latmin, latmax, lonmin, lonmax]")
            radius = float(r["radius_deg"])
            if radius <= 0:
                raise ValueError("radius_deg must be positive")
            regions.append(RegionSpec(name=r["name"], radius_deg=radius, bbox=bbox))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"regions[{i}]: {exc}")
    if sum(1 for r in regions if r.bbox is None) > 1:
        problems.append("at most one region may omit bbox (the default region)")

    insitu = need("insitu_csv", str)
    sampling = {"kmeans_k": 16, "elbow_candidates": None, "target_n": 25000}
    sampling.update(raw.get("sampling", {}))
    if sampling["kmeans_k"] is None and not sampling["elbow_candidates"]:
        problems.append("sampling needs kmeans_k or elbow_candidates")
    dbn_cfg = {"hidden_dims": "auto", "cd_k": 1, "learning_rate": 1e-3, "epochs": 10,
               "batch_size": 128, "momentum": 0.5, "weight_decay": 1e-4}
    dbn_cfg.update(raw.get("dbn", {}))
    tree_cfg = {"root_c": 12, "child_c": 4, "min_child_samples": 50, "lr": 1.0,
                "epochs": 40, "batch": 512, "sigma": 0.05, "restarts": 4,
                "certainty": iic.CERTAINTY_DEEPEST}
    tree_cfg.update(raw.get("tree", {}))
    if tree_cfg["certainty"] not in (iic.CERTAINTY_DEEPEST, iic.CERTAINTY_PRODUCT):
        problems.append(f"tree.certainty must be deepest or product, got {tree_cfg['certainty']!r}")
    layer = raw.get("context_layer", 2)
    if layer not in (1, 2):
        problems.append(f"context_layer must be 1 or 2, got {layer!r}")
    comp = raw.get("composite", {}).get("bin_rule", prod.BIN_RULE_MEAN_ROUND)
    if comp not in (prod.BIN_RULE_MEAN_ROUND, prod.BIN_RULE_MODE):
        problems.append(f"composite.bin_rule must be mean-round or mode, got {comp!r}")
    palette = raw.get("render", {}).get("palette")

    mask_raw = raw.get("ocean_mask")
    if out_raw and insitu:
        flat = [str(base / out_raw), str(base / insitu)] + [str(d) for d in dirs]
        if len(set(flat)) != len(flat):
            problems.append("output_dir, insitu_csv, and scene_dirs must be distinct paths")

    if problems:
        raise ConfigError(problems)
    return PipelineConfig(
        seed=seed,
        output_dir=base / out_raw,
        grid=grid,
        train_dates=train_dates,
        test_dates=test_dates,
        streams=streams,
        species=species,
        regions=regions,
        insitu_csv=base / insitu,
        ocean_mask=(base / mask_raw) if mask_raw else None,
        sampling=sampling,
        dbn=dbn_cfg,
        tree=tree_cfg,
        context_layer=int(layer),
        composite_rule=comp,
        render_palette=palette,
        synth=raw.get("synth"),
        raw=raw,
    )


# ---------------------------------------------------------------------------
# stages


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"missing input: {path} ({hint})")
    return path


def _filter_streams(cfg: PipelineConfig, stream: str | None) -> list[StreamSpec]:
    if stream is None:
        return cfg.streams
    hits = [s for s in cfg.streams if s.id == stream]
    if not hits:
        raise ConfigError(f"unknown stream {stream!r}")
    return hits


def _filter_species(cfg: PipelineConfig, species: str | None) -> list[ctx.BinScheme]:
    if species is None:
        return cfg.species
    return [cfg.scheme(species)]


def stage_synth(cfg: PipelineConfig, stream: str | None = None, species: str | None = None):
    if not cfg.synth:
        raise ConfigError("config has no synth section")
    oc_stream = cfg.stream_by_role(ROLE_OC)
    sif_stream = cfg.stream_by_role(ROLE_SIF)
    if oc_stream is None or sif_stream is None:
        raise ConfigError("synth needs streams with roles oc and sif")
    syn = cfg.synth
    species_specs = [
        synthgen.SpeciesSpec(
            name=s["name"], signature=np.asarray(s["signature"], dtype=np.float64),
            blooms=int(s["blooms"]), amplitude=float(s["amplitude"]),
            radius_deg=float(s["radius_deg"]),
            drift_deg_per_day=float(s["drift_deg_per_day"]),
        )
        for s in syn["species"]
    ]
    dates = cfg.all_dates
    world_cfg = synthgen.SynthConfig(
        grid=cfg.grid,
        start_date=dates[0],
        days=(dates[-1] - dates[0]).days + 1,
        species=species_specs,
        baseline_spectrum=np.asarray(syn["baseline_spectrum"], dtype=np.float64),
        noise_std=float(syn.get("noise_std", 0.01)),
        cloud_fraction=float(syn.get("cloud_fraction", 0.3)),
        seed=derive_seed(cfg.seed, "synth"),
        sif_gain=float(syn.get("sif_gain", 1.0)),
        oc_instrument=oc_stream.id.upper(),
        sif_instrument=sif_stream.id.upper(),
    )
    truths, oc_scenes, sif_scenes = synthgen.gen_world(world_cfg)
    mask = geo.read_mask(_require(cfg.ocean_mask, "ocean mask")) if cfg.ocean_mask else None
    insitu_cfg = syn.get("insitu", {})
    records = synthgen.gen_insitu(
        truths,
        sites=int(insitu_cfg.get("sites", 40)),
        per_day=int(insitu_cfg.get("per_day", 40)),
        lognoise_std=float(insitu_cfg.get("lognoise_std", 0.1)),
        seed=derive_seed(cfg.seed, "insitu"),
        ocean_mask=mask,
    )
    outputs = []
    for truth, oc_scene, sif_scene in zip(truths, oc_scenes, sif_scenes):
        for scene, spec in ((oc_scene, oc_stream), (sif_scene, sif_stream)):
            p = spec.scene_dir / f"{scene.date.isoformat()}.sfg"
            geo.write_scene(scene, p)
            outputs.append(str(p))
        tp = cfg.truth_path(truth.date)
        synthgen.write_truth(truth, tp)
        outputs.append(str(tp))
    ctx.write_insitu_csv(records, cfg.insitu_csv)
    outputs.append(str(cfg.insitu_csv))
    return [str(cfg.ocean_mask)] if cfg.ocean_mask else [], outputs


def stage_preprocess(cfg: PipelineConfig, stream: str | None = None, species: str | None = None):
    inputs, outputs = [], []
    mask = None
    if cfg.ocean_mask:
        mask = geo.read_mask(_require(cfg.ocean_mask, "ocean mask"))
        inputs.append(str(cfg.ocean_mask))
    selected = _filter_streams(cfg, stream)
    for spec in selected:
        if spec.fuse:
            continue
        _require(spec.scene_dir, f"scene dir for stream {spec.id!r}; run 'synth' or stage data")
        inputs.append(str(spec.scene_dir))
        for date in cfg.all_dates:
            src = spec.scene_dir / f"{date.isoformat()}.sfg"
            if not src.exists():
                continue
            scene = geo.resample_nearest(geo.read_scene(src), cfg.grid)
            if mask is not None:
                scene = geo.apply_mask(scene, mask)
            dst = cfg.work_scene(spec.id, date)
            geo.write_scene(scene, dst)
            outputs.append(str(dst))
    for spec in selected:
        if not spec.fuse:
            continue
        for date in cfg.all_dates:
            parts = [cfg.work_scene(ref, date) for ref in spec.fuse]
            if not all(p.exists() for p in parts):
                continue
            stacked = geo.colocate_stack([geo.read_scene(p) for p in parts],
                                         instrument_id=spec.id)
            dst = cfg.work_scene(spec.id, date)
            geo.write_scene(stacked, dst)
            outputs.append(str(dst))

    for spec in selected:
        sets = []
        for date in cfg.train_dates:
            p = cfg.work_scene(spec.id, date)
            if p.exists():
                sets.append(smp.extract_neighborhoods(geo.read_scene(p)))
        if not sets or sum(s.n for s in sets) < 2:
            raise MissingInputError(
                f"missing input: no training samples for stream {spec.id!r} "
                f"under {cfg.output_dir / 'work' / 'scenes' / spec.id}"
            )
        norm = smp.fit_normalizer(sets)
        smp.save_normalizer(norm, cfg.normalizer_path(spec.id))
        full = smp.apply_normalizer(smp.concat_sample_sets(sets), norm)
        seed = derive_seed(cfg.seed, f"kmeans:{spec.id}")
        if cfg.sampling["kmeans_k"] is not None:
            k = int(cfg.sampling["kmeans_k"])
        else:
            k = smp.select_k_elbow(full.vectors, list(cfg.sampling["elbow_candidates"]), seed)
        k = min(k, full.n)
        _, labels = smp.kmeans_cluster(full.vectors, k, seed)
        target = min(int(cfg.sampling["target_n"]), full.n)
        sub = smp.stratified_subsample(full, labels, target,
                                       derive_seed(cfg.seed, f"subsample:{spec.id}"))
        smp.write_sample_set(sub, cfg.samples_path(spec.id))
        outputs.extend([str(cfg.normalizer_path(spec.id)), str(cfg.samples_path(spec.id))])
    return inputs, outputs


def stage_train_encoder(cfg: PipelineConfig, stream: str | None = None, species: str | None = None):
    inputs, outputs = [], []
    for spec in _filter_streams(cfg, stream):
        samples_path = _require(cfg.samples_path(spec.id), "run 'preprocess' first")
        samples = smp.read_sample_set(samples_path)
        inputs.append(str(samples_path))
        dims = cfg.dbn["hidden_dims"]
        hidden = None if dims == "auto" else [int(d) for d in dims]
        cdcfg = dbnmod.CdConfig(
            cd_k=int(cfg.dbn["cd_k"]),
            learning_rate=float(cfg.dbn["learning_rate"]),
            epochs=int(cfg.dbn["epochs"]),
            batch_size=int(cfg.dbn["batch_size"]),
            momentum=float(cfg.dbn["momentum"]),
            weight_decay=float(cfg.dbn["weight_decay"]),
            seed=derive_seed(cfg.seed, f"dbn:{spec.id}"),
        )
        model = dbnmod.train_dbn(samples, hidden, cdcfg)
        dbnmod.save_dbn(model, cfg.dbn_path(spec.id))
        outputs.append(str(cfg.dbn_path(spec.id)))
    return inputs, outputs


def _head_config(cfg: PipelineConfig, purpose: str) -> iic.HeadConfig:
    t = cfg.tree
    return iic.HeadConfig(lr=float(t["lr"]), epochs=int(t["epochs"]), batch=int(t["batch"]),
                          sigma=float(t["sigma"]), seed=derive_seed(cfg.seed, purpose),
                          restarts=int(t["restarts"]))


def stage_train_tree(cfg: PipelineConfig, stream: str | None = None, species: str | None = None):
    inputs, outputs = [], []
    for spec in _filter_streams(cfg, stream):
        model_path = _require(cfg.dbn_path(spec.id), "run 'train-encoder' first")
        samples_path = _require(cfg.samples_path(spec.id), "run 'preprocess' first")
        inputs.extend([str(model_path), str(samples_path)])
        model = dbnmod.load_dbn(model_path)
        samples = smp.read_sample_set(samples_path)
        emb = dbnmod.encode(model, samples.vectors)
        tree = iic.train_tree(
            emb,
            root_c=int(cfg.tree["root_c"]),
            child_c=int(cfg.tree["child_c"]),
            min_child_samples=int(cfg.tree["min_child_samples"]),
            cfg=_head_config(cfg, f"tree:{spec.id}"),
        )
        iic.save_tree(tree, cfg.tree_path(spec.id))
        outputs.append(str(cfg.tree_path(spec.id)))
    return inputs, outputs


def stage_segment(cfg: PipelineConfig, stream: str | None = None, species: str | None = None):
    inputs, outputs = [], []
    for spec in _filter_streams(cfg, stream):
        model = dbnmod.load_dbn(_require(cfg.dbn_path(spec.id), "run 'train-encoder' first"))
        tree = iic.load_tree(_require(cfg.tree_path(spec.id), "run 'train-tree' first"))
        norm = smp.load_normalizer(_require(cfg.normalizer_path(spec.id), "run 'preprocess' first"))
        inputs.extend([str(cfg.dbn_path(spec.id)), str(cfg.tree_path(spec.id)),
                       str(cfg.normalizer_path(spec.id))])
        for date in cfg.all_dates:
            p = cfg.work_scene(spec.id, date)
            if not p.exists():
                continue
            seg = iic.segment_scene(model, tree, norm, geo.read_scene(p),
                                    certainty_mode=cfg.tree["certainty"])
            dst = cfg.seg_path(spec.id, date)
            geo.write_scene(iic.seg_to_scene(seg), dst)
            outputs.append(str(dst))
    return inputs, outputs


def _records_by_region(cfg: PipelineConfig, records: list[ctx.InSituRecord]):
    grouped: dict[str, list[ctx.InSituRecord]] = {r.name: [] for r in cfg.regions}
    for rec in records:
        for region in cfg.regions:
            if region.contains(rec.lat, rec.lon):
                grouped[region.name].append(rec)
                break
    return grouped


def _load_segs(cfg: PipelineConfig, stream_id: str, dates: list[dt.date]):
    seg_dir = cfg.output_dir / "segmentation" / stream_id
    _require(seg_dir, "run 'segment' first")
    segs = []
    for date in dates:
        p = cfg.seg_path(stream_id, date)
        if p.exists():
            segs.append(iic.seg_from_scene(geo.read_scene(p)))
    if not segs:
        raise MissingInputError(f"missing input: no segmentation products in {seg_dir}")
    return segs


def stage_assign_context(cfg: PipelineConfig, stream: str | None = None, species: str | None = None):
    insitu = _require(cfg.insitu_csv, "run 'synth' or provide in-situ data")
    records = ctx.filter_depth(ctx.load_insitu(insitu))
    inputs, outputs = [str(insitu)], []
    for scheme in _filter_species(cfg, species):
        sp_records = [r for r in records if r.species == scheme.species]
        by_region = _records_by_region(cfg, sp_records)
        for spec in _filter_streams(cfg, stream):
            segs = _load_segs(cfg, spec.id, cfg.train_dates)
            matchups: list[ctx.Matchup] = []
            for seg in segs:
                for region in cfg.regions:
                    if by_region[region.name]:
                        matchups.extend(ctx.matchup(by_region[region.name], seg,
                                                    region.radius_deg, scheme))
            layer1 = ctx.assign_layer1(matchups)
            ctx.save_context_map(layer1, cfg.context_map_path(scheme.species, spec.id, 1))
            layer2 = ctx.assign_layer2_tiered(matchups, layer1, segs)
            ctx.save_context_map(layer2, cfg.context_map_path(scheme.species, spec.id, 2))
            outputs.extend([
                str(cfg.context_map_path(scheme.species, spec.id, 1)),
                str(cfg.context_map_path(scheme.species, spec.id, 2)),
            ])
    return inputs, outputs


def stage_apply_context(cfg: PipelineConfig, stream: str | None = None, species: str | None = None):
    inputs, outputs = [], []
    layer = cfg.context_layer
    for scheme in _filter_species(cfg, species):
        for spec in _filter_streams(cfg, stream):
            map_path = _require(cfg.context_map_path(scheme.species, spec.id, layer),
                                "run 'assign-context' first")
            cmap = ctx.load_context_map(map_path)
            inputs.append(str(map_path))
            for date in cfg.all_dates:
                p = cfg.seg_path(spec.id, date)
                if not p.exists():
                    continue
                seg = iic.seg_from_scene(geo.read_scene(p))
                product = ctx.apply_context(seg, cmap, layer)
                dst = cfg.product_path(scheme.species, spec.id, date)
                prod.write_product(product, dst)
                outputs.append(str(dst))
    return inputs, outputs


def stage_merge(cfg: PipelineConfig, stream: str | None = None, species: str | None = None):
    inputs, outputs = [], []
    role_stream = {role: cfg.stream_by_role(role) for role in ROLES}
    for scheme in _filter_species(cfg, species):
        products_root = cfg.output_dir / "products" / scheme.species
        _require(products_root, "run 'apply-context' first")
        inputs.append(str(products_root))
        for date in cfg.all_dates:
            by_role = {}
            for role, spec in role_stream.items():
                if spec is None:
                    continue
                p = cfg.product_path(scheme.species, spec.id, date)
                if p.exists():
                    by_role[role], _ = prod.read_product(p)
            if not by_role:
                continue
            merged, dqi = prod.merge_streams(by_role.get(ROLE_OC_SIF), by_role.get(ROLE_SIF),
                                             by_role.get(ROLE_OC))
            dst = cfg.merged_path(scheme.species, date)
            prod.write_product(merged, dst, dqi=dqi)
            outputs.append(str(dst))
    return inputs, outputs


def _merged_products(cfg: PipelineConfig, species: str):
    merged_dir = cfg.output_dir / "merged" / species
    _require(merged_dir, "run 'merge' first")
    found = []
    for p in sorted(merged_dir.glob("*.sfg")):
        product, dqi = prod.read_product(p)
        found.append((p, product, dqi))
    if not found:
        raise MissingInputError(f"missing input: no merged products in {merged_dir}")
    return found


def stage_composite(cfg: PipelineConfig, stream: str | None = None, species: str | None = None):
    inputs, outputs = [], []
    for scheme in _filter_species(cfg, species):
        found = _merged_products(cfg, scheme.species)
        inputs.append(str(cfg.output_dir / "merged" / scheme.species))
        months: dict[str, list] = {}
        for _, product, dqi in found:
            months.setdefault(f"{product.date.year:04d}-{product.date.month:02d}", []).append(
                (product, dqi))
        for month, dailies in sorted(months.items()):
            comp, comp_dqi = prod.monthly_composite(dailies, month, bin_rule=cfg.composite_rule)
            dst = cfg.monthly_path(scheme.species, month)
            prod.write_product(comp, dst, dqi=comp_dqi)
            outputs.append(str(dst))
    return inputs, outputs


def stage_validate(cfg: PipelineConfig, stream: str | None = None, species: str | None = None):
    """Confusion matrices over the test split; train-period products are refused."""
    insitu = _require(cfg.insitu_csv, "in-situ records required")
    records = ctx.filter_depth(ctx.load_insitu(insitu))
    test_set = set(cfg.test_dates)
    train_set = set(cfg.train_dates)
    records = [r for r in records if r.date in test_set]
    inputs, outputs = [str(insitu)], []
    for scheme in _filter_species(cfg, species):
        found = _merged_products(cfg, scheme.species)
        inputs.append(str(cfg.output_dir / "merged" / scheme.species))
        products = []
        for path, product, _ in found:
            try:
                name_date = dt.date.fromisoformat(path.stem)
            except ValueError:
                continue
            if name_date not in test_set:
                continue
            if product.date in train_set:
                raise ConfigError(
                    f"refusing to validate {path}: product date {product.date} "
                    "falls in the training range"
                )
            products.append(product)
        if not products:
            raise MissingInputError(
                f"missing input: no test-period merged products for {scheme.species!r} "
                f"in {cfg.output_dir / 'merged' / scheme.species}"
            )
        by_region = _records_by_region(cfg, [r for r in records if r.species == scheme.species])
        counts = np.zeros((scheme.n_bins, scheme.n_bins), dtype=np.int64)
        for region in cfg.regions:
            if not by_region[region.name]:
                continue
            cm = prod.confusion_matrix(products, by_region[region.name], scheme,
                                       region.radius_deg)
            counts += cm.counts
        row_sums = counts.sum(axis=1, keepdims=True)
        pct = np.divide(counts * 100.0, row_sums, out=np.zeros(counts.shape), where=row_sums > 0)
        total = int(counts.sum())
        payload = {
            "species": scheme.species,
            "bin_edges": list(scheme.edges),
            "counts": counts.tolist(),
            "percentages": pct.tolist(),
            "accuracy": (float(np.trace(counts)) / total) if total else 0.0,
            "total_matchups": total,
            "product_dates": [p.date.isoformat() for p in products],
        }
        dst = cfg.validation_path(scheme.species)
        atomic_write_bytes(dst, canonical_json_bytes(payload))
        outputs.append(str(dst))
    return inputs, outputs


def _palette_for(cfg: PipelineConfig, scheme: ctx.BinScheme) -> list[str]:
    if cfg.render_palette:
        return list(cfg.render_palette)
    if scheme.n_bins > len(DEFAULT_BIN_COLORS):
        raise ConfigError(f"default palette supports up to {len(DEFAULT_BIN_COLORS)} bins; "
                          f"supply render.palette for {scheme.species!r}")
    return DEFAULT_BIN_COLORS[: scheme.n_bins] + [NODATA_COLOR]


def stage_render(cfg: PipelineConfig, stream: str | None = None, species: str | None = None):
    inputs, outputs = [], []
    for scheme in _filter_species(cfg, species):
        palette = _palette_for(cfg, scheme)
        found = _merged_products(cfg, scheme.species)
        inputs.append(str(cfg.output_dir / "merged" / scheme.species))
        for path, product, _ in found:
            dst = cfg.render_path(scheme.species, "daily", product.date.isoformat())
            prod.render_png(product, palette, dst)
            outputs.append(str(dst))
        monthly_dir = cfg.output_dir / "monthly" / scheme.species
        if monthly_dir.exists():
            inputs.append(str(monthly_dir))
            for p in sorted(monthly_dir.glob("*.sfg")):
                product, _ = prod.read_product(p)
                dst = cfg.render_path(scheme.species, "monthly", p.stem)
                prod.render_png(product, palette, dst)
                outputs.append(str(dst))
    return inputs, outputs


COMMANDS = {
    "synth": stage_synth,
    "preprocess": stage_preprocess,
    "train-encoder": stage_train_encoder,
    "train-tree": stage_train_tree,
    "segment": stage_segment,
    "assign-context": stage_assign_context,
    "apply-context": stage_apply_context,
    "merge": stage_merge,
    "composite": stage_composite,
    "validate": stage_validate,
    "render": stage_render,
}


def run(command: str, config_path, seed: int | None = None, stream: str | None = None,
        species: str | None = None) -> dict:
    """Execute one stage command and write its run manifest."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {sorted(COMMANDS)}")
    cfg = load_config(config_path, seed_override=seed)
    inputs, outputs = COMMANDS[command](cfg, stream=stream, species=species)
    manifest = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "stream": stream,
        "species": species,
        "inputs": sorted(set(inputs)),
        "outputs": sorted(set(outputs)),
    }
    atomic_write_bytes(cfg.manifest_path(command), canonical_json_bytes(manifest))
    return manifest
