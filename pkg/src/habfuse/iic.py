"""Invariant-information clustering heads over frozen embeddings.

A head is a single affine map plus softmax. Training maximizes the mutual
information between the head's assignments for an embedding batch and for a
Gaussian-perturbed copy of it. Heads are arranged in a two-level tree: a
coarse root head over all samples, and one child head per root label trained
exclusively on that label's samples. Prediction walks the tree and rasterizes
per-pixel label paths with a certainty score.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .blockio import read_container, split_blocks, write_container
from .dbn import DbnModel, encode
from .errors import SceneFormatError
from .georaster import FILL_VALUE, GridDef, Scene
from .sampling import Normalizer, apply_normalizer, extract_neighborhoods

TREE_MAGIC = b"SFT1"

NODATA_LABEL = -1
_LOG_EPS = 1e-12
_ROW_SUM_TOL = 1e-6

CERTAINTY_DEEPEST = "deepest"  # max softmax of the deepest predicted layer
CERTAINTY_PRODUCT = "product"  # product of per-layer max softmax values


@dataclass
class HeadConfig:
    """Minibatch gradient-descent settings for one clustering head.

    ``restarts`` independent seeded descents are run and the head with the
    lowest final full-batch loss wins; the IIC objective has dead-class local
    optima that a single descent can land in.
    """

    lr: float = 1.0
    epochs: int = 60
    batch: int = 512
    sigma: float = 0.05
    seed: int = 0
    restarts: int = 4

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch < 1 or self.restarts < 1:
            raise ValueError("lr, epochs, batch, restarts must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass(eq=False)
class ClusterHead:
    weights: np.ndarray  # (C, E) float64
    bias: np.ndarray  # (C,) float64

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("head weights must be (C, E) with a C-length bias")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("head parameters must be finite")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def probs(self, embeddings: np.ndarray) -> np.ndarray:
        return softmax(np.asarray(embeddings, dtype=np.float64) @ self.weights.T + self.bias)


@dataclass(eq=False)
class ClusterTree:
    root: ClusterHead
    children: dict[int, ClusterHead]
    child_c: int
    min_child_samples: int
    child_train_counts: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        for label in self.children:
            if not 0 <= label < self.root.n_classes:
                raise ValueError(f"child label {label} outside root range")


@dataclass(frozen=True)
class LabelPath:
    root_label: int
    child_label: int | None
    certainty: float


@dataclass(eq=False)
class SegmentationProduct:
    """Two-layer context-free labels plus certainty, on a scene grid."""

    grid: GridDef
    date: dt.date
    stream_id: str
    layer1: np.ndarray  # (rows, cols) int32, NODATA_LABEL where invalid
    layer2: np.ndarray  # (rows, cols) int32, combined root*child_c + child
    certainty: np.ndarray  # (rows, cols) float32, NaN where invalid
    child_c: int = 0

    def __post_init__(self):
        shape = (self.grid.rows, self.grid.cols)
        self.layer1 = np.ascontiguousarray(self.layer1, dtype=np.int32)
        self.layer2 = np.ascontiguousarray(self.layer2, dtype=np.int32)
        self.certainty = np.ascontiguousarray(self.certainty, dtype=np.float32)
        for name, arr in (("layer1", self.layer1), ("layer2", self.layer2),
                          ("certainty", self.certainty)):
            if arr.shape != shape:
                raise ValueError(f"{name} shape {arr.shape} != grid {shape}")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def joint_matrix(probs_a: np.ndarray, probs_b: np.ndarray) -> np.ndarray:
    """Symmetrized mean outer product of paired assignment distributions."""
    pa = np.asarray(probs_a, dtype=np.float64)
    pb = np.asarray(probs_b, dtype=np.float64)
    if pa.shape != pb.shape or pa.ndim != 2:
        raise ValueError(f"paired prob arrays must share an (N, C) shape: {pa.shape} vs {pb.shape}")
    for name, p in (("probs_a", pa), ("probs_b", pb)):
        sums = p.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > _ROW_SUM_TOL) or np.any(p < -_ROW_SUM_TOL):
            raise ValueError(f"{name} rows must be probability vectors (sum 1 +- {_ROW_SUM_TOL})")
    p = kernels.accumulate_outer(pa, pb) / pa.shape[0]
    return (p + p.T) / 2.0


def mutual_information(p: np.ndarray) -> float:
    """MI of a joint assignment matrix, log arguments clamped at 1e-12."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"joint matrix must be square, got {p.shape}")
    if np.any(p < -1e-9) or abs(p.sum() - 1.0) > _ROW_SUM_TOL:
        raise ValueError("joint matrix entries must be >= 0 and sum to 1")
    p = np.maximum(p, 0.0)
    row = p.sum(axis=1)
    col = p.sum(axis=0)
    logs = np.log(np.maximum(p, _LOG_EPS)) \
        - np.log(np.maximum(row, _LOG_EPS))[:, None] \
        - np.log(np.maximum(col, _LOG_EPS))[None, :]
    return float((p * logs).sum())


def iic_loss_and_grad(logits_a: np.ndarray, logits_b: np.ndarray):
    """Negative MI of the paired soft assignments, with analytic gradients.

    Returns ``(loss, grad_a, grad_b)`` where the gradients are with respect to
    the raw logits. Valid away from the log-clamp region, which random or
    trained logits do not reach.
    """
    a = softmax(logits_a)
    b = softmax(logits_b)
    n = a.shape[0]
    p = kernels.accumulate_outer(a, b) / n
    p = (p + p.T) / 2.0
    row = p.sum(axis=1)
    col = p.sum(axis=0)
    log_term = np.log(np.maximum(p, _LOG_EPS)) \
        - np.log(np.maximum(row, _LOG_EPS))[:, None] \
        - np.log(np.maximum(col, _LOG_EPS))[None, :]
    loss = -float((p * log_term).sum())

    # dL/dP_cd = -(ln P_cd - ln row_c - ln col_d - 1); chain through the
    # symmetrized joint, then through each row's softmax.
    s = -(log_term - 1.0)
    s_sym = (s + s.T) / (2.0 * n)
    ga = b @ s_sym
    gb = a @ s_sym
    grad_a = a * (ga - (ga * a).sum(axis=1, keepdims=True))
    grad_b = b * (gb - (gb * b).sum(axis=1, keepdims=True))
    return loss, grad_a, grad_b


def perturb_gaussian(embeddings: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Adds seeded i.i.d. N(0, sigma^2) noise; identity when sigma is 0."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(embeddings, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return x + sigma * rng.standard_normal(x.shape)


# dead-class respawning: classes whose marginal falls below 1/(_RESPAWN_DIV*C)
# are re-seeded as a jittered copy of the heaviest class, except during the
# final settling epochs
_RESPAWN_DIV = 4
_RESPAWN_SETTLE_EPOCHS = 5


def _descend(x: np.ndarray, sigma_eff: np.ndarray, n_classes: int, cfg: HeadConfig,
             seed: int):
    n, dim = x.shape
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.5, size=(n_classes, dim))
    b = np.zeros(n_classes)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            xb = x[perm[start : start + cfg.batch]]
            xp = xb + sigma_eff * rng.standard_normal(xb.shape)
            _, grad_a, grad_b = iic_loss_and_grad(xb @ w.T + b, xp @ w.T + b)
            w -= cfg.lr * (grad_a.T @ xb + grad_b.T @ xp)
            b -= cfg.lr * (grad_a + grad_b).sum(axis=0)
        if epoch < cfg.epochs - _RESPAWN_SETTLE_EPOCHS:
            marginal = np.bincount(np.argmax(x @ w.T + b, axis=1),
                                   minlength=n_classes) / n
            for k in np.nonzero(marginal < 1.0 / (_RESPAWN_DIV * n_classes))[0]:
                donor = int(np.argmax(marginal))
                w[k] = w[donor] + 0.05 * rng.standard_normal(dim)
                b[k] = b[donor]
                marginal[donor] /= 2
    logits = x @ w.T + b
    final_loss, _, _ = iic_loss_and_grad(logits, logits)
    return final_loss, w, b


def train_head(embeddings: np.ndarray, n_classes: int, cfg: HeadConfig) -> ClusterHead:
    """Train one affine+softmax head by seeded minibatch gradient descent.

    Each batch pairs the clean embeddings with a freshly perturbed copy (noise
    in encoder-output units) and descends the negative mutual information of
    the two assignments. Internally the embeddings are standardized for
    conditioning and the statistics folded back into the returned affine map;
    saturated softmax cells starve dead classes of gradient, so underweight
    classes respawn as a split of the heaviest one. The best of
    ``cfg.restarts`` seeded descents (by final full-batch loss) is kept.
    """
    x = np.ascontiguousarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    if n_classes < 2:
        raise ValueError("training needs n_classes >= 2")
    if n < n_classes:
        raise ValueError(f"need at least {n_classes} samples, got {n}")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0.0] = 1.0
    z = (x - mean) / std
    sigma_eff = cfg.sigma / std
    best = None
    for trial in range(cfg.restarts):
        loss, w, b = _descend(z, sigma_eff, n_classes, cfg, cfg.seed + 7919 * trial)
        if best is None or loss < best[0]:
            best = (loss, w, b)
    _, w, b = best
    return ClusterHead(weights=w / std, bias=b - w @ (mean / std))


def train_tree(embeddings: np.ndarray, root_c: int = 800, child_c: int = 100,
               min_child_samples: int = 100, cfg: HeadConfig | None = None) -> ClusterTree:
    """Root head over all samples; a child head per sufficiently large root label.

    Children train exclusively on their parent's samples (audited here) with
    per-label seeds derived from the base seed. Labels with fewer than
    max(min_child_samples, child_c) samples get no child.
    """
    if root_c < 2 or child_c < 2:
        raise ValueError("root_c and child_c must be >= 2")
    cfg = cfg or HeadConfig()
    x = np.ascontiguousarray(embeddings, dtype=np.float64)
    root = train_head(x, root_c, cfg)
    root_labels = np.argmax(root.probs(x), axis=1)
    children: dict[int, ClusterHead] = {}
    counts: dict[int, int] = {}
    for label in range(root_c):
        idx = np.nonzero(root_labels == label)[0]
        if idx.size < max(min_child_samples, child_c):
            continue
        if not np.all(root_labels[idx] == label):
            raise AssertionError(f"parent purity violated for label {label}")
        children[label] = train_head(x[idx], child_c, replace(cfg, seed=cfg.seed + 1 + label))
        counts[label] = int(idx.size)
    return ClusterTree(root=root, children=children, child_c=child_c,
                       min_child_samples=min_child_samples, child_train_counts=counts)


def predict_arrays(tree: ClusterTree, embeddings: np.ndarray,
                   certainty_mode: str = CERTAINTY_DEEPEST):
    """Vectorized tree walk: root labels, child labels (-1 if none), certainty."""
    if certainty_mode not in (CERTAINTY_DEEPEST, CERTAINTY_PRODUCT):
        raise ValueError(f"unknown certainty mode {certainty_mode!r}")
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[1] != tree.root.weights.shape[1]:
        raise ValueError(f"embedding dim {x.shape[1]} != head dim {tree.root.weights.shape[1]}")
    root_probs = tree.root.probs(x)
    root = np.argmax(root_probs, axis=1)
    root_max = root_probs[np.arange(x.shape[0]), root]
    child = np.full(x.shape[0], NODATA_LABEL, dtype=np.int64)
    certainty = root_max.copy()
    for label, head in tree.children.items():
        mask = root == label
        if not np.any(mask):
            continue
        probs = head.probs(x[mask])
        picks = np.argmax(probs, axis=1)
        top = probs[np.arange(picks.shape[0]), picks]
        child[mask] = picks
        certainty[mask] = top if certainty_mode == CERTAINTY_DEEPEST else root_max[mask] * top
    return root, child, certainty


def predict_tree(tree: ClusterTree, embeddings: np.ndarray) -> list[LabelPath]:
    root, child, certainty = predict_arrays(tree, embeddings)
    return [
        LabelPath(int(r), int(c) if c != NODATA_LABEL else None, float(p))
        for r, c, p in zip(root, child, certainty)
    ]


def segment_scene(model: DbnModel, tree: ClusterTree, normalizer: Normalizer,
                  scene: Scene, certainty_mode: str = CERTAINTY_DEEPEST) -> SegmentationProduct:
    """Full per-scene pass: neighborhoods -> normalize -> encode -> tree labels.

    Pixels without a fully valid 3x3 window stay nodata. Layer 2 holds the
    combined index root*child_c + child, nodata where the root label has no
    child head.
    """
    expected = 9 * len(scene.channel_names)
    if expected != model.input_dim:
        raise ValueError(
            f"scene yields {expected}-d vectors but encoder expects {model.input_dim}-d"
        )
    shape = (scene.grid.rows, scene.grid.cols)
    layer1 = np.full(shape, NODATA_LABEL, dtype=np.int32)
    layer2 = np.full(shape, NODATA_LABEL, dtype=np.int32)
    certainty = np.full(shape, np.nan, dtype=np.float32)
    samples = extract_neighborhoods(scene)
    if samples.n:
        normalized = apply_normalizer(samples, normalizer)
        emb = encode(model, normalized.vectors)
        root, child, cert = predict_arrays(tree, emb, certainty_mode)
        layer1[samples.rows, samples.cols] = root
        combined = np.where(child >= 0, root * tree.child_c + child, NODATA_LABEL)
        layer2[samples.rows, samples.cols] = combined
        certainty[samples.rows, samples.cols] = cert
    return SegmentationProduct(
        grid=scene.grid, date=scene.date, stream_id=scene.instrument_id,
        layer1=layer1, layer2=layer2, certainty=certainty, child_c=tree.child_c,
    )


# ---------------------------------------------------------------------------
# segmentation product container: 3-channel SFG1 scene

def seg_to_scene(seg: SegmentationProduct) -> Scene:
    fill = np.float32(FILL_VALUE)
    data = np.stack([
        np.where(seg.layer1 >= 0, seg.layer1.astype(np.float32), fill),
        np.where(seg.layer2 >= 0, seg.layer2.astype(np.float32), fill),
        np.where(np.isfinite(seg.certainty), seg.certainty, fill),
    ])
    return Scene(
        instrument_id=seg.stream_id,
        date=seg.date,
        grid=seg.grid,
        channel_names=["layer1", "layer2", f"certainty/{seg.child_c}"],
        data=data,
    )


def seg_from_scene(scene: Scene) -> SegmentationProduct:
    if len(scene.channel_names) != 3 or scene.channel_names[:2] != ["layer1", "layer2"]:
        raise SceneFormatError(f"not a segmentation product: channels {scene.channel_names}")
    fill = np.float32(scene.fill_value)
    child_c = int(scene.channel_names[2].rsplit("/", 1)[1])
    cert = scene.data[2].copy()
    cert[cert == fill] = np.nan
    return SegmentationProduct(
        grid=scene.grid,
        date=scene.date,
        stream_id=scene.instrument_id,
        layer1=np.where(scene.data[0] == fill, NODATA_LABEL, scene.data[0]).astype(np.int32),
        layer2=np.where(scene.data[1] == fill, NODATA_LABEL, scene.data[1]).astype(np.int32),
        certainty=cert,
        child_c=child_c,
    )


# ---------------------------------------------------------------------------
# tree serialization: JSON topology + float64 blocks (root W, root bias, then
# each child's W and bias in ascending label order)

def save_tree(tree: ClusterTree, path) -> None:
    labels = sorted(tree.children)
    header = {
        "embedding_dim": tree.root.weights.shape[1],
        "root_c": tree.root.n_classes,
        "child_c": tree.child_c,
        "min_child_samples": tree.min_child_samples,
        "children": labels,
        "child_train_counts": {str(k): v for k, v in sorted(tree.child_train_counts.items())},
    }
    blocks = [tree.root.weights.astype("<f8"), tree.root.bias.astype("<f8")]
    for label in labels:
        head = tree.children[label]
        blocks.extend([head.weights.astype("<f8"), head.bias.astype("<f8")])
    write_container(path, TREE_MAGIC, header, blocks)


def load_tree(path) -> ClusterTree:
    header, payload = read_container(path, TREE_MAGIC)
    try:
        dim = int(header["embedding_dim"])
        root_c = int(header["root_c"])
        child_c = int(header["child_c"])
        labels = [int(x) for x in header["children"]]
        counts = {int(k): int(v) for k, v in header["child_train_counts"].items()}
        min_child = int(header["min_child_samples"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"{path}: invalid tree header: {exc}") from exc
    shapes = [(root_c, dim), (root_c,)]
    for _ in labels:
        shapes.extend([(child_c, dim), (child_c,)])
    blocks = split_blocks(path, payload, shapes, "<f8")
    root = ClusterHead(weights=blocks[0], bias=blocks[1])
    children = {
        label: ClusterHead(weights=blocks[2 + 2 * i], bias=blocks[3 + 2 * i])
        for i, label in enumerate(labels)
    }
    return ClusterTree(root=root, children=children, child_c=child_c,
                       min_child_samples=min_child, child_train_counts=counts)


def trees_equal(a: ClusterTree, b: ClusterTree) -> bool:
    if (a.child_c != b.child_c or a.min_child_samples != b.min_child_samples
            or sorted(a.children) != sorted(b.children)
            or a.child_train_counts != b.child_train_counts):
        return False
    heads_a = [a.root] + [a.children[k] for k in sorted(a.children)]
    heads_b = [b.root] + [b.children[k] for k in sorted(b.children)]
    return all(
        np.array_equal(ha.weights, hb.weights) and np.array_equal(ha.bias, hb.bias)
        for ha, hb in zip(heads_a, heads_b)
    )
