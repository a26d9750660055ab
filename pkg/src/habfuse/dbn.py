"""Stacked-RBM encoder trained greedily by contrastive divergence.

Layer 0 is Gaussian-visible with unit variance (inputs are standardized
upstream); deeper layers are Bernoulli-visible and train on the previous
layer's mean-field hidden probabilities. Encoding is a deterministic
mean-field pass, so the same vector always maps to the same embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logsumexp

from .blockio import read_container, split_blocks, write_container
from .errors import SceneFormatError
from .sampling import SampleSet

MODEL_MAGIC = b"SFM1"

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"

# encode() clamps probabilities into the open interval (0, 1)
_P_EPS = 1e-12


@dataclass
class CdConfig:
    """Contrastive-divergence hyperparameters; defaults are desk-scale."""

    cd_k: int = 1
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 128
    momentum: float = 0.5
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.cd_k < 1:
            raise ValueError("cd_k must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return {
            "cd_k": self.cd_k,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
        }


@dataclass(eq=False)
class RbmLayer:
    weights: np.ndarray  # (hidden, visible) float32
    visible_bias: np.ndarray  # (visible,) float32
    hidden_bias: np.ndarray  # (hidden,) float32
    visible_type: str

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float32)
        self.visible_bias = np.ascontiguousarray(self.visible_bias, dtype=np.float32)
        self.hidden_bias = np.ascontiguousarray(self.hidden_bias, dtype=np.float32)
        if self.visible_type not in (GAUSSIAN, BERNOULLI):
            raise ValueError(f"unknown visible_type {self.visible_type!r}")
        h, v = self.weights.shape
        if self.visible_bias.shape != (v,) or self.hidden_bias.shape != (h,):
            raise ValueError("bias shapes inconsistent with weight matrix")
        for arr in (self.weights, self.visible_bias, self.hidden_bias):
            if not np.all(np.isfinite(arr)):
                raise ValueError("RBM parameters must be finite")

    @property
    def n_visible(self) -> int:
        return self.weights.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[0]


@dataclass(eq=False)
class DbnModel:
    layers: list[RbmLayer]
    input_dim: int
    output_dim: int
    config: CdConfig | None = field(default=None)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("DbnModel needs at least one layer")
        if self.layers[0].n_visible != self.input_dim:
            raise ValueError("layer 0 visible dim != input_dim")
        if self.layers[-1].n_hidden != self.output_dim:
            raise ValueError("last layer hidden dim != output_dim")
        if self.layers[0].visible_type != GAUSSIAN:
            raise ValueError("layer 0 must be gaussian-visible")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.n_hidden != b.n_visible:
                raise ValueError(f"layer {i} hidden dim {a.n_hidden} != layer {i+1} visible dim")
            if b.visible_type != BERNOULLI:
                raise ValueError("layers above 0 must be bernoulli-visible")


def _hidden_probs32(x: np.ndarray, w: np.ndarray, c: np.ndarray) -> np.ndarray:
    return expit(x @ w.T + c).astype(np.float32)


def train_rbm(data: np.ndarray, hidden: int, visible_type: str, cfg: CdConfig) -> RbmLayer:
    """CD-k training of one RBM, seeded and bit-reproducible.

    Positive and negative statistics both use hidden probabilities; the Gibbs
    chain samples hidden states and reconstructs the visibles by their mean
    (identity for gaussian units, logistic for bernoulli). Weight decay
    applies to the weight matrix only.
    """
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ValueError("training data must be a non-empty (N, V) array")
    if not np.all(np.isfinite(data)):
        raise ValueError("training data must be finite")
    if visible_type not in (GAUSSIAN, BERNOULLI):
        raise ValueError(f"unknown visible_type {visible_type!r}")

    n, n_vis = data.shape
    rng = np.random.default_rng(cfg.seed)
    w = rng.normal(0.0, 0.01, size=(hidden, n_vis)).astype(np.float32)
    b = np.zeros(n_vis, dtype=np.float32)
    c = np.zeros(hidden, dtype=np.float32)
    vel_w = np.zeros_like(w)
    vel_b = np.zeros_like(b)
    vel_c = np.zeros_like(c)
    lr = np.float32(cfg.learning_rate)
    mom = np.float32(cfg.momentum)
    decay = np.float32(cfg.weight_decay)

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            v0 = data[perm[start : start + cfg.batch_size]]
            bsz = np.float32(v0.shape[0])
            ph0 = _hidden_probs32(v0, w, c)
            h = (rng.random(ph0.shape) < ph0).astype(np.float32)
            vk = v0
            for step in range(cfg.cd_k):
                if step > 0:
                    phk = _hidden_probs32(vk, w, c)
                    h = (rng.random(phk.shape) < phk).astype(np.float32)
                mean = h @ w + b
                vk = mean if visible_type == GAUSSIAN else expit(mean).astype(np.float32)
            phk = _hidden_probs32(vk, w, c)

            grad_w = (ph0.T @ v0 - phk.T @ vk) / bsz
            vel_w = mom * vel_w + lr * (grad_w - decay * w)
            vel_b = mom * vel_b + lr * (v0 - vk).mean(axis=0)
            vel_c = mom * vel_c + lr * (ph0 - phk).mean(axis=0)
            w = w + vel_w
            b = b + vel_b
            c = c + vel_c
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
                raise RuntimeError(
                    f"RBM training diverged to non-finite parameters at epoch {epoch}, "
                    f"batch offset {start} (lr={cfg.learning_rate}, cd_k={cfg.cd_k})"
                )
    return RbmLayer(weights=w, visible_bias=b, hidden_bias=c, visible_type=visible_type)


def train_dbn(samples: SampleSet, hidden_dims: list[int] | None, cfg: CdConfig,
              allow_contraction: bool = False) -> DbnModel:
    """Greedy layer-wise DBN training on normalized neighborhood vectors.

    ``hidden_dims=None`` applies the desk default of two layers at 4x the
    input dimension. The first layer must expand the input unless
    ``allow_contraction`` is set. Layer i trains with seed ``cfg.seed + i``.
    """
    dim = samples.dim
    if hidden_dims is None:
        hidden_dims = [4 * dim, 4 * dim]
    if not 2 <= len(hidden_dims) <= 3:
        raise ValueError(f"hidden_dims must have 2 or 3 layers, got {len(hidden_dims)}")
    if hidden_dims[0] < dim and not allow_contraction:
        raise ValueError(
            f"first hidden dim {hidden_dims[0]} does not expand input dim {dim}; "
            "pass allow_contraction=True to override"
        )
    layers: list[RbmLayer] = []
    rep = samples.vectors
    for i, hidden in enumerate(hidden_dims):
        vtype = GAUSSIAN if i == 0 else BERNOULLI
        layer = train_rbm(rep, hidden, vtype, replace(cfg, seed=cfg.seed + i))
        layers.append(layer)
        rep = _hidden_probs32(rep, layer.weights, layer.hidden_bias)
    return DbnModel(layers=layers, input_dim=dim, output_dim=hidden_dims[-1], config=cfg)


def encode(model: DbnModel, vectors: np.ndarray) -> np.ndarray:
    """Deterministic mean-field embedding, strictly inside (0, 1)."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"expected (N, {model.input_dim}) vectors, got {x.shape}")
    for layer in model.layers:
        x = expit(x @ layer.weights.T.astype(np.float64) + layer.hidden_bias.astype(np.float64))
        np.clip(x, _P_EPS, 1.0 - _P_EPS, out=x)
    return x


def _all_binary(n: int) -> np.ndarray:
    return ((np.arange(2 ** n)[:, None] >> np.arange(n)[None, :]) & 1).astype(np.float64)


def exact_log_likelihood(rbm: RbmLayer, data: np.ndarray) -> float:
    """Exact mean log-likelihood of a small Bernoulli-Bernoulli RBM.

    Enumerates every visible/hidden configuration for the partition function,
    so it is limited to n_visible + n_hidden <= 20. Test oracle, not a
    training path.
    """
    if rbm.visible_type != BERNOULLI:
        raise ValueError("exact likelihood requires a bernoulli-visible RBM")
    n_vis, n_hid = rbm.n_visible, rbm.n_hidden
    if n_vis + n_hid > 20:
        raise ValueError(f"enumeration infeasible for {n_vis}+{n_hid} units")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != n_vis:
        raise ValueError(f"data must be (N, {n_vis})")

    w = rbm.weights.astype(np.float64)
    b = rbm.visible_bias.astype(np.float64)
    c = rbm.hidden_bias.astype(np.float64)
    all_v = _all_binary(n_vis)
    all_h = _all_binary(n_hid)
    # log unnormalized p(v, h) over the full joint grid
    joint = (all_h @ c)[:, None] + (all_v @ b)[None, :] + all_h @ w @ all_v.T
    log_z = logsumexp(joint)
    data_scores = logsumexp((all_h @ c)[None, :] + data @ w.T @ all_h.T, axis=1) + data @ b
    return float(np.mean(data_scores) - log_z)


# ---------------------------------------------------------------------------
# serialization: JSON header + float32 blocks (per layer: W, visible bias,
# hidden bias)

def save_dbn(model: DbnModel, path) -> None:
    header = {
        "input_dim": model.input_dim,
        "output_dim": model.output_dim,
        "layers": [
            {"visible": l.n_visible, "hidden": l.n_hidden, "visible_type": l.visible_type}
            for l in model.layers
        ],
        "config": model.config.to_dict() if model.config else None,
    }
    blocks = []
    for layer in model.layers:
        blocks.extend([
            layer.weights.astype("<f4"),
            layer.visible_bias.astype("<f4"),
            layer.hidden_bias.astype("<f4"),
        ])
    write_container(path, MODEL_MAGIC, header, blocks)


def load_dbn(path) -> DbnModel:
    header, payload = read_container(path, MODEL_MAGIC)
    try:
        specs = header["layers"]
        shapes = []
        for s in specs:
            h, v = int(s["hidden"]), int(s["visible"])
            shapes.extend([(h, v), (v,), (h,)])
        cfg = CdConfig(**header["config"]) if header.get("config") else None
        input_dim = int(header["input_dim"])
        output_dim = int(header["output_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"{path}: invalid model header: {exc}") from exc
    blocks = split_blocks(path, payload, shapes, "<f4")
    layers = []
    for i, s in enumerate(specs):
        w, b, c = blocks[3 * i : 3 * i + 3]
        layers.append(RbmLayer(weights=w, visible_bias=b, hidden_bias=c,
                               visible_type=str(s["visible_type"])))
    return DbnModel(layers=layers, input_dim=input_dim, output_dim=output_dim, config=cfg)


def dbn_equal(a: DbnModel, b: DbnModel) -> bool:
    if len(a.layers) != len(b.layers) or a.input_dim != b.input_dim or a.output_dim != b.output_dim:
        return False
    if (a.config is None) != (b.config is None):
        return False
    if a.config and a.config.to_dict() != b.config.to_dict():
        return False
    return all(
        la.visible_type == lb.visible_type
        and np.array_equal(la.weights, lb.weights)
        and np.array_equal(la.visible_bias, lb.visible_bias)
        and np.array_equal(la.hidden_bias, lb.hidden_bias)
        for la, lb in zip(a.layers, b.layers)
    )
