"""Forward pass of the direction-conditioned dual-stream attention scorer.

Weights are fixed inputs (loaded from file or seeded); nothing here trains.
Every reduction over the candidate-leaf axis sums its terms in sorted order,
so reordering the candidates permutes per-leaf outputs bit for bit and leaves
the pooled outputs bitwise unchanged.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .labels import DIRECTION_LABELS

WEIGHTS_MAGIC = b"PLOCW001"
WEIGHTS_SCHEMA = "plantocc.scorer-weights/1"
GEOM_DIM = 11
CUE_DIM = 2


@dataclass(frozen=True)
class ScorerConfig:
    embed_dim: int = 16
    direction_dim: int = 16
    n_directions: int = len(DIRECTION_LABELS)
    width: int = 128
    heads: int = 4
    layers: int = 2
    ffn_dim: int = 256
    attn_dim: int = 64
    hidden_dim: int = 128
    temperature: float = 1.0
    per_direction_encoder: bool = False

    def __post_init__(self):
        if self.attn_dim <= 0 or self.width % self.heads:
            raise ValueError("attn_dim must be positive and width divisible by heads")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.per_direction_encoder:
            raise NotImplementedError("per-direction leaf-set encoding is only a config flag here")

    def to_dict(self) -> dict:
        return asdict(self)


def tensor_shapes(cfg: ScorerConfig) -> dict[str, tuple[int, ...]]:
    token_dim = cfg.embed_dim + GEOM_DIM
    kv_in = cfg.width + GEOM_DIM + CUE_DIM
    shapes: dict[str, tuple[int, ...]] = {
        "dir_embed": (cfg.n_directions, cfg.direction_dim),
        "in_proj.w": (token_dim, cfg.width),
        "in_proj.b": (cfg.width,),
    }
    for layer in range(cfg.layers):
        p = f"enc{layer}."
        for name in ("q", "k", "v", "o"):
            shapes[p + name + ".w"] = (cfg.width, cfg.width)
            shapes[p + name + ".b"] = (cfg.width,)
        shapes[p + "ln1.g"] = shapes[p + "ln1.b"] = (cfg.width,)
        shapes[p + "ln2.g"] = shapes[p + "ln2.b"] = (cfg.width,)
        shapes[p + "ffn1.w"] = (cfg.width, cfg.ffn_dim)
        shapes[p + "ffn1.b"] = (cfg.ffn_dim,)
        shapes[p + "ffn2.w"] = (cfg.ffn_dim, cfg.width)
        shapes[p + "ffn2.b"] = (cfg.width,)
    for name, d_in, d_out in (
        ("mlp_q", cfg.embed_dim + cfg.direction_dim, cfg.attn_dim),
        ("mlp_k", kv_in, cfg.attn_dim),
        ("mlp_v", kv_in, cfg.attn_dim),
        ("head_u", 2 * cfg.attn_dim, 1),
        ("head_r", 3 * cfg.attn_dim, 1),
    ):
        shapes[name + ".w1"] = (d_in, cfg.hidden_dim)
        shapes[name + ".b1"] = (cfg.hidden_dim,)
        shapes[name + ".w2"] = (cfg.hidden_dim, d_out)
        shapes[name + ".b2"] = (d_out,)
    return shapes


@dataclass
class ScorerWeights:
    config: ScorerConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = tensor_shapes(self.config)
        if set(expected) != set(self.tensors):
            raise ValueError(f"tensor names differ from config: {sorted(set(expected) ^ set(self.tensors))}")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape} != {shape}")
        # stored as float32, evaluated in float64
        self.tensors = {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in self.tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @classmethod
    def random(cls, config: ScorerConfig = ScorerConfig(), seed: int = 0) -> "ScorerWeights":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for affine maps; unit/zero layer norms."""
        rng = np.random.default_rng(seed)
        tensors = {}
        shapes = tensor_shapes(config)
        for name, shape in shapes.items():
            if name.endswith((".g",)):
                tensors[name] = np.ones(shape)
            elif name.startswith("enc") and ".ln" in name:
                tensors[name] = np.zeros(shape)
            elif name == "dir_embed":
                tensors[name] = rng.uniform(-1.0, 1.0, shape)
            else:
                w_name = name[:-1] + "w" if name.endswith(".b") else name.replace(".b", ".w")
                fan_in = shapes[w_name][0]
                bound = 1.0 / math.sqrt(fan_in)
                tensors[name] = rng.uniform(-bound, bound, shape)
        return cls(config, {k: v.astype(np.float32) for k, v in tensors.items()})

    def save(self, path) -> None:
        names = list(tensor_shapes(self.config))
        entries, blobs, offset = [], [], 0
        for name in names:
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            blobs.append(arr.tobytes())
            offset += arr.size
        header = json.dumps(
            {"schema": WEIGHTS_SCHEMA, "config": self.config.to_dict(), "tensors": entries,
             "nonlinearity": "gelu_tanh", "heads": "two-layer affine maps"},
            separators=(",", ":"),
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(WEIGHTS_MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)

    @classmethod
    def load(cls, path) -> "ScorerWeights":
        raw = Path(path).read_bytes()
        if raw[:8] != WEIGHTS_MAGIC:
            raise ValueError(f"{path}: not a scorer weight file")
        (n,) = struct.unpack("<I", raw[8:12])
        header = json.loads(raw[12 : 12 + n].decode("utf-8"))
        data = np.frombuffer(raw[12 + n :], dtype="<f4")
        tensors = {}
        for entry in header["tensors"]:
            start = entry["offset"]
            tensors[entry["name"]] = data[start : start + entry["count"]].reshape(entry["shape"])
        return cls(ScorerConfig(**header["config"]), tensors)


# ---------------------------------------------------------------------------
# order-exact building blocks
# ---------------------------------------------------------------------------


def gelu(x):
    """tanh-approximated GELU, the fixed smooth ramp used throughout."""
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def dense(x, w, b):
    """Affine map computed row by row with a fixed summation order (no BLAS blocking)."""
    x = np.asarray(x, dtype=np.float64)
    return (x[..., :, None] * w).sum(axis=-2) + b


def mlp2(x, weights: ScorerWeights, prefix: str):
    h = gelu(dense(x, weights[prefix + ".w1"], weights[prefix + ".b1"]))
    return dense(h, weights[prefix + ".w2"], weights[prefix + ".b2"])


def sorted_sum(x, axis: int):
    """Sum whose result depends only on the multiset of terms along ``axis``."""
    return np.sort(x, axis=axis).sum(axis=axis)


def softmax(x, axis: int = -1):
    x = np.asarray(x, dtype=np.float64)
    ex = np.exp(x - x.max(axis=axis, keepdims=True))
    return ex / np.expand_dims(sorted_sum(ex, axis), axis)


def layer_norm(x, g, b, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _rowdot(a, b):
    """Pairwise dot products a_i . b_j, each a plain reduction over the feature axis."""
    return (a[:, None, :] * b[None, :, :]).sum(axis=-1)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def encode_leaf_set(tokens, weights: ScorerWeights) -> np.ndarray:
    """Pre-norm transformer encoder over leaf tokens (permutation-equivariant)."""
    cfg = weights.config
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.embed_dim + GEOM_DIM:
        raise ValueError(f"tokens must be (n, {cfg.embed_dim + GEOM_DIM}), got {x.shape}")
    if len(x) == 0:
        raise ValueError("leaf set encoding needs at least one token")
    x = dense(x, weights["in_proj.w"], weights["in_proj.b"])
    dh = cfg.width // cfg.heads
    for layer in range(cfg.layers):
        p = f"enc{layer}."
        y = layer_norm(x, weights[p + "ln1.g"], weights[p + "ln1.b"])
        q = dense(y, weights[p + "q.w"], weights[p + "q.b"])
        k = dense(y, weights[p + "k.w"], weights[p + "k.b"])
        v = dense(y, weights[p + "v.w"], weights[p + "v.b"])
        heads = []
        for h in range(cfg.heads):
            sl = slice(h * dh, (h + 1) * dh)
            att = softmax(_rowdot(q[:, sl], k[:, sl]) / math.sqrt(dh), axis=1)
            heads.append(sorted_sum(att[:, :, None] * v[None, :, sl], axis=1))
        x = x + dense(np.concatenate(heads, axis=1), weights[p + "o.w"], weights[p + "o.b"])
        y = layer_norm(x, weights[p + "ln2.g"], weights[p + "ln2.b"])
        x = x + dense(gelu(dense(y, weights[p + "ffn1.w"], weights[p + "ffn1.b"])), weights[p + "ffn2.w"], weights[p + "ffn2.b"])
    return x


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class DirectionScores:
    query: np.ndarray
    potential_logits: np.ndarray  # scaled dot products
    potentials: np.ndarray  # sigmoid of the scaled dot products
    alpha: np.ndarray
    context: np.ndarray
    union: float
    rank_logits: np.ndarray
    rank: np.ndarray


def score_direction(fruit_embed, context_tokens, geometry, cues, k: int, weights: ScorerWeights) -> DirectionScores:
    """Score every candidate leaf for approach direction ``k``.

    ``context_tokens`` (J, width) come from :func:`encode_leaf_set`,
    ``geometry`` is (J, 11) pair geometry and ``cues`` (J, 2) depth/lateral
    offsets for this direction.
    """
    cfg = weights.config
    h_i = np.asarray(fruit_embed, dtype=np.float64)
    if h_i.shape != (cfg.embed_dim,):
        raise ValueError(f"fruit embedding must have shape ({cfg.embed_dim},)")
    q = mlp2(np.concatenate([h_i, weights["dir_embed"][k]]), weights, "mlp_q")
    ctx = np.asarray(context_tokens, dtype=np.float64).reshape(-1, cfg.width)
    n = len(ctx)
    if n == 0:
        union = float(sigmoid(mlp2(np.concatenate([q, np.zeros(cfg.attn_dim)]), weights, "head_u"))[0])
        empty = np.zeros(0)
        return DirectionScores(q, empty, empty, empty, np.zeros(cfg.attn_dim), union, empty, empty)
    kv_in = np.concatenate(
        [ctx, np.asarray(geometry, dtype=np.float64).reshape(n, GEOM_DIM), np.asarray(cues, dtype=np.float64).reshape(n, CUE_DIM)],
        axis=1,
    )
    keys = mlp2(kv_in, weights, "mlp_k")
    values = mlp2(kv_in, weights, "mlp_v")
    s = (keys * q).sum(axis=1) / math.sqrt(cfg.attn_dim)
    alpha = softmax(s / cfg.temperature)
    c = sorted_sum(alpha[:, None] * values, axis=0)
    qc = np.concatenate([q, c])
    union = float(sigmoid(mlp2(qc, weights, "head_u"))[0])
    rank_in = np.concatenate([np.broadcast_to(qc, (n, len(qc))), values], axis=1)
    rank_logits = mlp2(rank_in, weights, "head_r")[:, 0]
    return DirectionScores(q, s, sigmoid(s), alpha, c, union, rank_logits, softmax(rank_logits))


def score_fruit(fruit_embed, leaf_embeds, geometry, cues, weights: ScorerWeights) -> list[DirectionScores]:
    """All directions for one fruit; the leaf set is encoded once and shared.

    ``cues`` has shape (J, n_directions, 2).
    """
    cfg = weights.config
    leaf_embeds = np.asarray(leaf_embeds, dtype=np.float64).reshape(-1, cfg.embed_dim)
    geometry = np.asarray(geometry, dtype=np.float64).reshape(-1, GEOM_DIM)
    cues = np.asarray(cues, dtype=np.float64).reshape(len(leaf_embeds), cfg.n_directions, CUE_DIM)
    if len(leaf_embeds):
        ctx = encode_leaf_set(np.concatenate([leaf_embeds, geometry], axis=1), weights)
    else:
        ctx = np.zeros((0, cfg.width))
    return [score_direction(fruit_embed, ctx, geometry, cues[:, k], k, weights) for k in range(cfg.n_directions)]
