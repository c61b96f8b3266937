"""Flare-forecast architectures: plain CNN baseline (M1) and its
attention-augmented variant (M2).

Both share the same trunk: six conv blocks (3x3 conv, batch norm, ReLU,
2x2 max-pool) followed by a final unnormalized conv whose kernel spans the
remaining spatial extent, yielding a ``g_dim`` global descriptor. M2 taps
the feature maps after blocks 3, 4 and 5 (pre-pool), scores every spatial
location against the global descriptor with a learnable additive attention
estimator, and classifies from the concatenated attention-weighted
summaries instead of the raw descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    BatchNormState,
    Parameter,
    Tensor,
    add,
    batchnorm2d,
    concat,
    conv2d,
    dense,
    maxpool2d,
    mul,
    relu,
    reshape,
    softmax,
    sum_,
    transpose,
)

ATTENTION_TAPS = (3, 4, 5)
NUM_CLASSES = 2
NUM_BLOCKS = 6

#: channel schedule used by the desk-scale experiments (input side 64)
DESK_CHANNELS = (8, 16, 16, 32, 32, 32)
#: channel schedule for the tiny gradient-check configuration (input side 32)
TINY_CHANNELS = (4, 8, 8, 8, 16, 16)


@dataclass(frozen=True)
class ModelConfig:
    """Geometry of the shared trunk.

    ``input_side`` must be a power of two >= 32; ``g_dim`` must equal the
    last block's channel count so the final conv preserves feature width.
    """

    input_side: int = 256
    block_channels: Tuple[int, ...] = (32, 64, 128, 256, 512, 512)
    g_dim: int = 512

    def __post_init__(self):
        s = self.input_side
        if s < 32 or (s & (s - 1)) != 0:
            raise ConfigError(f"input_side must be a power of two >= 32, got {s}")
        ch = tuple(int(c) for c in self.block_channels)
        if len(ch) != NUM_BLOCKS or any(c < 1 for c in ch):
            raise ConfigError(f"block_channels needs {NUM_BLOCKS} positive ints, got {ch}")
        object.__setattr__(self, "block_channels", ch)
        if self.g_dim != ch[-1]:
            raise ConfigError(
                f"g_dim ({self.g_dim}) must equal the last block width ({ch[-1]})"
            )

    def tap_side(self, estimator_index: int) -> int:
        """Spatial side of the attention map for estimator 1, 2 or 3
        (input_side / 4, / 8, / 16)."""
        if estimator_index not in (1, 2, 3):
            raise IndexError(f"estimator index must be 1..3, got {estimator_index}")
        return self.input_side >> (estimator_index + 1)

    def tap_channels(self, estimator_index: int) -> int:
        return self.block_channels[ATTENTION_TAPS[estimator_index - 1] - 1]

    @property
    def final_kernel(self) -> int:
        """Side of the map entering the final conv; its kernel spans it fully.

        Equals input_side / 64 whenever that is >= 1; pooling stops once the
        map reaches 1x1, so smaller inputs bottom out at a 1x1 kernel.
        """
        return max(1, self.input_side >> NUM_BLOCKS)

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "block_channels": list(self.block_channels),
            "g_dim": self.g_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            input_side=int(d["input_side"]),
            block_channels=tuple(int(c) for c in d["block_channels"]),
            g_dim=int(d["g_dim"]),
        )


class AttentionEstimator:
    """One trainable attention unit: a channel-to-g_dim projection plus the
    learnable direction ``u`` scoring each projected location against the
    global descriptor."""

    __slots__ = ("proj_weight", "proj_bias", "u")

    def __init__(self, proj_weight: Tensor, proj_bias: Tensor, u: Tensor):
        self.proj_weight = proj_weight
        self.proj_bias = proj_bias
        self.u = u

    @property
    def in_channels(self) -> int:
        return self.proj_weight.shape[1]

    @property
    def g_dim(self) -> int:
        return self.proj_weight.shape[0]


@dataclass
class AttentionBundle:
    """Per-estimator attention products from one M2 forward pass.

    For estimator s: ``scores[s-1]`` are the raw compatibilities [B, n],
    ``weights[s-1]`` the softmax-normalized attention [B, n], and
    ``summaries[s-1]`` the weighted feature averages [B, g_dim].
    ``map_sides[s-1]`` is the square side of the tap's spatial grid.
    """

    scores: List[Tensor] = field(default_factory=list)
    weights: List[Tensor] = field(default_factory=list)
    summaries: List[Tensor] = field(default_factory=list)
    map_sides: List[int] = field(default_factory=list)

    def estimator(self, index: int) -> Tuple[Tensor, Tensor, Tensor, int]:
        if index not in (1, 2, 3):
            raise IndexError(f"estimator index must be 1..3, got {index}")
        i = index - 1
        return self.scores[i], self.weights[i], self.summaries[i], self.map_sides[i]


class ModelParams:
    """Named parameter set plus batch-norm running state for one model."""

    def __init__(self, kind: str, config: ModelConfig):
        if kind not in ("m1", "m2"):
            raise ConfigError(f"model kind must be 'm1' or 'm2', got {kind!r}")
        self.kind = kind
        self.config = config
        self.params: Dict[str, Parameter] = {}
        self.bn_states: Dict[str, BatchNormState] = {}

    def _add(self, name: str, data: np.ndarray, decay: bool) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(data), decay=decay)
        self.params[name] = p
        return p.tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name].tensor

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.tensor.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.tensor.size for p in self.params.values())

    def estimator(self, index: int) -> AttentionEstimator:
        if self.kind != "m2":
            raise ConfigError("attention estimators exist only on m2 models")
        return AttentionEstimator(
            self[f"attn{index}.proj.weight"],
            self[f"attn{index}.proj.bias"],
            self[f"attn{index}.u"],
        )


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(kind: str, config: ModelConfig, seed: int) -> ModelParams:
    """Initialize a model: Kaiming-uniform weights (bound sqrt(6/fan_in)),
    zero biases, unit batch-norm gains. Same seed, same bits."""
    model = ModelParams(kind, config)
    rng = np.random.default_rng(seed)
    ch = config.block_channels
    cin = 1
    for i, cout in enumerate(ch, start=1):
        model._add(
            f"block{i}.conv.weight",
            _kaiming_uniform(rng, (cout, cin, 3, 3), fan_in=cin * 9),
            decay=True,
        )
        model._add(f"block{i}.bn.gamma", np.ones(cout, dtype=np.float32), decay=False)
        model._add(f"block{i}.bn.beta", np.zeros(cout, dtype=np.float32), decay=False)
        model.bn_states[f"block{i}.bn"] = BatchNormState(cout)
        cin = cout
    k = config.final_kernel
    model._add(
        "final.conv.weight",
        _kaiming_uniform(rng, (config.g_dim, ch[-1], k, k), fan_in=ch[-1] * k * k),
        decay=True,
    )
    model._add("final.conv.bias", np.zeros(config.g_dim, dtype=np.float32), decay=False)

    if kind == "m2":
        for s in (1, 2, 3):
            c_s = config.tap_channels(s)
            model._add(
                f"attn{s}.proj.weight",
                _kaiming_uniform(rng, (config.g_dim, c_s), fan_in=c_s),
                decay=True,
            )
            model._add(
                f"attn{s}.proj.bias", np.zeros(config.g_dim, dtype=np.float32), decay=False
            )
            model._add(
                f"attn{s}.u",
                _kaiming_uniform(rng, (config.g_dim,), fan_in=config.g_dim),
                decay=True,
            )
        cls_in = 3 * config.g_dim
    else:
        cls_in = config.g_dim
    model._add(
        "classifier.weight",
        _kaiming_uniform(rng, (NUM_CLASSES, cls_in), fan_in=cls_in),
        decay=True,
    )
    model._add("classifier.bias", np.zeros(NUM_CLASSES, dtype=np.float32), decay=False)
    return model


def forward_trunk(model: ModelParams, x: Tensor, mode: str):
    """Run the shared conv trunk.

    Returns the three pre-pool tap maps (after blocks 3, 4, 5) and the
    global descriptor g of shape [B, g_dim].
    """
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != cfg.input_side or x.shape[3] != cfg.input_side:
        raise ShapeError(
            f"expected input [B, 1, {cfg.input_side}, {cfg.input_side}], got {x.shape}"
        )
    taps = {}
    h = x
    for i in range(1, NUM_BLOCKS + 1):
        h = conv2d(h, model[f"block{i}.conv.weight"], None, stride=1, padding=1)
        h = batchnorm2d(
            h,
            model[f"block{i}.bn.gamma"],
            model[f"block{i}.bn.beta"],
            model.bn_states[f"block{i}.bn"],
            mode,
        )
        h = relu(h)
        if i in ATTENTION_TAPS:
            taps[i] = h
        if h.shape[2] >= 2:
            h = maxpool2d(h, 2, 2)
    g4 = conv2d(h, model["final.conv.weight"], model["final.conv.bias"], 1, 0)
    g = reshape(g4, (x.shape[0], cfg.g_dim))
    return taps[3], taps[4], taps[5], g


def project_locations(estimator: AttentionEstimator, local: Tensor) -> Tensor:
    """Map every spatial location of [B, C, H, W] through the estimator's
    linear projection, returning [B, n, g_dim] with n = H*W (row-major)."""
    b, c, h, w = local.shape
    if c != estimator.in_channels:
        raise ShapeError(
            f"tap has {c} channels but estimator projects from {estimator.in_channels}"
        )
    n = h * w
    flat = transpose(reshape(local, (b, c, n)), (0, 2, 1))
    proj = dense(reshape(flat, (b * n, c)), estimator.proj_weight, estimator.proj_bias)
    return reshape(proj, (b, n, estimator.g_dim))


def attention_compatibility(
    estimator: AttentionEstimator,
    local: Tensor,
    g: Tensor,
    projected: Optional[Tensor] = None,
) -> Tensor:
    """Additive compatibility: score_i = u . (ltilde_i + g), one scalar per
    spatial location. ``projected`` can pass a precomputed projection."""
    lt = project_locations(estimator, local) if projected is None else projected
    b, n, d = lt.shape
    if g.shape != (b, d):
        raise ShapeError(f"global descriptor {g.shape} incompatible with taps {lt.shape}")
    shifted = add(lt, reshape(g, (b, 1, d)))
    return sum_(mul(shifted, estimator.u), axis=2)


def attention_normalize(scores: Tensor) -> Tensor:
    """Softmax over the location axis of [B, n] scores."""
    if scores.ndim != 2:
        raise ShapeError(f"scores must be [B, n], got {scores.shape}")
    return softmax(scores, axis=1)


def attention_aggregate(weights: Tensor, projected: Tensor) -> Tensor:
    """Weighted average of projected locals: sum_i a_i * ltilde_i -> [B, g_dim]."""
    b, n, d = projected.shape
    if weights.shape != (b, n):
        raise ShapeError(
            f"weights {weights.shape} do not match {n} locations of {projected.shape}"
        )
    return sum_(mul(reshape(weights, (b, n, 1)), projected), axis=1)


def forward_m2(model: ModelParams, x: Tensor, mode: str):
    """Attention-model forward: logits [B, 2] plus the attention bundle."""
    if model.kind != "m2":
        raise ConfigError(f"forward_m2 called on a {model.kind!r} model")
    l3, l4, l5, g = forward_trunk(model, x, mode)
    bundle = AttentionBundle()
    for s, local in zip((1, 2, 3), (l3, l4, l5)):
        est = model.estimator(s)
        lt = project_locations(est, local)
        c = attention_compatibility(est, local, g, projected=lt)
        a = attention_normalize(c)
        bundle.scores.append(c)
        bundle.weights.append(a)
        bundle.summaries.append(attention_aggregate(a, lt))
        bundle.map_sides.append(local.shape[2])
    joined = concat(bundle.summaries, axis=1)
    logits = dense(joined, model["classifier.weight"], model["classifier.bias"])
    return logits, bundle


def forward_m1(model: ModelParams, x: Tensor, mode: str) -> Tensor:
    """Baseline forward: classify straight from the global descriptor."""
    if model.kind != "m1":
        raise ConfigError(f"forward_m1 called on a {model.kind!r} model")
    _, _, _, g = forward_trunk(model, x, mode)
    return dense(g, model["classifier.weight"], model["classifier.bias"])


def forward(model: ModelParams, x: Tensor, mode: str) -> Tensor:
    """Kind-dispatching forward returning logits only."""
    if model.kind == "m1":
        return forward_m1(model, x, mode)
    return forward_m2(model, x, mode)[0]
