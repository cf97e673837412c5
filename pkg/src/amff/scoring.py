"""Score heads and the full model forward/backward.

Two regression heads (D -> 256 -> 1 with a ReLU in between) predict
visual quality and authenticity from the fused feature; the consistency
score is the similarity between the fused feature and the text feature.
Cosine is the default similarity; negated Euclidean and Manhattan
distances are available so all three kinds share a higher-is-better
orientation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .aff import AffCache, AffGrads, AffParams, aff_backward, aff_forward, glorot_uniform, init_aff_params
from .dataio import FeatureBundle
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Array, as_vector

SIMILARITY_KINDS = ("cosine", "euclidean", "manhattan")


@dataclass
class MlpParams:
    """Two fully connected layers with a ReLU between them."""

    w1: Array  # (hidden, dim)
    b1: Array  # (hidden,)
    w2: Array  # (1, hidden)
    b2: Array  # (1,)

    def __post_init__(self):
        h, _ = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (1, h) or self.b2.shape != (1,):
            raise ShapeError(
                f"MlpParams: inconsistent shapes w1={self.w1.shape} b1={self.b1.shape} "
                f"w2={self.w2.shape} b2={self.b2.shape}"
            )

    @property
    def dim(self) -> int:
        return self.w1.shape[1]


@dataclass
class MlpGrads:
    w1: Array
    b1: Array
    w2: Array
    b2: Array


@dataclass(frozen=True)
class MlpCache:
    x: Array
    pre1: Array
    hidden: Array


def init_mlp_params(dim: int, hidden: int = 256, rng: np.random.Generator | None = None) -> MlpParams:
    if rng is None:
        raise ValueError("init_mlp_params requires an explicit rng")
    return MlpParams(
        w1=glorot_uniform(rng, hidden, dim),
        b1=np.zeros(hidden),
        w2=glorot_uniform(rng, 1, hidden),
        b2=np.zeros(1),
    )


def mlp_forward(params: MlpParams, x) -> tuple[float, MlpCache]:
    x = as_vector(x, "x")
    if x.shape[0] != params.dim:
        raise ShapeError(f"mlp_forward: input dim {x.shape[0]} vs params dim {params.dim}")
    pre1 = params.w1 @ x + params.b1
    hidden = np.maximum(pre1, 0.0)
    y = float(params.w2[0] @ hidden + params.b2[0])
    return y, MlpCache(x, pre1, hidden)


def mlp_backward(cache: MlpCache, params: MlpParams, dy: float) -> tuple[MlpGrads, Array]:
    """Gradients for a scalar upstream ``dy``, including the ReLU mask."""
    if cache.x.shape[0] != params.dim:
        raise ShapeError("mlp_backward: cache does not match params")
    dw2 = (dy * cache.hidden)[None, :]
    db2 = np.array([dy])
    d_hidden = dy * params.w2[0]
    d_pre1 = d_hidden * (cache.pre1 > 0.0)
    db1 = d_pre1
    dw1 = np.outer(d_pre1, cache.x)
    dx = params.w1.T @ d_pre1
    return MlpGrads(dw1, db1, dw2, db2), dx


def similarity_score(f_img, f_text, kind: str = "cosine") -> tuple[float, Array]:
    """Similarity between two vectors plus its gradient w.r.t. ``f_img``.

    Euclidean and Manhattan scores are negated distances so that higher
    always means more consistent.
    """
    f_img = as_vector(f_img, "f_img")
    f_text = as_vector(f_text, "f_text")
    if f_img.shape != f_text.shape:
        raise ShapeError(f"similarity: dims {f_img.shape} vs {f_text.shape}")
    if kind == "cosine":
        ni = float(np.linalg.norm(f_img))
        nt = float(np.linalg.norm(f_text))
        if ni == 0.0 or nt == 0.0:
            raise NumericError("similarity: cosine undefined for zero-norm input")
        s = float(f_img @ f_text) / (ni * nt)
        grad = (f_text / nt - s * f_img / ni) / ni
        return float(np.clip(s, -1.0, 1.0)), grad
    if kind == "euclidean":
        diff = f_img - f_text
        dist = float(np.linalg.norm(diff))
        grad = -diff / dist if dist > 0.0 else np.zeros_like(diff)
        return -dist, grad
    if kind == "manhattan":
        diff = f_img - f_text
        return -float(np.abs(diff).sum()), -np.sign(diff)
    raise ConfigError(f"similarity: unknown kind {kind!r}")


@dataclass(frozen=True)
class ScoreTriple:
    """Model outputs: consistency, visual quality, authenticity."""

    s_c: float
    s_v: float
    s_a: float


@dataclass
class ModelParams:
    aff: AffParams
    head_v: MlpParams
    head_a: MlpParams
    similarity: str = "cosine"

    def __post_init__(self):
        if self.similarity not in SIMILARITY_KINDS:
            raise ConfigError(f"ModelParams: unknown similarity {self.similarity!r}")

    @property
    def dim(self) -> int:
        return self.head_v.dim

    def named_arrays(self) -> Iterator[tuple[str, Array]]:
        for block, p in (("aff", self.aff), ("head_v", self.head_v), ("head_a", self.head_a)):
            for leaf in ("w1", "b1", "w2", "b2"):
                yield f"{block}.{leaf}", getattr(p, leaf)

    def copy(self) -> "ModelParams":
        return ModelParams(
            aff=AffParams(self.aff.w1.copy(), self.aff.b1.copy(), self.aff.w2.copy(), self.aff.b2.copy()),
            head_v=MlpParams(self.head_v.w1.copy(), self.head_v.b1.copy(), self.head_v.w2.copy(), self.head_v.b2.copy()),
            head_a=MlpParams(self.head_a.w1.copy(), self.head_a.b1.copy(), self.head_a.w2.copy(), self.head_a.b2.copy()),
            similarity=self.similarity,
        )


@dataclass
class ModelGrads:
    aff: AffGrads
    head_v: MlpGrads
    head_a: MlpGrads

    @staticmethod
    def zeros_like(params: ModelParams) -> "ModelGrads":
        z = lambda a: np.zeros_like(a)
        return ModelGrads(
            aff=AffGrads(z(params.aff.w1), z(params.aff.b1), z(params.aff.w2), z(params.aff.b2)),
            head_v=MlpGrads(z(params.head_v.w1), z(params.head_v.b1), z(params.head_v.w2), z(params.head_v.b2)),
            head_a=MlpGrads(z(params.head_a.w1), z(params.head_a.b1), z(params.head_a.w2), z(params.head_a.b2)),
        )

    def named_arrays(self) -> Iterator[tuple[str, Array]]:
        for block_name, block in (("aff", self.aff), ("head_v", self.head_v), ("head_a", self.head_a)):
            for leaf in ("w1", "b1", "w2", "b2"):
                yield f"{block_name}.{leaf}", getattr(block, leaf)

    def add_(self, other: "ModelGrads") -> None:
        for (_, mine), (_, theirs) in zip(self.named_arrays(), other.named_arrays()):
            mine += theirs


def init_model_params(
    dim: int,
    rng: np.random.Generator,
    hidden_aff: int = 256,
    hidden_head: int = 256,
    similarity: str = "cosine",
) -> ModelParams:
    return ModelParams(
        aff=init_aff_params(dim, hidden_aff, rng),
        head_v=init_mlp_params(dim, hidden_head, rng),
        head_a=init_mlp_params(dim, hidden_head, rng),
        similarity=similarity,
    )


@dataclass(frozen=True)
class ModelCache:
    fused: Array
    aff_cache: AffCache | None  # None when fusion is the plain mean
    cache_v: MlpCache
    cache_a: MlpCache
    sim_grad: Array
    use_msi: bool
    use_aff: bool


def model_forward(
    features: FeatureBundle,
    params: ModelParams,
    *,
    use_msi: bool = True,
    use_aff: bool = True,
) -> tuple[ScoreTriple, ModelCache]:
    """Full forward pass: fuse scales, run both heads, score similarity.

    ``use_msi=False`` feeds the original-scale feature into all three
    fusion slots; ``use_aff=False`` replaces the learned fusion with
    the plain mean of the three features.
    """
    if features.dim != params.dim:
        raise ShapeError(f"model_forward: features dim {features.dim} vs params dim {params.dim}")
    if use_msi:
        trio = (features.f_05, features.f_10, features.f_15)
    else:
        trio = (features.f_10, features.f_10, features.f_10)

    if use_aff:
        fused, aff_cache = aff_forward(*trio, params.aff)
    else:
        fused = (trio[0] + trio[1] + trio[2]) / 3.0
        aff_cache = None

    s_v, cache_v = mlp_forward(params.head_v, fused)
    s_a, cache_a = mlp_forward(params.head_a, fused)
    s_c, sim_grad = similarity_score(fused, features.f_text, params.similarity)
    triple = ScoreTriple(s_c, s_v, s_a)
    cache = ModelCache(fused, aff_cache, cache_v, cache_a, sim_grad, use_msi, use_aff)
    return triple, cache


def model_backward(
    cache: ModelCache,
    params: ModelParams,
    ds_c: float,
    ds_v: float,
    ds_a: float,
) -> ModelGrads:
    """Gradients of ``ds_c*S_C + ds_v*S_V + ds_a*S_A`` w.r.t. all params."""
    grads_v, d_fused_v = mlp_backward(cache.cache_v, params.head_v, ds_v)
    grads_a, d_fused_a = mlp_backward(cache.cache_a, params.head_a, ds_a)
    d_fused = d_fused_v + d_fused_a + ds_c * cache.sim_grad

    if cache.use_aff:
        aff_grads, _, _, _ = aff_backward(cache.aff_cache, params.aff, d_fused)
    else:
        zeros = ModelGrads.zeros_like(params)
        aff_grads = zeros.aff
    return ModelGrads(aff=aff_grads, head_v=grads_v, head_a=grads_a)
