"""Attention-feature math for fusing inversion and editing branches.

Every function here is a pure, backend-independent kernel over float32
numpy arrays shaped ``[heads, tokens, head_dim]``: value projection with
per-token gains, text-token gain masking, key modulation through a
softmax alignment matrix, and age-direction arithmetic over averaged
cluster features.  Inputs are never mutated and identical inputs produce
bitwise-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

# Per-token squared norms at or below this are treated as degenerate and
# get a gain of exactly 1, so the projection returns the edit vector
# (a zero vector in that case) instead of dividing by ~0.
DEGENERATE_NORM_EPS = 1e-12

SiteKey = tuple[int, int]  # (step index, layer index)


@dataclass(frozen=True)
class TokenLayout:
    """Shape bookkeeping for one joint [text | image] attention block.

    Text tokens occupy positions ``0 .. text_tokens-1`` of the token axis,
    image tokens the rest.
    """

    text_tokens: int
    image_tokens: int
    heads: int
    head_dim: int

    def __post_init__(self) -> None:
        for name in ("text_tokens", "image_tokens", "heads", "head_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"TokenLayout.{name} must be >= 1, got {getattr(self, name)}")

    @property
    def total_tokens(self) -> int:
        return self.text_tokens + self.image_tokens


@dataclass(frozen=True)
class FeatureBlock:
    """One K or V tensor of an attention block, ``[heads, tokens, head_dim]``.

    Values are coerced to float32 and must be finite.  Blocks are treated
    as immutable; operations return fresh blocks.
    """

    values: np.ndarray
    layout: TokenLayout

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.dtype != np.float32:
            values = values.astype(np.float32)
        expected = (self.layout.heads, self.layout.total_tokens, self.layout.head_dim)
        if values.shape != expected:
            raise ValueError(f"feature block shape {values.shape} does not match layout {expected}")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature block contains non-finite entries")
        object.__setattr__(self, "values", values)

    def copy(self) -> "FeatureBlock":
        return FeatureBlock(self.values.copy(), self.layout)


@dataclass(frozen=True)
class GainField:
    """One scalar per (head, token): the projection coefficient field."""

    gain: np.ndarray
    layout: TokenLayout

    def __post_init__(self) -> None:
        gain = np.asarray(self.gain)
        if gain.dtype != np.float32:
            gain = gain.astype(np.float32)
        expected = (self.layout.heads, self.layout.total_tokens)
        if gain.shape != expected:
            raise ValueError(f"gain field shape {gain.shape} does not match layout {expected}")
        if not np.all(np.isfinite(gain)):
            raise ValueError("gain field contains non-finite entries")
        object.__setattr__(self, "gain", gain)


class KVPair(NamedTuple):
    """Key/value blocks recorded at one attention site."""

    k: FeatureBlock
    v: FeatureBlock


def _require_same_layout(a: FeatureBlock, b: FeatureBlock, what: str) -> None:
    if a.layout != b.layout:
        raise ValueError(f"{what}: mismatched layouts {a.layout} vs {b.layout}")


def projection_gain(
    v_inv: FeatureBlock,
    v_edit: FeatureBlock,
    clamp: tuple[float, float] | None = None,
) -> GainField:
    """Per-token, per-head coefficient projecting ``v_inv`` onto ``v_edit``.

    gain[h, i] = <v_inv[h, i, :], v_edit[h, i, :]> / <v_edit[h, i, :], v_edit[h, i, :]>

    Degenerate edit tokens (squared norm <= DEGENERATE_NORM_EPS) get gain 1.
    ``clamp`` optionally bounds the gains to [lo, hi] for stability runs.
    """
    _require_same_layout(v_inv, v_edit, "projection_gain")
    num = np.einsum("htc,htc->ht", v_inv.values, v_edit.values)
    den = np.einsum("htc,htc->ht", v_edit.values, v_edit.values)
    degenerate = den <= DEGENERATE_NORM_EPS
    gain = np.where(degenerate, np.float32(1.0), num / np.where(degenerate, np.float32(1.0), den))
    if clamp is not None:
        lo, hi = clamp
        if not lo <= hi:
            raise ValueError(f"invalid gain clamp [{lo}, {hi}]")
        gain = np.clip(gain, np.float32(lo), np.float32(hi))
    return GainField(gain.astype(np.float32), v_inv.layout)


def mask_text_gain(field: GainField) -> GainField:
    """Force the gain to exactly 1 at every text-token position.

    Image-token positions pass through untouched.  Idempotent.
    """
    gain = field.gain.copy()
    gain[:, : field.layout.text_tokens] = np.float32(1.0)
    return GainField(gain, field.layout)


def project_value(
    v_inv: FeatureBlock,
    v_edit: FeatureBlock,
    mask_text: bool = False,
    clamp: tuple[float, float] | None = None,
) -> FeatureBlock:
    """Fuse the branches: scale each edit token vector by its projection gain.

    With ``mask_text`` set, text-token gains are forced to 1 after the
    image-token gains are computed, so only image features are fused and
    the prompt content of ``v_edit`` survives unchanged.
    """
    gain = projection_gain(v_inv, v_edit, clamp=clamp)
    if mask_text:
        gain = mask_text_gain(gain)
    return FeatureBlock(gain.gain[:, :, None] * v_edit.values, v_edit.layout)


def modulate_key(k_edit: FeatureBlock, k_inv: FeatureBlock, gain: float) -> FeatureBlock:
    """Pull editing keys toward aligned inversion keys.

    Per head, an alignment matrix ``A = softmax(k_edit @ k_inv.T / sqrt(head_dim))``
    (row-stochastic over the inversion-token axis) mixes inversion keys into
    the editing keys:  ``k_mod = k_edit + gain * (A @ k_inv)``.
    """
    _require_same_layout(k_edit, k_inv, "modulate_key")
    if not np.isfinite(gain):
        raise ValueError(f"key gain must be finite, got {gain}")
    scale = np.float32(1.0 / np.sqrt(k_edit.layout.head_dim))
    scores = np.einsum("htc,hsc->hts", k_edit.values, k_inv.values) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    mixed = np.einsum("hts,hsc->htc", weights, k_inv.values)
    return FeatureBlock(k_edit.values + np.float32(gain) * mixed, k_edit.layout)


def alignment_matrix(k_edit: FeatureBlock, k_inv: FeatureBlock) -> np.ndarray:
    """The row-stochastic alignment weights used by :func:`modulate_key`."""
    _require_same_layout(k_edit, k_inv, "alignment_matrix")
    scale = np.float32(1.0 / np.sqrt(k_edit.layout.head_dim))
    scores = np.einsum("htc,hsc->hts", k_edit.values, k_inv.values) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights


@dataclass(frozen=True)
class AgingDirection:
    """Per-site K/V deltas pointing from a young toward an old feature cluster."""

    delta_k: Mapping[SiteKey, FeatureBlock]
    delta_v: Mapping[SiteKey, FeatureBlock]
    age_low: float
    age_high: float

    def __post_init__(self) -> None:
        if not self.age_low < self.age_high:
            raise ValueError(f"age_low ({self.age_low}) must be < age_high ({self.age_high})")
        if set(self.delta_k) != set(self.delta_v):
            raise ValueError("delta_k and delta_v must cover identical sites")
        for key, block in self.delta_k.items():
            if block.layout != self.delta_v[key].layout:
                raise ValueError(f"delta layouts disagree at site {key}")

    def deltas(self, step: int, layer: int) -> KVPair | None:
        """Direction entry for one site, or None when the site is uncovered."""
        key = (step, layer)
        if key not in self.delta_k:
            return None
        return KVPair(self.delta_k[key], self.delta_v[key])

    def sites(self) -> Iterator[SiteKey]:
        return iter(sorted(self.delta_k))


def _mean_blocks(blocks: Sequence[FeatureBlock]) -> np.ndarray:
    stacked = np.stack([b.values for b in blocks])
    return np.mean(stacked, axis=0, dtype=np.float64).astype(np.float32)


def compute_aging_direction(
    old_cluster: Sequence[Mapping[SiteKey, KVPair]],
    young_cluster: Sequence[Mapping[SiteKey, KVPair]],
    age_low: float = 30.0,
    age_high: float = 70.0,
) -> AgingDirection:
    """Entrywise mean(old) - mean(young) over per-image feature maps.

    Both clusters must be non-empty and every member must cover the same
    (step, layer) sites with matching layouts.
    """
    if not old_cluster or not young_cluster:
        raise ValueError("both clusters must be non-empty")
    sites = set(old_cluster[0])
    for member in list(old_cluster) + list(young_cluster):
        if set(member) != sites:
            raise ValueError("cluster members cover mismatched (step, layer) sites")
    delta_k: dict[SiteKey, FeatureBlock] = {}
    delta_v: dict[SiteKey, FeatureBlock] = {}
    for key in sites:
        layout = old_cluster[0][key].k.layout
        mean_k_old = _mean_blocks([m[key].k for m in old_cluster])
        mean_k_young = _mean_blocks([m[key].k for m in young_cluster])
        mean_v_old = _mean_blocks([m[key].v for m in old_cluster])
        mean_v_young = _mean_blocks([m[key].v for m in young_cluster])
        delta_k[key] = FeatureBlock(mean_k_old - mean_k_young, layout)
        delta_v[key] = FeatureBlock(mean_v_old - mean_v_young, layout)
    return AgingDirection(delta_k=delta_k, delta_v=delta_v, age_low=age_low, age_high=age_high)


def age_blend_weight(
    age_target: float,
    age_low: float,
    age_high: float,
    clamp: bool = False,
) -> float:
    """Relative position of the target age between the reference bounds.

    Unclamped by default: targets outside [age_low, age_high] extrapolate.
    """
    if not age_low < age_high:
        raise ValueError(f"age_low ({age_low}) must be < age_high ({age_high})")
    weight = (age_target - age_low) / (age_high - age_low)
    if clamp:
        weight = min(1.0, max(0.0, weight))
    return weight


def apply_aging_direction(
    k_inv: FeatureBlock,
    v_inv: FeatureBlock,
    delta_k: FeatureBlock,
    delta_v: FeatureBlock,
    weight: float,
) -> tuple[FeatureBlock, FeatureBlock]:
    """Shift inversion features along the aging direction: ``x + weight * delta``."""
    _require_same_layout(k_inv, delta_k, "apply_aging_direction (k)")
    _require_same_layout(v_inv, delta_v, "apply_aging_direction (v)")
    w = np.float32(weight)
    return (
        FeatureBlock(k_inv.values + w * delta_k.values, k_inv.layout),
        FeatureBlock(v_inv.values + w * delta_v.values, v_inv.layout),
    )
