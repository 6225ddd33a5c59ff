"""Recording and mixing of attention features across inversion and editing.

An inversion pass fills a write-once :class:`FeatureCache` with the K/V
blocks of every (step, layer) site.  During denoising, an editing hook
looks up the matching site (denoising step j mirrors inversion step
N-1-j on the shared time grid) and rewrites the attention inputs
according to the configured strategy:

    none                 -> leave (q, k, v) alone
    replace_v            -> swap in the recorded inversion values
    project_v            -> per-token projection of values
    project_v_mask       -> projection with text-token gains forced to 1
    project_v_mask_keymod-> masked projection plus key modulation

An optional age regularization shifts the cached inversion features along
a reference aging direction before any mixing; the cache itself is never
mutated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Mapping

import numpy as np

from . import blockio
from .attention import (
    AgingDirection,
    FeatureBlock,
    KVPair,
    SiteKey,
    TokenLayout,
    apply_aging_direction,
    modulate_key,
    project_value,
)

Strategy = Literal["none", "replace_v", "project_v", "project_v_mask", "project_v_mask_keymod"]

STRATEGIES: tuple[Strategy, ...] = (
    "none",
    "replace_v",
    "project_v",
    "project_v_mask",
    "project_v_mask_keymod",
)

CACHE_MANIFEST = "cache.json"
CACHE_FORMAT_VERSION = 1


class FeatureCache:
    """Write-once store of inversion K/V blocks keyed by (step, layer).

    One cache belongs to one edit job; the inversion pass completes before
    any editing read, so no locking is needed.
    """

    def __init__(
        self,
        schedule_id: str,
        n_steps: int,
        layouts: Mapping[int, TokenLayout],
        backend_id: str = "",
    ):
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        self.schedule_id = schedule_id
        self.n_steps = n_steps
        self.backend_id = backend_id
        self._layouts = dict(layouts)
        self._entries: dict[SiteKey, KVPair] = {}

    @classmethod
    def for_backend(cls, backend, schedule_id: str, n_steps: int) -> "FeatureCache":
        layouts = {layer: layout for layer, layout in backend.attention_sites()}
        return cls(schedule_id, n_steps, layouts, backend_id=getattr(backend, "name", ""))

    def layout_for(self, layer: int) -> TokenLayout:
        try:
            return self._layouts[layer]
        except KeyError:
            raise ValueError(f"layer {layer} is not a declared attention site") from None

    def record(self, step: int, layer: int, k: FeatureBlock, v: FeatureBlock) -> None:
        key = (step, layer)
        if key in self._entries:
            raise ValueError(f"duplicate record at site {key}")
        self._entries[key] = KVPair(k.copy(), v.copy())

    def fetch(self, step: int, layer: int) -> KVPair:
        try:
            return self._entries[(step, layer)]
        except KeyError:
            raise ValueError(f"no recorded features at site ({step}, {layer})") from None

    def __contains__(self, key: SiteKey) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def sites(self) -> list[SiteKey]:
        return sorted(self._entries)

    # --- persistence ------------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for (step, layer), kv in self._entries.items():
            blockio.write_block(directory / f"k_{step:04d}_{layer:02d}.bin", kv.k)
            blockio.write_block(directory / f"v_{step:04d}_{layer:02d}.bin", kv.v)
        manifest = {
            "version": CACHE_FORMAT_VERSION,
            "schedule_id": self.schedule_id,
            "backend_id": self.backend_id,
            "n_steps": self.n_steps,
            "layouts": {str(layer): blockio.layout_to_json(lay) for layer, lay in self._layouts.items()},
            "entries": [[step, layer] for step, layer in self.sites()],
        }
        tmp = directory / (CACHE_MANIFEST + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=2))
        tmp.replace(directory / CACHE_MANIFEST)

    @classmethod
    def load(cls, directory) -> "FeatureCache":
        directory = Path(directory)
        manifest = json.loads((directory / CACHE_MANIFEST).read_text())
        layouts = {int(layer): blockio.layout_from_json(data) for layer, data in manifest["layouts"].items()}
        cache = cls(
            schedule_id=manifest["schedule_id"],
            n_steps=int(manifest["n_steps"]),
            layouts=layouts,
            backend_id=manifest.get("backend_id", ""),
        )
        for step, layer in manifest["entries"]:
            layout = cache.layout_for(layer)
            k = blockio.read_block(directory / f"k_{step:04d}_{layer:02d}.bin", layout)
            v = blockio.read_block(directory / f"v_{step:04d}_{layer:02d}.bin", layout)
            cache.record(step, layer, k, v)
        return cache


@dataclass(frozen=True)
class AgeRegConfig:
    """Reference aging direction plus the blend weight applied during mixing."""

    direction: AgingDirection
    weight: float


@dataclass(frozen=True)
class MixingConfig:
    """Everything apply_strategy needs to know about one editing run.

    ``active_steps``/``active_layers`` restrict mixing to a subset of sites;
    step bounds are inclusive indices on the shared inversion-time grid.
    The default (None) mixes at every recorded site.
    """

    strategy: Strategy = "none"
    key_gain: float = 1.0
    mask_text: bool = False
    age_reg: AgeRegConfig | None = None
    active_steps: tuple[int, int] | None = None
    active_layers: frozenset[int] | None = None
    projection_clamp: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not np.isfinite(self.key_gain):
            raise ValueError("key_gain must be finite")
        if self.active_steps is not None and self.active_steps[0] > self.active_steps[1]:
            raise ValueError(f"empty active_steps range {self.active_steps}")

    def wants_mask(self) -> bool:
        if self.strategy in ("project_v_mask", "project_v_mask_keymod"):
            return True
        return self.strategy == "project_v" and self.mask_text

    def site_active(self, step: int, layer: int) -> bool:
        if self.active_steps is not None and not (self.active_steps[0] <= step <= self.active_steps[1]):
            return False
        if self.active_layers is not None and layer not in self.active_layers:
            return False
        return True


def _regularized(cache_kv: KVPair, cfg: MixingConfig, step: int, layer: int) -> KVPair:
    # Shift operates on copies via pure ops; cached blocks stay untouched.
    if cfg.age_reg is None:
        return cache_kv
    entry = cfg.age_reg.direction.deltas(step, layer)
    if entry is None:
        # Reference grids may be coarser than the edit grid; skip quietly.
        return cache_kv
    k, v = apply_aging_direction(cache_kv.k, cache_kv.v, entry.k, entry.v, cfg.age_reg.weight)
    return KVPair(k, v)


def apply_strategy(
    step: int,
    layer: int,
    q_edit: FeatureBlock,
    k_edit: FeatureBlock,
    v_edit: FeatureBlock,
    cache: FeatureCache,
    cfg: MixingConfig,
) -> tuple[FeatureBlock, FeatureBlock, FeatureBlock]:
    """Rewrite one site's attention inputs; ``step`` indexes the inversion grid.

    The query always passes through untouched.
    """
    if cfg.strategy == "none" or not cfg.site_active(step, layer):
        return q_edit, k_edit, v_edit
    inv = _regularized(cache.fetch(step, layer), cfg, step, layer)
    if cfg.strategy == "replace_v":
        return q_edit, k_edit, inv.v
    v_proj = project_value(inv.v, v_edit, mask_text=cfg.wants_mask(), clamp=cfg.projection_clamp)
    if cfg.strategy == "project_v_mask_keymod":
        k_out = modulate_key(k_edit, inv.k, cfg.key_gain)
    else:
        k_out = k_edit
    return q_edit, k_out, v_proj


class InversionRecorder:
    """Attention hook for the inversion pass: copies K/V into the cache."""

    def __init__(self, cache: FeatureCache):
        self.cache = cache
        self.audit: list[SiteKey] = []

    def __call__(self, step, layer, q, k, v):
        layout = self.cache.layout_for(layer)
        self.cache.record(step, layer, FeatureBlock(np.array(k), layout), FeatureBlock(np.array(v), layout))
        self.audit.append((step, layer))
        return None


class EditingMixer:
    """Attention hook for the denoising pass: delegates to apply_strategy.

    Editing step j is mapped to inversion site n_steps-1-j before lookup,
    so both passes address the same slice of the time grid.
    """

    def __init__(self, cache: FeatureCache, cfg: MixingConfig):
        self.cache = cache
        self.cfg = cfg
        self.audit: list[SiteKey] = []

    def __call__(self, step, layer, q, k, v):
        self.audit.append((step, layer))
        if self.cfg.strategy == "none":
            return None
        site_step = self.cache.n_steps - 1 - step
        layout = self.cache.layout_for(layer)
        q_out, k_out, v_out = apply_strategy(
            site_step,
            layer,
            FeatureBlock(q, layout),
            FeatureBlock(k, layout),
            FeatureBlock(v, layout),
            self.cache,
            self.cfg,
        )
        return q_out.values, k_out.values, v_out.values


def build_hooks(cache: FeatureCache, cfg: MixingConfig) -> tuple[InversionRecorder, EditingMixer]:
    """The (recorder, mixer) pair for one inversion + editing round."""
    return InversionRecorder(cache), EditingMixer(cache, cfg)
