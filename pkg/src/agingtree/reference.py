"""Age reference clusters and the aging direction they induce.

To regularize an edit toward a plausible aging trajectory we need, per
attention site, the difference between averaged inversion features of an
older and a younger rendition of the subject.  Clusters of such renditions
come from an external image-generation service, from a user-supplied
directory, or from a built-in synthetic generator (seeded pixel
perturbations of the input) that keeps the whole path runnable offline.

External results are cached on disk under
``cache/sar/<input-hash>/<age>/<idx>.png`` with atomic write-then-rename,
so concurrent builders never observe partial files and repeated builds
issue zero service requests.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Mapping, Protocol, Sequence

import numpy as np
from PIL import Image

from . import blockio
from .attention import (
    AgingDirection,
    FeatureBlock,
    KVPair,
    SiteKey,
    compute_aging_direction,
)
from .engine import Conditioning, StepSchedule, TrajectoryState, integrate
from .pipeline import FeatureCache, InversionRecorder
from .toybackend import SplitMix64

ClusterSource = Literal["external_service", "synthetic", "user_supplied"]

DEFAULT_CLUSTER_SIZE = 4


class ImageGenClient(Protocol):
    """External age-progression/diversification service."""

    def generate(self, image_b64: str, age: float, seed: int) -> str:
        """Return a base64 PNG for the requested (image, age, seed)."""
        ...


@dataclass(frozen=True)
class AgeCluster:
    """A set of same-resolution image files depicting the subject at one age."""

    age: float
    images: tuple[Path, ...]
    source: ClusterSource

    def __post_init__(self) -> None:
        if not self.images:
            raise ValueError("cluster must contain at least one image")
        sizes = {Image.open(p).size for p in self.images}
        if len(sizes) > 1:
            raise ValueError(f"cluster images disagree on resolution: {sorted(sizes)}")


def input_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _synthetic_member(source: Image.Image, age: float, index: int, seed: int) -> bytes:
    # Seeded per-pixel jitter; distinct (age, index, seed) give distinct images.
    rng = SplitMix64((int(age) << 32) ^ (index << 8) ^ seed ^ 0xC1D2E3F4)
    arr = np.asarray(source.convert("L"), dtype=np.int16)
    noise = np.empty(arr.shape, dtype=np.int16)
    for r in range(arr.shape[0]):
        for c in range(arr.shape[1]):
            noise[r, c] = int(rng.uniform() * 41) - 20
    jittered = np.clip(arr + noise, 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(jittered, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def build_clusters(
    input_image,
    ages: Sequence[float],
    size: int = DEFAULT_CLUSTER_SIZE,
    source: ClusterSource = "synthetic",
    client: ImageGenClient | None = None,
    cache_dir="cache/sar",
    seed: int = 0,
    user_dirs: Mapping[float, Path] | None = None,
) -> list[AgeCluster]:
    """One cluster of ``size`` members per requested age."""
    if size < 1:
        raise ValueError("cluster size must be >= 1")
    input_image = Path(input_image)
    cache_root = Path(cache_dir) / input_hash(input_image)
    clusters: list[AgeCluster] = []

    if source == "user_supplied":
        if user_dirs is None:
            raise ValueError("user_supplied clusters need user_dirs mapping age -> directory")
        for age in ages:
            members = tuple(sorted(Path(user_dirs[age]).glob("*.png")))
            clusters.append(AgeCluster(age=age, images=members, source="user_supplied"))
        return clusters

    if source == "external_service" and client is None:
        raise ValueError("external_service clusters need a configured client")

    source_img = Image.open(input_image) if source == "synthetic" else None
    input_b64 = base64.b64encode(input_image.read_bytes()).decode("ascii")
    for age in ages:
        age_dir = cache_root / f"{age:g}"
        age_dir.mkdir(parents=True, exist_ok=True)
        members: list[Path] = []
        missing: list[int] = []
        for index in range(size):
            member = age_dir / f"{index}.png"
            if not member.exists():
                if source == "synthetic":
                    _atomic_write(member, _synthetic_member(source_img, age, index, seed))
                else:
                    try:
                        payload = client.generate(input_b64, age, seed=seed * 1000 + index)
                        _atomic_write(member, base64.b64decode(payload))
                    except Exception:
                        missing.append(index)
                        continue
            members.append(member)
        if missing:
            raise RuntimeError(f"cluster age {age:g}: service failed for members {missing}")
        clusters.append(AgeCluster(age=age, images=tuple(members), source=source))
    return clusters


@dataclass(frozen=True)
class ClusterFeatures:
    """Inversion features per cluster member, plus their entrywise mean."""

    age: float
    per_image: tuple[Mapping[SiteKey, KVPair], ...]
    mean: Mapping[SiteKey, KVPair]


def _invert_for_features(image_path, backend, schedule: StepSchedule) -> Mapping[SiteKey, KVPair]:
    cache = FeatureCache.for_backend(backend, schedule.id(), schedule.steps)
    recorder = InversionRecorder(cache)
    latent = backend.encode_image(image_path)
    start = TrajectoryState(latent=latent, t=0.0)
    integrate(start, schedule, "inversion", backend, Conditioning(""), hook=recorder)
    return {site: cache.fetch(*site) for site in cache.sites()}


def _mean_features(maps: Sequence[Mapping[SiteKey, KVPair]]) -> dict[SiteKey, KVPair]:
    out: dict[SiteKey, KVPair] = {}
    for site in maps[0]:
        layout = maps[0][site].k.layout
        k = np.mean(np.stack([m[site].k.values for m in maps]), axis=0, dtype=np.float64)
        v = np.mean(np.stack([m[site].v.values for m in maps]), axis=0, dtype=np.float64)
        out[site] = KVPair(
            FeatureBlock(k.astype(np.float32), layout),
            FeatureBlock(v.astype(np.float32), layout),
        )
    return out


def extract_cluster_features(cluster: AgeCluster, backend, schedule: StepSchedule) -> ClusterFeatures:
    """Run every member through recorded inversion (empty prompt) and average."""
    per_image = tuple(_invert_for_features(p, backend, schedule) for p in cluster.images)
    return ClusterFeatures(age=cluster.age, per_image=per_image, mean=_mean_features(per_image))


def make_direction(cluster_high: ClusterFeatures, cluster_low: ClusterFeatures) -> AgingDirection:
    """Aging direction mean(high) - mean(low) with bounds from the cluster ages."""
    if cluster_low.age >= cluster_high.age:
        raise ValueError("cluster_high must be the older cluster")
    return compute_aging_direction(
        list(cluster_high.per_image),
        list(cluster_low.per_image),
        age_low=cluster_low.age,
        age_high=cluster_high.age,
    )


def synthesize_direction(
    input_image,
    backend,
    schedule: StepSchedule,
    age_low: float = 30.0,
    age_high: float = 70.0,
    size: int = 2,
    cache_dir="cache/sar",
    seed: int = 0,
) -> AgingDirection:
    """Offline path: synthetic clusters at the two reference ages."""
    low, high = build_clusters(
        input_image, [age_low, age_high], size=size, source="synthetic", cache_dir=cache_dir, seed=seed
    )
    feats_low = extract_cluster_features(low, backend, schedule)
    feats_high = extract_cluster_features(high, backend, schedule)
    return make_direction(feats_high, feats_low)


DIRECTION_MANIFEST = "direction.json"


def save_direction(direction: AgingDirection, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sites = list(direction.sites())
    layouts = {}
    for step, layer in sites:
        entry = direction.deltas(step, layer)
        blockio.write_block(directory / f"dk_{step:04d}_{layer:02d}.bin", entry.k)
        blockio.write_block(directory / f"dv_{step:04d}_{layer:02d}.bin", entry.v)
        layouts[f"{layer}"] = blockio.layout_to_json(entry.k.layout)
    manifest = {
        "version": 1,
        "age_low": direction.age_low,
        "age_high": direction.age_high,
        "sites": [[s, l] for s, l in sites],
        "layouts": layouts,
    }
    tmp = directory / (DIRECTION_MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(directory / DIRECTION_MANIFEST)


def load_direction(directory) -> AgingDirection:
    directory = Path(directory)
    manifest = json.loads((directory / DIRECTION_MANIFEST).read_text())
    delta_k: dict[SiteKey, FeatureBlock] = {}
    delta_v: dict[SiteKey, FeatureBlock] = {}
    for step, layer in manifest["sites"]:
        layout = blockio.layout_from_json(manifest["layouts"][str(layer)])
        delta_k[(step, layer)] = blockio.read_block(directory / f"dk_{step:04d}_{layer:02d}.bin", layout)
        delta_v[(step, layer)] = blockio.read_block(directory / f"dv_{step:04d}_{layer:02d}.bin", layout)
    return AgingDirection(
        delta_k=delta_k,
        delta_v=delta_v,
        age_low=manifest["age_low"],
        age_high=manifest["age_high"],
    )
