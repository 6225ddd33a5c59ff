"""End-to-end single edits: invert, optionally regularize, denoise, decode.

This is the piece the CLI and the tree service share.  A named preset maps
onto a :class:`MixingConfig`; the ladder below orders the presets by
increasing machinery, which is also how ablation reports are laid out.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import backends
from .attention import AgingDirection, age_blend_weight
from .engine import Conditioning, StepSchedule, TrajectoryState, integrate
from .pipeline import AgeRegConfig, FeatureCache, MixingConfig, build_hooks
from .reference import synthesize_direction

# preset id -> (strategy, uses age regularization)
PRESETS: dict[str, tuple[str, bool]] = {
    "none": ("none", False),
    "replace_v": ("replace_v", False),
    "project_v": ("project_v", False),
    "project_v_mask": ("project_v_mask", False),
    "project_v_mask_keymod": ("project_v_mask_keymod", False),
    "full": ("project_v_mask_keymod", True),
}

# Ablation ladder: presets in report order with their display labels.
ABLATION_LADDER: tuple[tuple[str, str], ...] = (
    ("replace_v", "RF-Solver-Edit (baseline)"),
    ("project_v", "+ Att. Mixing (Value only)"),
    ("project_v_mask", "+ Text Embedding Masking"),
    ("project_v_mask_keymod", "+ Att. Mixing (Value & Key)"),
    ("full", "+ Simulated Aging Regularization"),
)


@dataclass(frozen=True)
class EditSettings:
    """Run-shaping knobs threaded from the CLI/service into one edit."""

    preset: str = "full"
    steps: int = 30
    seed: int = 0
    key_gain: float = 1.0
    projection_clamp: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def preset_config(
    preset: str,
    key_gain: float = 1.0,
    age_reg: AgeRegConfig | None = None,
    projection_clamp: tuple[float, float] | None = None,
) -> MixingConfig:
    """MixingConfig for a named preset; 'full' requires an age_reg."""
    try:
        strategy, wants_reg = PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
    if wants_reg and age_reg is None:
        raise ValueError(f"preset {preset!r} needs an aging direction (age_reg)")
    return MixingConfig(
        strategy=strategy,
        key_gain=key_gain,
        age_reg=age_reg if wants_reg else None,
        projection_clamp=projection_clamp,
    )


def invert_image(backend, image_path, schedule: StepSchedule) -> tuple[TrajectoryState, FeatureCache]:
    """Recorded inversion of an image file under the empty prompt."""
    cache = FeatureCache.for_backend(backend, schedule.id(), schedule.steps)
    recorder, _ = build_hooks(cache, MixingConfig())
    latent = backend.encode_image(image_path)
    with backends.generation(backend):
        noise = integrate(
            TrajectoryState(latent=latent, t=0.0),
            schedule,
            "inversion",
            backend,
            Conditioning(""),
            hook=recorder,
        )
    return noise, cache


def denoise(
    backend,
    noise: TrajectoryState,
    schedule: StepSchedule,
    prompt: str,
    cache: FeatureCache,
    cfg: MixingConfig,
) -> TrajectoryState:
    """Denoise from inverted noise with the editing mixer installed."""
    _, mixer = build_hooks(cache, cfg)
    with backends.generation(backend):
        return integrate(noise, schedule, "denoising", backend, Conditioning(prompt), hook=mixer)


@dataclass(frozen=True)
class EditOutcome:
    image_bytes: bytes
    final_latent: np.ndarray
    noise_latent: np.ndarray
    prompt: str
    reg_weight: float | None


def age_reg_for(
    direction: AgingDirection | None,
    age_target: float,
    clamp: bool = False,
) -> AgeRegConfig | None:
    if direction is None:
        return None
    weight = age_blend_weight(age_target, direction.age_low, direction.age_high, clamp=clamp)
    return AgeRegConfig(direction=direction, weight=weight)


def run_edit(
    backend,
    image_path,
    prompt: str,
    settings: EditSettings,
    age_target: float,
    direction: AgingDirection | None = None,
    cache: FeatureCache | None = None,
    noise: TrajectoryState | None = None,
) -> EditOutcome:
    """The whole pipeline for one edit.

    Pass ``cache``/``noise`` from a previous :func:`invert_image` call to
    reuse the inversion across several edits of the same source image.
    """
    schedule = StepSchedule.uniform(settings.steps)
    if cache is None or noise is None:
        noise, cache = invert_image(backend, image_path, schedule)
    reg = age_reg_for(direction, age_target)
    cfg = preset_config(
        settings.preset,
        key_gain=settings.key_gain,
        age_reg=reg,
        projection_clamp=settings.projection_clamp,
    )
    final = denoise(backend, noise, schedule, prompt, cache, cfg)
    return EditOutcome(
        image_bytes=backend.decode_latent(final.latent),
        final_latent=final.latent,
        noise_latent=noise.latent,
        prompt=prompt,
        reg_weight=reg.weight if reg else None,
    )


def direction_for_edit(
    backend,
    image_path,
    settings: EditSettings,
    cache_dir,
    reference_dir=None,
) -> AgingDirection | None:
    """Resolve the aging direction a preset needs, or None when unused.

    A saved direction directory wins; otherwise a synthetic one is built
    from the input image (offline, seeded).
    """
    if not PRESETS[settings.preset][1]:
        return None
    if reference_dir is not None:
        from .reference import load_direction

        return load_direction(reference_dir)
    schedule = StepSchedule.uniform(settings.steps)
    return synthesize_direction(
        image_path,
        backend,
        schedule,
        cache_dir=Path(cache_dir),
        seed=settings.seed,
    )


def ladder_settings(settings: EditSettings) -> list[tuple[str, str, EditSettings]]:
    """(preset id, display label, settings) for each rung of the ablation ladder."""
    return [
        (preset, label, replace(settings, preset=preset))
        for preset, label in ABLATION_LADDER
    ]
