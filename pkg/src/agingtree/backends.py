"""Backend selection: the built-in toy model plus optional external adapters.

A backend bundles the velocity field with image encoding/decoding.  Real
pretrained backbones register a factory under a name and are selected with
the config key ``backend = external:<name>`` or the ``AMK_BACKEND``
environment variable; when nothing usable is configured the rest of the
package still works against the toy backend.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .attention import TokenLayout
from .toybackend import ToyBackend, ToyModelSpec

ENV_BACKEND = "AMK_BACKEND"


class BackendProbeError(RuntimeError):
    """A backend was configured but cannot be constructed."""


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    latent_shape: tuple[int, ...]
    attention_sites: tuple[tuple[int, TokenLayout], ...]
    supports_hooks: bool = True
    supports_text_mask: bool = True

    def __post_init__(self) -> None:
        if self.supports_hooks and not self.attention_sites:
            raise ValueError("hook-capable backend must declare attention sites")


class ImageBackend(Protocol):
    """Velocity backend that can also move between images and latents."""

    name: str

    @property
    def latent_shape(self) -> tuple[int, ...]: ...

    def attention_sites(self) -> Sequence[tuple[int, TokenLayout]]: ...

    def velocity(self, latent, t, conditioning, hook_sink) -> np.ndarray: ...

    def encode_image(self, path) -> np.ndarray: ...

    def decode_latent(self, latent) -> bytes: ...


BackendFactory = Callable[[int], ImageBackend]

_registry: dict[str, BackendFactory] = {}


def register_backend(name: str, factory: BackendFactory) -> None:
    if name in _registry:
        raise ValueError(f"backend {name!r} is already registered")
    _registry[name] = factory


def unregister_backend(name: str) -> None:
    _registry.pop(name, None)


def registered_backends() -> list[str]:
    return sorted(_registry)


def _selection(config_value: str | None, env=None) -> str | None:
    env = os.environ if env is None else env
    return env.get(ENV_BACKEND) or config_value


def create_backend(selection: str | None = None, seed: int = 0, env=None) -> ImageBackend:
    """Instantiate the selected backend; defaults to the toy model."""
    choice = _selection(selection, env) or "toy"
    if choice == "toy":
        return ToyBackend(ToyModelSpec(seed=seed))
    if choice.startswith("external:"):
        name = choice.split(":", 1)[1]
        factory = _registry.get(name)
        if factory is None:
            raise BackendProbeError(
                f"backend {choice!r} is configured but no factory named {name!r} is registered"
            )
        try:
            return factory(seed)
        except Exception as exc:
            raise BackendProbeError(f"backend {choice!r} failed to construct: {exc}") from exc
    raise BackendProbeError(f"unknown backend selection {choice!r}; use 'toy' or 'external:<name>'")


def describe(backend: ImageBackend) -> BackendDescriptor:
    return BackendDescriptor(
        name=getattr(backend, "name", backend.__class__.__name__),
        latent_shape=tuple(backend.latent_shape),
        attention_sites=tuple(backend.attention_sites()),
    )


def probe(selection: str | None = None, seed: int = 0, env=None) -> BackendDescriptor | None:
    """Descriptor of the configured backend; None when nothing is configured.

    Absence is not an error.  A configured-but-broken backend raises a
    :class:`BackendProbeError` naming the missing piece.
    """
    choice = _selection(selection, env)
    if choice is None:
        return None
    return describe(create_backend(choice, seed=seed, env=env or {}))


@contextmanager
def generation(backend: ImageBackend):
    """Serialise one in-flight generation on backends that expose a gate."""
    gate = getattr(backend, "gate", None)
    if gate is None:
        yield backend
        return
    with gate:
        yield backend


def roundtrip_psnr(backend: ImageBackend, image_path) -> float:
    """Decode-encode reconstruction quality in dB; inf for exact codecs.

    Reported (not asserted) by backend smoke tests: real backbones land at
    finite values, the toy codec is exact.
    """
    from PIL import Image
    import io

    latent = backend.encode_image(image_path)
    decoded = backend.decode_latent(latent)
    original = np.asarray(Image.open(image_path).convert("L"), dtype=np.float64)
    recovered = np.asarray(Image.open(io.BytesIO(decoded)), dtype=np.float64)
    mse = float(np.mean((original - recovered) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(255.0**2 / mse)
