"""Deterministic miniature joint-attention velocity backend.

A few transformer-ish layers over [text | image] tokens, small enough that
every pipeline behaviour is testable at desk scale without model weights.
No claim of visual quality: the "images" are tiny grayscale grids whose
pixels map linearly onto the latent.

Weight generation is pinned to a SplitMix64 stream so any implementation
can reproduce the exact model:

    state <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z <- state
    z <- ((z XOR (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z <- ((z XOR (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    out <- z XOR (z >> 31)

Floats are drawn as ``(out >> 11) * 2^-53`` (uniform in [0, 1)); weights use
the symmetric variant ``2u - 1`` scaled by ``1/sqrt(fan_in)``.  Matrices are
filled row-major in declaration order, so a fixed spec yields bit-identical
weights on every platform.
"""

from __future__ import annotations

import hashlib
import io
import threading
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .attention import TokenLayout
from .engine import Conditioning, StepHookSink

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    """The documented 64-bit stream behind all toy-model randomness."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def symmetric(self) -> float:
        return 2.0 * self.uniform() - 1.0

    def matrix(self, rows: int, cols: int, scale: float) -> np.ndarray:
        out = np.empty((rows, cols), dtype=np.float32)
        for r in range(rows):
            for c in range(cols):
                out[r, c] = scale * self.symmetric()
        return out


def _text_seed(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class ToyModelSpec:
    layers: int = 2
    heads: int = 2
    head_dim: int = 8
    text_tokens: int = 4
    image_tokens: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("layers", "heads", "head_dim", "text_tokens", "image_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"ToyModelSpec.{name} must be >= 1")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    @property
    def total_tokens(self) -> int:
        return self.text_tokens + self.image_tokens

    @property
    def latent_shape(self) -> tuple[int, int]:
        return (self.image_tokens, self.model_dim)


def embed_prompt(text: str, spec: ToyModelSpec) -> np.ndarray:
    """Hash-based text-token payload in [-1, 1); the empty prompt is all zeros."""
    shape = (spec.text_tokens, spec.model_dim)
    if text == "":
        return np.zeros(shape, dtype=np.float32)
    rng = SplitMix64(_text_seed(text))
    out = np.empty(shape, dtype=np.float32)
    for r in range(shape[0]):
        for c in range(shape[1]):
            out[r, c] = rng.symmetric()
    return out


class ToyBackend:
    """Joint self-attention + MLP per layer, final tanh projection to the latent.

    Immutable after construction; concurrent read-only use is safe.  The
    ``gate`` lock serialises whole generations when a caller wants the
    one-in-flight discipline of real backbones.
    """

    name = "toy"

    def __init__(self, spec: ToyModelSpec | None = None):
        self.spec = spec or ToyModelSpec()
        self.gate = threading.Lock()
        d = self.spec.model_dim
        rng = SplitMix64(self.spec.seed ^ 0xA5A5A5A5A5A5A5A5)
        w_scale = 1.0 / np.sqrt(d)
        # Query/key projections run hotter than the rest so attention rows are
        # well separated; near-uniform attention would make key modulation a
        # no-op (softmax cancels a shift shared by all keys).
        qk_scale = 3.0 / np.sqrt(d)
        self._layers = []
        for _ in range(self.spec.layers):
            self._layers.append(
                {
                    "wq": rng.matrix(d, d, qk_scale),
                    "wk": rng.matrix(d, d, qk_scale),
                    "wv": rng.matrix(d, d, w_scale),
                    "wo": rng.matrix(d, d, w_scale),
                    "w1": rng.matrix(d, 2 * d, w_scale),
                    "b1": rng.matrix(1, 2 * d, 0.1)[0],
                    "w2": rng.matrix(2 * d, d, 1.0 / np.sqrt(2 * d)),
                    "b2": rng.matrix(1, d, 0.1)[0],
                }
            )
        self._pos = rng.matrix(self.spec.total_tokens, d, 1.0)
        self._time_lin = rng.matrix(1, d, 0.5)[0]
        self._time_sin = rng.matrix(1, d, 0.5)[0]
        self._w_out = rng.matrix(d, d, w_scale)
        self._prompt_cache: dict[str, np.ndarray] = {}

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return self.spec.latent_shape

    def attention_sites(self) -> list[tuple[int, TokenLayout]]:
        layout = TokenLayout(
            text_tokens=self.spec.text_tokens,
            image_tokens=self.spec.image_tokens,
            heads=self.spec.heads,
            head_dim=self.spec.head_dim,
        )
        return [(layer, layout) for layer in range(self.spec.layers)]

    def _prompt_tokens(self, text: str) -> np.ndarray:
        if text not in self._prompt_cache:
            self._prompt_cache[text] = embed_prompt(text, self.spec)
        return self._prompt_cache[text]

    def velocity(
        self,
        latent: np.ndarray,
        t: float,
        conditioning: Conditioning,
        hook_sink: StepHookSink | None,
    ) -> np.ndarray:
        spec = self.spec
        if latent.shape != spec.latent_shape:
            raise ValueError(f"latent shape {latent.shape}, expected {spec.latent_shape}")
        txt = self._prompt_tokens(conditioning.prompt_text if conditioning else "")
        h = np.concatenate([txt, latent.astype(np.float32)], axis=0)
        h = h + self._pos
        h = h + np.float32(t) * self._time_lin + np.float32(np.sin(np.pi * t)) * self._time_sin

        heads, head_dim = spec.heads, spec.head_dim
        for index, layer in enumerate(self._layers):
            q = (h @ layer["wq"]).reshape(-1, heads, head_dim).transpose(1, 0, 2)
            k = (h @ layer["wk"]).reshape(-1, heads, head_dim).transpose(1, 0, 2)
            v = (h @ layer["wv"]).reshape(-1, heads, head_dim).transpose(1, 0, 2)
            if hook_sink is not None:
                q, k, v = hook_sink(index, q, k, v)
            scores = np.einsum("htc,hsc->hts", q, k) * np.float32(1.0 / np.sqrt(head_dim))
            scores -= scores.max(axis=-1, keepdims=True)
            weights = np.exp(scores)
            weights /= weights.sum(axis=-1, keepdims=True)
            ctx = np.einsum("hts,hsc->htc", weights, v)
            ctx = ctx.transpose(1, 0, 2).reshape(spec.total_tokens, spec.model_dim)
            h = h + ctx @ layer["wo"]
            h = h + np.tanh(h @ layer["w1"] + layer["b1"]) @ layer["w2"] + layer["b2"]

        return np.tanh(h[spec.text_tokens :] @ self._w_out).astype(np.float32)

    # --- image <-> latent -------------------------------------------------
    # Toy latents ARE the image representation: one grayscale pixel per
    # latent entry, mapped linearly between [0, 255] and [-1, 1].

    def expected_image_size(self) -> tuple[int, int]:
        """(width, height) of an accepted input image."""
        return (self.spec.model_dim, self.spec.image_tokens)

    def encode_image(self, path) -> np.ndarray:
        try:
            img = Image.open(path)
        except (OSError, ValueError) as exc:
            raise IOError(f"cannot read image {path}: {exc}") from exc
        expected = self.expected_image_size()
        if img.size != expected:
            raise ValueError(
                f"image size {img.size} does not match backend; expected width x height {expected}"
            )
        arr = np.asarray(img.convert("L"), dtype=np.float32)
        return (arr / np.float32(127.5) - np.float32(1.0)).astype(np.float32)

    def decode_latent(self, latent: np.ndarray) -> bytes:
        if latent.shape != self.spec.latent_shape:
            raise ValueError(f"latent shape {latent.shape}, expected {self.spec.latent_shape}")
        clipped = np.clip(latent, -1.0, 1.0)
        pixels = np.round((clipped + 1.0) * 127.5).astype(np.uint8)
        img = Image.fromarray(pixels, mode="L")
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return buf.getvalue()


def build_toy_backend(spec: ToyModelSpec | None = None) -> ToyBackend:
    return ToyBackend(spec)


def make_toy_input(path, spec: ToyModelSpec | None = None, seed: int = 0) -> None:
    """Write a seeded grayscale PNG of the size the toy backend accepts."""
    spec = spec or ToyModelSpec()
    rng = SplitMix64(seed ^ 0x5EED1A6E)
    width, height = spec.model_dim, spec.image_tokens
    pixels = np.empty((height, width), dtype=np.uint8)
    for r in range(height):
        for c in range(width):
            pixels[r, c] = int(rng.uniform() * 256) & 0xFF
    Image.fromarray(pixels, mode="L").save(path, format="PNG")
