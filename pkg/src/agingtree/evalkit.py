"""Metric adapters and report rendering for edited images.

Three axes: prompt alignment (CLIP-T style cosine between image and text
embeddings), age accuracy (mean absolute error against an age estimator),
and identity preservation (cosine against reference face embeddings).
The actual embedding/estimation models are pluggable adapters; when an
adapter is absent a metric reports "unavailable" (None) instead of
crashing, and report tables render it as an em dash.

Results are exchanged as line-delimited JSON records; reports render as an
aligned text table or CSV with stable row order.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

UNAVAILABLE = None


class EmbeddingScorer(Protocol):
    def embed_image(self, image) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


class FaceEmbedder(Protocol):
    def embed(self, image) -> np.ndarray: ...


class AgeEstimator(Protocol):
    def predict_age(self, image) -> float: ...


@dataclass
class MetricRecord:
    """Per-image metric row; optional fields stay None when unmeasured."""

    item_id: str
    age_target: float
    clip_t: float | None = None
    age_pred: float | None = None
    id_sim: float | None = None

    def __post_init__(self) -> None:
        if self.id_sim is not None and not -1.0 <= self.id_sim <= 1.0:
            raise ValueError(f"id_sim must lie in [-1, 1], got {self.id_sim}")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def clip_t(image, prompt: str, scorer: EmbeddingScorer | None) -> float | None:
    """Image-text alignment; None when no scorer adapter is configured."""
    if scorer is None:
        return UNAVAILABLE
    return cosine(scorer.embed_image(image), scorer.embed_text(prompt))


def age_mae(records: Sequence[MetricRecord]) -> float:
    """Mean absolute error between predicted and target ages."""
    if not records:
        raise ValueError("age_mae needs at least one record")
    errors = []
    for record in records:
        if record.age_pred is None:
            raise ValueError(f"record {record.item_id!r} carries no age prediction")
        errors.append(abs(record.age_pred - record.age_target))
    return float(np.mean(errors))


def id_sim(image, references: Sequence, embedder: FaceEmbedder | None) -> float | None:
    """Mean cosine against reference images; None without an embedder."""
    if not references:
        raise ValueError("id_sim needs at least one reference image")
    if embedder is None:
        return UNAVAILABLE
    target = embedder.embed(image)
    return float(np.mean([cosine(target, embedder.embed(ref)) for ref in references]))


# --- report rendering -------------------------------------------------------

_DASH = "—"


@dataclass(frozen=True)
class ReportRow:
    label: str
    clip_t: float | None
    age_mae: float | None
    id_sim: float | None


def _aggregate(label: str, records: Sequence[MetricRecord]) -> ReportRow:
    clips = [r.clip_t for r in records if r.clip_t is not None]
    ages = [r for r in records if r.age_pred is not None]
    ids = [r.id_sim for r in records if r.id_sim is not None]
    return ReportRow(
        label=label,
        clip_t=float(np.mean(clips)) if clips else None,
        age_mae=age_mae(ages) if ages else None,
        id_sim=float(np.mean(ids)) if ids else None,
    )


@dataclass(frozen=True)
class Report:
    rows: tuple[ReportRow, ...]

    def render_text(self) -> str:
        header = ("Method", "CLIP-T", "Age_MAE", "ID_sim")
        cells = [
            (
                row.label,
                _fmt(row.clip_t, 3),
                _fmt(row.age_mae, 1),
                _fmt(row.id_sim, 2),
            )
            for row in self.rows
        ]
        width0 = max(len(header[0]), *(len(c[0]) for c in cells)) if cells else len(header[0])
        widths = (width0, 7, 7, 6)
        lines = [
            "  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths))),
            "  ".join("-" * w for w in widths),
        ]
        for cell in cells:
            lines.append(
                "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cell, widths)))
            )
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "clip_t", "age_mae", "id_sim"])
        for row in self.rows:
            writer.writerow(
                [
                    row.label,
                    "" if row.clip_t is None else f"{row.clip_t:.3f}",
                    "" if row.age_mae is None else f"{row.age_mae:.1f}",
                    "" if row.id_sim is None else f"{row.id_sim:.2f}",
                ]
            )
        return buf.getvalue()


def _fmt(value: float | None, digits: int) -> str:
    return _DASH if value is None else f"{value:.{digits}f}"


def build_report(groups: Sequence[tuple[str, Sequence[MetricRecord]]]) -> Report:
    """One report row per (label, records) group, in the order given."""
    if not groups:
        raise ValueError("report needs at least one group")
    return Report(rows=tuple(_aggregate(label, records) for label, records in groups))


def write_records(path, records: Iterable[MetricRecord]) -> None:
    lines = [json.dumps(asdict(r), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_records(path) -> list[MetricRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(MetricRecord(**json.loads(line)))
    return records
