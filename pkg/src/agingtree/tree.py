"""The aging tree: node model, persistent store, and branch job execution.

A tree lives in one directory: ``manifest.json`` (nodes, jobs, settings),
``images/<node-id>.png``, ``features/<node-id>/<schedule>/`` (inversion
caches, reused across all branches of a node) and ``reference/`` (cached
aging directions).  Manifest writes are atomic (temp file, fsync, rename)
and re-validated on every write, so a killed process never leaves a
corrupt or cyclic manifest behind.

Jobs run on a single FIFO worker: branch generation is serialized because
backends allow one in-flight generation.  On restart, pending jobs are
re-queued and jobs that were mid-flight are marked failed.
"""

from __future__ import annotations

import json
import os
import queue
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal

import numpy as np

from . import backends
from .editing import (
    EditSettings,
    PRESETS,
    age_reg_for,
    denoise,
    invert_image,
    preset_config,
)
from .engine import StepSchedule, TrajectoryState
from .pipeline import FeatureCache
from .prompts import AGE_MAX, AGE_MIN, EditRequest, default_catalog, refine_prompt
from .reference import load_direction, save_direction, synthesize_direction

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

JobState = Literal["pending", "running", "done", "failed"]

_NODE_FIELDS = {
    "id",
    "parent_id",
    "age",
    "condition",
    "refined_prompt",
    "image_ref",
    "metrics",
    "created_at",
    "job_state",
    "error",
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _new_id(prefix: str) -> str:
    return f"{prefix}-{uuid.uuid4().hex[:12]}"


@dataclass
class TreeNode:
    id: str
    parent_id: str | None
    age: float
    condition: str
    refined_prompt: str
    image_ref: str
    job_state: JobState
    created_at: str = field(default_factory=_now)
    metrics: dict | None = None
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        data = {
            "id": self.id,
            "parent_id": self.parent_id,
            "age": self.age,
            "condition": self.condition,
            "refined_prompt": self.refined_prompt,
            "image_ref": self.image_ref,
            "metrics": self.metrics,
            "created_at": self.created_at,
            "job_state": self.job_state,
            "error": self.error,
        }
        data.update(self.extra)
        return data

    @classmethod
    def from_json(cls, data: dict) -> "TreeNode":
        extra = {k: v for k, v in data.items() if k not in _NODE_FIELDS}
        return cls(
            id=data["id"],
            parent_id=data.get("parent_id"),
            age=float(data["age"]),
            condition=data.get("condition", ""),
            refined_prompt=data.get("refined_prompt", ""),
            image_ref=data["image_ref"],
            job_state=data.get("job_state", "done"),
            created_at=data.get("created_at", _now()),
            metrics=data.get("metrics"),
            error=data.get("error"),
            extra=extra,
        )


@dataclass
class TreeManifest:
    subject_desc: str
    backend_id: str
    nodes: dict[str, TreeNode]
    jobs: dict[str, str]  # job id -> node id
    settings: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION
    extra: dict = field(default_factory=dict)

    def root(self) -> TreeNode:
        roots = [n for n in self.nodes.values() if n.parent_id is None]
        if len(roots) != 1:
            raise ValueError(f"manifest must contain exactly one root, found {len(roots)}")
        return roots[0]

    def children(self, node_id: str) -> list[TreeNode]:
        return sorted(
            (n for n in self.nodes.values() if n.parent_id == node_id),
            key=lambda n: n.created_at,
        )

    def subtree_ids(self, node_id: str) -> list[str]:
        out = [node_id]
        for child in self.children(node_id):
            out.extend(self.subtree_ids(child.id))
        return out

    def validate(self) -> None:
        root = self.root()
        if root.condition != "":
            raise ValueError("root node must carry no condition")
        seen: set[str] = set()
        for node in self.nodes.values():
            if node.id in seen:
                raise ValueError(f"duplicate node id {node.id}")
            seen.add(node.id)
            if node.parent_id is not None and node.parent_id not in self.nodes:
                raise ValueError(f"node {node.id} references missing parent {node.parent_id}")
        # Walk each lineage up to the root; revisiting a node means a cycle.
        for node in self.nodes.values():
            hops, current = 0, node
            while current.parent_id is not None:
                current = self.nodes[current.parent_id]
                hops += 1
                if hops > len(self.nodes):
                    raise ValueError("parent links form a cycle")

    def to_json(self) -> dict:
        data = {
            "version": self.version,
            "subject_desc": self.subject_desc,
            "backend_id": self.backend_id,
            "settings": self.settings,
            "nodes": [node.to_json() for node in sorted(self.nodes.values(), key=lambda n: n.created_at)],
            "jobs": self.jobs,
        }
        data.update(self.extra)
        return data

    @classmethod
    def from_json(cls, data: dict) -> "TreeManifest":
        known = {"version", "subject_desc", "backend_id", "settings", "nodes", "jobs"}
        nodes = {n["id"]: TreeNode.from_json(n) for n in data["nodes"]}
        return cls(
            subject_desc=data.get("subject_desc", ""),
            backend_id=data.get("backend_id", "toy"),
            nodes=nodes,
            jobs=dict(data.get("jobs", {})),
            settings=dict(data.get("settings", {})),
            version=int(data.get("version", MANIFEST_VERSION)),
            extra={k: v for k, v in data.items() if k not in known},
        )


# Seam for fault-injection tests: writes the payload into an open file.
def _write_payload(handle, payload: bytes) -> None:
    handle.write(payload)


def _atomic_write_manifest(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + f".tmp-{uuid.uuid4().hex[:8]}")
    try:
        with open(tmp, "wb") as handle:
            _write_payload(handle, payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink(missing_ok=True)


class TreeStore:
    """Directory-backed manifest persistence with a write lock."""

    def __init__(self, root_dir):
        self.root_dir = Path(root_dir)
        self._lock = threading.RLock()

    @property
    def manifest_path(self) -> Path:
        return self.root_dir / MANIFEST_NAME

    @property
    def images_dir(self) -> Path:
        return self.root_dir / "images"

    @property
    def features_dir(self) -> Path:
        return self.root_dir / "features"

    @property
    def reference_dir(self) -> Path:
        return self.root_dir / "reference"

    def exists(self) -> bool:
        return self.manifest_path.exists()

    def image_path(self, node_id: str) -> Path:
        return self.images_dir / f"{node_id}.png"

    def create(
        self,
        input_image,
        subject_desc: str,
        age: float,
        backend_id: str = "toy",
        settings: dict | None = None,
    ) -> TreeManifest:
        input_image = Path(input_image)
        if self.exists():
            raise FileExistsError(f"{self.manifest_path} already exists; refusing to overwrite")
        if not input_image.is_file():
            raise IOError(f"cannot read input image {input_image}")
        self.root_dir.mkdir(parents=True, exist_ok=True)
        self.images_dir.mkdir(exist_ok=True)
        self.features_dir.mkdir(exist_ok=True)
        root = TreeNode(
            id=_new_id("node"),
            parent_id=None,
            age=float(age),
            condition="",
            refined_prompt="",
            image_ref="",
            job_state="done",
        )
        root.image_ref = f"images/{root.id}.png"
        self.image_path(root.id).write_bytes(input_image.read_bytes())
        manifest = TreeManifest(
            subject_desc=subject_desc,
            backend_id=backend_id,
            nodes={root.id: root},
            jobs={},
            settings=dict(settings or {}),
        )
        self.save(manifest)
        return manifest

    def load(self) -> TreeManifest:
        manifest = TreeManifest.from_json(json.loads(self.manifest_path.read_text()))
        manifest.validate()
        return manifest

    def save(self, manifest: TreeManifest) -> None:
        manifest.validate()
        payload = json.dumps(manifest.to_json(), indent=2).encode("utf-8")
        with self._lock:
            _atomic_write_manifest(self.manifest_path, payload)


@dataclass(frozen=True)
class BranchRequest:
    parent_id: str
    condition: str
    age_target: float
    seed: int | None = None
    steps: int | None = None
    preset: str | None = None
    key_gain: float | None = None
    from_root: bool = False


class TreeService:
    """Branch orchestration over one tree directory.

    HTTP handlers call :meth:`create_branch` / :meth:`job_status` /
    :meth:`delete_node`; job execution happens on the single worker thread
    (serve mode) or synchronously through :meth:`run_pending` (CLI mode).
    """

    def __init__(self, store: TreeStore, backend=None, refine_mode: str = "template"):
        self.store = store
        self.manifest = store.load()
        self.refine_mode = refine_mode
        self.catalog = default_catalog()
        seed = int(self.manifest.settings.get("seed", 0))
        self._backend = backend or backends.create_backend(self.manifest.backend_id, seed=seed)
        self._queue: queue.Queue[str | None] = queue.Queue()
        self._worker: threading.Thread | None = None
        self._state_lock = threading.RLock()
        self._recover()

    # --- lifecycle --------------------------------------------------------

    def _recover(self) -> None:
        dirty = False
        for node in self.manifest.nodes.values():
            if node.job_state == "running":
                node.job_state = "failed"
                node.error = "interrupted by restart"
                dirty = True
        if dirty:
            self.store.save(self.manifest)
        for job_id, node_id in self.manifest.jobs.items():
            if self.manifest.nodes[node_id].job_state == "pending":
                self._queue.put(job_id)

    def start_worker(self) -> None:
        if self._worker is not None:
            return
        self._worker = threading.Thread(target=self._worker_loop, name="tree-jobs", daemon=True)
        self._worker.start()

    def stop_worker(self) -> None:
        if self._worker is None:
            return
        self._queue.put(None)
        self._worker.join(timeout=30)
        self._worker = None

    def _worker_loop(self) -> None:
        while True:
            job_id = self._queue.get()
            if job_id is None:
                return
            try:
                self.run_job(job_id)
            except Exception:
                # run_job records the failure on the node; never kill the worker.
                pass

    # --- defaults ---------------------------------------------------------

    def _settings_for(self, req: BranchRequest) -> EditSettings:
        base = self.manifest.settings
        return EditSettings(
            preset=base.get("preset", "full") if req.preset is None else req.preset,
            steps=int(base.get("steps", 30) if req.steps is None else req.steps),
            seed=int(base.get("seed", 0) if req.seed is None else req.seed),
            key_gain=float(base.get("key_gain", 1.0) if req.key_gain is None else req.key_gain),
        )

    # --- public operations --------------------------------------------------

    def create_branch(self, req: BranchRequest) -> tuple[str, str]:
        """Validate, append a pending node, persist, enqueue. Returns (job id, node id)."""
        with self._state_lock:
            parent = self.manifest.nodes.get(req.parent_id)
            if parent is None:
                raise KeyError(f"unknown parent node {req.parent_id!r}")
            if parent.job_state != "done":
                raise ValueError(f"parent node {parent.id} is {parent.job_state}, not done")
            if not AGE_MIN <= req.age_target <= AGE_MAX:
                raise ValueError(f"age_target must be within [{AGE_MIN:.0f}, {AGE_MAX:.0f}]")
            settings = self._settings_for(req)  # validates preset/steps early
            node = TreeNode(
                id=_new_id("node"),
                parent_id=parent.id,
                age=float(req.age_target),
                condition=req.condition,
                refined_prompt="",
                image_ref="",
                job_state="pending",
                extra={
                    "request": {
                        "seed": settings.seed,
                        "steps": settings.steps,
                        "preset": settings.preset,
                        "key_gain": settings.key_gain,
                        "from_root": req.from_root,
                    }
                },
            )
            node.image_ref = f"images/{node.id}.png"
            job_id = _new_id("job")
            self.manifest.nodes[node.id] = node
            self.manifest.jobs[job_id] = node.id
            self.store.save(self.manifest)
        self._queue.put(job_id)
        return job_id, node.id

    def job_status(self, job_id: str) -> tuple[str, str | None]:
        node_id = self.manifest.jobs.get(job_id)
        if node_id is None:
            raise KeyError(f"unknown job {job_id!r}")
        node = self.manifest.nodes[node_id]
        return node.job_state, node.error

    def run_pending(self) -> None:
        """Drain the queue synchronously (CLI mode).

        Failures are recorded on the node, exactly as in worker mode.
        """
        while True:
            try:
                job_id = self._queue.get_nowait()
            except queue.Empty:
                return
            if job_id is None:
                continue
            try:
                self.run_job(job_id)
            except Exception:
                pass

    def delete_node(self, node_id: str) -> list[str]:
        with self._state_lock:
            node = self.manifest.nodes.get(node_id)
            if node is None:
                raise KeyError(f"unknown node {node_id!r}")
            if node.parent_id is None:
                raise ValueError("refusing to delete the root node")
            doomed = self.manifest.subtree_ids(node_id)
            active = [nid for nid in doomed if self.manifest.nodes[nid].job_state in ("pending", "running")]
            if active:
                raise RuntimeError(f"subtree has active jobs on nodes {active}")
            for nid in doomed:
                self.manifest.nodes.pop(nid)
                image = self.store.image_path(nid)
                if image.exists():
                    image.unlink()
            self.manifest.jobs = {j: n for j, n in self.manifest.jobs.items() if n in self.manifest.nodes}
            self.store.save(self.manifest)
        return doomed

    # --- job execution ------------------------------------------------------

    def _set_state(self, node: TreeNode, state: JobState, error: str | None = None) -> None:
        with self._state_lock:
            node.job_state = state
            node.error = error
            self.store.save(self.manifest)

    def _inversion_for(self, node: TreeNode, schedule: StepSchedule):
        """Load or compute (and persist) the recorded inversion of a node's image."""
        cache_dir = self.store.features_dir / node.id / schedule.id()
        image = self.store.root_dir / node.image_ref
        noise_path = cache_dir / "noise.npy"
        if (cache_dir / "cache.json").exists() and noise_path.exists():
            cache = FeatureCache.load(cache_dir)
            noise_latent = np.load(noise_path)
            return TrajectoryState(latent=noise_latent, t=1.0), cache
        noise, cache = invert_image(self._backend, image, schedule)
        cache_dir.mkdir(parents=True, exist_ok=True)
        cache.save(cache_dir)
        tmp = noise_path.with_suffix(".npy.tmp")
        with open(tmp, "wb") as fh:
            np.save(fh, noise.latent)
        os.replace(tmp, noise_path)
        return noise, cache

    def _direction_for(self, base_node: TreeNode, settings: EditSettings, schedule: StepSchedule):
        if not PRESETS[settings.preset][1]:
            return None
        ref_dir = self.store.reference_dir / base_node.id / schedule.id()
        if (ref_dir / "direction.json").exists():
            return load_direction(ref_dir)
        direction = synthesize_direction(
            self.store.root_dir / base_node.image_ref,
            self._backend,
            schedule,
            cache_dir=self.store.reference_dir / "clusters",
            seed=settings.seed,
        )
        save_direction(direction, ref_dir)
        return direction

    def run_job(self, job_id: str) -> None:
        node_id = self.manifest.jobs.get(job_id)
        if node_id is None:
            raise KeyError(f"unknown job {job_id!r}")
        node = self.manifest.nodes[node_id]
        if node.job_state != "pending":
            return
        self._set_state(node, "running")
        try:
            self._execute_branch(node)
            self._set_state(node, "done")
        except Exception as exc:
            self._set_state(node, "failed", error=f"{type(exc).__name__}: {exc}")
            raise

    def _execute_branch(self, node: TreeNode) -> None:
        request = node.extra.get("request", {})
        settings = EditSettings(
            preset=request.get("preset", "full"),
            steps=int(request.get("steps", 30)),
            seed=int(request.get("seed", 0)),
            key_gain=float(request.get("key_gain", 1.0)),
        )
        parent = self.manifest.nodes[node.parent_id]
        base = self.manifest.root() if request.get("from_root") else parent
        schedule = StepSchedule.uniform(settings.steps)

        refined = refine_prompt(
            EditRequest(
                subject_desc=self.manifest.subject_desc,
                age_target=node.age,
                condition=node.condition,
            ),
            mode=self.refine_mode,
            catalog=self.catalog,
        )
        node.refined_prompt = refined.prompt

        noise, cache = self._inversion_for(base, schedule)
        direction = self._direction_for(base, settings, schedule)
        reg = age_reg_for(direction, node.age)
        cfg = preset_config(settings.preset, key_gain=settings.key_gain, age_reg=reg)
        final = denoise(self._backend, noise, schedule, refined.prompt, cache, cfg)
        image_bytes = self._backend.decode_latent(final.latent)

        target = self.store.image_path(node.id)
        tmp = target.with_suffix(".png.tmp")
        tmp.write_bytes(image_bytes)
        os.replace(tmp, target)


def render_ascii(manifest: TreeManifest) -> str:
    """Indented text view of the tree, one node per line."""
    lines: list[str] = []

    def walk(node: TreeNode, prefix: str, is_last: bool) -> None:
        connector = "" if node.parent_id is None else ("`-- " if is_last else "|-- ")
        condition = node.condition or "(root)"
        lines.append(f"{prefix}{connector}{node.id}  age={node.age:g}  {condition}  [{node.job_state}]")
        children = manifest.children(node.id)
        for index, child in enumerate(children):
            extension = "" if node.parent_id is None else ("    " if is_last else "|   ")
            walk(child, prefix + extension, index == len(children) - 1)

    walk(manifest.root(), "", True)
    return "\n".join(lines) + "\n"
