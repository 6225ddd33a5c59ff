"""Command-line surface.

``edit`` and ``ablate`` run the pipeline in-process; the ``tree``
subcommands manage a tree directory, either directly or (with --server)
as a thin client of a running tree service.
"""

from __future__ import annotations

import json
import os
import sys
import time
from pathlib import Path

import click

from . import __version__, backends
from .config import load_config
from .editing import (
    EditSettings,
    PRESETS,
    direction_for_edit,
    invert_image,
    ladder_settings,
    run_edit,
)
from .engine import StepSchedule
from .evalkit import MetricRecord, build_report, write_records
from .prompts import EditRequest, condition_catalog, refine_prompt
from .tree import BranchRequest, TreeService, TreeStore, render_ascii


def _fail(message: str) -> None:
    raise click.ClickException(message)


def _write_atomic(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


@click.group()
@click.version_option(version=__version__)
def main() -> None:
    """Conditional face-aging edits and the aging-tree service."""


@main.command()
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("--age", type=float, required=True, help="Target age in years (20-90).")
@click.option("--condition", default="", help="Lifestyle/environment condition key or free text.")
@click.option("--subject", default="person", show_default=True, help="Short subject description.")
@click.option("--preset", default=None, help=f"Mixing preset: {', '.join(sorted(PRESETS))}.")
@click.option("--g", "key_gain", type=float, default=None, help="Key-modulation gain.")
@click.option("--seed", type=int, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--reference-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory holding a saved aging direction.")
@click.option("--refiner", type=click.Choice(["template", "llm"]), default=None)
def edit(image, age, condition, subject, preset, key_gain, seed, steps, out, config_path,
         reference_dir, refiner) -> None:
    """Edit IMAGE toward a target age under a condition."""
    cfg = load_config(
        {"preset": preset, "key_gain": key_gain, "seed": seed, "steps": steps, "refiner": refiner},
        config_path=config_path,
    )
    try:
        request = EditRequest(subject_desc=subject, age_target=age, condition=condition)
    except ValueError as exc:
        _fail(str(exc))
    try:
        backend = backends.create_backend(cfg.backend, seed=cfg.seed)
        settings = EditSettings(preset=cfg.preset, steps=cfg.steps, seed=cfg.seed, key_gain=cfg.key_gain)
        refined = refine_prompt(request, mode=cfg.refiner)
        if refined.fallback_warning:
            click.echo("warning: refiner unreachable, fell back to template", err=True)
        direction = direction_for_edit(
            backend, image, settings,
            cache_dir=Path(out).parent / "cache" / "sar",
            reference_dir=reference_dir,
        )
        outcome = run_edit(backend, image, refined.prompt, settings, age_target=age, direction=direction)
    except Exception as exc:
        _fail(f"edit failed: {exc}")

    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(out_path, outcome.image_bytes)
    sidecar = {
        "tool_version": __version__,
        "input": str(image),
        "backend": cfg.backend,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "preset": cfg.preset,
        "key_gain": cfg.key_gain,
        "subject": subject,
        "age_target": age,
        "condition": condition,
        "refined_prompt": outcome.prompt,
        "refiner": refined.mode_used,
        "reg_weight": outcome.reg_weight,
        "metrics": {"clip_t": None, "age_pred": None, "id_sim": None},
    }
    _write_atomic(out_path.with_suffix(out_path.suffix + ".json"),
                  (json.dumps(sidecar, indent=2) + "\n").encode())
    click.echo(f"wrote {out_path}")


@main.command()
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--age", type=float, default=60.0, show_default=True)
@click.option("--condition", default="alcoholism", show_default=True)
@click.option("--subject", default="person", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
def ablate(image, out_dir, age, condition, subject, seed, steps, config_path) -> None:
    """Run every mixing preset on IMAGE and emit a comparison report."""
    cfg = load_config({"seed": seed, "steps": steps}, config_path=config_path)
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    try:
        request = EditRequest(subject_desc=subject, age_target=age, condition=condition)
        backend = backends.create_backend(cfg.backend, seed=cfg.seed)
        base = EditSettings(preset="full", steps=cfg.steps, seed=cfg.seed, key_gain=cfg.key_gain)
        refined = refine_prompt(request, mode="template")
        schedule = StepSchedule.uniform(base.steps)
        noise, cache = invert_image(backend, image, schedule)
        direction = direction_for_edit(backend, image, base, cache_dir=out_path / "cache" / "sar")

        groups = []
        for preset_id, label, settings in ladder_settings(base):
            outcome = run_edit(
                backend, image, refined.prompt, settings,
                age_target=age,
                direction=direction if PRESETS[preset_id][1] else None,
                cache=cache, noise=noise,
            )
            _write_atomic(out_path / f"{preset_id}.png", outcome.image_bytes)
            records = [MetricRecord(item_id=preset_id, age_target=age)]
            groups.append((label, records))
            sidecar = {
                "preset": preset_id, "label": label, "seed": cfg.seed, "steps": cfg.steps,
                "backend": cfg.backend, "age_target": age, "condition": condition,
                "refined_prompt": refined.prompt,
            }
            _write_atomic(out_path / f"{preset_id}.json", (json.dumps(sidecar, indent=2) + "\n").encode())

        report = build_report(groups)
        _write_atomic(out_path / "report.txt", report.render_text().encode())
        _write_atomic(out_path / "report.csv", report.to_csv().encode())
        write_records(out_path / "records.jsonl", [rec for _, recs in groups for rec in recs])
    except click.ClickException:
        raise
    except Exception as exc:
        _fail(f"ablation failed: {exc}")
    click.echo(report.render_text(), nl=False)
    click.echo(f"wrote {out_path}")


@main.group()
def tree() -> None:
    """Manage an aging-tree directory."""


@tree.command("init")
@click.argument("tree_dir", type=click.Path(file_okay=False))
@click.option("--image", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--subject", default="person", show_default=True)
@click.option("--age", type=float, required=True, help="Age of the subject in the input image.")
@click.option("--backend", default=None)
@click.option("--seed", type=int, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--preset", default=None)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
def tree_init(tree_dir, image, subject, age, backend, seed, steps, preset, config_path) -> None:
    """Create a tree with IMAGE as its root."""
    cfg = load_config(
        {"backend": backend, "seed": seed, "steps": steps, "preset": preset},
        config_path=config_path,
    )
    store = TreeStore(tree_dir)
    try:
        manifest = store.create(
            image, subject, age,
            backend_id=cfg.backend,
            settings={"seed": cfg.seed, "steps": cfg.steps, "preset": cfg.preset, "key_gain": cfg.key_gain},
        )
    except (FileExistsError, IOError) as exc:
        _fail(str(exc))
    click.echo(f"initialized tree at {tree_dir} (root {manifest.root().id})")


@tree.command("branch")
@click.argument("tree_dir", type=click.Path(exists=True, file_okay=False), required=False)
@click.option("--server", default=None, help="Base URL of a running tree service.")
@click.option("--parent", default=None, help="Parent node id (defaults to the root).")
@click.option("--condition", required=True)
@click.option("--age", type=float, required=True)
@click.option("--preset", default=None)
@click.option("--seed", type=int, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--from-root", is_flag=True, default=False,
              help="Edit the root image instead of the parent's image.")
def tree_branch(tree_dir, server, parent, condition, age, preset, seed, steps, from_root) -> None:
    """Grow one branch and wait for it to finish."""
    if server:
        _branch_remote(server, parent, condition, age, preset, seed, steps, from_root)
        return
    if tree_dir is None:
        _fail("either TREE_DIR or --server is required")
    store = TreeStore(tree_dir)
    try:
        service = TreeService(store)
        parent_id = parent or service.manifest.root().id
        request = BranchRequest(
            parent_id=parent_id, condition=condition, age_target=age,
            preset=preset, seed=seed, steps=steps, from_root=from_root,
        )
        job_id, node_id = service.create_branch(request)
        service.run_pending()
    except (KeyError, ValueError) as exc:
        _fail(str(exc))
    state, error = service.job_status(job_id)
    if state != "done":
        _fail(f"branch {node_id} {state}: {error}")
    click.echo(f"branch {node_id} done")


def _branch_remote(server, parent, condition, age, preset, seed, steps, from_root) -> None:
    import httpx

    base = server.rstrip("/")
    with httpx.Client(timeout=30.0) as client:
        if parent is None:
            manifest = client.get(f"{base}/tree").json()
            roots = [n["id"] for n in manifest["nodes"] if n.get("parent_id") is None]
            parent = roots[0]
        overrides = {k: v for k, v in
                     {"preset": preset, "seed": seed, "steps": steps, "from_root": from_root or None}.items()
                     if v is not None}
        response = client.post(f"{base}/branch", json={
            "parent_id": parent, "condition": condition, "age_target": age,
            **({"overrides": overrides} if overrides else {}),
        })
        if response.status_code >= 400:
            _fail(f"server rejected branch: {response.status_code} {response.text}")
        accepted = response.json()
        while True:
            status = client.get(f"{base}/jobs/{accepted['job_id']}").json()
            if status["state"] in ("done", "failed"):
                break
            time.sleep(0.2)
    if status["state"] != "done":
        _fail(f"branch {accepted['node_id']} failed: {status.get('error')}")
    click.echo(f"branch {accepted['node_id']} done")


@tree.command("serve")
@click.argument("tree_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def tree_serve(tree_dir, host, port) -> None:
    """Serve the tree over HTTP for the browser explorer."""
    from .service import serve

    serve(tree_dir, host=host, port=port)


@tree.command("show")
@click.argument("tree_dir", type=click.Path(exists=True, file_okay=False))
def tree_show(tree_dir) -> None:
    """Print the tree as indented text."""
    try:
        manifest = TreeStore(tree_dir).load()
    except FileNotFoundError:
        _fail(f"no manifest in {tree_dir}")
    click.echo(render_ascii(manifest), nl=False)


@main.command()
def conditions() -> None:
    """List the known condition keys."""
    for key in condition_catalog():
        click.echo(key)


if __name__ == "__main__":
    sys.exit(main())
