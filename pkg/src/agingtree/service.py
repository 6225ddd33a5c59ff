"""HTTP surface over one tree directory.

Endpoints (JSON unless noted):

    GET    /tree              full manifest, as stored on disk
    POST   /branch            {parent_id, condition, age_target, overrides?}
                              -> {job_id, node_id}
    GET    /jobs/{job_id}     -> {state, error?}
    GET    /image/{node_id}   PNG bytes
    GET    /conditions        -> {conditions: [...]}
    DELETE /node/{node_id}    prunes the subtree

When the browser explorer's build output is present (frontend/dist), the
explorer is additionally served at /ui.  Reads are safe concurrently;
writes funnel through the tree service's single job worker and manifest
lock.
"""

from __future__ import annotations

from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, ConfigDict, Field

from .prompts import AGE_MAX, AGE_MIN
from .tree import BranchRequest, TreeService, TreeStore


class BranchOverrides(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int | None = None
    steps: int | None = Field(default=None, ge=1, le=512)
    preset: str | None = None
    key_gain: float | None = None
    from_root: bool = False


class BranchBody(BaseModel):
    model_config = ConfigDict(extra="forbid")

    parent_id: str
    condition: str = ""
    age_target: float = Field(ge=AGE_MIN, le=AGE_MAX)
    overrides: BranchOverrides | None = None


class BranchAccepted(BaseModel):
    job_id: str
    node_id: str


class JobStatus(BaseModel):
    state: str
    error: str | None = None


class ConditionsResponse(BaseModel):
    conditions: list[str]


class DeleteResponse(BaseModel):
    deleted: list[str]


def default_ui_dir() -> "Path | None":
    """The checked-out explorer, when its build output exists."""
    candidate = Path(__file__).resolve().parents[2] / "frontend"
    return candidate if (candidate / "dist" / "main.js").exists() else None


def build_app(tree_dir, backend=None, start_worker: bool = True, ui_dir=None) -> FastAPI:
    store = TreeStore(tree_dir)
    service = TreeService(store, backend=backend)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if start_worker:
            service.start_worker()
        try:
            yield
        finally:
            service.stop_worker()

    app = FastAPI(title="agingtree", lifespan=lifespan)
    app.state.service = service

    @app.get("/tree")
    def get_tree() -> dict:
        return service.manifest.to_json()

    @app.post("/branch", response_model=BranchAccepted)
    def post_branch(body: BranchBody) -> BranchAccepted:
        overrides = body.overrides or BranchOverrides()
        request = BranchRequest(
            parent_id=body.parent_id,
            condition=body.condition,
            age_target=body.age_target,
            seed=overrides.seed,
            steps=overrides.steps,
            preset=overrides.preset,
            key_gain=overrides.key_gain,
            from_root=overrides.from_root,
        )
        try:
            job_id, node_id = service.create_branch(request)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return BranchAccepted(job_id=job_id, node_id=node_id)

    @app.get("/jobs/{job_id}", response_model=JobStatus)
    def get_job(job_id: str) -> JobStatus:
        try:
            state, error = service.job_status(job_id)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        return JobStatus(state=state, error=error)

    @app.get("/image/{node_id}")
    def get_image(node_id: str) -> Response:
        if node_id not in service.manifest.nodes:
            raise HTTPException(status_code=404, detail=f"unknown node {node_id!r}")
        path = store.image_path(node_id)
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"node {node_id!r} has no image yet")
        return Response(content=path.read_bytes(), media_type="image/png")

    @app.get("/conditions", response_model=ConditionsResponse)
    def get_conditions() -> ConditionsResponse:
        return ConditionsResponse(conditions=service.catalog.keys())

    @app.delete("/node/{node_id}", response_model=DeleteResponse)
    def delete_node(node_id: str) -> DeleteResponse:
        try:
            deleted = service.delete_node(node_id)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except RuntimeError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        return DeleteResponse(deleted=deleted)

    ui = Path(ui_dir) if ui_dir is not None else default_ui_dir()
    if ui is not None:
        app.mount("/ui", StaticFiles(directory=ui, html=True), name="ui")

    return app


def serve(tree_dir, host: str = "127.0.0.1", port: int = 8000) -> None:
    import uvicorn

    uvicorn.run(build_app(tree_dir), host=host, port=port)
