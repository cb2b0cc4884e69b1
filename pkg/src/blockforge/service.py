"""HTTP editing service for one built scene.

A single :class:`SceneSession` owns the scene store and the loaded models.
Two locks split responsibilities: mutations of the scene (expand, generate,
layout writes) serialize on the writer ``lock``, while conflict decisions and
job bookkeeping use the short-lived ``_meta`` mutex, so a request is answered
immediately even while a long mutation is running.  Expansions run on a
bounded FIFO worker pool and are tracked as jobs; block generation is
synchronous.  Conflicts are decided at request time: a block that is
populated, or already claimed by a queued or running job, answers 409.
"""

from __future__ import annotations

import json
import queue
import threading
import traceback
from dataclasses import replace

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel

from .latent_diffusion import LayoutDocument
from .mesh_geometry import parse_block_id
from .pipeline import BlockPopulatedError, SceneStore
from .scene_builder import GridCoord, SceneModels


class SceneSession:
    """Shared state behind the API: store, models, jobs, and the locks."""

    def __init__(
        self,
        store: SceneStore,
        models: SceneModels,
        *,
        workers: int = 1,
        queue_limit: int = 8,
    ):
        self.store = store
        self.models = models
        self.lock = threading.Lock()  # serializes scene mutations
        self._meta = threading.Lock()  # guards claims, jobs, and the queue
        self.claims: set[GridCoord] = set()
        self.jobs: dict[str, dict] = {}
        self._job_counter = 0
        self._queue: queue.Queue = queue.Queue(maxsize=max(1, queue_limit))
        self._threads = [
            threading.Thread(target=self._worker, daemon=True, name=f"expand-{i}")
            for i in range(max(1, workers))
        ]
        for t in self._threads:
            t.start()

    # -- job machinery -------------------------------------------------------

    def _worker(self) -> None:
        while True:
            job = self._queue.get()
            if job is None:
                return
            job["status"] = "running"
            try:
                with self.lock:
                    result = self.store.expand_block(
                        self.models,
                        job["coord"],
                        job["seed"],
                        layout_doc=job["layout"],
                    )
                job["result"] = result
                job["status"] = "done"
            except Exception as exc:  # jobs must never kill the worker
                job["error"] = f"{type(exc).__name__}: {exc}"
                job["status"] = "failed"
                traceback.print_exc()
            finally:
                with self._meta:
                    self.claims.discard(job["coord"])
                self._queue.task_done()

    def _probe_sources(self, coord: GridCoord) -> tuple[GridCoord, ...]:
        """Populated neighbors of ``coord``, planning it only on a throwaway
        copy of the grid; the real plan grows when the job actually runs."""
        grid = self.store.grid
        if coord not in grid.blocks:
            grid = replace(grid, blocks=dict(grid.blocks), records=dict(grid.records))
            grid.ensure_block(coord)
        return tuple(
            nb for nb in grid.neighbors(coord)
            if self.store.grid.records[nb].status != "empty"
        )

    def submit_expand(
        self, coord: GridCoord, seed: int, layout: LayoutDocument | None
    ) -> str:
        """Claim the block and enqueue the job; raises on conflict or overflow."""
        with self._meta:
            store = self.store
            planned = coord in store.grid.blocks
            if coord in self.claims or (planned and store.status(coord) != "empty"):
                block_id = ",".join(str(v) for v in coord)
                raise BlockPopulatedError(
                    f"block {block_id} is already populated or being expanded"
                )
            if not self._probe_sources(coord):
                block_id = ",".join(str(v) for v in coord)
                raise ValueError(
                    f"block {block_id} has no populated neighbor to expand from"
                )
            if store.conditional and layout is None:
                stored = store.read_layout(coord) if planned else None
                if stored is None:
                    block_id = ",".join(str(v) for v in coord)
                    raise LayoutRequiredError(
                        f"block {block_id} needs a layout: the scene uses the "
                        "layout-conditioned model"
                    )
            self._job_counter += 1
            job_id = f"j{self._job_counter:06d}"
            job = {
                "id": job_id,
                "coord": coord,
                "seed": seed,
                "layout": layout,
                "status": "queued",
                "result": None,
                "error": None,
            }
            try:
                self._queue.put_nowait(job)
            except queue.Full:
                raise QueueFullError(
                    f"expansion queue is full ({self._queue.maxsize} jobs); retry later"
                )
            self.jobs[job_id] = job
            self.claims.add(coord)
        return job_id

    def claim_for_generate(self, coord: GridCoord) -> None:
        """Claim an empty planned block for a synchronous generation."""
        with self._meta:
            if coord in self.claims or self.store.status(coord) != "empty":
                raise BlockPopulatedError(
                    f"block {self.store.grid.blocks[coord].id} is already "
                    "populated or being expanded"
                )
            self.claims.add(coord)

    def release(self, coord: GridCoord) -> None:
        with self._meta:
            self.claims.discard(coord)

    def shutdown(self) -> None:
        for _ in self._threads:
            self._queue.put(None)
        for t in self._threads:
            t.join(timeout=5)


class QueueFullError(RuntimeError):
    pass


class LayoutRequiredError(ValueError):
    pass


class GenerateRequest(BaseModel):
    block: str
    seed: int


class ExpandRequest(BaseModel):
    block: str
    seed: int
    layout: dict | None = None


def _job_view(job: dict) -> dict:
    return {
        "id": job["id"],
        "status": job["status"],
        "result": job["result"],
        "error": job["error"],
    }


def create_app(session: SceneSession) -> FastAPI:
    app = FastAPI(title="blockforge scene service")
    store = session.store

    def coord_or_404(block_id: str) -> GridCoord | JSONResponse:
        try:
            return store.coord_of(block_id)
        except KeyError:
            return JSONResponse({"detail": f"unknown block {block_id!r}"}, status_code=404)

    @app.get("/api/scene")
    def get_scene() -> dict:
        manifest = store.manifest  # commit() swaps the reference atomically
        return {"revision": int(manifest["revision"]), "manifest": manifest}

    @app.get("/api/categories")
    def get_categories() -> dict:
        return {"categories": list(store.manifest["categories"])}

    @app.get("/api/blocks/{block_id}/mesh")
    def get_mesh(block_id: str):
        coord = coord_or_404(block_id)
        if isinstance(coord, JSONResponse):
            return coord
        if store.status(coord) != "meshed":
            return JSONResponse(
                {"detail": f"block {block_id} has no mesh yet"}, status_code=404
            )
        return PlainTextResponse(
            store.mesh_file(coord).read_bytes(), media_type="text/plain"
        )

    @app.get("/api/blocks/{block_id}/layout")
    def get_layout(block_id: str):
        coord = coord_or_404(block_id)
        if isinstance(coord, JSONResponse):
            return coord
        body = store.read_layout(coord)
        if body is None:
            return JSONResponse(
                {"detail": f"block {block_id} has no layout"}, status_code=404
            )
        return Response(content=body, media_type="application/json")

    @app.put("/api/blocks/{block_id}/layout")
    async def put_layout(block_id: str, request: Request):
        coord = coord_or_404(block_id)
        if isinstance(coord, JSONResponse):
            return coord
        body = await request.body()
        try:
            with session.lock:
                revision = store.put_layout(coord, body)
        except (ValueError, KeyError) as exc:
            return JSONResponse({"detail": str(exc)}, status_code=422)
        return {"revision": revision}

    @app.post("/api/generate")
    def generate(req: GenerateRequest):
        coord = coord_or_404(req.block)
        if isinstance(coord, JSONResponse):
            return coord
        try:
            session.claim_for_generate(coord)
        except BlockPopulatedError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=409)
        try:
            with session.lock:
                result = store.generate_block(session.models, coord, req.seed)
        except BlockPopulatedError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=409)
        except ValueError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=422)
        finally:
            session.release(coord)
        return result

    @app.post("/api/expand")
    def expand(req: ExpandRequest):
        try:
            coord = parse_block_id(req.block)
        except ValueError:
            return JSONResponse(
                {"detail": f"block must be 'I,J,K', got {req.block!r}"}, status_code=422
            )
        layout = None
        if req.layout is not None:
            try:
                layout = LayoutDocument.from_json(json.dumps(req.layout))
            except (ValueError, KeyError, TypeError) as exc:
                return JSONResponse({"detail": f"invalid layout: {exc}"}, status_code=422)
        try:
            job_id = session.submit_expand(coord, req.seed, layout)
        except BlockPopulatedError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=409)
        except QueueFullError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=503)
        except ValueError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=422)
        return {"job": job_id}

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str):
        job = session.jobs.get(job_id)
        if job is None:
            return JSONResponse({"detail": f"unknown job {job_id!r}"}, status_code=404)
        return _job_view(job)

    return app
