"""HTTP binding of :class:`FederationServer` (FastAPI, all routes under ``/api/v1``)."""

from __future__ import annotations

import json

from fastapi import FastAPI, Header, Request, Response
from fastapi.responses import JSONResponse

from ..errors import (
    ArchMismatch,
    Conflict,
    FedIncrError,
    InvalidRecord,
    NotFound,
    PackageError,
    Unauthorized,
)
from .service import FederationServer

PREFIX = "/api/v1"
OCTET = "application/octet-stream"

# first match wins, so subclasses precede their bases
STATUS_FOR = (
    (Unauthorized, 401),
    (NotFound, 404),
    (Conflict, 409),
    (ArchMismatch, 409),
    (PackageError, 422),
    (InvalidRecord, 422),
)


def status_for(exc: Exception) -> int:
    for cls, code in STATUS_FOR:
        if isinstance(exc, cls):
            return code
    return 500


def create_app(server: FederationServer) -> FastAPI:
    app = FastAPI(title="fedincr federation server")
    app.state.server = server

    @app.exception_handler(FedIncrError)
    async def _error(request: Request, exc: FedIncrError):
        return JSONResponse({"error": type(exc).__name__, "detail": str(exc)}, status_code=status_for(exc))

    @app.get(PREFIX + "/models/{task}/latest")
    def get_latest(task: str, x_api_key: str | None = Header(None)):
        return Response(server.get_latest(task, x_api_key), media_type=OCTET)

    @app.get(PREFIX + "/models/{task}/versions")
    def list_versions(task: str, x_api_key: str | None = Header(None)):
        return {"task_id": task, "versions": server.list_history(task, x_api_key)}

    @app.get(PREFIX + "/models/{task}/{version:int}")
    def get_version(task: str, version: int, x_api_key: str | None = Header(None)):
        return Response(server.get_version(task, version, x_api_key), media_type=OCTET)

    @app.post(PREFIX + "/models/{task}")
    async def post_model(task: str, request: Request, x_api_key: str | None = Header(None)):
        body = await request.body()
        server.authenticate(x_api_key)
        if not server.registry.has_task(task) and server.api_keys.get(x_api_key) == "admin":
            version = server.publish_initial(task, body, x_api_key)
            return JSONResponse({"version": version}, status_code=201)
        job_id = server.submit_model(task, body, x_api_key)
        return JSONResponse({"job_id": job_id}, status_code=202)

    @app.get(PREFIX + "/jobs/{job_id}")
    def get_job(job_id: str, x_api_key: str | None = Header(None)):
        return server.job_status(job_id, x_api_key)

    @app.post(PREFIX + "/stats")
    async def post_stats(request: Request, x_api_key: str | None = Header(None)):
        server.authenticate(x_api_key)
        try:
            record = json.loads(await request.body())
        except (ValueError, UnicodeDecodeError) as exc:
            raise InvalidRecord(f"body is not JSON: {exc}") from exc
        server.record_stats(record, x_api_key)
        return Response(status_code=204)

    return app
