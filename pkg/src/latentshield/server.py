"""Transport glue for the teleoperation protocol.

WebSocket endpoint at /ws (one TeleopSession per connection, requests handled
strictly in arrival order) plus an optional raw TCP listener speaking the same
newline-delimited JSON. Checkpoint data is loaded once and shared immutably.
"""

from __future__ import annotations

import asyncio
import logging
from pathlib import Path

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.staticfiles import StaticFiles

from . import grid as grid_mod
from . import nets, safety_rl
from .conformal import load_score_cache
from .config import RunConfig
from .latent import Encoder
from .teleop import TeleopAssets, TeleopSession

log = logging.getLogger(__name__)


def load_assets(nets_path, projector_path, cache_path, grid_path=None,
                cfg: RunConfig | None = None) -> TeleopAssets:
    cfg = cfg or RunConfig()
    fn = safety_rl.load_filter_nets(nets_path)
    projector = nets.load_net(projector_path) if projector_path else None
    if fn.use_projector and projector is not None:
        got = nets.net_checksum(projector)
        if got != fn.projector_checksum:
            raise ValueError("projector checkpoint does not match the filter nets "
                             f"({got[:12]}... vs {fn.projector_checksum[:12]}...)")
    cache = load_score_cache(cache_path)
    oracle = grid_mod.load_grid(grid_path) if grid_path else None
    encoder = Encoder(d_z=fn.d_z, bound=cfg.bound, seed=cfg.encoder_seed)
    return TeleopAssets(nets=fn, projector=projector, cache=cache, encoder=encoder,
                        params=cfg.dubins_params(), oracle_grid=oracle,
                        default_alpha=cfg.alpha, default_epsilon=cfg.epsilon)


def create_app(assets: TeleopAssets, static_dir=None) -> FastAPI:
    app = FastAPI(title="latentshield teleop")

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        session = TeleopSession(assets)
        try:
            while True:
                line = await ws.receive_text()
                await ws.send_text(session.handle_line(line))
        except WebSocketDisconnect:
            pass

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")
    return app


async def serve_tcp(assets: TeleopAssets, host: str, port: int):
    """Raw NDJSON-over-TCP listener sharing the same protocol core."""

    async def on_client(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        session = TeleopSession(assets)
        try:
            while True:
                line = await reader.readline()
                if not line:
                    break
                writer.write(session.handle_line(line.decode("utf-8")).encode("utf-8"))
                await writer.drain()
        finally:
            writer.close()

    server = await asyncio.start_server(on_client, host, port)
    log.info("tcp protocol listening on %s:%d", host, port)
    return server


def run_server(assets: TeleopAssets, host: str = "127.0.0.1", port: int = 8700,
               tcp_port: int | None = None, static_dir=None) -> None:
    import uvicorn

    app = create_app(assets, static_dir=static_dir)

    if tcp_port is not None:
        @app.on_event("startup")
        async def _start_tcp():
            app.state.tcp_server = await serve_tcp(assets, host, tcp_port)

    uvicorn.run(app, host=host, port=port, log_level="info")
