"""HTTP service exposing live sessions to clients.

Transport notes
---------------
* One worker owns each session's mutations (a per-session lock); overlay and
  slice reads are served from immutable snapshots published after every
  ask/answer, so readers never observe a torn count field.
* Every response carries the session id and a per-session monotonically
  increasing ``seq``.
* Slice overlays are run-length encoded, value-complete (zero runs included):
  for a plane with in-plane axes (u, v) -- the two lattice axes other than
  the slicing axis, in x<y<z order -- ``rows[v]`` lists ``[start, length,
  value]`` runs along u.  Decoding must reproduce the slice bit-exactly.

Endpoints: POST /sessions; GET /sessions/{id}/question; POST
/sessions/{id}/answer; GET /sessions/{id}/overlay?axis&slice; GET
/sessions/{id}/slice?axis&slice; GET /sessions/{id}/final; GET
/sessions/{id}/seeds; GET /sessions/{id}/telemetry; GET /healthz.
"""

from __future__ import annotations

import base64
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from .posterior import BetaConfig
from .probmap import ProbabilityMap, clamp_probabilities, synthetic_blurred
from .sampler import SamplerConfig
from .session import BudgetExhausted, Session, SessionConverged
from .shapemodel import ShapeModel, load_model, train
from .volume import BinaryMask, ScalarField3D, dice, load_mhd

_AXES = {"x": 0, "y": 1, "z": 2}


def encode_slice_rle(plane: np.ndarray) -> list[list[list[int]]]:
    """Value-complete RLE of a 2D integer plane indexed [u, v]."""
    u_size, v_size = plane.shape
    rows = []
    for v in range(v_size):
        col = plane[:, v]
        changes = np.flatnonzero(np.diff(col)) + 1
        starts = np.concatenate(([0], changes))
        ends = np.concatenate((changes, [u_size]))
        rows.append([[int(s), int(e - s), int(col[s])] for s, e in zip(starts, ends)])
    return rows


def decode_slice_rle(rows: list[list[list[int]]], u_size: int) -> np.ndarray:
    out = np.zeros((u_size, len(rows)), dtype=np.int32)
    for v, runs in enumerate(rows):
        filled = 0
        for start, length, value in runs:
            if start != filled:
                raise ValueError(f"non-contiguous runs in row {v}")
            out[start : start + length, v] = value
            filled = start + length
        if filled != u_size:
            raise ValueError(f"row {v} covers {filled} of {u_size} columns")
    return out


def _extract_plane(volume: np.ndarray, axis: int, index: int) -> np.ndarray:
    plane = np.take(volume, index, axis=axis)
    return plane  # remaining axes already in ascending order


@dataclass
class Registry:
    """Named inputs the service can build sessions from."""

    volumes: dict[str, ScalarField3D] = field(default_factory=dict)
    maps: dict[str, ProbabilityMap] = field(default_factory=dict)
    models: dict[str, ShapeModel] = field(default_factory=dict)
    ground_truths: dict[str, BinaryMask] = field(default_factory=dict)


def build_demo_registry(dims=(48, 48, 48), seed: int = 0) -> Registry:
    """Self-contained phantom dataset: train a small prior, blur the held-out
    ground truth into the probability map."""
    from .phantom import PhantomConfig, make_family

    cfg = PhantomConfig(rel_radius=(0.12, 0.15), bump_amplitude=0.015, max_tilt=0.3, center_jitter=0.03)
    family = make_family(dims, 9, seed, cfg)
    model = train([m for m, _ in family[:8]], n=3)
    gt, vol = family[8]
    registry = Registry()
    registry.volumes["demo"] = vol
    registry.maps["demo"] = synthetic_blurred(gt, 1.5)
    registry.models["demo"] = model
    registry.ground_truths["demo"] = gt
    return registry


def build_registry_from_dir(data_dir: str | Path) -> Registry:
    """Load {volumes,maps,gts,models}/ subdirectories into a registry."""
    data_dir = Path(data_dir)
    registry = Registry()
    for path in sorted((data_dir / "volumes").glob("*.mhd")) if (data_dir / "volumes").exists() else []:
        registry.volumes[path.stem] = load_mhd(path)
    for path in sorted((data_dir / "maps").glob("*.mhd")) if (data_dir / "maps").exists() else []:
        registry.maps[path.stem] = clamp_probabilities(load_mhd(path))
    for path in sorted((data_dir / "gts").glob("*.mhd")) if (data_dir / "gts").exists() else []:
        registry.ground_truths[path.stem] = load_mhd(path)
    if (data_dir / "models").exists():
        for path in sorted((data_dir / "models").iterdir()):
            if (path / "model.json").exists():
                registry.models[path.name] = load_model(path)
    return registry


class CreateSessionRequest(BaseModel):
    map_id: str
    model_id: str
    volume_id: str | None = None
    gt_id: str | None = None
    question_budget: int = 30
    rng_seed: int = 0
    burn_in: int = 100
    thin: int = 25
    n_samples: int = 15
    beta0: float = 1.0
    learning_rate: float = 3.0
    beta_max: float = 4.0


class AnswerRequest(BaseModel):
    label: int


class _Runtime:
    """A session plus its lock, sequence counter, and read snapshot."""

    def __init__(self, session: Session) -> None:
        self.session = session
        self.lock = threading.Lock()
        self._seq = 0
        self.snapshot: dict = session.overlay_snapshot()
        self.final = None

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def publish(self) -> None:
        self.snapshot = self.session.overlay_snapshot()


def create_app(registry: Registry, ui_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="askseg session service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    runtimes: dict[str, _Runtime] = {}

    def get_runtime(session_id: str) -> _Runtime:
        runtime = runtimes.get(session_id)
        if runtime is None:
            raise HTTPException(404, f"unknown session {session_id}")
        return runtime

    def parse_plane(runtime: _Runtime, axis: str, index: int):
        if axis not in _AXES:
            raise HTTPException(400, f"axis must be one of x, y, z, got {axis!r}")
        ax = _AXES[axis]
        dims = runtime.session.dims
        if not (0 <= index < dims[ax]):
            raise HTTPException(400, f"slice {index} outside [0, {dims[ax]})")
        return ax

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest):
        if req.map_id not in registry.maps:
            raise HTTPException(404, f"unknown map id {req.map_id!r}")
        if req.model_id not in registry.models:
            raise HTTPException(404, f"unknown model id {req.model_id!r}")
        volume = None
        if req.volume_id is not None:
            if req.volume_id not in registry.volumes:
                raise HTTPException(404, f"unknown volume id {req.volume_id!r}")
            volume = registry.volumes[req.volume_id]
        gt = None
        if req.gt_id is not None:
            if req.gt_id not in registry.ground_truths:
                raise HTTPException(404, f"unknown ground truth id {req.gt_id!r}")
            gt = registry.ground_truths[req.gt_id]

        session = Session(
            registry.maps[req.map_id],
            registry.models[req.model_id],
            sampler_cfg=SamplerConfig(
                burn_in=req.burn_in, thin=req.thin, n_samples=req.n_samples, rng_seed=req.rng_seed
            ),
            beta_cfg=BetaConfig(req.beta0, req.learning_rate, req.beta_max),
            question_budget=req.question_budget,
            rng_seed=req.rng_seed,
            volume=volume,
            ground_truth=gt,
        )
        session_id = uuid.uuid4().hex[:12]
        runtime = _Runtime(session)
        runtimes[session_id] = runtime
        return {
            "session_id": session_id,
            "dims": list(session.dims),
            "question_budget": session.question_budget,
            "n_candidates": session.sampler_cfg.n_samples,
            "seq": runtime.next_seq(),
        }

    @app.get("/sessions/{session_id}/question")
    def get_question(session_id: str):
        runtime = get_runtime(session_id)
        with runtime.lock:
            try:
                view = runtime.session.ask()
            except SessionConverged:
                return {
                    "session_id": session_id,
                    "converged": True,
                    "final_available": True,
                    "seq": runtime.next_seq(),
                }
            except BudgetExhausted:
                return {
                    "session_id": session_id,
                    "budget_exhausted": True,
                    "final_available": True,
                    "seq": runtime.next_seq(),
                }
            runtime.publish()
            return {"session_id": session_id, **view.to_json(), "seq": runtime.next_seq()}

    @app.post("/sessions/{session_id}/answer")
    def post_answer(session_id: str, req: AnswerRequest):
        runtime = get_runtime(session_id)
        if req.label not in (0, 1):
            raise HTTPException(400, f"label must be 0 or 1, got {req.label}")
        with runtime.lock:
            try:
                record = runtime.session.answer(req.label)
            except Exception as exc:
                raise HTTPException(409, str(exc)) from exc
            runtime.publish()
            return {
                "session_id": session_id,
                "k": record["k"],
                "beta": record["beta"],
                "epsilon": record["epsilon"],
                "remaining": runtime.session.question_budget - runtime.session.n_answered,
                "seq": runtime.next_seq(),
            }

    @app.get("/sessions/{session_id}/overlay")
    def get_overlay(session_id: str, axis: str = "z", slice: int = 0):
        runtime = get_runtime(session_id)
        ax = parse_plane(runtime, axis, slice)
        snap = runtime.snapshot
        dims = runtime.session.dims
        plane_dims = [d for i, d in enumerate(dims) if i != ax]
        counts_rle = None
        best_rle = None
        if snap["counts"] is not None:
            counts_rle = encode_slice_rle(_extract_plane(snap["counts"], ax, slice))
        if snap["best_mask"] is not None:
            best_rle = encode_slice_rle(_extract_plane(snap["best_mask"], ax, slice))
        question = snap["question"]
        marker = None
        if question is not None and question[ax] == slice:
            marker = [c for i, c in enumerate(question) if i != ax]
        return {
            "session_id": session_id,
            "axis": axis,
            "slice": slice,
            "dims": plane_dims,
            "n_candidates": snap["n_candidates"],
            "counts_rle": counts_rle,
            "best_mask_rle": best_rle,
            "question": marker,
            "seq": runtime.next_seq(),
        }

    @app.get("/sessions/{session_id}/slice")
    def get_slice(session_id: str, axis: str = "z", slice: int = 0):
        runtime = get_runtime(session_id)
        ax = parse_plane(runtime, axis, slice)
        volume = runtime.session.volume
        if volume is None:
            raise HTTPException(404, "session has no intensity volume")
        plane = np.ascontiguousarray(_extract_plane(volume.data, ax, slice), dtype="<f4")
        return {
            "session_id": session_id,
            "axis": axis,
            "slice": slice,
            "dims": list(plane.shape),
            "values_b64": base64.b64encode(plane.tobytes(order="F")).decode("ascii"),
            "value_range": [float(volume.data.min()), float(volume.data.max())],
            "seq": runtime.next_seq(),
        }

    @app.get("/sessions/{session_id}/seeds")
    def get_seeds(session_id: str):
        runtime = get_runtime(session_id)
        return {
            "session_id": session_id,
            "seeds": [
                {"voxel": list(s.location), "label": s.label, "k": s.question_index}
                for s in runtime.session.seeds
            ],
            "seq": runtime.next_seq(),
        }

    @app.get("/sessions/{session_id}/telemetry")
    def get_telemetry(session_id: str):
        runtime = get_runtime(session_id)
        return {
            "session_id": session_id,
            "telemetry": runtime.session.telemetry,
            "beta": runtime.session.beta,
            "k": runtime.session.n_answered,
            "seq": runtime.next_seq(),
        }

    @app.get("/sessions/{session_id}/final")
    def get_final(session_id: str):
        runtime = get_runtime(session_id)
        with runtime.lock:
            if runtime.final is None:
                result = runtime.session.final_segmentation()
                dsc = None
                if runtime.session.ground_truth is not None:
                    dsc = dice(result.mask, runtime.session.ground_truth)
                runtime.final = {
                    "state": result.state_json(),
                    "score": result.score,
                    "violated_count": result.violated_count,
                    "dsc": dsc,
                    "mask_rle": [
                        encode_slice_rle(_extract_plane(result.mask.data, 2, z))
                        for z in range(runtime.session.dims[2])
                    ],
                }
            return {
                "session_id": session_id,
                **runtime.final,
                "beta": runtime.session.beta,
                "seq": runtime.next_seq(),
            }

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
