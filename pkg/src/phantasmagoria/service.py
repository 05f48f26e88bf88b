"""HTTP service for running the forced-choice experiment.

A small FastAPI application wrapping :mod:`phantasmagoria.psychophysics`:
it creates sessions from a fixed candidate pool, serves each trial's
stimulus as PNG (mirrored on the fly when the trial calls for it),
records one response per trial, and exposes the aggregate analysis
behind an operator token.

Two hard rules shape every endpoint:

* Observer-facing payloads never contain ``expected_side`` or
  ``method_tag`` — the observer must not be able to learn the right
  answer from the wire protocol.
* Every response is appended to the event log *before* the HTTP
  acknowledgment goes out, so the log on disk is always at least as
  complete as what any client believes happened.

Retries are safe: re-posting the same choice to an answered trial is
acknowledged as already-recorded (without writing a second event),
while posting a *different* choice is a 409 conflict.

Operator notes (the parts the software cannot enforce): run observers
on a calibrated monitor, seated so the target squares span about 1.5
degrees of visual angle (roughly 50 cm viewing distance at the default
4x zoom on a ~96 dpi panel), in a dim room without time pressure.
"""

import os
import secrets
import threading

import numpy as np
from fastapi import FastAPI, Header, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel, Field

from . import psychophysics as psy
from . import stimulus

API_PREFIX = "/api/v1"
TOKEN_HEADER = "x-experiment-token"


class ExperimentStore:
    """All mutable state behind the service.

    Sessions are appended under a global registry lock; each session's
    responses are serialized through that session's own lock, so two
    observers never contend with each other.  Completed-session reads
    for the results endpoint take consistent snapshots under the same
    per-session locks.
    """

    def __init__(self, pool, event_log_path, results_token=None,
                 session_seed_base=None):
        pool = list(pool)
        if not pool:
            raise ValueError("candidate pool is empty")
        ids = [c.stimulus_id for c in pool]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate stimulus ids in candidate pool")
        for cand in pool:
            if cand.image is None:
                raise ValueError(
                    f"candidate {cand.stimulus_id} has no image to serve"
                )
        self.pool = pool
        self.images = {c.stimulus_id: c.image for c in pool}
        self.event_log_path = event_log_path
        self.results_token = results_token or secrets.token_urlsafe(16)
        self.sessions = {}
        self._locks = {}
        self._registry_lock = threading.Lock()
        # Base for per-session seeds when the client does not pick one;
        # None means draw fresh entropy per session.
        self._seed_base = session_seed_base
        self._session_counter = 0
        log_dir = os.path.dirname(os.path.abspath(event_log_path))
        os.makedirs(log_dir, exist_ok=True)

    def create_session(self, observer_id, seed=None):
        with self._registry_lock:
            if seed is None:
                if self._seed_base is not None:
                    seed = self._seed_base + self._session_counter
                else:
                    seed = secrets.randbits(31)
            self._session_counter += 1
            session = psy.build_session(
                self.pool, observer_id=observer_id, seed=int(seed),
                session_id=f"sess-{self._session_counter:04d}-"
                           f"{secrets.token_hex(4)}",
            )
            # Log before the session becomes visible to anyone.
            psy.log_session_created(self.event_log_path, session)
            self.sessions[session.session_id] = session
            self._locks[session.session_id] = threading.Lock()
            return session

    def get_session(self, session_id):
        with self._registry_lock:
            session = self.sessions.get(session_id)
        if session is None:
            raise KeyError(session_id)
        return session

    def lock_for(self, session_id):
        with self._registry_lock:
            return self._locks[session_id]


class CreateSessionRequest(BaseModel):
    observer_id: str = Field(default="anonymous", min_length=1,
                             max_length=128)
    seed: int | None = Field(default=None, ge=0, lt=2**63)


class ResponseBody(BaseModel):
    choice: str
    response_ms: float | None = Field(default=None, ge=0)


def _public_trial(session, index):
    """Trial metadata as the observer may see it.

    Deliberately omits expected_side, method_tag and the mirror flag —
    everything that would leak which answer counts as correct.
    """
    trial = session.trials[index]
    return {
        "index": index,
        "total": len(session.trials),
        "answered": trial.answered,
        "image_url": (f"{API_PREFIX}/sessions/{session.session_id}"
                      f"/trials/{index}/image.png"),
        "prompt": "Select the lighter square: left, right, or center "
                  "if you see no difference.",
        "choices": list(psy.CHOICES),
    }


def create_app(store, frontend_dir=None):
    """Build the FastAPI application around an ExperimentStore."""
    app = FastAPI(title="phantasmagoria experiment service", docs_url=None,
                  redoc_url=None)
    app.state.store = store

    def _session_or_404(session_id):
        try:
            return store.get_session(session_id)
        except KeyError:
            raise HTTPException(status_code=404,
                                detail=f"unknown session {session_id}")

    def _trial_or_404(session, index):
        if not 0 <= index < len(session.trials):
            raise HTTPException(
                status_code=404,
                detail=f"session has no trial {index}",
            )
        return session.trials[index]

    @app.post(API_PREFIX + "/sessions", status_code=201)
    def create_session(body: CreateSessionRequest):
        session = store.create_session(body.observer_id, seed=body.seed)
        return {
            "session_id": session.session_id,
            "trial_count": len(session.trials),
            "next_index": 0,
        }

    @app.get(API_PREFIX + "/sessions/{session_id}/progress")
    def progress(session_id: str):
        session = _session_or_404(session_id)
        with store.lock_for(session_id):
            next_index = session.first_unanswered()
            answered = session.answered_count
        return {
            "session_id": session_id,
            "total": len(session.trials),
            "answered": answered,
            "next_index": next_index,
            "complete": next_index is None,
        }

    @app.get(API_PREFIX + "/sessions/{session_id}/trials/{index}")
    def get_trial(session_id: str, index: int):
        session = _session_or_404(session_id)
        _trial_or_404(session, index)
        return _public_trial(session, index)

    @app.get(API_PREFIX + "/sessions/{session_id}/trials/{index}/image.png")
    def get_trial_image(session_id: str, index: int):
        session = _session_or_404(session_id)
        trial = _trial_or_404(session, index)
        image = store.images[trial.stimulus_id]
        if trial.mirrored:
            image = stimulus.mirror_horizontal(image)
        data = stimulus.encode_image_png(np.ascontiguousarray(image))
        return Response(content=data, media_type="image/png",
                        headers={"Cache-Control": "no-store"})

    @app.post(API_PREFIX + "/sessions/{session_id}/trials/{index}/response")
    def post_response(session_id: str, index: int, body: ResponseBody):
        session = _session_or_404(session_id)
        _trial_or_404(session, index)
        if body.choice not in psy.CHOICES:
            raise HTTPException(
                status_code=422,
                detail=f"choice must be one of {list(psy.CHOICES)}",
            )
        with store.lock_for(session_id):
            trial = session.trials[index]
            if trial.answered:
                if trial.choice == body.choice:
                    # Idempotent retry of a delivered response.
                    return {
                        "recorded": True,
                        "already_recorded": True,
                        "next_index": session.first_unanswered(),
                    }
                raise HTTPException(
                    status_code=409,
                    detail=f"trial {index} already answered",
                )
            # Durable before acknowledged.
            psy.log_response(store.event_log_path, session_id, index,
                             body.choice, body.response_ms)
            psy.record_response(session, index, body.choice,
                                body.response_ms)
            return {
                "recorded": True,
                "already_recorded": False,
                "next_index": session.first_unanswered(),
            }

    @app.get(API_PREFIX + "/results")
    def results(x_experiment_token: str | None = Header(default=None)):
        if x_experiment_token != store.results_token:
            raise HTTPException(status_code=403, detail="bad operator token")
        with store._registry_lock:
            sessions = list(store.sessions.values())
        complete = []
        for session in sessions:
            with store.lock_for(session.session_id):
                if session.complete:
                    # Trials are frozen records; a shallow copy of the
                    # list is a consistent snapshot.
                    complete.append(psy.Session(
                        session.session_id, session.observer_id,
                        session.seed, list(session.trials),
                    ))
        payload = {
            "sessions_total": len(sessions),
            "sessions_complete": len(complete),
            "groups": None,
            "thurstone": None,
        }
        if complete:
            table = psy.summarize(complete)
            payload["groups"] = table.as_dict()
            payload["thurstone"] = {
                tag: est.as_dict()
                for tag, est in sorted(psy.thurstone_table(table).items())
            }
        return payload

    if frontend_dir is not None:
        app.mount("/", StaticFiles(directory=frontend_dir, html=True),
                  name="frontend")

    return app


def serve(store, host="127.0.0.1", port=8765, frontend_dir=None):
    """Run the experiment service until interrupted."""
    import uvicorn

    app = create_app(store, frontend_dir=frontend_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
