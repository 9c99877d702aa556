"""Session service: the dialogue engine behind an HTTP API.

The core (`SessionService`) is transport-independent and fully
deterministic given the store plus checkpoints; the HTTP layer on top is
a stdlib ThreadingHTTPServer speaking JSON with inline base64 PNGs.
Operations on one session id are serialized by a per-session lock;
distinct sessions proceed in parallel against frozen model snapshots.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import uuid
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

import numpy as np

from . import rewards
from .dialogue import (
    DialogueSession,
    DiffusionGenerator,
    PromptState,
    RuleRefiner,
    hydrate_features,
    next_round,
    refine_prompt,
)
from .preference import PreferenceModel
from .store import SessionStore
from .world import AttributeTuple, Feedback, quantize

ERROR_CODES = (
    "malformed_request",
    "invalid_prompt",
    "invalid_feedback",
    "unknown_session",
    "unknown_round",
    "session_closed",
    "no_pair_for_round",
    "duplicate_choice",
)

_HTTP_STATUS = {
    "malformed_request": 400,
    "invalid_prompt": 400,
    "invalid_feedback": 400,
    "unknown_session": 404,
    "unknown_round": 404,
    "session_closed": 409,
    "no_pair_for_round": 409,
    "duplicate_choice": 409,
}


class ApiError(Exception):
    def __init__(self, code: str, message: str):
        if code not in ERROR_CODES:
            raise ValueError(f"undeclared error code {code!r}")
        super().__init__(message)
        self.code = code
        self.message = message

    @property
    def http_status(self) -> int:
        return _HTTP_STATUS[self.code]

    def body(self) -> dict:
        return {"error": {"code": self.code, "message": self.message}}


def image_to_base64(img: np.ndarray) -> str:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(quantize(img), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class SessionService:
    def __init__(self, store: SessionStore, generator: DiffusionGenerator,
                 pref_model: Optional[PreferenceModel] = None, seed: int = 0):
        self.store = store
        self.generator = generator
        self.pref_model = pref_model
        self.refiner = RuleRefiner()
        self._rng = np.random.default_rng(seed)
        self._sessions: dict[str, DialogueSession] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._meta_lock = threading.Lock()

    # -- helpers ---------------------------------------------------------------

    def _lock_for(self, session_id: str) -> threading.Lock:
        with self._meta_lock:
            return self._locks.setdefault(session_id, threading.Lock())

    def _get(self, session_id: str) -> DialogueSession:
        if session_id in self._sessions:
            return self._sessions[session_id]
        try:
            session = self.store.load_session(session_id)
        except KeyError:
            raise ApiError("unknown_session", f"no session {session_id!r}")
        hydrate_features(session, self.generator)
        self._sessions[session_id] = session
        return session

    def _round_payload(self, session: DialogueSession, record) -> dict:
        return {
            "index": record.index,
            "prompt": record.prompt.to_dict(),
            "image_png_base64": image_to_base64(record.image),
            "alt_image_png_base64": (image_to_base64(record.alt_image)
                                     if record.alt_image is not None else None),
            "rewards": record.rewards.as_dict(),
            "weights": record.rewards.weights.as_dict(),
            "feedback": record.feedback.to_dict() if record.feedback else None,
            "ab_choice": record.ab_choice,
        }

    def _parse_prompt(self, spec) -> AttributeTuple:
        if spec == "random":
            return AttributeTuple.random(self._rng)
        if not isinstance(spec, dict):
            raise ApiError("invalid_prompt", "prompt must be an object or 'random'")
        try:
            return AttributeTuple.from_dict(spec)
        except (ValueError, TypeError) as exc:
            raise ApiError("invalid_prompt", str(exc))

    # -- operations ---------------------------------------------------------------

    def create_session(self, prompt_spec, seed: Optional[int] = None) -> dict:
        prompt = self._parse_prompt(prompt_spec)
        if seed is None:
            seed = int(self._rng.integers(0, 2**31 - 1))
        session_id = uuid.uuid4().hex[:12]
        session = DialogueSession(session_id=session_id, seed=int(seed),
                                  initial_prompt=prompt)
        with self._lock_for(session_id):
            record = next_round(session, self.generator, prompt, self.pref_model,
                                with_alternative=True)
            self._sessions[session_id] = session
            self.store.save_session(session)
        return {
            "session_id": session_id,
            "seed": session.seed,
            "status": session.status,
            "prompt": prompt.to_dict(),
            "round": self._round_payload(session, record),
            "weights": rewards.schedule(1).as_dict(),
        }

    def post_feedback(self, session_id: str, payload: dict) -> dict:
        with self._lock_for(session_id):
            session = self._get(session_id)
            if session.status != "active":
                raise ApiError("session_closed",
                               f"session is {session.status}; no further feedback")
            try:
                fb = Feedback.from_dict(payload)
            except (ValueError, TypeError, KeyError) as exc:
                raise ApiError("invalid_feedback", str(exc))
            last = session.rounds[-1]
            last.feedback = fb
            if fb.kind == "accept":
                session.close("accepted")
                self.store.save_session(session)
                return {"session_id": session_id, "status": session.status,
                        "round": None}
            if fb.kind == "reject":
                session.close("abandoned")
                self.store.save_session(session)
                return {"session_id": session_id, "status": session.status,
                        "round": None}
            if fb.kind == "free-text":
                session.free_text.append(fb.text or "")
            state = session.prompt_state()
            record = next_round(session, self.generator, state.current,
                                self.pref_model, with_alternative=True)
            self.store.save_session(session)
            return {
                "session_id": session_id,
                "status": session.status,
                "round": self._round_payload(session, record),
            }

    def get_session(self, session_id: str) -> dict:
        with self._lock_for(session_id):
            session = self._get(session_id)
            return {
                "session_id": session.session_id,
                "seed": session.seed,
                "status": session.status,
                "initial_prompt": session.initial_prompt.to_dict(),
                "free_text": list(session.free_text),
                "rounds": [self._round_payload(session, r) for r in session.rounds],
            }

    def ab_choice(self, session_id: str, round_index: int, choice: str) -> dict:
        if choice not in ("A", "B"):
            raise ApiError("malformed_request", "choice must be 'A' or 'B'")
        with self._lock_for(session_id):
            session = self._get(session_id)
            record = next((r for r in session.rounds if r.index == round_index), None)
            if record is None:
                raise ApiError("unknown_round",
                               f"session has no round {round_index}")
            if record.alt_image is None:
                raise ApiError("no_pair_for_round",
                               f"round {round_index} offered no A/B pair")
            if record.ab_choice is not None:
                raise ApiError("duplicate_choice",
                               f"round {round_index} already chose {record.ab_choice}")
            record.ab_choice = choice
            d = self.store.session_dir(session_id)
            img_a = f"sessions/{session_id}/round_{round_index:03d}.png"
            img_b = f"sessions/{session_id}/round_{round_index:03d}_alt.png"
            pos, neg = (img_a, img_b) if choice == "A" else (img_b, img_a)
            self.store.append_pair({
                "session": session_id,
                "round": round_index,
                "prompt": record.prompt.to_dict(),
                "pos_image": pos,
                "neg_image": neg,
            })
            self.store.save_session(session)
            return {"session_id": session_id, "round": round_index,
                    "choice": choice, "recorded": True}

    def healthz(self) -> dict:
        return {"status": "ok", "sessions": len(self.store.session_ids())}


# -- HTTP layer --------------------------------------------------------------------


def _make_handler(service: SessionService, ui_dir: Optional[Path] = None):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            pass

        def _send(self, status: int, body: dict):
            raw = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(raw)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(raw)

        def _read_json(self) -> dict:
            length = int(self.headers.get("Content-Length") or 0)
            raw = self.rfile.read(length) if length else b""
            if not raw:
                return {}
            try:
                body = json.loads(raw)
            except json.JSONDecodeError:
                raise ApiError("malformed_request", "body is not valid JSON")
            if not isinstance(body, dict):
                raise ApiError("malformed_request", "body must be a JSON object")
            return body

        def _route(self, method: str):
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            try:
                if method == "GET" and parts == ["healthz"]:
                    return self._send(200, service.healthz())
                if method == "GET" and len(parts) == 2 and parts[0] == "sessions":
                    return self._send(200, service.get_session(parts[1]))
                if method == "POST" and parts == ["sessions"]:
                    body = self._read_json()
                    out = service.create_session(body.get("prompt", "random"),
                                                 body.get("seed"))
                    return self._send(201, out)
                if (method == "POST" and len(parts) == 3
                        and parts[0] == "sessions" and parts[2] == "feedback"):
                    return self._send(200, service.post_feedback(parts[1],
                                                                 self._read_json()))
                if (method == "POST" and len(parts) == 5 and parts[0] == "sessions"
                        and parts[2] == "rounds" and parts[4] == "choice"):
                    body = self._read_json()
                    try:
                        k = int(parts[3])
                    except ValueError:
                        raise ApiError("malformed_request", "round index must be an integer")
                    return self._send(200, service.ab_choice(parts[1], k,
                                                             body.get("choice", "")))
                if method == "GET" and ui_dir is not None:
                    return self._static(parts)
                raise ApiError("malformed_request", f"no route {method} {self.path}")
            except ApiError as err:
                return self._send(err.http_status, err.body())

        def _static(self, parts):
            rel = "/".join(parts) or "index.html"
            target = (ui_dir / rel).resolve()
            if not str(target).startswith(str(ui_dir.resolve())) or not target.is_file():
                raise ApiError("malformed_request", f"no route GET {self.path}")
            ctype = {"html": "text/html", "js": "text/javascript",
                     "css": "text/css", "png": "image/png"}.get(
                         target.suffix.lstrip("."), "application/octet-stream")
            raw = target.read_bytes()
            self.send_response(200)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(raw)))
            self.end_headers()
            self.wfile.write(raw)

        def do_GET(self):
            self._route("GET")

        def do_POST(self):
            self._route("POST")

    return Handler


@dataclass
class RunningServer:
    server: ThreadingHTTPServer
    thread: threading.Thread

    @property
    def address(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def stop(self):
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)


def start_server(service: SessionService, host: str = "127.0.0.1", port: int = 0,
                 ui_dir: Optional[Path] = None) -> RunningServer:
    handler = _make_handler(service, ui_dir)
    server = ThreadingHTTPServer((host, port), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return RunningServer(server=server, thread=thread)
