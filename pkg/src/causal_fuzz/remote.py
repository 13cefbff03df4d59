"""HTTP wire protocol for API-deployed models.

    GET  /schema   -> {"schema": [...], "kinds": ["probability", "raw"]}
    POST /predict  {"schema": [...], "rows": [[...], ...], "kind": ...}
                   -> 200 {"scores": [...]} | 400 {"error": ...}
"""
import json
import logging
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import List, Optional, Sequence

import numpy as np
import requests
from pydantic import BaseModel, ValidationError, root_validator
from requests.adapters import HTTPAdapter, Retry

from causal_fuzz.errors import SchemaMismatch, TransportError
from causal_fuzz.predictor import SCORE_KINDS, Predictor, ScoreKind

logger = logging.getLogger(__name__)

MAX_BATCH = 256
TIMEOUT_SECONDS = 10.0


class RetryPolicy(BaseModel):
    retries: int = 2
    # first backoff in seconds, doubled per attempt
    backoff: float = 0.1


class SchemaReply(BaseModel):
    schema_: List[str]
    kinds: List[str]

    class Config:
        fields = {"schema_": "schema"}


class PredictRequest(BaseModel):
    schema_: List[str]
    rows: List[List[float]]
    kind: ScoreKind = "probability"

    class Config:
        fields = {"schema_": "schema"}

    @root_validator(skip_on_failure=True)
    def _rectangular(cls, values):
        width = len(values["schema_"])
        for i, row in enumerate(values["rows"]):
            if len(row) != width:
                raise ValueError(f"row {i} has {len(row)} values, schema has {width}")
        return values


class PredictReply(BaseModel):
    scores: List[float]


def _session(retry: RetryPolicy) -> requests.Session:
    session = requests.Session()
    retries = Retry(
        total=retry.retries,
        backoff_factor=retry.backoff,
        status_forcelist=[500, 502, 503, 504],
        allowed_methods=frozenset({"GET", "POST"}),
    )
    session.mount("http://", HTTPAdapter(max_retries=retries))
    session.mount("https://", HTTPAdapter(max_retries=retries))
    return session


class RemotePredictor(Predictor):
    backing = "remote"

    def __init__(self, url: str, schema: Sequence[str], session: requests.Session):
        self.url = url.rstrip("/")
        self.schema = list(schema)
        self.session = session
        self.retries = 0

    @property
    def model_id(self) -> str:
        return f"remote:{self.url}"

    def _post(self, rows: np.ndarray, kind: str) -> List[float]:
        body = {"schema": self.schema, "rows": rows.tolist(), "kind": kind}
        try:
            response = self.session.post(f"{self.url}/predict", json=body, timeout=TIMEOUT_SECONDS)
        except requests.RequestException as e:
            raise TransportError(f"POST {self.url}/predict failed: {e}") from e
        history = getattr(getattr(response.raw, "retries", None), "history", ())
        self.retries += len(history or ())
        if response.status_code == 400:
            raise SchemaMismatch(_error_text(response))
        if response.status_code != 200:
            raise TransportError(f"POST {self.url}/predict returned {response.status_code}")
        try:
            reply = PredictReply.parse_raw(response.content)
        except ValidationError as e:
            raise TransportError(f"malformed response from {self.url}/predict") from e
        if len(reply.scores) != len(rows):
            raise TransportError(f"server returned {len(reply.scores)} scores for {len(rows)} rows")
        return reply.scores

    def _score(self, rows: np.ndarray, kind: str) -> np.ndarray:
        scores: List[float] = []
        for start in range(0, len(rows), MAX_BATCH):
            scores.extend(self._post(rows[start : start + MAX_BATCH], kind))
        return np.asarray(scores, dtype=float)


def _error_text(response: requests.Response) -> str:
    try:
        return str(response.json().get("error", response.text))
    except ValueError:
        return response.text


def connect_remote(url: str, schema: Optional[Sequence[str]] = None, retry: Optional[RetryPolicy] = None) -> RemotePredictor:
    """Handshakes with GET /schema; a given client schema must match in order."""
    session = _session(retry or RetryPolicy())
    try:
        response = session.get(f"{url.rstrip('/')}/schema", timeout=TIMEOUT_SECONDS)
        response.raise_for_status()
        reply = SchemaReply.parse_raw(response.content)
    except requests.RequestException as e:
        raise TransportError(f"handshake with {url} failed: {e}") from e
    except ValidationError as e:
        raise TransportError(f"malformed handshake from {url}") from e
    if schema is not None and list(schema) != reply.schema_:
        raise SchemaMismatch(f"client schema {list(schema)} != server schema {reply.schema_}")
    logger.info("connected to %s with schema %s", url, reply.schema_)
    return RemotePredictor(url, reply.schema_, session)


class PredictorHandler(BaseHTTPRequestHandler):
    predictor: Predictor

    def _reply(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path != "/schema":
            self._reply(404, {"error": f"no route {self.path}"})
            return
        self._reply(200, {"schema": self.predictor.schema, "kinds": list(SCORE_KINDS)})

    def do_POST(self):
        if self.path != "/predict":
            self._reply(404, {"error": f"no route {self.path}"})
            return
        length = int(self.headers.get("Content-Length", 0))
        try:
            request = PredictRequest.parse_raw(self.rfile.read(length))
        except ValidationError as e:
            self._reply(400, {"error": e.errors()[0]["msg"]})
            return
        if request.schema_ != self.predictor.schema:
            self._reply(400, {"error": f"schema mismatch: expected {self.predictor.schema}"})
            return
        rows = np.asarray(request.rows, dtype=float).reshape(len(request.rows), len(request.schema_))
        scores = self.predictor.predict(rows, kind=request.kind)
        self._reply(200, {"scores": scores.tolist()})

    def log_message(self, format, *args):
        logger.debug("%s - %s", self.address_string(), format % args)


def serve_predictor(predictor: Predictor, host: str = "127.0.0.1", port: int = 0, handler=PredictorHandler) -> ThreadingHTTPServer:
    """Binds (port 0 picks a free one) without serving; call serve_forever()."""
    bound = type("BoundHandler", (handler,), {"predictor": predictor})
    server = ThreadingHTTPServer((host, port), bound)
    server.daemon_threads = True
    logger.info("serving %s on %s:%d", predictor.model_id, *server.server_address[:2])
    return server
