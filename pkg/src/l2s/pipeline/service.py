"""Line-delimited JSON protocol for external detector, captioner and feature services.

A service is any executable that reads one JSON request per line on standard
input and answers each with exactly one JSON line on standard output, in
order. Requests::

    {"id": 7, "op": "detect",  "latent": LATENT}
    {"id": 8, "op": "feature", "latent": LATENT, "box": [x0, y0, x1, y1]}
    {"id": 9, "op": "caption", "frames": [META, ...]}

where ``LATENT = {"h": H, "w": W, "c": C, "data": [H*W*C floats, row-major]}``
and ``META`` is a per-frame descriptor dict. Responses echo ``id`` and carry
``{"ok": true, "box": [...]}``, ``{"ok": true, "feature": [...]}`` or
``{"ok": true, "global_caption": str, "subject_captions": [str, ...]}``. A
failure is ``{"ok": false, "error": NAME, "message": str}``.

``python -m l2s.pipeline.service`` runs the built-in stubs behind this
protocol.
"""

from __future__ import annotations

import json
import subprocess
import sys
from typing import Sequence

import numpy as np

from .. import errors
from ..layout import BoundingBox


def encode_latent(latent: np.ndarray) -> dict:
    latent = np.asarray(latent, dtype=np.float32)
    h, w, c = latent.shape
    return {"h": h, "w": w, "c": c, "data": [float(v) for v in latent.reshape(-1)]}


def decode_latent(obj: dict) -> np.ndarray:
    return np.asarray(obj["data"], dtype=np.float32).reshape(obj["h"], obj["w"], obj["c"])


def handle(request: dict) -> dict:
    """Answer one request with the built-in stubs."""
    from .detect import detect_subject_stub, extract_features
    from .grouping import annotate_stub

    rid = request.get("id")
    try:
        op = request.get("op")
        if op == "detect":
            box = detect_subject_stub(decode_latent(request["latent"]))
            return {"id": rid, "ok": True, "box": box.to_list()}
        if op == "feature":
            feat = extract_features(decode_latent(request["latent"]), BoundingBox.from_list(request["box"]))
            return {"id": rid, "ok": True, "feature": [float(v) for v in feat]}
        if op == "caption":
            return {"id": rid, "ok": True, **annotate_stub(request["frames"])}
        return {"id": rid, "ok": False, "error": "BadRequest", "message": f"unknown op {op!r}"}
    except (errors.L2SError, KeyError, ValueError, TypeError) as exc:
        return {"id": rid, "ok": False, "error": type(exc).__name__, "message": str(exc)}


def serve(stdin=None, stdout=None) -> None:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            resp = {"id": None, "ok": False, "error": "BadRequest", "message": str(exc)}
        else:
            resp = handle(req)
        stdout.write(json.dumps(resp) + "\n")
        stdout.flush()


class ServiceClient:
    """Talks to one long-lived service process."""

    def __init__(self, argv: Sequence[str] | None = None):
        self.argv = list(argv) if argv else [sys.executable, "-m", "l2s.pipeline.service"]
        self.proc: subprocess.Popen | None = None
        self._next = 0

    def __enter__(self) -> "ServiceClient":
        self.proc = subprocess.Popen(self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     text=True, encoding="utf-8")
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self.proc is not None:
            self.proc.stdin.close()
            self.proc.wait(timeout=30)
            self.proc = None

    def request(self, payload: dict) -> dict:
        if self.proc is None:
            raise errors.IoError("service client is not running; use it as a context manager")
        self._next += 1
        payload = {"id": self._next, **payload}
        self.proc.stdin.write(json.dumps(payload) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise errors.IoError(f"service {self.argv} closed its output")
        resp = json.loads(line)
        if resp.get("id") != self._next:
            raise errors.IoError(f"service answered id {resp.get('id')} to request {self._next}")
        if not resp.get("ok"):
            cls = getattr(errors, resp.get("error", ""), None)
            if isinstance(cls, type) and issubclass(cls, errors.L2SError) and cls is not errors.SplitLeak \
                    and cls is not errors.NonFiniteLoss:
                raise cls(resp.get("message", ""))
            raise errors.IoError(f"service error {resp.get('error')}: {resp.get('message')}")
        return resp

    def detect(self, latent: np.ndarray) -> BoundingBox:
        return BoundingBox.from_list(self.request({"op": "detect", "latent": encode_latent(latent)})["box"])

    def feature(self, latent: np.ndarray, box: BoundingBox) -> np.ndarray:
        resp = self.request({"op": "feature", "latent": encode_latent(latent), "box": box.to_list()})
        return np.asarray(resp["feature"], dtype=np.float64)

    def caption(self, frame_metas: Sequence[dict]) -> dict:
        resp = self.request({"op": "caption", "frames": list(frame_metas)})
        return {"global_caption": resp["global_caption"], "subject_captions": resp["subject_captions"]}


if __name__ == "__main__":
    serve()
