"""Content-addressed result cache: one JSON file per input hash.

The key is a SHA-256 over canonical JSON of (kind, model id, payload), so
identical inputs never trigger a second model or LLM call, across process
restarts and across concurrent workers.  Writes go through a temp file and
an atomic rename; losing a race writes the same bytes, so the cache is
safe under concurrent writers.  Entries keep the full request material
(prompts verbatim) next to the value for auditing.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def content_key(kind: str, model: str, payload: dict) -> str:
    material = json.dumps({"kind": kind, "model": model, "payload": payload},
                          sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {"dtype": "<f4", "shape": list(arr.shape),
            "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype=doc["dtype"]).reshape(doc["shape"]).copy()


class ContentCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        try:
            return json.loads(path.read_text(encoding="utf-8"))["value"]
        except FileNotFoundError:
            return None

    def put(self, key: str, value: dict, request: dict | None = None) -> None:
        doc = {"key": key, "value": value}
        if request is not None:
            doc["request"] = request
        data = json.dumps(doc, sort_keys=True, ensure_ascii=False, indent=2) + "\n"
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(data)
            os.replace(tmp, self._path(key))
        except BaseException:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
            raise

    def entry_path(self, key: str) -> Path:
        return self._path(key)

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*.json"))
