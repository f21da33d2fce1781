"""Model backends: image/text encoders, pseudo-token mapping, captioning.

Two families:

* ``hashed-<dim>`` — deterministic offline stand-ins.  A vector is drawn
  from a generator seeded by SHA-256 of the input bytes (plus a salt per
  role), so the same image or string always maps to the same direction and
  distinct inputs practically never collide.  These run everywhere, need
  no weights, and carry the smoke tests.
* real backbones (``ViT-B/32``, ``ViT-L/14``, ``ViT-G/14``, BLIP-2 ids) —
  thin lazy wrappers that import torch/transformers on first use and fail
  with an actionable message when the weights are not locally available.

All backends are deterministic per (input, model id, seed); the pipeline
caches every call, so a backend only ever sees a given input once.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import BackendError


def _seeded_rng(*parts: bytes) -> np.random.Generator:
    digest = hashlib.sha256(b"\x00".join(parts)).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype=np.uint64))


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.sqrt((vec * vec).sum()))
    if norm == 0.0:
        raise BackendError("degenerate zero embedding")
    return (vec / norm).astype("<f4")


@dataclass(frozen=True)
class HashedImageEncoder:
    """Deterministic image-bytes -> unit vector."""

    dim: int
    model_id: str = "hashed"

    def encode_image(self, image_bytes: bytes) -> np.ndarray:
        if not image_bytes:
            raise BackendError("cannot encode an empty image")
        rng = _seeded_rng(b"img", self.model_id.encode(), image_bytes)
        return _unit(rng.standard_normal(self.dim))


@dataclass(frozen=True)
class HashedTextEncoder:
    """Deterministic string -> unit vector; rows preserve input order."""

    dim: int
    model_id: str = "hashed"

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        if not texts:
            raise BackendError("no texts to encode")
        rows = np.empty((len(texts), self.dim), dtype="<f4")
        for i, text in enumerate(texts):
            if text == "":
                raise BackendError(f"text {i} is empty")
            rng = _seeded_rng(b"txt", self.model_id.encode(), text.encode("utf-8"))
            rows[i] = _unit(rng.standard_normal(self.dim))
        return rows

    def encode_pseudo_prompt(self, prompt: str, pseudo: np.ndarray) -> np.ndarray:
        """Encode a prompt whose pseudo-token slot carries an embedding.

        The hashed stand-in mixes the prompt hash with the token embedding
        so both the text and the reference image influence the result.
        """
        if pseudo.ndim != 1:
            raise BackendError(f"pseudo token must be a vector, got shape {pseudo.shape}")
        rng = _seeded_rng(b"pseudo-prompt", self.model_id.encode(),
                          prompt.encode("utf-8"),
                          np.ascontiguousarray(pseudo, dtype="<f4").tobytes())
        return _unit(rng.standard_normal(self.dim))


@dataclass(frozen=True)
class HashedPseudoMapper:
    """Deterministic image-feature -> pseudo-token embedding."""

    input_dim: int
    token_dim: int
    model_id: str = "hashed-mapper"

    def map_pseudo_token(self, q_v: np.ndarray) -> np.ndarray:
        q_v = np.asarray(q_v)
        if q_v.shape != (self.input_dim,):
            raise BackendError(
                f"mapping network expects dim {self.input_dim}, got {q_v.shape}; "
                "backbone and mapping network disagree")
        rng = _seeded_rng(b"map", self.model_id.encode(),
                          np.ascontiguousarray(q_v, dtype="<f4").tobytes())
        return _unit(rng.standard_normal(self.token_dim))


@dataclass(frozen=True)
class HashedCaptioner:
    """Deterministic diverse captions per image, seeded like sampling."""

    model_id: str = "hashed-captioner"

    _NOUNS = ("bus", "dog", "table", "tree", "bottle", "bicycle", "lamp",
              "chair", "boat", "kite", "glass", "hat")
    _ADJS = ("red", "green", "small", "wooden", "striped", "bright", "old",
             "round", "double", "plain")

    def caption_image(self, image_bytes: bytes, n: int, seed: int,
                      top_p: float = 0.9, temperature: float = 1.0) -> list[str]:
        if n < 1:
            raise BackendError(f"caption count must be >= 1, got {n}")
        if not image_bytes:
            raise BackendError("cannot caption an empty image")
        out = []
        for i in range(n):
            rng = _seeded_rng(b"cap", self.model_id.encode(), image_bytes,
                              str((seed, i, top_p, temperature)).encode())
            adj = self._ADJS[int(rng.integers(len(self._ADJS)))]
            noun = self._NOUNS[int(rng.integers(len(self._NOUNS)))]
            other = self._NOUNS[int(rng.integers(len(self._NOUNS)))]
            out.append(f"a photo of a {adj} {noun} next to a {other}")
        return out


# ---------------------------------------------------------------------------
# real backbones (lazy, weight-dependent)
# ---------------------------------------------------------------------------

_CLIP_IDS = {
    "ViT-B/32": ("openai/clip-vit-base-patch32", 512),
    "ViT-L/14": ("openai/clip-vit-large-patch14", 768),
    "ViT-G/14": ("laion/CLIP-ViT-bigG-14-laion2B-39B-b160k", 1280),
}


class ClipEncoder:
    """CLIP image+text encoder via transformers; needs local weights."""

    def __init__(self, backbone: str):
        if backbone not in _CLIP_IDS:
            raise BackendError(f"unknown CLIP backbone {backbone!r}")
        self.model_id, self.dim = _CLIP_IDS[backbone]
        self._model = None

    def _load(self):
        if self._model is None:
            try:
                import torch  # noqa: F401
                from transformers import CLIPModel, CLIPProcessor
            except ImportError as exc:
                raise BackendError(
                    f"CLIP backbone requires torch+transformers: {exc}") from exc
            try:
                self._model = CLIPModel.from_pretrained(self.model_id)
                self._proc = CLIPProcessor.from_pretrained(self.model_id)
            except Exception as exc:
                raise BackendError(
                    f"cannot load {self.model_id}; download the weights into the "
                    f"local huggingface cache first ({exc})") from exc
        return self._model

    def encode_image(self, image_bytes: bytes) -> np.ndarray:
        import io

        from PIL import Image
        model = self._load()
        image = Image.open(io.BytesIO(image_bytes)).convert("RGB")
        inputs = self._proc(images=image, return_tensors="pt")
        feats = model.get_image_features(**inputs).detach().numpy()[0]
        return np.asarray(feats, dtype="<f4")

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        model = self._load()
        inputs = self._proc(text=texts, return_tensors="pt", padding=True,
                            truncation=True)
        feats = model.get_text_features(**inputs).detach().numpy()
        return np.asarray(feats, dtype="<f4")

    def encode_pseudo_prompt(self, prompt: str, pseudo: np.ndarray) -> np.ndarray:
        raise BackendError(
            "pseudo-token injection for CLIP needs the token-embedding hook of a "
            "textual-inversion setup; wire a mapper-aware encoder for real runs")


class Blip2Captioner:
    """BLIP-2 nucleus-sampling captioner; needs local weights."""

    def __init__(self, model_id: str = "Salesforce/blip2-opt-6.7b"):
        self.model_id = model_id
        self._model = None

    def caption_image(self, image_bytes: bytes, n: int, seed: int,
                      top_p: float = 0.9, temperature: float = 1.0) -> list[str]:
        if self._model is None:
            try:
                import torch
                from transformers import AutoProcessor, Blip2ForConditionalGeneration
            except ImportError as exc:
                raise BackendError(
                    f"BLIP-2 captioning requires torch+transformers: {exc}") from exc
            try:
                self._proc = AutoProcessor.from_pretrained(self.model_id)
                self._model = Blip2ForConditionalGeneration.from_pretrained(self.model_id)
            except Exception as exc:
                raise BackendError(
                    f"cannot load {self.model_id}; download the weights first "
                    f"({exc})") from exc
        import io

        import torch
        from PIL import Image
        image = Image.open(io.BytesIO(image_bytes)).convert("RGB")
        inputs = self._proc(images=image, return_tensors="pt")
        torch.manual_seed(seed)
        out = self._model.generate(**inputs, do_sample=True, top_p=top_p,
                                   temperature=temperature, num_return_sequences=n,
                                   max_new_tokens=40)
        return [t.strip() for t in self._proc.batch_decode(out, skip_special_tokens=True)]


class TorchScriptMapper:
    """Pretrained textual-inversion mapping network (TorchScript archive)."""

    def __init__(self, weights_path: str, input_dim: int):
        self.weights_path = weights_path
        self.input_dim = input_dim
        self._module = None

    def map_pseudo_token(self, q_v: np.ndarray) -> np.ndarray:
        q_v = np.asarray(q_v)
        if q_v.shape != (self.input_dim,):
            raise BackendError(
                f"mapping network expects dim {self.input_dim}, got {q_v.shape}; "
                "backbone and mapping network disagree")
        if self._module is None:
            try:
                import torch
            except ImportError as exc:
                raise BackendError(f"mapping network requires torch: {exc}") from exc
            try:
                self._module = torch.jit.load(self.weights_path, map_location="cpu")
            except Exception as exc:
                raise BackendError(
                    f"cannot load mapping network {self.weights_path}: {exc}") from exc
        import torch
        with torch.no_grad():
            out = self._module(torch.from_numpy(q_v.astype("f4"))[None, :])
        return np.asarray(out.numpy()[0], dtype="<f4")


def make_image_encoder(backbone: str):
    if backbone.startswith("hashed-"):
        return HashedImageEncoder(dim=int(backbone.split("-", 1)[1]), model_id=backbone)
    return ClipEncoder(backbone)


def make_text_encoder(backbone: str):
    if backbone.startswith("hashed-"):
        return HashedTextEncoder(dim=int(backbone.split("-", 1)[1]), model_id=backbone)
    return ClipEncoder(backbone)


def make_pseudo_mapper(backbone: str, dim: int, weights_path: str | None = None):
    if weights_path is not None:
        return TorchScriptMapper(weights_path, input_dim=dim)
    if backbone.startswith("hashed-"):
        return HashedPseudoMapper(input_dim=dim, token_dim=dim,
                                  model_id=f"{backbone}-mapper")
    raise BackendError(
        f"backbone {backbone!r} needs a pretrained mapping network; pass "
        "mapper_weights in the extraction config")


def make_captioner(model_id: str):
    if model_id == "hashed":
        return HashedCaptioner()
    return Blip2Captioner(model_id)
