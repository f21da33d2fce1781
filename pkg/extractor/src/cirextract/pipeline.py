"""End-to-end bundle extraction.

Per gallery image: global features, N sampled captions, per-caption text
features.  Per query: reference-image features, a pseudo token from the
mapping network, the fine-grained prompt (pseudo token + modification +
LLM-predicted added objects) encoded as text, and N LLM-modified captions
encoded per caption.  Every model and LLM call goes through the
content-addressed cache first, so an interrupted run resumes for free and
a rerun touches no model at all.

Items are processed with a bounded worker pool; results are assembled in
dataset order, so the output bytes do not depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backends as B
from .adapters import DatasetView, load_dataset
from .cache import ContentCache, content_key, decode_array, encode_array, hash_bytes
from .config import ExtractionConfig
from .errors import ExtractorError, TransportError
from .llm import HttpTransport, LlmClient, OfflineTransport, gen_f_add, gen_modified_captions
from .templates import load_template
from .writer import BundleAnnotation, BundleArrays, write_bundle_dir


@dataclass
class Runtime:
    """Backends, templates, client, and cache bound to one configuration."""

    config: ExtractionConfig
    image_encoder: object
    text_encoder: object
    mapper: object
    captioner: object
    llm: LlmClient
    cache: ContentCache
    templates: dict

    @classmethod
    def from_config(cls, config: ExtractionConfig) -> "Runtime":
        cache = ContentCache(config.cache_dir)
        image_encoder = B.make_image_encoder(config.backbone)
        text_encoder = B.make_text_encoder(config.backbone)
        mapper = B.make_pseudo_mapper(config.backbone, image_encoder.dim,
                                      config.mapper_weights)
        captioner = B.make_captioner(config.captioner)
        if config.llm_model == "offline":
            transport = OfflineTransport()
        else:
            if not config.llm_endpoint:
                raise ExtractorError("llm_endpoint required for a non-offline LLM")
            transport = HttpTransport(config.llm_endpoint, config.llm_model,
                                      config.llm_api_key)
        llm = LlmClient(transport=transport, cache=cache, model_id=config.llm_model)
        templates = {tid: load_template(tid, config.template_paths.get(tid))
                     for tid in ("f_g", "f_g_plain", "p_a", "p_m")}
        return cls(config=config, image_encoder=image_encoder,
                   text_encoder=text_encoder, mapper=mapper, captioner=captioner,
                   llm=llm, cache=cache, templates=templates)

    # -- cached backend calls ------------------------------------------------

    def encode_image(self, image_bytes: bytes) -> np.ndarray:
        key = content_key("encode_image", self.config.backbone,
                          {"image_sha": hash_bytes(image_bytes)})
        hit = self.cache.get(key)
        if hit is not None:
            return decode_array(hit)
        vec = self.image_encoder.encode_image(image_bytes)
        self.cache.put(key, encode_array(vec))
        return vec

    def encode_text(self, text: str) -> np.ndarray:
        key = content_key("encode_text", self.config.backbone, {"text": text})
        hit = self.cache.get(key)
        if hit is not None:
            return decode_array(hit)
        vec = self.text_encoder.encode_texts([text])[0]
        self.cache.put(key, encode_array(vec), request={"text": text})
        return vec

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        return np.stack([self.encode_text(t) for t in texts])

    def pseudo_token(self, q_v: np.ndarray) -> np.ndarray:
        key = content_key("pseudo_token", getattr(self.mapper, "model_id", "mapper"),
                          {"qv_sha": hash_bytes(np.ascontiguousarray(q_v, "<f4").tobytes())})
        hit = self.cache.get(key)
        if hit is not None:
            return decode_array(hit)
        vec = self.mapper.map_pseudo_token(q_v)
        self.cache.put(key, encode_array(vec))
        return vec

    def encode_pseudo_prompt(self, prompt: str, pseudo: np.ndarray) -> np.ndarray:
        key = content_key("encode_pseudo_prompt", self.config.backbone,
                          {"prompt": prompt,
                           "pseudo_sha": hash_bytes(np.ascontiguousarray(pseudo, "<f4").tobytes())})
        hit = self.cache.get(key)
        if hit is not None:
            return decode_array(hit)
        vec = self.text_encoder.encode_pseudo_prompt(prompt, pseudo)
        self.cache.put(key, encode_array(vec), request={"prompt": prompt})
        return vec

    def captions(self, image_bytes: bytes, n: int) -> list[str]:
        cfg = self.config
        key = content_key("captions", cfg.captioner,
                          {"image_sha": hash_bytes(image_bytes), "n": n,
                           "seed": cfg.seed, "top_p": cfg.top_p,
                           "temperature": cfg.temperature})
        hit = self.cache.get(key)
        if hit is not None:
            return list(hit["texts"])
        texts = self.captioner.caption_image(image_bytes, n, cfg.seed,
                                             top_p=cfg.top_p,
                                             temperature=cfg.temperature)
        self.cache.put(key, {"texts": texts})
        return texts


def _read_image(view: DatasetView, name: str) -> bytes:
    path = view.image_paths[name]
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ExtractorError(f"cannot read image {name!r} at {path}: {exc}") from exc


def export_bundle(view_or_adapter: DatasetView | str,
                  config: ExtractionConfig,
                  out_path: str | Path,
                  runtime: Runtime | None = None) -> Path:
    """Extract every channel for a dataset view and write the bundle.

    ``view_or_adapter`` is either a prepared :class:`DatasetView` or an
    adapter id, in which case the dataset is loaded from
    ``config.dataset_root`` / ``config.split``.
    """
    if isinstance(view_or_adapter, str):
        view = load_dataset(view_or_adapter, config.dataset_root, config.split)
    else:
        view = view_or_adapter
    rt = runtime or Runtime.from_config(config)
    cfg = rt.config
    n_t = cfg.captions_per_image
    n_q = cfg.query_caption_count
    dim = rt.image_encoder.dim
    index_of = {name: i for i, name in enumerate(view.gallery_names)}

    def gallery_item(name: str):
        try:
            image = _read_image(view, name)
            t_v = rt.encode_image(image)
            caps = rt.captions(image, n_t)
            t_c = rt.encode_texts(caps)
            return t_v, t_c
        except (ExtractorError, TransportError) as exc:
            raise ExtractorError(f"gallery item {name!r}: {exc}") from exc

    def query_item(idx: int):
        q = view.queries[idx]
        try:
            image = _read_image(view, q.reference_name)
            q_v = rt.encode_image(image)
            pseudo = rt.pseudo_token(q_v)
            caps = rt.captions(image, n_q)
            f_add = gen_f_add(rt.llm, caps[0], q.modification, rt.templates["p_a"])
            fg_text = rt.templates["f_g"].render(modification=q.modification,
                                                 additions=f_add)
            q_f = rt.encode_pseudo_prompt(fg_text, pseudo)
            modified = gen_modified_captions(rt.llm, caps, q.modification,
                                             rt.templates["p_m"])
            q_m = rt.encode_texts(modified)
            q_f_plain = None
            if cfg.emit_plain_prompt_variant:
                plain_text = rt.templates["f_g_plain"].render(modification=q.modification)
                q_f_plain = rt.encode_pseudo_prompt(plain_text, pseudo)
            return q_v, q_f, q_m, q_f_plain
        except (ExtractorError, TransportError) as exc:
            raise ExtractorError(f"query {idx} ({q.reference_name!r}): {exc}") from exc

    if cfg.workers == 1:
        gallery_results = [gallery_item(n) for n in view.gallery_names]
        query_results = [query_item(i) for i in range(len(view.queries))]
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            gallery_results = list(pool.map(gallery_item, view.gallery_names))
            query_results = list(pool.map(query_item, range(len(view.queries))))

    k, q_n = len(view.gallery_names), len(view.queries)
    arrays = BundleArrays(
        t_v=np.stack([r[0] for r in gallery_results]),
        t_c=np.stack([r[1] for r in gallery_results]),
        q_v=np.stack([r[0] for r in query_results]),
        q_f=np.stack([r[1] for r in query_results]),
        q_m=np.stack([r[2] for r in query_results]))
    extra = None
    if cfg.emit_plain_prompt_variant:
        extra = {"query_qf_noadd": np.stack([r[3] for r in query_results])}

    annotations = []
    for q in view.queries:
        gt_ids = tuple(index_of[g] for g in q.gt_names)
        ref = index_of.get(q.reference_name)
        subset = None
        if q.subset_names is not None:
            subset = tuple(sorted({*(index_of[s] for s in q.subset_names), *gt_ids}))
        annotations.append(BundleAnnotation(gt_ids=gt_ids, reference_id=ref,
                                            subset_ids=subset))

    assert arrays.t_v.shape == (k, dim) and arrays.q_v.shape == (q_n, dim)
    return write_bundle_dir(out_path, dataset=view.dataset_id,
                            protocol=view.protocol, arrays=arrays,
                            annotations=annotations,
                            categories=list(view.categories) if view.categories else None,
                            extra_channels=extra)
