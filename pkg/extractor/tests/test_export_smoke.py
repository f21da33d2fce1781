"""End-to-end extractor checks against the engine's external interfaces.

The engine is only ever touched through its CLI (subprocess) and the
bundle directory format, never through imports.
"""

from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from cirextract.config import ExtractionConfig
from cirextract.errors import ExtractorError
from cirextract.pipeline import Runtime, export_bundle

from minidata import build_mini_cirr


class CallCounter:
    """Counts calls to selected methods, delegating everything else."""

    def __init__(self, inner, methods):
        self._inner = inner
        self._methods = set(methods)
        self.calls = 0

    def __getattr__(self, name):
        attr = getattr(self._inner, name)
        if name in self._methods and callable(attr):
            def wrapped(*args, **kwargs):
                self.calls += 1
                return attr(*args, **kwargs)
            return wrapped
        return attr


def _counting_runtime(config: ExtractionConfig) -> tuple[Runtime, dict]:
    rt = Runtime.from_config(config)
    counters = {
        "image": CallCounter(rt.image_encoder, {"encode_image"}),
        "text": CallCounter(rt.text_encoder, {"encode_texts", "encode_pseudo_prompt"}),
        "mapper": CallCounter(rt.mapper, {"map_pseudo_token"}),
        "captioner": CallCounter(rt.captioner, {"caption_image"}),
    }
    rt.image_encoder = counters["image"]
    rt.text_encoder = counters["text"]
    rt.mapper = counters["mapper"]
    rt.captioner = counters["captioner"]
    llm_counter = {"calls": 0}
    inner_transport = rt.llm.transport

    def counting_transport(prompt: str) -> str:
        llm_counter["calls"] += 1
        return inner_transport(prompt)

    rt.llm.transport = counting_transport
    counters["llm"] = llm_counter
    return rt, counters


def _engine(*args: str) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-m", "cirfuse.cli", *args],
                          capture_output=True, text=True)


def _dir_bytes(path: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def _smoke_config(tmp_path: Path, **overrides) -> ExtractionConfig:
    defaults = dict(backbone="hashed-32", captioner="hashed", llm_model="offline",
                    captions_per_image=3, seed=7,
                    cache_dir=str(tmp_path / "cache"), adapter="CIRR",
                    dataset_root=str(tmp_path / "data"), split="val")
    defaults.update(overrides)
    return ExtractionConfig(**defaults)


@pytest.fixture()
def mini_dataset(tmp_path):
    build_mini_cirr(tmp_path / "data", n_images=20, n_queries=5)
    return tmp_path


def test_smoke_export_validates_and_evaluates_with_cached_rerun(mini_dataset):
    tmp_path = mini_dataset
    config = _smoke_config(tmp_path)

    rt, counters = _counting_runtime(config)
    out1 = tmp_path / "bundle1"
    export_bundle("CIRR", config, out1, runtime=rt)
    first_counts = {name: (c.calls if isinstance(c, CallCounter) else c["calls"])
                    for name, c in counters.items()}
    assert all(v > 0 for v in first_counts.values()), first_counts

    check = _engine("validate", str(out1))
    assert check.returncode == 0, check.stderr
    assert check.stderr == ""

    report_path = tmp_path / "report.json"
    evaluated = _engine("eval", str(out1), "--out", str(report_path))
    assert evaluated.returncode == 0, evaluated.stderr
    report = json.loads(report_path.read_text())
    assert report["query_count"] == 5
    for block in report["metrics"].values():
        for value in block.values():
            assert 0.0 <= value <= 1.0

    # rerun with fresh backends over the same cache: zero model/LLM calls,
    # byte-identical bundle
    rt2, counters2 = _counting_runtime(config)
    out2 = tmp_path / "bundle2"
    export_bundle("CIRR", config, out2, runtime=rt2)
    second_counts = {name: (c.calls if isinstance(c, CallCounter) else c["calls"])
                     for name, c in counters2.items()}
    assert second_counts == {"image": 0, "text": 0, "mapper": 0,
                             "captioner": 0, "llm": 0}
    assert _dir_bytes(out1) == _dir_bytes(out2)


def test_worker_count_does_not_change_output(mini_dataset):
    tmp_path = mini_dataset
    serial = _smoke_config(tmp_path, cache_dir=str(tmp_path / "cache-a"), workers=1)
    threaded = _smoke_config(tmp_path, cache_dir=str(tmp_path / "cache-b"), workers=4)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    export_bundle("CIRR", serial, out_a)
    export_bundle("CIRR", threaded, out_b)
    assert _dir_bytes(out_a) == _dir_bytes(out_b)


def test_plain_prompt_variant_channel(mini_dataset):
    tmp_path = mini_dataset
    config = _smoke_config(tmp_path, emit_plain_prompt_variant=True)
    out = tmp_path / "bundle-variant"
    export_bundle("CIRR", config, out)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["files"]["query_qf_noadd"] == "query.qf.noadd.bin"
    variant = out / "query.qf.noadd.bin"
    assert variant.is_file()
    assert variant.stat().st_size == 5 * 32 * 4
    assert variant.read_bytes() != (out / "query.qf.bin").read_bytes()
    check = _engine("validate", str(out))
    assert check.returncode == 0, check.stderr


def test_failure_names_item_and_resume_uses_cache(mini_dataset):
    tmp_path = mini_dataset
    config = _smoke_config(tmp_path)

    class ExplodingCaptioner(CallCounter):
        def __init__(self, inner, fail_at):
            super().__init__(inner, {"caption_image"})
            self.fail_at = fail_at

        def __getattr__(self, name):
            if name == "caption_image":
                def wrapped(*args, **kwargs):
                    self.calls += 1
                    if self.calls == self.fail_at:
                        raise ExtractorError("synthetic captioner outage")
                    return getattr(self._inner, name)(*args, **kwargs)
                return wrapped
            return super().__getattr__(name)

    rt = Runtime.from_config(config)
    rt.captioner = ExplodingCaptioner(rt.captioner, fail_at=8)
    with pytest.raises(ExtractorError, match="mini-"):
        export_bundle("CIRR", config, tmp_path / "never", runtime=rt)

    # resume: the first seven items are already cached
    rt2, counters2 = _counting_runtime(config)
    out = tmp_path / "resumed"
    export_bundle("CIRR", config, out, runtime=rt2)
    captioner_calls = counters2["captioner"].calls
    assert 0 < captioner_calls <= 25 - 7
    assert _engine("validate", str(out)).returncode == 0


def test_cli_export(mini_dataset):
    tmp_path = mini_dataset
    config = _smoke_config(tmp_path)
    cfg_doc = {k: getattr(config, k) for k in
               ("backbone", "captioner", "llm_model", "captions_per_image",
                "seed", "cache_dir", "adapter", "dataset_root", "split")}
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg_doc))
    out = tmp_path / "cli-bundle"
    proc = subprocess.run([sys.executable, "-m", "cirextract.cli", "export",
                           "--config", str(cfg_path), "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert _engine("validate", str(out)).returncode == 0
