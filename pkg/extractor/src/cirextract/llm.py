"""Language-model client: retries with exponential backoff plus a hard cache.

Every completion is cached by (model id, prompt) content hash with the
prompt and response stored verbatim, so reruns are free and auditable.
Transports are plain callables ``prompt -> response``; the HTTP transport
speaks the common chat-completions JSON shape.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

from .cache import ContentCache, content_key
from .errors import ConfigError, TransportError
from .templates import PromptTemplate


@dataclass
class LlmClient:
    transport: Callable[[str], str]
    cache: ContentCache
    model_id: str
    max_retries: int = 5
    backoff_base: float = 0.5
    sleep: Callable[[float], None] = time.sleep

    def complete(self, prompt: str) -> str:
        if not prompt:
            raise ConfigError("empty prompt")
        key = content_key("llm", self.model_id, {"prompt": prompt})
        hit = self.cache.get(key)
        if hit is not None:
            return hit["response"]
        last: TransportError | None = None
        for attempt in range(self.max_retries):
            try:
                response = self.transport(prompt)
                break
            except TransportError as exc:
                last = exc
                if attempt + 1 < self.max_retries:
                    self.sleep(self.backoff_base * (2 ** attempt))
        else:
            raise TransportError(
                f"giving up after {self.max_retries} attempts: {last}") from last
        self.cache.put(key, {"response": response},
                       request={"model": self.model_id, "prompt": prompt})
        return response


def gen_f_add(client: LlmClient, first_caption: str, modification: str,
              template: PromptTemplate) -> str:
    """Ask which objects the modification most likely adds."""
    if not first_caption:
        raise ConfigError("first caption is empty")
    if not modification:
        raise ConfigError("modification text is empty")
    return client.complete(template.render(first_caption=first_caption,
                                           modification=modification))


def gen_modified_captions(client: LlmClient, captions: Sequence[str],
                          modification: str, template: PromptTemplate) -> list[str]:
    """One modified caption per reference caption, each its own prompt."""
    if not captions:
        raise ConfigError("no captions to modify")
    return [client.complete(template.render(caption=c, modification=modification))
            for c in captions]


class HttpTransport:
    """Chat-completions POST via requests; raises TransportError on failure."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None,
                 timeout: float = 60.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def __call__(self, prompt: str) -> str:
        import requests
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"model": self.model,
                "messages": [{"role": "user", "content": prompt}]}
        try:
            resp = requests.post(self.endpoint, json=body, headers=headers,
                                 timeout=self.timeout)
            resp.raise_for_status()
            doc = resp.json()
            return doc["choices"][0]["message"]["content"]
        except Exception as exc:
            raise TransportError(f"LLM request failed: {exc}") from exc


class OfflineTransport:
    """Deterministic stand-in responses for smoke runs and tests.

    Derives a short plausible answer from the prompt hash so distinct
    prompts get distinct, stable responses.
    """

    _OBJECTS = ("a kite", "two glasses", "a santa hat", "a green bus",
                "an umbrella", "a wooden sign", "a red scarf")

    def __call__(self, prompt: str) -> str:
        import hashlib
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        obj = self._OBJECTS[digest[0] % len(self._OBJECTS)]
        if "objects most likely added" in prompt.lower() or "List only" in prompt:
            return obj
        return f"the described scene, now with {obj} (variant {digest[1] % 97})"
