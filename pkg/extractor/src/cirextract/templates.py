"""Prompt templates used by the extraction pipeline.

Three templates exist:

* ``f_g``   — the fine-grained retrieval prompt handed to the text encoder.
  Its default is fixed: ``a photo of $ that [T]. And the photo should have
  [objects most likely added]`` where ``$`` marks the pseudo-token slot,
  ``[T]`` the modification text and ``[objects most likely added]`` the
  LLM-predicted additions.
* ``p_a``   — asks the LLM which objects are most likely added, given the
  first reference caption ``[C1]`` and the modification ``[T]``.
* ``p_m``   — asks the LLM for a modified caption, given one reference
  caption ``[C]`` and the modification ``[T]``.

The ``p_a``/``p_m`` defaults are house paraphrases, not canonical wordings;
swap them via template files when better prompts are available.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

PSEUDO_MARKER = "$"

FG_DEFAULT = "a photo of $ that [T]. And the photo should have [objects most likely added]"
FG_PLAIN_DEFAULT = "a photo of $ that [T]"
PA_DEFAULT = ("An image is described as: [C1]. It should be modified as follows: [T]. "
              "List only the objects most likely added to the modified image.")
PM_DEFAULT = ("An image is described as: [C]. It should be modified as follows: [T]. "
              "Write one caption describing the modified image.")

_REQUIRED = {
    "f_g": (PSEUDO_MARKER, "[T]", "[objects most likely added]"),
    "f_g_plain": (PSEUDO_MARKER, "[T]"),
    "p_a": ("[C1]", "[T]"),
    "p_m": ("[C]", "[T]"),
}

_DEFAULTS = {
    "f_g": FG_DEFAULT,
    "f_g_plain": FG_PLAIN_DEFAULT,
    "p_a": PA_DEFAULT,
    "p_m": PM_DEFAULT,
}


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    text: str

    def __post_init__(self) -> None:
        if self.template_id not in _REQUIRED:
            raise ConfigError(f"unknown template id {self.template_id!r}; "
                              f"expected one of {sorted(_REQUIRED)}")
        missing = [ph for ph in _REQUIRED[self.template_id] if ph not in self.text]
        if missing:
            raise ConfigError(
                f"template {self.template_id} is missing placeholders {missing}")

    def render(self, **values: str) -> str:
        """Substitute placeholder tokens; the pseudo marker is left alone."""
        out = self.text
        mapping = {"[T]": values.get("modification"),
                   "[C1]": values.get("first_caption"),
                   "[C]": values.get("caption"),
                   "[objects most likely added]": values.get("additions")}
        for token, value in mapping.items():
            if token in _REQUIRED[self.template_id]:
                if value is None or value == "":
                    raise ConfigError(
                        f"template {self.template_id} needs a value for {token}")
                out = out.replace(token, value)
        return out


def default_template(template_id: str) -> PromptTemplate:
    return PromptTemplate(template_id, _DEFAULTS[template_id])


def load_template(template_id: str, path: str | Path | None) -> PromptTemplate:
    """Template from a UTF-8 text file, or the built-in default."""
    if path is None:
        return default_template(template_id)
    text = Path(path).read_text(encoding="utf-8").strip("\n")
    return PromptTemplate(template_id, text)
