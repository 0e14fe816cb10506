"""Prompt rendering, deterministic word-level tokenization, and demonstration orderings.

Canonical prompt layout, fixed across the package and documented here
because template figures elsewhere disagree on whitespace:

    {input_prefix} {input}\\n{output_prefix} {label}\\n{separator}\\n

repeated per demonstration, followed by the test scaffold
``{input_prefix} {test_input}\\n{output_prefix}``. The separator sits on
its own line; prefixes carry their own trailing colon.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .block_masks import ExampleSpans
from .datasets import Example

_TOKEN_RE = re.compile(r"[a-z0-9_]+|[^a-z0-9_\s]")

TokenSeq = list[int]


@dataclass(frozen=True)
class PromptTemplate:
    input_prefix: str
    output_prefix: str
    separator: str = "=="

    def __post_init__(self) -> None:
        if not self.input_prefix or not self.output_prefix:
            raise ValueError("template prefixes must be non-empty")

    def render_demo(self, ex: Example) -> str:
        return f"{self.input_prefix} {ex.input_text}\n{self.output_prefix} {ex.label}\n{self.separator}\n"

    def render_test_scaffold(self, test_input: str) -> str:
        return f"{self.input_prefix} {test_input}\n{self.output_prefix}"


TEMPLATES: dict[str, PromptTemplate] = {
    "trec": PromptTemplate("Question:", "Type:"),
    "intent": PromptTemplate("utterance:", "intent:"),
    "generic": PromptTemplate("input:", "output:"),
}


def get_template(spec) -> PromptTemplate:
    """Resolve a template preset name or a custom mapping."""
    if isinstance(spec, PromptTemplate):
        return spec
    if isinstance(spec, str):
        try:
            return TEMPLATES[spec]
        except KeyError:
            raise ValueError(f"unknown template preset {spec!r}; known: {sorted(TEMPLATES)}") from None
    return PromptTemplate(
        input_prefix=spec["input_prefix"],
        output_prefix=spec["output_prefix"],
        separator=spec.get("separator", "=="),
    )


class Tokenizer:
    """Lowercasing whitespace/punctuation tokenizer with an open, freezable vocabulary.

    Ids are assigned in first-seen order. After :meth:`freeze`, an unseen
    surface form raises, which flags dataset/test ordering bugs where text
    arrives after the vocabulary was fixed.
    """

    def __init__(self) -> None:
        self._id_of: dict[str, int] = {}
        self._tokens: list[str] = []
        self._frozen = False

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        self._frozen = True

    @staticmethod
    def split(text: str) -> list[str]:
        """Surface forms: lowercased words and single-character punctuation."""
        return _TOKEN_RE.findall(text.lower())

    def tokenize(self, text: str) -> TokenSeq:
        out: TokenSeq = []
        for surface in self.split(text):
            tid = self._id_of.get(surface)
            if tid is None:
                if self._frozen:
                    raise ValueError(
                        f"token {surface!r} first seen after vocabulary freeze"
                    )
                tid = len(self._tokens)
                self._id_of[surface] = tid
                self._tokens.append(surface)
            out.append(tid)
        return out

    def detokenize(self, tokens: TokenSeq) -> str:
        return " ".join(self._tokens[t] for t in tokens)

    def token_string(self, token_id: int) -> str:
        return self._tokens[token_id]


@dataclass(frozen=True)
class Ordering:
    """How a selected demonstration list is arranged in the prompt.

    ``label_sorted`` groups identical labels contiguously, groups ordered
    lexicographically by label and examples within a group by original
    index, so the adversarial arrangement is deterministic.
    """

    kind: str
    seed: int | None = None

    KINDS = ("as_given", "shuffled", "label_sorted")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown ordering kind {self.kind!r}")
        if self.kind == "shuffled" and self.seed is None:
            raise ValueError("shuffled ordering requires a seed")

    @classmethod
    def as_given(cls) -> "Ordering":
        return cls("as_given")

    @classmethod
    def shuffled(cls, seed: int) -> "Ordering":
        return cls("shuffled", seed)

    @classmethod
    def label_sorted(cls) -> "Ordering":
        return cls("label_sorted")

    def describe(self) -> str:
        return self.kind if self.seed is None else f"{self.kind}({self.seed})"


def order_examples(demos: list[Example], ordering: Ordering) -> list[Example]:
    """Return a permutation of ``demos`` under the requested ordering."""
    if ordering.kind == "as_given":
        return list(demos)
    if ordering.kind == "shuffled":
        perm = np.random.default_rng(ordering.seed).permutation(len(demos))
        return [demos[i] for i in perm]
    # label_sorted
    indexed = list(enumerate(demos))
    indexed.sort(key=lambda pair: (pair[1].label, pair[0]))
    return [ex for _, ex in indexed]


def render_prompt(
    demos: list[Example], test_input: str, template: PromptTemplate, tokenizer: Tokenizer
) -> tuple[str, ExampleSpans, TokenSeq]:
    """Render demonstrations plus the test scaffold, tracking per-demo token spans.

    Returns the prompt text, the spans over its token sequence, and the
    token sequence itself. Token streams of the per-demo renders
    concatenate exactly because demos are joined at whitespace boundaries.
    """
    pieces: list[str] = []
    spans: list[tuple[int, int]] = []
    tokens: TokenSeq = []
    for ex in demos:
        piece = template.render_demo(ex)
        piece_tokens = tokenizer.tokenize(piece)
        spans.append((len(tokens), len(tokens) + len(piece_tokens)))
        tokens.extend(piece_tokens)
        pieces.append(piece)

    scaffold = template.render_test_scaffold(test_input)
    scaffold_tokens = tokenizer.tokenize(scaffold)
    test_span = (len(tokens), len(tokens) + len(scaffold_tokens))
    tokens.extend(scaffold_tokens)
    pieces.append(scaffold)

    return "".join(pieces), ExampleSpans(spans, test_span), tokens
