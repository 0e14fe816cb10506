"""Example-block attention masks: sink block, local blocks, and their token-level expansion.

A mask is parameterized by the block size ``b`` (examples per block), a
sink flag ``s`` (the leading block every later block may attend to), and a
local count ``w`` (how many immediately preceding blocks stay visible).
``(s=1, w=2)`` is the pattern used by the shipped experiment presets;
``b >= k`` collapses every pattern to plain causal attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

AttentionMask = np.ndarray  # square boolean matrix over token positions


@dataclass(frozen=True)
class BlockMaskConfig:
    """Sparse-attention pattern over example blocks."""

    block_size_b: int
    sink_blocks_s: int = 1
    local_blocks_w: int = 2

    def __post_init__(self) -> None:
        if self.block_size_b < 1:
            raise ValueError(f"block_size_b must be >= 1, got {self.block_size_b}")
        if self.sink_blocks_s < 0:
            raise ValueError(f"sink_blocks_s must be >= 0, got {self.sink_blocks_s}")
        if self.local_blocks_w < 0:
            raise ValueError(f"local_blocks_w must be >= 0, got {self.local_blocks_w}")

    @property
    def is_validated_sink_count(self) -> bool:
        # Only a single sink block is exercised by the experiment suite;
        # larger values are accepted but unvalidated.
        return self.sink_blocks_s in (0, 1)


@dataclass(frozen=True)
class ExampleSpans:
    """Token ranges [start, end) of each demonstration plus the test scaffold.

    Spans must be contiguous, non-overlapping and ascending; the test span
    starts where the last demonstration ends. Tokens before the first span
    (a shared prompt preamble, if a template ever grows one) belong to the
    sink block.
    """

    spans: tuple[tuple[int, int], ...]
    test_span: tuple[int, int]

    def __init__(self, spans, test_span) -> None:
        object.__setattr__(self, "spans", tuple((int(a), int(b)) for a, b in spans))
        object.__setattr__(self, "test_span", (int(test_span[0]), int(test_span[1])))
        self._validate()

    def _validate(self) -> None:
        prev_end = None
        for i, (a, b) in enumerate(self.spans):
            if a < 0 or b <= a:
                raise ValueError(f"span {i} is empty or negative: [{a}, {b})")
            if prev_end is not None and a != prev_end:
                raise ValueError(f"span {i} does not start at the previous end ({a} != {prev_end})")
            prev_end = b
        ts, te = self.test_span
        expected = prev_end if prev_end is not None else ts
        if ts != expected:
            raise ValueError(f"test span starts at {ts}, expected {expected}")
        if te < ts:
            raise ValueError(f"test span ends before it starts: [{ts}, {te})")

    @property
    def n_demos(self) -> int:
        return len(self.spans)

    @property
    def n_tokens(self) -> int:
        return self.test_span[1]


def example_block_mask(k: int, cfg: BlockMaskConfig) -> np.ndarray:
    """Block-level visibility matrix over ceil(k / b) example blocks.

    Block ``i`` sees itself, the ``w`` blocks immediately before it, and
    the first ``s`` blocks. When ``b >= k`` there is a single block and the
    result is the (trivially all-true) full-causal pattern.
    """
    if k < 1:
        raise ValueError(f"need at least one demonstration, got k={k}")
    b, s, w = cfg.block_size_b, cfg.sink_blocks_s, cfg.local_blocks_w
    n_blocks = math.ceil(k / b)
    i = np.arange(n_blocks)[:, None]
    j = np.arange(n_blocks)[None, :]
    own = j == i
    local = (j > i - 1 - w) & (j < i)
    sink = j < s
    return (own | local | (sink & (j <= i))).astype(bool)


def causal_mask(n_tokens: int) -> AttentionMask:
    """Plain lower-triangular causal mask."""
    if n_tokens < 1:
        raise ValueError(f"need at least one token, got {n_tokens}")
    return np.tril(np.ones((n_tokens, n_tokens), dtype=bool))


def token_mask_from_spans(
    block_mask: np.ndarray, spans: ExampleSpans, block_size_b: int
) -> AttentionMask:
    """Expand a block-level mask to token level.

    Demonstration ``m`` lives in block ``m // b``; a token may attend to an
    earlier token iff their blocks see each other. Every test-span token
    attends to all demonstration tokens and causally within the test span.
    ``block_size_b`` is passed explicitly because the block count alone
    does not determine the demo-to-block assignment (e.g. 4 demos over 2
    blocks fits both b=2 and b=3).
    """
    block_mask = np.asarray(block_mask, dtype=bool)
    k = spans.n_demos
    if k < 1:
        raise ValueError("need at least one demonstration span")
    n_blocks = math.ceil(k / block_size_b)
    if block_mask.shape != (n_blocks, n_blocks):
        raise ValueError(
            f"block mask shape {block_mask.shape} inconsistent with "
            f"{k} demos at block size {block_size_b} (expected {n_blocks}x{n_blocks})"
        )

    n = spans.n_tokens
    ts, _ = spans.test_span
    # Block id per token; leading non-demonstration tokens sit in block 0.
    token_block = np.zeros(n, dtype=int)
    for m, (a, b_end) in enumerate(spans.spans):
        token_block[a:b_end] = m // block_size_b

    demo_allowed = block_mask[token_block[:ts][:, None], token_block[:ts][None, :]]
    pos = np.arange(n)
    lower = pos[None, :] <= pos[:, None]

    mask = np.zeros((n, n), dtype=bool)
    mask[:ts, :ts] = demo_allowed
    mask[ts:, :ts] = True  # test rows see every demonstration token
    mask &= lower
    np.fill_diagonal(mask, True)
    mask[ts:, ts:] = lower[ts:, ts:]  # causal within the test scaffold
    return mask


def build_token_mask(spans: ExampleSpans, cfg: BlockMaskConfig | None) -> AttentionMask:
    """Token mask for a config, or plain causal when ``cfg`` is None ("full")."""
    if cfg is None or spans.n_demos == 0:
        return causal_mask(max(spans.n_tokens, 1))
    block = example_block_mask(spans.n_demos, cfg)
    return token_mask_from_spans(block, spans, cfg.block_size_b)


def max_attendable(cfg: BlockMaskConfig) -> int:
    """Demonstrations strictly attendable by the last demo of a late block.

    Counts sink examples, local-block examples and earlier same-block
    examples: s*b + w*b + (b - 1). For (s=1, w=2) this is 4b - 1.
    """
    b = cfg.block_size_b
    return cfg.sink_blocks_s * b + cfg.local_blocks_w * b + (b - 1)
