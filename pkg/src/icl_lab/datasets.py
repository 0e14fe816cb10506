"""Labeled classification datasets: record-file loading, the synthetic desk-scale
task, split manipulation, and length statistics.

Record files are line-delimited JSON, one object per line with string
fields ``input`` and ``label`` plus an optional ``split`` of ``train`` or
``test`` (default ``train``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .prompting import PromptTemplate, Tokenizer


@dataclass(frozen=True)
class Example:
    input_text: str
    label: str

    def __post_init__(self) -> None:
        if not self.input_text:
            raise ValueError("example input_text must be non-empty")
        if not self.label:
            raise ValueError("example label must be non-empty")


@dataclass(frozen=True)
class Dataset:
    """Train/test splits over a closed, lexicographically sorted label space."""

    name: str
    train: tuple[Example, ...]
    test: tuple[Example, ...]
    label_space: tuple[str, ...]

    def __post_init__(self) -> None:
        space = set(self.label_space)
        if list(self.label_space) != sorted(space) or len(space) != len(self.label_space):
            raise ValueError("label_space must be sorted and free of duplicates")
        for ex in (*self.train, *self.test):
            if ex.label not in space:
                raise ValueError(f"label {ex.label!r} outside the label space")

    @staticmethod
    def from_examples(name: str, train, test) -> "Dataset":
        labels = sorted({ex.label for ex in (*train, *test)})
        return Dataset(name, tuple(train), tuple(test), tuple(labels))


def load_records(path: str | Path, name: str | None = None) -> Dataset:
    """Load a line-delimited record file into a Dataset.

    Malformed lines are rejected with their 1-based line number; an empty
    file is rejected outright.
    """
    path = Path(path)
    train: list[Example] = []
    test: list[Example] = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}:{lineno}: invalid JSON record: {err}") from None
            if not isinstance(record, dict):
                raise ValueError(f"{path}:{lineno}: record must be an object")
            for key in ("input", "label"):
                if key not in record or not isinstance(record[key], str) or not record[key]:
                    raise ValueError(f"{path}:{lineno}: missing or empty string field {key!r}")
            split = record.get("split", "train")
            if split not in ("train", "test"):
                raise ValueError(f"{path}:{lineno}: split must be 'train' or 'test', got {split!r}")
            ex = Example(record["input"], record["label"])
            (train if split == "train" else test).append(ex)
    if not train and not test:
        raise ValueError(f"{path}: no records found")
    return Dataset.from_examples(name or path.stem, train, test)


def subsample_test(d: Dataset, n: int = 250, seed: int = 0) -> Dataset:
    """Deterministically subsample the test split to at most ``n`` examples.

    Sampling is without replacement; surviving examples keep their original
    relative order. A test split smaller than ``n`` is returned unchanged.
    """
    if n < 1:
        raise ValueError(f"subsample size must be >= 1, got {n}")
    if n >= len(d.test):
        return d
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(d.test), size=n, replace=False))
    test = tuple(d.test[i] for i in keep)
    return Dataset(d.name, d.train, test, d.label_space)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def restrict_labels(d: Dataset, keep_fraction: float, seed: int = 0) -> Dataset:
    """Keep a seeded uniform subset of labels; drop examples of excluded labels.

    The retained count is round-half-up of ``keep_fraction * |label_space|``.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if keep_fraction == 1.0:
        return d
    n_keep = _round_half_up(keep_fraction * len(d.label_space))
    if n_keep < 1:
        raise ValueError(
            f"keep_fraction {keep_fraction} over {len(d.label_space)} labels leaves no labels"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(d.label_space), size=n_keep, replace=False)
    kept = set(d.label_space[i] for i in chosen)
    return Dataset(
        name=d.name,
        train=tuple(ex for ex in d.train if ex.label in kept),
        test=tuple(ex for ex in d.test if ex.label in kept),
        label_space=tuple(sorted(kept)),
    )


def synth_task(num_labels: int, train_size: int, test_size: int, seed: int = 0) -> Dataset:
    """Generate the synthetic classification task.

    Each label owns a disjoint signature token; an example's input is that
    signature token plus two distinct distractors drawn from a pool shared
    across labels (pool size 4 * num_labels, large enough that distractor
    collisions between examples stay rare), shuffled together. Labels are
    assigned round-robin so class counts differ by at most one.
    """
    if num_labels < 2:
        raise ValueError(f"need at least 2 labels, got {num_labels}")
    if train_size < num_labels or test_size < num_labels:
        raise ValueError("split sizes must be at least num_labels")

    rng = np.random.default_rng(seed)
    width = len(str(num_labels - 1))
    labels = [f"label{idx:0{width}d}" for idx in range(num_labels)]
    signatures = [f"sig{idx:0{width}d}" for idx in range(num_labels)]
    pool = [f"tok{idx:03d}" for idx in range(4 * num_labels)]

    def make_split(size: int) -> list[Example]:
        order = rng.permutation(size) % num_labels  # round-robin, shuffled
        out = []
        for label_idx in order:
            distractors = rng.choice(len(pool), size=2, replace=False)
            words = [signatures[label_idx], pool[distractors[0]], pool[distractors[1]]]
            rng.shuffle(words)
            out.append(Example(" ".join(words), labels[label_idx]))
        return out

    train = make_split(train_size)
    test = make_split(test_size)
    return Dataset(f"synth{num_labels}", tuple(train), tuple(test), tuple(labels))


def dataset_stats(d: Dataset, tokenizer: "Tokenizer", template: "PromptTemplate") -> dict:
    """Size, label count, and mean rendered-demonstration token length.

    The mean excludes the ceil(1%) longest demonstrations (ties broken by
    original index) before averaging. Token counts are specific to this
    package's word-level tokenizer, so they are not comparable with counts
    from subword vocabularies.
    """
    lengths = [len(tokenizer.tokenize(template.render_demo(ex))) for ex in d.train]
    if lengths:
        n_drop = math.ceil(0.01 * len(lengths))
        # Longest first, ties by original index; drop the head.
        by_len = sorted(range(len(lengths)), key=lambda i: (-lengths[i], i))
        dropped = set(by_len[:n_drop])
        kept = [ln for i, ln in enumerate(lengths) if i not in dropped]
        avg = float(np.mean(kept)) if kept else 0.0
    else:
        avg = 0.0
    return {
        "avg_demo_length": avg,
        "size": len(d.train),
        "num_labels": len(d.label_space),
    }
