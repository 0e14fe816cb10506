"""A constructed two-layer attention-only decoder that does induction-style ICL.

The weights are written analytically, not trained, so every experiment
outcome in this package is derivable by hand. Token codes are the first
``vocab_size`` standard-basis vectors of R^d_model; the residual stream
stacks three d_model-wide channels:

    [ current-token code | recent-context code | retrieved code ]

Layer 1 is a position-bias head: its attention over earlier positions is
largest at offset -1, flat over the next few offsets, and decays
geometrically beyond, and it writes that weighted sum of earlier token
codes into the recent-context channel. Layer 2 is a match head: queries
mix the current code with the recent-context code, keys read the
recent-context channel, and values copy the attended position's own code
into the retrieved channel, which is all the unembedding reads. Net
effect: the position after token x concentrates its prediction on
whatever followed x (or followed x-like context) earlier in the sequence.

Position 0 of every sequence is an internal anchor with a zero embedding.
It absorbs the out-of-range mass of the layer-1 profile (keeping the
profile normalization exactly constant at every position) and soaks up
the match head's attention when nothing matches, which makes the no-match
output exactly neutral. Both heads exclude their own position; the anchor
is invisible in the public interface, which counts real tokens only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_core import masked_row_softmax

# Constructed-model constants. The layer-1 profile gives offset 1 unit
# mass, offsets 2..PREV_BAND_WIDTH a flat PREV_BAND, and a geometric tail
# beyond (making nearby content count by token, not by exact position);
# query_mix weighs recent context against the current token in match
# queries; match_sharpness turns small score differences into near-hard
# attention; sink_bias is what a no-match query falls back to.
PREV_BAND = 0.25
PREV_BAND_WIDTH = 6
PREV_TAIL_DECAY = 0.5
QUERY_MIX = 0.5
MATCH_SHARPNESS = 2.0e4
MATCH_GAIN = 1.0
SINK_BIAS = 40.0

BIAS_TABLE_LEN = 8

MAGIC = b"ICLTOYM1"
FORMAT_VERSION = 1


class WeightFormatError(ValueError):
    """Raised when a weight file fails magic/version/shape validation."""


@dataclass(frozen=True)
class HeadWeights:
    wq: np.ndarray  # (3*d_model, d_model)
    wk: np.ndarray  # (3*d_model, d_model)
    wv: np.ndarray  # (3*d_model, d_model)
    wo: np.ndarray  # (d_model, 3*d_model)


@dataclass(frozen=True)
class ModelWeights:
    """Weights of the two-layer decoder.

    ``d_model`` is the token-code dimension (>= vocab_size); the residual
    stream is three channels wide, 3 * d_model. ``position_bias`` holds one
    row of positional score parameters per layer:

        [b_1 .. b_8, tail_slope, anchor_mode, anchor_bias]

    A real offset d scores b_d for d <= 8 and b_8 + tail_slope * (d - 8)
    beyond. With anchor_mode 1.0 the anchor column absorbs the profile's
    out-of-range mass (score ln of the remaining mass, which keeps the
    softmax denominator position-independent); with anchor_mode 0.0 the
    anchor scores the constant anchor_bias.
    """

    vocab_size: int
    d_model: int
    embed: np.ndarray  # (vocab_size, 3*d_model), orthogonal unit rows
    layers: tuple[HeadWeights, HeadWeights]
    unembed: np.ndarray  # (3*d_model, vocab_size)
    position_bias: np.ndarray  # (2, BIAS_TABLE_LEN + 3)

    @property
    def width(self) -> int:
        return 3 * self.d_model

    def validate(self) -> None:
        d, w = self.d_model, self.width
        if self.vocab_size < 1 or d < self.vocab_size:
            raise ValueError(
                f"need d_model >= vocab_size >= 1, got d_model={d} vocab={self.vocab_size}"
            )
        expect = {
            "embed": (self.vocab_size, w),
            "unembed": (w, self.vocab_size),
            "position_bias": (2, BIAS_TABLE_LEN + 3),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        for i, head in enumerate(self.layers):
            for name in ("wq", "wk", "wv"):
                if getattr(head, name).shape != (w, d):
                    raise ValueError(f"layer {i} {name} must be {(w, d)}")
            if head.wo.shape != (d, w):
                raise ValueError(f"layer {i} wo must be {(d, w)}")
        for i in range(2):
            mode, slope = self.position_bias[i, -2], self.position_bias[i, -3]
            if mode not in (0.0, 1.0):
                raise ValueError(f"layer {i} anchor_mode must be 0.0 or 1.0, got {mode}")
            if mode == 1.0 and slope >= 0.0:
                raise ValueError(
                    f"layer {i} absorbs its tail into the anchor, so tail_slope must be < 0"
                )


def build_induction_model(vocab_size: int, d_model: int | None = None) -> ModelWeights:
    """Write the induction construction into concrete weight matrices."""
    if d_model is None:
        d_model = vocab_size
    if d_model < vocab_size:
        raise ValueError(
            f"d_model={d_model} too small: orthogonal codes need d_model >= vocab_size={vocab_size}"
        )
    d = d_model
    width = 3 * d
    eye = np.eye(d)
    zeros = np.zeros((width, d))

    embed = np.zeros((vocab_size, width))
    embed[:, :vocab_size] = np.eye(vocab_size)

    def stack(cur: float, prev: float, out: float) -> np.ndarray:
        m = np.zeros((width, d))
        m[0:d] = cur * eye
        m[d : 2 * d] = prev * eye
        m[2 * d : 3 * d] = out * eye
        return m

    # Layer 1: scores come from the position bias alone; values copy the
    # current-token code and the output lands in the recent-context channel.
    layer1 = HeadWeights(
        wq=zeros.copy(),
        wk=zeros.copy(),
        wv=stack(1.0, 0.0, 0.0),
        wo=stack(0.0, 1.0, 0.0).T,
    )
    # Layer 2: query = current + mix * recent, key = sharpness * recent,
    # value = current code, written into the retrieved channel.
    layer2 = HeadWeights(
        wq=stack(1.0, QUERY_MIX, 0.0),
        wk=stack(0.0, MATCH_SHARPNESS, 0.0),
        wv=stack(1.0, 0.0, 0.0),
        wo=stack(0.0, 0.0, MATCH_GAIN).T,
    )

    unembed = np.zeros((width, vocab_size))
    unembed[2 * d : 2 * d + vocab_size] = np.eye(vocab_size)

    log_band = float(np.log(PREV_BAND))
    log_tail = float(np.log(PREV_TAIL_DECAY))
    table = np.empty(BIAS_TABLE_LEN)
    table[0] = 0.0
    table[1:PREV_BAND_WIDTH] = log_band
    for i in range(PREV_BAND_WIDTH, BIAS_TABLE_LEN):
        table[i] = log_band + (i + 1 - PREV_BAND_WIDTH) * log_tail
    position_bias = np.array(
        [
            [*table, log_tail, 1.0, 0.0],
            [*np.zeros(BIAS_TABLE_LEN), 0.0, 0.0, SINK_BIAS],
        ]
    )

    w = ModelWeights(
        vocab_size=vocab_size,
        d_model=d,
        embed=embed,
        layers=(layer1, layer2),
        unembed=unembed,
        position_bias=position_bias,
    )
    w.validate()
    return w


class _BiasProfile:
    """Positional score profile of one layer, in a vectorizable form."""

    def __init__(self, row: np.ndarray):
        self.table = row[:BIAS_TABLE_LEN]
        self.tail_slope = float(row[BIAS_TABLE_LEN])
        self.absorbs_tail = bool(row[BIAS_TABLE_LEN + 1])
        self.anchor_bias = float(row[BIAS_TABLE_LEN + 2])
        self.is_flat = not self.table.any() and self.tail_slope == 0.0
        if self.absorbs_tail:
            masses = np.exp(self.table)
            tail_ratio = float(np.exp(self.tail_slope))
            tail_mass = masses[-1] * tail_ratio / (1.0 - tail_ratio)
            # remaining mass after offsets 1..r, for r = 0..BIAS_TABLE_LEN
            self._remaining = np.concatenate(
                [[masses.sum() + tail_mass - 0.0], masses.sum() + tail_mass - np.cumsum(masses)]
            )
            self._log_tail_last = float(self.table[-1])

    def offset_scores(self, offsets: np.ndarray) -> np.ndarray:
        """Bias for real offsets (entries < 1 are junk and must be masked out)."""
        if self.is_flat:
            return np.zeros_like(offsets, dtype=np.float64)
        idx = np.clip(offsets, 1, BIAS_TABLE_LEN)
        scores = self.table[idx - 1]
        over = offsets > BIAS_TABLE_LEN
        if over.any():
            scores = scores + over * (
                self.tail_slope * np.maximum(offsets - BIAS_TABLE_LEN, 0)
            )
        return scores

    def anchor_scores(self, positions: np.ndarray) -> np.ndarray:
        """Anchor-column score for rows at the given real positions."""
        if not self.absorbs_tail:
            return np.full(positions.shape, self.anchor_bias, dtype=np.float64)
        out = np.empty(positions.shape, dtype=np.float64)
        small = positions <= BIAS_TABLE_LEN
        out[small] = np.log(self._remaining[positions[small]])
        big = ~small
        if big.any():
            # ln of the geometric tail mass beyond position r, computed in
            # log space so it never underflows to -inf prematurely.
            out[big] = (
                self._log_tail_last
                + (positions[big] - BIAS_TABLE_LEN + 1) * self.tail_slope
                - np.log1p(-np.exp(self.tail_slope))
            )
        return out


class KVCache:
    """Per-layer key/value rows for incremental decoding.

    Row 0 of every array is the internal anchor; the public length counts
    real tokens only. Appending is the only mutation: stored arrays are
    frozen, so clones share prefix rows safely (copy-on-extend).
    """

    def __init__(self, k1, v1, k2, v2, last_logits=None):
        self.k1 = _frozen(k1)
        self.v1 = _frozen(v1)
        self.k2 = _frozen(k2)
        self.v2 = _frozen(v2)
        self.last_logits = last_logits

    def __len__(self) -> int:
        return self.n_real

    @property
    def n_real(self) -> int:
        return self.k1.shape[0] - 1

    def clone(self) -> "KVCache":
        return KVCache(self.k1, self.v1, self.k2, self.v2, self.last_logits)

    def _append(self, k1, v1, k2, v2, last_logits) -> None:
        self.k1 = _frozen(np.concatenate([self.k1, k1]))
        self.v1 = _frozen(np.concatenate([self.v1, v1]))
        self.k2 = _frozen(np.concatenate([self.k2, k2]))
        self.v2 = _frozen(np.concatenate([self.v2, v2]))
        self.last_logits = last_logits


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


def new_cache(w: ModelWeights) -> KVCache:
    """Empty cache holding only the anchor row (zero keys and values)."""
    z = np.zeros((1, w.d_model))
    return KVCache(z, z.copy(), z.copy(), z.copy())


_ROW_CHUNK = 1024  # bounds transient score-matrix memory during long encodes


def _extend(
    w: ModelWeights, cache: KVCache, tokens, allowed_rows: np.ndarray
) -> np.ndarray:
    """Append ``tokens`` to ``cache`` and return their logits rows.

    ``allowed_rows[t]`` gives the externally allowed real columns for new
    token t over all real positions up to and including itself. Both heads
    additionally enforce strict causality and always see the anchor.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    if tokens.min() < 0 or tokens.max() >= w.vocab_size:
        raise ValueError(f"token id out of range [0, {w.vocab_size})")
    t_new = tokens.size
    n_prev = cache.n_real
    n_real = n_prev + t_new
    allowed_rows = np.asarray(allowed_rows, dtype=bool)
    if allowed_rows.shape != (t_new, n_real):
        raise ValueError(
            f"allowed rows must have shape {(t_new, n_real)}, got {allowed_rows.shape}"
        )

    h0 = w.embed[tokens]  # (T, width)
    positions = np.arange(n_prev, n_real)  # real position of each new row

    l1, l2 = w.layers
    k1_new = h0 @ l1.wk
    v1_new = h0 @ l1.wv
    k1_all = np.concatenate([cache.k1, k1_new])
    v1_all = np.concatenate([cache.v1, v1_new])

    a1 = _attend(w, 0, h0 @ l1.wq, k1_all, v1_all, positions, allowed_rows) @ l1.wo
    h1 = h0 + a1

    k2_new = h1 @ l2.wk
    v2_new = h1 @ l2.wv
    k2_all = np.concatenate([cache.k2, k2_new])
    v2_all = np.concatenate([cache.v2, v2_new])

    a2 = _attend(w, 1, h1 @ l2.wq, k2_all, v2_all, positions, allowed_rows) @ l2.wo
    h2 = h1 + a2

    logits = h2 @ w.unembed
    cache._append(k1_new, v1_new, k2_new, v2_new, logits[-1].copy())
    return logits


def _attend(
    w: ModelWeights,
    layer: int,
    q: np.ndarray,
    k_all: np.ndarray,
    v_all: np.ndarray,
    positions: np.ndarray,
    allowed_rows: np.ndarray,
) -> np.ndarray:
    profile = _BiasProfile(w.position_bias[layer])
    n_real = k_all.shape[0] - 1
    out = np.empty((positions.size, w.d_model))
    for lo in range(0, positions.size, _ROW_CHUNK):
        hi = min(lo + _ROW_CHUNK, positions.size)
        pos = positions[lo:hi]
        scores = q[lo:hi] @ k_all.T  # (rows, 1 + n_real)
        offsets = pos[:, None] - np.arange(n_real)[None, :]
        allowed = np.empty((hi - lo, 1 + n_real), dtype=bool)
        allowed[:, 0] = True
        allowed[:, 1:] = (offsets >= 1) & allowed_rows[lo:hi]
        scores[:, 0] += profile.anchor_scores(pos)
        if not profile.is_flat:
            real = scores[:, 1:]
            keep = allowed[:, 1:]
            real[keep] += profile.offset_scores(offsets)[keep]
        probs = masked_row_softmax(scores, allowed)
        out[lo:hi] = probs @ v_all
    return out


def forward_full(w: ModelWeights, tokens, mask: np.ndarray) -> np.ndarray:
    """Logits for every position of ``tokens`` under the given attention mask."""
    tokens = np.asarray(tokens, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (tokens.size, tokens.size):
        raise ValueError(
            f"mask shape {mask.shape} does not match {tokens.size} tokens"
        )
    return _extend(w, new_cache(w), tokens, mask)


def encode_sequence(w: ModelWeights, tokens, mask: np.ndarray) -> KVCache:
    """Encode ``tokens`` once, returning the cache (with last-step logits)."""
    cache = new_cache(w)
    _extend(w, cache, np.asarray(tokens, dtype=np.int64), np.asarray(mask, dtype=bool))
    return cache


def decode_step(
    w: ModelWeights, cache: KVCache, token: int, allowed_row: np.ndarray
) -> np.ndarray:
    """Consume one token; returns the next-token logits.

    ``allowed_row`` has one entry per real position including the new one;
    the final entry (self) must be true. Matches the corresponding row of
    :func:`forward_full` on the concatenated sequence.
    """
    allowed_row = np.asarray(allowed_row, dtype=bool)
    if allowed_row.shape != (cache.n_real + 1,):
        raise ValueError(
            f"allowed_row must have length {cache.n_real + 1}, got {allowed_row.shape}"
        )
    if not allowed_row[-1]:
        raise ValueError("allowed_row must allow the new token's own position")
    logits = _extend(w, cache, np.asarray([token], dtype=np.int64), allowed_row[None, :])
    return logits[0]


def extend_with_tokens(w: ModelWeights, cache: KVCache, tokens) -> np.ndarray:
    """Append tokens whose rows attend to everything before them (plus self).

    This is the test-scaffold extension: returns one logits row per token.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    n_prev = cache.n_real
    t_new = tokens.size
    allowed = np.zeros((t_new, n_prev + t_new), dtype=bool)
    for t in range(t_new):
        allowed[t, : n_prev + t + 1] = True
    return _extend(w, cache, tokens, allowed)


_TENSOR_ORDER = (
    "embed",
    "layer0.wq",
    "layer0.wk",
    "layer0.wv",
    "layer0.wo",
    "layer1.wq",
    "layer1.wk",
    "layer1.wv",
    "layer1.wo",
    "unembed",
    "position_bias",
)


def _tensor_map(w: ModelWeights) -> dict[str, np.ndarray]:
    out = {"embed": w.embed, "unembed": w.unembed, "position_bias": w.position_bias}
    for i, head in enumerate(w.layers):
        for name in ("wq", "wk", "wv", "wo"):
            out[f"layer{i}.{name}"] = getattr(head, name)
    return out


def _expected_shapes(vocab_size: int, d_model: int) -> dict[str, tuple[int, int]]:
    width = 3 * d_model
    shapes = {
        "embed": (vocab_size, width),
        "unembed": (width, vocab_size),
        "position_bias": (2, BIAS_TABLE_LEN + 3),
    }
    for i in range(2):
        for name in ("wq", "wk", "wv"):
            shapes[f"layer{i}.{name}"] = (width, d_model)
        shapes[f"layer{i}.wo"] = (d_model, width)
    return shapes


def save_weights(w: ModelWeights, path: str | Path) -> None:
    """Serialize weights: magic, version, vocab and d_model headers, then
    each tensor as a u32 element count plus little-endian float64 data."""
    w.validate()
    tensors = _tensor_map(w)
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, w.vocab_size, w.d_model))
        for name in _TENSOR_ORDER:
            data = np.ascontiguousarray(tensors[name], dtype="<f8")
            fh.write(struct.pack("<I", data.size))
            fh.write(data.tobytes(order="C"))


def load_weights(path: str | Path) -> ModelWeights:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 12:
        raise WeightFormatError(f"{path}: file too short for a weight header")
    if raw[: len(MAGIC)] != MAGIC:
        raise WeightFormatError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    version, vocab_size, d_model = struct.unpack_from("<III", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"{path}: unsupported format version {version}")
    shapes = _expected_shapes(vocab_size, d_model)

    offset = len(MAGIC) + 12
    loaded: dict[str, np.ndarray] = {}
    for name in _TENSOR_ORDER:
        shape = shapes[name]
        expected = shape[0] * shape[1]
        if offset + 4 > len(raw):
            raise WeightFormatError(f"{path}: truncated before tensor {name!r}")
        (count,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        if count != expected:
            raise WeightFormatError(
                f"{path}: tensor {name!r} has {count} elements, expected {expected}"
            )
        end = offset + 8 * count
        if end > len(raw):
            raise WeightFormatError(f"{path}: truncated inside tensor {name!r}")
        loaded[name] = (
            np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset = end
    if offset != len(raw):
        raise WeightFormatError(f"{path}: {len(raw) - offset} trailing bytes")

    w = ModelWeights(
        vocab_size=vocab_size,
        d_model=d_model,
        embed=loaded["embed"],
        layers=(
            HeadWeights(*(loaded[f"layer0.{n}"] for n in ("wq", "wk", "wv", "wo"))),
            HeadWeights(*(loaded[f"layer1.{n}"] for n in ("wq", "wk", "wv", "wo"))),
        ),
        unembed=loaded["unembed"],
        position_bias=loaded["position_bias"],
    )
    w.validate()
    return w


def weights_equal(a: ModelWeights, b: ModelWeights) -> bool:
    """Field-by-field exact equality."""
    if (a.vocab_size, a.d_model) != (b.vocab_size, b.d_model):
        return False
    ta, tb = _tensor_map(a), _tensor_map(b)
    return all(np.array_equal(ta[name], tb[name]) for name in _TENSOR_ORDER)
