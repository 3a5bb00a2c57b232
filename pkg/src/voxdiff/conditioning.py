"""Caption conditioning: text encoders, the null condition, condition dropout,
and the guided score combination used at sampling time.

Two encoder implementations sit behind one interface:

* ``TextEncoder`` — a small trainable encoder (whitespace tokenizer over a
  fixed vocabulary, learned token + position embeddings, two self-attention
  blocks). It is trained jointly with the denoiser and checkpointed with it.
* ``FileBackedTextEncoder`` — serves precomputed embeddings from a ``VEMB``
  file, so a frozen external text model can be plugged in without adding a
  dependency. Entries are keyed by an 8-byte BLAKE2b hash of the caption.

Both map a caption string to fixed-length ``ConditionTokens`` and reserve the
empty caption for the null (unconditional) sequence. ``guided_score``
implements classifier-free guidance: the unconditional prediction plus
``s`` times the (conditional - unconditional) difference.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
import warnings

import numpy as np

from voxdiff.denoiser import TokenAttention
from voxdiff.nn import Embedding, LayerNorm, Linear, Module, ModuleList, Tensor
from voxdiff.nn import no_grad, silu

PAD_TOKEN = "<pad>"
NULL_TOKEN = "<null>"
UNK_TOKEN = "<unk>"

EMBED_MAGIC = b"VEMB"
_EMBED_HEADER = struct.Struct("<4sIII")  # magic, entry count, length, width


def caption_hash(caption: str) -> bytes:
    """8-byte stable key for a caption (BLAKE2b over UTF-8 text)."""
    return hashlib.blake2b(caption.encode("utf-8"), digest_size=8).digest()


@dataclasses.dataclass
class ConditionTokens:
    """A fixed-length sequence of embedding vectors for one caption."""

    tokens: np.ndarray  # (length, width)
    is_null: bool = False

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ValueError(
                f"tokens must be a (length >= 1, width) array, got shape {self.tokens.shape}")


class Vocabulary:
    """Whitespace-token vocabulary with reserved pad/null/unknown ids."""

    def __init__(self, words: list[str], max_len: int = 16):
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        reserved = [PAD_TOKEN, NULL_TOKEN, UNK_TOKEN]
        if any(w in reserved for w in words):
            raise ValueError("reserved token names cannot appear as words")
        self.words = list(words)
        self.max_len = max_len
        self._ids = {w: i + len(reserved) for i, w in enumerate(self.words)}

    @classmethod
    def from_captions(cls, captions, max_len: int = 16) -> "Vocabulary":
        seen = set()
        for caption in captions:
            seen.update(caption.lower().split())
        return cls(sorted(seen), max_len=max_len)

    @property
    def size(self) -> int:
        return len(self.words) + 3

    def null_ids(self) -> np.ndarray:
        ids = np.zeros(self.max_len, dtype=np.int64)
        ids[0] = 1  # the null token, then padding
        return ids

    def ids_for(self, caption: str) -> np.ndarray:
        """Token ids for a caption, padded/truncated to ``max_len``."""
        words = caption.lower().split()
        if not words:
            return self.null_ids()
        if len(words) > self.max_len:
            warnings.warn(
                f"caption has {len(words)} words; truncating to {self.max_len}",
                stacklevel=2)
            words = words[:self.max_len]
        ids = np.zeros(self.max_len, dtype=np.int64)
        for i, w in enumerate(words):
            ids[i] = self._ids.get(w, 2)  # unknown words map to <unk>
        return ids

    def to_dict(self) -> dict:
        return {"words": self.words, "max_len": self.max_len}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["words"]), max_len=int(d["max_len"]))


class _TextBlock(Module):
    """Pre-norm self-attention + feed-forward over caption tokens."""

    def __init__(self, width: int, num_heads: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.attn = TokenAttention(width, num_heads, rng, dtype=dtype)
        self.ff_norm = LayerNorm(width, dtype=dtype)
        self.ff_in = Linear(width, 2 * width, rng, dtype=dtype)
        self.ff_out = Linear(2 * width, width, rng, dtype=dtype, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        x = self.attn(x)
        return x + self.ff_out(silu(self.ff_in(self.ff_norm(x))))


class TextEncoder(Module):
    """Trainable caption encoder: embeddings + positions + 2 attention blocks.

    ``forward`` runs on id batches and participates in the autograd tape (the
    encoder trains jointly with the denoiser); ``encode`` is the inference
    entry point mapping one caption string to ConditionTokens.
    """

    def __init__(self, vocab: Vocabulary, width: int, rng: np.random.Generator,
                 num_heads: int = 4, dtype=np.float32):
        if width % num_heads != 0:
            raise ValueError(f"num_heads ({num_heads}) must divide width ({width})")
        self.vocab = vocab
        self.width = width
        self.embed = Embedding(vocab.size, width, rng, dtype=dtype)
        pos = rng.normal(0.0, 0.02, size=(vocab.max_len, width))
        self.position = Tensor(pos.astype(dtype), requires_grad=True)
        self.blocks = ModuleList(_TextBlock(width, num_heads, rng, dtype=dtype)
                                 for _ in range(2))

    @property
    def max_len(self) -> int:
        return self.vocab.max_len

    def forward(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] != self.vocab.max_len:
            raise ValueError(
                f"ids must be (batch, {self.vocab.max_len}), got shape {ids.shape}")
        x = self.embed(ids) + self.position
        for block in self.blocks:
            x = block(x)
        return x

    def encode(self, caption: str) -> ConditionTokens:
        ids = self.vocab.ids_for(caption)
        with no_grad():
            tokens = self.forward(ids[None])
        return ConditionTokens(tokens.data[0].copy(),
                               is_null=not caption.split())


class FileBackedTextEncoder:
    """Serves fixed embeddings loaded from a VEMB file (frozen encoder plug).

    The file must contain an entry for the empty caption, which becomes the
    null condition. Captions without an entry are an error (a frozen table
    cannot embed unseen text).
    """

    def __init__(self, entries: dict[bytes, np.ndarray], max_len: int, width: int):
        self.entries = entries
        self.max_len = max_len
        self.width = width
        if caption_hash("") not in entries:
            raise ValueError(
                "embedding file has no entry for the empty caption (the null condition)")

    def encode(self, caption: str) -> ConditionTokens:
        is_null = not caption.split()
        key = caption_hash("" if is_null else caption)
        if key not in self.entries:
            raise KeyError(f"no embedding stored for caption: {caption!r}")
        return ConditionTokens(self.entries[key].copy(), is_null=is_null)


def save_embedding_file(path, captions_to_tokens: dict[str, np.ndarray]):
    """Write a VEMB file mapping captions to (length, width) float32 token arrays."""
    items = list(captions_to_tokens.items())
    if not items:
        raise ValueError("cannot write an embedding file with no entries")
    first = np.asarray(items[0][1], dtype=np.float32)
    if first.ndim != 2:
        raise ValueError("token arrays must be 2-d (length, width)")
    length, width = first.shape
    with open(path, "wb") as fh:
        fh.write(_EMBED_HEADER.pack(EMBED_MAGIC, len(items), length, width))
        for caption, tokens in items:
            arr = np.ascontiguousarray(np.asarray(tokens, dtype=np.float32))
            if arr.shape != (length, width):
                raise ValueError(
                    f"inconsistent token shape for {caption!r}: "
                    f"{arr.shape} vs {(length, width)}")
            fh.write(caption_hash(caption))
            fh.write(arr.astype("<f4").tobytes())


def load_embedding_file(path) -> FileBackedTextEncoder:
    with open(path, "rb") as fh:
        header = fh.read(_EMBED_HEADER.size)
        if len(header) < _EMBED_HEADER.size:
            raise ValueError(f"truncated embedding file: {path}")
        magic, count, length, width = _EMBED_HEADER.unpack(header)
        if magic != EMBED_MAGIC:
            raise ValueError(f"not an embedding file (bad magic {magic!r}): {path}")
        entries: dict[bytes, np.ndarray] = {}
        row_bytes = length * width * 4
        for _ in range(count):
            key = fh.read(8)
            payload = fh.read(row_bytes)
            if len(key) < 8 or len(payload) < row_bytes:
                raise ValueError(f"truncated embedding file: {path}")
            entries[key] = np.frombuffer(payload, dtype="<f4").reshape(length, width)
    return FileBackedTextEncoder(entries, length, width)


# -- conditioning operations -------------------------------------------------


def encode_caption(caption: str, encoder) -> ConditionTokens:
    """Deterministic caption -> tokens; empty text yields the null condition.

    Over-length captions are truncated (with a warning), never rejected.
    """
    return encoder.encode(caption)


def null_tokens(encoder) -> ConditionTokens:
    """The fixed unconditional token sequence."""
    return encoder.encode("")


def dropout_condition(cond: ConditionTokens, p_uncond: float,
                      rng: np.random.Generator, null: ConditionTokens) -> ConditionTokens:
    """Replace ``cond`` by the null condition with probability ``p_uncond``."""
    if not 0.0 <= p_uncond <= 1.0:
        raise ValueError(f"p_uncond must be in [0, 1], got {p_uncond}")
    return null if rng.random() < p_uncond else cond


def dropout_ids(ids: np.ndarray, null_ids: np.ndarray, p_uncond: float,
                rng: np.random.Generator) -> np.ndarray:
    """Batched id-level condition dropout used by the training loop."""
    if not 0.0 <= p_uncond <= 1.0:
        raise ValueError(f"p_uncond must be in [0, 1], got {p_uncond}")
    out = ids.copy()
    drop = rng.random(ids.shape[0]) < p_uncond
    out[drop] = null_ids
    return out


def guided_score(denoiser, z_t, t, cond: ConditionTokens, s: float) -> np.ndarray:
    """Classifier-free guided noise prediction.

    ``denoiser`` must expose ``eps(z_t, t, cond) -> array`` and
    ``null_condition() -> ConditionTokens``. The result is
    ``eps_null + s * (eps_cond - eps_null)``; ``s=1`` returns the conditional
    prediction itself and a null ``cond`` collapses both terms to one call.
    """
    if s < 0:
        raise ValueError(f"guidance scale must be >= 0, got {s}")
    eps_cond = denoiser.eps(z_t, t, cond)
    if cond.is_null:
        return eps_cond
    if s == 1.0:
        return eps_cond
    eps_null = denoiser.eps(z_t, t, denoiser.null_condition())
    return eps_null + s * (eps_cond - eps_null)


class ScoreModel:
    """Bundles a noise-prediction network with its text encoder.

    This is the object sampling and task code passes around: it evaluates
    eps(z_t, t, cond) without building autograd tape, caches the null
    condition, and exposes a score function factory for the sample loop.
    """

    def __init__(self, net, encoder):
        self.net = net
        self.encoder = encoder
        self._null = None

    def null_condition(self) -> ConditionTokens:
        if self._null is None:
            self._null = null_tokens(self.encoder)
        return self._null

    def eps(self, z_t, t, cond: ConditionTokens) -> np.ndarray:
        with no_grad():
            return self.net(z_t, t, cond.tokens).data

    def guided_score_fn(self, caption: str, s: float):
        """(z_t, t) -> guided noise prediction for a fixed caption and scale."""
        cond = encode_caption(caption, self.encoder)

        def score(z_t, t):
            return guided_score(self, z_t, t, cond, s)

        return score
