"""Caption tokenizer and trainable text encoder.

Captions come from a closed grammar, so a word-level vocabulary suffices.
The encoder (embedding + learned positions + 2 self-attention blocks) is
trained jointly with the generator and provides the conditioning sequence
consumed by cross-attention, plus a learned null sequence for
classifier-free guidance.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor
from .util import ContractError, canonical_json, sha256_hex

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

MAX_LEN = 32
D_TEXT = 64

_WORD_RE = re.compile(r"[a-z0-9]+")


def words_of(caption: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric run."""
    return _WORD_RE.findall(caption.lower())


class Vocabulary:
    """Word -> dense id map with fixed reserved ids 0..3."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(RESERVED)] != list(RESERVED):
            raise ContractError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ContractError("vocabulary contains duplicate tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    @classmethod
    def from_captions(cls, captions: list[str], extra_words: list[str] = ()) -> "Vocabulary":
        seen: set[str] = set(extra_words)
        for cap in captions:
            seen.update(words_of(cap))
        return cls(list(RESERVED) + sorted(seen - set(RESERVED)))

    def to_json(self) -> dict[str, int]:
        return dict(self.token_to_id)

    @classmethod
    def from_json(cls, mapping: dict[str, int]) -> "Vocabulary":
        items = sorted(mapping.items(), key=lambda kv: kv[1])
        ids = [i for _, i in items]
        if ids != list(range(len(ids))):
            raise ContractError("vocabulary ids are not dense in [0, size)")
        return cls([t for t, _ in items])

    def content_hash(self) -> str:
        return sha256_hex(canonical_json(self.to_json()).encode("utf-8"))


def tokenize(caption: str, vocab: Vocabulary, max_len: int = MAX_LEN) -> tuple[np.ndarray, np.ndarray]:
    """Caption -> (ids, mask), both length ``max_len``.

    BOS + word ids + EOS, truncated to max_len (EOS always kept as the last
    real token), then PAD-filled.  Mask is True on real tokens.
    """
    if not caption or not caption.strip():
        raise ContractError("empty caption")
    ids = [BOS_ID] + [vocab.id_of(w) for w in words_of(caption)] + [EOS_ID]
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [EOS_ID]
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(ids)] = True
    out = np.full(max_len, PAD_ID, dtype=np.int32)
    out[: len(ids)] = ids
    return out, mask


def all_unknown(ids: np.ndarray, mask: np.ndarray) -> bool:
    """True when every real word token (BOS/EOS aside) is UNK."""
    inner = ids[mask]
    inner = inner[(inner != BOS_ID) & (inner != EOS_ID)]
    return inner.size > 0 and bool((inner == UNK_ID).all())


@dataclass
class CaptionEmbedding:
    """Frozen conditioning sequence for sampling-time use."""

    tokens: np.ndarray      # [max_len] int32
    mask: np.ndarray        # [max_len] bool
    embedding: np.ndarray   # [max_len, d_text] float32


class TextEncoder(nn.Module):
    """Embedding table + learned positions + 2 transformer blocks.

    PAD positions are excluded from attention keys and zeroed in the output,
    so real-token embeddings never depend on what sits in the padding slots.
    """

    def __init__(self, rng: np.random.Generator, vocab_size: int,
                 d_text: int = D_TEXT, max_len: int = MAX_LEN, n_heads: int = 4,
                 with_null: bool = True):
        super().__init__()
        self.vocab_size = vocab_size
        self.d_text = d_text
        self.max_len = max_len
        self.table = nn.param(rng, (vocab_size, d_text), 0.02)
        self.pos = nn.param(rng, (max_len, d_text), 0.02)
        self.block1 = nn.EncoderBlock(rng, d_text, n_heads)
        self.block2 = nn.EncoderBlock(rng, d_text, n_heads)
        self.norm = nn.LayerNorm(d_text)
        # the learned unconditional sequence; encoders that never train with
        # caption dropout omit it so every parameter they own sees gradients
        if with_null:
            self.null_tokens = nn.param(rng, (max_len, d_text), 0.02)
        else:
            self.null_tokens = None

    def encode_tokens(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        """Differentiable batch encode: [B, L] ids -> [B, L, d_text]."""
        ids = np.asarray(ids, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
        if ids.ndim != 2 or ids.shape != mask.shape:
            raise ContractError(f"encode: ids {ids.shape} / mask {mask.shape} must be equal 2-D")
        b, length = ids.shape
        if length != self.max_len:
            raise ContractError(f"encode: sequence length {length} != {self.max_len}")
        x = T.gather_rows(self.table, ids.reshape(-1))
        x = T.reshape(x, (b, length, self.d_text))
        x = T.add(x, self.pos)
        x = self.block1(x, key_mask=mask)
        x = self.block2(x, key_mask=mask)
        x = self.norm(x)
        keep = np.broadcast_to(mask[:, :, None], (b, length, self.d_text))
        return T.mul(x, Tensor(keep.astype(np.float32)))

    def encode_caption(self, ids: np.ndarray, mask: np.ndarray) -> CaptionEmbedding:
        """Frozen-weight single-caption encode for sampling."""
        with T.no_grad():
            emb = self.encode_tokens(ids[None, :], mask[None, :])
        return CaptionEmbedding(tokens=ids.copy(), mask=mask.copy(),
                                embedding=emb.data[0].copy())

    def null_embedding(self) -> CaptionEmbedding:
        """The learned unconditional sequence used for guidance dropout."""
        if self.null_tokens is None:
            raise ContractError("text encoder was built without a null sequence")
        ids = np.full(self.max_len, PAD_ID, dtype=np.int32)
        mask = np.ones(self.max_len, dtype=bool)
        return CaptionEmbedding(tokens=ids, mask=mask, embedding=self.null_tokens.data.copy())

    def null_batch(self, batch: int) -> Tensor:
        """Differentiable [B, L, d_text] tiling of the null sequence."""
        if self.null_tokens is None:
            raise ContractError("text encoder was built without a null sequence")
        return T.tile_leading(self.null_tokens, batch)
