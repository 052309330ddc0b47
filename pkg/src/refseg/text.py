"""Instruction tokenizer and the per-token language feature encoder."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_WORD_RE = re.compile(r"[a-z0-9]+")

# finite stand-in for -inf: exp() underflows to exactly 0, no NaN rows
_MASK_FILL = -1e30


def split_words(text: str) -> list[str]:
    """Lowercased word tokens; punctuation and whitespace are separators."""
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocabulary:
    """Bijective token/id map with reserved PAD=0 and UNK=1."""

    token_to_id: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @property
    def tokens(self) -> list[str]:
        return sorted(self.token_to_id, key=self.token_to_id.get)

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        words = sorted({w for text in texts for w in split_words(text)})
        token_to_id = {PAD_TOKEN: PAD_ID, UNK_TOKEN: UNK_ID}
        for word in words:
            token_to_id[word] = len(token_to_id)
        return cls(token_to_id)

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens = Path(path).read_text().splitlines()
        return cls.from_tokens(tokens)

    @classmethod
    def from_tokens(cls, tokens) -> "Vocabulary":
        if len(tokens) < 2 or tokens[0] != PAD_TOKEN or tokens[1] != UNK_TOKEN:
            raise ConfigError("vocabulary list must start with the reserved tokens")
        return cls({token: i for i, token in enumerate(tokens)})


@dataclass
class TokenSequence:
    """Fixed-length padded id sequence."""

    ids: np.ndarray  # (l,) int64
    valid_length: int

    def pad_mask(self) -> np.ndarray:
        """True at PAD positions."""
        mask = np.ones(len(self.ids), dtype=bool)
        mask[: self.valid_length] = False
        return mask


def tokenize(text: str, vocab: Vocabulary, max_tokens: int) -> TokenSequence:
    """Lowercase word tokenization with truncation at ``max_tokens`` and PAD fill."""
    if max_tokens < 1:
        raise ConfigError("max_tokens must be >= 1")
    words = split_words(text)[:max_tokens]
    ids = np.full(max_tokens, PAD_ID, dtype=np.int64)
    for i, word in enumerate(words):
        ids[i] = vocab.token_to_id.get(word, UNK_ID)
    return TokenSequence(ids=ids, valid_length=len(words))


@dataclass
class LanguageFeatures:
    """Per-token feature matrix of shape (C, l) plus the PAD mask."""

    features: torch.Tensor  # (C, l)
    pad_mask: torch.Tensor  # (l,) bool, True at PAD


def masked_softmax(scores: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last dim with PAD keys excluded.

    Rows whose keys are all PAD come out as exact zeros instead of NaN.
    """
    filled = scores.masked_fill(pad_mask, _MASK_FILL)
    weights = torch.softmax(filled, dim=-1)
    all_pad = pad_mask.all(dim=-1, keepdim=True)
    return weights * (~all_pad)


class _EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        batch, length, dim = x.shape
        h = self.norm1(x)
        qkv = self.qkv(h).view(batch, length, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (B, heads, l, head_dim)
        scores = (q @ k.transpose(-2, -1)) * self.head_dim**-0.5
        weights = masked_softmax(scores, pad_mask[:, None, None, :])
        attended = (weights @ v).transpose(1, 2).reshape(batch, length, dim)
        x = x + self.proj(attended)
        return x + self.ff(self.norm2(x))


class TextEncoder(nn.Module):
    """Small from-scratch transformer producing (C, l) token features."""

    def __init__(
        self,
        vocab_size: int,
        dim: int = 64,
        layers: int = 2,
        heads: int = 4,
        max_tokens: int = 20,
    ):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError("text dim must be divisible by the head count")
        self.dim = dim
        self.max_tokens = max_tokens
        self.embedding = nn.Embedding(vocab_size, dim)
        self.positions = nn.Parameter(torch.zeros(max_tokens, dim))
        self.layers = nn.ModuleList(
            _EncoderLayer(dim, heads, 4 * dim) for _ in range(layers)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        """ids (B, l) int64, pad_mask (B, l) bool -> features (B, C, l)."""
        if ids.shape[1] != self.max_tokens:
            raise ConfigError(
                f"token length {ids.shape[1]} != configured {self.max_tokens}"
            )
        x = self.embedding(ids) + self.positions[None, :, :]
        for layer in self.layers:
            x = layer(x, pad_mask)
        return self.norm(x).transpose(1, 2)

    @torch.no_grad()
    def encode(self, tokens: TokenSequence) -> LanguageFeatures:
        """Single-sample convenience wrapper (inference mode)."""
        training = self.training
        self.eval()
        device = self.positions.device
        ids = torch.as_tensor(tokens.ids, dtype=torch.long, device=device)[None]
        pad = torch.as_tensor(tokens.pad_mask(), device=device)[None]
        features = self.forward(ids, pad)[0]
        self.train(training)
        return LanguageFeatures(features=features, pad_mask=pad[0])
