#!/usr/bin/env python3
"""
Text Knowledge Codebook.

Wraps a frozen T-VQVAE as an image tokenizer: every 32x128 text image maps
to eight discrete indices (one per horizontal slot), and an index maps back
to its latent vector. The pretext tasks query index equality through
slot references so they never re-tokenize.
"""

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import log
from .corpus import TextSample, to_tensor
from .errors import ConfigurationError, ValidationError
from .integrity import atomic_write_bytes
from .tvqvae import TvqvaeModel, encode_tvqvae, load_tvqvae

NUM_SLOTS = 8


@dataclass(frozen=True)
class TokenSequence:
    """Eight codebook indices of one image, left to right."""

    indices: Tuple[int, ...]
    source_id: str = ""

    def __post_init__(self):
        if len(self.indices) != NUM_SLOTS:
            raise ValidationError(
                f"TokenSequence needs {NUM_SLOTS} indices, "
                f"got {len(self.indices)}"
            )

    def as_tensor(self) -> torch.Tensor:
        return torch.tensor(self.indices, dtype=torch.long)


@dataclass(frozen=True)
class SlotRef:
    """A (source image, slot position) pair."""

    source_id: str
    slot: int


def reduce_to_slots(
    grid_indices: torch.Tensor, num_embeddings: int
) -> torch.Tensor:
    """
    Reduce a (B, gh, gw) index grid to (B, 8) slot indices.

    A 1x8 grid passes through unchanged. Otherwise every slot covers gw/8
    columns over all rows and takes the majority index, lowest index
    winning ties.
    """
    b, gh, gw = grid_indices.shape
    if gw % NUM_SLOTS:
        raise ConfigurationError(
            f"Grid width {gw} cannot be split into {NUM_SLOTS} slots"
        )
    if gh == 1 and gw == NUM_SLOTS:
        return grid_indices.reshape(b, NUM_SLOTS)

    span = gw // NUM_SLOTS
    groups = grid_indices.reshape(b, gh, NUM_SLOTS, span)
    groups = groups.permute(0, 2, 1, 3).reshape(b, NUM_SLOTS, gh * span)
    votes = torch.zeros(b, NUM_SLOTS, num_embeddings, dtype=torch.long)
    votes.scatter_add_(2, groups, torch.ones_like(groups))
    return votes.argmax(dim=2)


class TextKnowledgeCodebook:
    """Frozen tokenizer and latent lookup built on a trained T-VQVAE."""

    def __init__(self, model: TvqvaeModel, content_hash: Optional[str] = None):
        if not model.frozen:
            model.freeze()
        self.model = model
        self.content_hash = content_hash or encode_tvqvae(model)[-32:].hex()
        cfg = model.config
        self.image_shape = (3, cfg.image_height, cfg.image_width)
        self.grid = cfg.grid
        if self.grid[1] % NUM_SLOTS:
            raise ConfigurationError(
                f"Codebook grid {self.grid} cannot yield {NUM_SLOTS} slots"
            )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TextKnowledgeCodebook":
        model, digest = load_tvqvae(path)
        return cls(model, digest)

    @property
    def embeddings(self) -> torch.Tensor:
        return self.model.embeddings.detach()

    @property
    def num_embeddings(self) -> int:
        return self.model.config.num_embeddings

    @property
    def embedding_dim(self) -> int:
        return self.model.config.embedding_dim

    def _as_batch(self, images) -> torch.Tensor:
        if isinstance(images, np.ndarray):
            images = to_tensor([images] if images.ndim == 3 else list(images))
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if tuple(images.shape[1:]) != self.image_shape:
            raise ConfigurationError(
                f"Image shape {tuple(images.shape[1:])} does not match "
                f"codebook geometry {self.image_shape}"
            )
        return images.to(self.embeddings.dtype)

    @torch.no_grad()
    def tokenize_batch(self, images) -> torch.Tensor:
        """Slot indices (B, 8) for a batch of (B, 3, H, W) images."""
        batch = self._as_batch(images)
        result = self.model.quantize(self.model.content(batch))
        return reduce_to_slots(result.indices, self.num_embeddings)

    def tokenize(self, image, source_id: str = "") -> TokenSequence:
        """Tokenize a single (H, W, 3) array or (3, H, W) tensor."""
        row = self.tokenize_batch(image)[0]
        return TokenSequence(tuple(int(i) for i in row), source_id)

    def retrieve_latents(self, tokens) -> torch.Tensor:
        """
        Codebook rows for the given indices.

        Accepts a TokenSequence (returns 8 x D) or an index tensor of any
        shape (returns shape + (D,)).
        """
        if isinstance(tokens, TokenSequence):
            tokens = tokens.as_tensor()
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.numel() and (
            int(tokens.min()) < 0 or int(tokens.max()) >= self.num_embeddings
        ):
            raise ValidationError(
                f"Index out of range [0, {self.num_embeddings})"
            )
        return self.embeddings[tokens]

    def verify(self, expected_hash: str) -> None:
        """Raise when this codebook is not the one a run was started with."""
        if expected_hash != self.content_hash:
            log.error(
                "Codebook hash %s does not match expected %s",
                self.content_hash[:12],
                expected_hash[:12],
            )
            raise ConfigurationError("Codebook hash mismatch")


class TokenCache:
    """Per-source memo of TokenSequences; safe for concurrent readers."""

    def __init__(self, codebook: Optional[TextKnowledgeCodebook] = None):
        self.codebook = codebook
        self._tokens: Dict[str, TokenSequence] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, source_id: str) -> bool:
        return source_id in self._tokens

    def get(self, source_id: str, image=None) -> TokenSequence:
        """Cached tokens of source_id, tokenizing image on a miss."""
        cached = self._tokens.get(source_id)
        if cached is not None:
            return cached
        if image is None:
            raise ValidationError(f"No tokens cached for {source_id!r}")
        if self.codebook is None:
            raise ConfigurationError(
                "TokenCache has no codebook to tokenize with"
            )
        tokens = self.codebook.tokenize(image, source_id)
        with self._lock:
            self._tokens.setdefault(source_id, tokens)
        return tokens

    def put(self, tokens: TokenSequence) -> None:
        """Insert precomputed tokens (e.g. from tokens.jsonl)."""
        with self._lock:
            self._tokens[tokens.source_id] = tokens

    def add_batch(self, source_ids: Sequence[str], images) -> torch.Tensor:
        """Tokenize uncached images in one pass; returns (B, 8) indices."""
        missing = [i for i, s in enumerate(source_ids) if s not in self]
        if missing:
            batch = self.codebook._as_batch(images)[missing]
            rows = self.codebook.tokenize_batch(batch)
            with self._lock:
                for i, row in zip(missing, rows):
                    self._tokens.setdefault(
                        source_ids[i],
                        TokenSequence(
                            tuple(int(v) for v in row), source_ids[i]
                        ),
                    )
        return torch.stack([self._tokens[s].as_tensor() for s in source_ids])

    def index_of(self, ref: SlotRef) -> int:
        if not 0 <= ref.slot < NUM_SLOTS:
            raise ValidationError(f"Slot {ref.slot} outside [0, {NUM_SLOTS})")
        return self.get(ref.source_id).indices[ref.slot]

    def same_index(self, a: SlotRef, b: SlotRef) -> bool:
        return self.index_of(a) == self.index_of(b)


def same_index(a: SlotRef, b: SlotRef, cache: TokenCache) -> bool:
    """True iff both slots hold the same codebook index."""
    return cache.same_index(a, b)


def tokenize_corpus(
    codebook: TextKnowledgeCodebook,
    samples: Iterable[TextSample],
    out_path: Union[str, Path, None] = None,
    batch_size: int = 256,
) -> List[TokenSequence]:
    """Tokenize samples; optionally write ``tokens.jsonl`` records."""
    samples = list(samples)
    sequences: List[TokenSequence] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        rows = codebook.tokenize_batch(to_tensor([s.image for s in chunk]))
        sequences.extend(
            TokenSequence(tuple(int(v) for v in row), s.sample_id)
            for s, row in zip(chunk, rows)
        )

    if out_path is not None:
        lines = [
            json.dumps({"source_id": t.source_id, "indices": list(t.indices)})
            for t in sequences
        ]
        atomic_write_bytes(out_path, ("\n".join(lines) + "\n").encode("utf-8"))
        log.info("Wrote %d token records to %s", len(sequences), out_path)
    return sequences


def read_tokens(path: Union[str, Path]) -> Dict[str, TokenSequence]:
    """Load a ``tokens.jsonl`` file keyed by source id."""
    tokens: Dict[str, TokenSequence] = {}
    with Path(path).open(encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                record = json.loads(line)
                tokens[record["source_id"]] = TokenSequence(
                    tuple(record["indices"]), record["source_id"]
                )
    return tokens
