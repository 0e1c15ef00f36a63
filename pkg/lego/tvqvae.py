#!/usr/bin/env python3
"""
Text-tailored vector-quantized autoencoder (T-VQVAE).

The T-Encoder maps each non-overlapping r1 x r2 patch independently through
a linear projection and residual linear blocks, instance-normalises the
resulting grid per image and channel to strip style, and the quantizer
snaps every content vector to its nearest codebook embedding. Gradients
cross the quantizer with a straight-through estimator. The decoder turns
quantized grids back into images; training minimises pixel + perceptual
error plus the usual codebook/commitment terms.

Codebook file layout is documented in codebook_format.md.
"""

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import log
from .corpus import TextSample, to_tensor
from .errors import (
    ConfigurationError,
    DivergenceError,
    IntegrityError,
    ValidationError,
)
from .integrity import (
    atomic_write_bytes,
    deserialize_tensors,
    module_hash,
    serialize_tensors,
    sha256_digest,
)

CODEBOOK_MAGIC = b"LEGOTKCB"
CODEBOOK_VERSION = 1
IN_EPS = 1e-5


@dataclass(frozen=True)
class TvqvaeConfig:
    """Geometry, widths and training schedule of the T-VQVAE."""

    image_height: int = 32
    image_width: int = 128
    patch_height: int = 32
    patch_width: int = 16
    hidden_dim: int = 384
    num_blocks: int = 4
    embedding_dim: int = 384
    num_embeddings: int = 512
    decoder_hidden: int = 256
    decoder_channels: int = 32
    commitment_weight: float = 0.25
    batch_size: int = 64
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    reseed_dead_codes: bool = True
    seed: int = 0

    @property
    def grid(self) -> Tuple[int, int]:
        return (
            self.image_height // self.patch_height,
            self.image_width // self.patch_width,
        )

    def validate(self) -> None:
        if (
            self.image_height % self.patch_height
            or self.image_width % self.patch_width
        ):
            raise ConfigurationError(
                f"Image {self.image_height}x{self.image_width} is not "
                f"divisible into {self.patch_height}x{self.patch_width} "
                "patches"
            )
        if self.num_embeddings < 2:
            raise ConfigurationError("Codebook needs at least 2 entries")


@dataclass
class PatchGrid:
    """Pre-normalisation features x_f of shape (B, H/r1, W/r2, C)."""

    features: torch.Tensor
    patch_height: int
    patch_width: int

    @property
    def channels(self) -> int:
        return self.features.shape[-1]


@dataclass
class QuantizedResult:
    """
    Output of the quantizer.

    quantized carries the codebook vectors forward and routes gradients
    straight through to x_c; codes carries the same values with gradients
    into the embedding table (used by the codebook loss).
    """

    quantized: torch.Tensor
    indices: torch.Tensor
    codes: torch.Tensor


@dataclass
class TvqvaeLoss:
    pixel: torch.Tensor
    perceptual: torch.Tensor
    codebook: torch.Tensor
    commitment: torch.Tensor
    total: torch.Tensor

    @property
    def reconstruction(self) -> torch.Tensor:
        return self.pixel + self.perceptual


def patchify(images: torch.Tensor, ph: int, pw: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, H/ph, W/pw, ph*pw*C), row-major within a patch."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // ph, ph, w // pw, pw)
    x = x.permute(0, 2, 4, 3, 5, 1)
    return x.reshape(b, h // ph, w // pw, ph * pw * c)


def unpatchify(patches: torch.Tensor, ph: int, pw: int) -> torch.Tensor:
    """Inverse of patchify."""
    b, gh, gw, d = patches.shape
    c = d // (ph * pw)
    x = patches.reshape(b, gh, gw, ph, pw, c)
    x = x.permute(0, 5, 1, 3, 2, 4)
    return x.reshape(b, c, gh * ph, gw * pw)


def instance_norm(features: torch.Tensor) -> torch.Tensor:
    """Per-image, per-channel standardisation of a (B, gh, gw, D) grid."""
    b, gh, gw, d = features.shape
    flat = features.reshape(b, gh * gw, d).transpose(1, 2)
    normed = F.instance_norm(flat, eps=IN_EPS)
    return normed.transpose(1, 2).reshape(b, gh, gw, d)


class _StraightThrough(torch.autograd.Function):
    """Forward the codebook vectors, copy gradients back to the encoder."""

    @staticmethod
    def forward(ctx, content, codes):  # noqa: ARG004
        return codes.detach().clone()

    @staticmethod
    def backward(ctx, grad_output):  # noqa: ARG004
        return grad_output, None


def quantize(
    content: torch.Tensor, embeddings: torch.Tensor
) -> QuantizedResult:
    """
    Nearest-neighbour quantization of content vectors.

    Args:
        content: (..., D) finite content vectors x_c
        embeddings: (N, D) codebook

    Returns:
        QuantizedResult; ties resolve to the lowest index

    Raises:
        ConfigurationError: Empty codebook
        ValidationError: Dimension mismatch or non-finite input
    """
    if embeddings.dim() != 2 or embeddings.shape[0] == 0:
        raise ConfigurationError("Codebook is empty")
    if content.shape[-1] != embeddings.shape[1]:
        raise ValidationError(
            f"Content dim {content.shape[-1]} != codebook dim "
            f"{embeddings.shape[1]}"
        )
    if not torch.isfinite(content).all():
        raise ValidationError("Content vectors contain NaN or Inf")

    flat = content.reshape(-1, embeddings.shape[1])
    with torch.no_grad():
        distances = torch.cdist(
            flat.detach(),
            embeddings.detach(),
            compute_mode="donot_use_mm_for_euclid_dist",
        )
        indices = distances.argmin(dim=1)
    codes = F.embedding(indices, embeddings).reshape(content.shape)
    return QuantizedResult(
        quantized=_StraightThrough.apply(content, codes),
        indices=indices.reshape(content.shape[:-1]),
        codes=codes,
    )


def vq_terms(
    content: torch.Tensor, codes: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(codebook, commitment) losses in stop-gradient form."""
    codebook = F.mse_loss(codes, content.detach())
    commitment = F.mse_loss(content, codes.detach())
    return codebook, commitment


class ResidualLinear(nn.Module):
    """x + W2 GELU(W1 LN(x)), applied to every grid cell on its own."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc2(F.gelu(self.fc1(self.norm(x))))


class TEncoder(nn.Module):
    """Per-patch encoder; no operation mixes neighbouring patches."""

    def __init__(self, config: TvqvaeConfig):
        super().__init__()
        self.config = config
        patch_dim = config.patch_height * config.patch_width * 3
        self.proj = nn.Linear(patch_dim, config.hidden_dim)
        self.blocks = nn.Sequential(
            *[
                ResidualLinear(config.hidden_dim)
                for _ in range(config.num_blocks)
            ]
        )
        self.head = nn.Linear(config.hidden_dim, config.embedding_dim)

    def forward(self, images: torch.Tensor) -> PatchGrid:
        cfg = self.config
        expected = (3, cfg.image_height, cfg.image_width)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ValidationError(
                f"Expected images (B, {expected}), got {tuple(images.shape)}"
            )
        patches = patchify(images, cfg.patch_height, cfg.patch_width)
        features = self.head(self.blocks(self.proj(patches)))
        return PatchGrid(features, cfg.patch_height, cfg.patch_width)


class Decoder(nn.Module):
    """Per-cell linear expansion to pixels followed by a small conv stack."""

    def __init__(self, config: TvqvaeConfig):
        super().__init__()
        self.config = config
        ph, pw, c = (
            config.patch_height,
            config.patch_width,
            config.decoder_channels,
        )
        self.expand = nn.Sequential(
            nn.Linear(config.embedding_dim, config.decoder_hidden),
            nn.GELU(),
            nn.Linear(config.decoder_hidden, ph * pw * c),
        )
        self.refine = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(c, 3, 3, padding=1),
        )

    def forward(self, quantized: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        expected = (*cfg.grid, cfg.embedding_dim)
        if quantized.dim() != 4 or tuple(quantized.shape[1:]) != expected:
            raise ValidationError(
                f"Expected grid (B, {expected}), got {tuple(quantized.shape)}"
            )
        pixels = unpatchify(
            self.expand(quantized), cfg.patch_height, cfg.patch_width
        )
        return torch.sigmoid(self.refine(pixels))


class FixedConvExtractor(nn.Module):
    """Small convolutional feature extractor with seeded, frozen weights."""

    def __init__(self, seed: int = 1234):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.features = nn.Sequential(
                nn.Conv2d(3, 16, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(16, 32, 3, padding=1, stride=2),
                nn.ReLU(),
                nn.Conv2d(32, 64, 3, padding=1),
                nn.ReLU(),
            )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.features(images)


class Vgg16Extractor(nn.Module):
    """ImageNet VGG-16 up to relu3_3 (needs torchvision and weights)."""

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import VGG16_Weights, vgg16
        except ImportError as e:
            raise ConfigurationError(
                "The vgg16 perceptual backend needs torchvision; "
                "install the 'vgg' extra"
            ) from e
        self.features = vgg16(weights=VGG16_Weights.DEFAULT).features[:16]
        self.register_buffer(
            "mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        )
        self.register_buffer(
            "std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.features((images - self.mean) / self.std)


def build_perceptual(backend: str = "fixed", seed: int = 1234) -> nn.Module:
    """Frozen perceptual feature extractor for the given backend."""
    if backend == "fixed":
        extractor: nn.Module = FixedConvExtractor(seed)
    elif backend == "vgg16":
        extractor = Vgg16Extractor()
    else:
        raise ConfigurationError(f"Unknown perceptual backend {backend!r}")
    for param in extractor.parameters():
        param.requires_grad = False
    return extractor.eval()


def tvqvae_loss(
    reconstruction: torch.Tensor,
    target: torch.Tensor,
    extractor: nn.Module,
    content: Optional[torch.Tensor] = None,
    codes: Optional[torch.Tensor] = None,
    commitment_weight: float = 0.25,
) -> TvqvaeLoss:
    """
    Pixel + perceptual reconstruction loss, plus VQ terms when given.

    pixel and perceptual are mean squared errors over images and extractor
    features; total = pixel + perceptual + codebook + weight * commitment.
    """
    if reconstruction.shape != target.shape:
        raise ValidationError(
            f"Shape mismatch {tuple(reconstruction.shape)} vs "
            f"{tuple(target.shape)}"
        )
    pixel = F.mse_loss(reconstruction, target)
    perceptual = F.mse_loss(extractor(reconstruction), extractor(target))
    zero = pixel.new_zeros(())
    codebook, commitment = zero, zero
    if content is not None and codes is not None:
        codebook, commitment = vq_terms(content, codes)
    total = pixel + perceptual + codebook + commitment_weight * commitment
    return TvqvaeLoss(pixel, perceptual, codebook, commitment, total)


class TvqvaeModel(nn.Module):
    """T-Encoder, codebook and decoder."""

    def __init__(self, config: TvqvaeConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = TEncoder(config)
        n, d = config.num_embeddings, config.embedding_dim
        self.embeddings = nn.Parameter(
            torch.empty(n, d).uniform_(-1 / n, 1 / n)
        )
        self.decoder = Decoder(config)
        self.frozen = False

    def t_encode(self, images: torch.Tensor) -> PatchGrid:
        return self.encoder(images)

    def content(self, images: torch.Tensor) -> torch.Tensor:
        """Content vectors x_c = IN(x_f)."""
        return instance_norm(self.encoder(images).features)

    def quantize(self, content: torch.Tensor) -> QuantizedResult:
        return quantize(content, self.embeddings)

    def decode(self, quantized: torch.Tensor) -> torch.Tensor:
        return self.decoder(quantized)

    def forward(
        self, images: torch.Tensor
    ) -> Tuple[torch.Tensor, QuantizedResult, torch.Tensor]:
        content = self.content(images)
        result = self.quantize(content)
        return self.decode(result.quantized), result, content

    def freeze(self) -> "TvqvaeModel":
        for param in self.parameters():
            param.requires_grad = False
        self.eval()
        self.frozen = True
        return self

    def content_hash(self) -> str:
        return module_hash(self)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _reseed_dead_codes(
    model: TvqvaeModel,
    counts: torch.Tensor,
    pool: torch.Tensor,
    generator: torch.Generator,
) -> int:
    """Replace codes unused this epoch by random recent content vectors."""
    dead = torch.nonzero(counts == 0).flatten()
    if dead.numel() == 0 or pool.numel() == 0:
        return 0
    picks = torch.randint(pool.shape[0], (dead.numel(),), generator=generator)
    with torch.no_grad():
        model.embeddings[dead] = pool[picks].to(model.embeddings.dtype)
    return int(dead.numel())


def train_tvqvae(
    samples: Sequence[TextSample],
    config: TvqvaeConfig = TvqvaeConfig(),
    out_path: Union[str, Path, None] = None,
    log_path: Union[str, Path, None] = None,
    extractor: Optional[nn.Module] = None,
) -> TvqvaeModel:
    """
    Train a T-VQVAE on rendered samples and return it frozen.

    Per-epoch mean losses and codebook utilization (fraction of indices
    used) are logged and, with log_path, appended as JSON lines; the
    records are also kept on ``model.training_log``.

    Raises:
        ValidationError: Fewer than 100 samples
        DivergenceError: Loss became NaN/Inf
    """
    if len(samples) < 100:
        raise ValidationError(
            f"T-VQVAE training needs >= 100 images, got {len(samples)}"
        )
    torch.manual_seed(config.seed)
    model = TvqvaeModel(config)
    extractor = extractor or build_perceptual()
    images = to_tensor([s.image for s in samples])
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )

    history: List[Dict[str, float]] = []
    step = 0
    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(len(images), generator=generator)
        counts = torch.zeros(config.num_embeddings, dtype=torch.long)
        sums = dict.fromkeys(
            ("pixel", "perceptual", "codebook", "commitment", "total"), 0.0
        )
        batches = 0
        pool = torch.empty(0)
        for start in range(0, len(order), config.batch_size):
            batch = images[order[start : start + config.batch_size]]
            recon, result, content = model(batch)
            loss = tvqvae_loss(
                recon,
                batch,
                extractor,
                content,
                result.codes,
                config.commitment_weight,
            )
            value = float(loss.total.detach())
            if not math.isfinite(value):
                log.error(
                    "T-VQVAE diverged at epoch %d step %d (pixel=%s, "
                    "perceptual=%s, codebook=%s, commitment=%s)",
                    epoch,
                    step,
                    float(loss.pixel),
                    float(loss.perceptual),
                    float(loss.codebook),
                    float(loss.commitment),
                )
                raise DivergenceError("tvqvae", step, value)
            optimizer.zero_grad()
            loss.total.backward()
            optimizer.step()
            step += 1

            counts += torch.bincount(
                result.indices.flatten(), minlength=config.num_embeddings
            )
            pool = content.detach().reshape(-1, config.embedding_dim)
            for key in sums:
                sums[key] += float(getattr(loss, key).detach())
            batches += 1

        utilization = float((counts > 0).float().mean())
        reseeded = 0
        if config.reseed_dead_codes and epoch < config.epochs - 1:
            reseeded = _reseed_dead_codes(model, counts, pool, generator)
        record = {k: v / batches for k, v in sums.items()}
        record["reconstruction"] = record["pixel"] + record["perceptual"]
        record.update(epoch=epoch, utilization=utilization, reseeded=reseeded)
        history.append(record)
        log.info(
            "tvqvae epoch %d: recon=%.5f vq=%.5f utilization=%.3f "
            "reseeded=%d",
            epoch,
            record["reconstruction"],
            record["codebook"] + record["commitment"],
            utilization,
            reseeded,
        )
        if log_path is not None:
            Path(log_path).parent.mkdir(parents=True, exist_ok=True)
            with Path(log_path).open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(record, sort_keys=True) + "\n")

    model.freeze()
    model.training_log = history
    if out_path is not None:
        save_tvqvae(model, out_path)
    return model


# ---------------------------------------------------------------------------
# Codebook file
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<8sHIIHH")


def encode_tvqvae(model: TvqvaeModel) -> bytes:
    """Serialise a model into the codebook file format."""
    cfg = model.config
    meta = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode("utf-8")
    embeddings = (
        model.embeddings.detach().cpu().to(torch.float32).numpy().astype("<f4")
    )
    params = {
        name: tensor.to(torch.float32)
        for name, tensor in model.state_dict().items()
        if name != "embeddings"
    }
    body = b"".join(
        [
            _HEADER.pack(
                CODEBOOK_MAGIC,
                CODEBOOK_VERSION,
                cfg.num_embeddings,
                cfg.embedding_dim,
                cfg.patch_height,
                cfg.patch_width,
            ),
            struct.pack("<I", len(meta)),
            meta,
            embeddings.tobytes(),
        ]
    )
    blob = serialize_tensors(params)
    body += struct.pack("<Q", len(blob)) + blob
    return body + sha256_digest(body)


def save_tvqvae(model: TvqvaeModel, path: Union[str, Path]) -> str:
    """Write the codebook file atomically; returns its content hash."""
    data = encode_tvqvae(model)
    atomic_write_bytes(path, data)
    digest = data[-32:].hex()
    log.info("Saved codebook (%s) to %s", digest[:12], path)
    return digest


def decode_tvqvae(data: bytes) -> Tuple[TvqvaeModel, str]:
    """Parse and verify codebook file bytes; returns (frozen model, hash)."""
    if len(data) < _HEADER.size + 32:
        raise IntegrityError("Codebook file is truncated")
    body, digest = data[:-32], data[-32:]
    if sha256_digest(body) != digest:
        raise IntegrityError("Codebook content hash does not verify")

    magic, version, n, d, r1, r2 = _HEADER.unpack_from(body, 0)
    if magic != CODEBOOK_MAGIC:
        raise IntegrityError(f"Not a codebook file (magic {magic!r})")
    if version != CODEBOOK_VERSION:
        raise ConfigurationError(f"Unsupported codebook version {version}")
    offset = _HEADER.size
    (meta_len,) = struct.unpack_from("<I", body, offset)
    offset += 4
    meta = json.loads(body[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    config = TvqvaeConfig(
        **{k: tuple(v) if isinstance(v, list) else v for k, v in meta.items()}
    )
    if (config.num_embeddings, config.embedding_dim) != (n, d) or (
        config.patch_height,
        config.patch_width,
    ) != (r1, r2):
        raise IntegrityError("Codebook header disagrees with metadata")

    table = np.frombuffer(body, dtype="<f4", count=n * d, offset=offset)
    offset += n * d * 4
    (blob_len,) = struct.unpack_from("<Q", body, offset)
    offset += 8
    params = deserialize_tensors(body[offset : offset + blob_len])

    model = TvqvaeModel(config)
    params["embeddings"] = torch.from_numpy(table.reshape(n, d).copy())
    model.load_state_dict(params)
    return model.freeze(), digest.hex()


def load_tvqvae(path: Union[str, Path]) -> Tuple[TvqvaeModel, str]:
    """Load a codebook file from disk."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Codebook file not found: {path}")
    model, digest = decode_tvqvae(path.read_bytes())
    log.info("Loaded codebook %s (%s)", path, digest[:12])
    return model, digest


# ---------------------------------------------------------------------------
# Inspection
# ---------------------------------------------------------------------------


@torch.no_grad()
def reconstruct(model: TvqvaeModel, images: torch.Tensor) -> torch.Tensor:
    """Inputs stacked above their reconstructions, (B, 3, 2H, W)."""
    recon, _, _ = model(images)
    return torch.cat([images, recon], dim=2)


@torch.no_grad()
def index_dump(
    model: TvqvaeModel,
    images: torch.Tensor,
    index: int,
    limit: int = 32,
) -> Optional[torch.Tensor]:
    """
    Image patches whose content vector quantizes to ``index``.

    Returns a (3, r1, k * r2) strip of up to ``limit`` patches, or None when
    no patch in ``images`` uses the index.
    """
    cfg = model.config
    if not 0 <= index < cfg.num_embeddings:
        raise ValidationError(
            f"Index {index} outside [0, {cfg.num_embeddings})"
        )
    result = model.quantize(model.content(images))
    hits = torch.nonzero(result.indices == index)[:limit]
    if hits.numel() == 0:
        return None
    patches = [
        images[
            b,
            :,
            i * cfg.patch_height : (i + 1) * cfg.patch_height,
            j * cfg.patch_width : (j + 1) * cfg.patch_width,
        ]
        for b, i, j in hits.tolist()
    ]
    return torch.cat(patches, dim=2)
