#!/usr/bin/env python3
"""
Downstream evaluation: CTC text recognition and text super-resolution.

The recognizer reads one timestep per ViT token column (16 for the default
8x16 grid) through a linear CTC head; blank is label 0. The SR model
upsamples 16x64 inputs bicubically to 32x128, encodes them with the ViT
and adds a small convolutional residual.
"""

import copy
import dataclasses
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader

from . import log
from .config import config_hash
from .corpus import (
    DEFAULT_CHARSET,
    IMAGE_HEIGHT,
    IMAGE_WIDTH,
    RECOGNITION_MENU,
    SR_PRESETS,
    AugmentationPolicy,
    Charset,
    SRPair,
    TextImageDataset,
    TextSample,
    derive_seed,
    make_sr_pair,
    to_tensor,
)
from .encoder import ViTEncoder
from .errors import DivergenceError, IntegrityError, ValidationError
from .integrity import (
    atomic_write_bytes,
    module_hash,
    pack_artifact,
    unpack_artifact,
)
from .trainer import cosine_schedule
from .tvqvae import unpatchify

SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class DownstreamConfig:
    """Recognizer and super-resolution training settings."""

    epochs: int = 10
    warmup_epochs: int = 1
    batch_size: int = 64
    lr: float = 1.0
    rho: float = 0.9
    grad_clip: float = 5.0
    augment: bool = False
    sr_epochs: int = 50
    sr_batch_size: int = 32
    sr_lr: float = 5e-4
    sr_weight_decay: float = 0.05
    sr_channels: int = 32
    seed: int = 0


@dataclass
class EvalReport:
    """Metrics of one evaluation split."""

    split: str
    sample_count: int
    config_hash: str
    task: str = "recognition"
    word_accuracy: Optional[float] = None
    psnr: Optional[float] = None
    ssim: Optional[float] = None
    baseline_psnr: Optional[float] = None
    baseline_ssim: Optional[float] = None

    def __post_init__(self):
        if self.word_accuracy is not None and not (
            0.0 <= self.word_accuracy <= 1.0
        ):
            raise ValidationError(
                f"word_accuracy {self.word_accuracy} outside [0, 1]"
            )
        for name in ("ssim", "baseline_ssim"):
            value = getattr(self, name)
            if value is not None and not -1.0 <= value <= 1.0:
                raise ValidationError(f"{name} {value} outside [-1, 1]")

    def to_dict(self) -> Dict[str, object]:
        """JSON-safe dict; an infinite PSNR is written as "inf"."""
        data = dataclasses.asdict(self)
        for key, value in data.items():
            if isinstance(value, float) and math.isinf(value):
                data[key] = "inf"
        return {k: v for k, v in data.items() if v is not None}


def write_reports(reports: Sequence[EvalReport], path: Union[str, Path]):
    payload = json.dumps([r.to_dict() for r in reports], indent=2)
    atomic_write_bytes(path, (payload + "\n").encode("utf-8"))
    log.info("Wrote %d evaluation reports to %s", len(reports), path)


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------


def min_ctc_length(labels: Sequence[int]) -> int:
    """Timesteps needed: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def ctc_loss(
    logits: torch.Tensor,
    transcripts: Union[str, Sequence[str]],
    charset: Charset = DEFAULT_CHARSET,
) -> torch.Tensor:
    """
    Mean CTC negative log-likelihood.

    Args:
        logits: (T, V+1) for one transcript or (B, T, V+1); blank is 0
        transcripts: str or B strings over charset

    Raises:
        ValidationError: A transcript cannot be aligned to T steps
    """
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
    if isinstance(transcripts, str):
        transcripts = [transcripts]
    b, t, classes = logits.shape
    if classes != len(charset) + 1:
        raise ValidationError(
            f"Logits have {classes} classes; charset needs {len(charset) + 1}"
        )
    if len(transcripts) != b:
        raise ValidationError(f"{len(transcripts)} transcripts for {b} rows")

    targets = [charset.encode(text) for text in transcripts]
    for text, labels in zip(transcripts, targets):
        if min_ctc_length(labels) > t:
            raise ValidationError(
                f"Transcript {text!r} needs {min_ctc_length(labels)} "
                f"timesteps, only {t} available"
            )
    log_probs = F.log_softmax(logits, dim=-1).transpose(0, 1)
    flat = torch.tensor(
        list(itertools.chain.from_iterable(targets)), dtype=torch.long
    )
    losses = F.ctc_loss(
        log_probs,
        flat,
        input_lengths=torch.full((b,), t, dtype=torch.long),
        target_lengths=torch.tensor(
            [len(x) for x in targets], dtype=torch.long
        ),
        blank=0,
        reduction="none",
    )
    return losses.mean()


def ctc_greedy_decode(
    logits: torch.Tensor, charset: Charset = DEFAULT_CHARSET
) -> str:
    """Argmax per step, collapse repeats, drop blanks."""
    path = logits.argmax(dim=-1).tolist()
    collapsed = [label for label, _ in itertools.groupby(path)]
    return charset.decode([label for label in collapsed if label != 0])


def word_accuracy(
    predictions: Sequence[str],
    references: Sequence[str],
    charset: Charset = DEFAULT_CHARSET,
) -> float:
    """Exact-match rate after case folding to the charset."""
    if len(predictions) != len(references):
        raise ValidationError(
            f"{len(predictions)} predictions for {len(references)} references"
        )
    if not references:
        return 0.0
    hits = sum(
        charset.fold(p) == charset.fold(r)
        for p, r in zip(predictions, references)
    )
    return hits / len(references)


# ---------------------------------------------------------------------------
# Recognition
# ---------------------------------------------------------------------------


class RecognizerModel(nn.Module):
    """ViT encoder plus a linear CTC head over token columns."""

    def __init__(
        self,
        encoder: ViTEncoder,
        charset: Charset = DEFAULT_CHARSET,
        frozen: bool = True,
    ):
        super().__init__()
        self.encoder = encoder
        self.charset = charset
        self.head = nn.Linear(encoder.embed_dim, len(charset) + 1)
        self.frozen = frozen
        self.reports: List[EvalReport] = []
        if frozen:
            for param in self.encoder.parameters():
                param.requires_grad = False

    def train(self, mode: bool = True) -> "RecognizerModel":
        super().train(mode)
        if self.frozen:
            self.encoder.eval()
        return self

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Column-pooled tokens (B, gw, D)."""
        gh, gw = self.encoder.grid
        if self.frozen:
            with torch.no_grad():
                tokens = self.encoder(images)
        else:
            tokens = self.encoder(images)
        b, _, d = tokens.shape
        return tokens.reshape(b, gh, gw, d).mean(dim=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """CTC logits (B, T, V+1)."""
        return self.head(self.features(images))

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> List[str]:
        was_training = self.training
        self.eval()
        logits = self(images)
        self.train(was_training)
        return [ctc_greedy_decode(row, self.charset) for row in logits]


def evaluate_recognizer(
    model: RecognizerModel,
    samples: Sequence[TextSample],
    split: str,
    cfg_hash: str = "",
    batch_size: int = 256,
) -> EvalReport:
    predictions: List[str] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        predictions.extend(model.predict(to_tensor([s.image for s in chunk])))
    accuracy = word_accuracy(
        predictions, [s.transcript for s in samples], model.charset
    )
    log.info(
        "%s word accuracy: %.4f (%d samples)", split, accuracy, len(samples)
    )
    return EvalReport(
        split=split,
        sample_count=len(samples),
        config_hash=cfg_hash,
        word_accuracy=accuracy,
    )


def _train_recognizer(
    encoder: ViTEncoder,
    samples: Sequence[TextSample],
    config: DownstreamConfig,
    frozen: bool,
    held_out: Optional[Dict[str, Sequence[TextSample]]],
    charset: Charset,
) -> RecognizerModel:
    if not samples:
        raise ValidationError("Recognition training set is empty")
    torch.manual_seed(config.seed)
    model = RecognizerModel(copy.deepcopy(encoder), charset, frozen)
    policy = (
        AugmentationPolicy(
            menu=RECOGNITION_MENU, picks_per_view=1, seed=config.seed
        )
        if config.augment
        else None
    )
    dataset = TextImageDataset(list(samples), policy, config.seed)
    loader = DataLoader(
        dataset,
        batch_size=config.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(config.seed),
    )
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adadelta(trainable, lr=config.lr, rho=config.rho)
    per_epoch = len(loader)
    total = config.epochs * per_epoch
    warmup = min(config.warmup_epochs * per_epoch, total)

    step = 0
    model.train()
    for epoch in range(config.epochs):
        dataset.epoch = epoch
        running = 0.0
        for images, transcripts in loader:
            lr = cosine_schedule(step, config.lr, warmup, total)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss = ctc_loss(model(images), list(transcripts), charset)
            value = float(loss.detach())
            if not math.isfinite(value):
                log.error("Recognition loss became %s at step %d", value, step)
                raise DivergenceError("recognition", step, value)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(trainable, config.grad_clip)
            optimizer.step()
            running += value
            step += 1
        log.info(
            "%s epoch %d: ctc=%.4f",
            "probe" if frozen else "finetune",
            epoch,
            running / max(per_epoch, 1),
        )

    model.eval()
    cfg_hash = config_hash(config)
    for split, split_samples in (held_out or {}).items():
        model.reports.append(
            evaluate_recognizer(model, split_samples, split, cfg_hash)
        )
    return model


def probe_train(
    encoder: ViTEncoder,
    samples: Sequence[TextSample],
    config: DownstreamConfig = DownstreamConfig(),
    held_out: Optional[Dict[str, Sequence[TextSample]]] = None,
    charset: Charset = DEFAULT_CHARSET,
) -> RecognizerModel:
    """Train only the CTC head on a frozen copy of encoder."""
    before = module_hash(encoder)
    model = _train_recognizer(
        encoder, samples, config, True, held_out, charset
    )
    if module_hash(model.encoder) != before:
        log.error("Encoder hash changed during probe training")
        raise IntegrityError("Frozen encoder changed during probe training")
    return model


def finetune(
    encoder: ViTEncoder,
    samples: Sequence[TextSample],
    config: DownstreamConfig = DownstreamConfig(),
    held_out: Optional[Dict[str, Sequence[TextSample]]] = None,
    charset: Charset = DEFAULT_CHARSET,
) -> RecognizerModel:
    """Train encoder copy and CTC head together."""
    return _train_recognizer(
        encoder, samples, config, False, held_out, charset
    )


# ---------------------------------------------------------------------------
# Super-resolution
# ---------------------------------------------------------------------------


def bicubic_upsample(lr: torch.Tensor) -> torch.Tensor:
    """(B, 3, h, w) -> (B, 3, 32, 128), clamped to [0, 1]."""
    up = F.interpolate(
        lr,
        size=(IMAGE_HEIGHT, IMAGE_WIDTH),
        mode="bicubic",
        align_corners=False,
    )
    return up.clamp(0.0, 1.0)


class SrModel(nn.Module):
    """Bicubic upsample, ViT encoding and a residual conv decoder."""

    def __init__(self, encoder: ViTEncoder, channels: int = 32):
        super().__init__()
        self.encoder = encoder
        ph, pw = encoder.patch_size
        self.channels = channels
        self.expand = nn.Linear(encoder.embed_dim, ph * pw * channels)
        self.decoder = nn.Sequential(
            nn.Conv2d(channels + 3, channels, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(channels, 3, 3, padding=1),
        )
        nn.init.zeros_(self.decoder[-1].weight)
        nn.init.zeros_(self.decoder[-1].bias)

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        expected = (3, IMAGE_HEIGHT // 2, IMAGE_WIDTH // 2)
        if lr.dim() != 4 or tuple(lr.shape[1:]) != expected:
            raise ValidationError(
                f"Expected LR images (B, {expected}), got {tuple(lr.shape)}"
            )
        up = bicubic_upsample(lr)
        tokens = self.encoder(up)
        gh, gw = self.encoder.grid
        features = unpatchify(
            self.expand(tokens).reshape(lr.shape[0], gh, gw, -1),
            *self.encoder.patch_size,
        )
        residual = self.decoder(torch.cat([features, up], dim=1))
        return (up + residual).clamp(0.0, 1.0)


def sr_forward(model: SrModel, lr: torch.Tensor) -> torch.Tensor:
    return model(lr)


def _pair_tensors(pairs: Sequence[SRPair]):
    return to_tensor([p.lr for p in pairs]), to_tensor([p.hr for p in pairs])


def sr_finetune(
    encoder: ViTEncoder,
    pairs: Sequence[SRPair],
    config: DownstreamConfig = DownstreamConfig(),
) -> SrModel:
    """Fine-tune encoder copy and SR decoder on an MSE objective."""
    if not pairs:
        raise ValidationError("Super-resolution training set is empty")
    torch.manual_seed(config.seed)
    model = SrModel(copy.deepcopy(encoder), config.sr_channels)
    lr_images, hr_images = _pair_tensors(pairs)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.sr_lr,
        weight_decay=config.sr_weight_decay,
    )
    generator = torch.Generator().manual_seed(config.seed)
    per_epoch = math.ceil(len(pairs) / config.sr_batch_size)
    total = config.sr_epochs * per_epoch
    warmup = min(config.warmup_epochs * per_epoch, total)

    step = 0
    model.train()
    for epoch in range(config.sr_epochs):
        order = torch.randperm(len(pairs), generator=generator)
        running = 0.0
        for start in range(0, len(pairs), config.sr_batch_size):
            idx = order[start : start + config.sr_batch_size]
            for group in optimizer.param_groups:
                group["lr"] = cosine_schedule(
                    step, config.sr_lr, warmup, total
                )
            loss = F.mse_loss(model(lr_images[idx]), hr_images[idx])
            value = float(loss.detach())
            if not math.isfinite(value):
                log.error("SR loss became %s at step %d", value, step)
                raise DivergenceError("super-resolution", step, value)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            running += value
            step += 1
        log.debug("sr epoch %d: mse=%.6f", epoch, running / per_epoch)
    return model.eval()


def _as_float64(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    return image.detach().to(torch.float64)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; inf when identical."""
    a, b = _as_float64(a), _as_float64(b)
    if a.shape != b.shape:
        raise ValidationError(
            f"Shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b) -> float:
    """
    Mean SSIM over 8x8 sliding windows and channels.

    Accepts (C, H, W) tensors or (H, W, C) arrays with values in [0, 1];
    window statistics are population moments, C1 = 0.01^2, C2 = 0.03^2.
    """
    numpy_layout = isinstance(a, np.ndarray)
    a, b = _as_float64(a), _as_float64(b)
    if a.shape != b.shape:
        raise ValidationError(
            f"Shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    if numpy_layout:
        a, b = a.permute(2, 0, 1), b.permute(2, 0, 1)
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.shape[-2] < SSIM_WINDOW or a.shape[-1] < SSIM_WINDOW:
        raise ValidationError(
            f"Images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )

    c1, c2 = SSIM_K1**2, SSIM_K2**2

    def window_mean(x: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(x, SSIM_WINDOW, stride=1)

    mu_a, mu_b = window_mean(a), window_mean(b)
    var_a = window_mean(a * a) - mu_a * mu_a
    var_b = window_mean(b * b) - mu_b * mu_b
    cov = window_mean(a * b) - mu_a * mu_b
    numerator = (2 * (mu_a * mu_b) + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((numerator / denominator).mean())


@torch.no_grad()
def evaluate_sr(
    model: SrModel,
    samples: Sequence[TextSample],
    seed: int = 0,
    presets: Sequence[str] = ("easy", "medium", "hard"),
    cfg_hash: str = "",
) -> List[EvalReport]:
    """PSNR/SSIM of the model and of bicubic upsampling per preset."""
    model.eval()
    reports = []
    for preset in presets:
        pairs = [
            make_sr_pair(s, derive_seed(seed, i), SR_PRESETS[preset])
            for i, s in enumerate(samples)
        ]
        lr_images, hr_images = _pair_tensors(pairs)
        predicted = model(lr_images)
        baseline = bicubic_upsample(lr_images)
        scores = _mean_scores(predicted, hr_images)
        base_scores = _mean_scores(baseline, hr_images)
        reports.append(
            EvalReport(
                split=preset,
                sample_count=len(pairs),
                config_hash=cfg_hash,
                task="super-resolution",
                psnr=scores["psnr"],
                ssim=scores["ssim"],
                baseline_psnr=base_scores["psnr"],
                baseline_ssim=base_scores["ssim"],
            )
        )
        log.info(
            "SR %s: psnr=%.2f ssim=%.4f (bicubic %.2f / %.4f)",
            preset,
            scores["psnr"],
            scores["ssim"],
            base_scores["psnr"],
            base_scores["ssim"],
        )
    return reports


def _mean_scores(
    predicted: torch.Tensor, target: torch.Tensor
) -> Dict[str, float]:
    pairs = list(zip(predicted, target))
    return {
        "psnr": float(np.mean([psnr(p, t) for p, t in pairs])),
        "ssim": float(np.mean([ssim(p, t) for p, t in pairs])),
    }


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

DOWNSTREAM_MAGIC = b"LEGODOWN"
DOWNSTREAM_VERSION = 1


def save_downstream(
    model: Union[RecognizerModel, SrModel], path: Union[str, Path]
) -> None:
    """Write a trained recognizer or SR model."""
    meta: Dict[str, object] = {"encoder": model.encoder.spec()}
    if isinstance(model, RecognizerModel):
        meta.update(
            kind="recognizer", charset=model.charset.chars, frozen=model.frozen
        )
    else:
        meta.update(kind="sr", channels=model.channels)
    data = pack_artifact(
        DOWNSTREAM_MAGIC, DOWNSTREAM_VERSION, meta, model.state_dict()
    )
    atomic_write_bytes(path, data)
    log.info("Saved %s model to %s", meta["kind"], path)


def load_downstream(path: Union[str, Path]) -> Union[RecognizerModel, SrModel]:
    """Inverse of save_downstream; the model is returned in eval mode."""
    meta, tensors = unpack_artifact(
        Path(path).read_bytes(), DOWNSTREAM_MAGIC, DOWNSTREAM_VERSION
    )
    encoder = ViTEncoder(**meta["encoder"])
    if meta["kind"] == "recognizer":
        model: nn.Module = RecognizerModel(
            encoder, Charset(meta["charset"]), meta["frozen"]
        )
    else:
        model = SrModel(encoder, meta["channels"])
    model.load_state_dict(tensors)
    return model.eval()
