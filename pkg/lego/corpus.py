#!/usr/bin/env python3
"""
Synthetic scene-text corpus.

Renders deterministic word images with OpenCV's built-in Hershey stroke
fonts, applies the pretraining augmentation menu, builds contrastive view
pairs and super-resolution pairs, and materialises datasets on disk as
``images/*.png`` plus ``manifest.jsonl``.

All images are float32 numpy arrays of shape (H, W, 3) with values in
[0, 1]. Every function here is a pure function of its inputs and seed.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
from torch.utils.data import Dataset

from . import log
from .errors import ConfigurationError, ValidationError

IMAGE_HEIGHT = 32
IMAGE_WIDTH = 128
MAX_WORD_LENGTH = 10
CHARSET = "abcdefghijklmnopqrstuvwxyz0123456789"

# Hershey fonts ship inside OpenCV, so rendering needs no font files.
FONTS: Dict[int, int] = {
    0: cv2.FONT_HERSHEY_SIMPLEX,
    1: cv2.FONT_HERSHEY_PLAIN,
    2: cv2.FONT_HERSHEY_DUPLEX,
    3: cv2.FONT_HERSHEY_COMPLEX,
    4: cv2.FONT_HERSHEY_TRIPLEX,
    5: cv2.FONT_HERSHEY_COMPLEX_SMALL,
}

# 36 words; together they contain every charset character.
DEFAULT_WORDS: Tuple[str, ...] = (
    "the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog",
    "shop", "exit", "menu", "hotel", "taxi", "open", "sale", "cafe",
    "bank", "park", "zone", "king", "jazz", "wave", "road", "stop",
    "city", "2024", "911", "365", "7eleven", "b52", "route66", "4x4",
    "80s", "m1", "u2", "wifi",
)  # fmt: skip

PRETRAIN_MENU: Tuple[str, ...] = (
    "contrast",
    "blur",
    "sharpen",
    "crop",
    "gray",
    "color-jitter",
    "perspective/affine",
)
RECOGNITION_MENU: Tuple[str, ...] = (
    "blur",
    "contrast",
    "noise",
    "perspective/affine",
)


class Charset:
    """Character set with case folding and 1-based CTC label encoding."""

    def __init__(self, chars: str = CHARSET):
        if len(set(chars)) != len(chars) or not chars:
            raise ConfigurationError(f"Invalid charset {chars!r}")
        self.chars = chars
        self._index = {c: i + 1 for i, c in enumerate(chars)}

    def __len__(self) -> int:
        return len(self.chars)

    def fold(self, text: str) -> str:
        """Lower-case and drop characters outside the charset."""
        return "".join(c for c in text.lower() if c in self._index)

    def validate(self, text: str) -> str:
        """Return the case-folded text or raise for foreign characters."""
        folded = text.lower()
        bad = sorted({c for c in folded if c not in self._index})
        if bad:
            raise ValidationError(
                f"Characters {bad} of {text!r} are outside the charset"
            )
        return folded

    def encode(self, text: str) -> List[int]:
        """Labels 1..len(charset); 0 is reserved for the CTC blank."""
        return [self._index[c] for c in self.validate(text)]

    def decode(self, labels: Sequence[int]) -> str:
        return "".join(self.chars[i - 1] for i in labels if i > 0)


DEFAULT_CHARSET = Charset()


@dataclass
class TextSample:
    """A rendered text image with its transcript."""

    image: np.ndarray
    transcript: str
    sample_id: str

    def validate(self, charset: Charset = DEFAULT_CHARSET) -> None:
        check_image(self.image)
        if not self.transcript:
            raise ValidationError(f"Sample {self.sample_id} has no text")
        charset.validate(self.transcript)


@dataclass(frozen=True)
class RenderSpec:
    """Everything that determines one rendered image."""

    word: str
    font_id: int
    fg_color: Tuple[float, float, float]
    bg_color: Tuple[float, float, float]
    noise_level: float = 0.0
    geometry_seed: int = 0
    noise_seed: int = 0


@dataclass(frozen=True)
class AugmentationPolicy:
    """Augmentation menu, picks per view and documented magnitudes."""

    menu: Tuple[str, ...] = PRETRAIN_MENU
    picks_per_view: int = 3
    seed: int = 0
    contrast_range: Tuple[float, float] = (0.5, 1.5)
    blur_sigma: Tuple[float, float] = (0.3, 1.2)
    sharpen_amount: Tuple[float, float] = (0.5, 1.5)
    crop_fraction: float = 0.1
    brightness: float = 0.15
    saturation: float = 0.3
    hue: float = 0.05
    perspective_fraction: float = 0.06
    affine_degrees: float = 4.0
    affine_shear: float = 0.15
    noise_sigma: Tuple[float, float] = (0.0, 0.05)


@dataclass
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    source_id: str = ""


@dataclass(frozen=True)
class SrDegradation:
    """Blur, box downsample and noise turning an HR image into LR."""

    blur_sigma: Tuple[float, float] = (0.5, 1.5)
    noise_sigma: float = 0.02
    scale: int = 2


SR_PRESETS: Dict[str, SrDegradation] = {
    "easy": SrDegradation(blur_sigma=(0.3, 0.8), noise_sigma=0.01),
    "medium": SrDegradation(),
    "hard": SrDegradation(blur_sigma=(1.0, 2.0), noise_sigma=0.04),
}


@dataclass
class SRPair:
    lr: np.ndarray
    hr: np.ndarray
    source_id: str = ""


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    transcript: str
    split: str

    @property
    def sample_id(self) -> str:
        return Path(self.path).stem


def check_image(
    image: np.ndarray, shape: Optional[Tuple[int, int, int]] = None
) -> None:
    """Raise ValidationError unless image is finite, in range and shaped."""
    shape = shape or (IMAGE_HEIGHT, IMAGE_WIDTH, 3)
    if image.shape != shape:
        raise ValidationError(f"Expected image {shape}, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValidationError("Image contains NaN or Inf")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValidationError("Image values must lie in [0, 1]")


def derive_seed(*entropy: int) -> int:
    """Derive a 32-bit seed from several integers."""
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def random_render_spec(
    word: str, seed: int, max_noise: float = 0.05
) -> RenderSpec:
    """Draw font, contrasting colours and noise for a word from a seed."""
    rng = np.random.default_rng(seed)
    font_id = int(rng.integers(len(FONTS)))
    bg = rng.uniform(0.0, 1.0, 3)
    fg = rng.uniform(0.0, 1.0, 3)
    # Keep the luminance gap readable.
    luma = np.array([0.299, 0.587, 0.114])
    while abs(float(luma @ (fg - bg))) < 0.35:
        fg = rng.uniform(0.0, 1.0, 3)
    return RenderSpec(
        word=word,
        font_id=font_id,
        fg_color=tuple(float(c) for c in fg),
        bg_color=tuple(float(c) for c in bg),
        noise_level=float(rng.uniform(0.0, max_noise)),
        geometry_seed=int(rng.integers(2**31)),
        noise_seed=int(rng.integers(2**31)),
    )


def _fit_text(
    word: str, font: int, thickness: int, rng: np.random.Generator
) -> Tuple[float, int, int, int]:
    """Pick a scale and baseline origin that keep the word in frame."""
    margin_x, margin_y = 3, 2
    (w, h), base = cv2.getTextSize(word, font, 1.0, thickness)
    max_scale = min(
        (IMAGE_WIDTH - 2 * margin_x) / max(w, 1),
        (IMAGE_HEIGHT - 2 * margin_y) / max(h + base, 1),
    )
    scale = max_scale * rng.uniform(0.7, 1.0)
    while True:
        (w, h), base = cv2.getTextSize(word, font, scale, thickness)
        free_x = IMAGE_WIDTH - 2 * margin_x - w - thickness
        free_y = IMAGE_HEIGHT - 2 * margin_y - h - base - thickness
        if free_x >= 0 and free_y >= 0:
            break
        scale *= 0.95
    x = margin_x + int(rng.integers(0, free_x + 1))
    y = margin_y + h + int(rng.integers(0, free_y + 1))
    return scale, x, y, thickness


def render_sample(
    spec: RenderSpec,
    sample_id: Optional[str] = None,
    charset: Charset = DEFAULT_CHARSET,
) -> TextSample:
    """
    Render a word into a 32x128 RGB image.

    Args:
        spec: Word, font, colours, noise and seeds
        sample_id: Identifier for the sample (defaults to word + seed)
        charset: Allowed characters after case folding

    Returns:
        TextSample whose image is bit-identical for identical specs

    Raises:
        ValidationError: Empty/too long word or foreign characters
        ConfigurationError: Unknown font_id
    """
    if not spec.word or len(spec.word) > MAX_WORD_LENGTH:
        raise ValidationError(
            f"Word length must be in [1, {MAX_WORD_LENGTH}], "
            f"got {spec.word!r}"
        )
    word = charset.validate(spec.word)
    if spec.font_id not in FONTS:
        raise ConfigurationError(
            f"Unknown font_id {spec.font_id}; valid ids {sorted(FONTS)}"
        )
    if spec.noise_level < 0:
        raise ValidationError("noise_level must be >= 0")

    font = FONTS[spec.font_id]
    rng = np.random.default_rng(spec.geometry_seed)
    thickness = 1 if font in (FONTS[1], FONTS[5]) else int(rng.integers(1, 3))
    scale, x, y, thickness = _fit_text(word, font, thickness, rng)

    mask = np.zeros((IMAGE_HEIGHT, IMAGE_WIDTH), dtype=np.uint8)
    cv2.putText(mask, word, (x, y), font, scale, 255, thickness, cv2.LINE_AA)
    alpha = (mask.astype(np.float32) / 255.0)[..., None]

    bg = np.asarray(spec.bg_color, dtype=np.float32)
    fg = np.asarray(spec.fg_color, dtype=np.float32)
    image = bg * (1.0 - alpha) + fg * alpha

    if spec.noise_level > 0:
        noise_rng = np.random.default_rng(spec.noise_seed)
        image = image + noise_rng.normal(
            0.0, spec.noise_level, image.shape
        ).astype(np.float32)

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return TextSample(
        image=image,
        transcript=word,
        sample_id=sample_id or f"{word}-{spec.geometry_seed}",
    )


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

AugmentFn = Callable[
    [np.ndarray, np.random.Generator, AugmentationPolicy], np.ndarray
]


def _contrast(img, rng, policy):
    factor = rng.uniform(*policy.contrast_range)
    mean = img.mean()
    return (img - mean) * factor + mean


def _blur(img, rng, policy):
    sigma = rng.uniform(*policy.blur_sigma)
    return cv2.GaussianBlur(
        img, (0, 0), sigma, borderType=cv2.BORDER_REFLECT
    )


def _sharpen(img, rng, policy):
    amount = rng.uniform(*policy.sharpen_amount)
    blurred = cv2.GaussianBlur(img, (0, 0), 1.0, borderType=cv2.BORDER_REFLECT)
    return img + amount * (img - blurred)


def _crop(img, rng, policy):
    h, w = img.shape[:2]
    max_y, max_x = int(h * policy.crop_fraction), int(w * policy.crop_fraction)
    top, bottom = (int(v) for v in rng.integers(0, max_y + 1, 2))
    left, right = (int(v) for v in rng.integers(0, max_x + 1, 2))
    cropped = np.ascontiguousarray(img[top : h - bottom, left : w - right])
    return cv2.copyMakeBorder(
        cropped, top, bottom, left, right, cv2.BORDER_REPLICATE
    )


def _gray(img, rng, policy):  # noqa: ARG001
    gray = cv2.cvtColor(img, cv2.COLOR_RGB2GRAY)
    return np.repeat(gray[..., None], 3, axis=2)


def _color_jitter(img, rng, policy):
    hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV)
    shift = rng.uniform(-policy.hue, policy.hue) * 360.0
    hsv[..., 0] = (hsv[..., 0] + shift) % 360.0
    scale = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
    hsv[..., 1] = np.clip(hsv[..., 1] * scale, 0.0, 1.0)
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return rgb + rng.uniform(-policy.brightness, policy.brightness)


def _perspective_affine(img, rng, policy):
    h, w = img.shape[:2]
    if rng.random() < 0.5:
        src = np.float32([[0, 0], [w, 0], [w, h], [0, h]])
        jitter = rng.uniform(
            -policy.perspective_fraction, policy.perspective_fraction, (4, 2)
        )
        dst = (src + jitter * np.float32([w, h])).astype(np.float32)
        matrix = cv2.getPerspectiveTransform(src, dst)
        return cv2.warpPerspective(
            img, matrix, (w, h), flags=cv2.INTER_LINEAR,
            borderMode=cv2.BORDER_REPLICATE,
        )
    angle = rng.uniform(-policy.affine_degrees, policy.affine_degrees)
    matrix = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, 1.0)
    matrix[0, 1] += rng.uniform(-policy.affine_shear, policy.affine_shear)
    return cv2.warpAffine(
        img, matrix, (w, h), flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REPLICATE,
    )


def _noise(img, rng, policy):
    sigma = rng.uniform(*policy.noise_sigma)
    return img + rng.normal(0.0, sigma, img.shape).astype(np.float32)


AUGMENTATIONS: Dict[str, AugmentFn] = {
    "contrast": _contrast,
    "blur": _blur,
    "sharpen": _sharpen,
    "crop": _crop,
    "gray": _gray,
    "color-jitter": _color_jitter,
    "perspective/affine": _perspective_affine,
    "noise": _noise,
}


def _check_policy(policy: AugmentationPolicy) -> None:
    unknown = [name for name in policy.menu if name not in AUGMENTATIONS]
    if unknown:
        raise ConfigurationError(f"Unknown augmentations {unknown}")
    if not 0 <= policy.picks_per_view <= len(policy.menu):
        raise ConfigurationError(
            f"picks_per_view must be in [0, {len(policy.menu)}], "
            f"got {policy.picks_per_view}"
        )


def _policy_rng(policy: AugmentationPolicy, seed: int) -> np.random.Generator:
    return np.random.default_rng([policy.seed, seed])


def _draw_selection(
    policy: AugmentationPolicy, rng: np.random.Generator
) -> Tuple[str, ...]:
    picks = rng.choice(len(policy.menu), policy.picks_per_view, replace=False)
    return tuple(policy.menu[i] for i in sorted(int(p) for p in picks))


def select_augmentations(
    policy: AugmentationPolicy, seed: int
) -> Tuple[str, ...]:
    """Names augment() applies for (policy, seed), in menu order."""
    _check_policy(policy)
    return _draw_selection(policy, _policy_rng(policy, seed))


def augment(
    image: np.ndarray, policy: AugmentationPolicy, seed: int
) -> np.ndarray:
    """
    Apply picks_per_view distinct menu augmentations to an image.

    The output keeps shape and stays in [0, 1]; identical
    (image, policy, seed) give identical outputs.
    """
    check_image(image)
    _check_policy(policy)
    if policy.picks_per_view == 0:
        return image.copy()

    rng = _policy_rng(policy, seed)
    out = image.astype(np.float32, copy=True)
    for name in _draw_selection(policy, rng):
        out = AUGMENTATIONS[name](out, rng, policy)
        out = np.clip(np.nan_to_num(out, nan=0.0), 0.0, 1.0).astype(
            np.float32
        )
    return out


def make_view_pair(
    image: np.ndarray,
    policy: AugmentationPolicy,
    seed: int,
    source_id: str = "",
) -> ViewPair:
    """Two independently augmented views of one image."""
    seed_a, seed_b = np.random.SeedSequence([seed]).generate_state(2)
    return ViewPair(
        view_a=augment(image, policy, int(seed_a)),
        view_b=augment(image, policy, int(seed_b)),
        source_id=source_id,
    )


# ---------------------------------------------------------------------------
# Super-resolution pairs
# ---------------------------------------------------------------------------


def box_downsample(image: np.ndarray, scale: int = 2) -> np.ndarray:
    """Exact average pooling by an integer factor."""
    h, w, c = image.shape
    if h % scale or w % scale:
        raise ValidationError(f"{image.shape} not divisible by {scale}")
    return image.reshape(h // scale, scale, w // scale, scale, c).mean(
        axis=(1, 3), dtype=np.float32
    )


def make_sr_pair(
    sample: TextSample,
    seed: int,
    degradation: SrDegradation = SR_PRESETS["medium"],
) -> SRPair:
    """
    Degrade an HR sample into a 16x64 LR image.

    lr = clip(box_downsample(gaussian_blur(hr)) + noise); a blur range with
    upper bound 0 disables blurring, noise_sigma 0 disables noise.
    """
    sample.validate()
    rng = np.random.default_rng(seed)
    hr = sample.image
    degraded = hr
    low, high = degradation.blur_sigma
    if high > 0:
        sigma = rng.uniform(low, high)
        degraded = cv2.GaussianBlur(
            hr, (0, 0), sigma, borderType=cv2.BORDER_REFLECT
        )
    lr = box_downsample(degraded, degradation.scale)
    if degradation.noise_sigma > 0:
        lr = lr + rng.normal(0.0, degradation.noise_sigma, lr.shape).astype(
            np.float32
        )
    lr = np.clip(lr, 0.0, 1.0).astype(np.float32)
    return SRPair(lr=lr, hr=hr.copy(), source_id=sample.sample_id)


# ---------------------------------------------------------------------------
# Corpus materialisation
# ---------------------------------------------------------------------------


def render_corpus(
    wordlist: Sequence[str],
    count: int,
    seed: int,
    workers: int = 0,
) -> List[TextSample]:
    """
    Render count samples cycling through a seeded shuffle of wordlist.

    Once count >= len(wordlist) every word (hence, for DEFAULT_WORDS, every
    charset character) appears at least once.
    """
    if not wordlist:
        raise ValidationError("wordlist must not be empty")
    rng = np.random.default_rng(seed)
    order: List[int] = []
    while len(order) < count:
        order.extend(int(i) for i in rng.permutation(len(wordlist)))

    def render_one(i: int) -> TextSample:
        spec = random_render_spec(wordlist[order[i]], derive_seed(seed, i))
        return render_sample(spec, sample_id=f"{i:06d}")

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(render_one, range(count)))
    return [render_one(i) for i in range(count)]


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: Union[str, Path], image: np.ndarray) -> None:
    """Write an RGB float image as PNG, raising OSError on failure."""
    bgr = cv2.cvtColor(to_uint8(image), cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), bgr):
        log.error("Failed to write image: %s", path)
        raise OSError(f"Could not write image {path}")


def read_png(path: Union[str, Path]) -> np.ndarray:
    """Read a PNG as an RGB float32 image in [0, 1]."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        log.error("Failed to read image: %s", path)
        raise OSError(f"Could not read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def build_corpus(
    wordlist: Sequence[str],
    count: int,
    seed: int,
    out_dir: Union[str, Path],
    test_fraction: float = 0.2,
    workers: int = 0,
) -> List[ManifestRecord]:
    """
    Render a corpus and write images/*.png plus manifest.jsonl.

    Rebuilding with the same arguments produces bit-identical files. PNGs
    left in images/ by an earlier build are removed first.

    Raises:
        ValidationError: Empty wordlist
        OSError: out_dir is not writable
    """
    out = Path(out_dir)
    samples = render_corpus(wordlist, count, seed, workers=workers)
    split_rng = np.random.default_rng([seed, 1])
    splits = [
        "test" if split_rng.random() < test_fraction else "train"
        for _ in samples
    ]

    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        log.error("Cannot create corpus directory %s: %s", out, e)
        raise
    stale = sorted((out / "images").glob("*.png"))
    for path in stale:
        path.unlink()
    if stale:
        log.debug("Removed %d images of an earlier build", len(stale))

    records = []
    for sample, split in zip(samples, splits):
        rel = f"images/{sample.sample_id}.png"
        write_png(out / rel, sample.image)
        records.append(ManifestRecord(rel, sample.transcript, split))

    lines = [
        json.dumps(
            {"path": r.path, "transcript": r.transcript, "split": r.split},
            ensure_ascii=False,
        )
        for r in records
    ]
    (out / "manifest.jsonl").write_text(
        "\n".join(lines) + "\n", encoding="utf-8"
    )
    log.info("Wrote %d samples to %s", len(records), out)
    return records


def read_manifest(corpus_dir: Union[str, Path]) -> List[ManifestRecord]:
    manifest = Path(corpus_dir) / "manifest.jsonl"
    if not manifest.exists():
        raise OSError(f"No manifest.jsonl in {corpus_dir}")
    records = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if line.strip():
            data = json.loads(line)
            records.append(
                ManifestRecord(data["path"], data["transcript"], data["split"])
            )
    return records


def load_corpus(
    corpus_dir: Union[str, Path], split: Optional[str] = None
) -> List[TextSample]:
    """Load samples of a built corpus, optionally a single split."""
    root = Path(corpus_dir)
    return [
        TextSample(read_png(root / r.path), r.transcript, r.sample_id)
        for r in read_manifest(root)
        if split is None or r.split == split
    ]


# ---------------------------------------------------------------------------
# Tensor plumbing
# ---------------------------------------------------------------------------


def to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack HWC images into a (B, 3, H, W) float32 tensor."""
    batch = np.stack([np.asarray(img, dtype=np.float32) for img in images])
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()


def to_image(tensor: torch.Tensor) -> np.ndarray:
    """Convert a (3, H, W) tensor to an HWC float32 array."""
    return tensor.detach().cpu().permute(1, 2, 0).numpy().astype(np.float32)


@dataclass
class TextImageDataset(Dataset):
    """Map-style dataset of (image tensor, transcript) pairs."""

    samples: List[TextSample]
    policy: Optional[AugmentationPolicy] = None
    seed: int = 0
    epoch: int = field(default=0)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, str]:
        sample = self.samples[index]
        image = sample.image
        if self.policy is not None:
            image = augment(
                image, self.policy, derive_seed(self.seed, self.epoch, index)
            )
        return to_tensor([image])[0], sample.transcript
