#!/usr/bin/env python3
"""
Pretext tasks driven by the Text Knowledge Codebook.

SID   Selective individual discrimination: contrast eight horizontal frame
      embeddings between two views, dropping negatives that share the
      anchor's codebook index and swapping in a same-index frame from
      another image as the positive.
MIM   Masked image modeling: mask ViT patch embeddings, enrich the encoded
      tokens with retrieved codebook latents by cross-attention, and
      regress masked pixels with an L1 loss.
RTR   Random-ordered text rearrangement: shuffle vertical strips and
      predict their original positions; strips with equal codebook
      indices are interchangeable, so several labelings are correct.
"""

import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from timm.layers import Mlp
from torch import nn

from .codebook import SlotRef, TokenCache
from .errors import ConfigurationError, ValidationError
from .tvqvae import unpatchify

NUM_FRAMES = 8
LABEL_CAP = 64

ParamSource = Union[nn.Module, Iterable[torch.Tensor]]


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


def instance_map(
    tokens: torch.Tensor, grid: Tuple[int, int], bands: int = NUM_FRAMES
) -> torch.Tensor:
    """
    Mean-pool a token grid into vertical bands.

    Args:
        tokens: (B, L, D) or (L, D) row-major tokens of an (gh, gw) grid
        grid: (gh, gw)
        bands: number of equal column bands

    Returns:
        (B, bands, D) or (bands, D); frame f averages every token whose
        column falls in band f
    """
    gh, gw = grid
    if gw % bands:
        raise ConfigurationError(
            f"Grid width {gw} is not divisible into {bands} bands"
        )
    squeeze = tokens.dim() == 2
    if squeeze:
        tokens = tokens.unsqueeze(0)
    b, n, d = tokens.shape
    if n != gh * gw:
        raise ValidationError(f"{n} tokens do not fill a {gh}x{gw} grid")
    frames = tokens.reshape(b, gh, bands, gw // bands, d).mean(dim=(1, 3))
    return frames[0] if squeeze else frames


def _tensors(source: ParamSource) -> List[torch.Tensor]:
    if isinstance(source, nn.Module):
        return list(source.parameters())
    return list(source)


@torch.no_grad()
def ema_update(
    momentum_params: ParamSource, online_params: ParamSource, m: float
) -> None:
    """In place: theta_k <- m * theta_k + (1 - m) * theta_q."""
    if not 0.0 <= m <= 1.0:
        raise ValidationError(f"EMA momentum must be in [0, 1], got {m}")
    targets, sources = _tensors(momentum_params), _tensors(online_params)
    if len(targets) != len(sources):
        raise ValidationError(
            f"Parameter count mismatch: {len(targets)} vs {len(sources)}"
        )
    for k, q in zip(targets, sources):
        if k.shape != q.shape:
            raise ValidationError(
                f"Parameter shape mismatch: {tuple(k.shape)} vs "
                f"{tuple(q.shape)}"
            )
        k.mul_(m).add_(q.detach(), alpha=1.0 - m)


def mlp_head(
    in_dim: int, hidden: int, out_dim: int, layers: int
) -> nn.Sequential:
    """Linear-LayerNorm-GELU stack with a plain final linear layer."""
    modules: List[nn.Module] = []
    dim = in_dim
    for _ in range(layers - 1):
        modules += [nn.Linear(dim, hidden), nn.LayerNorm(hidden), nn.GELU()]
        dim = hidden
    modules.append(nn.Linear(dim, out_dim))
    return nn.Sequential(*modules)


# ---------------------------------------------------------------------------
# SID
# ---------------------------------------------------------------------------


def filter_negatives(
    anchor: SlotRef, candidates: Sequence[SlotRef], cache: TokenCache
) -> List[SlotRef]:
    """Candidates whose codebook index differs from the anchor's."""
    anchor_index = cache.index_of(anchor)
    return [c for c in candidates if cache.index_of(c) != anchor_index]


def select_positive(
    q: torch.Tensor,
    pool: torch.Tensor,
    fallback: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    top_k: int = 5,
) -> torch.Tensor:
    """
    Substitute positive for anchor q.

    Picks uniformly among the top_k pool rows by cosine similarity to q;
    an empty pool returns ``fallback`` (the anchor's own other view).
    """
    if pool.numel() == 0 or pool.shape[0] == 0:
        return fallback
    sims = F.cosine_similarity(q.unsqueeze(0), pool, dim=-1)
    k = min(top_k, pool.shape[0])
    top = torch.topk(sims, k).indices
    pick = int(torch.randint(k, (1,), generator=generator))
    return pool[top[pick]]


def info_nce(
    q: torch.Tensor,
    k_pos: torch.Tensor,
    negatives: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """
    InfoNCE over raw dot products, averaged over anchors.

    Args:
        q: (P,) or (M, P) anchors
        k_pos: same shape as q
        negatives: (K, P) or (M, K, P); K may be 0
        tau: temperature > 0
    """
    if tau <= 0:
        raise ConfigurationError(f"Temperature must be positive, got {tau}")
    if q.dim() == 1:
        q, k_pos, negatives = q[None], k_pos[None], negatives[None]
    if q.shape != k_pos.shape or negatives.shape[-1] != q.shape[-1]:
        raise ValidationError("Anchor, positive and negatives differ in dim")
    l_pos = (q * k_pos).sum(-1) / tau
    l_neg = torch.einsum("mp,mkp->mk", q, negatives) / tau
    logits = torch.cat([l_pos.unsqueeze(-1), l_neg], dim=-1)
    return (torch.logsumexp(logits, dim=-1) - l_pos).mean()


@dataclass
class SidResult:
    loss: torch.Tensor
    positives: torch.Tensor
    negative_mask: torch.Tensor


def sid_loss(
    q: torch.Tensor,
    k: torch.Tensor,
    indices: Optional[torch.Tensor],
    tau: float,
    generator: Optional[torch.Generator] = None,
    top_k: int = 5,
) -> SidResult:
    """
    One direction of SID over a batch.

    Args:
        q: (B, 8, P) unit-norm online frames of one view
        k: (B, 8, P) unit-norm momentum frames of the other view
        indices: (B, 8) codebook indices of the source images, or None
            for plain frame-level contrast without the codebook
        tau: temperature
        generator: RNG for the top-k positive draw
        top_k: size of the substitute-positive shortlist

    Returns:
        SidResult with the mean loss, the chosen positive column per anchor
        and the (M, M) negative mask, M = B * 8
    """
    if tau <= 0:
        raise ConfigurationError(f"Temperature must be positive, got {tau}")
    b, f, p = q.shape
    m = b * f
    q, k = q.reshape(m, p), k.reshape(m, p)
    image = torch.arange(b, device=q.device).repeat_interleave(f)
    other_image = image[:, None] != image[None, :]
    own = torch.arange(m, device=q.device)

    if indices is None:
        negative = other_image
        positives = own
    else:
        idx = indices.reshape(m).to(q.device)
        same = idx[:, None] == idx[None, :]
        negative = other_image & ~same
        pool = other_image & same
        with torch.no_grad():
            sims = (q @ k.T).masked_fill(~pool, float("-inf"))
            width = min(top_k, m)
            top_vals, top_idx = sims.topk(width, dim=1)
            count = torch.isfinite(top_vals).sum(dim=1)
            draw = torch.rand(m, generator=generator).to(q.device)
            pick = (draw * count).floor().long()
            pick = torch.minimum(pick, (count - 1).clamp(min=0))
            chosen = top_idx.gather(1, pick[:, None]).squeeze(1)
            positives = torch.where(count > 0, chosen, own)

    logits = (q @ k.T) / tau
    l_pos = logits.gather(1, positives[:, None]).squeeze(1)
    l_neg = logits.masked_fill(~negative, float("-inf"))
    all_logits = torch.cat([l_pos[:, None], l_neg], dim=1)
    loss = (torch.logsumexp(all_logits, dim=1) - l_pos).mean()
    return SidResult(loss, positives, negative)


def symmetric_sid_loss(
    q_a: torch.Tensor,
    q_b: torch.Tensor,
    k_a: torch.Tensor,
    k_b: torch.Tensor,
    indices: Optional[torch.Tensor],
    tau: float,
    generator: Optional[torch.Generator] = None,
    top_k: int = 5,
) -> torch.Tensor:
    """Average of sid_loss(q_a vs k_b) and sid_loss(q_b vs k_a)."""
    ab = sid_loss(q_a, k_b, indices, tau, generator, top_k).loss
    ba = sid_loss(q_b, k_a, indices, tau, generator, top_k).loss
    return 0.5 * (ab + ba)


# ---------------------------------------------------------------------------
# MIM
# ---------------------------------------------------------------------------


@dataclass
class MaskPlan:
    """Boolean mask over ViT patches, one row per image."""

    mask: torch.Tensor
    ratio: float
    seed: int

    @property
    def num_masked(self) -> int:
        return int(self.mask[0].sum())


def masked_count(total: int, ratio: float) -> int:
    """round(ratio * total), halves rounded up."""
    return int(math.floor(ratio * total + 0.5))


def make_mask_plan(
    grid: Tuple[int, int], ratio: float = 0.75, seed: int = 0, batch: int = 1
) -> MaskPlan:
    """Patch-aligned random mask with exactly round(ratio * total) hits."""
    if not 0.0 <= ratio <= 1.0:
        raise ValidationError(f"Mask ratio must be in [0, 1], got {ratio}")
    total = grid[0] * grid[1]
    count = masked_count(total, ratio)
    generator = torch.Generator().manual_seed(seed)
    mask = torch.zeros(batch, total, dtype=torch.bool)
    for row in range(batch):
        mask[row, torch.randperm(total, generator=generator)[:count]] = True
    return MaskPlan(mask, ratio, seed)


def apply_mask(
    tokens: torch.Tensor, plan: MaskPlan, mask_token: torch.Tensor
) -> torch.Tensor:
    """Replace masked positions of (B, L, D) tokens by mask_token."""
    mask = plan.mask.to(tokens.device)
    if mask.shape != tokens.shape[:2]:
        raise ValidationError(
            f"Mask {tuple(mask.shape)} does not match tokens "
            f"{tuple(tokens.shape[:2])}"
        )
    return torch.where(
        mask.unsqueeze(-1), mask_token.reshape(1, 1, -1).to(tokens), tokens
    )


class CrossAttention(nn.Module):
    """
    Multi-head cross-attention from token features to codebook latents.

    Queries are the (B, n_t, D) features, keys and values the (B, 8, D_l)
    retrieved latents. Output keeps the query shape.
    """

    def __init__(
        self,
        dim: int,
        num_heads: int = 6,
        latent_dim: Optional[int] = None,
        residual: bool = True,
    ):
        super().__init__()
        self.dim = dim
        self.latent_dim = latent_dim or dim
        self.residual = residual
        self.attn = nn.MultiheadAttention(
            dim,
            num_heads,
            kdim=self.latent_dim,
            vdim=self.latent_dim,
            batch_first=True,
        )

    def forward(
        self, features: torch.Tensor, latents: torch.Tensor
    ) -> torch.Tensor:
        if features.shape[-1] != self.dim:
            raise ValidationError(
                f"Feature dim {features.shape[-1]} != {self.dim}"
            )
        if latents.shape[-1] != self.latent_dim:
            raise ValidationError(
                f"Latent dim {latents.shape[-1]} != {self.latent_dim}"
            )
        attended, _ = self.attn(features, latents, latents, need_weights=False)
        return features + attended if self.residual else attended


class MimHead(nn.Module):
    """Cross-attention blocks followed by a per-token linear pixel decoder."""

    def __init__(
        self,
        embed_dim: int,
        grid: Tuple[int, int],
        patch_size: Tuple[int, int],
        latent_dim: Optional[int] = None,
        num_heads: int = 6,
        blocks: int = 1,
    ):
        super().__init__()
        self.grid = tuple(grid)
        self.patch_size = tuple(patch_size)
        self.norms = nn.ModuleList(
            [nn.LayerNorm(embed_dim) for _ in range(blocks)]
        )
        self.blocks = nn.ModuleList(
            [
                CrossAttention(
                    embed_dim, num_heads, latent_dim, residual=False
                )
                for _ in range(blocks)
            ]
        )
        self.pred = nn.Linear(embed_dim, patch_size[0] * patch_size[1] * 3)

    def enhance(
        self, tokens: torch.Tensor, latents: Optional[torch.Tensor]
    ) -> torch.Tensor:
        """Enhanced features T_e; identity when latents is None."""
        if latents is None:
            return tokens
        for norm, block in zip(self.norms, self.blocks):
            tokens = tokens + block(norm(tokens), latents)
        return tokens

    def reconstruct(self, enhanced: torch.Tensor) -> torch.Tensor:
        """(B, L, D) -> (B, 3, H, W) pixel prediction Y."""
        b = enhanced.shape[0]
        gh, gw = self.grid
        patches = self.pred(enhanced).reshape(b, gh, gw, -1)
        return unpatchify(patches, *self.patch_size)

    def forward(
        self, tokens: torch.Tensor, latents: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        return self.reconstruct(self.enhance(tokens, latents))


def pixel_mask(
    plan: MaskPlan, grid: Tuple[int, int], patch_size: Tuple[int, int]
) -> torch.Tensor:
    """Expand a patch mask to a (B, 1, H, W) float pixel mask."""
    b = plan.mask.shape[0]
    mask = plan.mask.reshape(b, *grid).float()
    mask = mask.repeat_interleave(patch_size[0], dim=1)
    return mask.repeat_interleave(patch_size[1], dim=2).unsqueeze(1)


def masked_l1(
    prediction: torch.Tensor,
    target: torch.Tensor,
    plan: MaskPlan,
    patch_size: Tuple[int, int],
) -> torch.Tensor:
    """Mean absolute error over masked pixels only; 0 when none masked."""
    if prediction.shape != target.shape:
        raise ValidationError(
            f"Shape mismatch {tuple(prediction.shape)} vs "
            f"{tuple(target.shape)}"
        )
    grid = (
        target.shape[2] // patch_size[0],
        target.shape[3] // patch_size[1],
    )
    mask = pixel_mask(plan, grid, patch_size).to(prediction)
    mask = mask.expand_as(prediction)
    count = mask.sum()
    if count == 0:
        return (prediction * 0).sum()
    return ((prediction - target).abs() * mask).sum() / count


# ---------------------------------------------------------------------------
# RTR
# ---------------------------------------------------------------------------


@dataclass
class PermutationInstance:
    """Shuffled strips of one image plus every acceptable labeling."""

    n: int
    order: Tuple[int, ...]
    valid_labels: List[Tuple[int, ...]]
    portions: torch.Tensor
    shuffled: torch.Tensor

    @property
    def true_label(self) -> Tuple[int, ...]:
        return self.order


def valid_orders(
    portion_indices: Sequence[int],
    order: Sequence[int],
    cap: int = LABEL_CAP,
) -> List[Tuple[int, ...]]:
    """
    Labelings equivalent to the true one under codebook-index swaps.

    Position j of the shuffled image holds original portion order[j]; a
    labeling L is valid when portion_indices[L[j]] equals the index of
    the portion actually shown at j. The true labeling comes first, the
    rest follow in lexicographic order, at most ``cap`` in total.
    """
    n = len(portion_indices)
    if sorted(order) != list(range(n)):
        raise ValidationError(f"Order {tuple(order)} is not a permutation")
    truth = tuple(int(o) for o in order)
    shown = [portion_indices[o] for o in truth]
    found = [truth]
    used = [False] * n
    current: List[int] = []

    def extend(j: int) -> bool:
        if len(found) >= cap:
            return True
        if j == n:
            labeling = tuple(current)
            if labeling != truth:
                found.append(labeling)
            return len(found) >= cap
        for label in range(n):
            if not used[label] and portion_indices[label] == shown[j]:
                used[label] = True
                current.append(label)
                done = extend(j + 1)
                current.pop()
                used[label] = False
                if done:
                    return True
        return False

    extend(0)
    return found


def split_portions(image: torch.Tensor, n: int) -> torch.Tensor:
    """(3, H, W) -> (n, 3, H, W / n) equal-width strips."""
    width = image.shape[-1]
    if width % n:
        raise ConfigurationError(
            f"Image width {width} is not divisible into {n} portions"
        )
    return torch.stack(image.chunk(n, dim=-1))


def shuffle_portions(
    images: torch.Tensor, orders: torch.Tensor
) -> torch.Tensor:
    """Rearrange strips of (B, 3, H, W) so strip j shows orders[b, j]."""
    b, c, h, w = images.shape
    n = orders.shape[1]
    if w % n:
        raise ConfigurationError(
            f"Image width {w} is not divisible into {n} portions"
        )
    strips = images.reshape(b, c, h, n, w // n)
    index = orders.to(images.device).reshape(b, 1, 1, n, 1)
    index = index.expand(b, c, h, n, w // n)
    return strips.gather(3, index).reshape(b, c, h, w)


def make_permutation(
    image: torch.Tensor,
    tokens: Optional[Sequence[int]],
    n: int = NUM_FRAMES,
    generator: Optional[torch.Generator] = None,
    cap: int = LABEL_CAP,
) -> PermutationInstance:
    """
    Cut an image into n strips and shuffle them.

    With tokens (one codebook index per strip) every index-preserving
    relabeling is valid; without, only the true labeling is.
    """
    portions = split_portions(image, n)
    order = tuple(int(i) for i in torch.randperm(n, generator=generator))
    if tokens is None:
        labels = [order]
    else:
        if len(tokens) != n:
            raise ConfigurationError(
                f"{len(tokens)} codebook slots cannot label {n} portions"
            )
        labels = valid_orders([int(t) for t in tokens], order, cap)
    shuffled = torch.cat([portions[o] for o in order], dim=-1)
    return PermutationInstance(n, order, labels, portions, shuffled)


def pad_labels(
    label_sets: Sequence[Sequence[Tuple[int, ...]]],
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack ragged label sets into (B, V, n) labels and a (B, V) mask."""
    width = max(len(s) for s in label_sets)
    n = len(label_sets[0][0])
    labels = torch.zeros(len(label_sets), width, n, dtype=torch.long)
    mask = torch.zeros(len(label_sets), width, dtype=torch.bool)
    for row, options in enumerate(label_sets):
        labels[row, : len(options)] = torch.tensor(options, dtype=torch.long)
        mask[row, : len(options)] = True
    return labels, mask


class MixerLayer(nn.Module):
    """Token-mixing MLP then channel-mixing MLP, each residual."""

    def __init__(
        self, num_tokens: int, dim: int, token_hidden: int, channel_hidden: int
    ):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.token_mlp = Mlp(num_tokens, token_hidden, act_layer=nn.GELU)
        self.norm2 = nn.LayerNorm(dim)
        self.channel_mlp = Mlp(dim, channel_hidden, act_layer=nn.GELU)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.token_mlp(self.norm1(x).transpose(1, 2)).transpose(1, 2)
        return x + self.channel_mlp(self.norm2(x))


class MixerRankHead(nn.Module):
    """Two Mixer layers and a per-portion n-way position classifier."""

    def __init__(
        self,
        dim: int,
        n: int = NUM_FRAMES,
        token_hidden: int = 64,
        channel_hidden: Optional[int] = None,
        depth: int = 2,
    ):
        super().__init__()
        self.n = n
        self.layers = nn.Sequential(
            *[
                MixerLayer(n, dim, token_hidden, channel_hidden or 4 * dim)
                for _ in range(depth)
            ]
        )
        self.norm = nn.LayerNorm(dim)
        self.classifier = nn.Linear(dim, n)

    def forward(self, portion_features: torch.Tensor) -> torch.Tensor:
        """(B, n, D) -> rank logits (B, n, n)."""
        if portion_features.shape[1] != self.n:
            raise ValidationError(
                f"Expected {self.n} portions, got {portion_features.shape[1]}"
            )
        return self.classifier(self.norm(self.layers(portion_features)))


def rtr_loss(
    logits: torch.Tensor,
    valid_labels: Union[torch.Tensor, Sequence[Tuple[int, ...]]],
    valid_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Minimum over valid labelings of the mean per-portion cross-entropy.

    Accepts an unbatched (n, n) logit matrix with a list of labelings, or
    batched (B, n, n) logits with (B, V, n) labels and a (B, V) mask.
    """
    if logits.dim() == 2:
        logits = logits.unsqueeze(0)
        labels = torch.as_tensor(valid_labels, dtype=torch.long).unsqueeze(0)
        valid_mask = None
    else:
        labels = torch.as_tensor(valid_labels, dtype=torch.long)
    labels = labels.to(logits.device)
    if valid_mask is None:
        valid_mask = torch.ones(labels.shape[:2], dtype=torch.bool)
    valid_mask = valid_mask.to(logits.device)

    b, v, n = labels.shape
    log_probs = F.log_softmax(logits, dim=-1)
    expanded = log_probs.unsqueeze(1).expand(b, v, n, n)
    picked = expanded.gather(3, labels.unsqueeze(-1)).squeeze(-1)
    ce = -picked.mean(dim=-1)
    ce = ce.masked_fill(~valid_mask, float("inf"))
    return ce.min(dim=1).values.mean()
