#!/usr/bin/env python3
"""
Joint pretraining of the ViT encoder on SID, MIM and RTR.

Every source of randomness in a step (batch order, augmentations, masks,
strip shuffles, positive draws) is derived from (seed, step), and
checkpoints carry the optimizer state, so a resumed run reproduces the
uninterrupted one bit for bit.

Checkpoints are integrity.pack_artifact files (magic b"LEGOCKPT") holding
the config, hashes, step and optimizer scalars as JSON metadata and every
parameter and optimizer tensor in the blob.
"""

import copy
import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from . import log
from .codebook import TextKnowledgeCodebook, TokenCache, tokenize_corpus
from .config import config_hash
from .corpus import (
    PRETRAIN_MENU,
    AugmentationPolicy,
    TextSample,
    derive_seed,
    make_view_pair,
    to_tensor,
)
from .encoder import ViTEncoder
from .errors import (
    ConfigurationError,
    DivergenceError,
    ValidationError,
)
from .integrity import atomic_write_bytes, pack_artifact, unpack_artifact
from .pretext import (
    MimHead,
    MixerRankHead,
    apply_mask,
    ema_update,
    instance_map,
    make_mask_plan,
    make_permutation,
    masked_l1,
    mlp_head,
    pad_labels,
    rtr_loss,
    symmetric_sid_loss,
)

CHECKPOINT_MAGIC = b"LEGOCKPT"
CHECKPOINT_VERSION = 1

# Purpose tags mixed into per-step seeds
_ORDER, _VIEWS, _MASK, _SHUFFLE, _SID = range(5)


@dataclass(frozen=True)
class PretrainConfig:
    """Pretraining hyperparameters; every field is a config-file key."""

    lr_init: float = 1.5e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    epochs: int = 10
    warmup_epochs: int = 1
    batch_size: int = 64
    alpha: float = 0.1
    beta: float = 1.0
    tau: float = 0.2
    ema_m: float = 0.99
    mask_ratio: float = 0.75
    n_portions: int = 8
    seed: int = 0
    use_sid: bool = True
    use_mim: bool = True
    use_rtr: bool = True
    use_codebook: bool = True
    embed_dim: int = 384
    depth: int = 12
    num_heads: int = 6
    patch_height: int = 4
    patch_width: int = 8
    proj_hidden: int = 4096
    proj_dim: int = 256
    top_k: int = 5
    cross_attn_blocks: int = 1
    mixer_token_hidden: int = 64
    label_cap: int = 64
    grad_clip: float = 1.0
    max_steps: int = 0
    checkpoint_every: int = 0
    log_every: int = 10

    @property
    def patch_size(self) -> Tuple[int, int]:
        return (self.patch_height, self.patch_width)

    def validate(self) -> None:
        positive = (
            "lr_init",
            "epochs",
            "batch_size",
            "tau",
            "n_portions",
            "embed_dim",
            "depth",
            "num_heads",
            "proj_hidden",
            "proj_dim",
            "top_k",
            "cross_attn_blocks",
            "label_cap",
            "grad_clip",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        for name in ("alpha", "beta", "weight_decay"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and >= 0")
        if not 0.0 <= self.ema_m <= 1.0:
            raise ConfigurationError("ema_m must be in [0, 1]")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigurationError("mask_ratio must be in [0, 1]")
        if self.warmup_epochs < 0 or self.max_steps < 0:
            raise ConfigurationError("warmup_epochs/max_steps must be >= 0")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError("embed_dim must divide by num_heads")
        if self.use_rtr and self.use_codebook and self.n_portions != 8:
            raise ConfigurationError(
                "Codebook-labelled RTR needs n_portions == 8"
            )
        if not (self.use_sid or self.use_mim or self.use_rtr):
            raise ConfigurationError("At least one pretext task is required")


@dataclass
class LossBundle:
    L_c: torch.Tensor
    L_m: torch.Tensor
    L_r: torch.Tensor
    total: torch.Tensor

    def as_record(self) -> Dict[str, float]:
        return {
            "L_c": float(self.L_c),
            "L_m": float(self.L_m),
            "L_r": float(self.L_r),
            "total": float(self.total),
        }


def combine_losses(L_c, L_m, L_r, alpha: float, beta: float, step: int = -1):
    """
    total = L_c + alpha * L_m + beta * L_r.

    Raises:
        DivergenceError: Any term is NaN or infinite (names the task)
    """
    for task, value in (("SID", L_c), ("MIM", L_m), ("RTR", L_r)):
        number = float(value)
        if not math.isfinite(number):
            log.error("Non-finite %s loss %s at step %d", task, number, step)
            raise DivergenceError(task, step, number)
    return L_c + alpha * L_m + beta * L_r


def cosine_schedule(
    step: int, base_lr: float, warmup_steps: int, total_steps: int
) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to 0."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def steps_per_epoch(config: PretrainConfig, corpus_size: int) -> int:
    return max(1, math.ceil(corpus_size / config.batch_size))


def total_steps(config: PretrainConfig, corpus_size: int) -> int:
    return config.max_steps or config.epochs * steps_per_epoch(
        config, corpus_size
    )


def lr_schedule(step: int, config: PretrainConfig, corpus_size: int) -> float:
    """Learning rate at ``step`` for a corpus of ``corpus_size`` images."""
    total = total_steps(config, corpus_size)
    warmup = min(
        config.warmup_epochs * steps_per_epoch(config, corpus_size), total
    )
    return cosine_schedule(step, config.lr_init, warmup, total)


class LegoModel(nn.Module):
    """Online encoder with task heads, plus the momentum branch."""

    def __init__(self, config: PretrainConfig, latent_dim: int):
        super().__init__()
        self.config = config
        self.latent_dim = latent_dim
        self.encoder = ViTEncoder(
            patch_size=config.patch_size,
            embed_dim=config.embed_dim,
            depth=config.depth,
            num_heads=config.num_heads,
        )
        d = config.embed_dim
        self.projector: Optional[nn.Module] = None
        self.predictor: Optional[nn.Module] = None
        self.mask_token: Optional[nn.Parameter] = None
        self.mim_head: Optional[MimHead] = None
        self.rank_head: Optional[MixerRankHead] = None
        self.momentum_encoder: Optional[ViTEncoder] = None
        self.momentum_projector: Optional[nn.Module] = None

        if config.use_sid:
            self.projector = mlp_head(
                d, config.proj_hidden, config.proj_dim, 3
            )
            self.predictor = mlp_head(
                config.proj_dim, config.proj_hidden, config.proj_dim, 2
            )
        if config.use_mim:
            self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
            nn.init.normal_(self.mask_token, std=0.02)
            self.mim_head = MimHead(
                d,
                self.encoder.grid,
                config.patch_size,
                latent_dim=latent_dim,
                num_heads=config.num_heads,
                blocks=config.cross_attn_blocks,
            )
        if config.use_rtr:
            self.rank_head = MixerRankHead(
                d, config.n_portions, config.mixer_token_hidden
            )
        if config.use_sid:
            self.momentum_encoder = copy.deepcopy(self.encoder)
            self.momentum_projector = copy.deepcopy(self.projector)
            for param in self.momentum_parameters():
                param.requires_grad = False

    def _momentum_pairs(self) -> List[Tuple[nn.Module, nn.Module]]:
        if self.momentum_encoder is None:
            return []
        return [
            (self.momentum_encoder, self.encoder),
            (self.momentum_projector, self.projector),
        ]

    def momentum_parameters(self) -> List[nn.Parameter]:
        return [p for m, _ in self._momentum_pairs() for p in m.parameters()]

    def online_parameters(self) -> List[nn.Parameter]:
        momentum = {id(p) for p in self.momentum_parameters()}
        return [p for p in self.parameters() if id(p) not in momentum]

    def update_momentum(self) -> None:
        for momentum, online in self._momentum_pairs():
            ema_update(momentum, online, self.config.ema_m)

    def frames(self, images: torch.Tensor) -> torch.Tensor:
        """Unit-norm online query frames (B, 8, P)."""
        tokens = self.encoder(images)
        z = self.projector(instance_map(tokens, self.encoder.grid))
        return F.normalize(self.predictor(z), dim=-1)

    @torch.no_grad()
    def momentum_frames(self, images: torch.Tensor) -> torch.Tensor:
        """Unit-norm momentum key frames (B, 8, P)."""
        tokens = self.momentum_encoder(images)
        grid = self.momentum_encoder.grid
        return F.normalize(
            self.momentum_projector(instance_map(tokens, grid)), dim=-1
        )


@dataclass
class PretrainBatch:
    """One step's data: clean images, two augmented views and tokens."""

    images: torch.Tensor
    view_a: torch.Tensor
    view_b: torch.Tensor
    tokens: torch.Tensor
    source_ids: List[str]


@dataclass
class TrainState:
    model: LegoModel
    optimizer: torch.optim.Optimizer
    config: PretrainConfig
    corpus_size: int
    codebook_hash: str
    step: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def total_steps(self) -> int:
        return total_steps(self.config, self.corpus_size)


def _generator(config: PretrainConfig, step: int, purpose: int):
    return torch.Generator().manual_seed(
        derive_seed(config.seed, step, purpose)
    )


def batch_indices(
    config: PretrainConfig, corpus_size: int, step: int
) -> List[int]:
    """Corpus positions used at ``step``; a fresh permutation per epoch."""
    per_epoch = steps_per_epoch(config, corpus_size)
    epoch, offset = divmod(step, per_epoch)
    order = torch.randperm(
        corpus_size, generator=_generator(config, epoch, _ORDER)
    )
    start = offset * config.batch_size
    return [int(i) for i in order[start : start + config.batch_size]]


def make_batch(
    corpus: Sequence[TextSample],
    cache: TokenCache,
    config: PretrainConfig,
    step: int,
    policy: Optional[AugmentationPolicy] = None,
    workers: int = 0,
) -> PretrainBatch:
    """Assemble the deterministic batch for ``step``."""
    policy = policy or AugmentationPolicy(menu=PRETRAIN_MENU, seed=config.seed)
    chosen = [corpus[i] for i in batch_indices(config, len(corpus), step)]

    def views(i: int):
        sample = chosen[i]
        seed = derive_seed(config.seed, step, _VIEWS, i)
        return make_view_pair(sample.image, policy, seed, sample.sample_id)

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(views, range(len(chosen))))
    else:
        pairs = [views(i) for i in range(len(chosen))]

    images = to_tensor([s.image for s in chosen])
    ids = [s.sample_id for s in chosen]
    return PretrainBatch(
        images=images,
        view_a=to_tensor([p.view_a for p in pairs]),
        view_b=to_tensor([p.view_b for p in pairs]),
        tokens=cache.add_batch(ids, images),
        source_ids=ids,
    )


def compute_losses(
    model: LegoModel,
    batch: PretrainBatch,
    codebook: TextKnowledgeCodebook,
    step: int,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Raw (L_c, L_m, L_r); one encoder forward per task."""
    cfg = model.config
    zero = batch.images.new_zeros(())
    indices = batch.tokens if cfg.use_codebook else None
    L_c = L_m = L_r = zero

    if cfg.use_sid:
        L_c = symmetric_sid_loss(
            model.frames(batch.view_a),
            model.frames(batch.view_b),
            model.momentum_frames(batch.view_a),
            model.momentum_frames(batch.view_b),
            indices,
            cfg.tau,
            _generator(cfg, step, _SID),
            cfg.top_k,
        )

    if cfg.use_mim:
        encoder = model.encoder
        plan = make_mask_plan(
            encoder.grid,
            cfg.mask_ratio,
            derive_seed(cfg.seed, step, _MASK),
            batch=batch.images.shape[0],
        )
        masked = apply_mask(
            encoder.patch_tokens(batch.images), plan, model.mask_token
        )
        latents = None
        if cfg.use_codebook:
            latents = codebook.retrieve_latents(batch.tokens).to(masked)
        prediction = model.mim_head(encoder.encode(masked), latents)
        L_m = masked_l1(prediction, batch.images, plan, cfg.patch_size)

    if cfg.use_rtr:
        generator = _generator(cfg, step, _SHUFFLE)
        instances = [
            make_permutation(
                image,
                None if indices is None else indices[i].tolist(),
                cfg.n_portions,
                generator,
                cfg.label_cap,
            )
            for i, image in enumerate(batch.images)
        ]
        shuffled = torch.stack([inst.shuffled for inst in instances])
        features = instance_map(
            model.encoder(shuffled), model.encoder.grid, cfg.n_portions
        )
        labels, mask = pad_labels([inst.valid_labels for inst in instances])
        L_r = rtr_loss(model.rank_head(features), labels, mask)

    return L_c, L_m, L_r


def build_state(
    config: PretrainConfig,
    codebook: TextKnowledgeCodebook,
    corpus_size: int,
) -> TrainState:
    """Fresh model and optimizer seeded from config.seed."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = LegoModel(config, codebook.embedding_dim)
    optimizer = torch.optim.AdamW(
        model.online_parameters(),
        lr=config.lr_init,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    return TrainState(
        model=model,
        optimizer=optimizer,
        config=config,
        corpus_size=corpus_size,
        codebook_hash=codebook.content_hash,
    )


def pretrain_step(
    state: TrainState,
    batch: PretrainBatch,
    codebook: TextKnowledgeCodebook,
    checkpoint_dir: Union[str, Path, None] = None,
) -> Tuple[TrainState, LossBundle]:
    """
    One optimizer step on the online parameters and one EMA update.

    On a non-finite loss the state is checkpointed to checkpoint_dir
    (when given) before DivergenceError propagates.
    """
    if not codebook.model.frozen:
        raise ConfigurationError("Codebook must be frozen during pretraining")
    codebook.verify(state.codebook_hash)
    cfg, model = state.config, state.model
    model.train()

    lr = lr_schedule(state.step, cfg, state.corpus_size)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    L_c, L_m, L_r = compute_losses(model, batch, codebook, state.step)
    try:
        total = combine_losses(L_c, L_m, L_r, cfg.alpha, cfg.beta, state.step)
    except DivergenceError:
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"diverged_{state.step:06d}.ckpt"
            save_checkpoint(state, path)
            log.error("Saved pre-divergence checkpoint to %s", path)
        raise

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    nn.utils.clip_grad_norm_(model.online_parameters(), cfg.grad_clip)
    state.optimizer.step()
    model.update_momentum()

    bundle = LossBundle(
        L_c.detach(), L_m.detach(), L_r.detach(), total.detach()
    )
    record = {"step": state.step, **bundle.as_record(), "lr": lr}
    state.history.append(record)
    state.step += 1
    return state, bundle


def run_pretraining(
    config: PretrainConfig,
    corpus: Sequence[TextSample],
    codebook: TextKnowledgeCodebook,
    out_dir: Union[str, Path, None] = None,
    resume: Union[str, Path, None] = None,
    stop_at: Optional[int] = None,
    workers: int = 0,
) -> TrainState:
    """
    Run (or resume) pretraining.

    Writes ``metrics.jsonl`` and ``last.ckpt`` (plus periodic
    ``step_NNNNNN.ckpt`` files) under out_dir. ``stop_at`` ends the run
    early after that many total steps, checkpointing as usual.
    """
    if not corpus:
        raise ValidationError("Pretraining corpus is empty")
    start_hash = codebook.content_hash

    if resume is not None:
        state = load_checkpoint(resume, codebook)
        if state.config_hash != config_hash(config):
            raise ConfigurationError(
                "Checkpoint was written with a different configuration"
            )
        if state.corpus_size != len(corpus):
            raise ConfigurationError(
                f"Checkpoint corpus size {state.corpus_size} != "
                f"{len(corpus)}"
            )
        log.info("Resuming pretraining at step %d", state.step)
    else:
        state = build_state(config, codebook, len(corpus))

    cache = TokenCache(codebook)
    for tokens in tokenize_corpus(codebook, corpus):
        cache.put(tokens)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is not None:
            _truncate_metrics(out / "metrics.jsonl", state.step)
    end = state.total_steps
    if stop_at is not None:
        end = min(stop_at, end)
    log.info(
        "Pretraining steps %d..%d (SID=%s MIM=%s RTR=%s codebook=%s)",
        state.step,
        end,
        config.use_sid,
        config.use_mim,
        config.use_rtr,
        config.use_codebook,
    )

    while state.step < end:
        batch = make_batch(corpus, cache, config, state.step, workers=workers)
        state, _ = pretrain_step(state, batch, codebook, out)
        record = state.history[-1]
        if out is not None:
            with (out / "metrics.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if config.log_every and record["step"] % config.log_every == 0:
            log.info(
                "step %d: total=%.4f L_c=%.4f L_m=%.4f L_r=%.4f lr=%.2e",
                record["step"],
                record["total"],
                record["L_c"],
                record["L_m"],
                record["L_r"],
                record["lr"],
            )
        if (
            out is not None
            and config.checkpoint_every
            and state.step % config.checkpoint_every == 0
        ):
            save_checkpoint(state, out / f"step_{state.step:06d}.ckpt")

    codebook.verify(start_hash)
    if out is not None:
        save_checkpoint(state, out / "last.ckpt")
    return state


def _truncate_metrics(path: Path, step: int) -> None:
    """Keep records before ``step``; a resumed run replays the rest."""
    if not path.exists():
        return
    kept = [
        line
        for line in path.read_text(encoding="utf-8").splitlines()
        if line and json.loads(line)["step"] < step
    ]
    path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _flatten_optimizer(
    optimizer: torch.optim.Optimizer,
) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """Split an optimizer state_dict into tensors and JSON-able scalars."""
    state_dict = optimizer.state_dict()
    tensors: Dict[str, torch.Tensor] = {}
    scalars: Dict[str, Any] = {}
    for index, slots in state_dict["state"].items():
        for key, value in slots.items():
            name = f"optimizer.{index}.{key}"
            if torch.is_tensor(value):
                tensors[name] = value
            else:
                scalars[name] = value
    return tensors, {"param_groups": state_dict["param_groups"], **scalars}


def _unflatten_optimizer(
    tensors: Dict[str, torch.Tensor], meta: Dict[str, Any]
) -> Dict[str, Any]:
    state: Dict[int, Dict[str, Any]] = {}
    entries = list(tensors.items()) + [
        (k, v) for k, v in meta.items() if k.startswith("optimizer.")
    ]
    for name, value in entries:
        _, index, key = name.split(".", 2)
        state.setdefault(int(index), {})[key] = value
    return {"state": state, "param_groups": meta["param_groups"]}


def encode_checkpoint(state: TrainState) -> bytes:
    """Deterministic checkpoint bytes."""
    opt_tensors, opt_meta = _flatten_optimizer(state.optimizer)
    meta = {
        "config": dataclasses.asdict(state.config),
        "config_hash": state.config_hash,
        "codebook_hash": state.codebook_hash,
        "corpus_size": state.corpus_size,
        "latent_dim": state.model.latent_dim,
        "step": state.step,
        "rng": {"seed": state.config.seed, "step": state.step},
        "optimizer": opt_meta,
    }
    tensors = {
        f"model.{k}": v for k, v in state.model.state_dict().items()
    }
    tensors.update(opt_tensors)
    return pack_artifact(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, meta, tensors)


def save_checkpoint(state: TrainState, path: Union[str, Path]) -> None:
    """Atomically write a checkpoint."""
    atomic_write_bytes(path, encode_checkpoint(state))
    log.debug("Checkpoint at step %d written to %s", state.step, path)


def decode_checkpoint(
    data: bytes, codebook: Optional[TextKnowledgeCodebook] = None
) -> TrainState:
    """Rebuild a TrainState from checkpoint bytes."""
    meta, tensors = unpack_artifact(
        data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION
    )
    if codebook is not None and meta["codebook_hash"] != codebook.content_hash:
        raise ConfigurationError(
            "Checkpoint was trained against a different codebook"
        )
    config = PretrainConfig(**meta["config"])
    model = LegoModel(config, meta["latent_dim"])
    model.load_state_dict(
        {
            k[len("model.") :]: v
            for k, v in tensors.items()
            if k.startswith("model.")
        }
    )
    optimizer = torch.optim.AdamW(
        model.online_parameters(),
        lr=config.lr_init,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    optimizer.load_state_dict(
        _unflatten_optimizer(
            {k: v for k, v in tensors.items() if k.startswith("optimizer.")},
            meta["optimizer"],
        )
    )
    return TrainState(
        model=model,
        optimizer=optimizer,
        config=config,
        corpus_size=meta["corpus_size"],
        codebook_hash=meta["codebook_hash"],
        step=meta["step"],
    )


def load_checkpoint(
    path: Union[str, Path], codebook: Optional[TextKnowledgeCodebook] = None
) -> TrainState:
    """Read and verify a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Checkpoint not found: {path}")
    state = decode_checkpoint(path.read_bytes(), codebook)
    log.info("Loaded checkpoint %s (step %d)", path, state.step)
    return state


def load_encoder(path: Union[str, Path]) -> ViTEncoder:
    """Online ViT encoder of a pretraining checkpoint."""
    return load_checkpoint(path).model.encoder
