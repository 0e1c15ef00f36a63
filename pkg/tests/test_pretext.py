"""
Tests for the SID, MIM and RTR pretext pieces.
"""

import itertools
import math
import random

import pytest
import torch

from lego.codebook import SlotRef, TokenCache, TokenSequence
from lego.errors import ConfigurationError, ValidationError
from lego.pretext import (
    CrossAttention,
    MaskPlan,
    MimHead,
    MixerRankHead,
    apply_mask,
    ema_update,
    filter_negatives,
    info_nce,
    instance_map,
    make_mask_plan,
    make_permutation,
    masked_count,
    masked_l1,
    mlp_head,
    pad_labels,
    pixel_mask,
    rtr_loss,
    select_positive,
    shuffle_portions,
    sid_loss,
    split_portions,
    symmetric_sid_loss,
    valid_orders,
)

# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


def test_instance_map_pools_column_bands():
    """Frame f averages every token in band f across all rows."""
    grid = (2, 16)
    tokens = torch.arange(32, dtype=torch.float32).reshape(32, 1)
    frames = instance_map(tokens, grid)
    assert tuple(frames.shape) == (8, 1)
    # Band 0 holds columns 0-1 of rows 0 and 1: tokens 0, 1, 16, 17.
    assert float(frames[0, 0]) == pytest.approx(8.5)

    batched = instance_map(tokens.reshape(1, 32, 1).repeat(3, 1, 1), grid)
    assert tuple(batched.shape) == (3, 8, 1)


def test_instance_map_errors():
    """Widths must divide into bands and tokens must fill the grid."""
    with pytest.raises(ConfigurationError):
        instance_map(torch.zeros(12, 4), (1, 12))
    with pytest.raises(ValidationError):
        instance_map(torch.zeros(10, 4), (2, 8))


def test_ema_update_rule():
    """theta_k <- m * theta_k + (1 - m) * theta_q."""
    momentum = [torch.full((3,), 2.0)]
    online = [torch.full((3,), 4.0)]
    ema_update(momentum, online, 0.75)
    assert torch.allclose(momentum[0], torch.full((3,), 2.5))

    ema_update(momentum, online, 1.0)
    assert torch.allclose(momentum[0], torch.full((3,), 2.5))
    ema_update(momentum, online, 0.0)
    assert torch.equal(momentum[0], online[0])


def test_ema_update_on_modules():
    """Modules of equal structure are averaged parameter by parameter."""
    torch.manual_seed(0)
    online = torch.nn.Linear(3, 3)
    momentum = torch.nn.Linear(3, 3)
    ema_update(momentum, online, 0.0)
    assert torch.equal(momentum.weight, online.weight)


def test_ema_update_errors():
    """Bad momentum and mismatched parameters are rejected."""
    with pytest.raises(ValidationError):
        ema_update([torch.zeros(2)], [torch.zeros(2)], 1.5)
    with pytest.raises(ValidationError):
        ema_update([torch.zeros(2)], [torch.zeros(3)], 0.5)
    with pytest.raises(ValidationError):
        ema_update([torch.zeros(2)], [], 0.5)


def test_mlp_head_layout():
    """Hidden layers are Linear-LayerNorm-GELU, the last is Linear."""
    head = mlp_head(8, 16, 4, 3)
    linears = [m for m in head if isinstance(m, torch.nn.Linear)]
    assert len(linears) == 3
    assert isinstance(head[-1], torch.nn.Linear)
    assert tuple(head(torch.randn(2, 8)).shape) == (2, 4)


# ---------------------------------------------------------------------------
# SID
# ---------------------------------------------------------------------------


def test_filter_negatives_drops_same_index():
    """Candidates sharing the anchor's index are removed."""
    cache = TokenCache()
    cache.put(TokenSequence((1, 2, 3, 4, 5, 6, 7, 8), "a"))
    cache.put(TokenSequence((1, 1, 9, 9, 9, 9, 9, 9), "b"))
    anchor = SlotRef("a", 0)
    candidates = [SlotRef("b", 0), SlotRef("b", 1), SlotRef("b", 2)]
    assert filter_negatives(anchor, candidates, cache) == [SlotRef("b", 2)]


def test_select_positive_falls_back_on_empty_pool():
    """No same-index frames elsewhere means the other view is used."""
    q = torch.randn(4)
    fallback = torch.randn(4)
    picked = select_positive(q, torch.empty(0, 4), fallback)
    assert picked is fallback


def test_select_positive_picks_from_top_k():
    """The substitute is one of the k most similar pool rows."""
    q = torch.tensor([1.0, 0.0])
    pool = torch.tensor([[1.0, 0.0], [0.9, 0.1], [-1.0, 0.0], [0.0, 1.0]])
    generator = torch.Generator().manual_seed(0)
    for _ in range(20):
        picked = select_positive(q, pool, q, generator, top_k=2)
        assert any(torch.equal(picked, row) for row in pool[:2])


def test_select_positive_draws_top_k_uniformly():
    """The five most similar rows are each drawn about a fifth of the time."""
    sims = [0.9, 0.8, 0.2, 0.1, 0.5, 0.7]
    pool = torch.tensor([[s, math.sqrt(1.0 - s * s)] for s in sims])
    q = torch.tensor([1.0, 0.0])
    generator = torch.Generator().manual_seed(0)
    counts = [0] * len(sims)
    draws = 1000
    for _ in range(draws):
        picked = select_positive(q, pool, q, generator, top_k=5)
        row = next(
            i for i in range(len(sims)) if torch.equal(picked, pool[i])
        )
        counts[row] += 1

    assert counts[3] == 0
    for row in (0, 1, 2, 4, 5):
        assert abs(counts[row] / draws - 0.2) < 0.05


def test_info_nce_without_negatives_is_zero():
    """With K = 0 the positive is the only candidate."""
    q = torch.nn.functional.normalize(torch.randn(5, 8), dim=-1)
    loss = info_nce(q, q, torch.empty(5, 0, 8), 0.2)
    assert float(loss) == pytest.approx(0.0, abs=1e-6)


def test_info_nce_random_vectors_near_log_k():
    """Random unit vectors give a loss close to ln(K + 1)."""
    generator = torch.Generator().manual_seed(0)
    k = 15
    losses = []
    for _ in range(100):
        vectors = torch.randn(k + 2, 256, generator=generator)
        vectors = torch.nn.functional.normalize(vectors, dim=-1)
        loss = info_nce(vectors[0], vectors[1], vectors[2:], 1.0)
        losses.append(float(loss))
    mean = sum(losses) / len(losses)
    assert abs(mean - math.log(k + 1)) / math.log(k + 1) < 0.05


def test_info_nce_hand_computed():
    """q.k+ = 1 and two negatives at -1 with tau = 1 give ln(1 + 2e^-2)."""
    q = torch.tensor([1.0, 0.0])
    negatives = torch.tensor([[-1.0, 0.0], [-1.0, 0.0]])
    loss = float(info_nce(q, q, negatives, 1.0))
    assert loss == pytest.approx(math.log(1.0 + 2.0 * math.exp(-2.0)))
    assert loss == pytest.approx(0.2395, abs=1e-4)


def test_info_nce_uniform_logits_give_log_k_plus_one():
    """Equal similarities everywhere make every candidate equally likely."""
    q = torch.nn.functional.normalize(torch.randn(8), dim=-1)
    for k in (1, 4, 31):
        negatives = q.expand(k, 8).clone()
        loss = info_nce(q, q, negatives, 0.2)
        assert float(loss) == pytest.approx(math.log(k + 1), rel=1e-5)


def test_info_nce_rejects_bad_temperature():
    """tau must be positive."""
    q = torch.randn(4)
    with pytest.raises(ConfigurationError):
        info_nce(q, q, torch.randn(2, 4), 0.0)


def test_info_nce_gradient_matches_finite_differences():
    """InfoNCE gradients pass a float64 gradcheck."""
    generator = torch.Generator().manual_seed(1)
    q = torch.randn(3, 5, dtype=torch.float64, generator=generator)
    k = torch.randn(3, 5, dtype=torch.float64, generator=generator)
    negatives = torch.randn(3, 4, 5, dtype=torch.float64, generator=generator)
    inputs = tuple(t.requires_grad_() for t in (q, k, negatives))
    assert torch.autograd.gradcheck(
        lambda a, b, c: info_nce(a, b, c, 0.2), inputs
    )


def _unit(*shape, generator):
    return torch.nn.functional.normalize(
        torch.randn(*shape, generator=generator), dim=-1
    )


def test_sid_negatives_never_share_an_index():
    """No negative shares the anchor's index or comes from its image."""
    generator = torch.Generator().manual_seed(2)
    for _ in range(50):
        q = _unit(4, 8, 16, generator=generator)
        k = _unit(4, 8, 16, generator=generator)
        indices = torch.randint(0, 4, (4, 8), generator=generator)
        result = sid_loss(q, k, indices, 0.2, generator)

        flat = indices.reshape(-1)
        image = torch.arange(4).repeat_interleave(8)
        same_index = flat[:, None] == flat[None, :]
        same_image = image[:, None] == image[None, :]
        assert not (result.negative_mask & same_index).any()
        assert not (result.negative_mask & same_image).any()
        assert torch.isfinite(result.loss)


def test_sid_positives_share_index_across_images():
    """Substitute positives come from other images with the same index."""
    generator = torch.Generator().manual_seed(3)
    q = _unit(3, 8, 16, generator=generator)
    k = _unit(3, 8, 16, generator=generator)
    indices = torch.tensor(
        [[0, 1, 2, 3, 4, 5, 6, 7], [0, 9, 9, 9, 9, 9, 9, 9], [20] * 8]
    )
    result = sid_loss(q, k, indices, 0.2, generator)
    flat = indices.reshape(-1)
    own = torch.arange(24)
    for anchor in range(24):
        chosen = int(result.positives[anchor])
        pool = [
            j
            for j in range(24)
            if j // 8 != anchor // 8 and flat[j] == flat[anchor]
        ]
        if pool:
            assert chosen in pool
        else:
            assert chosen == int(own[anchor])


def test_sid_without_codebook_uses_own_view():
    """Without indices the positive is the other view of the same frame."""
    generator = torch.Generator().manual_seed(4)
    q = _unit(2, 8, 16, generator=generator)
    k = _unit(2, 8, 16, generator=generator)
    result = sid_loss(q, k, None, 0.2)
    assert torch.equal(result.positives, torch.arange(16))
    image = torch.arange(2).repeat_interleave(8)
    assert torch.equal(result.negative_mask, image[:, None] != image[None, :])


def test_sid_without_codebook_matches_info_nce():
    """Plain frame contrast is InfoNCE over other-image keys."""
    generator = torch.Generator().manual_seed(5)
    q = _unit(2, 8, 16, generator=generator)
    k = _unit(2, 8, 16, generator=generator)
    result = sid_loss(q, k, None, 0.5)
    flat_q, flat_k = q.reshape(16, 16), k.reshape(16, 16)
    expected = []
    for m in range(16):
        others = torch.stack(
            [flat_k[j] for j in range(16) if j // 8 != m // 8]
        )
        expected.append(info_nce(flat_q[m], flat_k[m], others, 0.5))
    assert float(result.loss) == pytest.approx(
        float(torch.stack(expected).mean()), rel=1e-5
    )


def test_symmetric_sid_is_finite():
    """Both directions combine into one finite loss."""
    generator = torch.Generator().manual_seed(6)
    frames = [_unit(2, 8, 16, generator=generator) for _ in range(4)]
    indices = torch.randint(0, 3, (2, 8), generator=generator)
    loss = symmetric_sid_loss(*frames, indices, 0.2, generator)
    assert torch.isfinite(loss)


# ---------------------------------------------------------------------------
# MIM
# ---------------------------------------------------------------------------


def test_mask_count_is_exact():
    """128 patches at ratio 0.75 always mask exactly 96."""
    for seed in range(50):
        plan = make_mask_plan((8, 16), 0.75, seed, batch=2)
        assert plan.num_masked == 96
        assert plan.mask.sum(dim=1).tolist() == [96, 96]


def test_masked_count_rounds_half_up():
    """Halves round up; the ratio bounds are exact."""
    assert masked_count(10, 0.25) == 3
    assert masked_count(10, 0.0) == 0
    assert masked_count(10, 1.0) == 10


def test_mask_plan_is_seeded():
    """Same seed, same mask; a new seed moves it."""
    a = make_mask_plan((8, 16), 0.75, 1)
    b = make_mask_plan((8, 16), 0.75, 1)
    c = make_mask_plan((8, 16), 0.75, 2)
    assert torch.equal(a.mask, b.mask)
    assert not torch.equal(a.mask, c.mask)


def test_mask_ratio_bounds():
    """Ratios outside [0, 1] are validation errors."""
    with pytest.raises(ValidationError):
        make_mask_plan((8, 16), 1.2)


def test_apply_mask_replaces_masked_tokens_only():
    """Masked positions hold the mask token; others are untouched."""
    tokens = torch.randn(2, 6, 4)
    mask = torch.tensor([[1, 0, 0, 1, 0, 0], [0, 0, 0, 0, 0, 1]]).bool()
    plan = MaskPlan(mask, 0.25, 0)
    token = torch.full((1, 1, 4), 7.0)
    out = apply_mask(tokens, plan, token)
    assert torch.equal(out[mask], torch.full((3, 4), 7.0))
    assert torch.equal(out[~mask], tokens[~mask])


def test_masked_l1_ignores_unmasked_pixels():
    """Errors outside masked patches do not count."""
    target = torch.rand(1, 3, 4, 8)
    plan = MaskPlan(torch.tensor([[True, False, False, False]]), 0.25, 0)
    prediction = target.clone()
    prediction[..., 4:] += 1.0
    assert float(masked_l1(prediction, target, plan, (2, 4))) == 0.0

    prediction = target + 0.5
    assert float(masked_l1(prediction, target, plan, (2, 4))) == (
        pytest.approx(0.5)
    )


def test_masked_l1_has_no_gradient_at_visible_pixels():
    """Autodiff puts gradient on masked patches only."""
    plan = make_mask_plan((2, 4), 0.5, seed=3)
    prediction = torch.rand(1, 3, 4, 16, requires_grad=True)
    loss = masked_l1(prediction, torch.rand(1, 3, 4, 16), plan, (2, 4))
    loss.backward()

    visible = pixel_mask(plan, (2, 4), (2, 4)).expand_as(prediction) == 0
    assert visible.any()
    assert torch.count_nonzero(prediction.grad[visible]) == 0
    assert torch.count_nonzero(prediction.grad[~visible]) > 0


def test_masked_l1_without_mask_is_zero():
    """No masked patches gives a zero loss that still backpropagates."""
    prediction = torch.rand(1, 3, 4, 8, requires_grad=True)
    plan = MaskPlan(torch.zeros(1, 4, dtype=torch.bool), 0.0, 0)
    loss = masked_l1(prediction, torch.rand(1, 3, 4, 8), plan, (2, 4))
    loss.backward()
    assert float(loss) == 0.0
    assert prediction.grad is not None


def test_cross_attention_shapes_and_errors():
    """Output keeps the query shape; dims are checked."""
    attn = CrossAttention(12, num_heads=3, latent_dim=8)
    features = torch.randn(2, 10, 12)
    latents = torch.randn(2, 8, 8)
    assert tuple(attn(features, latents).shape) == (2, 10, 12)
    with pytest.raises(ValidationError):
        attn(torch.randn(2, 10, 6), latents)
    with pytest.raises(ValidationError):
        attn(features, torch.randn(2, 8, 12))


def test_cross_attention_matches_hand_softmax():
    """With identity projections one head is softmax(QK^T/sqrt(d)) V."""
    attn = CrossAttention(4, num_heads=1, latent_dim=4, residual=False)
    with torch.no_grad():
        attn.attn.in_proj_weight.copy_(torch.eye(4).repeat(3, 1))
        attn.attn.in_proj_bias.zero_()
        attn.attn.out_proj.weight.copy_(torch.eye(4))
        attn.attn.out_proj.bias.zero_()
    features = [[1.0, 0.0, 0.5, 0.0], [0.0, 2.0, 0.0, -1.0]]
    latents = [[0.5, 1.0, 0.0, 0.0], [1.0, -0.5, 1.0, 2.0]]

    expected = []
    for query in features:
        scores = [
            sum(a * b for a, b in zip(query, key)) / 2.0 for key in latents
        ]
        weights = [math.exp(s) for s in scores]
        total = sum(weights)
        expected.append(
            [
                sum(w / total * key[d] for w, key in zip(weights, latents))
                for d in range(4)
            ]
        )

    out = attn(torch.tensor([features]), torch.tensor([latents]))
    assert torch.allclose(out[0], torch.tensor(expected), atol=1e-6)

    residual = CrossAttention(4, num_heads=1, latent_dim=4)
    residual.load_state_dict(attn.state_dict())
    shifted = residual(torch.tensor([features]), torch.tensor([latents]))
    assert torch.allclose(shifted, out + torch.tensor([features]), atol=1e-6)


def test_mim_head_adds_attention_to_raw_tokens():
    """Each block adds its output to the un-normalized tokens."""
    torch.manual_seed(0)
    head = MimHead(4, (2, 4), (2, 2), latent_dim=6, num_heads=2)
    tokens = torch.randn(1, 8, 4) * 3.0 + 1.0
    latents = torch.randn(1, 8, 6)
    block, norm = head.blocks[0], head.norms[0]
    expected = tokens + block(norm(tokens), latents)
    assert torch.allclose(head.enhance(tokens, latents), expected)


def test_mim_head_without_latents_skips_attention():
    """Without latents the enhanced features are the inputs."""
    head = MimHead(12, (2, 4), (2, 2), latent_dim=8, num_heads=3)
    tokens = torch.randn(1, 8, 12)
    assert head.enhance(tokens, None) is tokens
    assert tuple(head(tokens).shape) == (1, 3, 4, 8)


def test_mim_gradient_matches_finite_differences():
    """Masked L1 through cross-attention passes a float64 gradcheck."""
    torch.manual_seed(0)
    head = MimHead(4, (2, 4), (2, 2), latent_dim=6, num_heads=2).double()
    target = torch.rand(1, 3, 4, 8, dtype=torch.float64)
    plan = MaskPlan(
        torch.tensor([[True, False, True, True, False, False, True, False]]),
        0.5,
        0,
    )
    tokens = torch.randn(1, 8, 4, dtype=torch.float64, requires_grad=True)
    latents = torch.randn(1, 8, 6, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(
        lambda t, z: masked_l1(head(t, z), target, plan, (2, 2)),
        (tokens, latents),
    )


# ---------------------------------------------------------------------------
# RTR
# ---------------------------------------------------------------------------


def _brute_force_orders(indices, order):
    shown = [indices[o] for o in order]
    return {
        perm
        for perm in itertools.permutations(range(len(indices)))
        if [indices[p] for p in perm] == shown
    }


def test_valid_orders_match_brute_force():
    """Every index assignment over n <= 5 agrees with enumeration."""
    rng = random.Random(0)
    for n in range(1, 6):
        for indices in itertools.product(range(n), repeat=n):
            order = list(range(n))
            rng.shuffle(order)
            found = valid_orders(indices, order, cap=math.factorial(n))
            assert found[0] == tuple(order)
            assert len(found) == len(set(found))
            assert set(found) == _brute_force_orders(indices, order)


def test_valid_orders_two_pairs_among_six():
    """Two same-index pairs among six portions give four labelings."""
    indices = [1, 2, 1, 3, 2, 4]
    order = [3, 0, 5, 1, 4, 2]
    assert len(valid_orders(indices, order)) == 4


def test_valid_orders_cap_keeps_truth():
    """The cap truncates but always keeps the true labeling first."""
    order = (7, 6, 5, 4, 3, 2, 1, 0)
    found = valid_orders([0] * 8, order, cap=64)
    assert len(found) == 64
    assert found[0] == order
    assert found[1:] == sorted(found[1:])


def test_valid_orders_rejects_non_permutation():
    """The order must be a permutation of the positions."""
    with pytest.raises(ValidationError):
        valid_orders([0, 1, 2], [0, 0, 1])


def test_make_permutation_shuffles_strips():
    """Shuffled strip j is original portion order[j]."""
    image = torch.rand(3, 32, 128)
    generator = torch.Generator().manual_seed(0)
    inst = make_permutation(image, None, 8, generator)
    strips = split_portions(image, 8)
    for j, o in enumerate(inst.order):
        strip = inst.shuffled[..., j * 16 : (j + 1) * 16]
        assert torch.equal(strip, strips[o])
    assert inst.valid_labels == [inst.order]
    assert inst.true_label == inst.order


def test_make_permutation_with_tokens():
    """Equal tokens make their strips interchangeable."""
    generator = torch.Generator().manual_seed(1)
    inst = make_permutation(
        torch.rand(3, 32, 128), [5, 5, 1, 2, 3, 4, 6, 7], 8, generator
    )
    assert len(inst.valid_labels) == 2
    assert inst.valid_labels[0] == inst.order


def test_make_permutation_errors():
    """Indivisible widths and token count mismatches are rejected."""
    with pytest.raises(ConfigurationError):
        make_permutation(torch.rand(3, 32, 128), None, 7)
    with pytest.raises(ConfigurationError):
        make_permutation(torch.rand(3, 32, 128), [1, 2, 3], 8)


def test_shuffle_portions_matches_single_image():
    """Batched gathering equals per-image concatenation."""
    images = torch.rand(2, 3, 32, 128)
    generator = torch.Generator().manual_seed(2)
    instances = [make_permutation(img, None, 8, generator) for img in images]
    orders = torch.tensor([inst.order for inst in instances])
    batched = shuffle_portions(images, orders)
    for b, inst in enumerate(instances):
        assert torch.equal(batched[b], inst.shuffled)


def test_rtr_loss_takes_best_valid_labeling():
    """The loss follows whichever valid labeling the logits prefer."""
    n = 3
    preferred = (1, 0, 2)
    logits = torch.full((n, n), -10.0)
    for position, label in enumerate(preferred):
        logits[position, label] = 10.0
    low = rtr_loss(logits, [(0, 1, 2), preferred])
    high = rtr_loss(logits, [(0, 1, 2)])
    assert float(low) < 1e-6
    assert float(high) > 10.0


def test_rtr_loss_over_valid_set_never_exceeds_truth():
    """The truth is always valid, so the minimum is at most its loss."""
    generator = torch.Generator().manual_seed(7)
    for _ in range(20):
        tokens = torch.randint(0, 3, (8,), generator=generator).tolist()
        inst = make_permutation(torch.rand(3, 32, 128), tokens, 8, generator)
        assert inst.true_label in inst.valid_labels
        logits = torch.randn(8, 8, generator=generator)
        assert float(rtr_loss(logits, inst.valid_labels)) <= float(
            rtr_loss(logits, [inst.true_label])
        )


def test_rtr_loss_batched_with_padding():
    """Padding rows never win the minimum."""
    logits = torch.randn(2, 3, 3)
    labels, mask = pad_labels([[(0, 1, 2)], [(2, 1, 0), (1, 2, 0)]])
    assert tuple(labels.shape) == (2, 2, 3)
    assert mask.tolist() == [[True, False], [True, True]]
    batched = rtr_loss(logits, labels, mask)
    separate = (
        rtr_loss(logits[0], [(0, 1, 2)])
        + rtr_loss(logits[1], [(2, 1, 0), (1, 2, 0)])
    ) / 2
    assert float(batched) == pytest.approx(float(separate), rel=1e-6)


def test_rank_head_shapes():
    """The head maps (B, n, D) portion features to (B, n, n) logits."""
    head = MixerRankHead(16, n=8, token_hidden=8)
    assert tuple(head(torch.randn(2, 8, 16)).shape) == (2, 8, 8)
    with pytest.raises(ValidationError):
        head(torch.randn(2, 6, 16))


def test_rank_loss_gradient_matches_finite_differences():
    """Mixer + RTR loss passes a float64 gradcheck."""
    torch.manual_seed(0)
    head = MixerRankHead(
        4, n=3, token_hidden=4, channel_hidden=4, depth=1
    ).double()
    features = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([[[0, 1, 2], [1, 0, 2]]])
    assert torch.autograd.gradcheck(
        lambda x: rtr_loss(head(x), labels, None), (features,)
    )
