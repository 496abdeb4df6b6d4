import math

import numpy as np
import pytest
import torch

from icsynergy.context import mask_and_assemble
from icsynergy.dataset import SynergyTuple as T
from icsynergy.model import (
    InputError,
    ModelConfig,
    build_model,
    encode,
    forward,
    load_checkpoint,
    loss_retrieval,
    loss_synergy,
    prefix_weights,
    save_checkpoint,
)
from icsynergy.train import batch_loss, query_logits

TINY = ModelConfig(num_drugs=12, num_cells=4, d_model=16, n_layers=2, n_heads=2, max_ctx_examples=6, retrieval_dim=5)


def _tiny_model(seed=0, spread=0.3):
    m = build_model(TINY, seed=seed, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        # widen the initial weights so every coordinate carries real gradient
        for p in m.parameters():
            p.add_(spread * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return m


def _prompts(rng, n_ctx, count, h=0):
    out = []
    for _ in range(count):
        ctx = [T(h if rng.random() < 0.5 else int(rng.integers(1, 12)), int(rng.integers(1, 12)),
                 int(rng.integers(4)), int(rng.integers(2))) for _ in range(n_ctx)]
        q = T(h, int(rng.integers(1, 12)), int(rng.integers(4)), int(rng.integers(2)))
        out.append(mask_and_assemble(ctx, q, h))
    return out


def _fd_check(model, loss_fn, n_coords=100, step=1e-4, seed=0):
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    params = [p for p in model.parameters() if p.grad is not None]
    grads = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    while checked < n_coords:
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        flat = params[k].data.view(-1)
        i = int(rng.integers(flat.numel()))
        orig = flat[i].item()
        with torch.no_grad():
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
        num = (up - down) / (2 * step)
        ana = grads[k].view(-1)[i].item()
        scale = max(abs(num), abs(ana))
        if scale < 1e-7:
            continue  # flat coordinate: relative error is meaningless
        worst = max(worst, abs(num - ana) / scale)
        checked += 1
    return worst


def test_gradient_synergy_matches_finite_differences():
    model = _tiny_model()
    prompts = _prompts(np.random.default_rng(0), 3, 4)
    err = _fd_check(model, lambda: batch_loss(model, prompts, "synergy", 3))
    assert err < 1e-4


def test_gradient_retrieval_matches_finite_differences():
    model = _tiny_model(seed=1)
    rng = np.random.default_rng(1)
    prompts = _prompts(rng, 3, 4)
    targets = [v / np.linalg.norm(v) for v in rng.normal(size=(4, TINY.retrieval_dim))]
    err = _fd_check(model, lambda: batch_loss(model, prompts, "retrieval", 3, targets), seed=1)
    assert err < 1e-4


def test_causality_exact():
    model = _tiny_model()
    rng = np.random.default_rng(3)
    p = _prompts(rng, 4, 1)[0]
    ids = encode([p], TINY)
    h0 = model.hidden(ids)
    for t in range(ids.shape[1]):
        other = ids.clone()
        other[0, t:] = (other[0, t:] + 1) % TINY.vocab_size
        h1 = model.hidden(other)
        assert torch.equal(h0[0, :t], h1[0, :t])


def test_prefix_consistency():
    model = _tiny_model()
    ctx = [T(0, 1, 0, 1), T(2, 0, 1, 0), T(3, 4, 2, 1)]
    q = T(0, 5, 3, 1)
    full = forward(model, mask_and_assemble(ctx, q, 0)).logits
    for i in range(len(ctx)):
        short = forward(model, mask_and_assemble(ctx[:i], ctx[i], 0)).logits
        np.testing.assert_allclose(short, full[: i + 1], rtol=0, atol=1e-12)


def test_masked_identity_is_invisible():
    model = _tiny_model()
    a = mask_and_assemble([T(3, 1, 0, 1)], T(3, 2, 1, 0), 3)
    b = mask_and_assemble([T(7, 1, 0, 1)], T(7, 2, 1, 0), 7)
    assert np.array_equal(forward(model, a).logits, forward(model, b).logits)


def test_zero_readout_gives_zero_logit():
    model = _tiny_model()
    with torch.no_grad():
        model.synergy_head.weight.zero_()
        model.synergy_head.bias.zero_()
    p = _prompts(np.random.default_rng(0), 2, 1)[0]
    assert np.all(forward(model, p).logits == 0.0)
    loss = loss_synergy(torch.zeros(1, 3, dtype=torch.float64), torch.tensor([[1.0, 0.0, 1.0]], dtype=torch.float64))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_contrastive_single_pair_is_zero():
    pred = torch.randn(1, 5, dtype=torch.float64)
    tgt = torch.nn.functional.normalize(torch.randn(1, 5, dtype=torch.float64), dim=-1)
    assert loss_retrieval(pred, tgt, math.log(1 / 0.07)).item() == 0.0


def test_contrastive_scale_invariance():
    g = torch.Generator().manual_seed(0)
    pred = torch.randn(6, 5, generator=g, dtype=torch.float64)
    tgt = torch.nn.functional.normalize(torch.randn(6, 5, generator=g, dtype=torch.float64), dim=-1)
    base = loss_retrieval(pred, tgt, 2.0)
    for c in (1e-3, 0.5, 7.0, 1e4):
        assert loss_retrieval(c * pred, tgt, 2.0).item() == pytest.approx(base.item(), rel=1e-12)


def test_contrastive_rejects_empty_batch():
    with pytest.raises(ValueError):
        loss_retrieval(torch.zeros(0, 3), torch.zeros(0, 3), 1.0)


def test_doubling_weights_doubles_gradient():
    logits = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    y = torch.randint(0, 2, (3, 4)).double()
    w = torch.rand(4, dtype=torch.float64)
    (g1,) = torch.autograd.grad(loss_synergy(logits, y, w), logits)
    (g2,) = torch.autograd.grad(loss_synergy(logits, y, 2 * w), logits)
    assert torch.equal(g2, 2 * g1)


def test_unused_embedding_rows_get_no_gradient():
    model = _tiny_model()
    prompts = [mask_and_assemble([T(1, 2, 0, 1)], T(0, 3, 1, 0), 0)]
    batch_loss(model, prompts, "synergy", 1).backward()
    used = set(encode(prompts, TINY).view(-1).tolist())
    grad = model.tok_emb.weight.grad
    for row in range(TINY.vocab_size):
        if row not in used:
            assert torch.all(grad[row] == 0)
    assert any(torch.any(grad[r] != 0) for r in used)


def test_prefix_weights():
    assert torch.equal(prefix_weights(4), torch.ones(4))
    w = prefix_weights(21, "retrieval", 20)
    assert w[-1].item() == 1.0 and w[1].item() == pytest.approx(1 / 20)
    assert w[0].item() == pytest.approx(1 / 20)  # zero-context term kept at the first weight


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        loss_synergy(torch.zeros(2, 3), torch.zeros(2, 4))


def test_encode_errors():
    a = mask_and_assemble([], T(0, 1, 0, 1), 0)
    b = mask_and_assemble([T(2, 3, 0, 1)], T(0, 1, 0, 1), 0)
    with pytest.raises(InputError):
        encode([a, b], TINY)
    with pytest.raises(InputError):
        encode([mask_and_assemble([], T(0, 99, 0, 1), 0)], TINY)
    with pytest.raises(InputError):
        encode([mask_and_assemble([], T(0, 1, 9, 1), 0)], TINY)
    with pytest.raises(InputError):
        encode([], TINY)


def test_too_long_prompt_rejected():
    ctx = [T(1, 2, 0, 1)] * (TINY.max_ctx_examples + 1)
    model = _tiny_model()
    with pytest.raises(InputError):
        model.hidden(encode([mask_and_assemble(ctx, T(0, 1, 0, 1), 0)], TINY))


def test_token_layout():
    p = mask_and_assemble([T(3, 4, 1, 1)], T(5, 6, 2, 0), 5, query_label=False)
    ids = encode([p], TINY)[0].tolist()
    nd, nc = TINY.num_drugs, TINY.num_cells
    assert ids == [3, 4, nd + 1, nd + nc + 1, nd + nc + 2, 6, nd + 2]


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_checkpoint_roundtrip(tmp_path, dtype):
    model = build_model(TINY, seed=4, dtype=dtype)
    path = tmp_path / "ck" / "m.npz"
    save_checkpoint(path, model, "abc", seed=4, extra={"note": 1})
    loaded, meta = load_checkpoint(path)
    assert meta["seed"] == 4 and meta["vocab_digest"] == "abc" and meta["config"]["d_model"] == 16
    for (k, v), (k2, v2) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert k == k2 and v.dtype == v2.dtype and torch.equal(v, v2)
    assert [p.name for p in path.parent.iterdir()] == ["m.npz"]
    p = _prompts(np.random.default_rng(0), 2, 1)[0]
    assert np.array_equal(forward(model, p).logits, forward(loaded, p).logits)


def test_checkpoint_bytes_deterministic(tmp_path):
    save_checkpoint(tmp_path / "a.npz", build_model(TINY, seed=2), "d", 2)
    save_checkpoint(tmp_path / "b.npz", build_model(TINY, seed=2), "d", 2)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_build_model_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(1)
    torch.manual_seed(0)
    build_model(TINY, seed=9)
    assert torch.equal(torch.rand(1), expected)


def test_presets():
    cfg = ModelConfig.preset("paper-drug", num_drugs=10, num_cells=3)
    assert (cfg.d_model, cfg.n_layers, cfg.n_heads) == (256, 12, 4)
    cell = ModelConfig.preset("paper-cell", num_drugs=10, num_cells=3)
    assert cell.n_layers == 6


def _bce_scalar(logit, y):
    p = 1.0 / (1.0 + math.exp(-logit))
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def test_synergy_loss_matches_scalar_reference():
    rng = np.random.default_rng(4)
    for _ in range(20):
        b, k = int(rng.integers(1, 5)), int(rng.integers(1, 8))
        logits = rng.normal(scale=3, size=(b, k))
        labels = rng.integers(0, 2, size=(b, k))
        ref = np.mean([np.mean([_bce_scalar(logits[i, j], labels[i, j]) for j in range(k)]) for i in range(b)])
        got = loss_synergy(torch.tensor(logits), torch.tensor(labels, dtype=torch.float64))
        assert got.item() == pytest.approx(ref, abs=1e-12)


def test_synergy_loss_saturates_to_zero():
    y = torch.tensor([[1.0, 0.0, 1.0]], dtype=torch.float64)
    assert loss_synergy(60 * (2 * y - 1), y).item() < 1e-20


def test_contrastive_limits_and_ordering():
    eye = torch.eye(2, dtype=torch.float64)
    assert loss_retrieval(eye, eye, math.log(1e4)).item() < 1e-12
    matched = loss_retrieval(eye, eye, 1.0).item()
    swapped = loss_retrieval(eye.flip(0), eye, 1.0).item()
    assert swapped > matched


def test_zero_context_single_logit():
    model = _tiny_model()
    out = forward(model, mask_and_assemble([], T(0, 1, 2, 1), 0, query_label=False))
    assert out.logits.shape == (1,)
    assert list(out.retrieval_vecs) == [0]


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        ModelConfig(4, 2, d_model=10, n_heads=4)


def test_packed_scoring_matches_one_prompt_at_a_time():
    model = _tiny_model(3)
    rng = np.random.default_rng(3)
    shared = [T(0, 5, 1, 1), T(7, 0, 2, 0), T(0, 9, 3, 1)]
    prompts = [mask_and_assemble(shared, T(0, int(rng.integers(1, 12)), int(rng.integers(4)), 0), 0) for _ in range(7)]
    prompts += _prompts(rng, 4, 5) + _prompts(rng, 0, 6) + _prompts(rng, 2, 3)
    order = rng.permutation(len(prompts))
    prompts = [prompts[i] for i in order]
    alone = np.array([forward(model, p).logits[-1] for p in prompts])
    np.testing.assert_allclose(query_logits(model, prompts), alone, rtol=0, atol=1e-12)
    np.testing.assert_allclose(query_logits(model, prompts, max_pack=2, batch_tokens=20), alone, rtol=0, atol=1e-12)


def test_packed_positions_beyond_context_limit_rejected():
    model = _tiny_model()
    with pytest.raises(InputError):
        model.hidden(torch.zeros(1, 2, dtype=torch.long), torch.tensor([[0, TINY.max_len]]))
