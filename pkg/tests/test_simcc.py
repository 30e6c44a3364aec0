import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrpvt.config import SimCCConfig
from hrpvt.optim import Adam
from hrpvt.simcc import (
    LossStats, PoseInstance, SimCCHead, center_bin, decode_axis, decode_coords, encode_axis, encode_targets,
    head_forward, quantization_sweep, simcc_loss,
)
from hrpvt.tensor import Tensor


@pytest.fixture
def full_simcc():
    return SimCCConfig(k=4.0, sigma=6.0, input_w=192, input_h=256, num_keypoints=17)


def test_embedding_length_and_logit_sizes(rng, full_simcc):
    head = SimCCHead(8 * 6, full_simcc, rng)
    xl, yl = head_forward(Tensor(rng.standard_normal((2, 17, 8, 6))), head)
    assert head.embed_len == 48
    assert xl.shape == (2, 17, 768) and yl.shape == (2, 17, 1024)


def test_head_shares_weights_across_keypoints(rng, full_simcc):
    head = SimCCHead(48, full_simcc, rng)
    e = rng.standard_normal((1, 1, 8, 6))
    f4 = np.repeat(e, 17, axis=1)
    xl, _ = head(Tensor(f4))
    assert np.array_equal(xl.data[0, 0], xl.data[0, 16])
    assert head.fc_x.weight.shape == (48, 768)


def test_head_rejects_mismatched_input(rng, full_simcc):
    head = SimCCHead(48, full_simcc, rng)
    with pytest.raises(ValueError, match="keypoints"):
        head(Tensor(np.zeros((1, 16, 8, 6))))
    with pytest.raises(ValueError, match="embedding"):
        head(Tensor(np.zeros((1, 17, 4, 6))))


def test_zero_head_decodes_to_origin(rng, full_simcc):
    head = SimCCHead(48, full_simcc, rng)
    for lin in (head.fc_x, head.fc_y):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0
    xl, yl = head(Tensor(np.zeros((1, 17, 8, 6))))
    coords, conf = decode_coords(xl.data, yl.data, full_simcc)
    assert np.array_equal(coords, np.zeros((1, 17, 2)))
    assert np.allclose(conf, 0.5 * (1 / 768 + 1 / 1024))


def test_center_bin_example():
    assert center_bin(7.25, 4.0) == 29


def test_encode_normalised_and_peaked():
    t = encode_axis(7.25, 256, 4.0, 6.0)
    assert abs(t.sum() - 1.0) < 1e-12
    assert int(np.argmax(t)) == 29
    j = np.arange(256)
    ref = np.exp(-((j - 29) ** 2) / 72.0)
    assert np.allclose(t, ref / ref.sum())


def test_encode_one_hot():
    t = encode_axis(7.25, 256, 4.0, 6.0, one_hot=True)
    assert t[29] == 1.0 and t.sum() == 1.0


def test_encode_targets_masks_invisible(full_simcc):
    coords = np.tile([[10.0, 20.0]], (17, 1))
    vis = np.full(17, 2)
    vis[3] = 0
    coords[3] = [-50.0, 900.0]  # ignored because unlabelled
    tx, ty, mask = encode_targets(PoseInstance(coords, vis), full_simcc)
    assert mask[3] == 0 and mask.sum() == 16
    assert tx[3].sum() == 0 and np.allclose(tx[0].sum(), 1.0) and np.allclose(ty[0].sum(), 1.0)


def test_encode_out_of_range_names_keypoint(full_simcc):
    coords = np.full((17, 2), 5.0)
    coords[11] = [192.0, 5.0]
    with pytest.raises(ValueError, match="keypoint 11"):
        encode_targets(PoseInstance(coords, np.full(17, 1)), full_simcc)


def test_decode_example():
    logits = np.zeros(256)
    logits[29] = 3.0
    x, conf = decode_axis(logits, 4.0)
    assert x == 7.25
    p = np.exp(logits - 3.0)
    assert abs(conf - 1.0 / p.sum()) < 1e-12


def test_decode_ties_take_lowest_index():
    logits = np.zeros(10)
    logits[[3, 7]] = 1.0
    assert decode_axis(logits, 1.0)[0] == 3.0


@given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0), st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_decode_invariant_to_affine_logits(a, b, seed):
    logits = np.random.default_rng(seed).standard_normal((3, 40))
    assert np.array_equal(decode_axis(logits, 2.0)[0], decode_axis(a * logits + b, 2.0)[0])


@pytest.mark.parametrize("k", [2.0, 4.0, 6.0])
def test_roundtrip_bound(k):
    row = quantization_sweep(k, extent=48, step=0.01)
    assert row["max_err"] <= 1.0 / (2.0 * k) + 1e-9
    # the clamped tail past the last bin centre is still within one bin
    assert row["max_err_full_range"] <= 1.0 / k + 1e-9


@given(st.integers(0, 4799), st.sampled_from([2.0, 4.0, 6.0]))
@settings(max_examples=200, deadline=None)
def test_roundtrip_pointwise(m, k):
    x = m / 100.0
    if x > 48 - 1 / (2 * k):
        return
    decoded, _ = decode_axis(encode_axis(x, int(48 * k), k, 6.0), k)
    assert abs(decoded - x) <= 1 / (2 * k) + 1e-9


def test_sweep_rejects_fractional_bins():
    with pytest.raises(ValueError):
        quantization_sweep(2.5, extent=7)


def _batch(rng, cfg, n=2):
    gts = [PoseInstance(rng.uniform(0, [cfg.input_w - 1, cfg.input_h - 1], (cfg.num_keypoints, 2)), rng.integers(1, 3, cfg.num_keypoints)) for _ in range(n)]
    return [np.stack(a) for a in zip(*(encode_targets(g, cfg) for g in gts))]


def test_loss_zero_at_target(rng):
    cfg = SimCCConfig(k=2.0, sigma=2.0, input_w=16, input_h=12, num_keypoints=3)
    tx, ty, mask = _batch(rng, cfg)
    loss = simcc_loss(Tensor(np.log(tx)), Tensor(np.log(ty)), tx, ty, mask)
    assert abs(loss.item()) < 1e-6


def test_loss_nonnegative_random(rng):
    cfg = SimCCConfig(k=2.0, sigma=2.0, input_w=16, input_h=12, num_keypoints=3)
    for _ in range(20):
        tx, ty, mask = _batch(rng, cfg)
        loss = simcc_loss(Tensor(rng.standard_normal(tx.shape) * 3), Tensor(rng.standard_normal(ty.shape) * 3), tx, ty, mask)
        assert loss.item() >= 0.0


def test_loss_matches_explicit_kl(rng):
    cfg = SimCCConfig(k=2.0, sigma=2.0, input_w=16, input_h=12, num_keypoints=3)
    tx, ty, mask = _batch(rng, cfg)
    mask[0, 1] = 0
    xl, yl = rng.standard_normal(tx.shape), rng.standard_normal(ty.shape)

    def kl(p, logits):
        q = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
        return sum(pi * np.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)

    total = sum(kl(tx[b, i], xl[b, i]) + kl(ty[b, i], yl[b, i]) for b in range(2) for i in range(3) if mask[b, i])
    expected = total / (2 * mask.sum())
    assert abs(simcc_loss(Tensor(xl), Tensor(yl), tx, ty, mask).item() - expected) < 1e-12


def test_empty_mask_is_zero_with_counter(rng, caplog):
    before = LossStats.empty_batches
    xl = Tensor(rng.standard_normal((1, 2, 8)), requires_grad=True)
    loss = simcc_loss(xl, Tensor(rng.standard_normal((1, 2, 6))), np.zeros((1, 2, 8)), np.zeros((1, 2, 6)), np.zeros((1, 2)))
    assert loss.item() == 0.0
    assert LossStats.empty_batches == before + 1
    loss.backward()
    assert np.array_equal(xl.grad, np.zeros((1, 2, 8)))


def test_one_adam_step_reduces_loss(rng):
    cfg = SimCCConfig(k=2.0, sigma=2.0, input_w=16, input_h=12, num_keypoints=3)
    head = SimCCHead(4, cfg, rng)
    f4 = Tensor(rng.standard_normal((2, 3, 2, 2)))
    tx, ty, mask = _batch(rng, cfg)
    opt = Adam(head.parameters(), lr=5e-4)
    first = simcc_loss(*head(f4), tx, ty, mask)
    first.backward()
    opt.step()
    assert simcc_loss(*head(f4), tx, ty, mask).item() < first.item()


def test_head_loss_gradients():
    from hrpvt.gradsuite import head_cases, run_cases

    results = run_cases(head_cases(), 1e-4)
    assert all(r.passed for r in results), [(r.name, r.error) for r in results if not r.passed]


def test_config_requires_integer_bins():
    assert any("integer" in p for p in SimCCConfig(k=2.5, input_w=7, input_h=8).problems("simcc"))
    assert SimCCConfig(k=4.0, input_w=192, input_h=256).x_bins == 768
