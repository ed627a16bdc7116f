import numpy as np
import pytest
import torch

from bridgesynth.model import DenoiserSpec, count_parameters, init_model, predict_noise
from bridgesynth.schedule import build_schedule
from bridgesynth.stylekey import compute_style_key
from bridgesynth.trainer import bridge_loss
from bridgesynth.volume import extract_subvolume


def tiny_spec(**kw):
    base = dict(image_size=16, base_channels=8, channel_multipliers=(1, 2), res_blocks_per_level=1,
                attention_resolutions=(8,), attention_heads=2, style_hidden=16)
    base.update(kw)
    return DenoiserSpec(**base)


def test_full_scale_spec():
    spec = DenoiserSpec.full_scale()
    assert (spec.in_channels, spec.out_channels) == (6, 3)
    assert spec.image_size == 256 and spec.base_channels == 128
    assert spec.channel_multipliers == (1, 4, 8)
    assert spec.res_blocks_per_level == 2
    assert set(spec.attention_resolutions) == {32, 16, 8}
    assert spec.attention_heads == 8
    assert spec.N == 1
    spec.validate()


@pytest.mark.parametrize(
    "kw",
    [dict(in_channels=5), dict(channel_multipliers=()), dict(image_size=18, channel_multipliers=(1, 2, 4)),
     dict(in_channels=4, out_channels=2)],
)
def test_invalid_specs(kw):
    with pytest.raises(ValueError):
        init_model(tiny_spec(**kw))


def test_same_seed_identical_parameters():
    a, b = init_model(tiny_spec(), seed=3), init_model(tiny_spec(), seed=3)
    for pa, pb in zip(a.net.parameters(), b.net.parameters()):
        assert torch.equal(pa, pb)
    c = init_model(tiny_spec(), seed=4)
    assert any(not torch.equal(pa, pc) for pa, pc in zip(a.net.parameters(), c.net.parameters()))
    assert a.num_parameters == count_parameters(a.net) > 0


def test_desk_forward_shape_and_determinism():
    d = init_model(DenoiserSpec(), seed=0)
    rng = np.random.default_rng(0)
    x, y = rng.random((2, 5, 64, 64))
    key = compute_style_key(y)
    xs, ys = extract_subvolume(x, 2, 1), extract_subvolume(y, 2, 1)
    out = predict_noise(d, xs, ys, key, 500, T=1000)
    assert out.shape == (3, 64, 64)
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, predict_noise(d, xs, ys, key, 500, T=1000))


def test_predict_noise_errors():
    d = init_model(tiny_spec(), seed=0)
    rng = np.random.default_rng(1)
    x = rng.random((3, 3, 16, 16))
    key = compute_style_key(x[0])
    with pytest.raises(ValueError):
        predict_noise(d, x[0], x[1][:, :8], key, 5)
    with pytest.raises(ValueError):
        predict_noise(d, x[0], x[1], key, 0)
    with pytest.raises(ValueError):
        predict_noise(d, x[0], x[1], key, 11, T=10)
    with pytest.raises(ValueError):
        predict_noise(d, extract_subvolume(x[0], 0, 1), extract_subvolume(x[1], 1, 1), key, 5)


def test_style_key_changes_output():
    d = init_model(tiny_spec(), seed=0)
    rng = np.random.default_rng(2)
    x, y = rng.random((2, 3, 16, 16))
    k1 = compute_style_key(rng.random((2, 8, 8)) * 0.5)
    k2 = compute_style_key(rng.random((2, 8, 8)) * 0.5 + 0.5)
    assert not np.allclose(predict_noise(d, x, y, k1, 5), predict_noise(d, x, y, k2, 5))


def test_gradient_matches_finite_differences():
    spec = tiny_spec()
    d = init_model(spec, seed=0, dtype=torch.float64)
    net = d.net
    sched = build_schedule(1000, 1.0)
    rng = np.random.default_rng(0)
    x0, y = rng.random((2, 2, 3, 16, 16))
    style = np.stack([compute_style_key(y[0]).flat()] * 2)
    t = np.array([250, 700])
    eps = rng.standard_normal(x0.shape)
    net.zero_grad()
    bridge_loss(net, x0, y, style, t, eps, sched).backward()
    params = [p for p in net.parameters()]
    checked = 0
    h = 1e-6
    prng = np.random.default_rng(1)
    while checked < 12:
        p = params[prng.integers(len(params))]
        idx = tuple(int(prng.integers(n)) for n in p.shape)
        g = p.grad[idx].item()
        if abs(g) < 1e-7:
            continue
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            lp = bridge_loss(net, x0, y, style, t, eps, sched).item()
            p[idx] = orig - h
            lm = bridge_loss(net, x0, y, style, t, eps, sched).item()
            p[idx] = orig
        fd = (lp - lm) / (2 * h)
        assert abs(fd - g) / max(abs(fd), abs(g)) < 1e-3
        checked += 1
