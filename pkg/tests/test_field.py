import math

import numpy as np
import pytest
import torch

from activenerf.field import (EncodingConfig, FieldConfig, RadianceField, field_backward, field_eval, init_params,
                              load_checkpoint, positional_encode, save_checkpoint, variance_activation)
from conftest import tiny_config


def _unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def test_encoding_examples():
    np.testing.assert_allclose(positional_encode(torch.tensor([0.0], dtype=torch.float64), 2).numpy(),
                               [0, 1, 0, 1], atol=1e-15)
    np.testing.assert_allclose(positional_encode(torch.tensor([1.0], dtype=torch.float64), 1).numpy(),
                               [0, -1], atol=1e-15)
    enc = positional_encode(torch.rand(5, 3), 10)
    assert enc.shape == (5, 60)
    assert enc.abs().max() <= 1.0


def test_encoding_layout_and_length():
    p = torch.tensor([[0.3, -0.7]], dtype=torch.float64)
    for L in (1, 3, 7):
        enc = positional_encode(p, L)
        assert enc.shape == (1, 2 * L * 2)
    enc = positional_encode(p, 3).numpy()[0]
    # per scalar: sin/cos pairs at frequencies 1, 2, 4 (times pi)
    x = 0.3
    expect = [f(2 ** k * math.pi * x) for k in range(3) for f in (math.sin, math.cos)]
    np.testing.assert_allclose(enc[:6], expect, atol=1e-15)


def test_variance_activation_examples():
    assert variance_activation(0.0, 0.01) == pytest.approx(0.01 + math.log(2.0), abs=1e-15)
    assert abs(variance_activation(-1000.0, 0.01) - 0.01) < 1e-12
    assert abs(variance_activation(1000.0, 0.01) - 1000.01) < 1e-9
    raw = torch.tensor([-1000.0, 0.0, 1000.0], dtype=torch.float64)
    out = variance_activation(raw, 0.01)
    assert torch.isfinite(out).all()
    with pytest.raises(ValueError):
        variance_activation(0.0, 0.0)


def test_variance_activation_strict_and_monotone():
    raw = np.linspace(-30, 30, 2001)
    v = variance_activation(raw, 0.05)
    assert np.all(v > 0.05)
    assert np.all(np.diff(v) > 0)


def test_init_deterministic_and_seed_dependent():
    cfg = tiny_config()
    a, b, c = init_params(3, cfg), init_params(3, cfg), init_params(4, cfg)
    for (n, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(p, q), n
    assert any(not torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))


def test_fresh_variance_near_softplus_zero():
    cfg = FieldConfig(width=64, beta0_sq=0.01)
    model = init_params(0, cfg, torch.float64)
    rng = np.random.default_rng(0)
    out = field_eval(model, rng.uniform(-1, 1, size=(1000, 3)), _unit(rng, 1000))
    v = out.variance.detach().numpy()
    assert v.min() >= 0.01 and v.max() <= 0.01 + 2 * math.log(2.0)


def test_output_ranges_and_determinism():
    model = init_params(1, tiny_config(width=16), torch.float64)
    rng = np.random.default_rng(1)
    pts, dirs = rng.uniform(-2, 2, size=(200, 3)), _unit(rng, 200)
    o1, o2 = field_eval(model, pts, dirs), field_eval(model, pts, dirs)
    assert (o1.sigma >= 0).all()
    assert (o1.color_mean >= 0).all() and (o1.color_mean <= 1).all()
    assert (o1.variance >= model.config.beta0_sq).all()
    assert torch.equal(o1.sigma, o2.sigma) and torch.equal(o1.color_mean, o2.color_mean)


def test_batch_independence():
    model = init_params(2, tiny_config(width=16), torch.float64)
    rng = np.random.default_rng(2)
    pts, dirs = rng.uniform(-1, 1, size=(50, 3)), _unit(rng, 50)
    batch = field_eval(model, pts, dirs)
    for i in (0, 17, 49):
        one = field_eval(model, pts[i:i + 1], dirs[i:i + 1])
        np.testing.assert_allclose(one.sigma.detach().numpy(), batch.sigma[i:i + 1].detach().numpy(), atol=1e-12)
        np.testing.assert_allclose(one.color_mean.detach().numpy(), batch.color_mean[i:i + 1].detach().numpy(),
                                   atol=1e-12)
        np.testing.assert_allclose(one.variance.detach().numpy(), batch.variance[i:i + 1].detach().numpy(),
                                   atol=1e-12)


def test_non_unit_direction_rejected():
    model = init_params(0, tiny_config())
    with pytest.raises(ValueError):
        field_eval(model, np.zeros((1, 3)), np.array([[1.0, 1.0, 0.0]]))


def test_uncertainty_flag_omits_variance():
    model = init_params(0, tiny_config(), torch.float64)
    out = model(torch.zeros(2, 3, dtype=torch.float64), torch.tensor([[0, 0, 1.0]] * 2, dtype=torch.float64),
                uncertainty=False)
    assert out.variance is None
    coarse = init_params(0, tiny_config(uncertainty=False), torch.float64)
    assert coarse.variance_head is None
    assert field_eval(coarse, np.zeros((1, 3)), [[0, 0, 1.0]]).variance is None


def test_hand_computed_forward():
    cfg = FieldConfig(depth=2, width=1, skip=1, color_width=1, encoding=EncodingConfig(1, 1, 1.0),
                      density_activation="shifted_softplus", beta0_sq=0.01)
    model = RadianceField(cfg).double()
    vals = iter(np.linspace(-0.9, 0.8, 100))
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.tensor([next(vals) for _ in range(p.numel())], dtype=torch.float64).reshape(p.shape))
    W = {n: p.detach().numpy() for n, p in model.named_parameters()}
    x = np.array([0.2, -0.4, 0.7])
    d = np.array([0.6, 0.0, 0.8])

    def enc(v):
        return np.array([f(math.pi * c) for c in v for f in (math.sin, math.cos)])

    ex, ed = enc(x), enc(d)
    relu = lambda z: np.maximum(z, 0.0)  # noqa: E731
    h = relu(W["trunk.0.weight"] @ ex + W["trunk.0.bias"])
    h = relu(W["trunk.1.weight"] @ np.concatenate([h, ex]) + W["trunk.1.bias"])
    raw_s = (W["density_head.weight"] @ h + W["density_head.bias"])[0]
    sigma = math.log1p(math.exp(raw_s - 1.0))
    raw_v = (W["variance_head.weight"] @ h + W["variance_head.bias"])[0]
    var = 0.01 + math.log1p(math.exp(raw_v))
    f = W["feature.weight"] @ h + W["feature.bias"]
    c = relu(W["color_hidden.weight"] @ np.concatenate([f, ed]) + W["color_hidden.bias"])
    rgb = 1.0 / (1.0 + np.exp(-(W["color_out.weight"] @ c + W["color_out.bias"])))

    out = field_eval(model, x[None], d[None])
    assert abs(float(out.sigma[0].detach()) - sigma) < 1e-9
    assert abs(float(out.variance[0].detach()) - var) < 1e-9
    np.testing.assert_allclose(out.color_mean[0].detach().numpy(), rgb, atol=1e-9)


def test_relu_density_option():
    model = init_params(0, tiny_config(density_activation="relu"), torch.float64)
    out = field_eval(model, np.random.default_rng(0).uniform(-1, 1, (100, 3)), [[0, 0, 1.0]] * 100)
    assert (out.sigma >= 0).all()


def test_parameter_groups_cover_everything():
    model = init_params(0, tiny_config())
    groups = model.parameter_groups()
    names = [n for g in groups.values() for n, _ in g]
    assert sorted(names) == sorted(n for n, _ in model.named_parameters())
    assert all(n.startswith("variance_head") for n, _ in groups["theta3"])
    assert {n.split(".")[0] for n, _ in groups["theta1"]} == {"trunk", "density_head"}


def test_backward_zero_upstream_and_missing_paths():
    model = init_params(0, tiny_config(), torch.float64)
    rng = np.random.default_rng(0)
    pts, dirs = rng.uniform(-1, 1, (6, 3)), _unit(rng, 6)
    zero = field_backward(model, pts, dirs, {"sigma": np.zeros(6), "color_mean": np.zeros((6, 3)),
                                             "variance": np.zeros(6)})
    assert all(torch.count_nonzero(g) == 0 for g in zero.values())
    g = field_backward(model, pts, dirs, {"sigma": rng.normal(size=6)})
    for name, _ in model.parameter_groups()["theta2"] + model.parameter_groups()["theta3"]:
        assert torch.count_nonzero(g[name]) == 0, name
    with pytest.raises(ValueError):
        field_backward(model, pts, dirs, {"sigma": np.zeros(5)})


def _fd_check(model, pts, dirs, upstream, h=1e-4):
    grads = field_backward(model, pts, dirs, upstream)
    params = dict(model.named_parameters())

    def objective():
        out = field_eval(model, pts, dirs)
        return sum(float((getattr(out, k) * torch.as_tensor(v)).sum().detach()) for k, v in upstream.items())

    worst = 0.0
    for name, p in params.items():
        flat = p.data.view(-1)
        num = torch.zeros_like(flat)
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + h
            fp = objective()
            flat[i] = old - h
            fm = objective()
            flat[i] = old
            num[i] = (fp - fm) / (2 * h)
        ana = grads[name].view(-1)
        scale = max(float(ana.abs().max()), float(num.abs().max()), 1e-6)
        worst = max(worst, float((ana - num).abs().max()) / scale)
    return worst


def test_backward_matches_finite_differences():
    for seed in range(3):
        model = init_params(seed, tiny_config(width=6), torch.float64)
        rng = np.random.default_rng(seed)
        pts, dirs = rng.uniform(-1, 1, (4, 3)), _unit(rng, 4)
        upstream = {"sigma": rng.normal(size=4), "color_mean": rng.normal(size=(4, 3)),
                    "variance": rng.normal(size=4)}
        assert _fd_check(model, pts, dirs, upstream) < 1e-4


def test_color_independent_of_variance_head():
    model = init_params(0, tiny_config(), torch.float64)
    rng = np.random.default_rng(0)
    pts, dirs = rng.uniform(-1, 1, (20, 3)), _unit(rng, 20)
    before = field_eval(model, pts, dirs)
    with torch.no_grad():
        model.variance_head.weight.normal_()
        model.variance_head.bias.fill_(3.0)
    after = field_eval(model, pts, dirs)
    assert torch.equal(before.color_mean, after.color_mean)
    assert torch.equal(before.sigma, after.sigma)
    assert not torch.equal(before.variance, after.variance)


def test_checkpoint_round_trip(tmp_path):
    a = init_params(0, tiny_config(uncertainty=False))
    b = init_params(1, tiny_config())
    save_checkpoint(tmp_path / "c.ckpt", {"coarse": a, "fine": b}, step=42, extra={"note": 1})
    data = (tmp_path / "c.ckpt").read_bytes()
    assert data[:8] == b"ANRFCKPT"
    ck = load_checkpoint(tmp_path / "c.ckpt")
    assert ck.step == 42 and ck.extra == {"note": 1} and ck.moments is None
    for src, dst in ((a, ck.networks["coarse"]), (b, ck.networks["fine"])):
        assert src.config == dst.config
        for p, q in zip(src.parameters(), dst.parameters()):
            assert torch.equal(p, q)
    (tmp_path / "bad.ckpt").write_bytes(b"garbage!" + bytes(20))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
