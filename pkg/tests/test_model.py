import numpy as np
import pytest
import torch
from numpy.lib.stride_tricks import sliding_window_view

from flythrough.diffusion.model import (
    CHANNEL_MULTS,
    TEMB_DIM,
    DenoiserModel,
    cfg_epsilon,
    create_model,
    default_arch,
    denoiser_apply,
)
from flythrough.rng import stream


def small_arch(resolution=8, t_steps=50):
    return default_arch(resolution, t_steps, 1e-6, 0.01)


def randomize(model: DenoiserModel, seed: int = 0, scale: float = 0.15):
    torch.manual_seed(seed)
    with torch.no_grad():
        for p in model.net.parameters():
            p.normal_(0.0, scale)
    return model


# --- straight-line reference evaluation (independent of torch ops) ---

def _conv2d(x, w, b, stride=1, pad=1):
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (w.shape[2], w.shape[3]), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    return np.einsum("cijkl,ockl->oij", win, w) + b[:, None, None]


def _groupnorm(x, weight, bias, groups=8, eps=1e-5):
    c = x.shape[0]
    g = x.reshape(groups, c // groups, *x.shape[1:])
    mean = g.mean(axis=(1, 2, 3), keepdims=True)
    var = g.var(axis=(1, 2, 3), keepdims=True)
    g = (g - mean) / np.sqrt(var + eps)
    return g.reshape(x.shape) * weight[:, None, None] + bias[:, None, None]


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _linear(x, w, b):
    return x @ w.T + b


def _film_block(x, temb, sd, p):
    h = _conv2d(_silu(_groupnorm(x, sd[f"{p}.norm1.weight"], sd[f"{p}.norm1.bias"])),
                sd[f"{p}.conv1.weight"], sd[f"{p}.conv1.bias"])
    fs = _linear(temb, sd[f"{p}.film.weight"], sd[f"{p}.film.bias"])
    cout = h.shape[0]
    scale, shift = fs[:cout], fs[cout:]
    h = (_groupnorm(h, sd[f"{p}.norm2.weight"], sd[f"{p}.norm2.bias"])
         * (1.0 + scale)[:, None, None] + shift[:, None, None])
    h = _conv2d(_silu(h), sd[f"{p}.conv2.weight"], sd[f"{p}.conv2.bias"])
    if f"{p}.skip.weight" in sd:
        x = _conv2d(x, sd[f"{p}.skip.weight"], sd[f"{p}.skip.bias"], pad=0)
    return h + x


def reference_forward(model: DenoiserModel, x, m, y, t: int):
    """Layer-by-layer float64 evaluation of the network from its tensors."""
    sd = {k: v.detach().numpy().astype(np.float64)
          for k, v in model.net.state_dict().items()}
    half = TEMB_DIM // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    emb = np.concatenate([np.sin(t * freqs), np.cos(t * freqs)])
    temb = _linear(emb, sd["time_mlp.0.weight"], sd["time_mlp.0.bias"])
    temb = _linear(_silu(temb), sd["time_mlp.2.weight"], sd["time_mlp.2.bias"])

    stack = np.concatenate([np.moveaxis(x, 2, 0), m[None],
                            np.moveaxis(y, 2, 0)]).astype(np.float64)
    h = _conv2d(stack, sd["stem.weight"], sd["stem.bias"])
    skips = []
    n = len(CHANNEL_MULTS)
    for i in range(n):
        h = _film_block(h, temb, sd, f"enc_blocks.{i}")
        skips.append(h)
        if i < n - 1:
            h = _conv2d(h, sd[f"downs.{i}.weight"], sd[f"downs.{i}.bias"], stride=2)
    h = _film_block(h, temb, sd, "mid")
    for j in range(n):
        skip = skips[n - 1 - j]
        if h.shape[-1] != skip.shape[-1]:
            h = np.repeat(np.repeat(h, 2, axis=1), 2, axis=2)
        h = _film_block(np.concatenate([h, skip], axis=0), temb, sd,
                        f"dec_blocks.{j}")
    h = _silu(_groupnorm(h, sd["out_norm.weight"], sd["out_norm.bias"]))
    out = _conv2d(h, sd["out_conv.weight"], sd["out_conv.bias"])
    return np.moveaxis(out, 0, 2)


@pytest.fixture(scope="module")
def tiny_model():
    return randomize(create_model(small_arch(), seed=3), seed=11)


@pytest.fixture(scope="module")
def tiny_inputs():
    r = stream(0, "model-inputs")
    x = r.standard_normal((8, 8, 4), dtype=np.float32)
    m = (r.random((8, 8)) < 0.4).astype(np.float32)
    y = r.standard_normal((8, 8, 4), dtype=np.float32)
    return x, m, y


class TestDenoiserApply:
    def test_zero_parameters_zero_output(self, tiny_inputs):
        model = create_model(small_arch(), seed=0)
        with torch.no_grad():
            for p in model.net.parameters():
                p.zero_()
        out = denoiser_apply(model, *tiny_inputs, t=7)
        assert (out == 0.0).all()

    def test_deterministic(self, tiny_model, tiny_inputs):
        a = denoiser_apply(tiny_model, *tiny_inputs, t=13)
        b = denoiser_apply(tiny_model, *tiny_inputs, t=13)
        assert np.array_equal(a, b)

    def test_matches_reference_evaluation(self, tiny_model, tiny_inputs):
        x, m, y = tiny_inputs
        got = denoiser_apply(tiny_model, x, m, y, t=13)
        want = reference_forward(tiny_model, x, m, y, t=13)
        assert got.shape == want.shape == (8, 8, 4)
        assert np.abs(got - want).max() < 1e-5

    def test_output_shape_tracks_input(self, tiny_model):
        r = stream(1, "shape")
        x = r.standard_normal((16, 16, 4), dtype=np.float32)
        m = np.zeros((16, 16), dtype=np.float32)
        y = r.standard_normal((16, 16, 4), dtype=np.float32)
        assert denoiser_apply(tiny_model, x, m, y, t=1).shape == (16, 16, 4)

    def test_shape_mismatch_rejected(self, tiny_model, tiny_inputs):
        x, m, y = tiny_inputs
        with pytest.raises(ValueError):
            denoiser_apply(tiny_model, x, m[:4], y, t=1)

    def test_t_out_of_range(self, tiny_model, tiny_inputs):
        with pytest.raises(ValueError):
            denoiser_apply(tiny_model, *tiny_inputs, t=0)
        with pytest.raises(ValueError):
            denoiser_apply(tiny_model, *tiny_inputs, t=51)

    def test_ema_branch_differs_after_randomize(self, tiny_inputs):
        model = randomize(create_model(small_arch(), seed=3), seed=11)
        a = denoiser_apply(model, *tiny_inputs, t=5, use_ema=False)
        b = denoiser_apply(model, *tiny_inputs, t=5, use_ema=True)
        assert not np.array_equal(a, b)  # EMA still holds the init weights


class TestEma:
    def test_decay_zero_tracks_parameters(self, tiny_inputs):
        model = randomize(create_model(small_arch(), seed=3), seed=4)
        model.update_ema(0.0)
        a = denoiser_apply(model, *tiny_inputs, t=5, use_ema=False)
        b = denoiser_apply(model, *tiny_inputs, t=5, use_ema=True)
        assert np.array_equal(a, b)

    def test_update_rule(self):
        model = create_model(small_arch(), seed=1)
        p = next(model.net.parameters())
        e0 = next(model.ema_net.parameters()).detach().clone()
        with torch.no_grad():
            p.add_(1.0)
        model.update_ema(0.9)
        e1 = next(model.ema_net.parameters()).detach()
        assert torch.allclose(e1, 0.9 * e0 + 0.1 * p.detach(), atol=1e-7)


class TestCfgEpsilon:
    def test_w_zero_bitwise(self, rng):
        c = rng.standard_normal((4, 4, 4), dtype=np.float32)
        u = rng.standard_normal((4, 4, 4), dtype=np.float32)
        assert np.array_equal(cfg_epsilon(c, u, 0.0), c)

    def test_equal_inputs_fixed_point(self, rng):
        c = rng.standard_normal((4, 4, 4), dtype=np.float32)
        for w in (0.0, 0.5, 2.0, 7.0):
            assert np.allclose(cfg_epsilon(c, c, w), c, atol=1e-5)

    def test_arithmetic(self):
        one = np.ones((2, 2), dtype=np.float32)
        assert np.array_equal(cfg_epsilon(one, 0 * one, 2.0), 3 * one)

    def test_affine_in_w(self, rng):
        c = rng.standard_normal((3, 3), dtype=np.float32)
        u = rng.standard_normal((3, 3), dtype=np.float32)
        e1 = cfg_epsilon(c, u, 1.0)
        e2 = cfg_epsilon(c, u, 2.0)
        e3 = cfg_epsilon(c, u, 3.0)
        assert np.allclose(e3 - e2, e2 - e1, atol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cfg_epsilon(np.zeros((2, 2)), np.zeros((3, 3)), 1.0)
