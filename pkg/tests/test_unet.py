import numpy as np
import pytest

from lungseg.autograd import Tape, Tensor, grad_check, weighted_sum
from lungseg.errors import ConfigError, FormatError, ShapeError
from lungseg.unet import (
    UNetConfig,
    build_unet,
    count_params,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
    unet_forward,
)


def counted_params(in_ch, out_ch, depth, base):
    """Closed-form layer count, written out separately from param_shapes."""
    def conv(cin, cout, k=3):
        return cout * cin * k * k + cout

    total = 0
    prev = in_ch
    for i in range(depth):
        c = base * 2 ** i
        total += conv(prev, c) + conv(c, c)
        prev = c
    bott = base * 2 ** depth
    total += conv(prev, bott) + conv(bott, bott)
    below = bott
    for i in reversed(range(depth)):
        c = base * 2 ** i
        total += conv(below, c) + conv(2 * c, c) + conv(c, c)
        below = c
    return total + conv(base, out_ch, k=1)


def test_param_count_matches_closed_form():
    cfg = UNetConfig(depth=3, base_channels=8, input_size=64)
    assert count_params(build_unet(cfg, seed=0)) == counted_params(1, 1, 3, 8)
    # per level: enc 664 + 3488 + 13888, bott 55424, dec 46176 + 11568 + 2904, head 9
    assert counted_params(1, 1, 3, 8) == 134_121


def test_full_scale_profile_count():
    shapes = param_shapes(UNetConfig.paper())
    assert sum(int(np.prod(s)) for s in shapes.values()) == counted_params(1, 1, 4, 64)


def test_names_sorted_and_exact():
    cfg = UNetConfig(depth=2, base_channels=4, input_size=16)
    params = build_unet(cfg, seed=1)
    assert list(params) == sorted(params)
    assert set(params) == set(param_shapes(cfg))
    assert "enc0.conv1.w" in params and "head.b" in params


def test_same_seed_bit_identical():
    cfg = UNetConfig.desk()
    a, b = build_unet(cfg, seed=5), build_unet(cfg, seed=5)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)
    c = build_unet(cfg, seed=6)
    assert any(a[k].data.tobytes() != c[k].data.tobytes() for k in a)


def test_he_init_statistics():
    params = build_unet(UNetConfig(depth=4, base_channels=64, input_size=512), seed=0)
    w = params["dec0.conv1.w"].data
    assert w.std() == pytest.approx(np.sqrt(2 / (128 * 9)), rel=0.02)
    assert not params["dec0.conv1.b"].data.any()


@pytest.mark.parametrize("kwargs", [
    dict(input_size=100, depth=3),
    dict(depth=0),
    dict(base_channels=-2),
])
def test_config_errors(kwargs):
    with pytest.raises(ConfigError):
        UNetConfig(**kwargs)


def test_forward_shape_and_range():
    params = build_unet(UNetConfig.desk(), seed=0)
    x = np.random.default_rng(0).random((1, 1, 64, 64), dtype=np.float32)
    out = unet_forward(params, Tensor(x)).data
    assert out.shape == (1, 1, 64, 64)
    assert (out > 0).all() and (out < 1).all()


def test_forward_indivisible():
    params = build_unet(UNetConfig.desk(), seed=0)
    with pytest.raises(ShapeError):
        unet_forward(params, Tensor(np.zeros((1, 1, 50, 50), dtype=np.float32)))


def test_skip_channel_bookkeeping():
    cfg = UNetConfig(depth=3, base_channels=4, input_size=32)
    taps = {}
    unet_forward(build_unet(cfg, seed=0), Tensor(np.zeros((2, 1, 32, 32), dtype=np.float32)), taps=taps)
    for i in range(3):
        assert taps[f"dec{i}.cat"].shape == (2, 2 * 4 * 2 ** i, 32 // 2 ** i, 32 // 2 ** i)


def test_depth1_unet_grad_check():
    cfg = UNetConfig(depth=1, base_channels=2, input_size=8)
    rng = np.random.default_rng(0)
    params = {k: Tensor(v.data.astype(np.float64)) for k, v in build_unet(cfg, seed=3).items()}
    for k in params:
        if k.endswith(".b"):
            params[k] = Tensor(rng.normal(0, 0.1, params[k].shape))
    x = rng.standard_normal((1, 1, 8, 8))
    r = rng.standard_normal((1, 1, 8, 8))

    def f_input(t):
        return weighted_sum(unet_forward(params, t), r)

    assert grad_check(f_input, x) < 1e-4
    for name in params:
        def f_param(t, name=name):
            return weighted_sum(unet_forward({**params, name: t}, Tensor(x)), r)

        assert grad_check(f_param, params[name].data) < 1e-4, name


def test_checkpoint_round_trip(tmp_path):
    cfg = UNetConfig(depth=3, base_channels=4, input_size=32)
    params = build_unet(cfg, seed=2)
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, cfg, path)
    loaded, cfg2 = load_checkpoint(path)
    assert cfg2 == cfg and cfg2.depth == 3
    assert all(loaded[k].data.tobytes() == params[k].data.tobytes() for k in params)
    x = Tensor(np.random.default_rng(0).random((1, 1, 32, 32), dtype=np.float32))
    assert unet_forward(params, x).data.tobytes() == unet_forward(loaded, x).data.tobytes()


def test_checkpoint_header_layout(tmp_path):
    cfg = UNetConfig(depth=1, base_channels=2, input_size=8)
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_unet(cfg, seed=0), cfg, path)
    raw = path.read_bytes()
    assert raw[:4] == b"LSEG"
    assert np.frombuffer(raw[4:32], dtype="<u4").tolist() == [1, 1, 1, 1, 2, 8, len(param_shapes(cfg))]


def test_checkpoint_corruption(tmp_path):
    cfg = UNetConfig(depth=1, base_channels=2, input_size=8)
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_unet(cfg, seed=0), cfg, path)
    raw = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XSEG" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-7])
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    bad.write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    # header claims depth 2: stored names no longer match the configuration
    bad.write_bytes(raw[:16] + (2).to_bytes(4, "little") + raw[20:])
    with pytest.raises(FormatError):
        load_checkpoint(bad)


def test_checkpoint_float64_params_stored_as_float32(tmp_path):
    cfg = UNetConfig(depth=1, base_channels=2, input_size=8)
    params = build_unet(cfg, seed=0, dtype=np.float64)
    save_checkpoint(params, cfg, tmp_path / "m.ckpt")
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    for k in params:
        np.testing.assert_array_equal(loaded[k].data, params[k].data.astype(np.float32))


def test_tracked_forward_gives_param_grads():
    cfg = UNetConfig(depth=2, base_channels=2, input_size=16)
    params = build_unet(cfg, seed=0)
    tape = Tape()
    tracked = {k: tape.watch(v) for k, v in params.items()}
    out = unet_forward(tracked, Tensor(np.ones((1, 1, 16, 16), dtype=np.float32)))
    tape.backward(weighted_sum(out, np.ones(out.shape)))
    assert all(tape.grad(t) is not None for t in tracked.values())
