import struct

import numpy as np
import numpy.testing as npt
import pytest

from srmc.checkpoint import (
    FORMAT_VERSION,
    CheckpointError,
    load_checkpoint,
    load_net,
    net_from_descriptor,
    save_checkpoint,
)
from srmc.nets import Poly1D, conv_energy_net, expfam_energy_net
from srmc.training import (
    MetricsWriter,
    TrainConfig,
    init_state,
    train,
    train_step,
)


def small_cfg(**over):
    base = dict(steps=8, batch_size=24, sigma=0.05, k=4, lr=5e-3,
                step_size=0.02, noise_scale=0.1, anneal=False, seed=19)
    base.update(over)
    return TrainConfig(**base)


def toy_data(n=400, seed=3):
    r = np.random.default_rng(seed)
    return (0.8 + 0.4 * r.standard_normal(n)).reshape(-1, 1)


def trained_state(steps=5):
    net = expfam_energy_net(Poly1D(2), theta0=[0.2, -0.7])
    state = init_state(net)
    data = toy_data()
    cfg = small_cfg(steps=steps)
    while state.t < steps:
        train_step(state, data, cfg)
    return state, cfg, data


def test_round_trip_is_bit_exact(tmp_path):
    state, cfg, _ = trained_state()
    path = tmp_path / "a.srmc"
    save_checkpoint(path, state, cfg.seed)
    loaded, seed = load_checkpoint(path)
    assert seed == cfg.seed
    assert loaded.t == state.t
    assert loaded.adam_t == state.adam_t
    assert loaded.net.descriptor() == state.net.descriptor()
    assert loaded.net.temperature == state.net.temperature
    for name, p in state.net.params.items():
        npt.assert_array_equal(loaded.net.params[name].data, p.data)
        npt.assert_array_equal(loaded.adam_m[name], state.adam_m[name])
        npt.assert_array_equal(loaded.adam_v[name], state.adam_v[name])


def test_float32_conv_round_trip(tmp_path):
    net = conv_energy_net(input_size=32, in_channels=1, n_f=4, seed=5,
                          temperature=2e-2, dtype=np.float32)
    state = init_state(net)
    state.adam_m["w0"][...] = 0.125   # exact in both widths
    path = tmp_path / "c.srmc"
    save_checkpoint(path, state, 7)
    loaded, _ = load_checkpoint(path)
    assert loaded.net.dtype == np.float32
    assert loaded.net.temperature == 2e-2
    assert loaded.net.input_shape == net.input_shape
    for name, p in net.params.items():
        assert loaded.net.params[name].data.dtype == np.float32
        npt.assert_array_equal(loaded.net.params[name].data, p.data)
    npt.assert_array_equal(loaded.adam_m["w0"], state.adam_m["w0"])


def test_resume_equals_uninterrupted(tmp_path):
    data = toy_data()
    cfg = small_cfg(steps=10)

    net_a = expfam_energy_net(Poly1D(2), theta0=[0.2, -0.7])
    full = train(init_state(net_a), data, cfg)

    net_b = expfam_energy_net(Poly1D(2), theta0=[0.2, -0.7])
    state = init_state(net_b)
    while state.t < 6:
        train_step(state, data, cfg)
    path = tmp_path / "mid.srmc"
    save_checkpoint(path, state, cfg.seed)
    resumed, seed = load_checkpoint(path)
    train(resumed, data, small_cfg(steps=10, seed=seed))

    npt.assert_array_equal(resumed.net.params["theta"].data,
                           full.net.params["theta"].data)
    for name in full.adam_m:
        npt.assert_array_equal(resumed.adam_m[name], full.adam_m[name])
        npt.assert_array_equal(resumed.adam_v[name], full.adam_v[name])


def test_resumed_metrics_continue_the_csv(tmp_path):
    data = toy_data()
    cfg = small_cfg(steps=6)

    whole = tmp_path / "whole.csv"
    net_a = expfam_energy_net(Poly1D(2), theta0=[0.2, -0.7])
    with MetricsWriter(whole) as w:
        train(init_state(net_a), data, cfg, metrics=w)

    split = tmp_path / "split.csv"
    ckpt = tmp_path / "mid.srmc"
    net_b = expfam_energy_net(Poly1D(2), theta0=[0.2, -0.7])
    state = init_state(net_b)
    with MetricsWriter(split) as w:
        while state.t < 3:
            train_step(state, data, cfg, metrics=w)
    save_checkpoint(ckpt, state, cfg.seed)
    resumed, _ = load_checkpoint(ckpt)
    with MetricsWriter(split, append=True) as w:
        train(resumed, data, cfg, metrics=w)

    assert whole.read_bytes() == split.read_bytes()


def test_identical_state_identical_bytes(tmp_path):
    state, cfg, _ = trained_state()
    p1, p2 = tmp_path / "x1.srmc", tmp_path / "x2.srmc"
    save_checkpoint(p1, state, cfg.seed)
    save_checkpoint(p2, state, cfg.seed)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_net_evaluates_like_original(tmp_path):
    state, cfg, data = trained_state()
    path = tmp_path / "n.srmc"
    save_checkpoint(path, state, cfg.seed)
    net = load_net(path)
    npt.assert_array_equal(net.f(data[:32]), state.net.f(data[:32]))


def test_corruption_is_detected(tmp_path):
    state, cfg, _ = trained_state()
    path = tmp_path / "bad.srmc"
    save_checkpoint(path, state, cfg.seed)
    raw = bytearray(path.read_bytes())
    raw[30] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(path)


def test_truncation_is_detected(tmp_path):
    state, cfg, _ = trained_state()
    path = tmp_path / "trunc.srmc"
    save_checkpoint(path, state, cfg.seed)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "not.srmc"
    path.write_bytes(b"PNG!" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_newer_version_rejected(tmp_path):
    state, cfg, _ = trained_state()
    path = tmp_path / "new.srmc"
    save_checkpoint(path, state, cfg.seed)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    body = bytes(raw[:-4])
    path.write_bytes(body + struct.pack("<I", __import__("zlib").crc32(body)))
    with pytest.raises(CheckpointError, match="newer"):
        load_checkpoint(path)


def test_unknown_descriptor_rejected():
    with pytest.raises(CheckpointError, match="descriptor"):
        net_from_descriptor("dense:44", 1e-2, np.float64)
