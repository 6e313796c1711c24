import numpy as np
import pytest

from fervgg.errors import CheckpointError, ShapeError, StateError
from fervgg.model import (SCALED_CONFIG, VggConfig, build, decode_checkpoint, encode_checkpoint,
                          load_checkpoint, save_checkpoint)
from fervgg.nn import BatchNorm2d, Conv2d, Linear, softmax_cross_entropy
from fervgg.tensor import SeededRng

from oracles import max_rel_error

TINY = dict(stage_widths=(2, 2, 2, 2), fc_widths=(8, 8))


def _expected_count(widths, fcs, n_classes=7, spatial=2):
    # conv (weight + bias) and BN (gamma + beta) per block, then three FC layers
    total, in_ch = 0, 1
    for w in widths:
        for _ in range(2):
            total += w * in_ch * 9 + w + 2 * w
            in_ch = w
    dims = [widths[-1] * spatial * spatial, *fcs, n_classes]
    for a, b in zip(dims, dims[1:]):
        total += a * b + b
    return total


def test_default_parameter_count_is_frozen():
    model = build(VggConfig(), SeededRng(0))
    assert model.parameter_count() == 17_283_271
    assert _expected_count((64, 128, 256, 512), (4096, 1024)) == 17_283_271


def test_scaled_parameter_count():
    model = build(VggConfig(**SCALED_CONFIG), SeededRng(0))
    assert model.parameter_count() == 92_703 == _expected_count((8, 16, 32, 64), (64, 32))


def test_layer_inventory():
    model = build(VggConfig(**SCALED_CONFIG), SeededRng(0))
    kinds = [type(layer) for _, layer in model.layers]
    assert kinds.count(Conv2d) == 8
    assert kinds.count(BatchNorm2d) == 8
    assert kinds.count(Linear) == 3
    assert model.layer("fc3").params["weight"].shape == (7, 32)
    assert model.config.flatten_extent == 256
    assert model.layer("fc1").params["weight"].shape == (64, 256)


def test_block_order_switch():
    names = [n for n, _ in build(VggConfig(**SCALED_CONFIG), SeededRng(0)).layers][:3]
    assert names == ["stage1.block1.conv", "stage1.block1.relu", "stage1.block1.bn"]
    alt = build(VggConfig(**SCALED_CONFIG, block_order="conv-bn-relu"), SeededRng(0))
    assert [n for n, _ in alt.layers][:3] == ["stage1.block1.conv", "stage1.block1.bn", "stage1.block1.relu"]


def test_initialization():
    model = build(VggConfig(**SCALED_CONFIG), SeededRng(0))
    again = build(VggConfig(**SCALED_CONFIG), SeededRng(0))
    for name, p in model.params.items():
        assert p.tobytes() == again.params[name].tobytes()
        if name.endswith(("conv.bias", "bn.beta")) or name.startswith("fc") and name.endswith("bias"):
            assert not p.any()
        if name.endswith("bn.gamma"):
            assert np.all(p == 1)
    w = build(VggConfig(), SeededRng(1)).params["stage4.block2.conv.weight"]
    assert abs(w.std() - np.sqrt(2 / (512 * 9))) < 0.01 * np.sqrt(2 / (512 * 9))


def test_forward_shapes_and_eval_determinism():
    model = build(VggConfig(**SCALED_CONFIG), SeededRng(0))
    x = np.random.default_rng(0).random((3, 1, 40, 40)).astype(np.float32)
    a = model.forward(x, "eval")
    assert a.shape == (3, 7)
    assert a.tobytes() == model.forward(x, "eval").tobytes()
    assert model.forward(x[:1], "eval").shape == (1, 7)
    assert model.forward(x, "train", SeededRng(1)).shape == (3, 7)
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 1, 48, 48), np.float32))


def test_backward_requires_forward():
    with pytest.raises(StateError):
        build(VggConfig(**TINY), SeededRng(0)).backward(np.zeros((1, 7)))


def test_zero_logit_grad_and_grad_shapes():
    model = build(VggConfig(**TINY, dtype="float64"), SeededRng(0))
    x = np.random.default_rng(0).random((2, 1, 40, 40))
    logits = model.forward(x, "train", SeededRng(1))
    grads = model.backward(np.zeros_like(logits))
    assert set(grads) == set(model.params)
    for name, g in grads.items():
        assert g.shape == model.params[name].shape
        assert not g.any()


def test_whole_network_gradient_check():
    model = build(VggConfig(**TINY, dtype="float64"), SeededRng(3))
    rng = np.random.default_rng(0)
    x = rng.random((3, 1, 40, 40))
    labels = np.array([0, 3, 6])

    def loss():
        return softmax_cross_entropy(model.forward(x, "train", SeededRng(9)), labels).loss

    res = softmax_cross_entropy(model.forward(x, "train", SeededRng(9)), labels)
    grads = {k: v.copy() for k, v in model.backward(res.logit_grad).items()}
    names = sorted(model.params)
    step, errors = 1e-5, []
    for k in range(20):
        name = names[int(rng.integers(len(names)))]
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + step
        up = loss()
        p[idx] = old - step
        down = loss()
        p[idx] = old
        errors.append(max_rel_error(grads[name][idx], (up - down) / (2 * step), floor=1e-7))
    assert max(errors) <= 1e-4, errors


def test_checkpoint_round_trip(tmp_path):
    model = build(VggConfig(**SCALED_CONFIG), SeededRng(0))
    x = np.random.default_rng(0).random((2, 1, 40, 40)).astype(np.float32)
    model.forward(x, "train", SeededRng(1))  # move running stats off their defaults
    extras = {"epoch": 4, "best_val_acc": 0.5, "optimizer": {"v": {"fc1.bias": np.arange(3.0)}}}
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, extras)
    loaded, got = load_checkpoint(path)
    assert loaded.forward(x, "eval").tobytes() == model.forward(x, "eval").tobytes()
    for name in model.params:
        assert loaded.params[name].tobytes() == model.params[name].tobytes()
    for name in model.buffers:
        assert loaded.buffers[name].tobytes() == model.buffers[name].tobytes()
    assert got["epoch"] == 4 and got["best_val_acc"] == 0.5
    np.testing.assert_array_equal(got["optimizer"]["v"]["fc1.bias"], np.arange(3.0))
    assert list(tmp_path.iterdir()) == [path]


def test_checkpoint_header_layout():
    data = encode_checkpoint(build(VggConfig(**TINY), SeededRng(0)))
    assert data[:4] == b"FERC"
    assert int.from_bytes(data[4:8], "little") == 1
    assert data.endswith(b"END\0")


def test_checkpoint_corrupt_magic(tmp_path):
    data = bytearray(encode_checkpoint(build(VggConfig(**TINY), SeededRng(0))))
    data[0:4] = b"XXXX"
    path = tmp_path / "bad.ckpt"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_checkpoint_version_and_truncation():
    data = encode_checkpoint(build(VggConfig(**TINY), SeededRng(0)))
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(data[:4] + (2).to_bytes(4, "little") + data[8:])
    for cut in (10, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:cut])


def test_checkpoint_mismatched_config_names_parameter(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build(VggConfig(**SCALED_CONFIG), SeededRng(0)), path)
    other = VggConfig(stage_widths=(8, 16, 32, 64), fc_widths=(64, 16))
    with pytest.raises(CheckpointError, match="fc2.weight"):
        load_checkpoint(path, other)
