import struct

import numpy as np
import pytest

from dualmix.autodiff import ShapeError, Tensor, cross_entropy_loss
from dualmix.gradcheck import check_grads, directional_check
from dualmix.segnet import (CheckpointError, ModelParams, forward, init_model, load_checkpoint, param_count,
                            param_shapes, predict_labels, predict_probs, save_checkpoint)


@pytest.fixture(scope="module")
def model():
    return init_model(0, 5)


class TestInit:
    def test_same_seed_bitwise(self):
        a, b = init_model(7, 5), init_model(7, 5)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)

    def test_different_seed_differs(self):
        assert not np.array_equal(init_model(1, 5)["stem1.weight"].data, init_model(2, 5)["stem1.weight"].data)

    def test_shapes_and_biases(self, model):
        assert {k: v.shape for k, v in model.items()} == param_shapes(5)
        for k, v in model.items():
            assert v.dtype == np.float32
            if k.endswith(".bias"):
                assert not v.data.any()

    def test_stem1_std(self, model):
        std = model["stem1.weight"].data.std()
        assert abs(std / np.sqrt(2 / 27) - 1) < 0.15

    def test_param_count_is_fixed(self):
        assert param_count(5) == 32997

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            init_model(0, 1)

    def test_role_tag(self):
        assert init_model(0, 5, "teacher_RL").role == "teacher_RL"
        with pytest.raises(ValueError):
            ModelParams({}, role="critic")


class TestForward:
    def test_output_shape(self, model):
        x = np.random.default_rng(0).random((3, 64, 64), dtype=np.float32)
        assert forward(model, x).shape == (5, 64, 64)
        assert forward(model, np.stack([x, x])).shape == (2, 5, 64, 64)

    def test_wrong_input_rejected(self, model):
        with pytest.raises(ShapeError):
            forward(model, np.zeros((4, 64, 64), np.float32))
        with pytest.raises(ShapeError):
            forward(model, np.zeros((3, 63, 64), np.float32))

    def test_constant_logits_for_zero_weights(self):
        rng = np.random.default_rng(3)
        params = ModelParams({k: Tensor(np.zeros(s, np.float32) if k.endswith("weight")
                                        else rng.standard_normal(s).astype(np.float32), name=k)
                              for k, s in param_shapes(5).items()})
        out = forward(params, np.zeros((3, 64, 64), np.float32)).data
        np.testing.assert_allclose(out, np.broadcast_to(out[:, :1, :1], out.shape), atol=1e-6)
        np.testing.assert_allclose(out[:, 0, 0], params["head.bias"].data, atol=1e-6)

    def test_batch_order_independent(self, model):
        x = np.random.default_rng(1).random((4, 3, 16, 16), dtype=np.float32)
        a = forward(model, x).data
        b = forward(model, x[::-1].copy()).data[::-1]
        np.testing.assert_allclose(a, b, atol=1e-5)
        np.testing.assert_allclose(a[2], forward(model, x[2]).data, atol=1e-5)

    def test_deterministic(self, model):
        x = np.random.default_rng(2).random((3, 64, 64), dtype=np.float32)
        assert forward(model, x).data.tobytes() == forward(model, x).data.tobytes()

    def test_predict_helpers(self, model):
        x = np.random.default_rng(4).random((5, 3, 16, 16), dtype=np.float32)
        p = predict_probs(model, x, batch_size=2)
        np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-5)
        np.testing.assert_array_equal(predict_labels(model, x, batch_size=3), p.argmax(axis=1))


class TestNetworkGradients:
    def test_end_to_end_finite_differences(self):
        rng = np.random.default_rng(5)
        params = init_model(9, 5).astype(np.float64)
        for t in params.values():
            t.data += 0.05 * rng.standard_normal(t.shape)  # nonzero biases
        x = Tensor(rng.random((3, 8, 8)))
        labels = rng.integers(0, 5, (8, 8))
        errs = check_grads(lambda: cross_entropy_loss(forward(params, x), labels), params, max_entries=15, rng=rng)
        assert max(errs.values()) < 1e-4, errs
        errs = directional_check(lambda: cross_entropy_loss(forward(params, x), labels), params, rng)
        assert max(errs.values()) < 1e-4, errs


class TestCheckpoint:
    def test_round_trip_bitwise(self, model, tmp_path):
        path = tmp_path / "m.dmck"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        assert all(back[k].data.tobytes() == model[k].data.tobytes() for k in model)
        save_checkpoint(back, tmp_path / "again.dmck")
        assert path.read_bytes() == (tmp_path / "again.dmck").read_bytes()

    def test_layout(self, model, tmp_path):
        path = tmp_path / "m.dmck"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        assert blob[:4] == b"DMCK"
        assert struct.unpack_from("<II", blob, 4) == (1, 12)
        (nlen,) = struct.unpack_from("<H", blob, 12)
        assert blob[14:14 + nlen] == b"stem1.weight"
        expected = 12 + sum(2 + len(k) + 1 + 4 * len(s) for k, s in param_shapes(5).items()) + 4 * param_count(5)
        assert len(blob) == expected

    def test_bad_magic(self, model, tmp_path):
        path = tmp_path / "m.dmck"
        save_checkpoint(model, path)
        path.write_bytes(b"NOPE" + path.read_bytes()[4:])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self, model, tmp_path):
        path = tmp_path / "m.dmck"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_shape_rejected(self, tmp_path):
        params = init_model(0, 5)
        params["stem1.weight"] = Tensor(np.zeros((8, 3, 3, 3), np.float32), name="stem1.weight")
        save_checkpoint(params, tmp_path / "bad.dmck")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.dmck")

    def test_missing_tensor_rejected(self, tmp_path):
        params = init_model(0, 5)
        del params["head.bias"]
        save_checkpoint(params, tmp_path / "bad.dmck")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.dmck")
