"""Small fully-convolutional segmentation network and its checkpoint format.

Layout: two stem convs (the second with stride 2), a three-branch dilated
block whose outputs are summed, a 1x1 classifier, and x2 bilinear upsampling
back to input resolution.  There is no normalisation anywhere, so a forward
pass never depends on what else is in the batch.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import (ShapeError, Tensor, add, bilinear_upsample, conv2d, relu,
                       softmax)

ROLES = ("teacher_RL", "teacher_SL", "student")
CKPT_MAGIC = b"DMCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def param_shapes(num_classes: int) -> dict[str, tuple[int, ...]]:
    return {
        "stem1.weight": (16, 3, 3, 3), "stem1.bias": (16,),
        "stem2.weight": (32, 16, 3, 3), "stem2.bias": (32,),
        "aspp_d1.weight": (32, 32, 3, 3), "aspp_d1.bias": (32,),
        "aspp_d2.weight": (32, 32, 3, 3), "aspp_d2.bias": (32,),
        "aspp_d4.weight": (32, 32, 3, 3), "aspp_d4.bias": (32,),
        "head.weight": (num_classes, 32, 1, 1), "head.bias": (num_classes,),
    }


def param_count(num_classes: int) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(num_classes).values())


class ModelParams(dict):
    """Name -> Tensor mapping with a role tag."""

    def __init__(self, tensors=(), role: str = "student"):
        super().__init__(tensors)
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        self.role = role

    @property
    def num_classes(self) -> int:
        return self["head.bias"].shape[0]

    def copy(self, role: str | None = None) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.items()},
                           role=role or self.role)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.items()},
                           role=self.role)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def frozen(self) -> "ModelParams":
        """Same arrays, but excluded from gradient recording."""
        return ModelParams({k: Tensor(v.data, requires_grad=False, name=k) for k, v in self.items()},
                           role=self.role)


def init_model(seed: int, num_classes: int, role: str = "student") -> ModelParams:
    """He-normal weights, zero biases."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(num_classes).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            arr = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return ModelParams(tensors, role=role)


def forward(params: ModelParams, image) -> Tensor:
    """Logits with the same spatial size as ``image`` (CxHxW or NxCxHxW)."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim not in (3, 4) or x.shape[-3] != 3:
        raise ShapeError(f"expected 3xHxW or Nx3xHxW input, got {x.shape}")
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"spatial size must be even, got {x.shape[-2:]}")
    p = params
    h = relu(conv2d(x, p["stem1.weight"], p["stem1.bias"], padding=1))
    h = relu(conv2d(h, p["stem2.weight"], p["stem2.bias"], stride=2, padding=1))
    b1 = conv2d(h, p["aspp_d1.weight"], p["aspp_d1.bias"], dilation=1, padding=1)
    b2 = conv2d(h, p["aspp_d2.weight"], p["aspp_d2.bias"], dilation=2, padding=2)
    b4 = conv2d(h, p["aspp_d4.weight"], p["aspp_d4.bias"], dilation=4, padding=4)
    h = relu(add(add(b1, b2), b4))
    logits = conv2d(h, p["head.weight"], p["head.bias"])
    return bilinear_upsample(logits, 2)


def predict_probs(params: ModelParams, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Softmax outputs for an N x 3 x H x W stack, computed without a tape."""
    frozen = params.frozen()
    out = []
    for i in range(0, len(images), batch_size):
        logits = forward(frozen, Tensor(images[i:i + batch_size])).data
        out.append(softmax(logits, axis=1))
    return np.concatenate(out, axis=0)


def predict_labels(params: ModelParams, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    return predict_probs(params, images, batch_size).argmax(axis=1).astype(np.uint8)


# --------------------------------------------------------------------------
# DMCK checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(params))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", t.data.ndim)
        buf += struct.pack(f"<{t.data.ndim}I", *t.shape)
        buf += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path, role: str = "student") -> ModelParams:
    """Read a DMCK file, checking every name and shape against the architecture."""
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", blob, pos)
        pos += 8
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported version {version}")
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            nbytes = 4 * int(np.prod(dims))
            if pos + nbytes > len(blob):
                raise CheckpointError("truncated tensor payload")
            arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
            pos += nbytes
            tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True, name=name)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if "head.bias" not in tensors:
        raise CheckpointError("missing head.bias")
    expected = param_shapes(tensors["head.bias"].shape[0])
    if set(tensors) != set(expected):
        raise CheckpointError(f"tensor names {sorted(tensors)} do not match the architecture")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise CheckpointError(f"{name} has shape {tensors[name].shape}, expected {shape}")
    return ModelParams({k: tensors[k] for k in expected}, role=role)
