"""Reverse-mode autodiff on a tape, checked against finite differences.

Builds a small conv -> relu -> conv -> cross-entropy graph, runs backward once,
then differences every parameter numerically and prints the relative errors.
"""
import numpy as np

from dualmix.autodiff import Tape, Tensor, conv2d, cross_entropy_loss, relu
from dualmix.gradcheck import check_grads

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((3, 6, 6)))
w1 = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True, name="w1")
b1 = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True, name="b1")
w2 = Tensor(rng.standard_normal((5, 4, 1, 1)) * 0.5, requires_grad=True, name="w2")
b2 = Tensor(np.zeros(5), requires_grad=True, name="b2")
labels = rng.integers(0, 5, (6, 6))
labels[0, :2] = 255  # ignored pixels contribute nothing
params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}


def loss():
    return cross_entropy_loss(conv2d(relu(conv2d(x, w1, b1, padding=1)), w2, b2), labels)


with Tape() as tape:
    value = loss()
grads = tape.backward(value, params)
print(f"loss = {value.item():.6f}")
for name, g in grads.items():
    print(f"  d loss / d {name}: shape {g.shape}, norm {np.linalg.norm(g):.4f}")

print("\nrelative error against central differences (step 1e-4, float64):")
for name, err in check_grads(loss, params).items():
    print(f"  {name}: {err:.2e}")
