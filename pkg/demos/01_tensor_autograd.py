"""Tour of the tensor core: ops, backprop, gradient checking, checkpoints.

Run:  python demos/01_tensor_autograd.py
"""

import numpy as np

from flowmod import numerics as nm
from flowmod.checkpoint import dump_parameters, parse_parameters
from flowmod.numerics import Parameter, Tensor

rng = np.random.default_rng(0)

print("== forward ops ==")
x = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.4, requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)
h = nm.relu(nm.conv2d(x, w, b, stride=1, pad=1))
print("conv+relu:", x.shape, "->", h.shape)

probs = nm.softmax(Tensor([1.0, 2.0, 3.0]), axis=0)
print("softmax([1,2,3]) =", np.round(probs.data, 4), "sums to", probs.data.sum())

print("\n== reverse-mode gradients ==")
loss = nm.tsum(nm.mul(h, h))
loss.backward()
print("loss =", float(loss.data))
print("grad shapes:", x.grad.shape, w.grad.shape, b.grad.shape)

# Central-difference spot check on one weight element.
i = (1, 0, 2, 2)
eps = 1e-5


def loss_at(wdata):
    hh = nm.relu(nm.conv2d(Tensor(x.data), Tensor(wdata), Tensor(b.data), 1, 1))
    return float(nm.tsum(nm.mul(hh, hh)).data)


wp, wm = w.data.copy(), w.data.copy()
wp[i] += eps
wm[i] -= eps
fd = (loss_at(wp) - loss_at(wm)) / (2 * eps)
print(f"dL/dw{i}: analytic={w.grad[i]:.8f}  finite-diff={fd:.8f}  "
      f"rel.err={abs(w.grad[i]-fd)/abs(fd):.2e}")

print("\n== SGD on a quadratic ==")
p = Parameter(Tensor([0.0], requires_grad=True), "w")
for step in range(50):
    diff = nm.add(p.tensor, -3.0)
    nm.tsum(nm.mul(diff, diff)).backward()
    nm.sgd_step([p], lr=0.1)
print("after 50 steps of minimizing (w-3)^2:  w =", float(p.tensor.data[0]))

print("\n== binary checkpoints ==")
params = [Parameter(Tensor(rng.standard_normal((4, 2)), requires_grad=True), "net/a"),
          Parameter(Tensor(rng.standard_normal(7), requires_grad=True), "net/b")]
blob = dump_parameters(params)
print(f"{len(params)} parameters -> {len(blob)} bytes, magic {blob[:4]!r}")
restored = parse_parameters(blob)
print("bit-exact round trip:",
      all(restored[p.name].tobytes() == p.tensor.data.tobytes() for p in params))
