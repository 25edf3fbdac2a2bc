"""The numpy autodiff core in a few lines.

Operations executed inside a ``Tape`` are recorded; ``gradients`` replays
them backwards. ``grad_check`` compares the tape against central differences.

    python demos/02_autodiff.py
"""

import numpy as np

from timesqueeze import tensor as tn
from timesqueeze.tensor import ParamStore, Tape, Tensor, grad_check

rng = np.random.default_rng(0)
store = ParamStore()
store.add("W", rng.normal(size=(4, 3)) * 0.5)
store.add("gain", np.ones(3))

x = Tensor(rng.normal(size=(5, 4)))
target = rng.normal(size=(5, 3))


def loss_fn(s):
    h = tn.rmsnorm(x @ s["W"], s["gain"])
    return tn.huber_mean(tn.silu(h), target, 1.0)


with Tape() as tape:
    loss = loss_fn(store)
print(f"loss {loss.item():.6f}, tape recorded {len(tape.records)} ops")

grads = tape.gradients(loss)
print("dL/dgain =", np.round(grads[id(store["gain"])], 5))

# nothing is recorded outside a tape
tn.sum(store["W"] * 2.0)
print("records after leaving the tape:", len(tape.records))

err = grad_check(loss_fn, store, n_coords=15)
print(f"max relative error vs central differences: {err:.2e}")
