"""A tour of the autograd engine: tensors, backward, and gradient checks.

Run from the repository root:

    python3 demos/01_autograd_basics.py
"""

import numpy as np

from lesionforge.rng import RngState
from lesionforge.tensor import Tensor, gradcheck, no_grad


def main() -> None:
    rng = RngState(1)

    # -- forward and backward through a small expression -------------------
    x = Tensor(rng.child("x").normal((3, 4)), requires_grad=True)
    w = Tensor(rng.child("w").normal((4, 2)), requires_grad=True)
    y = ((x @ w).gelu() ** 2).mean()
    y.backward()
    print("loss:", float(y.data))
    print("dL/dx has shape", x.grad.shape, "and norm", np.linalg.norm(x.grad))
    print("dL/dw has shape", w.grad.shape, "and norm", np.linalg.norm(w.grad))

    # -- the analytic gradient agrees with central differences -------------
    err = gradcheck(lambda t: ((t @ w.data).gelu() ** 2).mean(), x)
    print(f"gradcheck max relative error: {err:.2e}")

    # -- broadcasting is handled: gradients fold back to the small shape ---
    b = Tensor(np.zeros(2), requires_grad=True)
    out = ((x @ w + b) ** 2).sum()
    out.backward()
    print("bias grad (folded over the broadcast batch):", b.grad)

    # -- no_grad turns the tape off ----------------------------------------
    with no_grad():
        silent = (x @ w).sum()
    print("no_grad result keeps no graph:", silent.requires_grad is False)

    # -- softmax + log-sum-exp stay stable far from zero --------------------
    wild = Tensor(np.array([[1000.0, 1000.5, 999.5]]), requires_grad=True)
    probs = wild.softmax(axis=1)
    print("softmax at logits ~1000:", np.round(probs.data, 4))


if __name__ == "__main__":
    main()
