"""Reverse-mode autodiff on plain numpy arrays.

Builds a tiny computation, checks every gradient against central
differences, then fits a two-layer network on a toy regression to show the
full forward/backward/step loop.
"""

import numpy as np

import flowgen.tensor as T
from flowgen import Adam, Tensor, grad_check


def main():
    rng = np.random.default_rng(0)

    # a small expression: mean(gelu(x W) * v)
    w = Tensor(rng.normal(size=(6, 4)).astype(np.float32), requires_grad=True)
    v = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
    x = Tensor(rng.normal(size=(3, 6)).astype(np.float32), requires_grad=True)

    with T.use_graph(T.ComputeGraph()):
        loss = T.mean(T.mul(T.gelu(T.matmul(x, w)), v))
        T.backward(loss)
    print(f"loss {loss.item():+.4f}  |dL/dx| {np.abs(x.grad).max():.4f}  "
          f"|dL/dW| {np.abs(w.grad).max():.4f}")

    # every coordinate of x probed against central differences
    err = grad_check(lambda a: T.mean(T.mul(T.gelu(T.matmul(a, w)), v)), x)
    print(f"grad_check max rel err {err:.2e}")

    # fit y = sin(3u) with a 2-layer net
    u = rng.uniform(-1, 1, size=(256, 1)).astype(np.float32)
    y = np.sin(3 * u)
    w1 = Tensor(rng.normal(0, 2.0, size=(1, 64)).astype(np.float32),
                requires_grad=True)
    b1 = Tensor(rng.uniform(-2, 2, size=64).astype(np.float32),
                requires_grad=True)
    w2 = Tensor(rng.normal(0, 0.3, size=(64, 1)).astype(np.float32),
                requires_grad=True)
    b2 = Tensor(np.zeros(1, np.float32), requires_grad=True)
    opt = Adam([w1, b1, w2, b2], lr=2e-2)

    for step in range(1, 1001):
        opt.zero_grad()
        with T.use_graph(T.ComputeGraph()):
            h = T.gelu(T.add(T.matmul(Tensor(u), w1), b1))
            pred = T.add(T.matmul(h, w2), b2)
            diff = T.sub(pred, Tensor(y))
            loss = T.mean(T.mul(diff, diff))
            T.backward(loss)
        opt.step()
        if step % 250 == 0:
            print(f"step {step:3d}  mse {loss.item():.5f}")
    assert loss.item() < 0.01
    print("fit converged")


if __name__ == "__main__":
    main()
