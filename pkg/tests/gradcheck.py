"""Central-difference gradient oracle, independent of the analytic backward pass."""

import numpy as np

from purifier import nncore


def central_difference_grads(model, batch, targets, loss_kind, lam=1.0, h=1e-5):
    """Numerically differentiate the training loss w.r.t. every parameter."""
    grads = []
    for arr in nncore.parameters(model):
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = nncore.compute_loss(model, batch, targets, loss_kind, lam)
            flat[i] = orig - h
            lm = nncore.compute_loss(model, batch, targets, loss_kind, lam)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def random_net(rng, max_layers=3, max_dim=16, batch_norm=False):
    """A random small float64 net plus a compatible batch, for gradient checks."""
    n_layers = int(rng.integers(1, max_layers + 1))
    dims = [int(rng.integers(2, max_dim + 1)) for _ in range(n_layers + 1)]
    hidden = str(rng.choice(["relu", "tanh", "sigmoid", "identity"]))
    head = str(rng.choice(["softmax", "identity", "sigmoid", "tanh"]))
    model = nncore.build_mlp(
        dims,
        hidden_activation=hidden,
        output_activation=head,
        seed=int(rng.integers(0, 2**31)),
        dtype=np.float64,
        batch_norm=batch_norm,
        weight_scale=0.5,
    )
    n = int(rng.integers(2, 7))
    batch = rng.normal(0.0, 1.0, (n, dims[0]))
    return model, batch, dims[-1], head
