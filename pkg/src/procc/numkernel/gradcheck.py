import numpy as np

from .autograd import Tape


def finite_diff_check(params, param_name, loss_fn, epsilon=1e-5, max_coords=None, seed=0):
    """Compare the tape gradient of ``loss_fn`` against central differences.

    ``loss_fn(tape)`` must build a scalar Var from ``tape.param(...)`` calls
    and be deterministic. Returns the max over checked coordinates of
    ``|a - fd| / (|a| + |fd| + 1e-8)``. With ``max_coords`` set, that many
    coordinates are sampled (seeded); otherwise every coordinate is checked.
    """
    tape = Tape(params)
    loss = loss_fn(tape)
    tape.backward(loss) if tape.nodes else params.zero_grad()
    analytic = params.grads[param_name].copy()

    value = params.values[param_name]
    coords = np.arange(value.size)
    if max_coords is not None and coords.size > max_coords:
        coords = np.random.default_rng(seed).choice(coords, max_coords, replace=False)

    worst = 0.0
    for flat in coords:
        idx = np.unravel_index(flat, value.shape)
        orig = value[idx]
        value[idx] = orig + epsilon
        up = loss_fn(Tape(params)).item()
        value[idx] = orig - epsilon
        down = loss_fn(Tape(params)).item()
        value[idx] = orig
        fd = (up - down) / (2 * epsilon)
        a = analytic[idx]
        worst = max(worst, abs(a - fd) / (abs(a) + abs(fd) + 1e-8))
    return worst
