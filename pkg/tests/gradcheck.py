"""Independent oracles used by several test modules.

Nothing here touches the tape: every value is recomputed from plain numpy.
"""

import numpy as np


def naive_conv2d(x, w, b, padding):
    """Direct six-loop cross-correlation."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, h, wd))
    for bi in range(n):
        for oc in range(o):
            for i in range(h):
                for j in range(wd):
                    acc = b[oc]
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[bi, ic, i + di, j + dj] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = acc
    return out


def relative_error(a, n, floor=1e-7):
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(arrays, loss_fn, analytic, n_coords=30, h=1e-5, seed=0, pattern_fn=None):
    """Compare analytic gradients against central differences.

    ``arrays`` is a list of numpy arrays that ``loss_fn`` reads (and that are
    perturbed in place). ``analytic`` is the matching list of gradient arrays.
    ``pattern_fn``, if given, returns the ReLU activation pattern for the
    current arrays; coordinates whose perturbation flips the pattern sit on a
    kink and are skipped.

    Returns the list of relative errors of the checked coordinates.
    """
    rng = np.random.default_rng(seed)
    sizes = np.array([a.size for a in arrays])
    probs = sizes / sizes.sum()
    errors = []
    attempts = 0
    while len(errors) < n_coords:
        attempts += 1
        if attempts > 50 * n_coords:
            raise RuntimeError("could not find enough kink-free coordinates")
        k = rng.choice(len(arrays), p=probs)
        arr = arrays[k]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        orig = arr[idx]
        base = pattern_fn() if pattern_fn else None
        arr[idx] = orig + h
        fp = loss_fn()
        pp = pattern_fn() if pattern_fn else None
        arr[idx] = orig - h
        fm = loss_fn()
        pm = pattern_fn() if pattern_fn else None
        arr[idx] = orig
        if pattern_fn and not (np.array_equal(base, pp) and np.array_equal(base, pm)):
            continue
        numeric = (fp - fm) / (2 * h)
        errors.append(relative_error(analytic[k][idx], numeric))
    return errors
