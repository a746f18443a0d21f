"""Central finite-difference checks shared by the test modules."""

import numpy as np

from aquafeat import tensor as T


def rel_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def branch_pattern(graph):
    """Which side of its kink every leaky_relu and clamp input sits on."""
    parts = []
    for node in graph.nodes:
        if node.op == "leaky_relu":
            parts.append((node.inputs[0].data >= 0).ravel())
        elif node.op == "clamp":
            parts.append((node.inputs[0].data == node.output.data).ravel())
    return np.concatenate(parts) if parts else np.zeros(0, bool)


def _evaluate(f):
    with T.Graph() as graph:
        value = float(f().data)
    return value, branch_pattern(graph)


def central_difference(f, flat, i, step, order=4, max_halvings=0):
    """Central difference of ``f`` in coordinate ``i`` of ``flat``.

    ``order=2`` is the two-point rule; ``order=4`` the five-point stencil,
    whose O(step**4) truncation keeps tiny gradient entries measurable.

    With ``max_halvings > 0`` the step is halved while any stencil point puts
    a leaky_relu or clamp input on a different side of its kink than the
    unperturbed point, since a difference taken across a kink measures
    neither one-sided derivative. Returns None if no kink-free step is found.
    """
    orig = flat[i]
    offsets = (1, -1) if order == 2 else (1, -1, 2, -2)
    try:
        base = _evaluate(f)[1] if max_halvings else None
        for _ in range(max_halvings + 1):
            values = {}
            straddles = False
            for k in offsets:
                flat[i] = orig + k * step
                values[k], pattern = _evaluate(f) if max_halvings else (float(f().data), None)
                if pattern is not None and not np.array_equal(pattern, base):
                    straddles = True
                    break
            flat[i] = orig
            if not straddles:
                if order == 2:
                    return (values[1] - values[-1]) / (2 * step)
                return (8 * (values[1] - values[-1]) - (values[2] - values[-2])) / (12 * step)
            step /= 2
        return None
    finally:
        flat[i] = orig


def check_gradients(loss_fn, params, coords=50, step=1e-3, seed=0, order=4, max_halvings=0):
    """Compare analytic and central-difference gradients of ``loss_fn()``.

    ``params`` maps names to float64 Tensors that ``loss_fn`` reads. Up to
    ``coords`` random entries per tensor are probed. Returns the worst
    relative error per tensor name. Coordinates for which no kink-free step
    exists (see :func:`central_difference`) are skipped; if every probed
    coordinate of a tensor is skipped its entry is ``nan``.
    """
    rng = np.random.default_rng(seed)
    with T.Graph() as graph:
        loss = loss_fn()
    grads = T.backward(graph, loss, params)
    worst = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
        errs = []
        for i in idx:
            numeric = central_difference(loss_fn, flat, i, step, order, max_halvings)
            if numeric is not None:
                errs.append(rel_error(grads[name].reshape(-1)[i], numeric))
        worst[name] = float(np.max(errs)) if errs else float("nan")
    return worst
