"""Reverse-mode differentiation over recorded graphs."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, add, mul, set_grad_enabled
from .tensor import sum as tsum


def _topological(root: Tensor) -> list:
    """Nodes reachable from ``root`` that require grad, parents before children."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._node is not None:
            for parent in node._node[1]:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def grad(output: Tensor, inputs, grad_output: Tensor | None = None, create_graph: bool = False):
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    ``output`` must be a scalar unless ``grad_output`` is given.  Inputs that
    the output does not depend on get zeros.  With ``create_graph`` the
    backward pass is recorded, so the result can be differentiated again.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ShapeError("backward", output.shape, detail="root must be scalar")
        grad_output = Tensor._wrap(np.ones(output.shape))
    elif grad_output.shape != output.shape:
        raise ShapeError("backward", output.shape, grad_output.shape)

    wanted = {id(t) for t in inputs}
    results = {}
    if output.requires_grad:
        order = _topological(output)
        needed = set()
        for node in order:
            if id(node) in wanted or (
                node._node is not None and any(id(p) in needed for p in node._node[1])
            ):
                needed.add(id(node))
        grads = {id(output): grad_output}
        with set_grad_enabled(create_graph):
            for node in reversed(order):
                if id(node) not in needed:
                    continue
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                if id(node) in wanted:
                    results[id(node)] = g
                if node._node is None:
                    continue
                op, parents = node._node
                needs = tuple(p.requires_grad and id(p) in needed for p in parents)
                if not any(needs):
                    continue
                for parent, pg, need in zip(parents, op.backward(g, parents, needs), needs):
                    if not need or pg is None:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else add(prev, pg)

    out = []
    for t in inputs:
        g = results.get(id(t))
        out.append(g if g is not None else Tensor._wrap(np.zeros(t.shape)))
    return out[0] if single else out


def backward(root: Tensor) -> dict:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf of the graph.

    Returns a mapping from leaf tensor to its gradient array.
    """
    if root.size != 1:
        raise ShapeError("backward", root.shape, detail="root must be scalar")
    leaves = [n for n in _topological(root) if n._node is None] if root.requires_grad else []
    grads = grad(root, leaves) if leaves else []
    out = {}
    for leaf, g in zip(leaves, grads):
        leaf.grad = g.data if leaf.grad is None else leaf.grad + g.data
        out[leaf] = leaf.grad
    return out


def vjp(fn, z, v) -> np.ndarray:
    """Return v^T J_fn(z), shaped like ``z``, without forming the Jacobian."""
    z = Tensor(z, requires_grad=True)
    out = fn(z)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != out.shape:
        raise ShapeError("vjp", out.shape, v.shape)
    return grad(tsum(mul(out, Tensor._wrap(v))), z).data


def jvp(fn, z, u) -> np.ndarray:
    """Return J_fn(z) u via two reverse passes (the vjp is linear in its cotangent)."""
    z = Tensor(z, requires_grad=True)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != z.shape:
        raise ShapeError("jvp", z.shape, u.shape)
    out = fn(z)
    cot = Tensor(np.zeros(out.shape), requires_grad=True)
    w = grad(tsum(mul(out, cot)), z, create_graph=True)
    return grad(tsum(mul(w, Tensor._wrap(u))), cot).data


def jacobian(fn, z) -> np.ndarray:
    """Explicit Jacobian of a vector map, one reverse pass per output coordinate."""
    z = np.asarray(z, dtype=np.float64)
    zt = Tensor(z, requires_grad=True)
    out = fn(zt)
    flat = out.reshape(-1)
    rows = []
    for k in range(flat.shape[0]):
        rows.append(grad(flat[k], zt).data.reshape(-1))
    return np.array(rows).reshape(out.shape + z.shape)


def second_order_grad(inner, outer, x) -> np.ndarray:
    """Gradient of ``outer(grad inner(x), x)`` with respect to ``x``.

    ``inner`` maps a tensor to a scalar; ``outer`` maps (first-order gradient,
    x) to a scalar.  Raises SecondOrderError when the inner graph runs through
    a ReLU that would need differentiating twice.
    """
    x = Tensor(x, requires_grad=True)
    g = grad(inner(x), x, create_graph=True)
    return grad(outer(g, x), x).data


def value_and_grad(fn, x):
    x = Tensor(x, requires_grad=True)
    out = fn(x)
    return out.item(), grad(out, x).data
