"""Reverse-mode autodiff over dense float64 arrays.

Ops evaluate eagerly and record a graph of Node objects; backward() walks the
topological order once and accumulates gradients. Graphs are rebuilt per batch,
so nodes are single-use. Everything is float64 and deterministic: the same
inputs and weights give bit-identical values and gradients.
"""

from __future__ import annotations

import numpy as np

# stabilizer inside log() of the cross-entropy variants
ETA = 1e-12


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


def tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


class Node:
    """One value in the computation graph."""

    __slots__ = ("op", "value", "parents", "grad", "_backward")

    def __init__(self, op, value, parents=(), backward=None):
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value out of op '{op}'")
        self.op = op
        self.value = value
        self.parents = tuple(parents)
        self.grad = None
        self._backward = backward

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def constant(data) -> Node:
    """A graph input; receives a gradient but is not a parameter."""
    return Node("input", tensor(data))


def parameter(data) -> Node:
    """A trainable leaf."""
    return Node("parameter", tensor(data))


def _expect_2d(op, *nodes):
    for n in nodes:
        if n.value.ndim != 2:
            raise ShapeError(f"{op}: expected 2-D operand, got shape {n.value.shape}")


def matmul(a: Node, b: Node) -> Node:
    _expect_2d("matmul", a, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: {a.value.shape} @ {b.value.shape}")
    out = Node("matmul", a.value @ b.value, (a, b))

    def _backward():
        a.grad += out.grad @ b.value.T
        b.grad += a.value.T @ out.grad

    out._backward = _backward
    return out


def add(a: Node, b: Node) -> Node:
    """Elementwise add; also (B, K) + (K,) bias rows over the batch dimension."""
    if a.value.shape == b.value.shape:
        out = Node("add", a.value + b.value, (a, b))

        def _backward():
            a.grad += out.grad
            b.grad += out.grad

    elif a.value.ndim == 2 and b.value.shape == (a.value.shape[1],):
        out = Node("add", a.value + b.value, (a, b))

        def _backward():
            a.grad += out.grad
            b.grad += out.grad.sum(axis=0)

    else:
        raise ShapeError(f"add: {a.value.shape} + {b.value.shape}")
    out._backward = _backward
    return out


def relu(x: Node) -> Node:
    mask = x.value > 0.0
    out = Node("relu", np.where(mask, x.value, 0.0), (x,))

    def _backward():
        x.grad += np.where(mask, out.grad, 0.0)

    out._backward = _backward
    return out


def _conv_cols(x, k):
    # strided view (B, C, Ho, Wo, k, k); read-only, no copy
    B, C, H, W = x.shape
    Ho, Wo = H - k + 1, W - k + 1
    sb, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (B, C, Ho, Wo, k, k), (sb, sc, sh, sw, sh, sw), writeable=False
    )


def conv2d(x: Node, w: Node) -> Node:
    """Valid cross-correlation, stride 1, square kernel. x (B,C,H,W), w (O,C,k,k)."""
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D operands, got {x.value.shape}, {w.value.shape}")
    B, C, H, W = x.value.shape
    O, Cw, k, kw = w.value.shape
    if C != Cw or k != kw:
        raise ShapeError(f"conv2d: input {x.value.shape} vs kernel {w.value.shape}")
    if H < k or W < k:
        raise ShapeError(f"conv2d: image {H}x{W} smaller than kernel {k}x{k}")
    cols = _conv_cols(x.value, k)
    val = np.tensordot(cols, w.value, axes=([1, 4, 5], [1, 2, 3]))  # (B,Ho,Wo,O)
    out = Node("conv2d", np.ascontiguousarray(val.transpose(0, 3, 1, 2)), (x, w))

    def _backward():
        g = out.grad  # (B,O,Ho,Wo)
        w.grad += np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        Ho, Wo = g.shape[2], g.shape[3]
        gx = x.grad
        for u in range(k):
            for v in range(k):
                # out[b,o,i,j] took x[b,c,i+u,j+v] with weight w[o,c,u,v]
                gx[:, :, u:u + Ho, v:v + Wo] += np.einsum(
                    "boij,oc->bcij", g, w.value[:, :, u, v]
                )

    out._backward = _backward
    return out


def avgpool2(x: Node) -> Node:
    """Non-overlapping 2x2 mean pooling; trailing odd row/column is dropped."""
    if x.value.ndim != 4:
        raise ShapeError(f"avgpool2: need 4-D operand, got {x.value.shape}")
    B, C, H, W = x.value.shape
    He, We = (H // 2) * 2, (W // 2) * 2
    if He == 0 or We == 0:
        raise ShapeError(f"avgpool2: image {H}x{W} smaller than the 2x2 window")
    blocks = x.value[:, :, :He, :We].reshape(B, C, He // 2, 2, We // 2, 2)
    out = Node("avgpool2", blocks.mean(axis=(3, 5)), (x,))

    def _backward():
        g = np.repeat(np.repeat(out.grad, 2, axis=2), 2, axis=3) * 0.25
        x.grad[:, :, :He, :We] += g

    out._backward = _backward
    return out


def flatten(x: Node) -> Node:
    """(B, ...) -> (B, prod)."""
    B = x.value.shape[0]
    out = Node("flatten", np.ascontiguousarray(x.value.reshape(B, -1)), (x,))

    def _backward():
        x.grad += out.grad.reshape(x.value.shape)

    out._backward = _backward
    return out


def softmax(x: Node) -> Node:
    """Row-wise softmax of a 2-D logits array."""
    _expect_2d("softmax", x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Node("softmax", p, (x,))

    def _backward():
        g = out.grad
        x.grad += p * (g - (g * p).sum(axis=1, keepdims=True))

    out._backward = _backward
    return out


def grad_reverse(x: Node, lam: float) -> Node:
    """Identity forward; backward multiplies the upstream gradient by -lam exactly."""
    lam = float(lam)
    out = Node("grad-reverse", x.value, (x,))

    def _backward():
        x.grad += -lam * out.grad

    out._backward = _backward
    return out


UNKNOWN = -1  # target sentinel: item has no class label


def penalized_cross_entropy(probs: Node, targets, penalty: float) -> Node:
    """Per-row loss  penalty * p[:, -1] - log(p[target] + ETA)  on probability rows.

    A target of UNKNOWN (-1) drops the cross-entropy term entirely, so the row
    contributes only the last-index penalty and never reads a class label.
    With penalty 0 and known targets this is plain categorical cross-entropy.
    """
    _expect_2d("penalized-cross-entropy", probs)
    t = np.asarray(targets, dtype=np.int64)
    B, K = probs.value.shape
    if t.shape != (B,):
        raise ShapeError(f"penalized-cross-entropy: {B} rows but targets shape {t.shape}")
    if np.any(t < UNKNOWN) or np.any(t >= K):
        raise ValueError("penalized-cross-entropy: target index out of range")
    penalty = float(penalty)
    known = t >= 0
    rows = np.nonzero(known)[0]
    picked = probs.value[rows, t[rows]]
    loss = penalty * probs.value[:, K - 1].copy()
    loss[rows] -= np.log(picked + ETA)
    out = Node("penalized-cross-entropy", loss, (probs,))

    def _backward():
        g = out.grad  # (B,)
        probs.grad[:, K - 1] += penalty * g
        probs.grad[rows, t[rows]] -= g[rows] / (picked + ETA)

    out._backward = _backward
    return out


def sum_all(x: Node) -> Node:
    out = Node("sum", np.asarray(x.value.sum()), (x,))

    def _backward():
        x.grad += out.grad

    out._backward = _backward
    return out


def scale(x: Node, c: float) -> Node:
    c = float(c)
    out = Node("scalar-scale", x.value * c, (x,))

    def _backward():
        x.grad += c * out.grad

    out._backward = _backward
    return out


def mean_all(x: Node) -> Node:
    return scale(sum_all(x), 1.0 / x.value.size)


def topo_order(out: Node) -> list[Node]:
    """Parents before children, ending at `out`."""
    order, seen = [], set()
    stack = [(out, iter(out.parents))]
    seen.add(id(out))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p.parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(out: Node, seed_grad: float = 1.0) -> None:
    """Populate .grad on every node reachable from the scalar `out`."""
    if out.value.shape != ():
        raise ShapeError(f"backward: output must be scalar, got shape {out.value.shape}")
    order = topo_order(out)
    for node in order:
        node.grad = np.zeros_like(node.value)
    out.grad = np.asarray(float(seed_grad))
    for node in reversed(order):
        if node._backward is not None:
            node._backward()


def parameters(out: Node) -> list[Node]:
    """All parameter leaves reachable from `out`, in topological order."""
    return [n for n in topo_order(out) if n.op == "parameter"]
