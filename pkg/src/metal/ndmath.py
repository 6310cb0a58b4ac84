"""Dense numeric core: feedforward nets with reverse/forward-mode derivatives,
Adam, conjugate gradient and the binary parameter block format."""
from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

NN_MAGIC = b"METALNN1"


class NonFiniteError(FloatingPointError):
    """Raised when a loss, gradient or iterate stops being finite."""


class FormatError(ValueError):
    """Raised on a bad magic string or truncated binary block."""


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MLP:
    """ReLU multilayer perceptron with a linear output layer.

    ``sizes`` lists every layer width including input and output, so
    ``MLP([4, 32, 32, 2])`` has two hidden layers of width 32.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None,
                 out_scale: float = 1.0):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ValueError(f"layer widths must be >= 2 positive integers, got {list(sizes)}")
        self.sizes = [int(s) for s in sizes]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if rng is None:
                w = np.zeros((n_in, n_out))
            else:
                w = glorot_uniform(rng, n_in, n_out)
            if i == len(self.sizes) - 2:
                w = w * out_scale
            self.weights.append(w)
            self.biases.append(np.zeros(n_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "MLP":
        new = MLP.__new__(MLP)
        new.sizes = list(self.sizes)
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"flat vector has {flat.size} entries, net has {self.n_params}")
        i = 0
        for p in self.params:
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != self.sizes[0]:
            raise ValueError(
                f"input last dimension {x.shape[-1] if x.ndim else '()'} "
                f"does not match first layer width {self.sizes[0]}")
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self._check(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    __call__ = forward

    def forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass that also returns the layer inputs needed by ``backward``."""
        h = self._check(x)
        cache = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            cache.append(h)
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h, cache

    def backward(self, cache: list[np.ndarray], gout: np.ndarray
                 ) -> tuple[list[np.ndarray], np.ndarray]:
        """Backpropagate ``gout`` (dL/doutput). Returns (param grads, dL/dinput).

        Inputs may carry arbitrary leading batch dimensions; parameter
        gradients are summed over them.
        """
        g = np.asarray(gout, dtype=np.float64)
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        for i in range(len(self.weights) - 1, -1, -1):
            h = cache[i]
            h2 = h.reshape(-1, h.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            grads[2 * i] = h2.T @ g2
            grads[2 * i + 1] = g2.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                # cache[i] is the post-ReLU activation of layer i-1
                g = g * (h > 0.0)
        return grads, g

    def jvp(self, x: np.ndarray, tangents: Sequence[np.ndarray],
            cache: list[np.ndarray] | None = None) -> np.ndarray:
        """Forward-mode derivative of the output along a parameter tangent.

        ``cache`` from ``forward_cache(x)`` skips recomputing the activations.
        """
        if cache is None:
            _, cache = self.forward_cache(x)
        dh = None
        last = len(self.weights) - 1
        for i, w in enumerate(self.weights):
            h = cache[i]
            dz = h @ tangents[2 * i] + tangents[2 * i + 1]
            if dh is not None:
                dz += dh @ w
            if i < last:
                # ReLU mask is where the next layer's input is positive
                dz *= cache[i + 1] > 0.0
            dh = dz
        return dh

    def unflatten(self, flat: np.ndarray) -> list[np.ndarray]:
        out, i = [], 0
        for p in self.params:
            out.append(flat[i:i + p.size].reshape(p.shape))
            i += p.size
        return out


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays])


def gradients(net: MLP, loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
              x: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Gradient of ``loss_fn(net(x))`` w.r.t. every parameter of ``net``.

    ``loss_fn`` maps the network output to ``(loss, dloss/doutput)``.
    """
    out, cache = net.forward_cache(x)
    loss, gout = loss_fn(out)
    if not np.isfinite(loss):
        raise NonFiniteError(f"loss is not finite ({loss}); training diverged")
    grads, _ = net.backward(cache, gout)
    return float(loss), grads


class Adam:
    """Bias-corrected Adam over a fixed list of parameter arrays (updated in place)."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if len(params) != len(self.m):
            raise ValueError("parameter list does not match optimizer state")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient passed to Adam")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> list[np.ndarray]:
        return [np.array([float(self.t)])] + self.m + self.v

    def load_state_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        n = len(self.m)
        self.t = int(arrays[0][0])
        self.m = [a.copy() for a in arrays[1:1 + n]]
        self.v = [a.copy() for a in arrays[1 + n:1 + 2 * n]]


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       iterations: int = 10, tol: float = 1e-10, method: str = "cr"
                       ) -> tuple[np.ndarray, float, list[float]]:
    """Solve A x = b for symmetric positive-definite A given only ``matvec``.

    ``method="cr"`` (default) is the conjugate-residual form, which picks the
    iterate minimizing ||b - A x|| over the Krylov space, so the residual
    trace never increases. ``method="cg"`` is classic Hestenes-Stiefel CG,
    whose residual may rise between iterations. Both reach the exact
    solution within n iterations for an n-dimensional system.

    Returns the solution, the final residual norm and the residual trace.
    """
    if method not in ("cr", "cg"):
        raise ValueError(f"unknown solver method {method!r}")
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    rr = float(r @ r)
    trace = [np.sqrt(rr)]
    if iterations < 1 or np.sqrt(rr) <= tol:
        return x, float(np.sqrt(rr)), trace
    p = r.copy()
    if method == "cr":
        ar = _finite(matvec(r), "matrix-vector product")
        ap = ar.copy()
        rar = float(r @ ar)
    for i in range(iterations):
        if method == "cr":
            if not rar > 0.0:
                break
            apap = float(ap @ ap)
            alpha = rar / apap
        else:
            ap = _finite(matvec(p), "matrix-vector product")
            pap = float(p @ ap)
            if not pap > 0.0:
                break
            alpha = rr / pap
        x += alpha * p
        r -= alpha * ap
        rr_new = float(r @ r)
        if not np.isfinite(rr_new):
            raise NonFiniteError("non-finite residual in conjugate gradient")
        trace.append(np.sqrt(rr_new))
        if np.sqrt(rr_new) <= tol or i == iterations - 1:
            rr = rr_new
            break
        if method == "cr":
            ar = _finite(matvec(r), "matrix-vector product")
            rar_new = float(r @ ar)
            beta = rar_new / rar
            p = r + beta * p
            ap = ar + beta * ap
            rar = rar_new
        else:
            p = r + (rr_new / rr) * p
        rr = rr_new
    return x, float(np.sqrt(rr)), trace


def _finite(v: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"non-finite {what} in conjugate gradient")
    return v


def write_arrays(f: BinaryIO, arrays: Sequence[np.ndarray]) -> None:
    f.write(NN_MAGIC)
    for a in arrays:
        a = np.asarray(a, dtype="<f8")  # tobytes() below is C-order; keeps 0-d shape
        f.write(struct.pack("<Q", a.ndim))
        f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        f.write(a.tobytes())


def read_arrays(f: BinaryIO) -> list[np.ndarray]:
    magic = f.read(len(NN_MAGIC))
    if magic != NN_MAGIC:
        raise FormatError(f"bad parameter block magic {magic!r}, expected {NN_MAGIC!r}")
    out = []
    while True:
        head = f.read(8)
        if not head:
            return out
        if len(head) < 8:
            raise FormatError("truncated parameter block")
        (rank,) = struct.unpack("<Q", head)
        dims_raw = f.read(8 * rank)
        if len(dims_raw) < 8 * rank:
            raise FormatError("truncated parameter block")
        dims = struct.unpack(f"<{rank}Q", dims_raw)
        n = int(np.prod(dims)) if rank else 1
        raw = f.read(8 * n)
        if len(raw) < 8 * n:
            raise FormatError("truncated parameter block")
        out.append(np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64))
