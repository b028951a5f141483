"""Minimal differentiable MLP core.

Multilayer perceptrons (tanh hidden layers, identity output) with exact
reverse-mode parameter/input gradients, forward-mode input directional
derivatives (JVPs), and reverse differentiation *through* the JVP graph
(needed for tangent-space losses and geodesic energy gradients, which
differentiate quantities built from decoder Jacobian-vector products).

Everything is plain float64 numpy; batched variants carry a leading batch
axis and reduce parameter gradients with a single matmul so results are
deterministic run to run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Mlp:
    """Fully connected net; ``weights[l]`` has shape (out_l, in_l)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError("layer shape mismatch")
        for Wa, Wb in zip(self.weights, self.weights[1:]):
            if Wb.shape[1] != Wa.shape[0]:
                raise ValueError("consecutive layer dimensions must match")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        i = 0
        for p in self.parameters():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size
        if i != flat.size:
            raise ValueError("flat parameter size mismatch")


@dataclass
class GradientRecord:
    """Per-parameter partials in the same layout as :class:`Mlp`."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @staticmethod
    def zeros_like(net: Mlp) -> "GradientRecord":
        return GradientRecord([np.zeros_like(W) for W in net.weights],
                              [np.zeros_like(b) for b in net.biases])

    def arrays(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def add_scaled(self, other: "GradientRecord", scale: float = 1.0) -> None:
        for a, b in zip(self.arrays(), other.arrays()):
            a += scale * b

    def scaled(self, scale: float) -> "GradientRecord":
        return GradientRecord([scale * W for W in self.weights],
                              [scale * b for b in self.biases])


def mlp_init(layer_sizes, rng: np.random.Generator) -> Mlp:
    """Uniform init with scale 1/sqrt(fan_in); zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        a = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def _check_vec(x, dim, name):
    x = np.asarray(x, dtype=float)
    if x.shape != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# forward / reverse
# ---------------------------------------------------------------------------

def forward_batch(net: Mlp, X: np.ndarray):
    """Batched forward pass; returns (output, activation cache)."""
    X = np.asarray(X, dtype=float)
    H = X
    hs = [H]  # post-activation values per layer, hs[0] = input
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        A = H @ W.T + b
        H = A if l == net.n_layers - 1 else np.tanh(A)
        hs.append(H)
    return H, hs


def backward_batch(net: Mlp, hs: list[np.ndarray], adjoint: np.ndarray):
    """Reverse pass; returns (GradientRecord summed over the batch,
    per-row input adjoints)."""
    R = np.asarray(adjoint, dtype=float)
    gW = [None] * net.n_layers
    gb = [None] * net.n_layers
    for l in range(net.n_layers - 1, -1, -1):
        if l == net.n_layers - 1:
            rho = R
        else:
            t = hs[l + 1]
            rho = R * (1.0 - t * t)
        gW[l] = rho.T @ hs[l]
        gb[l] = rho.sum(axis=0)
        R = rho @ net.weights[l]
    return GradientRecord(gW, gb), R


def net_eval(net: Mlp, x) -> np.ndarray:
    """Feed-forward evaluation of a single input vector."""
    x = _check_vec(x, net.layer_sizes[0], "input")
    y, _ = forward_batch(net, x[None, :])
    return y[0]


def net_param_grad(net: Mlp, x, output_adjoint) -> GradientRecord:
    """Exact reverse-mode gradient of adjoint . net(x) w.r.t. parameters."""
    x = _check_vec(x, net.layer_sizes[0], "input")
    c = _check_vec(output_adjoint, net.layer_sizes[-1], "adjoint")
    _, hs = forward_batch(net, x[None, :])
    grads, _ = backward_batch(net, hs, c[None, :])
    return grads


def net_input_grad(net: Mlp, x, output_adjoint) -> np.ndarray:
    """Exact reverse-mode gradient of adjoint . net(x) w.r.t. the input."""
    x = _check_vec(x, net.layer_sizes[0], "input")
    c = _check_vec(output_adjoint, net.layer_sizes[-1], "adjoint")
    _, hs = forward_batch(net, x[None, :])
    _, R = backward_batch(net, hs, c[None, :])
    return R[0]


# ---------------------------------------------------------------------------
# forward-mode (JVP) and reverse-through-JVP
# ---------------------------------------------------------------------------

def jvp_forward_batch(net: Mlp, X: np.ndarray, V: np.ndarray):
    """Primal + tangent forward pass.

    Returns (Y, Ydot, cache) where cache holds per-layer post-activation
    values and their tangents for :func:`jvp_backward_batch`.
    """
    H = np.asarray(X, dtype=float)
    Hd = np.asarray(V, dtype=float)
    hs = [H]
    hds = [Hd]
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        A = H @ W.T + b
        Ad = Hd @ W.T
        if l == net.n_layers - 1:
            H, Hd = A, Ad
        else:
            H = np.tanh(A)
            Hd = (1.0 - H * H) * Ad
        hs.append(H)
        hds.append(Hd)
    return H, Hd, (hs, hds)


def net_input_jvp(net: Mlp, x, direction) -> np.ndarray:
    """Exact forward-mode directional derivative d net(x)/dx . direction."""
    x = _check_vec(x, net.layer_sizes[0], "input")
    v = _check_vec(direction, net.layer_sizes[0], "direction")
    _, yd, _ = jvp_forward_batch(net, x[None, :], v[None, :])
    return yd[0]


def jvp_backward_batch(net: Mlp, cache, adjoint_dot: np.ndarray,
                       adjoint_primal: np.ndarray | None = None):
    """Reverse pass through the JVP graph.

    Differentiates phi = sum(adjoint_dot * Ydot) + sum(adjoint_primal * Y)
    w.r.t. parameters, inputs and tangent directions. Returns
    (GradientRecord, grad_X, grad_V). This is where second derivatives of
    the net enter (tanh'' terms), so tangent-space regularizers and metric
    derivatives stay exact.
    """
    hs, hds = cache
    Rd = np.asarray(adjoint_dot, dtype=float)
    R = (np.zeros_like(Rd) if adjoint_primal is None
         else np.asarray(adjoint_primal, dtype=float))
    gW = [None] * net.n_layers
    gb = [None] * net.n_layers
    for l in range(net.n_layers - 1, -1, -1):
        if l == net.n_layers - 1:
            rho = R
            rhod = Rd
        else:
            t = hs[l + 1]
            tp = 1.0 - t * t  # tanh'
            # tangent of the pre-activation: Hd = tp * Ad  =>  Ad = Hd / tp
            # avoid the division by recomputing Ad from the cached lower layer
            Ad = hds[l] @ net.weights[l].T
            tpp_Ad = -2.0 * t * tp * Ad  # tanh'' * Ad
            rho = R * tp + Rd * tpp_Ad
            rhod = Rd * tp
        gW[l] = rho.T @ hs[l] + rhod.T @ hds[l]
        gb[l] = rho.sum(axis=0)
        R = rho @ net.weights[l]
        Rd = rhod @ net.weights[l]
    return GradientRecord(gW, gb), R, Rd


def net_jvp_grads(net: Mlp, x, v, adjoint_dot, adjoint_primal=None):
    """Single-vector convenience wrapper around :func:`jvp_backward_batch`."""
    x = _check_vec(x, net.layer_sizes[0], "input")
    v = _check_vec(v, net.layer_sizes[0], "direction")
    c = _check_vec(adjoint_dot, net.layer_sizes[-1], "adjoint_dot")
    e = None if adjoint_primal is None else _check_vec(
        adjoint_primal, net.layer_sizes[-1], "adjoint_primal")
    _, _, cache = jvp_forward_batch(net, x[None, :], v[None, :])
    grads, R, Rd = jvp_backward_batch(net, cache, c[None, :],
                                      None if e is None else e[None, :])
    return grads, R[0], Rd[0]


def input_jacobian(net: Mlp, x) -> np.ndarray:
    """Dense (out, in) Jacobian via one batched JVP over basis directions."""
    x = _check_vec(x, net.layer_sizes[0], "input")
    n_in = net.layer_sizes[0]
    X = np.tile(x, (n_in, 1))
    _, yd, _ = jvp_forward_batch(net, X, np.eye(n_in))
    return yd.T


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class MomentumOptimizer:
    """Full-batch gradient descent with classical momentum and a fixed step.

    Chosen over adaptive schemes for exact reproducibility: the update is a
    pure function of the gradient sequence.
    """

    def __init__(self, params: list[np.ndarray], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        for p, g, u in zip(self.params, grads, self.velocity):
            u *= self.momentum
            u += g
            p -= self.lr * u
