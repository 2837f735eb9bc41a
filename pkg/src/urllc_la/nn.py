"""Small dense networks in float64 numpy with manual backprop and Adam."""

from __future__ import annotations

import numpy as np

_ACTIVATIONS = ("identity", "tanh")


class Mlp:
    """Fully connected network with ReLU hidden layers.

    Parameters
    ----------
    layer_sizes : sequence of int
        Widths from input to output, at least two entries.
    output_activation : {"identity", "tanh"}
    rng : numpy Generator, optional
        Used for He-initialisation of the weights. Without one the network
        starts at zero.
    """

    def __init__(self, layer_sizes, output_activation="identity", rng=None,
                 output_scale=1.0):
        layer_sizes = [int(n) for n in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ValueError("need at least an input and an output layer")
        if output_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.layer_sizes = layer_sizes
        self.output_activation = output_activation
        self.weights = []
        self.biases = []
        n_layers = len(layer_sizes) - 1
        for i, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            if rng is None:
                w = np.zeros((n_in, n_out))
            else:
                w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)
                if i == n_layers - 1:
                    w *= output_scale
            self.weights.append(w)
            self.biases.append(np.zeros(n_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Mlp":
        net = Mlp.__new__(Mlp)
        net.layer_sizes = list(self.layer_sizes)
        net.output_activation = self.output_activation
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        return net

    def forward(self, x, return_cache=False):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"expected input width {self.layer_sizes[0]}, got {x.shape[1]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i < last:
                h = np.maximum(z, 0.0)
            elif self.output_activation == "tanh":
                h = np.tanh(z)
            else:
                h = z
            acts.append(h)
        y = h[0] if single else h
        if return_cache:
            return y, acts
        return y

    __call__ = forward

    def backward(self, cache, grad_out):
        """Reverse pass through a cached forward.

        Returns ``(grads, grad_input)`` where ``grads`` is aligned with
        :attr:`params` and gradients are summed over the batch.
        """
        acts = cache
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != acts[-1].shape:
            raise ValueError(f"gradient shape {g.shape} != output shape {acts[-1].shape}")
        if self.output_activation == "tanh":
            g = g * (1.0 - acts[-1] ** 2)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = acts[i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (acts[i] > 0)
        return grads, g

    def soft_update(self, source: "Mlp", tau: float):
        """``self <- tau * source + (1 - tau) * self`` in place."""
        if not 0.0 < tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        for p, q in zip(self.params, source.params):
            p *= 1.0 - tau
            p += tau * q

    def get_state(self) -> dict:
        out = {"layer_sizes": np.array(self.layer_sizes),
               "output_activation": np.array(self.output_activation)}
        for i, p in enumerate(self.params):
            out[f"p{i}"] = p
        return out

    @classmethod
    def from_state(cls, state) -> "Mlp":
        net = cls([int(n) for n in state["layer_sizes"]], str(state["output_activation"]))
        for i, p in enumerate(net.params):
            p[...] = state[f"p{i}"]
        return net


class Adam:
    """Adam with bias correction, one instance per network."""

    def __init__(self, net: Mlp, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in net.params]
        self.v = [np.zeros_like(p) for p in net.params]

    def step(self, net: Mlp, grads):
        if len(grads) != len(self.m):
            raise ValueError("gradient list does not match the network")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(net.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def forward(net: Mlp, x):
    return net.forward(x)


def backward(net: Mlp, x, grad_out):
    _, cache = net.forward(x, return_cache=True)
    grads, _ = net.backward(cache, grad_out)
    return grads


def adam_step(net: Mlp, grads, state: Adam):
    state.step(net, grads)
    return net, state
