"""Minimal dense-network substrate with hand-rolled reverse-mode gradients.

Networks are feed-forward affine stacks with ReLU on hidden layers, an
optional per-layer normalizer (layer norm with learned scale/shift, or
spectral weight normalization with persistent power-iteration vectors),
and flat parameter storage: every trainable value lives in one contiguous
vector ``theta`` exposed through named views. Flat storage makes the
optimizer, polyak averaging, and regularizer penalties single vector ops,
which is what keeps desk-scale training runs fast.
"""

from __future__ import annotations

import math

import numpy as np

from .serial import ContainerError, load_container, save_container

NORM_NONE = "none"
NORM_LAYER = "layer_norm"
NORM_SPECTRAL = "spectral_norm"
VALID_NORMALIZERS = (NORM_NONE, NORM_LAYER, NORM_SPECTRAL)

LAYER_NORM_EPS = 1e-5
SPECTRAL_EPS = 1e-12

CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Invalid network topology or mismatched input shapes."""


class UsageError(RuntimeError):
    """Operation called out of order (e.g. backward without forward)."""


class AdamState:
    """Adam moments for one network, flat like the parameters."""

    def __init__(self, n_params: int, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, dtype=np.float64):
        self.m = np.zeros(n_params, dtype=dtype)
        self.v = np.zeros(n_params, dtype=dtype)
        self.step_count = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_slice(self, sl: slice) -> None:
        """Clear moments for one parameter range (used by layer resets)."""
        self.m[sl] = 0.0
        self.v[sl] = 0.0


class GradientTape:
    """Per-parameter gradients (flat, same layout as the owning network)
    plus the gradient with respect to the batch input."""

    def __init__(self, grad: np.ndarray, input_grad: np.ndarray | None):
        self.grad = grad
        self.input_grad = input_grad

    def view(self, net: "DenseNetwork", name: str) -> np.ndarray:
        sl, shape = net._layout[name]
        return self.grad[sl].reshape(shape)


class _ForwardCache:
    __slots__ = ("inputs", "zs", "ln", "sigmas", "batch_size")

    def __init__(self):
        self.inputs = []
        self.zs = []
        self.ln = {}
        self.sigmas = {}
        self.batch_size = 0


class DenseNetwork:
    """Affine stack ``widths[0] -> widths[1] -> ... -> widths[-1]``.

    ReLU is applied after every layer except the last; ``activate_output``
    additionally applies it to the last layer (used for trunks whose output
    is itself a hidden representation). ``normalizers`` tags each layer with
    one of ``none`` / ``layer_norm`` / ``spectral_norm``; layer norm inserts
    a learned scale/shift on the pre-activation, spectral norm divides the
    layer weight by a power-iteration estimate of its largest singular value.
    """

    def __init__(self, widths, rng: np.random.Generator, normalizers=None,
                 activate_output: bool = False, dtype=np.float64):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ConfigurationError(f"invalid layer widths {widths}")
        n_layers = len(widths) - 1
        if normalizers is None:
            normalizers = (NORM_NONE,) * n_layers
        normalizers = tuple(normalizers)
        if len(normalizers) != n_layers:
            raise ConfigurationError("one normalizer tag per layer required")
        for tag in normalizers:
            if tag not in VALID_NORMALIZERS:
                raise ConfigurationError(f"unknown normalizer {tag!r}")

        self.widths = widths
        self.n_layers = n_layers
        self.normalizers = normalizers
        self.activate_output = bool(activate_output)
        self.dtype = np.dtype(dtype)

        # Flat parameter layout: per layer W, b, then layer-norm scale/shift.
        self._layout: dict[str, tuple[slice, tuple]] = {}
        offset = 0
        for k in range(n_layers):
            fan_in, fan_out = widths[k], widths[k + 1]
            for name, shape in ((f"W{k}", (fan_in, fan_out)), (f"b{k}", (fan_out,))):
                size = int(np.prod(shape))
                self._layout[name] = (slice(offset, offset + size), shape)
                offset += size
            if normalizers[k] == NORM_LAYER:
                for name in (f"ln{k}_scale", f"ln{k}_shift"):
                    self._layout[name] = (slice(offset, offset + fan_out), (fan_out,))
                    offset += fan_out
        self.theta = np.zeros(offset, dtype=self.dtype)

        # Decoupled weight decay exempts normalization scale/shift.
        self._decay_mask = np.ones(offset, dtype=self.dtype)
        for name, (sl, _) in self._layout.items():
            if name.startswith("ln"):
                self._decay_mask[sl] = 0.0

        self._init_params(rng)
        self.init_snapshot = self.theta.copy()

        # Persistent power-iteration vectors per spectral-normalized layer.
        self.spectral_u: dict[int, np.ndarray] = {}
        self.spectral_v: dict[int, np.ndarray] = {}
        for k in range(n_layers):
            if normalizers[k] == NORM_SPECTRAL:
                u = rng.standard_normal(widths[k]).astype(self.dtype)
                self.spectral_u[k] = u / max(np.linalg.norm(u), SPECTRAL_EPS)
                self.spectral_v[k] = np.zeros(widths[k + 1], dtype=self.dtype)
                self.power_iterate_layer(k)

        self._cache: _ForwardCache | None = None

    # ---- parameter access -------------------------------------------------

    def param(self, name: str) -> np.ndarray:
        sl, shape = self._layout[name]
        return self.theta[sl].reshape(shape)

    def param_names(self) -> list[str]:
        return list(self._layout)

    def layer_slice(self, k: int) -> slice:
        """Flat range covering layer k's affine parameters (W and b)."""
        start = self._layout[f"W{k}"][0].start
        stop = self._layout[f"b{k}"][0].stop
        return slice(start, stop)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def _init_params(self, rng: np.random.Generator) -> None:
        for k in range(self.n_layers):
            self._draw_layer(k, rng)
            if self.normalizers[k] == NORM_LAYER:
                self.param(f"ln{k}_scale")[:] = 1.0
                self.param(f"ln{k}_shift")[:] = 0.0

    def _draw_layer(self, k: int, rng: np.random.Generator) -> None:
        # Uniform fan-in scaling: bound = 1/sqrt(fan_in).
        fan_in, fan_out = self.widths[k], self.widths[k + 1]
        bound = 1.0 / math.sqrt(fan_in)
        self.param(f"W{k}")[:] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        self.param(f"b{k}")[:] = rng.uniform(-bound, bound, size=fan_out)

    # ---- spectral normalization --------------------------------------------

    def power_iterate_layer(self, k: int, iterations: int = 1) -> None:
        """One (or more) power-iteration updates of the persistent u/v pair."""
        W = self.param(f"W{k}")
        u = self.spectral_u[k]
        for _ in range(iterations):
            v = W.T @ u
            nv = np.linalg.norm(v)
            if nv < SPECTRAL_EPS:
                return
            v /= nv
            u = W @ v
            nu = np.linalg.norm(u)
            if nu < SPECTRAL_EPS:
                return
            u /= nu
            self.spectral_u[k] = u
            self.spectral_v[k] = v

    def power_iterate(self, iterations: int = 1) -> None:
        for k in self.spectral_u:
            self.power_iterate_layer(k, iterations)

    def spectral_sigma(self, k: int) -> float:
        """Current singular-value estimate sigma = u^T W v (u, v held fixed)."""
        return float(self.spectral_u[k] @ self.param(f"W{k}") @ self.spectral_v[k])

    # ---- forward / backward -------------------------------------------------

    def forward(self, batch: np.ndarray, store: bool = True) -> np.ndarray:
        """Run the batch through the stack; returns the output matrix.

        With ``store=True`` the intermediate activations are retained for a
        subsequent :meth:`backward` and :meth:`hidden_activations`.
        """
        batch = np.asarray(batch, dtype=self.dtype)
        if batch.ndim != 2 or batch.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"batch shape {batch.shape} incompatible with input width {self.in_dim}")
        cache = _ForwardCache() if store else None
        x = batch
        for k in range(self.n_layers):
            W = self.param(f"W{k}")
            tag = self.normalizers[k]
            if tag == NORM_SPECTRAL:
                sigma = self.spectral_sigma(k)
                if abs(sigma) > SPECTRAL_EPS:
                    W = W / sigma
                else:
                    sigma = 1.0  # zero weight: flagged unchanged
                if cache is not None:
                    cache.sigmas[k] = sigma
            z = x @ W + self.param(f"b{k}")
            if tag == NORM_LAYER:
                mu = z.mean(axis=1, keepdims=True)
                var = z.var(axis=1, keepdims=True)
                inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
                zhat = (z - mu) * inv_std
                z = zhat * self.param(f"ln{k}_scale") + self.param(f"ln{k}_shift")
                if cache is not None:
                    cache.ln[k] = (zhat, inv_std)
            if cache is not None:
                cache.inputs.append(x)
                cache.zs.append(z)
            if k < self.n_layers - 1 or self.activate_output:
                x = np.maximum(z, 0.0)
            else:
                x = z
        if cache is not None:
            cache.batch_size = batch.shape[0]
            self._cache = cache
        return x

    def hidden_activations(self) -> list[np.ndarray]:
        """Post-ReLU activations of every hidden layer from the last stored
        forward pass (includes the output layer when ``activate_output``)."""
        if self._cache is None:
            raise UsageError("forward(store=True) must run first")
        hiddens = []
        last = self.n_layers - 1
        for k, z in enumerate(self._cache.zs):
            if k < last or self.activate_output:
                hiddens.append(np.maximum(z, 0.0))
        return hiddens

    def backward(self, output_grad: np.ndarray, want_param_grads: bool = True,
                 want_input_grad: bool = True) -> GradientTape:
        """Reverse-mode pass from d(loss)/d(output) using the stored forward.

        Returns a tape holding flat parameter gradients (zeros when
        ``want_param_grads`` is off) and the input gradient.
        """
        cache = self._cache
        if cache is None:
            raise UsageError("backward called without a recorded forward pass")
        g = np.asarray(output_grad, dtype=self.dtype)
        if g.shape != (cache.batch_size, self.out_dim):
            raise ConfigurationError(
                f"output grad shape {g.shape} != {(cache.batch_size, self.out_dim)}")
        grad = np.zeros_like(self.theta)
        tape = GradientTape(grad, None)
        for k in range(self.n_layers - 1, -1, -1):
            if k < self.n_layers - 1 or self.activate_output:
                g = g * (cache.zs[k] > 0)
            tag = self.normalizers[k]
            if tag == NORM_LAYER:
                zhat, inv_std = cache.ln[k]
                if want_param_grads:
                    sl, _ = self._layout[f"ln{k}_scale"]
                    grad[sl] = (g * zhat).sum(axis=0)
                    sl, _ = self._layout[f"ln{k}_shift"]
                    grad[sl] = g.sum(axis=0)
                gz = g * self.param(f"ln{k}_scale")
                g = inv_std * (
                    gz
                    - gz.mean(axis=1, keepdims=True)
                    - zhat * (gz * zhat).mean(axis=1, keepdims=True)
                )
            x = cache.inputs[k]
            W = self.param(f"W{k}")
            if tag == NORM_SPECTRAL:
                sigma = cache.sigmas[k]
                W_eff = W / sigma
                if want_param_grads:
                    G = x.T @ g
                    # sigma = u^T W v with u, v constant, so d sigma/dW = u v^T.
                    correction = float((G * W).sum()) / (sigma * sigma)
                    Wg = G / sigma - correction * np.outer(
                        self.spectral_u[k], self.spectral_v[k])
                    sl, _ = self._layout[f"W{k}"]
                    grad[sl] = Wg.ravel()
            else:
                W_eff = W
                if want_param_grads:
                    sl, _ = self._layout[f"W{k}"]
                    np.matmul(x.T, g, out=grad[sl].reshape(x.shape[1], g.shape[1]))
            if want_param_grads:
                sl, _ = self._layout[f"b{k}"]
                grad[sl] = g.sum(axis=0)
            if k > 0 or want_input_grad:
                g = g @ W_eff.T
        tape.input_grad = g if want_input_grad else None
        return tape

    # ---- surgery and stats ----------------------------------------------------

    def reset_output_layer(self, rng_seed: int, adam_state: AdamState | None = None) -> None:
        """Re-draw the final affine layer from the init distribution; other
        layers untouched. Clears the matching optimizer moments when given."""
        k = self.n_layers - 1
        rng = np.random.default_rng(rng_seed)
        self._draw_layer(k, rng)
        if adam_state is not None:
            adam_state.zero_slice(self.layer_slice(k))

    def clone(self) -> "DenseNetwork":
        """Deep copy with identical parameters, snapshot, and norm buffers."""
        other = object.__new__(DenseNetwork)
        other.widths = self.widths
        other.n_layers = self.n_layers
        other.normalizers = self.normalizers
        other.activate_output = self.activate_output
        other.dtype = self.dtype
        other._layout = self._layout
        other.theta = self.theta.copy()
        other._decay_mask = self._decay_mask
        other.init_snapshot = self.init_snapshot.copy()
        other.spectral_u = {k: u.copy() for k, u in self.spectral_u.items()}
        other.spectral_v = {k: v.copy() for k, v in self.spectral_v.items()}
        other._cache = None
        return other


def parameter_stats(net: DenseNetwork) -> tuple[int, float]:
    """Exact trainable-parameter count and global L2 norm."""
    return net.theta.size, float(np.linalg.norm(net.theta.astype(np.float64)))


def adam_step(net: DenseNetwork, tape: GradientTape, state: AdamState,
              weight_decay: float = 0.0, l2_init_coeff: float = 0.0) -> None:
    """One Adam update on the network's flat parameters.

    ``l2_init_coeff`` adds the pull 2*c*(theta - init_snapshot) to the
    gradient before the moment updates; ``weight_decay`` is decoupled decay
    applied after the Adam move (normalization scale/shift exempt).
    """
    g = tape.grad
    if g.shape != net.theta.shape:
        raise ConfigurationError("gradient/parameter shape mismatch")
    if l2_init_coeff:
        g = g + (2.0 * l2_init_coeff) * (net.theta - net.init_snapshot)
    state.step_count += 1
    t = state.step_count
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * np.square(g)
    mhat = state.m / (1.0 - state.beta1 ** t)
    vhat = state.v / (1.0 - state.beta2 ** t)
    net.theta -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    if weight_decay:
        net.theta -= (state.lr * weight_decay) * (net.theta * net._decay_mask)


def apply_layer_norm(pre_activation: np.ndarray, scale=None, shift=None,
                     eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Row-wise normalization to zero mean / unit variance followed by the
    learned scale and shift (identity at init)."""
    z = np.asarray(pre_activation, dtype=np.float64)
    mu = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    zhat = (z - mu) / np.sqrt(var + eps)
    if scale is not None:
        zhat = zhat * scale
    if shift is not None:
        zhat = zhat + shift
    return zhat


def apply_spectral_norm(weight: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Weight divided by the power-iteration singular-value estimate
    sigma = u^T W v. A (near-)zero estimate returns the weight unchanged."""
    sigma = float(u @ weight @ v)
    if abs(sigma) <= SPECTRAL_EPS:
        return weight
    return weight / sigma


# ---- checkpointing ------------------------------------------------------------


def network_state(net: DenseNetwork, adam: AdamState | None = None) -> tuple[dict, dict]:
    """(meta, arrays) pair describing one network for a checkpoint container."""
    meta = {
        "widths": list(net.widths),
        "normalizers": list(net.normalizers),
        "activate_output": net.activate_output,
        "dtype": net.dtype.str,
    }
    arrays = {"theta": net.theta, "init_snapshot": net.init_snapshot}
    for k in net.spectral_u:
        arrays[f"spectral_u{k}"] = net.spectral_u[k]
        arrays[f"spectral_v{k}"] = net.spectral_v[k]
    if adam is not None:
        meta["adam"] = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "step_count": adam.step_count,
        }
        arrays["adam_m"] = adam.m
        arrays["adam_v"] = adam.v
    return meta, arrays


def network_from_state(meta: dict, arrays: dict) -> tuple[DenseNetwork, AdamState | None]:
    net = DenseNetwork(
        meta["widths"],
        rng=np.random.default_rng(0),
        normalizers=meta["normalizers"],
        activate_output=meta["activate_output"],
        dtype=np.dtype(meta["dtype"]),
    )
    net.theta[:] = arrays["theta"]
    net.init_snapshot[:] = arrays["init_snapshot"]
    for k in net.spectral_u:
        net.spectral_u[k][:] = arrays[f"spectral_u{k}"]
        net.spectral_v[k][:] = arrays[f"spectral_v{k}"]
    adam = None
    if "adam" in meta:
        cfg = meta["adam"]
        adam = AdamState(net.theta.size, lr=cfg["lr"], beta1=cfg["beta1"],
                         beta2=cfg["beta2"], eps=cfg["eps"], dtype=net.dtype)
        adam.step_count = cfg["step_count"]
        adam.m[:] = arrays["adam_m"]
        adam.v[:] = arrays["adam_v"]
    return net, adam


def save_network(path, net: DenseNetwork, adam: AdamState | None = None) -> None:
    meta, arrays = network_state(net, adam)
    save_container(path, {"kind": "network", "version": CHECKPOINT_VERSION, "net": meta}, arrays)


def load_network(path) -> tuple[DenseNetwork, AdamState | None]:
    meta, arrays = load_container(path)
    if meta.get("kind") != "network":
        raise ContainerError(f"{path}: not a network checkpoint")
    return network_from_state(meta["net"], arrays)
