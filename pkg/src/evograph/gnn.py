"""Edge-conditioned graph convolution and the generator/discriminator networks.

All forwards take batched adjacency of shape ``[B, n, n]`` and node features
of shape ``[B, n, d]``.  The filter-generating network maps a scalar edge
label ``L`` to a ``d_out x d_in`` matrix ``Theta = L * W + C``, so the
neighbourhood sum collapses to two matmuls per layer::

    Y_out[k] = (W @ sum_k' A[k', k] Y[k'] + C @ sum_{k' in N(k)} Y[k']) / |N(k)| + b

with ``N(k) = {k' : A[k', k] > 0} U {k}`` and the self-loop labelled 0.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

from . import diffengine as de
from .diffengine import DimensionError, Tensor
from .graphcore import ConnectivityMatrix, symmetrize_clamp

CHECKPOINT_FORMAT = "evograph-checkpoint/1"


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _as_batch(g) -> Tensor:
    """Accept a ConnectivityMatrix, array or Tensor; return a ``[B, n, n]`` tensor."""
    if isinstance(g, ConnectivityMatrix):
        return Tensor(g.weights.copy()[None])
    if not isinstance(g, Tensor):
        g = Tensor(np.array(g, dtype=np.float64))
    if g.ndim == 2:
        g = de.reshape(g, (1,) + g.shape)
    if g.ndim != 3 or g.shape[1] != g.shape[2]:
        raise DimensionError(f"expected adjacency [B, n, n], got {list(g.shape)}")
    return g


class Module:
    """Named parameter container with train/eval mode."""

    training = True

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend((f"{name}.{k}", v) for k, v in value.named_parameters())
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend((f"{name}.{i}.{k}", v) for k, v in item.named_parameters())
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, value in vars(self).items():
            if isinstance(value, Module):
                out.extend((f"{name}.{k}", v) for k, v in value.named_buffers())
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend((f"{name}.{i}.{k}", v) for k, v in item.named_buffers())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.named_parameters()}
        state.update({k: b.copy() for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {k: p.data for k, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for key, dst in targets.items():
            src = np.asarray(state[key], dtype=np.float64)
            if src.shape != dst.shape:
                raise DimensionError(f"{key}: checkpoint shape {list(src.shape)} != model shape {list(dst.shape)}")
            dst[...] = src

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def train(self, mode: bool = True):
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)


class EccLayer(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_out = d_out
        # filter network F: label (d_m = 1) -> d_out * d_in entries, row-major as [d_out, d_in]
        self.filter_weight = _uniform(rng, (d_in * d_out, 1), d_in)
        self.filter_bias = _uniform(rng, (d_in * d_out,), d_in)
        self.bias = _uniform(rng, (d_out,), d_in)

    def theta(self, label: float) -> np.ndarray:
        """Mixing matrix ``[d_out, d_in]`` produced by the filter network for one edge label."""
        flat = self.filter_weight.data[:, 0] * label + self.filter_bias.data
        return flat.reshape(self.d_out, self.d_in)

    def __call__(self, adj, features: Tensor) -> Tensor:
        return ecc_forward(self, adj, features)


def neighbourhood(adj: np.ndarray) -> np.ndarray:
    """Boolean ``[B, n, n]`` mask with ``mask[b, k', k]`` true when k' is in N(k)."""
    mask = adj > 0.0
    idx = np.arange(adj.shape[-1])
    mask[..., idx, idx] = True
    return mask


def ecc_forward(layer: EccLayer, adj, features: Tensor) -> Tensor:
    """Edge-conditioned convolution of ``features`` over the graph(s) ``adj``.

    ``adj`` may be a ConnectivityMatrix, an ``[n, n]`` or ``[B, n, n]`` tensor;
    ``features`` must match as ``[n, d_in]`` or ``[B, n, d_in]``.  Output keeps
    the input's batching.
    """
    unbatched = features.ndim == 2
    A = _as_batch(adj)
    X = de.reshape(features, (1,) + features.shape) if unbatched else features
    B, n, _ = A.shape
    if X.ndim != 3 or X.shape[0] != B or X.shape[1] != n or X.shape[2] != layer.d_in:
        raise DimensionError(
            f"ecc_forward: features {list(features.shape)} do not match graph {list(A.shape)} and d_in={layer.d_in}"
        )
    mask = neighbourhood(A.data)
    inv_deg = 1.0 / mask.sum(axis=1)  # [B, n] counts over k'
    At = de.transpose(A)  # [B, k, k']
    Mt = Tensor(np.swapaxes(mask, -1, -2).astype(np.float64))
    agg_label = de.reshape(de.matmul(At, X), (B * n, layer.d_in))
    agg_plain = de.reshape(de.matmul(Mt, X), (B * n, layer.d_in))
    W = de.reshape(layer.filter_weight, (layer.d_out, layer.d_in))
    C = de.reshape(layer.filter_bias, (layer.d_out, layer.d_in))
    mixed = de.matmul(agg_label, de.transpose(W)) + de.matmul(agg_plain, de.transpose(C))
    scale = Tensor(np.repeat(inv_deg.reshape(B * n, 1), layer.d_out, axis=1))
    bias = de.matmul(Tensor(np.ones((B * n, 1))), de.reshape(layer.bias, (1, layer.d_out)))
    out = de.reshape(mixed * scale + bias, (B, n, layer.d_out))
    return de.reshape(out, (n, layer.d_out)) if unbatched else out


class BatchNorm(Module):
    """Per-feature normalisation over all nodes in the batch."""

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        self.d = d
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)

    def named_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def __call__(self, x: Tensor) -> Tensor:
        rows = x.size // self.d
        flat = de.reshape(x, (rows, self.d))
        ones = Tensor(np.ones((rows, 1)))
        if self.training:
            mu = de.mean(flat, axis=0)  # [1, d]
            centred = flat - de.matmul(ones, mu)
            var = de.mean(de.square(centred), axis=0)
            self.running_mean *= 1.0 - self.momentum
            self.running_mean += self.momentum * mu.data[0]
            self.running_var *= 1.0 - self.momentum
            self.running_var += self.momentum * var.data[0]
            inv_std = de.div(1.0, de.sqrt(var + self.eps))
            normed = centred * de.matmul(ones, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            normed = (flat - Tensor(np.broadcast_to(self.running_mean, flat.shape).copy())) * Tensor(
                np.broadcast_to(inv_std, flat.shape).copy()
            )
        out = normed * de.matmul(ones, de.reshape(self.gamma, (1, self.d))) + de.matmul(
            ones, de.reshape(self.beta, (1, self.d))
        )
        return de.reshape(out, x.shape)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return x * Tensor(keep)


class Generator(Module):
    """Three ECC layers ``n -> h -> h -> n`` with a residual skip from the input graph.

    Node features are the adjacency rows.  Each layer is followed by batch
    norm; the first two also by leaky ReLU and dropout (training only).  The
    input adjacency is added to the last layer's output before
    :func:`symmetrize_clamp`.
    """

    def __init__(self, n_r: int, hidden: int | None = None, dropout: float = 0.3, skip: bool = True, seed: int = 0,
                 rng: np.random.Generator | None = None, final_norm: bool = False):
        rng = rng if rng is not None else np.random.default_rng(seed)
        hidden = hidden or n_r
        self.n_r = n_r
        self.hidden = hidden
        self.dropout = dropout
        self.skip = skip
        self.final_norm = final_norm
        dims = [n_r, hidden, hidden, n_r]
        self.layers = [EccLayer(dims[i], dims[i + 1], rng) for i in range(3)]
        self.norms = [BatchNorm(d) for d in dims[1:3]]
        if final_norm:
            self.norms.append(BatchNorm(n_r))

    def config(self) -> dict:
        return {"kind": "generator", "n_r": self.n_r, "hidden": self.hidden, "dropout": self.dropout, "skip": self.skip,
                "final_norm": self.final_norm}

    def __call__(self, adj, rng: np.random.Generator | None = None) -> Tensor:
        return generator_forward(self, adj, rng=rng)


def generator_forward(gen: Generator, g_in, mode: str | None = None, rng: np.random.Generator | None = None):
    """Predict the next-timepoint graph(s).

    ``mode`` overrides the module's train/eval flag for this call.  A
    ConnectivityMatrix input returns a ConnectivityMatrix; tensor input
    returns a differentiable ``[B, n, n]`` tensor.
    """
    single = isinstance(g_in, ConnectivityMatrix)
    A = _as_batch(g_in)
    if A.shape[-1] != gen.n_r:
        raise DimensionError(f"generator built for n_r={gen.n_r}, got graph with n_r={A.shape[-1]}")
    previous = gen.training
    if mode is not None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        gen.train(mode == "train")
    try:
        h = A
        for i, layer in enumerate(gen.layers):
            h = ecc_forward(layer, A, h)
            if i < len(gen.norms):
                h = gen.norms[i](h)
            if i < 2:
                h = de.leaky_relu(h)
                if gen.training:
                    h = dropout(h, gen.dropout, rng)
        if gen.skip:
            h = h + A
        out = symmetrize_clamp(h)
    finally:
        gen.train(previous)
    if single:
        return ConnectivityMatrix(out.data[0].copy())
    return out


class Discriminator(Module):
    """Two ECC layers ``2n -> h_d -> 1``; realness = sigmoid of the node-mean output."""

    def __init__(self, n_r: int, hidden: int | None = None, seed: int = 0, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(seed)
        hidden = hidden or n_r
        self.n_r = n_r
        self.hidden = hidden
        self.layers = [EccLayer(2 * n_r, hidden, rng), EccLayer(hidden, 1, rng)]

    def config(self) -> dict:
        return {"kind": "discriminator", "n_r": self.n_r, "hidden": self.hidden}

    def __call__(self, g_cond, g_judged) -> Tensor:
        return discriminator_forward(self, g_cond, g_judged)


def discriminator_forward(d: Discriminator, g_cond, g_judged) -> Tensor:
    """Realness score per graph pair, shape ``[B]``; messages follow ``g_judged``'s edges."""
    cond, judged = _as_batch(g_cond), _as_batch(g_judged)
    if cond.shape != judged.shape:
        raise DimensionError(f"discriminator inputs differ: {list(cond.shape)} vs {list(judged.shape)}")
    if judged.shape[-1] != d.n_r:
        raise DimensionError(f"discriminator built for n_r={d.n_r}, got n_r={judged.shape[-1]}")
    B = judged.shape[0]
    h = de.concat([cond, judged], axis=-1)
    h = de.leaky_relu(ecc_forward(d.layers[0], judged, h))
    h = ecc_forward(d.layers[1], judged, h)  # [B, n, 1]
    return de.sigmoid(de.reshape(de.mean(h, axis=1), (B,)))


# ---------------------------------------------------------------------- checkpoints
def _pack_state(prefix: str, module: Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def save_checkpoint(path, generator: Generator, discriminator: Discriminator | None = None, *,
                    config_hash: str = "", extra: dict | None = None) -> None:
    """Write an ``.npz`` archive: parameter arrays keyed ``generator/<name>``,
    ``discriminator/<name>``, plus a ``__meta__`` JSON string holding the format
    tag, network configs, shapes and the training config hash."""
    arrays = _pack_state("generator", generator)
    meta = {"format": CHECKPOINT_FORMAT, "config_hash": config_hash, "generator": generator.config()}
    if discriminator is not None:
        arrays.update(_pack_state("discriminator", discriminator))
        meta["discriminator"] = discriminator.config()
    meta["shapes"] = {k: list(v.shape) for k, v in sorted(arrays.items())}
    if extra:
        meta["extra"] = extra
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **dict(sorted(arrays.items())))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[Generator, Discriminator | None, dict]:
    with np.load(Path(path), allow_pickle=False) as npz:
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        arrays = {k: npz[k] for k in npz.files if k != "__meta__"}
    gcfg = meta["generator"]
    gen = Generator(gcfg["n_r"], gcfg["hidden"], dropout=gcfg["dropout"], skip=gcfg["skip"],
                    final_norm=gcfg["final_norm"])
    gen.load_state_dict({k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("generator/")})
    disc = None
    if "discriminator" in meta:
        dcfg = meta["discriminator"]
        disc = Discriminator(dcfg["n_r"], dcfg["hidden"])
        disc.load_state_dict({k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("discriminator/")})
    return gen, disc, meta


def parameter_hash(*modules: Module) -> str:
    h = hashlib.sha256()
    for module in modules:
        for key, value in sorted(module.state_dict().items()):
            h.update(key.encode())
            h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()
