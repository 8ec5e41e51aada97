"""ReLU MLP classifier with hand-written backprop, a growable head and LoRA.

Weights follow the ``(out, in)`` convention, so a linear layer computes
``x @ W.T + b`` and an adapted layer uses ``W0 + B @ A`` with ``B`` of shape
``(out, r)`` and ``A`` of shape ``(r, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .params import ParamSet, StructureError, check_compatible

HEAD = "head"


class StateError(RuntimeError):
    """Operation not allowed in the network's current adapter state."""


@dataclass
class NetConfig:
    input_dim: int
    hidden_dims: list[int]
    initial_classes: int

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        if not self.hidden_dims:
            raise ValueError("at least one hidden layer is required")
        if self.input_dim < 1 or self.initial_classes < 1 or min(self.hidden_dims) < 1:
            raise ValueError("all layer sizes must be >= 1")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "initial_classes": self.initial_classes,
        }


@dataclass
class LoraAdapter:
    A: np.ndarray  # (r, in)
    B: np.ndarray  # (out, r)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> np.ndarray:
        return self.B @ self.A

    @property
    def n_params(self) -> int:
        return self.A.size + self.B.size


@dataclass
class ForwardTrace:
    version: int
    inputs: list[np.ndarray]  # input to each linear layer, head last
    pre: list[np.ndarray]  # hidden pre-activations
    weights: list[np.ndarray]  # effective weights used, head last
    batch: int = field(default=0)


class Network:
    """MLP with layers ``fc0 .. fc{L-1}`` and a classifier ``head``.

    ``classes`` maps each head row to a global class id.
    """

    def __init__(self, config: NetConfig, seed: int | None = 0, classes: Sequence[int] | None = None):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.adapters: dict[str, LoraAdapter] = {}
        self._version = 0
        rng = np.random.default_rng(seed)
        fan_in = config.input_dim
        for i, width in enumerate(config.hidden_dims):
            self.params[f"fc{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (width, fan_in))
            self.params[f"fc{i}.bias"] = np.zeros(width)
            fan_in = width
        k = config.initial_classes
        self.params[f"{HEAD}.weight"] = rng.normal(0.0, np.sqrt(1.0 / fan_in), (k, fan_in))
        self.params[f"{HEAD}.bias"] = np.zeros(k)
        self.classes: list[int] = list(range(k)) if classes is None else [int(c) for c in classes]
        if len(self.classes) != k:
            raise ValueError("classes must list one id per head row")

    # -- structure ---------------------------------------------------------

    @property
    def layer_names(self) -> list[str]:
        return [f"fc{i}" for i in range(len(self.config.hidden_dims))]

    @property
    def n_classes(self) -> int:
        return self.params[f"{HEAD}.weight"].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.config.hidden_dims[-1]

    def class_index(self, labels: Iterable[int]) -> np.ndarray:
        """Map global class ids to head rows."""
        lookup = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([lookup[int(c)] for c in labels], dtype=np.int64)
        except KeyError as exc:
            raise StructureError(f"class {exc.args[0]} is not in the head") from None

    def mark_updated(self) -> None:
        """Invalidate outstanding forward traces after an in-place update."""
        self._touch()

    def _touch(self):
        self._version += 1

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.config = NetConfig(**self.config.to_dict())
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.adapters = {k: LoraAdapter(a.A.copy(), a.B.copy()) for k, a in self.adapters.items()}
        other.classes = list(self.classes)
        other._version = 0
        return other

    def param_set(self) -> ParamSet:
        """Base parameters (adapters excluded)."""
        return ParamSet(self.params)

    def effective_set(self) -> ParamSet:
        """Base parameters with adapter deltas folded in."""
        out = dict(self.params)
        for layer, ad in self.adapters.items():
            out[f"{layer}.weight"] = self.params[f"{layer}.weight"] + ad.delta()
        return ParamSet(out)

    def body_set(self) -> ParamSet:
        return ParamSet({k: v for k, v in self.params.items() if not k.startswith(HEAD + ".")})

    def load_params(self, params: ParamSet, classes: Sequence[int] | None = None) -> "Network":
        """Replace base parameters; the head may change size if ``classes`` is given."""
        current = self.param_set()
        if classes is not None:
            if len(classes) != params[f"{HEAD}.weight"].shape[0]:
                raise StructureError("classes do not match head rows")
            body_new = [(k, s) for k, s in params.shapes if not k.startswith(HEAD)]
            body_old = [(k, s) for k, s in current.shapes if not k.startswith(HEAD)]
            if body_new != body_old:
                raise StructureError("body layout differs")
            self.classes = [int(c) for c in classes]
        else:
            check_compatible(current, params)
        self.params = params.to_dict()
        self._touch()
        return self

    def load_body(self, body: ParamSet) -> "Network":
        check_compatible(self.body_set(), body)
        for k in body:
            self.params[k] = np.array(body[k])
        self._touch()
        return self

    def effective_weight(self, layer: str) -> np.ndarray:
        w = self.params[f"{layer}.weight"]
        ad = self.adapters.get(layer)
        return w if ad is None else w + ad.delta()

    # -- compute -----------------------------------------------------------

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise StructureError(
                f"expected inputs of shape (n, {self.config.input_dim}), got {x.shape}"
            )
        inputs, pre, weights = [], [], []
        h = x
        for layer in self.layer_names:
            w = self.effective_weight(layer)
            z = h @ w.T + self.params[f"{layer}.bias"]
            inputs.append(h)
            pre.append(z)
            weights.append(w)
            h = np.maximum(z, 0.0)
        wh = self.params[f"{HEAD}.weight"]
        logits = h @ wh.T + self.params[f"{HEAD}.bias"]
        inputs.append(h)
        weights.append(wh)
        return logits, ForwardTrace(self._version, inputs, pre, weights, x.shape[0])

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[1].inputs[-1]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.classes)[np.argmax(self.logits(x), axis=1)]

    def trainable(self) -> dict[str, np.ndarray]:
        """Live references to the arrays an optimizer may update."""
        out: dict[str, np.ndarray] = {}
        if self.adapters:
            for layer, ad in self.adapters.items():
                out[f"lora.{layer}.A"] = ad.A
                out[f"lora.{layer}.B"] = ad.B
            out[f"{HEAD}.weight"] = self.params[f"{HEAD}.weight"]
            out[f"{HEAD}.bias"] = self.params[f"{HEAD}.bias"]
            return out
        return dict(self.params)

    def n_trainable(self) -> int:
        return sum(v.size for v in self.trainable().values())

    def backward(self, trace: ForwardTrace, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients for :meth:`trainable` given ``dLoss/dLogits``."""
        if trace.version != self._version:
            raise StructureError("stale forward trace: network changed since forward")
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.shape != (trace.batch, self.n_classes):
            raise StructureError(f"dlogits shape {dlogits.shape} does not match logits")
        lora = bool(self.adapters)
        grads: dict[str, np.ndarray] = {
            f"{HEAD}.weight": dlogits.T @ trace.inputs[-1],
            f"{HEAD}.bias": dlogits.sum(axis=0),
        }
        dh = dlogits @ trace.weights[-1]
        names = self.layer_names
        for i in range(len(names) - 1, -1, -1):
            layer = names[i]
            dz = dh * (trace.pre[i] > 0.0)
            ad = self.adapters.get(layer)
            if not lora:
                grads[f"{layer}.weight"] = dz.T @ trace.inputs[i]
                grads[f"{layer}.bias"] = dz.sum(axis=0)
            elif ad is not None:
                dw = dz.T @ trace.inputs[i]
                grads[f"lora.{layer}.A"] = ad.B.T @ dw
                grads[f"lora.{layer}.B"] = dw @ ad.A.T
            if i > 0:
                dh = dz @ trace.weights[i]
        return grads

    # -- LoRA --------------------------------------------------------------

    def attach_lora(self, rank: int, targets: Iterable[str] | None = None, seed: int | None = 0) -> "Network":
        if self.adapters:
            raise StateError("adapters already attached")
        targets = list(self.layer_names if targets is None else targets)
        rank = int(rank)
        if rank < 1:
            raise ValueError("rank must be positive")
        for layer in targets:
            if f"{layer}.weight" not in self.params or layer == HEAD:
                raise ValueError(f"unknown LoRA target {layer!r}")
            out_dim, in_dim = self.params[f"{layer}.weight"].shape
            if rank >= min(out_dim, in_dim):
                raise ValueError(f"rank {rank} too large for {layer} ({out_dim}x{in_dim})")
        rng = np.random.default_rng(seed)
        for layer in targets:
            out_dim, in_dim = self.params[f"{layer}.weight"].shape
            self.adapters[layer] = LoraAdapter(
                A=rng.normal(0.0, np.sqrt(1.0 / in_dim), (rank, in_dim)),
                B=np.zeros((out_dim, rank)),
            )
        self._touch()
        return self

    def merge_lora(self) -> "Network":
        """Fold every adapter into its base weight and drop the adapters."""
        if not self.adapters:
            raise StateError("no adapters attached")
        for layer, ad in self.adapters.items():
            self.params[f"{layer}.weight"] = self.params[f"{layer}.weight"] + ad.delta()
        self.adapters = {}
        self._touch()
        return self

    def adapter_set(self) -> ParamSet:
        out = {}
        for layer, ad in self.adapters.items():
            out[f"lora.{layer}.A"] = ad.A
            out[f"lora.{layer}.B"] = ad.B
        return ParamSet(out)

    # -- head --------------------------------------------------------------

    def grow_head(
        self,
        n_new: int,
        init_scale: float = 0.01,
        seed: int | None = 0,
        class_ids: Sequence[int] | None = None,
    ) -> "Network":
        n_new = int(n_new)
        if n_new < 1:
            raise ValueError("n_new_classes must be >= 1")
        if class_ids is None:
            start = max(self.classes) + 1 if self.classes else 0
            class_ids = list(range(start, start + n_new))
        class_ids = [int(c) for c in class_ids]
        if len(class_ids) != n_new or set(class_ids) & set(self.classes):
            raise ValueError("new class ids must be n_new fresh ids")
        rng = np.random.default_rng(seed)
        w = self.params[f"{HEAD}.weight"]
        self.params[f"{HEAD}.weight"] = np.vstack([w, rng.normal(0.0, init_scale, (n_new, w.shape[1]))])
        self.params[f"{HEAD}.bias"] = np.concatenate([self.params[f"{HEAD}.bias"], np.zeros(n_new)])
        self.classes.extend(class_ids)
        self._touch()
        return self

    def fresh_head(
        self,
        n_classes: int,
        init_scale: float = 0.01,
        seed: int | None = 0,
        class_ids: Sequence[int] | None = None,
    ) -> "Network":
        n_classes = int(n_classes)
        if n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        class_ids = list(range(n_classes)) if class_ids is None else [int(c) for c in class_ids]
        if len(class_ids) != n_classes:
            raise ValueError("class_ids must have n_classes entries")
        rng = np.random.default_rng(seed)
        self.params[f"{HEAD}.weight"] = rng.normal(0.0, init_scale, (n_classes, self.feature_dim))
        self.params[f"{HEAD}.bias"] = np.zeros(n_classes)
        self.classes = class_ids
        self._touch()
        return self

    def set_head(self, weight: np.ndarray, bias: np.ndarray, classes: Sequence[int]) -> "Network":
        weight = np.array(weight, dtype=np.float64)
        bias = np.array(bias, dtype=np.float64)
        if weight.shape != (len(classes), self.feature_dim) or bias.shape != (len(classes),):
            raise StructureError("head shape mismatch")
        self.params[f"{HEAD}.weight"] = weight
        self.params[f"{HEAD}.bias"] = bias
        self.classes = [int(c) for c in classes]
        self._touch()
        return self


class SGD:
    """Momentum SGD with optional coupled L2 weight decay."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf: dict[str, np.ndarray] = {}

    def reset(self):
        self._buf = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            buf = self._buf.get(name)
            if buf is None or buf.shape != p.shape:
                buf = np.zeros_like(p)
            buf *= self.momentum
            buf += g
            self._buf[name] = buf
            p -= lr * buf


class AdamW:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.reset()

    def reset(self):
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
        for name, g in grads.items():
            p = params[name]
            m = self._m.get(name)
            if m is None or m.shape != p.shape:
                m, self._v[name], self._t[name] = np.zeros_like(p), np.zeros_like(p), 0
            v = self._v[name]
            t = self._t[name] + 1
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            self._m[name], self._t[name] = m, t
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            p -= lr * self.weight_decay * p
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name: str = "sgd", **kwargs):
    if name == "sgd":
        return SGD(**kwargs)
    if name == "adamw":
        return AdamW(**kwargs)
    raise ValueError(f"unknown optimizer {name!r}")
