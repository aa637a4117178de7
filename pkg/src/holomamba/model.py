"""HoloMambaRec: embeddings, holographic binding, selective encoder, item head."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .errors import ConfigError, DataError, DimensionError
from .hrr import RoleVectors, bind_embed, bundle_window, num_windows
from .ssm import RecurrentState, SsmBlockParams, block_step, encoder_forward
from .tensor import (
    Rng,
    Tensor,
    cross_entropy_masked,
    dropout,
    embedding,
    gaussian,
    layer_norm,
    matmul,
    transpose,
)


@dataclass
class ModelConfig:
    vocab_items: int
    vocab_attrs: int
    d: int = 96
    d_state: int = 16
    n_layers: int = 2
    L: int = 50
    conv_width: int = 4
    use_binding: bool = True
    use_compression: bool = False
    bundle_k: int = 4
    dropout: float = 0.0
    seed: int = 42

    def __post_init__(self):
        for name in ("d", "d_state", "n_layers", "L", "conv_width", "bundle_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_items < 2 or self.vocab_attrs < 2:
            raise ConfigError("vocabularies need at least one real entry besides padding index 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)


def _padded_embedding(rows: int, d: int, rng: Rng, name: str) -> Tensor:
    table = gaussian((rows, d), 0.02, rng, name=name)
    table.data[0] = 0.0
    table.frozen_rows = (0,)
    return table


def _ones(d):
    return Tensor(np.ones(d), requires_grad=True)


def _zeros(d):
    return Tensor(np.zeros(d), requires_grad=True)


@dataclass
class ModelParams:
    E_item: Tensor
    E_attr: Tensor
    alpha: Tensor
    bind_gain: Tensor
    bind_bias: Tensor
    roles: RoleVectors
    bundle_gain: Tensor
    bundle_bias: Tensor
    blocks: list[SsmBlockParams]
    W_cls: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig) -> "ModelParams":
        rng = Rng(cfg.seed)
        d = cfg.d
        return cls(
            E_item=_padded_embedding(cfg.vocab_items, d, rng.spawn(1), "E_item"),
            E_attr=_padded_embedding(cfg.vocab_attrs, d, rng.spawn(2), "E_attr"),
            alpha=Tensor(0.1, requires_grad=True, name="alpha"),
            bind_gain=_ones(d),
            bind_bias=_zeros(d),
            roles=RoleVectors.init(cfg.bundle_k, d, rng.spawn(3)),
            bundle_gain=_ones(d),
            bundle_bias=_zeros(d),
            blocks=[SsmBlockParams.init(d, cfg.d_state, cfg.conv_width, rng.spawn(10 + i)) for i in range(cfg.n_layers)],
            W_cls=gaussian((cfg.vocab_items, d), 0.02, rng.spawn(4), name="W_cls"),
        )

    def named(self) -> dict[str, Tensor]:
        out = {
            "E_item": self.E_item,
            "E_attr": self.E_attr,
            "alpha": self.alpha,
            "bind_norm.gain": self.bind_gain,
            "bind_norm.bias": self.bind_bias,
            "roles": self.roles.roles,
            "bundle_norm.gain": self.bundle_gain,
            "bundle_norm.bias": self.bundle_bias,
        }
        for i, block in enumerate(self.blocks):
            for name, t in block.tensors().items():
                out[f"blocks.{i}.{name}"] = t
        out["W_cls"] = self.W_cls
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named()
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in named.items():
            if arrays[name].shape != t.shape:
                raise ConfigError(f"checkpoint array {name!r} has shape {arrays[name].shape}, model expects {t.shape}")
            t.data[...] = arrays[name]


def window_targets(targets: np.ndarray, k: int) -> np.ndarray:
    """Each window predicts the target of its last constituent position."""
    L = targets.shape[-1]
    last = np.minimum(np.arange(num_windows(L, k)) * k + k - 1, L - 1)
    return targets[..., last]


class HoloMambaRec:
    def __init__(self, config: ModelConfig, params: ModelParams | None = None):
        self.config = config
        self.params = params or ModelParams.init(config)
        self._dropout_rng = Rng(config.seed, 99)
        self.training = False

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.named().values())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    # -- forward pieces -----------------------------------------------------

    def _check_indices(self, items: np.ndarray, attrs: np.ndarray) -> None:
        if items.shape != attrs.shape:
            raise DimensionError(f"items {items.shape} and attrs {attrs.shape} differ in shape")
        cfg = self.config
        for name, arr, vocab in (("item", items, cfg.vocab_items), ("attribute", attrs, cfg.vocab_attrs)):
            if arr.size and (arr.min() < 0 or arr.max() >= vocab):
                bad = arr[(arr < 0) | (arr >= vocab)].flat[0]
                raise DataError(f"{name} index {int(bad)} out of range [0, {vocab})")

    def embed(self, items, attrs) -> Tensor:
        """Bound token embeddings ``[..., L, d]``."""
        p = self.params
        items, attrs = np.asarray(items), np.asarray(attrs)
        self._check_indices(items, attrs)
        e_item = embedding(p.E_item, items)
        if self.config.use_binding:
            tokens = bind_embed(e_item, embedding(p.E_attr, attrs), p.alpha, p.bind_gain, p.bind_bias)
        else:
            tokens = layer_norm(e_item, p.bind_gain, p.bind_bias)
        if self.training and self.config.dropout > 0:
            tokens = dropout(tokens, self.config.dropout, self._dropout_rng)
        return tokens

    def encode(self, items, attrs, compressed: bool | None = None) -> Tensor:
        compressed = self.config.use_compression if compressed is None else compressed
        x = self.embed(items, attrs)
        if compressed:
            p = self.params
            x = bundle_window(x, p.roles, self.config.bundle_k, p.bundle_gain, p.bundle_bias)
        return encoder_forward(x, self.params.blocks)

    def head(self, y: Tensor) -> Tensor:
        return matmul(y, transpose(self.params.W_cls))

    def forward(self, items, attrs) -> Tensor:
        """Logits ``[B, L', vocab_items]`` at every (possibly bundled) position."""
        items = np.asarray(items)
        if items.shape[-1] != self.config.L:
            raise DimensionError(f"sequence length {items.shape[-1]} does not match configured L={self.config.L}")
        return self.head(self.encode(items, attrs))

    def loss(self, items, attrs, targets) -> Tensor:
        logits = self.forward(items, attrs)
        targets = np.asarray(targets)
        if self.config.use_compression:
            targets = window_targets(targets, self.config.bundle_k)
        return loss_masked(logits, targets)

    # -- inference ----------------------------------------------------------

    def final_logits(self, items, attrs, compressed: bool | None = None) -> np.ndarray:
        """Final-position logits for any sequence length (no tape)."""
        y = self.encode(items, attrs, compressed)
        return self.head(y[..., -1, :]).data

    def init_state(self, lead: tuple[int, ...] = ()) -> list[RecurrentState]:
        return [RecurrentState.zeros(b, lead) for b in self.params.blocks]

    def step(self, token: np.ndarray, states: list[RecurrentState]) -> np.ndarray:
        """Push one encoder input ``[..., d]`` through every block in place."""
        x = token
        for i, block in enumerate(self.params.blocks):
            x, states[i] = block_step(x, states[i], block)
        return x

    def forward_recurrent(self, items, attrs, compressed: bool | None = None, return_state: bool = False):
        """Final-position logits by constant-memory stepping.

        With compression each window of ``bundle_k`` tokens is bundled as
        soon as it completes (or the sequence ends), then stepped once.
        With ``return_state`` the final per-block states are returned too.
        """
        compressed = self.config.use_compression if compressed is None else compressed
        items, attrs = np.asarray(items), np.asarray(attrs)
        self._check_indices(items, attrs)
        L = items.shape[-1]
        states = self.init_state(items.shape[:-1])
        p, k = self.params, self.config.bundle_k
        y = None
        if not compressed:
            for t in range(L):
                y = self.step(self.embed(items[..., t:t + 1], attrs[..., t:t + 1]).data[..., 0, :], states)
        else:
            for start in range(0, L, k):
                stop = min(start + k, L)
                tokens = self.embed(items[..., start:stop], attrs[..., start:stop])
                bundled = bundle_window(tokens, p.roles, stop - start, p.bundle_gain, p.bundle_bias)
                y = self.step(bundled.data[..., 0, :], states)
        logits = y @ p.W_cls.data.T
        return (logits, states) if return_state else logits

    def predict_topk(self, items, attrs, k: int) -> list[int]:
        if not 1 <= k < self.config.vocab_items:
            raise ConfigError(f"k must be in [1, {self.config.vocab_items}), got {k}")
        scores = self.final_logits(np.asarray(items)[None], np.asarray(attrs)[None])[0]
        return topk_ids(scores, k)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        path = Path(path)
        container.write_arrays(path, {n: t.data for n, t in self.params.named().items()})
        path.with_suffix(".json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path, **overrides) -> "HoloMambaRec":
        path = Path(path)
        cfg_path = path.with_suffix(".json")
        if not cfg_path.exists():
            raise ConfigError(f"missing config sidecar {cfg_path}")
        values = json.loads(cfg_path.read_text())
        values.update(overrides)
        model = cls(ModelConfig.from_dict(values))
        model.params.load_arrays(container.read_arrays(path))
        return model


def loss_masked(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over non-padding targets; class 0 is never a candidate."""
    return cross_entropy_masked(logits, targets)


def topk_ids(scores: np.ndarray, k: int) -> list[int]:
    """Top-``k`` real item ids ordered by (score desc, id asc); id 0 is excluded."""
    ids = np.arange(1, scores.shape[-1])
    order = np.lexsort((ids, -scores[1:]))
    return [int(i) for i in ids[order[:k]]]
