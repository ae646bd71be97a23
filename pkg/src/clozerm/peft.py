"""DoRA adapters, layer freezing, adapter merging, and specialist averaging.

A DoRA adapter re-expresses a frozen base matrix W0 as a trainable
magnitude per output feature times a normalized direction, with the
direction updated through the low-rank product B @ A:

    W' = m * (W0 + B @ A) / max(rownorm(W0 + B @ A), 1e-8)

Adapter matrices follow the output-by-input convention (rows are output
features), so magnitudes and norms are per row as stored. Encoder weights
are stored input-by-output, which is why attachment points at the
transpose; the two views describe the same per-output-feature quantity.
"""

import dataclasses
import re
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, ContractError
from .tensor import Tensor, add, clamp_min, div, matmul, mul, reshape, sqrt, transpose, tsum

ROW_NORM_EPS = 1e-8

ADAPTER_ROLES = ("wq", "wk", "wv", "wo", "w1", "w2")

_LAYER_RE = re.compile(r"^layer(\d+)\.")


@dataclass(frozen=True)
class AdapterTargets:
    """Which weight-matrix roles receive adapters; defaults to all six."""

    roles: tuple = ADAPTER_ROLES

    def __post_init__(self):
        roles = tuple(self.roles)
        if not roles:
            raise ConfigError("adapter targets must be non-empty when DoRA is enabled")
        unknown = [r for r in roles if r not in ADAPTER_ROLES]
        if unknown:
            raise ConfigError(f"unknown adapter target roles: {unknown}")
        if len(set(roles)) != len(roles):
            raise ConfigError("duplicate adapter target roles")
        object.__setattr__(self, "roles", roles)


@dataclass
class DoraAdapter:
    """Magnitude vector plus low-rank direction update for one base matrix."""

    base_name: str
    A: Tensor  # rank x d_in
    B: Tensor  # d_out x rank
    m: Tensor  # d_out
    rank: int


@dataclass
class FreezeSpec:
    """How many lower layers to exclude from optimization.

    Embeddings freeze by default whenever any layer does.
    """

    n_frozen_layers: int = 0
    freeze_embeddings: bool = None

    def __post_init__(self):
        if self.n_frozen_layers < 0:
            raise ConfigError("n_frozen_layers must be non-negative")

    @property
    def embeddings_frozen(self) -> bool:
        if self.freeze_embeddings is None:
            return self.n_frozen_layers > 0
        return self.freeze_embeddings


def _base_data(w0) -> np.ndarray:
    return w0.data if isinstance(w0, Tensor) else np.asarray(w0, dtype=np.float32)


def dora_init(w0, rank: int, rng=None, base_name: str = "") -> DoraAdapter:
    """Identity-initialized adapter: B = 0, m = per-row L2 norms of W0,
    A uniform in [-1/sqrt(d_in), 1/sqrt(d_in)]."""
    w0 = _base_data(w0)
    if w0.ndim != 2:
        raise ConfigError("DoRA adapts 2-D matrices only")
    d_out, d_in = w0.shape
    if not 1 <= rank <= min(d_out, d_in):
        raise ConfigError(f"rank {rank} out of range for a {d_out}x{d_in} matrix")
    rng = np.random.default_rng(rng if rng is not None else 0)
    bound = 1.0 / np.sqrt(d_in)
    a = rng.uniform(-bound, bound, size=(rank, d_in)).astype(np.float32)
    b = np.zeros((d_out, rank), dtype=np.float32)
    m = np.sqrt((w0 * w0).sum(axis=1))
    return DoraAdapter(
        base_name=base_name,
        A=Tensor(a, requires_grad=True),
        B=Tensor(b, requires_grad=True),
        m=Tensor(m, requires_grad=True),
        rank=rank,
    )


def dora_effective(w0, adapter: DoraAdapter) -> Tensor:
    """m * (W0 + B@A) / max(rownorm, eps), differentiable in A, B, m only.

    The row norm is computed as sqrt(max(sum-of-squares, eps^2)), which
    equals max(rownorm, eps) exactly while keeping the backward pass finite
    on all-zero rows.
    """
    base = Tensor(_base_data(w0), requires_grad=False)
    d_out = base.shape[0]
    directed = add(base, matmul(adapter.B, adapter.A))
    sum_sq = tsum(mul(directed, directed), axis=1, keepdims=True)
    norm = sqrt(clamp_min(sum_sq, ROW_NORM_EPS * ROW_NORM_EPS))
    return mul(reshape(adapter.m, (d_out, 1)), div(directed, norm))


def dora_merge(w0, adapter: DoraAdapter) -> np.ndarray:
    """Fold the adapter into a plain weight numerically equal to
    dora_effective; the adapter is discarded by the caller."""
    return dora_effective(w0, adapter).data.copy()


def infer_n_layers(weights) -> int:
    """Number of encoder layers present in a weight dict."""
    top = -1
    for name in weights:
        match = _LAYER_RE.match(name)
        if match:
            top = max(top, int(match.group(1)))
    return top + 1


def apply_freeze(weights, spec: FreezeSpec):
    """Names of the trainable parameters, in weight-dict order.

    Frozen layers 0..k-1 (and embeddings when flagged) are excluded
    entirely; everything else, including adapter tensors, passes through.
    """
    n_layers = infer_n_layers(weights)
    if spec.n_frozen_layers > n_layers:
        raise ConfigError(
            f"cannot freeze {spec.n_frozen_layers} layers of a {n_layers}-layer model"
        )
    frozen_prefixes = tuple(f"layer{i}." for i in range(spec.n_frozen_layers))
    trainable = []
    for name in weights:
        if spec.embeddings_frozen and name in ("tok_emb", "pos_emb"):
            continue
        if name.startswith(frozen_prefixes):
            continue
        trainable.append(name)
    return trainable


def attach_adapters(weights, config, rank: int, targets: AdapterTargets, freeze: FreezeSpec, rng=None):
    """Create identity-initialized adapters on every targeted matrix of the
    non-frozen layers; returns a dict keyed by base weight name.

    Base matrices are stored input-by-output, so each adapter is built over
    the transpose to keep magnitudes per output feature.
    """
    n_layers = infer_n_layers(weights)
    if freeze.n_frozen_layers > n_layers:
        raise ConfigError(
            f"cannot freeze {freeze.n_frozen_layers} layers of a {n_layers}-layer model"
        )
    rng = np.random.default_rng(rng if rng is not None else 0)
    adapters = {}
    for i in range(freeze.n_frozen_layers, n_layers):
        for role in ADAPTER_ROLES:
            if role not in targets.roles:
                continue
            name = f"layer{i}.{role}"
            base = np.ascontiguousarray(np.asarray(weights[name]).T)
            adapters[name] = dora_init(base, rank, rng=rng, base_name=name)
    return adapters


def adapted_forward_weights(weights, adapters):
    """Weight dict for the forward pass with adapted matrices replaced by
    their effective values (tape-recorded, so gradients reach A, B, m)."""
    if not adapters:
        return weights
    out = dict(weights)
    for name, adapter in adapters.items():
        base_t = np.ascontiguousarray(np.asarray(_raw(weights[name])).T)
        out[name] = transpose(dora_effective(base_t, adapter), (1, 0))
    return out


def _raw(w):
    return w.data if isinstance(w, Tensor) else w


def adapter_tensors(adapters) -> dict:
    """Flatten adapters into checkpoint tensors under the 'adapter.' prefix."""
    flat = {}
    for name in adapters:
        ad = adapters[name]
        flat[f"adapter.{name}.A"] = ad.A.data
        flat[f"adapter.{name}.B"] = ad.B.data
        flat[f"adapter.{name}.m"] = ad.m.data
    return flat


def adapters_from_checkpoint(ckpt: Checkpoint) -> dict:
    """Rebuild trainable DoraAdapter objects from 'adapter.*' tensors."""
    dora_info = ckpt.extra.get("dora")
    if not dora_info:
        return {}
    rank = int(dora_info["rank"])
    bases = sorted(
        {name[len("adapter.") : -2] for name in ckpt.tensors if name.startswith("adapter.")}
    )
    adapters = {}
    for base in bases:
        adapters[base] = DoraAdapter(
            base_name=base,
            A=Tensor(ckpt.tensors[f"adapter.{base}.A"].copy(), requires_grad=True),
            B=Tensor(ckpt.tensors[f"adapter.{base}.B"].copy(), requires_grad=True),
            m=Tensor(ckpt.tensors[f"adapter.{base}.m"].copy(), requires_grad=True),
            rank=rank,
        )
    return adapters


def merge_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    """Fold any adapters into the base weights; parameter count returns to
    the base count and FLOPs/token match the never-adapted model."""
    adapters = adapters_from_checkpoint(ckpt)
    tensors = {}
    for name, arr in ckpt.tensors.items():
        if name.startswith("adapter."):
            continue
        if name in adapters:
            base_t = np.ascontiguousarray(arr.T)
            tensors[name] = np.ascontiguousarray(dora_merge(base_t, adapters[name]).T)
        else:
            tensors[name] = arr.copy()
    extra = {k: v for k, v in ckpt.extra.items() if k != "dora"}
    return Checkpoint(config=ckpt.config, tensors=tensors, extra=extra)


def weight_average(checkpoints) -> Checkpoint:
    """Elementwise arithmetic mean of every named tensor across checkpoints.

    Per-element values are sorted before summation, so the result is
    bitwise invariant to the order of the input list.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ContractError("weight_average requires at least one checkpoint")
    first = checkpoints[0]
    first_cfg = dataclasses.asdict(first.config)
    for ck in checkpoints[1:]:
        if dataclasses.asdict(ck.config) != first_cfg:
            raise ContractError("checkpoint configs differ; cannot average")
    names = list(first.tensors)
    for ck in checkpoints[1:]:
        other = list(ck.tensors)
        for mine, theirs in zip(names, other):
            if mine != theirs:
                raise ContractError(f"tensor manifests differ at {mine!r} vs {theirs!r}")
        if len(other) != len(names):
            longer = other if len(other) > len(names) else names
            raise ContractError(f"tensor manifests differ at {longer[min(len(other), len(names))]!r}")
    for name in names:
        if name.startswith("adapter."):
            raise ContractError(f"unmerged adapter tensor {name!r}; merge before averaging")
        shapes = {ck.tensors[name].shape for ck in checkpoints}
        if len(shapes) > 1:
            raise ContractError(f"tensor {name!r} has mismatched shapes {sorted(shapes)}")

    n = len(checkpoints)
    tensors = {}
    for name in names:
        stacked = np.stack([ck.tensors[name] for ck in checkpoints]).astype(np.float64)
        stacked.sort(axis=0)
        tensors[name] = (stacked.sum(axis=0) / n).astype(np.float32)

    extra = {}
    vocabs = [ck.extra.get("vocab") for ck in checkpoints]
    if any(v != vocabs[0] for v in vocabs):
        raise ContractError("checkpoint vocabularies differ; cannot average")
    if vocabs[0] is not None:
        extra["vocab"] = vocabs[0]
    templates = [ck.extra.get("template") for ck in checkpoints]
    if templates[0] is not None and all(t == templates[0] for t in templates):
        extra["template"] = templates[0]
    extra["averaged_from"] = n
    return Checkpoint(config=first.config, tensors=tensors, extra=extra)
