"""Decoupled AdamW, the linear schedule, the three preference objectives,
the epoch loop, seeded random hyperparameter search, and all-at-once
multi-domain training.

Training is deterministic given the config seed: one seed sequence is
spawned into independent streams for weight init, adapter init, per-pair
order draws, and batch shuffling, so repeated runs produce bitwise-equal
checkpoints and traces.
"""

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import Checkpoint
from .data import (
    DOMAIN_PREFIXES,
    ORDER_ORIGINAL,
    ORDER_SWAPPED,
    PREFIX_POOL,
    ClozeTemplate,
    build_cloze,
    build_pooled,
    build_token_level,
    build_tokenizer,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    ShapeError,
    SkipRecord,
)
from .model import (
    HEAD_MLM,
    HEAD_POOLED,
    HEAD_TOKEN,
    ModelConfig,
    forward_mlm,
    forward_mlm_batch,
    forward_pooled,
    forward_pooled_batch,
    forward_token_batch,
    forward_token_labels,
    init_weights,
)
from .peft import (
    AdapterTargets,
    FreezeSpec,
    adapted_forward_weights,
    adapter_tensors,
    apply_freeze,
    attach_adapters,
    dora_merge,
    merge_checkpoint,
)
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    bce_with_logits,
    cross_entropy_at_mask,
    cross_entropy_rows,
    gather_rows,
    mul,
    reshape,
    tsum,
)
from .tokenizer import Tokenizer

OBJECTIVES = ("cloze", "pooled", "token-level")
_OBJECTIVE_HEADS = {
    "cloze": HEAD_MLM,
    "pooled": HEAD_POOLED,
    "token-level": HEAD_TOKEN,
}

ORDER_POLICIES = ("fixed", "shuffled")


@dataclass
class ModelSettings:
    """Encoder dimensions for a run; the head is picked by the objective."""

    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 4
    ffn_mult: int = 4
    max_seq: int = 64
    pooling: str = "cls"


@dataclass
class DoraSettings:
    rank: int = 8
    targets: AdapterTargets = field(default_factory=AdapterTargets)

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("dora rank must be at least 1")


@dataclass
class TrainConfig:
    learning_rate: float
    weight_decay: float = 1e-5
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0
    freeze: FreezeSpec = field(default_factory=FreezeSpec)
    dora: "DoraSettings | None" = None
    objective: str = "cloze"
    prefix: str = PREFIX_POOL[0]
    order_policy: str = "shuffled"
    model: ModelSettings = field(default_factory=ModelSettings)
    clip_norm: "float | None" = None
    eval_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.order_policy not in ORDER_POLICIES:
            raise ConfigError(f"unknown order_policy {self.order_policy!r}")
        if not self.prefix:
            raise ConfigError("prefix must be non-empty")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive when set")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be non-negative")


def model_config_for(settings: ModelSettings, objective: str, vocab_size: int) -> ModelConfig:
    head = _OBJECTIVE_HEADS[objective]
    return ModelConfig(
        n_layers=settings.n_layers,
        hidden=settings.hidden,
        n_heads=settings.n_heads,
        vocab_size=vocab_size,
        max_seq=settings.max_seq,
        ffn_mult=settings.ffn_mult,
        head_kind=head,
        pooling=settings.pooling if head == HEAD_POOLED else None,
    )


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state: OptimizerState, lr_t: float, weight_decay: float):
    """One bias-corrected Adam update followed by decoupled decay
    p *= (1 - lr_t * wd), all in place at each parameter's own dtype.

    Parameters absent from `grads` see a zero gradient (their Adam update
    is exactly zero; decay still applies). Frozen tensors are simply not
    in `params`.
    """
    if lr_t < 0:
        raise ContractError("lr_t must be non-negative")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        else:
            g = np.asarray(g, dtype=p.dtype)
            if g.shape != p.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} does not match parameter {name!r} shape {p.shape}"
                )
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            v = state.v[name] = np.zeros_like(p)
        else:
            v = state.v[name]
        np.multiply(m, state.beta1, out=m)
        m += (1.0 - state.beta1) * g
        np.multiply(v, state.beta2, out=v)
        v += (1.0 - state.beta2) * (g * g)
        p -= lr_t * ((m / bc1) / (np.sqrt(v / bc2) + state.eps))
        if weight_decay:
            p *= 1.0 - lr_t * weight_decay
    return params, state


def lr_linear(step: int, total_steps: int, lr_max: float) -> float:
    """Linear decay from lr_max at step 0 to zero at step == total_steps."""
    if total_steps < 1:
        raise ContractError("total_steps must be at least 1")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr_max * (1.0 - step / total_steps)


def loss_cloze(weights, config: ModelConfig, instance) -> Tensor:
    """Full-vocabulary cross-entropy at the mask against the gold verbalizer."""
    if config.head_kind != HEAD_MLM:
        raise ContractError(f"cloze loss needs head {HEAD_MLM!r}, got {config.head_kind!r}")
    logits = forward_mlm(weights, config, instance.token_ids, instance.mask_position)
    return cross_entropy_at_mask(logits, instance.gold)


def loss_pooled(weights, config: ModelConfig, instance) -> Tensor:
    """Two-way cross-entropy on the pooled representation; class 0 means
    Option 1 is the better response."""
    if config.head_kind != HEAD_POOLED:
        raise ContractError(f"pooled loss needs head {HEAD_POOLED!r}, got {config.head_kind!r}")
    logits = forward_pooled(weights, config, instance.token_ids)
    return cross_entropy_at_mask(logits, instance.label)


def loss_token_level(weights, config: ModelConfig, chosen_tokens, rejected_tokens) -> Tensor:
    """Mean binary cross-entropy over both response spans: label 1 on every
    chosen-response token, 0 on every rejected-response token.

    Each argument is a (token_ids, (start, end)) pair; scaffold tokens
    outside the span carry no loss.
    """
    if config.head_kind != HEAD_TOKEN:
        raise ContractError(f"token-level loss needs head {HEAD_TOKEN!r}, got {config.head_kind!r}")
    terms = []
    n_total = 0
    for (ids, span), label in ((chosen_tokens, 1.0), (rejected_tokens, 0.0)):
        start, end = span
        if end <= start:
            raise ContractError("empty response span")
        scores = forward_token_labels(weights, config, ids)
        sel = gather_rows(reshape(scores, (len(ids), 1)), np.arange(start, end))
        labels = np.full((end - start, 1), label, dtype=np.float32)
        terms.append(tsum(bce_with_logits(sel, labels)))
        n_total += end - start
    return mul(add(terms[0], terms[1]), 1.0 / n_total)


def _group_by_length(lengths):
    groups = {}
    for i, n in enumerate(lengths):
        groups.setdefault(n, []).append(i)
    return groups


def _batch_loss_cloze(weights, config, instances) -> Tensor:
    total = None
    for idxs in _group_by_length([len(x.token_ids) for x in instances]).values():
        ids = np.array([instances[i].token_ids for i in idxs], dtype=np.int64)
        pos = np.array([instances[i].mask_position for i in idxs], dtype=np.int64)
        golds = np.array([instances[i].gold for i in idxs], dtype=np.int64)
        group = tsum(cross_entropy_rows(forward_mlm_batch(weights, config, ids, pos), golds))
        total = group if total is None else add(total, group)
    return mul(total, 1.0 / len(instances))


def _batch_loss_pooled(weights, config, instances) -> Tensor:
    total = None
    for idxs in _group_by_length([len(x.token_ids) for x in instances]).values():
        ids = np.array([instances[i].token_ids for i in idxs], dtype=np.int64)
        labels = np.array([instances[i].label for i in idxs], dtype=np.int64)
        group = tsum(cross_entropy_rows(forward_pooled_batch(weights, config, ids), labels))
        total = group if total is None else add(total, group)
    return mul(total, 1.0 / len(instances))


def _batch_loss_token(weights, config, examples) -> Tensor:
    # One sequence per candidate; per-example means weighted so the batch
    # loss is the mean of per-example means, independent of span lengths.
    seqs = []
    tokens_of = []
    for ex in examples:
        for span in (ex.chosen_span, ex.rejected_span):
            if span[1] <= span[0]:
                raise ContractError("empty response span")
        tokens_of.append(
            (ex.chosen_span[1] - ex.chosen_span[0]) + (ex.rejected_span[1] - ex.rejected_span[0])
        )
        eidx = len(tokens_of) - 1
        seqs.append((ex.chosen_ids, ex.chosen_span, 1.0, eidx))
        seqs.append((ex.rejected_ids, ex.rejected_span, 0.0, eidx))
    n = len(examples)
    total = None
    for length, idxs in _group_by_length([len(s[0]) for s in seqs]).items():
        ids = np.array([seqs[i][0] for i in idxs], dtype=np.int64)
        flat = reshape(forward_token_batch(weights, config, ids), (len(idxs) * length, 1))
        gidx = []
        labels = []
        wvec = []
        for row, i in enumerate(idxs):
            _, (start, end), label, eidx = seqs[i]
            gidx.extend(range(row * length + start, row * length + end))
            labels.extend([label] * (end - start))
            wvec.extend([1.0 / (tokens_of[eidx] * n)] * (end - start))
        sel = gather_rows(flat, np.asarray(gidx, dtype=np.int64))
        bce = bce_with_logits(sel, np.asarray(labels, dtype=np.float32).reshape(-1, 1))
        group = tsum(mul(bce, np.asarray(wvec, dtype=np.float32).reshape(-1, 1)))
        total = group if total is None else add(total, group)
    return total


_BATCH_LOSS = {
    "cloze": _batch_loss_cloze,
    "pooled": _batch_loss_pooled,
    "token-level": _batch_loss_token,
}


def _build_instances(pairs, objective, tokenizer, max_seq, template_for, order_rng, order_policy, skipped=None):
    out = []
    for pair in pairs:
        template = template_for(pair)
        try:
            if objective == "token-level":
                out.append(build_token_level(pair, template, tokenizer, max_seq))
                continue
            if order_policy == "shuffled":
                order = ORDER_ORIGINAL if order_rng.random() < 0.5 else ORDER_SWAPPED
            else:
                order = ORDER_ORIGINAL
            builder = build_cloze if objective == "cloze" else build_pooled
            out.append(builder(pair, template, order, tokenizer, max_seq))
        except SkipRecord as exc:
            if skipped is not None:
                skipped.append(f"{exc.record_id}: {exc.reason}")
    return out


def plan_epoch(n_instances: int, batch_size: int, rng) -> list:
    """Shuffled batch index arrays for one epoch."""
    order = rng.permutation(n_instances)
    return [order[lo : lo + batch_size] for lo in range(0, n_instances, batch_size)]


@dataclass
class TraceRow:
    step: int
    lr: float
    loss: float
    heldout_acc: "float | None" = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list
    skipped: list


def trace_to_csv(trace) -> str:
    lines = ["step,lr,loss,heldout_acc"]
    for row in trace:
        acc = "" if row.heldout_acc is None else repr(row.heldout_acc)
        lines.append(f"{row.step},{row.lr!r},{row.loss!r},{acc}")
    return "\n".join(lines) + "\n"


def _merged_weight_arrays(wt, adapters):
    out = {name: t.data for name, t in wt.items()}
    for name, adapter in adapters.items():
        base_t = np.ascontiguousarray(out[name].T)
        out[name] = np.ascontiguousarray(dora_merge(base_t, adapter).T)
    return out


def _heldout_accuracy(wt, adapters, model_config, tokenizer, template, heldout_pairs) -> float:
    from .evaluation import EvalModel, eval_dataset

    model = EvalModel(
        config=model_config,
        weights=_merged_weight_arrays(wt, adapters),
        tokenizer=tokenizer,
        template=template,
    )
    return eval_dataset(model, heldout_pairs).total_accuracy


def _clip_global_norm(grads, max_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = np.float32(max_norm / norm)
        for g in grads.values():
            g *= scale
    return norm


def train(config: TrainConfig, pairs, heldout=None, init_from=None, _prefix_fn=None) -> TrainResult:
    """Train one model over the pair list; deterministic given config.seed.

    heldout: optional pair list scored at eval_every steps and at the final
    step (accuracy lands in the trace). init_from: checkpoint to continue
    from (any adapters in it are merged first); its stored vocabulary is
    reused, so new text falls back to UNK.
    """
    pairs = list(pairs)
    if not pairs:
        raise ConfigError("training dataset is empty")
    head = _OBJECTIVE_HEADS[config.objective]
    settings = config.model

    ss = np.random.SeedSequence(config.seed)
    init_ss, dora_ss, order_ss, shuffle_ss = ss.spawn(4)

    base_template = ClozeTemplate(prefix=config.prefix)
    if _prefix_fn is None:
        template_for = lambda pair: base_template  # noqa: E731
    else:
        cache = {}

        def template_for(pair):
            prefix = _prefix_fn(pair)
            if prefix not in cache:
                cache[prefix] = ClozeTemplate(prefix=prefix)
            return cache[prefix]

    if init_from is not None:
        base_ckpt = merge_checkpoint(init_from)
        vocab = base_ckpt.extra.get("vocab")
        if not vocab:
            raise ContractError("init checkpoint lacks a stored vocabulary")
        tokenizer = Tokenizer(list(vocab))
        model_config = base_ckpt.config
        want = (settings.n_layers, settings.hidden, settings.n_heads, settings.ffn_mult, settings.max_seq)
        got = (model_config.n_layers, model_config.hidden, model_config.n_heads,
               model_config.ffn_mult, model_config.max_seq)
        if want != got:
            raise ConfigError(f"init checkpoint model {got} does not match configured model {want}")
        if model_config.head_kind != head:
            raise ConfigError(
                f"init checkpoint head {model_config.head_kind!r} does not match objective {config.objective!r}"
            )
        weights_np = {name: arr.copy() for name, arr in base_ckpt.tensors.items()}
    else:
        tokenizer = build_tokenizer(pairs)
        model_config = model_config_for(settings, config.objective, len(tokenizer))
        weights_np = init_weights(model_config, seed=init_ss)

    adapters = {}
    if config.dora is not None:
        adapters = attach_adapters(
            weights_np, model_config, config.dora.rank, config.dora.targets, config.freeze, rng=dora_ss
        )

    # The optimizer manifest: non-frozen base tensors (minus adapted ones,
    # whose updates flow through their adapters) plus adapter tensors.
    trainable = [n for n in apply_freeze(weights_np, config.freeze) if n not in adapters]
    trainset = set(trainable)
    wt = {name: Tensor(arr, requires_grad=name in trainset) for name, arr in weights_np.items()}
    opt_params = {name: wt[name].data for name in trainable}
    param_tensors = {name: wt[name] for name in trainable}
    for base_name, adapter in adapters.items():
        for suffix, t in (("A", adapter.A), ("B", adapter.B), ("m", adapter.m)):
            pname = f"adapter.{base_name}.{suffix}"
            opt_params[pname] = t.data
            param_tensors[pname] = t
    if not opt_params:
        raise ConfigError("nothing to train: every parameter is frozen")

    state = OptimizerState()
    order_rng = np.random.default_rng(order_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    batch_loss = _BATCH_LOSS[config.objective]

    trace = []
    skipped = []
    step = 0
    total_steps = None
    for epoch in range(config.epochs):
        instances = _build_instances(
            pairs, config.objective, tokenizer, model_config.max_seq,
            template_for, order_rng, config.order_policy,
            skipped if epoch == 0 else None,
        )
        if not instances:
            raise DataError("every training record was skipped", skipped)
        if total_steps is None:
            total_steps = math.ceil(len(instances) / config.batch_size) * config.epochs
        for batch_idx in plan_epoch(len(instances), config.batch_size, shuffle_rng):
            batch = [instances[i] for i in batch_idx]
            lr_t = lr_linear(step, total_steps, config.learning_rate)
            with Tape() as tape:
                eff = adapted_forward_weights(wt, adapters) if adapters else wt
                loss = batch_loss(eff, model_config, batch)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise DivergenceError(f"training loss became non-finite at step {step}")
            backward(tape, loss)
            grads = {name: t.grad for name, t in param_tensors.items() if t.grad is not None}
            if config.clip_norm is not None:
                _clip_global_norm(grads, config.clip_norm)
            adamw_step(opt_params, grads, state, lr_t, config.weight_decay)
            for t in param_tensors.values():
                t.grad = None
            acc = None
            is_last = step + 1 == total_steps
            if heldout is not None and (
                is_last or (config.eval_every > 0 and (step + 1) % config.eval_every == 0)
            ):
                acc = _heldout_accuracy(wt, adapters, model_config, tokenizer, base_template, heldout)
            trace.append(TraceRow(step=step, lr=lr_t, loss=loss_value, heldout_acc=acc))
            step += 1

    tensors = {name: t.data.copy() for name, t in wt.items()}
    for name, arr in adapter_tensors(adapters).items():
        tensors[name] = arr.copy()
    extra = {
        "vocab": list(tokenizer.tokens),
        "template": {"layout": base_template.layout, "prefix": base_template.prefix},
        "objective": config.objective,
        "train": {
            "learning_rate": config.learning_rate,
            "weight_decay": config.weight_decay,
            "batch_size": config.batch_size,
            "epochs": config.epochs,
            "seed": config.seed,
            "order_policy": config.order_policy,
            "n_pairs": len(pairs),
            "n_skipped": len(skipped),
            "total_steps": total_steps,
            "n_frozen_layers": config.freeze.n_frozen_layers,
        },
    }
    if adapters:
        extra["dora"] = {"rank": config.dora.rank, "targets": list(config.dora.targets.roles)}
    ckpt = Checkpoint(config=model_config, tensors=tensors, extra=extra)
    return TrainResult(checkpoint=ckpt, trace=trace, skipped=skipped)


@dataclass
class SweepSpec:
    """Seeded random search over the four tuned knobs."""

    base: TrainConfig
    trials: int = 8
    seed: int = 0
    lr_min: float = 1e-4
    lr_max: float = 1e-2
    ranks: tuple = (0, 4, 8)  # 0 means no adapters
    frozen_min: int = 0
    frozen_max: int = 0
    prefixes: tuple = PREFIX_POOL
    heldout_fraction: float = 0.2

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError("need 0 < lr_min <= lr_max")
        if not self.ranks or any(r < 0 for r in self.ranks):
            raise ConfigError("ranks must be a non-empty set of non-negative ints")
        if not 0 <= self.frozen_min <= self.frozen_max:
            raise ConfigError("need 0 <= frozen_min <= frozen_max")
        if not self.prefixes:
            raise ConfigError("prefix pool must be non-empty")
        if not 0 < self.heldout_fraction < 1:
            raise ConfigError("heldout_fraction must be in (0, 1)")


@dataclass
class TrialDraw:
    learning_rate: float
    dora_rank: int
    frozen_layers: int
    prefix: str


@dataclass
class TrialResult:
    index: int
    learning_rate: float
    dora_rank: int
    frozen_layers: int
    prefix: str
    accuracy: float
    gflops_per_token: float
    n_train: int
    n_eval: int


def sample_trial_configs(spec: SweepSpec) -> list:
    """The deterministic trial draws: log-uniform lr, choice of rank and
    prefix, uniform integer frozen-layer count."""
    rng = np.random.default_rng(spec.seed)
    draws = []
    for _ in range(spec.trials):
        lr = float(np.exp(rng.uniform(np.log(spec.lr_min), np.log(spec.lr_max))))
        rank = int(spec.ranks[rng.integers(len(spec.ranks))])
        frozen = int(rng.integers(spec.frozen_min, spec.frozen_max + 1))
        prefix = str(spec.prefixes[rng.integers(len(spec.prefixes))])
        draws.append(TrialDraw(lr, rank, frozen, prefix))
    return draws


def trial_config(spec: SweepSpec, draw: TrialDraw) -> TrainConfig:
    dora = DoraSettings(rank=draw.dora_rank) if draw.dora_rank > 0 else None
    return replace(
        spec.base,
        learning_rate=draw.learning_rate,
        prefix=draw.prefix,
        freeze=FreezeSpec(n_frozen_layers=draw.frozen_layers),
        dora=dora,
    )


def sweep(spec: SweepSpec, pairs) -> list:
    """Train and evaluate each sampled trial on a seeded held-out split;
    rows sorted by accuracy desc, then GFLOPs/token asc, then trial index.

    The split stream is separate from the draw stream so adding trials
    never changes the split.
    """
    from .evaluation import EvalModel, eval_dataset

    pairs = list(pairs)
    if len(pairs) < 2:
        raise ConfigError("sweep needs at least 2 pairs to split")
    draws = sample_trial_configs(spec)
    split_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    perm = split_rng.permutation(len(pairs))
    n_eval = max(1, int(round(spec.heldout_fraction * len(pairs))))
    n_eval = min(n_eval, len(pairs) - 1)
    eval_pairs = [pairs[i] for i in perm[:n_eval]]
    train_pairs = [pairs[i] for i in perm[n_eval:]]

    results = []
    for index, draw in enumerate(draws):
        cfg = trial_config(spec, draw)
        run = train(cfg, train_pairs)
        model = EvalModel.from_checkpoint(run.checkpoint)
        report = eval_dataset(model, eval_pairs, template=ClozeTemplate(prefix=draw.prefix))
        results.append(
            TrialResult(
                index=index,
                learning_rate=draw.learning_rate,
                dora_rank=draw.dora_rank,
                frozen_layers=draw.frozen_layers,
                prefix=draw.prefix,
                accuracy=report.total_accuracy,
                gflops_per_token=report.gflops_per_token,
                n_train=len(train_pairs),
                n_eval=len(eval_pairs),
            )
        )
    results.sort(key=lambda r: (-r.accuracy, r.gflops_per_token, r.index))
    return results


def trials_to_csv(results) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["trial", "learning_rate", "dora_rank", "frozen_layers", "prefix",
         "accuracy", "gflops_per_token", "n_train", "n_eval"]
    )
    for r in results:
        writer.writerow(
            [r.index, repr(r.learning_rate), r.dora_rank, r.frozen_layers, r.prefix,
             repr(r.accuracy), repr(r.gflops_per_token), r.n_train, r.n_eval]
        )
    return buf.getvalue()


def train_aao(config: TrainConfig, datasets_by_domain, heldout=None) -> TrainResult:
    """All-at-once run: concatenate every domain's pairs (keys in sorted
    order), render each pair with its own domain's tuned prefix, and train
    as a single globally shuffled run."""
    if len(datasets_by_domain) < 2:
        raise ConfigError("all-at-once training needs at least 2 domains")
    all_pairs = []
    for key in sorted(datasets_by_domain):
        all_pairs.extend(datasets_by_domain[key])

    def prefix_for(pair):
        return DOMAIN_PREFIXES[pair.domain]

    return train(config, all_pairs, heldout=heldout, _prefix_fn=prefix_for)
