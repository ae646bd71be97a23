"""Pairwise preference scoring, category aggregation, the FLOPs cost
model, accuracy/cost tradeoff emission, and the three-objective
comparison report.

Every pair is evaluated in BOTH option orders, each order counting as one
trial; a trial is correct when the prediction names whichever option slot
holds the chosen response, and ties (|p1 - p2| < 1e-9) count 0.5. A
constant-prediction model therefore lands at exactly 0.5, and
position bias = |acc_original - acc_swapped| is reported first class.
"""

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import Checkpoint
from .data import (
    DOMAINS,
    ORDERS,
    ORDER_ORIGINAL,
    PREFIX_POOL,
    ClozeTemplate,
    build_cloze,
    build_pooled,
    build_token_level,
)
from .errors import ConfigError, ContractError, SkipRecord
from .model import (
    HEAD_MLM,
    HEAD_POOLED,
    HEAD_TOKEN,
    count_params,
    forward_mlm,
    forward_pooled,
    forward_token_labels,
)
from .peft import merge_checkpoint
from .tensor import Tensor
from .tokenizer import VERB1_ID, VERB2_ID, Tokenizer

TIE_EPS = 1e-9


@dataclass
class ScoreResult:
    """Restricted two-verbalizer probabilities for one rendered instance."""

    p1: float
    p2: float
    prediction: str  # "1" | "2" | "tie"
    source_id: str
    order: str


@dataclass
class TrialRecord:
    """One order of one pair: the scored unit accuracy is counted over."""

    source_id: str
    domain: str
    order: str
    p1: float
    p2: float
    prediction: str
    gold: str  # "1" | "2": which option slot holds the chosen response


@dataclass
class EvalReport:
    chat: "float | None"
    reasoning: "float | None"
    safety: "float | None"
    overall: float
    position_bias: float
    n: dict
    gflops_per_token: float
    total_accuracy: float
    chat_subscores: "list | None" = None
    n_skipped: int = 0


@dataclass
class TradeoffPoint:
    label: str
    gflops_per_token: float
    accuracy: float


@dataclass
class EvalModel:
    """A merged, inference-only model bundle."""

    config: object
    weights: dict
    tokenizer: Tokenizer
    template: ClozeTemplate

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "EvalModel":
        merged = merge_checkpoint(ckpt)
        vocab = merged.extra.get("vocab")
        if not vocab:
            raise ContractError("checkpoint lacks a stored vocabulary")
        info = merged.extra.get("template") or {}
        template = ClozeTemplate(
            prefix=info.get("prefix", PREFIX_POOL[0]),
            layout=info.get("layout", ClozeTemplate.__dataclass_fields__["layout"].default),
        )
        return cls(
            config=merged.config,
            weights=merged.tensors,
            tokenizer=Tokenizer(list(vocab)),
            template=template,
        )


def _two_way(l1: float, l2: float):
    """Two-way softmax in float64 with max subtraction."""
    m = l1 if l1 >= l2 else l2
    e1 = math.exp(l1 - m)
    e2 = math.exp(l2 - m)
    z = e1 + e2
    return e1 / z, e2 / z


def _predict(p1: float, p2: float) -> str:
    if abs(p1 - p2) < TIE_EPS:
        return "tie"
    return "1" if p1 > p2 else "2"


def score_pair(model: EvalModel, instance) -> ScoreResult:
    """Full-vocab logits at the mask, renormalized over the two verbalizer
    tokens only."""
    if model.config.head_kind != HEAD_MLM:
        raise ContractError(f"score_pair needs head {HEAD_MLM!r}, got {model.config.head_kind!r}")
    logits = forward_mlm(model.weights, model.config, instance.token_ids, instance.mask_position).data
    p1, p2 = _two_way(float(logits[VERB1_ID]), float(logits[VERB2_ID]))
    return ScoreResult(p1=p1, p2=p2, prediction=_predict(p1, p2),
                       source_id=instance.source_id, order=instance.order)


def _sigmoid_logit_mean(scores: Tensor, span) -> float:
    start, end = span
    if end <= start:
        raise ContractError("empty response span")
    return float(np.asarray(scores.data, dtype=np.float64)[start:end].mean())


def _trials_for_pair(model: EvalModel, pair, template: ClozeTemplate):
    head = model.config.head_kind
    max_seq = model.config.max_seq
    trials = []
    if head == HEAD_MLM:
        for order in ORDERS:
            inst = build_cloze(pair, template, order, model.tokenizer, max_seq)
            s = score_pair(model, inst)
            gold = "1" if order == ORDER_ORIGINAL else "2"
            trials.append(TrialRecord(pair.id, pair.domain, order, s.p1, s.p2, s.prediction, gold))
    elif head == HEAD_POOLED:
        for order in ORDERS:
            inst = build_pooled(pair, template, order, model.tokenizer, max_seq)
            logits = forward_pooled(model.weights, model.config, inst.token_ids).data
            # class 0 means "Option 1 is the better response"
            p1, p2 = _two_way(float(logits[0]), float(logits[1]))
            gold = "1" if order == ORDER_ORIGINAL else "2"
            trials.append(TrialRecord(pair.id, pair.domain, order, p1, p2, _predict(p1, p2), gold))
    elif head == HEAD_TOKEN:
        ex = build_token_level(pair, template, model.tokenizer, max_seq)
        s_chosen = _sigmoid_logit_mean(
            forward_token_labels(model.weights, model.config, ex.chosen_ids), ex.chosen_span
        )
        s_rejected = _sigmoid_logit_mean(
            forward_token_labels(model.weights, model.config, ex.rejected_ids), ex.rejected_span
        )
        for order in ORDERS:
            if order == ORDER_ORIGINAL:
                p1, p2 = _two_way(s_chosen, s_rejected)
                gold = "1"
            else:
                p1, p2 = _two_way(s_rejected, s_chosen)
                gold = "2"
            trials.append(TrialRecord(pair.id, pair.domain, order, p1, p2, _predict(p1, p2), gold))
    else:
        raise ContractError(f"unknown head kind {head!r}")
    return trials


def _credit(trial: TrialRecord) -> float:
    if trial.prediction == "tie":
        return 0.5
    return 1.0 if trial.prediction == trial.gold else 0.0


def aggregate_trials(trials, gflops_per_token: float = 0.0, n_skipped: int = 0) -> EvalReport:
    """Fold trial records into the report; overall is the unweighted mean
    of whichever of the three categories are present."""
    trials = list(trials)
    if not trials:
        raise ContractError("no trials to aggregate")
    by_domain = {d: [] for d in DOMAINS}
    by_order = {}
    credits = []
    for t in trials:
        if t.domain not in by_domain:
            raise ContractError(f"unknown domain {t.domain!r}")
        c = _credit(t)
        by_domain[t.domain].append(c)
        by_order.setdefault(t.order, []).append(c)
        credits.append(c)
    acc = {
        d: (sum(v) / len(v) if v else None) for d, v in by_domain.items()
    }
    present = [a for a in acc.values() if a is not None]
    order_acc = {o: sum(v) / len(v) for o, v in by_order.items()}
    if len(order_acc) == 2:
        a, b = sorted(order_acc)
        bias = abs(order_acc[a] - order_acc[b])
    else:
        bias = 0.0
    return EvalReport(
        chat=acc["chat"],
        reasoning=acc["reasoning"],
        safety=acc["safety"],
        overall=sum(present) / len(present),
        position_bias=bias,
        n={d: len(v) for d, v in by_domain.items()},
        gflops_per_token=gflops_per_token,
        total_accuracy=sum(credits) / len(credits),
        n_skipped=n_skipped,
    )


def eval_dataset(model: EvalModel, pairs, template: "ClozeTemplate | None" = None) -> EvalReport:
    """Score every pair in both orders and aggregate. Pairs whose options
    cannot fit the model's max_seq are skipped and counted."""
    pairs = list(pairs)
    if not pairs:
        raise ContractError("evaluation dataset is empty")
    template = template or model.template
    trials = []
    n_skipped = 0
    for pair in pairs:
        try:
            trials.extend(_trials_for_pair(model, pair, template))
        except SkipRecord:
            n_skipped += 1
    if not trials:
        raise ContractError("every evaluation pair was skipped")
    cfg = model.config
    gflops = flops_per_token(count_params(cfg), cfg.n_layers, cfg.hidden) / 1e9
    return aggregate_trials(trials, gflops_per_token=gflops, n_skipped=n_skipped)


def aggregate_chat(sub_scores) -> float:
    """Weighted mean over (accuracy, n) sub-splits."""
    sub_scores = list(sub_scores)
    if not sub_scores:
        raise ContractError("aggregate_chat needs at least one sub-score")
    total_n = 0
    total = 0.0
    for acc, n in sub_scores:
        if n < 1:
            raise ContractError("every sub-score needs n >= 1")
        total += acc * n
        total_n += n
    return total / total_n


def overall(chat: float, reasoning: float, safety: float) -> float:
    """Unweighted mean of the three category accuracies; accepts either
    fractions in [0, 1] or percentage points in [0, 100]."""
    for v in (chat, reasoning, safety):
        if not 0.0 <= v <= 100.0:
            raise ContractError(f"accuracy {v} outside [0, 100]")
    return (chat + reasoning + safety) / 3.0


def format_score(value: float) -> str:
    """One-decimal display convention for table scores."""
    return f"{value:.1f}"


def flops_per_token(n_params: int, n_layers: int, hidden: int) -> float:
    """2N + 6N*L/H in exact float64 arithmetic.

    n_layers 0 is allowed and degenerates to the 2N embedding-only cost.
    """
    if n_params <= 0:
        raise ContractError("n_params must be positive")
    if hidden <= 0:
        raise ContractError("hidden must be positive")
    if n_layers < 0:
        raise ContractError("n_layers must be non-negative")
    return 2.0 * n_params + 6.0 * n_params * n_layers / hidden


def format_gflops(flops: float) -> str:
    """GFLOPs with 3 significant digits, trailing zeros kept
    (2.6e6 FLOPs renders as '0.00260')."""
    g = flops / 1e9
    if g <= 0:
        raise ContractError("flops must be positive")
    exponent = math.floor(math.log10(g))
    decimals = max(0, 2 - exponent)
    return f"{round(g, 2 - exponent):.{decimals}f}"


_TRADEOFF_HEADER = "label,gflops_per_token,accuracy"


def emit_tradeoff(points, path) -> None:
    """CSV of (label, gflops/token, accuracy) sorted by cost ascending."""
    from .fileio import atomic_write_text

    points = list(points)
    if not points:
        raise ContractError("emit_tradeoff needs at least one point")
    for p in points:
        if not p.label or "," in p.label or "\n" in p.label:
            raise ContractError(f"bad tradeoff label {p.label!r}")
        if p.gflops_per_token <= 0:
            raise ContractError(f"gflops_per_token must be positive for {p.label!r}")
    rows = sorted(points, key=lambda p: p.gflops_per_token)
    lines = [_TRADEOFF_HEADER]
    for p in rows:
        lines.append(f"{p.label},{p.gflops_per_token!r},{p.accuracy!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def parse_tradeoff(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines or lines[0] != _TRADEOFF_HEADER:
        raise ContractError(f"not a tradeoff CSV: {path}")
    points = []
    for line in lines[1:]:
        label, gflops, acc = line.split(",")
        points.append(TradeoffPoint(label=label, gflops_per_token=float(gflops), accuracy=float(acc)))
    return points


@dataclass
class ObjectiveRow:
    objective: str
    heldout_accuracy: float
    n_train: int
    n_heldout: int
    epochs: int
    batch_size: int
    total_steps: int
    learning_rate: float


@dataclass
class ObjectiveComparison:
    rows: list
    checkpoints: dict  # objective -> Checkpoint, for independent re-scoring


def compare_objectives(pairs, base_config, heldout_fraction: float = 0.2) -> ObjectiveComparison:
    """Train cloze, pooled, and token-level models under the same budget
    and seed on the same split, and report held-out accuracies side by
    side. No ordering judgment is made."""
    from .training import OBJECTIVES, train

    pairs = list(pairs)
    if len(pairs) < 2:
        raise ConfigError("compare_objectives needs at least 2 pairs to split")
    if not 0 < heldout_fraction < 1:
        raise ConfigError("heldout_fraction must be in (0, 1)")
    split_rng = np.random.default_rng(np.random.SeedSequence([base_config.seed, 2]))
    perm = split_rng.permutation(len(pairs))
    n_held = max(1, int(round(heldout_fraction * len(pairs))))
    n_held = min(n_held, len(pairs) - 1)
    held_pairs = [pairs[i] for i in perm[:n_held]]
    train_pairs = [pairs[i] for i in perm[n_held:]]

    rows = []
    checkpoints = {}
    for objective in OBJECTIVES:
        cfg = replace(base_config, objective=objective)
        result = train(cfg, train_pairs)
        model = EvalModel.from_checkpoint(result.checkpoint)
        report = eval_dataset(model, held_pairs)
        rows.append(
            ObjectiveRow(
                objective=objective,
                heldout_accuracy=report.total_accuracy,
                n_train=len(train_pairs),
                n_heldout=len(held_pairs),
                epochs=cfg.epochs,
                batch_size=cfg.batch_size,
                total_steps=len(result.trace),
                learning_rate=cfg.learning_rate,
            )
        )
        checkpoints[objective] = result.checkpoint
    return ObjectiveComparison(rows=rows, checkpoints=checkpoints)


def report_to_json(report: EvalReport) -> str:
    payload = {
        "chat": report.chat,
        "reasoning": report.reasoning,
        "safety": report.safety,
        "overall": report.overall,
        "position_bias": report.position_bias,
        "n": report.n,
        "gflops_per_token": report.gflops_per_token,
        "total_accuracy": report.total_accuracy,
        "chat_subscores": report.chat_subscores,
        "n_skipped": report.n_skipped,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def report_to_table(report: EvalReport) -> str:
    lines = [f"{'category':<12}{'accuracy':>10}{'trials':>8}"]
    for name, acc in (("chat", report.chat), ("reasoning", report.reasoning), ("safety", report.safety)):
        acc_s = "-" if acc is None else f"{acc:.4f}"
        lines.append(f"{name:<12}{acc_s:>10}{report.n.get(name, 0):>8}")
    lines.append(f"{'overall':<12}{report.overall:>10.4f}")
    lines.append(f"{'pos. bias':<12}{report.position_bias:>10.4f}")
    lines.append(f"{'cost':<12}{format_gflops(report.gflops_per_token * 1e9):>10} GFLOPs/token")
    if report.n_skipped:
        lines.append(f"{'skipped':<12}{report.n_skipped:>10}")
    return "\n".join(lines) + "\n"


def comparison_to_json(cmp: ObjectiveComparison) -> str:
    payload = {
        "rows": [
            {
                "objective": r.objective,
                "heldout_accuracy": r.heldout_accuracy,
                "n_train": r.n_train,
                "n_heldout": r.n_heldout,
                "epochs": r.epochs,
                "batch_size": r.batch_size,
                "total_steps": r.total_steps,
                "learning_rate": r.learning_rate,
            }
            for r in cmp.rows
        ]
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def comparison_to_table(cmp: ObjectiveComparison) -> str:
    lines = [f"{'objective':<14}{'heldout_acc':>12}{'steps':>8}{'batch':>7}{'epochs':>8}{'lr':>12}"]
    for r in cmp.rows:
        lines.append(
            f"{r.objective:<14}{r.heldout_accuracy:>12.4f}{r.total_steps:>8}"
            f"{r.batch_size:>7}{r.epochs:>8}{r.learning_rate:>12.2e}"
        )
    return "\n".join(lines) + "\n"
