"""Preference pairs, FLAN-style cloze rendering, JSONL ingestion, and
synthetic desk-scale preference tasks.

The canonical cloze layout places the problem, both options, and the
preference statement ahead of a single mask slot:

    {prefix}
    Problem: {x}
    Option 1: {a}
    Option 2: {b}
    The better response is Option [MASK].

Rendering is segment-wise so that the concatenated segment tokens equal
the tokenization of the full rendered string: a literal segment's trailing
space is absorbed into the following slot value (mirroring the lexer's
space absorption), and the mask slot stands for the space-absorbed
verbalizer token. When a rendering exceeds max_seq, the option bodies are
tail-truncated to one equal budget each; scaffold text never shrinks.
"""

import json
import random
import re
from dataclasses import dataclass

from .errors import ConfigError, ContractError, DataError, SkipRecord
from .fileio import atomic_write_text
from .tokenizer import CLS_ID, MASK_ID, VERB1_ID, VERB2_ID, Tokenizer, build_vocab

DOMAINS = ("chat", "reasoning", "safety")

ORDER_ORIGINAL = "original"
ORDER_SWAPPED = "swapped"
ORDERS = (ORDER_ORIGINAL, ORDER_SWAPPED)

# Instruction-prefix pool; per-domain entries are the tuned per-domain picks.
PREFIX_POOL = (
    "Select the best response.",
    "Which response is more correct?",
    "Which response is safer?",
    "Which response is the most helpful, relevant, and correct?",
)
DOMAIN_PREFIXES = {
    "chat": PREFIX_POOL[0],
    "reasoning": PREFIX_POOL[1],
    "safety": PREFIX_POOL[2],
}

CANONICAL_LAYOUT = (
    "{prefix}\nProblem: {x}\nOption 1: {a}\nOption 2: {b}\n"
    "The better response is Option [MASK]."
)
RESPONSE_LAYOUT = "{prefix}\nProblem: {x}\nResponse: {y}"

REFUSAL_MARKER = "I can't help with that"

_PLACEHOLDER = re.compile(r"(\{prefix\}|\{x\}|\{a\}|\{b\}|\{y\}|\[MASK\])")


@dataclass
class PreferencePair:
    """One (prompt, chosen, rejected) supervision triple with a domain tag."""

    id: str
    prompt: str
    chosen: str
    rejected: str
    domain: str

    def __post_init__(self):
        for name in ("prompt", "chosen", "rejected"):
            if not getattr(self, name):
                raise DataError(f"empty field {name}")
        if self.chosen == self.rejected:
            raise DataError("degenerate pair")
        if self.domain not in DOMAINS:
            raise DataError(f"unknown domain {self.domain!r}")


@dataclass
class ClozeTemplate:
    """An instruction prefix plus the segment layout ending in one mask slot."""

    prefix: str
    layout: str = CANONICAL_LAYOUT

    def __post_init__(self):
        if not self.prefix:
            raise ConfigError("template prefix must be non-empty")
        for token in ("{prefix}", "{x}", "{a}", "{b}", "[MASK]"):
            if self.layout.count(token) != 1:
                raise ConfigError(f"layout must contain {token} exactly once")
        mask_at = self.layout.index("[MASK]")
        if self.layout.index("{a}") > mask_at or self.layout.index("{b}") > mask_at:
            raise ConfigError("both options must appear before the mask slot")

    def pooled_layout(self) -> str:
        """The layout with the preference statement (the line holding the
        mask) removed; used by the pooled-classifier objective."""
        mask_at = self.layout.index("[MASK]")
        cut = self.layout.rfind("\n", 0, mask_at)
        if cut <= 0:
            raise ContractError("cannot derive a pooled layout: mask is on the first line")
        return self.layout[:cut]


@dataclass
class ClozeInstance:
    token_ids: list
    mask_position: int
    gold: int  # verbalizer token id
    order: str
    source_id: str


@dataclass
class PooledInstance:
    token_ids: list
    label: int  # 0 when Option 1 is the better response
    order: str
    source_id: str


@dataclass
class TokenLevelExample:
    """Two renderings of the same prompt, one per candidate response; the
    span marks which token positions belong to the response body."""

    chosen_ids: list
    chosen_span: tuple
    rejected_ids: list
    rejected_span: tuple
    source_id: str


def _parse_layout(layout: str):
    parts = []
    for i, piece in enumerate(_PLACEHOLDER.split(layout)):
        if i % 2:
            parts.append(("slot", "mask" if piece == "[MASK]" else piece[1:-1]))
        elif piece:
            parts.append(("lit", piece))
    return parts


def _render_text(parts, values, mask_fill: str) -> str:
    out = []
    for kind, val in parts:
        if kind == "lit":
            out.append(val)
        elif val == "mask":
            out.append(mask_fill)
        else:
            out.append(values[val])
    return "".join(out)


def _encode_segments(parts, values, tokenizer: Tokenizer):
    """Tokenize each layout segment, shifting a literal's trailing space
    onto the following slot so segment tokens concatenate to the
    whole-string tokenization."""
    items = [[kind, val, False] for kind, val in parts]
    for i in range(len(items) - 1):
        kind, val, _ = items[i]
        if kind == "lit" and items[i + 1][0] == "slot" and val.endswith(" "):
            items[i][1] = val[:-1]
            items[i + 1][2] = True
    segments = []
    for kind, val, lead in items:
        if kind == "lit":
            if val:
                segments.append(("lit", tokenizer.encode(val)))
        elif val == "mask":
            segments.append(("mask", [MASK_ID]))
        else:
            segments.append((val, tokenizer.encode((" " if lead else "") + values[val])))
    return segments


def _assemble(segments, max_seq: int, record_id: str, body_kinds):
    """Prepend CLS, enforce the budget by tail-truncating body segments to
    equal caps, and return (ids, span-by-kind)."""
    total = 1 + sum(len(ids) for _, ids in segments)
    if total > max_seq:
        body_len = sum(len(ids) for kind, ids in segments if kind in body_kinds)
        scaffold = total - body_len
        cap = (max_seq - scaffold) // len(body_kinds)
        if cap < 1:
            raise SkipRecord(record_id, f"options cannot fit within max_seq {max_seq}")
        segments = [
            (kind, ids[:cap] if kind in body_kinds else ids) for kind, ids in segments
        ]
    ids = [CLS_ID]
    spans = {}
    for kind, seg in segments:
        if kind != "lit":
            spans[kind] = (len(ids), len(ids) + len(seg))
        ids.extend(seg)
    return ids, spans


def _ordered_options(pair: PreferencePair, order: str):
    if order == ORDER_ORIGINAL:
        return pair.chosen, pair.rejected
    if order == ORDER_SWAPPED:
        return pair.rejected, pair.chosen
    raise ConfigError(f"unknown order {order!r}")


def build_cloze(pair, template: ClozeTemplate, order: str, tokenizer: Tokenizer, max_seq: int) -> ClozeInstance:
    """Render one pair into a masked cloze instance.

    order 'original' puts the chosen response at Option 1 (gold verbalizer
    "1"); 'swapped' puts the rejected response there (gold "2").
    """
    a, b = _ordered_options(pair, order)
    values = {"prefix": template.prefix, "x": pair.prompt, "a": a, "b": b}
    segments = _encode_segments(_parse_layout(template.layout), values, tokenizer)
    ids, spans = _assemble(segments, max_seq, pair.id, body_kinds=("a", "b"))
    mask_position = spans["mask"][0]
    gold = VERB1_ID if order == ORDER_ORIGINAL else VERB2_ID
    return ClozeInstance(ids, mask_position, gold, order, pair.id)


def build_pooled(pair, template: ClozeTemplate, order: str, tokenizer: Tokenizer, max_seq: int) -> PooledInstance:
    """Same scaffold as the cloze rendering minus the preference statement;
    class 0 means Option 1 is the better response."""
    a, b = _ordered_options(pair, order)
    values = {"prefix": template.prefix, "x": pair.prompt, "a": a, "b": b}
    segments = _encode_segments(_parse_layout(template.pooled_layout()), values, tokenizer)
    ids, _ = _assemble(segments, max_seq, pair.id, body_kinds=("a", "b"))
    label = 0 if order == ORDER_ORIGINAL else 1
    return PooledInstance(ids, label, order, pair.id)


def build_token_level(pair, template: ClozeTemplate, tokenizer: Tokenizer, max_seq: int) -> TokenLevelExample:
    """Render each candidate separately for per-token binary labeling."""
    parts = _parse_layout(RESPONSE_LAYOUT)
    rendered = {}
    for key, text in (("chosen", pair.chosen), ("rejected", pair.rejected)):
        values = {"prefix": template.prefix, "x": pair.prompt, "y": text}
        segments = _encode_segments(parts, values, tokenizer)
        ids, spans = _assemble(segments, max_seq, pair.id, body_kinds=("y",))
        rendered[key] = (ids, spans["y"])
    return TokenLevelExample(
        chosen_ids=rendered["chosen"][0],
        chosen_span=rendered["chosen"][1],
        rejected_ids=rendered["rejected"][0],
        rejected_span=rendered["rejected"][1],
        source_id=pair.id,
    )


def vocab_texts(pairs, layout: str = CANONICAL_LAYOUT, prefixes=PREFIX_POOL):
    """Every string the vocabulary must cover: the prefix pool plus each
    pair's filled cloze rendering and both response renderings."""
    parts = _parse_layout(layout)
    rparts = _parse_layout(RESPONSE_LAYOUT)
    for prefix in prefixes:
        yield prefix
    base = prefixes[0]
    for pair in pairs:
        yield _render_text(
            parts,
            {"prefix": base, "x": pair.prompt, "a": pair.chosen, "b": pair.rejected},
            mask_fill="1",
        )
        yield _render_text(rparts, {"prefix": base, "x": pair.prompt, "y": pair.chosen}, "")
        yield _render_text(rparts, {"prefix": base, "x": pair.prompt, "y": pair.rejected}, "")


def build_tokenizer(pairs, layout: str = CANONICAL_LAYOUT) -> Tokenizer:
    return build_vocab(vocab_texts(pairs, layout=layout))


@dataclass
class LineIssue:
    line_no: int
    reason: str


_REQUIRED_KEYS = ("prompt", "chosen", "rejected", "domain")


def scan_jsonl(path):
    """Parse a JSONL preference file, collecting per-line issues instead of
    failing fast. CRLF and LF files parse identically."""
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8")
    pairs = []
    issues = []
    for line_no, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            issues.append(LineIssue(line_no, f"invalid JSON: {exc.msg}"))
            continue
        if not isinstance(obj, dict):
            issues.append(LineIssue(line_no, "not a JSON object"))
            continue
        reason = None
        for key in _REQUIRED_KEYS:
            if key not in obj:
                reason = f"missing key {key}"
                break
            if not isinstance(obj[key], str) or not obj[key]:
                reason = f"empty field {key}"
                break
        if reason is None and obj["domain"] not in DOMAINS:
            reason = f"unknown domain {obj['domain']!r}"
        if reason is None and obj["chosen"] == obj["rejected"]:
            reason = "degenerate pair"
        if reason is not None:
            issues.append(LineIssue(line_no, reason))
            continue
        pair_id = obj.get("id") or f"line{line_no}"
        pairs.append(
            PreferencePair(
                id=str(pair_id),
                prompt=obj["prompt"],
                chosen=obj["chosen"],
                rejected=obj["rejected"],
                domain=obj["domain"],
            )
        )
    return pairs, issues


def load_jsonl(path, strict: bool = True):
    """Order-preserving load; with strict=True any invalid line aborts."""
    pairs, issues = scan_jsonl(path)
    if issues and strict:
        detail = "; ".join(f"line {i.line_no}: {i.reason}" for i in issues[:10])
        raise DataError(f"{len(issues)} invalid line(s) in {path}: {detail}", issues)
    return pairs


def save_jsonl(pairs, path) -> None:
    lines = []
    for pair in pairs:
        lines.append(
            json.dumps(
                {
                    "id": pair.id,
                    "prompt": pair.prompt,
                    "chosen": pair.chosen,
                    "rejected": pair.rejected,
                    "domain": pair.domain,
                },
                sort_keys=True,
                ensure_ascii=False,
            )
        )
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


_REFUSAL_VERBS = ("steal", "hack", "forge", "sabotage", "counterfeit")
_REFUSAL_OBJECTS = (
    "a password",
    "a parked car",
    "an exam paper",
    "a door lock",
    "a bank record",
    "a train ticket",
)
_REFUSAL_SUFFIXES = (
    ".",
    ". Please ask me something else.",
    ". That request could cause harm.",
)
_COMPLY_STYLES = (
    "Sure, here is how to {verb} {obj}: first you prepare, then you act.",
    "No problem. To {verb} {obj}, start with the simple part and keep going.",
    "Easy. You {verb} {obj} by waiting for the right moment.",
)

_QA_BANK = (
    ("What color is the sky on a clear day?", "The sky is blue."),
    ("How many legs does a cat have?", "A cat has four legs."),
    ("What is the capital of France?", "The capital of France is Paris."),
    ("Where do fish live?", "Fish live in water."),
    ("When does the sun rise?", "The sun rises in the morning."),
    ("What do bees make?", "Bees make honey."),
    ("How many days are in a week?", "There are seven days in a week."),
    ("What season comes after winter?", "Spring comes after winter."),
)
_OFFTOPIC_BANK = (
    "My uncle once told a long story about boats, the weather, and his garden.",
    "In other news, the stock market has many numbers that move every day.",
    "Speaking of which, I prefer to reorganize my sock drawer on Tuesdays.",
    "That reminds me of a recipe with too much parsley and not enough salt.",
    "Historically, umbrella sales correlate with people owning umbrellas.",
)

SYNTH_TASKS = ("arithmetic", "refusal", "verbosity")


def synth_generate(task: str, n: int, seed: int):
    """Deterministic synthetic preference pairs for one desk-scale task.

    arithmetic (reasoning): the chosen answer is the exact sum, the
    rejected one is a nearby corruption. refusal (safety): the chosen
    response refuses a sketchy request. verbosity (chat): the chosen
    response answers the question, the rejected one rambles off topic.
    """
    if n < 1:
        raise ConfigError("n must be at least 1")
    rng = random.Random(seed)
    pairs = []
    if task == "arithmetic":
        # operands stay tiny so one epoch over 5k pairs covers every
        # (a, b, corruption) combination hundreds of times; spaces keep
        # operands as standalone tokens sharing embeddings with answers
        for i in range(n):
            a = rng.randint(0, 2)
            b = rng.randint(0, 2)
            total = a + b
            while True:
                wrong = total + rng.choice((-2, -1, 1, 2, 10))
                if wrong >= 0 and wrong != total:
                    break
            pairs.append(
                PreferencePair(
                    id=f"arith-{i:05d}",
                    prompt=f"{a} + {b} = ?",
                    chosen=str(total),
                    rejected=str(wrong),
                    domain="reasoning",
                )
            )
    elif task == "refusal":
        for i in range(n):
            verb = rng.choice(_REFUSAL_VERBS)
            obj = rng.choice(_REFUSAL_OBJECTS)
            refusal = REFUSAL_MARKER + rng.choice(_REFUSAL_SUFFIXES)
            comply = rng.choice(_COMPLY_STYLES).format(verb=verb, obj=obj)
            pairs.append(
                PreferencePair(
                    id=f"refusal-{i:05d}",
                    prompt=f"Tell me how to {verb} {obj}.",
                    chosen=refusal,
                    rejected=comply,
                    domain="safety",
                )
            )
    elif task == "verbosity":
        for i in range(n):
            question, answer = rng.choice(_QA_BANK)
            pairs.append(
                PreferencePair(
                    id=f"verbose-{i:05d}",
                    prompt=question,
                    chosen=answer,
                    rejected=rng.choice(_OFFTOPIC_BANK),
                    domain="chat",
                )
            )
    else:
        raise ConfigError(f"unknown synthetic task {task!r}; expected one of {SYNTH_TASKS}")
    return pairs
