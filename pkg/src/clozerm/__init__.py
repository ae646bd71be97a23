"""clozerm: pairwise reward models from a bidirectional masked encoder.

A small, numpy-only toolchain that turns a masked-LM encoder into a
pairwise reward model by rendering each preference pair as a cloze prompt
("Option 1 / Option 2 / The better response is Option [MASK]") and
training the mask prediction over two verbalizer tokens. Includes DoRA
adapters with exact merging, lower-layer freezing, decoupled AdamW with a
linear schedule, both-orders evaluation with position-bias reporting, a
FLOPs/token cost model, checkpoint weight averaging, and a CLI covering
the full synth/train/sweep/eval/merge/average/flops/compare loop.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    CANONICAL_LAYOUT,
    DOMAIN_PREFIXES,
    DOMAINS,
    PREFIX_POOL,
    REFUSAL_MARKER,
    ClozeInstance,
    ClozeTemplate,
    PooledInstance,
    PreferencePair,
    TokenLevelExample,
    build_cloze,
    build_pooled,
    build_token_level,
    build_tokenizer,
    load_jsonl,
    save_jsonl,
    scan_jsonl,
    synth_generate,
)
from .errors import (
    CheckpointError,
    ClozermError,
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    ShapeError,
    SkipRecord,
)
from .evaluation import (
    EvalModel,
    EvalReport,
    ScoreResult,
    TradeoffPoint,
    aggregate_chat,
    aggregate_trials,
    compare_objectives,
    emit_tradeoff,
    eval_dataset,
    flops_per_token,
    format_gflops,
    format_score,
    overall,
    parse_tradeoff,
    score_pair,
)
from .model import (
    ModelConfig,
    count_params,
    forward_mlm,
    forward_pooled,
    forward_token_labels,
    init_weights,
    manifest,
)
from .peft import (
    AdapterTargets,
    DoraAdapter,
    FreezeSpec,
    apply_freeze,
    attach_adapters,
    dora_effective,
    dora_init,
    dora_merge,
    merge_checkpoint,
    weight_average,
)
from .tokenizer import Tokenizer, build_vocab
from .training import (
    DoraSettings,
    ModelSettings,
    OptimizerState,
    SweepSpec,
    TrainConfig,
    TrainResult,
    adamw_step,
    loss_cloze,
    loss_pooled,
    loss_token_level,
    lr_linear,
    sweep,
    train,
    train_aao,
)

__version__ = "0.1.0"
