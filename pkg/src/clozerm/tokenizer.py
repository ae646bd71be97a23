"""Word-level tokenizer with single-space absorption.

A token is either a word (letters, digits, underscore) or a single
punctuation character, and it absorbs at most one space immediately before
it: "Problem: 12+7" lexes to ["Problem", ":", " 12", "+", "7"]. Whitespace
that cannot be absorbed (newlines, runs of spaces) comes through as
standalone single-character tokens. Concatenating the lexed pieces always
reproduces the input string, which is what makes round-trips lossless.

Ids 0-5 are reserved: PAD, CLS, MASK, UNK, and the two answer verbalizers.
The verbalizers are the space-absorbed forms " 1" and " 2" because that is
the exact token natural text carries in "Option 1" and in the filled
preference statement; substituting a verbalizer id into the mask slot
therefore detokenizes to ordinary prose.
"""

import re

from .errors import ConfigError

PAD_TOKEN = "<pad>"
CLS_TOKEN = "<cls>"
MASK_TOKEN = "<mask>"
UNK_TOKEN = "<unk>"
VERB1_TOKEN = " 1"
VERB2_TOKEN = " 2"

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
UNK_ID = 3
VERB1_ID = 4
VERB2_ID = 5

RESERVED_TOKENS = (PAD_TOKEN, CLS_TOKEN, MASK_TOKEN, UNK_TOKEN, VERB1_TOKEN, VERB2_TOKEN)

_LEX = re.compile(r" ?[A-Za-z0-9_]+| ?[^\sA-Za-z0-9_]|\s")


def lex(text: str) -> list:
    """Split text into surface tokens; concatenation reproduces the input."""
    pieces = _LEX.findall(text)
    assert "".join(pieces) == text, "lexer failed to cover the input"
    return pieces


class Tokenizer:
    """Fixed vocabulary mapping tokens to dense ids, reserved ids first."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ConfigError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.ids = {tok: i for i, tok in enumerate(tokens)}

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list:
        ids = self.ids
        return [ids.get(piece, UNK_ID) for piece in lex(text)]

    def decode(self, token_ids) -> str:
        return "".join(self.tokens[i] for i in token_ids)

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]


def build_vocab(texts) -> Tokenizer:
    """Build a tokenizer from a corpus, tokens in first-seen order."""
    seen = dict.fromkeys(RESERVED_TOKENS)
    for text in texts:
        for piece in lex(text):
            if piece not in seen:
                seen[piece] = None
    return Tokenizer(list(seen))
