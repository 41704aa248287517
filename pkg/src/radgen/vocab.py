"""Report-side tokenization and vocabulary construction.

Reports are lowercased, punctuation is replaced by spaces, and tokens are
split on whitespace. The vocabulary keeps every token whose corpus frequency
strictly exceeds ``min_count``, plus four reserved specials that always
occupy the lowest ids.
"""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation to spaces, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def _as_tokens(report: str | Sequence[str]) -> list[str]:
    if isinstance(report, str):
        return tokenize(report)
    return list(report)


@dataclass
class Vocabulary:
    """Bijection between report tokens and integer ids.

    ``id_to_token[i]`` is the token with id ``i``; the first four ids are the
    reserved specials. Non-special ids are assigned by descending corpus
    frequency with lexicographic tie-break.
    """

    id_to_token: list[str]
    min_count: int = 0
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")
        if tuple(self.id_to_token[:4]) != SPECIAL_TOKENS:
            raise ValueError("first four ids must be the reserved specials")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, report: str | Sequence[str]) -> list[int]:
        """Map a report to ids, wrapped in BOS/EOS; unknown words become UNK."""
        ids = [self.token_to_id.get(tok, UNK_ID) for tok in _as_tokens(report)]
        return [BOS_ID, *ids, EOS_ID]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids back to words, dropping specials; stops at EOS."""
        words = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            words.append(self.id_to_token[i])
        return words

    def save(self, path: str | Path) -> None:
        """One token per line; line number equals the token id."""
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(id_to_token=[ln for ln in lines if ln])


def build_vocabulary(
    corpus: Iterable[str | Sequence[str]], min_count: int = 3
) -> Vocabulary:
    """Build a vocabulary from a corpus of reports.

    Keeps every token occurring strictly more than ``min_count`` times.
    An empty corpus yields the specials-only vocabulary.
    """
    counts = Counter()
    for report in corpus:
        counts.update(_as_tokens(report))
    kept = [tok for tok, c in counts.items() if c > min_count]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocabulary(id_to_token=[*SPECIAL_TOKENS, *kept], min_count=min_count)
