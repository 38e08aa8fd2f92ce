"""
Character-level vocabulary with image placeholder tokens.
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import DataError

SPECIAL_TOKENS = ("<|pad|>", "<|bos|>", "<|eos|>", "<|image_start|>", "<|image|>", "<|image_end|>")


class Vocabulary:
    """Specials first, then printable ASCII (space through tilde)."""

    def __init__(self):
        self.symbols: List[str] = list(SPECIAL_TOKENS) + [chr(c) for c in range(32, 127)]
        self.ids: Dict[str, int] = {s: i for i, s in enumerate(self.symbols)}
        self.pad_id = 0
        self.bos_id = 1
        self.eos_id = 2
        self.image_start_id = 3
        self.image_id = 4
        self.image_end_id = 5
        self.special_ids = frozenset(range(len(SPECIAL_TOKENS)))

    def __len__(self) -> int:
        return len(self.symbols)

    def encode_text(self, text: str) -> List[int]:
        out = []
        for ch in text:
            if ch not in self.ids or self.ids[ch] in self.special_ids:
                raise DataError(f"Character {ch!r} is not in the vocabulary")
            out.append(self.ids[ch])
        return out

    def decode(self, ids: Sequence[int]) -> str:
        """Concatenate the text of non-special tokens."""
        return "".join(self.symbols[i] for i in ids if int(i) not in self.special_ids)


VOCAB = Vocabulary()


@dataclass
class EncodedSample:
    """Token ids with the image placeholder span and the loss mask."""
    token_ids: np.ndarray
    image_token_span: Tuple[int, int]
    target_mask: np.ndarray
    question_span: Tuple[int, int] = (0, 0)
    answer_span: Tuple[int, int] = (0, 0)

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def prompt_length(self) -> int:
        """Tokens up to and including the question (what a decoder is given)."""
        return self.answer_span[0]


def encode(question: str, answer: str, n_visual_tokens: int,
           supervise_question: bool = False, vocab: Vocabulary = VOCAB) -> EncodedSample:
    """
    Lay out [bos][image_start][image x n][image_end] question answer [eos].

    Args:
        question: Question text
        answer: Answer text
        n_visual_tokens: Number of image placeholders
        supervise_question: Also put the question positions under the loss mask

    Returns:
        EncodedSample whose mask covers the answer and eos

    Raises:
        DataError: If a character is outside the vocabulary
    """
    q_ids = vocab.encode_text(question)
    a_ids = vocab.encode_text(answer)
    ids = [vocab.bos_id, vocab.image_start_id] + [vocab.image_id] * n_visual_tokens + [vocab.image_end_id]
    image_span = (2, n_visual_tokens)
    q_start = len(ids)
    ids += q_ids
    a_start = len(ids)
    ids += a_ids + [vocab.eos_id]

    mask = np.zeros(len(ids), dtype=bool)
    mask[a_start:] = True
    if supervise_question:
        mask[q_start:a_start] = True
    return EncodedSample(
        token_ids=np.asarray(ids, dtype=np.int64),
        image_token_span=image_span,
        target_mask=mask,
        question_span=(q_start, len(q_ids)),
        answer_span=(a_start, len(a_ids)),
    )


def decode(ids: Sequence[int], vocab: Vocabulary = VOCAB) -> str:
    return vocab.decode(ids)


def decode_sample(sample: EncodedSample, vocab: Vocabulary = VOCAB) -> Tuple[str, str]:
    """Return (question, answer) text of an encoded sample."""
    q_start, q_len = sample.question_span
    a_start, a_len = sample.answer_span
    ids = sample.token_ids
    return vocab.decode(ids[q_start:q_start + q_len]), vocab.decode(ids[a_start:a_start + a_len])
