"""
Test suite for the character vocabulary and sample encoding
"""

import numpy as np
import pytest

from looped_vlm.errors import DataError
from looped_vlm.tokenizer import SPECIAL_TOKENS, VOCAB, decode, decode_sample, encode


@pytest.mark.unit
class TestVocabulary:
    """Test cases for Vocabulary"""

    def test_special_ids(self):
        """Test the fixed ids of the special tokens"""
        assert (VOCAB.pad_id, VOCAB.bos_id, VOCAB.eos_id) == (0, 1, 2)
        assert (VOCAB.image_start_id, VOCAB.image_id, VOCAB.image_end_id) == (3, 4, 5)
        assert len(VOCAB) == len(SPECIAL_TOKENS) + 95

    def test_text_round_trip(self):
        """Test that printable text decodes to itself"""
        text = "what color at row 1 col 3?"
        assert decode(VOCAB.encode_text(text)) == text

    def test_decode_skips_specials(self):
        """Test that special tokens are dropped when decoding"""
        ids = [VOCAB.bos_id] + VOCAB.encode_text("3") + [VOCAB.eos_id]
        assert decode(ids) == "3"

    def test_unknown_character(self):
        """Test that characters outside printable ASCII are rejected"""
        with pytest.raises(DataError):
            VOCAB.encode_text("café")
        with pytest.raises(DataError):
            VOCAB.encode_text("line\nbreak")


@pytest.mark.unit
class TestEncode:
    """Test cases for encode()"""

    def setup_method(self):
        """Set up test fixtures"""
        self.sample = encode("how many red squares?", "2", n_visual_tokens=4)

    def test_layout(self):
        """Test bos, image block, question, answer and eos positions"""
        ids = self.sample.token_ids
        assert ids[0] == VOCAB.bos_id
        assert ids[1] == VOCAB.image_start_id
        assert list(ids[2:6]) == [VOCAB.image_id] * 4
        assert ids[6] == VOCAB.image_end_id
        assert ids[-1] == VOCAB.eos_id
        assert self.sample.image_token_span == (2, 4)
        assert self.sample.question_span == (7, len("how many red squares?"))
        assert len(self.sample) == 7 + len("how many red squares?") + 1 + 1

    def test_mask_covers_answer_and_eos(self):
        """Test that only the answer and eos are supervised by default"""
        mask = self.sample.target_mask
        a_start, a_len = self.sample.answer_span
        assert mask.sum() == a_len + 1
        assert mask[a_start:].all()
        assert not mask[:a_start].any()

    def test_supervise_question(self):
        """Test that the question positions join the mask when requested"""
        sample = encode("how many red squares?", "2", 4, supervise_question=True)
        q_start, q_len = sample.question_span
        assert sample.target_mask[q_start:q_start + q_len].all()
        assert not sample.target_mask[:q_start].any()

    def test_prompt_length_and_decode_sample(self):
        """Test the prompt boundary and recovering question and answer"""
        assert self.sample.prompt_length == self.sample.answer_span[0]
        assert decode_sample(self.sample) == ("how many red squares?", "2")

    def test_empty_answer_prompt(self):
        """Test encoding a question alone (inference prompt)"""
        sample = encode("what color at row 0 col 0?", "", 4)
        assert sample.answer_span[1] == 0
        assert sample.token_ids[sample.prompt_length] == VOCAB.eos_id
        assert np.count_nonzero(sample.token_ids == VOCAB.image_id) == 4
