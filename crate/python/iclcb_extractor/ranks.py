import numpy as np


def rank_of(scores, token_id: int) -> int:
    """1-based rank of `token_id` in descending score order, ties by ascending id."""
    scores = np.asarray(scores)
    s = scores[token_id]
    higher = int(np.count_nonzero(scores > s))
    tied_before = int(np.count_nonzero(scores[:token_id] == s))
    return higher + tied_before + 1
