"""Synthetic token corpora with known structure for the learnability checks.

Every beat follows a fixed transition chain P -> QRS -> T -> next P, so a
masked token is fully determined by its neighbours.  The last QRS cluster is
held out of the chain; "positive" records swap it in for a fraction of beats,
which gives a two-class task whose signal pretraining never saw.
"""

import numpy as np

from ecglang.sentence import TokenSequence
from ecglang.vocab import N_SPECIAL, SEP

K = {"P": 13, "QRS": 11, "T": 10}
OFFSET = {"P": N_SPECIAL, "QRS": N_SPECIAL + K["P"], "T": N_SPECIAL + K["P"] + K["QRS"]}
VOCAB_SIZE = N_SPECIAL + sum(K.values())
RARE_QRS = K["QRS"] - 1


class TransitionCorpus:
    def __init__(self, seed: int = 0, beats=(8, 14)):
        rng = np.random.default_rng(seed)
        self.p_to_q = rng.integers(0, RARE_QRS, K["P"])
        self.q_to_t = rng.integers(0, K["T"], K["QRS"])
        self.t_to_p = rng.integers(0, K["P"], K["T"])
        self.beats = beats

    def sequence(self, rng, record_id="x", positive=False, rate=0.5) -> TokenSequence:
        p = int(rng.integers(K["P"]))
        ids = []
        for _ in range(int(rng.integers(*self.beats))):
            q = self.p_to_q[p]
            if positive and rng.random() < rate:
                q = RARE_QRS
            t = self.q_to_t[q]
            ids += [OFFSET["P"] + p, OFFSET["QRS"] + q, OFFSET["T"] + t, SEP]
            p = self.t_to_p[t]
        return TokenSequence(record_id, np.array(ids, dtype=np.int64))

    def unlabelled(self, n, rng):
        return [self.sequence(rng, f"u{i}") for i in range(n)]

    def labelled(self, n, rng, rate=0.5):
        y = rng.integers(0, 2, n)
        return [self.sequence(rng, f"l{i}", bool(v), rate) for i, v in enumerate(y)], y
