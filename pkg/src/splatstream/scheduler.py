"""Loss-adaptive keyframe selection.

The scheduler keeps three aligned pools: keyframe ids, remaining training
iterations r_i and last recorded losses l_i. Selection is uniform over
keyframes with budget left; when every budget is spent, a refill grants 2
iterations to the d_k = max(1, floor(k / d)) keyframes with the largest
recorded loss and 1 to everyone else, so badly-reconstructed (typically
recent) keyframes are revisited more often than a plain uniform draw
would allow. New keyframes enter with r = r0 and a loss sentinel larger
than any real loss, placing them on top at their first refill.
"""

from __future__ import annotations

import math

import numpy as np

LOSS_SENTINEL = math.inf


class KeyframeScheduler:
    """Single-writer scheduling state machine owned by the trainer."""

    def __init__(self, d: int = 4, r0: int = 8, seed: int = 0):
        if d < 1:
            raise ValueError("d must be >= 1")
        if r0 < 1:
            raise ValueError("r0 must be >= 1")
        self.d = int(d)
        self.r0 = int(r0)
        self.ids: list[int] = []
        self.remaining: list[int] = []
        self.last_loss: list[float] = []
        self.rng = np.random.default_rng(seed)
        self._index: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def add_keyframe(self, keyframe_id: int) -> None:
        """Extend the pools with a fresh budget and the loss sentinel."""
        if keyframe_id in self._index:
            raise ValueError(f"keyframe {keyframe_id} already present")
        self._index[keyframe_id] = len(self.ids)
        self.ids.append(keyframe_id)
        self.remaining.append(self.r0)
        self.last_loss.append(LOSS_SENTINEL)

    def select(self) -> int:
        """Uniform draw among keyframes with budget left, refilling first
        if every budget is exhausted."""
        if not self.ids:
            raise ValueError("cannot select from an empty keyframe pool")
        eligible = [i for i, r in enumerate(self.remaining) if r > 0]
        if not eligible:
            self.refill()
            eligible = list(range(len(self.ids)))
        pick = eligible[int(self.rng.integers(len(eligible)))]
        return self.ids[pick]

    def select_uniform_baseline(self) -> int:
        """Uniform draw over the whole pool, ignoring budgets and losses."""
        if not self.ids:
            raise ValueError("cannot select from an empty keyframe pool")
        return self.ids[int(self.rng.integers(len(self.ids)))]

    def record_result(self, keyframe_id: int, loss: float) -> None:
        """Spend one iteration of the keyframe's budget and store its loss."""
        i = self._index[keyframe_id]
        if self.remaining[i] <= 0:
            raise ValueError(
                f"keyframe {keyframe_id} has no remaining iterations; "
                "select() should have been used to pick it")
        self.remaining[i] -= 1
        self.last_loss[i] = float(loss)

    def refill(self) -> None:
        """Grant 2 iterations to the top d_k losses (ties favor the most
        recent keyframe) and 1 to the rest."""
        k = len(self.ids)
        if k == 0:
            return
        if any(r != 0 for r in self.remaining):
            raise ValueError("refill requires every remaining budget to be 0")
        d_k = max(1, k // self.d)
        order = sorted(range(k), key=lambda i: (self.last_loss[i], i), reverse=True)
        top = set(order[:d_k])
        self.remaining = [2 if i in top else 1 for i in range(k)]
