"""Lifecycle of task-specific prompts: create, combine, freeze.

A pool holds one prompt per completed-or-current task; each prompt is a
{block index: [L_p, D]} dict matching the injection plan. Prompts of
finished tasks are frozen and guarded by checksums.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .backbone import PromptInjectionPlan

INIT_SCALE = 0.02


def _prompt_checksum(prompt: dict[int, np.ndarray]) -> str:
    h = hashlib.sha256()
    for layer in sorted(prompt):
        h.update(str(layer).encode())
        h.update(np.ascontiguousarray(prompt[layer]).tobytes())
    return h.hexdigest()


class PromptPool:
    """Expandable pool of task-specific prompts e_1..e_t (plus optional keys)."""

    def __init__(self, plan: PromptInjectionPlan, dim: int, dtype=np.float32):
        self.plan = plan
        self.dim = dim
        self.dtype = dtype
        self.prompts: list[dict[int, np.ndarray]] = []
        self.keys: list[np.ndarray] = []  # key-matching baseline only
        self.frozen_upto = 0
        self._checksums: list[str] = []

    def __len__(self) -> int:
        return len(self.prompts)

    def task_prompt(self, t: int) -> dict[int, np.ndarray]:
        """The raw prompt e_t (1-indexed)."""
        return self.prompts[t - 1]

    def create_task_prompt(self, t: int, rng: np.random.Generator) -> dict[int, np.ndarray]:
        """Append e_t: random init for the first task, copy of e_{t-1} after."""
        if t != len(self.prompts) + 1:
            raise RuntimeError(
                f"tasks must be created in order: expected {len(self.prompts) + 1}, got {t}")
        if t == 1:
            prompt = {
                l: rng.uniform(-INIT_SCALE, INIT_SCALE,
                               size=(self.plan.prompt_len, self.dim)).astype(self.dtype)
                for l in self.plan.layers
            }
        else:
            prompt = {l: v.copy() for l, v in self.prompts[-1].items()}
        self.prompts.append(prompt)
        return prompt

    def ensemble_prompt(self, t: int, alpha: float) -> dict[int, np.ndarray]:
        """Combined prompt p_t = alpha * sum(e_1..e_{t-1}) + (1-alpha) * e_t.

        The first task has no history, so p_1 = e_1 whatever alpha is.
        """
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        if not 1 <= t <= len(self.prompts):
            raise ValueError(f"no prompt for task {t} (pool holds {len(self.prompts)})")
        if t == 1:
            return {l: v.copy() for l, v in self.prompts[0].items()}
        out = {}
        for l in self.plan.layers:
            old = sum(self.prompts[i][l] for i in range(t - 1))
            out[l] = (alpha * old + (1.0 - alpha) * self.prompts[t - 1][l]).astype(self.dtype)
        return out

    def old_prompt_sum(self, t: int) -> dict[int, np.ndarray] | None:
        """sum(e_1..e_{t-1}); constant while those prompts are frozen."""
        if t <= 1:
            return None
        return {l: sum(self.prompts[i][l] for i in range(t - 1)).astype(self.dtype)
                for l in self.plan.layers}

    def freeze_task(self, t: int) -> None:
        """Freeze e_t (idempotent). Frozen prompts are checksum-guarded."""
        if not 1 <= t <= len(self.prompts):
            raise ValueError(f"no prompt for task {t}")
        if t <= self.frozen_upto:
            return
        if t != self.frozen_upto + 1:
            raise RuntimeError("tasks freeze in order")
        self._checksums.append(_prompt_checksum(self.prompts[t - 1]))
        self.frozen_upto = t

    def is_frozen(self, t: int) -> bool:
        return t <= self.frozen_upto

    def verify_frozen(self) -> None:
        """Raise if any frozen prompt changed since freeze time."""
        for t in range(1, self.frozen_upto + 1):
            if _prompt_checksum(self.prompts[t - 1]) != self._checksums[t - 1]:
                raise RuntimeError(f"frozen prompt e_{t} was modified")

    def frozen_checksums(self) -> list[str]:
        return list(self._checksums)
