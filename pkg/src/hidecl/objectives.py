"""Training objectives: within-task CE with contrastive regularization,
task-identity CE over pseudo replays, and all-class CE.

Losses return analytic gradients alongside their values; every gradient
here is covered by a finite-difference check in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, PromptInjectionPlan, backward_features, forward_features
from .numerics import LinearHead, softmax_cross_entropy_batch


def cr_loss(batch: np.ndarray, old_refs: np.ndarray | None,
            tau: float) -> tuple[float, np.ndarray]:
    """Contrastive regularization of a representation batch against old
    class references (their means, or sampled stand-ins).

    For each row h the class-averaged log ratio
        log[ exp(h.mu_c/tau) / (sum_h' exp(h.h'/tau) + sum_c exp(h.mu_c/tau)) ]
    is summed over the batch. The h' sum runs over the whole batch
    including h itself. Minimizing pushes current representations away
    from the old means. Returns (loss, d loss / d batch).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ValueError("expected a [B, D] batch")
    if old_refs is None or len(old_refs) == 0:
        return 0.0, np.zeros_like(batch)
    refs = np.asarray(old_refs, dtype=np.float64)
    b = batch.shape[0]
    n_old = refs.shape[0]

    sim_means = batch @ refs.T / tau   # [B, C]
    sim_batch = batch @ batch.T / tau  # [B, B]
    row_max = np.maximum(sim_means.max(axis=1), sim_batch.max(axis=1))[:, None]
    e_means = np.exp(sim_means - row_max)
    e_batch = np.exp(sim_batch - row_max)
    denom = e_batch.sum(axis=1) + e_means.sum(axis=1)  # [B], shifted by row_max
    log_denom = np.log(denom) + row_max[:, 0]

    loss = float(np.sum(sim_means.mean(axis=1) - log_denom))

    w = e_batch / denom[:, None]   # exp(h_b.h_b')/D_b
    v = e_means / denom[:, None]   # exp(h_b.mu_c)/D_b
    grad = (
        np.broadcast_to(refs.sum(axis=0) / n_old, batch.shape)
        - (w + w.T) @ batch
        - v @ refs
    ) / tau
    return loss, grad


@dataclass
class WtpGrads:
    prompt: dict[int, np.ndarray]  # d loss / d p_t per injected block
    psi_w: np.ndarray
    psi_b: np.ndarray


def wtp_loss(backbone: Backbone, images: np.ndarray, labels: np.ndarray,
             prompt: dict[int, np.ndarray], plan: PromptInjectionPlan,
             psi: LinearHead, task_classes, old_refs: np.ndarray | None,
             lam: float, tau: float) -> tuple[float, WtpGrads, np.ndarray]:
    """Within-task loss: CE over the current task's class logits plus
    lam * contrastive regularization of the instructed representations.

    Gradients flow to the combined prompt and the class head only; the
    backbone stays untouched. Also returns the instructed representations
    so callers can buffer them for the all-class objective.
    """
    task_classes = list(task_classes)
    col = {c: j for j, c in enumerate(task_classes)}
    labels = np.asarray(labels)
    bad = [int(y) for y in labels if int(y) not in col]
    if bad:
        raise ValueError(f"labels {sorted(set(bad))} outside the current task's classes")
    local = np.array([col[int(y)] for y in labels], dtype=np.intp)

    reps, cache = forward_features(backbone, images, prompts=prompt, plan=plan,
                                   need_cache=True)
    reps64 = reps.astype(np.float64)
    logits = (reps64 @ psi.w[:, task_classes] + psi.b[task_classes])
    ce, dlocal = softmax_cross_entropy_batch(logits, local)

    dfull = np.zeros((reps.shape[0], psi.out_features), dtype=np.float64)
    dfull[:, task_classes] = dlocal
    psi_w_grad = reps64.T @ dfull
    psi_b_grad = dfull.sum(axis=0)
    drep = dfull @ psi.w.T

    loss = ce
    if lam != 0.0 and old_refs is not None and len(old_refs):
        reg, dreg = cr_loss(reps64, old_refs, tau)
        loss = ce + lam * reg
        drep = drep + lam * dreg

    pgrads, _ = backward_features(backbone, cache, drep.astype(reps.dtype))
    return loss, WtpGrads(prompt=pgrads, psi_w=psi_w_grad, psi_b=psi_b_grad), reps


def tii_loss(omega: LinearHead, reps: np.ndarray, task_labels: np.ndarray,
             t: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean CE of the task-identity head over the first t task logits.

    Task labels are 0-indexed; reps are (pseudo) uninstructed vectors.
    Returns (loss, dw, db) for the full-capacity head with zeros beyond t.
    """
    task_labels = np.asarray(task_labels, dtype=np.intp)
    if np.any(task_labels < 0) or np.any(task_labels >= t):
        raise ValueError(f"task label outside the {t} active tasks")
    reps = np.asarray(reps, dtype=np.float64)
    logits = reps @ omega.w[:, :t] + omega.b[:t]
    loss, dlocal = softmax_cross_entropy_batch(logits, task_labels)
    dw = np.zeros_like(omega.w)
    db = np.zeros_like(omega.b)
    dw[:, :t] = reps.T @ dlocal
    db[:t] = dlocal.sum(axis=0)
    return loss, dw, db


def tap_loss(psi: LinearHead, reps: np.ndarray, class_labels: np.ndarray,
             active_classes) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean CE of the class head over every seen class logit."""
    active = list(active_classes)
    col = {c: j for j, c in enumerate(active)}
    class_labels = np.asarray(class_labels)
    bad = [int(y) for y in class_labels if int(y) not in col]
    if bad:
        raise ValueError(f"labels {sorted(set(bad))} not registered to any task")
    local = np.array([col[int(y)] for y in class_labels], dtype=np.intp)
    reps = np.asarray(reps, dtype=np.float64)
    logits = reps @ psi.w[:, active] + psi.b[active]
    loss, dlocal = softmax_cross_entropy_batch(logits, local)
    dfull = np.zeros((reps.shape[0], psi.out_features), dtype=np.float64)
    dfull[:, active] = dlocal
    dw = reps.T @ dfull
    db = dfull.sum(axis=0)
    return loss, dw, db
