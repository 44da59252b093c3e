"""Numerical verification of the hierarchical decomposition identities.

A joint prediction carries a categorical distribution over (task,
within-task index) cells plus a separate all-class distribution. The
checks draw large randomized families of such predictions and measure
how far the decomposition identities and loss-error bounds are from
holding exactly; violations beyond 1e-12 fail the verdict.

Zero ground-truth probabilities map to explicit infinities rather than
exceptions so that degenerate predictions stay visible in reports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TOL = 1e-12
SIMPLEX_TOL = 1e-9


@dataclass
class JointPrediction:
    """One prediction: P[i][j] over task/within-task cells, Q over classes.

    Tasks may have different class counts, so P is a list of 1-D rows.
    Classes are laid out task-major: the global class of cell (i, j) is
    sum(|rows before i|) + j.
    """

    p: list[np.ndarray]
    q: np.ndarray
    true_task: int
    true_index: int
    true_class: int

    def __post_init__(self):
        total = math.fsum(float(np.sum(row)) for row in self.p)
        if any(np.any(row < 0) for row in self.p) or abs(total - 1.0) > TOL:
            raise ValueError("joint cells must be non-negative and sum to 1")
        qsum = float(np.sum(self.q))
        if np.any(self.q < 0) or abs(qsum - 1.0) > TOL:
            raise ValueError("class distribution must be non-negative and sum to 1")
        if not 0 <= self.true_task < len(self.p):
            raise ValueError("true task out of range")
        if not 0 <= self.true_index < len(self.p[self.true_task]):
            raise ValueError("true within-task index out of range")
        if not 0 <= self.true_class < len(self.q):
            raise ValueError("true class out of range")

    def task_mass(self) -> float:
        return math.fsum(float(v) for v in self.p[self.true_task])


def entropy_decompose(jp: JointPrediction) -> tuple[float, float, float, float]:
    """(H_WTP, H_TII, H_TAP, H_joint) for one prediction.

    H_joint factors exactly into H_WTP + H_TII; a zero-probability ground
    truth yields +inf entries.
    """
    p_i = jp.task_mass()
    p_ij = float(jp.p[jp.true_task][jp.true_index])
    if p_i == 0.0:
        h_tii = h_wtp = h_joint = math.inf
    else:
        h_tii = -math.log(p_i)
        h_joint = math.inf if p_ij == 0.0 else -math.log(p_ij)
        h_wtp = math.inf if p_ij == 0.0 else -math.log(p_ij / p_i)
    qy = float(jp.q[jp.true_class])
    h_tap = math.inf if qy == 0.0 else -math.log(qy)
    return h_wtp, h_tii, h_tap, h_joint


@dataclass
class TheoremReport:
    name: str
    trials: int
    max_violation: float
    verdict: str  # "pass" | "fail" | "unbounded"
    details: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"trials": self.trials, "max_violation": self.max_violation,
                "verdict": self.verdict, **self.details}


def _verdict(max_violation: float, tol: float = TOL) -> str:
    if math.isnan(max_violation):
        return "fail"
    return "pass" if max_violation <= tol else "fail"


def check_factorization(samples: list[JointPrediction]) -> TheoremReport:
    """|H_joint - H_WTP - H_TII| per sample; exact to machine precision."""
    worst = 0.0
    for jp in samples:
        h_wtp, h_tii, _, h_joint = entropy_decompose(jp)
        if math.isinf(h_joint):
            if not (math.isinf(h_wtp) or math.isinf(h_tii)):
                return TheoremReport("factorization", len(samples), math.inf, "fail")
            continue
        worst = max(worst, abs(h_joint - h_wtp - h_tii))
    return TheoremReport("factorization", len(samples), worst, _verdict(worst))


def check_cil_bound(samples: list[JointPrediction]) -> TheoremReport:
    """Sufficiency bound: with realized budgets (delta, epsilon, eta) the
    loss error max(E[H_joint], E[H_TAP]) equals max(delta+epsilon, eta)."""
    if not samples:
        raise ValueError("need at least one sample")
    h_wtp, h_tii, h_tap, h_joint = [], [], [], []
    for jp in samples:
        w, t, a, j = entropy_decompose(jp)
        h_wtp.append(w)
        h_tii.append(t)
        h_tap.append(a)
        h_joint.append(j)
    if any(math.isinf(v) for vs in (h_wtp, h_tii, h_tap, h_joint) for v in vs):
        return TheoremReport("cil_bound", len(samples), math.inf, "unbounded")
    n = len(samples)
    delta = math.fsum(h_wtp) / n
    epsilon = math.fsum(h_tii) / n
    eta = math.fsum(h_tap) / n
    l2 = math.fsum(h_joint) / n
    l1 = eta
    loss_error = max(l1, l2)
    bound = max(delta + epsilon, eta)
    worst = abs(loss_error - bound)
    return TheoremReport(
        "cil_bound", n, worst, _verdict(worst),
        details={"delta": delta, "epsilon": epsilon, "eta": eta,
                 "l1": l1, "l2": l2, "loss_error": loss_error, "bound": bound})


def check_necessity(samples: list[JointPrediction]) -> TheoremReport:
    """Necessity: H_WTP <= H_joint and H_TII <= H_joint per sample."""
    worst = 0.0
    for jp in samples:
        h_wtp, h_tii, _, h_joint = entropy_decompose(jp)
        if math.isinf(h_joint):
            continue  # inf <= inf holds trivially and inf-inf is undefined
        worst = max(worst, h_wtp - h_joint, h_tii - h_joint)
    worst = max(worst, 0.0)
    return TheoremReport("necessity", len(samples), worst, _verdict(worst))


@dataclass
class DilInstance:
    """Per-domain conditionals P(j|i), domain priors P(i), a simplex gamma,
    and the shared true class index."""

    conditionals: np.ndarray  # [t, K], rows sum to 1
    priors: np.ndarray        # [t], sums to 1
    gamma: np.ndarray         # [t], sums to 1
    true_j: int

    def __post_init__(self):
        t, k = self.conditionals.shape
        if not 0 <= self.true_j < k:
            raise ValueError("true class out of range")
        for name, v in (("conditional", self.conditionals.sum(axis=1)),
                        ("priors", self.priors.sum()), ("gamma", self.gamma.sum())):
            if np.any(np.abs(np.atleast_1d(v) - 1.0) > SIMPLEX_TOL):
                raise ValueError(f"{name} distribution off the simplex beyond {SIMPLEX_TOL}")
        if np.any(self.gamma < 0):
            raise ValueError("gamma must be non-negative")


def _neg_log(x: float) -> float:
    return math.inf if x <= 0.0 else -math.log(x)


def check_dil_bound(instances: list[DilInstance]) -> TheoremReport:
    """Jensen step of the domain-incremental bound: for any simplex gamma,
    -log P(*, j) <= sum_i gamma_i H_WTP,i + H_TII(gamma) + H(gamma).

    With uniform gamma the entropy term is the log t slack of the bound.
    """
    worst = -math.inf
    uniform = 0
    for inst in instances:
        cond = inst.conditionals
        pri = inst.priors
        g = inst.gamma
        t = len(pri)
        if np.allclose(g, 1.0 / t, atol=1e-15):
            uniform += 1
        marginal = math.fsum(float(cond[i, inst.true_j] * pri[i]) for i in range(t))
        lhs = _neg_log(marginal)
        rhs = math.fsum(
            float(g[i]) * _neg_log(float(cond[i, inst.true_j]))
            + float(g[i]) * _neg_log(float(pri[i]))
            + (float(g[i]) * math.log(float(g[i])) if g[i] > 0 else 0.0)
            for i in range(t))
        if math.isinf(lhs):
            continue
        if math.isinf(rhs):
            worst = max(worst, 0.0)  # finite lhs <= +inf rhs
            continue
        worst = max(worst, lhs - rhs)
    worst = max(worst, 0.0)
    return TheoremReport("dil_bound", len(instances), worst, _verdict(worst),
                         details={"uniform_gamma_trials": uniform})


def check_til(samples: list[JointPrediction]) -> TheoremReport:
    """Given task identity (all joint mass on the true task), the task
    term vanishes and the remaining entropies coincide."""
    worst = 0.0
    for jp in samples:
        if abs(jp.task_mass() - 1.0) > SIMPLEX_TOL:
            raise ValueError("TIL samples must put all joint mass on the true task")
        h_wtp, h_tii, h_tap, h_joint = entropy_decompose(jp)
        if math.isinf(h_joint):
            if not math.isinf(h_tap):
                return TheoremReport("til", len(samples), math.inf, "fail")
            worst = max(worst, abs(h_tii))
            continue
        worst = max(worst, abs(h_tii), abs(h_joint - h_wtp), abs(h_tap - h_wtp))
    return TheoremReport("til", len(samples), worst, _verdict(worst))


# -- randomized sample generators ---------------------------------------------


def random_joint_predictions(n: int, rng: np.random.Generator,
                             max_tasks: int = 6, max_classes: int = 8,
                             concentration: float = 1.0) -> list[JointPrediction]:
    """Symmetric-Dirichlet joint and class distributions of random shape."""
    out = []
    for _ in range(n):
        t = int(rng.integers(1, max_tasks + 1))
        sizes = rng.integers(1, max_classes + 1, size=t)
        cells = rng.gamma(concentration, size=int(sizes.sum()))
        cells /= cells.sum()
        rows, pos = [], 0
        for s in sizes:
            rows.append(cells[pos:pos + s])
            pos += s
        q = rng.gamma(concentration, size=int(sizes.sum()))
        q /= q.sum()
        ti = int(rng.integers(t))
        tj = int(rng.integers(sizes[ti]))
        tc = int(sizes[:ti].sum()) + tj
        out.append(JointPrediction(rows, q, ti, tj, tc))
    return out


def random_til_predictions(n: int, rng: np.random.Generator,
                           max_classes: int = 8) -> list[JointPrediction]:
    """Predictions with all joint mass on the true task and the class
    distribution equal to the within-task conditional."""
    out = []
    for _ in range(n):
        t = int(rng.integers(1, 5))
        k = int(rng.integers(1, max_classes + 1))
        row = rng.gamma(1.0, size=k)
        row /= row.sum()
        ti = int(rng.integers(t))
        rows = [np.zeros(max(1, k)) for _ in range(t)]
        rows[ti] = row
        p_i = math.fsum(float(v) for v in row)
        q_parts = [np.zeros(len(r)) for r in rows]
        q_parts[ti] = np.array([float(v) / p_i for v in row])
        q = np.concatenate(q_parts)
        q /= math.fsum(float(v) for v in q)
        tj = int(rng.integers(k))
        tc = int(sum(len(r) for r in rows[:ti])) + tj
        out.append(JointPrediction(rows, q, ti, tj, tc))
    return out


def random_dil_instances(n: int, rng: np.random.Generator,
                         max_tasks: int = 6, max_classes: int = 8) -> list[DilInstance]:
    """Random conditional/prior pairs; half the gammas are uniform so the
    log t slack term is exercised, half are Dirichlet draws."""
    out = []
    for i in range(n):
        t = int(rng.integers(1, max_tasks + 1))
        k = int(rng.integers(1, max_classes + 1))
        cond = rng.gamma(1.0, size=(t, k))
        cond /= cond.sum(axis=1, keepdims=True)
        pri = rng.gamma(1.0, size=t)
        pri /= pri.sum()
        if i % 2 == 0:
            gamma = np.full(t, 1.0 / t)
        else:
            gamma = rng.gamma(1.0, size=t)
            gamma /= gamma.sum()
        out.append(DilInstance(cond, pri, gamma, int(rng.integers(k))))
    return out


def run_all_checks(trials: int, seed: int) -> dict[str, TheoremReport]:
    """Every theorem check at the requested trial count; deterministic."""
    rng = np.random.default_rng(seed)
    cil = random_joint_predictions(trials, rng)
    til = random_til_predictions(trials, rng)
    dil = random_dil_instances(trials, rng)
    return {
        "factorization": check_factorization(cil),
        "cil_bound": check_cil_bound(cil),
        "necessity": check_necessity(cil),
        "dil_bound": check_dil_bound(dil),
        "til": check_til(til),
    }
