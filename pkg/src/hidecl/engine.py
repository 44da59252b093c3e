"""Continual-learning engine: per-task training, two-stage inference,
the key-matching baseline, and representation diagnostics.

The training loop follows a fixed recipe per task: fit prompt-free class
statistics, create and train the task prompt together with the class
head (within-task CE + contrastive regularization), refresh the task and
class heads from pseudo replays each epoch, then fit instructed class
statistics and freeze the prompt.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import container as cont
from .backbone import (
    Backbone,
    BackboneConfig,
    PromptInjectionPlan,
    forward_features,
    forward_uninstructed,
)
from .numerics import Adam, LinearHead
from .objectives import tap_loss, tii_loss, wtp_loss
from .prompts import INIT_SCALE, PromptPool
from .statistics import (
    DIAG_GAUSSIAN,
    FULL_GAUSSIAN,
    MULTI_CENTROID,
    ClassStats,
    StatsStore,
    class_mean,
    fit_class_stats,
    sample_pseudo,
)


@dataclass
class AblationConfig:
    """Component toggles; all False reproduces the naive key-matching pipeline."""

    pe: bool = True
    tii: bool = True
    tap: bool = True
    cr: bool = True

    def __post_init__(self):
        if not self.tap:
            self.cr = False  # CR consumes instructed statistics

    def label(self) -> str:
        if not any((self.pe, self.tii, self.tap, self.cr)):
            return "naive"
        parts = [n for n, on in
                 (("WTP", self.pe), ("TII", self.tii), ("TAP", self.tap)) if on]
        name = "+".join(parts) if parts else "naive"
        return name + " w/ CR" if self.cr else name


@dataclass
class TrainConfig:
    max_tasks: int = 10
    max_classes: int = 100
    alpha: float = 0.1
    tau: float = 0.8
    lam: float = 0.1
    lr: float = 0.005
    epochs: int = 10
    batch_size: int = 32
    pseudo_batch: int = 64
    head_steps: int = 4
    stats_mode: str = FULL_GAUSSIAN
    cr_sample: bool = False
    seed: int = 0
    ablation: AblationConfig = field(default_factory=AblationConfig)


@dataclass
class Heads:
    """Task-identity and class output layers, sized at configured maxima."""

    omega: LinearHead
    psi: LinearHead
    active_tasks: int = 0
    active_classes: list[int] = field(default_factory=list)


class HidePrompt:
    """Continual learner over a frozen backbone."""

    def __init__(self, backbone: Backbone, plan: PromptInjectionPlan | None,
                 config: TrainConfig):
        backbone.verify_frozen()
        if not backbone.is_embedding_mode and plan is None:
            raise ValueError("a prompt injection plan is required with a ViT backbone")
        self.backbone = backbone
        self.plan = plan
        self.config = config
        dim = backbone.dim
        self.pool = (None if backbone.is_embedding_mode
                     else PromptPool(plan, dim, dtype=backbone.config.np_dtype))
        self.heads = Heads(
            omega=LinearHead.zeros(dim, config.max_tasks),
            psi=LinearHead.zeros(dim, config.max_classes),
        )
        self.stats = StatsStore()
        self.rng = np.random.default_rng(config.seed)
        self.tasks_trained = 0
        self.final_prompts: list[dict[int, np.ndarray]] = []
        self._emb_keys: list[np.ndarray] = []  # embedding-mode key storage

    def _keys(self) -> list[np.ndarray]:
        return self.pool.keys if self.pool is not None else self._emb_keys

    # -- helpers -------------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.backbone.dim

    def _uninstructed(self, x: np.ndarray) -> np.ndarray:
        return forward_features(self.backbone, x)

    def _instructed(self, x: np.ndarray, prompt) -> np.ndarray:
        if self.backbone.is_embedding_mode:
            return forward_features(self.backbone, x)
        return forward_features(self.backbone, x, prompts=prompt, plan=self.plan)

    def _ensemble(self, t: int, old_sum) -> dict[int, np.ndarray] | None:
        """Current combined prompt for task t given the frozen-prompt sum."""
        if self.pool is None:
            return None
        e_t = self.pool.task_prompt(t)
        if not self.config.ablation.pe or t == 1 or old_sum is None:
            return e_t
        a = self.config.alpha
        return {l: a * old_sum[l] + (1.0 - a) * e_t[l] for l in e_t}

    def _cr_references(self, t: int) -> np.ndarray | None:
        """Old-class reference vectors for the contrastive term."""
        if t == 1 or not self.config.ablation.cr:
            return None
        refs = []
        for task in range(1, t):
            for c in self.stats.classes_of(task):
                st = self.stats.instructed[c]
                if self.config.cr_sample:
                    refs.append(sample_pseudo(st, 1, self.rng)[0])
                else:
                    refs.append(class_mean(st))
        return np.array(refs) if refs else None

    def _pseudo_batch(self, t: int, kind: str):
        """Class-balanced pseudo representations from tasks 1..t."""
        table = self.stats.uninstructed if kind == "u" else self.stats.instructed
        classes = self.stats.all_classes(upto_task=t)
        per = math.ceil(self.config.pseudo_batch / len(classes))
        reps, labels, tasks = [], [], []
        for task in range(1, t + 1):
            for c in self.stats.classes_of(task):
                reps.append(sample_pseudo(table[c], per, self.rng))
                labels.extend([c] * per)
                tasks.extend([task - 1] * per)
        return np.concatenate(reps), np.array(labels), np.array(tasks)

    # -- training --------------------------------------------------------

    def train_task(self, t: int, images: np.ndarray, labels: np.ndarray) -> None:
        """Learn task t (1-indexed); earlier tasks must be complete."""
        if t != self.tasks_trained + 1:
            raise RuntimeError(
                f"tasks arrive in order: expected {self.tasks_trained + 1}, got {t}")
        self.backbone.verify_frozen()
        cfg = self.config
        labels = np.asarray(labels)
        classes = tuple(sorted(int(c) for c in np.unique(labels)))
        self.stats.register_task(t, classes)
        self.heads.active_tasks = t
        self.heads.active_classes = self.stats.all_classes()

        # prompt-free representations and their class statistics
        u_reps = self._uninstructed(images).astype(np.float64)
        for c in classes:
            self.stats.uninstructed[c] = fit_class_stats(
                u_reps[labels == c], cfg.stats_mode, self.rng)

        old_sum = None
        key = None
        if self.pool is not None:
            self.pool.create_task_prompt(t, self.rng)
            if not cfg.ablation.pe and t > 1:
                # naive architecture: fresh prompt, no inheritance
                for l, arr in self.pool.task_prompt(t).items():
                    arr[:] = self.rng.uniform(
                        -INIT_SCALE, INIT_SCALE, size=arr.shape).astype(arr.dtype)
            old_sum = self.pool.old_prompt_sum(t) if cfg.ablation.pe else None
        if not cfg.ablation.tii:
            key = self.rng.uniform(-INIT_SCALE, INIT_SCALE, size=self.dim)

        cr_refs = self._cr_references(t)
        opt = Adam(lr=cfg.lr)
        n = len(images)
        e_scale = (1.0 - cfg.alpha) if (cfg.ablation.pe and t > 1) else 1.0

        for _ in range(cfg.epochs):
            order = self.rng.permutation(n)
            buffer: dict[int, list[np.ndarray]] = {c: [] for c in classes}
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                prompt = self._ensemble(t, old_sum)
                if self.pool is not None:
                    _, grads, reps = wtp_loss(
                        self.backbone, images[idx], labels[idx], prompt,
                        self.plan, self.heads.psi, classes, cr_refs,
                        cfg.lam if cfg.ablation.cr else 0.0, cfg.tau)
                    e_t = self.pool.task_prompt(t)
                    params = {f"e.{l}": e_t[l] for l in e_t}
                    pgrads = {f"e.{l}": e_scale * g for l, g in grads.prompt.items()}
                    params["psi.w"] = self.heads.psi.w
                    params["psi.b"] = self.heads.psi.b
                    pgrads["psi.w"] = grads.psi_w
                    pgrads["psi.b"] = grads.psi_b
                    new = opt.update(params, pgrads)
                    for l in e_t:
                        e_t[l] = new[f"e.{l}"]
                    self.pool.prompts[t - 1] = e_t
                    self.heads.psi.w = new["psi.w"]
                    self.heads.psi.b = new["psi.b"]
                else:
                    # embedding mode: no prompt, train psi on stored vectors
                    reps = images[idx]
                    _, dw, db = tap_loss(self.heads.psi, reps, labels[idx], classes)
                    new = opt.update(
                        {"psi.w": self.heads.psi.w, "psi.b": self.heads.psi.b},
                        {"psi.w": dw, "psi.b": db})
                    self.heads.psi.w = new["psi.w"]
                    self.heads.psi.b = new["psi.b"]
                for rep, y in zip(np.atleast_2d(reps), labels[idx]):
                    buffer[int(y)].append(rep.astype(np.float64))
                if key is not None:
                    key = self._key_step(opt, key, u_reps[idx])
                if cfg.cr_sample and cr_refs is not None:
                    cr_refs = self._cr_references(t)

            if cfg.ablation.tii:
                for _ in range(cfg.head_steps):
                    reps, _, tasks = self._pseudo_batch(t, "u")
                    _, dw, db = tii_loss(self.heads.omega, reps, tasks, t)
                    new = opt.update(
                        {"omega.w": self.heads.omega.w, "omega.b": self.heads.omega.b},
                        {"omega.w": dw, "omega.b": db})
                    self.heads.omega.w = new["omega.w"]
                    self.heads.omega.b = new["omega.b"]
            if cfg.ablation.tap:
                for _ in range(cfg.head_steps):
                    reps, ys = self._tap_batch(t, buffer)
                    _, dw, db = tap_loss(self.heads.psi, reps, ys,
                                         self.heads.active_classes)
                    new = opt.update(
                        {"psi.w": self.heads.psi.w, "psi.b": self.heads.psi.b},
                        {"psi.w": dw, "psi.b": db})
                    self.heads.psi.w = new["psi.w"]
                    self.heads.psi.b = new["psi.b"]

        # instructed statistics under the final combined prompt, then freeze
        final_prompt = self._ensemble(t, old_sum)
        i_reps = self._instructed(images, final_prompt).astype(np.float64)
        for c in classes:
            self.stats.instructed[c] = fit_class_stats(
                i_reps[labels == c], cfg.stats_mode, self.rng)
        if self.pool is not None:
            self.pool.freeze_task(t)
            self.final_prompts.append({l: v.copy() for l, v in final_prompt.items()})
        else:
            self.final_prompts.append({})
        if key is not None:
            self._keys().append(key)
        self.tasks_trained = t

    def _key_step(self, opt: Adam, key: np.ndarray, queries: np.ndarray) -> np.ndarray:
        """One Adam step on the cosine objective sum(1 - cos(q, k))."""
        qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
        knorm = np.linalg.norm(key)
        if knorm < 1e-12:
            return key
        khat = key / knorm
        cos = qn @ khat
        grad = -(qn - cos[:, None] * khat[None, :]).sum(axis=0) / knorm
        new = opt.update({"key": key}, {"key": grad})
        return new["key"]

    def _tap_batch(self, t: int, buffer: dict[int, list[np.ndarray]]):
        """Mixed class-balanced batch: stored pseudo reps for old classes,
        live instructed reps for the current task's classes."""
        classes = self.stats.all_classes(upto_task=t)
        per = math.ceil(self.config.pseudo_batch / len(classes))
        reps, ys = [], []
        current = set(self.stats.classes_of(t))
        for c in classes:
            if c in current:
                live = buffer.get(c) or []
                if not live:
                    continue
                idx = self.rng.integers(0, len(live), size=per)
                reps.append(np.stack([live[i] for i in idx]))
            else:
                reps.append(sample_pseudo(self.stats.instructed[c], per, self.rng))
            ys.extend([c] * per)
        return np.concatenate(reps), np.array(ys)

    # -- inference -------------------------------------------------------

    def infer_task(self, u_reps: np.ndarray) -> np.ndarray:
        """Task numbers (1-indexed) from prompt-free representations."""
        u = np.atleast_2d(u_reps)
        t = self.tasks_trained
        if t < 1:
            raise RuntimeError("no task trained yet")
        if self.config.ablation.tii:
            logits = self.heads.omega.logits(u.astype(np.float64))[:, :t]
            return logits.argmax(axis=1) + 1
        keys = np.array(self._keys())
        return np.array([key_match_tii(q, keys) for q in u])

    def predict(self, x: np.ndarray) -> tuple[int, int]:
        """Two-stage inference: task from the prompt-free representation,
        then the label under that task's prompt."""
        tasks, labels = self.predict_batch(x[None])
        return int(tasks[0]), int(labels[0])

    def predict_batch(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.tasks_trained < 1:
            raise RuntimeError("no task trained yet")
        u = forward_uninstructed(self.backbone, x)
        u = np.atleast_2d(u)
        tasks = self.infer_task(u)
        labels = np.zeros(len(u), dtype=np.intp)
        active = self.heads.active_classes
        for ti in np.unique(tasks):
            sel = tasks == ti
            reps = self._instructed(x[sel], self.final_prompts[ti - 1])
            reps = np.atleast_2d(reps).astype(np.float64)
            if self.config.ablation.tap:
                logits = self.heads.psi.logits(reps)[:, active]
                labels[sel] = np.asarray(active)[logits.argmax(axis=1)]
            else:
                cols = list(self.stats.classes_of(int(ti)))
                logits = self.heads.psi.logits(reps)[:, cols]
                labels[sel] = np.asarray(cols)[logits.argmax(axis=1)]
        return tasks, labels

    def predict_til(self, x: np.ndarray, task: int) -> np.ndarray:
        """Within-task labels given the true task identity (TIL setting)."""
        reps = self._instructed(x, self.final_prompts[task - 1])
        reps = np.atleast_2d(reps).astype(np.float64)
        cols = list(self.stats.classes_of(task))
        logits = self.heads.psi.logits(reps)[:, cols]
        return np.asarray(cols)[logits.argmax(axis=1)]

    def evaluate(self, x: np.ndarray, y: np.ndarray,
                 true_task: int | None = None) -> dict[str, int]:
        """Counts for one test set; `compensated` counts correct labels
        obtained despite a wrong task guess."""
        tasks, labels = self.predict_batch(x)
        y = np.asarray(y)
        out = {"total": len(y), "correct": int(np.sum(labels == y))}
        if true_task is not None:
            task_ok = tasks == true_task
            out["task_correct"] = int(task_ok.sum())
            out["compensated"] = int(np.sum((labels == y) & ~task_ok))
        return out

    def save(self, path) -> None:
        save_model(self, path)


def run_ablation(grid: list[AblationConfig], seeds: list[int], stream_fn,
                 backbone_fn, plan: PromptInjectionPlan | None,
                 config: TrainConfig, keep_models: bool = False) -> list[dict]:
    """Train a fresh model per (toggle row, seed) and report FAA per row.

    `stream_fn(seed)` and `backbone_fn(seed)` supply the task stream and
    the frozen backbone; rows are independent of each other.
    """
    from .harness import accuracy_matrix, metrics

    rows = []
    for abl in grid:
        row: dict = {"label": abl.label(), "ablation": asdict(abl),
                     "faa": [], "ffm": []}
        models = []
        for seed in seeds:
            cfg = replace(config, seed=seed, ablation=abl)
            model = HidePrompt(backbone_fn(seed), plan, cfg)
            a = accuracy_matrix(model, stream_fn(seed))
            faa, _, ffm = metrics(a)
            row["faa"].append(faa)
            row["ffm"].append(ffm)
            if keep_models:
                models.append((model, a))
        row["mean_faa"] = float(np.mean(row["faa"]))
        if keep_models:
            row["models"] = models
        rows.append(row)
    return rows


def key_match_tii(query: np.ndarray, keys: np.ndarray) -> int:
    """Task number (1-indexed) whose key has the highest cosine similarity.

    Zero-norm queries or keys contribute similarity 0; ties resolve to the
    lowest task index.
    """
    if len(keys) == 0:
        raise ValueError("no keys available")
    qn = np.linalg.norm(query)
    sims = np.zeros(len(keys))
    if qn > 0:
        for i, k in enumerate(keys):
            kn = np.linalg.norm(k)
            if kn > 0:
                sims[i] = float(query @ k / (qn * kn))
    return int(np.argmax(sims)) + 1


def cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two representation sets.

    ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) after column centering;
    returns 0 (with a warning) for zero-variance input.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0] or x.shape[0] < 2:
        raise ValueError("need matching sample counts, at least 2")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cross = np.linalg.norm(yc.T @ xc, "fro") ** 2
    nx = np.linalg.norm(xc.T @ xc, "fro")
    ny = np.linalg.norm(yc.T @ yc, "fro")
    if nx == 0 or ny == 0:
        warnings.warn("zero-variance input to cka; returning 0")
        return 0.0
    return float(cross / (nx * ny))


# -- persistence -------------------------------------------------------------

_MODE_CODES = {"ProT": 0.0, "PreT": 1.0}


def save_model(model: HidePrompt, path) -> None:
    """Persist full model state to a HIDE1 container."""
    e: dict[str, np.ndarray] = {}
    bb = model.backbone
    if bb.is_embedding_mode:
        e["backbone/embedding_dim"] = np.array([bb.embedding_dim], dtype=np.float64)
    else:
        for name, arr in bb.params.items():
            e[f"backbone/{name}"] = arr
        c = bb.config
        e["backbone/meta"] = np.array(
            [c.image_size, c.patch_size, c.channels, c.dim, c.depth, c.heads,
             c.mlp_ratio, 0.0 if c.dtype == "float32" else 1.0], dtype=np.float64)
    if model.plan is not None:
        e["plan/meta"] = np.array(
            [_MODE_CODES[model.plan.mode], model.plan.prompt_len, *model.plan.layers],
            dtype=np.float64)
    if model.pool is not None:
        for t, prompt in enumerate(model.pool.prompts, start=1):
            for l, arr in prompt.items():
                e[f"prompt/{t}/{l}"] = arr
    for t, k in enumerate(model._keys(), start=1):
        e[f"key/{t}"] = k
    for t, prompt in enumerate(model.final_prompts, start=1):
        for l, arr in prompt.items():
            e[f"final_prompt/{t}/{l}"] = arr
    e["heads/omega/w"] = model.heads.omega.w
    e["heads/omega/b"] = model.heads.omega.b
    e["heads/psi/w"] = model.heads.psi.w
    e["heads/psi/b"] = model.heads.psi.b
    e["heads/active_classes"] = np.array(model.heads.active_classes, dtype=np.float64)
    for task, classes in model.stats.task_classes.items():
        e[f"registry/{task}"] = np.array(classes, dtype=np.float64)
    for kind, table in (("u", model.stats.uninstructed), ("i", model.stats.instructed)):
        for c, st in table.items():
            base = f"stats/{kind}/{c}/"
            e[base + "mean"] = st.mean
            if st.cov is not None:
                e[base + "cov"] = st.cov
            if st.centroids is not None:
                e[base + "centroids"] = st.centroids
                e[base + "counts"] = st.counts.astype(np.float64)
                e[base + "noise"] = np.array([st.noise_scale])
            e[base + "n"] = np.array([st.n_samples], dtype=np.float64)
    cfg = asdict(model.config)
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    e["meta/config_json"] = np.frombuffer(blob, dtype=np.uint8).astype(np.float64)
    e["meta/state"] = np.array([model.tasks_trained, model.heads.active_tasks],
                               dtype=np.float64)
    cont.save_container(path, e)


def load_model(path) -> HidePrompt:
    """Rebuild a model (for evaluation) from a HIDE1 container."""
    e = cont.load_container(path)
    blob = bytes(e["meta/config_json"].astype(np.uint8).tolist())
    raw = json.loads(blob.decode("utf-8"))
    abl = AblationConfig(**raw.pop("ablation"))
    config = TrainConfig(ablation=abl, **raw)

    if "backbone/embedding_dim" in e:
        backbone = Backbone.embedding_mode(int(e["backbone/embedding_dim"][0]))
        plan = None
    else:
        m = e["backbone/meta"]
        bcfg = BackboneConfig(
            image_size=int(m[0]), patch_size=int(m[1]), channels=int(m[2]),
            dim=int(m[3]), depth=int(m[4]), heads=int(m[5]), mlp_ratio=int(m[6]),
            dtype="float32" if m[7] == 0.0 else "float64")
        params = {}
        for name, arr in e.items():
            if name.startswith("backbone/") and name != "backbone/meta":
                params[name[len("backbone/"):]] = arr.astype(bcfg.np_dtype)
        backbone = Backbone(bcfg, params)
        backbone.freeze()
        pm = e["plan/meta"]
        mode = "ProT" if pm[0] == 0.0 else "PreT"
        plan = PromptInjectionPlan(mode=mode, prompt_len=int(pm[1]),
                                   layers=tuple(int(v) for v in pm[2:]))
    model = HidePrompt(backbone, plan, config)

    tasks = sorted(int(k.split("/")[1]) for k in e if k.startswith("registry/"))
    for t in tasks:
        model.stats.register_task(t, [int(v) for v in e[f"registry/{t}"]])
    for name in e:
        if not name.startswith("stats/"):
            continue
        _, kind, c, fieldname = name.split("/")
        if fieldname != "mean":
            continue
        base = f"stats/{kind}/{c}/"
        if base + "centroids" in e:
            st = ClassStats(MULTI_CENTROID, e[base + "mean"],
                            centroids=e[base + "centroids"],
                            counts=e[base + "counts"].astype(np.int64),
                            noise_scale=float(e[base + "noise"][0]),
                            n_samples=int(e[base + "n"][0]))
        else:
            cov = e.get(base + "cov")
            mode = FULL_GAUSSIAN if cov is not None and cov.ndim == 2 else DIAG_GAUSSIAN
            st = ClassStats(mode, e[base + "mean"], cov=cov,
                            n_samples=int(e[base + "n"][0]))
        table = model.stats.uninstructed if kind == "u" else model.stats.instructed
        table[int(c)] = st

    if model.pool is not None:
        t = 1
        while any(k.startswith(f"prompt/{t}/") for k in e):
            prompt = {}
            for name, arr in e.items():
                if name.startswith(f"prompt/{t}/"):
                    prompt[int(name.split("/")[2])] = arr.astype(
                        backbone.config.np_dtype)
            model.pool.prompts.append(prompt)
            model.pool.freeze_task(t)
            t += 1
    k = 1
    while f"key/{k}" in e:
        model._keys().append(e[f"key/{k}"])
        k += 1
    t = 1
    while any(key.startswith(f"final_prompt/{t}/") for key in e):
        prompt = {}
        for name, arr in e.items():
            if name.startswith(f"final_prompt/{t}/"):
                prompt[int(name.split("/")[2])] = arr.astype(
                    backbone.config.np_dtype if not backbone.is_embedding_mode
                    else np.float64)
        model.final_prompts.append(prompt)
        t += 1
    if backbone.is_embedding_mode:
        model.final_prompts = [{} for _ in tasks]

    model.heads.omega.w = e["heads/omega/w"].astype(np.float64)
    model.heads.omega.b = e["heads/omega/b"].astype(np.float64)
    model.heads.psi.w = e["heads/psi/w"].astype(np.float64)
    model.heads.psi.b = e["heads/psi/b"].astype(np.float64)
    model.heads.active_classes = [int(v) for v in e["heads/active_classes"]]
    model.tasks_trained = int(e["meta/state"][0])
    model.heads.active_tasks = int(e["meta/state"][1])
    return model
