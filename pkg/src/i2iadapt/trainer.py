"""Alternating adversarial optimization with ADAM and staged plans.

Each training step runs ``n_critic`` critic updates (generators frozen by
construction: critics only ever see detached translations) followed by one
generator update with critics excluded from the parameter step.  All
randomness flows through the serializable ``TrainState`` so a fixed
(seed, config, data) triple reproduces loss traces bit for bit, including
across checkpoint/resume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tape
from .data import Dataset, batch_at
from .losses import LambdaConfig, RoutingRules, StagePlan, critic_losses, q_total
from .models import ModelBundle


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    total_steps: int = 1000
    n_critic: int = 1
    seed: int = 0
    grad_clip: Optional[float] = None
    lr_overrides: dict = field(default_factory=dict)   # net-name prefix -> lr

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ValueError("adam betas must lie in [0, 1)")
        return self


class TrainState:
    """Step counter, per-parameter ADAM moments, RNG, and stage bookkeeping."""

    HISTORY = 256

    def __init__(self, seed: int = 0):
        self.step = 0
        self.stage_index = 0
        self.stage_actions_applied = 0
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_t: dict[str, int] = {}
        self.rng = np.random.default_rng(seed)
        self.loss_history: list[float] = []

    def record_loss(self, value: float):
        self.loss_history.append(float(value))
        if len(self.loss_history) > self.HISTORY:
            del self.loss_history[0]

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "stage_index": self.stage_index,
            "stage_actions_applied": self.stage_actions_applied,
            "adam_t": dict(sorted(self.adam_t.items())),
            "rng_state": self.rng.bit_generator.state,
            "loss_history": self.loss_history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainState":
        st = cls()
        st.step = int(d["step"])
        st.stage_index = int(d["stage_index"])
        st.stage_actions_applied = int(d.get("stage_actions_applied", 0))
        st.adam_t = {k: int(v) for k, v in d["adam_t"].items()}
        st.rng = np.random.default_rng(0)
        st.rng.bit_generator.state = d["rng_state"]
        st.loss_history = [float(x) for x in d["loss_history"]]
        return st


def adam_update(param, grad: np.ndarray, cid: str, state: TrainState, cfg: TrainConfig,
                lr: Optional[float] = None):
    """Standard bias-corrected ADAM step, in the parameter's dtype."""
    if grad.shape != param.data.shape:
        raise ad.ShapeError(f"adam_update: grad {grad.shape} vs param {param.data.shape} for {cid}")
    dt = param.data.dtype.type
    m = state.adam_m.get(cid)
    if m is None:
        m = state.adam_m[cid] = np.zeros_like(param.data)
        state.adam_v[cid] = np.zeros_like(param.data)
        state.adam_t[cid] = 0
    v = state.adam_v[cid]
    state.adam_t[cid] += 1
    t = state.adam_t[cid]
    b1, b2 = dt(cfg.adam_beta1), dt(cfg.adam_beta2)
    m *= b1
    m += (dt(1) - b1) * grad
    v *= b2
    v += (dt(1) - b2) * grad * grad
    mhat = m / dt(1 - cfg.adam_beta1 ** t)
    vhat = v / dt(1 - cfg.adam_beta2 ** t)
    step_lr = dt(cfg.learning_rate if lr is None else lr)
    param.data -= step_lr * mhat / (np.sqrt(vhat) + dt(cfg.adam_eps))


def _lr_for(cid: str, cfg: TrainConfig) -> Optional[float]:
    for prefix, lr in cfg.lr_overrides.items():
        if cid.startswith(prefix):
            return float(lr)
    return None


def _clip_grads(store, ids, clip: float):
    total = 0.0
    for cid in ids:
        g = store.get(cid).grad
        if g is not None:
            total += float((g.astype(np.float64) ** 2).sum())
    norm = np.sqrt(total)
    if norm > clip > 0:
        factor = np.float32(clip / norm)
        for cid in ids:
            g = store.get(cid).grad
            if g is not None:
                g *= factor


def _step_params(bundle: ModelBundle, ids, state: TrainState, cfg: TrainConfig):
    store = bundle.store
    if cfg.grad_clip:
        _clip_grads(store, ids, cfg.grad_clip)
    for cid in sorted(ids):
        if not store.is_trainable(cid):
            continue
        t = store.get(cid)
        if t.grad is None:
            continue
        adam_update(t, t.grad, cid, state, cfg, lr=_lr_for(cid, cfg))


def freeze(bundle: ModelBundle, net_names) -> None:
    bundle.store.freeze(bundle.net_param_ids(*_aslist(net_names)))


def unfreeze(bundle: ModelBundle, net_names) -> None:
    bundle.store.unfreeze(bundle.net_param_ids(*_aslist(net_names)))


def _aslist(x):
    return [x] if isinstance(x, str) else list(x)


def _require_finite(value: float, what: str, terms: Optional[dict] = None):
    if not np.isfinite(value):
        detail = f" (terms: {terms})" if terms else ""
        raise NumericError(f"non-finite {what} loss: {value}{detail}")


def train_step(bundle: ModelBundle, src_batch, tgt_batch, state: TrainState,
               cfg: TrainConfig, lcfg: LambdaConfig, rules: Optional[RoutingRules] = None) -> dict:
    """One alternating step; returns the flat loss record for this step."""
    rules = rules or RoutingRules()
    record = {"step": state.step, "q_c": 0.0, "q_z": 0.0, "q_tr": 0.0, "q_idA": 0.0,
              "q_idB": 0.0, "q_cyc": 0.0, "q_trc": 0.0, "total": 0.0,
              "d_x": 0.0, "d_y": 0.0, "d_z": 0.0}

    critic_ids = bundle.critic_param_ids()
    for _ in range(cfg.n_critic):
        with Tape() as tape:
            d = critic_losses(bundle, src_batch, tgt_batch, lcfg, rules, state.rng)
            if not d:
                break
            total = None
            for name in sorted(d):
                record[name] = d[name].item()
                _require_finite(record[name], name)
                total = d[name] if total is None else ad.add(total, d[name])
            ad.backward(total, tape)
            _step_params(bundle, critic_ids, state, cfg)
        bundle.store.zero_grads()

    with Tape() as tape:
        total, terms = q_total(bundle, src_batch, tgt_batch, lcfg, rules, state.rng)
        record.update(terms)
        record["total"] = total.item()
        _require_finite(record["total"], "generator", terms)
        if total.requires_grad:
            ad.backward(total, tape)
            gen_ids = [cid for cid in bundle.store.trainable_ids() if cid not in set(critic_ids)]
            _step_params(bundle, gen_ids, state, cfg)
    bundle.store.zero_grads()

    state.step += 1
    state.record_loss(record["total"])
    return record


def run_steps(bundle: ModelBundle, src_train: Dataset, tgt_train: Dataset, state: TrainState,
              cfg: TrainConfig, lcfg: LambdaConfig, rules: Optional[RoutingRules] = None,
              steps: Optional[int] = None, end_step: Optional[int] = None,
              hook: Optional[Callable[[dict], None]] = None):
    """Drive train_step with deterministic per-step batches until end_step."""
    if end_step is None:
        end_step = state.step + (cfg.total_steps if steps is None else steps)
    while state.step < end_step:
        sb = batch_at(src_train, cfg.batch_size, cfg.seed * 2 + 1, state.step)
        tb = batch_at(tgt_train, cfg.batch_size, cfg.seed * 2 + 2, state.step)
        record = train_step(bundle, sb, tb, state, cfg, lcfg, rules)
        if hook is not None:
            hook(record)
    return state


STAGE_ACTIONS = ("untie_encoders", "freeze", "unfreeze")


def apply_stage_actions(bundle: ModelBundle, actions) -> None:
    for action in actions:
        kind, arg = action
        if kind == "untie_encoders":
            bundle.untie_encoders()
        elif kind == "freeze":
            freeze(bundle, arg)
        elif kind == "unfreeze":
            unfreeze(bundle, arg)
        else:
            raise ValueError(f"unknown stage action {kind!r}; known: {STAGE_ACTIONS}")


def run_stage_plan(bundle: ModelBundle, plan: StagePlan, src_train: Dataset, tgt_train: Dataset,
                   state: TrainState, cfg: TrainConfig, rules: Optional[RoutingRules] = None,
                   hook: Optional[Callable[[dict], None]] = None,
                   stage_boundary_hook: Optional[Callable[[int], None]] = None) -> TrainState:
    """Execute stages sequentially, applying freeze/untie transitions once.

    Resuming from a checkpoint skips completed stages and never re-applies
    their transition actions.
    """
    steps = plan.steps_for(cfg.total_steps)
    start = 0
    for i, (stage, n) in enumerate(zip(plan.stages, steps)):
        end = start + n
        if state.step < end:
            state.stage_index = i
            if state.stage_actions_applied <= i:
                apply_stage_actions(bundle, stage.actions)
                state.stage_actions_applied = i + 1
            run_steps(bundle, src_train, tgt_train, state, cfg, stage.lambdas.validate(), rules,
                      end_step=end, hook=hook)
            if stage_boundary_hook is not None:
                stage_boundary_hook(i)
        start = end
    return state
