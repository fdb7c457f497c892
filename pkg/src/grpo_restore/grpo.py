"""GRPO post-training: group rollouts, clipped surrogate, KL and entropy
terms, supervised/consistency losses, Adam, and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import backbone as bb
from . import policy as pol
from .backbone import Candidate
from .policy import PolicySnapshot
from .rewards import Degradation, RewardModel

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "step",
    "epoch",
    "total_loss",
    "rl_loss",
    "sup_loss",
    "cons_loss",
    "reward_mean",
    "reward_std",
    "kl",
    "entropy",
    "clip_frac",
)

CHECKPOINT_FORMAT = "grpo-restore-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    group_size: int = 4
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    entropy_tau: float = 0.01
    adv_eps: float = 1e-8
    lr: float = 3e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    head_lr_mult: float = 6.0
    epochs: int = 30
    sup_start: float = 0.35
    sup_end: float = 0.1
    cons_start: float = 0.2
    cons_end: float = 0.05
    hard_ratio: float = 0.3
    patch: int = 128
    augment: bool = True
    max_steps: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.patch < 8:
            raise ValueError("patch must be >= 8")
        for name in ("clip_eps", "adv_eps", "lr", "adam_eps", "head_lr_mult"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("kl_beta", "entropy_tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.hard_ratio <= 1.0:
            raise ValueError("hard_ratio must lie in (0, 1]")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# --- group statistics -------------------------------------------------------


def advantages(rewards: Sequence[float], eps: float = 1e-8) -> np.ndarray:
    """Group-normalised advantages; population variance, ``eps`` under the root."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    centred = r - r.mean()
    return centred / math.sqrt(float(np.mean(centred**2)) + eps)


def best_index(rewards: Sequence[float]) -> int:
    """argmax with ties going to the lowest index."""
    return int(np.argmax(np.asarray(rewards, dtype=np.float64)))


@dataclass
class RolloutGroup:
    sample_id: str
    degradation: Degradation
    x: np.ndarray
    truth: np.ndarray
    candidates: list
    advantages: np.ndarray
    best: int

    @property
    def rewards(self) -> np.ndarray:
        return np.array([c.reward.combined for c in self.candidates])

    @property
    def actions(self) -> np.ndarray:
        return np.stack([c.action for c in self.candidates])

    @property
    def logprob_old(self) -> np.ndarray:
        return np.array([c.logprob_old for c in self.candidates])


def group_rollout(
    x,
    truth,
    degradation: Degradation,
    old: PolicySnapshot,
    backbone_params,
    group_size: int,
    rng: np.random.Generator,
    reward_model: RewardModel,
    sample_id: str = "",
    adv_eps: float = 1e-8,
) -> RolloutGroup:
    """Sample ``group_size`` actions from the old policy, restore and score each."""
    out = pol.policy_forward(old.params, x)
    cands = []
    for g in range(group_size):
        a = pol.sample_action(out, rng)
        y = bb.restore(x, a, backbone_params)
        cand = Candidate(a, y, pol.joint_logprob(out, a))
        try:
            cand.reward = reward_model(degradation, x, cand.clamped, truth)
        except Exception as exc:
            raise RuntimeError(f"reward failed for sample {sample_id!r}, candidate {g}: {exc}") from exc
        cands.append(cand)
    rewards = [c.reward.combined for c in cands]
    return RolloutGroup(
        sample_id, degradation, np.asarray(x), np.asarray(truth), cands, advantages(rewards, adv_eps), best_index(rewards)
    )


# --- policy objective terms --------------------------------------------------


def _logprobs(out, actions) -> np.ndarray:
    return pol.joint_logprob(out, np.atleast_2d(actions))


def _chain_logprob(out, actions, dlp) -> tuple[np.ndarray, np.ndarray]:
    """Sum_i dlp[i] * d log pi(a_i) / d(alpha, beta)."""
    da = np.zeros(4)
    db = np.zeros(4)
    for a, w in zip(actions, dlp):
        if w == 0.0:
            continue
        ga, gb = pol.logprob_grads(out, a)
        da += w * ga
        db += w * gb
    return da, db


def surrogate_terms(adv, logp, logp_old, clip_eps: float):
    """Clipped surrogate value, its derivative w.r.t. each log-prob, and the
    fraction of candidates sitting in a clipped (zero-gradient) region."""
    adv = np.asarray(adv, dtype=np.float64)
    ratio = np.exp(np.asarray(logp) - np.asarray(logp_old))
    if not np.all(np.isfinite(ratio)):
        bad = int(np.flatnonzero(~np.isfinite(ratio))[0])
        raise FloatingPointError(f"non-finite likelihood ratio at candidate {bad}")
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    per = np.minimum(ratio * adv, clipped * adv)
    active = ((adv > 0) & (ratio > 1.0 + clip_eps)) | ((adv < 0) & (ratio < 1.0 - clip_eps))
    g = adv.size
    dlp = np.where(active, 0.0, adv * ratio) / g
    return float(per.mean()), dlp, float(active.mean())


def kl_terms(logp, logp_old, logp_ref):
    """Ratio-weighted KL estimate against the reference and its log-prob derivative."""
    logp = np.asarray(logp)
    ratio = np.exp(logp - np.asarray(logp_old))
    diff = logp - np.asarray(logp_ref)
    g = logp.size
    return float(np.mean(ratio * diff)), ratio * (diff + 1.0) / g


def surrogate(group: RolloutGroup, params, clip_eps: float):
    """(value, policy gradients of the value, clip fraction)."""
    out = pol.policy_forward(params, group.x)
    acts = group.actions
    val, dlp, frac = surrogate_terms(group.advantages, _logprobs(out, acts), group.logprob_old, clip_eps)
    da, db = _chain_logprob(out, acts, dlp)
    return val, pol.head_backward(params, out, da, db), frac


def kl_estimate(group: RolloutGroup, params, reference: PolicySnapshot):
    out = pol.policy_forward(params, group.x)
    ref = pol.policy_forward(reference.params, group.x)
    acts = group.actions
    val, dlp = kl_terms(_logprobs(out, acts), group.logprob_old, _logprobs(ref, acts))
    da, db = _chain_logprob(out, acts, dlp)
    return val, pol.head_backward(params, out, da, db)


@dataclass
class RLTerms:
    loss: float
    surrogate: float
    kl: float
    entropy: float
    clip_frac: float
    grads: dict


def rl_loss(group: RolloutGroup, params, reference: PolicySnapshot, cfg: TrainConfig) -> RLTerms:
    """-surrogate + beta * KL - tau * entropy, with policy gradients."""
    out = pol.policy_forward(params, group.x)
    ref = pol.policy_forward(reference.params, group.x)
    acts = group.actions
    lp = _logprobs(out, acts)
    s_val, s_dlp, frac = surrogate_terms(group.advantages, lp, group.logprob_old, cfg.clip_eps)
    k_val, k_dlp = kl_terms(lp, group.logprob_old, _logprobs(ref, acts))
    h = pol.entropy(out)
    da, db = _chain_logprob(out, acts, -s_dlp + cfg.kl_beta * k_dlp)
    ha, hb = pol.entropy_grads(out)
    da -= cfg.entropy_tau * ha
    db -= cfg.entropy_tau * hb
    loss = -s_val + cfg.kl_beta * k_val - cfg.entropy_tau * h
    return RLTerms(loss, s_val, k_val, h, frac, pol.head_backward(params, out, da, db))


# --- supervised terms ------------------------------------------------------


@dataclass
class SupTerms:
    sup: float
    cons: float
    grad_sup: dict
    grad_cons: dict


def sup_losses(group: RolloutGroup, backbone_params, det_action, target=None) -> SupTerms:
    """l1(best, truth) and l1(best, deterministic output).

    The best candidate is re-rendered with the current backbone; in the
    consistency term it is a fixed target (``target`` overrides it) and only
    the deterministic path carries gradient.
    """
    x = group.x
    a_best = group.candidates[group.best].action
    split_best = bb.bands(x, a_best[0], a_best[1])
    y_best = bb.restore(x, a_best, backbone_params, split_best)
    if y_best.shape != np.shape(group.truth):
        raise ValueError(f"dimension mismatch: {y_best.shape} vs {np.shape(group.truth)}")
    if target is None:
        target = y_best
    split_det = bb.bands(x, det_action[0], det_action[1])
    y_det = bb.restore(x, det_action, backbone_params, split_det)
    sup = bb.l1(y_best, group.truth)
    cons = bb.l1(target, y_det)
    g_sup = bb.backbone_grads(x, a_best, backbone_params, bb.l1_grad(y_best, group.truth), split_best)
    g_cons = bb.backbone_grads(x, det_action, backbone_params, bb.l1_grad(y_det, target), split_det)
    return SupTerms(sup, cons, g_sup, g_cons)


def anneal(start: float, end: float, epoch: int, total_epochs: int) -> float:
    """Linear schedule hitting ``start`` at epoch 0 and ``end`` at the last epoch."""
    if total_epochs <= 1:
        return float(start)
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return start + (end - start) * epoch / (total_epochs - 1)


def loss_weights(cfg: TrainConfig, epoch: int) -> tuple[float, float]:
    return (
        anneal(cfg.sup_start, cfg.sup_end, epoch, cfg.epochs),
        anneal(cfg.cons_start, cfg.cons_end, epoch, cfg.epochs),
    )


@dataclass
class TotalLoss:
    total: float
    rl: RLTerms
    sup: SupTerms
    lambda_sup: float
    lambda_cons: float
    policy_grads: dict
    backbone_grads: dict


def total_loss(
    group: RolloutGroup,
    params,
    backbone_params,
    reference: PolicySnapshot,
    cfg: TrainConfig,
    epoch: int,
    det_action=None,
    target=None,
    weights: Optional[tuple[float, float]] = None,
) -> TotalLoss:
    """L_RL + lambda_sup * L_sup + lambda_cons * L_cons.

    The policy is trained by the RL term only; the backbone by the two l1
    terms.  ``det_action`` defaults to the current policy's Beta means.
    """
    rl = rl_loss(group, params, reference, cfg)
    if det_action is None:
        det_action = pol.deterministic_action(pol.policy_forward(params, group.x))
    sup = sup_losses(group, backbone_params, det_action, target)
    lam_sup, lam_cons = weights if weights is not None else loss_weights(cfg, epoch)
    total = rl.loss + lam_sup * sup.sup + lam_cons * sup.cons
    bgrads = {k: lam_sup * sup.grad_sup[k] + lam_cons * sup.grad_cons[k] for k in sup.grad_sup}
    return TotalLoss(total, rl, sup, lam_sup, lam_cons, rl.grads, bgrads)


# --- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    skipped: int = 0

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "skipped": self.skipped,
            "m": pol.params_to_json(self.m),
            "v": pol.params_to_json(self.v),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AdamState":
        return cls(pol.params_from_json(obj["m"]), pol.params_from_json(obj["v"]), int(obj["t"]), int(obj["skipped"]))


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    multipliers: Optional[dict] = None,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict:
    """One bias-corrected Adam update.  ``multipliers`` maps param name to an
    LR factor.  A step with any non-finite gradient is skipped entirely."""
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient; Adam step skipped (%d so far)", state.skipped)
        return params
    multipliers = multipliers or {}
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * multipliers.get(name, 1.0) * (m / c1) / (np.sqrt(v / c2) + eps)
        out[name] = p - step
    return out


# --- training loop -----------------------------------------------------------


@dataclass
class Sample:
    id: str
    degradation: Degradation
    degraded: np.ndarray
    truth: np.ndarray


@dataclass
class StepMetrics:
    step: int
    epoch: int
    total_loss: float
    rl_loss: float
    sup_loss: float
    cons_loss: float
    reward_mean: float
    reward_std: float
    kl: float
    entropy: float
    clip_frac: float

    def row(self) -> list:
        return [getattr(self, f.name) for f in dataclasses.fields(self)]


@dataclass
class TrainState:
    policy: dict
    backbone: dict
    reference: PolicySnapshot
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    order: Optional[np.ndarray] = None  # sample order of the current epoch
    pos: int = 0  # next index into ``order``


def init_state(cfg: TrainConfig, channels: int = 3) -> TrainState:
    init_rng, loop_rng = np.random.default_rng(cfg.seed).spawn(2)
    policy = pol.init_params(init_rng)
    return TrainState(
        policy=policy,
        backbone=bb.init_params(channels),
        reference=PolicySnapshot.capture(policy, "reference"),
        adam=AdamState(),
        rng=loop_rng,
    )


def _prefixed(policy: dict, backbone: dict) -> dict:
    out = {f"policy/{k}": v for k, v in policy.items()}
    out.update({f"backbone/{k}": v for k, v in backbone.items()})
    return out


def _split(joined: dict) -> tuple[dict, dict]:
    policy = {k[len("policy/") :]: v for k, v in joined.items() if k.startswith("policy/")}
    backbone = {k[len("backbone/") :]: v for k, v in joined.items() if k.startswith("backbone/")}
    return policy, backbone


def crop_and_flip(x, t, patch: int, augment: bool, rng: np.random.Generator):
    h, w = x.shape[:2]
    if h > patch or w > patch:
        ph, pw = min(h, patch), min(w, patch)
        i = int(rng.integers(0, h - ph + 1))
        j = int(rng.integers(0, w - pw + 1))
        x, t = x[i : i + ph, j : j + pw], t[i : i + ph, j : j + pw]
    if augment:
        if rng.random() < 0.5:
            x, t = x[:, ::-1], t[:, ::-1]
        if rng.random() < 0.5:
            x, t = x[::-1], t[::-1]
    return np.ascontiguousarray(x), np.ascontiguousarray(t)


def train_step(state: TrainState, sample: Sample, cfg: TrainConfig, reward_model: RewardModel) -> StepMetrics:
    x, t = crop_and_flip(sample.degraded, sample.truth, cfg.patch, cfg.augment, state.rng)
    old = PolicySnapshot.capture(state.policy, "old")
    group = group_rollout(
        x, t, sample.degradation, old, state.backbone, cfg.group_size, state.rng, reward_model, sample.id, cfg.adv_eps
    )
    res = total_loss(group, state.policy, state.backbone, state.reference, cfg, state.epoch)
    if not math.isfinite(res.total):
        raise FloatingPointError(f"non-finite loss on sample {sample.id!r} at step {state.step}")
    joined = _prefixed(state.policy, state.backbone)
    grads = _prefixed(res.policy_grads, res.backbone_grads)
    mult = {k: cfg.head_lr_mult for k in joined if k.startswith("policy/")}
    joined = adam_step(joined, grads, state.adam, cfg.lr, mult, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    state.policy, state.backbone = _split(joined)
    rewards = group.rewards
    m = StepMetrics(
        step=state.step,
        epoch=state.epoch,
        total_loss=res.total,
        rl_loss=res.rl.loss,
        sup_loss=res.sup.sup,
        cons_loss=res.sup.cons,
        reward_mean=float(rewards.mean()),
        reward_std=float(rewards.std()),
        kl=res.rl.kl,
        entropy=res.rl.entropy,
        clip_frac=res.rl.clip_frac,
    )
    state.step += 1
    return m


def train(
    samples: Sequence[Sample],
    cfg: TrainConfig,
    reward_model: RewardModel,
    state: Optional[TrainState] = None,
    on_step: Optional[Callable[[StepMetrics], None]] = None,
) -> tuple[TrainState, list]:
    """Run (or resume) training over the curated samples.

    Each step refreshes the old-policy snapshot, rolls out one group and
    applies a single Adam update.  Stops after ``cfg.epochs`` epochs or
    ``cfg.max_steps`` steps, whichever comes first.
    """
    if not samples:
        raise ValueError("training corpus is empty")
    if state is None:
        state = init_state(cfg, np.shape(samples[0].degraded)[2])
    history = []
    while state.epoch < cfg.epochs:
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break
        if state.order is None:
            state.order = state.rng.permutation(len(samples))
            state.pos = 0
        elif len(state.order) != len(samples):
            raise ValueError(f"resumed epoch covers {len(state.order)} samples, corpus has {len(samples)}")
        while state.pos < len(state.order):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                return state, history
            m = train_step(state, samples[int(state.order[state.pos])], cfg, reward_model)
            state.pos += 1
            history.append(m)
            if on_step is not None:
                on_step(m)
        log.info(
            "epoch %d: reward %.4f",
            state.epoch,
            float(np.mean([h.reward_mean for h in history if h.epoch == state.epoch] or [float("nan")])),
        )
        state.epoch += 1
        state.order = None
    return state, history


class MetricsWriter:
    """Append-only CSV log with the fixed metrics header."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        exists = append and self.path.exists()
        self._fh = open(self.path, "a" if exists else "w", newline="")
        self._w = csv.writer(self._fh)
        if not exists:
            self._w.writerow(METRICS_HEADER)

    def __call__(self, m: StepMetrics) -> None:
        self._w.writerow([repr(v) if isinstance(v, float) else v for v in m.row()])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(METRICS_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(METRICS_HEADER)} fields, got {len(rec)}")
            try:
                rows.append(
                    StepMetrics(int(rec[0]), int(rec[1]), *(float(v) for v in rec[2:]))
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return rows


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "progress": {
            "epoch": state.epoch,
            "step": state.step,
            "order": None if state.order is None else [int(i) for i in state.order],
            "pos": state.pos,
        },
        "policy": pol.params_to_json(state.policy),
        "reference": pol.params_to_json(state.reference.params),
        "backbone": pol.params_to_json(state.backbone),
        "adam": state.adam.to_json(),
        "rng": state.rng.bit_generator.state,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[TrainState, dict]:
    obj = json.loads(Path(path).read_text())
    if obj.get("format") != CHECKPOINT_FORMAT or obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    template = pol.init_params(np.random.default_rng(0))
    policy = pol.params_from_json(obj["policy"], template)
    reference = pol.params_from_json(obj["reference"], template)
    backbone = pol.params_from_json(obj["backbone"])
    channels = len(backbone["s"])
    for k, v in bb.init_params(channels).items():
        if k not in backbone or backbone[k].shape != v.shape:
            raise ValueError(f"{path}: backbone parameter {k!r} missing or mis-shaped")
    rng = np.random.default_rng()
    rng.bit_generator.state = obj["rng"]
    state = TrainState(
        policy=policy,
        backbone=backbone,
        reference=PolicySnapshot.capture(reference, "reference"),
        adam=AdamState.from_json(obj["adam"]),
        rng=rng,
        epoch=int(obj["progress"]["epoch"]),
        step=int(obj["progress"]["step"]),
        order=None if obj["progress"].get("order") is None else np.array(obj["progress"]["order"], dtype=np.int64),
        pos=int(obj["progress"].get("pos", 0)),
    )
    return state, obj["config"]


def epoch_curves(rows: Iterable[StepMetrics]) -> list:
    """Per-epoch mean and population std of reward and total loss."""
    by_epoch: dict = {}
    for r in rows:
        by_epoch.setdefault(r.epoch, []).append(r)
    out = []
    for ep in sorted(by_epoch):
        rs = np.array([r.reward_mean for r in by_epoch[ep]])
        ls = np.array([r.total_loss for r in by_epoch[ep]])
        out.append(
            {
                "epoch": ep,
                "steps": len(rs),
                "reward_mean": float(rs.mean()),
                "reward_std": float(rs.std()),
                "total_loss_mean": float(ls.mean()),
                "total_loss_std": float(ls.std()),
            }
        )
    return out
