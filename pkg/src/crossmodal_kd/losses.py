"""Distillation and supervision losses, the decay schedule, and composite objectives.

Cross-entropies treat both sides as softmax distributions over coordinate
bins (no temperature).  Target distributions (teacher logits, ``L_ss``,
``L_tt``) are converted to constants before use, so no gradient reaches them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .nn import Conv2d, Model, SimCCLogits, forward_features, forward_head


@dataclass(frozen=True)
class LossWeights:
    lambda_kp: float = 0.1
    lambda_fm: float = 1e-3
    lambda_lg: float = 1e-3
    lambda_dikd: float = 1.0
    lambda_ri: float = 1e-3
    lambda_fi: float = 1e-3
    alpha: int = 10
    T: int = 60

    def __post_init__(self):
        for name in ("lambda_kp", "lambda_fm", "lambda_lg", "lambda_dikd", "lambda_ri", "lambda_fi"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if not 0 <= self.alpha <= self.T:
            raise ConfigError(f"alpha={self.alpha} outside [0, T={self.T}]")


@dataclass
class SimCCTarget:
    x: np.ndarray  # N x K x L
    y: np.ndarray
    visibility: np.ndarray  # N x K, entries in {0, 1}

    def validate(self, one_hot: bool = True):
        if self.x.shape != self.y.shape or self.x.shape[:2] != self.visibility.shape:
            raise ShapeError("target axes and visibility disagree on N, K")
        if not np.all((self.visibility == 0) | (self.visibility == 1)):
            raise ContractError("visibility entries must be 0 or 1")
        for axis in (self.x, self.y):
            hidden = self.visibility == 0
            if np.any(axis[hidden] != 0):
                raise ContractError("invisible keypoints must have all-zero targets")
            if one_hot:
                rows = axis[~hidden]
                if np.any((rows != 0).sum(axis=-1) != 1) or np.any(rows.sum(axis=-1) != 1):
                    raise ContractError("visible targets must be one-hot")


# ---------------------------------------------------------------------------
# adapters


def _identity_or_uniform(in_ch, out_ch, rng) -> Conv2d:
    conv = Conv2d(in_ch, out_ch, kernel=1, rng=rng)
    if in_ch == out_ch:
        conv.weight.values[...] = np.eye(in_ch).reshape(in_ch, in_ch, 1, 1)
    return conv


class ChannelAdapter:
    """1x1 convolution mapping student feature channels onto the teacher's."""

    def __init__(self, student_channels: int, teacher_channels: int, seed: int = 0):
        self.conv = _identity_or_uniform(
            student_channels, teacher_channels, np.random.default_rng(seed)
        )

    def __call__(self, features: Tensor) -> Tensor:
        return self.conv(features)

    def parameters(self) -> dict:
        return {f"conv.{k}": v for k, v in self.conv.parameters().items()}


class InjectionAdapter:
    """Channel bridges for cross-injection: ``fi`` maps teacher->student
    channels (teacher features into the student head), ``ri`` maps
    student->teacher channels (student features into the teacher head)."""

    def __init__(self, teacher_channels: int, student_channels: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.fi = _identity_or_uniform(teacher_channels, student_channels, rng)
        self.ri = _identity_or_uniform(student_channels, teacher_channels, rng)

    def parameters(self) -> dict:
        return {
            **{f"fi.{k}": v for k, v in self.fi.parameters().items()},
            **{f"ri.{k}": v for k, v in self.ri.parameters().items()},
        }


# ---------------------------------------------------------------------------
# losses


def softmax(values: np.ndarray) -> np.ndarray:
    z = values - values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_pair(a: SimCCLogits, b: SimCCLogits):
    if a.x.shape != b.x.shape or a.y.shape != b.y.shape:
        raise ShapeError(f"logit shapes differ: {a.x.shape} vs {b.x.shape}")


def _soft_cross_entropy(target: SimCCLogits, student: SimCCLogits) -> Tensor:
    """-(1/N) sum_{n,k,i} softmax(target) * log softmax(student), both axes."""
    _check_pair(target, student)
    n = student.x.shape[0]
    total = None
    for t_axis, s_axis in zip(target, student):
        p = Tensor(softmax(t_axis.values))
        term = ag.sum(ag.mul(ag.log_softmax(s_axis), p))
        total = term if total is None else ag.add(total, term)
    return ag.scale(total, -1.0 / n)


def feature_mimic_loss(
    f_teacher: Tensor, f_student: Tensor, adapter: ChannelAdapter, batch_mean: bool = True
) -> Tensor:
    """Squared error between teacher features and adapted student features,
    divided by C*H*W and (by default) averaged over the batch."""
    adapted = adapter(f_student)
    if adapted.shape != f_teacher.shape:
        raise ShapeError(
            f"adapted student features {adapted.shape} != teacher features {f_teacher.shape}"
        )
    loss = ag.mse(ag.detach(f_teacher), adapted)
    return loss if batch_mean else ag.scale(loss, adapted.shape[0])


def logits_distill_loss(l_teacher: SimCCLogits, l_student: SimCCLogits) -> Tensor:
    return _soft_cross_entropy(l_teacher, l_student)


def keypoint_loss(target: SimCCTarget, l_student: SimCCLogits) -> Tensor:
    """Visibility-masked one-hot cross-entropy with the 1/L factor and plain
    sums over samples and keypoints."""
    if target.x.shape != l_student.x.shape or target.y.shape != l_student.y.shape:
        raise ShapeError(f"target {target.x.shape} vs logits {l_student.x.shape}")
    w = target.visibility
    if not np.all((w == 0) | (w == 1)):
        raise ContractError("visibility entries must be 0 or 1")
    bins = target.x.shape[-1]
    total = None
    for p_gt, s_axis in ((target.x, l_student.x), (target.y, l_student.y)):
        weight = Tensor(w[..., None] * p_gt / bins)
        term = ag.sum(ag.mul(ag.log_softmax(s_axis), weight))
        total = term if total is None else ag.add(total, term)
    return ag.scale(total, -1.0)


class CrossLogits(NamedTuple):
    tt: SimCCLogits
    ss: SimCCLogits
    ts: SimCCLogits | None
    st: SimCCLogits | None
    f_teacher: Tensor
    f_student: Tensor


def cross_inject(
    teacher: Model,
    student: Model,
    adapters: InjectionAdapter,
    batch_rgb,
    batch_thermal,
    paths: tuple = ("ts", "st"),
) -> CrossLogits:
    """Unimodal and cross-injected logits for one paired batch.

    ``ts``: teacher backbone -> ``adapters.fi`` -> student head.
    ``st``: student backbone -> ``adapters.ri`` -> teacher head.
    The teacher must be frozen.
    """
    if not teacher.frozen:
        raise ContractError("cross_inject requires a frozen teacher")
    n_rgb, n_th = np.shape(getattr(batch_rgb, "values", batch_rgb))[0], np.shape(
        getattr(batch_thermal, "values", batch_thermal)
    )[0]
    if n_rgb != n_th:
        raise ContractError(f"unaligned batches: {n_rgb} rgb vs {n_th} thermal")
    with ag.no_grad():
        f_t = forward_features(teacher, batch_rgb)
        l_tt = forward_head(teacher.head, f_t)
    f_s = forward_features(student, batch_thermal)
    l_ss = forward_head(student.head, f_s)
    l_ts = forward_head(student.head, adapters.fi(f_t)) if "ts" in paths else None
    l_st = forward_head(teacher.head, adapters.ri(f_s)) if "st" in paths else None
    return CrossLogits(l_tt, l_ss, l_ts, l_st, f_t, f_s)


def dikd_ri_loss(l_ss: SimCCLogits, l_ts: SimCCLogits) -> Tensor:
    return _soft_cross_entropy(l_ss, l_ts)


def dikd_fi_loss(l_tt: SimCCLogits, l_st: SimCCLogits) -> Tensor:
    return _soft_cross_entropy(l_tt, l_st)


def injection_losses(cross: CrossLogits, swap: bool = False) -> tuple:
    """(ri, fi) as printed; ``swap`` exchanges the two for prose-faithful wiring.

    A term whose logits were not computed comes back as ``None``.
    """
    a = dikd_ri_loss(cross.ss, cross.ts) if cross.ts is not None else None
    b = dikd_fi_loss(cross.tt, cross.st) if cross.st is not None else None
    return (b, a) if swap else (a, b)


# ---------------------------------------------------------------------------
# weighting


def _weighted_sum(terms):
    """sum(coef * value) skipping missing values and zero coefficients.

    Returns ``None`` when every term was skipped.
    """
    acc = None
    for coef, value in terms:
        if value is None or coef == 0:
            continue
        if isinstance(value, Tensor):
            part = ag.scale(value, coef)
        else:
            part = coef * float(value)
        if acc is None:
            acc = part
        elif isinstance(acc, Tensor) or isinstance(part, Tensor):
            acc = ag.add(acc, part) if isinstance(acc, Tensor) else ag.add(part, Tensor(acc))
        else:
            acc = acc + part
    return acc


def _or_zero(x):
    return 0.0 if x is None else x


def dikd_total(ri, fi, w: LossWeights):
    return _or_zero(_weighted_sum([(w.lambda_ri, ri), (w.lambda_fi, fi)]))


def decay_factor(t: int, w: LossWeights) -> float:
    if not 1 <= t <= w.T:
        raise ContractError(f"epoch {t} outside [1, {w.T}]")
    if t <= w.alpha:
        return 1.0
    # integer numerator keeps gamma(T) == alpha / T exactly
    return (w.T - (t - w.alpha)) / w.T


def ktl_total(l_kp, l_fm, l_lg, l_dikd, t: int, w: LossWeights):
    gamma = decay_factor(t, w)
    distill = _weighted_sum([(w.lambda_fm, l_fm), (w.lambda_lg, l_lg), (w.lambda_dikd, l_dikd)])
    return _or_zero(_weighted_sum([(w.lambda_kp, l_kp), (gamma, distill)]))


def mcl_total(l_kp, l_fm, l_lg, t: int, w: LossWeights):
    return ktl_total(l_kp, l_fm, l_lg, None, t, w)
