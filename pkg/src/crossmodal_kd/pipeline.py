"""Training stages: RGB teacher pretraining, supervised thermal baselines,
cross-modal distillation (KTL) and intra-modal compression (MCL).

Checkpoint layout (little-endian)::

    b"DIKD" | u32 version | u64 header length | header JSON (utf-8) | payload

The header lists every tensor (name, shape, byte offset into the payload) and
carries the stage config, model description and a sha256 of the payload.  The
payload is the concatenation of all tensors as float64.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, encode_target
from .errors import ConfigError, ContractError, FormatError
from .evaluate import nme_per_sample, predict
from .losses import (
    ChannelAdapter,
    CrossLogits,
    InjectionAdapter,
    decay_factor,
    dikd_total,
    LossWeights,
    SimCCTarget,
    feature_mimic_loss,
    injection_losses,
    keypoint_loss,
    ktl_total,
    logits_distill_loss,
)
from .nn import (
    BackboneConfig,
    HeadConfig,
    Model,
    forward_features,
    forward_head,
    init_model,
    param_count,
    set_frozen,
)
from .optim import EarlyStop, LrSchedule, OptimState, adamw_step, grad_global_norm, lr_at
from .seeding import derive_seed

STAGES = ("teacher_pretrain", "supervised_thermal", "ktl", "mcl")
MAGIC = b"DIKD"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = (
    "epoch", "step", "loss_total", "loss_kp", "loss_fm", "loss_lg",
    "loss_ri", "loss_fi", "gamma", "lr", "grad_norm",
)


@dataclass
class StageConfig:
    kind: str = "supervised_thermal"
    variant: str = "s"
    resolution: int = 64
    num_keypoints: int = 12
    k_split: int = 2
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    teacher_checkpoint: str | None = None
    # loss weights
    lambda_kp: float = 0.1
    lambda_fm: float = 1e-3
    lambda_lg: float = 1e-3
    lambda_dikd: float = 1.0
    lambda_ri: float = 1e-3
    lambda_fi: float = 1e-3
    alpha: int = 10
    # ablation switches
    enable_fm: bool = True
    enable_lg: bool = True
    enable_fi: bool = True
    enable_ri: bool = True
    swap_injection_losses: bool = False
    fm_batch_mean: bool = True
    # optimisation
    base_lr: float = 4e-3
    min_lr: float = 2e-4
    warmup_epochs: int = 5
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 15

    def validate(self):
        if self.kind not in STAGES:
            raise ConfigError(f"unknown stage kind {self.kind!r}; expected one of {STAGES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.kind in ("ktl", "mcl") and not self.teacher_checkpoint:
            raise ConfigError(f"stage {self.kind} needs teacher_checkpoint")
        self.loss_weights()  # range checks

    @property
    def input_modality(self) -> str:
        return "rgb" if self.kind == "teacher_pretrain" else "thermal"

    def backbone(self) -> BackboneConfig:
        channels = 3 if self.input_modality == "rgb" else 1
        return BackboneConfig(self.variant, channels, self.resolution)

    def head(self) -> HeadConfig:
        return HeadConfig(self.num_keypoints, self.k_split)

    def loss_weights(self) -> LossWeights:
        # alpha beyond the run length means "never decay"; min() keeps that
        # meaning while satisfying alpha <= T
        return LossWeights(
            self.lambda_kp, self.lambda_fm, self.lambda_lg, self.lambda_dikd,
            self.lambda_ri, self.lambda_fi, min(self.alpha, self.epochs), self.epochs,
        )

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.min_lr, self.epochs, self.warmup_epochs)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    stage: dict
    model: dict
    params: dict
    adapters: dict = field(default_factory=dict)
    log_ref: str = ""
    best_epoch: int = 0
    best_val_nme: float = math.nan
    config_digest: str = ""


def model_spec(m: Model) -> dict:
    return {
        "variant": m.config.variant,
        "input_channels": m.config.input_channels,
        "resolution": m.config.input_resolution,
        "stage_widths": list(m.config.widths),
        "stage_strides": list(m.config.stage_strides),
        "num_keypoints": m.head_config.num_keypoints,
        "k_split": m.head_config.split_factor,
        "modality": m.modality,
    }


def model_from_checkpoint(ckpt: Checkpoint, frozen: bool = True) -> Model:
    spec = ckpt.model
    cfg = BackboneConfig(
        spec["variant"], spec["input_channels"], spec["resolution"],
        tuple(spec["stage_widths"]), tuple(spec["stage_strides"]),
    )
    m = init_model(cfg, HeadConfig(spec["num_keypoints"], spec["k_split"]), seed=0)
    for name, p in m.parameters().items():
        if name not in ckpt.params:
            raise FormatError(f"checkpoint lacks parameter {name}")
        if ckpt.params[name].shape != p.values.shape:
            raise FormatError(f"parameter {name} has shape {ckpt.params[name].shape}")
        p.values = ckpt.params[name].copy()
    return set_frozen(m, frozen)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tensors, index, offset = [], [], 0
    for group in ("params", "adapters"):
        for name, arr in getattr(ckpt, group).items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            index.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            tensors.append(arr.tobytes())
            offset += arr.nbytes
    payload = b"".join(tensors)
    header = {
        "stage": ckpt.stage,
        "model": ckpt.model,
        "tensors": index,
        "log_ref": ckpt.log_ref,
        "best_epoch": ckpt.best_epoch,
        "best_val_nme": repr(ckpt.best_val_nme),
        "config_digest": ckpt.config_digest,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)) + head + payload
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    """Parse and verify a checkpoint; raises FormatError without partial results."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, head_len = struct.unpack("<IQ", blob[4:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version} != {CHECKPOINT_VERSION}")
    if len(blob) < 16 + head_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16 : 16 + head_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: unreadable header") from e
    payload = blob[16 + head_len :]
    if len(payload) != header["payload_bytes"]:
        raise FormatError(f"{path}: truncated payload")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise FormatError(f"{path}: payload checksum mismatch")
    groups = {"params": {}, "adapters": {}}
    for t in header["tensors"]:
        count = math.prod(t["shape"])
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=t["offset"])
        groups[t["group"]][t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    return Checkpoint(
        stage=header["stage"],
        model=header["model"],
        params=groups["params"],
        adapters=groups["adapters"],
        log_ref=header["log_ref"],
        best_epoch=header["best_epoch"],
        best_val_nme=float(header["best_val_nme"]),
        config_digest=header["config_digest"],
    )


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    grad_norms: list
    val_nme: list
    best_epoch: int
    stopped_early: bool
    student: Model


class _LogWriter:
    """Per-step CSV log, flushed every epoch so a crash keeps what was done."""

    def __init__(self, path, digest):
        self.f = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.f = open(path, "w", newline="")
            self.f.write(f"# config_digest: {digest}\n")
            self.w = csv.writer(self.f, lineterminator="\n")
            self.w.writerow(LOG_COLUMNS)

    def row(self, r: dict):
        if self.f is not None:
            self.w.writerow([r[c] if isinstance(r[c], int) else repr(float(r[c])) for c in LOG_COLUMNS])

    def flush(self):
        if self.f is not None:
            self.f.flush()

    def close(self):
        if self.f is not None:
            self.f.close()


def _snapshot(params: dict) -> dict:
    return {k: p.values.copy() for k, p in params.items()}


def _term(enabled: bool, weight: float) -> bool:
    return enabled and weight > 0


def _run(cfg: StageConfig, train: Dataset, val: Dataset, teacher: Model | None,
         log_path=None, digest: str | None = None) -> TrainResult:
    cfg.validate()
    if train.resolution != cfg.resolution or val.resolution != cfg.resolution:
        raise ConfigError(
            f"data resolution {train.resolution}/{val.resolution} != model resolution {cfg.resolution}"
        )
    if train.k_split != cfg.k_split:
        raise ConfigError(f"data k_split {train.k_split} != model k_split {cfg.k_split}")
    w = cfg.loss_weights()
    digest = digest or cfg.digest()
    student = init_model(cfg.backbone(), cfg.head(), seed=derive_seed(cfg.seed, "student"))
    params = {f"student.{k}": v for k, v in student.parameters().items()}

    kd = cfg.kind in ("ktl", "mcl")
    use_fm = kd and _term(cfg.enable_fm, w.lambda_fm)
    use_lg = kd and _term(cfg.enable_lg, w.lambda_lg)
    use_ri = cfg.kind == "ktl" and _term(cfg.enable_ri, w.lambda_dikd * w.lambda_ri)
    use_fi = cfg.kind == "ktl" and _term(cfg.enable_fi, w.lambda_dikd * w.lambda_fi)
    # as-printed: "ri" consumes the ts path and "fi" the st path
    need_ts = use_fi if cfg.swap_injection_losses else use_ri
    need_st = use_ri if cfg.swap_injection_losses else use_fi

    fm_adapter = inject = None
    if kd:
        if teacher is None or not teacher.frozen:
            raise ContractError("distillation stages need a frozen teacher model")
        c_t, c_s = teacher.config.widths[-1], student.config.widths[-1]
        fm_adapter = ChannelAdapter(c_s, c_t, seed=derive_seed(cfg.seed, "fm-adapter"))
        params.update({f"fm_adapter.{k}": v for k, v in fm_adapter.parameters().items()})
        if cfg.kind == "ktl":
            inject = InjectionAdapter(c_t, c_s, seed=derive_seed(cfg.seed, "inject-adapter"))
            params.update({f"inject.{k}": v for k, v in inject.parameters().items()})

    arr = train.arrays()
    x_student = arr[cfg.input_modality]
    targets = encode_target(arr["landmarks"], arr["visibility"], cfg.resolution, cfg.k_split)
    n = len(x_student)

    teacher_feats = teacher_logits = None
    if kd:
        x_teacher = arr["rgb"] if cfg.kind == "ktl" else arr["thermal"]
        feats, lx, ly = [], [], []
        with ag.no_grad():
            for i in range(0, n, 64):
                f = forward_features(teacher, x_teacher[i : i + 64])
                lg = forward_head(teacher.head, f)
                feats.append(f.values)
                lx.append(lg.x.values)
                ly.append(lg.y.values)
        teacher_feats = np.concatenate(feats)
        teacher_logits = (np.concatenate(lx), np.concatenate(ly))

    val_arr = val.arrays()
    val_x = val_arr[cfg.input_modality]
    state = OptimState(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    sched = cfg.schedule()
    stopper = EarlyStop(cfg.patience)
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))

    log, grad_norms, val_hist = [], [], []
    best = (math.inf, 0, _snapshot(params))
    stopped = False
    writer = _LogWriter(log_path, digest)
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            lr = lr_at(epoch, sched)
            gamma = 1.0 if not kd else decay_factor(epoch, w)
            perm = order_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                batch_target = SimCCTarget(targets.x[idx], targets.y[idx], targets.visibility[idx])
                f_s = forward_features(student, x_student[idx])
                l_ss = forward_head(student.head, f_s)
                l_kp = keypoint_loss(batch_target, l_ss)
                l_fm = l_lg = l_ri = l_fi = None
                if kd:
                    f_t = Tensor(teacher_feats[idx])
                    l_tt = type(l_ss)(Tensor(teacher_logits[0][idx]), Tensor(teacher_logits[1][idx]))
                    if use_fm:
                        l_fm = feature_mimic_loss(f_t, f_s, fm_adapter, batch_mean=cfg.fm_batch_mean)
                    if use_lg:
                        l_lg = logits_distill_loss(l_tt, l_ss)
                    if need_ts or need_st:
                        cross = CrossLogits(
                            l_tt, l_ss,
                            forward_head(student.head, inject.fi(f_t)) if need_ts else None,
                            forward_head(teacher.head, inject.ri(f_s)) if need_st else None,
                            f_t, f_s,
                        )
                        l_ri, l_fi = injection_losses(cross, cfg.swap_injection_losses)
                        l_ri = l_ri if use_ri else None
                        l_fi = l_fi if use_fi else None
                l_dikd = None
                if l_ri is not None or l_fi is not None:
                    l_dikd = dikd_total(l_ri, l_fi, w)
                total = ktl_total(l_kp, l_fm, l_lg, l_dikd, epoch, w) if kd else ag.scale(l_kp, w.lambda_kp)
                ag.backward(total)
                grads = {k: p.grad for k, p in params.items()}
                gnorm = grad_global_norm(grads)
                if not math.isfinite(gnorm):
                    raise ag.NonFiniteError(f"non-finite gradient norm at step {step + 1}")
                adamw_step(params, grads, state, lr)
                for p in params.values():
                    p.grad = None
                step += 1
                row = {
                    "epoch": epoch, "step": step, "loss_total": total.item(),
                    "loss_kp": l_kp.item(), "loss_fm": _f(l_fm), "loss_lg": _f(l_lg),
                    "loss_ri": _f(l_ri), "loss_fi": _f(l_fi), "gamma": gamma, "lr": lr,
                    "grad_norm": gnorm,
                }
                log.append(row)
                grad_norms.append(gnorm)
                writer.row(row)
            writer.flush()
            score = _val_nme(student, val_x, val_arr)
            val_hist.append(score)
            if score < best[0]:
                best = (score, epoch, _snapshot(params))
            if stopper.update(score):
                stopped = True
                break
    finally:
        writer.close()

    for k, p in params.items():
        p.values = best[2][k]
    adapters = {k: v for k, v in best[2].items() if not k.startswith("student.")}
    ckpt = Checkpoint(
        stage=asdict(cfg),
        model=model_spec(student),
        params={k[len("student."):]: v for k, v in best[2].items() if k.startswith("student.")},
        adapters=adapters,
        # file name only, so identical runs in different directories match
        log_ref=Path(log_path).name if log_path else "",
        best_epoch=best[1],
        best_val_nme=best[0],
        config_digest=digest,
    )
    return TrainResult(ckpt, log, grad_norms, val_hist, best[1], stopped, student)


def _f(t) -> float:
    return 0.0 if t is None else t.item()


def _val_nme(model: Model, images, arr) -> float:
    preds = predict(model, images)
    per, _ = nme_per_sample(preds, arr["landmarks"], arr["visibility"], "inter_ocular", arr["eyes"])
    return float(np.nanmean(per))


def train_supervised(cfg: StageConfig, train: Dataset, val: Dataset, log_path=None, digest=None) -> TrainResult:
    """Keypoint-loss-only training on RGB (teacher_pretrain) or thermal inputs."""
    if cfg.kind not in ("teacher_pretrain", "supervised_thermal"):
        raise ConfigError(f"train_supervised cannot run stage {cfg.kind!r}")
    return _run(cfg, train, val, None, log_path, digest)


def run_ktl(teacher: Checkpoint, cfg: StageConfig, train: Dataset, val: Dataset, log_path=None, digest=None) -> TrainResult:
    """RGB teacher -> thermal student with feature, logit and cross-injection terms."""
    if cfg.kind != "ktl":
        raise ConfigError("run_ktl needs a ktl stage config")
    if teacher.model["modality"] != "rgb":
        raise ContractError("KTL teacher must be an RGB model")
    return _run(cfg, train, val, model_from_checkpoint(teacher, frozen=True), log_path, digest)


def run_mcl(teacher: Checkpoint, cfg: StageConfig, train: Dataset, val: Dataset, log_path=None, digest=None) -> TrainResult:
    """Thermal teacher -> smaller thermal student with feature and logit terms."""
    if cfg.kind != "mcl":
        raise ConfigError("run_mcl needs an mcl stage config")
    if teacher.model["modality"] != "thermal":
        raise ContractError("MCL teacher must be a thermal model")
    t_model = model_from_checkpoint(teacher, frozen=True)
    s_count = param_count(init_model(cfg.backbone(), cfg.head()), trainable=False)
    if s_count >= param_count(t_model, trainable=False):
        warnings.warn("MCL student is not smaller than its teacher")
    return _run(cfg, train, val, t_model, log_path, digest)


def run_stage(cfg: StageConfig, train: Dataset, val: Dataset, log_path=None, digest=None) -> TrainResult:
    """Dispatch on ``cfg.kind``, loading the teacher checkpoint when needed."""
    cfg.validate()
    if cfg.kind in ("teacher_pretrain", "supervised_thermal"):
        return train_supervised(cfg, train, val, log_path, digest)
    teacher = load_checkpoint(cfg.teacher_checkpoint)
    if cfg.kind == "ktl":
        return run_ktl(teacher, cfg, train, val, log_path, digest)
    return run_mcl(teacher, cfg, train, val, log_path, digest)


def write_grad_norms(path, grad_norms, digest: str):
    with open(path, "w", newline="") as f:
        f.write(f"# config_digest: {digest}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "grad_norm"])
        for i, g in enumerate(grad_norms, 1):
            w.writerow([i, repr(float(g))])


def write_val_log(path, val_nme, digest: str):
    with open(path, "w", newline="") as f:
        f.write(f"# config_digest: {digest}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "val_nme"])
        for i, v in enumerate(val_nme, 1):
            w.writerow([i, repr(float(v))])
