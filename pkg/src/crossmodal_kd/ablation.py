"""Ablation arms expressed as loss-flag overrides, and a runner over arms x seeds."""
from __future__ import annotations

import csv
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, generate, load
from .evaluate import ArmResult, compare_arms, evaluate
from .pipeline import (
    Checkpoint,
    TrainResult,
    load_checkpoint,
    run_stage,
    save_checkpoint,
    train_supervised,
    write_grad_norms,
    write_val_log,
)
from .seeding import derive_seed
from .stability import GradNormSeries, stability_compare, stability_metrics

_KD = dict(kind="ktl")
ARMS = {
    "supervised": dict(kind="supervised_thermal"),
    # knowledge-transfer strategies
    "FD": dict(_KD, enable_fm=True, enable_lg=False, enable_fi=False, enable_ri=False),
    "LD": dict(_KD, enable_fm=False, enable_lg=True, enable_fi=False, enable_ri=False),
    "FD+LD": dict(_KD, enable_fm=True, enable_lg=True, enable_fi=False, enable_ri=False),
    "DIKD": dict(_KD, enable_fm=True, enable_lg=True, enable_fi=True, enable_ri=True),
    # injection pathways
    "Baseline": dict(_KD, enable_fm=True, enable_lg=True, enable_fi=False, enable_ri=False),
    "+FI": dict(_KD, enable_fm=True, enable_lg=True, enable_fi=True, enable_ri=False),
    "+RI": dict(_KD, enable_fm=True, enable_lg=True, enable_fi=False, enable_ri=True),
    "Ours": dict(_KD, enable_fm=True, enable_lg=True, enable_fi=True, enable_ri=True),
}
STRATEGY_ARMS = ("FD", "LD", "FD+LD", "DIKD")
INJECTION_ARMS = ("Baseline", "+FI", "+RI", "Ours")
INJECTION_ORDERING = ("Ours <= +FI <= Baseline", "Ours <= +RI <= Baseline")
ABLATION_COLUMNS = (
    "arm", "seed", "kind", "enable_fm", "enable_lg", "enable_fi", "enable_ri",
    "val_nme", "best_epoch", "steps", "status",
)


@dataclass
class ArmRun:
    arm: str
    seed: int
    flags: dict
    val_nme: float = float("nan")
    best_epoch: int = 0
    grad_norms: list = field(default_factory=list)
    status: str = "ok"


@dataclass
class AblationResult:
    runs: list
    dataset_digest: str
    teacher_nme: float
    config_digest: str

    def ok_runs(self) -> list:
        return [r for r in self.runs if r.status == "ok"]

    def arm_results(self) -> list:
        return [ArmResult(r.arm, r.seed, r.val_nme, self.dataset_digest) for r in self.ok_runs()]

    def mean_nme(self, arm: str) -> float:
        return float(np.mean([r.val_nme for r in self.ok_runs() if r.arm == arm]))

    def compare(self, ordering):
        return compare_arms(self.arm_results(), ordering)

    def stability(self, start: int = 0, length: int = 500, arms=None):
        reports = [
            stability_metrics(GradNormSeries(np.array(r.grad_norms), start, length), r.arm, r.seed)
            for r in self.ok_runs()
            if arms is None or r.arm in arms
        ]
        return stability_compare(reports)

    def table(self) -> str:
        lines = [",".join(ABLATION_COLUMNS)]
        for r in self.runs:
            f = r.flags
            lines.append(",".join(str(x) for x in (
                r.arm, r.seed, f["kind"], int(f.get("enable_fm", False)),
                int(f.get("enable_lg", False)), int(f.get("enable_fi", False)),
                int(f.get("enable_ri", False)), repr(r.val_nme), r.best_epoch,
                len(r.grad_norms), r.status,
            )))
        return "\n".join(lines) + "\n"


def load_or_generate(cfg: RunConfig) -> tuple:
    """(train, val) from ``data.dir`` when set, else generated from ``seed``."""
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        return load(root / "train"), load(root / "val")
    return (
        generate(cfg.seed, cfg.n_train, cfg.data, "train"),
        generate(cfg.seed, cfg.n_val, cfg.data, "val"),
    )


def teacher_data(cfg: RunConfig) -> Dataset:
    """RGB pretraining split: ``data.dir/pretrain`` when present, else generated."""
    if cfg.data_dir and (Path(cfg.data_dir) / "pretrain").exists():
        return load(Path(cfg.data_dir) / "pretrain")
    return generate(cfg.seed, cfg.n_teacher, cfg.data, "pretrain")


def _arm_flags(arm: str) -> dict:
    if arm not in ARMS:
        raise KeyError(f"unknown arm {arm!r}; choose from {sorted(ARMS)}")
    flags = dict(ARMS[arm])
    return flags


def train_teacher(cfg: RunConfig, train: Dataset, val: Dataset, out_dir=None) -> TrainResult:
    """Pretrain the RGB teacher on ``train`` (normally :func:`teacher_data`)."""
    scfg = cfg.stage_config(
        kind="teacher_pretrain", variant=cfg.teacher_variant, teacher_checkpoint=None,
        epochs=cfg.teacher_epochs or cfg.stage.epochs,
        base_lr=cfg.teacher_base_lr, min_lr=cfg.teacher_min_lr,
        seed=derive_seed(cfg.seed, "teacher") & 0x7FFFFFFF,
    )
    log = Path(out_dir) / "train_log.csv" if out_dir else None
    result = train_supervised(scfg, train, val, log, cfg.digest)
    if out_dir:
        _write_run(Path(out_dir), result, cfg.digest)
    return result


def _write_run(d: Path, result: TrainResult, digest: str):
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, d / "model.dikd")
    write_grad_norms(d / "grad_norms.csv", result.grad_norms, digest)
    write_val_log(d / "val_log.csv", result.val_nme, digest)


def run_ablation(cfg: RunConfig, arms, seeds, out_dir=None, teacher: str | Path | None = None,
                 data: tuple | None = None, progress=None) -> AblationResult:
    """Train every (arm, seed) pair against one shared teacher and dataset.

    Arms with identical flags (e.g. ``FD+LD`` and ``Baseline``) are trained
    once per seed.  A failing arm is recorded with its error and the
    remaining arms still run.
    """
    arms = list(arms)
    if not arms:
        raise ValueError("arm list is empty")
    train, val = data or load_or_generate(cfg)
    out = Path(out_dir) if out_dir else None
    teacher_path = teacher or cfg.stage.teacher_checkpoint
    if teacher_path:
        teacher_ckpt: Checkpoint = load_checkpoint(teacher_path)
    else:
        t = train_teacher(cfg, teacher_data(cfg), val, out / "teacher" if out else None)
        teacher_ckpt = t.checkpoint
        teacher_path = out / "teacher" / "model.dikd" if out else None
    if teacher_path is None:
        # no output directory: keep the teacher in a temporary file
        import tempfile

        tmp = tempfile.NamedTemporaryFile(suffix=".dikd", delete=False)
        tmp.close()
        teacher_path = save_checkpoint(teacher_ckpt, tmp.name)

    runs, cache = [], {}
    for seed in seeds:
        for arm in arms:
            flags = _arm_flags(arm)
            key = (seed, tuple(sorted(flags.items())))
            run = ArmRun(arm, seed, flags)
            if key in cache:
                src = cache[key]
                run.val_nme, run.best_epoch, run.grad_norms, run.status = (
                    src.val_nme, src.best_epoch, src.grad_norms, src.status)
                runs.append(run)
                continue
            try:
                scfg = cfg.stage_config(seed=seed, teacher_checkpoint=str(teacher_path), **flags)
                d = out / f"{arm}_seed{seed}" if out else None
                result = run_stage(scfg, train, val, d / "train_log.csv" if d else None, cfg.digest)
                if d:
                    _write_run(d, result, cfg.digest)
                run.val_nme = result.checkpoint.best_val_nme
                run.best_epoch = result.best_epoch
                run.grad_norms = result.grad_norms
            except Exception as e:  # one arm failing must not stop the rest
                run.status = f"failed: {type(e).__name__}: {e}".replace(",", ";").replace("\n", " ")
                if progress:
                    progress(traceback.format_exc())
            cache[key] = run
            runs.append(run)
            if progress:
                progress(f"{arm} seed={seed} nme={run.val_nme:.5f} {run.status}")
    res = AblationResult(runs, val.digest(), teacher_ckpt.best_val_nme, cfg.digest)
    if out:
        (out / "ablation.csv").write_text(f"# config_digest: {cfg.digest}\n" + res.table())
    return res
