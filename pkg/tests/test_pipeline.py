import math
from dataclasses import replace

import numpy as np
import pytest

from crossmodal_kd.data import generate
from crossmodal_kd.errors import ConfigError, ContractError, FormatError
from crossmodal_kd.evaluate import evaluate
from crossmodal_kd.nn import param_count
from crossmodal_kd.pipeline import (
    LOG_COLUMNS,
    StageConfig,
    load_checkpoint,
    model_from_checkpoint,
    run_ktl,
    run_mcl,
    run_stage,
    save_checkpoint,
    train_supervised,
)

TRAIN = generate(21, 24, split="train")
VAL = generate(22, 8, split="val")
TINY = dict(variant="t", epochs=2, batch_size=8, warmup_epochs=1)


@pytest.fixture(scope="module")
def rgb_teacher(tmp_path_factory):
    r = train_supervised(StageConfig(kind="teacher_pretrain", seed=1, **TINY), TRAIN, VAL)
    path = tmp_path_factory.mktemp("t") / "rgb.dikd"
    save_checkpoint(r.checkpoint, path)
    return path


@pytest.fixture(scope="module")
def thermal_teacher(tmp_path_factory):
    r = train_supervised(StageConfig(kind="supervised_thermal", seed=2, **TINY), TRAIN, VAL)
    path = tmp_path_factory.mktemp("t") / "thermal.dikd"
    save_checkpoint(r.checkpoint, path)
    return path


def _losses(result):
    return [row["loss_total"] for row in result.log]


def test_checkpoint_round_trip_bit_exact(rgb_teacher, tmp_path):
    ck = load_checkpoint(rgb_teacher)
    save_checkpoint(ck, tmp_path / "again.dikd")
    assert (tmp_path / "again.dikd").read_bytes() == rgb_teacher.read_bytes()
    back = load_checkpoint(tmp_path / "again.dikd")
    assert all(back.params[k].tobytes() == ck.params[k].tobytes() for k in ck.params)
    assert back.best_val_nme == ck.best_val_nme
    m1, m2 = model_from_checkpoint(ck), model_from_checkpoint(back)
    assert evaluate(m1, VAL).nme == evaluate(m2, VAL).nme


def test_checkpoint_fails_closed(rgb_teacher, tmp_path):
    blob = rgb_teacher.read_bytes()
    cases = {
        "trunc": blob[: len(blob) - 8],
        "short": blob[:10],
        "magic": b"XXXX" + blob[4:],
        "version": blob[:4] + (7).to_bytes(4, "little") + blob[8:],
        "flip": blob[:-3] + bytes([blob[-3] ^ 1]) + blob[-2:],
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / name)


def test_first_epoch_loss_near_uniform_baseline():
    cfg = StageConfig(kind="supervised_thermal", **TINY)
    r = train_supervised(cfg, TRAIN, VAL)
    vis = TRAIN.arrays()["visibility"]
    bins = cfg.resolution * cfg.k_split
    steps = [row for row in r.log if row["epoch"] == 1]
    per_sample_visible = vis.sum() / len(vis)
    expected = per_sample_visible * cfg.batch_size * 2 * math.log(bins) / bins
    got = np.mean([row["loss_kp"] for row in steps])
    assert abs(got - expected) <= 0.2 * expected


def test_training_deterministic_and_logs_consistent(tmp_path):
    cfg = StageConfig(kind="supervised_thermal", seed=4, **TINY)
    a = train_supervised(cfg, TRAIN, VAL, log_path=tmp_path / "a.csv")
    b = train_supervised(cfg, TRAIN, VAL, log_path=tmp_path / "b.csv")
    # the checkpoint records its log path; blank it to compare the rest
    save_checkpoint(replace(a.checkpoint, log_ref=""), tmp_path / "a.dikd")
    save_checkpoint(replace(b.checkpoint, log_ref=""), tmp_path / "b.dikd")
    assert (tmp_path / "a.dikd").read_bytes() == (tmp_path / "b.dikd").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    steps_per_epoch = math.ceil(len(TRAIN) / cfg.batch_size)
    assert len(a.grad_norms) == len(a.log) == cfg.epochs * steps_per_epoch
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[0].startswith("# config_digest: ") and lines[1] == ",".join(LOG_COLUMNS)
    assert len(lines) == 2 + len(a.log)


def test_ktl_keeps_teacher_bytes_and_trains_adapters(rgb_teacher):
    before = rgb_teacher.read_bytes()
    ck = load_checkpoint(rgb_teacher)
    cfg = StageConfig(kind="ktl", teacher_checkpoint=str(rgb_teacher), **TINY)
    r = run_ktl(ck, cfg, TRAIN, VAL)
    assert rgb_teacher.read_bytes() == before
    assert all(ck.params[k].tobytes() == load_checkpoint(rgb_teacher).params[k].tobytes() for k in ck.params)
    assert any(k.startswith("fm_adapter.") for k in r.checkpoint.adapters)
    assert any(k.startswith("inject.") for k in r.checkpoint.adapters)
    row = r.log[-1]
    assert row["loss_fm"] > 0 and row["loss_lg"] > 0 and row["loss_ri"] > 0 and row["loss_fi"] > 0


def test_ktl_flags_select_terms(rgb_teacher):
    cfg = StageConfig(kind="ktl", teacher_checkpoint=str(rgb_teacher), enable_fi=False, enable_ri=False, **TINY)
    row = run_stage(cfg, TRAIN, VAL).log[0]
    assert row["loss_fm"] > 0 and row["loss_lg"] > 0 and row["loss_ri"] == 0 and row["loss_fi"] == 0


def test_gamma_column_follows_decay(rgb_teacher):
    cfg = StageConfig(kind="ktl", teacher_checkpoint=str(rgb_teacher), alpha=1, **replace_epochs(3))
    r = run_stage(cfg, TRAIN, VAL)
    gammas = {row["epoch"]: row["gamma"] for row in r.log}
    assert gammas == {1: 1.0, 2: 2 / 3, 3: 1 / 3}


def replace_epochs(e):
    return {**TINY, "epochs": e, "patience": e}


@pytest.mark.filterwarnings("ignore:MCL student")
@pytest.mark.parametrize("kind", ["ktl", "mcl"])
def test_zero_distillation_reduces_to_supervised(kind, rgb_teacher, thermal_teacher):
    teacher = rgb_teacher if kind == "ktl" else thermal_teacher
    sup = train_supervised(StageConfig(kind="supervised_thermal", seed=7, **TINY), TRAIN, VAL)
    cfg = StageConfig(kind=kind, seed=7, teacher_checkpoint=str(teacher),
                      lambda_fm=0.0, lambda_lg=0.0, lambda_ri=0.0, lambda_fi=0.0, **TINY)
    kd = run_stage(cfg, TRAIN, VAL)
    diffs = [abs(a - b) for a, b in zip(_losses(sup), _losses(kd))]
    assert len(diffs) == len(sup.log) == len(kd.log) and max(diffs) <= 1e-12
    assert all(sup.checkpoint.params[k].tobytes() == kd.checkpoint.params[k].tobytes()
               for k in sup.checkpoint.params)


def test_modality_and_config_errors(rgb_teacher, thermal_teacher):
    rgb, thermal = load_checkpoint(rgb_teacher), load_checkpoint(thermal_teacher)
    with pytest.raises(ContractError):
        run_ktl(thermal, StageConfig(kind="ktl", teacher_checkpoint="x", **TINY), TRAIN, VAL)
    with pytest.raises(ContractError):
        run_mcl(rgb, StageConfig(kind="mcl", teacher_checkpoint="x", **TINY), TRAIN, VAL)
    with pytest.raises(ConfigError):
        run_stage(StageConfig(kind="ktl", **TINY), TRAIN, VAL)
    with pytest.raises(ConfigError):
        run_stage(StageConfig(kind="bogus", **TINY), TRAIN, VAL)
    with pytest.raises(ConfigError):
        train_supervised(StageConfig(resolution=32, **TINY), TRAIN, VAL)
    with pytest.raises(ConfigError):
        train_supervised(StageConfig(kind="ktl", teacher_checkpoint="x", **TINY), TRAIN, VAL)


def test_mcl_warns_when_student_not_smaller(thermal_teacher):
    cfg = StageConfig(kind="mcl", teacher_checkpoint=str(thermal_teacher), **{**TINY, "epochs": 1})
    with pytest.warns(UserWarning):
        run_stage(cfg, TRAIN, VAL)


def test_non_finite_training_fails_with_partial_log(tmp_path):
    cfg = StageConfig(kind="supervised_thermal", base_lr=1e300, min_lr=0.0, **TINY)
    with pytest.raises(Exception) as info:
        train_supervised(cfg, TRAIN, VAL, log_path=tmp_path / "log.csv")
    assert "finite" in type(info.value).__name__.lower() or "finite" in str(info.value).lower()
    assert (tmp_path / "log.csv").exists()


@pytest.mark.slow
def test_mcl_m_to_t_close_to_teacher(tmp_path):
    train, val = generate(31, 256, split="train"), generate(32, 64, split="val")
    base = dict(epochs=12, batch_size=16, warmup_epochs=2)
    teacher = train_supervised(StageConfig(kind="supervised_thermal", variant="m", **base), train, val)
    save_checkpoint(teacher.checkpoint, tmp_path / "m.dikd")
    cfg = StageConfig(kind="mcl", variant="t", teacher_checkpoint=str(tmp_path / "m.dikd"), **base)
    student = run_stage(cfg, train, val)
    assert param_count(student.student, trainable=False) < param_count(teacher.student, trainable=False)
    t_nme = evaluate(model_from_checkpoint(teacher.checkpoint), val).nme["inter_ocular"]
    s_nme = evaluate(model_from_checkpoint(student.checkpoint), val).nme["inter_ocular"]
    assert s_nme <= 1.5 * t_nme, (s_nme, t_nme)
