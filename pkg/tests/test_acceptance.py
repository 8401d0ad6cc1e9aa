"""One test per primary acceptance criterion; each records a single PASS/FAIL
line, repeated in the terminal summary."""
import hashlib
import math
import time
import warnings
import zlib
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from test_autograd import PRIMITIVES
from test_evaluate import brute_nme
from test_losses import (
    _logits,
    _onehot_target,
    _raw,
    composite_gradient_errors,
    oracle_fm,
    oracle_keypoint,
    oracle_soft_ce,
)
from test_stability import brute_stats

from crossmodal_kd.ablation import INJECTION_ORDERING, load_or_generate, run_ablation, teacher_data, train_teacher
from crossmodal_kd.autograd import Tensor, finite_diff_check
from crossmodal_kd.cli import main as cli_main
from crossmodal_kd.config import load_config
from crossmodal_kd.data import encode_target, generate, load, save
from crossmodal_kd.errors import CorruptionError, FormatError
from crossmodal_kd.evaluate import decode_simcc, nme
from crossmodal_kd.losses import (
    ChannelAdapter,
    LossWeights,
    decay_factor,
    dikd_fi_loss,
    dikd_ri_loss,
    feature_mimic_loss,
    keypoint_loss,
    logits_distill_loss,
)
from crossmodal_kd.nn import SimCCLogits
from crossmodal_kd.pipeline import StageConfig, load_checkpoint, run_stage, save_checkpoint, train_supervised
from crossmodal_kd.stability import GradNormSeries, stability_metrics

ROOT = Path(__file__).resolve().parent.parent
BENCHMARK = ROOT / "configs" / "benchmark.conf"
SEEDS = (0, 1, 2, 3, 4)
ARMS = ("supervised", "Baseline", "+FI", "+RI", "Ours")


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """Teacher pretraining plus every arm on every seed, run once per session."""
    out = tmp_path_factory.mktemp("benchmark")
    cfg = load_config(BENCHMARK)
    t0 = time.time()
    train, val = load_or_generate(cfg)
    teacher = train_teacher(cfg, teacher_data(cfg), val, out / "teacher")
    teacher_path = out / "teacher" / "model.dikd"
    before = _sha(teacher_path)
    res = run_ablation(cfg, ARMS, SEEDS, out, teacher=teacher_path, data=(train, val))
    return {
        "cfg": cfg, "res": res, "seconds": time.time() - t0, "teacher_nme": teacher.checkpoint.best_val_nme,
        "teacher_before": before, "teacher_after": _sha(teacher_path),
    }


# 1 ----------------------------------------------------------------------------
def test_gradient_correctness():
    t0 = time.time()
    worst = {}
    for name, (f, shapes) in PRIMITIVES.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst[name] = max(finite_diff_check(f, [rng.normal(size=s) for s in shapes]) for _ in range(50))
    worst.update({f"loss:{k}": v for k, v in composite_gradient_errors(50).items()})
    secs = time.time() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] <= 1e-5 and secs < 60
    record("gradient correctness", ok,
           f"{len(worst)} functions x 50 draws, worst {worst[top]:.2e} ({top}) <= 1e-5, {secs:.1f}s < 60s")
    assert ok


# 2 ----------------------------------------------------------------------------
def test_loss_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = {"fm": 0.0, "lg": 0.0, "kp": 0.0, "ri": 0.0, "fi": 0.0}
    for _ in range(100):
        n, k, bins = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(2, 9))
        a, b = _logits(rng, n, k, bins), _logits(rng, n, k, bins)
        ref = oracle_soft_ce(_raw(a), _raw(b))
        for name, fn in (("lg", logits_distill_loss), ("ri", dikd_ri_loss), ("fi", dikd_fi_loss)):
            worst[name] = max(worst[name], abs(fn(a, b).item() - ref))
        target = _onehot_target(rng, n, k, bins)
        ref = oracle_keypoint(target.x, target.y, target.visibility, *_raw(b))
        worst["kp"] = max(worst["kp"], abs(keypoint_loss(target, b).item() - ref))
        c_s, c_t, hw = (int(v) for v in rng.integers(1, 4, size=3))
        f_t, f_s = rng.normal(size=(n, c_t, hw, hw)), rng.normal(size=(n, c_s, hw, hw))
        adapter = ChannelAdapter(c_s, c_t, seed=int(rng.integers(1 << 30)))
        adapter.conv.bias.values[...] = rng.normal(size=c_t)
        got = feature_mimic_loss(Tensor(f_t), Tensor(f_s), adapter).item()
        worst["fm"] = max(worst["fm"], abs(got - oracle_fm(f_t, f_s, adapter.conv.weight.values,
                                                           adapter.conv.bias.values)))
    top = max(worst.values())
    ok = top <= 1e-12
    record("loss oracle equivalence", ok,
           "max |impl - oracle| " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " <= 1e-12")
    assert ok


# 3 ----------------------------------------------------------------------------
def test_schedule_exactness():
    checks = []
    for alpha, total in ((10, 60), (30, 150), (10, 20), (1, 7)):
        w = LossWeights(alpha=alpha, T=total)
        for t in sorted({1, alpha, alpha + 1, total}):
            exact = Fraction(1) if t <= alpha else 1 - Fraction(t - alpha, total)
            checks.append(decay_factor(t, w) == float(exact))
        checks.append(decay_factor(total, w) == alpha / total > 0)
    ok = all(checks)
    record("schedule exactness", ok, f"{sum(checks)}/{len(checks)} points bit-equal to the exact rational, "
           "gamma(T) == alpha/T")
    assert ok


# 4 ----------------------------------------------------------------------------
def test_frozen_teacher_invariance(benchmark):
    b = benchmark
    n_ktl = sum(1 for r in b["res"].runs if r.flags["kind"] == "ktl")
    ok = b["teacher_before"] == b["teacher_after"] and n_ktl > 0
    record("frozen-teacher invariance", ok,
           f"teacher sha256 {b['teacher_before'][:12]} unchanged after {n_ktl} full KTL runs")
    assert ok


# 5 ----------------------------------------------------------------------------
def test_reduction_identity(tmp_path):
    train, val = generate(40, 32, split="train"), generate(41, 8, split="val")
    base = dict(variant="t", epochs=3, batch_size=8, warmup_epochs=1, seed=9)
    zero = dict(lambda_fm=0.0, lambda_lg=0.0, lambda_ri=0.0, lambda_fi=0.0)
    t_rgb = train_supervised(StageConfig(kind="teacher_pretrain", **base), train, val)
    t_th = train_supervised(StageConfig(kind="supervised_thermal", **{**base, "seed": 10}), train, val)
    save_checkpoint(t_rgb.checkpoint, tmp_path / "rgb.dikd")
    save_checkpoint(t_th.checkpoint, tmp_path / "th.dikd")
    sup = [r["loss_total"] for r in train_supervised(StageConfig(**base), train, val).log]
    diffs = {}
    for kind, path in (("ktl", "rgb.dikd"), ("mcl", "th.dikd")):
        cfg = StageConfig(kind=kind, teacher_checkpoint=str(tmp_path / path), **base, **zero)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # MCL with an equal-size teacher warns
            kd = [r["loss_total"] for r in run_stage(cfg, train, val).log]
        diffs[kind] = max(abs(a - b) for a, b in zip(sup, kd)) if len(kd) == len(sup) else math.inf
    ok = max(diffs.values()) <= 1e-12
    record("reduction identity", ok, f"{len(sup)} steps, max |KTL - sup| {diffs['ktl']:.1e}, "
           f"max |MCL - sup| {diffs['mcl']:.1e} <= 1e-12")
    assert ok


# 6 ----------------------------------------------------------------------------
def test_encode_decode_round_trip():
    rng = np.random.default_rng(6)
    k, res = 2, 64
    # representable range: every coordinate below R - 1/(2k) rounds to an existing bin
    pts = rng.uniform(0, res - 0.5 / k, size=(1000, 1, 2))
    t = encode_target(pts, np.ones((1000, 1)), res, k)
    err = np.max(np.abs(decode_simcc(SimCCLogits(t.x, t.y), k) - pts))
    edge = np.linspace(res - 0.5 / k, res, 100, endpoint=False)
    e = encode_target(np.stack([edge, edge], -1)[:, None], np.ones((100, 1)), res, k)
    edge_err = np.max(np.abs(decode_simcc(SimCCLogits(e.x, e.y), k)[:, 0, 0] - edge))
    ok = err <= 0.25
    record("encode/decode round trip", ok,
           f"max error {err:.4f} px <= 0.25 over 1000 coords in [0, {res - 0.5 / k}); "
           f"clamped edge band [{res - 0.5 / k}, {res}) max error {edge_err:.4f} px")
    assert ok


# 7 ----------------------------------------------------------------------------
def test_nme_correctness():
    hand = nme(np.array([[[0.0, 0.0], [6.0, 8.0]]]), np.array([[[0.0, 0.0], [3.0, 4.0]]]),
               np.ones((1, 2)), "inter_ocular", np.array([[0, 1]]))
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 13))
        gts, preds = rng.uniform(0, 64, (n, k, 2)), rng.uniform(0, 64, (n, k, 2))
        vis = (rng.random((n, k)) > 0.3).astype(float)
        vis[:, :2] = 1
        d = [math.dist(g[0], g[1]) for g in gts]
        worst = max(worst, abs(nme(preds, gts, vis, "inter_ocular", np.tile([0, 1], (n, 1)))
                               - brute_nme(preds, gts, vis, d)))
    ok = hand == 0.5 and worst <= 1e-12
    record("NME correctness", ok, f"3-4-5 case = {hand!r}; max |impl - oracle| {worst:.1e} <= 1e-12 on 50 draws")
    assert ok


# 8 ----------------------------------------------------------------------------
def test_overfit_sanity():
    data = generate(5, 32, split="train")
    cfg = StageConfig(kind="supervised_thermal", variant="s", epochs=200, patience=200, seed=0)
    t0 = time.time()
    r = train_supervised(cfg, data, data)  # validation on the training set = train NME
    secs = time.time() - t0
    best = min(r.val_nme)
    first = next((e for e, v in enumerate(r.val_nme, 1) if v < 0.05), None)
    ok = best < 0.05 and secs < 300
    record("overfit sanity", ok, f"train NME {best:.4f} < 0.05 (first below at epoch {first}/200), "
           f"{secs:.0f}s < 300s")
    assert ok


# 9 ----------------------------------------------------------------------------
def test_kd_benefit(benchmark):
    res = benchmark["res"]
    sup, kd = res.mean_nme("supervised"), res.mean_nme("Ours")
    secs = benchmark["seconds"]
    ok = kd <= sup and len(SEEDS) >= 5
    record("KD benefit", ok, f"{len(SEEDS)} seeds, n_train={benchmark['cfg'].n_train}: "
           f"KTL (FD+LD+DIKD) mean val NME {kd:.4f} vs supervised {sup:.4f} "
           f"(teacher {benchmark['teacher_nme']:.4f}); benchmark wall time {secs / 60:.1f} min")
    assert ok


# 10 ---------------------------------------------------------------------------
def test_dikd_ablation_ordering(benchmark):
    res = benchmark["res"]
    cmp = res.compare(INJECTION_ORDERING)
    means = {a: res.mean_nme(a) for a in ("Baseline", "+FI", "+RI", "Ours")}
    gain = 1 - means["Ours"] / means["Baseline"]
    ok = cmp.passed and gain >= 0.02
    verdicts = "; ".join(f"{t}: {'ok' if v else 'no'}" for t, v in cmp.verdicts)
    record("DIKD ablation ordering", ok,
           " ".join(f"{a} {m:.4f}" for a, m in means.items())
           + f"; {verdicts}; Ours vs Baseline {100 * gain:+.2f}% (need >= 2%)")
    assert ok


# 11 ---------------------------------------------------------------------------
def test_stability_ordering(benchmark):
    cfg, res = benchmark["cfg"], benchmark["res"]
    stab = res.stability(cfg.window_start, cfg.window_len, arms=("+RI", "+FI"))
    worst = 0.0
    for r in res.ok_runs():
        g = np.array(r.grad_norms)
        rep = stability_metrics(GradNormSeries(g, cfg.window_start, cfg.window_len))
        ref = brute_stats(list(g[cfg.window_start: cfg.window_start + cfg.window_len]), cfg.window_start)
        got = (rep.std_dev, rep.cv_percent, rep.msc, rep.r_squared)
        worst = max(worst, max(abs(a - b) / max(1.0, abs(b)) for a, b in zip(got, ref)))
    ok = stab.passed and worst <= 1e-12 and cfg.window_len == 500
    m = stab.means
    record("stability ordering", ok,
           f"{len(SEEDS)} seeds, steps [{cfg.window_start}, {cfg.window_start + cfg.window_len}): "
           f"+RI std {m['+RI']['std_dev']:.4f} cv {m['+RI']['cv_percent']:.2f}% vs "
           f"+FI std {m['+FI']['std_dev']:.4f} cv {m['+FI']['cv_percent']:.2f}%; "
           f"oracle max rel diff {worst:.1e}")
    assert ok


# 12 ---------------------------------------------------------------------------
def test_determinism(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("seed = 12\ndata.n_train = 32\ndata.n_val = 8\ndata.n_teacher = 8\n"
                    "stage.epochs = 2\nstage.batch_size = 8\n")
    d = tmp_path / "out"
    files = ("data/train/samples.bin", "data/val/samples.bin", "data/pretrain/samples.bin",
             "data/train/manifest.json", "run/model.dikd", "run/train_log.csv", "run/grad_norms.csv",
             "run/val_log.csv", "eval/eval.csv")
    snaps, codes = [], []
    for _ in range(2):
        codes += [cli_main(["gen-data", "--config", str(conf), "--out", str(d / "data")]),
                  cli_main(["train", "--config", str(conf), "--data", str(d / "data"), "--out", str(d / "run")]),
                  cli_main(["eval", "--checkpoint", str(d / "run" / "model.dikd"),
                            "--data", str(d / "data" / "val"), "--out", str(d / "eval")])]
        snaps.append({f: _sha(d / f) for f in files})
    same = [f for f in files if snaps[0][f] == snaps[1][f]]
    ok = codes == [0] * 6 and len(same) == len(files)
    record("determinism", ok, f"{len(same)}/{len(files)} gen-data/train/eval artifacts bit-identical across "
           "two runs")
    assert ok


# 13 ---------------------------------------------------------------------------
def test_persistence(tmp_path):
    ds = generate(13, 6, split="val")
    save(ds, tmp_path / "a")
    back = load(tmp_path / "a")
    save(back, tmp_path / "b")
    data_ok = back.digest() == ds.digest() and all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        for f in ("samples.bin", "manifest.json"))
    r = train_supervised(StageConfig(variant="t", epochs=1, batch_size=8), generate(14, 8), ds)
    save_checkpoint(r.checkpoint, tmp_path / "m.dikd")
    ck = load_checkpoint(tmp_path / "m.dikd")
    save_checkpoint(ck, tmp_path / "m2.dikd")
    ckpt_ok = (tmp_path / "m.dikd").read_bytes() == (tmp_path / "m2.dikd").read_bytes() and all(
        ck.params[k].tobytes() == r.checkpoint.params[k].tobytes() for k in r.checkpoint.params)

    failures = 0
    blob = bytearray((tmp_path / "a" / "samples.bin").read_bytes())
    blob[len(blob) // 2] ^= 0x01
    (tmp_path / "a" / "samples.bin").write_bytes(bytes(blob))
    try:
        load(tmp_path / "a")
    except CorruptionError:
        failures += 1
    raw = (tmp_path / "m.dikd").read_bytes()
    for bad in (raw[:-1], raw[:-100] + bytes(100), b"XXXX" + raw[4:]):
        (tmp_path / "bad.dikd").write_bytes(bad)
        try:
            load_checkpoint(tmp_path / "bad.dikd")
        except FormatError:
            failures += 1
    ok = data_ok and ckpt_ok and failures == 4
    record("persistence", ok, f"dataset round trip {'bit-exact' if data_ok else 'DIFFERS'}, checkpoint round "
           f"trip {'bit-exact' if ckpt_ok else 'DIFFERS'}, {failures}/4 corrupted payloads rejected")
    assert ok
