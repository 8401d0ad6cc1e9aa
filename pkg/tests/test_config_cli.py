from pathlib import Path

import pytest

from crossmodal_kd.cli import main
from crossmodal_kd.config import KNOWN_KEYS, parse_config_text, render_config
from crossmodal_kd.errors import ConfigError

TINY = """\
seed = 3
data.n_train = 16
data.n_val = 8
data.n_teacher = 16
stage.variant = t
stage.epochs = 2
stage.batch_size = 8
optim.warmup_epochs = 1
ablate.teacher_variant = t
ablate.teacher_epochs = 2
stability.window_len = 3
"""


def test_parse_defaults_and_overrides():
    cfg = parse_config_text("seed = 5\nloss.lambda_lg = 0.01\nloss.enable_fi = false\n")
    assert cfg.seed == 5 and cfg.stage.seed == 5
    assert cfg.stage.lambda_lg == 0.01 and cfg.stage.enable_fi is False
    assert cfg.n_train == 512 and cfg.n_teacher == 2048 and cfg.window_len == 500
    over = parse_config_text("seed = 5\n", {"seed": 9, "stage.epochs": "7"})
    assert over.seed == 9 and over.stage.epochs == 7


@pytest.mark.parametrize("text", [
    "loss.lambda_lg = 1\n",              # no seed
    "seed = 1\nbogus.key = 2\n",         # unknown key
    "seed = 1\nseed = 2\n",              # duplicate
    "seed = x\n",                        # bad int
    "seed = 1\nloss.enable_fm = maybe\n",
    "seed = 1\njust words\n",
    "seed = 1\neval.norm = manhattan\n",
])
def test_parse_rejects(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_digest_tracks_values_and_render_round_trips():
    a = parse_config_text("seed = 1\n")
    b = parse_config_text("seed = 1\n# comment\n\n")
    c = parse_config_text("seed = 1\nloss.alpha = 3\n")
    assert a.digest == b.digest != c.digest
    again = parse_config_text(render_config(c))
    assert again.digest == c.digest and len(KNOWN_KEYS) == len(c.values)


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "run.conf"
    p.write_text(TINY)
    return p


def _digest(path: Path) -> str:
    first = path.read_text().splitlines()[0]
    assert first.startswith("# config_digest: ")
    return first.split(": ")[1]


def test_gen_train_eval_are_deterministic(conf, tmp_path, capsys):
    d = tmp_path / "out"
    files = ["data/train/samples.bin", "data/train/manifest.json", "data/val/samples.bin",
             "data/pretrain/samples.bin", "run/model.dikd", "run/train_log.csv", "run/grad_norms.csv",
             "run/val_log.csv", "eval/eval.csv"]
    snapshots = []
    for _ in range(2):  # same commands, same paths: artifacts must not change
        assert main(["gen-data", "--config", str(conf), "--out", str(d / "data")]) == 0
        assert main(["train", "--config", str(conf), "--data", str(d / "data"), "--out", str(d / "run")]) == 0
        assert main(["eval", "--checkpoint", str(d / "run" / "model.dikd"), "--data", str(d / "data" / "val"),
                     "--out", str(d / "eval")]) == 0
        snapshots.append({f: (d / f).read_bytes() for f in files})
    for f in files:
        assert snapshots[0][f] == snapshots[1][f], f
    digest = _digest(d / "run" / "train_log.csv")
    for f in ("run/grad_norms.csv", "run/val_log.csv", "eval/eval.csv", "run/config.txt"):
        assert _digest(d / f) == digest
    rows = (d / "eval" / "eval.csv").read_text().splitlines()
    assert rows[1].startswith("model_id,") and len(rows) == 4  # digest, header, two norm modes


def test_exit_codes(conf, tmp_path):
    (tmp_path / "noseed.conf").write_text("stage.epochs = 1\n")
    assert main(["train", "--config", str(tmp_path / "noseed.conf"), "--out", str(tmp_path / "x")]) == 2
    ktl = tmp_path / "ktl.conf"
    ktl.write_text(TINY + "stage.kind = ktl\n")
    assert main(["train", "--config", str(ktl), "--out", str(tmp_path / "k")]) == 2
    missing = tmp_path / "ktl2.conf"
    missing.write_text(TINY + f"stage.kind = ktl\nstage.teacher_checkpoint = {tmp_path / 'nope.dikd'}\n")
    assert main(["train", "--config", str(missing), "--out", str(tmp_path / "k2")]) == 3
    (tmp_path / "bad.dikd").write_bytes(b"NOPE" + bytes(40))
    assert main(["eval", "--checkpoint", str(tmp_path / "bad.dikd"), "--data", str(tmp_path)]) == 3
    assert main(["train", "--config", str(tmp_path / "absent.conf"), "--out", str(tmp_path / "y")]) == 3
    boom = tmp_path / "boom.conf"
    boom.write_text(TINY + "optim.base_lr = 1e300\noptim.min_lr = 0\n")
    assert main(["train", "--config", str(boom), "--out", str(tmp_path / "boom")]) == 4
    log = (tmp_path / "boom" / "train_log.csv").read_text().splitlines()
    assert log[0].startswith("# config_digest:") and len(log) >= 2


def test_ablate_stability_report(conf, tmp_path, capsys):
    out = tmp_path / "abl"
    code = main(["ablate", "--config", str(conf), "--arms", "Baseline,+FI,+RI,Ours,FD+LD",
                 "--seeds", "0,1", "--out", str(out)])
    assert code == 0
    table = (out / "ablation.csv").read_text().splitlines()
    assert len(table) == 2 + 10 and all(line.endswith(",ok") for line in table[2:])
    # FD+LD shares flags with Baseline, so it reuses that run
    rows = {(r.split(",")[0], r.split(",")[1]): r.split(",")[7] for r in table[2:]}
    assert rows[("FD+LD", "0")] == rows[("Baseline", "0")]
    for name in ("comparison_injection.csv", "stability.csv", "teacher/model.dikd"):
        assert (out / name).exists()
    assert main(["stability", "--runs", str(out), "--config", str(conf), "--out", str(tmp_path / "st")]) == 0
    lines = (tmp_path / "st" / "stability.csv").read_text().splitlines()
    assert any(line.startswith("# std_dev: +RI <= +FI") for line in lines)
    assert main(["report", "--runs", str(out), "--out", str(tmp_path / "rep")]) == 0
    assert "## ablation.csv" in (tmp_path / "rep" / "report.md").read_text()
    assert main(["ablate", "--config", str(conf), "--arms", "Nope", "--out", str(tmp_path / "z")]) == 2
