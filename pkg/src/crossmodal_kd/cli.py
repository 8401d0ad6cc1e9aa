"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 numeric divergence (non-finite loss or gradient).
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

from .ablation import (
    ARMS, INJECTION_ARMS, INJECTION_ORDERING, STRATEGY_ARMS, load_or_generate, run_ablation, teacher_data,
)
from .config import load_config, render_config
from .data import load, save
from .errors import ConfigError, ContractError, FormatError, NonFiniteError
from .evaluate import EVAL_COLUMNS, evaluate
from .pipeline import load_checkpoint, model_from_checkpoint, run_stage, write_grad_norms, write_val_log
from .pipeline import save_checkpoint
from .stability import STABILITY_COLUMNS, GradNormSeries, read_grad_norms, stability_compare, stability_metrics

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _overrides(args) -> dict:
    return {"seed": args.seed} if getattr(args, "seed", None) is not None else {}


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _stamp(path: Path, digest: str, body: str):
    path.write_text(f"# config_digest: {digest}\n" + body)


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(args.out)
    train, val = load_or_generate(cfg) if not cfg.data_dir else (None, None)
    if train is None:
        raise ConfigError("gen-data generates data; unset data.dir")
    for ds in (train, val, teacher_data(cfg)):
        save(ds, out / ds.split, extra={"config_digest": cfg.digest})
    _stamp(out / "config.txt", cfg.digest, render_config(cfg))
    print(f"wrote {len(train)} train / {len(val)} val / {cfg.n_teacher} pretrain samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if args.data:
        cfg = load_config(args.config, {**_overrides(args), "data.dir": args.data})
    scfg = cfg.stage_config()
    scfg.validate()
    if scfg.teacher_checkpoint and not Path(scfg.teacher_checkpoint).exists():
        raise FileNotFoundError(f"teacher checkpoint {scfg.teacher_checkpoint} not found")
    train, val = load_or_generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _stamp(out / "config.txt", cfg.digest, render_config(cfg))
    result = run_stage(scfg, train, val, out / "train_log.csv", cfg.digest)
    save_checkpoint(result.checkpoint, out / "model.dikd")
    write_grad_norms(out / "grad_norms.csv", result.grad_norms, cfg.digest)
    write_val_log(out / "val_log.csv", result.val_nme, cfg.digest)
    print(f"best epoch {result.best_epoch}: val NME {result.checkpoint.best_val_nme:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt, frozen=False)
    dataset = load(args.data)
    report = evaluate(model, dataset, args.norm, model_id=Path(args.checkpoint).stem,
                      config_digest=ckpt.config_digest)
    buf = io.StringIO()
    w = csv.DictWriter(buf, EVAL_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(report.csv_rows())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _stamp(out / "eval.csv", ckpt.config_digest, buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    arms = _csv_list(args.arms) or list(INJECTION_ARMS)
    unknown = [a for a in arms if a not in ARMS]
    if unknown:
        raise ConfigError(f"unknown arms {unknown}; choose from {sorted(ARMS)}")
    seeds = [int(s) for s in _csv_list(args.seeds)] or [cfg.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _stamp(out / "config.txt", cfg.digest, render_config(cfg))
    res = run_ablation(cfg, arms, seeds, out, progress=lambda m: print(m, file=sys.stderr))
    ok = {r.arm for r in res.ok_runs()}
    for name, group, ordering in (
        ("injection", INJECTION_ARMS, INJECTION_ORDERING),
        ("strategy", STRATEGY_ARMS, ("DIKD <= FD+LD",)),
    ):
        if set(group) <= ok:
            cmp = res.compare(ordering)
            verdicts = "".join(f"# {text}: {'pass' if v else 'fail'}\n" for text, v in cmp.verdicts)
            _stamp(out / f"comparison_{name}.csv", cfg.digest, verdicts + cmp.table)
    if {"+RI", "+FI"} <= ok:
        stab = res.stability(cfg.window_start, cfg.window_len)
        verdicts = "".join(f"# {text}: {'pass' if v else 'fail'}\n" for text, v in stab.verdicts)
        _stamp(out / "stability.csv", cfg.digest, verdicts + stab.table)
    failed = [r for r in res.runs if r.status != "ok"]
    print(res.table(), end="")
    return EXIT_NUMERIC if failed and all(r.status != "ok" for r in res.runs) else EXIT_OK


def cmd_stability(args) -> int:
    """Stability table over ``<arm>_seed<k>/grad_norms.csv`` run directories."""
    cfg = load_config(args.config, _overrides(args)) if args.config else None
    start = cfg.window_start if cfg else 0
    length = cfg.window_len if cfg else 500
    root = Path(args.runs)
    reports = []
    for path in sorted(root.glob("*_seed*/grad_norms.csv")):
        arm, seed = path.parent.name.rsplit("_seed", 1)
        g = read_grad_norms(path)
        reports.append(stability_metrics(GradNormSeries(g, start, length), arm, int(seed)))
    if not reports:
        raise FileNotFoundError(f"no */grad_norms.csv run directories under {root}")
    stab = stability_compare(reports)
    body = "".join(f"# {t}: {'pass' if v else 'fail'}\n" for t, v in stab.verdicts) + stab.table
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest if cfg else "none"
    _stamp(out / "stability.csv", digest, body)
    print(body, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    """Markdown summary of an ablation output directory."""
    root = Path(args.runs)
    lines = ["# Ablation report", ""]
    for name in ("ablation.csv", "comparison_injection.csv", "comparison_strategy.csv", "stability.csv"):
        path = root / name
        if not path.exists():
            continue
        lines += [f"## {name}", "", "```", path.read_text().rstrip(), "```", ""]
    if len(lines) == 2:
        raise FileNotFoundError(f"no ablation outputs in {root}")
    text = "\n".join(lines)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(text)
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossmodal-kd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, config=True, out=True):
        sp = sub.add_parser(name, help=help_text)
        if config:
            sp.add_argument("--config", required=True, help="key = value config file")
            sp.add_argument("--seed", type=int, help="override the config seed")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, "generate the synthetic paired dataset")
    tr = add("train", cmd_train, "run one training stage")
    tr.add_argument("--data", help="dataset directory (overrides data.dir)")
    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="dataset split directory")
    ev.add_argument("--norm", default="all", choices=("inter_ocular", "bbox_diag", "all"))
    ev.add_argument("--out")
    ev.set_defaults(fn=cmd_eval)
    ab = add("ablate", cmd_ablate, "run ablation arms across seeds")
    ab.add_argument("--arms", help=f"comma list from {','.join(ARMS)}")
    ab.add_argument("--seeds", help="comma list of seeds")
    st = sub.add_parser("stability", help="grad-norm stability table for ablation runs")
    st.add_argument("--runs", required=True, help="ablation output directory")
    st.add_argument("--config")
    st.add_argument("--seed", type=int)
    st.add_argument("--out", required=True)
    st.set_defaults(fn=cmd_stability)
    rp = sub.add_parser("report", help="summarize an ablation directory")
    rp.add_argument("--runs", required=True)
    rp.add_argument("--out")
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
