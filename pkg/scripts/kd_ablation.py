"""Supervised vs. distilled thermal students over several seeds.

Trains the RGB teacher once, then every arm for every seed, and prints the
KD-benefit, injection-ordering and gradient-stability verdicts.

    python3 scripts/kd_ablation.py --config configs/benchmark.conf --seeds 0,1,2,3,4 --out runs/ablation
"""
import argparse
import sys
import time
from pathlib import Path

from crossmodal_kd.ablation import INJECTION_ORDERING, run_ablation
from crossmodal_kd.config import load_config, render_config

ARMS = ("supervised", "Baseline", "+FI", "+RI", "Ours")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).parent.parent / "configs" / "benchmark.conf"))
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--arms", default=",".join(ARMS))
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(f"# config_digest: {cfg.digest}\n" + render_config(cfg))
    t0 = time.time()
    res = run_ablation(cfg, args.arms.split(","), seeds, out,
                       progress=lambda m: print(f"[{time.time() - t0:7.1f}s] {m}", file=sys.stderr))
    print(f"teacher val NME {res.teacher_nme:.4f}")
    print(res.table(), end="")
    arms = {r.arm for r in res.ok_runs()}
    if {"supervised", "Ours"} <= arms:
        kd = res.compare("Ours <= supervised")
        print(kd.table, end="")
        print(f"KD benefit (Ours <= supervised): {'pass' if kd.passed else 'fail'}")
    if {"Baseline", "+FI", "+RI", "Ours"} <= arms:
        cmp = res.compare(INJECTION_ORDERING)
        for text, ok in cmp.verdicts:
            print(f"{text}: {'pass' if ok else 'fail'}")
        gain = 1 - res.mean_nme("Ours") / res.mean_nme("Baseline")
        print(f"Ours vs Baseline relative gain: {100 * gain:.2f}%")
        stab = res.stability(cfg.window_start, cfg.window_len, arms=("+RI", "+FI"))
        for arm, m in stab.means.items():
            print(f"{arm}: std {m['std_dev']:.4f} cv {m['cv_percent']:.2f} msc {m['msc']:.4f} r2 {m['r_squared']:.4f}")
        for text, ok in stab.verdicts:
            print(f"{text}: {'pass' if ok else 'fail'}")
    print(f"total {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
