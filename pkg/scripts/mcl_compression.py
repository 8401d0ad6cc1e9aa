"""Two-level pipeline end to end: RGB teacher -> KTL thermal model (variant m)
-> MCL compression into a variant-t student, with params/FLOPs/NME per model.

    python3 scripts/mcl_compression.py --epochs 20 --out runs/mcl
"""
import argparse
from pathlib import Path

from crossmodal_kd.ablation import load_or_generate, teacher_data, train_teacher
from crossmodal_kd.config import load_config
from crossmodal_kd.evaluate import evaluate
from crossmodal_kd.pipeline import model_from_checkpoint, run_stage, save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(Path(__file__).parent.parent / "configs" / "benchmark.conf"))
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--out", default="runs/mcl")
    args = ap.parse_args()
    out = Path(args.out)
    cfg = load_config(args.config, {"ablate.teacher_variant": "m"})
    train, val = load_or_generate(cfg)

    teacher = train_teacher(cfg, teacher_data(cfg), val, out / "teacher")
    ktl = run_stage(cfg.stage_config(kind="ktl", variant="m", epochs=args.epochs,
                                     teacher_checkpoint=str(out / "teacher" / "model.dikd")), train, val)
    save_checkpoint(ktl.checkpoint, out / "ktl" / "model.dikd")
    mcl = run_stage(cfg.stage_config(kind="mcl", variant="t", epochs=args.epochs,
                                     teacher_checkpoint=str(out / "ktl" / "model.dikd")), train, val)
    save_checkpoint(mcl.checkpoint, out / "mcl" / "model.dikd")

    print(f"{'model':<22}{'params':>10}{'MFLOPs':>10}{'NME':>10}")
    for name, ck in (("rgb teacher (m)", teacher.checkpoint), ("ktl thermal (m)", ktl.checkpoint),
                     ("mcl thermal (t)", mcl.checkpoint)):
        rep = evaluate(model_from_checkpoint(ck, frozen=False), val)
        print(f"{name:<22}{rep.params_total:>10}{rep.flops / 1e6:>10.1f}{rep.nme['inter_ocular']:>10.4f}")


if __name__ == "__main__":
    main()
