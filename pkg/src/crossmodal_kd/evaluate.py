"""SimCC decoding, normalized mean error, evaluation reports and arm comparisons."""
from __future__ import annotations

import csv
import io
import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ContractError
from .losses import softmax
from .nn import Model, flop_count, forward, param_count

NORM_MODES = ("inter_ocular", "bbox_diag")


def _values(x):
    return x.values if isinstance(x, ag.Tensor) else np.asarray(x, dtype=np.float64)


def decode_simcc(logits, k_split: int, mode: str = "argmax") -> np.ndarray:
    """N x K x 2 pixel coordinates from per-axis bin logits.

    ``argmax`` picks the highest bin (ties go to the lowest index) and divides
    by ``k_split``; ``expectation`` uses the softmax-weighted mean bin.
    """
    coords = []
    for axis in logits:
        v = _values(axis)
        if mode == "argmax":
            b = np.argmax(v, axis=-1).astype(np.float64)
        elif mode == "expectation":
            b = (softmax(v) * np.arange(v.shape[-1])).sum(axis=-1)
        else:
            raise ContractError(f"unknown decode mode {mode!r}")
        coords.append(b / k_split)
    return np.stack(coords, axis=-1)


def normalizers(gts, norm: str, aux) -> np.ndarray:
    """Per-sample reference distance: eye-center distance or bbox diagonal.

    ``aux`` holds N x 2 eye indices for ``inter_ocular`` and N x 4 boxes
    (x, y, w, h) for ``bbox_diag``.
    """
    gts = np.asarray(gts, dtype=np.float64)
    aux = np.asarray(aux)
    if norm == "inter_ocular":
        idx = np.arange(len(gts))
        left = gts[idx, aux[:, 0].astype(int)]
        right = gts[idx, aux[:, 1].astype(int)]
        return np.linalg.norm(left - right, axis=-1)
    if norm == "bbox_diag":
        box = aux.astype(np.float64)
        return np.hypot(box[:, 2], box[:, 3])
    raise ContractError(f"unknown normalization {norm!r}")


def nme_per_sample(preds, gts, visibility, norm: str, aux) -> tuple:
    """(per-sample NME with NaN for skipped samples, number skipped).

    A sample is skipped when its reference distance is not positive.
    """
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    vis = np.asarray(visibility, dtype=np.float64)
    n_vis = vis.sum(axis=1)
    if np.any(n_vis == 0):
        raise ContractError("every sample needs at least one visible keypoint")
    d = normalizers(gts, norm, aux)
    err = np.linalg.norm(preds - gts, axis=-1)
    per = (err * vis).sum(axis=1) / n_vis
    bad = d <= 0
    out = np.where(bad, np.nan, per / np.where(bad, 1.0, d))
    return out, int(bad.sum())


def nme(preds, gts, visibility, norm: str, aux) -> float:
    """Mean over samples of (1/K_vis) * sum_visible ||pred - gt|| / d."""
    per, skipped = nme_per_sample(preds, gts, visibility, norm, aux)
    if skipped:
        warnings.warn(f"skipped {skipped} sample(s) with non-positive {norm} distance")
    if skipped == len(per):
        raise ContractError("no sample has a positive reference distance")
    return float(np.nanmean(per))


def predict(model: Model, images: np.ndarray, batch_size: int = 64, mode: str = "argmax") -> np.ndarray:
    k_split = model.head_config.split_factor
    out = []
    with ag.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(decode_simcc(forward(model, images[i : i + batch_size]), k_split, mode))
    return np.concatenate(out)


@dataclass
class EvalReport:
    nme: dict
    per_keypoint_error: np.ndarray
    params_trainable: int
    params_total: int
    flops: int
    n_samples: int
    config_digest: str = ""
    dataset_digest: str = ""
    model_id: str = ""
    skipped: dict = field(default_factory=dict)

    def csv_rows(self) -> list:
        return [
            {
                "model_id": self.model_id,
                "dataset_digest": self.dataset_digest,
                "norm_mode": mode,
                "nme": repr(value),
                "params_trainable": self.params_trainable,
                "params_total": self.params_total,
                "flops": self.flops,
                "n_samples": self.n_samples,
            }
            for mode, value in self.nme.items()
        ]


EVAL_COLUMNS = (
    "model_id", "dataset_digest", "norm_mode", "nme",
    "params_trainable", "params_total", "flops", "n_samples",
)


def evaluate(model: Model, dataset, norm: str = "inter_ocular", model_id: str = "",
             config_digest: str = "", decode_mode: str = "argmax") -> EvalReport:
    if len(dataset) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    if dataset.resolution != model.config.input_resolution:
        raise ContractError(
            f"dataset resolution {dataset.resolution} != model {model.config.input_resolution}"
        )
    arr = dataset.arrays()
    images = arr["rgb"] if model.modality == "rgb" else arr["thermal"]
    preds = predict(model, images, mode=decode_mode)
    gts, vis = arr["landmarks"], arr["visibility"]
    modes = NORM_MODES if norm == "all" else (norm,)
    scores, skipped = {}, {}
    for mode in modes:
        aux = arr["eyes"] if mode == "inter_ocular" else arr["bbox"]
        per, skipped[mode] = nme_per_sample(preds, gts, vis, mode, aux)
        scores[mode] = float(np.nanmean(per))
    err = np.linalg.norm(preds - gts, axis=-1)
    per_kp = (err * vis).sum(axis=0) / np.maximum(vis.sum(axis=0), 1)
    return EvalReport(
        nme=scores,
        per_keypoint_error=per_kp,
        params_trainable=param_count(model),
        params_total=param_count(model, trainable=False),
        flops=flop_count(model),
        n_samples=len(dataset),
        config_digest=config_digest,
        dataset_digest=dataset.digest(),
        model_id=model_id,
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# arm comparisons


@dataclass
class ArmResult:
    arm: str
    seed: int
    nme: float
    dataset_digest: str = ""


@dataclass
class Comparison:
    passed: bool
    means: dict
    verdicts: list
    table: str


_OPS = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def parse_ordering(spec) -> list:
    """``"Ours <= +FI <= Baseline"`` -> [("Ours", "<=", "+FI"), ("+FI", "<=", "Baseline")].

    A list of such strings is accepted too.
    """
    if isinstance(spec, (list, tuple)):
        return [c for s in spec for c in parse_ordering(s)]
    tokens = [t.strip() for t in re.split(r"(<=|>=|<|>)", spec)]
    if len(tokens) < 3 or len(tokens) % 2 == 0 or not all(tokens[::2]):
        raise ContractError(f"cannot parse ordering {spec!r}")
    return [(tokens[i], tokens[i + 1], tokens[i + 2]) for i in range(0, len(tokens) - 2, 2)]


def compare_arms(results, ordering) -> Comparison:
    """Check an NME ordering over seed-averaged arm means."""
    results = list(results)
    if len(results) < 2:
        raise ContractError("need at least two results to compare")
    digests = {r.dataset_digest for r in results}
    if len(digests) > 1:
        raise ContractError(f"results come from different datasets: {sorted(digests)}")
    by_arm: dict = {}
    for r in results:
        by_arm.setdefault(r.arm, []).append(r.nme)
    # fsum makes the means independent of input order
    means = {arm: math.fsum(v) / len(v) for arm, v in sorted(by_arm.items())}
    verdicts = []
    for left, op, right in parse_ordering(ordering):
        if left not in means or right not in means:
            raise ContractError(f"ordering mentions unknown arm in {left} {op} {right}")
        verdicts.append((f"{left} {op} {right}", bool(_OPS[op](means[left], means[right]))))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "n_seeds", "mean_nme", "std_nme"])
    for arm in means:
        w.writerow([arm, len(by_arm[arm]), repr(means[arm]), repr(float(np.std(by_arm[arm])))])
    return Comparison(all(v for _, v in verdicts), means, verdicts, buf.getvalue())
