"""End-to-end run on synthetic data: train, evaluate, attack, explain.

Prints the training log, the classification report, the FGSM sweep and the
fraction of correct test images whose CAM peak lands on the drawn shape.
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from _common import common_args, setup  # noqa: E402

from shrimpxnet.adversarial import robustness_sweep, sweep_table  # noqa: E402
from shrimpxnet.data import stack  # noqa: E402
from shrimpxnet.explain import METHODS, compute_cam, render_overlay, upsample_bilinear  # noqa: E402
from shrimpxnet.metrics import build_report  # noqa: E402
from shrimpxnet.model import predict_proba, save_checkpoint  # noqa: E402
from shrimpxnet.trainer import train  # noqa: E402


def main():
    p = common_args(__doc__.splitlines()[0])
    p.add_argument("--out", default="smoke_out", help="artifact directory (default: %(default)s)")
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    splits, spec, config = setup(args)
    t0 = time.perf_counter()
    result = train(config, spec, splits, on_epoch=lambda r: print(r.log_line(), flush=True))
    print(f"trained {len(result.history.epochs)} epochs in {time.perf_counter() - t0:.1f}s")
    save_checkpoint(result.checkpoint, out / "checkpoint.sxn")
    params = result.checkpoint.params

    x, y = stack(splits.test)
    report = build_report(predict_proba(spec, params, x), y, splits.class_names)
    (out / "report.json").write_text(report.to_json())
    print(report.text_table())

    rows = robustness_sweep(spec, params, x, y, validation=stack(splits.validation))
    (out / "attack.tsv").write_text(sweep_table(rows))
    print(sweep_table(rows))

    hits = {m: [] for m in METHODS}
    for i, sample in enumerate(splits.test):
        if predict_proba(spec, params, sample.image[None])[0].argmax() != sample.label:
            continue
        t, l, b, r = sample.bbox
        for method in METHODS:
            heat = compute_cam(spec, params, sample.image, sample.label, method)
            row, col = np.unravel_index(upsample_bilinear(heat.values, spec.input_size).argmax(), spec.input_size)
            hits[method].append(t <= row <= b and l <= col <= r)
            if i < 4:
                render_overlay(heat, sample.image, out / "heatmaps" / f"{i:02d}_{method}.png")
    for method, h in hits.items():
        print(f"{method}: CAM peak inside shape box for {np.mean(h):.3f} of {len(h)} correct images")


if __name__ == "__main__":
    main()
