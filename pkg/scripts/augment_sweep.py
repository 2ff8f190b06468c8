"""Test accuracy and loss across MixUp/CutMix alpha pairs on synthetic data."""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from _common import common_args, setup  # noqa: E402

from shrimpxnet.data import stack  # noqa: E402
from shrimpxnet.trainer import evaluate, train, with_values  # noqa: E402

ALPHA_PAIRS = ((0.0, 0.0), (0.2, 0.3), (0.25, 0.4), (0.3, 0.5), (0.35, 0.6), (0.4, 0.7))


def main():
    p = common_args(__doc__)
    p.add_argument("--out", default="augment_sweep.tsv", help="result table (default: %(default)s)")
    args = p.parse_args()
    splits, spec, config = setup(args)
    x, y = stack(splits.test)
    lines = ["mixup_alpha\tcutmix_alpha\ttest_accuracy\ttest_loss\tepochs"]
    for mixup_alpha, cutmix_alpha in ALPHA_PAIRS:
        res = train(with_values(config, mixup_alpha=mixup_alpha, cutmix_alpha=cutmix_alpha), spec, splits)
        loss, acc, _ = evaluate(spec, res.checkpoint.params, x, y)
        lines.append(f"{mixup_alpha}\t{cutmix_alpha}\t{acc:.4f}\t{loss:.4f}\t{len(res.history.epochs)}")
        print(lines[-1], flush=True)
    Path(args.out).write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
