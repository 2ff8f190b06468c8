"""FGSM accuracy ladder for a plain model and an adversarially trained one."""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from _common import common_args, setup  # noqa: E402

from shrimpxnet.adversarial import DEFAULT_EPSILONS, robustness_sweep  # noqa: E402
from shrimpxnet.data import stack  # noqa: E402
from shrimpxnet.trainer import train, with_values  # noqa: E402


def main():
    p = common_args(__doc__)
    p.add_argument("--train-eps", type=float, default=0.1, help="FGSM epsilon used in adversarial training "
                   "(default: %(default)s)")
    p.add_argument("--out", default="fgsm_sweep.tsv", help="result table (default: %(default)s)")
    args = p.parse_args()
    splits, spec, config = setup(args)
    x, y = stack(splits.test)
    val = stack(splits.validation)
    runs = {"plain": config, "adversarial": with_values(config, fgsm_epsilon=args.train_eps)}
    lines = ["model\tepsilon\ttest_accuracy\ttest_loss\tval_loss"]
    for name, cfg in runs.items():
        params = train(cfg, spec, splits).checkpoint.params
        for row in robustness_sweep(spec, params, x, y, DEFAULT_EPSILONS, validation=val):
            lines.append(f"{name}\t{row.epsilon}\t{row.accuracy:.4f}\t{row.loss:.4f}\t{row.val_loss:.4f}")
            print(lines[-1], flush=True)
    Path(args.out).write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
