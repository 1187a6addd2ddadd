"""Desk-scale CIFAR-10 comparison: representational (20+20 epochs) vs functional (20 epochs).

Expects the CIFAR-10 binary release (``data_batch_{1..5}.bin``, ``test_batch.bin``)
under ``--data-root`` or ``$FKT_DATA_ROOT/cifar10``. Writes a run folder with
both regimes' epoch logs, metrics, ``comparison.txt`` and ``comparison.json``.

    python scripts/desk_comparison.py --data-root ~/data/cifar10 --device gpu
"""
import argparse
import logging
import sys
from pathlib import Path

from fkt.cli import make_run_dir
from fkt.config import read_config
from fkt.pipelines import configure_determinism, run_comparison

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data-root", help="directory holding the CIFAR-10 .bin files")
    parser.add_argument("--device", choices=("cpu", "gpu"), default="cpu")
    parser.add_argument("--epochs", type=int, default=20, help="per-stage epoch budget")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--batch-size", type=int, default=256)
    parser.add_argument("--output-dir", default="runs")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    overrides = [f"device={args.device}", f"epochs={args.epochs}", f"seeds={args.seeds}",
                 f"batch_size={args.batch_size}"]
    if args.data_root:
        overrides.append(f"dataset.root_path={Path(args.data_root).expanduser()}")
    rep = read_config(CONFIGS / "cifar10_desk_representational.json", overrides + [f"pretrain_epochs={args.epochs}"])
    fun = read_config(CONFIGS / "cifar10_desk_functional.json", overrides)
    configure_determinism(rep.determinism)
    run_dir = make_run_dir(args.output_dir, "compare", rep.dataset.name)
    report, _ = run_comparison(rep, fun, run_dir)
    sys.stdout.write(report.to_text())
    gap = report.accuracy_gap()
    print(f"functional - representational accuracy: {gap:+.2f} pp "
          f"(directional check {'holds' if gap >= -1.0 else 'does not hold'}; reported, not gated)")
    print(run_dir)


if __name__ == "__main__":
    main()
