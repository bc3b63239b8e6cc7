"""Command-line entry point: ``bundlenet <generate|reference|gridsearch|train|evaluate|report>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .oracles import ContractError, InstanceFormatError

COMMANDS = ("generate", "reference", "gridsearch", "train", "evaluate", "report")


def _budgets(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"budgets must be comma-separated integers: {text!r}") from exc
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("budgets must be positive")
    return tuple(sorted(set(vals)))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bundlenet", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file with sections generator, eta, solver, train")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--method", default="bundle-constant", choices=harness.METHODS)
    p.add_argument("--budgets", type=_budgets, default=harness.DEFAULT_BUDGETS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--checkpoint", help="network checkpoint (train writes it, evaluate reads it)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    seed = 0 if args.seed is None else args.seed
    try:
        config = harness.load_config(args.config)
        if args.command == "generate":
            m = harness.cmd_generate(config, args.dataset, args.seed)
            print(f"wrote {len(m.instances)} instances to {args.dataset}")
        elif args.command == "reference":
            m = harness.cmd_reference(args.dataset, config, args.threads)
            print(f"references for {len(m.references)} instances")
        elif args.command == "gridsearch":
            _, best = harness.cmd_gridsearch(args.dataset, config, args.method, args.budgets,
                                             seed, args.threads)
            for method, budget, eta0, gap in best:
                print(f"{method} budget={budget} best eta0={eta0} mean gap={gap:.4f}%")
        elif args.command == "train":
            ckpt = args.checkpoint or str(Path(args.dataset) / "checkpoint.npz")
            _, history = harness.cmd_train(args.dataset, config, ckpt, args.seed)
            for h in history:
                print(f"epoch {h.epoch} mean loss {h.mean_loss:.6f}")
        elif args.command == "evaluate":
            rows = harness.cmd_evaluate(args.dataset, config, args.method, args.budgets, seed,
                                        args.threads, args.checkpoint)
            print(f"wrote {len(rows)} result rows")
        elif args.command == "report":
            out = harness.cmd_report(args.dataset)
            print(f"report written to {out}")
    except (ContractError, InstanceFormatError, FileNotFoundError) as exc:
        print(f"bundlenet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
