import argparse
import sys

from config_loader import ConfigLoader
from experiment import EXIT_INVALID, EXIT_STALL, ExperimentRunner
from phylo.errors import IndelPhyError, ReconstructionStall
from validation import LEMMAS


def _overrides(args) -> dict:
    """CLI flags that were actually given, as config keys."""
    mapping = {
        "seed": args.seed,
        "trials": args.trials,
        "mode": args.mode,
        "k": args.k,
        "zeta": args.zeta,
        "delta": args.delta,
        "r": args.r,
        "resolve_margin": args.resolve_margin,
        "lambda_min": args.lambda_min,
        "out_dir": args.out,
        "tree_file": args.tree,
    }
    out = {key: value for key, value in mapping.items() if value is not None}
    if args.track_lineage:
        out["track_lineage"] = True
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key=value experiment config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--trials", type=int, default=None)
    common.add_argument("--mode", choices=("sym", "asym"), default=None)
    common.add_argument("--k", type=int, default=None, help="reference sequence length")
    common.add_argument("--zeta", type=float, default=None)
    common.add_argument("--delta", type=float, default=None)
    common.add_argument("--r", type=float, default=None, help="short-quartet radius (0 = 2*delta*log2 log2 n)")
    common.add_argument("--resolve-margin", dest="resolve_margin", type=float, default=None,
                        help="smallest FPM margin, in lambda_min units, that resolves a quartet")
    common.add_argument("--lambda-min", dest="lambda_min", type=float, default=None)
    common.add_argument("--tree", default=None, help="model tree file (Newick or tree-parameter format)")
    common.add_argument("--track-lineage", dest="track_lineage", action="store_true")
    common.add_argument("--out", default=None, help="output directory")

    parser = argparse.ArgumentParser(description="CFN-Indel simulation and tree reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="evolve sequences down the model tree")

    rec = sub.add_parser("reconstruct", parents=[common], help="rebuild the tree from leaf sequences")
    rec.add_argument("sequences", nargs="?", default=None, help="leaf sequence file")
    rec.add_argument("--oracle-tree", dest="oracle_tree", default=None,
                     help="reconstruct from exact leaf distances of this model tree")
    rec.add_argument("--truth", default=None, help="model tree to compare against")
    rec.add_argument("--dump", action="store_true", help="write signature and distance-table dumps")

    val = sub.add_parser("validate", parents=[common], help="Monte Carlo checks of the concentration properties")
    val.add_argument("--lemma", action="append", choices=LEMMAS, default=None,
                     help="checker to run (repeatable; default all)")
    val.add_argument("--json", action="store_true", help="emit the structured report")
    val.add_argument("--self-test", dest="self_test", action="store_true",
                     help="also run every checker on an input built to fail it")
    val.add_argument("--bounds", action="store_true", help="write the bounds sweep table")

    sub.add_parser("experiment", parents=[common], help="simulate + reconstruct over trials and k sweeps")

    rf = sub.add_parser("rf", parents=[common], help="Robinson-Foulds distance of two Newick files")
    rf.add_argument("first")
    rf.add_argument("second")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ConfigLoader(config_path=args.config).load_config(_overrides(args))
        runner = ExperimentRunner(config)
        if args.command == "simulate":
            return runner.cmd_simulate()
        if args.command == "reconstruct":
            if not args.sequences and not args.oracle_tree:
                print("[Reconstruct] need a sequence file or --oracle-tree", file=sys.stderr)
                return EXIT_INVALID
            return runner.cmd_reconstruct(args.sequences, args.oracle_tree, args.truth, args.dump)
        if args.command == "validate":
            return runner.cmd_validate(args.lemma or LEMMAS, args.json, args.self_test, args.bounds)
        if args.command == "experiment":
            return runner.cmd_experiment()
        return runner.cmd_rf(args.first, args.second)
    except ReconstructionStall as exc:
        print(f"[{args.command.capitalize()}] {exc}", file=sys.stderr)
        return EXIT_STALL
    except (IndelPhyError, ValueError, OSError) as exc:
        print(f"[{args.command.capitalize()}] {exc}", file=sys.stderr)
        return EXIT_INVALID


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
