import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import uvicorn
from dotenv import load_dotenv

from src.cli.commands import cmd_explain, cmd_grid, cmd_patterns, cmd_selftest, cmd_synth, cmd_train
from src.cli.config import ExperimentConfig, load_config
from src.errors import DtdError, NumericalError
from src.relevance.rules import Rule

# Load environment variables from project root
env_path = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", ".env"))
load_dotenv(dotenv_path=env_path)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1


def configure_logging() -> None:
    logging.basicConfig(
        level=os.getenv("DTD_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler(os.getenv("DTD_LOG_FILE", "dtd.log")),
        ],
    )


def get_server_config() -> dict:
    config = {
        "host": os.getenv("HOST", "127.0.0.1"),
        "port": int(os.getenv("PORT", "8000")),
        "log_level": os.getenv("DTD_LOG_LEVEL", "info").lower(),
    }
    logger.info(f"Server config: {config}")
    return config


class UsageParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; 2 is reserved for data errors here."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bounded(cast, minimum, what: str):
    def parse(text: str):
        try:
            value = cast(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{what} expected, got '{text}'") from None
        if value < minimum:
            raise argparse.ArgumentTypeError(f"{what} >= {minimum} expected, got {value}")
        return value
    return parse


positive_int = _bounded(int, 1, "integer")
non_negative_int = _bounded(int, 0, "integer")
non_negative_float = _bounded(float, 0.0, "number")


def _add_experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML experiment file")
    parser.add_argument("--mnist-images", help="IDX3 training images")
    parser.add_argument("--mnist-labels", help="IDX1 training labels")
    parser.add_argument("--mnist-test-images", help="IDX3 test images (defaults to the training split)")
    parser.add_argument("--mnist-test-labels", help="IDX1 test labels")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=non_negative_int, help="master seed")
    parser.add_argument("--sigma", type=non_negative_float, action="append", help="noise level (repeatable)")
    parser.add_argument("--rule", action="append", help="explanation rule (repeatable)")
    parser.add_argument("--stabilizer", type=non_negative_float, help="epsilon added to degenerate denominators")
    parser.add_argument("--train-on-clean", action="store_true", help="train every arm on noise-free images")
    parser.add_argument("--train-limit", type=positive_int, help="use only the first N training images")
    parser.add_argument("--epochs", type=non_negative_int, help="training epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="dtd", description="Deep Taylor decomposition explanations for MNIST MLPs")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    for name, help_text in [
        ("train", "train one model per noise level"),
        ("patterns", "estimate signal patterns per noise level"),
    ]:
        _add_experiment_flags(sub.add_parser(name, help=help_text))

    explain = sub.add_parser("explain", help="explain one test image")
    _add_experiment_flags(explain)
    explain.add_argument("--index", type=non_negative_int, required=True, help="test image index")
    explain.add_argument("--target", type=non_negative_int, help="output neuron to explain (default: true label)")
    explain.add_argument("--predicted-target", action="store_true", help="explain the predicted class instead")
    explain.add_argument("--model", help="DTDN file (default: the arm's model in --out)")
    explain.add_argument("--patterns", help="DTDP file (default: the arm's patterns in --out)")
    explain.add_argument("--output", help="output path prefix for the CSV and images")

    grid = sub.add_parser("grid", help="render a comparison grid")
    _add_experiment_flags(grid)
    grid.add_argument("--grid-mode", choices=["fig1", "fig2"], default="fig1")
    grid.add_argument("--index", type=non_negative_int, action="append", help="test image index (repeatable)")

    synth = sub.add_parser("synth", help="pattern vs filter lab on the linear generative model")
    synth.add_argument("--out", default=os.getenv("DTD_OUT_DIR", "out"))
    synth.add_argument("--seed", type=non_negative_int, default=0)
    synth.add_argument("--dim", type=positive_int, default=20)
    synth.add_argument("--distractors", type=non_negative_int, default=5)
    synth.add_argument("--noise-scale", type=non_negative_float, default=0.1)
    synth.add_argument("--samples", type=positive_int, default=50000)
    synth.add_argument("--ridge", type=non_negative_float, default=0.0)
    synth.add_argument("--csv", action="store_true", help="also write the vectors as synth.csv")

    selftest = sub.add_parser("selftest", help="check all invariants on built-in fixtures")
    selftest.add_argument("--seed", type=non_negative_int, default=0)

    sub.add_parser("serve", help="serve explanations over HTTP")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {
        "mnist_images": args.mnist_images,
        "mnist_labels": args.mnist_labels,
        "mnist_test_images": args.mnist_test_images,
        "mnist_test_labels": args.mnist_test_labels,
        "out_dir": args.out,
        "master_seed": args.seed,
        "noise_levels": args.sigma,
        "rules": args.rule,
        "stabilizer": args.stabilizer,
        "train_limit": args.train_limit,
        "train_on_noisy": False if args.train_on_clean else None,
        "train": {"epochs": args.epochs} if args.epochs is not None else None,
    }
    if getattr(args, "predicted_target", False):
        overrides["explain_predicted"] = True
    if getattr(args, "index", None) and isinstance(args.index, list):
        overrides["digit_indices"] = args.index
    return overrides


def _single(values: List[Any], what: str) -> Any:
    if len(values) != 1:
        raise argparse.ArgumentTypeError(f"explain takes exactly one {what}, got {len(values)}")
    return values[0]


def run(args: argparse.Namespace) -> int:
    if args.command == "synth":
        cmd_synth(args.out, dim=args.dim, distractors=args.distractors, sigma_eps=args.noise_scale,
                  samples=args.samples, ridge=args.ridge, seed=args.seed, write_csv=args.csv)
        return EXIT_OK
    if args.command == "selftest":
        results = cmd_selftest(args.seed)
        return EXIT_OK if all(r.passed for r in results) else NumericalError.exit_code
    if args.command == "serve":
        uvicorn.run("src.api.api:app", **get_server_config())
        return EXIT_OK

    config: ExperimentConfig = load_config(args.config, _overrides(args))
    if args.command == "train":
        cmd_train(config)
    elif args.command == "patterns":
        cmd_patterns(config)
    elif args.command == "explain":
        sigma = _single(args.sigma, "--sigma") if args.sigma else 0.0
        rule = Rule.parse(_single(args.rule, "--rule")) if args.rule else Rule.Z
        result = cmd_explain(config, sigma, args.index, rule, target=args.target, model_path=args.model,
                             patterns_path=args.patterns, out_path=args.output)
        print(f"relevance written to {result.csv_path}")
    elif args.command == "grid":
        cmd_grid(config, args.grid_mode)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging()
    if os.path.exists(env_path):
        logger.info(f"Loaded .env file from: {env_path}")

    try:
        return run(args)
    except argparse.ArgumentTypeError as e:
        parser.error(str(e))
    except DtdError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.info("Stopped by user")
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
