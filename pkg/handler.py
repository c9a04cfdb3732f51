import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Tuple

import dotenv

from .tools import commands
from .tools.errors import LabException
from .tools.utils import COMMANDS, CommandOptions, ErrorResponse, Response

dotenv.load_dotenv()

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s level=%(levelname)s logger=%(name)s %(message)s"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def handle_command(command: str, options: CommandOptions) -> Response:
    """Switch case for handling different command options.

    Args:
        command (str): The name of the subcommand to run.
        options (CommandOptions): Flags given on the command line.

    Returns:
        Response: The response object returned by the handler.
    """
    if command == "healthcheck":
        return commands.healthcheck()

    elif command == "gen-data":
        return commands.gen_data(options)

    elif command == "train-teacher":
        return commands.train_teacher(options)

    elif command == "distill":
        return commands.distill_student(options)

    elif command == "defense-grid":
        return commands.defense_grid(options)

    elif command == "stage-ablation":
        return commands.stage_ablation(options)

    elif command == "bench-overhead":
        return commands.bench_overhead(options)

    elif command == "analyze-features":
        return commands.analyze_features(options)

    return Response(error=ErrorResponse(message=f"Unknown command '{command}'."))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asvp-lab",
        description="Adaptive singular value perturbation laboratory.",
    )
    parser.add_argument("command", help=f"one of: {', '.join(COMMANDS)}")
    parser.add_argument("--config", help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, help="global seed, overrides the config")
    parser.add_argument("--workers", type=int, help="concurrent grid cells")
    parser.add_argument("--out", help="output directory, overrides the config")
    parser.add_argument("--checkpoint", help="network checkpoint to analyse or distil from")
    parser.add_argument("--input", help="TensorFile or PGM/PPM image to analyse")
    parser.add_argument(
        "--train-inline",
        action="store_true",
        help="train the teacher instead of loading a checkpoint",
    )
    return parser


def run(argv: Optional[List[str]] = None) -> Tuple[Response, int]:
    """Parse ``argv``, run the command and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    options = CommandOptions(
        config=args.config,
        seed=args.seed,
        workers=args.workers,
        out=args.out,
        checkpoint=args.checkpoint,
        input=args.input,
        train_inline=args.train_inline,
    )

    try:
        response = handle_command(args.command, options)
        return response, EXIT_CONFIG if "error" in response else EXIT_OK

    except LabException as e:
        error = ErrorResponse(**e.error_dict)
        code = e.exit_code

    except OSError as e:
        error = ErrorResponse(message="Could not read or write a file.", detail=str(e))
        code = EXIT_IO

    # Catch-all for any unexpected errors.
    except Exception as e:
        error = ErrorResponse(
            message="An exception was raised while executing the command.",
            detail=(str(e) if str(e) != "" else repr(e)),
        )
        code = EXIT_NUMERIC

    logger.error("command failed command=%s exit=%d message=%s", args.command, code, error["message"])
    return Response(error=error), code


def handler(argv: Optional[List[str]] = None) -> Response:
    """Run one CLI invocation and return its response body.

    Args:
        argv (Optional[List[str]]): Arguments without the program name;
        defaults to ``sys.argv[1:]``.

    Returns:
        Response: The result of the command, or the error it raised.
    """
    return run(argv)[0]


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=os.getenv("ASVP_LOG_LEVEL", "INFO").upper(),
        format=LOG_FORMAT,
        stream=sys.stderr,
    )

    response, code = run(argv)
    json.dump(response, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return code
