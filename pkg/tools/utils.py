from __future__ import annotations

from typing import Any, Dict, Literal, NamedTuple, Optional, TypedDict, Union, get_args

from typing_extensions import NotRequired

JsonType = Dict[str, Any]
SupportedCommands = Literal[
    "gen-data",
    "train-teacher",
    "distill",
    "defense-grid",
    "stage-ablation",
    "bench-overhead",
    "analyze-features",
    "healthcheck",
]

COMMANDS = get_args(SupportedCommands)


class ErrorResponse(TypedDict):
    """Error object returned in the handler response."""

    message: str
    detail: NotRequired[Any]


class Response(TypedDict, total=False):
    """Response object returned by the handler for every command."""

    command: SupportedCommands
    result: Union[Dict, TypedDict]
    error: Union[Dict, ErrorResponse]


class CommandOptions(NamedTuple):
    """Command-line flags; set flags override the config file."""

    config: Optional[str] = None
    seed: Optional[int] = None
    workers: Optional[int] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    input: Optional[str] = None
    train_inline: bool = False
