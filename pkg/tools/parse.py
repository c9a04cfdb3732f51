import json
from typing import Dict, Literal, Optional, TypedDict, Union

from .errors import LabException
from .utils import JsonType


class DecodeErrorDetail(TypedDict):
    message: str
    location: Dict[Literal["line", "column"], int]


class ParseError(LabException):
    """Custom exception for all config parsing issues."""

    exit_code = 2

    def __init__(
        self,
        message: str,
        error_thrown: Optional[Union[str, DecodeErrorDetail]] = None,
        *args,
    ) -> None:
        super().__init__(message, error_thrown, *args)
        self.error_thrown = error_thrown


def document(text: Union[str, bytes, JsonType, None]) -> JsonType:
    """Decode a JSON configuration document.

    Args:
        text (Union[str, bytes, JsonType, None]): Raw document text, or an
        already decoded dictionary.

    Raises:
        ParseError: Raised if the document is empty, could not be decoded or
        is not a JSON object.

    Returns:
        JsonType: The decoded document.
    """
    if text is None or (isinstance(text, (str, bytes)) and not text.strip()):
        raise ParseError("No data supplied in config file.")
    elif type(text) is dict:
        return text

    try:
        decoded = json.loads(text)  # type: ignore[arg-type]
    # Catch decode errors and report where the problem is.
    except json.JSONDecodeError as e:
        error_thrown = DecodeErrorDetail(
            message=e.msg, location={"line": e.lineno, "column": e.colno}
        )
    except Exception as e:
        error_thrown = str(e)
    else:
        if isinstance(decoded, dict):
            return decoded
        error_thrown = f"top level is {type(decoded).__name__}, not object"

    raise ParseError("Config file is not a valid JSON object.", error_thrown)


def config_file(path: str) -> JsonType:
    """Read and decode the JSON config at ``path``."""
    with open(path, "r") as f:
        return document(f.read())
