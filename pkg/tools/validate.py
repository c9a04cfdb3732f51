"""JSON Schema checks for the experiment config and every written document."""
import enum
import functools
import json
import os
from typing import Any, List, TypedDict, Union

import dotenv
import jsonschema
from jsonschema.exceptions import best_match

from .errors import LabException

dotenv.load_dotenv()

DEFAULT_SCHEMA_DIR = os.path.join(os.path.dirname(os.path.dirname(__file__)), "schemas")

PathItem = Union[str, int]


class SchemaErrorThrown(TypedDict):
    """Where a document broke its schema."""

    message: str
    schema_path: List[PathItem]
    instance_path: List[PathItem]


class ValidationError(LabException):
    """A config or output document does not fit its schema."""

    exit_code = 2

    def __init__(self, message: str, error_thrown: Union[str, SchemaErrorThrown], *args) -> None:
        super().__init__(message, error_thrown, *args)
        self.error_thrown = error_thrown


class ConfigValidators(enum.Enum):
    EXPERIMENT = "config.json"


class OutputValidators(enum.Enum):
    """Schemas for documents the commands write."""

    RUN_RECORD = "output/run_record.json"
    MANIFEST = "output/manifest.json"
    CHECKPOINT = "output/checkpoint.json"
    HEALTHCHECK = "output/healthcheck.json"


DocumentValidators = Union[ConfigValidators, OutputValidators]


def schema_dir() -> str:
    """``SCHEMA_DIR`` from the environment (or ``.env``), else the bundled schemas."""
    return os.getenv("SCHEMA_DIR") or DEFAULT_SCHEMA_DIR


@functools.lru_cache(maxsize=None)
def load_validator(validator_enum: DocumentValidators) -> jsonschema.Draft7Validator:
    """Read and check a schema once per process.

    Raises:
        RuntimeError: If the schema file is missing or is not itself a valid
        draft-07 schema.
    """
    path = os.path.join(schema_dir(), validator_enum.value)

    if not os.path.isfile(path):
        raise RuntimeError(f"Could not find schema for {validator_enum} at {path}")

    with open(path, "r") as f:
        schema = json.load(f)

    try:
        jsonschema.Draft7Validator.check_schema(schema)
    except jsonschema.exceptions.SchemaError as e:
        raise RuntimeError(f"Schema for {validator_enum} is invalid: {e.message}") from e

    return jsonschema.Draft7Validator(schema)


def _describe(error: jsonschema.exceptions.ValidationError) -> SchemaErrorThrown:
    return SchemaErrorThrown(
        message=error.message,
        schema_path=list(error.absolute_schema_path),
        instance_path=list(error.absolute_path),
    )


def document(doc: Any, validator_enum: DocumentValidators) -> None:
    """Check ``doc`` against the schema named by ``validator_enum``.

    Only the most relevant violation is reported.

    Raises:
        ValidationError: If the document breaks the schema or the schema
        could not be loaded.
    """
    name = validator_enum.name.lower()

    try:
        validator = load_validator(validator_enum)
    except Exception as e:
        raise ValidationError(f"Could not load the {name} schema.", str(e)) from e

    error = best_match(validator.iter_errors(doc))

    if error is not None:
        raise ValidationError(
            f"Failed to validate document against the {name} schema.", _describe(error)
        )
