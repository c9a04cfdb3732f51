"""In-process smoke suite behind the ``healthcheck`` command."""
import logging
import time
import unittest
from typing import Dict, List, Literal, TypedDict

from typing_extensions import NotRequired

from .smoke_tests import SmokeTests

logger = logging.getLogger(__name__)

Outcome = Literal["successes", "failures", "errors"]


class JsonTestResult(TypedDict):
    """One unit test; successes carry their run time in microseconds."""

    name: str
    time: NotRequired[int]


JsonTestResults = List[JsonTestResult]


class HealthcheckJsonTestResult(TypedDict):
    tests_passed: bool
    successes: JsonTestResults
    failures: JsonTestResults
    errors: JsonTestResults


def short_name(test: unittest.TestCase) -> str:
    """``Class.test_name`` from a dotted unit test id."""
    parts = test.id().split(".")
    return ".".join(parts[-2:]) if len(parts) >= 2 else "Unknown"


class TimedResult(unittest.TestResult):
    """Collects every outcome by kind, timing the tests that pass."""

    def __init__(self) -> None:
        super().__init__()
        self.outcomes: Dict[Outcome, JsonTestResults] = {
            "successes": [],
            "failures": [],
            "errors": [],
        }
        self._started = 0.0

    def startTest(self, test: unittest.TestCase) -> None:
        super().startTest(test)
        self._started = time.perf_counter()

    def addSuccess(self, test: unittest.TestCase) -> None:
        super().addSuccess(test)
        micros = round(1e6 * (time.perf_counter() - self._started))
        self.outcomes["successes"].append(JsonTestResult(name=short_name(test), time=micros))

    def addFailure(self, test: unittest.TestCase, err) -> None:
        super().addFailure(test, err)
        self.outcomes["failures"].append(JsonTestResult(name=short_name(test)))

    def addError(self, test: unittest.TestCase, err) -> None:
        super().addError(test, err)
        self.outcomes["errors"].append(JsonTestResult(name=short_name(test)))


def run_suite(suite: unittest.TestSuite) -> HealthcheckJsonTestResult:
    result = TimedResult()
    suite.run(result)

    for test, trace in result.failures + result.errors:
        logger.warning("smoke test failed test=%s\n%s", short_name(test), trace)

    return HealthcheckJsonTestResult(tests_passed=result.wasSuccessful(), **result.outcomes)


def healthcheck() -> HealthcheckJsonTestResult:
    """Run :class:`SmokeTests` and summarise the outcome as JSON."""
    suite = unittest.TestLoader().loadTestsFromTestCase(SmokeTests)
    return run_suite(suite)
