#!/usr/bin/env python3

# Copyright (c) 2025 Robert McKenzie (@M1XZG)
# Repository: forecastad
#
# This software is released under the MIT License.
# See LICENSE.md for details.

"""Exception hierarchy. main.py maps these to process exit codes."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


class ForecastADError(Exception):
    exit_code = 1


class ConfigError(ForecastADError, ValueError):
    exit_code = EXIT_CONFIG


class MissingArtifactError(ForecastADError):
    """A prerequisite file is absent. Names the command that produces it."""

    exit_code = EXIT_MISSING

    def __init__(self, path, producer: str):
        self.path = str(path)
        self.producer = producer
        super().__init__(f"Missing {self.path} (run `main.py {producer}` first)")


class NumericalError(ForecastADError):
    exit_code = EXIT_NUMERICAL


class OrderingError(ForecastADError, ValueError):
    def __init__(self, index: int, previous: float, current: float):
        self.index = index
        super().__init__(
            f"Timestamps not strictly increasing at index {index}: {previous} -> {current}"
        )


class UndefinedMetricError(ForecastADError, ValueError):
    pass


class DayFileError(ForecastADError, OSError):
    pass
