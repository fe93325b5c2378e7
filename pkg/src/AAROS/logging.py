from __future__ import annotations

import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import polars as pl

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str | int = "INFO") -> None:
    """
    Install a single stream handler on the package logger. Calling it again only changes the level.
    """
    package_logger = logging.getLogger("AAROS")
    if not package_logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        package_logger.addHandler(handler)
    package_logger.setLevel(level if isinstance(level, int) else level.upper())


class AAROSLogger:
    """
    The logging module will contain all functions related to logging and/or printing training progress and
    information both during and after a run. Metric rows are kept append-only, in the order they were recorded.
    """

    def __init__(
        self,
        component: str,
        verbose: bool = False,
        print_interval: int = 10,
        write_file: bool = True,
    ) -> None:
        """
        :param component: The name of the stage being logged (e.g. "sft", "aar"); it becomes the logger name suffix
        :param verbose: a flag to indicate if every iteration should be printed
        :param print_interval: the number of iterations to run in between each printed logging output
        :param write_file: a flag to indicate if the metric rows should be written to disk by `write_csv`
        """
        self.component: str = component
        self.verbose: bool = verbose
        self.print_interval: int = max(1, print_interval)
        self.write_file: bool = write_file
        self.logger: logging.Logger = logging.getLogger(f"AAROS.{component}")
        self.rows: list[dict[str, Any]] = []

    def record(self, row: Mapping[str, Any]) -> None:
        self.rows.append(dict(row))

    def iteration_print(self, current_iteration: int, metrics: Mapping[str, Any]) -> None:
        """
        A method which prints out informative training statistics at the appropriate print_interval

        :param current_iteration: The current iteration that the run is at when calling this method
        :param metrics: The metric values to print
        """
        if not self.verbose and current_iteration % self.print_interval != 0:
            return None
        summary = " ".join(
            f"{key}={value:.4f}" if isinstance(value, float) else f"{key}={value}" for key, value in metrics.items()
        )
        self.logger.info("iteration %d %s", current_iteration, summary)
        return None

    def to_frame(self) -> pl.DataFrame:
        if not self.rows:
            return pl.DataFrame()
        return pl.DataFrame(self.rows)

    def write_csv(self, path: str | Path) -> Path | None:
        if not self.write_file:
            return None
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().write_csv(path)
        self.logger.info("Wrote %d %s metric rows to %s", len(self.rows), self.component, path)
        return path
